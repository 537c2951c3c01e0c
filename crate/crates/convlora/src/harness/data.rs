//! Synthetic segmentation data: textured backgrounds with geometric objects
//! whose radii span a configurable range, so scale-specialized experts have
//! something real to detect.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seg::GtSegments;

/// Dataset splits map to disjoint rng streams of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Extra stream for warm-start pretraining, disjoint from the others.
    Pretrain,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Pretrain => 3,
        }
    }
}

/// Generation parameters. `classes == 0` means a binary foreground/background
/// task; `classes == K > 0` assigns shape type -> class with background
/// label K.
#[derive(Debug, Clone)]
pub struct DataSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Canvas side length S (images are 3 x S x S).
    pub size: usize,
    /// 0 = binary task, K > 0 = K-class task (labels in 0..=K, K = background).
    pub classes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Mean intensity offset of object interiors over the background.
    pub contrast: f64,
    /// Amplitude of the correlated background noise.
    pub bg_noise: f64,
    /// Amplitude of the correlated noise inside objects.
    pub fg_noise: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_train: 96,
            n_val: 24,
            n_test: 24,
            size: 64,
            classes: 0,
            radius_min: 2.0,
            radius_max: 24.0,
            min_objects: 1,
            max_objects: 2,
            contrast: 0.30,
            bg_noise: 0.25,
            fg_noise: 0.25,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("canvas size must be at least 8".into()));
        }
        if !(self.radius_min > 0.0)
            || !(self.radius_max >= self.radius_min)
            || self.radius_max > self.size as f64 / 2.0
        {
            return Err(Error::Config(format!(
                "radius range [{}, {}] invalid for canvas {}",
                self.radius_min, self.radius_max, self.size
            )));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::Config("object count range invalid".into()));
        }
        if self.classes > 3 {
            return Err(Error::Config("at most 3 shape classes available".into()));
        }
        if self.contrast < 0.0 || self.bg_noise < 0.0 || self.fg_noise < 0.0 {
            return Err(Error::Config("contrast and noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train | Split::Pretrain => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

/// One image with every ground-truth view the losses and metrics need.
#[derive(Debug, Clone)]
pub struct Sample {
    /// 3 x S x S intensities.
    pub image: Vec<f64>,
    /// S x S binary union mask (foreground anywhere).
    pub mask: Vec<f64>,
    /// S x S per-pixel class labels; binary task: {0, 1}; K-class task:
    /// 0..K-1 shapes, K background.
    pub labels: Vec<usize>,
    /// Per-object masks and classes for set matching.
    pub segments: GtSegments,
    /// Radii of the objects actually placed (for scale statistics).
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// Per-channel tint direction for each shape class, scaled by contrast.
const CLASS_TINT: [[f64; 3]; 3] = [
    [1.0, 0.2, -0.6],  // circles
    [-0.6, 1.0, 0.2],  // squares
    [0.2, -0.6, 1.0],  // triangles
];

/// Correlated noise: white gaussian field smoothed by two 3x3 box-blur
/// passes, zero mean by construction.
fn correlated_noise(rng: &mut ChaCha8Rng, s: usize, amp: f64) -> Vec<f64> {
    let mut field: Vec<f64> = (0..s * s).map(|_| gauss(rng)).collect();
    let mut tmp = vec![0.0; s * s];
    for _ in 0..2 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, s as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, s as i64 - 1) as usize;
                        acc += field[yy * s + xx];
                    }
                }
                tmp[y * s + x] = acc / 9.0;
            }
        }
        std::mem::swap(&mut field, &mut tmp);
    }
    // Two box blurs shrink the std to roughly 0.33; rescale so `amp` means
    // what it says.
    for v in &mut field {
        *v *= amp * 3.0;
    }
    field
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms deterministically.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
        // Upward triangle inscribed in the radius.
        _ => dy <= r * 0.5 && dy >= -r && dx.abs() <= (dy + r) * 0.577,
    }
}

/// Deterministic dataset for one split: every image is a pure function of
/// (spec, seed, split, index) via a dedicated rng stream.
pub fn gen_synthetic(spec: &DataSpec, seed: u64, split: Split) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.count(split);
    let s = spec.size;
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(split.stream() * (1 << 32) + idx as u64 + 1);
        samples.push(gen_image(spec, s, &mut rng));
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        split,
        samples,
    })
}

fn gen_image(spec: &DataSpec, s: usize, rng: &mut ChaCha8Rng) -> Sample {
    let k = spec.classes;
    let bg_label = if k == 0 { 0 } else { k };
    let mut image = vec![0.0; 3 * s * s];
    for ch in 0..3 {
        let noise = correlated_noise(rng, s, spec.bg_noise);
        for i in 0..s * s {
            image[ch * s * s + i] = 0.5 + noise[i];
        }
    }

    let n_obj = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut labels = vec![bg_label; s * s];
    let mut owner = vec![usize::MAX; s * s];
    let mut radii = Vec::with_capacity(n_obj);
    let mut classes = Vec::with_capacity(n_obj);
    for oi in 0..n_obj {
        let r = rng.gen_range(spec.radius_min..=spec.radius_max);
        let lo = r.ceil();
        let hi = s as f64 - 1.0 - r.ceil();
        let cx = rng.gen_range(lo..=hi.max(lo));
        let cy = rng.gen_range(lo..=hi.max(lo));
        let shape = if k == 0 { rng.gen_range(0..2usize) } else { rng.gen_range(0..k) };
        let class = if k == 0 { 0 } else { shape };
        let fg = correlated_noise(rng, s, spec.fg_noise);
        let tint = CLASS_TINT[shape];
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if inside(shape, dx, dy, r) {
                    let i = y * s + x;
                    labels[i] = class;
                    owner[i] = oi;
                    for ch in 0..3 {
                        image[ch * s * s + i] = 0.5 + spec.contrast * tint[ch] + fg[i];
                    }
                }
            }
        }
        radii.push(r);
        classes.push(class);
    }

    // Later objects overwrite earlier pixels, so segment masks are disjoint;
    // fully occluded objects are dropped.
    let mut seg_masks: Vec<Vec<f64>> = vec![vec![0.0; s * s]; n_obj];
    for (i, &o) in owner.iter().enumerate() {
        if o != usize::MAX {
            seg_masks[o][i] = 1.0;
        }
    }
    let mut segments = GtSegments {
        masks: Vec::new(),
        classes: Vec::new(),
    };
    let mut kept_radii = Vec::new();
    for (oi, m) in seg_masks.into_iter().enumerate() {
        if m.iter().any(|&v| v > 0.0) {
            segments.masks.push(m);
            segments.classes.push(classes[oi]);
            kept_radii.push(radii[oi]);
        }
    }
    let mask: Vec<f64> = owner
        .iter()
        .map(|&o| if o == usize::MAX { 0.0 } else { 1.0 })
        .collect();
    Sample {
        image,
        mask,
        labels,
        segments,
        radii: kept_radii,
    }
}

/// Kolmogorov–Smirnov p-value of `values` against Uniform(lo, hi), using the
/// asymptotic Kolmogorov distribution with the standard small-sample
/// correction.
pub fn ks_uniform_p(values: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if values.is_empty() || !(hi > lo) {
        return Err(Error::Argument("KS test needs data and a proper interval".into()));
    }
    let mut v: Vec<f64> = values.iter().map(|&x| (x - lo) / (hi - lo)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let t = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += if k % 2 == 1 { 2.0 * t } else { -2.0 * t };
    }
    Ok(p.clamp(0.0, 1.0))
}
