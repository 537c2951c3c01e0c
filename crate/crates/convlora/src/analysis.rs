//! Inspection instruments: mean attention distance, Fourier relative log
//! amplitude of feature maps, expert-utilization histograms, and a
//! chi-square homogeneity test for comparing utilization across runs.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SPECTRUM_EPS: f64 = 1e-12;

/// Per-layer, per-head mean attention distances in patch-grid units.
#[derive(Debug, Clone)]
pub struct AttnDistanceReport {
    pub per_layer_head: Vec<Vec<f64>>,
}

/// Mean attention distance for one layer's maps, laid out (B*heads) x L x L
/// batch-major. Per head: mean over images and queries of
/// Σ_j attn[q,j] · ‖center(q) − center(j)‖ with patch centers on the integer
/// grid. Rows must sum to 1 within 1e-6.
pub fn mean_attention_distance(
    attn: &[f64],
    batch: usize,
    heads: usize,
    gh: usize,
    gw: usize,
) -> Result<Vec<f64>> {
    let l = gh * gw;
    if attn.len() != batch * heads * l * l || l == 0 {
        return Err(Error::Dimension(format!(
            "attention buffer length {} does not match {batch} x {heads} x {l} x {l}",
            attn.len()
        )));
    }
    // Pairwise patch-center distances.
    let mut dist = vec![0.0; l * l];
    for q in 0..l {
        let (qy, qx) = (q / gw, q % gw);
        for j in 0..l {
            let (jy, jx) = (j / gw, j % gw);
            let dy = qy as f64 - jy as f64;
            let dx = qx as f64 - jx as f64;
            dist[q * l + j] = (dy * dy + dx * dx).sqrt();
        }
    }
    let mut per_head = vec![0.0; heads];
    for bi in 0..batch {
        for h in 0..heads {
            let base = (bi * heads + h) * l * l;
            for q in 0..l {
                let row = &attn[base + q * l..base + (q + 1) * l];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Data(format!(
                        "attention row sums to {sum}, not 1"
                    )));
                }
                per_head[h] += row
                    .iter()
                    .zip(&dist[q * l..(q + 1) * l])
                    .map(|(a, d)| a * d)
                    .sum::<f64>();
            }
        }
    }
    let norm = (batch * l) as f64;
    Ok(per_head.into_iter().map(|v| v / norm).collect())
}

/// Relative log amplitude per normalized-frequency radial bin.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// log(amp(f) + ε) − log(amp(0) + ε) averaged over samples and channels;
    /// the zero-frequency reference itself is 0 by definition.
    pub rel_log_amp: Vec<f64>,
}

/// 2-D DFT amplitude of each channel, binned by normalized frequency radius
/// into ⌈min(H,W)/2⌉ equal-width bins, reported relative to the DC
/// amplitude of the same map and averaged over all B·C maps.
pub fn fourier_log_amplitude(
    features: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<SpectrumReport> {
    if h < 2 || w < 2 || features.len() != b * c * h * w {
        return Err(Error::Dimension(format!(
            "feature buffer length {} does not match {b} x {c} x {h} x {w} (H, W >= 2)",
            features.len()
        )));
    }
    let nbins = h.min(w).div_ceil(2);
    let mut planner = FftPlanner::<f64>::new();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);

    // Precompute each frequency's radial bin; DC is the reference, not a bin
    // member.
    let rmax = (2.0f64 * 0.25).sqrt(); // radius of (0.5, 0.5) cycles/pixel
    let bin_of: Vec<Option<usize>> = (0..h * w)
        .map(|i| {
            let (u, v) = (i / w, i % w);
            if u == 0 && v == 0 {
                return None;
            }
            let fu = u.min(h - u) as f64 / h as f64;
            let fv = v.min(w - v) as f64 / w as f64;
            let r = (fu * fu + fv * fv).sqrt() / rmax;
            Some(((r * nbins as f64) as usize).min(nbins - 1))
        })
        .collect();

    let mut acc = vec![0.0; nbins];
    let mut cnt = vec![0u64; nbins];
    let mut grid = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for map in features.chunks(h * w) {
        for (g, &v) in grid.iter_mut().zip(map) {
            *g = Complex::new(v, 0.0);
        }
        for row in grid.chunks_mut(w) {
            fft_w.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = grid[y * w + x];
            }
            fft_h.process(&mut col);
            for y in 0..h {
                grid[y * w + x] = col[y];
            }
        }
        let dc = (grid[0].norm() + SPECTRUM_EPS).ln();
        for (i, bin) in bin_of.iter().enumerate() {
            if let Some(bi) = bin {
                acc[*bi] += (grid[i].norm() + SPECTRUM_EPS).ln() - dc;
                cnt[*bi] += 1;
            }
        }
    }
    let rel_log_amp: Vec<f64> = acc
        .iter()
        .zip(&cnt)
        .map(|(a, &n)| if n == 0 { f64::NAN } else { a / n as f64 })
        .collect();
    Ok(SpectrumReport { rel_log_amp })
}

/// Expert-selection counts per Conv-LoRA layer and aggregated.
#[derive(Debug, Clone)]
pub struct UtilizationHistogram {
    pub per_layer: Vec<Vec<u64>>,
    pub total: Vec<u64>,
}

/// Build the histogram from logged gate events: each event is
/// (layer index, experts active for one sample).
pub fn expert_utilization(
    events: &[(usize, Vec<usize>)],
    layers: usize,
    experts: usize,
) -> Result<UtilizationHistogram> {
    let mut per_layer = vec![vec![0u64; experts]; layers];
    let mut total = vec![0u64; experts];
    for (layer, active) in events {
        if *layer >= layers {
            return Err(Error::Data(format!("gate event for unknown layer {layer}")));
        }
        for &e in active {
            if e >= experts {
                return Err(Error::Data(format!("gate event for unknown expert {e}")));
            }
            per_layer[*layer][e] += 1;
            total[e] += 1;
        }
    }
    Ok(UtilizationHistogram { per_layer, total })
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma Q(a, x).
fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        // Series for P(a, x), return 1 - P.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x) (modified Lentz).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut f = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            f *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        f * (-x + a * x.ln() - ln_gamma(a)).exp()
    }
}

/// Chi-square homogeneity test between two count histograms over the same
/// categories; returns the p-value. Categories empty in both histograms are
/// dropped.
pub fn chi_square_p(a: &[u64], b: &[u64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument("histograms must share categories".into()));
    }
    let na: f64 = a.iter().map(|&v| v as f64).sum();
    let nb: f64 = b.iter().map(|&v| v as f64).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data("empty histogram in chi-square test".into()));
    }
    let total = na + nb;
    let mut stat = 0.0;
    let mut cats = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cats += 1;
        let ea = na * col / total;
        let eb = nb * col / total;
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if cats < 2 {
        return Ok(1.0);
    }
    let df = (cats - 1) as f64;
    Ok(gamma_q(df / 2.0, stat / 2.0).clamp(0.0, 1.0))
}

/// Write a grayscale heatmap as binary PGM, linearly rescaled to 0..255.
pub fn write_pgm(path: &Path, data: &[f64], w: usize, h: usize) -> Result<()> {
    if data.len() != w * h || data.is_empty() {
        return Err(Error::Dimension("PGM extent mismatch".into()));
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(w * h + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(data.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests;
