//! Matching costs and training losses.

use rand::Rng;

use super::decoder::DecoderOutput;
use super::hungarian::Matching;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing constant shared by dice terms and the weighted-IoU loss.
const SMOOTH: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct LossWeights {
    pub mask: f64,
    pub cls: f64,
    pub moe: f64,
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            cls: 2.0,
            moe: 2.0,
            ce: 5.0,
            dice: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mask", self.mask),
            ("cls", self.cls),
            ("moe", self.moe),
            ("ce", self.ce),
            ("dice", self.dice),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Ground-truth segments of one image: binary masks (H*W each, row-major)
/// with their class labels in 0..K.
#[derive(Debug, Clone)]
pub struct GtSegments {
    pub masks: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matching cost matrix (N x M) for one image:
/// cost(j,i) = λ_ce·BCE(mask_j, gt_i) + λ_dice·DiceLoss(mask_j, gt_i)
///           − λ_cls·p_j(class_i),
/// with the mask terms evaluated on `points` uniformly chosen pixels (all
/// pixels, in order, when points ≥ H·W).
pub fn match_cost<R: Rng + ?Sized>(
    mask_logits: &[f64],  // N x HW
    class_logits: &[f64], // N x (K+1)
    n: usize,
    hw: usize,
    kc: usize,
    gt: &GtSegments,
    w: &LossWeights,
    points: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let m = gt.masks.len();
    if m > n {
        return Err(Error::Capacity(format!(
            "{m} ground-truth segments exceed {n} prediction slots"
        )));
    }
    if gt.classes.len() != m {
        return Err(Error::Data("segment/class count mismatch".into()));
    }
    if gt.classes.iter().any(|&c| c + 1 >= kc) && kc > 0 {
        // classes must be real classes, never the "no object" slot
        return Err(Error::Data("ground-truth class out of range".into()));
    }

    // Shared point set for every (slot, gt) pair of this image.
    let idx: Vec<usize> = if points >= hw {
        (0..hw).collect()
    } else {
        let mut all: Vec<usize> = (0..hw).collect();
        for i in 0..points {
            let j = rng.gen_range(i..hw);
            all.swap(i, j);
        }
        all.truncate(points);
        all
    };
    let np = idx.len() as f64;

    // Class probabilities per slot.
    let probs: Vec<f64> = class_logits
        .chunks(kc)
        .flat_map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(move |e| e / z)
        })
        .collect();

    let mut cost = vec![0.0; n * m];
    for j in 0..n {
        let row = &mask_logits[j * hw..(j + 1) * hw];
        for (i, g) in gt.masks.iter().enumerate() {
            if g.len() != hw {
                return Err(Error::Data("ground-truth mask extent mismatch".into()));
            }
            let (mut bce, mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0, 0.0);
            for &p in &idx {
                let x = row[p];
                let y = g[p];
                bce += softplus(x) - x * y;
                let s = sigmoid(x);
                inter += s * y;
                psum += s;
                gsum += y;
            }
            let dice_loss = 1.0 - (2.0 * inter + SMOOTH) / (psum + gsum + SMOOTH);
            cost[j * m + i] =
                w.ce * bce / np + w.dice * dice_loss - w.cls * probs[j * kc + gt.classes[i]];
        }
    }
    Ok(cost)
}

/// Differentiable multi-class training loss:
/// λ_mask (λ_ce L_ce + λ_dice L_dice) + λ_cls L_cls + λ_MoE L_MoE.
/// Matched slots incur mask + class loss; unmatched slots incur class loss
/// toward "no object" (index K). Mask terms average over matched pairs,
/// class CE averages over all B·N slots.
pub fn multiclass_loss<F: Scalar>(
    out: &DecoderOutput<F>,
    gts: &[GtSegments],
    matchings: &[Matching],
    w: &LossWeights,
    moe_loss: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    w.validate()?;
    let ms = out.mask_logits.shape();
    let cs = out.class_logits.shape();
    let (b, n, h, ww) = (ms[0], ms[1], ms[2], ms[3]);
    let kc = cs[2];
    if gts.len() != b || matchings.len() != b {
        return Err(Error::Data("batch size mismatch in loss inputs".into()));
    }
    let hw = h * ww;
    let graph = out.mask_logits.graph();

    let mut ce_sum: Option<Tensor<F>> = None;
    let mut dice_sum: Option<Tensor<F>> = None;
    let mut cls_sum: Option<Tensor<F>> = None;
    let mut pairs = 0usize;
    let add_to = |acc: &mut Option<Tensor<F>>, t: Tensor<F>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(a) => a.add(&t)?,
            None => t,
        });
        Ok(())
    };

    for (bi, (gt, mm)) in gts.iter().zip(matchings).enumerate() {
        let masks = out.mask_logits.select_batch(&[bi])?.reshape(&[n, hw])?;
        let logp = out
            .class_logits
            .select_batch(&[bi])?
            .reshape(&[n, kc])?
            .log_softmax_axis(1)?;
        let mut class_of_slot = vec![kc - 1; n]; // default: "no object"
        for (i, &j) in mm.slot_of.iter().enumerate() {
            class_of_slot[j] = gt.classes[i];
            let row = masks.select_batch(&[j])?; // 1 x HW
            let g = graph.constant(gt.masks[i].iter().map(|&v| F::c(v)).collect(), &[1, hw])?;
            // BCE with logits: softplus(x) - x y, mean over pixels.
            let bce = row.softplus()?.sub(&row.mul(&g)?)?.mean_all()?;
            add_to(&mut ce_sum, bce)?;
            // Smoothed dice loss on the full mask.
            let p = row.sigmoid()?;
            let inter = p.mul(&g)?.sum_all()?;
            let denom = p.sum_all()?.add(&g.sum_all()?)?.affine(F::one(), F::c(SMOOTH))?;
            let dice = inter
                .affine(F::c(2.0), F::c(SMOOTH))?
                .div(&denom)?
                .affine(F::c(-1.0), F::one())?;
            add_to(&mut dice_sum, dice)?;
            pairs += 1;
        }
        for (j, &c) in class_of_slot.iter().enumerate() {
            let nll = logp.select_batch(&[j])?.select_last(&[c])?.neg()?.sum_all()?;
            add_to(&mut cls_sum, nll)?;
        }
    }

    let zero = graph.scalar(F::zero());
    let pair_norm = F::c(1.0 / pairs.max(1) as f64);
    let ce = ce_sum.unwrap_or_else(|| zero.clone()).scale(pair_norm)?;
    let dice = dice_sum.unwrap_or_else(|| zero.clone()).scale(pair_norm)?;
    let cls = cls_sum
        .unwrap_or_else(|| zero.clone())
        .scale(F::c(1.0 / (b * n) as f64))?;

    let mask_term = ce
        .scale(F::c(w.ce))?
        .add(&dice.scale(F::c(w.dice))?)?
        .scale(F::c(w.mask))?;
    let mut total = mask_term.add(&cls.scale(F::c(w.cls))?)?;
    if let Some(moe) = moe_loss {
        total = total.add(&moe.scale(F::c(w.moe))?)?;
    }
    total.reshape(&[1])
}

/// Border-aware per-pixel weights w = 1 + 5·|meanpool₁₅ₓ₁₅(gt) − gt| with
/// zero padding; the pool always divides by 225.
pub(crate) fn structure_weights(gt: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -7i64..=7 {
                for dx in -7i64..=7 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        s += gt[yy as usize * w + xx as usize];
                    }
                }
            }
            let pooled = s / 225.0;
            out[y * w + x] = 1.0 + 5.0 * (pooled - gt[y * w + x]).abs();
        }
    }
    out
}

/// Binary segmentation loss: border-weighted BCE plus border-weighted IoU,
/// averaged over the batch.
pub fn structure_loss<F: Scalar>(pred_logits: &Tensor<F>, gt: &[f64]) -> Result<Tensor<F>> {
    let s = pred_logits.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dimension(format!(
            "structure_loss expects B x 1 x H x W logits, got {s:?}"
        )));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    if gt.len() != b * hw {
        return Err(Error::Data("ground truth extent mismatch".into()));
    }
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("structure_loss ground truth must be binary".into()));
    }
    let mut weights = Vec::with_capacity(b * hw);
    for bi in 0..b {
        weights.extend(structure_weights(&gt[bi * hw..(bi + 1) * hw], h, w));
    }
    let graph = pred_logits.graph();
    let x = pred_logits.reshape(&[b, hw])?;
    let g = graph.constant(gt.iter().map(|&v| F::c(v)).collect(), &[b, hw])?;
    let wt = graph.constant(weights.iter().map(|&v| F::c(v)).collect(), &[b, hw])?;

    let bce = x.softplus()?.sub(&x.mul(&g)?)?;
    let wbce = bce.mul(&wt)?.sum_axis(1)?.div(&wt.sum_axis(1)?)?;

    let p = x.sigmoid()?;
    let inter = p.mul(&g)?.mul(&wt)?.sum_axis(1)?;
    let union = p.add(&g)?.mul(&wt)?.sum_axis(1)?;
    let wiou = inter
        .affine(F::one(), F::c(SMOOTH))?
        .div(&union.sub(&inter)?.affine(F::one(), F::c(SMOOTH))?)?
        .affine(F::c(-1.0), F::one())?;

    wbce.add(&wiou)?.mean_all()
}
