//! Semantic inference and evaluation metrics.

use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel class labels for one image from N mask/class slot pairs:
/// score(c) = Σ_j sigmoid(mask_j) · softmax(class_j)[c] over the K real
/// classes ("no object" excluded); label = argmax, ties to the lowest class.
pub fn semantic_inference(
    mask_logits: &[f64],  // N x HW
    class_logits: &[f64], // N x (K+1)
    n: usize,
    hw: usize,
    kc: usize,
) -> Result<Vec<usize>> {
    if mask_logits.len() != n * hw || class_logits.len() != n * kc || kc < 2 {
        return Err(Error::Dimension("semantic_inference shape mismatch".into()));
    }
    let k = kc - 1;
    let probs: Vec<f64> = class_logits
        .chunks(kc)
        .flat_map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(move |e| e / z)
        })
        .collect();
    let mut labels = vec![0usize; hw];
    for p in 0..hw {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += sigmoid(mask_logits[j * hw + p]) * probs[j * kc + c];
            }
            if s > best.1 {
                best = (c, s);
            }
        }
        labels[p] = best.0;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub iou: f64,
    pub dice: f64,
    pub acc: f64,
    pub mae: f64,
    /// Balanced error rate, reported x100.
    pub ber: f64,
}

/// Metrics for one binary mask: `pred_prob` in [0,1], thresholded at 0.5;
/// `gt` strictly binary. Empty-union IoU is 1 when both masks are empty,
/// 0 otherwise; BER terms with an empty denominator contribute 0.
pub fn binary_metrics(pred_prob: &[f64], gt: &[f64]) -> Result<BinaryMetrics> {
    if pred_prob.len() != gt.len() || gt.is_empty() {
        return Err(Error::Dimension("metric extent mismatch".into()));
    }
    if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("metrics ground truth must be binary".into()));
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0u64, 0u64, 0u64, 0u64);
    let mut mae = 0.0;
    for (&p, &g) in pred_prob.iter().zip(gt) {
        mae += (p - g).abs();
        let pb = p > 0.5;
        let gb = g > 0.5;
        match (pb, gb) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => tn += 1,
        }
    }
    let inter = tp as f64;
    let union = (tp + fp + fnn) as f64;
    let iou = if union == 0.0 { 1.0 } else { inter / union };
    let sizes = (2 * tp + fp + fnn) as f64;
    let dice = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
    let pos = (tp + fnn) as f64;
    let neg = (tn + fp) as f64;
    let fnr = if pos > 0.0 { fnn as f64 / pos } else { 0.0 };
    let fpr = if neg > 0.0 { fp as f64 / neg } else { 0.0 };
    Ok(BinaryMetrics {
        iou,
        dice,
        acc: (tp + tn) as f64 / gt.len() as f64,
        mae: mae / gt.len() as f64,
        ber: 0.5 * (fnr + fpr) * 100.0,
    })
}

/// Mean IoU over the classes present in prediction or ground truth.
pub fn mean_iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Dimension("mIoU extent mismatch".into()));
    }
    let mut inter = vec![0u64; num_classes];
    let mut pc = vec![0u64; num_classes];
    let mut gc = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::Data("class label out of range".into()));
        }
        pc[p] += 1;
        gc[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let union = pc[c] + gc[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Data("no classes present".into()));
    }
    Ok(sum / present as f64)
}
