//! Apply the inspection instruments to a trained checkpoint: attention
//! distances, feature-spectrum profile, expert utilization, and PGM dumps.

use std::path::Path;

use crate::adapters::Mode;
use crate::analysis::{
    expert_utilization, fourier_log_amplitude, mean_attention_distance, write_pgm,
    UtilizationHistogram,
};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::data::{gen_synthetic, Split};
use crate::harness::train::{build_model, Model};
use crate::params::{load_checkpoint, Session};

pub struct AnalysisReport {
    /// Per layer, per head mean attention distance (patch units).
    pub attn: Vec<Vec<f64>>,
    /// Mean relative log amplitude per radial frequency bin.
    pub spectrum: Vec<f64>,
    pub utilization: UtilizationHistogram,
}

/// Run all instruments over up to `n_images` test images.
pub fn analyze_model(model: &Model, n_images: usize) -> Result<AnalysisReport> {
    let cfg = &model.cfg;
    let ds = gen_synthetic(&cfg.data, cfg.seed, Split::Test)?;
    let take = n_images.min(ds.samples.len()).max(1);
    let s = cfg.img_size;
    let g = cfg.img_size / cfg.patch_size;
    let heads = cfg.heads;
    let depth = cfg.depth;

    let mut attn_sum = vec![vec![0.0; heads]; depth];
    let mut spec_sum: Vec<f64> = Vec::new();
    let mut total_images = 0usize;
    let mut events: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut first_dump: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;

    for chunk in ds.samples[..take].chunks(cfg.batch) {
        let b = chunk.len();
        let mut images = Vec::with_capacity(b * 3 * s * s);
        for sm in chunk {
            images.extend_from_slice(&sm.image);
        }
        let mut sess = Session::new();
        let xt = sess.constant(images, &[b, 3, s, s])?;
        let enc = model.encoder.forward(&mut sess, &xt, Mode::Eval, None, true)?;
        let dec = model.decoder.forward(&mut sess, &enc.features)?;

        for (li, maps) in enc.attn.iter().enumerate() {
            let d = mean_attention_distance(maps, b, heads, g, g)?;
            for (h, v) in d.iter().enumerate() {
                attn_sum[li][h] += v * b as f64;
            }
        }
        let feats = enc.features.value();
        let rep = fourier_log_amplitude(&feats, b, cfg.dim, g, g)?;
        if spec_sum.is_empty() {
            spec_sum = vec![0.0; rep.rel_log_amp.len()];
        }
        for (acc, v) in spec_sum.iter_mut().zip(&rep.rel_log_amp) {
            *acc += v * b as f64;
        }
        for (li, d) in enc.decisions.iter().enumerate() {
            for active in &d.active {
                events.push((li, active.clone()));
            }
        }
        if first_dump.is_none() {
            let hw = s * s;
            let mask: Vec<f64> = dec.mask_logits.value()[..hw]
                .iter()
                .map(|&x| 1.0 / (1.0 + (-x).exp()))
                .collect();
            let feat0 = feats[..g * g].to_vec();
            first_dump = Some((mask, chunk[0].mask.clone(), feat0));
        }
        total_images += b;
    }

    for row in &mut attn_sum {
        for v in row.iter_mut() {
            *v /= total_images as f64;
        }
    }
    for v in &mut spec_sum {
        *v /= total_images as f64;
    }

    let layers = match model.encoder.blocks.first() {
        Some(b) if b.q.adapter.is_some() => depth * 3,
        _ => 0,
    };
    let experts = cfg.experts.max(1);
    let utilization = if layers > 0 && events.iter().any(|(_, a)| !a.is_empty()) {
        expert_utilization(&events, layers, experts)?
    } else {
        UtilizationHistogram {
            per_layer: vec![vec![0; experts]; layers],
            total: vec![0; experts],
        }
    };

    write_dump(&model.cfg, first_dump)?;
    Ok(AnalysisReport {
        attn: attn_sum,
        spectrum: spec_sum,
        utilization,
    })
}

fn write_dump(
    cfg: &RunConfig,
    dump: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
) -> Result<()> {
    if let Some((mask, gt, feat)) = dump {
        let dir = cfg.out.join("pgm");
        std::fs::create_dir_all(&dir)?;
        let s = cfg.img_size;
        let g = s / cfg.patch_size;
        write_pgm(&dir.join("pred_mask.pgm"), &mask, s, s)?;
        write_pgm(&dir.join("gt_mask.pgm"), &gt, s, s)?;
        write_pgm(&dir.join("feature0.pgm"), &feat, g, g)?;
    }
    Ok(())
}

/// Build the model, load a checkpoint, run the instruments, and write the
/// report CSVs under `cfg.out`.
pub fn analyze(cfg: &RunConfig, checkpoint: &Path, n_images: usize) -> Result<AnalysisReport> {
    let model = build_model(cfg)?;
    load_checkpoint(&model.ps, checkpoint)?;
    let report = analyze_model(&model, n_images)?;
    std::fs::create_dir_all(&cfg.out)?;

    let mut rows = vec!["layer,head,distance".to_string()];
    for (li, heads) in report.attn.iter().enumerate() {
        for (h, v) in heads.iter().enumerate() {
            rows.push(format!("{li},{h},{v}"));
        }
    }
    std::fs::write(cfg.out.join("attn_distance.csv"), rows.join("\n") + "\n")?;

    let mut rows = vec!["bin,rel_log_amp".to_string()];
    for (i, v) in report.spectrum.iter().enumerate() {
        rows.push(format!("{i},{v}"));
    }
    std::fs::write(cfg.out.join("spectrum.csv"), rows.join("\n") + "\n")?;

    let mut rows = vec!["layer,expert,count".to_string()];
    for (li, counts) in report.utilization.per_layer.iter().enumerate() {
        for (e, c) in counts.iter().enumerate() {
            rows.push(format!("{li},{e},{c}"));
        }
    }
    std::fs::write(cfg.out.join("utilization.csv"), rows.join("\n") + "\n")?;
    Ok(report)
}
