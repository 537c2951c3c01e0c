//! Model assembly, the training loop, and checkpoint evaluation.
//!
//! Determinism contract: every random choice is drawn from a ChaCha stream
//! derived from the run seed, training is single-threaded, and nothing
//! time-dependent is written to the metrics CSV.

use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{moe_balance_loss, GateDecision, Mode};
use crate::encoder::{apply_freeze, FreezeMask, MiniViT};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{gen_synthetic, Sample, Split, SyntheticDataset};
use crate::params::{load_checkpoint, save_checkpoint, Adam, ParamSet, Session};
use crate::seg::{
    binary_metrics, hungarian_match, match_cost, mean_iou, multiclass_loss, semantic_inference,
    structure_loss, GtSegments, MaskDecoder, Matching,
};

/// Distinct rng streams of the run seed.
mod stream {
    pub const INIT: u64 = 100;
    pub const GATE: u64 = 200;
    pub const SHUFFLE: u64 = 201;
    pub const FLIP: u64 = 202;
    pub const POINTS: u64 = 203;
}

fn rng_stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

pub struct Model {
    pub cfg: RunConfig,
    pub ps: ParamSet<f64>,
    pub encoder: MiniViT<f64>,
    pub decoder: MaskDecoder<f64>,
    pub freeze: FreezeMask,
}

/// Build the full model for a run config and apply its freeze policy.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let mut rng = rng_stream(cfg.seed, stream::INIT);
    let encoder = MiniViT::new(cfg.encoder_config(), &mut ps, &mut rng)?;
    let decoder = MaskDecoder::new(cfg.decoder_config(), &mut ps, &mut rng)?;
    let freeze = apply_freeze(&ps, cfg.freeze_policy());
    Ok(Model {
        cfg: cfg.clone(),
        ps,
        encoder,
        decoder,
        freeze,
    })
}

/// Mirror a row-major H x W map left-to-right in place.
fn flip_h(data: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        data[y * w..(y + 1) * w].reverse();
    }
}

/// A batch ready for the forward pass, with augmentation applied.
struct Batch {
    images: Vec<f64>,
    masks: Vec<f64>,
    segments: Vec<GtSegments>,
    b: usize,
}

fn make_batch(samples: &[&Sample], s: usize, flip_rng: Option<&mut ChaCha8Rng>) -> Batch {
    use rand::Rng;
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * s * s);
    let mut masks = Vec::with_capacity(b * s * s);
    let mut segments = Vec::with_capacity(b);
    let mut flips = vec![false; b];
    if let Some(rng) = flip_rng {
        for f in &mut flips {
            *f = rng.gen_bool(0.5);
        }
    }
    for (i, sm) in samples.iter().enumerate() {
        let mut img = sm.image.clone();
        let mut mask = sm.mask.clone();
        let mut segs = sm.segments.clone();
        if flips[i] {
            for ch in 0..3 {
                flip_h(&mut img[ch * s * s..(ch + 1) * s * s], s, s);
            }
            flip_h(&mut mask, s, s);
            for m in &mut segs.masks {
                flip_h(m, s, s);
            }
        }
        images.extend_from_slice(&img);
        masks.extend_from_slice(&mask);
        segments.push(segs);
    }
    Batch {
        images,
        masks,
        segments,
        b,
    }
}

struct StepOutcome {
    loss: f64,
    expert_evals: u64,
}

/// One forward/backward/update step. `trainable` mode draws gate noise from
/// `gate_rng` when provided.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    adam: &mut Adam<f64>,
    batch: &Batch,
    gate_rng: Option<&mut ChaCha8Rng>,
    points_rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<StepOutcome> {
    let cfg = &model.cfg;
    let s = cfg.img_size;
    let mut sess = Session::new();
    let images = sess.constant(batch.images.clone(), &[batch.b, 3, s, s])?;
    let rng_dyn: Option<&mut dyn RngCore> = match gate_rng {
        Some(r) => Some(r),
        None => None,
    };
    let enc = model
        .encoder
        .forward(&mut sess, &images, Mode::Train, rng_dyn, false)?;
    let dec = model.decoder.forward(&mut sess, &enc.features)?;

    let decision_refs: Vec<&GateDecision<f64>> = enc.decisions.iter().collect();
    let balance = moe_balance_loss(&sess.graph, &decision_refs, 1.0)?;

    let loss = if cfg.binary() {
        let main = structure_loss(&dec.mask_logits, &batch.masks)?;
        main.add(&balance.scale(cfg.balance_weight)?.reshape(&[1])?)?
    } else {
        let ms = dec.mask_logits.shape();
        let (n, hw) = (ms[1], ms[2] * ms[3]);
        let kc = dec.class_logits.shape()[2];
        let mask_vals = dec.mask_logits.value();
        let class_vals = dec.class_logits.value();
        let mut matchings: Vec<Matching> = Vec::with_capacity(batch.b);
        for (bi, gt) in batch.segments.iter().enumerate() {
            let cost = match_cost(
                &mask_vals[bi * n * hw..(bi + 1) * n * hw],
                &class_vals[bi * n * kc..(bi + 1) * n * kc],
                n,
                hw,
                kc,
                gt,
                &cfg.loss,
                cfg.match_points,
                points_rng,
            )?;
            matchings.push(hungarian_match(&cost, n, gt.masks.len())?);
        }
        let moe = balance.scale(cfg.balance_weight)?;
        multiclass_loss(&dec, &batch.segments, &matchings, &cfg.loss, Some(&moe))?
    };

    let loss_val = loss.item();
    if !loss_val.is_finite() {
        return Err(Error::Diverged(format!(
            "loss became {loss_val} at epoch {epoch}, step {step}"
        )));
    }
    let grads = sess.backward(&loss)?;
    adam.step(&model.ps, &grads);
    Ok(StepOutcome {
        loss: loss_val,
        expert_evals: enc.expert_evals,
    })
}

/// One gate event: (adapter layer index, step, sample, active experts with
/// their gate values).
pub type GateEvent = (usize, usize, usize, Vec<(usize, f64)>);

pub struct EvalOutcome {
    /// Mean IoU (binary) or mean per-image mIoU (multi-class).
    pub main: f64,
    /// Named metric means in a fixed order.
    pub metrics: Vec<(String, f64)>,
    pub gate_events: Vec<GateEvent>,
    pub expert_evals: u64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Noise-free evaluation over a whole dataset, batched; logs every gate
/// decision for utilization analysis.
pub fn evaluate_model(model: &Model, ds: &SyntheticDataset) -> Result<EvalOutcome> {
    let cfg = &model.cfg;
    let s = cfg.img_size;
    let hw = s * s;
    let mut sums: Vec<(String, f64)> = Vec::new();
    let mut gate_events = Vec::new();
    let mut expert_evals = 0u64;
    let mut n_images = 0usize;

    let add = |sums: &mut Vec<(String, f64)>, name: &str, v: f64| {
        if let Some(e) = sums.iter_mut().find(|(n, _)| n == name) {
            e.1 += v;
        } else {
            sums.push((name.to_string(), v));
        }
    };

    for (step, chunk) in ds.samples.chunks(cfg.batch).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, s, None);
        let mut sess = Session::new();
        let images = sess.constant(batch.images.clone(), &[batch.b, 3, s, s])?;
        let enc = model
            .encoder
            .forward(&mut sess, &images, Mode::Eval, None, false)?;
        let dec = model.decoder.forward(&mut sess, &enc.features)?;
        expert_evals += enc.expert_evals;

        for (li, d) in enc.decisions.iter().enumerate() {
            let gate = d.gate.value();
            let n_e = d.gate.shape()[1];
            for (si, active) in d.active.iter().enumerate() {
                let ev: Vec<(usize, f64)> = active
                    .iter()
                    .map(|&e| (e, gate[si * n_e + e]))
                    .collect();
                gate_events.push((li, step, step * cfg.batch + si, ev));
            }
        }

        let mask_vals = dec.mask_logits.value();
        if cfg.binary() {
            for (bi, sm) in chunk.iter().enumerate() {
                let probs: Vec<f64> = mask_vals[bi * hw..(bi + 1) * hw]
                    .iter()
                    .map(|&x| sigmoid(x))
                    .collect();
                let m = binary_metrics(&probs, &sm.mask)?;
                add(&mut sums, "iou", m.iou);
                add(&mut sums, "dice", m.dice);
                add(&mut sums, "acc", m.acc);
                add(&mut sums, "mae", m.mae);
                add(&mut sums, "ber", m.ber);
                n_images += 1;
            }
        } else {
            let msh = dec.mask_logits.shape();
            let n = msh[1];
            let kc = dec.class_logits.shape()[2];
            let class_vals = dec.class_logits.value();
            for (bi, sm) in chunk.iter().enumerate() {
                let labels = semantic_inference(
                    &mask_vals[bi * n * hw..(bi + 1) * n * hw],
                    &class_vals[bi * n * kc..(bi + 1) * n * kc],
                    n,
                    hw,
                    kc,
                )?;
                // Background participates as its own class (index K).
                let miou = mean_iou(&labels, &sm.labels, cfg.data.classes + 1)?;
                let acc = labels
                    .iter()
                    .zip(&sm.labels)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / hw as f64;
                add(&mut sums, "miou", miou);
                add(&mut sums, "acc", acc);
                n_images += 1;
            }
        }
    }

    let metrics: Vec<(String, f64)> = sums
        .into_iter()
        .map(|(n, v)| (n, v / n_images as f64))
        .collect();
    let main = metrics[0].1;
    Ok(EvalOutcome {
        main,
        metrics,
        gate_events,
        expert_evals,
    })
}

/// Collected rows of the run metrics CSV (run_id, epoch, split, metric,
/// value), written at the end so a crashed run leaves no partial file.
pub struct MetricsLog {
    rows: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog {
            rows: vec!["run_id,epoch,split,metric,value".to_string()],
        }
    }

    pub fn push(&mut self, run_id: &str, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(format!("{run_id},{epoch},{split},{metric},{value}"));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.rows.join("\n") + "\n")?;
        Ok(())
    }
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::new()
    }
}

pub fn write_gate_log(events: &[GateEvent], path: &Path) -> Result<()> {
    let mut rows = vec!["layer,step,sample,expert,gate".to_string()];
    for (layer, step, sample, active) in events {
        for (expert, gate) in active {
            rows.push(format!("{layer},{step},{sample},{expert},{gate}"));
        }
    }
    std::fs::write(path, rows.join("\n") + "\n")?;
    Ok(())
}

pub struct TrainSummary {
    pub run_id: String,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test_main: f64,
    pub test_metrics: Vec<(String, f64)>,
    pub steps: u64,
    pub expert_evals: u64,
    pub secs_per_step: f64,
}

/// Brief full-parameter warm-up on a disjoint data stream: every parameter
/// except prompt tokens and the (zero-initialized) adapters trains on the
/// binary union-mask objective, then the variant's freeze mask is restored.
fn pretrain(model: &Model, epochs: usize) -> Result<()> {
    let cfg = &model.cfg;
    let saved: Vec<(String, bool)> = model
        .ps
        .sorted()
        .iter()
        .map(|p| {
            let pb = p.borrow();
            (pb.name.clone(), pb.trainable)
        })
        .collect();
    for p in model.ps.sorted() {
        let mut pb = p.borrow_mut();
        pb.trainable = !pb.name.contains(".prompt") && !pb.name.contains(".adapter.");
    }

    // The warm-up distribution is deliberately shifted from the target task
    // (cleaner, higher-contrast objects), so the frozen encoder ends up
    // generically useful but not tuned to the target appearance — the
    // adapters have something to adapt.
    let mut pre_spec = cfg.data.clone();
    pre_spec.classes = 0;
    pre_spec.contrast = cfg.pretrain_contrast;
    pre_spec.bg_noise = cfg.pretrain_noise;
    pre_spec.fg_noise = cfg.pretrain_noise;
    pre_spec.radius_min = cfg.pretrain_radius_min.min(pre_spec.radius_max);
    pre_spec.radius_max = cfg.pretrain_radius_max.min(cfg.img_size as f64 / 2.0);
    let ds = gen_synthetic(&pre_spec, cfg.seed, Split::Pretrain)?;
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = rng_stream(cfg.seed, stream::SHUFFLE + 1000);
    let mut flip_rng = rng_stream(cfg.seed, stream::FLIP + 1000);

    // The pretrain objective is always the binary union mask; a multi-class
    // model's extra slots simply all regress toward it, which is enough for
    // a warm start. Decoder mask slot 0 carries the objective.
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..ds.samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let batch = make_batch(&refs, cfg.img_size, Some(&mut flip_rng));
            let s = cfg.img_size;
            let mut sess = Session::new();
            let images = sess.constant(batch.images.clone(), &[batch.b, 3, s, s])?;
            let enc = model
                .encoder
                .forward(&mut sess, &images, Mode::Train, None, false)?;
            let dec = model.decoder.forward(&mut sess, &enc.features)?;
            let n = dec.mask_logits.shape()[1];
            let slot0 = if n == 1 {
                dec.mask_logits.clone()
            } else {
                let rows: Vec<usize> = (0..batch.b).map(|bi| bi * n).collect();
                dec.mask_logits
                    .reshape(&[batch.b * n, s * s])?
                    .select_batch(&rows)?
                    .reshape(&[batch.b, 1, s, s])?
            };
            let loss = structure_loss(&slot0, &batch.masks)?;
            if !loss.item().is_finite() {
                return Err(Error::Diverged(format!(
                    "pretrain loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            let grads = sess.backward(&loss)?;
            adam.step(&model.ps, &grads);
        }
    }

    for (name, trainable) in saved {
        if let Some(p) = model.ps.get(&name) {
            p.borrow_mut().trainable = trainable;
        }
    }
    Ok(())
}

/// Full training run: writes metrics.csv, gate_log.csv, and the
/// best-on-validation checkpoint under `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    std::fs::create_dir_all(&cfg.out)?;
    let model = build_model(cfg)?;
    if cfg.pretrain_epochs > 0 {
        pretrain(&model, cfg.pretrain_epochs)?;
    }

    let train_ds = gen_synthetic(&cfg.data, cfg.seed, Split::Train)?;
    let val_ds = gen_synthetic(&cfg.data, cfg.seed, Split::Val)?;
    let test_ds = gen_synthetic(&cfg.data, cfg.seed, Split::Test)?;

    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut gate_rng = rng_stream(cfg.seed, stream::GATE);
    let mut shuffle_rng = rng_stream(cfg.seed, stream::SHUFFLE);
    let mut flip_rng = rng_stream(cfg.seed, stream::FLIP);
    let mut points_rng = rng_stream(cfg.seed, stream::POINTS);

    let run_id = cfg.run_id();
    let mut log = MetricsLog::new();
    let ckpt_dir = cfg.out.join("checkpoint");
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut steps = 0u64;
    let mut expert_evals = 0u64;
    let t0 = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0u64;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let batch = make_batch(&refs, cfg.img_size, Some(&mut flip_rng));
            let out = train_step(
                &model,
                &mut adam,
                &batch,
                Some(&mut gate_rng),
                &mut points_rng,
                epoch,
                step,
            )?;
            loss_sum += out.loss;
            expert_evals += out.expert_evals;
            n_steps += 1;
        }
        steps += n_steps;
        log.push(&run_id, epoch, "train", "loss", loss_sum / n_steps as f64);

        let val = evaluate_model(&model, &val_ds)?;
        for (name, v) in &val.metrics {
            log.push(&run_id, epoch, "val", name, *v);
        }
        if val.main > best.1 {
            best = (epoch, val.main);
            save_checkpoint(&model.ps, &ckpt_dir)?;
        }
    }
    let secs_per_step = t0.elapsed().as_secs_f64() / steps.max(1) as f64;

    // Test the best-on-validation weights.
    load_checkpoint(&model.ps, &ckpt_dir)?;
    let test = evaluate_model(&model, &test_ds)?;
    for (name, v) in &test.metrics {
        log.push(&run_id, best.0, "test", name, *v);
    }
    log.write(&cfg.out.join("metrics.csv"))?;
    write_gate_log(&test.gate_events, &cfg.out.join("gate_log.csv"))?;

    Ok(TrainSummary {
        run_id,
        best_epoch: best.0,
        best_val: best.1,
        test_main: test.main,
        test_metrics: test.metrics,
        steps,
        expert_evals,
        secs_per_step,
    })
}

/// Evaluate a stored checkpoint on one split; writes eval_metrics.csv and
/// gate_log.csv next to it.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split, out: &Path) -> Result<EvalOutcome> {
    let model = build_model(cfg)?;
    load_checkpoint(&model.ps, checkpoint)?;
    let ds = gen_synthetic(&cfg.data, cfg.seed, split)?;
    let outcome = evaluate_model(&model, &ds)?;
    std::fs::create_dir_all(out)?;
    let mut log = MetricsLog::new();
    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Pretrain => "pretrain",
    };
    for (name, v) in &outcome.metrics {
        log.push(&cfg.run_id(), 0, split_name, name, *v);
    }
    log.write(&out.join("eval_metrics.csv"))?;
    write_gate_log(&outcome.gate_events, &out.join("gate_log.csv"))?;
    Ok(outcome)
}
