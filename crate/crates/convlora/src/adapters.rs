//! LoRA and Conv-LoRA adapters: low-rank encoder/decoder pair, scale-
//! specialized convolutional experts, noisy top-k gating, the multi-scale
//! ablation variant, and the expert balance loss.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamRef, ParamSet, Session};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Trainable rank-decomposition pair beside a frozen weight.
pub struct LoraWeights<F> {
    pub we: ParamRef<F>,
    pub wd: ParamRef<F>,
    pub rank: usize,
}

/// One interpolate -> conv3x3 -> interpolate expert at a fixed scale.
pub struct ExpertParams<F> {
    pub scale: f64,
    pub kernel: ParamRef<F>,
    pub bias: ParamRef<F>,
}

/// Gating weights: pooled bottleneck -> linear scores, optional softplus-
/// scaled noise, keep-top-k, softmax.
pub struct GateParams<F> {
    pub wg: ParamRef<F>,
    pub wnoise: ParamRef<F>,
    pub n_experts: usize,
    pub top_k: usize,
}

/// Per-sample gate output of one adapter layer.
pub struct GateDecision<F: Scalar> {
    /// B x n gate values, differentiable (lives on the step's tape).
    pub gate: Tensor<F>,
    /// Expert indices with nonzero gate, per sample.
    pub active: Vec<Vec<usize>>,
    /// Raw pre-softmax scores, B x n.
    pub scores: Vec<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterKind {
    /// Plain LoRA: bottleneck passes through unchanged.
    Lora,
    /// MoE-gated convolutional experts in the bottleneck.
    ConvLora,
    /// Every expert runs, outputs averaged, no gate.
    MultiScale,
}

pub struct AdapterConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub rank: usize,
    pub scales: Vec<f64>,
    pub top_k: usize,
    pub kind: AdapterKind,
}

impl AdapterConfig {
    /// Paper defaults: 8 experts at scales 1..8, top-1, rank 3.
    pub fn conv_lora_default(c_in: usize, c_out: usize) -> Self {
        AdapterConfig {
            c_in,
            c_out,
            rank: 3,
            scales: (1..=8).map(|s| s as f64).collect(),
            top_k: 1,
            kind: AdapterKind::ConvLora,
        }
    }

    pub fn lora(c_in: usize, c_out: usize, rank: usize) -> Self {
        AdapterConfig {
            c_in,
            c_out,
            rank,
            scales: Vec::new(),
            top_k: 1,
            kind: AdapterKind::Lora,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank >= self.c_in.min(self.c_out) {
            return Err(Error::Config(format!(
                "rank {} must satisfy 0 < r < min({}, {})",
                self.rank, self.c_in, self.c_out
            )));
        }
        if self.kind != AdapterKind::Lora {
            if self.scales.is_empty() {
                return Err(Error::Config("adapter needs at least one expert".into()));
            }
            if self.scales.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("expert scales must be positive".into()));
            }
            if self.top_k == 0 || self.top_k > self.scales.len() {
                return Err(Error::Config(format!(
                    "top-k {} out of range for {} experts",
                    self.top_k,
                    self.scales.len()
                )));
            }
        }
        Ok(())
    }
}

/// One adapter instance attached beside a frozen projection.
pub struct Adapter<F> {
    pub lora: LoraWeights<F>,
    pub experts: Vec<ExpertParams<F>>,
    pub gate: Option<GateParams<F>>,
    pub kind: AdapterKind,
}

/// W_e Gaussian (std 1/sqrt(C_in)), W_d zero, kernels Gaussian
/// (std 1/(3 sqrt(r))), biases and gate weights zero.
pub fn init_adapter<F: Scalar, R: Rng + ?Sized>(
    ps: &mut ParamSet<F>,
    prefix: &str,
    cfg: &AdapterConfig,
    rng: &mut R,
) -> Result<Adapter<F>> {
    cfg.validate()?;
    let r = cfg.rank;
    let we_std = 1.0 / (cfg.c_in as f64).sqrt();
    let we_dist = Normal::new(0.0, we_std).unwrap();
    let we_data: Vec<F> = (0..r * cfg.c_in)
        .map(|_| F::c(we_dist.sample(rng)))
        .collect();
    let we = ps.create(format!("{prefix}.we"), &[r, cfg.c_in], we_data, true);
    let wd = ps.create(
        format!("{prefix}.wd"),
        &[cfg.c_out, r],
        vec![F::zero(); cfg.c_out * r],
        true,
    );
    let lora = LoraWeights { we, wd, rank: r };
    if cfg.kind == AdapterKind::Lora {
        return Ok(Adapter {
            lora,
            experts: Vec::new(),
            gate: None,
            kind: cfg.kind.clone(),
        });
    }
    let k_std = 1.0 / (3.0 * (r as f64).sqrt());
    let k_dist = Normal::new(0.0, k_std).unwrap();
    let experts = cfg
        .scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let kernel: Vec<F> = (0..r * r * 9).map(|_| F::c(k_dist.sample(rng))).collect();
            ExpertParams {
                scale,
                kernel: ps.create(format!("{prefix}.expert{i}.kernel"), &[r, r, 3, 3], kernel, true),
                bias: ps.create(format!("{prefix}.expert{i}.bias"), &[r], vec![F::zero(); r], true),
            }
        })
        .collect();
    let n = cfg.scales.len();
    let gate = if cfg.kind == AdapterKind::ConvLora {
        Some(GateParams {
            wg: ps.create(format!("{prefix}.gate.wg"), &[r, n], vec![F::zero(); r * n], true),
            wnoise: ps.create(
                format!("{prefix}.gate.wnoise"),
                &[r, n],
                vec![F::zero(); r * n],
                true,
            ),
            n_experts: n,
            top_k: cfg.top_k,
        })
    } else {
        None
    };
    Ok(Adapter {
        lora,
        experts,
        gate,
        kind: cfg.kind.clone(),
    })
}

impl<F: Scalar> Adapter<F> {
    /// Trainable element count of this adapter.
    pub fn param_count(&self) -> usize {
        let mut total = self.lora.we.borrow().data.len() + self.lora.wd.borrow().data.len();
        for e in &self.experts {
            total += e.kernel.borrow().data.len() + e.bias.borrow().data.len();
        }
        if let Some(g) = &self.gate {
            total += g.wg.borrow().data.len() + g.wnoise.borrow().data.len();
        }
        total
    }
}

/// Per-position channel map: y[b,:,h,w] = w · x[b,:,h,w] for w of shape
/// [c_out, c_in].
pub fn channel_map<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(Error::Dimension(format!(
            "channel_map: x {xs:?} vs weight {ws:?}"
        )));
    }
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let rows = x.permute(&[0, 2, 3, 1])?.reshape(&[b * h * wd, c])?;
    let wt = w.permute(&[1, 0])?;
    rows.matmul(&wt)?
        .reshape(&[b, h, wd, ws[0]])?
        .permute(&[0, 3, 1, 2])
}

/// h = W0 x + Wd We x (all channel-wise linear maps over NCHW).
pub fn lora_forward<F: Scalar>(
    x: &Tensor<F>,
    w0: &Tensor<F>,
    we: &Tensor<F>,
    wd: &Tensor<F>,
) -> Result<Tensor<F>> {
    let base = channel_map(x, w0)?;
    let z = channel_map(x, we)?;
    let delta = channel_map(&z, wd)?;
    base.add(&delta)
}

/// E_i(z) = interpolate(conv3x3(interpolate(z, s)), back to z's extents).
pub fn expert_forward<F: Scalar>(
    z: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    scale: f64,
) -> Result<Tensor<F>> {
    let zs = z.shape();
    z.interpolate_bilinear(scale)?
        .conv3x3(kernel, bias)?
        .interpolate_to(zs[2], zs[3])
}

/// Gate decision from the rank-r bottleneck activation. With `noise`, a
/// standard-normal draw per (sample, expert) scales the softplus noise head.
pub fn gate_scores<F: Scalar>(
    z: &Tensor<F>,
    wg: &Tensor<F>,
    wnoise: &Tensor<F>,
    top_k: usize,
    noise_rng: Option<&mut dyn rand::RngCore>,
) -> Result<GateDecision<F>> {
    let pooled = z.global_avg_pool()?; // B x r
    let base = pooled.matmul(wg)?; // B x n
    let scores_t = match noise_rng {
        Some(rng) => {
            let shape = base.shape();
            let eps: Vec<F> = (0..shape[0] * shape[1])
                .map(|_| F::c(StandardNormal.sample(rng)))
                .collect();
            let eps = base.graph().constant(eps, &shape)?;
            let sd = pooled.matmul(wnoise)?.softplus()?;
            base.add(&eps.mul(&sd)?)?
        }
        None => base,
    };
    let gate = scores_t.topk_softmax(top_k)?;
    let shape = gate.shape();
    let (b, n) = (shape[0], shape[1]);
    let gv = gate.value();
    let active = (0..b)
        .map(|bi| {
            (0..n)
                .filter(|&i| gv[bi * n + i] > F::zero())
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(GateDecision {
        gate,
        active,
        scores: scores_t.value(),
    })
}

/// Conv-LoRA forward on bound tensors: only experts with a nonzero gate are
/// evaluated, each on exactly the sub-batch that routed to it.
/// `expert_evals` counts (expert, sample) evaluations.
#[allow(clippy::too_many_arguments)]
pub fn conv_lora_apply<F: Scalar>(
    x: &Tensor<F>,
    w0: &Tensor<F>,
    we: &Tensor<F>,
    wd: &Tensor<F>,
    experts: &[(Tensor<F>, Tensor<F>, f64)],
    wg: &Tensor<F>,
    wnoise: &Tensor<F>,
    top_k: usize,
    noise_rng: Option<&mut dyn rand::RngCore>,
    expert_evals: &mut u64,
) -> Result<(Tensor<F>, GateDecision<F>)> {
    if experts.is_empty() {
        return Err(Error::Config("conv-lora needs at least one expert".into()));
    }
    let z = channel_map(x, we)?;
    let decision = gate_scores(&z, wg, wnoise, top_k, noise_rng)?;
    let zs = z.shape();
    let batch = zs[0];
    let mut acc: Option<Tensor<F>> = None;
    for (i, (kernel, bias, scale)) in experts.iter().enumerate() {
        let routed: Vec<usize> = (0..batch)
            .filter(|&bi| decision.active[bi].contains(&i))
            .collect();
        if routed.is_empty() {
            continue;
        }
        *expert_evals += routed.len() as u64;
        let sub = z.select_batch(&routed)?;
        let out = expert_forward(&sub, kernel, bias, *scale)?;
        let coeff = decision
            .gate
            .select_last(&[i])?
            .reshape(&[batch])?
            .select_batch(&routed)?;
        let weighted = out.mul_batch_scalar(&coeff)?;
        let scattered = weighted.scatter_batch(&routed, batch)?;
        acc = Some(match acc {
            Some(a) => a.add(&scattered)?,
            None => scattered,
        });
    }
    let bottleneck = acc.expect("top-k >= 1 guarantees at least one routed expert");
    let h = channel_map(x, w0)?.add(&channel_map(&bottleneck, wd)?)?;
    Ok((h, decision))
}

/// Multi-scale ablation: every expert runs on the full batch, outputs are
/// averaged, no gate.
pub fn multiscale_apply<F: Scalar>(
    x: &Tensor<F>,
    w0: &Tensor<F>,
    we: &Tensor<F>,
    wd: &Tensor<F>,
    experts: &[(Tensor<F>, Tensor<F>, f64)],
    expert_evals: &mut u64,
) -> Result<Tensor<F>> {
    if experts.is_empty() {
        return Err(Error::Config("multi-scale needs at least one expert".into()));
    }
    let z = channel_map(x, we)?;
    let batch = z.shape()[0];
    let mut acc: Option<Tensor<F>> = None;
    for (kernel, bias, scale) in experts {
        *expert_evals += batch as u64;
        let out = expert_forward(&z, kernel, bias, *scale)?;
        acc = Some(match acc {
            Some(a) => a.add(&out)?,
            None => out,
        });
    }
    let mean = acc.unwrap().scale(F::one() / F::c(experts.len() as f64))?;
    channel_map(x, w0)?.add(&channel_map(&mean, wd)?)
}

impl<F: Scalar> Adapter<F> {
    /// Bind this adapter's parameters into `sess` and run the configured
    /// variant. Gate noise is drawn only in train mode.
    pub fn forward(
        &self,
        sess: &mut Session<F>,
        x: &Tensor<F>,
        w0: &Tensor<F>,
        mode: Mode,
        rng: Option<&mut dyn rand::RngCore>,
        expert_evals: &mut u64,
    ) -> Result<(Tensor<F>, Option<GateDecision<F>>)> {
        let we = sess.bind(&self.lora.we)?;
        let wd = sess.bind(&self.lora.wd)?;
        match self.kind {
            AdapterKind::Lora => Ok((lora_forward(x, w0, &we, &wd)?, None)),
            AdapterKind::ConvLora => {
                let gate = self.gate.as_ref().expect("conv-lora adapter has a gate");
                let experts = self.bind_experts(sess)?;
                let wg = sess.bind(&gate.wg)?;
                let wnoise = sess.bind(&gate.wnoise)?;
                let noise_rng = match mode {
                    Mode::Train => rng,
                    Mode::Eval => None,
                };
                let (h, d) = conv_lora_apply(
                    x,
                    w0,
                    &we,
                    &wd,
                    &experts,
                    &wg,
                    &wnoise,
                    gate.top_k,
                    noise_rng,
                    expert_evals,
                )?;
                Ok((h, Some(d)))
            }
            AdapterKind::MultiScale => {
                let experts = self.bind_experts(sess)?;
                let h = multiscale_apply(x, w0, &we, &wd, &experts, expert_evals)?;
                Ok((h, None))
            }
        }
    }

    fn bind_experts(&self, sess: &mut Session<F>) -> Result<Vec<(Tensor<F>, Tensor<F>, f64)>> {
        self.experts
            .iter()
            .map(|e| Ok((sess.bind(&e.kernel)?, sess.bind(&e.bias)?, e.scale)))
            .collect()
    }
}

/// Balance loss over one step's gate decisions:
/// weight * CV(importance)^2, importance_i = sum of gate column i over all
/// samples and layers. Differentiable through the gates; CV uses the
/// population standard deviation.
pub fn moe_balance_loss<F: Scalar>(
    graph: &Graph<F>,
    decisions: &[&GateDecision<F>],
    weight: f64,
) -> Result<Tensor<F>> {
    if decisions.is_empty() {
        return Ok(graph.scalar(F::zero()));
    }
    let mut importance: Option<Tensor<F>> = None;
    for d in decisions {
        let col = d.gate.sum_axis(0)?; // [n]
        importance = Some(match importance {
            Some(acc) => acc.add(&col)?,
            None => col,
        });
    }
    let importance = importance.unwrap();
    let n = importance.shape()[0];
    let mu = importance.mean_all()?; // [1]
    let mu_b = mu.expand_leading(n)?.reshape(&[n])?;
    let diff = importance.sub(&mu_b)?;
    let var = diff.mul(&diff)?.mean_all()?;
    let cv2 = var.div(&mu.mul(&mu)?)?;
    cv2.scale(F::c(weight))
}

#[cfg(test)]
mod tests;
