//! Miniature plain ViT backbone: patch embedding, pre-norm transformer
//! blocks with GELU MLPs, learned positional embeddings, no class token.
//! Adapters attach to the q/k/v projections of every block as three
//! independent adapted weights; attention maps can be captured for analysis.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{init_adapter, Adapter, AdapterConfig, AdapterKind, GateDecision, Mode};
use crate::error::{Error, Result};
use crate::params::{ParamRef, ParamSet, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Which adapter (if any) wraps each q/k/v projection.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterVariant {
    None,
    Lora { rank: usize },
    ConvLora { rank: usize, scales: Vec<f64>, top_k: usize },
    MultiScale { rank: usize, scales: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub variant: AdapterVariant,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_size == 0 || self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.img_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.in_chans == 0 {
            return Err(Error::Config("depth, mlp ratio, channels must be positive".into()));
        }
        if let Some(cfg) = self.adapter_config() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn adapter_config(&self) -> Option<AdapterConfig> {
        let d = self.dim;
        match &self.variant {
            AdapterVariant::None => None,
            AdapterVariant::Lora { rank } => Some(AdapterConfig::lora(d, d, *rank)),
            AdapterVariant::ConvLora { rank, scales, top_k } => Some(AdapterConfig {
                c_in: d,
                c_out: d,
                rank: *rank,
                scales: scales.clone(),
                top_k: *top_k,
                kind: AdapterKind::ConvLora,
            }),
            AdapterVariant::MultiScale { rank, scales } => Some(AdapterConfig {
                c_in: d,
                c_out: d,
                rank: *rank,
                scales: scales.clone(),
                top_k: 1,
                kind: AdapterKind::MultiScale,
            }),
        }
    }
}

/// One adapted (or plain) projection: frozen weight, bias, optional adapter.
pub struct AdaptedProj<F> {
    pub w0: ParamRef<F>,
    pub b: ParamRef<F>,
    pub adapter: Option<Adapter<F>>,
}

pub struct BlockParams<F> {
    pub ln1_g: ParamRef<F>,
    pub ln1_b: ParamRef<F>,
    pub q: AdaptedProj<F>,
    pub k: AdaptedProj<F>,
    pub v: AdaptedProj<F>,
    pub out_w: ParamRef<F>,
    pub out_b: ParamRef<F>,
    pub ln2_g: ParamRef<F>,
    pub ln2_b: ParamRef<F>,
    pub mlp_w1: ParamRef<F>,
    pub mlp_b1: ParamRef<F>,
    pub mlp_w2: ParamRef<F>,
    pub mlp_b2: ParamRef<F>,
}

pub struct MiniViT<F> {
    pub cfg: EncoderConfig,
    pub patch_w: ParamRef<F>,
    pub patch_b: ParamRef<F>,
    pub pos: ParamRef<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub lnf_g: ParamRef<F>,
    pub lnf_b: ParamRef<F>,
}

/// Result of one encoder forward pass.
pub struct EncoderOutput<F: Scalar> {
    /// B x d x S/p x S/p feature grid.
    pub features: Tensor<F>,
    /// Captured attention maps, one per block, laid out (B*h) x L x L.
    pub attn: Vec<Vec<F>>,
    /// Gate decisions of every Conv-LoRA adapter hit this pass, in block
    /// order q, k, v.
    pub decisions: Vec<GateDecision<F>>,
    /// Total (expert, sample) evaluations this pass.
    pub expert_evals: u64,
}

fn gauss<F: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<F> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| F::c(d.sample(rng))).collect()
}

impl<F: Scalar> MiniViT<F> {
    pub fn new<R: Rng>(cfg: EncoderConfig, ps: &mut ParamSet<F>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let pdim = cfg.in_chans * cfg.patch_size * cfg.patch_size;
        let l = cfg.tokens();
        let patch_w = ps.create("encoder.patch.w", &[d, pdim], gauss(rng, d * pdim, INIT_STD), true);
        let patch_b = ps.create("encoder.patch.b", &[d], vec![F::zero(); d], true);
        let pos = ps.create("encoder.pos", &[l, d], gauss(rng, l * d, INIT_STD), true);
        let acfg = cfg.adapter_config();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = |suffix: &str| format!("encoder.block{i}.{suffix}");
            let proj = |tag: &str, ps: &mut ParamSet<F>, rng: &mut dyn rand::RngCore| -> Result<AdaptedProj<F>> {
                let w0 = ps.create(p(&format!("attn.{tag}.w0")), &[d, d], gauss(rng, d * d, INIT_STD), true);
                let b = ps.create(p(&format!("attn.{tag}.b")), &[d], vec![F::zero(); d], true);
                let adapter = match &acfg {
                    Some(c) => Some(init_adapter(ps, &p(&format!("attn.{tag}.adapter")), c, rng)?),
                    None => None,
                };
                Ok(AdaptedProj { w0, b, adapter })
            };
            let q = proj("q", ps, rng)?;
            let k = proj("k", ps, rng)?;
            let v = proj("v", ps, rng)?;
            let mh = d * cfg.mlp_ratio;
            blocks.push(BlockParams {
                ln1_g: ps.create(p("ln1.gamma"), &[d], vec![F::one(); d], true),
                ln1_b: ps.create(p("ln1.beta"), &[d], vec![F::zero(); d], true),
                q,
                k,
                v,
                out_w: ps.create(p("attn.out.w0"), &[d, d], gauss(rng, d * d, INIT_STD), true),
                out_b: ps.create(p("attn.out.b"), &[d], vec![F::zero(); d], true),
                ln2_g: ps.create(p("ln2.gamma"), &[d], vec![F::one(); d], true),
                ln2_b: ps.create(p("ln2.beta"), &[d], vec![F::zero(); d], true),
                mlp_w1: ps.create(p("mlp.w1"), &[mh, d], gauss(rng, mh * d, INIT_STD), true),
                mlp_b1: ps.create(p("mlp.b1"), &[mh], vec![F::zero(); mh], true),
                mlp_w2: ps.create(p("mlp.w2"), &[d, mh], gauss(rng, d * mh, INIT_STD), true),
                mlp_b2: ps.create(p("mlp.b2"), &[d], vec![F::zero(); d], true),
            });
        }
        let lnf_g = ps.create("encoder.lnf.gamma", &[d], vec![F::one(); d], true);
        let lnf_b = ps.create("encoder.lnf.beta", &[d], vec![F::zero(); d], true);
        Ok(MiniViT {
            cfg,
            patch_w,
            patch_b,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    /// y = x wᵀ + b over the last axis of a B x L x d_in token tensor.
    fn token_linear(
        sess: &mut Session<F>,
        x: &Tensor<F>,
        w: &ParamRef<F>,
        b: &ParamRef<F>,
    ) -> Result<Tensor<F>> {
        let xs = x.shape();
        let (bb, l, din) = (xs[0], xs[1], xs[2]);
        let w = sess.bind(w)?;
        let bias = sess.bind(b)?;
        let dout = w.shape()[0];
        x.reshape(&[bb * l, din])?
            .matmul(&w.permute(&[1, 0])?)?
            .add_broadcast(&bias)?
            .reshape(&[bb, l, dout])
    }

    /// One q/k/v projection: the adapter (if any) operates on the token grid
    /// reshaped to B x d x g x g so its experts see spatial structure.
    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        sess: &mut Session<F>,
        tokens: &Tensor<F>,
        proj: &AdaptedProj<F>,
        mode: Mode,
        rng: &mut Option<&mut dyn rand::RngCore>,
        out: &mut EncoderOutput<F>,
    ) -> Result<Tensor<F>> {
        match &proj.adapter {
            None => Self::token_linear(sess, tokens, &proj.w0, &proj.b),
            Some(adapter) => {
                let g = self.cfg.grid();
                let d = self.cfg.dim;
                let b = tokens.shape()[0];
                let grid = tokens.reshape(&[b, g, g, d])?.permute(&[0, 3, 1, 2])?;
                let w0 = sess.bind(&proj.w0)?;
                let reborrow: Option<&mut dyn rand::RngCore> = match rng {
                    Some(r) => Some(&mut **r),
                    None => None,
                };
                let (h, decision) =
                    adapter.forward(sess, &grid, &w0, mode, reborrow, &mut out.expert_evals)?;
                if let Some(dec) = decision {
                    out.decisions.push(dec);
                }
                let bias = sess.bind(&proj.b)?;
                h.permute(&[0, 2, 3, 1])?
                    .reshape(&[b, g * g, d])?
                    .add_broadcast(&bias)
            }
        }
    }

    /// Full forward pass. Gate noise is drawn from `rng` in train mode only;
    /// attention maps are copied out when `capture_attn` is set.
    pub fn forward(
        &self,
        sess: &mut Session<F>,
        images: &Tensor<F>,
        mode: Mode,
        mut rng: Option<&mut dyn rand::RngCore>,
        capture_attn: bool,
    ) -> Result<EncoderOutput<F>> {
        let cfg = &self.cfg;
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != cfg.in_chans
            || shape[2] != cfg.img_size
            || shape[3] != cfg.img_size
        {
            return Err(Error::Config(format!(
                "encoder expects B x {} x {} x {}, got {:?}",
                cfg.in_chans, cfg.img_size, cfg.img_size, shape
            )));
        }
        let (b, c) = (shape[0], cfg.in_chans);
        let (g, p, d, l) = (cfg.grid(), cfg.patch_size, cfg.dim, cfg.tokens());
        let mut out = EncoderOutput {
            features: images.clone(), // replaced below
            attn: Vec::new(),
            decisions: Vec::new(),
            expert_evals: 0,
        };

        // Patchify: B x C x S x S -> (B L) x (C p p) rows in token order.
        let rows = images
            .reshape(&[b, c, g, p, g, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * l, c * p * p])?;
        let pw = sess.bind(&self.patch_w)?;
        let pb = sess.bind(&self.patch_b)?;
        let mut x = rows
            .matmul(&pw.permute(&[1, 0])?)?
            .add_broadcast(&pb)?
            .reshape(&[b, l, d])?;
        let pos = sess.bind(&self.pos)?;
        x = x.add_broadcast(&pos)?;

        let heads = cfg.heads;
        let dh = d / heads;
        let eps = F::c(LN_EPS);
        for blk in &self.blocks {
            // Attention sublayer, pre-norm.
            let g1 = sess.bind(&blk.ln1_g)?;
            let b1 = sess.bind(&blk.ln1_b)?;
            let xn = x.layer_norm(&g1, &b1, eps)?;
            let q = self.project(sess, &xn, &blk.q, mode, &mut rng, &mut out)?;
            let k = self.project(sess, &xn, &blk.k, mode, &mut rng, &mut out)?;
            let v = self.project(sess, &xn, &blk.v, mode, &mut rng, &mut out)?;
            let split = |t: &Tensor<F>| -> Result<Tensor<F>> {
                t.reshape(&[b, l, heads, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[b * heads, l, dh])
            };
            let qh = split(&q)?;
            let kh = split(&k)?;
            let vh = split(&v)?;
            let scores = qh
                .matmul(&kh.permute(&[0, 2, 1])?)?
                .scale(F::one() / F::c((dh as f64).sqrt()))?;
            let attn = scores.softmax_axis(2)?;
            if capture_attn {
                out.attn.push(attn.value());
            }
            let ctx = attn
                .matmul(&vh)?
                .reshape(&[b, heads, l, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, l, d])?;
            let proj = Self::token_linear(sess, &ctx, &blk.out_w, &blk.out_b)?;
            x = x.add(&proj)?;

            // MLP sublayer, pre-norm.
            let g2 = sess.bind(&blk.ln2_g)?;
            let b2 = sess.bind(&blk.ln2_b)?;
            let xn = x.layer_norm(&g2, &b2, eps)?;
            let h = Self::token_linear(sess, &xn, &blk.mlp_w1, &blk.mlp_b1)?.gelu()?;
            let h = Self::token_linear(sess, &h, &blk.mlp_w2, &blk.mlp_b2)?;
            x = x.add(&h)?;
        }

        let gf = sess.bind(&self.lnf_g)?;
        let bf = sess.bind(&self.lnf_b)?;
        let x = x.layer_norm(&gf, &bf, eps)?;
        out.features = x.reshape(&[b, g, g, d])?.permute(&[0, 3, 1, 2])?;
        Ok(out)
    }
}

/// Which parameter sets train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Encoder fully frozen; decoder/head trains.
    DecoderOnly,
    /// Encoder frozen except adapters; decoder/head trains.
    Peft,
    /// Everything trains on top of the warm-started base.
    Full,
    /// Everything trains from random init (control).
    FromScratch,
}

impl FreezePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoder-only" => Ok(FreezePolicy::DecoderOnly),
            "peft" => Ok(FreezePolicy::Peft),
            "full" => Ok(FreezePolicy::Full),
            "from-scratch" => Ok(FreezePolicy::FromScratch),
            _ => Err(Error::Config(format!("unknown freeze policy {s:?}"))),
        }
    }
}

/// Per-parameter trainable flags, keyed by parameter name.
pub struct FreezeMask {
    pub trainable: BTreeMap<String, bool>,
}

/// Set trainable flags across the parameter set per `policy` and return the
/// resulting mask. Prompt tokens (names containing ".prompt") stay frozen
/// under every policy.
pub fn apply_freeze<F: Scalar>(ps: &ParamSet<F>, policy: FreezePolicy) -> FreezeMask {
    let mut mask = BTreeMap::new();
    for p in ps.sorted() {
        let mut pb = p.borrow_mut();
        let name = pb.name.clone();
        let trainable = if name.contains(".prompt") {
            false
        } else {
            match policy {
                FreezePolicy::Full | FreezePolicy::FromScratch => true,
                FreezePolicy::DecoderOnly => !name.starts_with("encoder."),
                FreezePolicy::Peft => !name.starts_with("encoder.") || name.contains(".adapter."),
            }
        };
        pb.trainable = trainable;
        mask.insert(name, trainable);
    }
    FreezeMask { trainable: mask }
}

/// (trainable, total, trainable/total) element counts over the whole set.
pub fn count_params<F: Scalar>(ps: &ParamSet<F>) -> (usize, usize, f64) {
    let (trainable, total) = ps.count();
    (trainable, total, trainable as f64 / total as f64)
}
