//! Token-to-feature cross-attention mask decoder: N frozen constant prompt
//! tokens attend to the encoder feature grid over two blocks, then produce
//! per-token masks (dot product with upscaled projected features) and
//! per-token class scores over K real classes plus "no object".

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamRef, ParamSet, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const BLOCKS: usize = 2;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Number of output mask tokens N.
    pub n_tokens: usize,
    /// Real classes K; the class head emits K+1 scores.
    pub n_classes: usize,
    /// Token / feature embedding dim (matches the encoder).
    pub dim: usize,
    /// Mask-embedding dim the features are projected to.
    pub mask_dim: usize,
    /// Output mask extent (square).
    pub out_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens < 1 {
            return Err(Error::Config("decoder needs at least one token".into()));
        }
        if self.n_classes < 1 || self.dim == 0 || self.mask_dim == 0 || self.out_size == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        Ok(())
    }
}

struct CrossBlock<F> {
    ln1_g: ParamRef<F>,
    ln1_b: ParamRef<F>,
    wq: ParamRef<F>,
    bq: ParamRef<F>,
    wk: ParamRef<F>,
    bk: ParamRef<F>,
    wv: ParamRef<F>,
    bv: ParamRef<F>,
    wo: ParamRef<F>,
    bo: ParamRef<F>,
    ln2_g: ParamRef<F>,
    ln2_b: ParamRef<F>,
    mlp_w1: ParamRef<F>,
    mlp_b1: ParamRef<F>,
    mlp_w2: ParamRef<F>,
    mlp_b2: ParamRef<F>,
}

pub struct MaskDecoder<F> {
    pub cfg: DecoderConfig,
    prompt: ParamRef<F>,
    blocks: Vec<CrossBlock<F>>,
    feat_w: ParamRef<F>,
    feat_b: ParamRef<F>,
    mask_w: ParamRef<F>,
    mask_b: ParamRef<F>,
    cls_w1: ParamRef<F>,
    cls_b1: ParamRef<F>,
    cls_w2: ParamRef<F>,
    cls_b2: ParamRef<F>,
    cls_w3: ParamRef<F>,
    cls_b3: ParamRef<F>,
}

pub struct DecoderOutput<F: Scalar> {
    /// B x N x H x W mask logits.
    pub mask_logits: Tensor<F>,
    /// B x N x (K+1) class logits; index K means "no object".
    pub class_logits: Tensor<F>,
}

fn gauss<F: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<F> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| F::c(d.sample(rng))).collect()
}

impl<F: Scalar> MaskDecoder<F> {
    pub fn new<R: Rng>(cfg: DecoderConfig, ps: &mut ParamSet<F>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dm = cfg.mask_dim;
        // Constant prompt tokens: created frozen, kept frozen by every policy.
        let prompt = ps.create(
            "decoder.prompt_tokens",
            &[cfg.n_tokens, d],
            gauss(rng, cfg.n_tokens * d, 1.0),
            false,
        );
        let mut blocks = Vec::with_capacity(BLOCKS);
        for i in 0..BLOCKS {
            let p = |s: &str| format!("decoder.block{i}.{s}");
            let lin = |ps: &mut ParamSet<F>, rng: &mut R, name: String| {
                ps.create(name, &[d, d], gauss(rng, d * d, INIT_STD), true)
            };
            blocks.push(CrossBlock {
                ln1_g: ps.create(p("ln1.gamma"), &[d], vec![F::one(); d], true),
                ln1_b: ps.create(p("ln1.beta"), &[d], vec![F::zero(); d], true),
                wq: lin(ps, rng, p("attn.q.w")),
                bq: ps.create(p("attn.q.b"), &[d], vec![F::zero(); d], true),
                wk: lin(ps, rng, p("attn.k.w")),
                bk: ps.create(p("attn.k.b"), &[d], vec![F::zero(); d], true),
                wv: lin(ps, rng, p("attn.v.w")),
                bv: ps.create(p("attn.v.b"), &[d], vec![F::zero(); d], true),
                wo: lin(ps, rng, p("attn.out.w")),
                bo: ps.create(p("attn.out.b"), &[d], vec![F::zero(); d], true),
                ln2_g: ps.create(p("ln2.gamma"), &[d], vec![F::one(); d], true),
                ln2_b: ps.create(p("ln2.beta"), &[d], vec![F::zero(); d], true),
                mlp_w1: ps.create(p("mlp.w1"), &[2 * d, d], gauss(rng, 2 * d * d, INIT_STD), true),
                mlp_b1: ps.create(p("mlp.b1"), &[2 * d], vec![F::zero(); 2 * d], true),
                mlp_w2: ps.create(p("mlp.w2"), &[d, 2 * d], gauss(rng, 2 * d * d, INIT_STD), true),
                mlp_b2: ps.create(p("mlp.b2"), &[d], vec![F::zero(); d], true),
            });
        }
        let kc = cfg.n_classes + 1;
        Ok(MaskDecoder {
            feat_w: ps.create("decoder.feat.w", &[dm, d], gauss(rng, dm * d, INIT_STD), true),
            feat_b: ps.create("decoder.feat.b", &[dm], vec![F::zero(); dm], true),
            mask_w: ps.create("decoder.mask.w", &[dm, d], gauss(rng, dm * d, INIT_STD), true),
            mask_b: ps.create("decoder.mask.b", &[dm], vec![F::zero(); dm], true),
            cls_w1: ps.create("decoder.cls.w1", &[d, d], gauss(rng, d * d, INIT_STD), true),
            cls_b1: ps.create("decoder.cls.b1", &[d], vec![F::zero(); d], true),
            cls_w2: ps.create("decoder.cls.w2", &[d, d], gauss(rng, d * d, INIT_STD), true),
            cls_b2: ps.create("decoder.cls.b2", &[d], vec![F::zero(); d], true),
            cls_w3: ps.create("decoder.cls.w3", &[kc, d], gauss(rng, kc * d, INIT_STD), true),
            cls_b3: ps.create("decoder.cls.b3", &[kc], vec![F::zero(); kc], true),
            prompt,
            blocks,
            cfg,
        })
    }

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

    /// Decode `features` (B x d x H' x W') into N masks and N class rows.
    pub fn forward(&self, sess: &mut Session<F>, features: &Tensor<F>) -> Result<DecoderOutput<F>> {
        let fs = features.shape();
        if fs.len() != 4 || fs[1] != self.cfg.dim {
            return Err(Error::Config(format!(
                "decoder expects B x {} x H x W features, got {fs:?}",
                self.cfg.dim
            )));
        }
        let (b, d, gh, gw) = (fs[0], fs[1], fs[2], fs[3]);
        let (n, dm, s) = (self.cfg.n_tokens, self.cfg.mask_dim, self.cfg.out_size);
        let l = gh * gw;
        let eps = F::c(LN_EPS);

        // Feature grid as a token sequence B x L x d.
        let fseq = features.permute(&[0, 2, 3, 1])?.reshape(&[b, l, d])?;
        // Prompt tokens repeated per image: B x N x d.
        let prompt = sess.bind(&self.prompt)?;
        let mut t = prompt.expand_leading(b)?;

        let scale = F::one() / F::c((d as f64).sqrt());
        for blk in &self.blocks {
            let g1 = sess.bind(&blk.ln1_g)?;
            let b1 = sess.bind(&blk.ln1_b)?;
            let tn = t.layer_norm(&g1, &b1, eps)?;
            let q = Self::token_linear(sess, &tn, &blk.wq, &blk.bq)?;
            let k = Self::token_linear(sess, &fseq, &blk.wk, &blk.bk)?;
            let v = Self::token_linear(sess, &fseq, &blk.wv, &blk.bv)?;
            let attn = q
                .matmul(&k.permute(&[0, 2, 1])?)?
                .scale(scale)?
                .softmax_axis(2)?;
            let ctx = attn.matmul(&v)?;
            let o = Self::token_linear(sess, &ctx, &blk.wo, &blk.bo)?;
            t = t.add(&o)?;
            let g2 = sess.bind(&blk.ln2_g)?;
            let b2 = sess.bind(&blk.ln2_b)?;
            let tn = t.layer_norm(&g2, &b2, eps)?;
            let h = Self::token_linear(sess, &tn, &blk.mlp_w1, &blk.mlp_b1)?.gelu()?;
            let h = Self::token_linear(sess, &h, &blk.mlp_w2, &blk.mlp_b2)?;
            t = t.add(&h)?;
        }

        // Mask branch: upscaled projected features dotted with token embeds.
        let fproj = Self::token_linear(sess, &fseq, &self.feat_w, &self.feat_b)?; // B x L x dm
        let fgrid = fproj
            .permute(&[0, 2, 1])?
            .reshape(&[b, dm, gh, gw])?
            .interpolate_to(s, s)?; // B x dm x S x S
        let temb = Self::token_linear(sess, &t, &self.mask_w, &self.mask_b)?; // B x N x dm
        let mask_logits = temb
            .matmul(&fgrid.reshape(&[b, dm, s * s])?)?
            .reshape(&[b, n, s, s])?;

        // Class branch: 3-layer MLP per token.
        let h = Self::token_linear(sess, &t, &self.cls_w1, &self.cls_b1)?.gelu()?;
        let h = Self::token_linear(sess, &h, &self.cls_w2, &self.cls_b2)?.gelu()?;
        let class_logits = Self::token_linear(sess, &h, &self.cls_w3, &self.cls_b3)?;

        Ok(DecoderOutput {
            mask_logits,
            class_logits,
        })
    }
}
