//! Structured-text run configuration: `[section]` headers with `key = value`
//! lines (or fully dotted `section.key = value`), plus typed accessors and
//! the RunConfig that drives training.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::encoder::{AdapterVariant, EncoderConfig, FreezePolicy};
use crate::error::{Error, Result};
use crate::harness::data::DataSpec;
use crate::seg::{DecoderConfig, LossWeights};

/// Flat key/value view of a config file, keys fully dotted.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    ln + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", ln + 1)));
            }
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(ConfigMap { values })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn take<T: std::str::FromStr>(&self, key: &str, into: &mut T) -> Result<()> {
        if let Some(raw) = self.get(key) {
            *into = raw.parse().map_err(|_| {
                Error::Config(format!("bad value for {key}: `{raw}`"))
            })?;
        }
        Ok(())
    }
}

/// Which parameters train and which adapter (if any) is attached.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    DecoderOnly,
    Lora,
    ConvLora,
    MultiScale,
    /// Conv-LoRA degenerated to one always-on expert at a fixed scale.
    SingleExpert(f64),
    Full,
    FromScratch,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(scale) = s.strip_prefix("single-expert:").or_else(|| s.strip_prefix("single-expert=")) {
            let v: f64 = scale
                .parse()
                .map_err(|_| Error::Config(format!("bad single-expert scale `{scale}`")))?;
            if !(v > 0.0) {
                return Err(Error::Config("single-expert scale must be positive".into()));
            }
            return Ok(Variant::SingleExpert(v));
        }
        match s {
            "decoder-only" => Ok(Variant::DecoderOnly),
            "lora" => Ok(Variant::Lora),
            "conv-lora" => Ok(Variant::ConvLora),
            "multi-scale" => Ok(Variant::MultiScale),
            "full" => Ok(Variant::Full),
            "from-scratch" => Ok(Variant::FromScratch),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected decoder-only | lora | conv-lora | multi-scale | single-expert:S | full | from-scratch)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Variant::DecoderOnly => "decoder-only".into(),
            Variant::Lora => "lora".into(),
            Variant::ConvLora => "conv-lora".into(),
            Variant::MultiScale => "multi-scale".into(),
            Variant::SingleExpert(s) => format!("single-expert:{s}"),
            Variant::Full => "full".into(),
            Variant::FromScratch => "from-scratch".into(),
        }
    }
}

/// Everything one run needs; defaults mirror the training recipe
/// (Adam lr 1e-4, weight decay 1e-4, batch 4, 30 epochs).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub rank: usize,
    pub experts: usize,
    pub top_k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Brief full-parameter warm-up of the base model before freezing.
    pub pretrain_epochs: usize,
    /// Object contrast of the (shifted) warm-up distribution.
    pub pretrain_contrast: f64,
    /// Noise amplitude of the warm-up distribution.
    pub pretrain_noise: f64,
    /// Object radius range of the warm-up distribution.
    pub pretrain_radius_min: f64,
    pub pretrain_radius_max: f64,
    /// Multiplier on the gate-balance penalty (CV^2 of expert importance).
    pub balance_weight: f64,
    pub loss: LossWeights,
    /// Pixels sampled per image for the matching cost.
    pub match_points: usize,
    pub img_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_dim: usize,
    /// Decoder slots for the set-prediction (multi-class) head.
    pub n_tokens: usize,
    pub data: DataSpec,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::ConvLora,
            rank: 3,
            experts: 8,
            top_k: 1,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 4,
            epochs: 30,
            pretrain_epochs: 0,
            pretrain_contrast: 0.6,
            pretrain_noise: 0.15,
            pretrain_radius_min: 12.0,
            pretrain_radius_max: 24.0,
            balance_weight: 1.0,
            loss: LossWeights::default(),
            match_points: 1024,
            img_size: 64,
            patch_size: 8,
            dim: 48,
            depth: 3,
            heads: 4,
            mlp_ratio: 2,
            mask_dim: 16,
            n_tokens: 16,
            data: DataSpec::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut c = RunConfig::default();
        map.take("run.seed", &mut c.seed)?;
        if let Some(v) = map.get("run.variant") {
            c.variant = Variant::parse(v)?;
        }
        if let Some(v) = map.get("run.out") {
            c.out = PathBuf::from(v);
        }
        map.take("adapter.rank", &mut c.rank)?;
        map.take("adapter.experts", &mut c.experts)?;
        map.take("adapter.top_k", &mut c.top_k)?;
        map.take("optim.lr", &mut c.lr)?;
        map.take("optim.weight_decay", &mut c.weight_decay)?;
        map.take("optim.batch", &mut c.batch)?;
        map.take("optim.epochs", &mut c.epochs)?;
        map.take("optim.pretrain_epochs", &mut c.pretrain_epochs)?;
        map.take("optim.pretrain_contrast", &mut c.pretrain_contrast)?;
        map.take("optim.pretrain_noise", &mut c.pretrain_noise)?;
        map.take("optim.pretrain_radius_min", &mut c.pretrain_radius_min)?;
        map.take("optim.pretrain_radius_max", &mut c.pretrain_radius_max)?;
        map.take("loss.balance", &mut c.balance_weight)?;
        map.take("loss.mask", &mut c.loss.mask)?;
        map.take("loss.cls", &mut c.loss.cls)?;
        map.take("loss.moe", &mut c.loss.moe)?;
        map.take("loss.ce", &mut c.loss.ce)?;
        map.take("loss.dice", &mut c.loss.dice)?;
        map.take("loss.match_points", &mut c.match_points)?;
        map.take("model.img_size", &mut c.img_size)?;
        map.take("model.patch_size", &mut c.patch_size)?;
        map.take("model.dim", &mut c.dim)?;
        map.take("model.depth", &mut c.depth)?;
        map.take("model.heads", &mut c.heads)?;
        map.take("model.mlp_ratio", &mut c.mlp_ratio)?;
        map.take("model.mask_dim", &mut c.mask_dim)?;
        map.take("model.tokens", &mut c.n_tokens)?;
        map.take("data.train", &mut c.data.n_train)?;
        map.take("data.val", &mut c.data.n_val)?;
        map.take("data.test", &mut c.data.n_test)?;
        map.take("data.size", &mut c.data.size)?;
        map.take("data.classes", &mut c.data.classes)?;
        map.take("data.radius_min", &mut c.data.radius_min)?;
        map.take("data.radius_max", &mut c.data.radius_max)?;
        map.take("data.min_objects", &mut c.data.min_objects)?;
        map.take("data.max_objects", &mut c.data.max_objects)?;
        map.take("data.contrast", &mut c.data.contrast)?;
        map.take("data.bg_noise", &mut c.data.bg_noise)?;
        map.take("data.fg_noise", &mut c.data.fg_noise)?;
        // The canvas always matches the model's input size.
        c.data.size = c.img_size;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder_config().validate()?;
        self.decoder_config().validate()?;
        self.loss.validate()?;
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.balance_weight < 0.0 {
            return Err(Error::Config("lr must be positive; decay and balance nonnegative".into()));
        }
        if self.data.size != self.img_size {
            return Err(Error::Config("canvas size must equal model image size".into()));
        }
        Ok(())
    }

    pub fn binary(&self) -> bool {
        self.data.classes == 0
    }

    pub fn adapter_variant(&self) -> AdapterVariant {
        let scales: Vec<f64> = (1..=self.experts).map(|i| i as f64).collect();
        match &self.variant {
            Variant::DecoderOnly | Variant::Full | Variant::FromScratch => AdapterVariant::None,
            Variant::Lora => AdapterVariant::Lora { rank: self.rank },
            Variant::ConvLora => AdapterVariant::ConvLora {
                rank: self.rank,
                scales,
                top_k: self.top_k,
            },
            Variant::MultiScale => AdapterVariant::MultiScale {
                rank: self.rank,
                scales,
            },
            Variant::SingleExpert(s) => AdapterVariant::ConvLora {
                rank: self.rank,
                scales: vec![*s],
                top_k: 1,
            },
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        match &self.variant {
            Variant::DecoderOnly => FreezePolicy::DecoderOnly,
            Variant::Full => FreezePolicy::Full,
            Variant::FromScratch => FreezePolicy::FromScratch,
            _ => FreezePolicy::Peft,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            img_size: self.img_size,
            patch_size: self.patch_size,
            in_chans: 3,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            variant: self.adapter_variant(),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let (n_tokens, n_classes) = if self.binary() {
            (1, 1)
        } else {
            (self.n_tokens, self.data.classes)
        };
        DecoderConfig {
            n_tokens,
            n_classes,
            dim: self.dim,
            mask_dim: self.mask_dim,
            out_size: self.img_size,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.variant.name(), self.seed)
    }
}
