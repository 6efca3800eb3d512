//! Architecture and run configuration.
//!
//! `EncoderConfig` is the architectural record; `RunConfig` is the full
//! experiment document the CLI consumes (JSON, strict parsing, explicit
//! defaults for every field). Presets encode the published base/large
//! recipes; `scale_desk` shrinks dimensions and step counts to laptop size
//! while keeping every ratio (warmup fraction, masking ratio, final-LR
//! fraction) fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the gated feedforward computes its two projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GluVariant {
    /// Fused for per-step batches >= 128, naive below (the crossover the
    /// profiling appendix reports).
    Auto,
    Naive,
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    /// Pretraining sequence length; also the learned-position table size
    /// when ALiBi is off.
    pub max_seq_len: usize,
    pub mlm_ratio: f64,
    pub use_alibi: bool,
    pub use_geglu: bool,
    pub use_unpadding: bool,
    /// With unpadding on: `true` runs attention per segment on the packed
    /// stream; `false` re-pads around the attention sublayer (feedforward
    /// only unpadding).
    pub unpad_attention: bool,
    pub low_precision_ln: bool,
    pub glu_variant: GluVariant,
    pub attention_dropout: f64,
    pub ff_dropout: f64,
    pub ln_eps: f64,
    /// `None` selects the naive attention path; `Some(k)` the tiled path
    /// with key blocks of size `k`.
    pub attention_key_block: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 768,
            n_heads: 12,
            n_layers: 12,
            intermediate: 3072,
            vocab_size: 30528,
            max_seq_len: 128,
            mlm_ratio: 0.30,
            use_alibi: true,
            use_geglu: true,
            use_unpadding: true,
            unpad_attention: false,
            low_precision_ln: true,
            glu_variant: GluVariant::Auto,
            attention_dropout: 0.0,
            ff_dropout: 0.1,
            ln_eps: 1e-12,
            attention_key_block: Some(64),
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.vocab_size < 1 {
            return Err(Error::Config("vocab_size must be >= 1".into()));
        }
        if !(self.mlm_ratio > 0.0 && self.mlm_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mlm_ratio {} outside (0,1)",
                self.mlm_ratio
            )));
        }
        for (name, d) in [
            ("attention_dropout", self.attention_dropout),
            ("ff_dropout", self.ff_dropout),
        ] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("{name} {d} outside [0,1)")));
            }
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.max_seq_len < 1 || self.n_layers < 1 || self.intermediate < 1 {
            return Err(Error::Config("dimensions must be >= 1".into()));
        }
        if self.attention_key_block == Some(0) {
            return Err(Error::Config("attention_key_block must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus file or directory of `.txt` shards, one document per line.
    pub corpus: Option<String>,
    /// Vocab file, one token per line (id = line index).
    pub vocab: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 70_000,
            warmup_fraction: 0.06,
            final_lr_fraction: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradient-accumulation microbatch; `None` runs the full batch at once.
    pub microbatch: Option<usize>,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_peak: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-5,
            microbatch: Some(512),
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub out_dir: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 4096,
            checkpoint_every: 3500,
            eval_every: 2000,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub n_trials: usize,
    pub warmup_trials: usize,
    pub n_devices: usize,
    /// Theoretical peak per device in FLOP/s (A100 bf16 default).
    pub peak_flops_per_device: f64,
    pub price_per_device_hour: f64,
    pub bench_batch: usize,
    pub bench_seq_len: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_trials: 5,
            warmup_trials: 1,
            n_devices: 8,
            peak_flops_per_device: 312e12,
            price_per_device_hour: 2.50,
            bench_batch: 8,
            bench_seq_len: 128,
        }
    }
}

/// The full experiment record: everything a run needs, serialized as JSON
/// with unknown keys rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.schedule.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_fraction) {
            return Err(Error::Config("warmup_fraction outside [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.schedule.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction outside [0,1]".into()));
        }
        if self.optimizer.microbatch == Some(0) {
            return Err(Error::Config("microbatch must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON (fixed field order, two-space indent): the config is
    /// the experiment record.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub mod presets {
    use super::*;

    pub const NAMES: [&str; 4] = [
        "bert-base",
        "mosaicbert-base",
        "bert-large",
        "mosaicbert-large",
    ];

    fn base_model() -> EncoderConfig {
        EncoderConfig {
            hidden: 768,
            n_heads: 12,
            n_layers: 12,
            intermediate: 3072,
            vocab_size: 30522,
            max_seq_len: 128,
            mlm_ratio: 0.15,
            use_alibi: false,
            use_geglu: false,
            use_unpadding: false,
            unpad_attention: false,
            low_precision_ln: false,
            glu_variant: GluVariant::Auto,
            attention_dropout: 0.1,
            ff_dropout: 0.1,
            ln_eps: 1e-12,
            attention_key_block: None,
        }
    }

    /// Classic BERT-Base: learned positions, plain GeLU MLP, 15% masking,
    /// attention dropout 0.1.
    pub fn bert_base() -> RunConfig {
        RunConfig {
            model: base_model(),
            ..Default::default()
        }
    }

    /// MosaicBERT-Base: ALiBi, GeGLU, unpadding, low-precision LayerNorm,
    /// 30% masking, no attention dropout, vocab rounded to a multiple of 64.
    pub fn mosaicbert_base() -> RunConfig {
        let model = EncoderConfig {
            vocab_size: 30528,
            mlm_ratio: 0.30,
            use_alibi: true,
            use_geglu: true,
            use_unpadding: true,
            unpad_attention: false,
            low_precision_ln: true,
            attention_dropout: 0.0,
            attention_key_block: Some(64),
            ..base_model()
        };
        RunConfig {
            model,
            ..Default::default()
        }
    }

    fn large_model() -> EncoderConfig {
        EncoderConfig {
            hidden: 1024,
            n_heads: 16,
            n_layers: 24,
            intermediate: 4096,
            ..base_model()
        }
    }

    pub fn bert_large() -> RunConfig {
        let optimizer = OptimizerConfig {
            lr_peak: 2e-4,
            microbatch: Some(256),
            ..Default::default()
        };
        RunConfig {
            model: large_model(),
            optimizer,
            ..Default::default()
        }
    }

    pub fn mosaicbert_large() -> RunConfig {
        let model = EncoderConfig {
            vocab_size: 30528,
            mlm_ratio: 0.30,
            use_alibi: true,
            use_geglu: true,
            use_unpadding: true,
            unpad_attention: false,
            low_precision_ln: true,
            attention_dropout: 0.0,
            attention_key_block: Some(64),
            ..large_model()
        };
        let optimizer = OptimizerConfig {
            lr_peak: 2e-4,
            microbatch: Some(256),
            ..Default::default()
        };
        RunConfig {
            model,
            optimizer,
            ..Default::default()
        }
    }

    pub fn by_name(name: &str) -> Result<RunConfig> {
        match name {
            "bert-base" => Ok(bert_base()),
            "mosaicbert-base" => Ok(mosaicbert_base()),
            "bert-large" => Ok(bert_large()),
            "mosaicbert-large" => Ok(mosaicbert_large()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {NAMES:?}"
            ))),
        }
    }

    /// Shrink a paper-scale config to desk scale. Dimensions and step counts
    /// drop; every ratio-style hyperparameter (warmup fraction, masking
    /// ratio, final-LR fraction, betas, weight decay) is untouched.
    pub fn scale_desk(cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.model.hidden = 64;
        out.model.n_heads = 2;
        out.model.n_layers = 2;
        out.model.intermediate = 256;
        out.model.vocab_size = 512;
        out.model.max_seq_len = 32;
        out.model.attention_key_block = out.model.attention_key_block.map(|_| 8);
        out.schedule.total_steps = 200;
        out.optimizer.microbatch = None;
        out.train.batch_size = 8;
        out.train.checkpoint_every = 100;
        out.train.eval_every = 10;
        out.bench.bench_batch = 4;
        out.bench.bench_seq_len = 32;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in presets::NAMES {
            let cfg = presets::by_name(name).unwrap();
            cfg.validate().unwrap();
            presets::scale_desk(&cfg).validate().unwrap();
        }
        assert!(presets::by_name("nope").is_err());
    }

    #[test]
    fn canonical_roundtrip() {
        let cfg = presets::mosaicbert_base();
        let json = cfg.to_canonical_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(json, back.to_canonical_json());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&presets::bert_base().to_canonical_json()).unwrap();
        v["model"]["unknown_flag"] = serde_json::json!(true);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn desk_scale_keeps_ratios() {
        let paper = presets::mosaicbert_base();
        let desk = presets::scale_desk(&paper);
        assert_eq!(desk.model.mlm_ratio, paper.model.mlm_ratio);
        assert_eq!(
            desk.schedule.warmup_fraction,
            paper.schedule.warmup_fraction
        );
        assert_eq!(
            desk.schedule.final_lr_fraction,
            paper.schedule.final_lr_fraction
        );
        assert_eq!(desk.model.hidden, 64);
        assert_eq!(desk.model.n_layers, 2);
        assert_eq!(desk.model.vocab_size % 64, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = presets::bert_base();
        cfg.model.n_heads = 7; // 768 % 7 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = presets::bert_base();
        cfg.model.mlm_ratio = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = presets::bert_base();
        cfg.model.attention_dropout = 1.0;
        assert!(cfg.validate().is_err());
    }
}
