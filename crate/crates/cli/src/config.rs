//! Run configuration: one TOML file with a fixed schema.
//!
//! Every section and key is optional and falls back to the desk defaults;
//! any key outside the schema is rejected.
//!
//! ```toml
//! seed = 1
//! mode = "stbd"            # stbd | st-l2r | st-r2l
//!
//! [corpus]                 # toy corpus generator
//! n_utts = 2000
//! vocab_size = 30
//! min_len = 3
//! max_len = 12
//! min_frames_per_token = 6
//! max_frames_per_token = 9
//! noise_sigma = 0.5
//!
//! [model]
//! n_enc_layers = 2
//! n_dec_layers = 2
//! d_model = 64
//! d_ff = 256
//! heads = 4
//! dropout = 0.1
//! residual_dropout = 0.1
//! max_positions = 256
//! norm = "pre"             # pre | post
//! tie_embeddings = false
//!
//! [optimizer]
//! beta1 = 0.9
//! beta2 = 0.98
//! epsilon = 1e-9
//! k = 0.1
//! warmup_steps = 400
//! clip_norm = 5.0          # 0 disables clipping
//!
//! [loss]
//! alpha = 0.5
//! label_smoothing = 0.1
//!
//! [train]
//! epochs = 30
//! max_frames_per_batch = 600
//! average_best = 5
//!
//! [decode]
//! beam_size = 2
//! length_penalty = 0.6
//! penalty_form = "gnmt"    # gnmt | power
//! extra_length = 10
//! mode = "bidirectional"   # bidirectional | bs-l2r | bs-r2l
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use stbd_core::data::CorpusConfig;
use stbd_core::decode::{DecodeConfig, PenaltyForm, SearchMode};
use stbd_core::model::{ModelConfig, NormPlacement};
use stbd_core::train::{LossConfig, OptimizerConfig, TrainConfig, TrainMode};
use stbd_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: String,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_utts: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual_dropout: f64,
    pub max_positions: usize,
    pub norm: String,
    pub tie_embeddings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub k: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub label_smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub max_frames_per_batch: usize,
    pub average_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub penalty_form: String,
    pub extra_length: usize,
    pub mode: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            mode: "stbd".into(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            n_utts: c.n_utts,
            vocab_size: c.vocab_size,
            min_len: c.min_len,
            max_len: c.max_len,
            min_frames_per_token: c.min_frames_per_token,
            max_frames_per_token: c.max_frames_per_token,
            noise_sigma: c.noise_sigma,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(1, 1);
        ModelSection {
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            dropout: m.dropout,
            residual_dropout: m.residual_dropout,
            max_positions: m.max_positions,
            norm: "pre".into(),
            tie_embeddings: m.tie_embeddings,
        }
    }
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::desk();
        OptimizerSection {
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            k: o.k,
            warmup_steps: o.warmup_steps,
            clip_norm: o.clip_norm.unwrap_or(0.0),
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::desk();
        LossSection {
            alpha: l.alpha,
            label_smoothing: l.label_smoothing,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        TrainSection {
            epochs: t.epochs,
            max_frames_per_batch: t.max_frames_per_batch,
            average_best: t.average_best,
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        DecodeSection {
            beam_size: d.beam_size,
            length_penalty: d.length_penalty,
            penalty_form: "gnmt".into(),
            extra_length: d.extra_length,
            mode: "bidirectional".into(),
        }
    }
}

/// Parses a decode-mode name: `bidirectional`, `bs-l2r` or `bs-r2l`.
pub fn parse_search_mode(s: &str) -> Result<SearchMode> {
    match s {
        "bidirectional" | "stbd" => Ok(SearchMode::Bidirectional),
        "bs-l2r" | "l2r" => Ok(SearchMode::L2R),
        "bs-r2l" | "r2l" => Ok(SearchMode::R2L),
        _ => Err(Error::Config(format!(
            "unknown decode mode '{s}' (expected bidirectional, bs-l2r or bs-r2l)"
        ))),
    }
}

pub fn search_mode_label(mode: SearchMode) -> &'static str {
    match mode {
        SearchMode::Bidirectional => "bidirectional",
        SearchMode::L2R => "bs-l2r",
        SearchMode::R2L => "bs-r2l",
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Checks every section against the core invariants.
    pub fn validate(&self) -> Result<()> {
        self.train_mode()?;
        self.corpus_config().validate()?;
        self.model_config(3, 6)?.validate()?;
        self.train_config()?.validate()?;
        self.decode_config()?.validate()?;
        Ok(())
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        self.mode.parse()
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            seed: self.seed,
            n_utts: c.n_utts,
            vocab_size: c.vocab_size,
            min_len: c.min_len,
            max_len: c.max_len,
            min_frames_per_token: c.min_frames_per_token,
            max_frames_per_token: c.max_frames_per_token,
            noise_sigma: c.noise_sigma,
        }
    }

    pub fn model_config(&self, input_dim: usize, vocab_size: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let norm = match m.norm.as_str() {
            "pre" => NormPlacement::Pre,
            "post" => NormPlacement::Post,
            other => {
                return Err(Error::Config(format!(
                    "unknown model.norm '{other}' (expected pre or post)"
                )))
            }
        };
        Ok(ModelConfig {
            input_dim,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            dropout: m.dropout,
            residual_dropout: m.residual_dropout,
            vocab_size,
            max_positions: m.max_positions,
            norm,
            tie_embeddings: m.tie_embeddings,
            init_seed: self.seed,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let o = &self.optimizer;
        Ok(TrainConfig {
            mode: self.train_mode()?,
            epochs: self.train.epochs,
            max_frames_per_batch: self.train.max_frames_per_batch,
            seed: self.seed,
            average_best: self.train.average_best,
            optimizer: OptimizerConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                epsilon: o.epsilon,
                k: o.k,
                warmup_steps: o.warmup_steps,
                clip_norm: (o.clip_norm > 0.0).then_some(o.clip_norm),
            },
            loss: LossConfig {
                alpha: self.loss.alpha,
                label_smoothing: self.loss.label_smoothing,
            },
        })
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let d = &self.decode;
        let penalty_form = match d.penalty_form.as_str() {
            "gnmt" => PenaltyForm::Gnmt,
            "power" => PenaltyForm::Power,
            other => {
                return Err(Error::Config(format!(
                    "unknown decode.penalty_form '{other}' (expected gnmt or power)"
                )))
            }
        };
        Ok(DecodeConfig {
            beam_size: d.beam_size,
            length_penalty: d.length_penalty,
            penalty_form,
            extra_length: d.extra_length,
            capture_attention: false,
            mode: parse_search_mode(&d.mode)?,
        })
    }
}
