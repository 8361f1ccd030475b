//! Run configuration: a flat `key = value` file (TOML syntax). Unknown keys
//! are rejected and missing keys take their defaults. The hash covers the
//! canonical rendering of every key, so any change makes checkpoints from
//! another configuration refuse to load.

use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};
use talkhead_core::grmn::GrmnConfig;
use talkhead_core::loss::LossWeights;
use talkhead_core::synth::SynthSpec;
use talkhead_core::train::{ModelConfig, TrainConfig};

use crate::fsio::{self, IoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Corpus
    pub identities: usize,
    pub frames: usize,
    pub heldout_frames: usize,
    pub rest_frames: usize,
    pub episode_len: usize,
    pub width: usize,
    pub height: usize,
    pub frame_rate: f64,
    // Model
    pub d_audio: usize,
    pub d_au: usize,
    pub d_identity: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub adain_hidden: usize,
    pub num_expr: usize,
    pub head_gain: f64,
    pub gaussians: usize,
    pub mouth_gaussians: usize,
    pub mouth_radius: f64,
    pub sh_degree: usize,
    pub binding_seed: u64,
    // Training
    pub seed: u64,
    pub pretrain_iters: usize,
    pub stage1_iters: usize,
    pub adapt_iters: usize,
    pub adapt_warmup_iters: usize,
    pub lr_pretrain: f64,
    pub lr_adapt: f64,
    pub lr_appearance: f64,
    pub weight_decay: f64,
    pub frames_per_iter: usize,
    pub adapt_appearance: bool,
    pub lambda_dssim: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub lambda_kl: f64,
    pub lambda_score: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = SynthSpec::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let g = model.grmn;
        let w = train.weights;
        Self {
            identities: corpus.identities,
            frames: corpus.frames,
            heldout_frames: corpus.heldout_frames,
            rest_frames: corpus.rest_frames,
            episode_len: corpus.episode_len,
            width: corpus.width,
            height: corpus.height,
            frame_rate: 25.0,
            d_audio: g.d_audio,
            d_au: g.d_au,
            d_identity: g.d_identity,
            d_hidden: g.d_hidden,
            layers: g.layers,
            heads: g.heads,
            adain_hidden: g.adain_hidden,
            num_expr: g.num_expr,
            head_gain: g.head_gain,
            gaussians: model.gaussians,
            mouth_gaussians: g.num_mouth,
            mouth_radius: model.mouth_radius,
            sh_degree: model.sh_degree,
            binding_seed: model.binding_seed,
            seed: train.seed,
            pretrain_iters: train.pretrain_iters,
            stage1_iters: train.stage1_iters,
            adapt_iters: train.adapt_iters,
            adapt_warmup_iters: train.adapt_warmup_iters,
            lr_pretrain: train.lr_pretrain,
            lr_adapt: train.lr_adapt,
            lr_appearance: train.lr_appearance,
            weight_decay: train.weight_decay,
            frames_per_iter: train.frames_per_iter,
            adapt_appearance: train.adapt_appearance,
            lambda_dssim: w.dssim,
            lambda_depth: w.depth,
            lambda_normal: w.normal,
            lambda_kl: w.kl,
            lambda_score: w.score,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for {key}: {reason}")]
    Value { key: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Published full-scale settings, next to the keys they correspond to.
pub const REFERENCE_SETTINGS: &[(&str, &str)] = &[
    ("pretrain_iters", "250000"),
    ("stage1_iters", "1000"),
    ("adapt_iters", "20000"),
    ("lr_pretrain", "0.005"),
    ("lr_adapt", "0.0005"),
    ("lambda_dssim", "0.2"),
    ("lambda_depth", "0.01"),
    ("lambda_normal", "0.001"),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = fsio::read(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| ConfigError::Parse(format!("{}: not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text: every key, in declaration order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(self.canonical().as_bytes());
        h.finish()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, reason: &str| {
            Err(ConfigError::Value {
                key,
                reason: reason.into(),
            })
        };
        let positive = [
            ("frames", self.frames),
            ("width", self.width),
            ("height", self.height),
            ("episode_len", self.episode_len),
            ("d_audio", self.d_audio),
            ("d_au", self.d_au),
            ("d_identity", self.d_identity),
            ("d_hidden", self.d_hidden),
            ("heads", self.heads),
            ("adain_hidden", self.adain_hidden),
            ("num_expr", self.num_expr),
            ("gaussians", self.gaussians),
            ("frames_per_iter", self.frames_per_iter),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(k, "must be positive");
            }
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return bad("heads", "must divide d_hidden");
        }
        if self.mouth_gaussians > self.gaussians {
            return bad("mouth_gaussians", "cannot exceed gaussians");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree", "at most 3");
        }
        for (k, v) in [
            ("frame_rate", self.frame_rate),
            ("head_gain", self.head_gain),
            ("mouth_radius", self.mouth_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(k, "must be positive and finite");
            }
        }
        for (k, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_adapt", self.lr_adapt),
            ("lr_appearance", self.lr_appearance),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(k, "must be non-negative and finite");
            }
        }
        self.train().weights.validate().map_err(|e| ConfigError::Value {
            key: "lambda_*",
            reason: e.to_string(),
        })?;
        Ok(())
    }

    pub fn corpus(&self) -> SynthSpec {
        SynthSpec {
            identities: self.identities,
            frames: self.frames,
            heldout_frames: self.heldout_frames,
            rest_frames: self.rest_frames,
            episode_len: self.episode_len,
            width: self.width,
            height: self.height,
            gaussians: self.gaussians,
            mouth_gaussians: self.mouth_gaussians,
            mouth_radius: self.mouth_radius,
            binding_seed: self.binding_seed,
            d_audio: self.d_audio,
            d_au: self.d_au,
            d_identity: self.d_identity,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            grmn: GrmnConfig {
                d_audio: self.d_audio,
                d_au: self.d_au,
                d_identity: self.d_identity,
                d_hidden: self.d_hidden,
                layers: self.layers,
                heads: self.heads,
                adain_hidden: self.adain_hidden,
                num_expr: self.num_expr,
                num_mouth: self.mouth_gaussians,
                head_gain: self.head_gain,
            },
            gaussians: self.gaussians,
            sh_degree: self.sh_degree,
            mouth_radius: self.mouth_radius,
            binding_seed: self.binding_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            pretrain_iters: self.pretrain_iters,
            stage1_iters: self.stage1_iters,
            adapt_iters: self.adapt_iters,
            adapt_warmup_iters: self.adapt_warmup_iters,
            lr_pretrain: self.lr_pretrain,
            lr_adapt: self.lr_adapt,
            lr_appearance: self.lr_appearance,
            weight_decay: self.weight_decay,
            frames_per_iter: self.frames_per_iter,
            adapt_appearance: self.adapt_appearance,
            weights: LossWeights {
                dssim: self.lambda_dssim,
                depth: self.lambda_depth,
                normal: self.lambda_normal,
                kl: self.lambda_kl,
                score: self.lambda_score,
            },
        }
    }

    /// `key  this-run  reference  status` lines for the run report.
    pub fn reference_comparison(&self) -> Vec<String> {
        let values: toml::Table = toml::from_str(&self.canonical()).expect("canonical text parses");
        REFERENCE_SETTINGS
            .iter()
            .map(|&(k, reference)| {
                let ours = values.get(k).map(|v| v.to_string()).unwrap_or_default();
                let same = ours.parse::<f64>().ok() == reference.parse::<f64>().ok();
                format!(
                    "{k}\t{ours}\t{reference}\t{}",
                    if same { "reference" } else { "desk-scale" }
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        let text = c.canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::parse("").unwrap(), c);
        let other = RunConfig::parse("seed = 3").unwrap();
        assert_ne!(other.hash(), c.hash());
        assert_eq!(c.lr_pretrain, 5e-3);
        assert_eq!(c.lr_adapt, 5e-4);
        assert_eq!(c.lambda_dssim, 0.2);
        assert_eq!(c.lambda_depth, 1e-2);
        assert_eq!(c.lambda_normal, 1e-3);
    }

    #[test]
    fn unknown_and_bad_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("no_such_key = 1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::parse("width = 0"),
            Err(ConfigError::Value { key: "width", .. })
        ));
        assert!(matches!(
            RunConfig::parse("heads = 5"),
            Err(ConfigError::Value { key: "heads", .. })
        ));
        assert!(RunConfig::parse("lambda_kl = -1.0").is_err());
        assert!(RunConfig::parse("width = \"wide\"").is_err());
    }

    #[test]
    fn reference_comparison_marks_desk_scale_values() {
        let lines = RunConfig::default().reference_comparison();
        assert!(lines
            .iter()
            .any(|l| l.starts_with("lr_pretrain\t0.005\t0.005\treference")));
        assert!(lines
            .iter()
            .any(|l| l.starts_with("pretrain_iters\t2500\t250000\tdesk-scale")));
    }
}
