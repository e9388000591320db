//! Run configuration: a flat `key = value` document.
//!
//! Absent keys take the defaults below, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes every key in a fixed order so a parsed
//! document serializes back to one canonical text.

use serde::{Deserialize, Serialize};

use crate::decode::Schedule;
use crate::error::{Error, Result};
use crate::vq::{CodebookMode, FusionMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub image_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub data_seed: u64,

    pub codebook_size: usize,
    pub embedding_dim: usize,
    pub codebook_mode: CodebookMode,
    pub codebook_size_bottom: usize,
    pub fusion: FusionMode,
    pub levels: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub norm_groups: usize,
    #[serde(serialize_with = "short_f32")]
    pub commitment_cost: f32,
    #[serde(serialize_with = "short_f32")]
    pub tokenizer_learning_rate: f32,
    pub tokenizer_steps: usize,
    pub tokenizer_batch: usize,
    pub dead_code_revival: bool,

    #[serde(serialize_with = "short_f32")]
    pub learning_rate: f32,
    #[serde(serialize_with = "short_f32")]
    pub weight_decay: f32,
    #[serde(serialize_with = "short_f32")]
    pub beta1: f32,
    #[serde(serialize_with = "short_f32")]
    pub beta2: f32,
    #[serde(serialize_with = "short_f32")]
    pub gradient_clip: f32,
    #[serde(serialize_with = "short_f32")]
    pub label_smoothing: f32,
    pub warmup_steps: usize,
    #[serde(serialize_with = "short_f32")]
    pub uncond_cutoff: f32,
    pub transformer_steps: usize,
    pub transformer_batch: usize,
    #[serde(serialize_with = "short_f32")]
    pub dropout: f32,
    pub top_layers: usize,
    pub bottom_layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub cond_aug: bool,
    #[serde(serialize_with = "short_f32")]
    pub cond_aug_ratio: f32,

    pub steps_top: usize,
    pub steps_bottom: usize,
    pub schedule: Schedule,
    #[serde(serialize_with = "short_f32")]
    pub temperature: f32,
    #[serde(serialize_with = "short_f32")]
    pub confidence_temperature: f32,
    #[serde(serialize_with = "short_f32")]
    pub guidance_scale: f32,
}

// f32 values are written with their shortest decimal form, not widened to f64
fn short_f32<S: serde::Serializer>(v: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().unwrap_or(*v as f64))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            train_count: 2048,
            val_count: 256,
            data_seed: 0,
            codebook_size: 256,
            embedding_dim: 16,
            codebook_mode: CodebookMode::Shared,
            codebook_size_bottom: 64,
            fusion: FusionMode::Residual,
            levels: 2,
            channels: 32,
            res_blocks: 2,
            norm_groups: 8,
            commitment_cost: 0.25,
            tokenizer_learning_rate: 1e-3,
            tokenizer_steps: 20_000,
            tokenizer_batch: 16,
            dead_code_revival: true,
            learning_rate: 1e-4,
            weight_decay: 0.045,
            beta1: 0.9,
            beta2: 0.96,
            gradient_clip: 3.0,
            label_smoothing: 0.1,
            warmup_steps: 200,
            uncond_cutoff: 0.1,
            transformer_steps: 30_000,
            transformer_batch: 32,
            dropout: 0.1,
            top_layers: 6,
            bottom_layers: 4,
            heads: 4,
            hidden_dim: 128,
            mlp_dim: 512,
            cond_aug: false,
            cond_aug_ratio: 0.3,
            steps_top: 18,
            steps_bottom: 6,
            schedule: Schedule::Cosine,
            temperature: 1.0,
            confidence_temperature: 1.0,
            guidance_scale: 0.2,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    Error::Config(format!("line {line}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text: every key, in declaration order. Panics on seeds
    /// that [`RunConfig::validate`] rejects.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        // TOML integers are signed 64-bit
        for (name, v) in [("seed", self.seed), ("data_seed", self.data_seed)] {
            if v > i64::MAX as u64 {
                return fail(format!("{name} = {v} exceeds {}", i64::MAX));
            }
        }
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} must be divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.steps_top == 0 || self.steps_bottom == 0 {
            return fail("steps_top and steps_bottom must be at least 1".into());
        }
        for (name, p) in [("dropout", self.dropout), ("uncond_cutoff", self.uncond_cutoff), ("cond_aug_ratio", self.cond_aug_ratio)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing = {} is outside [0, 1)", self.label_smoothing));
        }
        for (name, v) in [
            ("temperature", self.temperature),
            ("confidence_temperature", self.confidence_temperature),
            ("guidance_scale", self.guidance_scale),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be non-negative"));
            }
        }
        if self.transformer_batch == 0 || self.tokenizer_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        self.tokenizer().validate()
    }

    pub fn tokenizer(&self) -> crate::vq::TokenizerConfig {
        crate::vq::TokenizerConfig {
            image_size: self.image_size,
            channels: self.channels,
            embed_dim: self.embedding_dim,
            codebook_size: self.codebook_size,
            codebook_size_bottom: self.codebook_size_bottom,
            codebook_mode: self.codebook_mode,
            fusion: self.fusion,
            levels: self.levels,
            res_blocks: self.res_blocks,
            norm_groups: self.norm_groups,
            commitment_cost: self.commitment_cost,
        }
    }

    pub fn tokenizer_training(&self) -> crate::vq::TokenizerTrainConfig {
        crate::vq::TokenizerTrainConfig {
            steps: self.tokenizer_steps,
            batch: self.tokenizer_batch,
            lr: self.tokenizer_learning_rate,
            seed: self.seed,
            dead_code_revival: self.dead_code_revival,
            ppl_window: 100,
        }
    }

    pub fn transformer(&self, level: crate::nar::Level) -> crate::nar::TransformerConfig {
        let tok = self.tokenizer();
        let (layers, seq_len, cond_len, codes) = match level {
            crate::nar::Level::Top => (self.top_layers, tok.top_len(), 0, tok.top_codes()),
            crate::nar::Level::Bottom => (self.bottom_layers, tok.bottom_len(), tok.top_len(), tok.bottom_codes()),
        };
        crate::nar::TransformerConfig {
            level,
            layers,
            heads: self.heads,
            dim: self.hidden_dim,
            mlp_dim: self.mlp_dim,
            dropout: self.dropout,
            seq_len,
            cond_len,
            codes,
            cond_codes: tok.top_codes(),
            classes: super::NUM_CLASSES,
        }
    }

    pub fn transformer_training(&self) -> crate::nar::TrainConfig {
        crate::nar::TrainConfig {
            steps: self.transformer_steps,
            batch: self.transformer_batch,
            lr: self.learning_rate,
            warmup: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            clip: self.gradient_clip,
            label_smoothing: self.label_smoothing,
            uncond_cutoff: self.uncond_cutoff as f64,
            seed: self.seed,
            cond_aug: self.cond_aug.then_some(self.cond_aug_ratio as f64),
            fixed_mask_ratio: None,
        }
    }

    pub fn decoding(&self) -> crate::decode::DecodeConfig {
        crate::decode::DecodeConfig {
            steps_top: self.steps_top,
            steps_bottom: self.steps_bottom,
            schedule: self.schedule,
            temperature: self.temperature,
            confidence_temperature: self.confidence_temperature,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> super::ShapesTexSpec {
        super::ShapesTexSpec {
            image_size: self.image_size,
            seed: self.data_seed,
            train_count: self.train_count,
            val_count: self.val_count,
        }
    }
}
