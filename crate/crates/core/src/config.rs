//! Run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KagsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionalKeys {
    /// Attend over every projected region.
    Full,
    /// Attend over the single flattened regional indicator.
    Flattened,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlattenActivation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub cca_layers: usize,
    pub k_relations: usize,
    pub m_boxes: usize,
    pub n_images: usize,
    pub beam_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub vocab_min_count: usize,
    /// `None` means `d_model / 8`.
    pub sop_reduced_channels: Option<usize>,
    pub max_sentence_len: usize,
    pub seed: u64,
    /// Channel width of the stored backbone features.
    pub feature_dim: usize,
    pub regional_ca_keys: RegionalKeys,
    pub flatten_activation: FlattenActivation,
    /// Decoupled decay when true, L2 added to the gradient otherwise.
    pub decoupled_weight_decay: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 1024,
            d_hidden: 512,
            n_heads: 8,
            cca_layers: 6,
            k_relations: 20,
            m_boxes: 36,
            n_images: 5,
            beam_size: 3,
            lr: 4e-4,
            weight_decay: 5e-4,
            batch_size: 50,
            epochs: 21,
            vocab_min_count: 3,
            sop_reduced_channels: None,
            max_sentence_len: 25,
            seed: 0,
            feature_dim: 2048,
            regional_ca_keys: RegionalKeys::Full,
            flatten_activation: FlattenActivation::Relu,
            decoupled_weight_decay: true,
            grad_clip: 5.0,
        }
    }
}

/// Keys that change parameter shapes or the forward computation. A
/// checkpoint only loads under a config that agrees on all of them.
pub const STRUCTURAL_KEYS: [&str; 11] = [
    "d_model",
    "d_hidden",
    "n_heads",
    "cca_layers",
    "k_relations",
    "m_boxes",
    "n_images",
    "sop_reduced_channels",
    "feature_dim",
    "regional_ca_keys",
    "flatten_activation",
];

impl RunConfig {
    /// Scaled-down widths used for fast experiments and tests.
    pub fn scaled() -> Self {
        RunConfig {
            d_model: 64,
            d_hidden: 32,
            n_heads: 2,
            cca_layers: 2,
            k_relations: 5,
            m_boxes: 8,
            batch_size: 4,
            vocab_min_count: 0,
            max_sentence_len: 12,
            feature_dim: 128,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KagsError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| KagsError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reduced_channels(&self) -> usize {
        self.sop_reduced_channels.unwrap_or((self.d_model / 8).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("n_heads", self.n_heads),
            ("cca_layers", self.cca_layers),
            ("k_relations", self.k_relations),
            ("m_boxes", self.m_boxes),
            ("n_images", self.n_images),
            ("beam_size", self.beam_size),
            ("batch_size", self.batch_size),
            ("max_sentence_len", self.max_sentence_len),
            ("feature_dim", self.feature_dim),
            ("sop_reduced_channels", self.reduced_channels()),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(KagsError::Config(format!("`{k}` must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(KagsError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(KagsError::Config(format!(
                "d_hidden {} is not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.reduced_channels() > self.d_model {
            return Err(KagsError::Config(
                "sop_reduced_channels exceeds d_model".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(KagsError::Config(
                "lr must be positive; weight_decay and grad_clip nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// First structural key on which `self` and `other` differ.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        let a = serde_json::to_value(self)?;
        let b = serde_json::to_value(other)?;
        for key in STRUCTURAL_KEYS {
            if a[key] != b[key] {
                return Err(KagsError::ConfigMismatch {
                    key: key.to_string(),
                    expected: a[key].to_string(),
                    found: b[key].to_string(),
                });
            }
        }
        Ok(())
    }
}
