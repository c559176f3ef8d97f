//! Run configuration.
//!
//! [`RunConfig::default`] carries the full-scale settings (518×518 inputs,
//! 8-head attention); [`RunConfig::toy`] is the 70×70 desk-scale variant used
//! by tests and the CLI. Both serialise to TOML with one section per concern.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_blocks: usize,
    pub mask_hidden: usize,
    pub k_points: usize,
    pub fusion_ratio: usize,
    pub decoder_blocks: usize,
    pub refine_iters: usize,
    /// Bottleneck Fusion on/off (off is the plain head).
    pub use_fusion: bool,
    /// Point-guided prompts on/off; off leaves only the output token.
    pub use_points: bool,
    /// Add the fused low-resolution update back onto the full-resolution
    /// input instead of replacing it.
    pub fusion_residual: bool,
    /// Add a learned null-mask embedding to the target features before fusion.
    pub target_null_mask: bool,
    /// Sample point features from the mask-injected source map.
    pub point_features_from_injected: bool,
    /// Upsample logits instead of probabilities to image resolution.
    pub upsample_logits: bool,
    pub refine_weights: RefineWeights,
    pub fourier_scale: f64,
    pub encoder: EncoderKind,
    /// Directory of serialized features for the external encoder provider.
    pub encoder_dir: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineWeights {
    /// Refinement reuses the head's mask embedding and decoder blocks.
    Shared,
    /// One extra weight set used by every refinement iteration.
    Separate,
    /// A distinct weight set per refinement iteration.
    PerIteration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Supervised cross-view pairs with ground-truth target masks.
    Pairs,
    /// Single-image self-supervision through augmentation families.
    Ssl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerKind {
    GroundTruth,
    FeatureCorrelation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub tracker: TrackerKind,
    /// Probability that a sample uses the tracker-preserving family.
    pub family_mix: f64,
    /// Std-dev of synthetic target prompt noise, as a fraction of the image
    /// diagonal.
    pub prompt_noise: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Probability that a training sample is refined.
    pub refine_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            image_size: 518,
            channels: 128,
            heads: 8,
            mlp_ratio: 4,
            encoder_blocks: 4,
            mask_hidden: 16,
            k_points: 5,
            fusion_ratio: 7,
            decoder_blocks: 2,
            refine_iters: 2,
            use_fusion: true,
            use_points: true,
            fusion_residual: true,
            target_null_mask: false,
            point_features_from_injected: false,
            upsample_logits: false,
            refine_weights: RefineWeights::Shared,
            fourier_scale: 1.0,
            encoder: EncoderKind::Toy,
            encoder_dir: None,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 12,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            clip_norm: 1.0,
            batch_size: 8,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pairs,
            tracker: TrackerKind::GroundTruth,
            family_mix: 0.5,
            prompt_noise: 0.02,
            focal_weight: 20.0,
            dice_weight: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            refine_prob: 0.5,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, model: ModelConfig::default(), optim: OptimConfig::default(), train: TrainConfig::default() }
    }
}

/// Component ablation rows: plain head, then Bottleneck Fusion, point
/// guidance and mask refinement added in turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Plain,
    Bf,
    Pgp,
    Mr,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Plain, Ablation::Bf, Ablation::Pgp, Ablation::Mr];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Plain => "plain",
            Ablation::Bf => "bf",
            Ablation::Pgp => "pgp",
            Ablation::Mr => "mr",
        }
    }

    /// `refine_iters` is left as configured for the full model (falling back
    /// to 2 when it was zeroed).
    pub fn apply(self, model: &mut ModelConfig) {
        let (fusion, points, refine) = match self {
            Ablation::Plain => (false, false, false),
            Ablation::Bf => (true, false, false),
            Ablation::Pgp => (true, true, false),
            Ablation::Mr => (true, true, true),
        };
        model.use_fusion = fusion;
        model.use_points = points;
        if !refine {
            model.refine_iters = 0;
        } else if model.refine_iters == 0 {
            model.refine_iters = 2;
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (plain|bf|pgp|mr)")))
    }
}

impl RunConfig {
    /// Desk-scale configuration: 70×70 images, C = 64, single-head attention.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model.image_size = 70;
        c.model.channels = 64;
        c.model.heads = 1;
        c
    }

    pub fn feature_size(&self) -> usize {
        self.model.image_size / 2
    }

    pub fn token_grid(&self) -> usize {
        self.model.image_size / self.model.patch_size
    }

    pub fn bottleneck_size(&self) -> usize {
        self.feature_size() / self.model.fusion_ratio
    }

    /// Prompt-query length: `3·K + 1` with point guidance, otherwise just the
    /// output token.
    pub fn query_len(&self) -> usize {
        if self.model.use_points {
            3 * self.model.k_points + 1
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |s: String| Err(Error::Config(s));
        if m.patch_size == 0 || m.image_size == 0 || m.image_size % m.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch size {}", m.image_size, m.patch_size));
        }
        if m.image_size % 2 != 0 {
            return bad(format!("image size {} must be even", m.image_size));
        }
        if m.fusion_ratio == 0 || self.feature_size() % m.fusion_ratio != 0 {
            return bad(format!("feature size {} not divisible by fusion ratio {}", self.feature_size(), m.fusion_ratio));
        }
        if m.k_points == 0 {
            return bad("k_points must be at least 1".into());
        }
        if m.decoder_blocks == 0 {
            return bad("decoder_blocks must be at least 1".into());
        }
        if m.heads == 0 || m.channels % m.heads != 0 || m.channels % 2 != 0 {
            return bad(format!("channels {} must be even and divisible by heads {}", m.channels, m.heads));
        }
        if m.encoder == EncoderKind::External && m.encoder_dir.is_none() {
            return bad("external encoder needs encoder_dir".into());
        }
        let o = &self.optim;
        if o.batch_size == 0 || !(o.lr > 0.0) || !(o.clip_norm > 0.0) {
            return bad("batch_size, lr and clip_norm must be positive".into());
        }
        let t = &self.train;
        for (name, p) in [("family_mix", t.family_mix), ("refine_prob", t.refine_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during the 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.optim.decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.optim.lr * self.optim.decay_factor.powi(passed as i32)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        let c = RunConfig::default();
        assert_eq!(c.token_grid(), 37);
        assert_eq!(c.bottleneck_size(), 37);
        assert_eq!(RunConfig::toy().bottleneck_size(), 5);
    }

    #[test]
    fn schedule() {
        let c = RunConfig::default();
        assert_eq!(c.lr_at(1), 5e-5);
        assert_eq!(c.lr_at(8), 5e-5);
        assert!((c.lr_at(9) - 5e-6).abs() < 1e-20);
        assert!((c.lr_at(12) - 5e-7).abs() < 1e-21);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = RunConfig::toy();
        c.model.image_size = 71;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.model.fusion_ratio = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.model.k_points = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("seed = 9\n[model]\nk_points = 9\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.model.k_points, 9);
        assert_eq!(partial.optim, OptimConfig::default());
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
    }

    #[test]
    fn ablation_rows() {
        let mut m = ModelConfig::default();
        Ablation::Plain.apply(&mut m);
        assert!(!m.use_fusion && !m.use_points && m.refine_iters == 0);
        Ablation::Mr.apply(&mut m);
        assert!(m.use_fusion && m.use_points && m.refine_iters == 2);
        assert_eq!("pgp".parse::<Ablation>().unwrap(), Ablation::Pgp);
    }
}
