//! Effective run configuration: flags over config file over defaults.

use crate::args::{AblateArg, ModeArg, ModelArgs, TrackerArg};
use crate::error::{usage, CliResult};
use crossseg_core::config::{EncoderKind, TrackerKind, TrainMode};
use crossseg_core::{Ablation, RunConfig};

pub fn ablation(a: AblateArg) -> Ablation {
    match a {
        AblateArg::Plain => Ablation::Plain,
        AblateArg::Bf => Ablation::Bf,
        AblateArg::Pgp => Ablation::Pgp,
        AblateArg::Mr => Ablation::Mr,
    }
}

/// Base configuration: `--config` when given, otherwise the toy defaults.
pub fn base(m: &ModelArgs) -> CliResult<RunConfig> {
    match &m.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => Ok(RunConfig::toy()),
    }
}

/// Apply flag overrides to `cfg`. `data_size` is the dataset image size,
/// adopted when neither a flag nor a config file fixes it.
pub fn apply(mut cfg: RunConfig, m: &ModelArgs, data_size: Option<usize>) -> CliResult<RunConfig> {
    if let Some(a) = m.ablate {
        let a = ablation(a);
        if a != Ablation::Mr && m.refine_iters.is_some_and(|k| k > 0) {
            return Err(usage(format!("--ablate {} disables refinement; drop --refine-iters", a.name())));
        }
        if matches!(a, Ablation::Plain | Ablation::Bf) && m.points.is_some() {
            return Err(usage(format!("--ablate {} disables point guidance; drop --points", a.name())));
        }
        if a == Ablation::Plain && m.fusion_size.is_some() {
            return Err(usage("--ablate plain disables fusion; drop --fusion-size"));
        }
        a.apply(&mut cfg.model);
    }
    if let Some(v) = m.seed {
        cfg.seed = v;
    }
    if let Some(v) = m.points {
        cfg.model.k_points = v as usize;
    }
    if let Some(v) = m.blocks {
        cfg.model.decoder_blocks = v as usize;
    }
    if let Some(v) = m.refine_iters {
        cfg.model.refine_iters = v as usize;
    }
    if let Some(v) = m.channels {
        cfg.model.channels = v;
    }
    match (m.image_size, data_size) {
        (Some(s), Some(d)) if s != d => return Err(usage(format!("--image-size {s} does not match the dataset's {d}"))),
        (Some(s), _) => cfg.model.image_size = s,
        (None, Some(d)) if m.config.is_none() => cfg.model.image_size = d,
        (None, Some(d)) if cfg.model.image_size != d => {
            return Err(usage(format!("config image size {} does not match the dataset's {d}", cfg.model.image_size)))
        }
        _ => {}
    }
    if let Some(fs) = m.fusion_size {
        let feat = cfg.feature_size();
        let fs = fs as usize;
        if feat % fs != 0 {
            return Err(usage(format!("--fusion-size {fs} does not divide the {feat}x{feat} feature map")));
        }
        cfg.model.fusion_ratio = feat / fs;
    }
    if let Some(v) = m.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = m.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = m.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = m.mode {
        cfg.train.mode = match v {
            ModeArg::Pairs => TrainMode::Pairs,
            ModeArg::Ssl => TrainMode::Ssl,
        };
    }
    if let Some(v) = m.tracker {
        cfg.train.tracker = match v {
            TrackerArg::GroundTruth => TrackerKind::GroundTruth,
            TrackerArg::FeatureCorrelation => TrackerKind::FeatureCorrelation,
        };
    }
    if let Some(d) = &m.encoder_dir {
        cfg.model.encoder = EncoderKind::External;
        cfg.model.encoder_dir = Some(d.display().to_string());
    }
    if cfg.model.encoder == EncoderKind::External && cfg.train.mode == TrainMode::Ssl {
        return Err(usage("self-supervised mode needs the built-in encoder"));
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setting() {
        let c = apply(RunConfig::toy(), &ModelArgs::default(), None).unwrap();
        assert_eq!((c.model.k_points, c.model.fusion_ratio, c.model.decoder_blocks, c.model.refine_iters), (5, 7, 2, 2));
        assert!(c.model.use_fusion && c.model.use_points);
    }

    #[test]
    fn ablation_flags() {
        let m = ModelArgs { ablate: Some(AblateArg::Plain), ..Default::default() };
        let c = apply(RunConfig::toy(), &m, None).unwrap();
        assert!(!c.model.use_fusion && !c.model.use_points && c.model.refine_iters == 0);
        let bad = ModelArgs { ablate: Some(AblateArg::Pgp), refine_iters: Some(2), ..Default::default() };
        assert!(matches!(apply(RunConfig::toy(), &bad, None), Err(crate::error::CliError::Usage(_))));
        let bad = ModelArgs { fusion_size: Some(4), ..Default::default() };
        assert!(apply(RunConfig::toy(), &bad, None).is_err());
        let ok = ModelArgs { fusion_size: Some(7), refine_iters: Some(0), ..Default::default() };
        let c = apply(RunConfig::toy(), &ok, None).unwrap();
        assert_eq!((c.model.fusion_ratio, c.model.refine_iters), (5, 0));
    }

    #[test]
    fn image_size_follows_data() {
        let c = apply(RunConfig::toy(), &ModelArgs::default(), Some(420)).unwrap();
        assert_eq!(c.model.image_size, 420);
        let m = ModelArgs { image_size: Some(518), ..Default::default() };
        assert!(apply(RunConfig::toy(), &m, Some(70)).is_err());
    }
}
