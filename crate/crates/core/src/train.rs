//! Training loop: per-sample forward/backward over a batch, deterministic
//! gradient reduction, global-norm clipping, AdamW with a step-decay
//! schedule, and per-epoch checkpoints plus a `key=value` metrics log.

use crate::augment::{augment, synthesize_prompts, Family};
use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, TrackerKind, TrainMode};
use crate::data::MaskGrid;
use crate::encoder::{EncoderProvider, FeatureMap, Tracker};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{column, refine_schedule, HeadInput, Prompts, UnionHead};
use crate::loss::{graph_loss, LossReport, LossWeights};
use crate::optim::AdamW;
use crate::params::Gradients;
use crate::rng::stream;
use crate::synth::Sample;
use crate::transform::Homography;
use crate::{par, Image};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Inputs for one head invocation plus its supervision target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub f_s: FeatureMap,
    pub f_t: FeatureMap,
    pub m_s: MaskGrid,
    pub gt: MaskGrid,
    pub prompts: Option<Prompts>,
}

impl Prepared {
    pub fn input(&self) -> HeadInput<'_> {
        HeadInput { f_s: &self.f_s, f_t: &self.f_t, m_s: &self.m_s, prompts: self.prompts.as_ref() }
    }
}

/// Which way a benchmark pair is queried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2t" => Ok(Direction::SourceToTarget),
            "t2s" => Ok(Direction::TargetToSource),
            _ => Err(Error::Config(format!("unknown direction {s:?} (s2t|t2s)"))),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn prepare_views(
    head: &UnionHead,
    cfg: &RunConfig,
    provider: &EncoderProvider,
    id: &str,
    (source, target): (&Image, &Image),
    (m_s, gt): (&MaskGrid, &MaskGrid),
    transform: &Homography,
    independent: bool,
    rng: &mut impl Rng,
) -> Result<Prepared> {
    let (f_s, f_t) = provider.encode(id, source, target, independent)?;
    let prompts = if head.config.use_points {
        let external = match provider {
            EncoderProvider::External(x) => x.load(id)?.tracks,
            EncoderProvider::Toy(_) => None,
        };
        let tracker = match (&external, cfg.train.tracker) {
            (Some(given), _) => Tracker::Given(given),
            (None, TrackerKind::GroundTruth) => Tracker::GroundTruth(*transform),
            (None, TrackerKind::FeatureCorrelation) => Tracker::FeatureCorrelation { source: &f_s, target: &f_t },
        };
        Some(head.prepare_prompts(m_s, source, target, &tracker, rng)?)
    } else {
        None
    };
    Ok(Prepared { f_s, f_t, m_s: m_s.clone(), gt: gt.clone(), prompts })
}

/// Encode a benchmark pair and draw its prompts.
pub fn prepare_pair(
    head: &UnionHead,
    cfg: &RunConfig,
    provider: &EncoderProvider,
    sample: &Sample,
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<Prepared> {
    match direction {
        Direction::SourceToTarget => prepare_views(
            head,
            cfg,
            provider,
            &sample.id,
            (&sample.source, &sample.target),
            (&sample.m_s, &sample.m_t),
            &sample.transform,
            false,
            rng,
        ),
        Direction::TargetToSource => {
            let inv = sample.transform.inverse().ok_or_else(|| Error::Config("singular pair transform".into()))?;
            prepare_views(
                head,
                cfg,
                provider,
                &sample.id,
                (&sample.target, &sample.source),
                (&sample.m_t, &sample.m_s),
                &inv,
                false,
                rng,
            )
        }
    }
}

/// Build a self-supervised pair from the sample's source view alone.
pub fn prepare_ssl(head: &UnionHead, cfg: &RunConfig, provider: &EncoderProvider, sample: &Sample, rng: &mut impl Rng) -> Result<Prepared> {
    if matches!(provider, EncoderProvider::External(_)) {
        return Err(Error::Config("self-supervised mode needs the built-in encoder".into()));
    }
    let family = if rng.random::<f64>() < cfg.train.family_mix { Family::Adaptive } else { Family::NonAdaptive };
    let pair = augment(&sample.source, &sample.m_s, family, rng)?;
    let independent = family == Family::NonAdaptive;
    let (f_s, f_t) = provider.encode(&sample.id, &pair.source, &pair.target, independent)?;
    let prompts = if head.config.use_points {
        let tracker = match cfg.train.tracker {
            TrackerKind::GroundTruth => Tracker::GroundTruth(pair.transform),
            TrackerKind::FeatureCorrelation => Tracker::FeatureCorrelation { source: &f_s, target: &f_t },
        };
        Some(synthesize_prompts(&pair, head.config.k_points, &tracker, cfg.train.prompt_noise, rng)?)
    } else {
        None
    };
    Ok(Prepared { f_s, f_t, m_s: pair.m_s, gt: pair.m_t, prompts })
}

/// Loss and parameter gradients of one prepared sample.
pub fn sample_gradients(head: &UnionHead, prepared: &Prepared, refine_iters: usize, w: &LossWeights) -> Result<(Gradients, LossReport)> {
    let mut g = Graph::new();
    let pass = head.forward(&mut g, &prepared.input(), refine_iters)?;
    let gt = Arc::new(column(prepared.gt.values()));
    let (total, focal, dice) = graph_loss(&mut g, pass.output, &gt, w);
    let report = LossReport::new(g.scalar(focal), g.scalar(dice), w);
    debug_assert!((report.total - g.scalar(total)).abs() <= 1e-9 * report.total.abs().max(1.0));
    Ok((g.backward(total, &head.store), report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub refined: usize,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} step={} lr={:e} loss={:.6} focal={:.6} dice={:.6} grad_norm={:.6} clipped_norm={:.6} refined={}",
            self.epoch,
            self.step,
            self.lr,
            self.loss.total,
            self.loss.focal,
            self.loss.dice,
            self.grad_norm,
            self.clipped_norm,
            self.refined
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub head: UnionHead,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    /// Mean training loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

/// Limits used by tests and benchmarks to cut a run short.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainLimits {
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

pub fn train(config: &RunConfig, data: &[Sample], provider: &EncoderProvider, out: Option<&Path>) -> Result<TrainState> {
    train_with(config, data, provider, out, TrainLimits::default())
}

pub fn train_with(
    config: &RunConfig,
    data: &[Sample],
    provider: &EncoderProvider,
    out: Option<&Path>,
    limits: TrainLimits,
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let head = UnionHead::new(config, config.seed)?;
    let optimizer = AdamW::new(&config.optim, &head.store);
    let before = provider.checksum();
    let mut state = TrainState {
        head,
        optimizer,
        epoch: 0,
        steps: Vec::new(),
        epoch_losses: Vec::new(),
        encoder_checksum_before: before.clone(),
        encoder_checksum_after: before,
    };
    let weights = LossWeights::from(&config.train);
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|source| Error::Write { path: dir.into(), source })?;
            let p = dir.join("metrics.log");
            Some((std::fs::File::create(&p).map_err(|source| Error::Write { path: p.clone(), source })?, p))
        }
        None => None,
    };
    let bs = config.optim.batch_size;
    let mut global_step = 0usize;

    'epochs: for epoch in 1..=config.optim.epochs {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(config.seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for (step, batch) in order.chunks(bs).enumerate() {
            if limits.max_steps.is_some_and(|m| global_step >= m) {
                break 'epochs;
            }
            let key = (epoch * data.len() + step * bs) as u64;
            let iters = refine_schedule(
                batch.len(),
                config.model.refine_iters,
                config.train.refine_prob,
                true,
                &mut stream(config.seed, "refine", key),
            );
            let head = &state.head;
            let results = par::map(batch, |j, &i| -> Result<(Gradients, LossReport)> {
                let mut rng = stream(config.seed, "sample", key + j as u64);
                let prepared = match config.train.mode {
                    TrainMode::Pairs => prepare_pair(head, config, provider, &data[i], Direction::SourceToTarget, &mut rng)?,
                    TrainMode::Ssl => prepare_ssl(head, config, provider, &data[i], &mut rng)?,
                };
                sample_gradients(head, &prepared, iters[j], &weights)
            });
            let mut grads = Gradients::zeros_like(&state.head.store);
            let mut reports = Vec::with_capacity(batch.len());
            for r in results {
                let (g, rep) = r?;
                grads.accumulate(&g);
                reports.push(rep);
            }
            let loss = LossReport::mean(&reports, &weights);
            if !loss.total.is_finite() || !grads.global_norm().is_finite() {
                let dump = dump_batch(out, epoch, step, batch, data, &loss)?;
                return Err(Error::NonFiniteLoss { epoch, step, dump });
            }
            grads.scale(1.0 / batch.len() as f64);
            let grad_norm = grads.clip_global_norm(config.optim.clip_norm);
            let clipped_norm = grads.global_norm();
            state.optimizer.update(&mut state.head.store, &grads, lr);
            epoch_loss += loss.total * batch.len() as f64;
            epoch_n += batch.len();
            let rec = StepRecord { epoch, step, lr, loss, grad_norm, clipped_norm, refined: iters.iter().filter(|&&k| k > 0).count() };
            if let Some((f, p)) = &mut log {
                writeln!(f, "{}", rec.log_line()).map_err(|source| Error::Write { path: p.clone(), source })?;
            }
            log::debug!("{}", rec.log_line());
            state.steps.push(rec);
            global_step += 1;
        }
        state.epoch = epoch;
        let mean = epoch_loss / epoch_n.max(1) as f64;
        state.epoch_losses.push(mean);
        log::info!("epoch {epoch}: mean loss {mean:.5} lr {lr:e}");
        if let Some(dir) = out {
            save_checkpoint(&dir.join(format!("epoch-{epoch:03}")), &state.head.store, config, &[("epoch", epoch.to_string())])?;
        }
    }
    state.encoder_checksum_after = provider.checksum();
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final"), &state.head.store, config, &[("epoch", state.epoch.to_string())])?;
    }
    Ok(state)
}

fn dump_batch(out: Option<&Path>, epoch: usize, step: usize, batch: &[usize], data: &[Sample], loss: &LossReport) -> Result<PathBuf> {
    let mut text = String::new();
    for (&i, (f, d)) in batch.iter().zip(&loss.per_sample) {
        writeln!(text, "id={} focal={f} dice={d}", data[i].id).unwrap();
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("nonfinite-epoch{epoch:03}-step{step:05}.txt"));
    crate::checkpoint::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Rebuild a head from a checkpoint directory.
pub fn load_head(dir: &Path) -> Result<(UnionHead, RunConfig)> {
    let (bundle, config) = crate::checkpoint::load_checkpoint(dir)?;
    let mut head = UnionHead::new(&config, config.seed)?;
    bundle.load_into(&mut head.store, dir)?;
    Ok((head, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Difficulty};

    fn small() -> RunConfig {
        let mut c = RunConfig::toy();
        c.model.channels = 16;
        c.optim.batch_size = 2;
        c.optim.epochs = 1;
        c
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let mut c = small();
        c.optim.epochs = 0;
        let data = generate(1, 2, Difficulty::Easy, 70).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = EncoderProvider::from_config(&c);
        let st = train(&c, &data, &p, Some(dir.path())).unwrap();
        assert_eq!(st.head.store.checksum(), UnionHead::new(&c, c.seed).unwrap().store.checksum());
        let (h, cfg) = load_head(&dir.path().join("final")).unwrap();
        assert_eq!(cfg, c);
        assert_eq!(h.store.checksum(), st.head.store.checksum());
    }

    #[test]
    fn short_run_logs_and_clips() {
        let mut c = small();
        c.train.mode = TrainMode::Ssl;
        let data = generate(2, 4, Difficulty::Easy, 70).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = EncoderProvider::from_config(&c);
        let st = train(&c, &data, &p, Some(dir.path())).unwrap();
        assert_eq!(st.steps.len(), 2);
        assert!(st.steps.iter().all(|s| s.clipped_norm <= 1.0 + 1e-6 && s.lr == 5e-5));
        let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.starts_with("epoch=1 step=0 lr=5e-5 loss="));
        assert!(dir.path().join("epoch-001/manifest.txt").exists());
        assert_eq!(st.encoder_checksum_before, st.encoder_checksum_after);
    }

    #[test]
    fn directions_swap_views() {
        let c = small();
        let head = UnionHead::new(&c, 0).unwrap();
        let p = EncoderProvider::from_config(&c);
        let s = &generate(3, 1, Difficulty::Easy, 70).unwrap()[0];
        let a = prepare_pair(&head, &c, &p, s, Direction::TargetToSource, &mut crate::rng::seeded(0)).unwrap();
        assert_eq!(a.m_s, s.m_t);
        assert_eq!(a.gt, s.m_s);
        let pr = a.prompts.unwrap();
        for q in &pr.source.points {
            assert_eq!(s.m_t.get(q.x as usize, q.y as usize), 1.0);
        }
    }
}
