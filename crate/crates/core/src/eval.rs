//! Held-out evaluation: mean IoU with a bootstrap confidence interval, and
//! forward-pass timing.

use crate::config::RunConfig;
use crate::data::{iou, MaskGrid, MASK_THRESHOLD};
use crate::encoder::EncoderProvider;
use crate::error::{Error, Result};
use crate::head::UnionHead;
use crate::par;
use crate::rng::stream;
use crate::synth::Sample;
use crate::train::{prepare_pair, Direction};
use rand::Rng;
use std::str::FromStr;
use std::time::Instant;

/// What produces the predicted mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Model,
    /// Returns the ground truth (upper-bound fixture).
    Oracle,
    /// Returns an empty mask (lower-bound fixture).
    Empty,
}

impl FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Predictor::Model),
            "oracle" => Ok(Predictor::Oracle),
            "empty" => Ok(Predictor::Empty),
            _ => Err(Error::Config(format!("unknown predictor {s:?} (model|oracle|empty)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    pub refine_iters: usize,
    pub mean_iou: f64,
    /// 95% percentile bootstrap interval of the mean.
    pub ci: (f64, f64),
    pub per_sample: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "direction={} refine_iters={} n={} mean_iou={:.6} ci_low={:.6} ci_high={:.6}\n",
            self.direction.name(),
            self.refine_iters,
            self.per_sample.len(),
            self.mean_iou,
            self.ci.0,
            self.ci.1
        );
        for (id, v) in &self.per_sample {
            s.push_str(&format!("id={id} iou={v:.6}\n"));
        }
        s
    }
}

pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = stream(seed, "bootstrap", 0);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Binarised prediction for sample `index`, with prompts drawn from a stream
/// keyed on the run seed and the index.
pub fn predict_sample(
    head: &UnionHead,
    cfg: &RunConfig,
    provider: &EncoderProvider,
    sample: &Sample,
    index: usize,
    direction: Direction,
    refine_iters: usize,
) -> Result<(MaskGrid, crate::train::Prepared)> {
    let mut rng = stream(cfg.seed, "eval-prompts", index as u64);
    let prepared = prepare_pair(head, cfg, provider, sample, direction, &mut rng)?;
    let pred = head.predict(&prepared.input(), refine_iters)?;
    Ok((pred.mask.binarize(MASK_THRESHOLD), prepared))
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    head: &UnionHead,
    cfg: &RunConfig,
    provider: &EncoderProvider,
    samples: &[Sample],
    direction: Direction,
    predictor: Predictor,
    refine_iters: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let scores = par::map(samples, |i, s| -> Result<f64> {
        let gt = match direction {
            Direction::SourceToTarget => &s.m_t,
            Direction::TargetToSource => &s.m_s,
        };
        let pred = match predictor {
            Predictor::Model => predict_sample(head, cfg, provider, s, i, direction, refine_iters)?.0,
            Predictor::Oracle => gt.clone(),
            Predictor::Empty => MaskGrid::empty(gt.height(), gt.width()),
        };
        iou(&pred, gt)
    });
    let per_sample: Vec<(String, f64)> =
        samples.iter().zip(scores).map(|(s, v)| v.map(|v| (s.id.clone(), v))).collect::<Result<_>>()?;
    let vals: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
    let mean_iou = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok(EvalReport { direction, refine_iters, mean_iou, ci: bootstrap_ci(&vals, 1000, cfg.seed), per_sample })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn mean(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len().max(1) as f64
    }

    pub fn stddev(&self) -> f64 {
        let m = self.mean();
        let n = self.samples_ms.len().max(2) as f64;
        (self.samples_ms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

/// Time `passes` head forward passes on one prepared pair after `warmup`
/// untimed ones.
pub fn bench_forward(head: &UnionHead, prepared: &crate::train::Prepared, refine_iters: usize, warmup: usize, passes: usize) -> Result<Timing> {
    for _ in 0..warmup {
        head.predict(&prepared.input(), refine_iters)?;
    }
    let mut samples_ms = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t = Instant::now();
        head.predict(&prepared.input(), refine_iters)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing { warmup, samples_ms })
}
