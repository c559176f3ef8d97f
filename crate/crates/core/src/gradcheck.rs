//! Finite-difference verification of the head's analytic gradients.
//!
//! Numeric derivatives are central differences taken on a graph that replays
//! the stop-gradient values of the unperturbed pass, so both sides
//! differentiate the same function.

use crate::error::Result;
use crate::graph::{DetachLog, Graph};
use crate::head::{column, UnionHead};
use crate::loss::{graph_loss, LossWeights};
use crate::params::{Gradients, ParamId};
use crate::rng::stream;
use crate::train::Prepared;
use rand::seq::index::sample;
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Entries sampled per module (all entries when the module is smaller).
    pub per_module: usize,
    /// Step as a fraction of `max(|θ|, min_scale)`.
    pub rel_step: f64,
    pub min_scale: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { per_module: 200, rel_step: 1e-3, min_scale: 1e-2, tolerance: 1e-4, abs_floor: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub entries: Vec<EntryCheck>,
}

impl ModuleCheck {
    pub fn pass_rate(&self, tolerance: f64) -> f64 {
        let ok = self.entries.iter().filter(|e| e.rel_error < tolerance).count();
        ok as f64 / self.entries.len().max(1) as f64
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub modules: Vec<ModuleCheck>,
}

impl GradCheckReport {
    pub fn min_pass_rate(&self) -> f64 {
        self.modules.iter().map(|m| m.pass_rate(self.tolerance)).fold(1.0, f64::min)
    }

    pub fn to_text(&self) -> String {
        self.modules
            .iter()
            .map(|m| {
                format!(
                    "module={} checked={} pass_rate={:.4} worst={:.3e}\n",
                    m.module,
                    m.entries.len(),
                    m.pass_rate(self.tolerance),
                    m.worst()
                )
            })
            .collect()
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Module a parameter belongs to: its weight set and component, with the
/// fusion sub-block of a decoder block split out.
pub fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["prompt", ..] => "prompt".into(),
        [set, block, "fusion", ..] => format!("{set}.{block}.fusion"),
        [set, comp, ..] => format!("{set}.{comp}"),
        _ => name.into(),
    }
}

/// Total loss of one prepared sample, optionally replaying stop-gradient
/// values.
pub fn loss_value(head: &UnionHead, prepared: &Prepared, iters: usize, w: &LossWeights, replay: Option<&DetachLog>) -> Result<f64> {
    let mut g = replay.map(|l| Graph::replaying(l.clone())).unwrap_or_default();
    let pass = head.forward(&mut g, &prepared.input(), iters)?;
    let gt = Arc::new(column(prepared.gt.values()));
    let (total, _, _) = graph_loss(&mut g, pass.output, &gt, w);
    Ok(g.scalar(total))
}

/// Analytic gradients and the stop-gradient log of the unperturbed pass.
pub fn analytic(head: &UnionHead, prepared: &Prepared, iters: usize, w: &LossWeights) -> Result<(f64, Gradients, DetachLog)> {
    let mut g = Graph::new();
    let pass = head.forward(&mut g, &prepared.input(), iters)?;
    let gt = Arc::new(column(prepared.gt.values()));
    let (total, _, _) = graph_loss(&mut g, pass.output, &gt, w);
    Ok((g.scalar(total), g.backward(total, &head.store), g.detach_log()))
}

/// Central difference of the loss in entry `index` of tensor `id`.
#[allow(clippy::too_many_arguments)]
pub fn numeric_gradient(
    head: &mut UnionHead,
    prepared: &Prepared,
    iters: usize,
    w: &LossWeights,
    replay: &DetachLog,
    id: ParamId,
    index: usize,
    step: f64,
) -> Result<f64> {
    let original = head.store.get(id).as_slice().expect("contiguous")[index];
    let eval = |v: f64, head: &mut UnionHead| -> Result<f64> {
        head.store.get_mut(id).as_slice_mut().expect("contiguous")[index] = v;
        loss_value(head, prepared, iters, w, Some(replay))
    };
    let plus = eval(original + step, head);
    let minus = eval(original - step, head);
    head.store.get_mut(id).as_slice_mut().expect("contiguous")[index] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

pub fn check_gradients(
    head: &mut UnionHead,
    prepared: &Prepared,
    iters: usize,
    w: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads, log) = analytic(head, prepared, iters, w)?;
    check_against(head, prepared, iters, w, opts, &grads, &log)
}

/// Compare `grads` with central differences on sampled entries of every
/// module.
pub fn check_against(
    head: &mut UnionHead,
    prepared: &Prepared,
    iters: usize,
    w: &LossWeights,
    opts: &GradCheckOptions,
    grads: &Gradients,
    log: &DetachLog,
) -> Result<GradCheckReport> {
    let mut groups: BTreeMap<String, Vec<(ParamId, usize)>> = BTreeMap::new();
    for id in head.store.ids().filter(|&id| head.store.is_trainable(id)) {
        let entries = groups.entry(module_of(head.store.name(id))).or_default();
        entries.extend((0..head.store.get(id).len()).map(|i| (id, i)));
    }
    let mut modules = Vec::with_capacity(groups.len());
    for (k, (module, entries)) in groups.into_iter().enumerate() {
        let mut rng = stream(opts.seed, "gradcheck", k as u64);
        let picks: Vec<usize> = if entries.len() <= opts.per_module {
            (0..entries.len()).collect()
        } else {
            let mut p = sample(&mut rng, entries.len(), opts.per_module).into_vec();
            p.sort_unstable();
            p
        };
        let mut checks = Vec::with_capacity(picks.len());
        for p in picks {
            let (id, index) = entries[p];
            let theta = head.store.get(id).as_slice().expect("contiguous")[index];
            let step = opts.rel_step * theta.abs().max(opts.min_scale);
            let numeric = numeric_gradient(head, prepared, iters, w, log, id, index, step)?;
            let analytic = grads.get(id).map_or(0.0, |g| g.as_slice().expect("contiguous")[index]);
            checks.push(EntryCheck {
                name: head.store.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, opts.abs_floor),
            });
        }
        modules.push(ModuleCheck { module, entries: checks });
    }
    Ok(GradCheckReport { tolerance: opts.tolerance, modules })
}
