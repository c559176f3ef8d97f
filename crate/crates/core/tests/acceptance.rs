//! Acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run to the listed criteria.

use crossseg_core::config::RefineWeights;
use crossseg_core::encoder::EncoderProvider;
use crossseg_core::eval::{evaluate, predict_sample, EvalReport, Predictor};
use crossseg_core::gradcheck::{analytic, check_gradients, numeric_gradient, GradCheckOptions};
use crossseg_core::graph::Graph;
use crossseg_core::head::UnionHead;
use crossseg_core::loss::{dice_loss, focal_loss, graph_loss, total_loss, LossWeights};
use crossseg_core::points::kmeans_points;
use crossseg_core::rng::stream;
use crossseg_core::synth::{export_dataset, generate, generate_sample, load_split, Difficulty, Sample, Split};
use crossseg_core::train::{prepare_pair, train, train_with, Direction, TrainLimits, TrainState};
use crossseg_core::{Ablation, MaskGrid, Point, RunConfig};
use ndarray::Array2;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn toy(channels: usize) -> RunConfig {
    let mut c = RunConfig::toy();
    c.model.channels = channels;
    c
}

fn prepared_pair(head: &UnionHead, cfg: &RunConfig, index: usize) -> crossseg_core::train::Prepared {
    let provider = EncoderProvider::from_config(cfg);
    let sample = generate_sample(11, index, Difficulty::Medium, cfg.model.image_size).unwrap();
    prepare_pair(head, cfg, &provider, &sample, Direction::SourceToTarget, &mut stream(11, "acceptance", index as u64)).unwrap()
}

// 1. Analytic gradients against central differences.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut cfg = toy(32);
    cfg.model.k_points = 5;
    cfg.model.decoder_blocks = 2;
    cfg.model.refine_iters = 2;
    let mut head = UnionHead::new(&cfg, 0).unwrap();
    let prep = prepared_pair(&head, &cfg, 0);
    let opts = GradCheckOptions::default();
    let report = check_gradients(&mut head, &prep, 2, &LossWeights::default(), &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.to_text());
    let rate = report.min_pass_rate();
    let full = report.modules.iter().all(|m| m.entries.len() == opts.per_module);
    outcome(
        rate >= 0.99 && secs <= 300.0 && full,
        format!("modules={} min_pass_rate={rate:.4} (need >= 0.99) runtime={secs:.0}s (need <= 300)", report.modules.len()),
    )
}

// 2. Point sampling against a brute-force reference.
fn reference_kmeans(omega: &[Point], k: usize, rng: &mut impl Rng) -> Vec<Point> {
    let mut pts = omega.to_vec();
    pts.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
    let kk = k.min(pts.len());
    let d2 = |a: &Point, b: &Point| (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    let first = ((rng.random::<f64>() * pts.len() as f64) as usize).min(pts.len() - 1);
    let mut centers = vec![pts[first]];
    while centers.len() < kk {
        let weights: Vec<f64> =
            pts.iter().map(|p| centers.iter().map(|c| d2(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut cumulative = 0.0;
        let mut chosen = None;
        for (i, w) in weights.iter().enumerate() {
            cumulative += w;
            if *w > 0.0 {
                chosen = Some(i);
                if cumulative > target {
                    break;
                }
            }
        }
        centers.push(pts[chosen.unwrap()]);
    }
    let mut members: Vec<Vec<Point>> = vec![Vec::new(); kk];
    for p in &pts {
        let dists: Vec<f64> = centers.iter().map(|c| d2(p, c)).collect();
        let best = (0..kk).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
        members[best].push(*p);
    }
    let mut out = Vec::new();
    for (j, m) in members.iter().enumerate() {
        let c = if m.is_empty() {
            centers[j]
        } else {
            Point::new(m.iter().map(|p| p.x).sum::<f64>() / m.len() as f64, m.iter().map(|p| p.y).sum::<f64>() / m.len() as f64)
        };
        let mut best = pts[0];
        for p in &pts {
            if d2(p, &c) < d2(&best, &c) {
                best = *p;
            }
        }
        out.push(best);
    }
    while out.len() < k {
        out.push(*out.last().unwrap());
    }
    out
}

fn kmeans_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut gen = stream(2, "kmeans-masks", 0);
    for trial in 0..100u64 {
        let size = 12;
        let target = gen.random_range(1..=50usize);
        let mut cells: Vec<(usize, usize)> = (0..size * size).map(|i| (i % size, i / size)).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, gen.random_range(0..=i));
        }
        cells.truncate(target);
        let mask = MaskGrid::from_fn(size, size, |x, y| cells.contains(&(x, y)));
        let omega = mask.foreground();
        let k = gen.random_range(1..=5usize);
        let (got, _) = kmeans_points(&omega, k, &mut stream(trial, "kmeans", 0));
        let want = reference_kmeans(&omega, k, &mut stream(trial, "kmeans", 0));
        if got != want {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("masks=100 mismatches={mismatches}"))
}

// 3. Focal and dice against scalar loops.
fn loss_oracle() -> Outcome {
    let w = LossWeights::default();
    let mut rng = stream(3, "loss-oracle", 0);
    let (mut worst, mut worst_total, mut worst_graph) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..64).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let mut focal = 0.0;
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            let q = p[i].clamp(1e-7, 1.0 - 1e-7);
            focal += if t[i] == 1.0 {
                -0.25 * (1.0 - q) * (1.0 - q) * q.ln()
            } else {
                -0.75 * q * q * (1.0 - q).ln()
            };
            inter += p[i] * t[i];
            sp += p[i];
            st += t[i];
        }
        focal /= 64.0;
        let dice = 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
        let pm = MaskGrid::probabilities(Array2::from_shape_vec((8, 8), p.clone()).unwrap()).unwrap();
        let tm = MaskGrid::binary(Array2::from_shape_vec((8, 8), t.clone()).unwrap()).unwrap();
        let f = focal_loss(&pm, &tm, 0.25, 2.0).unwrap();
        let d = dice_loss(&pm, &tm).unwrap();
        worst = worst.max((f - focal).abs()).max((d - dice).abs());
        let r = total_loss(&pm, &tm, &w).unwrap();
        worst_total = worst_total.max((r.total - (20.0 * r.focal + r.dice)).abs() / r.total.abs().max(1.0));
        let mut g = Graph::new();
        let pv = g.constant(Array2::from_shape_vec((64, 1), p).unwrap());
        let gt = Arc::new(Array2::from_shape_vec((64, 1), t).unwrap());
        let (tv, fv, dv) = graph_loss(&mut g, pv, &gt, &w);
        worst_graph = worst_graph
            .max((g.scalar(fv) - focal).abs())
            .max((g.scalar(dv) - dice).abs())
            .max((g.scalar(tv) - (20.0 * focal + dice)).abs() / 20.0);
    }
    outcome(
        worst <= 1e-6 && worst_graph <= 1e-6 && worst_total <= 4.0 * f64::EPSILON,
        format!("pairs=500 max_abs_err={worst:.2e} graph_max_abs_err={worst_graph:.2e} total_rel_err={worst_total:.2e}"),
    )
}

// 4-6. Learning on the synthetic benchmark.
const LEARN_SEEDS: [u64; 3] = [0, 1, 2];
const LEARN_PAIRS: usize = 2000;
const HELD_OUT: usize = 200;

fn learning_config(ablation: Ablation, seed: u64) -> RunConfig {
    let mut c = toy(32);
    c.seed = seed;
    c.optim.lr = 2e-3;
    c.optim.batch_size = 1;
    c.optim.epochs = 3;
    c.optim.decay_epochs = vec![2];
    ablation.apply(&mut c.model);
    c
}

struct LearnRun {
    cfg: RunConfig,
    state: TrainState,
    untrained: f64,
    trained: f64,
    secs: f64,
}

fn learn(ablation: Ablation, seed: u64, held_out: &[Sample]) -> LearnRun {
    let cfg = learning_config(ablation, seed);
    let data = generate(100 + seed, LEARN_PAIRS, Difficulty::Medium, 70).unwrap();
    let provider = EncoderProvider::from_config(&cfg);
    let start = Instant::now();
    let untrained = UnionHead::new(&cfg, cfg.seed).unwrap();
    let u = evaluate(&untrained, &cfg, &provider, held_out, Direction::SourceToTarget, Predictor::Model, cfg.model.refine_iters).unwrap();
    let state = train(&cfg, &data, &provider, None).unwrap();
    let t = evaluate(&state.head, &cfg, &provider, held_out, Direction::SourceToTarget, Predictor::Model, cfg.model.refine_iters).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "  ablation={} seed={seed} untrained={:.4} trained={:.4} epoch_losses={:?} time={secs:.0}s",
        ablation.name(),
        u.mean_iou,
        t.mean_iou,
        state.epoch_losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>()
    );
    LearnRun { cfg, state, untrained: u.mean_iou, trained: t.mean_iou, secs }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Benchmark {
    held_out: Vec<Sample>,
    runs: BTreeMap<&'static str, Vec<LearnRun>>,
}

impl Benchmark {
    fn new() -> Self {
        Self { held_out: generate(9_000, HELD_OUT, Difficulty::Medium, 70).unwrap(), runs: BTreeMap::new() }
    }

    fn ensure(&mut self, ablation: Ablation) -> &[LearnRun] {
        if !self.runs.contains_key(ablation.name()) {
            let runs = LEARN_SEEDS.iter().map(|&s| learn(ablation, s, &self.held_out)).collect();
            self.runs.insert(ablation.name(), runs);
        }
        &self.runs[ablation.name()]
    }
}

fn learning_sanity(b: &mut Benchmark) -> Outcome {
    let runs = b.ensure(Ablation::Mr);
    let untrained = mean(&runs.iter().map(|r| r.untrained).collect::<Vec<_>>());
    let trained = mean(&runs.iter().map(|r| r.trained).collect::<Vec<_>>());
    let minutes = runs.iter().map(|r| r.secs).sum::<f64>() / 60.0;
    outcome(
        trained >= 0.70 && untrained <= 0.30 && minutes <= 60.0,
        format!(
            "seeds=3 trained_mean_iou={trained:.4} (need >= 0.70) untrained_mean_iou={untrained:.4} (need <= 0.30) runtime={minutes:.1}min (need <= 60)"
        ),
    )
}

fn component_ablation(b: &mut Benchmark) -> Outcome {
    let mut scores = Vec::new();
    for a in Ablation::ALL {
        let runs = b.ensure(a);
        scores.push(mean(&runs.iter().map(|r| r.trained).collect::<Vec<_>>()));
    }
    let [plain, bf, pgp, mr] = [scores[0], scores[1], scores[2], scores[3]];
    outcome(
        plain < bf && bf < pgp && mr >= pgp,
        format!("plain={plain:.4} bf={bf:.4} pgp={pgp:.4} mr={mr:.4} (need plain < bf < pgp <= mr)"),
    )
}

fn refinement_direction(b: &mut Benchmark) -> Outcome {
    let held_out = b.held_out.clone();
    let runs = b.ensure(Ablation::Mr);
    let (mut zero, mut two) = (Vec::new(), Vec::new());
    for r in runs {
        let provider = EncoderProvider::from_config(&r.cfg);
        let at = |k: usize| -> EvalReport {
            evaluate(&r.state.head, &r.cfg, &provider, &held_out, Direction::SourceToTarget, Predictor::Model, k).unwrap()
        };
        zero.push(at(0).mean_iou);
        two.push(at(2).mean_iou);
    }
    let (z, t) = (mean(&zero), mean(&two));
    outcome(t >= z, format!("seeds=3 refine0={z:.4} refine2={t:.4} (need refine2 >= refine0)"))
}

// 7. Parameters used only by a non-final refinement pass get no gradient.
fn gradient_isolation() -> Outcome {
    let mut cfg = toy(16);
    cfg.model.refine_iters = 2;
    cfg.model.refine_weights = RefineWeights::PerIteration;
    let mut head = UnionHead::new(&cfg, 0).unwrap();
    let prep = prepared_pair(&head, &cfg, 1);
    let w = LossWeights::default();
    let (_, grads, log) = analytic(&head, &prep, 2, &w).unwrap();
    let ids: Vec<_> = head.store.ids().filter(|&id| head.store.is_trainable(id)).collect();
    let (early, last): (Vec<_>, Vec<_>) = ids
        .into_iter()
        .filter(|&id| head.store.name(id).starts_with("refine"))
        .partition(|&id| head.store.name(id).starts_with("refine0."));
    let analytic_max = early
        .iter()
        .filter_map(|&id| grads.get(id))
        .flat_map(|g| g.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let mut rng = stream(7, "isolation", 0);
    let mut fd_max = 0.0f64;
    let mut probed = 0;
    for &id in &early {
        let n = head.store.get(id).len();
        for _ in 0..2 {
            let index = rng.random_range(0..n);
            let fd = numeric_gradient(&mut head, &prep, 2, &w, &log, id, index, 1e-3).unwrap();
            fd_max = fd_max.max(fd.abs());
            probed += 1;
        }
    }
    let final_nonzero = last.iter().filter_map(|&id| grads.get(id)).any(|g| g.iter().any(|v| *v != 0.0));
    outcome(
        fd_max <= 1e-8 && analytic_max == 0.0 && final_nonzero && !early.is_empty(),
        format!(
            "non_final_tensors={} probed={probed} max_fd={fd_max:.2e} (need <= 1e-8) max_analytic={analytic_max:.2e} final_pass_has_gradient={final_nonzero}",
            early.len()
        ),
    )
}

// 8. Learning-rate schedule and gradient clipping.
fn schedule_and_clipping() -> Outcome {
    let cfg = {
        let mut c = toy(16);
        c.model.refine_iters = 0;
        c
    };
    let provider = EncoderProvider::from_config(&cfg);
    let tiny = generate(8, 8, Difficulty::Medium, 70).unwrap();
    let state = train(&cfg, &tiny, &provider, None).unwrap();
    let expected = |e: usize| if e <= 8 { 5e-5 } else if e <= 11 { 5e-6 } else { 5e-7 };
    let lr_ok = state.steps.len() == 12
        && state.steps.iter().all(|s| ((s.lr - expected(s.epoch)) / expected(s.epoch)).abs() <= 1e-12);
    let lrs: Vec<String> = [1, 8, 9, 11, 12].iter().map(|&e| format!("e{e}={:e}", state.steps[e - 1].lr)).collect();

    let mut c100 = toy(16);
    c100.optim.batch_size = 2;
    let data = generate(9, 50, Difficulty::Medium, 70).unwrap();
    let run = train_with(&c100, &data, &provider, None, TrainLimits { max_steps: Some(100) }).unwrap();
    let worst = run.steps.iter().map(|s| s.clipped_norm).fold(0.0, f64::max);
    let clipped = run.steps.iter().filter(|s| s.grad_norm > 1.0).count();
    outcome(
        lr_ok && run.steps.len() == 100 && worst <= 1.0 + 1e-6,
        format!("lr {} steps={} max_post_clip_norm={worst:.8} (need <= 1.000001) steps_clipped={clipped}", lrs.join(" "), run.steps.len()),
    )
}

// 9. Shapes and structure at several sizes.
fn shape_invariants() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for size in [70, 420, 518] {
        let mut cfg = toy(16);
        cfg.model.image_size = size;
        cfg.model.refine_iters = 1;
        let head = UnionHead::new(&cfg, 0).unwrap();
        let prep = prepared_pair(&head, &cfg, 2);
        let pred = head.predict(&prep.input(), 1).unwrap();
        let full = pred.mask.dims() == (size, size) && pred.initial.dims() == (size, size);
        let bottleneck = head.geometry().bottleneck();
        let expect = (size / 2 / 7, size / 2 / 7);
        ok &= full && bottleneck == expect;
        notes.push(format!("{size}:mask={}x{} bottleneck={}x{}", pred.mask.height(), pred.mask.width(), bottleneck.0, bottleneck.1));
    }
    let mut cfg = toy(16);
    cfg.model.image_size = 518;
    ok &= UnionHead::new(&cfg, 0).unwrap().geometry().bottleneck() == (37, 37);
    for k in [1, 5, 9] {
        let mut cfg = toy(16);
        cfg.model.k_points = k;
        cfg.model.refine_iters = 0;
        let head = UnionHead::new(&cfg, 0).unwrap();
        let prep = prepared_pair(&head, &cfg, 3);
        let len = head.predict(&prep.input(), 0).unwrap().queries.nrows();
        ok &= len == 3 * k + 1 && cfg.query_len() == len;
        notes.push(format!("K={k}:queries={len}"));
    }
    outcome(ok, notes.join(" "))
}

// 10-11. Reproducibility and the frozen encoder.
fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Pipeline {
    data: BTreeMap<String, Vec<u8>>,
    checkpoints: BTreeMap<String, Vec<u8>>,
    masks: Vec<MaskGrid>,
    report: String,
    checksums: (String, String),
}

fn pipeline(root: &Path) -> Pipeline {
    let data_dir = root.join("data");
    let run_dir = root.join("run");
    export_dataset(&data_dir, 12, Difficulty::Medium, 70, 21, 0.75).unwrap();
    let train_set = load_split(&data_dir, Split::Train).unwrap();
    let val = load_split(&data_dir, Split::Val).unwrap();
    let mut cfg = toy(16);
    cfg.seed = 21;
    cfg.optim.epochs = 2;
    cfg.optim.batch_size = 3;
    cfg.optim.lr = 1e-3;
    let provider = EncoderProvider::from_config(&cfg);
    let state = train(&cfg, &train_set, &provider, Some(&run_dir)).unwrap();
    let report = evaluate(&state.head, &cfg, &provider, &val, Direction::SourceToTarget, Predictor::Model, 2).unwrap();
    let masks = val
        .iter()
        .enumerate()
        .map(|(i, s)| predict_sample(&state.head, &cfg, &provider, s, i, Direction::SourceToTarget, 2).unwrap().0)
        .collect();
    Pipeline {
        data: files(&data_dir),
        checkpoints: files(&run_dir),
        masks,
        report: report.to_text(),
        checksums: (state.encoder_checksum_before, state.encoder_checksum_after),
    }
}

fn determinism() -> (Outcome, Pipeline) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline(a.path()), pipeline(b.path()));
    let same_data = x.data == y.data;
    let same_ckpt = x.checkpoints == y.checkpoints;
    let same_masks = x.masks == y.masks;
    let same_report = x.report == y.report;
    (
        outcome(
            same_data && same_ckpt && same_masks && same_report,
            format!(
                "dataset_files={} identical={same_data} run_files={} identical={same_ckpt} masks={} identical={same_masks} report_identical={same_report}",
                x.data.len(),
                x.checkpoints.len(),
                x.masks.len()
            ),
        ),
        x,
    )
}

fn frozen_encoder(p: &Pipeline, b: &Benchmark) -> Outcome {
    let mut pairs = vec![p.checksums.clone()];
    for runs in b.runs.values() {
        pairs.extend(runs.iter().map(|r| (r.state.encoder_checksum_before.clone(), r.state.encoder_checksum_after.clone())));
    }
    let unchanged = pairs.iter().all(|(a, b)| a == b);
    outcome(unchanged, format!("training_runs={} checksum={}", pairs.len(), &p.checksums.0[..16.min(p.checksums.0.len())]))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "gradient correctness",
        "k-means oracle",
        "loss oracle",
        "learning sanity",
        "component ablation direction",
        "refinement iteration direction",
        "gradient isolation",
        "schedule and clipping",
        "shape invariants",
        "determinism",
        "frozen encoder",
    ];
    let mut bench = Benchmark::new();
    let mut pipeline_run = None;
    let mut results = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let o = match n {
            1 => gradient_correctness(),
            2 => kmeans_oracle(),
            3 => loss_oracle(),
            4 => learning_sanity(&mut bench),
            5 => component_ablation(&mut bench),
            6 => refinement_direction(&mut bench),
            7 => gradient_isolation(),
            8 => schedule_and_clipping(),
            9 => shape_invariants(),
            10 => {
                let (o, p) = determinism();
                pipeline_run = Some(p);
                o
            }
            _ => {
                let p = pipeline_run.take().unwrap_or_else(|| pipeline(tempfile::tempdir().unwrap().path()));
                frozen_encoder(&p, &bench)
            }
        };
        let line = format!(
            "[{}] criterion {n:>2} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push((o.pass, line));
    }
    println!("\nacceptance summary");
    for (_, line) in &results {
        println!("{line}");
    }
    let failed = results.iter().filter(|r| !r.0).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
