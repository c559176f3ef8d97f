use crate::args::*;
use crate::error::{usage, CliResult};
use crate::manifest::RunManifest;
use crate::settings;
use anyhow::Context as _;
use crossseg_core::encoder::{EncoderProvider, Tracker};
use crossseg_core::eval::{bench_forward, evaluate, EvalReport, Predictor};
use crossseg_core::head::{HeadInput, UnionHead};
use crossseg_core::rng::stream;
use crossseg_core::synth::{export_dataset, generate_sample, load_split, read_manifest, Difficulty, Sample, Split};
use crossseg_core::train::{load_head, prepare_pair, train, Direction};
use crossseg_core::{iou, Ablation, Image, MaskGrid, PointSet, RunConfig};
use ndarray::Array3;
use std::fmt::Write as _;
use std::path::Path;

pub fn gen(a: &GenArgs) -> CliResult<()> {
    let difficulty: Difficulty = a.difficulty.parse().map_err(|e: crossseg_core::Error| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.train_ratio) {
        return Err(usage("--train-ratio must be in [0, 1]"));
    }
    if a.size == 0 || a.size % 14 != 0 || a.size % 2 != 0 {
        return Err(usage(format!("--size {} must be a positive multiple of 14", a.size)));
    }
    let mut run = RunManifest::start("gen", a.seed, None);
    let m = export_dataset(&a.out, a.n as usize, difficulty, a.size, a.seed, a.train_ratio)?;
    let train = m.split(Split::Train).count();
    println!("pairs={} train={} val={} difficulty={difficulty} size={} out={}", m.entries.len(), train, m.entries.len() - train, a.size, a.out.display());
    run.metric("pairs", m.entries.len() as f64);
    run.metric("train", train as f64);
    run.artifact("manifest", &a.out.join("manifest.txt"));
    run.finish(&a.out)?;
    Ok(())
}

fn load(data: &Path, split: Split) -> CliResult<Vec<Sample>> {
    let s = load_split(data, split).with_context(|| format!("loading {} split of {}", split.name(), data.display()))?;
    if s.is_empty() {
        return Err(usage(format!("{} split of {} is empty", split.name(), data.display())));
    }
    Ok(s)
}

fn train_one(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<(f64, Option<EvalReport>)> {
    let samples = load(data, Split::Train)?;
    let provider = EncoderProvider::from_config(cfg);
    let state = train(cfg, &samples, &provider, Some(out))?;
    let last = state.epoch_losses.last().copied().unwrap_or(f64::NAN);
    let val = load_split(data, Split::Val)?;
    let report = if val.is_empty() {
        None
    } else {
        Some(evaluate(&state.head, cfg, &provider, &val, Direction::SourceToTarget, Predictor::Model, cfg.model.refine_iters)?)
    };
    Ok((last, report))
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let cfg = settings::apply(settings::base(&a.model)?, &a.model, Some(manifest.size))?;
    let mut run = RunManifest::start("train", cfg.seed, Some(cfg.clone()));
    let (loss, report) = train_one(&cfg, &a.data, &a.out)?;
    let mut line = format!("epochs={} final_loss={loss:.6}", cfg.optim.epochs);
    run.metric("final_loss", loss);
    if let Some(r) = &report {
        write!(line, " val_mean_iou={:.6} ci_low={:.6} ci_high={:.6}", r.mean_iou, r.ci.0, r.ci.1).unwrap();
        run.metric("val_mean_iou", r.mean_iou);
        std::fs::write(a.out.join("eval_val_s2t.txt"), r.to_text()).context("writing report")?;
    }
    println!("{line} checkpoint={}", a.out.join("final").display());
    run.artifact("checkpoint", &a.out.join("final"));
    run.artifact("metrics", &a.out.join("metrics.log"));
    run.artifact("data", &a.data);
    run.finish(&a.out)?;
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let predictor = match a.predictor {
        PredictorArg::Model => Predictor::Model,
        PredictorArg::Oracle => Predictor::Oracle,
        PredictorArg::Empty => Predictor::Empty,
    };
    let (head, cfg) = match &a.checkpoint {
        Some(dir) => load_head(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?,
        None if predictor == Predictor::Model => return Err(usage("--checkpoint is required for the model predictor")),
        None => {
            let mut cfg = RunConfig::toy();
            cfg.model.image_size = read_manifest(&a.data)?.size;
            (UnionHead::new(&cfg, cfg.seed)?, cfg)
        }
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let samples = load(&a.data, split)?;
    let iters = a.refine_iters.map_or(cfg.model.refine_iters, |k| k as usize);
    let directions = match a.direction {
        DirectionArg::S2t => vec![Direction::SourceToTarget],
        DirectionArg::T2s => vec![Direction::TargetToSource],
        DirectionArg::Both => vec![Direction::SourceToTarget, Direction::TargetToSource],
    };
    let provider = EncoderProvider::from_config(&cfg);
    let mut run = RunManifest::start("eval", cfg.seed, Some(cfg.clone()));
    for d in directions {
        let r = evaluate(&head, &cfg, &provider, &samples, d, predictor, iters)?;
        println!(
            "split={} direction={} predictor={:?} n={} mean_iou={:.6} ci_low={:.6} ci_high={:.6}",
            split.name(),
            d.name(),
            format!("{:?}", a.predictor).to_lowercase(),
            samples.len(),
            r.mean_iou,
            r.ci.0,
            r.ci.1
        );
        run.metric(&format!("{}_mean_iou", d.name()), r.mean_iou);
        if let Some(out) = &a.out {
            std::fs::create_dir_all(out).context("creating output directory")?;
            let p = out.join(format!("eval_{}_{}.txt", split.name(), d.name()));
            std::fs::write(&p, r.to_text()).context("writing report")?;
            run.artifact(d.name(), &p);
        }
    }
    if let Some(out) = &a.out {
        run.finish(out)?;
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    if a.model.ablate.is_some() {
        return Err(usage("sweep trains every ablation; drop --ablate"));
    }
    let manifest = read_manifest(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let base = settings::apply(settings::base(&a.model)?, &a.model, Some(manifest.size))?;
    let mut run = RunManifest::start("sweep", base.seed, Some(base.clone()));
    let mut table = String::new();
    for abl in Ablation::ALL {
        let mut scores = Vec::new();
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            abl.apply(&mut cfg.model);
            cfg.seed = seed;
            let dir = a.out.join(abl.name()).join(format!("seed{seed}"));
            let (_, report) = train_one(&cfg, &a.data, &dir)?;
            let v = report.map_or(f64::NAN, |r| r.mean_iou);
            writeln!(table, "ablation={} seed={seed} mean_iou={v:.6}", abl.name()).unwrap();
            scores.push(v);
        }
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let line = format!("ablation={} seeds={} mean_iou={mean:.6}", abl.name(), scores.len());
        println!("{line}");
        writeln!(table, "{line}").unwrap();
        run.metric(&format!("{}_mean_iou", abl.name()), mean);
    }
    std::fs::create_dir_all(&a.out).context("creating output directory")?;
    std::fs::write(a.out.join("sweep.txt"), table).context("writing sweep table")?;
    run.artifact("table", &a.out.join("sweep.txt"));
    run.finish(&a.out)?;
    Ok(())
}

fn overlay(image: &Image, mask: &MaskGrid, tint: [f64; 3], points: &PointSet, dot: [f64; 3]) -> crossseg_core::Result<Image> {
    let (h, w) = (image.height(), image.width());
    let mut px = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let v = image.get(x, y)[c];
        if mask.get(x, y) >= 0.5 {
            0.5 * v + 0.5 * tint[c]
        } else {
            v
        }
    });
    for p in &points.points {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (cx + dx, cy + dy);
            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                for c in 0..3 {
                    px[[y as usize, x as usize, c]] = dot[c];
                }
            }
        }
    }
    Image::new(px)
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let (head, cfg) = load_head(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let source = Image::read(&a.source)?;
    let target = Image::read(&a.target)?;
    let m_s = MaskGrid::read(&a.source_mask)?;
    if m_s.is_empty() {
        return Err(crossseg_core::Error::EmptyMask.into());
    }
    let size = cfg.model.image_size;
    for (name, dims) in [("source", (source.height(), source.width())), ("target", (target.height(), target.width())), ("mask", m_s.dims())] {
        if dims != (size, size) {
            return Err(crossseg_core::Error::Shape(format!("{name} is {dims:?}, checkpoint expects {size}x{size}")).into());
        }
    }
    let provider = EncoderProvider::from_config(&cfg);
    let id = a.id.clone().unwrap_or_else(|| "infer".into());
    let (f_s, f_t) = provider.encode(&id, &source, &target, false)?;
    let tracks = match &provider {
        EncoderProvider::External(x) => x.load(&id)?.tracks,
        EncoderProvider::Toy(_) => None,
    };
    let prompts = if cfg.model.use_points {
        let tracker = match &tracks {
            Some(t) => Tracker::Given(t),
            None => Tracker::FeatureCorrelation { source: &f_s, target: &f_t },
        };
        Some(head.prepare_prompts(&m_s, &source, &target, &tracker, &mut stream(a.seed, "infer", 0))?)
    } else {
        None
    };
    let iters = a.refine_iters.map_or(cfg.model.refine_iters, |k| k as usize);
    let input = HeadInput { f_s: &f_s, f_t: &f_t, m_s: &m_s, prompts: prompts.as_ref() };
    let mask = head.predict(&input, iters)?.mask.binarize(0.5);
    std::fs::create_dir_all(&a.out).context("creating output directory")?;
    let paths = [a.out.join("mask.png"), a.out.join("overlay_source.png"), a.out.join("overlay_target.png")];
    mask.write(&paths[0])?;
    let empty = PointSet::new(crossseg_core::Frame::Source, Vec::new());
    let (ps, pt) = prompts.as_ref().map_or((&empty, &empty), |p| (&p.source, &p.target));
    overlay(&source, &m_s, [0.1, 0.9, 0.2], ps, [1.0, 0.0, 1.0])?.write(&paths[1])?;
    overlay(&target, &mask, [0.9, 0.2, 0.1], pt, [1.0, 1.0, 0.0])?.write(&paths[2])?;
    println!(
        "mask={} overlay_source={} overlay_target={} foreground={} iou_vs_source={:.6}",
        paths[0].display(),
        paths[1].display(),
        paths[2].display(),
        mask.count(),
        iou(&mask, &m_s)?
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    if a.passes == 0 {
        return Err(usage("--passes must be at least 1"));
    }
    let (head, cfg) = match &a.checkpoint {
        Some(dir) => {
            let (bundle, ckpt_cfg) = crossseg_core::checkpoint::load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let cfg = settings::apply(ckpt_cfg, &a.model, None)?;
            let mut head = UnionHead::new(&cfg, cfg.seed)?;
            bundle.load_into(&mut head.store, dir).map_err(|e| usage(format!("flags are incompatible with the checkpoint: {e}")))?;
            (head, cfg)
        }
        None => {
            let cfg = settings::apply(settings::base(&a.model)?, &a.model, None)?;
            (UnionHead::new(&cfg, cfg.seed)?, cfg)
        }
    };
    let provider = EncoderProvider::from_config(&cfg);
    let sample = generate_sample(cfg.seed, 0, Difficulty::Medium, cfg.model.image_size)?;
    let prepared = prepare_pair(&head, &cfg, &provider, &sample, Direction::SourceToTarget, &mut stream(cfg.seed, "bench", 0))?;
    let t = bench_forward(&head, &prepared, cfg.model.refine_iters, a.warmup, a.passes)?;
    let summary = format!(
        "image_size={} refine_iters={} warmup={} passes={} mean_ms={:.3} std_ms={:.3}",
        cfg.model.image_size,
        cfg.model.refine_iters,
        t.warmup,
        t.samples_ms.len(),
        t.mean(),
        t.stddev()
    );
    println!("{summary}");
    if let Some(out) = &a.out {
        let mut text = format!("{summary}\n");
        for (i, ms) in t.samples_ms.iter().enumerate() {
            writeln!(text, "pass={i} ms={ms:.4}").unwrap();
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).context("creating output directory")?;
        }
        std::fs::write(out, text).context("writing bench report")?;
    }
    Ok(())
}
