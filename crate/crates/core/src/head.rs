//! The union segmentation head: mask prompt fusion, point-guided prediction
//! and iterative mask refinement behind one parameter store.

use crate::config::{ModelConfig, RefineWeights, RunConfig};
use crate::data::{Image, MaskGrid, PointSet};
use crate::decoder::{feature_grid_coords, DecoderBlock, MaskPredictor, PromptEncoder};
use crate::encoder::{track_points, FeatureMap, Tracker};
use crate::error::{Error, Result};
use crate::fusion::{FusionGeometry, MaskEmbedder};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::points::{point_sampler, sample_points};
use crate::sparse::{self, SparseMap};
use ndarray::Array2;
use rand::Rng;
use std::sync::Arc;

/// One complete decoding pathway: mask embedding, decoder blocks and the
/// mask predictor.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub mask_embed: MaskEmbedder,
    pub blocks: Vec<DecoderBlock>,
    pub predictor: MaskPredictor,
}

impl HeadWeights {
    fn new(store: &mut ParamStore, name: &str, m: &ModelConfig, grid: usize, rng: &mut impl Rng) -> Self {
        let fusion = m.use_fusion.then_some((grid, m.fusion_residual));
        Self {
            mask_embed: MaskEmbedder::new(store, &format!("{name}.mask_embed"), m.mask_hidden, m.channels, rng),
            blocks: (0..m.decoder_blocks)
                .map(|l| DecoderBlock::new(store, &format!("{name}.block{l}"), m.channels, m.heads, m.mlp_ratio, fusion, rng))
                .collect(),
            predictor: MaskPredictor::new(store, &format!("{name}.predict"), m.channels, m.heads, rng),
        }
    }
}

/// Source and target point prompts, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompts {
    pub source: PointSet,
    pub target: PointSet,
}

/// Everything one head invocation consumes.
#[derive(Clone, Copy, Debug)]
pub struct HeadInput<'a> {
    pub f_s: &'a FeatureMap,
    pub f_t: &'a FeatureMap,
    pub m_s: &'a MaskGrid,
    pub prompts: Option<&'a Prompts>,
}

/// Graph handles of one forward pass. Masks are `[H·W, 1]` probability
/// columns at image resolution.
pub struct HeadPass {
    pub initial: Var,
    pub refined: Vec<Var>,
    pub output: Var,
    /// Queries after the last block of the initial prediction.
    pub queries: Var,
    /// Number of refinement applications performed.
    pub psi_calls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub initial: MaskGrid,
    pub refined: Vec<MaskGrid>,
    pub mask: MaskGrid,
    pub queries: Array2<f64>,
    pub psi_calls: usize,
}

struct Context {
    fs: Var,
    ft: Var,
    ms: Var,
    kpe: Var,
    kpe_t: Var,
}

#[derive(Clone, Debug)]
pub struct UnionHead {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub prompt: PromptEncoder,
    pub main: HeadWeights,
    pub refine_sets: Vec<HeadWeights>,
    pub null_mask: Option<ParamId>,
    geo: FusionGeometry,
    grid_fourier: Array2<f64>,
    upsample: Arc<SparseMap>,
}

impl UnionHead {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = config.model.clone();
        let mut rng = crate::rng::stream(seed, "head-init", 0);
        let geo = FusionGeometry::new(m.image_size, m.image_size, m.fusion_ratio)?;
        let (bh, bw) = geo.bottleneck();
        let mut store = ParamStore::new();
        let prompt = PromptEncoder::new(&mut store, m.channels, m.fourier_scale, &mut rng);
        let main = HeadWeights::new(&mut store, "head", &m, bh * bw, &mut rng);
        let sets = match m.refine_weights {
            RefineWeights::Shared => 0,
            RefineWeights::Separate => 1,
            RefineWeights::PerIteration => m.refine_iters,
        };
        let refine_sets =
            (0..sets).map(|k| HeadWeights::new(&mut store, &format!("refine{k}"), &m, bh * bw, &mut rng)).collect();
        let null_mask = m.target_null_mask.then(|| store.add("head.null_mask", (1, m.channels), Init::Normal(0.1), &mut rng));
        let (fh, fw) = geo.feature;
        let grid_fourier = prompt.fourier(&store, &feature_grid_coords(fh, fw));
        let upsample = Arc::new(sparse::bilinear_resize(fh, fw, m.image_size, m.image_size));
        Ok(Self { config: m, store, prompt, main, refine_sets, null_mask, geo, grid_fourier, upsample })
    }

    pub fn geometry(&self) -> &FusionGeometry {
        &self.geo
    }

    /// Weights used by refinement iteration `k` (0-based).
    pub fn refine_weights(&self, k: usize) -> &HeadWeights {
        match self.config.refine_weights {
            RefineWeights::Shared => &self.main,
            RefineWeights::Separate => &self.refine_sets[0],
            RefineWeights::PerIteration => &self.refine_sets[k],
        }
    }

    /// Sample `K` source points from the mask and track them into the target.
    pub fn prepare_prompts(
        &self,
        m_s: &MaskGrid,
        source: &Image,
        target: &Image,
        tracker: &Tracker<'_>,
        rng: &mut impl Rng,
    ) -> Result<Prompts> {
        let sampled = sample_points(m_s, self.config.k_points, rng)?;
        let target_pts = track_points(&sampled.points, source, target, tracker)?;
        Ok(Prompts { source: sampled.points, target: target_pts })
    }

    fn check(&self, input: &HeadInput<'_>) -> Result<()> {
        let (fh, fw) = self.geo.feature;
        let c = self.config.channels;
        for (name, f) in [("source", input.f_s), ("target", input.f_t)] {
            if (f.height, f.width, f.channels()) != (fh, fw, c) {
                return Err(Error::Shape(format!(
                    "{name} features are {}x{}x{}, head expects {fh}x{fw}x{c}",
                    f.height,
                    f.width,
                    f.channels()
                )));
            }
        }
        if input.m_s.dims() != self.geo.image {
            return Err(Error::Shape(format!("source mask is {:?}, head expects {:?}", input.m_s.dims(), self.geo.image)));
        }
        match (self.config.use_points, input.prompts) {
            (true, None) => return Err(Error::EmptyPoints),
            (true, Some(p)) => {
                let k = self.config.k_points;
                if p.source.len() != k || p.target.len() != k {
                    return Err(Error::Shape(format!(
                        "expected {k} points per frame, got {} and {}",
                        p.source.len(),
                        p.target.len()
                    )));
                }
                let (h, w) = self.geo.image;
                if !p.source.in_bounds(w, h) || !p.target.in_bounds(w, h) {
                    return Err(Error::Shape("prompt point outside the image".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn context(&self, g: &mut Graph, input: &HeadInput<'_>) -> Context {
        let s = &self.store;
        let fs = g.constant(input.f_s.data.clone());
        let ft = g.constant(input.f_t.data.clone());
        let ms = g.constant(column(input.m_s.values()));
        let kpe = self.prompt.image_pe(g, s, &self.grid_fourier);
        let n = g.shape(fs).0;
        let kpe_t = g.slice_rows(kpe, n, n);
        Context { fs, ft, ms, kpe, kpe_t }
    }

    fn initial_queries(&self, g: &mut Graph, ctx: &Context, input: &HeadInput<'_>, injected: Var) -> Result<Var> {
        let points = match input.prompts.filter(|_| self.config.use_points) {
            Some(p) => {
                let map = Arc::new(point_sampler(&p.source, self.geo.feature.0, self.geo.feature.1));
                let from = if self.config.point_features_from_injected { injected } else { ctx.fs };
                Some((g.sparse(&map, from), &p.source, &p.target))
            }
            None => None,
        };
        self.prompt.queries(g, &self.store, points, self.geo.image)
    }

    /// Mask-inject, run every block from `queries`, and predict. `prev` is the
    /// previous target mask column for refinement passes.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        w: &HeadWeights,
        ctx: &Context,
        fs_injected: Var,
        prev: Option<Var>,
        queries: Var,
        qpe: Var,
    ) -> (Var, Var) {
        let s = &self.store;
        let mut ft = ctx.ft;
        if let Some(m) = prev {
            let e = w.mask_embed.forward(g, s, m, &self.geo.mask_window);
            ft = g.add(ft, e);
        } else if let Some(null) = self.null_mask {
            let p = g.param(s, null);
            ft = g.add_row(ft, p);
        }
        let (mut src, mut tgt, mut q) = (fs_injected, ft, queries);
        for blk in &w.blocks {
            let out = blk.forward(g, s, &self.geo, q, qpe, src, tgt, ctx.kpe);
            (q, src, tgt) = (out.queries, out.source, out.target);
        }
        let nq = g.shape(q).0;
        let o = g.slice_rows(q, nq - 1, 1);
        let ope = g.slice_rows(qpe, nq - 1, 1);
        let logits = w.predictor.forward(g, s, o, ope, tgt, ctx.kpe_t).logits;
        let prob = if self.config.upsample_logits {
            let z = g.sparse(&self.upsample, logits);
            g.sigmoid(z)
        } else {
            let p = g.sigmoid(logits);
            g.sparse(&self.upsample, p)
        };
        (q, prob)
    }

    fn inject(&self, g: &mut Graph, w: &HeadWeights, ctx: &Context) -> Var {
        let e = w.mask_embed.forward(g, &self.store, ctx.ms, &self.geo.mask_window);
        g.add(ctx.fs, e)
    }

    /// Initial prediction followed by `refine_iters` refinement passes. Each
    /// pass sees its predecessor's mask and the carried queries through a
    /// stop-gradient, so only the final pass propagates gradients.
    pub fn forward(&self, g: &mut Graph, input: &HeadInput<'_>, refine_iters: usize) -> Result<HeadPass> {
        self.check(input)?;
        if refine_iters > 0 && self.config.refine_weights == RefineWeights::PerIteration && refine_iters > self.refine_sets.len() {
            return Err(Error::Config(format!(
                "{refine_iters} refinement iterations requested but only {} weight sets exist",
                self.refine_sets.len()
            )));
        }
        let ctx = self.context(g, input);
        let fs_main = self.inject(g, &self.main, &ctx);
        let q0 = self.initial_queries(g, &ctx, input, fs_main)?;
        let (q_l, initial) = self.decode(g, &self.main, &ctx, fs_main, None, q0, q0);

        let carried = if refine_iters > 0 { Some(g.detach(q_l)) } else { None };
        let mut refined = Vec::with_capacity(refine_iters);
        let mut current = initial;
        for k in 0..refine_iters {
            let w = self.refine_weights(k);
            let prev = g.detach(current);
            let fs_k = self.inject(g, w, &ctx);
            let (_, m) = self.decode(g, w, &ctx, fs_k, Some(prev), carried.expect("set when refining"), q0);
            refined.push(m);
            current = m;
        }
        Ok(HeadPass { initial, psi_calls: refined.len(), refined, output: current, queries: q_l })
    }

    /// Inference: evaluate [`forward`](Self::forward) and read the masks out.
    pub fn predict(&self, input: &HeadInput<'_>, refine_iters: usize) -> Result<Prediction> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, input, refine_iters)?;
        let (h, w) = self.geo.image;
        let grid = |v: Var| to_grid(g.value(v), h, w);
        Ok(Prediction {
            initial: grid(pass.initial)?,
            refined: pass.refined.iter().map(|&v| grid(v)).collect::<Result<_>>()?,
            mask: grid(pass.output)?,
            queries: g.value(pass.queries).clone(),
            psi_calls: pass.psi_calls,
        })
    }

    /// One stateless refinement step from an explicit previous mask and
    /// carried queries, using iteration `k`'s weights.
    pub fn refine(&self, input: &HeadInput<'_>, previous: &MaskGrid, queries: &Array2<f64>, k: usize) -> Result<MaskGrid> {
        self.check(input)?;
        if previous.dims() != self.geo.image {
            return Err(Error::Shape(format!("previous mask is {:?}, head expects {:?}", previous.dims(), self.geo.image)));
        }
        let mut g = Graph::new();
        let ctx = self.context(&mut g, input);
        let fs_main = self.inject(&mut g, &self.main, &ctx);
        let q0 = self.initial_queries(&mut g, &ctx, input, fs_main)?;
        if queries.dim() != g.value(q0).dim() {
            return Err(Error::Shape(format!("carried queries {:?}, expected {:?}", queries.dim(), g.value(q0).dim())));
        }
        let w = self.refine_weights(k);
        let fs_k = self.inject(&mut g, w, &ctx);
        let prev = g.constant(column(previous.values()));
        let q = g.constant(queries.clone());
        let (_, m) = self.decode(&mut g, w, &ctx, fs_k, Some(prev), q, q0);
        to_grid(g.value(m), self.geo.image.0, self.geo.image.1)
    }
}

pub(crate) fn column(values: &Array2<f64>) -> Array2<f64> {
    let n = values.len();
    Array2::from_shape_vec((n, 1), values.iter().copied().collect()).expect("length matches")
}

pub(crate) fn to_grid(col: &Array2<f64>, h: usize, w: usize) -> Result<MaskGrid> {
    let v = Array2::from_shape_vec((h, w), col.iter().copied().collect()).map_err(|e| Error::Shape(e.to_string()))?;
    MaskGrid::probabilities(v)
}

/// Per-sample refinement decision: during training each sample is refined
/// with probability `p`, otherwise it keeps the initial prediction; at
/// inference every sample is refined.
pub fn refine_schedule(batch: usize, refine_iters: usize, p: f64, training: bool, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch)
        .map(|_| if !training || rng.random::<f64>() < p { refine_iters } else { 0 })
        .collect()
}
