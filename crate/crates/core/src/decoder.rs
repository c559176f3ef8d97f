//! Prompt queries, two-way decoder blocks and the mask predictor.

use crate::data::{Point, PointSet};
use crate::error::{Error, Result};
use crate::fusion::{BottleneckFusion, FusionGeometry};
use crate::graph::{Graph, Var};
use crate::nn::{fourier_features, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Point coordinates normalised to `[0, 1]²` by pixel centre.
pub fn normalized_coords(points: &[Point], width: usize, height: usize) -> Vec<(f64, f64)> {
    points.iter().map(|p| ((p.x + 0.5) / width as f64, (p.y + 0.5) / height as f64)).collect()
}

/// Normalised pixel-space centres of every feature cell, row-major.
pub fn feature_grid_coords(fh: usize, fw: usize) -> Vec<(f64, f64)> {
    let (w, h) = (2.0 * fw as f64, 2.0 * fh as f64);
    (0..fh).flat_map(|y| (0..fw).map(move |x| ((2 * x + 1) as f64 / w, (2 * y + 1) as f64 / h))).collect()
}

/// ψ: fixed Gaussian Fourier features, a learned projection to `C`, and one
/// learned role embedding per frame. Also owns the output mask token `O`.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub basis: ParamId,
    pub proj: Linear,
    pub role_source: ParamId,
    pub role_target: ParamId,
    pub output_token: ParamId,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, channels: usize, fourier_scale: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, fourier_scale).expect("finite scale");
        let basis = Array2::from_shape_simple_fn((2, channels / 2), || normal.sample(rng));
        Self {
            basis: store.add_buffer("prompt.fourier_basis", basis),
            proj: Linear::new(store, "prompt.proj", channels, channels, rng),
            role_source: store.add("prompt.role_source", (1, channels), Init::Normal(0.5), rng),
            role_target: store.add("prompt.role_target", (1, channels), Init::Normal(0.5), rng),
            output_token: store.add("prompt.output_token", (1, channels), Init::Normal(1.0), rng),
        }
    }

    pub fn fourier(&self, s: &ParamStore, coords: &[(f64, f64)]) -> Array2<f64> {
        fourier_features(coords, s.get(self.basis))
    }

    /// `ψ(coords) + role`.
    pub fn embed(&self, g: &mut Graph, s: &ParamStore, fourier: Array2<f64>, role: ParamId) -> Var {
        let f = g.constant(fourier);
        let e = self.proj.forward(g, s, f);
        let r = g.param(s, role);
        g.add_row(e, r)
    }

    /// Image-token positional encodings for both frames, `[2N, C]`.
    pub fn image_pe(&self, g: &mut Graph, s: &ParamStore, grid_fourier: &Array2<f64>) -> Var {
        let f = g.constant(grid_fourier.clone());
        let e = self.proj.forward(g, s, f);
        let rs = g.param(s, self.role_source);
        let rt = g.param(s, self.role_target);
        let a = g.add_row(e, rs);
        let b = g.add_row(e, rt);
        g.concat_rows(&[a, b])
    }

    /// `Q_0 = [E_p, E_s, E_t, O]`, or just `[O]` without point guidance.
    pub fn queries(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        points: Option<(Var, &PointSet, &PointSet)>,
        image: (usize, usize),
    ) -> Result<Var> {
        let o = g.param(s, self.output_token);
        let Some((ep, ps, pt)) = points else { return Ok(o) };
        if ps.len() != pt.len() || g.shape(ep).0 != ps.len() {
            return Err(Error::Shape(format!(
                "prompt cardinality mismatch: {} sampled features, {} source points, {} target points",
                g.shape(ep).0,
                ps.len(),
                pt.len()
            )));
        }
        let (h, w) = image;
        let es = self.embed(g, s, self.fourier(s, &normalized_coords(&ps.points, w, h)), self.role_source);
        let et = self.embed(g, s, self.fourier(s, &normalized_coords(&pt.points, w, h)), self.role_target);
        Ok(g.concat_rows(&[ep, es, et, o]))
    }
}

/// Prompt self-attention, prompt-to-image cross-attention, query MLP, and
/// image-to-prompt cross-attention, each pre-norm with a residual. The block
/// optionally owns a Bottleneck Fusion applied to its image input first.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub fusion: Option<BottleneckFusion>,
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_p2i: LayerNorm,
    pub ln_img_keys: LayerNorm,
    pub p2i: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub ln_img_q: LayerNorm,
    pub ln_i2p: LayerNorm,
    pub i2p: Attention,
}

pub struct BlockOutput {
    pub queries: Var,
    pub source: Var,
    pub target: Var,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        fusion: Option<(usize, bool)>,
        rng: &mut impl Rng,
    ) -> Self {
        let fusion = fusion.map(|(grid, residual)| {
            BottleneckFusion::new(store, &format!("{name}.fusion"), channels, heads, mlp_ratio, grid, residual, rng)
        });
        let ln = |store: &mut ParamStore, n: &str, rng: &mut _| LayerNorm::new(store, &format!("{name}.{n}"), channels, rng);
        let at = |store: &mut ParamStore, n: &str, rng: &mut _| Attention::new(store, &format!("{name}.{n}"), channels, heads, rng);
        Self {
            fusion,
            ln_self: ln(store, "ln_self", rng),
            self_attn: at(store, "self_attn", rng),
            ln_p2i: ln(store, "ln_p2i", rng),
            ln_img_keys: ln(store, "ln_img_keys", rng),
            p2i: at(store, "p2i", rng),
            ln_mlp: ln(store, "ln_mlp", rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), channels, channels * mlp_ratio, channels, rng),
            ln_img_q: ln(store, "ln_img_q", rng),
            ln_i2p: ln(store, "ln_i2p", rng),
            i2p: at(store, "i2p", rng),
        }
    }

    /// `qpe` and `kpe` are positional encodings added to attention queries
    /// and keys only.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        geo: &FusionGeometry,
        q: Var,
        qpe: Var,
        source: Var,
        target: Var,
        kpe: Var,
    ) -> BlockOutput {
        let (fs, ft) = match &self.fusion {
            Some(bf) => bf.forward(g, s, geo, source, target),
            None => (source, target),
        };
        let n = g.shape(fs).0;
        let img = g.concat_rows(&[fs, ft]);

        let a = self.ln_self.forward(g, s, q);
        let aq = g.add(a, qpe);
        let sa = self.self_attn.forward(g, s, aq, aq, a);
        let q = g.add(q, sa);

        let a = self.ln_p2i.forward(g, s, q);
        let aq = g.add(a, qpe);
        let keys = self.ln_img_keys.forward(g, s, img);
        let kk = g.add(keys, kpe);
        let ca = self.p2i.forward(g, s, aq, kk, keys);
        let q = g.add(q, ca);

        let a = self.ln_mlp.forward(g, s, q);
        let m = self.mlp.forward(g, s, a);
        let q = g.add(q, m);

        let iq = self.ln_img_q.forward(g, s, img);
        let iqk = g.add(iq, kpe);
        let a = self.ln_i2p.forward(g, s, q);
        let ak = g.add(a, qpe);
        let ca = self.i2p.forward(g, s, iqk, ak, a);
        let h = g.add(img, ca);

        BlockOutput { queries: q, source: g.slice_rows(h, 0, n), target: g.slice_rows(h, n, n) }
    }
}

/// Final output-token cross-attention over the target image tokens, an MLP
/// mapping the token to a per-pixel weight vector, and a dot product with
/// every target feature.
#[derive(Clone, Debug)]
pub struct MaskPredictor {
    pub ln_token: LayerNorm,
    pub ln_img: LayerNorm,
    pub attn: Attention,
    pub hyper: Mlp,
    /// Residual per-cell pre-norm MLP applied to `h_t` before the dot product.
    pub ln_pixel: LayerNorm,
    pub pixel: Mlp,
}

pub struct MaskLogits {
    /// `Õ`, the attended output token.
    pub token: Var,
    /// `W·Õ + b`.
    pub weights: Var,
    /// Per-feature-cell logits `[N, 1]`.
    pub logits: Var,
}

impl MaskPredictor {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let hyper = Mlp {
            l1: Linear::new(store, &format!("{name}.hyper.fc1"), channels, channels, rng),
            l2: Linear::with_init(store, &format!("{name}.hyper.fc2"), channels, channels, Init::Scaled(0.002), rng),
        };
        Self {
            ln_token: LayerNorm::new(store, &format!("{name}.ln_token"), channels, rng),
            ln_img: LayerNorm::new(store, &format!("{name}.ln_img"), channels, rng),
            attn: Attention::new(store, &format!("{name}.attn"), channels, heads, rng),
            hyper,
            ln_pixel: LayerNorm::new(store, &format!("{name}.ln_pixel"), channels, rng),
            pixel: Mlp::new(store, &format!("{name}.pixel"), channels, 2 * channels, channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, token: Var, token_pe: Var, target: Var, target_pe: Var) -> MaskLogits {
        let a = self.ln_token.forward(g, s, token);
        let aq = g.add(a, token_pe);
        let k = self.ln_img.forward(g, s, target);
        let kk = g.add(k, target_pe);
        let ca = self.attn.forward(g, s, aq, kk, k);
        let token = g.add(token, ca);
        let weights = self.hyper.forward(g, s, token);
        let f = self.ln_pixel.forward(g, s, target);
        let f = self.pixel.forward(g, s, f);
        let f = g.add(target, f);
        let logits = g.matmul_t(f, weights);
        MaskLogits { token, weights, logits }
    }
}
