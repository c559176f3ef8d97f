//! Mask prompt fusion: encode the source mask at feature resolution, add it
//! to the source features, and couple both views through Bottleneck Fusion
//! (downsample, joint self-attention + FFN over both frames' tokens,
//! upsample).

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::sparse::{self, GatherMap, SparseMap};
use ndarray::Array2;
use rand::Rng;
use std::sync::Arc;

/// Stride-2, kernel-4 convolution from the 1-channel mask to `hidden`
/// channels, GELU, then a 1×1 projection to `C`.
#[derive(Clone, Debug)]
pub struct MaskEmbedder {
    pub conv: Linear,
    pub proj: Linear,
}

impl MaskEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Linear::new(store, &format!("{name}.conv4x4"), 16, hidden, rng),
            proj: Linear::new(store, &format!("{name}.proj"), hidden, channels, rng),
        }
    }

    /// `mask` is the `[H·W, 1]` mask column; `window` the matching stride-2
    /// im2col map.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, mask: Var, window: &Arc<GatherMap>) -> Var {
        let cols = g.gather(window, mask);
        let h = self.conv.forward(g, s, cols);
        let h = g.gelu(h);
        self.proj.forward(g, s, h)
    }
}

/// Shared resampling operators for one image size.
#[derive(Clone, Debug)]
pub struct FusionGeometry {
    pub image: (usize, usize),
    pub feature: (usize, usize),
    pub ratio: usize,
    pub mask_window: Arc<GatherMap>,
    pub down: Arc<SparseMap>,
    pub up: Arc<SparseMap>,
}

impl FusionGeometry {
    pub fn new(height: usize, width: usize, ratio: usize) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Shape(format!("image {height}x{width} must have even sides")));
        }
        let (fh, fw) = (height / 2, width / 2);
        if ratio == 0 || fh % ratio != 0 || fw % ratio != 0 {
            return Err(Error::Shape(format!("feature size {fh}x{fw} not divisible by fusion ratio {ratio}")));
        }
        Ok(Self {
            image: (height, width),
            feature: (fh, fw),
            ratio,
            mask_window: Arc::new(GatherMap::conv2d(height, width, 4, 2, 1)),
            down: Arc::new(sparse::avg_pool(fh, fw, ratio)),
            up: Arc::new(sparse::bilinear_resize(fh / ratio, fw / ratio, fh, fw)),
        })
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        (self.feature.0 / self.ratio, self.feature.1 / self.ratio)
    }
}

#[derive(Clone, Debug)]
pub struct BottleneckFusion {
    pub pos: ParamId,
    pub frame: [ParamId; 2],
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    /// When set, the fused low-resolution update is added back to the
    /// full-resolution input instead of replacing it.
    pub residual: bool,
}

impl BottleneckFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        grid_tokens: usize,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            pos: store.add(format!("{name}.pos"), (grid_tokens, channels), Init::Normal(0.1), rng),
            frame: [
                store.add(format!("{name}.frame_source"), (1, channels), Init::Normal(0.1), rng),
                store.add(format!("{name}.frame_target"), (1, channels), Init::Normal(0.1), rng),
            ],
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), channels, rng),
            attn: Attention::new(store, &format!("{name}.attn"), channels, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), channels, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), channels, channels * mlp_ratio, channels, rng),
            residual,
        }
    }

    /// Positional and frame embeddings enter only the attention queries and
    /// keys, so an identity attention with a zero FFN reduces the whole
    /// module to resampling.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, geo: &FusionGeometry, fs: Var, ft: Var) -> (Var, Var) {
        let ds = g.sparse(&geo.down, fs);
        let dt = g.sparse(&geo.down, ft);
        let n = g.shape(ds).0;
        let x = g.concat_rows(&[ds, dt]);

        let pos = g.param(s, self.pos);
        let fsrc = g.param(s, self.frame[0]);
        let ftgt = g.param(s, self.frame[1]);
        let ps = g.add_row(pos, fsrc);
        let pt = g.add_row(pos, ftgt);
        let pe = g.concat_rows(&[ps, pt]);

        let h = self.ln1.forward(g, s, x);
        let qk = g.add(h, pe);
        let a = self.attn.forward(g, s, qk, qk, h);
        let x1 = g.add(x, a);
        let h = self.ln2.forward(g, s, x1);
        let f = self.ffn.forward(g, s, h);
        let y = g.add(x1, f);

        let (ys, yt) = (g.slice_rows(y, 0, n), g.slice_rows(y, n, n));
        if self.residual {
            let us = g.sub(ys, ds);
            let ut = g.sub(yt, dt);
            let us = g.sparse(&geo.up, us);
            let ut = g.sparse(&geo.up, ut);
            (g.add(fs, us), g.add(ft, ut))
        } else {
            (g.sparse(&geo.up, ys), g.sparse(&geo.up, yt))
        }
    }
}

/// Elementwise `F_s + E_m`.
pub fn inject_mask(features: &FeatureMap, embedding: &Array2<f64>) -> Result<FeatureMap> {
    if features.data.dim() != embedding.dim() {
        return Err(Error::Shape(format!("features {:?} vs mask embedding {:?}", features.data.dim(), embedding.dim())));
    }
    FeatureMap::new(&features.data + embedding, features.height, features.width)
}
