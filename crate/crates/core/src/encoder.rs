//! Frozen two-view geometry encoder and point trackers.
//!
//! The toy encoder follows the usual two-view transformer layout: a patch
//! stem, alternating frame-wise and global self-attention blocks, and a dense
//! decoder that brings tokens back to a stride-2 feature map. Its weights are
//! drawn once from the run seed and never updated. An external provider can
//! stand in for it by reading precomputed feature maps from disk.

use crate::config::{EncoderKind, RunConfig};
use crate::checkpoint::TensorBundle;
use crate::data::{Frame, Image, Point, PointSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::sparse::{self, GatherMap};
use crate::transform::Homography;
use ndarray::Array2;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Patch tokens of one frame, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub rows: usize,
    pub cols: usize,
    pub frame: Frame,
}

/// Dense stride-2 features stored as `[height·width, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new(data: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::Shape(format!("feature rows {} != {height}x{width}", data.nrows())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature".into()));
        }
        Ok(Self { data, height, width })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, x: usize, y: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(y * self.width + x)
    }
}

/// Continuous feature-grid coordinates of a pixel position (stride 2, pixel
/// centers at integers).
pub fn pixel_to_feature(p: Point) -> (f64, f64) {
    ((p.x - 0.5) / 2.0, (p.y - 0.5) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention restricted to the tokens of one frame.
    Frame,
    /// Attention over the concatenated tokens of both frames.
    Global,
}

#[derive(Clone, Debug)]
struct Block {
    kind: BlockKind,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    store: ParamStore,
    patch_size: usize,
    channels: usize,
    stem: Linear,
    frame_embed: [ParamId; 2],
    blocks: Vec<Block>,
    proj: Linear,
    conv: Linear,
    out: Linear,
}

impl ToyEncoder {
    pub const DEFAULT_LAYOUT: [BlockKind; 4] = [BlockKind::Frame, BlockKind::Global, BlockKind::Frame, BlockKind::Global];

    pub fn new(config: &RunConfig, seed: u64) -> Self {
        let n = config.model.encoder_blocks;
        let layout: Vec<BlockKind> = (0..n).map(|i| if i % 2 == 0 { BlockKind::Frame } else { BlockKind::Global }).collect();
        Self::with_layout(config, seed, &layout)
    }

    pub fn with_layout(config: &RunConfig, seed: u64, layout: &[BlockKind]) -> Self {
        let m = &config.model;
        let c = m.channels;
        let mut rng = crate::rng::stream(seed, "encoder", 0);
        let mut store = ParamStore::new();
        let stem = Linear::new(&mut store, "stem", m.patch_size * m.patch_size * 3, c, &mut rng);
        let frame_embed = [
            store.add("frame_embed.source", (1, c), Init::Normal(0.02), &mut rng),
            store.add("frame_embed.target", (1, c), Init::Normal(0.02), &mut rng),
        ];
        let blocks = layout
            .iter()
            .enumerate()
            .map(|(i, &kind)| Block {
                kind,
                ln1: LayerNorm::new(&mut store, &format!("block{i}.ln1"), c, &mut rng),
                attn: Attention::new(&mut store, &format!("block{i}.attn"), c, m.heads, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("block{i}.ln2"), c, &mut rng),
                mlp: Mlp::new(&mut store, &format!("block{i}.mlp"), c, c * m.mlp_ratio, c, &mut rng),
            })
            .collect();
        let proj = Linear::new(&mut store, "dense.proj", c, c, &mut rng);
        let conv = Linear::with_init(&mut store, "dense.conv3x3", (c + 3) * 9, c, Init::Scaled(2.0f64.sqrt()), &mut rng);
        let out = Linear::new(&mut store, "dense.out", c, c, &mut rng);
        let mut enc = Self { store, patch_size: m.patch_size, channels: c, stem, frame_embed, blocks, proj, conv, out };
        enc.freeze();
        enc
    }

    fn freeze(&mut self) {
        let mut frozen = ParamStore::new();
        for id in self.store.ids() {
            frozen.insert(self.store.name(id), self.store.get(id).clone(), false);
        }
        self.store = frozen;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn layout(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    /// Zero the per-frame embeddings so the encoder is exactly symmetric in
    /// its two frame slots.
    pub fn zero_frame_embeddings(&mut self) {
        for id in self.frame_embed {
            self.store.get_mut(id).fill(0.0);
        }
    }

    pub fn zero_stem_bias(&mut self) {
        if let Some(b) = self.stem.b {
            self.store.get_mut(b).fill(0.0);
        }
    }

    /// One token per non-overlapping patch: a linear projection of the
    /// flattened patch plus fixed sinusoidal 2-D position terms.
    pub fn patchify(&self, image: &Image, frame: Frame) -> Result<TokenGrid> {
        let (h, w, p) = (image.height(), image.width(), self.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by patch size {p}")));
        }
        let (rows, cols) = (h / p, w / p);
        let mut g = Graph::new();
        let px = g.constant(image.to_tokens());
        let patches = g.gather(&Arc::new(GatherMap::conv2d(h, w, p, p, 0)), px);
        let t = self.stem.forward(&mut g, &self.store, patches);
        let pos = g.constant(sinusoidal_2d(rows, cols, self.channels));
        let t = g.add(t, pos);
        Ok(TokenGrid { tokens: g.value(t).clone(), rows, cols, frame })
    }

    /// Alternating frame-wise / global attention over both frames. With
    /// `independent`, global blocks act frame-wise too and the two views never
    /// exchange information.
    pub fn joint_encode(&self, xs: &TokenGrid, xt: &TokenGrid, independent: bool) -> Result<(TokenGrid, TokenGrid)> {
        if xs.tokens.ncols() != xt.tokens.ncols() || xs.tokens.ncols() != self.channels {
            return Err(Error::Shape(format!(
                "channel mismatch: {} / {} vs encoder {}",
                xs.tokens.ncols(),
                xt.tokens.ncols(),
                self.channels
            )));
        }
        let mut g = Graph::new();
        let s = &self.store;
        let fs = g.param(s, self.frame_embed[0]);
        let ft = g.param(s, self.frame_embed[1]);
        let a = g.constant(xs.tokens.clone());
        let b = g.constant(xt.tokens.clone());
        let mut a = g.add_row(a, fs);
        let mut b = g.add_row(b, ft);
        let na = xs.tokens.nrows();
        for block in &self.blocks {
            let joint = block.kind == BlockKind::Global && !independent;
            if joint {
                let cat = g.concat_rows(&[a, b]);
                let y = block.forward(&mut g, s, cat);
                a = g.slice_rows(y, 0, na);
                b = g.slice_rows(y, na, xt.tokens.nrows());
            } else {
                a = block.forward(&mut g, s, a);
                b = block.forward(&mut g, s, b);
            }
        }
        let hs = TokenGrid { tokens: g.value(a).clone(), ..xs.clone() };
        let ht = TokenGrid { tokens: g.value(b).clone(), ..xt.clone() };
        Ok((hs, ht))
    }

    /// Per-token projection, bilinear upsampling to half the image
    /// resolution, then a 3×3 convolution over the upsampled tokens joined
    /// with the 2×2-pooled image, and a 1×1 output projection.
    pub fn dense_decode(&self, h: &TokenGrid, image: &Image) -> Result<FeatureMap> {
        let (fh, fw) = (image.height() / 2, image.width() / 2);
        if h.rows * self.patch_size != image.height() || h.cols * self.patch_size != image.width() {
            return Err(Error::Shape(format!("token grid {}x{} does not match image", h.rows, h.cols)));
        }
        let mut g = Graph::new();
        let s = &self.store;
        let t = g.constant(h.tokens.clone());
        let t = self.proj.forward(&mut g, s, t);
        let up = g.sparse(&Arc::new(sparse::bilinear_resize(h.rows, h.cols, fh, fw)), t);
        let gain = (self.channels as f64 / 3.0).sqrt();
        let rgb = g.constant(image.to_tokens().mapv(|v| gain * (2.0 * v - 1.0)));
        let rgb = g.sparse(&Arc::new(sparse::avg_pool(image.height(), image.width(), 2)), rgb);
        let x = g.concat_cols(&[up, rgb]);
        let cols = g.gather(&Arc::new(GatherMap::conv2d(fh, fw, 3, 1, 1)), x);
        let y = self.conv.forward(&mut g, s, cols);
        let y = g.relu(y);
        let y = self.out.forward(&mut g, s, y);
        FeatureMap::new(g.value(y).clone(), fh, fw)
    }

    pub fn encode_pair(&self, source: &Image, target: &Image, independent: bool) -> Result<(FeatureMap, FeatureMap)> {
        let xs = self.patchify(source, Frame::Source)?;
        let xt = self.patchify(target, Frame::Target)?;
        let (hs, ht) = self.joint_encode(&xs, &xt, independent)?;
        Ok((self.dense_decode(&hs, source)?, self.dense_decode(&ht, target)?))
    }
}

impl Block {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let n = self.ln1.forward(g, s, x);
        let a = self.attn.forward(g, s, n, n, n);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, s, x);
        let m = self.mlp.forward(g, s, n);
        g.add(x, m)
    }
}

/// Fixed sine/cosine position code: the first half of the channels encodes
/// the row, the second half the column.
pub fn sinusoidal_2d(rows: usize, cols: usize, channels: usize) -> Array2<f64> {
    let half = channels / 2;
    let quarter = (half / 2).max(1);
    Array2::from_shape_fn((rows * cols, channels), |(t, c)| {
        let (r, col) = ((t / cols) as f64, (t % cols) as f64);
        let (pos, c) = if c < half { (r, c) } else { (col, c - half) };
        let i = (c % quarter) as f64;
        let freq = 1.0 / 100f64.powf(i / quarter as f64);
        if c < quarter {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Feature maps (and optionally tracked target points) read from tensor
/// bundles at `<dir>/<pair id>/`, with tensors `f_s`, `f_t` (`[h·w, C]`),
/// metadata `height`/`width`, and an optional `p_t` (`[K, 2]`, pixel x,y).
#[derive(Clone, Debug)]
pub struct ExternalFeatures {
    pub dir: PathBuf,
}

pub struct ExternalPair {
    pub source: FeatureMap,
    pub target: FeatureMap,
    pub tracks: Option<PointSet>,
}

impl ExternalFeatures {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn load(&self, id: &str) -> Result<ExternalPair> {
        let path = self.dir.join(id);
        let b = TensorBundle::read(&path)?;
        let dim = |k: &str| -> Result<usize> {
            b.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::format(&path, format!("missing meta {k}")))
        };
        let (h, w) = (dim("height")?, dim("width")?);
        let get = |n: &str| b.tensor(n).cloned().ok_or_else(|| Error::format(&path, format!("missing tensor {n}")));
        let source = FeatureMap::new(get("f_s")?, h, w)?;
        let target = FeatureMap::new(get("f_t")?, h, w)?;
        if source.channels() != target.channels() {
            return Err(Error::Shape("external feature channel mismatch".into()));
        }
        let tracks = b.tensor("p_t").map(|t| {
            PointSet::new(Frame::Target, t.rows().into_iter().map(|r| Point::new(r[0], r[1])).collect())
        });
        Ok(ExternalPair { source, target, tracks })
    }

    pub fn save(dir: &Path, id: &str, pair: &ExternalPair) -> Result<()> {
        let mut b = TensorBundle::default();
        b.meta.push(("height".into(), pair.source.height.to_string()));
        b.meta.push(("width".into(), pair.source.width.to_string()));
        b.push("f_s", pair.source.data.clone());
        b.push("f_t", pair.target.data.clone());
        if let Some(p) = &pair.tracks {
            let t = Array2::from_shape_fn((p.len(), 2), |(i, c)| if c == 0 { p.points[i].x } else { p.points[i].y });
            b.push("p_t", t);
        }
        b.write(&dir.join(id))
    }
}

/// Encoder selected by configuration key.
#[derive(Clone, Debug)]
pub enum EncoderProvider {
    Toy(ToyEncoder),
    External(ExternalFeatures),
}

impl EncoderProvider {
    pub fn from_config(config: &RunConfig) -> Self {
        match config.model.encoder {
            EncoderKind::Toy => EncoderProvider::Toy(ToyEncoder::new(config, config.seed)),
            EncoderKind::External => {
                EncoderProvider::External(ExternalFeatures::new(config.model.encoder_dir.clone().unwrap_or_default()))
            }
        }
    }

    /// `id` names the pair for the external provider; the toy encoder ignores it.
    pub fn encode(&self, id: &str, source: &Image, target: &Image, independent: bool) -> Result<(FeatureMap, FeatureMap)> {
        match self {
            EncoderProvider::Toy(e) => e.encode_pair(source, target, independent),
            EncoderProvider::External(x) => {
                let p = x.load(id)?;
                Ok((p.source, p.target))
            }
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            EncoderProvider::Toy(e) => e.params().checksum(),
            EncoderProvider::External(x) => format!("external:{}", x.dir.display()),
        }
    }
}

/// Point tracker from the source to the target frame.
pub enum Tracker<'a> {
    /// Apply the known source→target transform.
    GroundTruth(Homography),
    /// Match each point's source feature to the most cosine-similar target
    /// feature cell.
    FeatureCorrelation { source: &'a FeatureMap, target: &'a FeatureMap },
    /// Tracks supplied from outside (e.g. an external encoder's track head).
    Given(&'a PointSet),
}

pub fn track_points(points: &PointSet, source: &Image, target: &Image, tracker: &Tracker<'_>) -> Result<PointSet> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    if !points.in_bounds(source.width(), source.height()) {
        return Err(Error::Shape("source points out of bounds".into()));
    }
    let (tw, th) = (target.width(), target.height());
    let out = match tracker {
        Tracker::GroundTruth(h) => points.points.iter().map(|&p| h.apply(p).clamped(tw, th)).collect(),
        Tracker::FeatureCorrelation { source: fs, target: ft } => {
            points.points.iter().map(|&p| correlate(p, fs, ft).clamped(tw, th)).collect()
        }
        Tracker::Given(given) => {
            if given.len() != points.len() {
                return Err(Error::Shape(format!("{} given tracks for {} points", given.len(), points.len())));
            }
            given.points.iter().map(|p| p.clamped(tw, th)).collect()
        }
    };
    Ok(PointSet::new(Frame::Target, out))
}

fn correlate(p: Point, fs: &FeatureMap, ft: &FeatureMap) -> Point {
    let coords = [pixel_to_feature(p)];
    let q = sparse::bilinear_sample(fs.height, fs.width, &coords).apply(fs.data.view());
    let q = q.row(0);
    let qn = q.dot(&q).sqrt().max(1e-12);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, row) in ft.data.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt().max(1e-12);
        let sim = row.dot(&q) / (n * qn);
        if sim > best.0 {
            best = (sim, i);
        }
    }
    let (y, x) = (best.1 / ft.width, best.1 % ft.width);
    Point::new(2.0 * x as f64 + 0.5, 2.0 * y as f64 + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, c: usize) -> RunConfig {
        let mut c0 = RunConfig::toy();
        c0.model.image_size = size;
        c0.model.channels = c;
        c0
    }

    fn noise_image(n: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut r = crate::rng::seeded(seed);
        Image::new(ndarray::Array3::from_shape_simple_fn((n, n, 3), || r.random::<f64>())).unwrap()
    }

    #[test]
    fn stem_token_counts() {
        let e = ToyEncoder::new(&cfg(70, 16), 0);
        let t = e.patchify(&noise_image(70, 1), Frame::Source).unwrap();
        assert_eq!((t.rows, t.cols, t.tokens.nrows()), (5, 5, 25));
        assert!(e.patchify(&noise_image(72, 1), Frame::Source).is_err());
    }

    #[test]
    fn zero_image_gives_position_terms_only() {
        let mut e = ToyEncoder::new(&cfg(28, 8), 0);
        e.zero_stem_bias();
        let t = e.patchify(&Image::zeros(28, 28), Frame::Source).unwrap();
        assert_eq!(t.tokens, sinusoidal_2d(2, 2, 8));
    }

    #[test]
    fn dense_decode_is_stride_two_and_deterministic() {
        let e = ToyEncoder::new(&cfg(70, 16), 0);
        let img = noise_image(70, 2);
        let (fs, ft) = e.encode_pair(&img, &img, false).unwrap();
        assert_eq!((fs.height, fs.width, fs.channels()), (35, 35, 16));
        let (fs2, _) = e.encode_pair(&img, &img, false).unwrap();
        assert_eq!(fs, fs2);
        assert_eq!(ft.data.nrows(), 35 * 35);
    }

    #[test]
    fn identical_inputs_give_identical_outputs_without_frame_embeddings() {
        let mut e = ToyEncoder::new(&cfg(28, 8), 4);
        e.zero_frame_embeddings();
        let img = noise_image(28, 3);
        let x = e.patchify(&img, Frame::Source).unwrap();
        let (a, b) = e.joint_encode(&x, &x, false).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn frame_blocks_do_not_leak_across_views() {
        let e = ToyEncoder::with_layout(&cfg(28, 8), 4, &[BlockKind::Frame]);
        let xs = e.patchify(&noise_image(28, 3), Frame::Source).unwrap();
        let xt = e.patchify(&noise_image(28, 4), Frame::Target).unwrap();
        let mut xt2 = xt.clone();
        xt2.tokens.mapv_inplace(|v| v + 0.3);
        let (h1, _) = e.joint_encode(&xs, &xt, false).unwrap();
        let (h2, _) = e.joint_encode(&xs, &xt2, false).unwrap();
        assert_eq!(h1.tokens, h2.tokens);

        let eg = ToyEncoder::with_layout(&cfg(28, 8), 4, &[BlockKind::Global]);
        let (g1, _) = eg.joint_encode(&xs, &xt, false).unwrap();
        let (g2, _) = eg.joint_encode(&xs, &xt2, false).unwrap();
        assert_ne!(g1.tokens, g2.tokens);
        let (i1, _) = eg.joint_encode(&xs, &xt, true).unwrap();
        let (i2, _) = eg.joint_encode(&xs, &xt2, true).unwrap();
        assert_eq!(i1.tokens, i2.tokens);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let e = ToyEncoder::new(&cfg(28, 8), 0);
        let xs = e.patchify(&noise_image(28, 3), Frame::Source).unwrap();
        let mut xt = xs.clone();
        xt.tokens = Array2::zeros((4, 6));
        assert!(matches!(e.joint_encode(&xs, &xt, false), Err(Error::Shape(_))));
    }

    #[test]
    fn ground_truth_tracker_applies_transform_and_clamps() {
        let img = Image::zeros(70, 70);
        let ps = PointSet::new(Frame::Source, vec![Point::new(10.0, 10.0), Point::new(60.0, 5.0)]);
        let t = Homography::translation(5.0, -2.0);
        let out = track_points(&ps, &img, &img, &Tracker::GroundTruth(t)).unwrap();
        assert_eq!(out.points, vec![Point::new(15.0, 8.0), Point::new(65.0, 3.0)]);
        let far = Homography::translation(50.0, 0.0);
        let out = track_points(&ps, &img, &img, &Tracker::GroundTruth(far)).unwrap();
        assert_eq!(out.points[1], Point::new(69.0, 5.0));
        let id = track_points(&ps, &img, &img, &Tracker::GroundTruth(Homography::identity())).unwrap();
        assert_eq!(id.points, ps.points);
        let empty = PointSet::new(Frame::Source, vec![]);
        assert!(matches!(track_points(&empty, &img, &img, &Tracker::GroundTruth(t)), Err(Error::EmptyPoints)));
    }

    #[test]
    fn external_provider_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMap::new(Array2::from_shape_fn((6, 3), |(r, c)| (r + c) as f64), 2, 3).unwrap();
        let pair = ExternalPair {
            source: f.clone(),
            target: f.clone(),
            tracks: Some(PointSet::new(Frame::Target, vec![Point::new(1.0, 2.0)])),
        };
        ExternalFeatures::save(dir.path(), "p0", &pair).unwrap();
        let back = ExternalFeatures::new(dir.path()).load("p0").unwrap();
        assert_eq!(back.source, f);
        assert_eq!(back.tracks.unwrap().points, vec![Point::new(1.0, 2.0)]);
    }
}
