//! Procedural two-view benchmark with exact instance masks.
//!
//! Scenes live in world coordinates that coincide with the source view. The
//! target view is a planar projective transform of the world; both views are
//! rasterised independently by evaluating the scene at every pixel centre
//! pulled back into world space, so each view has its own sampling pattern.

use crate::data::{MaskGrid, Point};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::transform::Homography;
use crate::{par, Image};
use ndarray::Array3;
use rand::Rng;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const MAX_RETRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty {s:?} (easy|medium|hard)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Convex polygon, vertices counter-clockwise.
    Polygon { vertices: Vec<(f64, f64)> },
    Capsule { a: (f64, f64), b: (f64, f64), r: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| {
                    let (x0, y0) = vertices[i];
                    let (x1, y1) = vertices[(i + 1) % n];
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                })
            }
            Shape::Capsule { a, b, r } => {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 { (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (px, py) = (a.0 + t * vx - x, a.1 + t * vy - y);
                px * px + py * py <= r * r
            }
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match self {
            Shape::Ellipse { cx, cy, .. } => (*cx, *cy),
            Shape::Polygon { vertices } => {
                let n = vertices.len() as f64;
                (vertices.iter().map(|v| v.0).sum::<f64>() / n, vertices.iter().map(|v| v.1).sum::<f64>() / n)
            }
            Shape::Capsule { a, b, .. } => ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0),
        }
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
            Shape::Polygon { vertices } => vertices.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |b, v| {
                (b.0.min(v.0), b.1.min(v.1), b.2.max(v.0), b.3.max(v.1))
            }),
            Shape::Capsule { a, b, r } => (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r),
        }
    }

    fn translated(&self, dx: f64, dy: f64) -> Self {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => Shape::Ellipse { cx: cx + dx, cy: cy + dy, rx: *rx, ry: *ry, angle: *angle },
            Shape::Polygon { vertices } => Shape::Polygon { vertices: vertices.iter().map(|v| (v.0 + dx, v.1 + dy)).collect() },
            Shape::Capsule { a, b, r } => Shape::Capsule { a: (a.0 + dx, a.1 + dy), b: (b.0 + dx, b.1 + dy), r: *r },
        }
    }
}

/// Stripe texture modulating a base colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub freq: f64,
    pub angle: f64,
    pub phase: f64,
    pub contrast: f64,
}

impl Texture {
    fn shade(&self, color: [f64; 3], x: f64, y: f64) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let t = 0.5 * (1.0 + (TAU * self.freq * (c * x + s * y) + self.phase).sin());
        let k = 1.0 - self.contrast * t;
        color.map(|v| v * k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub shape: Shape,
    pub color: [f64; 3],
    pub texture: Texture,
}

/// Occluding bar drawn above every instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// Back to front.
    pub instances: Vec<Instance>,
    pub occluders: Vec<Occluder>,
    /// Index of the queried instance.
    pub query: usize,
    pub background: [(f64, f64, f64, f64); 3],
    pub tint: [f64; 3],
}

enum Hit<'a> {
    Instance(usize, &'a Instance),
    Occluder(&'a Occluder),
    Background,
}

impl Scene {
    fn hit(&self, x: f64, y: f64) -> Hit<'_> {
        if let Some(o) = self.occluders.iter().rev().find(|o| o.shape.contains(x, y)) {
            return Hit::Occluder(o);
        }
        match self.instances.iter().enumerate().rev().find(|(_, i)| i.shape.contains(x, y)) {
            Some((k, inst)) => Hit::Instance(k, inst),
            None => Hit::Background,
        }
    }

    fn background_at(&self, x: f64, y: f64) -> [f64; 3] {
        let s = self.size as f64;
        let n: f64 = self.background.iter().map(|&(fx, fy, ph, a)| a * (TAU * (fx * x + fy * y) / s + ph).sin()).sum();
        self.tint.map(|t| (t + 0.15 * n).clamp(0.0, 1.0))
    }

    /// Colour of the world point `(x, y)`.
    pub fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        match self.hit(x, y) {
            Hit::Instance(_, inst) => inst.texture.shade(inst.color, x, y),
            Hit::Occluder(o) => o.color,
            Hit::Background => self.background_at(x, y),
        }
    }

    /// Visible mask of the queried instance seen through `world_to_view`.
    pub fn visible_mask(&self, world_to_view: &Homography) -> MaskGrid {
        let inv = world_to_view.inverse().expect("invertible view transform");
        let n = self.size;
        MaskGrid::from_fn(n, n, |x, y| {
            let w = inv.apply(Point::new(x as f64, y as f64));
            matches!(self.hit(w.x, w.y), Hit::Instance(k, _) if k == self.query)
        })
    }

    /// Mask of the queried instance ignoring every occlusion.
    pub fn full_mask(&self) -> MaskGrid {
        let shape = &self.instances[self.query].shape;
        MaskGrid::from_fn(self.size, self.size, |x, y| shape.contains(x as f64, y as f64))
    }

    pub fn render(&self, world_to_view: &Homography) -> Image {
        let inv = world_to_view.inverse().expect("invertible view transform");
        let n = self.size;
        let mut px = Array3::zeros((n, n, 3));
        for y in 0..n {
            for x in 0..n {
                let w = inv.apply(Point::new(x as f64, y as f64));
                let c = self.color_at(w.x, w.y);
                for k in 0..3 {
                    px[[y, x, k]] = c[k];
                }
            }
        }
        Image::new(px).expect("colours in range").quantized()
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    let h = rng.random::<f64>() * 6.0;
    let (s, v) = (rng.random_range(0.5..0.95), rng.random_range(0.6..1.0));
    let f = h.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_shape(rng: &mut impl Rng, cx: f64, cy: f64, size: f64) -> Shape {
    let r = size * rng.random_range(0.07..0.14);
    match rng.random_range(0..3) {
        0 => Shape::Ellipse { cx, cy, rx: r, ry: r * rng.random_range(0.55..1.0), angle: rng.random::<f64>() * PI },
        1 => {
            let n = rng.random_range(3..7);
            let start = rng.random::<f64>() * TAU;
            let vertices = (0..n)
                .map(|i| {
                    let a = start + TAU * i as f64 / n as f64 + rng.random_range(-0.25..0.25);
                    let rr = r * rng.random_range(0.85..1.15);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            Shape::Polygon { vertices }
        }
        _ => {
            let a = rng.random::<f64>() * PI;
            let half = r * rng.random_range(0.5..0.9);
            let rad = r * rng.random_range(0.4..0.6);
            Shape::Capsule { a: (cx - half * a.cos(), cy - half * a.sin()), b: (cx + half * a.cos(), cy + half * a.sin()), r: rad }
        }
    }
}

fn random_texture(rng: &mut impl Rng, size: f64) -> Texture {
    Texture {
        freq: rng.random_range(3.0..8.0) / size,
        angle: rng.random::<f64>() * PI,
        phase: rng.random::<f64>() * TAU,
        contrast: rng.random_range(0.0..0.5),
    }
}

fn visible_fraction(scene: &Scene) -> f64 {
    let full = scene.full_mask().count();
    if full == 0 {
        return 0.0;
    }
    scene.visible_mask(&Homography::identity()).count() as f64 / full as f64
}

/// Draw a scene for `difficulty` on a `size × size` canvas. The queried
/// instance lies wholly inside the frame and keeps at least a fifth of its
/// area visible.
pub fn generate_scene(rng: &mut impl Rng, difficulty: Difficulty, size: usize) -> Result<Scene> {
    let s = size as f64;
    for _ in 0..MAX_RETRIES {
        let (count, distractors) = match difficulty {
            Difficulty::Easy => (rng.random_range(1..=3), 0),
            Difficulty::Medium => (rng.random_range(3..=6), rng.random_range(1..=2)),
            Difficulty::Hard => (rng.random_range(5..=9), rng.random_range(1..=2)),
        };
        let margin = 0.2 * s;
        let (qx, qy) = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
        let query_inst = Instance { shape: random_shape(rng, qx, qy, s), color: random_color(rng), texture: random_texture(rng, s) };
        let mut instances = Vec::with_capacity(count);
        for _ in 1..count.saturating_sub(distractors).max(1) {
            let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            instances.push(Instance { shape: random_shape(rng, x, y, s), color: random_color(rng), texture: random_texture(rng, s) });
        }
        for _ in 0..distractors {
            let a = rng.random::<f64>() * TAU;
            let d = s * rng.random_range(0.25..0.4);
            let mut copy = query_inst.clone();
            copy.shape = copy.shape.translated(d * a.cos(), d * a.sin());
            copy.texture.phase = rng.random::<f64>() * TAU;
            instances.push(copy);
        }
        let query = rng.random_range(0..=instances.len());
        instances.insert(query, query_inst);

        let background = [0; 3].map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random::<f64>() * TAU, rng.random_range(0.2..0.6)));
        let tint = [0; 3].map(|_| rng.random_range(0.3..0.7));
        let mut scene = Scene { size, instances, occluders: Vec::new(), query, background, tint };

        let (x0, y0, x1, y1) = scene.instances[query].shape.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > s - 1.0 || y1 > s - 1.0 {
            continue;
        }
        if difficulty == Difficulty::Hard {
            let full = scene.full_mask();
            let area = full.count() as f64;
            let (cx, cy) = scene.instances[query].shape.center();
            let bars = rng.random_range(1..=2);
            for _ in 0..bars {
                let a = rng.random::<f64>() * PI;
                let off = rng.random_range(-0.6..0.6) * (x1 - x0).max(y1 - y0) / 2.0;
                let (px, py) = (cx - off * a.sin(), cy + off * a.cos());
                let half = s * 0.3;
                let bar = Occluder {
                    shape: Shape::Capsule {
                        a: (px - half * a.cos(), py - half * a.sin()),
                        b: (px + half * a.cos(), py + half * a.sin()),
                        r: s * rng.random_range(0.015..0.04),
                    },
                    color: random_color(rng),
                };
                scene.occluders.push(bar);
                let covered = full
                    .foreground()
                    .iter()
                    .filter(|p| scene.occluders.iter().any(|o| o.shape.contains(p.x, p.y)))
                    .count() as f64;
                if covered > 0.4 * area {
                    scene.occluders.pop();
                    break;
                }
            }
        }
        if visible_fraction(&scene) >= 0.2 {
            return Ok(scene);
        }
    }
    Err(Error::ObjectLost(MAX_RETRIES))
}

/// Random world-to-target view transform: similarity plus a mild projective
/// corner jitter, stronger with difficulty.
pub fn random_view(rng: &mut impl Rng, difficulty: Difficulty, size: usize) -> Homography {
    let s = size as f64;
    let (scale, rot, shift, persp) = match difficulty {
        Difficulty::Easy => (0.15, 20.0, 0.1, 0.03),
        Difficulty::Medium => (0.25, 35.0, 0.15, 0.06),
        Difficulty::Hard => (0.3, 45.0, 0.2, 0.08),
    };
    let c = (s - 1.0) / 2.0;
    let sim = Homography::similarity(
        (1.0f64 + rng.random_range(-scale..scale)).max(0.5),
        rng.random_range(-rot..rot) * PI / 180.0,
        c,
        c,
        rng.random_range(-shift..shift) * s,
        rng.random_range(-shift..shift) * s,
    );
    let offsets = [0; 4].map(|_| (rng.random_range(-persp..persp) * s, rng.random_range(-persp..persp) * s));
    let p = Homography::from_corner_offsets(size, size, offsets).unwrap_or_default();
    p.compose(&sim)
}

/// One benchmark sample: two rendered views of a scene and the queried
/// instance's masks in each.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub difficulty: Difficulty,
    pub query: usize,
    /// World (= source view) to target view.
    pub transform: Homography,
    pub source: Image,
    pub target: Image,
    pub m_s: MaskGrid,
    pub m_t: MaskGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub source: Image,
    pub target: Image,
    pub m_s: MaskGrid,
    pub m_t: MaskGrid,
}

pub fn render_pair(scene: &Scene, transform: &Homography) -> Result<RenderedPair> {
    if transform.inverse().is_none() {
        return Err(Error::Config("view transform is singular".into()));
    }
    let id = Homography::identity();
    Ok(RenderedPair {
        source: scene.render(&id),
        target: scene.render(transform),
        m_s: scene.visible_mask(&id),
        m_t: scene.visible_mask(transform),
    })
}

/// Sample `index` of the benchmark stream rooted at `seed`.
pub fn generate_sample(seed: u64, index: usize, difficulty: Difficulty, size: usize) -> Result<Sample> {
    let mut rng = stream(seed, "synth", index as u64);
    let scene = generate_scene(&mut rng, difficulty, size)?;
    let min_pixels = (scene.visible_mask(&Homography::identity()).count() / 4).max(4);
    for _ in 0..MAX_RETRIES {
        let t = random_view(&mut rng, difficulty, size);
        let det = t.jacobian_det(Point::new(size as f64 / 2.0, size as f64 / 2.0));
        if !(0.25..=4.0).contains(&det) {
            continue;
        }
        let pair = render_pair(&scene, &t)?;
        if pair.m_t.count() >= min_pixels {
            return Ok(Sample {
                id: format!("{index:06}"),
                difficulty,
                query: scene.query,
                transform: t,
                source: pair.source,
                target: pair.target,
                m_s: pair.m_s,
                m_t: pair.m_t,
            });
        }
    }
    Err(Error::OutOfFrame(MAX_RETRIES))
}

pub fn generate(seed: u64, n: usize, difficulty: Difficulty, size: usize) -> Result<Vec<Sample>> {
    par::map_range(n, |i| generate_sample(seed, i, difficulty, size)).into_iter().collect()
}

/// Nearest-neighbour warp of a source-view mask into the target view.
pub fn warp_mask(mask: &MaskGrid, transform: &Homography) -> MaskGrid {
    let inv = transform.inverse().expect("invertible view transform");
    let (h, w) = mask.dims();
    MaskGrid::from_fn(h, w, |x, y| {
        let p = inv.apply(Point::new(x as f64, y as f64));
        let (sx, sy) = (p.x.round(), p.y.round());
        sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h && mask.get(sx as usize, sy as usize) > 0.5
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub difficulty: Difficulty,
    pub query: usize,
    pub transform: Homography,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn paths(dir: &Path, split: Split, id: &str) -> [PathBuf; 4] {
    let img = dir.join("images").join(split.name());
    let msk = dir.join("masks").join(split.name());
    [img.join(format!("{id}_s.png")), img.join(format!("{id}_t.png")), msk.join(format!("{id}_s.png")), msk.join(format!("{id}_t.png"))]
}

/// Write `n` pairs under `dir`: the first `round(n · train_ratio)` go to the
/// train split, the rest to val. `manifest.txt` holds one `key=value` line
/// per pair; `dataset.txt` records the generator settings.
pub fn export_dataset(dir: &Path, n: usize, difficulty: Difficulty, size: usize, seed: u64, train_ratio: f64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one pair".into()));
    }
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::Config("train ratio must be in [0, 1]".into()));
    }
    let n_train = (n as f64 * train_ratio).round() as usize;
    let entries: Vec<ManifestEntry> = par::map_range(n, |i| -> Result<ManifestEntry> {
        let s = generate_sample(seed, i, difficulty, size)?;
        let split = if i < n_train { Split::Train } else { Split::Val };
        let [is, it, ms, mt] = paths(dir, split, &s.id);
        s.source.write(&is)?;
        s.target.write(&it)?;
        s.m_s.write(&ms)?;
        s.m_t.write(&mt)?;
        Ok(ManifestEntry { id: s.id, split, difficulty, query: s.query, transform: s.transform })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut text = String::new();
    for e in &entries {
        let t: Vec<String> = e.transform.to_array().iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&format!(
            "id={} split={} difficulty={} query={} transform={}\n",
            e.id,
            e.split.name(),
            e.difficulty,
            e.query,
            t.join(",")
        ));
    }
    crate::checkpoint::write_atomic(&dir.join("manifest.txt"), text.as_bytes())?;
    let meta = format!("seed={seed}\nsize={size}\nn={n}\ndifficulty={difficulty}\ntrain_ratio={train_ratio}\n");
    crate::checkpoint::write_atomic(&dir.join("dataset.txt"), meta.as_bytes())?;
    Ok(DatasetManifest { seed, size, entries })
}

fn kv(text: &str) -> impl Iterator<Item = (&str, &str)> {
    text.split_whitespace().filter_map(|f| f.split_once('='))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|source| Error::Read { path: p, source });
    let meta_path = dir.join("dataset.txt");
    let meta = read(meta_path.clone())?;
    let mut seed = None;
    let mut size = None;
    for (k, v) in kv(&meta) {
        match k {
            "seed" => seed = v.parse().ok(),
            "size" => size = v.parse().ok(),
            _ => {}
        }
    }
    let (Some(seed), Some(size)) = (seed, size) else {
        return Err(Error::format(meta_path, "missing seed or size"));
    };
    let mpath = dir.join("manifest.txt");
    let text = read(mpath.clone())?;
    let mut entries = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = |what: &str| Error::format(&mpath, format!("{what} in line: {line}"));
        let (mut id, mut split, mut diff, mut query, mut transform) = (None, None, None, None, None);
        for (k, v) in kv(line) {
            match k {
                "id" => id = Some(v.to_string()),
                "split" => split = Some(v.parse::<Split>().map_err(|_| bad("bad split"))?),
                "difficulty" => diff = Some(v.parse::<Difficulty>().map_err(|_| bad("bad difficulty"))?),
                "query" => query = Some(v.parse::<usize>().map_err(|_| bad("bad query"))?),
                "transform" => {
                    let vals: Vec<f64> = v.split(',').map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad transform"))?;
                    let arr: [f64; 9] = vals.try_into().map_err(|_| bad("transform needs 9 values"))?;
                    transform = Some(Homography::from_array(arr));
                }
                _ => {}
            }
        }
        match (id, split, diff, query, transform) {
            (Some(id), Some(split), Some(difficulty), Some(query), Some(transform)) => {
                entries.push(ManifestEntry { id, split, difficulty, query, transform })
            }
            _ => return Err(bad("missing field")),
        }
    }
    Ok(DatasetManifest { seed, size, entries })
}

pub fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    let [is, it, ms, mt] = paths(dir, e.split, &e.id);
    Ok(Sample {
        id: e.id.clone(),
        difficulty: e.difficulty,
        query: e.query,
        transform: e.transform,
        source: Image::read(&is)?,
        target: Image::read(&it)?,
        m_s: MaskGrid::read(&ms)?,
        m_t: MaskGrid::read(&mt)?,
    })
}

/// Load every sample of `split`, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    par::map(&entries, |_, e| load_entry(dir, e)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::iou;
    use crate::rng::seeded;

    #[test]
    fn scenes_are_reproducible_and_counted() {
        for d in Difficulty::ALL {
            let a = generate_scene(&mut seeded(5), d, 70).unwrap();
            let b = generate_scene(&mut seeded(5), d, 70).unwrap();
            assert_eq!(a, b);
        }
        for seed in 0..20 {
            let s = generate_scene(&mut seeded(seed), Difficulty::Easy, 70).unwrap();
            assert!((1..=3).contains(&s.instances.len()));
            assert!(s.occluders.is_empty());
        }
    }

    #[test]
    fn hard_scenes_keep_query_visible() {
        for seed in 0..20 {
            let s = generate_scene(&mut seeded(seed), Difficulty::Hard, 70).unwrap();
            let full = s.full_mask().count() as f64;
            let vis = s.visible_mask(&Homography::identity()).count() as f64;
            assert!(vis / full >= 0.2, "seed {seed}: {}", vis / full);
            assert!(s.instances.len() >= 5);
        }
    }

    #[test]
    fn identity_and_translation_views() {
        let scene = generate_scene(&mut seeded(1), Difficulty::Medium, 70).unwrap();
        let p = render_pair(&scene, &Homography::identity()).unwrap();
        assert_eq!(p.source, p.target);
        assert_eq!(p.m_s, p.m_t);
        let p = render_pair(&scene, &Homography::translation(3.0, -2.0)).unwrap();
        for y in 2..68 {
            for x in 0..67 {
                assert_eq!(p.m_t.get(x + 3, y - 2), p.m_s.get(x, y));
            }
        }
    }

    #[test]
    fn affine_transfer_at_full_scale() {
        let mut rng = seeded(3);
        let scene = generate_scene(&mut rng, Difficulty::Easy, 518).unwrap();
        let t = Homography::similarity(1.1, 0.3, 259.0, 259.0, 12.0, -7.0);
        let p = render_pair(&scene, &t).unwrap();
        assert!(iou(&warp_mask(&p.m_s, &t), &p.m_t).unwrap() >= 0.98);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_dataset(dir.path(), 10, Difficulty::Medium, 70, 7, 0.9).unwrap();
        assert_eq!(m.split(Split::Train).count(), 9);
        assert_eq!(m.split(Split::Val).count(), 1);
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let loaded = load_split(dir.path(), Split::Train).unwrap();
        let fresh = generate(7, 9, Difficulty::Medium, 70).unwrap();
        assert_eq!(loaded, fresh);

        let again = tempfile::tempdir().unwrap();
        export_dataset(again.path(), 10, Difficulty::Medium, 70, 7, 0.9).unwrap();
        for rel in ["manifest.txt", "images/train/000003_t.png", "masks/val/000009_s.png"] {
            assert_eq!(std::fs::read(dir.path().join(rel)).unwrap(), std::fs::read(again.path().join(rel)).unwrap());
        }
        assert!(export_dataset(dir.path(), 0, Difficulty::Easy, 70, 7, 0.9).is_err());
    }
}
