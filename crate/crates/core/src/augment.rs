//! Single-image view synthesis for self-supervised training.
//!
//! The adaptive family (mild scale, rotation and crop) keeps the two views
//! close enough for the encoder's tracker to stay reliable; the non-adaptive
//! family (quarter-turn rotations, horizontal flips) breaks it, so target
//! prompts come from the known transform plus noise instead.

use crate::data::{MaskGrid, Point, PointSet};
use crate::encoder::{track_points, Tracker};
use crate::error::{Error, Result};
use crate::head::Prompts;
use crate::points::sample_points;
use crate::transform::Homography;
use crate::Image;
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

pub const MAX_ATTEMPTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Adaptive,
    NonAdaptive,
}

/// Parameters of one drawn augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    pub family: Family,
    pub scale: f64,
    /// Radians.
    pub angle: f64,
    /// Crop window `(x0, y0, side)` in pixel-centre units.
    pub crop: (f64, f64, f64),
    pub flip: bool,
}

impl AugmentRecord {
    pub fn identity(family: Family, size: usize) -> Self {
        Self { family, scale: 1.0, angle: 0.0, crop: (0.0, 0.0, size as f64 - 1.0), flip: false }
    }

    /// Source-to-augmented pixel transform for a `width × height` image.
    pub fn homography(&self, width: usize, height: usize) -> Homography {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut t = Homography::similarity(self.scale, self.angle, cx, cy, 0.0, 0.0);
        if self.flip {
            t = Homography::flip_horizontal(width).compose(&t);
        }
        let (x0, y0, side) = self.crop;
        Homography::crop_resize(x0, y0, side, side * (height as f64 - 1.0) / (width as f64 - 1.0), width, height).compose(&t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub source: Image,
    pub target: Image,
    pub m_s: MaskGrid,
    pub m_t: MaskGrid,
    pub record: AugmentRecord,
    pub transform: Homography,
}

impl AugmentedPair {
    pub fn family(&self) -> Family {
        self.record.family
    }
}

/// Bilinear warp; pixels pulled from outside the source are black.
pub fn warp_image(image: &Image, t: &Homography) -> Image {
    let inv = t.inverse().expect("invertible augmentation");
    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply(Point::new(x as f64, y as f64));
            let (fx, fy) = (p.x.floor(), p.y.floor());
            let (ax, ay) = (p.x - fx, p.y - fy);
            for c in 0..3 {
                let mut acc = 0.0;
                for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
                    for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                        let wgt = wx * wy;
                        if wgt == 0.0 {
                            continue;
                        }
                        let (sx, sy) = (fx + dx, fy + dy);
                        if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                            acc += wgt * src[[sy as usize, sx as usize, c]];
                        }
                    }
                }
                out[[y, x, c]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out).expect("convex combination stays in range")
}

/// Nearest-neighbour warp, so the result stays binary.
pub fn warp_mask(mask: &MaskGrid, t: &Homography) -> MaskGrid {
    crate::synth::warp_mask(mask, t)
}

pub fn apply(image: &Image, mask: &MaskGrid, record: AugmentRecord) -> Result<AugmentedPair> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape(format!("image {}x{} vs mask {:?}", image.height(), image.width(), mask.dims())));
    }
    let t = record.homography(image.width(), image.height());
    Ok(AugmentedPair {
        source: image.clone(),
        target: warp_image(image, &t),
        m_s: mask.clone(),
        m_t: warp_mask(mask, &t),
        record,
        transform: t,
    })
}

fn draw(rng: &mut impl Rng, family: Family, mask: &MaskGrid) -> AugmentRecord {
    let (h, w) = mask.dims();
    let full = w as f64 - 1.0;
    match family {
        Family::Adaptive => {
            let scale = rng.random_range(0.7..=1.3);
            let angle = rng.random_range(-15.0..=15.0) * PI / 180.0;
            let side = full * rng.random_range(0.6f64.sqrt()..=1.0);
            let slack = full - side;
            let (x0, y0) = match bbox(mask) {
                // prefer windows that contain the whole object
                Some((bx0, by0, bx1, by1)) if bx1 - bx0 <= side && by1 - by0 <= side => {
                    let lo_x = (bx1 - side).max(0.0);
                    let hi_x = bx0.min(slack);
                    let lo_y = (by1 - side).max(0.0);
                    let hi_y = by0.min(slack * (h as f64 - 1.0) / full);
                    (pick(rng, lo_x, hi_x), pick(rng, lo_y, hi_y))
                }
                _ => (rng.random::<f64>() * slack, rng.random::<f64>() * slack),
            };
            AugmentRecord { family, scale, angle, crop: (x0, y0, side), flip: false }
        }
        Family::NonAdaptive => {
            let mut r = AugmentRecord::identity(family, w);
            if rng.random::<bool>() {
                r.flip = true;
            } else {
                let quarter = rng.random_range(1..=3) as f64;
                r.angle = quarter * PI / 2.0 + rng.random_range(-15.0..=15.0) * PI / 180.0;
            }
            r
        }
    }
}

fn pick(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo.min(hi).max(0.0)
    }
}

fn bbox(mask: &MaskGrid) -> Option<(f64, f64, f64, f64)> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return None;
    }
    Some(fg.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |b, p| (b.0.min(p.x), b.1.min(p.y), b.2.max(p.x), b.3.max(p.y))))
}

/// Draw an augmentation of `family`, redrawing until the object survives.
pub fn augment(image: &Image, mask: &MaskGrid, family: Family, rng: &mut impl Rng) -> Result<AugmentedPair> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    for _ in 0..MAX_ATTEMPTS {
        let pair = apply(image, mask, draw(rng, family, mask))?;
        if !pair.m_t.is_empty() {
            return Ok(pair);
        }
    }
    Err(Error::ObjectLost(MAX_ATTEMPTS))
}

/// Source prompts from the mask; target prompts from the tracker for the
/// adaptive family, or from the known transform plus Gaussian noise of
/// `noise · diagonal` for the non-adaptive family.
pub fn synthesize_prompts(
    pair: &AugmentedPair,
    k: usize,
    tracker: &Tracker<'_>,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Prompts> {
    let source = sample_points(&pair.m_s, k, rng)?.points;
    let target = match pair.family() {
        Family::Adaptive => track_points(&source, &pair.source, &pair.target, tracker)?,
        Family::NonAdaptive => {
            let (w, h) = (pair.target.width(), pair.target.height());
            let sigma = noise * ((w * w + h * h) as f64).sqrt();
            let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
            let pts = source
                .points
                .iter()
                .map(|&p| {
                    let q = pair.transform.apply(p);
                    match &normal {
                        Some(n) => Point::new(q.x + n.sample(rng), q.y + n.sample(rng)).clamped(w, h),
                        None => q.clamped(w, h),
                    }
                })
                .collect();
            PointSet::new(crate::data::Frame::Target, pts)
        }
    };
    Ok(Prompts { source, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn scene() -> (Image, MaskGrid) {
        let img = Image::new(Array3::from_shape_fn((40, 40, 3), |(y, x, c)| ((x * 3 + y * 7 + c * 11) % 17) as f64 / 16.0)).unwrap();
        let m = MaskGrid::from_fn(40, 40, |x, y| (8..20).contains(&x) && (5..14).contains(&y));
        (img, m)
    }

    #[test]
    fn identity_record_is_identity() {
        let (img, m) = scene();
        let p = apply(&img, &m, AugmentRecord::identity(Family::Adaptive, 40)).unwrap();
        assert_eq!(p.target, img);
        assert_eq!(p.m_t, m);
    }

    #[test]
    fn flip_mirrors_mask() {
        let (img, m) = scene();
        let mut r = AugmentRecord::identity(Family::NonAdaptive, 40);
        r.flip = true;
        let p = apply(&img, &m, r).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!(p.m_t.get(x, y), m.get(39 - x, y));
            }
        }
    }

    #[test]
    fn half_turn_reflects_centroid() {
        let (img, m) = scene();
        let mut r = AugmentRecord::identity(Family::NonAdaptive, 40);
        r.angle = PI;
        let p = apply(&img, &m, r).unwrap();
        let (a, b) = (m.centroid().unwrap(), p.m_t.centroid().unwrap());
        assert!((b.x - (39.0 - a.x)).abs() <= 1.0 && (b.y - (39.0 - a.y)).abs() <= 1.0);
    }

    #[test]
    fn drawn_parameters_respect_ranges() {
        let (img, m) = scene();
        let mut rng = seeded(4);
        for _ in 0..50 {
            let p = augment(&img, &m, Family::Adaptive, &mut rng).unwrap();
            let r = p.record;
            assert!((0.7..=1.3).contains(&r.scale));
            assert!(r.angle.abs() <= 15f64.to_radians() + 1e-12);
            assert!(r.crop.2 * r.crop.2 >= 0.6 * 39.0 * 39.0 - 1e-9);
            assert!(!p.m_t.is_empty());
            let q = augment(&img, &m, Family::NonAdaptive, &mut rng).unwrap().record;
            if !q.flip {
                let turns = q.angle / (PI / 2.0);
                assert!((turns - turns.round()).abs() * 90.0 <= 15.0 + 1e-9 && (1.0..=3.0).contains(&turns.round()));
            }
        }
        assert!(matches!(augment(&img, &MaskGrid::empty(40, 40), Family::Adaptive, &mut rng), Err(Error::EmptyMask)));
    }

    #[test]
    fn prompt_synthesis() {
        let (img, m) = scene();
        let pair = augment(&img, &m, Family::NonAdaptive, &mut seeded(1)).unwrap();
        let gt = Tracker::GroundTruth(pair.transform);
        let exact = synthesize_prompts(&pair, 5, &gt, 0.0, &mut seeded(2)).unwrap();
        for (s, t) in exact.source.points.iter().zip(&exact.target.points) {
            assert_eq!(*t, pair.transform.apply(*s).clamped(40, 40));
        }
        let a = synthesize_prompts(&pair, 5, &gt, 0.02, &mut seeded(3)).unwrap();
        let b = synthesize_prompts(&pair, 5, &gt, 0.02, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.target, exact.target);

        let adaptive = augment(&img, &m, Family::Adaptive, &mut seeded(5)).unwrap();
        let tr = Tracker::GroundTruth(adaptive.transform);
        let p = synthesize_prompts(&adaptive, 5, &tr, 0.5, &mut seeded(6)).unwrap();
        for (s, t) in p.source.points.iter().zip(&p.target.points) {
            assert_eq!(*t, adaptive.transform.apply(*s).clamped(40, 40));
        }
    }
}
