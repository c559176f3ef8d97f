//! Representative point prompts from a source mask: k-means++ seeding
//! followed by exactly one Lloyd assignment/update step, with every centroid
//! snapped to its nearest foreground pixel.

use crate::data::{Frame, MaskGrid, Point, PointSet};
use crate::encoder::{pixel_to_feature, FeatureMap};
use crate::error::{Error, Result};
use crate::sparse::{self, SparseMap};
use ndarray::Array2;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPoints {
    pub points: PointSet,
    /// Trailing entries that repeat the last point because the mask had
    /// fewer foreground pixels than requested.
    pub repeated: usize,
}

pub fn sample_points(mask: &MaskGrid, k: usize, rng: &mut impl Rng) -> Result<SampledPoints> {
    let omega = mask.foreground();
    if omega.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (points, repeated) = kmeans_points(&omega, k, rng);
    Ok(SampledPoints { points: PointSet::new(Frame::Source, points), repeated })
}

/// `omega` is sorted into row-major order first, so the result depends only
/// on the point set and the generator state.
pub fn kmeans_points(omega: &[Point], k: usize, rng: &mut impl Rng) -> (Vec<Point>, usize) {
    assert!(!omega.is_empty() && k > 0);
    let mut pts = omega.to_vec();
    pts.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    let kk = k.min(pts.len());

    let centers = plus_plus(&pts, kk, rng);
    let centroids = lloyd_step(&pts, &centers);
    let mut out: Vec<Point> = centroids.iter().map(|c| nearest(&pts, c)).collect();
    let repeated = k - kk;
    let last = *out.last().expect("k >= 1");
    out.extend(std::iter::repeat_n(last, repeated));
    (out, repeated)
}

/// k-means++ seeding: the first center is uniform over the points, each later
/// one is drawn with probability proportional to the squared distance to the
/// nearest chosen center.
fn plus_plus(pts: &[Point], k: usize, rng: &mut impl Rng) -> Vec<Point> {
    let n = pts.len();
    let first = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    let mut centers = vec![pts[first]];
    let mut d2: Vec<f64> = pts.iter().map(|p| p.dist2(&pts[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let c = pts[pick.expect("k <= |points| leaves an unchosen point")];
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(p.dist2(&c));
        }
        centers.push(c);
    }
    centers
}

/// One assignment + mean update. Ties go to the lower center index; a center
/// with no members stays where it was.
fn lloyd_step(pts: &[Point], centers: &[Point]) -> Vec<Point> {
    let k = centers.len();
    let mut sum = vec![(0.0, 0.0, 0usize); k];
    for p in pts {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let d = p.dist2(c);
            if d < bd {
                bd = d;
                best = j;
            }
        }
        sum[best].0 += p.x;
        sum[best].1 += p.y;
        sum[best].2 += 1;
    }
    sum.iter()
        .zip(centers)
        .map(|(&(sx, sy, n), c)| if n == 0 { *c } else { Point::new(sx / n as f64, sy / n as f64) })
        .collect()
}

fn nearest(pts: &[Point], c: &Point) -> Point {
    let mut best = pts[0];
    let mut bd = f64::INFINITY;
    for p in pts {
        let d = p.dist2(c);
        if d < bd {
            bd = d;
            best = *p;
        }
    }
    best
}

/// Bilinear sampling operator reading a feature map at pixel-space points.
pub fn point_sampler(points: &PointSet, height: usize, width: usize) -> SparseMap {
    let coords: Vec<(f64, f64)> = points.points.iter().map(|&p| pixel_to_feature(p)).collect();
    sparse::bilinear_sample(height, width, &coords)
}

/// One `C`-dim token per point, bilinearly sampled from `features`.
pub fn sample_point_features(points: &PointSet, features: &FeatureMap) -> Array2<f64> {
    point_sampler(points, features.height, features.width).apply(features.data.view())
}
