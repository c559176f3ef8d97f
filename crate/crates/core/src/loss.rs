//! Focal and dice objectives on probability masks.

use crate::config::TrainConfig;
use crate::data::MaskGrid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use ndarray::Array2;
use std::sync::Arc;

pub const FOCAL_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { focal: 20.0, dice: 1.0, alpha: 0.25, gamma: 2.0 }
    }
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        Self { focal: t.focal_weight, dice: t.dice_weight, alpha: t.focal_alpha, gamma: t.focal_gamma }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
    /// `(focal, dice)` per sample when the report covers a batch.
    pub per_sample: Vec<(f64, f64)>,
}

impl LossReport {
    pub fn new(focal: f64, dice: f64, w: &LossWeights) -> Self {
        Self { focal, dice, total: w.focal * focal + w.dice * dice, per_sample: vec![(focal, dice)] }
    }

    /// Mean over samples, with the total recomposed from the means.
    pub fn mean(reports: &[LossReport], w: &LossWeights) -> Self {
        let n = reports.len().max(1) as f64;
        let focal = reports.iter().map(|r| r.focal).sum::<f64>() / n;
        let dice = reports.iter().map(|r| r.dice).sum::<f64>() / n;
        let per_sample = reports.iter().flat_map(|r| r.per_sample.iter().copied()).collect();
        Self { focal, dice, total: w.focal * focal + w.dice * dice, per_sample }
    }
}

fn check(pred: &MaskGrid, gt: &MaskGrid) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if !gt.is_binary() {
        return Err(Error::NonBinaryMask);
    }
    Ok(())
}

/// Mean over pixels of `−α_t (1 − p_t)^γ log p_t`, with predictions clamped
/// to `[ε, 1 − ε]`.
pub fn focal_loss(pred: &MaskGrid, gt: &MaskGrid, alpha: f64, gamma: f64) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values().iter())
        .map(|(&p, &t)| {
            let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            let (pt, a) = if t >= 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            -a * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(sum / pred.values().len() as f64)
}

/// `1 − (2Σpg + 1) / (Σp + Σg + 1)`.
pub fn dice_loss(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    check(pred, gt)?;
    let (p, g) = (pred.values(), gt.values());
    let inter: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (p.sum() + g.sum() + DICE_SMOOTH))
}

pub fn total_loss(pred: &MaskGrid, gt: &MaskGrid, w: &LossWeights) -> Result<LossReport> {
    Ok(LossReport::new(focal_loss(pred, gt, w.alpha, w.gamma)?, dice_loss(pred, gt)?, w))
}

/// Graph form of [`total_loss`] for a `[H·W, 1]` probability column; returns
/// `(total, focal, dice)` handles.
pub fn graph_loss(g: &mut Graph, pred: Var, gt: &Arc<Array2<f64>>, w: &LossWeights) -> (Var, Var, Var) {
    let f = g.focal_loss(pred, gt.clone(), w.alpha, w.gamma, FOCAL_EPS);
    let d = g.dice_loss(pred, gt.clone(), DICE_SMOOTH);
    let fw = g.scale(f, w.focal);
    let dw = g.scale(d, w.dice);
    (g.add(fw, dw), f, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(vals: &[f64], h: usize, w: usize) -> MaskGrid {
        MaskGrid::probabilities(Array2::from_shape_vec((h, w), vals.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn single_pixel_focal() {
        let l = focal_loss(&grid(&[0.5], 1, 1), &MaskGrid::binary(ndarray::arr2(&[[1.0]])).unwrap(), 0.25, 2.0).unwrap();
        assert!((l - 0.043_321_698_8).abs() < 1e-10);
    }

    #[test]
    fn perfect_prediction() {
        let gt = MaskGrid::from_fn(8, 8, |x, y| x + y < 7);
        let w = LossWeights::default();
        assert!(focal_loss(&gt, &gt, 0.25, 2.0).unwrap() < 1e-6);
        let d = dice_loss(&gt, &gt).unwrap();
        assert!(d >= 0.0 && d <= 1.0 / (2.0 * gt.count() as f64 + 1.0));
        assert!(total_loss(&gt, &gt, &w).unwrap().total < 1e-3);
    }

    #[test]
    fn dice_of_zero_prediction() {
        let gt = MaskGrid::from_fn(8, 8, |x, _| x < 3);
        let zero = grid(&[0.0; 64], 8, 8);
        let n = gt.count() as f64;
        assert!((dice_loss(&zero, &gt).unwrap() - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-15);
        let other = MaskGrid::from_fn(8, 8, |_, y| y > 4);
        assert_eq!(dice_loss(&other, &gt).unwrap(), dice_loss(&gt, &other).unwrap());
    }

    #[test]
    fn totals_and_means() {
        let w = LossWeights::default();
        assert!((LossReport::new(0.1, 0.3, &w).total - 2.3).abs() < 1e-15);
        let m = LossReport::mean(&[LossReport::new(0.1, 0.3, &w), LossReport::new(0.3, 0.1, &w)], &w);
        assert!((m.focal - 0.2).abs() < 1e-15 && (m.dice - 0.2).abs() < 1e-15);
        assert_eq!(m.per_sample.len(), 2);
    }

    #[test]
    fn errors() {
        let a = MaskGrid::empty(4, 4);
        assert!(focal_loss(&a, &MaskGrid::empty(4, 5), 0.25, 2.0).is_err());
        let soft = grid(&[0.3; 16], 4, 4);
        assert!(matches!(dice_loss(&a, &soft), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn graph_form_agrees() {
        let gt = MaskGrid::from_fn(6, 6, |x, y| (x * y) % 3 == 0);
        let pred = grid(&(0..36).map(|i| 0.05 + 0.9 * (i as f64 / 35.0)).collect::<Vec<_>>(), 6, 6);
        let w = LossWeights::default();
        let r = total_loss(&pred, &gt, &w).unwrap();
        let mut g = Graph::new();
        let p = g.constant(crate::head::column(pred.values()));
        let t = Arc::new(crate::head::column(gt.values()));
        let (tot, f, d) = graph_loss(&mut g, p, &t, &w);
        assert!((g.scalar(f) - r.focal).abs() < 1e-15);
        assert!((g.scalar(d) - r.dice).abs() < 1e-15);
        assert!((g.scalar(tot) - r.total).abs() < 1e-13);
    }
}
