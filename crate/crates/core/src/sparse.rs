//! Fixed linear operators over token matrices.
//!
//! Every spatial resampling step in the pipeline (average pooling, bilinear
//! up/down sampling, point sampling) is a fixed linear map acting on the row
//! axis of a `[tokens, channels]` matrix. Storing those maps as sparse row
//! lists gives a single forward/backward implementation for all of them.
//! Convolutions are expressed through [`GatherMap`] (im2col).

use ndarray::{Array2, ArrayView2};

/// Row-sparse linear map `Y = S · X` with `S` of shape `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn new(cols: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(entries.iter().flatten().all(|&(c, _)| c < cols));
        Self { rows: entries.len(), cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[r]
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.cols, "sparse map input rows");
        let c = x.ncols();
        let mut out = Array2::zeros((self.rows, c));
        for (r, row) in self.entries.iter().enumerate() {
            let mut dst = out.row_mut(r);
            for &(src, w) in row {
                dst.scaled_add(w, &x.row(src));
            }
        }
        out
    }

    /// `Sᵀ · dY`, the adjoint used during backpropagation.
    pub fn apply_transpose(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(dy.nrows(), self.rows, "sparse map adjoint rows");
        let mut out = Array2::zeros((self.cols, dy.ncols()));
        for (r, row) in self.entries.iter().enumerate() {
            let g = dy.row(r);
            for &(src, w) in row {
                out.row_mut(src).scaled_add(w, &g);
            }
        }
        out
    }

    /// Dense copy, for tests and small oracles.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                d[[r, c]] += w;
            }
        }
        d
    }
}

/// im2col gather: output row `r` is the concatenation over kernel slots `j`
/// of input row `slots[r][j]` (or zeros for padding).
#[derive(Clone, Debug, PartialEq)]
pub struct GatherMap {
    in_rows: usize,
    kernel: usize,
    slots: Vec<Option<usize>>,
}

impl GatherMap {
    pub fn out_rows(&self) -> usize {
        self.slots.len() / self.kernel
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Square-kernel convolution window over a row-major `h × w` grid.
    pub fn conv2d(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut slots = Vec::with_capacity(oh * ow * k * k);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            slots.push(Some(y as usize * w + x as usize));
                        } else {
                            slots.push(None);
                        }
                    }
                }
            }
        }
        Self { in_rows: h * w, kernel: k * k, slots }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.in_rows, "gather input rows");
        let c = x.ncols();
        let mut out = Array2::zeros((self.out_rows(), self.kernel * c));
        for (r, mut dst) in out.rows_mut().into_iter().enumerate() {
            let dst = dst.as_slice_mut().expect("contiguous row");
            for j in 0..self.kernel {
                if let Some(src) = self.slots[r * self.kernel + j] {
                    for (d, s) in dst[j * c..(j + 1) * c].iter_mut().zip(x.row(src)) {
                        *d = *s;
                    }
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let c = dy.ncols() / self.kernel;
        let mut out = Array2::<f64>::zeros((self.in_rows, c));
        for r in 0..self.out_rows() {
            let g = dy.row(r);
            for j in 0..self.kernel {
                if let Some(src) = self.slots[r * self.kernel + j] {
                    let mut dst = out.row_mut(src);
                    for (d, s) in dst.iter_mut().zip(g.iter().skip(j * c).take(c)) {
                        *d += *s;
                    }
                }
            }
        }
        out
    }
}

/// Average pooling with a square window `r` over an `h × w` grid.
pub fn avg_pool(h: usize, w: usize, r: usize) -> SparseMap {
    assert!(h % r == 0 && w % r == 0);
    let (oh, ow) = (h / r, w / r);
    let inv = 1.0 / (r * r) as f64;
    let entries = (0..oh * ow)
        .map(|o| {
            let (oy, ox) = (o / ow, o % ow);
            let mut row = Vec::with_capacity(r * r);
            for dy in 0..r {
                for dx in 0..r {
                    row.push(((oy * r + dy) * w + ox * r + dx, inv));
                }
            }
            row
        })
        .collect();
    SparseMap::new(h * w, entries)
}

/// Bilinear interpolation weights for sampling a grid of `n` nodes at the
/// continuous coordinate `t`, clamped to the grid.
fn lerp_weights(t: f64, n: usize) -> [(usize, f64); 2] {
    let t = t.clamp(0.0, (n - 1) as f64);
    let i0 = t.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = t - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Sample an `h × w` grid at arbitrary continuous grid coordinates `(x, y)`.
pub fn bilinear_sample(h: usize, w: usize, coords: &[(f64, f64)]) -> SparseMap {
    let entries = coords
        .iter()
        .map(|&(x, y)| {
            let mut row = Vec::with_capacity(4);
            for (iy, wy) in lerp_weights(y, h) {
                for (ix, wx) in lerp_weights(x, w) {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        row.push((iy * w + ix, wgt));
                    }
                }
            }
            row
        })
        .collect();
    SparseMap::new(h * w, entries)
}

/// Resize an `ih × iw` grid to `oh × ow` with pixel-center alignment
/// (`align_corners = false` semantics).
pub fn bilinear_resize(ih: usize, iw: usize, oh: usize, ow: usize) -> SparseMap {
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    let coords: Vec<(f64, f64)> = (0..oh * ow)
        .map(|o| {
            let (y, x) = (o / ow, o % ow);
            ((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
        .collect();
    bilinear_sample(ih, iw, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Array2::from_elem((16, 3), 2.5);
        let y = avg_pool(4, 4, 2).apply(x.view());
        assert_eq!(y.dim(), (4, 3));
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn resize_identity_size_is_identity() {
        let s = bilinear_resize(3, 4, 3, 4);
        let x = Array2::from_shape_fn((12, 2), |(r, c)| (r * 2 + c) as f64);
        assert_eq!(s.apply(x.view()), x);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        let s = bilinear_resize(2, 3, 5, 4);
        let dy = Array2::from_shape_fn((20, 2), |(r, c)| (r as f64 * 0.3 - c as f64).sin());
        let want = s.to_dense().t().dot(&dy);
        let got = s.apply_transpose(dy.view());
        assert!((&want - &got).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn gather_conv_padding_and_shape() {
        let g = GatherMap::conv2d(4, 4, 4, 2, 1);
        assert_eq!(g.out_rows(), 4);
        let x = Array2::from_shape_fn((16, 1), |(r, _)| r as f64 + 1.0);
        let cols = g.apply(x.view());
        assert_eq!(cols.dim(), (4, 16));
        // top-left window: first row and column are padding
        assert_eq!(cols[[0, 0]], 0.0);
        assert_eq!(cols[[0, 5]], 1.0);
        let back = g.apply_transpose(Array2::ones((4, 16)).view());
        // each interior pixel is covered by exactly 4 windows at stride 2, k 4
        assert_eq!(back[[5, 0]], 4.0);
    }

    #[test]
    fn sample_midpoint() {
        let s = bilinear_sample(1, 2, &[(0.5, 0.0)]);
        let x = array![[1.0, 10.0], [3.0, 20.0]];
        assert_eq!(s.apply(x.view()), array![[2.0, 15.0]]);
    }
}
