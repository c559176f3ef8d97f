//! Planar projective transforms in pixel coordinates (pixel centers at
//! integer positions).

use crate::data::Point;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub const fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]] }
    }

    /// Scale and rotate (radians, counter-clockwise in image axes) about
    /// `(cx, cy)`, then translate.
    pub fn similarity(scale: f64, angle: f64, cx: f64, cy: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = scale * s;
        Self {
            m: [
                [a, -b, cx - a * cx + b * cy + dx],
                [b, a, cy - b * cx - a * cy + dy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    /// Mirror `x ↦ width − 1 − x`.
    pub fn flip_horizontal(width: usize) -> Self {
        Self { m: [[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Affine map taking the axis-aligned crop `[x0, x0+cw] × [y0, y0+ch]`
    /// (pixel-center extents) onto the full `width × height` frame.
    pub fn crop_resize(x0: f64, y0: f64, cw: f64, ch: f64, width: usize, height: usize) -> Self {
        let sx = (width as f64 - 1.0) / cw;
        let sy = (height as f64 - 1.0) / ch;
        Self { m: [[sx, 0.0, -x0 * sx], [0.0, sy, -y0 * sy], [0.0, 0.0, 1.0]] }
    }

    /// Projective map sending the four frame corners to the corners displaced
    /// by `offsets` (clockwise from top-left).
    pub fn from_corner_offsets(width: usize, height: usize, offsets: [(f64, f64); 4]) -> Option<Self> {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let dst: Vec<(f64, f64)> = src.iter().zip(offsets).map(|(&(x, y), (ox, oy))| (x + ox, y + oy)).collect();
        Self::from_correspondences(&src, &dst)
    }

    /// Direct linear solve from four point correspondences.
    pub fn from_correspondences(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Self> {
        assert_eq!(src.len(), 4);
        assert_eq!(dst.len(), 4);
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a)?;
        Some(Self { m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]] })
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        Point::new((m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w, (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.determinant();
        if d.abs() < 1e-12 {
            return None;
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let inv = [
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ];
        Some(Self { m: inv })
    }

    /// Local area scale factor at `p`.
    pub fn jacobian_det(&self, p: Point) -> f64 {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        let q = self.apply(p);
        let j00 = (m[0][0] - m[2][0] * q.x) / w;
        let j01 = (m[0][1] - m[2][1] * q.x) / w;
        let j10 = (m[1][0] - m[2][0] * q.y) / w;
        let j11 = (m[1][1] - m[2][1] * q.y) / w;
        j00 * j11 - j01 * j10
    }

    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self { m: [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]] }
    }
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}
