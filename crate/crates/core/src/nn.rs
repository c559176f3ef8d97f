//! Layers built from [`Graph`] ops. Each layer only holds parameter ids; the
//! tensors live in a [`ParamStore`].

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_init(store, name, fan_in, fan_out, Init::Scaled(1.0), rng)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), (fan_in, fan_out), init, rng);
        let b = store.add(format!("{name}.b"), (1, fan_out), Init::Zeros, rng);
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let gamma = store.add(format!("{name}.gamma"), (1, dim), Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), (1, dim), Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let n = g.normalize_rows(x, 1e-5);
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0);
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, queries: Var, keys: Var, values: Var) -> Var {
        let q = self.q.forward(g, s, queries);
        let k = self.k.forward(g, s, keys);
        let v = self.v.forward(g, s, values);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let out = if self.heads == 1 {
            attend(g, q, k, v, scale)
        } else {
            let parts: Vec<Var> = (0..self.heads)
                .map(|h| {
                    let qh = g.slice_cols(q, h * dh, dh);
                    let kh = g.slice_cols(k, h * dh, dh);
                    let vh = g.slice_cols(v, h * dh, dh);
                    attend(g, qh, kh, vh, scale)
                })
                .collect();
            g.concat_cols(&parts)
        };
        self.o.forward(g, s, out)
    }
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Var {
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, scale);
    let p = g.softmax_rows(scores);
    g.matmul(p, v)
}

/// Two-layer ReLU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, s, x);
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

/// Random Fourier features of 2-D coordinates in `[0, 1]²`, `dim` wide.
pub fn fourier_features(coords: &[(f64, f64)], basis: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let half = basis.ncols();
    let mut out = ndarray::Array2::zeros((coords.len(), 2 * half));
    for (r, &(x, y)) in coords.iter().enumerate() {
        let (x, y) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        for c in 0..half {
            let a = std::f64::consts::TAU * (x * basis[[0, c]] + y * basis[[1, c]]);
            out[[r, c]] = a.sin();
            out[[r, half + c]] = a.cos();
        }
    }
    out
}
