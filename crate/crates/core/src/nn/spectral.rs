//! Spectral normalization by power iteration.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Result, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Rng;

/// Floor for the singular-value estimate.
pub const SIGMA_EPS: f64 = 1e-12;

/// Persistent power-iteration vectors for one weight matrix.
///
/// `u` has one entry per weight row, `v` one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub sigma: T,
    /// Set when the estimate fell below [`SIGMA_EPS`].
    pub clamped: bool,
}

fn normalize_into<T: Scalar>(x: Vec<T>, fallback: &[T]) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::lit(SIGMA_EPS) {
        x.into_iter().map(|v| v / norm).collect()
    } else {
        fallback.to_vec()
    }
}

impl<T: Scalar> SpectralState<T> {
    pub fn new(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let draw = |n: usize, rng: &mut Rng| -> Vec<T> {
            let raw: Vec<T> = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
            let uniform = vec![T::one() / T::lit(n as f64).sqrt(); n];
            normalize_into(raw, &uniform)
        };
        let u = draw(rows, rng);
        let v = draw(cols, rng);
        Self {
            u,
            v,
            sigma: T::one(),
            clamped: false,
        }
    }

    /// Runs `iters` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖` and refreshes `σ̂ = uᵀWv`.
    pub fn iterate(&mut self, w: &Tensor<T>, iters: usize) {
        let (rows, cols) = (w.rows(), w.cols());
        debug_assert_eq!(self.u.len(), rows);
        debug_assert_eq!(self.v.len(), cols);
        let d = w.data();
        for _ in 0..iters {
            let mut v = vec![T::zero(); cols];
            for i in 0..rows {
                let ui = self.u[i];
                for (vj, &wij) in v.iter_mut().zip(&d[i * cols..(i + 1) * cols]) {
                    *vj = *vj + wij * ui;
                }
            }
            self.v = normalize_into(v, &self.v);
            let u: Vec<T> = (0..rows)
                .map(|i| d[i * cols..(i + 1) * cols].iter().zip(&self.v).map(|(&a, &b)| a * b).sum())
                .collect();
            self.u = normalize_into(u, &self.u);
        }
        self.sigma = bilinear(w, &self.u, &self.v);
        self.clamped = !(self.sigma > T::lit(SIGMA_EPS));
        if self.clamped {
            log::warn!("spectral norm estimate {} below floor; weight left unnormalized", self.sigma);
            self.sigma = T::lit(SIGMA_EPS);
        }
    }

    /// Outer product `u vᵀ`, the derivative of `uᵀWv` with respect to `W`.
    pub fn outer(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.u.len() * self.v.len());
        for &a in &self.u {
            data.extend(self.v.iter().map(|&b| a * b));
        }
        Tensor::matrix(self.u.len(), self.v.len(), data)
    }
}

fn bilinear<T: Scalar>(w: &Tensor<T>, u: &[T], v: &[T]) -> T {
    let cols = w.cols();
    u.iter()
        .enumerate()
        .map(|(i, &ui)| ui * w.data()[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

/// Output of [`spectral_norm`].
#[derive(Debug, Clone)]
pub struct SpectralNormed<T> {
    pub weight: Tensor<T>,
    pub sigma: T,
    pub state: SpectralState<T>,
    /// `W` was (numerically) zero: the estimate was clamped to the floor.
    pub clamped: bool,
}

/// `W / σ̂` with `σ̂` from `n_iters` power iterations continuing from `state`.
pub fn spectral_norm<T: Scalar>(w: &Tensor<T>, n_iters: usize, state: &SpectralState<T>) -> SpectralNormed<T> {
    assert!(n_iters >= 1, "power iteration needs at least one round");
    let mut state = state.clone();
    state.iterate(w, n_iters);
    let inv = T::one() / state.sigma;
    SpectralNormed {
        weight: w.map(|x| x * inv),
        sigma: state.sigma,
        clamped: state.clamped,
        state,
    }
}

/// In-graph `W / (uᵀWv)` with `u`, `v` held fixed, so gradients flow
/// through the estimate's dependence on `W`.
pub fn spectral_normalize_var<'g, T: Scalar>(w: Var<'g, T>, state: &SpectralState<T>) -> Result<Var<'g, T>> {
    let g = w.graph();
    if state.clamped {
        return w.scale(1.0 / SIGMA_EPS);
    }
    let sigma = w.mul(g.constant(state.outer())?)?.sum()?;
    if !(sigma.item() > T::lit(SIGMA_EPS)) {
        return w.scale(1.0 / SIGMA_EPS);
    }
    w.mul_scalar_var(sigma.powf(-1.0)?)
}
