//! Power-iteration estimate of the largest singular value of a kernel.

use rand_chacha::ChaCha8Rng;

use super::params::unit_vector;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-12;

/// Row-major `rows x cols` view of a kernel (`out_channels x rest`).
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if rows == 0 || rows * cols != data.len() {
            return Err(Error::shape(format!("{rows}x{cols} view over {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn of(kernel: &'a Tensor) -> Self {
        let rows = kernel.shape[0];
        Self {
            rows,
            cols: kernel.numel() / rows,
            data: &kernel.data,
        }
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.data[r * self.cols..(r + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mul_t(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += ur * w;
            }
        }
        out
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Persistent left-singular-vector estimate of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    u: Vec<f64>,
    pub iterations_per_step: usize,
}

impl SpectralState {
    pub fn new(rng: &mut ChaCha8Rng, rows: usize) -> Self {
        Self::from_u(unit_vector(rng, rows))
    }

    pub fn from_u(mut u: Vec<f64>) -> Self {
        normalize(&mut u);
        Self {
            u,
            iterations_per_step: 1,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// One power iteration; returns `(v, σ̂ = uᵀWv)`.
    pub fn step(&mut self, m: &MatrixView) -> (Vec<f64>, f64) {
        let mut v = m.mul_t(&self.u);
        normalize(&mut v);
        let mut u = m.mul(&v);
        if normalize(&mut u) > 0.0 {
            self.u = u;
        }
        let wv = m.mul(&v);
        let sigma = self.u.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>();
        (v, sigma)
    }
}

/// Runs `state.iterations_per_step` power iterations and returns `W / σ̂`.
pub fn spectral_normalize(weight: &MatrixView, state: &mut SpectralState) -> Result<Vec<f64>> {
    if state.u.len() != weight.rows {
        return Err(Error::shape(format!(
            "u has {} entries, weight has {} rows",
            state.u.len(),
            weight.rows
        )));
    }
    let mut sigma = 0.0;
    for _ in 0..state.iterations_per_step.max(1) {
        sigma = state.step(weight).1;
    }
    let sigma = sigma.max(SIGMA_FLOOR);
    Ok(weight.data.iter().map(|w| w / sigma).collect())
}
