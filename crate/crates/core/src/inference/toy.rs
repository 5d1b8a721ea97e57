//! Linear-Gaussian reference model for validating the Laplace machinery.
//!
//! `x ~ N(0, Q⁻¹)`, `y = A x + ε` with `ε ~ N(0, σ²I)`. The latent
//! posterior is Gaussian, so the Laplace-approximated marginal is exact
//! and the inner mode coincides with the generalized-least-squares
//! solution — both available in closed form for tests.

use std::sync::Arc;

use crate::error::Result;
use crate::fields::Precision;
use crate::grid::Projection;
use crate::sparse::{AnyFactor, Pattern, PatternBuilder, Symbolic};

use super::latent::LatentModel;

pub struct LinearGaussianModel {
    q: Precision,
    projection: Projection,
    y: Vec<f64>,
    noise_var: f64,
    pattern: Arc<Pattern>,
    symbolic: Symbolic,
    /// Hessian slots per observation footprint pair.
    row_pair_slots: Vec<Vec<usize>>,
    q_slots: Vec<usize>,
    const_nll: f64,
}

const LN_2PI: f64 = 1.837_877_066_409_345_6;

impl LinearGaussianModel {
    pub fn new(q: Precision, projection: Projection, y: Vec<f64>, noise_var: f64) -> Result<Self> {
        let n = q.n();
        let mut builder = PatternBuilder::new(n);
        let q_pattern = q.pattern();
        for s in 0..q_pattern.nnz() {
            let (i, j) = q_pattern.entry(s);
            builder.add(i, j);
        }
        for r in 0..projection.n_rows() {
            let foot: Vec<usize> = projection.row(r).map(|(node, _)| node).collect();
            for a in 0..foot.len() {
                for b in a..foot.len() {
                    builder.add(foot[a], foot[b]);
                }
            }
        }
        let pattern = Arc::new(builder.finalize(None));
        let q_slots: Vec<usize> = (0..q_pattern.nnz())
            .map(|s| {
                let (i, j) = q_pattern.entry(s);
                pattern.slot(i, j)
            })
            .collect();
        let row_pair_slots: Vec<Vec<usize>> = (0..projection.n_rows())
            .map(|r| {
                let foot: Vec<usize> = projection.row(r).map(|(node, _)| node).collect();
                let mut slots = Vec::new();
                for a in 0..foot.len() {
                    for b in a..foot.len() {
                        slots.push(pattern.slot(foot[a], foot[b]));
                    }
                }
                slots
            })
            .collect();

        let log_det_q = q.factor()?.log_det();
        let m = y.len() as f64;
        let const_nll = 0.5 * n as f64 * LN_2PI - 0.5 * log_det_q
            + 0.5 * m * LN_2PI
            + 0.5 * m * noise_var.ln();

        let symbolic = Symbolic::analyze(pattern.clone());
        Ok(LinearGaussianModel {
            q,
            projection,
            y,
            noise_var,
            pattern,
            symbolic,
            row_pair_slots,
            q_slots,
            const_nll,
        })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        (0..self.y.len())
            .map(|r| self.y[r] - self.projection.dot_row(r, x))
            .collect()
    }
}

impl LatentModel for LinearGaussianModel {
    fn n_latent(&self) -> usize {
        self.q.n()
    }

    fn hessian_len(&self) -> usize {
        self.pattern.nnz()
    }

    fn factorize(&self, hess: &[f64], ridge: f64) -> Result<AnyFactor<'_>> {
        Ok(AnyFactor::Scalar(self.symbolic.factor(hess, ridge)?))
    }

    fn nll(&self, x: &[f64]) -> Result<f64> {
        let quad = self.q.quadratic_form(x);
        let rss: f64 = self.residuals(x).iter().map(|r| r * r).sum();
        Ok(self.const_nll + 0.5 * quad + 0.5 * rss / self.noise_var)
    }

    fn eval(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        hess.fill(0.0);
        let n = self.n_latent();
        let mut qx = vec![0.0; n];
        self.q.pattern().matvec(&self.q.values, x, &mut qx);
        for j in 0..n {
            grad[j] += qx[j];
        }
        for (s, &slot) in self.q_slots.iter().enumerate() {
            hess[slot] += self.q.values[s];
        }
        let residuals = self.residuals(x);
        for (r, &res) in residuals.iter().enumerate() {
            let foot: Vec<(usize, f64)> = self.projection.row(r).collect();
            for &(node, w) in &foot {
                grad[node] -= w * res / self.noise_var;
            }
            let mut k = 0;
            for a in 0..foot.len() {
                for b in a..foot.len() {
                    hess[self.row_pair_slots[r][k]] += foot[a].1 * foot[b].1 / self.noise_var;
                    k += 1;
                }
            }
        }
        let quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
        let rss: f64 = residuals.iter().map(|r| r * r).sum();
        Ok(self.const_nll + 0.5 * quad + 0.5 * rss / self.noise_var)
    }
}
