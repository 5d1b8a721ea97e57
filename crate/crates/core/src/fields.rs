//! Latent Gaussian fields.
//!
//! Spatial fields are zero-mean GMRFs with Matérn (ν = 1) covariance,
//! discretized through the SPDE approximation on the padded lattice:
//!
//! `Q = τ²·(κ⁴·C + 2κ²·G + G·C⁻¹·G)`
//!
//! with `C` the lumped (diagonal) mass matrix and `G` the 5-point
//! stiffness matrix. The spatio-temporal field follows a first-order
//! autoregression in time, `W(·,t) = δ·W(·,t−1) + ξ(·,t)`, with
//! stationary initialization `W(·,t₁) ~ N(0, Q_ξ⁻¹/(1−δ²))`.
//!
//! Working (internal) parameters are `(log κ, log τ, δ*)`; the
//! interpretable scale is `(φ, σ, δ)` with `φ = √(8ν)/κ`,
//! `σ = 1/(κ·τ·√(4π))` and `δ = 2·exp(δ*)/(1+exp(δ*)) − 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::rng::rng_from_seed;
use crate::sparse::{nd_lattice_block_perm, Factor, Pattern, PatternBuilder, Symbolic};

/// Matérn hyperparameters on the optimization scale. Smoothness is fixed
/// at ν = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternInternal {
    pub log_kappa: f64,
    pub log_tau: f64,
}

/// Matérn hyperparameters on the interpretable scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternInterpretable {
    /// Spatial range (distance at which correlation drops to ≈ 0.14).
    pub phi: f64,
    /// Marginal standard deviation.
    pub sigma: f64,
}

const SQRT_8: f64 = 2.828_427_124_746_190_3;

impl MaternInternal {
    pub fn new(log_kappa: f64, log_tau: f64) -> Self {
        Self { log_kappa, log_tau }
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// `(κ, τ) → (φ, σ)` with ν = 1.
pub fn to_interpretable(p: &MaternInternal) -> MaternInterpretable {
    let kappa = p.kappa();
    let tau = p.tau();
    MaternInterpretable {
        phi: SQRT_8 / kappa,
        sigma: 1.0 / (kappa * tau * (4.0 * PI).sqrt()),
    }
}

/// `(φ, σ) → (κ, τ)`, the inverse of [`to_interpretable`].
pub fn to_internal(p: &MaternInterpretable) -> MaternInternal {
    let kappa = SQRT_8 / p.phi;
    let tau = 1.0 / (kappa * p.sigma * (4.0 * PI).sqrt());
    MaternInternal {
        log_kappa: kappa.ln(),
        log_tau: tau.ln(),
    }
}

/// Temporal correlation on its unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalCorr {
    pub delta_star: f64,
}

impl TemporalCorr {
    pub fn from_star(delta_star: f64) -> Self {
        Self { delta_star }
    }

    pub fn from_delta(delta: f64) -> Result<Self> {
        if !(delta.abs() < 1.0) {
            return Err(Error::invalid(format!("|delta| must be < 1, got {delta}")));
        }
        Ok(Self {
            delta_star: ((1.0 + delta) / (1.0 - delta)).ln(),
        })
    }

    pub fn delta(&self) -> f64 {
        delta_from_star(self.delta_star)
    }
}

/// `δ = 2·exp(δ*)/(1+exp(δ*)) − 1`, evaluated without overflow. The
/// result is kept strictly inside (−1, 1) so that `log(1−δ²)` stays
/// finite even for saturating inputs.
pub fn delta_from_star(delta_star: f64) -> f64 {
    // 2·sigmoid(δ*) − 1, stable on both tails.
    let raw = if delta_star >= 0.0 {
        let e = (-delta_star).exp();
        (1.0 - e) / (1.0 + e)
    } else {
        let e = delta_star.exp();
        (e - 1.0) / (e + 1.0)
    };
    const CAP: f64 = 1.0 - f64::EPSILON;
    raw.clamp(-CAP, CAP)
}

/// Concrete latent-field values on the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Spatial field of the biomass predictor, one value per node.
    pub u: Vec<f64>,
    /// Spatial field of the presence predictor, one value per node.
    pub v: Vec<f64>,
    /// Spatio-temporal field, `w[t * n_nodes + node]`.
    pub w: Vec<f64>,
    pub n_times: usize,
}

impl LatentState {
    pub fn zeros(n_nodes: usize, n_times: usize) -> Self {
        LatentState {
            u: vec![0.0; n_nodes],
            v: vec![0.0; n_nodes],
            w: vec![0.0; n_nodes * n_times],
            n_times,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.u.len()
    }

    pub fn w_at(&self, node: usize, t: usize) -> f64 {
        self.w[t * self.n_nodes() + node]
    }

    pub fn w_column(&self, t: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.w[t * n..(t + 1) * n]
    }

    pub fn validate(&self, grid: &SpatialGrid, n_times: usize) -> Result<()> {
        let n = grid.n_nodes();
        if self.u.len() != n || self.v.len() != n || self.n_times != n_times || self.w.len() != n * n_times {
            return Err(Error::invalid(format!(
                "latent state dimensions ({}, {}, {}x{}) do not match grid/time ({n} nodes, {n_times} times)",
                self.u.len(),
                self.v.len(),
                self.w.len() / self.n_times.max(1),
                self.n_times,
            )));
        }
        if self.u.iter().chain(&self.v).chain(&self.w).any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent state contains non-finite values"));
        }
        Ok(())
    }
}

/// Grid-dependent pieces of the SPDE precision: mass, stiffness and
/// `G·C⁻¹·G` values on a shared pattern, plus the symbolic factorization.
/// Built once per grid and reused for every `(κ, τ)`.
pub struct SpdeStructure {
    pattern: Arc<Pattern>,
    symbolic: Symbolic,
    c_slots: Vec<f64>,
    g_slots: Vec<f64>,
    gcg_slots: Vec<f64>,
    n_nodes: usize,
}

impl SpdeStructure {
    pub fn new(grid: &SpatialGrid) -> Self {
        let nxt = grid.nx_total();
        let nyt = grid.ny_total();
        let n = grid.n_nodes();

        // 1D stiffness factors: K[i,i±1] = -1/h, K[i,i] = 2/h (1/h at ends);
        // 1D lumped mass: h (h/2 at ends). The 2D operators are the tensor
        // products K_x ⊗ M_y + M_x ⊗ K_y (stiffness) and M_x ⊗ M_y (mass).
        let kx_diag = |ix: usize| if ix == 0 || ix == nxt - 1 { 1.0 / grid.hx } else { 2.0 / grid.hx };
        let ky_diag = |iy: usize| if iy == 0 || iy == nyt - 1 { 1.0 / grid.hy } else { 2.0 / grid.hy };
        let mx = |ix: usize| if ix == 0 || ix == nxt - 1 { grid.hx / 2.0 } else { grid.hx };
        let my = |iy: usize| if iy == 0 || iy == nyt - 1 { grid.hy / 2.0 } else { grid.hy };

        // G rows: diagonal plus the 4 lattice neighbors.
        let mut g_rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); n];
        for iy in 0..nyt {
            for ix in 0..nxt {
                let i = grid.node_at(ix, iy);
                g_rows[i].push((i, kx_diag(ix) * my(iy) + mx(ix) * ky_diag(iy)));
                if ix > 0 {
                    g_rows[i].push((i - 1, -my(iy) / grid.hx));
                }
                if ix + 1 < nxt {
                    g_rows[i].push((i + 1, -my(iy) / grid.hx));
                }
                if iy > 0 {
                    g_rows[i].push((i - nxt, -mx(ix) / grid.hy));
                }
                if iy + 1 < nyt {
                    g_rows[i].push((i + nxt, -mx(ix) / grid.hy));
                }
            }
        }

        let mut builder = PatternBuilder::new(n);
        for row in &g_rows {
            for a in 0..row.len() {
                for b in a..row.len() {
                    builder.add(row[a].0, row[b].0);
                }
            }
        }
        let perm = nd_lattice_block_perm(nxt, nyt, 1, 0);
        let pattern = Arc::new(builder.finalize(Some(perm)));

        let mut c_slots = pattern.zero_values();
        let mut g_slots = pattern.zero_values();
        let mut gcg_slots = pattern.zero_values();
        for i in 0..n {
            c_slots[pattern.slot(i, i)] = grid.mass_weight(i);
        }
        for (i, row) in g_rows.iter().enumerate() {
            for &(j, v) in row {
                if i <= j {
                    g_slots[pattern.slot(i, j)] = v;
                }
            }
        }
        // G·C⁻¹·G via the shared neighbors of each node k.
        for (k, row) in g_rows.iter().enumerate() {
            let inv_c = 1.0 / grid.mass_weight(k);
            for a in 0..row.len() {
                for b in a..row.len() {
                    let (ia, va) = row[a];
                    let (ib, vb) = row[b];
                    gcg_slots[pattern.slot(ia, ib)] += va * vb * inv_c;
                }
            }
        }

        let symbolic = Symbolic::analyze(pattern.clone());
        SpdeStructure {
            pattern,
            symbolic,
            c_slots,
            g_slots,
            gcg_slots,
            n_nodes: n,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    /// Assembles `Q(κ, τ)` on the shared structure.
    pub fn precision(self: &Arc<Self>, p: &MaternInternal) -> Precision {
        let kappa2 = (2.0 * p.log_kappa).exp();
        let kappa4 = kappa2 * kappa2;
        let tau2 = (2.0 * p.log_tau).exp();
        let values: Vec<f64> = self
            .c_slots
            .iter()
            .zip(&self.g_slots)
            .zip(&self.gcg_slots)
            .map(|((&c, &g), &gcg)| tau2 * (kappa4 * c + 2.0 * kappa2 * g + gcg))
            .collect();
        Precision {
            structure: self.clone(),
            values,
        }
    }

    /// `∂Q/∂log κ = τ²·(4κ⁴·C + 4κ²·G)`, slot-aligned with the pattern.
    /// (`∂Q/∂log τ` is simply `2·Q`.)
    pub fn dprecision_dlog_kappa(&self, p: &MaternInternal) -> Vec<f64> {
        let kappa2 = (2.0 * p.log_kappa).exp();
        let kappa4 = kappa2 * kappa2;
        let tau2 = (2.0 * p.log_tau).exp();
        self.c_slots
            .iter()
            .zip(&self.g_slots)
            .map(|(&c, &g)| tau2 * (4.0 * kappa4 * c + 4.0 * kappa2 * g))
            .collect()
    }
}

/// A concrete SPDE precision matrix `Q`, sharing its grid structure.
pub struct Precision {
    structure: Arc<SpdeStructure>,
    pub values: Vec<f64>,
}

impl Precision {
    pub fn n(&self) -> usize {
        self.structure.n_nodes
    }

    pub fn pattern(&self) -> &Pattern {
        &self.structure.pattern
    }

    pub fn structure(&self) -> &Arc<SpdeStructure> {
        &self.structure
    }

    /// `fᵀ Q f`.
    pub fn quadratic_form(&self, f: &[f64]) -> f64 {
        self.structure.pattern.quadratic_form(&self.values, f)
    }

    /// Numeric factorization (symbolic analysis is cached per grid).
    pub fn factor(&self) -> Result<Factor<'_>> {
        self.structure.symbolic.factor(&self.values, 0.0).map_err(|e| {
            Error::Conditioning(format!(
                "SPDE precision factorization failed ({e}); check (kappa, tau)"
            ))
        })
    }
}

/// Builds the sparse SPDE precision for one field on the padded lattice.
pub fn spde_precision(grid: &SpatialGrid, p: &MaternInternal) -> Precision {
    Arc::new(SpdeStructure::new(grid)).precision(p)
}

/// Draws one zero-mean GMRF realization with precision `Q`.
pub fn sample_gmrf(q: &Precision, rng_seed: u64) -> Result<Vec<f64>> {
    let factor = q.factor()?;
    let mut rng = rng_from_seed(rng_seed);
    Ok(draw_zero_mean(&factor, &mut rng))
}

/// One `N(0, Q⁻¹)` draw from an existing factor and generator.
pub fn draw_zero_mean<R: Rng>(factor: &Factor<'_>, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.n()).map(|_| rng.sample(StandardNormal)).collect();
    factor.sample_zero_mean(&z)
}

/// Samples the AR(1) spatio-temporal field: stationary start
/// `W(·,t₁) ~ N(0, Q_ξ⁻¹/(1−δ²))`, then `W(·,t) = δ·W(·,t−1) + ξ_t`.
/// Layout of the result: `w[t * n + node]`.
pub fn sample_ar1_spatiotemporal(q_xi: &Precision, delta: f64, n_times: usize, rng_seed: u64) -> Result<Vec<f64>> {
    if !(delta.abs() < 1.0) {
        return Err(Error::invalid(format!("|delta| must be < 1, got {delta}")));
    }
    if n_times == 0 {
        return Err(Error::invalid("n_times must be at least 1"));
    }
    let factor = q_xi.factor()?;
    let mut rng = rng_from_seed(rng_seed);
    let n = q_xi.n();
    let mut w = vec![0.0; n * n_times];

    let scale = 1.0 / (1.0 - delta * delta).sqrt();
    let first = draw_zero_mean(&factor, &mut rng);
    for (j, v) in first.into_iter().enumerate() {
        w[j] = scale * v;
    }
    for t in 1..n_times {
        let innov = draw_zero_mean(&factor, &mut rng);
        for j in 0..n {
            w[t * n + j] = delta * w[(t - 1) * n + j] + innov[j];
        }
    }
    Ok(w)
}
