//! Component log-likelihoods and the joint objective.
//!
//! The joint likelihood factorizes as
//!
//! `L(Θ) = L(ζ, υ; y) · L(π; z) · L(λ; x) · L(W) · L(U) · L(V) [· L(γ_c)]`
//!
//! - positive biomass: per-observation Gamma terms with `a_i = ζ_i²/υ²`,
//!   `b_i = υ²/ζ_i`;
//! - presence/absence: Bernoulli terms over every row of both sources;
//! - preferential locations: per-time conditional IPP terms
//!   `Σ log λ(x_i, t) − ∫ λ(s, t) ds`, the integral by midpoint quadrature
//!   over interior nodes (λ-independent constants are dropped);
//! - latent fields: the AR(1)-in-time Gaussian density for `W` and plain
//!   GMRF densities for `U` and `V`;
//! - catchability random effects: i.i.d. Gaussian density when enabled.
//!
//! Survey (FID) locations contribute no point-process term. Every
//! component is also exposed on its own so the additivity of the total
//! can be audited exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{build_design, CovariateSpec, DesignMatrix, ObservationSet, Source};
use crate::error::{Error, Result};
use crate::fields::{LatentState, MaternInternal, Precision, SpdeStructure, TemporalCorr};
use crate::grid::{project, Projection, SpatialGrid, TimeAxis};
use crate::hurdle::{presence_prob, Catchability, FixedEffects, GammaDispersion};
use crate::pointprocess::PreferentialParams;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Every model parameter of the joint likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    pub fixed: FixedEffects,
    pub dispersion: GammaDispersion,
    pub catchability: Catchability,
    pub preferential: PreferentialParams,
    pub matern_u: MaternInternal,
    pub matern_v: MaternInternal,
    pub matern_w: MaternInternal,
    pub temporal: TemporalCorr,
}

impl JointParams {
    /// Neutral parameters sized for the given design widths and T.
    pub fn neutral(p_presence: usize, p_biomass: usize, n_times: usize) -> Self {
        JointParams {
            fixed: FixedEffects::zeros(p_presence, p_biomass),
            dispersion: GammaDispersion { log_upsilon: 0.0 },
            catchability: Catchability::disabled(),
            preferential: PreferentialParams::zeros(n_times),
            matern_u: MaternInternal::new(0.0, 0.0),
            matern_v: MaternInternal::new(0.0, 0.0),
            matern_w: MaternInternal::new(0.0, 0.0),
            temporal: TemporalCorr::from_star(0.0),
        }
    }
}

/// Observations with everything the likelihood needs precomputed: design
/// matrices aligned with rows, the projection onto grid nodes, resolved
/// time indices and the per-time FDD row groups.
pub struct ModelData {
    pub obs: ObservationSet,
    pub t_idx: Vec<usize>,
    pub design_presence: DesignMatrix,
    pub design_biomass: DesignMatrix,
    pub projection: Projection,
    pub fdd_rows_by_time: Vec<Vec<usize>>,
    /// Attribute design row per commercial vessel (catchability fixed terms).
    pub vessel_attrs: Option<BTreeMap<usize, Vec<f64>>>,
    /// Point-process term active (dropped in survey-only fits).
    pub include_ipp: bool,
}

impl ModelData {
    pub fn new(
        obs: ObservationSet,
        grid: &SpatialGrid,
        time_axis: &TimeAxis,
        presence_specs: &[CovariateSpec],
        biomass_specs: &[CovariateSpec],
    ) -> Result<Self> {
        let t_idx: Vec<usize> = obs
            .t_label
            .iter()
            .map(|l| time_axis.index_of(l))
            .collect::<Result<_>>()?;
        let design_presence = build_design(&obs, presence_specs)?;
        let design_biomass = build_design(&obs, biomass_specs)?;
        let locations: Vec<(f64, f64)> = obs.x.iter().cloned().zip(obs.y.iter().cloned()).collect();
        let projection = project(grid, &locations)?;
        let mut fdd_rows_by_time = vec![Vec::new(); time_axis.len()];
        for r in 0..obs.n_rows() {
            if obs.source[r] == Source::Fdd {
                fdd_rows_by_time[t_idx[r]].push(r);
            }
        }
        Ok(ModelData {
            obs,
            t_idx,
            design_presence,
            design_biomass,
            projection,
            fdd_rows_by_time,
            vessel_attrs: None,
            include_ipp: true,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.obs.n_rows()
    }

    pub fn vessel_attr_row(&self, vessel: usize) -> Option<&[f64]> {
        self.vessel_attrs.as_ref().and_then(|m| m.get(&vessel)).map(|v| v.as_slice())
    }

    /// Presence-predictor value of row `r` at the given latent state.
    pub fn presence_eta(&self, params: &JointParams, latent: &LatentState, r: usize) -> f64 {
        let t = self.t_idx[r];
        params.fixed.alpha_prime
            + self.design_presence.dot(r, &params.fixed.theta_prime)
            + self.projection.dot_row(r, &latent.v)
            + self.projection.dot_row(r, latent.w_column(t))
    }

    /// `log ζ` of row `r` (biomass predictor plus the vessel's log k).
    pub fn log_zeta(&self, params: &JointParams, latent: &LatentState, r: usize) -> Result<f64> {
        let t = self.t_idx[r];
        let log_k = params
            .catchability
            .log_k(self.obs.vessel[r], self.vessel_attr_row(self.obs.vessel[r]))?;
        Ok(log_k
            + params.fixed.alpha
            + self.design_biomass.dot(r, &params.fixed.theta)
            + self.projection.dot_row(r, &latent.u)
            + self.projection.dot_row(r, latent.w_column(t)))
    }
}

/// Gamma log-likelihood of positive biomass values with per-observation
/// means: `Σ (a_i−1)·log y_i − y_i/b_i − a_i·log b_i − log Γ(a_i)`.
pub fn ll_gamma(y: &[f64], zeta: &[f64], upsilon: f64) -> Result<f64> {
    if y.len() != zeta.len() {
        return Err(Error::invalid("y and zeta lengths differ"));
    }
    if !(upsilon > 0.0) {
        return Err(Error::invalid(format!("upsilon must be positive, got {upsilon}")));
    }
    let ups2 = upsilon * upsilon;
    let mut total = 0.0;
    for (i, (&yi, &zi)) in y.iter().zip(zeta).enumerate() {
        if !(yi > 0.0) {
            return Err(Error::invalid(format!(
                "y[{i}] = {yi}; absences must be filtered before the Gamma term"
            )));
        }
        if !(zi > 0.0) {
            return Err(Error::invalid(format!("zeta[{i}] = {zi} must be positive")));
        }
        let a = zi * zi / ups2;
        let log_b = ups2.ln() - zi.ln();
        total += (a - 1.0) * yi.ln() - yi * zi / ups2 - a * log_b - ln_gamma(a);
    }
    Ok(total)
}

/// Bernoulli log-likelihood `Σ z_i·log π_i + (1−z_i)·log(1−π_i)`.
pub fn ll_bernoulli(z: &[u8], pi: &[f64]) -> f64 {
    debug_assert_eq!(z.len(), pi.len());
    let mut total = 0.0;
    for (&zi, &p) in z.iter().zip(pi) {
        total += if zi == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total
}

/// Conditional IPP log-likelihood at one time:
/// `Σ log λ(x_i) − Σ_nodes λ·cell_area` (interior midpoint quadrature;
/// λ-independent constants dropped).
pub fn ll_ipp(locations: &[usize], lambda: &[f64], grid: &SpatialGrid) -> f64 {
    let points: f64 = locations.iter().map(|&node| lambda[node].ln()).sum();
    let integral: f64 = grid
        .interior_nodes()
        .iter()
        .map(|&node| lambda[node] * grid.quad_weight(node))
        .sum();
    points - integral
}

/// Zero-mean Gaussian log-density given the quadratic form and
/// log-determinant of the precision.
pub fn gaussian_loglik(quad: f64, log_det_precision: f64, n: usize) -> f64 {
    -0.5 * n as f64 * LN_2PI + 0.5 * log_det_precision - 0.5 * quad
}

/// GMRF log-density `−(N/2)·log 2π + ½·log det Q − ½·fᵀQf`.
pub fn ll_gmrf(f: &[f64], q: &Precision) -> Result<f64> {
    if f.len() != q.n() {
        return Err(Error::invalid("field length does not match the precision dimension"));
    }
    let factor = q.factor()?;
    Ok(gaussian_loglik(q.quadratic_form(f), factor.log_det(), q.n()))
}

/// AR(1)-in-time Gaussian log-density of the spatio-temporal field:
/// stationary start with precision `(1−δ²)·Q_ξ`, then innovations with
/// precision `Q_ξ`. `w` is stored time-major (`w[t·N + node]`).
pub fn ll_ar1_field(w: &[f64], q_xi: &Precision, delta: f64) -> Result<f64> {
    let n = q_xi.n();
    if w.is_empty() || w.len() % n != 0 {
        return Err(Error::invalid("W length must be a positive multiple of the node count"));
    }
    if !(delta.abs() < 1.0) {
        return Err(Error::invalid(format!("|delta| must be < 1, got {delta}")));
    }
    let n_times = w.len() / n;
    let factor = q_xi.factor()?;
    let log_det = factor.log_det();
    let one_minus_d2 = 1.0 - delta * delta;

    let mut quad = one_minus_d2 * q_xi.quadratic_form(&w[0..n]);
    let mut innovation = vec![0.0; n];
    for t in 1..n_times {
        for j in 0..n {
            innovation[j] = w[t * n + j] - delta * w[(t - 1) * n + j];
        }
        quad += q_xi.quadratic_form(&innovation);
    }

    Ok(-0.5 * (n * n_times) as f64 * LN_2PI
        + 0.5 * n as f64 * one_minus_d2.ln()
        + 0.5 * n_times as f64 * log_det
        - 0.5 * quad)
}

/// i.i.d. zero-mean Gaussian log-density for the catchability random
/// effects.
pub fn ll_iid_gaussian(values: &[f64], sigma: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let quad: f64 = values.iter().map(|v| v * v).sum::<f64>() / (sigma * sigma);
    -0.5 * n * LN_2PI - n * sigma.ln() - 0.5 * quad
}

/// Per-component log-likelihood values of one joint evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentLogLik {
    pub gamma: f64,
    pub bernoulli: f64,
    pub ipp: f64,
    pub field_w: f64,
    pub field_u: f64,
    pub field_v: f64,
    pub catch_re: f64,
}

impl ComponentLogLik {
    pub fn total(&self) -> f64 {
        self.gamma + self.bernoulli + self.ipp + self.field_w + self.field_u + self.field_v + self.catch_re
    }
}

/// Negative joint log-likelihood at fixed parameters and latent state.
pub fn joint_nll(
    params: &JointParams,
    latent: &LatentState,
    data: &ModelData,
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
) -> Result<f64> {
    Ok(-joint_components(params, latent, data, grid, time_axis)?.total())
}

/// Component breakdown of the joint log-likelihood; the negative of the
/// summed components is the joint NLL (exact bookkeeping identity).
pub fn joint_components(
    params: &JointParams,
    latent: &LatentState,
    data: &ModelData,
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
) -> Result<ComponentLogLik> {
    let structure = Arc::new(SpdeStructure::new(grid));
    joint_components_with(params, latent, data, grid, time_axis, &structure)
}

/// As [`joint_components`], reusing a prebuilt SPDE structure.
pub fn joint_components_with(
    params: &JointParams,
    latent: &LatentState,
    data: &ModelData,
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
    structure: &Arc<SpdeStructure>,
) -> Result<ComponentLogLik> {
    let n_times = time_axis.len();
    latent.validate(grid, n_times)?;
    params.preferential.validate(n_times).map_err(|e| e.in_component("ipp"))?;

    // Observation terms.
    let mut z_all = Vec::with_capacity(data.n_rows());
    let mut pi_all = Vec::with_capacity(data.n_rows());
    let mut y_pos = Vec::new();
    let mut zeta_pos = Vec::new();
    for r in 0..data.n_rows() {
        let eta = data.presence_eta(params, latent, r);
        pi_all.push(presence_prob(eta));
        z_all.push(data.obs.z[r]);
        if data.obs.z[r] == 1 {
            y_pos.push(data.obs.y_val[r]);
            zeta_pos.push(
                data.log_zeta(params, latent, r)
                    .map_err(|e| e.in_component("gamma"))?
                    .exp(),
            );
        }
    }
    let gamma = ll_gamma(&y_pos, &zeta_pos, params.dispersion.upsilon())
        .map_err(|e| e.in_component("gamma"))?;
    let bernoulli = ll_bernoulli(&z_all, &pi_all);

    // Point-process terms per time; the point part evaluates log λ at the
    // observation footprint so off-node locations interpolate the fields.
    let mut ipp = 0.0;
    if data.include_ipp {
        for t in 0..n_times {
            let alpha = params.preferential.alpha_pp[t];
            let beta_prime = params.preferential.beta_prime[t];
            let beta = params.preferential.beta[t];
            for &r in &data.fdd_rows_by_time[t] {
                ipp += alpha
                    + beta_prime * data.projection.dot_row(r, &latent.v)
                    + beta * data.projection.dot_row(r, &latent.u);
            }
            for &node in grid.interior_nodes() {
                let log_lambda = alpha + beta_prime * latent.v[node] + beta * latent.u[node];
                ipp -= log_lambda.exp() * grid.quad_weight(node);
            }
        }
    }

    // Latent-field densities.
    let q_u = structure.precision(&params.matern_u);
    let q_v = structure.precision(&params.matern_v);
    let q_xi = structure.precision(&params.matern_w);
    let field_u = ll_gmrf(&latent.u, &q_u).map_err(|e| e.in_component("field_u"))?;
    let field_v = ll_gmrf(&latent.v, &q_v).map_err(|e| e.in_component("field_v"))?;
    let field_w = ll_ar1_field(&latent.w, &q_xi, params.temporal.delta())
        .map_err(|e| e.in_component("field_w"))?;

    let catch_re = if params.catchability.n_commercial() > 0 {
        ll_iid_gaussian(&params.catchability.gamma_c, params.catchability.sigma_gamma())
    } else {
        0.0
    };

    Ok(ComponentLogLik {
        gamma,
        bernoulli,
        ipp,
        field_w,
        field_u,
        field_v,
        catch_re,
    })
}

/// Small simulated dataset at grid nodes, shared by the in-crate tests.
#[cfg(test)]
pub(crate) fn simulate_test_replicate(
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
    beta: f64,
    beta_prime: f64,
    n_per_source: usize,
    seed: u64,
) -> (JointParams, LatentState, ModelData) {
    use crate::fields::{sample_ar1_spatiotemporal, sample_gmrf, to_internal, MaternInterpretable};
    use crate::hurdle::simulate_observations;
    use crate::pointprocess::{intensity_surface, sample_fdd, sample_fid, FidMode};

    let structure = std::sync::Arc::new(SpdeStructure::new(grid));
    let q_u = structure.precision(&to_internal(&MaternInterpretable { phi: 0.3, sigma: 1.0 }));
    let q_v = structure.precision(&to_internal(&MaternInterpretable { phi: 0.25, sigma: 0.9 }));
    let n_times = time_axis.len();
    let u = sample_gmrf(&q_u, seed + 1).unwrap();
    let v = sample_gmrf(&q_v, seed + 2).unwrap();
    let w = sample_ar1_spatiotemporal(&q_u, 0.8, n_times, seed + 3).unwrap();
    let latent = LatentState { u: u.clone(), v: v.clone(), w, n_times };

    let mut params = JointParams::neutral(0, 0, n_times);
    params.matern_u = to_internal(&MaternInterpretable { phi: 0.3, sigma: 1.0 });
    params.matern_v = to_internal(&MaternInterpretable { phi: 0.25, sigma: 0.9 });
    params.matern_w = params.matern_u;
    params.temporal = TemporalCorr::from_delta(0.8).unwrap();
    for t in 0..n_times {
        params.preferential.beta[t] = beta;
        params.preferential.beta_prime[t] = beta_prime;
    }

    let mut obs = ObservationSet::default();
    for t in 0..n_times {
        let fid = sample_fid(grid, n_per_source, FidMode::Uniform, seed + 10 + t as u64).unwrap();
        let lambda = intensity_surface(grid, &v, &u, &params.preferential, t);
        let fdd = sample_fdd(grid, &lambda, n_per_source, seed + 20 + t as u64).unwrap();
        let mut locs = fid.clone();
        locs.extend(fdd.iter().map(|&node| grid.node_coord(node)));
        let proj = project(grid, &locs).unwrap();
        let wcol = latent.w_column(t);
        let pi: Vec<f64> = (0..locs.len())
            .map(|r| presence_prob(proj.dot_row(r, &v) + proj.dot_row(r, wcol)))
            .collect();
        let zeta: Vec<f64> = (0..locs.len())
            .map(|r| (proj.dot_row(r, &u) + proj.dot_row(r, wcol)).exp())
            .collect();
        let (z, yv) = simulate_observations(&pi, &zeta, 1.0, seed + 30 + t as u64).unwrap();
        for (r, &(x, y)) in locs.iter().enumerate() {
            let is_fid = r < fid.len();
            obs.source.push(if is_fid { Source::Fid } else { Source::Fdd });
            obs.x.push(x);
            obs.y.push(y);
            obs.t_label.push(time_axis.labels()[t].clone());
            obs.subperiod.push(0);
            obs.vessel.push(if is_fid { 1 } else { 2 });
            obs.z.push(z[r]);
            obs.y_val.push(yv[r]);
        }
    }
    obs.validate(&crate::data::ValidationRules::default()).unwrap();
    let data = ModelData::new(obs, grid, time_axis, &[], &[]).unwrap();
    (params, latent, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_ar1_spatiotemporal, spde_precision, to_internal, MaternInterpretable};
    use std::f64::consts::PI;
    use crate::grid::{build_grid, Rect};
    use crate::pointprocess::sample_fdd;
    use approx::assert_relative_eq;
    use statrs::distribution::{Continuous, Gamma};

    #[test]
    fn gamma_unit_exponential_case() {
        assert_relative_eq!(ll_gamma(&[1.0], &[1.0], 1.0).unwrap(), -1.0, max_relative = 1e-12);
    }

    #[test]
    fn gamma_is_additive() {
        let y = [0.7, 2.3, 1.1, 4.0];
        let zeta = [1.0, 2.0, 1.5, 3.0];
        let whole = ll_gamma(&y, &zeta, 1.3).unwrap();
        let parts = ll_gamma(&y[..2], &zeta[..2], 1.3).unwrap() + ll_gamma(&y[2..], &zeta[2..], 1.3).unwrap();
        assert_relative_eq!(whole, parts, max_relative = 1e-12);
    }

    #[test]
    fn gamma_matches_reference_density() {
        // Mean 2, sd 1 → shape 4, scale 1/2 (rate 2). Reference log-pdf at
        // y = 2 from an independent Gamma implementation.
        let reference = Gamma::new(4.0, 2.0).unwrap().ln_pdf(2.0);
        assert_relative_eq!(reference, -0.939_729_205_308_438_2, max_relative = 1e-12);
        assert_relative_eq!(ll_gamma(&[2.0], &[2.0], 1.0).unwrap(), reference, max_relative = 1e-12);
    }

    #[test]
    fn gamma_rejects_nonpositive_values() {
        assert!(ll_gamma(&[0.0], &[1.0], 1.0).is_err());
        assert!(ll_gamma(&[-1.0], &[1.0], 1.0).is_err());
        assert!(ll_gamma(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn bernoulli_cases() {
        assert_relative_eq!(
            ll_bernoulli(&[1; 10], &[0.5; 10]),
            10.0 * 0.5f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            ll_bernoulli(&[0; 10], &[0.5; 10]),
            10.0 * 0.5f64.ln(),
            max_relative = 1e-12
        );
        assert!(ll_bernoulli(&[1], &[1.0 - 1e-13]).abs() < 1e-12);
        assert_relative_eq!(
            ll_bernoulli(&[1, 0], &[0.8, 0.3]),
            0.8f64.ln() + 0.7f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(0.8f64.ln() + 0.7f64.ln(), -0.579_818_495_252_942, max_relative = 1e-12);
    }

    #[test]
    fn ipp_constant_intensity() {
        let grid = build_grid(12, 12, Rect::unit(), 0.2).unwrap();
        let ones = vec![1.0; grid.n_nodes()];
        // n points at unit intensity on the unit domain: 0 − 1.
        let nodes: Vec<usize> = grid.interior_nodes()[..5].to_vec();
        assert_relative_eq!(ll_ipp(&nodes, &ones, &grid), -1.0, max_relative = 1e-10);

        let c = 3.7f64;
        let lam = vec![c; grid.n_nodes()];
        let expected = nodes.len() as f64 * c.ln() - c;
        assert_relative_eq!(ll_ipp(&nodes, &lam, &grid), expected, max_relative = 1e-10);

        // Node-reordering invariance.
        let mut reversed = nodes.clone();
        reversed.reverse();
        assert_eq!(ll_ipp(&nodes, &lam, &grid), ll_ipp(&reversed, &lam, &grid));
    }

    #[test]
    fn ipp_quadrature_refines() {
        // Smooth intensity: the integral term changes by < 1% from a 30-grid
        // to a 60-grid, and both sit near a fine-grid reference.
        let smooth = |x: f64, y: f64| (0.8 * (2.0 * PI * x).sin() * (PI * y).cos() + 0.3).exp();
        let integral_on = |nx: usize| {
            let grid = build_grid(nx, nx, Rect::unit(), 0.0).unwrap();
            grid.interior_nodes()
                .iter()
                .map(|&node| {
                    let (x, y) = grid.node_coord(node);
                    smooth(x, y) * grid.quad_weight(node)
                })
                .sum::<f64>()
        };
        let coarse = integral_on(30);
        let fine = integral_on(60);
        let reference = integral_on(240);
        assert!((coarse - fine).abs() / fine < 0.01);
        assert!((fine - reference).abs() / reference < 0.01);
    }

    fn dense_gaussian_loglik(q: &nalgebra::DMatrix<f64>, x: &[f64]) -> f64 {
        let chol = q.clone().cholesky().unwrap();
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let xv = nalgebra::DVector::from_column_slice(x);
        let quad = (q * &xv).dot(&xv);
        -0.5 * x.len() as f64 * LN_2PI + 0.5 * log_det - 0.5 * quad
    }

    #[test]
    fn gmrf_density_matches_dense_oracle() {
        let grid = build_grid(5, 5, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.5, sigma: 0.9 }));
        let f: Vec<f64> = (0..q.n()).map(|i| ((i as f64) * 0.41).sin()).collect();
        let dense = q.pattern().to_dense(&q.values);
        assert_relative_eq!(
            ll_gmrf(&f, &q).unwrap(),
            dense_gaussian_loglik(&dense, &f),
            max_relative = 1e-8
        );

        // f = 0: the quadratic term vanishes.
        let zeros = vec![0.0; q.n()];
        let factor = q.factor().unwrap();
        assert_relative_eq!(
            ll_gmrf(&zeros, &q).unwrap(),
            -0.5 * q.n() as f64 * LN_2PI + 0.5 * factor.log_det(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn scalar_gaussian_reduction() {
        // N = 1, Q = 1: the standard normal log-density.
        for f in [-1.3, 0.0, 2.2] {
            assert_relative_eq!(
                gaussian_loglik(f * f, 0.0, 1),
                -0.5 * LN_2PI - 0.5 * f * f,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn ar1_reduces_to_plain_gmrf() {
        let grid = build_grid(4, 4, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.6, sigma: 1.1 }));
        let f: Vec<f64> = (0..q.n()).map(|i| ((i as f64) * 0.7).cos()).collect();
        assert_relative_eq!(
            ll_ar1_field(&f, &q, 0.0).unwrap(),
            ll_gmrf(&f, &q).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn ar1_zero_field_closed_form() {
        let grid = build_grid(4, 4, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.6, sigma: 1.1 }));
        let n = q.n();
        let n_times = 3;
        let delta = 0.8f64;
        let w = vec![0.0; n * n_times];
        let factor = q.factor().unwrap();
        let expected = -0.5 * (n * n_times) as f64 * LN_2PI
            + 0.5 * n as f64 * (1.0 - delta * delta).ln()
            + 0.5 * n_times as f64 * factor.log_det();
        assert_relative_eq!(ll_ar1_field(&w, &q, delta).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn ar1_matches_dense_kronecker_oracle() {
        let grid = build_grid(4, 4, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.5, sigma: 1.0 }));
        let n = q.n();
        let n_times = 3;
        let delta = 0.65f64;
        let w = sample_ar1_spatiotemporal(&q, delta, n_times, 13).unwrap();

        // Joint precision of the AR(1) stack: B ⊗ Q with B the tridiagonal
        // AR(1) precision for unit innovations.
        let mut b = nalgebra::DMatrix::zeros(n_times, n_times);
        for t in 0..n_times {
            b[(t, t)] = if t == 0 || t == n_times - 1 { 1.0 } else { 1.0 + delta * delta };
            if t + 1 < n_times {
                b[(t, t + 1)] = -delta;
                b[(t + 1, t)] = -delta;
            }
        }
        // For T >= 2 the first diagonal entry is (1-δ²) + δ² = 1 already.
        let q_dense = q.pattern().to_dense(&q.values);
        let mut kron = nalgebra::DMatrix::zeros(n * n_times, n * n_times);
        for t1 in 0..n_times {
            for t2 in 0..n_times {
                if b[(t1, t2)] != 0.0 {
                    for i in 0..n {
                        for j in 0..n {
                            kron[(t1 * n + i, t2 * n + j)] = b[(t1, t2)] * q_dense[(i, j)];
                        }
                    }
                }
            }
        }
        assert_relative_eq!(
            ll_ar1_field(&w, &q, delta).unwrap(),
            dense_gaussian_loglik(&kron, &w),
            max_relative = 1e-8
        );
    }

    fn simulate_toy(grid: &SpatialGrid, time_axis: &TimeAxis, beta: f64, beta_prime: f64, seed: u64) -> (JointParams, LatentState, ModelData) {
        simulate_test_replicate(grid, time_axis, beta, beta_prime, 40, seed)
    }

    #[test]
    fn joint_additivity_audit() {
        let grid = build_grid(8, 8, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (params, latent, data) = simulate_toy(&grid, &time_axis, 1.5, 0.5, 40);
        let components = joint_components(&params, &latent, &data, &grid, &time_axis).unwrap();
        let total = joint_nll(&params, &latent, &data, &grid, &time_axis).unwrap();
        let summed = components.gamma
            + components.bernoulli
            + components.ipp
            + components.field_w
            + components.field_u
            + components.field_v
            + components.catch_re;
        assert_relative_eq!(total, -summed, max_relative = 1e-10);
    }

    #[test]
    fn joint_without_fdd_is_hurdle_plus_priors() {
        let grid = build_grid(8, 8, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (mut params, latent, data) = simulate_toy(&grid, &time_axis, 0.0, 0.0, 41);
        params.preferential = PreferentialParams::zeros(2);

        // Drop the FDD rows and the point-process term.
        let fid_obs = data.obs.filter_source(Source::Fid);
        let mut fid_data = ModelData::new(fid_obs, &grid, &time_axis, &[], &[]).unwrap();
        fid_data.include_ipp = false;

        let c = joint_components(&params, &latent, &fid_data, &grid, &time_axis).unwrap();
        assert_eq!(c.ipp, 0.0);
        let nll = joint_nll(&params, &latent, &fid_data, &grid, &time_axis).unwrap();
        assert_relative_eq!(
            nll,
            -(c.gamma + c.bernoulli + c.field_w + c.field_u + c.field_v),
            max_relative = 1e-10
        );
    }

    #[test]
    fn truth_fits_better_than_zero_fields() {
        let grid = build_grid(10, 10, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (params, latent, data) = simulate_toy(&grid, &time_axis, 1.5, 0.0, 42);
        let at_truth = joint_nll(&params, &latent, &data, &grid, &time_axis).unwrap();
        let zeros = LatentState::zeros(grid.n_nodes(), 2);
        let at_zero = joint_nll(&params, &zeros, &data, &grid, &time_axis).unwrap();
        assert!(
            at_truth < at_zero,
            "true fields should fit better: {at_truth} vs {at_zero}"
        );
    }

    #[test]
    fn preferential_draws_prefer_true_intensity() {
        // Average conditional-IPP log-likelihood is higher at the generating
        // intensity than at a flat intensity with the same integral.
        let grid = build_grid(10, 10, Rect::unit(), 0.0).unwrap();
        let n = grid.n_nodes();
        let u: Vec<f64> = (0..n)
            .map(|node| {
                let (x, y) = grid.node_coord(node);
                (2.0 * PI * x).sin() + (PI * y).cos()
            })
            .collect();
        let lambda: Vec<f64> = u.iter().map(|&v| (1.2 * v).exp()).collect();
        let integral: f64 = grid
            .interior_nodes()
            .iter()
            .map(|&node| lambda[node] * grid.quad_weight(node))
            .sum();
        let flat = vec![integral; n];

        let mut advantage = 0.0;
        let repeats = 200;
        for seed in 0..repeats {
            let points = sample_fdd(&grid, &lambda, 25, 4000 + seed).unwrap();
            advantage += ll_ipp(&points, &lambda, &grid) - ll_ipp(&points, &flat, &grid);
        }
        advantage /= repeats as f64;
        assert!(
            advantage > 0.0,
            "true intensity should beat the flat intensity on average, got {advantage}"
        );
    }
}
