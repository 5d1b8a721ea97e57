//! Maximum marginal likelihood estimation by Laplace approximation.
//!
//! The latent fields (and catchability random effects) are integrated out
//! with a Laplace approximation at their conditional mode, found by
//! sparse Newton iterations; the marginal is maximized over the
//! transformed hyperparameters `(log κ, log τ, δ*, …)` by BFGS with
//! central finite-difference gradients. Standard errors come from the
//! finite-difference Hessian of the marginal NLL at the optimum and are
//! reported on the internal scale only; interpretable-scale values are
//! derived through the reparameterization without standard errors.

pub mod gradient;
pub mod latent;
pub mod model;
pub mod outer;
pub mod toy;

use std::sync::RwLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{to_interpretable, LatentState, MaternInterpretable};
use crate::grid::{SpatialGrid, TimeAxis};
use crate::hurdle::{mean_biomass, presence_prob};
use crate::likelihood::{joint_components_with, ComponentLogLik, JointParams, ModelData};
use crate::data::DesignMatrix;

pub use latent::{inner_optimize, laplace_marginal_nll, InnerOptions, LaplaceResult, LatentModel};
pub use model::{digamma, trigamma, CatchSetup, FisheriesModel, ModelShape, ParamLayout};
pub use outer::{fd_hessian, minimize, standard_errors, OuterObjective, OuterOptions, OuterResult};

/// Fit settings; tolerances default to the estimation contract.
#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub outer: OuterOptions,
    pub inner: InnerOptions,
    pub compute_se: bool,
    /// Extract latent conditional variances for prediction uncertainty.
    pub compute_uncertainty: bool,
    /// Use the analytic gradient of the Laplace marginal instead of the
    /// default central finite differences.
    pub exact_gradient: bool,
    pub catch: CatchSetup,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            outer: OuterOptions::default(),
            inner: InnerOptions::default(),
            compute_se: true,
            compute_uncertainty: true,
            exact_gradient: false,
            catch: CatchSetup::default(),
        }
    }
}

/// Covariance parameters on the interpretable scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpretableParams {
    pub field_v: MaternInterpretable,
    pub field_u: MaternInterpretable,
    pub field_w: MaternInterpretable,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInfo {
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_grad_norm: f64,
    pub n_evaluations: usize,
    pub message: String,
}

/// Per-node, per-time standard errors of the two linear predictors from
/// the latent conditional covariance (time-major, all nodes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceUncertainty {
    pub se_eta_presence: Vec<f64>,
    pub se_eta_biomass: Vec<f64>,
}

/// Everything a completed fit reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub params: JointParams,
    pub interpretable: InterpretableParams,
    pub param_names: Vec<String>,
    /// Packed estimates on the internal (optimization) scale.
    pub estimates: Vec<f64>,
    /// Standard errors for the internal-scale estimates (interpretable
    /// scales carry none; they are reparameterizations).
    pub std_errors: Option<Vec<f64>>,
    pub aic: f64,
    pub marginal_nll: f64,
    pub components: ComponentLogLik,
    pub convergence: ConvergenceInfo,
    pub wall_seconds: f64,
    pub n_parameters: usize,
    pub n_latent: usize,
    pub latent: LatentState,
    /// Catchability random-effect modes aligned with `gamma_vessels`.
    pub gamma_effects: Vec<f64>,
    pub gamma_vessels: Vec<usize>,
    pub uncertainty: Option<SurfaceUncertainty>,
}

struct FitObjective<'a> {
    shape: &'a ModelShape,
    data: &'a ModelData,
    layout: &'a ParamLayout,
    inner: InnerOptions,
    exact_gradient: bool,
    /// Latent warm-start anchor. Probe evaluations (finite differences,
    /// line-search trials) solve from the anchor without touching it;
    /// accepted points re-anchor. The accepted point is solved twice —
    /// the second solve starts from its own mode — so its value and the
    /// probes around it share identical warm-start state; comparisons
    /// then happen on one latent branch and stay smooth at the noise
    /// floor of the marginal.
    warm: RwLock<Vec<f64>>,
    /// Mode of the most recent probe, keyed by its parameter point: the
    /// accepted line-search trial is re-evaluated immediately afterwards
    /// and can start from its own mode instead of repeating the solve.
    probe_cache: RwLock<Option<(Vec<f64>, Vec<f64>)>>,
}

impl<'a> FitObjective<'a> {
    fn warm_start_for(&self, x: &[f64]) -> Vec<f64> {
        if let Some((cached_x, mode)) = self.probe_cache.read().expect("probe cache").as_ref() {
            if cached_x == x {
                return mode.clone();
            }
        }
        self.warm.read().expect("warm-start lock").clone()
    }
}

impl<'a> OuterObjective for FitObjective<'a> {
    fn value(&self, x: &[f64], probe: bool) -> Result<f64> {
        let params = self.layout.unpack(x);
        let model = FisheriesModel::new(self.shape, self.data, params)?;
        let start = self.warm_start_for(x);
        let result = inner_optimize(&model, &start, &self.inner)?;
        if probe {
            *self.probe_cache.write().expect("probe cache") = Some((x.to_vec(), result.mode));
            return Ok(result.marginal_nll);
        }
        let rebased = inner_optimize(&model, &result.mode, &self.inner)?;
        *self.warm.write().expect("warm-start lock") = rebased.mode;
        Ok(rebased.marginal_nll)
    }

    fn value_and_gradient(&self, x: &[f64], probe: bool) -> Option<Result<(f64, Vec<f64>)>> {
        if !self.exact_gradient {
            return None;
        }
        let run = || -> Result<(f64, Vec<f64>)> {
            let params = self.layout.unpack(x);
            let model = FisheriesModel::new(self.shape, self.data, params)?;
            let start = self.warm_start_for(x);
            let (mode, nll, hess, _iters, _ginf) =
                crate::inference::latent::inner_mode(&model, &start, &self.inner)?;
            let (gradient, log_det) = model.marginal_gradient_with_logdet(self.layout, &mode, &hess)?;
            let marginal = nll + 0.5 * log_det
                - 0.5 * self.shape.n_latent() as f64 * (2.0 * std::f64::consts::PI).ln();
            if !probe {
                *self.warm.write().expect("warm-start lock") = mode;
            }
            Ok((marginal, gradient))
        };
        Some(run())
    }
}

/// Neutral starting point: zero fixed effects, range a quarter of the
/// domain width, unit marginal standard deviations, `δ* = 0`, dispersion
/// from the sample standard deviation of the positive responses, and the
/// point-process intercepts at the homogeneous-Poisson intensity
/// `log(n_D(t)/|A|)`.
pub fn default_init(data: &ModelData, grid: &SpatialGrid, time_axis: &TimeAxis, layout: &ParamLayout) -> JointParams {
    let mut params = JointParams::neutral(layout.p_presence, layout.p_biomass, time_axis.len());

    let positives: Vec<f64> = data
        .obs
        .y_val
        .iter()
        .cloned()
        .filter(|&v| v > 0.0)
        .collect();
    let upsilon = if positives.len() >= 2 {
        let mean = positives.iter().sum::<f64>() / positives.len() as f64;
        let var = positives.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (positives.len() - 1) as f64;
        var.sqrt().max(1e-3)
    } else {
        1.0
    };
    params.dispersion.log_upsilon = upsilon.ln();

    let phi0 = grid.bounds.width() / 4.0;
    let internal = crate::fields::to_internal(&MaternInterpretable { phi: phi0, sigma: 1.0 });
    params.matern_u = internal;
    params.matern_v = internal;
    params.matern_w = internal;
    params.temporal = crate::fields::TemporalCorr::from_star(0.0);

    if layout.include_ipp {
        let area = grid.bounds.area();
        for t in 0..time_axis.len() {
            let n_d = data.fdd_rows_by_time[t].len().max(1);
            params.preferential.alpha_pp[t] = (n_d as f64 / area).ln();
        }
    }
    if layout.catch.enabled {
        params.catchability.alpha_c = 0.0;
        params.catchability.fixed_coefs = vec![0.0; layout.catch.n_fixed];
        if layout.catch.random_effect {
            params.catchability.log_sigma_gamma = 0.5f64.ln();
        }
    }
    params
}

/// Maximizes the Laplace marginal likelihood and assembles the report.
pub fn fit(
    data: &ModelData,
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
    init: Option<JointParams>,
    config: &FitConfig,
) -> Result<FitReport> {
    let start_time = Instant::now();
    let layout = ParamLayout::new(
        data.design_presence.n_cols(),
        data.design_biomass.n_cols(),
        time_axis.len(),
        data.include_ipp,
        config.catch,
    );
    let shape = ModelShape::with_options(grid, data, time_axis.len(), config.catch, config.compute_uncertainty)?;
    let init_params = init.unwrap_or_else(|| default_init(data, grid, time_axis, &layout));
    let x0 = layout.pack(&init_params);

    let objective = FitObjective {
        shape: &shape,
        data,
        layout: &layout,
        inner: config.inner,
        exact_gradient: config.exact_gradient,
        warm: RwLock::new(vec![0.0; shape.n_latent()]),
        probe_cache: RwLock::new(None),
    };
    let outer_result = minimize(&objective, &x0, &config.outer)?;

    let mut params = layout.unpack(&outer_result.x);
    let model = FisheriesModel::new(&shape, data, params.clone())?;
    let warm = objective.warm.read().expect("warm-start lock").clone();
    let final_inner = inner_optimize(&model, &warm, &config.inner)?;
    let (latent, gamma_effects) = shape.unflatten(&final_inner.mode);

    // Densify the random effects onto the contiguous vessel range so the
    // reported parameters evaluate through the plain likelihood path.
    if !shape.gamma_vessels.is_empty() {
        let max_vessel = *shape.gamma_vessels.iter().max().expect("nonempty");
        let mut dense = vec![0.0; max_vessel - 1];
        for (g, &vessel) in shape.gamma_vessels.iter().enumerate() {
            dense[vessel - 2] = gamma_effects[g];
        }
        params.catchability.gamma_c = dense;
    }

    let components = joint_components_with(&params, &latent, data, grid, time_axis, &shape.structure)?;

    let std_errors = if config.compute_se {
        let hessian = if config.exact_gradient {
            outer::fd_hessian_of_gradient(&objective, &outer_result.x)
        } else {
            fd_hessian(&objective, &outer_result.x, outer_result.value)
        };
        match hessian.and_then(|h| standard_errors(&h)) {
            Ok(se) => Some(se),
            Err(_) => None,
        }
    } else {
        None
    };

    let uncertainty = if config.compute_uncertainty {
        Some(latent_uncertainty(&shape, &model, &final_inner.mode)?)
    } else {
        None
    };

    let k = layout.len();
    let aic = 2.0 * k as f64 + 2.0 * final_inner.marginal_nll;

    Ok(FitReport {
        interpretable: InterpretableParams {
            field_v: to_interpretable(&params.matern_v),
            field_u: to_interpretable(&params.matern_u),
            field_w: to_interpretable(&params.matern_w),
            delta: params.temporal.delta(),
        },
        params,
        param_names: layout.names(),
        estimates: outer_result.x.clone(),
        std_errors,
        aic,
        marginal_nll: final_inner.marginal_nll,
        components,
        convergence: ConvergenceInfo {
            converged: outer_result.converged,
            outer_iterations: outer_result.iterations,
            final_grad_norm: outer_result.grad_norm,
            n_evaluations: outer_result.n_evaluations,
            message: outer_result.message,
        },
        wall_seconds: start_time.elapsed().as_secs_f64(),
        n_parameters: k,
        n_latent: shape.n_latent(),
        latent,
        gamma_effects,
        gamma_vessels: shape.gamma_vessels.clone(),
        uncertainty,
    })
}

/// Standard errors of the two linear predictors per node and time from
/// the Takahashi selected inverse of the joint Hessian at the mode.
fn latent_uncertainty(shape: &ModelShape, model: &FisheriesModel<'_>, mode: &[f64]) -> Result<SurfaceUncertainty> {
    let symbolic = shape.backend.scalar_symbolic().ok_or_else(|| {
        Error::invalid("latent uncertainty requires the scalar Hessian backend")
    })?;
    let nnz = symbolic.pattern().nnz();
    let mut grad = vec![0.0; shape.n_latent()];
    let mut hess = vec![0.0; nnz];
    model.eval(mode, &mut grad, &mut hess)?;
    let factor = symbolic
        .factor(&hess, 0.0)
        .or_else(|_| symbolic.factor(&hess, 1e-8))?;
    let sel = factor.selected_inverse();

    let n = shape.n_nodes;
    let n_times = shape.n_times;
    let mut se_presence = vec![0.0; n * n_times];
    let mut se_biomass = vec![0.0; n * n_times];
    for j in 0..n {
        let vu = sel.variance(shape.idx_u(j));
        let vv = sel.variance(shape.idx_v(j));
        for t in 0..n_times {
            let wi = shape.idx_w(j, t);
            let vw = sel.variance(wi);
            let cov_vw = sel.covariance(shape.idx_v(j), wi).unwrap_or(0.0);
            let cov_uw = sel.covariance(shape.idx_u(j), wi).unwrap_or(0.0);
            se_presence[t * n + j] = (vv + vw + 2.0 * cov_vw).max(0.0).sqrt();
            se_biomass[t * n + j] = (vu + vw + 2.0 * cov_uw).max(0.0).sqrt();
        }
    }
    Ok(SurfaceUncertainty {
        se_eta_presence: se_presence,
        se_eta_biomass: se_biomass,
    })
}

/// Covariate values at grid nodes for surface prediction, with columns
/// matching the fit's design matrices.
#[derive(Debug, Clone)]
pub struct NodeCovariates {
    pub presence: DesignMatrix,
    pub biomass: DesignMatrix,
}

/// Expected relative biomass `E[S*] = π̂·μ̂` and its components per
/// interior node and time, with delta-method standard errors for `π̂`
/// and `μ̂` when the fit carried uncertainty information.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSurfaces {
    pub interior_nodes: Vec<usize>,
    pub n_times: usize,
    /// All vectors are time-major over interior nodes.
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub e_s_star: Vec<f64>,
    pub se_pi: Vec<f64>,
    pub se_mu: Vec<f64>,
}

/// Evaluates the fitted surfaces at the latent modes.
pub fn predict_surface(
    report: &FitReport,
    grid: &SpatialGrid,
    time_axis: &TimeAxis,
    node_covariates: Option<&NodeCovariates>,
) -> Result<PredictionSurfaces> {
    let n = grid.n_nodes();
    let n_times = time_axis.len();
    if report.latent.n_nodes() != n || report.latent.n_times != n_times {
        return Err(Error::invalid("report latent dimensions do not match grid/time axis"));
    }
    if let Some(cov) = node_covariates {
        if cov.presence.n_rows() != n || cov.biomass.n_rows() != n {
            return Err(Error::invalid("node covariates must cover every grid node"));
        }
        if cov.presence.n_cols() != report.params.fixed.theta_prime.len()
            || cov.biomass.n_cols() != report.params.fixed.theta.len()
        {
            return Err(Error::invalid("node covariate widths do not match the fitted design"));
        }
    }

    let interior = grid.interior_nodes().to_vec();
    let m = interior.len();
    let mut surfaces = PredictionSurfaces {
        interior_nodes: interior.clone(),
        n_times,
        pi: vec![0.0; m * n_times],
        mu: vec![0.0; m * n_times],
        e_s_star: vec![0.0; m * n_times],
        se_pi: vec![0.0; m * n_times],
        se_mu: vec![0.0; m * n_times],
    };

    for t in 0..n_times {
        for (k, &node) in interior.iter().enumerate() {
            let (xp, xb) = match node_covariates {
                Some(cov) => (
                    cov.presence.dot(node, &report.params.fixed.theta_prime),
                    cov.biomass.dot(node, &report.params.fixed.theta),
                ),
                None => (0.0, 0.0),
            };
            let eta_p = report.params.fixed.alpha_prime + xp + report.latent.v[node] + report.latent.w_at(node, t);
            let eta_b = report.params.fixed.alpha + xb + report.latent.u[node] + report.latent.w_at(node, t);
            let pi = presence_prob(eta_p);
            let mu = mean_biomass(eta_b);
            let idx = t * m + k;
            surfaces.pi[idx] = pi;
            surfaces.mu[idx] = mu;
            surfaces.e_s_star[idx] = pi * mu;
            if let Some(unc) = &report.uncertainty {
                let se_p = unc.se_eta_presence[t * n + node];
                let se_b = unc.se_eta_biomass[t * n + node];
                surfaces.se_pi[idx] = pi * (1.0 - pi) * se_p;
                surfaces.se_mu[idx] = mu * se_b;
            }
        }
    }
    Ok(surfaces)
}

/// Akaike information criterion of a converged fit:
/// `2k − 2·(maximized marginal log-likelihood)`.
pub fn aic(report: &FitReport) -> f64 {
    2.0 * report.n_parameters as f64 + 2.0 * report.marginal_nll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{spde_precision, to_internal};
    use crate::grid::{build_grid, project, Rect};
    use crate::likelihood::simulate_test_replicate;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn toy_setup(nx: usize, m: usize, seed: u64) -> (crate::grid::SpatialGrid, toy::LinearGaussianModel, DMatrix<f64>, DVector<f64>, f64) {
        use rand::Rng;
        let grid = build_grid(nx, nx, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.5, sigma: 1.0 }));
        let mut rng = crate::rng::rng_from_seed(seed);
        let locs: Vec<(f64, f64)> = (0..m).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let projection = project(&grid, &locs).unwrap();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let noise_var = 0.3;

        // Dense pieces for the oracles.
        let n = grid.n_nodes();
        let mut a = DMatrix::zeros(m, n);
        for r in 0..m {
            for (node, w) in projection.row(r) {
                a[(r, node)] = w;
            }
        }
        let q_dense = q.pattern().to_dense(&q.values);
        let yv = DVector::from_column_slice(&y);
        let model = toy::LinearGaussianModel::new(q, projection, y, noise_var).unwrap();
        (grid, model, q_dense + (a.transpose() * &a) / noise_var, a.transpose() * yv / noise_var, noise_var)
    }

    #[test]
    fn inner_mode_matches_gls_solution() {
        let (_grid, model, h_dense, rhs, _nv) = toy_setup(5, 18, 7);
        let result = inner_optimize(&model, &vec![0.0; model.n_latent()], &InnerOptions::default()).unwrap();
        let x_dense = h_dense.clone().cholesky().unwrap().solve(&rhs);
        for i in 0..model.n_latent() {
            assert_relative_eq!(result.mode[i], x_dense[i], max_relative = 1e-8, epsilon = 1e-10);
        }
        assert!(result.grad_norm <= 1e-8);
    }

    #[test]
    fn laplace_is_exact_on_linear_gaussian() {
        // Marginal of y: N(0, A Q^{-1} A^T + σ² I); the Laplace value must
        // match the dense closed form to 1e-6.
        use rand::Rng;
        let nx = 6;
        let m = 25;
        let grid = build_grid(nx, nx, Rect::unit(), 0.0).unwrap();
        let q = spde_precision(&grid, &to_internal(&MaternInterpretable { phi: 0.4, sigma: 0.8 }));
        let q_dense = q.pattern().to_dense(&q.values);
        let mut rng = crate::rng::rng_from_seed(11);
        let locs: Vec<(f64, f64)> = (0..m).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let projection = project(&grid, &locs).unwrap();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let noise_var = 0.4;

        let n = grid.n_nodes();
        let mut a = DMatrix::zeros(m, n);
        for r in 0..m {
            for (node, w) in projection.row(r) {
                a[(r, node)] = w;
            }
        }
        let cov = &a * q_dense.clone().try_inverse().unwrap() * a.transpose()
            + DMatrix::identity(m, m) * noise_var;
        let chol = cov.clone().cholesky().unwrap();
        let yv = DVector::from_column_slice(&y);
        let quad = yv.dot(&chol.solve(&yv));
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let exact_nll = 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det + 0.5 * quad;

        let model = toy::LinearGaussianModel::new(q, projection, y, noise_var).unwrap();
        let marginal = laplace_marginal_nll(&model, &vec![0.0; n], &InnerOptions::default()).unwrap();
        assert_relative_eq!(marginal, exact_nll, max_relative = 1e-6);
    }

    #[test]
    fn zero_data_mode_is_prior_mode() {
        let grid = build_grid(6, 6, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let obs = crate::data::ObservationSet::default();
        let mut data = ModelData::new(obs, &grid, &time_axis, &[], &[]).unwrap();
        data.include_ipp = true;
        let shape = ModelShape::new(&grid, &data, 2, CatchSetup::default()).unwrap();
        // β = β′ = 0 keeps the IPP integral flat in the latent fields.
        let params = JointParams::neutral(0, 0, 2);
        let model = FisheriesModel::new(&shape, &data, params).unwrap();
        let result = inner_optimize(&model, &vec![0.0; shape.n_latent()], &InnerOptions::default()).unwrap();
        assert!(result.mode.iter().all(|&v| v == 0.0));
        assert_eq!(result.iterations, 0);
    }

    #[test]
    fn warm_start_saves_inner_iterations() {
        let grid = build_grid(8, 8, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (_truth, _latent, data) = simulate_test_replicate(&grid, &time_axis, 1.0, 0.5, 30, 91);
        let shape = ModelShape::new(&grid, &data, 2, CatchSetup::default()).unwrap();
        let layout = ParamLayout::new(0, 0, 2, true, CatchSetup::default());
        let params = default_init(&data, &grid, &time_axis, &layout);
        let model = FisheriesModel::new(&shape, &data, params.clone()).unwrap();
        let opts = InnerOptions::default();

        let cold = inner_optimize(&model, &vec![0.0; shape.n_latent()], &opts).unwrap();

        // Mode from a slightly perturbed parameter point as warm start.
        let mut nearby = params.clone();
        nearby.fixed.alpha += 1e-3;
        let nearby_model = FisheriesModel::new(&shape, &data, nearby).unwrap();
        let warm_mode = inner_optimize(&nearby_model, &cold.mode, &opts).unwrap().mode;
        let warm = inner_optimize(&model, &warm_mode, &opts).unwrap();

        assert!(
            warm.iterations <= cold.iterations,
            "warm start took {} iterations vs cold {}",
            warm.iterations,
            cold.iterations
        );
        assert_relative_eq!(warm.marginal_nll, cold.marginal_nll, max_relative = 1e-9);
    }

    #[test]
    fn marginal_evaluation_is_deterministic() {
        let grid = build_grid(7, 7, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (_truth, _latent, data) = simulate_test_replicate(&grid, &time_axis, 1.2, 0.0, 25, 17);
        let shape = ModelShape::new(&grid, &data, 2, CatchSetup::default()).unwrap();
        let layout = ParamLayout::new(0, 0, 2, true, CatchSetup::default());
        let params = default_init(&data, &grid, &time_axis, &layout);
        let model = FisheriesModel::new(&shape, &data, params).unwrap();
        let opts = InnerOptions::default();
        let a = laplace_marginal_nll(&model, &vec![0.0; shape.n_latent()], &opts).unwrap();
        let b = laplace_marginal_nll(&model, &vec![0.0; shape.n_latent()], &opts).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn finite_difference_gradient_self_consistency() {
        // Central differences at relative steps 1e-5 and 5e-6 agree within
        // 1e-3 relative on the dominant coordinates.
        let grid = build_grid(7, 7, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (_params, _latent, data) = simulate_test_replicate(&grid, &time_axis, 1.0, 0.5, 25, 33);
        let shape = ModelShape::new(&grid, &data, 2, CatchSetup::default()).unwrap();
        let layout = ParamLayout::new(0, 0, 2, true, CatchSetup::default());
        let objective = FitObjective {
            shape: &shape,
            data: &data,
            layout: &layout,
            inner: InnerOptions::default(),
            exact_gradient: false,
            warm: RwLock::new(vec![0.0; shape.n_latent()]),
            probe_cache: RwLock::new(None),
        };
        let init = default_init(&data, &grid, &time_axis, &layout);
        let mut x = layout.pack(&init);
        x[0] = 0.2;
        x[11] = 0.4;
        objective.value(&x, false).unwrap();

        let grad_of = |rel: f64| -> Vec<f64> {
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() {
                let h = rel * x[i].abs().max(1.0);
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                g[i] = (objective.value(&xp, true).unwrap() - objective.value(&xm, true).unwrap()) / (2.0 * h);
            }
            g
        };
        let g1 = grad_of(1e-5);
        let g2 = grad_of(5e-6);
        let scale = g1.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for i in 0..x.len() {
            if g1[i].abs() > 1e-3 * scale {
                assert!(
                    ((g1[i] - g2[i]) / g1[i]).abs() < 1e-3,
                    "coordinate {i}: {} vs {}",
                    g1[i],
                    g2[i]
                );
            }
        }
    }

    #[test]
    fn small_fit_recovers_and_predicts() {
        let grid = build_grid(10, 10, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(1).unwrap();
        let (truth, latent, data) = simulate_test_replicate(&grid, &time_axis, 1.5, 0.0, 60, 2024);
        let config = FitConfig::default();
        let report = fit(&data, &grid, &time_axis, None, &config).unwrap();
        assert!(report.convergence.converged, "{}", report.convergence.message);
        assert!(report.estimates.iter().all(|v| v.is_finite()));
        if let Some(se) = &report.std_errors {
            assert!(se.iter().all(|&s| s >= 0.0));
        }
        assert_relative_eq!(
            report.aic,
            2.0 * report.n_parameters as f64 + 2.0 * report.marginal_nll,
            max_relative = 1e-12
        );
        // The interpretable transform matches the reparameterization.
        let direct = to_interpretable(&report.params.matern_u);
        assert_eq!(direct, report.interpretable.field_u);

        // Fitted surfaces beat the zero-field surface against the truth.
        let surfaces = predict_surface(&report, &grid, &time_axis, None).unwrap();
        let truth_surface: Vec<f64> = {
            let interior = grid.interior_nodes();
            let mut s = Vec::with_capacity(interior.len());
            for &node in interior {
                let pi = presence_prob(latent.v[node] + latent.w_at(node, 0));
                let mu = mean_biomass(latent.u[node] + latent.w_at(node, 0));
                s.push(pi * mu);
            }
            s
        };
        let rmse = |pred: &[f64]| {
            (pred
                .iter()
                .zip(&truth_surface)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / truth_surface.len() as f64)
                .sqrt()
        };
        let fitted_rmse = rmse(&surfaces.e_s_star);
        let zero_surface: Vec<f64> = truth_surface.iter().map(|_| 0.5 * 1.0).collect();
        let zero_rmse = rmse(&zero_surface);
        assert!(
            fitted_rmse < zero_rmse,
            "fitted surface RMSE {fitted_rmse} should beat the flat surface {zero_rmse}"
        );
        let _ = truth;
    }

    #[test]
    fn prediction_link_identities() {
        // Zero predictors give E[S*] = 0.5 and bumping U raises mu only.
        let grid = build_grid(5, 5, Rect::unit(), 0.0).unwrap();
        let time_axis = TimeAxis::with_len(1).unwrap();
        let n = grid.n_nodes();
        let mut report = FitReport {
            params: JointParams::neutral(0, 0, 1),
            interpretable: InterpretableParams {
                field_v: MaternInterpretable { phi: 1.0, sigma: 1.0 },
                field_u: MaternInterpretable { phi: 1.0, sigma: 1.0 },
                field_w: MaternInterpretable { phi: 1.0, sigma: 1.0 },
                delta: 0.0,
            },
            param_names: vec![],
            estimates: vec![],
            std_errors: None,
            aic: 0.0,
            marginal_nll: 0.0,
            components: ComponentLogLik {
                gamma: 0.0,
                bernoulli: 0.0,
                ipp: 0.0,
                field_w: 0.0,
                field_u: 0.0,
                field_v: 0.0,
                catch_re: 0.0,
            },
            convergence: ConvergenceInfo {
                converged: true,
                outer_iterations: 0,
                final_grad_norm: 0.0,
                n_evaluations: 0,
                message: String::new(),
            },
            wall_seconds: 0.0,
            n_parameters: 0,
            n_latent: 0,
            latent: LatentState::zeros(n, 1),
            gamma_effects: vec![],
            gamma_vessels: vec![],
            uncertainty: None,
        };
        let surfaces = predict_surface(&report, &grid, &time_axis, None).unwrap();
        for k in 0..surfaces.interior_nodes.len() {
            assert_relative_eq!(surfaces.e_s_star[k], 0.5, max_relative = 1e-12);
        }

        let node = grid.interior_nodes()[7];
        report.latent.u[node] = 0.9;
        let bumped = predict_surface(&report, &grid, &time_axis, None).unwrap();
        let k = surfaces.interior_nodes.iter().position(|&x| x == node).unwrap();
        assert!(bumped.mu[k] > surfaces.mu[k]);
        assert_eq!(bumped.pi[k], surfaces.pi[k]);
    }

    #[test]
    fn uninformative_parameter_costs_two_aic() {
        let grid = build_grid(8, 8, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(1).unwrap();
        let (_truth, _latent, data) = simulate_test_replicate(&grid, &time_axis, 1.0, 0.0, 40, 77);

        let mut config = FitConfig::default();
        config.compute_se = false;
        config.compute_uncertainty = false;
        let base = fit(&data, &grid, &time_axis, None, &config).unwrap();

        // Add an all-zero presence covariate: the likelihood cannot move.
        let mut obs2 = data.obs.clone();
        obs2.add_covariate("null".into(), vec![0.0; obs2.n_rows()]).unwrap();
        let data2 = ModelData::new(
            obs2,
            &grid,
            &time_axis,
            &[crate::data::CovariateSpec::identity("null")],
            &[],
        )
        .unwrap();
        let extended = fit(&data2, &grid, &time_axis, None, &config).unwrap();

        assert_eq!(extended.n_parameters, base.n_parameters + 1);
        let delta_aic = aic(&extended) - aic(&base);
        assert!(
            (delta_aic - 2.0).abs() < 0.05,
            "adding a non-informative parameter should cost ≈ 2 AIC, got {delta_aic}"
        );
    }
}
