//! Simulation-estimation experiment runner.
//!
//! One replicate draws the covariate fields, the latent fields, both
//! sampling designs and the hurdle observations from a scenario
//! configuration, then fits the requested model variants (joint,
//! survey-only, commercial-only) and scores the predicted `E[S*]`
//! surfaces against the simulated truth with RMSE, MAE and the Hellinger
//! distance.
//!
//! Replicates run in parallel on independent RNG substreams and persist
//! incrementally — one record CSV per replicate, with the realized
//! preferential truth written to a manifest before fitting — so
//! interrupted runs resume by skipping completed replicates. Outputs are
//! byte-identical across reruns with the same master seed.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateSpec, DesignMatrix, ObservationSet, Source};
use crate::error::{Error, Result};
use crate::fields::{
    to_internal, LatentState, SpdeStructure, TemporalCorr,
};
use crate::grid::{build_grid, project, Rect, SpatialGrid, TimeAxis};
use crate::hurdle::{mean_biomass, presence_prob, simulate_observations_with};
use crate::inference::{
    fit, predict_surface, FitConfig, FitReport, NodeCovariates, PredictionSurfaces,
};
use crate::likelihood::{JointParams, ModelData};
use crate::metrics::{self, ReplicateEstimates, SummaryTable};
use crate::pointprocess::{
    draw_preferential, intensity_surface, sample_fdd_with, sample_fid_with, PreferentialParams,
    ScenarioConfig,
};
use crate::rng::SeedPolicy;

/// Which data sources a fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Both sources with the point-process term.
    Joint,
    /// Survey rows only; the point-process term is dropped.
    FidOnly,
    /// Commercial rows only, point-process term kept.
    FddOnly,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Joint => "joint",
            Variant::FidOnly => "fid",
            Variant::FddOnly => "fdd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(Variant::Joint),
            "fid" | "fid_only" => Ok(Variant::FidOnly),
            "fdd" | "fdd_only" => Ok(Variant::FddOnly),
            other => Err(Error::invalid(format!("unknown variant `{other}`"))),
        }
    }
}

/// One simulated replicate: truth, data and everything a fit needs.
pub struct SimulatedReplicate {
    pub grid: SpatialGrid,
    pub fit_grid: SpatialGrid,
    pub time_axis: TimeAxis,
    pub truth: PreferentialParams,
    pub true_params: JointParams,
    pub latent: LatentState,
    pub obs: ObservationSet,
    /// Node covariate columns on the simulation grid, in spec order.
    pub node_presence: Vec<Vec<f64>>,
    pub node_biomass: Vec<Vec<f64>>,
    /// True `E[S*]` at the fit grid's interior nodes, time-major.
    pub true_surface: Vec<f64>,
}

impl SimulatedReplicate {
    pub fn presence_specs(cfg: &ScenarioConfig) -> Vec<CovariateSpec> {
        cfg.covariates_presence
            .iter()
            .map(|c| CovariateSpec::identity(&c.name))
            .collect()
    }

    pub fn biomass_specs(cfg: &ScenarioConfig) -> Vec<CovariateSpec> {
        cfg.covariates_biomass
            .iter()
            .map(|c| CovariateSpec::identity(&c.name))
            .collect()
    }

    /// Node-level design for surface prediction on the fit grid.
    pub fn node_covariates(&self) -> NodeCovariates {
        let n = self.fit_grid.n_nodes();
        let interp = |columns: &[Vec<f64>]| -> Vec<Vec<f64>> {
            if std::ptr::eq(&self.grid, &self.fit_grid) || self.grid.n_nodes() == self.fit_grid.n_nodes() {
                return columns.to_vec();
            }
            let locs: Vec<(f64, f64)> = (0..n)
                .map(|j| {
                    let (x, y) = self.fit_grid.node_coord(j);
                    (
                        x.clamp(self.grid.bounds.xmin, self.grid.bounds.xmax),
                        y.clamp(self.grid.bounds.ymin, self.grid.bounds.ymax),
                    )
                })
                .collect();
            let proj = project(&self.grid, &locs).expect("fit nodes clamped into the domain");
            columns.iter().map(|col| proj.apply(col)).collect()
        };
        let presence_cols = interp(&self.node_presence);
        let biomass_cols = interp(&self.node_biomass);
        NodeCovariates {
            presence: DesignMatrix::from_columns(
                (0..presence_cols.len()).map(|k| format!("cp{k}")).collect(),
                presence_cols,
                n,
            ),
            biomass: DesignMatrix::from_columns(
                (0..biomass_cols.len()).map(|k| format!("cb{k}")).collect(),
                biomass_cols,
                n,
            ),
        }
    }
}

/// Draws covariates, fields, sampling locations and observations for one
/// replicate. Deterministic given `(config, replicate)`.
pub fn simulate_replicate(cfg: &ScenarioConfig, replicate: usize) -> Result<SimulatedReplicate> {
    let grid = build_grid(cfg.grid_nx, cfg.grid_ny, Rect::unit(), cfg.pad_fraction)?;
    let fit_grid = if cfg.mesh_subsample <= 1 {
        grid.clone()
    } else {
        let k = cfg.mesh_subsample;
        build_grid(
            (cfg.grid_nx / k).max(2),
            (cfg.grid_ny / k).max(2),
            Rect::unit(),
            cfg.pad_fraction,
        )?
    };
    let time_axis = TimeAxis::with_len(cfg.n_times)?;
    let policy = SeedPolicy::new(cfg.master_seed);
    let rep = replicate as u64;
    let structure = std::sync::Arc::new(SpdeStructure::new(&grid));

    // Latent truth.
    let q_u = structure.precision(&to_internal(&cfg.field_u));
    let q_v = structure.precision(&to_internal(&cfg.field_v));
    let q_w = structure.precision(&to_internal(&cfg.field_w));
    let u = q_u.factor()?.sample_zero_mean(&standard_normals(&mut policy.stream(rep, "field.u"), grid.n_nodes()));
    let v = q_v.factor()?.sample_zero_mean(&standard_normals(&mut policy.stream(rep, "field.v"), grid.n_nodes()));
    let w = {
        let mut rng = policy.stream(rep, "field.w");
        sample_ar1_with(&q_w, cfg.delta, cfg.n_times, &mut rng)?
    };
    let latent = LatentState { u: u.clone(), v: v.clone(), w, n_times: cfg.n_times };

    // Covariate fields.
    let draw_cov = |specs: &[crate::pointprocess::CovariateFieldSpec]| -> Result<Vec<Vec<f64>>> {
        specs
            .iter()
            .map(|spec| {
                let q = structure.precision(&to_internal(&crate::fields::MaternInterpretable {
                    phi: spec.phi,
                    sigma: spec.sigma,
                }));
                let mut rng = policy.stream(rep, &format!("cov.{}", spec.name));
                Ok(q.factor()?.sample_zero_mean(&standard_normals(&mut rng, grid.n_nodes())))
            })
            .collect()
    };
    let node_presence = draw_cov(&cfg.covariates_presence)?;
    let node_biomass = draw_cov(&cfg.covariates_biomass)?;

    // Realized preferential truth, recorded before any fitting happens.
    let truth = draw_preferential(cfg, rep);

    let mut true_params = JointParams::neutral(cfg.theta_prime.len(), cfg.theta.len(), cfg.n_times);
    true_params.fixed.theta_prime = cfg.theta_prime.clone();
    true_params.fixed.theta = cfg.theta.clone();
    true_params.dispersion.log_upsilon = cfg.upsilon.ln();
    true_params.matern_u = to_internal(&cfg.field_u);
    true_params.matern_v = to_internal(&cfg.field_v);
    true_params.matern_w = to_internal(&cfg.field_w);
    true_params.temporal = TemporalCorr::from_delta(cfg.delta)?;
    true_params.preferential = truth.clone();

    // Observations.
    let mut obs = ObservationSet {
        covariate_names: cfg
            .covariates_presence
            .iter()
            .chain(&cfg.covariates_biomass)
            .map(|c| c.name.clone())
            .collect(),
        ..Default::default()
    };
    let n_cov = obs.covariate_names.len();
    obs.covariate_columns = vec![Vec::new(); n_cov];

    for t in 0..cfg.n_times {
        let fid = {
            let mut rng = policy.stream(rep, &format!("fid.t{t}"));
            sample_fid_with(&grid, cfg.comb.0, cfg.fid_mode, &mut rng)?
        };
        let lambda = intensity_surface(&grid, &v, &u, &truth, t);
        let fdd_nodes = {
            let mut rng = policy.stream(rep, &format!("fdd.t{t}"));
            sample_fdd_with(&grid, &lambda, cfg.comb.1, &mut rng)?
        };
        let mut locs = fid.clone();
        locs.extend(fdd_nodes.iter().map(|&node| grid.node_coord(node)));
        let proj = project(&grid, &locs)?;

        let wcol = latent.w_column(t);
        let mut pi = Vec::with_capacity(locs.len());
        let mut zeta = Vec::with_capacity(locs.len());
        let mut cov_rows: Vec<Vec<f64>> = vec![Vec::with_capacity(locs.len()); n_cov];
        for r in 0..locs.len() {
            let mut eta_p = true_params.fixed.alpha_prime + proj.dot_row(r, &v) + proj.dot_row(r, wcol);
            let mut eta_b = true_params.fixed.alpha + proj.dot_row(r, &u) + proj.dot_row(r, wcol);
            for (k, col) in node_presence.iter().enumerate() {
                let value = proj.dot_row(r, col);
                eta_p += cfg.theta_prime[k] * value;
                cov_rows[k].push(value);
            }
            for (k, col) in node_biomass.iter().enumerate() {
                let value = proj.dot_row(r, col);
                eta_b += cfg.theta[k] * value;
                cov_rows[node_presence.len() + k].push(value);
            }
            pi.push(presence_prob(eta_p));
            zeta.push(mean_biomass(eta_b));
        }
        let (z, y_val) = {
            let mut rng = policy.stream(rep, &format!("obs.t{t}"));
            simulate_observations_with(&pi, &zeta, cfg.upsilon, &mut rng)?
        };

        for (r, &(x, y)) in locs.iter().enumerate() {
            let is_fid = r < fid.len();
            obs.source.push(if is_fid { Source::Fid } else { Source::Fdd });
            obs.x.push(x);
            obs.y.push(y);
            obs.t_label.push(time_axis.labels()[t].clone());
            obs.subperiod.push(0);
            obs.vessel.push(if is_fid { 1 } else { 2 });
            obs.z.push(z[r]);
            obs.y_val.push(y_val[r]);
        }
        for (k, rows) in cov_rows.into_iter().enumerate() {
            obs.covariate_columns[k].extend(rows);
        }
    }
    obs.validate(&crate::data::ValidationRules::default())?;

    // True E[S*] at the fit grid's interior nodes.
    let fit_interior: Vec<(f64, f64)> = fit_grid
        .interior_nodes()
        .iter()
        .map(|&node| fit_grid.node_coord(node))
        .collect();
    let proj_truth = project(&grid, &fit_interior)?;
    let mut true_surface = Vec::with_capacity(fit_interior.len() * cfg.n_times);
    for t in 0..cfg.n_times {
        let wcol = latent.w_column(t);
        for r in 0..fit_interior.len() {
            let mut eta_p = true_params.fixed.alpha_prime
                + proj_truth.dot_row(r, &v)
                + proj_truth.dot_row(r, wcol);
            let mut eta_b = true_params.fixed.alpha
                + proj_truth.dot_row(r, &u)
                + proj_truth.dot_row(r, wcol);
            for (k, col) in node_presence.iter().enumerate() {
                eta_p += cfg.theta_prime[k] * proj_truth.dot_row(r, col);
            }
            for (k, col) in node_biomass.iter().enumerate() {
                eta_b += cfg.theta[k] * proj_truth.dot_row(r, col);
            }
            true_surface.push(presence_prob(eta_p) * mean_biomass(eta_b));
        }
    }

    Ok(SimulatedReplicate {
        grid,
        fit_grid,
        time_axis,
        truth,
        true_params,
        latent,
        obs,
        node_presence,
        node_biomass,
        true_surface,
    })
}

fn standard_normals<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

fn sample_ar1_with<R: rand::Rng>(
    q: &crate::fields::Precision,
    delta: f64,
    n_times: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let factor = q.factor()?;
    let n = q.n();
    let mut w = vec![0.0; n * n_times];
    let scale = 1.0 / (1.0 - delta * delta).sqrt();
    let first = factor.sample_zero_mean(&standard_normals(rng, n));
    for (j, value) in first.into_iter().enumerate() {
        w[j] = scale * value;
    }
    for t in 1..n_times {
        let innov = factor.sample_zero_mean(&standard_normals(rng, n));
        for j in 0..n {
            w[t * n + j] = delta * w[(t - 1) * n + j] + innov[j];
        }
    }
    Ok(w)
}

/// Fit of one variant on one simulated replicate plus surface metrics.
pub struct VariantFit {
    pub report: FitReport,
    pub surfaces: PredictionSurfaces,
    pub rmse: f64,
    pub mae: f64,
    pub hellinger: f64,
}

/// Fits one model variant to a simulated replicate and scores its
/// predicted surface against the simulated truth.
pub fn fit_replicate(cfg: &ScenarioConfig, sim: &SimulatedReplicate, variant: Variant, fit_config: &FitConfig) -> Result<VariantFit> {
    let obs = match variant {
        Variant::Joint => sim.obs.clone(),
        Variant::FidOnly => sim.obs.filter_source(Source::Fid),
        Variant::FddOnly => sim.obs.filter_source(Source::Fdd),
    };
    let mut data = ModelData::new(
        obs,
        &sim.fit_grid,
        &sim.time_axis,
        &SimulatedReplicate::presence_specs(cfg),
        &SimulatedReplicate::biomass_specs(cfg),
    )?;
    data.include_ipp = variant != Variant::FidOnly;

    let report = fit(&data, &sim.fit_grid, &sim.time_axis, None, fit_config)?;
    let node_cov = sim.node_covariates();
    let surfaces = predict_surface(&report, &sim.fit_grid, &sim.time_axis, Some(&node_cov))?;
    let rmse = metrics::rmse(&surfaces.e_s_star, &sim.true_surface)?;
    let mae = metrics::mae(&surfaces.e_s_star, &sim.true_surface)?;
    let hellinger = metrics::hellinger(&sim.true_surface, &surfaces.e_s_star)?;
    Ok(VariantFit {
        report,
        surfaces,
        rmse,
        mae,
        hellinger,
    })
}

/// One row of the experiment output (fixed CSV column order documented in
/// [`record_header`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: u8,
    pub comb: (usize, usize),
    pub replicate: usize,
    pub variant: Variant,
    pub converged: bool,
    pub outer_iterations: usize,
    pub final_grad_norm: f64,
    pub marginal_nll: f64,
    pub aic: f64,
    pub wall_seconds: f64,
    pub alpha_prime: f64,
    pub alpha: f64,
    pub theta_prime: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_upsilon: f64,
    pub phi_v: f64,
    pub sigma_v: f64,
    pub phi_u: f64,
    pub sigma_u: f64,
    pub phi_w: f64,
    pub sigma_w: f64,
    pub delta: f64,
    /// NaN entries mean "not part of this variant's model".
    pub alpha_pp: Vec<f64>,
    pub beta_prime: Vec<f64>,
    pub beta: Vec<f64>,
    pub se_beta_prime: Vec<f64>,
    pub se_beta: Vec<f64>,
    pub true_beta_prime: Vec<f64>,
    pub true_beta: Vec<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub hellinger: f64,
}

impl ReplicateRecord {
    fn from_fit(
        cfg: &ScenarioConfig,
        replicate: usize,
        variant: Variant,
        sim: &SimulatedReplicate,
        fit: &VariantFit,
    ) -> ReplicateRecord {
        let report = &fit.report;
        let t_len = cfg.n_times;
        let nan = vec![f64::NAN; t_len];
        let (alpha_pp, beta_prime, beta) = if variant == Variant::FidOnly {
            (nan.clone(), nan.clone(), nan.clone())
        } else {
            (
                report.params.preferential.alpha_pp.clone(),
                report.params.preferential.beta_prime.clone(),
                report.params.preferential.beta.clone(),
            )
        };
        // Standard errors by parameter name, where available.
        let se_of = |name: &str| -> f64 {
            match (&report.std_errors, report.param_names.iter().position(|n| n == name)) {
                (Some(se), Some(idx)) => se[idx],
                _ => f64::NAN,
            }
        };
        let se_beta_prime: Vec<f64> = (0..t_len).map(|t| se_of(&format!("beta_prime[{t}]"))).collect();
        let se_beta: Vec<f64> = (0..t_len).map(|t| se_of(&format!("beta[{t}]"))).collect();

        ReplicateRecord {
            scenario: cfg.scenario,
            comb: cfg.comb,
            replicate,
            variant,
            converged: report.convergence.converged,
            outer_iterations: report.convergence.outer_iterations,
            final_grad_norm: report.convergence.final_grad_norm,
            marginal_nll: report.marginal_nll,
            aic: report.aic,
            wall_seconds: report.wall_seconds,
            alpha_prime: report.params.fixed.alpha_prime,
            alpha: report.params.fixed.alpha,
            theta_prime: report.params.fixed.theta_prime.clone(),
            theta: report.params.fixed.theta.clone(),
            log_upsilon: report.params.dispersion.log_upsilon,
            phi_v: report.interpretable.field_v.phi,
            sigma_v: report.interpretable.field_v.sigma,
            phi_u: report.interpretable.field_u.phi,
            sigma_u: report.interpretable.field_u.sigma,
            phi_w: report.interpretable.field_w.phi,
            sigma_w: report.interpretable.field_w.sigma,
            delta: report.interpretable.delta,
            alpha_pp,
            beta_prime,
            beta,
            se_beta_prime,
            se_beta,
            true_beta_prime: sim.truth.beta_prime.clone(),
            true_beta: sim.truth.beta.clone(),
            rmse: fit.rmse,
            mae: fit.mae,
            hellinger: fit.hellinger,
        }
    }

    /// Placeholder record for a replicate whose fit failed hard.
    fn failed(cfg: &ScenarioConfig, replicate: usize, variant: Variant, sim: &SimulatedReplicate) -> ReplicateRecord {
        let t_len = cfg.n_times;
        let nan = vec![f64::NAN; t_len];
        ReplicateRecord {
            scenario: cfg.scenario,
            comb: cfg.comb,
            replicate,
            variant,
            converged: false,
            outer_iterations: 0,
            final_grad_norm: f64::NAN,
            marginal_nll: f64::NAN,
            aic: f64::NAN,
            wall_seconds: 0.0,
            alpha_prime: f64::NAN,
            alpha: f64::NAN,
            theta_prime: vec![f64::NAN; cfg.theta_prime.len()],
            theta: vec![f64::NAN; cfg.theta.len()],
            log_upsilon: f64::NAN,
            phi_v: f64::NAN,
            sigma_v: f64::NAN,
            phi_u: f64::NAN,
            sigma_u: f64::NAN,
            phi_w: f64::NAN,
            sigma_w: f64::NAN,
            delta: f64::NAN,
            alpha_pp: nan.clone(),
            beta_prime: nan.clone(),
            beta: nan.clone(),
            se_beta_prime: nan.clone(),
            se_beta: nan.clone(),
            true_beta_prime: sim.truth.beta_prime.clone(),
            true_beta: sim.truth.beta.clone(),
            rmse: f64::NAN,
            mae: f64::NAN,
            hellinger: f64::NAN,
        }
    }
}

/// Documented CSV header for the given configuration.
pub fn record_header(cfg: &ScenarioConfig) -> String {
    let mut cols: Vec<String> = vec![
        "scenario", "comb_fid", "comb_fdd", "replicate", "variant", "converged",
        "outer_iterations", "final_grad_norm", "marginal_nll", "aic", "wall_seconds",
        "alpha_prime", "alpha",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    cols.extend((1..=cfg.theta_prime.len()).map(|k| format!("theta_prime_{k}")));
    cols.extend((1..=cfg.theta.len()).map(|k| format!("theta_{k}")));
    cols.push("log_upsilon".into());
    for name in ["phi_v", "sigma_v", "phi_u", "sigma_u", "phi_w", "sigma_w", "delta"] {
        cols.push(name.into());
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("alpha_pp_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("beta_prime_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("beta_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("se_beta_prime_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("se_beta_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("true_beta_prime_t{t}"));
    }
    for t in 1..=cfg.n_times {
        cols.push(format!("true_beta_t{t}"));
    }
    cols.push("rmse".into());
    cols.push("mae".into());
    cols.push("hellinger".into());
    cols.join(",")
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn record_row(r: &ReplicateRecord) -> String {
    let mut cells: Vec<String> = vec![
        r.scenario.to_string(),
        r.comb.0.to_string(),
        r.comb.1.to_string(),
        r.replicate.to_string(),
        r.variant.as_str().to_string(),
        r.converged.to_string(),
        r.outer_iterations.to_string(),
        fmt(r.final_grad_norm),
        fmt(r.marginal_nll),
        fmt(r.aic),
        fmt(r.wall_seconds),
        fmt(r.alpha_prime),
        fmt(r.alpha),
    ];
    cells.extend(r.theta_prime.iter().map(|&v| fmt(v)));
    cells.extend(r.theta.iter().map(|&v| fmt(v)));
    cells.push(fmt(r.log_upsilon));
    for v in [r.phi_v, r.sigma_v, r.phi_u, r.sigma_u, r.phi_w, r.sigma_w, r.delta] {
        cells.push(fmt(v));
    }
    for list in [&r.alpha_pp, &r.beta_prime, &r.beta, &r.se_beta_prime, &r.se_beta, &r.true_beta_prime, &r.true_beta] {
        cells.extend(list.iter().map(|&v| fmt(v)));
    }
    cells.push(fmt(r.rmse));
    cells.push(fmt(r.mae));
    cells.push(fmt(r.hellinger));
    cells.join(",")
}

fn parse_record(cfg: &ScenarioConfig, line: &str) -> Result<ReplicateRecord> {
    let cells: Vec<&str> = line.split(',').collect();
    let mut k = 0usize;
    let mut next = || -> Result<&str> {
        let cell = cells.get(k).copied().ok_or_else(|| Error::SchemaMismatch("short record row".into()))?;
        k += 1;
        Ok(cell)
    };
    let parse_f = |s: &str| -> f64 {
        if s.is_empty() {
            f64::NAN
        } else {
            s.parse().unwrap_or(f64::NAN)
        }
    };
    let scenario: u8 = next()?.parse().map_err(|_| Error::SchemaMismatch("bad scenario".into()))?;
    let comb_fid: usize = next()?.parse().map_err(|_| Error::SchemaMismatch("bad comb".into()))?;
    let comb_fdd: usize = next()?.parse().map_err(|_| Error::SchemaMismatch("bad comb".into()))?;
    let replicate: usize = next()?.parse().map_err(|_| Error::SchemaMismatch("bad replicate".into()))?;
    let variant = Variant::parse(next()?)?;
    let converged: bool = next()?.parse().map_err(|_| Error::SchemaMismatch("bad converged".into()))?;
    let outer_iterations: usize = next()?.parse().map_err(|_| Error::SchemaMismatch("bad iterations".into()))?;
    let final_grad_norm = parse_f(next()?);
    let marginal_nll = parse_f(next()?);
    let aic = parse_f(next()?);
    let wall_seconds = parse_f(next()?);
    let alpha_prime = parse_f(next()?);
    let alpha = parse_f(next()?);
    let mut theta_prime = Vec::new();
    for _ in 0..cfg.theta_prime.len() {
        theta_prime.push(parse_f(next()?));
    }
    let mut theta = Vec::new();
    for _ in 0..cfg.theta.len() {
        theta.push(parse_f(next()?));
    }
    let log_upsilon = parse_f(next()?);
    let phi_v = parse_f(next()?);
    let sigma_v = parse_f(next()?);
    let phi_u = parse_f(next()?);
    let sigma_u = parse_f(next()?);
    let phi_w = parse_f(next()?);
    let sigma_w = parse_f(next()?);
    let delta = parse_f(next()?);
    let mut vec_of = |_tag: &str| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cfg.n_times);
        for _ in 0..cfg.n_times {
            out.push(parse_f(next()?));
        }
        Ok(out)
    };
    let alpha_pp = vec_of("alpha_pp")?;
    let beta_prime = vec_of("beta_prime")?;
    let beta = vec_of("beta")?;
    let se_beta_prime = vec_of("se_beta_prime")?;
    let se_beta = vec_of("se_beta")?;
    let true_beta_prime = vec_of("true_beta_prime")?;
    let true_beta = vec_of("true_beta")?;
    let rmse = parse_f(next()?);
    let mae = parse_f(next()?);
    let hellinger = parse_f(next()?);

    Ok(ReplicateRecord {
        scenario,
        comb: (comb_fid, comb_fdd),
        replicate,
        variant,
        converged,
        outer_iterations,
        final_grad_norm,
        marginal_nll,
        aic,
        wall_seconds,
        alpha_prime,
        alpha,
        theta_prime,
        theta,
        log_upsilon,
        phi_v,
        sigma_v,
        phi_u,
        sigma_u,
        phi_w,
        sigma_w,
        delta,
        alpha_pp,
        beta_prime,
        beta,
        se_beta_prime,
        se_beta,
        true_beta_prime,
        true_beta,
        rmse,
        mae,
        hellinger,
    })
}

fn replicate_file(out_dir: &Path, replicate: usize) -> std::path::PathBuf {
    out_dir.join(format!("rep_{replicate:04}.csv"))
}

fn load_replicate_file(cfg: &ScenarioConfig, path: &Path, variants: &[Variant]) -> Option<Vec<ReplicateRecord>> {
    let content = std::fs::read_to_string(path).ok()?;
    let mut lines = content.lines();
    if lines.next()? != record_header(cfg) {
        return None;
    }
    let records: Vec<ReplicateRecord> = lines
        .map(|line| parse_record(cfg, line))
        .collect::<Result<_>>()
        .ok()?;
    // Complete iff every requested variant is present.
    let complete = variants
        .iter()
        .all(|v| records.iter().any(|r| r.variant == *v));
    complete.then_some(records)
}

/// Runs the full simulation-estimation experiment: per replicate,
/// simulate truth and data, fit every requested variant and persist the
/// records. Existing complete replicate files are skipped, so an
/// interrupted run resumes where it stopped. Per-replicate fit failures
/// are recorded (converged = false) and the run continues.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    variants: &[Variant],
    out_dir: &Path,
    fit_config: &FitConfig,
) -> Result<Vec<ReplicateRecord>> {
    if variants.is_empty() {
        return Err(Error::invalid("at least one variant must be requested"));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let results: Vec<Result<Vec<ReplicateRecord>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|replicate| run_one_replicate(cfg, variants, out_dir, fit_config, replicate))
        .collect();

    let mut records = Vec::new();
    for result in results {
        records.extend(result?);
    }
    records.sort_by_key(|r| (r.replicate, r.variant.as_str()));
    Ok(records)
}

fn run_one_replicate(
    cfg: &ScenarioConfig,
    variants: &[Variant],
    out_dir: &Path,
    fit_config: &FitConfig,
    replicate: usize,
) -> Result<Vec<ReplicateRecord>> {
    let path = replicate_file(out_dir, replicate);
    if path.exists() {
        if let Some(records) = load_replicate_file(cfg, &path, variants) {
            return Ok(records);
        }
    }

    let sim = simulate_replicate(cfg, replicate)?;

    // Realized truths are persisted before fitting starts.
    let manifest = serde_json::json!({
        "scenario": cfg.scenario,
        "replicate": replicate,
        "master_seed": cfg.master_seed,
        "true_beta_prime": sim.truth.beta_prime,
        "true_beta": sim.truth.beta,
    });
    std::fs::write(
        out_dir.join(format!("rep_{replicate:04}.truth.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut records = Vec::with_capacity(variants.len());
    for &variant in variants {
        let record = match fit_replicate(cfg, &sim, variant, fit_config) {
            Ok(fit) => ReplicateRecord::from_fit(cfg, replicate, variant, &sim, &fit),
            Err(err) => {
                let log_path = out_dir.join(format!("rep_{replicate:04}.log"));
                let _ = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log_path)
                    .and_then(|mut f| writeln!(f, "{}: fit failed: {err}", variant.as_str()));
                ReplicateRecord::failed(cfg, replicate, variant, &sim)
            }
        };
        records.push(record);
    }

    let mut content = String::new();
    content.push_str(&record_header(cfg));
    content.push('\n');
    for record in &records {
        content.push_str(&record_row(record));
        content.push('\n');
    }
    std::fs::write(&path, content)?;
    Ok(records)
}

/// Reads every replicate record under an experiment directory.
pub fn load_records(out_dir: &Path) -> Result<(ScenarioConfig, Vec<ReplicateRecord>)> {
    let cfg: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json"))?)?;
    let mut records = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("rep_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    for path in entries {
        let content = std::fs::read_to_string(&path)?;
        let mut lines = content.lines();
        let header = lines.next().unwrap_or_default();
        if header != record_header(&cfg) {
            return Err(Error::SchemaMismatch(format!(
                "record header mismatch in {}",
                path.display()
            )));
        }
        for line in lines {
            records.push(parse_record(&cfg, line)?);
        }
    }
    records.sort_by_key(|r| (r.replicate, r.variant.as_str()));
    Ok((cfg, records))
}

/// Converts joint-model records into the inputs of [`metrics::summarize`].
pub fn estimates_of(records: &[ReplicateRecord], variant: Variant) -> Vec<ReplicateEstimates> {
    records
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| {
            let covariance = vec![
                ("phi_v".to_string(), r.phi_v),
                ("sigma_v".to_string(), r.sigma_v),
                ("phi_u".to_string(), r.phi_u),
                ("sigma_u".to_string(), r.sigma_u),
                ("phi_w".to_string(), r.phi_w),
                ("sigma_w".to_string(), r.sigma_w),
                ("delta".to_string(), r.delta),
            ];
            let mut preferential = Vec::new();
            if r.variant != Variant::FidOnly {
                for t in 0..r.beta_prime.len() {
                    preferential.push(("beta_prime".to_string(), t, r.beta_prime[t], r.true_beta_prime[t]));
                    preferential.push(("beta".to_string(), t, r.beta[t], r.true_beta[t]));
                }
            }
            ReplicateEstimates {
                converged: r.converged,
                covariance,
                preferential,
            }
        })
        .collect()
}

/// Emits the summary tables and metric distributions for an experiment
/// directory: `table1.csv` (preferential bias), `table2.csv` (covariance
/// parameters), `metric_distributions.csv` and `summary.json`.
pub fn write_reports(out_dir: &Path) -> Result<SummaryTable> {
    let (_cfg, records) = load_records(out_dir)?;
    let estimates = estimates_of(&records, Variant::Joint);
    let table = metrics::summarize(&estimates)?;

    let mut t1 = String::from("parameter,t,kind,median,q05,q95\n");
    for row in &table.preferential {
        t1.push_str(&format!(
            "{},{},{:?},{},{},{}\n",
            row.name,
            row.t + 1,
            row.kind,
            row.median,
            row.q05,
            row.q95
        ));
    }
    std::fs::write(out_dir.join("table1.csv"), t1)?;

    let mut t2 = String::from("parameter,mode,q05,q95\n");
    for row in &table.covariance {
        t2.push_str(&format!("{},{},{},{}\n", row.name, row.point, row.q05, row.q95));
    }
    std::fs::write(out_dir.join("table2.csv"), t2)?;

    let mut dist = String::from("variant,replicate,converged,rmse,mae,hellinger\n");
    for r in &records {
        dist.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.as_str(),
            r.replicate,
            r.converged,
            fmt(r.rmse),
            fmt(r.mae),
            fmt(r.hellinger)
        ));
    }
    std::fs::write(out_dir.join("metric_distributions.csv"), dist)?;

    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}
