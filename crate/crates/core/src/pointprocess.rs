//! Sampling-location processes and the simulation scenarios.
//!
//! Survey (FID) locations are uniform or systematic and carry no
//! information about the latent fields. Commercial (FDD) locations follow
//! an inhomogeneous Poisson process whose per-time log intensity is
//! `α″(t) + β′(t)·V(x) + β(t)·U(x)`; with sample sizes fixed per time,
//! realizations are drawn conditional on the count: nodes selected
//! without replacement with probability proportional to `λ·cell_area`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::MaternInterpretable;
use crate::grid::SpatialGrid;
use crate::rng::rng_from_seed;

/// Per-time coefficients of the preferential intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferentialParams {
    /// Per-time intercepts α″(t).
    pub alpha_pp: Vec<f64>,
    /// Per-time presence-preference coefficients β′(t).
    pub beta_prime: Vec<f64>,
    /// Per-time biomass-preference coefficients β(t).
    pub beta: Vec<f64>,
}

impl PreferentialParams {
    pub fn zeros(n_times: usize) -> Self {
        PreferentialParams {
            alpha_pp: vec![0.0; n_times],
            beta_prime: vec![0.0; n_times],
            beta: vec![0.0; n_times],
        }
    }

    pub fn n_times(&self) -> usize {
        self.alpha_pp.len()
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        if self.alpha_pp.len() != n_times || self.beta_prime.len() != n_times || self.beta.len() != n_times {
            return Err(Error::invalid("preferential parameter lengths must equal T"));
        }
        if self
            .alpha_pp
            .iter()
            .chain(&self.beta_prime)
            .chain(&self.beta)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("preferential parameters must be finite"));
        }
        Ok(())
    }
}

/// `λ(x, t) = exp(α″(t) + β′(t)·V(x) + β(t)·U(x))` at every node.
/// Only interior nodes are consulted by quadrature and sampling.
pub fn intensity_surface(
    _grid: &SpatialGrid,
    v: &[f64],
    u: &[f64],
    p: &PreferentialParams,
    t: usize,
) -> Vec<f64> {
    let a = p.alpha_pp[t];
    let bp = p.beta_prime[t];
    let b = p.beta[t];
    v.iter()
        .zip(u)
        .map(|(&vj, &uj)| (a + bp * vj + b * uj).exp())
        .collect()
}

/// FID sampling design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidMode {
    /// i.i.d. uniform locations over the interior domain.
    Uniform,
    /// Fixed nodes on a regular sublattice.
    Systematic,
}

/// Draws `n` survey locations.
pub fn sample_fid(grid: &SpatialGrid, n: usize, mode: FidMode, rng_seed: u64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let mut rng = rng_from_seed(rng_seed);
    sample_fid_with(grid, n, mode, &mut rng)
}

pub fn sample_fid_with<R: Rng>(grid: &SpatialGrid, n: usize, mode: FidMode, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    match mode {
        FidMode::Uniform => {
            let b = grid.bounds;
            Ok((0..n)
                .map(|_| {
                    (
                        b.xmin + rng.gen::<f64>() * b.width(),
                        b.ymin + rng.gen::<f64>() * b.height(),
                    )
                })
                .collect())
        }
        FidMode::Systematic => {
            if n > grid.n_interior() {
                return Err(Error::invalid(format!(
                    "systematic design of {n} exceeds the {} interior nodes",
                    grid.n_interior()
                )));
            }
            // k x k cell-centered positions snapped to the nearest node;
            // n = k^2 gives the evenly spaced sublattice.
            let k = (n as f64).sqrt().ceil() as usize;
            let b = grid.bounds;
            let mut locations = Vec::with_capacity(n);
            'outer: for iy in 0..k {
                for ix in 0..k {
                    let x = b.xmin + (ix as f64 + 0.5) / k as f64 * b.width();
                    let y = b.ymin + (iy as f64 + 0.5) / k as f64 * b.height();
                    let node = grid.nearest_interior_node(x, y)?;
                    locations.push(grid.node_coord(node));
                    if locations.len() == n {
                        break 'outer;
                    }
                }
            }
            Ok(locations)
        }
    }
}

/// Draws `n` distinct interior nodes without replacement with probability
/// proportional to `λ·cell_area` (an IPP realization conditional on the
/// count).
pub fn sample_fdd(grid: &SpatialGrid, lambda: &[f64], n: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let mut rng = rng_from_seed(rng_seed);
    sample_fdd_with(grid, lambda, n, &mut rng)
}

pub fn sample_fdd_with<R: Rng>(grid: &SpatialGrid, lambda: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if lambda.len() != grid.n_nodes() {
        return Err(Error::invalid("lambda must have one value per node"));
    }
    if n > grid.n_interior() {
        return Err(Error::invalid(format!(
            "cannot draw {n} distinct nodes from {} interior nodes",
            grid.n_interior()
        )));
    }
    let interior = grid.interior_nodes();
    let mut weights: Vec<f64> = Vec::with_capacity(interior.len());
    for &node in interior {
        let w = lambda[node] * grid.quad_weight(node);
        if !(w.is_finite() && lambda[node] > 0.0) {
            return Err(Error::invalid(format!(
                "intensity at node {node} must be positive and finite, got {}",
                lambda[node]
            )));
        }
        weights.push(w);
    }

    let mut total: f64 = weights.iter().sum();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = usize::MAX;
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if u < w {
                chosen = k;
                break;
            }
            u -= w;
        }
        if chosen == usize::MAX {
            // Rounding slack: fall back to the last positive weight.
            chosen = weights.iter().rposition(|&w| w > 0.0).expect("positive weight remains");
        }
        picked.push(interior[chosen]);
        total -= weights[chosen];
        weights[chosen] = 0.0;
    }
    Ok(picked)
}

/// Mean/SD of a per-time coefficient draw; `sd = 0` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
}

impl NormalSpec {
    pub fn fixed(value: f64) -> Self {
        NormalSpec { mean: value, sd: 0.0 }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            self.mean
        } else {
            self.mean + self.sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        }
    }
}

/// Simulated covariate field: a zero-mean GMRF with its own range and
/// marginal standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateFieldSpec {
    pub name: String,
    pub phi: f64,
    pub sigma: f64,
}

/// Full configuration of one simulation-estimation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: u8,
    pub n_times: usize,
    /// Per-time sample sizes `(n_I, n_D)`.
    pub comb: (usize, usize),
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub pad_fraction: f64,
    pub fid_mode: FidMode,
    pub beta_prime_dist: NormalSpec,
    pub beta_dist: NormalSpec,
    pub field_v: MaternInterpretable,
    pub field_u: MaternInterpretable,
    pub field_w: MaternInterpretable,
    pub delta: f64,
    pub covariates_presence: Vec<CovariateFieldSpec>,
    pub covariates_biomass: Vec<CovariateFieldSpec>,
    pub theta_prime: Vec<f64>,
    pub theta: Vec<f64>,
    /// Gamma dispersion used when simulating positive biomass.
    pub upsilon: f64,
    /// Inference mesh subsampling factor (1 = the simulation grid doubles
    /// as the inference mesh).
    #[serde(default = "default_mesh_subsample")]
    pub mesh_subsample: usize,
    pub replicates: usize,
    pub master_seed: u64,
}

fn default_mesh_subsample() -> usize {
    1
}

/// Scenario presets of the simulation study.
///
/// - Scenario 1: strong preference on biomass, `β′(t) = 0`,
///   `β(t) ~ N(2, 0.25)`.
/// - Scenario 2: strong preference on presence, `β′(t) ~ N(2, 0.25)`,
///   `β(t) = 0`.
/// - Scenario 3: moderate preference on presence and strong on biomass,
///   `β′(t) ~ N(1, 0.25)`, `β(t) ~ N(2, 0.25)`.
///
/// Variances of the draw distributions are 0.25 (sd = 0.5). Latent-field
/// truth: `(φ_V, σ²_V) = (0.15, 0.80)`, `(φ_U, σ²_U) = (0.20, 1.00)`,
/// `(φ_W, σ²_W) = (0.20, 1.00)`, `δ = 0.8`; all intercepts zero.
pub fn scenario_preset(id: u8, n_times: usize, rng_seed: u64) -> Result<ScenarioConfig> {
    let (beta_prime_dist, beta_dist) = match id {
        1 => (NormalSpec::fixed(0.0), NormalSpec { mean: 2.0, sd: 0.5 }),
        2 => (NormalSpec { mean: 2.0, sd: 0.5 }, NormalSpec::fixed(0.0)),
        3 => (NormalSpec { mean: 1.0, sd: 0.5 }, NormalSpec { mean: 2.0, sd: 0.5 }),
        other => return Err(Error::invalid(format!("unknown scenario id {other}"))),
    };
    Ok(ScenarioConfig {
        scenario: id,
        n_times,
        comb: (100, 100),
        grid_nx: 60,
        grid_ny: 60,
        pad_fraction: 0.2,
        fid_mode: FidMode::Uniform,
        beta_prime_dist,
        beta_dist,
        field_v: MaternInterpretable { phi: 0.15, sigma: 0.80_f64.sqrt() },
        field_u: MaternInterpretable { phi: 0.20, sigma: 1.0 },
        field_w: MaternInterpretable { phi: 0.20, sigma: 1.0 },
        delta: 0.8,
        covariates_presence: vec![
            CovariateFieldSpec { name: "cp1".into(), phi: 0.25, sigma: 1.5 },
            CovariateFieldSpec { name: "cp2".into(), phi: 0.2, sigma: 1.0 },
        ],
        covariates_biomass: vec![
            CovariateFieldSpec { name: "cb1".into(), phi: 0.3, sigma: 1.75 },
            CovariateFieldSpec { name: "cb2".into(), phi: 0.15, sigma: 2.0 },
        ],
        theta_prime: vec![-1.0, 1.5],
        theta: vec![1.0, -0.5],
        upsilon: 1.0,
        mesh_subsample: 1,
        replicates: 100,
        master_seed: rng_seed,
    })
}

/// Biomass coefficients reported in the study text rather than the
/// figure annotation; available behind a configuration switch.
pub fn theta_text_variant() -> Vec<f64> {
    vec![3.0, -0.5]
}

/// Realized per-replicate preferential truth, drawn once per replicate
/// from the scenario's coefficient distributions.
pub fn draw_preferential(cfg: &ScenarioConfig, replicate: u64) -> PreferentialParams {
    let policy = crate::rng::SeedPolicy::new(cfg.master_seed);
    let mut rng = policy.stream(replicate, "scenario.preferential");
    let mut p = PreferentialParams::zeros(cfg.n_times);
    for t in 0..cfg.n_times {
        p.beta_prime[t] = cfg.beta_prime_dist.draw(&mut rng);
        p.beta[t] = cfg.beta_dist.draw(&mut rng);
        // alpha_pp stays 0 across scenarios.
    }
    p
}
