//! Two-part observation model.
//!
//! Presence/absence is Bernoulli with logit link; positive biomass is
//! Gamma with log link, parameterized by its conditional mean ζ and
//! standard deviation υ through shape `a = ζ²/υ²` and scale `b = υ²/ζ`.
//! The observed biomass index of vessel `v` scales the relative biomass
//! by a catchability factor `k(v) = exp{α_c + Σ f_c(F(h,v)) + γ_c(v)}`,
//! with the research vessel's `k(1)` pinned to a constant so the scale of
//! μ is identified.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Research vessel id; its catchability is a fixed constant.
pub const RESEARCH_VESSEL: usize = 1;

/// Intercepts and covariate coefficients of the two linear predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    /// Intercept of the presence predictor (logit scale).
    pub alpha_prime: f64,
    /// Intercept of the biomass predictor (log scale).
    pub alpha: f64,
    /// Coefficients of the presence design columns.
    pub theta_prime: Vec<f64>,
    /// Coefficients of the biomass design columns.
    pub theta: Vec<f64>,
}

impl FixedEffects {
    pub fn zeros(p_presence: usize, p_biomass: usize) -> Self {
        FixedEffects {
            alpha_prime: 0.0,
            alpha: 0.0,
            theta_prime: vec![0.0; p_presence],
            theta: vec![0.0; p_biomass],
        }
    }
}

/// Conditional standard deviation of positive biomass, on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaDispersion {
    pub log_upsilon: f64,
}

impl GammaDispersion {
    pub fn new(upsilon: f64) -> Result<Self> {
        if !(upsilon > 0.0) {
            return Err(Error::invalid(format!("upsilon must be positive, got {upsilon}")));
        }
        Ok(GammaDispersion { log_upsilon: upsilon.ln() })
    }

    pub fn upsilon(&self) -> f64 {
        self.log_upsilon.exp()
    }
}

/// Vessel catchability effects. `gamma_c[i]` is the random effect of
/// vessel `i + 2` (commercial vessels are `2..=n+1`); the research vessel
/// keeps `k(1) = reference_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catchability {
    pub alpha_c: f64,
    pub gamma_c: Vec<f64>,
    pub log_sigma_gamma: f64,
    /// Coefficients for vessel-attribute design columns, if any.
    pub fixed_coefs: Vec<f64>,
    pub reference_k: f64,
}

impl Catchability {
    /// No catchability modeling: every vessel has k = 1.
    pub fn disabled() -> Self {
        Catchability {
            alpha_c: 0.0,
            gamma_c: Vec::new(),
            log_sigma_gamma: 0.0,
            fixed_coefs: Vec::new(),
            reference_k: 1.0,
        }
    }

    pub fn n_commercial(&self) -> usize {
        self.gamma_c.len()
    }

    pub fn sigma_gamma(&self) -> f64 {
        self.log_sigma_gamma.exp()
    }

    /// `log k(v)`; commercial vessels may carry an attribute design row.
    pub fn log_k(&self, vessel: usize, attr_row: Option<&[f64]>) -> Result<f64> {
        if vessel == RESEARCH_VESSEL {
            return Ok(self.reference_k.ln());
        }
        let idx = vessel
            .checked_sub(2)
            .filter(|&i| i < self.gamma_c.len() || self.gamma_c.is_empty())
            .ok_or_else(|| Error::Lookup(format!("unknown vessel id {vessel}")))?;
        let gamma = if self.gamma_c.is_empty() { 0.0 } else { self.gamma_c[idx] };
        let fixed = match (attr_row, self.fixed_coefs.is_empty()) {
            (_, true) => 0.0,
            (Some(row), false) => {
                if row.len() != self.fixed_coefs.len() {
                    return Err(Error::invalid(format!(
                        "vessel {vessel}: attribute row has {} columns, expected {}",
                        row.len(),
                        self.fixed_coefs.len()
                    )));
                }
                row.iter().zip(&self.fixed_coefs).map(|(x, c)| x * c).sum()
            }
            (None, false) => {
                return Err(Error::Lookup(format!(
                    "vessel {vessel}: attribute columns required by the catchability model"
                )))
            }
        };
        Ok(self.alpha_c + fixed + gamma)
    }
}

/// Inverse logit, stable on both tails.
pub fn presence_prob(linear_predictor: f64) -> f64 {
    if linear_predictor >= 0.0 {
        1.0 / (1.0 + (-linear_predictor).exp())
    } else {
        let e = linear_predictor.exp();
        e / (1.0 + e)
    }
}

/// Expected relative biomass under presence (log link).
pub fn mean_biomass(linear_predictor: f64) -> f64 {
    linear_predictor.exp()
}

/// Moment-matching Gamma parameters: `shape·scale = ζ` and
/// `shape·scale² = υ²` hold exactly.
pub fn gamma_shape_scale(zeta: f64, upsilon: f64) -> Result<(f64, f64)> {
    if !(zeta > 0.0) || !(upsilon > 0.0) {
        return Err(Error::invalid(format!(
            "gamma moments need zeta > 0 and upsilon > 0, got ({zeta}, {upsilon})"
        )));
    }
    let shape = (zeta / upsilon) * (zeta / upsilon);
    let scale = upsilon * upsilon / zeta;
    Ok((shape, scale))
}

/// `k(v)` as a multiplicative factor.
pub fn catchability(vessel: usize, c: &Catchability, attr_row: Option<&[f64]>) -> Result<f64> {
    Ok(c.log_k(vessel, attr_row)?.exp())
}

/// Expected biomass of the hurdle process: `E[S] = E[Z]·E[Y] = π·E[Y]`.
pub fn hurdle_moments(pi: f64, mean_y: f64) -> f64 {
    pi * mean_y
}

/// Simulates hurdle observations: `z_i ~ Bernoulli(π_i)` and, under
/// presence, `y_i ~ Gamma(ζ_i²/υ², υ²/ζ_i)`; absences are recorded with
/// `y_i = 0`. Deterministic given the seed.
pub fn simulate_observations(
    pi: &[f64],
    zeta: &[f64],
    upsilon: f64,
    rng_seed: u64,
) -> Result<(Vec<u8>, Vec<f64>)> {
    if pi.len() != zeta.len() {
        return Err(Error::invalid("pi and zeta must have equal lengths"));
    }
    let mut rng = rng_from_seed(rng_seed);
    simulate_observations_with(pi, zeta, upsilon, &mut rng)
}

pub fn simulate_observations_with<R: Rng>(
    pi: &[f64],
    zeta: &[f64],
    upsilon: f64,
    rng: &mut R,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut z = Vec::with_capacity(pi.len());
    let mut y = Vec::with_capacity(pi.len());
    for (i, (&p, &m)) in pi.iter().zip(zeta).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("pi[{i}] = {p} outside [0, 1]")));
        }
        let present = rng.gen::<f64>() < p;
        if present {
            let (shape, scale) = gamma_shape_scale(m, upsilon)?;
            let gamma = Gamma::new(shape, scale)
                .map_err(|e| Error::invalid(format!("gamma parameters at {i}: {e}")))?;
            let draw: f64 = gamma.sample(rng);
            z.push(1);
            // Guard against underflow to zero in extreme shape regimes.
            y.push(draw.max(f64::MIN_POSITIVE));
        } else {
            z.push(0);
            y.push(0.0);
        }
    }
    Ok((z, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::ContinuousCDF;

    #[test]
    fn inverse_logit_cases() {
        assert_eq!(presence_prob(0.0), 0.5);
        assert!(presence_prob(20.0) >= 1.0 - 1e-8);
        assert!(presence_prob(20.0) <= 1.0);
        assert!(presence_prob(800.0).is_finite());
        assert!(presence_prob(-800.0) >= 0.0);
        assert_relative_eq!(presence_prob(3.0_f64.ln()), 0.75, max_relative = 1e-14);
    }

    #[test]
    fn mean_biomass_cases() {
        assert_eq!(mean_biomass(0.0), 1.0);
        assert_relative_eq!(mean_biomass(2.0_f64.ln()), 2.0, max_relative = 1e-14);
        assert_relative_eq!(mean_biomass(0.3 + 0.7), std::f64::consts::E, max_relative = 1e-14);
    }

    #[test]
    fn gamma_moments_are_exact() {
        let (shape, scale) = gamma_shape_scale(2.0, 1.0).unwrap();
        assert_eq!((shape, scale), (4.0, 0.5));
        assert_eq!(gamma_shape_scale(1.0, 1.0).unwrap(), (1.0, 1.0));
        let (shape, scale) = gamma_shape_scale(5.0, 2.0).unwrap();
        assert_relative_eq!(shape, 6.25, max_relative = 1e-14);
        assert_relative_eq!(scale, 0.8, max_relative = 1e-14);

        // Reconstructed mean and variance match the inputs.
        for (zeta, upsilon) in [(0.37, 1.9), (12.0, 0.4), (5.0, 2.0)] {
            let (a, b) = gamma_shape_scale(zeta, upsilon).unwrap();
            assert_relative_eq!(a * b, zeta, max_relative = 1e-12);
            assert_relative_eq!(a * b * b, upsilon * upsilon, max_relative = 1e-12);
        }

        assert!(gamma_shape_scale(0.0, 1.0).is_err());
        assert!(gamma_shape_scale(1.0, -2.0).is_err());
    }

    #[test]
    fn catchability_cases() {
        let mut c = Catchability::disabled();
        c.gamma_c = vec![0.0, -0.5];
        assert_eq!(catchability(RESEARCH_VESSEL, &c, None).unwrap(), 1.0);
        assert_eq!(catchability(2, &c, None).unwrap(), 1.0);
        c.alpha_c = 0.5;
        assert_relative_eq!(catchability(3, &c, None).unwrap(), 1.0, max_relative = 1e-14);
        assert!(catchability(0, &c, None).is_err());
        assert!(catchability(7, &c, None).is_err());
    }

    #[test]
    fn catchability_scaling_leaves_zeta_invariant() {
        // Multiplying k by c and dividing mu by c preserves the index.
        let mut catch = Catchability::disabled();
        catch.gamma_c = vec![0.3];
        let mu = 2.5;
        let zeta = catchability(2, &catch, None).unwrap() * mu;
        let mut scaled = catch.clone();
        scaled.alpha_c += 2.0_f64.ln();
        let zeta_scaled = catchability(2, &scaled, None).unwrap() * (mu / 2.0);
        assert_relative_eq!(zeta, zeta_scaled, max_relative = 1e-12);
    }

    #[test]
    fn simulate_degenerate_probabilities() {
        let pi_one = vec![1.0; 50];
        let zeta = vec![2.0; 50];
        let (z, y) = simulate_observations(&pi_one, &zeta, 1.0, 3).unwrap();
        assert!(z.iter().all(|&b| b == 1));
        assert!(y.iter().all(|&v| v > 0.0));

        let pi_zero = vec![0.0; 50];
        let (z, y) = simulate_observations(&pi_zero, &zeta, 1.0, 3).unwrap();
        assert!(z.iter().all(|&b| b == 0));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulate_is_deterministic() {
        let pi = vec![0.6; 100];
        let zeta = vec![3.0; 100];
        let a = simulate_observations(&pi, &zeta, 1.5, 11).unwrap();
        let b = simulate_observations(&pi, &zeta, 1.5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulated_positive_mean_matches_zeta() {
        let n = 10_000;
        let zeta = 3.2;
        let upsilon = 1.4;
        let (z, y) = simulate_observations(&vec![0.7; n], &vec![zeta; n], upsilon, 21).unwrap();
        let positives: Vec<f64> = y.iter().zip(&z).filter(|(_, &zi)| zi == 1).map(|(&v, _)| v).collect();
        let mean = positives.iter().sum::<f64>() / positives.len() as f64;
        let se = upsilon / (positives.len() as f64).sqrt();
        assert!(
            (mean - zeta).abs() < 3.0 * se,
            "positive-part mean {mean} vs zeta {zeta} (3 SE = {})",
            3.0 * se
        );
    }

    #[test]
    fn hurdle_law_consistency() {
        // P(S = 0) = 1 - pi; S | S > 0 follows the moment-matched Gamma
        // (Kolmogorov-Smirnov at alpha = 0.01).
        let n = 10_000;
        let pi = 0.65;
        let zeta = 2.0;
        let upsilon = 1.0;
        let (z, y) = simulate_observations(&vec![pi; n], &vec![zeta; n], upsilon, 5).unwrap();

        let n_zero = z.iter().filter(|&&b| b == 0).count() as f64;
        let p_zero = n_zero / n as f64;
        let se = (pi * (1.0 - pi) / n as f64).sqrt();
        assert!((p_zero - (1.0 - pi)).abs() < 4.0 * se);

        let mut positives: Vec<f64> = y.iter().cloned().filter(|&v| v > 0.0).collect();
        positives.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (shape, scale) = gamma_shape_scale(zeta, upsilon).unwrap();
        let dist = statrs::distribution::Gamma::new(shape, 1.0 / scale).unwrap();
        let m = positives.len();
        let mut ks: f64 = 0.0;
        for (i, &v) in positives.iter().enumerate() {
            let cdf = dist.cdf(v);
            let hi = (i + 1) as f64 / m as f64 - cdf;
            let lo = cdf - i as f64 / m as f64;
            ks = ks.max(hi.max(lo));
        }
        let crit = 1.628 / (m as f64).sqrt();
        assert!(ks < crit, "KS statistic {ks} exceeds the alpha=0.01 critical value {crit}");
    }

    #[test]
    fn hurdle_moment_product() {
        assert_eq!(hurdle_moments(0.5, 2.0), 1.0);
        assert_eq!(hurdle_moments(0.0, 123.0), 0.0);
        assert_eq!(hurdle_moments(1.0, 3.25), 3.25);
    }
}
