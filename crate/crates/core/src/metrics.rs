//! Performance metrics and replicate summaries.
//!
//! Prediction quality is scored by RMSE, MAE and the Hellinger distance
//! between the empirical distributions of true and predicted surface
//! values. The Hellinger estimator is the shared-histogram plug-in:
//! equal-width bins over the pooled range with the bin count from the
//! pooled Freedman–Diaconis rule (at least 10 bins), then
//! `H = sqrt(1 − Σ sqrt(p_i q_i))`.
//!
//! Parameter recovery across replicates is summarized the way the study
//! tables report it: covariance parameters by Gaussian-KDE mode
//! (Silverman bandwidth) with empirical 5%/95% quantiles, preferential
//! parameters by the median and 5%/95% quantiles of relative bias —
//! raw bias, flagged, where the true value is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "rmse length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("rmse of empty vectors"));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "mae length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mae of empty vectors"));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Hellinger distance between two discrete mass vectors (must each sum
/// to 1): `sqrt(1 − Σ sqrt(p_i q_i))`.
pub fn hellinger_discrete(p: &[f64], q: &[f64]) -> f64 {
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum();
    (1.0 - bc).max(0.0).sqrt()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    // Type-7 (linear interpolation) empirical quantile.
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < n {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

/// Empirical quantile (type-7 interpolation).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantile_sorted(&sorted, q))
}

/// Hellinger distance between the empirical distributions of two samples
/// on a shared equal-width histogram. Symmetric by construction; 0 for
/// identical samples and 1 for disjoint supports.
pub fn hellinger(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::invalid("hellinger distance of an empty sample"));
    }
    let mut pooled: Vec<f64> = sample_a.iter().chain(sample_b).cloned().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = pooled[0];
    let hi = pooled[pooled.len() - 1];
    if hi == lo {
        // All mass in one shared bin.
        return Ok(0.0);
    }
    let iqr = quantile_sorted(&pooled, 0.75) - quantile_sorted(&pooled, 0.25);
    let fd_width = 2.0 * iqr / (pooled.len() as f64).cbrt();
    let n_bins = if fd_width > 0.0 {
        (((hi - lo) / fd_width).ceil() as usize).max(10)
    } else {
        10
    };

    let width = (hi - lo) / n_bins as f64;
    let bin_of = |v: f64| -> usize { (((v - lo) / width) as usize).min(n_bins - 1) };
    let mut p = vec![0.0; n_bins];
    let mut q = vec![0.0; n_bins];
    for &v in sample_a {
        p[bin_of(v)] += 1.0 / sample_a.len() as f64;
    }
    for &v in sample_b {
        q[bin_of(v)] += 1.0 / sample_b.len() as f64;
    }
    Ok(hellinger_discrete(&p, &q))
}

/// How a bias value is to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    /// `(estimate − truth) / truth`.
    Relative,
    /// Raw `estimate − truth`, reported where the truth is zero.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    pub value: f64,
    pub kind: BiasKind,
}

/// Relative bias `(estimate − truth)/truth`; falls back to flagged raw
/// bias when the truth is zero.
pub fn relative_bias(estimate: f64, truth: f64) -> Bias {
    if truth == 0.0 {
        Bias { value: estimate, kind: BiasKind::Absolute }
    } else {
        Bias {
            value: (estimate - truth) / truth,
            kind: BiasKind::Relative,
        }
    }
}

/// Gaussian-KDE argmax with Silverman bandwidth, evaluated on a fine
/// grid. Degenerate samples return their common value.
pub fn kde_mode(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("mode of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread * n.powf(-0.2);
    if bw == 0.0 {
        return Ok(sorted[0]);
    }

    let lo = sorted[0] - 3.0 * bw;
    let hi = sorted[sorted.len() - 1] + 3.0 * bw;
    let n_grid = 512;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..n_grid {
        let x = lo + (hi - lo) * k as f64 / (n_grid - 1) as f64;
        let density: f64 = values
            .iter()
            .map(|&v| {
                let z = (x - v) / bw;
                (-0.5 * z * z).exp()
            })
            .sum();
        if density > best.0 {
            best = (density, x);
        }
    }
    Ok(best.1)
}

/// Point-and-interval summary of one scalar parameter across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    /// KDE mode for covariance parameters, median for bias rows.
    pub point: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Bias summary of one preferential coefficient at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub name: String,
    pub t: usize,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
    pub kind: BiasKind,
}

/// Covariance parameters (KDE mode + 90% interval) and preferential
/// parameters (median bias + 90% interval) across successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SummaryTable {
    pub n_replicates: usize,
    pub n_excluded: usize,
    pub covariance: Vec<ParamSummary>,
    pub preferential: Vec<BiasSummary>,
}

/// Raw ingredients for [`summarize`]: one row per successful replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimates {
    pub converged: bool,
    /// Named covariance-parameter estimates (interpretable scale).
    pub covariance: Vec<(String, f64)>,
    /// Per-time `(name, t, estimate, truth)` preferential coefficients.
    pub preferential: Vec<(String, usize, f64, f64)>,
}

/// Summarizes replicate estimates; fails below 5 successes. Replicates
/// whose fit did not converge are excluded and counted.
pub fn summarize(records: &[ReplicateEstimates]) -> Result<SummaryTable> {
    let kept: Vec<&ReplicateEstimates> = records.iter().filter(|r| r.converged).collect();
    let n_excluded = records.len() - kept.len();
    if kept.len() < 5 {
        return Err(Error::Summary(format!(
            "only {} of {} replicates converged; at least 5 required",
            kept.len(),
            records.len()
        )));
    }

    let mut table = SummaryTable {
        n_replicates: records.len(),
        n_excluded,
        covariance: Vec::new(),
        preferential: Vec::new(),
    };
    let first = kept.first().expect("at least 5 kept");
    for (idx, (name, _)) in first.covariance.iter().enumerate() {
        let values: Vec<f64> = kept.iter().map(|r| r.covariance[idx].1).collect();
        table.covariance.push(ParamSummary {
            name: name.clone(),
            point: kde_mode(&values)?,
            q05: quantile(&values, 0.05)?,
            q95: quantile(&values, 0.95)?,
        });
    }
    for (idx, (name, t, _, _)) in first.preferential.iter().enumerate() {
        let biases: Vec<Bias> = kept
            .iter()
            .map(|r| {
                let (_, _, est, truth) = &r.preferential[idx];
                relative_bias(*est, *truth)
            })
            .collect();
        let values: Vec<f64> = biases.iter().map(|b| b.value).collect();
        table.preferential.push(BiasSummary {
            name: name.clone(),
            t: *t,
            median: quantile(&values, 0.5)?,
            q05: quantile(&values, 0.05)?,
            q95: quantile(&values, 0.95)?,
            kind: biases[0].kind,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_relative_eq!(
            rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            (25.0f64 / 2.0).sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.535_533_905_932_738, max_relative = 1e-12);
        // Permutation applied to both vectors leaves the value unchanged.
        let pred = [0.3, 1.7, -2.0, 0.9];
        let truth = [0.1, 2.0, -1.0, 1.4];
        let perm = [2usize, 0, 3, 1];
        let pred_p: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let truth_p: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
        assert_eq!(rmse(&pred, &truth).unwrap(), rmse(&pred_p, &truth_p).unwrap());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[5.0, -1.0], &[5.0, -1.0]).unwrap(), 0.0);
        assert_relative_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(values in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let pred: Vec<f64> = values.iter().map(|v| v.0).collect();
            let truth: Vec<f64> = values.iter().map(|v| v.1).collect();
            let mae_v = mae(&pred, &truth).unwrap();
            let rmse_v = rmse(&pred, &truth).unwrap();
            prop_assert!(mae_v <= rmse_v + 1e-12);
        }

        #[test]
        fn hellinger_is_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 2..60),
            b in proptest::collection::vec(-5.0f64..5.0, 2..60),
        ) {
            let h_ab = hellinger(&a, &b).unwrap();
            let h_ba = hellinger(&b, &a).unwrap();
            prop_assert_eq!(h_ab.to_bits(), h_ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&h_ab));
        }
    }

    #[test]
    fn hellinger_cases() {
        let sample: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin()).collect();
        assert_eq!(hellinger(&sample, &sample).unwrap(), 0.0);

        let far: Vec<f64> = sample.iter().map(|v| v + 1e6).collect();
        assert_eq!(hellinger(&sample, &far).unwrap(), 1.0);

        // Hand case on the discrete core.
        assert_relative_eq!(
            hellinger_discrete(&[1.0, 0.0], &[0.5, 0.5]),
            (1.0 - 0.5f64.sqrt()).sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            hellinger_discrete(&[1.0, 0.0], &[0.5, 0.5]),
            0.541_196_100_146_196_9,
            max_relative = 1e-12
        );
        assert!(hellinger(&[], &[1.0]).is_err());
    }

    #[test]
    fn relative_bias_cases() {
        assert_eq!(relative_bias(2.0, 2.0).value, 0.0);
        let b = relative_bias(1.5, 2.0);
        assert_eq!(b.kind, BiasKind::Relative);
        assert_relative_eq!(b.value, -0.25, max_relative = 1e-14);
        let raw = relative_bias(0.06, 0.0);
        assert_eq!(raw.kind, BiasKind::Absolute);
        assert_relative_eq!(raw.value, 0.06, max_relative = 1e-14);
    }

    #[test]
    fn kde_mode_degenerate_and_symmetric() {
        let constant = vec![3.25; 12];
        assert_eq!(kde_mode(&constant).unwrap(), 3.25);
        assert_eq!(quantile(&constant, 0.05).unwrap(), 3.25);
        assert_eq!(quantile(&constant, 0.95).unwrap(), 3.25);

        // Symmetric unimodal sample: mode close to the median.
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(12);
        let draws: Vec<f64> = (0..400)
            .map(|_| {
                let s: f64 = rng.sample(rand_distr::StandardNormal);
                1.7 + 0.4 * s
            })
            .collect();
        let mode = kde_mode(&draws).unwrap();
        let median = quantile(&draws, 0.5).unwrap();
        let n = draws.len() as f64;
        let bw = 0.9 * 0.4 * n.powf(-0.2);
        assert!(
            (mode - median).abs() < 2.0 * bw,
            "mode {mode} vs median {median} (bandwidth {bw})"
        );
    }

    #[test]
    fn quantile_coverage_on_synthetic_sample() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(77);
        let draws: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let q05 = quantile(&draws, 0.05).unwrap();
        let q95 = quantile(&draws, 0.95).unwrap();
        // True quantiles ±1.6449; asymptotic SE ≈ 0.149 at n = 200.
        assert!((q05 + 1.6449).abs() < 0.6, "q05 = {q05}");
        assert!((q95 - 1.6449).abs() < 0.6, "q95 = {q95}");
        assert!(q05 < q95);
    }

    fn fake_record(converged: bool, delta: f64, beta: f64, truth: f64) -> ReplicateEstimates {
        ReplicateEstimates {
            converged,
            covariance: vec![("delta".into(), delta)],
            preferential: vec![("beta".into(), 0, beta, truth)],
        }
    }

    #[test]
    fn summarize_excludes_failed_replicates() {
        let mut records: Vec<ReplicateEstimates> =
            (0..10).map(|k| fake_record(true, 0.8 + 0.01 * k as f64, 1.9, 2.0)).collect();
        records.push(fake_record(false, 99.0, 99.0, 2.0));
        let table = summarize(&records).unwrap();
        assert_eq!(table.n_replicates, 11);
        assert_eq!(table.n_excluded, 1);
        let delta = &table.covariance[0];
        assert!(delta.point > 0.7 && delta.point < 1.0, "mode {}", delta.point);
        assert!(delta.q05 <= delta.point && delta.point <= delta.q95);
        let beta = &table.preferential[0];
        assert_eq!(beta.kind, BiasKind::Relative);
        assert_relative_eq!(beta.median, -0.05, max_relative = 1e-12);

        // Degenerate distribution: interval (v, v).
        let same: Vec<ReplicateEstimates> = (0..6).map(|_| fake_record(true, 0.5, 0.0, 0.0)).collect();
        let table = summarize(&same).unwrap();
        assert_eq!(table.covariance[0].point, 0.5);
        assert_eq!((table.covariance[0].q05, table.covariance[0].q95), (0.5, 0.5));
        assert_eq!(table.preferential[0].kind, BiasKind::Absolute);

        let few: Vec<ReplicateEstimates> = (0..4).map(|_| fake_record(true, 0.5, 1.0, 2.0)).collect();
        assert!(summarize(&few).is_err());
    }
}
