//! Exact gradient of the Laplace marginal.
//!
//! With `û(θ)` the inner mode, `f` the joint NLL, `g = ∂f/∂u`,
//! `H = ∂²f/∂u²` and `Z = H⁻¹` (selected inverse on the Hessian
//! pattern), the envelope identity gives
//!
//! `dM/dθ = ∂f/∂θ + ½·tr(Z·∂H/∂θ) − ½·rᵀ·(∂g/∂θ)`
//!
//! where `r = H⁻¹·t` and `t_k = tr(Z·∂H/∂u_k)` collects the
//! third-derivative response of the curvature to the mode shift. One
//! factorization, one selected inverse and one extra solve replace the
//! `2·n_params` finite-difference evaluations of the default path.

use statrs::function::gamma::ln_gamma;

use crate::error::Result;
use crate::fields::Precision;
use crate::hurdle::presence_prob;

use super::latent::LatentModel;
use super::model::{digamma, trigamma, FisheriesModel, ParamLayout};

/// ψ″(x): recurrence plus the asymptotic series.
pub fn tetragamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    let mut value = 0.0;
    let mut z = x;
    while z < 14.0 {
        value -= 2.0 / (z * z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // −1/z² − 1/z³ − 1/(2z⁴) + 1/(6z⁶) − 1/(6z⁸) + 3/(10z¹⁰) − 5/(6z¹²)
    value - inv2 * (1.0 + inv * (1.0 + inv * (0.5 - inv2 * (1.0 / 6.0 - inv2 * (1.0 / 6.0 - inv2 * 0.3)))))
}

/// Derivative bundle of one positive-biomass observation with respect to
/// `s = log ζ` and `c = log υ`. All values refer to the log-likelihood
/// `ll`, so the NLL consumers negate.
#[derive(Debug, Clone, Copy)]
pub struct GammaRowDerivs {
    pub ll: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub dc: f64,
    pub d1_dc: f64,
    pub d2_dc: f64,
}

pub fn gamma_row_derivs(s: f64, log_upsilon: f64, ln_y: f64, y: f64) -> GammaRowDerivs {
    let ups2 = (2.0 * log_upsilon).exp();
    let a = (2.0 * s).exp() / ups2;
    let log_b = ups2.ln() - s;
    let y_over_b = y * s.exp() / ups2;
    let l = ln_y - log_b;
    let psi = digamma(a);
    let psi1 = trigamma(a);
    let psi2 = tetragamma(a);
    let centered = l - psi;

    let ll = (a - 1.0) * ln_y - y_over_b - a * log_b - ln_gamma(a);
    let d1 = 2.0 * a * centered + a - y_over_b;
    let d2 = 4.0 * a * centered + 2.0 * a * (1.0 - 2.0 * a * psi1) + 2.0 * a - y_over_b;
    let d3 = 8.0 * a * centered + 8.0 * a * (1.0 - 2.0 * a * psi1) - 8.0 * a * a * psi1
        - 8.0 * a * a * a * psi2
        + 4.0 * a
        - y_over_b;

    // c = log υ: ∂a/∂c = −2a, ∂log_b/∂c = 2, ∂(y/b)/∂c = −2·y/b.
    let dc = -2.0 * a * centered - 2.0 * a + 2.0 * y_over_b;
    let d1_dc = -4.0 * a * centered + 2.0 * a * (-2.0 + 2.0 * a * psi1) - 2.0 * a + 2.0 * y_over_b;
    let d2_dc = -8.0 * a * centered - 16.0 * a + 24.0 * a * a * psi1 + 8.0 * a * a * a * psi2 + 2.0 * y_over_b;

    GammaRowDerivs { ll, d1, d2, d3, dc, d1_dc, d2_dc }
}

/// Parameter-slot offsets of `ParamLayout` used while accumulating.
struct Offsets {
    alpha_prime: usize,
    alpha: usize,
    theta_prime: usize,
    theta: usize,
    log_upsilon: usize,
    kappa_v: usize,
    tau_v: usize,
    kappa_u: usize,
    tau_u: usize,
    kappa_w: usize,
    tau_w: usize,
    delta_star: usize,
    alpha_pp: usize,
    beta_prime: usize,
    beta: usize,
    alpha_c: usize,
    catch_fixed: usize,
    log_sigma_gamma: usize,
}

impl Offsets {
    fn of(layout: &ParamLayout) -> Offsets {
        let p1 = layout.p_presence;
        let p2 = layout.p_biomass;
        let t_len = layout.n_times;
        let base_ipp = 2 + p1 + p2 + 1 + 6 + 1;
        let base_catch = base_ipp + if layout.include_ipp { 3 * t_len } else { 0 };
        Offsets {
            alpha_prime: 0,
            alpha: 1,
            theta_prime: 2,
            theta: 2 + p1,
            log_upsilon: 2 + p1 + p2,
            kappa_v: 3 + p1 + p2,
            tau_v: 4 + p1 + p2,
            kappa_u: 5 + p1 + p2,
            tau_u: 6 + p1 + p2,
            kappa_w: 7 + p1 + p2,
            tau_w: 8 + p1 + p2,
            delta_star: 9 + p1 + p2,
            alpha_pp: base_ipp,
            beta_prime: base_ipp + t_len,
            beta: base_ipp + 2 * t_len,
            alpha_c: base_catch,
            catch_fixed: base_catch + 1,
            log_sigma_gamma: base_catch + 1 + layout.catch.n_fixed,
        }
    }
}

impl<'a> FisheriesModel<'a> {
    /// Exact gradient of the Laplace marginal NLL at the inner mode,
    /// packed in the layout's parameter order.
    pub fn marginal_gradient(&self, layout: &ParamLayout, mode: &[f64]) -> Result<Vec<f64>> {
        let mut g_latent = vec![0.0; self.shape.n_latent()];
        let mut hess = vec![0.0; self.shape.backend.values_len()];
        self.eval(mode, &mut g_latent, &mut hess)?;
        Ok(self.marginal_gradient_with_logdet(layout, mode, &hess)?.0)
    }

    /// As [`Self::marginal_gradient`] with the Hessian values at the mode
    /// already evaluated; also returns `log det H` so the caller can
    /// assemble the marginal without an extra factorization.
    pub fn marginal_gradient_with_logdet(
        &self,
        layout: &ParamLayout,
        mode: &[f64],
        hess: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        let shape = self.shape;
        let data = self.data;
        let n_latent = shape.n_latent();
        let off = Offsets::of(layout);
        debug_assert_eq!(layout.len(), {
            let mut k = 10 + layout.p_presence + layout.p_biomass;
            if layout.include_ipp {
                k += 3 * layout.n_times;
            }
            if layout.catch.enabled {
                k += 1 + layout.catch.n_fixed + usize::from(layout.catch.random_effect);
            }
            k
        });

        // Factor and selected inverse of the exact Hessian at the mode.
        let factor = shape.backend.factor(hess, 0.0).or_else(|_| shape.backend.factor(hess, 1e-8))?;
        let log_det = factor.log_det();
        let z = factor.selected_inverse_values();

        let mut df = vec![0.0; layout.len()]; // ∂f/∂θ at fixed û
        let mut tr = vec![0.0; layout.len()]; // tr(Z · ∂H/∂θ)
        let mut t_vec = vec![0.0; n_latent]; // t_k = tr(Z · ∂H/∂u_k)

        // Clique quadratic form wᵀ Z w over a row's scatter.
        let clique_s = |row: &super::model::RowScatter| -> f64 {
            let m = row.idxs.len();
            let mut acc = 0.0;
            let mut k = 0;
            for a in 0..m {
                for b in a..m {
                    let zv = z[row.pair_slots[k]];
                    let term = row.weights[a] * row.weights[b] * zv;
                    acc += if a == b { term } else { 2.0 * term };
                    k += 1;
                }
            }
            acc
        };

        // ---- observation rows: pass 1 (f, traces, t) ----
        for (r, row) in shape.presence_rows.iter().enumerate() {
            let mut eta = self.eta_fixed[r];
            for (i, &idx) in row.idxs.iter().enumerate() {
                eta += row.weights[i] * mode[idx];
            }
            let z_obs = f64::from(data.obs.z[r]);
            let pi = presence_prob(eta);
            let d1 = pi - z_obs;
            let d3 = pi * (1.0 - pi) * (1.0 - 2.0 * pi);
            let s_r = clique_s(row);
            // ∂ηfix/∂θ = 1 for α′ and x′_j for θ′_j.
            df[off.alpha_prime] += d1;
            tr[off.alpha_prime] += d3 * s_r;
            for j in 0..layout.p_presence {
                let x = data.design_presence.row(r)[j];
                df[off.theta_prime + j] += d1 * x;
                tr[off.theta_prime + j] += d3 * s_r * x;
            }
            for (i, &idx) in row.idxs.iter().enumerate() {
                t_vec[idx] += d3 * row.weights[i] * s_r;
            }
        }

        for (r, row) in shape.biomass_rows.iter().enumerate() {
            let Some(row) = row else { continue };
            let mut s = self.s_fixed[r];
            for (i, &idx) in row.idxs.iter().enumerate() {
                s += row.weights[i] * mode[idx];
            }
            let d = gamma_row_derivs(s, self.params.dispersion.log_upsilon, shape.ln_y(r), data.obs.y_val[r]);
            let s_r = clique_s(row);
            // Parameters entering through sfix linearly.
            let mut linear = |slot: usize, x: f64| {
                df[slot] += -d.d1 * x;
                tr[slot] += -d.d3 * s_r * x;
            };
            linear(off.alpha, 1.0);
            for j in 0..layout.p_biomass {
                let x = data.design_biomass.row(r)[j];
                linear(off.theta + j, x);
            }
            if layout.catch.enabled && data.obs.vessel[r] != crate::hurdle::RESEARCH_VESSEL {
                linear(off.alpha_c, 1.0);
                if layout.catch.n_fixed > 0 {
                    let attr = data.vessel_attr_row(data.obs.vessel[r]).unwrap_or(&[]);
                    for j in 0..layout.catch.n_fixed {
                        linear(off.catch_fixed + j, attr[j]);
                    }
                }
            }
            // log υ enters every term of the row directly.
            df[off.log_upsilon] += -d.dc;
            tr[off.log_upsilon] += -d.d2_dc * s_r;
            for (i, &idx) in row.idxs.iter().enumerate() {
                t_vec[idx] += -d.d3 * row.weights[i] * s_r;
            }
        }

        // ---- point-process terms: pass 1 ----
        if data.include_ipp && layout.include_ipp {
            for t in 0..shape.n_times {
                let alpha = self.params.preferential.alpha_pp[t];
                let beta_p = self.params.preferential.beta_prime[t];
                let beta = self.params.preferential.beta[t];
                for &r in &data.fdd_rows_by_time[t] {
                    df[off.alpha_pp + t] -= 1.0;
                    for (node, w) in data.projection.row(r) {
                        df[off.beta_prime + t] -= w * mode[shape.idx_v(node)];
                        df[off.beta + t] -= w * mode[shape.idx_u(node)];
                    }
                }
                for node in &shape.ipp_nodes {
                    let u_val = mode[node.u_idx];
                    let v_val = mode[node.v_idx];
                    let lam_qw = (alpha + beta_p * v_val + beta * u_val).exp() * node.qw;
                    df[off.alpha_pp + t] += lam_qw;
                    df[off.beta_prime + t] += v_val * lam_qw;
                    df[off.beta + t] += u_val * lam_qw;

                    let (zuu, zuv, zvv) = (z[node.uu], z[node.uv], z[node.vv]);
                    let g_form = beta * beta * zuu + 2.0 * beta * beta_p * zuv + beta_p * beta_p * zvv;
                    tr[off.alpha_pp + t] += lam_qw * g_form;
                    tr[off.beta + t] += lam_qw * (2.0 * beta * zuu + 2.0 * beta_p * zuv + u_val * g_form);
                    tr[off.beta_prime + t] += lam_qw * (2.0 * beta_p * zvv + 2.0 * beta * zuv + v_val * g_form);
                    t_vec[node.u_idx] += beta * lam_qw * g_form;
                    t_vec[node.v_idx] += beta_p * lam_qw * g_form;
                }
            }
        }

        // ---- latent-field priors ----
        let q_pattern = shape.structure.pattern();
        let (fu, fv, fw) = self.field_views(mode);

        let field_prior = |q: &Precision,
                           dq_kappa: &[f64],
                           field: &[f64],
                           slots: &[usize],
                           kappa_slot: usize,
                           tau_slot: usize,
                           df: &mut [f64],
                           tr: &mut [f64]|
         -> Result<()> {
            let n = q.n();
            // tr(Q⁻¹ ∂Q/∂logκ) via the selected inverse of Q itself.
            let q_factor = q.factor()?;
            let zq = q_factor.selected_inverse_values();
            let mut tr_qinv_dq = 0.0;
            let mut quad_kappa = 0.0;
            let mut quad_tau = 0.0;
            for s in 0..q_pattern.nnz() {
                let (i, j) = q_pattern.entry(s);
                let mult = if i == j { 1.0 } else { 2.0 };
                tr_qinv_dq += mult * zq[s] * dq_kappa[s];
                quad_kappa += mult * dq_kappa[s] * field[i] * field[j];
                quad_tau += mult * 2.0 * q.values[s] * field[i] * field[j];
                // tr(Z · ∂H/∂θ) over the latent copies of the Q pattern.
                tr[kappa_slot] += mult * z[slots[s]] * dq_kappa[s];
                tr[tau_slot] += mult * z[slots[s]] * 2.0 * q.values[s];
            }
            df[kappa_slot] += 0.5 * quad_kappa - 0.5 * tr_qinv_dq;
            df[tau_slot] += 0.5 * quad_tau - (n as f64);
            Ok(())
        };

        let dq_kappa_v = shape.structure.dprecision_dlog_kappa(&self.params.matern_v);
        let dq_kappa_u = shape.structure.dprecision_dlog_kappa(&self.params.matern_u);
        let dq_kappa_w = shape.structure.dprecision_dlog_kappa(&self.params.matern_w);
        field_prior(&self.q_v, &dq_kappa_v, &fv, shape.v_slots(), off.kappa_v, off.tau_v, &mut df, &mut tr)?;
        field_prior(&self.q_u, &dq_kappa_u, &fu, shape.u_slots(), off.kappa_u, off.tau_u, &mut df, &mut tr)?;

        // W prior: quadratic coefficients B(δ) over time pairs.
        let delta = self.params.temporal.delta();
        let coefs = self.ar1_coefs_public();
        let dcoefs = self.ar1_dcoefs_ddelta();
        let t_len = shape.n_times;
        let n_nodes = shape.n_nodes;
        {
            // tr(Q_ξ⁻¹ ∂Q_ξ) pieces.
            let q_factor = self.q_xi.factor()?;
            let zq = q_factor.selected_inverse_values();
            let mut tr_qinv_dq = 0.0;
            for s in 0..q_pattern.nnz() {
                let (i, j) = q_pattern.entry(s);
                let mult = if i == j { 1.0 } else { 2.0 };
                tr_qinv_dq += mult * zq[s] * dq_kappa_w[s];
            }

            // Quadratic forms W_t1ᵀ M W_t2 for M ∈ {Q, ∂Q/∂logκ}.
            let mut quad_q = vec![0.0; coefs.len()];
            let mut quad_dk = vec![0.0; coefs.len()];
            for s in 0..q_pattern.nnz() {
                let (i, j) = q_pattern.entry(s);
                let mult = if i == j { 1.0 } else { 2.0 };
                for (k, &(t1, t2)) in shape.w_pairs().iter().enumerate() {
                    let wprod = if t1 == t2 {
                        mult * fw[t1 * n_nodes + i] * fw[t1 * n_nodes + j]
                    } else {
                        // Off-diagonal time pair: both (i,j) and (j,i).
                        fw[t1 * n_nodes + i] * fw[t2 * n_nodes + j]
                            + if i != j { fw[t1 * n_nodes + j] * fw[t2 * n_nodes + i] } else { 0.0 }
                    };
                    quad_q[k] += self.q_xi.values[s] * wprod;
                    quad_dk[k] += dq_kappa_w[s] * wprod;
                }
            }

            let mut df_kappa = 0.0;
            let mut df_tau = 0.0;
            let mut df_delta = 0.0;
            for (k, &(t1, t2)) in shape.w_pairs().iter().enumerate() {
                let pair_mult = if t1 == t2 { 1.0 } else { 2.0 };
                df_kappa += 0.5 * pair_mult * coefs[k] * quad_dk[k];
                df_tau += 0.5 * pair_mult * coefs[k] * 2.0 * quad_q[k];
                df_delta += 0.5 * pair_mult * dcoefs[k] * quad_q[k];
            }
            df[off.kappa_w] += df_kappa - 0.5 * t_len as f64 * tr_qinv_dq;
            df[off.tau_w] += df_tau - (t_len * n_nodes) as f64;
            // −(N/2)·log(1−δ²) term.
            df_delta += n_nodes as f64 * delta / (1.0 - delta * delta);

            // Hessian traces over the W copies of the Q pattern.
            let np = shape.w_pairs().len();
            let w_slots = shape.w_slots();
            let w_mirror = shape.w_slots_mirror();
            let mut tr_kappa = 0.0;
            let mut tr_tau = 0.0;
            let mut tr_delta = 0.0;
            for s in 0..q_pattern.nnz() {
                let (i, j) = q_pattern.entry(s);
                for (k, &(t1, t2)) in shape.w_pairs().iter().enumerate() {
                    let slot = w_slots[s * np + k];
                    let mut zsum = if t1 == t2 && i == j { z[slot] } else { 2.0 * z[slot] };
                    let mirror = w_mirror[s * np + k];
                    if mirror != usize::MAX {
                        zsum += 2.0 * z[mirror];
                    }
                    tr_kappa += coefs[k] * dq_kappa_w[s] * zsum;
                    tr_tau += coefs[k] * 2.0 * self.q_xi.values[s] * zsum;
                    tr_delta += dcoefs[k] * self.q_xi.values[s] * zsum;
                }
            }
            tr[off.kappa_w] += tr_kappa;
            tr[off.tau_w] += tr_tau;

            // Chain to δ*.
            let ddelta_dstar = 0.5 * (1.0 - delta * delta);
            df[off.delta_star] += df_delta * ddelta_dstar;
            tr[off.delta_star] += tr_delta * ddelta_dstar;
        }

        // Catchability random-effect prior.
        if layout.catch.enabled && layout.catch.random_effect {
            let sigma2 = (2.0 * self.params.catchability.log_sigma_gamma).exp();
            let n_gamma = shape.gamma_vessels.len() as f64;
            let mut quad = 0.0;
            let mut ztr = 0.0;
            for gidx in 0..shape.gamma_vessels.len() {
                let idx = shape.idx_gamma(gidx);
                quad += mode[idx] * mode[idx];
                ztr += z[shape.gamma_diag_slot(gidx)];
            }
            df[off.log_sigma_gamma] += n_gamma - quad / sigma2;
            tr[off.log_sigma_gamma] += -2.0 / sigma2 * ztr;
        }

        // ---- r = H⁻¹ t and the ∂g/∂θ dot products ----
        let r_vec = factor.solve(&t_vec);
        let mut dgdot = vec![0.0; layout.len()];

        for (r, row) in shape.presence_rows.iter().enumerate() {
            let mut eta = self.eta_fixed[r];
            let mut r_dot_w = 0.0;
            for (i, &idx) in row.idxs.iter().enumerate() {
                eta += row.weights[i] * mode[idx];
                r_dot_w += row.weights[i] * r_vec[idx];
            }
            let pi = presence_prob(eta);
            let d2 = pi * (1.0 - pi);
            dgdot[off.alpha_prime] += d2 * r_dot_w;
            for j in 0..layout.p_presence {
                dgdot[off.theta_prime + j] += d2 * r_dot_w * data.design_presence.row(r)[j];
            }
        }
        for (r, row) in shape.biomass_rows.iter().enumerate() {
            let Some(row) = row else { continue };
            let mut s = self.s_fixed[r];
            let mut r_dot_w = 0.0;
            for (i, &idx) in row.idxs.iter().enumerate() {
                s += row.weights[i] * mode[idx];
                r_dot_w += row.weights[i] * r_vec[idx];
            }
            let d = gamma_row_derivs(s, self.params.dispersion.log_upsilon, shape.ln_y(r), data.obs.y_val[r]);
            let d2 = -d.d2;
            dgdot[off.alpha] += d2 * r_dot_w;
            for j in 0..layout.p_biomass {
                dgdot[off.theta + j] += d2 * r_dot_w * data.design_biomass.row(r)[j];
            }
            if layout.catch.enabled && data.obs.vessel[r] != crate::hurdle::RESEARCH_VESSEL {
                dgdot[off.alpha_c] += d2 * r_dot_w;
                if layout.catch.n_fixed > 0 {
                    let attr = data.vessel_attr_row(data.obs.vessel[r]).unwrap_or(&[]);
                    for j in 0..layout.catch.n_fixed {
                        dgdot[off.catch_fixed + j] += d2 * r_dot_w * attr[j];
                    }
                }
            }
            dgdot[off.log_upsilon] += -d.d1_dc * r_dot_w;
        }
        if data.include_ipp && layout.include_ipp {
            for t in 0..shape.n_times {
                let alpha = self.params.preferential.alpha_pp[t];
                let beta_p = self.params.preferential.beta_prime[t];
                let beta = self.params.preferential.beta[t];
                for &r in &data.fdd_rows_by_time[t] {
                    for (node, w) in data.projection.row(r) {
                        dgdot[off.beta_prime + t] -= w * r_vec[shape.idx_v(node)];
                        dgdot[off.beta + t] -= w * r_vec[shape.idx_u(node)];
                    }
                }
                for node in &shape.ipp_nodes {
                    let u_val = mode[node.u_idx];
                    let v_val = mode[node.v_idx];
                    let lam_qw = (alpha + beta_p * v_val + beta * u_val).exp() * node.qw;
                    let (ru, rv) = (r_vec[node.u_idx], r_vec[node.v_idx]);
                    dgdot[off.alpha_pp + t] += lam_qw * (beta * ru + beta_p * rv);
                    dgdot[off.beta_prime + t] +=
                        lam_qw * ((1.0 + beta_p * v_val) * rv + beta * v_val * ru);
                    dgdot[off.beta + t] += lam_qw * ((1.0 + beta * u_val) * ru + beta_p * u_val * rv);
                }
            }
        }
        // Prior pieces of ∂g/∂θ.
        {
            // Spatial fields: ∂g = (∂Q)·field at the field's latent indices.
            let mut dq_field = vec![0.0; n_nodes];
            let mut apply = |dq: &[f64], field: &[f64], latent_of: &dyn Fn(usize) -> usize, slot: usize, dgdot: &mut [f64]| {
                q_pattern.matvec(dq, field, &mut dq_field);
                let mut acc = 0.0;
                for j in 0..n_nodes {
                    acc += dq_field[j] * r_vec[latent_of(j)];
                }
                dgdot[slot] += acc;
            };
            apply(&dq_kappa_v, &fv, &|j| shape.idx_v(j), off.kappa_v, &mut dgdot);
            let dq_tau_v: Vec<f64> = self.q_v.values.iter().map(|v| 2.0 * v).collect();
            apply(&dq_tau_v, &fv, &|j| shape.idx_v(j), off.tau_v, &mut dgdot);
            apply(&dq_kappa_u, &fu, &|j| shape.idx_u(j), off.kappa_u, &mut dgdot);
            let dq_tau_u: Vec<f64> = self.q_u.values.iter().map(|v| 2.0 * v).collect();
            apply(&dq_tau_u, &fu, &|j| shape.idx_u(j), off.tau_u, &mut dgdot);

            // W field: ∂g over the AR(1) quadratic with M ∈ {∂Q_κ, 2Q, Q·∂B}.
            let ddelta_dstar = 0.5 * (1.0 - delta * delta);
            let dq_tau_w: Vec<f64> = self.q_xi.values.iter().map(|v| 2.0 * v).collect();
            let mut m_w = vec![0.0; n_nodes];
            for (k, &(t1, t2)) in shape.w_pairs().iter().enumerate() {
                // g_{w_t1} += b·M·W_t2 (+ symmetric when t1 ≠ t2).
                let mut add = |mvals: &[f64], b: f64, slot: usize, dgdot: &mut [f64]| {
                    if b == 0.0 {
                        return;
                    }
                    q_pattern.matvec(mvals, &fw[t2 * n_nodes..(t2 + 1) * n_nodes], &mut m_w);
                    let mut acc = 0.0;
                    for j in 0..n_nodes {
                        acc += m_w[j] * r_vec[shape.idx_w(j, t1)];
                    }
                    if t1 != t2 {
                        q_pattern.matvec(mvals, &fw[t1 * n_nodes..(t1 + 1) * n_nodes], &mut m_w);
                        for j in 0..n_nodes {
                            acc += m_w[j] * r_vec[shape.idx_w(j, t2)];
                        }
                    }
                    dgdot[slot] += b * acc;
                };
                add(&dq_kappa_w, coefs[k], off.kappa_w, &mut dgdot);
                add(&dq_tau_w, coefs[k], off.tau_w, &mut dgdot);
                add(&self.q_xi.values, dcoefs[k] * ddelta_dstar, off.delta_star, &mut dgdot);
            }

            if layout.catch.enabled && layout.catch.random_effect {
                let sigma2 = (2.0 * self.params.catchability.log_sigma_gamma).exp();
                let mut acc = 0.0;
                for gidx in 0..shape.gamma_vessels.len() {
                    let idx = shape.idx_gamma(gidx);
                    acc += -2.0 * mode[idx] / sigma2 * r_vec[idx];
                }
                dgdot[off.log_sigma_gamma] += acc;
            }
        }

        let gradient = (0..layout.len())
            .map(|i| df[i] + 0.5 * tr[i] - 0.5 * dgdot[i])
            .collect();
        Ok((gradient, log_det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Rect, TimeAxis};
    use crate::inference::latent::{inner_optimize, InnerOptions};
    use crate::inference::model::{CatchSetup, ModelShape};
    use crate::inference::{default_init, ParamLayout};
    use crate::likelihood::simulate_test_replicate;
    use approx::assert_relative_eq;

    #[test]
    fn tetragamma_matches_trigamma_differences() {
        // ψ″(1) = −2ζ(3) = −2.404113806319188
        assert_relative_eq!(tetragamma(1.0), -2.404_113_806_319_188_5, max_relative = 1e-11);
        for x in [0.4f64, 1.3, 5.0, 13.9, 14.1, 120.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (trigamma(x + h) - trigamma(x - h)) / (2.0 * h);
            assert_relative_eq!(tetragamma(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn gamma_row_derivative_chain() {
        for (s, c, y) in [(0.3, 0.0, 2.5), (-0.8, 0.4, 0.7), (1.9, -0.3, 11.0), (2.5, 1.1, 4.0)] {
            let h = 1e-6;
            let at = |s: f64, c: f64| gamma_row_derivs(s, c, (y as f64).ln(), y);
            let base = at(s, c);
            // s-chain: d1 = ∂ll/∂s, d2 = ∂d1/∂s, d3 = ∂d2/∂s.
            assert_relative_eq!(base.d1, (at(s + h, c).ll - at(s - h, c).ll) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-7);
            assert_relative_eq!(base.d2, (at(s + h, c).d1 - at(s - h, c).d1) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-7);
            assert_relative_eq!(base.d3, (at(s + h, c).d2 - at(s - h, c).d2) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);
            // c-chain: dc = ∂ll/∂c, d1_dc = ∂d1/∂c, d2_dc = ∂d2/∂c.
            assert_relative_eq!(base.dc, (at(s, c + h).ll - at(s, c - h).ll) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-7);
            assert_relative_eq!(base.d1_dc, (at(s, c + h).d1 - at(s, c - h).d1) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-7);
            assert_relative_eq!(base.d2_dc, (at(s, c + h).d2 - at(s, c - h).d2) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    fn check_exact_gradient(beta: f64, beta_prime: f64, n_obs: usize, seed: u64, catch: CatchSetup, tweak: &[(usize, f64)]) {
        let grid = build_grid(7, 7, Rect::unit(), 0.2).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (_truth, _latent, data) = simulate_test_replicate(&grid, &time_axis, beta, beta_prime, n_obs, seed);
        let shape = ModelShape::with_options(&grid, &data, 2, catch, false).unwrap();
        let layout = ParamLayout::new(0, 0, 2, true, catch);
        let init = default_init(&data, &grid, &time_axis, &layout);
        let mut x = layout.pack(&init);
        for &(i, v) in tweak {
            x[i] += v;
        }
        let opts = InnerOptions::default();

        let model = FisheriesModel::new(&shape, &data, layout.unpack(&x)).unwrap();
        let base = inner_optimize(&model, &vec![0.0; shape.n_latent()], &opts).unwrap();
        let exact = model.marginal_gradient(&layout, &base.mode).unwrap();

        // Central finite differences of the marginal, warm-started from the
        // base mode.
        let scale = exact.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        for i in 0..layout.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let mp = FisheriesModel::new(&shape, &data, layout.unpack(&xp)).unwrap();
            let mm = FisheriesModel::new(&shape, &data, layout.unpack(&xm)).unwrap();
            let fp = inner_optimize(&mp, &base.mode, &opts).unwrap().marginal_nll;
            let fm = inner_optimize(&mm, &base.mode, &opts).unwrap().marginal_nll;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (exact[i] - fd).abs() <= 2e-4 * scale + 2e-3 * fd.abs(),
                "coordinate {i} ({}): exact {} vs fd {}",
                layout.names()[i],
                exact[i],
                fd
            );
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences_at_init() {
        check_exact_gradient(1.2, 0.5, 25, 2025, CatchSetup::default(), &[]);
    }

    #[test]
    fn exact_gradient_matches_finite_differences_perturbed() {
        // Perturb intercepts, dispersion, covariances, delta and the
        // preferential block to leave the critical point.
        let tweaks = [
            (0usize, 0.3),
            (1, -0.2),
            (2, 0.25),
            (3, 0.2),
            (6, -0.3),
            (9, 0.6),
            (12, 0.2),
            (14, -0.3),
        ];
        check_exact_gradient(0.8, -0.4, 20, 77, CatchSetup::default(), &tweaks);
    }

    #[test]
    fn exact_gradient_with_catchability() {
        let catch = CatchSetup { enabled: true, random_effect: true, n_fixed: 0 };
        check_exact_gradient(1.0, 0.0, 22, 31, catch, &[(1, 0.2)]);
    }
}
