//! The joint model as a latent optimization problem.
//!
//! The latent vector interleaves the fields node-major —
//! `[U_j, V_j, W_{j,t_1}, …, W_{j,t_T}]` per node `j` — followed by the
//! catchability random effects. Interleaving keeps every cross-field
//! coupling (point-process `U×V` blocks, observation footprints, the
//! AR(1) time band) local under the lattice nested-dissection ordering.
//!
//! [`ModelShape`] freezes everything that depends only on grid and data:
//! the Hessian sparsity pattern, its symbolic factorization and the
//! scatter maps from each contribution to its value slot. A
//! [`FisheriesModel`] binds one parameter point to a shape and evaluates
//! the joint NLL with gradient and Hessian.

use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fields::{LatentState, Precision, SpdeStructure};
use crate::grid::SpatialGrid;
use crate::likelihood::{JointParams, ModelData};
use crate::sparse::{
    nd_lattice_block_perm, AnyFactor, BlockLayout, BlockPatternBuilder, BlockSymbolic,
    PatternBuilder, Symbolic,
};

use super::latent::LatentModel;

/// Catchability structure of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CatchSetup {
    pub enabled: bool,
    pub random_effect: bool,
    /// Number of vessel-attribute design columns.
    pub n_fixed: usize,
}

pub(super) struct RowScatter {
    /// Latent indices touched by the row.
    pub(super) idxs: Vec<usize>,
    pub(super) weights: Vec<f64>,
    /// Hessian slots of all index pairs, `(a, b)` with `a <= b` in order.
    pub(super) pair_slots: Vec<usize>,
}

pub(super) struct IppNode {
    pub(super) u_idx: usize,
    pub(super) v_idx: usize,
    pub(super) qw: f64,
    pub(super) uu: usize,
    pub(super) uv: usize,
    pub(super) vv: usize,
}

/// Hessian storage/factorization backend: scalar CSC (supports the
/// Takahashi selected inverse) or node-blocked panels (fast repeated
/// factorizations in the optimization hot path).
pub enum HessBackend {
    Scalar(Symbolic),
    Block(BlockSymbolic),
}

impl HessBackend {
    pub fn values_len(&self) -> usize {
        match self {
            HessBackend::Scalar(s) => s.pattern().nnz(),
            HessBackend::Block(b) => b.pattern().values_len(),
        }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        match self {
            HessBackend::Scalar(s) => s.pattern().slot(i, j),
            HessBackend::Block(b) => b.pattern().slot(i, j),
        }
    }

    pub fn factor(&self, values: &[f64], ridge: f64) -> crate::error::Result<AnyFactor<'_>> {
        match self {
            HessBackend::Scalar(s) => Ok(AnyFactor::Scalar(s.factor(values, ridge)?)),
            HessBackend::Block(b) => Ok(AnyFactor::Block(b.factor(values, ridge)?)),
        }
    }

    pub fn scalar_symbolic(&self) -> Option<&Symbolic> {
        match self {
            HessBackend::Scalar(s) => Some(s),
            HessBackend::Block(_) => None,
        }
    }
}

/// Grid- and data-dependent structure shared by every parameter point of
/// one fit.
pub struct ModelShape {
    pub structure: Arc<SpdeStructure>,
    pub backend: HessBackend,
    pub n_nodes: usize,
    pub n_times: usize,
    pub blk: usize,
    /// Sorted commercial vessel ids carrying random effects.
    pub gamma_vessels: Vec<usize>,
    u_slots: Vec<usize>,
    v_slots: Vec<usize>,
    /// Per `(q-slot, time-pair)`: Hessian slot and optional mirror.
    w_slots: Vec<usize>,
    w_slots_mirror: Vec<usize>,
    w_pairs: Vec<(usize, usize)>,
    pub(super) presence_rows: Vec<RowScatter>,
    pub(super) biomass_rows: Vec<Option<RowScatter>>,
    pub(super) ipp_nodes: Vec<IppNode>,
    gamma_diag_slots: Vec<usize>,
    ln_y: Vec<f64>,
}

const NO_SLOT: usize = usize::MAX;

impl ModelShape {
    pub fn new(grid: &SpatialGrid, data: &ModelData, n_times: usize, catch: CatchSetup) -> Result<Self> {
        Self::with_options(grid, data, n_times, catch, true)
    }

    /// `uncertainty_blocks` forces full per-node blocks into the pattern
    /// so the Takahashi selected inverse covers every within-node
    /// covariance; fits that skip prediction uncertainty leave them out
    /// for a sparser factor.
    pub fn with_options(
        grid: &SpatialGrid,
        data: &ModelData,
        n_times: usize,
        catch: CatchSetup,
        uncertainty_blocks: bool,
    ) -> Result<Self> {
        let structure = Arc::new(SpdeStructure::new(grid));
        let n_nodes = grid.n_nodes();
        let blk = 2 + n_times;

        let gamma_vessels: Vec<usize> = if catch.enabled && catch.random_effect {
            let mut ids: Vec<usize> = data
                .obs
                .vessel
                .iter()
                .cloned()
                .filter(|&v| v != crate::hurdle::RESEARCH_VESSEL)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        } else {
            Vec::new()
        };
        let n_gamma = gamma_vessels.len();
        let n_latent = n_nodes * blk + n_gamma;

        let idx_u = |j: usize| j * blk;
        let idx_v = |j: usize| j * blk + 1;
        let idx_w = |j: usize, t: usize| j * blk + 2 + t;
        let idx_gamma = |g: usize| n_nodes * blk + g;

        let mut w_pairs: Vec<(usize, usize)> = (0..n_times).map(|t| (t, t)).collect();
        w_pairs.extend((0..n_times.saturating_sub(1)).map(|t| (t, t + 1)));

        let mut pairs: Vec<(usize, usize)> = Vec::new();
        if uncertainty_blocks {
            // Full per-node blocks: prediction variances need the
            // within-node covariances on the factor pattern.
            for j in 0..n_nodes {
                let block: Vec<usize> = (0..blk).map(|o| j * blk + o).collect();
                for a in 0..blk {
                    for b in a..blk {
                        pairs.push((block[a], block[b]));
                    }
                }
            }
        } else if data.include_ipp {
            // The point-process integral couples U and V at interior nodes.
            for &node in grid.interior_nodes() {
                pairs.push((idx_u(node), idx_v(node)));
            }
        }
        // Field priors on the SPDE stencil.
        let q_pattern = structure.pattern().clone();
        for s in 0..q_pattern.nnz() {
            let (i, j) = q_pattern.entry(s);
            pairs.push((idx_u(i), idx_u(j)));
            pairs.push((idx_v(i), idx_v(j)));
            for &(t1, t2) in &w_pairs {
                pairs.push((idx_w(i, t1), idx_w(j, t2)));
                if t1 != t2 && i != j {
                    pairs.push((idx_w(j, t1), idx_w(i, t2)));
                }
            }
        }
        // Observation footprints.
        let mut presence_meta = Vec::with_capacity(data.n_rows());
        let mut biomass_meta = Vec::with_capacity(data.n_rows());
        for r in 0..data.n_rows() {
            let t = data.t_idx[r];
            let foot: Vec<(usize, f64)> = data.projection.row(r).collect();
            let mut p_idx = Vec::with_capacity(2 * foot.len());
            let mut p_w = Vec::with_capacity(2 * foot.len());
            for &(node, w) in &foot {
                p_idx.push(idx_v(node));
                p_w.push(w);
                p_idx.push(idx_w(node, t));
                p_w.push(w);
            }
            for a in 0..p_idx.len() {
                for b in a..p_idx.len() {
                    pairs.push((p_idx[a], p_idx[b]));
                }
            }
            presence_meta.push((p_idx, p_w));

            if data.obs.z[r] == 1 {
                let mut b_idx = Vec::with_capacity(2 * foot.len() + 1);
                let mut b_w = Vec::with_capacity(2 * foot.len() + 1);
                for &(node, w) in &foot {
                    b_idx.push(idx_u(node));
                    b_w.push(w);
                    b_idx.push(idx_w(node, t));
                    b_w.push(w);
                }
                if let Some(g) = gamma_vessels.iter().position(|&v| v == data.obs.vessel[r]) {
                    b_idx.push(idx_gamma(g));
                    b_w.push(1.0);
                }
                for a in 0..b_idx.len() {
                    for b in a..b_idx.len() {
                        pairs.push((b_idx[a], b_idx[b]));
                    }
                }
                biomass_meta.push(Some((b_idx, b_w)));
            } else {
                biomass_meta.push(None);
            }
        }

        let backend = if uncertainty_blocks {
            let mut builder = PatternBuilder::new(n_latent);
            for &(a, b) in &pairs {
                builder.add(a, b);
            }
            let perm = nd_lattice_block_perm(grid.nx_total(), grid.ny_total(), blk, n_gamma);
            HessBackend::Scalar(Symbolic::analyze(Arc::new(builder.finalize(Some(perm)))))
        } else {
            let layout = BlockLayout::uniform_with_tail(n_nodes, blk, n_gamma);
            let mut builder = BlockPatternBuilder::new(layout);
            for &(a, b) in &pairs {
                builder.add(a, b);
            }
            let block_perm = nd_lattice_block_perm(grid.nx_total(), grid.ny_total(), 1, n_gamma);
            HessBackend::Block(BlockSymbolic::analyze(Arc::new(builder.finalize(block_perm))))
        };

        // Slot caches.
        let u_slots: Vec<usize> = (0..q_pattern.nnz())
            .map(|s| {
                let (i, j) = q_pattern.entry(s);
                backend.slot(idx_u(i), idx_u(j))
            })
            .collect();
        let v_slots: Vec<usize> = (0..q_pattern.nnz())
            .map(|s| {
                let (i, j) = q_pattern.entry(s);
                backend.slot(idx_v(i), idx_v(j))
            })
            .collect();
        let np = w_pairs.len();
        let mut w_slots = vec![NO_SLOT; q_pattern.nnz() * np];
        let mut w_slots_mirror = vec![NO_SLOT; q_pattern.nnz() * np];
        for s in 0..q_pattern.nnz() {
            let (i, j) = q_pattern.entry(s);
            for (k, &(t1, t2)) in w_pairs.iter().enumerate() {
                w_slots[s * np + k] = backend.slot(idx_w(i, t1), idx_w(j, t2));
                if t1 != t2 && i != j {
                    w_slots_mirror[s * np + k] = backend.slot(idx_w(j, t1), idx_w(i, t2));
                }
            }
        }

        let scatter_of = |idxs: Vec<usize>, weights: Vec<f64>| -> RowScatter {
            let m = idxs.len();
            let mut pair_slots = Vec::with_capacity(m * (m + 1) / 2);
            for a in 0..m {
                for b in a..m {
                    pair_slots.push(backend.slot(idxs[a], idxs[b]));
                }
            }
            RowScatter { idxs, weights, pair_slots }
        };
        let presence_rows: Vec<RowScatter> = presence_meta
            .into_iter()
            .map(|(idx, w)| scatter_of(idx, w))
            .collect();
        let biomass_rows: Vec<Option<RowScatter>> = biomass_meta
            .into_iter()
            .map(|meta| meta.map(|(idx, w)| scatter_of(idx, w)))
            .collect();

        let ipp_nodes: Vec<IppNode> = grid
            .interior_nodes()
            .iter()
            .map(|&node| IppNode {
                u_idx: idx_u(node),
                v_idx: idx_v(node),
                qw: grid.quad_weight(node),
                uu: backend.slot(idx_u(node), idx_u(node)),
                uv: backend.slot(idx_u(node), idx_v(node)),
                vv: backend.slot(idx_v(node), idx_v(node)),
            })
            .collect();

        let gamma_diag_slots: Vec<usize> = (0..n_gamma)
            .map(|g| backend.slot(idx_gamma(g), idx_gamma(g)))
            .collect();

        let ln_y: Vec<f64> = data
            .obs
            .y_val
            .iter()
            .map(|&y| if y > 0.0 { y.ln() } else { 0.0 })
            .collect();

        Ok(ModelShape {
            structure,
            backend,
            n_nodes,
            n_times,
            blk,
            gamma_vessels,
            u_slots,
            v_slots,
            w_slots,
            w_slots_mirror,
            w_pairs,
            presence_rows,
            biomass_rows,
            ipp_nodes,
            gamma_diag_slots,
            ln_y,
        })
    }

    pub fn n_latent(&self) -> usize {
        self.n_nodes * self.blk + self.gamma_vessels.len()
    }

    pub fn idx_u(&self, j: usize) -> usize {
        j * self.blk
    }

    pub fn idx_v(&self, j: usize) -> usize {
        j * self.blk + 1
    }

    pub fn idx_w(&self, j: usize, t: usize) -> usize {
        j * self.blk + 2 + t
    }

    pub fn idx_gamma(&self, g: usize) -> usize {
        self.n_nodes * self.blk + g
    }

    pub(super) fn u_slots(&self) -> &[usize] {
        &self.u_slots
    }

    pub(super) fn v_slots(&self) -> &[usize] {
        &self.v_slots
    }

    pub(super) fn w_slots(&self) -> &[usize] {
        &self.w_slots
    }

    pub(super) fn w_slots_mirror(&self) -> &[usize] {
        &self.w_slots_mirror
    }

    pub(super) fn w_pairs(&self) -> &[(usize, usize)] {
        &self.w_pairs
    }

    pub(super) fn gamma_diag_slot(&self, g: usize) -> usize {
        self.gamma_diag_slots[g]
    }

    pub(super) fn ln_y(&self, r: usize) -> f64 {
        self.ln_y[r]
    }

    /// Splits a latent vector into field state and catchability effects.
    pub fn unflatten(&self, u: &[f64]) -> (LatentState, Vec<f64>) {
        let n = self.n_nodes;
        let mut state = LatentState::zeros(n, self.n_times);
        for j in 0..n {
            state.u[j] = u[self.idx_u(j)];
            state.v[j] = u[self.idx_v(j)];
            for t in 0..self.n_times {
                state.w[t * n + j] = u[self.idx_w(j, t)];
            }
        }
        let gamma = (0..self.gamma_vessels.len()).map(|g| u[self.idx_gamma(g)]).collect();
        (state, gamma)
    }

    /// Packs field state and catchability effects into a latent vector.
    pub fn flatten(&self, state: &LatentState, gamma: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.n_latent()];
        for j in 0..self.n_nodes {
            u[self.idx_u(j)] = state.u[j];
            u[self.idx_v(j)] = state.v[j];
            for t in 0..self.n_times {
                u[self.idx_w(j, t)] = state.w[t * self.n_nodes + j];
            }
        }
        for (g, &value) in gamma.iter().enumerate() {
            u[self.idx_gamma(g)] = value;
        }
        u
    }
}

/// One parameter point bound to a [`ModelShape`], ready for inner
/// optimization.
pub struct FisheriesModel<'a> {
    pub shape: &'a ModelShape,
    pub data: &'a ModelData,
    pub params: JointParams,
    pub(super) q_u: Precision,
    pub(super) q_v: Precision,
    pub(super) q_xi: Precision,
    delta: f64,
    ups2: f64,
    /// Latent-independent NLL terms (field normalizers, γ prior constant).
    const_nll: f64,
    /// Per-row latent-independent parts of the presence predictor.
    pub(super) eta_fixed: Vec<f64>,
    /// Per-row latent-independent parts of `log ζ` (positive rows only).
    pub(super) s_fixed: Vec<f64>,
    use_gamma_latent: bool,
}

const LN_2PI: f64 = 1.837_877_066_409_345_6;

impl<'a> FisheriesModel<'a> {
    pub fn new(shape: &'a ModelShape, data: &'a ModelData, params: JointParams) -> Result<Self> {
        params.preferential.validate(shape.n_times)?;
        let q_u = shape.structure.precision(&params.matern_u);
        let q_v = shape.structure.precision(&params.matern_v);
        let q_xi = shape.structure.precision(&params.matern_w);
        let logdet_u = q_u.factor()?.log_det();
        let logdet_v = q_v.factor()?.log_det();
        let logdet_xi = q_xi.factor()?.log_det();
        let delta = params.temporal.delta();
        let n = shape.n_nodes as f64;
        let n_times = shape.n_times as f64;
        let n_gamma = shape.gamma_vessels.len();

        let mut const_nll = 0.0;
        const_nll += 0.5 * n * LN_2PI - 0.5 * logdet_u;
        const_nll += 0.5 * n * LN_2PI - 0.5 * logdet_v;
        const_nll += 0.5 * n * n_times * LN_2PI
            - 0.5 * n * (1.0 - delta * delta).ln()
            - 0.5 * n_times * logdet_xi;
        let use_gamma_latent = n_gamma > 0;
        if use_gamma_latent {
            const_nll += n_gamma as f64 * (0.5 * LN_2PI + params.catchability.log_sigma_gamma);
        }

        let mut eta_fixed = Vec::with_capacity(data.n_rows());
        let mut s_fixed = Vec::with_capacity(data.n_rows());
        for r in 0..data.n_rows() {
            eta_fixed.push(params.fixed.alpha_prime + data.design_presence.dot(r, &params.fixed.theta_prime));
            if data.obs.z[r] == 1 {
                let vessel = data.obs.vessel[r];
                // Random effects ride on the latent vector; the fixed part
                // of log k comes from the intercept and attribute terms.
                let log_k = if vessel == crate::hurdle::RESEARCH_VESSEL {
                    params.catchability.reference_k.ln()
                } else if params.catchability.gamma_c.is_empty() {
                    let mut fixed_free = params.catchability.clone();
                    fixed_free.gamma_c = Vec::new();
                    // log_k without a random-effect contribution.
                    let mut value = params.catchability.alpha_c;
                    if !params.catchability.fixed_coefs.is_empty() {
                        let row = data.vessel_attr_row(vessel).ok_or_else(|| {
                            Error::Lookup(format!("vessel {vessel}: attribute row required"))
                        })?;
                        if row.len() != params.catchability.fixed_coefs.len() {
                            return Err(Error::invalid("vessel attribute width mismatch"));
                        }
                        value += row
                            .iter()
                            .zip(&params.catchability.fixed_coefs)
                            .map(|(x, c)| x * c)
                            .sum::<f64>();
                    }
                    value
                } else {
                    params.catchability.log_k(vessel, data.vessel_attr_row(vessel))?
                };
                s_fixed.push(log_k + params.fixed.alpha + data.design_biomass.dot(r, &params.fixed.theta));
            } else {
                s_fixed.push(0.0);
            }
        }

        Ok(FisheriesModel {
            shape,
            data,
            ups2: (2.0 * params.dispersion.log_upsilon).exp(),
            params,
            q_u,
            q_v,
            q_xi,
            delta,
            const_nll,
            eta_fixed,
            s_fixed,
            use_gamma_latent,
        })
    }

    /// Contiguous field copies: `(U, V, W)` with W time-major flat.
    pub(super) fn field_views(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let shape = self.shape;
        let n = shape.n_nodes;
        let mut fu = vec![0.0; n];
        let mut fv = vec![0.0; n];
        let mut fw = vec![0.0; n * shape.n_times];
        for j in 0..n {
            fu[j] = u[shape.idx_u(j)];
            fv[j] = u[shape.idx_v(j)];
            for t in 0..shape.n_times {
                fw[t * n + j] = u[shape.idx_w(j, t)];
            }
        }
        (fu, fv, fw)
    }

    /// AR(1) coefficient band aligned with the shape's time pairs.
    pub(super) fn ar1_coefs_public(&self) -> Vec<f64> {
        self.ar1_coefs()
    }

    /// ∂B/∂δ aligned with the time pairs.
    pub(super) fn ar1_dcoefs_ddelta(&self) -> Vec<f64> {
        let t_len = self.shape.n_times;
        self.shape
            .w_pairs
            .iter()
            .map(|&(t1, t2)| {
                if t1 == t2 {
                    if t_len == 1 {
                        -2.0 * self.delta
                    } else if t1 == 0 || t1 == t_len - 1 {
                        0.0
                    } else {
                        2.0 * self.delta
                    }
                } else {
                    -1.0
                }
            })
            .collect()
    }

    fn field_vecs(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let shape = self.shape;
        let n = shape.n_nodes;
        let mut fu = vec![0.0; n];
        let mut fv = vec![0.0; n];
        let mut fw = vec![vec![0.0; n]; shape.n_times];
        for j in 0..n {
            fu[j] = u[shape.idx_u(j)];
            fv[j] = u[shape.idx_v(j)];
            for (t, w_col) in fw.iter_mut().enumerate() {
                w_col[j] = u[shape.idx_w(j, t)];
            }
        }
        (fu, fv, fw)
    }

    /// AR(1) coefficient band of the W prior: `(t1, t2, value)` aligned
    /// with the shape's time pairs.
    fn ar1_coefs(&self) -> Vec<f64> {
        let t_len = self.shape.n_times;
        let d2 = self.delta * self.delta;
        self.shape
            .w_pairs
            .iter()
            .map(|&(t1, t2)| {
                if t1 == t2 {
                    if t_len == 1 {
                        1.0 - d2
                    } else if t1 == 0 || t1 == t_len - 1 {
                        1.0
                    } else {
                        1.0 + d2
                    }
                } else {
                    -self.delta
                }
            })
            .collect()
    }

    fn accumulate(&self, u: &[f64], mut sink: Option<(&mut [f64], &mut [f64])>, psd: bool) -> Result<f64> {
        let shape = self.shape;
        let n = shape.n_nodes;
        let q_pat = shape.structure.pattern();
        let mut f = self.const_nll;

        let (fu, fv, fw) = self.field_vecs(u);

        // Spatial priors.
        let mut qu = vec![0.0; n];
        q_pat.matvec(&self.q_u.values, &fu, &mut qu);
        f += 0.5 * dot(&fu, &qu);
        let mut qv = vec![0.0; n];
        q_pat.matvec(&self.q_v.values, &fv, &mut qv);
        f += 0.5 * dot(&fv, &qv);
        if let Some((grad, hess)) = sink.as_mut() {
            for j in 0..n {
                grad[shape.idx_u(j)] += qu[j];
                grad[shape.idx_v(j)] += qv[j];
            }
            for (s, (&us, &vs)) in shape.u_slots.iter().zip(&shape.v_slots).enumerate() {
                hess[us] += self.q_u.values[s];
                hess[vs] += self.q_v.values[s];
            }
        }

        // AR(1) prior via the innovation representation.
        let one_minus_d2 = 1.0 - self.delta * self.delta;
        let mut q_w1 = vec![0.0; n];
        q_pat.matvec(&self.q_xi.values, &fw[0], &mut q_w1);
        f += 0.5 * one_minus_d2 * dot(&fw[0], &q_w1);
        let mut q_innov: Vec<Vec<f64>> = Vec::with_capacity(shape.n_times.saturating_sub(1));
        let mut innovations: Vec<Vec<f64>> = Vec::with_capacity(shape.n_times.saturating_sub(1));
        for t in 1..shape.n_times {
            let innov: Vec<f64> = (0..n).map(|j| fw[t][j] - self.delta * fw[t - 1][j]).collect();
            let mut qi = vec![0.0; n];
            q_pat.matvec(&self.q_xi.values, &innov, &mut qi);
            f += 0.5 * dot(&innov, &qi);
            innovations.push(innov);
            q_innov.push(qi);
        }
        if let Some((grad, hess)) = sink.as_mut() {
            for j in 0..n {
                let mut g0 = one_minus_d2 * q_w1[j];
                if shape.n_times > 1 {
                    g0 -= self.delta * q_innov[0][j];
                }
                grad[shape.idx_w(j, 0)] += g0;
                for t in 1..shape.n_times {
                    let mut gt = q_innov[t - 1][j];
                    if t + 1 < shape.n_times {
                        gt -= self.delta * q_innov[t][j];
                    }
                    grad[shape.idx_w(j, t)] += gt;
                }
            }
            let coefs = self.ar1_coefs();
            let np = shape.w_pairs.len();
            for s in 0..q_pat.nnz() {
                let qv_s = self.q_xi.values[s];
                for (k, &b) in coefs.iter().enumerate() {
                    let slot = shape.w_slots[s * np + k];
                    hess[slot] += b * qv_s;
                    let mirror = shape.w_slots_mirror[s * np + k];
                    if mirror != NO_SLOT {
                        hess[mirror] += b * qv_s;
                    }
                }
            }
        }

        // Catchability random-effect prior.
        if self.use_gamma_latent {
            let sigma2 = (2.0 * self.params.catchability.log_sigma_gamma).exp();
            for g in 0..shape.gamma_vessels.len() {
                let idx = shape.idx_gamma(g);
                let value = u[idx];
                f += 0.5 * value * value / sigma2;
                if let Some((grad, hess)) = sink.as_mut() {
                    grad[idx] += value / sigma2;
                    hess[shape.gamma_diag_slots[g]] += 1.0 / sigma2;
                }
            }
        }

        // Presence rows.
        for (r, row) in shape.presence_rows.iter().enumerate() {
            let mut eta = self.eta_fixed[r];
            for (i, &idx) in row.idxs.iter().enumerate() {
                eta += row.weights[i] * u[idx];
            }
            let z = f64::from(self.data.obs.z[r]);
            // softplus(eta) - z*eta, stable on both tails.
            f += eta.max(0.0) + (-eta.abs()).exp().ln_1p() - z * eta;
            if let Some((grad, hess)) = sink.as_mut() {
                let pi = crate::hurdle::presence_prob(eta);
                let d1 = pi - z;
                let d2 = pi * (1.0 - pi);
                scatter_row(row, d1, d2, grad, hess);
            }
        }

        // Positive-biomass rows.
        for (r, row) in shape.biomass_rows.iter().enumerate() {
            let Some(row) = row else { continue };
            let mut s = self.s_fixed[r];
            for (i, &idx) in row.idxs.iter().enumerate() {
                s += row.weights[i] * u[idx];
            }
            let a = (2.0 * s).exp() / self.ups2;
            if !a.is_finite() || a <= 0.0 {
                return Err(Error::InnerFailure(format!(
                    "gamma shape overflow at row {r} (log zeta = {s})"
                )));
            }
            let ln_y = shape.ln_y[r];
            let log_b = self.ups2.ln() - s;
            let y_over_b = self.data.obs.y_val[r] * s.exp() / self.ups2;
            let ll = (a - 1.0) * ln_y - y_over_b - a * log_b - ln_gamma(a);
            f -= ll;
            if let Some((grad, hess)) = sink.as_mut() {
                let centered = ln_y - log_b - digamma(a);
                let d1ll = 2.0 * a * centered + a - y_over_b;
                let d2ll = 4.0 * a * centered + 2.0 * a * (1.0 - 2.0 * a * trigamma(a)) + 2.0 * a - y_over_b;
                let d2 = if psd { (-d2ll).max(0.0) } else { -d2ll };
                scatter_row(row, -d1ll, d2, grad, hess);
            }
        }

        // Point-process terms.
        if self.data.include_ipp {
            for t in 0..shape.n_times {
                let alpha = self.params.preferential.alpha_pp[t];
                let beta_p = self.params.preferential.beta_prime[t];
                let beta = self.params.preferential.beta[t];
                for &r in &self.data.fdd_rows_by_time[t] {
                    let mut log_lambda = alpha;
                    for (node, w) in self.data.projection.row(r) {
                        log_lambda += w * (beta_p * u[shape.idx_v(node)] + beta * u[shape.idx_u(node)]);
                    }
                    f -= log_lambda;
                    if let Some((grad, _)) = sink.as_mut() {
                        for (node, w) in self.data.projection.row(r) {
                            grad[shape.idx_v(node)] -= beta_p * w;
                            grad[shape.idx_u(node)] -= beta * w;
                        }
                    }
                }
                for node in &shape.ipp_nodes {
                    let log_lambda = alpha + beta_p * u[node.v_idx] + beta * u[node.u_idx];
                    let lam_qw = log_lambda.exp() * node.qw;
                    if !lam_qw.is_finite() {
                        return Err(Error::InnerFailure("intensity overflow in the IPP integral".into()));
                    }
                    f += lam_qw;
                    if let Some((grad, hess)) = sink.as_mut() {
                        grad[node.u_idx] += beta * lam_qw;
                        grad[node.v_idx] += beta_p * lam_qw;
                        hess[node.uu] += beta * beta * lam_qw;
                        hess[node.uv] += beta * beta_p * lam_qw;
                        hess[node.vv] += beta_p * beta_p * lam_qw;
                    }
                }
            }
        }

        Ok(f)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scatter_row(row: &RowScatter, d1: f64, d2: f64, grad: &mut [f64], hess: &mut [f64]) {
    let m = row.idxs.len();
    for i in 0..m {
        grad[row.idxs[i]] += d1 * row.weights[i];
    }
    let mut k = 0;
    for a in 0..m {
        let wa = row.weights[a];
        for b in a..m {
            hess[row.pair_slots[k]] += d2 * wa * row.weights[b];
            k += 1;
        }
    }
}

impl<'a> LatentModel for FisheriesModel<'a> {
    fn n_latent(&self) -> usize {
        self.shape.n_latent()
    }

    fn hessian_len(&self) -> usize {
        self.shape.backend.values_len()
    }

    fn factorize(&self, hess: &[f64], ridge: f64) -> Result<AnyFactor<'_>> {
        self.shape.backend.factor(hess, ridge)
    }

    fn nll(&self, u: &[f64]) -> Result<f64> {
        self.accumulate(u, None, false)
    }

    fn eval(&self, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        hess.fill(0.0);
        self.accumulate(u, Some((grad, hess)), false)
    }

    fn eval_psd(&self, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        hess.fill(0.0);
        self.accumulate(u, Some((grad, hess)), true)
    }
}

/// ψ(x) by the recurrence `ψ(x) = ψ(x+1) − 1/x` and the asymptotic
/// series. Smooth to near machine precision; the Newton gradient needs
/// ψ consistent with `ln Γ` far below the inner tolerance, which rules
/// out implementations with visible branch seams.
pub fn digamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    let mut value = 0.0;
    let mut z = x;
    while z < 14.0 {
        value -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // ln z − 1/(2z) − 1/(12z²) + 1/(120z⁴) − 1/(252z⁶) + 1/(240z⁸) − 1/(132z¹⁰)
    value + z.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

/// ψ′(x) by the recurrence `ψ′(x) = ψ′(x+1) + 1/x²` and the asymptotic
/// series for large arguments.
pub fn trigamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    let mut value = 0.0;
    let mut z = x;
    while z < 14.0 {
        value += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // 1/z + 1/(2z²) + Σ B₂ₙ/z^(2n+1)
    value
        + inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))
}

/// Flat parameter vector layout of the outer optimization: transformed
/// (unconstrained) scales throughout. Packing and unpacking are exact
/// inverses, bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub p_presence: usize,
    pub p_biomass: usize,
    pub n_times: usize,
    pub include_ipp: bool,
    pub catch: CatchSetup,
}

impl ParamLayout {
    pub fn new(p_presence: usize, p_biomass: usize, n_times: usize, include_ipp: bool, catch: CatchSetup) -> Self {
        ParamLayout { p_presence, p_biomass, n_times, include_ipp, catch }
    }

    pub fn len(&self) -> usize {
        let mut k = 2 + self.p_presence + self.p_biomass + 1 + 6 + 1;
        if self.include_ipp {
            k += 3 * self.n_times;
        }
        if self.catch.enabled {
            k += 1 + self.catch.n_fixed + usize::from(self.catch.random_effect);
        }
        k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["alpha_prime".to_string(), "alpha".to_string()];
        names.extend((0..self.p_presence).map(|j| format!("theta_prime[{j}]")));
        names.extend((0..self.p_biomass).map(|j| format!("theta[{j}]")));
        names.push("log_upsilon".into());
        for field in ["v", "u", "w"] {
            names.push(format!("log_kappa_{field}"));
            names.push(format!("log_tau_{field}"));
        }
        names.push("delta_star".into());
        if self.include_ipp {
            names.extend((0..self.n_times).map(|t| format!("alpha_pp[{t}]")));
            names.extend((0..self.n_times).map(|t| format!("beta_prime[{t}]")));
            names.extend((0..self.n_times).map(|t| format!("beta[{t}]")));
        }
        if self.catch.enabled {
            names.push("alpha_c".into());
            names.extend((0..self.catch.n_fixed).map(|j| format!("catch_fixed[{j}]")));
            if self.catch.random_effect {
                names.push("log_sigma_gamma".into());
            }
        }
        names
    }

    pub fn pack(&self, p: &JointParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.push(p.fixed.alpha_prime);
        x.push(p.fixed.alpha);
        x.extend_from_slice(&p.fixed.theta_prime);
        x.extend_from_slice(&p.fixed.theta);
        x.push(p.dispersion.log_upsilon);
        x.push(p.matern_v.log_kappa);
        x.push(p.matern_v.log_tau);
        x.push(p.matern_u.log_kappa);
        x.push(p.matern_u.log_tau);
        x.push(p.matern_w.log_kappa);
        x.push(p.matern_w.log_tau);
        x.push(p.temporal.delta_star);
        if self.include_ipp {
            x.extend_from_slice(&p.preferential.alpha_pp);
            x.extend_from_slice(&p.preferential.beta_prime);
            x.extend_from_slice(&p.preferential.beta);
        }
        if self.catch.enabled {
            x.push(p.catchability.alpha_c);
            x.extend_from_slice(&p.catchability.fixed_coefs);
            if self.catch.random_effect {
                x.push(p.catchability.log_sigma_gamma);
            }
        }
        debug_assert_eq!(x.len(), self.len());
        x
    }

    pub fn unpack(&self, x: &[f64]) -> JointParams {
        assert_eq!(x.len(), self.len(), "packed parameter length mismatch");
        let mut params = JointParams::neutral(self.p_presence, self.p_biomass, self.n_times);
        let mut k = 0;
        let mut next = || {
            let v = x[k];
            k += 1;
            v
        };
        params.fixed.alpha_prime = next();
        params.fixed.alpha = next();
        for j in 0..self.p_presence {
            params.fixed.theta_prime[j] = next();
        }
        for j in 0..self.p_biomass {
            params.fixed.theta[j] = next();
        }
        params.dispersion.log_upsilon = next();
        params.matern_v.log_kappa = next();
        params.matern_v.log_tau = next();
        params.matern_u.log_kappa = next();
        params.matern_u.log_tau = next();
        params.matern_w.log_kappa = next();
        params.matern_w.log_tau = next();
        params.temporal.delta_star = next();
        if self.include_ipp {
            for t in 0..self.n_times {
                params.preferential.alpha_pp[t] = next();
            }
            for t in 0..self.n_times {
                params.preferential.beta_prime[t] = next();
            }
            for t in 0..self.n_times {
                params.preferential.beta[t] = next();
            }
        } else {
            params.preferential = crate::pointprocess::PreferentialParams::zeros(self.n_times);
        }
        if self.catch.enabled {
            params.catchability.alpha_c = next();
            params.catchability.fixed_coefs = (0..self.catch.n_fixed).map(|_| next()).collect();
            if self.catch.random_effect {
                params.catchability.log_sigma_gamma = next();
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn digamma_reference_values() {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        assert_relative_eq!(digamma(1.0), -EULER_GAMMA, max_relative = 1e-13);
        assert_relative_eq!(
            digamma(0.5),
            -EULER_GAMMA - 2.0 * std::f64::consts::LN_2,
            max_relative = 1e-13
        );
        // ψ(n) = −γ + Σ_{k<n} 1/k.
        let mut harmonic = 0.0;
        for n in 1..30usize {
            assert_relative_eq!(digamma(n as f64), -EULER_GAMMA + harmonic, max_relative = 1e-12);
            harmonic += 1.0 / n as f64;
        }
        // ψ must be the derivative of ln Γ well below the inner tolerance,
        // including at large arguments where the shape parameter lives.
        for x in [0.7f64, 3.3, 13.9, 14.1, 250.0, 3000.0] {
            let h = 1e-6 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_relative_eq!(digamma(x), fd, max_relative = 1e-8);
        }
    }

    #[test]
    fn trigamma_reference_values() {
        let pi2_6 = std::f64::consts::PI * std::f64::consts::PI / 6.0;
        assert_relative_eq!(trigamma(1.0), pi2_6, max_relative = 1e-12);
        assert_relative_eq!(trigamma(2.0), pi2_6 - 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            trigamma(0.5),
            std::f64::consts::PI * std::f64::consts::PI / 2.0,
            max_relative = 1e-12
        );
        // Matches a central difference of digamma.
        for x in [0.3, 1.7, 5.5, 20.0] {
            let h = 1e-5;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn param_layout_roundtrip_is_bit_exact() {
        let layout = ParamLayout::new(2, 3, 4, true, CatchSetup { enabled: true, random_effect: true, n_fixed: 2 });
        let mut x: Vec<f64> = (0..layout.len()).map(|k| (k as f64 * 0.731).sin() * 3.0).collect();
        x[4] = -0.25;
        let params = layout.unpack(&x);
        let packed = layout.pack(&params);
        assert_eq!(x, packed);
        assert_eq!(layout.names().len(), layout.len());

        // 2 intercepts + dispersion + 6 covariance + delta_star.
        let plain = ParamLayout::new(0, 0, 2, false, CatchSetup::default());
        assert_eq!(plain.len(), 10);
        let x2: Vec<f64> = (0..plain.len()).map(|k| k as f64).collect();
        assert_eq!(plain.pack(&plain.unpack(&x2)), x2);
    }

    #[test]
    fn eval_matches_dense_finite_differences() {
        use crate::grid::{build_grid, Rect, TimeAxis};
        use crate::inference::latent::LatentModel;
        use crate::likelihood::simulate_test_replicate;

        let grid = build_grid(4, 4, Rect::unit(), 0.0).unwrap();
        let time_axis = TimeAxis::with_len(2).unwrap();
        let (params, _latent, data) = simulate_test_replicate(&grid, &time_axis, 1.3, 0.6, 8, 55);
        let shape = ModelShape::new(&grid, &data, 2, CatchSetup::default()).unwrap();
        let model = FisheriesModel::new(&shape, &data, params).unwrap();

        let n = shape.n_latent();
        let mut point: Vec<f64> = (0..n).map(|k| 0.3 * ((k as f64) * 0.37).sin()).collect();
        point[5] = -0.4;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; shape.backend.values_len()];
        let f0 = model.eval(&point, &mut grad, &mut hess).unwrap();
        assert_relative_eq!(f0, model.nll(&point).unwrap(), max_relative = 1e-12);

        let h = 2e-6;
        for i in 0..n {
            let mut xp = point.clone();
            xp[i] += h;
            let mut xm = point.clone();
            xm[i] -= h;
            let fd = (model.nll(&xp).unwrap() - model.nll(&xm).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, max_relative = 5e-4, epsilon = 1e-6);
        }

        // Hessian columns against finite differences of the gradient.
        let dense = shape
            .backend
            .scalar_symbolic()
            .expect("default shape uses the scalar backend")
            .pattern()
            .to_dense(&hess);
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        let mut hbuf = vec![0.0; hess.len()];
        for i in (0..n).step_by(7) {
            let mut xp = point.clone();
            xp[i] += h;
            let mut xm = point.clone();
            xm[i] -= h;
            model.eval(&xp, &mut gp, &mut hbuf).unwrap();
            model.eval(&xm, &mut gm, &mut hbuf).unwrap();
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert_relative_eq!(dense[(j, i)], fd, max_relative = 1e-3, epsilon = 1e-5);
            }
        }
    }
}
