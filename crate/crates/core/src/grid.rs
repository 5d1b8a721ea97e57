//! Spatial discretization and the shared time axis.
//!
//! The study domain is discretized on a regular lattice. The lattice is
//! extended by `boundary_pad` padding nodes on each side to push the SPDE
//! boundary effect away from the interior; padding nodes carry latent
//! field values but never enter domain quadrature.
//!
//! Two node-weight sets coexist:
//! - `mass_weight`: trapezoid lumping over the full padded lattice, used
//!   as the diagonal mass matrix `C` of the SPDE precision;
//! - `quad_weight`: trapezoid weights over the interior region only, used
//!   for domain integrals (the point-process integral). These sum to the
//!   domain area exactly. Generic interior nodes carry `cell_area`
//!   (= hx·hy); nodes on the interior edge carry half/quarter weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned domain bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn unit() -> Self {
        Rect {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }
}

/// Regular lattice over the padded domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialGrid {
    /// Interior node count along x.
    pub nx: usize,
    /// Interior node count along y.
    pub ny: usize,
    /// Interior (data) domain bounds.
    pub bounds: Rect,
    /// Padding nodes added on each side.
    pub boundary_pad: usize,
    /// Node spacing along x: `(xmax - xmin) / (nx - 1)`.
    pub hx: f64,
    /// Node spacing along y.
    pub hy: f64,
    /// Nominal per-node cell area `hx * hy` (grid metadata; edge nodes
    /// carry reduced quadrature weights so the interior weights sum to the
    /// domain area exactly).
    pub cell_area: f64,
    node_coords: Vec<(f64, f64)>,
    /// Interior node indices in row-major order.
    interior: Vec<usize>,
    /// Domain-quadrature weight per node (0 on padding nodes).
    quad_weight: Vec<f64>,
    /// Lumped mass weight per node over the padded lattice.
    mass_weight: Vec<f64>,
}

/// Builds the padded lattice. `pad_fraction` controls the padding width:
/// `ceil(pad_fraction * max(nx, ny))` nodes per side.
pub fn build_grid(nx: usize, ny: usize, bounds: Rect, pad_fraction: f64) -> Result<SpatialGrid> {
    if nx < 2 || ny < 2 {
        return Err(Error::invalid(format!(
            "grid dimensions must be at least 2x2, got {nx}x{ny}"
        )));
    }
    if !(bounds.xmax > bounds.xmin) || !(bounds.ymax > bounds.ymin) {
        return Err(Error::invalid("domain bounds must have positive extent"));
    }
    if !(pad_fraction >= 0.0) || !pad_fraction.is_finite() {
        return Err(Error::invalid("pad_fraction must be a finite value >= 0"));
    }

    let pad = (pad_fraction * nx.max(ny) as f64).ceil() as usize;
    let nx_tot = nx + 2 * pad;
    let ny_tot = ny + 2 * pad;
    let hx = bounds.width() / (nx - 1) as f64;
    let hy = bounds.height() / (ny - 1) as f64;

    let mut node_coords = Vec::with_capacity(nx_tot * ny_tot);
    let mut interior = Vec::with_capacity(nx * ny);
    let mut quad_weight = vec![0.0; nx_tot * ny_tot];
    let mut mass_weight = vec![0.0; nx_tot * ny_tot];

    for iy in 0..ny_tot {
        for ix in 0..nx_tot {
            let x = bounds.xmin + (ix as f64 - pad as f64) * hx;
            let y = bounds.ymin + (iy as f64 - pad as f64) * hy;
            node_coords.push((x, y));

            let idx = iy * nx_tot + ix;
            let wx_mass = if ix == 0 || ix == nx_tot - 1 { 0.5 } else { 1.0 };
            let wy_mass = if iy == 0 || iy == ny_tot - 1 { 0.5 } else { 1.0 };
            mass_weight[idx] = hx * hy * wx_mass * wy_mass;

            let in_x = ix >= pad && ix < pad + nx;
            let in_y = iy >= pad && iy < pad + ny;
            if in_x && in_y {
                interior.push(idx);
                let jx = ix - pad;
                let jy = iy - pad;
                let wx = if jx == 0 || jx == nx - 1 { 0.5 } else { 1.0 };
                let wy = if jy == 0 || jy == ny - 1 { 0.5 } else { 1.0 };
                quad_weight[idx] = hx * hy * wx * wy;
            }
        }
    }

    Ok(SpatialGrid {
        nx,
        ny,
        bounds,
        boundary_pad: pad,
        hx,
        hy,
        cell_area: hx * hy,
        node_coords,
        interior,
        quad_weight,
        mass_weight,
    })
}

impl SpatialGrid {
    /// Total node count of the padded lattice.
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn nx_total(&self) -> usize {
        self.nx + 2 * self.boundary_pad
    }

    pub fn ny_total(&self) -> usize {
        self.ny + 2 * self.boundary_pad
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    /// Interior node indices (row-major over the interior block).
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn node_coord(&self, node: usize) -> (f64, f64) {
        self.node_coords[node]
    }

    pub fn node_coords(&self) -> &[(f64, f64)] {
        &self.node_coords
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.quad_weight[node] > 0.0
    }

    /// Domain-quadrature weight of a node; zero on padding nodes.
    pub fn quad_weight(&self, node: usize) -> f64 {
        self.quad_weight[node]
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weight
    }

    /// Lumped mass weight of a node over the padded lattice.
    pub fn mass_weight(&self, node: usize) -> f64 {
        self.mass_weight[node]
    }

    /// Node index of the lattice position `(ix, iy)` on the padded lattice.
    pub fn node_at(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx_total() + ix
    }

    /// Lattice position of `node` on the padded lattice.
    pub fn lattice_pos(&self, node: usize) -> (usize, usize) {
        (node % self.nx_total(), node / self.nx_total())
    }

    /// Index of the interior node nearest to `(x, y)`.
    pub fn nearest_interior_node(&self, x: f64, y: f64) -> Result<usize> {
        if !self.bounds.contains(x, y) {
            return Err(Error::OutOfDomain { index: 0, x, y });
        }
        let pad = self.boundary_pad as f64;
        let ix = ((x - self.bounds.xmin) / self.hx + pad).round() as usize;
        let iy = ((y - self.bounds.ymin) / self.hy + pad).round() as usize;
        let ix = ix.clamp(self.boundary_pad, self.boundary_pad + self.nx - 1);
        let iy = iy.clamp(self.boundary_pad, self.boundary_pad + self.ny - 1);
        Ok(self.node_at(ix, iy))
    }
}

/// Ordered time units shared by all modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    labels: Vec<String>,
}

impl TimeAxis {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("time axis needs at least one unit"));
        }
        for pair in labels.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::invalid(format!(
                    "time labels must be strictly ordered: `{}` follows `{}`",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(TimeAxis { labels })
    }

    /// `t1..tT` labels.
    pub fn with_len(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("time axis needs at least one unit"));
        }
        Self::from_labels((1..=t).map(|k| format!("t{k}")).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Lookup(format!("unknown time label `{label}`")))
    }
}

/// Sparse operator mapping node values to values at observation locations.
/// Each row holds the bilinear interpolation weights of one location:
/// nonnegative, at most 4 entries, summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    n_nodes: usize,
}

impl Projection {
    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// `(node, weight)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.weights[lo..hi].iter().copied())
    }

    /// Interpolated value of `field` at row `i`.
    pub fn dot_row(&self, i: usize, field: &[f64]) -> f64 {
        self.row(i).map(|(j, w)| w * field[j]).sum()
    }

    /// Applies the operator to a node field.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.dot_row(i, field)).collect()
    }
}

/// Builds the bilinear interpolation operator for `locations`, which must
/// all lie inside the interior bounds.
pub fn project(grid: &SpatialGrid, locations: &[(f64, f64)]) -> Result<Projection> {
    let mut indptr = Vec::with_capacity(locations.len() + 1);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    indptr.push(0);

    for (i, &(x, y)) in locations.iter().enumerate() {
        if !grid.bounds.contains(x, y) {
            return Err(Error::OutOfDomain { index: i, x, y });
        }
        let pad = grid.boundary_pad;
        // Cell index within the interior block, clamped so locations on the
        // top/right boundary use the last cell.
        let fx = (x - grid.bounds.xmin) / grid.hx;
        let fy = (y - grid.bounds.ymin) / grid.hy;
        let cx = (fx.floor() as usize).min(grid.nx - 2);
        let cy = (fy.floor() as usize).min(grid.ny - 2);
        let tx = fx - cx as f64;
        let ty = fy - cy as f64;

        let base = grid.node_at(pad + cx, pad + cy);
        let stride = grid.nx_total();
        let cand = [
            (base, (1.0 - tx) * (1.0 - ty)),
            (base + 1, tx * (1.0 - ty)),
            (base + stride, (1.0 - tx) * ty),
            (base + stride + 1, tx * ty),
        ];

        // Prune numerically-zero weights (node/edge coincidence) and
        // renormalize so each row sums to exactly 1.
        let kept: Vec<(usize, f64)> = cand.iter().copied().filter(|&(_, w)| w > 1e-12).collect();
        let total: f64 = kept.iter().map(|&(_, w)| w).sum();
        for (node, w) in kept {
            indices.push(node);
            weights.push(w / total);
        }
        indptr.push(indices.len());
    }

    Ok(Projection {
        indptr,
        indices,
        weights,
        n_nodes: grid.n_nodes(),
    })
}
