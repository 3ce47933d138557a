//! Tensor grids over a box in R^d, weighted norms and cell partitions.
//!
//! A [`GridSpace`] stores the nodes of a regular grid together with the
//! weight `v = e^V` used by every norm in the crate. `V` is shifted so that
//! its minimum over the nodes is zero, which makes `min v = 1` exactly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular tensor grid with Lyapunov weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpace {
    dim: usize,
    bounds: Vec<(f64, f64)>,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    cell_volume: f64,
    /// Flattened node coordinates, `dim` entries per node.
    points: Vec<f64>,
    /// Min-shifted Lyapunov values `V - min V`.
    lyapunov: Vec<f64>,
    weights_v: Vec<f64>,
}

/// Builds the grid over `bounds` with `resolution[k]` nodes on axis `k` and
/// weights `exp(V(x) - min V)`.
///
/// Nodes are ordered row-major with the last axis varying fastest.
pub fn build_grid<F>(bounds: &[(f64, f64)], resolution: &[usize], lyapunov: F) -> Result<GridSpace>
where
    F: Fn(&[f64]) -> f64,
{
    let dim = bounds.len();
    if dim == 0 || dim > 2 {
        return Err(Error::InvalidArgument(format!("grid dimension must be 1 or 2, got {dim}")));
    }
    if resolution.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: resolution.len() });
    }
    for (k, (&(lo, hi), &n)) in bounds.iter().zip(resolution).enumerate() {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("axis {k}: resolution {n} < 3")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("axis {k}: bad interval [{lo}, {hi}]")));
        }
    }
    let spacing: Vec<f64> = bounds
        .iter()
        .zip(resolution)
        .map(|(&(lo, hi), &n)| (hi - lo) / (n - 1) as f64)
        .collect();
    let len: usize = resolution.iter().product();
    let mut points = Vec::with_capacity(len * dim);
    let mut idx = vec![0usize; dim];
    for _ in 0..len {
        for k in 0..dim {
            let (lo, hi) = bounds[k];
            // Pin the last node to the exact upper bound.
            let x = if idx[k] + 1 == resolution[k] { hi } else { lo + idx[k] as f64 * spacing[k] };
            points.push(x);
        }
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < resolution[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut grid = GridSpace {
        dim,
        bounds: bounds.to_vec(),
        shape: resolution.to_vec(),
        cell_volume: spacing.iter().product(),
        spacing,
        points,
        lyapunov: vec![0.0; len],
        weights_v: vec![1.0; len],
    };
    let values: Vec<f64> = (0..len).map(|i| lyapunov(grid.point(i))).collect();
    grid.set_lyapunov(&values)?;
    Ok(grid)
}

impl GridSpace {
    /// One-dimensional grid on `[lo, hi]` with `n` nodes.
    pub fn line<F: Fn(f64) -> f64>(lo: f64, hi: f64, n: usize, lyapunov: F) -> Result<Self> {
        build_grid(&[(lo, hi)], &[n], |x| lyapunov(x[0]))
    }

    /// Same nodes, new Lyapunov weights.
    pub fn reweighted(&self, lyapunov_values: &[f64]) -> Result<Self> {
        let mut g = self.clone();
        g.set_lyapunov(lyapunov_values)?;
        Ok(g)
    }

    fn set_lyapunov(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: values.len() });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLyapunov { node, coords: self.point(node).to_vec() });
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        self.lyapunov = values.iter().map(|v| v - min).collect();
        self.weights_v = self.lyapunov.iter().map(|v| v.exp()).collect();
        if let Some(node) = self.weights_v.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLyapunov { node, coords: self.point(node).to_vec() });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lyapunov.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn point(&self, node: usize) -> &[f64] {
        &self.points[node * self.dim..(node + 1) * self.dim]
    }

    pub fn weights_v(&self) -> &[f64] {
        &self.weights_v
    }

    /// Min-shifted `V`, so `weights_v = exp(lyapunov)`.
    pub fn lyapunov(&self) -> &[f64] {
        &self.lyapunov
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rem = node;
        let mut idx = vec![0; self.dim];
        for k in (0..self.dim).rev() {
            idx[k] = rem % self.shape[k];
            rem /= self.shape[k];
        }
        idx
    }

    pub fn node(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Node displaced by `offset[k]` steps along each axis, if it stays on the grid.
    pub fn shifted(&self, node: usize, offset: &[isize]) -> Option<usize> {
        let mut idx = self.multi_index(node);
        for k in 0..self.dim {
            let j = idx[k] as isize + offset[k];
            if j < 0 || j >= self.shape[k] as isize {
                return None;
            }
            idx[k] = j as usize;
        }
        Some(self.node(&idx))
    }

    /// Nearest node to an arbitrary point; coordinates outside the box are clamped.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.dim)
            .map(|k| {
                let (lo, _) = self.bounds[k];
                let t = ((x[k] - lo) / self.spacing[k]).round();
                t.clamp(0.0, (self.shape[k] - 1) as f64) as usize
            })
            .collect();
        self.node(&idx)
    }

    /// Evaluates a scalar field at every node.
    pub fn eval<F: Fn(&[f64]) -> f64>(&self, label: &str, f: F) -> FunctionVector {
        FunctionVector::new(label, (0..self.len()).map(|i| f(self.point(i))).collect())
    }

    /// `min v over boundary nodes / median v`. The box is wide enough for the
    /// weighted norms when this exceeds `1e3`.
    pub fn boundary_weight_ratio(&self) -> f64 {
        let mut sorted = self.weights_v.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let boundary_min = (0..self.len())
            .filter(|&i| {
                self.multi_index(i)
                    .iter()
                    .zip(&self.shape)
                    .any(|(&j, &n)| j == 0 || j + 1 == n)
            })
            .map(|i| self.weights_v[i])
            .fold(f64::INFINITY, f64::min);
        boundary_min / median
    }
}

/// Grid representation of a function `g` in `L_inf^v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector {
    pub label: String,
    pub values: Vec<f64>,
}

impl FunctionVector {
    pub fn new(label: &str, values: Vec<f64>) -> Self {
        Self { label: label.to_string(), values }
    }

    pub fn constant(label: &str, len: usize, c: f64) -> Self {
        Self::new(label, vec![c; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, label: &str, f: impl Fn(f64) -> f64) -> Self {
        Self::new(label, self.values.iter().map(|&x| f(x)).collect())
    }
}

impl std::ops::Index<usize> for FunctionVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Sorted set of node indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeSet(Vec<usize>);

impl NodeSet {
    pub fn from_indices(mut nodes: Vec<usize>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        Self(nodes)
    }

    pub fn from_predicate(len: usize, pred: impl Fn(usize) -> bool) -> Self {
        Self((0..len).filter(|&i| pred(i)).collect())
    }

    pub fn all(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn contains(&self, node: usize) -> bool {
        self.0.binary_search(&node).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.0 {
            m[i] = true;
        }
        m
    }

    pub fn intersection(&self, other: &NodeSet) -> NodeSet {
        Self(self.0.iter().copied().filter(|&i| other.contains(i)).collect())
    }

    pub fn complement(&self, len: usize) -> NodeSet {
        let m = self.mask(len);
        Self::from_predicate(len, |i| !m[i])
    }
}

/// `sup_i |g_i| / w_i`.
pub fn sup_norm_weighted(g: &[f64], weights: &[f64]) -> f64 {
    g.iter().zip(weights).map(|(x, w)| x.abs() / w).fold(0.0, f64::max)
}

/// `||g||_v = max_i |g_i| / v_i`.
pub fn weighted_sup_norm(g: &FunctionVector, grid: &GridSpace) -> f64 {
    sup_norm_weighted(&g.values, grid.weights_v())
}

/// Induced operator norm of a kernel on `L_inf^w`:
/// `max_i sum_j |K_ij| w_j / w_i`.
///
/// The supremum over `||h||_w <= 1` is attained at `h_j = sign(K_ij) w_j`,
/// so this is exact rather than a bound.
pub fn operator_norm_weighted(k: &DMatrix<f64>, weights: &[f64]) -> f64 {
    assert_eq!(k.ncols(), weights.len(), "kernel/weight dimension mismatch");
    assert_eq!(k.nrows(), weights.len(), "kernel/weight dimension mismatch");
    let n = weights.len();
    let mut acc = vec![0.0; n];
    // Column-major storage: walk columns for cache locality.
    for j in 0..n {
        let col = k.column(j);
        let wj = weights[j];
        for (a, kij) in acc.iter_mut().zip(col.iter()) {
            *a += kij.abs() * wj;
        }
    }
    acc.iter().zip(weights).map(|(a, w)| a / w).fold(0.0, f64::max)
}

/// `|||K|||_v` for the grid's weight `v`.
pub fn operator_norm_v(k: &DMatrix<f64>, grid: &GridSpace) -> f64 {
    operator_norm_weighted(k, grid.weights_v())
}

/// Dual norm of a signed measure: `sum_j |mu_j| w_j`.
pub fn measure_norm_weighted(mu: &[f64], weights: &[f64]) -> f64 {
    mu.iter().zip(weights).map(|(m, w)| m.abs() * w).sum()
}

pub fn measure_norm_v(mu: &[f64], grid: &GridSpace) -> f64 {
    measure_norm_weighted(mu, grid.weights_v())
}

/// `C_F(r) = {i : F_i <= r}`.
pub fn sublevel_set(f: &FunctionVector, r: f64) -> NodeSet {
    NodeSet::from_predicate(f.len(), |i| f.values[i] <= r)
}

/// Disjoint cells `C_1..C_N` covering a hull, plus the exterior `C_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPartition {
    pub cells: Vec<NodeSet>,
    pub exterior: NodeSet,
    pub hull: NodeSet,
    /// Cell index (0-based into `cells`) of every node, `None` for `C_0`.
    pub cell_of: Vec<Option<usize>>,
}

impl CellPartition {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Splits the bounding box of `hull` into `cells_per_axis^d` equal boxes and
/// keeps the nonempty intersections with the hull.
///
/// A node lying on a face shared by two boxes goes to the lower-index box.
pub fn partition_compact(grid: &GridSpace, hull: &NodeSet, cells_per_axis: usize) -> Result<CellPartition> {
    if cells_per_axis < 1 {
        return Err(Error::InvalidArgument("cells_per_axis must be >= 1".into()));
    }
    if hull.is_empty() {
        return Err(Error::EmptySet("partition hull".into()));
    }
    let d = grid.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in hull.iter() {
        for (k, &x) in grid.point(i).iter().enumerate() {
            lo[k] = lo[k].min(x);
            hi[k] = hi[k].max(x);
        }
    }
    let m = cells_per_axis;
    let box_of = |x: &[f64]| -> usize {
        let mut flat = 0;
        for k in 0..d {
            let width = (hi[k] - lo[k]) / m as f64;
            let b = if width > 0.0 {
                let t = (x[k] - lo[k]) / width;
                // ceil(t) - 1 sends exact face hits to the lower box; the tolerance absorbs
                // round-off in node coordinates.
                ((t - 1e-9).ceil() as isize - 1).clamp(0, m as isize - 1) as usize
            } else {
                0
            };
            flat = flat * m + b;
        }
        flat
    };
    let total = m.pow(d as u32);
    let mut boxes: Vec<Vec<usize>> = vec![Vec::new(); total];
    for i in hull.iter() {
        boxes[box_of(grid.point(i))].push(i);
    }
    let mut cells = Vec::new();
    let mut cell_of = vec![None; grid.len()];
    for nodes in boxes.into_iter().filter(|b| !b.is_empty()) {
        for &i in &nodes {
            cell_of[i] = Some(cells.len());
        }
        cells.push(NodeSet::from_indices(nodes));
    }
    Ok(CellPartition {
        cells,
        exterior: hull.complement(grid.len()),
        hull: hull.clone(),
        cell_of,
    })
}
