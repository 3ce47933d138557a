//! Finite-rank generator `E = kappa(-I + T~)` and the hidden Markov model it drives.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jump::{JumpGenerator, RowSampler};
use crate::linalg;
use crate::resolvent::{KernelKind, KernelMatrix};
use crate::rng;
use crate::statespace::{operator_norm_weighted, partition_compact, CellPartition, FunctionVector, GridSpace, NodeSet};
use crate::BOUND_SLACK;

/// Weight used to damp the tails in truncation estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailWeight {
    /// `W0 = W^{1/4}`.
    #[default]
    QuarticRoot,
    /// `W0 = 1`.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationPlan {
    pub r0: f64,
    /// `{v <= r0} ∩ {W <= r0}`.
    pub c_r0: NodeSet,
    pub w0: FunctionVector,
    pub v0: FunctionVector,
    /// `|||I_{W0} (R - I_C R I_C) I_{W0}|||_{v0}`.
    pub epsilon_tail: f64,
}

/// `I_{W0} K I_{W0}` as a matrix.
fn sandwich(k: &DMatrix<f64>, w0: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| w0[i] * k[(i, j)] * w0[j])
}

pub fn truncation_plan(
    r: &DMatrix<f64>,
    v: &FunctionVector,
    w: &FunctionVector,
    r0: f64,
    weight: TailWeight,
    grid: &GridSpace,
) -> Result<TruncationPlan> {
    let n = grid.len();
    for f in [v, w] {
        if f.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: f.len() });
        }
    }
    if r.nrows() != n || r.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: r.nrows() });
    }
    let c_r0 = NodeSet::from_predicate(n, |i| v.values[i].exp() <= r0 && w.values[i] <= r0);
    if c_r0.is_empty() {
        return Err(Error::EmptySet(format!("truncation set at r0 = {r0}")));
    }
    let w0 = match weight {
        TailWeight::QuarticRoot => w.map("W0", |x| x.powf(0.25)),
        TailWeight::Constant => FunctionVector::constant("W0", n, 1.0),
    };
    let v0 = FunctionVector::new("v0", (0..n).map(|i| w0.values[i] * v.values[i].exp()).collect());
    let inside = c_r0.mask(n);
    let tail = DMatrix::from_fn(n, n, |i, j| if inside[i] && inside[j] { 0.0 } else { r[(i, j)] });
    let epsilon_tail = operator_norm_weighted(&sandwich(&tail, &w0.values), &v0.values);
    Ok(TruncationPlan { r0, c_r0, w0, v0, epsilon_tail })
}

/// `T = sum_ij theta_ij 1_{C_i} ⊗ nu_j` with `nu_j` uniform on cell `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteRankKernel {
    pub cells: CellPartition,
    /// Row-normalized cell-to-cell masses.
    pub theta: DMatrix<f64>,
    /// Row sums of the cell-averaged masses before normalization.
    pub raw_row_sums: Vec<f64>,
    /// `N x n`; row `j` is `nu_j` as a grid vector.
    pub nu: DMatrix<f64>,
    /// `|||I_{W0} [R - T] I_{W0}|||_{v0}`.
    pub achieved_error: f64,
}

impl FiniteRankKernel {
    pub fn rank(&self) -> usize {
        self.theta.nrows()
    }

    /// Grid-level kernel; rows outside the hull are zero.
    pub fn matrix(&self) -> DMatrix<f64> {
        let profiles = &self.theta * &self.nu;
        let n = self.nu.ncols();
        let mut t = DMatrix::zeros(n, n);
        for (x, c) in self.cells.cell_of.iter().enumerate() {
            if let Some(i) = c {
                t.row_mut(x).copy_from(&profiles.row(*i));
            }
        }
        t
    }
}

fn uniform_measures(cells: &[NodeSet], n: usize) -> DMatrix<f64> {
    let mut nu = DMatrix::zeros(cells.len(), n);
    for (j, cell) in cells.iter().enumerate() {
        let w = 1.0 / cell.len() as f64;
        for x in cell.iter() {
            nu[(j, x)] = w;
        }
    }
    nu
}

/// Cell-averages the masses `R(x, C_j)` over `x ∈ C_i` and normalizes rows.
pub fn finite_rank_approx(r: &DMatrix<f64>, plan: &TruncationPlan, cells_per_axis: usize, grid: &GridSpace) -> Result<FiniteRankKernel> {
    let cells = partition_compact(grid, &plan.c_r0, cells_per_axis)?;
    let n = grid.len();
    let k = cells.num_cells();
    let mut raw = DMatrix::<f64>::zeros(k, k);
    for (i, ci) in cells.cells.iter().enumerate() {
        for x in ci.iter() {
            for (j, cj) in cells.cells.iter().enumerate() {
                raw[(i, j)] += cj.iter().map(|y| r[(x, y)]).sum::<f64>();
            }
        }
        let size = ci.len() as f64;
        raw.row_mut(i).iter_mut().for_each(|m| *m /= size);
    }
    let raw_row_sums = linalg::row_sums(&raw);
    if let Some(i) = raw_row_sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("cell {i} carries no kernel mass inside the hull")));
    }
    let mut theta = raw;
    linalg::normalize_rows(&mut theta);
    let nu = uniform_measures(&cells.cells, n);
    let mut fr = FiniteRankKernel { cells, theta, raw_row_sums, nu, achieved_error: 0.0 };
    let diff = r - fr.matrix();
    fr.achieved_error = operator_norm_weighted(&sandwich(&diff, &plan.w0.values), &plan.v0.values);
    Ok(fr)
}

/// Hidden chain on `{0, 1..N}` (state 0 is the exterior) and its grid-level generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteRankGenerator {
    pub kappa: f64,
    /// `N x N`, strictly positive, row-stochastic.
    pub r: DMatrix<f64>,
    /// `N x n`; row `j` is `nu_j`.
    pub nu: DMatrix<f64>,
    pub cells: Vec<NodeSet>,
    pub exterior: NodeSet,
    /// `q = -kappa (I - r~)` on `{0..N}` with `r~_{01} = 1`.
    pub q: DMatrix<f64>,
    /// Grid-level `E`.
    pub grid_generator: DMatrix<f64>,
    /// `|||D_kappa - E|||_v` when built against a jump generator.
    pub generator_gap: Option<f64>,
    pub jittered: bool,
}

pub const POSITIVITY_JITTER: f64 = 1e-6;

fn hidden_rate_matrix(r: &DMatrix<f64>, kappa: f64) -> DMatrix<f64> {
    let n = r.nrows();
    let mut rt = DMatrix::zeros(n + 1, n + 1);
    rt[(0, 1)] = 1.0;
    rt.view_mut((1, 1), (n, n)).copy_from(r);
    (rt - DMatrix::identity(n + 1, n + 1)) * kappa
}

impl FiniteRankGenerator {
    /// Assembles the hidden chain and grid generator from `r`, the cell measures
    /// and cell membership. Cell 0 receives the exterior.
    pub fn assemble(kappa: f64, r: DMatrix<f64>, nu: DMatrix<f64>, cells: Vec<NodeSet>) -> Result<Self> {
        let k = r.nrows();
        if r.ncols() != k || nu.nrows() != k || cells.len() != k || k == 0 {
            return Err(Error::DimensionMismatch { expected: k, found: nu.nrows() });
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        let n = nu.ncols();
        let mut cell_of = vec![None; n];
        for (i, c) in cells.iter().enumerate() {
            for x in c.iter() {
                cell_of[x] = Some(i);
            }
        }
        let exterior = NodeSet::from_predicate(n, |x| cell_of[x].is_none());
        let profiles = &r * &nu;
        let mut e = DMatrix::zeros(n, n);
        for x in 0..n {
            match cell_of[x] {
                Some(i) => e.row_mut(x).copy_from(&profiles.row(i)),
                None => e.row_mut(x).copy_from(&nu.row(0)),
            }
            e[(x, x)] -= 1.0;
        }
        e *= kappa;
        let q = hidden_rate_matrix(&r, kappa);
        Ok(Self { kappa, r, nu, cells, exterior, q, grid_generator: e, generator_gap: None, jittered: false })
    }

    pub fn num_states(&self) -> usize {
        self.r.nrows()
    }

    /// `(alpha I - E)^{-1}` without the validity-region check.
    pub fn resolvent(&self, alpha: f64) -> Result<KernelMatrix> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("resolvent parameter must be positive, got {alpha}")));
        }
        let t = linalg::shifted_inverse(&self.grid_generator, alpha, "alpha I - E")?;
        Ok(KernelMatrix::new(t, Some(alpha), KernelKind::FiniteRank))
    }

    /// `e^{t E}` on the grid.
    pub fn semigroup(&self, t: f64) -> Result<KernelMatrix> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
        }
        Ok(KernelMatrix::new(linalg::expm(&self.grid_generator, t), None, KernelKind::Semigroup))
    }
}

/// Builds `E` from a finite-rank kernel of `kappa R_kappa`, enforcing strict
/// positivity of `r` by mixing with the uniform matrix when needed.
pub fn build_hmm_generator(t: &FiniteRankKernel, kappa: f64, jump: Option<&JumpGenerator>, grid: &GridSpace) -> Result<FiniteRankGenerator> {
    let k = t.rank();
    let mut r = t.theta.clone();
    let jittered = r.iter().any(|&x| x <= 0.0);
    if jittered {
        log::warn!("finite-rank kernel has zero entries; mixing with uniform at weight {POSITIVITY_JITTER}");
        r = r * (1.0 - POSITIVITY_JITTER) + DMatrix::from_element(k, k, POSITIVITY_JITTER / k as f64);
        linalg::normalize_rows(&mut r);
    }
    let mut gen = FiniteRankGenerator::assemble(kappa, r, t.nu.clone(), t.cells.cells.clone())?;
    gen.jittered = jittered;
    if let Some(jg) = jump {
        if (jg.kappa() - kappa).abs() > 1e-12 * kappa {
            return Err(Error::ParameterMismatch { expected: kappa, found: jg.kappa() });
        }
        gen.generator_gap = Some(crate::statespace::operator_norm_v(&(jg.entries() - &gen.grid_generator), grid));
    }
    Ok(gen)
}

/// `p(t)^T = p^T e^{-kappa (I - r) t}` for a distribution `p` over `{1..N}`.
pub fn hmm_semigroup_coeffs(gen: &FiniteRankGenerator, p: &[f64], t: f64) -> Result<Vec<f64>> {
    let k = gen.num_states();
    if p.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: p.len() });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(format!("p must be a probability vector, sums to {total}")));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    let block = (&gen.r - DMatrix::identity(k, k)) * gen.kappa;
    let m = linalg::expm(&block, t);
    let row = DVector::from_column_slice(p).transpose() * m;
    Ok(row.iter().cloned().collect())
}

/// `T_alpha` with the norm bound `(1 + b_v) / (alpha - (1 + b_v) eps0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmResolvent {
    pub kernel: KernelMatrix,
    pub norm: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

/// Requires `alpha > (1 + b_v) eps0`, with `eps0` the generator gap.
pub fn hmm_resolvent(gen: &FiniteRankGenerator, alpha: f64, bv: f64, eps0: f64, grid: &GridSpace) -> Result<HmmResolvent> {
    let threshold = (1.0 + bv) * eps0;
    if !(alpha > threshold) {
        return Err(Error::ValidityRegion { alpha, threshold });
    }
    let kernel = gen.resolvent(alpha)?;
    let norm = crate::statespace::operator_norm_v(&kernel.entries, grid);
    let bound = (1.0 + bv) / (alpha - threshold);
    Ok(HmmResolvent { kernel, norm, bound, bound_holds: norm <= bound + BOUND_SLACK })
}

/// Hidden states and observations at the events of a rate-`kappa` clock.
/// `observations[k]` is drawn from `nu_{states[k]}` (absent for state 0).
#[derive(Debug, Clone, PartialEq)]
pub struct HmmPath {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub observations: Vec<Option<usize>>,
    pub horizon: f64,
}

impl HmmPath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.states[k.saturating_sub(1)]
    }
}

/// Samplers for the uniformized hidden chain (self-jumps included) and observations.
#[derive(Debug, Clone)]
pub struct HmmSampler {
    kappa: f64,
    transitions: RowSampler,
    observations: RowSampler,
}

impl HmmSampler {
    pub fn new(gen: &FiniteRankGenerator) -> Result<Self> {
        let k = gen.num_states();
        let mut rt = DMatrix::zeros(k + 1, k + 1);
        rt[(0, 1)] = 1.0;
        rt.view_mut((1, 1), (k, k)).copy_from(&gen.r);
        Ok(Self { kappa: gen.kappa, transitions: RowSampler::new(&rt)?, observations: RowSampler::new(&gen.nu)? })
    }

    pub fn observe<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Option<usize> {
        (state >= 1).then(|| self.observations.sample(state - 1, rng))
    }

    pub fn run<R: Rng + ?Sized>(&self, i0: usize, t_end: f64, rng: &mut R) -> HmmPath {
        let clock = Exp::new(self.kappa).expect("positive rate");
        let mut times = vec![0.0];
        let mut states = vec![i0];
        let mut observations = vec![self.observe(i0, rng)];
        let mut t = 0.0;
        let mut s = i0;
        loop {
            t += clock.sample(rng);
            if t > t_end {
                break;
            }
            s = self.transitions.sample(s, rng);
            times.push(t);
            states.push(s);
            observations.push(self.observe(s, rng));
        }
        HmmPath { times, states, observations, horizon: t_end }
    }
}

fn check_hmm_start(gen: &FiniteRankGenerator, i0: usize, t_end: f64) -> Result<()> {
    if i0 > gen.num_states() {
        return Err(Error::InvalidArgument(format!("hidden state {i0} out of range 0..={}", gen.num_states())));
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    Ok(())
}

pub fn simulate_hmm(gen: &FiniteRankGenerator, i0: usize, t_end: f64, seed: u64) -> Result<HmmPath> {
    check_hmm_start(gen, i0, t_end)?;
    Ok(HmmSampler::new(gen)?.run(i0, t_end, &mut rng::substream(seed, 0)))
}

/// `runs` independent paths, run `i` on substream `(seed, i)`.
pub fn simulate_hmm_runs(gen: &FiniteRankGenerator, i0: usize, t_end: f64, runs: usize, seed: u64) -> Result<Vec<HmmPath>> {
    check_hmm_start(gen, i0, t_end)?;
    let sampler = HmmSampler::new(gen)?;
    Ok(rng::par_replicates(seed, runs, |_, r| sampler.run(i0, t_end, r)))
}

/// Stationary law of `r` on `{1..N}`.
pub fn hidden_stationary(gen: &FiniteRankGenerator) -> Result<Vec<f64>> {
    Ok(linalg::stationary_of_stochastic(&gen.r)?.iter().cloned().collect())
}

/// `varpi = sum_i pbar_i nu_i` as a grid vector.
pub fn hmm_stationary(gen: &FiniteRankGenerator) -> Result<Vec<f64>> {
    let p = DVector::from_vec(hidden_stationary(gen)?);
    let w = gen.nu.transpose() * p;
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// Text form sufficient to rebuild the generator without the grid kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSpec {
    pub kappa: f64,
    pub nodes: usize,
    pub cells: Vec<Vec<usize>>,
    /// Per-cell weights aligned with `cells`.
    pub nu: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

impl FiniteRankGenerator {
    pub fn to_spec(&self) -> HmmSpec {
        HmmSpec {
            kappa: self.kappa,
            nodes: self.nu.ncols(),
            cells: self.cells.iter().map(|c| c.as_slice().to_vec()).collect(),
            nu: self.cells.iter().enumerate().map(|(j, c)| c.iter().map(|x| self.nu[(j, x)]).collect()).collect(),
            r: rows_of(&self.r),
            q: rows_of(&self.q),
        }
    }

    pub fn from_spec(spec: &HmmSpec) -> Result<Self> {
        let k = spec.cells.len();
        if spec.r.len() != k || spec.nu.len() != k || spec.r.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch { expected: k, found: spec.r.len() });
        }
        let r = DMatrix::from_fn(k, k, |i, j| spec.r[i][j]);
        let mut nu = DMatrix::zeros(k, spec.nodes);
        let mut cells = Vec::with_capacity(k);
        for (j, (idx, w)) in spec.cells.iter().zip(&spec.nu).enumerate() {
            if idx.len() != w.len() || idx.iter().any(|&x| x >= spec.nodes) {
                return Err(Error::InvalidArgument(format!("cell {j} has mismatched or out-of-range nodes")));
            }
            for (&x, &m) in idx.iter().zip(w) {
                nu[(j, x)] = m;
            }
            cells.push(NodeSet::from_indices(idx.clone()));
        }
        Self::assemble(spec.kappa, r, nu, cells)
    }
}

pub fn write_hmm_text(gen: &FiniteRankGenerator) -> Result<String> {
    toml::to_string(&gen.to_spec()).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn read_hmm_text(text: &str) -> Result<FiniteRankGenerator> {
    let spec: HmmSpec = toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    FiniteRankGenerator::from_spec(&spec)
}
