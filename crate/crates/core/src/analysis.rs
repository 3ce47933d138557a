//! Cross-object comparisons: resolvent, semigroup and invariant-measure gaps,
//! spectra, ergodicity rates and the converse drift construction.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::{certify_dv3, DriftOperator, LyapunovCertificate};
use crate::error::{Error, Result};
use crate::hmm::{finite_rank_approx, truncation_plan, FiniteRankGenerator, FiniteRankKernel, TailWeight};
use crate::jump::JumpGenerator;
use crate::linalg;
use crate::resolvent::{GeneratorMatrix, KernelMatrix};
use crate::statespace::{measure_norm_v, operator_norm_v, weighted_sup_norm, FunctionVector, GridSpace, NodeSet};
use crate::BOUND_SLACK;

/// `alpha` grid `{delta, 1, 1/delta}` for `delta < 1`.
pub fn alpha_grid(delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(vec![delta, 1.0, 1.0 / delta])
}

/// `(alpha, |||R_alpha - T_alpha|||_v)` for paired families.
pub fn compare_resolvents(r: &[KernelMatrix], t: &[KernelMatrix], grid: &GridSpace) -> Result<Vec<(f64, f64)>> {
    if r.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: r.len(), found: t.len() });
    }
    r.iter()
        .zip(t)
        .map(|(ra, ta)| {
            let (a, b) = (ra.require_alpha()?, ta.require_alpha()?);
            if (a - b).abs() > 1e-12 * a {
                return Err(Error::ParameterMismatch { expected: a, found: b });
            }
            Ok((a, operator_norm_v(&(&ra.entries - &ta.entries), grid)))
        })
        .collect()
}

/// A Markov semigroup given by a rate matrix on grid nodes.
pub trait Semigroup {
    fn rate_matrix(&self) -> &DMatrix<f64>;

    fn transition(&self, t: f64) -> DMatrix<f64> {
        linalg::expm(self.rate_matrix(), t)
    }

    fn apply(&self, g: &[f64], t: f64) -> Vec<f64> {
        (self.transition(t) * DVector::from_column_slice(g)).iter().cloned().collect()
    }
}

impl Semigroup for GeneratorMatrix {
    fn rate_matrix(&self) -> &DMatrix<f64> {
        self.entries()
    }
}

impl Semigroup for JumpGenerator {
    fn rate_matrix(&self) -> &DMatrix<f64> {
        self.entries()
    }
}

impl Semigroup for FiniteRankGenerator {
    fn rate_matrix(&self) -> &DMatrix<f64> {
        &self.grid_generator
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemigroupGapRow {
    pub t: f64,
    /// `||P^t g - Q^t g||_v`.
    pub total: f64,
    /// `||P^t g - P_kappa^t g||_v`, when a middle semigroup is supplied.
    pub first_stage: Option<f64>,
    /// `||P_kappa^t g - Q^t g||_v`.
    pub second_stage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemigroupComparison {
    pub rows: Vec<SemigroupGapRow>,
    /// `||g||_v + ||D^2 g||_v` with `D^2 g = D_h (D_h g)`.
    pub budget_scale: f64,
}

impl SemigroupComparison {
    pub fn max_total(&self) -> f64 {
        self.rows.iter().map(|r| r.total).fold(0.0, f64::max)
    }

    pub fn max_first_stage(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.first_stage).collect::<Option<Vec<_>>>().map(|v| v.into_iter().fold(0.0, f64::max))
    }
}

pub fn budget_scale(g: &FunctionVector, dh: &GeneratorMatrix, grid: &GridSpace) -> f64 {
    let gv = DVector::from_column_slice(&g.values);
    let d2 = dh.entries() * (dh.entries() * gv);
    weighted_sup_norm(g, grid) + weighted_sup_norm(&FunctionVector::new("D^2 g", d2.iter().cloned().collect()), grid)
}

pub fn compare_semigroups(
    p: &dyn Semigroup,
    q: &dyn Semigroup,
    middle: Option<&dyn Semigroup>,
    g: &FunctionVector,
    times: &[f64],
    dh: &GeneratorMatrix,
    grid: &GridSpace,
) -> SemigroupComparison {
    let w = grid.weights_v();
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(w).map(|((x, y), v)| (x - y).abs() / v).fold(0.0, f64::max);
    let rows = times
        .iter()
        .map(|&t| {
            let pg = p.apply(&g.values, t);
            let qg = q.apply(&g.values, t);
            let (first_stage, second_stage) = match middle {
                Some(m) => {
                    let mg = m.apply(&g.values, t);
                    (Some(gap(&pg, &mg)), Some(gap(&mg, &qg)))
                }
                None => (None, None),
            };
            SemigroupGapRow { t, total: gap(&pg, &qg), first_stage, second_stage }
        })
        .collect();
    SemigroupComparison { rows, budget_scale: budget_scale(g, dh, grid) }
}

/// Solves `pi^T D = 0`, `sum pi = 1`.
pub fn invariant_measure(rate: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(linalg::stationary_of_rate_matrix(rate)?.iter().cloned().collect())
}

/// `||pi - varpi||_v` for two probability vectors.
pub fn compare_invariant(pi: &[f64], varpi: &[f64], grid: &GridSpace) -> Result<f64> {
    if pi.len() != grid.len() || varpi.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: pi.len().min(varpi.len()) });
    }
    for (name, m) in [("pi", pi), ("varpi", varpi)] {
        let total: f64 = m.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
        }
    }
    let diff: Vec<f64> = pi.iter().zip(varpi).map(|(a, b)| a - b).collect();
    Ok(measure_norm_v(&diff, grid))
}

/// `sum_i pi_i v_i`.
pub fn expectation_v(pi: &[f64], grid: &GridSpace) -> f64 {
    pi.iter().zip(grid.weights_v()).map(|(p, v)| p * v).sum()
}

/// Standard normal density at the nodes times the cell volume (midpoint rule).
pub fn gaussian_binned(grid: &GridSpace) -> Vec<f64> {
    let c = (2.0 * std::f64::consts::PI).powf(-(grid.dim() as f64) / 2.0) * grid.cell_volume();
    (0..grid.len()).map(|i| c * (-0.5 * grid.point(i).iter().map(|x| x * x).sum::<f64>()).exp()).collect()
}

/// Eigenvalues sorted by modulus (descending), ties by real part (descending).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex64>,
    pub operator_tag: String,
    pub rank: usize,
}

impl SpectrumReport {
    pub fn new(mut eigenvalues: Vec<Complex64>, operator_tag: &str) -> Self {
        sort_spectrum(&mut eigenvalues);
        let rank = eigenvalues.len();
        Self { eigenvalues, operator_tag: operator_tag.to_string(), rank }
    }

    pub fn top(&self, k: usize) -> &[Complex64] {
        &self.eigenvalues[..k.min(self.eigenvalues.len())]
    }

    /// Maps generator eigenvalues `lambda` to resolvent eigenvalues `1 / (alpha - lambda)`.
    pub fn to_resolvent(&self, alpha: f64) -> SpectrumReport {
        let ev = self.eigenvalues.iter().map(|l| Complex64::new(1.0, 0.0) / (Complex64::new(alpha, 0.0) - l)).collect();
        SpectrumReport::new(ev, &format!("resolvent({}) at alpha = {alpha}", self.operator_tag))
    }
}

pub fn sort_spectrum(ev: &mut [Complex64]) {
    // Moduli are compared after rounding to 1e-10 so near-ties fall back to the real part.
    let key = |z: &Complex64| (z.norm() * 1e10).round();
    ev.sort_by(|a, b| key(b).total_cmp(&key(a)).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im)));
}

/// Full eigenvalue computation of a square matrix via the real Schur form.
pub fn spectrum(m: &DMatrix<f64>, tag: &str) -> Result<SpectrumReport> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NonConvergence { what: format!("Schur decomposition of {tag}"), iterations: 10_000 })?;
    let ev = schur.complex_eigenvalues();
    Ok(SpectrumReport::new(ev.iter().cloned().collect(), tag))
}

/// Spectrum of the hidden rate matrix `q`, which is block triangular with blocks
/// `-kappa` and `kappa (r - I)`. Every nonzero-rank eigenvalue of `E` is among these;
/// the remaining eigenvalues of `E` equal `-kappa`.
pub fn reduced_spectrum(gen: &FiniteRankGenerator) -> Result<SpectrumReport> {
    spectrum(&gen.q, "q")
}

/// Symmetric Hausdorff distance between two finite subsets of the plane.
pub fn hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let one_way = |x: &[Complex64], y: &[Complex64]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityEstimate {
    pub b0: f64,
    pub big_b0: f64,
    /// Largest absolute residual of the log-norm fit.
    pub fit_residual: f64,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Set when the fitted rate is not positive.
    pub non_decaying: bool,
}

/// Least-squares fit of `log |||P^t - 1 ⊗ pi|||_v ≈ B0 - b0 t`.
pub fn ergodicity_rate(p: &dyn Semigroup, pi: &[f64], times: &[f64], grid: &GridSpace) -> Result<ErgodicityEstimate> {
    let n = grid.len();
    let rank_one = DMatrix::from_fn(n, n, |_, j| pi[j]);
    let norms: Vec<f64> = times.iter().map(|&t| operator_norm_v(&(p.transition(t) - &rank_one), grid)).collect();
    fit_ergodicity(times, &norms)
}

pub fn fit_ergodicity(times: &[f64], norms: &[f64]) -> Result<ErgodicityEstimate> {
    if times.len() < 3 || times.len() != norms.len() {
        return Err(Error::InvalidArgument(format!("need at least 3 matched time points, got {}", times.len())));
    }
    if norms.iter().any(|&x| !(x > 1e-300)) {
        return Err(Error::InvalidArgument("distance to equilibrium vanishes; fit is degenerate".into()));
    }
    let m = times.len() as f64;
    let y: Vec<f64> = norms.iter().map(|x| x.ln()).collect();
    let tm = times.iter().sum::<f64>() / m;
    let ym = y.iter().sum::<f64>() / m;
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    let sxy: f64 = times.iter().zip(&y).map(|(t, l)| (t - tm) * (l - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let fit_residual = times.iter().zip(&y).map(|(t, l)| (l - intercept - slope * t).abs()).fold(0.0, f64::max);
    Ok(ErgodicityEstimate {
        b0: -slope,
        big_b0: intercept,
        fit_residual,
        times: times.to_vec(),
        norms: norms.to_vec(),
        non_decaying: !(-slope > 0.0),
    })
}

/// `|||(alpha R_alpha)^n|||_v` against `1 + b'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBoundRow {
    pub alpha: f64,
    pub n: u32,
    pub norm: f64,
    pub bound: f64,
    pub passed: bool,
}

pub fn power_bound_check(family: &[KernelMatrix], b_prime: f64, n_list: &[u32], grid: &GridSpace) -> Result<Vec<PowerBoundRow>> {
    let mut rows = Vec::new();
    for r in family {
        let alpha = r.require_alpha()?;
        let p = r.scaled_probability()?;
        let max_n = n_list.iter().cloned().max().unwrap_or(0);
        let mut power = p.clone();
        for k in 1..=max_n {
            if k > 1 {
                power = &power * &p;
            }
            if n_list.contains(&k) {
                let norm = operator_norm_v(&power, grid);
                rows.push(PowerBoundRow { alpha, n: k, norm, bound: 1.0 + b_prime, passed: norm <= 1.0 + b_prime + BOUND_SLACK });
            }
        }
    }
    Ok(rows)
}

/// `T_n` with `|||R - T_n|||_v <= 2^{-n}`, supported on the hull `Y_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub n: u32,
    pub hull: NodeSet,
    pub kernel: DMatrix<f64>,
    /// Cell label of each node, `None` outside the partition.
    pub cell_of: Vec<Option<usize>>,
}

impl Witness {
    pub fn from_finite_rank(n: u32, t: &FiniteRankKernel) -> Self {
        Self { n, hull: t.cells.hull.clone(), kernel: t.matrix(), cell_of: t.cells.cell_of.clone() }
    }

    pub fn num_cells(&self) -> usize {
        self.cell_of.iter().flatten().map(|c| c + 1).max().unwrap_or(0)
    }
}

/// Smallest witnesses found by doubling the cell count over a ladder of hulls `{v <= r}`.
pub fn build_witnesses(r: &KernelMatrix, grid: &GridSpace, n_max: u32, max_cells: usize) -> Result<Vec<Witness>> {
    let v = FunctionVector::new("V", grid.lyapunov().to_vec());
    let one = FunctionVector::constant("1", grid.len(), 1.0);
    let vmax = grid.weights_v().iter().cloned().fold(1.0, f64::max);
    let mut levels: Vec<f64> = (1..).map(|k| (2.0 * k as f64).exp()).take_while(|&l| l < vmax).collect();
    levels.push(f64::INFINITY);
    let mut out = Vec::new();
    for n in 1..=n_max {
        let target = 0.5f64.powi(n as i32);
        let mut found = None;
        'search: for &level in &levels {
            let plan = truncation_plan(&r.entries, &v, &one, level, TailWeight::Constant, grid)?;
            let mut cells = 4;
            while cells <= max_cells {
                let t = finite_rank_approx(&r.entries, &plan, cells, grid)?;
                if t.achieved_error <= target {
                    found = Some(Witness::from_finite_rank(n, &t));
                    break 'search;
                }
                if t.rank() < cells {
                    break;
                }
                cells *= 2;
            }
        }
        match found {
            Some(w) => out.push(w),
            None => return Err(Error::WitnessGap { n: n as usize, gap: f64::NAN, target }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverseResult {
    pub u_minus: Vec<f64>,
    pub v_minus: Vec<f64>,
    /// `W = max(u_-/v_- - 1, 1)`.
    pub w: Vec<f64>,
    /// Cell-constant minorant of `W` used in the certificate.
    pub w_minus: Vec<f64>,
    pub c: NodeSet,
    pub certificate: LyapunovCertificate,
    /// `||v_-||_v`.
    pub norm_v_minus: f64,
    /// `|||R|||_v + 1`.
    pub norm_bound: f64,
    pub witness_gaps: Vec<f64>,
}

/// Builds `V_- = log R u_-` with `u_- = v (1 + sum_n 1_{Y_n^c})` and certifies
/// `H(V_-) <= -W_- + 2 1_C` in the drift operator of `dh`, where `R = (I - D_h)^{-1}`.
pub fn converse_lyapunov(dh: &GeneratorMatrix, r: &KernelMatrix, witnesses: &[Witness], grid: &GridSpace, tol: f64) -> Result<ConverseResult> {
    let n = grid.len();
    let v = grid.weights_v();
    let mut witness_gaps = Vec::new();
    for w in witnesses {
        let gap = operator_norm_v(&(&r.entries - &w.kernel), grid);
        let target = 0.5f64.powi(w.n as i32);
        if gap > target + BOUND_SLACK {
            return Err(Error::WitnessGap { n: w.n as usize, gap, target });
        }
        witness_gaps.push(gap);
    }
    let mut u = v.to_vec();
    for w in witnesses {
        let inside = w.hull.mask(n);
        for i in 0..n {
            if !inside[i] {
                u[i] += v[i];
            }
        }
    }
    let vm = &r.entries * DVector::from_column_slice(&u);
    let v_minus: Vec<f64> = vm.iter().cloned().collect();
    let w_raw: Vec<f64> = (0..n).map(|i| (u[i] / v_minus[i] - 1.0).max(1.0)).collect();
    let mut w_minus = w_raw.clone();
    if let Some(finest) = witnesses.iter().max_by_key(|w| w.num_cells()) {
        let mut cell_min = vec![f64::INFINITY; finest.num_cells()];
        for (i, c) in finest.cell_of.iter().enumerate() {
            if let Some(c) = c {
                cell_min[*c] = cell_min[*c].min(w_raw[i]);
            }
        }
        for (i, c) in finest.cell_of.iter().enumerate() {
            if let Some(c) = c {
                w_minus[i] = cell_min[*c].max(1.0);
            }
        }
    }
    let c = NodeSet::from_predicate(n, |i| w_raw[i] <= 1.0);
    let big_v = FunctionVector::new("V_-", v_minus.iter().map(|x| x.ln()).collect());
    let wm = FunctionVector::new("W_-", w_minus.clone());
    let certificate = certify_dv3(DriftOperator::Discrete(dh), &big_v, &wm, 1.0, 2.0, &c, tol, grid)?;
    let norm_v_minus = weighted_sup_norm(&FunctionVector::new("v_-", v_minus.clone()), grid);
    let norm_bound = operator_norm_v(&r.entries, grid) + 1.0;
    Ok(ConverseResult { u_minus: u, v_minus, w: w_raw, w_minus, c, certificate, norm_v_minus, norm_bound, witness_gaps })
}

/// Approximation targets and measured gaps for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub alpha_grid: Vec<f64>,
    pub resolvent_gaps: Vec<f64>,
    pub semigroup_gaps: Vec<SemigroupGapRow>,
    pub semigroup_budget: f64,
    pub measure_gap: f64,
    pub epsilon_target: f64,
    pub resolvent_passed: bool,
    pub semigroup_passed: bool,
    pub measure_passed: bool,
    pub passed: bool,
}

impl ApproximationReport {
    pub fn new(alpha_grid: Vec<f64>, resolvent_gaps: Vec<f64>, semigroups: &SemigroupComparison, measure_gap: f64, epsilon_target: f64) -> Self {
        let resolvent_passed = resolvent_gaps.iter().all(|&g| g <= epsilon_target + BOUND_SLACK);
        let semigroup_budget = epsilon_target * semigroups.budget_scale;
        let semigroup_passed = semigroups.max_total() <= semigroup_budget + BOUND_SLACK;
        let measure_passed = measure_gap <= epsilon_target + BOUND_SLACK;
        Self {
            alpha_grid,
            resolvent_gaps,
            semigroup_gaps: semigroups.rows.clone(),
            semigroup_budget,
            measure_gap,
            epsilon_target,
            resolvent_passed,
            semigroup_passed,
            measure_passed,
            passed: resolvent_passed && semigroup_passed && measure_passed,
        }
    }
}
