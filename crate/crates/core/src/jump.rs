//! Poisson-clocked jump approximation with jump law `kappa R_kappa`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::resolvent::{sample_index, GeneratorMatrix, KernelKind, KernelMatrix};
use crate::rng;
use crate::statespace::{operator_norm_v, GridSpace};
use crate::BOUND_SLACK;

/// `D_kappa = kappa (kappa R_kappa - I)` with the rows of `kappa R_kappa`
/// renormalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpGenerator {
    kappa: f64,
    entries: DMatrix<f64>,
    jump_kernel: DMatrix<f64>,
    source: KernelMatrix,
}

impl JumpGenerator {
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Row-stochastic jump law `kappa R_kappa`.
    pub fn jump_kernel(&self) -> &DMatrix<f64> {
        &self.jump_kernel
    }

    pub fn source(&self) -> &KernelMatrix {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// `(alpha I - D_kappa)^{-1}` by dense LU.
    pub fn resolvent(&self, alpha: f64) -> Result<KernelMatrix> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("resolvent parameter must be positive, got {alpha}")));
        }
        let r = linalg::shifted_inverse(&self.entries, alpha, "alpha I - D_kappa")?;
        Ok(KernelMatrix::new(r, Some(alpha), KernelKind::JumpResolvent))
    }
}

pub fn jump_generator(rk: &KernelMatrix, kappa: f64) -> Result<JumpGenerator> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let alpha = rk.require_alpha()?;
    if (alpha - kappa).abs() > 1e-12 * kappa {
        return Err(Error::ParameterMismatch { expected: kappa, found: alpha });
    }
    let mut p = &rk.entries * kappa;
    linalg::normalize_rows(&mut p);
    let n = p.nrows();
    let entries = (&p - DMatrix::identity(n, n)) * kappa;
    Ok(JumpGenerator { kappa, entries, jump_kernel: p, source: rk.clone() })
}

/// `R_{kappa,alpha}` through `kappa/(kappa+alpha)^2 sum_{n >= -1} (1 + alpha/kappa)^{-n} P^{n+1}`
/// with `P = kappa R_kappa`, truncated once the next term's v-norm is below `tol`.
/// Returns the direct inverse with the series gap recorded.
pub fn jump_resolvent_series(jg: &JumpGenerator, alpha: f64, tol: f64, grid: &GridSpace) -> Result<KernelMatrix> {
    const MAX_TERMS: usize = 10_000;
    let direct = jg.resolvent(alpha)?;
    let kappa = jg.kappa;
    let p = jg.jump_kernel();
    let n = p.nrows();
    let ratio = kappa / (kappa + alpha);
    let lead = kappa / ((kappa + alpha) * (kappa + alpha));
    // n = -1 term: lead * (1 + alpha/kappa) * I = I / (kappa + alpha).
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut weight = lead / ratio;
    let mut sum = &power * weight;
    let mut converged = false;
    for _ in 0..MAX_TERMS {
        power = &power * p;
        weight *= ratio;
        let term = &power * weight;
        let size = operator_norm_v(&term, grid);
        sum += term;
        if size < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { what: "jump resolvent series".into(), iterations: MAX_TERMS });
    }
    let gap = operator_norm_v(&(&sum - &direct.entries), grid);
    Ok(KernelMatrix { series_gap: Some(gap), ..direct })
}

/// Measured `|||R_{kappa,alpha} - R_alpha|||_v` against `4 (1 + b') / kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub kappa: f64,
    pub alpha: f64,
    pub measured: f64,
    pub bound: f64,
    pub passed: bool,
}

pub fn verify_rrapprox_bound(
    ra: &KernelMatrix,
    rka: &KernelMatrix,
    b_prime: f64,
    kappa: f64,
    grid: &GridSpace,
) -> Result<BoundCheck> {
    let alpha = ra.require_alpha()?;
    let alpha_k = rka.require_alpha()?;
    if (alpha - alpha_k).abs() > 1e-12 * alpha {
        return Err(Error::ParameterMismatch { expected: alpha, found: alpha_k });
    }
    if alpha > kappa {
        return Err(Error::OutsideHypothesis(format!("resolvent approximation bound needs alpha <= kappa, got alpha = {alpha}, kappa = {kappa}")));
    }
    let measured = operator_norm_v(&(&rka.entries - &ra.entries), grid);
    let bound = 4.0 * (1.0 + b_prime) / kappa;
    Ok(BoundCheck { kappa, alpha, measured, bound, passed: measured <= bound + BOUND_SLACK })
}

/// Writes `kappa,alpha,measured,bound,passed` rows.
pub fn write_bound_table<W: Write>(rows: &[BoundCheck], mut out: W) -> std::io::Result<()> {
    writeln!(out, "kappa,alpha,measured,bound,passed")?;
    for r in rows {
        writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e},{}", r.kappa, r.alpha, r.measured, r.bound, r.passed)?;
    }
    Ok(())
}

/// `e^{t D_kappa}` by scaling and squaring.
pub fn jump_semigroup(jg: &JumpGenerator, t: f64) -> Result<KernelMatrix> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    Ok(KernelMatrix::new(linalg::expm(&jg.entries, t), None, KernelKind::Semigroup))
}

/// `e^{-kappa t} sum_n (kappa t)^n / n! P^n`.
pub fn jump_semigroup_uniformized(jg: &JumpGenerator, t: f64) -> Result<KernelMatrix> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    Ok(KernelMatrix::new(linalg::uniformized_exp(&jg.jump_kernel, jg.kappa, t), None, KernelKind::Semigroup))
}

/// Inverse-CDF sampler over the rows of a nonnegative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSampler {
    cumulative: Vec<Vec<f64>>,
}

impl RowSampler {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(m.nrows());
        for i in 0..m.nrows() {
            let mut acc = 0.0;
            let row: Vec<f64> = m
                .row(i)
                .iter()
                .map(|&x| {
                    acc += x.max(0.0);
                    acc
                })
                .collect();
            if !(acc > 0.0) {
                return Err(Error::InvalidArgument(format!("row {i} has no mass")));
            }
            cumulative.push(row);
        }
        Ok(Self { cumulative })
    }

    pub fn from_generator(jg: &JumpGenerator) -> Result<Self> {
        Self::new(jg.jump_kernel())
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        sample_index(&self.cumulative[row], rng)
    }
}

/// Piecewise-constant path: `nodes[k]` is occupied on `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    pub times: Vec<f64>,
    pub nodes: Vec<usize>,
    pub horizon: f64,
}

impl JumpPath {
    pub fn jumps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        self.nodes[k.saturating_sub(1)]
    }
}

fn run_jump<R: Rng + ?Sized>(sampler: &RowSampler, clock: &Exp<f64>, x0: usize, t_end: f64, rng: &mut R) -> JumpPath {
    let mut times = vec![0.0];
    let mut nodes = vec![x0];
    let mut t = 0.0;
    let mut x = x0;
    loop {
        t += clock.sample(rng);
        if t > t_end {
            break;
        }
        x = sampler.sample(x, rng);
        times.push(t);
        nodes.push(x);
    }
    JumpPath { times, nodes, horizon: t_end }
}

fn jump_clock(kappa: f64, t_end: f64) -> Result<Exp<f64>> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    Exp::new(kappa).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Exponential(kappa) holding times; each jump lands on a node drawn from the
/// current row of the sampler.
pub fn simulate_jump(sampler: &RowSampler, kappa: f64, x0: usize, t_end: f64, seed: u64) -> Result<JumpPath> {
    let clock = jump_clock(kappa, t_end)?;
    Ok(run_jump(sampler, &clock, x0, t_end, &mut rng::substream(seed, 0)))
}

/// `runs` independent paths, run `i` on substream `(seed, i)`.
pub fn simulate_jump_runs(sampler: &RowSampler, kappa: f64, x0: usize, t_end: f64, runs: usize, seed: u64) -> Result<Vec<JumpPath>> {
    let clock = jump_clock(kappa, t_end)?;
    Ok(rng::par_replicates(seed, runs, |_, r| run_jump(sampler, &clock, x0, t_end, r)))
}

/// Drift constants of the jump process derived from those of the diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpDriftCertificate {
    pub delta: f64,
    pub b: f64,
    pub kappa: f64,
    /// `delta kappa / (delta + kappa)`.
    pub delta_kappa: f64,
    /// `kappa b / (delta + kappa)`.
    pub b_kappa: f64,
    pub verified: Option<bool>,
    pub worst_node: Option<usize>,
    /// Largest `(D_kappa v + delta_kappa v - b'_kappa) / v` over nodes.
    pub worst_slack: Option<f64>,
}

pub fn jump_drift_certificate(delta: f64, b: f64, kappa: f64) -> Result<JumpDriftCertificate> {
    if !(delta > 0.0 && b > 0.0 && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("delta, b and kappa must be positive, got {delta}, {b}, {kappa}")));
    }
    Ok(JumpDriftCertificate {
        delta,
        b,
        kappa,
        delta_kappa: delta * kappa / (delta + kappa),
        b_kappa: kappa * b / (delta + kappa),
        verified: None,
        worst_node: None,
        worst_slack: None,
    })
}

impl JumpDriftCertificate {
    /// Checks `D_kappa v <= -delta_kappa v + kappa b' / (delta + kappa)` node by node,
    /// where `b'` is the constant of the relaxed drift `D v <= -delta v + b'`.
    pub fn verify(mut self, jg: &JumpGenerator, grid: &GridSpace, b_prime: f64, tol: f64) -> Result<Self> {
        if (jg.kappa - self.kappa).abs() > 1e-12 * self.kappa {
            return Err(Error::ParameterMismatch { expected: self.kappa, found: jg.kappa });
        }
        let v = DVector::from_column_slice(grid.weights_v());
        let dv = jg.entries() * &v;
        let b_rel = self.kappa * b_prime / (self.delta + self.kappa);
        let (node, slack) = (0..v.len())
            .map(|i| (i, (dv[i] + self.delta_kappa * v[i] - b_rel) / v[i]))
            .fold((0, f64::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
        self.verified = Some(slack <= tol);
        self.worst_node = Some(node);
        self.worst_slack = Some(slack);
        Ok(self)
    }
}

/// `D_kappa` equals `D_h` applied to `kappa R_kappa`; returns the v-norm gap.
pub fn commuting_identity_gap(jg: &JumpGenerator, dh: &GeneratorMatrix, grid: &GridSpace) -> f64 {
    let via_dh = dh.entries() * jg.jump_kernel();
    operator_norm_v(&(jg.entries() - via_dh), grid)
}
