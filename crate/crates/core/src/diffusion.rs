//! Diffusion models `dX = u(X) dt + M(X) dB`, their generators and drift certificates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resolvent::GeneratorMatrix;
use crate::rng;
use crate::statespace::{FunctionVector, GridSpace, NodeSet};

/// `coeff * prod_k x_k^powers[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(c: f64, dim: usize) -> Self {
        Self::monomial(c, vec![0; dim])
    }

    pub fn monomial(coeff: f64, powers: Vec<u32>) -> Self {
        Self { terms: vec![Monomial { coeff, powers }] }
    }

    /// `coeff * x_axis` in dimension `dim`.
    pub fn linear(coeff: f64, axis: usize, dim: usize) -> Self {
        let mut p = vec![0; dim];
        p[axis] = 1;
        Self::monomial(coeff, p)
    }

    pub fn plus(mut self, other: Polynomial) -> Self {
        self.terms.extend(other.terms);
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coeff * m.powers.iter().zip(x).map(|(&p, &xi)| xi.powi(p as i32)).product::<f64>())
            .sum()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        for m in &self.terms {
            if m.powers.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: m.powers.len() });
            }
        }
        Ok(())
    }
}

/// Polynomial drift `u` and dispersion `M` (a `dim x noise_dim` table).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    dim: usize,
    drift: Vec<Polynomial>,
    dispersion: Vec<Vec<Polynomial>>,
    preset: Option<String>,
}

impl DiffusionModel {
    pub fn new(drift: Vec<Polynomial>, dispersion: Vec<Vec<Polynomial>>) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidArgument(format!("model dimension must be 1 or 2, got {dim}")));
        }
        if dispersion.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: dispersion.len() });
        }
        let k = dispersion[0].len();
        if k == 0 || dispersion.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidArgument("dispersion rows must share a nonzero noise dimension".into()));
        }
        for p in drift.iter().chain(dispersion.iter().flatten()) {
            p.check_dim(dim)?;
        }
        Ok(Self { dim, drift, dispersion, preset: None })
    }

    /// Named presets: `ou1d` (u = -x, M = sqrt 2), `doublewell1d` (u = x - x^3,
    /// M = sqrt 2) and `ou2d` (u = -x, M = sqrt 2 I).
    pub fn preset(name: &str) -> Result<Self> {
        let s2 = std::f64::consts::SQRT_2;
        let mut m = match name {
            "ou1d" => Self::new(vec![Polynomial::linear(-1.0, 0, 1)], vec![vec![Polynomial::constant(s2, 1)]])?,
            "doublewell1d" => Self::new(
                vec![Polynomial::linear(1.0, 0, 1).plus(Polynomial::monomial(-1.0, vec![3]))],
                vec![vec![Polynomial::constant(s2, 1)]],
            )?,
            "ou2d" => Self::new(
                vec![Polynomial::linear(-1.0, 0, 2), Polynomial::linear(-1.0, 1, 2)],
                vec![
                    vec![Polynomial::constant(s2, 2), Polynomial::zero()],
                    vec![Polynomial::zero(), Polynomial::constant(s2, 2)],
                ],
            )?,
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        m.preset = Some(name.to_string());
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.dispersion[0].len()
    }

    pub fn preset_name(&self) -> Option<&str> {
        self.preset.as_deref()
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.drift) {
            *o = p.eval(x);
        }
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.dim];
        self.drift_into(x, &mut u);
        u
    }

    /// Row-major `dim x noise_dim` dispersion matrix.
    pub fn dispersion_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.noise_dim();
        for (i, row) in self.dispersion.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                out[i * k + j] = p.eval(x);
            }
        }
    }

    /// Row-major `Sigma = M M^T`.
    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.dim, self.noise_dim());
        let mut m = vec![0.0; d * k];
        self.dispersion_into(x, &mut m);
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] = (0..k).map(|j| m[a * k + j] * m[b * k + j]).sum();
            }
        }
        s
    }

    /// Checks that `Sigma` is positive semidefinite at every grid node.
    pub fn check_psd(&self, grid: &GridSpace) -> Result<()> {
        let d = self.dim;
        for node in 0..grid.len() {
            let s = self.sigma(grid.point(node));
            let ok = if d == 1 {
                s[0] >= -1e-14
            } else {
                s[0] >= -1e-14 && s[3] >= -1e-14 && s[0] * s[3] - s[1] * s[2] >= -1e-12
            };
            if !ok {
                return Err(Error::NotPsd { node, coords: grid.point(node).to_vec() });
            }
        }
        Ok(())
    }
}

/// Model block of a run configuration: a named preset or explicit monomial tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Preset { preset: String },
    Custom { dim: usize, drift: Vec<Polynomial>, diffusion: Vec<Vec<Polynomial>> },
}

impl ModelConfig {
    pub fn build(&self) -> Result<DiffusionModel> {
        match self {
            ModelConfig::Preset { preset } => DiffusionModel::preset(preset),
            ModelConfig::Custom { dim, drift, diffusion } => {
                if drift.len() != *dim {
                    return Err(Error::DimensionMismatch { expected: *dim, found: drift.len() });
                }
                DiffusionModel::new(drift.clone(), diffusion.clone())
            }
        }
    }
}

/// Second-order finite differences along one axis of the tensor grid.
fn axis_lines(grid: &GridSpace, axis: usize) -> Vec<Vec<usize>> {
    let shape = grid.shape();
    let n = shape[axis];
    let mut lines = Vec::new();
    for start in 0..grid.len() {
        if grid.multi_index(start)[axis] != 0 {
            continue;
        }
        let mut offset = vec![0isize; grid.dim()];
        let line: Vec<usize> = (0..n)
            .map(|j| {
                offset[axis] = j as isize;
                grid.shifted(start, &offset).expect("on-grid line")
            })
            .collect();
        lines.push(line);
    }
    lines
}

/// `d f / d x_axis`: central in the interior, one-sided second order at the ends.
pub fn partial(values: &[f64], grid: &GridSpace, axis: usize) -> Vec<f64> {
    let h = grid.spacing()[axis];
    let mut out = vec![0.0; values.len()];
    for line in axis_lines(grid, axis) {
        let n = line.len();
        let f = |j: usize| values[line[j]];
        for j in 0..n {
            out[line[j]] = if j == 0 {
                (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
            } else if j == n - 1 {
                (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
            } else {
                (f(j + 1) - f(j - 1)) / (2.0 * h)
            };
        }
    }
    out
}

/// `d^2 f / d x_axis^2` with the same stencil conventions as [`partial`].
pub fn second_partial(values: &[f64], grid: &GridSpace, axis: usize) -> Vec<f64> {
    let h2 = grid.spacing()[axis].powi(2);
    let mut out = vec![0.0; values.len()];
    for line in axis_lines(grid, axis) {
        let n = line.len();
        let f = |j: usize| values[line[j]];
        for j in 0..n {
            out[line[j]] = if n == 3 {
                (f(0) - 2.0 * f(1) + f(2)) / h2
            } else if j == 0 {
                (2.0 * f(0) - 5.0 * f(1) + 4.0 * f(2) - f(3)) / h2
            } else if j == n - 1 {
                (2.0 * f(n - 1) - 5.0 * f(n - 2) + 4.0 * f(n - 3) - f(n - 4)) / h2
            } else {
                (f(j + 1) - 2.0 * f(j) + f(j - 1)) / h2
            };
        }
    }
    out
}

struct Derivatives {
    grad: Vec<Vec<f64>>,
    hess: Vec<Vec<Vec<f64>>>,
}

fn derivatives(values: &[f64], grid: &GridSpace) -> Derivatives {
    let d = grid.dim();
    let grad: Vec<Vec<f64>> = (0..d).map(|k| partial(values, grid, k)).collect();
    let mut hess = vec![vec![Vec::new(); d]; d];
    for a in 0..d {
        hess[a][a] = second_partial(values, grid, a);
        for b in (a + 1)..d {
            let mixed = partial(&grad[a], grid, b);
            hess[b][a] = mixed.clone();
            hess[a][b] = mixed;
        }
    }
    Derivatives { grad, hess }
}

/// `D h = u . grad h + 1/2 trace(Sigma hess h)` by finite differences.
pub fn generator_apply(model: &DiffusionModel, h: &FunctionVector, grid: &GridSpace) -> FunctionVector {
    let d = grid.dim();
    let der = derivatives(&h.values, grid);
    let values = (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let u = model.drift(x);
            let s = model.sigma(x);
            let mut acc = 0.0;
            for a in 0..d {
                acc += u[a] * der.grad[a][i];
                for b in 0..d {
                    acc += 0.5 * s[a * d + b] * der.hess[a][b][i];
                }
            }
            acc
        })
        .collect();
    FunctionVector::new(&format!("D[{}]", h.label), values)
}

/// Nonlinear generator `H(F) = e^{-F} D e^F`, evaluated as
/// `u . grad F + 1/2 trace(Sigma hess F) + 1/2 grad F . Sigma grad F`
/// so that `e^F` is never formed.
pub fn nonlinear_generator(model: &DiffusionModel, f: &FunctionVector, grid: &GridSpace) -> FunctionVector {
    let d = grid.dim();
    let der = derivatives(&f.values, grid);
    let values = (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let u = model.drift(x);
            let s = model.sigma(x);
            let mut acc = 0.0;
            for a in 0..d {
                acc += u[a] * der.grad[a][i];
                for b in 0..d {
                    acc += 0.5 * s[a * d + b] * (der.hess[a][b][i] + der.grad[a][i] * der.grad[b][i]);
                }
            }
            acc
        })
        .collect();
    FunctionVector::new(&format!("H[{}]", f.label), values)
}

/// The operator in which a drift condition is checked.
#[derive(Debug, Clone, Copy)]
pub enum DriftOperator<'a> {
    /// Finite-difference evaluation of the diffusion's nonlinear generator.
    Continuum(&'a DiffusionModel),
    /// `H(F)_i = sum_{j != i} D_ij (e^{F_j - F_i} - 1)` for a rate matrix `D`.
    Discrete(&'a GeneratorMatrix),
}

impl<'a> From<&'a DiffusionModel> for DriftOperator<'a> {
    fn from(m: &'a DiffusionModel) -> Self {
        DriftOperator::Continuum(m)
    }
}

impl<'a> From<&'a GeneratorMatrix> for DriftOperator<'a> {
    fn from(g: &'a GeneratorMatrix) -> Self {
        DriftOperator::Discrete(g)
    }
}

impl DriftOperator<'_> {
    pub fn nonlinear(&self, f: &FunctionVector, grid: &GridSpace) -> FunctionVector {
        match self {
            DriftOperator::Continuum(m) => nonlinear_generator(m, f, grid),
            DriftOperator::Discrete(g) => {
                let d = g.entries();
                let n = d.nrows();
                let values = (0..n)
                    .map(|i| {
                        (0..n)
                            .filter(|&j| j != i && d[(i, j)] != 0.0)
                            .map(|j| d[(i, j)] * (f.values[j] - f.values[i]).exp_m1())
                            .sum()
                    })
                    .collect();
                FunctionVector::new(&format!("H_h[{}]", f.label), values)
            }
        }
    }
}

/// Outcome of checking `H(V) <= -delta W + b 1_C` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub v: FunctionVector,
    pub w: FunctionVector,
    pub delta: f64,
    pub b: f64,
    pub c: NodeSet,
    /// `b_v = b sup_C e^V`, the constant in the relaxed drift `D v <= -v + b'`.
    pub b_prime: f64,
    pub passed: bool,
    pub worst_slack: f64,
    pub worst_node: usize,
    pub tolerance: f64,
    /// `H(V) + delta W - b 1_C` at every node.
    pub slack: Vec<f64>,
    pub nonlinear: Vec<f64>,
}

impl LyapunovCertificate {
    /// Replaces `b'` by `b * sup_v` when `C` is a closed region whose
    /// supremum of `e^V` is known off the grid.
    pub fn with_region_sup(mut self, sup_v: f64) -> Self {
        self.b_prime = self.b * sup_v;
        self
    }
}

/// Default slack tolerance `10 h^2 max(1, max |H(V)|)`.
pub fn default_dv3_tolerance(grid: &GridSpace, nonlinear: &FunctionVector) -> f64 {
    let scale = nonlinear.values.iter().map(|x| x.abs()).fold(1.0, f64::max);
    10.0 * grid.max_spacing().powi(2) * scale
}

/// Checks the drift condition `H(V) <= -delta W + b 1_C` node by node.
#[allow(clippy::too_many_arguments)]
pub fn certify_dv3<'a>(
    op: impl Into<DriftOperator<'a>>,
    v: &FunctionVector,
    w: &FunctionVector,
    delta: f64,
    b: f64,
    c: &NodeSet,
    tol: f64,
    grid: &GridSpace,
) -> Result<LyapunovCertificate> {
    let n = grid.len();
    for f in [v, w] {
        if f.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: f.len() });
        }
    }
    if let Some(node) = w.values.iter().position(|&x| !(x >= 1.0)) {
        return Err(Error::WeightBelowOne { node, value: w.values[node] });
    }
    if c.is_empty() {
        return Err(Error::EmptySet("drift set C".into()));
    }
    if !(delta > 0.0) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("need delta > 0 and finite b, got {delta}, {b}")));
    }
    let hv = op.into().nonlinear(v, grid);
    let in_c = c.mask(n);
    let slack: Vec<f64> = (0..n)
        .map(|i| hv.values[i] + delta * w.values[i] - if in_c[i] { b } else { 0.0 })
        .collect();
    let (worst_node, worst_slack) = slack
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    let sup_c = c.iter().map(|i| v.values[i]).fold(f64::NEG_INFINITY, f64::max).exp();
    Ok(LyapunovCertificate {
        v: v.clone(),
        w: w.clone(),
        delta,
        b,
        c: c.clone(),
        b_prime: b * sup_c,
        passed: worst_slack <= tol,
        worst_slack,
        worst_node,
        tolerance: tol,
        slack,
        nonlinear: hv.values,
    })
}

/// Drift data given as polynomials with `C` the closed ball of radius `c_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpec {
    pub v: Polynomial,
    pub w: Polynomial,
    pub delta: f64,
    pub b: f64,
    pub c_radius: f64,
}

impl LyapunovSpec {
    /// `V = x^2/4`, `W = 1 + x^2/8`, `delta = 1`, `b = 3/2`, `C = {|x| <= 2 sqrt 3}`
    /// for the one-dimensional OU preset.
    pub fn ou1d() -> Self {
        Self {
            v: Polynomial::monomial(0.25, vec![2]),
            w: Polynomial::constant(1.0, 1).plus(Polynomial::monomial(0.125, vec![2])),
            delta: 1.0,
            b: 1.5,
            c_radius: 2.0 * 3f64.sqrt(),
        }
    }

    pub fn drift_set(&self, grid: &GridSpace) -> NodeSet {
        let r2 = self.c_radius * self.c_radius * (1.0 + 1e-12);
        NodeSet::from_predicate(grid.len(), |i| grid.point(i).iter().map(|x| x * x).sum::<f64>() <= r2)
    }

    /// `sup_{|x| <= r} V`, using grid nodes inside the ball plus points on its boundary.
    pub fn sup_v_on_ball(&self, grid: &GridSpace) -> f64 {
        let mut best = self.drift_set(grid).iter().map(|i| self.v.eval(grid.point(i))).fold(f64::NEG_INFINITY, f64::max);
        let r = self.c_radius;
        if grid.dim() == 1 {
            best = best.max(self.v.eval(&[r])).max(self.v.eval(&[-r]));
        } else {
            for k in 0..3600 {
                let th = k as f64 * std::f64::consts::TAU / 3600.0;
                best = best.max(self.v.eval(&[r * th.cos(), r * th.sin()]));
            }
        }
        best
    }

    /// Certifies on the grid and sets `b' = b sup_C e^V` over the continuous ball.
    pub fn certify(&self, model: &DiffusionModel, grid: &GridSpace, tol: Option<f64>) -> Result<LyapunovCertificate> {
        let v = grid.eval("V", |x| self.v.eval(x));
        let w = grid.eval("W", |x| self.w.eval(x));
        let c = self.drift_set(grid);
        let tol = match tol {
            Some(t) => t,
            None => default_dv3_tolerance(grid, &nonlinear_generator(model, &v, grid)),
        };
        let cert = certify_dv3(model, &v, &w, self.delta, self.b, &c, tol, grid)?;
        Ok(cert.with_region_sup(self.sup_v_on_ball(grid).exp()))
    }
}

/// Euler-Maruyama sample path on the grid's box.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flattened states, `dim` entries per time.
    pub states: Vec<f64>,
}

impl SdePath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }
}

/// Reflects each coordinate back into `[lo, hi]`.
fn reflect(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        for _ in 0..16 {
            if *xi > hi {
                *xi = 2.0 * hi - *xi;
            } else if *xi < lo {
                *xi = 2.0 * lo - *xi;
            } else {
                break;
            }
        }
        *xi = xi.clamp(lo, hi);
    }
}

/// Stepper holding scratch buffers so the inner loop does not allocate.
pub struct EulerMaruyama<'a> {
    model: &'a DiffusionModel,
    bounds: &'a [(f64, f64)],
    u: Vec<f64>,
    m: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> EulerMaruyama<'a> {
    pub fn new(model: &'a DiffusionModel, bounds: &'a [(f64, f64)]) -> Self {
        let (d, k) = (model.dim(), model.noise_dim());
        Self { model, bounds, u: vec![0.0; d], m: vec![0.0; d * k], z: vec![0.0; k] }
    }

    /// One step of size `dt`, reflected at the box.
    pub fn step<R: Rng + ?Sized>(&mut self, x: &mut [f64], dt: f64, rng: &mut R) {
        let k = self.z.len();
        self.model.drift_into(x, &mut self.u);
        self.model.dispersion_into(x, &mut self.m);
        let sq = dt.sqrt();
        for z in self.z.iter_mut() {
            *z = rng.sample::<f64, _>(StandardNormal) * sq;
        }
        for i in 0..x.len() {
            let noise: f64 = (0..k).map(|j| self.m[i * k + j] * self.z[j]).sum();
            x[i] += self.u[i] * dt + noise;
        }
        reflect(x, self.bounds);
    }

    /// Advances `x` to time `t` with steps `dt` (the last one shortened).
    pub fn advance<R: Rng + ?Sized>(&mut self, x: &mut [f64], dt: f64, t: f64, rng: &mut R) -> Result<()> {
        let full = (t / dt).floor() as usize;
        for step in 0..full {
            self.step(x, dt, rng);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step });
            }
        }
        let rest = t - full as f64 * dt;
        if rest > 1e-12 * dt {
            self.step(x, rest, rng);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step: full });
            }
        }
        Ok(())
    }
}

fn check_step(dt: f64, t: f64) -> Result<()> {
    if !(dt > 0.0) || !(t >= dt) {
        return Err(Error::InvalidArgument(format!("need dt > 0 and T >= dt, got dt = {dt}, T = {t}")));
    }
    Ok(())
}

/// Euler-Maruyama path from `x0` on `[0, t_end]`, reflected at the box `bounds`.
pub fn simulate_sde(
    model: &DiffusionModel,
    x0: &[f64],
    dt: f64,
    t_end: f64,
    seed: u64,
    bounds: &[(f64, f64)],
) -> Result<SdePath> {
    check_step(dt, t_end)?;
    if x0.len() != model.dim() || bounds.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: x0.len() });
    }
    let mut rng = rng::substream(seed, 0);
    let mut stepper = EulerMaruyama::new(model, bounds);
    let mut x = x0.to_vec();
    reflect(&mut x, bounds);
    let full = (t_end / dt).floor() as usize;
    let mut times = vec![0.0];
    let mut states = x.clone();
    for step in 0..full {
        stepper.step(&mut x, dt, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        times.push((step + 1) as f64 * dt);
        states.extend_from_slice(&x);
    }
    let rest = t_end - full as f64 * dt;
    if rest > 1e-12 * dt {
        stepper.step(&mut x, rest, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: full });
        }
        times.push(t_end);
        states.extend_from_slice(&x);
    }
    Ok(SdePath { dim: model.dim(), times, states })
}

/// Endpoints `X(t_end)` of `n_paths` independent paths, path `i` drawing from
/// substream `(seed, i)`.
pub fn sde_endpoints(
    model: &DiffusionModel,
    x0: &[f64],
    dt: f64,
    t_end: f64,
    n_paths: usize,
    seed: u64,
    bounds: &[(f64, f64)],
) -> Result<Vec<Vec<f64>>> {
    check_step(dt, t_end)?;
    rng::par_replicates(seed, n_paths, |_, rng| {
        let mut stepper = EulerMaruyama::new(model, bounds);
        let mut x = x0.to_vec();
        reflect(&mut x, bounds);
        stepper.advance(&mut x, dt, t_end, rng).map(|_| x)
    })
    .into_iter()
    .collect()
}

/// Occupation histogram of one long path after a burn-in, normalized to a
/// probability vector over grid nodes.
pub fn time_average_histogram(
    model: &DiffusionModel,
    x0: &[f64],
    dt: f64,
    burn_in: f64,
    t_total: f64,
    seed: u64,
    grid: &GridSpace,
) -> Result<Vec<f64>> {
    check_step(dt, t_total)?;
    let mut rng = rng::substream(seed, 0);
    let mut stepper = EulerMaruyama::new(model, grid.bounds());
    let mut x = x0.to_vec();
    stepper.advance(&mut x, dt, burn_in.max(0.0), &mut rng)?;
    let steps = (t_total / dt).floor() as usize;
    let mut hist = vec![0.0; grid.len()];
    for step in 0..steps {
        stepper.step(&mut x, dt, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        hist[grid.nearest_node(&x)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|h| *h /= total);
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> DiffusionModel {
        DiffusionModel::preset("ou1d").unwrap()
    }

    fn interior_max_err(a: &FunctionVector, exact: impl Fn(f64) -> f64, g: &GridSpace) -> f64 {
        (1..g.len() - 1).map(|i| (a.values[i] - exact(g.point(i)[0])).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn presets_and_sigma() {
        let m = DiffusionModel::preset("doublewell1d").unwrap();
        assert!((m.drift(&[2.0])[0] - (2.0 - 8.0)).abs() < 1e-14);
        assert!((m.sigma(&[0.3])[0] - 2.0).abs() < 1e-14);
        let m2 = DiffusionModel::preset("ou2d").unwrap();
        assert_eq!(m2.sigma(&[1.0, 2.0]), vec![2.0000000000000004, 0.0, 0.0, 2.0000000000000004]);
        assert!(matches!(DiffusionModel::preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn generator_of_linear_and_constant() {
        let g = GridSpace::line(-6.0, 6.0, 121, |_| 0.0).unwrap();
        let m = ou();
        let x = g.eval("x", |p| p[0]);
        let dx = generator_apply(&m, &x, &g);
        for i in 0..g.len() {
            assert!((dx.values[i] + g.point(i)[0]).abs() < 1e-10);
        }
        let one = FunctionVector::constant("1", g.len(), 3.5);
        assert!(generator_apply(&m, &one, &g).values.iter().all(|&v| v.abs() < 1e-9));
        let dw = DiffusionModel::preset("doublewell1d").unwrap();
        assert!(generator_apply(&dw, &one, &g).values.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn generator_second_order_convergence() {
        // Closed form for OU: D[x^4] = -4x^4 + 12x^2. Polynomials of degree <= 2 are
        // differentiated exactly, so x^4 exercises the truncation error.
        let m = ou();
        let mut errs = Vec::new();
        for n in [121usize, 241, 481] {
            let g = GridSpace::line(-3.0, 3.0, n, |_| 0.0).unwrap();
            let h = g.eval("x^4", |p| p[0].powi(4));
            let dh = generator_apply(&m, &h, &g);
            errs.push(interior_max_err(&dh, |x| -4.0 * x.powi(4) + 12.0 * x * x, &g));
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.6..4.4).contains(&ratio), "ratio {ratio}, errs {errs:?}");
        }
        // x^2 is differentiated exactly, including at the one-sided ends.
        let g = GridSpace::line(-6.0, 6.0, 121, |_| 0.0).unwrap();
        let h = g.eval("x^2", |p| p[0] * p[0]);
        let dh = generator_apply(&m, &h, &g);
        for i in 0..g.len() {
            let x = g.point(i)[0];
            assert!((dh.values[i] - (-2.0 * x * x + 2.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn nonlinear_generator_examples() {
        let g = GridSpace::line(-6.0, 6.0, 1201, |_| 0.0).unwrap();
        let m = ou();
        let zero = FunctionVector::constant("0", g.len(), 0.0);
        assert!(nonlinear_generator(&m, &zero, &g).values.iter().all(|&v| v == 0.0));
        let logc = FunctionVector::constant("log 7", g.len(), 7f64.ln());
        assert!(nonlinear_generator(&m, &logc, &g).values.iter().all(|&v| v.abs() < 1e-9));
        let f = g.eval("x^2/4", |p| p[0] * p[0] / 4.0);
        let hf = nonlinear_generator(&m, &f, &g);
        let err = interior_max_err(&hf, |x| -x * x / 4.0 + 0.5, &g);
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn gradient_form_matches_exponential_form() {
        // Narrow, fine grid where e^F is harmless: compare the expanded form with
        // e^{-F} D e^F computed directly.
        let g = GridSpace::line(-1.0, 1.0, 4001, |_| 0.0).unwrap();
        for name in ["ou1d", "doublewell1d"] {
            let m = DiffusionModel::preset(name).unwrap();
            let f = g.eval("F", |p| (p[0] * 1.3).sin() + 0.3 * p[0] * p[0]);
            let hf = nonlinear_generator(&m, &f, &g);
            let ef = f.map("e^F", f64::exp);
            let def = generator_apply(&m, &ef, &g);
            let scale = hf.values.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for i in 1..g.len() - 1 {
                let direct = def.values[i] / ef.values[i];
                assert!((direct - hf.values[i]).abs() <= 1e-6 * scale, "{name} node {i}");
            }
        }
    }

    #[test]
    fn generator_2d_quadratic() {
        let g = build_grid_2d();
        let m = DiffusionModel::preset("ou2d").unwrap();
        let h = g.eval("x y + y^2", |p| p[0] * p[1] + p[1] * p[1]);
        let dh = generator_apply(&m, &h, &g);
        for i in 0..g.len() {
            let (x, y) = (g.point(i)[0], g.point(i)[1]);
            // u.grad = -x*y - y*(x + 2y); 1/2 tr(2I hess) = 2
            let exact = -2.0 * x * y - 2.0 * y * y + 2.0;
            assert!((dh.values[i] - exact).abs() < 1e-8);
        }
    }

    fn build_grid_2d() -> GridSpace {
        crate::statespace::build_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[21, 21], |_| 0.0).unwrap()
    }

    #[test]
    fn ou_certificate_passes() {
        let g = GridSpace::line(-6.0, 6.0, 1201, |x| x * x / 4.0).unwrap();
        let spec = LyapunovSpec::ou1d();
        let cert = spec.certify(&ou(), &g, Some(0.01)).unwrap();
        assert!(cert.passed, "worst slack {}", cert.worst_slack);
        assert!(cert.worst_slack <= 0.01);
        assert!((cert.b_prime / (1.5 * 3f64.exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ou_certificate_fails_without_b() {
        let g = GridSpace::line(-6.0, 6.0, 1201, |x| x * x / 4.0).unwrap();
        let spec = LyapunovSpec { b: 0.0, ..LyapunovSpec::ou1d() };
        let cert = spec.certify(&ou(), &g, Some(0.01)).unwrap();
        assert!(!cert.passed);
        assert!((cert.worst_slack - 1.5).abs() < 1e-8);
        assert!(g.point(cert.worst_node)[0].abs() < 1e-9);
    }

    #[test]
    fn trivial_certificate_for_any_model() {
        let g = GridSpace::line(-3.0, 3.0, 61, |_| 0.0).unwrap();
        let zero = FunctionVector::constant("0", 61, 0.0);
        let one = FunctionVector::constant("1", 61, 1.0);
        for name in ["ou1d", "doublewell1d"] {
            let m = DiffusionModel::preset(name).unwrap();
            let cert = certify_dv3(&m, &zero, &one, 1.0, 1.0, &NodeSet::all(61), 0.0, &g).unwrap();
            assert!(cert.passed);
        }
    }

    #[test]
    fn certify_rejects_small_w_and_empty_c() {
        let g = GridSpace::line(-3.0, 3.0, 61, |_| 0.0).unwrap();
        let zero = FunctionVector::constant("0", 61, 0.0);
        let mut w = FunctionVector::constant("1", 61, 1.0);
        w.values[5] = 0.5;
        assert!(matches!(
            certify_dv3(&ou(), &zero, &w, 1.0, 1.0, &NodeSet::all(61), 0.0, &g),
            Err(Error::WeightBelowOne { node: 5, .. })
        ));
        let one = FunctionVector::constant("1", 61, 1.0);
        assert!(certify_dv3(&ou(), &zero, &one, 1.0, 1.0, &NodeSet::default(), 0.0, &g).is_err());
    }

    #[test]
    fn certify_is_monotone() {
        let g = GridSpace::line(-6.0, 6.0, 241, |x| x * x / 4.0).unwrap();
        let m = ou();
        let spec = LyapunovSpec::ou1d();
        let v = g.eval("V", |x| spec.v.eval(x));
        let w = g.eval("W", |x| spec.w.eval(x));
        let c = spec.drift_set(&g);
        let bigger_c = NodeSet::from_predicate(g.len(), |i| g.point(i)[0].abs() <= 4.0);
        for (delta, b, set) in [(1.0, 1.5, &c), (1.0, 1.0, &c), (1.3, 1.5, &c), (1.2, 1.0, &bigger_c)] {
            let base = certify_dv3(&m, &v, &w, delta, b, set, 1e-3, &g).unwrap();
            let more_b = certify_dv3(&m, &v, &w, delta, b + 0.5, set, 1e-3, &g).unwrap();
            let less_delta = certify_dv3(&m, &v, &w, delta * 0.5, b, set, 1e-3, &g).unwrap();
            let more_c = certify_dv3(&m, &v, &w, delta, b, &bigger_c, 1e-3, &g).unwrap();
            for other in [&more_b, &less_delta] {
                assert!(!base.passed || other.passed);
                assert!(other.worst_slack <= base.worst_slack + 1e-12);
            }
            assert!(!base.passed || set != &c || more_c.passed);
        }
    }

    #[test]
    fn discrete_drift_operator_matches_direct_ratio() {
        let g = GridSpace::line(-3.0, 3.0, 61, |_| 0.0).unwrap();
        let d = crate::resolvent::discretize_generator(&ou(), &g).unwrap();
        let f = g.eval("F", |x| x[0] * x[0] / 4.0);
        let h = DriftOperator::Discrete(&d).nonlinear(&f, &g);
        let ef = nalgebra::DVector::from_iterator(61, f.values.iter().map(|x| x.exp()));
        let direct = d.entries() * &ef;
        for i in 0..61 {
            assert!((h.values[i] - direct[i] / ef[i]).abs() < 1e-9 * (1.0 + h.values[i].abs()));
        }
    }

    #[test]
    fn degenerate_sde_is_constant() {
        let m = DiffusionModel::new(vec![Polynomial::zero()], vec![vec![Polynomial::zero()]]).unwrap();
        let p = simulate_sde(&m, &[0.7], 0.01, 1.0, 3, &[(-5.0, 5.0)]).unwrap();
        assert_eq!(p.times.len(), 101);
        assert!(p.states.iter().all(|&x| x == 0.7));
        assert!((p.times.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sde_rejects_bad_steps() {
        assert!(simulate_sde(&ou(), &[0.0], 0.0, 1.0, 1, &[(-5.0, 5.0)]).is_err());
        assert!(simulate_sde(&ou(), &[0.0], 0.1, 0.05, 1, &[(-5.0, 5.0)]).is_err());
    }

    #[test]
    fn explosive_model_reports_step() {
        // u = x^5 blows up in finite time; a huge box lets the state overflow.
        let m = DiffusionModel::new(vec![Polynomial::monomial(1.0, vec![5])], vec![vec![Polynomial::zero()]]).unwrap();
        let err = simulate_sde(&m, &[2.0], 0.1, 10.0, 1, &[(-f64::MAX, f64::MAX)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }));
    }

    #[test]
    fn reflection_keeps_paths_in_box() {
        let p = simulate_sde(&ou(), &[0.0], 0.01, 20.0, 9, &[(-0.5, 0.5)]).unwrap();
        assert!(p.states.iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn ou_mean_from_far_start() {
        // E X(1) = 10 e^{-1} for u = -x; box extended to contain x0 = 10.
        let n = 20_000;
        let ends = sde_endpoints(&ou(), &[10.0], 1e-3, 1.0, n, 17, &[(-20.0, 20.0)]).unwrap();
        let xs: Vec<f64> = ends.iter().map(|e| e[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = 10.0 * (-1f64).exp();
        assert!((mean - exact).abs() <= 4.0 * se, "mean {mean} vs {exact}, se {se}");
    }
}
