//! Rate-matrix discretization of the generator and its resolvent kernels.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, EulerMaruyama};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::statespace::{operator_norm_v, GridSpace};

/// Dense rate matrix `D_h`: nonnegative off-diagonals, zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    entries: DMatrix<f64>,
    row_sum_zero: bool,
}

impl GeneratorMatrix {
    /// Wraps a rate matrix, checking off-diagonal signs and row sums.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: entries.ncols() });
        }
        let mut row_sum_zero = true;
        for i in 0..n {
            let mut s = 0.0;
            let mut scale: f64 = 0.0;
            for j in 0..n {
                let x = entries[(i, j)];
                if i != j && x < 0.0 {
                    return Err(Error::NegativeRate { node: i, coords: vec![], rate: x });
                }
                s += x;
                scale = scale.max(x.abs());
            }
            row_sum_zero &= s.abs() <= 1e-12 * scale.max(1.0);
        }
        Ok(Self { entries, row_sum_zero })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_sum_zero(&self) -> bool {
        self.row_sum_zero
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// Largest total jump rate `max_i |D_ii|`.
    pub fn max_rate(&self) -> f64 {
        (0..self.len()).map(|i| -self.entries[(i, i)]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Resolvent,
    Semigroup,
    FiniteRank,
    JumpResolvent,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Resolvent => "resolvent",
            KernelKind::Semigroup => "semigroup",
            KernelKind::FiniteRank => "finite_rank",
            KernelKind::JumpResolvent => "jump_resolvent",
        }
    }
}

/// Dense kernel over grid nodes, tagged with what it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub alpha: Option<f64>,
    pub kind: KernelKind,
    /// `|||series - direct|||_v` for kernels built through the jump power series.
    pub series_gap: Option<f64>,
}

impl KernelMatrix {
    pub fn new(entries: DMatrix<f64>, alpha: Option<f64>, kind: KernelKind) -> Self {
        Self { entries, alpha, kind, series_gap: None }
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn row_sums(&self) -> Vec<f64> {
        linalg::row_sums(&self.entries)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.min()
    }

    /// Resolvent parameter, required for the resolvent-type kinds.
    pub fn require_alpha(&self) -> Result<f64> {
        self.alpha.ok_or_else(|| Error::InvalidArgument(format!("{} kernel has no resolvent parameter", self.kind.as_str())))
    }

    /// `alpha * K`, the probability kernel associated with a resolvent.
    pub fn scaled_probability(&self) -> Result<DMatrix<f64>> {
        Ok(&self.entries * self.require_alpha()?)
    }
}

/// Upwind, reflecting discretization of the generator on the grid.
///
/// Diffusion rates are `Sigma_kk / (2 h_k^2)` to axis neighbours; in 2-d the
/// cross term uses the diagonal neighbours selected by the sign of `Sigma_01`
/// and reduces the axis rates accordingly. Drift moves mass towards the side
/// the drift points at with rate `|u_k| / h_k`. Transitions leaving the box are
/// dropped.
pub fn discretize_generator(model: &DiffusionModel, grid: &GridSpace) -> Result<GeneratorMatrix> {
    let d = grid.dim();
    if model.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: model.dim() });
    }
    model.check_psd(grid)?;
    let n = grid.len();
    let h = grid.spacing().to_vec();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut u = vec![0.0; d];
    for i in 0..n {
        let x = grid.point(i);
        model.drift_into(x, &mut u);
        let s = model.sigma(x);
        let add = |offset: &[isize], rate: f64, m: &mut DMatrix<f64>| -> Result<()> {
            if rate < 0.0 {
                return Err(Error::NegativeRate { node: i, coords: x.to_vec(), rate });
            }
            if let Some(j) = grid.shifted(i, offset) {
                m[(i, j)] += rate;
            }
            Ok(())
        };
        let cross = if d == 2 { s[1] } else { 0.0 };
        let cross_rate = if d == 2 { cross.abs() / (2.0 * h[0] * h[1]) } else { 0.0 };
        for k in 0..d {
            let diff = s[k * d + k] / (2.0 * h[k] * h[k]) - cross_rate;
            let mut plus = vec![0isize; d];
            plus[k] = 1;
            let mut minus = vec![0isize; d];
            minus[k] = -1;
            add(&plus, diff + u[k].max(0.0) / h[k], &mut m)?;
            add(&minus, diff + (-u[k]).max(0.0) / h[k], &mut m)?;
        }
        if d == 2 && cross_rate > 0.0 {
            let sgn = if cross > 0.0 { 1 } else { -1 };
            add(&[1, sgn], cross_rate, &mut m)?;
            add(&[-1, -sgn], cross_rate, &mut m)?;
        }
        let total: f64 = m.row(i).iter().sum();
        m[(i, i)] = -total;
    }
    Ok(GeneratorMatrix { entries: m, row_sum_zero: true })
}

/// `R_alpha = (alpha I - D_h)^{-1}` by dense LU.
pub fn resolvent_direct(dh: &GeneratorMatrix, alpha: f64) -> Result<KernelMatrix> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("resolvent parameter must be positive, got {alpha}")));
    }
    let r = linalg::shifted_inverse(dh.entries(), alpha, "alpha I - D_h")?;
    Ok(KernelMatrix::new(r, Some(alpha), KernelKind::Resolvent))
}

/// Binned Monte Carlo estimate of `alpha R_alpha(x0, .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub probabilities: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_counts(counts: &[u64], samples: usize) -> Self {
        let n = samples as f64;
        let probabilities: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let std_errors = probabilities.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
        Self { probabilities, std_errors, samples }
    }

    /// Largest `|p_i - q_i| / sigma_i`, with `sigma_i` the binomial standard error
    /// under the reference `q` (floored at one count so empty bins stay finite).
    pub fn max_z_score(&self, reference: &[f64]) -> f64 {
        let n = self.samples as f64;
        self.probabilities
            .iter()
            .zip(reference)
            .map(|(p, q)| {
                let sd = (q.max(1.0 / n) * (1.0 - q.min(1.0 - 1.0 / n)) / n).sqrt();
                (p - q).abs() / sd
            })
            .fold(0.0, f64::max)
    }
}

/// Tallies indices drawn in parallel by `draw` into a histogram with `bins` entries.
pub fn histogram_of<F>(seed: u64, samples: usize, bins: usize, draw: F) -> Result<McEstimate>
where
    F: Fn(usize, &mut rand_chacha::ChaCha8Rng) -> Result<usize> + Sync + Send,
{
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut counts = vec![0u64; bins];
    for idx in rng::par_replicates(seed, samples, draw) {
        counts[idx?] += 1;
    }
    Ok(McEstimate::from_counts(&counts, samples))
}

/// Runs each path to an independent `Exp(alpha)` time and bins the endpoint at
/// the nearest node. Path `i` uses substream `(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn resolvent_mc(
    model: &DiffusionModel,
    alpha: f64,
    x0: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    grid: &GridSpace,
) -> Result<McEstimate> {
    if !(alpha > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("need alpha > 0 and dt > 0, got {alpha}, {dt}")));
    }
    let clock = Exp::new(alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    histogram_of(seed, n_paths, grid.len(), |_, r| {
        let t: f64 = clock.sample(r);
        let mut x = x0.to_vec();
        let mut stepper = EulerMaruyama::new(model, grid.bounds());
        stepper.advance(&mut x, dt, t, r)?;
        Ok(grid.nearest_node(&x))
    })
}

fn resolvent_param(k: &KernelMatrix) -> Result<f64> {
    match k.kind {
        KernelKind::Resolvent | KernelKind::JumpResolvent | KernelKind::FiniteRank => k.require_alpha(),
        other => Err(Error::InvalidArgument(format!("expected a resolvent kernel, got {}", other.as_str()))),
    }
}

/// `|||R_a - R_b - (b - a) R_b R_a|||_v`.
pub fn check_resolvent_equation(ra: &KernelMatrix, rb: &KernelMatrix, grid: &GridSpace) -> Result<f64> {
    let (a, b) = (resolvent_param(ra)?, resolvent_param(rb)?);
    let residual = &ra.entries - &rb.entries - (&rb.entries * &ra.entries) * (b - a);
    Ok(operator_norm_v(&residual, grid))
}

/// `|||R_b R_a - R_a R_b|||_v`.
pub fn check_resolvents_commute(ra: &KernelMatrix, rb: &KernelMatrix, grid: &GridSpace) -> Result<f64> {
    resolvent_param(ra)?;
    resolvent_param(rb)?;
    let c = &rb.entries * &ra.entries - &ra.entries * &rb.entries;
    Ok(operator_norm_v(&c, grid))
}

/// Density `r_ij = R_ij / cell volume`.
pub fn resolvent_density(r: &KernelMatrix, grid: &GridSpace) -> Result<DMatrix<f64>> {
    resolvent_param(r)?;
    Ok(&r.entries / grid.cell_volume())
}

/// Writes a kernel as CSV: metadata comment line, a `row,col_0,...` header, then rows.
pub fn write_kernel_csv<W: Write>(k: &KernelMatrix, grid: &GridSpace, mut out: W) -> std::io::Result<()> {
    let alpha = k.alpha.map(|a| format!("{a:.16e}")).unwrap_or_else(|| "none".into());
    let bounds: Vec<String> = grid.bounds().iter().map(|(lo, hi)| format!("[{lo:.16e};{hi:.16e}]")).collect();
    let shape: Vec<String> = grid.shape().iter().map(|s| s.to_string()).collect();
    writeln!(out, "# kind={},alpha={},dim={},shape={},bounds={}", k.kind.as_str(), alpha, grid.dim(), shape.join("x"), bounds.join(""))?;
    let header: Vec<String> = (0..k.entries.ncols()).map(|j| format!("col_{j}")).collect();
    writeln!(out, "row,{}", header.join(","))?;
    for i in 0..k.entries.nrows() {
        write!(out, "{i}")?;
        for j in 0..k.entries.ncols() {
            write!(out, ",{:.16e}", k.entries[(i, j)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Samples `j` with probability proportional to `weights[j]` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("nonempty");
    let u = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Polynomial;
    use crate::statespace::build_grid;

    fn ou_grid(h: f64) -> GridSpace {
        let n = (12.0 / h).round() as usize + 1;
        GridSpace::line(-6.0, 6.0, n, |x| x * x / 4.0).unwrap()
    }

    fn ou_generator(h: f64) -> (GridSpace, GeneratorMatrix) {
        let g = ou_grid(h);
        let d = discretize_generator(&DiffusionModel::preset("ou1d").unwrap(), &g).unwrap();
        (g, d)
    }

    #[test]
    fn ou_stencil_by_hand_at_one() {
        let (g, d) = ou_generator(0.1);
        let i = g.nearest_node(&[1.0]);
        let m = d.entries();
        // Sigma = 2, h = 0.1: diffusion 100 each side; u = -1 upwinds 10 to the left.
        assert!((m[(i, i - 1)] - 110.0).abs() < 1e-9);
        assert!((m[(i, i + 1)] - 100.0).abs() < 1e-9);
        assert!((m[(i, i)] + 210.0).abs() < 1e-9);
        let k = g.nearest_node(&[-1.0]);
        assert!((m[(k, k + 1)] - 110.0).abs() < 1e-9);
    }

    #[test]
    fn pure_diffusion_is_laplacian_with_reflection() {
        let g = GridSpace::line(-1.0, 1.0, 21, |_| 0.0).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let m = DiffusionModel::new(vec![Polynomial::zero()], vec![vec![Polynomial::constant(s2, 1)]]).unwrap();
        let d = discretize_generator(&m, &g).unwrap();
        let e = d.entries();
        let inv_h2 = 1.0 / 0.01;
        for i in 1..20 {
            assert!((e[(i, i - 1)] - inv_h2).abs() < 1e-9);
            assert!((e[(i, i + 1)] - inv_h2).abs() < 1e-9);
            assert!((e[(i, i)] + 2.0 * inv_h2).abs() < 1e-9);
        }
        assert!((e[(0, 0)] + inv_h2).abs() < 1e-9);
        assert!((e[(0, 1)] - inv_h2).abs() < 1e-9);
    }

    #[test]
    fn presets_give_rate_matrices() {
        for name in ["ou1d", "doublewell1d"] {
            let g = GridSpace::line(-3.0, 3.0, 61, |_| 0.0).unwrap();
            let d = discretize_generator(&DiffusionModel::preset(name).unwrap(), &g).unwrap();
            assert!(d.row_sum_zero());
            assert!(GeneratorMatrix::from_entries(d.entries().clone()).unwrap().row_sum_zero());
        }
        let g2 = build_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &[11, 11], |_| 0.0).unwrap();
        let d2 = discretize_generator(&DiffusionModel::preset("ou2d").unwrap(), &g2).unwrap();
        for r in linalg::row_sums(d2.entries()) {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_cross_term_is_rejected() {
        // Sigma = [[1, 0.99*2], ...] style: strong correlation with unequal spacing.
        let g = build_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[5, 41], |_| 0.0).unwrap();
        let one = Polynomial::constant(1.0, 2);
        let m = DiffusionModel::new(
            vec![Polynomial::zero(), Polynomial::zero()],
            vec![vec![one.clone()], vec![one]],
        )
        .unwrap();
        assert!(matches!(discretize_generator(&m, &g), Err(Error::NegativeRate { .. })));
    }

    #[test]
    fn resolvent_rows_and_zero_generator() {
        let (_, d) = ou_generator(0.1);
        let r = resolvent_direct(&d, 1.0).unwrap();
        for s in r.row_sums() {
            assert!((s - 1.0).abs() < 1e-8);
        }
        assert!(r.min_entry() >= -1e-12);
        let z = GeneratorMatrix::from_entries(DMatrix::zeros(4, 4)).unwrap();
        let rz = resolvent_direct(&z, 2.0).unwrap();
        assert!((rz.entries.clone() - DMatrix::identity(4, 4) * 0.5).amax() < 1e-15);
        assert!(resolvent_direct(&d, 0.0).is_err());
    }

    #[test]
    fn resolvent_equation_and_commutation() {
        let (g, d) = ou_generator(0.05);
        let r1 = resolvent_direct(&d, 1.0).unwrap();
        let r2 = resolvent_direct(&d, 2.0).unwrap();
        assert!(check_resolvent_equation(&r1, &r1, &g).unwrap() <= 1e-10);
        assert!(check_resolvent_equation(&r1, &r2, &g).unwrap() <= 1e-8);
        assert!(check_resolvents_commute(&r1, &r2, &g).unwrap() <= 1e-8);
    }

    #[test]
    fn range_space_identity() {
        let (g, d) = ou_generator(0.05);
        let r = resolvent_direct(&d, 1.0).unwrap();
        let mut rng = rng::substream(5, 0);
        let h = nalgebra::DVector::from_fn(g.len(), |_, _| rng.random::<f64>() - 0.5);
        let gv = &r.entries * &h;
        let lhs = d.entries() * &gv;
        let rhs = &gv - &h;
        assert!((lhs - rhs).amax() < 1e-8);
    }

    #[test]
    fn density_properties() {
        let (g, d) = ou_generator(0.05);
        let r = resolvent_direct(&d, 1.0).unwrap();
        let dens = resolvent_density(&r, &g).unwrap();
        assert!(dens.min() >= -1e-12);
        let centre = g.nearest_node(&[0.0]);
        let row = dens.row(centre);
        assert_eq!(row.iter().cloned().enumerate().fold((0, f64::MIN), |a, (j, x)| if x > a.1 { (j, x) } else { a }).0, centre);
        let mass: f64 = row.iter().sum::<f64>() * g.cell_volume();
        assert!((mass - 1.0).abs() < 1e-8);
        let mut semi = r.clone();
        semi.kind = KernelKind::Semigroup;
        assert!(resolvent_density(&semi, &g).is_err());
    }

    #[test]
    fn csv_dump_has_metadata() {
        let (g, d) = ou_generator(1.0);
        let r = resolvent_direct(&d, 1.0).unwrap();
        let mut buf = Vec::new();
        write_kernel_csv(&r, &g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# kind=resolvent,alpha=1.0000000000000000e0"));
        assert_eq!(lines.len(), 2 + g.len());
        let first: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(first, r.entries[(0, 0)]);
    }

    #[test]
    fn mc_large_alpha_concentrates() {
        let g = ou_grid(0.05);
        let m = DiffusionModel::preset("ou1d").unwrap();
        let est = resolvent_mc(&m, 100.0, &[0.0], 4000, 1e-3, 3, &g).unwrap();
        let total: f64 = est.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let inner: f64 = (0..g.len()).filter(|&i| g.point(i)[0].abs() <= 0.5).map(|i| est.probabilities[i]).sum();
        assert!(inner > 0.99, "inner mass {inner}");
    }

    #[test]
    fn sample_index_respects_weights() {
        let cum = [0.0, 0.5, 0.5, 1.0];
        let mut r = rng::substream(1, 1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_index(&cum, &mut r)] += 1;
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[2], 0);
        assert!((counts[1] as f64 - 5000.0).abs() < 300.0);
    }
}
