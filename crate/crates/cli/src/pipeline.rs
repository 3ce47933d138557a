//! The four pipelines behind the subcommands.

use std::path::Path;

use diffhmm_core::analysis::{
    self, alpha_grid, compare_resolvents, compare_semigroups, invariant_measure, reduced_spectrum, spectrum, SemigroupComparison,
};
use diffhmm_core::hmm::{self, build_hmm_generator, finite_rank_approx, hmm_resolvent, truncation_plan, HmmResolvent, TruncationPlan};
use diffhmm_core::jump::{self, jump_generator, verify_rrapprox_bound, BoundCheck, RowSampler};
use diffhmm_core::resolvent::{discretize_generator, resolvent_direct, resolvent_mc, McEstimate};
use diffhmm_core::statespace::build_grid;
use diffhmm_core::{
    ApproximationReport, DiffusionModel, FiniteRankGenerator, FiniteRankKernel, FunctionVector, GeneratorMatrix, GridSpace, JumpGenerator,
    KernelMatrix, LyapunovCertificate, SpectrumReport,
};

use crate::config::{ApproximationConfig, RunConfig};
use crate::output::{Cell, OutDir, Summary, Table};
use crate::CliError;

/// Model, grid and drift certificate shared by every pipeline.
pub struct Setup {
    pub model: DiffusionModel,
    pub grid: GridSpace,
    pub certificate: LyapunovCertificate,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let model = cfg.model.build()?;
    let bounds: Vec<(f64, f64)> = cfg.grid.bounds.iter().map(|b| (b[0], b[1])).collect();
    let spec = &cfg.lyapunov;
    let grid = build_grid(&bounds, &cfg.grid.resolution, |x| spec.v.eval(x))?;
    if model.dim() != grid.dim() {
        return Err(CliError::Config(format!("model dimension {} does not match grid dimension {}", model.dim(), grid.dim())));
    }
    let certificate = spec.certify(&model, &grid, None)?;
    Ok(Setup { model, grid, certificate })
}

impl Setup {
    pub fn generator(&self) -> Result<GeneratorMatrix, CliError> {
        Ok(discretize_generator(&self.model, &self.grid)?)
    }

    pub fn b_prime(&self) -> f64 {
        self.certificate.b_prime
    }
}

/// Jump generator, truncation and finite-rank generator for one `(kappa, N)` choice.
pub struct HmmBuild {
    pub jump: JumpGenerator,
    pub plan: TruncationPlan,
    pub kernel: FiniteRankKernel,
    pub generator: FiniteRankGenerator,
}

pub fn build_hmm(setup: &Setup, dh: &GeneratorMatrix, a: &ApproximationConfig) -> Result<HmmBuild, CliError> {
    let grid = &setup.grid;
    let rk = resolvent_direct(dh, a.kappa)?;
    let jump = jump_generator(&rk, a.kappa)?;
    let plan = truncation_plan(
        jump.jump_kernel(),
        &setup.certificate.v,
        &setup.certificate.w,
        a.r0.unwrap_or(f64::INFINITY),
        a.tail_weight,
        grid,
    )?;
    let kernel = finite_rank_approx(jump.jump_kernel(), &plan, a.cells_per_axis, grid)?;
    let generator = build_hmm_generator(&kernel, a.kappa, Some(&jump), grid)?;
    Ok(HmmBuild { jump, plan, kernel, generator })
}

/// `x_0 exp(-|x|^2 / 8)`.
pub fn test_function(grid: &GridSpace) -> FunctionVector {
    grid.eval("g", |x| x[0] * (-x.iter().map(|y| y * y).sum::<f64>() / 8.0).exp())
}

pub struct ApproximationRun {
    pub report: ApproximationReport,
    pub alphas: Vec<f64>,
    pub r_family: Vec<KernelMatrix>,
    pub t_family: Vec<KernelMatrix>,
    pub semigroups: SemigroupComparison,
    pub pi: Vec<f64>,
    pub varpi: Vec<f64>,
    pub hmm: HmmBuild,
    pub generator_gap: f64,
    /// `(1 + b') eps0`, the lower end of the resolvent validity region.
    pub validity_threshold: f64,
    pub resolvent_bounds: Vec<(f64, Option<HmmResolvent>)>,
    pub jump_bounds: Vec<BoundCheck>,
}

pub fn run_approximation(setup: &Setup, dh: &GeneratorMatrix, a: &ApproximationConfig) -> Result<ApproximationRun, CliError> {
    let grid = &setup.grid;
    let alphas = alpha_grid(a.delta)?;
    let hmm = build_hmm(setup, dh, a)?;
    let gen = &hmm.generator;
    let r_family = alphas.iter().map(|&al| resolvent_direct(dh, al)).collect::<Result<Vec<_>, _>>()?;
    let t_family = alphas.iter().map(|&al| gen.resolvent(al)).collect::<Result<Vec<_>, _>>()?;
    let gaps: Vec<f64> = compare_resolvents(&r_family, &t_family, grid)?.into_iter().map(|(_, g)| g).collect();
    let generator_gap = gen.generator_gap.unwrap_or(f64::NAN);
    let b_prime = setup.b_prime();
    let validity_threshold = (1.0 + b_prime) * generator_gap;
    let resolvent_bounds = alphas.iter().map(|&al| (al, hmm_resolvent(gen, al, b_prime, generator_gap, grid).ok())).collect();
    let mut jump_bounds = Vec::new();
    for (al, r) in alphas.iter().zip(&r_family) {
        if *al <= a.kappa {
            let rka = hmm.jump.resolvent(*al)?;
            jump_bounds.push(verify_rrapprox_bound(r, &rka, b_prime, a.kappa, grid)?);
        }
    }
    let g = test_function(grid);
    let semigroups = compare_semigroups(dh, gen, Some(&hmm.jump), &g, &a.times, dh, grid);
    let pi = invariant_measure(dh.entries())?;
    let varpi = hmm::hmm_stationary(gen)?;
    let measure_gap = analysis::compare_invariant(&pi, &varpi, grid)?;
    let report = ApproximationReport::new(alphas.clone(), gaps, &semigroups, measure_gap, a.epsilon);
    Ok(ApproximationRun {
        report,
        alphas,
        r_family,
        t_family,
        semigroups,
        pi,
        varpi,
        hmm,
        generator_gap,
        validity_threshold,
        resolvent_bounds,
        jump_bounds,
    })
}

fn coords(grid: &GridSpace, node: usize) -> Vec<Cell> {
    grid.point(node).iter().map(|&x| Cell::F(x)).collect()
}

fn coord_header(grid: &GridSpace) -> Vec<String> {
    (0..grid.dim()).map(|k| format!("x{k}")).collect()
}

fn header_with<'a>(grid: &GridSpace, before: &[&'a str], after: &[&'a str]) -> Vec<String> {
    before.iter().map(|s| s.to_string()).chain(coord_header(grid)).chain(after.iter().map(|s| s.to_string())).collect()
}

fn table_from(header: &[String]) -> Table {
    let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    Table::new(&refs)
}

fn certificate_table(setup: &Setup) -> Table {
    let grid = &setup.grid;
    let c = &setup.certificate;
    let mut t = table_from(&header_with(grid, &["node"], &["V", "W", "H", "slack", "in_c"]));
    let in_c = c.c.mask(grid.len());
    for i in 0..grid.len() {
        let mut row = vec![Cell::I(i)];
        row.extend(coords(grid, i));
        row.extend([c.v.values[i].into(), c.w.values[i].into(), c.nonlinear[i].into(), c.slack[i].into(), in_c[i].into()]);
        t.push(row);
    }
    t
}

fn certificate_summary(summary: &mut Summary, setup: &Setup) {
    let c = &setup.certificate;
    summary.criterion("certificate", c.passed);
    summary.constant("delta", c.delta);
    summary.constant("b", c.b);
    summary.constant("b_prime", c.b_prime);
    summary.constant("worst_slack", c.worst_slack);
    summary.constant("slack_tolerance", c.tolerance);
    summary.constant("worst_node", c.worst_node as f64);
    summary.note("worst_node_coords", format!("{:?}", setup.grid.point(c.worst_node)));
    summary.constant("grid_spacing", setup.grid.max_spacing());
}

pub fn cmd_certify(cfg: &RunConfig, out: &Path) -> Result<Summary, CliError> {
    let dir = OutDir::create(out)?;
    let setup = setup(cfg)?;
    dir.table("certificate.csv", &certificate_table(&setup))?;
    let mut summary = Summary::new("certify", cfg);
    certificate_summary(&mut summary, &setup);
    summary.finish();
    dir.write("summary.toml", &summary.to_toml())?;
    Ok(summary)
}

pub fn cmd_approximate(cfg: &RunConfig, out: &Path) -> Result<Summary, CliError> {
    let dir = OutDir::create(out)?;
    let setup = setup(cfg)?;
    let mut summary = Summary::new("approximate", cfg);
    certificate_summary(&mut summary, &setup);
    if !setup.certificate.passed {
        summary.note("approximation", "skipped: drift certificate failed");
        summary.finish();
        dir.write("summary.toml", &summary.to_toml())?;
        return Ok(summary);
    }
    let dh = setup.generator()?;
    let a = &cfg.approximation;
    let run = run_approximation(&setup, &dh, a)?;
    let grid = &setup.grid;
    let rep = &run.report;

    let mut t = Table::new(&["alpha", "gap", "target", "passed"]);
    for (al, g) in rep.alpha_grid.iter().zip(&rep.resolvent_gaps) {
        t.push(vec![(*al).into(), (*g).into(), rep.epsilon_target.into(), (*g <= rep.epsilon_target + diffhmm_core::BOUND_SLACK).into()]);
    }
    dir.table("resolvent_gaps.csv", &t)?;

    let mut t = Table::new(&["t", "total", "first_stage", "second_stage", "budget"]);
    for r in &rep.semigroup_gaps {
        t.push(vec![r.t.into(), r.total.into(), r.first_stage.into(), r.second_stage.into(), rep.semigroup_budget.into()]);
    }
    dir.table("semigroup_gaps.csv", &t)?;

    let mut t = table_from(&header_with(grid, &["node"], &["pi", "varpi"]));
    for i in 0..grid.len() {
        let mut row = vec![Cell::I(i)];
        row.extend(coords(grid, i));
        row.extend([run.pi[i].into(), run.varpi[i].into()]);
        t.push(row);
    }
    dir.table("invariant.csv", &t)?;

    let mut buf = Vec::new();
    jump::write_bound_table(&run.jump_bounds, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    dir.write("jump_bounds.csv", &String::from_utf8(buf).expect("utf8"))?;
    dir.write("hmm.toml", &hmm::write_hmm_text(&run.hmm.generator)?)?;

    summary.criterion("resolvent", rep.resolvent_passed);
    summary.criterion("semigroup", rep.semigroup_passed);
    summary.criterion("invariant_measure", rep.measure_passed);
    summary.constant("kappa", a.kappa);
    summary.constant("rank", run.hmm.kernel.rank() as f64);
    summary.constant("r0", run.hmm.plan.r0);
    summary.constant("epsilon_target", a.epsilon);
    summary.constant("epsilon_tail", run.hmm.plan.epsilon_tail);
    summary.constant("finite_rank_error", run.hmm.kernel.achieved_error);
    summary.constant("generator_gap", run.generator_gap);
    summary.constant("validity_threshold", run.validity_threshold);
    summary.constant("max_resolvent_gap", rep.resolvent_gaps.iter().cloned().fold(0.0, f64::max));
    summary.constant("max_semigroup_gap", run.semigroups.max_total());
    summary.constant("semigroup_budget", rep.semigroup_budget);
    summary.constant("measure_gap", rep.measure_gap);
    let outside: Vec<String> = run.resolvent_bounds.iter().filter(|(_, r)| r.is_none()).map(|(al, _)| al.to_string()).collect();
    if !outside.is_empty() {
        summary.note(
            "hmm_resolvent",
            format!(
                "alpha in [{}] lies outside the validity region alpha > (1 + b') eps0 = {}; resolvents computed without the norm bound",
                outside.join(", "),
                run.validity_threshold
            ),
        );
    }
    if run.hmm.generator.jittered {
        summary.note("positivity", "zero entries of r mixed with the uniform matrix");
    }
    summary.finish();
    dir.write("summary.toml", &summary.to_toml())?;
    Ok(summary)
}

fn spectrum_table(rep: &SpectrumReport) -> Table {
    let mut t = Table::new(&["index", "re", "im", "modulus"]);
    for (i, z) in rep.eigenvalues.iter().enumerate() {
        t.push(vec![Cell::I(i), z.re.into(), z.im.into(), z.norm().into()]);
    }
    t
}

pub fn cmd_spectrum(cfg: &RunConfig, out: &Path) -> Result<Summary, CliError> {
    let dir = OutDir::create(out)?;
    let setup = setup(cfg)?;
    let dh = setup.generator()?;
    let r1 = resolvent_direct(&dh, 1.0)?;
    let hmm = build_hmm(&setup, &dh, &cfg.approximation)?;
    let reports = [
        ("spectrum_generator.csv", spectrum(dh.entries(), "D_h")?),
        ("spectrum_resolvent.csv", spectrum(&r1.entries, "R_1")?),
        ("spectrum_hmm_generator.csv", reduced_spectrum(&hmm.generator)?),
    ];
    let t1 = reports[2].1.to_resolvent(1.0);
    let mut summary = Summary::new("spectrum", cfg);
    for (name, rep) in reports.iter().chain(std::iter::once(&("spectrum_hmm_resolvent.csv", t1.clone()))) {
        dir.table(name, &spectrum_table(rep))?;
        let stem = name.trim_end_matches(".csv");
        for (k, z) in rep.top(4).iter().enumerate() {
            summary.constant(&format!("{stem}_{k}_re"), z.re);
        }
        summary.constant(&format!("{stem}_count"), rep.rank as f64);
    }
    summary.finish();
    dir.write("summary.toml", &summary.to_toml())?;
    Ok(summary)
}

/// Largest per-bin z-score of `est` against `reference`, with a table of both.
fn law_table(est: &McEstimate, reference: &[f64], labels: &[String]) -> Table {
    let mut t = Table::new(&["bin", "label", "estimate", "std_error", "reference"]);
    for (i, label) in labels.iter().enumerate() {
        t.push(vec![Cell::I(i), Cell::S(label.clone()), est.probabilities[i].into(), est.std_errors[i].into(), reference[i].into()]);
    }
    t
}

fn node_labels(grid: &GridSpace) -> Vec<String> {
    (0..grid.len()).map(|i| grid.point(i).iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")).collect()
}

pub const Z_LIMIT: f64 = 4.0;

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Summary, CliError> {
    let dir = OutDir::create(out)?;
    let setup = setup(cfg)?;
    let grid = &setup.grid;
    let dh = setup.generator()?;
    let s = &cfg.simulation;
    let a = &cfg.approximation;
    let mut summary = Summary::new("simulate", cfg);
    let labels = node_labels(grid);

    let est = resolvent_mc(&setup.model, s.alpha, &s.x0, s.paths, s.dt, s.seed, grid)?;
    let x0 = grid.nearest_node(&s.x0);
    let ra = resolvent_direct(&dh, s.alpha)?;
    let row: Vec<f64> = ra.entries.row(x0).iter().map(|x| x * s.alpha).collect();
    let z = est.max_z_score(&row);
    dir.table("resolvent_mc.csv", &law_table(&est, &row, &labels))?;
    summary.constant("resolvent_mc_max_z", z);
    summary.criterion("resolvent_mc", z <= Z_LIMIT);

    let hmm = build_hmm(&setup, &dh, a)?;
    let sampler = RowSampler::from_generator(&hmm.jump)?;
    let runs = jump::simulate_jump_runs(&sampler, a.kappa, x0, s.horizon, s.paths, s.seed.wrapping_add(1))?;
    let n = runs.len() as f64;
    let mean_jumps = runs.iter().map(|p| p.jumps() as f64).sum::<f64>() / n;
    let expected = a.kappa * s.horizon;
    let z_count = (mean_jumps - expected).abs() / (expected / n).sqrt();
    summary.constant("jump_count_mean", mean_jumps);
    summary.constant("jump_count_expected", expected);
    summary.constant("jump_count_z", z_count);
    summary.criterion("jump_count", z_count <= Z_LIMIT);
    let mut counts = vec![0u64; grid.len()];
    for p in &runs {
        counts[p.at(s.horizon)] += 1;
    }
    let est = McEstimate::from_counts(&counts, runs.len());
    let law = jump::jump_semigroup(&hmm.jump, s.horizon)?;
    let row: Vec<f64> = law.entries.row(x0).iter().cloned().collect();
    let z = est.max_z_score(&row);
    dir.table("jump_law.csv", &law_table(&est, &row, &labels))?;
    summary.constant("jump_law_max_z", z);
    summary.criterion("jump_law", z <= Z_LIMIT);

    let gen = &hmm.generator;
    let k = gen.num_states();
    let i0 = hmm.kernel.cells.cell_of[x0].map(|c| c + 1).unwrap_or(1);
    let paths = hmm::simulate_hmm_runs(gen, i0, s.horizon, s.paths, s.seed.wrapping_add(2))?;
    let mut hidden = vec![0u64; k];
    let mut obs = vec![0u64; grid.len()];
    let mut obs_total = 0usize;
    for p in &paths {
        let st = p.state_at(s.horizon);
        if st >= 1 {
            hidden[st - 1] += 1;
        }
        for (state, o) in p.states.iter().zip(&p.observations) {
            if *state == i0 {
                obs[o.expect("observed state")] += 1;
                obs_total += 1;
            }
        }
    }
    let mut p0 = vec![0.0; k];
    p0[i0 - 1] = 1.0;
    let coeffs = hmm::hmm_semigroup_coeffs(gen, &p0, s.horizon)?;
    let est = McEstimate::from_counts(&hidden, paths.len());
    let z = est.max_z_score(&coeffs);
    let state_labels: Vec<String> = (1..=k).map(|i| format!("state {i}")).collect();
    dir.table("hmm_hidden.csv", &law_table(&est, &coeffs, &state_labels))?;
    summary.constant("hmm_hidden_max_z", z);
    summary.criterion("hmm_hidden", z <= Z_LIMIT);
    let est = McEstimate::from_counts(&obs, obs_total.max(1));
    let nu: Vec<f64> = gen.nu.row(i0 - 1).iter().cloned().collect();
    let z = est.max_z_score(&nu);
    dir.table("hmm_observations.csv", &law_table(&est, &nu, &labels))?;
    summary.constant("hmm_observation_max_z", z);
    summary.constant("hmm_observation_count", obs_total as f64);
    summary.criterion("hmm_observations", z <= Z_LIMIT);

    summary.finish();
    dir.write("summary.toml", &summary.to_toml())?;
    Ok(summary)
}
