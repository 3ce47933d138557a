//! Checks against independent oracles: quadrature, closed forms, known
//! stationary laws and Monte Carlo estimates.

use diffhmm_core::analysis::{ergodicity_rate, invariant_measure, Semigroup};
use diffhmm_core::diffusion::{sde_endpoints, time_average_histogram, LyapunovSpec};
use diffhmm_core::hmm::{build_hmm_generator, finite_rank_approx, truncation_plan, HmmSampler, TailWeight};
use diffhmm_core::jump::{jump_drift_certificate, jump_generator, jump_resolvent_series, RowSampler};
use diffhmm_core::resolvent::{discretize_generator, histogram_of, resolvent_direct, resolvent_mc};
use diffhmm_core::{DVector, DiffusionModel, FunctionVector, GeneratorMatrix, GridSpace};

fn line(preset: &str, lo: f64, hi: f64, h: f64) -> (DiffusionModel, GridSpace, GeneratorMatrix) {
    let n = ((hi - lo) / h).round() as usize + 1;
    let g = GridSpace::line(lo, hi, n, |x| x * x / 4.0).unwrap();
    let m = DiffusionModel::preset(preset).unwrap();
    let d = discretize_generator(&m, &g).unwrap();
    (m, g, d)
}

#[test]
fn resolvent_matches_laplace_transform_of_semigroup() {
    let (_, g, d) = line("ou1d", -4.0, 4.0, 0.2);
    let f: Vec<f64> = g.eval("g", |x| x[0] * (-x[0] * x[0] / 8.0).exp()).values;
    for alpha in [0.5, 1.0, 2.0] {
        let panels = 8000;
        let dt = 40.0 / alpha / panels as f64;
        let step = d.transition(dt);
        let mut pg = DVector::from_column_slice(&f);
        let mut acc = DVector::zeros(g.len());
        for k in 0..=panels {
            let w = if k == 0 || k == panels { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += &pg * (w * (-alpha * k as f64 * dt).exp());
            pg = &step * pg;
        }
        acc *= dt / 3.0;
        let direct = resolvent_direct(&d, alpha).unwrap().entries * DVector::from_column_slice(&f);
        let err = (acc - direct).amax();
        assert!(err < 1e-6, "alpha = {alpha}: {err}");
    }
}

#[test]
fn double_well_modes_near_plus_minus_one() {
    let (_, g, d) = line("doublewell1d", -3.0, 3.0, 0.01);
    let pi = invariant_measure(d.entries()).unwrap();
    let argmax = |range: std::ops::Range<usize>| range.max_by(|&a, &b| pi[a].total_cmp(&pi[b])).unwrap();
    let mid = g.len() / 2;
    let left = g.point(argmax(0..mid))[0];
    let right = g.point(argmax(mid + 1..g.len()))[0];
    assert!((left + 1.0).abs() <= 0.1, "{left}");
    assert!((right - 1.0).abs() <= 0.1, "{right}");
    assert!(pi[mid] < pi[g.nearest_node(&[1.0])]);
}

#[test]
fn ou_ergodicity_rate_is_spectral_gap() {
    let (_, g, d) = line("ou1d", -6.0, 6.0, 0.05);
    let pi = invariant_measure(d.entries()).unwrap();
    let times: Vec<f64> = (1..=10).map(|k| 0.5 * k as f64).collect();
    let est = ergodicity_rate(&d, &pi, &times, &g).unwrap();
    assert!((est.b0 - 1.0).abs() <= 0.25, "b0 = {}", est.b0);
    assert!(est.fit_residual <= 0.1, "residual = {}", est.fit_residual);
    assert!(!est.non_decaying);
}

#[test]
fn jump_process_is_ergodic_with_positive_rate() {
    let (_, g, d) = line("ou1d", -6.0, 6.0, 0.05);
    let kappa = 20.0;
    let jg = jump_generator(&resolvent_direct(&d, kappa).unwrap(), kappa).unwrap();
    let pi = invariant_measure(jg.entries()).unwrap();
    let times: Vec<f64> = (1..=10).map(|k| 0.5 * k as f64).collect();
    let est = ergodicity_rate(&jg, &pi, &times, &g).unwrap();
    let predicted = kappa / (1.0 + kappa);
    assert!(est.b0 > 0.0);
    if (est.b0 - predicted).abs() > 0.25 * predicted {
        eprintln!("jump ergodicity rate {} differs from {predicted} by more than 25%", est.b0);
    }
}

#[test]
fn jump_drift_and_series() {
    let (m, g, d) = line("ou1d", -6.0, 6.0, 0.05);
    let b_prime = LyapunovSpec::ou1d().certify(&m, &g, None).unwrap().b_prime;
    for kappa in [5.0, 20.0] {
        let jg = jump_generator(&resolvent_direct(&d, kappa).unwrap(), kappa).unwrap();
        let cert = jump_drift_certificate(1.0, 1.5, kappa).unwrap().verify(&jg, &g, b_prime, 1e-9).unwrap();
        assert_eq!(cert.verified, Some(true), "kappa = {kappa}: {:?}", cert.worst_slack);
        let series = jump_resolvent_series(&jg, 1.0, 1e-12, &g).unwrap();
        assert!(series.series_gap.unwrap() < 1e-8);
    }
}

#[test]
fn jump_one_step_law() {
    let (_, g, d) = line("ou1d", -4.0, 4.0, 0.1);
    let kappa = 10.0;
    let jg = jump_generator(&resolvent_direct(&d, kappa).unwrap(), kappa).unwrap();
    let sampler = RowSampler::from_generator(&jg).unwrap();
    for x0 in [0.0, 1.5] {
        let i = g.nearest_node(&[x0]);
        let est = histogram_of(11, 100_000, g.len(), |_, r| Ok(sampler.sample(i, r))).unwrap();
        let row: Vec<f64> = jg.jump_kernel().row(i).iter().cloned().collect();
        assert!(est.max_z_score(&row) <= 4.0);
    }
}

#[test]
fn hmm_observation_law() {
    let (_, g, d) = line("ou1d", -4.0, 4.0, 0.1);
    let kappa = 10.0;
    let jg = jump_generator(&resolvent_direct(&d, kappa).unwrap(), kappa).unwrap();
    let v = FunctionVector::new("V", g.lyapunov().to_vec());
    let w = g.eval("W", |x| 1.0 + x[0] * x[0] / 8.0);
    let plan = truncation_plan(jg.jump_kernel(), &v, &w, f64::INFINITY, TailWeight::QuarticRoot, &g).unwrap();
    let gen = build_hmm_generator(&finite_rank_approx(jg.jump_kernel(), &plan, 8, &g).unwrap(), kappa, Some(&jg), &g).unwrap();
    let sampler = HmmSampler::new(&gen).unwrap();
    assert_eq!(histogram_of(3, 10, g.len(), |_, r| Ok(sampler.observe(0, r).map_or(0, |_| 1))).unwrap().probabilities[0], 1.0);
    for state in [1, 4] {
        let est = histogram_of(5, 100_000, g.len(), |_, r| Ok(sampler.observe(state, r).unwrap())).unwrap();
        let nu: Vec<f64> = gen.nu.row(state - 1).iter().cloned().collect();
        assert!(est.max_z_score(&nu) <= 4.0);
    }
}

#[test]
fn monte_carlo_resolvent_rows() {
    let (m, g, d) = line("ou1d", -6.0, 6.0, 0.025);
    let alpha = 1.0;
    let r = resolvent_direct(&d, alpha).unwrap();
    for x0 in [0.0, 1.0, -2.0] {
        let est = resolvent_mc(&m, alpha, &[x0], 30_000, 1e-3, 17, &g).unwrap();
        let row: Vec<f64> = r.entries.row(g.nearest_node(&[x0])).iter().map(|x| x * alpha).collect();
        let z = est.max_z_score(&row);
        assert!(z <= 4.0, "x0 = {x0}: z = {z}");
    }
}

#[test]
fn ou_second_moment_relaxes_to_one() {
    let m = DiffusionModel::preset("ou1d").unwrap();
    let ends = sde_endpoints(&m, &[2.0], 0.01, 5.0, 20_000, 23, &[(-10.0, 10.0)]).unwrap();
    let mean = ends.iter().map(|x| x[0] * x[0]).sum::<f64>() / ends.len() as f64;
    assert!((mean - 1.0).abs() <= 0.05, "{mean}");
}

#[test]
fn time_average_matches_invariant_law() {
    let (m, g, d) = line("ou1d", -5.0, 5.0, 0.25);
    let pi = invariant_measure(d.entries()).unwrap();
    let hist = time_average_histogram(&m, &[0.0], 0.005, 10.0, 4000.0, 29, &g).unwrap();
    let err = pi.iter().zip(&hist).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 0.01, "{err}");
}
