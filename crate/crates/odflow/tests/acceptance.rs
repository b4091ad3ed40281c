//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion straight to stdout (bypassing the test harness capture), then
//! asserts the criterion.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use odflow::config::{ParamLossConfig, RiskConfig};
use odflow::drivers;
use odflow_core::learners::LearnerConfig;
use odflow_core::pipeline::{self, Models, PredictionReport, SweepInputs, SweepRow};
use odflow_core::simgen::{self, Scenario, ScenarioConfig, SimSpec};
use odflow_core::syncontrol::{self, DonorSet};
use odflow_core::{features, numeric, placebo, rng, CausalEffectEstimate, IncidentRecord, PipelineConfig, PlaceboConfig, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn report(id: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let line = format!("ACCEPTANCE {id:>2} {} {name}: {detail} [{:.1}s]\n", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_donors(rng: &mut ChaCha8Rng, max_donors: usize, max_d: usize) -> DonorSet {
    let n = rng.random_range(1..=max_donors);
    let d = rng.random_range(1..=max_d);
    let t = rng.random_range(1..=3);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-5.0..5.0)).collect() };
    let cov = (0..n).map(|_| draw(d)).collect();
    let outcomes = draw(n);
    let pre = (0..t).map(|_| draw(n)).collect();
    let target = draw(d);
    let target_pre = draw(t);
    DonorSet::new(cov, outcomes, pre, target, target_pre).unwrap()
}

/// Best V-distance over the simplex grid with spacing `1/k`.
fn grid_optimum(set: &DonorSet, v: &[f64], k: usize) -> f64 {
    fn rec(set: &DonorSet, v: &[f64], pos: usize, left: usize, k: usize, w: &mut Vec<f64>, best: &mut f64) {
        if pos == w.len() - 1 {
            w[pos] = left as f64 / k as f64;
            *best = best.min(set.covariate_distance(w, v));
            return;
        }
        for c in 0..=left {
            w[pos] = c as f64 / k as f64;
            rec(set, v, pos + 1, left - c, k, w, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(set, v, 0, k, k, &mut vec![0.0; set.n_donors()], &mut best);
    best
}

#[test]
fn criterion_01_simplex_solver_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases: Vec<(DonorSet, Vec<f64>)> = (0..100)
        .map(|_| {
            let set = random_donors(&mut rng, 4, 3);
            let v = (0..set.dim()).map(|_| rng.random_range(0.1..3.0)).collect();
            (set, v)
        })
        .collect();
    let excess: Vec<f64> = cases
        .par_iter()
        .map(|(set, v)| {
            let (_, obj) = syncontrol::solve_weights(set, v).unwrap();
            obj - grid_optimum(set, v, 200)
        })
        .collect();
    let worst = excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let elapsed = t.elapsed();
    let pass = worst <= 1e-3 && elapsed < Duration::from_secs(60);
    report(1, "simplex solver vs grid (step 0.005)", pass, format!("max(objective - grid optimum) = {worst:.3e} over 100 sets, limit 1e-3"), elapsed);
    assert!(pass);
}

#[test]
fn criterion_02_counterfactual_hull() {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..10_000).collect();
    let violations: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng::derive(202, &[i]));
            let set = random_donors(&mut rng, 8, 4);
            let fit = syncontrol::optimize_v(&set, &SynthConfig::default(), i).unwrap();
            let lo = set.outcomes().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = set.outcomes().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let hull = (lo - fit.counterfactual).max(fit.counterfactual - hi).max(0.0);
            let neg = fit.weights.iter().copied().fold(0.0f64, |m, w| m.max(-w));
            let simplex = neg.max((fit.weights.iter().sum::<f64>() - 1.0).abs());
            (hull, simplex)
        })
        .collect();
    let hull = violations.iter().map(|v| v.0).fold(0.0, f64::max);
    let simplex = violations.iter().map(|v| v.1).fold(0.0, f64::max);
    let pass = hull == 0.0 && simplex <= 1e-9;
    report(2, "counterfactual in donor hull", pass, format!("10000 fits: max hull excursion {hull:e}, max simplex violation {simplex:.2e} (limit 1e-9)"), t.elapsed());
    assert!(pass);
}

fn ks_uniform(p: &mut [f64]) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in p.iter().enumerate() {
        d = d.max((i as f64 + 1.0) / n - x).max(x - i as f64 / n);
    }
    d
}

#[test]
fn criterion_03_placebo_null_calibration() {
    let t = Instant::now();
    let spec = SimSpec { weekend_factor: 1.0, weather_factor: 1.0, seed: 303, ..Default::default() };
    let graph = simgen::generate_network(&spec).unwrap();
    let panel = simgen::generate_panel(&graph, &spec).unwrap().panel;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cells: Vec<(usize, usize, usize)> = (0..500)
        .map(|_| (rng.random_range(0..panel.n_ods()), rng.random_range(0..panel.n_days()), rng.random_range(12..44)))
        .collect();
    let synth = SynthConfig { seed: 303, ..Default::default() };
    let cfg = PlaceboConfig::default();
    let mut p: Vec<f64> = cells
        .par_iter()
        .map(|&(od, day, k)| placebo::test_cell(&panel, &[], od, day, k, &synth, &cfg).unwrap().p_value)
        .collect();
    let frac = p.iter().filter(|&&x| x <= cfg.alpha).count() as f64 / p.len() as f64;
    let ks = ks_uniform(&mut p);
    let elapsed = t.elapsed();
    let pass = (0.02..=0.10).contains(&frac) && ks < 0.1 && elapsed < Duration::from_secs(300);
    report(3, "placebo null calibration", pass, format!("500 null cells: significant fraction {frac:.3} (band [0.02, 0.10]), KS to uniform {ks:.3} (< 0.1)"), elapsed);
    assert!(pass);
}

/// Homogeneous days and low dispersion, so injected effects dwarf the noise.
fn recovery_spec(seed: u64) -> SimSpec {
    SimSpec { weekend_factor: 1.0, weather_factor: 1.0, noise_sigma: 0.1, seed, ..Default::default() }
}

#[test]
fn criterion_04_effect_recovery() {
    let t = Instant::now();
    let (mut big, mut significant, mut recovered) = (0usize, 0usize, 0usize);
    let mut per_seed = Vec::new();
    for seed in 1..=10u64 {
        let spec = recovery_spec(seed);
        let sc = simgen::scenario(&spec, &ScenarioConfig { n_incidents: 3, ..Default::default() }).unwrap();
        let cells: Vec<(usize, usize, usize, f64)> = sc
            .effects
            .iter()
            .filter(|e| e.interval >= 2 && e.true_effect.abs() >= 5.0 * sc.base.noise_sd(&spec, e.od, e.day, e.interval))
            .map(|e| (e.od, e.day, e.interval, e.true_effect))
            .collect();
        let synth = SynthConfig { seed, ..Default::default() };
        let cfg = PlaceboConfig::default();
        let results: Vec<(bool, bool)> = cells
            .par_iter()
            .map(|&(od, day, k, truth)| {
                let est = placebo::test_cell(&sc.panel, &sc.incidents, od, day, k, &synth, &cfg).unwrap();
                (est.significant, est.significant && ((est.effect - truth) / truth).abs() < 0.2)
            })
            .collect();
        let s = results.iter().filter(|r| r.0).count();
        let r = results.iter().filter(|r| r.1).count();
        per_seed.push(format!("{r}/{}", cells.len()));
        big += cells.len();
        significant += s;
        recovered += r;
    }
    let sig_frac = significant as f64 / big as f64;
    let rec_frac = recovered as f64 / big as f64;
    let pass = big > 0 && sig_frac >= 0.8 && rec_frac >= 0.8;
    report(
        4,
        "effect recovery (|effect| >= 5 noise sd)",
        pass,
        format!("{big} cells over 10 seeds: significant {sig_frac:.3}, significant and within 20% {rec_frac:.3} (need >= 0.8); per seed {}", per_seed.join(" ")),
        t.elapsed(),
    );
    assert!(pass);
}

#[test]
fn criterion_05_parameter_loss_closed_form() {
    let t = Instant::now();
    let cfg = ParamLossConfig::default();
    assert_eq!((cfg.p_grid.len(), cfg.sigma1_grid.len(), cfg.sigma2_grid.len(), cfg.n, cfg.trials), (3, 3, 3, 1000, 500));
    let rows = drivers::param_loss_grid(&cfg, 505).unwrap();
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let linear_worst = rows.iter().map(|r| r.rel_err_linear).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = worst <= 0.10 && linear_worst > 0.10 && elapsed < Duration::from_secs(600);
    report(
        5,
        "parameter loss (1-p)^2 closed form",
        pass,
        format!("27 grid points: max rel err {worst:.4} (<= 0.10); linear (1-p) form max rel err {linear_worst:.3} (must exceed 0.10)"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_06_adjustment_risk_minimum() {
    let t = Instant::now();
    let [exact, half] = drivers::risk_cases(&RiskConfig::default(), 606).unwrap();
    let r2 = |r: &odflow_core::theory::AdjustmentRisk| numeric::quadratic_fit(&r.p_grid, &r.empirical).unwrap().1;
    let (a1, a2) = (exact.argmin(), half.argmin());
    let (q1, q2) = (r2(&exact), r2(&half));
    let pass = (a1 - 0.5).abs() <= 0.03 && (a2 - 0.25).abs() <= 0.03 && q1 > 0.99 && q2 > 0.99;
    report(
        6,
        "adjustment risk argmin",
        pass,
        format!("fhat = f: argmin {a1:.2} (0.5 +- 0.03), R2 {q1:.5}; fhat = f/2: argmin {a2:.2} (0.25 +- 0.03), R2 {q2:.5}"),
        t.elapsed(),
    );
    assert!(pass);
}

/// Default scenario of one seed, estimated, trained and scored.
struct StandardRun {
    report: PredictionReport,
    sweep: Vec<SweepRow>,
}

fn split_estimates(estimates: &[CausalEffectEstimate], incidents: &[IncidentRecord]) -> Vec<CausalEffectEstimate> {
    estimates.iter().filter(|e| incidents.iter().any(|i| i.day_index == e.day)).cloned().collect()
}

fn estimate(sc: &Scenario, seed: u64, window: f64) -> Vec<CausalEffectEstimate> {
    let synth = SynthConfig { seed, ..Default::default() };
    let cfg = PlaceboConfig { post_incident_window_min: window, ..Default::default() };
    drivers::estimate_effects(&sc.panel, &sc.incidents, &sc.graph, None, &synth, &cfg).unwrap()
}

fn standard_run(seed: u64) -> StandardRun {
    let spec = SimSpec { seed, ..Default::default() };
    let sc = simgen::scenario(&spec, &ScenarioConfig::default()).unwrap();
    let window = PlaceboConfig::default().post_incident_window_min;
    let estimates = estimate(&sc, seed, window);
    let config = PipelineConfig::default();
    let learner = LearnerConfig { seed, ..Default::default() };
    let (train, test) = pipeline::split_incidents(&sc.incidents, config.n_test_incidents);
    let train_est = split_estimates(&estimates, &train);
    let normal = pipeline::train_normal(&sc.panel, &sc.incidents, config.normal_kind, &learner).unwrap();
    let (effect, prob) = pipeline::train_effect_models(&sc.panel, &train, &sc.graph, &train_est, &config, &learner, window).unwrap();
    let models = Models { normal, effect, prob };
    let test: Vec<(IncidentRecord, Vec<CausalEffectEstimate>)> =
        test.into_iter().map(|i| { let e = split_estimates(&estimates, std::slice::from_ref(&i)); (i, e) }).collect();
    let mut rows = Vec::new();
    for (inc, est) in &test {
        rows.extend(pipeline::predict_with_incident(&sc.panel, &sc.incidents, inc, &models, &sc.graph, &config, window, est).unwrap().rows);
    }
    let report = PredictionReport::from_rows(rows).unwrap();
    let inputs = SweepInputs {
        panel: &sc.panel,
        incidents: &sc.incidents,
        graph: &sc.graph,
        train_estimates: &train_est,
        test: &test,
        normal: &models.normal,
        prob: &models.prob,
        post_window_min: window,
    };
    let sweep = drivers::sweep(&inputs, &config, &learner).unwrap();
    StandardRun { report, sweep }
}

const STANDARD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn standard_runs() -> &'static Vec<StandardRun> {
    static RUNS: OnceLock<Vec<StandardRun>> = OnceLock::new();
    RUNS.get_or_init(|| STANDARD_SEEDS.iter().map(|&s| standard_run(s)).collect())
}

#[test]
fn criterion_07_two_stage_improvement() {
    let t = Instant::now();
    let runs = standard_runs();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut sums = [0.0; 4];
    for (seed, run) in STANDARD_SEEDS.iter().zip(runs) {
        let r = &run.report;
        let (inf, base_inf) = (r.metrics_influenced.unwrap().mae, r.baseline_influenced.unwrap().mae);
        let ok = inf <= 0.85 * base_inf && r.metrics_all.mae < r.baseline_all.mae;
        pass &= ok;
        for (s, v) in sums.iter_mut().zip([inf, base_inf, r.metrics_all.mae, r.baseline_all.mae]) {
            *s += v;
        }
        parts.push(format!(
            "seed {seed}: influenced {inf:.3}/{base_inf:.3} = {:.3}, all {:.3} vs {:.3}{}",
            inf / base_inf,
            r.metrics_all.mae,
            r.baseline_all.mae,
            if ok { "" } else { " (miss)" }
        ));
    }
    // Every seed must pass; the seed mean is printed for context only.
    parts.push(format!("5-seed mean: influenced ratio {:.3}, all {:.3} vs {:.3}", sums[0] / sums[1], sums[2] / 5.0, sums[3] / 5.0));
    report(7, "two-stage beats normal-only on every seed (influenced ratio <= 0.85, all-cell lower)", pass, parts.join("; "), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_08_threshold_u_curves() {
    let t = Instant::now();
    let runs = standard_runs();
    let config = PipelineConfig::default();
    let mean_at = |p1: f64, p2: f64| {
        let vals: Vec<f64> = runs
            .iter()
            .map(|r| r.sweep.iter().find(|s| s.p1 == p1 && s.p2 == p2).expect("sweep point").mae_all)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let hold = config.sweep_hold;
    let curve1: Vec<f64> = config.sweep_p1.iter().map(|&p| mean_at(p, hold)).collect();
    let curve2: Vec<f64> = config.sweep_p2.iter().map(|&p| mean_at(hold, p)).collect();
    let u = |c: &[f64]| {
        let interior = c[1..c.len() - 1].iter().copied().fold(f64::INFINITY, f64::min);
        c[0] >= interior && c[c.len() - 1] >= interior
    };
    let fmt = |grid: &[f64], c: &[f64]| grid.iter().zip(c).map(|(g, v)| format!("{g}:{v:.3}")).collect::<Vec<_>>().join(" ");
    let pass = u(&curve1) && u(&curve2);
    report(
        8,
        "threshold U-curves (5-seed mean all-cell MAE)",
        pass,
        format!("p1 sweep [{}] {}; p2 sweep [{}] {}", fmt(&config.sweep_p1, &curve1), if u(&curve1) { "U" } else { "not U" }, fmt(&config.sweep_p2, &curve2), if u(&curve2) { "U" } else { "not U" }),
        t.elapsed(),
    );
    assert!(pass);
}

/// Widely spread OD popularity and no recovery overshoot, so the incident
/// effect on a cell scales with its normal flow.
fn proportional_scenario(seed: u64) -> Scenario {
    let spec = SimSpec { popularity_sigma: 1.0, seed, ..Default::default() };
    let mut cfg = ScenarioConfig::default();
    cfg.profile.recovery_overshoot = 0.0;
    simgen::scenario(&spec, &cfg).unwrap()
}

#[test]
fn criterion_09_x0_importance() {
    let t = Instant::now();
    let x0 = features::FEATURE_NAMES.iter().position(|n| *n == "x0").unwrap();
    let window = PlaceboConfig::default().post_incident_window_min;
    let config = PipelineConfig::default();
    let mut firsts = 0;
    let mut parts = Vec::new();
    for seed in 1..=5u64 {
        let sc = proportional_scenario(seed);
        let estimates = estimate(&sc, seed, window);
        let (train, _) = pipeline::split_incidents(&sc.incidents, config.n_test_incidents);
        let learner = LearnerConfig { seed, ..Default::default() };
        let (effect, _) = pipeline::train_effect_models(&sc.panel, &train, &sc.graph, &split_estimates(&estimates, &train), &config, &learner, window).unwrap();
        let imp = effect.feature_importance().unwrap();
        let top = (0..imp.len()).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        if top == x0 {
            firsts += 1;
        }
        parts.push(format!("seed {seed}: x0 {:.3}, top {} {:.3}", imp[x0], features::FEATURE_NAMES[top], imp[top]));
    }
    let pass = firsts >= 4;
    report(9, "x0 ranks first in forest importance", pass, format!("{firsts}/5 seeds (need 4); {}", parts.join("; ")), t.elapsed());
    assert!(pass);
}

#[test]
fn criterion_10_metrics_exactness() {
    let t = Instant::now();
    let m = pipeline::evaluate(&[2.0, 4.0], &[4.0, 2.0]).unwrap();
    let exact = m.mae == 2.0 && m.rmse == 2.0 && m.mape == 0.75 && m.n == 2;
    let with_small = pipeline::evaluate(&[2.0, 4.0, 50.0], &[4.0, 2.0, 1.0]).unwrap();
    let filtered = with_small == m;
    let boundary = pipeline::evaluate(&[2.0, 4.0, 3.0], &[4.0, 2.0, 2.0]).unwrap().n == 3;
    let empty = matches!(pipeline::evaluate(&[5.0], &[1.0]), Err(odflow_core::Error::EmptyEvaluation));
    let pass = exact && filtered && boundary && empty;
    report(
        10,
        "metric arithmetic and y < 2 filter",
        pass,
        format!("MAE {} RMSE {} MAPE {}; y = 1 row ignored: {filtered}; y = 2 row kept: {boundary}; all rows below 2 rejected: {empty}", m.mae, m.rmse, m.mape),
        t.elapsed(),
    );
    assert!(pass);
}

fn run_chain(dir: &Path, threads: &str) -> BTreeMap<String, Vec<u8>> {
    let d = dir.display();
    let cfg = dir.join("config.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"seed": 11, "paths": {{"input_dir": "{d}", "output_dir": "{d}"}},
               "simgen": {{"spec": {{"n_lines": 2, "n_days": 30, "max_ods": 16}}, "scenario": {{"n_incidents": 3}}}},
               "pipeline": {{"sweep_p1": [0.05, 1.0], "sweep_p2": [0.0, 0.3]}},
               "theory": {{"param_loss": {{"p_grid": [0.5], "sigma1_grid": [1.0], "sigma2_grid": [0.5, 1.0], "trials": 50}}, "risk": {{"draws": 100000, "step": 0.05}}}}}}"#
        ),
    )
    .unwrap();
    for stage in ["simgen", "estimate", "train", "predict", "evaluate", "sweep", "verify-theory"] {
        let out = Command::new(env!("CARGO_BIN_EXE_odflow"))
            .args([stage, "--config", cfg.to_str().unwrap(), "--threads", threads])
            .output()
            .unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "config.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn criterion_11_cli_determinism() {
    let t = Instant::now();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = run_chain(dirs[0].path(), "1");
    let b = run_chain(dirs[1].path(), "1");
    let c = run_chain(dirs[2].path(), "4");
    let differing = |x: &BTreeMap<String, Vec<u8>>, y: &BTreeMap<String, Vec<u8>>| {
        x.keys().chain(y.keys()).filter(|k| x.get(*k) != y.get(*k)).cloned().collect::<std::collections::BTreeSet<_>>()
    };
    let (rerun, threads) = (differing(&a, &b), differing(&a, &c));
    let pass = a.len() >= 16 && rerun.is_empty() && threads.is_empty();
    report(
        11,
        "byte-identical CLI outputs",
        pass,
        format!("{} files; rerun differs in {rerun:?}; --threads 4 vs 1 differs in {threads:?}", a.len()),
        t.elapsed(),
    );
    assert!(pass);
}
