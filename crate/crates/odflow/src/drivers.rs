//! Parallel drivers. Work items carry their own seeds and results are
//! collected in input order, so output does not depend on the thread count.

use odflow_core::pipeline::{self, SweepInputs, SweepRow};
use odflow_core::placebo;
use odflow_core::theory::{self, AdjustmentRisk, AdjustmentSpec, NoisyLinearSpec};
use odflow_core::{rng, CausalEffectEstimate, IncidentRecord, LearnerConfig, OdPanel, PipelineConfig, PlaceboConfig, StationGraph, SynthConfig};
use rayon::prelude::*;

use crate::config::{ParamLossConfig, RiskConfig};
use crate::io::ParamLossRow;

/// Runs `f` on a pool of `threads` workers (`None`: rayon's default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, rayon::ThreadPoolBuildError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

/// Placebo-tested effects of every incident, in incident then cell order.
pub fn estimate_effects(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    graph: &StationGraph,
    od_reach: Option<usize>,
    synth: &SynthConfig,
    config: &PlaceboConfig,
) -> odflow_core::Result<Vec<CausalEffectEstimate>> {
    config.validate()?;
    let mut cells = Vec::new();
    for inc in incidents {
        let ods = pipeline::scope_ods(panel, graph, inc, od_reach)?;
        cells.extend(placebo::effect_cells(panel, inc, &ods, synth, config));
    }
    cells
        .into_par_iter()
        .map(|(od, day, k)| placebo::test_cell(panel, incidents, od, day, k, synth, config))
        .collect()
}

pub fn sweep(inputs: &SweepInputs, config: &PipelineConfig, learner: &LearnerConfig) -> odflow_core::Result<Vec<SweepRow>> {
    if config.sweep_p1.is_empty() && config.sweep_p2.is_empty() {
        return Err(odflow_core::Error::Config("sweep grids are empty".into()));
    }
    pipeline::sweep_points(&config.sweep_p1, &config.sweep_p2, config.sweep_hold)
        .into_par_iter()
        .map(|(p1, p2)| pipeline::sweep_point(inputs, p1, p2, config, learner))
        .collect()
}

/// Every (p, sigma1, sigma2) point of the grid; point `i` uses seed
/// `derive(seed, [31, i])`.
pub fn param_loss_grid(config: &ParamLossConfig, seed: u64) -> odflow_core::Result<Vec<ParamLossRow>> {
    let mut specs = Vec::new();
    for &p in &config.p_grid {
        for &sigma1 in &config.sigma1_grid {
            for &sigma2 in &config.sigma2_grid {
                specs.push(NoisyLinearSpec { beta: config.beta.clone(), p, sigma1, sigma2, sigma_x: config.sigma_x, n: config.n, trials: config.trials });
            }
        }
    }
    specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let emp = theory::empirical_param_loss(&spec, rng::derive(seed, &[31, i as u64]))?;
            let closed = theory::closed_form_param_loss(&spec);
            let linear = theory::closed_form_param_loss_linear(&spec);
            Ok(ParamLossRow {
                p: spec.p,
                sigma1: spec.sigma1,
                sigma2: spec.sigma2,
                empirical: emp.loss,
                closed_form: closed,
                rel_err: (emp.loss - closed).abs() / closed,
                closed_form_linear: linear,
                rel_err_linear: (emp.loss - linear).abs() / linear,
                resampled: emp.resampled,
            })
        })
        .collect()
}

pub const RISK_CASES: [&str; 2] = ["fhat_equals_f", "fhat_half_f"];

/// Risk curves of the two reference cases: `fhat = f = x` and
/// `f = x, fhat = x / 2`.
pub fn risk_cases(config: &RiskConfig, seed: u64) -> odflow_core::Result<[AdjustmentRisk; 2]> {
    let grid = theory::unit_grid(config.step);
    let exact = AdjustmentSpec { f: |x: f64| x, fhat: |x: f64| x, sigma1: config.sigma1, sigma2: config.sigma2, p_grid: grid.clone(), draws: config.draws };
    let half = AdjustmentSpec { f: |x: f64| x, fhat: |x: f64| 0.5 * x, sigma1: config.sigma1, sigma2: config.sigma2, p_grid: grid, draws: config.draws };
    let (a, b) = rayon::join(
        || theory::empirical_adjustment_risk(&exact, rng::derive(seed, &[32, 0])),
        || theory::empirical_adjustment_risk(&half, rng::derive(seed, &[32, 1])),
    );
    Ok([a?, b?])
}
