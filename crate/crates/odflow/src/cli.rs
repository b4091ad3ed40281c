//! The `odflow` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use odflow_core::pipeline::{self, Models, PredictionRow, SweepInputs};
use odflow_core::{features, learners, simgen, CausalEffectEstimate, IncidentRecord, OdPanel, PredictionReport, StationGraph};

use crate::config::RunConfig;
use crate::{drivers, io};

pub const FLOWS: &str = "flows.csv";
pub const META: &str = "meta.csv";
pub const NETWORK: &str = "network.csv";
pub const INCIDENTS: &str = "incidents.csv";
pub const GROUND_TRUTH: &str = "ground_truth_effects.csv";
pub const EFFECTS: &str = "effects.csv";
pub const MODEL_NORMAL: &str = "model_normal.json";
pub const MODEL_EFFECT: &str = "model_effect.json";
pub const MODEL_PROB: &str = "model_prob.json";
pub const TRAINING_EFFECT: &str = "training_effect.csv";
pub const TRAINING_P_VALUE: &str = "training_p_value.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const METRICS: &str = "metrics.json";
pub const SWEEP: &str = "sweep.csv";
pub const PARAM_LOSS: &str = "theorem31.csv";
pub const RISK: &str = "theorem32.csv";

#[derive(Debug, Parser)]
#[command(name = "odflow", version, about = "Incident-aware OD passenger-flow prediction")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pipeline.p2=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic network, panel and incidents with ground truth.
    Simgen,
    /// Placebo-tested causal effects of every incident.
    Estimate,
    /// Train the normal, effect and p-value models.
    Train,
    /// Predict the held-out incidents.
    Predict,
    /// Score predictions into metrics.json.
    Evaluate,
    /// Error over the p1 and p2 threshold grids.
    Sweep,
    /// Monte Carlo checks of the threshold results.
    VerifyTheory,
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// domain or IO error, 2 on a usage or configuration error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let command = Cli::command().after_long_help(format!("Config defaults:\n{}", RunConfig::defaults_json()));
    let cli = match command.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let Some(path) = cli.config.as_deref() else {
        eprintln!("error: --config <FILE> is required");
        return 2;
    };
    let config = match RunConfig::load(Some(path), &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let threads = cli.threads.map(usize::from);
    match drivers::with_threads(threads, || dispatch(&cli.command, &config)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: &Command, config: &RunConfig) -> anyhow::Result<()> {
    match command {
        Command::Simgen => run_simgen(config),
        Command::Estimate => run_estimate(config),
        Command::Train => run_train(config),
        Command::Predict => run_predict(config),
        Command::Evaluate => run_evaluate(config),
        Command::Sweep => run_sweep(config),
        Command::VerifyTheory => run_verify_theory(config),
    }
}

fn input(config: &RunConfig, name: &str) -> PathBuf {
    config.paths.input_dir.join(name)
}

fn output(config: &RunConfig, name: &str) -> PathBuf {
    config.paths.output_dir.join(name)
}

struct Data {
    panel: OdPanel,
    graph: StationGraph,
    incidents: Vec<IncidentRecord>,
}

fn load_data(config: &RunConfig) -> anyhow::Result<Data> {
    Ok(Data {
        panel: io::load_panel(&input(config, FLOWS), &input(config, META))?,
        graph: io::load_network(&input(config, NETWORK))?,
        incidents: io::load_incidents(&input(config, INCIDENTS))?,
    })
}

fn load_estimates(config: &RunConfig, panel: &OdPanel) -> anyhow::Result<Vec<CausalEffectEstimate>> {
    Ok(io::load_effects(&input(config, EFFECTS), panel, config.placebo.alpha)?)
}

fn on_day(estimates: &[CausalEffectEstimate], incidents: &[IncidentRecord]) -> Vec<CausalEffectEstimate> {
    estimates.iter().filter(|e| incidents.iter().any(|i| i.day_index == e.day)).cloned().collect()
}

fn test_split(data: &Data, config: &RunConfig) -> anyhow::Result<(Vec<IncidentRecord>, Vec<IncidentRecord>)> {
    let n = config.pipeline.n_test_incidents;
    if n == 0 || n >= data.incidents.len() {
        bail!("pipeline.n_test_incidents must lie in [1, {}) for {} incidents", data.incidents.len(), data.incidents.len());
    }
    Ok(pipeline::split_incidents(&data.incidents, n))
}

fn load_models(config: &RunConfig) -> anyhow::Result<Models> {
    Ok(Models {
        normal: io::load_model(&input(config, MODEL_NORMAL))?,
        effect: io::load_model(&input(config, MODEL_EFFECT))?,
        prob: io::load_model(&input(config, MODEL_PROB))?,
    })
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    io::write_atomic(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_simgen(config: &RunConfig) -> anyhow::Result<()> {
    let s = simgen::scenario(&config.simgen.spec, &config.simgen.scenario)?;
    let (flows, meta) = io::panel_csv(&s.panel);
    write(&output(config, FLOWS), &flows)?;
    write(&output(config, META), &meta)?;
    write(&output(config, NETWORK), &io::network_csv(&s.graph))?;
    write(&output(config, INCIDENTS), &io::incidents_csv(&s.incidents))?;
    write(&output(config, GROUND_TRUTH), &io::ground_truth_csv(&s.panel, &s.effects))
}

fn run_estimate(config: &RunConfig) -> anyhow::Result<()> {
    let data = load_data(config)?;
    let estimates = drivers::estimate_effects(&data.panel, &data.incidents, &data.graph, config.pipeline.od_reach, &config.syncontrol, &config.placebo)
        .context("placebo estimation")?;
    write(&output(config, EFFECTS), &io::effects_csv(&data.panel, &estimates))
}

fn run_train(config: &RunConfig) -> anyhow::Result<()> {
    let data = load_data(config)?;
    let estimates = load_estimates(config, &data.panel)?;
    let (train, _) = test_split(&data, config)?;
    let window = config.placebo.post_incident_window_min;
    let normal = pipeline::train_normal(&data.panel, &data.incidents, config.pipeline.normal_kind, &config.learners).context("normal model")?;
    let tables = features::build_training_table(&on_day(&estimates, &train), &train, &data.graph, &data.panel, config.pipeline.p1, window)?;
    let effect = learners::fit(config.pipeline.effect_kind, &tables.effect, &config.learners).context("effect model")?;
    let prob = learners::fit_affect_probability(config.pipeline.prob_kind, &tables.p_value, &config.learners).context("p-value model")?;
    write(&output(config, TRAINING_EFFECT), &io::training_table_csv(&tables.effect))?;
    write(&output(config, TRAINING_P_VALUE), &io::training_table_csv(&tables.p_value))?;
    write(&output(config, MODEL_NORMAL), &io::json_bytes(&normal))?;
    write(&output(config, MODEL_EFFECT), &io::json_bytes(&effect))?;
    write(&output(config, MODEL_PROB), &io::json_bytes(&prob))
}

fn run_predict(config: &RunConfig) -> anyhow::Result<()> {
    let data = load_data(config)?;
    let estimates = load_estimates(config, &data.panel)?;
    let models = load_models(config)?;
    let (_, test) = test_split(&data, config)?;
    let mut rows = Vec::new();
    for inc in &test {
        let report = pipeline::predict_with_incident(
            &data.panel,
            &data.incidents,
            inc,
            &models,
            &data.graph,
            &config.pipeline,
            config.placebo.post_incident_window_min,
            &on_day(&estimates, std::slice::from_ref(inc)),
        )?;
        rows.extend(report.rows);
    }
    write(&output(config, PREDICTIONS), &io::predictions_csv(&data.panel, &rows))
}

fn run_evaluate(config: &RunConfig) -> anyhow::Result<()> {
    let panel = io::load_panel(&input(config, FLOWS), &input(config, META))?;
    let influenced = pipeline::influenced_cells(&load_estimates(config, &panel)?);
    let rows = io::load_predictions(&input(config, PREDICTIONS), &panel)?
        .into_iter()
        .map(|r| PredictionRow {
            od: r.od,
            day: r.day,
            interval: r.interval,
            normal: r.normal,
            p_hat: None,
            adjusted: r.adjusted,
            adjustment: r.adjustment,
            final_flow: r.final_flow,
            truth: r.truth,
            influenced: influenced.contains(&(r.od, r.day, r.interval)),
        })
        .collect();
    let report = PredictionReport::from_rows(rows)?;
    write(&output(config, METRICS), &io::json_bytes(&io::MetricsFile::from(&report)))
}

fn run_sweep(config: &RunConfig) -> anyhow::Result<()> {
    let data = load_data(config)?;
    let estimates = load_estimates(config, &data.panel)?;
    let (train, test) = test_split(&data, config)?;
    let train_estimates = on_day(&estimates, &train);
    let test: Vec<(IncidentRecord, Vec<CausalEffectEstimate>)> =
        test.into_iter().map(|inc| { let e = on_day(&estimates, std::slice::from_ref(&inc)); (inc, e) }).collect();
    let normal = io::load_model(&input(config, MODEL_NORMAL))?;
    let prob = io::load_model(&input(config, MODEL_PROB))?;
    let inputs = SweepInputs {
        panel: &data.panel,
        incidents: &data.incidents,
        graph: &data.graph,
        train_estimates: &train_estimates,
        test: &test,
        normal: &normal,
        prob: &prob,
        post_window_min: config.placebo.post_incident_window_min,
    };
    let rows = drivers::sweep(&inputs, &config.pipeline, &config.learners)?;
    write(&output(config, SWEEP), &io::sweep_csv(&rows))
}

fn run_verify_theory(config: &RunConfig) -> anyhow::Result<()> {
    let rows = drivers::param_loss_grid(&config.theory.param_loss, config.seed)?;
    let risks = drivers::risk_cases(&config.theory.risk, config.seed)?;
    write(&output(config, PARAM_LOSS), &io::param_loss_csv(&rows))?;
    let cases: Vec<(&str, &odflow_core::theory::AdjustmentRisk)> = drivers::RISK_CASES.iter().copied().zip(risks.iter()).collect();
    write(&output(config, RISK), &io::risk_csv(&cases))
}
