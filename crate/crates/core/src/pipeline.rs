//! Two-stage prediction: a normal-flow model, then an incident adjustment
//! gated on the predicted placebo p-value of each cell.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, build_training_table};
use crate::learners::{self, Dataset, LearnerConfig, ModelKind, RegressionModel};
use crate::network::StationGraph;
use crate::numeric::KahanSum;
use crate::panel::{self, IncidentRecord, OdPanel};
use crate::placebo::CausalEffectEstimate;
#[allow(unused_imports)]
use num_traits::Float;

pub const NORMAL_FEATURE_NAMES: [&str; 6] = ["lag1", "lag2", "interval", "is_weekend", "is_sunny", "od_mean_flow"];

/// Minimum number of incident-free days for the normal model.
pub const MIN_CLEAN_DAYS: usize = 7;

/// Rows with truth below this are left out of every metric.
pub const MIN_EVAL_FLOW: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Placebo p-value cutoff for effect-model training rows.
    pub p1: f64,
    /// Cells with predicted p-value at or below this are adjusted.
    pub p2: f64,
    pub normal_kind: ModelKind,
    pub effect_kind: ModelKind,
    pub prob_kind: ModelKind,
    /// Only ODs with an endpoint within this many hops of the incident
    /// stations are scored. `None` scores every OD.
    pub od_reach: Option<usize>,
    /// The latest incidents (by day, then start) held out for prediction.
    pub n_test_incidents: usize,
    /// Value of the threshold not being swept.
    pub sweep_hold: f64,
    pub sweep_p1: Vec<f64>,
    pub sweep_p2: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            p1: 0.05,
            p2: 0.1,
            normal_kind: ModelKind::Forest,
            effect_kind: ModelKind::Forest,
            prob_kind: ModelKind::Gbdt,
            od_reach: None,
            n_test_incidents: 1,
            sweep_hold: 0.05,
            sweep_p1: vec![0.0, 0.02, 0.05, 0.1, 0.3, 1.0],
            sweep_p2: vec![0.0, 0.05, 0.1, 0.3, 0.6, 1.0],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p1", self.p1), ("p2", self.p2), ("sweep_hold", self.sweep_hold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(alloc::format!("pipeline.{name} must lie in [0,1], got {v}")));
            }
        }
        if let Some(v) = self.sweep_p1.iter().chain(&self.sweep_p2).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(alloc::format!("sweep grid values must lie in [0,1], got {v}")));
        }
        Ok(())
    }

    /// Probability threshold on the affectedness score `1 - p`.
    pub fn score_threshold(&self) -> f64 {
        1.0 - self.p2
    }
}

/// Mean flow per (od, interval) over `days`, row-major by od.
pub fn od_interval_means(panel: &OdPanel, days: &[usize]) -> Vec<f64> {
    let n_int = panel.n_intervals();
    let mut out = alloc::vec![0.0; panel.n_ods() * n_int];
    if days.is_empty() {
        return out;
    }
    for od in 0..panel.n_ods() {
        for (k, slot) in out[od * n_int..(od + 1) * n_int].iter_mut().enumerate() {
            let mut acc = KahanSum::new();
            for &d in days {
                acc.add(panel.flow(od, d, k));
            }
            *slot = acc.total() / days.len() as f64;
        }
    }
    out
}

/// Normal-model features of one cell; `interval` must be at least 2.
pub fn normal_row(panel: &OdPanel, means: &[f64], od: usize, day: usize, interval: usize) -> Result<[f64; 6]> {
    panel.check_cell(od, day, interval)?;
    if interval < 2 {
        return Err(Error::InsufficientHistory { interval, required: 2 });
    }
    let meta = &panel.day_meta()[day];
    Ok([
        panel.flow(od, day, interval - 1),
        panel.flow(od, day, interval - 2),
        interval as f64,
        if meta.is_weekend { 1.0 } else { 0.0 },
        if meta.is_sunny { 1.0 } else { 0.0 },
        means[od * panel.n_intervals() + interval],
    ])
}

fn normal_names() -> Vec<String> {
    NORMAL_FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Training table of the normal model: every cell of every incident-free
/// day from interval 2 on.
pub fn normal_dataset(panel: &OdPanel, incidents: &[IncidentRecord]) -> Result<Dataset> {
    let clean = panel::clean_days(panel, incidents);
    if clean.len() < MIN_CLEAN_DAYS {
        return Err(Error::domain(alloc::format!(
            "normal model needs at least {MIN_CLEAN_DAYS} incident-free days, found {}",
            clean.len()
        )));
    }
    let means = od_interval_means(panel, &clean);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for od in 0..panel.n_ods() {
        for &day in &clean {
            for k in 2..panel.n_intervals() {
                x.extend_from_slice(&normal_row(panel, &means, od, day, k)?);
                y.push(panel.flow(od, day, k));
            }
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Dataset::from_flat(x, NORMAL_FEATURE_NAMES.len(), y, normal_names())
}

pub fn train_normal(panel: &OdPanel, incidents: &[IncidentRecord], kind: ModelKind, config: &LearnerConfig) -> Result<RegressionModel> {
    let data = normal_dataset(panel, incidents)?;
    let mut model = learners::fit(kind, &data, config)?;
    model.clamp = Some((0.0, f64::MAX));
    Ok(model)
}

/// Moments entering the optimal adjustment threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremInputs {
    /// E f(x)^2
    pub e_f2: f64,
    /// E fhat(x)^2
    pub e_fhat2: f64,
    /// E (fhat(x) - f(x))^2
    pub e_sq_err: f64,
}

impl TheoremInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_f2 >= 0.0 && self.e_fhat2 >= 0.0 && self.e_sq_err >= 0.0) {
            return Err(Error::domain("moments must be non-negative"));
        }
        let bound = self.e_f2 + self.e_fhat2 + 2.0 * (self.e_f2 * self.e_fhat2).sqrt();
        if self.e_sq_err > bound * (1.0 + 1e-12) {
            return Err(Error::domain("squared error exceeds the Cauchy-Schwarz bound"));
        }
        Ok(())
    }

    /// `E f^2 + E fhat^2 - E (fhat - f)^2`, twice `E f fhat`.
    pub fn denominator(&self) -> f64 {
        self.e_f2 + self.e_fhat2 - self.e_sq_err
    }

    /// Sample moments of paired (f, fhat) values.
    pub fn from_samples(f: &[f64], fhat: &[f64]) -> Result<Self> {
        if f.len() != fhat.len() {
            return Err(Error::Shape { expected: f.len(), got: fhat.len() });
        }
        if f.is_empty() {
            return Err(Error::domain("no samples"));
        }
        let (mut a, mut b, mut c) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
        for (&y, &yh) in f.iter().zip(fhat) {
            a.add(y * y);
            b.add(yh * yh);
            c.add((yh - y) * (yh - y));
        }
        let n = f.len() as f64;
        Ok(Self { e_f2: a.total() / n, e_fhat2: b.total() / n, e_sq_err: c.total() / n })
    }
}

/// Risk-minimizing probability threshold, clamped to `[0, 1]`.
pub fn optimal_threshold(inputs: &TheoremInputs) -> Result<f64> {
    inputs.validate()?;
    let den = inputs.denominator();
    if den <= 1e-12 {
        return Err(Error::DegenerateThreshold(den));
    }
    Ok((inputs.e_fhat2 / den).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Rows that passed the truth filter.
    pub n: usize,
}

/// MAE, RMSE and MAPE over rows with `truth >= 2`.
pub fn evaluate(predicted: &[f64], truth: &[f64]) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape { expected: truth.len(), got: predicted.len() });
    }
    let (mut abs, mut sq, mut pct) = (KahanSum::new(), KahanSum::new(), KahanSum::new());
    let mut n = 0usize;
    for (&p, &y) in predicted.iter().zip(truth) {
        if !(y >= MIN_EVAL_FLOW) {
            continue;
        }
        let e = (p - y).abs();
        abs.add(e);
        sq.add(e * e);
        pct.add(e / y);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let m = n as f64;
    Ok(Metrics { mae: abs.total() / m, rmse: (sq.total() / m).sqrt(), mape: pct.total() / m, n })
}

/// Models used at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub normal: RegressionModel,
    pub effect: RegressionModel,
    pub prob: RegressionModel,
}

impl Models {
    pub fn check_schemas(&self) -> Result<()> {
        let want = |m: &RegressionModel, n: usize| {
            if m.feature_names.len() == n {
                Ok(())
            } else {
                Err(Error::Shape { expected: n, got: m.feature_names.len() })
            }
        };
        want(&self.normal, NORMAL_FEATURE_NAMES.len())?;
        want(&self.effect, features::FEATURE_NAMES.len())?;
        want(&self.prob, features::FEATURE_NAMES.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub od: usize,
    pub day: usize,
    pub interval: usize,
    pub normal: f64,
    /// Predicted placebo p-value; `None` when the OD cannot reach the
    /// incident stations.
    pub p_hat: Option<f64>,
    /// Passed the gate.
    pub adjusted: bool,
    /// Zero for ungated cells.
    pub adjustment: f64,
    pub final_flow: f64,
    pub truth: f64,
    /// Placebo-significant cell.
    pub influenced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub rows: Vec<PredictionRow>,
    pub metrics_all: Metrics,
    pub metrics_influenced: Option<Metrics>,
    /// The same metrics for the normal predictions alone.
    pub baseline_all: Metrics,
    pub baseline_influenced: Option<Metrics>,
    pub n_adjusted: usize,
}

impl PredictionReport {
    pub fn from_rows(rows: Vec<PredictionRow>) -> Result<Self> {
        let pick = |only_influenced: bool, final_flow: bool| -> Result<Metrics> {
            let (p, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| !only_influenced || r.influenced)
                .map(|r| (if final_flow { r.final_flow } else { r.normal }, r.truth))
                .unzip();
            evaluate(&p, &y)
        };
        let optional = |res: Result<Metrics>| match res {
            Ok(m) => Ok(Some(m)),
            Err(Error::EmptyEvaluation) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            metrics_all: pick(false, true)?,
            metrics_influenced: optional(pick(true, true))?,
            baseline_all: pick(false, false)?,
            baseline_influenced: optional(pick(true, false))?,
            n_adjusted: rows.iter().filter(|r| r.adjusted).count(),
            rows,
        })
    }
}

/// Whether a cell with predicted p-value `p_hat` is adjusted.
pub fn gated(p_hat: f64, p2: f64) -> bool {
    p2 > 0.0 && p_hat <= p2
}

/// ODs scored for an incident.
pub fn scope_ods(panel: &OdPanel, graph: &StationGraph, incident: &IncidentRecord, reach: Option<usize>) -> Result<Vec<usize>> {
    let Some(reach) = reach else {
        return Ok((0..panel.n_ods()).collect());
    };
    let mut out = Vec::new();
    for (i, od) in panel.od_pairs().iter().enumerate() {
        let o = graph.shortest_hops(&od.origin, &incident.affected_stations)?;
        let d = graph.shortest_hops(&od.destination, &incident.affected_stations)?;
        if o.into_iter().chain(d).min().is_some_and(|h| h <= reach) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Holds out the latest `n_test` incidents by (day, start, id).
pub fn split_incidents(incidents: &[IncidentRecord], n_test: usize) -> (Vec<IncidentRecord>, Vec<IncidentRecord>) {
    let mut sorted = incidents.to_vec();
    sorted.sort_by(|a, b| {
        a.day_index
            .cmp(&b.day_index)
            .then(a.start_min.total_cmp(&b.start_min))
            .then_with(|| a.incident_id.cmp(&b.incident_id))
    });
    let cut = sorted.len().saturating_sub(n_test);
    let test = sorted.split_off(cut);
    (sorted, test)
}

/// Per-cell predictions for one incident. `incidents` lists every known
/// incident; their days are excluded from the normal model's mean feature.
#[allow(clippy::too_many_arguments)]
pub fn predict_cells(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    incident: &IncidentRecord,
    models: &Models,
    graph: &StationGraph,
    ods: &[usize],
    p2: f64,
    post_window_min: f64,
    influenced: &BTreeSet<(usize, usize, usize)>,
) -> Result<Vec<PredictionRow>> {
    models.check_schemas()?;
    let means = od_interval_means(panel, &panel::clean_days(panel, incidents));
    let day = incident.day_index;
    let window = incident.window_intervals(post_window_min, panel.n_intervals());
    let mut rows = Vec::new();
    for &od in ods {
        let pair = panel.od_pairs().get(od).ok_or(Error::Index { index: od, len: panel.n_ods() })?;
        for k in window.clone().filter(|&k| k >= 2) {
            let normal = models.normal.predict_row(&normal_row(panel, &means, od, day, k)?)?.max(0.0);
            let (p_hat, adjusted, adjustment) = match features::build_features(incident, graph, &pair.origin, &pair.destination, k, normal) {
                Ok(f) => {
                    let x = f.to_array();
                    let p_hat = models.prob.predict_row(&x)?;
                    let adjusted = gated(p_hat, p2);
                    let adjustment = if adjusted {
                        let e = models.effect.predict_row(&x)?;
                        if normal + e < 0.0 { -normal } else { e }
                    } else {
                        0.0
                    };
                    (Some(p_hat), adjusted, adjustment)
                }
                Err(Error::Unreachable { .. }) => (None, false, 0.0),
                Err(e) => return Err(e),
            };
            rows.push(PredictionRow {
                od,
                day,
                interval: k,
                normal,
                p_hat,
                adjusted,
                adjustment,
                final_flow: normal + adjustment,
                truth: panel.flow(od, day, k),
                influenced: influenced.contains(&(od, day, k)),
            });
        }
    }
    Ok(rows)
}

/// Cells marked significant by the placebo test.
pub fn influenced_cells(estimates: &[CausalEffectEstimate]) -> BTreeSet<(usize, usize, usize)> {
    estimates.iter().filter(|e| e.significant).map(|e| (e.od, e.day, e.interval)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn predict_with_incident(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    incident: &IncidentRecord,
    models: &Models,
    graph: &StationGraph,
    config: &PipelineConfig,
    post_window_min: f64,
    estimates: &[CausalEffectEstimate],
) -> Result<PredictionReport> {
    config.validate()?;
    let ods = scope_ods(panel, graph, incident, config.od_reach)?;
    let rows = predict_cells(panel, incidents, incident, models, graph, &ods, config.p2, post_window_min, &influenced_cells(estimates))?;
    PredictionReport::from_rows(rows)
}

/// Effect model on rows with `p <= p1` and the p-value model on every row.
pub fn train_effect_models(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    graph: &StationGraph,
    estimates: &[CausalEffectEstimate],
    config: &PipelineConfig,
    learner: &LearnerConfig,
    post_window_min: f64,
) -> Result<(RegressionModel, RegressionModel)> {
    let tables = build_training_table(estimates, incidents, graph, panel, config.p1, post_window_min)?;
    let effect = learners::fit(config.effect_kind, &tables.effect, learner)?;
    let prob = learners::fit_affect_probability(config.prob_kind, &tables.p_value, learner)?;
    Ok((effect, prob))
}

/// Everything a threshold sweep needs besides the grid.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub panel: &'a OdPanel,
    /// All known incidents.
    pub incidents: &'a [IncidentRecord],
    pub graph: &'a StationGraph,
    /// Placebo estimates of the training incidents.
    pub train_estimates: &'a [CausalEffectEstimate],
    /// Held-out incidents with their placebo estimates.
    pub test: &'a [(IncidentRecord, Vec<CausalEffectEstimate>)],
    pub normal: &'a RegressionModel,
    pub prob: &'a RegressionModel,
    pub post_window_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p1: f64,
    pub p2: f64,
    pub mae_all: f64,
    pub mae_influenced: Option<f64>,
    pub rmse_all: f64,
    pub rmse_influenced: Option<f64>,
}

/// Grid points: each p1 with p2 held, then each p2 with p1 held. Repeated
/// pairs are kept once, first occurrence wins.
pub fn sweep_points(grid_p1: &[f64], grid_p2: &[f64], hold: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for pt in grid_p1.iter().map(|&p1| (p1, hold)).chain(grid_p2.iter().map(|&p2| (hold, p2))) {
        if !out.iter().any(|q| q.0.to_bits() == pt.0.to_bits() && q.1.to_bits() == pt.1.to_bits()) {
            out.push(pt);
        }
    }
    out
}

/// Retrains the effect model at `p1` and scores the held-out incidents at
/// gate `p2`. The p-value model is trained once and shared.
pub fn sweep_point(inputs: &SweepInputs, p1: f64, p2: f64, config: &PipelineConfig, learner: &LearnerConfig) -> Result<SweepRow> {
    let cfg = PipelineConfig { p1, p2, ..config.clone() };
    cfg.validate()?;
    let tables = build_training_table(inputs.train_estimates, inputs.incidents, inputs.graph, inputs.panel, p1, inputs.post_window_min)?;
    let models = Models {
        normal: inputs.normal.clone(),
        effect: learners::fit(cfg.effect_kind, &tables.effect, learner)?,
        prob: inputs.prob.clone(),
    };
    let mut rows = Vec::new();
    for (incident, estimates) in inputs.test {
        let ods = scope_ods(inputs.panel, inputs.graph, incident, cfg.od_reach)?;
        rows.extend(predict_cells(
            inputs.panel,
            inputs.incidents,
            incident,
            &models,
            inputs.graph,
            &ods,
            p2,
            inputs.post_window_min,
            &influenced_cells(estimates),
        )?);
    }
    let report = PredictionReport::from_rows(rows)?;
    Ok(SweepRow {
        p1,
        p2,
        mae_all: report.metrics_all.mae,
        mae_influenced: report.metrics_influenced.map(|m| m.mae),
        rmse_all: report.metrics_all.rmse,
        rmse_influenced: report.metrics_influenced.map(|m| m.rmse),
    })
}

pub fn sweep_thresholds(inputs: &SweepInputs, grid_p1: &[f64], grid_p2: &[f64], config: &PipelineConfig, learner: &LearnerConfig) -> Result<Vec<SweepRow>> {
    if grid_p1.is_empty() && grid_p2.is_empty() {
        return Err(Error::Config("sweep grids are empty".into()));
    }
    sweep_points(grid_p1, grid_p2, config.sweep_hold)
        .into_iter()
        .map(|(p1, p2)| sweep_point(inputs, p1, p2, config, learner))
        .collect()
}
