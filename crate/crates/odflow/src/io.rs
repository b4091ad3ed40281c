//! CSV and JSON file formats.
//!
//! Readers name the offending line on parse errors. Writers build the whole
//! file in memory and publish it with [`write_atomic`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use odflow_core::features::FEATURE_NAMES;
use odflow_core::learners::{Dataset, RegressionModel};
use odflow_core::panel::{DayMeta, OdPair, PanelBuilder};
use odflow_core::pipeline::{PredictionReport, PredictionRow, SweepRow};
use odflow_core::simgen::InjectedEffect;
use odflow_core::theory::AdjustmentRisk;
use odflow_core::{CausalEffectEstimate, IncidentRecord, OdPanel, StationGraph};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}")]
    Domain { path: PathBuf, source: odflow_core::Error },
    #[error("{path}:{line}")]
    Row { path: PathBuf, line: u64, source: odflow_core::Error },
}

pub type Result<T> = std::result::Result<T, IoError>;

pub const FLOWS_HEADER: [&str; 6] = ["od_id", "origin", "destination", "day_index", "interval_index", "count"];
pub const META_HEADER: [&str; 4] = ["day_index", "date", "is_weekend", "is_sunny"];
pub const INCIDENTS_HEADER: [&str; 10] = [
    "incident_id",
    "line_id",
    "affected_stations",
    "day_index",
    "start_min",
    "end_min",
    "max_delay",
    "delay_5_num",
    "cancel_num",
    "evacuate_num",
];
pub const EFFECTS_HEADER: [&str; 7] = ["od_id", "day_index", "interval_index", "observed", "counterfactual", "effect", "p_value"];
pub const NETWORK_HEADER: [&str; 3] = ["line_id", "seq", "station_id"];
pub const TRUTH_HEADER: [&str; 4] = ["od_id", "day_index", "interval_index", "true_effect"];
pub const PREDICTIONS_HEADER: [&str; 8] = ["od_id", "day_index", "interval_index", "normal", "adjustment", "final", "truth", "adjusted"];
pub const SWEEP_HEADER: [&str; 6] = ["p1", "p2", "mae_all", "mae_influenced", "rmse_all", "rmse_influenced"];

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| IoError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(bytes).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io)
}

struct Csv {
    path: PathBuf,
    reader: csv::Reader<fs::File>,
}

impl Csv {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = fs::File::open(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let found = reader.headers().map_err(|e| parse(path, 1, e.to_string()))?;
        if found.iter().ne(header.iter().copied()) {
            return Err(parse(path, 1, format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(","))));
        }
        Ok(Self { path: path.to_path_buf(), reader })
    }

    /// Visits every record with its 1-based line number.
    fn each(mut self, mut f: impl FnMut(&Row) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            let line = self.reader.position().line();
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(()),
                Ok(true) => {
                    let line = record.position().map_or(line, |p| p.line());
                    f(&Row { path: &self.path, line, record: &record })?;
                }
                Err(e) => {
                    let line = e.position().map_or(line, |p| p.line());
                    return Err(parse(&self.path, line, e.to_string()));
                }
            }
        }
    }
}

struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn str(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, i: usize, what: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.str(i).trim().parse().map_err(|e| self.error(format!("bad {what} `{}`: {e}", self.str(i))))
    }

    fn flag(&self, i: usize, what: &str) -> Result<bool> {
        match self.str(i).trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.error(format!("{what} must be 0 or 1, got `{other}`"))),
        }
    }

    fn error(&self, msg: String) -> IoError {
        parse(self.path, self.line, msg)
    }

    fn domain(&self, source: odflow_core::Error) -> IoError {
        IoError::Row { path: self.path.to_path_buf(), line: self.line, source }
    }
}

fn parse(path: &Path, line: u64, msg: String) -> IoError {
    IoError::Parse { path: path.to_path_buf(), line, msg }
}

fn domain(path: &Path, source: odflow_core::Error) -> IoError {
    IoError::Domain { path: path.to_path_buf(), source }
}

fn to_csv<R: AsRef<[u8]>>(header: &[&str], rows: impl IntoIterator<Item = Vec<R>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn bit(b: bool) -> String {
    if b { "1".into() } else { "0".into() }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn load_meta(path: &Path) -> Result<Vec<DayMeta>> {
    let mut days = Vec::new();
    Csv::open(path, &META_HEADER)?.each(|r| {
        days.push(DayMeta {
            day_index: r.parse(0, "day_index")?,
            date_label: r.str(1).to_string(),
            is_weekend: r.flag(2, "is_weekend")?,
            is_sunny: r.flag(3, "is_sunny")?,
        });
        Ok(())
    })?;
    days.sort_by_key(|d| d.day_index);
    if days.iter().enumerate().any(|(i, d)| d.day_index != i) {
        return Err(domain(path, odflow_core::Error::Domain("day_index values must be unique and contiguous from 0".into())));
    }
    Ok(days)
}

/// Loads a complete long-format panel. Row order does not matter.
pub fn load_panel(flows_path: &Path, meta_path: &Path) -> Result<OdPanel> {
    let days = load_meta(meta_path)?;
    struct Cell {
        line: u64,
        od: String,
        day: usize,
        interval: usize,
        count: f64,
    }
    let mut pairs: BTreeMap<String, OdPair> = BTreeMap::new();
    let mut cells = Vec::new();
    let mut n_intervals = 0;
    Csv::open(flows_path, &FLOWS_HEADER)?.each(|r| {
        let od_id = r.str(0).to_string();
        let pair = OdPair { od_id: od_id.clone(), origin: r.str(1).to_string(), destination: r.str(2).to_string() };
        match pairs.get(&od_id) {
            Some(p) if *p != pair => return Err(r.error(format!("od `{od_id}` has inconsistent stations"))),
            Some(_) => {}
            None => {
                pairs.insert(od_id.clone(), pair);
            }
        }
        let interval: usize = r.parse(4, "interval_index")?;
        n_intervals = n_intervals.max(interval + 1);
        cells.push(Cell { line: r.line, od: od_id, day: r.parse(3, "day_index")?, interval, count: r.parse(5, "count")? });
        Ok(())
    })?;
    let n_days = days.len();
    let mut builder = PanelBuilder::new(pairs.into_values().collect(), days, n_intervals);
    for c in cells {
        let od = builder.od_index(&c.od).expect("od collected above");
        if c.day >= n_days {
            return Err(parse(flows_path, c.line, format!("day_index {} has no meta row", c.day)));
        }
        builder.insert(od, c.day, c.interval, c.count).map_err(|source| IoError::Row { path: flows_path.to_path_buf(), line: c.line, source })?;
    }
    builder.finish().map_err(|e| domain(flows_path, e))
}

pub fn panel_csv(panel: &OdPanel) -> (Vec<u8>, Vec<u8>) {
    let mut rows = Vec::with_capacity(panel.flows().len());
    for (od, pair) in panel.od_pairs().iter().enumerate() {
        for day in 0..panel.n_days() {
            for k in 0..panel.n_intervals() {
                rows.push(vec![
                    pair.od_id.clone(),
                    pair.origin.clone(),
                    pair.destination.clone(),
                    day.to_string(),
                    k.to_string(),
                    panel.flow(od, day, k).to_string(),
                ]);
            }
        }
    }
    let meta = panel
        .day_meta()
        .iter()
        .map(|d| vec![d.day_index.to_string(), d.date_label.clone(), bit(d.is_weekend), bit(d.is_sunny)]);
    (to_csv(&FLOWS_HEADER, rows), to_csv(&META_HEADER, meta))
}

pub fn save_panel(panel: &OdPanel, flows_path: &Path, meta_path: &Path) -> Result<()> {
    let (flows, meta) = panel_csv(panel);
    write_atomic(flows_path, &flows)?;
    write_atomic(meta_path, &meta)
}

pub fn load_incidents(path: &Path) -> Result<Vec<IncidentRecord>> {
    let mut out = Vec::new();
    Csv::open(path, &INCIDENTS_HEADER)?.each(|r| {
        let stations: Vec<String> = r.str(2).split('|').filter(|s| !s.is_empty()).map(str::to_string).collect();
        let inc = IncidentRecord {
            incident_id: r.str(0).to_string(),
            line_id: r.str(1).to_string(),
            affected_stations: stations,
            day_index: r.parse(3, "day_index")?,
            start_min: r.parse(4, "start_min")?,
            end_min: r.parse(5, "end_min")?,
            max_delay: r.parse(6, "max_delay")?,
            delay_5_num: r.parse(7, "delay_5_num")?,
            cancel_num: r.parse(8, "cancel_num")?,
            evacuate_num: r.parse(9, "evacuate_num")?,
        };
        inc.validate().map_err(|e| r.domain(e))?;
        out.push(inc);
        Ok(())
    })?;
    Ok(out)
}

pub fn incidents_csv(incidents: &[IncidentRecord]) -> Vec<u8> {
    to_csv(
        &INCIDENTS_HEADER,
        incidents.iter().map(|i| {
            vec![
                i.incident_id.clone(),
                i.line_id.clone(),
                i.affected_stations.join("|"),
                i.day_index.to_string(),
                i.start_min.to_string(),
                i.end_min.to_string(),
                i.max_delay.to_string(),
                i.delay_5_num.to_string(),
                i.cancel_num.to_string(),
                i.evacuate_num.to_string(),
            ]
        }),
    )
}

pub fn load_network(path: &Path) -> Result<StationGraph> {
    let mut lines: BTreeMap<String, Vec<(i64, u64, String)>> = BTreeMap::new();
    Csv::open(path, &NETWORK_HEADER)?.each(|r| {
        lines.entry(r.str(0).to_string()).or_default().push((r.parse(1, "seq")?, r.line, r.str(2).to_string()));
        Ok(())
    })?;
    let mut ordered = Vec::with_capacity(lines.len());
    for (line, mut stops) in lines {
        stops.sort_by_key(|s| s.0);
        if let Some(w) = stops.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(parse(path, w[1].1, format!("line {line}: seq {} repeated", w[1].0)));
        }
        ordered.push((line, stops.into_iter().map(|s| s.2).collect()));
    }
    StationGraph::from_lines(ordered).map_err(|e| domain(path, e))
}

pub fn network_csv(graph: &StationGraph) -> Vec<u8> {
    let mut rows = Vec::new();
    for (line, stations) in graph.lines() {
        for (seq, s) in stations.iter().enumerate() {
            rows.push(vec![line.clone(), seq.to_string(), s.clone()]);
        }
    }
    to_csv(&NETWORK_HEADER, rows)
}

/// Rows sorted by (od, day, interval).
pub fn effects_csv(panel: &OdPanel, estimates: &[CausalEffectEstimate]) -> Vec<u8> {
    let mut sorted: Vec<&CausalEffectEstimate> = estimates.iter().collect();
    sorted.sort_by_key(|e| (e.od, e.day, e.interval));
    to_csv(
        &EFFECTS_HEADER,
        sorted.into_iter().map(|e| {
            vec![
                panel.od_pairs()[e.od].od_id.clone(),
                e.day.to_string(),
                e.interval.to_string(),
                e.observed.to_string(),
                e.counterfactual.to_string(),
                e.effect.to_string(),
                e.p_value.to_string(),
            ]
        }),
    )
}

pub fn save_effects(panel: &OdPanel, estimates: &[CausalEffectEstimate], path: &Path) -> Result<()> {
    write_atomic(path, &effects_csv(panel, estimates))
}

/// Significance is recomputed from `alpha`.
pub fn load_effects(path: &Path, panel: &OdPanel, alpha: f64) -> Result<Vec<CausalEffectEstimate>> {
    let mut out = Vec::new();
    Csv::open(path, &EFFECTS_HEADER)?.each(|r| {
        let od = panel.od_index(r.str(0)).ok_or_else(|| r.error(format!("unknown od `{}`", r.str(0))))?;
        let p_value: f64 = r.parse(6, "p_value")?;
        out.push(CausalEffectEstimate {
            od,
            day: r.parse(1, "day_index")?,
            interval: r.parse(2, "interval_index")?,
            observed: r.parse(3, "observed")?,
            counterfactual: r.parse(4, "counterfactual")?,
            effect: r.parse(5, "effect")?,
            p_value,
            significant: p_value <= alpha,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn ground_truth_csv(panel: &OdPanel, effects: &[InjectedEffect]) -> Vec<u8> {
    let mut sorted: Vec<&InjectedEffect> = effects.iter().collect();
    sorted.sort_by_key(|e| (e.od, e.day, e.interval));
    to_csv(
        &TRUTH_HEADER,
        sorted
            .into_iter()
            .map(|e| vec![panel.od_pairs()[e.od].od_id.clone(), e.day.to_string(), e.interval.to_string(), e.true_effect.to_string()]),
    )
}

pub fn load_ground_truth(path: &Path, panel: &OdPanel) -> Result<Vec<InjectedEffect>> {
    let mut out = Vec::new();
    Csv::open(path, &TRUTH_HEADER)?.each(|r| {
        let od = panel.od_index(r.str(0)).ok_or_else(|| r.error(format!("unknown od `{}`", r.str(0))))?;
        out.push(InjectedEffect { od, day: r.parse(1, "day_index")?, interval: r.parse(2, "interval_index")?, true_effect: r.parse(3, "true_effect")? });
        Ok(())
    })?;
    Ok(out)
}

/// The 13 feature columns followed by `target`.
pub fn training_table_csv(data: &Dataset) -> Vec<u8> {
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.push("target");
    to_csv(
        &header,
        (0..data.n_samples()).map(|i| data.row(i).iter().chain(std::iter::once(&data.targets()[i])).map(|v| v.to_string()).collect::<Vec<_>>()),
    )
}

pub fn load_training_table(path: &Path) -> Result<Dataset> {
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.push("target");
    let mut x = Vec::new();
    let mut y = Vec::new();
    Csv::open(path, &header)?.each(|r| {
        for j in 0..FEATURE_NAMES.len() {
            x.push(r.parse::<f64>(j, FEATURE_NAMES[j])?);
        }
        y.push(r.parse(FEATURE_NAMES.len(), "target")?);
        Ok(())
    })?;
    Dataset::from_flat(x, FEATURE_NAMES.len(), y, odflow_core::features::feature_names()).map_err(|e| domain(path, e))
}

pub fn predictions_csv(panel: &OdPanel, rows: &[PredictionRow]) -> Vec<u8> {
    to_csv(
        &PREDICTIONS_HEADER,
        rows.iter().map(|r| {
            vec![
                panel.od_pairs()[r.od].od_id.clone(),
                r.day.to_string(),
                r.interval.to_string(),
                r.normal.to_string(),
                r.adjustment.to_string(),
                r.final_flow.to_string(),
                r.truth.to_string(),
                bit(r.adjusted),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub od: usize,
    pub day: usize,
    pub interval: usize,
    pub normal: f64,
    pub adjustment: f64,
    pub final_flow: f64,
    pub truth: f64,
    pub adjusted: bool,
}

pub fn load_predictions(path: &Path, panel: &OdPanel) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    Csv::open(path, &PREDICTIONS_HEADER)?.each(|r| {
        let od = panel.od_index(r.str(0)).ok_or_else(|| r.error(format!("unknown od `{}`", r.str(0))))?;
        out.push(PredictionRecord {
            od,
            day: r.parse(1, "day_index")?,
            interval: r.parse(2, "interval_index")?,
            normal: r.parse(3, "normal")?,
            adjustment: r.parse(4, "adjustment")?,
            final_flow: r.parse(5, "final")?,
            truth: r.parse(6, "truth")?,
            adjusted: r.flag(7, "adjusted")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Vec<u8> {
    to_csv(
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![r.p1.to_string(), r.p2.to_string(), r.mae_all.to_string(), opt(r.mae_influenced), r.rmse_all.to_string(), opt(r.rmse_influenced)]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLossRow {
    pub p: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub empirical: f64,
    pub closed_form: f64,
    pub rel_err: f64,
    pub closed_form_linear: f64,
    pub rel_err_linear: f64,
    pub resampled: usize,
}

pub fn param_loss_csv(rows: &[ParamLossRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    if rows.is_empty() {
        w.write_record(["p", "sigma1", "sigma2", "empirical", "closed_form", "rel_err", "closed_form_linear", "rel_err_linear", "resampled"])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One block of rows per named case.
pub fn risk_csv(cases: &[(&str, &AdjustmentRisk)]) -> Vec<u8> {
    let mut rows = Vec::new();
    for (name, risk) in cases {
        for ((p, e), c) in risk.p_grid.iter().zip(&risk.empirical).zip(&risk.closed_form) {
            rows.push(vec![name.to_string(), p.to_string(), e.to_string(), c.to_string()]);
        }
    }
    to_csv(&["case", "P", "empirical_risk", "closed_form_risk"], rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTriple {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

impl From<odflow_core::Metrics> for MetricTriple {
    fn from(m: odflow_core::Metrics) -> Self {
        Self { mae: m.mae, rmse: m.rmse, mape: m.mape }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baseline {
    pub all: MetricTriple,
    pub influenced: Option<MetricTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsFile {
    pub all: MetricTriple,
    pub influenced: Option<MetricTriple>,
    pub n_adjusted: usize,
    /// Normal-model predictions alone.
    pub baseline: Baseline,
}

impl From<&PredictionReport> for MetricsFile {
    fn from(r: &PredictionReport) -> Self {
        Self {
            all: r.metrics_all.into(),
            influenced: r.metrics_influenced.map(Into::into),
            n_adjusted: r.n_adjusted,
            baseline: Baseline { all: r.baseline_all.into(), influenced: r.baseline_influenced.map(Into::into) },
        }
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s.into_bytes()
}

pub fn save_model(model: &RegressionModel, path: &Path) -> Result<()> {
    write_atomic(path, &json_bytes(model))
}

pub fn load_model(path: &Path) -> Result<RegressionModel> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    let model: RegressionModel = serde_json::from_str(&text).map_err(|e| parse(path, e.line() as u64, e.to_string()))?;
    if model.model_fmt != odflow_core::learners::MODEL_FMT {
        return Err(parse(path, 1, format!("unsupported model_fmt {}", model.model_fmt)));
    }
    Ok(model)
}
