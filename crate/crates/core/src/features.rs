//! Incident effect features for one (incident, OD, interval) sample.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Dataset;
use crate::network::StationGraph;
use crate::panel::{self, IncidentRecord, OdPanel};
use crate::placebo::CausalEffectEstimate;

/// Column order of [`EffectFeatureVector::to_array`].
pub const FEATURE_NAMES: [&str; 13] = [
    "duration",
    "max_delay",
    "delay_5_num",
    "evacuate_num",
    "cancel_num",
    "influence_station_num",
    "distance_d",
    "distance_o",
    "proportion",
    "time_diff_to_start",
    "time_diff_to_end",
    "is_in_incident",
    "x0",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectFeatureVector {
    pub duration: f64,
    pub max_delay: f64,
    pub delay_5_num: f64,
    pub evacuate_num: f64,
    pub cancel_num: f64,
    pub influence_station_num: f64,
    pub distance_d: f64,
    pub distance_o: f64,
    pub proportion: f64,
    pub time_diff_to_start: f64,
    pub time_diff_to_end: f64,
    pub is_in_incident: f64,
    pub x0: f64,
}

impl EffectFeatureVector {
    pub fn to_array(&self) -> [f64; 13] {
        [
            self.duration,
            self.max_delay,
            self.delay_5_num,
            self.evacuate_num,
            self.cancel_num,
            self.influence_station_num,
            self.distance_d,
            self.distance_o,
            self.proportion,
            self.time_diff_to_start,
            self.time_diff_to_end,
            self.is_in_incident,
            self.x0,
        ]
    }

    pub fn from_array(v: [f64; 13]) -> Self {
        Self {
            duration: v[0],
            max_delay: v[1],
            delay_5_num: v[2],
            evacuate_num: v[3],
            cancel_num: v[4],
            influence_station_num: v[5],
            distance_d: v[6],
            distance_o: v[7],
            proportion: v[8],
            time_diff_to_start: v[9],
            time_diff_to_end: v[10],
            is_in_incident: v[11],
            x0: v[12],
        }
    }
}

pub fn feature_names() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn build_features(
    incident: &IncidentRecord,
    graph: &StationGraph,
    origin: &str,
    destination: &str,
    interval: usize,
    x0: f64,
) -> Result<EffectFeatureVector> {
    let affected = &incident.affected_stations;
    let distance_o = graph
        .shortest_hops(origin, affected)?
        .ok_or_else(|| Error::Unreachable { from: origin.to_string() })?;
    let distance_d = graph
        .shortest_hops(destination, affected)?
        .ok_or_else(|| Error::Unreachable { from: destination.to_string() })?;
    let proportion = graph
        .overlap_proportion(origin, destination, affected)?
        .ok_or_else(|| Error::Unreachable { from: origin.to_string() })?;
    let mid = panel::interval_midpoint(interval);
    let inside = mid >= incident.start_min && mid <= incident.end_min;
    Ok(EffectFeatureVector {
        duration: incident.duration(),
        max_delay: incident.max_delay,
        delay_5_num: f64::from(incident.delay_5_num),
        evacuate_num: f64::from(incident.evacuate_num),
        cancel_num: f64::from(incident.cancel_num),
        influence_station_num: incident.influence_station_num() as f64,
        distance_d: distance_d as f64,
        distance_o: distance_o as f64,
        proportion,
        time_diff_to_start: mid - incident.start_min,
        time_diff_to_end: mid - incident.end_min,
        is_in_incident: if inside { 1.0 } else { 0.0 },
        x0,
    })
}

/// Incident of `day` responsible for `interval`: the earliest-starting one
/// whose effect window covers it, else the earliest on that day.
pub fn incident_for<'a>(incidents: &'a [IncidentRecord], day: usize, interval: usize, post_window_min: f64, n_intervals: usize) -> Option<&'a IncidentRecord> {
    let mut on_day: Vec<&IncidentRecord> = incidents.iter().filter(|i| i.day_index == day).collect();
    on_day.sort_by(|a, b| a.start_min.total_cmp(&b.start_min).then_with(|| a.incident_id.cmp(&b.incident_id)));
    on_day
        .iter()
        .find(|i| i.window_intervals(post_window_min, n_intervals).contains(&interval))
        .or_else(|| on_day.first())
        .copied()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTables {
    /// Rows with `p_value <= p1`; target = estimated effect.
    pub effect: Dataset,
    /// Every row; target = placebo p-value.
    pub p_value: Dataset,
    /// Estimates dropped because a station could not reach the incident.
    pub skipped: usize,
}

/// Feature rows for a list of estimates, in input order, with the index of
/// each kept estimate. Unreachable samples are skipped.
pub fn feature_rows(
    estimates: &[CausalEffectEstimate],
    incidents: &[IncidentRecord],
    graph: &StationGraph,
    panel: &OdPanel,
    post_window_min: f64,
) -> Result<(Vec<[f64; 13]>, Vec<usize>)> {
    let mut rows = Vec::with_capacity(estimates.len());
    let mut kept = Vec::with_capacity(estimates.len());
    for (idx, est) in estimates.iter().enumerate() {
        let od = panel.od_pairs().get(est.od).ok_or(Error::Index { index: est.od, len: panel.n_ods() })?;
        let incident = incident_for(incidents, est.day, est.interval, post_window_min, panel.n_intervals())
            .ok_or_else(|| Error::domain(alloc::format!("no incident recorded on day {}", est.day)))?;
        match build_features(incident, graph, &od.origin, &od.destination, est.interval, est.counterfactual) {
            Ok(f) => {
                rows.push(f.to_array());
                kept.push(idx);
            }
            Err(Error::Unreachable { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((rows, kept))
}

pub fn build_training_table(
    estimates: &[CausalEffectEstimate],
    incidents: &[IncidentRecord],
    graph: &StationGraph,
    panel: &OdPanel,
    p1: f64,
    post_window_min: f64,
) -> Result<TrainingTables> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::Config(alloc::format!("p1 must lie in [0,1], got {p1}")));
    }
    let (rows, kept) = feature_rows(estimates, incidents, graph, panel, post_window_min)?;
    let mut effect_x = Vec::new();
    let mut effect_y = Vec::new();
    let mut p_x = Vec::with_capacity(rows.len() * 13);
    let mut p_y = Vec::with_capacity(rows.len());
    for (row, &idx) in rows.iter().zip(&kept) {
        let est = &estimates[idx];
        p_x.extend_from_slice(row);
        p_y.push(est.p_value);
        if est.p_value <= p1 {
            effect_x.extend_from_slice(row);
            effect_y.push(est.effect);
        }
    }
    if effect_y.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(TrainingTables {
        effect: Dataset::from_flat(effect_x, 13, effect_y, feature_names())?,
        p_value: Dataset::from_flat(p_x, 13, p_y, feature_names())?,
        skipped: estimates.len() - kept.len(),
    })
}
