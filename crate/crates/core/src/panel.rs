//! Panel data model: per-OD flow counts over (day, interval), day-level
//! covariates and incident records.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of one panel interval in minutes.
pub const INTERVAL_MINUTES: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayMeta {
    pub day_index: usize,
    pub is_weekend: bool,
    pub is_sunny: bool,
    /// ISO-8601 date; metadata only.
    pub date_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OdPair {
    pub od_id: String,
    pub origin: String,
    pub destination: String,
}

/// Dense flow panel indexed `(od, day, interval)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdPanel {
    n_days: usize,
    n_intervals: usize,
    od_pairs: Vec<OdPair>,
    flows: Vec<f64>,
    day_meta: Vec<DayMeta>,
}

impl OdPanel {
    /// Builds a panel from a dense row-major `(od, day, interval)` buffer.
    pub fn new(od_pairs: Vec<OdPair>, day_meta: Vec<DayMeta>, n_intervals: usize, flows: Vec<f64>) -> Result<Self> {
        let n_days = day_meta.len();
        let expected = od_pairs.len() * n_days * n_intervals;
        if flows.len() != expected {
            return Err(Error::Shape { expected, got: flows.len() });
        }
        for (i, d) in day_meta.iter().enumerate() {
            if d.day_index != i {
                return Err(Error::domain("day_index values must be unique and contiguous from 0"));
            }
        }
        if let Some(bad) = flows.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::domain(alloc::format!("flow {bad} is negative or non-finite")));
        }
        let ids: BTreeSet<&str> = od_pairs.iter().map(|o| o.od_id.as_str()).collect();
        if ids.len() != od_pairs.len() {
            return Err(Error::domain("od_id values must be unique"));
        }
        Ok(Self { n_days, n_intervals, od_pairs, flows, day_meta })
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn n_ods(&self) -> usize {
        self.od_pairs.len()
    }

    pub fn od_pairs(&self) -> &[OdPair] {
        &self.od_pairs
    }

    pub fn day_meta(&self) -> &[DayMeta] {
        &self.day_meta
    }

    pub fn od_index(&self, od_id: &str) -> Option<usize> {
        self.od_pairs.iter().position(|o| o.od_id == od_id)
    }

    #[inline]
    fn offset(&self, od: usize, day: usize, interval: usize) -> usize {
        (od * self.n_days + day) * self.n_intervals + interval
    }

    #[inline]
    pub fn flow(&self, od: usize, day: usize, interval: usize) -> f64 {
        self.flows[self.offset(od, day, interval)]
    }

    pub fn set_flow(&mut self, od: usize, day: usize, interval: usize, value: f64) -> Result<()> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::domain("flows must be finite and non-negative"));
        }
        let i = self.offset(od, day, interval);
        self.flows[i] = value;
        Ok(())
    }

    /// All intervals of one (od, day).
    pub fn day_row(&self, od: usize, day: usize) -> &[f64] {
        let start = self.offset(od, day, 0);
        &self.flows[start..start + self.n_intervals]
    }

    pub fn flows(&self) -> &[f64] {
        &self.flows
    }

    pub fn check_cell(&self, od: usize, day: usize, interval: usize) -> Result<()> {
        if od >= self.n_ods() {
            return Err(Error::Index { index: od, len: self.n_ods() });
        }
        if day >= self.n_days {
            return Err(Error::Index { index: day, len: self.n_days });
        }
        if interval >= self.n_intervals {
            return Err(Error::Index { index: interval, len: self.n_intervals });
        }
        Ok(())
    }

    /// Covariates `(is_sunny, is_weekend, lag1, lag2)` of one cell.
    pub fn covariates_at(&self, od: usize, day: usize, interval: usize) -> Result<CovariateVector> {
        self.check_cell(od, day, interval)?;
        if interval < 2 {
            return Err(Error::InsufficientHistory { interval, required: 2 });
        }
        let meta = &self.day_meta[day];
        let values = vec![
            f64::from(u8::from(meta.is_sunny)),
            f64::from(u8::from(meta.is_weekend)),
            self.flow(od, day, interval - 1),
            self.flow(od, day, interval - 2),
        ];
        Ok(CovariateVector { values })
    }
}

/// Accumulates long-format cells and validates completeness and uniqueness.
#[derive(Debug, Clone)]
pub struct PanelBuilder {
    od_pairs: Vec<OdPair>,
    day_meta: Vec<DayMeta>,
    n_intervals: usize,
    flows: Vec<f64>,
    seen: Vec<bool>,
}

impl PanelBuilder {
    pub fn new(mut od_pairs: Vec<OdPair>, mut day_meta: Vec<DayMeta>, n_intervals: usize) -> Self {
        od_pairs.sort();
        day_meta.sort_by_key(|d| d.day_index);
        let n = od_pairs.len() * day_meta.len() * n_intervals;
        Self { od_pairs, day_meta, n_intervals, flows: vec![0.0; n], seen: vec![false; n] }
    }

    pub fn od_index(&self, od_id: &str) -> Option<usize> {
        self.od_pairs.binary_search_by(|o| o.od_id.as_str().cmp(od_id)).ok()
    }

    pub fn insert(&mut self, od: usize, day: usize, interval: usize, count: f64) -> Result<()> {
        let n_days = self.day_meta.len();
        if od >= self.od_pairs.len() || day >= n_days || interval >= self.n_intervals {
            return Err(Error::domain("cell index outside panel dimensions"));
        }
        if !count.is_finite() || count < 0.0 {
            return Err(Error::domain(alloc::format!("count {count} is negative or non-finite")));
        }
        let i = (od * n_days + day) * self.n_intervals + interval;
        if self.seen[i] {
            return Err(Error::DuplicateCell { od, day, interval });
        }
        self.seen[i] = true;
        self.flows[i] = count;
        Ok(())
    }

    pub fn finish(self) -> Result<OdPanel> {
        let n_days = self.day_meta.len();
        if let Some(i) = self.seen.iter().position(|s| !s) {
            let interval = i % self.n_intervals;
            let day = (i / self.n_intervals) % n_days;
            let od = i / (self.n_intervals * n_days);
            return Err(Error::MissingCell { od, day, interval });
        }
        OdPanel::new(self.od_pairs, self.day_meta, self.n_intervals, self.flows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: String,
    pub line_id: String,
    /// Ordered stations of the affected section.
    pub affected_stations: Vec<String>,
    pub day_index: usize,
    /// Minutes since the start of the service day.
    pub start_min: f64,
    pub end_min: f64,
    pub max_delay: f64,
    pub delay_5_num: u32,
    pub cancel_num: u32,
    pub evacuate_num: u32,
}

impl IncidentRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.end_min > self.start_min) {
            return Err(Error::domain(alloc::format!("incident {}: end_time must exceed start_time", self.incident_id)));
        }
        if self.affected_stations.is_empty() {
            return Err(Error::domain(alloc::format!("incident {}: no affected stations", self.incident_id)));
        }
        if !(self.max_delay >= 0.0) || !self.start_min.is_finite() || !self.end_min.is_finite() {
            return Err(Error::domain(alloc::format!("incident {}: invalid times", self.incident_id)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.end_min - self.start_min
    }

    pub fn influence_station_num(&self) -> usize {
        self.affected_stations.len()
    }

    /// Intervals from the one containing the start to the one containing
    /// `end + post_window_min`, clipped to the day.
    pub fn window_intervals(&self, post_window_min: f64, n_intervals: usize) -> core::ops::Range<usize> {
        let len = f64::from(INTERVAL_MINUTES);
        let first = libm::floor(self.start_min.max(0.0) / len) as usize;
        let last = libm::floor((self.end_min + post_window_min).max(0.0) / len) as usize;
        first.min(n_intervals)..(last + 1).min(n_intervals)
    }
}

/// Days carrying at least one incident.
pub fn incident_days(incidents: &[IncidentRecord]) -> BTreeSet<usize> {
    incidents.iter().map(|i| i.day_index).collect()
}

/// Days never touched by an incident, in ascending order.
pub fn clean_days(panel: &OdPanel, incidents: &[IncidentRecord]) -> Vec<usize> {
    let bad = incident_days(incidents);
    (0..panel.n_days()).filter(|d| !bad.contains(d)).collect()
}

/// Midpoint of an interval in minutes since day start.
pub fn interval_midpoint(interval: usize) -> f64 {
    let len = f64::from(INTERVAL_MINUTES);
    interval as f64 * len + len / 2.0
}

pub const COVARIATE_SCHEMA: [&str; 4] = ["is_sunny", "is_weekend", "lag1_flow", "lag2_flow"];

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateVector {
    pub values: Vec<f64>,
}

impl CovariateVector {
    pub fn schema(&self) -> &'static [&'static str] {
        &COVARIATE_SCHEMA
    }
}
