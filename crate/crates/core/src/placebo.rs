//! Placebo significance test for synthetic-control effects.
//!
//! Every unit (the treated day and each incident-free day) is reconstructed
//! from the incident-free days other than itself; the treated day is never a
//! donor. The treated day's absolute reconstruction error is ranked among all
//! units' errors.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{self, IncidentRecord, OdPanel};
use crate::rng;
use crate::syncontrol::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaceboConfig {
    /// Significance level.
    pub alpha: f64,
    /// Minutes after the incident end still tested.
    pub post_incident_window_min: f64,
    /// Reuse the treated day's V in placebo runs instead of re-optimizing.
    pub reuse_v: bool,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self { alpha: 0.05, post_incident_window_min: 180.0, reuse_v: false }
    }
}

impl PlaceboConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(alloc::format!("placebo.alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.post_incident_window_min >= 0.0) {
            return Err(Error::Config("placebo.post_incident_window_min must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    /// Days of the units, ascending; `errors[i]` belongs to `days[i]`.
    pub days: Vec<usize>,
    pub errors: Vec<f64>,
    pub treated_day: usize,
    pub order_of_treated: usize,
    pub p_value: f64,
    /// Counterfactual of the treated day (donors: every incident-free day).
    pub counterfactual: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEffectEstimate {
    pub od: usize,
    pub day: usize,
    pub interval: usize,
    pub observed: f64,
    pub counterfactual: f64,
    pub effect: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Rank of `errors[treated]` (ascending, ties take the lowest rank of their
/// block) and the p-value `1 - order / n`.
pub fn p_value(errors: &[f64], treated: usize) -> Result<(usize, f64)> {
    let n = errors.len();
    if treated >= n {
        return Err(Error::Index { index: treated, len: n });
    }
    if n < 2 {
        return Err(Error::InsufficientDonors { available: n, required: 2 });
    }
    let e = errors[treated];
    let order = 1 + errors.iter().filter(|&&x| x < e).count();
    Ok((order, 1.0 - order as f64 / n as f64))
}

/// Units of the test: the treated day plus every incident-free day.
pub fn placebo_units(panel: &OdPanel, incidents: &[IncidentRecord], treated_day: usize) -> Vec<usize> {
    let mut days = panel::clean_days(panel, incidents);
    if let Err(pos) = days.binary_search(&treated_day) {
        days.insert(pos, treated_day);
    }
    days
}

/// Absolute leave-one-out reconstruction errors for one cell.
pub fn leave_one_out_errors(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    od: usize,
    interval: usize,
    treated_day: usize,
    synth: &SynthConfig,
    config: &PlaceboConfig,
) -> Result<PlaceboResult> {
    panel.check_cell(od, treated_day, interval)?;
    let required = synth.t_pre.max(2);
    if interval < required {
        return Err(Error::InsufficientHistory { interval, required });
    }
    let days = placebo_units(panel, incidents, treated_day);
    if days.len() < 3 {
        return Err(Error::InsufficientDonors { available: days.len().saturating_sub(1), required: 2 });
    }
    let clean: Vec<usize> = days.iter().copied().filter(|&d| d != treated_day).collect();

    let treated_set = syncontrol::build_donor_set(panel, od, treated_day, interval, &clean, synth.t_pre)?;
    let treated_fit = syncontrol::optimize_v(&treated_set, synth, syncontrol::cell_seed(synth, od, treated_day, interval))?;
    let observed = panel.flow(od, treated_day, interval);

    let mut errors = Vec::with_capacity(days.len());
    let mut donors = Vec::with_capacity(clean.len());
    for &day in &days {
        if day == treated_day {
            errors.push((treated_fit.counterfactual - observed).abs());
            continue;
        }
        donors.clear();
        donors.extend(clean.iter().copied().filter(|&d| d != day));
        let set = syncontrol::build_donor_set(panel, od, day, interval, &donors, synth.t_pre)?;
        let fit = if config.reuse_v {
            syncontrol::fit_with_v(&set, &treated_fit.v_diag, synth)?
        } else {
            let seed = rng::derive(synth.seed, &[od as u64, day as u64, interval as u64, treated_day as u64, 1]);
            syncontrol::optimize_v(&set, synth, seed)?
        };
        errors.push((fit.counterfactual - panel.flow(od, day, interval)).abs());
    }
    let treated_pos = days.binary_search(&treated_day).map_err(|_| Error::domain("treated day missing from units"))?;
    let (order, p) = p_value(&errors, treated_pos)?;
    Ok(PlaceboResult {
        days,
        errors,
        treated_day,
        order_of_treated: order,
        p_value: p,
        counterfactual: treated_fit.counterfactual,
        observed,
    })
}

/// Effect and placebo p-value of one cell.
pub fn test_cell(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    od: usize,
    day: usize,
    interval: usize,
    synth: &SynthConfig,
    config: &PlaceboConfig,
) -> Result<CausalEffectEstimate> {
    let res = leave_one_out_errors(panel, incidents, od, interval, day, synth, config)?;
    Ok(CausalEffectEstimate {
        od,
        day,
        interval,
        observed: res.observed,
        counterfactual: res.counterfactual,
        effect: res.observed - res.counterfactual,
        p_value: res.p_value,
        significant: res.p_value <= config.alpha,
    })
}

/// Cells tested for one incident: each OD in `ods` crossed with the
/// intervals from the incident start to `post_incident_window_min` after its
/// end, skipping intervals without enough history.
pub fn effect_cells(panel: &OdPanel, incident: &IncidentRecord, ods: &[usize], synth: &SynthConfig, config: &PlaceboConfig) -> Vec<(usize, usize, usize)> {
    let first = synth.t_pre.max(2);
    let window = incident.window_intervals(config.post_incident_window_min, panel.n_intervals());
    let mut cells = Vec::new();
    for &od in ods {
        for k in window.clone().filter(|&k| k >= first) {
            cells.push((od, incident.day_index, k));
        }
    }
    cells
}

/// Sequential placebo test of every cell of one incident.
pub fn test_effects(
    panel: &OdPanel,
    incidents: &[IncidentRecord],
    incident: &IncidentRecord,
    ods: &[usize],
    synth: &SynthConfig,
    config: &PlaceboConfig,
) -> Result<Vec<CausalEffectEstimate>> {
    config.validate()?;
    effect_cells(panel, incident, ods, synth, config)
        .into_iter()
        .map(|(od, day, k)| test_cell(panel, incidents, od, day, k, synth, config))
        .collect()
}
