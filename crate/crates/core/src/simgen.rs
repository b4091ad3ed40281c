//! Synthetic subway network, OD panel and incident injection with exact
//! ground-truth effects.
//!
//! Lines are path graphs named `L0, L1, ...` with stations `S{line}-{pos}`.
//! Transfers replace a station of the later line by one of the earlier line.
//! Flows are rounded draws around a latent rate
//! `base_demand * profile(interval) * day factors * od popularity`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::StationGraph;
use crate::panel::{self, DayMeta, IncidentRecord, OdPair, OdPanel};
use crate::rng;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub n_lines: usize,
    pub stations_per_line: usize,
    /// Shared stations joining lines; at least `n_lines - 1`.
    pub n_transfer: usize,
    pub n_days: usize,
    pub n_intervals: usize,
    /// Mean flow per OD-interval at profile 1 on a sunny weekday.
    pub base_demand: f64,
    pub weekend_factor: f64,
    /// Multiplier on non-sunny days.
    pub weather_factor: f64,
    /// Cell noise standard deviation is `noise_sigma * sqrt(rate)`.
    pub noise_sigma: f64,
    /// Log-scale spread of OD popularity (mean 1).
    pub popularity_sigma: f64,
    pub sunny_prob: f64,
    /// Keep a seeded random subset of this many OD pairs.
    pub max_ods: Option<usize>,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_lines: 2,
            stations_per_line: 5,
            n_transfer: 1,
            n_days: 35,
            n_intervals: 48,
            base_demand: 20.0,
            weekend_factor: 0.6,
            weather_factor: 0.9,
            noise_sigma: 0.3,
            popularity_sigma: 0.5,
            sunny_prob: 0.6,
            max_ods: None,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_lines == 0 || self.stations_per_line < 2 || self.n_days == 0 || self.n_intervals == 0 {
            return Err(Error::Config("simgen sizes must be at least 1 (2 stations per line)".into()));
        }
        if self.max_ods == Some(0) {
            return Err(Error::Config("simgen.max_ods must be at least 1".into()));
        }
        for (name, v) in [("base_demand", self.base_demand), ("weekend_factor", self.weekend_factor), ("weather_factor", self.weather_factor)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(alloc::format!("simgen.{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.popularity_sigma >= 0.0) || !(0.0..=1.0).contains(&self.sunny_prob) {
            return Err(Error::Config("simgen noise, popularity and sunny_prob out of range".into()));
        }
        let min = self.n_lines - 1;
        let max = self.n_lines * (self.n_lines - 1) / 2;
        if self.n_transfer < min || self.n_transfer > max {
            return Err(Error::Config(alloc::format!(
                "simgen.n_transfer must lie in [{min}, {max}] for {} lines",
                self.n_lines
            )));
        }
        Ok(())
    }
}

fn station_name(line: usize, pos: usize) -> String {
    alloc::format!("S{line}-{pos}")
}

/// Line pairs joined by a transfer: a chain first, then the remaining pairs
/// in lexicographic order.
fn join_pairs(n_lines: usize, n_transfer: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (1..n_lines).map(|l| (l - 1, l)).collect();
    for a in 0..n_lines {
        for b in a + 2..n_lines {
            pairs.push((a, b));
        }
    }
    pairs.truncate(n_transfer);
    pairs
}

pub fn generate_network(spec: &SimSpec) -> Result<StationGraph> {
    spec.validate()?;
    let n = spec.stations_per_line;
    let pairs = join_pairs(spec.n_lines, spec.n_transfer);
    let mut joins_of = vec![0usize; spec.n_lines];
    for &(a, b) in &pairs {
        joins_of[a] += 1;
        joins_of[b] += 1;
    }
    if joins_of.iter().any(|&j| j > n) {
        return Err(Error::Config("simgen.n_transfer exceeds the stations available on a line".into()));
    }
    let mut lines: Vec<Vec<String>> = (0..spec.n_lines).map(|l| (0..n).map(|p| station_name(l, p)).collect()).collect();
    // Join slots are spread evenly along each line.
    let mut used = vec![0usize; spec.n_lines];
    let slot = |line: usize, used: &mut Vec<usize>| {
        used[line] += 1;
        used[line] * n / (joins_of[line] + 1)
    };
    for &(a, b) in &pairs {
        let pa = slot(a, &mut used).min(n - 1);
        let pb = slot(b, &mut used).min(n - 1);
        lines[b][pb] = lines[a][pa].clone();
    }
    let graph = StationGraph::from_lines(lines.into_iter().enumerate().map(|(l, s)| (alloc::format!("L{l}"), s)).collect())?;
    if !graph.is_connected() {
        return Err(Error::Config("simgen network is not connected".into()));
    }
    Ok(graph)
}

/// Relative demand of an interval: morning and evening peaks, little flow at
/// night.
pub fn interval_profile(interval: usize) -> f64 {
    let h = panel::interval_midpoint(interval) / 60.0;
    let bump = |c: f64, w: f64| libm::exp(-0.5 * ((h - c) / w) * ((h - c) / w));
    if !(5.0..23.5).contains(&h) {
        return 0.02;
    }
    0.15 + 1.2 * bump(8.25, 0.9) + 0.9 * bump(18.25, 1.1)
}

/// Proleptic Gregorian date of `days` after 2024-01-01.
fn date_label(days: usize) -> String {
    // Civil-from-days on the 1970 epoch; 2024-01-01 is day 19723.
    let z = 19_723 + days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    alloc::format!("{y:04}-{m:02}-{d:02}")
}

pub fn generate_days(spec: &SimSpec) -> Vec<DayMeta> {
    let mut rng = rng::stream(spec.seed, 1);
    (0..spec.n_days)
        .map(|d| DayMeta {
            day_index: d,
            is_weekend: d % 7 >= 5,
            is_sunny: rng.random_bool(spec.sunny_prob),
            date_label: date_label(d),
        })
        .collect()
}

/// Ordered station pairs sorted by `od_id`, optionally a seeded subset.
pub fn generate_od_pairs(graph: &StationGraph, spec: &SimSpec) -> Vec<OdPair> {
    let stations = graph.stations();
    let mut pairs = Vec::new();
    for o in stations {
        for d in stations {
            if o != d {
                pairs.push(OdPair { od_id: alloc::format!("{o}>{d}"), origin: o.clone(), destination: d.clone() });
            }
        }
    }
    if let Some(m) = spec.max_ods {
        if m < pairs.len() {
            let mut rng = rng::stream(spec.seed, 2);
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(m);
            idx.sort_unstable();
            pairs = idx.into_iter().map(|i| pairs[i].clone()).collect();
        }
    }
    pairs.sort();
    pairs
}

/// Panel plus its latent rates (same layout as the flows).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPanel {
    pub panel: OdPanel,
    pub rates: Vec<f64>,
}

impl GeneratedPanel {
    pub fn rate(&self, od: usize, day: usize, interval: usize) -> f64 {
        self.rates[(od * self.panel.n_days() + day) * self.panel.n_intervals() + interval]
    }

    /// Standard deviation of the cell noise.
    pub fn noise_sd(&self, spec: &SimSpec, od: usize, day: usize, interval: usize) -> f64 {
        spec.noise_sigma * self.rate(od, day, interval).sqrt()
    }
}

pub fn generate_panel(graph: &StationGraph, spec: &SimSpec) -> Result<GeneratedPanel> {
    spec.validate()?;
    let days = generate_days(spec);
    let ods = generate_od_pairs(graph, spec);
    let s = spec.popularity_sigma;
    let popularity: Vec<f64> = if s > 0.0 {
        let dist = LogNormal::new(-0.5 * s * s, s).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = rng::stream(spec.seed, 3);
        ods.iter().map(|_| dist.sample(&mut rng)).collect()
    } else {
        vec![1.0; ods.len()]
    };
    let n_int = spec.n_intervals;
    let mut rates = Vec::with_capacity(ods.len() * days.len() * n_int);
    let mut flows = Vec::with_capacity(rates.capacity());
    let mut noise = rng::stream(spec.seed, 4);
    for pop in &popularity {
        for day in &days {
            let mut factor = spec.base_demand * pop;
            if day.is_weekend {
                factor *= spec.weekend_factor;
            }
            if !day.is_sunny {
                factor *= spec.weather_factor;
            }
            for k in 0..n_int {
                let rate = factor * interval_profile(k);
                let z: f64 = StandardNormal.sample(&mut noise);
                rates.push(rate);
                flows.push(libm::round(rate + spec.noise_sigma * rate.sqrt() * z).max(0.0));
            }
        }
    }
    Ok(GeneratedPanel { panel: OdPanel::new(ods, days, n_int, flows)?, rates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEffect {
    pub od: usize,
    pub day: usize,
    pub interval: usize,
    /// Signed passengers added to the cell before flooring.
    pub true_effect: f64,
}

/// Shape of an injected incident effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncidentProfile {
    /// Fraction of the cell flow removed while the incident lasts.
    pub suppression_depth: f64,
    /// Fraction added right after the incident, fading linearly.
    pub recovery_overshoot: f64,
    /// Minutes over which the overshoot fades to zero.
    pub recovery_min: f64,
    /// Multiplier per hop between the OD and the incident stations.
    pub spatial_decay: f64,
    /// ODs further than this many hops are untouched.
    pub reach: usize,
}

impl Default for IncidentProfile {
    fn default() -> Self {
        Self { suppression_depth: 0.6, recovery_overshoot: 0.4, recovery_min: 90.0, spatial_decay: 0.5, reach: 2 }
    }
}

impl IncidentProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.suppression_depth) {
            return Err(Error::Config("suppression_depth must lie in [0,1]".into()));
        }
        if !(self.recovery_overshoot >= 0.0) || !(self.recovery_min > 0.0) || !(0.0..=1.0).contains(&self.spatial_decay) {
            return Err(Error::Config("recovery_overshoot, recovery_min or spatial_decay out of range".into()));
        }
        Ok(())
    }

    /// Effect as a fraction of the cell flow at hop distance `hops` for an
    /// interval whose midpoint is `mid`.
    pub fn relative_effect(&self, incident: &IncidentRecord, hops: usize, mid: f64) -> f64 {
        if hops > self.reach {
            return 0.0;
        }
        let scale = libm::pow(self.spatial_decay, hops as f64);
        if mid >= incident.start_min && mid <= incident.end_min {
            -self.suppression_depth * scale
        } else if mid > incident.end_min && mid < incident.end_min + self.recovery_min {
            self.recovery_overshoot * scale * (1.0 - (mid - incident.end_min) / self.recovery_min)
        } else {
            0.0
        }
    }
}

/// Adds the incident's effect to every reachable OD of its day. Effects are
/// whole passengers and recorded before flooring at 0.
pub fn inject_incident(panel: &OdPanel, graph: &StationGraph, incident: &IncidentRecord, profile: &IncidentProfile) -> Result<(OdPanel, Vec<InjectedEffect>)> {
    profile.validate()?;
    incident.validate()?;
    let day = incident.day_index;
    let day_len = panel.n_intervals() as f64 * f64::from(panel::INTERVAL_MINUTES);
    if day >= panel.n_days() || incident.start_min < 0.0 || incident.start_min >= day_len {
        return Err(Error::domain(alloc::format!("incident {} lies outside the panel", incident.incident_id)));
    }
    let mut out = panel.clone();
    let mut effects = Vec::new();
    for (od, pair) in panel.od_pairs().iter().enumerate() {
        let o = graph.shortest_hops(&pair.origin, &incident.affected_stations)?;
        let d = graph.shortest_hops(&pair.destination, &incident.affected_stations)?;
        let Some(hops) = o.into_iter().chain(d).min() else { continue };
        for k in 0..panel.n_intervals() {
            let rel = profile.relative_effect(incident, hops, panel::interval_midpoint(k));
            let base = panel.flow(od, day, k);
            let effect = libm::round(rel * base);
            if effect != 0.0 {
                out.set_flow(od, day, k, (base + effect).max(0.0))?;
                effects.push(InjectedEffect { od, day, interval: k, true_effect: effect });
            }
        }
    }
    Ok((out, effects))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_incidents: usize,
    pub profile: IncidentProfile,
    /// Depth is scaled by `max_delay / severity_ref`, capped at 1.
    pub severity_ref: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { n_incidents: 6, profile: IncidentProfile::default(), severity_ref: 15.0 }
    }
}

/// Generated data with injected incidents.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: StationGraph,
    /// Incident-free panel.
    pub base: GeneratedPanel,
    pub panel: OdPanel,
    pub incidents: Vec<IncidentRecord>,
    pub effects: Vec<InjectedEffect>,
}

/// Morning-peak incidents on distinct weekdays, each on a random section of
/// a random line. Attribute draws use their own stream, so the base panel is
/// the one `generate_panel` returns.
pub fn generate_incidents(graph: &StationGraph, spec: &SimSpec, n_incidents: usize) -> Result<Vec<IncidentRecord>> {
    let mut weekdays: Vec<usize> = (1..spec.n_days).filter(|d| d % 7 < 5).collect();
    if weekdays.len() < n_incidents {
        return Err(Error::Config(alloc::format!("only {} weekdays for {n_incidents} incidents", weekdays.len())));
    }
    let mut rng = rng::stream(spec.seed, 5);
    weekdays.shuffle(&mut rng);
    let mut days: Vec<usize> = weekdays[..n_incidents].to_vec();
    days.sort_unstable();
    let mut out = Vec::with_capacity(n_incidents);
    for (i, day) in days.into_iter().enumerate() {
        let (line_id, stations) = &graph.lines()[rng.random_range(0..graph.lines().len())];
        let len = rng.random_range(1..=stations.len().min(3));
        let first = rng.random_range(0..=stations.len() - len);
        let start = 420.0 + 15.0 * f64::from(rng.random_range(0..6u32));
        let duration = 30.0 + 15.0 * f64::from(rng.random_range(0..5u32));
        let max_delay = libm::round(rng.random_range(6.0..24.0));
        out.push(IncidentRecord {
            incident_id: alloc::format!("INC{i:03}"),
            line_id: line_id.clone(),
            affected_stations: stations[first..first + len].to_vec(),
            day_index: day,
            start_min: start,
            end_min: start + duration,
            max_delay,
            delay_5_num: rng.random_range(0..12),
            cancel_num: rng.random_range(0..4),
            evacuate_num: rng.random_range(0..3),
        });
    }
    Ok(out)
}

pub fn scenario(spec: &SimSpec, config: &ScenarioConfig) -> Result<Scenario> {
    let graph = generate_network(spec)?;
    let base = generate_panel(&graph, spec)?;
    let incidents = generate_incidents(&graph, spec, config.n_incidents)?;
    let mut panel = base.panel.clone();
    let mut effects = Vec::new();
    for inc in &incidents {
        let severity = inc.max_delay / config.severity_ref;
        let profile = IncidentProfile {
            suppression_depth: (config.profile.suppression_depth * severity).min(1.0),
            recovery_overshoot: config.profile.recovery_overshoot * severity,
            ..config.profile.clone()
        };
        let (next, eff) = inject_incident(&panel, &graph, inc, &profile)?;
        panel = next;
        effects.extend(eff);
    }
    Ok(Scenario { graph, base, panel, incidents, effects })
}
