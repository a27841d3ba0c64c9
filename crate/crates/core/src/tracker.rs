//! Online appliance discovery and tracking.
//!
//! The tracker walks the filtered signal once. Every up-step is explained,
//! in order of preference, by a knapsack selection of appliances that are
//! currently off, by the single off appliance whose learned ON power is
//! closest in Mahalanobis distance, or by a newly discovered appliance.
//! Every down-step is explained by a knapsack selection of appliances that
//! are on, or failing that by the single on appliance under whose ON-power
//! density the step is most likely. Each appliance's trace holds its
//! activation power while on and zero while off.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{detect_events, Event, EventError};
use crate::mckp::{build_instance, solve, Direction};
use crate::models::{ApplianceDb, ApplianceId, ApplianceModel, ModelError};
use crate::signal::PowerTrace;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error(transparent)]
    Events(#[from] EventError),
    /// A state-machine violation; indicates a bug in the decision logic.
    #[error("internal tracking fault: {0}")]
    Model(#[from] ModelError),
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("event at index {index} is outside a trace of {len} samples")]
    EventOutOfRange { index: usize, len: usize },
    #[error("events are not ordered by index")]
    UnorderedEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Minimum step in watts.
    pub threshold_s: f64,
    /// Knapsack selections must explain more than this share (0–100) of a
    /// step to be accepted.
    pub profit_gate: f64,
    /// Largest Mahalanobis distance at which an up-step is matched to a
    /// known appliance instead of creating a new one.
    pub mahalanobis_gate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            threshold_s: 60.0,
            profit_gate: 90.0,
            mahalanobis_gate: 20.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.threshold_s.is_finite() && self.threshold_s > 0.0) {
            return Err(TrackerError::InvalidConfig("threshold_s must be positive"));
        }
        if !(self.profit_gate > 0.0 && self.profit_gate <= 100.0) {
            return Err(TrackerError::InvalidConfig("profit_gate must lie in (0, 100]"));
        }
        if !(self.mahalanobis_gate.is_finite() && self.mahalanobis_gate > 0.0) {
            return Err(TrackerError::InvalidConfig("mahalanobis_gate must be positive"));
        }
        Ok(())
    }
}

/// How an event was attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionPath {
    Mckp,
    Mahalanobis,
    New,
    Fallback,
    Ignored,
}

impl fmt::Display for DecisionPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionPath::Mckp => "MCKP",
            DecisionPath::Mahalanobis => "MAHALANOBIS",
            DecisionPath::New => "NEW",
            DecisionPath::Fallback => "FALLBACK",
            DecisionPath::Ignored => "IGNORED",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub index: usize,
    pub delta: f64,
    pub path: DecisionPath,
    /// Knapsack share of the step explained, 0–100.
    pub profit: f64,
    pub appliances: Vec<ApplianceId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisaggregationResult {
    /// Final database; each appliance's `trace` is its disaggregated signal.
    pub db: ApplianceDb,
    /// Filtered signal minus attributed power minus the running baseline.
    pub residual: Vec<f64>,
    /// Running minimum of the signal at each sample.
    pub baseline: Vec<f64>,
    pub decisions: Vec<Decision>,
    pub start_epoch: f64,
    pub sample_period: f64,
}

impl DisaggregationResult {
    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    pub fn appliance_trace(&self, id: ApplianceId) -> Option<PowerTrace> {
        self.db.get(id).map(|a| self.as_trace(a.trace.clone()))
    }

    pub fn residual_trace(&self) -> PowerTrace {
        self.as_trace(self.residual.clone())
    }

    pub fn as_trace(&self, samples: Vec<f64>) -> PowerTrace {
        PowerTrace {
            start_epoch: self.start_epoch,
            sample_period: self.sample_period,
            samples,
        }
    }

    /// Total attributed power at each sample.
    pub fn attributed(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.len()];
        for a in &self.db.appliances {
            for (t, v) in total.iter_mut().zip(&a.trace) {
                *t += v;
            }
        }
        total
    }
}

/// Detect events on `y` and attribute them, starting from an empty database.
pub fn track(y: &PowerTrace, config: &TrackerConfig) -> Result<DisaggregationResult, TrackerError> {
    config.validate()?;
    let events = detect_events(y, config.threshold_s)?;
    run(y, &events, ApplianceDb::new(y.sample_period), config)
}

/// Attribute a precomputed event list over `len` samples, starting from
/// `db`. The signal is taken to be the running sum of the event deltas
/// (floored at zero).
pub fn replay_events(
    events: &[Event],
    len: usize,
    db: ApplianceDb,
    config: &TrackerConfig,
) -> Result<DisaggregationResult, TrackerError> {
    config.validate()?;
    let mut level = 0.0f64;
    let mut samples = vec![0.0; len];
    let mut pending = events.iter().peekable();
    for (t, s) in samples.iter_mut().enumerate() {
        while let Some(e) = pending.next_if(|e| e.index == t) {
            level = (level + e.delta).max(0.0);
        }
        *s = level;
    }
    let y = PowerTrace {
        start_epoch: 0.0,
        sample_period: db.sample_period,
        samples,
    };
    run(&y, events, db, config)
}

/// Attribute `events` (ordered by index) against the signal `y`.
pub fn run(
    y: &PowerTrace,
    events: &[Event],
    db: ApplianceDb,
    config: &TrackerConfig,
) -> Result<DisaggregationResult, TrackerError> {
    config.validate()?;
    if events.windows(2).any(|w| w[1].index < w[0].index) {
        return Err(TrackerError::UnorderedEvents);
    }
    if let Some(e) = events.iter().find(|e| e.index >= y.len()) {
        return Err(TrackerError::EventOutOfRange {
            index: e.index,
            len: y.len(),
        });
    }

    let n = y.len();
    let mut tracker = Tracker {
        db,
        config,
        decisions: Vec::with_capacity(events.len()),
    };
    // Traces of appliances carried in from an earlier run restart here.
    for a in &mut tracker.db.appliances {
        a.trace.clear();
        a.trace.reserve(n);
    }
    let mut residual = Vec::with_capacity(n);
    let mut baseline = Vec::with_capacity(n);
    let mut pending = events.iter().peekable();

    for (t, &y_t) in y.samples.iter().enumerate() {
        tracker.db.update_min_power(y_t);
        while let Some(event) = pending.next_if(|e| e.index == t) {
            tracker.handle(event, t)?;
        }
        let mut attributed = 0.0;
        for a in &mut tracker.db.appliances {
            a.trace.push(a.current_power);
            attributed += a.current_power;
        }
        let base = tracker.db.baseline();
        baseline.push(base);
        residual.push(y_t - attributed - base);
    }

    Ok(DisaggregationResult {
        db: tracker.db,
        residual,
        baseline,
        decisions: tracker.decisions,
        start_epoch: y.start_epoch,
        sample_period: y.sample_period,
    })
}

struct Tracker<'a> {
    db: ApplianceDb,
    config: &'a TrackerConfig,
    decisions: Vec<Decision>,
}

impl Tracker<'_> {
    /// `processed` is the number of samples whose traces are complete.
    fn handle(&mut self, event: &Event, processed: usize) -> Result<(), TrackerError> {
        let s = self.config.threshold_s;
        if event.delta <= -s {
            self.handle_off(event)
        } else if event.delta >= s {
            self.handle_on(event, processed)
        } else {
            Ok(())
        }
    }

    fn record(&mut self, event: &Event, path: DecisionPath, profit: f64, appliances: Vec<ApplianceId>) {
        self.decisions.push(Decision {
            index: event.index,
            delta: event.delta,
            path,
            profit,
            appliances,
        });
    }

    fn handle_off(&mut self, event: &Event) -> Result<(), TrackerError> {
        let magnitude = event.magnitude();
        let period = self.db.sample_period;
        let solution = solve(&build_instance(magnitude, &self.db, Direction::Off));
        if solution.profit > self.config.profit_gate {
            let ids: Vec<ApplianceId> = solution.selected.iter().map(|(id, _)| *id).collect();
            for &id in &ids {
                self.db.get_mut(id)?.turn_off(event.index, period)?;
            }
            self.record(event, DecisionPath::Mckp, solution.profit, ids);
            return Ok(());
        }

        // Most likely single appliance under its ON-power density.
        let likeliest = self
            .db
            .appliances
            .iter()
            .filter(|a| a.is_on())
            .filter_map(|a| a.p_on.log_pdf(magnitude).ok().map(|lp| (a.id, lp)))
            .fold(None::<(ApplianceId, f64)>, |best, (id, lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((id, lp)),
            });
        match likeliest {
            Some((id, _)) => {
                self.db.get_mut(id)?.turn_off(event.index, period)?;
                self.record(event, DecisionPath::Fallback, solution.profit, vec![id]);
            }
            // Nothing is on: the step cannot be attributed.
            None => self.record(event, DecisionPath::Ignored, solution.profit, Vec::new()),
        }
        Ok(())
    }

    fn handle_on(&mut self, event: &Event, processed: usize) -> Result<(), TrackerError> {
        let magnitude = event.magnitude();
        let period = self.db.sample_period;
        let solution = solve(&build_instance(magnitude, &self.db, Direction::On));
        if solution.profit > self.config.profit_gate {
            // Spread the unexplained remainder proportionally so the
            // activations add up to the observed step.
            let scale = magnitude / solution.total_weight() as f64;
            let mut ids = Vec::with_capacity(solution.selected.len());
            for &(id, w) in &solution.selected {
                self.db.get_mut(id)?.turn_on(event.index, w as f64 * scale, period)?;
                ids.push(id);
            }
            self.record(event, DecisionPath::Mckp, solution.profit, ids);
            return Ok(());
        }

        let closest = self
            .db
            .appliances
            .iter()
            .filter(|a| !a.is_on())
            .filter_map(|a: &ApplianceModel| a.mahalanobis(magnitude).ok().map(|d| (a.id, d)))
            .fold(None::<(ApplianceId, f64)>, |best, (id, d)| match best {
                Some((_, b)) if b <= d => best,
                _ => Some((id, d)),
            });
        match closest {
            Some((id, d)) if d < self.config.mahalanobis_gate => {
                self.db.get_mut(id)?.turn_on(event.index, magnitude, period)?;
                self.record(event, DecisionPath::Mahalanobis, solution.profit, vec![id]);
            }
            _ => {
                let id = self.db.add_new(magnitude, event.index, processed);
                self.record(event, DecisionPath::New, solution.profit, vec![id]);
            }
        }
        Ok(())
    }
}

/// One line per decision: `index,delta,path,profit,appliances` with
/// appliance ids separated by `;`.
pub fn render_audit_log(decisions: &[Decision]) -> String {
    let mut out = String::from("index,delta,path,profit,appliances\n");
    for d in decisions {
        let ids: Vec<String> = d.appliances.iter().map(ToString::to_string).collect();
        out.push_str(&format!(
            "{},{:.3},{},{:.3},{}\n",
            d.index,
            d.delta,
            d.path,
            d.profit,
            ids.join(";")
        ));
    }
    out
}
