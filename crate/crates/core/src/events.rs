//! ON/OFF step events from the first difference of a filtered signal.

use std::fmt;

use thiserror::Error;

use crate::signal::PowerTrace;

/// Default minimum step, in watts, for a sample-to-sample change to count
/// as a switching event.
pub const DEFAULT_THRESHOLD: f64 = 60.0;

/// Same-direction steps this many samples apart or closer are one event.
pub const COALESCE_WINDOW: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("event detection needs at least 2 samples, got {0}")]
    TraceTooShort(usize),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    On,
    Off,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::On => "ON",
            EventKind::Off => "OFF",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Sample index of the first sample at the new level.
    pub index: usize,
    /// Seconds from the start of the trace.
    pub time: f64,
    /// Signed step in watts.
    pub delta: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(index: usize, time: f64, delta: f64) -> Self {
        let kind = if delta > 0.0 { EventKind::On } else { EventKind::Off };
        Self {
            index,
            time,
            delta,
            kind,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.delta.abs()
    }
}

/// One event per sample whose step magnitude reaches `threshold`, with
/// same-direction steps at most [`COALESCE_WINDOW`] samples apart merged
/// into the earlier event.
pub fn detect_events(y: &PowerTrace, threshold: f64) -> Result<Vec<Event>, EventError> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(EventError::InvalidThreshold(threshold));
    }
    if y.len() < 2 {
        return Err(EventError::TraceTooShort(y.len()));
    }
    let mut events: Vec<Event> = Vec::new();
    for (t, pair) in y.samples.windows(2).enumerate() {
        let index = t + 1;
        let delta = pair[1] - pair[0];
        if delta.abs() < threshold {
            continue;
        }
        match events.last_mut() {
            Some(last) if index - last.index <= COALESCE_WINDOW && (last.delta > 0.0) == (delta > 0.0) => {
                last.delta += delta;
            }
            _ => events.push(Event::new(index, index as f64 * y.sample_period, delta)),
        }
    }
    Ok(events)
}

/// `index,delta,kind` CSV, one row per event.
pub fn render_events(events: &[Event]) -> String {
    let mut out = String::from("index,delta,kind\n");
    for e in events {
        out.push_str(&format!("{},{:.3},{}\n", e.index, e.delta, e.kind));
    }
    out
}
