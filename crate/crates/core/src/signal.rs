//! Uniformly sampled power traces and their CSV interchange format.
//!
//! Files are plain `unix_ts,watts` records, one per line, with an optional
//! header row. Short telemetry dropouts are filled by holding the previous
//! value; longer gaps are rejected because they would distort the duration
//! statistics learned downstream.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Longest dropout (in missing samples) that is filled by value hold.
pub const MAX_HELD_GAP: usize = 10;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("gap of {missing} samples before line {line} exceeds the {MAX_HELD_GAP}-sample hold limit")]
    GapTooLarge { line: usize, missing: usize },
    #[error("line {line}: timestamp goes backwards")]
    NonMonotoneTime { line: usize },
    #[error("line {line}: negative power {watts} W")]
    NegativePower { line: usize, watts: f64 },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace needs at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid sample period {0}")]
    InvalidPeriod(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A uniformly sampled, non-negative power signal in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    /// Seconds since the Unix epoch of the first sample.
    pub start_epoch: f64,
    /// Seconds between samples.
    pub sample_period: f64,
    pub samples: Vec<f64>,
}

impl PowerTrace {
    /// Build a trace, rejecting negative or non-finite samples.
    pub fn new(start_epoch: f64, sample_period: f64, samples: Vec<f64>) -> Result<Self, SignalError> {
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(SignalError::InvalidPeriod(sample_period));
        }
        if let Some((i, &w)) = samples.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(SignalError::NegativePower { line: i + 1, watts: w });
        }
        Ok(Self {
            start_epoch,
            sample_period,
            samples,
        })
    }

    /// 1 Hz trace starting at epoch zero.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        Self {
            start_epoch: 0.0,
            sample_period: 1.0,
            samples,
        }
    }

    /// Same timing as `self`, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            start_epoch: self.start_epoch,
            sample_period: self.sample_period,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        self.start_epoch + index as f64 * self.sample_period
    }

    pub fn require_len(&self, needed: usize) -> Result<(), SignalError> {
        if self.samples.len() < needed {
            Err(SignalError::TooShort {
                needed,
                got: self.samples.len(),
            })
        } else {
            Ok(())
        }
    }
}

/// Which zero-based CSV columns carry the timestamp and the power reading,
/// and optionally the nominal sample period. Without a nominal period the
/// median timestamp delta is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnSpec {
    pub timestamp: usize,
    pub power: usize,
    pub period: Option<f64>,
    /// Accept negative readings, for signed series such as residuals.
    pub allow_negative: bool,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            timestamp: 0,
            power: 1,
            period: None,
            allow_negative: false,
        }
    }
}

impl ColumnSpec {
    /// Default columns at a known cadence (e.g. 1 Hz datasets).
    pub fn at_period(period: f64) -> Self {
        Self {
            period: Some(period),
            ..Self::default()
        }
    }

    pub fn signed(self) -> Self {
        Self {
            allow_negative: true,
            ..self
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>, columns: ColumnSpec) -> Result<PowerTrace, SignalError> {
    let text = fs::read_to_string(path)?;
    parse_trace(&text, columns)
}

/// Parse CSV text into a trace. See [`load_trace`].
pub fn parse_trace(text: &str, columns: ColumnSpec) -> Result<PowerTrace, SignalError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let field = |col: usize| {
            record.get(col).ok_or_else(|| SignalError::MalformedRow {
                line,
                reason: format!("missing column {col}"),
            })
        };
        let ts_field = field(columns.timestamp)?;
        let power_field = field(columns.power)?;
        let parsed = (ts_field.parse::<f64>(), power_field.parse::<f64>());
        let (ts, watts) = match parsed {
            (Ok(ts), Ok(w)) if ts.is_finite() && w.is_finite() => (ts, w),
            // A non-numeric first row is a header.
            _ if rows.is_empty() && line == 1 => continue,
            _ => {
                return Err(SignalError::MalformedRow {
                    line,
                    reason: format!("cannot parse `{ts_field}`,`{power_field}`"),
                })
            }
        };
        if watts < 0.0 && !columns.allow_negative {
            return Err(SignalError::NegativePower { line, watts });
        }
        rows.push((line, ts, watts));
    }

    if rows.is_empty() {
        return Err(SignalError::EmptyTrace);
    }
    for pair in rows.windows(2) {
        if pair[1].1 < pair[0].1 {
            return Err(SignalError::NonMonotoneTime { line: pair[1].0 });
        }
    }

    let period = match columns.period {
        Some(p) if p.is_finite() && p > 0.0 => p,
        Some(p) => return Err(SignalError::InvalidPeriod(p)),
        None => infer_period(&rows),
    };
    let start = rows[0].1;
    let mut samples = Vec::with_capacity(rows.len());
    samples.push(rows[0].2);
    let mut last_slot = 0usize;
    for &(line, ts, watts) in &rows[1..] {
        let slot = ((ts - start) / period).round() as usize;
        if slot <= last_slot {
            // duplicate timestamp: first reading wins
            continue;
        }
        let missing = slot - last_slot - 1;
        if missing > MAX_HELD_GAP {
            return Err(SignalError::GapTooLarge { line, missing });
        }
        let held = *samples.last().expect("non-empty");
        samples.extend(std::iter::repeat_n(held, missing));
        samples.push(watts);
        last_slot = slot;
    }

    Ok(PowerTrace {
        start_epoch: start,
        sample_period: period,
        samples,
    })
}

/// Lower median of the positive timestamp deltas, snapped to microseconds so that
/// exported traces reload with the same period. Defaults to 1 s.
fn infer_period(rows: &[(usize, f64, f64)]) -> f64 {
    let mut deltas: Vec<f64> = rows
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .filter(|d| *d > 0.0)
        .collect();
    if deltas.is_empty() {
        return 1.0;
    }
    deltas.sort_by(f64::total_cmp);
    // lower median, so a short file with one gap still infers the regular step
    let median = deltas[(deltas.len() - 1) / 2];
    let snapped = (median * 1e6).round() / 1e6;
    if snapped > 0.0 {
        snapped
    } else {
        median
    }
}

pub fn export_trace(trace: &PowerTrace, path: impl AsRef<Path>) -> Result<(), SignalError> {
    fs::write(path, render_trace(trace)?)?;
    Ok(())
}

/// CSV text for a trace, with a `unix_ts,watts` header.
pub fn render_trace(trace: &PowerTrace) -> Result<String, SignalError> {
    if trace.is_empty() {
        return Err(SignalError::EmptyTrace);
    }
    let mut out = String::with_capacity(trace.len() * 20);
    out.push_str("unix_ts,watts\n");
    for (i, &w) in trace.samples.iter().enumerate() {
        let _ = writeln!(out, "{},{}", format_decimal(trace.timestamp(i)), format_decimal(w));
    }
    Ok(out)
}

/// Shortest round-trip representation, padded to at least three decimals.
pub(crate) fn format_decimal(v: f64) -> String {
    let mut s = format!("{v}");
    if s.contains(['e', 'E']) || !v.is_finite() {
        return s;
    }
    let decimals = s.find('.').map(|dot| s.len() - dot - 1);
    match decimals {
        None => s.push_str(".000"),
        Some(d) if d < 3 => s.extend(std::iter::repeat_n('0', 3 - d)),
        _ => {}
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PowerTrace, SignalError> {
        parse_trace(text, ColumnSpec::default())
    }

    #[test]
    fn direct_parse() {
        let t = parse("0,100\n1,100\n2,700\n").unwrap();
        assert_eq!(t.samples, vec![100.0, 100.0, 700.0]);
        assert_eq!(t.sample_period, 1.0);
    }

    #[test]
    fn header_is_optional() {
        let t = parse("unix_ts,watts\n10,5\n11,6\n").unwrap();
        assert_eq!(t.samples, vec![5.0, 6.0]);
        assert_eq!(t.start_epoch, 10.0);
    }

    #[test]
    fn one_sample_gap_is_held() {
        let t = parse("0,100\n1,100\n3,100\n").unwrap();
        assert_eq!(t.samples, vec![100.0; 4]);
        let t = parse("0,100\n1,100\n2,100\n4,250\n").unwrap();
        assert_eq!(t.samples, vec![100.0, 100.0, 100.0, 100.0, 250.0]);
    }

    #[test]
    fn two_row_file_with_gap() {
        let t = parse_trace("0,100\n2,100\n", ColumnSpec::at_period(1.0)).unwrap();
        assert_eq!(t.samples, vec![100.0, 100.0, 100.0]);
        // Inferred: the only delta becomes the period.
        let t = parse("0,100\n2,100\n").unwrap();
        assert_eq!(t.sample_period, 2.0);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn gap_limit() {
        let mut text = String::from("0,1\n1,1\n2,1\n");
        text.push_str("13,1\n"); // 10 missing: allowed
        assert_eq!(parse(&text).unwrap().len(), 14);
        text.push_str("25,1\n"); // 11 missing
        assert!(matches!(parse(&text), Err(SignalError::GapTooLarge { missing: 11, .. })));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse("0,1\n1,abc\n"), Err(SignalError::MalformedRow { line: 2, .. })));
        assert!(matches!(parse("0,1\n2,1\n1,1\n"), Err(SignalError::NonMonotoneTime { line: 3 })));
        assert!(matches!(parse("0,1\n1,-3\n"), Err(SignalError::NegativePower { .. })));
        let signed = parse_trace("0,1\n1,-3\n", ColumnSpec::default().signed()).unwrap();
        assert_eq!(signed.samples, vec![1.0, -3.0]);
        assert!(matches!(parse(""), Err(SignalError::EmptyTrace)));
        assert!(matches!(parse("0\n"), Err(SignalError::MalformedRow { .. })));
    }

    #[test]
    fn custom_columns() {
        let t = parse_trace("a,b,c\nx,0,10\ny,1,20\n", ColumnSpec { timestamp: 1, power: 2, ..ColumnSpec::default() }).unwrap();
        assert_eq!(t.samples, vec![10.0, 20.0]);
    }

    #[test]
    fn export_empty_is_error() {
        assert!(matches!(
            render_trace(&PowerTrace::from_samples(vec![])),
            Err(SignalError::EmptyTrace)
        ));
    }

    #[test]
    fn export_row_count_and_decimals() {
        let t = PowerTrace::from_samples((0..5400).map(|i| (i % 7) as f64 * 10.5).collect());
        let text = render_trace(&t).unwrap();
        assert_eq!(text.lines().count(), 5400 + 1);
        assert_eq!(text.lines().nth(1).unwrap(), "0.000,0.000");
        assert_eq!(format_decimal(10.5), "10.500");
        assert_eq!(format_decimal(0.123456), "0.123456");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = PowerTrace::from_samples(vec![100.0, 200.0]);
        export_trace(&t, &path).unwrap();
        assert_eq!(load_trace(&path, ColumnSpec::default()).unwrap(), t);
    }

    proptest::proptest! {
        #[test]
        fn render_parse_is_identity(
            samples in proptest::collection::vec(0.0f64..20_000.0, 1..200),
            start in 1.4e9f64..1.8e9,
            period in proptest::sample::select(vec![0.5, 1.0, 2.0, 60.0]),
        ) {
            let start = start.round();
            let t = PowerTrace::new(start, period, samples).unwrap();
            let back = parse(&render_trace(&t).unwrap()).unwrap();
            proptest::prop_assert_eq!(&back.samples, &t.samples);
            if t.len() > 1 {
                proptest::prop_assert_eq!(back.sample_period, t.sample_period);
            }
            proptest::prop_assert_eq!(back.start_epoch, t.start_epoch);
        }
    }
}
