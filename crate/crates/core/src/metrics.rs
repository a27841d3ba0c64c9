//! Energy integration and tracking accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::labelling::{LabelAssignment, UNKNOWN};
use crate::signal::PowerTrace;
use crate::tracker::DisaggregationResult;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference energy is zero")]
    ZeroTruthEnergy,
}

/// Energy of a trace in kWh (left Riemann sum at the sample period).
pub fn energy_kwh(trace: &PowerTrace) -> f64 {
    samples_kwh(&trace.samples, trace.sample_period)
}

pub fn samples_kwh(samples: &[f64], sample_period: f64) -> f64 {
    let watt_samples: f64 = samples.iter().sum();
    watt_samples * sample_period / 3.6e6
}

/// `100 · estimate / truth`, not clamped.
pub fn accuracy(estimate_kwh: f64, truth_kwh: f64) -> Result<f64, MetricsError> {
    if truth_kwh <= 0.0 {
        return Err(MetricsError::ZeroTruthEnergy);
    }
    Ok(estimate_kwh / truth_kwh * 100.0)
}

pub fn trace_accuracy(estimate: &PowerTrace, truth: &PowerTrace) -> Result<f64, MetricsError> {
    accuracy(energy_kwh(estimate), energy_kwh(truth))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyRow {
    pub truth: Option<f64>,
    pub filtered: Option<f64>,
    pub tracked: f64,
}

impl EnergyRow {
    /// Tracked energy as a percentage of ground truth.
    pub fn accuracy(&self) -> Option<f64> {
        self.truth.and_then(|t| accuracy(self.tracked, t).ok())
    }

    /// Tracked energy as a percentage of the filtered reference, which
    /// separates tracking loss from filter drift.
    pub fn accuracy_vs_filtered(&self) -> Option<f64> {
        self.filtered.and_then(|f| accuracy(self.tracked, f).ok())
    }
}

/// Per-label and aggregate energy, all in kWh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyReport {
    pub per_label: BTreeMap<String, EnergyRow>,
    pub aggregate: EnergyRow,
    /// Energy left unattributed by the tracker.
    pub residual: f64,
    /// Energy of the always-on baseline.
    pub baseline: f64,
}

/// Ground-truth inputs for a report. All maps are keyed by label.
#[derive(Debug, Clone, Default)]
pub struct Reference<'a> {
    pub truth: BTreeMap<String, &'a PowerTrace>,
    /// Ground-truth appliance traces after filtering, when available.
    pub filtered_truth: BTreeMap<String, &'a PowerTrace>,
    /// Raw aggregate; when absent the aggregate truth is the sum of the
    /// per-label truths.
    pub aggregate_truth: Option<&'a PowerTrace>,
}

/// Rows for every label with either ground truth or tracked appliances.
/// Appliances labelled unknown are reported under [`UNKNOWN`]. The aggregate
/// tracked energy is the sum over all appliances.
pub fn build_report(
    reference: &Reference<'_>,
    filtered: &PowerTrace,
    result: &DisaggregationResult,
    assignment: &LabelAssignment,
) -> EnergyReport {
    let period = result.sample_period;
    let mut per_label: BTreeMap<String, EnergyRow> = BTreeMap::new();
    for a in &result.db.appliances {
        let label = assignment.label_of(a.id);
        per_label.entry(label.to_string()).or_default().tracked += samples_kwh(&a.trace, period);
    }
    for (label, trace) in &reference.truth {
        per_label.entry(label.clone()).or_default().truth = Some(energy_kwh(trace));
    }
    for (label, trace) in &reference.filtered_truth {
        per_label.entry(label.clone()).or_default().filtered = Some(energy_kwh(trace));
    }

    let tracked = per_label.values().map(|r| r.tracked).sum();
    let truth = match reference.aggregate_truth {
        Some(t) => Some(energy_kwh(t)),
        None if !reference.truth.is_empty() => Some(reference.truth.values().map(|t| energy_kwh(t)).sum()),
        None => None,
    };
    EnergyReport {
        per_label,
        aggregate: EnergyRow {
            truth,
            filtered: Some(energy_kwh(filtered)),
            tracked,
        },
        residual: samples_kwh(&result.residual, period),
        baseline: samples_kwh(&result.baseline, period),
    }
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

impl EnergyReport {
    /// CSV with one row per label followed by the aggregate. Columns with
    /// no reference data are left empty.
    pub fn render(&self) -> String {
        let mut out = String::from("label,truth_kwh,filtered_kwh,tracked_kwh,accuracy_pct,accuracy_vs_filtered_pct\n");
        let rows = self
            .per_label
            .iter()
            .filter(|(label, _)| label.as_str() != UNKNOWN)
            .chain(self.per_label.get_key_value(UNKNOWN))
            .map(|(l, r)| (l.as_str(), r))
            .chain(std::iter::once(("Aggregate", &self.aggregate)));
        for (label, row) in rows {
            let _ = writeln!(
                out,
                "{label},{},{},{:.6},{},{}",
                cell(row.truth, 6),
                cell(row.filtered, 6),
                row.tracked,
                cell(row.accuracy(), 2),
                cell(row.accuracy_vs_filtered(), 2),
            );
        }
        out
    }
}

/// Columns `index,truth,tracked` for plotting aggregate comparisons.
pub fn render_plot_data(truth: Option<&[f64]>, tracked: &[f64]) -> String {
    let mut out = String::from("index,truth,tracked\n");
    for (i, v) in tracked.iter().enumerate() {
        let t = truth.and_then(|t| t.get(i)).map(|x| format!("{x:.3}")).unwrap_or_default();
        let _ = writeln!(out, "{i},{t},{v:.3}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelling::{assign_labels, parse_partition_map};
    use crate::models::{ApplianceDb, ApplianceId, ApplianceModel, GaussianStat};
    use proptest::prelude::*;

    #[test]
    fn constant_kilowatt_hour() {
        let t = PowerTrace::from_samples(vec![1000.0; 3600]);
        assert_eq!(energy_kwh(&t), 1.0);
        assert_eq!(energy_kwh(&PowerTrace::from_samples(vec![0.0; 100])), 0.0);
        let half_hz = PowerTrace::new(0.0, 2.0, vec![1000.0; 1800]).unwrap();
        assert_eq!(energy_kwh(&half_hz), 1.0);
    }

    #[test]
    fn reported_accuracies() {
        assert_eq!(accuracy(2.0, 2.0).unwrap(), 100.0);
        assert!((accuracy(2.803, 2.990).unwrap() - 93.7).abs() < 0.05);
        assert!((accuracy(2.604, 2.753).unwrap() - 94.5).abs() < 0.1);
        assert!(accuracy(3.0, 2.0).unwrap() > 100.0);
        assert_eq!(accuracy(1.0, 0.0), Err(MetricsError::ZeroTruthEnergy));
    }

    fn fixture() -> (DisaggregationResult, LabelAssignment, PowerTrace) {
        let map = parse_partition_map("NA,20,90,3000,6000,Clothes Dryer,blue\n", "NA").unwrap();
        let mut db = ApplianceDb::new(1.0);
        let mut dryer = ApplianceModel::new(ApplianceId(1));
        dryer.p_on = GaussianStat::from_values(5.0, [4500.0]);
        dryer.d_on = GaussianStat::from_values(0.5, [30.0]);
        dryer.trace = vec![4500.0; 3600];
        let mut other = ApplianceModel::new(ApplianceId(2));
        other.trace = vec![100.0; 3600];
        db.appliances = vec![dryer, other];
        let result = DisaggregationResult {
            db,
            residual: vec![-10.0; 3600],
            baseline: vec![50.0; 3600],
            decisions: Vec::new(),
            start_epoch: 0.0,
            sample_period: 1.0,
        };
        let asg = assign_labels(&result.db, &map);
        let filtered = PowerTrace::from_samples(vec![4640.0; 3600]);
        (result, asg, filtered)
    }

    #[test]
    fn report_without_truth() {
        let (result, asg, filtered) = fixture();
        let report = build_report(&Reference::default(), &filtered, &result, &asg);
        assert_eq!(report.per_label["Clothes Dryer"].tracked, 4.5);
        assert_eq!(report.per_label["Clothes Dryer"].truth, None);
        assert_eq!(report.aggregate.truth, None);
        assert_eq!(report.aggregate.tracked, 4.6);
        let csv = report.render();
        assert!(csv.contains("Clothes Dryer,,,4.500000,,\n"));
        assert!(csv.ends_with("Aggregate,,4.640000,4.600000,,99.14\n"));
    }

    #[test]
    fn bookkeeping_identity() {
        let (result, asg, filtered) = fixture();
        let report = build_report(&Reference::default(), &filtered, &result, &asg);
        let filtered_kwh = report.aggregate.filtered.unwrap();
        let sum = report.aggregate.tracked + report.residual + report.baseline;
        assert!((sum - filtered_kwh).abs() < 1e-12);
    }

    #[test]
    fn report_with_truth() {
        let (result, asg, filtered) = fixture();
        let truth = PowerTrace::from_samples(vec![5000.0; 3600]);
        let mut reference = Reference::default();
        reference.truth.insert("Clothes Dryer".into(), &truth);
        let report = build_report(&reference, &filtered, &result, &asg);
        let row = &report.per_label["Clothes Dryer"];
        assert_eq!(row.truth, Some(5.0));
        assert!((row.accuracy().unwrap() - 90.0).abs() < 1e-9);
        assert_eq!(report.aggregate.truth, Some(5.0));
    }

    proptest! {
        #[test]
        fn energy_is_linear(pairs in prop::collection::vec((0.0f64..5000.0, 0.0f64..5000.0), 1..500)) {
            let a = PowerTrace::from_samples(pairs.iter().map(|p| p.0).collect());
            let b = PowerTrace::from_samples(pairs.iter().map(|p| p.1).collect());
            let sum = PowerTrace::from_samples(pairs.iter().map(|p| p.0 + p.1).collect());
            let lhs = energy_kwh(&sum);
            let rhs = energy_kwh(&a) + energy_kwh(&b);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1e-12));
        }

        #[test]
        fn self_accuracy_is_exactly_100(v in 1e-6f64..1e6) {
            prop_assert_eq!(accuracy(v, v).unwrap(), 100.0);
        }
    }
}
