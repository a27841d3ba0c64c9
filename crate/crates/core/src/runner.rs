//! End-to-end runs and the on-disk layout of their inputs and outputs.
//!
//! A result directory holds one `appliance_<id>.csv` per appliance plus
//! `filtered.csv`, `residual.csv`, `baseline.csv`, `db.txt`, `audit.csv` and,
//! once labelled, `labels.csv`. [`run_all`] writes a result directory for the
//! raw tracker output, a `merged/` one after label merging, the event list,
//! an optional energy report, and two run records: `manifest.csv` with
//! per-stage wall times and `run_info.toml` with the configuration, input
//! digests and output list.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{detect_events, render_events, EventError};
use crate::filters::{run_pipeline_timed, FilterConfig, FilterError, StageMask};
use crate::labelling::{
    assign_labels, load_partition_map, merge_same_label, parse_partition_map, LabelAssignment, LabelError,
    PartitionMap,
};
use crate::metrics::{build_report, render_plot_data, EnergyReport, Reference};
use crate::models::{ApplianceDb, ModelError};
use crate::signal::{export_trace, load_trace, ColumnSpec, PowerTrace, SignalError};
use crate::synth::Household;
use crate::tracker::{render_audit_log, run, DisaggregationResult, TrackerConfig, TrackerError};

/// The partition map shipped for North American households.
pub const NA_MAP: &str = include_str!("../../../maps/na.pmap");

/// Manifest rows, in the order they are written.
pub const STAGE_NAMES: [&str; 9] = [
    "1a_median_filter",
    "1b_bilateral_filter",
    "1c_anisotropic_filter",
    "1d_edge_preserving_filter",
    "1e_edge_sharpening",
    "1_filter_pipeline",
    "2_appliance_tracking",
    "3_appliance_labelling",
    "total",
];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("input `{}` does not exist", .0.display())]
    MissingInput(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl RunError {
    /// Whether the failure is the caller's (bad arguments, missing files)
    /// rather than a stage failing on valid input.
    pub fn is_usage(&self) -> bool {
        matches!(self, RunError::MissingInput(_) | RunError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Partition map file; the shipped NA map when absent.
    pub map: Option<PathBuf>,
    pub region: String,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            map: None,
            region: "NA".into(),
        }
    }
}

impl LabelConfig {
    pub fn partition_map(&self) -> Result<PartitionMap, RunError> {
        match &self.map {
            Some(path) if !path.exists() => Err(RunError::MissingInput(path.clone())),
            Some(path) => Ok(load_partition_map(path, &self.region)?),
            None => Ok(parse_partition_map(NA_MAP, &self.region)?),
        }
    }
}

/// Every stage parameter, read from one TOML file with `[filter]`,
/// `[tracker]` and `[labels]` tables. Missing keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub tracker: TrackerConfig,
    pub labels: LabelConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let config: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Range checks on every stage's parameters.
    pub fn validate(&self) -> Result<(), RunError> {
        self.filter.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.tracker.validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        if !path.exists() {
            return Err(RunError::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn partition_map(&self) -> Result<PartitionMap, RunError> {
        self.labels.partition_map()
    }
}

pub fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, RunError> {
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// Write through a sibling temporary file and rename, so readers never see
/// a half-written file.
fn write_atomic(path: &Path, text: &str) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_trace(path: &Path, trace: &PowerTrace) -> Result<PathBuf, RunError> {
    export_trace(trace, path)?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Write a result directory. Returns the files written.
pub fn write_result(
    dir: &Path,
    filtered: &PowerTrace,
    result: &DisaggregationResult,
    assignment: Option<&LabelAssignment>,
) -> Result<Vec<PathBuf>, RunError> {
    create_dir(dir)?;
    let mut written = vec![write_trace(&dir.join("filtered.csv"), filtered)?];
    for a in &result.db.appliances {
        let trace = result.as_trace(a.trace.clone());
        written.push(write_trace(&dir.join(format!("appliance_{}.csv", a.id)), &trace)?);
    }
    written.push(write_trace(&dir.join("residual.csv"), &result.residual_trace())?);
    written.push(write_trace(&dir.join("baseline.csv"), &result.as_trace(result.baseline.clone()))?);
    written.push(write_text(&dir.join("db.txt"), &result.db.dump())?);
    written.push(write_text(&dir.join("audit.csv"), &render_audit_log(&result.decisions))?);
    if let Some(asg) = assignment {
        written.push(write_text(&dir.join("labels.csv"), &asg.render())?);
    }
    Ok(written)
}

/// A result directory read back from disk. Decisions are not restored.
#[derive(Debug, Clone)]
pub struct StoredResult {
    pub filtered: PowerTrace,
    pub result: DisaggregationResult,
    pub labels: Option<LabelAssignment>,
}

fn load_existing(path: &Path, columns: ColumnSpec) -> Result<PowerTrace, RunError> {
    if !path.exists() {
        return Err(RunError::MissingInput(path.to_path_buf()));
    }
    Ok(load_trace(path, columns)?)
}

pub fn read_result(dir: &Path) -> Result<StoredResult, RunError> {
    let db_path = dir.join("db.txt");
    if !db_path.exists() {
        return Err(RunError::MissingInput(db_path));
    }
    let mut db = ApplianceDb::parse(&fs::read_to_string(&db_path).map_err(io_err(&db_path))?)?;
    let period = db.sample_period;
    let columns = ColumnSpec::at_period(period);
    let filtered = load_existing(&dir.join("filtered.csv"), columns)?;
    let residual = load_existing(&dir.join("residual.csv"), columns.signed())?;
    let baseline = load_existing(&dir.join("baseline.csv"), columns)?;
    for a in &mut db.appliances {
        let path = dir.join(format!("appliance_{}.csv", a.id));
        if !path.exists() {
            return Err(RunError::MissingInput(path));
        }
        a.trace = load_trace(&path, columns)?.samples;
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(LabelAssignment::parse(
            &fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?,
        )?)
    } else {
        None
    };
    Ok(StoredResult {
        result: DisaggregationResult {
            db,
            residual: residual.samples,
            baseline: baseline.samples,
            decisions: Vec::new(),
            start_epoch: filtered.start_epoch,
            sample_period: period,
        },
        filtered,
        labels,
    })
}

/// Ground truth for evaluation: every `<label>.csv` in `dir` is that
/// label's sub-metered trace.
pub fn read_truth_dir(dir: &Path) -> Result<BTreeMap<String, PowerTrace>, RunError> {
    if !dir.is_dir() {
        return Err(RunError::MissingInput(dir.to_path_buf()));
    }
    let mut truth = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let label = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            truth.insert(label, load_trace(&path, ColumnSpec::default())?);
        }
    }
    Ok(truth)
}

/// Write `aggregate.csv`, `clean.csv`, `truth/<name>.csv` and
/// `energies.csv` (`label,kwh`).
pub fn write_household(dir: &Path, household: &Household) -> Result<Vec<PathBuf>, RunError> {
    let truth_dir = dir.join("truth");
    create_dir(&truth_dir)?;
    let mut written = vec![
        write_trace(&dir.join("aggregate.csv"), &household.aggregate)?,
        write_trace(&dir.join("clean.csv"), &household.clean)?,
    ];
    for (name, trace) in &household.truth {
        written.push(write_trace(&truth_dir.join(format!("{name}.csv")), trace)?);
    }
    let mut energies = String::from("label,kwh\n");
    for (name, kwh) in &household.energies {
        energies.push_str(&format!("{name},{kwh:.9}\n"));
    }
    written.push(write_text(&dir.join("energies.csv"), &energies)?);
    Ok(written)
}

/// Energy report of a (labelled) result against optional ground truth.
pub fn evaluate(
    stored: &StoredResult,
    truth: &BTreeMap<String, PowerTrace>,
    aggregate_truth: Option<&PowerTrace>,
) -> (EnergyReport, String) {
    let reference = Reference {
        truth: truth.iter().map(|(k, v)| (k.clone(), v)).collect(),
        filtered_truth: BTreeMap::new(),
        aggregate_truth,
    };
    let assignment = stored
        .labels
        .clone()
        .unwrap_or_else(|| LabelAssignment::from_rows(&[]));
    let report = build_report(&reference, &stored.filtered, &stored.result, &assignment);
    let summed_truth: Option<Vec<f64>> = match aggregate_truth {
        Some(t) => Some(t.samples.clone()),
        None if !truth.is_empty() => {
            let mut sum = vec![0.0; stored.result.len()];
            for t in truth.values() {
                for (s, v) in sum.iter_mut().zip(&t.samples) {
                    *s += v;
                }
            }
            Some(sum)
        }
        None => None,
    };
    let plot = render_plot_data(summed_truth.as_deref(), &stored.result.attributed());
    (report, plot)
}

/// What a run did and how long each stage took.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub config_snapshot: String,
    /// `(path, sha256)` of every input file.
    pub input_hashes: Vec<(PathBuf, String)>,
    /// `(stage, seconds)` in [`STAGE_NAMES`] order.
    pub timings: Vec<(String, f64)>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<PathBuf>,
    /// The stage that failed, if any.
    pub failed_stage: Option<String>,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'a str>,
    inputs: BTreeMap<String, &'a str>,
    outputs: Vec<String>,
    config: toml::Value,
}

impl RunManifest {
    pub fn seconds(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|(s, _)| s == stage).map(|(_, t)| *t)
    }

    /// `stage,seconds` CSV.
    pub fn render_timings(&self) -> String {
        let mut out = String::from("stage,seconds\n");
        for (stage, secs) in &self.timings {
            out.push_str(&format!("{stage},{secs:.6}\n"));
        }
        out
    }

    /// TOML record of everything except timings, so reruns with the same
    /// inputs produce the same file.
    pub fn render_info(&self) -> String {
        let info = RunInfo {
            complete: self.failed_stage.is_none(),
            failed_stage: self.failed_stage.as_deref(),
            inputs: self
                .input_hashes
                .iter()
                .map(|(p, h)| (p.display().to_string(), h.as_str()))
                .collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            config: toml::from_str(&self.config_snapshot).unwrap_or(toml::Value::Table(Default::default())),
        };
        toml::to_string(&info).expect("run info is always serializable")
    }

    fn write(&self, out_dir: &Path) -> Result<(), RunError> {
        write_atomic(&out_dir.join("run_info.toml"), &self.render_info())?;
        write_atomic(&out_dir.join("manifest.csv"), &self.render_timings())
    }
}

/// Inputs to [`run_all`].
#[derive(Debug, Clone)]
pub struct RunRequest<'a> {
    pub config: &'a PipelineConfig,
    /// Recorded in the manifest when the configuration came from a file.
    pub config_path: Option<&'a Path>,
    pub input: &'a Path,
    pub columns: ColumnSpec,
    pub out_dir: &'a Path,
    /// Sub-metered traces for the energy report.
    pub truth_dir: Option<&'a Path>,
}

struct Clock {
    run_start: Instant,
    manifest: RunManifest,
}

impl Clock {
    fn record(&mut self, stage: &str, elapsed: Duration) {
        self.manifest.timings.push((stage.to_string(), elapsed.as_secs_f64()));
    }

    fn outputs(&mut self, out_dir: &Path, files: Vec<PathBuf>) {
        for f in files {
            let rel = f.strip_prefix(out_dir).map(Path::to_path_buf).unwrap_or(f);
            self.manifest.outputs.push(rel);
        }
    }
}

/// Filter, track, label and (with ground truth) evaluate one trace.
///
/// A missing input fails before anything is written. Once outputs exist, a
/// failing stage still leaves a manifest with the stages that completed and
/// the name of the one that failed.
pub fn run_all(req: &RunRequest<'_>) -> Result<RunManifest, RunError> {
    let run_start = Instant::now();
    if !req.input.exists() {
        return Err(RunError::MissingInput(req.input.to_path_buf()));
    }
    if let Some(dir) = req.truth_dir.filter(|d| !d.is_dir()) {
        return Err(RunError::MissingInput(dir.to_path_buf()));
    }
    let map = req.config.partition_map()?;
    let mut clock = Clock {
        run_start,
        manifest: RunManifest {
            config_snapshot: req.config.to_toml(),
            ..RunManifest::default()
        },
    };
    clock.manifest.input_hashes.push((req.input.to_path_buf(), sha256_file(req.input)?));
    if let Some(path) = req.config_path {
        clock.manifest.input_hashes.push((path.to_path_buf(), sha256_file(path)?));
    }
    if let Some(path) = &req.config.labels.map {
        clock.manifest.input_hashes.push((path.clone(), sha256_file(path)?));
    }
    create_dir(req.out_dir)?;

    match stages(req, &map, &mut clock) {
        Ok(()) => {
            let total = clock.run_start.elapsed();
            clock.record("total", total);
            clock.manifest.outputs.push("manifest.csv".into());
            clock.manifest.outputs.push("run_info.toml".into());
            clock.manifest.write(req.out_dir)?;
            Ok(clock.manifest)
        }
        Err((stage, e)) => {
            clock.manifest.failed_stage = Some(stage.to_string());
            clock.manifest.write(req.out_dir)?;
            Err(e)
        }
    }
}

type StageResult = Result<(), (&'static str, RunError)>;

fn stages(req: &RunRequest<'_>, map: &PartitionMap, clock: &mut Clock) -> StageResult {
    let out = req.out_dir;
    let at = |stage: &'static str| move |e: RunError| (stage, e);

    let raw = load_trace(req.input, req.columns).map_err(|e| ("0_load", e.into()))?;

    let t = Instant::now();
    let pipeline = run_pipeline_timed(&raw, &req.config.filter, StageMask::default())
        .map_err(|e| ("1_filter_pipeline", e.into()))?;
    let filter_time = t.elapsed();
    for (stage, elapsed) in &pipeline.timings {
        clock.record(stage.id(), *elapsed);
    }
    clock.record("1_filter_pipeline", filter_time);
    let filtered = pipeline.trace;

    let t = Instant::now();
    let events = detect_events(&filtered, req.config.tracker.threshold_s).map_err(|e| ("2_appliance_tracking", e.into()))?;
    let result = run(&filtered, &events, ApplianceDb::new(filtered.sample_period), &req.config.tracker)
        .map_err(|e| ("2_appliance_tracking", e.into()))?;
    clock.record("2_appliance_tracking", t.elapsed());

    let t = Instant::now();
    let assignment = assign_labels(&result.db, map);
    let merged = merge_same_label(&result, &assignment);
    let merged_assignment = assign_labels(&merged.db, map);
    clock.record("3_appliance_labelling", t.elapsed());

    let mut files = vec![write_text(&out.join("events.csv"), &render_events(&events)).map_err(at("output"))?];
    files.extend(write_result(out, &filtered, &result, Some(&assignment)).map_err(at("output"))?);
    files.extend(write_result(&out.join("merged"), &filtered, &merged, Some(&merged_assignment)).map_err(at("output"))?);

    if let Some(dir) = req.truth_dir {
        let truth = read_truth_dir(dir).map_err(at("evaluation"))?;
        let stored = StoredResult {
            filtered: filtered.clone(),
            result: merged,
            labels: Some(merged_assignment),
        };
        let (report, plot) = evaluate(&stored, &truth, Some(&raw));
        files.push(write_text(&out.join("report.csv"), &report.render()).map_err(at("evaluation"))?);
        files.push(write_text(&out.join("plot.csv"), &plot).map_err(at("evaluation"))?);
    }
    clock.outputs(out, files);
    Ok(())
}
