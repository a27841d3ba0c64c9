use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nilm_core::events::{detect_events, render_events};
use nilm_core::filters::{run_pipeline_timed, StageMask};
use nilm_core::labelling::{assign_labels, merge_same_label};
use nilm_core::mckp::{brute_force, parse_instance, solve};
use nilm_core::runner::{
    evaluate, read_result, read_truth_dir, run_all, write_household, write_result, LabelConfig, PipelineConfig,
    RunError,
    RunRequest,
};
use nilm_core::signal::{export_trace, load_trace, ColumnSpec};
use nilm_core::synth::{generate, three_appliance_scenario, Scenario};
use nilm_core::tracker::track;

/// Unsupervised load disaggregation of whole-house power traces.
#[derive(Parser, Debug)]
#[command(name = "nilm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic household with per-appliance ground truth.
    Synth(SynthArgs),
    /// Run the filter pipeline over a trace.
    Filter(FilterArgs),
    /// Detect ON/OFF step events.
    Events(EventsArgs),
    /// Track appliances in a filtered trace.
    Disagg(DisaggArgs),
    /// Label a result's appliances and merge those sharing a label.
    Label(LabelArgs),
    /// Compare tracked energy with ground truth.
    Eval(EvalArgs),
    /// Solve one knapsack instance (debugging aid).
    Mckp(MckpArgs),
    /// Filter, track, label and evaluate in one go.
    RunAll(RunAllArgs),
}

#[derive(Args, Debug)]
struct Columns {
    /// Zero-based column holding the Unix timestamp.
    #[arg(long, default_value_t = 0)]
    ts_col: usize,
    /// Zero-based column holding the power reading in watts.
    #[arg(long, default_value_t = 1)]
    power_col: usize,
    /// Nominal sample period in seconds (inferred from timestamps if absent).
    #[arg(long)]
    period: Option<f64>,
}

impl Columns {
    fn spec(&self) -> ColumnSpec {
        ColumnSpec {
            timestamp: self.ts_col,
            power: self.power_col,
            period: self.period,
            allow_negative: false,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scenario TOML; the built-in three-appliance household when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Length of the built-in scenario in samples.
    #[arg(long, default_value_t = 10_800)]
    duration: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Pipeline config TOML (only its `[filter]` table is used).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    columns: Columns,
    #[arg(long)]
    skip_median: bool,
    #[arg(long)]
    skip_bilateral: bool,
    #[arg(long)]
    skip_anisotropic: bool,
    #[arg(long)]
    skip_domain_transform: bool,
    #[arg(long)]
    skip_sharpen: bool,
}

#[derive(Args, Debug)]
struct EventsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    threshold: f64,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    columns: Columns,
}

#[derive(Args, Debug)]
struct DisaggArgs {
    /// Filtered trace.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured event threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Extra copy of the appliance database.
    #[arg(long)]
    dump_db: Option<PathBuf>,
    #[command(flatten)]
    columns: Columns,
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Partition map file; the built-in NA map when absent.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value = "NA")]
    region: String,
    /// `db.txt` inside a result directory.
    #[arg(long)]
    db: PathBuf,
    /// Where to write the merged result (default: `merged/` beside the db).
    #[arg(long)]
    merged_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of `<label>.csv` ground-truth traces.
    #[arg(long)]
    truth_dir: PathBuf,
    #[arg(long)]
    result_dir: PathBuf,
    /// Raw aggregate trace; the sum of the truth traces when absent.
    #[arg(long)]
    aggregate: Option<PathBuf>,
    /// Report CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-data CSV (default: `plot.csv` in the result directory).
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MckpArgs {
    #[arg(long)]
    capacity: u32,
    /// `appliance_id,weight,profit` rows.
    #[arg(long)]
    instance: PathBuf,
    /// Also solve by enumeration and fail if the answers differ.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct RunAllArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Ground-truth traces for the energy report.
    #[arg(long)]
    truth_dir: Option<PathBuf>,
    /// Overrides the configured event threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Overrides the configured partition map.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Overrides the configured region.
    #[arg(long)]
    region: Option<String>,
    #[command(flatten)]
    columns: Columns,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.downcast_ref::<RunError>().is_some_and(RunError::is_usage));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Filter(a) => filter(a),
        Command::Events(a) => events(a),
        Command::Disagg(a) => disagg(a),
        Command::Label(a) => label(a),
        Command::Eval(a) => eval(a),
        Command::Mckp(a) => mckp(a),
        Command::RunAll(a) => run(a),
    }
}

fn require(path: &Path) -> Result<(), RunError> {
    if path.exists() {
        Ok(())
    } else {
        Err(RunError::MissingInput(path.to_path_buf()))
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut scenario = match &a.scenario {
        Some(path) => {
            require(path)?;
            let text = fs::read_to_string(path)?;
            Scenario::from_toml(&text).map_err(|e| RunError::Config(e.to_string()))?
        }
        None => three_appliance_scenario(a.duration, 0),
    };
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let household = generate(&scenario).map_err(|e| RunError::Config(e.to_string()))?;
    write_household(&a.out_dir, &household)?;
    for (name, kwh) in &household.energies {
        println!("{name}: {kwh:.6} kWh");
    }
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    require(&a.input)?;
    let config = load_config(a.config.as_deref())?;
    let trace = load_trace(&a.input, a.columns.spec())?;
    let mask = StageMask {
        skip_median: a.skip_median,
        skip_bilateral: a.skip_bilateral,
        skip_anisotropic: a.skip_anisotropic,
        skip_domain_transform: a.skip_domain_transform,
        skip_sharpen: a.skip_sharpen,
    };
    let out = run_pipeline_timed(&trace, &config.filter, mask)?;
    export_trace(&out.trace, &a.out)?;
    for (stage, elapsed) in &out.timings {
        eprintln!("{},{:.6}", stage.id(), elapsed.as_secs_f64());
    }
    Ok(())
}

fn events(a: EventsArgs) -> Result<()> {
    require(&a.input)?;
    let trace = load_trace(&a.input, a.columns.spec())?;
    let events = detect_events(&trace, a.threshold)?;
    emit(a.out.as_deref(), &render_events(&events))
}

fn disagg(a: DisaggArgs) -> Result<()> {
    require(&a.input)?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.threshold {
        config.tracker.threshold_s = s;
    }
    config.validate()?;
    let filtered = load_trace(&a.input, a.columns.spec())?;
    let result = track(&filtered, &config.tracker)?;
    write_result(&a.out_dir, &filtered, &result, None)?;
    if let Some(path) = &a.dump_db {
        fs::write(path, result.db.dump()).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("{} appliances, {} events", result.db.len(), result.decisions.len());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    require(&a.db)?;
    let map = LabelConfig {
        map: a.map,
        region: a.region,
    }
    .partition_map()?;
    let dir = a.db.parent().unwrap_or(Path::new("."));
    let stored = read_result(dir)?;
    let assignment = assign_labels(&stored.result.db, &map);
    fs::write(dir.join("labels.csv"), assignment.render())?;
    let merged = merge_same_label(&stored.result, &assignment);
    let merged_assignment = assign_labels(&merged.db, &map);
    let merged_dir = a.merged_dir.unwrap_or_else(|| dir.join("merged"));
    write_result(&merged_dir, &stored.filtered, &merged, Some(&merged_assignment))?;
    print!("{}", assignment.render());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let truth = read_truth_dir(&a.truth_dir)?;
    let stored = read_result(&a.result_dir)?;
    let aggregate = match &a.aggregate {
        Some(path) => {
            require(path)?;
            Some(load_trace(path, ColumnSpec::default())?)
        }
        None => None,
    };
    let (report, plot) = evaluate(&stored, &truth, aggregate.as_ref());
    let plot_path = a.plot.unwrap_or_else(|| a.result_dir.join("plot.csv"));
    fs::write(&plot_path, plot).with_context(|| format!("writing {}", plot_path.display()))?;
    emit(a.out.as_deref(), &report.render())
}

fn mckp(a: MckpArgs) -> Result<()> {
    require(&a.instance)?;
    let instance = parse_instance(&fs::read_to_string(&a.instance)?, a.capacity)?;
    let solution = solve(&instance);
    if a.check {
        let oracle = brute_force(&instance)?;
        anyhow::ensure!(oracle == solution, "solver disagrees with enumeration: {oracle:?}");
    }
    print!("{}", solution.render());
    Ok(())
}

fn run(a: RunAllArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.threshold {
        config.tracker.threshold_s = s;
    }
    if let Some(map) = a.map {
        config.labels.map = Some(map);
    }
    if let Some(region) = a.region {
        config.labels.region = region;
    }
    config.validate()?;
    let manifest = run_all(&RunRequest {
        config: &config,
        config_path: a.config.as_deref(),
        input: &a.input,
        columns: a.columns.spec(),
        out_dir: &a.out_dir,
        truth_dir: a.truth_dir.as_deref(),
    })?;
    print!("{}", manifest.render_timings());
    Ok(())
}
