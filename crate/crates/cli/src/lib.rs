//! `cfsim`: generate traces, run policy sweeps and compare their results.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use carbon_faas_sim::engine::{
    run_observed, CsvEventWriter, NullObserver, RunMetrics, ServerParams, SimConfig, SimError,
};
use carbon_faas_sim::traces::{
    self, gen_carbon_trace, gen_function_trace, gen_solar_trace, reference_locations, LocationSpec,
    TraceError, Workload, WorkloadProfile, REFERENCE_SITES, SECONDS_PER_DAY,
};
use carbon_faas_sim::{BalancerPolicy, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const METRICS_FILE: &str = "metrics.json";
pub const EVENTS_FILE: &str = "events.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOLVED_SPEC_FILE: &str = "experiment.json";
pub const HOURLY_FILE: &str = "hourly_emissions.csv";

pub const SUMMARY_HEADER: [&str; 16] = [
    "policy",
    "mode",
    "seed",
    "duration_s",
    "total_energy_wh",
    "total_emissions_lbs",
    "baseline_emissions_lbs",
    "emissions_avoided_lbs",
    "downtime_server_s",
    "shutdown_count",
    "critical_battery_events",
    "cold_starts",
    "warm_starts",
    "failed_invocations",
    "mean_latency_s",
    "p95_latency_s",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Runtime { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime { .. } => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cfsim", version, about = "Carbon- and energy-aware serverless load-balancing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one or more balancing policies on identical traces.
    Simulate(SimulateArgs),
    /// Write synthetic function, carbon and solar traces plus a locations manifest.
    GenTraces(GenTracesArgs),
    /// Compare finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment spec (JSON). Flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// grid or isolated.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Comma-separated policies: carbon-aware, openwhisk, consistent-hashing, greedy.
    #[arg(long, value_delimiter = ',')]
    pub policy: Option<Vec<BalancerPolicy>>,
    #[arg(long)]
    pub days: Option<u64>,
    /// Synthetic workload profile: rare, medium or high.
    #[arg(long)]
    pub profile: Option<WorkloadProfile>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTracesArgs {
    #[arg(long, default_value = "high")]
    pub profile: WorkloadProfile,
    #[arg(long, default_value_t = 1)]
    pub days: u64,
    /// Number of reference locations, taken in manifest order.
    #[arg(long, default_value_t = REFERENCE_SITES.len())]
    pub locations: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories: a `simulate` output directory or a single policy directory.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Also write per-hour emissions and emissions avoided.
    #[arg(long)]
    pub hourly: bool,
    /// Directory for the hourly CSV (defaults to the first run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Trace files replacing the synthetic generators. Missing entries stay synthetic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFiles {
    pub functions: Option<PathBuf>,
    pub carbon: Option<PathBuf>,
    pub solar: Option<PathBuf>,
}

/// A sweep: simulation parameters, the policies to compare and where to write results.
/// Relative paths are resolved against the spec file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub policies: Vec<BalancerPolicy>,
    pub seed: u64,
    pub days: u64,
    /// Overrides `days` when set.
    pub duration_s: Option<u64>,
    pub profile: WorkloadProfile,
    pub num_locations: usize,
    pub locations_manifest: Option<PathBuf>,
    pub traces: TraceFiles,
    pub server: ServerParams,
    pub tick_s: u64,
    pub num_function_types: u32,
    pub containers_per_server: usize,
    pub mem_per_function: u32,
    pub cold_start_penalty_s: f64,
    pub warm_start_penalty_s: f64,
    pub profile_delay_s: u64,
    pub profile_period_s: u64,
    pub max_retries: u32,
    pub retry_interval_s: u64,
    pub retry_on_high_carbon: Option<f64>,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let base = SimConfig::from_locations(
            Mode::GridConnected,
            BalancerPolicy::CarbonAware,
            42,
            SECONDS_PER_DAY,
            &[],
            ServerParams::default(),
        );
        ExperimentSpec {
            mode: Mode::GridConnected,
            policies: BalancerPolicy::ALL.to_vec(),
            seed: 42,
            days: 1,
            duration_s: None,
            profile: WorkloadProfile::High,
            num_locations: REFERENCE_SITES.len(),
            locations_manifest: None,
            traces: TraceFiles::default(),
            server: ServerParams::default(),
            tick_s: base.tick_s,
            num_function_types: base.num_function_types,
            containers_per_server: base.containers_per_server,
            mem_per_function: base.mem_per_function,
            cold_start_penalty_s: base.cold_start_penalty_s,
            warm_start_penalty_s: base.warm_start_penalty_s,
            profile_delay_s: base.profile_delay_s,
            profile_period_s: base.profile_period_s,
            max_retries: base.max_retries,
            retry_interval_s: base.retry_interval_s,
            retry_on_high_carbon: None,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config_err = |message: String| CliError::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut spec.out);
        for p in [
            spec.locations_manifest.as_mut(),
            spec.traces.functions.as_mut(),
            spec.traces.carbon.as_mut(),
            spec.traces.solar.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(spec)
    }

    pub fn apply(&mut self, args: &SimulateArgs) {
        if let Some(seed) = args.seed {
            self.seed = seed;
        }
        if let Some(mode) = args.mode {
            self.mode = mode;
        }
        if let Some(policies) = &args.policy {
            self.policies = policies.clone();
        }
        if let Some(days) = args.days {
            self.days = days;
            self.duration_s = None;
        }
        if let Some(profile) = args.profile {
            self.profile = profile;
        }
        if let Some(out) = &args.out {
            self.out = out.clone();
        }
    }

    pub fn duration_s(&self) -> u64 {
        self.duration_s.unwrap_or(self.days * SECONDS_PER_DAY)
    }

    /// Policies in first-mention order without repeats.
    pub fn policy_list(&self) -> Result<Vec<BalancerPolicy>, CliError> {
        let mut out = Vec::new();
        for &p in &self.policies {
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(CliError::Usage("at least one policy is required".into()));
        }
        Ok(out)
    }

    pub fn locations(&self) -> Result<Vec<LocationSpec>, CliError> {
        match &self.locations_manifest {
            Some(path) => Ok(traces::read_manifest(path)?),
            None => {
                if self.num_locations == 0 || self.num_locations > REFERENCE_SITES.len() {
                    return Err(CliError::Usage(format!(
                        "num_locations must be between 1 and {}",
                        REFERENCE_SITES.len()
                    )));
                }
                Ok(reference_locations(self.num_locations))
            }
        }
    }

    pub fn workload(&self, locations: &[LocationSpec]) -> Result<Workload, CliError> {
        let duration = self.duration_s();
        let mut w = Workload::synthetic(self.profile, 0, locations, self.seed);
        w.functions = match &self.traces.functions {
            Some(p) => traces::load_function_csv(p)?,
            None => gen_function_trace(self.profile, duration.div_ceil(60) as usize, self.seed),
        };
        w.carbon = match &self.traces.carbon {
            Some(p) => traces::load_carbon_csv(p)?,
            None => locations
                .iter()
                .map(|l| gen_carbon_trace(&l.location_id, l.avg_moer, duration, self.seed))
                .collect(),
        };
        w.solar = match &self.traces.solar {
            Some(p) => traces::load_solar_csv(p, traces::DEFAULT_SOLAR_ARRAY_W)?,
            None => locations
                .iter()
                .map(|l| gen_solar_trace(&l.location_id, l.avg_gti, l.solar_array_w, duration, self.seed))
                .collect(),
        };
        Ok(w)
    }

    /// Simulation config for `policy`, validated.
    pub fn sim_config(&self, policy: BalancerPolicy, locations: &[LocationSpec]) -> Result<SimConfig, CliError> {
        let mut cfg = SimConfig::from_locations(self.mode, policy, self.seed, self.duration_s(), locations, self.server);
        cfg.tick_s = self.tick_s;
        cfg.num_function_types = self.num_function_types;
        cfg.mem_per_function = self.mem_per_function;
        cfg.set_containers_per_server(self.containers_per_server);
        cfg.cold_start_penalty_s = self.cold_start_penalty_s;
        cfg.warm_start_penalty_s = self.warm_start_penalty_s;
        cfg.profile_delay_s = self.profile_delay_s;
        cfg.profile_period_s = self.profile_period_s;
        cfg.max_retries = self.max_retries;
        cfg.retry_interval_s = self.retry_interval_s;
        cfg.retry_on_high_carbon = self.retry_on_high_carbon;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::GenTraces(a) => cmd_gen_traces(&a),
        Command::Report(a) => cmd_report(&a).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<RunMetrics>, CliError> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    spec.apply(args);
    simulate(&spec)
}

/// Runs every policy of `spec` and writes per-policy metrics and event logs, the
/// resolved spec, and a summary. The baseline is simulated even if not requested so
/// that emissions avoided can be reported; it is only written when requested.
pub fn simulate(spec: &ExperimentSpec) -> Result<Vec<RunMetrics>, CliError> {
    let policies = spec.policy_list()?;
    let locations = spec.locations()?;
    let workload = spec.workload(&locations)?;
    let mut configs = Vec::new();
    for &p in &policies {
        configs.push((spec.sim_config(p, &locations)?, true));
    }
    if !policies.contains(&BalancerPolicy::OpenWhiskBaseline) {
        configs.push((spec.sim_config(BalancerPolicy::OpenWhiskBaseline, &locations)?, false));
    }

    fs::create_dir_all(&spec.out).map_err(output_err(&spec.out))?;
    let mut dirs = Vec::new();
    for (cfg, write) in &configs {
        if *write {
            let dir = spec.out.join(cfg.policy.name());
            fs::create_dir_all(&dir).map_err(output_err(&dir))?;
            dirs.push(Some(dir));
        } else {
            dirs.push(None);
        }
    }

    let results: Vec<Result<RunMetrics, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .zip(&dirs)
            .map(|((cfg, _), dir)| {
                let workload = &workload;
                scope.spawn(move || run_one(cfg, workload, dir.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut metrics = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let baseline = metrics
        .iter()
        .find(|m| m.policy == BalancerPolicy::OpenWhiskBaseline)
        .map(|m| m.total_emissions_lbs)
        .expect("baseline is always simulated");
    for m in &mut metrics {
        m.emissions_avoided_vs_baseline_lbs = Some(baseline - m.total_emissions_lbs);
    }
    metrics.truncate(policies.len());

    for (m, dir) in metrics.iter().zip(&dirs) {
        let dir = dir.as_ref().expect("requested policies have directories");
        write_json(&dir.join(METRICS_FILE), m)?;
    }
    write_json(&spec.out.join(RESOLVED_SPEC_FILE), spec)?;
    write_summary(&spec.out.join(SUMMARY_FILE), &metrics, baseline)?;
    Ok(metrics)
}

fn run_one(cfg: &SimConfig, workload: &Workload, dir: Option<&Path>) -> Result<RunMetrics, CliError> {
    let Some(dir) = dir else {
        return Ok(run_observed(cfg, workload, &mut NullObserver)?);
    };
    let path = dir.join(EVENTS_FILE);
    let file = File::create(&path).map_err(output_err(&path))?;
    let runtime = |e: csv::Error| CliError::Runtime {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut writer = CsvEventWriter::new(BufWriter::new(file)).map_err(runtime)?;
    let metrics = run_observed(cfg, workload, &mut writer)?;
    writer.finish().map_err(runtime)?;
    Ok(metrics)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(output_err(path))
}

fn write_summary(path: &Path, metrics: &[RunMetrics], baseline: f64) -> Result<(), CliError> {
    let to_cli = |e: csv::Error| CliError::Runtime {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_cli)?;
    w.write_record(SUMMARY_HEADER).map_err(to_cli)?;
    for m in metrics {
        w.write_record([
            m.policy.name().to_string(),
            m.mode.to_string(),
            m.seed.to_string(),
            m.duration_s.to_string(),
            m.total_energy_wh.to_string(),
            m.total_emissions_lbs.to_string(),
            baseline.to_string(),
            (baseline - m.total_emissions_lbs).to_string(),
            m.downtime_server_s.to_string(),
            m.shutdown_count.to_string(),
            m.critical_battery_events.to_string(),
            m.cold_starts.to_string(),
            m.warm_starts.to_string(),
            m.failed_invocations.to_string(),
            m.latency.mean_s.to_string(),
            m.latency.p95_s.to_string(),
        ])
        .map_err(to_cli)?;
    }
    w.flush().map_err(output_err(path))
}

pub fn cmd_gen_traces(args: &GenTracesArgs) -> Result<(), CliError> {
    if args.locations == 0 || args.locations > REFERENCE_SITES.len() {
        return Err(CliError::Usage(format!(
            "--locations must be between 1 and {}",
            REFERENCE_SITES.len()
        )));
    }
    if args.days == 0 {
        return Err(CliError::Usage("--days must be positive".into()));
    }
    let locations = reference_locations(args.locations);
    let duration = args.days * SECONDS_PER_DAY;
    let workload = Workload::synthetic(args.profile, duration, &locations, args.seed);
    fs::create_dir_all(&args.out).map_err(output_err(&args.out))?;
    traces::write_function_csv(&args.out.join("functions.csv"), &workload.functions)?;
    traces::write_carbon_csv(&args.out.join("carbon.csv"), &workload.carbon)?;
    traces::write_solar_csv(&args.out.join("solar.csv"), &workload.solar)?;
    traces::write_manifest(&args.out.join("locations.json"), &locations)?;
    Ok(())
}

/// A finished run found on disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

/// Metrics under `dir`: its own `metrics.json`, or one per policy subdirectory.
pub fn find_runs(dir: &Path) -> Result<Vec<RunRecord>, CliError> {
    let missing = || CliError::Config {
        path: dir.to_path_buf(),
        message: format!("no {METRICS_FILE} found"),
    };
    let direct = dir.join(METRICS_FILE);
    if direct.is_file() {
        return Ok(vec![read_run(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|_| missing())?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(METRICS_FILE).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(missing());
    }
    subdirs.iter().map(|d| read_run(d)).collect()
}

fn read_run(dir: &Path) -> Result<RunRecord, CliError> {
    let path = dir.join(METRICS_FILE);
    let config_err = |message: String| CliError::Config {
        path: path.clone(),
        message,
    };
    let text = fs::read_to_string(&path).map_err(|e| config_err(e.to_string()))?;
    let metrics = serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        metrics,
    })
}

fn labels(runs: &[RunRecord]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for r in runs {
        *seen.entry(r.metrics.policy.name()).or_default() += 1;
    }
    runs.iter()
        .map(|r| {
            let name = r.metrics.policy.name();
            if seen[name] > 1 {
                format!("{}:{name}", r.dir.display())
            } else {
                name.to_string()
            }
        })
        .collect()
}

/// Emissions avoided per run, measured against an OpenWhisk baseline run among `runs`
/// when there is exactly one, else as recorded in the metrics.
fn avoided(runs: &[RunRecord]) -> Vec<Option<f64>> {
    let baselines: Vec<&RunRecord> = runs
        .iter()
        .filter(|r| r.metrics.policy == BalancerPolicy::OpenWhiskBaseline)
        .collect();
    runs.iter()
        .map(|r| match baselines.as_slice() {
            [b] => Some(b.metrics.total_emissions_lbs - r.metrics.total_emissions_lbs),
            _ => r.metrics.emissions_avoided_vs_baseline_lbs,
        })
        .collect()
}

/// Builds the comparison table and, with `--hourly`, writes the per-hour CSV.
pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    if args.dirs.is_empty() {
        return Err(CliError::Usage("at least one run directory is required".into()));
    }
    let mut runs = Vec::new();
    for d in &args.dirs {
        runs.extend(find_runs(d)?);
    }
    let labels = labels(&runs);
    let avoided = avoided(&runs);
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut table = format!(
        "{:<width$} {:>8} {:>14} {:>14} {:>12} {:>9} {:>8} {:>10} {:>10} {:>8} {:>10}\n",
        "policy", "mode", "emissions_lbs", "avoided_lbs", "downtime_s", "shutdowns", "critical", "cold", "warm", "failed", "latency_s"
    );
    for ((r, label), av) in runs.iter().zip(&labels).zip(&avoided) {
        let m = &r.metrics;
        table.push_str(&format!(
            "{:<width$} {:>8} {:>14.6} {:>14} {:>12} {:>9} {:>8} {:>10} {:>10} {:>8} {:>10.4}\n",
            label,
            m.mode.as_str(),
            m.total_emissions_lbs,
            av.map_or_else(|| "-".to_string(), |v| format!("{v:.6}")),
            m.downtime_server_s,
            m.shutdown_count,
            m.critical_battery_events,
            m.cold_starts,
            m.warm_starts,
            m.failed_invocations,
            m.latency.mean_s,
        ));
    }
    if args.hourly {
        let dir = args.out.clone().unwrap_or_else(|| args.dirs[0].clone());
        fs::create_dir_all(&dir).map_err(output_err(&dir))?;
        write_hourly(&dir.join(HOURLY_FILE), &runs, &labels)?;
    }
    Ok(table)
}

fn write_hourly(path: &Path, runs: &[RunRecord], labels: &[String]) -> Result<(), CliError> {
    let to_cli = |e: csv::Error| CliError::Runtime {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let baseline = match runs
        .iter()
        .filter(|r| r.metrics.policy == BalancerPolicy::OpenWhiskBaseline)
        .collect::<Vec<_>>()
        .as_slice()
    {
        [b] => Some(&b.metrics.hourly_emissions_lbs),
        _ => None,
    };
    let hours = runs.iter().map(|r| r.metrics.hourly_emissions_lbs.len()).max().unwrap_or(0);
    let mut header = vec!["hour".to_string()];
    for l in labels {
        header.push(format!("{l}_emissions_lbs"));
        if baseline.is_some() {
            header.push(format!("{l}_avoided_lbs"));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(to_cli)?;
    w.write_record(&header).map_err(to_cli)?;
    for h in 0..hours {
        let mut row = vec![h.to_string()];
        for r in runs {
            let own = r.metrics.hourly_emissions_lbs.get(h).copied();
            row.push(own.map(|v| v.to_string()).unwrap_or_default());
            if let Some(b) = baseline {
                let av = own.zip(b.get(h)).map(|(o, b)| b - o);
                row.push(av.map(|v| v.to_string()).unwrap_or_default());
            }
        }
        w.write_record(&row).map_err(to_cli)?;
    }
    w.flush().map_err(output_err(path))
}
