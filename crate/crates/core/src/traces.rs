//! Function, carbon (MOER) and solar (GTI) traces: synthetic generators, CSV
//! ingestion/export and the locations manifest.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FunctionDef;
use crate::ring::{fnv1a_64, hash_to_unit};

pub const SECONDS_PER_DAY: u64 = 86_400;
pub const DEFAULT_NUM_FUNCTION_TYPES: u32 = 5;

pub const FUNCTIONS_HEADER: [&str; 4] = ["minute_index", "function_id", "func_type", "invocations"];
pub const CARBON_HEADER: [&str; 3] = ["timestamp_s", "location_id", "moer_lbs_per_mwh"];
pub const SOLAR_HEADER: [&str; 3] = ["timestamp_s", "location_id", "gti_w_per_m2"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema error: expected header {expected:?}, found {found:?}")]
    Schema {
        path: PathBuf,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: timestamp {timestamp} for {location} does not increase")]
    NonMonotonic {
        path: PathBuf,
        line: u64,
        location: String,
        timestamp: u64,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unknown workload profile {0:?} (expected rare, medium or high)")]
    UnknownProfile(String),
}

/// Workload intensity classes, calibrated to sampled Azure Functions statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadProfile {
    Rare,
    Medium,
    High,
}

impl WorkloadProfile {
    pub fn num_functions(self) -> usize {
        match self {
            WorkloadProfile::Rare => 125,
            WorkloadProfile::Medium => 50,
            WorkloadProfile::High => 50,
        }
    }

    /// Mean invocations per minute across all functions.
    pub fn requests_per_minute(self) -> f64 {
        match self {
            WorkloadProfile::Rare => 15.0,
            WorkloadProfile::Medium => 54.0,
            WorkloadProfile::High => 354.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WorkloadProfile::Rare => "rare",
            WorkloadProfile::Medium => "medium",
            WorkloadProfile::High => "high",
        }
    }
}

impl fmt::Display for WorkloadProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadProfile {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rare" => Ok(WorkloadProfile::Rare),
            "medium" => Ok(WorkloadProfile::Medium),
            "high" => Ok(WorkloadProfile::High),
            _ => Err(TraceError::UnknownProfile(s.to_string())),
        }
    }
}

/// Mean execution time for a function, derived from its id so that generated and
/// loaded traces agree. Uniform over 0.1..2.0 s across ids.
pub fn exec_time_for(function_id: &str) -> f64 {
    let u = hash_to_unit(format!("{function_id}#exec").as_bytes()).position();
    0.1 + 1.9 * u
}

/// Per-minute invocation counts for a set of functions.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionTrace {
    pub functions: Vec<FunctionDef>,
    /// `counts[minute][function index]`.
    counts: Vec<Vec<u32>>,
}

impl FunctionTrace {
    pub fn new(functions: Vec<FunctionDef>, counts: Vec<Vec<u32>>) -> Self {
        debug_assert!(counts.iter().all(|row| row.len() == functions.len()));
        FunctionTrace { functions, counts }
    }

    pub fn minutes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts_at(&self, minute: usize) -> &[u32] {
        self.counts.get(minute).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total_invocations(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| u64::from(c)).sum()
    }

    pub fn requests_per_minute(&self) -> f64 {
        if self.counts.is_empty() {
            0.0
        } else {
            self.total_invocations() as f64 / self.counts.len() as f64
        }
    }
}

fn mix_seed(seed: u64, salt: &str) -> u64 {
    seed ^ fnv1a_64(salt.as_bytes()).rotate_left(17)
}

/// Synthesizes `minutes` of invocations for `profile`.
///
/// A seeded 20% of the functions carry 80% of the aggregate rate; inside each group
/// rates follow normalized exponential draws. Counts are emitted with a fractional
/// carry per function, so every function's total tracks its rate to within one call.
pub fn gen_function_trace(profile: WorkloadProfile, minutes: usize, seed: u64) -> FunctionTrace {
    gen_function_trace_with_types(profile, minutes, seed, DEFAULT_NUM_FUNCTION_TYPES)
}

pub fn gen_function_trace_with_types(
    profile: WorkloadProfile,
    minutes: usize,
    seed: u64,
    num_types: u32,
) -> FunctionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "functions"));
    let n = profile.num_functions();
    let functions: Vec<FunctionDef> = (0..n)
        .map(|i| {
            let id = format!("{}-fn-{i:03}", profile.name());
            let ty = rng.gen_range(0..num_types.max(1));
            let exec = exec_time_for(&id);
            FunctionDef::new(id, ty, exec)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let hot = ((n as f64) * 0.2).ceil() as usize;
    let total = profile.requests_per_minute();
    let mut rates = vec![0.0; n];
    for (group, share) in [(&order[..hot], 0.8), (&order[hot..], 0.2)] {
        let draws: Vec<f64> = group
            .iter()
            .map(|_| -(1.0 - rng.gen::<f64>()).ln())
            .collect();
        let sum: f64 = draws.iter().sum();
        for (&f, d) in group.iter().zip(draws) {
            rates[f] = total * share * d / sum;
        }
    }

    let mut carry: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let counts = (0..minutes)
        .map(|_| {
            rates
                .iter()
                .zip(carry.iter_mut())
                .map(|(r, c)| {
                    *c += r;
                    let k = c.floor();
                    *c -= k;
                    k as u32
                })
                .collect()
        })
        .collect();
    FunctionTrace::new(functions, counts)
}

/// Holds the last sample at or before `t`; before the first sample, the first value.
fn hold_last(samples: &[(u64, f64)], t: u64) -> Option<f64> {
    let idx = samples.partition_point(|(ts, _)| *ts <= t);
    match idx {
        0 => samples.first().map(|s| s.1),
        i => Some(samples[i - 1].1),
    }
}

/// MOER time series for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct CarbonTrace {
    pub location_id: String,
    /// `(timestamp_s, lbs/MWh)`, strictly increasing timestamps.
    pub samples: Vec<(u64, f64)>,
}

impl CarbonTrace {
    pub fn value_at(&self, t: u64) -> Option<f64> {
        hold_last(&self.samples, t)
    }

    pub fn mean(&self) -> f64 {
        sample_mean(&self.samples)
    }
}

/// Irradiance time series for one location, plus the array it drives.
#[derive(Debug, Clone, PartialEq)]
pub struct SolarTrace {
    pub location_id: String,
    /// `(timestamp_s, GTI W/m^2)`.
    pub samples: Vec<(u64, f64)>,
    /// Rated array output at 1000 W/m^2.
    pub array_watts: f64,
}

impl SolarTrace {
    pub fn gti_at(&self, t: u64) -> Option<f64> {
        hold_last(&self.samples, t)
    }

    /// Panel output in watts: a 1 W panel per 1000 W/m^2, scaled to the array.
    pub fn output_at(&self, t: u64) -> f64 {
        self.gti_at(t).map_or(0.0, |g| g / 1000.0 * self.array_watts)
    }

    pub fn mean_gti(&self) -> f64 {
        sample_mean(&self.samples)
    }

    /// Mean GTI of each whole or partial day covered by the samples.
    pub fn daily_mean_gti(&self) -> Vec<f64> {
        let mut days: Vec<(f64, usize)> = Vec::new();
        for &(t, g) in &self.samples {
            let d = (t / SECONDS_PER_DAY) as usize;
            if days.len() <= d {
                days.resize(d + 1, (0.0, 0));
            }
            days[d].0 += g;
            days[d].1 += 1;
        }
        days.into_iter()
            .map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

fn sample_mean(samples: &[(u64, f64)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarbonGenParams {
    pub cadence_s: u64,
    /// Diurnal amplitude as a fraction of the average.
    pub amplitude: f64,
    /// Half-width of the uniform per-sample noise, as a fraction of the average.
    pub noise: f64,
}

impl Default for CarbonGenParams {
    fn default() -> Self {
        CarbonGenParams {
            cadence_s: 300,
            amplitude: 0.25,
            noise: 0.10,
        }
    }
}

/// Diurnal sinusoid around `avg` with a seeded phase and uniform noise, clamped at 0.
pub fn gen_carbon_trace(location_id: &str, avg: f64, duration_s: u64, seed: u64) -> CarbonTrace {
    gen_carbon_trace_with(location_id, avg, duration_s, seed, CarbonGenParams::default())
}

pub fn gen_carbon_trace_with(
    location_id: &str,
    avg: f64,
    duration_s: u64,
    seed: u64,
    params: CarbonGenParams,
) -> CarbonTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("carbon/{location_id}")));
    let phase = rng.gen::<f64>() * 2.0 * PI;
    let cadence = params.cadence_s.max(1);
    let samples = (0..duration_s.div_ceil(cadence))
        .map(|k| {
            let t = k * cadence;
            let diurnal = (2.0 * PI * t as f64 / SECONDS_PER_DAY as f64 + phase).sin();
            let noise = if params.noise > 0.0 {
                rng.gen_range(-1.0..=1.0) * params.noise
            } else {
                0.0
            };
            let v = avg * (1.0 + params.amplitude * diurnal + noise);
            (t, v.max(0.0))
        })
        .collect();
    CarbonTrace {
        location_id: location_id.to_string(),
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarGenParams {
    pub cadence_s: u64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
    /// Up to this many cloud dips per day.
    pub max_dips_per_day: u32,
}

impl Default for SolarGenParams {
    fn default() -> Self {
        SolarGenParams {
            cadence_s: 300,
            sunrise_h: 6.0,
            sunset_h: 18.0,
            max_dips_per_day: 3,
        }
    }
}

/// Half-sine daylight curve with seeded cloud dips; each day is rescaled so its mean
/// GTI equals `avg_gti`.
pub fn gen_solar_trace(
    location_id: &str,
    avg_gti: f64,
    array_watts: f64,
    duration_s: u64,
    seed: u64,
) -> SolarTrace {
    gen_solar_trace_with(location_id, avg_gti, array_watts, duration_s, seed, SolarGenParams::default())
}

pub fn gen_solar_trace_with(
    location_id: &str,
    avg_gti: f64,
    array_watts: f64,
    duration_s: u64,
    seed: u64,
    params: SolarGenParams,
) -> SolarTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("solar/{location_id}")));
    let cadence = params.cadence_s.max(1);
    let per_day = SECONDS_PER_DAY.div_ceil(cadence) as usize;
    let days = duration_s.div_ceil(SECONDS_PER_DAY);
    let daylight = params.sunset_h - params.sunrise_h;
    let mut samples = Vec::with_capacity(duration_s.div_ceil(cadence) as usize);
    for day in 0..days {
        let dips: Vec<(f64, f64, f64)> = (0..rng.gen_range(0..=params.max_dips_per_day))
            .map(|_| {
                let start = rng.gen_range(params.sunrise_h..params.sunset_h);
                let len = rng.gen_range(0.25..2.0);
                let depth = rng.gen_range(0.3..0.9);
                (start, start + len, depth)
            })
            .collect();
        let shape: Vec<f64> = (0..per_day)
            .map(|k| {
                let h = (k as u64 * cadence) as f64 / 3600.0;
                if h <= params.sunrise_h || h >= params.sunset_h {
                    return 0.0;
                }
                let mut v = (PI * (h - params.sunrise_h) / daylight).sin();
                for &(a, b, depth) in &dips {
                    if (a..b).contains(&h) {
                        v *= 1.0 - depth;
                    }
                }
                v
            })
            .collect();
        let total: f64 = shape.iter().sum();
        let scale = if total > 0.0 { avg_gti * per_day as f64 / total } else { 0.0 };
        for (k, v) in shape.into_iter().enumerate() {
            let t = day * SECONDS_PER_DAY + k as u64 * cadence;
            if t >= duration_s {
                break;
            }
            samples.push((t, v * scale));
        }
    }
    SolarTrace {
        location_id: location_id.to_string(),
        samples,
        array_watts,
    }
}

/// One row of the locations manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSpec {
    pub location_id: String,
    /// Average MOER, lbs/MWh.
    pub avg_moer: f64,
    /// Average GTI, W/m^2.
    pub avg_gti: f64,
    pub solar_array_w: f64,
    pub battery_wh: f64,
    /// Number of servers hosted here.
    pub servers: u32,
}

/// The nine reference data-center sites: (id, average MOER, average GTI).
pub const REFERENCE_SITES: [(&str, f64, f64); 9] = [
    ("henderson-nv", 991.0, 271.0),
    ("the-dalles-or", 1068.0, 201.0),
    ("douglas-county-ga", 1169.0, 203.0),
    ("new-albany-oh", 1283.0, 174.0),
    ("storey-county-nv", 991.0, 265.0),
    ("montgomery-county-tn", 1139.0, 192.0),
    ("papillion-ne", 1108.0, 211.0),
    ("midlothian-tx", 1099.0, 216.0),
    ("mayes-county-ok", 1350.0, 204.0),
];

pub const DEFAULT_SOLAR_ARRAY_W: f64 = 1000.0;
pub const DEFAULT_BATTERY_WH: f64 = 3800.0;
pub const DEFAULT_SERVERS_PER_LOCATION: u32 = 2;

/// The first `count` reference sites with default solar, battery and server counts.
pub fn reference_locations(count: usize) -> Vec<LocationSpec> {
    REFERENCE_SITES
        .iter()
        .take(count)
        .map(|&(id, moer, gti)| LocationSpec {
            location_id: id.to_string(),
            avg_moer: moer,
            avg_gti: gti,
            solar_array_w: DEFAULT_SOLAR_ARRAY_W,
            battery_wh: DEFAULT_BATTERY_WH,
            servers: DEFAULT_SERVERS_PER_LOCATION,
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<LocationSpec>, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let locations: Vec<LocationSpec> =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| TraceError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut seen = std::collections::HashSet::new();
    for l in &locations {
        if !seen.insert(&l.location_id) {
            return Err(TraceError::Manifest {
                path: path.to_path_buf(),
                message: format!("duplicate location {}", l.location_id),
            });
        }
    }
    Ok(locations)
}

pub fn write_manifest(path: &Path, locations: &[LocationSpec]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, locations).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

/// Every trace a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub functions: FunctionTrace,
    pub carbon: Vec<CarbonTrace>,
    pub solar: Vec<SolarTrace>,
}

impl Workload {
    /// Synthetic traces for `locations` covering `duration_s`.
    pub fn synthetic(
        profile: WorkloadProfile,
        duration_s: u64,
        locations: &[LocationSpec],
        seed: u64,
    ) -> Workload {
        let minutes = duration_s.div_ceil(60) as usize;
        Workload {
            functions: gen_function_trace(profile, minutes, seed),
            carbon: locations
                .iter()
                .map(|l| gen_carbon_trace(&l.location_id, l.avg_moer, duration_s, seed))
                .collect(),
            solar: locations
                .iter()
                .map(|l| gen_solar_trace(&l.location_id, l.avg_gti, l.solar_array_w, duration_s, seed))
                .collect(),
        }
    }
}

/// Which CSV schema to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Functions,
    Carbon,
    Solar,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedTrace {
    Functions(FunctionTrace),
    Carbon(Vec<CarbonTrace>),
    Solar(Vec<SolarTrace>),
}

pub fn load_trace_csv(path: &Path, kind: TraceKind) -> Result<LoadedTrace, TraceError> {
    Ok(match kind {
        TraceKind::Functions => LoadedTrace::Functions(load_function_csv(path)?),
        TraceKind::Carbon => LoadedTrace::Carbon(load_carbon_csv(path)?),
        TraceKind::Solar => LoadedTrace::Solar(load_solar_csv(path, DEFAULT_SOLAR_ARRAY_W)?),
    })
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if found != expected {
        return Err(TraceError::Schema {
            path: path.to_path_buf(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    Ok(reader)
}

fn csv_error(path: &Path, e: csv::Error) -> TraceError {
    let line = e.position().map_or(0, |p| p.line());
    TraceError::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn field<T: FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, TraceError> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| TraceError::Malformed {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {name} {raw:?}"),
    })
}

pub fn load_function_csv(path: &Path) -> Result<FunctionTrace, TraceError> {
    let mut reader = open_csv(path, &FUNCTIONS_HEADER)?;
    let mut functions: Vec<FunctionDef> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(usize, usize, u32)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let minute: usize = field(path, line, &rec, 0, "minute_index")?;
        let id = rec.get(1).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(TraceError::Malformed {
                path: path.to_path_buf(),
                line,
                message: "empty function_id".into(),
            });
        }
        let ty: u32 = field(path, line, &rec, 2, "func_type")?;
        let count: u32 = field(path, line, &rec, 3, "invocations")?;
        let f = match index.get(&id) {
            Some(&f) => {
                if functions[f].func_type != ty {
                    return Err(TraceError::Malformed {
                        path: path.to_path_buf(),
                        line,
                        message: format!(
                            "function {id} changes type from {} to {ty}",
                            functions[f].func_type
                        ),
                    });
                }
                f
            }
            None => {
                let exec = exec_time_for(&id);
                index.insert(id.clone(), functions.len());
                functions.push(FunctionDef::new(id, ty, exec));
                functions.len() - 1
            }
        };
        rows.push((minute, f, count));
    }
    let minutes = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0u32; functions.len()]; minutes];
    let mut filled = vec![vec![false; functions.len()]; minutes];
    for (minute, f, count) in rows {
        if filled[minute][f] {
            return Err(TraceError::Malformed {
                path: path.to_path_buf(),
                line: 0,
                message: format!("duplicate row for minute {minute}, function {}", functions[f].id),
            });
        }
        filled[minute][f] = true;
        counts[minute][f] = count;
    }
    Ok(FunctionTrace::new(functions, counts))
}

/// Parses a `(timestamp, location, value)` file into per-location series, in order of
/// first appearance.
fn load_series(path: &Path, header: &[&str], value_name: &str) -> Result<Vec<(String, Vec<(u64, f64)>)>, TraceError> {
    let mut reader = open_csv(path, header)?;
    let mut series: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let ts: u64 = field(path, line, &rec, 0, "timestamp_s")?;
        let loc = rec.get(1).unwrap_or("").trim().to_string();
        let value: f64 = field(path, line, &rec, 2, value_name)?;
        if !(value >= 0.0 && value.is_finite()) {
            return Err(TraceError::Malformed {
                path: path.to_path_buf(),
                line,
                message: format!("{value_name} must be a non-negative number, got {value}"),
            });
        }
        let slot = *index.entry(loc.clone()).or_insert_with(|| {
            series.push((loc.clone(), Vec::new()));
            series.len() - 1
        });
        let samples = &mut series[slot].1;
        if samples.last().is_some_and(|&(prev, _)| ts <= prev) {
            return Err(TraceError::NonMonotonic {
                path: path.to_path_buf(),
                line,
                location: loc,
                timestamp: ts,
            });
        }
        samples.push((ts, value));
    }
    Ok(series)
}

pub fn load_carbon_csv(path: &Path) -> Result<Vec<CarbonTrace>, TraceError> {
    Ok(load_series(path, &CARBON_HEADER, "moer_lbs_per_mwh")?
        .into_iter()
        .map(|(location_id, samples)| CarbonTrace { location_id, samples })
        .collect())
}

/// Solar files carry only irradiance; `array_watts` sizes the panels.
pub fn load_solar_csv(path: &Path, array_watts: f64) -> Result<Vec<SolarTrace>, TraceError> {
    Ok(load_series(path, &SOLAR_HEADER, "gti_w_per_m2")?
        .into_iter()
        .map(|(location_id, samples)| SolarTrace {
            location_id,
            samples,
            array_watts,
        })
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, TraceError> {
    let file = File::create(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> TraceError + '_ {
    move |e| TraceError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

pub fn write_function_csv(path: &Path, trace: &FunctionTrace) -> Result<(), TraceError> {
    let mut w = csv_writer(path)?;
    let err = write_err(path);
    w.write_record(FUNCTIONS_HEADER).map_err(&err)?;
    for minute in 0..trace.minutes() {
        for (f, &count) in trace.functions.iter().zip(trace.counts_at(minute)) {
            w.write_record([
                minute.to_string(),
                f.id.to_string(),
                f.func_type.to_string(),
                count.to_string(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_series<'a>(
    path: &Path,
    header: &[&str],
    series: impl Iterator<Item = (&'a str, &'a [(u64, f64)])>,
) -> Result<(), TraceError> {
    let mut w = csv_writer(path)?;
    let err = write_err(path);
    w.write_record(header).map_err(&err)?;
    for (loc, samples) in series {
        for (t, v) in samples {
            w.write_record([t.to_string(), loc.to_string(), v.to_string()])
                .map_err(&err)?;
        }
    }
    w.flush().map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_carbon_csv(path: &Path, traces: &[CarbonTrace]) -> Result<(), TraceError> {
    write_series(
        path,
        &CARBON_HEADER,
        traces.iter().map(|t| (t.location_id.as_str(), t.samples.as_slice())),
    )
}

pub fn write_solar_csv(path: &Path, traces: &[SolarTrace]) -> Result<(), TraceError> {
    write_series(
        path,
        &SOLAR_HEADER,
        traces.iter().map(|t| (t.location_id.as_str(), t.samples.as_slice())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    #[test]
    fn profile_targets() {
        for (p, n, rate, minutes) in [
            (WorkloadProfile::Rare, 125, 15.0, 30),
            (WorkloadProfile::Medium, 50, 54.0, 30),
            (WorkloadProfile::High, 50, 354.0, 30),
        ] {
            let t = gen_function_trace(p, minutes, 42);
            assert_eq!(t.functions.len(), n);
            let got = t.requests_per_minute();
            assert!((got - rate).abs() <= 0.1 * rate, "{p}: {got}");
        }
        let rare = gen_function_trace(WorkloadProfile::Rare, 30, 42).total_invocations();
        assert!((405..=495).contains(&rare), "{rare}");
        let medium = gen_function_trace(WorkloadProfile::Medium, 30, 42).total_invocations();
        assert!((1458..=1782).contains(&medium), "{medium}");
    }

    #[test]
    fn zero_minutes_is_empty() {
        let t = gen_function_trace(WorkloadProfile::High, 0, 1);
        assert_eq!(t.minutes(), 0);
        assert_eq!(t.total_invocations(), 0);
    }

    #[test]
    fn rate_split_is_heavy_tailed() {
        let t = gen_function_trace(WorkloadProfile::Medium, 600, 3);
        let mut totals: Vec<u64> = (0..t.functions.len())
            .map(|f| (0..t.minutes()).map(|m| u64::from(t.counts_at(m)[f])).sum())
            .collect();
        totals.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = totals[..10].iter().sum();
        let all: u64 = totals.iter().sum();
        let share = top as f64 / all as f64;
        assert!(share >= 0.75, "{share}");
    }

    #[test]
    fn exec_times_in_range() {
        let t = gen_function_trace(WorkloadProfile::Rare, 1, 9);
        for f in &t.functions {
            assert!((0.1..=2.0).contains(&f.mean_exec_time));
            assert!(f.func_type < DEFAULT_NUM_FUNCTION_TYPES);
        }
    }

    #[test]
    fn carbon_mean_close_to_average() {
        let c = gen_carbon_trace("henderson-nv", 991.0, SECONDS_PER_DAY, 7);
        assert_eq!(c.samples.len(), 288);
        let m = c.mean();
        assert!((971.0..=1011.0).contains(&m), "{m}");
    }

    #[test]
    fn carbon_degenerate_is_constant() {
        let p = CarbonGenParams {
            amplitude: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let c = gen_carbon_trace_with("x", 991.0, SECONDS_PER_DAY, 7, p);
        assert!(c.samples.iter().all(|s| (s.1 - 991.0).abs() < 1e-9));
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(
            gen_carbon_trace("a", 1000.0, 3 * SECONDS_PER_DAY, 5),
            gen_carbon_trace("a", 1000.0, 3 * SECONDS_PER_DAY, 5)
        );
        assert_ne!(
            gen_carbon_trace("a", 1000.0, SECONDS_PER_DAY, 5),
            gen_carbon_trace("a", 1000.0, SECONDS_PER_DAY, 6)
        );
        assert_eq!(
            gen_solar_trace("a", 250.0, 1000.0, 2 * SECONDS_PER_DAY, 5),
            gen_solar_trace("a", 250.0, 1000.0, 2 * SECONDS_PER_DAY, 5)
        );
        assert_eq!(
            gen_function_trace(WorkloadProfile::High, 60, 5),
            gen_function_trace(WorkloadProfile::High, 60, 5)
        );
    }

    #[test]
    fn solar_shape() {
        let s = gen_solar_trace("henderson-nv", 271.0, 1000.0, SECONDS_PER_DAY, 11);
        let outputs: Vec<f64> = s.samples.iter().map(|&(t, _)| s.output_at(t)).collect();
        let mean = outputs.iter().sum::<f64>() / outputs.len() as f64;
        let noon = s.output_at(12 * 3600);
        let peak = outputs.iter().cloned().fold(0.0, f64::max);
        assert!(peak > mean && mean > 0.0);
        assert!(noon >= 0.0);
        assert_eq!(s.output_at(2 * 3600), 0.0);
        assert_eq!(s.output_at(20 * 3600), 0.0);
        assert!((s.mean_gti() - 271.0).abs() < 1e-6 * 271.0);

        let dark = gen_solar_trace("x", 271.0, 0.0, SECONDS_PER_DAY, 11);
        assert!(dark.samples.iter().all(|&(t, _)| dark.output_at(t) == 0.0));
    }

    #[test]
    fn reference_manifest_subset() {
        let three = reference_locations(3);
        assert_eq!(three.len(), 3);
        assert_eq!(three[0].location_id, "henderson-nv");
        assert_eq!(three[2].avg_moer, 1169.0);
        assert_eq!(reference_locations(20).len(), 9);
    }

    #[test]
    fn load_valid_carbon() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("carbon.csv");
        fs::write(&p, "timestamp_s,location_id,moer_lbs_per_mwh\n0,a,900\n300,a,950.5\n600,a,1000\n").unwrap();
        let traces = load_carbon_csv(&p).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].samples.len(), 3);
        assert_eq!(traces[0].value_at(450), Some(950.5));
        assert_eq!(traces[0].value_at(10_000), Some(1000.0));
    }

    #[test]
    fn decreasing_timestamps_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("carbon.csv");
        fs::write(&p, "timestamp_s,location_id,moer_lbs_per_mwh\n0,a,900\n300,a,950\n200,a,1000\n").unwrap();
        let err = load_carbon_csv(&p).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotonic { line: 4, .. }), "{err}");
        assert!(err.to_string().contains(":4:"));
    }

    #[test]
    fn unknown_header_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("solar.csv");
        fs::write(&p, "timestamp_s,location_id,ghi\n0,a,1\n").unwrap();
        assert!(matches!(load_solar_csv(&p, 1000.0), Err(TraceError::Schema { .. })));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("functions.csv");
        fs::write(&p, "minute_index,function_id,func_type,invocations\n0,f,1,3\n1,f,1,lots\n").unwrap();
        match load_function_csv(&p) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "minute_index,function_id,func_type,invocations\n0,f,1,3\n1,f,2,3\n").unwrap();
        assert!(load_function_csv(&p).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_trace_csv(Path::new("/nonexistent/trace.csv"), TraceKind::Carbon).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn generated_traces_round_trip(seed in any::<u64>(), minutes in 0usize..90, loc in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let locations = reference_locations(loc);
            let w = Workload::synthetic(WorkloadProfile::Medium, minutes as u64 * 60, &locations, seed);
            let fp = dir.path().join("functions.csv");
            let cp = dir.path().join("carbon.csv");
            let sp = dir.path().join("solar.csv");
            write_function_csv(&fp, &w.functions).unwrap();
            write_carbon_csv(&cp, &w.carbon).unwrap();
            write_solar_csv(&sp, &w.solar).unwrap();
            prop_assert_eq!(load_function_csv(&fp).unwrap(), w.functions);
            let carbon: Vec<CarbonTrace> = load_carbon_csv(&cp).unwrap();
            let expected_carbon: Vec<&CarbonTrace> = w.carbon.iter().filter(|c| !c.samples.is_empty()).collect();
            prop_assert_eq!(carbon.iter().collect::<Vec<_>>(), expected_carbon);
            let solar = load_solar_csv(&sp, DEFAULT_SOLAR_ARRAY_W).unwrap();
            let expected_solar: Vec<&SolarTrace> = w.solar.iter().filter(|s| !s.samples.is_empty()).collect();
            prop_assert_eq!(solar.iter().collect::<Vec<_>>(), expected_solar);
        }
    }
}
