//! Invocation traces: CSV ingestion, cold-start lookup tables, pod-grouped
//! partitioning and synthetic workload generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::seed::stable_hash;

/// Columns of the trace CSV, in canonical order.
pub const TRACE_COLUMNS: [&str; 8] = [
    "ts_ms",
    "function_id",
    "pod_id",
    "cpu_cores",
    "mem_mb",
    "exec_ms",
    "runtime_tag",
    "trigger_tag",
];

/// Columns of the cold-start log CSV.
pub const COLD_LOG_COLUMNS: [&str; 3] = ["runtime_tag", "trigger_tag", "cold_ms"];

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: field `{field}` = {value:?}: {reason}")]
    Field {
        row: u64,
        field: &'static str,
        value: String,
        reason: &'static str,
    },
    #[error("pod bound to two functions: pod `{pod}` appears under `{first}` and `{second}` (row {row})")]
    PodRebound {
        pod: String,
        first: String,
        second: String,
        row: u64,
    },
    #[error("ratios must sum to 1 (got {0})")]
    RatioSum(f64),
    #[error("ratios must be positive")]
    RatioSign,
    #[error("empty trace")]
    Empty,
    #[error("invalid cold-start table: {0}")]
    ColdTable(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;

/// One trace record.
///
/// `cold_ms` is not part of the CSV schema; it is filled in from a
/// [`ColdStartTable`] by [`annotate`] (or by the synthetic generator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub ts_ms: i64,
    pub function_id: String,
    pub pod_id: String,
    pub cpu_cores: f64,
    pub mem_mb: f64,
    pub exec_ms: i64,
    pub runtime_tag: String,
    pub trigger_tag: String,
    pub cold_ms: f64,
}

/// Expected cold-start latency per `(runtime_tag, trigger_tag)` with a
/// global fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartTable {
    /// runtime_tag -> trigger_tag -> expected cold-start latency (ms)
    entries: BTreeMap<String, BTreeMap<String, f64>>,
    fallback_ms: f64,
}

impl ColdStartTable {
    pub fn new(entries: BTreeMap<(String, String), f64>, fallback_ms: f64) -> Result<Self> {
        if !(fallback_ms > 0.0 && fallback_ms.is_finite()) {
            return Err(TraceError::ColdTable(format!("fallback must be > 0, got {fallback_ms}")));
        }
        if let Some(((r, t), v)) = entries.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(TraceError::ColdTable(format!("entry ({r},{t}) must be > 0, got {v}")));
        }
        let mut nested: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for ((r, t), v) in entries {
            nested.entry(r).or_default().insert(t, v);
        }
        Ok(Self { entries: nested, fallback_ms })
    }

    pub fn fallback_only(fallback_ms: f64) -> Result<Self> {
        Self::new(BTreeMap::new(), fallback_ms)
    }

    pub fn lookup(&self, runtime_tag: &str, trigger_tag: &str) -> f64 {
        self.get(runtime_tag, trigger_tag).unwrap_or(self.fallback_ms)
    }

    pub fn fallback_ms(&self) -> f64 {
        self.fallback_ms
    }

    /// Entry for an exact key, without fallback.
    pub fn get(&self, runtime_tag: &str, trigger_tag: &str) -> Option<f64> {
        self.entries.get(runtime_tag).and_then(|m| m.get(trigger_tag)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries
            .iter()
            .flat_map(|(r, m)| m.iter().map(move |(t, v)| (r.as_str(), t.as_str(), *v)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the table as a cold-start log with one record per key, which
    /// [`build_cold_table`] turns back into the same entries.
    pub fn write_as_log<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COLD_LOG_COLUMNS)?;
        for (r, t, v) in self.entries() {
            out.write_record([r, t, &v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Statistic used to collapse the cold-start log records of one key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStatistic {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColdTableOptions {
    pub statistic: ColdStatistic,
    /// Fallback used when the log is empty.
    pub default_ms: f64,
}

impl Default for ColdTableOptions {
    fn default() -> Self {
        Self { statistic: ColdStatistic::Mean, default_ms: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdLogRecord {
    pub runtime_tag: String,
    pub trigger_tag: String,
    pub cold_ms: f64,
}

fn parse_i64(row: u64, field: &'static str, raw: &str) -> Result<i64> {
    raw.trim().parse::<i64>().map_err(|_| TraceError::Field {
        row,
        field,
        value: raw.to_string(),
        reason: "not an integer",
    })
}

fn parse_f64(row: u64, field: &'static str, raw: &str) -> Result<f64> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(TraceError::Field { row, field, value: raw.to_string(), reason: "not a finite number" }),
    }
}

fn column_index(headers: &csv::StringRecord, name: &'static str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or(TraceError::MissingColumn(name))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| TraceError::Open { path: path.display().to_string(), source })
}

/// Parses a trace CSV. Rows are sorted by `ts_ms` (stable), `cold_ms` is
/// left at 0 until [`annotate`] runs. Row numbers in errors are file line
/// numbers, the header being line 1.
pub fn read_trace_from<R: Read>(reader: R) -> Result<Vec<Invocation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(TRACE_COLUMNS) {
        *slot = column_index(&headers, name)?;
    }

    let mut out = Vec::new();
    let mut pod_owner: HashMap<String, String> = HashMap::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let row = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let ts_ms = parse_i64(row, "ts_ms", get(0))?;
        if ts_ms < 0 {
            return Err(TraceError::Field { row, field: "ts_ms", value: get(0).into(), reason: "must be >= 0" });
        }
        let cpu_cores = parse_f64(row, "cpu_cores", get(3))?;
        if cpu_cores <= 0.0 {
            return Err(TraceError::Field { row, field: "cpu_cores", value: get(3).into(), reason: "must be > 0" });
        }
        let mem_mb = parse_f64(row, "mem_mb", get(4))?;
        if mem_mb <= 0.0 {
            return Err(TraceError::Field { row, field: "mem_mb", value: get(4).into(), reason: "must be > 0" });
        }
        let exec_ms = parse_i64(row, "exec_ms", get(5))?;
        if exec_ms < 0 {
            return Err(TraceError::Field { row, field: "exec_ms", value: get(5).into(), reason: "must be >= 0" });
        }
        let function_id = get(1).trim().to_string();
        let pod_id = get(2).trim().to_string();
        if pod_id.is_empty() {
            return Err(TraceError::Field { row, field: "pod_id", value: String::new(), reason: "must not be empty" });
        }
        match pod_owner.get(&pod_id) {
            Some(owner) if *owner != function_id => {
                return Err(TraceError::PodRebound {
                    pod: pod_id,
                    first: owner.clone(),
                    second: function_id,
                    row,
                })
            }
            Some(_) => {}
            None => {
                pod_owner.insert(pod_id.clone(), function_id.clone());
            }
        }
        out.push(Invocation {
            ts_ms,
            function_id,
            pod_id,
            cpu_cores,
            mem_mb,
            exec_ms,
            runtime_tag: get(6).trim().to_string(),
            trigger_tag: get(7).trim().to_string(),
            cold_ms: 0.0,
        });
    }
    out.sort_by_key(|inv| inv.ts_ms);
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<Invocation>> {
    read_trace_from(open(path)?)
}

/// Sets each invocation's `cold_ms` from the table.
pub fn annotate(invocations: &mut [Invocation], table: &ColdStartTable) {
    for inv in invocations {
        inv.cold_ms = table.lookup(&inv.runtime_tag, &inv.trigger_tag);
    }
}

/// Reads, validates, sorts and annotates a trace file.
pub fn load_trace(path: &Path, table: &ColdStartTable) -> Result<Vec<Invocation>> {
    let mut invs = read_trace(path)?;
    annotate(&mut invs, table);
    Ok(invs)
}

pub fn write_trace<W: Write>(w: W, invocations: &[Invocation]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_COLUMNS)?;
    for inv in invocations {
        out.write_record([
            inv.ts_ms.to_string(),
            inv.function_id.clone(),
            inv.pod_id.clone(),
            inv.cpu_cores.to_string(),
            inv.mem_mb.to_string(),
            inv.exec_ms.to_string(),
            inv.runtime_tag.clone(),
            inv.trigger_tag.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cold_logs_from<R: Read>(reader: R) -> Result<Vec<ColdLogRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ri = column_index(&headers, "runtime_tag")?;
    let ti = column_index(&headers, "trigger_tag")?;
    let ci = column_index(&headers, "cold_ms")?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let row = record.position().map_or(0, |p| p.line());
        let raw = record.get(ci).unwrap_or("");
        let cold_ms = parse_f64(row, "cold_ms", raw)?;
        if cold_ms <= 0.0 {
            return Err(TraceError::Field { row, field: "cold_ms", value: raw.into(), reason: "must be > 0" });
        }
        out.push(ColdLogRecord {
            runtime_tag: record.get(ri).unwrap_or("").trim().to_string(),
            trigger_tag: record.get(ti).unwrap_or("").trim().to_string(),
            cold_ms,
        });
    }
    Ok(out)
}

fn collapse(values: &mut [f64], statistic: ColdStatistic) -> f64 {
    match statistic {
        ColdStatistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
        ColdStatistic::Median => {
            values.sort_by(f64::total_cmp);
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                0.5 * (values[n / 2 - 1] + values[n / 2])
            }
        }
    }
}

/// Builds the lookup table from parsed cold-start log records.
///
/// Every key maps to the configured statistic of its records; the fallback
/// is the same statistic over all records, or `opts.default_ms` when there
/// are none. Training keys without any log coverage are reported with a
/// warning, they resolve to the fallback.
pub fn build_cold_table_from_records(
    training: &[Invocation],
    records: &[ColdLogRecord],
    opts: &ColdTableOptions,
) -> Result<ColdStartTable> {
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.runtime_tag.clone(), r.trigger_tag.clone()))
            .or_default()
            .push(r.cold_ms);
    }
    let mut all: Vec<f64> = records.iter().map(|r| r.cold_ms).collect();
    let fallback = if all.is_empty() { opts.default_ms } else { collapse(&mut all, opts.statistic) };
    let entries: BTreeMap<_, _> = grouped
        .into_iter()
        .map(|(k, mut v)| {
            let s = collapse(&mut v, opts.statistic);
            (k, s)
        })
        .collect();

    let uncovered: HashSet<(&str, &str)> = training
        .iter()
        .map(|i| (i.runtime_tag.as_str(), i.trigger_tag.as_str()))
        .filter(|(r, t)| !entries.contains_key(&(r.to_string(), t.to_string())))
        .collect();
    if !uncovered.is_empty() {
        log::warn!("{} training (runtime, trigger) keys have no cold-start records; using fallback", uncovered.len());
    }
    ColdStartTable::new(entries, fallback)
}

pub fn build_cold_table(
    training: &[Invocation],
    raw_cold_logs: &Path,
    opts: &ColdTableOptions,
) -> Result<ColdStartTable> {
    let records = read_cold_logs_from(open(raw_cold_logs)?)?;
    build_cold_table_from_records(training, &records, opts)
}

/// Train/validation/test partition where every pod lands in exactly one part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSplit {
    pub train: Vec<Invocation>,
    pub validation: Vec<Invocation>,
    pub test: Vec<Invocation>,
    pub split_seed: u64,
}

/// Splits by pod: pods are ordered by a seeded hash of their id and cut at
/// the cumulative ratios of the pod count. Each partition keeps the input's
/// time order.
pub fn split_by_pod(invocations: &[Invocation], ratios: [f64; 3], seed: u64) -> Result<TraceSplit> {
    if invocations.is_empty() {
        return Err(TraceError::Empty);
    }
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(TraceError::RatioSign);
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TraceError::RatioSum(sum));
    }

    let mut pods: Vec<&str> = invocations.iter().map(|i| i.pod_id.as_str()).collect::<HashSet<_>>().into_iter().collect();
    pods.sort_by(|a, b| {
        stable_hash(seed, a.as_bytes())
            .cmp(&stable_hash(seed, b.as_bytes()))
            .then_with(|| a.cmp(b))
    });
    let n = pods.len() as f64;
    let cut1 = ((n * ratios[0]).round() as usize).min(pods.len());
    let cut2 = ((n * (ratios[0] + ratios[1])).round() as usize).clamp(cut1, pods.len());
    let part: HashMap<&str, u8> = pods
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, if i < cut1 { 0 } else if i < cut2 { 1 } else { 2 }))
        .collect();

    let mut split = TraceSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new(), split_seed: seed };
    for inv in invocations {
        match part[inv.pod_id.as_str()] {
            0 => split.train.push(inv.clone()),
            1 => split.validation.push(inv.clone()),
            _ => split.test.push(inv.clone()),
        }
    }
    Ok(split)
}

/// Per-pod arrival process of a synthetic workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalModel {
    /// Exponential inter-arrivals.
    Poisson { rate_hz: f64 },
    /// Poisson arrivals whose rate alternates between a burst phase and a
    /// lull phase, each `period_s` long, starting with a burst.
    Bimodal { burst_rate_hz: f64, lull_rate_hz: f64, period_s: f64 },
    /// Fixed spacing; pods are phase-shifted evenly inside one interval.
    Deterministic { interval_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_functions: usize,
    pub n_pods_per_function: usize,
    pub duration_s: u64,
    pub arrival: ArrivalModel,
    pub cold_latency_range_ms: (f64, f64),
    pub cpu_range: (f64, f64),
    pub mem_range_mb: (f64, f64),
    #[serde(default = "default_exec_range")]
    pub exec_range_ms: (i64, i64),
    pub seed: u64,
}

fn default_exec_range() -> (i64, i64) {
    (50, 500)
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_functions: 4,
            n_pods_per_function: 2,
            duration_s: 3600,
            arrival: ArrivalModel::Poisson { rate_hz: 0.05 },
            cold_latency_range_ms: (100.0, 2000.0),
            cpu_range: (0.5, 2.0),
            mem_range_mb: (64.0, 512.0),
            exec_range_ms: default_exec_range(),
            seed: 0,
        }
    }
}

const RUNTIMES: [&str; 5] = ["python", "nodejs", "java", "go", "custom"];
const TRIGGERS: [&str; 3] = ["http", "timer", "queue"];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TraceError::Spec(m.to_string()));
        if self.n_functions == 0 || self.n_pods_per_function == 0 {
            return bad("n_functions and n_pods_per_function must be >= 1");
        }
        if self.duration_s == 0 {
            return bad("duration_s must be > 0");
        }
        let positive_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !positive_range(self.cold_latency_range_ms) {
            return bad("cold_latency_range_ms must satisfy 0 < lo <= hi");
        }
        if !positive_range(self.cpu_range) {
            return bad("cpu_range must satisfy 0 < lo <= hi");
        }
        if !positive_range(self.mem_range_mb) {
            return bad("mem_range_mb must satisfy 0 < lo <= hi");
        }
        let (elo, ehi) = self.exec_range_ms;
        if elo < 0 || elo > ehi {
            return bad("exec_range_ms must satisfy 0 <= lo <= hi");
        }
        let ok = match self.arrival {
            ArrivalModel::Poisson { rate_hz } => rate_hz > 0.0 && rate_hz.is_finite(),
            ArrivalModel::Bimodal { burst_rate_hz, lull_rate_hz, period_s } => {
                burst_rate_hz > 0.0 && lull_rate_hz > 0.0 && period_s > 0.0
            }
            ArrivalModel::Deterministic { interval_s } => interval_s > 0.0 && interval_s.is_finite(),
        };
        if !ok {
            return bad("arrival model parameters must be positive");
        }
        Ok(())
    }
}

/// A generated workload together with the exact cold-start table it was
/// annotated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub invocations: Vec<Invocation>,
    pub cold_table: ColdStartTable,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn arrival_times(model: ArrivalModel, duration_s: f64, phase_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    match model {
        ArrivalModel::Deterministic { interval_s } => {
            let mut t = phase_s;
            while t < duration_s {
                out.push(t);
                t += interval_s;
            }
        }
        ArrivalModel::Poisson { rate_hz } => {
            let exp = Exp::new(rate_hz).expect("validated rate");
            let mut t = exp.sample(rng);
            while t < duration_s {
                out.push(t);
                t += exp.sample(rng);
            }
        }
        ArrivalModel::Bimodal { burst_rate_hz, lull_rate_hz, period_s } => {
            let burst = Exp::new(burst_rate_hz).expect("validated rate");
            let lull = Exp::new(lull_rate_hz).expect("validated rate");
            // the phase is counted, not recomputed from t: floor(k * p / p)
            // can land on k - 1 and stall at a boundary
            let mut phase = 0u64;
            let mut t = 0.0;
            while t < duration_s {
                let boundary = (phase + 1) as f64 * period_s;
                let dt = if phase % 2 == 0 { burst.sample(rng) } else { lull.sample(rng) };
                if t + dt >= boundary {
                    // memoryless: restart the clock at the phase boundary
                    t = boundary;
                    phase += 1;
                    continue;
                }
                t += dt;
                if t < duration_s {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Generates a deterministic synthetic workload from `spec`.
///
/// Each pod is an independent arrival process. Functions get a runtime and
/// trigger tag from fixed rotations; every `(runtime, trigger)` key gets one
/// cold-start latency drawn from the configured range, and every function
/// one CPU/memory request.
pub fn generate_trace(spec: &SyntheticSpec) -> Result<SyntheticTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut key_cold: BTreeMap<(String, String), f64> = BTreeMap::new();
    let total_pods = spec.n_functions * spec.n_pods_per_function;
    let duration_s = spec.duration_s as f64;
    let mut out = Vec::new();

    for f in 0..spec.n_functions {
        let runtime = RUNTIMES[f % RUNTIMES.len()].to_string();
        let trigger = TRIGGERS[(f / RUNTIMES.len()) % TRIGGERS.len()].to_string();
        let cold_ms = *key_cold
            .entry((runtime.clone(), trigger.clone()))
            .or_insert_with(|| uniform(&mut rng, spec.cold_latency_range_ms).round().max(1.0));
        let cpu = (uniform(&mut rng, spec.cpu_range) * 10.0).round().max(1.0) / 10.0;
        let mem = uniform(&mut rng, spec.mem_range_mb).round().max(1.0);
        let function_id = format!("f{f:03}");

        for p in 0..spec.n_pods_per_function {
            let pod_index = f * spec.n_pods_per_function + p;
            let phase_s = match spec.arrival {
                ArrivalModel::Deterministic { interval_s } => {
                    ((interval_s * 1000.0 * pod_index as f64 / total_pods as f64).floor()) / 1000.0
                }
                _ => 0.0,
            };
            let pod_id = format!("{function_id}-p{p:03}");
            for t in arrival_times(spec.arrival, duration_s, phase_s, &mut rng) {
                let (elo, ehi) = spec.exec_range_ms;
                let exec_ms = if elo == ehi { elo } else { rng.random_range(elo..=ehi) };
                out.push(Invocation {
                    ts_ms: (t * 1000.0).round() as i64,
                    function_id: function_id.clone(),
                    pod_id: pod_id.clone(),
                    cpu_cores: cpu,
                    mem_mb: mem,
                    exec_ms,
                    runtime_tag: runtime.clone(),
                    trigger_tag: trigger.clone(),
                    cold_ms,
                });
            }
        }
    }
    out.sort_by(|a, b| a.ts_ms.cmp(&b.ts_ms).then_with(|| a.pod_id.cmp(&b.pod_id)));
    let fallback = key_cold.values().sum::<f64>() / key_cold.len() as f64;
    let cold_table = ColdStartTable::new(key_cold, fallback)?;
    Ok(SyntheticTrace { invocations: out, cold_table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "ts_ms,function_id,pod_id,cpu_cores,mem_mb,exec_ms,runtime_tag,trigger_tag\n";

    fn table() -> ColdStartTable {
        let mut e = BTreeMap::new();
        e.insert(("python".to_string(), "http".to_string()), 200.0);
        ColdStartTable::new(e, 1000.0).unwrap()
    }

    #[test]
    fn loads_and_sorts_well_formed_rows() {
        let csv = format!(
            "{HEADER}3000,f1,p1,1,128,10,python,http\n1000,f1,p1,1,128,10,python,http\n2000,f2,p2,0.5,64,5,go,timer\n"
        );
        let mut invs = read_trace_from(csv.as_bytes()).unwrap();
        annotate(&mut invs, &table());
        assert_eq!(invs.iter().map(|i| i.ts_ms).collect::<Vec<_>>(), vec![1000, 2000, 3000]);
        assert_eq!(invs[0].cold_ms, 200.0);
        assert_eq!(invs[1].cold_ms, 1000.0);
    }

    #[test]
    fn negative_exec_names_row_and_field() {
        let csv = format!("{HEADER}0,f1,p1,1,128,10,python,http\n5,f1,p1,1,128,-5,python,http\n");
        let err = read_trace_from(csv.as_bytes()).unwrap_err();
        match err {
            TraceError::Field { row, field, .. } => {
                assert_eq!(row, 3);
                assert_eq!(field, "exec_ms");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_field_rejected() {
        let csv = format!("{HEADER}0,f1,p1,one,128,10,python,http\n");
        let err = read_trace_from(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::Field { field: "cpu_cores", row: 2, .. }), "{err}");
    }

    #[test]
    fn pod_bound_to_two_functions_rejected() {
        let csv = format!("{HEADER}0,f1,p1,1,128,10,python,http\n5,f2,p1,1,128,10,python,http\n");
        let err = read_trace_from(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("pod bound to two functions"), "{err}");
    }

    #[test]
    fn missing_column_rejected() {
        let csv = "ts_ms,function_id,pod_id\n0,f1,p1\n";
        assert!(matches!(read_trace_from(csv.as_bytes()), Err(TraceError::MissingColumn("cpu_cores"))));
    }

    #[test]
    fn missing_file_is_open_error() {
        let err = load_trace(Path::new("/definitely/not/here.csv"), &table()).unwrap_err();
        assert!(matches!(err, TraceError::Open { .. }));
    }

    #[test]
    fn cold_table_mean_of_key() {
        let logs = "runtime_tag,trigger_tag,cold_ms\npython,http,100\npython,http,300\n";
        let recs = read_cold_logs_from(logs.as_bytes()).unwrap();
        let t = build_cold_table_from_records(&[], &recs, &ColdTableOptions::default()).unwrap();
        assert_eq!(t.lookup("python", "http"), 200.0);
        assert_eq!(t.fallback_ms(), 200.0);
        assert_eq!(t.lookup("go", "timer"), 200.0);
    }

    #[test]
    fn cold_table_median_flag() {
        let logs = "runtime_tag,trigger_tag,cold_ms\npython,http,100\npython,http,300\npython,http,1000\n";
        let recs = read_cold_logs_from(logs.as_bytes()).unwrap();
        let opts = ColdTableOptions { statistic: ColdStatistic::Median, ..Default::default() };
        let t = build_cold_table_from_records(&[], &recs, &opts).unwrap();
        assert_eq!(t.lookup("python", "http"), 300.0);
    }

    #[test]
    fn empty_logs_give_fallback_only_table() {
        let opts = ColdTableOptions { default_ms: 1000.0, ..Default::default() };
        let t = build_cold_table_from_records(&[], &[], &opts).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.lookup("go", "timer"), 1000.0);
    }

    #[test]
    fn table_log_round_trip() {
        let mut buf = Vec::new();
        table().write_as_log(&mut buf).unwrap();
        let recs = read_cold_logs_from(buf.as_slice()).unwrap();
        let t = build_cold_table_from_records(&[], &recs, &ColdTableOptions::default()).unwrap();
        assert_eq!(t.lookup("python", "http"), 200.0);
    }

    fn pods_trace(n: usize) -> Vec<Invocation> {
        (0..n * 3)
            .map(|i| Invocation {
                ts_ms: i as i64 * 100,
                function_id: format!("f{}", i % n),
                pod_id: format!("p{}", i % n),
                cpu_cores: 1.0,
                mem_mb: 128.0,
                exec_ms: 10,
                runtime_tag: "python".into(),
                trigger_tag: "http".into(),
                cold_ms: 100.0,
            })
            .collect()
    }

    fn pod_set(invs: &[Invocation]) -> HashSet<String> {
        invs.iter().map(|i| i.pod_id.clone()).collect()
    }

    #[test]
    fn split_ten_pods_eight_one_one() {
        let split = split_by_pod(&pods_trace(10), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(pod_set(&split.train).len(), 8);
        assert_eq!(pod_set(&split.validation).len(), 1);
        assert_eq!(pod_set(&split.test).len(), 1);
        let again = split_by_pod(&pods_trace(10), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn split_rejects_bad_ratios_and_empty() {
        assert!(matches!(split_by_pod(&pods_trace(3), [0.5, 0.5, 0.5], 1), Err(TraceError::RatioSum(_))));
        assert!(matches!(split_by_pod(&[], [0.8, 0.1, 0.1], 1), Err(TraceError::Empty)));
        let err = split_by_pod(&pods_trace(3), [0.5, 0.5, 0.5], 1).unwrap_err();
        assert!(err.to_string().contains("ratios must sum to 1"));
    }

    #[test]
    fn deterministic_model_is_exact() {
        let spec = SyntheticSpec {
            n_functions: 1,
            n_pods_per_function: 1,
            duration_s: 60,
            arrival: ArrivalModel::Deterministic { interval_s: 10.0 },
            ..Default::default()
        };
        let t = generate_trace(&spec).unwrap();
        let ts: Vec<i64> = t.invocations.iter().map(|i| i.ts_ms).collect();
        assert_eq!(ts, vec![0, 10_000, 20_000, 30_000, 40_000, 50_000]);
    }

    #[test]
    fn poisson_count_within_four_sigma() {
        let spec = SyntheticSpec {
            n_functions: 1,
            n_pods_per_function: 1,
            duration_s: 3600,
            arrival: ArrivalModel::Poisson { rate_hz: 1.0 },
            seed: 11,
            ..Default::default()
        };
        let n = generate_trace(&spec).unwrap().invocations.len() as i64;
        assert!((n - 3600).abs() <= 240, "count {n}");
    }

    #[test]
    fn generator_seed_determinism() {
        let mut spec = SyntheticSpec { seed: 1, ..Default::default() };
        let a = generate_trace(&spec).unwrap();
        let b = generate_trace(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 2;
        let c = generate_trace(&spec).unwrap();
        assert_ne!(a.invocations, c.invocations);
    }

    #[test]
    fn bimodal_bursts_are_denser() {
        let spec = SyntheticSpec {
            n_functions: 1,
            n_pods_per_function: 1,
            duration_s: 4000,
            arrival: ArrivalModel::Bimodal { burst_rate_hz: 1.0, lull_rate_hz: 0.01, period_s: 1000.0 },
            seed: 5,
            ..Default::default()
        };
        let invs = generate_trace(&spec).unwrap().invocations;
        let burst = invs.iter().filter(|i| (i.ts_ms / 1_000_000) % 2 == 0).count();
        let lull = invs.len() - burst;
        assert!(burst > 1500 && lull < 60, "burst {burst} lull {lull}");
    }

    #[test]
    fn bimodal_crosses_inexact_phase_boundaries() {
        // 3 * 120.0411 / 120.0411 rounds below 3
        let spec = SyntheticSpec {
            n_functions: 1,
            n_pods_per_function: 1,
            duration_s: 1200,
            arrival: ArrivalModel::Bimodal { burst_rate_hz: 0.001, lull_rate_hz: 0.001, period_s: 120.0411 },
            seed: 1,
            ..Default::default()
        };
        assert!(generate_trace(&spec).is_ok());
    }

    #[test]
    fn generator_samples_within_ranges() {
        let spec = SyntheticSpec { n_functions: 12, seed: 3, ..Default::default() };
        let t = generate_trace(&spec).unwrap();
        for inv in &t.invocations {
            assert!(inv.cold_ms >= 100.0 && inv.cold_ms <= 2000.0);
            assert!(inv.cpu_cores >= 0.5 && inv.cpu_cores <= 2.0);
            assert!(inv.mem_mb >= 64.0 && inv.mem_mb <= 512.0);
            assert!(inv.exec_ms >= 50 && inv.exec_ms <= 500);
            assert_eq!(inv.cold_ms, t.cold_table.lookup(&inv.runtime_tag, &inv.trigger_tag));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SyntheticSpec { duration_s: 0, ..Default::default() };
        assert!(matches!(generate_trace(&spec), Err(TraceError::Spec(_))));
        let spec = SyntheticSpec { cpu_range: (2.0, 1.0), ..Default::default() };
        assert!(generate_trace(&spec).is_err());
    }

    fn arb_invocation() -> impl Strategy<Value = Invocation> {
        (
            0i64..10_000_000,
            0usize..4,
            0usize..3,
            0.01f64..64.0,
            1.0f64..8192.0,
            0i64..100_000,
            prop::sample::select(vec!["python", "go", "custom"]),
            prop::sample::select(vec!["http", "timer"]),
        )
            .prop_map(|(ts, f, p, cpu, mem, exec, rt, tr)| Invocation {
                ts_ms: ts,
                function_id: format!("f{f}"),
                pod_id: format!("f{f}-p{p}"),
                cpu_cores: cpu,
                mem_mb: mem,
                exec_ms: exec,
                runtime_tag: rt.into(),
                trigger_tag: tr.into(),
                cold_ms: 0.0,
            })
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(mut invs in prop::collection::vec(arb_invocation(), 1..40)) {
            invs.sort_by_key(|i| i.ts_ms);
            let mut buf = Vec::new();
            write_trace(&mut buf, &invs).unwrap();
            let mut back = read_trace_from(buf.as_slice()).unwrap();
            annotate(&mut back, &table());
            annotate(&mut invs, &table());
            prop_assert_eq!(back, invs);
        }

        #[test]
        fn split_keeps_pods_whole(seed in any::<u64>(), n in 1usize..30) {
            let invs = pods_trace(n);
            let s = split_by_pod(&invs, [0.8, 0.1, 0.1], seed).unwrap();
            let (a, b, c) = (pod_set(&s.train), pod_set(&s.validation), pod_set(&s.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), invs.len());
            for part in [&s.train, &s.validation, &s.test] {
                prop_assert!(part.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms));
            }
        }

        #[test]
        fn annotation_matches_table(invs in prop::collection::vec(arb_invocation(), 1..20)) {
            let mut invs = invs;
            let t = table();
            annotate(&mut invs, &t);
            for inv in &invs {
                prop_assert!(inv.cold_ms > 0.0);
                prop_assert_eq!(inv.cold_ms, t.lookup(&inv.runtime_tag, &inv.trigger_tag));
            }
        }
    }
}
