//! Run-level metrics, cross-policy comparison and plot-ready series.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::carbon::{CarbonError, CarbonTimeline, MS_PER_HOUR};
use crate::engine::{ActionSet, CostScales, StepOutcome};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no outcomes to aggregate")]
    Empty,
    #[error("report `{name}` was produced on trace {found}, expected {expected}")]
    FingerprintMismatch { name: String, expected: String, found: String },
    #[error("carbon components sum to {parts} g but total is {total} g")]
    Conservation { parts: f64, total: f64 },
    #[error("decision {action_s} s is not in the action set")]
    UnknownAction { action_s: f64 },
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Run parameters echoed into every report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportContext {
    pub policy: String,
    pub lambda_carbon: f64,
    pub scales: CostScales,
    pub seed: u64,
    pub network_const_ms: f64,
    pub window_w: usize,
    pub actions: ActionSet,
    pub trace_fingerprint: String,
    pub overlap_warnings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCount {
    pub action_s: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyPoint {
    pub hour_start_ms: i64,
    pub decisions: u64,
    pub cold_starts: u64,
    pub keep_alive_carbon_g: f64,
    pub total_carbon_g: f64,
    pub mean_action_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub invocations: u64,
    pub cold_start_count: u64,
    pub mean_e2e_latency_s: f64,
    pub keep_alive_carbon_g: f64,
    pub cold_carbon_g: f64,
    pub exec_carbon_g: f64,
    pub total_carbon_g: f64,
    /// Mean end-to-end latency (s) times total carbon (g).
    pub lcp: f64,
    /// Cold-start count times keep-alive carbon (g).
    pub iri: f64,
    pub weighted_cost: f64,
    pub decision_histogram: Vec<ActionCount>,
    pub hourly: Vec<HourlyPoint>,
    pub lambda_carbon: f64,
    pub sigma_l: f64,
    pub sigma_c: f64,
    pub seed: u64,
    pub network_const_ms: f64,
    pub window_w: usize,
    pub trace_fingerprint: String,
    pub overlap_warnings: u64,
}

/// Order-independent sum: values are sorted before compensated summation.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn sum_of(outcomes: &[StepOutcome], f: impl Fn(&StepOutcome) -> f64) -> f64 {
    stable_sum(outcomes.iter().map(f).collect())
}

fn hour_of(ts_ms: i64) -> i64 {
    ts_ms.div_euclid(MS_PER_HOUR) * MS_PER_HOUR
}

pub fn aggregate(outcomes: &[StepOutcome], ctx: &ReportContext) -> Result<SimReport> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = outcomes.len() as f64;
    let cold = outcomes.iter().filter(|o| o.was_cold).count() as u64;
    let mean_latency_s = sum_of(outcomes, |o| o.e2e_latency_ms) / n / 1000.0;
    let keep_alive = sum_of(outcomes, |o| o.carbon.idle_g);
    let cold_g = sum_of(outcomes, |o| o.carbon.cold_g);
    let exec_g = sum_of(outcomes, |o| o.carbon.exec_g);
    let total = sum_of(outcomes, |o| o.carbon.total_g);
    let parts = keep_alive + cold_g + exec_g;
    if (parts - total).abs() > 1e-9 * parts.abs().max(total.abs()).max(f64::MIN_POSITIVE) {
        return Err(MetricsError::Conservation { parts, total });
    }

    let mut counts = vec![0u64; ctx.actions.len()];
    for o in outcomes {
        let i = ctx.actions.index_of(o.action_s).ok_or(MetricsError::UnknownAction { action_s: o.action_s })?;
        counts[i] += 1;
    }
    let decision_histogram = ctx
        .actions
        .as_slice()
        .iter()
        .zip(counts)
        .map(|(&action_s, count)| ActionCount { action_s, count })
        .collect();

    let mut by_hour: BTreeMap<i64, Vec<&StepOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_hour.entry(hour_of(o.ts_ms)).or_default().push(o);
    }
    let hourly = by_hour
        .into_iter()
        .map(|(hour_start_ms, os)| {
            let m = os.len() as f64;
            HourlyPoint {
                hour_start_ms,
                decisions: os.len() as u64,
                cold_starts: os.iter().filter(|o| o.was_cold).count() as u64,
                keep_alive_carbon_g: stable_sum(os.iter().map(|o| o.carbon.idle_g).collect()),
                total_carbon_g: stable_sum(os.iter().map(|o| o.carbon.total_g).collect()),
                mean_action_s: stable_sum(os.iter().map(|o| o.action_s).collect()) / m,
            }
        })
        .collect();

    Ok(SimReport {
        policy: ctx.policy.clone(),
        invocations: outcomes.len() as u64,
        cold_start_count: cold,
        mean_e2e_latency_s: mean_latency_s,
        keep_alive_carbon_g: keep_alive,
        cold_carbon_g: cold_g,
        exec_carbon_g: exec_g,
        total_carbon_g: total,
        lcp: mean_latency_s * total,
        iri: cold as f64 * keep_alive,
        weighted_cost: sum_of(outcomes, |o| o.weighted_cost),
        decision_histogram,
        hourly,
        lambda_carbon: ctx.lambda_carbon,
        sigma_l: ctx.scales.sigma_l,
        sigma_c: ctx.scales.sigma_c,
        seed: ctx.seed,
        network_const_ms: ctx.network_const_ms,
        window_w: ctx.window_w,
        trace_fingerprint: ctx.trace_fingerprint.clone(),
        overlap_warnings: ctx.overlap_warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub cold_start_count: u64,
    pub keep_alive_carbon_g: f64,
    pub total_carbon_g: f64,
    pub mean_e2e_latency_s: f64,
    pub weighted_cost: f64,
    pub lcp: f64,
    pub iri: f64,
    /// Cold-start increase over the fewest-cold report, percent.
    pub delta_cold_pct: f64,
    /// Keep-alive carbon increase over the lowest-carbon report, percent.
    pub delta_carbon_pct: f64,
    pub distance: f64,
    /// 1-based position by distance to the origin.
    pub rank: usize,
}

/// Percentage increase of `x` over `base`. A zero base is replaced by 1 so
/// that the coordinate stays finite.
fn pct_over(x: f64, base: f64) -> f64 {
    let d = if base > 0.0 { base } else { 1.0 };
    (x - base) / d * 100.0
}

/// Normalized tradeoff coordinates for reports produced on one trace.
/// Rows keep the input order; `rank` orders by distance with ties by name.
pub fn compare(reports: &[(String, SimReport)]) -> Result<Vec<CompareRow>> {
    let Some((_, first)) = reports.first() else { return Err(MetricsError::Empty) };
    for (name, r) in reports {
        if r.trace_fingerprint != first.trace_fingerprint {
            return Err(MetricsError::FingerprintMismatch {
                name: name.clone(),
                expected: first.trace_fingerprint.clone(),
                found: r.trace_fingerprint.clone(),
            });
        }
    }
    let min_cold = reports.iter().map(|(_, r)| r.cold_start_count).min().unwrap_or(0) as f64;
    let min_carbon = reports.iter().map(|(_, r)| r.keep_alive_carbon_g).fold(f64::INFINITY, f64::min);

    let mut rows: Vec<CompareRow> = reports
        .iter()
        .map(|(name, r)| {
            let x = pct_over(r.cold_start_count as f64, min_cold);
            let y = pct_over(r.keep_alive_carbon_g, min_carbon);
            CompareRow {
                name: name.clone(),
                cold_start_count: r.cold_start_count,
                keep_alive_carbon_g: r.keep_alive_carbon_g,
                total_carbon_g: r.total_carbon_g,
                mean_e2e_latency_s: r.mean_e2e_latency_s,
                weighted_cost: r.weighted_cost,
                lcp: r.lcp,
                iri: r.iri,
                delta_cold_pct: x,
                delta_carbon_pct: y,
                distance: x.hypot(y),
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].distance.total_cmp(&rows[b].distance).then_with(|| rows[a].name.cmp(&rows[b].name)));
    for (pos, i) in order.into_iter().enumerate() {
        rows[i].rank = pos + 1;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_carbon: f64,
    pub cold_start_count: u64,
    pub keep_alive_carbon_g: f64,
    pub total_carbon_g: f64,
    pub mean_e2e_latency_s: f64,
}

/// Sorted, deduplicated copy of a λ grid.
pub fn normalize_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    if g.len() < grid.len() {
        log::warn!("dropped {} duplicate lambda values from the grid", grid.len() - g.len());
    }
    Ok(g)
}

/// Runs `evaluate` once per distinct λ and returns the series sorted by λ.
pub fn sensitivity_sweep<E>(grid: &[f64], mut evaluate: impl FnMut(f64) -> Result<SimReport, E>) -> Result<Vec<SweepRow>, E>
where
    E: From<MetricsError>,
{
    let grid = normalize_grid(grid)?;
    let mut rows = Vec::with_capacity(grid.len());
    for lambda in grid {
        rows.push(sweep_row(lambda, &evaluate(lambda)?));
    }
    Ok(rows)
}

pub fn sweep_row(lambda_carbon: f64, r: &SimReport) -> SweepRow {
    SweepRow {
        lambda_carbon,
        cold_start_count: r.cold_start_count,
        keep_alive_carbon_g: r.keep_alive_carbon_g,
        total_carbon_g: r.total_carbon_g,
        mean_e2e_latency_s: r.mean_e2e_latency_s,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBucket {
    pub hour_start_ms: i64,
    pub ci: f64,
    pub decisions: u64,
    /// Selection frequency per action, in action-set order.
    pub frequencies: Vec<f64>,
}

/// Per clock-hour selection frequencies paired with the intensity at the
/// start of the hour (or at the first sample, if later).
pub fn decision_intensity_profile(
    outcomes: &[StepOutcome],
    actions: &ActionSet,
    timeline: &CarbonTimeline,
) -> Result<Vec<IntensityBucket>> {
    let mut buckets: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
    for o in outcomes {
        let i = actions.index_of(o.action_s).ok_or(MetricsError::UnknownAction { action_s: o.action_s })?;
        buckets.entry(hour_of(o.ts_ms)).or_insert_with(|| vec![0; actions.len()])[i] += 1;
    }
    buckets
        .into_iter()
        .map(|(hour, counts)| {
            let total: u64 = counts.iter().sum();
            Ok(IntensityBucket {
                hour_start_ms: hour,
                ci: timeline.ci_at(hour.max(timeline.first_ms()))?,
                decisions: total,
                frequencies: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            })
        })
        .collect()
}

pub fn write_report_json<W: Write>(mut w: W, report: &SimReport) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    Ok(())
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_compare_csv<W: Write>(w: W, rows: &[CompareRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    write_rows(w, rows)
}

pub fn write_hourly_csv<W: Write>(w: W, rows: &[HourlyPoint]) -> Result<()> {
    write_rows(w, rows)
}

/// Columns: `hour_start_ms,ci,decisions,k_<action>...`.
pub fn write_profile_csv<W: Write>(w: W, actions: &ActionSet, rows: &[IntensityBucket]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["hour_start_ms".to_string(), "ci".into(), "decisions".into()];
    header.extend(actions.as_slice().iter().map(|k| format!("k_{k}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.hour_start_ms.to_string(), r.ci.to_string(), r.decisions.to_string()];
        rec.extend(r.frequencies.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
