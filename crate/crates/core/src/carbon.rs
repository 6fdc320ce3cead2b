//! Grid carbon intensity and phase-level energy/carbon accounting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Joules in one kilowatt-hour.
pub const JOULES_PER_KWH: f64 = 3.6e6;

pub const MS_PER_HOUR: i64 = 3_600_000;

const PRESETS: &str = include_str!("../data/energy_profiles.toml");

#[derive(Debug, thiserror::Error)]
pub enum CarbonError {
    #[error("negative duration: {0} s")]
    NegativeDuration(f64),
    #[error("negative input: {what} = {value}")]
    NegativeInput { what: &'static str, value: f64 },
    #[error("time {t_ms} ms precedes the first carbon sample at {first_ms} ms")]
    BeforeStart { t_ms: i64, first_ms: i64 },
    #[error("invalid carbon timeline: {0}")]
    Timeline(String),
    #[error("invalid energy profile: {0}")]
    Profile(String),
    #[error("unknown energy profile preset `{0}`")]
    UnknownPreset(String),
    #[error("row {row}: {reason}")]
    Row { row: u64, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CarbonError> = std::result::Result<T, E>;

/// Right-continuous step function of grid carbon intensity (gCO2/kWh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonTimeline {
    samples: Vec<(i64, f64)>,
}

impl CarbonTimeline {
    pub fn new(samples: Vec<(i64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CarbonError::Timeline("at least one sample required".into()));
        }
        if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CarbonError::Timeline("sample times must be strictly increasing".into()));
        }
        if let Some((t, ci)) = samples.iter().find(|(_, ci)| !(*ci >= 0.0 && ci.is_finite())) {
            return Err(CarbonError::Timeline(format!("intensity at {t} ms must be finite and >= 0, got {ci}")));
        }
        Ok(Self { samples })
    }

    pub fn constant(ci: f64) -> Result<Self> {
        Self::new(vec![(0, ci)])
    }

    /// One sample per hour starting at t = 0.
    pub fn hourly(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().enumerate().map(|(h, &v)| (h as i64 * MS_PER_HOUR, v)).collect())
    }

    /// `hours` hourly samples alternating `first, second, first, ...`.
    pub fn alternating(first: f64, second: f64, hours: usize) -> Result<Self> {
        let values: Vec<f64> = (0..hours.max(1)).map(|h| if h % 2 == 0 { first } else { second }).collect();
        Self::hourly(&values)
    }

    pub fn samples(&self) -> &[(i64, f64)] {
        &self.samples
    }

    pub fn first_ms(&self) -> i64 {
        self.samples[0].0
    }

    /// Shifts every sample so that `origin_ms` becomes t = 0.
    pub fn rebased(&self, origin_ms: i64) -> Self {
        Self { samples: self.samples.iter().map(|&(t, ci)| (t - origin_ms, ci)).collect() }
    }

    fn index_at(&self, t_ms: i64) -> Result<usize> {
        let n = self.samples.partition_point(|&(t, _)| t <= t_ms);
        if n == 0 {
            return Err(CarbonError::BeforeStart { t_ms, first_ms: self.first_ms() });
        }
        Ok(n - 1)
    }

    /// Intensity of the latest sample at or before `t_ms`.
    pub fn ci_at(&self, t_ms: i64) -> Result<f64> {
        Ok(self.samples[self.index_at(t_ms)?].1)
    }

    /// Start of the step containing `t_ms`.
    pub fn slot_start(&self, t_ms: i64) -> Result<i64> {
        Ok(self.samples[self.index_at(t_ms)?].0)
    }

    /// Time-weighted mean intensity over `[start_ms, end_ms]`, splitting the
    /// span at sample boundaries. A zero-length span returns `ci_at(start)`.
    pub fn mean_ci(&self, start_ms: f64, end_ms: f64) -> Result<f64> {
        let start_i = start_ms.floor() as i64;
        let mut i = self.index_at(start_i)?;
        if end_ms <= start_ms {
            return Ok(self.samples[i].1);
        }
        let mut acc = 0.0;
        let mut t = start_ms;
        while t < end_ms {
            let next = self.samples.get(i + 1).map_or(f64::INFINITY, |s| s.0 as f64);
            let seg_end = next.min(end_ms);
            acc += self.samples[i].1 * (seg_end - t);
            t = seg_end;
            i += 1;
        }
        Ok(acc / (end_ms - start_ms))
    }

    /// Parses `hour_start_iso8601,ci_g_per_kwh` rows (RFC 3339 timestamps).
    pub fn read_csv_from<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| CarbonError::Timeline(format!("missing column `{name}`")))
        };
        let (ti, ci) = (col("hour_start_iso8601")?, col("ci_g_per_kwh")?);
        let mut samples = Vec::new();
        let mut record = csv::StringRecord::new();
        while rdr.read_record(&mut record)? {
            let row = record.position().map_or(0, |p| p.line());
            let raw_t = record.get(ti).unwrap_or("").trim();
            let t = chrono::DateTime::parse_from_rfc3339(raw_t)
                .map_err(|e| CarbonError::Row { row, reason: format!("bad timestamp {raw_t:?}: {e}") })?
                .timestamp_millis();
            let raw_ci = record.get(ci).unwrap_or("").trim();
            let v: f64 = raw_ci
                .parse()
                .map_err(|_| CarbonError::Row { row, reason: format!("bad intensity {raw_ci:?}") })?;
            samples.push((t, v));
        }
        Self::new(samples)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::read_csv_from(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["hour_start_iso8601", "ci_g_per_kwh"])?;
        for &(t, ci) in &self.samples {
            let ts = chrono::DateTime::from_timestamp_millis(t)
                .ok_or_else(|| CarbonError::Timeline(format!("timestamp {t} out of range")))?;
            out.write_record([ts.format("%Y-%m-%dT%H:%M:%SZ").to_string(), ci.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Power coefficients of the accounting model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyProfile {
    pub j_cpu_core_w: f64,
    pub j_dram_mb_w: f64,
    pub lambda_idle: f64,
    pub p_cold_w_per_core: f64,
}

#[derive(Deserialize)]
struct PresetFile {
    profiles: BTreeMap<String, EnergyProfile>,
}

fn non_negative(what: &'static str, value: f64) -> Result<()> {
    if value < 0.0 || value.is_nan() {
        Err(CarbonError::NegativeInput { what, value })
    } else {
        Ok(())
    }
}

fn duration(t_s: f64) -> Result<f64> {
    if t_s < 0.0 || t_s.is_nan() {
        Err(CarbonError::NegativeDuration(t_s))
    } else {
        Ok(t_s)
    }
}

impl EnergyProfile {
    pub fn new(j_cpu_core_w: f64, j_dram_mb_w: f64, lambda_idle: f64, p_cold_w_per_core: f64) -> Result<Self> {
        let p = Self { j_cpu_core_w, j_dram_mb_w, lambda_idle, p_cold_w_per_core };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.j_cpu_core_w, self.j_dram_mb_w, self.lambda_idle, self.p_cold_w_per_core];
        if coeffs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(CarbonError::Profile(format!("all coefficients must be > 0: {self:?}")));
        }
        if self.lambda_idle > 1.0 {
            return Err(CarbonError::Profile(format!("lambda_idle must be in (0, 1], got {}", self.lambda_idle)));
        }
        Ok(())
    }

    /// Names of the bundled presets.
    pub fn preset_names() -> Vec<String> {
        Self::all_presets().into_keys().collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let p = Self::all_presets().remove(name).ok_or_else(|| CarbonError::UnknownPreset(name.into()))?;
        p.validate()?;
        Ok(p)
    }

    fn all_presets() -> BTreeMap<String, EnergyProfile> {
        toml::from_str::<PresetFile>(PRESETS).expect("bundled preset file is valid").profiles
    }

    /// Active power of a pod with the given allocation (W).
    pub fn active_power(&self, mem_mb: f64, cpu_cores: f64) -> f64 {
        self.j_dram_mb_w * mem_mb + self.j_cpu_core_w * cpu_cores
    }

    pub fn exec_energy(&self, mem_mb: f64, cpu_cores: f64, t_exec_s: f64) -> Result<f64> {
        Ok(self.active_power(mem_mb, cpu_cores) * duration(t_exec_s)?)
    }

    /// Keep-alive energy: the active power scaled by `lambda_idle`.
    pub fn idle_energy(&self, mem_mb: f64, cpu_cores: f64, t_idle_s: f64) -> Result<f64> {
        Ok(self.lambda_idle * self.active_power(mem_mb, cpu_cores) * duration(t_idle_s)?)
    }

    pub fn cold_energy(&self, cpu_cores: f64, t_cold_s: f64) -> Result<f64> {
        Ok(self.p_cold_w_per_core * cpu_cores * duration(t_cold_s)?)
    }
}

impl Default for EnergyProfile {
    fn default() -> Self {
        Self::preset("m5-xeon").expect("m5-xeon preset present")
    }
}

/// Grams of CO2 emitted by `energy_j` joules at intensity `ci` (gCO2/kWh).
pub fn to_carbon(energy_j: f64, ci: f64) -> Result<f64> {
    non_negative("energy_j", energy_j)?;
    non_negative("ci", ci)?;
    Ok(energy_j / JOULES_PER_KWH * ci)
}

/// Per-phase carbon in grams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CarbonBreakdown {
    pub exec_g: f64,
    pub idle_g: f64,
    pub cold_g: f64,
    pub total_g: f64,
}

impl CarbonBreakdown {
    pub fn new(exec_g: f64, idle_g: f64, cold_g: f64) -> Self {
        Self { exec_g, idle_g, cold_g, total_g: exec_g + idle_g + cold_g }
    }

    /// Component-wise sum; the total is recomputed from the summed parts.
    pub fn accumulate(&mut self, other: &CarbonBreakdown) {
        self.exec_g += other.exec_g;
        self.idle_g += other.idle_g;
        self.cold_g += other.cold_g;
        self.total_g = self.exec_g + self.idle_g + self.cold_g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile() -> EnergyProfile {
        EnergyProfile::new(3.0, 0.001, 0.2, 6.37).unwrap()
    }

    #[test]
    fn exec_energy_hand_values() {
        let p = profile();
        assert_eq!(p.exec_energy(100.0, 1.0, 0.0).unwrap(), 0.0);
        assert!((p.exec_energy(100.0, 1.0, 2.0).unwrap() - 6.2).abs() < 1e-12);
        let e1 = p.exec_energy(100.0, 1.0, 2.0).unwrap();
        let e2 = p.exec_energy(100.0, 1.0, 4.0).unwrap();
        assert!((e2 - 2.0 * e1).abs() < 1e-12);
        assert!(matches!(p.exec_energy(1.0, 1.0, -1.0), Err(CarbonError::NegativeDuration(_))));
    }

    #[test]
    fn idle_energy_hand_values() {
        let p = profile();
        assert!((p.idle_energy(100.0, 1.0, 60.0).unwrap() - 37.2).abs() < 1e-9);
        assert_eq!(p.idle_energy(100.0, 1.0, 0.0).unwrap(), 0.0);
        let exec = p.exec_energy(100.0, 1.0, 60.0).unwrap();
        assert!((p.idle_energy(100.0, 1.0, 60.0).unwrap() - 0.2 * exec).abs() < 1e-12);
        assert!(p.idle_energy(1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn cold_energy_hand_values() {
        let p = profile();
        assert_eq!(p.cold_energy(1.0, 0.0).unwrap(), 0.0);
        // 6.37 W * 0.1122 s
        assert!((p.cold_energy(1.0, 0.1122).unwrap() - 0.714714).abs() < 1e-9);
        assert!(p.cold_energy(1.0, 0.2).unwrap() > p.cold_energy(1.0, 0.1).unwrap());
        assert!(p.cold_energy(1.0, -0.1).is_err());
    }

    #[test]
    fn carbon_conversion() {
        assert!((to_carbon(3.6e6, 100.0).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(to_carbon(0.0, 450.0).unwrap(), 0.0);
        assert_eq!(to_carbon(1234.0, 0.0).unwrap(), 0.0);
        assert!(to_carbon(-1.0, 10.0).is_err());
        assert!(to_carbon(1.0, -10.0).is_err());
    }

    #[test]
    fn step_lookup() {
        let tl = CarbonTimeline::new(vec![(0, 100.0), (MS_PER_HOUR, 300.0)]).unwrap();
        assert_eq!(tl.ci_at(MS_PER_HOUR / 2).unwrap(), 100.0);
        assert_eq!(tl.ci_at(MS_PER_HOUR).unwrap(), 300.0);
        assert_eq!(tl.ci_at(10 * MS_PER_HOUR).unwrap(), 300.0);
        assert!(matches!(tl.ci_at(-1), Err(CarbonError::BeforeStart { .. })));
    }

    #[test]
    fn mean_ci_splits_at_boundaries() {
        let tl = CarbonTimeline::new(vec![(0, 100.0), (MS_PER_HOUR, 300.0)]).unwrap();
        let h = MS_PER_HOUR as f64;
        assert!((tl.mean_ci(h - 1000.0, h + 1000.0).unwrap() - 200.0).abs() < 1e-9);
        assert_eq!(tl.mean_ci(10.0, 20.0).unwrap(), 100.0);
        assert_eq!(tl.mean_ci(10.0, 10.0).unwrap(), 100.0);
    }

    #[test]
    fn timeline_validation() {
        assert!(CarbonTimeline::new(vec![]).is_err());
        assert!(CarbonTimeline::new(vec![(0, 1.0), (0, 2.0)]).is_err());
        assert!(CarbonTimeline::new(vec![(0, -1.0)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "hour_start_iso8601,ci_g_per_kwh\n2024-05-01T00:00:00Z,120.5\n2024-05-01T01:00:00Z,300\n";
        let tl = CarbonTimeline::read_csv_from(csv.as_bytes()).unwrap();
        assert_eq!(tl.samples().len(), 2);
        assert_eq!(tl.samples()[1].0 - tl.samples()[0].0, MS_PER_HOUR);
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), csv);
        let rebased = tl.rebased(tl.first_ms());
        assert_eq!(rebased.ci_at(0).unwrap(), 120.5);
    }

    #[test]
    fn bad_timestamp_names_row() {
        let csv = "hour_start_iso8601,ci_g_per_kwh\nyesterday,120\n";
        let err = CarbonTimeline::read_csv_from(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, CarbonError::Row { row: 2, .. }), "{err}");
    }

    #[test]
    fn presets_load_and_validate() {
        let names = EnergyProfile::preset_names();
        assert!(names.contains(&"m5-xeon".to_string()));
        for n in &names {
            EnergyProfile::preset(n).unwrap();
        }
        let float_ops = EnergyProfile::preset("fb-float-operations").unwrap();
        assert_eq!(float_ops.p_cold_w_per_core, 6.37);
        assert_eq!(EnergyProfile::default().lambda_idle, 0.2);
        assert!(matches!(EnergyProfile::preset("nope"), Err(CarbonError::UnknownPreset(_))));
    }

    #[test]
    fn profile_validation() {
        assert!(EnergyProfile::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(EnergyProfile::new(1.0, 1.0, 1.5, 1.0).is_err());
        assert!(EnergyProfile::new(1.0, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn breakdown_total_is_sum() {
        let mut b = CarbonBreakdown::new(1.0, 2.0, 3.0);
        assert_eq!(b.total_g, 6.0);
        b.accumulate(&CarbonBreakdown::new(0.5, 0.25, 0.125));
        assert_eq!(b.total_g, b.exec_g + b.idle_g + b.cold_g);
    }

    proptest! {
        #[test]
        fn energies_are_linear(
            mem in 1.0f64..4096.0, cpu in 0.1f64..16.0, t in 0.0f64..3600.0, c in 0.1f64..10.0
        ) {
            let p = profile();
            let base = p.exec_energy(mem, cpu, t).unwrap();
            let tol = 1e-9 * (1.0 + base.abs() * c);
            prop_assert!((p.exec_energy(mem, cpu, c * t).unwrap() - c * base).abs() <= tol);
            let both = p.exec_energy(c * mem, c * cpu, t).unwrap();
            prop_assert!((both - c * base).abs() <= tol);
            let idle = p.idle_energy(mem, cpu, t).unwrap();
            prop_assert!((p.idle_energy(mem, cpu, c * t).unwrap() - c * idle).abs() <= tol);
            prop_assert!(idle <= base);
        }

        #[test]
        fn lookup_is_constant_within_an_hour(h in 0i64..24, a in 0i64..MS_PER_HOUR, b in 0i64..MS_PER_HOUR) {
            let values: Vec<f64> = (0..24).map(|i| 50.0 + 30.0 * i as f64).collect();
            let tl = CarbonTimeline::hourly(&values).unwrap();
            let base = h * MS_PER_HOUR;
            prop_assert_eq!(tl.ci_at(base + a).unwrap(), tl.ci_at(base + b).unwrap());
        }
    }
}
