//! Detector data cleaning, imputation and feature engineering.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`qc_filter`] drops detectors with too many missing or zero records, or
//!    with an implausible per-lane flow.
//! 2. [`impute`] fills the remaining gaps with round-robin ridge regressions
//!    on each detector's nearest neighbours in the graph.
//! 3. [`engineer_features`] derives the hourly non-evacuation feature set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{with_path, RoadGraph};

/// First in-scope hour of the day (inclusive).
pub const DAY_START_HOUR: u32 = 3;
/// Last in-scope hour of the day (exclusive).
pub const DAY_END_HOUR: u32 = 19;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HourRecord {
    pub timestamp: NaiveDateTime,
    pub volume: Option<f64>,
    pub speed: Option<f64>,
    pub occupancy: Option<f64>,
}

impl HourRecord {
    fn is_missing(&self) -> bool {
        self.volume.is_none() || self.speed.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDetectorSeries {
    pub detector_id: String,
    pub lane_count: u32,
    pub records: Vec<HourRecord>,
}

impl RawDetectorSeries {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.timestamp.minute() != 0 || r.timestamp.second() != 0 || r.timestamp.nanosecond() != 0 {
                return Err(Error::Validation(format!(
                    "{}: timestamp {} is not on the hour",
                    self.detector_id, r.timestamp
                )));
            }
            if r.volume.is_some_and(|v| !(v >= 0.0)) || r.speed.is_some_and(|v| !(v >= 0.0)) {
                return Err(Error::Validation(format!(
                    "{}: negative volume or speed at {}",
                    self.detector_id, r.timestamp
                )));
            }
        }
        if let Some(w) = self.records.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::Validation(format!(
                "{}: timestamps not strictly increasing at {}",
                self.detector_id, w[1].timestamp
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcThresholds {
    pub max_missing_fraction: f64,
    pub max_zero_fraction: f64,
    pub max_vphpl: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            max_missing_fraction: 0.20,
            max_zero_fraction: 0.40,
            max_vphpl: 2500.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QcRule {
    #[serde(rename = "missing>20%")]
    TooManyMissing,
    #[serde(rename = "zeros>40%")]
    TooManyZeros,
    #[serde(rename = "vphpl>2500")]
    ImplausibleFlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub detector_id: String,
    pub rule: QcRule,
    /// The offending fraction, or the maximum vphpl.
    pub observed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub retained: Vec<String>,
    pub rejections: Vec<Rejection>,
}

/// Splits detectors into retained and rejected. A detector is rejected when
/// its missing fraction exceeds the limit, its zero-volume fraction exceeds
/// the limit, or any single hour exceeds the per-lane flow ceiling; every
/// violated rule is reported.
pub fn qc_filter(series: Vec<RawDetectorSeries>, thresholds: &QcThresholds) -> (Vec<RawDetectorSeries>, QcReport) {
    let mut report = QcReport::default();
    let mut kept = Vec::new();
    for s in series {
        let n = s.records.len().max(1) as f64;
        let missing = s.records.iter().filter(|r| r.is_missing()).count() as f64 / n;
        let zeros = s.records.iter().filter(|r| r.volume == Some(0.0)).count() as f64 / n;
        let max_vphpl = s
            .records
            .iter()
            .filter_map(|r| r.volume)
            .fold(0.0f64, f64::max)
            / s.lane_count.max(1) as f64;

        let mut rejected = false;
        let mut reject = |rule, observed| {
            rejected = true;
            report.rejections.push(Rejection {
                detector_id: s.detector_id.clone(),
                rule,
                observed,
            });
        };
        if s.records.is_empty() || missing > thresholds.max_missing_fraction {
            reject(QcRule::TooManyMissing, if s.records.is_empty() { 1.0 } else { missing });
        }
        if zeros > thresholds.max_zero_fraction {
            reject(QcRule::TooManyZeros, zeros);
        }
        if max_vphpl > thresholds.max_vphpl {
            reject(QcRule::ImplausibleFlow, max_vphpl);
        }
        if !rejected {
            report.retained.push(s.detector_id.clone());
            kept.push(s);
        }
    }
    (kept, report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub neighbors: usize,
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_vphpl: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            neighbors: 5,
            ridge: 1e-3,
            max_iterations: 10,
            tolerance: 1e-3,
            max_vphpl: 2500.0,
        }
    }
}

/// A gap-free hourly series on the shared timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSeries {
    pub detector_id: String,
    pub lane_count: u32,
    pub timestamps: Vec<NaiveDateTime>,
    pub volume: Vec<f64>,
    pub speed: Vec<f64>,
    pub occupancy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    /// Number of filled cells per detector and variable.
    pub filled: BTreeMap<String, usize>,
    /// Hours missing at every detector, filled from hour-of-day means.
    pub fallback_hours: Vec<NaiveDateTime>,
    pub iterations: usize,
}

/// Fills every missing volume, speed and occupancy value.
///
/// All series are aligned on the union of their timestamps. Each variable
/// is imputed independently: gaps start at the detector mean, then each
/// detector with gaps is regressed (ridge, centred) on its `k` nearest
/// detectors by hop distance, round-robin, until the largest relative
/// change falls under the tolerance. Observed values are never modified.
/// Hours missing at every detector fall back to the detector's hour-of-day
/// mean and are listed in the report.
pub fn impute(series: &[RawDetectorSeries], graph: &RoadGraph, config: &ImputeConfig) -> Result<(Vec<DetectorSeries>, ImputeReport)> {
    if series.is_empty() {
        return Ok((Vec::new(), ImputeReport::default()));
    }
    for s in series {
        s.validate()?;
    }
    let timeline: Vec<NaiveDateTime> = series
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.timestamp))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let slot: HashMap<NaiveDateTime, usize> = timeline.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let neighbors = nearest_detectors(series, graph, config.neighbors)?;
    let mut report = ImputeReport::default();

    let mut columns = Vec::new();
    for (var, pick) in [
        ("volume", (|r: &HourRecord| r.volume) as fn(&HourRecord) -> Option<f64>),
        ("speed", |r: &HourRecord| r.speed),
        ("occupancy", |r: &HourRecord| r.occupancy),
    ] {
        let observed: Vec<Vec<Option<f64>>> = series
            .iter()
            .map(|s| {
                let mut col = vec![None; timeline.len()];
                for r in &s.records {
                    col[slot[&r.timestamp]] = pick(r);
                }
                col
            })
            .collect();
        let bounds: Vec<(f64, f64)> = series
            .iter()
            .map(|s| match var {
                "volume" => (0.0, config.max_vphpl * s.lane_count as f64),
                "speed" => (0.0, f64::INFINITY),
                _ => (0.0, 1.0),
            })
            .collect();
        let (filled, iterations, fallback) = impute_variable(&observed, &timeline, &neighbors, &bounds, config);
        for (s, col) in series.iter().zip(&observed) {
            *report.filled.entry(format!("{}/{var}", s.detector_id)).or_default() +=
                col.iter().filter(|v| v.is_none()).count();
        }
        report.iterations = report.iterations.max(iterations);
        for h in fallback {
            if !report.fallback_hours.contains(&timeline[h]) {
                report.fallback_hours.push(timeline[h]);
            }
        }
        columns.push(filled);
    }
    report.fallback_hours.sort();
    let occupancy = columns.pop().unwrap();
    let speed = columns.pop().unwrap();
    let volume = columns.pop().unwrap();

    let out = series
        .iter()
        .enumerate()
        .map(|(d, s)| DetectorSeries {
            detector_id: s.detector_id.clone(),
            lane_count: s.lane_count,
            timestamps: timeline.clone(),
            volume: volume[d].clone(),
            speed: speed[d].clone(),
            occupancy: occupancy[d].clone(),
        })
        .collect();
    Ok((out, report))
}

fn nearest_detectors(series: &[RawDetectorSeries], graph: &RoadGraph, k: usize) -> Result<Vec<Vec<usize>>> {
    let node_of: Vec<usize> = series
        .iter()
        .map(|s| {
            graph
                .index_of(&s.detector_id)
                .ok_or_else(|| Error::Validation(format!("detector `{}` is not in the graph", s.detector_id)))
        })
        .collect::<Result<_>>()?;
    Ok(node_of
        .iter()
        .enumerate()
        .map(|(d, &node)| {
            let hops = graph.hop_distances(node);
            let mut others: Vec<usize> = (0..series.len()).filter(|&o| o != d).collect();
            others.sort_by_key(|&o| (hops[node_of[o]].unwrap_or(usize::MAX), o));
            others.truncate(k);
            others
        })
        .collect())
}

fn impute_variable(
    observed: &[Vec<Option<f64>>],
    timeline: &[NaiveDateTime],
    neighbors: &[Vec<usize>],
    bounds: &[(f64, f64)],
    config: &ImputeConfig,
) -> (Vec<Vec<f64>>, usize, Vec<usize>) {
    let hours = timeline.len();
    let all_missing: Vec<usize> = (0..hours)
        .filter(|&t| observed.iter().all(|col| col[t].is_none()))
        .collect();
    let mut fixed = vec![false; hours];
    all_missing.iter().for_each(|&t| fixed[t] = true);

    let mut filled: Vec<Vec<f64>> = observed
        .iter()
        .zip(bounds)
        .map(|(col, &(lo, hi))| {
            let obs: Vec<f64> = col.iter().flatten().copied().collect();
            let mean = if obs.is_empty() { lo.max(0.0) } else { obs.iter().sum::<f64>() / obs.len() as f64 };
            let mut by_hour = [(0.0, 0usize); 24];
            for (t, v) in col.iter().enumerate() {
                if let Some(v) = v {
                    let h = timeline[t].hour() as usize;
                    by_hour[h].0 += v;
                    by_hour[h].1 += 1;
                }
            }
            col.iter()
                .enumerate()
                .map(|(t, v)| match v {
                    Some(v) => *v,
                    None if fixed[t] => {
                        let (s, n) = by_hour[timeline[t].hour() as usize];
                        if n > 0 { (s / n as f64).clamp(lo, hi) } else { mean.clamp(lo, hi) }
                    }
                    None => mean.clamp(lo, hi),
                })
                .collect()
        })
        .collect();

    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let mut max_change = 0.0f64;
        for d in 0..observed.len() {
            let gaps: Vec<usize> = (0..hours)
                .filter(|&t| observed[d][t].is_none() && !fixed[t])
                .collect();
            if gaps.is_empty() || neighbors[d].is_empty() {
                continue;
            }
            let rows: Vec<usize> = (0..hours).filter(|&t| observed[d][t].is_some()).collect();
            let Some(model) = RidgeFit::fit(&filled, &neighbors[d], d, &rows, config.ridge) else {
                continue;
            };
            let (lo, hi) = bounds[d];
            for t in gaps {
                let new = model.predict(&filled, &neighbors[d], t).clamp(lo, hi);
                let old = filled[d][t];
                max_change = max_change.max((new - old).abs() / old.abs().max(1.0));
                filled[d][t] = new;
            }
        }
        if max_change < config.tolerance {
            break;
        }
    }
    (filled, iterations, all_missing)
}

/// Ridge regression on centred data: `y - ybar = (x - xbar) . beta`.
struct RidgeFit {
    x_mean: Vec<f64>,
    y_mean: f64,
    beta: Vec<f64>,
}

impl RidgeFit {
    fn fit(columns: &[Vec<f64>], predictors: &[usize], target: usize, rows: &[usize], ridge: f64) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let p = predictors.len();
        let n = rows.len() as f64;
        let x_mean: Vec<f64> = predictors
            .iter()
            .map(|&j| rows.iter().map(|&t| columns[j][t]).sum::<f64>() / n)
            .collect();
        let y_mean = rows.iter().map(|&t| columns[target][t]).sum::<f64>() / n;
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for &t in rows {
            let y = columns[target][t] - y_mean;
            for a in 0..p {
                let xa = columns[predictors[a]][t] - x_mean[a];
                rhs[a] += xa * y;
                for b in 0..p {
                    gram[a * p + b] += xa * (columns[predictors[b]][t] - x_mean[b]);
                }
            }
        }
        for a in 0..p {
            gram[a * p + a] += ridge;
        }
        let beta = solve(gram, rhs, p)?;
        Some(RidgeFit { x_mean, y_mean, beta })
    }

    fn predict(&self, columns: &[Vec<f64>], predictors: &[usize], t: usize) -> f64 {
        self.y_mean
            + predictors
                .iter()
                .zip(&self.beta)
                .zip(&self.x_mean)
                .map(|((&j, b), m)| b * (columns[j][t] - m))
                .sum::<f64>()
    }
}

/// Gaussian elimination with partial pivoting on a dense `n x n` system.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimePeriod {
    EarlyMorning,
    Morning,
    MidDay,
    Evening,
}

impl TimePeriod {
    pub const ALL: [TimePeriod; 4] = [
        TimePeriod::EarlyMorning,
        TimePeriod::Morning,
        TimePeriod::MidDay,
        TimePeriod::Evening,
    ];

    /// Period of an hour of day, using half-open intervals
    /// `[3,7) [7,11) [11,15) [15,19)`; `None` outside 3 am to 7 pm.
    pub fn from_hour(hour: u32) -> Option<TimePeriod> {
        match hour {
            3..=6 => Some(TimePeriod::EarlyMorning),
            7..=10 => Some(TimePeriod::Morning),
            11..=14 => Some(TimePeriod::MidDay),
            15..=18 => Some(TimePeriod::Evening),
            _ => None,
        }
    }

    pub fn start_hour(self) -> u32 {
        match self {
            TimePeriod::EarlyMorning => 3,
            TimePeriod::Morning => 7,
            TimePeriod::MidDay => 11,
            TimePeriod::Evening => 15,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TimePeriod::EarlyMorning => "early_morning",
            TimePeriod::Morning => "morning",
            TimePeriod::MidDay => "mid_day",
            TimePeriod::Evening => "evening",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        TimePeriod::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown time period `{s}`")))
    }
}

pub fn is_weekend(t: NaiveDateTime) -> bool {
    matches!(t.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub detector_id: String,
    pub timestamp: NaiveDateTime,
    pub time_period: TimePeriod,
    pub is_weekend: bool,
    pub flow: f64,
    pub prev_day_mean_flow: f64,
    pub prev_day_std_flow: f64,
    pub prev_period_mean_flow: f64,
    pub prev_period_std_flow: f64,
    pub mean_speed: f64,
    /// Set when a previous-day or previous-period statistic had to be taken
    /// from the current day or period because the earlier data is absent.
    pub fallback: bool,
}

/// Hourly feature rows for every detector and every in-scope hour, in
/// detector order then time order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureFrame {
    pub rows: Vec<FeatureRow>,
}

impl FeatureFrame {
    pub fn detector_ids(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.rows {
            if seen.last() != Some(&r.detector_id) && !seen.contains(&r.detector_id) {
                seen.push(r.detector_id.clone());
            }
        }
        seen
    }
}

/// Builds the non-evacuation features from complete series.
///
/// Previous-day statistics use every record of the same detector on the
/// previous calendar day; previous-period statistics use the four hours
/// immediately before the current period starts. Missing history falls
/// back to the current day or period, with `fallback` set. Standard
/// deviations are population deviations.
pub fn engineer_features(series: &[DetectorSeries]) -> Result<FeatureFrame> {
    let mut rows = Vec::new();
    for s in series {
        if s.volume.len() != s.timestamps.len() || s.speed.len() != s.timestamps.len() {
            return Err(Error::shape("engineer_features", format!("{}: ragged series", s.detector_id)));
        }
        let by_time: HashMap<NaiveDateTime, usize> = s.timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut by_day: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
        for (t, v) in s.timestamps.iter().zip(&s.volume) {
            by_day.entry(t.date()).or_default().push(*v);
        }
        for (i, &t) in s.timestamps.iter().enumerate() {
            let Some(period) = TimePeriod::from_hour(t.hour()) else { continue };
            let mut fallback = false;

            let prev_day = t.date().pred_opt().and_then(|d| by_day.get(&d));
            let (day_mean, day_std) = match prev_day {
                Some(v) => mean_std(v),
                None => {
                    fallback = true;
                    mean_std(&by_day[&t.date()])
                }
            };

            let period_start = t.date().and_hms_opt(period.start_hour(), 0, 0).unwrap();
            let collect = |from: NaiveDateTime| -> Vec<f64> {
                (0..4)
                    .filter_map(|h| by_time.get(&(from + Duration::hours(h))).map(|&k| s.volume[k]))
                    .collect()
            };
            let before = collect(period_start - Duration::hours(4));
            let (period_mean, period_std) = if before.is_empty() {
                fallback = true;
                mean_std(&collect(period_start))
            } else {
                mean_std(&before)
            };

            rows.push(FeatureRow {
                detector_id: s.detector_id.clone(),
                timestamp: t,
                time_period: period,
                is_weekend: is_weekend(t),
                flow: s.volume[i],
                prev_day_mean_flow: day_mean,
                prev_day_std_flow: day_std,
                prev_period_mean_flow: period_mean,
                prev_period_std_flow: period_std,
                mean_speed: s.speed[i],
                fallback,
            });
        }
    }
    Ok(FeatureFrame { rows })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

// ---- CSV interfaces -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DetectorCsvRow {
    detector_id: String,
    timestamp: String,
    volume: Option<f64>,
    speed: Option<f64>,
    occupancy: Option<f64>,
}

pub(crate) fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    s.parse::<NaiveDateTime>()
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|_| Error::Validation(format!("bad timestamp `{s}`")))
}

pub(crate) fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Reads hourly detector records (empty field = missing). Lane counts come
/// from the graph; series are returned in graph order.
pub fn read_detector_csv(path: &Path, graph: &RoadGraph) -> Result<Vec<RawDetectorSeries>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut grouped: BTreeMap<usize, Vec<HourRecord>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<DetectorCsvRow>().enumerate() {
        let row = row.map_err(|e| with_path(e, path))?;
        let idx = graph.index_of(&row.detector_id).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{}: detector `{}` is not in the graph",
                path.display(),
                line + 2,
                row.detector_id
            ))
        })?;
        grouped.entry(idx).or_default().push(HourRecord {
            timestamp: parse_timestamp(&row.timestamp)?,
            volume: row.volume,
            speed: row.speed,
            occupancy: row.occupancy,
        });
    }
    grouped
        .into_iter()
        .map(|(idx, mut records)| {
            records.sort_by_key(|r| r.timestamp);
            let node = &graph.nodes()[idx];
            let s = RawDetectorSeries {
                detector_id: node.detector_id.clone(),
                lane_count: node.lane_count,
                records,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}

pub fn write_detector_csv(series: &[RawDetectorSeries], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for s in series {
        for r in &s.records {
            w.serialize(DetectorCsvRow {
                detector_id: s.detector_id.clone(),
                timestamp: format_timestamp(r.timestamp),
                volume: r.volume,
                speed: r.speed,
                occupancy: r.occupancy,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Complete series as raw records, for writing cleaned data in the same
/// CSV schema.
pub fn to_raw(series: &[DetectorSeries]) -> Vec<RawDetectorSeries> {
    series
        .iter()
        .map(|s| RawDetectorSeries {
            detector_id: s.detector_id.clone(),
            lane_count: s.lane_count,
            records: (0..s.timestamps.len())
                .map(|i| HourRecord {
                    timestamp: s.timestamps[i],
                    volume: Some(s.volume[i]),
                    speed: Some(s.speed[i]),
                    occupancy: Some(s.occupancy[i]),
                })
                .collect(),
        })
        .collect()
}

/// Converts gap-free raw series (e.g. re-read cleaned CSV) back to
/// [`DetectorSeries`]; any missing field is an error.
pub fn to_complete(series: &[RawDetectorSeries]) -> Result<Vec<DetectorSeries>> {
    series
        .iter()
        .map(|s| {
            let get = |v: Option<f64>, t: NaiveDateTime| {
                v.ok_or_else(|| Error::Validation(format!("{}: missing value at {t} in cleaned data", s.detector_id)))
            };
            let mut out = DetectorSeries {
                detector_id: s.detector_id.clone(),
                lane_count: s.lane_count,
                timestamps: Vec::new(),
                volume: Vec::new(),
                speed: Vec::new(),
                occupancy: Vec::new(),
            };
            for r in &s.records {
                out.timestamps.push(r.timestamp);
                out.volume.push(get(r.volume, r.timestamp)?);
                out.speed.push(get(r.speed, r.timestamp)?);
                out.occupancy.push(r.occupancy.unwrap_or(0.0));
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureCsvRow {
    detector_id: String,
    timestamp: String,
    time_period: String,
    is_weekend: u8,
    flow: f64,
    prev_day_mean_flow: f64,
    prev_day_std_flow: f64,
    prev_period_mean_flow: f64,
    prev_period_std_flow: f64,
    mean_speed: f64,
    fallback: u8,
}

pub fn write_feature_csv(frame: &FeatureFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for r in &frame.rows {
        w.serialize(FeatureCsvRow {
            detector_id: r.detector_id.clone(),
            timestamp: format_timestamp(r.timestamp),
            time_period: r.time_period.name().into(),
            is_weekend: r.is_weekend as u8,
            flow: r.flow,
            prev_day_mean_flow: r.prev_day_mean_flow,
            prev_day_std_flow: r.prev_day_std_flow,
            prev_period_mean_flow: r.prev_period_mean_flow,
            prev_period_std_flow: r.prev_period_std_flow,
            mean_speed: r.mean_speed,
            fallback: r.fallback as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: &Path) -> Result<FeatureFrame> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut rows = Vec::new();
    for row in reader.deserialize::<FeatureCsvRow>() {
        let r = row.map_err(|e| with_path(e, path))?;
        rows.push(FeatureRow {
            detector_id: r.detector_id,
            timestamp: parse_timestamp(&r.timestamp)?,
            time_period: TimePeriod::parse(&r.time_period)?,
            is_weekend: r.is_weekend != 0,
            flow: r.flow,
            prev_day_mean_flow: r.prev_day_mean_flow,
            prev_day_std_flow: r.prev_day_std_flow,
            prev_period_mean_flow: r.prev_period_mean_flow,
            prev_period_std_flow: r.prev_period_std_flow,
            mean_speed: r.mean_speed,
            fallback: r.fallback != 0,
        });
    }
    Ok(FeatureFrame { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::chain;

    fn ts(day: u32, hour: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2022, 9, day).unwrap().and_hms_opt(hour, 0, 0).unwrap()
    }

    /// 100 hourly records; the first `missing` are missing and the next
    /// `zeros` are zero volume.
    fn fixture(id: &str, missing: usize, zeros: usize, peak: f64, lanes: u32) -> RawDetectorSeries {
        let start = ts(1, 0);
        let records = (0..100)
            .map(|i| {
                let t = start + Duration::hours(i as i64);
                let volume = if i < missing {
                    None
                } else if i < missing + zeros {
                    Some(0.0)
                } else if i == 99 {
                    Some(peak)
                } else {
                    Some(900.0)
                };
                HourRecord {
                    timestamp: t,
                    volume,
                    speed: volume.map(|_| 55.0),
                    occupancy: volume.map(|_| 0.1),
                }
            })
            .collect();
        RawDetectorSeries {
            detector_id: id.into(),
            lane_count: lanes,
            records,
        }
    }

    #[test]
    fn qc_threshold_edges() {
        let t = QcThresholds::default();
        let cases = [
            (fixture("m19", 19, 0, 900.0, 1), true),
            (fixture("m21", 21, 0, 900.0, 1), false),
            (fixture("m20", 20, 0, 900.0, 1), true),
            (fixture("z39", 0, 39, 900.0, 1), true),
            (fixture("z41", 0, 41, 900.0, 1), false),
            (fixture("v2499", 0, 0, 2499.0, 1), true),
            (fixture("v2501", 0, 0, 2501.0, 1), false),
            (fixture("v2500", 0, 0, 2500.0, 1), true),
            (fixture("lanes", 0, 0, 5000.0, 2), true),
        ];
        for (series, keep) in cases {
            let id = series.detector_id.clone();
            let (kept, report) = qc_filter(vec![series], &t);
            assert_eq!(kept.len() == 1, keep, "{id}: {report:?}");
        }
    }

    #[test]
    fn qc_reports_rules() {
        let (_, r) = qc_filter(vec![fixture("a", 25, 0, 900.0, 1)], &QcThresholds::default());
        assert_eq!(r.rejections[0].rule, QcRule::TooManyMissing);
        assert!((r.rejections[0].observed - 0.25).abs() < 1e-12);
        let (_, r) = qc_filter(vec![fixture("b", 0, 0, 2600.0, 1)], &QcThresholds::default());
        assert_eq!(r.rejections[0].rule, QcRule::ImplausibleFlow);
        assert_eq!(serde_json::to_string(&r.rejections[0].rule).unwrap(), "\"vphpl>2500\"");
        let (kept, r) = qc_filter(vec![fixture("c", 0, 10, 1800.0, 1)], &QcThresholds::default());
        assert_eq!(kept.len(), 1);
        assert!(r.rejections.is_empty());
    }

    #[test]
    fn qc_is_idempotent() {
        let all = vec![
            fixture("a", 30, 0, 900.0, 1),
            fixture("b", 5, 5, 900.0, 1),
            fixture("c", 0, 50, 900.0, 1),
            fixture("d", 0, 0, 1000.0, 1),
        ];
        let (once, _) = qc_filter(all, &QcThresholds::default());
        let (twice, report) = qc_filter(once.clone(), &QcThresholds::default());
        assert_eq!(once, twice);
        assert!(report.rejections.is_empty());
    }

    fn two_series(values_a: &[Option<f64>], values_b: &[Option<f64>]) -> Vec<RawDetectorSeries> {
        let mk = |id: &str, vals: &[Option<f64>]| RawDetectorSeries {
            detector_id: id.into(),
            lane_count: 3,
            records: vals
                .iter()
                .enumerate()
                .map(|(i, v)| HourRecord {
                    timestamp: ts(1, 0) + Duration::hours(i as i64),
                    volume: *v,
                    speed: Some(50.0 + i as f64 % 7.0),
                    occupancy: Some(0.2),
                })
                .collect(),
        };
        vec![mk("D0", values_a), mk("D1", values_b)]
    }

    #[test]
    fn impute_identity_without_gaps() {
        let a: Vec<Option<f64>> = (0..24).map(|i| Some(300.0 + i as f64)).collect();
        let b: Vec<Option<f64>> = (0..24).map(|i| Some(100.0 + 2.0 * i as f64)).collect();
        let raw = two_series(&a, &b);
        let (out, report) = impute(&raw, &chain(2, 1.0), &ImputeConfig::default()).unwrap();
        for (o, r) in out.iter().zip(&raw) {
            let vols: Vec<f64> = r.records.iter().map(|x| x.volume.unwrap()).collect();
            assert_eq!(o.volume, vols);
        }
        assert!(report.filled.values().all(|&n| n == 0));
    }

    #[test]
    fn impute_recovers_linear_relation() {
        let x: Vec<f64> = (0..24).map(|i| 500.0 + 300.0 * (i as f64 * 0.4).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 40.0 + 1.5 * v).collect();
        let mut a: Vec<Option<f64>> = y.iter().copied().map(Some).collect();
        a[10] = None;
        let b: Vec<Option<f64>> = x.iter().copied().map(Some).collect();
        let (out, _) = impute(&two_series(&a, &b), &chain(2, 1.0), &ImputeConfig::default()).unwrap();
        assert!((out[0].volume[10] - y[10]).abs() < 1e-6, "{} vs {}", out[0].volume[10], y[10]);
    }

    #[test]
    fn impute_sinusoids_within_fifth_of_std() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 240;
        let truth_a: Vec<f64> = (0..n).map(|i| 1000.0 + 400.0 * (i as f64 * std::f64::consts::TAU / 24.0).sin()).collect();
        let truth_b: Vec<f64> = (0..n)
            .map(|i| 800.0 + 350.0 * (i as f64 * std::f64::consts::TAU / 24.0 + 0.1).sin())
            .collect();
        let mut a: Vec<Option<f64>> = truth_a.iter().copied().map(Some).collect();
        let mut b: Vec<Option<f64>> = truth_b.iter().copied().map(Some).collect();
        let mut masked = Vec::new();
        for i in 0..n {
            if rng.gen_bool(0.1) {
                if rng.gen_bool(0.5) {
                    a[i] = None;
                    masked.push((0, i));
                } else {
                    b[i] = None;
                    masked.push((1, i));
                }
            }
        }
        let (out, _) = impute(&two_series(&a, &b), &chain(2, 1.0), &ImputeConfig::default()).unwrap();
        let truth = [&truth_a, &truth_b];
        let mse: f64 = masked
            .iter()
            .map(|&(d, i)| (out[d].volume[i] - truth[d][i]).powi(2))
            .sum::<f64>()
            / masked.len() as f64;
        let (_, std_a) = mean_std(&truth_a);
        assert!(mse.sqrt() < 0.2 * std_a, "rmse {} std {std_a}", mse.sqrt());
    }

    #[test]
    fn impute_never_touches_observed_and_respects_bounds() {
        let a: Vec<Option<f64>> = (0..48).map(|i| if i % 5 == 0 { None } else { Some(7000.0 + i as f64) }).collect();
        let b: Vec<Option<f64>> = (0..48).map(|i| if i % 7 == 0 { None } else { Some(10.0 * i as f64) }).collect();
        let raw = two_series(&a, &b);
        let (out, _) = impute(&raw, &chain(2, 1.0), &ImputeConfig::default()).unwrap();
        for (o, r) in out.iter().zip(&raw) {
            for (i, rec) in r.records.iter().enumerate() {
                if let Some(v) = rec.volume {
                    assert_eq!(o.volume[i], v);
                }
                assert!((0.0..=7500.0).contains(&o.volume[i]));
            }
        }
    }

    #[test]
    fn impute_falls_back_when_hour_missing_everywhere() {
        let mut a: Vec<Option<f64>> = (0..48).map(|i| Some(100.0 + (i % 24) as f64)).collect();
        let mut b = a.clone();
        a[30] = None;
        b[30] = None;
        let (out, report) = impute(&two_series(&a, &b), &chain(2, 1.0), &ImputeConfig::default()).unwrap();
        assert_eq!(report.fallback_hours, vec![ts(2, 6)]);
        // hour 6 observed once, on day one, with value 106
        assert_eq!(out[0].volume[30], 106.0);
    }

    #[test]
    fn time_periods_are_half_open() {
        assert_eq!(TimePeriod::from_hour(3), Some(TimePeriod::EarlyMorning));
        assert_eq!(TimePeriod::from_hour(6), Some(TimePeriod::EarlyMorning));
        assert_eq!(TimePeriod::from_hour(7), Some(TimePeriod::Morning));
        assert_eq!(TimePeriod::from_hour(11), Some(TimePeriod::MidDay));
        assert_eq!(TimePeriod::from_hour(18), Some(TimePeriod::Evening));
        assert_eq!(TimePeriod::from_hour(19), None);
        assert_eq!(TimePeriod::from_hour(2), None);
    }

    #[test]
    fn weekend_flag() {
        // 2022-09-24 was a Saturday
        assert!(is_weekend(ts(24, 12)));
        assert!(is_weekend(ts(25, 12)));
        assert!(!is_weekend(ts(26, 12)));
    }

    fn constant_series(days: i64, value: f64) -> DetectorSeries {
        let timestamps: Vec<NaiveDateTime> = (0..24 * days).map(|h| ts(1, 0) + Duration::hours(h)).collect();
        let n = timestamps.len();
        DetectorSeries {
            detector_id: "D0".into(),
            lane_count: 2,
            timestamps,
            volume: vec![value; n],
            speed: vec![60.0; n],
            occupancy: vec![0.1; n],
        }
    }

    #[test]
    fn constant_flow_features() {
        let frame = engineer_features(&[constant_series(3, 500.0)]).unwrap();
        assert_eq!(frame.rows.len(), 3 * 16);
        for r in &frame.rows {
            assert_eq!(r.prev_day_mean_flow, 500.0);
            assert_eq!(r.prev_day_std_flow, 0.0);
            assert_eq!(r.prev_period_mean_flow, 500.0);
            assert_eq!(r.mean_speed, 60.0);
        }
        assert!(frame.rows[..16].iter().all(|r| r.fallback));
        assert!(frame.rows[16..].iter().all(|r| !r.fallback));
    }

    #[test]
    fn feature_statistics_match_welford() {
        let mut s = constant_series(4, 0.0);
        for (i, v) in s.volume.iter_mut().enumerate() {
            *v = 600.0 + 250.0 * ((i as f64) * 0.7).sin() + (i % 5) as f64 * 13.0;
        }
        let frame = engineer_features(std::slice::from_ref(&s)).unwrap();
        let welford = |vals: &mut dyn Iterator<Item = f64>| {
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for x in vals {
                n += 1.0;
                let d = x - mean;
                mean += d / n;
                m2 += d * (x - mean);
            }
            (mean, (m2 / n).sqrt())
        };
        for r in frame.rows.iter().filter(|r| !r.fallback) {
            let prev = r.timestamp.date().pred_opt().unwrap();
            let (m, sd) = welford(&mut s.timestamps.iter().zip(&s.volume).filter(|(t, _)| t.date() == prev).map(|(_, v)| *v));
            assert!((m - r.prev_day_mean_flow).abs() < 1e-9);
            assert!((sd - r.prev_day_std_flow).abs() < 1e-9);
            let start = r.timestamp.date().and_hms_opt(r.time_period.start_hour(), 0, 0).unwrap();
            let (m, sd) = welford(
                &mut s
                    .timestamps
                    .iter()
                    .zip(&s.volume)
                    .filter(|(t, _)| **t >= start - Duration::hours(4) && **t < start)
                    .map(|(_, v)| *v),
            );
            assert!((m - r.prev_period_mean_flow).abs() < 1e-9);
            assert!((sd - r.prev_period_std_flow).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = chain(2, 1.0);
        let mut a: Vec<Option<f64>> = (0..30).map(|i| Some(100.0 + i as f64)).collect();
        a[4] = None;
        let raw = two_series(&a, &a.clone());
        let p = dir.path().join("d.csv");
        write_detector_csv(&raw, &p).unwrap();
        assert_eq!(read_detector_csv(&p, &g).unwrap(), raw);

        let frame = engineer_features(&[constant_series(2, 42.0)]).unwrap();
        let fp = dir.path().join("f.csv");
        write_feature_csv(&frame, &fp).unwrap();
        assert_eq!(read_feature_csv(&fp).unwrap(), frame);
    }

    #[test]
    fn unknown_detector_in_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "detector_id,timestamp,volume,speed,occupancy\nZZ,2022-09-01T00:00:00,1,2,0.1\n").unwrap();
        let err = read_detector_csv(&p, &chain(2, 1.0)).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
