//! Crisis movement records to per-detector hourly inflow and outflow.
//!
//! Movement data arrives as tile-to-tile person counts over two daily
//! 8-hour windows (3 am to 11 am, 11 am to 7 pm). The pipeline aggregates
//! tiles to subdivisions, drops intra-subdivision trips, snaps each
//! subdivision to its nearest detector, sums inflow/outflow per detector,
//! and spreads each window over its hours in proportion to network-wide
//! detector traffic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::detector::{format_timestamp, parse_timestamp, DetectorSeries};
use crate::error::{Error, Result};
use crate::graph::{haversine_miles, with_path, RoadGraph};

pub const WINDOW_HOURS: usize = 8;
/// Local start hours of the two daily movement windows.
pub const WINDOW_START_HOURS: [u32; 2] = [3, 11];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MovementWindow {
    pub start: NaiveDateTime,
}

impl MovementWindow {
    pub fn new(start: NaiveDateTime, end: NaiveDateTime) -> Result<Self> {
        if end - start != Duration::hours(WINDOW_HOURS as i64) {
            return Err(Error::Validation(format!("movement window {start} .. {end} is not 8 hours")));
        }
        if !WINDOW_START_HOURS.contains(&start.hour()) || start.minute() != 0 || start.second() != 0 {
            return Err(Error::Validation(format!(
                "movement window must start at 03:00 or 11:00, got {start}"
            )));
        }
        Ok(MovementWindow { start })
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + Duration::hours(WINDOW_HOURS as i64)
    }

    pub fn hours(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..WINDOW_HOURS as i64).map(move |h| self.start + Duration::hours(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileMovement {
    pub origin_tile: String,
    pub destination_tile: String,
    pub window: MovementWindow,
    pub crisis_count: f64,
    pub baseline_count: f64,
}

/// Which count of a [`TileMovement`] to carry through the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountField {
    #[default]
    Crisis,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubdivisionOd {
    pub origin: String,
    pub destination: String,
    pub window: MovementWindow,
    pub count: f64,
}

/// Sums counts by `(origin subdivision, destination subdivision, window)`.
/// Output is sorted by window, then origin, then destination.
pub fn aggregate_to_subdivision(
    movements: &[TileMovement],
    tile_map: &HashMap<String, String>,
    field: CountField,
) -> Result<Vec<SubdivisionOd>> {
    let mut sums: BTreeMap<(MovementWindow, &str, &str), f64> = BTreeMap::new();
    for m in movements {
        let lookup = |tile: &str| {
            tile_map
                .get(tile)
                .map(String::as_str)
                .ok_or_else(|| Error::Validation(format!("tile `{tile}` has no subdivision")))
        };
        let count = match field {
            CountField::Crisis => m.crisis_count,
            CountField::Baseline => m.baseline_count,
        };
        if !(count >= 0.0) {
            return Err(Error::Validation(format!(
                "negative count {count} for {} -> {}",
                m.origin_tile, m.destination_tile
            )));
        }
        *sums
            .entry((m.window, lookup(&m.origin_tile)?, lookup(&m.destination_tile)?))
            .or_default() += count;
    }
    Ok(sums
        .into_iter()
        .map(|((window, o, d), count)| SubdivisionOd {
            origin: o.to_string(),
            destination: d.to_string(),
            window,
            count,
        })
        .collect())
}

/// Drops trips that start and end in the same subdivision.
pub fn filter_intra(od: Vec<SubdivisionOd>) -> Vec<SubdivisionOd> {
    od.into_iter().filter(|r| r.origin != r.destination).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOd {
    pub origin: usize,
    pub destination: usize,
    pub window: MovementWindow,
    pub count: f64,
}

/// Index of the detector closest (great-circle) to a point; ties go to the
/// lower index.
pub fn nearest_detector(graph: &RoadGraph, latitude: f64, longitude: f64) -> Option<usize> {
    graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| (i, haversine_miles(latitude, longitude, n.latitude, n.longitude)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Snaps each record's subdivisions to their nearest detectors and drops
/// records whose origin and destination share a detector.
pub fn assign_detectors(
    od: &[SubdivisionOd],
    centroids: &HashMap<String, (f64, f64)>,
    graph: &RoadGraph,
) -> Result<Vec<DetectorOd>> {
    if graph.node_count() == 0 {
        return Err(Error::Validation("cannot assign movements: no detectors".into()));
    }
    let mut cache: HashMap<String, usize> = HashMap::new();
    let mut snap = |sub: &str| -> Result<usize> {
        if let Some(&i) = cache.get(sub) {
            return Ok(i);
        }
        let &(lat, lon) = centroids
            .get(sub)
            .ok_or_else(|| Error::Validation(format!("subdivision `{sub}` has no centroid")))?;
        let i = nearest_detector(graph, lat, lon).expect("non-empty graph");
        cache.insert(sub.to_string(), i);
        Ok(i)
    };
    let mut out = Vec::new();
    for r in od {
        let (o, d) = (snap(&r.origin)?, snap(&r.destination)?);
        if o != d {
            out.push(DetectorOd {
                origin: o,
                destination: d,
                window: r.window,
                count: r.count,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMovement {
    pub detector_id: String,
    pub window_start: NaiveDateTime,
    pub window_end: NaiveDateTime,
    pub inflow: f64,
    pub outflow: f64,
}

/// Inflow and outflow per detector and window, for every detector of the
/// graph and every window that appears in `od`. Sorted by
/// `(detector_id, window_start)`.
pub fn accumulate_flows(od: &[DetectorOd], graph: &RoadGraph) -> Vec<DetectorMovement> {
    let mut windows: Vec<MovementWindow> = od.iter().map(|r| r.window).collect();
    windows.sort();
    windows.dedup();
    let mut acc: HashMap<(usize, MovementWindow), (f64, f64)> = HashMap::new();
    for r in od {
        acc.entry((r.destination, r.window)).or_default().0 += r.count;
        acc.entry((r.origin, r.window)).or_default().1 += r.count;
    }
    let mut out = Vec::with_capacity(windows.len() * graph.node_count());
    for (i, node) in graph.nodes().iter().enumerate() {
        for w in &windows {
            let (inflow, outflow) = acc.get(&(i, *w)).copied().unwrap_or_default();
            out.push(DetectorMovement {
                detector_id: node.detector_id.clone(),
                window_start: w.start,
                window_end: w.end(),
                inflow,
                outflow,
            });
        }
    }
    out.sort_by(|a, b| a.detector_id.cmp(&b.detector_id).then(a.window_start.cmp(&b.window_start)));
    out
}

/// Share of an 8-hour window's network traffic in each hour.
pub fn hourly_factor(network_totals: &[f64]) -> Result<[f64; WINDOW_HOURS]> {
    if network_totals.len() != WINDOW_HOURS {
        return Err(Error::shape(
            "hourly_factor",
            format!("expected {WINDOW_HOURS} hourly totals, got {}", network_totals.len()),
        ));
    }
    if network_totals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation("hourly totals must be finite and non-negative".into()));
    }
    let total: f64 = network_totals.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("hourly factors undefined for a window with no traffic".into()));
    }
    let mut out = [0.0; WINDOW_HOURS];
    for (o, v) in out.iter_mut().zip(network_totals) {
        *o = v / total;
    }
    Ok(out)
}

/// Total detector volume in each hour of `window`; hours absent from the
/// series contribute zero.
pub fn network_hourly_totals(series: &[DetectorSeries], window: MovementWindow) -> [f64; WINDOW_HOURS] {
    let mut out = [0.0; WINDOW_HOURS];
    for s in series {
        let Some(first) = s.timestamps.iter().position(|&t| t >= window.start) else { continue };
        for (t, v) in s.timestamps[first..].iter().zip(&s.volume[first..]) {
            let offset = (*t - window.start).num_hours();
            if offset >= WINDOW_HOURS as i64 {
                break;
            }
            out[offset as usize] += v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourlyMovement {
    pub detector_id: String,
    pub timestamp: NaiveDateTime,
    pub inflow: f64,
    pub outflow: f64,
}

/// Splits one window's inflow/outflow over its hours. Fractional counts are
/// kept.
pub fn disaggregate(movement: &DetectorMovement, factors: &[f64]) -> Result<Vec<HourlyMovement>> {
    if factors.len() != WINDOW_HOURS {
        return Err(Error::shape(
            "disaggregate",
            format!("expected {WINDOW_HOURS} factors, got {}", factors.len()),
        ));
    }
    Ok(factors
        .iter()
        .enumerate()
        .map(|(h, f)| HourlyMovement {
            detector_id: movement.detector_id.clone(),
            timestamp: movement.window_start + Duration::hours(h as i64),
            inflow: movement.inflow * f,
            outflow: movement.outflow * f,
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovementReport {
    pub input_records: usize,
    pub input_total: f64,
    pub subdivision_total: f64,
    pub intra_removed: usize,
    pub same_detector_removed: usize,
    pub windows: usize,
}

/// Runs the full movement pipeline, returning hourly per-detector movement
/// sorted by `(detector_id, timestamp)`.
pub fn process_movements(
    movements: &[TileMovement],
    tile_map: &HashMap<String, String>,
    centroids: &HashMap<String, (f64, f64)>,
    graph: &RoadGraph,
    traffic: &[DetectorSeries],
    field: CountField,
) -> Result<(Vec<HourlyMovement>, MovementReport)> {
    let mut report = MovementReport {
        input_records: movements.len(),
        input_total: movements
            .iter()
            .map(|m| match field {
                CountField::Crisis => m.crisis_count,
                CountField::Baseline => m.baseline_count,
            })
            .sum(),
        ..MovementReport::default()
    };
    let od = aggregate_to_subdivision(movements, tile_map, field)?;
    report.subdivision_total = od.iter().map(|r| r.count).sum();
    let before = od.len();
    let od = filter_intra(od);
    report.intra_removed = before - od.len();
    let det = assign_detectors(&od, centroids, graph)?;
    report.same_detector_removed = od.len() - det.len();
    let windows = accumulate_flows(&det, graph);

    let mut factors: HashMap<NaiveDateTime, [f64; WINDOW_HOURS]> = HashMap::new();
    let mut hourly = Vec::with_capacity(windows.len() * WINDOW_HOURS);
    for m in &windows {
        let f = match factors.get(&m.window_start) {
            Some(f) => *f,
            None => {
                let w = MovementWindow { start: m.window_start };
                let f = hourly_factor(&network_hourly_totals(traffic, w)).map_err(|e| {
                    Error::Validation(format!("window starting {}: {e}", m.window_start))
                })?;
                factors.insert(m.window_start, f);
                f
            }
        };
        hourly.extend(disaggregate(m, &f)?);
    }
    report.windows = factors.len();
    hourly.sort_by(|a, b| a.detector_id.cmp(&b.detector_id).then(a.timestamp.cmp(&b.timestamp)));
    Ok((hourly, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub inflow: f64,
    pub outflow: f64,
    /// True when the cell had no observations and was filled from the same
    /// hour averaged over all days.
    pub filled: bool,
}

/// Mean inflow/outflow per detector by (day of week, hour).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineMovement {
    cells: BTreeMap<(String, u32, u32), BaselineCell>,
}

impl BaselineMovement {
    /// `weekday` counts from Monday = 0.
    pub fn get(&self, detector_id: &str, weekday: u32, hour: u32) -> Option<&BaselineCell> {
        self.cells.get(&(detector_id.to_string(), weekday, hour))
    }

    pub fn at(&self, detector_id: &str, t: NaiveDateTime) -> Option<&BaselineCell> {
        self.get(detector_id, t.weekday().num_days_from_monday(), t.hour())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, u32, u32), &BaselineCell)> {
        self.cells.iter()
    }
}

/// Builds the day-of-week by hour baseline from regular-period hourly
/// movement. Every (detector, weekday, hour) cell is produced for each
/// detector and hour seen; empty cells take the detector's mean for that
/// hour over all days and are flagged.
pub fn baseline_movement(hourly: &[HourlyMovement]) -> Result<BaselineMovement> {
    let mut cell_sums: BTreeMap<(String, u32, u32), (f64, f64, usize)> = BTreeMap::new();
    let mut hour_sums: BTreeMap<(String, u32), (f64, f64, usize)> = BTreeMap::new();
    for m in hourly {
        let (wd, h) = (m.timestamp.weekday().num_days_from_monday(), m.timestamp.hour());
        let c = cell_sums.entry((m.detector_id.clone(), wd, h)).or_default();
        c.0 += m.inflow;
        c.1 += m.outflow;
        c.2 += 1;
        let c = hour_sums.entry((m.detector_id.clone(), h)).or_default();
        c.0 += m.inflow;
        c.1 += m.outflow;
        c.2 += 1;
    }
    let mut cells = BTreeMap::new();
    for ((detector, hour), (hin, hout, hn)) in &hour_sums {
        for wd in 0..7 {
            let key = (detector.clone(), wd, *hour);
            let cell = match cell_sums.get(&key) {
                Some(&(i, o, n)) => BaselineCell {
                    inflow: i / n as f64,
                    outflow: o / n as f64,
                    filled: false,
                },
                None => BaselineCell {
                    inflow: hin / *hn as f64,
                    outflow: hout / *hn as f64,
                    filled: true,
                },
            };
            cells.insert(key, cell);
        }
    }
    Ok(BaselineMovement { cells })
}

// ---- CSV interfaces -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MovementRow {
    origin_tile: String,
    destination_tile: String,
    window_start: String,
    window_end: String,
    crisis_count: f64,
    baseline_count: f64,
}

pub fn read_movement_csv(path: &Path) -> Result<Vec<TileMovement>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<MovementRow>().enumerate() {
        let r = row.map_err(|e| with_path(e, path))?;
        let at = |e: Error| Error::Validation(format!("{}:{}: {e}", path.display(), line + 2));
        let window = MovementWindow::new(
            parse_timestamp(&r.window_start).map_err(at)?,
            parse_timestamp(&r.window_end).map_err(at)?,
        )
        .map_err(at)?;
        if !(r.crisis_count >= 0.0) || !(r.baseline_count >= 0.0) {
            return Err(at(Error::Validation("counts must be non-negative".into())));
        }
        out.push(TileMovement {
            origin_tile: r.origin_tile,
            destination_tile: r.destination_tile,
            window,
            crisis_count: r.crisis_count,
            baseline_count: r.baseline_count,
        });
    }
    Ok(out)
}

pub fn write_movement_csv(movements: &[TileMovement], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for m in movements {
        w.serialize(MovementRow {
            origin_tile: m.origin_tile.clone(),
            destination_tile: m.destination_tile.clone(),
            window_start: format_timestamp(m.window.start),
            window_end: format_timestamp(m.window.end()),
            crisis_count: m.crisis_count,
            baseline_count: m.baseline_count,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tile_map_csv(path: &Path) -> Result<HashMap<String, String>> {
    #[derive(Deserialize)]
    struct Row {
        tile_id: String,
        subdivision_id: String,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut out = HashMap::new();
    for row in reader.deserialize::<Row>() {
        let r = row.map_err(|e| with_path(e, path))?;
        out.insert(r.tile_id, r.subdivision_id);
    }
    Ok(out)
}

pub fn write_tile_map_csv(map: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    w.write_record(["tile_id", "subdivision_id"])?;
    for (t, s) in map {
        w.write_record([t, s])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_centroid_csv(path: &Path) -> Result<HashMap<String, (f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        subdivision_id: String,
        latitude: f64,
        longitude: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut out = HashMap::new();
    for row in reader.deserialize::<Row>() {
        let r = row.map_err(|e| with_path(e, path))?;
        out.insert(r.subdivision_id, (r.latitude, r.longitude));
    }
    Ok(out)
}

pub fn write_centroid_csv(centroids: &BTreeMap<String, (f64, f64)>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    w.write_record(["subdivision_id", "latitude", "longitude"])?;
    for (s, (lat, lon)) in centroids {
        w.write_record([s.clone(), lat.to_string(), lon.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct HourlyRow {
    detector_id: String,
    timestamp: String,
    inflow: f64,
    outflow: f64,
}

pub fn write_hourly_movement_csv(rows: &[HourlyMovement], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for r in rows {
        w.serialize(HourlyRow {
            detector_id: r.detector_id.clone(),
            timestamp: format_timestamp(r.timestamp),
            inflow: r.inflow,
            outflow: r.outflow,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hourly_movement_csv(path: &Path) -> Result<Vec<HourlyMovement>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| with_path(e, path))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<HourlyRow>() {
        let r = row.map_err(|e| with_path(e, path))?;
        out.push(HourlyMovement {
            detector_id: r.detector_id,
            timestamp: parse_timestamp(&r.timestamp)?,
            inflow: r.inflow,
            outflow: r.outflow,
        });
    }
    Ok(out)
}
