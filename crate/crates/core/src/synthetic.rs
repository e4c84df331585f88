//! Synthetic corridors, traffic, evacuation surges and movement data.
//!
//! The scenario timeline is `regular_days` of regular traffic, one lead day
//! (unsurged, kept so evacuation features have a previous day), then
//! `evacuation_days` during which affected corridors carry the surge.
//!
//! Regular flow at a detector with base flow `b` is
//!
//! ```text
//! b + w * (A * exp(-(h - h_am)^2 / (2 s_am^2)) + P * exp(-(h - h_pm)^2 / (2 s_pm^2))) + noise
//! ```
//!
//! with `w = 1` on weekdays and the weekend factor on weekends, capped at
//! 2500 vehicles per hour per lane. Speed follows
//! `70 * (1 - 0.7 * (flow / capacity)^2)` with capacity 2000 per lane,
//! floored at 10 mph.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{to_complete, DAY_START_HOUR, write_detector_csv, HourRecord, RawDetectorSeries};
use crate::error::{Error, Result};
use crate::graph::{write_edges_csv, write_graph_csv, DetectorNode, Direction, RoadGraph};
use crate::movement::{
    process_movements, write_centroid_csv, write_movement_csv, write_tile_map_csv, CountField, MovementWindow, TileMovement,
    WINDOW_HOURS, WINDOW_START_HOURS,
};
use crate::transfer::{evac_feature_frame, write_evac_csv, EvacFeatureFrame, EvacuationOrder, EvacuationSchedule};

pub const SEGMENT_MILES: f64 = 2.0;
pub const FREE_FLOW_MPH: f64 = 70.0;
pub const CAPACITY_PER_LANE: f64 = 2000.0;
pub const MAX_FLOW_PER_LANE: f64 = 2500.0;
pub const MIN_SPEED_MPH: f64 = 10.0;

const EARTH_RADIUS_MILES: f64 = 3958.8;
const ORIGIN: (f64, f64) = (27.0, -82.4);
const CORRIDOR_SPACING_DEG: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    Step,
    Linear,
    /// Smoothstep over the ramp duration.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DailyProfile {
    /// Base flows are drawn uniformly from `[base_flow_min, base_flow_max]`.
    pub base_flow_min: f64,
    pub base_flow_max: f64,
    pub am_peak: f64,
    pub am_peak_hour: f64,
    pub am_peak_width: f64,
    pub pm_peak: f64,
    pub pm_peak_hour: f64,
    pub pm_peak_width: f64,
    pub weekend_peak_factor: f64,
    pub noise_std: f64,
}

impl Default for DailyProfile {
    fn default() -> Self {
        DailyProfile {
            base_flow_min: 800.0,
            base_flow_max: 1800.0,
            am_peak: 1400.0,
            am_peak_hour: 8.0,
            am_peak_width: 1.5,
            pm_peak: 1800.0,
            pm_peak_hour: 17.0,
            pm_peak_width: 2.0,
            weekend_peak_factor: 0.4,
            noise_std: 120.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurgeConfig {
    /// Hours after the start of the first evacuation day.
    pub start_hour: f64,
    pub ramp: RampShape,
    pub ramp_hours: f64,
    /// Full-surge flow multiplier.
    pub magnitude: f64,
    pub affected_corridors: Vec<usize>,
    /// Each affected corridor's surge excess is scaled by a factor drawn
    /// from `[1 - jitter, 1 + jitter]`, redrawn for every 8-hour block
    /// (03:00, 11:00, 19:00 starts, matching the movement windows).
    pub jitter: f64,
}

impl Default for SurgeConfig {
    fn default() -> Self {
        SurgeConfig {
            start_hour: 6.0,
            ramp: RampShape::Linear,
            ramp_hours: 12.0,
            magnitude: 2.0,
            affected_corridors: vec![0, 1],
            jitter: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovementConfig {
    /// Movement count per vehicle of surge excess (the coupling constant).
    pub coupling: f64,
    /// Count per window on every segment without a surge.
    pub background: f64,
    pub noise_std: f64,
    /// A window's count reflects the surge this many hours later at the
    /// downstream detector: people move before their trips reach it.
    pub lead_hours: u32,
    pub tiles_per_subdivision: usize,
}

impl Default for MovementConfig {
    fn default() -> Self {
        MovementConfig {
            coupling: 0.05,
            background: 200.0,
            noise_std: 20.0,
            lead_hours: 8,
            tiles_per_subdivision: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSpec {
    /// Hours after the start of the first evacuation day; negative values
    /// fall on the lead day.
    pub offset_hours: f64,
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub corridor_count: usize,
    pub nodes_per_corridor: usize,
    pub lanes: u32,
    pub start_date: NaiveDate,
    pub regular_days: usize,
    pub evacuation_days: usize,
    pub profile: DailyProfile,
    pub surge: SurgeConfig,
    pub movement: MovementConfig,
    /// Hours after the start of the first evacuation day.
    pub landfall_offset_hours: f64,
    pub orders: Vec<OrderSpec>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            corridor_count: 3,
            nodes_per_corridor: 10,
            lanes: 3,
            start_date: NaiveDate::from_ymd_opt(2022, 5, 2).unwrap(),
            regular_days: 90,
            evacuation_days: 8,
            profile: DailyProfile::default(),
            surge: SurgeConfig::default(),
            movement: MovementConfig::default(),
            landfall_offset_hours: 8.0 * 24.0 - 6.0,
            orders: vec![
                OrderSpec { offset_hours: 0.0, population: 50_000.0 },
                OrderSpec { offset_hours: 24.0, population: 120_000.0 },
                OrderSpec { offset_hours: 48.0, population: 200_000.0 },
            ],
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn node_count(&self) -> usize {
        self.corridor_count * self.nodes_per_corridor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.node_count() < 2 {
            return bad(format!("scenario needs at least 2 detectors, got {}", self.node_count()));
        }
        if self.lanes == 0 {
            return bad("lanes must be at least 1".into());
        }
        if self.regular_days == 0 {
            return bad("regular_days must be at least 1".into());
        }
        let p = &self.profile;
        if !(p.base_flow_min > 0.0 && p.base_flow_max >= p.base_flow_min) {
            return bad("base flows must be positive with min <= max".into());
        }
        let non_negative = [p.am_peak, p.pm_peak, p.weekend_peak_factor, p.noise_std];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("peak amplitudes, weekend factor and noise must be non-negative".into());
        }
        if !(p.am_peak_width > 0.0 && p.pm_peak_width > 0.0) {
            return bad("peak widths must be positive".into());
        }
        let s = &self.surge;
        if !(s.magnitude > 0.0) {
            return bad("surge magnitude must be positive".into());
        }
        if !(0.0..1.0).contains(&s.jitter) {
            return bad("jitter must lie in [0, 1)".into());
        }
        if s.ramp != RampShape::Step && !(s.ramp_hours > 0.0) {
            return bad("ramp_hours must be positive".into());
        }
        if let Some(c) = s.affected_corridors.iter().find(|&&c| c >= self.corridor_count) {
            return bad(format!("affected corridor {c} does not exist"));
        }
        let m = &self.movement;
        if !(m.coupling >= 0.0 && m.background >= 0.0 && m.noise_std >= 0.0) {
            return bad("movement coupling, background and noise must be non-negative".into());
        }
        if m.tiles_per_subdivision == 0 {
            return bad("tiles_per_subdivision must be at least 1".into());
        }
        let horizon = -24.0..=self.evacuation_days as f64 * 24.0;
        if !horizon.contains(&s.start_hour) {
            return bad(format!("surge start hour {} is outside the evacuation period", s.start_hour));
        }
        if !horizon.contains(&self.landfall_offset_hours) {
            return bad("landfall is outside the scenario horizon".into());
        }
        for o in &self.orders {
            if !horizon.contains(&o.offset_hours) {
                return bad(format!("order at offset {} h is outside the scenario horizon", o.offset_hours));
            }
            if !(o.population >= 0.0) {
                return bad("order populations must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn regular_start(&self) -> NaiveDateTime {
        self.start_date.and_hms_opt(0, 0, 0).unwrap()
    }

    /// First hour of the lead day.
    pub fn lead_start(&self) -> NaiveDateTime {
        self.regular_start() + Duration::days(self.regular_days as i64)
    }

    /// First hour of the first evacuation day.
    pub fn evacuation_start(&self) -> NaiveDateTime {
        self.lead_start() + Duration::days(1)
    }

    pub fn evacuation_end(&self) -> NaiveDateTime {
        self.evacuation_start() + Duration::days(self.evacuation_days as i64)
    }

    pub fn landfall(&self) -> NaiveDateTime {
        offset(self.evacuation_start(), self.landfall_offset_hours)
    }

    pub fn schedule(&self, graph: &RoadGraph) -> EvacuationSchedule {
        let mut corridors = self.surge.affected_corridors.clone();
        if corridors.is_empty() {
            corridors.push(0);
        }
        let zones = corridors
            .iter()
            .map(|&c| {
                let first = &graph.nodes()[c * self.nodes_per_corridor];
                (first.latitude - 0.05, first.longitude)
            })
            .collect();
        EvacuationSchedule {
            landfall: self.landfall(),
            zones,
            orders: self
                .orders
                .iter()
                .map(|o| EvacuationOrder { time: offset(self.evacuation_start(), o.offset_hours), population: o.population })
                .collect(),
        }
    }

    /// Noise-free regular flow for a detector with base flow `base`.
    pub fn expected_flow(&self, base: f64, t: NaiveDateTime) -> f64 {
        let p = &self.profile;
        let h = t.hour() as f64;
        let bump = |amp: f64, centre: f64, width: f64| amp * (-(h - centre).powi(2) / (2.0 * width * width)).exp();
        let weekend = matches!(t.weekday().num_days_from_monday(), 5 | 6);
        let w = if weekend { p.weekend_peak_factor } else { 1.0 };
        let flow = base + w * (bump(p.am_peak, p.am_peak_hour, p.am_peak_width) + bump(p.pm_peak, p.pm_peak_hour, p.pm_peak_width));
        flow.min(MAX_FLOW_PER_LANE * self.lanes as f64)
    }

    /// Ramp progress in `[0, 1]` at `t`.
    pub fn ramp(&self, t: NaiveDateTime) -> f64 {
        let s = &self.surge;
        let tau = (t - self.evacuation_start()).num_minutes() as f64 / 60.0 - s.start_hour;
        if tau < 0.0 {
            return 0.0;
        }
        let x = if s.ramp_hours > 0.0 { (tau / s.ramp_hours).min(1.0) } else { 1.0 };
        match s.ramp {
            RampShape::Step => 1.0,
            RampShape::Linear => x,
            RampShape::Smooth => x * x * (3.0 - 2.0 * x),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn offset(t: NaiveDateTime, hours: f64) -> NaiveDateTime {
    t + Duration::seconds((hours * 3600.0).round() as i64)
}

/// Speed from the speed-flow curve.
pub fn speed_for_flow(flow: f64, lanes: u32) -> f64 {
    let x = flow / (CAPACITY_PER_LANE * lanes as f64);
    (FREE_FLOW_MPH * (1.0 - 0.7 * x * x)).max(MIN_SPEED_MPH)
}

/// Occupancy in percent from density, with jam density 180 vehicles per
/// mile per lane.
fn occupancy_for(flow: f64, speed: f64, lanes: u32) -> f64 {
    (100.0 * flow / (speed * lanes as f64) / 180.0).min(100.0)
}

fn record(t: NaiveDateTime, flow: f64, lanes: u32) -> HourRecord {
    let speed = speed_for_flow(flow, lanes);
    HourRecord {
        timestamp: t,
        volume: Some(flow),
        speed: Some(speed),
        occupancy: Some(occupancy_for(flow, speed, lanes)),
    }
}

/// Northbound linear corridors, consecutive detectors 2 miles apart.
pub fn generate_network(config: &ScenarioConfig) -> Result<RoadGraph> {
    config.validate()?;
    let deg_per_mile = 180.0 / (std::f64::consts::PI * EARTH_RADIUS_MILES);
    let mut nodes = Vec::with_capacity(config.node_count());
    for c in 0..config.corridor_count {
        for k in 0..config.nodes_per_corridor {
            let milepost = k as f64 * SEGMENT_MILES;
            nodes.push(DetectorNode {
                detector_id: detector_id(c, k),
                corridor: format!("C{c}"),
                direction: Direction::Northbound,
                milepost_miles: milepost,
                lane_count: config.lanes,
                latitude: ORIGIN.0 + milepost * deg_per_mile,
                longitude: ORIGIN.1 + c as f64 * CORRIDOR_SPACING_DEG,
            });
        }
    }
    RoadGraph::infer(nodes)
}

fn detector_id(corridor: usize, k: usize) -> String {
    format!("C{corridor}-{k:02}")
}

/// Per-detector base flows, in graph order.
pub fn base_flows(graph: &RoadGraph, config: &ScenarioConfig) -> Vec<f64> {
    let mut rng = config.rng(0);
    let p = &config.profile;
    (0..graph.node_count())
        .map(|_| {
            if p.base_flow_max > p.base_flow_min {
                rng.gen_range(p.base_flow_min..p.base_flow_max)
            } else {
                p.base_flow_min
            }
        })
        .collect()
}

fn traffic(graph: &RoadGraph, config: &ScenarioConfig, start: NaiveDateTime, days: usize, stream: u64) -> Result<Vec<RawDetectorSeries>> {
    config.validate()?;
    let bases = base_flows(graph, config);
    let mut rng = config.rng(stream);
    let noise = Normal::new(0.0, config.profile.noise_std).map_err(|e| Error::Validation(e.to_string()))?;
    let hours = days * 24;
    Ok(graph
        .nodes()
        .iter()
        .zip(&bases)
        .map(|(node, &base)| {
            let cap = MAX_FLOW_PER_LANE * node.lane_count as f64;
            let records = (0..hours as i64)
                .map(|h| {
                    let t = start + Duration::hours(h);
                    let flow = (config.expected_flow(base, t) + noise.sample(&mut rng)).clamp(0.0, cap);
                    record(t, flow, node.lane_count)
                })
                .collect();
            RawDetectorSeries {
                detector_id: node.detector_id.clone(),
                lane_count: node.lane_count,
                records,
            }
        })
        .collect())
}

/// Regular-period hourly series for every detector, 24 hours a day.
pub fn generate_regular_traffic(graph: &RoadGraph, config: &ScenarioConfig) -> Result<Vec<RawDetectorSeries>> {
    traffic(graph, config, config.regular_start(), config.regular_days, 1)
}

/// Unsurged traffic over the lead day and the evacuation days; the input
/// to [`inject_evacuation`].
pub fn generate_evacuation_baseline(graph: &RoadGraph, config: &ScenarioConfig) -> Result<Vec<RawDetectorSeries>> {
    traffic(graph, config, config.lead_start(), config.evacuation_days + 1, 2)
}

/// Tile-to-subdivision map and subdivision centroids. Each detector has its
/// own subdivision centred on it.
pub fn movement_geography(graph: &RoadGraph, config: &ScenarioConfig) -> (BTreeMap<String, String>, BTreeMap<String, (f64, f64)>) {
    let mut tiles = BTreeMap::new();
    let mut centroids = BTreeMap::new();
    for node in graph.nodes() {
        let sub = subdivision(&node.detector_id);
        for k in 0..config.movement.tiles_per_subdivision {
            tiles.insert(tile(&node.detector_id, k), sub.clone());
        }
        centroids.insert(sub, (node.latitude, node.longitude));
    }
    (tiles, centroids)
}

fn subdivision(detector: &str) -> String {
    format!("SUB-{detector}")
}

fn tile(detector: &str, k: usize) -> String {
    format!("T-{detector}-{k}")
}

const BLOCK_HOURS: i64 = 8;

/// Index of the 8-hour block holding `t`; block 0 starts at 03:00 of the
/// first evacuation day and earlier hours map to it as well.
fn block(config: &ScenarioConfig, t: NaiveDateTime) -> usize {
    let h = (t - config.evacuation_start()).num_hours() - DAY_START_HOUR as i64;
    h.max(0).div_euclid(BLOCK_HOURS) as usize
}

/// Surge scale per (corridor, block).
fn block_factors(config: &ScenarioConfig) -> Vec<Vec<f64>> {
    let mut rng = config.rng(3);
    let j = config.surge.jitter;
    let blocks = config.evacuation_days * 3 + 1;
    (0..config.corridor_count)
        .map(|_| {
            (0..blocks)
                .map(|_| if j > 0.0 { rng.gen_range(1.0 - j..1.0 + j) } else { 1.0 })
                .collect()
        })
        .collect()
}

/// Flow multiplier for `corridor` at `t`.
pub fn surge_multiplier(config: &ScenarioConfig, factors: &[Vec<f64>], corridor: usize, t: NaiveDateTime) -> f64 {
    if !config.surge.affected_corridors.contains(&corridor) || t < config.evacuation_start() {
        return 1.0;
    }
    let xi = factors[corridor].get(block(config, t)).copied().unwrap_or(1.0);
    1.0 + (config.surge.magnitude - 1.0) * config.ramp(t) * xi
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvacuationData {
    /// Surged series over the lead day and evacuation days.
    pub series: Vec<RawDetectorSeries>,
    pub features: EvacFeatureFrame,
    pub movements: Vec<TileMovement>,
    pub schedule: EvacuationSchedule,
}

/// Applies the surge to `series` (the evacuation-period baseline) and
/// derives movement records and evacuation features.
pub fn inject_evacuation(series: &[RawDetectorSeries], graph: &RoadGraph, config: &ScenarioConfig) -> Result<EvacuationData> {
    config.validate()?;
    let factors = block_factors(config);
    let corridor_of = |id: &str| -> Result<usize> {
        let i = graph
            .index_of(id)
            .ok_or_else(|| Error::Validation(format!("detector `{id}` is not in the scenario graph")))?;
        Ok(i / config.nodes_per_corridor)
    };
    let mut surged = Vec::with_capacity(series.len());
    for s in series {
        let c = corridor_of(&s.detector_id)?;
        let cap = MAX_FLOW_PER_LANE * s.lane_count as f64;
        let records = s
            .records
            .iter()
            .map(|r| {
                let m = surge_multiplier(config, &factors, c, r.timestamp);
                match r.volume {
                    Some(v) if m != 1.0 => record(r.timestamp, (v * m).min(cap), s.lane_count),
                    _ => *r,
                }
            })
            .collect();
        surged.push(RawDetectorSeries {
            detector_id: s.detector_id.clone(),
            lane_count: s.lane_count,
            records,
        });
    }

    let excess = surge_excess(series, &surged);
    let movements = movement_records(graph, config, &excess, config.lead_start(), config.evacuation_days + 1, 5);

    let (tiles, centroids) = movement_geography(graph, config);
    let tile_map: HashMap<String, String> = tiles.into_iter().collect();
    let centroids: HashMap<String, (f64, f64)> = centroids.into_iter().collect();
    let complete = to_complete(&surged)?;
    let (hourly, _) = process_movements(&movements, &tile_map, &centroids, graph, &complete, CountField::Crisis)?;
    let hours: Vec<NaiveDateTime> = (0..(config.evacuation_days as i64 + 1) * 24)
        .map(|h| config.lead_start() + Duration::hours(h))
        .collect();
    let schedule = config.schedule(graph);
    let features = evac_feature_frame(graph, &hours, &schedule, &hourly)?;
    Ok(EvacuationData {
        series: surged,
        features,
        movements,
        schedule,
    })
}

/// Surge excess per detector id and hour.
fn surge_excess(before: &[RawDetectorSeries], after: &[RawDetectorSeries]) -> HashMap<(String, NaiveDateTime), f64> {
    let mut out = HashMap::new();
    for (b, a) in before.iter().zip(after) {
        for (rb, ra) in b.records.iter().zip(&a.records) {
            if let (Some(vb), Some(va)) = (rb.volume, ra.volume) {
                out.insert((b.detector_id.clone(), rb.timestamp), va - vb);
            }
        }
    }
    out
}

/// Movement records for every segment and movement window of `days` days
/// starting at `start`. Each segment moves people from its upstream
/// detector's subdivision to its downstream one; counts are split evenly
/// over tiles. One intra-subdivision record per detector and window is
/// included as well.
fn movement_records(
    graph: &RoadGraph,
    config: &ScenarioConfig,
    excess: &HashMap<(String, NaiveDateTime), f64>,
    start: NaiveDateTime,
    days: usize,
    stream: u64,
) -> Vec<TileMovement> {
    let mc = &config.movement;
    let mut rng = config.rng(stream);
    let noise = Normal::new(0.0, mc.noise_std).expect("validated noise std");
    let tiles = mc.tiles_per_subdivision;
    let mut out = Vec::new();
    for d in 0..days as i64 {
        for &h in &WINDOW_START_HOURS {
            let window = MovementWindow { start: start + Duration::days(d) + Duration::hours(h as i64) };
            for e in graph.edges() {
                let up = &graph.nodes()[e.from].detector_id;
                let down = &graph.nodes()[e.to].detector_id;
                let lead = Duration::hours(mc.lead_hours as i64);
                let surge: f64 = window
                    .hours()
                    .map(|t| excess.get(&(down.clone(), t + lead)).copied().unwrap_or(0.0))
                    .sum();
                let count = (mc.background + mc.coupling * surge + noise.sample(&mut rng)).max(0.0);
                for k in 0..tiles {
                    out.push(TileMovement {
                        origin_tile: tile(up, k),
                        destination_tile: tile(down, k),
                        window,
                        crisis_count: count / tiles as f64,
                        baseline_count: mc.background / tiles as f64,
                    });
                }
            }
            if tiles > 1 {
                for node in graph.nodes() {
                    out.push(TileMovement {
                        origin_tile: tile(&node.detector_id, 0),
                        destination_tile: tile(&node.detector_id, 1),
                        window,
                        crisis_count: mc.background,
                        baseline_count: mc.background,
                    });
                }
            }
        }
    }
    debug_assert!(out.iter().all(|m| (m.window.end() - m.window.start).num_hours() == WINDOW_HOURS as i64));
    out
}

/// Movement records for the regular period; no surge, so counts are the
/// background plus noise.
pub fn generate_regular_movement(graph: &RoadGraph, config: &ScenarioConfig) -> Result<Vec<TileMovement>> {
    config.validate()?;
    Ok(movement_records(graph, config, &HashMap::new(), config.regular_start(), config.regular_days, 4))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: RoadGraph,
    pub regular: Vec<RawDetectorSeries>,
    pub evacuation_baseline: Vec<RawDetectorSeries>,
    pub evacuation: EvacuationData,
    pub regular_movements: Vec<TileMovement>,
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    let graph = generate_network(config)?;
    let regular = generate_regular_traffic(&graph, config)?;
    let evacuation_baseline = generate_evacuation_baseline(&graph, config)?;
    let evacuation = inject_evacuation(&evacuation_baseline, &graph, config)?;
    let regular_movements = generate_regular_movement(&graph, config)?;
    Ok(Scenario {
        config: config.clone(),
        graph,
        regular,
        evacuation_baseline,
        evacuation,
        regular_movements,
    })
}

/// Paths written by [`write_scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub regular_detectors: PathBuf,
    pub evacuation_detectors: PathBuf,
    pub movement: PathBuf,
    pub tile_map: PathBuf,
    pub centroids: PathBuf,
    pub evacuation_features: PathBuf,
    pub schedule: PathBuf,
}

impl ScenarioFiles {
    pub fn in_dir(dir: &Path) -> Self {
        ScenarioFiles {
            nodes: dir.join("nodes.csv"),
            edges: dir.join("edges.csv"),
            regular_detectors: dir.join("detectors_regular.csv"),
            evacuation_detectors: dir.join("detectors_evacuation.csv"),
            movement: dir.join("movement.csv"),
            tile_map: dir.join("tile_map.csv"),
            centroids: dir.join("centroids.csv"),
            evacuation_features: dir.join("evac_features.csv"),
            schedule: dir.join("schedule.json"),
        }
    }
}

/// Writes every scenario input in the formats the ingestion pipelines read.
/// Movement records of both periods go to one file.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<ScenarioFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ScenarioFiles::in_dir(dir);
    write_graph_csv(&scenario.graph, &files.nodes)?;
    write_edges_csv(&scenario.graph, &files.edges)?;
    write_detector_csv(&scenario.regular, &files.regular_detectors)?;
    write_detector_csv(&scenario.evacuation.series, &files.evacuation_detectors)?;
    let mut movement = scenario.regular_movements.clone();
    movement.extend(scenario.evacuation.movements.iter().cloned());
    write_movement_csv(&movement, &files.movement)?;
    let (tiles, centroids) = movement_geography(&scenario.graph, &scenario.config);
    write_tile_map_csv(&tiles, &files.tile_map)?;
    write_centroid_csv(&centroids, &files.centroids)?;
    write_evac_csv(&scenario.evacuation.features, &files.evacuation_features)?;
    let schedule = serde_json::to_string_pretty(&scenario.evacuation.schedule)?;
    std::fs::write(&files.schedule, schedule).map_err(|e| Error::io(&files.schedule, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{qc_filter, QcThresholds};

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            corridor_count: 2,
            nodes_per_corridor: 4,
            regular_days: 14,
            evacuation_days: 3,
            landfall_offset_hours: 60.0,
            ..ScenarioConfig::default()
        }
    }

    fn volumes(s: &RawDetectorSeries) -> Vec<f64> {
        s.records.iter().map(|r| r.volume.unwrap()).collect()
    }

    #[test]
    fn network_shapes() {
        let mut two = ScenarioConfig { corridor_count: 1, nodes_per_corridor: 2, ..ScenarioConfig::default() };
        two.surge.affected_corridors = vec![0];
        let g = generate_network(&two).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].distance_miles, 2.0);

        let g = generate_network(&ScenarioConfig::default()).unwrap();
        assert_eq!(g.node_count(), 30);
        assert_eq!(g.edges().len(), 27);
        for e in g.edges() {
            let (a, b) = (&g.nodes()[e.from], &g.nodes()[e.to]);
            let d = crate::graph::haversine_miles(a.latitude, a.longitude, b.latitude, b.longitude);
            assert!((d - 2.0).abs() < 1e-9);
        }
        assert_eq!(generate_network(&ScenarioConfig::default()).unwrap(), g);

        let one = ScenarioConfig { nodes_per_corridor: 1, ..two };
        assert!(generate_network(&one).is_err());
    }

    #[test]
    fn flat_profile_is_constant() {
        let mut cfg = small();
        cfg.profile.am_peak = 0.0;
        cfg.profile.pm_peak = 0.0;
        cfg.profile.noise_std = 0.0;
        let g = generate_network(&cfg).unwrap();
        let bases = base_flows(&g, &cfg);
        for (s, b) in generate_regular_traffic(&g, &cfg).unwrap().iter().zip(bases) {
            assert!(volumes(s).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn noise_free_weekdays_repeat() {
        let mut cfg = small();
        cfg.profile.noise_std = 0.0;
        let g = generate_network(&cfg).unwrap();
        let s = generate_regular_traffic(&g, &cfg).unwrap();
        let v = volumes(&s[0]);
        // 2022-05-02 is a Monday: days 0..5 are weekdays, 5 and 6 the weekend
        for h in 0..24 {
            for d in 1..5 {
                assert_eq!(v[h], v[d * 24 + h]);
            }
            assert_eq!(v[h], v[7 * 24 + h]);
        }
        assert!(v[5 * 24 + 17] < v[17]);
    }

    #[test]
    fn determinism_and_cap() {
        let mut cfg = small();
        cfg.profile.base_flow_min = 6000.0;
        cfg.profile.base_flow_max = 7400.0;
        cfg.profile.noise_std = 400.0;
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        let cap = MAX_FLOW_PER_LANE * cfg.lanes as f64;
        for s in a.regular.iter().chain(&a.evacuation.series) {
            assert!(volumes(s).iter().all(|&v| v <= cap && v >= 0.0));
            assert!(s.records.iter().all(|r| r.speed.unwrap() >= MIN_SPEED_MPH));
        }
        let (kept, report) = qc_filter(a.regular.clone(), &QcThresholds::default());
        assert_eq!(kept.len(), cfg.node_count(), "{report:?}");
        let (kept, _) = qc_filter(a.evacuation.series.clone(), &QcThresholds::default());
        assert_eq!(kept.len(), cfg.node_count());
        a.evacuation.features.validate().unwrap();
    }

    #[test]
    fn identity_surge() {
        let mut cfg = small();
        cfg.surge.magnitude = 1.0;
        let g = generate_network(&cfg).unwrap();
        let base = generate_evacuation_baseline(&g, &cfg).unwrap();
        let evac = inject_evacuation(&base, &g, &cfg).unwrap();
        assert_eq!(evac.series, base);
    }

    #[test]
    fn step_surge_doubles_cumulative_flow() {
        let mut cfg = small();
        cfg.surge = SurgeConfig {
            start_hour: 0.0,
            ramp: RampShape::Step,
            ramp_hours: 0.0,
            magnitude: 2.0,
            affected_corridors: vec![0],
            jitter: 0.0,
        };
        cfg.profile.base_flow_max = 1000.0;
        cfg.profile.noise_std = 50.0;
        let g = generate_network(&cfg).unwrap();
        let base = generate_evacuation_baseline(&g, &cfg).unwrap();
        let evac = inject_evacuation(&base, &g, &cfg).unwrap();
        let start = cfg.evacuation_start();
        for (b, e) in base.iter().zip(&evac.series).take(cfg.nodes_per_corridor) {
            let total = |s: &RawDetectorSeries| -> f64 {
                s.records.iter().filter(|r| r.timestamp >= start).map(|r| r.volume.unwrap()).sum()
            };
            assert!(total(e) >= 2.0 * total(b) - 1e-6);
        }
        // unaffected corridor untouched
        assert_eq!(base.last(), evac.series.last());
    }

    #[test]
    fn movement_tracks_surge() {
        for lead in [0, 8] {
            let mut cfg = small();
            cfg.profile.noise_std = 0.0;
            cfg.movement.noise_std = 0.0;
            cfg.movement.coupling = 0.1;
            cfg.movement.lead_hours = lead;
            let g = generate_network(&cfg).unwrap();
            let base = generate_evacuation_baseline(&g, &cfg).unwrap();
            let evac = inject_evacuation(&base, &g, &cfg).unwrap();
            let det = "C0-02";
            let i = g.index_of(det).unwrap();
            let increase_at: HashMap<NaiveDateTime, f64> = base[i]
                .records
                .iter()
                .zip(&evac.series[i].records)
                .map(|(b, e)| (b.timestamp, e.volume.unwrap() - b.volume.unwrap()))
                .collect();
            let lead = Duration::hours(lead as i64);
            let mut hourly = (Vec::new(), Vec::new());
            let mut windows: BTreeMap<NaiveDateTime, (f64, f64)> = BTreeMap::new();
            for r in evac.features.rows.iter().filter(|r| r.detector_id == det) {
                let h = r.timestamp.hour();
                if !(3..19).contains(&h) {
                    continue;
                }
                let Some(v) = increase_at.get(&(r.timestamp + lead)) else { continue };
                hourly.0.push(r.fb_inflow);
                hourly.1.push(*v);
                let start = r.timestamp.date().and_hms_opt(if h < 11 { 3 } else { 11 }, 0, 0).unwrap();
                let w = windows.entry(start).or_default();
                w.0 += r.fb_inflow;
                w.1 += v;
            }
            let (a, b): (Vec<f64>, Vec<f64>) = windows.values().copied().unzip();
            let r = pearson(&a, &b);
            assert!(r > 0.8, "lead {lead}: window correlation {r}");
            if lead.is_zero() {
                let r = pearson(&hourly.0, &hourly.1);
                assert!(r > 0.8, "hourly correlation {r}");
            }
            assert!(evac.movements.iter().all(|m| [3, 11].contains(&m.window.start.hour())));
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn evacuation_features_follow_schedule() {
        let cfg = small();
        let s = generate_scenario(&cfg).unwrap();
        let f = &s.evacuation.features;
        f.validate().unwrap();
        let rows: Vec<_> = f.rows.iter().filter(|r| r.detector_id == "C1-03").collect();
        for w in rows.windows(2) {
            assert_eq!(w[0].time_to_landfall_hours - w[1].time_to_landfall_hours, 1.0);
        }
        assert_eq!(rows.last().unwrap().population_under_orders, 370_000.0);
        // corridor 0 starts next to a zone
        let d0 = f.rows.iter().find(|r| r.detector_id == "C0-00").unwrap();
        assert!(d0.distance_to_evac_zone_miles < 4.0);
    }

    #[test]
    fn files_round_trip() {
        let cfg = ScenarioConfig { regular_days: 3, evacuation_days: 1, landfall_offset_hours: 20.0, orders: vec![], ..small() };
        let s = generate_scenario(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_scenario(&s, dir.path()).unwrap();
        let g = crate::graph::read_graph_csv(&files.nodes, Some(&files.edges)).unwrap();
        assert_eq!(g.edges(), s.graph.edges());
        let back = crate::detector::read_detector_csv(&files.regular_detectors, &g).unwrap();
        assert_eq!(back.len(), s.regular.len());
        let moves = crate::movement::read_movement_csv(&files.movement).unwrap();
        assert_eq!(moves.len(), s.regular_movements.len() + s.evacuation.movements.len());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.surge.magnitude = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.orders.push(OrderSpec { offset_hours: 1000.0, population: 1.0 });
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.surge.affected_corridors = vec![5];
        assert!(cfg.validate().is_err());
    }
}
