//! Per-hour model inputs assembled from the pipeline outputs.
//!
//! A [`Dataset`] holds, for every hour with features, the `N x F` traffic
//! features, the target flows, the travel-time adjacency derived from
//! speeds, and optionally movement and evacuation columns. Detectors follow
//! graph order.

use std::collections::HashMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::detector::{FeatureFrame, TimePeriod};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, median_edge_travel_time, normalize_adjacency, AdjacencyOptions, DynamicAdjacency, RoadGraph};
use crate::movement::{BaselineMovement, HourlyMovement};
use crate::tensor::Tensor;
use crate::transfer::EvacFeatureFrame;

pub const TRAFFIC_FEATURES: [&str; 11] = [
    "flow",
    "period_early_morning",
    "period_morning",
    "period_mid_day",
    "period_evening",
    "is_weekend",
    "prev_day_mean_flow",
    "prev_day_std_flow",
    "prev_period_mean_flow",
    "prev_period_std_flow",
    "mean_speed",
];
pub const MOVEMENT_FEATURES: [&str; 2] = ["fb_inflow", "fb_outflow"];
pub const EVACUATION_FEATURES: [&str; 3] = ["time_to_landfall", "distance_to_evac_zone", "population_under_orders"];

/// Which column groups to feed a model. Traffic features are always
/// included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    #[serde(default)]
    pub movement: bool,
    #[serde(default)]
    pub evacuation: bool,
}

impl FeatureSet {
    pub const TRAFFIC: FeatureSet = FeatureSet {
        movement: false,
        evacuation: false,
    };

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = TRAFFIC_FEATURES.iter().map(|s| s.to_string()).collect();
        if self.evacuation {
            out.extend(EVACUATION_FEATURES.iter().map(|s| s.to_string()));
        }
        if self.movement {
            out.extend(MOVEMENT_FEATURES.iter().map(|s| s.to_string()));
        }
        out
    }

    /// The feature set whose [`names`](Self::names) equal `names`.
    pub fn from_names(names: &[String]) -> Result<Self> {
        [false, true]
            .into_iter()
            .flat_map(|evacuation| [false, true].map(|movement| FeatureSet { movement, evacuation }))
            .find(|set| set.names() == names)
            .ok_or_else(|| Error::Validation(format!("unrecognized feature list {names:?}")))
    }

    pub fn width(&self) -> usize {
        self.names().len()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: RoadGraph,
    pub hours: Vec<NaiveDateTime>,
    /// `N x 11` per hour, columns as [`TRAFFIC_FEATURES`].
    pub traffic: Vec<Tensor>,
    /// Observed flow per hour and detector.
    pub flows: Vec<Vec<f64>>,
    pub speeds: Vec<Vec<f64>>,
    pub travel_times: Vec<DynamicAdjacency>,
    pub movement: Option<Vec<Tensor>>,
    pub evacuation: Option<Vec<Tensor>>,
}

impl Dataset {
    /// Requires a feature row for every detector at every hour that any
    /// detector reports. The graph is restricted to the detectors present.
    pub fn from_features(frame: &FeatureFrame, graph: &RoadGraph) -> Result<Self> {
        let ids = frame.detector_ids();
        if ids.is_empty() {
            return Err(Error::Validation("feature frame is empty".into()));
        }
        let graph = graph.restricted(&ids)?;
        let n = graph.node_count();
        if n != ids.len() {
            return Err(Error::Validation("feature frame names detectors missing from the graph".into()));
        }
        let mut hours: Vec<NaiveDateTime> = frame.rows.iter().map(|r| r.timestamp).collect();
        hours.sort();
        hours.dedup();
        let hour_pos: HashMap<NaiveDateTime, usize> = hours.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let f = TRAFFIC_FEATURES.len();
        let mut traffic = vec![vec![f64::NAN; n * f]; hours.len()];
        let mut flows = vec![vec![f64::NAN; n]; hours.len()];
        let mut speeds = vec![vec![f64::NAN; n]; hours.len()];
        for r in &frame.rows {
            let i = graph.index_of(&r.detector_id).expect("restricted graph holds every id");
            let h = hour_pos[&r.timestamp];
            let mut v = [0.0; 11];
            v[0] = r.flow;
            v[1 + r.time_period.index()] = 1.0;
            v[5] = if r.is_weekend { 1.0 } else { 0.0 };
            v[6] = r.prev_day_mean_flow;
            v[7] = r.prev_day_std_flow;
            v[8] = r.prev_period_mean_flow;
            v[9] = r.prev_period_std_flow;
            v[10] = r.mean_speed;
            traffic[h][i * f..(i + 1) * f].copy_from_slice(&v);
            flows[h][i] = r.flow;
            speeds[h][i] = r.mean_speed;
        }
        for (h, row) in flows.iter().enumerate() {
            if let Some(i) = row.iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(format!(
                    "detector {} has no features at {}",
                    graph.nodes()[i].detector_id,
                    hours[h]
                )));
            }
        }
        let travel_times = speeds
            .iter()
            .zip(&hours)
            .map(|(s, t)| build_adjacency(&graph, s, t.to_string()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            traffic: traffic.into_iter().map(|d| Tensor::matrix(n, f, d)).collect::<Result<_>>()?,
            graph,
            hours,
            flows,
            speeds,
            travel_times,
            movement: None,
            evacuation: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    /// Hourly inflow/outflow; hours or detectors without a record get zero.
    pub fn attach_movement(&mut self, rows: &[HourlyMovement]) {
        let pos: HashMap<NaiveDateTime, usize> = self.hours.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let n = self.node_count();
        let mut out = vec![Tensor::zeros(&[n, 2]); self.len()];
        for r in rows {
            if let (Some(&h), Some(i)) = (pos.get(&r.timestamp), self.graph.index_of(&r.detector_id)) {
                out[h].set(i, 0, r.inflow);
                out[h].set(i, 1, r.outflow);
            }
        }
        self.movement = Some(out);
    }

    /// Movement columns from a day-of-week by hour baseline.
    pub fn attach_baseline_movement(&mut self, table: &BaselineMovement) {
        let n = self.node_count();
        let out = self
            .hours
            .iter()
            .map(|&t| {
                let mut m = Tensor::zeros(&[n, 2]);
                for (i, node) in self.graph.nodes().iter().enumerate() {
                    if let Some(c) = table.at(&node.detector_id, t) {
                        m.set(i, 0, c.inflow);
                        m.set(i, 1, c.outflow);
                    }
                }
                m
            })
            .collect();
        self.movement = Some(out);
    }

    /// Evacuation columns, plus movement columns from the same frame. Every
    /// (detector, hour) of the dataset must be present.
    pub fn attach_evacuation(&mut self, frame: &EvacFeatureFrame) -> Result<()> {
        frame.validate()?;
        let index: HashMap<(&str, NaiveDateTime), usize> = frame
            .rows
            .iter()
            .enumerate()
            .map(|(k, r)| ((r.detector_id.as_str(), r.timestamp), k))
            .collect();
        let n = self.node_count();
        let mut evac = Vec::with_capacity(self.len());
        let mut movement = Vec::with_capacity(self.len());
        for &t in &self.hours {
            let mut e = Tensor::zeros(&[n, 3]);
            let mut m = Tensor::zeros(&[n, 2]);
            for (i, node) in self.graph.nodes().iter().enumerate() {
                let &k = index.get(&(node.detector_id.as_str(), t)).ok_or_else(|| {
                    Error::Contract(format!("evacuation features missing for {} at {t}", node.detector_id))
                })?;
                let r = &frame.rows[k];
                e.set(i, 0, r.time_to_landfall_hours);
                e.set(i, 1, r.distance_to_evac_zone_miles);
                e.set(i, 2, r.population_under_orders);
                m.set(i, 0, r.fb_inflow);
                m.set(i, 1, r.fb_outflow);
            }
            evac.push(e);
            movement.push(m);
        }
        self.evacuation = Some(evac);
        self.movement = Some(movement);
        Ok(())
    }

    /// Raw (unnormalized) `N x F` inputs per hour for `set`.
    pub fn inputs(&self, set: FeatureSet) -> Result<Vec<Tensor>> {
        if set.movement && self.movement.is_none() {
            return Err(Error::Contract("movement features requested but none attached".into()));
        }
        if set.evacuation && self.evacuation.is_none() {
            return Err(Error::Contract("evacuation features requested but none attached".into()));
        }
        let n = self.node_count();
        let width = set.width();
        (0..self.len())
            .map(|h| {
                let mut data = Vec::with_capacity(n * width);
                for i in 0..n {
                    data.extend_from_slice(self.traffic[h].row(i));
                    if set.evacuation {
                        data.extend_from_slice(self.evacuation.as_ref().unwrap()[h].row(i));
                    }
                    if set.movement {
                        data.extend_from_slice(self.movement.as_ref().unwrap()[h].row(i));
                    }
                }
                Tensor::matrix(n, width, data)
            })
            .collect()
    }

    /// Median of the edge travel times over the given hours.
    pub fn median_edge_minutes(&self, hours: impl IntoIterator<Item = usize>) -> Option<f64> {
        let adj: Vec<&DynamicAdjacency> = hours.into_iter().map(|h| &self.travel_times[h]).collect();
        median_edge_travel_time(adj, &self.graph)
    }

    pub fn normalized_adjacency(&self, options: &AdjacencyOptions) -> Vec<Tensor> {
        self.travel_times.iter().map(|a| normalize_adjacency(a, options)).collect()
    }

    /// Adjacency from each detector's median speed over the given hours.
    pub fn static_adjacency(&self, hours: &[usize], options: &AdjacencyOptions) -> Result<Tensor> {
        let n = self.node_count();
        let medians: Vec<f64> = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = hours.iter().map(|&h| self.speeds[h][i]).collect();
                v.sort_by(f64::total_cmp);
                match v.len() {
                    0 => f64::NAN,
                    k if k % 2 == 1 => v[k / 2],
                    k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
                }
            })
            .collect();
        if medians.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("static adjacency needs at least one hour".into()));
        }
        Ok(normalize_adjacency(&build_adjacency(&self.graph, &medians, "median")?, options))
    }

    /// Hours whose timestamps fall in `[from, to)`.
    pub fn hours_between(&self, from: NaiveDateTime, to: NaiveDateTime) -> Vec<usize> {
        (0..self.len()).filter(|&h| self.hours[h] >= from && self.hours[h] < to).collect()
    }

    /// One-hot period column of hour `h`, mostly for diagnostics.
    pub fn period(&self, h: usize) -> Option<TimePeriod> {
        TimePeriod::ALL
            .into_iter()
            .find(|p| self.traffic[h].at(0, 1 + p.index()) == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{engineer_features, DetectorSeries};
    use crate::graph::chain;
    use chrono::{Duration, NaiveDate};

    fn series(graph: &RoadGraph, days: i64) -> Vec<DetectorSeries> {
        let t0 = NaiveDate::from_ymd_opt(2022, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let timestamps: Vec<NaiveDateTime> = (0..24 * days).map(|h| t0 + Duration::hours(h)).collect();
        graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| DetectorSeries {
                detector_id: n.detector_id.clone(),
                lane_count: n.lane_count,
                volume: timestamps.iter().enumerate().map(|(k, _)| 500.0 + 10.0 * i as f64 + (k % 24) as f64).collect(),
                speed: vec![60.0 - i as f64; timestamps.len()],
                occupancy: vec![0.1; timestamps.len()],
                timestamps: timestamps.clone(),
            })
            .collect()
    }

    #[test]
    fn assembles_in_graph_order() {
        let g = chain(4, 2.0);
        let frame = engineer_features(&series(&g, 2)).unwrap();
        let ds = Dataset::from_features(&frame, &g).unwrap();
        assert_eq!(ds.len(), 32);
        assert_eq!(ds.traffic[0].shape(), &[4, 11]);
        assert_eq!(ds.flows[0][2], 520.0 + 3.0);
        assert_eq!(ds.speeds[0][3], 57.0);
        assert_eq!(ds.period(0), Some(TimePeriod::EarlyMorning));
        let inputs = ds.inputs(FeatureSet::TRAFFIC).unwrap();
        assert_eq!(inputs[5], ds.traffic[5]);
        assert!(ds.inputs(FeatureSet { movement: true, evacuation: false }).is_err());
    }

    #[test]
    fn movement_columns() {
        let g = chain(3, 2.0);
        let frame = engineer_features(&series(&g, 1)).unwrap();
        let mut ds = Dataset::from_features(&frame, &g).unwrap();
        ds.attach_movement(&[HourlyMovement {
            detector_id: g.nodes()[1].detector_id.clone(),
            timestamp: ds.hours[4],
            inflow: 7.0,
            outflow: 2.0,
        }]);
        let x = ds.inputs(FeatureSet { movement: true, evacuation: false }).unwrap();
        assert_eq!(x[4].row(1)[11..], [7.0, 2.0]);
        assert_eq!(x[3].row(1)[11..], [0.0, 0.0]);
    }

    #[test]
    fn missing_hour_is_rejected() {
        let g = chain(3, 2.0);
        let mut frame = engineer_features(&series(&g, 1)).unwrap();
        frame.rows.remove(7);
        assert!(Dataset::from_features(&frame, &g).is_err());
    }
}
