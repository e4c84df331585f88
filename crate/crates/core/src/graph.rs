//! Detector network and travel-time weighted adjacency.
//!
//! Units are fixed at this boundary: distances in miles, speeds in mph,
//! travel times in minutes.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Speeds below this are raised to it before computing travel time.
pub const SPEED_FLOOR_MPH: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Northbound,
    Southbound,
    Eastbound,
    Westbound,
}

impl Direction {
    /// Whether travel proceeds toward increasing mileposts.
    pub fn increasing(self) -> bool {
        matches!(self, Direction::Northbound | Direction::Eastbound)
    }

    pub fn code(self) -> &'static str {
        match self {
            Direction::Northbound => "NB",
            Direction::Southbound => "SB",
            Direction::Eastbound => "EB",
            Direction::Westbound => "WB",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nb" | "n" | "north" | "northbound" => Ok(Direction::Northbound),
            "sb" | "s" | "south" | "southbound" => Ok(Direction::Southbound),
            "eb" | "e" | "east" | "eastbound" => Ok(Direction::Eastbound),
            "wb" | "w" | "west" | "westbound" => Ok(Direction::Westbound),
            other => Err(Error::Validation(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNode {
    pub detector_id: String,
    pub corridor: String,
    pub direction: Direction,
    pub milepost_miles: f64,
    pub lane_count: u32,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance_miles: f64,
}

/// Detectors in a fixed index order plus directed corridor segments.
///
/// Immutable after construction. Node indices are the row/column order of
/// every node-keyed tensor in the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    nodes: Vec<DetectorNode>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    inferred: bool,
}

impl RoadGraph {
    /// Links consecutive detectors of the same corridor and direction, in
    /// travel order, with the milepost difference as the distance.
    pub fn infer(nodes: Vec<DetectorNode>) -> Result<Self> {
        let index = Self::validate_nodes(&nodes)?;
        let mut groups: HashMap<(&str, Direction), Vec<usize>> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            groups.entry((n.corridor.as_str(), n.direction)).or_default().push(i);
        }
        let mut keys: Vec<_> = groups.keys().copied().collect();
        keys.sort();
        let mut edges = Vec::new();
        for key in keys {
            let mut members = groups[&key].clone();
            members.sort_by(|&a, &b| nodes[a].milepost_miles.total_cmp(&nodes[b].milepost_miles));
            if !key.1.increasing() {
                members.reverse();
            }
            for pair in members.windows(2) {
                let d = (nodes[pair[1]].milepost_miles - nodes[pair[0]].milepost_miles).abs();
                if !(d > 0.0) {
                    return Err(Error::Validation(format!(
                        "detectors `{}` and `{}` share a milepost on {} {}",
                        nodes[pair[0]].detector_id, nodes[pair[1]].detector_id, key.0, key.1
                    )));
                }
                edges.push(Edge {
                    from: pair[0],
                    to: pair[1],
                    distance_miles: d,
                });
            }
        }
        edges.sort_by_key(|e| (e.from, e.to));
        Ok(RoadGraph {
            nodes,
            edges,
            index,
            inferred: true,
        })
    }

    /// Uses an explicit edge list `(from_id, to_id, distance_miles)`.
    pub fn with_edges(nodes: Vec<DetectorNode>, edges: &[(String, String, f64)]) -> Result<Self> {
        let index = Self::validate_nodes(&nodes)?;
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("edge references unknown detector `{id}`")))
        };
        let mut out = Vec::with_capacity(edges.len());
        for (from, to, d) in edges {
            let (from, to) = (lookup(from)?, lookup(to)?);
            if from == to {
                return Err(Error::Validation(format!(
                    "self-edge on `{}`",
                    nodes[from].detector_id
                )));
            }
            if !(*d > 0.0) || !d.is_finite() {
                return Err(Error::Validation(format!(
                    "edge {} -> {} has non-positive distance {d}",
                    nodes[from].detector_id, nodes[to].detector_id
                )));
            }
            out.push(Edge {
                from,
                to,
                distance_miles: *d,
            });
        }
        out.sort_by_key(|e| (e.from, e.to));
        out.dedup_by_key(|e| (e.from, e.to));
        Ok(RoadGraph {
            nodes,
            edges: out,
            index,
            inferred: false,
        })
    }

    fn validate_nodes(nodes: &[DetectorNode]) -> Result<HashMap<String, usize>> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.lane_count < 1 {
                return Err(Error::Validation(format!("detector `{}` has no lanes", n.detector_id)));
            }
            if index.insert(n.detector_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate detector id `{}`", n.detector_id)));
            }
        }
        Ok(index)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[DetectorNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn index_of(&self, detector_id: &str) -> Option<usize> {
        self.index.get(detector_id).copied()
    }

    pub fn detector_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.detector_id.clone()).collect()
    }

    /// Hop counts from `source` over edges taken in either direction;
    /// `None` for unreachable nodes.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut dist = vec![None; n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// The same network with node `k` of the result being node `order[k]`
    /// of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<RoadGraph> {
        let n = self.nodes.len();
        let mut inverse = vec![usize::MAX; n];
        if order.len() != n {
            return Err(Error::shape("permuted", format!("{} indices for {n} nodes", order.len())));
        }
        for (k, &i) in order.iter().enumerate() {
            if i >= n || inverse[i] != usize::MAX {
                return Err(Error::Validation("not a permutation".into()));
            }
            inverse[i] = k;
        }
        let nodes: Vec<DetectorNode> = order.iter().map(|&i| self.nodes[i].clone()).collect();
        let index = Self::validate_nodes(&nodes)?;
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                from: inverse[e.from],
                to: inverse[e.to],
                distance_miles: e.distance_miles,
            })
            .collect();
        edges.sort_by_key(|e| (e.from, e.to));
        Ok(RoadGraph {
            nodes,
            edges,
            index,
            inferred: self.inferred,
        })
    }

    /// The network restricted to `keep` (in this graph's order). Inferred
    /// edges are re-inferred so corridors stay connected across dropped
    /// detectors; explicit edges touching a dropped detector are removed.
    pub fn restricted(&self, keep: &[String]) -> Result<RoadGraph> {
        let wanted: std::collections::HashSet<&str> = keep.iter().map(String::as_str).collect();
        for id in keep {
            if self.index_of(id).is_none() {
                return Err(Error::Validation(format!("unknown detector `{id}`")));
            }
        }
        let nodes: Vec<DetectorNode> = self
            .nodes
            .iter()
            .filter(|n| wanted.contains(n.detector_id.as_str()))
            .cloned()
            .collect();
        if self.inferred {
            return RoadGraph::infer(nodes);
        }
        let edges: Vec<(String, String, f64)> = self
            .edges
            .iter()
            .filter(|e| {
                wanted.contains(self.nodes[e.from].detector_id.as_str())
                    && wanted.contains(self.nodes[e.to].detector_id.as_str())
            })
            .map(|e| {
                (
                    self.nodes[e.from].detector_id.clone(),
                    self.nodes[e.to].detector_id.clone(),
                    e.distance_miles,
                )
            })
            .collect();
        RoadGraph::with_edges(nodes, &edges)
    }
}

/// Minutes to traverse `distance_miles` at the mean of two detector speeds.
///
/// Each speed is raised to [`SPEED_FLOOR_MPH`] first; negative inputs and
/// non-positive distances are rejected.
pub fn travel_time(distance_miles: f64, speed_i: f64, speed_j: f64) -> Result<f64> {
    if !(distance_miles > 0.0) || !distance_miles.is_finite() {
        return Err(Error::Validation(format!("distance must be positive, got {distance_miles}")));
    }
    if !(speed_i >= 0.0) || !(speed_j >= 0.0) || !speed_i.is_finite() || !speed_j.is_finite() {
        return Err(Error::Validation(format!(
            "speeds must be non-negative, got {speed_i} and {speed_j}"
        )));
    }
    let mean = (speed_i.max(SPEED_FLOOR_MPH) + speed_j.max(SPEED_FLOOR_MPH)) / 2.0;
    Ok(60.0 * distance_miles / mean)
}

/// Travel-time adjacency for one timestep: entry `(i, j)` is the minutes
/// from `i` to `j` along edge `i -> j`, zero on the diagonal and off-edge.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicAdjacency {
    pub label: String,
    n: usize,
    minutes: Vec<f64>,
}

impl DynamicAdjacency {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.minutes[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.minutes
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.n, self.minutes.clone()).expect("square adjacency")
    }

    /// Symmetrized copy: `max(A(i,j), A(j,i))` in both positions.
    pub fn symmetrized(&self) -> DynamicAdjacency {
        let n = self.n;
        let mut minutes = self.minutes.clone();
        for i in 0..n {
            for j in 0..n {
                minutes[i * n + j] = self.minutes[i * n + j].max(self.minutes[j * n + i]);
            }
        }
        DynamicAdjacency {
            label: self.label.clone(),
            n,
            minutes,
        }
    }
}

pub fn build_adjacency(graph: &RoadGraph, speeds_mph: &[f64], label: impl Into<String>) -> Result<DynamicAdjacency> {
    let n = graph.node_count();
    if speeds_mph.len() != n {
        return Err(Error::shape(
            "build_adjacency",
            format!("{} speeds for {n} detectors", speeds_mph.len()),
        ));
    }
    let mut minutes = vec![0.0; n * n];
    for e in graph.edges() {
        minutes[e.from * n + e.to] = travel_time(e.distance_miles, speeds_mph[e.from], speeds_mph[e.to])?;
    }
    Ok(DynamicAdjacency {
        label: label.into(),
        n,
        minutes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeWeighting {
    /// `exp(-minutes / tau_minutes)` on each edge.
    Affinity { tau_minutes: f64 },
    /// Raw travel minutes as weights.
    RawTravelTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directionality {
    #[default]
    Directed,
    Undirected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyOptions {
    pub weighting: EdgeWeighting,
    pub directionality: Directionality,
}

/// Convolution matrix: edge weights plus a unit self-loop, each row
/// divided by its sum. Rows sum to one and isolated nodes map to
/// themselves.
pub fn normalize_adjacency(adj: &DynamicAdjacency, options: &AdjacencyOptions) -> Tensor {
    let adj = match options.directionality {
        Directionality::Directed => adj.clone(),
        Directionality::Undirected => adj.symmetrized(),
    };
    let n = adj.n;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let tt = adj.minutes[i * n + j];
            if i != j && tt > 0.0 {
                w[i * n + j] = match options.weighting {
                    EdgeWeighting::Affinity { tau_minutes } => (-tt / tau_minutes).exp(),
                    EdgeWeighting::RawTravelTime => tt,
                };
            }
        }
        w[i * n + i] = 1.0;
        let row = &mut w[i * n..(i + 1) * n];
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::matrix(n, n, w).expect("square adjacency")
}

/// Median over all edges and timesteps of the edge travel time, the
/// default affinity scale.
pub fn median_edge_travel_time<'a>(adjacencies: impl IntoIterator<Item = &'a DynamicAdjacency>, graph: &RoadGraph) -> Option<f64> {
    let mut values: Vec<f64> = adjacencies
        .into_iter()
        .flat_map(|a| graph.edges().iter().map(move |e| a.get(e.from, e.to)))
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len();
    Some(if m % 2 == 1 {
        values[m / 2]
    } else {
        (values[m / 2 - 1] + values[m / 2]) / 2.0
    })
}

/// Great-circle distance in miles.
pub fn haversine_miles(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const EARTH_RADIUS_MILES: f64 = 3958.8;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    detector_id: String,
    corridor: String,
    direction: String,
    milepost_miles: f64,
    lane_count: u32,
    latitude: f64,
    longitude: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    from_id: String,
    to_id: String,
    distance_miles: f64,
}

/// Reads the graph definition CSV and, when given, an explicit edge CSV
/// that replaces inferred edges.
pub fn read_graph_csv(nodes_path: &Path, edges_path: Option<&Path>) -> Result<RoadGraph> {
    let mut reader = csv::Reader::from_path(nodes_path).map_err(|e| with_path(e, nodes_path))?;
    let mut nodes = Vec::new();
    for row in reader.deserialize() {
        let row: NodeRow = row.map_err(|e| with_path(e, nodes_path))?;
        nodes.push(DetectorNode {
            direction: row.direction.parse()?,
            detector_id: row.detector_id,
            corridor: row.corridor,
            milepost_miles: row.milepost_miles,
            lane_count: row.lane_count,
            latitude: row.latitude,
            longitude: row.longitude,
        });
    }
    match edges_path {
        None => RoadGraph::infer(nodes),
        Some(p) => {
            let mut reader = csv::Reader::from_path(p).map_err(|e| with_path(e, p))?;
            let mut edges = Vec::new();
            for row in reader.deserialize() {
                let row: EdgeRow = row.map_err(|e| with_path(e, p))?;
                edges.push((row.from_id, row.to_id, row.distance_miles));
            }
            RoadGraph::with_edges(nodes, &edges)
        }
    }
}

pub fn write_graph_csv(graph: &RoadGraph, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for n in graph.nodes() {
        w.serialize(NodeRow {
            detector_id: n.detector_id.clone(),
            corridor: n.corridor.clone(),
            direction: n.direction.code().to_string(),
            milepost_miles: n.milepost_miles,
            lane_count: n.lane_count,
            latitude: n.latitude,
            longitude: n.longitude,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_edges_csv(graph: &RoadGraph, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| with_path(e, path))?;
    for e in graph.edges() {
        w.serialize(EdgeRow {
            from_id: graph.nodes[e.from].detector_id.clone(),
            to_id: graph.nodes[e.to].detector_id.clone(),
            distance_miles: e.distance_miles,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn with_path(e: csv::Error, path: &Path) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

#[cfg(test)]
pub(crate) fn chain(n: usize, spacing: f64) -> RoadGraph {
    let nodes = (0..n)
        .map(|i| DetectorNode {
            detector_id: format!("D{i}"),
            corridor: "I-4".into(),
            direction: Direction::Eastbound,
            milepost_miles: i as f64 * spacing,
            lane_count: 3,
            latitude: 28.5,
            longitude: -81.4 + i as f64 * 0.03,
        })
        .collect();
    RoadGraph::infer(nodes).unwrap()
}
