//! Temporal interval graphs and time-respecting breadth-first search.
//!
//! Edge rows are floored to the minute. For each unordered device pair the
//! per-minute observations from both directions are merged (strongest RSSI
//! wins), then consecutive minutes with the same RSSI are folded into maximal
//! sub-intervals. Interior gaps become [`Signal::Unseen`] sub-intervals, so
//! the sub-intervals of an edge always tile its span exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edges::EdgeRow;
use crate::wire::DeviceId;

pub const MINUTE: u64 = 60;

/// RSSI of a sub-interval; `Unseen` is the −∞ of an unobserved gap and
/// orders below every measured value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signal {
    Unseen,
    Dbm(i8),
}

impl Signal {
    pub fn is_seen(self) -> bool {
        matches!(self, Signal::Dbm(_))
    }

    pub fn at_least(self, delta: i8) -> bool {
        matches!(self, Signal::Dbm(v) if v >= delta)
    }
}

impl Serialize for Signal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Signal::Unseen => s.serialize_none(),
            Signal::Dbm(v) => s.serialize_some(v),
        }
    }
}

impl<'de> Deserialize<'de> for Signal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Option::<i8>::deserialize(d)?.map_or(Signal::Unseen, Signal::Dbm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubInterval {
    pub start: u64,
    pub end: u64,
    pub signal: Signal,
}

impl SubInterval {
    fn clipped_len(&self, from: u64, to: u64) -> u64 {
        self.end.min(to).saturating_sub(self.start.max(from))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeAnnotation {
    pub start: u64,
    pub end: u64,
    pub subintervals: Vec<SubInterval>,
}

impl EdgeAnnotation {
    /// Seconds in `[from, to)` during which the pair saw each other at all.
    pub fn observed_secs_in(&self, from: u64, to: u64) -> u64 {
        self.subintervals
            .iter()
            .filter(|s| s.signal.is_seen())
            .map(|s| s.clipped_len(from, to))
            .sum()
    }

    pub fn observed_secs(&self) -> u64 {
        self.observed_secs_in(self.start, self.end)
    }

    /// Seconds in `[from, to)` with RSSI ≥ `delta`.
    pub fn near_secs_in(&self, delta: i8, from: u64, to: u64) -> u64 {
        self.subintervals
            .iter()
            .filter(|s| s.signal.at_least(delta))
            .map(|s| s.clipped_len(from, to))
            .sum()
    }

    /// Start of the first moment in `[from, to)` with RSSI ≥ `delta`.
    pub fn first_near_in(&self, delta: i8, from: u64, to: u64) -> Option<u64> {
        self.subintervals
            .iter()
            .find(|s| s.signal.at_least(delta) && s.clipped_len(from, to) > 0)
            .map(|s| s.start.max(from))
    }
}

fn pair(a: DeviceId, b: DeviceId) -> (DeviceId, DeviceId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntervalGraph {
    start: u64,
    end: u64,
    vertices: BTreeSet<DeviceId>,
    edges: BTreeMap<(DeviceId, DeviceId), EdgeAnnotation>,
    adjacency: BTreeMap<DeviceId, BTreeSet<DeviceId>>,
}

impl IntervalGraph {
    pub fn window(&self) -> (u64, u64) {
        (self.start, self.end)
    }

    pub fn vertices(&self) -> &BTreeSet<DeviceId> {
        &self.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, v: &DeviceId) -> bool {
        self.vertices.contains(v)
    }

    pub fn edge(&self, a: DeviceId, b: DeviceId) -> Option<&EdgeAnnotation> {
        self.edges.get(&pair(a, b))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&(DeviceId, DeviceId), &EdgeAnnotation)> {
        self.edges.iter()
    }

    pub fn neighbors(&self, v: &DeviceId) -> impl Iterator<Item = &DeviceId> {
        self.adjacency.get(v).into_iter().flatten()
    }

    fn from_parts(
        start: u64,
        end: u64,
        vertices: BTreeSet<DeviceId>,
        edges: BTreeMap<(DeviceId, DeviceId), EdgeAnnotation>,
    ) -> Self {
        let mut adjacency: BTreeMap<DeviceId, BTreeSet<DeviceId>> = BTreeMap::new();
        for &(a, b) in edges.keys() {
            adjacency.entry(a).or_default().insert(b);
            adjacency.entry(b).or_default().insert(a);
        }
        IntervalGraph {
            start,
            end,
            vertices,
            edges,
            adjacency,
        }
    }
}

/// Builds the interval graph for rows with `t_start <= ts < t_end`.
pub fn build_interval_graph<'a>(
    rows: impl IntoIterator<Item = &'a EdgeRow>,
    t_start: u64,
    t_end: u64,
) -> IntervalGraph {
    let mut vertices = BTreeSet::new();
    let mut minutes: BTreeMap<(DeviceId, DeviceId), BTreeMap<u64, i8>> = BTreeMap::new();
    for row in rows {
        if row.ts < t_start || row.ts >= t_end {
            continue;
        }
        vertices.insert(row.src);
        vertices.insert(row.sink);
        if row.src == row.sink {
            continue;
        }
        let minute = row.ts / MINUTE * MINUTE;
        let slot = minutes
            .entry(pair(row.src, row.sink))
            .or_default()
            .entry(minute)
            .or_insert(row.rssi);
        *slot = (*slot).max(row.rssi);
    }

    let edges = minutes
        .into_iter()
        .map(|(key, obs)| (key, annotate(&obs, t_start, t_end)))
        .collect();
    IntervalGraph::from_parts(t_start, t_end, vertices, edges)
}

fn annotate(obs: &BTreeMap<u64, i8>, t_start: u64, t_end: u64) -> EdgeAnnotation {
    let mut subs: Vec<SubInterval> = Vec::new();
    for (&minute, &rssi) in obs {
        let signal = Signal::Dbm(rssi);
        match subs.last_mut() {
            Some(last) if last.end == minute && last.signal == signal => {
                last.end = minute + MINUTE;
                continue;
            }
            Some(last) if last.end < minute => {
                let gap_start = last.end;
                subs.push(SubInterval {
                    start: gap_start,
                    end: minute,
                    signal: Signal::Unseen,
                });
            }
            _ => {}
        }
        subs.push(SubInterval {
            start: minute,
            end: minute + MINUTE,
            signal,
        });
    }
    // Minute flooring can stick out of a window that is not minute aligned.
    if let Some(first) = subs.first_mut() {
        first.start = first.start.max(t_start);
    }
    if let Some(last) = subs.last_mut() {
        last.end = last.end.min(t_end);
    }
    subs.retain(|s| s.start < s.end);
    EdgeAnnotation {
        start: subs.first().map_or(t_start, |s| s.start),
        end: subs.last().map_or(t_start, |s| s.end),
        subintervals: subs,
    }
}

/// Near-contact rule: RSSI ≥ `delta` for a cumulative `min_minutes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactPredicate {
    pub delta: i8,
    pub min_minutes: u32,
}

impl Default for ContactPredicate {
    fn default() -> Self {
        ContactPredicate {
            delta: -78,
            min_minutes: 15,
        }
    }
}

impl ContactPredicate {
    fn min_secs(&self) -> u64 {
        u64::from(self.min_minutes) * MINUTE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactMember {
    pub device_id: DeviceId,
    /// Qualifying (near) contact time, summed over the qualifying edges.
    pub minutes: u64,
    /// Start of the earliest near contact on a qualifying edge.
    pub first_contact: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactSet {
    pub hop: u8,
    pub members: Vec<ContactMember>,
}

impl ContactSet {
    fn empty(hop: u8) -> Self {
        ContactSet {
            hop,
            members: Vec::new(),
        }
    }

    pub fn ids(&self) -> BTreeSet<DeviceId> {
        self.members.iter().map(|m| m.device_id).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Default)]
struct Accum {
    secs: u64,
    first: u64,
}

fn accumulate(acc: &mut BTreeMap<DeviceId, Accum>, v: DeviceId, secs: u64, first: u64) {
    let e = acc.entry(v).or_insert(Accum {
        secs: 0,
        first: u64::MAX,
    });
    e.secs += secs;
    e.first = e.first.min(first);
}

fn into_set(hop: u8, acc: BTreeMap<DeviceId, Accum>) -> ContactSet {
    ContactSet {
        hop,
        members: acc
            .into_iter()
            .map(|(device_id, a)| ContactMember {
                device_id,
                minutes: a.secs / MINUTE,
                first_contact: a.first,
            })
            .collect(),
    }
}

/// Two-hop time-respecting search from `seeds` over `[window.0, window.1)`.
///
/// Hop 1: devices whose near time with some seed reaches the predicate.
/// Hop 2: devices whose near time with a hop-1 device, counted only from that
/// device's first near contact with a seed onward (overlap allowed), reaches
/// the predicate. Seeds never appear in either set, hop 2 excludes hop 1, and
/// beacons are neither members nor relays.
pub fn t_bfs(
    graph: &IntervalGraph,
    seeds: &[DeviceId],
    window: (u64, u64),
    predicate: ContactPredicate,
) -> (ContactSet, ContactSet) {
    let (from, to) = window;
    if from >= to {
        return (ContactSet::empty(1), ContactSet::empty(2));
    }
    let seed_set: BTreeSet<DeviceId> = seeds.iter().copied().collect();
    let need = predicate.min_secs();

    let mut hop1: BTreeMap<DeviceId, Accum> = BTreeMap::new();
    for s in &seed_set {
        for &v in graph.neighbors(s) {
            if seed_set.contains(&v) || v.is_beacon() || s.is_beacon() {
                continue;
            }
            let edge = graph.edge(*s, v).expect("adjacent vertices share an edge");
            let near = edge.near_secs_in(predicate.delta, from, to);
            if near >= need && near > 0 {
                let first = edge
                    .first_near_in(predicate.delta, from, to)
                    .expect("positive near time");
                accumulate(&mut hop1, v, near, first);
            }
        }
    }

    let mut hop2: BTreeMap<DeviceId, Accum> = BTreeMap::new();
    for (b, acc) in &hop1 {
        let exposed_from = acc.first.max(from);
        for &c in graph.neighbors(b) {
            if seed_set.contains(&c) || hop1.contains_key(&c) || c.is_beacon() {
                continue;
            }
            let edge = graph.edge(*b, c).expect("adjacent vertices share an edge");
            let near = edge.near_secs_in(predicate.delta, exposed_from, to);
            if near >= need && near > 0 {
                let first = edge
                    .first_near_in(predicate.delta, exposed_from, to)
                    .expect("positive near time");
                accumulate(&mut hop2, c, near, first);
            }
        }
    }
    (into_set(1, hop1), into_set(2, hop2))
}

pub fn degree_centrality(graph: &IntervalGraph) -> BTreeMap<DeviceId, usize> {
    graph
        .vertices
        .iter()
        .map(|v| (*v, graph.adjacency.get(v).map_or(0, BTreeSet::len)))
        .collect()
}

pub const SNAPSHOT_FORMAT: &str = "interval-graph/v1";

/// JSON container for a built graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub format: String,
    pub window_start: u64,
    pub window_end: u64,
    pub vertices: Vec<DeviceId>,
    pub edges: Vec<SnapshotEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEdge {
    pub a: DeviceId,
    pub b: DeviceId,
    pub start: u64,
    pub end: u64,
    pub subintervals: Vec<SubInterval>,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("unsupported snapshot format {0:?}")]
    Format(String),
    #[error("edge {0}-{1} references an unknown vertex")]
    DanglingEdge(DeviceId, DeviceId),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl IntervalGraph {
    pub fn to_snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            window_start: self.start,
            window_end: self.end,
            vertices: self.vertices.iter().copied().collect(),
            edges: self
                .edges
                .iter()
                .map(|(&(a, b), e)| SnapshotEdge {
                    a,
                    b,
                    start: e.start,
                    end: e.end,
                    subintervals: e.subintervals.clone(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: GraphSnapshot) -> Result<Self, SnapshotError> {
        if snap.format != SNAPSHOT_FORMAT {
            return Err(SnapshotError::Format(snap.format));
        }
        let vertices: BTreeSet<DeviceId> = snap.vertices.into_iter().collect();
        let mut edges = BTreeMap::new();
        for e in snap.edges {
            if !vertices.contains(&e.a) || !vertices.contains(&e.b) {
                return Err(SnapshotError::DanglingEdge(e.a, e.b));
            }
            edges.insert(
                pair(e.a, e.b),
                EdgeAnnotation {
                    start: e.start,
                    end: e.end,
                    subintervals: e.subintervals,
                },
            );
        }
        Ok(Self::from_parts(snap.window_start, snap.window_end, vertices, edges))
    }

    pub fn to_json(&self) -> Result<String, SnapshotError> {
        Ok(serde_json::to_string(&self.to_snapshot())?)
    }

    pub fn from_json(text: &str) -> Result<Self, SnapshotError> {
        Self::from_snapshot(serde_json::from_str(text)?)
    }
}
