//! Social-distancing scores, hourly contact buckets, proximity alerts,
//! neighbourhood trees and density heatmaps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geohash::{self, CELL_PRECISION};
use crate::ingest::{Alert, GpsPoint, LivelinessReport};
use crate::tempgraph::{IntervalGraph, MINUTE};
use crate::wire::{Contact, DeviceId};

const HOUR: u64 = 3600;
const DAY: u64 = 86_400;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamsError {
    #[error("signal threshold must be negative, got {0}")]
    Delta(i8),
    #[error("minimum contact duration ({min}) must be below background duration ({background})")]
    Durations { min: u32, background: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub delta: i8,
    pub min_contact_minutes: u32,
    pub background_minutes: u32,
}

impl ScoreParams {
    pub fn new(delta: i8, min_contact_minutes: u32, background_minutes: u32) -> Result<Self, ParamsError> {
        if delta >= 0 {
            return Err(ParamsError::Delta(delta));
        }
        if min_contact_minutes >= background_minutes {
            return Err(ParamsError::Durations {
                min: min_contact_minutes,
                background: background_minutes,
            });
        }
        Ok(ScoreParams {
            delta,
            min_contact_minutes,
            background_minutes,
        })
    }
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            delta: -78,
            min_contact_minutes: 15,
            background_minutes: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub device_id: DeviceId,
    pub p: usize,
    pub score: u8,
    pub background: BTreeSet<DeviceId>,
    pub proximate: BTreeSet<DeviceId>,
}

/// Daily score over a 24 h graph. Neighbours seen for at least the
/// background duration are set aside first; of the rest, those with at least
/// the minimum near-contact duration count towards `p`. Beacons are ignored.
pub fn social_distancing_score(graph: &IntervalGraph, device: DeviceId, params: ScoreParams) -> ScoreResult {
    let (from, to) = graph.window();
    let mut background = BTreeSet::new();
    let mut proximate = BTreeSet::new();
    for &n in graph.neighbors(&device) {
        if n.is_beacon() {
            continue;
        }
        let edge = graph.edge(device, n).expect("neighbours share an edge");
        if edge.observed_secs_in(from, to) >= u64::from(params.background_minutes) * MINUTE {
            background.insert(n);
        } else if edge.near_secs_in(params.delta, from, to) >= u64::from(params.min_contact_minutes) * MINUTE {
            proximate.insert(n);
        }
    }
    let p = proximate.len();
    ScoreResult {
        device_id: device,
        p,
        score: 10usize.saturating_sub(p) as u8,
        background,
        proximate,
    }
}

/// The 24 h window ending at the most recent local midnight.
pub fn daily_score_window(now: u64, utc_offset_minutes: i32) -> (u64, u64) {
    let offset = i64::from(utc_offset_minutes) * 60;
    let local = now as i64 + offset;
    let midnight_local = local.div_euclid(DAY as i64) * DAY as i64;
    let end = (midnight_local - offset).max(0) as u64;
    (end.saturating_sub(DAY), end)
}

/// Score alerts for every non-beacon vertex, valid for the following day.
pub fn daily_score_alerts(graph: &IntervalGraph, params: ScoreParams, now: u64) -> Vec<Alert> {
    graph
        .vertices()
        .iter()
        .filter(|d| !d.is_beacon())
        .map(|&d| {
            let r = social_distancing_score(graph, d, params);
            Alert::new(
                d,
                "Your social distancing score",
                format!("Your social distancing score for yesterday is {}/10.", r.score),
                "social-distancing-score",
                now,
                now + DAY,
            )
            .with_payload(serde_json::json!({ "social_distancing_score": r.score }))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourBucket {
    pub hour_start: u64,
    /// Neighbours seen for [1, 10) minutes in the hour.
    pub under_10: usize,
    /// [10, 20] minutes.
    pub from_10_to_20: usize,
    /// (20, 60] minutes.
    pub over_20: usize,
}

/// 24 hourly rows, oldest first, the last being the hour containing `now`.
pub fn hourly_contact_buckets(graph: &IntervalGraph, device: DeviceId, now: u64) -> Vec<HourBucket> {
    let last_hour = now / HOUR * HOUR;
    let first_hour = last_hour.saturating_sub(23 * HOUR);
    let mut rows: Vec<HourBucket> = (0..24)
        .map(|k| HourBucket {
            hour_start: first_hour + k * HOUR,
            under_10: 0,
            from_10_to_20: 0,
            over_20: 0,
        })
        .collect();
    for &n in graph.neighbors(&device) {
        if n.is_beacon() {
            continue;
        }
        let edge = graph.edge(device, n).expect("neighbours share an edge");
        for row in rows.iter_mut() {
            let minutes = edge.observed_secs_in(row.hour_start, row.hour_start + HOUR) / MINUTE;
            match minutes {
                0 => {}
                1..=9 => row.under_10 += 1,
                10..=20 => row.from_10_to_20 += 1,
                _ => row.over_20 += 1,
            }
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProximityAlertPolicy {
    pub delta: i8,
    pub trigger_count: usize,
    /// Lower bound on `trigger_count`, so an alert never reveals fewer users.
    pub privacy_floor: usize,
    pub cooldown_secs: u64,
}

impl Default for ProximityAlertPolicy {
    fn default() -> Self {
        ProximityAlertPolicy {
            delta: -78,
            trigger_count: 5,
            privacy_floor: 3,
            cooldown_secs: HOUR,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProximityAlertState {
    pub last_fired: Option<u64>,
}

/// Checks one minute's scan; fires at most once per cooldown period.
pub fn proximity_alert(
    device: DeviceId,
    scan_epoch: u64,
    contacts: &[Contact],
    policy: &ProximityAlertPolicy,
    state: &mut ProximityAlertState,
) -> Option<Alert> {
    let trigger = policy.trigger_count.max(policy.privacy_floor);
    let near: BTreeSet<DeviceId> = contacts
        .iter()
        .filter(|c| !c.device_id.is_beacon() && c.rssi >= policy.delta)
        .map(|c| c.device_id)
        .collect();
    if near.len() < trigger {
        return None;
    }
    if state.last_fired.is_some_and(|t| scan_epoch < t + policy.cooldown_secs) {
        return None;
    }
    state.last_fired = Some(scan_epoch);
    Some(Alert::new(
        device,
        "Crowd nearby",
        format!("{trigger} or more people were detected within about 2 m of you."),
        "proximity",
        scan_epoch,
        scan_epoch + policy.cooldown_secs,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLeaf {
    pub device_id: DeviceId,
    pub minutes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeBranch {
    pub device_id: DeviceId,
    pub minutes: u64,
    pub children: Vec<TreeLeaf>,
}

/// Depth-2 contact tree. Only root→hop-1 and hop-1→child links exist; edges
/// among hop-1 nodes or to other hop-2 nodes are not represented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighbourhoodTree {
    pub root: DeviceId,
    pub children: Vec<TreeBranch>,
}

impl NeighbourhoodTree {
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|b| 1 + b.children.len()).sum::<usize>()
    }

    /// `(parent, child, minutes)` for every link in the tree.
    pub fn edges(&self) -> Vec<(DeviceId, DeviceId, u64)> {
        let mut out = Vec::new();
        for b in &self.children {
            out.push((self.root, b.device_id, b.minutes));
            for leaf in &b.children {
                out.push((b.device_id, leaf.device_id, leaf.minutes));
            }
        }
        out
    }

    /// The same shape with device ids replaced by opaque labels; `"me"` is
    /// the root. This is the form served to apps.
    pub fn anonymized(&self) -> AnonymousTree {
        let mut next = 0;
        let mut label = || {
            next += 1;
            format!("n{next}")
        };
        AnonymousTree {
            root: "me".into(),
            children: self
                .children
                .iter()
                .map(|b| AnonymousBranch {
                    label: label(),
                    minutes: b.minutes,
                    children: b
                        .children
                        .iter()
                        .map(|l| AnonymousLeaf {
                            label: label(),
                            minutes: l.minutes,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymousLeaf {
    pub label: String,
    pub minutes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymousBranch {
    pub label: String,
    pub minutes: u64,
    pub children: Vec<AnonymousLeaf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymousTree {
    pub root: String,
    pub children: Vec<AnonymousBranch>,
}

pub fn neighbourhood_tree(graph: &IntervalGraph, root: DeviceId) -> NeighbourhoodTree {
    let minutes = |a: DeviceId, b: DeviceId| graph.edge(a, b).map_or(0, |e| e.observed_secs() / MINUTE);
    let hop1: BTreeSet<DeviceId> = graph
        .neighbors(&root)
        .copied()
        .filter(|d| !d.is_beacon() && *d != root)
        .collect();

    // Each hop-2 node hangs under the hop-1 neighbour it spent longest with.
    let mut parent_of: BTreeMap<DeviceId, (u64, DeviceId)> = BTreeMap::new();
    for &b in &hop1 {
        for &c in graph.neighbors(&b) {
            if c == root || c.is_beacon() || hop1.contains(&c) {
                continue;
            }
            let m = minutes(b, c);
            match parent_of.get(&c) {
                Some(&(best, _)) if best >= m => {}
                _ => {
                    parent_of.insert(c, (m, b));
                }
            }
        }
    }

    let children = hop1
        .iter()
        .map(|&b| TreeBranch {
            device_id: b,
            minutes: minutes(root, b),
            children: parent_of
                .iter()
                .filter(|(_, &(_, p))| p == b)
                .map(|(&c, &(m, _))| TreeLeaf {
                    device_id: c,
                    minutes: m,
                })
                .collect(),
        })
        .collect();
    NeighbourhoodTree { root, children }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileCount {
    Exact(usize),
    FewerThanFive,
}

impl TileCount {
    pub fn banded(count: usize) -> Self {
        if count >= 5 {
            TileCount::Exact(count)
        } else {
            TileCount::FewerThanFive
        }
    }
}

impl Serialize for TileCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TileCount::Exact(n) => s.collect_str(n),
            TileCount::FewerThanFive => s.serialize_str("<5"),
        }
    }
}

impl<'de> Deserialize<'de> for TileCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "<5" {
            return Ok(TileCount::FewerThanFive);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 5 => Ok(TileCount::Exact(n)),
            _ => Err(serde::de::Error::custom(format!("invalid tile count {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatTile {
    pub geohash: String,
    pub display: TileCount,
}

pub const HEATMAP_SIDE_M: f64 = 1500.0;

/// Distinct-device counts per geohash-7 cell in a 1.5 × 1.5 km square around
/// `center`, over the 24 h before `now`. Cells without devices are omitted.
pub fn density_heatmap(points: &[GpsPoint], center: (f64, f64), now: u64) -> Vec<HeatTile> {
    let area = geohash::square_around(center.0, center.1, HEATMAP_SIDE_M);
    let cells: BTreeSet<String> = geohash::cells_covering(&area, CELL_PRECISION).into_iter().collect();
    let since = now.saturating_sub(DAY);
    let mut devices: BTreeMap<&str, BTreeSet<DeviceId>> = BTreeMap::new();
    for p in points {
        if p.timestamp < since || p.timestamp > now {
            continue;
        }
        if let Some(cell) = cells.get(p.geohash7.as_str()) {
            devices.entry(cell.as_str()).or_default().insert(p.device_id);
        }
    }
    devices
        .into_iter()
        .map(|(cell, set)| HeatTile {
            geohash: cell.to_string(),
            display: TileCount::banded(set.len()),
        })
        .collect()
}

pub const DAILY_SCAN_TARGET: u64 = 1000;
pub const SCANS_PER_DAY: u64 = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanProgress {
    pub scans: u64,
    pub target: u64,
    pub possible: u64,
}

/// Scans reported in liveliness over the 24 h before `now`.
pub fn scan_progress(reports: &[LivelinessReport], device: DeviceId, now: u64) -> ScanProgress {
    let since = now.saturating_sub(DAY);
    let scans = reports
        .iter()
        .filter(|r| r.device_id == device && r.hour >= since && r.hour < now)
        .filter_map(|r| r.stats.get("scans_performed").and_then(|v| v.as_u64()))
        .sum();
    ScanProgress {
        scans,
        target: DAILY_SCAN_TARGET,
        possible: SCANS_PER_DAY,
    }
}

pub fn scan_progress_alert(progress: ScanProgress, device: DeviceId, now: u64) -> Alert {
    Alert::new(
        device,
        "Daily scans",
        format!(
            "{} of {} possible scans in the last 24 hours (goal: {}).",
            progress.scans, progress.possible, progress.target
        ),
        "scan-progress",
        now,
        now + DAY,
    )
    .with_payload(serde_json::to_value(progress).expect("plain struct"))
}
