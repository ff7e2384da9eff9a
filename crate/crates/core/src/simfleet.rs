//! Simulated phones and beacons driving the ingest service minute by minute.
//!
//! Each phone scans once a minute while Bluetooth is on, buffers scan records,
//! uploads the buffer every upload interval (keeping it on failure), sends an
//! hourly liveliness report and, when sharing, a GPS ping every few minutes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::ManualClock;
use crate::geohash;
use crate::ingest::{GpsRequest, IngestError, IngestService, LivelinessRequest, RegisterRequest};
use crate::wire::{self, beacon_device_id, Contact, ContactBatch, DeviceId, DeviceKey, ScanRecord, SignedRequest};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("registering device {device}: {source}")]
    Registration { device: String, source: IngestError },
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(String),
}

/// Log-distance path loss with Gaussian shadowing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RssiModel {
    /// Mean RSSI at 1 m, dBm.
    pub tx_power: f64,
    pub path_loss_exponent: f64,
    pub sigma: f64,
    pub cutoff_m: f64,
    pub miss_probability: f64,
}

impl Default for RssiModel {
    fn default() -> Self {
        RssiModel {
            tx_power: -65.0,
            path_loss_exponent: 3.5,
            sigma: 12.0,
            cutoff_m: 12.0,
            miss_probability: 0.02,
        }
    }
}

impl RssiModel {
    pub fn expected(&self, distance_m: f64) -> f64 {
        self.tx_power - 10.0 * self.path_loss_exponent * distance_m.log10()
    }
}

/// One reading at `distance_m`, or `None` if the peer was not detected.
pub fn sample_rssi<R: Rng + ?Sized>(model: &RssiModel, distance_m: f64, rng: &mut R) -> Result<Option<i8>, SimError> {
    if distance_m.is_nan() || distance_m <= 0.0 {
        return Err(SimError::NonPositiveDistance(distance_m));
    }
    if distance_m > model.cutoff_m {
        return Ok(None);
    }
    if model.miss_probability > 0.0 && rng.gen_bool(model.miss_probability.min(1.0)) {
        return Ok(None);
    }
    let noise = if model.sigma > 0.0 {
        Normal::new(0.0, model.sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    };
    let v = (model.expected(distance_m) + noise).round();
    Ok(Some(v.clamp(f64::from(i8::MIN), f64::from(i8::MAX)) as i8))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub minute: u64,
    pub x: f64,
    pub y: f64,
}

/// Half-open minute range `[from, to)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteRange {
    pub from: u64,
    pub to: u64,
}

impl MinuteRange {
    fn contains(&self, m: u64) -> bool {
        self.from <= m && m < self.to
    }
}

fn default_true() -> bool {
    true
}

fn default_reliability() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(default)]
    pub phone: Option<String>,
    #[serde(default)]
    pub make_model: String,
    /// Piecewise-linear path in meters; at least one point.
    pub trajectory: Vec<Waypoint>,
    #[serde(default)]
    pub bluetooth_off: Vec<MinuteRange>,
    #[serde(default)]
    pub gps_sharing: bool,
    /// Chance that a single network request gets through.
    #[serde(default = "default_reliability")]
    pub reliability: f64,
    /// Minutes during which every request fails.
    #[serde(default)]
    pub offline: Vec<MinuteRange>,
    /// False for phones that can scan but not advertise (backgrounded iOS).
    #[serde(default = "default_true")]
    pub advertises: bool,
    /// Added to every reading this phone takes.
    #[serde(default)]
    pub rssi_bias: i8,
}

impl DeviceSpec {
    pub fn stationary(name: &str, x: f64, y: f64) -> Self {
        DeviceSpec {
            name: name.into(),
            phone: None,
            make_model: "generic-android".into(),
            trajectory: vec![Waypoint { minute: 0, x, y }],
            bluetooth_off: Vec::new(),
            gps_sharing: false,
            reliability: 1.0,
            offline: Vec::new(),
            advertises: true,
            rssi_bias: 0,
        }
    }

    pub fn position(&self, minute: u64) -> (f64, f64) {
        let t = &self.trajectory;
        let Some(first) = t.first() else {
            return (0.0, 0.0);
        };
        if minute <= first.minute {
            return (first.x, first.y);
        }
        for w in t.windows(2) {
            let (a, b) = (w[0], w[1]);
            if minute <= b.minute {
                let span = (b.minute - a.minute) as f64;
                let f = if span == 0.0 {
                    1.0
                } else {
                    (minute - a.minute) as f64 / span
                };
                return (a.x + f * (b.x - a.x), a.y + f * (b.y - a.y));
            }
        }
        let last = t[t.len() - 1];
        (last.x, last.y)
    }

    pub fn bluetooth_on(&self, minute: u64) -> bool {
        !self.bluetooth_off.iter().any(|r| r.contains(minute))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeaconSpec {
    pub major: u16,
    pub minor: u16,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// UNIX start time.
    pub start: u64,
    pub duration_minutes: u64,
    pub seed: u64,
    #[serde(default)]
    pub rssi: RssiModel,
    #[serde(default = "ScenarioConfig::default_upload")]
    pub upload_interval_minutes: u64,
    #[serde(default = "ScenarioConfig::default_gps")]
    pub gps_interval_minutes: u64,
    /// Plane origin for GPS pings.
    #[serde(default = "ScenarioConfig::default_origin")]
    pub origin: (f64, f64),
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub beacons: Vec<BeaconSpec>,
}

impl ScenarioConfig {
    fn default_upload() -> u64 {
        15
    }

    fn default_gps() -> u64 {
        5
    }

    fn default_origin() -> (f64, f64) {
        (12.9716, 77.5946)
    }

    pub fn empty(start: u64, duration_minutes: u64, seed: u64) -> Self {
        ScenarioConfig {
            start,
            duration_minutes,
            seed,
            rssi: RssiModel::default(),
            upload_interval_minutes: Self::default_upload(),
            gps_interval_minutes: Self::default_gps(),
            origin: Self::default_origin(),
            devices: Vec::new(),
            beacons: Vec::new(),
        }
    }

    /// Ten phones and one beacon on a campus: a desk cluster (0, 1, 2 and
    /// non-advertising 7), phone 1 walking over to a second cluster (3, 4)
    /// after an hour, a pair at 5 and 6, phone 8 with Bluetooth off for half
    /// an hour and phone 9 alone. Extra phones beyond ten stand in a grid.
    pub fn campus(start: u64, duration_minutes: u64, seed: u64, devices: usize, reliability: f64) -> Self {
        let mut cfg = Self::empty(start, duration_minutes, seed);
        let half = duration_minutes / 2;
        let spots: [(f64, f64); 10] = [
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (50.0, 0.0),
            (51.0, 0.0),
            (100.0, 0.0),
            (100.0, 1.5),
            (0.0, 2.0),
            (3.0, 3.0),
            (200.0, 200.0),
        ];
        for i in 0..devices {
            let (x, y) = spots
                .get(i)
                .copied()
                .unwrap_or((300.0 + 30.0 * (i % 10) as f64, 300.0 + 30.0 * (i / 10) as f64));
            let mut d = DeviceSpec::stationary(&format!("phone-{i}"), x, y);
            d.phone = Some(format!("+91 98450 {:05}", i));
            d.make_model = if i % 3 == 0 { "pixel-3" } else { "galaxy-a50" }.into();
            d.reliability = reliability;
            d.gps_sharing = i % 2 == 1;
            match i {
                1 => {
                    d.trajectory = vec![
                        Waypoint { minute: 0, x, y },
                        Waypoint { minute: half, x, y },
                        Waypoint {
                            minute: half + 2,
                            x: 50.5,
                            y: 1.0,
                        },
                    ];
                }
                7 => {
                    d.advertises = false;
                    d.make_model = "iphone-xr".into();
                }
                8 => d.bluetooth_off = vec![MinuteRange { from: 20, to: 50 }],
                _ => {}
            }
            cfg.devices.push(d);
        }
        cfg.beacons.push(BeaconSpec {
            major: 1,
            minor: 7,
            x: 0.0,
            y: 0.5,
        });
        cfg
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.upload_interval_minutes == 0 || self.gps_interval_minutes == 0 {
            return Err(SimError::InvalidScenario("intervals must be positive".into()));
        }
        for d in &self.devices {
            if d.trajectory.is_empty() {
                return Err(SimError::InvalidScenario(format!("{} has no trajectory", d.name)));
            }
            if d.trajectory.windows(2).any(|w| w[1].minute < w[0].minute) {
                return Err(SimError::InvalidScenario(format!(
                    "{} trajectory is not ordered",
                    d.name
                )));
            }
            if !(0.0..=1.0).contains(&d.reliability) {
                return Err(SimError::InvalidScenario(format!(
                    "{} reliability outside [0, 1]",
                    d.name
                )));
            }
        }
        Ok(())
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ScenarioConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What the platform side looks like to a phone.
pub trait Transport: Sync {
    fn upload_contacts(&self, req: &SignedRequest, body: &[u8]) -> bool;
    fn send_gps(&self, req: &SignedRequest, gps: &GpsRequest) -> bool;
    fn send_liveliness(&self, req: &SignedRequest, body: &LivelinessRequest) -> bool;
}

impl Transport for IngestService {
    fn upload_contacts(&self, req: &SignedRequest, body: &[u8]) -> bool {
        self.add_contacts(req, body)
            .inspect_err(|e| log::warn!("upload from {} refused: {e}", req.device_id))
            .is_ok()
    }

    fn send_gps(&self, req: &SignedRequest, gps: &GpsRequest) -> bool {
        self.add_gps(req, gps).is_ok()
    }

    fn send_liveliness(&self, req: &SignedRequest, body: &LivelinessRequest) -> bool {
        self.add_liveliness(req, body).is_ok()
    }
}

/// Another radio visible during one minute.
#[derive(Debug, Clone, Copy)]
pub struct Peer {
    pub id: DeviceId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub scanned: bool,
    pub upload_attempted: bool,
    pub upload_ok: bool,
    pub gps_attempted: bool,
    pub gps_ok: bool,
    pub liveliness_sent: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub name: String,
    pub device_id: String,
    pub unique_id: String,
    pub invite_code: String,
    pub scans_emitted: u64,
    pub scans_failed: u64,
    pub records_emitted: u64,
    pub contacts_emitted: u64,
    pub batches_attempted: u64,
    pub batches_sent: u64,
    pub scans_delivered: u64,
    pub gps_sent: u64,
    pub gps_dropped: u64,
    pub liveliness_sent: u64,
    pub liveliness_pending: u64,
    pub buffered_at_end: u64,
}

/// One simulated phone.
pub struct DeviceSim {
    pub spec: DeviceSpec,
    pub id: DeviceId,
    key: DeviceKey,
    rng: ChaCha20Rng,
    /// Scans waiting for upload; each scan may span several records.
    buffer: Vec<Vec<ScanRecord>>,
    pending_liveliness: Vec<LivelinessRequest>,
    hour_performed: u64,
    hour_failed: u64,
    digest: Sha256,
    pub report: DeviceReport,
}

impl DeviceSim {
    pub fn new(spec: DeviceSpec, id: DeviceId, key: DeviceKey, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let report = DeviceReport {
            name: spec.name.clone(),
            device_id: id.to_string(),
            ..Default::default()
        };
        DeviceSim {
            spec,
            id,
            key,
            rng,
            buffer: Vec::new(),
            pending_liveliness: Vec::new(),
            hour_performed: 0,
            hour_failed: 0,
            digest: Sha256::new(),
            report,
        }
    }

    fn network_up(&mut self, minute: u64) -> bool {
        if self.spec.offline.iter().any(|r| r.contains(minute)) {
            return false;
        }
        self.spec.reliability >= 1.0 || self.rng.gen_bool(self.spec.reliability.max(0.0))
    }

    fn signed(&self, now: u64) -> SignedRequest {
        SignedRequest::sign(self.id, now, &self.key)
    }

    /// Everything the phone does during `minute`, which starts at `minute_start`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        minute: u64,
        minute_start: u64,
        now: u64,
        peers: &[Peer],
        scenario: &ScenarioConfig,
        transport: &dyn Transport,
    ) -> StepEvents {
        let mut ev = StepEvents::default();
        let (x, y) = self.spec.position(minute);

        if self.spec.bluetooth_on(minute) {
            let mut contacts = Vec::new();
            for p in peers.iter().filter(|p| p.id != self.id) {
                let d = ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt().max(0.1);
                if let Some(r) = sample_rssi(&scenario.rssi, d, &mut self.rng).expect("distance clamped positive") {
                    contacts.push(Contact {
                        device_id: p.id,
                        rssi: r.saturating_add(self.spec.rssi_bias),
                    });
                }
            }
            let epoch = (minute_start + 5) as u32;
            let records = wire::split_scan(epoch, &contacts);
            self.report.scans_emitted += 1;
            self.report.records_emitted += records.len() as u64;
            self.report.contacts_emitted += contacts.len() as u64;
            self.hour_performed += 1;
            self.buffer.push(records);
            ev.scanned = true;
        } else {
            self.report.scans_failed += 1;
            self.hour_failed += 1;
        }

        if (minute + 1).is_multiple_of(scenario.upload_interval_minutes) {
            ev.upload_attempted = true;
            ev.upload_ok = self.upload(minute, now, transport);
        }

        if self.spec.gps_sharing && minute.is_multiple_of(scenario.gps_interval_minutes) {
            ev.gps_attempted = true;
            let (lat, lon) = geohash::offset_meters(scenario.origin.0, scenario.origin.1, x, y);
            let gps = GpsRequest {
                lat,
                lon,
                timestamp: now,
            };
            ev.gps_ok = self.network_up(minute) && transport.send_gps(&self.signed(now), &gps);
            if ev.gps_ok {
                self.report.gps_sent += 1;
            } else {
                self.report.gps_dropped += 1;
            }
        }

        if (minute + 1).is_multiple_of(60) {
            self.close_hour(minute_start / 3600 * 3600, minute);
        }
        ev.liveliness_sent = self.flush_liveliness(minute, now, transport);
        ev
    }

    fn close_hour(&mut self, hour: u64, minute: u64) {
        let mut stats = serde_json::Map::new();
        stats.insert("scans_performed".into(), self.hour_performed.into());
        stats.insert("scans_failed".into(), self.hour_failed.into());
        stats.insert("bluetooth_on".into(), self.spec.bluetooth_on(minute).into());
        stats.insert("gps_on".into(), self.spec.gps_sharing.into());
        stats.insert("battery_pct".into(), (100u64.saturating_sub(minute / 20)).into());
        self.pending_liveliness.push(LivelinessRequest {
            hour: Some(hour),
            stats,
        });
        self.hour_performed = 0;
        self.hour_failed = 0;
    }

    fn flush_liveliness(&mut self, minute: u64, now: u64, transport: &dyn Transport) -> usize {
        let mut sent = 0;
        while let Some(report) = self.pending_liveliness.first() {
            let report = report.clone();
            if !(self.network_up(minute) && transport.send_liveliness(&self.signed(now), &report)) {
                break;
            }
            self.pending_liveliness.remove(0);
            self.report.liveliness_sent += 1;
            sent += 1;
        }
        sent
    }

    fn upload(&mut self, minute: u64, now: u64, transport: &dyn Transport) -> bool {
        let mut batch = ContactBatch::new(self.id);
        batch.records = self.buffer.iter().flatten().cloned().collect();
        let body = wire::encode_contact_batch(&batch).expect("records are pre-split");
        self.report.batches_attempted += 1;
        self.digest.update((body.len() as u64).to_be_bytes());
        self.digest.update(&body);
        let ok = self.network_up(minute) && transport.upload_contacts(&self.signed(now), &body);
        if ok {
            self.report.batches_sent += 1;
            self.report.scans_delivered += self.buffer.len() as u64;
            self.buffer.clear();
        }
        ok
    }

    /// End of run: flushes the buffer and the partial hour, retrying up to
    /// `attempts` times each.
    pub fn finish(&mut self, minute: u64, minute_start: u64, now: u64, transport: &dyn Transport, attempts: u32) {
        if self.hour_performed + self.hour_failed > 0 {
            self.close_hour(minute_start / 3600 * 3600, minute);
        }
        for _ in 0..attempts {
            if self.buffer.is_empty() || self.upload(minute, now, transport) {
                break;
            }
        }
        for _ in 0..attempts {
            self.flush_liveliness(minute, now, transport);
            if self.pending_liveliness.is_empty() {
                break;
            }
        }
        self.report.buffered_at_end = self.buffer.len() as u64;
        self.report.liveliness_pending = self.pending_liveliness.len() as u64;
    }

    /// SHA-256 over every upload body attempted so far.
    pub fn upload_digest(&self) -> String {
        hex(&self.digest.clone().finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub window_start: u64,
    pub window_end: u64,
    pub devices: Vec<DeviceReport>,
    pub beacons: Vec<String>,
    pub scans_emitted: u64,
    pub batches_sent: u64,
    pub gps_points: u64,
    pub liveliness_reports: u64,
    /// SHA-256 over the per-device upload digests, in device order.
    pub upload_digest: String,
}

impl RunReport {
    pub fn device(&self, name: &str) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.name == name)
    }
}

/// Registers every device, runs the scenario against `ingest`, and leaves
/// `clock` at the end of the run.
pub fn run_scenario(cfg: &ScenarioConfig, ingest: &IngestService, clock: &ManualClock) -> Result<RunReport, SimError> {
    cfg.validate()?;
    clock.set(cfg.start);
    let mut report = RunReport {
        window_start: cfg.start,
        window_end: cfg.start + cfg.duration_minutes * 60,
        ..Default::default()
    };
    if cfg.devices.is_empty() && cfg.beacons.is_empty() {
        return Ok(report);
    }

    let codes = ingest.identity().issue_invite_codes(cfg.devices.len(), cfg.start);
    let mut sims = Vec::with_capacity(cfg.devices.len());
    for (i, (spec, code)) in cfg.devices.iter().zip(&codes).enumerate() {
        let reg = ingest
            .register(
                &format!("sim/{}", spec.name),
                &RegisterRequest {
                    invite_code: code.0.clone(),
                    phone: spec.phone.clone(),
                    make_model: spec.make_model.clone(),
                },
            )
            .map_err(|source| SimError::Registration {
                device: spec.name.clone(),
                source,
            })?;
        let mut sim = DeviceSim::new(
            spec.clone(),
            reg.device_id,
            reg.device_key.clone(),
            cfg.seed,
            i as u64 + 1,
        );
        sim.report.unique_id = reg.unique_id.0.clone();
        sim.report.invite_code = code.0.clone();
        sims.push(sim);
    }
    let beacons: Vec<(DeviceId, f64, f64)> = cfg
        .beacons
        .iter()
        .map(|b| (beacon_device_id(b.major, b.minor), b.x, b.y))
        .collect();
    report.beacons = beacons.iter().map(|(id, _, _)| id.to_string()).collect();

    for minute in 0..cfg.duration_minutes {
        let minute_start = cfg.start + minute * 60;
        clock.set(minute_start + 30);
        let now = minute_start + 30;
        let mut peers: Vec<Peer> = beacons.iter().map(|&(id, x, y)| Peer { id, x, y }).collect();
        peers.extend(
            sims.iter()
                .filter(|s| s.spec.advertises && s.spec.bluetooth_on(minute))
                .map(|s| {
                    let (x, y) = s.spec.position(minute);
                    Peer { id: s.id, x, y }
                }),
        );
        std::thread::scope(|scope| {
            for sim in sims.iter_mut() {
                let peers = &peers;
                scope.spawn(move || sim.step(minute, minute_start, now, peers, cfg, ingest));
            }
        });
    }

    let last = cfg.duration_minutes.saturating_sub(1);
    let last_start = cfg.start + last * 60;
    clock.set(last_start + 59);
    for sim in sims.iter_mut() {
        sim.finish(last, last_start, last_start + 59, ingest, 1000);
    }

    let mut digest = Sha256::new();
    for sim in &sims {
        digest.update(sim.upload_digest().as_bytes());
        report.scans_emitted += sim.report.scans_emitted;
        report.batches_sent += sim.report.batches_sent;
        report.gps_points += sim.report.gps_sent;
        report.liveliness_reports += sim.report.liveliness_sent;
        report.devices.push(sim.report.clone());
    }
    report.upload_digest = hex(&digest.finalize());
    Ok(report)
}
