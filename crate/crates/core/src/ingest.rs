//! Device-facing services: registration, contact uploads, GPS, liveliness,
//! notifications and the analytics manifest, plus the edge-list extraction job.
//!
//! Data directory layout:
//!
//! ```text
//! segments/seg-<start>.bin   raw contact-batch bodies, appended back to back
//! segments/seg-<start>.idx   12 bytes per body: received_at (u64 BE), length (u32 BE)
//! edges/edges-<t0>-<t1>.csv  extracted edge list for window [t0, t1)
//! gps.jsonl                  GpsPoint per line (geohash-7 + sealed coordinates)
//! liveliness.jsonl           LivelinessReport per line; the last line per (device, hour) wins
//! ```
//!
//! Segments cover `[start, start + segment_secs)` of receive time and are
//! never modified once that interval has passed.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{proximity_alert, ProximityAlertPolicy, ProximityAlertState};
use crate::clock::Clock;
use crate::config::{AnalyticsEndpoint, PlatformConfig};
use crate::edges::{self, EdgeRow};
use crate::geohash::{self, GeohashError, CELL_PRECISION};
use crate::identity::{IdentityStore, Registration, RegistrationError};
use crate::sealing::{Sealed, SealingKey};
use crate::wire::{self, AuthReject, DecodeError, DeviceId, SignedRequest};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unauthorized: {0}")]
    Unauthorized(#[from] AuthReject),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("undecodable contact batch: {0}")]
    Decode(#[from] DecodeError),
    #[error("registration rejected: {0}")]
    Registration(#[from] RegistrationError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
}

impl IngestError {
    /// HTTP status class for the error.
    pub fn status(&self) -> u16 {
        match self {
            IngestError::Unauthorized(_) => 401,
            IngestError::BadRequest(_) | IngestError::Decode(_) => 400,
            IngestError::Registration(RegistrationError::Throttled) => 429,
            IngestError::Registration(RegistrationError::Sealing) | IngestError::Io(_) => 500,
            IngestError::Registration(_) => 403,
        }
    }
}

impl From<GeohashError> for IngestError {
    fn from(e: GeohashError) -> Self {
        IngestError::BadRequest(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    #[serde(default)]
    pub id: u64,
    pub device_id: DeviceId,
    pub title: String,
    pub content: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub valid_from: u64,
    pub valid_to: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

impl Alert {
    pub fn new(
        device_id: DeviceId,
        title: impl Into<String>,
        content: impl Into<String>,
        kind: impl Into<String>,
        valid_from: u64,
        valid_to: u64,
    ) -> Self {
        Alert {
            id: 0,
            device_id,
            title: title.into(),
            content: content.into(),
            kind: kind.into(),
            valid_from,
            valid_to,
            payload: None,
        }
    }

    pub fn with_payload(mut self, payload: serde_json::Value) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn is_valid_at(&self, now: u64) -> bool {
        self.valid_from <= now && now < self.valid_to
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub device_id: DeviceId,
    pub timestamp: u64,
    pub geohash7: String,
    pub sealed_coords: Sealed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivelinessReport {
    pub device_id: DeviceId,
    /// Start of the hour the statistics describe.
    pub hour: u64,
    pub stats: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub invite_code: String,
    #[serde(default)]
    pub phone: Option<String>,
    #[serde(default)]
    pub make_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinstallRequest {
    pub phone: String,
    pub pin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsRequest {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivelinessRequest {
    /// Defaults to the hour of the request timestamp.
    #[serde(default)]
    pub hour: Option<u64>,
    pub stats: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub bytes: usize,
}

/// Location of one stored batch body inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentEntry {
    pub received_at: u64,
    pub offset: u64,
    pub len: u32,
}

const IDX_ENTRY_LEN: usize = 12;

/// Append-only binary log of contact batches, rolled on fixed intervals.
pub struct SegmentLog {
    dir: PathBuf,
    segment_secs: u64,
    current: Mutex<Option<(u64, File, File)>>,
}

impl SegmentLog {
    pub fn open(dir: &Path, segment_secs: u64) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(SegmentLog {
            dir: dir.to_path_buf(),
            segment_secs,
            current: Mutex::new(None),
        })
    }

    pub fn segment_start(&self, t: u64) -> u64 {
        t / self.segment_secs * self.segment_secs
    }

    pub fn data_path(&self, start: u64) -> PathBuf {
        self.dir.join(format!("seg-{start}.bin"))
    }

    pub fn index_path(&self, start: u64) -> PathBuf {
        self.dir.join(format!("seg-{start}.idx"))
    }

    pub fn append(&self, received_at: u64, body: &[u8]) -> std::io::Result<()> {
        let start = self.segment_start(received_at);
        let mut current = self.current.lock().expect("segment writer lock");
        if current.as_ref().is_none_or(|(s, _, _)| *s != start) {
            let open = |p: PathBuf| OpenOptions::new().create(true).append(true).open(p);
            *current = Some((start, open(self.data_path(start))?, open(self.index_path(start))?));
        }
        let (_, data, index) = current.as_mut().expect("opened above");
        data.write_all(body)?;
        data.flush()?;
        let mut entry = [0u8; IDX_ENTRY_LEN];
        entry[..8].copy_from_slice(&received_at.to_be_bytes());
        entry[8..].copy_from_slice(&(body.len() as u32).to_be_bytes());
        index.write_all(&entry)?;
        index.flush()
    }

    /// Segment start times, ascending.
    pub fn segments(&self) -> std::io::Result<Vec<u64>> {
        let mut out: Vec<u64> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("seg-")?.strip_suffix(".bin")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// Segments whose interval ended at or before `now`.
    pub fn closed_segments(&self, now: u64) -> std::io::Result<Vec<u64>> {
        Ok(self
            .segments()?
            .into_iter()
            .filter(|s| s + self.segment_secs <= now)
            .collect())
    }

    pub fn data_len(&self, start: u64) -> std::io::Result<u64> {
        match fs::metadata(self.data_path(start)) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e),
        }
    }

    pub fn entries(&self, start: u64) -> std::io::Result<Vec<SegmentEntry>> {
        let mut raw = Vec::new();
        match File::open(self.index_path(start)) {
            Ok(mut f) => {
                f.read_to_end(&mut raw)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        }
        let mut offset = 0u64;
        Ok(raw
            .chunks_exact(IDX_ENTRY_LEN)
            .map(|c| {
                let received_at = u64::from_be_bytes(c[..8].try_into().expect("8 bytes"));
                let len = u32::from_be_bytes(c[8..].try_into().expect("4 bytes"));
                let e = SegmentEntry {
                    received_at,
                    offset,
                    len,
                };
                offset += u64::from(len);
                e
            })
            .collect())
    }

    pub fn read_segment(&self, start: u64) -> std::io::Result<Vec<u8>> {
        fs::read(self.data_path(start))
    }
}

/// A stored body that could not be turned into edge rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub segment: u64,
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessOutput {
    pub rows: Vec<EdgeRow>,
    pub skipped: Vec<SkippedEntry>,
}

/// Expands every scan record with `t0 <= epoch < t1` in the given segments
/// into one row per contact, sorted by timestamp then source.
pub fn preprocess_edges(log: &SegmentLog, segments: &[u64], t0: u64, t1: u64) -> std::io::Result<PreprocessOutput> {
    let mut out = PreprocessOutput::default();
    for &seg in segments {
        let data = log.read_segment(seg)?;
        for entry in log.entries(seg)? {
            let begin = entry.offset as usize;
            let end = begin + entry.len as usize;
            let Some(body) = data.get(begin..end) else {
                log::warn!("segment {seg}: entry at offset {begin} runs past end of data");
                out.skipped.push(SkippedEntry {
                    segment: seg,
                    offset: entry.offset,
                    reason: "entry runs past end of segment data".into(),
                });
                continue;
            };
            match wire::decode_contact_batch(body) {
                Ok(batch) => {
                    for record in &batch.records {
                        let ts = u64::from(record.epoch);
                        if ts < t0 || ts >= t1 {
                            continue;
                        }
                        out.rows.extend(record.contacts.iter().map(|c| EdgeRow {
                            ts,
                            src: batch.source,
                            sink: c.device_id,
                            rssi: c.rssi,
                        }));
                    }
                }
                Err(e) => {
                    let at = entry.offset + e.offset() as u64;
                    log::warn!("segment {seg}: corrupt batch, {e} (segment offset {at})");
                    out.skipped.push(SkippedEntry {
                        segment: seg,
                        offset: at,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    out.rows.sort_by_key(|r| (r.ts, r.src));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub csv_path: PathBuf,
    pub rows: usize,
    pub segments: usize,
    pub skipped: Vec<SkippedEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourlyScanSummary {
    pub hour: u64,
    pub reports: usize,
    pub scans_performed: u64,
    pub scans_failed: u64,
}

struct AlertSlot {
    alert: Alert,
    delivered: bool,
}

pub struct IngestService {
    cfg: PlatformConfig,
    identity: Arc<IdentityStore>,
    sealing_key: SealingKey,
    clock: Arc<dyn Clock>,
    data_dir: PathBuf,
    log: SegmentLog,
    gps: Mutex<Vec<GpsPoint>>,
    liveliness: Mutex<BTreeMap<(DeviceId, u64), LivelinessReport>>,
    alerts: Mutex<Vec<AlertSlot>>,
    manifest: RwLock<Vec<AnalyticsEndpoint>>,
    crowd: Mutex<BTreeMap<DeviceId, ProximityAlertState>>,
    rng: Mutex<ChaCha20Rng>,
}

impl IngestService {
    pub fn open(
        cfg: PlatformConfig,
        identity: Arc<IdentityStore>,
        sealing_key: SealingKey,
        clock: Arc<dyn Clock>,
        data_dir: &Path,
    ) -> Result<Self, IngestError> {
        fs::create_dir_all(data_dir)?;
        let log = SegmentLog::open(&data_dir.join("segments"), cfg.ingest.segment_secs)?;
        let gps: Vec<GpsPoint> = read_jsonl(&data_dir.join("gps.jsonl"))?;
        let liveliness = read_jsonl::<LivelinessReport>(&data_dir.join("liveliness.jsonl"))?
            .into_iter()
            .map(|r| ((r.device_id, r.hour), r))
            .collect();
        Ok(IngestService {
            manifest: RwLock::new(cfg.analytics.endpoints.clone()),
            cfg,
            identity,
            sealing_key,
            clock,
            data_dir: data_dir.to_path_buf(),
            log,
            gps: Mutex::new(gps),
            liveliness: Mutex::new(liveliness),
            alerts: Mutex::new(Vec::new()),
            crowd: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha20Rng::from_entropy()),
        })
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.cfg
    }

    pub fn identity(&self) -> &Arc<IdentityStore> {
        &self.identity
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn segment_log(&self) -> &SegmentLog {
        &self.log
    }

    pub fn edges_dir(&self) -> PathBuf {
        self.data_dir.join("edges")
    }

    pub fn authenticate(&self, req: &SignedRequest) -> Result<(), IngestError> {
        wire::verify_request(
            req,
            self.clock.now(),
            self.identity.device_salt(),
            self.cfg.auth.freshness_window_secs,
        )?;
        Ok(())
    }

    pub fn register(&self, source: &str, req: &RegisterRequest) -> Result<Registration, IngestError> {
        Ok(self.identity.register_device(
            source,
            &req.invite_code,
            req.phone.as_deref(),
            &req.make_model,
            self.clock.now(),
        )?)
    }

    pub fn reinstall(&self, source: &str, req: &ReinstallRequest) -> Result<Registration, IngestError> {
        Ok(self
            .identity
            .reinstall_device(source, &req.phone, &req.pin, self.clock.now())?)
    }

    pub fn add_contacts(&self, req: &SignedRequest, body: &[u8]) -> Result<Ack, IngestError> {
        self.authenticate(req)?;
        let batch = wire::decode_contact_batch(body)?;
        if batch.source != req.device_id {
            return Err(IngestError::BadRequest(
                "batch source id does not match the signing device".into(),
            ));
        }
        self.log.append(self.clock.now(), body)?;
        self.check_crowding(&batch);
        Ok(Ack {
            accepted: true,
            bytes: body.len(),
        })
    }

    /// Queues a crowd alert for the uploader when one of its scans saw too
    /// many phones nearby.
    fn check_crowding(&self, batch: &wire::ContactBatch) {
        let cfg = &self.cfg.proximity_alert;
        let policy = ProximityAlertPolicy {
            delta: self.cfg.scoring.delta,
            trigger_count: cfg.trigger_count,
            privacy_floor: cfg.privacy_floor,
            cooldown_secs: cfg.cooldown_secs,
        };
        let mut fired = Vec::new();
        {
            let mut crowd = self.crowd.lock().expect("crowd lock");
            let state = crowd.entry(batch.source).or_default();
            for r in &batch.records {
                fired.extend(proximity_alert(
                    batch.source,
                    u64::from(r.epoch),
                    &r.contacts,
                    &policy,
                    state,
                ));
            }
        }
        for alert in fired {
            self.enqueue_alert(alert);
        }
    }

    pub fn add_gps(&self, req: &SignedRequest, gps: &GpsRequest) -> Result<Ack, IngestError> {
        self.authenticate(req)?;
        let cell = geohash::encode(gps.lat, gps.lon, CELL_PRECISION)?;
        let plain = serde_json::to_vec(&(gps.lat, gps.lon)).expect("two floats");
        let sealed = {
            let mut rng = self.rng.lock().expect("rng lock");
            self.sealing_key
                .seal(&mut *rng, &plain)
                .map_err(|e| IngestError::BadRequest(e.to_string()))?
        };
        let point = GpsPoint {
            device_id: req.device_id,
            timestamp: gps.timestamp,
            geohash7: cell,
            sealed_coords: sealed,
        };
        let mut store = self.gps.lock().expect("gps lock");
        append_jsonl(&self.data_dir.join("gps.jsonl"), &point)?;
        store.push(point);
        Ok(Ack {
            accepted: true,
            bytes: 0,
        })
    }

    pub fn add_liveliness(&self, req: &SignedRequest, body: &LivelinessRequest) -> Result<Ack, IngestError> {
        self.authenticate(req)?;
        let hour = body.hour.unwrap_or(req.timestamp) / 3600 * 3600;
        let report = LivelinessReport {
            device_id: req.device_id,
            hour,
            stats: body.stats.clone(),
        };
        let mut store = self.liveliness.lock().expect("liveliness lock");
        append_jsonl(&self.data_dir.join("liveliness.jsonl"), &report)?;
        store.insert((report.device_id, hour), report);
        Ok(Ack {
            accepted: true,
            bytes: 0,
        })
    }

    /// Pending alerts valid now; each is handed out once.
    pub fn poll_notifications(&self, req: &SignedRequest) -> Result<Vec<Alert>, IngestError> {
        self.authenticate(req)?;
        let now = self.clock.now();
        let mut alerts = self.alerts.lock().expect("alerts lock");
        Ok(alerts
            .iter_mut()
            .filter(|s| !s.delivered && s.alert.device_id == req.device_id && s.alert.is_valid_at(now))
            .map(|s| {
                s.delivered = true;
                s.alert.clone()
            })
            .collect())
    }

    pub fn analytics_manifest(&self, req: &SignedRequest) -> Result<Vec<AnalyticsEndpoint>, IngestError> {
        self.authenticate(req)?;
        Ok(self.manifest.read().expect("manifest lock").clone())
    }

    pub fn set_manifest(&self, endpoints: Vec<AnalyticsEndpoint>) {
        *self.manifest.write().expect("manifest lock") = endpoints;
    }

    /// Queues an alert and returns its id.
    pub fn enqueue_alert(&self, mut alert: Alert) -> u64 {
        let mut alerts = self.alerts.lock().expect("alerts lock");
        alert.id = alerts.len() as u64 + 1;
        let id = alert.id;
        alerts.push(AlertSlot {
            alert,
            delivered: false,
        });
        id
    }

    pub fn gps_points(&self) -> Vec<GpsPoint> {
        self.gps.lock().expect("gps lock").clone()
    }

    pub fn liveliness_reports(&self) -> Vec<LivelinessReport> {
        self.liveliness
            .lock()
            .expect("liveliness lock")
            .values()
            .cloned()
            .collect()
    }

    pub fn liveliness_for(&self, device: DeviceId, hour: u64) -> Option<LivelinessReport> {
        self.liveliness
            .lock()
            .expect("liveliness lock")
            .get(&(device, hour))
            .cloned()
    }

    /// Per-hour totals for the operations dashboard.
    pub fn liveliness_summary(&self) -> Vec<HourlyScanSummary> {
        let mut by_hour: BTreeMap<u64, HourlyScanSummary> = BTreeMap::new();
        for r in self.liveliness.lock().expect("liveliness lock").values() {
            let s = by_hour.entry(r.hour).or_insert(HourlyScanSummary {
                hour: r.hour,
                ..Default::default()
            });
            let num = |k: &str| r.stats.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
            s.reports += 1;
            s.scans_performed += num("scans_performed");
            s.scans_failed += num("scans_failed");
        }
        by_hour.into_values().collect()
    }

    /// Extracts edges for `[t0, t1)` from all closed segments into
    /// `edges/edges-<t0>-<t1>.csv`. Re-running overwrites the same file with
    /// the same content.
    pub fn run_preprocess(&self, t0: u64, t1: u64) -> Result<PreprocessReport, IngestError> {
        let segments = self.log.closed_segments(self.clock.now())?;
        let out = preprocess_edges(&self.log, &segments, t0, t1)?;
        let dir = self.edges_dir();
        fs::create_dir_all(&dir)?;
        let csv_path = dir.join(format!("edges-{t0}-{t1}.csv"));
        let tmp = csv_path.with_extension("csv.tmp");
        {
            let file = File::create(&tmp)?;
            edges::write_csv(std::io::BufWriter::new(file), &out.rows)
                .map_err(|e| IngestError::Io(std::io::Error::other(e.to_string())))?;
        }
        fs::rename(&tmp, &csv_path)?;
        Ok(PreprocessReport {
            csv_path,
            rows: out.rows.len(),
            segments: segments.len(),
            skipped: out.skipped,
        })
    }
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value).map_err(std::io::Error::from)?;
    line.push(b'\n');
    f.write_all(&line)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::from)?);
    }
    Ok(out)
}
