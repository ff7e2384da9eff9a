//! Wires the services together over one data directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::analytics::{daily_score_alerts, daily_score_window};
use crate::clock::Clock;
use crate::config::{ConfigError, PlatformConfig};
use crate::contact_tracing::TracingService;
use crate::edges::{CsvEdgeDir, EdgeFileError, EdgeSource};
use crate::identity::{IdentitySecrets, IdentityStore, PersistError};
use crate::ingest::{preprocess_edges, IngestError, IngestService, PreprocessReport};
use crate::sealing::{SealError, SealingKey};
use crate::tempgraph::{build_interval_graph, IntervalGraph};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sealing key: {0}")]
    SealingKey(#[from] SealError),
    #[error("identity store: {0}")]
    Identity(#[from] PersistError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Edges(#[from] EdgeFileError),
}

pub struct Platform {
    pub config: PlatformConfig,
    pub clock: Arc<dyn Clock>,
    pub identity: Arc<IdentityStore>,
    pub ingest: Arc<IngestService>,
    pub tracing: Arc<TracingService>,
    data_dir: PathBuf,
    /// End of the last window scores were pushed for.
    last_scored: Mutex<Option<u64>>,
}

impl Platform {
    /// Resolves the configured secrets and opens `config.server.data_dir`.
    pub fn open(config: PlatformConfig, clock: Arc<dyn Clock>) -> Result<Self, PlatformError> {
        let sealing_key = SealingKey::from_base64(config.secrets.sealing_key.resolve()?.trim())?;
        let secrets = IdentitySecrets {
            device_salt: config.secrets.device_salt.resolve()?.into_bytes(),
            phone_salt: config.secrets.phone_salt.resolve()?,
            sealing_key,
        };
        let data_dir = config.server.data_dir.clone();
        Self::with_secrets(config, secrets, clock, &data_dir, None)
    }

    /// Like [`Platform::open`] with explicit secrets and an optional RNG seed
    /// for the identity store.
    pub fn with_secrets(
        config: PlatformConfig,
        secrets: IdentitySecrets,
        clock: Arc<dyn Clock>,
        data_dir: &Path,
        seed: Option<u64>,
    ) -> Result<Self, PlatformError> {
        let sealing_key = secrets.sealing_key.clone();
        let identity = Arc::new(match seed {
            Some(s) => IdentityStore::with_seed(config.identity.clone(), secrets, s),
            None => IdentityStore::new(config.identity.clone(), secrets),
        });
        let identity_dir = data_dir.join("identity");
        if identity_dir.join("codes.jsonl").exists() {
            identity.load(&identity_dir)?;
        }
        let ingest = Arc::new(IngestService::open(
            config.clone(),
            identity.clone(),
            sealing_key,
            clock.clone(),
            data_dir,
        )?);
        let edges: Arc<dyn EdgeSource> = Arc::new(CsvEdgeDir(ingest.edges_dir()));
        let tracing = Arc::new(TracingService::new(
            config.tracing.clone(),
            identity.clone(),
            edges,
            clock.clone(),
        ));
        Ok(Platform {
            config,
            clock,
            identity,
            ingest,
            tracing,
            data_dir: data_dir.to_path_buf(),
            last_scored: Mutex::new(None),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn save_identity(&self) -> Result<(), PlatformError> {
        Ok(self.identity.save(&self.data_dir.join("identity"))?)
    }

    /// Interval graph over `[t0, t1)` from the extracted edge files.
    pub fn graph(&self, t0: u64, t1: u64) -> Result<IntervalGraph, PlatformError> {
        let rows = CsvEdgeDir(self.ingest.edges_dir()).rows_in(t0, t1)?;
        Ok(build_interval_graph(&rows, t0, t1))
    }

    /// Extracts edges for every newly closed segment. Each epoch window
    /// touched by a new segment is re-extracted in full, so batches uploaded
    /// late land in the right window. Processed segments are recorded in
    /// `preprocessed-segments.txt`.
    pub fn preprocess_pending(&self) -> Result<Vec<PreprocessReport>, PlatformError> {
        let now = self.clock.now();
        let seg = self.config.ingest.segment_secs;
        let log = self.ingest.segment_log();
        let ledger = self.data_dir.join("preprocessed-segments.txt");
        let done: BTreeSet<u64> = match fs::read_to_string(&ledger) {
            Ok(text) => text.lines().filter_map(|l| l.trim().parse().ok()).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeSet::new(),
            Err(e) => return Err(IngestError::from(e).into()),
        };
        let fresh: Vec<u64> = log
            .closed_segments(now)
            .map_err(IngestError::from)?
            .into_iter()
            .filter(|s| !done.contains(s))
            .collect();
        if fresh.is_empty() {
            return Ok(Vec::new());
        }
        let touched: BTreeSet<u64> = preprocess_edges(log, &fresh, 0, u64::MAX)
            .map_err(IngestError::from)?
            .rows
            .iter()
            .map(|r| r.ts / seg * seg)
            .collect();
        let mut reports = Vec::new();
        for w in touched {
            reports.push(self.ingest.run_preprocess(w, w + seg)?);
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ledger)
            .map_err(IngestError::from)?;
        for s in fresh {
            writeln!(f, "{s}").map_err(IngestError::from)?;
        }
        Ok(reports)
    }

    /// Pushes yesterday's score to every device seen in that window. Runs
    /// once per window; later calls for the same day return 0.
    pub fn run_daily_scores(&self) -> Result<usize, PlatformError> {
        let now = self.clock.now();
        let (from, to) = daily_score_window(now, self.config.scoring.utc_offset_minutes);
        let mut last = self.last_scored.lock().expect("score lock");
        if *last == Some(to) {
            return Ok(0);
        }
        let params = self.config.scoring.params()?;
        let graph = self.graph(from, to)?;
        let alerts = daily_score_alerts(&graph, params, now);
        let n = alerts.len();
        for a in alerts {
            self.ingest.enqueue_alert(a);
        }
        *last = Some(to);
        log::info!("pushed {n} daily scores for window {from}..{to}");
        Ok(n)
    }
}
