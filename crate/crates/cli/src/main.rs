use std::fs::{self, File};
use std::io::{BufReader, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use proxtrace_core::analytics::{
    density_heatmap, hourly_contact_buckets, neighbourhood_tree, social_distancing_score, ScoreParams,
};
use proxtrace_core::clock::{ManualClock, SystemClock};
use proxtrace_core::config::{PlatformConfig, SecretRef};
use proxtrace_core::edges::{CsvEdgeDir, EdgeSource};
use proxtrace_core::identity::IdentitySecrets;
use proxtrace_core::ingest::GpsPoint;
use proxtrace_core::platform::Platform;
use proxtrace_core::rssi::{calibrate, read_samples_csv, reference_fixture};
use proxtrace_core::sealing::OpeningKey;
use proxtrace_core::simfleet::{run_scenario, ScenarioConfig};
use proxtrace_core::tempgraph::{build_interval_graph, degree_centrality, IntervalGraph};
use proxtrace_core::wire::DeviceId;

#[derive(Parser)]
#[command(name = "proxtrace", version, about = "Proximity contact tracing platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve {
        #[arg(long, default_value = "proxtrace.toml")]
        config: PathBuf,
    },
    /// Run a simulated fleet into a fresh data directory.
    Simulate {
        /// Output directory; gets the data, a platform config and the opening key.
        #[arg(long)]
        data_dir: PathBuf,
        /// Scenario file (TOML, or JSON by extension). Without it the campus layout is used.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        devices: usize,
        #[arg(long, default_value_t = 240)]
        minutes: u64,
        /// UNIX start time.
        #[arg(long, default_value_t = 1_599_976_800)]
        start: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Chance that a single request gets through.
        #[arg(long, default_value_t = 1.0)]
        reliability: f64,
    },
    /// Extract edges for [from, to) from closed segments.
    Preprocess {
        #[arg(long, default_value = "proxtrace.toml")]
        config: PathBuf,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Run the periodic jobs once: pending extraction and the daily scores.
    Jobs {
        #[arg(long, default_value = "proxtrace.toml")]
        config: PathBuf,
    },
    /// Build the interval graph for a window and print it as JSON.
    BuildGraph {
        #[command(flatten)]
        window: Window,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Social distancing scores for a window (every device, or one).
    Score {
        #[command(flatten)]
        window: Window,
        #[arg(long)]
        device: Option<DeviceId>,
        #[arg(long, default_value_t = -78)]
        delta: i8,
        #[arg(long, default_value_t = 15)]
        min_minutes: u32,
        #[arg(long, default_value_t = 240)]
        background_minutes: u32,
    },
    /// Hourly contact buckets for the 24 hours ending at --at.
    Buckets {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        device: DeviceId,
        #[arg(long)]
        at: u64,
    },
    /// Anonymized two-level neighbourhood tree.
    Tree {
        #[command(flatten)]
        window: Window,
        #[arg(long)]
        device: DeviceId,
    },
    /// Banded density heatmap around a point.
    Heatmap {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long)]
        at: u64,
    },
    /// Calibrate the near/far RSSI threshold from `pair_id,distance_m,rssi` samples.
    Threshold {
        /// Sample CSV; the built-in reference fixture when omitted.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Write the threshold into this platform config as the scoring and tracing delta.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Window {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    from: u64,
    #[arg(long)]
    to: u64,
}

impl Window {
    fn graph(&self) -> Result<IntervalGraph> {
        if self.from >= self.to {
            bail!("--from must be before --to");
        }
        let rows = CsvEdgeDir(self.data_dir.join("edges")).rows_in(self.from, self.to)?;
        Ok(build_interval_graph(&rows, self.from, self.to))
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn print_text(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    print_text(&serde_json::to_string_pretty(v)?)
}

fn open_platform(config: &Path) -> Result<Platform> {
    let cfg = PlatformConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(Platform::open(cfg, Arc::new(SystemClock))?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn simulate(data_dir: &Path, scenario: ScenarioConfig, seed: u64) -> Result<()> {
    if data_dir.join("segments").exists() {
        bail!("{} already holds data; pick an empty directory", data_dir.display());
    }
    fs::create_dir_all(data_dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let opening = OpeningKey::generate(&mut rng);
    let mut salt = [0u8; 16];
    rng.fill_bytes(&mut salt);
    let device_salt = hex(&salt);
    rng.fill_bytes(&mut salt);
    let phone_salt = hex(&salt);

    let mut cfg = PlatformConfig::default();
    cfg.server.data_dir = data_dir.canonicalize()?;
    cfg.secrets.device_salt = SecretRef::Inline(device_salt.clone());
    cfg.secrets.phone_salt = SecretRef::Inline(phone_salt.clone());
    cfg.secrets.sealing_key = SecretRef::Inline(opening.sealing_key().to_base64());
    cfg.save(&data_dir.join("platform.toml"))?;
    fs::write(data_dir.join("opening-key.b64"), opening.to_base64())?;

    let secrets = IdentitySecrets {
        device_salt: device_salt.into_bytes(),
        phone_salt,
        sealing_key: opening.sealing_key(),
    };
    let clock = ManualClock::new(scenario.start);
    let platform = Platform::with_secrets(cfg.clone(), secrets, Arc::new(clock.clone()), data_dir, Some(seed))?;
    let report = run_scenario(&scenario, &platform.ingest, &clock)?;
    platform.save_identity()?;
    // Close the last segment so everything is extracted.
    clock.set(report.window_end + cfg.ingest.segment_secs);
    let extracted = platform.preprocess_pending()?;
    fs::write(data_dir.join("run-report.json"), serde_json::to_vec_pretty(&report)?)?;
    eprintln!(
        "simulated {} devices for {} minutes: {} scans, {} batches, {} edge files",
        report.devices.len(),
        scenario.duration_minutes,
        report.scans_emitted,
        report.batches_sent,
        extracted.len()
    );
    print_json(&report)
}

#[derive(Serialize)]
struct ScoreRow {
    device_id: DeviceId,
    score: u8,
    proximate: usize,
    background: usize,
    degree: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { config } => {
            let platform = Arc::new(open_platform(&config)?);
            tokio::runtime::Runtime::new()?.block_on(proxtrace_server::serve(platform))?;
        }
        Command::Simulate {
            data_dir,
            scenario,
            devices,
            minutes,
            start,
            seed,
            reliability,
        } => {
            let sc = match scenario {
                Some(path) => ScenarioConfig::load(&path)?,
                None => ScenarioConfig::campus(start, minutes, seed, devices, reliability),
            };
            let seed = sc.seed;
            simulate(&data_dir, sc, seed)?;
        }
        Command::Preprocess { config, from, to } => {
            let platform = open_platform(&config)?;
            match (from, to) {
                (Some(f), Some(t)) if f < t => print_json(&platform.ingest.run_preprocess(f, t)?)?,
                (None, None) => print_json(&platform.preprocess_pending()?)?,
                _ => bail!("give both --from and --to (from < to), or neither for pending segments"),
            }
        }
        Command::Jobs { config } => {
            let platform = open_platform(&config)?;
            proxtrace_server::run_jobs_once(&platform)?;
        }
        Command::BuildGraph { window, out } => {
            let g = window.graph()?;
            let json = g.to_json()?;
            match out {
                Some(path) => fs::write(&path, json)?,
                None => print_text(&json)?,
            }
            eprintln!("{} vertices, {} edges", g.vertex_count(), g.edge_count());
        }
        Command::Score {
            window,
            device,
            delta,
            min_minutes,
            background_minutes,
        } => {
            let params = ScoreParams::new(delta, min_minutes, background_minutes)?;
            let g = window.graph()?;
            let degrees = degree_centrality(&g);
            let rows: Vec<ScoreRow> = g
                .vertices()
                .iter()
                .filter(|d| !d.is_beacon() && device.is_none_or(|x| x == **d))
                .map(|&d| {
                    let r = social_distancing_score(&g, d, params);
                    ScoreRow {
                        device_id: d,
                        score: r.score,
                        proximate: r.proximate.len(),
                        background: r.background.len(),
                        degree: degrees.get(&d).copied().unwrap_or(0),
                    }
                })
                .collect();
            print_json(&rows)?;
        }
        Command::Buckets { data_dir, device, at } => {
            let window = Window {
                data_dir,
                from: (at / 3600 * 3600).saturating_sub(23 * 3600),
                to: at + 1,
            };
            print_json(&hourly_contact_buckets(&window.graph()?, device, at))?;
        }
        Command::Tree { window, device } => {
            print_json(&neighbourhood_tree(&window.graph()?, device).anonymized())?;
        }
        Command::Heatmap { data_dir, lat, lon, at } => {
            let path = data_dir.join("gps.jsonl");
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let points: Vec<GpsPoint> = serde_json::Deserializer::from_reader(BufReader::new(file))
                .into_iter()
                .collect::<Result<_, _>>()?;
            print_json(&density_heatmap(&points, (lat, lon), at))?;
        }
        Command::Threshold { samples, write_config } => {
            let sets = match samples {
                Some(path) => {
                    read_samples_csv(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?
                }
                None => reference_fixture(),
            };
            let t = calibrate(&sets)?;
            print_json(&serde_json::json!({
                "threshold_dbm": t.rssi,
                "true_positive": t.true_positive,
                "false_positive": t.false_positive,
                "separation": t.separation(),
            }))?;
            if let Some(path) = write_config {
                let mut cfg = if path.exists() {
                    PlatformConfig::load(&path)?
                } else {
                    PlatformConfig::default()
                };
                cfg.scoring.delta = t.rssi;
                cfg.tracing.delta = t.rssi;
                cfg.save(&path)?;
                eprintln!("wrote delta {} to {}", t.rssi, path.display());
            }
        }
    }
    Ok(())
}
