//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proxtrace_core::analytics::{density_heatmap, neighbourhood_tree, social_distancing_score, ScoreParams, TileCount};
use proxtrace_core::clock::ManualClock;
use proxtrace_core::config::{IdentityConfig, PlatformConfig, TracingConfig};
use proxtrace_core::contact_tracing::{Clinical, TraceError, TraceState, TraceSubmission, TracingService};
use proxtrace_core::edges::{EdgeRow, EdgeSource};
use proxtrace_core::geohash;
use proxtrace_core::identity::{hash_phone, normalize_phone, IdentityStore, Registration};
use proxtrace_core::ingest::GpsPoint;
use proxtrace_core::rssi::{self, EmpiricalCdf, DEFAULT_SUPPORT};
use proxtrace_core::sealing::Sealed;
use proxtrace_core::simfleet::{run_scenario, ScenarioConfig};
use proxtrace_core::tempgraph::{build_interval_graph, t_bfs, ContactPredicate, Signal};
use proxtrace_core::wire::{
    self, beacon_device_id, verify_request, Contact, ContactBatch, DeviceId, ScanRecord, SignedRequest,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::*;

fn random_id(rng: &mut impl Rng) -> DeviceId {
    DeviceId::from_random_bytes(rng.gen())
}

fn random_batch(rng: &mut impl Rng) -> ContactBatch {
    let mut batch = ContactBatch::new(random_id(rng));
    for _ in 0..rng.gen_range(0..6) {
        let n = if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..40) };
        batch.records.push(ScanRecord {
            epoch: rng.gen(),
            contacts: (0..n)
                .map(|_| Contact {
                    device_id: random_id(rng),
                    rssi: rng.gen(),
                })
                .collect(),
        });
    }
    batch
}

fn criterion_1_wire_codec() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let batch = random_batch(&mut rng);
        let bytes = wire::encode_contact_batch(&batch).unwrap();
        let expected_len = 16 + batch.records.iter().map(|r| 5 + 17 * r.contacts.len()).sum::<usize>();
        assert_eq!(bytes.len(), expected_len);
        let decoded = wire::decode_contact_batch(&bytes).unwrap();
        assert_eq!(decoded, batch);
        assert_eq!(wire::encode_contact_batch(&decoded).unwrap(), bytes);
    }
    let contacts: Vec<Contact> = (0..300u16)
        .map(|i| Contact {
            device_id: DeviceId::from_random_bytes([i as u8; 16]),
            rssi: -70,
        })
        .collect();
    let records = wire::split_scan(1_600_000_000, &contacts);
    assert_eq!(
        records.iter().map(|r| r.contacts.len()).collect::<Vec<_>>(),
        vec![255, 45]
    );
    let mut batch = ContactBatch::new(dev(1));
    batch.records = records;
    assert_eq!(wire::encode_contact_batch(&batch).unwrap().len(), 5126);
    assert!(
        started.elapsed() < Duration::from_secs(5),
        "took {:?}",
        started.elapsed()
    );
}

fn criterion_2_auth() {
    let dir = tempfile::tempdir().unwrap();
    let now = 1_600_000_000;
    let clock = ManualClock::new(now);
    let p = platform(dir.path(), &clock, 2);
    let salt = p.identity.device_salt().to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (mut accepted, mut tampered_rejected, mut stale_rejected) = (0, 0, 0);
    for _ in 0..1000 {
        let id = random_id(&mut rng);
        let key = wire::derive_device_key(&id, &salt);
        let ts = now - 300 + rng.gen_range(0..=600);
        let req = SignedRequest::sign(id, ts, &key);
        if verify_request(&req, now, &salt, 300).is_ok() && p.ingest.authenticate(&req).is_ok() {
            accepted += 1;
        }

        let mut bad = req.clone();
        match rng.gen_range(0..3) {
            0 => {
                let mut sig = bad.signature.into_bytes();
                let i = rng.gen_range(0..sig.len());
                let orig = sig[i];
                while sig[i] == orig {
                    sig[i] = *b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"
                        .choose(&mut rng)
                        .unwrap();
                }
                bad.signature = String::from_utf8(sig).unwrap();
            }
            1 => {
                let i = rng.gen_range(0..16);
                bad.device_id.0[i] ^= rng.gen_range(1..=255u8);
            }
            _ => bad.timestamp ^= 1 << rng.gen_range(0..8),
        }
        if verify_request(&bad, now, &salt, 300).is_err() && p.ingest.authenticate(&bad).is_err() {
            tampered_rejected += 1;
        }

        let age = rng.gen_range(301..1_000_000);
        let stale_ts = if rng.gen_bool(0.5) { now - age } else { now + age };
        let stale = SignedRequest::sign(id, stale_ts, &key);
        if verify_request(&stale, now, &salt, 300).is_err() && p.ingest.authenticate(&stale).is_err() {
            stale_rejected += 1;
        }
    }
    assert_eq!((accepted, tampered_rejected, stale_rejected), (1000, 1000, 1000));
}

fn criterion_3_interval_graph() {
    let g = build_interval_graph(&four_device_day(DAY0), DAY0, DAY0 + DAY);
    let e = g.edge(dev(0xa), dev(0xc)).expect("A-C edge");
    assert_eq!((e.start, e.end), (DAY0 + 9 * HOUR, DAY0 + 22 * HOUR));
    let got: Vec<(u64, u64, Signal)> = e
        .subintervals
        .iter()
        .map(|s| ((s.start - DAY0) / HOUR, (s.end - DAY0) / HOUR, s.signal))
        .collect();
    assert_eq!(
        got,
        vec![
            (9, 10, Signal::Dbm(-80)),
            (10, 18, Signal::Unseen),
            (18, 19, Signal::Dbm(-70)),
            (19, 21, Signal::Unseen),
            (21, 22, Signal::Dbm(-100)),
        ]
    );
}

fn criterion_4_score() {
    let g = build_interval_graph(&four_device_day(DAY0), DAY0, DAY0 + DAY);
    let r = social_distancing_score(&g, dev(0xc), ScoreParams::new(-60, 30, 180).unwrap());
    assert_eq!(r.background, BTreeSet::from([dev(0xa)]));
    assert_eq!(r.proximate, BTreeSet::from([dev(0xb), dev(0xd)]));
    assert_eq!((r.p, r.score), (2, 8));

    let defaults = PlatformConfig::from_toml("").unwrap().scoring.params().unwrap();
    assert_eq!(defaults, ScoreParams::new(-78, 15, 240).unwrap());
    let custom =
        PlatformConfig::from_toml("[scoring]\ndelta = -60\nmin_contact_minutes = 30\nbackground_minutes = 180\n")
            .unwrap()
            .scoring
            .params()
            .unwrap();
    assert_eq!(custom, ScoreParams::new(-60, 30, 180).unwrap());
}

/// Up to `max_vertices` devices (one may be a beacon) with random contact
/// stretches over `minutes` minutes from `start`.
fn random_rows(rng: &mut impl Rng, start: u64, minutes: u64, max_vertices: usize) -> (Vec<DeviceId>, Vec<EdgeRow>) {
    let n = rng.gen_range(2..=max_vertices);
    let mut ids: Vec<DeviceId> = (0..n).map(|_| random_id(rng)).collect();
    if rng.gen_bool(0.3) {
        ids[n - 1] = beacon_device_id(1, rng.gen());
    }
    let mut rows = Vec::new();
    for _ in 0..rng.gen_range(0..n * 3) {
        let a = ids[rng.gen_range(0..n)];
        let b = ids[rng.gen_range(0..n)];
        let from = rng.gen_range(0..minutes);
        let len = rng.gen_range(1..=minutes - from);
        for m in from..from + len {
            if rng.gen_bool(0.85) {
                let (src, sink) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
                rows.push(EdgeRow {
                    ts: start + m * 60 + rng.gen_range(0..60),
                    src,
                    sink,
                    rssi: *[-95i8, -85, -78, -72, -65, -55].choose(rng).unwrap(),
                });
            }
        }
    }
    (ids, rows)
}

fn criterion_5_tbfs() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let start = DAY0 + 8 * HOUR;
    let mut nonempty_hop2 = 0;
    for _ in 0..100 {
        let (ids, rows) = random_rows(&mut rng, start, 60, 20);
        let a = rng.gen_range(0..=30);
        let b = rng.gen_range(a + 1..=60);
        let window = (start + a * 60, start + b * 60);
        let pred = ContactPredicate {
            delta: *[-80i8, -75, -70, -60].choose(&mut rng).unwrap(),
            min_minutes: rng.gen_range(0..=10),
        };
        let k = rng.gen_range(1..=2);
        let seeds: Vec<DeviceId> = ids.choose_multiple(&mut rng, k).copied().collect();
        let g = build_interval_graph(&rows, window.0, window.1);
        let (h1, h2) = t_bfs(&g, &seeds, window, pred);
        let (o1, o2) = tbfs_oracle(&rows, &seeds, window, pred);
        assert_eq!(h1.ids(), o1);
        assert_eq!(h2.ids(), o2);
        if !o2.is_empty() {
            nonempty_hop2 += 1;
        }
    }
    assert!(
        nonempty_hop2 >= 10,
        "random graphs too sparse to exercise hop 2 ({nonempty_hop2})"
    );
}

fn criterion_6_threshold() {
    let t = rssi::calibrate(&rssi::reference_fixture()).unwrap();
    assert_eq!(t.rssi, -78);
    assert!((t.true_positive - 0.59).abs() < 1e-9 && (t.false_positive - 0.29).abs() < 1e-9);
    assert!((t.separation() - 0.30).abs() < 1e-9);

    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let sample = |rng: &mut ChaCha20Rng| -> Vec<i8> {
        let center: i32 = rng.gen_range(-95..-45);
        let spread: i32 = rng.gen_range(1..15);
        (0..rng.gen_range(1..300))
            .map(|_| (center + rng.gen_range(-spread..=spread)).clamp(-110, -30) as i8)
            .collect()
    };
    for _ in 0..100 {
        let (near, far) = (sample(&mut rng), sample(&mut rng));
        let got = rssi::discriminating_threshold(&EmpiricalCdf::new(&near).unwrap(), &EmpiricalCdf::new(&far).unwrap());
        assert_eq!(got.rssi, threshold_oracle(&near, &far, DEFAULT_SUPPORT));
    }
}

fn criterion_7_geohash() {
    let (lat, lon) = (57.64911, 10.40744);
    let ours = geohash::encode(lat, lon, 7).unwrap();
    let reference = ::geohash::encode(::geohash::Coord { x: lon, y: lat }, 7).unwrap();
    assert_eq!(ours, "u4pruyd");
    assert_eq!(ours, reference);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (lat, lon) = (rng.gen_range(-90.0..90.0), rng.gen_range(-180.0..180.0));
        let cell = geohash::encode(lat, lon, 7).unwrap();
        assert!(geohash::decode_bbox(&cell).unwrap().contains(lat, lon));
        assert_eq!(cell, ::geohash::encode(::geohash::Coord { x: lon, y: lat }, 7).unwrap());
    }
}

struct World {
    identity: Arc<IdentityStore>,
    regs: Vec<Registration>,
    phones: Vec<String>,
}

fn world(seed: u64, n: usize, now: u64) -> World {
    let key = opening_key(seed);
    let identity = Arc::new(IdentityStore::with_seed(IdentityConfig::default(), secrets(&key), seed));
    let codes = identity.issue_invite_codes(n, now);
    let phones: Vec<String> = (0..n).map(|i| format!("+91 99000 {i:05}")).collect();
    let regs = codes
        .iter()
        .zip(&phones)
        .map(|(c, ph)| {
            identity
                .register_device("test", &c.0, Some(ph), "pixel-3", now)
                .unwrap()
        })
        .collect();
    World { identity, regs, phones }
}

fn criterion_8_privacy() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    for _ in 0..100 {
        let (ids, rows) = random_rows(&mut rng, DAY0, 120, 20);
        let g = build_interval_graph(&rows, DAY0, DAY0 + DAY);
        let root = ids[0];
        let tree = neighbourhood_tree(&g, root);
        let hop1: BTreeSet<DeviceId> = tree.children.iter().map(|b| b.device_id).collect();
        let mut seen = BTreeSet::from([root]);
        for (parent, child, _) in tree.edges() {
            assert!(seen.insert(child), "node listed twice");
            if parent == root {
                assert!(hop1.contains(&child));
            } else {
                assert!(
                    hop1.contains(&parent) && !hop1.contains(&child),
                    "cross edge {parent} -> {child}"
                );
            }
        }
        assert_eq!(tree.node_count(), tree.edges().len() + 1);
        let anon = serde_json::to_string(&tree.anonymized()).unwrap();
        assert!(ids.iter().all(|d| !anon.contains(&d.to_string())));
    }

    let center = (12.9716, 77.5946);
    for round in 0..50 {
        let mut points = Vec::new();
        for cell in 0..6u64 {
            let (lat, lon) = geohash::offset_meters(center.0, center.1, cell as f64 * 200.0 - 500.0, 0.0);
            for k in 0..rng.gen_range(1..10u8) {
                points.push(GpsPoint {
                    device_id: dev(k + 16 * cell as u8),
                    timestamp: DAY0 + round,
                    geohash7: geohash::encode(lat, lon, 7).unwrap(),
                    sealed_coords: Sealed(String::new()),
                });
            }
        }
        let tiles = density_heatmap(&points, center, DAY0 + HOUR);
        assert!(!tiles.is_empty());
        for t in &tiles {
            assert!(!matches!(t.display, TileCount::Exact(n) if n < 5));
        }
        let json = serde_json::to_value(&tiles).unwrap();
        for t in json.as_array().unwrap() {
            let shown = t["display"].as_str().unwrap();
            assert!(shown == "<5" || shown.parse::<usize>().unwrap() >= 5);
        }
    }

    let now = DAY0 + DAY;
    for seed in 0..20 {
        let w = world(800 + seed, 8, now - DAY);
        let ids: Vec<DeviceId> = w.regs.iter().map(|r| r.device_id).collect();
        let mut rows = Vec::new();
        for k in 0..12 {
            let (a, b) = (ids[rng.gen_range(0..8)], ids[rng.gen_range(0..8)]);
            rows.extend(per_minute(a, b, DAY0 + k * HOUR, rng.gen_range(10..50), -60));
        }
        rows.extend(per_minute(ids[0], beacon_device_id(4, 2), DAY0, 60, -50));
        rows.extend(per_minute(ids[0], ids[1], DAY0 + 13 * HOUR, 30, -60));
        let clock = ManualClock::new(now);
        let svc = TracingService::new(
            TracingConfig::default(),
            w.identity.clone(),
            Arc::new(rows),
            Arc::new(clock),
        );
        let done = run_trace(&svc, &w, 0, (DAY0, DAY0 + DAY)).unwrap();
        let result = done.result.clone().unwrap();
        assert!(!result.primary.is_empty());
        let text = serde_json::to_string(&result).unwrap() + &serde_json::to_string(&svc.queue(None)).unwrap();
        for (r, phone) in w.regs.iter().zip(&w.phones) {
            for needle in [
                r.device_id.to_string(),
                r.device_id.to_hex(),
                r.unique_id.0.clone(),
                phone.clone(),
                normalize_phone(phone),
                hash_phone(phone, "phone-salt-for-tests"),
            ] {
                assert!(!text.contains(&needle), "trace output leaks {needle}");
            }
        }
        assert!(!text.contains(&beacon_device_id(4, 2).to_string()));
    }
}

/// Submit, consent with the OTP the subject received, approve.
fn run_trace(
    svc: &TracingService,
    w: &World,
    subject: usize,
    window: (u64, u64),
) -> Result<proxtrace_core::contact_tracing::TraceRequest, TraceError> {
    let reg = &w.regs[subject];
    let hex = reg.device_id.to_hex();
    let req = svc.submit_trace(&TraceSubmission {
        unique_id: reg.unique_id.0.clone(),
        device_suffix: hex[hex.len() - 4..].to_string(),
        phone: w.phones[subject].clone(),
        clinical: Clinical {
            symptoms: "fever".into(),
            test_info: "positive".into(),
        },
        window_start: window.0,
        window_end: window.1,
        predicate: None,
        submitted_by: "health-center".into(),
    })?;
    let otp = w.identity.last_otp_for(&reg.unique_id).expect("otp sent");
    svc.record_consent(req.id, &otp)?;
    svc.decide_request(req.id, true, "board-1")
}

fn criterion_9_end_to_end() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let start = 1_599_998_400;
    let clock = ManualClock::new(start);
    let p = platform(dir.path(), &clock, 9);
    let scenario = ScenarioConfig::campus(start, 120, 9, 10, 0.9);
    let report = run_scenario(&scenario, &p.ingest, &clock).unwrap();
    assert_eq!(report.devices.len(), 10);
    assert!(report
        .devices
        .iter()
        .all(|d| d.buffered_at_end == 0 && d.liveliness_pending == 0));

    for d in &report.devices {
        let id: DeviceId = d.device_id.parse().unwrap();
        let from_liveliness: u64 = p
            .ingest
            .liveliness_reports()
            .iter()
            .filter(|r| r.device_id == id)
            .map(|r| r.stats["scans_performed"].as_u64().unwrap())
            .sum();
        assert_eq!(from_liveliness, d.scans_emitted, "{}", d.name);
    }
    assert_eq!(report.device("phone-8").unwrap().scans_emitted, 90);

    clock.set(start + 7200 + 1);
    let pre = p.ingest.run_preprocess(start, start + 7200).unwrap();
    assert!(pre.rows > 0 && pre.skipped.is_empty());
    let g = p.graph(start, start + 7200).unwrap();
    assert!(g.vertex_count() >= 10);
    let scores: Vec<u8> = report
        .devices
        .iter()
        .map(|d| social_distancing_score(&g, d.device_id.parse().unwrap(), ScoreParams::default()).score)
        .collect();
    assert!(scores.iter().all(|&s| s <= 10));
    assert!(scores[0] < 10, "desk cluster should lower phone-0's score");

    let w = World {
        identity: p.identity.clone(),
        regs: report
            .devices
            .iter()
            .map(|d| {
                let ident = p
                    .identity
                    .identity(&proxtrace_core::identity::UniqueId(d.unique_id.clone()))
                    .unwrap();
                Registration {
                    unique_id: ident.unique_id.clone(),
                    device_id: d.device_id.parse().unwrap(),
                    pin: ident.pin.clone(),
                    device_key: wire::derive_device_key(&d.device_id.parse().unwrap(), p.identity.device_salt()),
                }
            })
            .collect(),
        phones: scenario.devices.iter().map(|d| d.phone.clone().unwrap()).collect(),
    };
    let done = run_trace(&p.tracing, &w, 0, (start, start + 7200)).unwrap();
    assert_eq!(done.state, TraceState::Completed);
    let result = done.result.unwrap();
    let primary: BTreeSet<&str> = result.primary.iter().map(|e| e.invite_code.0.as_str()).collect();
    let secondary: BTreeSet<&str> = result.secondary.iter().map(|e| e.invite_code.0.as_str()).collect();
    let code = |i: usize| report.devices[i].invite_code.as_str();
    assert!(primary.contains(code(1)) && primary.contains(code(2)), "{primary:?}");
    assert!(
        secondary.contains(code(3)) || secondary.contains(code(4)),
        "{secondary:?}"
    );
    assert!(!primary.contains(code(9)) && !secondary.contains(code(9)));
    assert!(
        started.elapsed() < Duration::from_secs(60),
        "took {:?}",
        started.elapsed()
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    ConsentOk,
    ConsentWrong,
    Reissue,
    Approve,
    Reject,
    Execute,
}

const EVENTS: [Event; 6] = [
    Event::ConsentOk,
    Event::ConsentWrong,
    Event::Reissue,
    Event::Approve,
    Event::Reject,
    Event::Execute,
];

fn criterion_10_state_machine() {
    let now = DAY0 + DAY;
    let w = world(10, 3, DAY0);
    let (a, b) = (w.regs[0].device_id, w.regs[1].device_id);
    let rows = per_minute(a, b, DAY0 + HOUR, 30, -60);
    let mut sequences: Vec<Vec<Event>> = vec![vec![]];
    let mut frontier = sequences.clone();
    for _ in 0..5 {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                EVENTS.iter().map(move |e| {
                    let mut n = s.clone();
                    n.push(*e);
                    n
                })
            })
            .collect();
        sequences.extend(frontier.iter().cloned());
    }
    assert_eq!(sequences.len(), 1 + 6 + 36 + 216 + 1296 + 7776);

    let reg = &w.regs[0];
    let hex = reg.device_id.to_hex();
    let submission = TraceSubmission {
        unique_id: reg.unique_id.0.clone(),
        device_suffix: hex[hex.len() - 4..].to_string(),
        phone: w.phones[0].clone(),
        clinical: Clinical {
            symptoms: String::new(),
            test_info: String::new(),
        },
        window_start: DAY0,
        window_end: DAY0 + DAY,
        predicate: None,
        submitted_by: "hc".into(),
    };
    let edges: Arc<dyn EdgeSource> = Arc::new(rows);
    for seq in &sequences {
        let svc = TracingService::new(
            TracingConfig::default(),
            w.identity.clone(),
            edges.clone(),
            Arc::new(ManualClock::new(now)),
        );
        let req = svc.submit_trace(&submission).unwrap();
        let (mut consented, mut approved_after_consent) = (false, false);
        let mut executed = 0;
        for ev in seq {
            let before = svc.request(req.id).unwrap().state;
            let outcome = match ev {
                Event::ConsentOk => {
                    let otp = w.identity.last_otp_for(&reg.unique_id).unwrap();
                    svc.record_consent(req.id, &otp).map(|_| ())
                }
                Event::ConsentWrong => {
                    let otp = w.identity.last_otp_for(&reg.unique_id).unwrap();
                    let wrong = if otp == "000000" { "000001" } else { "000000" };
                    svc.record_consent(req.id, wrong).map(|_| ())
                }
                Event::Reissue => svc.reissue_otp(req.id).map(|_| ()),
                Event::Approve => svc.decide_request(req.id, true, "board").map(|_| ()),
                Event::Reject => svc.decide_request(req.id, false, "board").map(|_| ()),
                Event::Execute => svc.execute_trace(req.id).map(|_| ()),
            };
            let after = svc.request(req.id).unwrap().state;
            match (ev, &outcome) {
                (Event::ConsentOk, Ok(())) if before == TraceState::ConsentPending => consented = true,
                (Event::Approve, Ok(())) => {
                    assert!(consented, "approval succeeded without consent: {seq:?}");
                    approved_after_consent = true;
                    executed += 1;
                }
                (Event::Execute, Ok(())) => executed += 1,
                _ => {}
            }
            if outcome.is_err() {
                assert_eq!(before, after, "failed {ev:?} changed state in {seq:?}");
            }
        }
        let fin = svc.request(req.id).unwrap();
        assert_eq!(fin.result.is_some(), consented && approved_after_consent, "{seq:?}");
        assert_eq!(fin.state == TraceState::Completed, fin.result.is_some());
        assert!(executed <= 1, "trace ran twice in {seq:?}");
        if let Some(r) = fin.result {
            assert_eq!(r.primary.len(), 1);
        }
    }
}

fn main() {
    let criteria: [(u32, &str, fn()); 10] = [
        (
            1,
            "wire codec round-trips, length formula, 300-contact split",
            criterion_1_wire_codec,
        ),
        (
            2,
            "signed requests: valid accepted, tampered and stale rejected",
            criterion_2_auth,
        ),
        (
            3,
            "interval graph four-device day, A-C edge",
            criterion_3_interval_graph,
        ),
        (
            4,
            "social distancing score of C is 8; defaults from config",
            criterion_4_score,
        ),
        (
            5,
            "two-hop search equals brute-force oracle on 100 graphs",
            criterion_5_tbfs,
        ),
        (
            6,
            "threshold -78 on fixture; equals exhaustive scan on 100 pairs",
            criterion_6_threshold,
        ),
        (
            7,
            "geohash reference cell and 100 containing round-trips",
            criterion_7_geohash,
        ),
        (
            8,
            "trees, heatmaps and trace results keep identities private",
            criterion_8_privacy,
        ),
        (9, "end-to-end fleet run through trace result", criterion_9_end_to_end),
        (
            10,
            "trace only after consent and approval, all event orders",
            criterion_10_state_machine,
        ),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let t = Instant::now();
        let ok = panic::catch_unwind(AssertUnwindSafe(f)).is_ok();
        println!(
            "criterion {n:>2} {} {name} ({:.2?})",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed()
        );
        if !ok {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
