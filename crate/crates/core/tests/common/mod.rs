#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use proxtrace_core::clock::ManualClock;
use proxtrace_core::config::PlatformConfig;
use proxtrace_core::edges::EdgeRow;
use proxtrace_core::identity::IdentitySecrets;
use proxtrace_core::platform::Platform;
use proxtrace_core::sealing::OpeningKey;
use proxtrace_core::tempgraph::ContactPredicate;
use proxtrace_core::wire::DeviceId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const HOUR: u64 = 3600;
pub const DAY: u64 = 86_400;
/// 2020-09-13 00:00 UTC.
pub const DAY0: u64 = 1_599_955_200;

/// Random-looking v4 id with a readable last byte.
pub fn dev(n: u8) -> DeviceId {
    let mut b = [0x5a; 16];
    b[6] = 0x4a;
    b[8] = 0x9a;
    b[15] = n;
    DeviceId(b)
}

pub fn opening_key(seed: u64) -> OpeningKey {
    OpeningKey::generate(&mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn secrets(key: &OpeningKey) -> IdentitySecrets {
    IdentitySecrets {
        device_salt: b"device-salt-for-tests".to_vec(),
        phone_salt: "phone-salt-for-tests".into(),
        sealing_key: key.sealing_key(),
    }
}

pub fn platform(dir: &Path, clock: &ManualClock, seed: u64) -> Platform {
    platform_with(PlatformConfig::default(), dir, clock, seed)
}

pub fn platform_with(cfg: PlatformConfig, dir: &Path, clock: &ManualClock, seed: u64) -> Platform {
    let key = opening_key(seed);
    Platform::with_secrets(cfg, secrets(&key), Arc::new(clock.clone()), dir, Some(seed)).expect("platform opens")
}

/// One row per minute for `minutes` minutes from `start`.
pub fn per_minute(src: DeviceId, sink: DeviceId, start: u64, minutes: u64, rssi: i8) -> Vec<EdgeRow> {
    (0..minutes)
        .map(|m| EdgeRow {
            ts: start + m * 60,
            src,
            sink,
            rssi,
        })
        .collect()
}

/// The four-device day: A and C meet at 9 AM (-80), 6 PM (-70) and 9 PM
/// (-100) for an hour each; B meets C for an hour and D meets C for two
/// hours, both at close range.
pub fn four_device_day(day: u64) -> Vec<EdgeRow> {
    let (a, b, c, d) = (dev(0xa), dev(0xb), dev(0xc), dev(0xd));
    let mut rows = Vec::new();
    rows.extend(per_minute(a, c, day + 9 * HOUR, 60, -80));
    rows.extend(per_minute(c, a, day + 18 * HOUR, 60, -70));
    rows.extend(per_minute(a, c, day + 21 * HOUR, 60, -100));
    rows.extend(per_minute(b, c, day + 12 * HOUR, 60, -55));
    rows.extend(per_minute(c, d, day + 14 * HOUR, 120, -50));
    rows
}

/// Independent two-hop search over raw rows, one minute at a time.
pub fn tbfs_oracle(
    rows: &[EdgeRow],
    seeds: &[DeviceId],
    window: (u64, u64),
    pred: ContactPredicate,
) -> (BTreeSet<DeviceId>, BTreeSet<DeviceId>) {
    // pair → minute → strongest reading
    let mut best: BTreeMap<(DeviceId, DeviceId), BTreeMap<u64, i8>> = BTreeMap::new();
    for r in rows {
        if r.ts < window.0 || r.ts >= window.1 || r.src == r.sink {
            continue;
        }
        let key = if r.src < r.sink {
            (r.src, r.sink)
        } else {
            (r.sink, r.src)
        };
        let slot = best.entry(key).or_default().entry(r.ts / 60 * 60).or_insert(i8::MIN);
        *slot = (*slot).max(r.rssi);
    }
    let near_minutes = |a: DeviceId, b: DeviceId| -> Vec<u64> {
        let key = if a < b { (a, b) } else { (b, a) };
        best.get(&key)
            .map(|m| m.iter().filter(|(_, &r)| r >= pred.delta).map(|(&t, _)| t).collect())
            .unwrap_or_default()
    };
    let need = pred.min_minutes.max(1) as usize;
    let everyone: BTreeSet<DeviceId> = best.keys().flat_map(|&(a, b)| [a, b]).collect();
    let seeds: BTreeSet<DeviceId> = seeds.iter().copied().collect();

    let mut hop1: BTreeMap<DeviceId, u64> = BTreeMap::new();
    for &s in &seeds {
        for &v in &everyone {
            if seeds.contains(&v) || v.is_beacon() || s.is_beacon() {
                continue;
            }
            let near = near_minutes(s, v);
            if near.len() >= need {
                let first = near[0].max(window.0);
                let e = hop1.entry(v).or_insert(first);
                *e = (*e).min(first);
            }
        }
    }
    let mut hop2 = BTreeSet::new();
    for (&b, &t_b) in &hop1 {
        for &c in &everyone {
            if seeds.contains(&c) || hop1.contains_key(&c) || c.is_beacon() {
                continue;
            }
            let after = near_minutes(b, c).into_iter().filter(|&t| t >= t_b).count();
            if after >= need {
                hop2.insert(c);
            }
        }
    }
    (hop1.into_keys().collect(), hop2)
}

/// Threshold by direct counting over raw samples: maximize the difference of
/// shares at or above `r`, first maximum wins.
pub fn threshold_oracle(near: &[i8], far: &[i8], support: std::ops::RangeInclusive<i8>) -> i8 {
    let share = |xs: &[i8], r: i8| xs.iter().filter(|&&x| x >= r).count() as f64 / xs.len() as f64;
    let mut best_r = *support.start();
    let mut best = f64::NEG_INFINITY;
    for r in support {
        let d = share(near, r) - share(far, r);
        if d > best + 1e-12 {
            best = d;
            best_r = r;
        }
    }
    best_r
}
