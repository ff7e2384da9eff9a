use proxtrace_core::rssi::EmpiricalCdf;
use proxtrace_core::simfleet::{sample_rssi, RssiModel};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Measured shares of readings at or below -75 dBm at 1, 2 and 4 m.
const TARGETS: [(f64, f64); 3] = [(1.0, 0.23), (2.0, 0.54), (4.0, 0.84)];

/// P(rounded reading <= -75) under the model, ignoring misses.
fn analytic_share(m: &RssiModel, d: f64) -> f64 {
    Normal::new(m.expected(d), m.sigma).unwrap().cdf(-74.5)
}

fn worst_error(m: &RssiModel) -> f64 {
    TARGETS
        .iter()
        .map(|&(d, want)| (analytic_share(m, d) - want).abs())
        .fold(0.0, f64::max)
}

#[test]
fn default_model_sits_near_the_grid_optimum() {
    let default = RssiModel::default();
    let mut best = (f64::INFINITY, default);
    for tx in -72..=-58 {
        for n10 in 15..=45 {
            for sigma in 6..=16 {
                let m = RssiModel {
                    tx_power: f64::from(tx),
                    path_loss_exponent: f64::from(n10) / 10.0,
                    sigma: f64::from(sigma),
                    ..default
                };
                let e = worst_error(&m);
                if e < best.0 {
                    best = (e, m);
                }
            }
        }
    }
    let e = worst_error(&default);
    assert!(e <= 0.05, "default model off by {e:.3}");
    assert!(
        e - best.0 < 0.03,
        "grid found {:?} with error {:.3}, default has {e:.3}",
        best.1,
        best.0
    );
}

#[test]
fn sampled_cdfs_hit_the_anchors() {
    let model = RssiModel::default();
    let mut rng = ChaCha20Rng::seed_from_u64(2020);
    for (d, want) in TARGETS {
        let xs: Vec<i8> = (0..10_000)
            .filter_map(|_| sample_rssi(&model, d, &mut rng).unwrap())
            .collect();
        assert!(xs.len() > 9_600, "too many misses at {d} m");
        let got = EmpiricalCdf::new(&xs).unwrap().at(-75);
        assert!((got - want).abs() <= 0.05, "F(-75) at {d} m = {got:.3}, want {want}");
    }
}

#[test]
fn near_and_far_separate_around_minus_78() {
    let model = RssiModel::default();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut draw = |d: f64| -> Vec<i8> {
        (0..10_000)
            .filter_map(|_| sample_rssi(&model, d, &mut rng).unwrap())
            .collect()
    };
    let near = EmpiricalCdf::new(&draw(2.0)).unwrap();
    let far = EmpiricalCdf::new(&draw(4.0)).unwrap();
    let t = proxtrace_core::rssi::discriminating_threshold(&near, &far);
    assert!((-84..=-72).contains(&t.rssi), "threshold {}", t.rssi);
    assert!(near.at_least(-78) - far.at_least(-78) > 0.25);
}
