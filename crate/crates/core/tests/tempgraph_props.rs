mod common;

use proptest::prelude::*;
use proxtrace_core::edges::EdgeRow;
use proxtrace_core::tempgraph::{
    build_interval_graph, degree_centrality, t_bfs, ContactPredicate, IntervalGraph, Signal,
};
use proxtrace_core::wire::beacon_device_id;

use common::{dev, tbfs_oracle, DAY0, HOUR};

const START: u64 = DAY0 + 8 * HOUR;

/// Rows among `n` devices over 90 minutes, as (src, sink, minute, second, rssi).
fn rows(n: u8) -> impl Strategy<Value = Vec<EdgeRow>> {
    prop::collection::vec(
        (
            0..n,
            0..n,
            0u64..90,
            0u64..60,
            prop::sample::select(vec![-95i8, -80, -78, -70, -60]),
        ),
        0..250,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .map(|(a, b, m, s, rssi)| EdgeRow {
                ts: START + m * 60 + s,
                src: if a == 0 { beacon_device_id(3, 3) } else { dev(a) },
                sink: dev(b + 1),
                rssi,
            })
            .collect()
    })
}

fn check_structure(g: &IntervalGraph) -> Result<(), TestCaseError> {
    let (from, to) = g.window();
    for (_, e) in g.edges() {
        prop_assert!(!e.subintervals.is_empty());
        prop_assert_eq!(e.subintervals[0].start, e.start);
        prop_assert_eq!(e.subintervals.last().unwrap().end, e.end);
        prop_assert!(from <= e.start && e.end <= to);
        for w in e.subintervals.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert_ne!(w[0].signal, w[1].signal);
        }
        for s in &e.subintervals {
            prop_assert!(s.start < s.end);
        }
        prop_assert!(e.subintervals.first().unwrap().signal.is_seen());
        prop_assert!(e.subintervals.last().unwrap().signal.is_seen());
    }
    Ok(())
}

proptest! {
    #[test]
    fn subintervals_tile_the_span(rows in rows(8), a in 0u64..40, b in 41u64..=90) {
        let g = build_interval_graph(&rows, START + a * 60, START + b * 60);
        check_structure(&g)?;
        let unaligned = build_interval_graph(&rows, START + a * 60 + 17, START + b * 60 - 5);
        check_structure(&unaligned)?;
    }

    #[test]
    fn direction_does_not_matter(rows in rows(8)) {
        let flipped: Vec<EdgeRow> = rows.iter().map(|r| EdgeRow { src: r.sink, sink: r.src, ..*r }).collect();
        let g1 = build_interval_graph(&rows, START, START + 2 * HOUR);
        let g2 = build_interval_graph(&flipped, START, START + 2 * HOUR);
        prop_assert_eq!(g1.to_snapshot(), g2.to_snapshot());
    }

    #[test]
    fn row_order_does_not_matter(mut rows in rows(8)) {
        let g1 = build_interval_graph(&rows, START, START + 2 * HOUR);
        rows.reverse();
        let g2 = build_interval_graph(&rows, START, START + 2 * HOUR);
        prop_assert_eq!(g1.to_snapshot(), g2.to_snapshot());
    }

    #[test]
    fn snapshot_json_round_trip(rows in rows(8)) {
        let g = build_interval_graph(&rows, START, START + 2 * HOUR);
        let back = IntervalGraph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.to_snapshot(), g.to_snapshot());
        prop_assert_eq!(degree_centrality(&back), degree_centrality(&g));
    }

    #[test]
    fn matches_the_oracle(rows in rows(10), seed in 1u8..10, delta in prop::sample::select(vec![-80i8, -78, -70]), min in 0u32..8, a in 0u64..30, b in 31u64..=90) {
        let window = (START + a * 60, START + b * 60);
        let pred = ContactPredicate { delta, min_minutes: min };
        let g = build_interval_graph(&rows, window.0, window.1);
        let (h1, h2) = t_bfs(&g, &[dev(seed)], window, pred);
        let (o1, o2) = tbfs_oracle(&rows, &[dev(seed)], window, pred);
        prop_assert_eq!(h1.ids(), o1);
        prop_assert_eq!(h2.ids(), o2);
    }

    #[test]
    fn widening_the_window_never_loses_contacts(rows in rows(8), seed in 1u8..8, a in 10u64..40, b in 41u64..80, grow_a in 0u64..10, grow_b in 0u64..10) {
        let pred = ContactPredicate { delta: -78, min_minutes: 3 };
        let narrow = (START + a * 60, START + b * 60);
        let wide = (START + (a - grow_a) * 60, START + (b + grow_b) * 60);
        let reach = |w: (u64, u64)| {
            let g = build_interval_graph(&rows, w.0, w.1);
            let (h1, h2) = t_bfs(&g, &[dev(seed)], w, pred);
            (h1.ids(), h1.ids().union(&h2.ids()).copied().collect::<std::collections::BTreeSet<_>>())
        };
        let (n1, n_all) = reach(narrow);
        let (w1, w_all) = reach(wide);
        prop_assert!(n1.is_subset(&w1));
        prop_assert!(n_all.is_subset(&w_all));
    }

    #[test]
    fn results_never_contain_seeds_or_beacons(rows in rows(8), s1 in 1u8..8, s2 in 1u8..8) {
        let g = build_interval_graph(&rows, START, START + 2 * HOUR);
        let seeds = [dev(s1), dev(s2)];
        let (h1, h2) = t_bfs(&g, &seeds, g.window(), ContactPredicate { delta: -80, min_minutes: 1 });
        for id in h1.ids().iter().chain(h2.ids().iter()) {
            prop_assert!(!seeds.contains(id) && !id.is_beacon());
        }
        prop_assert!(h1.ids().is_disjoint(&h2.ids()));
    }
}

#[test]
fn adjacent_equal_minutes_merge() {
    let (a, b) = (dev(1), dev(2));
    let rows = [
        EdgeRow {
            ts: START,
            src: a,
            sink: b,
            rssi: -70,
        },
        EdgeRow {
            ts: START + 60,
            src: b,
            sink: a,
            rssi: -70,
        },
    ];
    let g = build_interval_graph(&rows, START, START + HOUR);
    let e = g.edge(a, b).unwrap();
    assert_eq!(e.subintervals.len(), 1);
    assert_eq!((e.start, e.end), (START, START + 120));
}

#[test]
fn same_minute_both_directions_keeps_strongest() {
    let (a, b) = (dev(1), dev(2));
    let rows = [
        EdgeRow {
            ts: START + 3,
            src: a,
            sink: b,
            rssi: -85,
        },
        EdgeRow {
            ts: START + 40,
            src: b,
            sink: a,
            rssi: -72,
        },
    ];
    let g = build_interval_graph(&rows, START, START + HOUR);
    assert_eq!(g.edge(b, a).unwrap().subintervals[0].signal, Signal::Dbm(-72));
}

#[test]
fn second_hop_must_follow_the_first() {
    // B meets the seed half an hour in; C met B only before that.
    let (s, b, c, d) = (dev(1), dev(2), dev(3), dev(4));
    let mut rows = common::per_minute(s, b, START + 30 * 60, 20, -60);
    rows.extend(common::per_minute(b, c, START, 20, -60));
    rows.extend(common::per_minute(b, d, START + 40 * 60, 20, -60));
    let g = build_interval_graph(&rows, START, START + 2 * HOUR);
    let (h1, h2) = t_bfs(&g, &[s], g.window(), ContactPredicate::default());
    assert_eq!(h1.ids(), [b].into());
    assert_eq!(h2.ids(), [d].into());
    assert_eq!(h1.members[0].minutes, 20);
    assert_eq!(h1.members[0].first_contact, START + 30 * 60);
}

#[test]
fn beacons_do_not_relay() {
    let (s, c) = (dev(1), dev(3));
    let beacon = beacon_device_id(9, 9);
    let mut rows = common::per_minute(s, beacon, START, 30, -50);
    rows.extend(common::per_minute(c, beacon, START, 30, -50));
    let g = build_interval_graph(&rows, START, START + HOUR);
    let (h1, h2) = t_bfs(&g, &[s], g.window(), ContactPredicate::default());
    assert!(h1.is_empty() && h2.is_empty());
}
