use lteode::data::{
    events_to_csv, generate_shock_series, load_external_csv, make_windows, read_events_csv, synthetic_dataset,
    write_series_csv, ForecastDataset, SeriesMetadata, ShockScenario, Split, WindowLayout,
};
use lteode::graph::{adaptive_adjacency_value, NodeEmbeddings, SpatialGraph};
use lteode::tensor::Tensor;
use lteode::Error;
use proptest::prelude::*;

fn small_scenario() -> ShockScenario {
    ShockScenario {
        n_nodes: 6,
        total_t: 300,
        ..ShockScenario::default()
    }
}

#[test]
fn windows_stay_inside_their_split() {
    let layout = WindowLayout::new(12, 12);
    let ds = synthetic_dataset(&small_scenario(), layout).unwrap();
    for split in Split::ALL {
        let bounds = ds.bounds(split);
        for &s in ds.windows(split) {
            assert!(s >= bounds.start && s + 24 <= bounds.end, "{split:?} window at {s}");
        }
    }
    let last_train_x = ds.windows(Split::Train).iter().max().unwrap() + 11;
    let first_val_y = ds.windows(Split::Val).iter().min().unwrap() + 12;
    assert!(last_train_x < first_val_y);
    let last_val = ds.windows(Split::Val).iter().max().unwrap() + 23;
    assert!(last_val < *ds.windows(Split::Test).iter().min().unwrap());
    // 6:2:2 by time
    assert_eq!(ds.bounds(Split::Train), 0..180);
    assert_eq!(ds.bounds(Split::Val), 180..240);
    assert_eq!(ds.bounds(Split::Test), 240..300);
    assert_eq!(ds.windows(Split::Train).len(), 180 - 24 + 1);
}

#[test]
fn target_matches_later_input_tail() {
    let (t, tp) = (5, 3);
    let ds = synthetic_dataset(&small_scenario(), WindowLayout::new(t, tp)).unwrap();
    let starts = ds.windows(Split::Train);
    let (x, y) = ds.batch(&starts[..starts.len() - tp]).unwrap();
    let (x_later, _) = ds.batch(&starts[tp..]).unwrap();
    let n = ds.n_nodes();
    for i in 0..starts.len() - tp {
        for node in 0..n {
            for k in 0..tp {
                let yv = y.data()[(i * n + node) * tp + k];
                let xv = x_later.data()[(i * n + node) * t + (t - tp + k)];
                assert_eq!(yv, xv);
            }
        }
    }
    assert_eq!(x.shape(), &[starts.len() - tp, n, t, 1]);
}

#[test]
fn scaler_round_trip() {
    let ds = synthetic_dataset(&small_scenario(), WindowLayout::new(12, 12)).unwrap();
    let back = ds.scaler.inverse(&ds.scaled).unwrap();
    for (a, b) in back.data().iter().zip(ds.raw.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn generated_series_survives_csv_round_trip() {
    let sc = small_scenario();
    let graph = SpatialGraph::ring_lattice(sc.n_nodes, 2).unwrap();
    let out = generate_shock_series(&sc, &graph).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("series.csv");
    let meta = dir.path().join("meta.json");
    let events = dir.path().join("events.csv");
    write_series_csv(&out.series, &series).unwrap();
    graph.save(&dir.path().join("edges.csv")).unwrap();
    std::fs::write(&events, events_to_csv(&out.events)).unwrap();
    SeriesMetadata {
        n_nodes: sc.n_nodes,
        in_dim: 1,
        tick_seconds: 300.0,
        edge_list_path: "edges.csv".into(),
    }
    .save(&meta)
    .unwrap();

    let ds = load_external_csv(&series, &meta, WindowLayout::new(12, 12)).unwrap();
    assert_eq!(ds.raw, out.series);
    assert_eq!(ds.graph, graph);
    assert_eq!(read_events_csv(&events).unwrap(), out.events);
}

#[test]
fn tiny_external_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("edges.csv"), "src,dst,weight\n0,1,1\n").unwrap();
    std::fs::write(dir.path().join("s.csv"), "t,node0_f0,node1_f0\n0,1,2\n1,3,4\n2,5,7\n").unwrap();
    std::fs::write(
        dir.path().join("m.json"),
        r#"{"n_nodes": 2, "in_dim": 1, "tick_seconds": 300, "edge_list_path": "edges.csv"}"#,
    )
    .unwrap();
    let raw = lteode::data::read_series_csv(&dir.path().join("s.csv"), 2, 1).unwrap();
    assert_eq!(raw.shape(), &[3, 2, 1]);
    // three ticks cannot hold a window in every split
    let err = load_external_csv(&dir.path().join("s.csv"), &dir.path().join("m.json"), WindowLayout::new(1, 1)).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn series_too_short_for_windows() {
    assert!(matches!(make_windows(5, 3, 3, 1), Err(Error::Validation(_))));
    let raw = Tensor::new(&[10, 1, 1], (0..10).map(f64::from).collect()).unwrap();
    let g = SpatialGraph::new(1, []).unwrap();
    assert!(ForecastDataset::new(g, raw, WindowLayout::new(4, 4)).is_err());
}

#[test]
fn zero_shock_rate_gives_empty_log() {
    let sc = ShockScenario {
        shock_rate: 0.0,
        ..small_scenario()
    };
    let ds = synthetic_dataset(&sc, WindowLayout::new(4, 4)).unwrap();
    assert!(ds.events.unwrap().is_empty());
}

fn edge_list(n: usize) -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
    prop::collection::vec((0..n, 0..n, 0.0f64..3.0), 0..20)
        .prop_map(|v| v.into_iter().filter(|(a, b, _)| a != b).collect())
}

proptest! {
    #[test]
    fn normalized_adjacency_is_symmetric((n, edges) in (1usize..=8).prop_flat_map(|n| (Just(n), edge_list(n)))) {
        let g = SpatialGraph::new(n, edges).unwrap();
        let a = g.normalize_adjacency();
        for i in 0..n {
            prop_assert!(a.data()[i * n + i] > 0.0);
            for j in 0..n {
                prop_assert!((a.data()[i * n + j] - a.data()[j * n + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adaptive_rows_sum_to_one((n, d) in (1usize..=8, 1usize..=5), seed in prop::collection::vec(-2.0f64..2.0, 40)) {
        let table = Tensor::new(&[n, d], seed[..n * d].to_vec()).unwrap();
        let a = adaptive_adjacency_value(&NodeEmbeddings::new(table).unwrap()).unwrap();
        for row in a.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn scaler_round_trip_random(vals in prop::collection::vec(-1e4f64..1e4, 30)) {
        let raw = Tensor::new(&[10, 1, 3], vals).unwrap();
        if let Ok(s) = lteode::data::Scaler::fit(&raw, 0..6) {
            let back = s.inverse(&s.transform(&raw).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(raw.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
