use evacflow::graph::{build_adjacency, normalize_adjacency, AdjacencyOptions, DetectorNode, Direction, Directionality, EdgeWeighting, RoadGraph};
use evacflow::movement::hourly_factor;
use evacflow::tensor::{grad_check, Tape, Tensor};
use evacflow::training::{split, Metrics, SplitRatios};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn chain(distances: &[f64]) -> RoadGraph {
    let mut milepost = 0.0;
    let mut nodes = Vec::new();
    for k in 0..=distances.len() {
        nodes.push(DetectorNode {
            detector_id: format!("D{k}"),
            corridor: "I-4".into(),
            direction: Direction::Eastbound,
            milepost_miles: milepost,
            lane_count: 2,
            latitude: 28.0,
            longitude: -82.0 + milepost / 60.0,
        });
        milepost += distances.get(k).copied().unwrap_or(0.0);
    }
    RoadGraph::infer(nodes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_expression_gradients_match_differences(a in matrix(3, 4), b in matrix(4, 2), c in matrix(1, 2)) {
        let r = grad_check(
            |t, v| {
                let z = t.add(t.matmul(v[0], v[1])?, v[2])?;
                let g = t.mul(t.sigmoid(z)?, t.tanh(z)?)?;
                t.sum(g)
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
    }

    #[test]
    fn backward_is_linear_in_the_loss(a in matrix(2, 3), k in 0.1..5.0f64) {
        let grad_of = |scale: f64| {
            let tape = Tape::new();
            let x = tape.param(a.clone());
            let loss = tape.scale(tape.sum(tape.mul(x, x).unwrap()).unwrap(), scale).unwrap();
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (g1, gk) = (grad_of(1.0), grad_of(k));
        for (x, y) in g1.data().iter().zip(gk.data()) {
            prop_assert!((x * k - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn reused_variables_accumulate_gradients(a in matrix(2, 2)) {
        let tape = Tape::new();
        let x = tape.param(a.clone());
        let loss = tape.sum(tape.add(x, x).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn normalized_adjacency_rows_are_stochastic(
        distances in prop::collection::vec(0.2..6.0f64, 1..8),
        speed_seed in prop::collection::vec(0.0..90.0f64, 9),
        tau in 0.5..10.0f64,
        undirected in any::<bool>(),
    ) {
        let g = chain(&distances);
        let n = g.node_count();
        let adj = build_adjacency(&g, &speed_seed[..n], "p").unwrap();
        let options = AdjacencyOptions {
            weighting: EdgeWeighting::Affinity { tau_minutes: tau },
            directionality: if undirected { Directionality::Undirected } else { Directionality::Directed },
        };
        let a = normalize_adjacency(&adj, &options);
        for i in 0..n {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..n {
                let neighbour = j == i + 1 || (undirected && i == j + 1);
                prop_assert!(i == j || neighbour || a.at(i, j) == 0.0);
                prop_assert!(a.at(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn hourly_factors_are_a_distribution(totals in prop::collection::vec(0.0..1e5f64, 8)) {
        prop_assume!(totals.iter().sum::<f64>() > 0.0);
        let f = hourly_factor(&totals).unwrap();
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_partitions_indices(n in 1usize..400, seed in any::<u64>()) {
        let idx: Vec<usize> = (0..n).collect();
        let s = split(&idx, SplitRatios::EVACUATION, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, idx.clone());
        prop_assert_eq!(split(&idx, SplitRatios::EVACUATION, seed).unwrap(), s);
    }

    #[test]
    fn metrics_are_scale_consistent(actual in prop::collection::vec(1.0..3000.0f64, 2..60), k in 0.5..4.0f64) {
        let predicted: Vec<f64> = actual.iter().enumerate().map(|(i, a)| a + (i as f64 - 3.0) * 7.0).collect();
        let m = Metrics::compute(&actual, &predicted).unwrap();
        let sa: Vec<f64> = actual.iter().map(|v| v * k).collect();
        let sp: Vec<f64> = predicted.iter().map(|v| v * k).collect();
        let s = Metrics::compute(&sa, &sp).unwrap();
        prop_assert!((s.rmse - k * m.rmse).abs() < 1e-9 * (1.0 + s.rmse));
        prop_assert!((s.mae - k * m.mae).abs() < 1e-9 * (1.0 + s.mae));
        prop_assert!((s.smape - m.smape).abs() < 1e-9);
        if actual.iter().any(|&a| (a - actual[0]).abs() > 1e-9) {
            prop_assert!((s.r2 - m.r2).abs() < 1e-9);
        }
    }
}
