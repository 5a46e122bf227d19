use gossip_ula::engine::{fusion_step, SwarmState};
use gossip_ula::metrics::{consensus_error_sq, consensus_error_sq_of, fit_decay_rate};
use gossip_ula::models::{minibatch_size, DataShard, ModelSpec};
use gossip_ula::rng::stream;
use gossip_ula::scheduler::{negotiate_t, HyperParams, OverlapMode, TMode};
use gossip_ula::topology::{activation_probabilities, spectral_constants, Graph};
use proptest::prelude::*;

/// Random connected graph: a random spanning tree plus extra edges.
fn connected_graph() -> impl Strategy<Value = Graph> {
    (2usize..9).prop_flat_map(|n| {
        let parents = proptest::collection::vec(any::<prop::sample::Index>(), n - 1);
        let extra = proptest::collection::vec((0..n, 0..n), 0..n * 2);
        (Just(n), parents, extra).prop_map(|(n, parents, extra)| {
            let mut edges: Vec<(usize, usize)> = parents
                .iter()
                .enumerate()
                .map(|(k, p)| (k + 1, p.index(k + 1)))
                .collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            Graph::from_edges(n, &edges).expect("spanning tree keeps the graph connected")
        })
    })
}

fn swarm(values: Vec<Vec<f64>>) -> SwarmState {
    SwarmState::from_params(values)
}

proptest! {
    #[test]
    fn pair_distribution_is_a_distribution(g in connected_graph()) {
        let dist = activation_probabilities(&g);
        let total: f64 = dist.pair_probs.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let act: f64 = dist.activation_probs.iter().sum();
        prop_assert!((act - 2.0).abs() < 1e-12);
        for i in 0..g.n() {
            let from_pairs: f64 = g.neighbors(i).iter().map(|&j| dist.pair_prob(i, j)).sum();
            prop_assert!((from_pairs - dist.activation_probs[i]).abs() < 1e-12);
        }
        for (&(i, j), &p) in &dist.pair_probs {
            prop_assert!(g.is_edge(i, j));
            prop_assert!(p > 0.0);
        }
    }

    #[test]
    fn spectral_constants_are_in_range(g in connected_graph(), beta in 0.05f64..0.95) {
        let sc = spectral_constants(&g, beta);
        prop_assert!(sc.lambda_contraction >= 0.0 && sc.lambda_contraction < 1.0);
        prop_assert!(sc.lambda_bar_l >= -1e-12);
        if g.n() >= 3 {
            prop_assert!(sc.lambda_bar_l > 0.0);
        }
        prop_assert!(sc.p_m > 0.0 && sc.p_m <= 2.0 / g.n() as f64 + 1e-12);
    }

    #[test]
    fn fusion_preserves_mean_and_does_not_spread(
        values in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 2..7),
        beta in 0.0f64..1.0,
        pick in any::<(prop::sample::Index, prop::sample::Index)>(),
    ) {
        let n = values.len();
        let i = pick.0.index(n);
        let j = (i + 1 + pick.1.index(n - 1)) % n;
        let mut s = swarm(values);
        let before_err = consensus_error_sq(&s);
        let before_sum: Vec<f64> = (0..3).map(|c| s.agents.iter().map(|a| a.w[c]).sum()).collect();
        fusion_step(&mut s, (i, j), beta);
        let after_sum: Vec<f64> = (0..3).map(|c| s.agents.iter().map(|a| a.w[c]).sum()).collect();
        for (a, b) in before_sum.iter().zip(&after_sum) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(consensus_error_sq(&s) <= before_err + 1e-9);
    }

    #[test]
    fn fusion_at_half_averages_the_pair(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let mut s = swarm(vec![vec![a], vec![b], vec![7.0]]);
        fusion_step(&mut s, (0, 1), 0.5);
        prop_assert!((s.agents[0].w[0] - s.agents[1].w[0]).abs() < 1e-12);
        prop_assert!((s.agents[0].w[0] - 0.5 * (a + b)).abs() < 1e-12);
        prop_assert_eq!(s.agents[2].w[0], 7.0);
    }

    #[test]
    fn negotiated_t_is_symmetric_and_bounded(t_min in 1usize..6, span in 0usize..8, x in 0usize..100, y in 0usize..100) {
        let t_max = t_min + span;
        let hp = HyperParams {
            a: 1e-4,
            delta_alpha: 0.5,
            beta: 0.5,
            t_mode: TMode::Dynamic { t_min, t_max },
            f: 0.1,
            overlap_mode: OverlapMode::Sequential,
        };
        let pi = t_min + x % (span + 1);
        let pj = t_min + y % (span + 1);
        let t = negotiate_t(&hp, pi, pj);
        prop_assert_eq!(t, negotiate_t(&hp, pj, pi));
        prop_assert!(t >= t_min && t <= t_max);
    }

    #[test]
    fn consensus_error_ignores_common_shift(
        values in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 2), 2..6),
        shift in -100.0f64..100.0,
    ) {
        let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
        let base = consensus_error_sq_of(&refs);
        let shifted: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        let refs2: Vec<&[f64]> = shifted.iter().map(|v| v.as_slice()).collect();
        prop_assert!((base - consensus_error_sq_of(&refs2)).abs() < 1e-7 * (1.0 + base));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn decay_fit_exponent_is_scale_invariant(exp in 0.05f64..2.0, amp in 0.1f64..10.0, c in 0.01f64..100.0) {
        let series: Vec<(usize, f64)> = (1..=60).map(|k| (k, amp * ((k + 1) as f64).powf(-exp) * (1.0 + 0.1 * ((k * 7) % 5) as f64))).collect();
        let scaled: Vec<(usize, f64)> = series.iter().map(|&(k, v)| (k, c * v)).collect();
        let a = fit_decay_rate(&series, 5).unwrap();
        let b = fit_decay_rate(&scaled, 5).unwrap();
        prop_assert!((a.exponent - b.exponent).abs() < 1e-9);
        prop_assert!((b.amplitude / a.amplitude - c).abs() < 1e-6 * c);
    }

    #[test]
    fn minibatches_are_sorted_unique_and_sized(len in 1usize..200, f in 0.01f64..1.0, seed in any::<u64>()) {
        let model = ModelSpec::gaussian1d(1.0, 5.0, 3);
        let values: Vec<f64> = (0..len).map(|v| v as f64).collect();
        let shard = DataShard::scalar(&values, 0).unwrap();
        let idx = model.draw_minibatch(&shard, f, &mut stream(seed, &[]));
        prop_assert_eq!(idx.len(), minibatch_size(len, f));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
    }
}
