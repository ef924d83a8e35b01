use proptest::prelude::*;

use grn_core::checkpoint::Checkpoint;
use grn_core::graph::{build_neighbor_sequence, chronological_split, load_csv, synth_generate, SplitMode, SplitSpec, SynthParams};
use grn_core::model::{GrnConfig, GrnModel};
use grn_core::retention::{accumulate_state, build_decay_mask, retain, retention_parallel, DecayPolicy, Paradigm};
use grn_core::tensor::{finite_diff_grad, group_norm, layer_norm};
use grn_core::training::{auc_roc, average_precision};
use grn_core::{Matrix, RngState};

fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1.0);
    a.max_abs_diff(b) / scale
}

fn group_variances(x: &Matrix, groups: usize) -> impl Iterator<Item = f64> + '_ {
    let w = x.cols() / groups;
    (0..x.rows()).flat_map(move |r| {
        x.row(r).chunks(w).map(move |g| {
            let m = g.iter().sum::<f64>() / w as f64;
            g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64
        })
    })
}

fn policy(lambda: Option<f64>) -> DecayPolicy {
    lambda.map_or(DecayPolicy::Unit, |lambda| DecayPolicy::TimeDecay { lambda })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..=64, n in 1usize..=64, p in 1usize..=64, q in 1usize..=64) {
        let mut rng = RngState::new(seed);
        let a = rng.normal_matrix(m, n, 1.0);
        let b = rng.normal_matrix(n, p, 1.0);
        let c = rng.normal_matrix(p, q, 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(rel_diff(&left, &right) < 1e-9);
    }

    #[test]
    fn norm_rows_are_standardized(seed in any::<u64>(), rows in 1usize..8, groups in 1usize..4, width in 3usize..10, spread in 0.1f64..100.0) {
        let mut rng = RngState::new(seed);
        let d = groups * width;
        let x = rng.normal_matrix(rows, d, spread);
        prop_assume!(group_variances(&x, groups).all(|v| v >= 1e-4));
        let (g, b) = (vec![1.0; d], vec![0.0; d]);
        let gn = group_norm(&x, groups, 1e-12, &g, &b).unwrap();
        let w = width;
        for (i, chunk) in gn.data().chunks(w).enumerate() {
            let mean = chunk.iter().sum::<f64>() / w as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            prop_assert!(mean.abs() < 1e-10, "group {i}: mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-6, "group {i}: variance {var}");
        }
        prop_assume!(group_variances(&x, 1).all(|v| v >= 1e-4));
        let ln = layer_norm(&x, 1e-12, &g, &b).unwrap();
        for r in 0..rows {
            let row = ln.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_ignores_positive_scale(seed in any::<u64>(), rows in 1usize..6, groups in 1usize..4, width in 3usize..8, alpha in prop::sample::select(vec![1e-3, 1.0, 1e3])) {
        let mut rng = RngState::new(seed);
        let d = groups * width;
        let x = rng.uniform_matrix(rows, d, -10.0, 10.0);
        prop_assume!(group_variances(&x, groups).all(|v| v >= 1.0));
        let (g, b) = (rng.uniform_matrix(1, d, 0.5, 1.5), rng.normal_matrix(1, d, 1.0));
        let base = group_norm(&x, groups, 1e-12, g.data(), b.data()).unwrap();
        let scaled = group_norm(&x.scale(alpha), groups, 1e-12, g.data(), b.data()).unwrap();
        prop_assert!(base.max_abs_diff(&scaled) < 1e-6);
    }

    #[test]
    fn finite_differences_match_polynomials(coeffs in prop::collection::vec(-3.0f64..3.0, 4), x in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        // f(x) = Σ c0 x_i³ + c1 x_i² + c2 x_i x_{i+1} + c3 x_i
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..x.len() {
                let next = x.get(i + 1).copied().unwrap_or(0.0);
                s += coeffs[0] * x[i].powi(3) + coeffs[1] * x[i] * x[i] + coeffs[2] * x[i] * next + coeffs[3] * x[i];
            }
            s
        };
        let numeric = finite_diff_grad(f, &x, 1e-5).unwrap();
        for i in 0..x.len() {
            let prev = if i > 0 { x[i - 1] } else { 0.0 };
            let next = x.get(i + 1).copied().unwrap_or(0.0);
            let exact = 3.0 * coeffs[0] * x[i] * x[i] + 2.0 * coeffs[1] * x[i] + coeffs[2] * (next + prev) + coeffs[3];
            prop_assert!((numeric[i] - exact).abs() < 1e-6, "coord {i}: {} vs {exact}", numeric[i]);
        }
    }

    #[test]
    fn retention_forms_agree(seed in any::<u64>(), l in 1usize..40, d in 1usize..6, chunk in 1usize..9, lambda in prop::option::of(0.01f64..1.0)) {
        let mut rng = RngState::new(seed);
        let q = rng.normal_matrix(l, d, 1.0);
        let k = rng.normal_matrix(l, d, 1.0);
        let v = rng.normal_matrix(l, d, 1.0);
        let s0 = rng.normal_matrix(d, d, 1.0);
        let deltas: Vec<f64> = (0..l).map(|i| (l - i) as f64 * rng.uniform(0.0, 1.0)).collect();
        let w = policy(lambda).weights(&deltas);
        let (par, sp) = retain(&q, &k, &v, &w, &s0, Paradigm::Parallel, false).unwrap();
        for p in [Paradigm::Recurrent, Paradigm::Chunkwise(chunk)] {
            let (o, s) = retain(&q, &k, &v, &w, &s0, p, false).unwrap();
            prop_assert!(o.max_abs_diff(&par) < 1e-9);
            prop_assert!(s.max_abs_diff(&sp) < 1e-9);
        }
    }

    #[test]
    fn later_rows_never_reach_earlier_outputs(seed in any::<u64>(), l in 2usize..30, d in 1usize..6, normalized in any::<bool>()) {
        let mut rng = RngState::new(seed);
        let q = rng.normal_matrix(l, d, 1.0);
        let mut k = rng.normal_matrix(l, d, 1.0);
        let mut v = rng.normal_matrix(l, d, 1.0);
        let mut deltas: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 5.0)).collect();
        let mask = build_decay_mask(&deltas, DecayPolicy::TimeDecay { lambda: 0.3 }).unwrap();
        let before = retention_parallel(&q, &k, &v, &mask, normalized).unwrap();
        let t = rng.below(l - 1);
        for j in t + 1..l {
            k.row_mut(j).iter_mut().for_each(|x| *x = rng.normal());
            v.row_mut(j).iter_mut().for_each(|x| *x = rng.normal());
            deltas[j] = rng.uniform(0.0, 5.0);
        }
        let mask = build_decay_mask(&deltas, DecayPolicy::TimeDecay { lambda: 0.3 }).unwrap();
        let after = retention_parallel(&q, &k, &v, &mask, normalized).unwrap();
        for r in 0..=t {
            prop_assert!(before.row(r).iter().zip(after.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn state_folds_are_additive(seed in any::<u64>(), l in 0usize..30, d in 1usize..6, cut_frac in 0.0f64..=1.0) {
        let mut rng = RngState::new(seed);
        let k = rng.normal_matrix(l, d, 1.0);
        let v = rng.normal_matrix(l, d, 1.0);
        let w: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 1.0)).collect();
        let s0 = rng.normal_matrix(d, d, 1.0);
        let cut = ((l as f64) * cut_frac) as usize;
        let whole = accumulate_state(&s0, &k, &v, &w).unwrap();
        let first = accumulate_state(&s0, &k.slice_rows(0, cut).unwrap(), &v.slice_rows(0, cut).unwrap(), &w[..cut]).unwrap();
        let both = accumulate_state(&first, &k.slice_rows(cut, l).unwrap(), &v.slice_rows(cut, l).unwrap(), &w[cut..]).unwrap();
        prop_assert!(whole.max_abs_diff(&both) < 1e-12);
    }

    #[test]
    fn retention_is_linear_in_values(seed in any::<u64>(), l in 1usize..30, d in 1usize..6, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = RngState::new(seed);
        let q = rng.normal_matrix(l, d, 1.0);
        let k = rng.normal_matrix(l, d, 1.0);
        let v1 = rng.normal_matrix(l, d, 1.0);
        let v2 = rng.normal_matrix(l, d, 1.0);
        let w = vec![1.0; l];
        let zero = Matrix::zeros(d, d);
        let run = |v: &Matrix| retain(&q, &k, v, &w, &zero, Paradigm::Chunkwise(3), false).unwrap().0;
        let mixed = run(&v1.scale(a).add(&v2.scale(b)).unwrap());
        let expect = run(&v1).scale(a).add(&run(&v2).scale(b)).unwrap();
        prop_assert!(mixed.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn metrics_stay_in_unit_interval(scores in prop::collection::vec(0.0f64..1.0, 2..40), flips in prop::collection::vec(any::<bool>(), 40)) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let ap = average_precision(&scores, &labels).unwrap();
        let auc = auc_roc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&auc));
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flipped = auc_roc(&negated, &labels).unwrap();
        prop_assert!((auc + flipped - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_keeps_every_event(seed in any::<u64>(), length in 10usize..300, train in 0.3f64..0.8, inductive in any::<bool>()) {
        let params = SynthParams { num_users: 6, num_items: 9, period: 40, length, noise_frac: 0.2, edge_feat_dim: 2 };
        let stream = synth_generate(&params, &mut RngState::new(seed)).unwrap();
        let val = (1.0 - train) / 2.0;
        let spec = SplitSpec {
            train_frac: train,
            val_frac: val,
            test_frac: 1.0 - train - val,
            inductive_node_frac: 0.2,
            mode: if inductive { SplitMode::Inductive } else { SplitMode::Transductive },
        };
        let split = chronological_split(&stream, &spec, &mut RngState::new(seed ^ 1)).unwrap();
        let kept = split.train.len() + split.val.len() + split.test.len();
        prop_assert_eq!(kept + split.removed_train_events, length);
        if !inductive {
            prop_assert_eq!(split.removed_train_events, 0);
        }
        for e in &split.train.events {
            prop_assert!(!split.unobserved.contains(&e.src) && !split.unobserved.contains(&e.dst));
        }
    }

    #[test]
    fn neighbor_history_is_strictly_past(seed in any::<u64>(), length in 1usize..200, query in 0.0f64..220.0) {
        let params = SynthParams { num_users: 4, num_items: 5, period: 7, length, noise_frac: 0.5, edge_feat_dim: 1 };
        let stream = synth_generate(&params, &mut RngState::new(seed)).unwrap();
        for node in 0..stream.num_nodes {
            let seq = build_neighbor_sequence(&stream, node, query, None).unwrap();
            prop_assert!(seq.times.iter().all(|&t| t < query));
        }
    }

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), length in 1usize..120, feats in 0usize..4) {
        let params = SynthParams { num_users: 5, num_items: 7, period: 11, length, noise_frac: 0.3, edge_feat_dim: feats };
        let mut stream = synth_generate(&params, &mut RngState::new(seed)).unwrap();
        let mut rng = RngState::new(seed ^ 7);
        for e in &mut stream.events {
            e.t += rng.unit();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        stream.write_csv(&path).unwrap();
        let once = load_csv(&path).unwrap();
        let again_path = dir.path().join("t.csv");
        once.write_csv(&again_path).unwrap();
        let twice = load_csv(&again_path).unwrap();
        prop_assert_eq!(&once.events, &twice.events);
        prop_assert_eq!(std::fs::read(&path).unwrap().len() > 0, true);
        for (a, b) in stream.events.iter().zip(&once.events) {
            prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
            prop_assert_eq!(&a.edge_feat, &b.edge_feat);
            prop_assert_eq!(&stream.raw_ids[a.src], &once.raw_ids[b.src]);
        }
    }

    #[test]
    fn forward_and_checkpoint_are_bit_exact(seed in any::<u64>(), heads in 1usize..3, events in 1usize..30) {
        let d = 4 * heads;
        let cfg = GrnConfig { d_model: d, time_dim: d, heads, gn_groups: heads, edge_feat_dim: 2, node_feat_dim: 3, ..GrnConfig::default() };
        let model = GrnModel::new(cfg.clone(), &mut RngState::new(seed)).unwrap();
        let again = GrnModel::new(cfg, &mut RngState::new(seed)).unwrap();
        let params = SynthParams { num_users: 3, num_items: 4, period: 5, length: events, noise_frac: 0.5, edge_feat_dim: 2 };
        let stream = synth_generate(&params, &mut RngState::new(seed)).unwrap();
        let feats = RngState::new(seed ^ 3).normal_matrix(stream.num_nodes, 3, 1.0);
        let json = Checkpoint::new(&model, None, None).to_json().unwrap();
        let restored = Checkpoint::from_json(&json).unwrap().to_model().unwrap();
        prop_assert_eq!(Checkpoint::new(&restored, None, None).to_json().unwrap(), json);
        let run = |m: &GrnModel| {
            let mut table = m.new_state_table(stream.num_nodes);
            let (zs, zd) = m.embed_batch(&stream.events, &mut table, Some(&feats), Paradigm::Recurrent).unwrap();
            [zs.into_data(), zd.into_data(), table.embeddings.into_data()].concat()
        };
        let reference: Vec<u64> = run(&model).iter().map(|x| x.to_bits()).collect();
        for m in [&again, &restored] {
            let bits: Vec<u64> = run(m).iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(&bits, &reference);
        }
    }
}
