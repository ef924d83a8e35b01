//! Acceptance suite. Prints one line per criterion and exits nonzero when a
//! gating criterion fails. Pass criterion numbers as arguments to run a subset.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use grn_core::graph::{load_csv, synth_generate, EventStream, SynthParams};
use grn_core::model::{temporal_encode, GrnConfig, GrnModel};
use grn_core::perf::{run_bench, BenchSpec};
use grn_core::retention::{
    build_decay_mask, graph_retention, retention_parallel, DecayPolicy, Paradigm, RetentionParams, RetentionState,
};
use grn_core::tensor::group_norm;
use grn_core::training::{average_precision, auc_roc, fit, FitOutcome, TrainConfig};
use grn_core::verify::{ablations, gradient_suite, normalization_case};
use grn_core::{Matrix, RngState};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: usize,
    name: &'static str,
    gating: bool,
    run: fn(&mut Shared) -> Verdict,
}

/// State shared between criteria that train the same model.
#[derive(Default)]
struct Shared {
    learn: Option<(EventStream, FitOutcome, f64)>,
}

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Verdict::Fail(format!($($fmt)+));
        }
    };
}

macro_rules! ok {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return Verdict::Fail(format!("error: {e}")),
        }
    };
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "paradigm_equivalence", gating: true, run: paradigm_equivalence },
        Criterion { id: 2, name: "causality", gating: true, run: causality },
        Criterion { id: 3, name: "normalization_neutral_under_gn", gating: true, run: normalization_neutral },
        Criterion { id: 4, name: "gradient_fidelity", gating: true, run: gradient_fidelity },
        Criterion { id: 5, name: "metric_oracles", gating: true, run: metric_oracles },
        Criterion { id: 6, name: "learnability", gating: true, run: learnability },
        Criterion { id: 7, name: "constant_cost_inference", gating: true, run: constant_cost },
        Criterion { id: 8, name: "temporal_encoding_values", gating: true, run: temporal_encoding },
        Criterion { id: 9, name: "dataset_ingestion", gating: true, run: dataset_ingestion },
        Criterion { id: 10, name: "ablations", gating: true, run: ablation_order },
        Criterion { id: 11, name: "uci_stretch", gating: false, run: uci_stretch },
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let verdict = (c.run)(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                if c.gating {
                    failed += 1;
                }
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        let note = if c.gating { "" } else { " [non-gating]" };
        println!("{tag} #{} {}{note}: {detail} ({secs:.1}s)", c.id, c.name);
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn project(x: &Matrix, w: &Matrix, b: &[f64]) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            (0..w.cols())
                .map(|c| b[c] + (0..w.rows()).map(|i| x.get(r, i) * w.get(i, c)).sum::<f64>())
                .collect()
        })
        .collect()
}

/// `o_i = q_i S₀ + Σ_{j≤i} w_j (q_i·k_j) v_j` and `S = S₀ + Σ_j w_j k_jᵀ v_j`, summed term by term.
fn retention_by_sums(
    x_dst: &Matrix,
    x_src: &Matrix,
    weights: &[f64],
    p: &RetentionParams,
    s0: &Matrix,
) -> (Matrix, Matrix) {
    let q = project(x_dst, &p.w_q, &p.b_q);
    let k = project(x_src, &p.w_k, &p.b_k);
    let v = project(x_src, &p.w_v, &p.b_v);
    let (l, d) = (weights.len(), p.w_q.rows());
    let mut out = Matrix::zeros(l, d);
    for i in 0..l {
        for c in 0..d {
            let mut acc: f64 = (0..d).map(|a| q[i][a] * s0.get(a, c)).sum();
            for j in 0..=i {
                let score: f64 = (0..d).map(|a| q[i][a] * k[j][a]).sum();
                acc += weights[j] * score * v[j][c];
            }
            out.set(i, c, acc);
        }
    }
    let mut s = s0.clone();
    for a in 0..d {
        for c in 0..d {
            let extra: f64 = (0..l).map(|j| weights[j] * k[j][a] * v[j][c]).sum();
            s.set(a, c, s0.get(a, c) + extra);
        }
    }
    (out, s)
}

fn random_params(rng: &mut RngState, d: usize) -> RetentionParams {
    let std = 1.0 / (d as f64).sqrt();
    RetentionParams {
        w_q: rng.normal_matrix(d, d, std),
        w_k: rng.normal_matrix(d, d, std),
        w_v: rng.normal_matrix(d, d, std),
        b_q: rng.normal_matrix(1, d, 0.1).data().to_vec(),
        b_k: rng.normal_matrix(1, d, 0.1).data().to_vec(),
        b_v: rng.normal_matrix(1, d, 0.1).data().to_vec(),
    }
}

fn descending_deltas(rng: &mut RngState, l: usize) -> Vec<f64> {
    let mut deltas: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 10.0)).collect();
    deltas.sort_by(|a, b| b.total_cmp(a));
    deltas
}

fn random_stream(rng: &mut RngState, n: usize, nodes: usize, feat: usize) -> Vec<grn_core::graph::Event> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.uniform(0.0, 2.0);
            let src = rng.below(nodes);
            let dst = (src + 1 + rng.below(nodes - 1)) % nodes;
            let mut e = grn_core::graph::Event::new(src, dst, t);
            e.edge_feat = (0..feat).map(|_| rng.normal()).collect();
            e
        })
        .collect()
}

fn model_outputs(
    model: &GrnModel,
    events: &[grn_core::graph::Event],
    nodes: usize,
    feats: &Matrix,
    batch: usize,
    p: Paradigm,
) -> grn_core::Result<Vec<Matrix>> {
    let mut table = model.new_state_table(nodes);
    let mut out = Vec::new();
    for b in events.chunks(batch) {
        let (zs, zd) = model.embed_batch(b, &mut table, Some(feats), p)?;
        out.push(zs);
        out.push(zd);
    }
    out.push(table.embeddings.clone());
    Ok(out)
}

fn paradigm_equivalence(_: &mut Shared) -> Verdict {
    const LENGTHS: [usize; 6] = [1, 2, 3, 17, 128, 512];
    const DIMS: [usize; 3] = [1, 4, 32];
    let start = Instant::now();
    let (mut worst_layer, mut worst_model) = (0.0f64, 0.0f64);
    for i in 0..100usize {
        let seed = 10_000 + i as u64;
        let mut rng = RngState::new(seed);
        let l = LENGTHS[i % 6];
        let d = DIMS[(i / 6) % 3];
        let heads = 1 + (i / 18) % 2;
        let policy = if (i / 36) % 2 == 0 {
            DecayPolicy::Unit
        } else {
            DecayPolicy::TimeDecay {
                lambda: rng.uniform(0.05, 1.0),
            }
        };
        let paradigms = [
            Paradigm::Parallel,
            Paradigm::Recurrent,
            Paradigm::Chunkwise(1),
            Paradigm::Chunkwise(2),
            Paradigm::Chunkwise(7),
            Paradigm::Chunkwise(l),
        ];

        for _ in 0..heads {
            let params = random_params(&mut rng, d);
            let x_dst = rng.normal_matrix(l, d, 1.0);
            let x_src = rng.normal_matrix(l, d, 1.0);
            let deltas = descending_deltas(&mut rng, l);
            let state = RetentionState {
                s: rng.normal_matrix(d, d, 1.0 / (d as f64).sqrt()),
                last_time: 0.0,
            };
            let (want, want_s) = retention_by_sums(&x_dst, &x_src, &policy.weights(&deltas), &params, &state.s);
            for p in paradigms {
                let (got, s) = ok!(graph_retention(&x_dst, &x_src, &deltas, &params, policy, p, false, &state));
                let diff = max_diff(&got, &want).max(max_diff(&s.s, &want_s));
                worst_layer = worst_layer.max(diff);
                check!(diff < 1e-9, "seed {seed}: layer {p} off by {diff:e} (L={l}, d={d})");
            }
        }

        let dm = heads * d;
        let cfg = GrnConfig {
            num_layers: 2,
            d_model: dm,
            time_dim: dm,
            heads,
            gn_groups: heads,
            dropout: 0.0,
            decay: policy,
            edge_feat_dim: 2,
            node_feat_dim: 3,
            ..GrnConfig::default()
        };
        let model = ok!(GrnModel::new(cfg, &mut rng));
        let nodes = 2 + rng.below(4);
        let events = random_stream(&mut rng, l, nodes, 2);
        let feats = rng.normal_matrix(nodes, 3, 1.0);
        let batch = l.div_ceil(2);
        let reference = ok!(model_outputs(&model, &events, nodes, &feats, batch, Paradigm::Parallel));
        for p in &paradigms[1..] {
            let got = ok!(model_outputs(&model, &events, nodes, &feats, batch, *p));
            let diff = got.iter().zip(&reference).map(|(a, b)| max_diff(a, b)).fold(0.0, f64::max);
            worst_model = worst_model.max(diff);
            check!(diff < 1e-7, "seed {seed}: 2-layer model {p} off by {diff:e} (L={l}, d={dm})");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 60.0, "took {secs:.1}s, budget 60s");
    Verdict::Pass(format!(
        "100 instances, max layer diff {worst_layer:.1e} < 1e-9, max model diff {worst_model:.1e} < 1e-7"
    ))
}

fn causality(_: &mut Shared) -> Verdict {
    for trial in 0..50u64 {
        let seed = 20_000 + trial;
        let mut rng = RngState::new(seed);
        let l = 2 + rng.below(63);
        let d = [1, 4, 8][rng.below(3)];
        let policy = DecayPolicy::TimeDecay {
            lambda: rng.uniform(0.05, 1.0),
        };
        let q = rng.normal_matrix(l, d, 1.0);
        let k = rng.normal_matrix(l, d, 1.0);
        let v = rng.normal_matrix(l, d, 1.0);
        let deltas = descending_deltas(&mut rng, l);
        let t = rng.below(l - 1);
        let (mut k2, mut v2, mut deltas2) = (k.clone(), v.clone(), deltas.clone());
        for j in t + 1..l {
            k2.row_mut(j).iter_mut().for_each(|x| *x = rng.normal() * 10.0);
            v2.row_mut(j).iter_mut().for_each(|x| *x = rng.normal() * 10.0);
            deltas2[j] = rng.uniform(0.0, 10.0);
        }
        let m1 = ok!(build_decay_mask(&deltas, policy));
        let m2 = ok!(build_decay_mask(&deltas2, policy));
        for normalized in [false, true] {
            let a = ok!(retention_parallel(&q, &k, &v, &m1, normalized));
            let b = ok!(retention_parallel(&q, &k2, &v2, &m2, normalized));
            for r in 0..=t {
                let same = a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits());
                check!(same, "seed {seed}: row {r} changed after editing rows > {t} (normalized={normalized})");
            }
        }
    }
    Verdict::Pass("50 trials, rows up to t bit-identical, plain and normalized".into())
}

fn normalization_neutral(_: &mut Shared) -> Verdict {
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let seed = 30_000 + trial;
        let (q, k, v, mask, groups) = ok!(normalization_case(&mut RngState::new(seed)));
        let d = v.cols();
        let (g, b) = (vec![1.0; d], vec![0.0; d]);
        let plain = ok!(group_norm(&ok!(retention_parallel(&q, &k, &v, &mask, false)), groups, 1e-12, &g, &b));
        let norm = ok!(group_norm(&ok!(retention_parallel(&q, &k, &v, &mask, true)), groups, 1e-12, &g, &b));
        let diff = max_diff(&plain, &norm);
        worst = worst.max(diff);
        check!(diff < 1e-6, "seed {seed}: differ by {diff:e}");
    }
    Verdict::Pass(format!("50 trials at eps=1e-12, max diff {worst:.1e} < 1e-6"))
}

fn gradient_fidelity(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let checks = ok!(gradient_suite(40_000));
    let secs = start.elapsed().as_secs_f64();
    check!(
        checks.iter().any(|c| c.name == "composed_model"),
        "composed model missing from gradient suite"
    );
    let mut worst = 0.0f64;
    for c in &checks {
        check!(c.coords >= 20, "{}: only {} coordinates", c.name, c.coords);
        check!(c.passed(), "{}: relative error {:e} at {}", c.name, c.max_rel_err, c.worst);
        worst = worst.max(c.max_rel_err);
    }
    check!(secs < 120.0, "took {secs:.1}s, budget 120s");
    Verdict::Pass(format!(
        "{} checks (h=1e-5, >=20 coords each), max relative error {worst:.1e} < 1e-4",
        checks.len()
    ))
}

/// Precision at each positive over the explicit ranking (score desc, then input order).
fn ap_by_enumeration(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut ranked: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let pos = ranked.iter().position(|&j| scores[i] > scores[j]).unwrap_or(ranked.len());
        ranked.insert(pos, i);
    }
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut total = 0.0;
    for (r, &i) in ranked.iter().enumerate() {
        if labels[i] {
            let hits = ranked[..=r].iter().filter(|&&j| labels[j]).count() as f64;
            total += hits / (r + 1) as f64;
        }
    }
    total / positives
}

fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn metric_oracles(_: &mut Shared) -> Verdict {
    let (scores, labels) = ([0.9, 0.8, 0.3], [true, false, true]);
    let ap = ok!(average_precision(&scores, &labels));
    let auc = ok!(auc_roc(&scores, &labels));
    check!((ap - 5.0 / 6.0).abs() < 1e-12, "hand case AP {ap}, expected 5/6");
    check!((auc - 0.5).abs() < 1e-12, "hand case AUC {auc}, expected 0.5");
    for trial in 0..1000u64 {
        let seed = 50_000 + trial;
        let mut rng = RngState::new(seed);
        let n = 2 + rng.below(19);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.unit() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        rng.shuffle(&mut labels);
        let tied = rng.unit() < 0.5;
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { rng.below(4) as f64 / 3.0 } else { rng.unit() })
            .collect();
        let ap = ok!(average_precision(&scores, &labels));
        let auc = ok!(auc_roc(&scores, &labels));
        let (ap_o, auc_o) = (ap_by_enumeration(&scores, &labels), auc_by_pairs(&scores, &labels));
        check!((ap - ap_o).abs() < 1e-12, "seed {seed}: AP {ap} vs enumeration {ap_o}");
        check!((auc - auc_o).abs() < 1e-12, "seed {seed}: AUC {auc} vs pairs {auc_o}");
    }
    Verdict::Pass("hand cases AP=5/6, AUC=0.5; 1000 instances (n<=20) within 1e-12".into())
}

fn learnability_config(stream: &EventStream) -> (GrnConfig, TrainConfig) {
    let model = GrnConfig {
        d_model: 64,
        time_dim: 64,
        heads: 2,
        edge_feat_dim: stream.edge_feat_dim,
        ..GrnConfig::default()
    };
    let train = TrainConfig {
        epochs: 50,
        batch_size: 200,
        lr: 1e-4,
        ..TrainConfig::default()
    };
    (model, train)
}

fn train_full_model(shared: &mut Shared) -> grn_core::Result<&(EventStream, FitOutcome, f64)> {
    if shared.learn.is_none() {
        let stream = synth_generate(&SynthParams::default(), &mut RngState::new(0).derive(0))?;
        let (model, train) = learnability_config(&stream);
        let start = Instant::now();
        let outcome = fit(&stream, &model, &train, None, &mut |_| {})?;
        shared.learn = Some((stream, outcome, start.elapsed().as_secs_f64()));
    }
    Ok(shared.learn.as_ref().unwrap())
}

fn learnability(shared: &mut Shared) -> Verdict {
    let (stream, outcome, secs) = ok!(train_full_model(shared));
    let (events, secs) = (stream.len(), *secs);
    let first = outcome.history.iter().find(|r| r.ap >= 0.95).and_then(|r| r.epoch);
    // Random scores on a balanced segment of the same size as validation.
    let n = outcome.history[0].events;
    let mut rng = RngState::new(60_000);
    let labels: Vec<bool> = (0..2 * n).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = (0..2 * n).map(|_| rng.unit()).collect();
    let baseline = ok!(average_precision(&scores, &labels));
    check!(events >= 5000, "only {events} events");
    check!((baseline - 0.5).abs() < 0.05, "random baseline AP {baseline:.3}");
    check!(
        outcome.best_val_ap >= 0.95,
        "best val AP {:.4} at epoch {} after {} epochs",
        outcome.best_val_ap,
        outcome.best_epoch,
        outcome.epochs_run
    );
    check!(secs < 300.0, "took {secs:.1}s, budget 300s");
    Verdict::Pass(format!(
        "{events} events, val AP {:.4} (first >=0.95 at epoch {}), random baseline {baseline:.3}, trained in {secs:.0}s",
        outcome.best_val_ap,
        first.unwrap_or(0)
    ))
}

fn constant_cost(_: &mut Shared) -> Verdict {
    let spec = BenchSpec {
        paradigms: vec![Paradigm::Parallel, Paradigm::Recurrent],
        lengths: vec![100, 10_000],
        repeats: 5,
        ..BenchSpec::default()
    };
    let report = ok!(run_bench(&spec));
    let ratios = report.constant_cost.as_ref().map(|c| (c.recurrent_ratio, c.parallel_ratio));
    let Some((Some(rec), Some(par))) = ratios else {
        return Verdict::Fail("bench report lacks the constant-cost ratios".into());
    };
    check!(rec < 1.5, "recurrent per-event cost grew {rec:.2}x from L=100 to L=10000");
    check!(par > 2.0, "parallel per-event cost grew only {par:.2}x");
    Verdict::Pass(format!(
        "median of 5: recurrent {rec:.2}x (< 1.5), parallel {par:.1}x (> 2) from L=100 to L=10000"
    ))
}

fn temporal_encoding(_: &mut Shared) -> Verdict {
    for d in [1, 2, 3, 4, 16, 64, 172] {
        check!(temporal_encode(0.0, d).iter().all(|&v| v == 1.0), "TE(0) != 1 for d={d}");
    }
    for dt in [0.0, 0.5, 1.0, 3.7, 100.0, 1e4] {
        let te = temporal_encode(dt, 1)[0];
        check!(te == dt.cos(), "TE({dt}) with d=1 is {te}, expected cos");
    }
    let v = temporal_encode(1.0, 4)[2];
    let expected = 0.877_582_561_890_372_8;
    check!((v - expected).abs() < 1e-9, "TE(1) component 3 at d=4 is {v}");
    Verdict::Pass(format!("TE(0)=1 exactly, TE(dt,d=1)=cos dt, TE(1,3;d=4)={v:.6}"))
}

fn data_dir() -> PathBuf {
    std::env::var_os("GRN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn dataset_ingestion(_: &mut Shared) -> Verdict {
    let dir = data_dir();
    let mut seen = Vec::new();
    for (file, events, feats) in [("wikipedia.csv", 157_474, Some(172)), ("uci.csv", 59_835, None)] {
        let path = dir.join(file);
        if !path.is_file() {
            continue;
        }
        let s = ok!(load_csv(&path));
        check!(s.len() == events, "{file}: {} events, expected {events}", s.len());
        if let Some(f) = feats {
            check!(s.edge_feat_dim == f, "{file}: {} features, expected {f}", s.edge_feat_dim);
        }
        seen.push(format!("{file} {} events", s.len()));
    }
    if seen.is_empty() {
        return Verdict::Skip(format!(
            "no wikipedia.csv or uci.csv in {} (set GRN_DATA_DIR)",
            dir.display()
        ));
    }
    Verdict::Pass(seen.join(", "))
}

fn ablation_order(shared: &mut Shared) -> Verdict {
    let (stream, full, _) = ok!(train_full_model(shared));
    let (base, train) = learnability_config(stream);
    let stream = stream.clone();
    let full_ap = full.best_val_ap;
    let mut parts = vec![format!("full {full_ap:.4}")];
    let mut worse = Vec::new();
    for (name, cfg) in ablations(&base) {
        let out = ok!(fit(&stream, &cfg, &train, None, &mut |_| {}));
        check!(out.best_val_ap.is_finite(), "{name}: non-finite AP");
        parts.push(format!("{name} {:.4}", out.best_val_ap));
        if out.best_val_ap > full_ap {
            worse.push(name);
        }
    }
    check!(worse.is_empty(), "ablations beat the full model ({}): {}", worse.join(", "), parts.join(", "));
    Verdict::Pass(format!("val AP {}", parts.join(", ")))
}

fn uci_stretch(_: &mut Shared) -> Verdict {
    let path = data_dir().join("uci.csv");
    if !path.is_file() {
        return Verdict::Skip(format!("{} not present", path.display()));
    }
    if std::env::var_os("GRN_STRETCH").is_none() {
        return Verdict::Skip("set GRN_STRETCH=1 to train on UCI".into());
    }
    let stream = ok!(load_csv(&path));
    let (model, train) = learnability_config(&stream);
    let out = ok!(fit(&stream, &model, &train, None, &mut |_| {}));
    let test = out.test.as_ref().map_or(out.best_val_ap, |t| t.ap);
    check!(test >= 0.90, "UCI test AP {test:.4} < 0.90");
    Verdict::Pass(format!("UCI test AP {test:.4}"))
}
