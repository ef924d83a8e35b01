//! Self-check harness: seeded property checks grouped by module, plus the
//! finite-difference gradient suite.

use std::path::PathBuf;

use serde::Serialize;

use crate::autodiff::{ParamStore, RetentionSegment, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{GrnError, Result};
use crate::graph::{
    build_neighbor_sequence, chronological_split, load_csv, synth_generate, Event, EventStream, SplitMode, SplitSpec,
    SynthParams,
};
use crate::model::{GrnConfig, GrnModel, SegmentSpec};
use crate::retention::{
    accumulate_state, build_decay_mask, recurrent_step, retain, retention_parallel, DecayMask, DecayPolicy, Paradigm,
};
use crate::tensor::{finite_diff_grad, group_norm, layer_norm, Matrix, RngState};
use crate::training::{auc_roc, average_precision, evaluate, fit, Task, TrainConfig};

/// Signature of the in-place recurrent retention step.
pub type RecurrentKernel = fn(&mut Matrix, &[f64], &[f64], &[f64], f64, &mut [f64]);

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for relative gradient error.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub kernel: RecurrentKernel,
    /// Directory searched for `wikipedia.csv` and `uci.csv`.
    pub data_dir: Option<PathBuf>,
    /// Run only properties whose qualified name contains this.
    pub filter: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            kernel: recurrent_step,
            data_dir: None,
            filter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail { seed: u64, detail: String },
    Skip { reason: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub module: &'static str,
    pub family: &'static str,
    pub name: &'static str,
    pub guards: &'static str,
    pub trials: usize,
    pub outcome: Outcome,
}

impl PropertyResult {
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.module, self.name)
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Outcome::Pass => format!("PASS {} ({} trials)", self.qualified(), self.trials),
            Outcome::Fail { seed, detail } => format!("FAIL {} seed={seed}: {detail}", self.qualified()),
            Outcome::Skip { reason } => format!("SKIP {}: {reason}", self.qualified()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| !matches!(r.outcome, Outcome::Fail { .. }))
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| matches!(r.outcome, Outcome::Fail { .. }))
    }

    pub fn families(&self) -> Vec<&'static str> {
        let mut f: Vec<_> = self.results.iter().map(|r| r.family).collect();
        f.dedup();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Markdown table mapping each property to what it checks.
    pub fn traceability_table(&self) -> String {
        let mut out = String::from("| module | family | property | checks | result |\n|---|---|---|---|---|\n");
        for r in &self.results {
            let status = match &r.outcome {
                Outcome::Pass => "pass".to_string(),
                Outcome::Fail { seed, .. } => format!("FAIL (seed {seed})"),
                Outcome::Skip { .. } => "skip".to_string(),
            };
            out.push_str(&format!("| {} | {} | {} | {} | {status} |\n", r.module, r.family, r.name, r.guards));
        }
        out
    }
}

enum Trial {
    Ok,
    Fail(String),
    Skip(String),
}

type Check = fn(&VerifyOptions, u64) -> Trial;

struct Property {
    module: &'static str,
    family: &'static str,
    name: &'static str,
    guards: &'static str,
    trials: usize,
    check: Check,
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Trial::Fail(format!($($msg)+));
        }
    };
}

macro_rules! attempt {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return Trial::Fail(format!("error: {err}")),
        }
    };
}

fn properties() -> Vec<Property> {
    vec![
        Property {
            module: "tensor",
            family: "algebra",
            name: "matmul_associativity",
            guards: "(AB)C equals A(BC) and transposed products agree",
            trials: 50,
            check: matmul_associativity,
        },
        Property {
            module: "tensor",
            family: "normalization",
            name: "layer_norm_moments",
            guards: "layer norm rows have zero mean and unit variance",
            trials: 50,
            check: layer_norm_moments,
        },
        Property {
            module: "tensor",
            family: "normalization",
            name: "group_norm_scale_invariance",
            guards: "group norm ignores positive per-row scaling",
            trials: 50,
            check: group_norm_scale_invariance,
        },
        Property {
            module: "tensor",
            family: "gradients",
            name: "finite_difference_polynomial",
            guards: "central differences match analytic polynomial gradients",
            trials: 50,
            check: finite_difference_polynomial,
        },
        Property {
            module: "tensor",
            family: "determinism",
            name: "rng_streams",
            guards: "seeded draws repeat and derived streams differ",
            trials: 20,
            check: rng_streams,
        },
        Property {
            module: "graph",
            family: "data",
            name: "csv_round_trip",
            guards: "written CSV reloads to the same events",
            trials: 10,
            check: csv_round_trip,
        },
        Property {
            module: "graph",
            family: "data",
            name: "split_conservation",
            guards: "chronological splits keep every event once and in order",
            trials: 30,
            check: split_conservation,
        },
        Property {
            module: "graph",
            family: "causality",
            name: "neighbor_history_causal",
            guards: "neighbor sequences only hold events before the query time",
            trials: 30,
            check: neighbor_history_causal,
        },
        Property {
            module: "graph",
            family: "data",
            name: "dataset_counts",
            guards: "Wikipedia and UCI load with their known event counts",
            trials: 1,
            check: dataset_counts,
        },
        Property {
            module: "retention",
            family: "equivalence",
            name: "paradigm_equivalence",
            guards: "parallel, recurrent and chunkwise retention agree",
            trials: 50,
            check: paradigm_equivalence,
        },
        Property {
            module: "retention",
            family: "causality",
            name: "future_rows_ignored",
            guards: "changing later rows leaves earlier outputs bit-identical",
            trials: 50,
            check: future_rows_ignored,
        },
        Property {
            module: "retention",
            family: "algebra",
            name: "state_additivity",
            guards: "folding two chunks equals folding their concatenation",
            trials: 50,
            check: state_additivity,
        },
        Property {
            module: "retention",
            family: "normalization",
            name: "normalization_neutral_under_gn",
            guards: "score normalization vanishes after group norm",
            trials: 50,
            check: normalization_neutral_under_gn,
        },
        Property {
            module: "retention",
            family: "algebra",
            name: "linear_in_values",
            guards: "retention is linear in V",
            trials: 50,
            check: linear_in_values,
        },
        Property {
            module: "model",
            family: "equivalence",
            name: "stack_equivalence",
            guards: "a two-layer model gives the same embeddings in every paradigm",
            trials: 10,
            check: stack_equivalence,
        },
        Property {
            module: "model",
            family: "normalization",
            name: "mgr_normalization_neutral",
            guards: "MGR output does not depend on score normalization",
            trials: 20,
            check: mgr_normalization_neutral,
        },
        Property {
            module: "model",
            family: "ablation",
            name: "ablations_run",
            guards: "each ablation runs, stays finite and changes the output",
            trials: 5,
            check: ablations_run,
        },
        Property {
            module: "model",
            family: "determinism",
            name: "forward_deterministic",
            guards: "same seed and input give bit-identical embeddings",
            trials: 5,
            check: forward_deterministic,
        },
        Property {
            module: "model",
            family: "state",
            name: "embedding_update_consistent",
            guards: "the stored embedding equals a query after the node's last event",
            trials: 10,
            check: embedding_update_consistent,
        },
        Property {
            module: "training",
            family: "gradients",
            name: "gradient_fidelity",
            guards: "autodiff gradients match central differences for every layer type",
            trials: 2,
            check: gradient_fidelity,
        },
        Property {
            module: "training",
            family: "metrics",
            name: "metric_oracles",
            guards: "AP and AUC match exhaustive pairwise oracles",
            trials: 200,
            check: metric_oracles,
        },
        Property {
            module: "training",
            family: "optimization",
            name: "loss_decreases",
            guards: "training lowers the loss on a small synthetic stream",
            trials: 1,
            check: loss_decreases,
        },
        Property {
            module: "training",
            family: "checkpoint",
            name: "checkpoint_round_trip",
            guards: "a reloaded checkpoint reproduces parameters and metrics exactly",
            trials: 2,
            check: checkpoint_round_trip,
        },
        Property {
            module: "training",
            family: "optimization",
            name: "early_stopping_bound",
            guards: "training stops within patience of the best epoch",
            trials: 1,
            check: early_stopping_bound,
        },
    ]
}

pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(trial as u64)
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut results = Vec::new();
    for p in properties() {
        let qualified = format!("{}.{}", p.module, p.name);
        if let Some(f) = &opts.filter {
            if !qualified.contains(f.as_str()) {
                continue;
            }
        }
        let mut outcome = Outcome::Pass;
        for i in 0..p.trials {
            let seed = trial_seed(opts.seed, i);
            match (p.check)(opts, seed) {
                Trial::Ok => {}
                Trial::Fail(detail) => {
                    outcome = Outcome::Fail { seed, detail };
                    break;
                }
                Trial::Skip(reason) => {
                    outcome = Outcome::Skip { reason };
                    break;
                }
            }
        }
        results.push(PropertyResult {
            module: p.module,
            family: p.family,
            name: p.name,
            guards: p.guards,
            trials: p.trials,
            outcome,
        });
    }
    VerifyReport { results }
}

/// Re-runs one property at one seed.
pub fn replay(opts: &VerifyOptions, qualified: &str, seed: u64) -> Result<Outcome> {
    let p = properties()
        .into_iter()
        .find(|p| format!("{}.{}", p.module, p.name) == qualified)
        .ok_or_else(|| GrnError::InvalidArgument(format!("unknown property `{qualified}`")))?;
    Ok(match (p.check)(opts, seed) {
        Trial::Ok => Outcome::Pass,
        Trial::Fail(detail) => Outcome::Fail { seed, detail },
        Trial::Skip(reason) => Outcome::Skip { reason },
    })
}

pub fn property_names() -> Vec<String> {
    properties().iter().map(|p| format!("{}.{}", p.module, p.name)).collect()
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

// ---- tensor ----

fn matmul_associativity(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let (m, n, p, q) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
    let a = rng.normal_matrix(m, n, 1.0);
    let b = rng.normal_matrix(n, p, 1.0);
    let c = rng.normal_matrix(p, q, 1.0);
    let left = attempt!(attempt!(a.matmul(&b)).matmul(&c));
    let right = attempt!(a.matmul(&attempt!(b.matmul(&c))));
    let d = max_diff(&left, &right);
    ensure!(d < 1e-10, "associativity off by {d:e}");
    let bt = b.transpose();
    let d = max_diff(&attempt!(a.matmul_transposed(&bt)), &attempt!(a.matmul(&b)));
    ensure!(d < 1e-12, "matmul_transposed off by {d:e}");
    let d = max_diff(&attempt!(a.transposed_matmul(&a)), &attempt!(a.transpose().matmul(&a)));
    ensure!(d < 1e-12, "transposed_matmul off by {d:e}");
    Trial::Ok
}

fn layer_norm_moments(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let (r, c) = (1 + rng.below(5), 2 + rng.below(15));
    let shift = rng.uniform(-100.0, 100.0);
    let spread = rng.uniform(0.1, 10.0);
    let x = loop {
        let x = rng.normal_matrix(r, c, spread);
        if min_group_variance(&x, 1) >= 1e-4 {
            break x.map(|v| v + shift);
        }
    };
    let y = attempt!(layer_norm(&x, 1e-12, &vec![1.0; c], &vec![0.0; c]));
    for i in 0..r {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        ensure!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-8, "row {i}: mean {mean:e}, var {var}");
    }
    Trial::Ok
}

fn group_norm_scale_invariance(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let groups = 1 + rng.below(4);
    let c = groups * (3 + rng.below(4));
    let r = 1 + rng.below(5);
    let x = loop {
        let x = rng.normal_matrix(r, c, 1.0);
        if min_group_variance(&x, groups) >= 1e-4 {
            break x;
        }
    };
    let gain: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 1.5)).collect();
    let bias: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let mut scaled = x.clone();
    for i in 0..r {
        let s = rng.uniform(0.01, 100.0);
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let a = attempt!(group_norm(&x, groups, 1e-12, &gain, &bias));
    let b = attempt!(group_norm(&scaled, groups, 1e-12, &gain, &bias));
    let d = max_diff(&a, &b);
    ensure!(d < 1e-6, "scaled rows changed group norm by {d:e}");
    Trial::Ok
}

fn finite_difference_polynomial(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let n = 1 + rng.below(6);
    let coef: Vec<[f64; 3]> = (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let f = |x: &[f64]| {
        x.iter()
            .zip(&coef)
            .map(|(v, c)| c[0] * v + c[1] * v * v + c[2] * v * v * v)
            .sum::<f64>()
    };
    let fd = attempt!(finite_diff_grad(f, &x, 1e-5));
    for (i, (g, c)) in fd.iter().zip(&coef).enumerate() {
        let exact = c[0] + 2.0 * c[1] * x[i] + 3.0 * c[2] * x[i] * x[i];
        ensure!((g - exact).abs() < 1e-7, "coordinate {i}: {g} vs {exact}");
    }
    Trial::Ok
}

fn rng_streams(_: &VerifyOptions, seed: u64) -> Trial {
    let draw = |mut r: RngState| (0..16).map(|_| r.unit()).collect::<Vec<_>>();
    let a = draw(RngState::new(seed));
    ensure!(a == draw(RngState::new(seed)), "same seed gave different draws");
    let base = RngState::new(seed);
    ensure!(draw(base.derive(1)) != draw(base.derive(2)), "derived streams coincide");
    ensure!(draw(base.derive(1)) == draw(base.derive(1)), "derived stream not repeatable");
    Trial::Ok
}

// ---- graph ----

fn small_synth(seed: u64, length: usize) -> Result<EventStream> {
    let params = SynthParams {
        num_users: 4,
        num_items: 6,
        period: 7,
        noise_frac: 0.3,
        length,
        edge_feat_dim: 3,
    };
    synth_generate(&params, &mut RngState::new(seed))
}

fn csv_round_trip(_: &VerifyOptions, seed: u64) -> Trial {
    let mut stream = attempt!(small_synth(seed, 60));
    let mut rng = RngState::new(seed ^ 0x5eed);
    for e in &mut stream.events {
        e.t += rng.unit();
        if rng.unit() < 0.5 {
            e.label = Some(rng.below(3) as i64);
        }
    }
    let path = std::env::temp_dir().join(format!("grn-verify-{}-{seed}.csv", std::process::id()));
    attempt!(stream.write_csv(&path));
    let loaded = load_csv(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = attempt!(loaded);
    ensure!(loaded.len() == stream.len(), "{} events reloaded, {} written", loaded.len(), stream.len());
    ensure!(loaded.edge_feat_dim == stream.edge_feat_dim, "feature width changed");
    for (i, (a, b)) in stream.events.iter().zip(&loaded.events).enumerate() {
        let same = stream.raw_ids[a.src] == loaded.raw_ids[b.src]
            && stream.raw_ids[a.dst] == loaded.raw_ids[b.dst]
            && a.t.to_bits() == b.t.to_bits()
            && a.label == b.label
            && a.edge_feat.iter().zip(&b.edge_feat).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "event {i} differs after reload");
    }
    Trial::Ok
}

fn split_conservation(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let stream = attempt!(small_synth(seed, 20 + rng.below(200)));
    let train = rng.uniform(0.3, 0.8);
    let val = rng.uniform(0.0, 1.0 - train);
    let mode = if rng.unit() < 0.5 {
        SplitMode::Transductive
    } else {
        SplitMode::Inductive
    };
    let spec = SplitSpec {
        train_frac: train,
        val_frac: val,
        test_frac: 1.0 - train - val,
        inductive_node_frac: 0.2,
        mode,
    };
    let split = attempt!(chronological_split(&stream, &spec, &mut rng));
    let total = split.train.len() + split.val.len() + split.test.len() + split.removed_train_events;
    ensure!(total == stream.len(), "{total} events after split, {} before", stream.len());
    let last_train = split.train.events.iter().map(|e| e.t).fold(f64::NEG_INFINITY, f64::max);
    let first_val = split.val.events.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    let last_val = split.val.events.iter().map(|e| e.t).fold(f64::NEG_INFINITY, f64::max);
    let first_test = split.test.events.iter().map(|e| e.t).fold(f64::INFINITY, f64::min);
    ensure!(last_train <= first_val && last_train <= first_test, "train overlaps later segments");
    ensure!(last_val <= first_test, "validation overlaps test");
    let leaked = split
        .train
        .events
        .iter()
        .any(|e| split.unobserved.contains(&e.src) || split.unobserved.contains(&e.dst));
    ensure!(!leaked, "unobserved node appears in training");
    Trial::Ok
}

fn neighbor_history_causal(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let stream = attempt!(small_synth(seed, 80));
    let node = rng.below(stream.num_nodes);
    let t = rng.uniform(0.0, 90.0);
    let seq = attempt!(build_neighbor_sequence(&stream, node, t, None));
    ensure!(seq.times.iter().all(|&s| s < t), "history holds an event at or after {t}");
    let expected = stream
        .events
        .iter()
        .filter(|e| e.t < t && (e.src == node || e.dst == node))
        .count();
    ensure!(seq.len() == expected, "{} neighbors, expected {expected}", seq.len());
    ensure!(seq.deltas.iter().all(|&d| d > 0.0), "non-positive interval");
    Trial::Ok
}

fn dataset_counts(opts: &VerifyOptions, _: u64) -> Trial {
    let Some(dir) = &opts.data_dir else {
        return Trial::Skip("no data directory given".into());
    };
    let mut checked = 0;
    for (file, events, feats) in [("wikipedia.csv", 157_474, Some(172)), ("uci.csv", 59_835, None)] {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let s = attempt!(load_csv(&path));
        ensure!(s.len() == events, "{file}: {} events, expected {events}", s.len());
        if let Some(f) = feats {
            ensure!(s.edge_feat_dim == f, "{file}: {} features, expected {f}", s.edge_feat_dim);
        }
        checked += 1;
    }
    if checked == 0 {
        return Trial::Skip(format!("no dataset files in {}", dir.display()));
    }
    Trial::Ok
}

// ---- retention ----

struct RetentionCase {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<f64>,
    mask: DecayMask,
    s_in: Matrix,
}

fn retention_case(rng: &mut RngState, with_state: bool) -> Result<RetentionCase> {
    let l = [1, 2, 3, 17, 64][rng.below(5)];
    let d = [1, 4, 8][rng.below(3)];
    let scale = 1.0 / (d as f64).sqrt();
    let policy = if rng.unit() < 0.5 {
        DecayPolicy::Unit
    } else {
        DecayPolicy::TimeDecay {
            lambda: rng.uniform(0.01, 1.0),
        }
    };
    let mut times: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 10.0)).collect();
    times.sort_by(f64::total_cmp);
    let anchor = times[l - 1];
    let deltas: Vec<f64> = times.iter().map(|t| anchor - t).collect();
    let mask = build_decay_mask(&deltas, policy)?;
    let weights = policy.weights(&deltas);
    let s_in = if with_state {
        rng.normal_matrix(d, d, scale)
    } else {
        Matrix::zeros(d, d)
    };
    Ok(RetentionCase {
        q: rng.normal_matrix(l, d, scale),
        k: rng.normal_matrix(l, d, scale),
        v: rng.normal_matrix(l, d, 1.0),
        weights,
        mask,
        s_in,
    })
}

/// Recurrent retention driven by an arbitrary step kernel.
pub fn recurrent_with(
    kernel: RecurrentKernel,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    s_in: &Matrix,
) -> (Matrix, Matrix) {
    let mut s = s_in.clone();
    let mut out = Matrix::zeros(weights.len(), v.cols());
    for (t, &w) in weights.iter().enumerate() {
        kernel(&mut s, q.row(t), k.row(t), v.row(t), w, out.row_mut(t));
    }
    (out, s)
}

fn paradigm_equivalence(opts: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let c = attempt!(retention_case(&mut rng, true));
    let l = c.weights.len();
    let (rec, s_rec) = recurrent_with(opts.kernel, &c.q, &c.k, &c.v, &c.weights, &c.s_in);
    let (par, s_par) = attempt!(retain(&c.q, &c.k, &c.v, &c.weights, &c.s_in, Paradigm::Parallel, false));
    // Direct double sum: out_i = Σ_j w_j (q_i·k_j) v_j + q_i S_in.
    let mut direct = attempt!(c.q.matmul(&c.s_in));
    for i in 0..l {
        for j in 0..=i {
            let a = c.weights[j] * crate::tensor::dot(c.q.row(i), c.k.row(j));
            for (o, &x) in direct.row_mut(i).iter_mut().zip(c.v.row(j)) {
                *o += a * x;
            }
        }
    }
    let d = max_diff(&direct, &par);
    ensure!(d < 1e-9, "parallel vs direct sum: {d:e} (L={l})");
    let masked = attempt!(retention_parallel(&c.q, &c.k, &c.v, &c.mask, false));
    let from_state = attempt!(c.q.matmul(&c.s_in));
    let d = max_diff(&attempt!(masked.add(&from_state)), &par);
    ensure!(d < 1e-9, "masked parallel form vs segmented parallel: {d:e}");
    let d = max_diff(&rec, &par);
    ensure!(d < 1e-9, "recurrent vs parallel: {d:e} (L={l})");
    let d = max_diff(&s_rec, &s_par);
    ensure!(d < 1e-9, "recurrent vs parallel final state: {d:e}");
    for b in [1, 2, 7, l.max(1)] {
        let (chunk, s_chunk) = attempt!(retain(&c.q, &c.k, &c.v, &c.weights, &c.s_in, Paradigm::Chunkwise(b), false));
        let d = max_diff(&rec, &chunk).max(max_diff(&s_rec, &s_chunk));
        ensure!(d < 1e-9, "recurrent vs chunkwise({b}): {d:e} (L={l})");
    }
    Trial::Ok
}

fn future_rows_ignored(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let c = attempt!(retention_case(&mut rng, true));
    let l = c.weights.len();
    if l < 2 {
        return Trial::Ok;
    }
    let cut = 1 + rng.below(l - 1);
    let (mut k2, mut v2) = (c.k.clone(), c.v.clone());
    let mut w2 = c.weights.clone();
    for r in cut..l {
        k2.row_mut(r).iter_mut().for_each(|x| *x += rng.normal());
        v2.row_mut(r).iter_mut().for_each(|x| *x = rng.normal() * 1e3);
        w2[r] = rng.uniform(0.0, 2.0);
    }
    let normalized = rng.unit() < 0.5;
    for p in [Paradigm::Parallel, Paradigm::Recurrent, Paradigm::Chunkwise(1 + rng.below(5))] {
        let (a, _) = attempt!(retain(&c.q, &c.k, &c.v, &c.weights, &c.s_in, p, normalized));
        let (b, _) = attempt!(retain(&c.q, &k2, &v2, &w2, &c.s_in, p, normalized));
        for r in 0..cut {
            let same = a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same, "{p}: row {r} changed after editing rows from {cut}");
        }
    }
    Trial::Ok
}

fn state_additivity(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let c = attempt!(retention_case(&mut rng, true));
    let l = c.weights.len();
    let cut = rng.below(l + 1);
    let whole = attempt!(accumulate_state(&c.s_in, &c.k, &c.v, &c.weights));
    let first = attempt!(accumulate_state(
        &c.s_in,
        &attempt!(c.k.slice_rows(0, cut)),
        &attempt!(c.v.slice_rows(0, cut)),
        &c.weights[..cut]
    ));
    let second = attempt!(accumulate_state(
        &first,
        &attempt!(c.k.slice_rows(cut, l)),
        &attempt!(c.v.slice_rows(cut, l)),
        &c.weights[cut..]
    ));
    let d = max_diff(&whole, &second);
    ensure!(d < 1e-12, "split fold differs by {d:e}");
    Trial::Ok
}

/// Smallest per-row, per-group variance of `x`.
fn min_group_variance(x: &Matrix, groups: usize) -> f64 {
    let w = x.cols() / groups;
    let mut min = f64::INFINITY;
    for r in 0..x.rows() {
        for seg in x.row(r).chunks(w) {
            let m = seg.iter().sum::<f64>() / w as f64;
            min = min.min(seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64);
        }
    }
    min
}

/// Retention inputs whose unnormalized output has no near-constant group,
/// since there `eps` dominates group norm whether or not scores are normalized.
pub fn normalization_case(rng: &mut RngState) -> Result<(Matrix, Matrix, Matrix, DecayMask, usize)> {
    loop {
        let l = 1 + rng.below(64);
        let groups = 1 + rng.below(2);
        let d = groups * [4, 8][rng.below(2)];
        let lambda = rng.uniform(0.0, 0.3);
        let mut deltas: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 10.0)).collect();
        deltas.sort_by(|a, b| b.total_cmp(a));
        let mask = build_decay_mask(&deltas, DecayPolicy::TimeDecay { lambda })?;
        let q = rng.normal_matrix(l, d, 1.0);
        let k = rng.normal_matrix(l, d, 1.0);
        let v = rng.normal_matrix(l, d, 1.0);
        let plain = retention_parallel(&q, &k, &v, &mask, false)?;
        if min_group_variance(&plain, groups) >= 1e-4 {
            return Ok((q, k, v, mask, groups));
        }
    }
}

fn normalization_neutral_under_gn(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let (q, k, v, mask, groups) = attempt!(normalization_case(&mut rng));
    let d = v.cols();
    let plain = attempt!(retention_parallel(&q, &k, &v, &mask, false));
    let norm = attempt!(retention_parallel(&q, &k, &v, &mask, true));
    let (g, b) = (vec![1.0; d], vec![0.0; d]);
    let a = attempt!(group_norm(&plain, groups, 1e-12, &g, &b));
    let n = attempt!(group_norm(&norm, groups, 1e-12, &g, &b));
    let diff = max_diff(&a, &n);
    ensure!(diff < 1e-6, "normalized and plain differ by {diff:e} after group norm (L={}, d={d})", v.rows());
    Trial::Ok
}

fn linear_in_values(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let c = attempt!(retention_case(&mut rng, false));
    let v2 = rng.normal_matrix(c.v.rows(), c.v.cols(), 1.0);
    let (a, b) = (rng.normal(), rng.normal());
    let mixed = attempt!(c.v.scale(a).add(&v2.scale(b)));
    let p = Paradigm::Chunkwise(1 + rng.below(4));
    let (o1, _) = attempt!(retain(&c.q, &c.k, &c.v, &c.weights, &c.s_in, p, false));
    let (o2, _) = attempt!(retain(&c.q, &c.k, &v2, &c.weights, &c.s_in, p, false));
    let (om, _) = attempt!(retain(&c.q, &c.k, &mixed, &c.weights, &c.s_in, p, false));
    let expect = attempt!(o1.scale(a).add(&o2.scale(b)));
    let d = max_diff(&om, &expect);
    ensure!(d < 1e-9, "superposition off by {d:e}");
    Trial::Ok
}

// ---- model ----

fn tiny_config(rng: &mut RngState) -> GrnConfig {
    let heads = 1 + rng.below(2);
    let d = heads * [2, 4][rng.below(2)];
    GrnConfig {
        num_layers: 2,
        d_model: d,
        time_dim: d,
        heads,
        gn_groups: heads,
        dropout: 0.0,
        decay: if rng.unit() < 0.5 {
            DecayPolicy::Unit
        } else {
            DecayPolicy::TimeDecay { lambda: 0.3 }
        },
        edge_feat_dim: 2,
        node_feat_dim: 3,
        ..GrnConfig::default()
    }
}

fn random_events(rng: &mut RngState, n: usize, nodes: usize, feat: usize) -> Vec<Event> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.uniform(0.0, 2.0);
            let src = rng.below(nodes);
            let mut dst = rng.below(nodes);
            if dst == src {
                dst = (dst + 1) % nodes;
            }
            let mut e = Event::new(src, dst, t);
            e.edge_feat = (0..feat).map(|_| rng.normal()).collect();
            e
        })
        .collect()
}

fn embeddings_for(
    model: &GrnModel,
    events: &[Event],
    nodes: usize,
    feats: &Matrix,
    batch: usize,
    p: Paradigm,
) -> Result<(Matrix, Matrix)> {
    let mut table = model.new_state_table(nodes);
    let mut parts = Vec::new();
    for b in events.chunks(batch) {
        let (zs, zd) = model.embed_batch(b, &mut table, Some(feats), p)?;
        parts.push(zs);
        parts.push(zd);
    }
    let z = Matrix::concat_rows(&parts.iter().collect::<Vec<_>>())?;
    Ok((z, table.embeddings))
}

fn stack_equivalence(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let cfg = tiny_config(&mut rng);
    let model = attempt!(GrnModel::new(cfg, &mut rng));
    let nodes = 6;
    let events = random_events(&mut rng, 30, nodes, 2);
    let feats = rng.normal_matrix(nodes, 3, 1.0);
    let batch = 1 + rng.below(12);
    let (z_ref, e_ref) = attempt!(embeddings_for(&model, &events, nodes, &feats, batch, Paradigm::Parallel));
    for p in [Paradigm::Recurrent, Paradigm::Chunkwise(1), Paradigm::Chunkwise(3)] {
        let (z, e) = attempt!(embeddings_for(&model, &events, nodes, &feats, batch, p));
        let d = max_diff(&z, &z_ref).max(max_diff(&e, &e_ref));
        ensure!(d < 1e-7, "{p} vs parallel: {d:e}");
    }
    Trial::Ok
}

/// Unnormalized multi-head retention output before group norm.
fn mgr_pre_norm(model: &GrnModel, x_dst: &Matrix, x_src: &Matrix, deltas: &[f64]) -> Result<Matrix> {
    let cfg = &model.config;
    let (hw, hd) = (cfg.head_width(), cfg.head_dim());
    let weights = cfg.decay.weights(deltas);
    let mut parts = Vec::new();
    for (h, ids) in model.param_handles().layers[0].heads.iter().enumerate() {
        let s = &model.store;
        let xq = x_dst.slice_cols(h * hw, h * hw + hd)?;
        let xs = x_src.slice_cols(h * hw, h * hw + hd)?;
        let q = xq.matmul(s.get(ids.w_q))?.add_row(s.get(ids.b_q).data())?;
        let k = xs.matmul(s.get(ids.w_k))?.add_row(s.get(ids.b_k).data())?;
        let v = xs.matmul(s.get(ids.w_v))?.add_row(s.get(ids.b_v).data())?;
        let q = q.gather_rows(&vec![0; x_src.rows()]);
        parts.push(retain(&q, &k, &v, &weights, &Matrix::zeros(hd, hd), Paradigm::Parallel, false)?.0);
    }
    Matrix::concat_cols(&parts.iter().collect::<Vec<_>>())
}

fn mgr_normalization_neutral(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let heads = 1 + rng.below(2);
    let d = heads * [4, 8][rng.below(2)];
    let mut cfg = GrnConfig {
        num_layers: 1,
        d_model: d,
        time_dim: d,
        heads,
        gn_groups: heads,
        dropout: 0.0,
        decay: DecayPolicy::TimeDecay { lambda: 0.2 },
        norm_eps: 1e-12,
        ..GrnConfig::default()
    };
    let plain = attempt!(GrnModel::new(cfg.clone(), &mut rng.clone()));
    cfg.normalized_scores = true;
    let normed = attempt!(GrnModel::new(cfg.clone(), &mut rng));
    let (x_dst, x_src, deltas) = loop {
        let l = 1 + rng.below(20);
        let x_dst = rng.normal_matrix(1, d, 1.0);
        let x_src = rng.normal_matrix(l, d, 1.0);
        let mut deltas: Vec<f64> = (0..l).map(|_| rng.uniform(0.0, 5.0)).collect();
        deltas.sort_by(|a, b| b.total_cmp(a));
        let pre = attempt!(mgr_pre_norm(&plain, &x_dst, &x_src, &deltas));
        if min_group_variance(&pre, cfg.gn_groups) >= 1e-4 {
            break (x_dst, x_src, deltas);
        }
    };
    let states = vec![Matrix::zeros(cfg.head_dim(), cfg.head_dim()); cfg.effective_heads()];
    let (a, _) = attempt!(plain.mgr_forward(0, &x_dst, &x_src, &deltas, &states, Paradigm::Parallel));
    let (b, _) = attempt!(normed.mgr_forward(0, &x_dst, &x_src, &deltas, &states, Paradigm::Parallel));
    let diff = max_diff(&a, &b);
    ensure!(diff < 1e-6, "normalized MGR differs by {diff:e}");
    Trial::Ok
}

/// The four ablation variants, named by the component they remove.
pub fn ablations(base: &GrnConfig) -> Vec<(&'static str, GrnConfig)> {
    vec![
        (
            "no_temporal_encoding",
            GrnConfig {
                use_temporal_encoding: false,
                ..base.clone()
            },
        ),
        (
            "no_hswish_gate",
            GrnConfig {
                use_hswish_gate: false,
                ..base.clone()
            },
        ),
        (
            "single_head",
            GrnConfig {
                multi_head: false,
                ..base.clone()
            },
        ),
        (
            "reduced_head_dim",
            GrnConfig {
                reduce_head_dim: true,
                ..base.clone()
            },
        ),
    ]
}

fn ablations_run(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let base = GrnConfig {
        num_layers: 2,
        d_model: 8,
        time_dim: 8,
        heads: 2,
        gn_groups: 2,
        dropout: 0.0,
        edge_feat_dim: 2,
        node_feat_dim: 3,
        ..GrnConfig::default()
    };
    let nodes = 6;
    let events = random_events(&mut rng, 24, nodes, 2);
    let feats = rng.normal_matrix(nodes, 3, 1.0);
    let full = attempt!(GrnModel::new(base.clone(), &mut RngState::new(seed)));
    let (z_full, _) = attempt!(embeddings_for(&full, &events, nodes, &feats, 8, Paradigm::Recurrent));
    for (name, cfg) in ablations(&base) {
        let model = attempt!(GrnModel::new(cfg, &mut RngState::new(seed)));
        let (z, _) = attempt!(embeddings_for(&model, &events, nodes, &feats, 8, Paradigm::Recurrent));
        ensure!(z.is_finite(), "{name}: non-finite embeddings");
        ensure!(max_diff(&z, &z_full) > 1e-9, "{name}: output identical to the full model");
    }
    Trial::Ok
}

fn forward_deterministic(_: &VerifyOptions, seed: u64) -> Trial {
    let run = || -> Result<Matrix> {
        let mut rng = RngState::new(seed);
        let cfg = GrnConfig {
            dropout: 0.2,
            ..tiny_config(&mut rng)
        };
        let model = GrnModel::new(cfg, &mut rng)?;
        let events = random_events(&mut rng, 10, 5, 2);
        let table = model.new_state_table(5);
        let mut tape = Tape::new();
        let queries: Vec<(usize, f64)> = events.iter().map(|e| (e.dst, e.t)).collect();
        let mut drop = rng.derive(9);
        let fwd = model.forward(&mut tape, &events, &queries, &table, None, Paradigm::Chunkwise(3), Some(&mut drop))?;
        Ok(tape.value(fwd.z).clone())
    };
    let a = attempt!(run());
    let b = attempt!(run());
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same, "two identical runs differ");
    Trial::Ok
}

fn embedding_update_consistent(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let cfg = tiny_config(&mut rng);
    let model = attempt!(GrnModel::new(cfg, &mut rng));
    let nodes = 5;
    let events = random_events(&mut rng, 12, nodes, 2);
    let table = model.new_state_table(nodes);
    let after = events.last().unwrap().t + 1.0;
    let queries: Vec<(usize, f64)> = (0..nodes).map(|n| (n, after)).collect();
    let mut tape = Tape::new();
    let fwd = attempt!(model.forward(&mut tape, &events, &queries, &table, None, Paradigm::Recurrent, None));
    let z = tape.value(fwd.z);
    for (i, &n) in fwd.update.nodes.iter().enumerate() {
        ensure!(z.row(n) == &fwd.update.embeddings[i][..], "node {n}: stored embedding differs from query");
    }
    Trial::Ok
}

// ---- training ----

fn gradient_fidelity(_: &VerifyOptions, seed: u64) -> Trial {
    let checks = attempt!(gradient_suite(seed));
    for c in &checks {
        ensure!(c.coords >= 20, "{}: only {} coordinates checked", c.name, c.coords);
        ensure!(
            c.passed(),
            "{}: relative error {:e} at {}",
            c.name,
            c.max_rel_err,
            c.worst
        );
    }
    Trial::Ok
}

fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    // Rank of i: items with a higher score, or an equal score earlier in the input.
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let pos = labels.iter().filter(|&&l| l).count();
    let mut total = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        let rank = (0..scores.len()).filter(|&j| ahead(i, j)).count();
        let hits = (0..scores.len()).filter(|&j| labels[j] && ahead(i, j)).count();
        total += hits as f64 / rank as f64;
    }
    total / pos as f64
}

fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1.0;
            wins += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn metric_oracles(_: &VerifyOptions, seed: u64) -> Trial {
    let mut rng = RngState::new(seed);
    let n = 2 + rng.below(19);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.unit() < 0.5).collect();
    labels[0] = true;
    labels[1] = false;
    rng.shuffle(&mut labels);
    let scores: Vec<f64> = (0..n).map(|_| (rng.below(6) as f64) / 5.0).collect();
    let ap = attempt!(average_precision(&scores, &labels));
    let auc = attempt!(auc_roc(&scores, &labels));
    let (ap_o, auc_o) = (ap_oracle(&scores, &labels), auc_oracle(&scores, &labels));
    ensure!((ap - ap_o).abs() < 1e-12, "AP {ap} vs oracle {ap_o}");
    ensure!((auc - auc_o).abs() < 1e-12, "AUC {auc} vs oracle {auc_o}");
    Trial::Ok
}

fn small_training(seed: u64, epochs: usize, patience: usize, lr: f64) -> (EventStream, GrnConfig, TrainConfig) {
    let params = SynthParams {
        num_users: 4,
        num_items: 8,
        length: 400,
        edge_feat_dim: 4,
        ..SynthParams::default()
    };
    let stream = synth_generate(&params, &mut RngState::new(seed)).expect("valid synthetic parameters");
    let model = GrnConfig {
        num_layers: 1,
        d_model: 8,
        time_dim: 8,
        heads: 2,
        gn_groups: 2,
        dropout: 0.0,
        edge_feat_dim: 4,
        node_feat_dim: 1,
        ..GrnConfig::default()
    };
    let train = TrainConfig {
        epochs,
        patience,
        batch_size: 50,
        seed,
        lr,
        weight_decay: 0.0,
        task: Task::LinkPrediction,
        ..TrainConfig::default()
    };
    (stream, model, train)
}

fn loss_decreases(_: &VerifyOptions, seed: u64) -> Trial {
    let (stream, model, train) = small_training(seed, 6, 100, 1e-2);
    let out = attempt!(fit(&stream, &model, &train, None, &mut |_| {}));
    let losses: Vec<f64> = out.history.iter().filter_map(|r| r.train_loss).collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    ensure!(last < first, "train loss went from {first} to {last}");
    Trial::Ok
}

fn checkpoint_round_trip(_: &VerifyOptions, seed: u64) -> Trial {
    let (stream, model_cfg, train) = small_training(seed, 1, 1, 1e-3);
    let out = attempt!(fit(&stream, &model_cfg, &train, None, &mut |_| {}));
    let ckpt = Checkpoint::new(&out.model, Some(&train), Some(&out.adam));
    let text = attempt!(ckpt.to_json());
    let back = attempt!(Checkpoint::from_json(&text));
    let restored = attempt!(back.to_model());
    let same = out
        .model
        .store
        .flatten()
        .iter()
        .zip(restored.store.flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(same, "parameters changed across the round trip");
    let a = attempt!(evaluate(&out.model, &stream, &train, Paradigm::Recurrent, None));
    let b = attempt!(evaluate(&restored, &stream, &train, Paradigm::Recurrent, None));
    ensure!(
        a.ap.to_bits() == b.ap.to_bits() && a.auc_roc.to_bits() == b.auc_roc.to_bits(),
        "metrics differ after reload"
    );
    Trial::Ok
}

fn early_stopping_bound(_: &VerifyOptions, seed: u64) -> Trial {
    let (stream, model, train) = small_training(seed, 12, 2, 1e-9);
    let out = attempt!(fit(&stream, &model, &train, None, &mut |_| {}));
    let bound = out.best_epoch + train.patience + train.eval_every;
    ensure!(
        out.epochs_run <= bound,
        "ran {} epochs, best {} with patience {}",
        out.epochs_run,
        out.best_epoch,
        train.patience
    );
    Trial::Ok
}

// ---- gradient suite ----

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Fixed nonlinear read-out turning a matrix into a scalar loss.
struct Readout {
    proj: Matrix,
    labels: Vec<f64>,
}

impl Readout {
    fn new(rng: &mut RngState, rows: usize, cols: usize) -> Self {
        Readout {
            proj: rng.normal_matrix(cols, 1, 1.0),
            labels: (0..rows).map(|_| if rng.unit() < 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    fn loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = tape.constant(self.proj.clone());
        let y = tape.matmul(x, p)?;
        tape.bce_with_logits(y, self.labels.clone())
    }
}

type Build<'a> = dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a;

fn check_gradient(
    name: &str,
    store: &ParamStore,
    prefixes: &[&str],
    max_coords: usize,
    rng: &mut RngState,
    build: &Build,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let analytic = tape.backward(loss, store)?.flatten();
    let mut coords: Vec<usize> = (0..store.num_scalars())
        .filter(|&i| {
            let n = store.name_of_flat(i).unwrap_or("");
            prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p))
        })
        .collect();
    rng.shuffle(&mut coords);
    coords.truncate(max_coords);
    let base = store.flatten();
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    for &i in &coords {
        let fd = finite_diff_grad(
            |x| {
                let mut flat = base.clone();
                flat[i] = x[0];
                probe.assign_flat(&flat).expect("same length");
                let mut t = Tape::new();
                match build(&mut t, &probe) {
                    Ok(l) => t.value(l).get(0, 0),
                    Err(_) => f64::NAN,
                }
            },
            &[base[i]],
            GRAD_STEP,
        )?[0];
        let err = relative_error(analytic[i], fd);
        if err >= worst.0 || worst.1.is_empty() {
            worst = (err, format!("{}[{i}]", store.name_of_flat(i).unwrap_or("?")));
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        coords: coords.len(),
        max_rel_err: worst.0,
        worst: worst.1,
    })
}

fn grad_model_config() -> GrnConfig {
    GrnConfig {
        num_layers: 1,
        d_model: 4,
        time_dim: 4,
        heads: 2,
        gn_groups: 1,
        dropout: 0.1,
        decay: DecayPolicy::TimeDecay { lambda: 0.2 },
        edge_feat_dim: 2,
        node_feat_dim: 3,
        num_classes: 3,
        ..GrnConfig::default()
    }
}

/// Finite-difference checks for each layer type and a composed one-layer
/// model (`d_model = 4`, three events, dropout masks replayed).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngState::new(seed);
    let mut out = Vec::new();

    // Linear layer.
    let mut store = ParamStore::new();
    let x = store.add("x", rng.normal_matrix(5, 4, 1.0));
    let w = store.add("w", rng.normal_matrix(4, 3, 0.5));
    let b = store.add("b", rng.normal_matrix(1, 3, 0.5));
    let ro = Readout::new(&mut rng, 5, 3);
    out.push(check_gradient("linear", &store, &[], 64, &mut rng, &|t, s| {
        let (x, w, b) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.linear(x, w, Some(b))?;
        ro.loss(t, y)
    })?);

    // Layer and group normalization.
    for (name, groups) in [("layer_norm", 1), ("group_norm", 2)] {
        let mut store = ParamStore::new();
        let x = store.add("x", rng.normal_matrix(4, 6, 1.0));
        let g = store.add("gain", rng.uniform_matrix(1, 6, 0.5, 1.5));
        let b = store.add("bias", rng.normal_matrix(1, 6, 0.5));
        let ro = Readout::new(&mut rng, 4, 6);
        out.push(check_gradient(name, &store, &[], 64, &mut rng, &|t, s| {
            let (x, g, b) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let y = if groups == 1 {
                t.layer_norm(x, g, b, 1e-5)?
            } else {
                t.group_norm(x, groups, g, b, 1e-5)?
            };
            ro.loss(t, y)
        })?);
    }

    // hswish, sampled away from its kinks at ±3.
    let mut store = ParamStore::new();
    let data: Vec<f64> = (0..30)
        .map(|_| loop {
            let v = rng.uniform(-5.0, 5.0);
            if (v.abs() - 3.0).abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    let x = store.add("x", Matrix::from_vec(6, 5, data)?);
    let ro = Readout::new(&mut rng, 6, 5);
    out.push(check_gradient("hswish", &store, &[], 64, &mut rng, &|t, s| {
        let x = t.param(s, x);
        let y = t.hswish(x);
        ro.loss(t, y)
    })?);

    // Fused retention op over two segments with carried states.
    for (name, paradigm, normalized) in [
        ("retention_parallel", Paradigm::Parallel, false),
        ("retention_recurrent", Paradigm::Recurrent, false),
        ("retention_chunkwise", Paradigm::Chunkwise(2), false),
        ("retention_normalized", Paradigm::Chunkwise(3), true),
    ] {
        let mut store = ParamStore::new();
        let q = store.add("q", rng.normal_matrix(7, 3, 0.6));
        let k = store.add("k", rng.normal_matrix(7, 3, 0.6));
        let v = store.add("v", rng.normal_matrix(7, 3, 1.0));
        let segs: Vec<RetentionSegment> = [(0, 3), (3, 4)]
            .iter()
            .map(|&(start, len)| RetentionSegment {
                start,
                len,
                weights: (0..len).map(|_| rng.uniform(0.2, 1.0)).collect(),
                s_in: rng.normal_matrix(3, 3, 0.5),
            })
            .collect();
        let ro = Readout::new(&mut rng, 7, 3);
        out.push(check_gradient(name, &store, &[], 64, &mut rng, &|t, s| {
            let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
            let (o, _) = t.retention(q, k, v, segs.clone(), paradigm, normalized)?;
            ro.loss(t, o)
        })?);
    }

    // Model components share one small model.
    let cfg = grad_model_config();
    let mut model = GrnModel::new(cfg.clone(), &mut rng)?;
    for v in model.store.values_mut() {
        // Move norm gains and biases off their identity initialization.
        v.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.normal());
    }
    let hd = cfg.head_dim();
    let rows = 6;
    let queries = rng.normal_matrix(rows, cfg.d_model, 1.0);
    let messages = rng.normal_matrix(rows, cfg.d_model, 1.0);
    let segments = vec![
        SegmentSpec {
            start: 0,
            len: 2,
            weights: vec![1.0, 0.7],
        },
        SegmentSpec {
            start: 2,
            len: 4,
            weights: vec![1.0, 0.9, 0.5, 0.8],
        },
    ];
    let s_in: Vec<Vec<Matrix>> = (0..cfg.effective_heads())
        .map(|_| (0..2).map(|_| rng.normal_matrix(hd, hd, 0.5)).collect())
        .collect();
    let ro = Readout::new(&mut rng, rows, cfg.d_model);
    let with_store = |s: &ParamStore| {
        let mut m = model.clone();
        m.store = s.clone();
        m
    };
    out.push(check_gradient("mgr", &model.store, &["layer0.head", "layer0.gn"], 40, &mut rng, &|t, s| {
        let m = with_store(s);
        let (q, msg) = (t.constant(queries.clone()), t.constant(messages.clone()));
        let (o, _) = m.mgr(t, 0, q, msg, None, &segments, &s_in, Paradigm::Chunkwise(2))?;
        ro.loss(t, o)
    })?);
    let drop = rng.derive(77);
    out.push(check_gradient("block", &model.store, &["layer0."], 40, &mut rng, &|t, s| {
        let m = with_store(s);
        let (q, msg) = (t.constant(queries.clone()), t.constant(messages.clone()));
        let mut d = drop.clone();
        let (o, _) = m.block(t, 0, q, msg, None, &segments, &s_in, Paradigm::Recurrent, Some(&mut d))?;
        ro.loss(t, o)
    })?);

    let zs = rng.normal_matrix(5, cfg.d_model, 1.0);
    let zd = rng.normal_matrix(5, cfg.d_model, 1.0);
    let link_labels: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
    out.push(check_gradient("link_head", &model.store, &["link."], 40, &mut rng, &|t, s| {
        let m = with_store(s);
        let (a, b) = (t.constant(zs.clone()), t.constant(zd.clone()));
        let logits = m.link_logits(t, a, b)?;
        t.bce_with_logits(logits, link_labels.clone())
    })?);
    let classes = vec![0, 2, 1, 2, 0];
    out.push(check_gradient("node_head", &model.store, &["node."], 40, &mut rng, &|t, s| {
        let m = with_store(s);
        let z = t.constant(zs.clone());
        let logits = m.node_logits(t, z)?;
        t.softmax_xent(logits, classes.clone())
    })?);

    // Composed model: messages, one block, output norm and link head.
    let nodes = 5;
    let mut table = model.new_state_table(nodes);
    table.embeddings = rng.normal_matrix(nodes, cfg.d_model, 1.0);
    for n in 0..nodes {
        for h in 0..cfg.effective_heads() {
            *table.state_mut(n, 0, h) = rng.normal_matrix(hd, hd, 0.3);
        }
    }
    let feats = rng.normal_matrix(nodes, cfg.node_feat_dim, 1.0);
    let mut events = vec![Event::new(0, 3, 1.0), Event::new(1, 3, 2.5), Event::new(0, 4, 4.0)];
    for e in &mut events {
        e.edge_feat = vec![rng.normal(), rng.normal()];
    }
    let queries: Vec<(usize, f64)> = events
        .iter()
        .map(|e| (e.src, e.t))
        .chain(events.iter().map(|e| (e.dst, e.t)))
        .chain(events.iter().map(|e| (2, e.t)))
        .collect();
    let drop = rng.derive(78);
    out.push(check_gradient(
        "composed_model",
        &model.store,
        &["msg.", "layer0.", "out_norm.", "link."],
        48,
        &mut rng,
        &|t, s| {
            let m = with_store(s);
            let mut d = drop.clone();
            let fwd = m.forward(t, &events, &queries, &table, Some(&feats), Paradigm::Chunkwise(2), Some(&mut d))?;
            let src = t.gather_rows(fwd.z, vec![0, 1, 2, 0, 1, 2])?;
            let dst = t.gather_rows(fwd.z, vec![3, 4, 5, 6, 7, 8])?;
            let logits = m.link_logits(t, src, dst)?;
            t.bce_with_logits(logits, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        },
    )?);
    Ok(out)
}
