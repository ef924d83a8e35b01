//! Streaming-inference benchmark across retention paradigms.
//!
//! For a history of length `L`, each timed event computes the output for a
//! new query the way its paradigm would at inference time: Parallel reads
//! the whole history in parallel form, Recurrent applies one state update,
//! Chunkwise(B) combines the carried state with the open chunk.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::retention::{accumulate_state, recurrent_step, Paradigm};
use crate::tensor::{dot, Matrix, RngState};
use crate::training::peak_memory_bytes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub paradigms: Vec<Paradigm>,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// Timed events per repeat.
    pub events: usize,
    /// Untimed repeats run before measuring.
    pub warmup: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            paradigms: vec![Paradigm::Parallel, Paradigm::Recurrent, Paradigm::Chunkwise(64)],
            lengths: vec![100, 1_000, 10_000],
            repeats: 5,
            events: 256,
            warmup: 1,
            dim: 32,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(GrnError::InvalidArgument(format!("repeats must be at least 3, got {}", self.repeats)));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(GrnError::InvalidArgument("lengths must be non-empty and at least 1".into()));
        }
        if self.paradigms.is_empty() {
            return Err(GrnError::InvalidArgument("at least one paradigm is required".into()));
        }
        if self.events == 0 || self.dim == 0 {
            return Err(GrnError::InvalidArgument("events and dim must be at least 1".into()));
        }
        for p in &self.paradigms {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub paradigm: String,
    pub length: usize,
    pub median_latency: f64,
    pub mean_latency: f64,
    pub throughput: f64,
    /// Bytes the paradigm keeps per node to answer the next query.
    pub working_set_bytes: usize,
    pub peak_memory: Option<u64>,
    /// Median latency over the smallest median latency in the report.
    pub latency_ratio: f64,
    /// Throughput over the smallest throughput in the report.
    pub throughput_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantCostCheck {
    pub short: usize,
    pub long: usize,
    pub recurrent_ratio: Option<f64>,
    pub parallel_ratio: Option<f64>,
    pub recurrent_flat: Option<bool>,
    pub parallel_grows: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dim: usize,
    pub repeats: usize,
    pub events: usize,
    pub rows: Vec<BenchRow>,
    pub constant_cost: Option<ConstantCostCheck>,
}

impl BenchReport {
    pub fn row(&self, paradigm: Paradigm, length: usize) -> Option<&BenchRow> {
        let name = paradigm.to_string();
        self.rows.iter().find(|r| r.paradigm == name && r.length == length)
    }

    /// Per-event cost ratio between two history lengths for one paradigm.
    pub fn growth(&self, paradigm: Paradigm, short: usize, long: usize) -> Option<f64> {
        Some(self.row(paradigm, long)?.median_latency / self.row(paradigm, short)?.median_latency)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Synthetic history and new events for one benchmark cell.
struct Workload {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    w: Vec<f64>,
    history: usize,
}

impl Workload {
    fn new(history: usize, events: usize, dim: usize, rng: &mut RngState) -> Self {
        let n = history + events;
        let scale = 1.0 / (dim as f64).sqrt();
        Workload {
            q: rng.normal_matrix(events, dim, scale),
            k: rng.normal_matrix(n, dim, scale),
            v: rng.normal_matrix(n, dim, scale),
            w: (0..n).map(|_| rng.uniform(0.5, 1.0)).collect(),
            history,
        }
    }
}

/// Runs every timed event once and returns a checksum of the outputs.
fn run_events(paradigm: Paradigm, wl: &Workload, prepared: &Prepared) -> f64 {
    let d = wl.v.cols();
    let mut out = vec![0.0; d];
    let mut checksum = 0.0;
    match paradigm {
        Paradigm::Recurrent => {
            let mut s = prepared.state.clone();
            for j in 0..wl.q.rows() {
                let t = wl.history + j;
                recurrent_step(&mut s, wl.q.row(j), wl.k.row(t), wl.v.row(t), wl.w[t], &mut out);
                checksum += out[0];
            }
        }
        Paradigm::Parallel => {
            for j in 0..wl.q.rows() {
                let q = wl.q.row(j);
                out.iter_mut().for_each(|o| *o = 0.0);
                for t in 0..=wl.history + j {
                    let a = wl.w[t] * dot(q, wl.k.row(t));
                    for (o, &v) in out.iter_mut().zip(wl.v.row(t)) {
                        *o += a * v;
                    }
                }
                checksum += out[0];
            }
        }
        Paradigm::Chunkwise(b) => {
            let mut s = prepared.state.clone();
            let mut open = prepared.open_from;
            for j in 0..wl.q.rows() {
                let t = wl.history + j;
                let q = wl.q.row(j);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (c, sc) in s.data().chunks(d).enumerate() {
                    let qc = q[c];
                    for (o, &x) in out.iter_mut().zip(sc) {
                        *o += qc * x;
                    }
                }
                for r in open..=t {
                    let a = wl.w[r] * dot(q, wl.k.row(r));
                    for (o, &v) in out.iter_mut().zip(wl.v.row(r)) {
                        *o += a * v;
                    }
                }
                if t + 1 - open == b {
                    fold_rows(&mut s, wl, open, t + 1);
                    open = t + 1;
                }
                checksum += out[0];
            }
        }
    }
    checksum
}

fn fold_rows(s: &mut Matrix, wl: &Workload, start: usize, end: usize) {
    let k = wl.k.slice_rows(start, end).expect("rows in range");
    let v = wl.v.slice_rows(start, end).expect("rows in range");
    *s = accumulate_state(s, &k, &v, &wl.w[start..end]).expect("shapes agree");
}

/// State folded over the history, done before timing starts.
struct Prepared {
    state: Matrix,
    open_from: usize,
}

fn prepare(paradigm: Paradigm, wl: &Workload) -> Prepared {
    let d = wl.k.cols();
    let mut state = Matrix::zeros(d, wl.v.cols());
    let folded = match paradigm {
        Paradigm::Parallel => 0,
        Paradigm::Recurrent => wl.history,
        Paradigm::Chunkwise(b) => wl.history / b * b,
    };
    if folded > 0 {
        fold_rows(&mut state, wl, 0, folded);
    }
    Prepared {
        state,
        open_from: folded,
    }
}

fn working_set(paradigm: Paradigm, history: usize, dim: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    match paradigm {
        Paradigm::Parallel => 2 * history * dim * f,
        Paradigm::Recurrent => dim * dim * f,
        Paradigm::Chunkwise(b) => (dim * dim + 2 * b * dim) * f,
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut rows = Vec::new();
    let mut sink = 0.0;
    for &length in &spec.lengths {
        let wl = Workload::new(length, spec.events, spec.dim, &mut root.derive(length as u64));
        for &paradigm in &spec.paradigms {
            let prepared = prepare(paradigm, &wl);
            for _ in 0..spec.warmup {
                sink += run_events(paradigm, &wl, &prepared);
            }
            let mut per_event = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let start = Instant::now();
                sink += run_events(paradigm, &wl, &prepared);
                per_event.push(start.elapsed().as_secs_f64() / spec.events as f64);
            }
            let med = median(&per_event).max(f64::MIN_POSITIVE);
            rows.push(BenchRow {
                paradigm: paradigm.to_string(),
                length,
                median_latency: med,
                mean_latency: per_event.iter().sum::<f64>() / per_event.len() as f64,
                throughput: 1.0 / med,
                working_set_bytes: working_set(paradigm, length, spec.dim),
                peak_memory: peak_memory_bytes(),
                latency_ratio: 0.0,
                throughput_ratio: 0.0,
            });
        }
    }
    std::hint::black_box(sink);
    let min_lat = rows.iter().map(|r| r.median_latency).fold(f64::INFINITY, f64::min);
    let min_thr = rows.iter().map(|r| r.throughput).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.latency_ratio = r.median_latency / min_lat;
        r.throughput_ratio = r.throughput / min_thr;
    }
    let mut report = BenchReport {
        dim: spec.dim,
        repeats: spec.repeats,
        events: spec.events,
        rows,
        constant_cost: None,
    };
    let (short, long) = (100, 10_000);
    if spec.lengths.contains(&short) && spec.lengths.contains(&long) {
        let recurrent_ratio = report.growth(Paradigm::Recurrent, short, long);
        let parallel_ratio = report.growth(Paradigm::Parallel, short, long);
        report.constant_cost = Some(ConstantCostCheck {
            short,
            long,
            recurrent_ratio,
            parallel_ratio,
            recurrent_flat: recurrent_ratio.map(|r| r < 1.5),
            parallel_grows: parallel_ratio.map(|r| r > 2.0),
        });
    }
    Ok(report)
}

/// Output of the timed kernels for the first new event, used to check that
/// every paradigm computes the same thing it is timed on.
pub fn first_event_output(paradigm: Paradigm, history: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
    paradigm.validate()?;
    let wl = Workload::new(history, 1, dim, &mut RngState::new(seed));
    let prepared = prepare(paradigm, &wl);
    let d = wl.v.cols();
    let q = wl.q.row(0);
    let mut out = vec![0.0; d];
    match paradigm {
        Paradigm::Recurrent => {
            let mut s = prepared.state;
            recurrent_step(&mut s, q, wl.k.row(history), wl.v.row(history), wl.w[history], &mut out);
        }
        _ => {
            let s = &prepared.state;
            for (c, sc) in s.data().chunks(d).enumerate() {
                for (o, &x) in out.iter_mut().zip(sc) {
                    *o += q[c] * x;
                }
            }
            for t in prepared.open_from..=history {
                let a = wl.w[t] * dot(q, wl.k.row(t));
                for (o, &v) in out.iter_mut().zip(wl.v.row(t)) {
                    *o += a * v;
                }
            }
        }
    }
    Ok(out)
}
