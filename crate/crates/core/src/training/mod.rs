//! Training loop, streaming evaluation and metrics.
//!
//! Training walks the training segment in time-ordered batches with a fresh
//! node state table each epoch. Evaluation rebuilds node states by replaying
//! earlier segments through the current parameters, then scores the target
//! segment batch by batch before folding each batch into the states.

pub mod metrics;
pub mod optim;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{GrnError, Result};
use crate::graph::{chronological_split, chunk, negative_sample, Event, EventStream, Split, SplitMode, SplitSpec};
use crate::model::{GrnConfig, GrnModel, NodeStateTable};
use crate::retention::Paradigm;
use crate::tensor::{Matrix, RngState};

pub use metrics::{auc_roc, average_precision, bce_loss};
pub use optim::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LinkPrediction,
    NodeClassification,
}

impl std::str::FromStr for Task {
    type Err = GrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "link_prediction" => Ok(Task::LinkPrediction),
            "node_classification" => Ok(Task::NodeClassification),
            other => Err(GrnError::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_every: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub task: Task,
    pub split: SplitSpec,
    /// Chunk size of the chunk-wise paradigm used for training.
    pub train_chunk_size: usize,
    pub eval_paradigm: Paradigm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 20,
            batch_size: 200,
            seed: 0,
            eval_every: 1,
            lr: 1e-4,
            weight_decay: 1e-4,
            task: Task::LinkPrediction,
            split: SplitSpec::default(),
            train_chunk_size: 32,
            eval_paradigm: Paradigm::Recurrent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(GrnError::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1");
        }
        if self.train_chunk_size == 0 {
            return err("train_chunk_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return err("weight decay must be non-negative and below 1/lr");
        }
        self.split.validate()?;
        self.eval_paradigm.validate()
    }

    pub fn setting(&self) -> SplitMode {
        self.split.mode
    }

    fn rng(&self, stream: u64) -> RngState {
        RngState::new(self.seed).derive(stream)
    }
}

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const NEGATIVE_STREAM: u64 = 1 << 20;
const DROPOUT_STREAM: u64 = 2 << 20;

/// Wall-clock measurements; kept apart from the deterministic fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_latency: f64,
    pub throughput: f64,
    pub peak_memory: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub segment: String,
    pub setting: SplitMode,
    pub task: Task,
    pub paradigm: String,
    pub events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub loss: f64,
    pub ap: f64,
    pub auc_roc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl MetricsReport {
    /// One JSON object; timing is dropped unless requested.
    pub fn to_json_line(&self, with_timing: bool) -> Result<String> {
        if with_timing || self.timing.is_none() {
            return Ok(serde_json::to_string(self)?);
        }
        let mut copy = self.clone();
        copy.timing = None;
        Ok(serde_json::to_string(&copy)?)
    }
}

/// Peak resident set size of this process in bytes, where the OS reports it.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Scores and loss for one evaluated segment.
#[derive(Clone, Debug)]
pub struct SegmentScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub loss: f64,
    pub ap: f64,
    pub auc_roc: f64,
    pub events: usize,
    pub seconds: f64,
}

/// What to score while streaming a segment.
pub struct EvalSpec<'a> {
    pub task: Task,
    pub batch_size: usize,
    pub paradigm: Paradigm,
    /// Only events touching one of these nodes are scored, when given.
    pub restrict_to: Option<&'a BTreeSet<usize>>,
}

/// Replays `history` to warm node states, then scores `target`.
pub fn evaluate_segment(
    model: &GrnModel,
    stream: &EventStream,
    history: &[Event],
    target: &[Event],
    spec: &EvalSpec,
    node_features: Option<&Matrix>,
    rng: &mut RngState,
) -> Result<SegmentScores> {
    if target.is_empty() {
        return Err(GrnError::Empty("evaluation segment has no events".into()));
    }
    let start = Instant::now();
    let mut table = model.new_state_table(stream.num_nodes);
    for batch in chunk(history, spec.batch_size)? {
        model.advance(batch, &mut table, node_features, spec.paradigm)?;
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    let mut scored = 0;
    for batch in chunk(target, spec.batch_size)? {
        let keep: Vec<bool> = batch
            .iter()
            .map(|e| spec.restrict_to.map_or(true, |s| s.contains(&e.src) || s.contains(&e.dst)))
            .collect();
        match spec.task {
            Task::LinkPrediction => {
                let negs = negative_sample(batch, stream, rng)?;
                let (pos, neg) = score_links(model, batch, &negs, &mut table, node_features, spec.paradigm)?;
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        scored += 1;
                        scores.extend([pos[i], neg[i]]);
                        labels.extend([true, false]);
                        targets.extend([1.0, 0.0]);
                    }
                }
            }
            Task::NodeClassification => {
                let probs = score_nodes(model, batch, &mut table, node_features, spec.paradigm)?;
                for (i, e) in batch.iter().enumerate() {
                    if let (true, Some(label)) = (keep[i], e.label) {
                        scored += 1;
                        let y = label_class(label, model.config.num_classes)?;
                        scores.push(probs.get(i, 1));
                        labels.push(y == 1);
                        targets.push(if y == 1 { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
    if scored == 0 {
        return Err(GrnError::Empty(match spec.restrict_to {
            Some(_) => "no evaluation events touch an unobserved node".into(),
            None => "no scorable events in the evaluation segment".into(),
        }));
    }
    let ap = if labels.iter().any(|&l| l) { average_precision(&scores, &labels)? } else { 0.0 };
    let auc = if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        auc_roc(&scores, &labels)?
    } else {
        0.5
    };
    Ok(SegmentScores {
        loss: bce_loss(&scores, &targets)?,
        scores,
        labels,
        ap,
        auc_roc: auc,
        events: scored,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn label_class(label: i64, num_classes: usize) -> Result<usize> {
    let c = if num_classes == 2 { (label > 0) as i64 } else { label };
    if c < 0 || c as usize >= num_classes {
        return Err(GrnError::InvalidArgument(format!("label {label} outside {num_classes} classes")));
    }
    Ok(c as usize)
}

fn link_queries(batch: &[Event], negs: &[Event]) -> Vec<(usize, f64)> {
    batch
        .iter()
        .map(|e| (e.src, e.t))
        .chain(batch.iter().map(|e| (e.dst, e.t)))
        .chain(negs.iter().map(|e| (e.dst, e.t)))
        .collect()
}

fn score_links(
    model: &GrnModel,
    batch: &[Event],
    negs: &[Event],
    table: &mut NodeStateTable,
    node_features: Option<&Matrix>,
    paradigm: Paradigm,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = batch.len();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, &link_queries(batch, negs), table, node_features, paradigm, None)?;
    let z = tape.value(fwd.z);
    let zs = z.slice_rows(0, n)?;
    let pos = model.link_probability(&zs, &z.slice_rows(n, 2 * n)?)?;
    let neg = model.link_probability(&zs, &z.slice_rows(2 * n, 3 * n)?)?;
    table.apply(&fwd.update);
    Ok((pos, neg))
}

fn score_nodes(
    model: &GrnModel,
    batch: &[Event],
    table: &mut NodeStateTable,
    node_features: Option<&Matrix>,
    paradigm: Paradigm,
) -> Result<Matrix> {
    let queries: Vec<(usize, f64)> = batch.iter().map(|e| (e.src, e.t)).collect();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, &queries, table, node_features, paradigm, None)?;
    let probs = model.node_class_probs(tape.value(fwd.z))?;
    table.apply(&fwd.update);
    Ok(probs)
}

/// Forward, loss and gradient for one training batch. Returns the loss, or
/// `None` when the batch has nothing to learn from.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut GrnModel,
    adam: &mut AdamState,
    batch: &[Event],
    stream: &EventStream,
    table: &mut NodeStateTable,
    node_features: Option<&Matrix>,
    task: Task,
    paradigm: Paradigm,
    neg_rng: &mut RngState,
    drop_rng: &mut RngState,
) -> Result<Option<f64>> {
    let n = batch.len();
    let mut tape = Tape::new();
    let (fwd, loss) = match task {
        Task::LinkPrediction => {
            let negs = negative_sample(batch, stream, neg_rng)?;
            let queries = link_queries(batch, &negs);
            let fwd = model.forward(&mut tape, batch, &queries, table, node_features, paradigm, Some(drop_rng))?;
            let src_rows: Vec<usize> = (0..n).chain(0..n).collect();
            let zs = tape.gather_rows(fwd.z, src_rows)?;
            let zd = tape.gather_rows(fwd.z, (n..3 * n).collect())?;
            let logits = model.link_logits(&mut tape, zs, zd)?;
            let labels = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
            let loss = tape.bce_with_logits(logits, labels)?;
            (fwd, Some(loss))
        }
        Task::NodeClassification => {
            let queries: Vec<(usize, f64)> = batch.iter().map(|e| (e.src, e.t)).collect();
            let fwd = model.forward(&mut tape, batch, &queries, table, node_features, paradigm, Some(drop_rng))?;
            let rows: Vec<usize> = (0..n).filter(|&i| batch[i].label.is_some()).collect();
            let loss = if rows.is_empty() {
                None
            } else {
                let classes = rows
                    .iter()
                    .map(|&i| label_class(batch[i].label.unwrap(), model.config.num_classes))
                    .collect::<Result<Vec<_>>>()?;
                let z = tape.gather_rows(fwd.z, rows)?;
                let logits = model.node_logits(&mut tape, z)?;
                Some(if model.config.num_classes == 2 {
                    tape.bce_with_logits(logits, classes.iter().map(|&c| c as f64).collect())?
                } else {
                    tape.softmax_xent(logits, classes)?
                })
            };
            (fwd, loss)
        }
    };
    let out = match loss {
        Some(loss) => {
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Ok(Some(value));
            }
            let grads = tape.backward(loss, &model.store)?;
            adam_step(&mut model.store, &grads, adam)?;
            Some(value)
        }
        None => None,
    };
    table.apply(&fwd.update);
    Ok(out)
}

/// Result of [`fit`]: the best-validation model and the run history.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: GrnModel,
    pub adam: AdamState,
    pub history: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
    pub epochs_run: usize,
    pub test: Option<MetricsReport>,
}

/// Splits `stream`, trains with early stopping on validation AP and scores
/// the test segment with the best parameters. Each report is passed to
/// `on_report` as soon as it exists.
pub fn fit(
    stream: &EventStream,
    model_cfg: &GrnConfig,
    cfg: &TrainConfig,
    node_features: Option<&Matrix>,
    on_report: &mut dyn FnMut(&MetricsReport),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let split = chronological_split(stream, &cfg.split, &mut cfg.rng(SPLIT_STREAM))?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(GrnError::Empty("training and validation segments must be non-empty".into()));
    }
    let mut model = GrnModel::new(model_cfg.clone(), &mut cfg.rng(INIT_STREAM))?;
    let mut adam = AdamState::new(&model.store, cfg.lr, cfg.weight_decay);
    let train_paradigm = Paradigm::Chunkwise(cfg.train_chunk_size);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, GrnModel)> = None;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let start = Instant::now();
        let mut neg_rng = cfg.rng(NEGATIVE_STREAM + epoch as u64);
        let mut drop_rng = cfg.rng(DROPOUT_STREAM + epoch as u64);
        let mut table = model.new_state_table(stream.num_nodes);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in chunk(&split.train.events, cfg.batch_size)?.into_iter().enumerate() {
            let loss = train_step(
                &mut model,
                &mut adam,
                batch,
                stream,
                &mut table,
                node_features,
                cfg.task,
                train_paradigm,
                &mut neg_rng,
                &mut drop_rng,
            )?;
            if let Some(loss) = loss {
                if !loss.is_finite() {
                    return Err(GrnError::Diverged { epoch, batch: b, loss });
                }
                total += loss;
                count += 1;
            }
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let train_loss = if count > 0 { total / count as f64 } else { 0.0 };
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let val = validate(&model, stream, &split, cfg, node_features)?;
        let report = MetricsReport {
            kind: "epoch".into(),
            epoch: Some(epoch),
            segment: "val".into(),
            setting: cfg.setting(),
            task: cfg.task,
            paradigm: cfg.eval_paradigm.to_string(),
            events: val.events,
            train_loss: Some(train_loss),
            loss: val.loss,
            ap: val.ap,
            auc_roc: val.auc_roc,
            timing: Some(Timing {
                wall_latency: train_seconds,
                throughput: split.train.len() as f64 / train_seconds.max(1e-12),
                peak_memory: peak_memory_bytes(),
            }),
        };
        on_report(&report);
        history.push(report);
        let improved = best.as_ref().map_or(true, |(_, ap, _)| val.ap > *ap);
        if improved {
            best = Some((epoch, val.ap, model.clone()));
        } else if epoch - best.as_ref().unwrap().0 > cfg.patience {
            break;
        }
    }

    let (best_epoch, best_val_ap, best_model) = best.expect("at least one validation pass");
    let test = if split.test.is_empty() {
        None
    } else {
        let report = evaluate(&best_model, stream, cfg, cfg.eval_paradigm, node_features)?;
        on_report(&report);
        Some(report)
    };
    Ok(FitOutcome {
        model: best_model,
        adam,
        history,
        best_epoch,
        best_val_ap,
        epochs_run,
        test,
    })
}

fn validate(
    model: &GrnModel,
    stream: &EventStream,
    split: &Split,
    cfg: &TrainConfig,
    node_features: Option<&Matrix>,
) -> Result<SegmentScores> {
    let spec = EvalSpec {
        task: cfg.task,
        batch_size: cfg.batch_size,
        paradigm: cfg.eval_paradigm,
        restrict_to: None,
    };
    evaluate_segment(
        model,
        stream,
        &split.train.events,
        &split.val.events,
        &spec,
        node_features,
        &mut cfg.rng(EVAL_STREAM),
    )
}

/// Test-segment evaluation under the split and seed of `cfg`. Inductive
/// mode scores only events touching an unobserved node.
pub fn evaluate(
    model: &GrnModel,
    stream: &EventStream,
    cfg: &TrainConfig,
    paradigm: Paradigm,
    node_features: Option<&Matrix>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    paradigm.validate()?;
    let split = chronological_split(stream, &cfg.split, &mut cfg.rng(SPLIT_STREAM))?;
    if split.test.is_empty() {
        return Err(GrnError::Empty("test segment has no events".into()));
    }
    let restrict = match cfg.setting() {
        SplitMode::Inductive => {
            if split.unobserved.is_empty() {
                return Err(GrnError::Empty("inductive evaluation has no unobserved nodes".into()));
            }
            Some(&split.unobserved)
        }
        SplitMode::Transductive => None,
    };
    let mut history = split.train.events.clone();
    history.extend(split.val.events.iter().cloned());
    let spec = EvalSpec {
        task: cfg.task,
        batch_size: cfg.batch_size,
        paradigm,
        restrict_to: restrict,
    };
    let s = evaluate_segment(
        model,
        stream,
        &history,
        &split.test.events,
        &spec,
        node_features,
        &mut cfg.rng(EVAL_STREAM + 1),
    )?;
    Ok(MetricsReport {
        kind: "eval".into(),
        epoch: None,
        segment: "test".into(),
        setting: cfg.setting(),
        task: cfg.task,
        paradigm: paradigm.to_string(),
        events: s.events,
        train_loss: None,
        loss: s.loss,
        ap: s.ap,
        auc_roc: s.auc_roc,
        timing: Some(Timing {
            wall_latency: s.seconds,
            throughput: (history.len() + split.test.len()) as f64 / s.seconds.max(1e-12),
            peak_memory: peak_memory_bytes(),
        }),
    })
}
