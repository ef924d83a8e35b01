//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! path = "wikipedia.csv"        # or a [data.synth] table
//!
//! [model]
//! node_embedding_size = 64
//! time_embedding_dimension = 64
//! graph_retention_heads = 2
//! groups_for_gn = 2
//! dropout = 0.5
//!
//! [training]
//! train_validate_test_split = [0.7, 0.15, 0.15]
//! weight_decay = 0.001
//!
//! [output]
//! dir = "runs/wikipedia"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{GrnError, Result};
use crate::graph::{load_csv, synth_generate, EventStream, SplitMode, SplitSpec, SynthParams};
use crate::model::GrnConfig;
use crate::retention::{DecayPolicy, Paradigm};
use crate::tensor::RngState;
use crate::training::{Task, TrainConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    data: RawData,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    eval: RawEval,
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: Option<PathBuf>,
    synth: Option<RawSynth>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSynth {
    num_users: usize,
    num_items: usize,
    period: usize,
    noise_frac: f64,
    length: usize,
    edge_feat_dim: usize,
}

impl Default for RawSynth {
    fn default() -> Self {
        let p = SynthParams::default();
        RawSynth {
            num_users: p.num_users,
            num_items: p.num_items,
            period: p.period,
            noise_frac: p.noise_frac,
            length: p.length,
            edge_feat_dim: p.edge_feat_dim,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawModel {
    num_layers: usize,
    node_embedding_size: usize,
    time_embedding_dimension: usize,
    graph_retention_heads: usize,
    groups_for_gn: usize,
    dropout: f64,
    decay: String,
    decay_lambda: Option<f64>,
    normalized_scores: bool,
    use_temporal_encoding: bool,
    use_hswish_gate: bool,
    multi_head: bool,
    reduce_head_dimension: bool,
    num_classes: usize,
}

impl Default for RawModel {
    fn default() -> Self {
        let g = GrnConfig::default();
        RawModel {
            num_layers: g.num_layers,
            node_embedding_size: g.d_model,
            time_embedding_dimension: g.time_dim,
            graph_retention_heads: g.heads,
            groups_for_gn: g.gn_groups,
            dropout: g.dropout,
            decay: "unit".into(),
            decay_lambda: None,
            normalized_scores: g.normalized_scores,
            use_temporal_encoding: g.use_temporal_encoding,
            use_hswish_gate: g.use_hswish_gate,
            multi_head: g.multi_head,
            reduce_head_dimension: g.reduce_head_dim,
            num_classes: g.num_classes,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTraining {
    train_validate_test_split: [f64; 3],
    weight_decay: f64,
    learning_rate: f64,
    epochs: usize,
    patience: usize,
    batch_size: usize,
    eval_every: usize,
    task: String,
    setting: String,
    inductive_node_fraction: f64,
    chunk_size: usize,
}

impl Default for RawTraining {
    fn default() -> Self {
        let t = TrainConfig::default();
        RawTraining {
            train_validate_test_split: [t.split.train_frac, t.split.val_frac, t.split.test_frac],
            weight_decay: t.weight_decay,
            learning_rate: t.lr,
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            task: "link_prediction".into(),
            setting: "transductive".into(),
            inductive_node_fraction: t.split.inductive_node_frac,
            chunk_size: t.train_chunk_size,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEval {
    paradigm: String,
    chunk_size: Option<usize>,
}

impl Default for RawEval {
    fn default() -> Self {
        RawEval {
            paradigm: "recurrent".into(),
            chunk_size: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
    timing: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub timing: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub model: GrnConfig,
    pub train: TrainConfig,
    pub output: OutputPaths,
}

/// 1-based line of `key` inside `[section]`, for diagnostics.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Diag<'a> {
    text: &'a str,
    origin: &'a str,
}

impl Diag<'_> {
    fn err(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> GrnError {
        let field = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        match locate(self.text, section, key) {
            Some(line) => GrnError::Config(format!("{}:{line}: `{field}`: {msg}", self.origin)),
            None => GrnError::Config(format!("{}: `{field}`: {msg}", self.origin)),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GrnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Parses and validates `text`; `origin` names the source in messages.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            let msg = e.message().to_string();
            match line {
                Some(l) => GrnError::Config(format!("{origin}:{l}: {msg}")),
                None => GrnError::Config(format!("{origin}: {msg}")),
            }
        })?;
        let d = Diag { text, origin };

        let data = match (raw.data.path, raw.data.synth) {
            (Some(_), Some(_)) => return Err(d.err("data", "path", "give either a path or a synth table, not both")),
            (None, None) => return Err(d.err("data", "path", "a dataset path or a [data.synth] table is required")),
            (Some(p), None) => {
                let p = resolve(base, &p);
                if !p.is_file() {
                    return Err(d.err("data", "path", format!("dataset {} does not exist", p.display())));
                }
                DataSource::Csv(p)
            }
            (None, Some(s)) => {
                let params = SynthParams {
                    num_users: s.num_users,
                    num_items: s.num_items,
                    period: s.period,
                    noise_frac: s.noise_frac,
                    length: s.length,
                    edge_feat_dim: s.edge_feat_dim,
                };
                params.validate().map_err(|e| d.err("data.synth", "length", e))?;
                DataSource::Synth(params)
            }
        };

        let m = raw.model;
        let decay = match m.decay.as_str() {
            "unit" => DecayPolicy::Unit,
            "time_decay" => DecayPolicy::TimeDecay {
                lambda: m
                    .decay_lambda
                    .ok_or_else(|| d.err("model", "decay", "time_decay needs decay_lambda"))?,
            },
            other => return Err(d.err("model", "decay", format!("unknown decay `{other}` (unit | time_decay)"))),
        };
        let model = GrnConfig {
            num_layers: m.num_layers,
            d_model: m.node_embedding_size,
            time_dim: m.time_embedding_dimension,
            heads: m.graph_retention_heads,
            gn_groups: m.groups_for_gn,
            dropout: m.dropout,
            decay,
            normalized_scores: m.normalized_scores,
            use_temporal_encoding: m.use_temporal_encoding,
            use_hswish_gate: m.use_hswish_gate,
            multi_head: m.multi_head,
            reduce_head_dim: m.reduce_head_dimension,
            num_classes: m.num_classes,
            ..GrnConfig::default()
        };
        let model_checks: [(&str, bool, &str); 6] = [
            ("node_embedding_size", model.d_model >= 1, "must be at least 1"),
            ("time_embedding_dimension", model.time_dim == model.d_model, "must equal node_embedding_size"),
            (
                "graph_retention_heads",
                model.heads >= 1 && model.d_model % model.heads == 0,
                "must divide node_embedding_size",
            ),
            (
                "groups_for_gn",
                model.gn_groups >= 1 && model.d_model % model.gn_groups == 0,
                "must divide node_embedding_size",
            ),
            ("dropout", (0.0..1.0).contains(&model.dropout), "must lie in [0, 1)"),
            ("num_classes", model.num_classes >= 2, "must be at least 2"),
        ];
        for (key, ok, msg) in model_checks {
            if !ok {
                return Err(d.err("model", key, msg));
            }
        }
        model.validate().map_err(|e| d.err("model", "decay_lambda", e))?;

        let t = raw.training;
        let task: Task = t.task.parse().map_err(|e| d.err("training", "task", e))?;
        let mode: SplitMode = t.setting.parse().map_err(|e| d.err("training", "setting", e))?;
        let split = SplitSpec {
            train_frac: t.train_validate_test_split[0],
            val_frac: t.train_validate_test_split[1],
            test_frac: t.train_validate_test_split[2],
            inductive_node_frac: t.inductive_node_fraction,
            mode,
        };
        split
            .validate()
            .map_err(|e| d.err("training", "train_validate_test_split", e))?;
        let eval_paradigm =
            Paradigm::parse(&raw.eval.paradigm, raw.eval.chunk_size).map_err(|e| d.err("eval", "paradigm", e))?;
        let train = TrainConfig {
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            seed: raw.seed,
            eval_every: t.eval_every,
            lr: t.learning_rate,
            weight_decay: t.weight_decay,
            task,
            split,
            train_chunk_size: t.chunk_size,
            eval_paradigm,
        };
        let train_checks: [(&str, bool, &str); 6] = [
            ("epochs", train.epochs >= 1, "must be at least 1"),
            ("batch_size", train.batch_size >= 1, "must be at least 1"),
            ("eval_every", train.eval_every >= 1, "must be at least 1"),
            ("chunk_size", train.train_chunk_size >= 1, "must be at least 1"),
            ("learning_rate", train.lr > 0.0 && train.lr.is_finite(), "must be positive"),
            (
                "weight_decay",
                train.weight_decay >= 0.0 && train.lr * train.weight_decay < 1.0,
                "must be non-negative and below 1/learning_rate",
            ),
        ];
        for (key, ok, msg) in train_checks {
            if !ok {
                return Err(d.err("training", key, msg));
            }
        }

        let o = raw.output;
        let dir = o.dir.map(|p| resolve(base, &p));
        let pick = |explicit: Option<PathBuf>, name: &str, key: &str| -> Result<PathBuf> {
            match (explicit, &dir) {
                (Some(p), _) => Ok(resolve(base, &p)),
                (None, Some(dir)) => Ok(dir.join(name)),
                (None, None) => Err(d.err("output", key, "set `dir` or an explicit path")),
            }
        };
        let output = OutputPaths {
            checkpoint: pick(o.checkpoint, "checkpoint.json", "checkpoint")?,
            metrics: pick(o.metrics, "metrics.jsonl", "metrics")?,
            timing: pick(o.timing, "timing.jsonl", "timing")?,
        };
        for (key, p) in [
            ("checkpoint", &output.checkpoint),
            ("metrics", &output.metrics),
            ("timing", &output.timing),
        ] {
            let parent = p.parent().filter(|q| !q.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if dir.as_deref() != Some(parent) && !parent.is_dir() {
                return Err(d.err("output", key, format!("directory {} does not exist", parent.display())));
            }
        }
        if let Some(dir) = &dir {
            if let Some(parent) = dir.parent().filter(|q| !q.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(d.err("output", "dir", format!("directory {} does not exist", parent.display())));
                }
            }
        }

        Ok(RunConfig {
            seed: raw.seed,
            data,
            model,
            train,
            output,
        })
    }

    /// Loads or generates the event stream and fits the model's input widths to it.
    pub fn load_stream(&mut self) -> Result<EventStream> {
        let stream = match &self.data {
            DataSource::Csv(p) => load_csv(p)?,
            DataSource::Synth(params) => synth_generate(params, &mut RngState::new(self.seed).derive(0))?,
        };
        self.model.edge_feat_dim = stream.edge_feat_dim;
        Ok(stream)
    }
}
