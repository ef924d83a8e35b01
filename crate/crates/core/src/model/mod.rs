//! GRN model assembly: message construction, multi-head graph retention,
//! pre-norm residual blocks, the per-node state table and prediction heads.
//!
//! A batch of events is processed as one query-freeze stage. Every node
//! touched by the batch gets `L + 1` rows, where `L` is the number of batch
//! events it takes part in: row `r` is the node's representation after its
//! first `r` batch events. Queries start from the node embedding stored at
//! the start of the batch; keys and values come from the node's neighbor
//! messages, with time intervals measured against the batch's last
//! timestamp. The first row carries no message, so it reads only the state
//! inherited from earlier batches.

pub mod encoding;
pub mod state;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, ParamId, ParamStore, RetentionSegment, Tape, Var};
use crate::error::{GrnError, Result};
use crate::graph::Event;
use crate::retention::{DecayPolicy, Paradigm};
use crate::tensor::{hswish, sigmoid, xavier_uniform, Matrix, RngState};

pub use encoding::{message, temporal_encode, temporal_encode_rows, time_frequencies};
pub use state::{NodeStateTable, StateUpdate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrnConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub gn_groups: usize,
    pub dropout: f64,
    pub decay: DecayPolicy,
    pub normalized_scores: bool,
    pub use_temporal_encoding: bool,
    pub use_hswish_gate: bool,
    pub multi_head: bool,
    pub reduce_head_dim: bool,
    /// Raw edge feature width; feature-less streams use one zero channel.
    pub edge_feat_dim: usize,
    /// Raw node feature width, projected to `d_model` by `W_x`.
    pub node_feat_dim: usize,
    pub num_classes: usize,
    pub norm_eps: f64,
}

impl Default for GrnConfig {
    fn default() -> Self {
        GrnConfig {
            num_layers: 2,
            d_model: 64,
            time_dim: 64,
            heads: 2,
            gn_groups: 2,
            dropout: 0.1,
            decay: DecayPolicy::Unit,
            normalized_scores: false,
            use_temporal_encoding: true,
            use_hswish_gate: true,
            multi_head: true,
            reduce_head_dim: false,
            edge_feat_dim: 0,
            node_feat_dim: 64,
            num_classes: 2,
            norm_eps: 1e-5,
        }
    }
}

impl GrnConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GrnError::Config(m));
        if self.d_model == 0 {
            return err("d_model must be at least 1".into());
        }
        if self.time_dim != self.d_model {
            return err(format!(
                "time embedding dimension {} must equal node embedding size {}",
                self.time_dim, self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.reduce_head_dim && self.head_width() < 2 {
            return err("head width too small to halve".into());
        }
        if self.gn_groups == 0 || self.d_model % self.gn_groups != 0 {
            return err(format!("d_model {} is not divisible into {} groups", self.d_model, self.gn_groups));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes < 2 {
            return err("num_classes must be at least 2".into());
        }
        if !(self.norm_eps > 0.0) {
            return err("norm_eps must be positive".into());
        }
        self.decay.validate()
    }

    pub fn effective_heads(&self) -> usize {
        if self.multi_head {
            self.heads
        } else {
            1
        }
    }

    /// Channels owned by each head.
    pub fn head_width(&self) -> usize {
        self.d_model / self.effective_heads()
    }

    /// Width of each head's retention state.
    pub fn head_dim(&self) -> usize {
        if self.reduce_head_dim {
            self.head_width() / 2
        } else {
            self.head_width()
        }
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_feat_dim.max(1)
    }

    fn head_out_dim(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    b_q: ParamId,
    b_k: ParamId,
    b_v: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    heads: Vec<HeadIds>,
    gn_g: ParamId,
    gn_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles, laid out deterministically from the config.
#[derive(Clone, Debug)]
pub struct GrnParams {
    w_e: ParamId,
    w_x: ParamId,
    layers: Vec<LayerIds>,
    out_g: ParamId,
    out_b: ParamId,
    link: MlpIds,
    node: MlpIds,
}

impl GrnParams {
    /// Registers every parameter in `store` with its initial value.
    fn build(config: &GrnConfig, store: &mut ParamStore, rng: &mut RngState) -> Self {
        let d = config.d_model;
        let hd = config.head_dim();
        let ones = |n| Matrix::filled(1, n, 1.0);
        let zeros = |n| Matrix::zeros(1, n);
        let w_e = store.add("msg.w_e", xavier_uniform(rng, config.edge_dim(), d));
        let w_x = store.add("msg.w_x", xavier_uniform(rng, config.node_feat_dim.max(1), d));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layer{l}");
            let ln1_g = store.add(format!("{p}.ln1.gain"), ones(d));
            let ln1_b = store.add(format!("{p}.ln1.bias"), zeros(d));
            let heads = (0..config.effective_heads())
                .map(|h| {
                    let hp = format!("{p}.head{h}");
                    HeadIds {
                        w_q: store.add(format!("{hp}.w_q"), xavier_uniform(rng, hd, hd)),
                        w_k: store.add(format!("{hp}.w_k"), xavier_uniform(rng, hd, hd)),
                        w_v: store.add(format!("{hp}.w_v"), xavier_uniform(rng, hd, hd)),
                        b_q: store.add(format!("{hp}.b_q"), zeros(hd)),
                        b_k: store.add(format!("{hp}.b_k"), zeros(hd)),
                        b_v: store.add(format!("{hp}.b_v"), zeros(hd)),
                    }
                })
                .collect();
            let gn_g = store.add(format!("{p}.gn.gain"), ones(d));
            let gn_b = store.add(format!("{p}.gn.bias"), zeros(d));
            let ln2_g = store.add(format!("{p}.ln2.gain"), ones(d));
            let ln2_b = store.add(format!("{p}.ln2.bias"), zeros(d));
            let w1 = store.add(format!("{p}.ffn.w1"), xavier_uniform(rng, d, d));
            let w2 = store.add(format!("{p}.ffn.w2"), xavier_uniform(rng, d, d));
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                heads,
                gn_g,
                gn_b,
                ln2_g,
                ln2_b,
                w1,
                w2,
            });
        }
        let out_g = store.add("out_norm.gain", ones(d));
        let out_b = store.add("out_norm.bias", zeros(d));
        let mut mlp = |name: &str, input: usize, out: usize| MlpIds {
            w1: store.add(format!("{name}.w1"), xavier_uniform(rng, input, d)),
            b1: store.add(format!("{name}.b1"), zeros(d)),
            w2: store.add(format!("{name}.w2"), xavier_uniform(rng, d, out)),
            b2: store.add(format!("{name}.b2"), zeros(out)),
        };
        let link = mlp("link", 2 * d, 1);
        let node = mlp("node", d, config.head_out_dim());
        GrnParams {
            w_e,
            w_x,
            layers,
            out_g,
            out_b,
            link,
            node,
        }
    }
}

/// One retention sequence in a batch layout.
#[derive(Clone, Debug)]
pub struct SegmentSpec {
    pub start: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

/// Output of [`GrnModel::forward`].
pub struct Forward {
    /// Embeddings for the requested `(node, time)` queries, in order.
    pub z: Var,
    pub update: StateUpdate,
}

#[derive(Clone, Debug)]
pub struct GrnModel {
    pub config: GrnConfig,
    pub store: ParamStore,
    ids: GrnParams,
}

impl GrnModel {
    pub fn new(config: GrnConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = GrnParams::build(&config, &mut store, rng);
        Ok(GrnModel { config, store, ids })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_parts(config: GrnConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = GrnModel::new(config, &mut RngState::new(0))?;
        if fresh.store.names() != store.names() {
            return Err(GrnError::Checkpoint("parameter names do not match the config".into()));
        }
        for (a, b) in fresh.store.values().iter().zip(store.values()) {
            if a.shape() != b.shape() {
                return Err(GrnError::Checkpoint(format!(
                    "parameter shape {:?} does not match config shape {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    pub fn new_state_table(&self, num_nodes: usize) -> NodeStateTable {
        NodeStateTable::new(
            num_nodes,
            self.config.d_model,
            self.config.num_layers,
            self.config.effective_heads(),
            self.config.head_dim(),
        )
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.store, id)
    }

    /// Embeds `queries` (node, time) after folding `batch` into the layout
    /// described in the module docs. The returned update holds the state
    /// after the whole batch; the table itself is not modified.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[Event],
        queries: &[(usize, f64)],
        table: &NodeStateTable,
        node_features: Option<&Matrix>,
        paradigm: Paradigm,
        mut dropout: Option<&mut RngState>,
    ) -> Result<Forward> {
        paradigm.validate()?;
        let cfg = &self.config;
        let d = cfg.d_model;

        // Group batch events by endpoint.
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut nodes: Vec<usize> = Vec::new();
        let mut per_node: Vec<Vec<(usize, usize)>> = Vec::new(); // (event index, neighbor)
        let touch = |node: usize, local: &mut HashMap<usize, usize>, nodes: &mut Vec<usize>| -> usize {
            *local.entry(node).or_insert_with(|| {
                nodes.push(node);
                nodes.len() - 1
            })
        };
        for (k, e) in batch.iter().enumerate() {
            table.check_node(e.src)?;
            table.check_node(e.dst)?;
            if e.edge_feat.len() != cfg.edge_feat_dim {
                return Err(GrnError::InvalidArgument(format!(
                    "event has {} edge features, model expects {}",
                    e.edge_feat.len(),
                    cfg.edge_feat_dim
                )));
            }
            let li = touch(e.dst, &mut local, &mut nodes);
            if per_node.len() <= li {
                per_node.push(Vec::new());
            }
            per_node[li].push((k, e.src));
            if e.src != e.dst {
                let li = touch(e.src, &mut local, &mut nodes);
                if per_node.len() <= li {
                    per_node.push(Vec::new());
                }
                per_node[li].push((k, e.dst));
            }
        }
        for &(node, _) in queries {
            table.check_node(node)?;
            let li = touch(node, &mut local, &mut nodes);
            if per_node.len() <= li {
                per_node.push(Vec::new());
            }
        }

        let anchor = batch.last().map_or(0.0, |e| e.t);
        let mut offsets = Vec::with_capacity(nodes.len());
        let mut rows = 0;
        for evs in &per_node {
            offsets.push(rows);
            rows += evs.len() + 1;
        }

        // Constant parts of the query and message rows.
        let mut xq = Matrix::zeros(rows, d);
        let mut msg = Matrix::zeros(rows, d);
        let mut edges = Matrix::zeros(rows, cfg.edge_dim());
        let mut kv_mask = Matrix::zeros(rows, cfg.head_dim());
        let mut query_node = vec![0usize; rows];
        let mut nbr_node: Vec<Option<usize>> = vec![None; rows];
        let mut segments = Vec::with_capacity(nodes.len());
        let freqs = time_frequencies(d);
        for (li, evs) in per_node.iter().enumerate() {
            let node = nodes[li];
            let off = offsets[li];
            let mut weights = Vec::with_capacity(evs.len() + 1);
            weights.push(1.0);
            for r in 0..=evs.len() {
                xq.row_mut(off + r).copy_from_slice(table.embedding(node));
                query_node[off + r] = node;
            }
            for (r, &(k, nbr)) in evs.iter().enumerate() {
                let row = off + r + 1;
                let e = &batch[k];
                let dt = anchor - e.t;
                let m = msg.row_mut(row);
                m.copy_from_slice(table.embedding(nbr));
                if cfg.use_temporal_encoding {
                    for (v, &f) in m.iter_mut().zip(&freqs) {
                        *v += (dt * f).cos();
                    }
                }
                if cfg.edge_feat_dim > 0 {
                    edges.row_mut(row).copy_from_slice(&e.edge_feat);
                }
                kv_mask.row_mut(row).iter_mut().for_each(|v| *v = 1.0);
                nbr_node[row] = Some(nbr);
                weights.push(cfg.decay.weight(dt));
            }
            segments.push(SegmentSpec {
                start: off,
                len: evs.len() + 1,
                weights,
            });
        }

        let mut h = tape.constant(xq);
        let mut m = tape.constant(msg);
        if cfg.edge_feat_dim > 0 {
            let e = tape.constant(edges);
            let w_e = self.p(tape, self.ids.w_e);
            let em = tape.matmul(e, w_e)?;
            m = tape.add(m, em)?;
        }
        if let Some(feats) = node_features {
            if feats.rows() != table.num_nodes() || feats.cols() != cfg.node_feat_dim {
                return Err(GrnError::shape(
                    "node features",
                    feats.shape(),
                    (table.num_nodes(), cfg.node_feat_dim),
                ));
            }
            let w_x = self.p(tape, self.ids.w_x);
            let fq = tape.constant(feats.gather_rows(&query_node));
            let pq = tape.matmul(fq, w_x)?;
            h = tape.add(h, pq)?;
            let mut nf = Matrix::zeros(rows, cfg.node_feat_dim);
            for (r, nb) in nbr_node.iter().enumerate() {
                if let Some(nb) = nb {
                    nf.row_mut(r).copy_from_slice(feats.row(*nb));
                }
            }
            let fm = tape.constant(nf);
            let pm = tape.matmul(fm, w_x)?;
            m = tape.add(m, pm)?;
        }

        let mut new_states = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let s_in: Vec<Vec<Matrix>> = (0..cfg.effective_heads())
                .map(|head| nodes.iter().map(|&n| table.state(n, layer, head).clone()).collect())
                .collect();
            let (out, states) = self.block(
                tape,
                layer,
                h,
                m,
                Some(&kv_mask),
                &segments,
                &s_in,
                paradigm,
                dropout.as_deref_mut(),
            )?;
            h = out;
            new_states.push(states);
        }
        if cfg.num_layers > 0 {
            let (g, b) = (self.p(tape, self.ids.out_g), self.p(tape, self.ids.out_b));
            h = tape.layer_norm(h, g, b, cfg.norm_eps)?;
        }

        // Query rows: count of the node's batch events strictly before t.
        let mut q_rows = Vec::with_capacity(queries.len());
        for &(node, t) in queries {
            let li = local[&node];
            let before = per_node[li].iter().filter(|(k, _)| batch[*k].t < t).count();
            q_rows.push(offsets[li] + before);
        }
        let z = tape.gather_rows(h, q_rows)?;

        let hv = tape.value(h);
        let mut update = StateUpdate::default();
        let mut keep = Vec::new();
        for (li, evs) in per_node.iter().enumerate() {
            if evs.is_empty() {
                continue;
            }
            keep.push(li);
            update.nodes.push(nodes[li]);
            update.embeddings.push(hv.row(offsets[li] + evs.len()).to_vec());
            update.last_times.push(batch[evs.last().unwrap().0].t);
        }
        update.states = new_states
            .into_iter()
            .map(|per_head| {
                per_head
                    .into_iter()
                    .map(|mats| keep.iter().map(|&li| mats[li].clone()).collect())
                    .collect()
            })
            .collect();
        Ok(Forward { z, update })
    }

    /// One GRN block: `H = MGR(LN(X)) + X`, `O = FFN(LN(H)) + H`.
    /// `h` holds the query rows and `m` the message rows, row-aligned.
    /// Returns the block output and the final state per head and segment.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        tape: &mut Tape,
        layer: usize,
        h: Var,
        m: Var,
        kv_mask: Option<&Matrix>,
        segments: &[SegmentSpec],
        s_in: &[Vec<Matrix>],
        paradigm: Paradigm,
        mut dropout: Option<&mut RngState>,
    ) -> Result<(Var, Vec<Vec<Matrix>>)> {
        let cfg = &self.config;
        let ids = &self.ids.layers[layer];
        let (g1, b1) = (self.p(tape, ids.ln1_g), self.p(tape, ids.ln1_b));
        let a = tape.layer_norm(h, g1, b1, cfg.norm_eps)?;
        let b = tape.layer_norm(m, g1, b1, cfg.norm_eps)?;
        let (mgr, states) = self.mgr(tape, layer, a, b, kv_mask, segments, s_in, paradigm)?;
        let mgr = self.dropout(tape, mgr, dropout.as_deref_mut())?;
        let h1 = tape.add(h, mgr)?;

        let (g2, b2) = (self.p(tape, ids.ln2_g), self.p(tape, ids.ln2_b));
        let f = tape.layer_norm(h1, g2, b2, cfg.norm_eps)?;
        let w1 = self.p(tape, ids.w1);
        let mut f = tape.matmul(f, w1)?;
        if cfg.use_hswish_gate {
            f = tape.hswish(f);
        }
        let f = self.dropout(tape, f, dropout)?;
        let w2 = self.p(tape, ids.w2);
        let f = tape.matmul(f, w2)?;
        Ok((tape.add(h1, f)?, states))
    }

    /// Multi-head graph retention followed by group normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn mgr(
        &self,
        tape: &mut Tape,
        layer: usize,
        queries: Var,
        messages: Var,
        kv_mask: Option<&Matrix>,
        segments: &[SegmentSpec],
        s_in: &[Vec<Matrix>],
        paradigm: Paradigm,
    ) -> Result<(Var, Vec<Vec<Matrix>>)> {
        let cfg = &self.config;
        let ids = &self.ids.layers[layer];
        let (hw, hd) = (cfg.head_width(), cfg.head_dim());
        if s_in.len() != ids.heads.len() || s_in.iter().any(|s| s.len() != segments.len()) {
            return Err(GrnError::InvalidArgument("one state per head and segment is required".into()));
        }
        let rows = tape.value(queries).rows();
        let mut outs = Vec::with_capacity(ids.heads.len() + 1);
        let mut states = Vec::with_capacity(ids.heads.len());
        for (hi, head) in ids.heads.iter().enumerate() {
            let qa = tape.slice_cols(queries, hi * hw, hi * hw + hd)?;
            let kb = tape.slice_cols(messages, hi * hw, hi * hw + hd)?;
            let (wq, bq) = (self.p(tape, head.w_q), self.p(tape, head.b_q));
            let (wk, bk) = (self.p(tape, head.w_k), self.p(tape, head.b_k));
            let (wv, bv) = (self.p(tape, head.w_v), self.p(tape, head.b_v));
            let q = tape.linear(qa, wq, Some(bq))?;
            let mut k = tape.linear(kb, wk, Some(bk))?;
            let mut v = tape.linear(kb, wv, Some(bv))?;
            if let Some(mask) = kv_mask {
                k = tape.mul_const(k, mask.clone())?;
                v = tape.mul_const(v, mask.clone())?;
            }
            let segs = segments
                .iter()
                .zip(&s_in[hi])
                .map(|(s, st)| RetentionSegment {
                    start: s.start,
                    len: s.len,
                    weights: s.weights.clone(),
                    s_in: st.clone(),
                })
                .collect();
            let (o, st) = tape.retention(q, k, v, segs, paradigm, cfg.normalized_scores)?;
            outs.push(o);
            states.push(st);
        }
        let used = hd * ids.heads.len();
        if used < cfg.d_model {
            outs.push(tape.constant(Matrix::zeros(rows, cfg.d_model - used)));
        }
        let cat = tape.concat_cols(&outs)?;
        let (gg, gb) = (self.p(tape, ids.gn_g), self.p(tape, ids.gn_b));
        Ok((tape.group_norm(cat, cfg.gn_groups, gg, gb, cfg.norm_eps)?, states))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut RngState>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - rate);
                let data = (0..r * c).map(|_| if rng.unit() < rate { 0.0 } else { keep }).collect();
                tape.mul_const(x, Matrix::from_vec(r, c, data)?)
            }
            _ => Ok(x),
        }
    }

    /// Single-destination MGR: one frozen query row against `L` neighbor
    /// messages, one output row per neighbor.
    pub fn mgr_forward(
        &self,
        layer: usize,
        x_dst: &Matrix,
        x_src: &Matrix,
        deltas: &[f64],
        states: &[Matrix],
        paradigm: Paradigm,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let (segments, s_in) = self.single_segment(x_src, deltas, states)?;
        let mut tape = Tape::new();
        let q = tape.constant(replicate(x_dst, x_src.rows())?);
        let m = tape.constant(x_src.clone());
        let (out, st) = self.mgr(&mut tape, layer, q, m, None, &segments, &s_in, paradigm)?;
        Ok((tape.value(out).clone(), st.into_iter().map(|mut v| v.remove(0)).collect()))
    }

    /// Single-destination GRN block in evaluation mode unless `dropout` is given.
    pub fn block_forward(
        &self,
        layer: usize,
        x_dst: &Matrix,
        x_src: &Matrix,
        deltas: &[f64],
        states: &[Matrix],
        paradigm: Paradigm,
        dropout: Option<&mut RngState>,
    ) -> Result<(Matrix, Vec<Matrix>)> {
        let (segments, s_in) = self.single_segment(x_src, deltas, states)?;
        let mut tape = Tape::new();
        let q = tape.constant(replicate(x_dst, x_src.rows())?);
        let m = tape.constant(x_src.clone());
        let (out, st) = self.block(&mut tape, layer, q, m, None, &segments, &s_in, paradigm, dropout)?;
        Ok((tape.value(out).clone(), st.into_iter().map(|mut v| v.remove(0)).collect()))
    }

    fn single_segment(
        &self,
        x_src: &Matrix,
        deltas: &[f64],
        states: &[Matrix],
    ) -> Result<(Vec<SegmentSpec>, Vec<Vec<Matrix>>)> {
        if x_src.cols() != self.config.d_model || deltas.len() != x_src.rows() {
            return Err(GrnError::shape("block input", x_src.shape(), (deltas.len(), self.config.d_model)));
        }
        if states.len() != self.config.effective_heads() {
            return Err(GrnError::InvalidArgument(format!(
                "{} head states given, model has {} heads",
                states.len(),
                self.config.effective_heads()
            )));
        }
        let segments = vec![SegmentSpec {
            start: 0,
            len: x_src.rows(),
            weights: self.config.decay.weights(deltas),
        }];
        Ok((segments, states.iter().map(|s| vec![s.clone()]).collect()))
    }

    pub fn link_logits(&self, tape: &mut Tape, z_src: Var, z_dst: Var) -> Result<Var> {
        let x = tape.concat_cols(&[z_src, z_dst])?;
        self.mlp(tape, &self.ids.link.clone(), x)
    }

    pub fn node_logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.mlp(tape, &self.ids.node.clone(), z)
    }

    fn mlp(&self, tape: &mut Tape, ids: &MlpIds, x: Var) -> Result<Var> {
        let (w1, b1) = (self.p(tape, ids.w1), self.p(tape, ids.b1));
        let (w2, b2) = (self.p(tape, ids.w2), self.p(tape, ids.b2));
        let hdn = tape.linear(x, w1, Some(b1))?;
        let hdn = tape.hswish(hdn);
        tape.linear(hdn, w2, Some(b2))
    }

    /// Link probabilities for row-aligned endpoint embeddings.
    pub fn link_probability(&self, z_src: &Matrix, z_dst: &Matrix) -> Result<Vec<f64>> {
        let ids = &self.ids.link;
        let x = Matrix::concat_cols(&[z_src, z_dst])?;
        let logits = self.mlp_plain(ids, &x)?;
        Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Class probabilities per row. Binary models use one logistic output.
    pub fn node_class_probs(&self, z: &Matrix) -> Result<Matrix> {
        let logits = self.mlp_plain(&self.ids.node, z)?;
        Ok(class_probs(&logits))
    }

    fn mlp_plain(&self, ids: &MlpIds, x: &Matrix) -> Result<Matrix> {
        let s = &self.store;
        let h = hswish(&x.matmul(s.get(ids.w1))?.add_row(s.get(ids.b1).data())?);
        h.matmul(s.get(ids.w2))?.add_row(s.get(ids.b2).data())
    }

    /// Embeds source and destination of every event at its own time, then
    /// folds the batch into `table`.
    pub fn embed_batch(
        &self,
        batch: &[Event],
        table: &mut NodeStateTable,
        node_features: Option<&Matrix>,
        paradigm: Paradigm,
    ) -> Result<(Matrix, Matrix)> {
        let queries: Vec<(usize, f64)> = batch
            .iter()
            .map(|e| (e.src, e.t))
            .chain(batch.iter().map(|e| (e.dst, e.t)))
            .collect();
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &queries, table, node_features, paradigm, None)?;
        let z = tape.value(fwd.z);
        let n = batch.len();
        let out = (z.slice_rows(0, n)?, z.slice_rows(n, 2 * n)?);
        table.apply(&fwd.update);
        Ok(out)
    }

    /// Folds `batch` into `table` without producing embeddings.
    pub fn advance(
        &self,
        batch: &[Event],
        table: &mut NodeStateTable,
        node_features: Option<&Matrix>,
        paradigm: Paradigm,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, &[], table, node_features, paradigm, None)?;
        table.apply(&fwd.update);
        Ok(())
    }

    pub fn param_handles(&self) -> ParamHandles {
        ParamHandles {
            w_e: self.ids.w_e,
            w_x: self.ids.w_x,
            layers: self
                .ids
                .layers
                .iter()
                .map(|l| LayerHandles {
                    w1: l.w1,
                    w2: l.w2,
                    gn_gain: l.gn_g,
                    gn_bias: l.gn_b,
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadHandles {
                            w_q: h.w_q,
                            w_k: h.w_k,
                            w_v: h.w_v,
                            b_q: h.b_q,
                            b_k: h.b_k,
                            b_v: h.b_v,
                        })
                        .collect(),
                })
                .collect(),
            link: [self.ids.link.w1, self.ids.link.b1, self.ids.link.w2, self.ids.link.b2],
            node: [self.ids.node.w1, self.ids.node.b1, self.ids.node.w2, self.ids.node.b2],
        }
    }
}

/// Public view of parameter ids, for inspection and hand-set tests.
#[derive(Clone, Debug)]
pub struct ParamHandles {
    pub w_e: ParamId,
    pub w_x: ParamId,
    pub layers: Vec<LayerHandles>,
    /// `[w1, b1, w2, b2]`.
    pub link: [ParamId; 4],
    pub node: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub struct LayerHandles {
    pub w1: ParamId,
    pub w2: ParamId,
    pub gn_gain: ParamId,
    pub gn_bias: ParamId,
    pub heads: Vec<HeadHandles>,
}

#[derive(Clone, Debug)]
pub struct HeadHandles {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub b_q: ParamId,
    pub b_k: ParamId,
    pub b_v: ParamId,
}

fn replicate(x: &Matrix, n: usize) -> Result<Matrix> {
    match x.rows() {
        1 => Ok(x.gather_rows(&vec![0; n])),
        r if r == n => Ok(x.clone()),
        r => Err(GrnError::shape("query rows", (r, x.cols()), (n, x.cols()))),
    }
}

/// Softmax over columns, or a two-column `[1-p, p]` for single logits.
pub fn class_probs(logits: &Matrix) -> Matrix {
    if logits.cols() == 1 {
        let mut out = Matrix::zeros(logits.rows(), 2);
        for r in 0..logits.rows() {
            let p = sigmoid(logits.get(r, 0));
            out.set(r, 0, 1.0 - p);
            out.set(r, 1, p);
        }
        out
    } else {
        softmax_rows(logits)
    }
}
