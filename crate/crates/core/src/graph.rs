//! Continuous-time dynamic graphs as time-ordered interaction event streams.
//!
//! CSV layout is `src,dst,timestamp,label,feat_0,...,feat_{k-1}` with a
//! header row. Raw node ids are remapped to a dense `0..num_nodes` range:
//! ids seen in the `src` column come first, in order of first appearance,
//! then ids that only ever appear as `dst`. When the two columns share no
//! ids the stream is bipartite and destinations occupy
//! `item_offset..num_nodes`. Files in the JODIE layout (a single
//! `comma_separated_list_of_features` header cell) number users and items
//! independently, so their raw ids are kept as `u<id>` and `i<id>`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::tensor::{Matrix, RngState};

/// Header cell used by JODIE-format dumps where all features share one column name.
const PACKED_FEATURE_HEADER: &str = "comma_separated_list_of_features";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub src: usize,
    pub dst: usize,
    pub t: f64,
    pub edge_feat: Vec<f64>,
    pub label: Option<i64>,
}

impl Event {
    pub fn new(src: usize, dst: usize, t: f64) -> Self {
        Event {
            src,
            dst,
            t,
            edge_feat: Vec::new(),
            label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub num_nodes: usize,
    pub edge_feat_dim: usize,
    pub bipartite: bool,
    /// First destination-partition id when `bipartite`; 0 otherwise.
    pub item_offset: usize,
    /// Raw id for each dense id.
    pub raw_ids: Vec<String>,
}

impl EventStream {
    /// Builds a stream from events whose ids are already dense, sorting stably by time.
    pub fn from_events(mut events: Vec<Event>, num_nodes: usize, bipartite: bool, item_offset: usize) -> Result<Self> {
        let edge_feat_dim = events.first().map_or(0, |e| e.edge_feat.len());
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(GrnError::InvalidArgument(format!("event {i}: invalid timestamp {}", e.t)));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(GrnError::UnknownNode(e.src.max(e.dst)));
            }
            if e.edge_feat.len() != edge_feat_dim {
                return Err(GrnError::InvalidArgument(format!(
                    "event {i}: {} edge features, expected {edge_feat_dim}",
                    e.edge_feat.len()
                )));
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(EventStream {
            events,
            num_nodes,
            edge_feat_dim,
            bipartite,
            item_offset: if bipartite { item_offset } else { 0 },
            raw_ids: (0..num_nodes).map(|i| i.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// A stream over a subset of events, sharing node metadata.
    pub fn with_events(&self, events: Vec<Event>) -> EventStream {
        EventStream {
            events,
            num_nodes: self.num_nodes,
            edge_feat_dim: self.edge_feat_dim,
            bipartite: self.bipartite,
            item_offset: self.item_offset,
            raw_ids: self.raw_ids.clone(),
        }
    }

    /// Candidate destination ids for negative sampling.
    pub fn destination_range(&self) -> std::ops::Range<usize> {
        if self.bipartite {
            self.item_offset..self.num_nodes
        } else {
            0..self.num_nodes
        }
    }

    /// Writes the stream in the loader's CSV format using dense ids.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "src,dst,timestamp,label")?;
        for k in 0..self.edge_feat_dim {
            write!(out, ",feat_{k}")?;
        }
        writeln!(out)?;
        for e in &self.events {
            write!(out, "{},{},{},", e.src, e.dst, e.t)?;
            if let Some(l) = e.label {
                write!(out, "{l}")?;
            }
            for v in &e.edge_feat {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Writes the `raw_id,dense_id` sidecar.
    pub fn write_id_map(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(out, "raw_id,dense_id")?;
        for (dense, raw) in self.raw_ids.iter().enumerate() {
            writeln!(out, "{raw},{dense}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Edge features as an `L×d_e` matrix.
    pub fn edge_feature_matrix(&self) -> Matrix {
        let data = self.events.iter().flat_map(|e| e.edge_feat.iter().copied()).collect();
        Matrix::from_vec(self.events.len(), self.edge_feat_dim, data).expect("constant feature width")
    }
}

/// Reads a temporal-interaction CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    if headers.len() < 3 {
        return Err(parse_error(path, 1, format!("expected at least 3 columns, found {}", headers.len())));
    }
    let packed = headers.len() == 5 && &headers[4] == PACKED_FEATURE_HEADER;
    let mut feat_dim: Option<usize> = if packed { None } else { Some(headers.len().saturating_sub(4)) };

    let mut raw_rows: Vec<(String, String, f64, Option<i64>, Vec<f64>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let width = record.len().saturating_sub(4);
        let expected = *feat_dim.get_or_insert(width);
        let min_cols = if expected == 0 { 3 } else { 4 + expected };
        if record.len() < min_cols || record.len() > 4 + expected {
            return Err(parse_error(
                path,
                line,
                format!("expected {} columns, found {}", 4 + expected, record.len()),
            ));
        }
        let t: f64 = record[2]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad timestamp `{}`", &record[2])))?;
        if !t.is_finite() || t < 0.0 {
            return Err(parse_error(path, line, format!("timestamp {t} must be finite and non-negative")));
        }
        let label = match record.get(3) {
            None | Some("") => None,
            Some(s) => Some(parse_label(s).ok_or_else(|| parse_error(path, line, format!("bad label `{s}`")))?),
        };
        let mut feats = Vec::with_capacity(expected);
        for k in 0..expected {
            let cell = &record[4 + k];
            feats.push(
                cell.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("bad feature `{cell}` in column {}", 4 + k)))?,
            );
        }
        let (src, dst) = if packed {
            // JODIE dumps number users and items independently.
            (format!("u{}", &record[0]), format!("i{}", &record[1]))
        } else {
            (record[0].to_string(), record[1].to_string())
        };
        raw_rows.push((src, dst, t, label, feats));
    }

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut raw_ids = Vec::new();
    for (s, _, _, _, _) in &raw_rows {
        if !ids.contains_key(s) {
            ids.insert(s.clone(), raw_ids.len());
            raw_ids.push(s.clone());
        }
    }
    let item_offset = raw_ids.len();
    let srcs: HashSet<&str> = raw_rows.iter().map(|r| r.0.as_str()).collect();
    let bipartite = !raw_rows.is_empty() && raw_rows.iter().all(|r| !srcs.contains(r.1.as_str()));
    for (_, d, _, _, _) in &raw_rows {
        if !ids.contains_key(d) {
            ids.insert(d.clone(), raw_ids.len());
            raw_ids.push(d.clone());
        }
    }

    let mut events: Vec<Event> = raw_rows
        .into_iter()
        .map(|(s, d, t, label, edge_feat)| Event {
            src: ids[&s],
            dst: ids[&d],
            t,
            edge_feat,
            label,
        })
        .collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(EventStream {
        events,
        num_nodes: raw_ids.len(),
        edge_feat_dim: feat_dim.unwrap_or(0),
        bipartite,
        item_offset: if bipartite { item_offset } else { 0 },
        raw_ids,
    })
}

fn parse_label(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    (f.fract() == 0.0 && f.is_finite()).then_some(f as i64)
}

fn parse_error(path: &Path, line: u64, msg: String) -> GrnError {
    GrnError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

impl std::str::FromStr for SplitMode {
    type Err = GrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(SplitMode::Transductive),
            "inductive" => Ok(SplitMode::Inductive),
            other => Err(GrnError::InvalidArgument(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub inductive_node_frac: f64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.15,
            test_frac: 0.15,
            inductive_node_frac: 0.1,
            mode: SplitMode::Transductive,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac, self.inductive_node_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(GrnError::InvalidArgument(format!("split fractions must lie in [0, 1]: {fracs:?}")));
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GrnError::InvalidArgument(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
    /// Nodes hidden from the training segment (inductive mode only).
    pub unobserved: BTreeSet<usize>,
    /// Training events dropped because they touch an unobserved node.
    pub removed_train_events: usize,
}

/// Splits a time-sorted stream at `⌊train·N⌋` and `⌊(train+val)·N⌋`.
pub fn chronological_split(stream: &EventStream, spec: &SplitSpec, rng: &mut RngState) -> Result<Split> {
    spec.validate()?;
    let n = stream.len();
    if n == 0 {
        return Err(GrnError::Empty("cannot split an empty stream".into()));
    }
    let b1 = ((spec.train_frac * n as f64) + 1e-9).floor() as usize;
    let b2 = (((spec.train_frac + spec.val_frac) * n as f64) + 1e-9).floor() as usize;
    let b1 = b1.min(n);
    let b2 = b2.clamp(b1, n);
    let mut train = stream.events[..b1].to_vec();
    let val = stream.events[b1..b2].to_vec();
    let test = stream.events[b2..].to_vec();

    let mut unobserved = BTreeSet::new();
    let mut removed = 0;
    if spec.mode == SplitMode::Inductive {
        let later: BTreeSet<usize> = stream.events[b1..].iter().flat_map(|e| [e.src, e.dst]).collect();
        let mut candidates: Vec<usize> = later.into_iter().collect();
        let count = ((spec.inductive_node_frac * stream.num_nodes as f64) + 1e-9).floor() as usize;
        rng.shuffle(&mut candidates);
        unobserved.extend(candidates.into_iter().take(count));
        let before = train.len();
        train.retain(|e| !unobserved.contains(&e.src) && !unobserved.contains(&e.dst));
        removed = before - train.len();
    }

    Ok(Split {
        train: stream.with_events(train),
        val: stream.with_events(val),
        test: stream.with_events(test),
        unobserved,
        removed_train_events: removed,
    })
}

/// The temporal 1-hop history of one node as seen at `query_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSequence {
    pub node: usize,
    pub query_time: f64,
    pub neighbors: Vec<usize>,
    pub times: Vec<f64>,
    pub edge_feats: Matrix,
    pub deltas: Vec<f64>,
}

impl NeighborSequence {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Collects every event touching `node` strictly before `query_time`,
/// keeping the most recent `max_history` when a bound is given.
pub fn build_neighbor_sequence(
    stream: &EventStream,
    node: usize,
    query_time: f64,
    max_history: Option<usize>,
) -> Result<NeighborSequence> {
    if node >= stream.num_nodes {
        return Err(GrnError::UnknownNode(node));
    }
    if !query_time.is_finite() {
        return Err(GrnError::InvalidArgument(format!("query time {query_time} is not finite")));
    }
    let mut hits: Vec<&Event> = stream
        .events
        .iter()
        .take_while(|e| e.t < query_time)
        .filter(|e| e.src == node || e.dst == node)
        .collect();
    if let Some(cap) = max_history {
        let skip = hits.len().saturating_sub(cap);
        hits.drain(..skip);
    }
    let neighbors = hits.iter().map(|e| if e.dst == node { e.src } else { e.dst }).collect();
    let times: Vec<f64> = hits.iter().map(|e| e.t).collect();
    let deltas = times.iter().map(|t| query_time - t).collect();
    let feats = hits.iter().flat_map(|e| e.edge_feat.iter().copied()).collect();
    Ok(NeighborSequence {
        node,
        query_time,
        neighbors,
        times,
        edge_feats: Matrix::from_vec(hits.len(), stream.edge_feat_dim, feats)?,
        deltas,
    })
}

/// Consecutive, non-overlapping batches of at most `batch_size` events.
pub fn chunk(events: &[Event], batch_size: usize) -> Result<Vec<&[Event]>> {
    if batch_size == 0 {
        return Err(GrnError::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(events.chunks(batch_size).collect())
}

/// One negative per positive: same source and time, uniformly random destination.
pub fn negative_sample(batch: &[Event], stream: &EventStream, rng: &mut RngState) -> Result<Vec<Event>> {
    if batch.is_empty() {
        return Err(GrnError::Empty("negative sampling needs a non-empty batch".into()));
    }
    let range = stream.destination_range();
    if range.is_empty() {
        return Err(GrnError::Empty("no destination candidates".into()));
    }
    Ok(batch
        .iter()
        .map(|e| Event {
            src: e.src,
            dst: range.start + rng.below(range.len()),
            t: e.t,
            edge_feat: e.edge_feat.clone(),
            label: None,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_users: usize,
    pub num_items: usize,
    pub period: usize,
    pub noise_frac: f64,
    pub length: usize,
    /// Width of the fixed per-item feature code carried by each event.
    pub edge_feat_dim: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_users: 10,
            num_items: 50,
            period: 100_000,
            noise_frac: 0.0,
            length: 10_000,
            edge_feat_dim: 8,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.period == 0 || self.length == 0 {
            return Err(GrnError::InvalidArgument(format!("synthetic counts must be at least 1: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.noise_frac) {
            return Err(GrnError::InvalidArgument(format!("noise_frac {} outside [0, 1]", self.noise_frac)));
        }
        Ok(())
    }

    /// The item a user visits at time `t` under the noise-free rule, as a dense id.
    pub fn scheduled_item(&self, user: usize, t: usize) -> usize {
        self.num_users + (user + t / self.period) % self.num_items
    }
}

/// Periodic bipartite stream: at time `t` user `t mod U` visits item
/// `(user + ⌊t/period⌋) mod I`, except that a `noise_frac` share of events
/// pick a uniformly random user and item instead. Every item owns a fixed
/// Gaussian feature code that is attached to each of its events.
pub fn synth_generate(params: &SynthParams, rng: &mut RngState) -> Result<EventStream> {
    params.validate()?;
    let codes = rng.normal_matrix(params.num_items, params.edge_feat_dim, 1.0);
    let mut events = Vec::with_capacity(params.length);
    for t in 0..params.length {
        let noisy = params.noise_frac > 0.0 && rng.unit() < params.noise_frac;
        let (user, item) = if noisy {
            (rng.below(params.num_users), params.num_users + rng.below(params.num_items))
        } else {
            let user = t % params.num_users;
            (user, params.scheduled_item(user, t))
        };
        let mut e = Event::new(user, item, t as f64);
        e.edge_feat = codes.row(item - params.num_users).to_vec();
        events.push(e);
    }
    EventStream::from_events(events, params.num_users + params.num_items, true, params.num_users)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_sorts_by_time() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "src,dst,timestamp,label,feat_0\na,x,5,0,0.5\nb,y,1,,1.5\nc,x,3,1,2.5\n");
        let s = load_csv(&p).unwrap();
        let ts: Vec<f64> = s.events.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1.0, 3.0, 5.0]);
        assert_eq!(s.edge_feat_dim, 1);
        assert_eq!(s.num_nodes, 5);
        assert!(s.bipartite);
        assert_eq!(s.item_offset, 3);
        assert_eq!(s.events[0].label, None);
        assert_eq!(s.events[1].label, Some(1));
        assert_eq!(s.raw_ids[s.events[0].src], "b");
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "src,dst,timestamp,label\n");
        let s = load_csv(&p).unwrap();
        assert!(s.is_empty());
        assert!(chronological_split(&s, &SplitSpec::default(), &mut RngState::new(0)).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.csv", "src,dst,timestamp,label,feat_0\n1,2,3,0,0.1\n1,2,oops,0,0.1\n");
        match load_csv(&p).unwrap_err() {
            GrnError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(&dir, "short.csv", "src,dst,timestamp,label,feat_0\n1,2,3,0\n");
        assert!(matches!(load_csv(&p).unwrap_err(), GrnError::Parse { line: 2, .. }));
    }

    #[test]
    fn packed_feature_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "jodie.csv",
            "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n0,0,0.0,0,0.1,0.2,0.3\n1,0,2.0,1,0.4,0.5,0.6\n",
        );
        let s = load_csv(&p).unwrap();
        assert_eq!(s.edge_feat_dim, 3);
        assert!(s.bipartite);
    }

    #[test]
    fn split_sizes() {
        let events = (0..10).map(|i| Event::new(0, 1, i as f64)).collect();
        let s = EventStream::from_events(events, 2, false, 0).unwrap();
        let sp = chronological_split(&s, &SplitSpec::default(), &mut RngState::new(0)).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (7, 1, 2));

        let all = SplitSpec {
            train_frac: 1.0,
            val_frac: 0.0,
            test_frac: 0.0,
            ..SplitSpec::default()
        };
        let sp = chronological_split(&s, &all, &mut RngState::new(0)).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (10, 0, 0));

        let bad = SplitSpec {
            train_frac: 0.5,
            ..SplitSpec::default()
        };
        assert!(chronological_split(&s, &bad, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn inductive_split_hides_nodes() {
        let params = SynthParams {
            num_items: 10,
            noise_frac: 0.5,
            length: 500,
            ..SynthParams::default()
        };
        let s = synth_generate(&params, &mut RngState::new(4)).unwrap();
        let spec = SplitSpec {
            mode: SplitMode::Inductive,
            ..SplitSpec::default()
        };
        let sp = chronological_split(&s, &spec, &mut RngState::new(8)).unwrap();
        assert_eq!(sp.unobserved.len(), 2);
        assert!(sp
            .train
            .events
            .iter()
            .all(|e| !sp.unobserved.contains(&e.src) && !sp.unobserved.contains(&e.dst)));
        assert_eq!(sp.train.len() + sp.val.len() + sp.test.len() + sp.removed_train_events, s.len());
    }

    #[test]
    fn neighbor_sequence_examples() {
        let events = vec![
            Event::new(1, 7, 1.0),
            Event::new(7, 2, 2.0),
            Event::new(3, 4, 3.0),
            Event::new(5, 7, 4.0),
            Event::new(6, 7, 5.0),
        ];
        let s = EventStream::from_events(events, 8, false, 0).unwrap();
        let seq = build_neighbor_sequence(&s, 7, 5.0, None).unwrap();
        assert_eq!(seq.deltas, vec![4.0, 3.0, 1.0]);
        assert_eq!(seq.neighbors, vec![1, 2, 5]);
        let none = build_neighbor_sequence(&s, 0, 10.0, None).unwrap();
        assert!(none.is_empty());
        let capped = build_neighbor_sequence(&s, 7, 5.0, Some(2)).unwrap();
        assert_eq!(capped.times, vec![2.0, 4.0]);
        assert!(build_neighbor_sequence(&s, 8, 1.0, None).is_err());
    }

    #[test]
    fn chunk_sizes() {
        let events: Vec<Event> = (0..450).map(|i| Event::new(0, 1, i as f64)).collect();
        let sizes: Vec<usize> = chunk(&events, 200).unwrap().iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![200, 200, 50]);
        assert_eq!(chunk(&events, 1).unwrap().len(), 450);
        assert_eq!(chunk(&events, 1000).unwrap().len(), 1);
        assert!(chunk(&events, 0).is_err());
    }

    #[test]
    fn negatives_respect_partition_and_seed() {
        let s = synth_generate(&SynthParams::default(), &mut RngState::new(1)).unwrap();
        let batch = &s.events[..300];
        let a = negative_sample(batch, &s, &mut RngState::new(5)).unwrap();
        let b = negative_sample(batch, &s, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.dst >= s.item_offset && e.dst < s.num_nodes));
        assert!(a.iter().zip(batch).all(|(n, p)| n.src == p.src && n.t == p.t));
        assert!(negative_sample(&[], &s, &mut RngState::new(5)).is_err());
    }

    #[test]
    fn negatives_are_uniform() {
        let events = (0..10_000).map(|i| Event::new(0, 1 + i % 10, i as f64)).collect();
        let s = EventStream::from_events(events, 11, true, 1).unwrap();
        let negs = negative_sample(&s.events, &s, &mut RngState::new(77)).unwrap();
        let mut counts = [0usize; 11];
        for e in &negs {
            counts[e.dst] += 1;
        }
        // Binomial(10⁴, 0.1): mean 1000, sd 30.
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - 1000.0).abs() < 3.0 * sd, "count {c}");
        }
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn synth_noise_free_is_deterministic_rule() {
        let params = SynthParams {
            num_users: 2,
            num_items: 2,
            period: 1,
            noise_frac: 0.0,
            length: 8,
            edge_feat_dim: 0,
        };
        let s = synth_generate(&params, &mut RngState::new(0)).unwrap();
        let pairs: Vec<(usize, usize)> = s.events.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(pairs[..4], [(0, 2), (1, 2), (0, 2), (1, 2)]);
        let again = synth_generate(&params, &mut RngState::new(99)).unwrap();
        assert_eq!(s, again);
        assert!(s.events.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn synth_items_carry_fixed_codes() {
        let params = SynthParams {
            noise_frac: 0.3,
            length: 400,
            ..SynthParams::default()
        };
        let s = synth_generate(&params, &mut RngState::new(6)).unwrap();
        assert_eq!(s.edge_feat_dim, 8);
        let mut seen: std::collections::HashMap<usize, Vec<f64>> = Default::default();
        for e in &s.events {
            let code = seen.entry(e.dst).or_insert_with(|| e.edge_feat.clone());
            assert_eq!(code, &e.edge_feat);
        }
        let codes: Vec<&Vec<f64>> = seen.values().collect();
        assert!(codes.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn synth_full_noise_is_random() {
        let params = SynthParams {
            num_items: 10,
            noise_frac: 1.0,
            length: 2000,
            ..SynthParams::default()
        };
        let s = synth_generate(&params, &mut RngState::new(3)).unwrap();
        let on_rule = s
            .events
            .iter()
            .filter(|e| e.dst == params.scheduled_item(e.src, e.t as usize))
            .count();
        // Chance agreement is 1/num_items.
        assert!((on_rule as f64 / 2000.0 - 0.1).abs() < 0.03);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut events: Vec<Event> = (0..20)
            .map(|i| Event {
                src: i % 3,
                dst: 3 + (i * 7) % 4,
                t: i as f64 * 0.25,
                edge_feat: vec![i as f64 / 3.0, -1.5],
                label: (i % 2 == 0).then_some(1),
            })
            .collect();
        events.swap(3, 9);
        let s = EventStream::from_events(events, 7, true, 3).unwrap();
        let p1 = dir.path().join("one.csv");
        s.write_csv(&p1).unwrap();
        let once = load_csv(&p1).unwrap();
        let p2 = dir.path().join("two.csv");
        once.write_csv(&p2).unwrap();
        let twice = load_csv(&p2).unwrap();
        assert_eq!(once.events, twice.events);
        assert_eq!(once.events.len(), s.events.len());
        for (a, b) in once.events.iter().zip(&s.events) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.edge_feat, b.edge_feat);
            assert_eq!(a.label, b.label);
        }
    }
}
