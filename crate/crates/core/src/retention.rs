//! Graph retention: a destination node's queries against the key/value
//! messages of its temporal neighbors, in three equivalent forms.
//!
//! * parallel: `O = (Q Kᵀ ⊙ D) V + Q S₀` with the causal decay mask
//!   `D[t][k] = w_k` for `t ≥ k`, else 0;
//! * recurrent: `S_t = S_{t-1} + w_t k_tᵀ v_t`, `o_t = q_t S_t`;
//! * chunk-wise: the parallel form inside each chunk plus the carried state
//!   `Q_chunk S_in` across chunk boundaries.
//!
//! With unnormalized scores all three produce the same outputs for any
//! query rows. Score normalization only applies to the intra-chunk term of
//! the parallel and chunk-wise forms.

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::tensor::{dot, Matrix};

/// Per-head projection weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
}

impl RetentionParams {
    pub fn identity(d: usize) -> Self {
        RetentionParams {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            b_q: vec![0.0; d],
            b_k: vec![0.0; d],
            b_v: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape() != (d, d) {
                return Err(GrnError::shape("retention params", (d, d), w.shape()));
            }
            if !w.is_finite() {
                return Err(GrnError::InvalidArgument("non-finite retention weight".into()));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v] {
            if b.len() != d {
                return Err(GrnError::shape("retention bias", (1, d), (1, b.len())));
            }
        }
        Ok(())
    }
}

/// How the per-message weight `w_k` is derived from its time interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecayPolicy {
    Unit,
    TimeDecay { lambda: f64 },
}

impl Default for DecayPolicy {
    fn default() -> Self {
        DecayPolicy::Unit
    }
}

impl DecayPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecayPolicy::TimeDecay { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(GrnError::InvalidArgument(format!("decay lambda must be positive, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn weight(&self, delta: f64) -> f64 {
        match *self {
            DecayPolicy::Unit => 1.0,
            DecayPolicy::TimeDecay { lambda } => (-lambda * delta).exp(),
        }
    }

    pub fn weights(&self, deltas: &[f64]) -> Vec<f64> {
        deltas.iter().map(|&d| self.weight(d)).collect()
    }
}

/// Lower-triangular causal mask with column weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask(pub Matrix);

impl DecayMask {
    pub fn from_weights(weights: &[f64]) -> Self {
        let l = weights.len();
        let mut d = Matrix::zeros(l, l);
        for t in 0..l {
            for (k, &w) in weights.iter().enumerate().take(t + 1) {
                d.set(t, k, w);
            }
        }
        DecayMask(d)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

pub fn build_decay_mask(deltas: &[f64], policy: DecayPolicy) -> Result<DecayMask> {
    if let Some(bad) = deltas.iter().find(|d| !(**d >= 0.0)) {
        return Err(GrnError::InvalidArgument(format!("time interval {bad} must be non-negative")));
    }
    policy.validate()?;
    Ok(DecayMask::from_weights(&policy.weights(deltas)))
}

/// Recurrent carrier for one (node, layer, head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionState {
    pub s: Matrix,
    pub last_time: f64,
}

impl RetentionState {
    pub fn zeros(d: usize) -> Self {
        RetentionState {
            s: Matrix::zeros(d, d),
            last_time: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "chunk_size", rename_all = "snake_case")]
pub enum Paradigm {
    Parallel,
    Recurrent,
    Chunkwise(usize),
}

impl Paradigm {
    /// Chunk length used for a sequence of `len` rows.
    pub fn chunk_len(&self, len: usize) -> usize {
        match *self {
            Paradigm::Parallel => len.max(1),
            Paradigm::Recurrent => 1,
            Paradigm::Chunkwise(b) => b.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Paradigm::Chunkwise(0) => Err(GrnError::InvalidArgument("chunk size must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn parse(name: &str, chunk_size: Option<usize>) -> Result<Self> {
        let p = match name {
            "parallel" => Paradigm::Parallel,
            "recurrent" => Paradigm::Recurrent,
            "chunkwise" => Paradigm::Chunkwise(chunk_size.ok_or_else(|| {
                GrnError::InvalidArgument("chunkwise paradigm needs a chunk size".into())
            })?),
            other => return Err(GrnError::InvalidArgument(format!("unknown paradigm `{other}`"))),
        };
        p.validate()?;
        Ok(p)
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Paradigm::Parallel => write!(f, "parallel"),
            Paradigm::Recurrent => write!(f, "recurrent"),
            Paradigm::Chunkwise(b) => write!(f, "chunkwise({b})"),
        }
    }
}

/// `Q = x_dst W_q + b_q`, `K = X_src W_k + b_k`, `V = X_src W_v + b_v`.
pub fn project_qkv(x_dst: &Matrix, x_src: &Matrix, params: &RetentionParams) -> Result<(Matrix, Matrix, Matrix)> {
    let d = params.dim();
    if x_dst.cols() != d {
        return Err(GrnError::shape("project_qkv query", x_dst.shape(), (d, d)));
    }
    if x_src.cols() != d {
        return Err(GrnError::shape("project_qkv source", x_src.shape(), (d, d)));
    }
    let q = x_dst.matmul(&params.w_q)?.add_row(&params.b_q)?;
    let k = x_src.matmul(&params.w_k)?.add_row(&params.b_k)?;
    let v = x_src.matmul(&params.w_v)?.add_row(&params.b_v)?;
    Ok((q, k, v))
}

/// Repeats a single query row `n` times.
pub fn replicate_row(q: &Matrix, n: usize) -> Matrix {
    debug_assert_eq!(q.rows(), 1);
    q.gather_rows(&vec![0; n])
}

/// Applies the three score normalizations: `QKᵀ/√d`, row-normalized `D`,
/// then each row of `R = (QKᵀ/√d) ⊙ D̃` divided by `max(|row sum|, 1)`.
pub fn normalize_scores(q: &Matrix, k: &Matrix, mask: &DecayMask) -> Result<(Matrix, Matrix)> {
    let l = mask.len();
    if q.rows() != l || k.rows() != l || q.cols() != k.cols() {
        return Err(GrnError::shape("normalize_scores", q.shape(), k.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut d_norm = mask.0.clone();
    for r in 0..l {
        let row = d_norm.row_mut(r);
        let sum: f64 = row.iter().sum();
        if sum != 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    let mut r_mat = q.matmul_transposed(k)?.scale(scale).hadamard(&d_norm)?;
    for r in 0..l {
        let row = r_mat.row_mut(r);
        let denom = row.iter().sum::<f64>().abs().max(1.0);
        row.iter_mut().for_each(|v| *v /= denom);
    }
    Ok((r_mat, d_norm))
}

/// Intra-chunk score matrix, `L×L`.
fn chunk_scores(q: &Matrix, k: &Matrix, weights: &[f64], normalized: bool) -> Matrix {
    let l = weights.len();
    let mut r = Matrix::zeros(l, l);
    let scale = if normalized { 1.0 / (q.cols() as f64).sqrt() } else { 1.0 };
    let mut prefix = 0.0;
    for t in 0..l {
        prefix += weights[t];
        let qt = q.row(t);
        let row = r.row_mut(t);
        for kk in 0..=t {
            let mut w = weights[kk];
            if normalized && prefix != 0.0 {
                w /= prefix;
            }
            row[kk] = dot(qt, k.row(kk)) * scale * w;
        }
        if normalized {
            let denom = row.iter().sum::<f64>().abs().max(1.0);
            row.iter_mut().for_each(|v| *v /= denom);
        }
    }
    r
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, weights: &[f64]) -> Result<()> {
    let l = weights.len();
    if q.rows() != l || k.rows() != l || v.rows() != l {
        return Err(GrnError::shape("retention rows", (q.rows(), k.rows()), (v.rows(), l)));
    }
    if q.cols() != k.cols() {
        return Err(GrnError::shape("retention q/k", q.shape(), k.shape()));
    }
    Ok(())
}

/// Parallel form `(QKᵀ ⊙ D) V`, normalized or not.
pub fn retention_parallel(q: &Matrix, k: &Matrix, v: &Matrix, mask: &DecayMask, normalized: bool) -> Result<Matrix> {
    let l = mask.len();
    check_qkv(q, k, v, &vec![0.0; l])?;
    let scores = if normalized {
        normalize_scores(q, k, mask)?.0
    } else {
        q.matmul_transposed(k)?.hadamard(mask.matrix())?
    };
    scores.matmul(v)
}

/// One recurrent step: `S' = S + w kᵀ v`, `o = q S'`.
pub fn retention_recurrent(
    state: &RetentionState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w: f64,
) -> Result<(Vec<f64>, RetentionState)> {
    let d = state.dim();
    if q.len() != d || k.len() != d || state.s.cols() != v.len() {
        return Err(GrnError::shape("retention_recurrent", (q.len(), k.len()), state.s.shape()));
    }
    let mut next = state.clone();
    let mut out = vec![0.0; v.len()];
    recurrent_step(&mut next.s, q, k, v, w, &mut out);
    Ok((out, next))
}

/// In-place recurrent step writing `q S'` into `out`.
#[inline]
pub fn recurrent_step(s: &mut Matrix, q: &[f64], k: &[f64], v: &[f64], w: f64, out: &mut [f64]) {
    let dv = v.len();
    let data = s.data_mut();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, (&ki, &qi)) in k.iter().zip(q).enumerate() {
        let row = &mut data[i * dv..(i + 1) * dv];
        let wk = w * ki;
        for ((sv, &vv), o) in row.iter_mut().zip(v).zip(out.iter_mut()) {
            *sv += wk * vv;
            *o += qi * *sv;
        }
    }
}

/// `S_out = S_in + Kᵀ diag(w) V`.
pub fn accumulate_state(s: &Matrix, k: &Matrix, v: &Matrix, weights: &[f64]) -> Result<Matrix> {
    let weighted = scale_rows(v, weights);
    let mut out = s.clone();
    out.add_assign(&k.transposed_matmul(&weighted)?)?;
    Ok(out)
}

fn scale_rows(m: &Matrix, weights: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &w) in weights.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|x| *x *= w);
    }
    out
}

/// Chunk-wise stage: intra-chunk parallel term plus `Q · S_in` on every row.
pub fn retention_chunkwise(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    state_in: &RetentionState,
    normalized: bool,
) -> Result<(Matrix, RetentionState)> {
    check_qkv(q, k, v, weights)?;
    if weights.is_empty() {
        return Err(GrnError::Empty("chunk must hold at least one event".into()));
    }
    if state_in.s.shape() != (q.cols(), v.cols()) {
        return Err(GrnError::shape("retention_chunkwise state", state_in.s.shape(), (q.cols(), v.cols())));
    }
    let mut out = chunk_scores(q, k, weights, normalized).matmul(v)?;
    out.add_assign(&q.matmul(&state_in.s)?)?;
    let s = accumulate_state(&state_in.s, k, v, weights)?;
    Ok((
        out,
        RetentionState {
            s,
            last_time: state_in.last_time,
        },
    ))
}

/// Chunk-wise stage driven by the previous stage's destination embedding:
/// one frozen query `x_prev W_q + b_q` shared by every row of the chunk.
pub fn chunkwise_stage(
    x_dst_prev: &Matrix,
    x_chunk: &Matrix,
    deltas: &[f64],
    state_in: &RetentionState,
    params: &RetentionParams,
    policy: DecayPolicy,
    normalized: bool,
) -> Result<(Matrix, RetentionState)> {
    if x_dst_prev.rows() != 1 {
        return Err(GrnError::shape("chunkwise_stage query", x_dst_prev.shape(), (1, params.dim())));
    }
    let (q, k, v) = project_qkv(x_dst_prev, x_chunk, params)?;
    let q = replicate_row(&q, x_chunk.rows());
    let mask = build_decay_mask(deltas, policy)?;
    let weights: Vec<f64> = (0..mask.len()).map(|i| mask.0.get(mask.len() - 1, i)).collect();
    retention_chunkwise(&q, &k, &v, &weights, state_in, normalized)
}

/// Runs retention over `L` rows in the requested paradigm, returning the
/// per-row outputs and the state after the last row. Query rows are taken
/// as given.
pub fn retain(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    s_in: &Matrix,
    paradigm: Paradigm,
    normalized: bool,
) -> Result<(Matrix, Matrix)> {
    check_qkv(q, k, v, weights)?;
    paradigm.validate()?;
    let (dk, dv) = (q.cols(), v.cols());
    if s_in.shape() != (dk, dv) {
        return Err(GrnError::shape("retention state", s_in.shape(), (dk, dv)));
    }
    let l = weights.len();
    let mut out = Matrix::zeros(l, dv);
    if l == 0 {
        return Ok((out, s_in.clone()));
    }
    match paradigm {
        Paradigm::Recurrent if !normalized => {
            let mut s = s_in.clone();
            for t in 0..l {
                let (qr, kr, vr) = (q.row(t), k.row(t), v.row(t));
                recurrent_step(&mut s, qr, kr, vr, weights[t], out.row_mut(t));
            }
            Ok((out, s))
        }
        _ => {
            let b = paradigm.chunk_len(l);
            let mut s = s_in.clone();
            let mut start = 0;
            while start < l {
                let end = (start + b).min(l);
                let qc = q.slice_rows(start, end)?;
                let kc = k.slice_rows(start, end)?;
                let vc = v.slice_rows(start, end)?;
                let wc = &weights[start..end];
                let mut oc = chunk_scores(&qc, &kc, wc, normalized).matmul(&vc)?;
                oc.add_assign(&qc.matmul(&s)?)?;
                for r in 0..oc.rows() {
                    out.row_mut(start + r).copy_from_slice(oc.row(r));
                }
                s = accumulate_state(&s, &kc, &vc, wc)?;
                start = end;
            }
            Ok((out, s))
        }
    }
}

/// Gradients of `retain` with respect to `Q`, `K` and `V` given the output
/// adjoint `d_out`. `S_in` and the weights are treated as constants.
pub fn retain_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    s_in: &Matrix,
    paradigm: Paradigm,
    normalized: bool,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_qkv(q, k, v, weights)?;
    let l = weights.len();
    let (dk_dim, dv_dim) = (q.cols(), v.cols());
    let mut dq = Matrix::zeros(l, dk_dim);
    let mut dk = Matrix::zeros(l, dk_dim);
    let mut dv = Matrix::zeros(l, dv_dim);
    if l == 0 {
        return Ok((dq, dk, dv));
    }
    // Unnormalized recurrent is the same function as a single parallel chunk.
    let b = if normalized { paradigm.chunk_len(l) } else { l };
    let bounds: Vec<(usize, usize)> = (0..l).step_by(b).map(|s| (s, (s + b).min(l))).collect();

    // Forward pass over chunks to recover the state each chunk saw.
    let mut states = Vec::with_capacity(bounds.len());
    let mut s = s_in.clone();
    for &(a, e) in &bounds {
        states.push(s.clone());
        s = accumulate_state(&s, &k.slice_rows(a, e)?, &v.slice_rows(a, e)?, &weights[a..e])?;
    }

    // Adjoint of the carried state flowing back from later chunks.
    let mut d_state = Matrix::zeros(dk_dim, dv_dim);
    for (ci, &(a, e)) in bounds.iter().enumerate().rev() {
        let qc = q.slice_rows(a, e)?;
        let kc = k.slice_rows(a, e)?;
        let vc = v.slice_rows(a, e)?;
        let wc = &weights[a..e];
        let doc = d_out.slice_rows(a, e)?;

        // State contribution kᵀ w v of this chunk feeds all later chunks.
        let dk_state = scale_rows(&vc, wc).matmul_transposed(&d_state)?;
        let dv_state = scale_rows(&kc, wc).matmul(&d_state)?;

        // Cross term Q_c S_c.
        let dq_cross = doc.matmul_transposed(&states[ci])?;
        d_state.add_assign(&qc.transposed_matmul(&doc)?)?;

        let (dq_in, dk_in, dv_in) = chunk_backward(&qc, &kc, &vc, wc, normalized, &doc)?;
        for r in 0..(e - a) {
            for (dst, (x, y)) in dq.row_mut(a + r).iter_mut().zip(dq_in.row(r).iter().zip(dq_cross.row(r))) {
                *dst = x + y;
            }
            for (dst, (x, y)) in dk.row_mut(a + r).iter_mut().zip(dk_in.row(r).iter().zip(dk_state.row(r))) {
                *dst = x + y;
            }
            for (dst, (x, y)) in dv.row_mut(a + r).iter_mut().zip(dv_in.row(r).iter().zip(dv_state.row(r))) {
                *dst = x + y;
            }
        }
    }
    Ok((dq, dk, dv))
}

fn chunk_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &[f64],
    normalized: bool,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let l = weights.len();
    let scale = if normalized { 1.0 / (q.cols() as f64).sqrt() } else { 1.0 };
    let mut dq = Matrix::zeros(l, q.cols());
    let mut dk = Matrix::zeros(l, k.cols());
    let mut dv = Matrix::zeros(l, v.cols());
    let mut prefix = 0.0;
    let mut raw = vec![0.0; l];
    let mut eff_w = vec![0.0; l];
    let mut d_final = vec![0.0; l];
    for t in 0..l {
        prefix += weights[t];
        let qt = q.row(t);
        let go = d_out.row(t);
        for kk in 0..=t {
            let mut w = weights[kk];
            if normalized && prefix != 0.0 {
                w /= prefix;
            }
            eff_w[kk] = w;
            raw[kk] = dot(qt, k.row(kk)) * scale * w;
        }
        let sum: f64 = raw[..=t].iter().sum();
        let denom = if normalized { sum.abs().max(1.0) } else { 1.0 };
        // d(final score) and dV.
        for kk in 0..=t {
            d_final[kk] = dot(go, v.row(kk));
            let coeff = raw[kk] / denom;
            for (x, &g) in dv.row_mut(kk).iter_mut().zip(go) {
                *x += coeff * g;
            }
        }
        // Through the row rescaling.
        let correction = if normalized && sum.abs() > 1.0 {
            let dot_term: f64 = (0..=t).map(|kk| d_final[kk] * raw[kk]).sum();
            sum.signum() * dot_term / (denom * denom)
        } else {
            0.0
        };
        for kk in 0..=t {
            let d_raw = d_final[kk] / denom - correction;
            let d_dot = d_raw * scale * eff_w[kk];
            if d_dot == 0.0 {
                continue;
            }
            let kr = k.row(kk).to_vec();
            for (x, &kv) in dq.row_mut(t).iter_mut().zip(&kr) {
                *x += d_dot * kv;
            }
            for (x, &qv) in dk.row_mut(kk).iter_mut().zip(qt) {
                *x += d_dot * qv;
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Full graph-retention pass for one destination node: project the
/// destination query (replicated to every row when a single row is given)
/// and the neighbor messages, then run the requested paradigm from `state`.
#[allow(clippy::too_many_arguments)]
pub fn graph_retention(
    x_dst: &Matrix,
    x_src: &Matrix,
    deltas: &[f64],
    params: &RetentionParams,
    policy: DecayPolicy,
    paradigm: Paradigm,
    normalized: bool,
    state: &RetentionState,
) -> Result<(Matrix, RetentionState)> {
    if deltas.len() != x_src.rows() {
        return Err(GrnError::shape("graph_retention deltas", (deltas.len(), 1), x_src.shape()));
    }
    let l = x_src.rows();
    if l == 0 {
        return Ok((Matrix::zeros(0, params.dim()), state.clone()));
    }
    let (q, k, v) = project_qkv(x_dst, x_src, params)?;
    let q = match q.rows() {
        1 => replicate_row(&q, l),
        r if r == l => q,
        r => return Err(GrnError::shape("graph_retention queries", (r, q.cols()), (l, q.cols()))),
    };
    let mask = build_decay_mask(deltas, policy)?;
    let weights: Vec<f64> = if l > 0 { mask.0.row(l - 1).to_vec() } else { Vec::new() };
    let (out, s) = retain(&q, &k, &v, &weights, &state.s, paradigm, normalized)?;
    Ok((
        out,
        RetentionState {
            s,
            last_time: state.last_time,
        },
    ))
}
