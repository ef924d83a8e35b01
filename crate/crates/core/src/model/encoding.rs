//! Fixed cosine time encoding and the message function.

use crate::error::{GrnError, Result};
use crate::tensor::Matrix;

/// Frequencies `(√d)^{-(i-1)/√d}` for `i = 1..=d`.
pub fn time_frequencies(dim: usize) -> Vec<f64> {
    let root = (dim as f64).sqrt();
    (0..dim).map(|i| root.powf(-(i as f64) / root)).collect()
}

/// `TE(Δt)_i = cos(Δt · (√d)^{-(i-1)/√d})`.
pub fn temporal_encode(delta_t: f64, dim: usize) -> Vec<f64> {
    time_frequencies(dim).into_iter().map(|f| (delta_t * f).cos()).collect()
}

/// Row-wise encoding of a vector of intervals.
pub fn temporal_encode_rows(deltas: &[f64], dim: usize) -> Matrix {
    let freqs = time_frequencies(dim);
    let mut out = Matrix::zeros(deltas.len(), dim);
    for (r, &dt) in deltas.iter().enumerate() {
        for (v, &f) in out.row_mut(r).iter_mut().zip(&freqs) {
            *v = (dt * f).cos();
        }
    }
    out
}

/// `X W_x + E W_e + TE(ΔT)`; the encoding term is dropped when `use_te` is false.
pub fn message(
    x_src_raw: &Matrix,
    w_x: &Matrix,
    edges: &Matrix,
    w_e: &Matrix,
    deltas: &[f64],
    use_te: bool,
) -> Result<Matrix> {
    let l = x_src_raw.rows();
    if edges.rows() != l || deltas.len() != l {
        return Err(GrnError::shape("message", x_src_raw.shape(), (edges.rows(), deltas.len())));
    }
    let mut out = x_src_raw.matmul(w_x)?;
    out.add_assign(&edges.matmul(w_e)?)?;
    if use_te {
        out.add_assign(&temporal_encode_rows(deltas, out.cols()))?;
    }
    Ok(out)
}
