//! Masked multi-head scaled dot-product attention kernels.
//!
//! Forbidden key positions are excluded from the softmax entirely, so their
//! weights are exactly zero and contribute no gradient.

use super::gemm::{gemm, View};
use super::{NeuralError, Tensor};

/// Boolean `rows x cols` matrix; `true` means the query row may attend to
/// the key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub(crate) struct AttnOutput {
    pub out: Vec<f64>,
    /// `heads x lq x lk` attention weights.
    pub probs: Vec<f64>,
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dbias: Vec<f64>,
}

fn check_mask(mask: &BoolMatrix, lq: usize, lk: usize) -> Result<(), NeuralError> {
    if mask.rows() != lq || mask.cols() != lk {
        return Err(NeuralError::ShapeMismatch {
            expected: vec![lq, lk],
            found: vec![mask.rows(), mask.cols()],
        });
    }
    for r in 0..lq {
        if !mask.row(r).iter().any(|&b| b) {
            return Err(NeuralError::AllMaskedRow { row: r });
        }
    }
    Ok(())
}

/// Multi-head attention forward. `q` is `lq x hidden`, `k` and `v` are
/// `lk x hidden`; `bias`, when given, is `heads x lq x lk` and is added to the
/// scaled scores before the masked softmax.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    hidden: usize,
    heads: usize,
    mask: &BoolMatrix,
    bias: Option<&[f64]>,
) -> Result<AttnOutput, NeuralError> {
    check_mask(mask, lq, lk)?;
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; heads * lq * lk];
    let mut out = vec![0.0; lq * hidden];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            lq,
            d,
            lk,
            scale,
            View::rm(q, h * d, hidden),
            View::tr(k, h * d, hidden),
            0.0,
            p,
            0,
            lk,
            1,
        );
        if let Some(b) = bias {
            let bh = &b[h * lq * lk..(h + 1) * lq * lk];
            for (s, bv) in p.iter_mut().zip(bh) {
                *s += bv;
            }
        }
        for r in 0..lq {
            masked_softmax_row(&mut p[r * lk..(r + 1) * lk], mask.row(r));
        }
        gemm(
            lq,
            lk,
            d,
            1.0,
            View::rm(p, 0, lk),
            View::rm(v, h * d, hidden),
            0.0,
            &mut out,
            h * d,
            hidden,
            1,
        );
    }
    Ok(AttnOutput { out, probs })
}

fn masked_softmax_row(row: &mut [f64], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (s, &a) in row.iter_mut().zip(allowed) {
        if a {
            *s = (*s - max).exp();
            total += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in row.iter_mut() {
        *s /= total;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    lq: usize,
    lk: usize,
    hidden: usize,
    heads: usize,
) -> AttnGrads {
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; lq * hidden];
    let mut dk = vec![0.0; lk * hidden];
    let mut dv = vec![0.0; lk * hidden];
    let mut dbias = vec![0.0; heads * lq * lk];
    let mut dp = vec![0.0; lq * lk];
    for h in 0..heads {
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        // dP = dO_h V_h^T
        gemm(
            lq,
            d,
            lk,
            1.0,
            View::rm(dout, h * d, hidden),
            View::tr(v, h * d, hidden),
            0.0,
            &mut dp,
            0,
            lk,
            1,
        );
        let ds = &mut dbias[h * lq * lk..(h + 1) * lq * lk];
        for r in 0..lq {
            let pr = &p[r * lk..(r + 1) * lk];
            let dpr = &dp[r * lk..(r + 1) * lk];
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for c in 0..lk {
                ds[r * lk + c] = pr[c] * (dpr[c] - dot);
            }
        }
        let ds = &dbias[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            lq,
            lk,
            d,
            scale,
            View::rm(ds, 0, lk),
            View::rm(k, h * d, hidden),
            0.0,
            &mut dq,
            h * d,
            hidden,
            1,
        );
        gemm(
            lk,
            lq,
            d,
            scale,
            View::tr(ds, 0, lk),
            View::rm(q, h * d, hidden),
            0.0,
            &mut dk,
            h * d,
            hidden,
            1,
        );
        gemm(
            lk,
            lq,
            d,
            1.0,
            View::tr(p, 0, lk),
            View::rm(dout, h * d, hidden),
            0.0,
            &mut dv,
            h * d,
            hidden,
            1,
        );
    }
    AttnGrads { dq, dk, dv, dbias }
}

/// Single-head attention weights `softmax(q k^T / sqrt(d))` restricted to
/// permitted keys. `q` is `lq x d`, `k` is `lk x d`.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: &BoolMatrix) -> Result<Tensor, NeuralError> {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    if k.cols() != d {
        return Err(NeuralError::ShapeMismatch {
            expected: vec![lk, d],
            found: k.shape().to_vec(),
        });
    }
    let zeros = vec![0.0; lk * d];
    let res = forward(q.data(), k.data(), &zeros, lq, lk, d, 1, mask, None)?;
    Tensor::new(vec![lq, lk], res.probs)
}

/// Single-head masked attention on plain tensors: `q` is `lq x d`, `k` and
/// `v` are `lk x d`. Returns the `lq x d` output.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BoolMatrix,
) -> Result<Tensor, NeuralError> {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    if k.cols() != d || v.rows() != lk || v.cols() != d {
        return Err(NeuralError::ShapeMismatch {
            expected: vec![lk, d],
            found: v.shape().to_vec(),
        });
    }
    let res = forward(q.data(), k.data(), v.data(), lq, lk, d, 1, mask, None)?;
    Tensor::new(vec![lq, d], res.out)
}
