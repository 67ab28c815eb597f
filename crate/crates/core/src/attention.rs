//! Scaled dot-product attention, multi-head attention, time-restricted
//! self-attention and the position-wise feed-forward block.
//!
//! Restriction is realised by gathering each query's window of keys rather
//! than by masking a dense score matrix, so a restricted pass really performs
//! (and charges to the ledger) only `window * d_k` score products per query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};
use crate::numerics::{charge, concat_feature, dot, matmul, relu, softmax_in_place, Matrix, MultiplyLedger};

/// Look-back / look-ahead frame counts of a restriction window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionWindow {
    pub look_back: usize,
    pub look_ahead: usize,
}

impl RestrictionWindow {
    pub fn new(look_back: usize, look_ahead: usize) -> Self {
        Self { look_back, look_ahead }
    }

    /// Symmetric window of odd size `r`.
    pub fn symmetric(r: usize) -> Result<Self> {
        if r == 0 || r.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "symmetric window size must be odd and positive, got {r}"
            )));
        }
        Ok(Self::new((r - 1) / 2, (r - 1) / 2))
    }

    /// Window size `R = look_back + look_ahead + 1`.
    pub fn size(&self) -> usize {
        self.look_back + self.look_ahead + 1
    }

    /// Frames `[start, end)` visible to query `n` in a sequence of `len`
    /// frames, clipped at both edges.
    pub fn span(&self, n: usize, len: usize) -> (usize, usize) {
        let start = n.saturating_sub(self.look_back);
        let end = n.saturating_add(self.look_ahead).saturating_add(1).min(len);
        (start, end)
    }

    /// True when every query sees the whole sequence.
    pub fn covers(&self, len: usize) -> bool {
        len == 0 || (self.look_back >= len - 1 && self.look_ahead >= len - 1)
    }
}

/// Per-head query/key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl HeadParams {
    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_k.cols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for w in [&self.w_k, &self.w_v] {
            if w.rows() != d {
                return Err(Error::DimensionMismatch {
                    op: "head projections",
                    left: self.w_q.shape(),
                    right: w.shape(),
                });
            }
        }
        if self.w_q.cols() != self.w_k.cols() {
            return Err(Error::DimensionMismatch {
                op: "head query/key width",
                left: self.w_q.shape(),
                right: self.w_k.shape(),
            });
        }
        Ok(())
    }

    /// Projects `x` to queries, keys and values (uncounted).
    pub fn project(&self, x: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((matmul(x, &self.w_q)?, matmul(x, &self.w_k)?, matmul(x, &self.w_v)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<HeadParams>,
    /// Output projection, `(heads * d_v) x d_model`.
    pub w_out: Matrix,
}

impl MhaParams {
    pub fn d_model(&self) -> usize {
        self.w_out.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(Error::InvalidConfig(
                "multi-head attention needs at least one head".into(),
            ));
        };
        let mut concat_width = 0;
        for h in &self.heads {
            h.validate()?;
            if h.d_model() != first.d_model() {
                return Err(Error::DimensionMismatch {
                    op: "head input width",
                    left: first.w_q.shape(),
                    right: h.w_q.shape(),
                });
            }
            concat_width += h.d_v();
        }
        if self.w_out.rows() != concat_width || self.w_out.cols() != first.d_model() {
            return Err(Error::DimensionMismatch {
                op: "output projection",
                left: Shape(concat_width, first.d_model()),
                right: self.w_out.shape(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// A contiguous run of key/value rows attended by one query.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KvSegment<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

/// Attends one query over the concatenation of `segments`, writing the
/// weighted value sum into `out`. Score products are charged to `ledger`.
pub(crate) fn attend_segments(
    query: &[f64],
    segments: &[KvSegment<'_>],
    scale: f64,
    scores: &mut Vec<f64>,
    out: &mut [f64],
    ledger: Option<&MultiplyLedger>,
) {
    let d_k = query.len();
    let d_v = out.len();
    scores.clear();
    for seg in segments {
        for key in seg.keys.chunks_exact(d_k) {
            scores.push(dot(query, key) * scale);
        }
    }
    charge(ledger, scores.len() * d_k);
    softmax_in_place(scores);
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut weights = scores.iter();
    for seg in segments {
        for value in seg.values.chunks_exact(d_v) {
            let w = *weights.next().expect("one weight per value row");
            for (o, v) in out.iter_mut().zip(value) {
                *o += w * v;
            }
        }
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention query/key width",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "attention key/value length",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    Ok(())
}

/// `Softmax(q kᵀ / √d_k) v`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, ledger: Option<&MultiplyLedger>) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let seg = [KvSegment {
        keys: k.data(),
        values: v.data(),
    }];
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut scores = Vec::with_capacity(k.rows());
    for n in 0..q.rows() {
        attend_segments(q.row(n), &seg, scale, &mut scores, out.row_mut(n), ledger);
    }
    Ok(out)
}

/// The attention weight matrix `Softmax(q kᵀ / √d_k)`.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention query/key width",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut w = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            w.set(i, j, dot(q.row(i), k.row(j)) * scale);
        }
        softmax_in_place(w.row_mut(i));
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Gradients of `⟨upstream, scaled_dot_attention(q, k, v)⟩` with respect to
/// `q`, `k` and `v`.
pub fn attention_backward(q: &Matrix, k: &Matrix, v: &Matrix, upstream: &Matrix) -> Result<AttentionGrads> {
    check_qkv(q, k, v)?;
    if upstream.rows() != q.rows() || upstream.cols() != v.cols() {
        return Err(Error::DimensionMismatch {
            op: "attention upstream gradient",
            left: Shape(q.rows(), v.cols()),
            right: upstream.shape(),
        });
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let p = attention_weights(q, k)?;
    let (n_q, n_k) = (q.rows(), k.rows());

    let mut grad_v = Matrix::zeros(n_k, v.cols());
    let mut grad_q = Matrix::zeros(n_q, q.cols());
    let mut grad_k = Matrix::zeros(n_k, k.cols());
    let mut d_scores = vec![0.0; n_k];
    for i in 0..n_q {
        let u = upstream.row(i);
        let p_row = p.row(i);
        // dL/dP_ij = u_i · v_j
        for (j, ds) in d_scores.iter_mut().enumerate() {
            *ds = dot(u, v.row(j));
        }
        let centre: f64 = p_row.iter().zip(&d_scores).map(|(pj, dj)| pj * dj).sum();
        for j in 0..n_k {
            let pj = p_row[j];
            for (g, uc) in grad_v.row_mut(j).iter_mut().zip(u) {
                *g += pj * uc;
            }
            let ds = pj * (d_scores[j] - centre) * scale;
            for (g, kc) in grad_q.row_mut(i).iter_mut().zip(k.row(j)) {
                *g += ds * kc;
            }
            for (g, qc) in grad_k.row_mut(j).iter_mut().zip(q.row(i)) {
                *g += ds * qc;
            }
        }
    }
    Ok(AttentionGrads {
        q: grad_q,
        k: grad_k,
        v: grad_v,
    })
}

/// Restricted attention of every query `n` over the clipped key window
/// around `n`, optionally followed by `extra` key/value rows that every
/// query sees (the dilation sequences).
pub fn windowed_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    window: RestrictionWindow,
    extra: Option<(&Matrix, &Matrix)>,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows() {
        return Err(Error::DimensionMismatch {
            op: "windowed attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if let Some((dk, dv)) = extra {
        if dk.cols() != k.cols() || dv.cols() != v.cols() || dk.rows() != dv.rows() {
            return Err(Error::DimensionMismatch {
                op: "dilation sequences",
                left: dk.shape(),
                right: dv.shape(),
            });
        }
    }
    let len = q.rows();
    let (d_k, d_v) = (k.cols(), v.cols());
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = Matrix::zeros(len, d_v);
    let mut scores = Vec::new();
    for n in 0..len {
        let (start, end) = window.span(n, len);
        let local = KvSegment {
            keys: &k.data()[start * d_k..end * d_k],
            values: &v.data()[start * d_v..end * d_v],
        };
        match extra {
            Some((dk, dv)) if !dk.is_empty() => {
                let dil = KvSegment {
                    keys: dk.data(),
                    values: dv.data(),
                };
                attend_segments(q.row(n), &[local, dil], scale, &mut scores, out.row_mut(n), ledger);
            }
            _ => attend_segments(q.row(n), &[local], scale, &mut scores, out.row_mut(n), ledger),
        }
    }
    Ok(out)
}

pub(crate) fn combine_heads(heads: &[Matrix], w_out: &Matrix) -> Result<Matrix> {
    let parts: Vec<&Matrix> = heads.iter().collect();
    matmul(&concat_feature(&parts)?, w_out)
}

fn check_model_width(x: &Matrix, params: &MhaParams) -> Result<()> {
    if x.cols() != params.d_model() {
        return Err(Error::DimensionMismatch {
            op: "attention input width",
            left: x.shape(),
            right: params.w_out.shape(),
        });
    }
    Ok(())
}

/// Multi-head attention: per-head projection and attention, feature-axis
/// concatenation, output projection.
pub fn mha_forward(x_q: &Matrix, x_kv: &Matrix, params: &MhaParams, ledger: Option<&MultiplyLedger>) -> Result<Matrix> {
    params.validate()?;
    check_model_width(x_q, params)?;
    check_model_width(x_kv, params)?;
    let heads = params
        .heads
        .iter()
        .map(|h| {
            let q = matmul(x_q, &h.w_q)?;
            let k = matmul(x_kv, &h.w_k)?;
            let v = matmul(x_kv, &h.w_v)?;
            scaled_dot_attention(&q, &k, &v, ledger)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_heads(&heads, &params.w_out)
}

/// Time-restricted multi-head self-attention with edge clipping.
pub fn restricted_mha_forward(
    x: &Matrix,
    params: &MhaParams,
    window: RestrictionWindow,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    params.validate()?;
    check_model_width(x, params)?;
    if x.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let heads = params
        .heads
        .iter()
        .map(|h| {
            let (q, k, v) = h.project(x)?;
            windowed_attention(&q, &k, &v, window, None, ledger)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_heads(&heads, &params.w_out)
}

/// `ReLU(x w1 + b1) w2 + b2`.
pub fn ff_forward(x: &Matrix, params: &FeedForwardParams) -> Result<Matrix> {
    let hidden = relu(&matmul(x, &params.w1)?.add_row_vector(&params.b1)?);
    matmul(&hidden, &params.w2)?.add_row_vector(&params.b2)
}
