//! Straightforward reference implementations used as test oracles.
//!
//! Everything here works on explicit row lists with textbook loops: chunks
//! are materialised with their zero padding, every query's key set is
//! assembled into its own matrix before attending, and the encoder is
//! spelled out layer by layer. None of it shares code with the fast paths
//! beyond the [`Matrix`] container and parameter types, so agreement
//! between the two is meaningful.

use crate::attention::{HeadParams, MhaParams, RestrictionWindow};
use crate::dilation::{DilationConfig, HeadDilationParams, MeanPoolDivisor, Mechanism, PpBranch};
use crate::encoder::{AttentionType, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn to_matrix(rows: &Rows, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(r);
    }
    out
}

fn mat_mul(a: &Rows, b: &Rows, b_cols: usize) -> Rows {
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; b_cols];
            for (j, o) in out.iter_mut().enumerate() {
                for (t, x) in row.iter().enumerate() {
                    *o += x * b[t][j];
                }
            }
            out
        })
        .collect()
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "naive matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(to_matrix(&mat_mul(&rows_of(a), &rows_of(b), b.cols()), b.cols()))
}

fn attend_one(q: &[f64], keys: &Rows, values: &Rows) -> Vec<f64> {
    let d_k = q.len() as f64;
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (e, v) in exps.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += e / total * x;
        }
    }
    out
}

/// `softmax(q kᵀ / sqrt(d_k)) v`, one query at a time.
pub fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let (keys, values) = (rows_of(k), rows_of(v));
    let out: Rows = (0..q.rows()).map(|n| attend_one(q.row(n), &keys, &values)).collect();
    Ok(to_matrix(&out, v.cols()))
}

/// Chunks of exactly `m` rows; the last is padded with zero rows. Also
/// returns the number of real frames per chunk.
fn padded_chunks(seq: &Rows, m: usize) -> Vec<(Rows, usize)> {
    let width = seq[0].len();
    seq.chunks(m)
        .map(|c| {
            let mut rows = c.to_vec();
            let real = rows.len();
            rows.resize(m, vec![0.0; width]);
            (rows, real)
        })
        .collect()
}

fn post_branch(pooled: &[Rows], g: &Rows, br: &PpBranch) -> Rows {
    let d = g[0].len();
    let w1 = rows_of(&br.w1);
    let w2 = rows_of(&br.w2);
    (0..g.len())
        .map(|l| {
            let joined: Vec<f64> = pooled.iter().flat_map(|head| head[l].iter().copied()).collect();
            let hidden: Vec<f64> = (0..br.b1.len())
                .map(|j| {
                    let s: f64 = joined.iter().enumerate().map(|(t, x)| x * w1[t][j]).sum();
                    (s + br.b1[j]).max(0.0)
                })
                .collect();
            (0..d)
                .map(|c| {
                    let s: f64 = hidden.iter().enumerate().map(|(t, h)| h * w2[t][c]).sum();
                    s + br.b2[c] + g[l][c]
                })
                .collect()
        })
        .collect()
}

/// Dilation sequences built from explicitly padded chunks.
pub fn naive_dilate(
    k: &Matrix,
    v: &Matrix,
    cfg: &DilationConfig,
    params: &HeadDilationParams,
) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    if k.rows() == 0 || k.rows() != v.rows() {
        return Err(Error::InvalidConfig(
            "dilation needs matching non-empty keys and values".into(),
        ));
    }
    let m = cfg.chunk;
    let kc = padded_chunks(&rows_of(k), m);
    let vc = padded_chunks(&rows_of(v), m);
    let (keys, values): (Rows, Rows) = match cfg.mechanism {
        Mechanism::None => (Vec::new(), Vec::new()),
        Mechanism::Subsample => (
            kc.iter().map(|c| c.0[0].clone()).collect(),
            vc.iter().map(|c| c.0[0].clone()).collect(),
        ),
        Mechanism::MeanPool => {
            let mean = |chunks: &[(Rows, usize)]| -> Rows {
                chunks
                    .iter()
                    .map(|(rows, real)| {
                        let div = match cfg.mean_divisor {
                            MeanPoolDivisor::Padded => m,
                            MeanPoolDivisor::FrameCount => *real,
                        } as f64;
                        (0..rows[0].len())
                            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / div)
                            .collect()
                    })
                    .collect()
            };
            (mean(&kc), mean(&vc))
        }
        Mechanism::AttnPool | Mechanism::AttnPoolPp => {
            let ap = params
                .attn_pool
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("missing pooling queries".into()))?;
            let queries = rows_of(&ap.queries);
            let b = queries.len();
            // per pooling head: pooled keys and values, L rows each
            let mut heads_k: Vec<Rows> = Vec::new();
            let mut heads_v: Vec<Rows> = Vec::new();
            for q in &queries {
                let mut hk = Vec::new();
                let mut hv = Vec::new();
                for ((kr, _), (vr, _)) in kc.iter().zip(&vc) {
                    let w = attention_row_weights(q, kr);
                    hk.push(weighted_sum(&w, kr));
                    hv.push(weighted_sum(&w, vr));
                }
                heads_k.push(hk);
                heads_v.push(hv);
            }
            let average = |heads: &[Rows]| -> Rows {
                (0..heads[0].len())
                    .map(|l| {
                        (0..heads[0][l].len())
                            .map(|c| heads.iter().map(|h| h[l][c]).sum::<f64>() / b as f64)
                            .collect()
                    })
                    .collect()
            };
            let (gk, gv) = (average(&heads_k), average(&heads_v));
            if cfg.mechanism == Mechanism::AttnPoolPp {
                let pp = params
                    .post
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("missing post-processing weights".into()))?;
                (
                    post_branch(&heads_k, &gk, &pp.keys),
                    post_branch(&heads_v, &gv, &pp.values),
                )
            } else {
                (gk, gv)
            }
        }
    };
    Ok((to_matrix(&keys, k.cols()), to_matrix(&values, v.cols())))
}

fn attention_row_weights(q: &[f64], keys: &Rows) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn weighted_sum(w: &[f64], rows: &Rows) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (wi, r) in w.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += wi * x;
        }
    }
    out
}

/// For every query, copy its window rows and all dilation rows into a fresh
/// key/value list and attend over it.
pub fn naive_assemble_attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    window: RestrictionWindow,
    delta_keys: &Matrix,
    delta_values: &Matrix,
) -> Result<Matrix> {
    let n = q.rows();
    let (keys, values) = (rows_of(k), rows_of(v));
    let (dk, dv) = (rows_of(delta_keys), rows_of(delta_values));
    let out: Rows = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(window.look_back);
            let hi = (i + window.look_ahead).min(n - 1);
            let mut ks: Rows = keys[lo..=hi].to_vec();
            let mut vs: Rows = values[lo..=hi].to_vec();
            ks.extend(dk.iter().cloned());
            vs.extend(dv.iter().cloned());
            attend_one(q.row(i), &ks, &vs)
        })
        .collect();
    Ok(to_matrix(&out, v.cols()))
}

/// One dilated self-attention head: project, dilate, assemble, attend.
pub fn naive_dilated_head(
    x: &Matrix,
    head: &HeadParams,
    window: RestrictionWindow,
    cfg: &DilationConfig,
    params: &HeadDilationParams,
) -> Result<Matrix> {
    let q = naive_matmul(x, &head.w_q)?;
    let k = naive_matmul(x, &head.w_k)?;
    let v = naive_matmul(x, &head.w_v)?;
    let (dk, dv) = naive_dilate(&k, &v, cfg, params)?;
    naive_assemble_attend(&q, &k, &v, window, &dk, &dv)
}

fn naive_attention_block(
    h: &Matrix,
    attn: &MhaParams,
    dilation: &[HeadDilationParams],
    cfg: &EncoderConfig,
) -> Result<Matrix> {
    let n = h.rows();
    let mut per_head = Vec::new();
    for (i, head) in attn.heads.iter().enumerate() {
        let out = match cfg.attention {
            AttentionType::Full => naive_attention(
                &naive_matmul(h, &head.w_q)?,
                &naive_matmul(h, &head.w_k)?,
                &naive_matmul(h, &head.w_v)?,
            )?,
            AttentionType::Restricted => {
                let none = DilationConfig::none();
                naive_dilated_head(h, head, cfg.window, &none, &HeadDilationParams::default())?
            }
            AttentionType::Dilated => naive_dilated_head(h, head, cfg.window, &cfg.dilation, &dilation[i])?,
        };
        per_head.push(rows_of(&out));
    }
    let joined: Rows = (0..n)
        .map(|r| per_head.iter().flat_map(|hd| hd[r].iter().copied()).collect())
        .collect();
    Ok(to_matrix(
        &mat_mul(&joined, &rows_of(&attn.w_out), attn.w_out.cols()),
        attn.w_out.cols(),
    ))
}

fn naive_layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Matrix {
    let out: Rows = rows_of(x)
        .into_iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(c, v)| gain[c] * (v - mean) / (var + eps).sqrt() + bias[c])
                .collect()
        })
        .collect();
    to_matrix(&out, x.cols())
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, x) in out.data_mut().iter_mut().zip(b.data()) {
        *o += x;
    }
    out
}

/// Pre-norm encoder written out step by step.
pub fn naive_encoder_forward(x: &Matrix, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<Matrix> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut state = naive_matmul(x, &w.input_proj)?;
    for n in 0..state.rows() {
        for c in 0..d {
            let i = c / 2;
            let angle = n as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            state.set(n, c, state.get(n, c) + pe);
        }
    }
    let eps = cfg.precision.layer_norm_eps();
    for layer in &w.layers {
        let h = naive_layer_norm(&state, &layer.attn_norm.gain, &layer.attn_norm.bias, eps);
        state = add(&state, &naive_attention_block(&h, &layer.attn, &layer.dilation, cfg)?);
        let h = naive_layer_norm(&state, &layer.ff_norm.gain, &layer.ff_norm.bias, eps);
        let mut hidden = naive_matmul(&h, &layer.ff.w1)?;
        for r in 0..hidden.rows() {
            for (c, b) in layer.ff.b1.iter().enumerate() {
                hidden.set(r, c, (hidden.get(r, c) + b).max(0.0));
            }
        }
        let mut ff = naive_matmul(&hidden, &layer.ff.w2)?;
        for r in 0..ff.rows() {
            for (c, b) in layer.ff.b2.iter().enumerate() {
                ff.set(r, c, ff.get(r, c) + b);
            }
        }
        state = add(&state, &ff);
    }
    Ok(state)
}
