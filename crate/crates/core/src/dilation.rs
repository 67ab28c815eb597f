//! Dilation sequences: low-frame-rate summaries of a head's keys and values
//! that are appended to every query's restricted window.
//!
//! The key/value sequence of length `N` is cut into `L = ceil(N / M)`
//! non-overlapping chunks of `M` frames, the last one zero-padded. Each chunk
//! is reduced to one key row and one value row by one of:
//!
//! * subsampling: the first frame of the chunk,
//! * mean-pooling: the average over all `M` slots (pad slots included),
//! * attention pooling: `B` learned query embeddings attend over the key
//!   chunk; the weights summarise both the key and the value chunk and the
//!   `B` outputs are averaged,
//! * attention pooling with post-processing: a bottleneck feed-forward over
//!   the concatenated `B` outputs, added residually to the average.
//!
//! Chunks are anchored at frame 0. Zero-padded slots take part in the pooling
//! exactly as zero frames would; their attention scores are known to be zero
//! and are not multiplied out.

use serde::{Deserialize, Serialize};

use crate::attention::{attend_segments, windowed_attention, HeadParams, KvSegment, MhaParams, RestrictionWindow};
use crate::error::{Error, Result, Shape};
use crate::numerics::{
    charge, concat_feature, dot, matmul_tracked, relu, softmax_in_place, vecmat, Matrix, MultiplyLedger,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    Subsample,
    MeanPool,
    AttnPool,
    AttnPoolPp,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::None,
        Mechanism::Subsample,
        Mechanism::MeanPool,
        Mechanism::AttnPool,
        Mechanism::AttnPoolPp,
    ];

    pub fn uses_attn_pool(self) -> bool {
        matches!(self, Mechanism::AttnPool | Mechanism::AttnPoolPp)
    }

    pub fn uses_post_process(self) -> bool {
        self == Mechanism::AttnPoolPp
    }

    pub fn code(self) -> u32 {
        match self {
            Mechanism::None => 0,
            Mechanism::Subsample => 1,
            Mechanism::MeanPool => 2,
            Mechanism::AttnPool => 3,
            Mechanism::AttnPoolPp => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    /// Short table label, e.g. `MP` or `AP-2+PP`.
    pub fn label(self, pool_heads: usize) -> String {
        match self {
            Mechanism::None => "-".into(),
            Mechanism::Subsample => "subsampling".into(),
            Mechanism::MeanPool => "MP".into(),
            Mechanism::AttnPool => format!("AP-{pool_heads}"),
            Mechanism::AttnPoolPp => format!("AP-{pool_heads}+PP"),
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Mechanism::None),
            "subsample" | "subsampling" => Ok(Mechanism::Subsample),
            "mean_pool" | "mp" => Ok(Mechanism::MeanPool),
            "attn_pool" | "ap" => Ok(Mechanism::AttnPool),
            "attn_pool_pp" | "ap+pp" | "ap_pp" => Ok(Mechanism::AttnPoolPp),
            other => Err(Error::InvalidConfig(format!("unknown dilation mechanism `{other}`"))),
        }
    }
}

/// Divisor used by mean-pooling for the zero-padded final chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanPoolDivisor {
    /// Always divide by `M`, pad slots included.
    #[default]
    Padded,
    /// Divide by the number of real frames in the chunk.
    FrameCount,
}

impl MeanPoolDivisor {
    pub fn code(self) -> u32 {
        match self {
            MeanPoolDivisor::Padded => 0,
            MeanPoolDivisor::FrameCount => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MeanPoolDivisor::Padded),
            1 => Some(MeanPoolDivisor::FrameCount),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilationConfig {
    pub mechanism: Mechanism,
    /// Chunk size `M` in frames.
    pub chunk: usize,
    /// Number of pooling queries `B`.
    #[serde(default = "default_pool_heads")]
    pub pool_heads: usize,
    /// Post-processing bottleneck width.
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    #[serde(default)]
    pub mean_divisor: MeanPoolDivisor,
}

fn default_pool_heads() -> usize {
    1
}

fn default_d_in() -> usize {
    16
}

impl DilationConfig {
    pub fn none() -> Self {
        Self {
            mechanism: Mechanism::None,
            chunk: 1,
            pool_heads: 1,
            d_in: 16,
            mean_divisor: MeanPoolDivisor::Padded,
        }
    }

    pub fn new(mechanism: Mechanism, chunk: usize) -> Self {
        Self {
            mechanism,
            chunk,
            ..Self::none()
        }
    }

    pub fn with_pool_heads(mut self, b: usize) -> Self {
        self.pool_heads = b;
        self
    }

    pub fn with_d_in(mut self, d_in: usize) -> Self {
        self.d_in = d_in;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        if self.mechanism.uses_attn_pool() && self.pool_heads == 0 {
            return Err(Error::InvalidConfig(
                "attention pooling needs at least one pooling head".into(),
            ));
        }
        if self.mechanism.uses_post_process() && self.d_in == 0 {
            return Err(Error::InvalidConfig(
                "post-processing bottleneck d_in must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How a sequence of `len` frames splits into chunks of `chunk` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkingPlan {
    pub chunk: usize,
    pub len: usize,
    pub count: usize,
    pub pad: usize,
}

impl ChunkingPlan {
    pub fn new(len: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        let count = len.div_ceil(chunk);
        Ok(Self {
            chunk,
            len,
            count,
            pad: count * chunk - len,
        })
    }

    /// Real (unpadded) frame range of chunk `l`.
    pub fn frames(&self, l: usize) -> (usize, usize) {
        (l * self.chunk, ((l + 1) * self.chunk).min(self.len))
    }
}

/// Learned pooling queries of one attention head, `B x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApParams {
    pub queries: Matrix,
}

/// Bottleneck feed-forward for one branch (keys or values).
#[derive(Debug, Clone, PartialEq)]
pub struct PpBranch {
    /// `(d * B) x d_in`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_in x d`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl PpBranch {
    pub fn zeros(d: usize, pool_heads: usize, d_in: usize) -> Self {
        Self {
            w1: Matrix::zeros(d * pool_heads, d_in),
            b1: vec![0.0; d_in],
            w2: Matrix::zeros(d_in, d),
            b2: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpParams {
    pub keys: PpBranch,
    pub values: PpBranch,
}

/// Dilation parameters owned by one attention head of one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadDilationParams {
    pub attn_pool: Option<ApParams>,
    pub post: Option<PpParams>,
}

/// Summarised keys (`L x d_k`) and values (`L x d_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct DilationSequences {
    pub keys: Matrix,
    pub values: Matrix,
}

impl DilationSequences {
    pub fn empty(d_k: usize, d_v: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d_k),
            values: Matrix::zeros(0, d_v),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    /// First `rows` summary rows.
    pub fn truncated(&self, rows: usize) -> Self {
        Self {
            keys: self.keys.slice_rows(0, rows),
            values: self.values.slice_rows(0, rows),
        }
    }
}

/// Per-pooling-head attention outputs `a_b`, one `L x d` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledHeads {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

fn check_kv(k: &Matrix, v: &Matrix) -> Result<()> {
    if k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "dilation key/value length",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if k.is_empty() {
        return Err(Error::InvalidConfig("dilation over an empty sequence".into()));
    }
    Ok(())
}

/// Splits `seq` into `ceil(N / m)` chunks of `m` rows, zero-padding the last.
pub fn split_chunks(seq: &Matrix, m: usize) -> Result<Vec<Matrix>> {
    if seq.is_empty() {
        return Err(Error::InvalidConfig("cannot chunk an empty sequence".into()));
    }
    let plan = ChunkingPlan::new(seq.rows(), m)?;
    Ok((0..plan.count)
        .map(|l| {
            let (s, e) = plan.frames(l);
            let mut chunk = Matrix::zeros(m, seq.cols());
            chunk.data_mut()[..(e - s) * seq.cols()].copy_from_slice(seq.rows_slice(s, e));
            chunk
        })
        .collect())
}

/// First frame of every chunk.
pub fn dilate_subsample(k: &Matrix, v: &Matrix, m: usize) -> Result<DilationSequences> {
    check_kv(k, v)?;
    let plan = ChunkingPlan::new(k.rows(), m)?;
    let pick = |src: &Matrix| {
        let mut out = Matrix::zeros(plan.count, src.cols());
        for l in 0..plan.count {
            out.row_mut(l).copy_from_slice(src.row(l * m));
        }
        out
    };
    Ok(DilationSequences {
        keys: pick(k),
        values: pick(v),
    })
}

/// Chunk means. With [`MeanPoolDivisor::Padded`] the final partial chunk is
/// divided by `M`, i.e. its zero pad rows dilute the mean.
pub fn dilate_mean_pool(k: &Matrix, v: &Matrix, m: usize, divisor: MeanPoolDivisor) -> Result<DilationSequences> {
    check_kv(k, v)?;
    let plan = ChunkingPlan::new(k.rows(), m)?;
    let pool = |src: &Matrix| {
        let mut out = Matrix::zeros(plan.count, src.cols());
        for l in 0..plan.count {
            let (s, e) = plan.frames(l);
            let denom = match divisor {
                MeanPoolDivisor::Padded => m,
                MeanPoolDivisor::FrameCount => e - s,
            } as f64;
            let row = out.row_mut(l);
            for f in s..e {
                for (o, x) in row.iter_mut().zip(src.row(f)) {
                    *o += x;
                }
            }
            row.iter_mut().for_each(|o| *o /= denom);
        }
        out
    };
    Ok(DilationSequences {
        keys: pool(k),
        values: pool(v),
    })
}

/// Attention pooling weights of query `query` over chunk `[s, e)` of `k`
/// padded to `m` slots. Only real frames are multiplied out.
fn pool_weights(
    query: &[f64],
    k: &Matrix,
    s: usize,
    e: usize,
    m: usize,
    scale: f64,
    weights: &mut Vec<f64>,
    ledger: Option<&MultiplyLedger>,
) {
    weights.clear();
    weights.extend((s..e).map(|f| dot(query, k.row(f)) * scale));
    weights.resize(m, 0.0);
    charge(ledger, (e - s) * query.len());
    softmax_in_place(weights);
}

/// Attention pooling with learned queries. Returns the averaged dilation
/// sequences together with the per-query outputs that post-processing
/// consumes.
pub fn dilate_attn_pool(
    k: &Matrix,
    v: &Matrix,
    m: usize,
    ap: &ApParams,
    ledger: Option<&MultiplyLedger>,
) -> Result<(DilationSequences, PooledHeads)> {
    check_kv(k, v)?;
    let b = ap.queries.rows();
    if b == 0 {
        return Err(Error::InvalidConfig(
            "attention pooling needs at least one pooling head".into(),
        ));
    }
    if ap.queries.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "pooling query width",
            left: ap.queries.shape(),
            right: k.shape(),
        });
    }
    let plan = ChunkingPlan::new(k.rows(), m)?;
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut heads_k = vec![Matrix::zeros(plan.count, k.cols()); b];
    let mut heads_v = vec![Matrix::zeros(plan.count, v.cols()); b];
    let mut weights = Vec::with_capacity(m);
    for l in 0..plan.count {
        let (s, e) = plan.frames(l);
        for h in 0..b {
            pool_weights(ap.queries.row(h), k, s, e, m, scale, &mut weights, ledger);
            // pad slots hold zero frames and add nothing to the weighted sums
            for (src, dst) in [(k, &mut heads_k[h]), (v, &mut heads_v[h])] {
                let row = dst.row_mut(l);
                for (w, f) in weights.iter().zip(s..e) {
                    for (o, x) in row.iter_mut().zip(src.row(f)) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    let average = |heads: &[Matrix]| {
        let mut g = Matrix::zeros(plan.count, heads[0].cols());
        for h in heads {
            for (o, x) in g.data_mut().iter_mut().zip(h.data()) {
                *o += x;
            }
        }
        g.scale(1.0 / b as f64)
    };
    let seqs = DilationSequences {
        keys: average(&heads_k),
        values: average(&heads_v),
    };
    Ok((
        seqs,
        PooledHeads {
            keys: heads_k,
            values: heads_v,
        },
    ))
}

/// Gradient of `⟨upstream.keys, Δᴷ⟩ + ⟨upstream.values, Δⱽ⟩` with respect to
/// the pooling queries, where `Δ` is the attention-pooled dilation sequence.
pub fn attn_pool_query_grad(
    k: &Matrix,
    v: &Matrix,
    m: usize,
    ap: &ApParams,
    upstream: &DilationSequences,
) -> Result<Matrix> {
    check_kv(k, v)?;
    let plan = ChunkingPlan::new(k.rows(), m)?;
    if upstream.keys.shape() != Shape(plan.count, k.cols()) || upstream.values.shape() != Shape(plan.count, v.cols()) {
        return Err(Error::DimensionMismatch {
            op: "pooling upstream gradient",
            left: Shape(plan.count, k.cols()),
            right: upstream.keys.shape(),
        });
    }
    let b = ap.queries.rows();
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let mut grad = Matrix::zeros(b, k.cols());
    let mut weights = Vec::with_capacity(m);
    let mut d_weights = vec![0.0; m];
    for l in 0..plan.count {
        let (s, e) = plan.frames(l);
        let (uk, uv) = (upstream.keys.row(l), upstream.values.row(l));
        for h in 0..b {
            pool_weights(ap.queries.row(h), k, s, e, m, scale, &mut weights, None);
            // dL/dw_j for the 1/B-averaged output; pad slots have zero frames
            for (j, dw) in d_weights.iter_mut().enumerate() {
                let f = s + j;
                *dw = if f < e {
                    (dot(uk, k.row(f)) + dot(uv, v.row(f))) / b as f64
                } else {
                    0.0
                };
            }
            let centre: f64 = weights.iter().zip(&d_weights).map(|(w, d)| w * d).sum();
            let g = grad.row_mut(h);
            for f in s..e {
                let j = f - s;
                let d_score = weights[j] * (d_weights[j] - centre) * scale;
                for (o, kc) in g.iter_mut().zip(k.row(f)) {
                    *o += d_score * kc;
                }
            }
        }
    }
    Ok(grad)
}

fn post_process_branch(
    heads: &[Matrix],
    g: &Matrix,
    branch: &PpBranch,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    let parts: Vec<&Matrix> = heads.iter().collect();
    let joined = concat_feature(&parts)?;
    let hidden = relu(&matmul_tracked(&joined, &branch.w1, ledger)?.add_row_vector(&branch.b1)?);
    let out = matmul_tracked(&hidden, &branch.w2, ledger)?.add_row_vector(&branch.b2)?;
    out.add(g)
}

/// Bottleneck feed-forward over the concatenated pooling outputs, added to
/// the pooled average `g`. All products here are counted.
pub fn post_process(
    pooled: &PooledHeads,
    g: &DilationSequences,
    pp: &PpParams,
    ledger: Option<&MultiplyLedger>,
) -> Result<DilationSequences> {
    if pooled.keys.is_empty() || pooled.keys.len() != pooled.values.len() {
        return Err(Error::InvalidConfig(
            "post-processing needs matching pooled key/value heads".into(),
        ));
    }
    Ok(DilationSequences {
        keys: post_process_branch(&pooled.keys, &g.keys, &pp.keys, ledger)?,
        values: post_process_branch(&pooled.values, &g.values, &pp.values, ledger)?,
    })
}

/// Builds the dilation sequences of one head from its projected keys and
/// values. Returns an empty sequence for [`Mechanism::None`].
pub fn dilate(
    k: &Matrix,
    v: &Matrix,
    cfg: &DilationConfig,
    params: &HeadDilationParams,
    ledger: Option<&MultiplyLedger>,
) -> Result<DilationSequences> {
    cfg.validate()?;
    let missing = |what: &str| Error::InvalidConfig(format!("{:?} dilation needs {what}", cfg.mechanism));
    match cfg.mechanism {
        Mechanism::None => Ok(DilationSequences::empty(k.cols(), v.cols())),
        Mechanism::Subsample => dilate_subsample(k, v, cfg.chunk),
        Mechanism::MeanPool => dilate_mean_pool(k, v, cfg.chunk, cfg.mean_divisor),
        Mechanism::AttnPool => {
            let ap = params.attn_pool.as_ref().ok_or_else(|| missing("pooling queries"))?;
            Ok(dilate_attn_pool(k, v, cfg.chunk, ap, ledger)?.0)
        }
        Mechanism::AttnPoolPp => {
            let ap = params.attn_pool.as_ref().ok_or_else(|| missing("pooling queries"))?;
            let pp = params.post.as_ref().ok_or_else(|| missing("post-processing weights"))?;
            let (g, pooled) = dilate_attn_pool(k, v, cfg.chunk, ap, ledger)?;
            post_process(&pooled, &g, pp, ledger)
        }
    }
}

/// Dilated self-attention over already projected queries, keys and values:
/// each query attends over its clipped window followed by the whole of `delta`.
pub fn attend_with_dilation(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    window: RestrictionWindow,
    delta: &DilationSequences,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    windowed_attention(q, k, v, window, Some((&delta.keys, &delta.values)), ledger)
}

/// One dilated self-attention head: `N x d_model` in, `N x d_v` out.
pub fn dilated_head_forward(
    x: &Matrix,
    head: &HeadParams,
    window: RestrictionWindow,
    cfg: &DilationConfig,
    params: &HeadDilationParams,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    head.validate()?;
    if x.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let (q, k, v) = head.project(x)?;
    let delta = dilate(&k, &v, cfg, params, ledger)?;
    attend_with_dilation(&q, &k, &v, window, &delta, ledger)
}

/// Multi-head dilated self-attention; `dilation[i]` belongs to head `i`.
pub fn dilated_mha_forward(
    x: &Matrix,
    params: &MhaParams,
    window: RestrictionWindow,
    cfg: &DilationConfig,
    dilation: &[HeadDilationParams],
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    params.validate()?;
    if dilation.len() != params.heads.len() {
        return Err(Error::InvalidConfig(format!(
            "{} heads but {} dilation parameter sets",
            params.heads.len(),
            dilation.len()
        )));
    }
    let heads = params
        .heads
        .iter()
        .zip(dilation)
        .map(|(h, d)| dilated_head_forward(x, h, window, cfg, d, ledger))
        .collect::<Result<Vec<_>>>()?;
    crate::attention::combine_heads(&heads, &params.w_out)
}

/// Incremental, causal dilated attention head.
///
/// Frames are pushed one at a time. A chunk is summarised as soon as its
/// `M`-th frame arrives, so the dilation sequence grows by one row every `M`
/// frames. The output for query frame `n` needs frames up to `n + look_ahead`
/// and attends over its window plus the chunks that end at or before `n`.
pub struct StreamingDilatedHead<'a> {
    head: &'a HeadParams,
    window: RestrictionWindow,
    cfg: DilationConfig,
    params: &'a HeadDilationParams,
    queries: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    delta_keys: Vec<f64>,
    delta_values: Vec<f64>,
    received: usize,
}

impl<'a> StreamingDilatedHead<'a> {
    pub fn new(
        head: &'a HeadParams,
        window: RestrictionWindow,
        cfg: DilationConfig,
        params: &'a HeadDilationParams,
    ) -> Result<Self> {
        head.validate()?;
        cfg.validate()?;
        Ok(Self {
            head,
            window,
            cfg,
            params,
            queries: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            delta_keys: Vec::new(),
            delta_values: Vec::new(),
            received: 0,
        })
    }

    pub fn received(&self) -> usize {
        self.received
    }

    /// Number of dilation rows summarised so far.
    pub fn completed_chunks(&self) -> usize {
        self.delta_keys.len() / self.head.d_k()
    }

    pub fn push_frame(&mut self, frame: &[f64]) -> Result<()> {
        let d_model = self.head.d_model();
        if frame.len() != d_model {
            return Err(Error::DimensionMismatch {
                op: "streaming frame",
                left: Shape(1, d_model),
                right: Shape(1, frame.len()),
            });
        }
        let (d_k, d_v) = (self.head.d_k(), self.head.d_v());
        for (w, buf, d) in [
            (&self.head.w_q, &mut self.queries, d_k),
            (&self.head.w_k, &mut self.keys, d_k),
            (&self.head.w_v, &mut self.values, d_v),
        ] {
            let start = buf.len();
            buf.resize(start + d, 0.0);
            vecmat(frame, w, &mut buf[start..]);
        }
        self.received += 1;

        let m = self.cfg.chunk;
        if self.cfg.mechanism != Mechanism::None && self.received.is_multiple_of(m) {
            let s = self.received - m;
            let k = Matrix::from_vec(m, d_k, self.keys[s * d_k..].to_vec())?;
            let v = Matrix::from_vec(m, d_v, self.values[s * d_v..].to_vec())?;
            let row = dilate(&k, &v, &self.cfg, self.params, None)?;
            self.delta_keys.extend_from_slice(row.keys.data());
            self.delta_values.extend_from_slice(row.values.data());
        }
        Ok(())
    }

    /// Output row for query frame `n`.
    pub fn output(&self, n: usize) -> Result<Vec<f64>> {
        let needed = n + self.window.look_ahead + 1;
        if needed > self.received {
            return Err(Error::FrameUnavailable {
                requested: needed - 1,
                received: self.received,
            });
        }
        let (d_k, d_v) = (self.head.d_k(), self.head.d_v());
        let (s, e) = self.window.span(n, self.received);
        let chunks = if self.cfg.mechanism == Mechanism::None {
            0
        } else {
            (n + 1) / self.cfg.chunk
        };
        let segments = [
            KvSegment {
                keys: &self.keys[s * d_k..e * d_k],
                values: &self.values[s * d_v..e * d_v],
            },
            KvSegment {
                keys: &self.delta_keys[..chunks * d_k],
                values: &self.delta_values[..chunks * d_v],
            },
        ];
        let mut out = vec![0.0; d_v];
        let mut scores = Vec::new();
        let scale = 1.0 / (d_k as f64).sqrt();
        attend_segments(
            &self.queries[n * d_k..(n + 1) * d_k],
            &segments,
            scale,
            &mut scores,
            &mut out,
            None,
        );
        Ok(out)
    }
}

/// Streaming output for frame `n` given the frames received so far.
pub fn streaming_dilate(
    prefix: &Matrix,
    head: &HeadParams,
    window: RestrictionWindow,
    cfg: &DilationConfig,
    params: &HeadDilationParams,
    n: usize,
) -> Result<Vec<f64>> {
    let mut stream = StreamingDilatedHead::new(head, window, *cfg, params)?;
    for f in 0..prefix.rows() {
        stream.push_frame(prefix.row(f))?;
    }
    stream.output(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{concat_time, seeded_gaussian};
    use proptest::prelude::*;

    fn frames(n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|c| (i * 10 + c + 1) as f64).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn random_head(d_model: usize, d_k: usize, seed: u64) -> HeadParams {
        HeadParams {
            w_q: seeded_gaussian(d_model, d_k, seed, 0.5),
            w_k: seeded_gaussian(d_model, d_k, seed + 1, 0.5),
            w_v: seeded_gaussian(d_model, d_k, seed + 2, 0.5),
        }
    }

    fn random_dilation(d_k: usize, cfg: &DilationConfig, seed: u64) -> HeadDilationParams {
        let b = cfg.pool_heads;
        let branch = |s: u64| PpBranch {
            w1: seeded_gaussian(d_k * b, cfg.d_in, s, 0.3),
            b1: seeded_gaussian(1, cfg.d_in, s + 1, 0.3).into_data(),
            w2: seeded_gaussian(cfg.d_in, d_k, s + 2, 0.3),
            b2: seeded_gaussian(1, d_k, s + 3, 0.3).into_data(),
        };
        HeadDilationParams {
            attn_pool: Some(ApParams {
                queries: seeded_gaussian(b, d_k, seed, 1.0),
            }),
            post: Some(PpParams {
                keys: branch(seed + 10),
                values: branch(seed + 20),
            }),
        }
    }

    #[test]
    fn split_chunks_pads_last_chunk() {
        let seq = frames(7, 2);
        let chunks = split_chunks(&seq, 3).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0], seq.slice_rows(0, 3));
        assert_eq!(chunks[1], seq.slice_rows(3, 6));
        assert_eq!(chunks[2].row(0), seq.row(6));
        assert_eq!(chunks[2].row(1), &[0.0, 0.0]);
        assert_eq!(chunks[2].row(2), &[0.0, 0.0]);

        let whole = split_chunks(&seq, 7).unwrap();
        assert_eq!(whole, vec![seq.clone()]);

        let refs: Vec<&Matrix> = chunks.iter().collect();
        assert_eq!(concat_time(&refs).unwrap().slice_rows(0, 7), seq);

        let plan = ChunkingPlan::new(7, 3).unwrap();
        assert_eq!((plan.count, plan.pad), (3, 2));
    }

    #[test]
    fn subsample_picks_first_frame_of_each_chunk() {
        let seq = frames(7, 2);
        let d = dilate_subsample(&seq, &seq, 3).unwrap();
        assert_eq!(d.keys.row(0), seq.row(0));
        assert_eq!(d.keys.row(1), seq.row(3));
        assert_eq!(d.keys.row(2), seq.row(6));
        assert_eq!(dilate_subsample(&seq, &seq, 1).unwrap().values, seq);
        assert_eq!(dilate_subsample(&seq, &seq, 9).unwrap().keys, seq.slice_rows(0, 1));
    }

    #[test]
    fn mean_pool_cases() {
        let c = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let d = dilate_mean_pool(&c, &c, 3, MeanPoolDivisor::Padded).unwrap();
        assert_eq!(d.keys.data(), &[3.0, 4.0]);

        let constant = Matrix::from_rows(&[[2.5, -1.0]; 6]).unwrap();
        let d = dilate_mean_pool(&constant, &constant, 3, MeanPoolDivisor::Padded).unwrap();
        assert!(d.values.data().chunks(2).all(|r| r == [2.5, -1.0]));

        let seq = frames(4, 2);
        let d = dilate_mean_pool(&seq, &seq, 3, MeanPoolDivisor::Padded).unwrap();
        assert_eq!(d.keys.row(1), &[seq.get(3, 0) / 3.0, seq.get(3, 1) / 3.0]);
        let d = dilate_mean_pool(&seq, &seq, 3, MeanPoolDivisor::FrameCount).unwrap();
        assert_eq!(d.keys.row(1), seq.row(3));
    }

    #[test]
    fn zero_pooling_queries_reduce_to_mean_pool() {
        let k = seeded_gaussian(10, 4, 1, 1.0);
        let v = seeded_gaussian(10, 3, 2, 1.0);
        let ap = ApParams {
            queries: Matrix::zeros(2, 4),
        };
        let (ap_seq, _) = dilate_attn_pool(&k, &v, 4, &ap, None).unwrap();
        let mp = dilate_mean_pool(&k, &v, 4, MeanPoolDivisor::Padded).unwrap();
        assert!(ap_seq.keys.max_abs_diff(&mp.keys) < 1e-15);
        assert!(ap_seq.values.max_abs_diff(&mp.values) < 1e-15);
    }

    #[test]
    fn single_frame_chunks_pool_to_the_frame() {
        let k = seeded_gaussian(5, 3, 1, 1.0);
        let v = seeded_gaussian(5, 2, 2, 1.0);
        let ap = ApParams {
            queries: seeded_gaussian(3, 3, 3, 1.0),
        };
        let (g, heads) = dilate_attn_pool(&k, &v, 1, &ap, None).unwrap();
        for h in &heads.values {
            assert_eq!(h, &v);
        }
        assert!(g.keys.max_abs_diff(&k) < 1e-15);
    }

    #[test]
    fn attn_pool_matches_per_chunk_attention() {
        let k = seeded_gaussian(7, 4, 5, 1.0);
        let v = seeded_gaussian(7, 3, 6, 1.0);
        let ap = ApParams {
            queries: seeded_gaussian(2, 4, 7, 1.0),
        };
        let (g, _) = dilate_attn_pool(&k, &v, 3, &ap, None).unwrap();
        let kc = split_chunks(&k, 3).unwrap();
        let vc = split_chunks(&v, 3).unwrap();
        for l in 0..3 {
            let mut expect = [0.0; 3];
            for b in 0..2 {
                let q = ap.queries.slice_rows(b, b + 1);
                let a = crate::attention::scaled_dot_attention(&q, &kc[l], &vc[l], None).unwrap();
                for (e, x) in expect.iter_mut().zip(a.row(0)) {
                    *e += x / 2.0;
                }
            }
            for c in 0..3 {
                assert!((g.values.get(l, c) - expect[c]).abs() < 1e-10);
                let col: Vec<f64> = (0..3).map(|r| vc[l].get(r, c)).collect();
                let lo = col.iter().copied().fold(0.0, f64::min);
                let hi = col.iter().copied().fold(0.0, f64::max);
                assert!(g.values.get(l, c) >= lo - 1e-12 && g.values.get(l, c) <= hi + 1e-12);
            }
        }
        assert!(dilate_attn_pool(
            &k,
            &v,
            3,
            &ApParams {
                queries: Matrix::zeros(0, 4)
            },
            None
        )
        .is_err());
    }

    #[test]
    fn post_process_reductions() {
        let k = seeded_gaussian(9, 4, 1, 1.0);
        let v = seeded_gaussian(9, 4, 2, 1.0);
        let ap = ApParams {
            queries: seeded_gaussian(2, 4, 3, 1.0),
        };
        let (g, pooled) = dilate_attn_pool(&k, &v, 4, &ap, None).unwrap();
        let zero = PpParams {
            keys: PpBranch::zeros(4, 2, 5),
            values: PpBranch::zeros(4, 2, 5),
        };
        assert_eq!(post_process(&pooled, &g, &zero, None).unwrap(), g);

        let ap1 = ApParams {
            queries: seeded_gaussian(1, 4, 4, 1.0),
        };
        let (g1, pooled1) = dilate_attn_pool(&k, &v, 4, &ap1, None).unwrap();
        let mut pp = PpParams {
            keys: PpBranch::zeros(4, 1, 3),
            values: PpBranch::zeros(4, 1, 3),
        };
        pp.keys.w1 = seeded_gaussian(4, 3, 5, 1.0);
        pp.keys.b2 = vec![1.0, 2.0, 3.0, 4.0];
        let out = post_process(&pooled1, &g1, &pp, None).unwrap();
        let expect = g1.keys.add_row_vector(&pp.keys.b2).unwrap();
        assert!(out.keys.max_abs_diff(&expect) < 1e-15);
        assert_eq!(out.values, g1.values);
    }

    #[test]
    fn post_process_matches_direct_formula() {
        let cfg = DilationConfig::new(Mechanism::AttnPoolPp, 3)
            .with_pool_heads(2)
            .with_d_in(5);
        let params = random_dilation(3, &cfg, 40);
        let k = seeded_gaussian(8, 3, 1, 1.0);
        let v = seeded_gaussian(8, 3, 2, 1.0);
        let (g, pooled) = dilate_attn_pool(&k, &v, 3, params.attn_pool.as_ref().unwrap(), None).unwrap();
        let pp = params.post.as_ref().unwrap();
        let out = post_process(&pooled, &g, pp, None).unwrap();
        for l in 0..3 {
            let cat: Vec<f64> = pooled.values.iter().flat_map(|h| h.row(l).to_vec()).collect();
            let hidden: Vec<f64> = (0..5)
                .map(|j| {
                    let s: f64 = (0..6).map(|i| cat[i] * pp.values.w1.get(i, j)).sum();
                    (s + pp.values.b1[j]).max(0.0)
                })
                .collect();
            for c in 0..3 {
                let f: f64 = (0..5).map(|j| hidden[j] * pp.values.w2.get(j, c)).sum::<f64>() + pp.values.b2[c];
                assert!((out.values.get(l, c) - (f + g.values.get(l, c))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn post_process_counts_all_products() {
        let cfg = DilationConfig::new(Mechanism::AttnPoolPp, 4)
            .with_pool_heads(2)
            .with_d_in(3);
        let params = random_dilation(4, &cfg, 1);
        let k = seeded_gaussian(10, 4, 1, 1.0);
        let ledger = MultiplyLedger::new();
        dilate(&k, &k, &cfg, &params, Some(&ledger)).unwrap();
        let l = 3;
        // pooling scores over real frames plus two branches of (B+1) d d_in per chunk
        let expect = 10 * 2 * 4 + 2 * (2 + 1) * 4 * 3 * l;
        assert_eq!(ledger.count(), expect as u64);
    }

    #[test]
    fn disabled_dilation_equals_restricted_head() {
        let x = seeded_gaussian(9, 4, 3, 1.0);
        let head = random_head(4, 4, 4);
        let w = RestrictionWindow::new(2, 1);
        let out = dilated_head_forward(
            &x,
            &head,
            w,
            &DilationConfig::none(),
            &HeadDilationParams::default(),
            None,
        )
        .unwrap();
        let (q, k, v) = head.project(&x).unwrap();
        let restricted = windowed_attention(&q, &k, &v, w, None, None).unwrap();
        assert_eq!(out, restricted);
    }

    #[test]
    fn dilated_head_matches_explicit_assembly() {
        let x = seeded_gaussian(12, 4, 8, 1.0);
        let head = random_head(4, 4, 9);
        let w = RestrictionWindow::new(2, 1);
        for mech in Mechanism::ALL {
            let cfg = DilationConfig::new(mech, 4).with_pool_heads(2).with_d_in(3);
            let params = random_dilation(4, &cfg, 50);
            let out = dilated_head_forward(&x, &head, w, &cfg, &params, None).unwrap();
            let (q, k, v) = head.project(&x).unwrap();
            let delta = dilate(&k, &v, &cfg, &params, None).unwrap();
            for n in 0..12 {
                let (s, e) = w.span(n, 12);
                let kk = concat_time(&[&k.slice_rows(s, e), &delta.keys]).unwrap();
                let vv = concat_time(&[&v.slice_rows(s, e), &delta.values]).unwrap();
                let row = crate::attention::scaled_dot_attention(&q.slice_rows(n, n + 1), &kk, &vv, None).unwrap();
                let diff = row
                    .row(0)
                    .iter()
                    .zip(out.row(n))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-10, "{mech:?} query {n}: {diff}");
            }
        }
    }

    #[test]
    fn streaming_rejects_future_queries() {
        let head = random_head(4, 4, 1);
        let cfg = DilationConfig::new(Mechanism::MeanPool, 3);
        let params = HeadDilationParams::default();
        let mut s = StreamingDilatedHead::new(&head, RestrictionWindow::new(2, 1), cfg, &params).unwrap();
        for f in 0..4 {
            s.push_frame(seeded_gaussian(1, 4, f, 1.0).row(0)).unwrap();
        }
        assert!(s.output(2).is_ok());
        assert!(matches!(s.output(3), Err(Error::FrameUnavailable { .. })));
        assert_eq!(s.completed_chunks(), 1);
    }

    #[test]
    fn streaming_before_first_chunk_is_restricted_attention() {
        let head = random_head(4, 4, 2);
        let cfg = DilationConfig::new(Mechanism::AttnPoolPp, 5)
            .with_pool_heads(2)
            .with_d_in(3);
        let params = random_dilation(4, &cfg, 3);
        let w = RestrictionWindow::new(3, 1);
        let x = seeded_gaussian(4, 4, 4, 1.0);
        let out = streaming_dilate(&x, &head, w, &cfg, &params, 2).unwrap();
        let (q, k, v) = head.project(&x).unwrap();
        let restricted = windowed_attention(&q, &k, &v, w, None, None).unwrap();
        assert!(out.iter().zip(restricted.row(2)).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn streaming_two_chunks_match_offline_prefix() {
        let m = 4;
        let n = 2 * m + 1;
        let head = random_head(4, 4, 5);
        let cfg = DilationConfig::new(Mechanism::AttnPool, m).with_pool_heads(2);
        let params = random_dilation(4, &cfg, 6);
        let w = RestrictionWindow::new(2, 1);
        let x = seeded_gaussian(n + 2, 4, 7, 1.0);
        let mut stream = StreamingDilatedHead::new(&head, w, cfg, &params).unwrap();
        for f in 0..n + 2 {
            stream.push_frame(x.row(f)).unwrap();
        }
        assert_eq!((n + 1) / m, 2);
        let out = stream.output(n).unwrap();
        let prefix = x.slice_rows(0, n + 2);
        let (q, k, v) = head.project(&prefix).unwrap();
        let delta = dilate(&k.slice_rows(0, 2 * m), &v.slice_rows(0, 2 * m), &cfg, &params, None).unwrap();
        assert_eq!(delta.len(), 2);
        let offline = attend_with_dilation(&q, &k, &v, w, &delta, None).unwrap();
        let diff = out
            .iter()
            .zip(offline.row(n))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    proptest! {
        #[test]
        fn dilation_length_is_chunk_count(seed in 0u64..1000, n in 1usize..30, m in 1usize..12, mech_idx in 1usize..5) {
            let mech = Mechanism::ALL[mech_idx];
            let cfg = DilationConfig::new(mech, m).with_pool_heads(2).with_d_in(3);
            let params = random_dilation(3, &cfg, seed);
            let k = seeded_gaussian(n, 3, seed, 1.0);
            let v = seeded_gaussian(n, 3, seed + 1, 1.0);
            let d = dilate(&k, &v, &cfg, &params, None).unwrap();
            prop_assert_eq!(d.keys.rows(), n.div_ceil(m));
            prop_assert_eq!(d.values.rows(), n.div_ceil(m));
        }

        #[test]
        fn streaming_is_causal(seed in 0u64..1000, extra in 1usize..6, frame_offset in 0usize..6) {
            let head = random_head(4, 4, seed);
            let cfg = DilationConfig::new(Mechanism::AttnPoolPp, 3).with_pool_heads(2).with_d_in(3);
            let params = random_dilation(4, &cfg, seed + 3);
            let w = RestrictionWindow::new(2, 1);
            let n = 7;
            let total = n + w.look_ahead + 1 + extra;
            let x = seeded_gaussian(total, 4, seed + 9, 1.0);
            let base = streaming_dilate(&x, &head, w, &cfg, &params, n).unwrap();
            let mut y = x.clone();
            let f = n + w.look_ahead + 1 + frame_offset % extra;
            for c in 0..4 {
                y.set(f, c, y.get(f, c) * -7.0 + 1.0);
            }
            prop_assert_eq!(base, streaming_dilate(&y, &head, w, &cfg, &params, n).unwrap());
        }
    }
}
