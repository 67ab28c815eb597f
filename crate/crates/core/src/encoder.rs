//! Forward-only transformer encoder with selectable self-attention.
//!
//! `X_0 = x P + PE`, followed by `layers` pre-norm blocks
//! `x + MHA(LN(x))` and `x + FF(LN(x))`. The input projection `P` stands in
//! for a convolutional front-end; inputs are expected at the encoder frame
//! rate already.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ff_forward, mha_forward, restricted_mha_forward, FeedForwardParams, HeadParams, MhaParams};
use crate::dilation::{
    dilated_mha_forward, ApParams, DilationConfig, HeadDilationParams, MeanPoolDivisor, Mechanism, PpBranch, PpParams,
};
use crate::error::{Error, Result, Shape};
use crate::numerics::{
    layer_norm, matmul, seeded_gaussian_stream, sinusoidal_pe, Matrix, MultiplyLedger, LAYER_NORM_EPS_F32,
    LAYER_NORM_EPS_F64,
};
use crate::RestrictionWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionType {
    Full,
    Restricted,
    Dilated,
}

impl AttentionType {
    pub fn code(self) -> u32 {
        match self {
            AttentionType::Full => 0,
            AttentionType::Restricted => 1,
            AttentionType::Dilated => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(AttentionType::Full),
            1 => Some(AttentionType::Restricted),
            2 => Some(AttentionType::Dilated),
            _ => None,
        }
    }
}

impl std::str::FromStr for AttentionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionType::Full),
            "restricted" => Ok(AttentionType::Restricted),
            "dilated" => Ok(AttentionType::Dilated),
            other => Err(Error::InvalidConfig(format!("unknown attention type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn layer_norm_eps(self) -> f64 {
        match self {
            Precision::F64 => LAYER_NORM_EPS_F64,
            Precision::F32 => LAYER_NORM_EPS_F32,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Precision::F64),
            1 => Some(Precision::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Attention heads per layer.
    pub heads: usize,
    pub attention: AttentionType,
    pub window: RestrictionWindow,
    pub dilation: DilationConfig,
    pub input_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.input_dim == 0 {
            return bad("d_ff and input_dim must be positive".into());
        }
        if self.attention == AttentionType::Dilated {
            self.dilation.validate()?;
        }
        Ok(())
    }

    /// Mechanism actually in effect (none unless the attention type is dilated).
    pub fn effective_mechanism(&self) -> Mechanism {
        match self.attention {
            AttentionType::Dilated => self.dilation.mechanism,
            _ => Mechanism::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNormParams,
    pub attn: MhaParams,
    /// One entry per attention head; empty parameter sets unless dilated.
    pub dilation: Vec<HeadDilationParams>,
    pub ff_norm: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub input_proj: Matrix,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Projection,
    Bias,
    Gain,
}

/// Name, shape and role of one serialised tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds weights in declaration order, asking `fill` for each tensor's data.
struct Builder<F> {
    fill: F,
}

impl<F: FnMut(&TensorSpec) -> Result<Vec<f64>>> Builder<F> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<Matrix> {
        let spec = TensorSpec {
            name,
            shape: Shape(rows, cols),
            kind: TensorKind::Projection,
        };
        Matrix::from_vec(rows, cols, (self.fill)(&spec)?)
    }

    fn vector(&mut self, name: String, len: usize, kind: TensorKind) -> Result<Vec<f64>> {
        let spec = TensorSpec {
            name,
            shape: Shape(1, len),
            kind,
        };
        let v = (self.fill)(&spec)?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "tensor `{}` has {} values, expected {len}",
                spec.name,
                v.len()
            )));
        }
        Ok(v)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.vector(format!("{prefix}.gain"), d, TensorKind::Gain)?,
            bias: self.vector(format!("{prefix}.bias"), d, TensorKind::Bias)?,
        })
    }

    fn pp_branch(&mut self, prefix: &str, d: usize, b: usize, d_in: usize) -> Result<PpBranch> {
        Ok(PpBranch {
            w1: self.matrix(format!("{prefix}.w1"), d * b, d_in)?,
            b1: self.vector(format!("{prefix}.b1"), d_in, TensorKind::Bias)?,
            w2: self.matrix(format!("{prefix}.w2"), d_in, d)?,
            b2: self.vector(format!("{prefix}.b2"), d, TensorKind::Bias)?,
        })
    }

    fn build(&mut self, cfg: &EncoderConfig) -> Result<EncoderWeights> {
        cfg.validate()?;
        let (d, d_k) = (cfg.d_model, cfg.d_k());
        let mech = cfg.effective_mechanism();
        let dil = cfg.dilation;
        let input_proj = self.matrix("input_proj".into(), cfg.input_dim, d)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for e in 0..cfg.layers {
            let p = format!("layers.{e}");
            let attn_norm = self.norm(&format!("{p}.attn_norm"), d)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                heads.push(HeadParams {
                    w_q: self.matrix(format!("{p}.attn.heads.{i}.w_q"), d, d_k)?,
                    w_k: self.matrix(format!("{p}.attn.heads.{i}.w_k"), d, d_k)?,
                    w_v: self.matrix(format!("{p}.attn.heads.{i}.w_v"), d, d_k)?,
                });
            }
            let w_out = self.matrix(format!("{p}.attn.w_out"), cfg.heads * d_k, d)?;
            let mut dilation = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                let hp = format!("{p}.dilation.heads.{i}");
                let attn_pool = if mech.uses_attn_pool() {
                    Some(ApParams {
                        queries: self.matrix(format!("{hp}.ap.queries"), dil.pool_heads, d_k)?,
                    })
                } else {
                    None
                };
                let post = if mech.uses_post_process() {
                    Some(PpParams {
                        keys: self.pp_branch(&format!("{hp}.pp.keys"), d_k, dil.pool_heads, dil.d_in)?,
                        values: self.pp_branch(&format!("{hp}.pp.values"), d_k, dil.pool_heads, dil.d_in)?,
                    })
                } else {
                    None
                };
                dilation.push(HeadDilationParams { attn_pool, post });
            }
            let ff_norm = self.norm(&format!("{p}.ff_norm"), d)?;
            let ff = FeedForwardParams {
                w1: self.matrix(format!("{p}.ff.w1"), d, cfg.d_ff)?,
                b1: self.vector(format!("{p}.ff.b1"), cfg.d_ff, TensorKind::Bias)?,
                w2: self.matrix(format!("{p}.ff.w2"), cfg.d_ff, d)?,
                b2: self.vector(format!("{p}.ff.b2"), d, TensorKind::Bias)?,
            };
            layers.push(EncoderLayer {
                attn_norm,
                attn: MhaParams { heads, w_out },
                dilation,
                ff_norm,
                ff,
            });
        }
        Ok(EncoderWeights { input_proj, layers })
    }
}

impl EncoderWeights {
    /// Builds weights tensor by tensor in declaration order.
    pub fn build(cfg: &EncoderConfig, fill: impl FnMut(&TensorSpec) -> Result<Vec<f64>>) -> Result<Self> {
        Builder { fill }.build(cfg)
    }

    /// Declaration-order list of every tensor `cfg` implies.
    pub fn layout(cfg: &EncoderConfig) -> Result<Vec<TensorSpec>> {
        let mut specs = Vec::new();
        Self::build(cfg, |s| {
            specs.push(s.clone());
            Ok(vec![0.0; s.len()])
        })?;
        Ok(specs)
    }

    /// Tensor data in declaration order (same order as [`Self::layout`]).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.input_proj.data()];
        for layer in &self.layers {
            out.push(&layer.attn_norm.gain);
            out.push(&layer.attn_norm.bias);
            for h in &layer.attn.heads {
                out.extend([h.w_q.data(), h.w_k.data(), h.w_v.data()]);
            }
            out.push(layer.attn.w_out.data());
            for d in &layer.dilation {
                if let Some(ap) = &d.attn_pool {
                    out.push(ap.queries.data());
                }
                if let Some(pp) = &d.post {
                    for b in [&pp.keys, &pp.values] {
                        out.extend([b.w1.data(), &b.b1[..], b.w2.data(), &b.b2[..]]);
                    }
                }
            }
            out.push(&layer.ff_norm.gain);
            out.push(&layer.ff_norm.bias);
            out.extend([
                layer.ff.w1.data(),
                &layer.ff.b1[..],
                layer.ff.w2.data(),
                &layer.ff.b2[..],
            ]);
        }
        out
    }
}

/// Seeded Gaussian projections with standard deviation `1/√d_model`, zero
/// biases, unit layer-norm gains. Tensor `i` of the layout draws from ChaCha
/// stream `i`, so every tensor is independent of the others' sizes.
pub fn init_weights(cfg: &EncoderConfig) -> Result<EncoderWeights> {
    let std = 1.0 / (cfg.d_model as f64).sqrt();
    let mut stream = 0u64;
    EncoderWeights::build(cfg, |spec| {
        stream += 1;
        Ok(match spec.kind {
            TensorKind::Projection => {
                seeded_gaussian_stream(spec.shape.0, spec.shape.1, cfg.seed, stream, std).into_data()
            }
            TensorKind::Bias => vec![0.0; spec.len()],
            TensorKind::Gain => vec![1.0; spec.len()],
        })
    })
}

/// Input projection plus sinusoidal positions.
pub fn embed_input(x: &Matrix, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<Matrix> {
    if x.cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            op: "encoder input",
            left: Shape(x.rows(), cfg.input_dim),
            right: x.shape(),
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidConfig("encoder input has no frames".into()));
    }
    matmul(x, &w.input_proj)?.add(&sinusoidal_pe(x.rows(), cfg.d_model)?)
}

/// Self-attention sub-block of one layer, selected by the attention type.
pub fn layer_attention(
    h: &Matrix,
    layer: &EncoderLayer,
    cfg: &EncoderConfig,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    match cfg.attention {
        AttentionType::Full => mha_forward(h, h, &layer.attn, ledger),
        AttentionType::Restricted => restricted_mha_forward(h, &layer.attn, cfg.window, ledger),
        AttentionType::Dilated => {
            dilated_mha_forward(h, &layer.attn, cfg.window, &cfg.dilation, &layer.dilation, ledger)
        }
    }
}

/// Runs the encoder on `x` (`N x input_dim`) and returns `N x d_model`.
pub fn encoder_forward(
    x: &Matrix,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    ledger: Option<&MultiplyLedger>,
) -> Result<Matrix> {
    cfg.validate()?;
    if w.layers.len() != cfg.layers {
        return Err(Error::ConfigMismatch {
            field: "layers",
            expected: cfg.layers as u64,
            found: w.layers.len() as u64,
        });
    }
    let eps = cfg.precision.layer_norm_eps();
    let mut state = embed_input(x, w, cfg)?;
    for layer in &w.layers {
        let h = layer_norm(&state, &layer.attn_norm.gain, &layer.attn_norm.bias, eps)?;
        state = state.add(&layer_attention(&h, layer, cfg, ledger)?)?;
        let h = layer_norm(&state, &layer.ff_norm.gain, &layer.ff_norm.bias, eps)?;
        state = state.add(&ff_forward(&h, &layer.ff)?)?;
    }
    Ok(state)
}

pub const WEIGHT_MAGIC: [u8; 4] = *b"DSAW";
pub const WEIGHT_VERSION: u16 = 1;
const CONFIG_FIELDS: usize = 16;
const HEADER_LEN: usize = 4 + 2;

/// The integers of the config block, in file order.
fn config_fields(cfg: &EncoderConfig) -> [(&'static str, u64); CONFIG_FIELDS] {
    [
        ("layers", cfg.layers as u64),
        ("d_model", cfg.d_model as u64),
        ("d_ff", cfg.d_ff as u64),
        ("heads", cfg.heads as u64),
        ("attention", cfg.attention.code() as u64),
        ("window.look_back", cfg.window.look_back as u64),
        ("window.look_ahead", cfg.window.look_ahead as u64),
        ("dilation.mechanism", cfg.dilation.mechanism.code() as u64),
        ("dilation.chunk", cfg.dilation.chunk as u64),
        ("dilation.pool_heads", cfg.dilation.pool_heads as u64),
        ("dilation.d_in", cfg.dilation.d_in as u64),
        ("dilation.mean_divisor", cfg.dilation.mean_divisor.code() as u64),
        ("input_dim", cfg.input_dim as u64),
        ("precision", cfg.precision.code() as u64),
        ("seed.lo", cfg.seed & 0xffff_ffff),
        ("seed.hi", cfg.seed >> 32),
    ]
}

fn config_from_fields(f: &[u32; CONFIG_FIELDS]) -> Result<EncoderConfig> {
    let bad = |what: &str, v: u32| Error::Format(format!("invalid {what} code {v} in config block"));
    Ok(EncoderConfig {
        layers: f[0] as usize,
        d_model: f[1] as usize,
        d_ff: f[2] as usize,
        heads: f[3] as usize,
        attention: AttentionType::from_code(f[4]).ok_or_else(|| bad("attention", f[4]))?,
        window: RestrictionWindow::new(f[5] as usize, f[6] as usize),
        dilation: DilationConfig {
            mechanism: Mechanism::from_code(f[7]).ok_or_else(|| bad("mechanism", f[7]))?,
            chunk: f[8] as usize,
            pool_heads: f[9] as usize,
            d_in: f[10] as usize,
            mean_divisor: MeanPoolDivisor::from_code(f[11]).ok_or_else(|| bad("mean divisor", f[11]))?,
        },
        input_dim: f[12] as usize,
        precision: Precision::from_code(f[13]).ok_or_else(|| bad("precision", f[13]))?,
        seed: f[14] as u64 | ((f[15] as u64) << 32),
    })
}

/// Serialises weights: magic, version, config block, little-endian `f64`
/// tensors in declaration order, CRC-32 of everything after the version.
pub fn encode_weights(w: &EncoderWeights, cfg: &EncoderConfig) -> Result<Vec<u8>> {
    let layout = EncoderWeights::layout(cfg)?;
    let tensors = w.tensors();
    if layout.len() != tensors.len() {
        return Err(Error::InvalidConfig("weights do not match the configuration".into()));
    }
    let mut out =
        Vec::with_capacity(HEADER_LEN + CONFIG_FIELDS * 4 + layout.iter().map(|s| s.len() * 8).sum::<usize>() + 4);
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for (name, v) in config_fields(cfg) {
        let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("`{name}` does not fit in 32 bits")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (spec, data) in layout.iter().zip(&tensors) {
        if spec.len() != data.len() {
            return Err(Error::ShapeMismatch {
                tensor: spec.name.clone(),
                expected: spec.shape,
                found: Shape(1, data.len()),
            });
        }
        for x in *data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a weight file image, trusting its own config block.
pub fn decode_weights(bytes: &[u8]) -> Result<(EncoderConfig, EncoderWeights)> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHT_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (payload, tail) = bytes[HEADER_LEN..].split_at(bytes.len() - HEADER_LEN - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if payload.len() < CONFIG_FIELDS * 4 {
        return Err(Error::Format("config block is incomplete".into()));
    }
    let mut fields = [0u32; CONFIG_FIELDS];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
    }
    let cfg = config_from_fields(&fields)?;
    let mut data = payload[CONFIG_FIELDS * 4..].chunks_exact(8);
    let expected: usize = EncoderWeights::layout(&cfg)?.iter().map(TensorSpec::len).sum();
    if data.len() != expected || !data.remainder().is_empty() {
        return Err(Error::Format(format!(
            "tensor payload holds {} bytes, configuration implies {}",
            payload.len() - CONFIG_FIELDS * 4,
            expected * 8
        )));
    }
    let weights = EncoderWeights::build(&cfg, |spec| {
        Ok((&mut data)
            .take(spec.len())
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    })?;
    Ok((cfg, weights))
}

pub fn save_weights(w: &EncoderWeights, cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(w, cfg)?)?;
    Ok(())
}

/// Loads a weight file together with the configuration stored in it.
pub fn load_weights(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderWeights)> {
    decode_weights(&fs::read(path)?)
}

/// Loads a weight file and checks it against `expected`. Tensor shape
/// differences are reported first, naming the tensor; remaining config
/// differences are reported by field.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<EncoderWeights> {
    let (found, weights) = load_weights(path)?;
    check_compatible(expected, &found)?;
    Ok(weights)
}

pub fn check_compatible(expected: &EncoderConfig, found: &EncoderConfig) -> Result<()> {
    let want = EncoderWeights::layout(expected)?;
    let have = EncoderWeights::layout(found)?;
    for (w, h) in want.iter().zip(&have) {
        if w.name != h.name || w.shape != h.shape {
            return Err(Error::ShapeMismatch {
                tensor: w.name.clone(),
                expected: w.shape,
                found: if w.name == h.name { h.shape } else { Shape(0, 0) },
            });
        }
    }
    for ((field, e), (_, f)) in config_fields(expected).into_iter().zip(config_fields(found)) {
        if e != f {
            return Err(Error::ConfigMismatch {
                field,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}
