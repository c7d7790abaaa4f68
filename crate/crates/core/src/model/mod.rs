//! GPT-style decoder-only transformer: Pre/Post-RMSNorm, RoPE with QK-norm,
//! squared-ReLU FFN, no biases, untied LM head.
//!
//! Gradients are computed by hand-written reverse-mode passes over a cached
//! forward graph (see `forward.rs`). The model is generic over [`Real`] so
//! that training runs in `f32` while gradient checks run in `f64`.

mod forward;
mod probe;

pub use forward::{squared_relu, ForwardOutput};
pub use probe::{CovAccumulator, PositionAccumulator, ProbeCapture, ProbePoint};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Real, Rng};

pub const RMS_EPS: f64 = 1e-6;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SPSCALE\0";
const CHECKPOINT_VERSION: u64 = 1;
const INIT_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch of {len} tokens cannot be split into {batch} sequences")]
    BadBatch { len: usize, batch: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// FFN width multiplier: `D = ffn_mult · d_model`.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub use_rope: bool,
    /// Fraction of leading layers that use Post-RMSNorm.
    pub postln_frac: f64,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            ffn_mult: 4,
            vocab_size: 256,
            seq_len: 128,
            use_rope: true,
            postln_frac: 0.0,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.use_rope && self.head_dim() % 2 != 0 {
            return bad(format!("RoPE needs an even head dimension, got {}", self.head_dim()));
        }
        if !(0.0..=1.0).contains(&self.postln_frac) {
            return bad(format!("postln_frac {} outside [0, 1]", self.postln_frac));
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of leading Post-RMSNorm layers, `⌊k·L⌋`.
    pub fn postln_layers(&self) -> usize {
        (self.postln_frac * self.n_layers as f64 + 1e-12).floor() as usize
    }

    pub fn is_postln(&self, layer: usize) -> bool {
        layer < self.postln_layers()
    }
}

/// Spectral-condition init scale `σ = (1/√d_in)·min(1, √(d_out/d_in))`.
pub fn init_std(d_in: usize, d_out: usize) -> f64 {
    let (din, dout) = (d_in as f64, d_out as f64);
    (1.0 / din.sqrt()) * (dout / din).sqrt().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Embedding,
    AttnNorm,
    Query,
    Key,
    Value,
    AttnOut,
    FfnNorm,
    FfnIn,
    FfnOut,
    FinalNorm,
    LmHead,
}

impl ParamRole {
    /// Hidden weight matrices (attention and FFN projections).
    pub fn is_hidden_matrix(self) -> bool {
        matches!(self, Self::Query | Self::Key | Self::Value | Self::AttnOut | Self::FfnIn | Self::FfnOut)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::AttnNorm => "attn_norm",
            Self::Query => "wq",
            Self::Key => "wk",
            Self::Value => "wv",
            Self::AttnOut => "wo",
            Self::FfnNorm => "ffn_norm",
            Self::FfnIn => "w_in",
            Self::FfnOut => "w_out",
            Self::FinalNorm => "final_norm",
            Self::LmHead => "lm_head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub role: ParamRole,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

const PER_LAYER: usize = 8;

/// Parameter layout in declaration order: embedding, then per layer
/// `attn_norm, wq, wk, wv, wo, ffn_norm, w_in, w_out`, then `final_norm`
/// and `lm_head`. Weight matrices are stored `d_out×d_in`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, ffn, v) = (cfg.d_model, cfg.ffn_dim(), cfg.vocab_size);
    let spec = |role: ParamRole, layer: Option<usize>, rows, cols| ParamSpec {
        name: match layer {
            Some(l) => format!("layers.{l}.{}", role.name()),
            None => role.name().to_string(),
        },
        role,
        layer,
        rows,
        cols,
    };
    let mut out = vec![spec(ParamRole::Embedding, None, v, d)];
    for l in 0..cfg.n_layers {
        let l = Some(l);
        out.push(spec(ParamRole::AttnNorm, l, 1, d));
        out.push(spec(ParamRole::Query, l, d, d));
        out.push(spec(ParamRole::Key, l, d, d));
        out.push(spec(ParamRole::Value, l, d, d));
        out.push(spec(ParamRole::AttnOut, l, d, d));
        out.push(spec(ParamRole::FfnNorm, l, 1, d));
        out.push(spec(ParamRole::FfnIn, l, ffn, d));
        out.push(spec(ParamRole::FfnOut, l, d, ffn));
    }
    out.push(spec(ParamRole::FinalNorm, None, 1, d));
    out.push(spec(ParamRole::LmHead, None, v, d));
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIdx {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

pub(crate) fn layer_idx(layer: usize) -> LayerIdx {
    let b = 1 + layer * PER_LAYER;
    LayerIdx {
        attn_norm: b,
        wq: b + 1,
        wk: b + 2,
        wv: b + 3,
        wo: b + 4,
        ffn_norm: b + 5,
        w_in: b + 6,
        w_out: b + 7,
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Matrix<T>>,
}

impl<T: Real> Model<T> {
    /// Spectral-condition initialization; deterministic given `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut rng = Rng::with_stream(cfg.seed, INIT_STREAM);
        let params = specs
            .iter()
            .map(|s| match s.role {
                ParamRole::AttnNorm | ParamRole::FfnNorm | ParamRole::FinalNorm => {
                    Matrix::from_fn(s.rows, s.cols, |_, _| T::one())
                }
                role => {
                    // The embedding maps one-hot vocab vectors to d_model.
                    let (d_in, d_out) = if role == ParamRole::Embedding { (s.rows, s.cols) } else { (s.cols, s.rows) };
                    let std = init_std(d_in, d_out);
                    Matrix::from_fn(s.rows, s.cols, |_, _| T::lit(std * rng.normal()))
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), specs, params })
    }

    pub fn from_params(cfg: &ModelConfig, params: Vec<Matrix<T>>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != params.len() || specs.iter().zip(&params).any(|(s, p)| p.shape() != (s.rows, s.cols)) {
            return Err(ModelError::InvalidConfig("parameter shapes do not match config".into()));
        }
        Ok(Self { cfg: cfg.clone(), specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Per-layer norm placement: `true` where the layer is Post-RMSNorm.
    pub fn norm_placement(&self) -> Vec<bool> {
        (0..self.cfg.n_layers).map(|l| self.cfg.is_postln(l)).collect()
    }

    pub fn ffn_in(&self, layer: usize) -> &Matrix<T> {
        &self.params[layer_idx(layer).w_in]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), specs: self.specs.clone(), params: self.params.iter().map(|p| p.cast()).collect() }
    }

    /// Writes the binary checkpoint: magic, version, config as fixed-order
    /// 64-bit fields, then row-major `f32` payloads in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let c = &self.cfg;
        for v in [c.n_layers, c.n_heads, c.d_model, c.ffn_mult, c.vocab_size, c.seq_len, c.use_rope as usize] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.postln_frac.to_bits().to_le_bytes())?;
        w.write_all(&c.rope_base.to_bits().to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for p in &self.params {
            for &x in p.data() {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("bad magic".into()));
        }
        let mut word = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let version = word()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let cfg = ModelConfig {
            n_layers: word()? as usize,
            n_heads: word()? as usize,
            d_model: word()? as usize,
            ffn_mult: word()? as usize,
            vocab_size: word()? as usize,
            seq_len: word()? as usize,
            use_rope: word()? != 0,
            postln_frac: f64::from_bits(word()?),
            rope_base: f64::from_bits(word()?),
            seed: word()?,
        };
        cfg.validate()?;
        let mut params = Vec::new();
        for s in param_specs(&cfg) {
            let mut buf = vec![0u8; s.rows * s.cols * 4];
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::BadCheckpoint(format!("truncated payload for {}", s.name)))?;
            let data = buf.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            params.push(Matrix::new(s.rows, s.cols, data).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ModelError::BadCheckpoint("trailing bytes".into()));
        }
        Self::from_params(&cfg, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_std_formula() {
        assert!((init_std(4, 16) - 0.5).abs() < 1e-15);
        assert!((init_std(16, 4) - 0.125).abs() < 1e-15);
        assert!((init_std(9, 9) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_gains_are_one() {
        let cfg = ModelConfig { d_model: 16, seq_len: 8, ..Default::default() };
        let a = Model::<f32>::init(&cfg).unwrap();
        let b = Model::<f32>::init(&cfg).unwrap();
        assert_eq!(a.params(), b.params());
        for (s, p) in a.specs().iter().zip(a.params()) {
            if matches!(s.role, ParamRole::AttnNorm | ParamRole::FfnNorm | ParamRole::FinalNorm) {
                assert!(p.data().iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn init_matches_requested_scale() {
        let cfg = ModelConfig { d_model: 64, ffn_mult: 8, ..Default::default() };
        let m = Model::<f64>::init(&cfg).unwrap();
        let w_in = m.ffn_in(0);
        let n = w_in.data().len() as f64;
        let var = w_in.data().iter().map(|x| x * x).sum::<f64>() / n;
        let want = init_std(64, 512);
        assert!((var.sqrt() - want).abs() < 0.02 * want, "{} vs {want}", var.sqrt());
    }

    #[test]
    fn postln_placement_boundaries() {
        let mut cfg = ModelConfig { n_layers: 4, d_model: 16, ..Default::default() };
        let m = Model::<f32>::init(&cfg).unwrap();
        assert_eq!(m.norm_placement(), vec![false; 4]);
        cfg.postln_frac = 1.0;
        assert_eq!(Model::<f32>::init(&cfg).unwrap().norm_placement(), vec![true; 4]);
        cfg.postln_frac = 0.5;
        assert_eq!(Model::<f32>::init(&cfg).unwrap().norm_placement(), vec![true, true, false, false]);
        cfg.postln_frac = 0.3;
        assert_eq!(cfg.postln_layers(), 1);
    }

    #[test]
    fn invalid_configs() {
        let cfg = ModelConfig { d_model: 10, n_heads: 3, ..Default::default() };
        assert!(matches!(Model::<f32>::init(&cfg), Err(ModelError::InvalidConfig(_))));
        let cfg = ModelConfig { postln_frac: 1.5, ..Default::default() };
        assert!(Model::<f32>::init(&cfg).is_err());
    }

    #[test]
    fn zero_layer_model_has_only_embedding_head_and_gain() {
        let cfg = ModelConfig { n_layers: 0, d_model: 8, ..Default::default() };
        let roles: Vec<_> = param_specs(&cfg).iter().map(|s| s.role).collect();
        assert_eq!(roles, vec![ParamRole::Embedding, ParamRole::FinalNorm, ParamRole::LmHead]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let cfg = ModelConfig { d_model: 16, ffn_mult: 2, seq_len: 8, postln_frac: 0.5, seed: 9, ..Default::default() };
        let m = Model::<f32>::init(&cfg).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.params(), m.params());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes.len(), 8 + 8 + 10 * 8 + 4 * m.num_parameters());
    }
}
