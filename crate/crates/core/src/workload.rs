//! Per-layer operation lists for LLaMA-style decoder prefill and decode.
//!
//! Attention heads are folded into aggregate `(1 x H) x (H x L)` shapes, and
//! softmax, residual adds and normalisation are lumped into one host-side op
//! per layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Flow;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid model {name}: {reason}")]
    InvalidModel { name: String, reason: String },
    #[error("model {name}: declared param_count {declared} differs from {derived} derived from dims by more than 5%")]
    ParamMismatch {
        name: String,
        declared: u64,
        derived: u64,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("sequence length must be at least 1")]
    ZeroLength,
    #[error("model config: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: u64,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub heads: u64,
    pub vocab_size: u64,
    /// Parameters touched by one decode step: every layer plus the LM head.
    /// The embedding table is a lookup and is not counted.
    pub param_count: u64,
    #[serde(default = "default_precision")]
    pub weight_precision: u64,
}

fn default_precision() -> u64 {
    1
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 3] = ["llama-1b", "llama-7b", "llama-13b"];

    fn build(name: &str, layers: u64, hidden: u64, ffn: u64, heads: u64, vocab: u64) -> Self {
        let mut m = ModelConfig {
            name: name.to_string(),
            layers,
            hidden_dim: hidden,
            ffn_dim: ffn,
            heads,
            vocab_size: vocab,
            param_count: 0,
            weight_precision: 1,
        };
        m.param_count = m.derived_params();
        m
    }

    pub fn llama_1b() -> Self {
        Self::build("llama-1b", 16, 2048, 8192, 32, 128_256)
    }

    pub fn llama_7b() -> Self {
        Self::build("llama-7b", 32, 4096, 11008, 32, 32_000)
    }

    pub fn llama_13b() -> Self {
        Self::build("llama-13b", 40, 5120, 13824, 40, 32_000)
    }

    pub fn preset(name: &str) -> Result<Self, WorkloadError> {
        match name.to_ascii_lowercase().as_str() {
            "llama-1b" | "1b" => Ok(Self::llama_1b()),
            "llama-7b" | "7b" => Ok(Self::llama_7b()),
            "llama-13b" | "13b" => Ok(Self::llama_13b()),
            _ => Err(WorkloadError::UnknownPreset(name.to_string())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let m: ModelConfig = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Parameters per layer (attention projections and gated FFN) plus the LM head.
    pub fn derived_params(&self) -> u64 {
        let (h, f) = (self.hidden_dim, self.ffn_dim);
        self.layers * (4 * h * h + 3 * h * f) + h * self.vocab_size
    }

    pub fn weight_bytes(&self) -> u64 {
        self.param_count * self.weight_precision
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let invalid = |reason: &str| WorkloadError::InvalidModel {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(invalid("layers, hidden_dim and ffn_dim must be positive"));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(invalid("heads must divide hidden_dim"));
        }
        if self.weight_precision == 0 {
            return Err(invalid("weight_precision must be positive"));
        }
        let derived = self.derived_params();
        let diff = self.param_count.abs_diff(derived) as f64;
        if diff > 0.05 * derived as f64 {
            return Err(WorkloadError::ParamMismatch {
                name: self.name.clone(),
                declared: self.param_count,
                derived,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub lin: u64,
    pub lout: u64,
    pub batch: u64,
}

impl InferenceRequest {
    pub fn new(lin: u64, lout: u64, batch: u64) -> Result<Self, WorkloadError> {
        let r = InferenceRequest { lin, lout, batch };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.lin == 0 {
            return Err(WorkloadError::InvalidRequest("Lin must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(WorkloadError::InvalidRequest("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gemm,
    Gemv,
    Softmax,
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    HostOnly,
    PimEligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpRole {
    Qkv,
    AttnScore,
    /// Softmax plus the layer's norms and residual adds.
    HostNonlinear,
    AttnContext,
    OutProj,
    FfnUpGate,
    FfnDown,
    LmHead,
}

impl OpRole {
    /// True when the operand is model weights shared by every request in a batch.
    pub fn shares_weights(self) -> bool {
        !matches!(self, OpRole::AttnScore | OpRole::AttnContext | OpRole::HostNonlinear)
    }

    /// Which CU dataflow a PIM GEMV of this role uses.
    pub fn flow(self) -> Option<Flow> {
        match self {
            OpRole::AttnContext => Some(Flow::VFlow),
            OpRole::HostNonlinear => None,
            _ => Some(Flow::KFlow),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpDescriptor {
    pub role: OpRole,
    pub kind: OpKind,
    /// `None` for the LM head.
    pub layer: Option<u64>,
    /// `(m, k, n)`: an `(m x k) * (k x n)` product, or `(1, 1, elements)` for host ops.
    pub shape: (u64, u64, u64),
    pub flops: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub placement: Placement,
}

impl OpDescriptor {
    fn matmul(role: OpRole, layer: Option<u64>, m: u64, k: u64, n: u64, precision: u64) -> Self {
        let decode = m == 1;
        // attention operands are computed activations during prefill
        let cached = matches!(role, OpRole::AttnScore | OpRole::AttnContext);
        let (weight_bytes, extra_act) = if decode || !cached {
            (k * n * precision, 0)
        } else {
            (0, k * n * precision)
        };
        OpDescriptor {
            role,
            kind: if decode { OpKind::Gemv } else { OpKind::Gemm },
            layer,
            shape: (m, k, n),
            flops: 2 * m * k * n,
            weight_bytes,
            activation_bytes: m * (k + n) * precision + extra_act,
            placement: if decode {
                Placement::PimEligible
            } else {
                Placement::HostOnly
            },
        }
    }

    fn host(layer: u64, elements: u64, precision: u64) -> Self {
        OpDescriptor {
            role: OpRole::HostNonlinear,
            kind: OpKind::Softmax,
            layer: Some(layer),
            shape: (1, 1, elements),
            flops: elements,
            weight_bytes: 0,
            activation_bytes: elements * precision,
            placement: Placement::HostOnly,
        }
    }

    /// Input-vector bytes a PIM GEMV must receive from the host.
    pub fn input_bytes(&self, precision: u64) -> u64 {
        self.shape.0 * self.shape.1 * precision
    }
}

fn layer_ops(model: &ModelConfig, m: u64, l: u64) -> Vec<OpDescriptor> {
    let (h, f, p) = (model.hidden_dim, model.ffn_dim, model.weight_precision);
    let mut ops = Vec::with_capacity(model.layers as usize * 7 + 1);
    for layer in 0..model.layers {
        let at = Some(layer);
        ops.push(OpDescriptor::matmul(OpRole::Qkv, at, m, h, 3 * h, p));
        ops.push(OpDescriptor::matmul(OpRole::AttnScore, at, m, h, l, p));
        ops.push(OpDescriptor::host(layer, m * (l + 4 * h), p));
        ops.push(OpDescriptor::matmul(OpRole::AttnContext, at, m, l, h, p));
        ops.push(OpDescriptor::matmul(OpRole::OutProj, at, m, h, h, p));
        ops.push(OpDescriptor::matmul(OpRole::FfnUpGate, at, m, h, 2 * f, p));
        ops.push(OpDescriptor::matmul(OpRole::FfnDown, at, m, f, h, p));
    }
    ops.push(OpDescriptor::matmul(OpRole::LmHead, None, m, h, model.vocab_size, p));
    ops
}

/// Operations of one decode step attending over `l_current` cached tokens.
pub fn decode_step_ops(model: &ModelConfig, l_current: u64) -> Result<Vec<OpDescriptor>, WorkloadError> {
    if l_current == 0 {
        return Err(WorkloadError::ZeroLength);
    }
    Ok(layer_ops(model, 1, l_current))
}

/// Operations of the prefill over `lin` prompt tokens. Attention is quadratic in `lin`.
pub fn prefill_ops(model: &ModelConfig, lin: u64) -> Result<Vec<OpDescriptor>, WorkloadError> {
    if lin == 0 {
        return Err(WorkloadError::ZeroLength);
    }
    Ok(layer_ops(model, lin, lin))
}

pub fn kv_cache_bytes(model: &ModelConfig, l: u64, batch: u64) -> u64 {
    2 * model.layers * model.hidden_dim * l * batch * model.weight_precision
}

pub fn total_flops(ops: &[OpDescriptor]) -> u64 {
    ops.iter().map(|o| o.flops).sum()
}

pub fn total_weight_bytes(ops: &[OpDescriptor]) -> u64 {
    ops.iter().map(|o| o.weight_bytes).sum()
}
