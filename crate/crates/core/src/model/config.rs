use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::value_err;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    /// Desk-scale teacher: small enough for minutes-long CPU runs while
    /// still exercising grouped-query sharing.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 64,
            max_seq_len: 256,
        }
    }

    /// Six-layer student geometry of the 0.13B family, used for accounting
    /// only (no weights are allocated for it).
    pub fn reference_student() -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            d_ff: 3072,
            n_heads: 12,
            n_kv_heads: 3,
            head_dim: 64,
            vocab_size: 32_000,
            max_seq_len: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(value_err!("{name} must be at least 1"));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(value_err!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads,
                self.n_kv_heads
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(value_err!(
                "n_heads * head_dim ({}) must equal d_model ({})",
                self.n_heads * self.head_dim,
                self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(value_err!("head_dim must be even for rotary embeddings"));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// `(d_out, d_in)` of a projection.
    pub fn projection_shape(&self, p: Projection) -> (usize, usize) {
        let q = self.n_heads * self.head_dim;
        match p {
            Projection::Q => (q, self.d_model),
            Projection::K | Projection::V => (self.kv_dim(), self.d_model),
            Projection::O => (self.d_model, q),
            Projection::Gate | Projection::Up => (self.d_ff, self.d_model),
            Projection::Down => (self.d_model, self.d_ff),
        }
    }

    /// Every adapted projection in registration order (layer-major, then
    /// q, k, v, o, gate, up, down).
    pub fn adapted_modules(&self) -> Vec<ModuleShape> {
        let mut out = Vec::with_capacity(self.n_layers * 7);
        for layer in 0..self.n_layers {
            for p in Projection::ALL {
                let (d_out, d_in) = self.projection_shape(p);
                out.push(ModuleShape {
                    name: p.module_name(layer),
                    layer,
                    projection: p,
                    d_in,
                    d_out,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
            Projection::O => "o_proj",
            Projection::Gate => "gate_proj",
            Projection::Up => "up_proj",
            Projection::Down => "down_proj",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Projection::Q | Projection::K | Projection::V | Projection::O)
    }

    pub fn module_name(self, layer: usize) -> String {
        let block = if self.is_attention() { "self_attn" } else { "mlp" };
        format!("layers.{layer}.{block}.{}", self.as_str())
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape of one adapted linear module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleShape {
    pub name: String,
    pub layer: usize,
    pub projection: Projection,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModuleShape {
    pub fn dense_cost(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}
