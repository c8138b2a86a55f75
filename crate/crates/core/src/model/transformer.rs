use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::{LayerSelection, Projection, TransformerConfig};
use crate::compress::{CompressedModule, Deployed};
use crate::error::{shape_err, value_err};
use crate::gatedlora::{GatedLinear, GatedVars, LoraConfig};
use crate::numerics::{Matrix, Real, Rng, Tape, Var};
use crate::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-5;

/// One bias-free projection in whichever form the pipeline has left it.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear<T> {
    Dense(Matrix<T>),
    Gated(GatedLinear<T>),
    Compressed(CompressedModule<T>),
}

impl<T: Real> Linear<T> {
    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Gated(g) => g.d_in(),
            Linear::Compressed(c) => c.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Gated(g) => g.d_out(),
            Linear::Compressed(c) => c.d_out(),
        }
    }

    /// Checkpoint variant tag.
    pub fn variant_tag(&self) -> &'static str {
        match self {
            Linear::Dense(_) => "dense",
            Linear::Gated(_) => "gated",
            Linear::Compressed(c) => match c.deployed {
                Deployed::LowRank { .. } => "low_rank",
                Deployed::DenseMerged { .. } => "dense_merged",
            },
        }
    }

    fn walk<'a>(&'a self, path: ParamPath, f: &mut dyn FnMut(ParamPath, &'a Matrix<T>, ParamKind)) {
        match self {
            Linear::Dense(w) => f(path.tensor("weight"), w, ParamKind::Base),
            Linear::Gated(g) => {
                f(path.tensor("weight"), g.weight(), ParamKind::FrozenBase);
                f(path.tensor("lora_a"), g.lora_a(), ParamKind::Adapter);
                f(path.tensor("lora_b"), g.lora_b(), ParamKind::Adapter);
                f(path.tensor("gate_logits"), g.gate_logits(), ParamKind::Adapter);
            }
            Linear::Compressed(c) => match &c.deployed {
                Deployed::LowRank { u, v } => {
                    f(path.tensor("u"), u, ParamKind::Deployed);
                    f(path.tensor("v"), v, ParamKind::Deployed);
                }
                Deployed::DenseMerged { weight } => f(path.tensor("weight"), weight, ParamKind::Deployed),
            },
        }
    }

    fn walk_mut<'a>(&'a mut self, path: ParamPath, f: &mut dyn FnMut(ParamPath, &'a mut Matrix<T>, ParamKind)) {
        match self {
            Linear::Dense(w) => f(path.tensor("weight"), w, ParamKind::Base),
            Linear::Gated(g) => {
                let [w, a, b, t] = g.tensors_mut();
                f(path.tensor("weight"), w, ParamKind::FrozenBase);
                f(path.tensor("lora_a"), a, ParamKind::Adapter);
                f(path.tensor("lora_b"), b, ParamKind::Adapter);
                f(path.tensor("gate_logits"), t, ParamKind::Adapter);
            }
            Linear::Compressed(c) => match &mut c.deployed {
                Deployed::LowRank { u, v } => {
                    f(path.tensor("u"), u, ParamKind::Deployed);
                    f(path.tensor("v"), v, ParamKind::Deployed);
                }
                Deployed::DenseMerged { weight } => f(path.tensor("weight"), weight, ParamKind::Deployed),
            },
        }
    }

    fn forward_on(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Linear::Dense(w) => {
                let w = ctx.bind(w, ParamKind::Base);
                ctx.tape.matmul_bt(x, w)
            }
            Linear::Gated(g) => {
                let vars = GatedVars {
                    weight: ctx.bind(g.weight(), ParamKind::FrozenBase),
                    lora_a: ctx.bind(g.lora_a(), ParamKind::Adapter),
                    lora_b: ctx.bind(g.lora_b(), ParamKind::Adapter),
                    gate_logits: ctx.bind(g.gate_logits(), ParamKind::Adapter),
                };
                g.forward_on(ctx.tape, x, vars)
            }
            Linear::Compressed(c) => match &c.deployed {
                Deployed::LowRank { u, v } => {
                    let u = ctx.bind(u, ParamKind::Deployed);
                    let v = ctx.bind(v, ParamKind::Deployed);
                    let h = ctx.tape.matmul_bt(x, v)?;
                    ctx.tape.matmul_bt(h, u)
                }
                Deployed::DenseMerged { weight } => {
                    let w = ctx.bind(weight, ParamKind::Deployed);
                    ctx.tape.matmul_bt(x, w)
                }
            },
        }
    }
}

/// Role of a tensor, deciding whether a training mode updates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Embeddings, norms, output head and unwrapped projections.
    Base,
    /// Dense weight inside a gated module; never trained.
    FrozenBase,
    /// LoRA factors and gate logits.
    Adapter,
    /// Compressed deployment tensors.
    Deployed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Every base and adapter tensor is trained.
    Full,
    /// Only LoRA factors and gate logits are trained.
    Lora,
    /// Nothing is trained (teacher / evaluation).
    Frozen,
}

impl ParamKind {
    pub fn trainable(self, mode: TrainMode) -> bool {
        match (mode, self) {
            (TrainMode::Frozen, _) | (_, ParamKind::FrozenBase) | (_, ParamKind::Deployed) => false,
            (TrainMode::Full, _) => true,
            (TrainMode::Lora, kind) => kind == ParamKind::Adapter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Embed,
    Layer(usize),
    FinalNorm,
    Head,
}

/// Structured tensor name; formats as e.g. `layers.1.self_attn.q_proj.lora_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamPath {
    pub scope: ParamScope,
    pub projection: Option<Projection>,
    pub tensor: &'static str,
}

impl ParamPath {
    fn new(scope: ParamScope, projection: Option<Projection>, tensor: &'static str) -> Self {
        Self { scope, projection, tensor }
    }

    fn tensor(mut self, tensor: &'static str) -> Self {
        self.tensor = tensor;
        self
    }
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.scope, self.projection) {
            (ParamScope::Embed, _) => f.write_str("embed_tokens"),
            (ParamScope::FinalNorm, _) => f.write_str("norm"),
            (ParamScope::Head, _) => f.write_str("lm_head"),
            (ParamScope::Layer(i), Some(p)) => write!(f, "{}.{}", p.module_name(i), self.tensor),
            (ParamScope::Layer(i), None) => write!(f, "layers.{i}.{}", self.tensor),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Matrix<T>,
    pub mlp_norm: Matrix<T>,
    /// Indexed in [`Projection::ALL`] order.
    pub proj: [Linear<T>; 7],
}

impl<T: Real> Block<T> {
    fn random(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        let out_scale = 1.0 / libm::sqrt(2.0 * cfg.n_layers as f64);
        let proj = Projection::ALL.map(|p| {
            let (d_out, d_in) = cfg.projection_shape(p);
            let mut std = 1.0 / libm::sqrt(d_in as f64);
            if matches!(p, Projection::O | Projection::Down) {
                std *= out_scale;
            }
            Linear::Dense(rng.normal_matrix(d_out, d_in, std))
        });
        Self {
            attn_norm: Matrix::filled(1, cfg.d_model, T::one()),
            mlp_norm: Matrix::filled(1, cfg.d_model, T::one()),
            proj,
        }
    }

    pub fn linear(&self, p: Projection) -> &Linear<T> {
        &self.proj[p.index()]
    }

    pub fn linear_mut(&mut self, p: Projection) -> &mut Linear<T> {
        &mut self.proj[p.index()]
    }
}

/// Per-forward binding state: every tensor becomes a tape leaf in walk
/// order.
struct Ctx<'t, T: Real> {
    tape: &'t mut Tape<T>,
    mode: TrainMode,
    params: Vec<Var>,
    addrs: Vec<usize>,
}

impl<T: Real> Ctx<'_, T> {
    fn bind(&mut self, m: &Matrix<T>, kind: ParamKind) -> Var {
        let v = self.tape.leaf(m.clone(), kind.trainable(self.mode));
        self.params.push(v);
        self.addrs.push(m as *const Matrix<T> as usize);
        v
    }
}

/// Result of recording a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// One leaf per model tensor, in [`TransformerModel::walk`] order.
    pub params: Vec<Var>,
    #[cfg_attr(not(test), allow(dead_code))]
    addrs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    config: TransformerConfig,
    embed: Matrix<T>,
    layers: Vec<Block<T>>,
    final_norm: Matrix<T>,
    head: Matrix<T>,
}

impl<T: Real> TransformerModel<T> {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = rng.normal_matrix(config.vocab_size, config.d_model, 1.0);
        let layers = (0..config.n_layers).map(|_| Block::random(&config, rng)).collect();
        let head = rng.normal_matrix(config.vocab_size, config.d_model, 1.0 / libm::sqrt(config.d_model as f64));
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: Matrix::filled(1, config.d_model, T::one()),
            head,
        })
    }

    /// Assembles a model from explicit parts, checking every shape.
    pub fn from_parts(
        config: TransformerConfig,
        embed: Matrix<T>,
        layers: Vec<Block<T>>,
        final_norm: Matrix<T>,
        head: Matrix<T>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(shape_err!("{name} has shape {:?}, expected {shape:?}", m.shape()))
            }
        };
        expect("embed_tokens", &embed, (config.vocab_size, d))?;
        expect("norm", &final_norm, (1, d))?;
        expect("lm_head", &head, (config.vocab_size, d))?;
        if layers.len() != config.n_layers {
            return Err(shape_err!("{} blocks for {} layers", layers.len(), config.n_layers));
        }
        for (i, b) in layers.iter().enumerate() {
            expect(&format!("layers.{i}.input_layernorm"), &b.attn_norm, (1, d))?;
            expect(&format!("layers.{i}.post_attention_layernorm"), &b.mlp_norm, (1, d))?;
            for p in Projection::ALL {
                let (d_out, d_in) = config.projection_shape(p);
                let l = b.linear(p);
                if (l.d_out(), l.d_in()) != (d_out, d_in) {
                    return Err(shape_err!(
                        "{} is {}x{}, expected {d_out}x{d_in}",
                        p.module_name(i),
                        l.d_out(),
                        l.d_in()
                    ));
                }
            }
        }
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Block<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Block<T>] {
        &mut self.layers
    }

    pub fn embed(&self) -> &Matrix<T> {
        &self.embed
    }

    pub fn final_norm(&self) -> &Matrix<T> {
        &self.final_norm
    }

    pub fn head(&self) -> &Matrix<T> {
        &self.head
    }

    /// Every tensor in a fixed order: embeddings, then per layer the
    /// attention norm, q, k, v, o, the MLP norm, gate, up, down, then the
    /// final norm and the output head.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(ParamPath, &'a Matrix<T>, ParamKind)) {
        f(ParamPath::new(ParamScope::Embed, None, "weight"), &self.embed, ParamKind::Base);
        for (i, b) in self.layers.iter().enumerate() {
            let scope = ParamScope::Layer(i);
            f(ParamPath::new(scope, None, "input_layernorm"), &b.attn_norm, ParamKind::Base);
            for p in &Projection::ALL[..4] {
                b.linear(*p).walk(ParamPath::new(scope, Some(*p), ""), f);
            }
            f(ParamPath::new(scope, None, "post_attention_layernorm"), &b.mlp_norm, ParamKind::Base);
            for p in &Projection::ALL[4..] {
                b.linear(*p).walk(ParamPath::new(scope, Some(*p), ""), f);
            }
        }
        f(ParamPath::new(ParamScope::FinalNorm, None, "weight"), &self.final_norm, ParamKind::Base);
        f(ParamPath::new(ParamScope::Head, None, "weight"), &self.head, ParamKind::Base);
    }

    /// Mutable counterpart of [`TransformerModel::walk`], same order.
    pub fn walk_mut<'a>(&'a mut self, f: &mut dyn FnMut(ParamPath, &'a mut Matrix<T>, ParamKind)) {
        f(ParamPath::new(ParamScope::Embed, None, "weight"), &mut self.embed, ParamKind::Base);
        for (i, b) in self.layers.iter_mut().enumerate() {
            let scope = ParamScope::Layer(i);
            let (attn, mlp) = b.proj.split_at_mut(4);
            f(ParamPath::new(scope, None, "input_layernorm"), &mut b.attn_norm, ParamKind::Base);
            for (p, l) in Projection::ALL[..4].iter().zip(attn) {
                l.walk_mut(ParamPath::new(scope, Some(*p), ""), f);
            }
            f(ParamPath::new(scope, None, "post_attention_layernorm"), &mut b.mlp_norm, ParamKind::Base);
            for (p, l) in Projection::ALL[4..].iter().zip(mlp) {
                l.walk_mut(ParamPath::new(scope, Some(*p), ""), f);
            }
        }
        f(ParamPath::new(ParamScope::FinalNorm, None, "weight"), &mut self.final_norm, ParamKind::Base);
        f(ParamPath::new(ParamScope::Head, None, "weight"), &mut self.head, ParamKind::Base);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.walk(&mut |path, m, _| out.push((format!("{path}"), m)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_, m, _| n += m.len());
        n
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(shape_err!("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(shape_err!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            ));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(value_err!("token {t} outside vocabulary of {}", self.config.vocab_size));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Tensors become leaves that
    /// require gradients according to `mode`.
    pub fn forward_on(&self, tape: &mut Tape<T>, tokens: &[u32], mode: TrainMode) -> Result<ForwardPass> {
        self.check_tokens(tokens)?;
        let cfg = self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let eps = T::cast(NORM_EPS);
        let mut ctx = Ctx {
            tape,
            mode,
            params: Vec::new(),
            addrs: Vec::new(),
        };
        let table = ctx.bind(&self.embed, ParamKind::Base);
        let mut x = ctx.tape.embedding(table, &ids)?;
        for b in &self.layers {
            let w = ctx.bind(&b.attn_norm, ParamKind::Base);
            let h = ctx.tape.rms_norm(x, w, eps)?;
            let q = b.linear(Projection::Q).forward_on(&mut ctx, h)?;
            let k = b.linear(Projection::K).forward_on(&mut ctx, h)?;
            let v = b.linear(Projection::V).forward_on(&mut ctx, h)?;
            let q = ctx.tape.rope(q, cfg.head_dim, ROPE_BASE)?;
            let k = ctx.tape.rope(k, cfg.head_dim, ROPE_BASE)?;
            let a = ctx.tape.attention(q, k, v, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim)?;
            let o = b.linear(Projection::O).forward_on(&mut ctx, a)?;
            x = ctx.tape.add(x, o)?;

            let w = ctx.bind(&b.mlp_norm, ParamKind::Base);
            let h = ctx.tape.rms_norm(x, w, eps)?;
            let g = b.linear(Projection::Gate).forward_on(&mut ctx, h)?;
            let u = b.linear(Projection::Up).forward_on(&mut ctx, h)?;
            let g = ctx.tape.silu(g)?;
            let m = ctx.tape.mul(g, u)?;
            let d = b.linear(Projection::Down).forward_on(&mut ctx, m)?;
            x = ctx.tape.add(x, d)?;
        }
        let w = ctx.bind(&self.final_norm, ParamKind::Base);
        let x = ctx.tape.rms_norm(x, w, eps)?;
        let head = ctx.bind(&self.head, ParamKind::Base);
        let logits = ctx.tape.matmul_bt(x, head)?;
        Ok(ForwardPass {
            logits,
            params: ctx.params,
            addrs: ctx.addrs,
        })
    }

    /// `T×vocab` logits for a token sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, tokens, TrainMode::Frozen)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Every projection with its layer, in registration order.
    pub fn linears(&self) -> impl Iterator<Item = (usize, Projection, &Linear<T>)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, b)| Projection::ALL.iter().map(move |&p| (i, p, b.linear(p))))
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> + '_ {
        self.layers.iter_mut().flat_map(|b| b.proj.iter_mut())
    }

    pub fn gated_modules(&self) -> Vec<&GatedLinear<T>> {
        self.linears()
            .filter_map(|(_, _, l)| match l {
                Linear::Gated(g) => Some(g),
                _ => None,
            })
            .collect()
    }

    pub fn gated_modules_mut(&mut self) -> Vec<&mut GatedLinear<T>> {
        self.linears_mut()
            .filter_map(|l| match l {
                Linear::Gated(g) => Some(g),
                _ => None,
            })
            .collect()
    }

    pub fn is_wrapped(&self) -> bool {
        self.linears().any(|(_, _, l)| matches!(l, Linear::Gated(_)))
    }

    pub fn is_compressed(&self) -> bool {
        self.linears().any(|(_, _, l)| matches!(l, Linear::Compressed(_)))
    }

    /// Replaces all seven projections of every layer with gated LoRA
    /// modules, registered layer-major in q, k, v, o, gate, up, down order.
    pub fn wrap_with_gated_lora(&mut self, cfg: &LoraConfig, rng: &mut Rng) -> Result<()> {
        cfg.validate()?;
        if self.linears().any(|(_, _, l)| !matches!(l, Linear::Dense(_))) {
            return Err(Error::State(String::from("model is already wrapped or compressed")));
        }
        for (i, b) in self.layers.iter_mut().enumerate() {
            for p in Projection::ALL {
                let slot = &mut b.proj[p.index()];
                let Linear::Dense(w) = core::mem::replace(slot, Linear::Dense(Matrix::zeros(0, 0))) else {
                    unreachable!()
                };
                *slot = Linear::Gated(GatedLinear::new(p.module_name(i), w, cfg, rng)?);
            }
        }
        Ok(())
    }

    /// Copies embeddings, the selected blocks, the final norm and the head.
    pub fn build_student(&self, selection: &LayerSelection) -> Result<Self> {
        selection.validate(self.config.n_layers)?;
        let mut config = self.config;
        config.n_layers = selection.indices.len();
        Ok(Self {
            config,
            embed: self.embed.clone(),
            layers: selection.indices.iter().map(|&i| self.layers[i].clone()).collect(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        })
    }

    pub fn set_all_retentions(&mut self, d: f64) -> Result<()> {
        for g in self.gated_modules_mut() {
            g.set_retention(d)?;
        }
        Ok(())
    }

    /// Converts the element type (e.g. an `f32` checkpoint to `f64`).
    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        let lin = |l: &Linear<T>| -> Linear<U> {
            match l {
                Linear::Dense(w) => Linear::Dense(w.cast()),
                Linear::Gated(g) => Linear::Gated(
                    GatedLinear::from_parts(
                        g.name(),
                        g.weight().cast(),
                        g.lora_a().cast(),
                        g.lora_b().cast(),
                        g.gate_logits().cast(),
                        g.retention(),
                        g.alpha(),
                        g.dense_skip_threshold(),
                    )
                    .expect("shapes already validated"),
                ),
                Linear::Compressed(c) => Linear::Compressed(CompressedModule {
                    name: c.name.clone(),
                    deployed: match &c.deployed {
                        Deployed::LowRank { u, v } => Deployed::LowRank { u: u.cast(), v: v.cast() },
                        Deployed::DenseMerged { weight } => Deployed::DenseMerged { weight: weight.cast() },
                    },
                    case: c.case,
                    retention: c.retention,
                    active_rank: c.active_rank,
                    svd_rank: c.svd_rank,
                }),
            }
        };
        TransformerModel {
            config: self.config,
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|b| Block {
                    attn_norm: b.attn_norm.cast(),
                    mlp_norm: b.mlp_norm.cast(),
                    proj: core::array::from_fn(|i| lin(&b.proj[i])),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{select_layers, SelectionMode};

    fn tiny(n_layers: usize, n_heads: usize, n_kv: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers,
            d_model: 8,
            d_ff: 12,
            n_heads,
            n_kv_heads: n_kv,
            head_dim: 8 / n_heads,
            vocab_size: 11,
            max_seq_len: 16,
        }
    }

    #[test]
    fn single_token_shape() {
        let m = TransformerModel::<f64>::new(tiny(2, 2, 1), &mut Rng::new(1)).unwrap();
        let y = m.forward(&[3]).unwrap();
        assert_eq!(y.shape(), (1, 11));
        assert!(y.is_finite());
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = TransformerModel::<f64>::new(tiny(2, 2, 1), &mut Rng::new(2)).unwrap();
        let full = m.forward(&[1, 5, 2, 7, 0, 3]).unwrap();
        let prefix = m.forward(&[1, 5, 2, 7]).unwrap();
        assert_eq!(full.select_rows(&[0, 1, 2, 3]), prefix);
        let other = m.forward(&[1, 5, 2, 7, 9, 9]).unwrap();
        assert_eq!(other.select_rows(&[0, 1, 2, 3]), prefix);
    }

    #[test]
    fn input_errors() {
        let m = TransformerModel::<f64>::new(tiny(1, 2, 1), &mut Rng::new(2)).unwrap();
        assert!(matches!(m.forward(&[11]), Err(Error::Value(_))));
        assert!(matches!(m.forward(&[0; 17]), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_kv_matches_duplicated_kv() {
        let shared = TransformerModel::<f64>::new(tiny(1, 2, 1), &mut Rng::new(3)).unwrap();
        let mut dup = shared.clone();
        dup.config.n_kv_heads = 2;
        for p in [Projection::K, Projection::V] {
            let Linear::Dense(w) = shared.layers[0].linear(p) else { panic!() };
            *dup.layers[0].linear_mut(p) = Linear::Dense(w.vcat(w).unwrap());
        }
        let tokens = [4, 1, 9, 2, 2];
        assert!(shared.forward(&tokens).unwrap().max_abs_diff(&dup.forward(&tokens).unwrap()) < 1e-12);
    }

    #[test]
    fn identity_selection_is_exact_copy() {
        let t = TransformerModel::<f64>::new(tiny(3, 2, 1), &mut Rng::new(4)).unwrap();
        let s = t.build_student(&select_layers(3, 3, SelectionMode::Mixed).unwrap()).unwrap();
        assert_eq!(s.forward(&[1, 2, 3]).unwrap(), t.forward(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn dropping_a_layer_equals_zeroing_its_residual() {
        let t = TransformerModel::<f64>::new(tiny(2, 2, 1), &mut Rng::new(5)).unwrap();
        let sel = LayerSelection {
            mode: SelectionMode::Truncated,
            indices: alloc::vec![0],
        };
        let s = t.build_student(&sel).unwrap();
        let mut ablated = t.clone();
        for p in [Projection::O, Projection::Down] {
            let (r, c) = ablated.config.projection_shape(p);
            *ablated.layers[1].linear_mut(p) = Linear::Dense(Matrix::zeros(r, c));
        }
        let tokens = [3, 0, 8, 8, 1];
        assert!(s.forward(&tokens).unwrap().max_abs_diff(&ablated.forward(&tokens).unwrap()) < 1e-12);
    }

    #[test]
    fn student_never_aliases_teacher() {
        let t = TransformerModel::<f64>::new(tiny(4, 2, 1), &mut Rng::new(6)).unwrap();
        let before = t.forward(&[1, 2]).unwrap();
        let mut s = t.build_student(&select_layers(4, 2, SelectionMode::Mixed).unwrap()).unwrap();
        s.walk_mut(&mut |_, m, _| m.data_mut().iter_mut().for_each(|v| *v += 1.0));
        assert_eq!(t.forward(&[1, 2]).unwrap(), before);
        assert_eq!(s.layers[1], {
            let mut b = t.layers[3].clone();
            b.attn_norm.data_mut().iter_mut().for_each(|v| *v += 1.0);
            b.mlp_norm.data_mut().iter_mut().for_each(|v| *v += 1.0);
            for l in b.proj.iter_mut() {
                if let Linear::Dense(w) = l {
                    w.data_mut().iter_mut().for_each(|v| *v += 1.0);
                }
            }
            b
        });
    }

    #[test]
    fn wrapping_is_neutral_and_ordered() {
        let mut cfg = tiny(6, 2, 1);
        cfg.vocab_size = 7;
        let plain = TransformerModel::<f64>::new(cfg, &mut Rng::new(7)).unwrap();
        let mut wrapped = plain.clone();
        let lora = LoraConfig {
            r_max: 3,
            alpha: 6.0,
            ..Default::default()
        };
        wrapped.wrap_with_gated_lora(&lora, &mut Rng::new(8)).unwrap();
        let tokens = [1, 4, 6, 0];
        assert!(wrapped.forward(&tokens).unwrap().max_abs_diff(&plain.forward(&tokens).unwrap()) < 1e-10);
        let names: Vec<String> = wrapped.gated_modules().iter().map(|g| String::from(g.name())).collect();
        assert_eq!(names.len(), 42);
        assert_eq!(names[0], "layers.0.self_attn.q_proj");
        assert_eq!(names[41], "layers.5.mlp.down_proj");
        let mut again = plain.clone();
        again.wrap_with_gated_lora(&lora, &mut Rng::new(8)).unwrap();
        assert_eq!(again, wrapped);
        assert!(matches!(wrapped.wrap_with_gated_lora(&lora, &mut Rng::new(8)), Err(Error::State(_))));
    }

    #[test]
    fn forward_binds_tensors_in_walk_order() {
        let mut m = TransformerModel::<f64>::new(tiny(2, 2, 1), &mut Rng::new(9)).unwrap();
        m.wrap_with_gated_lora(&LoraConfig { r_max: 2, ..Default::default() }, &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let pass = m.forward_on(&mut tape, &[1, 2, 3], TrainMode::Lora).unwrap();
        let mut walked = Vec::new();
        m.walk(&mut |_, t, _| walked.push(t as *const Matrix<f64> as usize));
        assert_eq!(pass.addrs, walked);
        let mut kinds = Vec::new();
        m.walk(&mut |_, _, k| kinds.push(k));
        for (v, k) in pass.params.iter().zip(kinds) {
            assert_eq!(tape.requires_grad(*v), k.trainable(TrainMode::Lora));
        }
    }

    #[test]
    fn tensor_names() {
        let mut m = TransformerModel::<f32>::new(tiny(1, 2, 1), &mut Rng::new(9)).unwrap();
        m.wrap_with_gated_lora(&LoraConfig { r_max: 2, ..Default::default() }, &mut Rng::new(1)).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed_tokens");
        assert_eq!(names[1], "layers.0.input_layernorm");
        assert_eq!(names[2], "layers.0.self_attn.q_proj.weight");
        assert_eq!(names[3], "layers.0.self_attn.q_proj.lora_a");
        assert_eq!(names.last().unwrap(), "lm_head");
    }
}
