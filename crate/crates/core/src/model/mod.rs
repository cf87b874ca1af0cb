//! Llama-style decoder: token embedding, pre-norm blocks of causal
//! multi-head attention with rotary positions and a SwiGLU FFN, a final
//! RMSNorm and an untied LM head.
//!
//! The trunk is shared by dense and MoE models through [`LanguageModel`];
//! only the FFN block differs.

mod eval;
mod train;

pub use eval::{eval_perplexity, eval_tokens, EvalReport};
pub use train::{sample_lm_batch, train_dense, train_step, LmBatch, TrainConfig, TrainTrace};

use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB;
use crate::error::{DiveError, Result};
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub rms_eps: f64,
    pub init_std: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 128-wide, 4-layer default.
    pub fn toy() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 344,
            vocab: VOCAB,
            max_seq_len: 256,
            rms_eps: 1e-5,
            init_std: 0.02,
            rope_base: 10_000.0,
        }
    }

    /// Very small model for unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            vocab: VOCAB,
            max_seq_len: 32,
            rms_eps: 1e-5,
            init_std: 0.02,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.d_model, self.n_layers, self.n_heads, self.d_ff, self.vocab, self.max_seq_len];
        if positive.contains(&0) {
            return Err(DiveError::Parameter(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(DiveError::Parameter(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < 8 {
            return Err(DiveError::Parameter(format!("d_ff must be at least 8, got {}", self.d_ff)));
        }
        if self.vocab != VOCAB {
            return Err(DiveError::Parameter(format!("vocab must be {VOCAB}, got {}", self.vocab)));
        }
        if !(self.rms_eps >= 0.0) || !(self.init_std > 0.0) || !(self.rope_base > 1.0) {
            return Err(DiveError::Parameter(format!("invalid numeric settings: {self:?}")));
        }
        Ok(())
    }

    /// FFN parameters per layer at full width: `3 * d_model * d_ff`.
    pub fn ffn_params_per_layer(&self) -> usize {
        3 * self.d_model * self.d_ff
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub fn layer_prefix(l: usize) -> String {
    format!("layers.{l}")
}

/// True for parameters shared by dense and MoE models.
pub fn is_trunk_param(name: &str) -> bool {
    !name.contains(".ffn.") && !name.contains(".moe.")
}

pub fn is_norm_param(name: &str) -> bool {
    name == "final_norm" || name.ends_with("_norm")
}

pub fn is_attention_param(name: &str) -> bool {
    name.contains(".attn.")
}

/// Low-rank adapter settings shared by every adapted projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Per-forward options and the graph nodes a caller may want to inspect.
pub struct Pass {
    pub train: bool,
    pub dropout_rng: DetRng,
    /// Post-SwiGLU activation of each dense FFN, in layer order.
    pub ffn_act: Vec<Var>,
    /// Router logits of each MoE layer, in layer order.
    pub router_logits: Vec<Var>,
}

impl Pass {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout_rng: DetRng::new(0),
            ffn_act: Vec::new(),
            router_logits: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            dropout_rng: DetRng::new(seed),
            ..Self::eval()
        }
    }
}

/// A decoder whose FFN block is supplied by the implementor.
pub trait LanguageModel<T: Scalar> {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// FFN block of layer `layer` on normalized hidden rows `x`.
    fn ffn(&self, g: &mut Graph<T>, layer: usize, x: Var, pass: &mut Pass) -> Result<Var>;
}

/// Trunk parameters with Gaussian weights and unit norm gains. Each tensor
/// draws from its own generator keyed by `(seed, name)`.
pub fn init_trunk<T: Scalar>(config: &ModelConfig, seed: u64) -> ParamStore<T> {
    let d = config.d_model;
    let mut p = ParamStore::new();
    let gauss = |p: &mut ParamStore<T>, name: String, shape: &[usize]| {
        let mut rng = DetRng::new(DetRng::derive_seed(seed, &name));
        p.insert(name, Tensor::randn(shape, config.init_std, &mut rng));
    };
    gauss(&mut p, "tok_embed".into(), &[config.vocab, d]);
    gauss(&mut p, "lm_head".into(), &[config.vocab, d]);
    for l in 0..config.n_layers {
        let pre = layer_prefix(l);
        for w in ["wq", "wk", "wv", "wo"] {
            gauss(&mut p, format!("{pre}.attn.{w}"), &[d, d]);
        }
        p.insert(format!("{pre}.attn_norm"), Tensor::ones(&[d]));
        p.insert(format!("{pre}.ffn_norm"), Tensor::ones(&[d]));
    }
    p.insert("final_norm", Tensor::ones(&[d]));
    p
}

pub fn gaussian<T: Scalar>(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = DetRng::new(DetRng::derive_seed(seed, name));
    Tensor::randn(shape, std, &mut rng)
}

/// Logits `[batch*seq x vocab]` for row-major `tokens`.
pub fn forward<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    pass: &mut Pass,
) -> Result<Var> {
    let cfg = *model.config();
    if seq > cfg.max_seq_len {
        return Err(DiveError::Capacity(format!(
            "sequence of {seq} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if tokens.len() != batch * seq || seq == 0 {
        return Err(DiveError::Dimension(format!(
            "{} tokens for a {batch}x{seq} batch",
            tokens.len()
        )));
    }
    let p = model.params();
    let embed = p.bind(g, "tok_embed")?;
    let mut h = g.embedding(embed, tokens)?;
    for l in 0..cfg.n_layers {
        let pre = layer_prefix(l);
        let norm = p.bind(g, &format!("{pre}.attn_norm"))?;
        let a = g.rms_norm(h, norm, cfg.rms_eps)?;
        let mut qkv = Vec::with_capacity(3);
        for w in ["wq", "wk", "wv"] {
            let wv = p.bind(g, &format!("{pre}.attn.{w}"))?;
            qkv.push(g.linear(a, wv)?);
        }
        let q = g.rope(qkv[0], cfg.n_heads, seq, cfg.rope_base)?;
        let k = g.rope(qkv[1], cfg.n_heads, seq, cfg.rope_base)?;
        let o = g.causal_attention(q, k, qkv[2], batch, seq, cfg.n_heads)?;
        let wo = p.bind(g, &format!("{pre}.attn.wo"))?;
        let o = g.linear(o, wo)?;
        h = g.add(h, o)?;
        let norm = p.bind(g, &format!("{pre}.ffn_norm"))?;
        let f = g.rms_norm(h, norm, cfg.rms_eps)?;
        let f = model.ffn(g, l, f, pass)?;
        h = g.add(h, f)?;
    }
    let norm = p.bind(g, "final_norm")?;
    let h = g.rms_norm(h, norm, cfg.rms_eps)?;
    let head = p.bind(g, "lm_head")?;
    g.linear(h, head)
}

/// Logits as a `[batch x seq x vocab]` tensor, evaluation mode.
pub fn logits<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = forward(model, &mut g, tokens, batch, seq, &mut Pass::eval())?;
    g.tensor(out).reshape(&[batch, seq, model.config().vocab])
}

/// `x W^T (+ scale * drop(x) A^T B^T)` for the projection `name`; the
/// low-rank branch is added when `name.lora_a` exists.
pub fn adapted_linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    lora: Option<&LoraSpec>,
    pass: &mut Pass,
) -> Result<Var> {
    let w = p.bind(g, name)?;
    let base = g.linear(x, w)?;
    let a_name = format!("{name}.lora_a");
    let Some(spec) = lora.filter(|_| p.contains(&a_name)) else {
        return Ok(base);
    };
    let a = p.bind(g, &a_name)?;
    let b = p.bind(g, &format!("{name}.lora_b"))?;
    let xin = if pass.train {
        g.dropout(x, spec.dropout, &mut pass.dropout_rng)?
    } else {
        x
    };
    let low = g.linear(xin, a)?;
    let delta = g.linear(low, b)?;
    let delta = g.scale(delta, spec.scale())?;
    g.add(base, delta)
}

/// SwiGLU FFN under `prefix` (`gate`, `up`, `down`, optional `bias`).
/// Returns the output and the post-SwiGLU activation.
pub fn swiglu_ffn<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    lora: Option<&LoraSpec>,
    pass: &mut Pass,
) -> Result<(Var, Var)> {
    let gate = adapted_linear(g, p, &format!("{prefix}.gate"), x, lora, pass)?;
    let up = adapted_linear(g, p, &format!("{prefix}.up"), x, lora, pass)?;
    let act = g.swiglu(gate, up)?;
    let mut out = adapted_linear(g, p, &format!("{prefix}.down"), act, lora, pass)?;
    let bias = format!("{prefix}.bias");
    if p.contains(&bias) {
        let b = p.bind(g, &bias)?;
        out = g.add_bias(out, b)?;
    }
    Ok((out, act))
}

/// Dense decoder, possibly with pruned (narrower, biased) FFNs.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Kept intermediate channels per layer when the FFNs were pruned.
    pub kept: Option<Vec<Vec<usize>>>,
}

impl<T: Scalar> DenseModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = init_trunk(&config, seed);
        let (d, f) = (config.d_model, config.d_ff);
        for l in 0..config.n_layers {
            let pre = format!("{}.ffn", layer_prefix(l));
            for (w, shape) in [("gate", [f, d]), ("up", [f, d]), ("down", [d, f])] {
                let name = format!("{pre}.{w}");
                let t = gaussian(&shape, config.init_std, seed, &name);
                params.insert(name, t);
            }
        }
        Ok(Self {
            config,
            params,
            kept: None,
        })
    }

    pub fn ffn_prefix(layer: usize) -> String {
        format!("{}.ffn", layer_prefix(layer))
    }

    /// Intermediate width of layer `l`'s FFN.
    pub fn ffn_width(&self, l: usize) -> Result<usize> {
        Ok(self.params.get(&format!("{}.gate", Self::ffn_prefix(l)))?.shape()[0])
    }

    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        logits(self, tokens, batch, seq)
    }
}

impl<T: Scalar> LanguageModel<T> for DenseModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn ffn(&self, g: &mut Graph<T>, layer: usize, x: Var, pass: &mut Pass) -> Result<Var> {
        let (out, act) = swiglu_ffn(g, &self.params, &Self::ffn_prefix(layer), x, None, pass)?;
        pass.ffn_act.push(act);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::toy().ffn_params_per_layer(), 3 * 128 * 344);
        let mut bad = ModelConfig::tiny();
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
        bad = ModelConfig::tiny();
        bad.d_ff = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let m = DenseModel::<f32>::init(ModelConfig::tiny(), 1).unwrap();
        let names: Vec<&str> = m.params.names().collect();
        assert!(names.contains(&"layers.1.ffn.down"));
        assert!(names.contains(&"layers.0.attn.wq"));
        assert_eq!(names.len(), 2 + 1 + 2 * (4 + 2 + 3));
        assert_eq!(m.params.get("layers.0.ffn.gate").unwrap().shape(), &[24, 16]);
        assert_eq!(m.params.get("layers.0.ffn.down").unwrap().shape(), &[16, 24]);
    }

    #[test]
    fn overlong_sequence_is_capacity_error() {
        let m = DenseModel::<f32>::init(ModelConfig::tiny(), 1).unwrap();
        let toks = vec![1; 33];
        assert!(matches!(m.logits(&toks, 1, 33), Err(DiveError::Capacity(_))));
    }
}
