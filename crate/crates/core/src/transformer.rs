//! GPT-2 style decoder-only transformer built on the autograd graph.
//!
//! Learned absolute positions, pre-LayerNorm residual blocks, GELU MLP and
//! (by default) tied input/output embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

const INIT_STD: Float = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Six layers, eight heads, width 256.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 256,
            d_ff: 1024,
            vocab_size,
            max_seq_len,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameters in one residual block.
    pub fn block_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        // two layer norms, q/k/v/o with biases, fc and proj with biases
        4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    }

    /// Closed-form parameter count of [`LanguageModel`]:
    /// `V d + S d + L (4d + 4(d^2 + d) + 2 d f + f + d) + 2d`, plus `V d`
    /// for an untied output head.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let head = if self.tie_embeddings { 0 } else { self.vocab_size * d };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * self.block_param_count() + 2 * d + head
    }
}

/// Affine map `x @ w + b` with `w` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: Float,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.normal(format!("{name}.w"), &[d_in, d_out], std, rng)?;
        let b = store.zeros(format!("{name}.b"), &[d_out])?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.g"), &[d])?,
            bias: store.zeros(format!("{name}.b"), &[d])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Randomness for dropout during training; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut DropoutRng) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = (1.0 - p) as Float;
    let n = g.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    g.dropout_with_mask(x, mask)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, depth: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let resid_std = INIT_STD / ((2 * depth) as Float).sqrt();
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            wq: Linear::new(store, &format!("{name}.attn.wq"), d, d, INIT_STD, rng)?,
            wk: Linear::new(store, &format!("{name}.attn.wk"), d, d, INIT_STD, rng)?,
            wv: Linear::new(store, &format!("{name}.attn.wv"), d, d, INIT_STD, rng)?,
            wo: Linear::new(store, &format!("{name}.attn.wo"), d, d, resid_std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc: Linear::new(store, &format!("{name}.mlp.fc"), d, cfg.d_ff, INIT_STD, rng)?,
            proj: Linear::new(store, &format!("{name}.mlp.proj"), cfg.d_ff, d, resid_std, rng)?,
        })
    }

    /// Returns the block output and its attention node.
    fn forward(&self, g: &mut Graph, x: Var, heads: usize, segments: usize, p: f64, rng: &mut DropoutRng) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let att = g.attention_batched(q, k, v, heads, true, segments)?;
        let o = self.wo.forward(g, att)?;
        let o = dropout(g, o, p, rng)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.proj.forward(g, h)?;
        let h = dropout(g, h, p, rng)?;
        Ok((g.add(x, h)?, att))
    }
}

/// A stack of causal blocks followed by a final LayerNorm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
}

impl Stack {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, layers: usize, rng: &mut R) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), cfg, layers, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), cfg.d_model)?,
            heads: cfg.n_heads,
            dropout: cfg.dropout,
        })
    }

    /// `x` holds `segments` equal-length sequences stacked along rows.
    pub fn forward(&self, g: &mut Graph, mut x: Var, segments: usize, rng: &mut DropoutRng) -> Result<(Var, Vec<Var>)> {
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, a) = b.forward(g, x, self.heads, segments, self.dropout, rng)?;
            x = y;
            attn.push(a);
        }
        Ok((self.ln_f.forward(g, x)?, attn))
    }
}

/// Hidden states, logits and per-layer attention nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// `[T, d_model]`, after the final LayerNorm.
    pub hidden: Var,
    /// `[T, vocab]`.
    pub logits: Var,
    /// One attention node per layer; read weights with [`Graph::attention_probs`].
    pub attn: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub wte: ParamId,
    pub wpe: ParamId,
    pub stack: Stack,
    pub head: Option<ParamId>,
}

impl LanguageModel {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let wte = store.normal(format!("{name}.wte"), &[config.vocab_size, d], INIT_STD, rng)?;
        let wpe = store.normal(format!("{name}.wpe"), &[config.max_seq_len, d], INIT_STD, rng)?;
        let stack = Stack::new(store, name, &config, config.n_layers, rng)?;
        let head = if config.tie_embeddings {
            None
        } else {
            Some(store.normal(format!("{name}.head"), &[config.vocab_size, d], INIT_STD, rng)?)
        };
        Ok(Self { config, wte, wpe, stack, head })
    }

    /// Token plus position embeddings. `tokens` holds `segments` sequences of
    /// equal length back to back, each placed at positions `0..T`.
    pub fn embed(&self, g: &mut Graph, tokens: &[usize], segments: usize) -> Result<Var> {
        let len = segment_len(tokens.len(), segments)?;
        if len > self.config.max_seq_len {
            return Err(Error::Length { len, max: self.config.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let wte = g.param(self.wte);
        let wpe = g.param(self.wpe);
        let tok = g.select_rows(wte, tokens)?;
        let positions: Vec<usize> = (0..segments).flat_map(|_| 0..len).collect();
        let pos = g.select_rows(wpe, &positions)?;
        g.add(tok, pos)
    }

    /// Maps hidden states to vocabulary logits.
    pub fn unembed(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let w = g.param(self.head.unwrap_or(self.wte));
        g.matmul_bt(hidden, w)
    }

    /// Causal forward pass; `logits[t]` depends on `tokens[..=t]` only.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], rng: DropoutRng) -> Result<LmOutput> {
        self.forward_batch(g, tokens, 1, rng)
    }

    /// Forward pass over `segments` equal-length sequences stacked along rows.
    pub fn forward_batch(&self, g: &mut Graph, tokens: &[usize], segments: usize, rng: DropoutRng) -> Result<LmOutput> {
        let (hidden, attn) = self.forward_hidden(g, tokens, segments, rng)?;
        let logits = self.unembed(g, hidden)?;
        Ok(LmOutput { hidden, logits, attn })
    }

    /// Final hidden states and attention nodes, without the output layer.
    pub fn forward_hidden(&self, g: &mut Graph, tokens: &[usize], segments: usize, mut rng: DropoutRng) -> Result<(Var, Vec<Var>)> {
        let x = self.embed(g, tokens, segments)?;
        let x = dropout(g, x, self.config.dropout, &mut rng)?;
        self.stack.forward(g, x, segments, &mut rng)
    }
}

/// Length of each of `segments` equal parts of `total` tokens.
pub fn segment_len(total: usize, segments: usize) -> Result<usize> {
    if total == 0 || segments == 0 {
        return Err(Error::Degenerate("empty token sequence".into()));
    }
    if total % segments != 0 {
        return Err(Error::Shape(format!("{total} tokens do not split into {segments} equal sequences")));
    }
    Ok(total / segments)
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(xs: &[Float]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Deterministic greedy decoding.
///
/// `step_logits` returns next-token logits for a context. Tokens in `banned`
/// are never emitted. Stops after `eos` (which is included) or `max_new`.
pub fn greedy_decode<F>(mut context: Vec<usize>, max_new: usize, eos: usize, banned: &[usize], mut step_logits: F) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<Float>>,
{
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let mut logits = step_logits(&context)?;
        for &b in banned {
            if let Some(l) = logits.get_mut(b) {
                *l = Float::NEG_INFINITY;
            }
        }
        let next = argmax(&logits);
        out.push(next);
        context.push(next);
        if next == eos {
            break;
        }
    }
    Ok(out)
}

/// Scaled dot-product pooling of `memory` rows by trainable `queries`.
///
/// Single head and no causal mask. Keys and values are the memory rows
/// themselves, so each output row is a convex mixture of memory rows.
pub fn cross_attention_pool(g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
    g.attention(queries, memory, memory, 1, false)
}

/// Head-averaged attention `[n_layers, T, T]` for one token sequence.
pub fn export_attention(store: &ParamStore, lm: &LanguageModel, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let out = lm.forward(&mut g, tokens, None)?;
    let t = tokens.len();
    let mut data = Vec::with_capacity(out.attn.len() * t * t);
    for a in &out.attn {
        let (heads, probs) = g
            .attention_probs(*a)
            .ok_or_else(|| Error::Shape("missing attention weights".into()))?;
        let mut mean = vec![0.0; t * t];
        for h in 0..heads {
            mean.iter_mut().zip(&probs[h * t * t..(h + 1) * t * t]).for_each(|(m, p)| *m += p);
        }
        mean.iter_mut().for_each(|m| *m /= heads as Float);
        data.extend(mean);
    }
    Tensor::new(vec![out.attn.len(), t, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 32, vocab_size: 11, max_seq_len: 12, dropout: 0.0, tie_embeddings: true }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn param_count_matches_formula() {
        for tie in [true, false] {
            let cfg = ModelConfig { tie_embeddings: tie, ..tiny() };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            LanguageModel::new(&mut store, "lm", cfg.clone(), &mut rng).unwrap();
            assert_eq!(store.numel(), cfg.param_count());
        }
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lm = LanguageModel::new(&mut store, "lm", tiny(), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let err = lm.forward(&mut g, &[1; 13], None).unwrap_err();
        assert!(matches!(err, Error::Length { len: 13, max: 12 }));
    }

    #[test]
    fn greedy_stops_immediately_on_eos() {
        let out = greedy_decode(vec![1, 2], 5, 3, &[], |_| Ok(vec![0.0, 0.0, 0.0, 9.0])).unwrap();
        assert_eq!(out, vec![3]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_id_and_respect_bans() {
        let out = greedy_decode(vec![0], 2, 9, &[0], |_| Ok(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out, vec![1, 1]);
        assert_eq!(argmax(&[2.0, 5.0, 5.0]), 1);
    }
}
