//! Training objectives over a shared decoder backbone.
//!
//! Every objective trains the same [`LanguageModel`] and differs only in the
//! input layout and the auxiliary heads it adds:
//!
//! | kind          | input                               | extra parameters            |
//! |---------------|-------------------------------------|-----------------------------|
//! | `standard`    | prefix, answer                      | none                        |
//! | `pause`       | prefix, k planning tokens, answer   | k embedding rows            |
//! | `bow`         | as pause                            | bag-of-words head           |
//! | `teacherless` | prefix, placeholders                | none                        |
//! | `multitoken`  | prefix, answer                      | one head per future offset  |
//! | `semformer`   | as pause                            | autoencoder and predictor   |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::infer::Inference;
use crate::params::ParamStore;
use crate::pathstar::{PathSolver, Vocabulary};
use crate::semformer::{build_planned_sequence, PlannedBatch, SemformerConfig, SemformerHeads};
use crate::tensor::{Float, Tensor};
use crate::transformer::{argmax, DropoutRng, LanguageModel, Linear, ModelConfig};

const INIT_STD: Float = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Standard,
    Pause,
    Bow,
    Teacherless,
    Multitoken,
    Semformer,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::Standard,
        ObjectiveKind::Pause,
        ObjectiveKind::Bow,
        ObjectiveKind::Teacherless,
        ObjectiveKind::Multitoken,
        ObjectiveKind::Semformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Standard => "standard",
            ObjectiveKind::Pause => "pause",
            ObjectiveKind::Bow => "bow",
            ObjectiveKind::Teacherless => "teacherless",
            ObjectiveKind::Multitoken => "multitoken",
            ObjectiveKind::Semformer => "semformer",
        }
    }

    /// Whether planning tokens sit between prefix and answer.
    pub fn uses_planning_tokens(self) -> bool {
        matches!(self, ObjectiveKind::Pause | ObjectiveKind::Bow | ObjectiveKind::Semformer)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}; expected one of standard|pause|bow|teacherless|multitoken|semformer")))
    }
}

/// Objective selection and every per-objective setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Planning tokens for pause, bow and semformer.
    pub k: usize,
    pub bow_coeff: f64,
    pub n_future_heads: usize,
    /// Sum rather than average the multi-token head losses.
    pub sum_head_losses: bool,
    /// Also train next-token prediction on the prefix.
    pub include_prefix_loss: bool,
    pub latent_dim: usize,
    pub alpha: f64,
    pub dec_layers: usize,
    pub share_encoder: bool,
    pub stop_grad_encoder: bool,
    pub rp_target_stop_grad: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let s = SemformerConfig::default();
        Self {
            kind: ObjectiveKind::Standard,
            k: s.k,
            bow_coeff: 0.1,
            n_future_heads: 3,
            sum_head_losses: false,
            include_prefix_loss: false,
            latent_dim: s.latent_dim,
            alpha: s.alpha,
            dec_layers: s.dec_layers,
            share_encoder: s.share_encoder,
            stop_grad_encoder: s.stop_grad_encoder,
            rp_target_stop_grad: s.rp_target_stop_grad,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Planning tokens actually inserted for this objective.
    pub fn planning_tokens(&self) -> usize {
        if self.kind.uses_planning_tokens() {
            self.k
        } else {
            0
        }
    }

    pub fn semformer(&self) -> SemformerConfig {
        SemformerConfig {
            k: self.k,
            latent_dim: self.latent_dim,
            alpha: self.alpha,
            dec_layers: self.dec_layers,
            share_encoder: self.share_encoder,
            stop_grad_encoder: self.stop_grad_encoder,
            rp_target_stop_grad: self.rp_target_stop_grad,
        }
    }

    pub fn vocabulary(&self, n_values: usize) -> Vocabulary {
        Vocabulary::new(n_values, self.planning_tokens())
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        match self.kind {
            ObjectiveKind::Pause | ObjectiveKind::Bow if self.k == 0 => {
                Err(Error::Config(format!("{} needs at least one planning token", self.kind)))
            }
            ObjectiveKind::Bow if !(self.bow_coeff >= 0.0) => Err(Error::Config("bow_coeff must be non-negative".into())),
            ObjectiveKind::Multitoken if self.n_future_heads == 0 => Err(Error::Config("n_future_heads must be positive".into())),
            ObjectiveKind::Semformer => self.semformer().validate(d_model),
            _ => Ok(()),
        }
    }
}

/// Auxiliary parameters of the active objective.
#[derive(Clone, Debug)]
pub enum ObjectiveHeads {
    None,
    /// Linear map from pooled planning states to node-value logits.
    Bow(Linear),
    /// Heads for offsets `2..=n`; offset 1 is the tied unembedding.
    Multitoken(Vec<Linear>),
    Semformer(Box<SemformerHeads>),
}

/// Scalar loss nodes; terms an objective lacks are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub lm: Var,
    pub ae: Option<Var>,
    pub rp: Option<Var>,
}

/// Loss values read back from a graph; absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub lm: f64,
    pub ae: f64,
    pub rp: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(g: &Graph, nodes: &LossNodes) -> Self {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
        Self { lm: get(Some(nodes.lm)), ae: get(nodes.ae), rp: get(nodes.rp), total: get(Some(nodes.total)) }
    }

    pub fn add_scaled(&mut self, other: &LossValues, w: f64) {
        self.lm += w * other.lm;
        self.ae += w * other.ae;
        self.rp += w * other.rp;
        self.total += w * other.total;
    }
}

/// One `(prefix, answer)` training pair.
pub type Example<'a> = (&'a [usize], &'a [usize]);

/// A backbone, its objective heads and the parameters behind both.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub lm: LanguageModel,
    pub heads: ObjectiveHeads,
    pub vocab: Vocabulary,
    pub objective: ObjectiveConfig,
}

impl Model {
    /// Builds and initialises a model. Parameter initialisation is fully
    /// determined by `seed`.
    pub fn new(vocab: Vocabulary, lm_config: ModelConfig, objective: ObjectiveConfig, seed: u64) -> Result<Self> {
        if lm_config.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from task vocabulary {}",
                lm_config.vocab_size,
                vocab.size()
            )));
        }
        if vocab.planning_tokens != objective.planning_tokens() {
            return Err(Error::Config(format!(
                "vocabulary has {} planning tokens, objective needs {}",
                vocab.planning_tokens,
                objective.planning_tokens()
            )));
        }
        objective.validate(lm_config.d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lm = LanguageModel::new(&mut store, "lm", lm_config.clone(), &mut rng)?;
        let d = lm_config.d_model;
        let heads = match objective.kind {
            ObjectiveKind::Bow => ObjectiveHeads::Bow(Linear::new(&mut store, "bow", d, vocab.n_values, INIT_STD, &mut rng)?),
            ObjectiveKind::Multitoken => ObjectiveHeads::Multitoken(
                (2..=objective.n_future_heads)
                    .map(|h| Linear::new(&mut store, &format!("mtp.head{h}"), d, vocab.size(), INIT_STD, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            ObjectiveKind::Semformer => {
                ObjectiveHeads::Semformer(Box::new(SemformerHeads::new(&mut store, &lm_config, objective.semformer(), &mut rng)?))
            }
            _ => ObjectiveHeads::None,
        };
        Ok(Self { store, lm, heads, vocab, objective })
    }

    /// Closed-form parameter count for a configuration.
    pub fn param_count(lm_config: &ModelConfig, objective: &ObjectiveConfig, n_values: usize) -> usize {
        let (d, v) = (lm_config.d_model, lm_config.vocab_size);
        let base = lm_config.param_count();
        base + match objective.kind {
            ObjectiveKind::Standard | ObjectiveKind::Pause | ObjectiveKind::Teacherless => 0,
            ObjectiveKind::Bow => d * n_values + n_values,
            ObjectiveKind::Multitoken => objective.n_future_heads.saturating_sub(1) * (d * v + v),
            ObjectiveKind::Semformer => SemformerHeads::param_count(lm_config, &objective.semformer()),
        }
    }

    /// A copy holding only the language model, as used at inference.
    pub fn inference_only(&self) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lm = LanguageModel::new(&mut store, "lm", self.lm.config.clone(), &mut rng)?;
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = self.store.id(&name).ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?;
            store.get_mut(id).tensor = self.store.tensor(src).clone();
        }
        let objective = ObjectiveConfig { kind: self.objective.kind, ..self.objective.clone() };
        Ok(Self { store, lm, heads: ObjectiveHeads::None, vocab: self.vocab.clone(), objective })
    }

    pub fn planned_batch(&self, batch: &[Example]) -> Result<PlannedBatch> {
        let plans = self.vocab.plan_ids();
        let seqs = batch
            .iter()
            .map(|(p, a)| build_planned_sequence(p, a, &plans, self.lm.config.max_seq_len))
            .collect::<Result<Vec<_>>>()?;
        PlannedBatch::new(&seqs)
    }

    /// Batch-mean loss of the configured objective. All examples must share
    /// prefix and answer lengths.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[Example], mut rng: DropoutRng) -> Result<LossNodes> {
        let include_prefix = self.objective.include_prefix_loss;
        let nodes = match (&self.heads, self.objective.kind) {
            (ObjectiveHeads::Semformer(h), _) => {
                let pb = self.planned_batch(batch)?;
                let l = h.losses(g, &self.lm, &pb, self.vocab.answer_start(), include_prefix, rng)?;
                LossNodes { total: l.total, lm: l.lm, ae: Some(l.ae), rp: Some(l.rp) }
            }
            (_, ObjectiveKind::Teacherless) => self.teacherless_loss(g, batch, rng)?,
            (heads, _) => {
                let pb = self.planned_batch(batch)?;
                let out = self.lm.forward_batch(g, &pb.tokens, pb.segments, rng.as_deref_mut())?;
                let (targets, mask) = pb.lm_targets(include_prefix);
                let lm = g.cross_entropy_masked(out.logits, targets, mask)?;
                match heads {
                    ObjectiveHeads::Bow(head) => {
                        let aux = self.bow_term(g, head, &pb, out.hidden)?;
                        let scaled = g.scale(aux, self.objective.bow_coeff as Float);
                        LossNodes { total: g.sum(&[lm, scaled])?, lm, ae: None, rp: None }
                    }
                    ObjectiveHeads::Multitoken(extra) => {
                        let mut losses = vec![lm];
                        for (i, head) in extra.iter().enumerate() {
                            if let Some(l) = self.future_head_loss(g, head, &pb, out.hidden, i + 2)? {
                                losses.push(l);
                            }
                        }
                        let sum = g.sum(&losses)?;
                        let total =
                            if self.objective.sum_head_losses { sum } else { g.scale(sum, 1.0 / losses.len() as Float) };
                        LossNodes { total, lm, ae: None, rp: None }
                    }
                    _ => LossNodes { total: lm, lm, ae: None, rp: None },
                }
            }
        };
        if !g.value(nodes.total).all_finite() {
            return Err(Error::NonFinite(format!("{} loss", self.objective.kind)));
        }
        Ok(nodes)
    }

    /// Mean binary cross-entropy of the node values present in each answer,
    /// predicted from the mean of the planning-token hidden states.
    fn bow_term(&self, g: &mut Graph, head: &Linear, pb: &PlannedBatch, hidden: Var) -> Result<Var> {
        let (b, k) = (pb.segments, pb.k);
        let plan = g.select_rows(hidden, &pb.plan_rows())?;
        let mut pool = vec![0.0; b * b * k];
        for s in 0..b {
            pool[s * b * k + s * k..s * b * k + (s + 1) * k].fill(1.0 / k as Float);
        }
        let pool = g.constant(Tensor::new(vec![b, b * k], pool)?);
        let pooled = g.matmul(pool, plan)?;
        let logits = head.forward(g, pooled)?;
        let n = self.vocab.n_values;
        let mut targets = vec![0.0; b * n];
        for (s, answer) in pb.answers.chunks(pb.answer_len).enumerate() {
            for &t in answer.iter().filter(|&&t| self.vocab.is_node(t)) {
                targets[s * n + t] = 1.0;
            }
        }
        g.bce_with_logits(logits, &targets)
    }

    /// NLL of the head predicting the token `offset` positions ahead, or
    /// `None` when no target lies in the trained region.
    fn future_head_loss(&self, g: &mut Graph, head: &Linear, pb: &PlannedBatch, hidden: Var, offset: usize) -> Result<Option<Var>> {
        let t = pb.seq_len;
        let first = if self.objective.include_prefix_loss { 1 } else { pb.n + pb.k };
        let mut targets = vec![0; pb.tokens.len()];
        let mut mask = vec![false; pb.tokens.len()];
        for s in 0..pb.segments {
            for row in 0..t.saturating_sub(offset) {
                let pos = row + offset;
                if pos >= first {
                    targets[s * t + row] = pb.tokens[s * t + pos];
                    mask[s * t + row] = true;
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            return Ok(None);
        }
        let logits = head.forward(g, hidden)?;
        Ok(Some(g.cross_entropy_masked(logits, &targets, &mask)?))
    }

    /// Input `prefix, pad * L`; placeholder row `n + t` predicts answer
    /// token `t`.
    fn teacherless_loss(&self, g: &mut Graph, batch: &[Example], rng: DropoutRng) -> Result<LossNodes> {
        let (n, len) = match batch.first() {
            Some((p, a)) => (p.len(), a.len()),
            None => return Err(Error::Degenerate("empty batch".into())),
        };
        if batch.iter().any(|(p, a)| p.len() != n || a.len() != len) || n == 0 || len == 0 {
            return Err(Error::Shape("teacherless batch needs equal, non-empty prefix and answer lengths".into()));
        }
        let t = n + len;
        if t > self.lm.config.max_seq_len {
            return Err(Error::Length { len: t, max: self.lm.config.max_seq_len });
        }
        let pad = self.vocab.pad();
        let mut tokens = Vec::with_capacity(batch.len() * t);
        let mut targets = vec![0; batch.len() * t];
        let mut mask = vec![false; batch.len() * t];
        for (s, (p, a)) in batch.iter().enumerate() {
            tokens.extend_from_slice(p);
            tokens.extend(std::iter::repeat_n(pad, len));
            for (j, &tok) in a.iter().enumerate() {
                targets[s * t + n + j] = tok;
                mask[s * t + n + j] = true;
            }
            if self.objective.include_prefix_loss {
                for row in 0..n - 1 {
                    targets[s * t + row] = p[row + 1];
                    mask[s * t + row] = true;
                }
            }
        }
        let out = self.lm.forward_batch(g, &tokens, batch.len(), rng)?;
        let lm = g.cross_entropy_masked(out.logits, &targets, &mask)?;
        Ok(LossNodes { total: lm, lm, ae: None, rp: None })
    }

    /// Greedy answer for `prefix`, continuing after the `forced` tokens.
    ///
    /// Planning tokens are appended to the prefix and never emitted. The
    /// teacherless model fills its whole placeholder block in one pass, so
    /// forced tokens only shift which part of the block is returned.
    pub fn generate(&self, prefix: &[usize], forced: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let inf = Inference::new(&self.store, &self.lm);
        let eos = self.vocab.eos();
        if self.objective.kind == ObjectiveKind::Teacherless {
            let len = forced.len() + max_new;
            if len == 0 {
                return Ok(Vec::new());
            }
            let mut input = prefix.to_vec();
            input.extend(std::iter::repeat_n(self.vocab.pad(), len));
            let logits = inf.extend(&mut inf.empty_cache(), &input)?;
            let mut block = Vec::with_capacity(len);
            for row in prefix.len()..input.len() {
                let tok = argmax(logits.row(row));
                block.push(tok);
                if tok == eos {
                    break;
                }
            }
            return Ok(block.into_iter().skip(forced.len()).collect());
        }
        let plans = self.vocab.plan_ids();
        let mut context = Vec::with_capacity(prefix.len() + plans.len() + forced.len());
        context.extend_from_slice(prefix);
        context.extend_from_slice(&plans);
        context.extend_from_slice(forced);
        inf.greedy(&context, max_new, eos, &plans)
    }
}

impl PathSolver for Model {
    fn solve(&self, prefix: &[usize], forced: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.generate(prefix, forced, max_new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ObjectiveKind, n_values: usize) -> Model {
        let objective = ObjectiveConfig { latent_dim: 4, dec_layers: 1, ..ObjectiveConfig::new(kind) };
        let vocab = objective.vocabulary(n_values);
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: vocab.size(),
            max_seq_len: 40,
            dropout: 0.0,
            tie_embeddings: true,
        };
        Model::new(vocab, cfg, objective, 1).unwrap()
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!("nope".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn parameter_counts_match_the_formulas() {
        for kind in ObjectiveKind::ALL {
            let m = tiny(kind, 10);
            assert_eq!(m.store.numel(), Model::param_count(&m.lm.config, &m.objective, 10), "{kind}");
        }
        let standard = tiny(ObjectiveKind::Standard, 10);
        let pause = tiny(ObjectiveKind::Pause, 10);
        assert_eq!(pause.store.numel(), standard.store.numel() + 4 * 8);
    }

    #[test]
    fn generation_never_emits_planning_tokens() {
        let m = tiny(ObjectiveKind::Pause, 10);
        let out = m.generate(&[0, 11, 1, 12, 0, 1, 13], &[], 6).unwrap();
        assert!(out.iter().all(|&t| !m.vocab.is_plan(t)));
        assert!(!out.is_empty() && out.len() <= 6);
    }

    #[test]
    fn teacherless_block_stops_after_eos() {
        let m = tiny(ObjectiveKind::Teacherless, 10);
        let out = m.generate(&[0, 11, 1, 12, 0, 1, 13], &[], 6).unwrap();
        let eos = m.vocab.eos();
        if let Some(p) = out.iter().position(|&t| t == eos) {
            assert_eq!(p + 1, out.len());
        }
        assert!(out.len() <= 6);
    }

    #[test]
    fn mismatched_vocabulary_is_rejected() {
        let objective = ObjectiveConfig::new(ObjectiveKind::Pause);
        let vocab = Vocabulary::new(10, 0);
        let cfg = ModelConfig::desk(vocab.size(), 32);
        assert!(Model::new(vocab, cfg, objective, 0).is_err());
    }
}
