//! Planning tokens, the latent-plan autoencoder and the joint objective.
//!
//! A training sequence is `prefix ; plan_1..plan_k ; answer`. The language
//! model is trained with next-token loss everywhere except where the target is
//! a planning token. Independently, an autoencoder compresses the answer into
//! `k` latent vectors `z_i` of width `dz`, and a shared linear predictor maps
//! the LM hidden state at each planning position onto the matching `z_i`:
//!
//! ```text
//! total = lm + ae + alpha * sum_i |z_i - f(h_{n+i})|^2
//! ```
//!
//! All loss terms are negative log-likelihoods or squared distances, so the
//! whole objective is minimised. At inference only the language model runs:
//! planning tokens are appended to the prefix and decoding is greedy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Float;
use crate::transformer::{cross_attention_pool, segment_len, DropoutRng, LanguageModel, Linear, ModelConfig, Stack};

const INIT_STD: Float = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemformerConfig {
    /// Number of planning tokens and latent vectors.
    pub k: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub dec_layers: usize,
    /// Reuse the language model as the encoder.
    pub share_encoder: bool,
    /// Block gradients from the autoencoder branch into the encoder.
    pub stop_grad_encoder: bool,
    /// Treat the latent targets as constants in the prediction loss.
    pub rp_target_stop_grad: bool,
}

impl Default for SemformerConfig {
    fn default() -> Self {
        Self {
            k: 4,
            latent_dim: 32,
            alpha: 1.0,
            dec_layers: 2,
            share_encoder: true,
            stop_grad_encoder: false,
            rp_target_stop_grad: false,
        }
    }
}

impl SemformerConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("semformer needs at least one planning token".into()));
        }
        if self.latent_dim == 0 || self.latent_dim >= d_model {
            return Err(Error::Config(format!(
                "latent_dim {} must be in [1, d_model = {d_model})",
                self.latent_dim
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        if self.dec_layers == 0 {
            return Err(Error::Config("dec_layers must be positive".into()));
        }
        Ok(())
    }
}

/// `prefix ; planning tokens ; answer` with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedSequence {
    pub tokens: Vec<usize>,
    /// Prefix length; planning tokens occupy `n..n + k`.
    pub n: usize,
    /// `lm_loss_mask[t]` is false iff `tokens[t]` is a planning token. Token 0
    /// has no predecessor and never enters the loss.
    pub lm_loss_mask: Vec<bool>,
    pub plan_positions: Vec<usize>,
}

impl PlannedSequence {
    pub fn k(&self) -> usize {
        self.plan_positions.len()
    }

    /// Index of the first answer token.
    pub fn answer_start(&self) -> usize {
        self.n + self.k()
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start()..]
    }

    /// Next-token targets for logits rows `0..len`. Row `t` predicts
    /// `tokens[t + 1]`; the last row has no target. Only answer targets count
    /// unless `include_prefix` is set.
    pub fn lm_targets(&self, include_prefix: bool) -> (Vec<usize>, Vec<bool>) {
        let len = self.tokens.len();
        let start = self.answer_start();
        let mut targets = vec![0; len];
        let mut mask = vec![false; len];
        for t in 0..len.saturating_sub(1) {
            targets[t] = self.tokens[t + 1];
            mask[t] = self.lm_loss_mask[t + 1] && (include_prefix || t + 1 >= start);
        }
        (targets, mask)
    }
}

/// Inserts `plan_ids` between `prefix` and `answer`.
pub fn build_planned_sequence(prefix: &[usize], answer: &[usize], plan_ids: &[usize], max_seq_len: usize) -> Result<PlannedSequence> {
    if prefix.is_empty() || answer.is_empty() {
        return Err(Error::Degenerate("prefix and answer must be non-empty".into()));
    }
    let len = prefix.len() + plan_ids.len() + answer.len();
    if len > max_seq_len {
        return Err(Error::Length { len, max: max_seq_len });
    }
    let n = prefix.len();
    let mut tokens = Vec::with_capacity(len);
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(plan_ids);
    tokens.extend_from_slice(answer);
    let plan_positions: Vec<usize> = (n..n + plan_ids.len()).collect();
    let lm_loss_mask = (0..len).map(|t| !plan_positions.contains(&t)).collect();
    Ok(PlannedSequence { tokens, n, lm_loss_mask, plan_positions })
}

/// Equal-length planned sequences stacked along rows for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub tokens: Vec<usize>,
    pub segments: usize,
    pub seq_len: usize,
    pub n: usize,
    pub k: usize,
    /// Answers back to back, `answer_len` tokens each.
    pub answers: Vec<usize>,
    pub answer_len: usize,
    targets: Vec<usize>,
    lm_mask: Vec<bool>,
    prefix_mask: Vec<bool>,
}

impl PlannedBatch {
    pub fn new(seqs: &[PlannedSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Degenerate("empty batch".into()))?;
        let (seq_len, n, k) = (first.tokens.len(), first.n, first.k());
        if seqs.iter().any(|s| s.tokens.len() != seq_len || s.n != n || s.k() != k) {
            return Err(Error::Shape("planned sequences in a batch must share prefix, plan and answer lengths".into()));
        }
        let mut b = Self {
            tokens: Vec::with_capacity(seqs.len() * seq_len),
            segments: seqs.len(),
            seq_len,
            n,
            k,
            answers: Vec::new(),
            answer_len: seq_len - n - k,
            targets: Vec::with_capacity(seqs.len() * seq_len),
            lm_mask: Vec::with_capacity(seqs.len() * seq_len),
            prefix_mask: Vec::with_capacity(seqs.len() * seq_len),
        };
        for s in seqs {
            b.tokens.extend_from_slice(&s.tokens);
            b.answers.extend_from_slice(s.answer());
            let (t, m) = s.lm_targets(false);
            let (_, pm) = s.lm_targets(true);
            b.targets.extend(t);
            b.lm_mask.extend(m);
            b.prefix_mask.extend(pm);
        }
        Ok(b)
    }

    /// Rows of the planning positions, segment-major.
    pub fn plan_rows(&self) -> Vec<usize> {
        (0..self.segments)
            .flat_map(|s| (0..self.k).map(move |i| s * self.seq_len + self.n + i))
            .collect()
    }

    pub fn lm_targets(&self, include_prefix: bool) -> (&[usize], &[bool]) {
        (&self.targets, if include_prefix { &self.prefix_mask } else { &self.lm_mask })
    }
}

/// `k` latent vectors of width `dz` per sequence, as a `[segments * k, dz]`
/// graph node with the rows of each sequence contiguous.
#[derive(Clone, Copy, Debug)]
pub struct LatentPlan {
    pub z: Var,
    pub segments: usize,
}

/// Compact causal decoder reading `k` latent memory slots before the answer.
#[derive(Clone, Debug)]
pub struct LatentDecoder {
    pub wte: ParamId,
    pub wpe: ParamId,
    pub stack: Stack,
    pub max_len: usize,
}

impl LatentDecoder {
    /// Closed-form size: `V d + (k + S) d + dec_layers * block + 2d`.
    pub fn param_count(lm: &ModelConfig, cfg: &SemformerConfig) -> usize {
        let d = lm.d_model;
        lm.vocab_size * d + (cfg.k + lm.max_seq_len) * d + cfg.dec_layers * lm.block_param_count() + 2 * d
    }
}

/// Encoder query, bottleneck projections, latent decoder and predictor head.
#[derive(Clone, Debug)]
pub struct SemformerHeads {
    pub config: SemformerConfig,
    /// Trainable cross-attention queries `[k, d_model]`.
    pub query: ParamId,
    pub down: Linear,
    /// One up-projection per latent slot.
    pub ups: Vec<Linear>,
    pub decoder: LatentDecoder,
    pub predictor: Linear,
    /// Separate encoder when the language model is not shared.
    pub encoder: Option<LanguageModel>,
}

/// Scalar loss nodes of one Semformer forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SemformerLosses {
    pub lm: Var,
    pub ae: Var,
    pub rp: Var,
    pub total: Var,
}

/// Reconstruction loss with the logits and targets behind it.
pub struct Reconstruction {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SemformerHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, lm: &ModelConfig, config: SemformerConfig, rng: &mut R) -> Result<Self> {
        config.validate(lm.d_model)?;
        let (d, dz) = (lm.d_model, config.latent_dim);
        let encoder = if config.share_encoder {
            None
        } else {
            Some(LanguageModel::new(store, "ae.enc", lm.clone(), rng)?)
        };
        let query = store.normal("ae.query", &[config.k, d], INIT_STD, rng)?;
        let down = Linear::new(store, "ae.down", d, dz, INIT_STD, rng)?;
        let ups = (0..config.k)
            .map(|i| Linear::new(store, &format!("ae.up{i}"), dz, d, INIT_STD, rng))
            .collect::<Result<_>>()?;
        let dec_cfg = ModelConfig { n_layers: config.dec_layers, ..lm.clone() };
        let max_len = config.k + lm.max_seq_len;
        let decoder = LatentDecoder {
            wte: store.normal("ae.dec.wte", &[lm.vocab_size, d], INIT_STD, rng)?,
            wpe: store.normal("ae.dec.wpe", &[max_len, d], INIT_STD, rng)?,
            stack: Stack::new(store, "ae.dec", &dec_cfg, config.dec_layers, rng)?,
            max_len,
        };
        let predictor = Linear::new(store, "rp", d, dz, INIT_STD, rng)?;
        Ok(Self { config, query, down, ups, decoder, predictor, encoder })
    }

    /// Parameters added on top of the language model:
    /// `k d + (d dz + dz) + k (dz d + d) + (d dz + dz) + decoder`, plus a full
    /// encoder copy when it is not shared.
    pub fn param_count(lm: &ModelConfig, cfg: &SemformerConfig) -> usize {
        let (d, dz, k) = (lm.d_model, cfg.latent_dim, cfg.k);
        let encoder = if cfg.share_encoder { 0 } else { lm.param_count() };
        k * d + (d * dz + dz) + k * (dz * d + d) + (d * dz + dz) + LatentDecoder::param_count(lm, cfg) + encoder
    }

    /// Encodes `segments` equal-length answers, pools each with the latent
    /// queries and projects the pooled states into the bottleneck.
    pub fn encode_response_latents(
        &self,
        g: &mut Graph,
        lm: &LanguageModel,
        answers: &[usize],
        segments: usize,
        rng: DropoutRng,
    ) -> Result<LatentPlan> {
        let encoder = self.encoder.as_ref().unwrap_or(lm);
        let (mut memory, _) = encoder.forward_hidden(g, answers, segments, rng)?;
        if self.config.stop_grad_encoder {
            memory = g.detach(memory);
        }
        let pooled = self.pool(g, memory, segments)?;
        Ok(LatentPlan { z: self.down.forward(g, pooled)?, segments })
    }

    /// Cross-attention pooling of each segment of `memory` into `k` rows.
    pub fn pool(&self, g: &mut Graph, memory: Var, segments: usize) -> Result<Var> {
        let q = g.param(self.query);
        if segments == 1 {
            return cross_attention_pool(g, q, memory);
        }
        let qs = g.concat_rows(&vec![q; segments])?;
        g.attention_batched(qs, memory, memory, 1, false, segments)
    }

    /// Teacher-forced reconstruction of the answers from the latent memory.
    ///
    /// Each decoder input is `m_1..m_k, bos, answer[..L-1]`; rows `k..k+L`
    /// predict the answer and memory rows carry no loss.
    pub fn reconstruct(&self, g: &mut Graph, latents: LatentPlan, answers: &[usize], bos: usize, mut rng: DropoutRng) -> Result<Reconstruction> {
        let (k, b) = (self.config.k, latents.segments);
        let (rows, dz) = g.value(latents.z).dims2()?;
        if rows != k * b || dz != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latents of [{rows}, {dz}] for {b} sequences with k = {k}, dz = {}",
                self.config.latent_dim
            )));
        }
        let len_a = segment_len(answers.len(), b)?;
        let len = k + len_a;
        if len > self.decoder.max_len {
            return Err(Error::Length { len, max: self.decoder.max_len });
        }
        let mut parts = Vec::with_capacity(k + 1);
        for (i, up) in self.ups.iter().enumerate() {
            let slot: Vec<usize> = (0..b).map(|s| s * k + i).collect();
            let zi = g.select_rows(latents.z, &slot)?;
            parts.push(up.forward(g, zi)?);
        }
        let mut inputs = Vec::with_capacity(answers.len());
        for a in answers.chunks(len_a) {
            inputs.push(bos);
            inputs.extend_from_slice(&a[..len_a - 1]);
        }
        let wte = g.param(self.decoder.wte);
        parts.push(g.select_rows(wte, &inputs)?);
        let stacked = g.concat_rows(&parts)?;
        let x = if b == 1 {
            stacked
        } else {
            let order: Vec<usize> = (0..b)
                .flat_map(|s| (0..k).map(move |i| i * b + s).chain((0..len_a).map(move |j| k * b + s * len_a + j)))
                .collect();
            g.select_rows(stacked, &order)?
        };
        let wpe = g.param(self.decoder.wpe);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
        let pos = g.select_rows(wpe, &positions)?;
        let x = g.add(x, pos)?;
        let (hidden, _) = self.decoder.stack.forward(g, x, b, &mut rng)?;
        let logits = g.matmul_bt(hidden, wte)?;
        let mut targets = vec![0; b * len];
        let mut mask = vec![false; b * len];
        for (s, a) in answers.chunks(len_a).enumerate() {
            for (j, &t) in a.iter().enumerate() {
                targets[s * len + k + j] = t;
                mask[s * len + k + j] = true;
            }
        }
        let loss = g.cross_entropy_masked(logits, &targets, &mask)?;
        Ok(Reconstruction { loss, logits, targets, mask })
    }

    /// Reconstruction loss: mean NLL over answer tokens.
    pub fn reconstruct_response(&self, g: &mut Graph, latents: LatentPlan, answers: &[usize], bos: usize, rng: DropoutRng) -> Result<Var> {
        Ok(self.reconstruct(g, latents, answers, bos, rng)?.loss)
    }

    /// Applies the shared predictor to the hidden states at `plan_rows`.
    pub fn predict_latents(&self, g: &mut Graph, hidden: Var, plan_rows: &[usize]) -> Result<Var> {
        let (t, _) = g.value(hidden).dims2()?;
        if let Some(&bad) = plan_rows.iter().find(|&&p| p >= t) {
            return Err(Error::Shape(format!("plan position {bad} outside {t} hidden states")));
        }
        let h = g.select_rows(hidden, plan_rows)?;
        self.predictor.forward(g, h)
    }

    /// The joint objective averaged over a batch: the prediction term is
    /// summed over the `k` rows of each sequence, then averaged.
    pub fn losses(
        &self,
        g: &mut Graph,
        lm: &LanguageModel,
        batch: &PlannedBatch,
        bos: usize,
        include_prefix: bool,
        mut rng: DropoutRng,
    ) -> Result<SemformerLosses> {
        if batch.k != self.config.k {
            return Err(Error::Config(format!("sequence has {} planning tokens, config expects {}", batch.k, self.config.k)));
        }
        let out = lm.forward_batch(g, &batch.tokens, batch.segments, rng.as_deref_mut())?;
        let (targets, mask) = batch.lm_targets(include_prefix);
        let lm_loss = g.cross_entropy_masked(out.logits, targets, mask)?;
        let latents = self.encode_response_latents(g, lm, &batch.answers, batch.segments, rng.as_deref_mut())?;
        let ae = self.reconstruct_response(g, latents, &batch.answers, bos, rng.as_deref_mut())?;
        let predicted = self.predict_latents(g, out.hidden, &batch.plan_rows())?;
        let target = if self.config.rp_target_stop_grad { g.detach(latents.z) } else { latents.z };
        let rp_sum = g.l2_distance_sq(target, predicted)?;
        let rp = g.scale(rp_sum, 1.0 / batch.segments as Float);
        let weighted = g.scale(rp, self.config.alpha as Float);
        let total = g.sum(&[lm_loss, ae, weighted])?;
        for (name, v) in [("lm", lm_loss), ("ae", ae), ("rp", rp)] {
            if !g.value(v).all_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
        Ok(SemformerLosses { lm: lm_loss, ae, rp, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planned_sequence_arithmetic() {
        let plans = [100, 101, 102, 103];
        let s = build_planned_sequence(&[1, 2, 3], &[4, 5], &plans, 64).unwrap();
        assert_eq!(s.tokens.len(), 9);
        assert_eq!(s.lm_loss_mask.iter().filter(|&&m| !m).count(), 4);
        assert_eq!(s.plan_positions, vec![3, 4, 5, 6]);
        assert_eq!(s.answer(), &[4, 5]);
        let (targets, mask) = s.lm_targets(false);
        // Last planning position predicts the first answer token.
        assert_eq!(targets[6], 4);
        assert!(mask[6] && mask[7] && !mask[8]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        let (_, with_prefix) = s.lm_targets(true);
        assert_eq!(with_prefix.iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn zero_planning_tokens_is_the_plain_sequence() {
        let s = build_planned_sequence(&[1, 2, 3], &[4, 5], &[], 64).unwrap();
        assert_eq!(s.tokens, vec![1, 2, 3, 4, 5]);
        assert!(s.lm_loss_mask.iter().all(|&m| m));
        assert!(s.plan_positions.is_empty());
    }

    #[test]
    fn length_and_emptiness_errors() {
        assert!(matches!(build_planned_sequence(&[1; 5], &[2; 5], &[9; 4], 13), Err(Error::Length { len: 14, max: 13 })));
        assert!(build_planned_sequence(&[], &[2], &[], 10).is_err());
        assert!(build_planned_sequence(&[1], &[], &[], 10).is_err());
    }

    #[test]
    fn config_bounds() {
        let c = SemformerConfig::default();
        assert!(c.validate(64).is_ok());
        assert!(SemformerConfig { latent_dim: 64, ..c.clone() }.validate(64).is_err());
        assert!(SemformerConfig { k: 0, ..c.clone() }.validate(64).is_err());
        assert!(SemformerConfig { alpha: -1.0, ..c }.validate(64).is_err());
    }
}
