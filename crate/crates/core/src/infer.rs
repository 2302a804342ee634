//! Incremental decoding with cached keys and values.
//!
//! Mirrors the graph forward pass of [`LanguageModel`] without recording a
//! tape, so greedy decoding costs one row per generated token.

use crate::autograd::{gelu, layer_norm_row, visible};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, softmax_in_place, Float, Tensor};
use crate::transformer::{argmax, LanguageModel, LayerNorm, Linear};

/// Keys and values of every layer for the tokens fed so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<Float>>,
    values: Vec<Vec<Float>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// A language model bound to its parameters for inference.
#[derive(Clone, Copy)]
pub struct Inference<'a> {
    store: &'a ParamStore,
    lm: &'a LanguageModel,
}

impl<'a> Inference<'a> {
    pub fn new(store: &'a ParamStore, lm: &'a LanguageModel) -> Self {
        Self { store, lm }
    }

    pub fn empty_cache(&self) -> KvCache {
        let layers = self.lm.stack.blocks.len();
        KvCache { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    fn p(&self, id: crate::params::ParamId) -> &'a [Float] {
        self.store.tensor(id).data()
    }

    fn linear(&self, l: &Linear, x: &[Float], rows: usize) -> Vec<Float> {
        let w = self.store.tensor(l.w);
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = Vec::with_capacity(rows * n);
        match l.b {
            Some(b) => (0..rows).for_each(|_| out.extend_from_slice(self.p(b))),
            None => out.resize(rows * n, 0.0),
        }
        gemm(rows, k, n, 1.0, x, (k, 1), w.data(), (n, 1), 1.0, &mut out, (n, 1));
        out
    }

    fn norm(&self, ln: &LayerNorm, x: &[Float], d: usize) -> Vec<Float> {
        let (gain, bias) = (self.p(ln.gain), self.p(ln.bias));
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; d];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            layer_norm_row(row, gain, bias, &mut xhat, o);
        }
        out
    }

    /// Feeds `tokens` after the cached context and returns their logits
    /// `[tokens.len(), vocab]`.
    pub fn extend(&self, cache: &mut KvCache, tokens: &[usize]) -> Result<Tensor> {
        let cfg = &self.lm.config;
        let (d, t, start) = (cfg.d_model, tokens.len(), cache.len);
        if t == 0 {
            return Err(Error::Degenerate("no tokens to feed".into()));
        }
        if start + t > cfg.max_seq_len {
            return Err(Error::Length { len: start + t, max: cfg.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let (wte, wpe) = (self.p(self.lm.wte), self.p(self.lm.wpe));
        let mut x = Vec::with_capacity(t * d);
        for (i, &tok) in tokens.iter().enumerate() {
            let pos = start + i;
            x.extend(wte[tok * d..(tok + 1) * d].iter().zip(&wpe[pos * d..(pos + 1) * d]).map(|(a, b)| a + b));
        }
        let heads = self.lm.stack.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as Float).sqrt();
        let tk = start + t;
        for (layer, b) in self.lm.stack.blocks.iter().enumerate() {
            let h = self.norm(&b.ln1, &x, d);
            let q = self.linear(&b.wq, &h, t);
            cache.keys[layer].extend(self.linear(&b.wk, &h, t));
            cache.values[layer].extend(self.linear(&b.wv, &h, t));
            let (keys, values) = (&cache.keys[layer], &cache.values[layer]);
            let mut att = vec![0.0; t * d];
            let mut p = vec![0.0; t * tk];
            for hd in 0..heads {
                let off = hd * dh;
                gemm(t, dh, tk, scale, &q[off..], (d, 1), &keys[off..], (1, d), 0.0, &mut p, (tk, 1));
                for (i, row) in p.chunks_mut(tk).enumerate() {
                    for (j, s) in row.iter_mut().enumerate() {
                        if !visible(true, i, j, t, tk) {
                            *s = Float::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(t, tk, dh, 1.0, &p, (tk, 1), &values[off..], (d, 1), 0.0, &mut att[off..], (d, 1));
            }
            let o = self.linear(&b.wo, &att, t);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = self.norm(&b.ln2, &x, d);
            let mut h = self.linear(&b.fc, &h, t);
            h.iter_mut().for_each(|v| *v = gelu(*v));
            let h = self.linear(&b.proj, &h, t);
            x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        }
        cache.len = tk;
        let hidden = self.norm(&self.lm.stack.ln_f, &x, d);
        let w = self.p(self.lm.head.unwrap_or(self.lm.wte));
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; t * v];
        gemm(t, d, v, 1.0, &hidden, (d, 1), w, (1, d), 0.0, &mut logits, (v, 1));
        Tensor::new(vec![t, v], logits)
    }

    /// Greedy continuation of `context`, stopping after `eos`. Tokens in
    /// `banned` are never emitted.
    pub fn greedy(&self, context: &[usize], max_new: usize, eos: usize, banned: &[usize]) -> Result<Vec<usize>> {
        let mut cache = self.empty_cache();
        self.greedy_from(&mut cache, context, max_new, eos, banned)
    }

    /// Like [`Inference::greedy`], continuing from an existing cache.
    pub fn greedy_from(&self, cache: &mut KvCache, context: &[usize], max_new: usize, eos: usize, banned: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let logits = self.extend(cache, context)?;
        let mut last = logits.row(context.len() - 1).to_vec();
        loop {
            for &b in banned {
                if let Some(l) = last.get_mut(b) {
                    *l = Float::NEG_INFINITY;
                }
            }
            let next = argmax(&last);
            out.push(next);
            if next == eos || out.len() == max_new {
                return Ok(out);
            }
            last = self.extend(cache, &[next])?.row(0).to_vec();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::transformer::ModelConfig;
    use rand::SeedableRng;

    fn model(tied: bool) -> (ParamStore, LanguageModel) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
            dropout: 0.0,
            tie_embeddings: tied,
        };
        let lm = LanguageModel::new(&mut store, "lm", cfg, &mut rng).unwrap();
        (store, lm)
    }

    #[test]
    fn cached_logits_match_the_graph() {
        for tied in [true, false] {
            let (store, lm) = model(tied);
            let tokens = [1, 4, 2, 9, 0, 3, 3];
            let mut g = Graph::new(&store);
            let full = lm.forward(&mut g, &tokens, None).unwrap();
            let inf = Inference::new(&store, &lm);
            let mut cache = inf.empty_cache();
            let mut rows = inf.extend(&mut cache, &tokens[..4]).unwrap().into_data();
            for &t in &tokens[4..] {
                rows.extend(inf.extend(&mut cache, &[t]).unwrap().into_data());
            }
            let diff = Tensor::new(vec![7, 11], rows).unwrap().max_abs_diff(g.value(full.logits));
            let tol = if size_of::<Float>() == 8 { 1e-12 } else { 1e-4 };
            assert!(diff < tol as Float, "{diff}");
        }
    }

    #[test]
    fn overflow_is_a_length_error() {
        let (store, lm) = model(true);
        let inf = Inference::new(&store, &lm);
        let mut cache = inf.empty_cache();
        inf.extend(&mut cache, &[1; 10]).unwrap();
        assert!(matches!(inf.extend(&mut cache, &[1; 3]), Err(Error::Length { len: 13, max: 12 })));
    }
}
