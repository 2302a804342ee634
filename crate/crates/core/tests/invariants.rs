use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semformer_core::pathstar::{build_dataset, generate_graph, parse_prefix, serialize_sample};
use semformer_core::{
    build_planned_sequence, AdamWConfig, AdamWState, Checkpoint, Float, GradStore, Graph, LanguageModel, ModelConfig,
    ParamStore, TaskSpec, Tensor, Vocabulary,
};

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.iter().take(rows * cols).map(|&x| x as Float).collect()).unwrap()
}

fn small_lm(vocab: usize, seed: u64) -> (ParamStore, LanguageModel) {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab,
        max_seq_len: 16,
        dropout: 0.0,
        tie_embeddings: true,
    };
    let mut store = ParamStore::new();
    let lm = LanguageModel::new(&mut store, "lm", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, lm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_targets_do_not_change_cross_entropy(
        logits in prop::collection::vec(-5.0f64..5.0, 30),
        targets in prop::collection::vec(0usize..5, 6),
        other in prop::collection::vec(0usize..5, 6),
        mask in prop::collection::vec(any::<bool>(), 6),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(tensor(6, 5, &logits));
        let a = g.cross_entropy_masked(x, &targets, &mask).unwrap();
        let swapped: Vec<usize> = targets.iter().zip(&other).zip(&mask).map(|((&t, &o), &m)| if m { t } else { o }).collect();
        let b = g.cross_entropy_masked(x, &swapped, &mask).unwrap();
        prop_assert_eq!(g.value(a).item().to_bits(), g.value(b).item().to_bits());
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, len in 1usize..10, causal: bool) {
        let (store, lm) = small_lm(7, seed);
        let tokens: Vec<usize> = (0..len).map(|i| (i * 3 + seed as usize) % 7).collect();
        let mut g = Graph::new(&store);
        let out = lm.forward_batch(&mut g, &tokens, 1, None).unwrap();
        for &a in &out.attn {
            let (heads, probs) = g.attention_probs(a).unwrap();
            prop_assert_eq!(probs.len(), heads * len * len);
            for (r, row) in probs.chunks(len).enumerate() {
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
                prop_assert!(row[r % len + 1..].iter().all(|&p| p == 0.0));
            }
        }
        let store2 = ParamStore::new();
        let mut g2 = Graph::new(&store2);
        let q = g2.constant(tensor(len, 4, &(0..len * 4).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()));
        let att = g2.attention(q, q, q, 2, causal).unwrap();
        let (_, probs) = g2.attention_probs(att).unwrap();
        for row in probs.chunks(len) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn earlier_logits_ignore_later_tokens(seed in 0u64..1000, len in 2usize..12, cut in 1usize..11, fill in 0usize..7) {
        let cut = cut.min(len - 1);
        let (store, lm) = small_lm(7, seed);
        let a: Vec<usize> = (0..len).map(|i| (i * 5 + seed as usize) % 7).collect();
        let mut b = a.clone();
        for t in &mut b[cut..] {
            *t = (*t + fill + 1) % 7;
        }
        let mut g = Graph::new(&store);
        let la = lm.forward_batch(&mut g, &a, 1, None).unwrap().logits;
        let lb = lm.forward_batch(&mut g, &b, 1, None).unwrap().logits;
        let (ta, tb) = (g.value(la), g.value(lb));
        for r in 0..cut {
            prop_assert_eq!(ta.row(r), tb.row(r));
        }
    }

    #[test]
    fn planned_sequence_layout(
        prefix in prop::collection::vec(0usize..20, 1..15),
        answer in prop::collection::vec(0usize..20, 1..8),
        k in 0usize..6,
    ) {
        let plans: Vec<usize> = (100..100 + k).collect();
        let len = prefix.len() + k + answer.len();
        let s = build_planned_sequence(&prefix, &answer, &plans, len).unwrap();
        prop_assert_eq!(s.tokens.len(), len);
        prop_assert_eq!(s.n, prefix.len());
        prop_assert_eq!(&s.plan_positions, &(prefix.len()..prefix.len() + k).collect::<Vec<_>>());
        prop_assert_eq!(&s.tokens[..s.n], &prefix[..]);
        prop_assert_eq!(&s.tokens[s.n + k..], &answer[..]);
        for (t, &m) in s.tokens.iter().zip(&s.lm_loss_mask) {
            prop_assert_eq!(m, !plans.contains(t));
        }
        prop_assert!(build_planned_sequence(&prefix, &answer, &plans, len - 1).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged(seed in 0u64..1000, wd in 0.0f64..0.5) {
        let (mut store, lm) = small_lm(5, seed);
        let before = store.clone();
        let mut adam = AdamWState::new(AdamWConfig { lr: 0.0, warmup_steps: 0, weight_decay: wd as Float, ..AdamWConfig::default() }, &store);
        for _ in 0..3 {
            let mut grads = GradStore::new(&store);
            {
                let mut g = Graph::new(&store);
                let out = lm.forward_batch(&mut g, &[1, 2, 3, 4], 1, None).unwrap();
                let loss = g.cross_entropy_masked(out.logits, &[2, 3, 4, 0], &[true; 4]).unwrap();
                g.backward_into(loss, &mut grads, 1.0).unwrap();
            }
            adam.step(&mut store, &grads).unwrap();
        }
        for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
            prop_assert!(a.tensor == b.tensor, "{} moved", a.name);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000) {
        let (store, _) = small_lm(6, seed);
        let mut ckpt = Checkpoint::new(format!("{seed:016x}"), serde_json::json!({"seed": seed}), serde_json::json!({"step": 3}));
        ckpt.push_model(&store, None);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.config_hash, &ckpt.config_hash);
        prop_assert_eq!(&back.config, &ckpt.config);
        prop_assert_eq!(&back.state, &ckpt.state);
        prop_assert!(back.tensors == ckpt.tensors);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn serialized_prefix_parses_back_to_the_graph(seed in 0u64..10_000, d in 1usize..6, l in 2usize..7) {
        let task = TaskSpec::new(d, l, None).unwrap();
        let vocab = Vocabulary::new(task.n_values, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = generate_graph(task, &mut rng).unwrap();
        let s = serialize_sample(&graph, &mut rng, &vocab);
        let parsed = parse_prefix(&s.prefix, &vocab).unwrap();
        prop_assert_eq!(&parsed.edges, &s.edge_order);
        let mut edges: Vec<(usize, usize)> = graph.paths.iter().flat_map(|p| p.windows(2).map(|w| (w[0], w[1]))).collect();
        let mut got = parsed.edges.clone();
        edges.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, edges);
        prop_assert_eq!(parsed.start, graph.center());
        prop_assert_eq!(parsed.target, *graph.paths[graph.target_path].last().unwrap());
        prop_assert_eq!(s.answer.last(), Some(&vocab.eos()));
    }

    #[test]
    fn train_and_test_prefixes_are_disjoint(seed in 0u64..1000, n_train in 1usize..300, n_test in 1usize..100) {
        let task = TaskSpec::new(2, 3, None).unwrap();
        let (train, test, manifest) = build_dataset(task, n_train, n_test, seed).unwrap();
        prop_assert_eq!(train.len(), n_train);
        prop_assert_eq!(test.len(), n_test);
        let seen: HashSet<&[usize]> = train.iter().map(|r| r.prefix.as_slice()).collect();
        let mut test_seen = HashSet::new();
        for r in &test {
            prop_assert!(!seen.contains(r.prefix.as_slice()));
            prop_assert!(test_seen.insert(r.prefix.as_slice()));
        }
        let (_, _, again) = build_dataset(task, n_train, n_test, seed).unwrap();
        prop_assert_eq!(manifest.dataset_hash, again.dataset_hash);
    }
}
