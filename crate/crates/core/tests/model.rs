use std::collections::HashSet;

use flowvi::flows::FlowKind;
use flowvi::model::{
    beam_search, bow_embedding, greedy, length_normalized, refined_gate, BeamConfig, Example, GateInit,
    LatentMode, ModelConfig, StepScorer, SumModel, Vocab, BOS, EOS, PAD,
};
use flowvi::numcore::{Parameterized, Tape, Tensor};
use flowvi::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(flow_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 2,
        latent_dim: 4,
        inference_hidden: 8,
        flow: FlowKind::Planar,
        flow_layers,
        ..ModelConfig::default()
    }
}

fn example(source: &[usize], target: &[usize]) -> Example {
    let mut bow: Vec<(usize, f64)> = Vec::new();
    for &t in source {
        match bow.iter_mut().find(|(i, _)| *i == t) {
            Some(e) => e.1 += 1.0,
            None => bow.push((t, 1.0)),
        }
    }
    bow.sort_by_key(|e| e.0);
    Example {
        source: source.to_vec(),
        target: target.to_vec(),
        bow,
    }
}

fn eval_logits(model: &SumModel, ex: &Example) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, ex, LatentMode::Mean, false, &mut rng).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn bow_embedding_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let run = |bow: &[(usize, f64)]| {
        let mut tape = Tape::new();
        let t = tape.constant(table.clone()).unwrap();
        let v = bow_embedding(&mut tape, t, bow).unwrap();
        tape.value(v).data().to_vec()
    };
    assert_eq!(run(&[(4, 1.0)]), table.row(4));
    let mid = run(&[(1, 1.0), (2, 1.0)]);
    let weighted = run(&[(1, 2.0), (2, 1.0)]);
    for k in 0..3 {
        let (a, b) = (table.row(1)[k], table.row(2)[k]);
        assert!((mid[k] - (a + b) / 2.0).abs() < 1e-15);
        assert!((weighted[k] - (2.0 * a + b) / 3.0).abs() < 1e-15);
    }
    let mut tape = Tape::new();
    let t = tape.constant(table.clone()).unwrap();
    assert!(matches!(bow_embedding(&mut tape, t, &[]), Err(Error::EmptyInput(_))));
}

/// Fuse random states with gate biases forced to the given pre-activations.
fn forced_gate(f_bias: f64, r_bias: f64) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = SumModel::new(tiny_config(0), &mut rng).unwrap();
    for (lin, b) in [(&mut model.gate.wf, f_bias), (&mut model.gate.wr, r_bias)] {
        lin.w.value.data_mut().fill(0.0);
        lin.b.as_mut().unwrap().value.data_mut().fill(b);
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
    let z = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng)).unwrap();
    let out = model.gate.forward(&mut tape, h, z).unwrap();
    (
        tape.value(out.fused).clone(),
        tape.value(h).clone(),
        tape.value(out.z_proj).clone(),
        tape.value(out.g).clone(),
    )
}

#[test]
fn gate_endpoints_are_exact() {
    let (fused, h, _, g) = forced_gate(-1000.0, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
    assert_eq!(fused, h);
    let (fused, _, z, g) = forced_gate(1000.0, 0.0);
    assert!(g.data().iter().all(|&v| v == 1.0));
    for r in 0..5 {
        assert_eq!(fused.row(r), z.row(0));
    }
}

#[test]
fn gate_hand_values() {
    let (_, _, _, g) = forced_gate(0.0, -1000.0);
    assert!(g.data().iter().all(|&v| v == 0.25));
    let (_, _, _, g) = forced_gate(0.0, 1000.0);
    assert!(g.data().iter().all(|&v| v == 0.75));
}

#[test]
fn gate_is_monotone_in_f() {
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let mut prev = refined_gate(0.0, r);
        for j in 1..=100 {
            let g = refined_gate(j as f64 / 100.0, r);
            assert!(g >= prev, "r={r} f={}", j as f64 / 100.0);
            prev = g;
        }
    }
}

fn mean_initial_gate(init: GateInit) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = SumModel::new(ModelConfig { gate_init: init, ..ModelConfig::default() }, &mut rng).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::randn(&[64, 64], 1.0, &mut rng)).unwrap();
    let z = tape.constant(Tensor::randn(&[1, 32], 1.0, &mut rng)).unwrap();
    let out = model.gate.forward(&mut tape, h, z).unwrap();
    let g = tape.value(out.g);
    g.sum() / g.numel() as f64
}

#[test]
fn initial_gate_levels() {
    let standard = mean_initial_gate(GateInit::Standard);
    let near_zero = mean_initial_gate(GateInit::NearZero);
    assert!((standard - 0.5).abs() <= 0.05, "{standard}");
    assert!((near_zero - 0.05).abs() <= 0.02, "{near_zero}");
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = SumModel::new(tiny_config(2), &mut rng).unwrap();
    let base = example(&[5, 6, 7, 8], &[9, 10, 11, 12, 13]);
    let logits = eval_logits(&model, &base);
    for j in 0..base.target.len() {
        let mut probe = base.clone();
        probe.target[j] = 20;
        let other = eval_logits(&model, &probe);
        for p in 0..=j {
            assert_eq!(logits.row(p), other.row(p), "target {j} leaked into position {p}");
        }
        assert_ne!(logits.row(j + 1), other.row(j + 1));
    }
}

#[test]
fn future_token_embeddings_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = SumModel::new(tiny_config(2), &mut rng).unwrap();
    // Distinct ids per decoder position so each embedding row belongs to one slot.
    let ex = example(&[5, 6, 7], &[20, 21, 22, 23]);
    let dec_in = ex.decoder_input();
    for j in 0..dec_in.len() - 1 {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ex, LatentMode::Mean, false, &mut rng).unwrap();
        let row = tape.slice(out.logits, 0, j, j + 1).unwrap();
        let w = tape.constant(Tensor::randn(&[1, 30], 1.0, &mut rng)).unwrap();
        let p = tape.mul(row, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ge = grads.get(&model.embed).unwrap();
        for &tok in &dec_in[j + 1..] {
            assert!(ge.row(tok).iter().all(|&v| v == 0.0), "position {j}, token {tok}");
        }
        assert!(ge.row(dec_in[j]).iter().any(|&v| v != 0.0));
    }
}

#[test]
fn closed_gate_without_flows_reduces_to_plain_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = SumModel::new(tiny_config(0), &mut rng).unwrap();
    model.gate.wf.w.value.data_mut().fill(0.0);
    model.gate.wf.b.as_mut().unwrap().value.data_mut().fill(-1000.0);
    let ex = example(&[5, 6, 7, 8], &[9, 10]);
    let fused = eval_logits(&model, &ex);
    let mut tape = Tape::new();
    let plain = model.forward_plain(&mut tape, &ex, false, &mut rng).unwrap();
    assert_eq!(&fused, tape.value(plain));
}

#[test]
fn eval_logits_are_deterministic() {
    let build = || SumModel::new(tiny_config(2), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let ex = example(&[5, 6, 7, 8], &[9, 10]);
    let (a, b) = (build(), build());
    assert_eq!(eval_logits(&a, &ex), eval_logits(&b, &ex));
    assert_eq!(eval_logits(&a, &ex), eval_logits(&a, &ex));
}

#[test]
fn parameter_names_are_unique_and_partition_is_clean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = SumModel::new(ModelConfig::default(), &mut rng).unwrap();
    let names: HashSet<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names.len(), model.params().len());
    let psi = model.variational_ids();
    let expected = model.inference.num_params() + model.flows.num_params();
    let counted: usize = model.params().iter().filter(|p| psi.contains(&p.id())).map(|p| p.value.numel()).sum();
    assert_eq!(counted, expected);
    assert!(!psi.contains(&model.embed.id()));
}

/// Scorer whose log-probs are a fixed random function of the prefix.
struct ToyScorer {
    vocab: usize,
    seed: u64,
}

impl StepScorer for ToyScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|l| l - lse).collect())
    }
}

/// Best length-normalized score over every sequence of at most `max_len` tokens.
fn exhaustive(s: &ToyScorer, max_len: usize, penalty: f64) -> (Vec<usize>, f64) {
    let mut best = (vec![], f64::NEG_INFINITY);
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let next = s.log_probs(&prefix).unwrap();
        for tok in 0..s.vocab {
            if tok == PAD || tok == BOS {
                continue;
            }
            let l = lp + next[tok];
            let score = length_normalized(l, prefix.len(), penalty);
            if tok == EOS || prefix.len() == max_len {
                let mut seq = prefix[1..].to_vec();
                if tok != EOS {
                    seq.push(tok);
                }
                if score > best.1 {
                    best = (seq, score);
                }
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((p, l));
            }
        }
    }
    best
}

#[test]
fn wide_beam_recovers_exhaustive_argmax() {
    for seed in 0..20 {
        let s = ToyScorer { vocab: 5, seed };
        for penalty in [0.0, 1.0, 2.0] {
            let (seq, score) = exhaustive(&s, 3, penalty);
            let cfg = BeamConfig {
                beam_size: 9,
                length_penalty: penalty,
                max_len: 3,
            };
            let hyp = beam_search(&s, &cfg).unwrap();
            assert_eq!(hyp.tokens, seq, "seed {seed} penalty {penalty}");
            assert!((hyp.score - score).abs() < 1e-12);
        }
    }
}

#[test]
fn single_beam_is_greedy() {
    for seed in 0..20 {
        let s = ToyScorer { vocab: 7, seed };
        let cfg = BeamConfig {
            beam_size: 1,
            length_penalty: 2.0,
            max_len: 6,
        };
        let b = beam_search(&s, &cfg).unwrap();
        let g = greedy(&s, 6).unwrap();
        assert_eq!(b.tokens, g.tokens);
        assert_eq!(b.truncated, g.truncated);
    }
}

#[test]
fn model_beam_matches_greedy_and_flags_truncation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = SumModel::new(tiny_config(2), &mut rng).unwrap();
    let ex = example(&[5, 6, 7, 8], &[9]);
    let scorer = model.scorer(&ex.source, &ex.bow).unwrap();
    let b = beam_search(&scorer, &BeamConfig { beam_size: 1, length_penalty: 2.0, max_len: 5 }).unwrap();
    let g = greedy(&scorer, 5).unwrap();
    assert_eq!(b.tokens, g.tokens);
    let d = BeamConfig::default();
    assert_eq!((d.beam_size, d.length_penalty), (4, 2.0));
    let h = model.summarize(&ex, &d).unwrap();
    assert!(h.tokens.len() <= d.max_len);
    assert!(h.truncated || h.tokens.len() < d.max_len);
}

#[test]
fn vocab_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::build(["a b c a", "b d"], 50);
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(Vocab::load(&path).unwrap(), v);
    assert_eq!(v.decode(&[BOS, v.id("a"), v.id("d"), EOS, PAD]), "a d");
}
