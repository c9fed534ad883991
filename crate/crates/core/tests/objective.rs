mod common;

use common::{random_stack, ElboToy};
use flowvi::flows::FlowKind;
use flowvi::latent::{gaussian_kl, log_density, sample_latent, LatentSample};
use flowvi::model::{Example, ModelConfig, SumModel};
use flowvi::numcore::{Tape, Tensor};
use flowvi::objective::{
    beta_c_transform, corpus_stats, cross_entropy, elbo_estimate, example_loss, vi_loss, VariationalTerm,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (n, v) = (rng.random_range(1..8), rng.random_range(2..12));
        let logits = Tensor::randn(&[n, v], 3.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let mut expect = 0.0;
        for j in (0..n).filter(|&j| mask[j]) {
            let row = logits.row(j);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            expect -= row[targets[j]] - lse;
        }
        let mut tape = Tape::new();
        let l = tape.constant(logits).unwrap();
        let ce = cross_entropy(&mut tape, l, &targets, &mask).unwrap();
        assert!((tape.value(ce).item().unwrap() - expect).abs() <= 1e-10);
    }
}

#[test]
fn confident_correct_logits_have_vanishing_loss() {
    let mut data = vec![0.0; 3 * 5];
    for (j, t) in [1usize, 4, 2].iter().enumerate() {
        data[j * 5 + t] = 60.0;
    }
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::matrix(3, 5, data).unwrap()).unwrap();
    let ce = cross_entropy(&mut tape, l, &[1, 4, 2], &[true; 3]).unwrap();
    assert!(tape.value(ce).item().unwrap() < 1e-20);
}

#[test]
fn vi_loss_is_flow_density_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for kind in FlowKind::INVERTIBLE {
        let stack = random_stack(kind, 3, 2, &mut rng);
        let mu = vec![0.2, -0.4, 0.1];
        let ls = vec![-0.3, 0.2, 0.0];
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(1, 3, mu.clone()).unwrap()).unwrap();
        let s = tape.constant(Tensor::matrix(1, 3, ls.clone()).unwrap()).unwrap();
        let sample: LatentSample = sample_latent(&mut tape, m, s, &stack, &mut rng).unwrap().to_samples(&tape).remove(0);
        let sigma: Vec<f64> = ls.iter().map(|l| f64::exp(*l)).collect();
        let zk = Tensor::matrix(1, 3, sample.zk.clone()).unwrap();
        let log_qk = log_density(&stack, &mu, &sigma, &zk).unwrap()[0];
        let log_p = flowvi::latent::gaussian_logpdf(&sample.zk, &[0.0; 3], &[1.0; 3]);
        assert!((vi_loss(&sample).unwrap() - (log_qk - log_p)).abs() <= 1e-8, "{kind}");
    }
}

#[test]
fn vi_loss_converges_to_gaussian_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu = [1.0, 0.5, -0.5];
    let ls = [0.1, -0.2, 0.0];
    let n = 100_000;
    let mut tape = Tape::new();
    let rep = |v: &[f64]| Tensor::new(vec![n, 3], v.iter().cycle().take(3 * n).copied().collect()).unwrap();
    let m = tape.constant(rep(&mu)).unwrap();
    let s = tape.constant(rep(&ls)).unwrap();
    let draw = sample_latent(&mut tape, m, s, &flowvi::flows::FlowStack::identity(3), &mut rng).unwrap();
    let samples = draw.to_samples(&tape);
    let mean = samples.iter().map(|s| vi_loss(s).unwrap()).sum::<f64>() / n as f64;
    let exact = gaussian_kl(&mu, &ls);
    assert!((mean - exact).abs() <= 0.02 * exact, "{mean} vs {exact}");
}

#[test]
fn beta_c_is_symmetric_about_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (vi, beta, c) = (rng.random_range(-2.0..5.0), rng.random_range(0.0..3.0), rng.random_range(0.0..2.0));
        let a = beta_c_transform(vi, beta, c);
        let b = beta_c_transform(2.0 * c - vi, beta, c);
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(beta_c_transform(-0.3, 1.0, 0.0), 0.3);
}

fn tiny_model(rng: &mut ChaCha8Rng) -> SumModel {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 1,
        latent_dim: 4,
        inference_hidden: 8,
        flow: FlowKind::Rqnsf,
        flow_layers: 2,
        flow_hidden: Some(vec![6]),
        ..ModelConfig::default()
    };
    SumModel::new(cfg, rng).unwrap()
}

#[test]
fn total_is_ce_plus_transformed_vi() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = tiny_model(&mut rng);
    let ex = Example {
        source: vec![4, 5, 6, 7],
        target: vec![8, 9],
        bow: vec![(4, 1.0), (5, 1.0), (6, 1.0), (7, 1.0)],
    };
    for term in [
        VariationalTerm::Plain,
        VariationalTerm::BetaC { beta: 1.0, capacity: 0.1 },
        VariationalTerm::BetaC { beta: 2.5, capacity: 3.0 },
    ] {
        let mut tape = Tape::new();
        let (total, b) = example_loss(&mut tape, &model, &ex, term, 1, true, &mut rng).unwrap();
        assert_eq!(b.total, b.ce + b.vi_transformed);
        assert!((tape.value(total).item().unwrap() - b.total).abs() <= 1e-12);
        assert_eq!(b.kl_estimate, b.vi);
        match term {
            VariationalTerm::Plain => assert_eq!(b.total, -elbo_estimate(b.ce, b.vi)),
            VariationalTerm::BetaC { beta, capacity } => {
                assert_eq!(b.vi_transformed, beta * (b.vi - capacity).abs())
            }
        }
    }
}

#[test]
fn eval_stats_are_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(&mut rng);
    let ex = Example {
        source: vec![4, 5, 6],
        target: vec![8, 9, 10],
        bow: vec![(4, 1.0), (5, 1.0), (6, 1.0)],
    };
    let s = corpus_stats(&model, &[ex.clone(), ex]).unwrap();
    assert_eq!(s.tokens, 8);
    assert!(s.perplexity() > 1.0 && s.token_accuracy() <= 1.0);
}

#[test]
fn elbo_lower_bounds_importance_sampled_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut held = 0;
    for _ in 0..20 {
        let toy = ElboToy::random(&mut rng);
        let elbo = toy.mean_elbo(500, &mut rng);
        let ll = toy.importance_log_lik(1024, &mut rng);
        if elbo <= ll {
            held += 1;
        }
    }
    assert!(held >= 19, "{held}/20");
}
