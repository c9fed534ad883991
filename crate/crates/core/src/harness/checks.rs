use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flows::FlowKind;
use crate::model::{Example, ModelConfig, SumModel};
use crate::numcore::{grad_check_params, GradReport, Parameterized};
use crate::objective::{example_loss, VariationalTerm};

/// d=8, ℓ=4, two flow layers, no dropout.
pub fn tiny_config(flow: FlowKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        latent_dim: 4,
        inference_hidden: 8,
        inference_dropout: 0.0,
        flow,
        flow_layers: 2,
        flow_hidden: Some(vec![8]),
        ..ModelConfig::default()
    }
}

/// Central-difference check of the full training loss (cross-entropy plus
/// the single-sample KL estimate) over every parameter of a tiny model.
/// The reparameterization noise is reseeded per evaluation so the loss is
/// a deterministic function of the parameters.
pub fn total_loss_grad_check(flow: FlowKind, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SumModel::new(tiny_config(flow), &mut rng)?;
    // Move flow parameters off their near-identity initialization.
    for p in model.flows.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let source: Vec<usize> = (0..6).map(|_| rng.random_range(4..20)).collect();
    let mut bow: Vec<(usize, f64)> = Vec::new();
    for &t in &source {
        match bow.iter_mut().find(|(i, _)| *i == t) {
            Some(e) => e.1 += 1.0,
            None => bow.push((t, 1.0)),
        }
    }
    bow.sort_by_key(|e| e.0);
    let ex = Example {
        source,
        target: (0..4).map(|_| rng.random_range(4..20)).collect(),
        bow,
    };
    let noise_seed = rng.random::<u64>();
    grad_check_params(
        &mut model,
        |m, tape| {
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            Ok(example_loss(tape, m, &ex, VariationalTerm::Plain, 1, true, &mut noise)?.0)
        },
        1e-5,
        None,
    )
}
