#![allow(dead_code)]

use flowvi::flows::{FlowKind, FlowLayer, FlowSpec, FlowStack};
use flowvi::numcore::{Parameterized, Tensor};
use rand::Rng;

/// Parameter scale that keeps random layers well conditioned.
pub fn scale_for(kind: FlowKind) -> f64 {
    match kind {
        FlowKind::Planar | FlowKind::Radial | FlowKind::Sylvester => 1.0,
        _ => 0.5,
    }
}

pub fn randomize<P: Parameterized, R: Rng + ?Sized>(m: &mut P, scale: f64, rng: &mut R) {
    for p in m.params_mut() {
        p.value = Tensor::randn(p.value.shape(), scale, rng);
    }
}

/// Small conditioners keep the suite fast; the math does not depend on width.
pub fn test_spec(kind: FlowKind, dim: usize) -> FlowSpec {
    let spec = FlowSpec::new(kind, dim);
    match kind {
        FlowKind::Realnvp | FlowKind::Rqnsf | FlowKind::Rlnsf | FlowKind::Iaf | FlowKind::Maf => {
            spec.with_hidden(vec![2 * dim + 2])
        }
        _ => spec,
    }
}

pub fn random_layer<R: Rng + ?Sized>(kind: FlowKind, dim: usize, rng: &mut R) -> FlowLayer {
    let mut layer = FlowLayer::new("t", &test_spec(kind, dim), rng).unwrap();
    randomize(&mut layer, scale_for(kind), rng);
    layer
}

pub fn random_stack<R: Rng + ?Sized>(kind: FlowKind, dim: usize, k: usize, rng: &mut R) -> FlowStack {
    let mut stack = FlowStack::new(&test_spec(kind, dim), k, rng).unwrap();
    randomize(&mut stack, scale_for(kind), rng);
    stack
}

/// Weights drawn the way `Linear::new` draws them, std `gain/sqrt(fan_in)`,
/// with every layer randomized including the zero-initialized outputs.
/// Width-free, so wide conditioners stay as tame as narrow ones.
pub fn randomize_fan_in<P: Parameterized, R: Rng + ?Sized>(m: &mut P, gain: f64, rng: &mut R) {
    for p in m.params_mut() {
        let shape = p.value.shape().to_vec();
        let std = match shape.as_slice() {
            [fan_in, _] => gain / (*fan_in as f64).sqrt(),
            _ => 0.5 * gain,
        };
        p.value = Tensor::randn(&shape, std, rng);
    }
}

pub fn fan_in_stack<R: Rng + ?Sized>(kind: FlowKind, dim: usize, k: usize, gain: f64, rng: &mut R) -> FlowStack {
    let mut stack = FlowStack::new(&test_spec(kind, dim), k, rng).unwrap();
    randomize_fan_in(&mut stack, gain, rng);
    stack
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1.0)
}

/// Two-token toy likelihood `p(y | z) = softmax(z W + b)[y]` with a Gaussian
/// posterior `q = N(μ, diag σ²)` and a standard normal prior.
pub struct ElboToy {
    pub w: Tensor,
    pub b: Tensor,
    pub y: usize,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl ElboToy {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        ElboToy {
            w: Tensor::randn(&[2, 2], 1.5, rng),
            b: Tensor::randn(&[2], 1.0, rng),
            y: rng.random_range(0..2),
            mu: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            log_sigma: (0..2).map(|_| rng.random_range(-1.0..0.5)).collect(),
        }
    }

    /// Mean single-draw ELBO over `n` draws, computed with the library losses.
    pub fn mean_elbo<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        use flowvi::latent::{kl_term, sample_latent};
        use flowvi::objective::{cross_entropy, elbo_estimate};
        use flowvi::numcore::Tape;
        let mut total = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::matrix(1, 2, self.mu.clone()).unwrap()).unwrap();
            let ls = tape.constant(Tensor::matrix(1, 2, self.log_sigma.clone()).unwrap()).unwrap();
            let draw = sample_latent(&mut tape, mu, ls, &FlowStack::identity(2), rng).unwrap();
            let w = tape.constant(self.w.clone()).unwrap();
            let b = tape.constant(self.b.clone()).unwrap();
            let logits = tape.linear(draw.zk, w, Some(b)).unwrap();
            let ce = cross_entropy(&mut tape, logits, &[self.y], &[true]).unwrap();
            let vi = kl_term(&mut tape, &draw).unwrap();
            total += elbo_estimate(tape.value(ce).item().unwrap(), tape.value(vi).item().unwrap());
        }
        total / n as f64
    }

    fn log_lik(&self, z: &[f64]) -> f64 {
        let l: Vec<f64> = (0..2)
            .map(|j| z[0] * self.w.data()[j] + z[1] * self.w.data()[2 + j] + self.b.data()[j])
            .collect();
        let m = l[0].max(l[1]);
        l[self.y] - (m + ((l[0] - m).exp() + (l[1] - m).exp()).ln())
    }

    /// Importance-sampled `log p(y)` with `q` as proposal.
    pub fn importance_log_lik<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> f64 {
        use flowvi::latent::gaussian_logpdf;
        let sigma: Vec<f64> = self.log_sigma.iter().map(|l| l.exp()).collect();
        let logw: Vec<f64> = (0..samples)
            .map(|_| {
                let e = Tensor::randn(&[2], 1.0, rng);
                let z: Vec<f64> = (0..2).map(|i| self.mu[i] + sigma[i] * e.data()[i]).collect();
                self.log_lik(&z) + gaussian_logpdf(&z, &[0.0; 2], &[1.0; 2])
                    - gaussian_logpdf(&z, &self.mu, &sigma)
            })
            .collect();
        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + (logw.iter().map(|w| (w - m).exp()).sum::<f64>() / samples as f64).ln()
    }
}
