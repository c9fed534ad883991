//! Amortized Gaussian posterior, reparameterized sampling, flow transport and
//! the single-sample KL estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::numcore::{Activation, Mlp, Param, Parameterized, Tape, Tensor, Var};

pub const LOG_SIGMA_CLAMP: f64 = 10.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Feedforward map from the document embedding to `(μ0, log σ0)`.
#[derive(Clone, Debug)]
pub struct InferenceNet {
    pub mlp: Mlp,
    latent_dim: usize,
}

impl InferenceNet {
    /// Three tanh hidden layers of width `hidden`, dropout `dropout`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        latent_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = [input_dim, hidden, hidden, hidden, 2 * latent_dim];
        let mlp = Mlp::new("inference", &sizes, Activation::Tanh, dropout, rng)?;
        Ok(InferenceNet { mlp, latent_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `x̄: [n, e]` to `(μ0, log σ0)`, each `[n, ℓ]`, with `log σ0` clamped.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x_bar: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let out = self.mlp.forward(tape, x_bar, training, rng)?;
        let l = self.latent_dim;
        let mu = tape.slice(out, 1, 0, l)?;
        let ls = tape.slice(out, 1, l, 2 * l)?;
        let ls = tape.clamp(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
        Ok((mu, ls))
    }
}

impl Parameterized for InferenceNet {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// Value-level posterior parameters for one or more documents.
pub fn infer_posterior<R: Rng + ?Sized>(
    net: &InferenceNet,
    x_bar: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(x_bar.clone())?;
    let (mu, ls) = net.forward(&mut tape, x, training, rng)?;
    Ok((tape.value(mu).clone(), tape.value(ls).clone()))
}

/// A posterior draw recorded on a tape; all entries have `n` rows.
#[derive(Clone, Debug)]
pub struct LatentDraw {
    pub z0: Var,
    pub zk: Var,
    pub logdets: Vec<Var>,
    pub mu0: Var,
    pub log_sigma0: Var,
}

/// One posterior draw for one document, as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z0: Vec<f64>,
    pub zk: Vec<f64>,
    pub logdets: Vec<f64>,
    pub mu0: Vec<f64>,
    pub log_sigma0: Vec<f64>,
}

impl LatentDraw {
    /// Split into per-row value samples.
    pub fn to_samples(&self, tape: &Tape) -> Vec<LatentSample> {
        let shape = tape.shape(self.z0);
        let (n, l) = (shape[0], shape[1]);
        let rows = |v: Var, r: usize| tape.data(v)[r * l..(r + 1) * l].to_vec();
        (0..n)
            .map(|r| LatentSample {
                z0: rows(self.z0, r),
                zk: rows(self.zk, r),
                logdets: self.logdets.iter().map(|&v| tape.data(v)[r]).collect(),
                mu0: rows(self.mu0, r),
                log_sigma0: rows(self.log_sigma0, r),
            })
            .collect()
    }
}

/// `z0 = μ0 + σ0 ⊙ ε` with the given `ε`, then transport through the stack.
pub fn sample_latent_with_noise(
    tape: &mut Tape,
    mu0: Var,
    log_sigma0: Var,
    stack: &FlowStack,
    eps: Tensor,
) -> Result<LatentDraw> {
    let shape = tape.shape(mu0).to_vec();
    if tape.shape(log_sigma0) != shape.as_slice() || eps.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "sample_latent",
            lhs: shape,
            rhs: eps.shape().to_vec(),
        });
    }
    let eps = tape.constant(eps)?;
    let sigma = tape.exp(log_sigma0)?;
    let noise = tape.mul(sigma, eps)?;
    let z0 = tape.add(mu0, noise)?;
    let (zk, logdets) = stack.forward(tape, z0)?;
    Ok(LatentDraw {
        z0,
        zk,
        logdets,
        mu0,
        log_sigma0,
    })
}

/// Reparameterized draw with `ε ~ N(0, I)` from `rng`.
pub fn sample_latent<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu0: Var,
    log_sigma0: Var,
    stack: &FlowStack,
    rng: &mut R,
) -> Result<LatentDraw> {
    let eps = Tensor::randn(tape.shape(mu0), 1.0, rng);
    sample_latent_with_noise(tape, mu0, log_sigma0, stack, eps)
}

/// Deterministic draw with `ε = 0`, i.e. the transport of `μ0`.
pub fn mean_latent(tape: &mut Tape, mu0: Var, log_sigma0: Var, stack: &FlowStack) -> Result<LatentDraw> {
    let eps = Tensor::zeros(tape.shape(mu0));
    sample_latent_with_noise(tape, mu0, log_sigma0, stack, eps)
}

fn diag_gaussian_logpdf(tape: &mut Tape, z: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let diff = tape.sub(z, mu)?;
    let sigma = tape.exp(log_sigma)?;
    let r = tape.div(diff, sigma)?;
    let r2 = tape.square(r)?;
    let half = tape.mul_scalar(r2, 0.5)?;
    let per = tape.add(half, log_sigma)?;
    let per = tape.neg(per)?;
    let l = tape.shape(z)[1] as f64;
    let s = tape.sum_axis(per, 1)?;
    tape.add_scalar(s, -l * HALF_LOG_2PI)
}

fn std_normal_logpdf(tape: &mut Tape, z: Var) -> Result<Var> {
    let z2 = tape.square(z)?;
    let s = tape.sum_axis(z2, 1)?;
    let l = tape.shape(z)[1] as f64;
    tape.affine(s, -0.5, -l * HALF_LOG_2PI)
}

/// `log q0(z0) - Σ_k log|det J_k| - log p(zK)` per row, shape `[n]`.
pub fn kl_term(tape: &mut Tape, draw: &LatentDraw) -> Result<Var> {
    let log_q0 = diag_gaussian_logpdf(tape, draw.z0, draw.mu0, draw.log_sigma0)?;
    let log_p = std_normal_logpdf(tape, draw.zk)?;
    let mut out = tape.sub(log_q0, log_p)?;
    for &ld in &draw.logdets {
        out = tape.sub(out, ld)?;
    }
    Ok(out)
}

/// Value of [`kl_term`] for a stored sample.
pub fn kl_monte_carlo(sample: &LatentSample) -> Result<f64> {
    let l = sample.z0.len();
    let row = |v: &[f64]| Tensor::new(vec![1, l], v.to_vec());
    let mut tape = Tape::new();
    let draw = LatentDraw {
        z0: tape.constant(row(&sample.z0)?)?,
        zk: tape.constant(row(&sample.zk)?)?,
        logdets: sample
            .logdets
            .iter()
            .map(|&v| tape.constant(Tensor::vector(vec![v])))
            .collect::<Result<_>>()?,
        mu0: tape.constant(row(&sample.mu0)?)?,
        log_sigma0: tape.constant(row(&sample.log_sigma0)?)?,
    };
    let kl = kl_term(&mut tape, &draw)?;
    tape.value(kl).item()
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn gaussian_kl(mu: &[f64], log_sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .map(|(m, ls)| 0.5 * ((2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls))
        .sum()
}

pub fn gaussian_logpdf(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(x, (m, s))| {
            let r = (x - m) / s;
            -HALF_LOG_2PI - s.ln() - 0.5 * r * r
        })
        .sum()
}

/// Change-of-variables density of `x: [n, ℓ]` under the stack applied to a
/// diagonal Gaussian base `N(μ, diag σ²)`.
pub fn log_density(stack: &FlowStack, mu: &[f64], sigma: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    let z0 = stack.inverse(x)?;
    let (_, lds) = stack.forward_values(&z0)?;
    let n = x.shape()[0];
    Ok((0..n)
        .map(|r| {
            let base = gaussian_logpdf(z0.row(r), mu, sigma);
            base - lds.iter().map(|l| l[r]).sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_log_two_pi() {
        assert!((0.5 * (2.0 * std::f64::consts::PI).ln() - HALF_LOG_2PI).abs() < 1e-15);
    }

    #[test]
    fn zero_net_gives_standard_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = InferenceNet::new(5, 8, 3, 0.1, &mut rng).unwrap();
        for p in net.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let (mu, ls) = infer_posterior(&net, &x, false, &mut rng).unwrap();
        assert!(mu.data().iter().chain(ls.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identical_distributions_have_zero_kl_for_every_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = FlowStack::identity(4);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
            let ls = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
            let d = sample_latent(&mut tape, mu, ls, &stack, &mut rng).unwrap();
            let s = &d.to_samples(&tape)[0];
            assert!(kl_monte_carlo(s).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_floor_collapses_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = FlowStack::identity(3);
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let ls = tape.constant(Tensor::full(&[1, 3], -50.0)).unwrap();
        let ls = tape.clamp(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).unwrap();
        let d = sample_latent(&mut tape, mu, ls, &stack, &mut rng).unwrap();
        let s = &d.to_samples(&tape)[0];
        for (z, m) in s.z0.iter().zip(&s.mu0) {
            assert!((z - m).abs() < 1e-3);
        }
        assert_eq!(s.z0, s.zk);
        assert!(s.logdets.is_empty());
    }

    #[test]
    fn one_dim_standard_normal_density() {
        let stack = FlowStack::identity(1);
        let v = log_density(&stack, &[0.0], &[1.0], &Tensor::zeros(&[1, 1])).unwrap();
        assert!((v[0] + 0.918_938_533_204_672_8).abs() < 1e-12);
    }
}
