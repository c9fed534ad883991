//! Reconstruction and variational losses.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::latent::kl_monte_carlo as vi_loss;
use crate::latent::kl_term;
use crate::model::{Example, LatentMode, SumModel};
use crate::numcore::{Tape, Tensor, Var};

/// How the variational term enters the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum VariationalTerm {
    /// `vi` as is: the negative ELBO.
    Plain,
    /// `β |vi - C|`.
    BetaC { beta: f64, capacity: f64 },
}

impl VariationalTerm {
    pub fn apply(self, vi: f64) -> f64 {
        match self {
            VariationalTerm::Plain => vi,
            VariationalTerm::BetaC { beta, capacity } => beta_c_transform(vi, beta, capacity),
        }
    }

    pub fn apply_var(self, tape: &mut Tape, vi: Var) -> Result<Var> {
        match self {
            VariationalTerm::Plain => Ok(vi),
            VariationalTerm::BetaC { beta, capacity } => {
                let shifted = tape.add_scalar(vi, -capacity)?;
                let a = tape.abs(shifted)?;
                tape.mul_scalar(a, beta)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub vi: f64,
    pub vi_transformed: f64,
    pub total: f64,
    pub kl_estimate: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, vi: f64, term: VariationalTerm) -> Self {
        let vi_transformed = term.apply(vi);
        LossBreakdown {
            ce,
            vi,
            vi_transformed,
            total: ce + vi_transformed,
            kl_estimate: vi,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.vi, self.vi_transformed, self.total].iter().all(|v| v.is_finite())
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            ce: s(|b| b.ce),
            vi: s(|b| b.vi),
            vi_transformed: s(|b| b.vi_transformed),
            total: s(|b| b.total),
            kl_estimate: s(|b| b.kl_estimate),
        }
    }
}

pub fn beta_c_transform(vi: f64, beta: f64, capacity: f64) -> f64 {
    beta * (vi - capacity).abs()
}

/// Single-draw ELBO, `-(ce + vi)`.
pub fn elbo_estimate(ce: f64, vi: f64) -> f64 {
    -(ce + vi)
}

/// Summed token negative log-likelihood over unmasked positions.
///
/// `logits: [n, V]`; `mask[j] = false` skips position `j`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyInput("every target position is padding".into()));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, targets)?;
    let picked = if mask.iter().all(|&m| m) {
        picked
    } else {
        let m = tape.constant(Tensor::vector(mask.iter().map(|&m| f64::from(u8::from(m))).collect()))?;
        tape.mul(picked, m)?
    };
    let s = tape.sum(picked)?;
    tape.neg(s)
}

/// Summed cross-entropy with the number of counted tokens, for per-token means.
pub fn cross_entropy_with_count(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, usize)> {
    let ce = cross_entropy(tape, logits, targets, mask)?;
    Ok((ce, mask.iter().filter(|&&m| m).count()))
}

/// Per-example loss on a tape: mean over `samples` draws of `ce + term(vi)`.
pub fn example_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &SumModel,
    example: &Example,
    term: VariationalTerm,
    samples: usize,
    training: bool,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let samples = samples.max(1);
    let labels = example.labels();
    let mask = vec![true; labels.len()];
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let out = model.forward(tape, example, LatentMode::Sample, training, rng)?;
        let ce = cross_entropy(tape, out.logits, &labels, &mask)?;
        let vi = kl_term(tape, &out.draw)?;
        let vi = tape.sum(vi)?;
        let vt = term.apply_var(tape, vi)?;
        let t = tape.add(ce, vt)?;
        parts.push(LossBreakdown::new(
            tape.value(ce).item()?,
            tape.value(vi).item()?,
            term,
        ));
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let total = tape.mul_scalar(total.expect("at least one sample"), 1.0 / samples as f64)?;
    Ok((total, LossBreakdown::mean(&parts)))
}

/// Teacher-forced evaluation with `ε = 0` and no dropout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedStats {
    pub nll: f64,
    pub tokens: usize,
    pub correct: usize,
    /// Variational term at `ε = 0`, summed over examples.
    pub kl: f64,
    pub examples: usize,
}

impl TeacherForcedStats {
    pub fn add(&mut self, other: &TeacherForcedStats) {
        self.nll += other.nll;
        self.tokens += other.tokens;
        self.correct += other.correct;
        self.kl += other.kl;
        self.examples += other.examples;
    }

    /// `exp` of the mean per-token negative log-likelihood.
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.tokens.max(1) as f64).exp()
    }

    pub fn token_accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    pub fn mean_kl(&self) -> f64 {
        self.kl / self.examples.max(1) as f64
    }
}

pub fn teacher_forced_stats(model: &SumModel, example: &Example) -> Result<TeacherForcedStats> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, example, LatentMode::Mean, false, &mut rng)?;
    let labels = example.labels();
    let mask = vec![true; labels.len()];
    let ce = cross_entropy(&mut tape, out.logits, &labels, &mask)?;
    let kl = kl_term(&mut tape, &out.draw)?;
    let logits = tape.value(out.logits);
    let v = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(j, &t)| {
            let row = &logits.data()[j * v..(j + 1) * v];
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
            arg == t
        })
        .count();
    Ok(TeacherForcedStats {
        nll: tape.value(ce).item()?,
        tokens: labels.len(),
        correct,
        kl: tape.value(kl).item()?,
        examples: 1,
    })
}

pub fn corpus_stats(model: &SumModel, examples: &[Example]) -> Result<TeacherForcedStats> {
    let mut acc = TeacherForcedStats::default();
    for ex in examples {
        acc.add(&teacher_forced_stats(model, ex)?);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_c_examples() {
        assert_eq!(beta_c_transform(0.1, 1.0, 0.1), 0.0);
        assert!((beta_c_transform(0.5, 1.0, 0.1) - 0.4).abs() < 1e-15);
        assert!((beta_c_transform(0.05, 2.0, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn elbo_examples() {
        assert_eq!(elbo_estimate(0.0, 0.0), 0.0);
        let b = LossBreakdown::new(3.0, 0.7, VariationalTerm::Plain);
        assert_eq!(b.total, -elbo_estimate(b.ce, b.vi));
    }

    #[test]
    fn uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[4, 4])).unwrap();
        let ce = cross_entropy(&mut tape, l, &[0, 1, 2, 0], &[true, true, true, false]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_pad_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(
            cross_entropy(&mut tape, l, &[0, 1], &[false, false]),
            Err(Error::EmptyInput(_))
        ));
    }
}
