use rand::Rng;

use crate::error::Result;
use crate::numcore::{softplus, Param, Parameterized, Tape, Tensor, Var};

/// `f(z) = z + β h(α, r)(z - z_ref)` with `h = 1/(α + r)`, `r = ‖z - z_ref‖`.
///
/// With `raw` set, `alpha` and `beta` hold unconstrained values and the
/// forward pass uses `α = softplus(α̂)`, `β = -α + softplus(β̂)`.
#[derive(Clone, Debug)]
pub struct RadialFlow {
    pub z_ref: Param,
    pub alpha: Param,
    pub beta: Param,
    pub raw: bool,
}

impl RadialFlow {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        RadialFlow {
            z_ref: Param::new(format!("{name}.z_ref"), Tensor::randn(&[dim], std, rng)),
            alpha: Param::new(format!("{name}.alpha"), Tensor::randn(&[], 1.0, rng)),
            beta: Param::new(format!("{name}.beta"), Tensor::randn(&[], 1.0, rng)),
            raw: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.z_ref.value.numel()
    }

    /// Effective `(α, β)`.
    pub fn alpha_beta(&self) -> (f64, f64) {
        let a = self.alpha.value.data()[0];
        let b = self.beta.value.data()[0];
        if self.raw {
            let alpha = softplus(a);
            (alpha, -alpha + softplus(b))
        } else {
            (a, b)
        }
    }

    pub fn constrained(&self) -> Self {
        let (a, b) = self.alpha_beta();
        let mut out = self.clone();
        out.alpha.value = Tensor::scalar(a);
        out.beta.value = Tensor::scalar(b);
        out.raw = false;
        out
    }

    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.shape(z)[0];
        let dim = self.dim();
        let z_ref = tape.param(&self.z_ref)?;
        let a_raw = tape.param(&self.alpha)?;
        let b_raw = tape.param(&self.beta)?;
        let (alpha, beta) = if self.raw {
            let a = tape.softplus(a_raw)?;
            let sp = tape.softplus(b_raw)?;
            let b = tape.sub(sp, a)?;
            (a, b)
        } else {
            (a_raw, b_raw)
        };

        let diff = tape.sub(z, z_ref)?;
        let sq = tape.square(diff)?;
        let r2 = tape.sum_axis(sq, 1)?;
        let r = tape.sqrt(r2)?;
        let r = tape.reshape(r, &[n, 1])?;
        let ar = tape.add(alpha, r)?;
        let h = tape.recip(ar)?;
        let bh = tape.mul(beta, h)?;
        let shift = tape.mul(bh, diff)?;
        let out = tape.add(z, shift)?;

        // log|det| = (ℓ-1) log|1 + βh| + log|1 + αβh²|
        let t1 = tape.add_scalar(bh, 1.0)?;
        let t1 = tape.abs(t1)?;
        let t1 = tape.log(t1)?;
        let t1 = tape.mul_scalar(t1, (dim - 1) as f64)?;
        let h2 = tape.square(h)?;
        let ab = tape.mul(alpha, beta)?;
        let t2 = tape.mul(ab, h2)?;
        let t2 = tape.add_scalar(t2, 1.0)?;
        let t2 = tape.abs(t2)?;
        let t2 = tape.log(t2)?;
        let log_det = tape.add(t1, t2)?;
        let log_det = tape.reshape(log_det, &[n])?;
        Ok((out, log_det))
    }
}

impl Parameterized for RadialFlow {
    fn params(&self) -> Vec<&Param> {
        vec![&self.z_ref, &self.alpha, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.z_ref, &mut self.alpha, &mut self.beta]
    }
}
