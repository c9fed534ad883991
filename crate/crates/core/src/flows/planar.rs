use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{softplus, Activation, Param, Parameterized, Tape, Tensor, Var};

/// `f(z) = z + u h(wᵀz + b)`.
///
/// With `reparameterize` set, `u` is raw and the forward pass substitutes
/// `û = u + (softplus(wᵀu) - 1 - wᵀu) w / ‖w‖²`, which keeps `wᵀû > -1`.
#[derive(Clone, Debug)]
pub struct PlanarFlow {
    pub u: Param,
    pub w: Param,
    pub b: Param,
    pub activation: Activation,
    pub reparameterize: bool,
}

impl PlanarFlow {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, activation: Activation, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        PlanarFlow {
            u: Param::new(format!("{name}.u"), Tensor::randn(&[dim], std, rng)),
            w: Param::new(format!("{name}.w"), Tensor::randn(&[dim], std, rng)),
            b: Param::new(format!("{name}.b"), Tensor::scalar(0.0)),
            activation,
            reparameterize: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.value.numel()
    }

    fn w_norm_sq(&self) -> Result<f64> {
        let n = self.w.value.l2_norm_sq();
        if n == 0.0 {
            return Err(Error::DegenerateDirection);
        }
        Ok(n)
    }

    /// The effective `û` used by the forward pass.
    pub fn u_hat(&self) -> Result<Vec<f64>> {
        let u = self.u.value.data();
        if !self.reparameterize {
            return Ok(u.to_vec());
        }
        let w = self.w.value.data();
        let ww = self.w_norm_sq()?;
        let wu: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
        let coef = (softplus(wu) - 1.0 - wu) / ww;
        Ok(u.iter().zip(w).map(|(ui, wi)| ui + coef * wi).collect())
    }

    /// Bake `û` into `u` and switch the reparameterization off.
    pub fn constrained(&self) -> Result<Self> {
        let u_hat = self.u_hat()?;
        let mut out = self.clone();
        out.u.value = Tensor::vector(u_hat);
        out.reparameterize = false;
        Ok(out)
    }

    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.shape(z)[0];
        let dim = self.dim();
        let u = tape.param(&self.u)?;
        let w = tape.param(&self.w)?;
        let b = tape.param(&self.b)?;

        let u_hat = if self.reparameterize {
            self.w_norm_sq()?;
            let wu = tape.mul(w, u)?;
            let wu = tape.sum(wu)?;
            let sp = tape.softplus(wu)?;
            let m = tape.add_scalar(sp, -1.0)?;
            let diff = tape.sub(m, wu)?;
            let ww = tape.square(w)?;
            let ww = tape.sum(ww)?;
            let coef = tape.div(diff, ww)?;
            let corr = tape.mul(w, coef)?;
            tape.add(u, corr)?
        } else {
            u
        };

        let w_col = tape.reshape(w, &[dim, 1])?;
        let a = tape.matmul(z, w_col)?;
        let pre = tape.add(a, b)?;
        let h = self.activation.apply(tape, pre)?;
        let u_row = tape.reshape(u_hat, &[1, dim])?;
        let shift = tape.mul(h, u_row)?;
        let out = tape.add(z, shift)?;

        let h_prime = match self.activation {
            Activation::Tanh => {
                let h2 = tape.square(h)?;
                tape.affine(h2, -1.0, 1.0)?
            }
            act => {
                let d: Vec<f64> = tape.data(pre).iter().map(|&p| act.eval(p).1).collect();
                tape.constant(Tensor::new(vec![n, 1], d)?)?
            }
        };
        let wu_hat = tape.mul(w, u_hat)?;
        let wu_hat = tape.sum(wu_hat)?;
        let det = tape.mul(h_prime, wu_hat)?;
        let det = tape.add_scalar(det, 1.0)?;
        let det = tape.abs(det)?;
        let log_det = tape.log(det)?;
        let log_det = tape.reshape(log_det, &[n])?;
        Ok((out, log_det))
    }
}

impl Parameterized for PlanarFlow {
    fn params(&self) -> Vec<&Param> {
        vec![&self.u, &self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.u, &mut self.w, &mut self.b]
    }
}
