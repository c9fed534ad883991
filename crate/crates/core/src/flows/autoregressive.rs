use rand::Rng;

use crate::error::Result;
use crate::numcore::{Activation, Linear, MaskedLinear, Param, Parameterized, Tape, Tensor, Var};

/// Masked network producing `(μ, α)` where output `i` depends only on
/// inputs `< i`.
#[derive(Clone, Debug)]
pub struct Made {
    pub hidden: Vec<MaskedLinear>,
    pub out: MaskedLinear,
    pub activation: Activation,
    dim: usize,
}

fn mask(rows: &[usize], cols: &[usize], strict: bool) -> Tensor {
    let mut m = Tensor::zeros(&[rows.len(), cols.len()]);
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            let ok = if strict { cj > ri } else { cj >= ri };
            if ok {
                m.data_mut()[i * cols.len() + j] = 1.0;
            }
        }
    }
    m
}

impl Made {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let in_deg: Vec<usize> = (1..=dim).collect();
        let span = dim.saturating_sub(1).max(1);
        let mut prev = in_deg.clone();
        let mut layers = Vec::with_capacity(hidden.len());
        for (i, &h) in hidden.iter().enumerate() {
            let deg: Vec<usize> = (0..h).map(|k| k % span + 1).collect();
            let lin = Linear::new(&format!("{name}.h{i}"), prev.len(), h, rng);
            layers.push(MaskedLinear::new(lin, mask(&prev, &deg, false))?);
            prev = deg;
        }
        let out_deg: Vec<usize> = in_deg.iter().chain(&in_deg).cloned().collect();
        let lin = Linear::zeros(&format!("{name}.out"), prev.len(), 2 * dim);
        let out = MaskedLinear::new(lin, mask(&prev, &out_deg, true))?;
        Ok(Made {
            hidden: layers,
            out,
            activation: Activation::Tanh,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `x: [n, ℓ]` to `(μ, α)`, each `[n, ℓ]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(tape, h)?;
            h = self.activation.apply(tape, h)?;
        }
        let o = self.out.forward(tape, h)?;
        let mu = tape.slice(o, 1, 0, self.dim)?;
        let alpha = tape.slice(o, 1, self.dim, 2 * self.dim)?;
        Ok((mu, alpha))
    }

    fn eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (mu, alpha) = self.forward(&mut tape, xv)?;
        Ok((tape.value(mu).clone(), tape.value(alpha).clone()))
    }
}

impl Parameterized for Made {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// IAF: `x_i = u_i e^{α_i} + μ_i` with `μ, α` functions of `u_{<i}`.
    /// Parallel forward, sequential inverse.
    Inverse,
    /// MAF: same update with `μ, α` functions of `x_{<i}`.
    /// Sequential forward, parallel inverse.
    Masked,
}

#[derive(Clone, Debug)]
pub struct AutoregressiveFlow {
    pub made: Made,
    pub direction: Direction,
    pub reverse_input: bool,
}

impl AutoregressiveFlow {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        direction: Direction,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AutoregressiveFlow {
            made: Made::new(&format!("{name}.made"), dim, hidden, rng)?,
            direction,
            reverse_input: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.made.dim()
    }

    fn reversal(&self) -> Vec<usize> {
        (0..self.dim()).rev().collect()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let z = if self.reverse_input {
            tape.permute_last(z, &self.reversal())?
        } else {
            z
        };
        let (out, alpha) = match self.direction {
            Direction::Inverse => {
                let (mu, alpha) = self.made.forward(tape, z)?;
                let e = tape.exp(alpha)?;
                let x = tape.mul(z, e)?;
                (tape.add(x, mu)?, alpha)
            }
            Direction::Masked => {
                // After pass i the first i coordinates are exact, so ℓ passes
                // reproduce the recursion; α from the last pass is exact too.
                let shape = tape.shape(z).to_vec();
                let mut x = tape.constant(Tensor::zeros(&shape))?;
                let mut alpha = x;
                for _ in 0..self.dim() {
                    let (mu, a) = self.made.forward(tape, x)?;
                    let e = tape.exp(a)?;
                    let y = tape.mul(z, e)?;
                    x = tape.add(y, mu)?;
                    alpha = a;
                }
                (x, alpha)
            }
        };
        let ld = tape.sum_axis(alpha, 1)?;
        Ok((out, ld))
    }

    pub(crate) fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        let undo = |mu: &Tensor, alpha: &Tensor| -> Vec<f64> {
            x.data()
                .iter()
                .zip(mu.data().iter().zip(alpha.data()))
                .map(|(&xi, (&m, &a))| (xi - m) * (-a).exp())
                .collect()
        };
        let u = match self.direction {
            Direction::Masked => {
                let (mu, alpha) = self.made.eval(x)?;
                Tensor::new(x.shape().to_vec(), undo(&mu, &alpha))?
            }
            Direction::Inverse => {
                let mut u = Tensor::zeros(x.shape());
                for _ in 0..self.dim() {
                    let (mu, alpha) = self.made.eval(&u)?;
                    u = Tensor::new(x.shape().to_vec(), undo(&mu, &alpha))?;
                }
                u
            }
        };
        if !self.reverse_input {
            return Ok(u);
        }
        let l = self.dim();
        let mut out = u.into_data();
        for row in out.chunks_mut(l) {
            row.reverse();
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

impl Parameterized for AutoregressiveFlow {
    fn params(&self) -> Vec<&Param> {
        self.made.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.made.params_mut()
    }
}
