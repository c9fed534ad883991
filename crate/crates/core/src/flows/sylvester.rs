use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Activation, Param, Parameterized, Tape, Tensor, Var};

/// `f(z) = z + Q R h(R̃ Qᵀ z + b)` with `M` hidden units.
///
/// `Q` is the first `M` columns of a product of `M` Householder reflections,
/// so its columns are orthonormal for any parameter values. `R` and `R̃` are
/// upper triangular; their diagonals pass through `tanh`, which keeps
/// `R̃ᵢᵢ Rᵢᵢ ∈ (-1, 1)` and the map invertible for activations with `sup h' = 1`.
#[derive(Clone, Debug)]
pub struct SylvesterFlow {
    /// Householder vectors, one per row: `[M, ℓ]`.
    pub householder: Param,
    pub r_upper: Param,
    pub r_diag: Param,
    pub rt_upper: Param,
    pub rt_diag: Param,
    pub b: Param,
    pub activation: Activation,
}

impl SylvesterFlow {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        m: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 || m > dim {
            return Err(Error::Contract(format!(
                "sylvester hidden units must be in 1..={dim}, got {m}"
            )));
        }
        Ok(SylvesterFlow {
            householder: Param::new(format!("{name}.householder"), Tensor::randn(&[m, dim], 1.0, rng)),
            r_upper: Param::new(format!("{name}.r_upper"), Tensor::randn(&[m, m], 0.1, rng)),
            r_diag: Param::new(format!("{name}.r_diag"), Tensor::randn(&[m], 0.1, rng)),
            rt_upper: Param::new(format!("{name}.rt_upper"), Tensor::randn(&[m, m], 0.1, rng)),
            rt_diag: Param::new(format!("{name}.rt_diag"), Tensor::randn(&[m], 0.1, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[m])),
            activation,
        })
    }

    pub fn dim(&self) -> usize {
        self.householder.value.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.householder.value.shape()[0]
    }

    /// `Q` as an `[ℓ, M]` tensor.
    pub fn q(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let q = self.q_var(&mut tape)?;
        Ok(tape.value(q).clone())
    }

    fn q_var(&self, tape: &mut Tape) -> Result<Var> {
        let (l, m) = (self.dim(), self.hidden());
        let mut e = Tensor::zeros(&[l, m]);
        for i in 0..m {
            e.data_mut()[i * m + i] = 1.0;
        }
        let mut y = tape.constant(e)?;
        let v = tape.param(&self.householder)?;
        // Q = H_1 ⋯ H_M E, so the last reflection applies first.
        for k in (0..m).rev() {
            let vk = tape.slice(v, 0, k, k + 1)?;
            let v_col = tape.reshape(vk, &[l, 1])?;
            let vty = tape.matmul(vk, y)?;
            let outer = tape.matmul(v_col, vty)?;
            let sq = tape.square(vk)?;
            let nn = tape.sum(sq)?;
            let inv = tape.recip(nn)?;
            let scale = tape.mul_scalar(inv, 2.0)?;
            let step = tape.mul(outer, scale)?;
            y = tape.sub(y, step)?;
        }
        Ok(y)
    }

    fn triangular(&self, tape: &mut Tape, upper: &Param, diag: &Param) -> Result<(Var, Var)> {
        let m = self.hidden();
        let mut mask = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in i + 1..m {
                mask.data_mut()[i * m + j] = 1.0;
            }
        }
        let mask = tape.constant(mask)?;
        let eye = tape.constant(Tensor::eye(m))?;
        let u = tape.param(upper)?;
        let d = tape.param(diag)?;
        let d = tape.tanh(d)?;
        let strict = tape.mul(u, mask)?;
        let dm = tape.mul(eye, d)?;
        Ok((tape.add(strict, dm)?, d))
    }

    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.shape(z)[0];
        let q = self.q_var(tape)?;
        let (r, r_d) = self.triangular(tape, &self.r_upper, &self.r_diag)?;
        let (rt, rt_d) = self.triangular(tape, &self.rt_upper, &self.rt_diag)?;
        let b = tape.param(&self.b)?;

        // Row form: pre = z Q R̃ᵀ + b, z' = z + h(pre) Rᵀ Qᵀ.
        let zq = tape.matmul(z, q)?;
        let rt_t = tape.transpose(rt)?;
        let pre = tape.matmul(zq, rt_t)?;
        let pre = tape.add(pre, b)?;
        let h = self.activation.apply(tape, pre)?;
        let r_t = tape.transpose(r)?;
        let q_t = tape.transpose(q)?;
        let hr = tape.matmul(h, r_t)?;
        let shift = tape.matmul(hr, q_t)?;
        let out = tape.add(z, shift)?;

        let h_prime = match self.activation {
            Activation::Tanh => {
                let h2 = tape.square(h)?;
                tape.affine(h2, -1.0, 1.0)?
            }
            act => {
                let d: Vec<f64> = tape.data(pre).iter().map(|&p| act.eval(p).1).collect();
                tape.constant(Tensor::new(vec![n, self.hidden()], d)?)?
            }
        };
        let prod = tape.mul(r_d, rt_d)?;
        let det = tape.mul(h_prime, prod)?;
        let det = tape.add_scalar(det, 1.0)?;
        let det = tape.abs(det)?;
        let log_det = tape.log(det)?;
        let log_det = tape.sum_axis(log_det, 1)?;
        Ok((out, log_det))
    }
}

impl Parameterized for SylvesterFlow {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.householder,
            &self.r_upper,
            &self.r_diag,
            &self.rt_upper,
            &self.rt_diag,
            &self.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.householder,
            &mut self.r_upper,
            &mut self.r_diag,
            &mut self.rt_upper,
            &mut self.rt_diag,
            &mut self.b,
        ]
    }
}
