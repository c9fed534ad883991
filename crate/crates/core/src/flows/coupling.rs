use rand::Rng;

use super::spline::{self, RowKnots, SplineShape};
use crate::error::{Error, Result};
use crate::numcore::{Activation, Mlp, Param, Parameterized, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingTransform {
    /// `y₂ = x₂ ⊙ exp(s(x₁)) + t(x₁)`
    Affine,
    RationalQuadratic,
    RationalLinear,
}

/// Coupling layer: the first `d = ⌊ℓ/2⌋` coordinates pass through and
/// condition an elementwise bijection of the rest.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    pub transform: CouplingTransform,
    pub conditioner: Mlp,
    pub spline: SplineShape,
    /// Reverse the coordinate order before the coupling.
    pub reverse_input: bool,
    dim: usize,
}

impl CouplingFlow {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        transform: CouplingTransform,
        hidden: &[usize],
        spline: SplineShape,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Contract(format!(
                "coupling layers need at least 2 dimensions, got {dim}"
            )));
        }
        if transform != CouplingTransform::Affine && spline.bins == 0 {
            return Err(Error::Contract("spline needs at least one bin".into()));
        }
        let d = dim / 2;
        let per_dim = match transform {
            CouplingTransform::Affine => 2,
            CouplingTransform::RationalQuadratic => spline.params_per_dim(false),
            CouplingTransform::RationalLinear => spline.params_per_dim(true),
        };
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push((dim - d) * per_dim);
        let conditioner = Mlp::new(&format!("{name}.cond"), &sizes, Activation::Tanh, 0.0, rng)?.zero_last();
        Ok(CouplingFlow {
            transform,
            conditioner,
            spline,
            reverse_input: false,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.dim / 2
    }

    fn reversal(&self) -> Vec<usize> {
        (0..self.dim).rev().collect()
    }

    fn per_dim(&self) -> usize {
        self.conditioner.d_out() / (self.dim - self.split())
    }

    pub(crate) fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let n = tape.shape(z)[0];
        let (d, l) = (self.split(), self.dim);
        let z = if self.reverse_input {
            tape.permute_last(z, &self.reversal())?
        } else {
            z
        };
        let x1 = tape.slice(z, 1, 0, d)?;
        let x2 = tape.slice(z, 1, d, l)?;
        let rows = n * (l - d);
        let raw = self.conditioner.forward_eval(tape, x1)?;
        let raw = tape.reshape(raw, &[rows, self.per_dim()])?;
        let x2f = tape.reshape(x2, &[rows])?;

        let (y2, ld) = match self.transform {
            CouplingTransform::Affine => {
                let s = tape.slice(raw, 1, 0, 1)?;
                let s = tape.reshape(s, &[rows])?;
                let t = tape.slice(raw, 1, 1, 2)?;
                let t = tape.reshape(t, &[rows])?;
                let es = tape.exp(s)?;
                let y = tape.mul(x2f, es)?;
                (tape.add(y, t)?, s)
            }
            CouplingTransform::RationalQuadratic => {
                let kn = spline::knots(tape, raw, &self.spline, false)?;
                spline::rq_forward(tape, x2f, &kn, self.spline.bound)?
            }
            CouplingTransform::RationalLinear => {
                let kn = spline::knots(tape, raw, &self.spline, true)?;
                spline::rl_forward(tape, x2f, &kn, self.spline.bound)?
            }
        };
        let y2 = tape.reshape(y2, &[n, l - d])?;
        let out = tape.concat(&[x1, y2], 1)?;
        let ld = tape.reshape(ld, &[n, l - d])?;
        let ld = tape.sum_axis(ld, 1)?;
        Ok((out, ld))
    }

    pub(crate) fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let (d, l) = (self.split(), self.dim);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let x1 = tape.slice(xv, 1, 0, d)?;
        let rows = n * (l - d);
        let raw = self.conditioner.forward_eval(&mut tape, x1)?;
        let raw = tape.reshape(raw, &[rows, self.per_dim()])?;

        let y2: Vec<f64> = (0..n)
            .flat_map(|r| x.row(r)[d..].to_vec())
            .collect();
        let z2: Vec<f64> = match self.transform {
            CouplingTransform::Affine => {
                let p = tape.data(raw);
                y2.iter()
                    .enumerate()
                    .map(|(i, &y)| (y - p[2 * i + 1]) * (-p[2 * i]).exp())
                    .collect()
            }
            CouplingTransform::RationalQuadratic | CouplingTransform::RationalLinear => {
                let linear = self.transform == CouplingTransform::RationalLinear;
                let kn = spline::knots(&mut tape, raw, &self.spline, linear)?;
                let k = self.spline.bins;
                let (xs, ys, ds) = (tape.data(kn.xs), tape.data(kn.ys), tape.data(kn.ds));
                let lam = kn.lambdas.map(|v| tape.data(v));
                y2.iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let row = RowKnots {
                            xs: &xs[i * (k + 1)..(i + 1) * (k + 1)],
                            ys: &ys[i * (k + 1)..(i + 1) * (k + 1)],
                            ds: &ds[i * (k + 1)..(i + 1) * (k + 1)],
                            lambdas: lam.map(|l| &l[i * k..(i + 1) * k]),
                        };
                        if linear {
                            spline::rl_inverse(y, &row, self.spline.bound)
                        } else {
                            spline::rq_inverse(y, &row, self.spline.bound)
                        }
                    })
                    .collect()
            }
        };

        let mut out = Vec::with_capacity(n * l);
        for r in 0..n {
            let mut row: Vec<f64> = x.row(r)[..d].to_vec();
            row.extend_from_slice(&z2[r * (l - d)..(r + 1) * (l - d)]);
            if self.reverse_input {
                row.reverse();
            }
            out.extend(row);
        }
        Tensor::new(vec![n, l], out)
    }
}

impl Parameterized for CouplingFlow {
    fn params(&self) -> Vec<&Param> {
        self.conditioner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.conditioner.params_mut()
    }
}
