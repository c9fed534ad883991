use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{Param, Parameterized};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    LeakyRelu,
    Identity,
}

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Identity => Ok(x),
        }
    }

    /// Value and derivative at a point, for code that works off the tape.
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let y = x.tanh();
                (y, 1.0 - y * y)
            }
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (LEAKY_SLOPE * x, LEAKY_SLOPE)
                }
            }
            Activation::Identity => (x, 1.0),
        }
    }

    /// Supremum of the derivative over the real line.
    pub fn sup_derivative(self) -> f64 {
        1.0
    }
}

/// Affine map `x @ w + b` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        Self::with_std(name, d_in, d_out, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng)),
            b: Some(Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            b: Some(Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.b = None;
        self
    }

    pub fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.w)?;
        let b = match &self.b {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        tape.linear(x, w, b)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w];
        v.extend(self.b.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w];
        v.extend(self.b.as_mut());
        v
    }
}

/// Linear layer whose weight is multiplied by a fixed 0/1 mask.
#[derive(Clone, Debug)]
pub struct MaskedLinear {
    pub inner: Linear,
    pub mask: Tensor,
}

impl MaskedLinear {
    pub fn new(inner: Linear, mask: Tensor) -> Result<Self> {
        if mask.shape() != inner.w.value.shape() {
            return Err(Error::Shape {
                op: "masked_linear",
                lhs: inner.w.value.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        Ok(MaskedLinear { inner, mask })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.inner.w)?;
        let m = tape.constant(self.mask.clone())?;
        let wm = tape.mul(w, m)?;
        let b = match &self.inner.b {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        tape.linear(x, wm, b)
    }
}

impl Parameterized for MaskedLinear {
    fn params(&self) -> Vec<&Param> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner.params_mut()
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let g = tape.param(&self.gain)?;
        let b = tape.param(&self.bias)?;
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Feedforward stack. The activation and dropout follow every layer but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        sizes: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Contract(format!(
                "mlp needs at least input and output sizes, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            activation,
            dropout,
        })
    }

    /// Zero the final layer so the network starts out emitting zeros.
    pub fn zero_last(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            for p in last.params_mut() {
                p.value.data_mut().fill(0.0);
            }
        }
        self
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Linear::d_out)
    }

    /// Forward pass without dropout.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.activation.apply(tape, h)?;
                h = tape.dropout(h, self.dropout, training, rng)?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.params_mut()
    }
}
