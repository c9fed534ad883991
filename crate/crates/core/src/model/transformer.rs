//! Pre-norm attention blocks operating on one sequence `[n, d]` at a time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{LayerNorm, Linear, Param, Parameterized, Tape, Tensor, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4;
const MASKED: f64 = -1e9;

/// Tanh approximation of GELU, composed from tape primitives.
pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    let x2 = tape.square(x)?;
    let x3 = tape.mul(x2, x)?;
    let cubic = tape.mul_scalar(x3, 0.044_715)?;
    let inner = tape.add(x, cubic)?;
    let inner = tape.mul_scalar(inner, GELU_C)?;
    let t = tape.tanh(inner)?;
    let half = tape.affine(t, 0.5, 0.5)?;
    tape.mul(x, half)
}

/// Fixed sinusoidal position table `[n, d]`.
pub fn positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * rate;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(&format!("{name}.q"), d, d, rng),
            k: Linear::new(&format!("{name}.k"), d, d, rng),
            v: Linear::new(&format!("{name}.v"), d, d, rng),
            o: Linear::new(&format!("{name}.o"), d, d, rng),
            heads,
        })
    }

    /// `query: [nq, d]` attends over `memory: [nk, d]`.
    pub fn forward(&self, tape: &mut Tape, query: Var, memory: Var, causal: bool) -> Result<Var> {
        let d = tape.shape(query)[1];
        let (nq, nk) = (tape.shape(query)[0], tape.shape(memory)[0]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, memory)?;
        let v = self.v.forward(tape, memory)?;
        let mask = if causal {
            if nq != nk {
                return Err(Error::Shape {
                    op: "causal_attention",
                    lhs: vec![nq, d],
                    rhs: vec![nk, d],
                });
            }
            Some(tape.constant(causal_mask(nq))?)
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = tape.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = tape.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.mul_scalar(s, scale)?;
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        self.o.forward(tape, cat)
    }
}

impl Parameterized for Attention {
    fn params(&self) -> Vec<&Param> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(&format!("{name}.up"), d, hidden, rng),
            down: Linear::new(&format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = gelu(tape, h)?;
        let h = tape.dropout(h, dropout, training, rng)?;
        self.down.forward(tape, h)
    }
}

impl Parameterized for FeedForward {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.up.params_mut();
        v.extend(self.down.params_mut());
        v
    }
}

/// `x + drop(sublayer(x))`.
fn residual<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    y: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let y = tape.dropout(y, dropout, training, rng)?;
    tape.add(x, y)
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderBlock {
            ln_attn: LayerNorm::new(&format!("{name}.ln_attn"), d),
            attn: Attention::new(&format!("{name}.attn"), d, heads, rng)?,
            ln_ff: LayerNorm::new(&format!("{name}.ln_ff"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, ffn, rng),
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.ln_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n, false)?;
        let x = residual(tape, x, a, dropout, training, rng)?;
        let n = self.ln_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n, dropout, training, rng)?;
        residual(tape, x, f, dropout, training, rng)
    }
}

impl Parameterized for EncoderBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.ln_attn.params();
        v.extend(self.attn.params());
        v.extend(self.ln_ff.params());
        v.extend(self.ff.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln_attn.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln_ff.params_mut());
        v.extend(self.ff.params_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, heads: usize, ffn: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(&format!("{name}.ln_self"), d),
            self_attn: Attention::new(&format!("{name}.self"), d, heads, rng)?,
            ln_cross: LayerNorm::new(&format!("{name}.ln_cross"), d),
            cross_attn: Attention::new(&format!("{name}.cross"), d, heads, rng)?,
            ln_ff: LayerNorm::new(&format!("{name}.ln_ff"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, ffn, rng),
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        memory: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.ln_self.forward(tape, x)?;
        let a = self.self_attn.forward(tape, n, n, true)?;
        let x = residual(tape, x, a, dropout, training, rng)?;
        let n = self.ln_cross.forward(tape, x)?;
        let c = self.cross_attn.forward(tape, n, memory, false)?;
        let x = residual(tape, x, c, dropout, training, rng)?;
        let n = self.ln_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n, dropout, training, rng)?;
        residual(tape, x, f, dropout, training, rng)
    }
}

impl Parameterized for DecoderBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.ln_self.params();
        v.extend(self.self_attn.params());
        v.extend(self.ln_cross.params());
        v.extend(self.cross_attn.params());
        v.extend(self.ln_ff.params());
        v.extend(self.ff.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.ln_self.params_mut();
        v.extend(self.self_attn.params_mut());
        v.extend(self.ln_cross.params_mut());
        v.extend(self.cross_attn.params_mut());
        v.extend(self.ln_ff.params_mut());
        v.extend(self.ff.params_mut());
        v
    }
}
