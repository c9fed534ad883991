use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Linear, Param, Parameterized, Tape, Var};

const GATE_WEIGHT_STD: f64 = 0.02;
/// Target mean gate value for the near-zero initialization.
pub const NEAR_ZERO_GATE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    #[default]
    Standard,
    NearZero,
}

/// `g = (1-r) f² + r (1 - (1-f)²)`.
pub fn refined_gate(f: f64, r: f64) -> f64 {
    (1.0 - r) * f * f + r * (1.0 - (1.0 - f) * (1.0 - f))
}

/// Latent fusion: projects `zK` to width `d` and mixes it into every decoder state.
#[derive(Clone, Debug)]
pub struct Gate {
    /// `ℓ → d`, no bias.
    pub wz: Linear,
    /// `2d → d` forget-style gate.
    pub wf: Linear,
    /// `2d → d` refinement gate.
    pub wr: Linear,
}

/// Tape handles for the pieces of one fusion.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub fused: Var,
    pub g: Var,
    pub f: Var,
    pub r: Var,
    pub z_proj: Var,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(d: usize, latent: usize, init: GateInit, rng: &mut R) -> Self {
        let mut gate = Gate {
            wz: Linear::new("gate.wz", latent, d, rng).without_bias(),
            wf: Linear::with_std("gate.wf", 2 * d, d, GATE_WEIGHT_STD, rng),
            wr: Linear::with_std("gate.wr", 2 * d, d, GATE_WEIGHT_STD, rng),
        };
        if init == GateInit::NearZero {
            let b = (NEAR_ZERO_GATE / (1.0 - NEAR_ZERO_GATE)).ln();
            if let Some(bias) = gate.wf.b.as_mut() {
                bias.value.data_mut().fill(b);
            }
        }
        gate
    }

    pub fn d(&self) -> usize {
        self.wz.d_out()
    }

    /// `h: [n, d]`, `zk: [1, ℓ]`.
    pub fn forward(&self, tape: &mut Tape, h: Var, zk: Var) -> Result<GateOutput> {
        let hs = tape.shape(h).to_vec();
        if hs.len() != 2 || hs[1] != self.d() || tape.shape(zk) != [1, self.wz.d_in()] {
            return Err(Error::Shape {
                op: "gate_fuse",
                lhs: hs,
                rhs: tape.shape(zk).to_vec(),
            });
        }
        let n = hs[0];
        let z_proj = self.wz.forward(tape, zk)?;
        let z_rows = tape.broadcast_to(z_proj, &[n, hs[1]])?;
        let joint = tape.concat(&[h, z_rows], 1)?;
        let f_pre = self.wf.forward(tape, joint)?;
        let f = tape.sigmoid(f_pre)?;
        let r_pre = self.wr.forward(tape, joint)?;
        let r = tape.sigmoid(r_pre)?;
        // g = (1-r) f² + r (2f - f²) = f² + 2 r f (1 - f)
        let f2 = tape.square(f)?;
        let one_minus_f = tape.affine(f, -1.0, 1.0)?;
        let rf = tape.mul(r, f)?;
        let cross = tape.mul(rf, one_minus_f)?;
        let cross = tape.mul_scalar(cross, 2.0)?;
        let g = tape.add(f2, cross)?;
        let one_minus_g = tape.affine(g, -1.0, 1.0)?;
        let keep = tape.mul(one_minus_g, h)?;
        let take = tape.mul(g, z_rows)?;
        let fused = tape.add(keep, take)?;
        Ok(GateOutput {
            fused,
            g,
            f,
            r,
            z_proj,
        })
    }
}

impl Parameterized for Gate {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.wz.params();
        v.extend(self.wf.params());
        v.extend(self.wr.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.wz.params_mut();
        v.extend(self.wf.params_mut());
        v.extend(self.wr.params_mut());
        v
    }
}
