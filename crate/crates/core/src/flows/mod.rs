//! Normalizing-flow layers with exact log-determinants.
//!
//! Every layer maps a batch `z: [n, ℓ]` to `(z', log|det J|: [n])` on a
//! [`Tape`]. Layers with a closed-form inverse also expose it on values.

mod autoregressive;
mod coupling;
mod planar;
mod radial;
mod spline;
mod sylvester;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use autoregressive::{AutoregressiveFlow, Direction, Made};
pub use coupling::{CouplingFlow, CouplingTransform};
pub use planar::PlanarFlow;
pub use radial::RadialFlow;
pub use spline::SplineShape;
pub use sylvester::SylvesterFlow;

use crate::error::{Error, Result};
use crate::numcore::{Activation, Param, Parameterized, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Planar,
    Radial,
    Sylvester,
    Realnvp,
    Maf,
    Iaf,
    Rlnsf,
    Rqnsf,
}

impl FlowKind {
    pub const ALL: [FlowKind; 8] = [
        FlowKind::Planar,
        FlowKind::Radial,
        FlowKind::Sylvester,
        FlowKind::Realnvp,
        FlowKind::Maf,
        FlowKind::Iaf,
        FlowKind::Rlnsf,
        FlowKind::Rqnsf,
    ];

    pub const INVERTIBLE: [FlowKind; 5] = [
        FlowKind::Realnvp,
        FlowKind::Maf,
        FlowKind::Iaf,
        FlowKind::Rlnsf,
        FlowKind::Rqnsf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Planar => "planar",
            FlowKind::Radial => "radial",
            FlowKind::Sylvester => "sylvester",
            FlowKind::Realnvp => "realnvp",
            FlowKind::Maf => "maf",
            FlowKind::Iaf => "iaf",
            FlowKind::Rlnsf => "rlnsf",
            FlowKind::Rqnsf => "rqnsf",
        }
    }

    pub fn has_inverse(self) -> bool {
        FlowKind::INVERTIBLE.contains(&self)
    }

    /// Layers that benefit from reversing coordinates between them.
    fn permutes(self) -> bool {
        matches!(
            self,
            FlowKind::Realnvp | FlowKind::Maf | FlowKind::Iaf | FlowKind::Rlnsf | FlowKind::Rqnsf
        )
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlowKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown flow kind `{s}`")))
    }
}

/// Construction recipe shared by every layer of a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub dim: usize,
    pub activation: Activation,
    pub bins: usize,
    pub bound: f64,
    /// Sylvester hidden units; defaults to `min(ℓ, 16)`.
    pub sylvester_hidden: Option<usize>,
    /// Conditioner hidden widths; kind-specific default when absent.
    pub hidden: Option<Vec<usize>>,
}

impl FlowSpec {
    pub fn new(kind: FlowKind, dim: usize) -> Self {
        FlowSpec {
            kind,
            dim,
            activation: Activation::Tanh,
            bins: 4,
            bound: 3.0,
            sylvester_hidden: None,
            hidden: None,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = Some(hidden);
        self
    }

    /// Conditioner widths: two layers of ℓ for splines, one of 10ℓ for
    /// RealNVP, one of 3ℓ+1 for the autoregressive kinds.
    pub fn conditioner_hidden(&self) -> Vec<usize> {
        if let Some(h) = &self.hidden {
            return h.clone();
        }
        let l = self.dim;
        match self.kind {
            FlowKind::Rqnsf | FlowKind::Rlnsf => vec![l, l],
            FlowKind::Realnvp => vec![10 * l],
            FlowKind::Iaf | FlowKind::Maf => vec![3 * l + 1],
            _ => vec![],
        }
    }

    pub fn sylvester_m(&self) -> usize {
        self.sylvester_hidden.unwrap_or(self.dim.min(16))
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Planar(PlanarFlow),
    Radial(RadialFlow),
    Sylvester(SylvesterFlow),
    Coupling(FlowKind, CouplingFlow),
    Autoregressive(FlowKind, AutoregressiveFlow),
}

impl FlowLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: &FlowSpec, rng: &mut R) -> Result<Self> {
        let l = spec.dim;
        if l == 0 {
            return Err(Error::Contract("flow dimension must be positive".into()));
        }
        let hidden = spec.conditioner_hidden();
        let shape = SplineShape::new(spec.bins, spec.bound);
        Ok(match spec.kind {
            FlowKind::Planar => FlowLayer::Planar(PlanarFlow::new(name, l, spec.activation, rng)),
            FlowKind::Radial => FlowLayer::Radial(RadialFlow::new(name, l, rng)),
            FlowKind::Sylvester => FlowLayer::Sylvester(SylvesterFlow::new(
                name,
                l,
                spec.sylvester_m(),
                spec.activation,
                rng,
            )?),
            FlowKind::Realnvp => FlowLayer::Coupling(
                spec.kind,
                CouplingFlow::new(name, l, CouplingTransform::Affine, &hidden, shape, rng)?,
            ),
            FlowKind::Rqnsf => FlowLayer::Coupling(
                spec.kind,
                CouplingFlow::new(name, l, CouplingTransform::RationalQuadratic, &hidden, shape, rng)?,
            ),
            FlowKind::Rlnsf => FlowLayer::Coupling(
                spec.kind,
                CouplingFlow::new(name, l, CouplingTransform::RationalLinear, &hidden, shape, rng)?,
            ),
            FlowKind::Iaf => FlowLayer::Autoregressive(
                spec.kind,
                AutoregressiveFlow::new(name, l, Direction::Inverse, &hidden, rng)?,
            ),
            FlowKind::Maf => FlowLayer::Autoregressive(
                spec.kind,
                AutoregressiveFlow::new(name, l, Direction::Masked, &hidden, rng)?,
            ),
        })
    }

    pub fn kind(&self) -> FlowKind {
        match self {
            FlowLayer::Planar(_) => FlowKind::Planar,
            FlowLayer::Radial(_) => FlowKind::Radial,
            FlowLayer::Sylvester(_) => FlowKind::Sylvester,
            FlowLayer::Coupling(k, _) | FlowLayer::Autoregressive(k, _) => *k,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Planar(f) => f.dim(),
            FlowLayer::Radial(f) => f.dim(),
            FlowLayer::Sylvester(f) => f.dim(),
            FlowLayer::Coupling(_, f) => f.dim(),
            FlowLayer::Autoregressive(_, f) => f.dim(),
        }
    }

    fn set_reverse_input(&mut self, on: bool) {
        match self {
            FlowLayer::Coupling(_, f) => f.reverse_input = on,
            FlowLayer::Autoregressive(_, f) => f.reverse_input = on,
            _ => {}
        }
    }

    fn check_dim(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::Shape {
                op: "flow_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }

    fn forward_raw(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        self.check_dim(tape.shape(z))?;
        match self {
            FlowLayer::Planar(f) => f.forward(tape, z),
            FlowLayer::Radial(f) => f.forward(tape, z),
            FlowLayer::Sylvester(f) => f.forward(tape, z),
            FlowLayer::Coupling(_, f) => f.forward(tape, z),
            FlowLayer::Autoregressive(_, f) => f.forward(tape, z),
        }
    }

    /// `z: [n, ℓ]` to `(z', log|det J|: [n])`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        self.forward_raw(tape, z)
            .map_err(|e| e.in_layer(0, self.kind().name()))
    }

    /// Forward pass on values.
    pub fn forward_values(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone())?;
        let (out, ld) = self.forward(&mut tape, zv)?;
        Ok((tape.value(out).clone(), tape.data(ld).to_vec()))
    }

    /// Closed-form inverse on values, `x: [n, ℓ]`.
    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x.shape())?;
        match self {
            FlowLayer::Coupling(_, f) => f.inverse(x),
            FlowLayer::Autoregressive(_, f) => f.inverse(x),
            other => Err(Error::Capability(format!(
                "{} flow is not invertible in closed form",
                other.kind()
            ))),
        }
    }

    /// Map raw parameters to their constrained form. Planar and radial
    /// layers bake the constraint into stored values; other kinds are
    /// returned unchanged because their constraints hold by construction.
    pub fn constrain_params(&self) -> Result<FlowLayer> {
        Ok(match self {
            FlowLayer::Planar(f) => FlowLayer::Planar(f.constrained()?),
            FlowLayer::Radial(f) => FlowLayer::Radial(f.constrained()),
            other => other.clone(),
        })
    }
}

impl Parameterized for FlowLayer {
    fn params(&self) -> Vec<&Param> {
        match self {
            FlowLayer::Planar(f) => f.params(),
            FlowLayer::Radial(f) => f.params(),
            FlowLayer::Sylvester(f) => f.params(),
            FlowLayer::Coupling(_, f) => f.params(),
            FlowLayer::Autoregressive(_, f) => f.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            FlowLayer::Planar(f) => f.params_mut(),
            FlowLayer::Radial(f) => f.params_mut(),
            FlowLayer::Sylvester(f) => f.params_mut(),
            FlowLayer::Coupling(_, f) => f.params_mut(),
            FlowLayer::Autoregressive(_, f) => f.params_mut(),
        }
    }
}

/// `K` layers applied in order. `K = 0` is the identity.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    dim: usize,
}

impl FlowStack {
    /// `k` layers of one kind. Permuting layers after the first reverse
    /// their input so every coordinate gets transformed.
    pub fn new<R: Rng + ?Sized>(spec: &FlowSpec, k: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(k);
        for i in 0..k {
            let mut layer = FlowLayer::new(&format!("flow.{i}.{}", spec.kind), spec, rng)?;
            layer.set_reverse_input(i > 0 && spec.kind.permutes());
            layers.push(layer);
        }
        Ok(FlowStack { layers, dim: spec.dim })
    }

    pub fn identity(dim: usize) -> Self {
        FlowStack {
            layers: vec![],
            dim,
        }
    }

    pub fn from_layers(dim: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::Shape {
                op: "flow_stack",
                lhs: vec![dim],
                rhs: vec![bad.dim()],
            });
        }
        Ok(FlowStack { layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn has_inverse(&self) -> bool {
        self.layers.iter().all(|l| l.kind().has_inverse())
    }

    /// `z0: [n, ℓ]` to `(zK, per-layer log-dets each [n])`.
    pub fn forward(&self, tape: &mut Tape, z0: Var) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(z0);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape {
                op: "stack_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.dim],
            });
        }
        let mut z = z0;
        let mut lds = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer
                .forward_raw(tape, z)
                .map_err(|e| e.in_layer(i, layer.kind().name()))?;
            z = next;
            lds.push(ld);
        }
        Ok((z, lds))
    }

    /// Values-only forward. Log-dets are indexed `[layer][row]`.
    pub fn forward_values(&self, z0: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let z = tape.constant(z0.clone())?;
        let (zk, lds) = self.forward(&mut tape, z)?;
        let lds = lds.iter().map(|&v| tape.data(v).to_vec()).collect();
        Ok((tape.value(zk).clone(), lds))
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            z = layer.inverse(&z).map_err(|e| e.in_layer(i, layer.kind().name()))?;
        }
        Ok(z)
    }

    /// Copy with every layer's parameters constrained.
    pub fn constrain_params(&self) -> Result<FlowStack> {
        let layers = self
            .layers
            .iter()
            .map(FlowLayer::constrain_params)
            .collect::<Result<_>>()?;
        Ok(FlowStack { layers, dim: self.dim })
    }
}

impl Parameterized for FlowStack {
    fn params(&self) -> Vec<&Param> {
        self.layers.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.params_mut()
    }
}

/// Largest dimension the dense Jacobian oracle accepts.
pub const ORACLE_MAX_DIM: usize = 10;
pub const ORACLE_STEP: f64 = 1e-5;

/// `log|det J|` of `f` at `z` from a central-difference Jacobian.
pub fn numeric_logdet<F>(f: F, z: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let l = z.len();
    if l == 0 || l > ORACLE_MAX_DIM {
        return Err(Error::Contract(format!(
            "numeric log-det oracle supports 1..={ORACLE_MAX_DIM} dimensions, got {l}"
        )));
    }
    let mut jac = DMatrix::<f64>::zeros(l, l);
    for j in 0..l {
        let mut plus = z.to_vec();
        plus[j] += h;
        let mut minus = z.to_vec();
        minus[j] -= h;
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        for i in 0..l {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let det = jac.determinant();
    if !(det.abs() >= 1e-300) {
        return Err(Error::SingularJacobian { det });
    }
    Ok(det.abs().ln())
}

fn point_map<'a>(stack: &'a FlowStack) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    move |p: &[f64]| {
        let t = Tensor::new(vec![1, p.len()], p.to_vec())?;
        Ok(stack.forward_values(&t)?.0.into_data())
    }
}

pub fn numeric_logdet_layer(layer: &FlowLayer, z: &[f64]) -> Result<f64> {
    let stack = FlowStack::from_layers(layer.dim(), vec![layer.clone()])?;
    numeric_logdet(point_map(&stack), z, ORACLE_STEP)
}

pub fn numeric_logdet_stack(stack: &FlowStack, z: &[f64]) -> Result<f64> {
    numeric_logdet(point_map(stack), z, ORACLE_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numcore::softplus as softplus_f;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kind_parses_names() {
        for k in FlowKind::ALL {
            assert_eq!(k.name().parse::<FlowKind>().unwrap(), k);
        }
        assert!("glow".parse::<FlowKind>().is_err());
    }

    #[test]
    fn planar_zero_u_is_identity() {
        let mut f = PlanarFlow::new("p", 3, Activation::Tanh, &mut rng(0));
        f.u.value = Tensor::zeros(&[3]);
        f.reparameterize = false;
        let layer = FlowLayer::Planar(f);
        let z = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 0.5, 0.5, -0.5]).unwrap();
        let (out, ld) = layer.forward_values(&z).unwrap();
        assert_eq!(out, z);
        assert_eq!(ld, vec![0.0, 0.0]);
    }

    #[test]
    fn radial_zero_beta_is_identity() {
        let mut f = RadialFlow::new("r", 4, &mut rng(1)).constrained();
        f.beta.value = Tensor::scalar(0.0);
        let layer = FlowLayer::Radial(f);
        let z = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
        let (out, ld) = layer.forward_values(&z).unwrap();
        assert_eq!(out, z);
        assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planar_constraint_footnote_values() {
        // w = e1, u = -5 e1 so wᵀu = -5.
        let mut f = PlanarFlow::new("p", 2, Activation::Tanh, &mut rng(0));
        f.w.value = Tensor::vector(vec![1.0, 0.0]);
        f.u.value = Tensor::vector(vec![-5.0, 0.3]);
        let c = f.constrained().unwrap();
        let wu: f64 = c.u.value.data()[0];
        assert!((wu - (-1.0 + (1.0 + (-5f64).exp()).ln())).abs() < 1e-14);
        assert!(wu > -1.0);

        // Large wᵀu: softplus(wᵀu) ≈ wᵀu, so the correction is ≈ -w/‖w‖²
        // and wᵀû ≈ wᵀu - 1.
        f.u.value = Tensor::vector(vec![10.0, 0.3]);
        let c = f.constrained().unwrap();
        assert!((c.u.value.data()[0] - (-1.0 + softplus_f(10.0))).abs() < 1e-14);
        assert!((c.u.value.data()[0] - 9.0).abs() < 1e-4);
        assert_eq!(c.u.value.data()[1], 0.3);

        f.w.value = Tensor::zeros(&[2]);
        assert!(matches!(f.constrained(), Err(Error::DegenerateDirection)));
    }

    #[test]
    fn radial_beta_constraint() {
        let mut f = RadialFlow::new("r", 2, &mut rng(0));
        f.beta.value = Tensor::scalar(-10.0);
        let (a, b) = f.alpha_beta();
        assert!((b - (-a + 4.5399e-5)).abs() < 1e-8);
        assert!(b > -a);
    }

    #[test]
    fn non_invertible_kinds_report_capability() {
        for kind in [FlowKind::Planar, FlowKind::Radial, FlowKind::Sylvester] {
            let layer = FlowLayer::new("f", &FlowSpec::new(kind, 3), &mut rng(0)).unwrap();
            let err = layer.inverse(&Tensor::zeros(&[1, 3])).unwrap_err();
            assert!(matches!(err, Error::Capability(_)));
            assert!(err.to_string().contains("closed form"));
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let stack = FlowStack::identity(3);
        let z = Tensor::randn(&[2, 3], 1.0, &mut rng(4));
        let (zk, lds) = stack.forward_values(&z).unwrap();
        assert_eq!(zk, z);
        assert!(lds.is_empty());
        assert!(numeric_logdet_stack(&stack, &[0.3, 0.1, -0.2]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn one_dim_planar_oracle_is_log2() {
        let mut f = PlanarFlow::new("p", 1, Activation::Tanh, &mut rng(0));
        f.u.value = Tensor::vector(vec![1.0]);
        f.w.value = Tensor::vector(vec![1.0]);
        f.reparameterize = false;
        let layer = FlowLayer::Planar(f);
        let ld = numeric_logdet_layer(&layer, &[0.0]).unwrap();
        assert!((ld - 2f64.ln()).abs() < 1e-9);
        let (_, analytic) = layer.forward_values(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((analytic[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let layer = FlowLayer::new("f", &FlowSpec::new(FlowKind::Planar, 3), &mut rng(0)).unwrap();
        assert!(layer.forward_values(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn sylvester_q_is_orthonormal() {
        let f = SylvesterFlow::new("s", 7, 4, Activation::Tanh, &mut rng(5)).unwrap();
        let q = f.q().unwrap();
        let qm = DMatrix::from_row_slice(7, 4, q.data());
        let qtq = qm.transpose() * &qm;
        assert!((qtq - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn stack_errors_carry_layer_index() {
        let spec = FlowSpec::new(FlowKind::Planar, 2);
        let mut stack = FlowStack::new(&spec, 3, &mut rng(0)).unwrap();
        if let FlowLayer::Planar(f) = &mut stack.layers[2] {
            f.w.value = Tensor::zeros(&[2]);
        }
        let err = stack.forward_values(&Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 2, kind: "planar", .. }), "{err}");
    }
}
