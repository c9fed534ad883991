//! Monotone piecewise-rational splines on `[-B, B]`, identity outside.
//!
//! Each row of the parameter matrix describes one scalar spline: `K` raw bin
//! widths, `K` raw bin heights, `K - 1` raw interior derivatives and, for the
//! rational-linear variant, `K` raw λ values.

use crate::error::Result;
use crate::numcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineShape {
    pub bins: usize,
    pub bound: f64,
    pub min_width: f64,
    pub min_height: f64,
    pub min_derivative: f64,
}

impl SplineShape {
    pub fn new(bins: usize, bound: f64) -> Self {
        SplineShape {
            bins,
            bound,
            min_width: 1e-3,
            min_height: 1e-3,
            min_derivative: 1e-3,
        }
    }

    /// Raw parameters per transformed coordinate.
    pub fn params_per_dim(&self, linear: bool) -> usize {
        let k = self.bins;
        if linear {
            4 * k - 1
        } else {
            3 * k - 1
        }
    }
}

/// Knot tables on the tape. `xs`, `ys`, `ds` are `[rows, K+1]`; `ws`, `hs`
/// and `lambdas` are `[rows, K]`.
pub(crate) struct Knots {
    pub xs: Var,
    pub ys: Var,
    pub ws: Var,
    pub hs: Var,
    pub ds: Var,
    pub lambdas: Option<Var>,
}

fn bin_sizes(tape: &mut Tape, raw: Var, k: usize, bound: f64, min: f64) -> Result<Var> {
    let sm = tape.softmax(raw)?;
    let total = 2.0 * bound;
    tape.affine(sm, total * (1.0 - k as f64 * min), total * min)
}

fn knot_positions(tape: &mut Tape, sizes: Var, rows: usize, k: usize, bound: f64) -> Result<Var> {
    let cs = tape.cumsum(sizes)?;
    let inner = tape.slice(cs, 1, 0, k - 1)?;
    let inner = tape.add_scalar(inner, -bound)?;
    let lo = tape.constant(Tensor::full(&[rows, 1], -bound))?;
    let hi = tape.constant(Tensor::full(&[rows, 1], bound))?;
    tape.concat(&[lo, inner, hi], 1)
}

pub(crate) fn knots(tape: &mut Tape, raw: Var, shape: &SplineShape, linear: bool) -> Result<Knots> {
    let rows = tape.shape(raw)[0];
    let k = shape.bins;
    let uw = tape.slice(raw, 1, 0, k)?;
    let uh = tape.slice(raw, 1, k, 2 * k)?;
    let ud = tape.slice(raw, 1, 2 * k, 3 * k - 1)?;

    let ws = bin_sizes(tape, uw, k, shape.bound, shape.min_width)?;
    let hs = bin_sizes(tape, uh, k, shape.bound, shape.min_height)?;
    let xs = knot_positions(tape, ws, rows, k, shape.bound)?;
    let ys = knot_positions(tape, hs, rows, k, shape.bound)?;

    // Interior derivatives equal 1 when the raw value is 0.
    let shift = ((1.0 - shape.min_derivative).exp() - 1.0).ln();
    let d = tape.add_scalar(ud, shift)?;
    let d = tape.softplus(d)?;
    let d = tape.add_scalar(d, shape.min_derivative)?;
    let one = tape.constant(Tensor::ones(&[rows, 1]))?;
    let ds = tape.concat(&[one, d, one], 1)?;

    let lambdas = if linear {
        let ul = tape.slice(raw, 1, 3 * k - 1, 4 * k - 1)?;
        let s = tape.sigmoid(ul)?;
        Some(tape.affine(s, 0.95, 0.025)?)
    } else {
        None
    };
    Ok(Knots {
        xs,
        ys,
        ws,
        hs,
        ds,
        lambdas,
    })
}

/// Bin index of `v` in a row of `K+1` increasing knots, clamped to `0..K`.
fn locate(row: &[f64], v: f64) -> usize {
    let k = row.len() - 1;
    row[1..k].iter().take_while(|&&edge| edge <= v).count().min(k - 1)
}

struct Picked {
    inside: Vec<bool>,
    x_in: Var,
    xk: Var,
    wk: Var,
    yk: Var,
    yk1: Var,
    hk: Var,
    dk: Var,
    dk1: Var,
    lk: Option<Var>,
}

fn pick_bins(tape: &mut Tape, x: Var, kn: &Knots, bound: f64, by_output: bool) -> Result<Picked> {
    let vals = tape.data(x).to_vec();
    let inside: Vec<bool> = vals.iter().map(|&v| (-bound..=bound).contains(&v)).collect();
    let table = if by_output { tape.value(kn.ys) } else { tape.value(kn.xs) };
    let width = table.shape()[1];
    let idx: Vec<usize> = vals
        .iter()
        .enumerate()
        .map(|(r, &v)| locate(&table.data()[r * width..(r + 1) * width], v))
        .collect();
    let idx1: Vec<usize> = idx.iter().map(|i| i + 1).collect();
    let x_in = tape.clamp(x, -bound, bound)?;
    Ok(Picked {
        inside,
        x_in,
        xk: tape.pick(kn.xs, &idx)?,
        wk: tape.pick(kn.ws, &idx)?,
        yk: tape.pick(kn.ys, &idx)?,
        yk1: tape.pick(kn.ys, &idx1)?,
        hk: tape.pick(kn.hs, &idx)?,
        dk: tape.pick(kn.ds, &idx)?,
        dk1: tape.pick(kn.ds, &idx1)?,
        lk: match kn.lambdas {
            Some(l) => Some(tape.pick(l, &idx)?),
            None => None,
        },
    })
}

fn finish(tape: &mut Tape, p: &Picked, x: Var, y: Var, log_deriv: Var) -> Result<(Var, Var)> {
    let n = p.inside.len();
    let zero = tape.constant(Tensor::zeros(&[n]))?;
    let y = tape.where_(&p.inside, y, x)?;
    let ld = tape.where_(&p.inside, log_deriv, zero)?;
    Ok((y, ld))
}

/// Rational-quadratic spline. `x` is `[rows]`; returns `(y, log dy/dx)`.
pub(crate) fn rq_forward(tape: &mut Tape, x: Var, kn: &Knots, bound: f64) -> Result<(Var, Var)> {
    let p = pick_bins(tape, x, kn, bound, false)?;
    let dx = tape.sub(p.x_in, p.xk)?;
    let xi = tape.div(dx, p.wk)?;
    let s = tape.div(p.hk, p.wk)?;
    let one_m = tape.affine(xi, -1.0, 1.0)?;
    let t = tape.mul(xi, one_m)?;
    let xi2 = tape.square(xi)?;

    let a = tape.mul(s, xi2)?;
    let b = tape.mul(p.dk, t)?;
    let num = tape.add(a, b)?;
    let num = tape.mul(p.hk, num)?;
    let dsum = tape.add(p.dk1, p.dk)?;
    let two_s = tape.mul_scalar(s, 2.0)?;
    let c = tape.sub(dsum, two_s)?;
    let ct = tape.mul(c, t)?;
    let den = tape.add(s, ct)?;
    let frac = tape.div(num, den)?;
    let y = tape.add(p.yk, frac)?;

    let s2 = tape.square(s)?;
    let e1 = tape.mul(p.dk1, xi2)?;
    let st = tape.mul(s, t)?;
    let e2 = tape.mul_scalar(st, 2.0)?;
    let om2 = tape.square(one_m)?;
    let e3 = tape.mul(p.dk, om2)?;
    let inner = tape.add(e1, e2)?;
    let inner = tape.add(inner, e3)?;
    let dnum = tape.mul(s2, inner)?;
    let log_dnum = tape.log(dnum)?;
    let log_den = tape.log(den)?;
    let log_den2 = tape.mul_scalar(log_den, 2.0)?;
    let ld = tape.sub(log_dnum, log_den2)?;
    finish(tape, &p, x, y, ld)
}

/// Rational-linear spline with one interior point per bin at fraction λ.
pub(crate) fn rl_forward(tape: &mut Tape, x: Var, kn: &Knots, bound: f64) -> Result<(Var, Var)> {
    let p = pick_bins(tape, x, kn, bound, false)?;
    let lk = p.lk.expect("rational-linear knots carry λ");
    let dx = tape.sub(p.x_in, p.xk)?;
    let phi = tape.div(dx, p.wk)?;
    let s = tape.div(p.hk, p.wk)?;
    let (ya, yb) = (p.yk, p.yk1);

    // w_a = 1, w_b = sqrt(d_k / d_{k+1}), w_c and y_c fix the middle point.
    let ratio = tape.div(p.dk, p.dk1)?;
    let wb = tape.sqrt(ratio)?;
    let one_m_l = tape.affine(lk, -1.0, 1.0)?;
    let a = tape.mul(lk, p.dk)?;
    let bb = tape.mul(one_m_l, wb)?;
    let bb = tape.mul(bb, p.dk1)?;
    let wc = tape.add(a, bb)?;
    let wc = tape.div(wc, s)?;
    let lwb = tape.mul(lk, wb)?;
    let yc_num_a = tape.mul(one_m_l, ya)?;
    let yc_num_b = tape.mul(lwb, yb)?;
    let yc_num = tape.add(yc_num_a, yc_num_b)?;
    let yc_den = tape.add(one_m_l, lwb)?;
    let yc = tape.div(yc_num, yc_den)?;
    let wcyc = tape.mul(wc, yc)?;

    let phi_v = tape.data(phi).to_vec();
    let lam_v = tape.data(lk).to_vec();
    let first: Vec<bool> = phi_v.iter().zip(&lam_v).map(|(f, l)| f <= l).collect();
    let second: Vec<bool> = first.iter().map(|c| !c).collect();
    let phi1 = tape.where_(&first, phi, lk)?;
    let phi2 = tape.where_(&second, phi, lk)?;

    // φ ≤ λ: g = (y_a(λ-φ) + w_c y_c φ) / ((λ-φ) + w_c φ)
    let lmp = tape.sub(lk, phi1)?;
    let wcp = tape.mul(wc, phi1)?;
    let den1 = tape.add(lmp, wcp)?;
    let n1a = tape.mul(ya, lmp)?;
    let n1b = tape.mul(wcyc, phi1)?;
    let num1 = tape.add(n1a, n1b)?;
    let g1 = tape.div(num1, den1)?;
    let dy1 = tape.sub(yc, ya)?;
    let d1 = tape.mul(wc, lk)?;
    let d1 = tape.mul(d1, dy1)?;

    // φ > λ: g = (w_c y_c(1-φ) + w_b y_b(φ-λ)) / (w_c(1-φ) + w_b(φ-λ))
    let omp = tape.affine(phi2, -1.0, 1.0)?;
    let pml = tape.sub(phi2, lk)?;
    let wc_omp = tape.mul(wc, omp)?;
    let wb_pml = tape.mul(wb, pml)?;
    let den2 = tape.add(wc_omp, wb_pml)?;
    let n2a = tape.mul(wcyc, omp)?;
    let wbyb = tape.mul(wb, yb)?;
    let n2b = tape.mul(wbyb, pml)?;
    let num2 = tape.add(n2a, n2b)?;
    let g2 = tape.div(num2, den2)?;
    let dy2 = tape.sub(yb, yc)?;
    let d2 = tape.mul(wb, wc)?;
    let d2 = tape.mul(d2, one_m_l)?;
    let d2 = tape.mul(d2, dy2)?;

    let g = tape.where_(&first, g1, g2)?;
    let dnum = tape.where_(&first, d1, d2)?;
    let den = tape.where_(&first, den1, den2)?;
    // dy/dx = dnum / den² / w_k
    let log_dnum = tape.log(dnum)?;
    let log_den = tape.log(den)?;
    let log_den2 = tape.mul_scalar(log_den, 2.0)?;
    let log_w = tape.log(p.wk)?;
    let ld = tape.sub(log_dnum, log_den2)?;
    let ld = tape.sub(ld, log_w)?;
    finish(tape, &p, x, g, ld)
}

/// Knot values for one row, read off a tape.
pub(crate) struct RowKnots<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub ds: &'a [f64],
    pub lambdas: Option<&'a [f64]>,
}

pub(crate) fn rq_inverse(y: f64, kn: &RowKnots, bound: f64) -> f64 {
    if !(-bound..=bound).contains(&y) {
        return y;
    }
    let k = locate(kn.ys, y);
    let (xk, w) = (kn.xs[k], kn.xs[k + 1] - kn.xs[k]);
    let (yk, h) = (kn.ys[k], kn.ys[k + 1] - kn.ys[k]);
    let (dk, dk1) = (kn.ds[k], kn.ds[k + 1]);
    let s = h / w;
    let dy = y - yk;
    let c2 = dk1 + dk - 2.0 * s;
    let a = h * (s - dk) + dy * c2;
    let b = h * dk - dy * c2;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c) / (-b - disc.sqrt());
    xk + xi * w
}

pub(crate) fn rl_inverse(y: f64, kn: &RowKnots, bound: f64) -> f64 {
    if !(-bound..=bound).contains(&y) {
        return y;
    }
    let lambdas = kn.lambdas.expect("rational-linear knots carry λ");
    let k = locate(kn.ys, y);
    let (xk, w) = (kn.xs[k], kn.xs[k + 1] - kn.xs[k]);
    let (ya, yb) = (kn.ys[k], kn.ys[k + 1]);
    let (dk, dk1) = (kn.ds[k], kn.ds[k + 1]);
    let lam = lambdas[k];
    let s = (yb - ya) / w;
    let wb = (dk / dk1).sqrt();
    let wc = (lam * dk + (1.0 - lam) * wb * dk1) / s;
    let yc = ((1.0 - lam) * ya + lam * wb * yb) / ((1.0 - lam) + lam * wb);
    let phi = if y <= yc {
        lam * (ya - y) / ((ya - y) + wc * (y - yc))
    } else {
        (wb * lam * (y - yb) - wc * (y - yc)) / (wb * (y - yb) - wc * (y - yc))
    };
    xk + phi * w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(raw: Vec<f64>, xs: Vec<f64>, shape: SplineShape, linear: bool) -> (Vec<f64>, Vec<f64>) {
        let rows = xs.len();
        let p = shape.params_per_dim(linear);
        let raw: Vec<f64> = (0..rows).flat_map(|_| raw.iter().cloned()).collect();
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![rows, p], raw).unwrap()).unwrap();
        let x = tape.constant(Tensor::vector(xs)).unwrap();
        let kn = knots(&mut tape, r, &shape, linear).unwrap();
        let (y, ld) = if linear {
            rl_forward(&mut tape, x, &kn, shape.bound).unwrap()
        } else {
            rq_forward(&mut tape, x, &kn, shape.bound).unwrap()
        };
        (tape.data(y).to_vec(), tape.data(ld).to_vec())
    }

    #[test]
    fn zero_raw_params_give_identity() {
        let shape = SplineShape::new(4, 3.0);
        for linear in [false, true] {
            let raw = vec![0.0; shape.params_per_dim(linear)];
            let xs = vec![-2.9, -1.0, 0.0, 0.3, 2.5];
            let (y, ld) = eval(raw, xs.clone(), shape, linear);
            for (a, b) in y.iter().zip(&xs) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert!(ld.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn outside_bound_is_exact_identity() {
        let shape = SplineShape::new(4, 3.0);
        for linear in [false, true] {
            let raw: Vec<f64> = (0..shape.params_per_dim(linear)).map(|i| (i as f64 * 0.7).sin()).collect();
            let xs = vec![-7.0, 3.5, -3.0000001, 12.0];
            let (y, ld) = eval(raw, xs.clone(), shape, linear);
            assert_eq!(y, xs);
            assert!(ld.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn monotone_inside_bound() {
        let shape = SplineShape::new(4, 3.0);
        for linear in [false, true] {
            let raw: Vec<f64> = (0..shape.params_per_dim(linear)).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
            let xs: Vec<f64> = (0..=600).map(|i| -3.0 + i as f64 * 0.01).collect();
            let (y, _) = eval(raw, xs, shape, linear);
            assert!(y.windows(2).all(|w| w[1] > w[0]));
            assert!((y[0] + 3.0).abs() < 1e-12 && (y[600] - 3.0).abs() < 1e-9);
        }
    }
}
