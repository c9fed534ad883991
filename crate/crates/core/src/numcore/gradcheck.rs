use super::param::Parameterized;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_coord: usize,
    /// Coordinates where the one-sided slopes disagree, i.e. the function
    /// has a kink or jump within `h`. Errors there are expected.
    pub flagged: Vec<usize>,
    /// Max relative error over coordinates that were not flagged.
    pub max_rel_error_smooth: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    fn from_pairs(analytic: Vec<f64>, numeric: Vec<f64>, flagged: Vec<usize>) -> Self {
        let mut max_rel_error = 0.0;
        let mut max_rel_error_smooth: f64 = 0.0;
        let mut worst_coord = 0;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = (a - n).abs() / n.abs().max(1.0);
            if e > max_rel_error {
                max_rel_error = e;
                worst_coord = i;
            }
            if !flagged.contains(&i) {
                max_rel_error_smooth = max_rel_error_smooth.max(e);
            }
        }
        GradReport {
            max_rel_error,
            worst_coord,
            flagged,
            max_rel_error_smooth,
            analytic,
            numeric,
        }
    }
}

fn kink(f_minus: f64, f0: f64, f_plus: f64, h: f64) -> bool {
    let left = (f0 - f_minus) / h;
    let right = (f_plus - f0) / h;
    // Smooth functions differ by O(h * f''); a kink differs by O(1).
    (left - right).abs() > 1e-2 * left.abs().max(right.abs()).max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item()
}

/// Check `d fn / d x` against central differences with step `h`.
///
/// `fn` must be deterministic. Errors raised while evaluating a perturbed
/// point are wrapped with the coordinate index.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = f(&mut tape, xv)?;
    let f0 = scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |pt: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(pt)?;
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut flagged = Vec::new();
    for i in 0..x.numel() {
        let wrap = |e: Error| Error::GradCheck {
            coord: i,
            source: Box::new(e),
        };
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(plus).map_err(wrap)?;
        let fm = eval(minus).map_err(wrap)?;
        numeric.push((fp - fm) / (2.0 * h));
        if kink(fm, f0, fp, h) {
            flagged.push(i);
        }
    }
    Ok(GradReport::from_pairs(analytic, numeric, flagged))
}

/// Central-difference check over the parameters of `model`.
///
/// `coords` selects `(param_index, element_index)` pairs in `params()` order;
/// pass `None` to check every coordinate. Coordinates in the report follow
/// the order of the selection.
pub fn grad_check_params<M, F>(
    model: &mut M,
    f: F,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradReport>
where
    M: Parameterized,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let f0 = scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = model
                .params()
                .iter()
                .enumerate()
                .flat_map(|(p, param)| (0..param.value.numel()).map(move |e| (p, e)))
                .collect();
            &all
        }
    };

    let params = model.params();
    let mut analytic = Vec::with_capacity(coords.len());
    for &(p, e) in coords {
        let param = params
            .get(p)
            .ok_or_else(|| Error::Contract(format!("no parameter at index {p}")))?;
        analytic.push(grads.get(param).map_or(0.0, |g| g.data()[e]));
    }

    let eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(model, &mut tape)?;
        scalar_of(&tape, out)
    };

    let mut numeric = Vec::with_capacity(coords.len());
    let mut flagged = Vec::new();
    for (i, &(p, e)) in coords.iter().enumerate() {
        let wrap = |err: Error| Error::GradCheck {
            coord: i,
            source: Box::new(err),
        };
        let orig = model.params()[p].value.data()[e];
        model.params_mut()[p].value.data_mut()[e] = orig + h;
        let fp = eval(model);
        model.params_mut()[p].value.data_mut()[e] = orig - h;
        let fm = eval(model);
        model.params_mut()[p].value.data_mut()[e] = orig;
        let (fp, fm) = (fp.map_err(wrap)?, fm.map_err(wrap)?);
        numeric.push((fp - fm) / (2.0 * h));
        if kink(fm, f0, fp, h) {
            flagged.push(i);
        }
    }
    Ok(GradReport::from_pairs(analytic, numeric, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0, 2.5]);
        let r = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn relu_kink_is_flagged_not_fatal() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let r = grad_check(
            |t, x| {
                let y = t.relu(x)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.flagged, vec![0]);
        assert!(r.max_rel_error_smooth < 1e-9);
    }

    #[test]
    fn errors_carry_coordinate() {
        // log is only defined for x > 0; the minus probe at x = h/2 crosses zero.
        let x = Tensor::vector(vec![1.0, 5e-6]);
        let err = grad_check(
            |t, x| {
                let y = t.log(x)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck { coord: 1, .. }), "{err}");
    }

    #[test]
    fn bad_step_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }
}
