use serde::{Deserialize, Serialize};

use super::StepLog;
use crate::numcore::Tensor;

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        base_lr * (step as f64 / warmup_steps as f64)
    } else if total_steps == warmup_steps {
        base_lr
    } else {
        base_lr * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Rescales in place so the global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// True iff the last `patience` values are all at least the best value before them.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best = history[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    history[split..].iter().all(|&v| v >= best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub collapsed: bool,
    /// Mean KL estimate over the last `window` steps.
    pub final_window_mean: f64,
    pub window: usize,
    pub threshold: f64,
}

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.02;

/// Flags collapse when the final moving-window mean of the KL estimate falls
/// below `threshold`.
pub fn collapse_monitor(logs: &[StepLog], window: usize, threshold: f64) -> CollapseReport {
    let w = window.max(1).min(logs.len());
    let mean = if w == 0 {
        f64::NAN
    } else {
        logs[logs.len() - w..].iter().map(|l| l.vi).sum::<f64>() / w as f64
    };
    CollapseReport {
        collapsed: mean < threshold,
        final_window_mean: mean,
        window: w,
        threshold,
    }
}
