//! Optimization: Adam, schedules, clipping, and the standard / β_C / CAAT loops.

mod adam;
mod control;

pub use adam::{Adam, AdamConfig, AdamState};
pub use control::{
    clip_gradients, collapse_monitor, early_stop_check, global_norm, lr_schedule, CollapseReport,
    DEFAULT_COLLAPSE_THRESHOLD,
};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, SumModel};
use crate::numcore::{Param, Parameterized, Tape, Tensor};
use crate::objective::{corpus_stats, example_loss, LossBreakdown, VariationalTerm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Standard,
    BetaC,
    Caat,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Strategy::Standard),
            "beta_c" => Ok(Strategy::BetaC),
            "caat" => Ok(Strategy::Caat),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Which parameters a step updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Aggressive phase, variational parameters only.
    AggPsi,
    /// Aggressive phase, every parameter.
    AggAll,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::AggPsi => "agg_psi",
            Phase::AggAll => "agg_all",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub beta: f64,
    pub capacity: f64,
    /// Aggressive steps (CAAT only).
    pub n_agg: usize,
    pub n_alt: usize,
    /// Total optimizer steps.
    pub n_max: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    pub clip: f64,
    /// Validation every this many steps; 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Posterior draws per example per step.
    pub samples: usize,
    pub collapse_window: usize,
    pub collapse_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Standard,
            beta: 1.0,
            capacity: 0.1,
            n_agg: 0,
            n_alt: 15,
            n_max: 1000,
            lr: 5e-5,
            adam: AdamConfig::default(),
            warmup_frac: 0.1,
            clip: 1.0,
            eval_interval: 100,
            patience: 8,
            seed: 0,
            batch_size: 8,
            samples: 1,
            collapse_window: 100,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_alt == 0 {
            return fail("n_alt must be at least 1".into());
        }
        if self.n_agg > self.n_max {
            return fail(format!("n_agg {} exceeds n_max {}", self.n_agg, self.n_max));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.samples == 0 {
            return fail("batch_size and samples must be positive".into());
        }
        if !(self.clip > 0.0) || !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return fail("clip must be positive, lr non-negative, warmup_frac in [0, 1]".into());
        }
        if self.beta < 0.0 || self.capacity < 0.0 {
            return fail("beta and capacity must be non-negative".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.n_max as f64).round() as usize
    }

    pub fn term(&self) -> VariationalTerm {
        match self.strategy {
            Strategy::BetaC => VariationalTerm::BetaC {
                beta: self.beta,
                capacity: self.capacity,
            },
            _ => VariationalTerm::Plain,
        }
    }

    /// Partition updated at 1-based step `i`.
    pub fn phase(&self, i: usize) -> Phase {
        if self.strategy == Strategy::Caat && i <= self.n_agg {
            if i % self.n_alt == 0 {
                Phase::AggAll
            } else {
                Phase::AggPsi
            }
        } else {
            Phase::Joint
        }
    }
}

/// Optimizer steps in `epochs` passes over `n_examples` at `batch_size`.
pub fn epochs_to_steps(epochs: f64, n_examples: usize, batch_size: usize) -> usize {
    let per_epoch = n_examples.div_ceil(batch_size.max(1));
    (epochs * per_epoch as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub ce: f64,
    pub vi: f64,
    pub vi_transformed: f64,
    pub total: f64,
    pub grad_norm_pre_clip: f64,
}

pub fn write_step_logs<W: Write>(out: W, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_logs<R: std::io::Read>(input: R) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub perplexity: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub stopped_early: bool,
    pub steps_run: usize,
    pub collapse: CollapseReport,
}

/// Receives progress as it happens, so callers can persist partial runs.
/// `on_step` sees the model right after the update.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog, _model: &SumModel) {}
    fn on_eval(&mut self, _point: &EvalPoint) {}
}

impl TrainObserver for () {}

fn evaluate(model: &SumModel, val: &[Example], step: usize) -> Result<EvalPoint> {
    let s = corpus_stats(model, val)?;
    Ok(EvalPoint {
        step,
        perplexity: s.perplexity(),
        token_accuracy: s.token_accuracy(),
    })
}

/// Mean per-example loss of `batch`, with gradients for `selected`.
fn batch_gradients(
    model: &SumModel,
    batch: &[&Example],
    term: VariationalTerm,
    samples: usize,
    selected: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let mut total = None;
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let (loss, b) = example_loss(&mut tape, model, ex, term, samples, true, rng)?;
        parts.push(b);
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let mean = tape.mul_scalar(total, 1.0 / batch.len() as f64)?;
    let grads = tape.backward(mean)?;
    let params = model.params();
    let out = params
        .iter()
        .zip(selected)
        .filter(|(_, &s)| s)
        .map(|(p, _)| grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    Ok((LossBreakdown::mean(&parts), out))
}

/// Runs the configured strategy. Joint-phase evaluations feed early stopping.
pub fn train(
    model: &mut SumModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);

    let term = cfg.term();
    let warmup = cfg.warmup_steps();
    let psi = model.variational_ids();
    let is_psi: Vec<bool> = model.params().iter().map(|p| psi.contains(&p.id())).collect();
    let all = vec![true; is_psi.len()];
    let mut adam = Adam::new(cfg.adam);

    let mut logs = Vec::with_capacity(cfg.n_max);
    let mut evals = Vec::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    if !val_set.is_empty() {
        let p = evaluate(model, val_set, 0)?;
        observer.on_eval(&p);
        history.push(p.perplexity);
        evals.push(p);
    }

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut steps_run = 0;
    for i in 1..=cfg.n_max {
        if cursor >= order.len() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut data_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&Example> = order[cursor..end].iter().map(|&k| &train_set[k]).collect();
        cursor = end;

        let phase = cfg.phase(i);
        let selected = if phase == Phase::AggPsi { &is_psi } else { &all };
        let lr = lr_schedule(i, warmup, cfg.n_max, cfg.lr);
        let diverged = |e: Error| {
            if e.is_numeric() {
                Error::Diverged {
                    step: i,
                    phase: phase.to_string(),
                    detail: e.to_string(),
                }
            } else {
                e
            }
        };
        let (b, mut grads) =
            batch_gradients(model, &batch, term, cfg.samples, selected, &mut noise_rng).map_err(diverged)?;
        if !b.is_finite() {
            return Err(diverged(Error::NonFinite { op: "loss".into() }));
        }
        let norm = clip_gradients(&mut grads, cfg.clip);
        {
            let mut params: Vec<&mut Param> = model
                .params_mut()
                .into_iter()
                .zip(selected)
                .filter(|(_, &s)| s)
                .map(|(p, _)| p)
                .collect();
            adam.step(&mut params, &grads, lr).map_err(diverged)?;
        }
        let log = StepLog {
            step: i,
            phase,
            lr,
            ce: b.ce,
            vi: b.vi,
            vi_transformed: b.vi_transformed,
            total: b.total,
            grad_norm_pre_clip: norm,
        };
        observer.on_step(&log, model);
        logs.push(log);
        steps_run = i;

        if cfg.eval_interval > 0 && i % cfg.eval_interval == 0 && !val_set.is_empty() {
            let p = evaluate(model, val_set, i)?;
            observer.on_eval(&p);
            evals.push(p);
            if phase == Phase::Joint {
                history.push(p.perplexity);
                if early_stop_check(&history, cfg.patience) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if !val_set.is_empty() && evals.last().is_some_and(|p| p.step != steps_run) {
        let p = evaluate(model, val_set, steps_run)?;
        observer.on_eval(&p);
        evals.push(p);
    }
    let collapse = collapse_monitor(&logs, cfg.collapse_window, cfg.collapse_threshold);
    Ok(TrainOutcome {
        logs,
        evals,
        stopped_early,
        steps_run,
        collapse,
    })
}

/// [`train`] restricted to the standard and β_C strategies.
pub fn standard_train(
    model: &mut SumModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.strategy == Strategy::Caat {
        return Err(Error::Config("standard_train called with the caat strategy".into()));
    }
    train(model, train_set, val_set, cfg, &mut ())
}

/// [`train`] restricted to the CAAT strategy.
pub fn caat_train(
    model: &mut SumModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.strategy != Strategy::Caat {
        return Err(Error::Config("caat_train needs strategy = caat".into()));
    }
    train(model, train_set, val_set, cfg, &mut ())
}
