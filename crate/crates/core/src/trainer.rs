//! Single-pass training loop: RMSProp with linear warmup, task loss plus
//! router auxiliary losses, per-step CSV logging.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::Dataset;
use crate::model::Scorer;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::token_boost::{load_balance_loss_var, z_loss_var, AuxLossConfig};

/// Environment variable that overrides every configured seed.
pub const SEED_ENV: &str = "ZENITH_SEED";

/// Parses a `ZENITH_SEED` value.
pub fn seed_override(value: Option<&str>) -> Result<Option<u64>> {
    value
        .map(|v| v.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64"))))
        .transpose()
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>> {
    seed_override(std::env::var(SEED_ENV).ok().as_deref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

fn default_base_lr() -> f64 {
    0.01
}
fn default_decay() -> f64 {
    0.99999
}
fn default_accumulator_init() -> f64 {
    0.015625
}
fn default_warmup() -> usize {
    1000
}
fn default_batch() -> usize {
    64
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Rmsprop
}
fn default_summary_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Second-moment EMA decay.
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Initial value of every second-moment accumulator.
    #[serde(default = "default_accumulator_init")]
    pub accumulator_init: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub aux: AuxLossConfig,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Router summary cadence in steps.
    #[serde(default = "default_summary_every")]
    pub summary_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(total_steps: usize) -> Self {
        Self {
            base_lr: default_base_lr(),
            decay: default_decay(),
            accumulator_init: default_accumulator_init(),
            warmup_steps: default_warmup().min(total_steps),
            total_steps,
            batch_size: default_batch(),
            aux: AuxLossConfig::default(),
            optimizer: default_optimizer(),
            summary_every: default_summary_every(),
            seed: 0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr must be positive (got {})", self.base_lr));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            v.push(format!("0 < decay < 1 violated (decay={})", self.decay));
        }
        if !(self.accumulator_init > 0.0) {
            v.push(format!("accumulator_init must be positive (got {})", self.accumulator_init));
        }
        if self.warmup_steps > self.total_steps {
            v.push(format!(
                "warmup_steps ≤ total_steps violated ({} > {})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.summary_every == 0 {
            v.push("summary_every must be positive".into());
        }
        if let Err(e) = self.aux.validate() {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(v))
        }
    }
}

/// Linear ramp from 0.1% of `base_lr` at step 0 to `base_lr` at
/// `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        return base_lr;
    }
    base_lr * (0.001 + 0.999 * step as f64 / warmup_steps as f64)
}

const RMS_EPS: f64 = 1e-8;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;

/// Per-parameter optimizer accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Second-moment accumulators.
    pub v: Vec<Vec<f64>>,
    /// First moments (Adam only).
    pub m: Vec<Vec<f64>>,
    pub step: u64,
    decay: f64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let (v0, decay) = match cfg.optimizer {
            OptimizerKind::Rmsprop => (cfg.accumulator_init, cfg.decay),
            OptimizerKind::Adam => (0.0, ADAM_BETA2),
        };
        let m = match cfg.optimizer {
            OptimizerKind::Rmsprop => Vec::new(),
            OptimizerKind::Adam => params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        };
        Self { kind: cfg.optimizer, v: params.iter().map(|t| vec![v0; t.numel()]).collect(), m, step: 0, decay }
    }

    pub fn rmsprop(params: &[Tensor], decay: f64, accumulator_init: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            v: params.iter().map(|t| vec![accumulator_init; t.numel()]).collect(),
            m: Vec::new(),
            step: 0,
            decay,
        }
    }
}

/// One update. Non-finite gradients abort the step before anything changes.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.v.len() {
        return Err(Error::Input(format!("{} params, {} grads, {} accumulators", params.len(), grads.len(), state.v.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Input(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let d = state.decay;
    match state.kind {
        OptimizerKind::Rmsprop => {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
                for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = d * *vi + (1.0 - d) * gi * gi;
                    *w -= lr * gi / (vi.sqrt() + RMS_EPS);
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - d.powi(t));
            for (((p, g), v), m) in params.iter_mut().zip(grads).zip(&mut state.v).zip(&mut state.m) {
                for (((w, &gi), vi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()).zip(m.iter_mut()) {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = d * *vi + (1.0 - d) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + RMS_EPS);
                }
            }
        }
    }
    for (i, p) in params.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("parameter {i} after update")));
        }
    }
    Ok(())
}

/// Outcome of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    /// Gradients were non-finite; parameters untouched.
    SkippedNonFinite,
}

impl StepStatus {
    fn as_str(self) -> &'static str {
        match self {
            StepStatus::Ok => "ok",
            StepStatus::SkippedNonFinite => "skipped_non_finite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub load_loss: f64,
    pub z_loss: f64,
    pub max_expert_load: f64,
    pub status: StepStatus,
}

/// Expert load and mean routing probability of one layer at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterRow {
    pub step: usize,
    pub layer: usize,
    pub expert: usize,
    pub load: f64,
    pub mean_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub router: Vec<RouterRow>,
    pub steps_completed: usize,
    /// Set when the data ran out before `total_steps`.
    pub early_stop: Option<usize>,
}

impl TrainReport {
    /// `step,lr,task_loss,load_loss,z_loss,max_expert_load,status`; an early
    /// stop adds a final row with empty metrics and status `early_stop`.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,lr,task_loss,load_loss,z_loss,max_expert_load,status\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.step,
                r.lr,
                r.task_loss,
                r.load_loss,
                r.z_loss,
                r.max_expert_load,
                r.status.as_str()
            );
        }
        if let Some(step) = self.early_stop {
            let _ = writeln!(s, "{step},,,,,,early_stop");
        }
        s
    }

    /// `step,layer,expert,load,mean_prob`.
    pub fn router_csv(&self) -> String {
        let mut s = String::from("step,layer,expert,load,mean_prob\n");
        for r in &self.router {
            let _ = writeln!(s, "{},{},{},{:?},{:?}", r.step, r.layer, r.expert, r.load, r.mean_prob);
        }
        s
    }

    /// Mean task loss over the first and last `frac` of logged steps.
    pub fn loss_trend(&self, frac: f64) -> (f64, f64) {
        let losses: Vec<f64> =
            self.log.iter().filter(|r| r.status == StepStatus::Ok).map(|r| r.task_loss).collect();
        let n = ((losses.len() as f64 * frac).ceil() as usize).clamp(1, losses.len().max(1));
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        (mean(&losses[..n]), mean(&losses[losses.len() - n..]))
    }
}

/// Trains `model` on one shuffled pass over `data`.
pub fn train<S: Scorer>(model: &mut S, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let available = data.len() / cfg.batch_size;
    let steps = cfg.total_steps.min(available);
    let mut state = OptimizerState::new(model.store().tensors(), cfg);
    let mut report = TrainReport::default();

    for step in 0..steps {
        let batch = data.select(&order[step * cfg.batch_size..(step + 1) * cfg.batch_size]);
        let lr = warmup_lr(step, cfg.base_lr, cfg.warmup_steps);
        let tape = Tape::new();
        let p = model.store().bind(&tape);
        let scored = model.score(&tape, &p, &batch)?;
        let task = scored.logits.bce_with_logits(&batch.labels);
        let mut total = task;
        let (mut load_loss, mut z) = (0.0, 0.0);
        let mut max_load: f64 = 0.0;
        for (layer, r) in scored.routings.iter().enumerate() {
            r.trace.check_invariants(1e-9)?;
            max_load = r.trace.loads.iter().fold(max_load, |a, &b| a.max(b));
            if cfg.aux.alpha > 0.0 {
                let l = load_balance_loss_var(&tape, r, cfg.aux.alpha);
                load_loss += l.item();
                total = total.add(&l);
            }
            if cfg.aux.beta > 0.0 {
                let l = z_loss_var(r, cfg.aux.beta);
                z += l.item();
                total = total.add(&l);
            }
            if step % cfg.summary_every == 0 || step + 1 == steps {
                for (expert, (&load, &mean_prob)) in r.trace.loads.iter().zip(&r.trace.mean_probs).enumerate() {
                    report.router.push(RouterRow { step, layer, expert, load, mean_prob });
                }
            }
        }
        let task_loss = task.item();
        let grads = total.backward()?;
        let grads: Vec<Tensor> = p.vars().iter().map(|v| grads.get_or_zeros(v)).collect();
        let status = match optimizer_step(model.store_mut().tensors_mut(), &grads, &mut state, lr) {
            Ok(()) => StepStatus::Ok,
            Err(Error::NonFinite(_)) if grads.iter().any(|g| !g.is_finite()) => StepStatus::SkippedNonFinite,
            Err(e) => return Err(e),
        };
        report.log.push(LogRow { step, lr, task_loss, load_loss, z_loss: z, max_expert_load: max_load, status });
        report.steps_completed = step + 1;
    }
    if steps < cfg.total_steps {
        report.early_stop = Some(steps);
    }
    Ok(report)
}
