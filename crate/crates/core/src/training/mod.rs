//! Objectives, schedules, and the optimizer.
//!
//! Two training modes share the same graph machinery: the probabilistic
//! objective is the hurdle likelihood plus a small balance regularizer; the
//! hybrid objective optimizes MAE of the predictive-mean point forecasts
//! while annealing the probabilistic term away on a decaying weight.

mod fit;

use serde::{Deserialize, Serialize};

use crate::model::{balance_loss, ForwardOutput, StepParams};
use crate::special;
use crate::tensor::{Parameter, Tape, Tensor, TensorId};
use crate::{Error, Result};

pub use fit::{fit, EpochRecord, FitOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Probabilistic,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Balance-loss weight in the probabilistic objective.
    pub lambda_aux: f64,
    pub lambda_decay_init: f64,
    pub lambda_decay_factor: f64,
    pub lambda_decay_floor: f64,
    pub tf_start: f64,
    pub tf_end: f64,
    /// Epochs over which the teacher-forcing ratio anneals linearly.
    pub tf_decay_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Probabilistic,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda_aux: 0.01,
            lambda_decay_init: 1.0,
            lambda_decay_factor: 0.7,
            lambda_decay_floor: 0.05,
            tf_start: 1.0,
            tf_end: 0.0,
            tf_decay_epochs: 5,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_decay_factor > 0.0 && self.lambda_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lambda_decay_factor {} must lie in (0, 1)",
                self.lambda_decay_factor
            )));
        }
        if !(self.lambda_decay_floor > 0.0 && self.lambda_decay_floor <= self.lambda_decay_init) {
            return Err(Error::Config(format!(
                "lambda_decay_floor {} must lie in (0, {}]",
                self.lambda_decay_floor, self.lambda_decay_init
            )));
        }
        if self.tf_decay_epochs == 0 {
            return Err(Error::Config("tf_decay_epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tf_start)
            || !(0.0..=1.0).contains(&self.tf_end)
            || self.tf_end > self.tf_start
        {
            return Err(Error::Config(
                "teacher-forcing ratios must satisfy 0 <= tf_end <= tf_start <= 1".into(),
            ));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config(
                "batch_size, learning_rate, and grad_clip_norm must be positive".into(),
            ));
        }
        if self.lambda_aux < 0.0 {
            return Err(Error::Config("lambda_aux must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Weight of the probabilistic term in the hybrid objective: the initial
/// value shrinks by the decay factor each epoch down to the floor.
pub fn lambda_decay(config: &TrainConfig, epoch: usize) -> f64 {
    let decayed = config.lambda_decay_init * config.lambda_decay_factor.powi(epoch as i32);
    decayed.max(config.lambda_decay_floor)
}

/// Per-step probability of feeding ground truth instead of the model's own
/// mean: linear from tf_start to tf_end over tf_decay_epochs, flat after.
pub fn teacher_forcing_ratio(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= config.tf_decay_epochs {
        return config.tf_end;
    }
    let frac = epoch as f64 / config.tf_decay_epochs as f64;
    config.tf_start + (config.tf_end - config.tf_start) * frac
}

struct StepConstants {
    y: TensorId,
    zero_mask: TensorId,
    pos_mask: TensorId,
    ln_factorial: TensorId,
    valid: TensorId,
    n_valid: f64,
}

fn step_constants(
    tape: &mut Tape,
    targets: &Tensor,
    mask: Option<&Tensor>,
    t: usize,
    horizon: usize,
) -> Result<StepConstants> {
    let b = targets.shape[0];
    let mut y = vec![0.0; b];
    let mut zero_mask = vec![0.0; b];
    let mut ln_factorial = vec![0.0; b];
    let mut valid = vec![1.0; b];
    for bi in 0..b {
        let yv = targets.values[bi * horizon + t];
        if !yv.is_finite() || yv < 0.0 || yv.fract() != 0.0 {
            return Err(Error::Domain(format!(
                "target {yv} is not a nonnegative integer count"
            )));
        }
        y[bi] = yv;
        zero_mask[bi] = f64::from(yv == 0.0);
        ln_factorial[bi] = special::lgamma(yv + 1.0);
        if let Some(m) = mask {
            let mv = m.values[bi * horizon + t];
            if mv != 0.0 && mv != 1.0 {
                return Err(Error::Domain(format!("mask value {mv} is not 0 or 1")));
            }
            valid[bi] = mv;
        }
    }
    let n_valid = valid.iter().sum();
    let pos_mask: Vec<f64> = zero_mask.iter().map(|z| 1.0 - z).collect();
    Ok(StepConstants {
        y: tape.leaf(Tensor::new(vec![b], y)?),
        zero_mask: tape.leaf(Tensor::new(vec![b], zero_mask)?),
        pos_mask: tape.leaf(Tensor::new(vec![b], pos_mask)?),
        ln_factorial: tape.leaf(Tensor::new(vec![b], ln_factorial)?),
        valid: tape.leaf(Tensor::new(vec![b], valid)?),
        n_valid,
    })
}

fn check_target_shapes(
    steps: &[StepParams],
    targets: &Tensor,
    mask: Option<&Tensor>,
) -> Result<()> {
    if targets.shape.len() != 2 || targets.shape[1] != steps.len() {
        return Err(Error::Shape(format!(
            "targets must be [batch, {}], got {:?}",
            steps.len(),
            targets.shape
        )));
    }
    if let Some(m) = mask {
        if m.shape != targets.shape {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match targets {:?}",
                m.shape, targets.shape
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the hurdle model over valid steps:
/// zeros contribute -ln(1-p+), positives -ln p+ minus the zero-truncated
/// negative-binomial log-pmf. Built on the tape so it trains end to end.
pub fn hurdle_nll(
    tape: &mut Tape,
    steps: &[StepParams],
    targets: &Tensor,
    mask: Option<&Tensor>,
) -> Result<TensorId> {
    check_target_shapes(steps, targets, mask)?;
    let horizon = steps.len();

    let mut count = 0.0;
    let mut total: Option<TensorId> = None;
    for (t, step) in steps.iter().enumerate() {
        let c = step_constants(tape, targets, mask, t, horizon)?;
        count += c.n_valid;

        let neg_p = tape.neg(step.p_plus)?;
        let lp_zero = tape.log1p(neg_p)?;

        let r = tape.recip(step.alpha)?;
        let am = tape.mul(step.alpha, step.mu)?;
        let lz = tape.log1p(am)?;
        let yr = tape.add(c.y, r)?;
        let lg_yr = tape.lgamma(yr)?;
        let lg_r = tape.lgamma(r)?;
        let gamma_part = tape.sub(lg_yr, lg_r)?;
        let base = tape.sub(gamma_part, c.ln_factorial)?;
        let r_lz = tape.mul(r, lz)?;
        let base = tape.sub(base, r_lz)?;
        let ln_am = tape.log(am)?;
        let ln_ratio = tape.sub(ln_am, lz)?;
        let y_part = tape.mul(c.y, ln_ratio)?;
        let nb = tape.add(base, y_part)?;

        // zero-truncation: subtract ln(1 - p0) with p0 = exp(-lz/alpha)
        let ratio = tape.mul(lz, r)?;
        let neg_ratio = tape.neg(ratio)?;
        let ln_one_minus_p0 = tape.log1mexp(neg_ratio)?;
        let ln_p = tape.log(step.p_plus)?;
        let pos_core = tape.add(ln_p, nb)?;
        let lp_pos = tape.sub(pos_core, ln_one_minus_p0)?;

        let zero_part = tape.mul(c.zero_mask, lp_zero)?;
        let pos_part = tape.mul(c.pos_mask, lp_pos)?;
        let lp = tape.add(zero_part, pos_part)?;
        let masked = tape.mul(lp, c.valid)?;
        let step_sum = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, step_sum)?,
            None => step_sum,
        });
    }
    if count == 0.0 {
        return Err(Error::Usage("likelihood mask admits no steps".into()));
    }
    Ok(tape.mul_scalar(total.expect("horizon >= 1"), -1.0 / count))
}

/// Mean absolute error of the predictive-mean point forecasts over valid
/// steps.
pub fn mae_loss(
    tape: &mut Tape,
    steps: &[StepParams],
    targets: &Tensor,
    mask: Option<&Tensor>,
) -> Result<TensorId> {
    check_target_shapes(steps, targets, mask)?;
    let horizon = steps.len();

    let mut count = 0.0;
    let mut total: Option<TensorId> = None;
    for (t, step) in steps.iter().enumerate() {
        let c = step_constants(tape, targets, mask, t, horizon)?;
        count += c.n_valid;
        let diff = tape.sub(step.mean, c.y)?;
        let err = tape.abs(diff)?;
        let masked = tape.mul(err, c.valid)?;
        let step_sum = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, step_sum)?,
            None => step_sum,
        });
    }
    if count == 0.0 {
        return Err(Error::Usage("no valid steps for the point-forecast error".into()));
    }
    Ok(tape.mul_scalar(total.expect("horizon >= 1"), 1.0 / count))
}

fn total_balance(tape: &mut Tape, router_probs: &[TensorId]) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for &probs in router_probs {
        let b = balance_loss(tape, probs)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, b)?,
            None => b,
        });
    }
    total.ok_or_else(|| Error::Usage("model has no routed layers".into()))
}

/// The pieces of one training objective, all live on the tape.
pub struct ObjectiveParts {
    pub loss: TensorId,
    pub nll: TensorId,
    pub balance: TensorId,
    pub mae: Option<TensorId>,
}

/// Likelihood training: NLL plus lambda_aux times the summed balance loss.
pub fn probabilistic_objective(
    tape: &mut Tape,
    out: &ForwardOutput,
    targets: &Tensor,
    mask: Option<&Tensor>,
    lambda_aux: f64,
) -> Result<ObjectiveParts> {
    let nll = hurdle_nll(tape, &out.steps, targets, mask)?;
    let balance = total_balance(tape, &out.router_probs)?;
    let scaled = tape.mul_scalar(balance, lambda_aux);
    let loss = tape.add(nll, scaled)?;
    Ok(ObjectiveParts {
        loss,
        nll,
        balance,
        mae: None,
    })
}

/// Point-forecast training: MAE plus the decayed probabilistic term. The
/// decayed term carries the balance loss at full weight (no lambda_aux).
pub fn hybrid_objective(
    tape: &mut Tape,
    out: &ForwardOutput,
    targets: &Tensor,
    mask: Option<&Tensor>,
    lambda: f64,
) -> Result<ObjectiveParts> {
    let mae = mae_loss(tape, &out.steps, targets, mask)?;
    let nll = hurdle_nll(tape, &out.steps, targets, mask)?;
    let balance = total_balance(tape, &out.router_probs)?;
    let prob_term = tape.add(nll, balance)?;
    let scaled = tape.mul_scalar(prob_term, lambda);
    let loss = tape.add(mae, scaled)?;
    Ok(ObjectiveParts {
        loss,
        nll,
        balance,
        mae: Some(mae),
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction, applied after global-norm gradient clipping.
pub struct Optimizer {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub step: u64,
}

impl Optimizer {
    pub fn new(learning_rate: f64, clip_norm: f64) -> Self {
        Self {
            learning_rate,
            clip_norm,
            step: 0,
        }
    }

    /// One update. `grads` aligns with `params`; a missing gradient is a
    /// zero gradient (the moments still decay). Returns the pre-clip global
    /// gradient norm.
    pub fn apply(&mut self, params: &mut [Parameter], grads: &[Option<Tensor>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut sq = 0.0;
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                for &v in &g.values {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "gradient for parameter {} is not finite",
                            p.name
                        )));
                    }
                    sq += v * v;
                }
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (p, g) in params.iter_mut().zip(grads) {
            for i in 0..p.value.values.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.values[i]) * scale;
                p.m.values[i] = ADAM_BETA1 * p.m.values[i] + (1.0 - ADAM_BETA1) * gi;
                p.v.values[i] = ADAM_BETA2 * p.v.values[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = p.m.values[i] / bc1;
                let v_hat = p.v.values[i] / bc2;
                p.value.values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(norm)
    }
}
