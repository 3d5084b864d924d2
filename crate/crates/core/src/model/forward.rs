//! Forward-graph construction. Everything here builds onto a caller-owned
//! tape so one backward pass covers the whole computation, including the
//! autoregressive feedback loop in the decoder.
//!
//! Layout conventions: a batch of B series with context length L flattens
//! tokens row-major as (series, day) -> b*L + l. Future covariates use
//! (series, step) -> b*T + t.

use super::{Arch, ExpertActivation, GateMode, LayerIds, Model, ParamId};
use crate::hurdle::HurdleParams;
use crate::tensor::{argmax_rows, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Tape handles for every model parameter, in parameter order.
pub struct Bound {
    pub ids: Vec<TensorId>,
}

impl Bound {
    pub(crate) fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Whether the mixture-of-experts evaluates all experts (training keeps the
/// backward pass dense) or only each token's selected one (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Training,
    Inference,
}

/// One batch of encoder/decoder inputs.
pub struct BatchInput<'a> {
    /// Raw demand counts, [B, L].
    pub context: &'a Tensor,
    /// Past covariates, [B*L, C_p]; None when the model has none.
    pub past_cov: Option<&'a Tensor>,
    /// Known-future covariates, [B*T, C_f]; None when the model has none.
    pub future_cov: Option<&'a Tensor>,
}

/// Per-step teacher-forcing decisions for one decode.
///
/// `tf_coins[t]` decides whether step t receives the ground-truth previous
/// demand (true) or the model's own predictive mean (false). Entry 0 is
/// unused: step 0 always seeds from the last context demand.
pub struct DecodePlan<'a> {
    pub tf_coins: &'a [bool],
    /// Ground truth over the horizon, [B, T]; required when any coin is set.
    pub targets: Option<&'a Tensor>,
}

impl<'a> DecodePlan<'a> {
    /// Free-running decode: no teacher forcing, no targets.
    pub fn free_running(coins: &'a [bool]) -> Self {
        Self {
            tf_coins: coins,
            targets: None,
        }
    }
}

/// Hurdle parameters for one decode step, each shaped [B], plus the
/// predictive mean used for feedback and point forecasts.
pub struct StepParams {
    pub p_plus: TensorId,
    pub mu: TensorId,
    pub alpha: TensorId,
    pub mean: TensorId,
}

pub struct EncoderOutput {
    /// Cross-attention memory, [B*L, d_model].
    pub memory: TensorId,
    /// Pre-gate routing probabilities per encoder layer, [B*L, E].
    pub router_probs: Vec<TensorId>,
    /// Argmax expert per token per layer.
    pub selections: Vec<Vec<usize>>,
    /// Token-applications of experts so far (N*E dense, N sparse).
    pub expert_calls: usize,
    pub batch: usize,
}

pub struct DecodeOutput {
    pub steps: Vec<StepParams>,
    /// The previous-demand value fed to each step, [T][B]. Entry 0 is the
    /// context seed; later entries are ground truth or predictive means
    /// according to the teacher-forcing coins.
    pub feedback: Vec<Vec<f64>>,
}

pub struct ForwardOutput {
    pub memory: TensorId,
    pub router_probs: Vec<TensorId>,
    pub selections: Vec<Vec<usize>>,
    pub expert_calls: usize,
    pub steps: Vec<StepParams>,
    pub feedback: Vec<Vec<f64>>,
}

/// One expert: gated (silu(x W1) * (x W2)) W3, or the ungated
/// gelu(x W1) W3 ablation.
pub fn expert_forward(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    w2: Option<TensorId>,
    w3: TensorId,
    activation: ExpertActivation,
) -> Result<TensorId> {
    match activation {
        ExpertActivation::Swiglu => {
            let w2 = w2.ok_or_else(|| {
                Error::Usage("gated expert is missing the W2 branch".into())
            })?;
            let a = tape.matmul(x, w1)?;
            let s = tape.silu(a)?;
            let g = tape.matmul(x, w2)?;
            let gated = tape.mul(s, g)?;
            tape.matmul(gated, w3)
        }
        ExpertActivation::Gelu => {
            let a = tape.matmul(x, w1)?;
            let g = tape.gelu(a)?;
            tape.matmul(g, w3)
        }
    }
}

/// Straight-through top-1 gate: forward is exactly one-hot on each row's
/// argmax (ties to the lowest index); backward passes gradients straight to
/// the probabilities. Returns the gate and the selected expert per row.
pub fn ste_gate(tape: &mut Tape, probs: TensorId) -> Result<(TensorId, Vec<usize>)> {
    let shape = tape.value(probs).shape.clone();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "gate expects [tokens, experts], got {shape:?}"
        )));
    }
    let sel = argmax_rows(tape.value(probs));
    let mut onehot = Tensor::zeros(&shape);
    for (row, &e) in sel.iter().enumerate() {
        onehot.values[row * shape[1] + e] = 1.0;
    }
    let hard = tape.leaf(onehot);
    let detached = tape.stop_gradient(probs);
    let drift = tape.sub(probs, detached)?; // exactly zero forward
    let gate = tape.add(hard, drift)?;
    Ok((gate, sel))
}

/// KL divergence from the batch-mean routing distribution to uniform:
/// sum_e pbar_e ln(pbar_e E), rewritten as sum_e x ln x + ln E. Zero iff
/// routing is balanced; at most ln E.
pub fn balance_loss(tape: &mut Tape, probs: TensorId) -> Result<TensorId> {
    let shape = tape.value(probs).shape.clone();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "balance loss expects [tokens, experts], got {shape:?}"
        )));
    }
    let n = shape[0] as f64;
    let sums = tape.sum_axis(probs, 0)?;
    let pbar = tape.mul_scalar(sums, 1.0 / n);
    let entropy_part = tape.xlogx(pbar)?;
    let log_e_part = tape.mul_scalar(pbar, (shape[1] as f64).ln());
    let terms = tape.add(entropy_part, log_e_part)?;
    Ok(tape.sum(terms))
}

fn project_heads(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    batch: usize,
    n: usize,
    heads: usize,
    head_dim: usize,
) -> Result<TensorId> {
    let p = tape.matmul(x, w)?;
    let r = tape.reshape(p, &[batch, n, heads, head_dim])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(
    tape: &mut Tape,
    x: TensorId,
    batch: usize,
    n: usize,
    d_model: usize,
) -> Result<TensorId> {
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch * n, d_model])
}

fn attend(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    scale: f64,
) -> Result<TensorId> {
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.mul_scalar(scores, scale);
    let weights = tape.softmax(scaled, 3)?;
    tape.bmm(weights, v)
}

fn mix_all(
    tape: &mut Tape,
    bound: &Bound,
    layer: &LayerIds,
    x: TensorId,
    weights: TensorId,
    activation: ExpertActivation,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (e, expert) in layer.experts.iter().enumerate() {
        let out = expert_forward(
            tape,
            x,
            bound.id(expert.w1),
            expert.w2.map(|w| bound.id(w)),
            bound.id(expert.w3),
            activation,
        )?;
        let w_col = tape.col(weights, e)?;
        let weighted = tape.scale_rows(out, w_col)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("at least 2 experts"))
}

fn apply_selected(
    tape: &mut Tape,
    bound: &Bound,
    layer: &LayerIds,
    x: TensorId,
    selections: &[usize],
    activation: ExpertActivation,
) -> Result<TensorId> {
    let n = tape.value(x).shape[0];
    let mut acc: Option<TensorId> = None;
    for (e, expert) in layer.experts.iter().enumerate() {
        let rows: Vec<usize> = selections
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == e)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let gathered = tape.gather_rows(x, &rows)?;
        let out = expert_forward(
            tape,
            gathered,
            bound.id(expert.w1),
            expert.w2.map(|w| bound.id(w)),
            bound.id(expert.w3),
            activation,
        )?;
        let scattered = tape.scatter_rows(out, &rows, n)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scattered)?,
            None => scattered,
        });
    }
    Ok(acc.expect("every token selects some expert"))
}

/// Embed the context and run the switch encoder layers. Returns the memory
/// plus per-layer routing information.
pub fn encoder_forward(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    input: &BatchInput,
    mode: RunMode,
) -> Result<EncoderOutput> {
    let c = &model.config;
    let arch = &model.arch;
    let ctx_shape = &input.context.shape;
    if ctx_shape.len() != 2 || ctx_shape[1] != c.context_len || ctx_shape[0] == 0 {
        return Err(Error::Shape(format!(
            "context must be [batch >= 1, {}], got {ctx_shape:?}",
            c.context_len
        )));
    }
    let batch = ctx_shape[0];
    let n = batch * c.context_len;
    match (c.n_past_covariates, input.past_cov) {
        (0, None) => {}
        (cp, Some(t)) if cp > 0 && t.shape == [n, cp] => {}
        (cp, got) => {
            return Err(Error::Shape(format!(
                "past covariates must be [{n}, {cp}], got {:?}",
                got.map(|t| t.shape.clone())
            )))
        }
    }

    let demand = tape.leaf(Tensor {
        shape: vec![n, 1],
        values: input.context.values.clone(),
    });
    let log_demand = tape.log1p(demand)?;
    let mut x = tape.matmul(log_demand, bound.id(arch.embed_demand))?;
    if let (Some(cov), Some(w)) = (input.past_cov, arch.embed_covariates) {
        let cov_leaf = tape.leaf(cov.clone());
        let emb = tape.matmul(cov_leaf, bound.id(w))?;
        x = tape.add(x, emb)?;
    }
    let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..c.context_len).collect();
    let pos = tape.gather_rows(bound.id(arch.enc_positional), &pos_rows)?;
    x = tape.add(x, pos)?;

    let (heads, head_dim) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut router_probs = Vec::with_capacity(arch.layers.len());
    let mut selections = Vec::with_capacity(arch.layers.len());
    let mut expert_calls = 0usize;

    for layer in &arch.layers {
        let normed = tape.layer_norm(
            x,
            bound.id(layer.attn_norm.scale),
            bound.id(layer.attn_norm.shift),
        )?;
        let q = project_heads(tape, normed, bound.id(layer.attn.wq), batch, c.context_len, heads, head_dim)?;
        let k = project_heads(tape, normed, bound.id(layer.attn.wk), batch, c.context_len, heads, head_dim)?;
        let v = project_heads(tape, normed, bound.id(layer.attn.wv), batch, c.context_len, heads, head_dim)?;
        let ctx = attend(tape, q, k, v, scale)?;
        let merged = merge_heads(tape, ctx, batch, c.context_len, c.d_model)?;
        let attn_out = tape.matmul(merged, bound.id(layer.attn.wo))?;
        x = tape.add(x, attn_out)?;

        let normed = tape.layer_norm(
            x,
            bound.id(layer.moe_norm.scale),
            bound.id(layer.moe_norm.shift),
        )?;
        let logits = tape.matmul(normed, bound.id(layer.router))?;
        let probs = tape.softmax(logits, 1)?;
        let sel = argmax_rows(tape.value(probs));

        let mixed = match (c.gate_mode, mode) {
            (GateMode::Soft, _) => {
                expert_calls += n * c.n_experts;
                mix_all(tape, bound, layer, normed, probs, c.expert_activation)?
            }
            (GateMode::SteTop1, RunMode::Training) => {
                expert_calls += n * c.n_experts;
                let (gate, _) = ste_gate(tape, probs)?;
                mix_all(tape, bound, layer, normed, gate, c.expert_activation)?
            }
            (GateMode::SteTop1, RunMode::Inference) => {
                expert_calls += n;
                apply_selected(tape, bound, layer, normed, &sel, c.expert_activation)?
            }
        };
        x = tape.add(x, mixed)?;
        router_probs.push(probs);
        selections.push(sel);
    }

    Ok(EncoderOutput {
        memory: x,
        router_probs,
        selections,
        expert_calls,
        batch,
    })
}

fn build_query(
    tape: &mut Tape,
    bound: &Bound,
    arch: &Arch,
    y_prev: TensorId,
    fut_slice: Option<TensorId>,
    t: usize,
) -> Result<TensorId> {
    let log_prev = tape.log1p(y_prev)?;
    let mut q = tape.matmul(log_prev, bound.id(arch.dec_embed_prev))?;
    if let (Some(fut), Some(w)) = (fut_slice, arch.dec_embed_future) {
        let emb = tape.matmul(fut, bound.id(w))?;
        q = tape.add(q, emb)?;
    }
    let pos_t = tape.row(bound.id(arch.dec_positional), t)?;
    tape.add(q, pos_t)
}

fn hurdle_head(
    tape: &mut Tape,
    bound: &Bound,
    arch: &Arch,
    hidden: TensorId,
    batch: usize,
) -> Result<StepParams> {
    let p_raw = tape.matmul(hidden, bound.id(arch.head_w_p))?;
    let p_sig = tape.sigmoid(p_raw)?;
    let p_clamped = tape.clamp(p_sig, 1e-7, 1.0 - 1e-7)?;
    let p_plus = tape.reshape(p_clamped, &[batch])?;

    let positive_link = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<TensorId> {
        let lin = tape.matmul(hidden, bound.id(w))?;
        let biased = tape.add(lin, bound.id(b))?;
        let sp = tape.softplus(biased)?;
        let floored = tape.add_scalar(sp, 1e-6);
        tape.reshape(floored, &[batch])
    };
    let mu = positive_link(tape, arch.head_w_mu, arch.head_b_mu)?;
    let alpha = positive_link(tape, arch.head_w_alpha, arch.head_b_alpha)?;

    // predictive mean p+ mu / (1 - p0), with 1 - p0 = -expm1(-ln(1+am)/a)
    let am = tape.mul(alpha, mu)?;
    let lz = tape.log1p(am)?;
    let inv_alpha = tape.recip(alpha)?;
    let ratio = tape.mul(lz, inv_alpha)?;
    let neg_ratio = tape.neg(ratio)?;
    let p0_minus_one = tape.expm1(neg_ratio)?;
    let denom = tape.neg(p0_minus_one)?;
    if tape.value(denom).values.iter().any(|&d| d < 1e-12) {
        return Err(Error::Numerical(
            "degenerate hurdle truncation: predicted zero probability saturated at 1".into(),
        ));
    }
    let inv_denom = tape.recip(denom)?;
    let gated_mu = tape.mul(p_plus, mu)?;
    let mean = tape.mul(gated_mu, inv_denom)?;

    Ok(StepParams {
        p_plus,
        mu,
        alpha,
        mean,
    })
}

/// Autoregressive decode over the horizon. Step 0 seeds from the last
/// context demand; each later step feeds back ground truth or the previous
/// step's predictive mean according to the plan. The feedback stays on the
/// tape, so gradients flow through the whole rollout.
pub fn decode(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    memory: TensorId,
    batch: usize,
    input: &BatchInput,
    plan: &DecodePlan,
) -> Result<DecodeOutput> {
    let c = &model.config;
    let arch = &model.arch;
    let horizon = c.horizon;
    if plan.tf_coins.len() != horizon {
        return Err(Error::Usage(format!(
            "need {horizon} teacher-forcing coins, got {}",
            plan.tf_coins.len()
        )));
    }
    if plan.tf_coins[1..].iter().any(|&b| b) && plan.targets.is_none() {
        return Err(Error::Usage(
            "teacher forcing requested but no targets supplied".into(),
        ));
    }
    if let Some(t) = plan.targets {
        if t.shape != [batch, horizon] {
            return Err(Error::Shape(format!(
                "targets must be [{batch}, {horizon}], got {:?}",
                t.shape
            )));
        }
    }
    match (c.n_future_covariates, input.future_cov) {
        (0, None) => {}
        (cf, Some(t)) if cf > 0 && t.shape == [batch * horizon, cf] => {}
        (cf, got) => {
            return Err(Error::Shape(format!(
                "future covariates must be [{}, {cf}], got {:?}",
                batch * horizon,
                got.map(|t| t.shape.clone())
            )))
        }
    }

    let (heads, head_dim) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (head_dim as f64).sqrt();
    let k = project_heads(tape, memory, bound.id(arch.dec_attn.wk), batch, c.context_len, heads, head_dim)?;
    let v = project_heads(tape, memory, bound.id(arch.dec_attn.wv), batch, c.context_len, heads, head_dim)?;
    let fut = input.future_cov.map(|t| tape.leaf(t.clone()));

    let seed: Vec<f64> = (0..batch)
        .map(|b| input.context.values[(b + 1) * c.context_len - 1])
        .collect();
    let mut y_prev = tape.leaf(Tensor {
        shape: vec![batch, 1],
        values: seed.clone(),
    });
    let mut feedback = Vec::with_capacity(horizon);
    feedback.push(seed);
    let mut steps: Vec<StepParams> = Vec::with_capacity(horizon);

    for t in 0..horizon {
        if t > 0 {
            y_prev = if plan.tf_coins[t] {
                let targets = plan.targets.expect("validated above");
                let vals: Vec<f64> = (0..batch)
                    .map(|b| targets.values[b * horizon + t - 1])
                    .collect();
                feedback.push(vals.clone());
                tape.leaf(Tensor {
                    shape: vec![batch, 1],
                    values: vals,
                })
            } else {
                let prev_mean = steps[t - 1].mean;
                feedback.push(tape.value(prev_mean).values.clone());
                tape.reshape(prev_mean, &[batch, 1])?
            };
        }
        let fut_slice = match fut {
            Some(f) => {
                let rows: Vec<usize> = (0..batch).map(|b| b * horizon + t).collect();
                Some(tape.gather_rows(f, &rows)?)
            }
            None => None,
        };
        let q = build_query(tape, bound, arch, y_prev, fut_slice, t)?;
        let qh = project_heads(tape, q, bound.id(arch.dec_attn.wq), batch, 1, heads, head_dim)?;
        let ctx = attend(tape, qh, k, v, scale)?;
        let merged = merge_heads(tape, ctx, batch, 1, c.d_model)?;
        let attn_out = tape.matmul(merged, bound.id(arch.dec_attn.wo))?;
        let resid = tape.add(q, attn_out)?;
        let hidden = tape.layer_norm(
            resid,
            bound.id(arch.dec_out_norm.scale),
            bound.id(arch.dec_out_norm.shift),
        )?;
        steps.push(hurdle_head(tape, bound, arch, hidden, batch)?);
    }

    Ok(DecodeOutput { steps, feedback })
}

/// Encoder plus decoder in one call.
pub fn forward(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    input: &BatchInput,
    plan: &DecodePlan,
    mode: RunMode,
) -> Result<ForwardOutput> {
    let enc = encoder_forward(model, tape, bound, input, mode)?;
    let dec = decode(model, tape, bound, enc.memory, enc.batch, input, plan)?;
    Ok(ForwardOutput {
        memory: enc.memory,
        router_probs: enc.router_probs,
        selections: enc.selections,
        expert_calls: enc.expert_calls,
        steps: dec.steps,
        feedback: dec.feedback,
    })
}

/// Read one step's hurdle parameters out of the tape, per series.
pub fn step_params_values(tape: &Tape, step: &StepParams) -> Result<Vec<HurdleParams>> {
    let p = &tape.value(step.p_plus).values;
    let mu = &tape.value(step.mu).values;
    let alpha = &tape.value(step.alpha).values;
    (0..p.len())
        .map(|i| HurdleParams::from_parts(p[i], mu[i], alpha[i]))
        .collect()
}
