//! Acceptance gate: ten checks covering distribution math, gradients,
//! routing semantics, schedules, training effects, forecast quality,
//! metric oracles, M5 plumbing, and reproducibility. Each check prints one
//! `criterion N: PASS/FAIL` line (run with `--nocapture` to see them all).
//!
//! The four shared training runs execute once, lazily, at the planned desk
//! scale: 200 synthetic series, a 28-day context, a 14-day horizon, and 20
//! epochs per run.

use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use tempfile::TempDir;

use forecaster_core::data::{
    encode_covariates, generate_synthetic, save_synthetic, split_windows, EncodedDataset,
    SyntheticSpec, WindowRef, WindowSplit,
};
use forecaster_core::eval::{
    evaluate, mase, rmse, wape, wrmsse, Forecaster, Hierarchy, Level, Node, CROSTON_ALPHA,
};
use forecaster_core::hurdle::{
    hurdle_log_pmf, nb_log_pmf, nb_zero_prob, HurdleParams, NBParams,
};
use forecaster_core::model::{
    forward, step_params_values, BatchInput, DecodePlan, ExpertActivation, GateMode, Model,
    ModelConfig, RunMode,
};
use forecaster_core::routing::{collect_routing, RegimeThresholds};
use forecaster_core::special::lgamma;
use forecaster_core::tensor::{Tape, Tensor};
use forecaster_core::training::{
    fit, hybrid_objective, lambda_decay, probabilistic_objective, Objective, TrainConfig,
};

// Tolerances and budgets, pinned.
const PMF_SUM_TOL: f64 = 1e-8;
const ZERO_PROB_TOL: f64 = 1e-12;
const POISSON_TOL: f64 = 1e-5;
const DIST_BUDGET: Duration = Duration::from_secs(5);
const FD_REL_TOL: f64 = 1e-3;
const FD_BUDGET: Duration = Duration::from_secs(120);
const STE_EQ_TOL: f64 = 1e-12;
const SCHEDULE_TOL: f64 = 1e-12;
const SHARE_CAP_PCT: f64 = 60.0;
const BALANCE_BUDGET: Duration = Duration::from_secs(900);
const WAPE_GAP_POINTS: f64 = 2.0;
const NLL_REL_WINDOW: f64 = 0.10;
const ORDERING_BUDGET: Duration = Duration::from_secs(1200);
const METRIC_TOL: f64 = 1e-12;

// Shared fixture scale.
const N_SERIES: usize = 200;
const N_DAYS: usize = 200;
const DATA_SEED: u64 = 7;
const TRAIN_SEED: u64 = 13;
const CONTEXT: usize = 28;
const HORIZON: usize = 14;
const STRIDE: usize = 42;
const LAYERS: usize = 2;
const EXPERTS: usize = 4;
const EPOCHS: usize = 20;

fn criterion(n: usize, body: impl FnOnce() -> String) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => println!("criterion {n}: PASS ({detail})"),
        Err(cause) => {
            println!("criterion {n}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

struct TrainedRun {
    model: Model,
    checkpoint: PathBuf,
    duration: Duration,
}

struct Fixture {
    dir: TempDir,
    data_dir: PathBuf,
    config_path: PathBuf,
    data: EncodedDataset,
    split: WindowSplit,
    unregularized: TrainedRun,
    regularized: TrainedRun,
    hybrid: TrainedRun,
    soft: TrainedRun,
}

fn model_config(data: &EncodedDataset, gate_mode: GateMode) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_encoder_layers: LAYERS,
        n_experts: EXPERTS,
        d_ff: 64,
        context_len: CONTEXT,
        horizon: HORIZON,
        n_past_covariates: data.c_past,
        n_future_covariates: data.c_future,
        gate_mode,
        expert_activation: ExpertActivation::Swiglu,
    }
}

fn train_run(
    data: &EncodedDataset,
    split: &WindowSplit,
    gate_mode: GateMode,
    objective: Objective,
    lambda_aux: f64,
    checkpoint: PathBuf,
) -> TrainedRun {
    let model_cfg = model_config(data, gate_mode);
    let train_cfg = TrainConfig {
        objective,
        epochs: EPOCHS,
        lambda_aux,
        tf_decay_epochs: 10,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut model = Model::init(&model_cfg, train_cfg.seed).expect("model init");
    fit(&mut model, data, split, &train_cfg, Some(&checkpoint)).expect("training run");
    let duration = start.elapsed();
    let model = Model::load(&checkpoint).expect("reload best checkpoint");
    TrainedRun {
        model,
        checkpoint,
        duration,
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let spec = SyntheticSpec {
            n_series: N_SERIES,
            n_days: N_DAYS,
            seed: DATA_SEED,
            ..SyntheticSpec::default()
        };
        let dataset = generate_synthetic(&spec).expect("synthetic data");
        let data_dir = dir.path().join("data");
        std::fs::create_dir_all(&data_dir).expect("data dir");
        save_synthetic(&dataset, &spec, &data_dir).expect("save dataset");
        let config_path = dir.path().join("run.toml");
        std::fs::write(
            &config_path,
            format!(
                "[model]\nd_model = 32\nn_heads = 4\nn_encoder_layers = {LAYERS}\n\
                 n_experts = {EXPERTS}\nd_ff = 64\ncontext_len = {CONTEXT}\nhorizon = {HORIZON}\n\n\
                 [train]\nepochs = {EPOCHS}\nseed = {TRAIN_SEED}\ntf_decay_epochs = 10\n\n\
                 [windows]\nstride = {STRIDE}\n\n\
                 [synthetic]\nn_series = {N_SERIES}\nn_days = {N_DAYS}\nseed = {DATA_SEED}\n"
            ),
        )
        .expect("write config");
        let data = encode_covariates(dataset).expect("covariates");
        let split = split_windows(&data.dataset, CONTEXT, HORIZON, STRIDE);

        let unregularized = train_run(
            &data,
            &split,
            GateMode::SteTop1,
            Objective::Probabilistic,
            0.0,
            dir.path().join("unregularized.bin"),
        );
        let regularized = train_run(
            &data,
            &split,
            GateMode::SteTop1,
            Objective::Probabilistic,
            0.01,
            dir.path().join("regularized.bin"),
        );
        let hybrid = train_run(
            &data,
            &split,
            GateMode::SteTop1,
            Objective::Hybrid,
            0.01,
            dir.path().join("hybrid.bin"),
        );
        let soft = train_run(
            &data,
            &split,
            GateMode::Soft,
            Objective::Hybrid,
            0.01,
            dir.path().join("soft.bin"),
        );
        Fixture {
            dir,
            data_dir,
            config_path,
            data,
            split,
            unregularized,
            regularized,
            hybrid,
            soft,
        }
    })
}

#[test]
fn criterion_1_distribution_correctness() {
    criterion(1, || {
        let start = Instant::now();
        let gate_probs = [0.2, 0.5, 0.8];
        let means = [0.5, 3.0, 20.0];
        let dispersions = [0.1, 1.0, 5.0];
        let mut worst_mass = 0.0f64;
        for &p_plus in &gate_probs {
            for &mu in &means {
                for &alpha in &dispersions {
                    let h = HurdleParams::from_parts(p_plus, mu, alpha).expect("grid point");
                    let mut total = 0.0;
                    for y in 0..=1_000_000u64 {
                        let term = hurdle_log_pmf(y, &h).expect("pmf").exp();
                        total += term;
                        if y as f64 > 4.0 * mu && term < 1e-16 {
                            break;
                        }
                    }
                    worst_mass = worst_mass.max((total - 1.0).abs());

                    let nb = NBParams::new(mu, alpha).expect("nb params");
                    let direct = (1.0 + alpha * mu).powf(-1.0 / alpha);
                    let gap = (nb_zero_prob(&nb) - direct).abs();
                    assert!(
                        gap < ZERO_PROB_TOL,
                        "zero-probability identity off by {gap:e} at mu={mu}, alpha={alpha}"
                    );
                }
            }
        }
        assert!(
            worst_mass < PMF_SUM_TOL,
            "pmf mass deviates from 1 by {worst_mass:e}"
        );

        let mut worst_poisson = 0.0f64;
        for &mu in &means {
            let nb = NBParams::new(mu, 1e-8).expect("near-poisson nb");
            for y in 0..=60u64 {
                let poisson = (-mu + y as f64 * mu.ln() - lgamma(y as f64 + 1.0)).exp();
                worst_poisson = worst_poisson.max((nb_log_pmf(y, &nb).exp() - poisson).abs());
            }
        }
        assert!(
            worst_poisson < POISSON_TOL,
            "poisson limit off by {worst_poisson:e}"
        );
        let elapsed = start.elapsed();
        assert!(elapsed < DIST_BUDGET, "took {elapsed:?}");
        format!(
            "27-point grid mass within {worst_mass:.1e}, poisson gap {worst_poisson:.1e}, {elapsed:.2?}"
        )
    });
}

/// Tiny two-window batch shared by the gradient and routing-semantics
/// checks: 3 series, context 8, horizon 4.
fn small_batch() -> (EncodedDataset, forecaster_core::data::AssembledBatch) {
    let spec = SyntheticSpec {
        n_series: 3,
        n_days: 30,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let data = encode_covariates(generate_synthetic(&spec).expect("tiny dataset"))
        .expect("covariates");
    let split = split_windows(&data.dataset, 8, 4, 7);
    let batch = data.assemble(&split.train[..2], 8, 4).expect("batch");
    (data, batch)
}

fn small_config(data: &EncodedDataset, gate_mode: GateMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_experts: 2,
        d_ff: 16,
        context_len: 8,
        horizon: 4,
        n_past_covariates: data.c_past,
        n_future_covariates: data.c_future,
        gate_mode,
        expert_activation: ExpertActivation::Swiglu,
    }
}

#[test]
fn criterion_2_gradient_integrity() {
    criterion(2, || {
        let start = Instant::now();
        let (data, batch) = small_batch();
        // Finite differences need a differentiable gate, so the check runs
        // the soft mixture; the hard top-1 path is covered by criterion 3.
        let cfg = small_config(&data, GateMode::Soft);
        let coins = vec![true; 4];
        let mut worst = 0.0f64;

        for objective in [Objective::Probabilistic, Objective::Hybrid] {
            let mut model = Model::init(&cfg, 5).expect("model init");
            let loss_of = |model: &Model| -> f64 {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let input = BatchInput {
                    context: &batch.context,
                    past_cov: batch.past_cov.as_ref(),
                    future_cov: batch.future_cov.as_ref(),
                };
                let plan = DecodePlan {
                    tf_coins: &coins,
                    targets: Some(&batch.targets),
                };
                let out = forward(model, &mut tape, &bound, &input, &plan, RunMode::Training)
                    .expect("forward");
                let parts = match objective {
                    Objective::Probabilistic => {
                        probabilistic_objective(&mut tape, &out, &batch.targets, None, 0.01)
                    }
                    Objective::Hybrid => {
                        hybrid_objective(&mut tape, &out, &batch.targets, None, 1.0)
                    }
                }
                .expect("objective");
                tape.value(parts.loss).values[0]
            };

            let grads: Vec<Tensor> = {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let input = BatchInput {
                    context: &batch.context,
                    past_cov: batch.past_cov.as_ref(),
                    future_cov: batch.future_cov.as_ref(),
                };
                let plan = DecodePlan {
                    tf_coins: &coins,
                    targets: Some(&batch.targets),
                };
                let out = forward(&model, &mut tape, &bound, &input, &plan, RunMode::Training)
                    .expect("forward");
                let parts = match objective {
                    Objective::Probabilistic => {
                        probabilistic_objective(&mut tape, &out, &batch.targets, None, 0.01)
                    }
                    Objective::Hybrid => {
                        hybrid_objective(&mut tape, &out, &batch.targets, None, 1.0)
                    }
                }
                .expect("objective");
                tape.backward(parts.loss).expect("backward");
                bound.ids.iter().map(|&id| tape.grad_tensor(id)).collect()
            };

            for i in 0..model.params.len() {
                let n = model.params[i].value.values.len();
                let mut probes = vec![0, n / 3, 2 * n / 3, n - 1];
                probes.dedup();
                for j in probes {
                    let v0 = model.params[i].value.values[j];
                    let h = 1e-5;
                    model.params[i].value.values[j] = v0 + h;
                    let up = loss_of(&model);
                    model.params[i].value.values[j] = v0 - h;
                    let down = loss_of(&model);
                    model.params[i].value.values[j] = v0;
                    let fd = (up - down) / (2.0 * h);
                    let ad = grads[i].values[j];
                    let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        rel < FD_REL_TOL,
                        "{} [{j}]: autodiff {ad:.6e} vs finite difference {fd:.6e} (rel {rel:.2e}, {objective:?})",
                        model.params[i].name
                    );
                    worst = worst.max(rel);
                }
            }
        }
        let elapsed = start.elapsed();
        assert!(elapsed < FD_BUDGET, "took {elapsed:?}");
        format!("max rel err {worst:.2e} across both objectives, {elapsed:.2?}")
    });
}

#[test]
fn criterion_3_ste_semantics() {
    criterion(3, || {
        let (data, batch) = small_batch();
        let cfg = small_config(&data, GateMode::SteTop1);
        let model = Model::init(&cfg, 7).expect("model init");
        let input = BatchInput {
            context: &batch.context,
            past_cov: batch.past_cov.as_ref(),
            future_cov: batch.future_cov.as_ref(),
        };
        let coins = vec![false; 4];
        let plan = DecodePlan::free_running(&coins);

        let mut tape_train = Tape::new();
        let bound_train = model.bind(&mut tape_train);
        let train = forward(
            &model,
            &mut tape_train,
            &bound_train,
            &input,
            &plan,
            RunMode::Training,
        )
        .expect("training forward");

        let mut tape_inf = Tape::new();
        let bound_inf = model.bind(&mut tape_inf);
        let inf = forward(
            &model,
            &mut tape_inf,
            &bound_inf,
            &input,
            &plan,
            RunMode::Inference,
        )
        .expect("inference forward");

        // (a) The dense training-mode mixture collapses to the selected
        // expert alone, so the sparse inference pass must reproduce it.
        assert_eq!(train.selections, inf.selections, "selections diverge");
        let mut gap = 0.0f64;
        for (a, b) in tape_train
            .value(train.memory)
            .values
            .iter()
            .zip(&tape_inf.value(inf.memory).values)
        {
            gap = gap.max((a - b).abs());
        }
        for (sa, sb) in train.steps.iter().zip(&inf.steps) {
            for (a, b) in tape_train
                .value(sa.mean)
                .values
                .iter()
                .zip(&tape_inf.value(sb.mean).values)
            {
                gap = gap.max((a - b).abs());
            }
        }
        assert!(gap < STE_EQ_TOL, "training vs selected-expert gap {gap:e}");

        // (b) Inference applies exactly one expert per token.
        let tokens = 2 * cfg.context_len * cfg.n_encoder_layers;
        assert_eq!(inf.expert_calls, tokens, "inference expert calls");
        assert_eq!(
            train.expert_calls,
            tokens * cfg.n_experts,
            "training-mode expert calls"
        );

        // (c) Backward is dense: router probabilities of non-selected
        // experts still receive gradient.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = forward(&model, &mut tape, &bound, &input, &plan, RunMode::Training)
            .expect("forward");
        let parts = probabilistic_objective(&mut tape, &out, &batch.targets, None, 0.01)
            .expect("objective");
        tape.backward(parts.loss).expect("backward");
        for (layer, probs) in out.router_probs.iter().enumerate() {
            let grad = tape.grad_tensor(*probs);
            let experts = cfg.n_experts;
            for (token, &selected) in out.selections[layer].iter().enumerate() {
                for expert in 0..experts {
                    if expert != selected {
                        let g = grad.values[token * experts + expert];
                        assert!(
                            g != 0.0,
                            "layer {layer} token {token}: non-selected expert {expert} got zero gradient"
                        );
                    }
                }
            }
        }
        format!("selected-expert gap {gap:.1e}, {tokens} tokens routed one expert each, dense router gradients")
    });
}

#[test]
fn criterion_4_schedule_exactness() {
    criterion(4, || {
        let cfg = TrainConfig::default();
        let expected = [
            1.0,
            0.7,
            0.49,
            0.343,
            0.2401,
            0.16807,
            0.117649,
            0.0823543,
            0.05764801,
            0.05,
            0.05,
            0.05,
            0.05,
        ];
        for (epoch, want) in expected.iter().enumerate() {
            let got = lambda_decay(&cfg, epoch);
            assert!(
                (got - want).abs() < SCHEDULE_TOL,
                "epoch {epoch}: decay {got} differs from {want}"
            );
        }
        "decay over epochs 0..=12 matches the closed form, floored at 0.05 from epoch 9".into()
    });
}

fn max_share_pct(model: &Model, f: &Fixture, layer: usize) -> f64 {
    let stats = collect_routing(
        model,
        &f.data,
        &f.split.validation,
        &RegimeThresholds::default(),
    )
    .expect("routing stats");
    stats
        .layer_shares(layer)
        .into_iter()
        .fold(0.0f64, f64::max)
        * 100.0
}

#[test]
fn criterion_5_balance_regularizer_effect() {
    criterion(5, || {
        let f = fixture();
        let mut detail = Vec::new();
        for layer in 0..LAYERS {
            let plain = max_share_pct(&f.unregularized.model, f, layer);
            let regd = max_share_pct(&f.regularized.model, f, layer);
            assert!(
                regd <= plain,
                "layer {layer}: regularized max share {regd:.2}% exceeds unregularized {plain:.2}%"
            );
            assert!(
                regd <= SHARE_CAP_PCT,
                "layer {layer}: regularized max share {regd:.2}% exceeds {SHARE_CAP_PCT}%"
            );
            detail.push(format!("layer {layer}: {plain:.1}% -> {regd:.1}%"));
        }
        let spent = f.unregularized.duration + f.regularized.duration;
        assert!(spent < BALANCE_BUDGET, "training took {spent:?}");
        format!("{}; trained in {spent:.1?}", detail.join(", "))
    });
}

/// Mean free-running negative log likelihood per forecast step.
fn free_running_nll(model: &Model, data: &EncodedDataset, windows: &[WindowRef]) -> f64 {
    let (l, t) = (model.config.context_len, model.config.horizon);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(64) {
        let batch = data.assemble(chunk, l, t).expect("batch");
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = BatchInput {
            context: &batch.context,
            past_cov: batch.past_cov.as_ref(),
            future_cov: batch.future_cov.as_ref(),
        };
        let coins = vec![false; t];
        let out = forward(
            model,
            &mut tape,
            &bound,
            &input,
            &DecodePlan::free_running(&coins),
            RunMode::Inference,
        )
        .expect("forward");
        for (step, sp) in out.steps.iter().enumerate() {
            let params = step_params_values(&tape, sp).expect("step params");
            for (w, h) in params.iter().enumerate() {
                let window = chunk[w];
                let y = data.dataset.series[window.series].demand[window.origin + step];
                total -= hurdle_log_pmf(y as u64, h).expect("log pmf");
                count += 1;
            }
        }
    }
    total / count as f64
}

/// The generating process's own NLL per step over the same points.
fn truth_nll(data: &EncodedDataset, windows: &[WindowRef], t: usize) -> f64 {
    let truth = data.dataset.truth.as_ref().expect("synthetic ground truth");
    let mut total = 0.0;
    let mut count = 0usize;
    for window in windows {
        let series = &data.dataset.series[window.series];
        let gen = &truth[window.series];
        assert_eq!(gen.id, series.id, "truth order matches series order");
        for step in 0..t {
            let day = window.origin + step;
            let h = HurdleParams::from_parts(gen.p_plus[day], gen.mu[day], gen.alpha[day])
                .expect("truth params");
            total -= hurdle_log_pmf(series.demand[day] as u64, &h).expect("log pmf");
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_6_forecast_quality_ordering() {
    criterion(6, || {
        let f = fixture();
        let score = |forecaster: &Forecaster| -> f64 {
            evaluate(
                forecaster,
                &f.data,
                &f.split.validation,
                CONTEXT,
                HORIZON,
                None,
                1,
            )
            .expect("evaluation")
            .wape
            .expect("aggregate wape")
        };
        let model_wape = score(&Forecaster::Model(&f.hybrid.model));
        let croston_wape = score(&Forecaster::Croston {
            alpha: CROSTON_ALPHA,
        });
        let naive_wape = score(&Forecaster::Naive);
        assert!(
            model_wape + WAPE_GAP_POINTS <= croston_wape,
            "hybrid {model_wape:.2} not {WAPE_GAP_POINTS} points under croston {croston_wape:.2}"
        );
        assert!(
            croston_wape + WAPE_GAP_POINTS <= naive_wape,
            "croston {croston_wape:.2} not {WAPE_GAP_POINTS} points under naive {naive_wape:.2}"
        );

        let model_nll = free_running_nll(&f.regularized.model, &f.data, &f.split.validation);
        let oracle_nll = truth_nll(&f.data, &f.split.validation, HORIZON);
        let rel = (model_nll - oracle_nll).abs() / oracle_nll;
        assert!(
            rel <= NLL_REL_WINDOW,
            "model NLL/step {model_nll:.4} vs generating process {oracle_nll:.4} ({:+.1}%)",
            100.0 * (model_nll - oracle_nll) / oracle_nll
        );
        let spent = f.regularized.duration + f.hybrid.duration;
        assert!(spent < ORDERING_BUDGET, "training took {spent:?}");
        format!(
            "WAPE {model_wape:.1} < croston {croston_wape:.1} < naive {naive_wape:.1}; \
             NLL/step {model_nll:.4} vs truth {oracle_nll:.4} ({:+.1}%)",
            100.0 * (model_nll - oracle_nll) / oracle_nll
        )
    });
}

#[test]
fn criterion_7_soft_gating_ablation() {
    criterion(7, || {
        let f = fixture();
        let score = |model: &Model| -> f64 {
            evaluate(
                &Forecaster::Model(model),
                &f.data,
                &f.split.validation,
                CONTEXT,
                HORIZON,
                None,
                1,
            )
            .expect("evaluation")
            .wape
            .expect("aggregate wape")
        };
        let ste = score(&f.hybrid.model);
        let soft = score(&f.soft.model);
        let gap = soft - ste;
        assert!(
            gap >= 0.0,
            "soft gating beat the hard-routing baseline by {:.3} WAPE points",
            -gap
        );
        format!("soft {soft:.2} vs hard routing {ste:.2} WAPE ({gap:+.3} points)")
    });
}

#[test]
fn criterion_8_metric_oracles() {
    criterion(8, || {
        let w = wape(&[1.0, 1.0], &[2.0, 0.0])
            .expect("wape")
            .expect("defined");
        assert!((w - 100.0).abs() < METRIC_TOL, "wape {w}");

        let m = mase(&[2.0, 2.0], &[5.0, 1.0], &[3.0, 1.0, 4.0, 1.0, 5.0], 1)
            .expect("mase")
            .expect("defined");
        assert!((m - 2.0 / 3.0).abs() < METRIC_TOL, "mase {m}");

        let r = rmse(&[0.0, 0.0], &[3.0, 4.0]).expect("rmse");
        assert!((r - 12.5f64.sqrt()).abs() < METRIC_TOL, "rmse {r}");

        // A single-node hierarchy over one series: the weighted aggregate
        // must be that series' RMSSE, bit for bit.
        let hierarchy = Hierarchy {
            levels: vec![Level {
                name: "all".into(),
                nodes: vec![Node {
                    name: "only".into(),
                    series: vec![0],
                    weight: 1.0,
                }],
            }],
        };
        let report = wrmsse(
            &[vec![3.0, 1.0]],
            &[vec![1.0, 1.0]],
            &[vec![0.0, 2.0, 0.0, 2.0]],
            &hierarchy,
        )
        .expect("wrmsse");
        let expected = (((3.0f64 - 1.0).powi(2) / 2.0) / ((4.0 + 4.0 + 4.0) / 3.0)).sqrt();
        assert_eq!(report.total, expected, "degenerate hierarchy");
        assert!(report.excluded.is_empty());
        "wape/mase/rmse fixtures match hand values; one-node hierarchy equals rmsse exactly".into()
    });
}

#[test]
fn criterion_9_m5_plumbing() {
    let Ok(m5_dir) = std::env::var("M5_DATA_DIR") else {
        println!("criterion 9: SKIP (optional; set M5_DATA_DIR to the M5 csv directory)");
        return;
    };
    criterion(9, || {
        let m5 = PathBuf::from(&m5_dir);
        let full = forecaster_core::data::load_m5(
            &m5.join("sales_train_validation.csv"),
            &m5.join("calendar.csv"),
            &m5.join("sell_prices.csv"),
            None,
        )
        .expect("load M5");
        assert_eq!(full.series.len(), 30_490, "full M5 series count");

        let dir = TempDir::new().expect("tempdir");
        let config = dir.path().join("m5.toml");
        std::fs::write(
            &config,
            "[model]\nd_model = 16\nn_heads = 2\nn_encoder_layers = 2\nn_experts = 4\n\
             d_ff = 32\ncontext_len = 28\nhorizon = 14\n\n\
             [train]\nepochs = 2\nseed = 1\ntf_decay_epochs = 1\n\n[windows]\nstride = 200\n",
        )
        .expect("write config");
        let train_out = dir.path().join("train");
        let run = |args: &[&str]| {
            let out = Command::new(env!("CARGO_BIN_EXE_forecaster"))
                .env_remove("FORECASTER_THREADS")
                .args(args)
                .output()
                .expect("spawn forecaster");
            assert!(
                out.status.success(),
                "forecaster {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--m5",
            m5.to_str().unwrap(),
            "--limit",
            "500",
            "--out",
            train_out.to_str().unwrap(),
        ]);
        let log = std::fs::read_to_string(train_out.join("epochs.log")).expect("epochs.log");
        assert_eq!(log.lines().count(), 2, "both epochs completed");

        let eval_out = dir.path().join("eval");
        run(&[
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            train_out.join("checkpoint.bin").to_str().unwrap(),
            "--m5",
            m5.to_str().unwrap(),
            "--limit",
            "500",
            "--metrics",
            "wrmsse",
            "--out",
            eval_out.to_str().unwrap(),
        ]);
        let summary = std::fs::read_to_string(eval_out.join("summary.txt")).expect("summary");
        let wrmsse_value: f64 = summary
            .lines()
            .find_map(|l| l.strip_prefix("source=model wrmsse="))
            .expect("wrmsse line")
            .parse()
            .expect("wrmsse number");
        assert!(wrmsse_value.is_finite(), "wrmsse {wrmsse_value}");
        format!("30490 series loaded; limit-500 run finished with wrmsse {wrmsse_value:.4}")
    });
}

#[test]
fn criterion_10_reproducibility() {
    criterion(10, || {
        let f = fixture();
        let bin = env!("CARGO_BIN_EXE_forecaster");
        let run = |args: &[&str]| {
            let out = Command::new(bin)
                .env_remove("FORECASTER_THREADS")
                .args(args)
                .output()
                .expect("spawn forecaster");
            assert!(
                out.status.success(),
                "forecaster {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        let config = f.config_path.to_str().unwrap();
        let data = f.data_dir.to_str().unwrap();
        let checkpoint = f.hybrid.checkpoint.to_str().unwrap();

        let eval_dirs = [f.dir.path().join("rep_eval_a"), f.dir.path().join("rep_eval_b")];
        for out in &eval_dirs {
            run(&[
                "evaluate",
                "--config",
                config,
                "--checkpoint",
                checkpoint,
                "--data",
                data,
                "--baseline",
                "naive",
                "--baseline",
                "croston",
                "--out",
                out.to_str().unwrap(),
            ]);
        }
        let bytes = |p: &Path| std::fs::read(p).expect("artifact");
        assert_eq!(
            bytes(&eval_dirs[0].join("metrics.csv")),
            bytes(&eval_dirs[1].join("metrics.csv")),
            "metrics.csv differs between identical reruns"
        );

        let routing_dirs = [f.dir.path().join("rep_route_a"), f.dir.path().join("rep_route_b")];
        for out in &routing_dirs {
            run(&[
                "analyze-routing",
                "--config",
                config,
                "--checkpoint",
                checkpoint,
                "--data",
                data,
                "--out",
                out.to_str().unwrap(),
            ]);
        }
        for name in ["routing_overall.csv", "routing_conditional.csv"] {
            assert_eq!(
                bytes(&routing_dirs[0].join(name)),
                bytes(&routing_dirs[1].join(name)),
                "{name} differs between identical reruns"
            );
        }
        "evaluate and analyze-routing reruns produce byte-identical csv artifacts".into()
    });
}
