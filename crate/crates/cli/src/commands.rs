//! The five subcommands. Each one loads its configuration, runs, and
//! leaves fixed-name outputs plus a `config.echo` in the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use forecaster_core::data::{
    encode_covariates, generate_synthetic, load_m5, load_synthetic, save_synthetic, split_windows,
    EncodedDataset, WindowRef,
};
use forecaster_core::eval::{evaluate, Forecaster, MetricReport, CROSTON_ALPHA};
use forecaster_core::hurdle::{hurdle_quantile, hurdle_sample};
use forecaster_core::model::{
    forward, step_params_values, BatchInput, DecodePlan, ExpertActivation, GateMode, Model,
    RunMode,
};
use forecaster_core::rng::{seeded_stream, streams};
use forecaster_core::routing::{collect_routing, routing_conditional_csv, routing_overall_csv};
use forecaster_core::tensor::Tape;
use forecaster_core::training::{fit, Objective};
use forecaster_core::{Error, Result};

use crate::config::{ForecastMode, RunConfig};
use crate::{threads, AnalyzeArgs, DataArgs, EvaluateArgs, ForecastArgs, GenerateArgs, TrainArgs};

/// Windows decoded per forward pass when producing forecasts.
const DECODE_BATCH: usize = 64;

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synthetic.seed = seed;
    }
    if let Some(n) = args.series {
        cfg.synthetic.n_series = n;
    }
    if let Some(n) = args.days {
        cfg.synthetic.n_days = n;
    }
    let dataset = generate_synthetic(&cfg.synthetic)?;
    fs::create_dir_all(&args.out)?;
    save_synthetic(&dataset, &cfg.synthetic, &args.out)?;
    cfg.echo(&args.out)?;
    println!(
        "wrote {} series x {} days to {}",
        cfg.synthetic.n_series,
        cfg.synthetic.n_days,
        args.out.display()
    );
    Ok(())
}

fn load_data(args: &DataArgs) -> Result<EncodedDataset> {
    let dataset = match (&args.data, &args.m5) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage("pass either --data or --m5, not both".into()))
        }
        (None, None) => {
            return Err(Error::Usage(
                "a dataset is required: --data DIR or --m5 DIR".into(),
            ))
        }
        (Some(dir), None) => {
            if args.limit.is_some() {
                return Err(Error::Usage("--limit applies only to --m5".into()));
            }
            load_synthetic(dir)?.0
        }
        (None, Some(dir)) => load_m5(
            &dir.join("sales_train_validation.csv"),
            &dir.join("calendar.csv"),
            &dir.join("sell_prices.csv"),
            args.limit,
        )?,
    };
    encode_covariates(dataset)
}

fn parse_objective(s: &str) -> Result<Objective> {
    match s {
        "prob" | "probabilistic" => Ok(Objective::Probabilistic),
        "hybrid" => Ok(Objective::Hybrid),
        other => Err(Error::Usage(format!(
            "unknown objective {other:?} (use prob or hybrid)"
        ))),
    }
}

fn parse_gate_mode(s: &str) -> Result<GateMode> {
    match s {
        "ste" | "ste_top1" => Ok(GateMode::SteTop1),
        "soft" => Ok(GateMode::Soft),
        other => Err(Error::Usage(format!(
            "unknown gate mode {other:?} (use ste_top1 or soft)"
        ))),
    }
}

fn parse_activation(s: &str) -> Result<ExpertActivation> {
    match s {
        "swiglu" => Ok(ExpertActivation::Swiglu),
        "gelu" => Ok(ExpertActivation::Gelu),
        other => Err(Error::Usage(format!(
            "unknown expert activation {other:?} (use swiglu or gelu)"
        ))),
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_metrics_csv(path: &Path, sources: &[(String, MetricReport)]) -> Result<()> {
    let mut out = String::from("source,series_id,wape,mase,rmse\n");
    for (name, report) in sources {
        for s in &report.per_series {
            writeln!(
                out,
                "{name},{},{},{},{:.6}",
                s.id,
                format_opt(s.wape),
                format_opt(s.mase),
                s.rmse
            )
            .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn summary_lines(sources: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    for (name, report) in sources {
        writeln!(
            out,
            "source={name} wape={} mase={} rmse={:.6} evaluated={} skipped_wape={} skipped_mase={}",
            format_opt(report.wape),
            format_opt(report.mase),
            report.rmse,
            report.evaluated,
            report.skipped_wape,
            report.skipped_mase
        )
        .expect("string write");
        if let Some(w) = &report.wrmsse {
            writeln!(out, "source={name} wrmsse={:.6}", w.total).expect("string write");
            for (level, value) in &w.levels {
                writeln!(out, "source={name} wrmsse_level {level}={value:.6}")
                    .expect("string write");
            }
            if !w.excluded.is_empty() {
                writeln!(out, "source={name} wrmsse_excluded={}", w.excluded.len())
                    .expect("string write");
            }
        }
    }
    out
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = &args.objective {
        cfg.train.objective = parse_objective(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(aux) = args.lambda_aux {
        cfg.train.lambda_aux = aux;
    }
    if let Some(s) = &args.gate_mode {
        cfg.model.gate_mode = parse_gate_mode(s)?;
    }
    if let Some(s) = &args.expert_activation {
        cfg.model.expert_activation = parse_activation(s)?;
    }

    let data = load_data(&args.data)?;
    cfg.model.n_past_covariates = data.c_past;
    cfg.model.n_future_covariates = data.c_future;
    cfg.model.validate()?;
    cfg.train.validate()?;

    let l = cfg.model.context_len;
    let t = cfg.model.horizon;
    let split = split_windows(&data.dataset, l, t, cfg.windows.stride);
    fs::create_dir_all(&args.out)?;
    cfg.echo(&args.out)?;
    println!(
        "training on {} windows ({} validation, {} series skipped as too short)",
        split.train.len(),
        split.validation.len(),
        split.skipped
    );

    let mut model = Model::init(&cfg.model, cfg.train.seed)?;
    let checkpoint = args.out.join("checkpoint.bin");
    let result = fit(&mut model, &data, &split, &cfg.train, Some(&checkpoint))?;

    let mut log = String::new();
    for record in &result.history {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Format(format!("epoch record serialization failed: {e}")))?;
        log.push_str(&line);
        log.push('\n');
    }
    fs::write(args.out.join("epochs.log"), log)?;

    let best = Model::load(&checkpoint)?;
    let mut summary = String::new();
    match result.best_epoch {
        Some(epoch) => {
            writeln!(summary, "best_epoch={epoch}").expect("string write");
            writeln!(summary, "best_val={:.6}", result.best_val).expect("string write");
        }
        None => writeln!(summary, "best_epoch=none").expect("string write"),
    }
    if split.validation.is_empty() {
        summary.push_str("validation=empty\n");
    } else {
        let report = evaluate(
            &Forecaster::Model(&best),
            &data,
            &split.validation,
            l,
            t,
            None,
            threads()?,
        )?;
        let sources = vec![("model".to_string(), report)];
        write_metrics_csv(&args.out.join("metrics.csv"), &sources)?;
        summary.push_str(&summary_lines(&sources));
    }
    fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Free-running decode over every window: hurdle parameters and predictive
/// means, both indexed `[step][window]`. The means are read off the tape so
/// point forecasts match the evaluation path bit for bit.
struct DecodedWindows {
    params: Vec<Vec<forecaster_core::hurdle::HurdleParams>>,
    means: Vec<Vec<f64>>,
}

fn decode_windows(
    model: &Model,
    data: &EncodedDataset,
    windows: &[WindowRef],
) -> Result<DecodedWindows> {
    let l = model.config.context_len;
    let t = model.config.horizon;
    let mut decoded = DecodedWindows {
        params: vec![Vec::with_capacity(windows.len()); t],
        means: vec![Vec::with_capacity(windows.len()); t],
    };
    for chunk in windows.chunks(DECODE_BATCH) {
        let batch = data.assemble(chunk, l, t)?;
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
        )?;
        for (step, sp) in out.steps.iter().enumerate() {
            decoded.params[step].extend(step_params_values(&tape, sp)?);
            decoded.means[step].extend_from_slice(&tape.value(sp.mean).values);
        }
    }
    Ok(decoded)
}

fn check_covariates(model: &Model, data: &EncodedDataset) -> Result<()> {
    if model.config.n_past_covariates != data.c_past
        || model.config.n_future_covariates != data.c_future
    {
        return Err(Error::Usage(format!(
            "checkpoint expects {}/{} past/future covariate columns, dataset provides {}/{}; \
             was the model trained on this dataset?",
            model.config.n_past_covariates,
            model.config.n_future_covariates,
            data.c_past,
            data.c_future
        )));
    }
    Ok(())
}

pub fn forecast(args: &ForecastArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = &args.mode {
        cfg.forecast.mode = match s.as_str() {
            "point" => ForecastMode::Point,
            "quantiles" => ForecastMode::Quantiles,
            "samples" => ForecastMode::Samples,
            other => {
                return Err(Error::Usage(format!(
                    "unknown forecast mode {other:?} (use point, quantiles, or samples)"
                )))
            }
        };
    }
    if let Some(s) = &args.quantiles {
        let mut qs = Vec::new();
        for part in s.split(',') {
            let q: f64 = part.trim().parse().map_err(|_| {
                Error::Usage(format!("quantile {part:?} is not a number"))
            })?;
            qs.push(q);
        }
        cfg.forecast.quantiles = qs;
    }
    if let Some(n) = args.samples {
        cfg.forecast.samples = n;
    }
    if let Some(seed) = args.seed {
        cfg.forecast.seed = seed;
    }
    if cfg.forecast.mode == ForecastMode::Quantiles {
        cfg.forecast.quantiles.sort_by(|a, b| a.total_cmp(b));
        cfg.forecast.quantiles.dedup();
        if cfg.forecast.quantiles.is_empty() {
            return Err(Error::Usage("quantiles mode needs at least one level".into()));
        }
        if let Some(&q) = cfg.forecast.quantiles.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Usage(format!(
                "quantile {q} must lie strictly between 0 and 1"
            )));
        }
    }
    if cfg.forecast.mode == ForecastMode::Samples && cfg.forecast.samples == 0 {
        return Err(Error::Usage("samples mode needs samples >= 1".into()));
    }

    let model = Model::load(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    check_covariates(&model, &data)?;
    let split = split_windows(
        &data.dataset,
        model.config.context_len,
        model.config.horizon,
        cfg.windows.stride,
    );
    if split.validation.is_empty() {
        return Err(Error::Usage(
            "no series is long enough to forecast from".into(),
        ));
    }
    let decoded = decode_windows(&model, &data, &split.validation)?;
    let t = model.config.horizon;

    let mut out = String::new();
    match cfg.forecast.mode {
        ForecastMode::Point => {
            out.push_str("series_id,step,mean\n");
            for (w, window) in split.validation.iter().enumerate() {
                let id = &data.dataset.series[window.series].id;
                for (step, means) in decoded.means.iter().enumerate() {
                    writeln!(out, "{id},{},{:.6}", step + 1, means[w]).expect("string write");
                }
            }
        }
        ForecastMode::Quantiles => {
            out.push_str("series_id,step");
            for q in &cfg.forecast.quantiles {
                write!(out, ",q{q}").expect("string write");
            }
            out.push('\n');
            for (w, window) in split.validation.iter().enumerate() {
                let id = &data.dataset.series[window.series].id;
                for (step, params) in decoded.params.iter().enumerate() {
                    write!(out, "{id},{}", step + 1).expect("string write");
                    for &q in &cfg.forecast.quantiles {
                        write!(out, ",{}", hurdle_quantile(&params[w], q)?)
                            .expect("string write");
                    }
                    out.push('\n');
                }
            }
        }
        ForecastMode::Samples => {
            out.push_str("series_id,sample,step,value\n");
            let mut rng = seeded_stream(cfg.forecast.seed, streams::FORECAST_SAMPLING);
            for (w, window) in split.validation.iter().enumerate() {
                let id = &data.dataset.series[window.series].id;
                for sample in 0..cfg.forecast.samples {
                    for (step, params) in decoded.params.iter().enumerate() {
                        let value = hurdle_sample(&params[w], &mut rng)?;
                        writeln!(out, "{id},{sample},{},{value}", step + 1)
                            .expect("string write");
                    }
                }
            }
        }
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("forecasts.csv"), out)?;
    cfg.echo(&args.out)?;
    println!(
        "wrote {} forecasts for {} series over {t} steps",
        match cfg.forecast.mode {
            ForecastMode::Point => "point",
            ForecastMode::Quantiles => "quantile",
            ForecastMode::Samples => "sampled",
        },
        split.validation.len()
    );
    Ok(())
}

/// Parse a point forecasts.csv back into per-series horizon vectors keyed
/// by series index.
fn read_point_forecasts(
    path: &Path,
    data: &EncodedDataset,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let index: BTreeMap<&str, usize> = data
        .dataset
        .series
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
    };
    let (id_col, step_col, mean_col) = (col("series_id")?, col("step")?, col("mean")?);
    let mut rows: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| Error::Format(format!("{}: short row", path.display())))
        };
        let id = field(id_col)?;
        let series = *index.get(id).ok_or_else(|| {
            Error::Data(format!("forecast series {id:?} is not in the dataset"))
        })?;
        let step: u64 = field(step_col)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad step value", path.display())))?;
        let mean: f64 = field(mean_col)?
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad mean value", path.display())))?;
        rows.entry(series).or_default().push((step, mean));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no forecast rows", path.display())));
    }
    let mut forecasts = BTreeMap::new();
    for (series, mut steps) in rows {
        steps.sort_by_key(|&(step, _)| step);
        forecasts.insert(series, steps.into_iter().map(|(_, m)| m).collect());
    }
    Ok(forecasts)
}

struct MetricSet {
    wape: bool,
    mase: bool,
    rmse: bool,
    wrmsse: bool,
}

fn parse_metrics(s: Option<&str>) -> Result<MetricSet> {
    let mut set = MetricSet {
        wape: false,
        mase: false,
        rmse: false,
        wrmsse: false,
    };
    let Some(s) = s else {
        return Ok(MetricSet {
            wape: true,
            mase: true,
            rmse: true,
            wrmsse: false,
        });
    };
    for part in s.split(',') {
        match part.trim() {
            "wape" => set.wape = true,
            "mase" => set.mase = true,
            "rmse" => set.rmse = true,
            "wrmsse" => set.wrmsse = true,
            other => {
                return Err(Error::Usage(format!(
                    "unknown metric {other:?} (use wape, mase, rmse, wrmsse)"
                )))
            }
        }
    }
    Ok(set)
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let data = load_data(&args.data)?;
    let n_threads = threads()?;

    let model = match &args.checkpoint {
        Some(path) => {
            let m = Model::load(path)?;
            check_covariates(&m, &data)?;
            Some(m)
        }
        None => None,
    };
    let fixed = match &args.forecasts {
        Some(path) => Some(read_point_forecasts(path, &data)?),
        None => None,
    };
    if model.is_none() && fixed.is_none() && args.baseline.is_empty() {
        return Err(Error::Usage(
            "nothing to evaluate: pass --checkpoint, --forecasts, or --baseline".into(),
        ));
    }

    let (l, t) = match &model {
        Some(m) => (m.config.context_len, m.config.horizon),
        None => (cfg.model.context_len, cfg.model.horizon),
    };
    let split = split_windows(&data.dataset, l, t, cfg.windows.stride);
    let metric_set = parse_metrics(args.metrics.as_deref())?;
    let hierarchy = if metric_set.wrmsse {
        Some(cfg.resolve_hierarchy(&data.dataset, t)?)
    } else {
        None
    };

    if let Some(alpha) = args.croston_alpha {
        if !args.baseline.iter().any(|b| b == "croston") {
            return Err(Error::Usage(
                "--croston-alpha needs --baseline croston".into(),
            ));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Usage(format!(
                "croston alpha {alpha} must lie in (0, 1]"
            )));
        }
    }

    let mut sources: Vec<(String, MetricReport)> = Vec::new();
    let mut run = |name: &str, forecaster: Forecaster| -> Result<()> {
        let report = evaluate(
            &forecaster,
            &data,
            &split.validation,
            l,
            t,
            hierarchy.as_ref(),
            n_threads,
        )?;
        sources.push((name.to_string(), report));
        Ok(())
    };
    if let Some(m) = &model {
        run("model", Forecaster::Model(m))?;
    }
    if let Some(f) = &fixed {
        run("forecasts", Forecaster::Fixed(f))?;
    }
    for baseline in &args.baseline {
        match baseline.as_str() {
            "naive" => run("naive", Forecaster::Naive)?,
            "croston" => run(
                "croston",
                Forecaster::Croston {
                    alpha: args.croston_alpha.unwrap_or(CROSTON_ALPHA),
                },
            )?,
            other => {
                return Err(Error::Usage(format!(
                    "unknown baseline {other:?} (use naive or croston)"
                )))
            }
        }
    }

    fs::create_dir_all(&args.out)?;
    cfg.echo(&args.out)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &sources)?;
    let summary = summary_lines(&sources);
    fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn analyze_routing(args: &AnalyzeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(z) = args.spike_z {
        cfg.routing.spike_z = z;
    }
    if let Some(z) = args.low_z {
        cfg.routing.low_z = z;
    }
    let model = Model::load(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    check_covariates(&model, &data)?;
    let split = split_windows(
        &data.dataset,
        model.config.context_len,
        model.config.horizon,
        cfg.windows.stride,
    );
    if split.validation.is_empty() {
        return Err(Error::Usage("no windows to analyze".into()));
    }
    let stats = collect_routing(&model, &data, &split.validation, &cfg.routing)?;
    fs::create_dir_all(&args.out)?;
    cfg.echo(&args.out)?;
    fs::write(args.out.join("routing_overall.csv"), routing_overall_csv(&stats))?;
    fs::write(
        args.out.join("routing_conditional.csv"),
        routing_conditional_csv(&stats),
    )?;
    println!(
        "tallied routing over {} windows into {}",
        split.validation.len(),
        args.out.display()
    );
    Ok(())
}
