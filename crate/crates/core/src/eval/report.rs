//! Hierarchical WRMSSE and the evaluation runner shared by the model and
//! the classical baselines.

use std::collections::BTreeMap;

use crate::data::{Dataset, EncodedDataset, WindowRef};
use crate::model::{forward, BatchInput, DecodePlan, Model, RunMode};
use crate::tensor::Tape;
use crate::{Error, Result};

use super::{croston_forecast, mase, naive_forecast, wape, PooledWape};

/// Days of in-sample history, counted back from the forecast origin, whose
/// revenue sets the hierarchy weights.
pub const WEIGHT_WINDOW: usize = 28;

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub series: Vec<usize>,
    /// Revenue share within the level; each level's weights sum to 1.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Level {
    pub name: String,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    pub fn validate(&self, n_series: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("hierarchy has no levels".into()));
        }
        for level in &self.levels {
            if level.nodes.is_empty() {
                return Err(Error::Config(format!("level {} has no nodes", level.name)));
            }
            let mut total = 0.0;
            for node in &level.nodes {
                if node.series.is_empty() {
                    return Err(Error::Config(format!(
                        "node {}/{} covers no series",
                        level.name, node.name
                    )));
                }
                for &s in &node.series {
                    if s >= n_series {
                        return Err(Error::Config(format!(
                            "node {}/{} references series {s}, but only {n_series} exist",
                            level.name, node.name
                        )));
                    }
                }
                total += node.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "weights in level {} sum to {total}, not 1",
                    level.name
                )));
            }
        }
        Ok(())
    }
}

/// How one hierarchy level assigns series to nodes.
#[derive(Debug, Clone)]
pub enum Grouping {
    /// A single node covering every series.
    Total,
    /// One node per series.
    PerSeries,
    /// One node per distinct combination of the named static attributes.
    By(Vec<String>),
}

/// Revenue of one series over the weight window ending at the forecast
/// origin: demand times the `price` channel where present, demand alone
/// otherwise.
fn revenue(dataset: &Dataset, series: usize, holdout: usize) -> f64 {
    let r = &dataset.series[series];
    let len = r.demand.len();
    let end = len.saturating_sub(holdout);
    let start = end.saturating_sub(WEIGHT_WINDOW);
    let price = r.channels.iter().find(|c| c.name == "price");
    (start..end)
        .map(|d| {
            let p = price.map_or(1.0, |c| c.values[d]);
            f64::from(r.demand[d]) * p
        })
        .sum()
}

/// Build a hierarchy from attribute groupings, weighting each node by its
/// revenue share over the last [`WEIGHT_WINDOW`] in-sample days (`holdout`
/// trailing days are excluded as the evaluation horizon). A level whose
/// total revenue is zero falls back to equal node weights.
pub fn attribute_hierarchy(
    dataset: &Dataset,
    groupings: &[(String, Grouping)],
    holdout: usize,
) -> Result<Hierarchy> {
    if dataset.series.is_empty() {
        return Err(Error::Usage("cannot build a hierarchy over zero series".into()));
    }
    let revenues: Vec<f64> = (0..dataset.series.len())
        .map(|s| revenue(dataset, s, holdout))
        .collect();

    let mut levels = Vec::new();
    for (level_name, grouping) in groupings {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        match grouping {
            Grouping::Total => {
                groups.insert("total".into(), (0..dataset.series.len()).collect());
            }
            Grouping::PerSeries => {
                for (s, r) in dataset.series.iter().enumerate() {
                    groups.insert(r.id.clone(), vec![s]);
                }
            }
            Grouping::By(attrs) => {
                for (s, r) in dataset.series.iter().enumerate() {
                    let mut key = String::new();
                    for (i, a) in attrs.iter().enumerate() {
                        let v = r.attrs.get(a).ok_or_else(|| {
                            Error::Data(format!(
                                "series {} has no attribute {a} needed by level {level_name}",
                                r.id
                            ))
                        })?;
                        if i > 0 {
                            key.push('/');
                        }
                        key.push_str(v);
                    }
                    groups.entry(key).or_default().push(s);
                }
            }
        }

        let level_revenue: f64 = groups
            .values()
            .flat_map(|series| series.iter().map(|&s| revenues[s]))
            .sum();
        let nodes = groups
            .into_iter()
            .map(|(name, series)| {
                // a level with zero total revenue falls back to count share
                let weight = if level_revenue > 0.0 {
                    series.iter().map(|&s| revenues[s]).sum::<f64>() / level_revenue
                } else {
                    series.len() as f64 / dataset.series.len() as f64
                };
                Node {
                    name,
                    series,
                    weight,
                }
            })
            .collect();
        levels.push(Level {
            name: level_name.clone(),
            nodes,
        });
    }
    let hierarchy = Hierarchy { levels };
    hierarchy.validate(dataset.series.len())?;
    Ok(hierarchy)
}

/// Total, per-category, per-series: the hierarchy used for synthetic data.
pub fn synthetic_hierarchy(dataset: &Dataset, holdout: usize) -> Result<Hierarchy> {
    attribute_hierarchy(
        dataset,
        &[
            ("total".into(), Grouping::Total),
            ("category".into(), Grouping::By(vec!["category".into()])),
            ("series".into(), Grouping::PerSeries),
        ],
        holdout,
    )
}

/// The twelve M5 aggregation levels, from the grand total down to the
/// individual item-store series.
pub fn m5_hierarchy(dataset: &Dataset, holdout: usize) -> Result<Hierarchy> {
    let by = |attrs: &[&str]| Grouping::By(attrs.iter().map(|a| a.to_string()).collect());
    attribute_hierarchy(
        dataset,
        &[
            ("total".into(), Grouping::Total),
            ("state".into(), by(&["state_id"])),
            ("store".into(), by(&["store_id"])),
            ("category".into(), by(&["cat_id"])),
            ("department".into(), by(&["dept_id"])),
            ("state-category".into(), by(&["state_id", "cat_id"])),
            ("state-department".into(), by(&["state_id", "dept_id"])),
            ("store-category".into(), by(&["store_id", "cat_id"])),
            ("store-department".into(), by(&["store_id", "dept_id"])),
            ("item".into(), by(&["item_id"])),
            ("item-state".into(), by(&["item_id", "state_id"])),
            ("series".into(), Grouping::PerSeries),
        ],
        holdout,
    )
}

/// Root mean squared scaled error: forecast error relative to the
/// in-sample one-step naive error, both as mean squares. None when the
/// in-sample series is too short or constant.
fn rmsse(forecast: &[f64], actual: &[f64], in_sample: &[f64]) -> Option<f64> {
    if in_sample.len() < 2 {
        return None;
    }
    let denom: f64 = in_sample
        .windows(2)
        .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
        .sum::<f64>()
        / (in_sample.len() - 1) as f64;
    if denom == 0.0 {
        return None;
    }
    let num: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, y)| (y - f) * (y - f))
        .sum::<f64>()
        / forecast.len() as f64;
    Some((num / denom).sqrt())
}

#[derive(Debug, Clone)]
pub struct WrmsseReport {
    pub total: f64,
    /// Per-level weighted score, in hierarchy order.
    pub levels: Vec<(String, f64)>,
    /// Nodes (level/node) dropped for a zero in-sample denominator; their
    /// weight is renormalized away.
    pub excluded: Vec<String>,
}

/// M5-style weighted RMSSE: per node, the RMSSE of the aggregated series;
/// revenue weights within a level; equal weight across levels.
pub fn wrmsse(
    forecasts: &[Vec<f64>],
    actuals: &[Vec<f64>],
    in_samples: &[Vec<f64>],
    hierarchy: &Hierarchy,
) -> Result<WrmsseReport> {
    let n = forecasts.len();
    if actuals.len() != n || in_samples.len() != n {
        return Err(Error::Shape(format!(
            "{n} forecasts, {} actuals, {} in-sample series",
            actuals.len(),
            in_samples.len()
        )));
    }
    hierarchy.validate(n)?;

    let aggregate = |slices: &[Vec<f64>], series: &[usize]| -> Result<Vec<f64>> {
        let len = slices[series[0]].len();
        let mut out = vec![0.0; len];
        for &s in series {
            if slices[s].len() != len {
                return Err(Error::Shape(format!(
                    "series {s} has {} steps where its node expects {len}",
                    slices[s].len()
                )));
            }
            for (o, v) in out.iter_mut().zip(&slices[s]) {
                *o += v;
            }
        }
        Ok(out)
    };

    let mut levels = Vec::new();
    let mut excluded = Vec::new();
    for level in &hierarchy.levels {
        let mut kept_weight = 0.0;
        let mut score = 0.0;
        let mut kept = 0usize;
        for node in &level.nodes {
            let f = aggregate(forecasts, &node.series)?;
            let y = aggregate(actuals, &node.series)?;
            let ins = aggregate(in_samples, &node.series)?;
            match rmsse(&f, &y, &ins) {
                Some(v) => {
                    score += node.weight * v;
                    kept_weight += node.weight;
                    kept += 1;
                }
                None => excluded.push(format!("{}/{}", level.name, node.name)),
            }
        }
        if kept == 0 {
            excluded.push(format!("{} (entire level)", level.name));
            continue;
        }
        let value = if kept_weight > 0.0 {
            score / kept_weight
        } else {
            // every kept node carries zero revenue; fall back to their mean
            score / kept as f64
        };
        levels.push((level.name.clone(), value));
    }
    if levels.is_empty() {
        return Err(Error::Numerical(
            "every hierarchy node has a zero in-sample denominator".into(),
        ));
    }
    let total = levels.iter().map(|(_, v)| v).sum::<f64>() / levels.len() as f64;
    Ok(WrmsseReport {
        total,
        levels,
        excluded,
    })
}

/// What produces the forecasts under evaluation.
pub enum Forecaster<'a> {
    Model(&'a Model),
    Naive,
    Croston { alpha: f64 },
    /// Precomputed horizon forecasts keyed by series index; usable only
    /// when every evaluated series has a single window.
    Fixed(&'a BTreeMap<usize, Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct SeriesMetrics {
    pub id: String,
    pub wape: Option<f64>,
    pub mase: Option<f64>,
    pub rmse: f64,
}

#[derive(Debug)]
pub struct MetricReport {
    pub per_series: Vec<SeriesMetrics>,
    /// Pooled across series: sum of absolute errors over sum of actuals.
    pub wape: Option<f64>,
    /// Mean of the defined per-series MASE values.
    pub mase: Option<f64>,
    /// Mean of the per-series RMSE values.
    pub rmse: f64,
    pub wrmsse: Option<WrmsseReport>,
    pub evaluated: usize,
    pub skipped_wape: usize,
    pub skipped_mase: usize,
}

struct SeriesOutcome {
    series: usize,
    metrics: SeriesMetrics,
    /// Flattened (forecast, actual) over all this series' windows, pooled
    /// into the aggregate WAPE.
    flat: (Vec<f64>, Vec<f64>),
    /// Forecast origin plus the horizon forecast when the series has
    /// exactly one window; hierarchical scoring needs this alignment.
    holdout: Option<(usize, Vec<f64>)>,
}

fn forecast_windows(
    forecaster: &Forecaster,
    data: &EncodedDataset,
    series: usize,
    origins: &[usize],
    l: usize,
    t: usize,
) -> Result<Vec<Vec<f64>>> {
    let demand = &data.dataset.series[series].demand;
    match forecaster {
        Forecaster::Naive | Forecaster::Croston { .. } => origins
            .iter()
            .map(|&o| {
                let in_sample: Vec<f64> = demand[..o].iter().map(|&y| f64::from(y)).collect();
                match forecaster {
                    Forecaster::Naive => naive_forecast(&in_sample, t),
                    Forecaster::Croston { alpha } => {
                        // no demand event in the history means a zero rate
                        if in_sample.iter().all(|&y| y == 0.0) {
                            Ok(vec![0.0; t])
                        } else {
                            croston_forecast(&in_sample, t, *alpha)
                        }
                    }
                    _ => unreachable!(),
                }
            })
            .collect(),
        Forecaster::Fixed(stored) => {
            if origins.len() != 1 {
                return Err(Error::Usage(
                    "stored forecasts support one window per series".into(),
                ));
            }
            let f = stored.get(&series).ok_or_else(|| {
                Error::Usage(format!(
                    "no stored forecast for series {}",
                    data.dataset.series[series].id
                ))
            })?;
            if f.len() != t {
                return Err(Error::Shape(format!(
                    "stored forecast for series {} has {} steps, horizon is {t}",
                    data.dataset.series[series].id,
                    f.len()
                )));
            }
            Ok(vec![f.clone()])
        }
        Forecaster::Model(model) => {
            let windows: Vec<WindowRef> = origins
                .iter()
                .map(|&origin| WindowRef { series, origin })
                .collect();
            let batch = data.assemble(&windows, l, t)?;
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
            let mut per_window = vec![vec![0.0; t]; origins.len()];
            for (step, sp) in out.steps.iter().enumerate() {
                let means = &tape.value(sp.mean).values;
                for (w, f) in per_window.iter_mut().enumerate() {
                    f[step] = means[w];
                }
            }
            Ok(per_window)
        }
    }
}

fn evaluate_series(
    forecaster: &Forecaster,
    data: &EncodedDataset,
    series: usize,
    origins: &[usize],
    l: usize,
    t: usize,
) -> Result<SeriesOutcome> {
    let demand = &data.dataset.series[series].demand;
    let forecasts = forecast_windows(forecaster, data, series, origins, l, t)?;

    let mut flat_f = Vec::with_capacity(origins.len() * t);
    let mut flat_y = Vec::with_capacity(origins.len() * t);
    let mut mases = Vec::new();
    for (&origin, f) in origins.iter().zip(&forecasts) {
        let actual: Vec<f64> = demand[origin..origin + t]
            .iter()
            .map(|&y| f64::from(y))
            .collect();
        let in_sample: Vec<f64> = demand[..origin].iter().map(|&y| f64::from(y)).collect();
        if in_sample.len() > 1 {
            if let Some(m) = mase(f, &actual, &in_sample, 1)? {
                mases.push(m);
            }
        }
        flat_f.extend_from_slice(f);
        flat_y.extend(actual);
    }

    let metrics = SeriesMetrics {
        id: data.dataset.series[series].id.clone(),
        wape: wape(&flat_f, &flat_y)?,
        mase: (!mases.is_empty()).then(|| mases.iter().sum::<f64>() / mases.len() as f64),
        rmse: super::rmse(&flat_f, &flat_y)?,
    };
    let holdout = (origins.len() == 1).then(|| (origins[0], forecasts[0].clone()));
    Ok(SeriesOutcome {
        series,
        metrics,
        flat: (flat_f, flat_y),
        holdout,
    })
}

/// Score a forecaster over the given windows: free-running decode for the
/// model, full history before each origin for the baselines, identical
/// origins either way. `threads` caps the per-series fan-out; results are
/// merged in series order, so the thread count never changes the report.
pub fn evaluate(
    forecaster: &Forecaster,
    data: &EncodedDataset,
    windows: &[WindowRef],
    l: usize,
    t: usize,
    hierarchy: Option<&Hierarchy>,
    threads: usize,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::Usage("no evaluation windows".into()));
    }
    if let Forecaster::Model(m) = forecaster {
        if m.config.context_len != l || m.config.horizon != t {
            return Err(Error::Usage(format!(
                "model was built for context {} and horizon {}, asked to evaluate {l}/{t}",
                m.config.context_len, m.config.horizon
            )));
        }
    }

    let mut by_series: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for w in windows {
        by_series.entry(w.series).or_default().push(w.origin);
    }
    for origins in by_series.values_mut() {
        origins.sort_unstable();
        origins.dedup();
    }
    let tasks: Vec<(usize, Vec<usize>)> = by_series.into_iter().collect();

    let outcomes: Vec<SeriesOutcome> = if threads <= 1 || tasks.len() <= 1 {
        tasks
            .iter()
            .map(|(s, origins)| evaluate_series(forecaster, data, *s, origins, l, t))
            .collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|(s, origins)| {
                                evaluate_series(forecaster, data, *s, origins, l, t)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };

    let mut pool = PooledWape::new();
    let mut per_series = Vec::with_capacity(outcomes.len());
    let mut mase_sum = 0.0;
    let mut mase_n = 0usize;
    let mut rmse_sum = 0.0;
    for o in &outcomes {
        pool.add(&o.flat.0, &o.flat.1)?;
        if let Some(m) = o.metrics.mase {
            mase_sum += m;
            mase_n += 1;
        }
        rmse_sum += o.metrics.rmse;
        per_series.push(o.metrics.clone());
    }

    let wrmsse_report = match hierarchy {
        None => None,
        Some(h) => {
            let n = data.dataset.series.len();
            let mut forecasts = vec![Vec::new(); n];
            let mut actuals = vec![Vec::new(); n];
            let mut in_samples = vec![Vec::new(); n];
            let mut covered = vec![false; n];
            for o in &outcomes {
                let (origin, f) = o.holdout.as_ref().ok_or_else(|| {
                    Error::Usage(
                        "hierarchical evaluation expects one forecast origin per series".into(),
                    )
                })?;
                let demand = &data.dataset.series[o.series].demand;
                forecasts[o.series] = f.clone();
                actuals[o.series] = demand[*origin..origin + t]
                    .iter()
                    .map(|&y| f64::from(y))
                    .collect();
                in_samples[o.series] = demand[..*origin].iter().map(|&y| f64::from(y)).collect();
                covered[o.series] = true;
            }
            for level in &h.levels {
                for node in &level.nodes {
                    for &s in &node.series {
                        if !covered[s] {
                            return Err(Error::Usage(format!(
                                "hierarchy node {}/{} needs series {s}, which has no window",
                                level.name, node.name
                            )));
                        }
                    }
                }
            }
            Some(wrmsse(&forecasts, &actuals, &in_samples, h)?)
        }
    };

    Ok(MetricReport {
        evaluated: per_series.len(),
        skipped_wape: pool.skipped,
        skipped_mase: per_series.len() - mase_n,
        wape: pool.value(),
        mase: (mase_n > 0).then(|| mase_sum / mase_n as f64),
        rmse: rmse_sum / per_series.len() as f64,
        wrmsse: wrmsse_report,
        per_series,
    })
}
