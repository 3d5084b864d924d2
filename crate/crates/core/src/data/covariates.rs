//! Turning records into numeric model inputs.
//!
//! Every series gets one row-major [n_days, C] feature matrix: day-of-week
//! one-hot, year-position sine/cosine, the record's own channels (price-like
//! ones standardized per series), and one-hot codes for low-cardinality
//! static attributes. Future inputs reuse the same matrix through a column
//! subset holding only channels known in advance.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{Dataset, WindowRef};

/// Attributes with more distinct values than this are left out of the
/// one-hot block (they stay available for hierarchies and grouping).
const MAX_ONEHOT: usize = 32;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct CovariateEncoder {
    pub past_channels: Vec<String>,
    pub future_channels: Vec<String>,
    /// Sorted distinct values per one-hot encoded attribute.
    pub vocab: BTreeMap<String, Vec<String>>,
}

impl CovariateEncoder {
    /// Categorical code for an attribute value: 0 is reserved for unseen
    /// values, known values count from 1 in sorted order.
    pub fn code(&self, attr: &str, value: &str) -> usize {
        self.vocab
            .get(attr)
            .and_then(|vs| vs.binary_search_by(|v| v.as_str().cmp(value)).ok())
            .map_or(0, |i| i + 1)
    }

    pub fn decode(&self, attr: &str, code: usize) -> Option<&str> {
        if code == 0 {
            return None;
        }
        self.vocab.get(attr)?.get(code - 1).map(String::as_str)
    }
}

pub struct EncodedDataset {
    pub dataset: Dataset,
    pub encoder: CovariateEncoder,
    pub c_past: usize,
    pub c_future: usize,
    /// Per series: [n_days, c_full] row-major feature matrix.
    features: Vec<Vec<f64>>,
    c_full: usize,
    past_cols: Vec<usize>,
    future_cols: Vec<usize>,
}

/// Tensors for one mini-batch of windows, laid out series-major: context
/// and targets are [B, L] / [B, T]; covariate rows are (window, day) ->
/// w*L + l and (window, step) -> w*T + t.
pub struct AssembledBatch {
    pub context: Tensor,
    pub past_cov: Option<Tensor>,
    pub future_cov: Option<Tensor>,
    pub targets: Tensor,
}

pub fn encode_covariates(dataset: Dataset) -> Result<EncodedDataset> {
    dataset.validate()?;

    let mut vocab: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in &dataset.series {
        for (k, v) in &r.attrs {
            vocab.entry(k.clone()).or_default().push(v.clone());
        }
    }
    for vs in vocab.values_mut() {
        vs.sort();
        vs.dedup();
    }
    let onehot_attrs: Vec<(String, Vec<String>)> = vocab
        .iter()
        .filter(|(_, vs)| vs.len() <= MAX_ONEHOT)
        .map(|(k, vs)| (k.clone(), vs.clone()))
        .collect();

    // every record must agree on its channel layout
    let proto: Vec<(String, bool, bool)> = dataset.series[0]
        .channels
        .iter()
        .map(|c| (c.name.clone(), c.known_future, c.standardize))
        .collect();
    for r in &dataset.series {
        let layout: Vec<(String, bool, bool)> = r
            .channels
            .iter()
            .map(|c| (c.name.clone(), c.known_future, c.standardize))
            .collect();
        if layout != proto {
            return Err(Error::Data(format!(
                "series {} disagrees on the covariate channel layout",
                r.id
            )));
        }
    }

    let mut names = Vec::new();
    let mut known = Vec::new();
    for d in 0..7 {
        names.push(format!("dow_{d}"));
        known.push(true);
    }
    names.push("year_sin".into());
    known.push(true);
    names.push("year_cos".into());
    known.push(true);
    for (name, future, _) in &proto {
        names.push(name.clone());
        known.push(*future);
    }
    for (attr, values) in &onehot_attrs {
        for v in values {
            names.push(format!("{attr}={v}"));
            known.push(true);
        }
    }
    let c_full = names.len();
    let past_cols: Vec<usize> = (0..c_full).collect();
    let future_cols: Vec<usize> = (0..c_full).filter(|&c| known[c]).collect();

    let n = dataset.calendar.n_days;
    let mut features = Vec::with_capacity(dataset.series.len());
    for r in &dataset.series {
        // per-series standardization constants for flagged channels
        let stats: Vec<Option<(f64, f64)>> = r
            .channels
            .iter()
            .map(|ch| {
                ch.standardize.then(|| {
                    let mean = ch.values.iter().sum::<f64>() / n as f64;
                    let var =
                        ch.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    (mean, var.sqrt().max(STD_FLOOR))
                })
            })
            .collect();
        let mut m = vec![0.0; n * c_full];
        for day in 0..n {
            let row = &mut m[day * c_full..(day + 1) * c_full];
            row[dataset.calendar.weekday[day] % 7] = 1.0;
            let angle = std::f64::consts::TAU * dataset.calendar.year_frac[day];
            row[7] = angle.sin();
            row[8] = angle.cos();
            let mut c = 9;
            for (ch, stat) in r.channels.iter().zip(&stats) {
                row[c] = match stat {
                    Some((mean, std)) => (ch.values[day] - mean) / std,
                    None => ch.values[day],
                };
                c += 1;
            }
            for (attr, values) in &onehot_attrs {
                if let Some(v) = r.attrs.get(attr) {
                    if let Ok(i) = values.binary_search(v) {
                        row[c + i] = 1.0;
                    }
                }
                c += values.len();
            }
        }
        features.push(m);
    }

    let past_channels = past_cols.iter().map(|&c| names[c].clone()).collect();
    let future_channels = future_cols.iter().map(|&c| names[c].clone()).collect();
    Ok(EncodedDataset {
        dataset,
        encoder: CovariateEncoder {
            past_channels,
            future_channels,
            vocab,
        },
        c_past: past_cols.len(),
        c_future: future_cols.len(),
        features,
        c_full,
        past_cols,
        future_cols,
    })
}

impl EncodedDataset {
    pub fn feature_row(&self, series: usize, day: usize, cols: &[usize], out: &mut [f64]) {
        let row = &self.features[series][day * self.c_full..(day + 1) * self.c_full];
        for (o, &c) in out.iter_mut().zip(cols) {
            *o = row[c];
        }
    }

    /// Materialize one batch of windows.
    pub fn assemble(&self, windows: &[WindowRef], l: usize, t: usize) -> Result<AssembledBatch> {
        if windows.is_empty() {
            return Err(Error::Usage("cannot assemble an empty batch".into()));
        }
        let b = windows.len();
        let mut context = vec![0.0; b * l];
        let mut targets = vec![0.0; b * t];
        let mut past = vec![0.0; b * l * self.c_past];
        let mut future = vec![0.0; b * t * self.c_future];

        for (w, win) in windows.iter().enumerate() {
            let r = self
                .dataset
                .series
                .get(win.series)
                .ok_or_else(|| Error::Usage(format!("window names series {}", win.series)))?;
            if win.origin < l || win.origin + t > r.demand.len() {
                return Err(Error::Usage(format!(
                    "window at origin {} does not fit series {} of length {}",
                    win.origin,
                    r.id,
                    r.demand.len()
                )));
            }
            for (j, day) in (win.origin - l..win.origin).enumerate() {
                context[w * l + j] = r.demand[day] as f64;
                let row = w * l + j;
                self.feature_row(
                    win.series,
                    day,
                    &self.past_cols,
                    &mut past[row * self.c_past..(row + 1) * self.c_past],
                );
            }
            for (j, day) in (win.origin..win.origin + t).enumerate() {
                targets[w * t + j] = r.demand[day] as f64;
                let row = w * t + j;
                self.feature_row(
                    win.series,
                    day,
                    &self.future_cols,
                    &mut future[row * self.c_future..(row + 1) * self.c_future],
                );
            }
        }

        Ok(AssembledBatch {
            context: Tensor::new(vec![b, l], context)?,
            past_cov: (self.c_past > 0)
                .then(|| Tensor::new(vec![b * l, self.c_past], past))
                .transpose()?,
            future_cov: (self.c_future > 0)
                .then(|| Tensor::new(vec![b * t, self.c_future], future))
                .transpose()?,
            targets: Tensor::new(vec![b, t], targets)?,
        })
    }
}
