//! Dataset model, forecast-origin windowing, and batch assembly.
//!
//! A dataset is a set of aligned daily series: every series spans the same
//! calendar, carries its raw demand counts, optional named covariate
//! channels, and static attributes used for grouping (hierarchies, one-hot
//! codes). Synthetic datasets additionally keep the generating hurdle
//! parameters per day so calibration can be checked against ground truth.

pub mod covariates;
pub mod m5;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use covariates::{encode_covariates, AssembledBatch, CovariateEncoder, EncodedDataset};
pub use m5::load_m5;
pub use synthetic::{generate_synthetic, load_synthetic, save_synthetic, SyntheticSpec};

/// One named per-day covariate channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
    /// Whether the channel is known in advance and may enter future inputs.
    pub known_future: bool,
    /// Standardize per series (mean/std) before feeding the model.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: String,
    pub demand: Vec<u32>,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub channels: Vec<Channel>,
}

/// Per-day generating parameters for one synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTruth {
    pub id: String,
    pub p_plus: Vec<f64>,
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Shared day axis: weekday index and position within the year.
#[derive(Debug, Clone, PartialEq)]
pub struct Calendar {
    pub n_days: usize,
    pub weekday: Vec<usize>,
    pub year_frac: Vec<f64>,
}

impl Calendar {
    /// Synthetic calendar: the week cycles every 7 days, the year every 365.
    pub fn cyclic(n_days: usize) -> Self {
        Self {
            n_days,
            weekday: (0..n_days).map(|d| d % 7).collect(),
            year_frac: (0..n_days).map(|d| (d % 365) as f64 / 365.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<SeriesRecord>,
    pub calendar: Calendar,
    pub truth: Option<Vec<SeriesTruth>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::Data("dataset holds no series".into()));
        }
        let n = self.calendar.n_days;
        if self.calendar.weekday.len() != n || self.calendar.year_frac.len() != n {
            return Err(Error::Data("calendar arrays disagree on day count".into()));
        }
        for r in &self.series {
            if r.demand.len() != n {
                return Err(Error::Data(format!(
                    "series {} has {} days, calendar has {n}",
                    r.id,
                    r.demand.len()
                )));
            }
            for ch in &r.channels {
                if ch.values.len() != n {
                    return Err(Error::Data(format!(
                        "series {} channel {} has {} days, expected {n}",
                        r.id,
                        ch.name,
                        ch.values.len()
                    )));
                }
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.series.len() {
                return Err(Error::Data("ground truth does not cover every series".into()));
            }
            for (t, r) in truth.iter().zip(&self.series) {
                if t.p_plus.len() != n || t.mu.len() != n || t.alpha.len() != n || t.id != r.id {
                    return Err(Error::Data(format!(
                        "ground truth for {} is misaligned",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One forecast task: context is days [origin-L, origin), targets are
/// [origin, origin+T).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub series: usize,
    pub origin: usize,
}

/// Strided forecast origins for a series of the given length, earliest
/// first, with the final window right-aligned to the series end. Empty when
/// the series cannot hold even one window.
pub fn window_origins(len: usize, l: usize, t: usize, stride: usize) -> Vec<usize> {
    if stride == 0 || l == 0 || t == 0 || len < l + t {
        return Vec::new();
    }
    let last = len - t;
    let mut origins: Vec<usize> = (l..=last).step_by(stride).collect();
    if *origins.last().unwrap() != last {
        origins.push(last);
    }
    origins
}

#[derive(Debug, Clone)]
pub struct WindowSplit {
    pub train: Vec<WindowRef>,
    pub validation: Vec<WindowRef>,
    /// Series too short to yield both a training and a validation window.
    pub skipped: usize,
}

/// Forecast-origin split: the last `t` days of every series are held out as
/// the validation horizon; training windows draw strided origins from the
/// remaining prefix.
pub fn split_windows(dataset: &Dataset, l: usize, t: usize, stride: usize) -> WindowSplit {
    let mut split = WindowSplit {
        train: Vec::new(),
        validation: Vec::new(),
        skipped: 0,
    };
    for (series, r) in dataset.series.iter().enumerate() {
        let len = r.demand.len();
        if len < l + 2 * t {
            split.skipped += 1;
            continue;
        }
        for origin in window_origins(len - t, l, t, stride) {
            split.train.push(WindowRef { series, origin });
        }
        split.validation.push(WindowRef {
            series,
            origin: len - t,
        });
    }
    split
}
