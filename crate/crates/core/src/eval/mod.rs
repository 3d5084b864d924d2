//! Forecast metrics and classical baselines.
//!
//! WAPE pools absolute errors against absolute actuals, MASE scales by the
//! in-sample naive error, RMSE is the usual root mean square. WRMSSE and
//! the evaluation runner live in [`report`].

mod report;

use crate::{Error, Result};

pub use report::{
    attribute_hierarchy, evaluate, m5_hierarchy, synthetic_hierarchy, wrmsse, Forecaster,
    Grouping, Hierarchy, Level, MetricReport, Node, SeriesMetrics, WrmsseReport,
};

fn check_lengths(forecast: &[f64], actual: &[f64]) -> Result<()> {
    if forecast.len() != actual.len() {
        return Err(Error::Shape(format!(
            "forecast has {} steps, actuals {}",
            forecast.len(),
            actual.len()
        )));
    }
    if forecast.is_empty() {
        return Err(Error::Shape("metrics need at least one step".into()));
    }
    Ok(())
}

/// Weighted absolute percentage error, 100 * sum|y-f| / sum|y|. All-zero
/// actuals leave the metric undefined (None).
pub fn wape(forecast: &[f64], actual: &[f64]) -> Result<Option<f64>> {
    check_lengths(forecast, actual)?;
    let num: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, y)| (y - f).abs())
        .sum();
    let den: f64 = actual.iter().map(|y| y.abs()).sum();
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some(100.0 * num / den))
}

/// WAPE pooled across several series: numerators and denominators add up,
/// so high-volume series weigh more. Series whose actuals are entirely zero
/// are skipped rather than polluting the ratio.
#[derive(Debug, Clone, Default)]
pub struct PooledWape {
    num: f64,
    den: f64,
    pub used: usize,
    pub skipped: usize,
}

impl PooledWape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, forecast: &[f64], actual: &[f64]) -> Result<()> {
        check_lengths(forecast, actual)?;
        let den: f64 = actual.iter().map(|y| y.abs()).sum();
        if den == 0.0 {
            self.skipped += 1;
            return Ok(());
        }
        let num: f64 = forecast
            .iter()
            .zip(actual)
            .map(|(f, y)| (y - f).abs())
            .sum();
        self.num += num;
        self.den += den;
        self.used += 1;
        Ok(())
    }

    pub fn value(&self) -> Option<f64> {
        (self.den > 0.0).then(|| 100.0 * self.num / self.den)
    }
}

/// Mean absolute scaled error against the seasonal-naive in-sample scale
/// with period `m`. A constant in-sample series has zero scale and leaves
/// the metric undefined.
pub fn mase(forecast: &[f64], actual: &[f64], in_sample: &[f64], m: usize) -> Result<Option<f64>> {
    check_lengths(forecast, actual)?;
    if m == 0 {
        return Err(Error::Usage("seasonality must be at least 1".into()));
    }
    if in_sample.len() <= m {
        return Err(Error::Usage(format!(
            "MASE scale needs more than {m} in-sample points, got {}",
            in_sample.len()
        )));
    }
    let scale: f64 = in_sample
        .windows(m + 1)
        .map(|w| (w[m] - w[0]).abs())
        .sum::<f64>()
        / (in_sample.len() - m) as f64;
    if scale == 0.0 {
        return Ok(None);
    }
    let err: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, y)| (y - f).abs())
        .sum::<f64>()
        / forecast.len() as f64;
    Ok(Some(err / scale))
}

pub fn rmse(forecast: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(forecast, actual)?;
    let sq: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, y)| (y - f) * (y - f))
        .sum();
    Ok((sq / forecast.len() as f64).sqrt())
}

/// Repeat the last observed value over the horizon.
pub fn naive_forecast(in_sample: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *in_sample
        .last()
        .ok_or_else(|| Error::Usage("naive forecast needs at least one observation".into()))?;
    Ok(vec![last; horizon])
}

pub const CROSTON_ALPHA: f64 = 0.1;

/// Croston's method in its biased form: exponential smoothing of positive
/// demand sizes and of inter-demand intervals, both initialized at the
/// first demand event and updated only on demand days. The forecast is the
/// flat rate size/interval with no Syntetos-Boylan correction.
pub fn croston_forecast(in_sample: &[f64], horizon: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "smoothing constant {alpha} must lie in [0, 1]"
        )));
    }
    let mut size: Option<f64> = None;
    let mut interval = 0.0;
    let mut gap = 0.0;
    for &y in in_sample {
        gap += 1.0;
        if y <= 0.0 {
            continue;
        }
        match size {
            None => {
                size = Some(y);
                interval = gap;
            }
            Some(z) => {
                size = Some(alpha * y + (1.0 - alpha) * z);
                interval = alpha * gap + (1.0 - alpha) * interval;
            }
        }
        gap = 0.0;
    }
    let size =
        size.ok_or_else(|| Error::Usage("Croston needs at least one demand event".into()))?;
    Ok(vec![size / interval; horizon])
}
