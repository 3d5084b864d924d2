//! The run configuration: one TOML file covering the model, training,
//! windowing, data generation, forecasting, routing analysis, and the
//! WRMSSE hierarchy. Every field has a default, and every command echoes
//! its effective configuration into the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use forecaster_core::data::{Dataset, SyntheticSpec};
use forecaster_core::eval::{attribute_hierarchy, Grouping, Hierarchy};
use forecaster_core::model::ModelConfig;
use forecaster_core::routing::RegimeThresholds;
use forecaster_core::training::TrainConfig;
use forecaster_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowsConfig {
    /// Stride between training forecast origins, in days.
    pub stride: usize,
}

impl Default for WindowsConfig {
    fn default() -> Self {
        Self { stride: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    Point,
    Quantiles,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub mode: ForecastMode,
    pub quantiles: Vec<f64>,
    /// Sample paths per series in samples mode.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            mode: ForecastMode::Point,
            quantiles: vec![0.1, 0.5, 0.9],
            samples: 100,
            seed: 0,
        }
    }
}

/// One hierarchy level: either a grouping keyword ("total" or "series") or
/// a list of static attributes whose value combinations become the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub levels: Vec<LevelConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub windows: WindowsConfig,
    pub synthetic: SyntheticSpec,
    pub routing: RegimeThresholds,
    pub forecast: ForecastConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<HierarchyConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Write the effective configuration next to the run's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(out_dir.join("config.echo"), text)?;
        Ok(())
    }

    /// Resolve the WRMSSE hierarchy: an explicit [hierarchy] section wins,
    /// otherwise M5 attributes select the 12 M5 levels and a category
    /// attribute selects total/category/series.
    pub fn resolve_hierarchy(&self, dataset: &Dataset, holdout: usize) -> Result<Hierarchy> {
        if let Some(h) = &self.hierarchy {
            let mut groupings = Vec::with_capacity(h.levels.len());
            for level in &h.levels {
                let grouping = match (level.grouping.as_deref(), level.attributes.is_empty()) {
                    (Some("total"), true) => Grouping::Total,
                    (Some("series"), true) => Grouping::PerSeries,
                    (None, false) => Grouping::By(level.attributes.clone()),
                    (Some(other), _) => {
                        return Err(Error::Config(format!(
                            "hierarchy level {}: unknown grouping {other:?} \
                             (use \"total\", \"series\", or attributes = [..])",
                            level.name
                        )))
                    }
                    (None, true) => {
                        return Err(Error::Config(format!(
                            "hierarchy level {} needs grouping = \"total\"/\"series\" \
                             or a nonempty attributes list",
                            level.name
                        )))
                    }
                };
                groupings.push((level.name.clone(), grouping));
            }
            return attribute_hierarchy(dataset, &groupings, holdout);
        }
        let attrs = dataset
            .series
            .first()
            .map(|r| &r.attrs)
            .ok_or_else(|| Error::Usage("dataset has no series".into()))?;
        if attrs.contains_key("state_id") {
            forecaster_core::eval::m5_hierarchy(dataset, holdout)
        } else if attrs.contains_key("category") {
            forecaster_core::eval::synthetic_hierarchy(dataset, holdout)
        } else {
            Err(Error::Config(
                "wrmsse needs a hierarchy: add a [hierarchy] section with \
                 [[hierarchy.levels]] entries (grouping = \"total\"/\"series\" or \
                 attributes = [\"attr\", ..]) to the config file"
                    .into(),
            ))
        }
    }
}
