//! Expert-utilization statistics: which expert each encoder token routes
//! to, overall and conditioned on the token's demand regime.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedDataset, WindowRef};
use crate::model::{encoder_forward, BatchInput, GateMode, Model, RunMode};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Z-score cutoffs separating the demand regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeThresholds {
    pub spike_z: f64,
    pub low_z: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            spike_z: 2.0,
            low_z: -0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Zero,
    Low,
    Normal,
    Spike,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Zero, Regime::Low, Regime::Normal, Regime::Spike];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Zero => "zero",
            Regime::Low => "low",
            Regime::Normal => "normal",
            Regime::Spike => "spike",
        }
    }

    fn index(self) -> usize {
        match self {
            Regime::Zero => 0,
            Regime::Low => 1,
            Regime::Normal => 2,
            Regime::Spike => 3,
        }
    }
}

/// Mean and population standard deviation over the full series, the std
/// floored at 1e-8 so constant series still z-score cleanly.
pub fn series_stats(demand: &[u32]) -> (f64, f64) {
    let n = demand.len().max(1) as f64;
    let mean = demand.iter().map(|&y| f64::from(y)).sum::<f64>() / n;
    let var = demand
        .iter()
        .map(|&y| {
            let d = f64::from(y) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt().max(1e-8))
}

/// Label each day: zero demand is its own regime regardless of z-score;
/// positive days split into spike, low, and normal by their z-score.
pub fn label_regimes(
    demand: &[u32],
    mean: f64,
    std: f64,
    thresholds: &RegimeThresholds,
) -> Vec<Regime> {
    demand
        .iter()
        .map(|&y| {
            if y == 0 {
                return Regime::Zero;
            }
            let z = (f64::from(y) - mean) / std;
            if z > thresholds.spike_z {
                Regime::Spike
            } else if z < thresholds.low_z {
                Regime::Low
            } else {
                Regime::Normal
            }
        })
        .collect()
}

/// Token counts per expert, overall and per regime.
#[derive(Debug, Clone)]
pub struct RoutingStats {
    pub thresholds: RegimeThresholds,
    /// overall[layer][expert]
    pub overall: Vec<Vec<u64>>,
    /// conditional[regime][layer][expert], regimes in [`Regime::ALL`] order
    pub conditional: Vec<Vec<Vec<u64>>>,
}

impl RoutingStats {
    pub fn layer_total(&self, layer: usize) -> u64 {
        self.overall[layer].iter().sum()
    }

    /// Overall share of each expert within a layer, as fractions.
    pub fn layer_shares(&self, layer: usize) -> Vec<f64> {
        let total = self.layer_total(layer).max(1) as f64;
        self.overall[layer]
            .iter()
            .map(|&c| c as f64 / total)
            .collect()
    }

    /// Percentages per expert within one (regime, layer) cell, normalized
    /// to 100; None when the regime has no tokens in that layer.
    pub fn conditional_percentages(&self, regime: Regime, layer: usize) -> Option<Vec<f64>> {
        let counts = &self.conditional[regime.index()][layer];
        let total: u64 = counts.iter().sum();
        (total > 0).then(|| {
            counts
                .iter()
                .map(|&c| 100.0 * c as f64 / total as f64)
                .collect()
        })
    }
}

/// Run the encoder over the given windows in inference mode and tally the
/// selected expert for every token, overall and by the regime of the
/// token's day. Requires discrete top-1 gating.
pub fn collect_routing(
    model: &Model,
    data: &EncodedDataset,
    windows: &[WindowRef],
    thresholds: &RegimeThresholds,
) -> Result<RoutingStats> {
    if model.config.gate_mode != GateMode::SteTop1 {
        return Err(Error::Usage(
            "a soft-gating model has no discrete expert selections to count".into(),
        ));
    }
    if windows.is_empty() {
        return Err(Error::Usage("no windows to analyze".into()));
    }
    let l = model.config.context_len;
    let t = model.config.horizon;
    let layers = model.config.n_encoder_layers;
    let experts = model.config.n_experts;

    let mut labels: Vec<Option<Vec<Regime>>> = vec![None; data.dataset.series.len()];
    for w in windows {
        if labels[w.series].is_none() {
            let demand = &data.dataset.series[w.series].demand;
            let (mean, std) = series_stats(demand);
            labels[w.series] = Some(label_regimes(demand, mean, std, thresholds));
        }
    }

    let mut stats = RoutingStats {
        thresholds: *thresholds,
        overall: vec![vec![0; experts]; layers],
        conditional: vec![vec![vec![0; experts]; layers]; Regime::ALL.len()],
    };
    for chunk in windows.chunks(64) {
        let batch = data.assemble(chunk, l, t)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let input = BatchInput {
            context: &batch.context,
            past_cov: batch.past_cov.as_ref(),
            future_cov: batch.future_cov.as_ref(),
        };
        let enc = encoder_forward(model, &mut tape, &bound, &input, RunMode::Inference)?;
        for (layer, selections) in enc.selections.iter().enumerate() {
            for (token, &expert) in selections.iter().enumerate() {
                let w = &chunk[token / l];
                let day = w.origin - l + token % l;
                let regime = labels[w.series].as_ref().expect("labeled above")[day];
                stats.overall[layer][expert] += 1;
                stats.conditional[regime.index()][layer][expert] += 1;
            }
        }
    }
    Ok(stats)
}

fn header(thresholds: &RegimeThresholds) -> String {
    format!(
        "# regimes: zero (y=0), low (z<{}), normal, spike (z>{})\nlayer,regime,expert,percentage\n",
        thresholds.low_z, thresholds.spike_z
    )
}

/// Tidy per-layer expert shares with regime "overall", one row per
/// (layer, expert), percentages of the layer's token total.
pub fn routing_overall_csv(stats: &RoutingStats) -> String {
    let mut out = header(&stats.thresholds);
    for (layer, counts) in stats.overall.iter().enumerate() {
        let total: u64 = counts.iter().sum();
        for (expert, &c) in counts.iter().enumerate() {
            let pct = if total == 0 {
                0.0
            } else {
                100.0 * c as f64 / total as f64
            };
            writeln!(out, "{layer},overall,{expert},{pct:.6}").expect("string write");
        }
    }
    out
}

/// Tidy regime-conditioned shares, normalized to 100 within each
/// (layer, regime); regimes with no tokens in a layer are skipped.
pub fn routing_conditional_csv(stats: &RoutingStats) -> String {
    let mut out = header(&stats.thresholds);
    for &regime in &Regime::ALL {
        for layer in 0..stats.overall.len() {
            let Some(pcts) = stats.conditional_percentages(regime, layer) else {
                continue;
            };
            for (expert, pct) in pcts.iter().enumerate() {
                writeln!(out, "{layer},{},{expert},{pct:.6}", regime.name())
                    .expect("string write");
            }
        }
    }
    out
}

/// Write both routing tables. The files are rendered from counts alone, so
/// re-exporting the same stats is byte-identical.
pub fn export_routing_csv(
    stats: &RoutingStats,
    overall_path: &Path,
    conditional_path: &Path,
) -> Result<()> {
    std::fs::write(overall_path, routing_overall_csv(stats))?;
    std::fs::write(conditional_path, routing_conditional_csv(stats))?;
    Ok(())
}
