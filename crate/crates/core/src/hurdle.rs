//! Hurdle negative-binomial distribution over nonnegative integer demand.
//!
//! A Bernoulli gate decides zero versus positive; positive counts follow a
//! zero-truncated negative binomial in its mean/dispersion form, where the
//! untruncated variance is mu + alpha mu^2. Everything works in log space
//! through `lgamma` so large counts stay finite.

use crate::special::lgamma;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Inverse-CDF walks stop once this much cumulative mass is covered.
const CUM_CUTOFF: f64 = 1.0 - 1e-12;
/// Hard cap on sampled/quantile counts.
const Y_CAP: u64 = 1_000_000;
/// The truncated positive branch divides by 1 - p0; beyond this point the
/// division is meaningless noise.
const DEGENERATE_P0: f64 = 1.0 - 1e-12;

/// Negative binomial in mean/dispersion form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NBParams {
    pub mu: f64,
    pub alpha: f64,
}

impl NBParams {
    pub fn new(mu: f64, alpha: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::Domain(format!("NB mean must be positive, got {mu}")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "NB dispersion must be positive, got {alpha}"
            )));
        }
        Ok(Self { mu, alpha })
    }
}

/// Hurdle parameters: gate probability of positive demand plus the count
/// distribution for the positive branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurdleParams {
    pub p_plus: f64,
    pub nb: NBParams,
}

impl HurdleParams {
    pub fn new(p_plus: f64, nb: NBParams) -> Result<Self> {
        if !(p_plus > 0.0 && p_plus < 1.0) {
            return Err(Error::Domain(format!(
                "gate probability must lie in (0,1), got {p_plus}"
            )));
        }
        Ok(Self { p_plus, nb })
    }

    pub fn from_parts(p_plus: f64, mu: f64, alpha: f64) -> Result<Self> {
        Self::new(p_plus, NBParams::new(mu, alpha)?)
    }
}

/// Log pmf of the untruncated negative binomial at count y:
/// lgamma(y + r) - lgamma(r) - lgamma(y + 1) - r ln(1 + am) + y ln(am / (1 + am))
/// with r = 1/alpha and am = alpha mu.
pub fn nb_log_pmf(y: u64, nb: &NBParams) -> f64 {
    let r = 1.0 / nb.alpha;
    let am = nb.alpha * nb.mu;
    let lz = am.ln_1p();
    if y == 0 {
        return -r * lz;
    }
    let yf = y as f64;
    lgamma(yf + r) - lgamma(r) - lgamma(yf + 1.0) - r * lz + yf * (am.ln() - lz)
}

/// P(Y = 0) under the untruncated NB: (1 + alpha mu)^(-1/alpha), computed as
/// exp(-ln(1 + alpha mu) / alpha).
pub fn nb_zero_prob(nb: &NBParams) -> f64 {
    (-(nb.alpha * nb.mu).ln_1p() / nb.alpha).exp()
}

fn check_truncation(nb: &NBParams) -> Result<f64> {
    let p0 = nb_zero_prob(nb);
    if p0 >= DEGENERATE_P0 {
        return Err(Error::Numerical(format!(
            "degenerate hurdle truncation: NB zero probability {p0} leaves no positive mass \
             (mu={}, alpha={})",
            nb.mu, nb.alpha
        )));
    }
    Ok(p0)
}

/// Log pmf of the hurdle distribution. Zero goes to the gate; positive
/// counts get the gate log-odds plus the zero-truncated NB branch, whose
/// ln(1 - p0) denominator is computed via log1p to survive p0 near 1.
pub fn hurdle_log_pmf(y: u64, h: &HurdleParams) -> Result<f64> {
    if y == 0 {
        return Ok((-h.p_plus).ln_1p());
    }
    let p0 = check_truncation(&h.nb)?;
    Ok(h.p_plus.ln() + nb_log_pmf(y, &h.nb) - (-p0).ln_1p())
}

/// Mean of the hurdle distribution: p_plus mu / (1 - p0).
pub fn hurdle_mean(h: &HurdleParams) -> Result<f64> {
    let p0 = check_truncation(&h.nb)?;
    Ok(h.p_plus * h.nb.mu / (1.0 - p0))
}

/// Draw one count: a Bernoulli gate, then (only if positive) an inverse-CDF
/// walk over the truncated NB. The walk stops once cumulative mass passes
/// 1 - 1e-12 or the count hits 10^6.
pub fn hurdle_sample<R: Rng>(h: &HurdleParams, rng: &mut R) -> Result<u64> {
    if !rng.gen_bool(h.p_plus) {
        return Ok(0);
    }
    let p0 = check_truncation(&h.nb)?;
    let denom = 1.0 - p0;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut y = 1u64;
    loop {
        cum += nb_log_pmf(y, &h.nb).exp() / denom;
        if cum >= u || cum >= CUM_CUTOFF || y >= Y_CAP {
            return Ok(y);
        }
        y += 1;
    }
}

/// Smallest y whose hurdle CDF reaches q.
pub fn hurdle_quantile(h: &HurdleParams, q: f64) -> Result<u64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!(
            "quantile level must lie in (0,1), got {q}"
        )));
    }
    let zero_mass = 1.0 - h.p_plus;
    if q <= zero_mass {
        return Ok(0);
    }
    let p0 = check_truncation(&h.nb)?;
    let denom = 1.0 - p0;
    let mut cdf = zero_mass;
    let mut y = 1u64;
    loop {
        cdf += h.p_plus * nb_log_pmf(y, &h.nb).exp() / denom;
        if cdf >= q || cdf >= CUM_CUTOFF || y >= Y_CAP {
            return Ok(y);
        }
        y += 1;
    }
}
