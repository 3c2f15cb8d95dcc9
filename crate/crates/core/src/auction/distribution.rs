//! Marginal distributions of the highest and second-highest RTB bids.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// A continuous distribution over non-negative bids (in $CPM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BidDistribution {
    Uniform {
        lo: f64,
        hi: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// `X = Y * U` where `Y` follows the inner distribution and `U ~ Uniform(0, 1)`
    /// is independent of it. Models a second bid drawn as a uniform fraction of
    /// the highest bid.
    UniformFraction(Box<BidDistribution>),
}

impl BidDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            BidDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && hi > lo) {
                    return Err(Error::InvalidArgument(format!(
                        "uniform bounds must satisfy 0 <= lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            BidDistribution::LogNormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "lognormal needs finite mu and sigma > 0, got ({mu}, {sigma})"
                    )));
                }
            }
            BidDistribution::UniformFraction(inner) => {
                if matches!(**inner, BidDistribution::UniformFraction(_)) {
                    return Err(Error::InvalidArgument(
                        "nested uniform fractions are not supported".into(),
                    ));
                }
                inner.validate()?;
            }
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            BidDistribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            BidDistribution::LogNormal { mu, sigma } => std_normal_cdf((x.ln() - mu) / sigma),
            BidDistribution::UniformFraction(inner) => {
                (inner.cdf(x) + x * inner.inverse_tail_moment(x)).min(1.0)
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            BidDistribution::Uniform { lo, hi } => {
                if x >= *lo && x <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            BidDistribution::LogNormal { mu, sigma } => {
                if x == 0.0 {
                    return 0.0;
                }
                let z = (x.ln() - mu) / sigma;
                (-0.5 * z * z).exp() / (x * sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            BidDistribution::UniformFraction(inner) => inner.inverse_tail_moment(x),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            BidDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            BidDistribution::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            BidDistribution::UniformFraction(inner) => 0.5 * inner.mean(),
        }
    }

    /// A point beyond which the distribution carries less than about 1e-10 mass.
    pub fn upper_bound(&self) -> f64 {
        match self {
            BidDistribution::Uniform { hi, .. } => *hi,
            BidDistribution::LogNormal { mu, sigma } => (mu + 6.4 * sigma).exp(),
            BidDistribution::UniformFraction(inner) => inner.upper_bound(),
        }
    }

    /// `E[1/Y ; Y > x]` for `x > 0`.
    fn inverse_tail_moment(&self, x: f64) -> f64 {
        match self {
            BidDistribution::Uniform { lo, hi } => {
                let from = x.max(*lo);
                if from >= *hi {
                    0.0
                } else {
                    (hi / from).ln() / (hi - lo)
                }
            }
            BidDistribution::LogNormal { mu, sigma } => {
                // E[Y^k ; Y > x] = exp(k mu + k^2 sigma^2 / 2) Phi((mu + k sigma^2 - ln x) / sigma), k = -1
                let s2 = sigma * sigma;
                (-mu + 0.5 * s2).exp() * std_normal_cdf((mu - s2 - x.ln()) / sigma)
            }
            BidDistribution::UniformFraction(_) => {
                unreachable!("nested uniform fractions are rejected by validate")
            }
        }
    }
}

pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}
