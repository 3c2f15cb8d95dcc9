//! Auction mechanics: win probability, RTB revenue and the publisher's optimal bid.
//!
//! All amounts are in $CPM. A publisher bid `a` wins against highest buyer bid
//! `B` when `a >= B`; otherwise the impression is sold in RTB and the publisher
//! collects `B` (first price) or `max(C, a)` (second price, `C` the second bid).
//!
//! With a bid distribution the expected RTB revenue is
//! `r(a) = a (1 - F_b(a)) + ∫_a^∞ (1 - F_c(t)) dt`, whose derivative is
//! `r'(a) = F_c(a) - F_b(a) - a f_b(a)`. For a campaign worth `c` the publisher
//! maximizes `r(a) + F_b(a) c`.

pub mod distribution;
pub(crate) mod quad;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use distribution::BidDistribution;

use crate::error::{Error, Result};

/// Number of grid intervals scanned when bracketing stationary points.
pub const GRID_INTERVALS: usize = 1024;
/// Absolute tolerance of the revenue integral over the whole support.
pub const INTEGRATION_TOLERANCE: f64 = 1e-8;
const BISECTION_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuctionType {
    First,
    Second,
}

impl std::fmt::Display for AuctionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuctionType::First => f.write_str("first"),
            AuctionType::Second => f.write_str("second"),
        }
    }
}

impl std::str::FromStr for AuctionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(AuctionType::First),
            "second" => Ok(AuctionType::Second),
            other => Err(Error::InvalidArgument(format!(
                "auction type must be `first` or `second`, got `{other}`"
            ))),
        }
    }
}

/// Serializable description of a parametric second-price landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeModel {
    pub highest: BidDistribution,
    pub second: BidDistribution,
    pub support_max: f64,
}

/// A second-price landscape given by the marginal laws of the highest and
/// second-highest bids, with precomputed tables for the bid solver.
#[derive(Debug, Clone)]
pub struct ParametricLandscape {
    model: LandscapeModel,
    grid: Vec<f64>,
    // F_c - F_b - a f_b on the grid; the stationarity residual is this plus c f_b.
    slope_base: Vec<f64>,
    density: Vec<f64>,
    // ∫_{grid[i]}^{support_max} (1 - F_c)
    tail: Vec<f64>,
}

impl ParametricLandscape {
    pub fn new(model: LandscapeModel) -> Result<Self> {
        model.highest.validate()?;
        model.second.validate()?;
        let m = model.support_max;
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "support_max must be positive, got {m}"
            )));
        }
        for (name, dist) in [("highest", &model.highest), ("second", &model.second)] {
            if dist.cdf(m) < 1.0 - 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "{name}-bid distribution leaves {:.3e} mass above support_max {m}",
                    1.0 - dist.cdf(m)
                )));
            }
        }

        let n = GRID_INTERVALS;
        let grid: Vec<f64> = (0..=n).map(|i| m * i as f64 / n as f64).collect();
        let mut slope_base = Vec::with_capacity(n + 1);
        let mut density = Vec::with_capacity(n + 1);
        let mut prev_fb = 0.0;
        let mut prev_fc = 0.0;
        for (i, &x) in grid.iter().enumerate() {
            let fb_cdf = model.highest.cdf(x);
            let fc_cdf = model.second.cdf(x);
            let f = model.highest.pdf(x);
            if fb_cdf < prev_fb || fc_cdf < prev_fc {
                return Err(Error::InvalidArgument("bid CDF is not monotone".into()));
            }
            if i > 0 && i < n && f <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "highest-bid density vanishes at {x} inside the support"
                )));
            }
            prev_fb = fb_cdf;
            prev_fc = fc_cdf;
            slope_base.push(fc_cdf - fb_cdf - x * f);
            density.push(f);
        }

        let survival = |t: f64| 1.0 - model.second.cdf(t);
        let seg_tol = INTEGRATION_TOLERANCE / n as f64;
        let mut tail = vec![0.0; n + 1];
        for i in (0..n).rev() {
            tail[i] =
                tail[i + 1] + quad::adaptive_simpson(&survival, grid[i], grid[i + 1], seg_tol);
        }

        Ok(ParametricLandscape {
            model,
            grid,
            slope_base,
            density,
            tail,
        })
    }

    pub fn model(&self) -> &LandscapeModel {
        &self.model
    }

    pub fn support_max(&self) -> f64 {
        self.model.support_max
    }

    pub fn win_probability(&self, bid: f64) -> f64 {
        self.model.highest.cdf(bid)
    }

    /// Expected RTB revenue `r(a)`.
    pub fn expected_revenue(&self, bid: f64) -> f64 {
        let m = self.model.support_max;
        let head = bid * (1.0 - self.model.highest.cdf(bid));
        if bid >= m {
            return head;
        }
        let n = GRID_INTERVALS;
        let cell = ((bid / m * n as f64) as usize).min(n - 1);
        let survival = |t: f64| 1.0 - self.model.second.cdf(t);
        let partial = quad::adaptive_simpson(
            &survival,
            bid,
            self.grid[cell + 1],
            INTEGRATION_TOLERANCE / n as f64,
        );
        head + partial + self.tail[cell + 1]
    }

    /// `r'(a) + f_b(a) c`
    pub fn stationarity_residual(&self, bid: f64, score: f64) -> f64 {
        let d = &self.model;
        d.second.cdf(bid) - d.highest.cdf(bid) + (score - bid) * d.highest.pdf(bid)
    }

    fn objective(&self, bid: f64, score: f64) -> f64 {
        self.expected_revenue(bid) + self.win_probability(bid) * score
    }

    fn solve(&self, score: f64) -> Result<f64> {
        let n = self.grid.len();
        let g = |i: usize| self.slope_base[i] + score * self.density[i];

        let mut maxima = Vec::new();
        if matches!((1..n).map(g).find(|v| *v != 0.0), Some(v) if v < 0.0) {
            maxima.push(0.0);
        }
        let mut prev = g(0);
        for i in 1..n {
            let cur = g(i);
            if prev > 0.0 && cur <= 0.0 {
                maxima.push(self.bisect(score, self.grid[i - 1], self.grid[i])?);
            }
            prev = cur;
        }
        if g(n - 1) > 0.0 {
            maxima.push(self.model.support_max);
        }

        match maxima.len() {
            0 => Ok(0.0),
            1 => Ok(maxima[0]),
            _ => {
                let mut best = maxima[0];
                let mut best_value = self.objective(best, score);
                for &a in &maxima[1..] {
                    let v = self.objective(a, score);
                    if v > best_value {
                        best = a;
                        best_value = v;
                    }
                }
                Ok(best)
            }
        }
    }

    /// Bisection on a bracket with positive residual at `lo` and non-positive at `hi`.
    fn bisect(&self, score: f64, mut lo: f64, mut hi: f64) -> Result<f64> {
        let tol = 1e-9 * (1.0 + score);
        let residual = |a: f64| self.stationarity_residual(a, score);
        if residual(hi).abs() <= tol {
            return Ok(hi);
        }
        for _ in 0..BISECTION_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let r = residual(mid);
            if r.abs() <= tol {
                return Ok(mid);
            }
            if r > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(Error::NonConvergence {
            what: "optimal-bid bisection",
            iterations: BISECTION_MAX_ITER,
            last: 0.5 * (lo + hi),
        })
    }
}

/// What the publisher knows about the competing bids of one auction.
#[derive(Debug, Clone)]
pub enum BidLandscape {
    /// Replay of a first-price auction with realized highest bid.
    ObservedFirstPrice {
        highest: f64,
    },
    /// Replay of a second-price auction with realized highest and second bids.
    ObservedSecondPrice {
        highest: f64,
        second: f64,
    },
    ParametricSecondPrice(Arc<ParametricLandscape>),
}

impl BidLandscape {
    pub fn observed_second_price(highest: f64, second: f64) -> Result<Self> {
        if !(0.0 <= second && second <= highest) {
            return Err(Error::InvalidArgument(format!(
                "second bid {second} must lie in [0, highest bid {highest}]"
            )));
        }
        Ok(BidLandscape::ObservedSecondPrice { highest, second })
    }

    pub fn parametric(model: LandscapeModel) -> Result<Self> {
        Ok(BidLandscape::ParametricSecondPrice(Arc::new(
            ParametricLandscape::new(model)?,
        )))
    }

    pub fn is_observed(&self) -> bool {
        !matches!(self, BidLandscape::ParametricSecondPrice(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidDecision {
    pub bid: f64,
    pub win_probability: f64,
}

/// `P(B <= bid)`. Observed landscapes count a tie as a publisher win.
pub fn win_probability(landscape: &BidLandscape, bid: f64) -> f64 {
    match landscape {
        BidLandscape::ObservedFirstPrice { highest }
        | BidLandscape::ObservedSecondPrice { highest, .. } => {
            if bid >= *highest {
                1.0
            } else {
                0.0
            }
        }
        BidLandscape::ParametricSecondPrice(p) => p.win_probability(bid),
    }
}

/// Realized RTB revenue for observed auctions, expected revenue `r(a)` otherwise.
pub fn rtb_revenue(landscape: &BidLandscape, bid: f64) -> f64 {
    match landscape {
        BidLandscape::ObservedFirstPrice { highest } => {
            if bid < *highest {
                *highest
            } else {
                0.0
            }
        }
        BidLandscape::ObservedSecondPrice { highest, second } => {
            if bid < *highest {
                second.max(bid)
            } else {
                0.0
            }
        }
        BidLandscape::ParametricSecondPrice(p) => p.expected_revenue(bid),
    }
}

/// `r'(a) / f_b(a)`: `-a` in first price, `-a + (F_c(a) - F_b(a)) / f_b(a)` in
/// second price.
pub fn revenue_ratio(landscape: &BidLandscape, bid: f64) -> Result<f64> {
    if !(bid >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bid must be >= 0, got {bid}"
        )));
    }
    match landscape {
        BidLandscape::ObservedFirstPrice { .. } => Ok(-bid),
        BidLandscape::ObservedSecondPrice { .. } => Err(Error::UnsupportedLandscape(
            "revenue ratio needs a bid distribution",
        )),
        BidLandscape::ParametricSecondPrice(p) => {
            if bid == 0.0 {
                return Ok(0.0);
            }
            let d = p.model();
            let f = d.highest.pdf(bid);
            if f <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "highest-bid density vanishes at {bid}"
                )));
            }
            Ok(-bid + (d.second.cdf(bid) - d.highest.cdf(bid)) / f)
        }
    }
}

/// The bid maximizing `r(a) + F_b(a) score`.
///
/// First price: `a = score`. Parametric second price: the stationary points of
/// the objective are bracketed on a grid over `[0, support_max]`, refined by
/// bisection, and the one with the largest objective is returned (boundary
/// maxima included).
pub fn solve_optimal_bid(landscape: &BidLandscape, score: f64) -> Result<BidDecision> {
    if !(score >= 0.0) || !score.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "score must be finite and >= 0, got {score}"
        )));
    }
    let bid = match landscape {
        BidLandscape::ObservedFirstPrice { .. } => score,
        BidLandscape::ObservedSecondPrice { .. } => {
            return Err(Error::UnsupportedLandscape(
                "second-price bid solving needs a parametric landscape",
            ))
        }
        BidLandscape::ParametricSecondPrice(p) => p.solve(score)?,
    };
    Ok(BidDecision {
        bid,
        win_probability: win_probability(landscape, bid),
    })
}
