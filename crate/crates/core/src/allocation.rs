//! Per-auction decision: which campaign to serve on a win, and how much to bid.
//!
//! Without regularization only campaigns with the maximal score may be served.
//! With entropy regularization at temperature `ρ` the serving distribution is
//! the Boltzmann law `q_k ∝ exp(c_k F(a) / ρ)`, and the bid solves the
//! first-order condition against the mixed score `Σ_k q_k c_k`.
//!
//! Scores are kept sparse: campaigns whose targeting does not match an auction
//! have score zero and are represented implicitly. Portfolios of thousands of
//! campaigns then cost only as much as the handful that target the impression.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{self, BidDecision, BidLandscape};
use crate::error::{Error, Result};

const FIXED_POINT_MAX_ITER: usize = 100;
const FIXED_POINT_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    /// Uniform choice among the top-scoring campaigns.
    Hard,
    /// Boltzmann allocation with the given temperature.
    Regularized { temperature: f64 },
}

impl AllocationMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AllocationMode::Hard => Ok(()),
            AllocationMode::Regularized { temperature }
                if temperature > 0.0 && temperature.is_finite() =>
            {
                Ok(())
            }
            AllocationMode::Regularized { temperature } => Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {temperature}"
            ))),
        }
    }
}

/// Scores of `len` campaigns; indices not listed score zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    len: usize,
    entries: Vec<(usize, f64)>,
}

impl ScoreVector {
    /// `entries` must be sorted by strictly increasing campaign index `< len`.
    pub fn sparse(len: usize, entries: Vec<(usize, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.last().is_none_or(|e| e.0 < len));
        ScoreVector { len, entries }
    }

    pub fn dense(scores: &[f64]) -> Self {
        ScoreVector {
            len: scores.len(),
            entries: scores.iter().copied().enumerate().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    fn implicit(&self) -> usize {
        self.len - self.entries.len()
    }

    pub fn max(&self) -> f64 {
        let explicit = self
            .entries
            .iter()
            .map(|e| e.1)
            .fold(f64::NEG_INFINITY, f64::max);
        if self.implicit() > 0 {
            explicit.max(0.0)
        } else {
            explicit
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        match self.entries.binary_search_by_key(&k, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }
}

/// Distribution over `len` campaigns. Listed indices carry their own
/// probability; every unlisted index carries `rest`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDistribution {
    len: usize,
    entries: Vec<(usize, f64)>,
    rest: f64,
}

impl AllocationDistribution {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn prob(&self, k: usize) -> f64 {
        match self.entries.binary_search_by_key(&k, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => self.rest,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut q = vec![self.rest; self.len];
        for &(k, p) in &self.entries {
            q[k] = p;
        }
        q
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum::<f64>()
            + self.rest * (self.len - self.entries.len()) as f64
    }

    /// `Σ_k q_k c_k` for scores sharing this distribution's sparsity.
    pub fn expected_score(&self, scores: &ScoreVector) -> f64 {
        debug_assert_eq!(self.entries.len(), scores.entries.len());
        self.entries
            .iter()
            .zip(&scores.entries)
            .map(|(q, c)| q.1 * c.1)
            .sum()
    }

    /// Inverse-CDF draw: listed indices first (in index order), then the
    /// unlisted ones.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(k, p) in &self.entries {
            acc += p;
            if u < acc {
                return k;
            }
        }
        let implicit = self.len - self.entries.len();
        if implicit == 0 || self.rest <= 0.0 {
            // rounding slack: fall back to the last index with positive mass
            return self
                .entries
                .iter()
                .rev()
                .find(|e| e.1 > 0.0)
                .map_or(self.entries.last().map_or(0, |e| e.0), |e| e.0);
        }
        let j = (((u - acc) / self.rest) as usize).min(implicit - 1);
        self.nth_unlisted(j)
    }

    fn nth_unlisted(&self, j: usize) -> usize {
        let mut idx = j;
        for &(k, _) in &self.entries {
            if k <= idx {
                idx += 1;
            } else {
                break;
            }
        }
        idx
    }
}

fn softmax(scores: &ScoreVector, win_probability: f64, temperature: f64) -> AllocationDistribution {
    let m = scores.max();
    let scale = win_probability / temperature;
    let weights: Vec<f64> = scores
        .entries
        .iter()
        .map(|e| ((e.1 - m) * scale).exp())
        .collect();
    let rest_weight = (-m * scale).exp();
    let z = weights.iter().sum::<f64>() + rest_weight * scores.implicit() as f64;
    AllocationDistribution {
        len: scores.len,
        entries: scores
            .entries
            .iter()
            .zip(weights)
            .map(|(e, w)| (e.0, w / z))
            .collect(),
        rest: if scores.implicit() > 0 {
            rest_weight / z
        } else {
            0.0
        },
    }
}

fn argmax_uniform(scores: &ScoreVector) -> AllocationDistribution {
    let m = scores.max();
    let implicit_ties = if m == 0.0 { scores.implicit() } else { 0 };
    let ties = scores.entries.iter().filter(|e| e.1 == m).count() + implicit_ties;
    let p = 1.0 / ties as f64;
    AllocationDistribution {
        len: scores.len,
        entries: scores
            .entries
            .iter()
            .map(|e| (e.0, if e.1 == m { p } else { 0.0 }))
            .collect(),
        rest: if implicit_ties > 0 { p } else { 0.0 },
    }
}

pub fn regularized_allocation_sparse(
    scores: &ScoreVector,
    win_probability: f64,
    temperature: f64,
) -> Result<AllocationDistribution> {
    if scores.is_empty() {
        return Err(Error::NoCampaigns);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if !(0.0..=1.0).contains(&win_probability) {
        return Err(Error::InvalidArgument(format!(
            "win probability must lie in [0, 1], got {win_probability}"
        )));
    }
    Ok(softmax(scores, win_probability, temperature))
}

/// Boltzmann allocation `q_k ∝ exp(c_k F / ρ)`, computed with max-subtraction.
pub fn regularized_allocation(
    scores: &[f64],
    win_probability: f64,
    temperature: f64,
) -> Result<AllocationDistribution> {
    regularized_allocation_sparse(&ScoreVector::dense(scores), win_probability, temperature)
}

pub fn hard_allocation_sparse(scores: &ScoreVector) -> Result<AllocationDistribution> {
    if scores.is_empty() {
        return Err(Error::NoCampaigns);
    }
    Ok(argmax_uniform(scores))
}

/// Uniform distribution over the top-scoring campaigns; the tie is broken when
/// sampling.
pub fn hard_allocation(scores: &[f64]) -> Result<AllocationDistribution> {
    hard_allocation_sparse(&ScoreVector::dense(scores))
}

pub fn sample_campaign<R: Rng + ?Sized>(q: &AllocationDistribution, rng: &mut R) -> usize {
    q.sample(rng)
}

/// Win probability used inside the Boltzmann weights. Replayed auctions have a
/// realized highest bid, and the allocation only matters on wins, so it is
/// taken as one.
fn softmax_win_probability(landscape: &BidLandscape, bid: f64) -> f64 {
    if landscape.is_observed() {
        1.0
    } else {
        auction::win_probability(landscape, bid)
    }
}

pub fn solve_auction_sparse(
    scores: &ScoreVector,
    landscape: &BidLandscape,
    mode: AllocationMode,
) -> Result<(BidDecision, AllocationDistribution)> {
    if scores.is_empty() {
        return Err(Error::NoCampaigns);
    }
    if scores.entries.iter().any(|e| !(e.1 >= 0.0)) {
        return Err(Error::InvalidArgument("scores must be >= 0".into()));
    }
    let max = scores.max();
    match mode {
        AllocationMode::Hard => {
            let decision = auction::solve_optimal_bid(landscape, max)?;
            Ok((decision, argmax_uniform(scores)))
        }
        AllocationMode::Regularized { temperature } => {
            mode.validate()?;
            if landscape.is_observed() {
                // The Boltzmann weights do not depend on the bid, so the fixed
                // point is reached in one step.
                let q = softmax(scores, 1.0, temperature);
                let decision = auction::solve_optimal_bid(landscape, q.expected_score(scores))?;
                return Ok((decision, q));
            }
            let mut bid = auction::solve_optimal_bid(landscape, max)?.bid;
            for _ in 0..FIXED_POINT_MAX_ITER {
                let q = softmax(scores, softmax_win_probability(landscape, bid), temperature);
                let target = auction::solve_optimal_bid(landscape, q.expected_score(scores))?.bid;
                let next = bid + FIXED_POINT_DAMPING * (target - bid);
                let done = (next - bid).abs() <= 1e-6 * (1.0 + next.abs());
                bid = next;
                if done {
                    let q = softmax(scores, softmax_win_probability(landscape, bid), temperature);
                    return Ok((
                        BidDecision {
                            bid,
                            win_probability: auction::win_probability(landscape, bid),
                        },
                        q,
                    ));
                }
            }
            Err(Error::NonConvergence {
                what: "regularized bid/allocation fixed point",
                iterations: FIXED_POINT_MAX_ITER,
                last: bid,
            })
        }
    }
}

/// Joint bid and allocation for one auction.
pub fn solve_auction(
    scores: &[f64],
    landscape: &BidLandscape,
    mode: AllocationMode,
) -> Result<(BidDecision, AllocationDistribution)> {
    solve_auction_sparse(&ScoreVector::dense(scores), landscape, mode)
}
