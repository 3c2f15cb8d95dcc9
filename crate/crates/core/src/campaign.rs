//! Direct campaigns: goals, targeting, penalties and scores.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AuctionRecord, PlacementStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Impressions,
    Views,
    Clicks,
}

/// Deterministic eligibility rule of a goal. Both parts must match when present;
/// an empty targeting matches every impression.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targeting {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placements: Option<Vec<String>>,
    /// Matches impressions with `fnv1a64(impression_id) % hash_mod == 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_mod: Option<u64>,
}

impl Targeting {
    pub fn all() -> Self {
        Targeting::default()
    }

    pub fn placements<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Targeting {
            placements: Some(ids.into_iter().map(Into::into).collect()),
            hash_mod: None,
        }
    }

    pub fn hash_mod(modulus: u64) -> Self {
        Targeting {
            placements: None,
            hash_mod: Some(modulus),
        }
    }

    pub fn matches(&self, impression_id: &str, placement_id: &str) -> bool {
        self.matches_hashed(fnv1a64(impression_id.as_bytes()), placement_id)
    }

    pub(crate) fn matches_hashed(&self, hash: u64, placement_id: &str) -> bool {
        if let Some(m) = self.hash_mod {
            if hash % m != 1 {
                return false;
            }
        }
        match &self.placements {
            Some(list) => list.iter().any(|p| p == placement_id),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: String,
    pub metric: Metric,
    pub targeting: Targeting,
    pub volume: u64,
    /// $CPM per undelivered unit.
    pub penalty_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Relu,
    Softplus { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: String,
    /// Contractual revenue in $. Does not influence the strategy.
    pub contractual_revenue: f64,
    pub penalty_kind: PenaltyKind,
    pub goals: Vec<Goal>,
}

impl Campaign {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidCampaign(format!(
                "{}: {msg}",
                self.campaign_id
            )))
        };
        if self.goals.is_empty() {
            return bad("at least one goal is required".into());
        }
        if let PenaltyKind::Softplus { beta } = self.penalty_kind {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad(format!("softplus sharpness must be > 0, got {beta}"));
            }
        }
        let mut seen = HashSet::new();
        for goal in &self.goals {
            if !seen.insert(goal.goal_id.as_str()) {
                return bad(format!("duplicate goal id `{}`", goal.goal_id));
            }
            if !(goal.penalty_weight >= 0.0 && goal.penalty_weight.is_finite()) {
                return bad(format!(
                    "goal `{}` has invalid penalty weight {}",
                    goal.goal_id, goal.penalty_weight
                ));
            }
            if matches!(goal.targeting.hash_mod, Some(m) if m < 2) {
                return bad(format!("goal `{}`: hash_mod must be >= 2", goal.goal_id));
            }
        }
        Ok(())
    }

    pub(crate) fn check_arity(&self, len: usize) -> Result<()> {
        if len != self.goals.len() {
            return Err(Error::ArityMismatch {
                expected: self.goals.len(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Learned per-goal state of one campaign: shadow prices for ReLU penalties,
/// expected delivered volumes for smooth ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignState {
    Kappa(Vec<f64>),
    Volume(Vec<f64>),
}

impl CampaignState {
    pub fn values(&self) -> &[f64] {
        match self {
            CampaignState::Kappa(v) | CampaignState::Volume(v) => v,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CampaignState::Kappa(_) => "kappa",
            CampaignState::Volume(_) => "volume",
        }
    }
}

/// FNV-1a, 64 bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Probability that the auction counts toward the goal: targeting match times
/// the placement-average view or click rate for stochastic metrics.
pub fn targeting_probability(
    goal: &Goal,
    auction: &AuctionRecord,
    predictors: &PlacementStats,
) -> Result<f64> {
    let placement = predictors
        .get(&auction.placement_id)
        .ok_or_else(|| Error::UnknownPlacement(auction.placement_id.clone()))?;
    if !goal
        .targeting
        .matches(&auction.impression_id, &auction.placement_id)
    {
        return Ok(0.0);
    }
    Ok(placement.metric_rate(goal.metric))
}

fn softplus(x: f64, beta: f64) -> f64 {
    x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Under-delivery penalty in $CPM-units given delivered volume per goal.
pub fn penalty(campaign: &Campaign, delivered: &[f64]) -> Result<f64> {
    campaign.check_arity(delivered.len())?;
    let total = campaign
        .goals
        .iter()
        .zip(delivered)
        .map(|(goal, &v)| {
            let shortfall = goal.volume as f64 - v;
            match campaign.penalty_kind {
                PenaltyKind::Relu => goal.penalty_weight * shortfall.max(0.0),
                PenaltyKind::Softplus { beta } => goal.penalty_weight * softplus(shortfall, beta),
            }
        })
        .sum();
    Ok(total)
}

/// Partial derivatives of [`penalty`] with respect to each delivered volume.
pub fn penalty_gradient(campaign: &Campaign, delivered: &[f64]) -> Result<Vec<f64>> {
    campaign.check_arity(delivered.len())?;
    campaign
        .goals
        .iter()
        .zip(delivered)
        .enumerate()
        .map(|(i, (goal, &v))| {
            let shortfall = goal.volume as f64 - v;
            match campaign.penalty_kind {
                PenaltyKind::Relu => {
                    if shortfall > 0.0 {
                        Ok(-goal.penalty_weight)
                    } else if shortfall < 0.0 {
                        Ok(0.0)
                    } else {
                        Err(Error::Kink { goal: i })
                    }
                }
                PenaltyKind::Softplus { beta } => {
                    Ok(-goal.penalty_weight * sigmoid(beta * shortfall))
                }
            }
        })
        .collect()
}

/// Per-goal multipliers of the campaign score: `κ` for ReLU campaigns and
/// `-∂L/∂v` at the current volumes for smooth ones.
pub fn score_weights(campaign: &Campaign, state: &CampaignState) -> Result<Vec<f64>> {
    match (campaign.penalty_kind, state) {
        (PenaltyKind::Relu, CampaignState::Kappa(kappa)) => {
            campaign.check_arity(kappa.len())?;
            Ok(kappa.clone())
        }
        (PenaltyKind::Softplus { .. }, CampaignState::Volume(volumes)) => {
            Ok(penalty_gradient(campaign, volumes)?
                .into_iter()
                .map(|g| -g)
                .collect())
        }
        (PenaltyKind::Relu, _) => Err(Error::WrongMode("ReLU campaigns carry kappa state")),
        (PenaltyKind::Softplus { .. }, _) => Err(Error::WrongMode(
            "smooth-penalty campaigns carry volume state",
        )),
    }
}

/// `Σ_i θ_i w_i` with `w` from [`score_weights`].
pub fn score(campaign: &Campaign, state: &CampaignState, theta: &[f64]) -> Result<f64> {
    campaign.check_arity(theta.len())?;
    let weights = score_weights(campaign, state)?;
    Ok(theta.iter().zip(&weights).map(|(t, w)| t * w).sum())
}

pub fn validate_portfolio(campaigns: &[Campaign]) -> Result<()> {
    let mut ids = HashSet::new();
    for c in campaigns {
        c.validate()?;
        if !ids.insert(c.campaign_id.as_str()) {
            return Err(Error::InvalidCampaign(format!(
                "duplicate campaign id `{}`",
                c.campaign_id
            )));
        }
    }
    Ok(())
}

pub fn load_portfolio(path: impl AsRef<Path>) -> Result<Vec<Campaign>> {
    let text = std::fs::read_to_string(path)?;
    let campaigns: Vec<Campaign> = serde_json::from_str(&text)?;
    validate_portfolio(&campaigns)?;
    Ok(campaigns)
}

pub fn write_portfolio(path: impl AsRef<Path>, campaigns: &[Campaign]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(campaigns)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
