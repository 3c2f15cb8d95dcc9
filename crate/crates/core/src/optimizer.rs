//! Batch estimation of the per-goal strategy state.
//!
//! The dataset is shuffled and cut into batches. Each batch is replayed under
//! the state frozen at the start of the batch, and the delivered volumes are
//! then folded into the state with a decreasing step `α_j = α₀ / j`:
//!
//! * ReLU campaigns learn shadow prices `κ ∈ [0, l]`, pushed toward `l` when
//!   a goal is behind its pro-rata target and toward `0` otherwise;
//! * smooth-penalty campaigns learn the delivered volume `v` they can expect
//!   over the whole dataset.

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationMode;
use crate::auction::{AuctionType, LandscapeModel};
use crate::campaign::{validate_portfolio, Campaign, CampaignState, PenaltyKind};
use crate::data::{self, AuctionRecord, PlacementStats};
use crate::engine::{self, Engine, Totals};
use crate::error::{Error, Result};
use crate::rng::{derive, StreamFamily, DOMAIN_BATCH, DOMAIN_SHUFFLE};

pub use crate::engine::Accumulation;

/// Starting point of the learned state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// `κ = 0` and `v = 0`.
    #[default]
    Zero,
    /// `κ = l`; smooth campaigns start at `v = 0`.
    Weights,
    /// `v = g`; ReLU campaigns start at `κ = 0`.
    Goals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub alpha0: f64,
    pub allocation: AllocationMode,
    pub auction_type: AuctionType,
    pub epochs: usize,
    pub seed: u64,
    pub init: Init,
    pub checkpoint_every: usize,
    pub accumulation: Accumulation,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            batch_size: 1000,
            alpha0: 1.0,
            allocation: AllocationMode::Regularized { temperature: 0.5 },
            auction_type: AuctionType::First,
            epochs: 1,
            seed: 0,
            init: Init::Zero,
            checkpoint_every: 10,
            accumulation: Accumulation::Realized,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 must be > 0, got {}", self.alpha0));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        self.allocation.validate()
    }
}

/// What the strategy knows about the supply: placement-level view and click
/// predictors, and for second price the fitted bid landscapes per placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub predictors: PlacementStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscapes: Option<Vec<LandscapeModel>>,
}

impl Market {
    pub fn from_records(records: &[AuctionRecord], auction_type: AuctionType) -> Result<Self> {
        let predictors = PlacementStats::from_records(records)?;
        let landscapes = match auction_type {
            AuctionType::First => None,
            AuctionType::Second => Some(data::fit_landscapes(records, &predictors)?),
        };
        Ok(Market {
            predictors,
            landscapes,
        })
    }

    pub(crate) fn engine<'a>(
        &self,
        campaigns: &'a [Campaign],
        allocation: AllocationMode,
        auction_type: AuctionType,
        accumulation: Accumulation,
    ) -> Result<Engine<'a>> {
        Engine::new(
            campaigns,
            &self.predictors,
            allocation,
            auction_type,
            self.landscapes.as_deref(),
            accumulation,
        )
    }
}

/// Delivered volumes and RTB results of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Per campaign, per goal.
    pub delivered: Vec<Vec<f64>>,
    /// $CPM summed over the batch.
    pub rtb_revenue: f64,
    pub auctions_won: u64,
    pub auctions: u64,
}

impl BatchStats {
    fn from_totals(t: &Totals, offsets: &[usize]) -> Self {
        BatchStats {
            delivered: offsets
                .windows(2)
                .map(|w| t.delivered[w[0]..w[1]].to_vec())
                .collect(),
            rtb_revenue: t.rtb_revenue,
            auctions_won: t.won,
            auctions: t.auctions,
        }
    }
}

pub fn learning_rate(j: u64, alpha0: f64) -> Result<f64> {
    if j == 0 {
        return Err(Error::InvalidArgument("batch index starts at 1".into()));
    }
    Ok(alpha0 / j as f64)
}

/// `κ ← κ + α (κ̂ − κ)` with `κ̂ = l` when `v̂ < ρ g` and `0` otherwise.
pub fn update_kappas(
    campaign: &Campaign,
    state: &CampaignState,
    delivered: &[f64],
    batch_ratio: f64,
    alpha: f64,
) -> Result<CampaignState> {
    let CampaignState::Kappa(kappa) = state else {
        return Err(Error::WrongMode("kappa update needs kappa state"));
    };
    campaign.check_arity(kappa.len())?;
    campaign.check_arity(delivered.len())?;
    Ok(CampaignState::Kappa(
        campaign
            .goals
            .iter()
            .zip(kappa)
            .zip(delivered)
            .map(|((g, &k), &v)| {
                let target = if v < batch_ratio * g.volume as f64 {
                    g.penalty_weight
                } else {
                    0.0
                };
                (k + alpha * (target - k)).clamp(0.0, g.penalty_weight)
            })
            .collect(),
    ))
}

/// `v ← max(0, v + α (v̂ − ρ v))`.
pub fn update_volumes(
    state: &CampaignState,
    delivered: &[f64],
    batch_ratio: f64,
    alpha: f64,
) -> Result<CampaignState> {
    let CampaignState::Volume(volume) = state else {
        return Err(Error::WrongMode("volume update needs volume state"));
    };
    if volume.len() != delivered.len() {
        return Err(Error::ArityMismatch {
            expected: volume.len(),
            got: delivered.len(),
        });
    }
    Ok(CampaignState::Volume(
        volume
            .iter()
            .zip(delivered)
            .map(|(&v, &d)| (v + alpha * (d - batch_ratio * v)).max(0.0))
            .collect(),
    ))
}

fn update_state(
    campaign: &Campaign,
    state: &CampaignState,
    delivered: &[f64],
    batch_ratio: f64,
    alpha: f64,
) -> Result<CampaignState> {
    match state {
        CampaignState::Kappa(_) => update_kappas(campaign, state, delivered, batch_ratio, alpha),
        CampaignState::Volume(_) => update_volumes(state, delivered, batch_ratio, alpha),
    }
}

pub fn initial_state(campaign: &Campaign, init: Init) -> CampaignState {
    let goals = &campaign.goals;
    match (campaign.penalty_kind, init) {
        (PenaltyKind::Relu, Init::Weights) => {
            CampaignState::Kappa(goals.iter().map(|g| g.penalty_weight).collect())
        }
        (PenaltyKind::Relu, _) => CampaignState::Kappa(vec![0.0; goals.len()]),
        (PenaltyKind::Softplus { .. }, Init::Goals) => {
            CampaignState::Volume(goals.iter().map(|g| g.volume as f64).collect())
        }
        (PenaltyKind::Softplus { .. }, _) => CampaignState::Volume(vec![0.0; goals.len()]),
    }
}

/// Replays one batch under frozen `states`. Auction `i` of the batch draws
/// from random stream `first_ordinal + i`.
pub fn apply_strategy_to_batch(
    batch: &[AuctionRecord],
    campaigns: &[Campaign],
    states: &[CampaignState],
    market: &Market,
    config: &OptimizerConfig,
    first_ordinal: u64,
) -> Result<BatchStats> {
    let engine = market.engine(
        campaigns,
        config.allocation,
        config.auction_type,
        config.accumulation,
    )?;
    let prepared = engine::prepare(batch, &market.predictors, config.auction_type)?;
    let weights = engine.weights(states)?;
    let streams = StreamFamily::new(config.seed, DOMAIN_BATCH);
    batch_stats(
        &engine,
        &prepared,
        &weights,
        &streams,
        first_ordinal,
        market.predictors.len(),
    )
}

fn batch_stats(
    engine: &Engine<'_>,
    batch: &[engine::PreparedRecord],
    weights: &[f64],
    streams: &StreamFamily,
    first_ordinal: u64,
    placements: usize,
) -> Result<BatchStats> {
    let outcomes = engine.replay(batch, weights, streams, first_ordinal)?;
    let mut totals = Totals::new(engine.goal_count(), placements);
    for o in &outcomes {
        totals.add(o, engine.offsets());
    }
    Ok(BatchStats::from_totals(&totals, engine.offsets()))
}

/// Snapshot of the state after `batches` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub batches: u64,
    /// Step size of the last update; `None` for the initial state.
    pub learning_rate: Option<f64>,
    pub states: Vec<CampaignState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub batches: u64,
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub adjusted_revenue_usd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedCampaign {
    pub campaign_id: String,
    pub penalty_kind: PenaltyKind,
    pub state: CampaignState,
}

/// A frozen strategy: everything needed to replay auctions against a
/// portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub config: OptimizerConfig,
    pub market: Market,
    pub campaigns: Vec<LearnedCampaign>,
    #[serde(default)]
    pub checkpoints: Vec<CheckpointMeta>,
}

impl Strategy {
    pub fn new(
        campaigns: &[Campaign],
        states: Vec<CampaignState>,
        market: Market,
        config: OptimizerConfig,
    ) -> Result<Self> {
        if states.len() != campaigns.len() {
            return Err(Error::StrategyMismatch(format!(
                "{} states for {} campaigns",
                states.len(),
                campaigns.len()
            )));
        }
        let strategy = Strategy {
            config,
            market,
            campaigns: campaigns
                .iter()
                .zip(states)
                .map(|(c, state)| LearnedCampaign {
                    campaign_id: c.campaign_id.clone(),
                    penalty_kind: c.penalty_kind,
                    state,
                })
                .collect(),
            checkpoints: Vec::new(),
        };
        strategy.check(campaigns)?;
        Ok(strategy)
    }

    /// The strategy the optimizer starts from.
    pub fn initial(
        campaigns: &[Campaign],
        market: Market,
        config: OptimizerConfig,
    ) -> Result<Self> {
        let states = campaigns
            .iter()
            .map(|c| initial_state(c, config.init))
            .collect();
        Strategy::new(campaigns, states, market, config)
    }

    pub fn states(&self) -> Vec<CampaignState> {
        self.campaigns.iter().map(|c| c.state.clone()).collect()
    }

    pub fn with_states(&self, states: Vec<CampaignState>) -> Result<Self> {
        let mut out = self.clone();
        if states.len() != out.campaigns.len() {
            return Err(Error::StrategyMismatch(format!(
                "{} states for {} campaigns",
                states.len(),
                out.campaigns.len()
            )));
        }
        for (c, s) in out.campaigns.iter_mut().zip(states) {
            c.state = s;
        }
        Ok(out)
    }

    /// Verifies that the strategy was learned for this portfolio.
    pub fn check(&self, campaigns: &[Campaign]) -> Result<()> {
        if self.campaigns.len() != campaigns.len() {
            return Err(Error::StrategyMismatch(format!(
                "strategy has {} campaigns, portfolio has {}",
                self.campaigns.len(),
                campaigns.len()
            )));
        }
        for (learned, c) in self.campaigns.iter().zip(campaigns) {
            let mismatch = |what: String| {
                Err(Error::StrategyMismatch(format!(
                    "campaign `{}`: {what}",
                    c.campaign_id
                )))
            };
            if learned.campaign_id != c.campaign_id {
                return mismatch(format!("strategy entry is `{}`", learned.campaign_id));
            }
            if learned.penalty_kind != c.penalty_kind {
                return mismatch("penalty kind differs".into());
            }
            let expected = match c.penalty_kind {
                PenaltyKind::Relu => "kappa",
                PenaltyKind::Softplus { .. } => "volume",
            };
            if learned.state.kind_name() != expected {
                return mismatch(format!("expected {expected} state"));
            }
            if learned.state.values().len() != c.goals.len() {
                return mismatch(format!(
                    "{} goals, strategy has {} values",
                    c.goals.len(),
                    learned.state.values().len()
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub checkpoints: Vec<Checkpoint>,
}

pub fn run(
    records: &[AuctionRecord],
    campaigns: &[Campaign],
    market: &Market,
    config: &OptimizerConfig,
) -> Result<RunOutput> {
    config.validate()?;
    validate_portfolio(campaigns)?;
    let n = records.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size > n {
        return Err(Error::BatchTooLarge {
            batch_size: config.batch_size,
            dataset_size: n,
        });
    }
    let engine = market.engine(
        campaigns,
        config.allocation,
        config.auction_type,
        config.accumulation,
    )?;
    let prepared = engine::prepare(records, &market.predictors, config.auction_type)?;
    let streams = StreamFamily::new(config.seed, DOMAIN_BATCH);

    let mut states: Vec<CampaignState> = campaigns
        .iter()
        .map(|c| initial_state(c, config.init))
        .collect();
    let mut checkpoints = vec![Checkpoint {
        batches: 0,
        learning_rate: None,
        states: states.clone(),
    }];
    let per_epoch = n.div_ceil(config.batch_size) as u64;
    let last = per_epoch * config.epochs as u64;
    let mut j = 0u64;
    for epoch in 0..config.epochs as u64 {
        let mut order = prepared.clone();
        data::shuffle(&mut order, derive(config.seed, DOMAIN_SHUFFLE, epoch));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            j += 1;
            let alpha = learning_rate(j, config.alpha0)?;
            let weights = engine.weights(&states)?;
            let ordinal = epoch * n as u64 + (b * config.batch_size) as u64;
            let stats = batch_stats(
                &engine,
                batch,
                &weights,
                &streams,
                ordinal,
                market.predictors.len(),
            )?;
            let ratio = batch.len() as f64 / n as f64;
            states = campaigns
                .iter()
                .zip(&states)
                .zip(&stats.delivered)
                .map(|((c, s), d)| update_state(c, s, d, ratio, alpha))
                .collect::<Result<_>>()?;
            if j.is_multiple_of(config.checkpoint_every as u64) || j == last {
                checkpoints.push(Checkpoint {
                    batches: j,
                    learning_rate: Some(alpha),
                    states: states.clone(),
                });
            }
        }
    }

    let mut strategy = Strategy::new(campaigns, states, market.clone(), config.clone())?;
    strategy.checkpoints = checkpoints
        .iter()
        .map(|c| CheckpointMeta {
            batches: c.batches,
            learning_rate: c.learning_rate,
            adjusted_revenue_usd: None,
        })
        .collect();
    Ok(RunOutput {
        strategy,
        checkpoints,
    })
}
