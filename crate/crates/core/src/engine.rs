//! Shared per-auction machinery for optimization and evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{solve_auction_sparse, AllocationMode, ScoreVector};
use crate::auction::{self, AuctionType, BidLandscape, LandscapeModel};
use crate::campaign::{fnv1a64, score_weights, Campaign, CampaignState, Metric};
use crate::data::{AuctionRecord, PlacementStats};
use crate::error::{Error, Result};
use crate::rng::StreamFamily;

/// How delivered volumes are accumulated while replaying auctions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    /// Count the replayed outcome of the sampled campaign.
    #[default]
    Realized,
    /// Add `q_k θ` for every targeted goal on each won auction.
    Expected,
}

/// Volume credited to one goal by one auction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub campaign: usize,
    pub goal: usize,
    pub amount: f64,
}

/// Result of replaying one auction under a frozen strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    pub placement: usize,
    pub bid: f64,
    pub won: bool,
    /// Campaign served on a win; `None` when the auction went to RTB or there
    /// are no campaigns.
    pub campaign: Option<usize>,
    /// Realized RTB revenue in $CPM.
    pub rtb_revenue: f64,
    pub deliveries: Vec<Delivery>,
}

const CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub(crate) struct PreparedRecord {
    placement: usize,
    hash: u64,
    highest: f64,
    second: Option<f64>,
    viewed: bool,
    clicked: bool,
}

pub(crate) fn prepare(
    records: &[AuctionRecord],
    predictors: &PlacementStats,
    auction_type: AuctionType,
) -> Result<Vec<PreparedRecord>> {
    records
        .par_iter()
        .map(|r| {
            let placement = predictors
                .index_of(&r.placement_id)
                .ok_or_else(|| Error::UnknownPlacement(r.placement_id.clone()))?;
            if auction_type == AuctionType::Second && r.second_bid.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "second-price replay needs second_bid_cpm (impression `{}`)",
                    r.impression_id
                )));
            }
            Ok(PreparedRecord {
                placement,
                hash: fnv1a64(r.impression_id.as_bytes()),
                highest: r.highest_bid,
                second: r.second_bid,
                viewed: r.viewed,
                clicked: r.clicked,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GoalRef {
    campaign: usize,
    goal: usize,
    flat: usize,
    theta: f64,
    metric: Metric,
}

#[derive(Debug, Default)]
struct PlacementIndex {
    always: Vec<GoalRef>,
    by_modulus: Vec<(u64, Vec<GoalRef>)>,
}

/// Goals bucketed by placement and hash modulus, so that an auction only
/// touches the goals it can count toward.
#[derive(Debug)]
struct TargetingIndex {
    placements: Vec<PlacementIndex>,
}

impl TargetingIndex {
    fn new(campaigns: &[Campaign], offsets: &[usize], predictors: &PlacementStats) -> Self {
        let placements = predictors
            .placements()
            .iter()
            .map(|p| {
                let mut always = Vec::new();
                let mut buckets: BTreeMap<u64, Vec<GoalRef>> = BTreeMap::new();
                for (k, c) in campaigns.iter().enumerate() {
                    for (i, g) in c.goals.iter().enumerate() {
                        if let Some(list) = &g.targeting.placements {
                            if !list.contains(&p.placement_id) {
                                continue;
                            }
                        }
                        let r = GoalRef {
                            campaign: k,
                            goal: i,
                            flat: offsets[k] + i,
                            theta: p.metric_rate(g.metric),
                            metric: g.metric,
                        };
                        match g.targeting.hash_mod {
                            Some(m) => buckets.entry(m).or_default().push(r),
                            None => always.push(r),
                        }
                    }
                }
                PlacementIndex {
                    always,
                    by_modulus: buckets.into_iter().collect(),
                }
            })
            .collect();
        TargetingIndex { placements }
    }

    fn matching(&self, record: &PreparedRecord, out: &mut Vec<GoalRef>) {
        out.clear();
        let idx = &self.placements[record.placement];
        out.extend_from_slice(&idx.always);
        for (m, list) in &idx.by_modulus {
            if record.hash % m == 1 {
                out.extend_from_slice(list);
            }
        }
        out.sort_by_key(|g| g.flat);
    }
}

pub(crate) struct Engine<'a> {
    campaigns: &'a [Campaign],
    offsets: Vec<usize>,
    index: TargetingIndex,
    mode: AllocationMode,
    auction_type: AuctionType,
    landscapes: Vec<BidLandscape>,
    accumulation: Accumulation,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        campaigns: &'a [Campaign],
        predictors: &PlacementStats,
        mode: AllocationMode,
        auction_type: AuctionType,
        landscapes: Option<&[LandscapeModel]>,
        accumulation: Accumulation,
    ) -> Result<Self> {
        mode.validate()?;
        let mut offsets = Vec::with_capacity(campaigns.len() + 1);
        let mut total = 0;
        for c in campaigns {
            offsets.push(total);
            total += c.goals.len();
        }
        offsets.push(total);
        let landscapes = match (auction_type, landscapes) {
            (AuctionType::First, _) => Vec::new(),
            (AuctionType::Second, Some(models)) => {
                if models.len() != predictors.len() {
                    return Err(Error::ArityMismatch {
                        expected: predictors.len(),
                        got: models.len(),
                    });
                }
                models
                    .iter()
                    .cloned()
                    .map(BidLandscape::parametric)
                    .collect::<Result<_>>()?
            }
            (AuctionType::Second, None) => {
                return Err(Error::InvalidArgument(
                    "second-price runs need fitted bid landscapes".into(),
                ))
            }
        };
        Ok(Engine {
            campaigns,
            index: TargetingIndex::new(campaigns, &offsets, predictors),
            offsets,
            mode,
            auction_type,
            landscapes,
            accumulation,
        })
    }

    pub(crate) fn goal_count(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Flattened score multipliers for a frozen strategy.
    pub(crate) fn weights(&self, states: &[CampaignState]) -> Result<Vec<f64>> {
        if states.len() != self.campaigns.len() {
            return Err(Error::StrategyMismatch(format!(
                "strategy has {} campaigns, portfolio has {}",
                states.len(),
                self.campaigns.len()
            )));
        }
        let mut out = Vec::with_capacity(self.goal_count());
        for (c, s) in self.campaigns.iter().zip(states) {
            let w = score_weights(c, s).map_err(|e| match e {
                Error::ArityMismatch { expected, got } => Error::StrategyMismatch(format!(
                    "campaign `{}` has {expected} goals, strategy has {got}",
                    c.campaign_id
                )),
                other => other,
            })?;
            out.extend(w);
        }
        Ok(out)
    }

    pub(crate) fn run_auction<R: Rng>(
        &self,
        record: &PreparedRecord,
        weights: &[f64],
        rng: &mut R,
        matched: &mut Vec<GoalRef>,
    ) -> Result<AuctionOutcome> {
        self.index.matching(record, matched);

        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(matched.len());
        for g in matched.iter() {
            let contribution = g.theta * weights[g.flat];
            match entries.last_mut() {
                Some(last) if last.0 == g.campaign => last.1 += contribution,
                _ => entries.push((g.campaign, contribution)),
            }
        }
        let scores = ScoreVector::sparse(self.campaigns.len(), entries);

        let observed;
        let landscape = match self.auction_type {
            AuctionType::First => {
                observed = BidLandscape::ObservedFirstPrice {
                    highest: record.highest,
                };
                &observed
            }
            AuctionType::Second => &self.landscapes[record.placement],
        };

        let (bid, q) = if scores.is_empty() {
            (auction::solve_optimal_bid(landscape, 0.0)?.bid, None)
        } else {
            let (d, q) = solve_auction_sparse(&scores, landscape, self.mode)?;
            (d.bid, Some(q))
        };

        let won = bid >= record.highest;
        let rtb_revenue = match (won, self.auction_type) {
            (true, _) => 0.0,
            (false, AuctionType::First) => record.highest,
            (false, AuctionType::Second) => record.second.unwrap_or(0.0).max(bid),
        };

        let mut outcome = AuctionOutcome {
            placement: record.placement,
            bid,
            won,
            campaign: None,
            rtb_revenue,
            deliveries: Vec::new(),
        };
        let Some(q) = q.filter(|_| won) else {
            return Ok(outcome);
        };
        let k = q.sample(rng);
        outcome.campaign = Some(k);
        match self.accumulation {
            Accumulation::Realized => {
                for g in matched.iter().filter(|g| g.campaign == k) {
                    let hit = match g.metric {
                        Metric::Impressions => true,
                        Metric::Views => record.viewed,
                        Metric::Clicks => record.clicked,
                    };
                    if hit {
                        outcome.deliveries.push(Delivery {
                            campaign: k,
                            goal: g.goal,
                            amount: 1.0,
                        });
                    }
                }
            }
            Accumulation::Expected => {
                for g in matched.iter().filter(|g| g.theta > 0.0) {
                    outcome.deliveries.push(Delivery {
                        campaign: g.campaign,
                        goal: g.goal,
                        amount: q.prob(g.campaign) * g.theta,
                    });
                }
            }
        }
        Ok(outcome)
    }

    /// Replays `records` in parallel; the auction at position `i` draws from
    /// stream `first_ordinal + i`. Outcomes come back in input order.
    pub(crate) fn replay(
        &self,
        records: &[PreparedRecord],
        weights: &[f64],
        streams: &StreamFamily,
        first_ordinal: u64,
    ) -> Result<Vec<AuctionOutcome>> {
        records
            .par_iter()
            .enumerate()
            .map_init(Vec::new, |scratch, (i, r)| {
                let mut rng = streams.stream(first_ordinal + i as u64);
                self.run_auction(r, weights, &mut rng, scratch)
            })
            .collect()
    }

    /// Like [`Engine::replay`] but folds outcomes into totals without keeping
    /// them. The fold runs over fixed chunks and the chunk totals are summed
    /// in order, so the result does not depend on thread scheduling.
    pub(crate) fn replay_totals(
        &self,
        records: &[PreparedRecord],
        weights: &[f64],
        streams: &StreamFamily,
        first_ordinal: u64,
        placements: usize,
    ) -> Result<Totals> {
        let goals = self.goal_count();
        let partials: Vec<Totals> = records
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut scratch = Vec::new();
                let mut acc = Totals::new(goals, placements);
                for (i, r) in chunk.iter().enumerate() {
                    let ordinal = first_ordinal + (c * CHUNK + i) as u64;
                    let mut rng = streams.stream(ordinal);
                    let o = self.run_auction(r, weights, &mut rng, &mut scratch)?;
                    acc.add(&o, &self.offsets);
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut total = Totals::new(goals, placements);
        for p in &partials {
            total.merge(p);
        }
        Ok(total)
    }
}

/// Aggregates of a replay: revenue in $CPM, delivered volume per flattened
/// goal, and per (goal, placement).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Totals {
    pub rtb_revenue: f64,
    pub won: u64,
    pub auctions: u64,
    pub delivered: Vec<f64>,
    pub by_placement: Vec<f64>,
    placements: usize,
}

impl Totals {
    pub(crate) fn new(goals: usize, placements: usize) -> Self {
        Totals {
            rtb_revenue: 0.0,
            won: 0,
            auctions: 0,
            delivered: vec![0.0; goals],
            by_placement: vec![0.0; goals * placements],
            placements,
        }
    }

    pub(crate) fn add(&mut self, o: &AuctionOutcome, offsets: &[usize]) {
        self.auctions += 1;
        self.won += o.won as u64;
        self.rtb_revenue += o.rtb_revenue;
        for d in &o.deliveries {
            let flat = offsets[d.campaign] + d.goal;
            self.delivered[flat] += d.amount;
            self.by_placement[flat * self.placements + o.placement] += d.amount;
        }
    }

    /// Folds outcomes with the same chunking as [`Engine::replay_totals`], so
    /// both paths produce identical floating-point sums.
    pub(crate) fn from_outcomes(
        outcomes: &[AuctionOutcome],
        offsets: &[usize],
        placements: usize,
    ) -> Self {
        let goals = *offsets.last().unwrap_or(&0);
        let mut total = Totals::new(goals, placements);
        for chunk in outcomes.chunks(CHUNK) {
            let mut acc = Totals::new(goals, placements);
            for o in chunk {
                acc.add(o, offsets);
            }
            total.merge(&acc);
        }
        total
    }

    fn merge(&mut self, other: &Totals) {
        self.auctions += other.auctions;
        self.won += other.won;
        self.rtb_revenue += other.rtb_revenue;
        for (a, b) in self.delivered.iter_mut().zip(&other.delivered) {
            *a += b;
        }
        for (a, b) in self.by_placement.iter_mut().zip(&other.by_placement) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::{Goal, PenaltyKind, Targeting};
    use crate::data::PlacementProfile;
    use crate::rng::DOMAIN_EVAL;

    fn stats() -> PlacementStats {
        PlacementStats::new(vec![
            PlacementProfile {
                placement_id: "A".into(),
                share: 0.5,
                mean_bid_cpm: 10.0,
                view_rate: 0.5,
                click_rate: 0.1,
            },
            PlacementProfile {
                placement_id: "B".into(),
                share: 0.5,
                mean_bid_cpm: 10.0,
                view_rate: 0.5,
                click_rate: 0.0,
            },
        ])
        .unwrap()
    }

    fn campaign(id: &str, targeting: Targeting, metric: Metric) -> Campaign {
        Campaign {
            campaign_id: id.into(),
            contractual_revenue: 0.0,
            penalty_kind: PenaltyKind::Relu,
            goals: vec![Goal {
                goal_id: "g".into(),
                metric,
                targeting,
                volume: 10,
                penalty_weight: 30.0,
            }],
        }
    }

    fn record(id: &str, placement: &str, highest: f64) -> AuctionRecord {
        AuctionRecord {
            impression_id: id.into(),
            placement_id: placement.into(),
            highest_bid: highest,
            second_bid: Some(highest / 2.0),
            viewed: true,
            clicked: false,
        }
    }

    #[test]
    fn index_agrees_with_direct_targeting() {
        let campaigns = vec![
            campaign("x", Targeting::hash_mod(3), Metric::Impressions),
            campaign("y", Targeting::placements(["B"]), Metric::Views),
            campaign(
                "z",
                Targeting {
                    placements: Some(vec!["A".into()]),
                    hash_mod: Some(5),
                },
                Metric::Clicks,
            ),
        ];
        let stats = stats();
        let engine = Engine::new(
            &campaigns,
            &stats,
            AllocationMode::Hard,
            AuctionType::First,
            None,
            Accumulation::Realized,
        )
        .unwrap();
        let records: Vec<AuctionRecord> = (0..500)
            .map(|i| record(&format!("imp{i}"), if i % 2 == 0 { "A" } else { "B" }, 1.0))
            .collect();
        let prepared = prepare(&records, &stats, AuctionType::First).unwrap();
        let mut buf = Vec::new();
        for (r, p) in records.iter().zip(&prepared) {
            engine.index.matching(p, &mut buf);
            let got: Vec<usize> = buf.iter().map(|g| g.campaign).collect();
            let want: Vec<usize> = campaigns
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.goals[0]
                        .targeting
                        .matches(&r.impression_id, &r.placement_id)
                })
                .map(|(k, _)| k)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn dominant_campaign_takes_everything() {
        let campaigns = vec![campaign("x", Targeting::all(), Metric::Impressions)];
        let stats = stats();
        let engine = Engine::new(
            &campaigns,
            &stats,
            AllocationMode::Hard,
            AuctionType::First,
            None,
            Accumulation::Realized,
        )
        .unwrap();
        let records: Vec<AuctionRecord> =
            (0..20).map(|i| record(&i.to_string(), "A", 12.0)).collect();
        let prepared = prepare(&records, &stats, AuctionType::First).unwrap();
        let weights = engine.weights(&[CampaignState::Kappa(vec![30.0])]).unwrap();
        let out = engine
            .replay(&prepared, &weights, &StreamFamily::new(1, DOMAIN_EVAL), 0)
            .unwrap();
        assert!(out
            .iter()
            .all(|o| o.won && o.campaign == Some(0) && o.rtb_revenue == 0.0));
        assert!(out.iter().all(|o| o.deliveries.len() == 1));
    }

    #[test]
    fn totals_match_outcomes() {
        let campaigns = vec![
            campaign("x", Targeting::hash_mod(2), Metric::Impressions),
            campaign("y", Targeting::all(), Metric::Views),
        ];
        let stats = stats();
        let engine = Engine::new(
            &campaigns,
            &stats,
            AllocationMode::Regularized { temperature: 0.5 },
            AuctionType::Second,
            Some(
                &crate::data::fit_landscapes(
                    &crate::data::generate_synthetic(&stats, 2000, 1).unwrap(),
                    &stats,
                )
                .unwrap(),
            ),
            Accumulation::Realized,
        )
        .unwrap();
        let records = crate::data::generate_synthetic(&stats, 9000, 2).unwrap();
        let prepared = prepare(&records, &stats, AuctionType::Second).unwrap();
        let weights = engine
            .weights(&[
                CampaignState::Kappa(vec![9.0]),
                CampaignState::Kappa(vec![14.0]),
            ])
            .unwrap();
        let fam = StreamFamily::new(4, DOMAIN_EVAL);
        let outcomes = engine.replay(&prepared, &weights, &fam, 0).unwrap();
        let totals = engine
            .replay_totals(&prepared, &weights, &fam, 0, 2)
            .unwrap();
        let mut direct = Totals::new(2, 2);
        for o in &outcomes {
            direct.add(o, engine.offsets());
        }
        assert_eq!(direct.won, totals.won);
        assert_eq!(direct.delivered, totals.delivered);
        assert!((direct.rtb_revenue - totals.rtb_revenue).abs() < 1e-9 * direct.rtb_revenue);
        assert!(totals.won > 0 && totals.won < 9000);
    }
}
