//! Replaying a frozen strategy: adjusted revenue, delivery tables and
//! convergence curves.
//!
//! Money inside the crate is in $CPM; reports convert to USD by dividing by
//! 1000. Penalties are assessed once, on the volumes delivered over the whole
//! replay.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::campaign::{penalty, Campaign, Metric};
use crate::data::{AuctionRecord, PlacementStats};
use crate::engine::{self, Engine, Totals};
use crate::error::{Error, Result};
use crate::optimizer::{Checkpoint, Strategy};
use crate::rng::{StreamFamily, DOMAIN_EVAL};

pub use crate::engine::{AuctionOutcome, Delivery};

const CPM: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalDelivery {
    pub campaign_id: String,
    pub goal_id: String,
    pub metric: Metric,
    pub volume: u64,
    pub delivered: f64,
    /// Delivered volume split by placement, in predictor order.
    pub by_placement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rtb_revenue_usd: f64,
    pub penalty_usd: f64,
    pub adjusted_revenue_usd: f64,
    pub auctions_won: u64,
    pub auctions_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rtb_revenue_usd: f64,
    pub penalty_usd: f64,
    pub adjusted_revenue_usd: f64,
    pub auctions_won: u64,
    pub auctions_total: u64,
    pub placements: Vec<String>,
    pub goals: Vec<GoalDelivery>,
}

impl EvaluationReport {
    fn from_totals(
        t: &Totals,
        campaigns: &[Campaign],
        predictors: &PlacementStats,
    ) -> Result<Self> {
        let placements: Vec<String> = predictors
            .placements()
            .iter()
            .map(|p| p.placement_id.clone())
            .collect();
        let np = placements.len();
        let mut goals = Vec::new();
        let mut penalty_cpm = 0.0;
        let mut flat = 0;
        for c in campaigns {
            let delivered = &t.delivered[flat..flat + c.goals.len()];
            penalty_cpm += penalty(c, delivered)?;
            for (g, &d) in c.goals.iter().zip(delivered) {
                goals.push(GoalDelivery {
                    campaign_id: c.campaign_id.clone(),
                    goal_id: g.goal_id.clone(),
                    metric: g.metric,
                    volume: g.volume,
                    delivered: d,
                    by_placement: t.by_placement[flat * np..(flat + 1) * np].to_vec(),
                });
                flat += 1;
            }
        }
        let rtb_revenue_usd = t.rtb_revenue / CPM;
        let penalty_usd = penalty_cpm / CPM;
        Ok(EvaluationReport {
            rtb_revenue_usd,
            penalty_usd,
            adjusted_revenue_usd: rtb_revenue_usd - penalty_usd,
            auctions_won: t.won,
            auctions_total: t.auctions,
            placements,
            goals,
        })
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            rtb_revenue_usd: self.rtb_revenue_usd,
            penalty_usd: self.penalty_usd,
            adjusted_revenue_usd: self.adjusted_revenue_usd,
            auctions_won: self.auctions_won,
            auctions_total: self.auctions_total,
        }
    }

    pub fn delivery_table(&self) -> DeliveryTable {
        DeliveryTable {
            placements: self.placements.clone(),
            rows: self.goals.iter().map(DeliveryRow::from_goal).collect(),
        }
    }

    /// Writes `<stem>.csv` (delivery table) and `<stem>.json` (summary).
    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        self.delivery_table()
            .write_csv(std::fs::File::create(csv_path)?)?;
        let mut text = serde_json::to_string_pretty(&self.summary())?;
        text.push('\n');
        std::fs::write(json_path, text)?;
        Ok(())
    }
}

/// One row per (campaign, goal). Percentages are of the goal volume; the
/// delivered share is capped at 100% and split across placements in
/// proportion to the delivered counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRow {
    pub campaign_id: String,
    pub goal_id: String,
    pub metric: Metric,
    pub volume: u64,
    pub delivered: f64,
    pub placement_pct: Vec<f64>,
    pub undelivered_pct: f64,
}

impl DeliveryRow {
    fn from_goal(g: &GoalDelivery) -> Self {
        let (placement_pct, undelivered_pct) = if g.volume == 0 {
            (vec![0.0; g.by_placement.len()], 0.0)
        } else {
            let pct = (100.0 * g.delivered / g.volume as f64).min(100.0);
            let split = g
                .by_placement
                .iter()
                .map(|&d| {
                    if g.delivered > 0.0 {
                        pct * d / g.delivered
                    } else {
                        0.0
                    }
                })
                .collect();
            (split, 100.0 - pct)
        };
        DeliveryRow {
            campaign_id: g.campaign_id.clone(),
            goal_id: g.goal_id.clone(),
            metric: g.metric,
            volume: g.volume,
            delivered: g.delivered,
            placement_pct,
            undelivered_pct,
        }
    }

    pub fn delivered_pct(&self) -> f64 {
        self.placement_pct.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryTable {
    pub placements: Vec<String>,
    pub rows: Vec<DeliveryRow>,
}

impl DeliveryTable {
    pub fn row(&self, campaign_id: &str, goal_id: &str) -> Option<&DeliveryRow> {
        self.rows
            .iter()
            .find(|r| r.campaign_id == campaign_id && r.goal_id == goal_id)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["campaign_id", "goal_id", "metric", "goal", "delivered"];
        header.extend(self.placements.iter().map(String::as_str));
        header.push("undelivered");
        w.write_record(&header)?;
        for r in &self.rows {
            let metric = match r.metric {
                Metric::Impressions => "impressions",
                Metric::Views => "views",
                Metric::Clicks => "clicks",
            };
            let mut rec = vec![
                r.campaign_id.clone(),
                r.goal_id.clone(),
                metric.to_string(),
                r.volume.to_string(),
                format!("{}", r.delivered),
            ];
            rec.extend(r.placement_pct.iter().map(|p| format!("{p:.2}")));
            rec.push(format!("{:.2}", r.undelivered_pct));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rebuilds the delivery table of a replay from its per-auction outcomes.
pub fn delivery_report(
    outcomes: &[AuctionOutcome],
    campaigns: &[Campaign],
    predictors: &PlacementStats,
) -> Result<DeliveryTable> {
    let mut offsets = vec![0];
    for c in campaigns {
        offsets.push(offsets.last().unwrap() + c.goals.len());
    }
    for o in outcomes {
        if o.placement >= predictors.len()
            || o.deliveries.iter().any(|d| d.campaign >= campaigns.len())
        {
            return Err(Error::StrategyMismatch(
                "outcomes do not match the portfolio".into(),
            ));
        }
    }
    let totals = Totals::from_outcomes(outcomes, &offsets, predictors.len());
    Ok(EvaluationReport::from_totals(&totals, campaigns, predictors)?.delivery_table())
}

struct Replay<'a> {
    engine: Engine<'a>,
    prepared: Vec<engine::PreparedRecord>,
    streams: StreamFamily,
}

impl<'a> Replay<'a> {
    fn new(
        records: &[AuctionRecord],
        campaigns: &'a [Campaign],
        strategy: &Strategy,
        seed: u64,
    ) -> Result<Self> {
        strategy.check(campaigns)?;
        let cfg = &strategy.config;
        let engine = strategy.market.engine(
            campaigns,
            cfg.allocation,
            cfg.auction_type,
            cfg.accumulation,
        )?;
        let prepared = engine::prepare(records, &strategy.market.predictors, cfg.auction_type)?;
        Ok(Replay {
            engine,
            prepared,
            streams: StreamFamily::new(seed, DOMAIN_EVAL),
        })
    }

    fn report(
        &self,
        campaigns: &[Campaign],
        strategy: &Strategy,
        states: &[crate::campaign::CampaignState],
    ) -> Result<EvaluationReport> {
        let weights = self.engine.weights(states)?;
        let predictors = &strategy.market.predictors;
        let totals = self.engine.replay_totals(
            &self.prepared,
            &weights,
            &self.streams,
            0,
            predictors.len(),
        )?;
        EvaluationReport::from_totals(&totals, campaigns, predictors)
    }
}

/// Replays every record under the frozen strategy and keeps the per-auction
/// outcomes.
pub fn apply_strategy(
    records: &[AuctionRecord],
    campaigns: &[Campaign],
    strategy: &Strategy,
    seed: u64,
) -> Result<(Vec<AuctionOutcome>, EvaluationReport)> {
    let replay = Replay::new(records, campaigns, strategy, seed)?;
    let weights = replay.engine.weights(&strategy.states())?;
    let outcomes = replay
        .engine
        .replay(&replay.prepared, &weights, &replay.streams, 0)?;
    let predictors = &strategy.market.predictors;
    let totals = Totals::from_outcomes(&outcomes, replay.engine.offsets(), predictors.len());
    let report = EvaluationReport::from_totals(&totals, campaigns, predictors)?;
    Ok((outcomes, report))
}

/// Same report as [`apply_strategy`] without materializing the outcomes.
pub fn evaluate(
    records: &[AuctionRecord],
    campaigns: &[Campaign],
    strategy: &Strategy,
    seed: u64,
) -> Result<EvaluationReport> {
    let replay = Replay::new(records, campaigns, strategy, seed)?;
    replay.report(campaigns, strategy, &strategy.states())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub batches: u64,
    pub adjusted_revenue_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceCurve {
    pub points: Vec<CurvePoint>,
}

/// Adjusted revenue of every checkpoint's state on the full dataset.
pub fn convergence_curve(
    records: &[AuctionRecord],
    campaigns: &[Campaign],
    strategy: &Strategy,
    checkpoints: &[Checkpoint],
    seed: u64,
) -> Result<ConvergenceCurve> {
    let replay = Replay::new(records, campaigns, strategy, seed)?;
    let mut points: Vec<CurvePoint> = Vec::with_capacity(checkpoints.len());
    for cp in checkpoints {
        if points.last().is_some_and(|p| p.batches >= cp.batches) {
            return Err(Error::InvalidArgument(
                "checkpoints must be in increasing batch order".into(),
            ));
        }
        let report = replay.report(campaigns, strategy, &cp.states)?;
        points.push(CurvePoint {
            batches: cp.batches,
            adjusted_revenue_usd: report.adjusted_revenue_usd,
        });
    }
    Ok(ConvergenceCurve { points })
}

impl ConvergenceCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["batches", "adjusted_revenue_usd"])?;
        for p in &self.points {
            w.write_record([p.batches.to_string(), p.adjusted_revenue_usd.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean of the last `window` points.
    pub fn tail_level(&self, window: usize) -> Option<f64> {
        let n = self.points.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.points[n.saturating_sub(window)..];
        Some(tail.iter().map(|p| p.adjusted_revenue_usd).sum::<f64>() / tail.len() as f64)
    }

    /// Whether the last `window` points lie within `rel_band · |level|` of
    /// their mean.
    pub fn tail_within_band(&self, window: usize, rel_band: f64) -> bool {
        let Some(level) = self.tail_level(window) else {
            return false;
        };
        let n = self.points.len();
        self.points[n.saturating_sub(window)..]
            .iter()
            .all(|p| (p.adjusted_revenue_usd - level).abs() <= rel_band * level.abs())
    }

    /// First checkpoint from which every later point stays within the band
    /// around the tail level.
    pub fn plateau_batch(&self, window: usize, rel_band: f64) -> Option<u64> {
        let level = self.tail_level(window)?;
        let inside =
            |p: &CurvePoint| (p.adjusted_revenue_usd - level).abs() <= rel_band * level.abs();
        let mut start = None;
        for p in self.points.iter().rev() {
            if inside(p) {
                start = Some(p.batches);
            } else {
                break;
            }
        }
        start
    }
}
