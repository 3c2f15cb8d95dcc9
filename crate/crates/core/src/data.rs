//! Auction logs, placement statistics and synthetic data generators.
//!
//! The log format is CSV with the header
//! `impression_id,placement_id,highest_bid_cpm,second_bid_cpm,viewed,clicked`.
//! `second_bid_cpm` may be empty; flags are written as `0`/`1` (`true`/`false`
//! are accepted on input).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::auction::{BidDistribution, LandscapeModel};
use crate::campaign::{Campaign, Goal, Metric, PenaltyKind, Targeting};
use crate::error::{Error, Result};
use crate::rng;

pub const LOG_HEADER: [&str; 6] = [
    "impression_id",
    "placement_id",
    "highest_bid_cpm",
    "second_bid_cpm",
    "viewed",
    "clicked",
];

/// Dispersion of the synthetic lognormal highest bids.
pub const SYNTHETIC_BID_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub impression_id: String,
    pub placement_id: String,
    pub highest_bid: f64,
    pub second_bid: Option<f64>,
    pub viewed: bool,
    pub clicked: bool,
}

impl AuctionRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if !(self.highest_bid > 0.0 && self.highest_bid.is_finite()) {
            return Err(format!("highest_bid must be > 0, got {}", self.highest_bid));
        }
        if let Some(c) = self.second_bid {
            if !(c >= 0.0) {
                return Err(format!("second_bid must be >= 0, got {c}"));
            }
            if c > self.highest_bid {
                return Err(format!(
                    "second_bid {c} exceeds highest_bid {}",
                    self.highest_bid
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementProfile {
    pub placement_id: String,
    pub share: f64,
    pub mean_bid_cpm: f64,
    pub view_rate: f64,
    pub click_rate: f64,
}

impl PlacementProfile {
    pub fn metric_rate(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Impressions => 1.0,
            Metric::Views => self.view_rate,
            Metric::Clicks => self.click_rate,
        }
    }
}

/// Per-placement averages. Doubles as the view/click predictor of targeting
/// probabilities and as the profile of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PlacementProfile>", into = "Vec<PlacementProfile>")]
pub struct PlacementStats {
    placements: Vec<PlacementProfile>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<PlacementProfile>> for PlacementStats {
    type Error = Error;

    fn try_from(placements: Vec<PlacementProfile>) -> Result<Self> {
        PlacementStats::new(placements)
    }
}

impl From<PlacementStats> for Vec<PlacementProfile> {
    fn from(stats: PlacementStats) -> Self {
        stats.placements
    }
}

impl PlacementStats {
    /// Shares are normalized to sum to one.
    pub fn new(mut placements: Vec<PlacementProfile>) -> Result<Self> {
        if placements.is_empty() {
            return Err(Error::InvalidArgument("profile has no placements".into()));
        }
        let total: f64 = placements.iter().map(|p| p.share).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidArgument(
                "placement shares must sum to > 0".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, p) in placements.iter_mut().enumerate() {
            let rates_ok =
                (0.0..=1.0).contains(&p.view_rate) && (0.0..=1.0).contains(&p.click_rate);
            if !(p.share >= 0.0) || !rates_ok || !(p.mean_bid_cpm >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "placement `{}` has out-of-range statistics",
                    p.placement_id
                )));
            }
            if index.insert(p.placement_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate placement `{}`",
                    p.placement_id
                )));
            }
            if (total - 1.0).abs() > 1e-12 {
                p.share /= total;
            }
        }
        Ok(PlacementStats { placements, index })
    }

    /// The four video placements of the reference dataset (shares in millions
    /// of impressions, bids in $CPM).
    pub fn paper_table() -> Self {
        let rows = [
            ("P1", 15.46, 13.15, 0.770, 0.0013),
            ("P2", 5.56, 15.36, 0.779, 0.0023),
            ("P3", 2.43, 15.55, 0.597, 0.0203),
            ("P4", 0.14, 25.37, 0.427, 0.0),
        ];
        PlacementStats::new(
            rows.iter()
                .map(|&(id, share, bid, view, click)| PlacementProfile {
                    placement_id: id.into(),
                    share,
                    mean_bid_cpm: bid,
                    view_rate: view,
                    click_rate: click,
                })
                .collect(),
        )
        .expect("built-in profile is valid")
    }

    /// Empirical averages of a log, placements in order of first appearance.
    pub fn from_records(records: &[AuctionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<&str> = Vec::new();
        let mut acc: HashMap<&str, (f64, f64, f64, f64)> = HashMap::new();
        for r in records {
            let e = acc.entry(&r.placement_id).or_insert_with(|| {
                order.push(&r.placement_id);
                (0.0, 0.0, 0.0, 0.0)
            });
            e.0 += 1.0;
            e.1 += r.highest_bid;
            e.2 += r.viewed as u8 as f64;
            e.3 += r.clicked as u8 as f64;
        }
        PlacementStats::new(
            order
                .into_iter()
                .map(|id| {
                    let (n, bids, views, clicks) = acc[id];
                    PlacementProfile {
                        placement_id: id.to_string(),
                        share: n,
                        mean_bid_cpm: bids / n,
                        view_rate: views / n,
                        click_rate: clicks / n,
                    }
                })
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn get(&self, placement_id: &str) -> Option<&PlacementProfile> {
        self.index.get(placement_id).map(|&i| &self.placements[i])
    }

    pub fn index_of(&self, placement_id: &str) -> Option<usize> {
        self.index.get(placement_id).copied()
    }

    pub fn placements(&self) -> &[PlacementProfile] {
        &self.placements
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

pub fn read_log<R: Read>(reader: R) -> Result<Vec<AuctionRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let missing: Vec<&str> = LOG_HEADER
        .iter()
        .zip(header.iter().chain(std::iter::repeat("")))
        .filter(|(want, got)| **want != *got)
        .map(|(want, _)| *want)
        .collect();
    if !missing.is_empty() || header.len() != LOG_HEADER.len() {
        return Err(Error::Record {
            line: 1,
            message: format!(
                "header must be `{}`; mismatched columns: {}",
                LOG_HEADER.join(","),
                missing.join(",")
            ),
        });
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let fail = |message: String| Error::Record { line, message };
        if row.len() != LOG_HEADER.len() {
            return Err(fail(format!("expected 6 fields, found {}", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| fail(format!("{}: cannot parse `{}`", LOG_HEADER[i], &row[i])))
        };
        let flag = |i: usize| -> Result<bool> {
            parse_flag(&row[i]).ok_or_else(|| {
                fail(format!(
                    "{}: expected 0/1, got `{}`",
                    LOG_HEADER[i], &row[i]
                ))
            })
        };
        let record = AuctionRecord {
            impression_id: row[0].to_string(),
            placement_id: row[1].to_string(),
            highest_bid: num(2)?,
            second_bid: if row[3].is_empty() {
                None
            } else {
                Some(num(3)?)
            },
            viewed: flag(4)?,
            clicked: flag(5)?,
        };
        record.check().map_err(fail)?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<AuctionRecord>> {
    let file = std::fs::File::open(path)?;
    read_log(std::io::BufReader::new(file))
}

pub fn write_log_to<W: Write>(writer: W, records: &[AuctionRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record(LOG_HEADER)?;
    for r in records {
        let flag = |b: bool| if b { "1" } else { "0" };
        w.write_record([
            r.impression_id.as_str(),
            r.placement_id.as_str(),
            &r.highest_bid.to_string(),
            &r.second_bid.map(|c| c.to_string()).unwrap_or_default(),
            flag(r.viewed),
            flag(r.clicked),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log(path: impl AsRef<Path>, records: &[AuctionRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_log_to(std::io::BufWriter::new(file), records)
}

/// Fisher-Yates shuffle driven by a seeded ChaCha stream.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut rng::seeded(seed));
}

/// Synthetic log following `profile`: placement drawn by share, lognormal
/// highest bid with the placement's mean, second bid a uniform fraction of the
/// highest, independent view and click flags at the placement rates.
pub fn generate_synthetic(
    profile: &PlacementStats,
    n: usize,
    seed: u64,
) -> Result<Vec<AuctionRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let placements = profile.placements();
    let chooser = WeightedIndex::new(placements.iter().map(|p| p.share))
        .map_err(|e| Error::InvalidArgument(format!("placement shares: {e}")))?;
    let bids = placements
        .iter()
        .map(|p| {
            let mu = p.mean_bid_cpm.ln() - 0.5 * SYNTHETIC_BID_SIGMA * SYNTHETIC_BID_SIGMA;
            LogNormal::new(mu, SYNTHETIC_BID_SIGMA)
                .map_err(|e| Error::InvalidArgument(format!("placement `{}`: {e}", p.placement_id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for ordinal in 0..n {
        let k = chooser.sample(&mut rng);
        let p = &placements[k];
        let highest: f64 = bids[k].sample(&mut rng);
        let fraction: f64 = rng.random();
        out.push(AuctionRecord {
            impression_id: format!("{ordinal:010}"),
            placement_id: p.placement_id.clone(),
            highest_bid: highest,
            second_bid: Some(highest * fraction),
            viewed: rng.random_bool(p.view_rate),
            clicked: rng.random_bool(p.click_rate),
        });
    }
    Ok(out)
}

/// `K` single-goal impression campaigns: hash-mod targeting with modulus drawn
/// from `[10, 100]`, goal uniform on `[0, 0.8 |supply| / K]` (so the goals add
/// up to 40% of the supply on average) and penalty weight uniform on `[0, 50]`.
pub fn generate_campaign_portfolio(
    k: usize,
    supply: &[AuctionRecord],
    seed: u64,
) -> Result<Vec<Campaign>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if supply.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max_goal = 0.8 * supply.len() as f64 / k as f64;
    let width = (k - 1).to_string().len().max(4);
    let mut rng = rng::seeded(seed);
    Ok((0..k)
        .map(|i| {
            let modulus = rng.random_range(10..=100u64);
            let volume = (rng.random::<f64>() * max_goal).round() as u64;
            let weight = rng.random::<f64>() * 50.0;
            Campaign {
                campaign_id: format!("c{i:0width$}"),
                contractual_revenue: 0.0,
                penalty_kind: PenaltyKind::Relu,
                goals: vec![Goal {
                    goal_id: "imp".into(),
                    metric: Metric::Impressions,
                    targeting: Targeting::hash_mod(modulus),
                    volume,
                    penalty_weight: weight,
                }],
            }
        })
        .collect())
}

/// The nine hand-built campaigns of the reference experiment (three
/// impression, three viewability and three click campaigns), with goals
/// multiplied by `scale`.
pub fn reference_portfolio(scale: f64) -> Vec<Campaign> {
    let rows: [(&str, Metric, f64, f64); 9] = [
        ("C1", Metric::Impressions, 3e6, 5.0),
        ("C2", Metric::Impressions, 3e6, 10.0),
        ("C3", Metric::Impressions, 3e6, 20.0),
        ("C4", Metric::Views, 2e6, 5.0),
        ("C5", Metric::Views, 2e6, 15.0),
        ("C6", Metric::Views, 2e6, 30.0),
        ("C7", Metric::Clicks, 2e3, 200.0),
        ("C8", Metric::Clicks, 2e3, 500.0),
        ("C9", Metric::Clicks, 2e3, 1000.0),
    ];
    rows.iter()
        .map(|&(id, metric, goal, weight)| Campaign {
            campaign_id: id.into(),
            contractual_revenue: 0.0,
            penalty_kind: PenaltyKind::Relu,
            goals: vec![Goal {
                goal_id: match metric {
                    Metric::Impressions => "imp",
                    Metric::Views => "view",
                    Metric::Clicks => "click",
                }
                .into(),
                metric,
                targeting: Targeting::all(),
                volume: (goal * scale).round() as u64,
                penalty_weight: weight,
            }],
        })
        .collect()
}

/// Supply scale of the reference dataset (23.59 million impressions).
pub const REFERENCE_SUPPLY: f64 = 23.59e6;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn fit_lognormal(values: impl Iterator<Item = f64>) -> Option<BidDistribution> {
    let logs: Vec<f64> = values.filter(|v| *v > 0.0).map(f64::ln).collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / (n - 1.0);
    (var > 0.0).then(|| BidDistribution::LogNormal {
        mu,
        sigma: var.sqrt(),
    })
}

/// Per-placement second-price landscapes: lognormal highest and second bids
/// fitted by moments of the log-bids. The support extends to twice the
/// 99.99th percentile of observed highest bids, or further if the fitted laws
/// need it.
pub fn fit_landscapes(
    records: &[AuctionRecord],
    placements: &PlacementStats,
) -> Result<Vec<LandscapeModel>> {
    placements
        .placements()
        .iter()
        .map(|p| {
            let rows: Vec<&AuctionRecord> = records
                .iter()
                .filter(|r| r.placement_id == p.placement_id)
                .collect();
            let fail = |what: &str| {
                Error::InvalidArgument(format!("placement `{}`: {what}", p.placement_id))
            };
            let highest = fit_lognormal(rows.iter().map(|r| r.highest_bid))
                .ok_or_else(|| fail("too few distinct highest bids to fit"))?;
            // Without usable second bids, fall back to a uniform fraction of the highest.
            let second = fit_lognormal(rows.iter().filter_map(|r| r.second_bid))
                .unwrap_or_else(|| BidDistribution::UniformFraction(Box::new(highest.clone())));
            let mut bids: Vec<f64> = rows.iter().map(|r| r.highest_bid).collect();
            bids.sort_by(f64::total_cmp);
            let support_max = (2.0 * quantile(&bids, 0.9999))
                .max(highest.upper_bound())
                .max(second.upper_bound());
            Ok(LandscapeModel {
                highest,
                second,
                support_max,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "impression_id,placement_id,highest_bid_cpm,second_bid_cpm,viewed,clicked\n\
                        a,P1,10,4,1,0\n\
                        b,P2,3.5,,0,0\n\
                        c,P1,12.25,12.25,true,false\n";

    #[test]
    fn parses_in_order() {
        let recs = read_log(GOOD.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].impression_id, "a");
        assert_eq!(recs[1].second_bid, None);
        assert!(recs[2].viewed && !recs[2].clicked);
    }

    #[test]
    fn rejects_zero_highest_bid_with_line() {
        let text = "impression_id,placement_id,highest_bid_cpm,second_bid_cpm,viewed,clicked\n\
                    a,P1,10,4,1,0\n\
                    b,P1,0,,0,0\n";
        match read_log(text.as_bytes()) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_inverted_bids() {
        let text = "impression_id,placement_id,highest_bid_cpm,second_bid_cpm,viewed,clicked\n\
                    a,P1,10,15,1,0\n";
        let err = read_log(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn rejects_missing_columns() {
        let text = "impression_id,placement_id,highest_bid_cpm\na,P1,3\n";
        let err = read_log(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("second_bid_cpm"), "{err}");
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let recs = generate_synthetic(&PlacementStats::paper_table(), 200, 3).unwrap();
        let mut first = Vec::new();
        write_log_to(&mut first, &recs).unwrap();
        let back = read_log(first.as_slice()).unwrap();
        assert_eq!(back, recs);
        let mut second = Vec::new();
        write_log_to(&mut second, &back).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let mut empty: Vec<u32> = vec![];
        shuffle(&mut empty, 1);
        assert!(empty.is_empty());
        let mut a: Vec<u32> = (0..100).collect();
        let mut b = a.clone();
        shuffle(&mut a, 9);
        shuffle(&mut b, 9);
        assert_eq!(a, b);
        let mut c: Vec<u32> = (0..100).collect();
        shuffle(&mut c, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_click_rate_never_clicks() {
        let profile = PlacementStats::new(vec![PlacementProfile {
            placement_id: "only".into(),
            share: 1.0,
            mean_bid_cpm: 5.0,
            view_rate: 0.5,
            click_rate: 0.0,
        }])
        .unwrap();
        let recs = generate_synthetic(&profile, 5000, 1).unwrap();
        assert!(recs.iter().all(|r| !r.clicked));
        assert!(recs.iter().all(|r| r.second_bid.unwrap() <= r.highest_bid));
    }

    #[test]
    fn portfolio_ranges() {
        let supply = generate_synthetic(&PlacementStats::paper_table(), 1000, 1).unwrap();
        let camps = generate_campaign_portfolio(50, &supply, 4).unwrap();
        assert_eq!(camps.len(), 50);
        for c in &camps {
            let g = &c.goals[0];
            let m = g.targeting.hash_mod.unwrap();
            assert!((10..=100).contains(&m));
            assert!((0.0..=50.0).contains(&g.penalty_weight));
            assert!(g.volume as f64 <= 0.8 * 1000.0 / 50.0 + 0.5);
        }
        assert!(generate_campaign_portfolio(0, &supply, 4).is_err());
    }

    #[test]
    fn stats_from_records() {
        let recs = read_log(GOOD.as_bytes()).unwrap();
        let stats = PlacementStats::from_records(&recs).unwrap();
        let p1 = stats.get("P1").unwrap();
        assert!((p1.share - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p1.view_rate, 1.0);
        assert!((p1.mean_bid_cpm - 11.125).abs() < 1e-12);
        assert_eq!(stats.placements()[1].placement_id, "P2");
    }

    #[test]
    fn profile_json_round_trip() {
        let stats = PlacementStats::paper_table();
        let json = serde_json::to_string(&stats).unwrap();
        let back: PlacementStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back.index_of("P3"), Some(2));
        assert_eq!(back.placements(), stats.placements());
    }

    #[test]
    fn fitted_landscapes_are_valid() {
        let recs = generate_synthetic(&PlacementStats::paper_table(), 20_000, 8).unwrap();
        let stats = PlacementStats::from_records(&recs).unwrap();
        let models = fit_landscapes(&recs, &stats).unwrap();
        assert_eq!(models.len(), 4);
        for m in models {
            crate::auction::ParametricLandscape::new(m).unwrap();
        }
    }
}
