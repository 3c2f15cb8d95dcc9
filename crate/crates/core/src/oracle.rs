//! Exhaustive ground truth for tiny first-price instances.
//!
//! In first price the publisher's decision on each auction reduces to "sell
//! to the highest bidder" or "serve campaign k", so enumerating all
//! `(K+1)^N` assignments gives the exact optimum of the adjusted revenue.

use crate::campaign::{penalty, validate_portfolio, Campaign, Metric, PenaltyKind};
use crate::data::AuctionRecord;
use crate::error::{Error, Result};

pub const MAX_AUCTIONS: usize = 14;
pub const MAX_CAMPAIGNS: usize = 3;

/// A handful of first-price auctions and ReLU impression campaigns.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub auctions: Vec<AuctionRecord>,
    pub campaigns: Vec<Campaign>,
}

impl TinyInstance {
    pub fn new(auctions: Vec<AuctionRecord>, campaigns: Vec<Campaign>) -> Result<Self> {
        if auctions.len() > MAX_AUCTIONS || campaigns.len() > MAX_CAMPAIGNS {
            return Err(Error::InstanceTooLarge(format!(
                "{} auctions and {} campaigns (limits {MAX_AUCTIONS} and {MAX_CAMPAIGNS})",
                auctions.len(),
                campaigns.len()
            )));
        }
        validate_portfolio(&campaigns)?;
        for c in &campaigns {
            if c.penalty_kind != PenaltyKind::Relu
                || c.goals.iter().any(|g| g.metric != Metric::Impressions)
            {
                return Err(Error::InvalidCampaign(format!(
                    "{}: tiny instances take ReLU impression goals only",
                    c.campaign_id
                )));
            }
        }
        Ok(TinyInstance {
            auctions,
            campaigns,
        })
    }

    /// `targets[n][k][i]`: whether auction `n` counts toward goal `i` of campaign `k`.
    fn targets(&self) -> Vec<Vec<Vec<bool>>> {
        self.auctions
            .iter()
            .map(|a| {
                self.campaigns
                    .iter()
                    .map(|c| {
                        c.goals
                            .iter()
                            .map(|g| g.targeting.matches(&a.impression_id, &a.placement_id))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Adjusted revenue in USD of an assignment (`None` sells the auction).
    pub fn adjusted_revenue(&self, assignment: &[Option<usize>]) -> Result<f64> {
        if assignment.len() != self.auctions.len() {
            return Err(Error::ArityMismatch {
                expected: self.auctions.len(),
                got: assignment.len(),
            });
        }
        let targets = self.targets();
        let mut delivered: Vec<Vec<f64>> = self
            .campaigns
            .iter()
            .map(|c| vec![0.0; c.goals.len()])
            .collect();
        let mut revenue = 0.0;
        for (n, a) in assignment.iter().enumerate() {
            match *a {
                None => revenue += self.auctions[n].highest_bid,
                Some(k) if k < self.campaigns.len() => {
                    for (d, &hit) in delivered[k].iter_mut().zip(&targets[n][k]) {
                        *d += hit as u8 as f64;
                    }
                }
                Some(k) => {
                    return Err(Error::InvalidArgument(format!("no campaign {k}")));
                }
            }
        }
        let mut pen = 0.0;
        for (c, d) in self.campaigns.iter().zip(&delivered) {
            pen += penalty(c, d)?;
        }
        Ok((revenue - pen) / 1000.0)
    }
}

struct Search<'a> {
    bids: Vec<f64>,
    targets: Vec<Vec<Vec<bool>>>,
    campaigns: &'a [Campaign],
    delivered: Vec<Vec<u64>>,
    current: Vec<Option<usize>>,
    best_value: f64,
    best: Vec<Option<usize>>,
}

impl Search<'_> {
    fn penalty(&self) -> f64 {
        self.campaigns
            .iter()
            .zip(&self.delivered)
            .map(|(c, d)| {
                c.goals
                    .iter()
                    .zip(d)
                    .map(|(g, &v)| g.penalty_weight * g.volume.saturating_sub(v) as f64)
                    .sum::<f64>()
            })
            .sum()
    }

    fn visit(&mut self, n: usize, revenue: f64) {
        if n == self.bids.len() {
            let value = revenue - self.penalty();
            if value > self.best_value {
                self.best_value = value;
                self.best.clone_from(&self.current);
            }
            return;
        }
        self.current[n] = None;
        self.visit(n + 1, revenue + self.bids[n]);
        for k in 0..self.campaigns.len() {
            self.current[n] = Some(k);
            for (d, &hit) in self.delivered[k].iter_mut().zip(&self.targets[n][k]) {
                *d += hit as u64;
            }
            self.visit(n + 1, revenue);
            for (d, &hit) in self.delivered[k].iter_mut().zip(&self.targets[n][k]) {
                *d -= hit as u64;
            }
        }
        self.current[n] = None;
    }
}

/// Maximum adjusted revenue (USD) over all assignments, with the
/// lexicographically smallest maximizer (selling ranks before campaign 0).
pub fn brute_force_optimal(instance: &TinyInstance) -> (f64, Vec<Option<usize>>) {
    let n = instance.auctions.len();
    let mut search = Search {
        bids: instance.auctions.iter().map(|a| a.highest_bid).collect(),
        targets: instance.targets(),
        campaigns: &instance.campaigns,
        delivered: instance
            .campaigns
            .iter()
            .map(|c| vec![0; c.goals.len()])
            .collect(),
        current: vec![None; n],
        best_value: f64::NEG_INFINITY,
        best: vec![None; n],
    };
    search.visit(0, 0.0);
    (search.best_value / 1000.0, search.best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::{Goal, Targeting};

    fn auction(id: usize, b: f64) -> AuctionRecord {
        AuctionRecord {
            impression_id: format!("{id:010}"),
            placement_id: "P".into(),
            highest_bid: b,
            second_bid: None,
            viewed: false,
            clicked: false,
        }
    }

    fn campaign(id: &str, g: u64, l: f64) -> Campaign {
        Campaign {
            campaign_id: id.into(),
            contractual_revenue: 0.0,
            penalty_kind: PenaltyKind::Relu,
            goals: vec![Goal {
                goal_id: "imp".into(),
                metric: Metric::Impressions,
                targeting: Targeting::all(),
                volume: g,
                penalty_weight: l,
            }],
        }
    }

    #[test]
    fn single_auction_example() {
        let inst = TinyInstance::new(vec![auction(0, 10.0)], vec![campaign("c", 1, 20.0)]).unwrap();
        assert_eq!(inst.adjusted_revenue(&[None]).unwrap(), -0.01);
        assert_eq!(inst.adjusted_revenue(&[Some(0)]).unwrap(), 0.0);
        assert_eq!(brute_force_optimal(&inst), (0.0, vec![Some(0)]));
    }

    #[test]
    fn penalty_free_sells_everything() {
        let bids = [3.0, 7.5, 1.25, 9.0];
        let auctions: Vec<_> = bids
            .iter()
            .enumerate()
            .map(|(i, &b)| auction(i, b))
            .collect();
        let total: f64 = bids.iter().sum::<f64>() / 1000.0;
        for c in [campaign("free", 3, 0.0), campaign("none", 0, 50.0)] {
            let inst = TinyInstance::new(auctions.clone(), vec![c]).unwrap();
            let (v, a) = brute_force_optimal(&inst);
            assert!((v - total).abs() < 1e-15);
            assert!(a.iter().all(Option::is_none));
        }
    }

    #[test]
    fn dominant_campaign_takes_all() {
        let auctions: Vec<_> = (0..6).map(|i| auction(i, 1.0 + i as f64)).collect();
        let inst = TinyInstance::new(
            auctions,
            vec![campaign("d", 6, 100.0), campaign("s", 2, 0.5)],
        )
        .unwrap();
        let (_, a) = brute_force_optimal(&inst);
        assert!(a.iter().all(|x| *x == Some(0)));
    }

    #[test]
    fn invariant_under_reordering() {
        let bids = [4.0, 12.0, 6.5, 2.0, 8.0, 15.0, 1.0];
        let fwd: Vec<_> = bids
            .iter()
            .enumerate()
            .map(|(i, &b)| auction(i, b))
            .collect();
        let rev: Vec<_> = fwd.iter().rev().cloned().collect();
        let cs = vec![campaign("a", 3, 9.0), campaign("b", 2, 5.0)];
        let (x, _) = brute_force_optimal(&TinyInstance::new(fwd, cs.clone()).unwrap());
        let (y, _) = brute_force_optimal(&TinyInstance::new(rev, cs).unwrap());
        assert_eq!(x, y);
        // a takes 1, 2 and 4; every remaining bid exceeds b's weight of 5.
        assert!((x - (6.5 + 8.0 + 12.0 + 15.0 - 2.0 * 5.0) / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn value_matches_assignment() {
        let auctions: Vec<_> = (0..8).map(|i| auction(i, 2.0 * i as f64 + 1.0)).collect();
        let inst = TinyInstance::new(auctions, vec![campaign("a", 4, 6.0)]).unwrap();
        let (v, a) = brute_force_optimal(&inst);
        assert!((inst.adjusted_revenue(&a).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn rejects_large_instances() {
        let auctions: Vec<_> = (0..15).map(|i| auction(i, 1.0)).collect();
        assert!(matches!(
            TinyInstance::new(auctions, vec![]),
            Err(Error::InstanceTooLarge(_))
        ));
    }
}
