#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod auction;
pub mod campaign;
pub mod data;
mod engine;
pub mod error;
pub mod evaluation;
pub mod optimizer;
pub mod oracle;
pub(crate) mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    struct Readme;
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/auctions.md")]
    struct Auctions;
    #[doc = include_str!("../../../book/src/campaigns.md")]
    struct Campaigns;
    #[doc = include_str!("../../../book/src/allocation.md")]
    struct Allocation;
    #[doc = include_str!("../../../book/src/optimizer.md")]
    struct Optimizer;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
