use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adalloc::allocation::AllocationMode;
use adalloc::auction::AuctionType;
use adalloc::campaign::{load_portfolio, write_portfolio};
use adalloc::data::{
    generate_campaign_portfolio, generate_synthetic, load_log, write_log, PlacementStats,
};
use adalloc::evaluation::{apply_strategy, convergence_curve};
use adalloc::optimizer::{run, Accumulation, Init, Market, OptimizerConfig, Strategy};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "adalloc",
    version,
    about = "Split ad impressions between RTB auctions and direct campaigns"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with run settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic auction log.
    GenerateAuctions {
        /// `paper-table` or a JSON placement profile.
        #[arg(long, default_value = "paper-table")]
        profile: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a random portfolio of hash-targeted impression campaigns.
    GenerateCampaigns {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        auctions: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a strategy from an auction log.
    Optimize {
        #[arg(long)]
        auctions: PathBuf,
        #[arg(long)]
        campaigns: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Strategy JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Convergence curve CSV to write.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Replay an auction log under a learned strategy.
    Apply {
        #[arg(long)]
        auctions: PathBuf,
        #[arg(long)]
        campaigns: PathBuf,
        #[arg(long)]
        strategy: PathBuf,
        /// Defaults to the seed the strategy was learned with.
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix: writes `<report>.csv` and `<report>.json`.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFlags {
    #[arg(long)]
    auction_type: Option<AuctionType>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Entropy temperature of the allocation.
    #[arg(long)]
    temperature: Option<f64>,
    /// Serve only top-scoring campaigns (no entropy term).
    #[arg(long)]
    #[serde(default)]
    hard: bool,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<Init>,
    #[arg(long, value_parser = parse_accumulation)]
    accumulation: Option<Accumulation>,
}

fn parse_init(s: &str) -> Result<Init, String> {
    match s {
        "zero" => Ok(Init::Zero),
        "weights" => Ok(Init::Weights),
        "goals" => Ok(Init::Goals),
        _ => Err(format!("expected zero, weights or goals, got `{s}`")),
    }
}

fn parse_accumulation(s: &str) -> Result<Accumulation, String> {
    match s {
        "realized" => Ok(Accumulation::Realized),
        "expected" => Ok(Accumulation::Expected),
        _ => Err(format!("expected realized or expected, got `{s}`")),
    }
}

impl RunFlags {
    /// Flags over file values over defaults.
    fn resolve(self, file: RunFlags) -> OptimizerConfig {
        let d = OptimizerConfig::default();
        let hard = self.hard || file.hard;
        let temperature = self.temperature.or(file.temperature);
        let allocation = match (hard, temperature) {
            (true, _) => AllocationMode::Hard,
            (false, Some(t)) => AllocationMode::Regularized { temperature: t },
            (false, None) => d.allocation,
        };
        OptimizerConfig {
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            alpha0: self.alpha0.or(file.alpha0).unwrap_or(d.alpha0),
            allocation,
            auction_type: self
                .auction_type
                .or(file.auction_type)
                .unwrap_or(d.auction_type),
            epochs: self.epochs.or(file.epochs).unwrap_or(d.epochs),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            init: self.init.or(file.init).unwrap_or(d.init),
            checkpoint_every: self
                .checkpoint_every
                .or(file.checkpoint_every)
                .unwrap_or(d.checkpoint_every),
            accumulation: self
                .accumulation
                .or(file.accumulation)
                .unwrap_or(d.accumulation),
        }
    }
}

/// Invalid invocation; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<adalloc::Error>() {
            return if e.is_non_convergence() {
                3
            } else if e.is_data_error() {
                2
            } else {
                1
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn read_config(path: Option<&Path>) -> anyhow::Result<RunFlags> {
    let Some(path) = path else {
        return Ok(RunFlags::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn load_profile(profile: &str) -> anyhow::Result<PlacementStats> {
    if profile == "paper-table" {
        return Ok(PlacementStats::paper_table());
    }
    PlacementStats::load(profile).with_context(|| format!("loading profile {profile}"))
}

fn generate_auctions(profile: &str, n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let profile = load_profile(profile)?;
    let records = generate_synthetic(&profile, n, seed)?;
    write_log(out, &records).with_context(|| format!("writing {}", out.display()))?;
    let stats = PlacementStats::from_records(&records)?;
    println!("wrote {n} auctions to {}", out.display());
    println!(
        "{:<12} {:>8} {:>12} {:>8} {:>8}",
        "placement", "share", "mean_bid", "view", "click"
    );
    for p in stats.placements() {
        println!(
            "{:<12} {:>8.4} {:>12.2} {:>8.4} {:>8.4}",
            p.placement_id, p.share, p.mean_bid_cpm, p.view_rate, p.click_rate
        );
    }
    Ok(())
}

fn generate_campaigns(k: usize, auctions: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let records = load_log(auctions).with_context(|| format!("reading {}", auctions.display()))?;
    let campaigns = generate_campaign_portfolio(k, &records, seed)?;
    write_portfolio(out, &campaigns).with_context(|| format!("writing {}", out.display()))?;
    let goals: u64 = campaigns
        .iter()
        .flat_map(|c| &c.goals)
        .map(|g| g.volume)
        .sum();
    println!("wrote {k} campaigns to {}", out.display());
    println!(
        "total goal / supply = {:.4}",
        goals as f64 / records.len() as f64
    );
    Ok(())
}

fn optimize(
    auctions: &Path,
    campaigns: &Path,
    config: OptimizerConfig,
    out: &Path,
    curve_path: Option<&Path>,
) -> anyhow::Result<()> {
    config.validate().map_err(|e| usage(e.to_string()))?;
    let records = load_log(auctions).with_context(|| format!("reading {}", auctions.display()))?;
    if records.is_empty() {
        return Err(adalloc::Error::EmptyDataset.into());
    }
    if config.batch_size > records.len() {
        return Err(usage(format!(
            "--batch-size {} exceeds the {} auctions in the log",
            config.batch_size,
            records.len()
        )));
    }
    let portfolio =
        load_portfolio(campaigns).with_context(|| format!("reading {}", campaigns.display()))?;
    let market = Market::from_records(&records, config.auction_type)?;
    let output = run(&records, &portfolio, &market, &config)?;
    let mut strategy = output.strategy;
    if let Some(path) = curve_path {
        let curve = convergence_curve(
            &records,
            &portfolio,
            &strategy,
            &output.checkpoints,
            config.seed,
        )?;
        for (meta, point) in strategy.checkpoints.iter_mut().zip(&curve.points) {
            meta.adjusted_revenue_usd = Some(point.adjusted_revenue_usd);
        }
        let file = std::fs::File::create(path)
            .map_err(adalloc::Error::from)
            .with_context(|| format!("writing {}", path.display()))?;
        curve.write_csv(file)?;
        if let (Some(first), Some(last)) = (curve.points.first(), curve.points.last()) {
            println!(
                "adjusted revenue: ${:.2} at batch {} -> ${:.2} at batch {}",
                first.adjusted_revenue_usd, first.batches, last.adjusted_revenue_usd, last.batches
            );
        }
        println!("wrote curve to {}", path.display());
    }
    strategy
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let batches = output.checkpoints.last().map_or(0, |c| c.batches);
    println!(
        "processed {batches} batches of {} auctions; wrote strategy for {} campaigns to {}",
        config.batch_size,
        portfolio.len(),
        out.display()
    );
    Ok(())
}

fn report_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let stem = match prefix.extension().and_then(|e| e.to_str()) {
        Some("csv" | "json") => prefix.with_extension(""),
        _ => prefix.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("csv"), with("json"))
}

fn apply(
    auctions: &Path,
    campaigns: &Path,
    strategy: &Path,
    seed: Option<u64>,
    report: &Path,
) -> anyhow::Result<()> {
    let records = load_log(auctions).with_context(|| format!("reading {}", auctions.display()))?;
    let portfolio =
        load_portfolio(campaigns).with_context(|| format!("reading {}", campaigns.display()))?;
    let strategy =
        Strategy::load(strategy).with_context(|| format!("reading {}", strategy.display()))?;
    let seed = seed.unwrap_or(strategy.config.seed);
    let (_, rep) = apply_strategy(&records, &portfolio, &strategy, seed)?;
    let (csv, json) = report_paths(report);
    rep.write(&csv, &json)
        .with_context(|| format!("writing {}", csv.display()))?;
    println!(
        "RTB revenue ${:.2}, penalty ${:.2}, adjusted revenue ${:.2}; won {} of {} auctions",
        rep.rtb_revenue_usd,
        rep.penalty_usd,
        rep.adjusted_revenue_usd,
        rep.auctions_won,
        rep.auctions_total
    );
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenerateAuctions {
            profile,
            n,
            seed,
            out,
        } => generate_auctions(&profile, n, seed, &out),
        Command::GenerateCampaigns {
            k,
            auctions,
            seed,
            out,
        } => generate_campaigns(k, &auctions, seed, &out),
        Command::Optimize {
            auctions,
            campaigns,
            run,
            out,
            curve,
        } => {
            let config = run.resolve(read_config(cli.config.as_deref())?);
            optimize(&auctions, &campaigns, config, &out, curve.as_deref())
        }
        Command::Apply {
            auctions,
            campaigns,
            strategy,
            seed,
            report,
        } => apply(&auctions, &campaigns, &strategy, seed, &report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
