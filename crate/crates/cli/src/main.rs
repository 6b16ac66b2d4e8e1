//! `lazylp`: every pipeline stage as a subcommand over one JSON run config.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use lazylp::agent::{train, write_training_log, GreedyPolicy};
use lazylp::backtest::{gas_sweep, heatmap, linspace, run, HeatmapReference};
use lazylp::config::{DataSource, Profile, RunConfig};
use lazylp::envsim::{write_trace_csv, EnvConfig, Environment, MarketFeatures};
use lazylp::marketdata::{split, BarSeries};
use lazylp::neural::Checkpoint;
use lazylp::qvi::{boundary_deviation, solve, QviSolution};
use lazylp::regime::{rolling_estimates, write_estimates_csv};
use lazylp::strategies::{Strategy, StrategySpec};
use lazylp::{Error, Result};
use serde::Serialize;
use serde_json::json;

const THREADS_VAR: &str = "RAMMSTEIN_THREADS";

#[derive(Parser)]
#[command(name = "lazylp", version, about = "Concentrated-liquidity rebalancing laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; every artifact is written inside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training size preset.
    #[arg(long, value_parser = ["smoke", "full"])]
    profile: Option<String>,
    /// Bars CSV replacing the config's data source (trades CSV for `ingest`).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CheckpointArg {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate raw trades into 1 Hz bars.
    Ingest(Common),
    /// Simulate the configured regime schedule.
    Synth(Common),
    /// Rolling OU estimates, one row per bar.
    Estimate(Common),
    /// Train the DDQN agent on the training split.
    Train(Common),
    /// Replay one strategy over the test split.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        /// Strategy name (merlin, bedivere, lancelot, galahad, ddqn).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Net ROI of each configured strategy across gas levels.
    SweepGas {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
    /// Solve the impulse-control QVI and export values and boundaries.
    Qvi(Common),
    /// Q(recenter) - Q(hold) of a checkpoint over (theta, edge distance).
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Estimate(_) => "estimate",
            Command::Train(_) => "train",
            Command::Backtest { .. } => "backtest",
            Command::SweepGas { .. } => "sweep-gas",
            Command::Qvi(_) => "qvi",
            Command::Heatmap { .. } => "heatmap",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Ingest(c) | Command::Synth(c) | Command::Estimate(c) | Command::Train(c) | Command::Qvi(c) => c,
            Command::Backtest { common, .. } | Command::SweepGas { common, .. } | Command::Heatmap { common, .. } => common,
        }
    }
}

/// Effective config plus where its artifacts go.
struct Session {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    command: &'static str,
    written: Vec<String>,
}

impl Session {
    fn open(command: &Command) -> Result<Self> {
        let common = command.common();
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &common.profile {
            cfg.apply_profile(Profile::parse(p)?);
        }
        if let Some(input) = &common.input {
            cfg.data = match command {
                Command::Ingest(_) => DataSource::TradesCsv(input.clone()),
                _ => DataSource::BarsCsv(input.clone()),
            };
        }
        if let Command::Backtest { strategy: Some(name), .. } = command {
            cfg.strategy = StrategySpec::parse_name(name)?;
        }
        cfg.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
        std::fs::create_dir_all(&out)?;
        Ok(Session { hash: cfg.hash(), cfg, out, command: command.name(), written: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.written.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let w = self.create(name)?;
        serde_json::to_writer_pretty(w, value)?;
        Ok(())
    }

    /// `<command>.manifest.json` ties every artifact to the config hash, and
    /// `<command>.config.json` holds the effective config.
    fn finish(mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        self.write_json(&format!("{}.config.json", self.command), &cfg)?;
        let manifest = json!({
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "artifacts": self.written,
        });
        let w = BufWriter::new(File::create(self.out.join(format!("{}.manifest.json", self.command)))?);
        serde_json::to_writer_pretty(w, &manifest)?;
        Ok(())
    }

    fn series(&self) -> Result<BarSeries> {
        let series = self.cfg.data.load(self.cfg.seed)?;
        let s = self.cfg.split;
        split(series, (s.train, s.val, s.test))
    }

    /// Features over the whole series, cut to the test split so the
    /// estimator has already seen the preceding bars.
    fn test_market(&self, series: &BarSeries) -> Result<MarketFeatures> {
        MarketFeatures::new(series, self.cfg.regime_window)?.slice(series.test_range())
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Checkpoint::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    })
    .transpose()
}

fn ingest(mut s: Session) -> Result<Session> {
    if !matches!(s.cfg.data, DataSource::TradesCsv(_)) {
        return Err(Error::Config("ingest needs trades: pass --input or set data.trades_csv".into()));
    }
    let bars = s.cfg.data.load(s.cfg.seed)?;
    bars.write_csv(s.create("bars.csv")?)?;
    Ok(s)
}

fn synth(mut s: Session) -> Result<Session> {
    if !matches!(s.cfg.data, DataSource::Synth(_)) {
        return Err(Error::Config("synth needs a synth data source".into()));
    }
    let bars = s.cfg.data.load(s.cfg.seed)?;
    bars.write_csv(s.create("bars.csv")?)?;
    Ok(s)
}

fn estimate(mut s: Session) -> Result<Session> {
    let bars = s.cfg.data.load(s.cfg.seed)?;
    let estimates = rolling_estimates(&bars.closes(), s.cfg.regime_window, 1.0)?;
    let t: Vec<i64> = bars.bars().iter().map(|b| b.t).collect();
    write_estimates_csv(&t, &estimates, s.create("regime.csv")?)?;
    Ok(s)
}

fn train_cmd(mut s: Session) -> Result<Session> {
    let series = s.series()?;
    let train_part = series.segment(series.train_range())?;
    let market = Arc::new(MarketFeatures::new(&train_part, s.cfg.regime_window)?);
    let env_cfg = EnvConfig { pool: s.cfg.pool, reward: s.cfg.reward, episode_length: s.cfg.train.episode_length };
    let mut env = Environment::new(market, env_cfg)?;
    let outcome = train(&mut env, &s.cfg.train, s.cfg.seed, &s.hash)?;
    let text = outcome.checkpoint.to_json()?;
    s.written.push("checkpoint.json".into());
    std::fs::write(s.out.join("checkpoint.json"), text)?;
    write_training_log(&outcome.log, s.create("training_log.csv")?)?;
    Ok(s)
}

fn backtest_cmd(mut s: Session, ck: Option<&Path>) -> Result<Session> {
    let ck = load_checkpoint(ck)?;
    let strategy = s.cfg.strategy.build(ck.as_ref())?;
    let series = s.series()?;
    let market = s.test_market(&series)?;
    let mut out = run(strategy.as_ref(), &market, &s.cfg.pool, &s.cfg.reward)?;
    write_trace_csv(&out.trace, s.create("trace.csv")?)?;
    out.report.config_hash = s.hash.clone();
    out.report.trace_path = Some("trace.csv".into());
    s.write_json("report.json", &out.report)?;
    Ok(s)
}

fn sweep_cmd(mut s: Session, ck: Option<&Path>) -> Result<Session> {
    let ck = load_checkpoint(ck)?;
    let mut specs = s.cfg.strategies.clone();
    if ck.is_some() && !specs.contains(&StrategySpec::Ddqn) {
        specs.push(StrategySpec::Ddqn);
    }
    let built = specs.iter().map(|sp| sp.build(ck.as_ref())).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn Strategy> = built.iter().map(|b| b.as_ref()).collect();
    let series = s.series()?;
    let market = s.test_market(&series)?;
    let sweep = gas_sweep(&refs, &market, &s.cfg.pool, &s.cfg.reward, &s.cfg.gas_levels)?;
    sweep.write_csv(s.create("gas_sweep.csv")?)?;
    let hash = s.hash.clone();
    s.write_json("break_even.json", &json!({ "config_hash": hash, "break_even": sweep.break_even }))?;
    Ok(s)
}

fn write_qvi(s: &mut Session, sol: &QviSolution) -> Result<()> {
    sol.write_values_csv(s.create("qvi_values.csv")?)?;
    sol.write_boundary_csv(s.create("qvi_boundary.csv")?)?;
    let (lower, upper) = boundary_deviation(sol, s.cfg.qvi.ou.mu);
    let summary = json!({
        "config_hash": s.hash,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "jump_nodes": sol.jump_count(),
        "boundary_at_mean": { "lower_dev": lower, "upper_dev": upper },
    });
    s.write_json("qvi_summary.json", &summary)
}

fn qvi_cmd(mut s: Session) -> Result<Session> {
    let problem = s.cfg.qvi.problem(&s.cfg.pool);
    match solve(&problem, &s.cfg.qvi.options()) {
        Ok(sol) => write_qvi(&mut s, &sol)?,
        Err(Error::NoConvergence(sol)) => {
            write_qvi(&mut s, &sol)?;
            s.finish()?;
            return Err(Error::NoConvergence(sol));
        }
        Err(e) => return Err(e),
    }
    Ok(s)
}

fn heatmap_cmd(mut s: Session, ck: Option<&Path>) -> Result<Session> {
    let ck = load_checkpoint(ck)?.ok_or_else(|| Error::Config("heatmap needs --checkpoint".into()))?;
    let policy = GreedyPolicy::from_checkpoint(&ck)?;
    let series = s.series()?;
    let market = s.test_market(&series)?;
    let h = s.cfg.heatmap;
    let grid = heatmap(
        &policy,
        &linspace(h.theta_min, h.theta_max, h.theta_points),
        &linspace(h.d_edge_min, h.d_edge_max, h.d_edge_points),
        HeatmapReference::from_market(&market, s.cfg.pool.width),
    )?;
    grid.write_csv(s.create("heatmap.csv")?)?;
    let hash = s.hash.clone();
    s.write_json(
        "heatmap_summary.json",
        &json!({ "config_hash": hash, "negative_fraction": grid.negative_fraction(), "reference": grid.reference }),
    )?;
    Ok(s)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn execute(command: &Command) -> Result<()> {
    configure_threads()?;
    let s = Session::open(command)?;
    let s = match command {
        Command::Ingest(_) => ingest(s)?,
        Command::Synth(_) => synth(s)?,
        Command::Estimate(_) => estimate(s)?,
        Command::Train(_) => train_cmd(s)?,
        Command::Backtest { ck, .. } => backtest_cmd(s, ck.checkpoint.as_deref())?,
        Command::SweepGas { ck, .. } => sweep_cmd(s, ck.checkpoint.as_deref())?,
        Command::Qvi(_) => qvi_cmd(s)?,
        Command::Heatmap { ck, .. } => heatmap_cmd(s, ck.checkpoint.as_deref())?,
    };
    s.finish()
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
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
