//! Second-by-second strategy replay, performance metrics, gas-cost sweeps and
//! the learned policy's decision heatmap.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::GreedyPolicy;
use crate::ammcore::{concentration, PoolConfig, Position};
use crate::envsim::{AgentState, MarketFeatures, RewardParams, TraceRow, HOLD, RECENTER};
use crate::error::{Error, Result};
use crate::strategies::{Context, Decision, Strategy};

pub const GAS_LEVELS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub active_frac: f64,
    /// Concentration multiplier of the final range.
    pub lambda: f64,
    pub rebalances: u64,
    pub fees: f64,
    pub gas: f64,
    pub net_roi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: String,
    pub config_hash: String,
    pub metrics: Metrics,
    pub trace_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun {
    pub report: BacktestReport,
    pub trace: Vec<TraceRow>,
    pub decisions: Vec<Decision>,
    pub position: Position,
}

/// Replays `strategy` over every bar: decide on the bar's close, apply the
/// decision, then accrue the bar's fee. The opening position is placed at
/// bar 0 before its decision.
pub fn run(strategy: &dyn Strategy, market: &MarketFeatures, pool: &PoolConfig, reward: &RewardParams) -> Result<BacktestRun> {
    if market.is_empty() {
        return Err(Error::EmptyData);
    }
    pool.validate()?;
    let (center, width) = strategy.initial_range(&market.closes, pool);
    let mut pos = Position::place(center, width, pool);
    let mut pending = pos.accrued_gas;
    let mut trace = Vec::with_capacity(market.len());
    let mut decisions = Vec::with_capacity(market.len());

    for k in 0..market.len() {
        let price = market.closes[k];
        let est = &market.estimates[k];
        let ctx = Context {
            index: k,
            price,
            history: &market.closes[..=k],
            position: &pos,
            estimate: est,
            recent_vol: market.recent_vol[k],
        };
        let decision = strategy.decide(&ctx)?;
        let mut cost = std::mem::take(&mut pending);
        match decision {
            Decision::Hold => {}
            Decision::Recenter => cost += pos.recenter(price, pool),
            Decision::RecenterAt(target) => cost += pos.recenter(target, pool),
            Decision::SetRange { center, width } => {
                cost += pos.recenter(center, pool);
                pos.width = width;
            }
        }
        let fee = pos.fee_step(price, market.volumes[k], pool);
        let in_range = pos.in_range(price);
        trace.push(TraceRow {
            t: market.t[k],
            price,
            center: pos.center,
            action: if decision.is_hold() { HOLD } else { RECENTER },
            fee,
            gas: cost,
            reward: reward.reward(fee, cost, pos.capital, in_range),
            theta: if est.valid { est.theta } else { 0.0 },
            in_range: in_range as u8,
        });
        decisions.push(decision);
    }

    let metrics = Metrics {
        active_frac: pos.active_fraction(),
        lambda: concentration(pos.width),
        rebalances: pos.rebalance_count,
        fees: pos.accrued_fees,
        gas: pos.accrued_gas,
        net_roi: pos.net_roi(),
    };
    let report = BacktestReport { strategy: strategy.name().to_string(), config_hash: String::new(), metrics, trace_path: None };
    Ok(BacktestRun { report, trace, decisions, position: pos })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasRow<'a> {
    pub gas: f64,
    pub strategy: &'a str,
    pub net_roi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub strategy: String,
    pub gas: Option<f64>,
    /// True when no two levels bracket the zero crossing and the value comes
    /// from the affine fit of the two nearest levels.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasSweep {
    pub levels: Vec<f64>,
    pub strategies: Vec<String>,
    /// `net_roi[s][g]` for strategy `s` at level `g`.
    pub net_roi: Vec<Vec<f64>>,
    pub rebalances: Vec<Vec<u64>>,
    pub break_even: Vec<BreakEven>,
}

impl GasSweep {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (s, name) in self.strategies.iter().enumerate() {
            for (g, &gas) in self.levels.iter().enumerate() {
                wtr.serialize(GasRow { gas, strategy: name, net_roi: self.net_roi[s][g] })?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn break_even_for(&self, strategy: &str) -> Option<&BreakEven> {
        self.break_even.iter().find(|b| b.strategy == strategy)
    }
}

/// Gas level at which a series of net ROIs crosses zero: linear interpolation
/// between the first bracketing pair, otherwise the affine extension of the
/// two levels nearest the crossing.
pub fn break_even_gas(levels: &[f64], roi: &[f64]) -> (Option<f64>, bool) {
    let interp = |a: usize, b: usize| {
        let (g0, g1, r0, r1) = (levels[a], levels[b], roi[a], roi[b]);
        if r1 == r0 {
            None
        } else {
            Some(g0 + (g1 - g0) * r0 / (r0 - r1))
        }
    };
    if let Some(k) = roi.iter().position(|&r| r == 0.0) {
        return (Some(levels[k]), false);
    }
    for k in 0..roi.len().saturating_sub(1) {
        if (roi[k] > 0.0) != (roi[k + 1] > 0.0) {
            return (interp(k, k + 1), false);
        }
    }
    if roi.len() < 2 {
        return (None, false);
    }
    let n = roi.len();
    let (a, b) = if roi[0] > 0.0 { (n - 2, n - 1) } else { (0, 1) };
    (interp(a, b), true)
}

/// One backtest per (strategy, gas level) with everything else fixed.
pub fn gas_sweep(
    strategies: &[&dyn Strategy],
    market: &MarketFeatures,
    pool: &PoolConfig,
    reward: &RewardParams,
    levels: &[f64],
) -> Result<GasSweep> {
    if levels.is_empty() || levels.iter().any(|g| !(*g > 0.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("gas levels must be positive and increasing".into()));
    }
    let cells: Vec<(usize, usize)> = (0..strategies.len()).flat_map(|s| (0..levels.len()).map(move |g| (s, g))).collect();
    let results = cells
        .par_iter()
        .map(|&(s, g)| run(strategies[s], market, &pool.with_gas(levels[g]), reward).map(|r| r.report.metrics))
        .collect::<Result<Vec<_>>>()?;
    let mut net_roi = vec![vec![0.0; levels.len()]; strategies.len()];
    let mut rebalances = vec![vec![0; levels.len()]; strategies.len()];
    for (&(s, g), m) in cells.iter().zip(results) {
        net_roi[s][g] = m.net_roi;
        rebalances[s][g] = m.rebalances;
    }
    let names: Vec<String> = strategies.iter().map(|s| s.name().to_string()).collect();
    let break_even = names
        .iter()
        .zip(&net_roi)
        .map(|(name, roi)| {
            let (gas, extrapolated) = break_even_gas(levels, roi);
            BreakEven { strategy: name.clone(), gas, extrapolated }
        })
        .collect();
    Ok(GasSweep { levels: levels.to_vec(), strategies: names, net_roi, rebalances, break_even })
}

/// Values of the six state features held fixed across the heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReference {
    pub width: f64,
    pub sigma_norm: f64,
    pub recent_vol: f64,
    pub active_frac: f64,
}

impl HeatmapReference {
    /// Medians of the run's `sigma / S` (valid estimates only) and recent
    /// volatility, with `active_frac = 0.5`.
    pub fn from_market(market: &MarketFeatures, width: f64) -> Self {
        let sigma: Vec<f64> = market
            .closes
            .iter()
            .zip(&market.estimates)
            .filter(|(_, e)| e.valid)
            .map(|(s, e)| (e.sigma / s).clamp(0.0, 0.1))
            .collect();
        HeatmapReference {
            width,
            sigma_norm: median(&sigma).unwrap_or(0.0),
            recent_vol: median(&market.recent_vol).unwrap_or(0.0),
            active_frac: 0.5,
        }
    }

    pub fn state(&self, theta: f64, d_edge: f64) -> AgentState {
        AgentState {
            delta_p: d_edge * self.width,
            d_edge,
            theta,
            delta_mu: 0.0,
            sigma_norm: self.sigma_norm,
            active_frac: self.active_frac,
            recent_vol: self.recent_vol,
            in_range_flag: if d_edge.abs() < 1.0 { 1.0 } else { 0.0 },
        }
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub thetas: Vec<f64>,
    pub d_edges: Vec<f64>,
    /// `q_diff[i][j] = Q(recenter) - Q(hold)` at `(thetas[i], d_edges[j])`.
    pub q_diff: Vec<Vec<f64>>,
    pub reference: HeatmapReference,
}

impl HeatmapGrid {
    pub fn negative_fraction(&self) -> f64 {
        let all: Vec<f64> = self.q_diff.iter().flatten().copied().collect();
        all.iter().filter(|v| **v < 0.0).count() as f64 / all.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["theta", "d_edge", "q_diff"])?;
        for (i, th) in self.thetas.iter().enumerate() {
            for (j, d) in self.d_edges.iter().enumerate() {
                wtr.write_record([th.to_string(), d.to_string(), self.q_diff[i][j].to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

pub fn heatmap(policy: &GreedyPolicy, thetas: &[f64], d_edges: &[f64], reference: HeatmapReference) -> Result<HeatmapGrid> {
    let monotone = |xs: &[f64]| !xs.is_empty() && xs.windows(2).all(|w| w[1] > w[0]);
    if !monotone(thetas) || !monotone(d_edges) {
        return Err(Error::Config("heatmap axes must be non-empty and increasing".into()));
    }
    let q_diff = thetas
        .iter()
        .map(|&th| {
            d_edges
                .iter()
                .map(|&d| {
                    let q = policy.q_values(&reference.state(th, d).to_array())?;
                    Ok(q[RECENTER] - q[HOLD])
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapGrid { thetas: thetas.to_vec(), d_edges: d_edges.to_vec(), q_diff, reference })
}
