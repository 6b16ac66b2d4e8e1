//! Reinforcement-learning environment over a bar series.
//!
//! Each step: optionally recenter at the current close, advance one bar,
//! accrue that bar's fee, and reward the net PnL scaled by capital plus a
//! small bonus for ending the step in range.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ammcore::{PoolConfig, Position};
use crate::error::{Error, Result};
use crate::marketdata::BarSeries;
use crate::regime::{self, RegimeEstimate};

pub const STATE_DIM: usize = 8;
pub const VOL_WINDOW: usize = 300;
const SIGMA_NORM_CAP: f64 = 0.1;
const RECENT_VOL_CAP: f64 = 0.1;
/// `mu` is a ratio of regression coefficients and diverges as theta goes to 0.
const DELTA_MU_CAP: f64 = 0.1;

pub const HOLD: usize = 0;
pub const RECENTER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub delta_p: f64,
    pub d_edge: f64,
    pub theta: f64,
    pub delta_mu: f64,
    pub sigma_norm: f64,
    pub active_frac: f64,
    pub recent_vol: f64,
    pub in_range_flag: f64,
}

impl AgentState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.delta_p,
            self.d_edge,
            self.theta,
            self.delta_mu,
            self.sigma_norm,
            self.active_frac,
            self.recent_vol,
            self.in_range_flag,
        ]
    }

    pub fn is_well_formed(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && (-1.0..=1.0).contains(&self.d_edge)
            && (0.0..=1.0).contains(&self.theta)
            && (-DELTA_MU_CAP..=DELTA_MU_CAP).contains(&self.delta_mu)
            && (0.0..=SIGMA_NORM_CAP).contains(&self.sigma_norm)
            && (0.0..=1.0).contains(&self.active_frac)
            && (0.0..=RECENT_VOL_CAP).contains(&self.recent_vol)
            && (self.in_range_flag == 0.0 || self.in_range_flag == 1.0)
    }
}

/// Observation for price `s` given the position, the regime estimate and the
/// precomputed recent volatility.
pub fn build_state(s: f64, pos: &Position, est: &RegimeEstimate, recent_vol: f64) -> AgentState {
    let c = pos.center;
    let (theta, delta_mu, sigma_norm) = if est.valid {
        (est.theta.clamp(0.0, 1.0), ((est.mu - s) / s).clamp(-DELTA_MU_CAP, DELTA_MU_CAP), (est.sigma / s).clamp(0.0, SIGMA_NORM_CAP))
    } else {
        (0.0, 0.0, 0.0)
    };
    AgentState {
        delta_p: s / c - 1.0,
        d_edge: ((s - c) / (c * pos.width)).clamp(-1.0, 1.0),
        theta,
        delta_mu,
        sigma_norm,
        active_frac: pos.active_fraction(),
        recent_vol: if recent_vol.is_finite() { recent_vol.clamp(0.0, RECENT_VOL_CAP) } else { 0.0 },
        in_range_flag: if pos.in_range(s) { 1.0 } else { 0.0 },
    }
}

/// Standard deviation of the last [`VOL_WINDOW`] one-second log returns
/// ending at each index, clipped to `[0, 0.1]`. Zero until two returns exist.
pub fn recent_volatility(closes: &[f64]) -> Vec<f64> {
    let log_ret: Vec<f64> = closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let mut out = Vec::with_capacity(closes.len());
    out.push(0.0);
    for i in 1..closes.len() {
        let lo = i.saturating_sub(VOL_WINDOW);
        let window = &log_ret[lo..i];
        out.push(sample_sd(window).min(RECENT_VOL_CAP));
    }
    out
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Per-bar inputs shared by every environment and backtest over one series.
#[derive(Debug, Clone)]
pub struct MarketFeatures {
    pub t: Vec<i64>,
    pub closes: Vec<f64>,
    pub volumes: Vec<f64>,
    pub estimates: Vec<RegimeEstimate>,
    pub recent_vol: Vec<f64>,
}

impl MarketFeatures {
    pub fn new(series: &BarSeries, regime_window: usize) -> Result<Self> {
        let closes = series.closes();
        Ok(MarketFeatures {
            t: series.bars().iter().map(|b| b.t).collect(),
            estimates: regime::rolling_estimates(&closes, regime_window, 1.0)?,
            recent_vol: recent_volatility(&closes),
            volumes: series.volumes(),
            closes,
        })
    }

    pub fn len(&self) -> usize {
        self.closes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closes.is_empty()
    }

    /// Bars `range` with their features as computed on the whole series, so
    /// rolling estimates keep the history before `range.start`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::Domain(format!("slice {range:?} outside {} bars", self.len())));
        }
        Ok(MarketFeatures {
            t: self.t[range.clone()].to_vec(),
            closes: self.closes[range.clone()].to_vec(),
            volumes: self.volumes[range.clone()].to_vec(),
            estimates: self.estimates[range.clone()].to_vec(),
            recent_vol: self.recent_vol[range].to_vec(),
        })
    }

    pub fn state_at(&self, i: usize, pos: &Position) -> AgentState {
        build_state(self.closes[i], pos, &self.estimates[i], self.recent_vol[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub reward_scale: f64,
    pub active_bonus: f64,
}

impl Default for RewardParams {
    // A scale of 100 leaves the hold-vs-recenter gap too small against
    // Adam's fixed step size on synthetic volume.
    fn default() -> Self {
        RewardParams { reward_scale: 1000.0, active_bonus: 1e-4 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if self.reward_scale > 0.0 && self.active_bonus >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid reward params {self:?}")))
        }
    }

    pub fn reward(&self, fees: f64, gas: f64, capital: f64, in_range_after: bool) -> f64 {
        let bonus = if in_range_after { self.active_bonus } else { 0.0 };
        self.reward_scale * (fees - gas) / capital + bonus
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: [f64; STATE_DIM],
    pub action: usize,
    pub reward: f64,
    pub next_state: [f64; STATE_DIM],
    pub terminal: bool,
}

/// One row of an episode or backtest trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: i64,
    pub price: f64,
    pub center: f64,
    pub action: usize,
    pub fee: f64,
    pub gas: f64,
    pub reward: f64,
    pub theta: f64,
    pub in_range: u8,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub pool: PoolConfig,
    pub reward: RewardParams,
    pub episode_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Price at which the decision was taken.
    pub decision_price: f64,
    /// Center before the action.
    pub prior_center: f64,
    pub fee: f64,
    pub cost: f64,
    pub trace: TraceRow,
}

pub struct Environment {
    market: Arc<MarketFeatures>,
    cfg: EnvConfig,
    pos: Position,
    cursor: usize,
    steps: usize,
    /// Placement charge not yet reflected in a reward.
    pending_cost: f64,
    done: bool,
    started: bool,
}

impl Environment {
    pub fn new(market: Arc<MarketFeatures>, cfg: EnvConfig) -> Result<Self> {
        cfg.pool.validate()?;
        cfg.reward.validate()?;
        if cfg.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        if market.len() < cfg.episode_length + 1 {
            return Err(Error::InsufficientData(format!(
                "{} bars cannot hold an episode of {} steps",
                market.len(),
                cfg.episode_length
            )));
        }
        let p0 = market.closes[0];
        Ok(Environment {
            pos: Position::new(p0, cfg.pool.width, cfg.pool.capital),
            market,
            cfg,
            cursor: 0,
            steps: 0,
            pending_cost: 0.0,
            done: true,
            started: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn market(&self) -> &MarketFeatures {
        &self.market
    }

    pub fn position(&self) -> &Position {
        &self.pos
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Latest start index that leaves room for a full episode.
    pub fn max_start(&self) -> usize {
        self.market.len() - 1 - self.cfg.episode_length
    }

    /// Random starts skip the regime warmup when the data allows it.
    pub fn sample_start<R: Rng>(&self, rng: &mut R, warmup: usize) -> usize {
        let hi = self.max_start();
        let lo = warmup.min(hi);
        rng.random_range(lo..=hi)
    }

    /// Places a fresh position at `close(start)` and returns the first state.
    pub fn reset(&mut self, start: usize) -> Result<AgentState> {
        if start > self.max_start() {
            return Err(Error::Domain(format!(
                "start {start} + episode length {} exceeds data ({} bars)",
                self.cfg.episode_length,
                self.market.len()
            )));
        }
        self.cursor = start;
        self.steps = 0;
        self.pos = Position::place(self.market.closes[start], self.cfg.pool.width, &self.cfg.pool);
        self.pending_cost = self.pos.accrued_gas;
        self.done = false;
        self.started = true;
        Ok(self.state())
    }

    pub fn state(&self) -> AgentState {
        self.market.state_at(self.cursor, &self.pos)
    }

    pub fn step(&mut self, action: usize) -> Result<(Transition, StepInfo)> {
        if self.done || !self.started {
            return Err(Error::EpisodeFinished);
        }
        if action > RECENTER {
            return Err(Error::Domain(format!("action must be 0 or 1, got {action}")));
        }
        let state = self.state();
        let decision_price = self.market.closes[self.cursor];
        let prior_center = self.pos.center;
        let mut cost = std::mem::take(&mut self.pending_cost);
        if action == RECENTER {
            cost += self.pos.recenter(decision_price, &self.cfg.pool);
        }

        self.cursor += 1;
        self.steps += 1;
        let i = self.cursor;
        let price = self.market.closes[i];
        let fee = self.pos.fee_step(price, self.market.volumes[i], &self.cfg.pool);
        let in_range = self.pos.in_range(price);
        let reward = self.cfg.reward.reward(fee, cost, self.pos.capital, in_range);
        let terminal = self.steps >= self.cfg.episode_length || i + 1 >= self.market.len();
        self.done = terminal;
        let next_state = self.state();

        let trace = TraceRow {
            t: self.market.t[i],
            price,
            center: self.pos.center,
            action,
            fee,
            gas: cost,
            reward,
            theta: next_state.theta,
            in_range: in_range as u8,
        };
        let transition =
            Transition { state: state.to_array(), action, reward, next_state: next_state.to_array(), terminal };
        Ok((transition, StepInfo { decision_price, prior_center, fee, cost, trace }))
    }
}
