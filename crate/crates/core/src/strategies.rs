//! Rebalancing strategies behind a single decision interface.
//!
//! - `merlin`: hindsight range spanning the whole test path, never touched.
//! - `bedivere`: fixed range at the first price, never touched.
//! - `lancelot`: recenter whenever the price leaves the range.
//! - `galahad`: when out of range, recenter at a mean-reversion forecast.
//! - `ddqn`: greedy action of a trained Q-network.

use serde::{Deserialize, Serialize};

use crate::agent::GreedyPolicy;
use crate::ammcore::{PoolConfig, Position};
use crate::envsim::{build_state, RECENTER};
use crate::error::{Error, Result};
use crate::neural::Checkpoint;
use crate::regime::RegimeEstimate;

/// Smallest width used for a hindsight range on a flat path.
pub const MIN_WIDTH: f64 = 1e-4;
pub const DEFAULT_HORIZON: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Hold,
    /// Recenter at the current price.
    Recenter,
    RecenterAt(f64),
    SetRange { center: f64, width: f64 },
}

impl Decision {
    pub fn is_hold(&self) -> bool {
        matches!(self, Decision::Hold)
    }
}

/// Everything a strategy may look at when deciding at bar `index`.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub index: usize,
    pub price: f64,
    /// Closes up to and including `index`.
    pub history: &'a [f64],
    pub position: &'a Position,
    pub estimate: &'a RegimeEstimate,
    pub recent_vol: f64,
}

pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;

    /// Center and width of the opening position. Only oracle strategies may
    /// look past the first price.
    fn initial_range(&self, closes: &[f64], pool: &PoolConfig) -> (f64, f64) {
        (closes[0], pool.width)
    }

    fn decide(&self, ctx: &Context) -> Result<Decision>;

    fn is_oracle(&self) -> bool {
        false
    }
}

/// Range `[S_min, S_max]` as a center and relative half-width. The width is
/// nudged up so rounding never leaves an extreme outside the range.
pub fn merlin_init(closes: &[f64]) -> Result<(f64, f64)> {
    if closes.is_empty() {
        return Err(Error::EmptyData);
    }
    let lo = closes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = closes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = 0.5 * (lo + hi);
    let mut w = ((hi - lo) / (2.0 * c)).max(MIN_WIDTH);
    while c * (1.0 - w) > lo || c * (1.0 + w) < hi {
        w = w.next_up();
    }
    Ok((c, w))
}

pub struct Merlin;

impl Strategy for Merlin {
    fn name(&self) -> &str {
        "merlin"
    }

    fn initial_range(&self, closes: &[f64], _pool: &PoolConfig) -> (f64, f64) {
        merlin_init(closes).expect("backtest rejects empty series")
    }

    fn decide(&self, _ctx: &Context) -> Result<Decision> {
        Ok(Decision::Hold)
    }

    fn is_oracle(&self) -> bool {
        true
    }
}

pub struct Bedivere;

impl Strategy for Bedivere {
    fn name(&self) -> &str {
        "bedivere"
    }

    fn decide(&self, _ctx: &Context) -> Result<Decision> {
        Ok(Decision::Hold)
    }
}

pub struct Lancelot;

impl Strategy for Lancelot {
    fn name(&self) -> &str {
        "lancelot"
    }

    fn decide(&self, ctx: &Context) -> Result<Decision> {
        Ok(if ctx.position.in_range(ctx.price) { Decision::Hold } else { Decision::Recenter })
    }
}

/// Deterministic part of the OU transition, `mu + (s - mu) * exp(-theta * h)`,
/// written so that `theta = 0` returns `s` exactly.
pub fn ou_forecast(s: f64, theta: f64, mu: f64, horizon: f64) -> f64 {
    s - (mu - s) * (-theta * horizon).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalahadParams {
    /// Forecast horizon in seconds.
    pub horizon: f64,
    /// Replaces the estimated theta; the estimate then counts as valid.
    pub theta_override: Option<f64>,
}

impl Default for GalahadParams {
    fn default() -> Self {
        GalahadParams { horizon: DEFAULT_HORIZON, theta_override: None }
    }
}

/// Forecast-driven recentering that ignores costs: once the price is out of
/// range, move to the forecast unless the forecast is back inside the range.
pub struct Galahad {
    pub params: GalahadParams,
}

impl Galahad {
    pub fn forecast(&self, price: f64, est: &RegimeEstimate) -> Option<f64> {
        match self.params.theta_override {
            Some(theta) => {
                let mu = if est.valid { est.mu } else { price };
                Some(ou_forecast(price, theta, mu, self.params.horizon))
            }
            None if est.valid => Some(ou_forecast(price, est.theta, est.mu, self.params.horizon)),
            None => None,
        }
    }
}

impl Strategy for Galahad {
    fn name(&self) -> &str {
        "galahad"
    }

    fn decide(&self, ctx: &Context) -> Result<Decision> {
        if ctx.position.in_range(ctx.price) {
            return Ok(Decision::Hold);
        }
        match self.forecast(ctx.price, ctx.estimate) {
            Some(target) if !ctx.position.in_range(target) => Ok(Decision::RecenterAt(target)),
            _ => Ok(Decision::Hold),
        }
    }
}

pub struct LearnedPolicy {
    pub policy: GreedyPolicy,
}

impl LearnedPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(LearnedPolicy { policy: GreedyPolicy::from_checkpoint(ck)? })
    }
}

impl Strategy for LearnedPolicy {
    fn name(&self) -> &str {
        "ddqn"
    }

    fn decide(&self, ctx: &Context) -> Result<Decision> {
        let state = build_state(ctx.price, ctx.position, ctx.estimate, ctx.recent_vol);
        Ok(if self.policy.act(&state.to_array())? == RECENTER { Decision::Recenter } else { Decision::Hold })
    }
}

/// Config form of a strategy: `{"name": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Merlin,
    Bedivere,
    Lancelot,
    Galahad(#[serde(default)] GalahadParams),
    #[serde(alias = "rammstein")]
    Ddqn,
}

impl StrategySpec {
    pub fn parse_name(name: &str) -> Result<Self> {
        Ok(match name {
            "merlin" => StrategySpec::Merlin,
            "bedivere" => StrategySpec::Bedivere,
            "lancelot" => StrategySpec::Lancelot,
            "galahad" => StrategySpec::Galahad(GalahadParams::default()),
            "ddqn" | "rammstein" => StrategySpec::Ddqn,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }

    pub fn needs_checkpoint(&self) -> bool {
        matches!(self, StrategySpec::Ddqn)
    }

    pub fn build(&self, checkpoint: Option<&Checkpoint>) -> Result<Box<dyn Strategy>> {
        Ok(match self {
            StrategySpec::Merlin => Box::new(Merlin),
            StrategySpec::Bedivere => Box::new(Bedivere),
            StrategySpec::Lancelot => Box::new(Lancelot),
            StrategySpec::Galahad(p) => Box::new(Galahad { params: *p }),
            StrategySpec::Ddqn => {
                let ck = checkpoint.ok_or_else(|| Error::Config("ddqn strategy needs a checkpoint".into()))?;
                Box::new(LearnedPolicy::from_checkpoint(ck)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(price: f64, pos: &'a Position, est: &'a RegimeEstimate) -> Context<'a> {
        Context { index: 0, price, history: &[], position: pos, estimate: est, recent_vol: 0.0 }
    }

    #[test]
    fn merlin_ranges() {
        let (c, w) = merlin_init(&[2108.0, 2500.0, 3067.0]).unwrap();
        assert_eq!(c, 2587.5);
        assert!((w - 0.1853).abs() < 1e-4);
        assert!((1.0 / w.sqrt() - 2.32).abs() < 0.01);
        let (c, w) = merlin_init(&[100.0, 102.0]).unwrap();
        assert_eq!(c, 101.0);
        assert!((w - 1.0 / 101.0).abs() < 1e-12);
        assert_eq!(merlin_init(&[5.0; 4]).unwrap(), (5.0, MIN_WIDTH));
        assert!(merlin_init(&[]).is_err());
    }

    #[test]
    fn merlin_covers_extremes() {
        let closes = [0.1 + 0.2, 0.7, 0.30000000000000004, 1.9];
        let (c, w) = merlin_init(&closes).unwrap();
        let pos = Position::new(c, w, 1.0);
        assert!(closes.iter().all(|&p| pos.in_range(p)));
    }

    #[test]
    fn bedivere_always_holds() {
        let pos = Position::new(100.0, 0.002, 1e4);
        let est = RegimeEstimate::fallback(100.0, 1);
        for p in [90.0, 100.0, 130.0] {
            assert_eq!(Bedivere.decide(&ctx(p, &pos, &est)).unwrap(), Decision::Hold);
        }
    }

    #[test]
    fn lancelot_rule() {
        let pos = Position::new(100.0, 0.002, 1e4);
        let est = RegimeEstimate::fallback(100.0, 1);
        assert_eq!(Lancelot.decide(&ctx(100.1, &pos, &est)).unwrap(), Decision::Hold);
        assert_eq!(Lancelot.decide(&ctx(100.3, &pos, &est)).unwrap(), Decision::Recenter);
    }

    #[test]
    fn forecast_values() {
        assert!((ou_forecast(104.0, 0.01, 100.0, 60.0) - (100.0 + 4.0 * (-0.6f64).exp())).abs() < 1e-12);
        assert!((ou_forecast(104.0, 0.01, 100.0, 60.0) - 102.195).abs() < 1e-3);
        assert_eq!(ou_forecast(104.0, 0.0, 100.0, 60.0), 104.0);
        assert_eq!(ou_forecast(104.0, f64::INFINITY, 100.0, 60.0), 100.0);
    }

    #[test]
    fn galahad_rules() {
        let pos = Position::new(100.0, 0.002, 1e4);
        let g = Galahad { params: GalahadParams::default() };
        let invalid = RegimeEstimate::fallback(104.0, 10);
        assert_eq!(g.decide(&ctx(104.0, &pos, &invalid)).unwrap(), Decision::Hold);
        let est = RegimeEstimate { theta: 0.01, mu: 100.0, sigma: 0.1, window_len: 1800, valid: true };
        match g.decide(&ctx(104.0, &pos, &est)).unwrap() {
            Decision::RecenterAt(p) => assert!((p - 102.195).abs() < 1e-3),
            d => panic!("{d:?}"),
        }
        // forecast lands back in range
        let fast = RegimeEstimate { theta: 1.0, ..est };
        assert_eq!(g.decide(&ctx(104.0, &pos, &fast)).unwrap(), Decision::Hold);
        let forced = Galahad { params: GalahadParams { theta_override: Some(0.0), ..GalahadParams::default() } };
        assert_eq!(forced.decide(&ctx(104.0, &pos, &invalid)).unwrap(), Decision::RecenterAt(104.0));
    }

    #[test]
    fn spec_parsing() {
        let s: StrategySpec = serde_json::from_str(r#"{"name":"galahad","params":{"horizon":30.0}}"#).unwrap();
        assert_eq!(s, StrategySpec::Galahad(GalahadParams { horizon: 30.0, theta_override: None }));
        let s: StrategySpec = serde_json::from_str(r#"{"name":"rammstein"}"#).unwrap();
        assert_eq!(s, StrategySpec::Ddqn);
        let s: StrategySpec = serde_json::from_str(r#"{"name":"lancelot"}"#).unwrap();
        assert_eq!(s, StrategySpec::Lancelot);
        assert!(serde_json::from_str::<StrategySpec>(r#"{"name":"percival"}"#).is_err());
        assert!(StrategySpec::Ddqn.build(None).is_err());
        assert_eq!(StrategySpec::parse_name("merlin").unwrap().build(None).unwrap().name(), "merlin");
    }
}
