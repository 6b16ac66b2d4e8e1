//! Concentrated-liquidity rebalancing laboratory.
//!
//! Market data and synthetic OU paths feed a rolling regime estimator, a
//! position simulator and a reinforcement-learning environment. On top sit a
//! Double-DQN agent, rule-based baselines, a backtester, and a
//! finite-difference impulse-control solver used as an independent oracle for
//! when rebalancing pays.

pub mod agent;
pub mod ammcore;
pub mod backtest;
pub mod config;
pub mod envsim;
pub mod error;
pub mod marketdata;
pub mod neural;
pub mod qvi;
pub mod regime;
pub mod strategies;
pub mod synthpath;

pub use error::{Error, Result};
