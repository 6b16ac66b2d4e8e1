//! Concentrated-liquidity position accounting.
//!
//! A position is a symmetric range `[c(1-w), c(1+w)]`. While the price sits in
//! range it earns `alpha * V_cex * fee_tier * (K * lambda) / L_pool` per second,
//! where `lambda = 1/sqrt(w)` is the concentration multiplier. Recentering costs
//! a swap fee on half the capital plus a fixed gas charge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Pool fee tier (fraction of volume).
    pub fee_tier: f64,
    /// Fixed gas charge per rebalance, quote units.
    pub gas_cost: f64,
    pub pool_tvl: f64,
    /// DEX volume as a fraction of CEX volume.
    pub dex_cex_ratio: f64,
    /// Half-width of the range as a fraction of the center.
    pub width: f64,
    /// Capital deployed, quote units.
    pub capital: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            fee_tier: 0.0005,
            gas_cost: 2.0,
            pool_tvl: 500_000.0,
            dex_cex_ratio: 0.10,
            width: 0.002,
            capital: 10_000.0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fee_tier > 0.0
            && self.fee_tier < 1.0
            && self.gas_cost >= 0.0
            && self.pool_tvl > 0.0
            && self.dex_cex_ratio > 0.0
            && self.dex_cex_ratio <= 1.0
            && self.width > 0.0
            && self.width < 1.0
            && self.capital > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pool config {self:?}")))
        }
    }

    pub fn with_gas(mut self, gas_cost: f64) -> Self {
        self.gas_cost = gas_cost;
        self
    }

    /// Fee per second for an in-range position of the configured width at a
    /// given CEX volume.
    pub fn in_range_fee_rate(&self, cex_volume: f64) -> f64 {
        fee_amount(self, self.capital, self.width, cex_volume)
    }
}

pub fn concentration(width: f64) -> f64 {
    1.0 / width.sqrt()
}

pub fn rebalance_cost(cfg: &PoolConfig, capital: f64) -> f64 {
    cfg.fee_tier * 0.5 * capital + cfg.gas_cost
}

fn fee_amount(cfg: &PoolConfig, capital: f64, width: f64, cex_volume: f64) -> f64 {
    cfg.dex_cex_ratio * cex_volume * cfg.fee_tier * (capital * concentration(width)) / cfg.pool_tvl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub center: f64,
    pub width: f64,
    pub capital: f64,
    pub accrued_fees: f64,
    pub accrued_gas: f64,
    pub rebalance_count: u64,
    pub active_seconds: u64,
    pub total_seconds: u64,
}

impl Position {
    /// A fresh position with no history and no charges.
    pub fn new(center: f64, width: f64, capital: f64) -> Self {
        Position {
            center,
            width,
            capital,
            accrued_fees: 0.0,
            accrued_gas: 0.0,
            rebalance_count: 0,
            active_seconds: 0,
            total_seconds: 0,
        }
    }

    /// Opens a position: counts as the first rebalance but only gas is
    /// charged, since no inventory has to be swapped on entry.
    pub fn place(center: f64, width: f64, cfg: &PoolConfig) -> Self {
        let mut pos = Position::new(center, width, cfg.capital);
        pos.accrued_gas = cfg.gas_cost;
        pos.rebalance_count = 1;
        pos
    }

    pub fn lower(&self) -> f64 {
        self.center * (1.0 - self.width)
    }

    pub fn upper(&self) -> f64 {
        self.center * (1.0 + self.width)
    }

    /// Boundaries are inclusive.
    pub fn in_range(&self, price: f64) -> bool {
        self.lower() <= price && price <= self.upper()
    }

    pub fn concentration(&self) -> f64 {
        concentration(self.width)
    }

    /// Accrues one second of fees at `price` and returns the amount earned.
    pub fn fee_step(&mut self, price: f64, cex_volume: f64, cfg: &PoolConfig) -> f64 {
        self.total_seconds += 1;
        if !self.in_range(price) {
            return 0.0;
        }
        self.active_seconds += 1;
        let fee = fee_amount(cfg, self.capital, self.width, cex_volume.max(0.0));
        self.accrued_fees += fee;
        fee
    }

    /// Moves the center to `price` and charges the rebalance cost. Returns
    /// the cost charged.
    pub fn recenter(&mut self, price: f64, cfg: &PoolConfig) -> f64 {
        let cost = rebalance_cost(cfg, self.capital);
        self.center = price;
        self.accrued_gas += cost;
        self.rebalance_count += 1;
        cost
    }

    pub fn net_roi(&self) -> f64 {
        (self.accrued_fees - self.accrued_gas) / self.capital
    }

    pub fn active_fraction(&self) -> f64 {
        self.active_seconds as f64 / self.total_seconds.max(1) as f64
    }
}

/// Virtual liquidity of a deposit over `[p_a, p_b]` at price `p`. Either side
/// of the deposit may be omitted; when both are given they must agree.
pub fn virtual_liquidity(dx: Option<f64>, dy: Option<f64>, p: f64, p_a: f64, p_b: f64) -> Result<f64> {
    if !(p_a < p && p < p_b) || !(p_a > 0.0) {
        return Err(Error::Domain(format!("price {p} not inside ({p_a}, {p_b})")));
    }
    let from_x = dx.map(|dx| dx / (1.0 / p.sqrt() - 1.0 / p_b.sqrt()));
    let from_y = dy.map(|dy| dy / (p.sqrt() - p_a.sqrt()));
    match (from_x, from_y) {
        (Some(lx), Some(ly)) => {
            if (lx - ly).abs() > 1e-6 * lx.abs().max(ly.abs()) {
                Err(Error::InconsistentDeposit { from_x: lx, from_y: ly })
            } else {
                Ok(0.5 * (lx + ly))
            }
        }
        (Some(l), None) | (None, Some(l)) => Ok(l),
        (None, None) => Err(Error::Domain("need dx or dy".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2() -> PoolConfig {
        PoolConfig::default()
    }

    #[test]
    fn range_boundaries_inclusive() {
        let pos = Position::new(100.0, 0.002, 10_000.0);
        assert!(pos.in_range(100.2));
        assert!(!pos.in_range(100.21));
        assert!(pos.in_range(99.8));
    }

    #[test]
    fn concentration_values() {
        assert!((concentration(0.002) - 22.36).abs() < 0.01);
        assert_eq!(concentration(0.01), 10.0);
        assert_eq!(concentration(0.25), 2.0);
    }

    #[test]
    fn fee_step_examples() {
        let cfg = table2();
        let mut pos = Position::new(100.0, 0.002, 10_000.0);
        assert_eq!(pos.fee_step(101.0, 1e5, &cfg), 0.0);
        assert_eq!(pos.fee_step(100.0, 0.0, &cfg), 0.0);
        let fee = pos.fee_step(100.0, 100_000.0, &cfg);
        let expected = 0.10 * 100_000.0 * 0.0005 * (10_000.0 / 0.002f64.sqrt()) / 500_000.0;
        assert!((fee - expected).abs() < 1e-12);
        assert!((fee - 2.236).abs() < 1e-3);
        assert_eq!(pos.active_seconds, 2);
        assert_eq!(pos.total_seconds, 3);
    }

    #[test]
    fn rebalance_costs() {
        assert_eq!(rebalance_cost(&table2(), 10_000.0), 4.5);
        let free = PoolConfig { fee_tier: 0.0, gas_cost: 0.0, ..table2() };
        assert_eq!(rebalance_cost(&free, 10_000.0), 0.0);
        assert_eq!(rebalance_cost(&table2().with_gas(10.0), 10_000.0), 12.5);
    }

    #[test]
    fn recenter_accounting() {
        let cfg = table2();
        let mut pos = Position::new(100.0, 0.002, 10_000.0);
        pos.recenter(98.0, &cfg);
        assert_eq!(pos.center, 98.0);
        assert_eq!(pos.rebalance_count, 1);
        assert_eq!(pos.accrued_gas, 4.5);
        pos.recenter(98.0, &cfg);
        assert_eq!(pos.rebalance_count, 2);
        assert_eq!(pos.accrued_gas, 9.0);
        assert_eq!(pos.width, 0.002);
        assert_eq!(pos.capital, 10_000.0);
    }

    #[test]
    fn placement_charges_gas_only() {
        let pos = Position::place(100.0, 0.002, &table2());
        assert_eq!(pos.rebalance_count, 1);
        assert_eq!(pos.accrued_gas, 2.0);
    }

    #[test]
    fn net_roi_examples() {
        let mut pos = Position::new(100.0, 0.002, 10_000.0);
        pos.accrued_fees = 85.08;
        pos.accrued_gas = 13.5;
        assert!((pos.net_roi() * 100.0 - 0.7158).abs() < 1e-9);
        pos.accrued_fees = 34.87;
        pos.accrued_gas = 4.5;
        assert!((pos.net_roi() * 100.0 - 0.3037).abs() < 1e-9);
        assert_eq!(Position::new(1.0, 0.1, 1.0).net_roi(), 0.0);
    }

    #[test]
    fn virtual_liquidity_eq1() {
        let l = virtual_liquidity(None, Some(1.0), 1.0, 0.998, 1.002).unwrap();
        assert!((l - 1.0 / (1.0 - 0.998f64.sqrt())).abs() < 1e-9);
        assert!((l - 999.5).abs() < 0.01);

        // consistent two-sided deposit
        let (p, pa, pb) = (2000.0, 1900.0, 2100.0);
        let liq = 1234.5;
        let dx = liq * (1.0 / f64::sqrt(p) - 1.0 / f64::sqrt(pb));
        let dy = liq * (f64::sqrt(p) - f64::sqrt(pa));
        let lx = virtual_liquidity(Some(dx), None, p, pa, pb).unwrap();
        let ly = virtual_liquidity(None, Some(dy), p, pa, pb).unwrap();
        assert!((lx - ly).abs() / ly < 1e-6);
        assert!(virtual_liquidity(Some(dx), Some(dy), p, pa, pb).is_ok());
        assert!(matches!(
            virtual_liquidity(Some(dx * 2.0), Some(dy), p, pa, pb),
            Err(Error::InconsistentDeposit { .. })
        ));
        assert!(virtual_liquidity(Some(dx), None, 2200.0, pa, pb).is_err());
    }

    #[test]
    fn liquidity_limit_near_upper_bound() {
        let (pa, pb, dy) = (0.9f64, 1.1f64, 3.0);
        let limit = dy / (pb.sqrt() - f64::sqrt(pa));
        let l = virtual_liquidity(None, Some(dy), pb - 1e-12, pa, pb).unwrap();
        assert!((l - limit).abs() / limit < 1e-9);
    }
}
