//! Synthetic Ornstein-Uhlenbeck price paths and piecewise-regime bar series.
//!
//! Paths use the exact transition law of the OU process, so a path sampled at
//! any `dt` has no discretization bias:
//!
//! ```text
//! S[k+1] = mu + (S[k] - mu) * exp(-theta*dt) + eta[k]
//! eta[k] ~ N(0, sigma^2 * (1 - exp(-2*theta*dt)) / (2*theta))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{Bar, BarSeries};

/// Below this value of `theta * dt` the transition variance uses the
/// Brownian limit `sigma^2 * dt`.
const SMALL_THETA_DT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuParams {
    /// Mean-reversion speed, 1/s.
    pub theta: f64,
    /// Long-run mean, price units.
    pub mu: f64,
    /// Diffusion, price units per sqrt(s).
    pub sigma: f64,
}

impl OuParams {
    pub fn new(theta: f64, mu: f64, sigma: f64) -> Result<Self> {
        let p = OuParams { theta, mu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0 && self.mu > 0.0 && self.sigma >= 0.0) || !self.theta.is_finite() {
            return Err(Error::Domain(format!("invalid OU parameters {self:?}")));
        }
        Ok(())
    }

    /// Conditional mean decay factor `exp(-theta*dt)`.
    pub fn decay(&self, dt: f64) -> f64 {
        (-self.theta * dt).exp()
    }

    /// Variance of one exact transition over `dt`.
    pub fn step_variance(&self, dt: f64) -> f64 {
        let k = self.theta * dt;
        if k < SMALL_THETA_DT {
            self.sigma * self.sigma * dt
        } else {
            self.sigma * self.sigma * (-(-2.0 * k).exp_m1()) / (2.0 * self.theta)
        }
    }

    /// Stationary standard deviation `sigma / sqrt(2 theta)`; infinite when theta = 0.
    pub fn stationary_sd(&self) -> f64 {
        if self.theta > 0.0 {
            self.sigma / (2.0 * self.theta).sqrt()
        } else {
            f64::INFINITY
        }
    }

    pub fn conditional_mean(&self, s: f64, dt: f64) -> f64 {
        self.mu + (s - self.mu) * self.decay(dt)
    }
}

fn ou_steps(params: &OuParams, s0: f64, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let decay = params.decay(dt);
    let sd = params.step_variance(dt).sqrt();
    let mut path = Vec::with_capacity(n + 1);
    let mut s = s0;
    path.push(s);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        s = params.mu + (s - params.mu) * decay + sd * z;
        path.push(s);
    }
    path
}

/// Samples `n` exact OU transitions starting from `s0`. The returned path has
/// `n + 1` entries, `path[0] == s0`.
pub fn simulate_ou(params: &OuParams, s0: f64, n: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    if n == 0 || !(dt > 0.0) {
        return Err(Error::Domain(format!("need n >= 1 and dt > 0, got n={n}, dt={dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ou_steps(params, s0, n, dt, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolumeModel {
    /// Quote notional traded per second with no price movement.
    pub base_notional: f64,
    /// Weight of |return| / sigma_ref in the volume multiplier.
    pub volatility_coupling: f64,
}

impl Default for VolumeModel {
    fn default() -> Self {
        VolumeModel { base_notional: 20_000.0, volatility_coupling: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub duration_seconds: usize,
    pub params: OuParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSchedule {
    pub segments: Vec<Segment>,
    pub initial_price: f64,
    #[serde(default)]
    pub volume_model: VolumeModel,
    /// Timestamp of the first bar, seconds.
    #[serde(default)]
    pub start_t: i64,
}

impl RegimeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("schedule needs at least one segment".into()));
        }
        if !(self.initial_price > 0.0) {
            return Err(Error::Config("initial_price must be positive".into()));
        }
        for seg in &self.segments {
            if seg.duration_seconds == 0 {
                return Err(Error::Config("segment durations must be positive".into()));
            }
            seg.params.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let vm = &self.volume_model;
        if !(vm.base_notional >= 0.0 && vm.volatility_coupling.is_finite()) {
            return Err(Error::Config("invalid volume model".into()));
        }
        Ok(())
    }

    pub fn total_seconds(&self) -> usize {
        self.segments.iter().map(|s| s.duration_seconds).sum()
    }

    /// Convenience: `n_segments` segments cycling through `params`.
    pub fn alternating(params: &[OuParams], duration_seconds: usize, n_segments: usize, initial_price: f64) -> Self {
        let segments = (0..n_segments)
            .map(|i| Segment { duration_seconds, params: params[i % params.len()] })
            .collect();
        RegimeSchedule { segments, initial_price, volume_model: VolumeModel::default(), start_t: 0 }
    }
}

/// Generates one bar per simulated second. Each segment continues from the
/// previous segment's final price; bar `k` opens at the price before the step
/// and closes at the price after it.
pub fn simulate_schedule(schedule: &RegimeSchedule, seed: u64) -> Result<BarSeries> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vm = schedule.volume_model;
    let mut bars = Vec::with_capacity(schedule.total_seconds());
    let mut price = schedule.initial_price;
    let mut t = schedule.start_t;

    for seg in &schedule.segments {
        let path = ou_steps(&seg.params, price, seg.duration_seconds, 1.0, &mut rng);
        let sigma_ref = seg.params.step_variance(1.0).sqrt();
        for w in path.windows(2) {
            let (open, close) = (w[0], w[1]);
            if !(close > 0.0) {
                return Err(Error::Domain(format!("synthetic price went non-positive at t={t}")));
            }
            let shock = if sigma_ref > 0.0 { (close - open).abs() / sigma_ref } else { 0.0 };
            let volume = (vm.base_notional * (1.0 + vm.volatility_coupling * shock)).max(0.0);
            bars.push(Bar { t, open, high: open.max(close), low: open.min(close), close, volume });
            t += 1;
        }
        price = *path.last().unwrap();
    }
    BarSeries::new(bars)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_half_life_step() {
        let p = OuParams::new(0.01, 100.0, 0.0).unwrap();
        let path = simulate_ou(&p, 110.0, 1, 69.3147, 0).unwrap();
        assert!((path[1] - 105.0).abs() < 1e-4, "{}", path[1]);
    }

    #[test]
    fn zero_theta_zero_sigma_is_constant() {
        let p = OuParams::new(0.0, 100.0, 0.0).unwrap();
        let path = simulate_ou(&p, 123.0, 50, 1.0, 3).unwrap();
        assert!(path.iter().all(|&s| s == 123.0));
    }

    #[test]
    fn stationary_variance_monte_carlo() {
        let p = OuParams::new(0.05, 100.0, 0.5).unwrap();
        let path = simulate_ou(&p, 100.0, 100_000, 1.0, 11).unwrap();
        let n = path.len() as f64;
        let mean = path.iter().sum::<f64>() / n;
        let var = path.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 2.5).abs() / 2.5 < 0.10, "var={var}");
    }

    #[test]
    fn small_theta_variance_limit() {
        let p = OuParams { theta: 1e-12, mu: 1.0, sigma: 2.0 };
        assert_eq!(p.step_variance(1.0), 4.0);
        let q = OuParams { theta: 1e-6, mu: 1.0, sigma: 2.0 };
        assert!((q.step_variance(1.0) - 4.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = OuParams::new(0.1, 100.0, 1.0).unwrap();
        assert!(simulate_ou(&p, 100.0, 0, 1.0, 0).is_err());
        assert!(simulate_ou(&p, 100.0, 5, 0.0, 0).is_err());
        assert!(OuParams::new(-0.1, 100.0, 1.0).is_err());
    }

    #[test]
    fn flat_schedule() {
        let sched = RegimeSchedule {
            segments: vec![Segment { duration_seconds: 30, params: OuParams::new(0.0, 100.0, 0.0).unwrap() }],
            initial_price: 100.0,
            volume_model: VolumeModel { base_notional: 5.0, volatility_coupling: 0.0 },
            start_t: 10,
        };
        let s = simulate_schedule(&sched, 1).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s.bars()[0].t, 10);
        assert!(s.bars().iter().all(|b| *b == Bar::flat(b.t, 100.0, 5.0)));
    }

    #[test]
    fn zero_coupling_gives_constant_volume() {
        let mut sched = RegimeSchedule::alternating(&[OuParams::new(0.05, 100.0, 0.2).unwrap()], 200, 2, 100.0);
        sched.volume_model.volatility_coupling = 0.0;
        let s = simulate_schedule(&sched, 4).unwrap();
        assert!(s.volumes().iter().all(|&v| v == sched.volume_model.base_notional));
    }

    #[test]
    fn segments_chain_prices() {
        let a = OuParams::new(0.5, 100.0, 0.3).unwrap();
        let b = OuParams::new(0.001, 120.0, 0.3).unwrap();
        let sched = RegimeSchedule::alternating(&[a, b], 100, 2, 90.0);
        let s = simulate_schedule(&sched, 9).unwrap();
        assert_eq!(s.bars()[0].open, 90.0);
        for w in s.bars().windows(2) {
            assert_eq!(w[1].open, w[0].close);
        }
    }
}
