//! Rolling OU regime estimation and first-passage return probability.
//!
//! Parameters come from OLS of the one-step price change on the price level,
//! `S[t+1] - S[t] = alpha + beta * S[t] + eps`, with
//! `theta = -beta/dt`, `mu = -alpha/beta` and `sigma = sd(eps)/sqrt(dt)`.
//! Theta is clipped to `[0, 1]` at estimation time.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 1800;
const MIN_REGRESSOR_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeEstimate {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Number of prices in the window (seconds at 1 Hz sampling).
    pub window_len: usize,
    pub valid: bool,
}

impl RegimeEstimate {
    /// Fallback for windows that cannot support an estimate.
    pub fn fallback(current_price: f64, window_len: usize) -> Self {
        RegimeEstimate { theta: 0.0, mu: current_price, sigma: 0.0, window_len, valid: false }
    }

    pub fn half_life(&self) -> Option<f64> {
        half_life(self.theta)
    }
}

/// `ln 2 / theta`, or `None` when theta is not positive.
pub fn half_life(theta: f64) -> Option<f64> {
    (theta > 0.0).then(|| std::f64::consts::LN_2 / theta)
}

/// Centered regression moments of (S, dS).
#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

impl Moments {
    fn finish(&self, dt: f64, window_len: usize, last_price: f64) -> RegimeEstimate {
        let var_x = self.sxx / self.n;
        if !(var_x > MIN_REGRESSOR_VARIANCE) {
            return RegimeEstimate::fallback(last_price, window_len);
        }
        let beta = self.sxy / self.sxx;
        if !(beta < 0.0) {
            return RegimeEstimate::fallback(last_price, window_len);
        }
        let alpha = self.mean_y - beta * self.mean_x;
        let ssr = (self.syy - beta * self.sxy).max(0.0);
        let dof = (self.n - 2.0).max(1.0);
        RegimeEstimate {
            theta: (-beta / dt).clamp(0.0, 1.0),
            mu: -alpha / beta,
            sigma: (ssr / dof).sqrt() / dt.sqrt(),
            window_len,
            valid: true,
        }
    }
}

/// Batch estimate over a window of prices sampled every `dt` seconds.
pub fn estimate(prices: &[f64], dt: f64) -> Result<RegimeEstimate> {
    if prices.len() < 3 {
        return Err(Error::WindowTooShort { len: prices.len() });
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let xs = &prices[..prices.len() - 1];
    let n = xs.len() as f64;
    let dy = |i: usize| prices[i + 1] - prices[i];
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = (0..xs.len()).map(dy).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let cx = x - mean_x;
        let cy = dy(i) - mean_y;
        sxx += cx * cx;
        sxy += cx * cy;
        syy += cy * cy;
    }
    let last = *prices.last().unwrap();
    let mut est = Moments { n, mean_x, mean_y, sxx, sxy, syy }.finish(dt, prices.len(), last);
    if est.valid {
        // Recompute the residual spread explicitly so exact paths give sigma ~ 0.
        let beta = sxy / sxx;
        let alpha = mean_y - beta * mean_x;
        let ssr: f64 = xs.iter().enumerate().map(|(i, &x)| (dy(i) - alpha - beta * x).powi(2)).sum();
        est.sigma = (ssr / (n - 2.0).max(1.0)).sqrt() / dt.sqrt();
    }
    Ok(est)
}

/// Sliding-window estimator with O(1) amortized updates.
///
/// Sums are kept relative to an anchor price that is reset (and the sums
/// rebuilt from the buffer) once per window length of pushes, which keeps
/// cancellation error bounded on long series.
#[derive(Debug, Clone)]
pub struct RollingEstimator {
    window: usize,
    dt: f64,
    prices: VecDeque<f64>,
    anchor: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
    since_rebase: usize,
}

impl RollingEstimator {
    pub fn new(window: usize, dt: f64) -> Result<Self> {
        if window < 3 {
            return Err(Error::WindowTooShort { len: window });
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(RollingEstimator {
            window,
            dt,
            prices: VecDeque::with_capacity(window + 1),
            anchor: 0.0,
            sx: 0.0,
            sy: 0.0,
            sxx: 0.0,
            sxy: 0.0,
            syy: 0.0,
            since_rebase: 0,
        })
    }

    fn add_pair(&mut self, from: f64, to: f64, sign: f64) {
        let x = from - self.anchor;
        let y = to - from;
        self.sx += sign * x;
        self.sy += sign * y;
        self.sxx += sign * x * x;
        self.sxy += sign * x * y;
        self.syy += sign * y * y;
    }

    fn rebase(&mut self) {
        self.anchor = *self.prices.back().unwrap();
        self.sx = 0.0;
        self.sy = 0.0;
        self.sxx = 0.0;
        self.sxy = 0.0;
        self.syy = 0.0;
        let prices: Vec<f64> = self.prices.iter().copied().collect();
        for w in prices.windows(2) {
            self.add_pair(w[0], w[1], 1.0);
        }
        self.since_rebase = 0;
    }

    pub fn push(&mut self, price: f64) {
        if self.prices.is_empty() {
            self.prices.push_back(price);
            self.anchor = price;
            return;
        }
        let last = *self.prices.back().unwrap();
        self.add_pair(last, price, 1.0);
        self.prices.push_back(price);
        if self.prices.len() > self.window {
            let a = self.prices.pop_front().unwrap();
            let b = self.prices[0];
            self.add_pair(a, b, -1.0);
        }
        self.since_rebase += 1;
        if self.since_rebase >= self.window {
            self.rebase();
        }
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Estimate over the current window; falls back when fewer than 3 prices
    /// have been seen.
    pub fn current(&self) -> RegimeEstimate {
        let len = self.prices.len();
        let last = self.prices.back().copied().unwrap_or(f64::NAN);
        if len < 3 {
            return RegimeEstimate::fallback(last, len);
        }
        let n = (len - 1) as f64;
        let mean_x = self.sx / n;
        let mean_y = self.sy / n;
        let m = Moments {
            n,
            mean_x,
            mean_y,
            sxx: (self.sxx - n * mean_x * mean_x).max(0.0),
            sxy: self.sxy - n * mean_x * mean_y,
            syy: (self.syy - n * mean_y * mean_y).max(0.0),
        };
        let mut est = m.finish(self.dt, len, last);
        if est.valid {
            est.mu += self.anchor;
        }
        est
    }
}

/// Causal estimates for every index of `prices`; entry `i` uses the window
/// ending at (and including) `prices[i]`.
pub fn rolling_estimates(prices: &[f64], window: usize, dt: f64) -> Result<Vec<RegimeEstimate>> {
    let mut est = RollingEstimator::new(window, dt)?;
    Ok(prices
        .iter()
        .map(|&p| {
            est.push(p);
            est.current()
        })
        .collect())
}

/// One row per bar: `t,theta,mu,sigma,half_life,window_len,valid`, with an
/// empty half-life when theta is zero.
pub fn write_estimates_csv<W: std::io::Write>(t: &[i64], estimates: &[RegimeEstimate], writer: W) -> Result<()> {
    if t.len() != estimates.len() {
        return Err(Error::Shape(format!("{} timestamps for {} estimates", t.len(), estimates.len())));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["t", "theta", "mu", "sigma", "half_life", "window_len", "valid"])?;
    for (ti, e) in t.iter().zip(estimates) {
        let hl = e.half_life().map(|h| h.to_string()).unwrap_or_default();
        wtr.write_record([
            ti.to_string(),
            e.theta.to_string(),
            e.mu.to_string(),
            e.sigma.to_string(),
            hl,
            e.window_len.to_string(),
            e.valid.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Probability that an OU process started at `s` reaches the mean `mu` before
/// the outer barrier `barrier`, as a ratio of scale-function integrals.
pub fn p_return(s: f64, mu: f64, barrier: f64, theta: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::DegenerateDiffusion);
    }
    if !(theta >= 0.0) || barrier == mu {
        return Err(Error::Domain(format!("need theta >= 0 and barrier != mu (theta={theta})")));
    }
    let (lo, hi) = if barrier < mu { (barrier, mu) } else { (mu, barrier) };
    if !(lo <= s && s <= hi) {
        return Err(Error::Domain(format!("s={s} outside [{lo}, {hi}]")));
    }
    let k = theta / (sigma * sigma);
    // Scale by the integrand's maximum, reached at the barrier.
    let peak = k * (barrier - mu).powi(2);
    let density = |y: f64| (k * (y - mu).powi(2) - peak).exp();
    let (a, b) = if barrier < s { (barrier, s) } else { (s, barrier) };
    let num = adaptive_simpson(&density, a, b, 1e-10);
    let den = adaptive_simpson(&density, lo, hi, 1e-10);
    Ok((num / den).clamp(0.0, 1.0))
}

/// Adaptive Simpson quadrature with a relative error target.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let tol = rel_tol * whole.abs().max(f64::MIN_POSITIVE);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
