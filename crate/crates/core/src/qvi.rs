//! Finite-difference solver for the stationary impulse-control QVI of a
//! concentrated-liquidity position under OU prices.
//!
//! State is `(S, c)`: price and range center. The value function solves
//!
//! ```text
//! min( rho V - theta (mu - S) V_S - sigma^2/2 V_SS - f(S, c),  V(S, c) - (V(S, S) - C) ) = 0
//! ```
//!
//! Discretization is implicit in `S` per `c`-slice: upwinded drift, central
//! diffusion, reflecting edges. `V(S, S)` is read off each `S` row by linear
//! interpolation in `c`.
//!
//! The default method is policy iteration. For a fixed continuation/jump
//! labeling, every slice depends on the others only through the diagonal
//! values `E_i = V(S_i, S_i)`, so each policy evaluation reduces to one dense
//! `N_S x N_S` solve plus tridiagonal solves. The plain fixed-point iteration
//! (obstacle frozen at the previous iterate) is kept as a cross-check; it
//! contracts at roughly `1 - rho * dt_eff` per sweep and is only practical for
//! large discount rates.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ammcore::{concentration, PoolConfig};
use crate::error::{Error, Result};
use crate::synthpath::OuParams;

/// `rho` matching a per-second discount factor of 0.99.
pub fn default_rho() -> f64 {
    -(0.99f64.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl UniformGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        UniformGrid { lo, hi, n }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    /// Lower bracketing index and weight of the upper neighbor, clamped to
    /// the grid ends.
    fn locate(&self, x: f64) -> (usize, f64) {
        let t = ((x - self.lo) / self.step()).clamp(0.0, (self.n - 1) as f64);
        let j = (t.floor() as usize).min(self.n - 2);
        (j, t - j as f64)
    }

    fn nearest(&self, x: f64) -> usize {
        let t = ((x - self.lo) / self.step()).round();
        t.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// Fee income per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunningReward {
    /// `rate` while `|S/c - 1| <= width`, zero outside.
    InRange { rate: f64, width: f64 },
    Constant { rate: f64 },
}

impl RunningReward {
    /// In-range fee rate of the pool config at a constant CEX volume.
    pub fn from_pool(pool: &PoolConfig, ref_volume: f64) -> Self {
        RunningReward::InRange { rate: pool.in_range_fee_rate(ref_volume), width: pool.width }
    }

    pub fn eval(&self, s: f64, c: f64) -> f64 {
        match *self {
            RunningReward::InRange { rate, width } => {
                if c * (1.0 - width) <= s && s <= c * (1.0 + width) {
                    rate
                } else {
                    0.0
                }
            }
            RunningReward::Constant { rate } => rate,
        }
    }

    /// Mean of the reward over the price cell `[s - h/2, s + h/2]`. Smooths
    /// the range indicator so the discrete value moves continuously with `c`.
    pub fn cell_average(&self, s: f64, h: f64, c: f64) -> f64 {
        match *self {
            RunningReward::InRange { rate, width } => {
                let lo = (s - 0.5 * h).max(c * (1.0 - width));
                let hi = (s + 0.5 * h).min(c * (1.0 + width));
                rate * (hi - lo).max(0.0) / h
            }
            RunningReward::Constant { rate } => rate,
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            RunningReward::InRange { rate, .. } | RunningReward::Constant { rate } => rate.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QviProblem {
    pub rho: f64,
    pub ou: OuParams,
    pub reward: RunningReward,
    /// Cost of one intervention, quote units.
    pub cost: f64,
    pub s_grid: UniformGrid,
    pub c_grid: UniformGrid,
}

impl QviProblem {
    /// Problem for a pool config at a reference volume: the `S` grid spans
    /// `mu +/- s_span` stationary deviations and the `c` grid `mu +/- c_span`.
    pub fn for_pool(
        ou: OuParams,
        pool: &PoolConfig,
        ref_volume: f64,
        rho: f64,
        (n_s, s_span): (usize, f64),
        (n_c, c_span): (usize, f64),
    ) -> Self {
        let sd = ou.stationary_sd();
        QviProblem {
            rho,
            ou,
            reward: RunningReward::from_pool(pool, ref_volume),
            cost: crate::ammcore::rebalance_cost(pool, pool.capital),
            s_grid: UniformGrid::new(ou.mu - s_span * sd, ou.mu + s_span * sd, n_s),
            c_grid: UniformGrid::new(ou.mu - c_span * sd, ou.mu + c_span * sd, n_c),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ou.validate()?;
        if !(self.rho > 0.0) || !(self.cost >= 0.0) {
            return Err(Error::Domain(format!("need rho > 0 and cost >= 0 (rho={}, cost={})", self.rho, self.cost)));
        }
        for (name, g) in [("S", &self.s_grid), ("c", &self.c_grid)] {
            if g.n < 3 || !(g.lo < g.hi) || !(g.lo > 0.0) {
                return Err(Error::Domain(format!("{name} grid {g:?} needs >= 3 points on a positive interval")));
            }
        }
        if self.ou.theta > 0.0 {
            let half = 5.0 * self.ou.stationary_sd();
            let eps = 1e-9 * self.ou.mu;
            if self.s_grid.lo > self.ou.mu - half + eps || self.s_grid.hi < self.ou.mu + half - eps {
                return Err(Error::Domain("S grid must span mu +/- 5 stationary deviations".into()));
            }
        }
        Ok(())
    }

    pub fn concentration(&self) -> Option<f64> {
        match self.reward {
            RunningReward::InRange { width, .. } => Some(concentration(width)),
            RunningReward::Constant { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QviMethod {
    PolicyIteration,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub method: QviMethod,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iters: 200, method: QviMethod::PolicyIteration }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Continuation,
    Jump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QviSolution {
    pub s: Vec<f64>,
    pub c: Vec<f64>,
    /// `values[[i, j]] = V(s[i], c[j])`.
    pub values: Array2<f64>,
    pub region: Array2<Region>,
    /// `V(s[i], s[i])`, interpolated in `c`.
    pub diagonal: Vec<f64>,
    /// Nodes whose `c` neighbors bracket `S`; always continuation.
    pub pinned: Array2<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|min(pde residual, obstacle gap)|` over all nodes.
    pub residual: f64,
    pub cost: f64,
}

impl QviSolution {
    pub fn jump_count(&self) -> usize {
        self.region.iter().filter(|r| **r == Region::Jump).count()
    }

    pub fn write_values_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["S", "c", "V", "region"])?;
        for (i, s) in self.s.iter().enumerate() {
            for (j, c) in self.c.iter().enumerate() {
                let label = match self.region[[i, j]] {
                    Region::Continuation => "continuation",
                    Region::Jump => "jump",
                };
                wtr.write_record([s.to_string(), c.to_string(), self.values[[i, j]].to_string(), label.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_boundary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["c", "lower_dev", "upper_dev"])?;
        let fmt = |d: Option<f64>| d.map(|v| v.to_string()).unwrap_or_default();
        for &c in &self.c {
            let (lo, hi) = boundary_deviation(self, c);
            wtr.write_record([c.to_string(), fmt(lo), fmt(hi)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Smallest `|S/c - 1|` below and above `c` at which the policy jumps, on the
/// `c` slice nearest to `c`. `None` when that side has no jump node.
pub fn boundary_deviation(sol: &QviSolution, c: f64) -> (Option<f64>, Option<f64>) {
    let grid = UniformGrid::new(sol.c[0], *sol.c.last().unwrap(), sol.c.len());
    let j = grid.nearest(c);
    let cj = sol.c[j];
    let mut lower: Option<f64> = None;
    let mut upper: Option<f64> = None;
    for (i, &s) in sol.s.iter().enumerate() {
        if sol.region[[i, j]] != Region::Jump {
            continue;
        }
        let dev = (s / cj - 1.0).abs();
        let side = if s < cj { &mut lower } else { &mut upper };
        *side = Some(side.map_or(dev, |d: f64| d.min(dev)));
    }
    (lower, upper)
}

// --- discretization --------------------------------------------------------

/// Tridiagonal matrix; `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone)]
struct Tridiag {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiag {
    fn transpose(&self) -> Tridiag {
        let n = self.diag.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 1..n {
            lower[i] = self.upper[i - 1];
            upper[i - 1] = self.lower[i];
        }
        Tridiag { lower, diag: self.diag.clone(), upper }
    }

    /// Thomas algorithm; the systems here are diagonally dominant.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        c[0] = self.upper[0] / self.diag[0];
        d[0] = rhs[0] / self.diag[0];
        for i in 1..n {
            let m = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = if i + 1 < n { self.upper[i] / m } else { 0.0 };
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        d
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Continuation operator `rho - L` on the S grid; identical for every slice.
fn generator(p: &QviProblem) -> Tridiag {
    let n = p.s_grid.n;
    let h = p.s_grid.step();
    let diff = 0.5 * p.ou.sigma * p.ou.sigma / (h * h);
    let mut t = Tridiag { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] };
    for i in 0..n {
        let drift = p.ou.theta * (p.ou.mu - p.s_grid.point(i));
        let up = diff + drift.max(0.0) / h;
        let down = diff + (-drift).max(0.0) / h;
        // zero-derivative edges: the ghost node mirrors the edge node
        let up = if i + 1 < n { up } else { 0.0 };
        let down = if i > 0 { down } else { 0.0 };
        t.lower[i] = -down;
        t.upper[i] = -up;
        t.diag[i] = p.rho + up + down;
    }
    t
}

/// Slice operator for one labeling: continuation rows from `gen`, identity
/// rows where the node jumps.
fn slice_operator(gen: &Tridiag, jump: &[bool]) -> Tridiag {
    let mut t = gen.clone();
    for (i, &j) in jump.iter().enumerate() {
        if j {
            t.lower[i] = 0.0;
            t.upper[i] = 0.0;
            t.diag[i] = 1.0;
        }
    }
    t
}

struct Layout {
    s: Vec<f64>,
    c: Vec<f64>,
    /// Per S row: lower c index and the upper neighbor's weight.
    bracket: Vec<(usize, f64)>,
    fee: Array2<f64>,
    pinned: Array2<bool>,
}

impl Layout {
    fn new(p: &QviProblem) -> Self {
        let s = p.s_grid.points();
        let c = p.c_grid.points();
        let bracket: Vec<(usize, f64)> = s.iter().map(|&x| p.c_grid.locate(x)).collect();
        let h = p.s_grid.step();
        let fee = Array2::from_shape_fn((s.len(), c.len()), |(i, j)| p.reward.cell_average(s[i], h, c[j]));
        let mut pinned = Array2::from_elem((s.len(), c.len()), false);
        // Only nodes that carry interpolation weight feed the diagonal.
        for (i, &(j, w)) in bracket.iter().enumerate() {
            pinned[[i, j]] = w < 1.0;
            pinned[[i, j + 1]] = w > 0.0;
        }
        Layout { s, c, bracket, fee, pinned }
    }

    fn diagonal(&self, values: &Array2<f64>) -> Vec<f64> {
        self.bracket.iter().enumerate().map(|(i, &(j, w))| (1.0 - w) * values[[i, j]] + w * values[[i, j + 1]]).collect()
    }
}

/// Solution for a fixed labeling. Slices couple only through the diagonal
/// values, which solve a dense `N_S` system first.
fn evaluate_policy(p: &QviProblem, lay: &Layout, gen: &Tridiag, jump: &Array2<bool>) -> Result<Array2<f64>> {
    let (ns, nc) = (lay.s.len(), lay.c.len());
    let ops: Vec<Tridiag> = (0..nc).map(|j| slice_operator(gen, &jump.column(j).to_vec())).collect();

    // Part of each slice that does not depend on the diagonal.
    let base: Vec<Vec<f64>> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let rhs: Vec<f64> = (0..ns).map(|i| if jump[[i, j]] { -p.cost } else { lay.fee[[i, j]] }).collect();
            ops[j].solve(&rhs)
        })
        .collect();

    // Row k of each slice inverse, for the two slices bracketing S_k.
    let rows: Vec<(Vec<(usize, f64)>, f64)> = (0..ns)
        .into_par_iter()
        .map(|k| {
            let (j0, w) = lay.bracket[k];
            let mut coeffs = Vec::new();
            let mut b = 0.0;
            for (j, wj) in [(j0, 1.0 - w), (j0 + 1, w)] {
                if wj == 0.0 {
                    continue;
                }
                b += wj * base[j][k];
                let mut e = vec![0.0; ns];
                e[k] = 1.0;
                let y = ops[j].transpose().solve(&e);
                for (i, yi) in y.into_iter().enumerate() {
                    if jump[[i, j]] && yi != 0.0 {
                        coeffs.push((i, wj * yi));
                    }
                }
            }
            (coeffs, b)
        })
        .collect();

    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for (k, (coeffs, bk)) in rows.into_iter().enumerate() {
        b[k] = bk;
        for (i, m) in coeffs {
            a[(k, i)] -= m;
        }
    }
    let diag = a.lu().solve(&b).ok_or_else(|| Error::Domain("singular diagonal system".into()))?;

    let cols: Vec<Vec<f64>> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let rhs: Vec<f64> =
                (0..ns).map(|i| if jump[[i, j]] { diag[i] - p.cost } else { lay.fee[[i, j]] }).collect();
            ops[j].solve(&rhs)
        })
        .collect();
    Ok(Array2::from_shape_fn((ns, nc), |(i, j)| cols[j][i]))
}

/// Pointwise continuation residual and obstacle gap.
fn residuals(p: &QviProblem, lay: &Layout, gen: &Tridiag, values: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (ns, nc) = values.dim();
    let diag = lay.diagonal(values);
    let mut pde = Array2::zeros((ns, nc));
    let mut gap = Array2::zeros((ns, nc));
    for j in 0..nc {
        let col = values.column(j).to_vec();
        let lv = gen.apply(&col);
        for i in 0..ns {
            pde[[i, j]] = lv[i] - lay.fee[[i, j]];
            gap[[i, j]] = col[i] - (diag[i] - p.cost);
        }
    }
    (pde, gap)
}

fn finish(
    p: &QviProblem,
    lay: Layout,
    gen: &Tridiag,
    values: Array2<f64>,
    jump: &Array2<bool>,
    iterations: usize,
    converged: bool,
) -> QviSolution {
    let (pde, gap) = residuals(p, &lay, gen, &values);
    let residual = pde.iter().zip(gap.iter()).fold(0.0f64, |m, (a, b)| m.max(a.min(*b).abs()));
    QviSolution {
        diagonal: lay.diagonal(&values),
        region: jump.mapv(|j| if j { Region::Jump } else { Region::Continuation }),
        s: lay.s,
        c: lay.c,
        values,
        pinned: lay.pinned,
        iterations,
        converged,
        residual,
        cost: p.cost,
    }
}

pub fn solve(problem: &QviProblem, opts: &SolveOptions) -> Result<QviSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::Domain("need tol > 0 and max_iters > 0".into()));
    }
    match opts.method {
        QviMethod::PolicyIteration => solve_policy_iteration(problem, opts),
        QviMethod::FixedPoint => solve_fixed_point(problem, opts),
    }
}

/// Residual differences below this are rounding noise. With zero cost the
/// two rows tie exactly on whole regions and a strict comparison cycles.
fn tie_tolerance<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    1e-10 * (1.0 + values.fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Policy improvement with hysteresis: a node changes label only when the
/// other row is smaller by more than `eps`.
fn prefers_jump(was_jump: bool, gap: f64, pde: f64, eps: f64) -> bool {
    if was_jump {
        pde >= gap - eps
    } else {
        gap < pde - eps
    }
}

fn solve_policy_iteration(p: &QviProblem, opts: &SolveOptions) -> Result<QviSolution> {
    let lay = Layout::new(p);
    let gen = generator(p);
    let mut jump = Array2::from_elem(lay.fee.dim(), false);
    let mut values = evaluate_policy(p, &lay, &gen, &jump)?;
    for it in 1..=opts.max_iters {
        let (pde, gap) = residuals(p, &lay, &gen, &values);
        let eps = tie_tolerance(values.iter());
        let next = Array2::from_shape_fn(jump.dim(), |(i, j)| {
            !lay.pinned[[i, j]] && prefers_jump(jump[[i, j]], gap[[i, j]], pde[[i, j]], eps)
        });
        if next == jump {
            return Ok(finish(p, lay, &gen, values, &jump, it, true));
        }
        jump = next;
        values = evaluate_policy(p, &lay, &gen, &jump)?;
    }
    Err(Error::NoConvergence(Box::new(finish(p, lay, &gen, values, &jump, opts.max_iters, false))))
}

/// One-dimensional obstacle problem `min(A v - f, v - obstacle) = 0` on a
/// single slice, by policy iteration. Returns the values and labels.
fn obstacle_slice(gen: &Tridiag, fee: &[f64], obstacle: &[f64], pinned: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let mut jump = vec![false; fee.len()];
    loop {
        let op = slice_operator(gen, &jump);
        let rhs: Vec<f64> = (0..fee.len()).map(|i| if jump[i] { obstacle[i] } else { fee[i] }).collect();
        let v = op.solve(&rhs);
        let av = gen.apply(&v);
        let eps = tie_tolerance(v.iter());
        let next: Vec<bool> = (0..fee.len())
            .map(|i| !pinned[i] && prefers_jump(jump[i], v[i] - obstacle[i], av[i] - fee[i], eps))
            .collect();
        if next == jump {
            return (v, jump);
        }
        jump = next;
    }
}

fn solve_fixed_point(p: &QviProblem, opts: &SolveOptions) -> Result<QviSolution> {
    let lay = Layout::new(p);
    let gen = generator(p);
    let (ns, nc) = lay.fee.dim();
    let mut jump = Array2::from_elem((ns, nc), false);
    let mut values = evaluate_policy(p, &lay, &gen, &jump)?;
    for it in 1..=opts.max_iters {
        let obstacle: Vec<f64> = lay.diagonal(&values).into_iter().map(|e| e - p.cost).collect();
        let slices: Vec<(Vec<f64>, Vec<bool>)> = (0..nc)
            .into_par_iter()
            .map(|j| obstacle_slice(&gen, &lay.fee.column(j).to_vec(), &obstacle, &lay.pinned.column(j).to_vec()))
            .collect();
        let mut change = 0.0f64;
        for (j, (v, labels)) in slices.into_iter().enumerate() {
            for i in 0..ns {
                change = change.max((v[i] - values[[i, j]]).abs());
                values[[i, j]] = v[i];
                jump[[i, j]] = labels[i];
            }
        }
        if change < opts.tol {
            return Ok(finish(p, lay, &gen, values, &jump, it, true));
        }
    }
    Err(Error::NoConvergence(Box::new(finish(p, lay, &gen, values, &jump, opts.max_iters, false))))
}
