//! JSON run configuration shared by every pipeline stage.
//!
//! Every section has defaults, so `{}` is a valid config. Unknown keys are
//! rejected. The config hash is the SHA-256 of the effective config's
//! canonical JSON and is stamped on every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::TrainConfig;
use crate::ammcore::PoolConfig;
use crate::backtest::GAS_LEVELS;
use crate::envsim::RewardParams;
use crate::error::{Error, Result};
use crate::marketdata::{aggregate, read_trades_csv, BarSeries};
use crate::qvi::{default_rho, QviMethod, QviProblem, SolveOptions};
use crate::strategies::StrategySpec;
use crate::synthpath::{simulate_schedule, OuParams, RegimeSchedule, VolumeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// 1 Hz bars as written by `ingest` or `synth`.
    BarsCsv(PathBuf),
    /// Raw trades `timestamp_ms,price,size`, aggregated on load.
    TradesCsv(PathBuf),
    Synth(RegimeSchedule),
}

impl DataSource {
    /// Loads or generates the bar series; `seed` only matters for `Synth`.
    pub fn load(&self, seed: u64) -> Result<BarSeries> {
        let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
        match self {
            DataSource::BarsCsv(p) => BarSeries::read_csv(open(p)?),
            DataSource::TradesCsv(p) => aggregate(&read_trades_csv(open(p)?)?),
            DataSource::Synth(sched) => simulate_schedule(sched, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.70, val: 0.15, test: 0.15 }
    }
}

/// Mean CEX volume of the default synthetic volume model:
/// `base * (1 + coupling * E|Z|)` with `E|Z| = sqrt(2/pi)`.
pub fn default_ref_volume() -> f64 {
    let vm = VolumeModel::default();
    vm.base_notional * (1.0 + vm.volatility_coupling * (2.0 / std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QviSpec {
    pub ou: OuParams,
    pub rho: f64,
    pub ref_volume: f64,
    /// Intervention cost; defaults to the pool's rebalance cost.
    pub cost: Option<f64>,
    pub s_points: usize,
    pub c_points: usize,
    /// Grid half-spans in stationary standard deviations.
    pub s_span: f64,
    pub c_span: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub method: QviMethod,
}

impl Default for QviSpec {
    fn default() -> Self {
        QviSpec {
            ou: OuParams { theta: 0.05, mu: 100.0, sigma: 0.5 },
            rho: default_rho(),
            ref_volume: default_ref_volume(),
            cost: None,
            s_points: 400,
            c_points: 100,
            s_span: 6.0,
            c_span: 2.5,
            tol: 1e-8,
            max_iters: 200,
            method: QviMethod::PolicyIteration,
        }
    }
}

impl QviSpec {
    pub fn problem(&self, pool: &PoolConfig) -> QviProblem {
        let mut p = QviProblem::for_pool(
            self.ou,
            pool,
            self.ref_volume,
            self.rho,
            (self.s_points, self.s_span),
            (self.c_points, self.c_span),
        );
        if let Some(cost) = self.cost {
            p.cost = cost;
        }
        p
    }

    pub fn options(&self) -> SolveOptions {
        SolveOptions { tol: self.tol, max_iters: self.max_iters, method: self.method }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSpec {
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_points: usize,
    pub d_edge_min: f64,
    pub d_edge_max: f64,
    pub d_edge_points: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec { theta_min: 0.0, theta_max: 0.1, theta_points: 21, d_edge_min: -1.0, d_edge_max: 1.0, d_edge_points: 41 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 20 episodes of 3,600 steps.
    Smoke,
    /// 300 episodes of 36,000 steps.
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Ten thousand seconds alternating fast and slow mean reversion.
pub fn smoke_schedule() -> RegimeSchedule {
    let fast = OuParams { theta: 0.05, mu: 100.0, sigma: 0.05 };
    let slow = OuParams { theta: 0.0005, mu: 100.0, sigma: 0.05 };
    let mut s = RegimeSchedule::alternating(&[fast, slow], 2500, 4, 100.0);
    s.volume_model = VolumeModel::default();
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitFractions,
    pub regime_window: usize,
    pub pool: PoolConfig,
    pub reward: RewardParams,
    pub train: TrainConfig,
    pub strategy: StrategySpec,
    /// Strategies compared by the gas sweep.
    pub strategies: Vec<StrategySpec>,
    pub gas_levels: Vec<f64>,
    pub qvi: QviSpec,
    pub heatmap: HeatmapSpec,
    /// Default output directory when `--out` is not given.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSource::Synth(smoke_schedule()),
            split: SplitFractions::default(),
            regime_window: crate::regime::DEFAULT_WINDOW,
            pool: PoolConfig::default(),
            reward: RewardParams::default(),
            train: TrainConfig::smoke(),
            strategy: StrategySpec::Lancelot,
            strategies: vec![
                StrategySpec::Merlin,
                StrategySpec::Bedivere,
                StrategySpec::Lancelot,
                StrategySpec::Galahad(Default::default()),
            ],
            gas_levels: GAS_LEVELS.to_vec(),
            qvi: QviSpec::default(),
            heatmap: HeatmapSpec::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pool.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.test > 0.0) || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(format!("{s:?}")));
        }
        if self.regime_window < 3 {
            return Err(Error::Config("regime_window must be at least 3".into()));
        }
        if let DataSource::Synth(sched) = &self.data {
            sched.validate()?;
        }
        if self.gas_levels.is_empty() || self.gas_levels.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::Config("gas_levels must be positive".into()));
        }
        let q = &self.qvi;
        if q.s_points < 3 || q.c_points < 3 || !(q.rho > 0.0) || !(q.tol > 0.0) || !(q.ref_volume >= 0.0) {
            return Err(Error::Config(format!("invalid qvi section {q:?}")));
        }
        let h = &self.heatmap;
        if h.theta_points == 0 || h.d_edge_points == 0 || h.theta_max < h.theta_min || h.d_edge_max < h.d_edge_min {
            return Err(Error::Config(format!("invalid heatmap section {h:?}")));
        }
        Ok(())
    }

    pub fn apply_profile(&mut self, profile: Profile) {
        let base = match profile {
            Profile::Smoke => TrainConfig::smoke(),
            Profile::Full => TrainConfig::default(),
        };
        self.train.episodes = base.episodes;
        self.train.episode_length = base.episode_length;
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"pool": {"gas": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_json(r#"{"pool": {"gas_cost": 5.0}, "strategy": {"name": "bedivere"}}"#).unwrap();
        assert_eq!(cfg.pool.gas_cost, 5.0);
        assert_eq!(cfg.pool.width, 0.002);
        assert_eq!(cfg.strategy, StrategySpec::Bedivere);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trip_json() {
        let mut cfg = RunConfig::default();
        cfg.apply_profile(Profile::Full);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.train.episodes, 300);
    }

    #[test]
    fn missing_data_file_is_a_config_error() {
        let src = DataSource::BarsCsv(PathBuf::from("/nonexistent/bars.csv"));
        assert!(matches!(src.load(0), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_source_uses_the_seed() {
        let src = RunConfig::default().data;
        let (a, b) = (src.load(1).unwrap(), src.load(2).unwrap());
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, src.load(1).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn shipped_configs_match_defaults() {
        let smoke = RunConfig::from_json(include_str!("../../../configs/smoke.json")).unwrap();
        assert_eq!(smoke, RunConfig::default());
        let full = RunConfig::from_json(include_str!("../../../configs/full.json")).unwrap();
        let mut expected = RunConfig::default();
        expected.apply_profile(Profile::Full);
        assert_eq!(full.train, expected.train);
        assert_eq!((full.pool, full.reward, full.qvi), (expected.pool, expected.reward, expected.qvi));
    }

    #[test]
    fn bad_split_rejected() {
        assert!(RunConfig::from_json(r#"{"split": {"train": 0.5, "val": 0.5, "test": 0.5}}"#).is_err());
    }
}
