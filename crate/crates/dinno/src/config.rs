//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use dinno_core::bnn::Architecture;
use dinno_core::consensus::{ConsensusConfig, RegStrategy};
use dinno_core::losses::{BaseLoss, KlReduction, LossConfig};
use dinno_core::optim::OptimizerKind;
use dinno_core::protocol::Schedule;
use dinno_core::trainer::TrainConfig;
use dinno_core::world::{LidarConfig, Retention};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    SingleAgent,
    KlSweep,
    Online,
    Distributed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerName {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::adam(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    UniformL2,
    SplitL2,
    #[default]
    SplitKl,
}

impl StrategyName {
    pub fn strategy(self) -> RegStrategy {
        match self {
            StrategyName::UniformL2 => RegStrategy::UniformL2,
            StrategyName::SplitL2 => RegStrategy::SplitL2,
            StrategyName::SplitKl => RegStrategy::SplitKl,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReductionName {
    #[default]
    Sum,
    Mean,
}

impl KlReductionName {
    pub fn reduction(self) -> KlReduction {
        match self {
            KlReductionName::Sum => KlReduction::Sum,
            KlReductionName::Mean => KlReduction::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionName {
    #[default]
    Cdr,
    Dr,
}

impl RetentionName {
    pub fn retention(self) -> Retention {
        match self {
            RetentionName::Cdr => Retention::Cumulative,
            RetentionName::Dr => Retention::Refresh,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Sim,
    Socket,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    #[default]
    Fifo,
    RandomDelay,
    Arbitrary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Grayscale floorplan image; a generated room layout when absent.
    pub map: Option<PathBuf>,
    /// Waypoint CSV (`agent,x,y`); the built-in routes when absent.
    pub paths: Option<PathBuf>,
    pub size_m: f64,
    pub resolution: f64,
    pub map_seed: u64,
    pub scan_stride: f64,
    pub beams: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub free_samples: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            map: None,
            paths: None,
            size_m: 20.0,
            resolution: 0.05,
            map_seed: 0,
            scan_stride: 0.5,
            beams: 360,
            max_range: 4.0,
            noise_sigma: 0.01,
            free_samples: 4,
        }
    }
}

impl WorldConfig {
    pub fn lidar(&self) -> LidarConfig {
        LidarConfig {
            n_beams: self.beams,
            max_range: self.max_range,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub hidden_layers: usize,
    pub omega: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            width: a.width,
            hidden_layers: a.hidden_layers,
            omega: a.omega,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Architecture {
        Architecture {
            input_dim: 2,
            width: self.width,
            hidden_layers: self.hidden_layers,
            omega: self.omega,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Iterations of single-agent training, and per round when online.
    pub iters: usize,
    pub batch_size: usize,
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub optimizer: OptimizerName,
    pub kl_weight: f64,
    pub kl_reduction: KlReductionName,
    pub prior_mu: f64,
    pub prior_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_size: 256,
            lr_mu: 1e-3,
            lr_rho: 1e-3,
            optimizer: OptimizerName::Adam,
            kl_weight: 5e-3,
            kl_reduction: KlReductionName::Sum,
            prior_mu: 0.0,
            prior_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kl_weights: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kl_weights: vec![1e-4, 5e-3, 5e-1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub rounds: usize,
    pub retention: RetentionName,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            rounds: 18,
            retention: RetentionName::Cdr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSection {
    pub strategy: StrategyName,
    pub rounds: usize,
    pub iters: usize,
    pub w_mu: f64,
    pub w_rho: f64,
    /// Dual step for both blocks; the penalty weights when absent.
    pub dual_step: Option<f64>,
    pub penalty_growth: f64,
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub optimizer: OptimizerName,
    pub batch_size: usize,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            strategy: StrategyName::SplitKl,
            rounds: 20,
            iters: 50,
            w_mu: 1.0,
            w_rho: 1.0,
            dual_step: None,
            penalty_growth: 1.0,
            lr_mu: 1e-3,
            lr_rho: 1e-3,
            optimizer: OptimizerName::Adam,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cells per side of the evaluation grid over `[-1, 1]²`.
    pub grid: usize,
    pub passes: usize,
    /// Fraction of each dataset held out for validation.
    pub val_fraction: f64,
    /// Forward passes for per-round validation during consensus.
    pub val_passes: usize,
    /// Upper bound on holdout points used per validation.
    pub val_max_points: usize,
    /// Cells within this Chebyshev distance of a point count as explored.
    pub explored_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: 256,
            passes: 50,
            val_fraction: 0.1,
            val_passes: 10,
            val_max_points: 2000,
            explored_radius: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub schedule: ScheduleName,
    pub max_delay: u32,
    pub host: String,
    /// Peer `i` listens on `base_port + i`.
    pub base_port: u16,
    pub timeout_s: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: TransportKind::Sim,
            schedule: ScheduleName::Fifo,
            max_delay: 8,
            host: "127.0.0.1".into(),
            base_port: 47000,
            timeout_s: 60.0,
        }
    }
}

impl TransportConfig {
    pub fn schedule(&self) -> Schedule {
        match self.schedule {
            ScheduleName::Fifo => Schedule::Fifo,
            ScheduleName::RandomDelay => Schedule::RandomDelay {
                max_delay: self.max_delay,
            },
            ScheduleName::Arbitrary => Schedule::Arbitrary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub agents: usize,
    /// Path index used by the single-agent and online scenarios.
    pub agent: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
    pub online: OnlineConfig,
    pub consensus: ConsensusSection,
    pub eval: EvalConfig,
    pub transport: TransportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::SingleAgent,
            seed: 0,
            agents: 7,
            agent: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            sweep: SweepConfig::default(),
            online: OnlineConfig::default(),
            consensus: ConsensusSection::default(),
            eval: EvalConfig::default(),
            transport: TransportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        // Relative file references resolve against the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.world.map, &mut cfg.world.paths].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.eval.passes < 2 || self.eval.val_passes < 2 {
            return bad("eval.passes and eval.val_passes must be at least 2");
        }
        if self.eval.grid == 0 {
            return bad("eval.grid must be positive");
        }
        if !(0.0..1.0).contains(&self.eval.val_fraction) {
            return bad("eval.val_fraction must lie in [0, 1)");
        }
        if self.model.width == 0 || self.model.hidden_layers == 0 {
            return bad("model.width and model.hidden_layers must be positive");
        }
        if self.train.iters == 0 || self.train.batch_size == 0 {
            return bad("train.iters and train.batch_size must be positive");
        }
        if self.train.kl_weight < 0.0 || self.sweep.kl_weights.iter().any(|&k| !(k >= 0.0)) {
            return bad("kl weights must be non-negative");
        }
        if !(self.train.prior_sigma > 0.0) {
            return bad("train.prior_sigma must be positive");
        }
        if self.world.beams == 0 || !(self.world.max_range > 0.0) || !(self.world.scan_stride > 0.0) {
            return bad("world.beams, world.max_range and world.scan_stride must be positive");
        }
        if self.online.rounds == 0 {
            return bad("online.rounds must be at least 1");
        }
        if self.scenario == Scenario::Distributed && self.agents < 2 {
            return bad("the distributed scenario needs at least 2 agents");
        }
        self.consensus_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kl_weight: self.train.kl_weight,
            base_loss: BaseLoss::Bce,
            prior_mu: self.train.prior_mu,
            prior_rho: dinno_core::math::softplus_inv(self.train.prior_sigma),
            kl_reduction: self.train.kl_reduction.reduction(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iters: self.train.iters,
            batch_size: self.train.batch_size,
            lr_mu: self.train.lr_mu,
            lr_rho: self.train.lr_rho,
            optimizer: self.train.optimizer.kind(),
        }
    }

    pub fn consensus_config(&self) -> ConsensusConfig {
        let c = &self.consensus;
        ConsensusConfig {
            w_mu: c.w_mu,
            w_rho: c.w_rho,
            iters: c.iters,
            lr_mu: c.lr_mu,
            lr_rho: c.lr_rho,
            rounds: c.rounds,
            dual_step: c.dual_step,
            penalty_growth: c.penalty_growth,
            batch_size: c.batch_size,
            optimizer: c.optimizer.kind(),
            strategy: c.strategy.strategy(),
            base_loss: BaseLoss::Bce,
            val_passes: self.eval.val_passes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "scenario = \"distributed\"\nseed = 3\n[consensus]\nstrategy = \"uniform_l2\"\nw_mu = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, Scenario::Distributed);
        assert_eq!(cfg.consensus.strategy, StrategyName::UniformL2);
        assert_eq!(cfg.consensus.w_mu, 2.5);
        assert_eq!(cfg.eval.passes, 50);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sede = 3").is_err());
        let cfg = ExperimentConfig {
            eval: EvalConfig { passes: 1, ..EvalConfig::default() },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            scenario: Scenario::Distributed,
            agents: 1,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("exp.toml");
        std::fs::write(&file, "[world]\nmap = \"plan.pgm\"\n").unwrap();
        let cfg = ExperimentConfig::load(&file).unwrap();
        assert_eq!(cfg.world.map.unwrap(), dir.path().join("plan.pgm"));
    }
}
