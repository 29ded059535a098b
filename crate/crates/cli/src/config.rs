use std::fs;
use std::path::Path;

use aggflock::dynamics::{grid_speed_scale_for, SimConfig};
use aggflock::evaluation::{EpisodeOptions, Experiment, Scenario};
use aggflock::gnn::FeatureOptions;
use aggflock::imitation::TrainConfig;
use aggflock::Vec2;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Contents of a run config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub features: FeatureOptions,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub traj_len: usize,
    pub scenario: ScenarioConfig,
    pub controllers: Vec<String>,
    pub verify_distributed: bool,
    pub policy_scale: f64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            traj_len: 200,
            scenario: ScenarioConfig::default(),
            controllers: vec!["global".into(), "local".into(), "gnn".into()],
            verify_distributed: false,
            policy_scale: 1.0,
            jobs: 1,
        }
    }
}

/// Scenario as written in the config; unset grid speed is derived from
/// `v_init`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// `disc`, `leaders` or `grid`.
    pub kind: String,
    pub n_leaders: usize,
    pub leader_velocity: [f64; 2],
    pub grid_spacing: f64,
    pub grid_speed_scale: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: "disc".into(),
            n_leaders: 2,
            leader_velocity: [1.0, 0.0],
            grid_spacing: 0.9,
            grid_speed_scale: None,
        }
    }
}

impl ScenarioConfig {
    pub fn resolve(&self, sim: &SimConfig) -> Result<Scenario, CliError> {
        match self.kind.as_str() {
            "disc" => Ok(Scenario::Disc),
            "leaders" => Ok(Scenario::Leaders {
                n_leaders: self.n_leaders,
                velocity: Vec2::new(self.leader_velocity[0], self.leader_velocity[1]),
            }),
            "grid" => Ok(Scenario::Grid {
                spacing: self.grid_spacing,
                speed_scale: self
                    .grid_speed_scale
                    .unwrap_or_else(|| grid_speed_scale_for(100, self.grid_spacing, sim.v_init)),
            }),
            other => Err(CliError::Usage(format!(
                "eval.scenario.kind: unknown scenario `{other}`; valid: disc, leaders, grid"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: Option<String>,
    pub values: Vec<f64>,
    pub n_seeds: usize,
    pub include_global: bool,
    pub include_local: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            values: Vec::new(),
            n_seeds: 20,
            include_global: true,
            include_local: true,
        }
    }
}

impl SweepConfig {
    pub fn experiment(&self) -> Result<Option<Experiment>, CliError> {
        self.experiment
            .as_deref()
            .map(|s| s.parse().map_err(|e: aggflock::FlockError| CliError::Usage(e.to_string())))
            .transpose()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the shared sections into the training config.
    pub fn sync(&mut self) {
        self.train.sim = self.sim.clone();
        self.train.features = self.features;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: aggflock::FlockError| CliError::Usage(e.to_string());
        self.sim.validate().map_err(usage)?;
        self.features.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.eval.traj_len == 0 {
            return Err(CliError::Usage("invalid parameter `eval.traj_len`: must be positive".into()));
        }
        if !(self.eval.policy_scale > 0.0) {
            return Err(CliError::Usage("invalid parameter `eval.policy_scale`: must be positive".into()));
        }
        self.eval.scenario.resolve(&self.sim)?;
        self.sweep.experiment()?;
        Ok(())
    }

    pub fn episode_options(&self) -> EpisodeOptions {
        EpisodeOptions {
            features: self.features,
            verify_distributed: self.eval.verify_distributed,
            policy_scale: self.eval.policy_scale,
        }
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}
