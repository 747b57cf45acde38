//! Experiment configuration, loaded from TOML.
//!
//! One config describes a full study: the benchmark plant and controller are
//! fixed, everything that varies between runs (seeds, budgets, noise level,
//! methods, tasks) lives here. The resolved config is hashed into the output
//! manifest so results can be traced back to their settings.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use looptune::bo::{AcquisitionKind, BoConfig, EpisodeRunner, HierarchicalConfig, MethodKind};
use looptune::closed_loop::{initial_state, Task};
use looptune::gp::FitConfig;
use looptune::mpc::OcpConfig;
use looptune::plant::PlantConfig;
use looptune::surrogate::TrainerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the study.
    pub master_seed: u64,
    /// Number of repetitions; seed indices run from 0.
    pub seeds: u64,
    /// Optimization iterations per task.
    pub budget: usize,
    /// Closed-loop steps per episode, which is also the rollout horizon.
    pub episode_steps: usize,
    /// Process-noise standard deviation per state dimension; 0 for the
    /// deterministic plant.
    pub noise_std: f64,
    /// Worker threads for (method, seed) units; 0 uses every core.
    pub workers: usize,
    pub methods: Vec<String>,
    /// Acquisition of the blackbox method: "lcb" or "ei".
    pub blackbox_acquisition: String,
    /// Acquisition of the hierarchical method: "mean" or "theory-lcb".
    pub hierarchical_acquisition: String,
    pub optimizer: OptimizerSection,
    pub hierarchical: HierarchicalSection,
    pub tasks: Vec<TaskSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// Confidence multiplier of the lower-confidence-bound rule.
    pub beta: f64,
    /// Space-filling probes per acquisition optimization.
    pub restarts: usize,
    /// Coordinate-refinement steps after the probes.
    pub local_steps: usize,
    /// Observation-noise variance of the cost GPs in standardized units;
    /// omitted, it resolves to 1e-4 for the deterministic plant and 1e-2
    /// under process noise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_noise_var: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = BoConfig::default();
        OptimizerSection {
            beta: d.beta,
            restarts: d.restarts,
            local_steps: d.local_steps,
            cost_noise_var: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalSection {
    /// Task-relative iterations after which the dynamics hyperparameters
    /// are refit.
    pub refit_schedule: Vec<usize>,
    /// Refits are skipped once the transition set exceeds this many rows.
    pub refit_row_cap: usize,
}

impl Default for HierarchicalSection {
    fn default() -> Self {
        let d = HierarchicalConfig::default();
        HierarchicalSection {
            refit_schedule: d.refit_schedule,
            refit_row_cap: d.trainer.refit_row_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub label: String,
    pub q_weights: [f64; 4],
    pub r_weight: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 90210,
            seeds: 30,
            budget: 50,
            episode_steps: 25,
            noise_std: 0.0,
            workers: 0,
            methods: vec![
                "blackbox".to_string(),
                "multitask".to_string(),
                "hierarchical".to_string(),
            ],
            blackbox_acquisition: "lcb".to_string(),
            hierarchical_acquisition: "mean".to_string(),
            optimizer: OptimizerSection::default(),
            hierarchical: HierarchicalSection::default(),
            tasks: vec![
                TaskSection {
                    label: "task1".to_string(),
                    q_weights: [5.0, 0.1, 5.0, 0.1],
                    r_weight: 0.1,
                },
                TaskSection {
                    label: "task2".to_string(),
                    q_weights: [4.0, 0.2, 4.0, 0.2],
                    r_weight: 0.2,
                },
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds == 0 {
            bail!("need at least one seed");
        }
        if self.budget == 0 {
            bail!("need at least one iteration per task");
        }
        if self.episode_steps == 0 {
            bail!("episodes need at least one step");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bail!("noise_std must be finite and >= 0, got {}", self.noise_std);
        }
        if self.tasks.is_empty() {
            bail!("need at least one task");
        }
        let mut labels: Vec<&str> = self.tasks.iter().map(|t| t.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.tasks.len() {
            bail!("task labels must be unique");
        }
        self.methods()?;
        self.tasks()?;
        for m in self.methods()? {
            self.bo_config(m)?.validate_for(m).map_err(anyhow::Error::from)?;
        }
        Ok(())
    }

    pub fn methods(&self) -> anyhow::Result<Vec<MethodKind>> {
        if self.methods.is_empty() {
            bail!("need at least one method");
        }
        let mut out = Vec::with_capacity(self.methods.len());
        for m in &self.methods {
            let kind = MethodKind::parse(m)?;
            if out.contains(&kind) {
                bail!("method '{m}' listed twice");
            }
            out.push(kind);
        }
        Ok(out)
    }

    pub fn tasks(&self) -> anyhow::Result<Vec<Task>> {
        self.tasks
            .iter()
            .map(|t| Task::new(t.label.clone(), t.q_weights, t.r_weight).map_err(Into::into))
            .collect()
    }

    pub fn plant(&self) -> PlantConfig {
        PlantConfig::default().with_noise_std(self.noise_std)
    }

    pub fn ocp(&self) -> OcpConfig {
        OcpConfig::default()
    }

    pub fn cost_noise_var(&self) -> f64 {
        self.optimizer.cost_noise_var.unwrap_or(if self.noise_std > 0.0 { 1e-2 } else { 1e-4 })
    }

    pub fn bo_config(&self, method: MethodKind) -> anyhow::Result<BoConfig> {
        let acquisition = match method {
            MethodKind::Blackbox => AcquisitionKind::parse(&self.blackbox_acquisition)?,
            MethodKind::Multitask => AcquisitionKind::ExpectedImprovement,
            MethodKind::Hierarchical => AcquisitionKind::parse(&self.hierarchical_acquisition)?,
        };
        Ok(BoConfig {
            budget: self.budget,
            acquisition,
            beta: self.optimizer.beta,
            restarts: self.optimizer.restarts,
            local_steps: self.optimizer.local_steps,
            cost_noise_var: self.cost_noise_var(),
            ..BoConfig::default()
        })
    }

    pub fn hier_config(&self) -> HierarchicalConfig {
        let noise_var = self.noise_std * self.noise_std;
        HierarchicalConfig {
            trainer: TrainerConfig {
                step_delta: 0.05 / self.episode_steps as f64,
                // The four state outputs carry the process noise; the input
                // is a deterministic function of the state.
                noise_vars: [noise_var, noise_var, noise_var, noise_var, 0.0],
                refit_row_cap: self.hierarchical.refit_row_cap,
                fit: FitConfig {
                    restarts: 2,
                    steps: 30,
                    max_rows: Some(100),
                    ..FitConfig::default()
                },
                ..TrainerConfig::default()
            },
            refit_schedule: self.hierarchical.refit_schedule.clone(),
        }
    }

    pub fn runner(&self) -> anyhow::Result<EpisodeRunner> {
        Ok(EpisodeRunner {
            plant: self.plant(),
            ocp: self.ocp(),
            x0: initial_state(),
            steps: self.episode_steps,
            tasks: self.tasks()?,
            master_seed: self.master_seed,
        })
    }

    /// Hash of the resolved configuration, recorded in the manifest.
    pub fn config_hash(&self) -> anyhow::Result<String> {
        let text = toml::to_string(self).context("serializing config for hashing")?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
