//! Experiment configuration files and the end-to-end pipeline: dataset
//! generation, pretraining, and the frozen-feature online phase.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{feature_table, greedy_trajectory, online_train, AgentConfig, OnlineOutput};
use crate::analysis::temporal_smoothness;
use crate::error::{Error, Result};
use crate::indicators::{quantile_burn_in, sample_task_family, TaskConfig, TaskKind};
use crate::mdp::{rollout, value_iteration, Environment, FourRoomsConfig, ObservationEncoding, Policy, RolloutConfig, TransitionDataset};
use crate::nn::{Encoder, EncoderConfig};
use crate::store::{read_checkpoint, sha256, Checkpoint};
use crate::trainer::{pretrain, pretrain_random_cumulants, PretrainOutput, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub layout: FourRoomsConfig,
    pub encoding: ObservationEncoding,
    pub gamma: f64,
    /// Goal cell `[row, col]` of the online task.
    pub goal: [usize; 2],
    pub dataset_transitions: usize,
    pub dataset_episode_cap: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            layout: FourRoomsConfig::default(),
            encoding: ObservationEncoding::OneHot,
            gamma: 0.99,
            goal: [9, 9],
            dataset_transitions: 100_000,
            dataset_episode_cap: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub num_tasks: usize,
    pub proportion: f64,
    pub qr_lr: f64,
    pub cumulant_scale: f64,
    pub explicit_subset_size: usize,
    pub tasks_per_module: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskConfig::new(0, 0);
        Self {
            kind: TaskKind::Rni,
            num_tasks: 10,
            proportion: t.proportion,
            qr_lr: t.qr_lr,
            cumulant_scale: t.cumulant_scale,
            explicit_subset_size: t.explicit_subset_size,
            tasks_per_module: t.tasks_per_module,
        }
    }
}

impl TaskSection {
    pub fn task_config(&self, obs_dim: usize, n_states: usize) -> TaskConfig {
        TaskConfig {
            obs_dim,
            n_states,
            proportion: self.proportion,
            qr_lr: self.qr_lr,
            cumulant_scale: self.cumulant_scale,
            explicit_subset_size: self.explicit_subset_size,
            tasks_per_module: self.tasks_per_module,
        }
    }
}

/// A full run description. `seed` drives everything before the online
/// phase; `online_seed` drives the agent and its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub online_seed: u64,
    pub env: EnvSection,
    pub tasks: TaskSection,
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub online: AgentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            online_seed: 0,
            env: EnvSection::default(),
            tasks: TaskSection::default(),
            encoder: EncoderConfig::default(),
            trainer: TrainerConfig::default(),
            online: AgentConfig::default(),
        }
    }
}

/// The fields that determine a pretrained checkpoint.
#[derive(Serialize)]
struct PretrainKey<'a> {
    seed: u64,
    layout: &'a FourRoomsConfig,
    encoding: ObservationEncoding,
    dataset_transitions: usize,
    dataset_episode_cap: usize,
    tasks: &'a TaskSection,
    encoder: &'a EncoderConfig,
    trainer: &'a TrainerConfig,
}

/// Independent sub-seed for a named pipeline stage.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.as_bytes());
    let h = sha256(&bytes);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.online.validate()?;
        if !(0.0..1.0).contains(&self.env.gamma) {
            return Err(Error::Config("env.gamma must lie in [0, 1)".into()));
        }
        if !(self.tasks.proportion > 0.0 && self.tasks.proportion <= 1.0) {
            return Err(Error::Config("tasks.proportion must lie in (0, 1]".into()));
        }
        if self.env.dataset_transitions == 0 {
            return Err(Error::Config("env.dataset_transitions must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the pretrained encoder.
    pub fn config_hash(&self) -> [u8; 32] {
        let key = PretrainKey {
            seed: self.seed,
            layout: &self.env.layout,
            encoding: self.env.encoding,
            dataset_transitions: self.env.dataset_transitions,
            dataset_episode_cap: self.env.dataset_episode_cap,
            tasks: &self.tasks,
            encoder: &self.encoder,
            trainer: &self.trainer,
        };
        sha256(toml::to_string(&key).expect("key serialises").as_bytes())
    }

    /// Hash of the whole run, online phase included.
    pub fn run_hash(&self) -> [u8; 32] {
        sha256(self.to_toml_string().as_bytes())
    }

    /// Reward-free environment used for the offline data.
    pub fn pretrain_env(&self) -> Result<Environment> {
        Environment::four_rooms(&self.env.layout, self.env.gamma, self.env.encoding)
    }

    pub fn goal_env(&self) -> Result<Environment> {
        let [r, c] = self.env.goal;
        Environment::four_rooms_goal(&self.env.layout, (r, c), self.env.gamma, self.env.encoding)
    }

    /// Uniform-random-policy transitions on the reward-free environment.
    pub fn generate_dataset(&self) -> Result<TransitionDataset> {
        let env = self.pretrain_env()?;
        let policy = Policy::uniform(env.n_states(), env.n_actions());
        rollout(
            &env,
            &policy,
            self.env.dataset_transitions,
            derive_seed(self.seed, "dataset"),
            &RolloutConfig {
                episode_cap: self.env.dataset_episode_cap,
            },
        )
    }

    /// Freshly initialised encoder, identical across task settings for a
    /// given seed and architecture so conditions are paired.
    pub fn initial_encoder(&self, obs_dim: usize, n_actions: usize) -> Result<Encoder> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "encoder"));
        let mut enc = Encoder::new(&self.encoder, obs_dim, self.tasks.num_tasks.max(1), n_actions, &mut rng)?;
        if self.tasks.num_tasks == 0 {
            // the head is drawn after the trunk, so dropping it leaves the
            // trunk identical to the one every other task count gets
            enc.n_heads = 0;
            let last = enc.net.layers.last_mut().unwrap();
            last.weight = Array2::zeros((last.fan_in(), 0));
            last.bias = Array1::zeros(0);
        }
        Ok(enc)
    }

    pub fn pretrain(&self, dataset: &TransitionDataset) -> Result<PretrainOutput> {
        self.validate()?;
        let env = self.pretrain_env()?;
        if dataset.obs_dim() != env.obs_dim() {
            return Err(Error::Config("dataset does not match the configured encoding".into()));
        }
        let task_cfg = self.tasks.task_config(env.obs_dim(), env.n_states());
        let tasks = sample_task_family(
            self.tasks.kind,
            self.tasks.num_tasks,
            derive_seed(self.seed, "tasks"),
            &task_cfg,
        )?;
        let encoder = self.initial_encoder(env.obs_dim(), env.n_actions())?;
        let text = self.to_toml_string();
        let hash = self.config_hash();
        let seed = derive_seed(self.seed, "pretrain");
        if self.tasks.kind == TaskKind::Cumulant {
            pretrain_random_cumulants(dataset, tasks, encoder, &self.trainer, seed, hash, &text)
        } else {
            pretrain(dataset, tasks, encoder, &self.trainer, Some(&env), seed, hash, &text)
        }
    }

    /// Reads a checkpoint and refuses it unless it was produced by a
    /// config with the same pretraining hash.
    pub fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        Ok(read_checkpoint(path, Some(&self.config_hash()))?)
    }

    pub fn online(&self, checkpoint: &Checkpoint) -> Result<OnlineOutput> {
        let env = self.goal_env()?;
        let sum = checkpoint.encoder.net.checksum();
        online_train(&env, &checkpoint.encoder, Some(sum), &self.online, self.online_seed)
    }

    /// Pretraining, online training and the trajectory analysis in one go.
    pub fn run(&self) -> Result<RunOutput> {
        let dataset = self.generate_dataset()?;
        let pre = self.pretrain(&dataset)?;
        let online = self.online(&pre.checkpoint)?;
        let env = self.goal_env()?;
        let trajectory = analysis_trajectory(&env, &pre.checkpoint.encoder, &online)?;
        let rows = trajectory_features(&env, &pre.checkpoint.encoder, &trajectory)?;
        let smoothness = temporal_smoothness(&rows).ok().map(|s| s.ratio);
        Ok(RunOutput {
            pretrain: pre,
            online,
            trajectory,
            smoothness,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub pretrain: PretrainOutput,
    pub online: OnlineOutput,
    /// Greedy trajectory used for feature analysis.
    pub trajectory: Vec<usize>,
    pub smoothness: Option<f64>,
}

/// Penultimate features of the visited states, one row per time step.
pub fn trajectory_features(env: &Environment, encoder: &Encoder, trajectory: &[usize]) -> Result<Array2<f64>> {
    Ok(feature_table(env, encoder)?.select(Axis(0), trajectory))
}

/// Longest greedy trajectory cap used for feature analysis.
pub const TRAJECTORY_CAP: usize = 100;

/// Start state with the longest optimal path to the goal (lowest id on
/// ties): the most informative single greedy episode.
pub fn analysis_start(env: &Environment) -> Result<usize> {
    let mdp = env.mdp();
    let starts = mdp.start_states();
    if starts.is_empty() {
        return Err(Error::Precondition("no start states".into()));
    }
    if mdp.reward().is_none() {
        return Ok(starts[0]);
    }
    let (v, _) = value_iteration(mdp, 1e-12)?;
    let mut best = starts[0];
    for &s in &starts {
        if v[s] < v[best] - 1e-12 {
            best = s;
        }
    }
    Ok(best)
}

/// Greedy trajectory of the trained head from [`analysis_start`].
pub fn analysis_trajectory(env: &Environment, encoder: &Encoder, online: &OnlineOutput) -> Result<Vec<usize>> {
    let features = feature_table(env, encoder)?;
    let start = analysis_start(env)?;
    Ok(greedy_trajectory(env, &features, &online.head, start, TRAJECTORY_CAP))
}

/// Samples `num_tasks` RNI tasks with target proportion `proportion`,
/// runs quantile burn-in on batches drawn uniformly from every state, and
/// returns each task's activation fraction over the full state set.
pub fn quantile_activation_trial(cfg: &ExperimentConfig, proportion: f64, seed: u64) -> Result<Vec<f64>> {
    let env = cfg.pretrain_env()?;
    let mut section = cfg.tasks.clone();
    section.proportion = proportion;
    let task_cfg = section.task_config(env.obs_dim(), env.n_states());
    let mut family = sample_task_family(TaskKind::Rni, cfg.tasks.num_tasks, derive_seed(seed, "tasks"), &task_cfg)?;
    let obs = env.observation_table().view();
    let scores = family.scores(obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "quantile"));
    quantile_burn_in(
        &mut family,
        &scores,
        cfg.trainer.qr_burn_in_steps as usize,
        cfg.trainer.batch_size,
        &mut rng,
    );
    family.activation_proportions(obs, None)
}
