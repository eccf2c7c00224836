//! Offline TD training of the auxiliary successor-measure heads.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{quantile_burn_in, IndicatorTask, TaskFamily};
use crate::mdp::{Environment, TransitionDataset};
use crate::nn::{AdamConfig, AdamState, BackwardScratch, Encoder, ForwardCache, Gradients};
use crate::store::{Checkpoint, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Average over next actions (uniform random policy).
    Mean,
    /// Maximise over next actions.
    Max,
}

impl FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TargetMode::Mean),
            "max" => Ok(TargetMode::Max),
            _ => Err(Error::Config(format!("unknown target mode '{s}'"))),
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Mean => "mean",
            TargetMode::Max => "max",
        })
    }
}

/// When quantile updates of RNI biases happen relative to TD training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QrSchedule {
    /// All quantile steps first, then the biases are frozen.
    BurnIn,
    /// Quantile steps run alongside the first TD steps.
    Interleaved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub gradient_steps: u64,
    pub gamma: f64,
    pub tau: f64,
    pub target_mode: TargetMode,
    pub qr_burn_in_steps: u64,
    pub qr_schedule: QrSchedule,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub log_interval: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            gradient_steps: 200_000,
            gamma: 0.99,
            tau: 0.99,
            target_mode: TargetMode::Mean,
            qr_burn_in_steps: 8_000,
            qr_schedule: QrSchedule::BurnIn,
            learning_rate: 1e-4,
            adam_eps: 1.5e-4,
            log_interval: 1_000,
        }
    }
}

impl TrainerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch size and log interval must be positive".into()));
        }
        Ok(())
    }
}

/// `r + gamma * agg(next)`, or `r` on terminal transitions.
pub fn td_target(reward: f64, next_values: ArrayView1<f64>, gamma: f64, mode: TargetMode, terminal: bool) -> f64 {
    if terminal || next_values.is_empty() {
        return reward;
    }
    let agg = match mode {
        TargetMode::Mean => next_values.sum() / next_values.len() as f64,
        TargetMode::Max => next_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    reward + gamma * agg
}

/// A minibatch of transitions with per-task rewards already evaluated.
#[derive(Clone, Debug)]
pub struct TdBatch {
    pub observations: Array2<f64>,
    pub actions: Vec<usize>,
    pub next_observations: Array2<f64>,
    pub terminals: Vec<bool>,
    /// `batch x tasks`.
    pub rewards: Array2<f64>,
}

/// Mean over batch and tasks of the squared TD error, and its gradient with
/// respect to the online parameters. The target network only supplies
/// constants.
pub fn pvn_loss(
    batch: &TdBatch,
    online: &Encoder,
    target: &Encoder,
    gamma: f64,
    mode: TargetMode,
) -> Result<(f64, Array1<f64>, Gradients)> {
    let mut ws = LossWorkspace::default();
    let loss = ws.evaluate(batch, online, target, gamma, mode)?;
    Ok((loss, ws.per_task, ws.grads))
}

/// Buffers for repeated loss evaluations at a fixed batch size.
#[derive(Clone, Debug, Default)]
pub struct LossWorkspace {
    online: ForwardCache,
    target: ForwardCache,
    delta: Array2<f64>,
    scratch: BackwardScratch,
    pub grads: Gradients,
    pub per_task: Array1<f64>,
}

impl LossWorkspace {
    /// Returns the loss; gradients and per-task losses are left in `self`.
    pub fn evaluate(
        &mut self,
        batch: &TdBatch,
        online: &Encoder,
        target: &Encoder,
        gamma: f64,
        mode: TargetMode,
    ) -> Result<f64> {
        let m = online.n_heads;
        let na = online.n_actions;
        let n = batch.observations.nrows();
        if batch.rewards.dim() != (n, m) {
            return Err(Error::Shape(format!(
                "rewards {:?} for {n} transitions and {m} tasks",
                batch.rewards.dim()
            )));
        }
        online.net.forward_into(batch.observations.view(), &mut self.online)?;
        target.net.forward_into(batch.next_observations.view(), &mut self.target)?;
        let pred = self.online.output();
        let next = self.target.output();
        if self.delta.dim() != pred.dim() {
            self.delta = Array2::zeros(pred.raw_dim());
        } else {
            self.delta.fill(0.0);
        }
        self.per_task = Array1::zeros(m);
        let scale = 1.0 / (n * m).max(1) as f64;
        for i in 0..n {
            let a = batch.actions[i];
            let next_row = next.row(i);
            let next_row = next_row.as_slice().expect("row-major output");
            for j in 0..m {
                let nv = ArrayView1::from(&next_row[j * na..(j + 1) * na]);
                let y = td_target(batch.rewards[[i, j]], nv, gamma, mode, batch.terminals[i]);
                let err = pred[[i, j * na + a]] - y;
                self.per_task[j] += err * err / n as f64;
                self.delta[[i, j * na + a]] = 2.0 * err * scale;
            }
        }
        online
            .net
            .backward_into(&self.online, &mut self.delta, &mut self.grads, &mut self.scratch)?;
        Ok(if m == 0 { 0.0 } else { self.per_task.sum() / m as f64 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub mean_loss: f64,
    pub task_losses: Vec<f64>,
    /// Activation proportion of each RNI task over the distinct dataset
    /// observations.
    pub activations: Vec<f64>,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let tasks = self.records.first().map_or(0, |r| r.task_losses.len());
        let acts = self.records.first().map_or(0, |r| r.activations.len());
        let mut header = vec!["step".to_string(), "mean_loss".into(), "param_norm".into()];
        header.extend((0..tasks).map(|j| format!("loss_{j}")));
        header.extend((0..acts).map(|j| format!("activation_{j}")));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), format!("{:e}", r.mean_loss), format!("{:e}", r.param_norm)];
            row.extend(r.task_losses.iter().map(|v| format!("{v:e}")));
            row.extend(r.activations.iter().map(|v| format!("{v}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Mean loss over the first and last tenth of the records.
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let k = (n / 10).max(1);
        let mean = |rs: &[LogRecord]| rs.iter().map(|r| r.mean_loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[n - k..])))
    }
}

/// Distinct observations of a dataset and, per transition, the index of its
/// observation and next observation in that table.
#[derive(Clone, Debug)]
pub struct ObservationIndex {
    pub table: Array2<f64>,
    pub current: Vec<usize>,
    pub next: Vec<usize>,
}

impl ObservationIndex {
    pub fn build(d: &TransitionDataset) -> Self {
        let dim = d.obs_dim();
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut intern = |row: ArrayView1<f64>| {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let len = lookup.len();
            *lookup.entry(key).or_insert_with(|| {
                rows.extend(row.iter());
                len
            })
        };
        let current: Vec<usize> = d.observations.rows().into_iter().map(&mut intern).collect();
        let next: Vec<usize> = d.next_observations.rows().into_iter().map(&mut intern).collect();
        let n = rows.len() / dim.max(1);
        let table = Array2::from_shape_vec((if dim == 0 { lookup.len() } else { n }, dim), rows).expect("row-major table");
        Self { table, current, next }
    }
}

/// Reward inputs for every distinct observation.
struct RewardCache {
    /// Per-task scores (raw RNI score, hash bit, cumulant potential).
    scores: Array2<f64>,
    /// State id per distinct observation when the environment is known.
    states: Option<Vec<usize>>,
    /// Indicator outputs per distinct observation; cumulant columns unused.
    indicators: Array2<f64>,
    /// Scale per task for cumulants, `None` for indicator tasks.
    cumulant_scale: Vec<Option<f64>>,
}

impl RewardCache {
    fn build(index: &ObservationIndex, tasks: &TaskFamily, env: Option<&Environment>) -> Result<Self> {
        let scores = tasks.scores(index.table.view())?;
        let states = match env {
            Some(env) => Some(
                index
                    .table
                    .rows()
                    .into_iter()
                    .map(|r| {
                        env.identify(r.as_slice().expect("row-major"))
                            .ok_or_else(|| Error::Precondition("dataset observation not produced by environment".into()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        if tasks.kind.needs_states() && states.is_none() && !tasks.is_empty() {
            return Err(Error::Config("explicit-set tasks need the environment to identify states".into()));
        }
        let cumulant_scale = tasks
            .tasks
            .iter()
            .map(|t| match t {
                IndicatorTask::Cumulant(c) => Some(c.scale),
                _ => None,
            })
            .collect();
        let mut cache = Self {
            indicators: Array2::zeros(scores.raw_dim()),
            scores,
            states,
            cumulant_scale,
        };
        cache.refresh(tasks)?;
        Ok(cache)
    }

    /// Re-evaluates indicator outputs after a bias change.
    fn refresh(&mut self, tasks: &TaskFamily) -> Result<()> {
        for j in 0..tasks.len() {
            if self.cumulant_scale[j].is_some() {
                continue;
            }
            for x in 0..self.scores.nrows() {
                self.indicators[[x, j]] = tasks.reward(j, self.states.as_ref().map(|s| s[x]), self.scores[[x, j]], 0.0)?;
            }
        }
        Ok(())
    }

    fn reward(&self, j: usize, x: usize, next: usize) -> f64 {
        match self.cumulant_scale[j] {
            None => self.indicators[[x, j]],
            Some(0.0) => 0.0,
            Some(s) => s * (self.scores[[next, j]] - self.scores[[x, j]]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub target: Encoder,
    pub log: TrainLog,
}

/// Runs quantile burn-in (for RNI tasks) and TD training from `encoder`.
/// Deterministic per `seed`. Explicit-set tasks need `env` to map
/// observations to states.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    dataset: &TransitionDataset,
    mut tasks: TaskFamily,
    mut encoder: Encoder,
    config: &TrainerConfig,
    env: Option<&Environment>,
    seed: u64,
    config_hash: [u8; 32],
    config_text: &str,
) -> Result<PretrainOutput> {
    config.validate()?;
    if encoder.n_heads != tasks.len() {
        return Err(Error::Config(format!(
            "encoder has {} heads for {} tasks",
            encoder.n_heads,
            tasks.len()
        )));
    }
    if encoder.n_actions != dataset.n_actions as usize || encoder.net.input_dim() != dataset.obs_dim() {
        return Err(Error::Config("encoder does not match dataset shape".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = ObservationIndex::build(dataset);
    let mut cache = RewardCache::build(&index, &tasks, env)?;
    let has_rni = tasks.tasks.iter().any(|t| matches!(t, IndicatorTask::Rni(_)));

    let qr_batch_rows = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..config.batch_size)
            .map(|_| index.current[rng.random_range(0..index.current.len())])
            .collect()
    };
    // Quantile scores are drawn over dataset transitions, so states are
    // weighted by how often the data visits them.
    if has_rni && config.qr_schedule == QrSchedule::BurnIn {
        let rows: Vec<usize> = index.current.clone();
        let per_transition = cache.scores.select(Axis(0), &rows);
        quantile_burn_in(
            &mut tasks,
            &per_transition,
            config.qr_burn_in_steps as usize,
            config.batch_size,
            &mut rng,
        );
        cache.refresh(&tasks)?;
    }

    let snapshot = |encoder: &Encoder, tasks: &TaskFamily, step: u64, rng: &ChaCha8Rng| Checkpoint {
        config_hash,
        config_text: config_text.to_string(),
        encoder: encoder.clone(),
        tasks: tasks.clone(),
        step,
        rng: RngState::capture(rng),
    };

    let mut target = encoder.clone();
    let mut adam = AdamState::new(&encoder.net, config.adam());
    let mut workspace = LossWorkspace::default();
    let mut log = TrainLog::default();
    let m = tasks.len();
    let dim = dataset.obs_dim();
    let steps = if m == 0 { 0 } else { config.gradient_steps };
    let mut last_good = snapshot(&encoder, &tasks, 0, &rng);
    let mut interval_loss = 0.0;
    let mut interval_tasks = vec![0.0; m];
    let mut interval_count = 0u64;

    let mut batch = TdBatch {
        observations: Array2::zeros((config.batch_size, dim)),
        actions: vec![0; config.batch_size],
        next_observations: Array2::zeros((config.batch_size, dim)),
        terminals: vec![false; config.batch_size],
        rewards: Array2::zeros((config.batch_size, m)),
    };

    for step in 1..=steps {
        if has_rni && config.qr_schedule == QrSchedule::Interleaved && step <= config.qr_burn_in_steps {
            let rows = qr_batch_rows(&mut rng);
            let mut buf = vec![0.0; rows.len()];
            for (j, task) in tasks.tasks.iter_mut().enumerate() {
                if let IndicatorTask::Rni(r) = task {
                    for (b, &x) in buf.iter_mut().zip(&rows) {
                        *b = cache.scores[[x, j]];
                    }
                    r.quantile.update(&buf);
                }
            }
            cache.refresh(&tasks)?;
        }

        for b in 0..config.batch_size {
            let t = rng.random_range(0..dataset.len());
            let (x, nx) = (index.current[t], index.next[t]);
            batch.observations.row_mut(b).assign(&index.table.row(x));
            batch.next_observations.row_mut(b).assign(&index.table.row(nx));
            batch.actions[b] = dataset.actions[t] as usize;
            batch.terminals[b] = dataset.terminals[t];
            for j in 0..m {
                batch.rewards[[b, j]] = cache.reward(j, x, nx);
            }
        }

        let loss = workspace.evaluate(&batch, &encoder, &target, config.gamma, config.target_mode)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(last_good),
            });
        }
        match adam.step(&mut encoder.net, &workspace.grads) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) | Err(Error::NonFiniteParameter { .. }) => {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        }
        target.net.polyak_update(&encoder.net, config.tau)?;

        interval_loss += loss;
        for (acc, v) in interval_tasks.iter_mut().zip(workspace.per_task.iter()) {
            *acc += v;
        }
        interval_count += 1;
        if step % config.log_interval == 0 || step == steps {
            let c = interval_count as f64;
            log.records.push(LogRecord {
                step,
                mean_loss: interval_loss / c,
                task_losses: interval_tasks.iter().map(|v| v / c).collect(),
                activations: rni_activations(&tasks, &cache.scores),
                param_norm: encoder.net.flatten().iter().map(|v| v * v).sum::<f64>().sqrt(),
            });
            interval_loss = 0.0;
            interval_tasks.iter_mut().for_each(|v| *v = 0.0);
            interval_count = 0;
            last_good = snapshot(&encoder, &tasks, step, &rng);
        }
    }

    Ok(PretrainOutput {
        checkpoint: snapshot(&encoder, &tasks, steps, &rng),
        target,
        log,
    })
}

fn rni_activations(tasks: &TaskFamily, scores: &Array2<f64>) -> Vec<f64> {
    tasks
        .tasks
        .iter()
        .enumerate()
        .filter_map(|(j, t)| match t {
            IndicatorTask::Rni(r) => {
                let col = scores.column(j);
                Some(col.iter().filter(|&&g| g + r.bias() >= 0.0).count() as f64 / col.len().max(1) as f64)
            }
            _ => None,
        })
        .collect()
}

/// The random-cumulant variant: cumulant rewards with max-over-actions
/// targets.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_random_cumulants(
    dataset: &TransitionDataset,
    tasks: TaskFamily,
    encoder: Encoder,
    config: &TrainerConfig,
    seed: u64,
    config_hash: [u8; 32],
    config_text: &str,
) -> Result<PretrainOutput> {
    if tasks.tasks.iter().any(|t| !matches!(t, IndicatorTask::Cumulant(_))) {
        return Err(Error::Config("random-cumulant training needs cumulant tasks".into()));
    }
    let config = TrainerConfig {
        target_mode: TargetMode::Max,
        ..config.clone()
    };
    pretrain(dataset, tasks, encoder, &config, None, seed, config_hash, config_text)
}
