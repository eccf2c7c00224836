//! Indicator-function families that define auxiliary rewards, plus the
//! random-cumulant reward.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Mlp};

/// Mersenne prime `2^13 - 1`.
pub const HASH_PRIME: u64 = 8191;
/// Observation features are mapped to integers in `[0, QUANT_LEVELS]`.
pub const QUANT_LEVELS: f64 = 255.0;

pub fn quantize(features: ArrayView1<f64>) -> Vec<u64> {
    features
        .iter()
        .map(|&f| (f.clamp(0.0, 1.0) * QUANT_LEVELS).round() as u64)
        .collect()
}

/// `h(x) = ((a_0 + sum_j a_j x_j) mod P) mod m`; fires when `h(x) = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashIndicator {
    /// `a_0` followed by one coefficient per input coordinate.
    pub coefficients: Vec<u64>,
    pub modulus: u64,
}

impl HashIndicator {
    pub fn new(coefficients: Vec<u64>, modulus: u64) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|&a| a >= HASH_PRIME) {
            return Err(Error::Config(format!("hash coefficients must lie in [0, {HASH_PRIME})")));
        }
        if modulus == 0 {
            return Err(Error::Config("hash modulus must be positive".into()));
        }
        Ok(Self { coefficients, modulus })
    }

    pub fn sample<R: Rng + ?Sized>(input_dim: usize, modulus: u64, rng: &mut R) -> Result<Self> {
        let coefficients = (0..=input_dim).map(|_| rng.random_range(0..HASH_PRIME)).collect();
        Self::new(coefficients, modulus)
    }

    pub fn input_dim(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn hash(&self, x: &[u64]) -> u64 {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acc = self.coefficients[0];
        for (&a, &v) in self.coefficients[1..].iter().zip(x) {
            acc = (acc + a * (v % HASH_PRIME)) % HASH_PRIME;
        }
        acc % self.modulus
    }

    pub fn eval_int(&self, x: &[u64]) -> bool {
        self.hash(x) == 0
    }

    pub fn eval(&self, obs: ArrayView1<f64>) -> bool {
        self.eval_int(&quantize(obs))
    }
}

/// Pinball-loss SGD on a scalar offset so that a fraction `target` of
/// scores land at or above zero after the offset is added.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileBias {
    pub bias: f64,
    pub target: f64,
    pub lr: f64,
}

impl QuantileBias {
    pub fn new(target: f64, lr: f64) -> Result<Self> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::Config(format!("activation proportion {target} outside (0, 1)")));
        }
        Ok(Self { bias: 0.0, target, lr })
    }

    /// Pinball gradient at level `1 - target`, averaged over the batch.
    pub fn gradient(&self, raw_scores: &[f64]) -> f64 {
        let below = raw_scores.iter().filter(|&&g| g + self.bias < 0.0).count() as f64;
        (1.0 - self.target) - below / raw_scores.len() as f64
    }

    pub fn update(&mut self, raw_scores: &[f64]) {
        if raw_scores.is_empty() {
            return;
        }
        self.bias -= self.lr * self.gradient(raw_scores);
    }
}

/// `1{g(x) + b >= 0}` for a frozen random network `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomNetworkIndicator {
    pub network: Mlp,
    pub quantile: QuantileBias,
}

pub const RNI_HIDDEN: [usize; 2] = [64, 64];

/// Frozen random scalar network: tanh hidden layers, orthogonal weights.
pub fn random_scalar_network<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Mlp> {
    let sizes = [input_dim, RNI_HIDDEN[0], RNI_HIDDEN[1], 1];
    Mlp::new(
        &sizes,
        &[Activation::Tanh, Activation::Tanh, Activation::Identity],
        Init::Orthogonal,
        rng,
    )
}

impl RandomNetworkIndicator {
    pub fn sample<R: Rng + ?Sized>(input_dim: usize, target: f64, lr: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            network: random_scalar_network(input_dim, rng)?,
            quantile: QuantileBias::new(target, lr)?,
        })
    }

    pub fn bias(&self) -> f64 {
        self.quantile.bias
    }

    /// `g(x)` without the bias, one per row.
    pub fn raw_scores(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.network.forward(obs)?.column(0).to_owned())
    }

    pub fn eval(&self, obs: ArrayView1<f64>) -> Result<bool> {
        let g = self.raw_scores(obs.insert_axis(Axis(0)))?[0];
        Ok(g + self.bias() >= 0.0)
    }

    pub fn qr_update(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::Precondition("quantile update needs a nonempty batch".into()));
        }
        let scores = self.raw_scores(batch)?;
        self.quantile.update(scores.as_slice().expect("contiguous"));
        Ok(())
    }
}

/// `r(x, x') = s (f(x') - f(x))` for a frozen random network `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomCumulant {
    pub network: Mlp,
    pub scale: f64,
}

impl RandomCumulant {
    pub fn sample<R: Rng + ?Sized>(input_dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            network: random_scalar_network(input_dim, rng)?,
            scale,
        })
    }

    pub fn potential(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.network.forward(obs)?.column(0).to_owned())
    }

    pub fn eval(&self, x: ArrayView1<f64>, next: ArrayView1<f64>) -> Result<f64> {
        let f = self.potential(x.insert_axis(Axis(0)))?[0];
        let g = self.potential(next.insert_axis(Axis(0)))?[0];
        Ok(self.reward_from_potentials(f, g))
    }

    pub fn reward_from_potentials(&self, current: f64, next: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        self.scale * (next - current)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExplicitSetIndicator {
    pub members: BTreeSet<usize>,
}

impl ExplicitSetIndicator {
    pub fn eval(&self, state: usize) -> bool {
        self.members.contains(&state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IndicatorTask {
    Explicit(ExplicitSetIndicator),
    Hash(HashIndicator),
    Rni(RandomNetworkIndicator),
    Cumulant(RandomCumulant),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Random state subsets of a fixed size.
    Explicit,
    /// One task per state.
    Singletons,
    Hash,
    Rni,
    Cumulant,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Explicit,
        TaskKind::Singletons,
        TaskKind::Hash,
        TaskKind::Rni,
        TaskKind::Cumulant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Explicit => "explicit",
            TaskKind::Singletons => "singletons",
            TaskKind::Hash => "hash",
            TaskKind::Rni => "rni",
            TaskKind::Cumulant => "cumulant",
        }
    }

    pub fn tag(self) -> u8 {
        TaskKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        TaskKind::ALL.get(tag as usize).copied()
    }

    /// Explicit-set tasks need state identities, not just observations.
    pub fn needs_states(self) -> bool {
        matches!(self, TaskKind::Explicit | TaskKind::Singletons)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub obs_dim: usize,
    pub n_states: usize,
    /// Target activation proportion for RNIs; hashes use modulus `round(1/p)`.
    pub proportion: f64,
    pub qr_lr: f64,
    pub cumulant_scale: f64,
    pub explicit_subset_size: usize,
    /// Grouping of tasks into modules. Recorded but has no effect: every
    /// task keeps its own bias.
    pub tasks_per_module: usize,
}

impl TaskConfig {
    pub fn new(obs_dim: usize, n_states: usize) -> Self {
        Self {
            obs_dim,
            n_states,
            proportion: 0.01,
            qr_lr: 0.01,
            cumulant_scale: 1.0,
            explicit_subset_size: 10,
            tasks_per_module: 10,
        }
    }

    pub fn hash_modulus(&self) -> u64 {
        (1.0 / self.proportion).round().max(1.0) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub kind: TaskKind,
    pub tasks: Vec<IndicatorTask>,
}

impl TaskFamily {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Per-task rewards for one transition, given the observation pair, its
    /// state identities when known, and per-task cached network scores of
    /// both observations.
    pub fn reward(&self, task: usize, state: Option<usize>, current_score: f64, next_score: f64) -> Result<f64> {
        Ok(match &self.tasks[task] {
            IndicatorTask::Explicit(e) => {
                let s = state.ok_or_else(|| Error::Precondition("explicit-set task needs state ids".into()))?;
                e.eval(s) as u8 as f64
            }
            IndicatorTask::Hash(_) => current_score,
            IndicatorTask::Rni(r) => (current_score + r.bias() >= 0.0) as u8 as f64,
            IndicatorTask::Cumulant(c) => c.reward_from_potentials(current_score, next_score),
        })
    }

    /// Per-task scalar for each observation row: the hash output in {0, 1},
    /// the raw RNI score, the cumulant potential, or 0 for explicit sets.
    pub fn scores(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((obs.nrows(), self.len()));
        for (j, task) in self.tasks.iter().enumerate() {
            let col = match task {
                IndicatorTask::Explicit(_) => continue,
                IndicatorTask::Hash(h) => obs.rows().into_iter().map(|r| h.eval(r) as u8 as f64).collect(),
                IndicatorTask::Rni(r) => r.raw_scores(obs)?,
                IndicatorTask::Cumulant(c) => c.potential(obs)?,
            };
            out.column_mut(j).assign(&col);
        }
        Ok(out)
    }

    /// Indicator outputs in {0, 1} for each row (cumulant tasks are rejected).
    pub fn activations(&self, obs: ArrayView2<f64>, states: Option<&[usize]>) -> Result<Array2<f64>> {
        let scores = self.scores(obs)?;
        let mut out = Array2::zeros(scores.raw_dim());
        for j in 0..self.len() {
            if matches!(self.tasks[j], IndicatorTask::Cumulant(_)) {
                return Err(Error::Precondition("cumulant tasks have no activation".into()));
            }
            for i in 0..obs.nrows() {
                out[[i, j]] = self.reward(j, states.map(|s| s[i]), scores[[i, j]], 0.0)?;
            }
        }
        Ok(out)
    }

    /// Fraction of rows activating each task.
    pub fn activation_proportions(&self, obs: ArrayView2<f64>, states: Option<&[usize]>) -> Result<Vec<f64>> {
        let act = self.activations(obs, states)?;
        Ok(act.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default())
    }

    pub fn rni_biases(&self) -> Vec<f64> {
        self.tasks
            .iter()
            .filter_map(|t| match t {
                IndicatorTask::Rni(r) => Some(r.bias()),
                _ => None,
            })
            .collect()
    }
}

/// `m` independent tasks of the given kind, deterministic per seed.
pub fn sample_task_family(kind: TaskKind, m: usize, seed: u64, config: &TaskConfig) -> Result<TaskFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(m);
    match kind {
        TaskKind::Singletons => {
            if m != config.n_states {
                return Err(Error::Config(format!(
                    "singleton tasks need one per state ({}), got {m}",
                    config.n_states
                )));
            }
            for s in 0..m {
                tasks.push(IndicatorTask::Explicit(ExplicitSetIndicator {
                    members: BTreeSet::from([s]),
                }));
            }
        }
        TaskKind::Explicit => {
            let k = config.explicit_subset_size;
            if k == 0 || k > config.n_states {
                return Err(Error::Config(format!(
                    "subset size {k} outside 1..={}",
                    config.n_states
                )));
            }
            for _ in 0..m {
                let members = index::sample(&mut rng, config.n_states, k).into_iter().collect();
                tasks.push(IndicatorTask::Explicit(ExplicitSetIndicator { members }));
            }
        }
        TaskKind::Hash => {
            let modulus = config.hash_modulus();
            for _ in 0..m {
                tasks.push(IndicatorTask::Hash(HashIndicator::sample(config.obs_dim, modulus, &mut rng)?));
            }
        }
        TaskKind::Rni => {
            for _ in 0..m {
                tasks.push(IndicatorTask::Rni(RandomNetworkIndicator::sample(
                    config.obs_dim,
                    config.proportion,
                    config.qr_lr,
                    &mut rng,
                )?));
            }
        }
        TaskKind::Cumulant => {
            for _ in 0..m {
                tasks.push(IndicatorTask::Cumulant(RandomCumulant::sample(
                    config.obs_dim,
                    config.cumulant_scale,
                    &mut rng,
                )?));
            }
        }
    }
    Ok(TaskFamily { kind, tasks })
}

/// Runs `steps` quantile updates on every RNI task, each on a batch of
/// `batch` rows drawn uniformly with replacement from `scores` (the cached
/// raw scores of a fixed observation set, one column per task).
pub fn quantile_burn_in<R: Rng + ?Sized>(
    family: &mut TaskFamily,
    scores: &Array2<f64>,
    steps: usize,
    batch: usize,
    rng: &mut R,
) {
    let n = scores.nrows();
    if n == 0 || batch == 0 {
        return;
    }
    let mut buf = vec![0.0; batch];
    for _ in 0..steps {
        let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        for (j, task) in family.tasks.iter_mut().enumerate() {
            if let IndicatorTask::Rni(r) = task {
                for (b, &i) in buf.iter_mut().zip(&rows) {
                    *b = scores[[i, j]];
                }
                r.quantile.update(&buf);
            }
        }
    }
}
