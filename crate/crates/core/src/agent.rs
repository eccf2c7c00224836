//! Online control on top of a frozen encoder: a linear Q head trained by
//! DQN-style updates from a replay buffer, and the evaluation protocol.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{value_iteration, Environment};
use crate::nn::{Activation, AdamConfig, AdamState, Dense, Encoder, Gradients, Mlp};
use crate::store::hex;

/// `Q(x, .) = W phi(x) + bias`, stored as a single identity layer so the
/// generic optimiser and Polyak code apply unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearQHead {
    pub net: Mlp,
}

impl LinearQHead {
    pub fn zeros(feature_dim: usize, n_actions: usize) -> Self {
        Self {
            net: Mlp {
                layers: vec![Dense::zeros(feature_dim, n_actions, Activation::Identity)],
            },
        }
    }

    /// Builds a head from an `actions x features` weight matrix.
    pub fn from_parts(weights: &Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape("bias length differs from action count".into()));
        }
        Ok(Self {
            net: Mlp {
                layers: vec![Dense {
                    weight: weights.t().to_owned(),
                    bias,
                    activation: Activation::Identity,
                }],
            },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    /// `actions x features`.
    pub fn weights(&self) -> Array2<f64> {
        self.net.layers[0].weight.t().to_owned()
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.net.layers[0].bias
    }

    pub fn q_values(&self, phi: ArrayView1<f64>) -> Array1<f64> {
        let layer = &self.net.layers[0];
        phi.dot(&layer.weight) + &layer.bias
    }

    /// `batch x actions`.
    pub fn q_batch(&self, phi: ArrayView2<f64>) -> Array2<f64> {
        let layer = &self.net.layers[0];
        phi.dot(&layer.weight) + &layer.bias
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy(q: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (a, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = a;
        }
    }
    best
}

/// Epsilon-greedy action selection.
pub fn act<R: Rng + ?Sized>(q: ArrayView1<f64>, epsilon: f64, rng: &mut R) -> usize {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        greedy(q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions, keyed by state id because features
/// of a frozen encoder are a pure function of the state.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Overwrites the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Transition> {
        self.sample_indices(batch, rng).into_iter().map(|i| self.items[i]).collect()
    }
}

/// A replay batch expanded into feature rows.
#[derive(Clone, Debug)]
pub struct DqnBatch {
    pub features: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_features: Array2<f64>,
    pub terminals: Vec<bool>,
}

impl DqnBatch {
    pub fn from_transitions(table: &Array2<f64>, batch: &[Transition]) -> Self {
        let d = table.ncols();
        let mut features = Array2::zeros((batch.len(), d));
        let mut next_features = Array2::zeros((batch.len(), d));
        for (i, t) in batch.iter().enumerate() {
            features.row_mut(i).assign(&table.row(t.state));
            next_features.row_mut(i).assign(&table.row(t.next_state));
        }
        Self {
            features,
            actions: batch.iter().map(|t| t.action).collect(),
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_features,
            terminals: batch.iter().map(|t| t.terminal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Mean squared TD error against `r + gamma * max_a' Q_target(x', a')` and
/// its gradient with respect to the online head.
pub fn dqn_loss(head: &LinearQHead, target: &LinearQHead, batch: &DqnBatch, gamma: f64) -> Result<(f64, Gradients)> {
    let n = batch.len();
    if n == 0 {
        return Ok((0.0, Gradients::zeros_like(&head.net)));
    }
    let cache = head.net.forward_cached(batch.features.view())?;
    let next_q = target.q_batch(batch.next_features.view());
    let q = cache.output();
    let mut delta = Array2::zeros(q.dim());
    let mut loss = 0.0;
    for i in 0..n {
        let bootstrap = if batch.terminals[i] {
            0.0
        } else {
            next_q.row(i).fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        };
        let y = batch.rewards[i] + gamma * bootstrap;
        let err = q[[i, batch.actions[i]]] - y;
        loss += err * err / n as f64;
        delta[[i, batch.actions[i]]] = 2.0 * err / n as f64;
    }
    let grads = head.net.backward(&cache, &delta)?;
    Ok((loss, grads))
}

/// One clipped Adam step on the head. Returns the pre-update loss.
pub fn dqn_update(
    head: &mut LinearQHead,
    target: &LinearQHead,
    adam: &mut AdamState,
    batch: &DqnBatch,
    gamma: f64,
    max_grad_norm: f64,
) -> Result<f64> {
    let (loss, mut grads) = dqn_loss(head, target, batch, gamma)?;
    if max_grad_norm > 0.0 {
        grads.clip_global_norm(max_grad_norm);
    }
    adam.step(&mut head.net, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub agent_steps: u64,
    pub replay_capacity: usize,
    pub min_replay: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    /// Polyak coefficient of the target head; 0 bootstraps from the live head.
    pub tau: f64,
    pub use_target_head: bool,
    pub epsilon_start: f64,
    pub epsilon_train: f64,
    /// Agent steps over which exploration decays linearly to `epsilon_train`.
    pub epsilon_decay_steps: u64,
    pub epsilon_eval: f64,
    pub eval_episodes: usize,
    pub episode_cap: usize,
    pub log_interval: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            agent_steps: 100_000,
            replay_capacity: 50_000,
            min_replay: 1_000,
            batch_size: 32,
            gamma: 0.99,
            learning_rate: 6.25e-5,
            adam_eps: 1.5e-4,
            max_grad_norm: 10.0,
            tau: 0.99,
            use_target_head: true,
            epsilon_start: 1.0,
            epsilon_train: 0.01,
            epsilon_decay_steps: 10_000,
            epsilon_eval: 0.001,
            eval_episodes: 100,
            episode_cap: 500,
            log_interval: 1_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return bad("replay capacity and batch size must be positive");
        }
        if self.min_replay > self.replay_capacity {
            return bad("min_replay exceeds replay capacity");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        for eps in [self.epsilon_start, self.epsilon_train, self.epsilon_eval] {
            if !(0.0..=1.0).contains(&eps) {
                return bad("exploration rates must lie in [0, 1]");
            }
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate and adam eps must be positive");
        }
        if self.episode_cap == 0 || self.log_interval == 0 {
            return bad("episode cap and log interval must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }

    /// Exploration rate used at agent step `step` (1-based).
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_train;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_train - self.epsilon_start)
    }
}

/// Outcome of the evaluation episodes. Returns are discounted; the optimal
/// baseline is the value-iteration value of the same start states.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub start_states: Vec<usize>,
    pub mean_return: f64,
    pub optimal_mean_return: Option<f64>,
}

impl EvalReport {
    /// Mean return as a fraction of the optimal mean over the same starts.
    pub fn optimality_ratio(&self) -> Option<f64> {
        self.optimal_mean_return
            .filter(|&o| o > 0.0)
            .map(|o| self.mean_return / o)
    }

    pub fn csv_header() -> &'static str {
        "episodes,epsilon,gamma,mean_return,optimal_mean_return,optimality_ratio,mean_length"
    }

    pub fn csv_row(&self) -> String {
        let mean_len = if self.lengths.is_empty() {
            0.0
        } else {
            self.lengths.iter().sum::<usize>() as f64 / self.lengths.len() as f64
        };
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.12e}"));
        format!(
            "{},{},{},{:.12e},{},{},{}",
            self.episodes,
            self.epsilon,
            self.gamma,
            self.mean_return,
            opt(self.optimal_mean_return),
            opt(self.optimality_ratio()),
            mean_len
        )
    }

    pub fn write_episodes_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "episode,start_state,length,return")?;
        for i in 0..self.returns.len() {
            writeln!(
                out,
                "{},{},{},{:.12e}",
                i, self.start_states[i], self.lengths[i], self.returns[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineLogRecord {
    pub step: u64,
    pub epsilon: f64,
    /// Mean TD loss over the interval's updates, NaN before learning starts.
    pub mean_loss: f64,
    pub episodes_completed: u64,
    /// Mean undiscounted return of episodes finished in the interval.
    pub mean_episode_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OnlineLog {
    pub records: Vec<OnlineLogRecord>,
}

impl OnlineLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,epsilon,mean_loss,episodes_completed,mean_episode_return")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:e},{},{}",
                r.step, r.epsilon, r.mean_loss, r.episodes_completed, r.mean_episode_return
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OnlineOutput {
    pub head: LinearQHead,
    pub report: EvalReport,
    pub log: OnlineLog,
}

/// Features of every environment state under the frozen encoder.
pub fn feature_table(env: &Environment, encoder: &Encoder) -> Result<Array2<f64>> {
    if encoder.net.input_dim() != env.obs_dim() {
        return Err(Error::Config(format!(
            "encoder expects observations of dim {}, environment produces {}",
            encoder.net.input_dim(),
            env.obs_dim()
        )));
    }
    encoder.features(env.observation_table().view())
}

/// Runs `episodes` episodes from uniformly drawn start states.
pub fn evaluate<R: Rng + ?Sized>(
    env: &Environment,
    features: &Array2<f64>,
    head: &LinearQHead,
    episodes: usize,
    epsilon: f64,
    episode_cap: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<EvalReport> {
    let mdp = env.mdp();
    let starts = mdp.start_states();
    if starts.is_empty() && episodes > 0 {
        return Err(Error::Precondition("no non-terminal start states".into()));
    }
    let optimal = match mdp.reward() {
        Some(_) => Some(value_iteration(&mdp.with_gamma(gamma)?, 1e-12)?.0),
        None => None,
    };
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = Vec::with_capacity(episodes);
    let mut start_states = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s0 = starts[rng.random_range(0..starts.len())];
        let (mut state, mut ret, mut discount, mut len) = (s0, 0.0, 1.0, 0);
        while len < episode_cap {
            let a = act(head.q_values(features.row(state)).view(), epsilon, rng);
            let next = mdp.sample_next(state, a, rng);
            ret += discount * mdp.reward().map_or(0.0, |r| r[next]);
            discount *= gamma;
            len += 1;
            state = next;
            if mdp.is_terminal(next) {
                break;
            }
        }
        returns.push(ret);
        lengths.push(len);
        start_states.push(s0);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let optimal_mean_return = optimal.map(|v| mean(&start_states.iter().map(|&s| v[s]).collect::<Vec<_>>()));
    Ok(EvalReport {
        episodes,
        epsilon,
        gamma,
        mean_return: mean(&returns),
        returns,
        lengths,
        start_states,
        optimal_mean_return,
    })
}

/// States visited by the greedy policy from `start`, including the final
/// state, capped at `cap` transitions.
pub fn greedy_trajectory(env: &Environment, features: &Array2<f64>, head: &LinearQHead, start: usize, cap: usize) -> Vec<usize> {
    let mdp = env.mdp();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut states = vec![start];
    let mut state = start;
    for _ in 0..cap {
        if mdp.is_terminal(state) {
            break;
        }
        let a = greedy(head.q_values(features.row(state)).view());
        state = mdp.sample_next(state, a, &mut rng);
        states.push(state);
    }
    states
}

/// Trains a linear head on frozen encoder features. When
/// `expected_checksum` is given the encoder must match it; in all cases the
/// encoder checksum is re-verified after training.
pub fn online_train(
    env: &Environment,
    encoder: &Encoder,
    expected_checksum: Option<[u8; 32]>,
    config: &AgentConfig,
    seed: u64,
) -> Result<OnlineOutput> {
    config.validate()?;
    let before = encoder.net.checksum();
    if let Some(expected) = expected_checksum {
        if expected != before {
            return Err(Error::Config(format!(
                "encoder checksum {} does not match expected {}",
                hex(&before),
                hex(&expected)
            )));
        }
    }
    let features = feature_table(env, encoder)?;
    let mdp = env.mdp();
    let starts = mdp.start_states();
    if starts.is_empty() {
        return Err(Error::Precondition("no non-terminal start states".into()));
    }
    let reward = |x: usize| mdp.reward().map_or(0.0, |r| r[x]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = LinearQHead::zeros(features.ncols(), env.n_actions());
    let mut target = head.clone();
    let mut adam = AdamState::new(&head.net, config.adam());
    let mut replay = ReplayBuffer::new(config.replay_capacity)?;
    let mut log = OnlineLog::default();

    let mut state = starts[rng.random_range(0..starts.len())];
    let (mut t, mut ep_return, mut episodes) = (0usize, 0.0, 0u64);
    let (mut loss_sum, mut loss_count) = (0.0, 0u64);
    let (mut ret_sum, mut ret_count) = (0.0, 0u64);

    for step in 1..=config.agent_steps {
        let epsilon = config.epsilon_at(step);
        let a = act(head.q_values(features.row(state)).view(), epsilon, &mut rng);
        let next = mdp.sample_next(state, a, &mut rng);
        let r = reward(next);
        let done = mdp.is_terminal(next);
        replay.push(Transition {
            state,
            action: a,
            reward: r,
            next_state: next,
            terminal: done,
        });
        ep_return += r;
        t += 1;
        if done || t >= config.episode_cap {
            episodes += 1;
            ret_sum += ep_return;
            ret_count += 1;
            ep_return = 0.0;
            t = 0;
            state = starts[rng.random_range(0..starts.len())];
        } else {
            state = next;
        }

        if replay.len() >= config.min_replay.max(1) {
            let batch = DqnBatch::from_transitions(&features, &replay.sample(config.batch_size, &mut rng));
            let updated = if config.use_target_head {
                dqn_update(&mut head, &target, &mut adam, &batch, config.gamma, config.max_grad_norm)
            } else {
                let live = head.clone();
                dqn_update(&mut head, &live, &mut adam, &batch, config.gamma, config.max_grad_norm)
            };
            let loss = match updated {
                Ok(l) => l,
                Err(Error::NonFiniteGradient { .. }) | Err(Error::NonFiniteParameter { .. }) => {
                    return Err(Error::Numerical(format!("online head diverged at step {step}")))
                }
                Err(e) => return Err(e),
            };
            if config.use_target_head {
                target.net.polyak_update(&head.net, config.tau)?;
            }
            loss_sum += loss;
            loss_count += 1;
        }

        if step % config.log_interval == 0 || step == config.agent_steps {
            log.records.push(OnlineLogRecord {
                step,
                epsilon,
                mean_loss: if loss_count == 0 { f64::NAN } else { loss_sum / loss_count as f64 },
                episodes_completed: episodes,
                mean_episode_return: if ret_count == 0 { f64::NAN } else { ret_sum / ret_count as f64 },
            });
            (loss_sum, loss_count, ret_sum, ret_count) = (0.0, 0, 0.0, 0);
        }
    }

    // Evaluation draws from its own stream so it does not depend on how many
    // training steps consumed the main one.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(1);
    let report = evaluate(
        env,
        &features,
        &head,
        config.eval_episodes,
        config.epsilon_eval,
        config.episode_cap,
        config.gamma,
        &mut eval_rng,
    )?;

    if encoder.net.checksum() != before {
        return Err(Error::Numerical("encoder parameters changed during online training".into()));
    }
    Ok(OnlineOutput { head, report, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{FourRoomsConfig, ObservationEncoding};
    use crate::nn::EncoderConfig;
    use ndarray::array;

    fn goal_env(encoding: ObservationEncoding) -> Environment {
        Environment::four_rooms_goal(&FourRoomsConfig::default(), (9, 9), 0.99, encoding).unwrap()
    }

    fn random_head(d: usize, a: usize, seed: u64) -> LinearQHead {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((a, d), |_| r.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(a, |_| r.random_range(-1.0..1.0));
        LinearQHead::from_parts(&w, b).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy(array![1.0, 3.0, 2.0].view()), 1);
        assert_eq!(greedy(array![5.0, 5.0].view()), 0);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(array![1.0, 3.0, 2.0].view(), 0.0, &mut r), 1);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let q = array![0.0, 10.0, 0.0, 0.0];
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[act(q.view(), 1.0, &mut r)] += 1;
        }
        let (p, nf) = (0.25, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - nf * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let q = Array1::from_shape_fn(5, |_| (r.random_range(-3..3)) as f64);
            let c = r.random_range(0.01..100.0);
            assert_eq!(greedy(q.view()), greedy((&q * c).view()));
        }
    }

    #[test]
    fn q_values_are_affine_in_features() {
        let head = random_head(6, 4, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let phi = Array1::from_shape_fn(6, |_| r.random_range(-2.0..2.0));
        let (w, b) = (head.weights(), head.bias().clone());
        let q = head.q_values(phi.view());
        for a in 0..4 {
            let mut manual = b[a];
            for k in 0..6 {
                manual += w[[a, k]] * phi[k];
            }
            assert!((q[a] - manual).abs() <= 1e-14);
        }
    }

    #[test]
    fn replay_ring_never_exceeds_capacity() {
        let mut buf = ReplayBuffer::new(5).unwrap();
        for i in 0..12 {
            buf.push(Transition {
                state: i,
                action: 0,
                reward: 0.0,
                next_state: i,
                terminal: false,
            });
            assert!(buf.len() <= 5);
        }
        let mut held: Vec<usize> = (0..5).map(|i| buf.get(i).unwrap().state).collect();
        held.sort();
        assert_eq!(held, vec![7, 8, 9, 10, 11]);
    }

    #[test]
    fn replay_sampling_passes_chi_square() {
        let k = 50;
        let mut buf = ReplayBuffer::new(k).unwrap();
        for i in 0..k {
            buf.push(Transition {
                state: i,
                action: 0,
                reward: 0.0,
                next_state: i,
                terminal: false,
            });
        }
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let draws = 50_000;
        let mut counts = vec![0usize; k];
        for i in buf.sample_indices(draws, &mut r) {
            counts[i] += 1;
        }
        let expected = draws as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 49 degrees of freedom
        assert!(chi2 < 74.92, "chi2 = {chi2}");
    }

    fn random_batch(n: usize, d: usize, a: usize, seed: u64) -> DqnBatch {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DqnBatch {
            features: Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0)),
            actions: (0..n).map(|_| r.random_range(0..a)).collect(),
            rewards: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
            next_features: Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0)),
            terminals: (0..n).map(|_| r.random_bool(0.2)).collect(),
        }
    }

    #[test]
    fn dqn_gradient_matches_finite_differences() {
        let head = random_head(5, 3, 3);
        let target = random_head(5, 3, 4);
        let batch = random_batch(16, 5, 3, 5);
        let (_, grads) = dqn_loss(&head, &target, &batch, 0.9).unwrap();
        let flat = head.net.flatten();
        let mut analytic = Vec::new();
        for (gw, gb) in &grads.layers {
            analytic.extend(gw.iter().copied());
            analytic.extend(gb.iter().copied());
        }
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut probe = head.clone();
            let mut p = flat.clone();
            p[i] += h;
            probe.net.assign_flat(&p).unwrap();
            let up = dqn_loss(&probe, &target, &batch, 0.9).unwrap().0;
            p[i] -= 2.0 * h;
            probe.net.assign_flat(&p).unwrap();
            let down = dqn_loss(&probe, &target, &batch, 0.9).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-8);
            assert!(rel <= 1e-6, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn zero_gamma_fixed_point_is_least_squares() {
        // One action, features with a constant column: the head converges to
        // the normal-equations solution of r on phi.
        let (n, d) = (40, 3);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let features = Array2::from_shape_fn((n, d), |(_, k)| if k == 0 { 1.0 } else { r.random_range(-1.0..1.0) });
        let rewards: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = DqnBatch {
            features: features.clone(),
            actions: vec![0; n],
            rewards: rewards.clone(),
            next_features: features.clone(),
            terminals: vec![false; n],
        };
        // bias is redundant with the constant column; compare predictions
        let y = Array1::from(rewards);
        let xtx = features.t().dot(&features);
        let xty = features.t().dot(&y);
        let coef = crate::linalg::solve(&xtx, &xty.insert_axis(ndarray::Axis(1))).unwrap();
        let fitted = features.dot(&coef.column(0));

        let mut head = LinearQHead::zeros(d, 1);
        let target = head.clone();
        let mut adam = AdamState::new(
            &head.net,
            AdamConfig {
                lr: 1e-2,
                eps: 1e-12,
                ..AdamConfig::default()
            },
        );
        for _ in 0..20_000 {
            dqn_update(&mut head, &target, &mut adam, &batch, 0.0, 0.0).unwrap();
        }
        let pred = head.q_batch(features.view()).column(0).to_owned();
        let gap = (&pred - &fitted).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn zero_reward_keeps_zero_head() {
        let mut batch = random_batch(32, 4, 4, 11);
        batch.rewards.iter_mut().for_each(|r| *r = 0.0);
        let mut head = LinearQHead::zeros(4, 4);
        let target = head.clone();
        let mut adam = AdamState::new(&head.net, AdamConfig::default());
        for _ in 0..50 {
            let loss = dqn_update(&mut head, &target, &mut adam, &batch, 0.99, 10.0).unwrap();
            assert_eq!(loss, 0.0);
        }
        assert!(head.net.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_steps_still_evaluates() {
        let env = goal_env(ObservationEncoding::OneHot);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::linear(), env.obs_dim(), 1, 4, &mut r).unwrap();
        let cfg = AgentConfig {
            agent_steps: 0,
            eval_episodes: 7,
            ..AgentConfig::default()
        };
        let out = online_train(&env, &enc, None, &cfg, 1).unwrap();
        assert_eq!(out.head, LinearQHead::zeros(env.obs_dim(), 4));
        assert_eq!(out.report.episodes, 7);
        assert_eq!(out.report.returns.len(), 7);
        assert!(out.report.returns.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn reward_free_environment_returns_zero() {
        let env = Environment::four_rooms(&FourRoomsConfig::default(), 0.99, ObservationEncoding::Coordinates).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::default(), env.obs_dim(), 2, 4, &mut r).unwrap();
        let cfg = AgentConfig {
            agent_steps: 2_000,
            min_replay: 100,
            eval_episodes: 5,
            episode_cap: 50,
            ..AgentConfig::default()
        };
        let out = online_train(&env, &enc, None, &cfg, 2).unwrap();
        assert_eq!(out.report.mean_return, 0.0);
        assert!(out.head.net.flatten().iter().all(|&v| v == 0.0));
        assert!(out.report.optimal_mean_return.is_none());
    }

    #[test]
    fn observation_mismatch_is_config_error() {
        let env = goal_env(ObservationEncoding::Coordinates);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::default(), 5, 2, 4, &mut r).unwrap();
        let err = online_train(&env, &enc, None, &AgentConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_refused() {
        let env = goal_env(ObservationEncoding::Coordinates);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::default(), 2, 2, 4, &mut r).unwrap();
        let err = online_train(&env, &enc, Some([0u8; 32]), &AgentConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn online_training_is_deterministic_and_leaves_encoder_alone() {
        let env = goal_env(ObservationEncoding::Coordinates);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(&EncoderConfig::default(), 2, 2, 4, &mut r).unwrap();
        let sum = enc.net.checksum();
        let cfg = AgentConfig {
            agent_steps: 3_000,
            min_replay: 200,
            eval_episodes: 10,
            ..AgentConfig::default()
        };
        let a = online_train(&env, &enc, Some(sum), &cfg, 9).unwrap();
        let b = online_train(&env, &enc, Some(sum), &cfg, 9).unwrap();
        assert_eq!(a.head, b.head);
        assert_eq!(a.report, b.report);
        assert_eq!(enc.net.checksum(), sum);
    }

    #[test]
    fn tabular_features_solve_the_goal_task() {
        // One-hot features make the head a Q table.
        let env = goal_env(ObservationEncoding::OneHot);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&EncoderConfig::linear(), env.obs_dim(), 1, 4, &mut r).unwrap();
        let out = online_train(&env, &enc, None, &AgentConfig::default(), 3).unwrap();
        let ratio = out.report.optimality_ratio().unwrap();
        assert!(ratio > 0.9, "ratio {ratio}");
    }

    #[test]
    fn epsilon_schedule_decays_linearly() {
        let cfg = AgentConfig {
            epsilon_start: 1.0,
            epsilon_train: 0.0,
            epsilon_decay_steps: 100,
            ..AgentConfig::default()
        };
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(50) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(100), 0.0);
        assert_eq!(cfg.epsilon_at(1_000), 0.0);
    }
}
