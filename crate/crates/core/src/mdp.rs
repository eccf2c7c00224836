//! Finite MDPs, policies, gridworlds and simulation.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite MDP with transition tensor `P[a][x][x']`.
///
/// Rewards are paid on arrival: a transition into `x'` earns `reward[x']`.
/// Entering a terminal state ends the episode.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    transition: Array3<f64>,
    reward: Option<Array1<f64>>,
    terminal: Vec<bool>,
    gamma: f64,
    successors: Vec<Vec<(usize, f64)>>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Option<Array1<f64>>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let (n_actions, n, n2) = transition.dim();
        if n == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if n != n2 {
            return Err(Error::InvalidMdp(format!("transition slices are {n}x{n2}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside [0, 1)")));
        }
        if terminal.len() != n {
            return Err(Error::InvalidMdp("terminal mask length".into()));
        }
        if let Some(r) = &reward {
            if r.len() != n {
                return Err(Error::InvalidMdp("reward length".into()));
            }
        }
        let mut successors = Vec::with_capacity(n_actions * n);
        for a in 0..n_actions {
            for x in 0..n {
                let row = transition.index_axis(Axis(0), a);
                let row = row.row(x);
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(Error::InvalidMdp(format!(
                        "negative or non-finite probability at (a={a}, x={x})"
                    )));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "row (a={a}, x={x}) sums to {sum}"
                    )));
                }
                successors.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(y, &p)| (y, p))
                        .collect(),
                );
            }
        }
        Ok(Self {
            transition,
            reward,
            terminal,
            gamma,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.dim().1
    }

    pub fn n_actions(&self) -> usize {
        self.transition.dim().0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.reward.clone(),
            self.terminal.clone(),
            gamma,
        )
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// `P[a]` as an `n x n` matrix.
    pub fn action_matrix(&self, a: usize) -> Array2<f64> {
        self.transition.index_axis(Axis(0), a).to_owned()
    }

    pub fn reward(&self) -> Option<&Array1<f64>> {
        self.reward.as_ref()
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal[x]
    }

    /// Nonzero successors of `(x, a)` with their probabilities.
    pub fn successors(&self, x: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[a * self.n_states() + x]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: usize, a: usize, rng: &mut R) -> usize {
        let succ = self.successors(x, a);
        if succ.len() == 1 {
            return succ[0].0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(y, p) in succ {
            acc += p;
            if u < acc {
                return y;
            }
        }
        succ.last().expect("rows are stochastic").0
    }

    /// Non-terminal states; the default start-state support.
    pub fn start_states(&self) -> Vec<usize> {
        (0..self.n_states()).filter(|&x| !self.terminal[x]).collect()
    }
}

/// Stochastic policy `pi[x][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (x, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Precondition(format!("negative probability in row {x}")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Precondition(format!("policy row {x} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        let row = self.probs.row(x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        row.len() - 1
    }
}

/// `P^pi[x][x'] = sum_a pi[x][a] P[a][x][x']`.
pub fn induced_transition(mdp: &TabularMdp, policy: &Policy) -> Result<Array2<f64>> {
    let (n, na) = policy.probs.dim();
    if n != mdp.n_states() || na != mdp.n_actions() {
        return Err(Error::Shape(format!(
            "policy is {n}x{na}, MDP has {} states and {} actions",
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let mut p = Array2::zeros((n, n));
    for a in 0..na {
        let pa = mdp.transition.index_axis(Axis(0), a);
        for x in 0..n {
            let w = policy.probs[[x, a]];
            if w != 0.0 {
                p.row_mut(x).scaled_add(w, &pa.row(x));
            }
        }
    }
    Ok(p)
}

/// True when the directed graph of positive entries forms one communicating
/// class.
pub fn is_irreducible(p: &Array2<f64>) -> bool {
    let n = p.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(x) = queue.pop_front() {
            for y in 0..n {
                let w = if forward { p[[x, y]] } else { p[[y, x]] };
                if w > 0.0 && !seen[y] {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

/// Stationary distribution by power iteration on `mu P`.
pub fn stationary_distribution(p: &Array2<f64>) -> Result<Array1<f64>> {
    let n = p.nrows();
    let mut mu = Array1::from_elem(n, 1.0 / n as f64);
    // lazy chain avoids periodic oscillation
    let lazy = (p + &Array2::<f64>::eye(n)) * 0.5;
    for _ in 0..1_000_000 {
        let next = mu.dot(&lazy);
        let diff = (&next - &mu).iter().map(|d| d.abs()).sum::<f64>();
        mu = next;
        if diff < 1e-15 {
            return Ok(mu);
        }
    }
    Err(Error::Numerical("power iteration did not converge".into()))
}

/// Movement actions on a grid: 0 up, 1 right, 2 down, 3 left.
pub const GRID_ACTIONS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// A rectangular grid of open cells and walls. States are the open cells
/// reachable from the first open cell, numbered in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    height: usize,
    width: usize,
    cells: Vec<(usize, usize)>,
    index: Vec<Option<usize>>,
}

impl GridWorld {
    /// `open[r * width + c]` marks free cells. All free cells must be
    /// mutually reachable.
    pub fn from_mask(height: usize, width: usize, open: &[bool]) -> Result<Self> {
        if open.len() != height * width {
            return Err(Error::Construction("mask size".into()));
        }
        let Some(first) = open.iter().position(|&o| o) else {
            return Err(Error::Construction("grid has no open cells".into()));
        };
        let mut seen = vec![false; open.len()];
        let mut queue = VecDeque::from([first]);
        seen[first] = true;
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            for (dr, dc) in GRID_ACTIONS {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if open[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let unreachable = open.iter().zip(&seen).filter(|(&o, &s)| o && !s).count();
        if unreachable > 0 {
            return Err(Error::Construction(format!(
                "layout is disconnected: {unreachable} open cells unreachable"
            )));
        }
        let mut cells = Vec::new();
        let mut index = vec![None; open.len()];
        for (i, &o) in open.iter().enumerate() {
            if o {
                index[i] = Some(cells.len());
                cells.push((i / width, i % width));
            }
        }
        Ok(Self {
            height,
            width,
            cells,
            index,
        })
    }

    /// Parses `#` as wall and anything else as open. Rows must have equal
    /// length.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if rows.iter().any(|r| r.chars().count() != width) {
            return Err(Error::Construction("ragged ascii grid".into()));
        }
        let open: Vec<bool> = rows.iter().flat_map(|r| r.chars().map(|ch| ch != '#')).collect();
        Self::from_mask(rows.len(), width, &open)
    }

    pub fn four_rooms(config: &FourRoomsConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = (config.height, config.width);
        let mut open = vec![true; h * w];
        for r in 0..h {
            open[r * w + config.wall_col] = false;
        }
        for c in 0..config.wall_col {
            open[config.left_wall_row * w + c] = false;
        }
        for c in (config.wall_col + 1)..w {
            open[config.right_wall_row * w + c] = false;
        }
        for &(r, c) in &config.doors() {
            open[r * w + c] = true;
        }
        Self::from_mask(h, w, &open)
    }

    pub fn n_states(&self) -> usize {
        self.cells.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell(&self, state: usize) -> (usize, usize) {
        self.cells[state]
    }

    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.height || col >= self.width {
            return None;
        }
        self.index[row * self.width + col]
    }

    /// Deterministic move; bumping into a wall or the border stays put.
    pub fn step(&self, state: usize, action: usize) -> usize {
        let (r, c) = self.cells[state];
        let (dr, dc) = GRID_ACTIONS[action];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 {
            return state;
        }
        self.state_at(nr as usize, nc as usize).unwrap_or(state)
    }

    /// Builds the MDP. `goal`, when given, is terminal and pays +1 on entry.
    pub fn to_mdp(&self, gamma: f64, goal: Option<usize>) -> Result<TabularMdp> {
        let n = self.n_states();
        let mut p = Array3::zeros((4, n, n));
        for a in 0..4 {
            for x in 0..n {
                p[[a, x, self.step(x, a)]] = 1.0;
            }
        }
        let mut terminal = vec![false; n];
        let reward = goal.map(|g| {
            terminal[g] = true;
            let mut r = Array1::zeros(n);
            r[g] = 1.0;
            r
        });
        TabularMdp::new(p, reward, terminal, gamma)
    }
}

/// Layout of a four-room grid: one vertical wall and two horizontal wall
/// segments, each pierced by a door.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourRoomsConfig {
    pub height: usize,
    pub width: usize,
    pub wall_col: usize,
    pub left_wall_row: usize,
    pub right_wall_row: usize,
    /// Row of the door through the vertical wall in the upper half.
    pub upper_door_row: usize,
    /// Row of the door through the vertical wall in the lower half.
    pub lower_door_row: usize,
    /// Column of the door through the left horizontal wall.
    pub left_door_col: usize,
    /// Column of the door through the right horizontal wall.
    pub right_door_col: usize,
}

impl Default for FourRoomsConfig {
    /// The classic 11x11 interior with 104 free cells.
    fn default() -> Self {
        Self {
            height: 11,
            width: 11,
            wall_col: 5,
            left_wall_row: 5,
            right_wall_row: 6,
            upper_door_row: 2,
            lower_door_row: 9,
            left_door_col: 1,
            right_door_col: 8,
        }
    }
}

impl FourRoomsConfig {
    fn doors(&self) -> [(usize, usize); 4] {
        [
            (self.upper_door_row, self.wall_col),
            (self.lower_door_row, self.wall_col),
            (self.left_wall_row, self.left_door_col),
            (self.right_wall_row, self.right_door_col),
        ]
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Construction(msg));
        if self.height < 5 || self.width < 5 {
            return bad(format!("grid {}x{} smaller than 5x5", self.height, self.width));
        }
        if self.wall_col == 0 || self.wall_col + 1 >= self.width {
            return bad("vertical wall must leave room on both sides".into());
        }
        for row in [self.left_wall_row, self.right_wall_row] {
            if row == 0 || row + 1 >= self.height {
                return bad("horizontal walls must leave room above and below".into());
            }
        }
        if self.left_door_col >= self.wall_col {
            return bad(format!("left door column {} is not on the left wall", self.left_door_col));
        }
        if self.right_door_col <= self.wall_col || self.right_door_col >= self.width {
            return bad(format!(
                "right door column {} is not on the right wall",
                self.right_door_col
            ));
        }
        if self.upper_door_row >= self.height || self.lower_door_row >= self.height {
            return bad("door row outside the grid".into());
        }
        Ok(())
    }
}

/// How tabular states are presented to networks and hashes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationEncoding {
    OneHot,
    /// `(row / (h-1), col / (w-1))`, both in `[0, 1]`.
    Coordinates,
}

impl FromStr for ObservationEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" => Ok(Self::OneHot),
            "coordinates" => Ok(Self::Coordinates),
            other => Err(Error::Config(format!("unknown observation encoding '{other}'"))),
        }
    }
}

impl fmt::Display for ObservationEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneHot => "one-hot",
            Self::Coordinates => "coordinates",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub state_id: usize,
    pub features: Vec<f64>,
}

/// An MDP together with its observation function.
#[derive(Clone, Debug)]
pub struct Environment {
    mdp: TabularMdp,
    encoding: ObservationEncoding,
    table: Array2<f64>,
    lookup: HashMap<Vec<u64>, usize>,
    grid: Option<GridWorld>,
}

impl Environment {
    pub fn new(mdp: TabularMdp, encoding: ObservationEncoding, grid: Option<GridWorld>) -> Result<Self> {
        let n = mdp.n_states();
        let table = match encoding {
            ObservationEncoding::OneHot => Array2::<f64>::eye(n),
            ObservationEncoding::Coordinates => {
                let grid = grid.as_ref().ok_or_else(|| {
                    Error::Config("coordinate encoding needs a grid layout".into())
                })?;
                let (h, w) = (grid.height().max(2) - 1, grid.width().max(2) - 1);
                Array2::from_shape_fn((n, 2), |(x, k)| {
                    let (r, c) = grid.cell(x);
                    if k == 0 {
                        r as f64 / h as f64
                    } else {
                        c as f64 / w as f64
                    }
                })
            }
        };
        let mut lookup = HashMap::with_capacity(n);
        for (x, row) in table.rows().into_iter().enumerate() {
            if lookup.insert(row.iter().map(|v| v.to_bits()).collect(), x).is_some() {
                return Err(Error::Construction("observation encoding is not injective".into()));
            }
        }
        Ok(Self {
            mdp,
            encoding,
            table,
            lookup,
            grid,
        })
    }

    /// Reward-free Four Rooms.
    pub fn four_rooms(config: &FourRoomsConfig, gamma: f64, encoding: ObservationEncoding) -> Result<Self> {
        let grid = GridWorld::four_rooms(config)?;
        let mdp = grid.to_mdp(gamma, None)?;
        Self::new(mdp, encoding, Some(grid))
    }

    /// Four Rooms with a terminal +1 goal at `goal` (row, col).
    pub fn four_rooms_goal(
        config: &FourRoomsConfig,
        goal: (usize, usize),
        gamma: f64,
        encoding: ObservationEncoding,
    ) -> Result<Self> {
        let grid = GridWorld::four_rooms(config)?;
        let g = grid
            .state_at(goal.0, goal.1)
            .ok_or_else(|| Error::Config(format!("goal {goal:?} is not a free cell")))?;
        let mdp = grid.to_mdp(gamma, Some(g))?;
        Self::new(mdp, encoding, Some(grid))
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn grid(&self) -> Option<&GridWorld> {
        self.grid.as_ref()
    }

    pub fn encoding(&self) -> ObservationEncoding {
        self.encoding
    }

    pub fn obs_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    /// Row `x` is the observation of state `x`.
    pub fn observation_table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn observe(&self, state: usize) -> Observation {
        Observation {
            state_id: state,
            features: self.table.row(state).to_vec(),
        }
    }

    /// Inverse of [`observe`](Self::observe) on exact feature vectors.
    pub fn identify(&self, features: &[f64]) -> Option<usize> {
        let key: Vec<u64> = features.iter().map(|v| v.to_bits()).collect();
        self.lookup.get(&key).copied()
    }
}

/// Ordered transitions with observations; the input to pretraining.
#[derive(Clone, Debug)]
pub struct TransitionDataset {
    pub n_actions: u32,
    pub observations: Array2<f64>,
    pub actions: Vec<u32>,
    pub next_observations: Array2<f64>,
    pub terminals: Vec<bool>,
    pub episode_ids: Vec<u64>,
}

impl TransitionDataset {
    pub fn empty(obs_dim: usize, n_actions: u32) -> Self {
        Self {
            n_actions,
            observations: Array2::zeros((0, obs_dim)),
            actions: Vec::new(),
            next_observations: Array2::zeros((0, obs_dim)),
            terminals: Vec::new(),
            episode_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    /// Bitwise equality, including float payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.n_actions == other.n_actions
            && self.observations.dim() == other.observations.dim()
            && self.next_observations.dim() == other.next_observations.dim()
            && bits(&self.observations) == bits(&other.observations)
            && bits(&self.next_observations) == bits(&other.next_observations)
            && self.actions == other.actions
            && self.terminals == other.terminals
            && self.episode_ids == other.episode_ids
    }

    /// State ids of `(x, x')` for each row, resolved through `env`.
    pub fn state_ids(&self, env: &Environment) -> Result<Vec<(usize, usize)>> {
        if self.obs_dim() != env.obs_dim() {
            return Err(Error::Config(format!(
                "dataset observations have dim {}, environment has {}",
                self.obs_dim(),
                env.obs_dim()
            )));
        }
        (0..self.len())
            .map(|i| {
                let x = self.observations.row(i);
                let y = self.next_observations.row(i);
                match (
                    env.identify(x.as_slice().expect("row-major")),
                    env.identify(y.as_slice().expect("row-major")),
                ) {
                    (Some(x), Some(y)) => Ok((x, y)),
                    _ => Err(Error::Config(format!("row {i} does not match any environment state"))),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub episode_cap: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { episode_cap: 500 }
    }
}

/// Simulates `steps` transitions under `policy`. Episodes start uniformly
/// over non-terminal states and end on entering a terminal state or after
/// `episode_cap` steps.
pub fn rollout(
    env: &Environment,
    policy: &Policy,
    steps: usize,
    seed: u64,
    config: &RolloutConfig,
) -> Result<TransitionDataset> {
    if steps == 0 {
        return Err(Error::Precondition("rollout needs at least one step".into()));
    }
    if policy.probs().dim() != (env.n_states(), env.n_actions()) {
        return Err(Error::Shape("policy does not match environment".into()));
    }
    let mdp = env.mdp();
    let starts = mdp.start_states();
    if starts.is_empty() {
        return Err(Error::Precondition("no non-terminal start states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = env.obs_dim();
    let table = env.observation_table();
    let mut obs = Array2::zeros((steps, dim));
    let mut next_obs = Array2::zeros((steps, dim));
    let mut actions = Vec::with_capacity(steps);
    let mut terminals = Vec::with_capacity(steps);
    let mut episode_ids = Vec::with_capacity(steps);

    let mut episode = 0u64;
    let mut state = starts[rng.random_range(0..starts.len())];
    let mut t = 0usize;
    for i in 0..steps {
        let a = policy.sample(state, &mut rng);
        let next = mdp.sample_next(state, a, &mut rng);
        let done = mdp.is_terminal(next);
        obs.row_mut(i).assign(&table.row(state));
        next_obs.row_mut(i).assign(&table.row(next));
        actions.push(a as u32);
        terminals.push(done);
        episode_ids.push(episode);
        t += 1;
        if done || t >= config.episode_cap {
            episode += 1;
            t = 0;
            state = starts[rng.random_range(0..starts.len())];
        } else {
            state = next;
        }
    }
    Ok(TransitionDataset {
        n_actions: env.n_actions() as u32,
        observations: obs,
        actions,
        next_observations: next_obs,
        terminals,
        episode_ids,
    })
}

/// Optimal state values and action values by value iteration, using the
/// arrival-reward convention of [`TabularMdp`].
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(Array1<f64>, Array2<f64>)> {
    let reward = mdp
        .reward()
        .ok_or_else(|| Error::Precondition("value iteration needs a reward vector".into()))?;
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let mut v = Array1::<f64>::zeros(n);
    let mut q = Array2::<f64>::zeros((n, na));
    for _ in 0..1_000_000 {
        for x in 0..n {
            for a in 0..na {
                q[[x, a]] = mdp
                    .successors(x, a)
                    .iter()
                    .map(|&(y, p)| {
                        let cont = if mdp.is_terminal(y) { 0.0 } else { v[y] };
                        p * (reward[y] + gamma * cont)
                    })
                    .sum();
            }
        }
        let next: Array1<f64> = q.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
        let delta = (&next - &v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        v = next;
        if delta < tol {
            return Ok((v, q));
        }
    }
    Err(Error::Numerical("value iteration did not converge".into()))
}

/// Random MDP with Dirichlet(1) transition rows.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array3::zeros((n_actions, n_states, n_states));
    for a in 0..n_actions {
        for x in 0..n_states {
            let w: Vec<f64> = (0..n_states).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = w.iter().sum();
            for (y, wy) in w.iter().enumerate() {
                p[[a, x, y]] = wy / total;
            }
            // exact normalisation so rows pass the 1e-12 check
            let sum: f64 = (0..n_states).map(|y| p[[a, x, y]]).sum();
            p[[a, x, 0]] += 1.0 - sum;
        }
    }
    TabularMdp::new(p, None, vec![false; n_states], gamma)
}

/// Single-action MDP whose transition matrix is a symmetric random walk on
/// a random weighted complete graph: `P = I - (D - W) / c`.
pub fn symmetric_random_walk(n_states: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::<f64>::zeros((n_states, n_states));
    for i in 0..n_states {
        for j in (i + 1)..n_states {
            let v = rng.random_range(0.1..1.0);
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    let degree: Vec<f64> = w.rows().into_iter().map(|r| r.sum()).collect();
    let c = degree.iter().fold(0.0f64, |m, &d| m.max(d)) * 1.25;
    let mut p = &w / c;
    for i in 0..n_states {
        p[[i, i]] = 1.0 - degree[i] / c;
    }
    let p3 = p.insert_axis(Axis(0));
    TabularMdp::new(p3, None, vec![false; n_states], gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn classic() -> GridWorld {
        GridWorld::four_rooms(&FourRoomsConfig::default()).unwrap()
    }

    #[test]
    fn classic_layout_has_104_states() {
        // flood-fill oracle: count free cells reachable from (0, 0) by BFS
        // over the ascii rendering of the classic layout
        let ascii = "\
.....#.....
.....#.....
...........
.....#.....
.....#.....
#.####.....
.....###.##
.....#.....
.....#.....
...........
.....#.....";
        let parsed = GridWorld::from_ascii(ascii).unwrap();
        assert_eq!(parsed.n_states(), 104);
        assert_eq!(classic(), parsed);
    }

    #[test]
    fn wall_bumps_are_self_transitions() {
        let g = classic();
        let corner = g.state_at(0, 0).unwrap();
        assert_eq!(g.step(corner, 0), corner);
        assert_eq!(g.step(corner, 3), corner);
        assert_ne!(g.step(corner, 1), corner);
        let by_wall = g.state_at(0, 4).unwrap();
        assert_eq!(g.step(by_wall, 1), by_wall);
    }

    #[test]
    fn disconnected_layout_rejected() {
        let cfg = FourRoomsConfig {
            left_door_col: 5,
            ..Default::default()
        };
        assert!(GridWorld::four_rooms(&cfg).is_err());
        let split = GridWorld::from_ascii("..#..\n..#..\n..#..");
        assert!(matches!(split, Err(Error::Construction(_))));
        let tiny = FourRoomsConfig {
            height: 4,
            ..Default::default()
        };
        assert!(GridWorld::four_rooms(&tiny).is_err());
    }

    #[test]
    fn induced_transition_cases() {
        // single deterministic action
        let p = array![[[0.0, 1.0], [1.0, 0.0]]];
        let mdp = TabularMdp::new(p, None, vec![false; 2], 0.5).unwrap();
        let pp = induced_transition(&mdp, &Policy::uniform(2, 1)).unwrap();
        assert_eq!(pp, array![[0.0, 1.0], [1.0, 0.0]]);
        // opposite deterministic actions averaged
        let p = array![[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]];
        let mdp = TabularMdp::new(p, None, vec![false; 2], 0.5).unwrap();
        let pp = induced_transition(&mdp, &Policy::uniform(2, 2)).unwrap();
        assert_eq!(pp, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn four_rooms_random_walk_is_symmetric_and_irreducible() {
        let g = classic();
        let mdp = g.to_mdp(0.99, None).unwrap();
        let n = mdp.n_states();
        let pp = induced_transition(&mdp, &Policy::uniform(n, 4)).unwrap();
        for row in pp.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(is_irreducible(&pp));
        // equals (A + diag(4 - deg)) / 4 for the grid graph
        for x in 0..n {
            let (r, c) = g.cell(x);
            let neigh: Vec<usize> = GRID_ACTIONS
                .iter()
                .filter_map(|&(dr, dc)| {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    (nr >= 0 && nc >= 0).then(|| g.state_at(nr as usize, nc as usize)).flatten()
                })
                .collect();
            for y in 0..n {
                let expected = if x == y {
                    (4 - neigh.len()) as f64 / 4.0
                } else if neigh.contains(&y) {
                    0.25
                } else {
                    0.0
                };
                assert!((pp[[x, y]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mdp_validation() {
        let bad = array![[[0.5, 0.4], [0.0, 1.0]]];
        assert!(TabularMdp::new(bad, None, vec![false; 2], 0.9).is_err());
        let neg = array![[[1.5, -0.5], [0.0, 1.0]]];
        assert!(TabularMdp::new(neg, None, vec![false; 2], 0.9).is_err());
        let ok = array![[[1.0, 0.0], [0.0, 1.0]]];
        assert!(TabularMdp::new(ok.clone(), None, vec![false; 2], 1.0).is_err());
        assert!(TabularMdp::new(ok, None, vec![false; 2], 0.0).is_ok());
        assert!(Policy::new(array![[0.5, 0.6]]).is_err());
        let u = Policy::uniform(3, 4);
        assert!(u.probs().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn rollout_basics() {
        let env = Environment::four_rooms(&FourRoomsConfig::default(), 0.99, ObservationEncoding::OneHot).unwrap();
        let pi = Policy::uniform(104, 4);
        let one = rollout(&env, &pi, 1, 5, &RolloutConfig::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert!(env.identify(one.observations.row(0).as_slice().unwrap()).is_some());
        let a = rollout(&env, &pi, 2000, 9, &RolloutConfig::default()).unwrap();
        let b = rollout(&env, &pi, 2000, 9, &RolloutConfig::default()).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.terminals.iter().any(|&t| t));
        // cap of 500 steps: ids 0..=3 over 2000 steps
        assert_eq!(*a.episode_ids.last().unwrap(), 3);
        assert!(rollout(&env, &pi, 0, 9, &RolloutConfig::default()).is_err());
    }

    #[test]
    fn goal_episodes_terminate() {
        let env = Environment::four_rooms_goal(
            &FourRoomsConfig::default(),
            (10, 10),
            0.99,
            ObservationEncoding::Coordinates,
        )
        .unwrap();
        let d = rollout(&env, &Policy::uniform(104, 4), 20_000, 1, &RolloutConfig::default()).unwrap();
        let ids = d.state_ids(&env).unwrap();
        let goal = env.grid().unwrap().state_at(10, 10).unwrap();
        for (i, &(_, y)) in ids.iter().enumerate() {
            assert_eq!(d.terminals[i], y == goal);
            if d.terminals[i] && i + 1 < d.len() {
                assert_eq!(d.episode_ids[i + 1], d.episode_ids[i] + 1);
            }
        }
        assert!(d.terminals.iter().any(|&t| t));
    }

    #[test]
    fn value_iteration_on_corridor() {
        let g = GridWorld::from_ascii(".....").unwrap();
        let mdp = g.to_mdp(0.9, Some(4)).unwrap();
        let (v, _) = value_iteration(&mdp, 1e-14).unwrap();
        // distance d to the goal gives value 0.9^(d-1)
        for x in 0..4 {
            let d = 4 - x;
            assert!((v[x] - 0.9f64.powi(d as i32 - 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_walk_is_symmetric_stochastic() {
        let mdp = symmetric_random_walk(6, 0.9, 3).unwrap();
        let p = mdp.action_matrix(0);
        assert!(crate::linalg::is_symmetric(&p, 1e-15));
        assert!(p.iter().all(|&v| v > 0.0));
        let mdp = random_mdp(7, 3, 0.9, 11).unwrap();
        assert_eq!(mdp.n_states(), 7);
    }

    #[test]
    fn coordinates_encoding_is_injective() {
        let env = Environment::four_rooms(&FourRoomsConfig::default(), 0.99, ObservationEncoding::Coordinates).unwrap();
        assert_eq!(env.obs_dim(), 2);
        for x in 0..env.n_states() {
            assert_eq!(env.identify(&env.observe(x).features), Some(x));
        }
    }
}
