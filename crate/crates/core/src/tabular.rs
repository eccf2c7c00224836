//! Closed-form tabular objects and the oracles built on them.
//!
//! * successor representation `Psi = (I - gamma P^pi)^{-1}`
//! * graph Laplacian spectra (proto-value functions)
//! * successor measures of state subsets, by linear solve and Monte Carlo
//! * the low-rank optimality check relating the Monte Carlo successor-measure
//!   loss to the weighted SVD of the successor-measure matrix
//! * the double-constant task-matrix check on symmetric random walks

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricEigen};
use crate::mdp::{induced_transition, Policy, TabularMdp};

#[derive(Clone, Debug)]
pub struct SrMatrix {
    pub psi: Array2<f64>,
    pub gamma: f64,
    pub policy_tag: String,
}

impl SrMatrix {
    /// `||Psi - I - gamma P Psi||_inf` (max absolute entry).
    pub fn bellman_residual(&self, p_pi: &Array2<f64>) -> f64 {
        let n = self.psi.nrows();
        let rhs = Array2::<f64>::eye(n) + self.gamma * p_pi.dot(&self.psi);
        linalg::max_abs(&(&self.psi - &rhs))
    }
}

pub fn successor_representation(mdp: &TabularMdp, policy: &Policy) -> Result<SrMatrix> {
    let p = induced_transition(mdp, policy)?;
    let tag = if policy == &Policy::uniform(mdp.n_states(), mdp.n_actions()) {
        "uniform"
    } else {
        "custom"
    };
    sr_from_transition(&p, mdp.gamma(), tag)
}

pub fn sr_from_transition(p: &Array2<f64>, gamma: f64, tag: &str) -> Result<SrMatrix> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Precondition(format!("gamma {gamma} outside [0, 1)")));
    }
    let n = p.nrows();
    let system = Array2::<f64>::eye(n) - gamma * p;
    let psi = linalg::inverse(&system)?;
    Ok(SrMatrix {
        psi,
        gamma,
        policy_tag: tag.to_string(),
    })
}

#[derive(Clone, Debug)]
pub struct GraphSpectra {
    pub adjacency: Array2<f64>,
    pub degree: Array1<f64>,
    pub laplacian: Array2<f64>,
    /// Ascending.
    pub eigenvalues: Array1<f64>,
    /// Orthonormal columns, first nonzero entry positive.
    pub eigenvectors: Array2<f64>,
}

/// Unit-weight adjacency: `x ~ y` when either reaches the other in one step
/// under some action. Self-loops are dropped.
pub fn state_graph_adjacency(mdp: &TabularMdp) -> Array2<f64> {
    let n = mdp.n_states();
    let mut a = Array2::zeros((n, n));
    for act in 0..mdp.n_actions() {
        for x in 0..n {
            for &(y, _) in mdp.successors(x, act) {
                if x != y {
                    a[[x, y]] = 1.0;
                    a[[y, x]] = 1.0;
                }
            }
        }
    }
    a
}

pub fn proto_value_functions(mdp: &TabularMdp) -> Result<GraphSpectra> {
    let adjacency = state_graph_adjacency(mdp);
    if !linalg::is_symmetric(&adjacency, 0.0) {
        return Err(Error::Numerical("adjacency is not symmetric".into()));
    }
    let degree = adjacency.sum_axis(Axis(1));
    let laplacian = Array2::from_diag(&degree) - &adjacency;
    let SymmetricEigen { values, vectors } = linalg::symmetric_eigen(&laplacian)?;
    Ok(GraphSpectra {
        adjacency,
        degree,
        laplacian,
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

/// `P_a` with columns of terminal states zeroed: entering a terminal state
/// ends accumulation.
fn continuing(mdp: &TabularMdp, a: usize) -> Array2<f64> {
    let mut p = mdp.action_matrix(a);
    for (y, &t) in mdp.terminal().iter().enumerate() {
        if t {
            p.column_mut(y).fill(0.0);
        }
    }
    p
}

/// Successor measures for every column of the indicator matrix `g`
/// (`n x m`). Returns one `n x m` matrix per action with entries
/// `psi(x, a, S_j)`, solving
/// `psi(x, a, S) = 1{x in S} + gamma sum_x' P(x'|x,a) V(x')` with
/// `V = sum_a pi(a|.) psi(., a, S)` and no continuation past terminal states.
pub fn successor_measure_matrix(
    mdp: &TabularMdp,
    policy: &Policy,
    g: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let n = mdp.n_states();
    if g.nrows() != n {
        return Err(Error::Shape(format!("indicator matrix has {} rows, MDP {n} states", g.nrows())));
    }
    if policy.probs().dim() != (n, mdp.n_actions()) {
        return Err(Error::Shape("policy does not match MDP".into()));
    }
    let gamma = mdp.gamma();
    let per_action: Vec<Array2<f64>> = (0..mdp.n_actions()).map(|a| continuing(mdp, a)).collect();
    let mut p_pi = Array2::<f64>::zeros((n, n));
    for (a, pa) in per_action.iter().enumerate() {
        for x in 0..n {
            p_pi.row_mut(x).scaled_add(policy.probs()[[x, a]], &pa.row(x));
        }
    }
    let system = Array2::<f64>::eye(n) - gamma * &p_pi;
    let v = linalg::solve(&system, g)?;
    Ok(per_action.iter().map(|pa| g + &(gamma * pa.dot(&v))).collect())
}

/// `psi(x, a, S)` as an `n x |A|` matrix.
pub fn successor_measure_value(mdp: &TabularMdp, policy: &Policy, subset: &[usize]) -> Result<Array2<f64>> {
    let n = mdp.n_states();
    let mut g = Array2::zeros((n, 1));
    for &x in subset {
        if x >= n {
            return Err(Error::Precondition(format!("state {x} not in MDP")));
        }
        g[[x, 0]] = 1.0;
    }
    let per_action = successor_measure_matrix(mdp, policy, &g)?;
    let mut out = Array2::zeros((n, mdp.n_actions()));
    for (a, m) in per_action.iter().enumerate() {
        out.column_mut(a).assign(&m.column(0));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `psi(x0, a0, S)` for several subsets along the
/// same rollouts. Each rollout runs for `horizon` steps or until a terminal
/// state is entered; the truncation bias is at most `gamma^horizon / (1 - gamma)`.
pub fn monte_carlo_successor_measure(
    mdp: &TabularMdp,
    policy: &Policy,
    start: (usize, usize),
    subsets: &[Vec<bool>],
    rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Vec<MonteCarloEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = mdp.gamma();
    let k = subsets.len();
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut ret = vec![0.0; k];
    for _ in 0..rollouts {
        ret.iter_mut().for_each(|r| *r = 0.0);
        let (mut x, mut a) = start;
        let mut discount = 1.0;
        for _ in 0..horizon {
            for (r, s) in ret.iter_mut().zip(subsets) {
                if s[x] {
                    *r += discount;
                }
            }
            let y = mdp.sample_next(x, a, &mut rng);
            if mdp.is_terminal(y) {
                break;
            }
            x = y;
            a = policy.sample(x, &mut rng);
            discount *= gamma;
        }
        for j in 0..k {
            sum[j] += ret[j];
            sum_sq[j] += ret[j] * ret[j];
        }
    }
    let n = rollouts as f64;
    (0..k)
        .map(|j| {
            let mean = sum[j] / n;
            let var = (sum_sq[j] / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            MonteCarloEstimate {
                mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect()
}

/// Binary subset matrix (`n x m`) plus the state weighting `Xi`.
#[derive(Clone, Debug)]
pub struct SubsetTaskMatrix {
    pub g: Array2<f64>,
    pub xi: Array1<f64>,
}

impl SubsetTaskMatrix {
    pub fn new(g: Array2<f64>, xi: Array1<f64>) -> Result<Self> {
        if g.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("subset matrix must be binary".into()));
        }
        if xi.len() != g.nrows() || xi.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Precondition("state weights must be nonnegative, one per state".into()));
        }
        if (xi.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!("state weights sum to {}", xi.sum())));
        }
        Ok(Self { g, xi })
    }

    /// Subset weights proportional to the `Xi`-mass each subset covers.
    /// For singletons this is `xi` itself.
    pub fn subset_weights(&self) -> Array1<f64> {
        let mass = self.g.t().dot(&self.xi);
        let total = mass.sum();
        if total > 0.0 {
            mass / total
        } else {
            Array1::from_elem(self.g.ncols(), 1.0 / self.g.ncols().max(1) as f64)
        }
    }
}

pub fn binomial(n: i64, k: i64) -> u64 {
    if k < 0 || n < 0 || k > n {
        return 0;
    }
    let k = k.min(n - k) as u64;
    let n = n as u64;
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// All `C(n, k)` k-hot columns in lexicographic order of their supports.
pub fn exhaustive_subsets(n: usize, k: usize) -> Array2<f64> {
    let m = binomial(n as i64, k as i64) as usize;
    let mut g = Array2::zeros((n, m));
    let mut idx: Vec<usize> = (0..k).collect();
    for col in 0..m {
        for &i in &idx {
            g[[i, col]] = 1.0;
        }
        // next combination
        let mut i = k;
        while i > 0 {
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for j in (i + 1)..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
    g
}

/// Which inner product a decomposition lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerProduct {
    Standard,
    Weighted,
}

/// `Psi = F Sigma B^T` with `F^T F = I` and `B^T Xi B = I`.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub left_vectors: Array2<f64>,
    pub singular_values: Array1<f64>,
    pub right_vectors: Array2<f64>,
    pub inner_product: InnerProduct,
}

/// SVD of `psi` with the right factor orthonormal under `Xi`. Requires
/// strictly positive weights.
pub fn weighted_svd(psi: &Array2<f64>, xi: &Array1<f64>) -> Result<SpectralDecomposition> {
    if xi.len() != psi.ncols() || xi.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Precondition("weighted SVD needs positive weights per column".into()));
    }
    let root = xi.mapv(f64::sqrt);
    let scaled = psi * &root;
    let svd = linalg::jacobi_svd(&scaled)?;
    let right = &svd.v / &root.clone().insert_axis(Axis(1));
    let uniform = xi.iter().all(|&w| (w - xi[0]).abs() < 1e-15);
    Ok(SpectralDecomposition {
        left_vectors: svd.u,
        singular_values: svd.sigma,
        right_vectors: right,
        inner_product: if uniform { InnerProduct::Standard } else { InnerProduct::Weighted },
    })
}

#[derive(Clone, Debug)]
pub struct LowRankReport {
    pub d: usize,
    /// Singular values of the weighted successor-measure task matrix, descending.
    pub singular_values: Vec<f64>,
    /// `sigma_d - sigma_{d+1}` (infinite when `d` is the full rank count).
    pub gap: f64,
    /// Top-d subspace is not unique; the angle then measures containment in
    /// the joint singular space.
    pub degenerate: bool,
    /// Largest principal angle between span(Phi*) and the top-d left
    /// singular vectors.
    pub angle: f64,
    /// Monte Carlo successor-measure loss at Phi*, evaluated directly.
    pub optimal_loss: f64,
    /// `sum_{i > d} sigma_i^2`, the Eckart-Young optimum.
    pub tail_energy: f64,
    pub passed: bool,
}

pub const LOW_RANK_ANGLE_TOL: f64 = 1e-6;
const DEGENERATE_GAP: f64 = 1e-10;

/// Weighted successor-measure task matrix: rows are states, one column per
/// (subset, action), scaled by the square root of the subset weight.
pub fn weighted_task_matrix(mdp: &TabularMdp, policy: &Policy, tasks: &SubsetTaskMatrix) -> Result<Array2<f64>> {
    let per_action = successor_measure_matrix(mdp, policy, &tasks.g)?;
    let w = tasks.subset_weights().mapv(f64::sqrt);
    let views: Vec<Array2<f64>> = per_action.iter().map(|m| m * &w).collect();
    let views: Vec<_> = views.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
}

/// `min_W ||Phi W - M||_F^2`, solved column by column through the normal
/// equations of an orthonormalised `Phi`.
pub fn mcsm_loss(phi: &Array2<f64>, task_matrix: &Array2<f64>) -> f64 {
    let q = linalg::orthonormal_basis(phi.view(), 1e-12);
    let residual = task_matrix - &q.dot(&q.t().dot(task_matrix));
    residual.iter().map(|v| v * v).sum()
}

/// Checks that the exact minimiser of the Monte Carlo successor-measure
/// loss over rank-d feature matrices spans the top-d left singular vectors
/// of the weighted successor-measure matrix.
///
/// The singular subspace comes from the eigendecomposition of the Gram
/// matrix `M M^T`; the loss minimiser comes from a one-sided Jacobi SVD of
/// `M` itself, so the two routes share no factorisation.
pub fn low_rank_oracle(
    mdp: &TabularMdp,
    policy: &Policy,
    tasks: &SubsetTaskMatrix,
    d: usize,
) -> Result<LowRankReport> {
    let n = mdp.n_states();
    if d == 0 || d > n {
        return Err(Error::Precondition(format!("need 1 <= d <= n, got d = {d}, n = {n}")));
    }
    let m = weighted_task_matrix(mdp, policy, tasks)?;

    let (sigma, left) = linalg::left_singular_via_gram(&m)?;
    let sigma: Vec<f64> = sigma.to_vec();
    let at = |i: usize| sigma.get(i).copied().unwrap_or(0.0);

    let svd = linalg::jacobi_svd(&m)?;
    let mut phi_star = Array2::zeros((n, d));
    for j in 0..d.min(svd.u.ncols()) {
        phi_star.column_mut(j).assign(&svd.u.column(j));
    }
    if d > svd.u.ncols() {
        // rank-deficient task matrix: any completion is optimal
        let extra = linalg::leading_columns(&left, d);
        for j in svd.u.ncols()..d {
            phi_star.column_mut(j).assign(&extra.column(j));
        }
    }

    let optimal_loss = mcsm_loss(&phi_star, &m);
    let tail_energy: f64 = svd.sigma.iter().skip(d).map(|s| s * s).sum();

    let (gap, degenerate, angle) = if d == n {
        (f64::INFINITY, false, linalg::largest_principal_angle(&left, &phi_star)?)
    } else {
        let gap = at(d - 1) - at(d);
        if gap > DEGENERATE_GAP {
            let top = linalg::leading_columns(&left, d);
            (gap, false, linalg::largest_principal_angle(&top, &phi_star)?)
        } else {
            // Joint singular space around sigma_d: Phi* must contain every
            // direction strictly above it and sit inside the union.
            let level = at(d - 1);
            let above = sigma.iter().take_while(|&&s| s > level + DEGENERATE_GAP).count();
            let within = sigma.iter().take_while(|&&s| s >= level - DEGENERATE_GAP).count();
            let outer = linalg::leading_columns(&left, within.min(n));
            let inside = linalg::largest_principal_angle(&outer, &phi_star)?;
            let covers = if above > 0 {
                linalg::largest_principal_angle(&phi_star, &linalg::leading_columns(&left, above))?
            } else {
                0.0
            };
            (gap, true, inside.max(covers))
        }
    };
    Ok(LowRankReport {
        d,
        singular_values: sigma,
        gap,
        degenerate,
        angle,
        optimal_loss,
        tail_energy,
        passed: angle <= LOW_RANK_ANGLE_TOL,
    })
}

#[derive(Clone, Debug)]
pub struct DoubleConstantCase {
    pub k: usize,
    /// Diagonal and off-diagonal of `G_k G_k^T` as observed.
    pub diagonal: f64,
    pub off_diagonal: f64,
    pub expected_a: u64,
    pub expected_t: u64,
    pub double_constant: bool,
    pub lambda_double_star: f64,
    pub lambda_star: f64,
    /// Max |observed - predicted| over the sorted eigenvalues of `Psi M_k Psi^T`.
    pub eigenvalue_error: f64,
    /// Max `||C x_i - predicted_i x_i||` over eigenvectors `x_i` of `P^pi`.
    pub residual: f64,
    /// Max projector distance between this case's eigenspaces and the
    /// first case's, per eigenvalue group.
    pub subspace_distance: f64,
}

#[derive(Clone, Debug)]
pub struct DoubleConstantReport {
    pub n: usize,
    pub transition_eigenvalues: Vec<f64>,
    pub cases: Vec<DoubleConstantCase>,
}

impl DoubleConstantReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.cases.iter().all(|c| {
            c.double_constant && c.eigenvalue_error <= tol && c.residual <= tol && c.subspace_distance <= tol
        })
    }
}

pub const DOUBLE_CONSTANT_MAX_STATES: usize = 14;

/// Verifies that `C_k = Psi G_k G_k^T Psi^T` has the eigenvectors of `P^pi`
/// for every `k`, with eigenvalue `mu_1^2 lambda**` on the constant vector
/// and `mu_i^2 lambda*` elsewhere.
pub fn double_constant_oracle(mdp: &TabularMdp, policy: &Policy, ks: &[usize]) -> Result<DoubleConstantReport> {
    let n = mdp.n_states();
    if n > DOUBLE_CONSTANT_MAX_STATES {
        return Err(Error::Precondition(format!(
            "exhaustive subsets need n <= {DOUBLE_CONSTANT_MAX_STATES}, got {n}"
        )));
    }
    let p = induced_transition(mdp, policy)?;
    if !linalg::is_symmetric(&p, 1e-12) {
        return Err(Error::Precondition("P^pi is not symmetric".into()));
    }
    if ks.iter().any(|&k| k == 0 || k >= n) {
        return Err(Error::Precondition("k must lie in 1..n".into()));
    }
    let gamma = mdp.gamma();
    let psi = sr_from_transition(&p, gamma, "uniform")?.psi;
    let eig_p = linalg::symmetric_eigen(&p)?.descending();
    let lambdas = eig_p.values.to_vec();
    let mu: Vec<f64> = lambdas.iter().map(|l| 1.0 / (1.0 - gamma * l)).collect();
    let ones_col = eig_p
        .vectors
        .columns()
        .into_iter()
        .position(|c| {
            let mean = c.sum() / n as f64;
            c.iter().all(|v| (v - mean).abs() < 1e-8) && mean.abs() > 1e-8
        })
        .ok_or_else(|| Error::Numerical("no constant eigenvector of P^pi".into()))?;

    // group transition eigenvectors by eigenvalue
    let groups = cluster(&lambdas, 1e-9);

    let mut cases = Vec::new();
    let mut reference: Option<Vec<Array2<f64>>> = None;
    for &k in ks {
        let g = exhaustive_subsets(n, k);
        let mk = g.dot(&g.t());
        let diagonal = mk[[0, 0]];
        let off_diagonal = if n > 1 { mk[[0, 1]] } else { 0.0 };
        let expected_a = binomial(n as i64 - 1, k as i64 - 1);
        let expected_t = binomial(n as i64 - 2, k as i64 - 2);
        let double_constant = (0..n).all(|i| {
            (0..n).all(|j| {
                let want = if i == j { expected_a } else { expected_t } as f64;
                mk[[i, j]] == want
            })
        });
        let (a, t) = (expected_a as f64, expected_t as f64);
        let lambda_double_star = a - t + n as f64 * t;
        let lambda_star = a - t;
        let predicted: Vec<f64> = (0..n)
            .map(|i| {
                let l = if i == ones_col { lambda_double_star } else { lambda_star };
                mu[i] * mu[i] * l
            })
            .collect();

        let c = psi.dot(&mk).dot(&psi.t());
        let c = (&c + &c.t()) * 0.5;
        let eig_c = linalg::symmetric_eigen(&c)?;
        let mut sorted_pred = predicted.clone();
        sorted_pred.sort_by(f64::total_cmp);
        let eigenvalue_error = eig_c
            .values
            .iter()
            .zip(&sorted_pred)
            .fold(0.0f64, |m, (o, p)| m.max((o - p).abs()));

        let mut residual = 0.0f64;
        for i in 0..n {
            let x = eig_p.vectors.column(i);
            let r = c.dot(&x) - predicted[i] * &x;
            residual = residual.max(r.dot(&r).sqrt());
        }

        // Eigenspaces of C_k, keyed by transition-eigenvalue group. Groups
        // whose predicted eigenvalues coincide are merged.
        let merged = merge_groups(&groups, &predicted, 1e-9);
        let mut spaces = Vec::with_capacity(merged.len());
        for members in &merged {
            let target = predicted[members[0]];
            let scale = target.abs().max(1.0);
            let cols: Vec<usize> = (0..n)
                .filter(|&j| (eig_c.values[j] - target).abs() <= 1e-7 * scale)
                .collect();
            spaces.push(eig_c.vectors.select(Axis(1), &cols));
        }
        let mut subspace_distance = 0.0f64;
        // compare against the transition eigenspaces
        for (members, space) in merged.iter().zip(&spaces) {
            let basis = eig_p.vectors.select(Axis(1), members);
            if space.ncols() != basis.ncols() {
                subspace_distance = f64::INFINITY;
                continue;
            }
            subspace_distance = subspace_distance.max(linalg::subspace_distance(&basis, space)?);
        }
        // and against the first k, when the grouping agrees
        match &reference {
            None => reference = Some(spaces),
            Some(first) if first.len() == spaces.len() => {
                for (a, b) in first.iter().zip(&spaces) {
                    if a.ncols() == b.ncols() {
                        subspace_distance = subspace_distance.max(linalg::subspace_distance(a, b)?);
                    }
                }
            }
            Some(_) => {}
        }

        cases.push(DoubleConstantCase {
            k,
            diagonal,
            off_diagonal,
            expected_a,
            expected_t,
            double_constant,
            lambda_double_star,
            lambda_star,
            eigenvalue_error,
            residual,
            subspace_distance,
        });
    }
    Ok(DoubleConstantReport {
        n,
        transition_eigenvalues: lambdas,
        cases,
    })
}

fn cluster(values: &[f64], tol: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        match groups.iter_mut().find(|g| (values[g[0]] - v).abs() <= tol) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

fn merge_groups(groups: &[Vec<usize>], predicted: &[f64], rel_tol: f64) -> Vec<Vec<usize>> {
    let mut merged: Vec<Vec<usize>> = Vec::new();
    for g in groups {
        let v = predicted[g[0]];
        match merged
            .iter_mut()
            .find(|m| (predicted[m[0]] - v).abs() <= rel_tol * v.abs().max(1.0))
        {
            Some(m) => m.extend(g),
            None => merged.push(g.clone()),
        }
    }
    merged
}

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Row-major CSV with a header row.
pub fn write_matrix_csv<W: Write>(mut out: W, header: &[String], m: &Array2<f64>) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes `eigenvalues.csv`, `eigenvectors.csv` and, when given, `sr.csv`.
pub fn export_spectra(dir: &Path, spectra: &GraphSpectra, sr: Option<&SrMatrix>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = spectra.eigenvalues.len();
    let values = spectra.eigenvalues.clone().insert_axis(Axis(1));
    write_matrix_csv(fs::File::create(dir.join("eigenvalues.csv"))?, &["eigenvalue".into()], &values)?;
    let header: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    write_matrix_csv(fs::File::create(dir.join("eigenvectors.csv"))?, &header, &spectra.eigenvectors)?;
    if let Some(sr) = sr {
        let header: Vec<String> = (0..sr.psi.ncols()).map(|i| format!("s{i}")).collect();
        write_matrix_csv(fs::File::create(dir.join("sr.csv"))?, &header, &sr.psi)?;
    }
    Ok(())
}

/// Outcome of one named check in [`verify_theory`].
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The Four Rooms grid used by the suite's successor-representation checks.
fn four_rooms_mdp(gamma: f64) -> Result<TabularMdp> {
    crate::mdp::GridWorld::four_rooms(&crate::mdp::FourRoomsConfig::default())?.to_mdp(gamma, None)
}

/// Runs every tabular oracle: the closed-form SR on Four Rooms, the
/// SR/Laplacian eigenvector relation, the low-rank optimality check on
/// `random_mdps` random MDPs and the double-constant check for n = 4, 5, 6.
pub fn verify_theory(seed: u64, random_mdps: usize) -> Result<Vec<TheoryCheck>> {
    use rand::Rng;
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(TheoryCheck {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let mdp = four_rooms_mdp(0.99)?;
    let pi = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let sr = successor_representation(&mdp, &pi)?;
    let p = induced_transition(&mdp, &pi)?;
    let residual = sr.bellman_residual(&p);
    push("sr-closed-form", residual <= 1e-10, format!("bellman residual {residual:.3e}"));

    // A symmetric random walk commutes with its SR and with the Laplacian.
    let spectra = proto_value_functions(&mdp)?;
    let commute_sr = linalg::max_abs(&(sr.psi.dot(&p) - p.dot(&sr.psi)));
    let commute_l = linalg::max_abs(&(spectra.laplacian.dot(&p) - p.dot(&spectra.laplacian)));
    push(
        "sr-shares-laplacian-eigenvectors",
        linalg::is_symmetric(&p, 1e-14) && commute_sr <= 1e-8 && commute_l <= 1e-12,
        format!("[Psi, P] {commute_sr:.3e}, [L, P] {commute_l:.3e}"),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures) = (0.0f64, 0usize);
    for i in 0..random_mdps {
        let n = rng.random_range(3..=10);
        let actions = rng.random_range(1..=3);
        let mdp = crate::mdp::random_mdp(n, actions, 0.9, rng.random())?;
        let pi = Policy::uniform(n, actions);
        let mut xi = Array1::from_shape_fn(n, |_| rng.random_range(0.05..1.0));
        xi /= xi.sum();
        let k = rng.random_range(1..n);
        let tasks = SubsetTaskMatrix::new(exhaustive_subsets(n, k), xi)?;
        let d = rng.random_range(1..=n.min(4));
        let rep = low_rank_oracle(&mdp, &pi, &tasks, d)?;
        worst = worst.max(rep.angle);
        if !rep.passed {
            failures += 1;
            push(&format!("low-rank-optimum-{i}"), false, format!("{rep:?}"));
        }
    }
    push(
        "low-rank-optimum",
        failures == 0 && random_mdps > 0,
        format!("{random_mdps} random MDPs, largest principal angle {worst:.3e}"),
    );

    for n in [4usize, 5, 6] {
        let mdp = crate::mdp::symmetric_random_walk(n, 0.9, seed.wrapping_add(n as u64))?;
        let ks: Vec<usize> = (1..n).collect();
        let rep = double_constant_oracle(&mdp, &Policy::uniform(n, 1), &ks)?;
        let worst = rep
            .cases
            .iter()
            .map(|c| c.eigenvalue_error.max(c.residual).max(c.subspace_distance))
            .fold(0.0f64, f64::max);
        push(
            &format!("double-constant-n{n}"),
            rep.passed(1e-8),
            format!("k = 1..{}, worst error {worst:.3e}", n - 1),
        );
    }

    let printed = ndarray::array![
        [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0, 1.0, 1.0]
    ];
    let g2 = exhaustive_subsets(4, 2);
    push("two-of-four-subsets", g2 == printed, "lexicographic columns".into());
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, symmetric_random_walk, FourRoomsConfig, GridWorld};
    use ndarray::array;

    fn four_rooms(gamma: f64) -> (GridWorld, TabularMdp) {
        let g = GridWorld::four_rooms(&FourRoomsConfig::default()).unwrap();
        let mdp = g.to_mdp(gamma, None).unwrap();
        (g, mdp)
    }

    #[test]
    fn sr_examples() {
        let swap = array![[[0.0, 1.0], [1.0, 0.0]]];
        let mdp = TabularMdp::new(swap, None, vec![false; 2], 0.5).unwrap();
        let sr = successor_representation(&mdp, &Policy::uniform(2, 1)).unwrap();
        let expected = array![[4.0 / 3.0, 2.0 / 3.0], [2.0 / 3.0, 4.0 / 3.0]];
        assert!(linalg::max_abs(&(&sr.psi - &expected)) < 1e-15);

        let zero = mdp.with_gamma(0.0).unwrap();
        let sr0 = successor_representation(&zero, &Policy::uniform(2, 1)).unwrap();
        assert_eq!(sr0.psi, Array2::<f64>::eye(2));
    }

    #[test]
    fn sr_rows_and_bellman_residual() {
        let (_, mdp) = four_rooms(0.99);
        let pi = Policy::uniform(104, 4);
        let sr = successor_representation(&mdp, &pi).unwrap();
        let p = induced_transition(&mdp, &pi).unwrap();
        assert!(sr.bellman_residual(&p) < 1e-10);
        for row in sr.psi.rows() {
            assert!((row.sum() - 100.0).abs() < 1e-8);
        }
    }

    #[test]
    fn pvf_examples() {
        let p = array![[[0.0, 1.0], [1.0, 0.0]]];
        let mdp = TabularMdp::new(p, None, vec![false; 2], 0.9).unwrap();
        let s = proto_value_functions(&mdp).unwrap();
        assert!((s.eigenvalues[0]).abs() < 1e-14 && (s.eigenvalues[1] - 2.0).abs() < 1e-14);

        let (_, mdp) = four_rooms(0.99);
        let s = proto_value_functions(&mdp).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-10);
        let v0 = s.eigenvectors.column(0);
        assert!(v0.iter().all(|v| (v - v0[0]).abs() < 1e-8));
        let n = s.eigenvalues.len();
        for i in 0..n {
            let v = s.eigenvectors.column(i);
            let r = s.laplacian.dot(&v) - s.eigenvalues[i] * &v;
            assert!(r.dot(&r).sqrt() < 1e-8);
        }
        let gram = s.eigenvectors.t().dot(&s.eigenvectors);
        assert!(linalg::max_abs(&(gram - Array2::<f64>::eye(n))) < 1e-8);

        // connected graph: a single zero eigenvalue, Fiedler vector orthogonal to constants
        assert!(s.eigenvalues[1] > 1e-6);
        assert!(s.eigenvectors.column(1).sum().abs() < 1e-8);
        assert!(s.degree.iter().all(|&d| (1.0..=4.0).contains(&d)));
    }

    #[test]
    fn successor_measure_edge_cases() {
        let (_, mdp) = four_rooms(0.9);
        let pi = Policy::uniform(104, 4);
        let all: Vec<usize> = (0..104).collect();
        let full = successor_measure_value(&mdp, &pi, &all).unwrap();
        assert!(full.iter().all(|v| (v - 10.0).abs() < 1e-10));
        let empty = successor_measure_value(&mdp, &pi, &[]).unwrap();
        assert!(empty.iter().all(|&v| v == 0.0));
        // singleton subsets reproduce the SR after averaging over actions
        let sr = successor_representation(&mdp, &pi).unwrap();
        let col = successor_measure_value(&mdp, &pi, &[17]).unwrap();
        for x in 0..104 {
            let v = col.row(x).mean().unwrap();
            assert!((v - sr.psi[[x, 17]]).abs() < 1e-10);
        }
    }

    #[test]
    fn successor_measure_matches_monte_carlo_small() {
        let mdp = random_mdp(5, 2, 0.8, 4).unwrap();
        let pi = Policy::uniform(5, 2);
        let subset = [1usize, 3];
        let exact = successor_measure_value(&mdp, &pi, &subset).unwrap();
        let mask: Vec<bool> = (0..5).map(|x| subset.contains(&x)).collect();
        let est = monte_carlo_successor_measure(&mdp, &pi, (2, 1), &[mask], 20_000, 200, 1);
        assert!((est[0].mean - exact[[2, 1]]).abs() < 3.0 * est[0].std_error + 1e-12);
    }

    #[test]
    fn exhaustive_subsets_printed_g2() {
        let g = exhaustive_subsets(4, 2);
        let printed = array![
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0, 1.0, 1.0]
        ];
        assert_eq!(g, printed);
        assert_eq!(exhaustive_subsets(5, 1), Array2::<f64>::eye(5));
        assert_eq!(binomial(3, -1), 0);
        assert_eq!(binomial(10, 3), 120);
    }

    #[test]
    fn weighted_svd_invariants() {
        let mdp = random_mdp(6, 2, 0.9, 8).unwrap();
        let sr = successor_representation(&mdp, &Policy::uniform(6, 2)).unwrap();
        let xi = array![0.1, 0.2, 0.05, 0.25, 0.3, 0.1];
        let dec = weighted_svd(&sr.psi, &xi).unwrap();
        let f = &dec.left_vectors;
        let b = &dec.right_vectors;
        assert!(linalg::max_abs(&(f.t().dot(f) - Array2::<f64>::eye(6))) < 1e-8);
        let bxb = b.t().dot(&(b * &xi.clone().insert_axis(Axis(1))));
        assert!(linalg::max_abs(&(bxb - Array2::<f64>::eye(6))) < 1e-8);
        let recon = f.dot(&Array2::from_diag(&dec.singular_values)).dot(&b.t());
        assert!(linalg::max_abs(&(recon - &sr.psi)) < 1e-8);
        assert_eq!(dec.inner_product, InnerProduct::Weighted);
    }

    #[test]
    fn low_rank_trivial_and_random() {
        let mdp = random_mdp(6, 2, 0.9, 21).unwrap();
        let pi = Policy::uniform(6, 2);
        let tasks = SubsetTaskMatrix::new(exhaustive_subsets(6, 1), Array1::from_elem(6, 1.0 / 6.0)).unwrap();
        let full = low_rank_oracle(&mdp, &pi, &tasks, 6).unwrap();
        assert!(full.angle < 1e-10);
        let r = low_rank_oracle(&mdp, &pi, &tasks, 2).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.optimal_loss - r.tail_energy).abs() < 1e-8 * r.tail_energy.max(1.0));
        assert!(low_rank_oracle(&mdp, &pi, &tasks, 0).is_err());
        assert!(low_rank_oracle(&mdp, &pi, &tasks, 7).is_err());
    }

    #[test]
    fn low_rank_optimum_beats_random_features() {
        let mdp = random_mdp(7, 3, 0.9, 5).unwrap();
        let pi = Policy::uniform(7, 3);
        let tasks = SubsetTaskMatrix::new(exhaustive_subsets(7, 2), Array1::from_elem(7, 1.0 / 7.0)).unwrap();
        let r = low_rank_oracle(&mdp, &pi, &tasks, 3).unwrap();
        let m = weighted_task_matrix(&mdp, &pi, &tasks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        for _ in 0..50 {
            let phi = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
            assert!(mcsm_loss(&phi, &m) >= r.optimal_loss - 1e-9);
        }
    }

    #[test]
    fn low_rank_degenerate_gap_is_reported() {
        // identical states: a 2-cycle with duplicated rows gives repeated
        // singular values
        let p = array![[[0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.5, 0.5]]];
        let mdp = TabularMdp::new(p, None, vec![false; 4], 0.5).unwrap();
        let pi = Policy::uniform(4, 1);
        let tasks = SubsetTaskMatrix::new(exhaustive_subsets(4, 1), Array1::from_elem(4, 0.25)).unwrap();
        let r = low_rank_oracle(&mdp, &pi, &tasks, 1).unwrap();
        assert!(r.degenerate);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn double_constant_n4() {
        let mdp = symmetric_random_walk(4, 0.9, 2).unwrap();
        let rep = double_constant_oracle(&mdp, &Policy::uniform(4, 1), &[1, 2, 3]).unwrap();
        let k2 = &rep.cases[1];
        assert_eq!((k2.expected_a, k2.expected_t), (3, 1));
        assert_eq!((k2.lambda_double_star, k2.lambda_star), (6.0, 2.0));
        assert!(rep.passed(1e-8), "{rep:?}");
    }

    #[test]
    fn double_constant_preconditions() {
        let mdp = random_mdp(4, 2, 0.9, 1).unwrap();
        assert!(matches!(
            double_constant_oracle(&mdp, &Policy::uniform(4, 2), &[1]),
            Err(Error::Precondition(_))
        ));
        let big = symmetric_random_walk(15, 0.9, 1).unwrap();
        assert!(double_constant_oracle(&big, &Policy::uniform(15, 1), &[1]).is_err());
    }

    #[test]
    fn csv_uses_17_significant_digits() {
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &["a".into(), "b".into()], &array![[1.0 / 3.0, -2.0]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "a,b\n3.3333333333333331e-1,-2.0000000000000000e0\n");
        let back: f64 = "3.3333333333333331e-1".parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }

    #[test]
    fn theory_suite_passes() {
        let checks = verify_theory(11, 20).unwrap();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() >= 7);
    }
}
