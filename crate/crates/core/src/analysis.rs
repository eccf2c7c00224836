//! Feature analysis (classical MDS, temporal smoothness), the one-sided
//! rank-sum test, and the resumable sweep and ablation runners.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, RunOutput};
use crate::indicators::TaskKind;
use crate::linalg::{canonicalize_signs, symmetric_eigen};
use crate::store::{hex, write_atomic, write_checkpoint};
use crate::trainer::TargetMode;

/// Squared Euclidean distances between rows.
pub fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdsEmbedding {
    /// `n x 2`, columns centred.
    pub coordinates: Array2<f64>,
    /// All eigenvalues of the double-centred Gram matrix, descending.
    pub eigenvalues: Array1<f64>,
    /// Kruskal stress-1 of the planar embedding against the input distances.
    pub stress: f64,
    /// Set when every input row is the same point.
    pub degenerate: bool,
}

impl MdsEmbedding {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y")?;
        for (t, row) in self.coordinates.rows().into_iter().enumerate() {
            writeln!(out, "{t},{:.12e},{:.12e}", row[0], row[1])?;
        }
        Ok(())
    }
}

/// Classical (Torgerson) MDS into the plane. Each coordinate column is
/// sign-normalised so its first non-negligible entry is positive.
pub fn classical_mds(features: &Array2<f64>) -> Result<MdsEmbedding> {
    let n = features.nrows();
    if n < 3 {
        return Err(Error::Precondition(format!("MDS needs at least 3 points, got {n}")));
    }
    let d2 = squared_distances(features);
    let row_mean = d2.mean_axis(Axis(1)).unwrap();
    let grand = row_mean.mean().unwrap();
    let b = Array2::from_shape_fn((n, n), |(i, j)| -0.5 * (d2[[i, j]] - row_mean[i] - row_mean[j] + grand));
    let eig = symmetric_eigen(&b)?.descending();
    let scale = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = d2.iter().all(|&v| v == 0.0);
    let mut coordinates = Array2::zeros((n, 2));
    if !degenerate {
        let mut vecs = eig.vectors.slice(ndarray::s![.., ..2]).to_owned();
        canonicalize_signs(&mut vecs);
        for k in 0..2 {
            let lam = eig.values[k];
            let lam = if lam < 0.0 && lam > -1e-10 * scale.max(1.0) { 0.0 } else { lam.max(0.0) };
            coordinates.column_mut(k).assign(&(&vecs.column(k) * lam.sqrt()));
        }
        // remove residual drift so columns are centred to rounding
        let mean = coordinates.mean_axis(Axis(0)).unwrap();
        coordinates -= &mean;
    }
    let embedded = squared_distances(&coordinates);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (d2[[i, j]].sqrt(), embedded[[i, j]].sqrt());
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    Ok(MdsEmbedding {
        coordinates,
        eigenvalues: eig.values,
        stress: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
        degenerate,
    })
}

pub const MIN_TRAJECTORY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothness {
    /// Adjacent mean over non-adjacent mean; NaN when degenerate.
    pub ratio: f64,
    pub adjacent_mean: f64,
    pub nonadjacent_mean: f64,
    /// Set when every non-adjacent pair coincides, so the ratio is 0/0 or
    /// undefined.
    pub degenerate: bool,
}

/// Mean L2 feature distance between consecutive rows divided by the mean
/// over every pair at least two steps apart.
pub fn temporal_smoothness(features: &Array2<f64>) -> Result<Smoothness> {
    let t = features.nrows();
    if t < MIN_TRAJECTORY {
        return Err(Error::Precondition(format!(
            "trajectory of length {t} is shorter than {MIN_TRAJECTORY}"
        )));
    }
    let dist = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let adjacent_mean = (1..t).map(|i| dist(i - 1, i)).sum::<f64>() / (t - 1) as f64;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..t {
        for j in i + 2..t {
            sum += dist(i, j);
            count += 1;
        }
    }
    let nonadjacent_mean = sum / count as f64;
    let degenerate = nonadjacent_mean == 0.0;
    Ok(Smoothness {
        ratio: if degenerate { f64::NAN } else { adjacent_mean / nonadjacent_mean },
        adjacent_mean,
        nonadjacent_mean,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSumResult {
    pub n_a: usize,
    pub n_b: usize,
    /// Mann-Whitney U of the first sample: pairs where it is larger, ties
    /// counting one half.
    pub u: f64,
    /// `n_a * n_b / 2`.
    pub null_mean: f64,
    /// Exact one-sided p-value for "first sample tends larger", computed
    /// over all relabelings of the pooled midranks.
    pub p_value: f64,
}

/// One-sided Wilcoxon rank-sum test of `a` stochastically larger than `b`.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return Err(Error::Precondition("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Precondition("rank-sum test on NaN values".into()));
    }
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = pooled.len();
    // doubled midranks keep everything integral
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        for r in ranks2.iter_mut().take(j + 1).skip(i) {
            *r = i + j + 2;
        }
        i = j + 1;
    }
    let observed: usize = (0..n).filter(|&k| pooled[k].1).map(|k| ranks2[k]).sum();
    let max_sum: usize = ranks2.iter().sum();
    // ways[c][s]: subsets of size c with doubled-rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; na + 1];
    ways[0][0] = 1.0;
    for &r in &ranks2 {
        for c in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[c - 1][s - r];
                if add != 0.0 {
                    ways[c][s] += add;
                }
            }
        }
    }
    let total: f64 = ways[na].iter().sum();
    let upper: f64 = ways[na][observed..].iter().sum();
    let u = observed as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    Ok(RankSumResult {
        n_a: na,
        n_b: nb,
        u,
        null_mean: (na * nb) as f64 / 2.0,
        p_value: upper / total,
    })
}

/// Result of one pipeline run as stored beside its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_hash: String,
    pub width_mult: usize,
    pub num_tasks: usize,
    pub task_kind: TaskKind,
    pub target_mode: TargetMode,
    pub seed: u64,
    pub online_seed: u64,
    pub final_return: f64,
    pub optimal_return: f64,
    pub smoothness_ratio: f64,
    pub runtime_s: f64,
}

const RECORD_HEADER: &str =
    "run_hash,width,num_tasks,task_kind,target_mode,seed,online_seed,final_return,optimal_return,smoothness_ratio,runtime_s";

impl RunRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.3}",
            self.run_hash,
            self.width_mult,
            self.num_tasks,
            self.task_kind,
            self.target_mode,
            self.seed,
            self.online_seed,
            self.final_return,
            self.optimal_return,
            self.smoothness_ratio,
            self.runtime_s
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::Config(format!("malformed run record '{line}'"));
        if f.len() != 11 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
        Ok(Self {
            run_hash: f[0].to_string(),
            width_mult: int(f[1])? as usize,
            num_tasks: int(f[2])? as usize,
            task_kind: f[3].parse()?,
            target_mode: f[4].parse()?,
            seed: int(f[5])?,
            online_seed: int(f[6])?,
            final_return: num(f[7])?,
            optimal_return: num(f[8])?,
            smoothness_ratio: num(f[9])?,
            runtime_s: num(f[10])?,
        })
    }

    /// Mean return as a fraction of the optimal mean over the same starts.
    pub fn optimality_ratio(&self) -> f64 {
        self.final_return / self.optimal_return
    }
}

/// Directory of completed runs keyed by run hash.
#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.join("runs"),
        }
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join(hex(&cfg.run_hash()))
    }

    pub fn load(&self, cfg: &ExperimentConfig) -> Result<Option<RunRecord>> {
        let path = self.run_dir(cfg).join("result.csv");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let line = text
            .lines()
            .nth(1)
            .ok_or_else(|| Error::Config(format!("{} has no record", path.display())))?;
        RunRecord::parse(line).map(Some)
    }

    /// Executes `cfg` unless a completed record exists. The record file is
    /// written last, so an interrupted run is simply re-executed.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunRecord> {
        if let Some(r) = self.load(cfg)? {
            return Ok(r);
        }
        let dir = self.run_dir(cfg);
        fs::create_dir_all(&dir)?;
        let started = Instant::now();
        let out = cfg.run()?;
        let runtime_s = started.elapsed().as_secs_f64();
        write_run_outputs(&dir, cfg, &out)?;
        let report = &out.online.report;
        let record = RunRecord {
            run_hash: hex(&cfg.run_hash()),
            width_mult: cfg.encoder.width_mult,
            num_tasks: cfg.tasks.num_tasks,
            task_kind: cfg.tasks.kind,
            target_mode: cfg.trainer.target_mode,
            seed: cfg.seed,
            online_seed: cfg.online_seed,
            final_return: report.mean_return,
            optimal_return: report.optimal_mean_return.unwrap_or(f64::NAN),
            smoothness_ratio: out.smoothness.unwrap_or(f64::NAN),
            runtime_s,
        };
        let row = record.csv_row();
        write_atomic(&dir.join("result.csv"), format!("{RECORD_HEADER}\n{row}\n").as_bytes())?;
        // hand back what a resumed run would load, so tables built from
        // fresh and cached records are byte-identical
        RunRecord::parse(&row)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes the config, checkpoint, logs, evaluation and trajectory analysis of
/// one run into `dir`.
pub fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    write_checkpoint(&out.pretrain.checkpoint, &dir.join("checkpoint.pvnc"))?;
    write_atomic(&dir.join("pretrain_log.csv"), &csv_bytes(|b| out.pretrain.log.write_csv(b))?)?;
    write_atomic(&dir.join("online_log.csv"), &csv_bytes(|b| out.online.log.write_csv(b))?)?;
    let report = &out.online.report;
    let mut eval = format!("{}\n{}\n", crate::agent::EvalReport::csv_header(), report.csv_row());
    eval.push('\n');
    write_atomic(&dir.join("eval.csv"), eval.as_bytes())?;
    write_atomic(&dir.join("episodes.csv"), &csv_bytes(|b| report.write_episodes_csv(b))?)?;
    let env = cfg.goal_env()?;
    let features = crate::agent::feature_table(&env, &out.pretrain.checkpoint.encoder)?;
    let rows = features.select(Axis(0), &out.trajectory);
    if rows.nrows() >= 3 {
        let mds = classical_mds(&rows)?;
        let mut text = String::from("# features: penultimate layer, raw L2 distances\n");
        text.push_str(&String::from_utf8(csv_bytes(|b| mds.write_csv(b))?).expect("ascii"));
        write_atomic(&dir.join("mds.csv"), text.as_bytes())?;
    }
    let mut traj = String::from("t,state\n");
    for (t, s) in out.trajectory.iter().enumerate() {
        let _ = writeln!(traj, "{t},{s}");
    }
    write_atomic(&dir.join("trajectory.csv"), traj.as_bytes())?;
    Ok(())
}

/// Runs `configs` with at most `parallelism` concurrent runs. Results come
/// back in input order; a failed run yields its error in place.
pub fn run_all(store: &RunStore, configs: &[ExperimentConfig], parallelism: usize) -> Vec<Result<RunRecord>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = store.run(&configs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every run is visited"))
        .collect()
}

/// A scaling grid around a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub widths: Vec<usize>,
    pub num_tasks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub online_seeds: Vec<u64>,
    pub parallelism: usize,
}

impl SweepSpec {
    /// The grid in output order: width, then task count, then seed, then
    /// online seed.
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        if self.widths.is_empty() || self.num_tasks.is_empty() || self.seeds.is_empty() || self.online_seeds.is_empty() {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        let mut out = Vec::new();
        for &w in &self.widths {
            for &m in &self.num_tasks {
                for &s in &self.seeds {
                    for &os in &self.online_seeds {
                        let mut cfg = self.base.clone();
                        cfg.encoder.width_mult = w;
                        cfg.tasks.num_tasks = m;
                        cfg.seed = s;
                        cfg.online_seed = os;
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub width_mult: usize,
    pub num_tasks: usize,
    pub seed: u64,
    pub online_seed: u64,
    pub outcome: std::result::Result<RunRecord, String>,
}

pub const SWEEP_HEADER: &str =
    "width,num_tasks,seed,online_seed,status,final_return,optimality_ratio,smoothness_ratio,runtime_s,run_hash";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = match &r.outcome {
            Ok(rec) => writeln!(
                s,
                "{},{},{},{},ok,{:.12e},{:.12e},{:.12e},{:.3},{}",
                r.width_mult,
                r.num_tasks,
                r.seed,
                r.online_seed,
                rec.final_return,
                rec.optimality_ratio(),
                rec.smoothness_ratio,
                rec.runtime_s,
                rec.run_hash
            ),
            Err(e) => writeln!(
                s,
                "{},{},{},{},error,nan,nan,nan,nan,{}",
                r.width_mult,
                r.num_tasks,
                r.seed,
                r.online_seed,
                e.replace([',', '\n'], ";")
            ),
        };
    }
    s
}

/// Mean and spread of the final return per (width, task count).
pub fn trend_csv(rows: &[SweepRow]) -> String {
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Ok(rec) = &r.outcome {
            groups.entry((r.width_mult, r.num_tasks)).or_default().push(rec.final_return);
        }
    }
    let mut s = String::from("width,num_tasks,runs,mean_return,min_return,max_return\n");
    for ((w, m), v) in groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "{w},{m},{},{mean:.12e},{min:.12e},{max:.12e}", v.len());
    }
    s
}

/// Runs the grid, skipping completed runs, and writes `sweep.csv`,
/// `trend.csv` and `sweep.toml` (the base config) under `out`.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    let configs = spec.configs()?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("sweep.toml"), spec.base.to_toml_string().as_bytes())?;
    let store = RunStore::new(out);
    let results = run_all(&store, &configs, spec.parallelism);
    let rows: Vec<SweepRow> = configs
        .iter()
        .zip(results)
        .map(|(cfg, r)| SweepRow {
            width_mult: cfg.encoder.width_mult,
            num_tasks: cfg.tasks.num_tasks,
            seed: cfg.seed,
            online_seed: cfg.online_seed,
            outcome: r.map_err(|e| e.to_string()),
        })
        .collect();
    write_atomic(&out.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    write_atomic(&out.join("trend.csv"), trend_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// A labelled experimental condition and its per-seed run configs.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub label: String,
    pub runs: Vec<ExperimentConfig>,
}

/// The baseline grid around `base`, one config per seed in each:
/// RNI and hash tasks under both target modes, random cumulants (always
/// max targets) and the untrained encoder.
pub fn ablation_conditions(base: &ExperimentConfig, seeds: &[u64]) -> Vec<Condition> {
    let make = |label: &str, f: &dyn Fn(&mut ExperimentConfig)| Condition {
        label: label.to_string(),
        runs: seeds
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.seed = s;
                c.online_seed = s;
                f(&mut c);
                c
            })
            .collect(),
    };
    let set = |kind: TaskKind, mode: TargetMode| {
        move |c: &mut ExperimentConfig| {
            c.tasks.kind = kind;
            c.trainer.target_mode = mode;
        }
    };
    vec![
        make("rni-mean", &set(TaskKind::Rni, TargetMode::Mean)),
        make("rni-max", &set(TaskKind::Rni, TargetMode::Max)),
        make("hash-mean", &set(TaskKind::Hash, TargetMode::Mean)),
        make("hash-max", &set(TaskKind::Hash, TargetMode::Max)),
        make("random-cumulant", &set(TaskKind::Cumulant, TargetMode::Max)),
        make("random-init", &|c: &mut ExperimentConfig| {
            c.tasks.num_tasks = 0;
        }),
    ]
}

/// The comparisons the baseline claims rest on: the first label should
/// beat the second.
pub fn default_comparisons() -> Vec<(String, String)> {
    [("rni-mean", "random-init"), ("rni-mean", "hash-mean"), ("rni-mean", "rni-max")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub better: String,
    pub worse: String,
    pub test: RankSumResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
    /// `returns[c][i]`: final return of condition `c` on seed `i`.
    pub returns: Vec<Vec<f64>>,
    pub optimality: Vec<Vec<f64>>,
    pub comparisons: Vec<ComparisonRow>,
}

impl AblationReport {
    pub fn returns_of(&self, label: &str) -> Option<&[f64]> {
        self.labels.iter().position(|l| l == label).map(|i| self.returns[i].as_slice())
    }

    /// Paired-by-seed table of final returns, one column per condition.
    pub fn table_csv(&self) -> String {
        let mut s = format!("seed,{}\n", self.labels.join(","));
        for (i, seed) in self.seeds.iter().enumerate() {
            let vals: Vec<String> = self.returns.iter().map(|r| format!("{:.12e}", r[i])).collect();
            let _ = writeln!(s, "{seed},{}", vals.join(","));
        }
        s
    }

    pub fn comparisons_csv(&self) -> String {
        let mut s = String::from("better,worse,n_better,n_worse,u,null_mean,p_value\n");
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6e}",
                c.better, c.worse, c.test.n_a, c.test.n_b, c.test.u, c.test.null_mean, c.test.p_value
            );
        }
        s
    }
}

/// Builds the paired table from completed runs. Every referenced run must
/// exist; missing ones are reported together by run hash.
pub fn ablation_report(store: &RunStore, conditions: &[Condition], comparisons: &[(String, String)]) -> Result<AblationReport> {
    let mut missing = Vec::new();
    let mut returns = Vec::new();
    let mut optimality = Vec::new();
    for c in conditions {
        let mut r = Vec::new();
        let mut o = Vec::new();
        for cfg in &c.runs {
            match store.load(cfg)? {
                Some(rec) => {
                    r.push(rec.final_return);
                    o.push(rec.optimality_ratio());
                }
                None => missing.push(hex(&cfg.run_hash())),
            }
        }
        returns.push(r);
        optimality.push(o);
    }
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing));
    }
    let n = conditions.first().map_or(0, |c| c.runs.len());
    if conditions.iter().any(|c| c.runs.len() != n) {
        return Err(Error::Config("conditions have different seed counts".into()));
    }
    let labels: Vec<String> = conditions.iter().map(|c| c.label.clone()).collect();
    let find = |l: &str| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::Config(format!("comparison references unknown condition '{l}'")))
    };
    let mut rows = Vec::new();
    for (a, b) in comparisons {
        let (ia, ib) = (find(a)?, find(b)?);
        rows.push(ComparisonRow {
            better: a.clone(),
            worse: b.clone(),
            test: rank_sum_test(&returns[ia], &returns[ib])?,
        });
    }
    Ok(AblationReport {
        labels,
        seeds: conditions.first().map(|c| c.runs.iter().map(|r| r.seed).collect()).unwrap_or_default(),
        returns,
        optimality,
        comparisons: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(x: &Array2<f64>) -> Array2<f64> {
        squared_distances(x).mapv(f64::sqrt)
    }

    fn max_gap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn mds_recovers_collinear_points() {
        let x = ndarray::array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let e = classical_mds(&x).unwrap();
        assert!(max_gap(&pairwise(&x), &pairwise(&e.coordinates)) < 1e-8);
        assert!(e.coordinates.column(1).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn mds_recovers_unit_square_in_high_dimension() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let d = 7;
        // random orthonormal pair spanning the square's plane
        let q = crate::nn::orthogonal(d, 2, 1.0, &mut r);
        let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let offset: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let x = Array2::from_shape_fn((4, d), |(i, k)| offset[k] + corners[i][0] * q[[k, 0]] + corners[i][1] * q[[k, 1]]);
        let e = classical_mds(&x).unwrap();
        assert!(max_gap(&pairwise(&x), &pairwise(&e.coordinates)) < 1e-8);
        assert!(e.stress < 1e-8);
    }

    #[test]
    fn mds_of_repeated_point_is_flagged() {
        let x = Array2::from_elem((5, 3), 2.5);
        let e = classical_mds(&x).unwrap();
        assert!(e.degenerate);
        assert!(e.coordinates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mds_columns_are_centred_and_top_eigenvalues_nonnegative() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((12, 6), |_| r.random_range(-1.0..1.0));
        let e = classical_mds(&x).unwrap();
        for m in e.coordinates.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() < 1e-10);
        }
        assert!(e.eigenvalues[0] >= -1e-10 && e.eigenvalues[1] >= -1e-10);
    }

    #[test]
    fn mds_needs_three_points() {
        assert!(classical_mds(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn smoothness_of_time_index_matches_closed_form() {
        let t = 25;
        let x = Array2::from_shape_fn((t, 3), |(i, k)| if k == 0 { i as f64 } else { 0.0 });
        let s = temporal_smoothness(&x).unwrap();
        let (mut sum, mut count) = (0.0, 0.0);
        for i in 0..t {
            for j in i + 2..t {
                sum += (j - i) as f64;
                count += 1.0;
            }
        }
        assert!((s.ratio - count / sum).abs() < 1e-12);
        assert!(s.ratio < 1.0);
    }

    #[test]
    fn constant_features_give_flagged_nan() {
        let s = temporal_smoothness(&Array2::from_elem((12, 4), 1.0)).unwrap();
        assert!(s.degenerate && s.ratio.is_nan());
    }

    #[test]
    fn iid_features_have_ratio_near_one() {
        let mut sum = 0.0;
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((60, 8), |_| r.random_range(-1.0..1.0));
            let ratio = temporal_smoothness(&x).unwrap().ratio;
            assert!((ratio - 1.0).abs() <= 0.1, "seed {seed}: {ratio}");
            sum += ratio;
        }
        assert!((sum / 20.0 - 1.0).abs() <= 0.1);
    }

    #[test]
    fn short_trajectory_is_rejected() {
        assert!(temporal_smoothness(&Array2::zeros((9, 2))).is_err());
    }

    #[test]
    fn identical_samples_sit_at_null_midpoint() {
        let a = [0.3, 0.9, 0.1, 0.5];
        let t = rank_sum_test(&a, &a).unwrap();
        assert_eq!(t.u, t.null_mean);
        assert!(t.p_value > 0.5);
    }

    #[test]
    fn separated_samples_give_exact_tail() {
        // a entirely above b: only one labelling is as extreme
        let a = [10.0, 11.0, 12.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let t = rank_sum_test(&a, &b).unwrap();
        assert_eq!(t.u, 12.0);
        assert!((t.p_value - 1.0 / 35.0).abs() < 1e-15);
        let rev = rank_sum_test(&b, &a).unwrap();
        assert_eq!(rev.p_value, 1.0);
    }

    #[test]
    fn rank_sum_matches_brute_force_with_ties() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let b = [2.0, 3.0, 0.5];
        let t = rank_sum_test(&a, &b).unwrap();
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let u_of = |idx: &[usize]| {
            let mut u = 0.0;
            for &i in idx {
                for j in (0..pooled.len()).filter(|j| !idx.contains(j)) {
                    u += if pooled[i] > pooled[j] { 1.0 } else if pooled[i] == pooled[j] { 0.5 } else { 0.0 };
                }
            }
            u
        };
        let observed = u_of(&[0, 1, 2, 3]);
        assert_eq!(observed, t.u);
        let (mut hits, mut total) = (0.0, 0.0);
        let g = crate::tabular::exhaustive_subsets(7, 4);
        for col in g.columns() {
            let combo: Vec<usize> = (0..7).filter(|&i| col[i] == 1.0).collect();
            total += 1.0;
            if u_of(&combo) >= observed - 1e-12 {
                hits += 1.0;
            }
        }
        assert!((t.p_value - hits / total).abs() < 1e-12);
    }

    #[test]
    fn run_record_round_trips_through_csv() {
        let r = RunRecord {
            run_hash: "ab".into(),
            width_mult: 2,
            num_tasks: 10,
            task_kind: TaskKind::Rni,
            target_mode: TargetMode::Max,
            seed: 4,
            online_seed: 5,
            final_return: 0.25,
            optimal_return: 0.5,
            smoothness_ratio: f64::NAN,
            runtime_s: 1.5,
        };
        let back = RunRecord::parse(&r.csv_row()).unwrap();
        assert_eq!(back.csv_row(), r.csv_row());
    }
}
