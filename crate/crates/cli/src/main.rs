use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pvn_core::agent::{online_train, OnlineOutput};
use pvn_core::analysis::{
    ablation_conditions, ablation_report, classical_mds, default_comparisons, run_all, run_sweep, temporal_smoothness, RunStore, SweepSpec,
};
use pvn_core::experiment::{analysis_trajectory, quantile_activation_trial, trajectory_features, ExperimentConfig};
use pvn_core::indicators::TaskKind;
use pvn_core::mdp::{Environment, Policy};
use pvn_core::store::{hex, read_checkpoint, read_dataset, write_atomic, write_checkpoint, write_dataset, Checkpoint};
use pvn_core::tabular::{export_spectra, proto_value_functions, successor_representation, verify_theory};
use pvn_core::{Error, Result};

/// Proto-value network experiments on Four Rooms.
#[derive(Parser, Debug)]
#[command(name = "pvn", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the config's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the uniform random policy and write a dataset file.
    Dataset {
        #[arg(long)]
        transitions: Option<usize>,
    },
    /// Train the encoder on auxiliary tasks and write a checkpoint.
    Pretrain {
        /// Existing dataset; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PretrainEnv::FourRooms)]
        env: PretrainEnv,
        /// rni, hash, explicit, singletons or cumulant.
        #[arg(long)]
        tasks: Option<TaskKind>,
        #[arg(long)]
        num_tasks: Option<usize>,
        #[arg(long)]
        width_mult: Option<usize>,
        /// Gradient steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train a linear agent on a frozen checkpoint and evaluate it.
    Online {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = EnvChoice::FourRoomsGoal)]
        env: EnvChoice,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Width by task-count grid; completed runs are skipped.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,10,50")]
        tasks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        online_seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
    },
    /// Embed the features along a greedy trajectory in the plane.
    Mds {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Baseline conditions over paired seeds plus rank-sum comparisons.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Only build the report from existing runs.
        #[arg(long)]
        report_only: bool,
    },
    /// Run every tabular oracle.
    VerifyTheory {
        #[arg(long, default_value_t = 20)]
        random_mdps: usize,
    },
    /// Quantile-tuned activation rates of RNI tasks on the full state set.
    Activations {
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5")]
        proportions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

/// Pretraining always uses the reward-free grid.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum PretrainEnv {
    FourRooms,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvChoice {
    FourRoomsGoal,
    FourRooms,
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.online_seed = seed;
    }
    Ok(cfg)
}

/// The checkpoint's own config unless one is given explicitly; the hash is
/// verified either way.
fn checkpoint_config(global: &Global, path: &Path) -> Result<(ExperimentConfig, Checkpoint)> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml_str(&read_checkpoint(path, None)?.config_text)?,
    };
    if let Some(seed) = global.seed {
        cfg.online_seed = seed;
    }
    let ckpt = cfg.load_checkpoint(path)?;
    Ok((cfg, ckpt))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn csv_of(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is ascii"))
}

fn write_online(out: &Path, o: &OnlineOutput) -> Result<()> {
    let r = &o.report;
    write_text(&out.join("eval.csv"), &format!("{}\n{}\n", pvn_core::agent::EvalReport::csv_header(), r.csv_row()))?;
    write_text(&out.join("episodes.csv"), &csv_of(|b| r.write_episodes_csv(b))?)?;
    write_text(&out.join("online_log.csv"), &csv_of(|b| o.log.write_csv(b))?)
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli.global.out.clone();
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::Dataset { transitions } => {
            let mut cfg = load_config(&cli.global)?;
            if let Some(t) = transitions {
                cfg.env.dataset_transitions = t;
            }
            let d = cfg.generate_dataset()?;
            let path = out.join("dataset.pvnd");
            write_dataset(&d, &path)?;
            println!("wrote {} transitions to {}", d.len(), path.display());
        }
        Command::Pretrain {
            dataset,
            env: PretrainEnv::FourRooms,
            tasks,
            num_tasks,
            width_mult,
            steps,
        } => {
            let mut cfg = load_config(&cli.global)?;
            if let Some(k) = tasks {
                cfg.tasks.kind = k;
            }
            if let Some(m) = num_tasks {
                cfg.tasks.num_tasks = m;
            }
            if let Some(w) = width_mult {
                cfg.encoder.width_mult = w;
            }
            if let Some(s) = steps {
                cfg.trainer.gradient_steps = s;
            }
            let d = match dataset {
                Some(p) => read_dataset(&p)?,
                None => cfg.generate_dataset()?,
            };
            let pre = cfg.pretrain(&d)?;
            write_checkpoint(&pre.checkpoint, &out.join("checkpoint.pvnc"))?;
            write_text(&out.join("config.toml"), &cfg.to_toml_string())?;
            write_text(&out.join("pretrain_log.csv"), &csv_of(|b| pre.log.write_csv(b))?)?;
            if let Some((first, last)) = pre.log.loss_trend() {
                println!("loss {first:.6e} -> {last:.6e}");
            }
            println!("config hash {}", hex(&cfg.config_hash()));
        }
        Command::Online { ckpt, env, steps } => {
            let (mut cfg, checkpoint) = checkpoint_config(&cli.global, &ckpt)?;
            if let Some(s) = steps {
                cfg.online.agent_steps = s;
            }
            let environment: Environment = match env {
                EnvChoice::FourRoomsGoal => cfg.goal_env()?,
                EnvChoice::FourRooms => cfg.pretrain_env()?,
            };
            let sum = checkpoint.encoder.net.checksum();
            let o = online_train(&environment, &checkpoint.encoder, Some(sum), &cfg.online, cfg.online_seed)?;
            write_online(&out, &o)?;
            println!(
                "mean return {:.6} over {} episodes (optimal {:?})",
                o.report.mean_return, o.report.episodes, o.report.optimal_mean_return
            );
        }
        Command::Sweep {
            widths,
            tasks,
            seeds,
            online_seeds,
            parallelism,
        } => {
            let spec = SweepSpec {
                base: load_config(&cli.global)?,
                widths,
                num_tasks: tasks,
                seeds,
                online_seeds,
                parallelism,
            };
            let rows = run_sweep(&spec, &out)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} runs, {failed} failed; table in {}", rows.len(), out.join("sweep.csv").display());
            return Ok(failed == 0);
        }
        Command::Mds { ckpt } => {
            let (cfg, checkpoint) = checkpoint_config(&cli.global, &ckpt)?;
            let o = cfg.online(&checkpoint)?;
            let env = cfg.goal_env()?;
            let trajectory = analysis_trajectory(&env, &checkpoint.encoder, &o)?;
            let rows = trajectory_features(&env, &checkpoint.encoder, &trajectory)?;
            let mds = classical_mds(&rows)?;
            let mut text = String::from("# features: penultimate layer, raw L2 distances\n");
            text.push_str(&csv_of(|b| mds.write_csv(b))?);
            write_text(&out.join("mds.csv"), &text)?;
            let mut baseline = cfg.clone();
            baseline.tasks.num_tasks = 0;
            let init = baseline.initial_encoder(env.obs_dim(), env.n_actions())?;
            let init_rows = trajectory_features(&env, &init, &trajectory)?;
            let ratio = |r| temporal_smoothness(r).map(|s| s.ratio).unwrap_or(f64::NAN);
            let (a, b) = (ratio(&rows), ratio(&init_rows));
            write_text(
                &out.join("smoothness.csv"),
                &format!("encoder,ratio,trajectory_length\ntrained,{a:.12e},{n}\nrandom-init,{b:.12e},{n}\n", n = trajectory.len()),
            )?;
            println!("stress {:.4}, smoothness {a:.4} (random init {b:.4})", mds.stress);
            if mds.degenerate {
                println!("features are degenerate along the trajectory");
            }
        }
        Command::Ablate {
            seeds,
            parallelism,
            report_only,
        } => {
            let base = load_config(&cli.global)?;
            let conditions = ablation_conditions(&base, &seeds);
            let store = RunStore::new(&out);
            if !report_only {
                let all: Vec<ExperimentConfig> = conditions.iter().flat_map(|c| c.runs.clone()).collect();
                for r in run_all(&store, &all, parallelism) {
                    if let Err(e) = r {
                        eprintln!("run failed: {e}");
                    }
                }
            }
            let report = ablation_report(&store, &conditions, &default_comparisons())?;
            write_text(&out.join("ablation_table.csv"), &report.table_csv())?;
            write_text(&out.join("ablation_tests.csv"), &report.comparisons_csv())?;
            print!("{}", report.comparisons_csv());
        }
        Command::VerifyTheory { random_mdps } => {
            let checks = verify_theory(cli.global.seed.unwrap_or(0), random_mdps)?;
            let mut text = String::from("check,passed,detail\n");
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                text.push_str(&format!("{},{},\"{}\"\n", c.name, c.passed, c.detail.replace('"', "'")));
            }
            write_text(&out.join("theory.csv"), &text)?;
            let mdp = load_config(&cli.global)?.pretrain_env()?.mdp().clone();
            let pi = Policy::uniform(mdp.n_states(), mdp.n_actions());
            let sr = successor_representation(&mdp, &pi)?;
            export_spectra(&out.join("spectra"), &proto_value_functions(&mdp)?, Some(&sr))?;
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Activations { proportions, seeds } => {
            let cfg = load_config(&cli.global)?;
            let mut text = String::from("proportion,seed,task,activation\n");
            for &p in &proportions {
                for &s in &seeds {
                    let acts = quantile_activation_trial(&cfg, p, s)?;
                    for (j, a) in acts.iter().enumerate() {
                        text.push_str(&format!("{p},{s},{j},{a}\n"));
                    }
                    let mean = acts.iter().sum::<f64>() / acts.len().max(1) as f64;
                    println!("p = {p}, seed {s}: mean activation {mean:.4}");
                }
            }
            write_text(&out.join("activations.csv"), &text)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingRuns(hashes) = &e {
                for h in hashes {
                    eprintln!("  missing run {h}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
