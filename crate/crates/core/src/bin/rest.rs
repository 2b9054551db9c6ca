use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use rest_core::config::{ConfigError, ExperimentConfig};
use rest_core::driver::{self, Experiment};
use rest_core::grow;
use rest_core::improve;
use rest_core::oracle;
use rest_core::policy::PolicyCheckpoint;
use rest_core::seeding;

#[derive(Parser)]
#[command(name = "rest", about = "Reinforced self-training on a toy translation task")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (or file, for single-artifact commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// BC training on the original data.
    Pretrain,
    /// Sample and annotate a Grow dataset from a checkpoint.
    Grow {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1)]
        index: usize,
    },
    /// Run the Improve schedule on a stored Grow dataset.
    Improve {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Behaviour prior for the KL-regularized loss; defaults to `policy`.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// The full Grow/Improve loop.
    Rest,
    /// Mean eval-split reward of a checkpoint.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "eval", value_parser = ["eval", "test"])]
        split: String,
    },
    /// Best-of-N reward on the eval split for several N.
    BestOfN {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        n: Vec<usize>,
    },
    /// Exact tabular sweep of repeated filtered improvement.
    Oracle {
        #[arg(long, default_value_t = 100)]
        instances: u64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Comparison table over run directories.
    Report { runs: Vec<PathBuf> },
}

enum Failure {
    Validation(anyhow::Error),
    Phase(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Phase(e)
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(p) = &c.precision {
        overrides.push(format!("precision={p}"));
    }
    Ok(ExperimentConfig::load(c.config.as_deref(), &overrides)?)
}

fn load_policy(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<PolicyCheckpoint> {
    let mut p = PolicyCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    p.set_precision(cfg.precision());
    Ok(p)
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::Pretrain => {
            let exp = Experiment::new(cfg);
            let (bc, steps) = exp.pretrain().context("pretrain")?;
            let reward = exp.eval_reward(&bc, &exp.splits.eval);
            let dir = out.unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).context("creating output directory")?;
            bc.save(&dir.join("bc.json")).context("saving checkpoint")?;
            println!("steps={steps} eval_nll={:.6} eval_reward={reward:.6}", exp.eval_nll(&bc));
        }
        Command::Grow { policy, index } => {
            let exp = Experiment::new(cfg.clone());
            let p = load_policy(&policy, &cfg)?;
            let d = exp.grow(&p, index).context("grow")?;
            let text = grow::to_text(&d, &p.vocab);
            emit(out, &text)?;
            eprintln!(
                "{} records ({} sampled), sampled value {:.6}",
                d.len(),
                d.n_sampled,
                d.sampled_value().unwrap_or(0.0)
            );
        }
        Command::Improve { policy, dataset, prior } => {
            let exp = Experiment::new(cfg.clone());
            let p = load_policy(&policy, &cfg)?;
            let prior = match prior {
                Some(path) => load_policy(&path, &cfg)?,
                None => p.clone(),
            };
            let d = grow::load(&dataset, &p.vocab).context("loading dataset")?;
            let value = if cfg.loss_spec().needs_value() {
                Some(exp.train_value(&d, d.grow).context("value")?)
            } else {
                None
            };
            let (fin, rows, _) = exp.improve(&p, &d, &prior, value.as_ref()).context("improve")?;
            let dir = out.unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).context("creating output directory")?;
            fin.save(&dir.join("improved.json")).context("saving checkpoint")?;
            std::fs::write(dir.join("improve_report.csv"), improve::rows_to_csv(&rows))
                .context("writing report")?;
            print!("{}", improve::rows_to_csv(&rows));
        }
        Command::Rest => {
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_name));
            let (_, record) = driver::run_rest(&cfg, Some(&dir)).context("rest")?;
            println!(
                "final eval reward {:.6}, test reward {:.6}; run directory {}",
                record.final_eval_reward,
                record.final_test_reward,
                dir.display()
            );
        }
        Command::Eval { policy, split } => {
            let exp = Experiment::new(cfg.clone());
            let p = load_policy(&policy, &cfg)?;
            let contexts = if split == "test" { &exp.splits.test } else { &exp.splits.eval };
            println!("{:.6}", exp.eval_reward(&p, contexts));
        }
        Command::BestOfN { policy, n } => {
            let exp = Experiment::new(cfg.clone());
            let p = load_policy(&policy, &cfg)?;
            let mut text = String::from("n,reward\n");
            for k in n {
                let r = driver::best_of_n_reward(
                    &p,
                    &exp.splits.eval,
                    k,
                    &exp.reward,
                    cfg.temperature,
                    cfg.task().output_max_len(),
                    seeding::derive(cfg.seed, "best-of-n", k as u64),
                );
                text.push_str(&format!("{k},{r:.6}\n"));
            }
            emit(out, &text)?;
        }
        Command::Oracle { instances, steps, lambda } => {
            let rows = oracle::sweep(0..instances, steps, lambda).context("oracle")?;
            emit(out, &oracle::sweep_to_csv(&rows))?;
        }
        Command::Report { runs } => {
            emit(out, &driver::emit_report(&runs))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Phase(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
