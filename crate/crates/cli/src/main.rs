//! `ifsl`: generate shape-world data, train and evaluate the network, and run
//! the self-check suites.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 configuration error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ifsl::asnet::{build_asnet, AsnetConfig};
use ifsl::harness::io::write_label_map;
use ifsl::harness::metrics::episode_csv;
use ifsl::harness::{generate_dataset, Dataset};
use ifsl::train::{evaluate, train, Model};
use ifsl::verify::{self, Suite, PARAM_TARGET, PARAM_TOLERANCE};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Run(#[from] ifsl::Error),
    #[error("{0} check(s) failed")]
    Failed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(ifsl::Error::Invalid(_)) => 2,
            CliError::Run(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ifsl", version, about = "Few-shot classification and segmentation on synthetic shapes")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long, env = "IFSL_DATA_DIR")]
    data: Option<PathBuf>,
    /// Held-out class fold.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a shape-world dataset to disk.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on episodes and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// classification, segmentation or both.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a seeded episode stream.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        delta: Option<f64>,
        /// Metric report (CSV).
        #[arg(long)]
        report: Option<PathBuf>,
        /// One row per episode (CSV).
        #[arg(long)]
        episodes_csv: Option<PathBuf>,
        /// Directory for predicted label maps (PGM).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run every self-check suite.
    Verify {
        /// Random points per primitive gradient check.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Gradient checks only.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Attention and convolution oracle comparisons only.
    Oracle,
    /// Learnable parameter count of a channel plan.
    Params {
        /// Correlation channels per level, e.g. `4,6,3`; defaults to the
        /// reference plans.
        #[arg(long, value_delimiter = ',')]
        plan: Option<Vec<usize>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate {
            data,
            classes,
            image_size,
            images_per_class,
            seed,
        } => {
            apply_data(&mut cfg, data);
            set(&mut cfg.data.classes, classes);
            set(&mut cfg.data.image_size, image_size);
            set(&mut cfg.data.images_per_class, images_per_class);
            set(&mut cfg.data.seed, seed);
            let dir = data_dir(&cfg)?;
            let spec = cfg.data.spec();
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let dataset = generate_dataset(&spec)?;
            dataset.save(&dir)?;
            println!("wrote {} images of {} classes to {}", dataset.len(), spec.num_classes, dir.display());
        }
        Command::Train {
            data,
            checkpoint,
            loss,
            steps,
            batch_size,
            lr,
            seed,
            log,
        } => {
            apply_data(&mut cfg, data);
            set(&mut cfg.train.checkpoint, checkpoint);
            set(&mut cfg.train.loss, loss);
            set(&mut cfg.train.steps, steps);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.seed, seed);
            if lr.is_some() {
                cfg.train.lr = lr;
            }
            if log.is_some() {
                cfg.train.log = log;
            }
            cmd_train(&cfg)?;
        }
        Command::Eval {
            data,
            checkpoint,
            n_way,
            k_shot,
            episodes,
            seed,
            delta,
            report,
            episodes_csv,
            predictions,
        } => {
            apply_data(&mut cfg, data);
            set(&mut cfg.train.checkpoint, checkpoint);
            set(&mut cfg.eval.n_way, n_way);
            set(&mut cfg.eval.k_shot, k_shot);
            set(&mut cfg.eval.episodes, episodes);
            set(&mut cfg.eval.seed, seed);
            set(&mut cfg.eval.delta, delta);
            for (slot, v) in [
                (&mut cfg.eval.report, report),
                (&mut cfg.eval.episodes_csv, episodes_csv),
                (&mut cfg.eval.predictions, predictions),
            ] {
                if v.is_some() {
                    *slot = v;
                }
            }
            cmd_eval(&cfg)?;
        }
        Command::Verify { points } => report_suites(&verify::run_all(points))?,
        Command::Gradcheck { points } => report_suites(&[verify::gradient_suite(points)])?,
        Command::Oracle => report_suites(&[verify::oracle_suite()])?,
        Command::Params { plan } => cmd_params(plan)?,
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_data(cfg: &mut RunConfig, args: DataArgs) {
    if args.data.is_some() {
        cfg.data.dir = args.data;
    }
    if args.fold.is_some() {
        cfg.data.fold = args.fold;
    }
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data
        .dir
        .clone()
        .ok_or_else(|| CliError::Config("no dataset directory (use --data, [data] dir or IFSL_DATA_DIR)".into()))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = data_dir(cfg)?;
    if !dir.join(ifsl::harness::io::MANIFEST).is_file() {
        return Err(CliError::Config(format!("{} holds no dataset manifest", dir.display())));
    }
    Ok(Dataset::load(&dir)?)
}

/// Class pools for training and evaluation.
fn pools(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    match cfg.data.fold {
        None => Ok((data.all_classes(), data.all_classes())),
        Some(f) if f < data.spec.folds => Ok((data.train_classes(f), data.fold_classes(f))),
        Some(f) => Err(CliError::Config(format!("fold {f} of {}", data.spec.folds))),
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(ifsl::Error::from)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(ifsl::Error::from)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let (train_pool, _) = pools(cfg, &data)?;
    let train_cfg = cfg.train.config()?;
    let mut model = Model::<f32>::new(&cfg.model.config())?;
    let start = Instant::now();
    let every = (train_cfg.steps / 20).max(1);
    let mut log = String::from("step,loss\n");
    let result = train(&mut model, &data, &train_pool, &train_cfg, |step, loss| {
        log.push_str(&format!("{step},{loss}\n"));
        if (step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {loss:.5}  {:.0}s", step + 1, start.elapsed().as_secs_f64());
        }
    });
    if let Some(path) = &cfg.train.log {
        write_file(path, &log)?;
    }
    let trained = result?;
    ensure_parent(&cfg.train.checkpoint)?;
    model.save(&cfg.train.checkpoint)?;
    println!(
        "trained {} steps, final loss {:.5}, checkpoint {}",
        trained.losses.len(),
        trained.losses.last().copied().unwrap_or(f64::NAN),
        cfg.train.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let (_, eval_pool) = pools(cfg, &data)?;
    let train_cfg = cfg.train.config()?;
    let eval_cfg = cfg.eval.config(&train_cfg);
    let model = Model::<f32>::load(&cfg.model.config(), &cfg.train.checkpoint).map_err(|e| match e {
        ifsl::Error::Checkpoint(m) => CliError::Config(format!("checkpoint does not match the configuration: {m}")),
        other => CliError::Run(other),
    })?;
    let (report, records) = evaluate(&model, &data, &eval_pool, &eval_cfg)?;
    print!("{}", report.to_csv());
    if let Some(path) = &cfg.eval.report {
        write_file(path, &report.to_csv())?;
    }
    if let Some(path) = &cfg.eval.episodes_csv {
        write_file(path, &episode_csv(&records))?;
    }
    if let Some(dir) = &cfg.eval.predictions {
        fs::create_dir_all(dir).map_err(ifsl::Error::from)?;
        for (i, (_, outcome)) in records.iter().enumerate() {
            write_label_map(&dir.join(format!("episode_{i:05}.pgm")), &outcome.seg_pred)?;
        }
    }
    Ok(())
}

fn report_suites(suites: &[Suite]) -> Result<(), CliError> {
    let mut failed = 0;
    for suite in suites {
        println!("[{}] {:.1}s", suite.name, suite.seconds);
        for c in &suite.checks {
            println!("  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            failed += usize::from(!c.passed);
        }
    }
    if failed > 0 {
        return Err(CliError::Failed(failed));
    }
    println!("all checks passed");
    Ok(())
}

fn cmd_params(plan: Option<Vec<usize>>) -> Result<(), CliError> {
    let Some(plan) = plan else {
        return report_suites(&[verify::parameter_suite()]);
    };
    let cfg = AsnetConfig {
        level_channels: plan.clone(),
        ..Default::default()
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let n = build_asnet::<f32>(&cfg)?.param_count();
    let within = (n as f64 - PARAM_TARGET).abs() <= PARAM_TOLERANCE * PARAM_TARGET;
    println!("plan {plan:?}: {n} learnable parameters ({})", if within { "within 1.3M +-20%" } else { "outside 1.3M +-20%" });
    Ok(())
}
