use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dploda::accountant::{calibrate_sigma, compose, integer_orders, rdp_to_eps_delta, RdpCurve};
use dploda::data::{gen_shapes_dataset, Style, SHAPE_CLASSES};
use dploda::io::{self, Checkpoint};
use dploda::pipeline::{self, meta_key, FinetuneMode, Metrics, RunConfig, RunLock, RunPaths, Split, Tracked};
use dploda::{Error, Result};

const PRECEDENCE: &str = "Settings are applied in order: built-in defaults, then --config, then each \
--set section.key=value, then --seed. Set DPLODA_THREADS to cap worker threads.";

#[derive(Parser, Debug)]
#[command(
    name = "dploda",
    version,
    about = "DP fine-tuning of a small diffusion model through convolutional adapters"
)]
#[command(after_long_help = long_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn long_help() -> String {
    format!(
        "{PRECEDENCE}\n\nConfiguration keys and defaults:\n{}",
        RunConfig::describe_defaults()
    )
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// INI config file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `pipeline.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Override one key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ModeArg {
    /// Fine-tuning mode; defaults to `dp.mode`.
    #[arg(long)]
    mode: Option<FinetuneMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural shapes dataset.
    GenData {
        #[arg(long)]
        style: Style,
        /// Images per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = SHAPE_CLASSES)]
        classes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unconditional pre-training on the public split.
    Pretrain1(RunArgs),
    /// Conditional pre-training on part of the public split.
    Pretrain2 {
        #[command(flatten)]
        run: RunArgs,
        /// Start from fresh weights instead of the step-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// DP-SGD fine-tuning on the private split.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mode: ModeArg,
        /// Continue from an existing fine-tuning checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample a labeled synthetic dataset from a fine-tuned model.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Train the downstream classifier on synthetic data.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Score a classifier on the private test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        mode: ModeArg,
        /// Evaluate the direct DP-SGD classifier instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Train the classifier directly on the private split with DP-SGD.
    BaselineDpsgd(RunArgs),
    /// Privacy spend of a DP-SGD schedule.
    Account {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Smallest noise multiplier meeting a budget.
    Calibrate {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
    },
    /// Every stage in order, ending with report.json.
    RunAll(RunArgs),
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&run.config)?;
    for o in &run.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = run.seed {
        cfg.pipeline.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config, lock, paths, and metrics for a single-stage command.
struct Stage {
    cfg: RunConfig,
    paths: RunPaths,
    metrics: Metrics,
    _lock: RunLock,
}

impl Stage {
    fn open(run: &RunArgs, name: &str) -> Result<Self> {
        let cfg = load_config(run)?;
        let lock = RunLock::acquire(&run.out)?;
        let paths = RunPaths::new(&run.out);
        let mut metrics = Metrics::append_to(&paths.metrics())?;
        metrics.emit(
            "config",
            0,
            None,
            None,
            serde_json::Map::from_iter([
                ("command".to_string(), json!(name)),
                ("config".to_string(), json!(cfg)),
                ("seed".to_string(), json!(cfg.pipeline.seed)),
            ]),
        )?;
        Ok(Stage {
            cfg,
            paths,
            metrics,
            _lock: lock,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.pipeline.seed
    }

    fn mode(&self, arg: &ModeArg) -> FinetuneMode {
        arg.mode.unwrap_or(self.cfg.dp.mode)
    }

    fn base(&self) -> Result<pipeline::Store> {
        Ok(io::load_checkpoint::<f32>(&self.paths.pretrain2())?.store)
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_classifier(cfg: &RunConfig, path: &Path) -> Result<(dploda::nn::Classifier, pipeline::Store)> {
    let net = pipeline::classifier(cfg)?;
    let store = io::load_checkpoint::<f32>(path)?.store;
    Ok((net, store))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData {
            style,
            n,
            classes,
            seed,
            out,
        } => {
            let d = gen_shapes_dataset(style, n, classes, seed)?;
            let path = out.join(format!("{style}.idx"));
            io::write_dataset(&d, &path)?;
            print_json(&json!({"path": path, "images": d.len(), "class_counts": d.class_counts()}))?;
        }
        Command::Pretrain1(run) => {
            let mut s = Stage::open(&run, "pretrain1")?;
            let data = pipeline::ensure_data(&s.cfg, s.seed(), &s.paths)?;
            let out = pipeline::pretrain_step1(&s.cfg, &data.public, s.seed(), &mut s.metrics)?;
            io::save_checkpoint(&out.store, &BTreeMap::new(), &s.paths.pretrain1(), false)?;
            print_json(&json!(out.summary()))?;
        }
        Command::Pretrain2 { run, from_scratch } => {
            let mut s = Stage::open(&run, "pretrain2")?;
            let data = pipeline::ensure_data(&s.cfg, s.seed(), &s.paths)?;
            let init = if from_scratch {
                None
            } else {
                Some(io::load_checkpoint::<f32>(&s.paths.pretrain1())?.store)
            };
            let out = pipeline::pretrain_step2(&s.cfg, &data.public, init, s.seed(), &mut s.metrics)?;
            io::save_checkpoint(&out.store, &BTreeMap::new(), &s.paths.pretrain2(), false)?;
            print_json(&json!(out.summary()))?;
        }
        Command::Finetune { run, mode, resume } => {
            let mut s = Stage::open(&run, "finetune")?;
            let mode = s.mode(&mode);
            let data = pipeline::ensure_data(&s.cfg, s.seed(), &s.paths)?;
            let base = s.base()?;
            let log = pipeline::AccessLog::new();
            let private = Tracked::new(&data.private_train, Split::PrivateTrain, &log);
            let dp = pipeline::dp_config(&s.cfg, s.cfg.dp.epochs, s.cfg.dp.lr)?;
            let prior: Option<Checkpoint<f32>> = if resume {
                Some(io::load_checkpoint(&s.paths.finetune(mode))?)
            } else {
                None
            };
            let seed = s.seed();
            let out = pipeline::dp_finetune(&s.cfg, &base, &private, mode, &dp, seed, prior.as_ref(), &mut s.metrics)?;
            let bytes = out.save(&s.paths.finetune(mode), seed)?;
            print_json(&json!({
                "mode": mode,
                "noise_multiplier": out.sigma,
                "steps": out.steps,
                "spend": out.spend,
                "trainable_params": out.trainable,
                "total_params": out.total,
                "checkpoint_bytes": bytes,
                "halted": out.halted,
            }))?;
            if out.halted {
                eprintln!(
                    "dploda: privacy budget exhausted after {} steps; checkpoint saved",
                    out.steps
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Generate { run, mode } => {
            let s = Stage::open(&run, "generate")?;
            let mode = s.mode(&mode);
            let ck = io::load_checkpoint::<f32>(&s.paths.finetune(mode))?;
            let (net, store) = pipeline::load_finetuned(&s.cfg, &s.base()?, &ck)?;
            let synth =
                pipeline::generate_synthetic(&s.cfg, &net, &store, s.cfg.pipeline.synthetic_per_class, s.seed())?;
            io::write_dataset(&synth.data, &s.paths.synthetic(mode))?;
            let per_row = s.cfg.pipeline.grid_per_class.min(s.cfg.pipeline.synthetic_per_class);
            io::export_image_grid(
                &pipeline::grid_samples(&synth.data, per_row)?,
                per_row,
                &s.paths.grid(mode),
            )?;
            print_json(&json!({"mode": mode, "images": synth.data.len(), "hash": synth.hash}))?;
        }
        Command::TrainClassifier { run, mode } => {
            let mut s = Stage::open(&run, "train-classifier")?;
            let mode = s.mode(&mode);
            let synth = io::read_dataset(&s.paths.synthetic(mode))?;
            let log = pipeline::AccessLog::new();
            let tracked = Tracked::new(&synth, Split::Synthetic, &log);
            let seed = s.seed();
            let out =
                pipeline::train_downstream(&s.cfg, &tracked, &format!("downstream_{mode}"), seed, &mut s.metrics)?;
            io::save_checkpoint(&out.store, &BTreeMap::new(), &s.paths.classifier(mode), false)?;
            print_json(
                &json!({"mode": mode, "train_accuracy": out.train_accuracy, "final_epoch_loss": out.final_epoch_loss}),
            )?;
        }
        Command::Evaluate { run, mode, baseline } => {
            let s = Stage::open(&run, "evaluate")?;
            let test = io::read_dataset(&s.paths.private_test())?;
            let (name, path) = if baseline {
                ("baseline".to_string(), s.paths.baseline())
            } else {
                let m = s.mode(&mode);
                (m.to_string(), s.paths.classifier(m))
            };
            let (net, store) = load_classifier(&s.cfg, &path)?;
            let log = pipeline::AccessLog::new();
            let tracked = Tracked::new(&test, Split::PrivateTest, &log);
            let eval = pipeline::evaluate(&net, &store, &tracked, "evaluate", s.cfg.pipeline.sample_batch)?;
            let v = json!({"classifier": name, "evaluation": eval});
            io::write_file(
                &run.out.join(format!("eval_{name}.json")),
                serde_json::to_string_pretty(&v)?.as_bytes(),
            )?;
            print_json(&v)?;
        }
        Command::BaselineDpsgd(run) => {
            let mut s = Stage::open(&run, "baseline-dpsgd")?;
            let data = pipeline::ensure_data(&s.cfg, s.seed(), &s.paths)?;
            let log = pipeline::AccessLog::new();
            let private = Tracked::new(&data.private_train, Split::PrivateTrain, &log);
            let dp = pipeline::dp_config(&s.cfg, s.cfg.pipeline.baseline_epochs, s.cfg.pipeline.baseline_lr)?;
            let seed = s.seed();
            let out = pipeline::baseline_dpsgd_classifier(&s.cfg, &private, &dp, seed, &mut s.metrics)?;
            let meta = BTreeMap::from([(meta_key::DP_STEPS.to_string(), out.steps)]);
            io::save_checkpoint(&out.store, &meta, &s.paths.baseline(), false)?;
            print_json(
                &json!({"noise_multiplier": out.sigma, "steps": out.steps, "spend": out.spend, "halted": out.halted}),
            )?;
            if out.halted {
                eprintln!(
                    "dploda: privacy budget exhausted after {} steps; checkpoint saved",
                    out.steps
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Account { q, sigma, steps, delta } => {
            let curve = compose(&RdpCurve::subsampled_gaussian(q, sigma, &integer_orders())?, steps);
            let spend = rdp_to_eps_delta(&curve, delta)?;
            let points: Vec<_> = curve
                .orders
                .iter()
                .zip(&curve.rdp)
                .map(|(a, r)| json!({"alpha": a, "rdp": if r.is_finite() { json!(r) } else { json!(null) }}))
                .collect();
            print_json(&json!({
                "q": q, "sigma": sigma, "steps": steps, "delta": delta,
                "epsilon": spend.epsilon, "order": spend.order, "curve": points,
            }))?;
        }
        Command::Calibrate {
            q,
            steps,
            epsilon,
            delta,
        } => {
            let sigma = calibrate_sigma(q, steps, epsilon, delta)?;
            print_json(&json!({"q": q, "steps": steps, "epsilon": epsilon, "delta": delta, "sigma": sigma}))?;
        }
        Command::RunAll(run) => {
            let cfg = load_config(&run)?;
            let report = pipeline::run_all(&cfg, &run.out)?;
            let summary: Vec<_> = report
                .modes
                .iter()
                .map(|m| json!({"mode": m.mode, "epsilon": m.spend.epsilon, "accuracy": m.evaluation.accuracy}))
                .collect();
            print_json(&json!({
                "report": run.out.join("report.json"),
                "modes": summary,
                "baseline": {"epsilon": report.baseline.spend.epsilon, "accuracy": report.baseline.evaluation.accuracy},
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DPLODA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DPLODA_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("dploda: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("dploda: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("dploda: {e}");
            ExitCode::from(2)
        }
    }
}
