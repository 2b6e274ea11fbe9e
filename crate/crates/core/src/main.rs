use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use prealign::data::{self, Dataset};
use prealign::error::{Error, Result};
use prealign::learn::Rule;
use prealign::metrics;
use prealign::net::{self, Mlp};
use prealign::noise::NoiseDistribution;
use prealign::runner::presets::{self, family_dir};
use prealign::runner::{
    self, parse_override, ArmSpec, ExperimentConfig, InitSpec, NetSpec, PretrainSpec, RunReport, Stage, SweepAxis,
    TrainSpec,
};

#[derive(Parser)]
#[command(name = "prealign", version, about = "Feedback alignment with random-noise pretraining")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Master seed for every derived random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Divide noise samples and data epochs by this factor.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Worker threads for independent trials.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root (default: $PREALIGN_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Start every arm from this checkpoint.
    #[arg(long, global = true)]
    init: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Random-noise pretraining of a fresh network.
    Pretrain {
        #[arg(long, value_delimiter = ',', default_value = "784,100,10")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 500_000)]
        samples: usize,
        #[arg(long, default_value_t = 5000)]
        samples_per_epoch: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Gaussian noise std (mean 0).
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Data training; runs `--config` as-is when given.
    Train {
        /// mnist, fmnist or kmnist.
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, value_delimiter = ',', default_value = "100")]
        hidden: Vec<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long, value_enum, default_value = "fa")]
        rule: RuleArg,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Noise-pretrain (500k Gaussian samples) before data training.
        #[arg(long)]
        pretrain: bool,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Loss and accuracy of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Alignment, distance and effective rank of every layer of a checkpoint.
    Metrics {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a figure or table preset.
    Reproduce {
        id: String,
        /// Print the resolved config instead of running it.
        #[arg(long)]
        dry_run: bool,
    },
    /// Cartesian sweep over `--axis key=v1,v2,...` on top of `--config`.
    Sweep {
        #[arg(long, value_name = "KEY=V1,V2")]
        axis: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RuleArg {
    Fa,
    Bp,
}

impl From<RuleArg> for Rule {
    fn from(r: RuleArg) -> Rule {
        match r {
            RuleArg::Fa => Rule::Fa,
            RuleArg::Bp => Rule::Bp,
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

/// Layers `--set` overrides and then the explicit global flags on `cfg`.
fn apply_globals(mut cfg: ExperimentConfig, g: &Global) -> Result<ExperimentConfig> {
    let sets = g.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    cfg = cfg.with_overrides(&sets)?;
    if let Some(s) = g.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = g.scale {
        cfg.scale = s;
    }
    if let Some(d) = &g.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(p) = &g.init {
        for arm in &mut cfg.arms {
            arm.init = InitSpec::Checkpoint(p.clone());
        }
    }
    Ok(cfg)
}

fn family_split(name: &str, split: &str, n: Option<usize>) -> Result<runner::DatasetSpec> {
    let dir = family_dir(name)
        .ok_or_else(|| Error::Usage(format!("unknown dataset '{name}'; use mnist, fmnist or kmnist")))?;
    let test = match split {
        "test" => true,
        "train" => false,
        other => return Err(Error::Usage(format!("split must be train or test, got '{other}'"))),
    };
    Ok(presets::idx(dir, test, n))
}

fn report(reports: &[RunReport]) -> Result<()> {
    let mut worst: Option<Error> = None;
    for r in reports {
        println!("wrote {}", r.output_dir.display());
        for f in &r.failures {
            eprintln!("trial {} of arm '{}' failed: {}", f.trial, f.arm, f.error);
            if worst.is_none() {
                worst = Some(match f.exit_code {
                    3 => Error::Numeric(f.error.clone()),
                    1 => Error::Config(f.error.clone()),
                    _ => Error::Data(f.error.clone()),
                });
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn load_split(g: &Global, dataset: &str, split: &str) -> Result<Dataset> {
    let spec = family_split(dataset, split, None)?;
    let root = runner::resolve_data_dir(g.data_dir.as_deref());
    let runner::DataSource::Idx { images, labels } = spec.source else { unreachable!("family datasets are IDX") };
    data::load_idx(&root.join(images), &root.join(labels))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure threads: {e}")))?;
    }
    match cli.command {
        Command::Pretrain { dims, samples, samples_per_epoch, batch, lr, std, trials } => {
            let cfg = match &g.config {
                Some(p) => load_config(p)?,
                None => {
                    if dims.len() < 2 {
                        return Err(Error::Usage("--dims needs at least input and output sizes".into()));
                    }
                    let mut c = presets::preset("fig1e")?;
                    c.experiment_id = "pretrain".into();
                    c.output_dir = PathBuf::from("runs/pretrain");
                    c.trials = trials;
                    c.net = NetSpec {
                        input_dim: dims[0],
                        hidden: dims[1..dims.len() - 1].to_vec(),
                        classes: dims[dims.len() - 1],
                    };
                    c.metrics.angles = (0..dims.len() - 1).collect();
                    c.metrics.distance = (0..dims.len() - 1).collect();
                    c.metrics.effective_rank = (0..dims.len() - 1).collect();
                    c.pretrain = Some(PretrainSpec {
                        distribution: NoiseDistribution::Gaussian { mean: 0.0, std },
                        total_samples: samples,
                        samples_per_epoch,
                        batch_size: batch,
                        learning_rate: lr,
                    });
                    c
                }
            };
            report(&runner::run_experiment(&apply_globals(cfg, g)?)?)
        }
        Command::Train {
            dataset,
            hidden,
            train_size,
            test_size,
            rule,
            epochs,
            patience,
            batch,
            lr,
            pretrain,
            trials,
        } => {
            let cfg = match &g.config {
                Some(p) => load_config(p)?,
                None => {
                    let mut c = presets::preset("fig2b")?;
                    c.experiment_id = "train".into();
                    c.output_dir = PathBuf::from("runs/train");
                    c.trials = trials;
                    c.net.hidden = hidden;
                    c.train = Some(TrainSpec {
                        rule: rule.into(),
                        learning_rate: lr,
                        batch_size: batch,
                        epochs,
                        patience,
                        shuffle: true,
                    });
                    c.datasets.clear();
                    c.datasets.insert("train".into(), family_split(&dataset, "train", train_size)?);
                    c.datasets.insert("test".into(), family_split(&dataset, "test", test_size)?);
                    let mut stages = Vec::new();
                    if pretrain {
                        stages.push(Stage::Noise { distribution: None });
                    }
                    stages.push(Stage::Data { rule: None, train: "train".into(), test: "test".into() });
                    let name = format!("{}{}", Rule::from(rule).as_str(), if pretrain { "_pretrain" } else { "" });
                    c.arms = vec![ArmSpec { name, init: InitSpec::He, stages }];
                    c
                }
            };
            report(&runner::run_experiment(&apply_globals(cfg, g)?)?)
        }
        Command::Eval { model, dataset, split } => {
            let mlp = Mlp::load(&model)?;
            let ds = load_split(g, &dataset, &split)?;
            let (loss, acc) = net::evaluate(&mlp, ds.images(), ds.labels())?;
            println!(
                "{}",
                json!({ "model": model, "dataset": dataset, "split": split, "loss": loss, "accuracy": acc })
            );
            Ok(())
        }
        Command::Metrics { model } => {
            let mlp = Mlp::load(&model)?;
            let mut layers = Vec::new();
            for l in 0..mlp.layer_count() {
                layers.push(json!({
                    "layer": l,
                    "mean_angle_deg": metrics::alignment_angles(&mlp, l)?.mean_deg,
                    "distance": metrics::weight_feedback_distance(&mlp, l)?,
                    "effective_rank": metrics::effective_rank(&mlp.weights()[l])?,
                }));
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({ "dims": mlp.dims(), "layers": layers })).expect("json")
            );
            Ok(())
        }
        Command::Reproduce { id, dry_run } => {
            let mut cfg = presets::preset(&id)?;
            cfg.scale = 5.0;
            let cfg = apply_globals(cfg, g)?;
            if dry_run {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            report(&runner::run_experiment(&cfg)?)
        }
        Command::Sweep { axis } => {
            let Some(p) = &g.config else {
                return Err(Error::Usage("sweep needs --config".into()));
            };
            let mut cfg = apply_globals(load_config(p)?, g)?;
            for a in &axis {
                let (key, raw) =
                    a.split_once('=').ok_or_else(|| Error::Usage(format!("axis '{a}' must look like key=v1,v2")))?;
                let values: Vec<Value> = raw
                    .split(',')
                    .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
                    .collect();
                cfg.sweep.push(SweepAxis::over(key, values));
            }
            if cfg.sweep.is_empty() {
                return Err(Error::Usage("sweep needs at least one --axis or a config with sweep axes".into()));
            }
            report(&runner::run_experiment(&cfg)?)
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
