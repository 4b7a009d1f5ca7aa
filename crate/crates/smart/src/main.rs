use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use smart_core::data::{generate_synthetic, Missingness, SyntheticSpec, TaskKind};
use smart_core::model::AblationFlags;
use smart_core::train::{evaluate, PretrainState};

use smart::ablate::{run_ablation, suite};
use smart::checkpoint;
use smart::config::ExperimentConfig;
use smart::experiment::{
    check_compatible, describe, make_checkpoint, new_model, run_finetune, run_pretrain, EpochSink, OutDir, Splits,
};
use smart::sweep::{default_rates, run_sweep, SweepMode, SweepOptions};
use smart::tables::{default_variable_names, write_csv};
use smart::{Error, Result};

#[derive(Parser)]
#[command(
    name = "smart",
    version,
    about = "Missing-aware time-series models on sparse EHR data"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the seed set.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accepted for compatibility; every run is single-threaded and
    /// deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as train/val/test CSV files.
    Generate(GenerateArgs),
    /// Self-supervised pre-training; writes `pretrain.ckpt`.
    Pretrain,
    /// Supervised fine-tuning; writes `model.ckpt` and test metrics.
    Finetune {
        /// Start from this pre-training checkpoint instead of a fresh model.
        #[arg(long)]
        from_pretrained: Option<PathBuf>,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Metrics as observed cells are removed.
    Sweep(SweepArgs),
    /// Compare reduced model variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    patients: usize,
    #[arg(long, default_value_t = 8)]
    vars: usize,
    #[arg(long, default_value_t = 48)]
    tmax: usize,
    /// Shortest stay; stays are all `tmax` long when absent.
    #[arg(long)]
    min_steps: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    observed: f64,
    #[arg(long, default_value_t = 0.14)]
    positive: f64,
    #[arg(long, value_enum, default_value_t = MissingnessArg::Mcar)]
    missingness: MissingnessArg,
    /// `binary`, `multilabel:K` or `multiclass:K`.
    #[arg(long, default_value = "binary", value_parser = parse_task)]
    task: TaskKind,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MissingnessArg {
    Mcar,
    Mnar,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    let count = |k: &str| k.parse::<usize>().map_err(|_| format!("bad count `{k}`"));
    match s.split_once(':') {
        None if s == "binary" => Ok(TaskKind::Binary),
        Some(("multilabel", k)) => Ok(TaskKind::MultiLabel { labels: count(k)? }),
        Some(("multiclass", k)) => Ok(TaskKind::MultiClass { classes: count(k)? }),
        _ => Err(format!("unknown task `{s}`")),
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated rates in (0, 1].
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = SweepMode::TestOnly)]
    sweep_mode: SweepMode,
    /// Treat rates as target observed rates instead of fractions of the
    /// native rate.
    #[arg(long)]
    absolute: bool,
    /// Evaluate this model instead of training one per seed (test-only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Run the full model and every single-flag variant.
    #[arg(long)]
    suite: bool,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    no_mask_encoder: bool,
    #[arg(long)]
    no_mask_temporal: bool,
    #[arg(long)]
    no_mask_variable: bool,
    #[arg(long)]
    no_temporal_attention: bool,
    #[arg(long)]
    no_variable_attention: bool,
    #[arg(long)]
    no_cls: bool,
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long)]
    impute_input_space: bool,
}

impl AblateArgs {
    fn flags(&self) -> AblationFlags {
        AblationFlags {
            no_mask: self.no_mask,
            no_mask_encoder: self.no_mask_encoder,
            no_mask_temporal: self.no_mask_temporal,
            no_mask_variable: self.no_mask_variable,
            no_temporal_attention: self.no_temporal_attention,
            no_variable_attention: self.no_variable_attention,
            no_cls: self.no_cls,
            no_pretrain: self.no_pretrain,
            impute_input_space: self.impute_input_space,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config is required"))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn out_dir(cli: &Cli, default: &str, config: &ExperimentConfig) -> Result<OutDir> {
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    OutDir::create(&path, config)
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_patients: args.patients,
        vars: args.vars,
        t_max: args.tmax,
        min_steps: args.min_steps,
        observed_rate: args.observed,
        missingness: match args.missingness {
            MissingnessArg::Mcar => Missingness::Mcar,
            MissingnessArg::Mnar => Missingness::MnarBySeverity,
        },
        positive_rate: args.positive,
        task: args.task,
        seed: cli.seed.unwrap_or(1),
    };
    spec.validate().map_err(|e| Error::config(e.to_string()))?;
    let data = generate_synthetic(&spec)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let names = default_variable_names(spec.vars);
    for (name, records) in data.splits() {
        write_csv(&dir.join(format!("{name}.csv")), records, &names, spec.task)?;
    }
    let spec_path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&spec).map_err(|e| Error::format(&spec_path, e.to_string()))?;
    std::fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))?;

    let all: Vec<_> = data.train.iter().chain(&data.val).chain(&data.test).cloned().collect();
    let (rate, prevalence) = describe(&all);
    println!(
        "wrote {} / {} / {} patients to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display()
    );
    println!("observed rate {rate:.4}");
    if let Some(p) = prevalence {
        println!("positive rate {p:.4}");
    }
    Ok(())
}

fn pretrain(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    if config.ablation.no_pretrain {
        return Err(Error::config("pretrain with ablation.no_pretrain set"));
    }
    let splits = Splits::load(&config)?;
    let out = out_dir(cli, "runs/pretrain", &config)?;
    let mut model = new_model(&config)?;
    let mut state = PretrainState::new(&model, &config.train);
    let mut log = out.log("log.jsonl")?;
    run_pretrain(
        &config,
        &mut model,
        &mut state,
        &splits.train,
        &mut EpochSink::new(Some(&mut log)),
    )?;
    let path = out.file("pretrain.ckpt");
    checkpoint::save(&path, &make_checkpoint(&config, &splits, &model, Some(&state), false))?;
    info!("saved {}", path.display());
    Ok(())
}

fn finetune(cli: &Cli, from: Option<&Path>) -> Result<()> {
    let config = load_config(cli)?;
    let (mut model, splits) = match from {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            check_compatible(&config, &ckpt.header)?;
            if ckpt.header.finetuned {
                warn!("{} is already fine-tuned", path.display());
            }
            let splits = Splits::load_with(&config, ckpt.header.normalizer.as_ref())?;
            (ckpt.model, splits)
        }
        None => (new_model(&config)?, Splits::load(&config)?),
    };
    let out = out_dir(cli, "runs/finetune", &config)?;
    let mut log = out.log("log.jsonl")?;
    let outcome = run_finetune(
        &config,
        &mut model,
        &splits,
        from.is_some(),
        &mut EpochSink::new(Some(&mut log)),
    )?;
    info!("best epoch {:?}, validation {:?}", outcome.best_epoch, outcome.best_val);
    let test = evaluate(&model, &splits.test, &config.train)?;
    checkpoint::save(
        &out.file("model.ckpt"),
        &make_checkpoint(&config, &splits, &model, None, true),
    )?;
    out.write_json("metrics.json", &test)?;
    print_json(&test);
    Ok(())
}

fn eval(cli: &Cli, path: &Path) -> Result<()> {
    let config = load_config(cli)?;
    let ckpt = checkpoint::load(path)?;
    check_compatible(&config, &ckpt.header)?;
    let splits = Splits::load_with(&config, ckpt.header.normalizer.as_ref())?;
    let report = evaluate(&ckpt.model, &splits.test, &config.train)?;
    if cli.out.is_some() {
        out_dir(cli, "", &config)?.write_json("metrics.json", &report)?;
    }
    print_json(&report);
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let config = load_config(cli)?;
    let options = SweepOptions {
        rates: args.rates.clone().unwrap_or_else(default_rates),
        mode: args.sweep_mode,
        absolute: args.absolute,
    };
    let (model, splits) = match &args.checkpoint {
        Some(path) => {
            if options.mode == SweepMode::Retrain {
                return Err(Error::config("--checkpoint only applies to the test-only sweep"));
            }
            let ckpt = checkpoint::load(path)?;
            check_compatible(&config, &ckpt.header)?;
            let splits = Splits::load_with(&config, ckpt.header.normalizer.as_ref())?;
            (Some(ckpt.model), splits)
        }
        None => (None, Splits::load(&config)?),
    };
    let out = out_dir(cli, "runs/sweep", &config)?;
    run_sweep(&config, &splits, &options, model.as_ref(), Some(&out))?;
    print!(
        "{}",
        std::fs::read_to_string(out.file("sweep_summary.md")).map_err(|e| Error::io(&out.path, e))?
    );
    Ok(())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    let variants = if args.suite {
        suite()
    } else {
        let flags = args.flags();
        flags.validate().map_err(|e| Error::config(e.to_string()))?;
        vec![flags]
    };
    config.ablation = AblationFlags::default();
    let splits = Splits::load(&config)?;
    let out = out_dir(cli, "runs/ablate", &config)?;
    run_ablation(&config, &splits, &variants, Some(&out))?;
    print!(
        "{}",
        std::fs::read_to_string(out.file("ablation.md")).map_err(|e| Error::io(&out.path, e))?
    );
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => warn!("cannot print result: {e}"),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        info!("deterministic mode (always on)");
    }
    match &cli.command {
        Command::Generate(args) => generate(cli, args),
        Command::Pretrain => pretrain(cli),
        Command::Finetune { from_pretrained } => finetune(cli, from_pretrained.as_deref()),
        Command::Eval { checkpoint } => eval(cli, checkpoint),
        Command::Sweep(args) => sweep(cli, args),
        Command::Ablate(args) => ablate(cli, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    smart::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
