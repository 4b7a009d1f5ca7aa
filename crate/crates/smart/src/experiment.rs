//! Data loading, the two training stages and evaluation, with optional
//! artifacts written to an output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use smart_core::data::{observed_rate, zscore_fit_apply, Dataset, EhrRecord, Normalizer};
use smart_core::metrics::MetricsReport;
use smart_core::model::MartModel;
use smart_core::train::{evaluate, finetune, pretrain, EpochLog, FinetuneOutcome, PretrainState, Stage};

use crate::checkpoint::{self, Checkpoint, CheckpointHeader};
use crate::config::{DataConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::tables::{self, Schema};

/// Train, validation and test records after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<EhrRecord>,
    pub val: Vec<EhrRecord>,
    pub test: Vec<EhrRecord>,
    pub variables: Vec<String>,
    pub normalizer: Option<Normalizer>,
}

impl Splits {
    /// Normalize an in-memory dataset with its training statistics.
    pub fn from_dataset(data: Dataset, variables: Vec<String>, normalize: bool) -> Self {
        let Dataset {
            mut train,
            mut val,
            mut test,
        } = data;
        let normalizer = normalize.then(|| zscore_fit_apply(&mut train, &mut [&mut val, &mut test]));
        Splits {
            train,
            val,
            test,
            variables,
            normalizer,
        }
    }

    /// Load `train.csv`, `val.csv` and `test.csv` from the configured
    /// directory and normalize with training statistics.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let mut data = read_raw(&config.data, config)?;
        if data.train.is_empty() {
            return Err(Error::config(format!(
                "{}: no training records",
                config.data.dir.display()
            )));
        }
        let variables = std::mem::take(&mut data.variables);
        let raw = Dataset {
            train: data.train,
            val: data.val,
            test: data.test,
        };
        Ok(Self::from_dataset(raw, variables, config.data.normalize))
    }

    /// Same preprocessing as training, with statistics from a checkpoint.
    pub fn load_with(config: &ExperimentConfig, normalizer: Option<&Normalizer>) -> Result<Self> {
        let mut data = read_raw(&config.data, config)?;
        if let Some(n) = normalizer {
            for r in data.train.iter_mut().chain(&mut data.val).chain(&mut data.test) {
                n.apply(r);
            }
        }
        data.normalizer = normalizer.cloned();
        Ok(data)
    }
}

fn read_raw(data: &DataConfig, config: &ExperimentConfig) -> Result<Splits> {
    let file = |name: &str| data.dir.join(name);
    let variables = match &data.variables {
        Some(v) => v.clone(),
        None => tables::read_variable_names(&file("train.csv"))?,
    };
    if variables.len() != config.model.vars {
        return Err(Error::config(format!(
            "data has {} variables but model.vars is {}",
            variables.len(),
            config.model.vars
        )));
    }
    let schema = Schema {
        variables: variables.clone(),
        task: config.task,
        max_steps: data.max_steps,
    };
    let labels = data
        .labels
        .as_deref()
        .map(|p| tables::read_labels(p, config.task))
        .transpose()?;
    let load = |name: &str| tables::load_csv(&file(name), &schema, labels.as_ref());
    Ok(Splits {
        train: load("train.csv")?,
        val: load("val.csv")?,
        test: load("test.csv")?,
        variables,
        normalizer: None,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLine {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

/// Output directory holding the config echo, logs, checkpoints and metrics.
#[derive(Debug, Clone)]
pub struct OutDir {
    pub path: PathBuf,
}

impl OutDir {
    /// Create the directory and write `config.toml`, the exact configuration
    /// of the run.
    pub fn create(path: &Path, config: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let out = OutDir {
            path: path.to_path_buf(),
        };
        out.write_text("config.toml", &config.to_toml()?)?;
        Ok(out)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        checkpoint::write_atomic(&path, |w| w.write_all(text.as_bytes()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.file(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(&path, e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn log(&self, name: &str) -> Result<JsonLines> {
        JsonLines::create(&self.file(name))
    }
}

/// Append-only JSON-lines file, flushed after every line.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonLines {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::format(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|()| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Collects epoch logs with wall-clock times and forwards them to a log file.
pub struct EpochSink<'a> {
    started: Instant,
    pub lines: Vec<LogLine>,
    file: Option<&'a mut JsonLines>,
    error: Option<Error>,
}

impl<'a> EpochSink<'a> {
    pub fn new(file: Option<&'a mut JsonLines>) -> Self {
        EpochSink {
            started: Instant::now(),
            lines: Vec::new(),
            file,
            error: None,
        }
    }

    fn record(&mut self, log: &EpochLog) {
        let line = LogLine {
            stage: log.stage,
            epoch: log.epoch,
            loss: log.loss,
            val_metric: log.val_metric,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        self.started = Instant::now();
        let val = line.val_metric.map_or(String::new(), |v| format!(" val {v:.4}"));
        info!(
            "{:?} epoch {} loss {:.5}{val} ({:.1}s)",
            line.stage, line.epoch, line.loss, line.seconds
        );
        if let Some(f) = self.file.as_deref_mut() {
            if let Err(e) = f.push(&line) {
                self.error.get_or_insert(e);
            }
        }
        self.lines.push(line);
    }

    fn finish(&mut self) -> Result<()> {
        self.error.take().map_or(Ok(()), Err)
    }
}

/// A fresh model for `config` with its training seed.
pub fn new_model(config: &ExperimentConfig) -> Result<MartModel> {
    Ok(MartModel::new(
        config.model,
        config.ablation,
        config.task,
        config.train.seed,
    )?)
}

/// Pre-train `model` until `config.train.pretrain_epochs` are done.
pub fn run_pretrain(
    config: &ExperimentConfig,
    model: &mut MartModel,
    state: &mut PretrainState,
    train: &[EhrRecord],
    sink: &mut EpochSink<'_>,
) -> Result<()> {
    pretrain(model, state, train, &config.train, &mut |l| sink.record(l))?;
    sink.finish()
}

pub fn run_finetune(
    config: &ExperimentConfig,
    model: &mut MartModel,
    splits: &Splits,
    pretrained: bool,
    sink: &mut EpochSink<'_>,
) -> Result<FinetuneOutcome> {
    let outcome = finetune(model, &splits.train, &splits.val, &config.train, pretrained, &mut |l| {
        sink.record(l)
    })?;
    sink.finish()?;
    Ok(outcome)
}

/// Everything produced by one pre-train + fine-tune run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: MartModel,
    /// Teacher and optimizer after pre-training, if it ran.
    pub pretrain: Option<PretrainState>,
    pub finetune: FinetuneOutcome,
    pub test: MetricsReport,
    pub log: Vec<LogLine>,
}

/// The full pipeline for one seed. Pre-training is skipped when the
/// ablation disables it or `pretrain_epochs` is 0.
pub fn run_full(config: &ExperimentConfig, splits: &Splits, out: Option<&OutDir>) -> Result<RunResult> {
    config.validate()?;
    let mut model = new_model(config)?;
    let mut log_file = out.map(|o| o.log("log.jsonl")).transpose()?;
    let mut sink = EpochSink::new(log_file.as_mut());
    let pretrained = !config.ablation.no_pretrain && config.train.pretrain_epochs > 0;
    let state = if pretrained {
        let mut state = PretrainState::new(&model, &config.train);
        run_pretrain(config, &mut model, &mut state, &splits.train, &mut sink)?;
        if let Some(o) = out {
            checkpoint::save(
                &o.file("pretrain.ckpt"),
                &make_checkpoint(config, splits, &model, Some(&state), false),
            )?;
        }
        Some(state)
    } else {
        None
    };
    let outcome = run_finetune(config, &mut model, splits, pretrained, &mut sink)?;
    let test = evaluate(&model, &splits.test, &config.train)?;
    if let Some(o) = out {
        checkpoint::save(
            &o.file("model.ckpt"),
            &make_checkpoint(config, splits, &model, None, true),
        )?;
        o.write_json("metrics.json", &test)?;
    }
    Ok(RunResult {
        model,
        pretrain: state,
        finetune: outcome,
        test,
        log: sink.lines,
    })
}

pub fn make_checkpoint(
    config: &ExperimentConfig,
    splits: &Splits,
    model: &MartModel,
    pretrain: Option<&PretrainState>,
    finetuned: bool,
) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            model: model.config,
            ablation: model.ablation,
            task: model.task,
            train: config.train,
            variables: splits.variables.clone(),
            normalizer: splits.normalizer.clone(),
            pretrain_epochs: pretrain.map_or(0, |s| s.epochs_done),
            finetuned,
        },
        model: model.clone(),
        pretrain: pretrain.cloned(),
    }
}

/// Reject a checkpoint whose model does not fit `config`.
pub fn check_compatible(config: &ExperimentConfig, header: &CheckpointHeader) -> Result<()> {
    if header.model != config.model {
        return Err(Error::config("checkpoint model settings differ from the config"));
    }
    if header.task != config.task {
        return Err(Error::config(format!(
            "checkpoint task {:?} differs from {:?}",
            header.task, config.task
        )));
    }
    if header.ablation != config.ablation {
        return Err(Error::config("checkpoint ablation flags differ from the config"));
    }
    Ok(())
}

/// Realized observed rate and positive share of a binary dataset.
pub fn describe(records: &[EhrRecord]) -> (f64, Option<f64>) {
    let positives = records
        .iter()
        .map(|r| match r.label {
            smart_core::data::Label::Binary(y) => Some(u32::from(y)),
            _ => None,
        })
        .sum::<Option<u32>>();
    let prevalence = positives.map(|p| f64::from(p) / records.len().max(1) as f64);
    (observed_rate(records), prevalence)
}
