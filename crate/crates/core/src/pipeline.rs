//! File-based orchestration of every stage. Each stage reads its inputs,
//! never modifies them, and writes only under its output directory.
//!
//! Loss logs hold one JSON record per epoch and split and are bit-identical
//! across reruns; wall-clock times go to a separate `*_timing.jsonl` file.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::alignment::{align, AlignmentError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{gen_dataset, generate, load_dataset, CorpusError, Dataset, DatasetConfig, DatasetError, Lexicon, Split, SubwordSequence, TimedTranscript};
use crate::encoders::{EncoderError, Encoders};
use crate::experiments::{discrimination_eval, evaluate_separation, write_discrimination, write_scoreboard, DiscriminationReport, ExperimentError, ScoreboardRow};
use crate::gradcheck::{check_separator, check_transformer, check_ttr, GradCheckError, GradStage, StageReport};
use crate::optim::{EpochRecord, TrainError, TrainOutcome};
use crate::params::{CheckpointError, ParamStore};
use crate::separator::{finetune_ttr, pretrain_separator, FinetuneConfig, Separator, SeparatorError, MODULE_PREFIX, PRETRAINED_MODULE};
use crate::summarizer::{pretrain_summarizer, Summarizer, SummarizerError, TtrExample, MODULE_NAME as SUMMARIZER_MODULE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(path.to_path_buf()))
    }
}

fn create_out(out: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))
}

pub const SUMMARIZER_CHECKPOINT: &str = "summarizer.ckpt";
pub const SEPARATOR_CHECKPOINT: &str = "separator.ckpt";

pub fn finetuned_checkpoint(lambda: f64) -> String {
    format!("separator_ttr_lambda{lambda}.ckpt")
}

/// Model label and λ recovered from a separator checkpoint's module name.
pub fn checkpoint_label(module: &str) -> (String, Option<f64>) {
    let lambda = module.strip_prefix(&format!("{MODULE_PREFIX}:ttr:lambda=")).and_then(|l| l.parse().ok());
    (module.to_string(), lambda)
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    epoch: usize,
    split: &'a str,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct StageMeta<'a> {
    stage: &'a str,
    config_hash: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_valid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs_run: Option<usize>,
}

fn write_meta(out: &Path, name: &str, meta: &StageMeta<'_>) -> Result<(), PipelineError> {
    let path = out.join(format!("{name}.meta.json"));
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// Appends loss and timing records as training progresses.
struct TrainLog {
    loss: BufWriter<File>,
    timing: BufWriter<File>,
    paths: (PathBuf, PathBuf),
    start: Instant,
    error: Option<PipelineError>,
}

impl TrainLog {
    fn create(out: &Path, name: &str) -> Result<Self, PipelineError> {
        let loss_path = out.join(format!("{name}_loss.jsonl"));
        let timing_path = out.join(format!("{name}_timing.jsonl"));
        let loss = BufWriter::new(File::create(&loss_path).map_err(io_err(&loss_path))?);
        let timing = BufWriter::new(File::create(&timing_path).map_err(io_err(&timing_path))?);
        Ok(TrainLog { loss, timing, paths: (loss_path, timing_path), start: Instant::now(), error: None })
    }

    fn record(&mut self, r: &EpochRecord) {
        if self.error.is_some() {
            return;
        }
        let timing = TimingRecord { epoch: r.epoch, split: &r.split, wall_seconds: self.start.elapsed().as_secs_f64() };
        let lines = (serde_json::to_string(r).expect("record serializes"), serde_json::to_string(&timing).expect("record serializes"));
        let res = writeln!(self.loss, "{}", lines.0)
            .and_then(|_| self.loss.flush())
            .map_err(io_err(&self.paths.0))
            .and_then(|_| writeln!(self.timing, "{}", lines.1).and_then(|_| self.timing.flush()).map_err(io_err(&self.paths.1)));
        if let Err(e) = res {
            log::error!("{e}");
            self.error = Some(e);
        }
    }

    fn finish(self) -> Result<(), PipelineError> {
        self.error.map_or(Ok(()), Err)
    }
}

fn log_progress(name: &str, r: &EpochRecord) {
    match r.si_sdri {
        Some(s) => log::info!("{name} epoch {} {} loss {:.6} lr {:.3e} si-sdri {s:.3} dB", r.epoch, r.split, r.loss, r.lr),
        None => log::info!("{name} epoch {} {} loss {:.6} lr {:.3e}", r.epoch, r.split, r.loss, r.lr),
    }
}

/// Runs a training closure with loss and timing logs under `out`.
fn with_log(
    out: &Path,
    name: &str,
    train: impl FnOnce(&mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome, TrainError>,
) -> Result<TrainOutcome, PipelineError> {
    let mut log = TrainLog::create(out, name)?;
    let outcome = train(&mut |r| {
        log_progress(name, r);
        log.record(r);
    });
    log.finish()?;
    Ok(outcome?)
}

fn load_data(data: &Path) -> Result<Dataset, PipelineError> {
    require(data)?;
    Ok(load_dataset(data)?)
}

fn load_summarizer(cfg: &RunConfig, encoders: &Encoders, path: &Path) -> Result<Summarizer, PipelineError> {
    require(path)?;
    let mut s = Summarizer::new(&cfg.summarizer, encoders.audio_dim(), encoders.text_dim())?;
    s.store_mut().load_into(path, SUMMARIZER_MODULE)?;
    Ok(s)
}

fn load_separator(cfg: &RunConfig, path: &Path) -> Result<Separator, PipelineError> {
    require(path)?;
    let mut s = Separator::new(&cfg.separator)?;
    s.store_mut().load_into(path, MODULE_PREFIX)?;
    Ok(s)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset, PipelineError> {
    create_out(out)?;
    Ok(gen_dataset(&cfg.dataset, out, &cfg.hash())?)
}

fn examples(ds: &Dataset, split: Split, encoders: &Encoders) -> Result<Vec<TtrExample>, PipelineError> {
    ds.utterances(split)?.iter().map(|u| Ok(TtrExample::from_utterance(u, encoders)?)).collect()
}

pub fn pretrain_summarizer_stage(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Summarizer, PipelineError> {
    let ds = load_data(data)?;
    create_out(out)?;
    let encoders = Encoders::new(&cfg.encoder, &ds.lexicon)?;
    let train = examples(&ds, Split::Train, &encoders)?;
    let valid = examples(&ds, Split::Valid, &encoders)?;
    let mut summ = Summarizer::new(&cfg.summarizer, encoders.audio_dim(), encoders.text_dim())?;
    let outcome = with_log(out, "summarizer", |log| {
        pretrain_summarizer(&mut summ, &train, &valid, &cfg.summarizer_training, cfg.seed, log)
    })?;
    summ.store().save(&out.join(SUMMARIZER_CHECKPOINT))?;
    write_meta(out, "summarizer", &meta("pretrain-summarizer", &cfg.hash(), None, Some(&outcome)))?;
    Ok(summ)
}

fn meta<'a>(stage: &'a str, hash: &'a str, lambda: Option<f64>, outcome: Option<&TrainOutcome>) -> StageMeta<'a> {
    StageMeta {
        stage,
        config_hash: hash,
        lambda,
        best_epoch: outcome.map(|o| o.best_epoch),
        best_valid: outcome.map(|o| o.best_valid),
        epochs_run: outcome.map(|o| o.epochs_run),
    }
}

pub fn pretrain_separator_stage(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Separator, PipelineError> {
    let ds = load_data(data)?;
    create_out(out)?;
    let mut sep = Separator::new(&cfg.separator)?;
    let outcome = with_log(out, "separator", |log| {
        pretrain_separator(&mut sep, &ds.train, &ds.valid, &cfg.separator_training, cfg.seed, log)
    })?;
    sep.store().save(&out.join(SEPARATOR_CHECKPOINT))?;
    write_meta(out, "separator", &meta("pretrain-separator", &cfg.hash(), None, Some(&outcome)))?;
    Ok(sep)
}

/// Finetunes a copy of the pretrained separator at `lambda`; with the
/// summarizer unfrozen its updated checkpoint is written next to the
/// separator's.
pub fn finetune_stage(
    cfg: &RunConfig,
    data: &Path,
    summarizer: &Path,
    separator: &Path,
    lambda: f64,
    out: &Path,
) -> Result<Separator, PipelineError> {
    let ds = load_data(data)?;
    let encoders = Encoders::new(&cfg.encoder, &ds.lexicon)?;
    let mut summ = load_summarizer(cfg, &encoders, summarizer)?;
    let mut sep = load_separator(cfg, separator)?;
    if sep.store().module() != PRETRAINED_MODULE {
        log::warn!("finetuning from `{}` rather than a PIT-pretrained checkpoint", sep.store().module());
    }
    create_out(out)?;
    let ft = FinetuneConfig { lambda, ..cfg.finetune.clone() };
    let name = format!("finetune_lambda{lambda}");
    let outcome = with_log(out, &name, |log| {
        finetune_ttr(&mut sep, &mut summ, &encoders, &ds.lexicon, &ds.train, &ds.valid, &ft, cfg.seed, log)
    })?;
    sep.store().save(&out.join(finetuned_checkpoint(lambda)))?;
    if !ft.freeze_summarizer {
        summ.store().save(&out.join(format!("summarizer_ttr_lambda{lambda}.ckpt")))?;
    }
    write_meta(out, &name, &meta("finetune", &cfg.hash(), Some(lambda), Some(&outcome)))?;
    Ok(sep)
}

/// Scores each separator checkpoint on the test split.
pub fn evaluate_stage(cfg: &RunConfig, data: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<ScoreboardRow>, PipelineError> {
    let ds = load_data(data)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let sep = load_separator(cfg, path)?;
        let (label, lambda) = checkpoint_label(sep.store().module());
        rows.push(evaluate_separation(&sep, &label, lambda, &ds.test)?);
    }
    create_out(out)?;
    write_scoreboard(&rows, out, &cfg.hash())?;
    Ok(rows)
}

/// Discrimination study on the validation split.
pub fn discriminate_stage(cfg: &RunConfig, data: &Path, summarizer: &Path, out: &Path) -> Result<DiscriminationReport, PipelineError> {
    let ds = load_data(data)?;
    let encoders = Encoders::new(&cfg.encoder, &ds.lexicon)?;
    let summ = load_summarizer(cfg, &encoders, summarizer)?;
    let report = discrimination_eval(&summ, &encoders, &ds.lexicon, &ds.valid)?;
    create_out(out)?;
    write_discrimination(&report, out, &cfg.hash())?;
    Ok(report)
}

/// Alignment records for a transcript file. The frame count is taken from
/// `frames` or else from the end of the last word.
pub fn inspect_align(transcript: &Path, lexicon: &Path, frame_rate: f64, frames: Option<usize>) -> Result<String, PipelineError> {
    require(transcript)?;
    require(lexicon)?;
    let text = fs::read_to_string(transcript).map_err(io_err(transcript))?;
    let t = TimedTranscript::parse(&text)?;
    let lex_text = fs::read_to_string(lexicon).map_err(io_err(lexicon))?;
    let lex: Lexicon = serde_json::from_str(&lex_text).map_err(|e| PipelineError::Io {
        path: lexicon.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, e),
    })?;
    let tokens = SubwordSequence::from_transcript(&t, &lex)?;
    let end = t.words.last().map_or(0.0, |w| w.end);
    let frames = frames.unwrap_or((end * frame_rate + 1e-9).floor() as usize);
    let map = align(&t, &tokens, frames, frame_rate)?;
    Ok(map.to_records(&tokens.tokens))
}

/// The dataset used by gradient checks: one short two-source test instance
/// built from the run's lexicon settings.
pub fn grad_check_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let small = DatasetConfig {
        words_per_utterance: [1, 2],
        train_count: 0,
        valid_count: 0,
        test_count: 1,
        noise: false,
        ..cfg.dataset.clone()
    };
    Ok(generate(&small)?)
}

/// Gradient check of one stage on freshly initialised parameters.
pub fn grad_check_stage(cfg: &RunConfig, stage: GradStage) -> Result<StageReport, PipelineError> {
    let ds = grad_check_dataset(cfg)?;
    let encoders = Encoders::new(&cfg.encoder, &ds.lexicon)?;
    let summ = Summarizer::new(&cfg.summarizer, encoders.audio_dim(), encoders.text_dim())?;
    let (n, seed) = (cfg.grad_check.coordinates, cfg.grad_check.seed);
    let inst = &ds.test[0];
    Ok(match stage {
        GradStage::Transformer => check_transformer(&summ, n, seed)?,
        GradStage::Ttr => check_ttr(&summ, &encoders, &ds.lexicon, inst, n, seed)?,
        GradStage::Separator => {
            let sep = Separator::new(&cfg.separator)?;
            check_separator(&sep, &summ, &encoders, &ds.lexicon, inst, cfg.finetune.lambda, n, seed)?
        }
    })
}

/// Reads the checkpoint table without building a model.
pub fn checkpoint_module(path: &Path) -> Result<String, PipelineError> {
    require(path)?;
    Ok(ParamStore::load(path)?.module().to_string())
}
