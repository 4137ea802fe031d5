//! `ttrss`: data generation, training, evaluation and diagnostics for
//! timed-text regularized separation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ttrss::config::RunConfig;
use ttrss::corpus::DatasetError;
use ttrss::gradcheck::GradStage;
use ttrss::optim::TrainError;
use ttrss::params::CheckpointError;
use ttrss::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "ttrss", version, about = "Timed-text regularized speech separation at desk scale")]
struct Cli {
    /// Worker threads; 1 keeps runs bit-reproducible across machines.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the summarizer on clean utterances.
    PretrainSummarizer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the separator with the PIT loss.
    PretrainSeparator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pretrained separator with the timed-text regularizer.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        summarizer: PathBuf,
        #[arg(long)]
        separator: PathBuf,
        /// Blending weight; defaults to every value in the config's `lambdas`.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score separator checkpoints on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare clean and mixture timed-text distances on the validation split.
    Discriminate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        summarizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the subword alignment of a transcript file.
    InspectAlign {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        frame_rate: f64,
        /// `lexicon.json` of the dataset the transcript belongs to.
        #[arg(long)]
        lexicon: PathBuf,
        /// Frame count; defaults to the frames up to the last word's end.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Finite-difference gradient check on fresh parameters.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        /// transformer, ttr or separator; all three when omitted.
        #[arg(long)]
        stage: Option<GradStage>,
    },
}

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
struct ToleranceBreach(String);

impl std::fmt::Display for ToleranceBreach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ToleranceBreach {}

fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.to_path_buf()).into());
    }
    Ok(RunConfig::load(path).map_err(PipelineError::from)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let ds = pipeline::gen_data(&cfg, &out)?;
            println!(
                "wrote {} train, {} valid, {} test mixtures to {} (config {})",
                ds.train.len(),
                ds.valid.len(),
                ds.test.len(),
                out.display(),
                cfg.hash()
            );
        }
        Command::PretrainSummarizer { config, data, out } => {
            let cfg = load_config(&config)?;
            pipeline::pretrain_summarizer_stage(&cfg, &data, &out)?;
            println!("wrote {}", out.join(pipeline::SUMMARIZER_CHECKPOINT).display());
        }
        Command::PretrainSeparator { config, data, out } => {
            let cfg = load_config(&config)?;
            pipeline::pretrain_separator_stage(&cfg, &data, &out)?;
            println!("wrote {}", out.join(pipeline::SEPARATOR_CHECKPOINT).display());
        }
        Command::Finetune { config, data, summarizer, separator, lambda, out } => {
            let cfg = load_config(&config)?;
            let lambdas = lambda.map_or_else(|| cfg.lambdas.clone(), |l| vec![l]);
            for l in lambdas {
                pipeline::finetune_stage(&cfg, &data, &summarizer, &separator, l, &out)
                    .with_context(|| format!("finetuning at lambda {l}"))?;
                println!("wrote {}", out.join(pipeline::finetuned_checkpoint(l)).display());
            }
        }
        Command::Evaluate { config, data, checkpoints, out } => {
            let cfg = load_config(&config)?;
            for row in pipeline::evaluate_stage(&cfg, &data, &checkpoints, &out)? {
                println!("{}: SDRi {:.3} dB, SI-SDRi {:.3} dB", row.label, row.mean_sdri, row.mean_si_sdri);
            }
        }
        Command::Discriminate { config, data, summarizer, out } => {
            let cfg = load_config(&config)?;
            let r = pipeline::discriminate_stage(&cfg, &data, &summarizer, &out)?;
            println!("fraction_ge {:.4}, mean_diff {:.6} over {} mixtures", r.fraction_ge, r.mean_diff, r.pairs.len());
        }
        Command::InspectAlign { transcript, frame_rate, lexicon, frames } => {
            print!("{}", pipeline::inspect_align(&transcript, &lexicon, frame_rate, frames)?);
        }
        Command::GradCheck { config, stage } => {
            let cfg = load_config(&config)?;
            let stages = stage.map_or_else(|| GradStage::ALL.to_vec(), |s| vec![s]);
            let mut failed = Vec::new();
            for s in stages {
                let r = pipeline::grad_check_stage(&cfg, s)?;
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!("{s}: {verdict} max_rel_error {:.3e} over {} coordinates", r.max_rel_error, r.coordinates);
                if !r.passed() {
                    log::warn!("{s}: worst coordinate {:?}", r.worst);
                    failed.push(s.name());
                }
            }
            if !failed.is_empty() {
                return Err(ToleranceBreach(format!("gradient check failed for {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

/// Exit code and error class for a failed command.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<ToleranceBreach>().is_some() {
        return (5, "grad-check");
    }
    let Some(p) = err.chain().find_map(|e| e.downcast_ref::<PipelineError>()) else {
        return (1, "error");
    };
    let not_found = |e: &std::io::Error| e.kind() == std::io::ErrorKind::NotFound;
    match p {
        PipelineError::Config(_) => (2, "config"),
        PipelineError::Checkpoint(CheckpointError::Shape(_) | CheckpointError::Module { .. }) => (2, "config"),
        PipelineError::Dataset(DatasetError::Config(_)) => (2, "config"),
        PipelineError::Missing(_) => (3, "missing-file"),
        PipelineError::Io { source, .. } if not_found(source) => (3, "missing-file"),
        PipelineError::Dataset(DatasetError::Io { source, .. }) if not_found(source) => (3, "missing-file"),
        PipelineError::Checkpoint(CheckpointError::Io(e)) if not_found(e) => (3, "missing-file"),
        PipelineError::Train(TrainError::NonFinite { .. }) => (4, "numerical"),
        _ => (1, "error"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error[config]: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error[error]: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = classify(&e);
            eprintln!("error[{class}]: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let breach = anyhow::Error::new(ToleranceBreach("x".into()));
        assert_eq!(classify(&breach), (5, "grad-check"));
        let nan = anyhow::Error::new(PipelineError::Train(TrainError::NonFinite { what: "loss", epoch: 1 }));
        assert_eq!(classify(&nan).0, 4);
        let wrapped = anyhow::Error::new(PipelineError::Missing("a".into())).context("finetuning");
        assert_eq!(classify(&wrapped).0, 3);
        assert_eq!(classify(&anyhow::anyhow!("other")).0, 1);
    }
}
