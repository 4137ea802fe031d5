//! Summarizer discrimination study and separation scoreboard.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align, AlignmentError, AlignmentMap};
use crate::corpus::{CorpusError, Instance, Lexicon, SubwordSequence};
use crate::encoders::{EmbeddingMatrix, EncoderError, Encoders};
use crate::separator::{score_instance, SeparatorError, Separator};
use crate::summarizer::{ttr_loss, Summarizer, SummarizerError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no instances to evaluate")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Maps aligned audio embeddings to one vector per subword.
pub trait SubwordProjector: Sync {
    fn project(&self, audio: &EmbeddingMatrix, align: &AlignmentMap) -> Result<EmbeddingMatrix, ExperimentError>;
}

impl SubwordProjector for Summarizer {
    fn project(&self, audio: &EmbeddingMatrix, align: &AlignmentMap) -> Result<EmbeddingMatrix, ExperimentError> {
        Ok(self.embed(audio, align)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationPair {
    pub id: String,
    pub d_clean: f64,
    pub d_mix: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminationReport {
    pub pairs: Vec<DiscriminationPair>,
    /// Pair indices sorted ascending by `d_clean` (stable).
    pub order: Vec<usize>,
    pub fraction_ge: f64,
    pub mean_diff: f64,
}

impl DiscriminationReport {
    pub fn from_pairs(pairs: Vec<DiscriminationPair>) -> Result<Self, ExperimentError> {
        if pairs.is_empty() {
            return Err(ExperimentError::Empty);
        }
        let n = pairs.len() as f64;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| pairs[a].d_clean.total_cmp(&pairs[b].d_clean));
        let fraction_ge = pairs.iter().filter(|p| p.d_mix >= p.d_clean).count() as f64 / n;
        let mean_diff = pairs.iter().map(|p| p.d_mix - p.d_clean).sum::<f64>() / n;
        Ok(DiscriminationReport { pairs, order, fraction_ge, mean_diff })
    }
}

/// Compares the loss of the first source's embeddings against that of the
/// mixture's, both aligned with the first source's transcript and scored
/// against its text embeddings.
pub fn discrimination_eval(
    projector: &dyn SubwordProjector,
    encoders: &Encoders,
    lexicon: &Lexicon,
    instances: &[Instance],
) -> Result<DiscriminationReport, ExperimentError> {
    if instances.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let pairs = instances
        .par_iter()
        .map(|inst| {
            let m = &inst.mixture;
            let transcript = &m.transcripts[0];
            let tokens = SubwordSequence::from_transcript(transcript, lexicon)?;
            let w = encoders.text.encode(&tokens.tokens)?;
            let dist = |wave| -> Result<f64, ExperimentError> {
                let s = encoders.audio.encode(wave)?;
                let map = align(transcript, &tokens, s.count(), encoders.audio.config().frame_rate)?;
                Ok(ttr_loss(&projector.project(&s, &map)?, &w)?)
            };
            Ok(DiscriminationPair { id: inst.id.clone(), d_clean: dist(&m.sources[0])?, d_mix: dist(&m.mixture)? })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    DiscriminationReport::from_pairs(pairs)
}

pub const DISCRIMINATION_PAIRS: &str = "discrimination_pairs.tsv";
pub const DISCRIMINATION_CURVE: &str = "discrimination_curve.tsv";
pub const DISCRIMINATION_SUMMARY: &str = "discrimination_summary.txt";

/// Writes the per-utterance pairs, the sorted curve and a summary.
pub fn write_discrimination(report: &DiscriminationReport, dir: &Path, config_hash: &str) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut pairs = String::from("id\td_clean\td_mix\n");
    for p in &report.pairs {
        writeln!(pairs, "{}\t{}\t{}", p.id, p.d_clean, p.d_mix).unwrap();
    }
    fs::write(dir.join(DISCRIMINATION_PAIRS), pairs)?;
    let mut curve = String::from("rank\td_clean\td_mix\n");
    for (rank, &i) in report.order.iter().enumerate() {
        writeln!(curve, "{rank}\t{}\t{}", report.pairs[i].d_clean, report.pairs[i].d_mix).unwrap();
    }
    fs::write(dir.join(DISCRIMINATION_CURVE), curve)?;
    let summary = format!(
        "config_hash = {config_hash}\ncount = {}\nfraction_ge = {}\nmean_diff = {}\n",
        report.pairs.len(),
        report.fraction_ge,
        report.mean_diff
    );
    fs::write(dir.join(DISCRIMINATION_SUMMARY), summary)?;
    Ok(())
}

/// Reads back a pairs file written by [`write_discrimination`].
pub fn read_discrimination_pairs(path: &Path) -> Result<Vec<DiscriminationPair>, ExperimentError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| ExperimentError::Parse { line: n + 1, message: m.to_string() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e.to_string()));
        out.push(DiscriminationPair { id: f[0].to_string(), d_clean: num(f[1])?, d_mix: num(f[2])? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub row: String,
    pub id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreboardRow {
    pub label: String,
    pub lambda: Option<f64>,
    pub mean_sdri: f64,
    pub mean_si_sdri: f64,
    /// `(id, sdri, si_sdri)` per instance, each averaged over sources.
    pub per_instance: Vec<(String, f64, f64)>,
}

impl ScoreboardRow {
    pub fn from_instances(label: &str, lambda: Option<f64>, per_instance: Vec<(String, f64, f64)>) -> Result<Self, ExperimentError> {
        if per_instance.is_empty() {
            return Err(ExperimentError::Empty);
        }
        let n = per_instance.len() as f64;
        let mean_sdri = per_instance.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_si_sdri = per_instance.iter().map(|r| r.2).sum::<f64>() / n;
        Ok(ScoreboardRow { label: label.to_string(), lambda, mean_sdri, mean_si_sdri, per_instance })
    }
}

/// SDRi and SI-SDRi under the PIT pairing for every test instance.
pub fn evaluate_separation(sep: &Separator, label: &str, lambda: Option<f64>, test: &[Instance]) -> Result<ScoreboardRow, ExperimentError> {
    let per = test
        .par_iter()
        .map(|inst| {
            let s = score_instance(sep, inst, None, 0.0)?;
            Ok((inst.id.clone(), s.mean_sdri(), s.mean_si_sdri()))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    ScoreboardRow::from_instances(label, lambda, per)
}

pub const SCOREBOARD_INSTANCES: &str = "scoreboard_instances.jsonl";
pub const SCOREBOARD_SUMMARY: &str = "scoreboard_summary.txt";

pub fn write_scoreboard(rows: &[ScoreboardRow], dir: &Path, config_hash: &str) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for row in rows {
        for (id, sdri, si_sdri) in &row.per_instance {
            for (metric, value) in [("sdri", sdri), ("si_sdri", si_sdri)] {
                let rec = InstanceRecord { row: row.label.clone(), id: id.clone(), metric: metric.into(), value: *value };
                lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                lines.push('\n');
            }
        }
    }
    fs::write(dir.join(SCOREBOARD_INSTANCES), lines)?;
    let mut summary = String::new();
    writeln!(summary, "# sdri is the scale-dependent SDR improvement 10*log10(|s|^2/|s-est|^2) over the mixture").unwrap();
    writeln!(summary, "# si_sdri is the scale-invariant SDR improvement; both use the PIT-optimal pairing").unwrap();
    writeln!(summary, "config_hash = {config_hash}").unwrap();
    writeln!(summary, "row\tlambda\tcount\tmean_sdri\tmean_si_sdri").unwrap();
    for row in rows {
        let lambda = row.lambda.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(summary, "{}\t{lambda}\t{}\t{}\t{}", row.label, row.per_instance.len(), row.mean_sdri, row.mean_si_sdri).unwrap();
    }
    fs::write(dir.join(SCOREBOARD_SUMMARY), summary)?;
    Ok(())
}

pub fn read_instance_records(path: &Path) -> Result<Vec<InstanceRecord>, ExperimentError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| ExperimentError::Parse { line: n + 1, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, DatasetConfig};
    use crate::encoders::EncoderConfig;
    use crate::tensor::Matrix;

    fn dataset() -> crate::corpus::Dataset {
        generate(&DatasetConfig {
            seed: 9,
            sample_rate: 8000,
            num_subwords: 24,
            num_words: 40,
            words_per_utterance: [1, 3],
            num_sources: 2,
            train_count: 1,
            valid_count: 6,
            test_count: 4,
            noise: false,
            snr_db_range: [0.0, 0.0],
            source_gain_db_range: [-3.0, 0.0],
        })
        .unwrap()
    }

    /// Returns the text embeddings for the clean source and their negation
    /// for anything else.
    struct Oracle {
        clean: Matrix,
        w: EmbeddingMatrix,
    }

    impl SubwordProjector for Oracle {
        fn project(&self, audio: &EmbeddingMatrix, _align: &AlignmentMap) -> Result<EmbeddingMatrix, ExperimentError> {
            if audio.values == self.clean {
                return Ok(self.w.clone());
            }
            let v = &self.w.values;
            Ok(EmbeddingMatrix { values: Matrix::from_fn(v.rows(), v.cols(), |r, c| -v.get(r, c)), frame_rate: None })
        }
    }

    #[test]
    fn oracle_projector_gives_full_separation() {
        let ds = dataset();
        let enc = Encoders::new(&EncoderConfig::default(), &ds.lexicon).unwrap();
        for inst in &ds.valid {
            let tokens = SubwordSequence::from_transcript(&inst.mixture.transcripts[0], &ds.lexicon).unwrap();
            let oracle = Oracle {
                clean: enc.audio.encode(&inst.mixture.sources[0]).unwrap().values,
                w: enc.text.encode(&tokens.tokens).unwrap(),
            };
            let r = discrimination_eval(&oracle, &enc, &ds.lexicon, std::slice::from_ref(inst)).unwrap();
            assert_eq!(r.fraction_ge, 1.0);
            assert!(r.pairs[0].d_clean.abs() < 1e-9);
            assert!((r.pairs[0].d_mix - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_files_are_self_consistent() {
        let pairs = vec![
            DiscriminationPair { id: "a".into(), d_clean: 0.4, d_mix: 0.5 },
            DiscriminationPair { id: "b".into(), d_clean: 0.1, d_mix: 0.05 },
            DiscriminationPair { id: "c".into(), d_clean: 0.3, d_mix: 0.3 },
        ];
        let r = DiscriminationReport::from_pairs(pairs).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert!((r.fraction_ge - 2.0 / 3.0).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        write_discrimination(&r, dir.path(), "h").unwrap();
        let back = read_discrimination_pairs(&dir.path().join(DISCRIMINATION_PAIRS)).unwrap();
        assert_eq!(DiscriminationReport::from_pairs(back).unwrap(), r);
        let curve = fs::read_to_string(dir.path().join(DISCRIMINATION_CURVE)).unwrap();
        assert_eq!(curve.lines().nth(1).unwrap(), "0\t0.1\t0.05");
    }

    #[test]
    fn identity_and_oracle_estimates() {
        let ds = dataset();
        let inst = &ds.test[0];
        let m = &inst.mixture;
        let mix_copies = vec![m.mixture.clone(), m.mixture.clone()];
        let s = crate::separator::score_estimates(inst, &mix_copies, None, 0.0).unwrap();
        assert!(s.mean_si_sdri().abs() < 1e-9 && s.mean_sdri().abs() < 1e-9);
        let s = crate::separator::score_estimates(inst, &m.sources, None, 0.0).unwrap();
        let mix_si: f64 = m.sources.iter().map(|r| crate::signal::si_sdr(r, &m.mixture).unwrap()).sum::<f64>() / 2.0;
        assert!((s.mean_si_sdri() - (crate::signal::SI_SDR_CAP_DB - mix_si)).abs() < 1e-9);
    }

    #[test]
    fn scoreboard_means_recompute_from_records() {
        let ds = dataset();
        let sep = Separator::new(&crate::separator::SeparatorConfig {
            num_sources: 2,
            filters: 4,
            kernel: 16,
            stride: 8,
            channels: 4,
            blocks: 1,
            seed: 3,
        })
        .unwrap();
        let row = evaluate_separation(&sep, "pit", None, &ds.test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scoreboard(std::slice::from_ref(&row), dir.path(), "h").unwrap();
        let recs = read_instance_records(&dir.path().join(SCOREBOARD_INSTANCES)).unwrap();
        let mean = |m: &str| {
            let v: Vec<f64> = recs.iter().filter(|r| r.metric == m).map(|r| r.value).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean("sdri") - row.mean_sdri).abs() < 1e-9);
        assert!((mean("si_sdri") - row.mean_si_sdri).abs() < 1e-9);
        assert_eq!(recs.len(), 2 * ds.test.len());
    }
}
