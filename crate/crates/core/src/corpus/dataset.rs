use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{plan_utterance, CorpusError, Lexicon, SubwordSequence, TimedTranscript, UtterancePlan};
use crate::signal::{mix, MixtureInstance, SignalError, Waveform};
use crate::wav::{read_wav, write_wav, WavError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("wav error at {path}: {source}")]
    Wav { path: PathBuf, source: WavError },
    #[error("manifest {path} line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Every field is required; there are no hidden defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub num_subwords: usize,
    pub num_words: usize,
    /// Inclusive `[min, max]` word count per source utterance.
    pub words_per_utterance: [usize; 2],
    pub num_sources: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub noise: bool,
    /// Inclusive `[min, max]` mixture SNR in dB, used when `noise` is set.
    pub snr_db_range: [f64; 2],
    /// Inclusive `[min, max]` per-source gain in dB applied before mixing.
    pub source_gain_db_range: [f64; 2],
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.to_string()));
        if !(2..=3).contains(&self.num_sources) {
            return bad(&format!("num_sources must be 2 or 3, got {}", self.num_sources));
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        let [lo, hi] = self.words_per_utterance;
        if lo == 0 || lo > hi {
            return bad("words_per_utterance must satisfy 1 <= min <= max");
        }
        for (name, [a, b]) in [("snr_db_range", self.snr_db_range), ("source_gain_db_range", self.source_gain_db_range)] {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return bad(&format!("{name} must be finite with min <= max"));
            }
        }
        if self.train_count + self.valid_count + self.test_count == 0 {
            return bad("at least one split must be nonempty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub mixture: MixtureInstance,
    pub snr_db: Option<f64>,
}

/// A single clean source with its transcript and tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
    pub transcript: TimedTranscript,
    pub tokens: SubwordSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lexicon: Lexicon,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Instance] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn num_sources(&self) -> usize {
        self.train.iter().chain(&self.valid).chain(&self.test).map(|i| i.mixture.num_sources()).next().unwrap_or(0)
    }

    /// Every source of the split as a clean utterance, in instance order.
    pub fn utterances(&self, s: Split) -> Result<Vec<Utterance>, CorpusError> {
        let mut out = Vec::new();
        for inst in self.split(s) {
            for (k, (wave, tr)) in inst.mixture.sources.iter().zip(&inst.mixture.transcripts).enumerate() {
                out.push(Utterance {
                    id: format!("{}/s{}", inst.id, k + 1),
                    wave: wave.clone(),
                    transcript: tr.clone(),
                    tokens: SubwordSequence::from_transcript(tr, &self.lexicon)?,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct InstancePlan {
    id: String,
    sources: Vec<UtterancePlan>,
    gains_db: Vec<f64>,
    truncate_to: usize,
    snr_db: Option<f64>,
    noise_seed: u64,
}

/// Number of leading planned words that end within `len` samples.
fn kept_words(plan: &UtterancePlan, len: usize) -> usize {
    plan.words.iter().take_while(|w| w.end <= len).count()
}

/// Draws all word sequences and per-instance seeds sequentially (so that
/// sequences are distinct across every split), then renders instances in
/// parallel; each rendering is a pure function of its plan.
pub fn generate(config: &DatasetConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let lexicon = Lexicon::generate(config.num_subwords, config.num_words, config.sample_rate, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let [wmin, wmax] = config.words_per_utterance;
    let mut plans: Vec<(Split, InstancePlan)> = Vec::new();
    for split in Split::ALL {
        let count = match split {
            Split::Train => config.train_count,
            Split::Valid => config.valid_count,
            Split::Test => config.test_count,
        };
        for i in 0..count {
            let id = format!("{}-{i:05}", split.name());
            let mut attempts = 0;
            let plan = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(DatasetError::Config("word space too small for distinct sequences".into()));
                }
                let mut seqs = Vec::with_capacity(config.num_sources);
                while seqs.len() < config.num_sources {
                    let n = rng.random_range(wmin..=wmax);
                    let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..lexicon.words.len())).collect();
                    if !seqs.contains(&seq) {
                        seqs.push(seq);
                    }
                }
                let sources = seqs
                    .iter()
                    .map(|s| plan_utterance(s, &lexicon, config.sample_rate, rng.next_u64()))
                    .collect::<Result<Vec<_>, _>>()?;
                let truncate_to = sources.iter().map(|p| p.total_len).min().unwrap();
                let gains_db = (0..config.num_sources)
                    .map(|_| rng.random_range(config.source_gain_db_range[0]..=config.source_gain_db_range[1]))
                    .collect();
                let snr_db = config.noise.then(|| rng.random_range(config.snr_db_range[0]..=config.snr_db_range[1]));
                let noise_seed = rng.next_u64();
                let kept: Vec<Vec<usize>> = sources
                    .iter()
                    .map(|p| p.words[..kept_words(p, truncate_to)].iter().map(|w| w.word).collect())
                    .collect();
                let distinct = kept.iter().enumerate().all(|(i, k)| !k.is_empty() && !used.contains(k) && !kept[..i].contains(k));
                if distinct {
                    used.extend(kept);
                    break InstancePlan { id: id.clone(), sources, gains_db, truncate_to, snr_db, noise_seed };
                }
            };
            plans.push((split, plan));
        }
    }

    let rendered: Vec<(Split, Instance)> = plans
        .par_iter()
        .map(|(split, p)| render_instance(p, &lexicon, config.sample_rate).map(|inst| (*split, inst)))
        .collect::<Result<_, _>>()?;
    let mut ds = Dataset { lexicon, train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for (split, inst) in rendered {
        match split {
            Split::Train => ds.train.push(inst),
            Split::Valid => ds.valid.push(inst),
            Split::Test => ds.test.push(inst),
        }
    }
    Ok(ds)
}

/// Sources are cut to the shortest length; words that no longer fit are
/// dropped from the transcript and their audio is silenced.
fn render_instance(p: &InstancePlan, lexicon: &Lexicon, sample_rate: u32) -> Result<Instance, DatasetError> {
    let mut sources = Vec::with_capacity(p.sources.len());
    let mut transcripts = Vec::with_capacity(p.sources.len());
    for (plan, gain_db) in p.sources.iter().zip(&p.gains_db) {
        let keep = kept_words(plan, p.truncate_to);
        let mut kept = plan.clone();
        kept.words.truncate(keep);
        kept.total_len = p.truncate_to;
        let gain = 10f64.powf(gain_db / 20.0);
        sources.push(kept.render(lexicon).scaled(gain));
        transcripts.push(kept.transcript(lexicon));
    }
    let noise = match p.snr_db {
        Some(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
            let samples = (0..p.truncate_to).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Some(Waveform::new(samples, sample_rate)?)
        }
        None => None,
    };
    let mut mixture = mix(&sources, noise.as_ref(), p.snr_db)?;
    mixture.transcripts = transcripts;
    Ok(Instance { id: p.id.clone(), mixture, snr_db: p.snr_db })
}

/// One line of a split manifest. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture_path: String,
    pub source_paths: Vec<String>,
    pub transcript_paths: Vec<String>,
    pub noise_path: Option<String>,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    config_hash: String,
    num_sources: usize,
    counts: [usize; 3],
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_wave(path: &Path, w: &Waveform) -> Result<(), DatasetError> {
    write_wav(path, w).map_err(|source| DatasetError::Wav { path: path.to_path_buf(), source })
}

/// Writes `lexicon.json`, `meta.json`, one `<split>.jsonl` manifest per split
/// and a directory of WAV and transcript files per instance.
pub fn write_dataset(ds: &Dataset, root: &Path, config_hash: &str) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let lex = serde_json::to_string_pretty(&ds.lexicon).expect("lexicon serializes");
    write_file(&root.join("lexicon.json"), lex.as_bytes())?;
    let meta = DatasetMeta {
        config_hash: config_hash.to_string(),
        num_sources: ds.num_sources(),
        counts: [ds.train.len(), ds.valid.len(), ds.test.len()],
    };
    write_file(&root.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
    for split in Split::ALL {
        let mut manifest = String::new();
        for inst in ds.split(split) {
            let rel = format!("{}/{}", split.name(), inst.id);
            let dir = root.join(&rel);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let m = &inst.mixture;
            write_wave(&dir.join("mix.wav"), &m.mixture)?;
            let mut rec = ManifestRecord {
                id: inst.id.clone(),
                mixture_path: format!("{rel}/mix.wav"),
                source_paths: Vec::new(),
                transcript_paths: Vec::new(),
                noise_path: None,
                snr_db: inst.snr_db,
            };
            for (k, (s, t)) in m.sources.iter().zip(&m.transcripts).enumerate() {
                write_wave(&dir.join(format!("s{}.wav", k + 1)), s)?;
                write_file(&dir.join(format!("s{}.txt", k + 1)), t.to_text().as_bytes())?;
                rec.source_paths.push(format!("{rel}/s{}.wav", k + 1));
                rec.transcript_paths.push(format!("{rel}/s{}.txt", k + 1));
            }
            if let Some(n) = &m.noise {
                write_wave(&dir.join("noise.wav"), n)?;
                rec.noise_path = Some(format!("{rel}/noise.wav"));
            }
            manifest.push_str(&serde_json::to_string(&rec).unwrap());
            manifest.push('\n');
        }
        write_file(&manifest_path(root, split), manifest.as_bytes())?;
    }
    Ok(())
}

/// Generates the dataset described by `config` and writes it under `root`.
pub fn gen_dataset(config: &DatasetConfig, root: &Path, config_hash: &str) -> Result<Dataset, DatasetError> {
    let ds = generate(config)?;
    write_dataset(&ds, root, config_hash)?;
    Ok(ds)
}

fn read_wave(path: &Path) -> Result<Waveform, DatasetError> {
    read_wav(path).map_err(|source| DatasetError::Wav { path: path.to_path_buf(), source })
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let lex_path = root.join("lexicon.json");
    let lex_text = fs::read_to_string(&lex_path).map_err(io_err(&lex_path))?;
    let lexicon: Lexicon = serde_json::from_str(&lex_text)
        .map_err(|e| DatasetError::Manifest { path: lex_path.clone(), line: e.line(), message: e.to_string() })?;
    let mut ds = Dataset { lexicon, train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for split in Split::ALL {
        let path = manifest_path(root, split);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| DatasetError::Manifest { path: path.clone(), line: n + 1, message: e.to_string() })?;
            out.push(load_instance(root, &rec)?);
        }
        match split {
            Split::Train => ds.train = out,
            Split::Valid => ds.valid = out,
            Split::Test => ds.test = out,
        }
    }
    Ok(ds)
}

fn load_instance(root: &Path, rec: &ManifestRecord) -> Result<Instance, DatasetError> {
    let mixture = read_wave(&root.join(&rec.mixture_path))?;
    let sources = rec.source_paths.iter().map(|p| read_wave(&root.join(p))).collect::<Result<Vec<_>, _>>()?;
    let transcripts = rec
        .transcript_paths
        .iter()
        .map(|p| {
            let path = root.join(p);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(TimedTranscript::parse(&text)?)
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let noise = rec.noise_path.as_ref().map(|p| read_wave(&root.join(p))).transpose()?;
    Ok(Instance { id: rec.id.clone(), mixture: MixtureInstance { mixture, sources, noise, transcripts }, snr_db: rec.snr_db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::snr_db;

    pub(crate) fn small_config(n: usize, noise: bool) -> DatasetConfig {
        DatasetConfig {
            seed: 42,
            sample_rate: 8000,
            num_subwords: 24,
            num_words: 40,
            words_per_utterance: [2, 4],
            num_sources: 2,
            train_count: n,
            valid_count: 2,
            test_count: 2,
            noise,
            snr_db_range: [5.0, 5.0],
            source_gain_db_range: [-6.0, 0.0],
        }
    }

    #[test]
    fn clean_dataset_counts_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(10, false);
        gen_dataset(&cfg, dir.path(), "abc").unwrap();
        let manifest = fs::read_to_string(manifest_path(dir.path(), Split::Train)).unwrap();
        assert_eq!(manifest.lines().count(), 10);
        let train = dir.path().join("train");
        let files: Vec<String> = walk(&train);
        assert_eq!(files.iter().filter(|f| f.ends_with("mix.wav")).count(), 10);
        assert_eq!(files.iter().filter(|f| f.ends_with(".wav") && !f.ends_with("mix.wav")).count(), 20);
        assert_eq!(files.iter().filter(|f| f.ends_with(".txt")).count(), 20);
    }

    fn walk(dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p.to_string_lossy().into_owned());
            }
        }
        out
    }

    #[test]
    fn noisy_dataset_hits_snr() {
        let ds = generate(&small_config(6, true)).unwrap();
        for inst in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            let m = &inst.mixture;
            assert!((snr_db(&m.sources, m.noise.as_ref().unwrap()) - 5.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identical_seed_gives_identical_manifests() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small_config(5, true);
        gen_dataset(&cfg, a.path(), "h").unwrap();
        gen_dataset(&cfg, b.path(), "h").unwrap();
        for split in Split::ALL {
            assert_eq!(fs::read(manifest_path(a.path(), split)).unwrap(), fs::read(manifest_path(b.path(), split)).unwrap());
        }
        assert_eq!(fs::read(a.path().join("train/train-00003/mix.wav")).unwrap(), fs::read(b.path().join("train/train-00003/mix.wav")).unwrap());
    }

    #[test]
    fn word_sequences_are_disjoint_across_splits() {
        let ds = generate(&small_config(30, false)).unwrap();
        let mut seen = HashSet::new();
        for inst in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            for t in &inst.mixture.transcripts {
                let words: Vec<String> = t.words.iter().map(|w| w.text.clone()).collect();
                assert!(seen.insert(words), "repeated word sequence in {}", inst.id);
            }
        }
    }

    #[test]
    fn stored_mixture_matches_sum_of_stored_sources() {
        let dir = tempfile::tempdir().unwrap();
        for (noise, tag) in [(false, "clean"), (true, "noisy")] {
            let root = dir.path().join(tag);
            gen_dataset(&small_config(4, noise), &root, "h").unwrap();
            let ds = load_dataset(&root).unwrap();
            for inst in &ds.train {
                let m = &inst.mixture;
                let k = m.sources.len() as f64;
                for i in 0..m.mixture.len() {
                    let sum: f64 = m.sources.iter().chain(&m.noise).map(|s| s.samples()[i]).sum();
                    assert!((m.mixture.samples()[i] - sum).abs() <= (k + 1.0) / 32768.0);
                }
            }
        }
    }

    #[test]
    fn loaded_transcripts_are_valid_and_retokenize() {
        let dir = tempfile::tempdir().unwrap();
        let mem = gen_dataset(&small_config(8, false), dir.path(), "h").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.lexicon, mem.lexicon);
        for (a, b) in ds.train.iter().zip(&mem.train) {
            assert_eq!(a.mixture.transcripts, b.mixture.transcripts);
            for (t, w) in a.mixture.transcripts.iter().zip(&a.mixture.sources) {
                t.validate(Some(w.duration())).unwrap();
                assert!(!t.is_empty());
            }
        }
        assert_eq!(ds.utterances(Split::Train).unwrap().len(), 16);
    }

    #[test]
    fn rejects_invalid_source_count() {
        let mut cfg = small_config(1, false);
        cfg.num_sources = 4;
        assert!(matches!(generate(&cfg), Err(DatasetError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(gen_dataset(&small_config(1, false), &file, "h"), Err(DatasetError::Io { .. })));
    }
}
