//! Synthetic timed-text speech corpus.
//!
//! Every subword of the lexicon is voiced as a narrowband tone at its own
//! signature frequency, so utterances carry their lexical content in a form
//! the frozen audio front-end can recover. Word timings are exact at sample
//! resolution, which replaces forced alignment.

mod dataset;

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Waveform;

pub use dataset::{
    gen_dataset, generate, load_dataset, write_dataset, Dataset, DatasetConfig, DatasetError, Instance,
    ManifestRecord, Split, Utterance,
};

pub const CONTINUATION_MARKER: &str = "##";
pub const TONE_AMPLITUDE: f64 = 0.3;
pub const SUBWORD_DURATION_RANGE: (f64, f64) = (0.08, 0.20);
pub const SILENCE_RANGE: (f64, f64) = (0.02, 0.08);
pub const RAMP_SECONDS: f64 = 0.010;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("word `{0}` cannot be covered by the subword vocabulary")]
    Uncoverable(String),
    #[error("unknown word id {0}")]
    UnknownWord(usize),
    #[error("utterance needs at least one word")]
    EmptyUtterance,
    #[error("lexicon needs at least 2 subwords and 1 word, got {0} and {1}")]
    LexiconSize(usize, usize),
    #[error("{0} subword signatures do not fit below the Nyquist frequency of {1} Hz")]
    TooManySubwords(usize, u32),
    #[error("could not draw {0} distinct words from the subword inventory")]
    WordSpace(usize),
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("transcript has {0} words but {1} subword counts were given")]
    CountMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Flat,
    Rise,
    Fall,
    Arch,
}

impl Envelope {
    const ALL: [Envelope; 4] = [Envelope::Flat, Envelope::Rise, Envelope::Fall, Envelope::Arch];

    /// Gain at relative position `x ∈ [0, 1]` through the tone.
    pub fn gain(self, x: f64) -> f64 {
        match self {
            Envelope::Flat => 1.0,
            Envelope::Rise => 0.5 + 0.5 * x,
            Envelope::Fall => 1.0 - 0.5 * x,
            Envelope::Arch => 0.5 + 0.5 * (PI * x).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subword {
    /// Surface form; non-initial pieces carry the continuation marker.
    pub text: String,
    pub frequency_hz: f64,
    pub envelope: Envelope,
}

impl Subword {
    pub fn is_continuation(&self) -> bool {
        self.text.starts_with(CONTINUATION_MARKER)
    }

    pub fn surface(&self) -> &str {
        self.text.trim_start_matches(CONTINUATION_MARKER)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub subwords: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub seed: u64,
    pub sample_rate: u32,
    pub subwords: Vec<Subword>,
    pub words: Vec<Word>,
}

impl Lexicon {
    /// Draws `num_subwords` pieces (the first half word-initial, the rest
    /// continuation pieces) and `num_words` distinct words of 1–3 pieces.
    ///
    /// Signature frequencies sit on an evenly spaced grid between 300 Hz and
    /// 45% of the sample rate, shuffled across pieces. Words whose greedy
    /// tokenization would not reproduce their construction are redrawn.
    pub fn generate(num_subwords: usize, num_words: usize, sample_rate: u32, seed: u64) -> Result<Self, CorpusError> {
        if num_subwords < 2 || num_words == 0 {
            return Err(CorpusError::LexiconSize(num_subwords, num_words));
        }
        let lo = 300.0;
        let hi = 0.45 * sample_rate as f64;
        if hi <= lo || (hi - lo) / (num_subwords - 1) as f64 <= 2.0 * sample_rate as f64 / 1000.0 {
            return Err(CorpusError::TooManySubwords(num_subwords, sample_rate / 2));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = (hi - lo) / (num_subwords - 1) as f64;
        let mut freqs: Vec<f64> = (0..num_subwords).map(|i| (lo + step * i as f64).round()).collect();
        freqs.shuffle(&mut rng);

        let n_initial = num_subwords.div_ceil(2);
        let mut seen = HashSet::new();
        let mut subwords = Vec::with_capacity(num_subwords);
        for (i, &frequency_hz) in freqs.iter().enumerate() {
            let surface = loop {
                let mut s = String::new();
                s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
                if rng.random_bool(0.3) {
                    s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                }
                if seen.insert((i < n_initial, s.clone())) {
                    break s;
                }
            };
            let text = if i < n_initial { surface } else { format!("{CONTINUATION_MARKER}{surface}") };
            let envelope = Envelope::ALL[rng.random_range(0..Envelope::ALL.len())];
            subwords.push(Subword { text, frequency_hz, envelope });
        }

        let mut lexicon = Lexicon { seed, sample_rate, subwords, words: Vec::new() };
        let mut texts = HashSet::new();
        let mut attempts = 0;
        while lexicon.words.len() < num_words {
            attempts += 1;
            if attempts > 1000 * num_words {
                return Err(CorpusError::WordSpace(num_words));
            }
            let pieces = rng.random_range(1..=3usize);
            let mut ids = vec![rng.random_range(0..n_initial)];
            if n_initial < num_subwords {
                for _ in 1..pieces {
                    ids.push(rng.random_range(n_initial..num_subwords));
                }
            }
            let text: String = ids.iter().map(|&i| lexicon.subwords[i].surface()).collect();
            if texts.contains(&text) || lexicon.tokenize(&text).as_deref() != Ok(&ids[..]) {
                continue;
            }
            texts.insert(text.clone());
            lexicon.words.push(Word { text, subwords: ids });
        }
        Ok(lexicon)
    }

    pub fn num_subwords(&self) -> usize {
        self.subwords.len()
    }

    pub fn signature_frequencies(&self) -> Vec<f64> {
        self.subwords.iter().map(|s| s.frequency_hz).collect()
    }

    pub fn word(&self, id: usize) -> Result<&Word, CorpusError> {
        self.words.get(id).ok_or(CorpusError::UnknownWord(id))
    }

    /// Greedy longest-match tokenization: the longest word-initial piece
    /// first, then repeatedly the longest continuation piece.
    pub fn tokenize(&self, word: &str) -> Result<Vec<usize>, CorpusError> {
        let mut ids = Vec::new();
        let mut rest = word;
        while !rest.is_empty() {
            let initial = ids.is_empty();
            let best = self
                .subwords
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_continuation() != initial && rest.starts_with(s.surface()) && !s.surface().is_empty())
                .max_by_key(|(i, s)| (s.surface().len(), std::cmp::Reverse(*i)));
            match best {
                Some((i, s)) => {
                    ids.push(i);
                    rest = &rest[s.surface().len()..];
                }
                None => return Err(CorpusError::Uncoverable(word.to_string())),
            }
        }
        if ids.is_empty() {
            return Err(CorpusError::Uncoverable(word.to_string()));
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimedTranscript {
    pub words: Vec<TimedWord>,
}

impl TimedTranscript {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Checks ordering, positivity and (when given) the duration bound.
    pub fn validate(&self, duration: Option<f64>) -> Result<(), CorpusError> {
        let mut prev_end = 0.0;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start >= 0.0 && w.start < w.end) {
                return Err(CorpusError::InvalidTranscript(format!("word {i} has start {} end {}", w.start, w.end)));
            }
            if w.start < prev_end {
                return Err(CorpusError::InvalidTranscript(format!("word {i} overlaps its predecessor")));
            }
            prev_end = w.end;
        }
        if let (Some(d), Some(last)) = (duration, self.words.last()) {
            if last.end > d + 1e-9 {
                return Err(CorpusError::InvalidTranscript(format!("last word ends at {} after {d}", last.end)));
            }
        }
        Ok(())
    }

    /// One `text<TAB>start<TAB>end` line per word, times with 6 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            writeln!(s, "{}\t{:.6}\t{:.6}", w.text, w.start, w.end).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || CorpusError::InvalidTranscript(format!("line {}: expected `text<TAB>start<TAB>end`", n + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let start = fields[1].trim().parse().map_err(|_| bad())?;
            let end = fields[2].trim().parse().map_err(|_| bad())?;
            words.push(TimedWord { text: fields[0].to_string(), start, end });
        }
        let t = TimedTranscript { words };
        t.validate(None)?;
        Ok(t)
    }
}

/// Subword tokens of a transcript together with their parent words.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordSequence {
    pub tokens: Vec<usize>,
    pub word_index: Vec<usize>,
    pub per_word_counts: Vec<usize>,
}

impl SubwordSequence {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>, lexicon: &Lexicon) -> Result<Self, CorpusError> {
        let mut seq = SubwordSequence { tokens: Vec::new(), word_index: Vec::new(), per_word_counts: Vec::new() };
        for (l, w) in words.into_iter().enumerate() {
            let ids = lexicon.tokenize(w)?;
            seq.per_word_counts.push(ids.len());
            seq.word_index.extend(std::iter::repeat_n(l, ids.len()));
            seq.tokens.extend(ids);
        }
        Ok(seq)
    }

    pub fn from_transcript(t: &TimedTranscript, lexicon: &Lexicon) -> Result<Self, CorpusError> {
        Self::from_words(t.words.iter().map(|w| w.text.as_str()), lexicon)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPiece {
    pub subword: usize,
    pub start: usize,
    pub len: usize,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedWord {
    pub word: usize,
    pub start: usize,
    pub end: usize,
    pub pieces: Vec<PlannedPiece>,
}

/// Sample-exact layout of an utterance, drawn before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub sample_rate: u32,
    pub total_len: usize,
    pub words: Vec<PlannedWord>,
}

fn seconds_to_samples(s: f64, sample_rate: u32) -> usize {
    (s * sample_rate as f64).round() as usize
}

pub fn plan_utterance(word_ids: &[usize], lexicon: &Lexicon, sample_rate: u32, seed: u64) -> Result<UtterancePlan, CorpusError> {
    if word_ids.is_empty() {
        return Err(CorpusError::EmptyUtterance);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let silence = |rng: &mut ChaCha8Rng| seconds_to_samples(rng.random_range(SILENCE_RANGE.0..=SILENCE_RANGE.1), sample_rate);
    let mut cursor = silence(&mut rng);
    let mut words = Vec::with_capacity(word_ids.len());
    for (i, &w) in word_ids.iter().enumerate() {
        if i > 0 {
            cursor += silence(&mut rng);
        }
        let word = lexicon.word(w)?;
        let start = cursor;
        let mut pieces = Vec::with_capacity(word.subwords.len());
        for &sw in &word.subwords {
            let len = seconds_to_samples(rng.random_range(SUBWORD_DURATION_RANGE.0..=SUBWORD_DURATION_RANGE.1), sample_rate);
            let phase = rng.random_range(0.0..2.0 * PI);
            pieces.push(PlannedPiece { subword: sw, start: cursor, len, phase });
            cursor += len;
        }
        words.push(PlannedWord { word: w, start, end: cursor, pieces });
    }
    cursor += silence(&mut rng);
    Ok(UtterancePlan { sample_rate, total_len: cursor, words })
}

impl UtterancePlan {
    pub fn transcript(&self, lexicon: &Lexicon) -> TimedTranscript {
        let sr = self.sample_rate as f64;
        TimedTranscript {
            words: self
                .words
                .iter()
                .map(|w| TimedWord { text: lexicon.words[w.word].text.clone(), start: w.start as f64 / sr, end: w.end as f64 / sr })
                .collect(),
        }
    }

    /// Renders every piece as an enveloped tone with raised-cosine ramps
    /// inside its own span.
    pub fn render(&self, lexicon: &Lexicon) -> Waveform {
        let sr = self.sample_rate as f64;
        let ramp = seconds_to_samples(RAMP_SECONDS, self.sample_rate).max(1);
        let mut out = vec![0.0; self.total_len];
        for piece in self.words.iter().flat_map(|w| &w.pieces) {
            let sub = &lexicon.subwords[piece.subword];
            let omega = 2.0 * PI * sub.frequency_hz / sr;
            let r = ramp.min(piece.len / 2).max(1);
            for n in 0..piece.len {
                let x = n as f64 / (piece.len.max(2) - 1) as f64;
                let fade_in = if n < r { 0.5 - 0.5 * (PI * n as f64 / r as f64).cos() } else { 1.0 };
                let tail = piece.len - 1 - n;
                let fade_out = if tail < r { 0.5 - 0.5 * (PI * tail as f64 / r as f64).cos() } else { 1.0 };
                out[piece.start + n] =
                    TONE_AMPLITUDE * sub.envelope.gain(x) * fade_in * fade_out * (omega * n as f64 + piece.phase).sin();
            }
        }
        Waveform::new(out, self.sample_rate).expect("rendered samples are finite")
    }
}

/// Renders the given words with random piece durations and silences drawn
/// from `seed`; the transcript marks each word's exact sample span.
pub fn synth_utterance(word_ids: &[usize], lexicon: &Lexicon, sample_rate: u32, seed: u64) -> Result<(Waveform, TimedTranscript), CorpusError> {
    let plan = plan_utterance(word_ids, lexicon, sample_rate, seed)?;
    Ok((plan.render(lexicon), plan.transcript(lexicon)))
}
