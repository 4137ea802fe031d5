//! Frozen audio and text embedding front-ends.
//!
//! The audio encoder measures, per frame, the Hann-windowed power at each
//! lexicon signature frequency, compresses it with `log1p` and projects it
//! through a fixed seeded matrix. The text encoder looks tokens up in a fixed
//! seeded table, mixes each column with its neighbours and normalizes.
//! Neither has trainable state.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::corpus::Lexicon;
use crate::signal::Waveform;
use crate::tensor::{matmul, Matrix};

/// Scale applied to normalized band power before `log1p`.
pub const POWER_GAIN: f64 = 1e3;

const CACHE_MAGIC: &[u8; 4] = b"TTRE";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input has {samples} samples but one frame needs more than {frame}")]
    TooShort { samples: usize, frame: usize },
    #[error("sample rate {got} Hz does not match the encoder's {expected} Hz")]
    RateMismatch { expected: u32, got: u32 },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("token list is empty")]
    EmptyTokens,
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_audio: usize,
    pub d_text: usize,
    /// Embedding frames per second.
    pub frame_rate: f64,
    /// Analysis window length in seconds.
    pub frame_length: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_audio: 24, d_text: 32, frame_rate: 50.0, frame_length: 0.032, seed: 7 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_audio == 0 || self.d_text == 0 {
            return Err(EncoderError::Config("embedding dimensions must be at least 1".into()));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(EncoderError::Config(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if !(self.frame_length.is_finite() && self.frame_length >= 1.0 / self.frame_rate) {
            return Err(EncoderError::Config(format!(
                "frame_length {} must be at least one hop ({} s)",
                self.frame_length,
                1.0 / self.frame_rate
            )));
        }
        Ok(())
    }
}

/// Columns are embeddings: `values` is `dim × count`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Matrix,
    /// Frames per second for audio embeddings, `None` for text.
    pub frame_rate: Option<f64>,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn count(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.dim()).map(|d| self.values.get(d, n)).collect()
    }

    /// `count × dim` layout, one embedding per row.
    pub fn to_rows(&self) -> Matrix {
        self.values.transpose()
    }

    pub fn from_rows(rows: &Matrix, frame_rate: Option<f64>) -> Self {
        EmbeddingMatrix { values: rows.transpose(), frame_rate }
    }

    /// Header `{magic, version, dim, count, frame_rate}` followed by the
    /// values as 64-bit little-endian floats in row-major order. A missing
    /// frame rate is stored as NaN.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.values.data().len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&self.frame_rate.unwrap_or(f64::NAN).to_le_bytes());
        for v in self.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let bad = |m: &str| EncoderError::Cache(m.to_string());
        if bytes.len() < 32 || &bytes[..4] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        if u32_at(4) != CACHE_VERSION {
            return Err(bad("unsupported version"));
        }
        let (dim, count) = (u64_at(8) as usize, u64_at(16) as usize);
        let rate = f64::from_bits(u64_at(24));
        let body = &bytes[32..];
        if dim.checked_mul(count).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(bad("size does not match header"));
        }
        let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let values = Matrix::from_vec(dim, count, data);
        if !values.is_finite() {
            return Err(bad("non-finite values"));
        }
        Ok(EmbeddingMatrix { values, frame_rate: (!rate.is_nan()).then_some(rate) })
    }

    pub fn write(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    config: EncoderConfig,
    sample_rate: u32,
    frame_len: usize,
    frequencies: Vec<f64>,
    /// `frame_len × U` windowed cosine and sine bases, scaled so that a unit
    /// amplitude tone has band power `POWER_GAIN`.
    cos_basis: Matrix,
    sin_basis: Matrix,
    /// `U × D_S`.
    projection: Matrix,
}

impl AudioEncoder {
    pub fn new(config: &EncoderConfig, lexicon: &Lexicon) -> Result<Self, EncoderError> {
        Self::with_frequencies(config, lexicon.sample_rate, lexicon.signature_frequencies())
    }

    pub fn with_frequencies(config: &EncoderConfig, sample_rate: u32, frequencies: Vec<f64>) -> Result<Self, EncoderError> {
        config.validate()?;
        if frequencies.is_empty() {
            return Err(EncoderError::Config("no signature frequencies".into()));
        }
        let sr = sample_rate as f64;
        let frame_len = (config.frame_length * sr).round() as usize;
        if frame_len < 2 {
            return Err(EncoderError::Config("frame shorter than two samples".into()));
        }
        let window: Vec<f64> =
            (0..frame_len).map(|n| 0.5 - 0.5 * (2.0 * PI * (n as f64 + 0.5) / frame_len as f64).cos()).collect();
        // a tone of amplitude a has |Σ w x e^{-iωn}| ≈ a·Σw/2
        let norm = 2.0 * POWER_GAIN.sqrt() / window.iter().sum::<f64>();
        let u = frequencies.len();
        let basis = |f: fn(f64) -> f64| {
            Matrix::from_fn(frame_len, u, |n, k| norm * window[n] * f(2.0 * PI * frequencies[k] / sr * n as f64))
        };
        let cos_basis = basis(f64::cos);
        let sin_basis = basis(f64::sin);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa0d1_0e4c);
        let projection = gaussian_matrix(u, config.d_audio, 1.0 / (u as f64).sqrt(), &mut rng);
        Ok(AudioEncoder { config: config.clone(), sample_rate, frame_len, frequencies, cos_basis, sin_basis, projection })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    /// `floor(duration · R)`.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        (num_samples as f64 * self.config.frame_rate / self.sample_rate as f64 + 1e-9).floor() as usize
    }

    /// First sample of each frame; frame `t` is centred on `(t + 0.5) / R`
    /// seconds and may extend past either end (read as zeros).
    pub fn frame_starts(&self, num_samples: usize) -> Vec<isize> {
        let hop = self.sample_rate as f64 / self.config.frame_rate;
        (0..self.frame_count(num_samples))
            .map(|t| ((t as f64 + 0.5) * hop - self.frame_len as f64 / 2.0).round() as isize)
            .collect()
    }

    fn check(&self, num_samples: usize, sample_rate: u32) -> Result<(), EncoderError> {
        if sample_rate != self.sample_rate {
            return Err(EncoderError::RateMismatch { expected: self.sample_rate, got: sample_rate });
        }
        if num_samples <= self.frame_len || self.frame_count(num_samples) == 0 {
            return Err(EncoderError::TooShort { samples: num_samples, frame: self.frame_len });
        }
        Ok(())
    }

    /// Adds the filterbank stage to `g`: `samples` is any node holding the
    /// signal (read flattened); returns the `T × U` log-power node.
    pub fn filterbank_node(&self, g: &mut Graph, samples: NodeId, num_samples: usize) -> NodeId {
        let frames = g.frame(samples, self.frame_starts(num_samples), self.frame_len);
        let cb = g.constant(self.cos_basis.clone());
        let sb = g.constant(self.sin_basis.clone());
        let re = g.matmul(frames, cb);
        let im = g.matmul(frames, sb);
        let re2 = g.square(re);
        let im2 = g.square(im);
        let power = g.add(re2, im2);
        g.log1p(power)
    }

    /// In-graph encoding; returns the `T × D_S` node (one frame per row).
    pub fn encode_node(&self, g: &mut Graph, samples: NodeId, num_samples: usize) -> Result<NodeId, EncoderError> {
        self.check(num_samples, self.sample_rate)?;
        let bank = self.filterbank_node(g, samples, num_samples);
        let p = g.constant(self.projection.clone());
        Ok(g.matmul(bank, p))
    }

    /// `T × U` matrix of compressed band powers.
    pub fn filterbank(&self, wave: &Waveform) -> Result<Matrix, EncoderError> {
        self.check(wave.len(), wave.sample_rate())?;
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(wave.len(), 1, wave.samples().to_vec()));
        let bank = self.filterbank_node(&mut g, x, wave.len());
        Ok(g.value(bank).clone())
    }

    pub fn encode(&self, wave: &Waveform) -> Result<EmbeddingMatrix, EncoderError> {
        self.check(wave.len(), wave.sample_rate())?;
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(wave.len(), 1, wave.samples().to_vec()));
        let s = self.encode_node(&mut g, x, wave.len())?;
        Ok(EmbeddingMatrix::from_rows(g.value(s), Some(self.config.frame_rate)))
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    /// `U × D_W`.
    table: Matrix,
}

impl TextEncoder {
    pub fn new(config: &EncoderConfig, num_subwords: usize) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e47_e4c0);
        let table = gaussian_matrix(num_subwords, config.d_text, 1.0 / (config.d_text as f64).sqrt(), &mut rng);
        Ok(TextEncoder { table })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table_row(&self, token: usize) -> Option<&[f64]> {
        (token < self.table.rows()).then(|| self.table.row(token))
    }

    /// `D_W × M`: table lookup, one pass of `0.5·e_m + 0.25·e_{m−1} +
    /// 0.25·e_{m+1}` with ends repeating their own row, then unit columns.
    pub fn encode(&self, tokens: &[usize]) -> Result<EmbeddingMatrix, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyTokens);
        }
        let rows: Vec<&[f64]> =
            tokens.iter().map(|&t| self.table_row(t).ok_or(EncoderError::UnknownToken(t))).collect::<Result<_, _>>()?;
        let m = rows.len();
        let d = self.dim();
        let mut out = Matrix::zeros(m, d);
        for i in 0..m {
            let prev = rows[i.saturating_sub(1)];
            let next = rows[(i + 1).min(m - 1)];
            let row = out.row_mut(i);
            for j in 0..d {
                row[j] = 0.5 * rows[i][j] + 0.25 * prev[j] + 0.25 * next[j];
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(EmbeddingMatrix::from_rows(&out, None))
    }
}

/// Both frozen front-ends built from one config and lexicon.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub audio: AudioEncoder,
    pub text: TextEncoder,
}

impl Encoders {
    pub fn new(config: &EncoderConfig, lexicon: &Lexicon) -> Result<Self, EncoderError> {
        Ok(Encoders { audio: AudioEncoder::new(config, lexicon)?, text: TextEncoder::new(config, lexicon.num_subwords())? })
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.config.d_audio
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim()
    }
}

/// Projects a `T × U` filterbank through the fixed matrix; exposed for tests
/// that check the projection of a known filterbank.
pub fn project(encoder: &AudioEncoder, filterbank: &Matrix) -> Matrix {
    matmul(filterbank, false, &encoder.projection, false)
}
