//! Mono 16-bit PCM RIFF/WAVE reading and writing.
//!
//! Amplitudes are written as `clamp(round(a · 32767), −32768, 32767)` and read
//! back as `sample / 32768`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::signal::{SignalError, Waveform};

#[derive(Debug, Error)]
pub enum WavError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a RIFF/WAVE file")]
    NotRiff,
    #[error("missing `{0}` chunk")]
    MissingChunk(&'static str),
    #[error("truncated `{0}` chunk")]
    Truncated(&'static str),
    #[error("unsupported format tag {0}: only integer PCM (1) is supported")]
    NotPcm(u16),
    #[error("unsupported channel count {0}: only mono is supported")]
    NotMono(u16),
    #[error("unsupported bit depth {0}: only 16-bit samples are supported")]
    BitDepth(u16),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub fn amplitude_to_pcm(a: f64) -> i16 {
    (a * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn pcm_to_amplitude(s: i16) -> f64 {
    s as f64 / 32768.0
}

/// Amplitude after a write/read round trip.
pub fn quantize(a: f64) -> f64 {
    pcm_to_amplitude(amplitude_to_pcm(a))
}

pub fn encode(wave: &Waveform) -> Vec<u8> {
    let data_len = (wave.len() * 2) as u32;
    let rate = wave.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &a in wave.samples() {
        out.extend_from_slice(&amplitude_to_pcm(a).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotRiff);
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::Truncated("fmt "));
                }
                let f = &bytes[body..body + 16];
                let tag = u16::from_le_bytes([f[0], f[1]]);
                let channels = u16::from_le_bytes([f[2], f[3]]);
                let rate = u32::from_le_bytes([f[4], f[5], f[6], f[7]]);
                let bits = u16::from_le_bytes([f[14], f[15]]);
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or(WavError::MissingChunk("fmt "))?;
                if tag != 1 {
                    return Err(WavError::NotPcm(tag));
                }
                if channels != 1 {
                    return Err(WavError::NotMono(channels));
                }
                if bits != 16 {
                    return Err(WavError::BitDepth(bits));
                }
                if body + size > bytes.len() {
                    return Err(WavError::Truncated("data"));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| pcm_to_amplitude(i16::from_le_bytes([c[0], c[1]])))
                    .collect();
                return Ok(Waveform::new(samples, rate)?);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(WavError::MissingChunk(if format.is_some() { "data" } else { "fmt " }))
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), WavError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(wave))?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform, WavError> {
    decode(&fs::read(path)?)
}
