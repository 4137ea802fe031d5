//! Waveforms, signal-to-distortion metrics, permutation invariant loss and
//! additive mixing.

use itertools::Itertools;
use thiserror::Error;

use crate::autodiff::{dot, si_sdr_terms};
use crate::corpus::TimedTranscript;

/// Value returned in place of +∞ dB when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Residual energy below this fraction of the target energy is treated as
/// an exact reconstruction.
pub const RELATIVE_RESIDUAL_FLOOR: f64 = 1e-12;

/// Stabilizer added to the residual energy inside training losses.
pub const TRAINING_EPS: f64 = 1e-8;

/// Largest supported source count for exhaustive permutation search.
pub const MAX_PIT_SOURCES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("waveform contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("reference signal is identically zero")]
    ZeroReference,
    #[error("source count mismatch: {0} references vs {1} estimates")]
    CountMismatch(usize, usize),
    #[error("permutation search supports 1..={MAX_PIT_SOURCES} sources, got {0}")]
    UnsupportedSourceCount(usize),
    #[error("cannot scale an all-zero noise signal to a target SNR")]
    SilentNoise,
    #[error("no sources given")]
    NoSources,
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidSampleRate);
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        dot(&self.samples, &self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform { samples: self.samples.iter().map(|v| v * gain).collect(), sample_rate: self.sample_rate }
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform { samples: self.samples[..len.min(self.len())].to_vec(), sample_rate: self.sample_rate }
    }

    fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(SignalError::RateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(SignalError::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

/// Scale-invariant SDR in dB, clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(SignalError::LengthMismatch(reference.len(), estimate.len()));
    }
    si_sdr_slices(reference.samples(), estimate.samples())
}

pub(crate) fn si_sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(SignalError::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(SignalError::ZeroReference);
    }
    let (target, residual, _) = si_sdr_terms(reference, estimate);
    Ok(capped_ratio_db(target, residual))
}

/// Plain (scale-dependent) SDR: `10·log10(‖s‖² / ‖s − ŝ‖²)`.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(SignalError::LengthMismatch(reference.len(), estimate.len()));
    }
    sdr_slices(reference.samples(), estimate.samples())
}

pub(crate) fn sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.iter().all(|&v| v == 0.0) {
        return Err(SignalError::ZeroReference);
    }
    let target = dot(reference, reference);
    let residual: f64 = reference.iter().zip(estimate).map(|(s, e)| (s - e) * (s - e)).sum();
    Ok(capped_ratio_db(target, residual))
}

fn capped_ratio_db(target: f64, residual: f64) -> f64 {
    if residual <= RELATIVE_RESIDUAL_FLOOR * target {
        return SI_SDR_CAP_DB;
    }
    if target <= 0.0 {
        return -SI_SDR_CAP_DB;
    }
    (10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
}

pub fn si_sdr_improvement(mixture: &Waveform, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if mixture.len() != reference.len() {
        return Err(SignalError::LengthMismatch(mixture.len(), reference.len()));
    }
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

pub fn sdr_improvement(mixture: &Waveform, reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if mixture.len() != reference.len() {
        return Err(SignalError::LengthMismatch(mixture.len(), reference.len()));
    }
    Ok(sdr(reference, estimate)? - sdr(reference, mixture)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    /// Negative sum of the per-pair SI-SDR values (dB).
    pub loss: f64,
    /// `permutation[k]` is the estimate index paired with reference `k`.
    pub permutation: Vec<usize>,
    /// SI-SDR of each reference against its paired estimate.
    pub per_pair_si_sdr: Vec<f64>,
}

/// Exhaustive permutation invariant SI-SDR loss.
///
/// Permutations are visited in lexicographic order and only a strictly
/// smaller loss replaces the incumbent, so ties resolve to the
/// lexicographically smallest assignment.
pub fn pit_loss(references: &[Waveform], estimates: &[Waveform]) -> Result<PitResult> {
    let refs: Vec<&[f64]> = references.iter().map(Waveform::samples).collect();
    let ests: Vec<&[f64]> = estimates.iter().map(Waveform::samples).collect();
    pit_loss_slices(&refs, &ests)
}

pub(crate) fn pit_loss_slices(references: &[&[f64]], estimates: &[&[f64]]) -> Result<PitResult> {
    let k = references.len();
    if k != estimates.len() {
        return Err(SignalError::CountMismatch(k, estimates.len()));
    }
    if k == 0 || k > MAX_PIT_SOURCES {
        return Err(SignalError::UnsupportedSourceCount(k));
    }
    // pairwise[r][e]
    let mut pairwise = vec![vec![0.0; k]; k];
    for (r, reference) in references.iter().enumerate() {
        for (e, estimate) in estimates.iter().enumerate() {
            pairwise[r][e] = si_sdr_slices(reference, estimate)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let loss: f64 = perm.iter().enumerate().map(|(r, &e)| -pairwise[r][e]).sum();
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    let (loss, permutation) = best.expect("at least one permutation");
    let per_pair_si_sdr = permutation.iter().enumerate().map(|(r, &e)| pairwise[r][e]).collect();
    Ok(PitResult { loss, permutation, per_pair_si_sdr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureInstance {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub noise: Option<Waveform>,
    pub transcripts: Vec<TimedTranscript>,
}

impl MixtureInstance {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate()
    }
}

/// Sums the sources and optional noise. When `snr_db` is given the noise is
/// first rescaled so that `10·log10(Σ‖s_k‖² / ‖n‖²) = snr_db`.
pub fn mix(sources: &[Waveform], noise: Option<&Waveform>, snr_db: Option<f64>) -> Result<MixtureInstance> {
    let first = sources.first().ok_or(SignalError::NoSources)?;
    for s in &sources[1..] {
        first.check_compatible(s)?;
    }
    let noise = match noise {
        Some(n) => {
            first.check_compatible(n)?;
            match snr_db {
                Some(snr) => {
                    let noise_energy = n.energy();
                    if noise_energy == 0.0 {
                        return Err(SignalError::SilentNoise);
                    }
                    let speech: f64 = sources.iter().map(Waveform::energy).sum();
                    let gain = (speech / (noise_energy * 10f64.powf(snr / 10.0))).sqrt();
                    Some(n.scaled(gain))
                }
                None => Some(n.clone()),
            }
        }
        None => None,
    };
    let mut samples = vec![0.0; first.len()];
    for s in sources.iter().chain(noise.as_ref()) {
        for (m, v) in samples.iter_mut().zip(s.samples()) {
            *m += v;
        }
    }
    Ok(MixtureInstance {
        mixture: Waveform::new(samples, first.sample_rate())?,
        sources: sources.to_vec(),
        noise,
        transcripts: Vec::new(),
    })
}

/// `10·log10(Σ‖s_k‖² / ‖n‖²)`.
pub fn snr_db(sources: &[Waveform], noise: &Waveform) -> f64 {
    let speech: f64 = sources.iter().map(Waveform::energy).sum();
    10.0 * (speech / noise.energy()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
        wave((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn waveform_validation() {
        assert_eq!(Waveform::new(vec![0.0], 0), Err(SignalError::InvalidSampleRate));
        assert_eq!(Waveform::new(vec![0.0, f64::NAN], 8000), Err(SignalError::NonFinite(1)));
    }

    #[test]
    fn si_sdr_hand_case_is_zero_db() {
        let v = si_sdr(&wave(vec![1.0, 0.0]), &wave(vec![1.0, 1.0])).unwrap();
        assert!(v.abs() <= 1e-12, "{v}");
    }

    #[test]
    fn si_sdr_exact_copy_hits_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_wave(&mut rng, 64);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&r, &r.scaled(0.25)).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn si_sdr_errors() {
        assert_eq!(si_sdr(&wave(vec![1.0]), &wave(vec![1.0, 2.0])), Err(SignalError::LengthMismatch(1, 2)));
        assert_eq!(si_sdr(&wave(vec![0.0, 0.0]), &wave(vec![1.0, 2.0])), Err(SignalError::ZeroReference));
    }

    #[test]
    fn improvement_of_mixture_is_zero_and_of_reference_is_cap_minus_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s1 = random_wave(&mut rng, 200);
        let s2 = random_wave(&mut rng, 200);
        let m = mix(&[s1.clone(), s2], None, None).unwrap();
        assert_eq!(si_sdr_improvement(&m.mixture, &s1, &m.mixture).unwrap(), 0.0);
        let base = si_sdr(&s1, &m.mixture).unwrap();
        assert_eq!(si_sdr_improvement(&m.mixture, &s1, &s1).unwrap(), SI_SDR_CAP_DB - base);
        let noisy: Vec<f64> = s1.samples().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        assert!(si_sdr_improvement(&m.mixture, &s1, &wave(noisy)).unwrap() > 0.0);
    }

    #[test]
    fn pit_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs: Vec<_> = (0..3).map(|_| random_wave(&mut rng, 100)).collect();
        let r = pit_loss(&refs, &refs).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert_eq!(r.loss, -3.0 * SI_SDR_CAP_DB);
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let r = pit_loss(&refs[..2], &swapped).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
    }

    #[test]
    fn pit_ties_pick_lexicographically_smallest() {
        let a = wave(vec![1.0, 2.0, 3.0]);
        let r = pit_loss(&[a.clone(), a.clone()], &[a.clone(), a]).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
    }

    #[test]
    fn pit_errors() {
        let a = wave(vec![1.0, 2.0]);
        assert_eq!(pit_loss(&[a.clone()], &[]), Err(SignalError::CountMismatch(1, 0)));
        let five = vec![a; 5];
        assert_eq!(pit_loss(&five, &five), Err(SignalError::UnsupportedSourceCount(5)));
    }

    #[test]
    fn mix_sums_exactly_and_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1 = random_wave(&mut rng, 300);
        let s2 = random_wave(&mut rng, 300);
        let m = mix(&[s1.clone(), s2.clone()], None, None).unwrap();
        for i in 0..300 {
            assert_eq!(m.mixture.samples()[i], s1.samples()[i] + s2.samples()[i]);
        }
        let n = random_wave(&mut rng, 300);
        let m = mix(std::slice::from_ref(&s1), Some(&n), Some(0.0)).unwrap();
        let scaled = m.noise.as_ref().unwrap();
        assert!((s1.energy() - scaled.energy()).abs() <= 1e-6 * s1.energy());

        let s3 = random_wave(&mut rng, 300);
        let srcs = [s1, s2, s3];
        let m = mix(&srcs, Some(&n), Some(5.0)).unwrap();
        assert!((snr_db(&srcs, m.noise.as_ref().unwrap()) - 5.0).abs() <= 1e-6);
    }

    #[test]
    fn mix_rejects_incompatible_inputs() {
        let a = wave(vec![1.0, 2.0]);
        let b = wave(vec![1.0]);
        assert_eq!(mix(&[a.clone(), b], None, None).unwrap_err(), SignalError::LengthMismatch(2, 1));
        let c = Waveform::new(vec![1.0, 2.0], 16000).unwrap();
        assert_eq!(mix(&[a, c], None, None).unwrap_err(), SignalError::RateMismatch(8000, 16000));
    }

    proptest! {
        #[test]
        fn si_sdr_is_invariant_to_estimate_scale(
            seed in any::<u64>(),
            c in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_wave(&mut rng, 64);
            let e = random_wave(&mut rng, 64);
            let a = si_sdr(&r, &e).unwrap();
            let b = si_sdr(&r, &e.scaled(c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn pit_loss_is_invariant_to_estimate_order(seed in any::<u64>(), k in 2usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<_> = (0..k).map(|_| random_wave(&mut rng, 40)).collect();
            let ests: Vec<_> = (0..k).map(|_| random_wave(&mut rng, 40)).collect();
            let base = pit_loss(&refs, &ests).unwrap();
            let mut rev = ests.clone();
            rev.reverse();
            let other = pit_loss(&refs, &rev).unwrap();
            prop_assert!((base.loss - other.loss).abs() <= 1e-9);
            let identity: f64 = (0..k).map(|i| -si_sdr(&refs[i], &ests[i]).unwrap()).sum();
            prop_assert!(base.loss <= identity + 1e-12);
            let sum: f64 = base.per_pair_si_sdr.iter().sum();
            prop_assert!((base.loss + sum).abs() <= 1e-9);
        }

        #[test]
        fn mix_reconstruction_residual_is_tiny(seed in any::<u64>(), snr in -10.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let srcs: Vec<_> = (0..2).map(|_| random_wave(&mut rng, 50)).collect();
            let n = random_wave(&mut rng, 50);
            let m = mix(&srcs, Some(&n), Some(snr)).unwrap();
            for i in 0..50 {
                let rest = m.mixture.samples()[i]
                    - srcs[0].samples()[i]
                    - srcs[1].samples()[i]
                    - m.noise.as_ref().unwrap().samples()[i];
                prop_assert!(rest.abs() <= 1e-9);
            }
        }
    }
}
