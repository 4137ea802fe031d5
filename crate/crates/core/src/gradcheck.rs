//! Central finite-difference checks of analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::alignment::{align, AlignmentError};
use crate::autodiff::Graph;
use crate::corpus::{CorpusError, Instance, Lexicon, SubwordSequence};
use crate::encoders::{EncoderError, Encoders};
use crate::params::{seeded_rng, ParamId, ParamStore};
use crate::separator::{total_loss_node, Separator, SeparatorError, TtrContext};
use crate::summarizer::{Bound, Stage, Summarizer, SummarizerError};
use crate::tensor::Matrix;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely; round-off in a
/// central difference of an O(1) loss is about 1e-11 at `FD_STEP`.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central difference of `f` around its current point along one coordinate,
/// where `f(delta)` evaluates the objective with that coordinate shifted.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("unknown stage `{0}` (expected transformer, ttr or separator)")]
    UnknownStage(String),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradStage {
    /// Both summarizer stacks under a random linear probe.
    Transformer,
    /// Timed-text loss from raw samples through the audio encoder.
    Ttr,
    /// Separator objective including the timed-text term.
    Separator,
}

impl GradStage {
    pub const ALL: [GradStage; 3] = [GradStage::Transformer, GradStage::Ttr, GradStage::Separator];

    pub fn name(self) -> &'static str {
        match self {
            GradStage::Transformer => "transformer",
            GradStage::Ttr => "ttr",
            GradStage::Separator => "separator",
        }
    }
}

impl fmt::Display for GradStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradStage {
    type Err = GradCheckError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GradStage::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| GradCheckError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: GradStage,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

impl StageReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// Compares analytic and central-difference gradients of `eval` on sampled
/// coordinates of `store`. `groups` lists `(first tensor, end tensor, count)`
/// so callers can spread samples across parts of the store.
fn sampled_check<E>(
    stage: GradStage,
    store: &ParamStore,
    groups: &[(usize, usize, usize)],
    seed: u64,
    eval: E,
) -> Result<StageReport, GradCheckError>
where
    E: Fn(&ParamStore) -> Result<(f64, Vec<Matrix>), GradCheckError>,
{
    let (_, grads) = eval(store)?;
    let mut rng = seeded_rng(seed, 0x6c);
    let mut report = StageReport { stage, coordinates: 0, max_rel_error: 0.0, worst: (String::new(), 0, 0.0, 0.0) };
    for &(first, end, count) in groups {
        let sizes: Vec<usize> = (first..end).map(|i| store.params()[i].value.data().len()).collect();
        let total: usize = sizes.iter().sum();
        for flat in sample(&mut rng, total, count.min(total)).into_vec() {
            let (mut t, mut j) = (first, flat);
            while j >= sizes[t - first] {
                j -= sizes[t - first];
                t += 1;
            }
            let mut err = None;
            let numeric = central_difference(|delta| {
                let mut s = store.clone();
                s.get_mut(ParamId::from_index(t)).data_mut()[j] += delta;
                match eval(&s) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        err = Some(e);
                        f64::NAN
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            let analytic = grads[t].data()[j];
            let rel = relative_error(analytic, numeric);
            report.coordinates += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (store.params()[t].name.clone(), j, analytic, numeric);
            }
        }
    }
    Ok(report)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Both transformer stacks on random inputs, scored by `Σ R ⊙ out` for a
/// fixed random probe `R`.
pub fn check_transformer(summarizer: &Summarizer, coordinates: usize, seed: u64) -> Result<StageReport, GradCheckError> {
    let mut rng = seeded_rng(seed, 0x7f);
    let x_sum = random_matrix(9, summarizer.d_audio(), &mut rng);
    let x_agg = random_matrix(5, summarizer.d_text(), &mut rng);
    // Unit-scale probes keep the objective O(1), so round-off in the
    // central difference stays well under the absolute floor.
    let probe = |rows: usize, rng: &mut _| {
        let r = random_matrix(rows, summarizer.d_text(), rng);
        let scale = 1.0 / ((rows * summarizer.d_text()) as f64).sqrt();
        Matrix::from_fn(rows, summarizer.d_text(), |i, j| r.get(i, j) * scale)
    };
    let r_sum = probe(9, &mut rng);
    let r_agg = probe(5, &mut rng);
    let template = summarizer.clone();
    let eval = |store: &ParamStore| {
        let mut s = template.clone();
        s.store_mut().load_values(store).expect("same table");
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let mut total = None;
        for (stage, x, r) in [(Stage::Summarize, &x_sum, &r_sum), (Stage::Aggregate, &x_agg, &r_agg)] {
            let x = g.constant(x.clone());
            let y = s.transformer_node(&mut g, &b, stage, x)?;
            let r = g.constant(r.clone());
            let p = g.mul(y, r);
            let p = g.sum(p);
            total = Some(match total {
                None => p,
                Some(t) => g.add(t, p),
            });
        }
        let total = total.expect("two stages");
        let grads = g.backward(total);
        Ok((g.scalar(total), store.collect_grads(&grads, b.nodes())))
    };
    sampled_check(GradStage::Transformer, summarizer.store(), &[(0, summarizer.store().len(), coordinates)], seed, eval)
}

/// Timed-text loss of the first source of `inst`, differentiated with
/// respect to its raw samples and the summarizer parameters.
pub fn check_ttr(
    summarizer: &Summarizer,
    encoders: &Encoders,
    lexicon: &Lexicon,
    inst: &Instance,
    coordinates: usize,
    seed: u64,
) -> Result<StageReport, GradCheckError> {
    let wave = &inst.mixture.sources[0];
    let transcript = &inst.mixture.transcripts[0];
    let tokens = SubwordSequence::from_transcript(transcript, lexicon)?;
    let text = encoders.text.encode(&tokens.tokens)?.to_rows();
    let frames = encoders.audio.frame_count(wave.len());
    let map = align(transcript, &tokens, frames, encoders.audio.config().frame_rate)?;
    let n_sum = summarizer.store().len();
    let mut input = ParamStore::new("input");
    input.add("samples", Matrix::from_vec(wave.len(), 1, wave.samples().to_vec()));
    let store = summarizer.store().concat(&input);
    let template = summarizer.clone();
    let eval = |store: &ParamStore| {
        let mut s = template.clone();
        let mut sum_store = store.clone();
        let input = sum_store.split_off(n_sum, "input");
        s.store_mut().load_values(&sum_store).expect("same table");
        let mut g = Graph::new();
        let nodes = store.bind(&mut g);
        let b = Bound::from_nodes(nodes[..n_sum].to_vec());
        let x = nodes[n_sum];
        let audio = encoders.audio.encode_node(&mut g, x, input.params()[0].value.rows())?;
        let loss = s.ttr_node(&mut g, &b, audio, &map, &text)?;
        let grads = g.backward(loss);
        Ok((g.scalar(loss), store.collect_grads(&grads, &nodes)))
    };
    let half = coordinates / 2;
    sampled_check(GradStage::Ttr, &store, &[(n_sum, n_sum + 1, half), (0, n_sum, coordinates - half)], seed, eval)
}

/// Separator objective at `lambda` with a frozen summarizer, differentiated
/// with respect to separator parameters.
pub fn check_separator(
    separator: &Separator,
    summarizer: &Summarizer,
    encoders: &Encoders,
    lexicon: &Lexicon,
    inst: &Instance,
    lambda: f64,
    coordinates: usize,
    seed: u64,
) -> Result<StageReport, GradCheckError> {
    let m = &inst.mixture;
    let len = m.mixture.len();
    let mut frozen = summarizer.store().clone();
    frozen.set_frozen(true);
    let template = separator.clone();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let nodes = store.bind(&mut g);
        let sum_nodes = frozen.bind(&mut g);
        let x = g.constant(Matrix::from_vec(len, 1, m.mixture.samples().to_vec()));
        let est = template.separate_nodes(&mut g, &nodes, x, len)?;
        let ctx = TtrContext { summarizer, encoders, lexicon };
        let (loss, _) = total_loss_node(&mut g, &est, &m.sources, &m.transcripts, Some((ctx, &sum_nodes)), lambda)?;
        let grads = g.backward(loss);
        Ok((g.scalar(loss), store.collect_grads(&grads, &nodes)))
    };
    sampled_check(GradStage::Separator, separator.store(), &[(0, separator.store().len(), coordinates)], seed, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, DatasetConfig};
    use crate::encoders::EncoderConfig;
    use crate::separator::SeparatorConfig;
    use crate::summarizer::SummarizerConfig;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((central_difference(|d| (1.0 + d).powi(3)) - 3.0).abs() < 1e-8);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in GradStage::ALL {
            assert_eq!(s.name().parse::<GradStage>().unwrap(), s);
        }
        assert!("nope".parse::<GradStage>().is_err());
    }

    #[test]
    fn small_models_pass_every_stage() {
        let ds = generate(&DatasetConfig {
            seed: 4,
            sample_rate: 8000,
            num_subwords: 24,
            num_words: 40,
            words_per_utterance: [1, 2],
            num_sources: 2,
            train_count: 1,
            valid_count: 1,
            test_count: 1,
            noise: false,
            snr_db_range: [0.0, 0.0],
            source_gain_db_range: [-2.0, 0.0],
        })
        .unwrap();
        let enc = Encoders::new(&EncoderConfig::default(), &ds.lexicon).unwrap();
        let cfg = SummarizerConfig { d_model: 8, n_heads: 2, d_ff: 12, sum_layers: 1, agg_layers: 1, seed: 2 };
        let summ = Summarizer::new(&cfg, enc.audio_dim(), enc.text_dim()).unwrap();
        let sep = Separator::new(&SeparatorConfig { num_sources: 2, filters: 6, kernel: 16, stride: 8, channels: 5, blocks: 2, seed: 1 })
            .unwrap();
        let inst = &ds.test[0];
        let reports = [
            check_transformer(&summ, 20, 1).unwrap(),
            check_ttr(&summ, &enc, &ds.lexicon, inst, 20, 1).unwrap(),
            check_separator(&sep, &summ, &enc, &ds.lexicon, inst, 0.5, 20, 1).unwrap(),
        ];
        for r in &reports {
            assert_eq!(r.coordinates, 20);
            assert!(r.passed(), "{r:?}");
        }
    }
}
