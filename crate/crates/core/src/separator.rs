//! Mask-based separator, its permutation invariant training, and finetuning
//! with the timed-text regularizer.
//!
//! The analysis stage frames the mixture (`kernel` samples every `stride`)
//! and maps each frame linearly to `F` features. The mask network is a
//! layer norm, a 1×1 projection to `C` channels, `B` residual blocks of
//! dilated convolution (kernel 3, dilation `2^b`), GELU, layer norm and a
//! 1×1 projection, and a sigmoid head producing `K` masks of width `F`. Each
//! masked feature map is mapped back to frames and overlap-added.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align, AlignmentError};
use crate::autodiff::{Graph, NodeId};
use crate::corpus::{CorpusError, Instance, Lexicon, SubwordSequence, TimedTranscript};
use crate::encoders::{EncoderError, Encoders};
use crate::optim::{fit, EpochRecord, TrainConfig, TrainError, TrainOutcome, ValidStats};
use crate::params::{seeded_rng, ParamId, ParamStore};
use crate::signal::{pit_loss_slices, si_sdr_slices, sdr_slices, PitResult, SignalError, Waveform, TRAINING_EPS};
use crate::summarizer::{Summarizer, SummarizerError};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const CONV_KERNEL: usize = 3;
pub const PRETRAINED_MODULE: &str = "separator:pit";
pub const MODULE_PREFIX: &str = "separator";

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error("invalid separator config: {0}")]
    Config(String),
    #[error("input has {len} samples, fewer than the {kernel}-sample kernel")]
    TooShort { len: usize, kernel: usize },
    #[error("{sources} sources but {transcripts} transcripts")]
    TranscriptMismatch { sources: usize, transcripts: usize },
    #[error("model separates {model} sources, data has {data}")]
    SourceCount { model: usize, data: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub num_sources: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig { num_sources: 2, filters: 64, kernel: 16, stride: 8, channels: 64, blocks: 4, seed: 13 }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<(), SeparatorError> {
        if [self.num_sources, self.filters, self.kernel, self.stride, self.channels, self.blocks].contains(&0) {
            return Err(SeparatorError::Config("all widths and counts must be at least 1".into()));
        }
        if self.stride > self.kernel {
            return Err(SeparatorError::Config("stride larger than kernel leaves samples unobserved".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub freeze_summarizer: bool,
    pub optimizer: TrainConfig,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        self.optimizer.validate()
    }
}

pub fn finetuned_module_name(lambda: f64) -> String {
    format!("{MODULE_PREFIX}:ttr:lambda={lambda}")
}

#[derive(Debug, Clone)]
struct Block {
    conv: (ParamId, ParamId),
    ln: (ParamId, ParamId),
    pw: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Separator {
    config: SeparatorConfig,
    store: ParamStore,
    enc: ParamId,
    ln_in: (ParamId, ParamId),
    bottleneck: (ParamId, ParamId),
    blocks: Vec<Block>,
    head: (ParamId, ParamId),
    dec: ParamId,
}

impl Separator {
    pub fn new(config: &SeparatorConfig) -> Result<Self, SeparatorError> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, 0x5e9);
        let mut s = ParamStore::new(PRETRAINED_MODULE);
        let (f, c, k) = (config.filters, config.channels, config.kernel);
        let enc = s.add_uniform("enc.w", k, f, k, &mut rng);
        let ln_in = (s.add("mask.ln.gamma", Matrix::from_fn(1, f, |_, _| 1.0)), s.add("mask.ln.beta", Matrix::zeros(1, f)));
        let bottleneck = (s.add_uniform("mask.in.w", f, c, f, &mut rng), s.add_uniform("mask.in.b", 1, c, f, &mut rng));
        let blocks = (0..config.blocks)
            .map(|b| Block {
                conv: (
                    s.add_uniform(format!("mask.b{b}.conv.w"), CONV_KERNEL * c, c, CONV_KERNEL * c, &mut rng),
                    s.add_uniform(format!("mask.b{b}.conv.b"), 1, c, CONV_KERNEL * c, &mut rng),
                ),
                ln: (
                    s.add(format!("mask.b{b}.ln.gamma"), Matrix::from_fn(1, c, |_, _| 1.0)),
                    s.add(format!("mask.b{b}.ln.beta"), Matrix::zeros(1, c)),
                ),
                pw: (s.add_uniform(format!("mask.b{b}.pw.w"), c, c, c, &mut rng), s.add_uniform(format!("mask.b{b}.pw.b"), 1, c, c, &mut rng)),
            })
            .collect();
        let kf = config.num_sources * f;
        let head = (s.add_uniform("mask.head.w", c, kf, c, &mut rng), s.add_uniform("mask.head.b", 1, kf, c, &mut rng));
        let dec = s.add_uniform("dec.w", f, k, f, &mut rng);
        Ok(Separator { config: config.clone(), store: s, enc, ln_in, bottleneck, blocks, head, dec })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_sources(&self) -> usize {
        self.config.num_sources
    }

    /// `ceil((L − kernel) / stride) + 1` frames starting at multiples of the
    /// stride; the last frame may run past the end and reads zeros.
    pub fn frame_starts(&self, len: usize) -> Vec<isize> {
        let (k, s) = (self.config.kernel, self.config.stride);
        let n = (len - k).div_ceil(s) + 1;
        (0..n).map(|t| (t * s) as isize).collect()
    }

    fn check_len(&self, len: usize) -> Result<(), SeparatorError> {
        if len < self.config.kernel {
            return Err(SeparatorError::TooShort { len, kernel: self.config.kernel });
        }
        Ok(())
    }

    /// Adds the separator to `g`; `params` are its bound parameter nodes and
    /// `x` holds `len` mixture samples. Returns one `len × 1` node per source.
    pub fn separate_nodes(&self, g: &mut Graph, params: &[NodeId], x: NodeId, len: usize) -> Result<Vec<NodeId>, SeparatorError> {
        self.check_len(len)?;
        let p = |id: ParamId| params[id.index()];
        let linear = |g: &mut Graph, x: NodeId, (w, b): (ParamId, ParamId)| {
            let y = g.matmul(x, p(w));
            g.add_row(y, p(b))
        };
        let starts = self.frame_starts(len);
        let frames = g.frame(x, starts.clone(), self.config.kernel);
        let feats = g.matmul(frames, p(self.enc));
        let h = g.layer_norm(feats, p(self.ln_in.0), p(self.ln_in.1), LN_EPS);
        let mut h = linear(g, h, self.bottleneck);
        for (b, block) in self.blocks.iter().enumerate() {
            let y = g.conv1d(h, p(block.conv.0), 1 << b);
            let y = g.add_row(y, p(block.conv.1));
            let y = g.gelu(y);
            let y = g.layer_norm(y, p(block.ln.0), p(block.ln.1), LN_EPS);
            let y = linear(g, y, block.pw);
            h = g.add(h, y);
        }
        let logits = linear(g, h, self.head);
        let masks = g.sigmoid(logits);
        let f = self.config.filters;
        let mut out = Vec::with_capacity(self.config.num_sources);
        for k in 0..self.config.num_sources {
            let m = g.slice_cols(masks, k * f, f);
            let masked = g.mul(feats, m);
            let frames_k = g.matmul(masked, p(self.dec));
            out.push(g.overlap_add(frames_k, starts.clone(), len));
        }
        Ok(out)
    }

    pub fn separate(&self, x: &Waveform) -> Result<Vec<Waveform>, SeparatorError> {
        let mut g = Graph::new();
        let mut frozen = self.store.clone();
        frozen.set_frozen(true);
        let params = frozen.bind(&mut g);
        let xs = g.constant(Matrix::from_vec(x.len(), 1, x.samples().to_vec()));
        let outs = self.separate_nodes(&mut g, &params, xs, x.len())?;
        outs.iter().map(|&o| Ok(Waveform::new(g.value(o).data().to_vec(), x.sample_rate())?)).collect()
    }
}

/// Frozen pieces needed to score estimates against timed transcripts.
#[derive(Clone, Copy)]
pub struct TtrContext<'a> {
    pub summarizer: &'a Summarizer,
    pub encoders: &'a Encoders,
    pub lexicon: &'a Lexicon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `L_PIT + λ·Σ_k L_TTR_k` with the capped metric SI-SDR in `L_PIT`.
    pub total: f64,
    /// Value of the differentiated objective, which uses the training-mode
    /// SI-SDR (ε in the residual energy) instead of the cap.
    pub objective: f64,
    pub pit: PitResult,
    /// `L_TTR` of the estimate paired with each reference transcript; empty
    /// when no regularizer was evaluated.
    pub ttr: Vec<f64>,
}

/// Builds `L_PIT + λ·Σ_k L_TTR(S̄_k, W_k)` on top of estimate nodes.
///
/// Reference `k` is paired with the estimate chosen for it by the PIT
/// search, and its transcript timings drive the alignment of that estimate's
/// audio embeddings. The regularizer is skipped when `lambda` is 0 or `ctx`
/// is `None`. `summarizer_params` are the summarizer's bound nodes.
pub fn total_loss_node(
    g: &mut Graph,
    estimates: &[NodeId],
    references: &[Waveform],
    transcripts: &[TimedTranscript],
    ctx: Option<(TtrContext<'_>, &[NodeId])>,
    lambda: f64,
) -> Result<(NodeId, LossBreakdown), SeparatorError> {
    if references.len() != transcripts.len() {
        return Err(SeparatorError::TranscriptMismatch { sources: references.len(), transcripts: transcripts.len() });
    }
    if estimates.len() != references.len() {
        return Err(SeparatorError::SourceCount { model: estimates.len(), data: references.len() });
    }
    let est_values: Vec<Vec<f64>> = estimates.iter().map(|&e| g.value(e).data().to_vec()).collect();
    let refs: Vec<&[f64]> = references.iter().map(Waveform::samples).collect();
    let ests: Vec<&[f64]> = est_values.iter().map(Vec::as_slice).collect();
    let pit = pit_loss_slices(&refs, &ests)?;
    let terms: Vec<NodeId> = pit
        .permutation
        .iter()
        .enumerate()
        .map(|(k, &e)| g.neg_si_sdr(estimates[e], refs[k], TRAINING_EPS))
        .collect();
    let mut objective = terms[0];
    for &t in &terms[1..] {
        objective = g.add(objective, t);
    }
    let mut ttr = Vec::new();
    if let Some((ctx, sum_params)) = ctx.filter(|_| lambda != 0.0) {
        let bound = crate::summarizer::Bound::from_nodes(sum_params.to_vec());
        let mut ttr_nodes = Vec::with_capacity(references.len());
        for (k, &e) in pit.permutation.iter().enumerate() {
            let len = references[k].len();
            let s = ctx.encoders.audio.encode_node(g, estimates[e], len)?;
            let frames = g.value(s).rows();
            let tokens = SubwordSequence::from_transcript(&transcripts[k], ctx.lexicon)?;
            let map = align(&transcripts[k], &tokens, frames, ctx.encoders.audio.config().frame_rate)?;
            let w = ctx.encoders.text.encode(&tokens.tokens)?.to_rows();
            let node = ctx.summarizer.ttr_node(g, &bound, s, &map, &w)?;
            ttr.push(g.scalar(node));
            ttr_nodes.push(node);
        }
        let mut reg = ttr_nodes[0];
        for &t in &ttr_nodes[1..] {
            reg = g.add(reg, t);
        }
        let reg = g.scale(reg, lambda);
        objective = g.add(objective, reg);
    }
    let total = pit.loss + lambda * ttr.iter().sum::<f64>();
    let breakdown = LossBreakdown { total, objective: g.scalar(objective), pit, ttr };
    Ok((objective, breakdown))
}

/// Value-only form of [`total_loss_node`] for fixed estimates.
pub fn total_loss(
    estimates: &[Waveform],
    references: &[Waveform],
    transcripts: &[TimedTranscript],
    ctx: Option<TtrContext<'_>>,
    lambda: f64,
) -> Result<LossBreakdown, SeparatorError> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> =
        estimates.iter().map(|e| g.constant(Matrix::from_vec(e.len(), 1, e.samples().to_vec()))).collect();
    let frozen = ctx.map(|c| {
        let mut s = c.summarizer.store().clone();
        s.set_frozen(true);
        s
    });
    let sum_params = frozen.as_ref().map(|s| s.bind(&mut g));
    let ctx = ctx.zip(sum_params.as_deref());
    Ok(total_loss_node(&mut g, &nodes, references, transcripts, ctx, lambda)?.1)
}

/// Separation quality and regularizer value for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScore {
    pub breakdown: LossBreakdown,
    /// Per reference, under the PIT pairing.
    pub si_sdri: Vec<f64>,
    pub sdri: Vec<f64>,
}

impl InstanceScore {
    pub fn mean_si_sdri(&self) -> f64 {
        self.si_sdri.iter().sum::<f64>() / self.si_sdri.len() as f64
    }

    pub fn mean_sdri(&self) -> f64 {
        self.sdri.iter().sum::<f64>() / self.sdri.len() as f64
    }
}

/// Scores already separated estimates of `inst`.
pub fn score_estimates(
    inst: &Instance,
    estimates: &[Waveform],
    ctx: Option<TtrContext<'_>>,
    lambda: f64,
) -> Result<InstanceScore, SeparatorError> {
    let m = &inst.mixture;
    let breakdown = total_loss(estimates, &m.sources, &m.transcripts, ctx, lambda)?;
    let mix = m.mixture.samples();
    let mut si_sdri = Vec::with_capacity(m.sources.len());
    let mut sdri = Vec::with_capacity(m.sources.len());
    for (k, &e) in breakdown.pit.permutation.iter().enumerate() {
        let (r, est) = (m.sources[k].samples(), estimates[e].samples());
        si_sdri.push(si_sdr_slices(r, est)? - si_sdr_slices(r, mix)?);
        sdri.push(sdr_slices(r, est)? - sdr_slices(r, mix)?);
    }
    Ok(InstanceScore { breakdown, si_sdri, sdri })
}

pub fn score_instance(sep: &Separator, inst: &Instance, ctx: Option<TtrContext<'_>>, lambda: f64) -> Result<InstanceScore, SeparatorError> {
    if inst.mixture.num_sources() != sep.num_sources() {
        return Err(SeparatorError::SourceCount { model: sep.num_sources(), data: inst.mixture.num_sources() });
    }
    let est = sep.separate(&inst.mixture.mixture)?;
    score_estimates(inst, &est, ctx, lambda)
}

/// Mean of the per-instance scores in index order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub total: f64,
    pub pit: f64,
    /// Mean over instances of `Σ_k L_TTR_k / K`; NaN when not evaluated.
    pub ttr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
}

pub fn score_split(sep: &Separator, instances: &[Instance], ctx: Option<TtrContext<'_>>, lambda: f64) -> Result<SplitScore, SeparatorError> {
    let scores: Vec<InstanceScore> =
        instances.par_iter().map(|i| score_instance(sep, i, ctx, lambda)).collect::<Result<_, _>>()?;
    let n = scores.len().max(1) as f64;
    let mean = |f: &dyn Fn(&InstanceScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let ttr = if scores.iter().all(|s| s.breakdown.ttr.is_empty()) {
        f64::NAN
    } else {
        mean(&|s| s.breakdown.ttr.iter().sum::<f64>() / s.breakdown.ttr.len() as f64)
    };
    Ok(SplitScore {
        total: mean(&|s| s.breakdown.total),
        pit: mean(&|s| s.breakdown.pit.loss),
        ttr,
        si_sdri: mean(&InstanceScore::mean_si_sdri),
        sdri: mean(&InstanceScore::mean_sdri),
    })
}

/// Objective and gradients for one instance. `store` holds the separator's
/// tensors, optionally followed by the summarizer's.
fn instance_step(
    template: &Separator,
    store: &ParamStore,
    inst: &Instance,
    ttr: Option<(TtrContext<'_>, &Summarizer)>,
    lambda: f64,
) -> Result<(f64, Vec<Matrix>), SeparatorError> {
    let mut g = Graph::new();
    let nodes = store.bind(&mut g);
    let n_sep = template.store.len();
    let m = &inst.mixture;
    let x = g.constant(Matrix::from_vec(m.mixture.len(), 1, m.mixture.samples().to_vec()));
    let est = template.separate_nodes(&mut g, &nodes[..n_sep], x, m.mixture.len())?;
    let ctx = ttr.map(|(c, _)| (c, &nodes[n_sep..]));
    let (loss, breakdown) = total_loss_node(&mut g, &est, &m.sources, &m.transcripts, ctx, lambda)?;
    let grads = g.backward(loss);
    Ok((breakdown.objective, store.collect_grads(&grads, &nodes)))
}

fn check_sources(sep: &Separator, data: &[Instance]) -> Result<(), TrainError> {
    match data.iter().find(|i| i.mixture.num_sources() != sep.num_sources()) {
        Some(i) => Err(TrainError::Step(
            SeparatorError::SourceCount { model: sep.num_sources(), data: i.mixture.num_sources() }.to_string(),
        )),
        None => Ok(()),
    }
}

/// PIT pretraining; validation loss is the mean PIT loss and each validation
/// record carries the mean SI-SDR improvement.
pub fn pretrain_separator(
    sep: &mut Separator,
    train: &[Instance],
    valid: &[Instance],
    cfg: &TrainConfig,
    seed: u64,
    log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_sources(sep, train)?;
    check_sources(sep, valid)?;
    let template = sep.clone();
    let mut store = sep.store.clone();
    let step_err = |e: SeparatorError| TrainError::Step(e.to_string());
    let outcome = fit(
        &mut store,
        cfg,
        seed,
        train.len(),
        |st, i| instance_step(&template, st, &train[i], None, 0.0).map_err(step_err),
        |st| {
            let s = Separator { store: st.clone(), ..template.clone() };
            let score = score_split(&s, valid, None, 0.0).map_err(step_err)?;
            Ok(ValidStats { loss: score.pit, si_sdri: Some(score.si_sdri) })
        },
        log,
    )?;
    store.set_module(PRETRAINED_MODULE);
    sep.store = store;
    Ok(outcome)
}

/// Finetunes `sep` on `L_PIT + λ·Σ L_TTR`. The summarizer's parameters are
/// written back into `summarizer`; with `freeze_summarizer` set they receive
/// no updates and come back unchanged.
pub fn finetune_ttr(
    sep: &mut Separator,
    summarizer: &mut Summarizer,
    encoders: &Encoders,
    lexicon: &Lexicon,
    train: &[Instance],
    valid: &[Instance],
    cfg: &FinetuneConfig,
    seed: u64,
    log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_sources(sep, train)?;
    check_sources(sep, valid)?;
    let template = sep.clone();
    let sum_template = summarizer.clone();
    let n_sep = template.store.len();
    let mut sum_store = summarizer.store().clone();
    sum_store.set_frozen(cfg.freeze_summarizer);
    let mut store = template.store.concat(&sum_store);
    let lambda = cfg.lambda;
    let step_err = |e: SeparatorError| TrainError::Step(e.to_string());
    let split = |st: &ParamStore| {
        let mut sep_store = st.clone();
        let sum_store = sep_store.split_off(n_sep, crate::summarizer::MODULE_NAME);
        let mut s = sum_template.clone();
        s.store_mut().load_values(&sum_store).expect("same table");
        (Separator { store: sep_store, ..template.clone() }, s)
    };
    let outcome = fit(
        &mut store,
        &cfg.optimizer,
        seed,
        train.len(),
        |st, i| {
            let (_, s) = split(st);
            let ctx = TtrContext { summarizer: &s, encoders, lexicon };
            instance_step(&template, st, &train[i], Some((ctx, &s)), lambda).map_err(step_err)
        },
        |st| {
            let (sp, s) = split(st);
            let ctx = TtrContext { summarizer: &s, encoders, lexicon };
            let score = score_split(&sp, valid, Some(ctx), lambda).map_err(step_err)?;
            Ok(ValidStats { loss: score.total, si_sdri: Some(score.si_sdri) })
        },
        log,
    )?;
    let (mut new_sep, new_sum) = split(&store);
    new_sep.store.set_module(finetuned_module_name(lambda));
    *sep = new_sep;
    summarizer.store_mut().load_values(new_sum.store()).expect("same table");
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, DatasetConfig};
    use crate::encoders::EncoderConfig;
    use crate::gradcheck::{central_difference, relative_error, GRAD_TOLERANCE};
    use crate::summarizer::SummarizerConfig;

    fn tiny() -> Separator {
        Separator::new(&SeparatorConfig { num_sources: 2, filters: 6, kernel: 16, stride: 8, channels: 5, blocks: 2, seed: 1 }).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        use rand::Rng;
        let mut rng = seeded_rng(seed, 3);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn output_shapes_and_silence() {
        let s = tiny();
        for len in [16, 17, 100, 333] {
            let out = s.separate(&noise(len, len as u64)).unwrap();
            assert_eq!(out.len(), 2);
            assert!(out.iter().all(|w| w.len() == len));
        }
        let zero = s.separate(&Waveform::silence(200, 8000).unwrap()).unwrap();
        assert!(zero.iter().all(|w| w.energy() == 0.0));
        assert!(matches!(s.separate(&noise(15, 0)), Err(SeparatorError::TooShort { .. })));
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let s = tiny();
        let x = noise(120, 4);
        let energy = |sep: &Separator| sep.separate(&x).unwrap().iter().map(Waveform::energy).sum::<f64>();
        let mut g = Graph::new();
        let nodes = s.store().bind(&mut g);
        let xs = g.constant(Matrix::from_vec(120, 1, x.samples().to_vec()));
        let outs = s.separate_nodes(&mut g, &nodes, xs, 120).unwrap();
        let sq: Vec<NodeId> = outs.iter().map(|&o| g.square(o)).collect();
        let all = g.concat_rows(&sq);
        let e = g.sum(all);
        assert!((g.scalar(e) - energy(&s)).abs() < 1e-12);
        let grads = s.store().collect_grads(&g.backward(e), &nodes);
        for (pi, p) in s.store().params().iter().enumerate() {
            let n = p.value.data().len();
            for j in [0, n / 3, n - 1] {
                let fd = central_difference(|d| {
                    let mut t = s.clone();
                    t.store_mut().get_mut(ParamId::from_index(pi)).data_mut()[j] += d;
                    energy(&t)
                });
                let a = grads[pi].data()[j];
                assert!(relative_error(a, fd) <= GRAD_TOLERANCE, "{} [{j}]: {a} vs {fd}", p.name);
            }
        }
    }

    struct Fixture {
        ds: crate::corpus::Dataset,
        enc: Encoders,
        sum: Summarizer,
    }

    fn fixture() -> Fixture {
        let cfg = DatasetConfig {
            seed: 5,
            sample_rate: 8000,
            num_subwords: 24,
            num_words: 40,
            words_per_utterance: [1, 2],
            num_sources: 2,
            train_count: 4,
            valid_count: 2,
            test_count: 1,
            noise: false,
            snr_db_range: [0.0, 0.0],
            source_gain_db_range: [-3.0, 0.0],
        };
        let ds = generate(&cfg).unwrap();
        let enc = Encoders::new(&EncoderConfig::default(), &ds.lexicon).unwrap();
        let sum = Summarizer::new(&SummarizerConfig { d_model: 8, n_heads: 2, d_ff: 8, sum_layers: 1, agg_layers: 1, seed: 2 }, 24, 32).unwrap();
        Fixture { ds, enc, sum }
    }

    #[test]
    fn lambda_zero_is_pit_and_decomposition_holds() {
        let f = fixture();
        let ctx = TtrContext { summarizer: &f.sum, encoders: &f.enc, lexicon: &f.ds.lexicon };
        let sep = tiny();
        for inst in &f.ds.train {
            let est = sep.separate(&inst.mixture.mixture).unwrap();
            let m = &inst.mixture;
            let zero = total_loss(&est, &m.sources, &m.transcripts, Some(ctx), 0.0).unwrap();
            assert_eq!(zero.total, zero.pit.loss);
            let half = total_loss(&est, &m.sources, &m.transcripts, Some(ctx), 0.5).unwrap();
            assert_eq!(half.pit, zero.pit);
            assert!((half.total - zero.total - 0.5 * half.ttr.iter().sum::<f64>()).abs() <= 1e-9);
            let perfect = total_loss(&m.sources, &m.sources, &m.transcripts, Some(ctx), 0.5).unwrap();
            assert_eq!(perfect.pit.loss, -2.0 * crate::signal::SI_SDR_CAP_DB);
        }
    }

    #[test]
    fn regularizer_changes_separator_gradient() {
        let f = fixture();
        let ctx = TtrContext { summarizer: &f.sum, encoders: &f.enc, lexicon: &f.ds.lexicon };
        let sep = tiny();
        let mut frozen_sum = f.sum.store().clone();
        frozen_sum.set_frozen(true);
        let store = sep.store().concat(&frozen_sum);
        let inst = &f.ds.train[0];
        let (_, g0) = instance_step(&sep, &store, inst, Some((ctx, &f.sum)), 0.0).unwrap();
        let (_, g5) = instance_step(&sep, &store, inst, Some((ctx, &f.sum)), 0.5).unwrap();
        let n_sep = sep.store().len();
        assert!(g0[..n_sep].iter().zip(&g5[..n_sep]).any(|(a, b)| a != b));
        assert!(g5[n_sep..].iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }
}
