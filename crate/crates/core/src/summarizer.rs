//! Segment summarizer and sentence aggregator transformers, and the
//! timed-text loss.
//!
//! Both transformers are stacks of pre-norm encoder blocks
//! (`x ← x + Attn(LN(x))`, `x ← x + FFN(LN(x))`) followed by a final layer
//! norm and an output projection to the text embedding width. There are no
//! positional encodings. The summarizer runs attention only inside each
//! aligned segment and mean-pools the segment's outputs into one vector; the
//! aggregator then attends across all per-subword vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align, AlignmentError, AlignmentMap};
use crate::autodiff::{Graph, NodeId};
use crate::corpus::{CorpusError, Utterance};
use crate::encoders::{EmbeddingMatrix, EncoderError, Encoders};
use crate::optim::{fit, EpochRecord, TrainConfig, TrainError, TrainOutcome, ValidStats};
use crate::params::{seeded_rng, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const COSINE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
pub const MODULE_NAME: &str = "summarizer";

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("invalid summarizer config: {0}")]
    Config(String),
    #[error("expected embedding dimension {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0} audio vectors but {1} text vectors")]
    CountMismatch(usize, usize),
    #[error("alignment covers {align} frames but the embedding has {frames}")]
    FrameMismatch { align: usize, frames: usize },
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sum_layers: usize,
    pub agg_layers: usize,
    pub seed: u64,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        SummarizerConfig { d_model: 32, n_heads: 4, d_ff: 64, sum_layers: 2, agg_layers: 2, seed: 11 }
    }
}

impl SummarizerConfig {
    pub fn validate(&self) -> Result<(), SummarizerError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(SummarizerError::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SummarizerError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Stack {
    d_in: usize,
    input: Option<(ParamId, ParamId)>,
    layers: Vec<Layer>,
    ln_f: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

/// Which of the two transformers to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Summarize,
    Aggregate,
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    config: SummarizerConfig,
    d_audio: usize,
    d_text: usize,
    store: ParamStore,
    sum: Stack,
    agg: Stack,
}

fn build_stack(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    layers: usize,
    cfg: &SummarizerConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Stack {
    let d = cfg.d_model;
    let mut linear = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
        let w = store.add_uniform(format!("{prefix}.{name}.w"), i, o, i, rng);
        let b = store.add_uniform(format!("{prefix}.{name}.b"), 1, o, i, rng);
        (w, b)
    };
    let norm = |store: &mut ParamStore, name: &str| {
        let g = store.add(format!("{prefix}.{name}.gamma"), Matrix::from_fn(1, d, |_, _| 1.0));
        let b = store.add(format!("{prefix}.{name}.beta"), Matrix::zeros(1, d));
        (g, b)
    };
    let input = (d_in != d || prefix == "sum").then(|| linear(store, "in", d_in, d));
    let layers = (0..layers)
        .map(|l| Layer {
            ln1: norm(store, &format!("l{l}.ln1")),
            q: linear(store, &format!("l{l}.q"), d, d),
            k: linear(store, &format!("l{l}.k"), d, d),
            v: linear(store, &format!("l{l}.v"), d, d),
            o: linear(store, &format!("l{l}.o"), d, d),
            ln2: norm(store, &format!("l{l}.ln2")),
            ff1: linear(store, &format!("l{l}.ff1"), d, cfg.d_ff),
            ff2: linear(store, &format!("l{l}.ff2"), cfg.d_ff, d),
        })
        .collect();
    let ln_f = norm(store, "ln_f");
    let out = linear(store, "out", d, d_out);
    Stack { d_in, input, layers, ln_f, out }
}

/// Parameter nodes of a summarizer bound into one graph.
pub struct Bound(Vec<NodeId>);

impl Bound {
    /// Wraps nodes produced by binding this summarizer's store, possibly as
    /// part of a larger store.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Bound(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    fn at(&self, id: ParamId) -> NodeId {
        self.0[id.index()]
    }
}

impl Summarizer {
    pub fn new(config: &SummarizerConfig, d_audio: usize, d_text: usize) -> Result<Self, SummarizerError> {
        config.validate()?;
        if d_audio == 0 || d_text == 0 {
            return Err(SummarizerError::Config("embedding dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(config.seed, 0x5);
        let mut store = ParamStore::new(MODULE_NAME);
        let sum = build_stack(&mut store, "sum", d_audio, d_text, config.sum_layers, config, &mut rng);
        let agg = build_stack(&mut store, "agg", d_text, d_text, config.agg_layers, config, &mut rng);
        Ok(Summarizer { config: config.clone(), d_audio, d_text, store, sum, agg })
    }

    pub fn config(&self) -> &SummarizerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_audio(&self) -> usize {
        self.d_audio
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.store.bind(g))
    }

    fn linear(g: &mut Graph, b: &Bound, x: NodeId, (w, bias): (ParamId, ParamId)) -> NodeId {
        let y = g.matmul(x, b.at(w));
        g.add_row(y, b.at(bias))
    }

    /// Runs a stack over `x` (`rows × d_in`); attention is restricted to each
    /// `(start, len)` row group.
    fn stack_node(&self, g: &mut Graph, b: &Bound, stack: &Stack, x: NodeId, groups: &[(usize, usize)]) -> NodeId {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = match stack.input {
            Some(p) => Self::linear(g, b, x, p),
            None => x,
        };
        for layer in &stack.layers {
            let h = g.layer_norm(x, b.at(layer.ln1.0), b.at(layer.ln1.1), LN_EPS);
            let q = Self::linear(g, b, h, layer.q);
            let k = Self::linear(g, b, h, layer.k);
            let v = Self::linear(g, b, h, layer.v);
            let mut group_out = Vec::with_capacity(groups.len());
            for &(start, len) in groups {
                let (qg, kg, vg) = if groups.len() == 1 {
                    (q, k, v)
                } else {
                    (g.slice_rows(q, start, len), g.slice_rows(k, start, len), g.slice_rows(v, start, len))
                };
                let mut head_out = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let (qh, kh, vh) = if heads == 1 {
                        (qg, kg, vg)
                    } else {
                        (g.slice_cols(qg, hd * dh, dh), g.slice_cols(kg, hd * dh, dh), g.slice_cols(vg, hd * dh, dh))
                    };
                    let s = g.matmul_t(qh, false, kh, true);
                    let s = g.scale(s, scale);
                    let a = g.softmax(s);
                    head_out.push(g.matmul(a, vh));
                }
                group_out.push(if heads == 1 { head_out[0] } else { g.concat_cols(&head_out) });
            }
            let ctx = if group_out.len() == 1 { group_out[0] } else { g.concat_rows(&group_out) };
            let o = Self::linear(g, b, ctx, layer.o);
            x = g.add(x, o);
            let h = g.layer_norm(x, b.at(layer.ln2.0), b.at(layer.ln2.1), LN_EPS);
            let f = Self::linear(g, b, h, layer.ff1);
            let f = g.gelu(f);
            let f = Self::linear(g, b, f, layer.ff2);
            x = g.add(x, f);
        }
        let x = g.layer_norm(x, b.at(stack.ln_f.0), b.at(stack.ln_f.1), LN_EPS);
        Self::linear(g, b, x, stack.out)
    }

    /// One summary row per segment of `align`: `s` is `T × D_S`, the result
    /// `M × D_W`.
    pub fn summarize_node(&self, g: &mut Graph, b: &Bound, s: NodeId, align: &AlignmentMap) -> Result<NodeId, SummarizerError> {
        let (frames, dim) = g.value(s).shape();
        if dim != self.d_audio {
            return Err(SummarizerError::DimMismatch { expected: self.d_audio, got: dim });
        }
        if align.total_frames != frames {
            return Err(SummarizerError::FrameMismatch { align: align.total_frames, frames });
        }
        let mut parts = Vec::with_capacity(align.len());
        let mut groups = Vec::with_capacity(align.len());
        let mut row = 0;
        for (m, seg) in align.segments.iter().enumerate() {
            if seg.is_empty() || seg.frame_end > frames {
                return Err(SummarizerError::EmptySegment(m));
            }
            parts.push(g.slice_rows(s, seg.frame_start, seg.len()));
            groups.push((row, seg.len()));
            row += seg.len();
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let y = self.stack_node(g, b, &self.sum, x, &groups);
        let pooled: Vec<NodeId> = groups
            .iter()
            .map(|&(start, len)| {
                let part = g.slice_rows(y, start, len);
                g.mean_rows(part)
            })
            .collect();
        Ok(if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) })
    }

    /// `M × D_W` to `M × D_W` with attention across all rows.
    pub fn aggregate_node(&self, g: &mut Graph, b: &Bound, s_prime: NodeId) -> Result<NodeId, SummarizerError> {
        let (m, dim) = g.value(s_prime).shape();
        if dim != self.d_text {
            return Err(SummarizerError::DimMismatch { expected: self.d_text, got: dim });
        }
        Ok(self.stack_node(g, b, &self.agg, s_prime, &[(0, m)]))
    }

    /// Summarize then aggregate; the result has one row per subword.
    pub fn embed_node(&self, g: &mut Graph, b: &Bound, s: NodeId, align: &AlignmentMap) -> Result<NodeId, SummarizerError> {
        let sp = self.summarize_node(g, b, s, align)?;
        self.aggregate_node(g, b, sp)
    }

    /// Timed-text loss node against text embeddings given as `M × D_W` rows.
    pub fn ttr_node(
        &self,
        g: &mut Graph,
        b: &Bound,
        s: NodeId,
        align: &AlignmentMap,
        text_rows: &Matrix,
    ) -> Result<NodeId, SummarizerError> {
        if text_rows.rows() != align.len() {
            return Err(SummarizerError::CountMismatch(align.len(), text_rows.rows()));
        }
        let bar = self.embed_node(g, b, s, align)?;
        let w = g.constant(text_rows.clone());
        Ok(g.cosine_distance_mean(bar, w, COSINE_EPS))
    }

    /// One stack over all rows of `x` jointly.
    pub fn transformer_node(&self, g: &mut Graph, b: &Bound, stage: Stage, x: NodeId) -> Result<NodeId, SummarizerError> {
        let stack = match stage {
            Stage::Summarize => &self.sum,
            Stage::Aggregate => &self.agg,
        };
        let (n, dim) = g.value(x).shape();
        if dim != stack.d_in {
            return Err(SummarizerError::DimMismatch { expected: stack.d_in, got: dim });
        }
        Ok(self.stack_node(g, b, stack, x, &[(0, n)]))
    }

    fn run(&self, input: &EmbeddingMatrix, f: impl FnOnce(&Self, &mut Graph, &Bound, NodeId) -> Result<NodeId, SummarizerError>) -> Result<EmbeddingMatrix, SummarizerError> {
        let mut g = Graph::new();
        let mut frozen = self.clone();
        frozen.store.set_frozen(true);
        let b = frozen.bind(&mut g);
        let x = g.constant(input.to_rows());
        let y = f(&frozen, &mut g, &b, x)?;
        Ok(EmbeddingMatrix::from_rows(g.value(y), None))
    }

    /// A single transformer applied to all columns of `input` jointly.
    pub fn transformer_forward(&self, stage: Stage, input: &EmbeddingMatrix) -> Result<EmbeddingMatrix, SummarizerError> {
        self.run(input, |s, g, b, x| s.transformer_node(g, b, stage, x))
    }

    pub fn summarize(&self, s: &EmbeddingMatrix, align: &AlignmentMap) -> Result<EmbeddingMatrix, SummarizerError> {
        self.run(s, |m, g, b, x| m.summarize_node(g, b, x, align))
    }

    pub fn aggregate(&self, s_prime: &EmbeddingMatrix) -> Result<EmbeddingMatrix, SummarizerError> {
        self.run(s_prime, |m, g, b, x| m.aggregate_node(g, b, x))
    }

    pub fn embed(&self, s: &EmbeddingMatrix, align: &AlignmentMap) -> Result<EmbeddingMatrix, SummarizerError> {
        self.run(s, |m, g, b, x| m.embed_node(g, b, x, align))
    }
}

/// Mean over columns of `1 − cos(S̄_m, W_m)`, with `COSINE_EPS` added to each
/// norm product.
pub fn ttr_loss(s_bar: &EmbeddingMatrix, w: &EmbeddingMatrix) -> Result<f64, SummarizerError> {
    if s_bar.dim() != w.dim() {
        return Err(SummarizerError::DimMismatch { expected: w.dim(), got: s_bar.dim() });
    }
    if s_bar.count() != w.count() {
        return Err(SummarizerError::CountMismatch(s_bar.count(), w.count()));
    }
    let mut g = Graph::new();
    let a = g.constant(s_bar.to_rows());
    let b = g.constant(w.to_rows());
    let d = g.cosine_distance_mean(a, b, COSINE_EPS);
    Ok(g.scalar(d))
}

/// A clean utterance reduced to what the timed-text loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TtrExample {
    /// `T × D_S` audio embedding rows.
    pub audio: Matrix,
    pub align: AlignmentMap,
    /// `M × D_W` text embedding rows.
    pub text: Matrix,
}

impl TtrExample {
    pub fn from_utterance(utt: &Utterance, encoders: &Encoders) -> Result<Self, SummarizerError> {
        let audio = encoders.audio.encode(&utt.wave)?;
        let text = encoders.text.encode(&utt.tokens.tokens)?;
        let align = align(&utt.transcript, &utt.tokens, audio.count(), encoders.audio.config().frame_rate)?;
        Ok(TtrExample { audio: audio.to_rows(), align, text: text.to_rows() })
    }

    /// Loss and gradients with respect to every summarizer parameter.
    pub fn loss_and_grads(&self, summarizer: &Summarizer) -> Result<(f64, Vec<Matrix>), SummarizerError> {
        let mut g = Graph::new();
        let b = summarizer.bind(&mut g);
        let s = g.constant(self.audio.clone());
        let loss = summarizer.ttr_node(&mut g, &b, s, &self.align, &self.text)?;
        let grads = g.backward(loss);
        Ok((g.scalar(loss), summarizer.store.collect_grads(&grads, b.nodes())))
    }

    pub fn loss(&self, summarizer: &Summarizer) -> Result<f64, SummarizerError> {
        let mut g = Graph::new();
        let mut frozen = summarizer.clone();
        frozen.store.set_frozen(true);
        let b = frozen.bind(&mut g);
        let s = g.constant(self.audio.clone());
        let loss = frozen.ttr_node(&mut g, &b, s, &self.align, &self.text)?;
        Ok(g.scalar(loss))
    }
}

pub fn mean_ttr_loss(summarizer: &Summarizer, examples: &[TtrExample]) -> Result<f64, SummarizerError> {
    use rayon::prelude::*;
    let losses: Vec<f64> = examples.par_iter().map(|e| e.loss(summarizer)).collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Minimizes the mean timed-text loss on `train`, keeping the parameters
/// with the best mean loss on `valid`.
pub fn pretrain_summarizer(
    summarizer: &mut Summarizer,
    train: &[TtrExample],
    valid: &[TtrExample],
    cfg: &TrainConfig,
    seed: u64,
    log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let template = summarizer.clone();
    let with_store = |store: &ParamStore| {
        let mut s = template.clone();
        s.store = store.clone();
        s
    };
    let mut store = summarizer.store.clone();
    let outcome = fit(
        &mut store,
        cfg,
        seed,
        train.len(),
        |st, i| {
            let s = Summarizer { store: st.clone(), ..template.clone() };
            train[i].loss_and_grads(&s).map_err(|e| TrainError::Step(e.to_string()))
        },
        |st| {
            let loss = mean_ttr_loss(&with_store(st), valid).map_err(|e| TrainError::Step(e.to_string()))?;
            Ok(ValidStats { loss, si_sdri: None })
        },
        log,
    )?;
    summarizer.store = store;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{assign_frames, Segment};
    use crate::gradcheck::{central_difference, relative_error, GRAD_TOLERANCE};

    fn small() -> Summarizer {
        let cfg = SummarizerConfig { d_model: 8, n_heads: 2, d_ff: 12, sum_layers: 2, agg_layers: 2, seed: 5 };
        Summarizer::new(&cfg, 6, 5).unwrap()
    }

    fn input(dim: usize, n: usize, seed: u64) -> EmbeddingMatrix {
        use rand::Rng;
        let mut rng = seeded_rng(seed, 1);
        EmbeddingMatrix { values: Matrix::from_fn(dim, n, |_, _| rng.random_range(-1.0..1.0)), frame_rate: None }
    }

    fn map(ranges: &[(usize, usize)], total: usize) -> AlignmentMap {
        AlignmentMap {
            segments: ranges
                .iter()
                .enumerate()
                .map(|(m, &(s, e))| Segment { subword: m, frame_start: s, frame_end: e, adjusted: false })
                .collect(),
            frame_rate: 50.0,
            total_frames: total,
        }
    }

    fn permute_cols(e: &EmbeddingMatrix, perm: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix { values: Matrix::from_fn(e.dim(), perm.len(), |d, n| e.values.get(d, perm[n])), frame_rate: e.frame_rate }
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn shapes() {
        let s = small();
        let one = s.transformer_forward(Stage::Summarize, &input(6, 1, 1)).unwrap();
        assert_eq!((one.dim(), one.count()), (5, 1));
        let x = input(6, 12, 2);
        let sp = s.summarize(&x, &map(&[(0, 3), (3, 7), (9, 12)], 12)).unwrap();
        assert_eq!((sp.dim(), sp.count()), (5, 3));
        assert_eq!(s.aggregate(&sp).unwrap().count(), 3);
        let whole = s.summarize(&x, &map(&[(0, 12)], 12)).unwrap();
        let full = s.transformer_forward(Stage::Summarize, &x).unwrap();
        for d in 0..5 {
            let mean = (0..12).map(|n| full.values.get(d, n)).sum::<f64>() / 12.0;
            assert!((whole.values.get(d, 0) - mean).abs() < 1e-12);
        }
        assert!(matches!(s.transformer_forward(Stage::Aggregate, &x), Err(SummarizerError::DimMismatch { .. })));
    }

    #[test]
    fn column_permutation_equivariance() {
        let s = small();
        let perm = [3, 0, 4, 1, 2];
        for (stage, dim) in [(Stage::Summarize, 6), (Stage::Aggregate, 5)] {
            let x = input(dim, 5, 3);
            let a = permute_cols(&s.transformer_forward(stage, &x).unwrap(), &perm);
            let b = s.transformer_forward(stage, &permute_cols(&x, &perm)).unwrap();
            assert!(max_diff(&a.values, &b.values) < 1e-9);
        }
    }

    #[test]
    fn within_segment_shuffle_and_duplication_invariance() {
        let s = small();
        let x = input(6, 10, 4);
        let base = s.embed(&x, &map(&[(0, 4), (4, 10)], 10)).unwrap();
        let shuffled = permute_cols(&x, &[2, 0, 3, 1, 9, 5, 4, 8, 6, 7]);
        let b = s.embed(&shuffled, &map(&[(0, 4), (4, 10)], 10)).unwrap();
        assert!(max_diff(&base.values, &b.values) < 1e-9);
        let dup = permute_cols(&x, &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9]);
        let c = s.embed(&dup, &map(&[(0, 8), (8, 20)], 20)).unwrap();
        assert!(max_diff(&base.values, &c.values) < 1e-9);
    }

    #[test]
    fn aggregator_mixes_context() {
        let s = small();
        let x = input(5, 4, 6);
        let a = s.aggregate(&x).unwrap();
        let mut y = x.clone();
        y.values.set(2, 3, y.values.get(2, 3) + 0.5);
        let b = s.aggregate(&y).unwrap();
        for col in 0..3 {
            assert!((0..5).any(|d| (a.values.get(d, col) - b.values.get(d, col)).abs() > 1e-6));
        }
    }

    #[test]
    fn ttr_loss_values() {
        let w = input(5, 4, 7);
        assert!(ttr_loss(&w, &w).unwrap().abs() < 1e-12);
        let neg = EmbeddingMatrix { values: Matrix::from_fn(5, 4, |d, n| -w.values.get(d, n)), frame_rate: None };
        assert!((ttr_loss(&neg, &w).unwrap() - 2.0).abs() < 1e-12);
        let x = input(5, 4, 8);
        let scaled = EmbeddingMatrix { values: Matrix::from_fn(5, 4, |d, n| x.values.get(d, n) * (n as f64 + 0.5) * 3.0), frame_rate: None };
        assert!((ttr_loss(&x, &w).unwrap() - ttr_loss(&scaled, &w).unwrap()).abs() < 1e-9);
        assert!(matches!(ttr_loss(&x, &input(5, 3, 1)), Err(SummarizerError::CountMismatch(4, 3))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let s = small();
        let beta = [0.0, 0.1, 0.16, 0.3];
        let align = assign_frames(&beta, &[(0.0, 0.16), (0.0, 0.16), (0.16, 0.3)], 15, 50.0).unwrap();
        let ex = TtrExample { audio: input(6, 15, 9).to_rows(), align, text: input(5, 3, 10).to_rows() };
        let (_, grads) = ex.loss_and_grads(&s).unwrap();
        let mut checked = 0;
        for (pi, p) in s.store().params().iter().enumerate() {
            let n = p.value.data().len();
            for j in [0, n / 2, n - 1] {
                let fd = central_difference(|delta| {
                    let mut t = s.clone();
                    t.store_mut().get_mut(ParamId::from_index(pi)).data_mut()[j] += delta;
                    ex.loss(&t).unwrap()
                });
                let a = grads[pi].data()[j];
                assert!(relative_error(a, fd) <= GRAD_TOLERANCE, "{} [{j}]: analytic {a} fd {fd}", p.name);
                checked += 1;
            }
        }
        assert!(checked >= 50);
    }
}
