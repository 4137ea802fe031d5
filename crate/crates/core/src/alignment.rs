//! Subword-level alignment of embedding frames to tokens.
//!
//! Word intervals are split evenly into their subword pieces, the piece ends
//! form the boundary vector `β`, and each frame whose centre `(t + 0.5) / R`
//! lies in `[β_{m−1}, β_m)` and inside the parent word goes to subword `m`.
//! A piece that captures no frame gets the frame nearest to its midpoint,
//! and a forward then backward sweep restores ordering if that frame was
//! already taken.

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{SubwordSequence, TimedTranscript};

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("transcript has {words} words but {counts} subword counts were given")]
    CountMismatch { words: usize, counts: usize },
    #[error("word {0} has zero subwords")]
    ZeroCount(usize),
    #[error("no subwords to align")]
    Empty,
    #[error("subword intervals are not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("frame rate must be positive, got {0}")]
    FrameRate(f64),
    #[error("{frames} frames cannot hold {subwords} nonempty segments")]
    TooFewFrames { frames: usize, subwords: usize },
    #[error("{0} parent intervals for {1} subwords")]
    ParentMismatch(usize, usize),
}

/// One evenly divided piece of a word, in absolute seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubwordInterval {
    pub start: f64,
    pub length: f64,
    /// Index of the parent word.
    pub word: usize,
}

impl SubwordInterval {
    pub fn end(&self) -> f64 {
        self.start + self.length
    }
}

pub fn subword_lengths(transcript: &TimedTranscript, counts: &[usize]) -> Result<Vec<SubwordInterval>, AlignmentError> {
    if counts.len() != transcript.len() {
        return Err(AlignmentError::CountMismatch { words: transcript.len(), counts: counts.len() });
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (l, (w, &m)) in transcript.words.iter().zip(counts).enumerate() {
        if m == 0 {
            return Err(AlignmentError::ZeroCount(l));
        }
        let length = (w.end - w.start) / m as f64;
        out.extend((0..m).map(|i| SubwordInterval { start: w.start + i as f64 * length, length, word: l }));
    }
    Ok(out)
}

/// `β_0` is the first piece's start, `β_m` the end of piece `m`.
pub fn subword_boundaries(intervals: &[SubwordInterval]) -> Result<Vec<f64>, AlignmentError> {
    let first = intervals.first().ok_or(AlignmentError::Empty)?;
    let mut beta = Vec::with_capacity(intervals.len() + 1);
    beta.push(first.start);
    for (m, iv) in intervals.iter().enumerate() {
        let prev = beta[m];
        // pieces may start after the previous end (silence), never before
        if !(iv.length > 0.0) || iv.start < prev - 1e-12 * prev.abs().max(1.0) || !(iv.end() > prev) {
            return Err(AlignmentError::NonMonotonic(m));
        }
        beta.push(iv.end());
    }
    Ok(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub subword: usize,
    pub frame_start: usize,
    pub frame_end: usize,
    /// The range differs from what the boundary rule alone gives, because
    /// this segment or a neighbour needed the nearest-frame fallback.
    pub adjusted: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.frame_end - self.frame_start
    }

    pub fn is_empty(&self) -> bool {
        self.frame_end == self.frame_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub segments: Vec<Segment>,
    pub frame_rate: f64,
    pub total_frames: usize,
}

impl AlignmentMap {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment index owning frame `t`, if any.
    pub fn owner(&self, t: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.frame_start <= t && t < s.frame_end)
    }

    /// One tab-separated line `m token_id frame_start frame_end` per segment.
    pub fn to_records(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let tok = tokens.get(s.subword).map_or_else(|| "-".to_string(), |t| t.to_string());
            writeln!(out, "{}\t{}\t{}\t{}", s.subword, tok, s.frame_start, s.frame_end).unwrap();
        }
        out
    }
}

fn center(t: usize, rate: f64) -> f64 {
    (t as f64 + 0.5) / rate
}

/// First frame whose centre is at or after `time`, clamped to `[0, total]`.
fn first_frame_at(time: f64, rate: f64, total: usize) -> usize {
    let mut t = ((time * rate - 0.5).ceil().max(0.0) as usize).min(total);
    while t > 0 && center(t - 1, rate) >= time {
        t -= 1;
    }
    while t < total && center(t, rate) < time {
        t += 1;
    }
    t
}

/// `parents[m]` is the `(start, end)` interval of the word containing piece
/// `m`; frames outside every parent stay unassigned unless a fallback needs
/// them.
pub fn assign_frames(
    beta: &[f64],
    parents: &[(f64, f64)],
    total_frames: usize,
    frame_rate: f64,
) -> Result<AlignmentMap, AlignmentError> {
    if beta.len() < 2 {
        return Err(AlignmentError::Empty);
    }
    let m_count = beta.len() - 1;
    if parents.len() != m_count {
        return Err(AlignmentError::ParentMismatch(parents.len(), m_count));
    }
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(AlignmentError::FrameRate(frame_rate));
    }
    if total_frames < m_count {
        return Err(AlignmentError::TooFewFrames { frames: total_frames, subwords: m_count });
    }
    if let Some(m) = (0..m_count).find(|&m| !(beta[m + 1] > beta[m])) {
        return Err(AlignmentError::NonMonotonic(m));
    }

    let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(m_count);
    let mut fallback = vec![false; m_count];
    for m in 0..m_count {
        let (ws, we) = parents[m];
        let lo = beta[m].max(ws);
        let hi = beta[m + 1].min(we);
        let s = first_frame_at(lo, frame_rate, total_frames);
        let e = first_frame_at(hi, frame_rate, total_frames).max(s);
        if s < e {
            ranges.push((s, e));
        } else {
            let mid = 0.5 * (lo + hi);
            let f = (0..total_frames)
                .min_by(|&a, &b| (center(a, frame_rate) - mid).abs().total_cmp(&(center(b, frame_rate) - mid).abs()))
                .unwrap();
            ranges.push((f, f + 1));
            fallback[m] = true;
        }
    }
    let raw = ranges.clone();

    // forward: resolve overlaps by trimming a wide predecessor or pushing
    for m in 1..m_count {
        let (ps, pe) = ranges[m - 1];
        let (s, e) = ranges[m];
        if s < pe {
            if s > ps && !fallback[m - 1] {
                ranges[m - 1].1 = s;
            } else {
                ranges[m].0 = pe;
                ranges[m].1 = e.max(pe + 1);
            }
        }
    }
    // backward: pull anything pushed past the end back inside
    let mut limit = total_frames;
    for r in ranges.iter_mut().rev() {
        r.1 = r.1.min(limit);
        if r.0 >= r.1 {
            r.0 = r.1 - 1;
        }
        limit = r.0;
    }

    let segments = ranges
        .iter()
        .zip(&raw)
        .enumerate()
        .map(|(m, (&(s, e), &r))| Segment { subword: m, frame_start: s, frame_end: e, adjusted: fallback[m] || (s, e) != r })
        .collect();
    Ok(AlignmentMap { segments, frame_rate, total_frames })
}

/// Full pipeline from a timed transcript and its tokenization.
pub fn align(
    transcript: &TimedTranscript,
    tokens: &SubwordSequence,
    total_frames: usize,
    frame_rate: f64,
) -> Result<AlignmentMap, AlignmentError> {
    let intervals = subword_lengths(transcript, &tokens.per_word_counts)?;
    let beta = subword_boundaries(&intervals)?;
    let parents: Vec<(f64, f64)> = intervals.iter().map(|iv| (transcript.words[iv.word].start, transcript.words[iv.word].end)).collect();
    assign_frames(&beta, &parents, total_frames, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TimedWord;

    fn transcript(spans: &[(f64, f64)]) -> TimedTranscript {
        TimedTranscript {
            words: spans.iter().enumerate().map(|(i, &(start, end))| TimedWord { text: format!("w{i}"), start, end }).collect(),
        }
    }

    fn ranges(map: &AlignmentMap) -> Vec<(usize, usize)> {
        map.segments.iter().map(|s| (s.frame_start, s.frame_end)).collect()
    }

    #[test]
    fn even_subdivision() {
        let iv = subword_lengths(&transcript(&[(0.0, 0.4), (0.5, 1.1)]), &[2, 1]).unwrap();
        for (i, (a, (s, e))) in iv.iter().zip([(0.0, 0.2), (0.2, 0.4), (0.5, 1.1)]).enumerate() {
            assert!((a.start - s).abs() < 1e-12 && (a.end() - e).abs() < 1e-12, "piece {i}");
        }
        let one = subword_lengths(&transcript(&[(0.3, 0.9)]), &[1]).unwrap();
        assert_eq!(one[0].start, 0.3);
        assert!((one[0].end() - 0.9).abs() < 1e-12);
        assert_eq!(
            subword_lengths(&transcript(&[(0.0, 0.4)]), &[1, 1]),
            Err(AlignmentError::CountMismatch { words: 1, counts: 2 })
        );
    }

    #[test]
    fn boundaries() {
        let mk = |s: f64, l: f64| SubwordInterval { start: s, length: l, word: 0 };
        assert_eq!(subword_boundaries(&[mk(0.0, 0.2), mk(0.2, 0.2), mk(0.4, 0.6)]).unwrap(), vec![0.0, 0.2, 0.4, 1.0]);
        assert_eq!(subword_boundaries(&[mk(0.5, 0.6)]).unwrap(), vec![0.5, 1.1]);
        assert_eq!(subword_boundaries(&[mk(0.5, 0.2), mk(0.3, 0.1)]), Err(AlignmentError::NonMonotonic(1)));
        assert_eq!(subword_boundaries(&[]), Err(AlignmentError::Empty));
    }

    #[test]
    fn gap_shifts_later_boundaries() {
        let counts = [2, 1];
        let tight = subword_boundaries(&subword_lengths(&transcript(&[(0.0, 0.4), (0.4, 0.7)]), &counts).unwrap()).unwrap();
        let gapped = subword_boundaries(&subword_lengths(&transcript(&[(0.0, 0.4), (0.5, 0.8)]), &counts).unwrap()).unwrap();
        assert_eq!(&tight[..3], &gapped[..3]);
        assert!((gapped[3] - tight[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn assignment_examples() {
        let map = assign_frames(&[0.0, 0.2, 0.4], &[(0.0, 0.4), (0.0, 0.4)], 20, 50.0).unwrap();
        assert_eq!(ranges(&map), vec![(0, 10), (10, 20)]);
        let one = assign_frames(&[0.0, 0.02], &[(0.0, 0.02)], 1, 50.0).unwrap();
        assert_eq!(ranges(&one), vec![(0, 1)]);
        // 5 ms piece between frame centres 0.11 and 0.13: nearest is frame 5
        let short = assign_frames(&[0.112, 0.117], &[(0.112, 0.117)], 20, 50.0).unwrap();
        assert_eq!(ranges(&short), vec![(5, 6)]);
        assert!(short.segments[0].adjusted);
    }

    #[test]
    fn boundary_frame_goes_to_later_segment() {
        // centre of frame 2 is exactly 0.05 at R = 50
        let map = assign_frames(&[0.0, 0.05, 0.2], &[(0.0, 0.2), (0.0, 0.2)], 10, 50.0).unwrap();
        assert_eq!(ranges(&map), vec![(0, 2), (2, 10)]);
    }

    #[test]
    fn silence_frames_stay_unassigned() {
        let t = transcript(&[(0.0, 0.2), (0.4, 0.6)]);
        let seq = SubwordSequence { tokens: vec![0, 1], word_index: vec![0, 1], per_word_counts: vec![1, 1] };
        let map = align(&t, &seq, 40, 50.0).unwrap();
        assert_eq!(ranges(&map), vec![(0, 10), (20, 30)]);
        assert_eq!(map.owner(15), None);
        assert_eq!(map.to_records(&seq.tokens), "0\t0\t0\t10\n1\t1\t20\t30\n");
    }

    #[test]
    fn crowded_fallbacks_stay_ordered() {
        // three tiny pieces all nearest to the same frame
        let beta = [0.100, 0.101, 0.102, 0.103];
        let parents = [(0.100, 0.103); 3];
        let map = assign_frames(&beta, &parents, 10, 50.0).unwrap();
        assert_eq!(ranges(&map), vec![(5, 6), (6, 7), (7, 8)]);
        let tail = assign_frames(&[0.195, 0.196, 0.197], &[(0.195, 0.197); 2], 10, 50.0).unwrap();
        assert_eq!(ranges(&tail), vec![(8, 9), (9, 10)]);
        assert_eq!(
            assign_frames(&[0.0, 0.1, 0.2], &[(0.0, 0.2); 2], 1, 50.0),
            Err(AlignmentError::TooFewFrames { frames: 1, subwords: 2 })
        );
    }
}
