//! Pair-wise normalization, time-domain windowing and the sinusoidal
//! diversity embedding used by the attention networks.

use std::sync::Arc;

use crate::csi_sim::{CaseId, CsiDataset, Segment};
use crate::error::{BtsError, Result};

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_DIVERSITY: f64 = 10_000.0;

/// Normalized amplitudes, row-major `(T, S, K)`, every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub packets: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    /// Number of `(t, k)` slices that were constant and mapped to zeros.
    pub degenerate_slices: usize,
}

/// Min-max normalize every `(t, k)` slice across its `S` subcarriers.
///
/// Constant slices become all zeros and are counted in `degenerate_slices`.
pub fn pairwise_normalize<T: Copy + Into<f64>>(
    amplitudes: &[T],
    (packets, subcarriers, pairs): (usize, usize, usize),
) -> Result<Normalized> {
    if packets == 0 || subcarriers == 0 || pairs == 0 {
        return Err(BtsError::Empty("pairwise_normalize needs T, S, K >= 1"));
    }
    let expected = packets * subcarriers * pairs;
    if amplitudes.len() != expected {
        return Err(BtsError::Shape {
            op: "pairwise_normalize",
            expected: vec![packets, subcarriers, pairs],
            actual: vec![amplitudes.len()],
        });
    }
    let mut values: Vec<f64> = amplitudes.iter().map(|&v| v.into()).collect();
    let mut degenerate = 0;
    let mut lo = vec![0.0; pairs];
    let mut hi = vec![0.0; pairs];
    for packet in values.chunks_exact_mut(subcarriers * pairs) {
        lo.fill(f64::INFINITY);
        hi.fill(f64::NEG_INFINITY);
        for row in packet.chunks_exact(pairs) {
            for k in 0..pairs {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        for k in 0..pairs {
            if hi[k] == lo[k] {
                degenerate += 1;
            }
        }
        for row in packet.chunks_exact_mut(pairs) {
            for k in 0..pairs {
                let span = hi[k] - lo[k];
                row[k] = if span > 0.0 { (row[k] - lo[k]) / span } else { 0.0 };
            }
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} constant (t, k) slices normalized to zero");
    }
    Ok(Normalized {
        values,
        packets,
        subcarriers,
        pairs,
        degenerate_slices: degenerate,
    })
}

pub fn normalize_dataset(ds: &CsiDataset) -> Result<Normalized> {
    pairwise_normalize(&ds.amplitudes, ds.shape())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowWarning {
    /// The recording is shorter than one window; no frames were produced.
    TooShort { packets: usize, tau: usize },
}

/// Reference to one window inside a normalized source recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRef {
    pub source: usize,
    /// Zero-based index of the last packet in the window.
    pub anchor: usize,
    /// Ground truth. Kept for unlabeled frames too, for evaluation only.
    pub label: Option<CaseId>,
}

/// One owned frame, `(tau, S, K)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub values: Vec<f64>,
    pub tau: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    pub round_id: u32,
    pub anchor: usize,
    pub label: Option<CaseId>,
    pub split: Split,
}

/// A lazily materialized sequence of frames over shared normalized sources.
#[derive(Clone, Debug)]
pub struct FrameSet {
    pub tau: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    pub split: Split,
    sources: Vec<(u32, Arc<Normalized>)>,
    frames: Vec<FrameRef>,
    pub warnings: Vec<WindowWarning>,
}

impl FrameSet {
    pub fn empty(tau: usize, subcarriers: usize, pairs: usize, split: Split) -> Self {
        FrameSet {
            tau,
            subcarriers,
            pairs,
            split,
            sources: Vec::new(),
            frames: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn refs(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.tau * self.subcarriers * self.pairs
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.tau, self.subcarriers, self.pairs)
    }

    /// Borrow the `(tau, S, K)` values of frame `i`.
    pub fn values(&self, i: usize) -> &[f64] {
        let r = self.frames[i];
        let data = &self.sources[r.source].1.values;
        let row = self.subcarriers * self.pairs;
        let start = (r.anchor + 1 - self.tau) * row;
        &data[start..start + self.tau * row]
    }

    pub fn label(&self, i: usize) -> Option<CaseId> {
        self.frames[i].label
    }

    pub fn round_of(&self, i: usize) -> u32 {
        self.sources[self.frames[i].source].0
    }

    pub fn labels(&self) -> Vec<Option<CaseId>> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn frame(&self, i: usize) -> Frame {
        let r = self.frames[i];
        Frame {
            values: self.values(i).to_vec(),
            tau: self.tau,
            subcarriers: self.subcarriers,
            pairs: self.pairs,
            round_id: self.sources[r.source].0,
            anchor: r.anchor,
            label: r.label,
            split: self.split,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }

    /// Frames selected by index, sharing the same sources.
    pub fn subset(&self, indices: &[usize]) -> FrameSet {
        FrameSet {
            frames: indices.iter().map(|&i| self.frames[i]).collect(),
            warnings: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Append all frames of `other` (dimensions must agree).
    pub fn extend(&mut self, other: &FrameSet) -> Result<()> {
        if other.dims() != self.dims() {
            return Err(BtsError::Shape {
                op: "FrameSet::extend",
                expected: vec![self.tau, self.subcarriers, self.pairs],
                actual: vec![other.tau, other.subcarriers, other.pairs],
            });
        }
        let offset = self.sources.len();
        self.sources.extend(other.sources.iter().cloned());
        self.frames.extend(other.frames.iter().map(|f| FrameRef {
            source: f.source + offset,
            ..*f
        }));
        self.warnings.extend(other.warnings.iter().copied());
        Ok(())
    }

    fn push_source(&mut self, round_id: u32, data: Arc<Normalized>) -> usize {
        self.sources.push((round_id, data));
        self.sources.len() - 1
    }
}

fn check_window(tau: usize, stride: usize) -> Result<()> {
    if tau == 0 || stride == 0 {
        return Err(BtsError::Config("window size and stride must be at least 1".into()));
    }
    Ok(())
}

/// Slide a window of `tau` packets over `normalized` with the given stride.
///
/// The frame anchored at packet `t` holds packets `t - tau + 1 ..= t`.
pub fn window(normalized: Arc<Normalized>, tau: usize, stride: usize, split: Split) -> Result<FrameSet> {
    window_segments(normalized, &[], 0, tau, stride, split, 0.0..1.0)
}

/// Window every labeled segment separately so no frame straddles two cases.
///
/// `range` selects a fraction of each segment (e.g. `0.0..0.8` for training,
/// `0.8..1.0` for the held-out tail). With no segments the whole recording
/// is windowed without labels.
pub fn window_segments(
    normalized: Arc<Normalized>,
    segments: &[Segment],
    round_id: u32,
    tau: usize,
    stride: usize,
    split: Split,
    range: std::ops::Range<f64>,
) -> Result<FrameSet> {
    check_window(tau, stride)?;
    let mut set = FrameSet::empty(tau, normalized.subcarriers, normalized.pairs, split);
    let packets = normalized.packets;
    let spans: Vec<(usize, usize, Option<CaseId>)> = if segments.is_empty() {
        vec![(0, packets, None)]
    } else {
        segments.iter().map(|s| (s.start, s.len, Some(s.case))).collect()
    };
    let source = set.push_source(round_id, normalized);
    for (start, len, label) in spans {
        let lo = start + (len as f64 * range.start).round() as usize;
        let hi = start + (len as f64 * range.end).round() as usize;
        let span = hi.saturating_sub(lo);
        if span < tau {
            log::warn!("span of {span} packets is shorter than the window {tau}; no frames");
            set.warnings.push(WindowWarning::TooShort { packets: span, tau });
            continue;
        }
        let mut anchor = lo + tau - 1;
        while anchor < hi {
            set.frames.push(FrameRef { source, anchor, label });
            anchor += stride;
        }
    }
    Ok(set)
}

/// Normalize and window one recording.
pub fn frames_from_dataset(
    ds: &CsiDataset,
    tau: usize,
    stride: usize,
    range: std::ops::Range<f64>,
) -> Result<FrameSet> {
    let norm = Arc::new(normalize_dataset(ds)?);
    let split = if ds.labeled { Split::Labeled } else { Split::Unlabeled };
    window_segments(norm, &ds.segments, ds.round_id, tau, stride, split, range)
}

/// Precomputed sinusoid offsets for a `(tau, P)` embedded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityTable {
    pub tau: usize,
    pub width: usize,
    pub eta: f64,
    /// Row-major `(tau, P)`.
    pub values: Vec<f64>,
}

impl DiversityTable {
    /// For 1-based column `p` and 0-based time `t`: `sin(t / eta^((p-2)/P))`
    /// when `p` is even, `cos(t / eta^((p-1)/P))` otherwise.
    pub fn new(tau: usize, width: usize, eta: f64) -> Self {
        let mut values = vec![0.0; tau * width];
        let inv_freq: Vec<f64> = (1..=width)
            .map(|p| {
                let e = if p % 2 == 0 { p - 2 } else { p - 1 };
                eta.powf(e as f64 / width as f64)
            })
            .collect();
        for t in 0..tau {
            for (q, denom) in inv_freq.iter().enumerate() {
                let arg = t as f64 / denom;
                values[t * width + q] = if (q + 1) % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
        DiversityTable { tau, width, eta, values }
    }

    pub fn zeros(tau: usize, width: usize) -> Self {
        DiversityTable {
            tau,
            width,
            eta: f64::INFINITY,
            values: vec![0.0; tau * width],
        }
    }
}

/// Frame reshaped to `(tau, P)` with the diversity table added.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedFrame {
    pub values: Vec<f64>,
    pub tau: usize,
    pub width: usize,
    pub eta: f64,
}

/// Write the pair-major reshape `p = k * S + s` of a `(tau, S, K)` frame into `out`.
pub fn reshape_pair_major(frame: &[f64], (tau, subcarriers, pairs): (usize, usize, usize), out: &mut [f64]) {
    let width = subcarriers * pairs;
    debug_assert_eq!(frame.len(), tau * width);
    debug_assert_eq!(out.len(), tau * width);
    for t in 0..tau {
        let src = &frame[t * width..(t + 1) * width];
        let dst = &mut out[t * width..(t + 1) * width];
        for s in 0..subcarriers {
            for k in 0..pairs {
                dst[k * subcarriers + s] = src[s * pairs + k];
            }
        }
    }
}

pub fn embed_into(frame: &[f64], dims: (usize, usize, usize), table: &DiversityTable, out: &mut [f64]) {
    reshape_pair_major(frame, dims, out);
    for (o, d) in out.iter_mut().zip(&table.values) {
        *o += d;
    }
}

pub fn embed_with_diversity(frame: &Frame, eta: f64) -> Result<EmbeddedFrame> {
    if !(eta > 0.0) {
        return Err(BtsError::Config("diversity constant must be positive".into()));
    }
    let dims = (frame.tau, frame.subcarriers, frame.pairs);
    let width = frame.subcarriers * frame.pairs;
    if frame.values.len() != frame.tau * width {
        return Err(BtsError::Shape {
            op: "embed_with_diversity",
            expected: vec![frame.tau, frame.subcarriers, frame.pairs],
            actual: vec![frame.values.len()],
        });
    }
    let table = DiversityTable::new(frame.tau, width, eta);
    let mut values = vec![0.0; frame.tau * width];
    embed_into(&frame.values, dims, &table, &mut values);
    Ok(EmbeddedFrame {
        values,
        tau: frame.tau,
        width,
        eta,
    })
}
