//! Segment confidence: outer-inner contrast with log-decay outer weights, and
//! calibration by the segment's temporal spectral energy.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::linalg::cosine;
use crate::pipeline::{PipelineConfig, ScoreKind, ScoreTrace, Segment};

/// Outer-context weights on each side of a segment, nearest frame first.
///
/// Each non-empty side sums to one. Frames outside the video are dropped
/// before normalization, so a segment touching an edge has an empty side.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterWeights {
    /// Weights for frames `begin-1, begin-2, ...`.
    pub left: Vec<f64>,
    /// Weights for frames `end+1, end+2, ...`.
    pub right: Vec<f64>,
    pub inflation: usize,
}

/// `max(1, round_half_up(len / 4))`.
pub fn inflation_length(seg: Segment) -> usize {
    ((seg.len() + 2) / 4).max(1)
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for v in &mut w {
            *v /= total;
        }
    }
    w
}

fn outer_weights(seg: Segment, frame_count: usize, law: impl Fn(usize) -> f64) -> OuterWeights {
    let l = inflation_length(seg);
    let left_len = l.min(seg.begin);
    let right_len = l.min(frame_count.saturating_sub(seg.end + 1));
    OuterWeights {
        left: normalized((1..=left_len).map(&law).collect()),
        right: normalized((1..=right_len).map(&law).collect()),
        inflation: l,
    }
}

/// Weight `1 / ln(m + eta)` at outer distance `m`, normalized per side.
pub fn log_decay_weights(seg: Segment, frame_count: usize, eta: f64) -> OuterWeights {
    outer_weights(seg, frame_count, |m| 1.0 / (m as f64 + eta).ln())
}

/// Equal weights over the inflation window; the classic contrast score.
pub fn uniform_weights(seg: Segment, frame_count: usize) -> OuterWeights {
    outer_weights(seg, frame_count, |_| 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastScore {
    pub inner: f64,
    pub outer: f64,
    pub max: f64,
    /// `inner - gamma1 * outer + gamma2 * max`.
    pub p: f64,
}

/// Contrast score on the normalized trace for arbitrary outer weights.
///
/// The outer activation is the mean of the available sides' weighted sums,
/// and zero when neither side has a frame.
pub fn contrast(trace: &ScoreTrace, seg: Segment, weights: &OuterWeights, gamma1: f64, gamma2: f64) -> ContrastScore {
    let s = &trace.normalized;
    let mut inner = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &v in &s[seg.begin..=seg.end] {
        inner += v;
        max = max.max(v);
    }
    inner /= seg.len() as f64;

    let mut sides = 0usize;
    let mut outer = 0.0;
    if !weights.left.is_empty() {
        let mut acc = 0.0;
        for (i, w) in weights.left.iter().enumerate() {
            acc += w * s[seg.begin - 1 - i];
        }
        outer += acc;
        sides += 1;
    }
    if !weights.right.is_empty() {
        let mut acc = 0.0;
        for (i, w) in weights.right.iter().enumerate() {
            acc += w * s[seg.end + 1 + i];
        }
        outer += acc;
        sides += 1;
    }
    if sides > 0 {
        outer /= sides as f64;
    }
    ContrastScore {
        inner,
        outer,
        max,
        p: inner - gamma1 * outer + gamma2 * max,
    }
}

pub fn logoic(trace: &ScoreTrace, seg: Segment, cfg: &PipelineConfig) -> ContrastScore {
    let w = log_decay_weights(seg, trace.len(), cfg.eta);
    contrast(trace, seg, &w, cfg.gamma1, cfg.gamma2)
}

pub fn oic(trace: &ScoreTrace, seg: Segment, cfg: &PipelineConfig) -> ContrastScore {
    let w = uniform_weights(seg, trace.len());
    contrast(trace, seg, &w, cfg.gamma1, cfg.gamma2)
}

/// Mean over the segment of the squared DFT magnitudes, summed over channels.
///
/// `frames` holds one frame per column. The transform is the unnormalized
/// forward DFT along time, computed independently for every channel over
/// frames `begin..=end`. With `dc_exclude` the zero-frequency bin is skipped.
pub fn dft_energy(frames: &DMatrix<f64>, seg: Segment, dc_exclude: bool) -> f64 {
    let n = seg.len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let skip = usize::from(dc_exclude);
    let mut total = 0.0;
    for d in 0..frames.nrows() {
        for (slot, t) in buf.iter_mut().zip(seg.frames()) {
            *slot = Complex::new(frames[(d, t)], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for z in &buf[skip..] {
            total += z.norm_sqr();
        }
    }
    total / n as f64
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub actionness: f64,
    pub confidence: f64,
}

pub fn calibrate(p: f64, energy: f64) -> Calibration {
    let actionness = sigmoid(energy);
    Calibration {
        actionness,
        confidence: p * actionness,
    }
}

/// Everything computed for one candidate segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentScore {
    pub inner: f64,
    pub outer: f64,
    pub max: f64,
    /// Uncalibrated confidence for the configured [`ScoreKind`].
    pub p: f64,
    /// 1.0 when calibration is off.
    pub actionness: f64,
    pub confidence: f64,
}

/// Cosine between the mean embedding of the segment and the prototype.
pub fn segment_similarity(frames: &DMatrix<f64>, seg: Segment, prototype: &[f64]) -> f64 {
    let mut mean = vec![0.0; frames.nrows()];
    for t in seg.frames() {
        for (m, v) in mean.iter_mut().zip(frames.column(t).iter()) {
            *m += v;
        }
    }
    cosine(&mean, prototype)
}

/// `unit_frames` must have unit-norm columns; the spectral energy is taken on them.
pub fn score_segment(
    unit_frames: &DMatrix<f64>,
    trace: &ScoreTrace,
    seg: Segment,
    prototype: &[f64],
    cfg: &PipelineConfig,
) -> SegmentScore {
    let c = match cfg.score_kind {
        ScoreKind::Oic => oic(trace, seg, cfg),
        ScoreKind::LogOic | ScoreKind::Similarity => logoic(trace, seg, cfg),
    };
    let p = match cfg.score_kind {
        ScoreKind::Similarity => segment_similarity(unit_frames, seg, prototype),
        _ => c.p,
    };
    let (actionness, confidence) = if cfg.calibrate {
        let cal = calibrate(p, dft_energy(unit_frames, seg, cfg.dc_exclude));
        (cal.actionness, cal.confidence)
    } else {
        (1.0, p)
    };
    SegmentScore {
        inner: c.inner,
        outer: c.outer,
        max: c.max,
        p,
        actionness,
        confidence,
    }
}
