//! Training-free detection: video-level pseudo-label, per-frame similarity to
//! the label's text prototype, smoothing, min-max normalization, threshold
//! merging and segment confidence.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::scoring;
use crate::store::{Detection, FeatureMatrix, PromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Mean of the normalized trace over the whole video.
    MeanOfTrace,
    Fixed(f64),
}

/// Which quantity ranks a candidate segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Cosine between the mean segment embedding and the prototype.
    Similarity,
    /// Inner-outer contrast with uniform outer weights.
    Oic,
    /// Inner-outer contrast with log-decay outer weights.
    LogOic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Moving-average window in frames.
    pub smoothing_window: usize,
    /// Weight of the outer activation.
    pub gamma1: f64,
    /// Weight of the in-segment peak.
    pub gamma2: f64,
    /// Shift of the log-decay weights; must be positive.
    pub eta: f64,
    /// Drop the zero-frequency bin from the spectral energy.
    pub dc_exclude: bool,
    pub threshold: ThresholdPolicy,
    pub score_kind: ScoreKind,
    /// Multiply confidences by the spectral actionness.
    pub calibrate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::thumos()
    }
}

impl PipelineConfig {
    pub fn thumos() -> Self {
        Self {
            smoothing_window: 60,
            gamma1: 0.2,
            gamma2: 1.0,
            eta: 1.0,
            dc_exclude: false,
            threshold: ThresholdPolicy::MeanOfTrace,
            score_kind: ScoreKind::LogOic,
            calibrate: true,
        }
    }

    pub fn activitynet() -> Self {
        Self {
            smoothing_window: 25,
            ..Self::thumos()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.smoothing_window == 0 {
            return Err(Error::Config("smoothing window must be at least 1".into()));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.gamma1.is_finite() && self.gamma2.is_finite()) {
            return Err(Error::Config("gamma weights must be finite".into()));
        }
        if let ThresholdPolicy::Fixed(a) = self.threshold {
            if !a.is_finite() {
                return Err(Error::Config(format!("fixed threshold must be finite, got {a}")));
            }
        }
        Ok(())
    }
}

/// Video-level pseudo-label and its text prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub prototype: Vec<f64>,
    /// Cosine between the mean frame and every class row.
    pub similarities: Vec<f64>,
}

fn check_dims(frames: &DMatrix<f64>, prompts: &PromptBank) -> Result<()> {
    if frames.nrows() != prompts.dim() {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match prompt dimension {}",
            frames.nrows(),
            prompts.dim()
        )));
    }
    Ok(())
}

pub fn classify_video(features: &FeatureMatrix, prompts: &PromptBank) -> Result<Classification> {
    classify_frames(&features.frames(), prompts)
}

/// Argmax of cosine(class row, temporal mean); ties go to the lowest index.
pub fn classify_frames(frames: &DMatrix<f64>, prompts: &PromptBank) -> Result<Classification> {
    check_dims(frames, prompts)?;
    let t = frames.ncols() as f64;
    let mut mean = vec![0.0; frames.nrows()];
    for col in frames.column_iter() {
        for (m, v) in mean.iter_mut().zip(col.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t;
    }
    let similarities: Vec<f64> = (0..prompts.class_count())
        .map(|c| cosine(&prompts.row_f64(c), &mean))
        .collect();
    let mut label = 0;
    for (c, &s) in similarities.iter().enumerate() {
        if s > similarities[label] {
            label = c;
        }
    }
    Ok(Classification {
        label,
        prototype: prompts.row_f64(label),
        similarities,
    })
}

/// Per-frame similarity trace with its smoothing and normalization stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub normalized: Vec<f64>,
    pub threshold: f64,
}

impl ScoreTrace {
    pub fn from_raw(raw: Vec<f64>, window: usize, policy: ThresholdPolicy) -> Self {
        let smoothed = moving_average(&raw, window);
        let normalized = min_max(&smoothed);
        let threshold = match policy {
            ThresholdPolicy::MeanOfTrace => normalized.iter().sum::<f64>() / normalized.len() as f64,
            ThresholdPolicy::Fixed(a) => a,
        };
        Self {
            raw,
            smoothed,
            normalized,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Centered moving average. The window spans `(w-1)/2` frames back and `w/2`
/// forward and is truncated at the ends; `w` is clamped to the trace length.
pub fn moving_average(raw: &[f64], window: usize) -> Vec<f64> {
    let n = raw.len();
    let w = window.clamp(1, n.max(1));
    let back = (w - 1) / 2;
    let ahead = w / 2;
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(back);
            let hi = (t + ahead).min(n - 1);
            let mut sum = 0.0;
            for v in &raw[lo..=hi] {
                sum += v;
            }
            sum / (hi - lo + 1) as f64
        })
        .collect()
}

/// Min-max scaling to [0, 1]; a constant trace maps to all 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.5; values.len()];
    }
    let span = hi - lo;
    values.iter().map(|v| (v - lo) / span).collect()
}

pub fn score_frames(frames: &DMatrix<f64>, prototype: &[f64], cfg: &PipelineConfig) -> Result<ScoreTrace> {
    if frames.nrows() != prototype.len() {
        return Err(Error::Shape(format!(
            "frame dimension {} does not match prototype length {}",
            frames.nrows(),
            prototype.len()
        )));
    }
    let raw = frames
        .column_iter()
        .map(|col| cosine(col.as_slice(), prototype))
        .collect();
    Ok(ScoreTrace::from_raw(raw, cfg.smoothing_window, cfg.threshold))
}

/// Inclusive frame range `begin..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment {
    pub begin: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(begin: usize, end: usize) -> Self {
        debug_assert!(begin <= end);
        Self { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.begin..=self.end
    }
}

/// Maximal runs of frames whose normalized score is strictly above the threshold.
pub fn merge_segments(trace: &ScoreTrace) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &s) in trace.normalized.iter().enumerate() {
        match (s > trace.threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(b)) => {
                out.push(Segment::new(b, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(b) = start {
        out.push(Segment::new(b, trace.normalized.len() - 1));
    }
    out
}

/// How the video label is chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelMode {
    /// Argmax pseudo-label.
    Pseudo,
    /// Oracle: use the given class name.
    Perfect(String),
}

pub(crate) fn resolve_label(features: &DMatrix<f64>, prompts: &PromptBank, mode: &LabelMode) -> Result<usize> {
    match mode {
        LabelMode::Pseudo => Ok(classify_frames(features, prompts)?.label),
        LabelMode::Perfect(name) => {
            check_dims(features, prompts)?;
            prompts
                .class_index(name)
                .ok_or_else(|| Error::Config(format!("oracle label {name:?} is not in the prompt bank")))
        }
    }
}

pub fn detect(features: &FeatureMatrix, prompts: &PromptBank, cfg: &PipelineConfig, mode: &LabelMode) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let frames = features.frames();
    let label = resolve_label(&frames, prompts, mode)?;
    let prototype = prompts.row_f64(label);
    let (detections, _) = detect_frames(
        &frames,
        &prototype,
        &VideoContext {
            video_id: features.video_id(),
            label: &prompts.class_names()[label],
            fps: features.fps(),
        },
        cfg,
    )?;
    Ok(detections)
}

pub(crate) struct VideoContext<'a> {
    pub video_id: &'a str,
    pub label: &'a str,
    pub fps: f64,
}

/// Scores, merges and ranks segments for already-embedded frames. Shared with
/// the adaptation loop, which passes projected frames and prototype.
pub(crate) fn detect_frames(
    frames: &DMatrix<f64>,
    prototype: &[f64],
    video: &VideoContext<'_>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Detection>, ScoreTrace)> {
    let trace = score_frames(frames, prototype, cfg)?;
    let segments = merge_segments(&trace);
    if segments.is_empty() {
        return Ok((Vec::new(), trace));
    }
    let unit = unit_columns(frames);
    let detections = segments
        .iter()
        .map(|&seg| {
            let score = scoring::score_segment(&unit, &trace, seg, prototype, cfg);
            let begin = seg.begin as f64 / video.fps;
            let end = (seg.end + 1) as f64 / video.fps;
            Detection {
                video_id: video.video_id.to_string(),
                label: video.label.to_string(),
                begin,
                end,
                confidence: score.confidence,
            }
        })
        .collect();
    Ok((detections, trace))
}

fn unit_columns(frames: &DMatrix<f64>) -> DMatrix<f64> {
    let mut unit = frames.clone();
    for mut col in unit.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    unit
}
