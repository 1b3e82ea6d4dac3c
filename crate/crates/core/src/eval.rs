//! Detection metrics: tIoU, average precision, mAP over tIoU grids and the
//! false-positive error profile.
//!
//! Matching is greedy in confidence order: a prediction claims the unmatched
//! ground truth of its class in the same video with the highest tIoU, provided
//! that tIoU reaches the threshold. AP is the area under the all-point
//! interpolated precision envelope.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{AnnotationSet, Detection};

/// Overlap ratio of two `[begin, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A prediction reduced to what matching needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSpan<'a> {
    pub video_id: &'a str,
    pub begin: f64,
    pub end: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span<'a> {
    pub video_id: &'a str,
    pub begin: f64,
    pub end: f64,
}

/// Confidence descending, then earlier begin, then video id.
fn rank_order(a: &ScoredSpan<'_>, b: &ScoredSpan<'_>) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.begin.total_cmp(&b.begin))
        .then(a.video_id.cmp(b.video_id))
}

/// True-positive flag per prediction, in the given (already ranked) order.
fn match_greedy(preds: &[ScoredSpan<'_>], gts: &[Span<'_>], threshold: f64) -> Vec<bool> {
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let Some(candidates) = by_video.get(p.video_id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &g in candidates {
                if used[g] {
                    continue;
                }
                let o = tiou((p.begin, p.end), (gts[g].begin, gts[g].end));
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from true-positive flags in rank order.
fn ap_from_flags(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // Monotone envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// AP of one class at one tIoU threshold. Predictions are re-ranked with the
/// deterministic tie-break, so input order only matters for exact duplicates.
pub fn average_precision(preds: &[ScoredSpan<'_>], gts: &[Span<'_>], threshold: f64) -> f64 {
    let mut ranked = preds.to_vec();
    ranked.sort_by(rank_order);
    ap_from_flags(&match_greedy(&ranked, gts, threshold), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
    /// Largest prediction budget multiplier for the error profile.
    pub top_kg: usize,
}

impl EvalConfig {
    pub fn thumos() -> Self {
        Self {
            tiou_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            top_kg: 3,
        }
    }

    pub fn activitynet() -> Self {
        Self {
            tiou_grid: (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect(),
            top_kg: 3,
        }
    }

    pub fn with_grid(tiou_grid: Vec<f64>) -> Result<Self> {
        let cfg = Self { tiou_grid, top_kg: 3 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() {
            return Err(Error::Config("tIoU grid is empty".into()));
        }
        if self.tiou_grid.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Config("tIoU thresholds must lie in (0, 1]".into()));
        }
        if self.tiou_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tIoU grid must be strictly increasing".into()));
        }
        if !(1..=3).contains(&self.top_kg) {
            return Err(Error::Config("top_kg must be between 1 and 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiou_grid: Vec<f64>,
    /// AP per class per threshold; `None` when the class has neither
    /// predictions nor ground truth.
    pub per_class: BTreeMap<String, Vec<Option<f64>>>,
    pub map_per_tiou: Vec<f64>,
    pub average_map: f64,
    pub counts: Vec<MatchCounts>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.tiou_grid
            .iter()
            .position(|&x| (x - threshold).abs() < 1e-12)
            .map(|i| self.map_per_tiou[i])
    }

    /// Plain-text table: one column per threshold plus the mean, in percent.
    pub fn table(&self, row_label: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "tIoU");
        for x in &self.tiou_grid {
            let _ = write!(out, " {x:>6.2}");
        }
        let _ = writeln!(out, " {:>6}", "mAP");
        let _ = write!(out, "{row_label:<12}");
        for m in &self.map_per_tiou {
            let _ = write!(out, " {:>6.2}", 100.0 * m);
        }
        let _ = writeln!(out, " {:>6.2}", 100.0 * self.average_map);
        out
    }
}

fn check_labels(preds: &[Detection], gts: &AnnotationSet) -> Result<()> {
    for p in preds {
        if !gts.classes.contains(&p.label) {
            return Err(Error::Validation(format!(
                "prediction label {:?} in video {} is not in the class list",
                p.label, p.video_id
            )));
        }
    }
    Ok(())
}

fn spans_by_class<'a>(preds: &'a [Detection], gts: &'a AnnotationSet) -> BTreeMap<&'a str, (Vec<ScoredSpan<'a>>, Vec<Span<'a>>)> {
    let mut by_class: BTreeMap<&str, (Vec<ScoredSpan<'_>>, Vec<Span<'_>>)> = BTreeMap::new();
    for c in &gts.classes {
        by_class.entry(c.as_str()).or_default();
    }
    for p in preds {
        by_class.entry(p.label.as_str()).or_default().0.push(ScoredSpan {
            video_id: &p.video_id,
            begin: p.begin,
            end: p.end,
            confidence: p.confidence,
        });
    }
    for (vid, video) in &gts.videos {
        for g in &video.instances {
            by_class.entry(g.label.as_str()).or_default().1.push(Span {
                video_id: vid,
                begin: g.begin,
                end: g.end,
            });
        }
    }
    for (preds, _) in by_class.values_mut() {
        preds.sort_by(rank_order);
    }
    by_class
}

pub fn evaluate(preds: &[Detection], gts: &AnnotationSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    check_labels(preds, gts)?;
    let by_class = spans_by_class(preds, gts);
    let mut per_class = BTreeMap::new();
    let mut counts = vec![MatchCounts::default(); cfg.tiou_grid.len()];
    for (class, (p, g)) in &by_class {
        let aps = cfg
            .tiou_grid
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                if p.is_empty() && g.is_empty() {
                    return None;
                }
                let flags = match_greedy(p, g, xi);
                let tp = flags.iter().filter(|&&f| f).count();
                counts[i].true_positives += tp;
                counts[i].false_positives += flags.len() - tp;
                counts[i].false_negatives += g.len() - tp;
                Some(ap_from_flags(&flags, g.len()))
            })
            .collect::<Vec<_>>();
        per_class.insert(class.to_string(), aps);
    }
    let map_per_tiou: Vec<f64> = (0..cfg.tiou_grid.len())
        .map(|i| {
            let vals: Vec<f64> = per_class.values().filter_map(|aps| aps[i]).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let average_map = map_per_tiou.iter().sum::<f64>() / map_per_tiou.len() as f64;
    Ok(EvalReport {
        tiou_grid: cfg.tiou_grid.clone(),
        per_class,
        map_per_tiou,
        average_map,
        counts,
    })
}

/// Outcome of one kept prediction in the false-positive analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    TruePositive,
    /// Correct label and location, but the ground truth was already claimed.
    DoubleDetection,
    /// Location matches a ground truth of another class.
    WrongLabel,
    /// Correct label, overlap in `[0.1, threshold)`.
    Localization,
    /// Wrong label, overlap of at least 0.1 with some ground truth.
    Confusion,
    /// Overlap below 0.1 with every ground truth.
    Background,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 6] = [
        ErrorKind::TruePositive,
        ErrorKind::DoubleDetection,
        ErrorKind::WrongLabel,
        ErrorKind::Localization,
        ErrorKind::Confusion,
        ErrorKind::Background,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::TruePositive => "true_positive",
            ErrorKind::DoubleDetection => "double_detection",
            ErrorKind::WrongLabel => "wrong_label",
            ErrorKind::Localization => "localization",
            ErrorKind::Confusion => "confusion",
            ErrorKind::Background => "background",
        }
    }
}

/// Lower overlap bound separating localization/confusion from background.
pub const MIN_OVERLAP: f64 = 0.1;

/// Overlaps of one prediction against the ground truth of its video.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapSummary {
    /// Best tIoU with an unmatched same-label ground truth, and its index.
    pub same_label_unmatched: Option<(usize, f64)>,
    pub same_label_best: f64,
    pub other_label_best: f64,
}

/// The error taxonomy in one place.
pub fn classify_prediction(o: &OverlapSummary, threshold: f64) -> ErrorKind {
    if o.same_label_unmatched.is_some_and(|(_, t)| t >= threshold) {
        ErrorKind::TruePositive
    } else if o.same_label_best >= threshold {
        ErrorKind::DoubleDetection
    } else if o.other_label_best >= threshold {
        ErrorKind::WrongLabel
    } else if o.same_label_best >= MIN_OVERLAP {
        ErrorKind::Localization
    } else if o.other_label_best >= MIN_OVERLAP {
        ErrorKind::Confusion
    } else {
        ErrorKind::Background
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetProfile {
    /// Budget multiplier k in "top-kG".
    pub k: usize,
    pub kept: usize,
    pub counts: BTreeMap<ErrorKind, usize>,
    pub fractions: BTreeMap<ErrorKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub tiou: f64,
    pub budgets: Vec<BudgetProfile>,
}

impl ErrorProfile {
    /// Rows of `budget,category,count,fraction` for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,category,count,fraction\n");
        for b in &self.budgets {
            for kind in ErrorKind::ALL {
                let _ = writeln!(
                    out,
                    "top-{}G,{},{},{}",
                    b.k,
                    kind.name(),
                    b.counts[&kind],
                    b.fractions[&kind]
                );
            }
        }
        out
    }
}

/// False-positive profile for prediction budgets `top-1G ..= top-(max_k)G`,
/// where `G` is the number of ground truths of each class.
pub fn error_profile(preds: &[Detection], gts: &AnnotationSet, threshold: f64, max_k: usize) -> Result<ErrorProfile> {
    check_labels(preds, gts)?;
    let mut gt_by_video: BTreeMap<&str, Vec<(&str, f64, f64)>> = BTreeMap::new();
    let mut gt_per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for (vid, video) in &gts.videos {
        for g in &video.instances {
            gt_by_video.entry(vid).or_default().push((&g.label, g.begin, g.end));
            *gt_per_class.entry(&g.label).or_default() += 1;
        }
    }

    let mut budgets = Vec::new();
    for k in 1..=max_k {
        // Per class, the k*G most confident predictions.
        let mut kept: Vec<&Detection> = Vec::new();
        let classes: BTreeSet<&str> = preds.iter().map(|p| p.label.as_str()).collect();
        for class in classes {
            let mut mine: Vec<&Detection> = preds.iter().filter(|p| p.label == class).collect();
            mine.sort_by(|a, b| rank_detections(a, b));
            let budget = k * gt_per_class.get(class).copied().unwrap_or(0);
            kept.extend(mine.into_iter().take(budget));
        }
        kept.sort_by(|a, b| rank_detections(a, b));

        let mut used: BTreeSet<(&str, usize)> = BTreeSet::new();
        let mut counts: BTreeMap<ErrorKind, usize> = ErrorKind::ALL.iter().map(|&e| (e, 0)).collect();
        for p in &kept {
            let mut o = OverlapSummary::default();
            for (i, &(label, b, e)) in gt_by_video.get(p.video_id.as_str()).into_iter().flatten().enumerate() {
                let t = tiou((p.begin, p.end), (b, e));
                if label == p.label {
                    o.same_label_best = o.same_label_best.max(t);
                    if !used.contains(&(p.video_id.as_str(), i)) && o.same_label_unmatched.is_none_or(|(_, best)| t > best) {
                        o.same_label_unmatched = Some((i, t));
                    }
                } else {
                    o.other_label_best = o.other_label_best.max(t);
                }
            }
            let kind = classify_prediction(&o, threshold);
            if kind == ErrorKind::TruePositive {
                let (i, _) = o.same_label_unmatched.expect("true positive has a match");
                used.insert((p.video_id.as_str(), i));
            }
            *counts.get_mut(&kind).expect("all kinds present") += 1;
        }
        let total = kept.len();
        let fractions = counts
            .iter()
            .map(|(&kind, &c)| (kind, if total == 0 { 0.0 } else { c as f64 / total as f64 }))
            .collect();
        budgets.push(BudgetProfile {
            k,
            kept: total,
            counts,
            fractions,
        });
    }
    Ok(ErrorProfile { tiou: threshold, budgets })
}

fn rank_detections(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.begin.total_cmp(&b.begin))
        .then(a.video_id.cmp(&b.video_id))
}
