//! Slow, direct reference implementations used as oracles by the test suites.
//!
//! Nothing here depends on `zad-core`: every routine is written from the
//! textbook definition with plain vectors so it can check the optimized code
//! independently.

pub mod signal {
    /// Centered moving average: frame `t` averages `t - (w-1)/2 ..= t + w/2`,
    /// truncated at the ends.
    pub fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
        let n = x.len() as i64;
        let w = w.min(x.len()).max(1) as i64;
        (0..n)
            .map(|t| {
                let lo = (t - (w - 1) / 2).max(0);
                let hi = (t + w / 2).min(n - 1);
                let vals: Vec<f64> = (lo..=hi).map(|i| x[i as usize]).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    /// Log-decay outer weights for one side, unnormalized, for distances `1..=count`.
    pub fn log_weights(count: usize, eta: f64) -> Vec<f64> {
        (1..=count).map(|m| 1.0 / (m as f64 + eta).ln()).collect()
    }

    pub fn inflation(len: usize) -> usize {
        ((len as f64 / 4.0).round() as usize).max(1)
    }

    /// Per-side weights that exist inside a video of `t` frames, normalized to sum 1.
    pub fn side_weights(b: usize, e: usize, t: usize, eta: f64) -> (Vec<f64>, Vec<f64>) {
        let l = inflation(e - b + 1);
        let left_count = (1..=l).filter(|&m| m <= b).count();
        let right_count = (1..=l).filter(|&m| e + m < t).count();
        let norm = |w: Vec<f64>| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        (norm(log_weights(left_count, eta)), norm(log_weights(right_count, eta)))
    }

    /// LogOIC score of segment `b..=e` on a normalized trace. Returns
    /// `(inner, outer, max, p)`.
    pub fn logoic(s: &[f64], b: usize, e: usize, gamma1: f64, gamma2: f64, eta: f64) -> (f64, f64, f64, f64) {
        let inside = &s[b..=e];
        let inner = inside.iter().sum::<f64>() / inside.len() as f64;
        let max = inside.iter().cloned().fold(f64::MIN, f64::max);
        let (wl, wr) = side_weights(b, e, s.len(), eta);
        let mut sides = Vec::new();
        if !wl.is_empty() {
            sides.push(wl.iter().enumerate().map(|(i, w)| w * s[b - 1 - i]).sum::<f64>());
        }
        if !wr.is_empty() {
            sides.push(wr.iter().enumerate().map(|(i, w)| w * s[e + 1 + i]).sum::<f64>());
        }
        let outer = if sides.is_empty() { 0.0 } else { sides.iter().sum::<f64>() / sides.len() as f64 };
        (inner, outer, max, inner - gamma1 * outer + gamma2 * max)
    }

    /// Energy from the O(N^2) DFT definition: `sum_channels sum_k |Z_k|^2 / N`.
    /// `channels[d][t]` is channel `d` at time `t`.
    pub fn dft_energy(channels: &[Vec<f64>], dc_exclude: bool) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for x in channels {
            n = x.len();
            for k in usize::from(dc_exclude)..n {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += v * angle.cos();
                    im += v * angle.sin();
                }
                total += re * re + im * im;
            }
        }
        total / n as f64
    }
}

pub mod linalg {
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let na = dot(a, a).sqrt();
        let nb = dot(b, b).sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(a, b) / (na * nb)
        }
    }

    /// `m` is row-major `rows x v.len()`.
    pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        m.iter().map(|row| dot(row, v)).collect()
    }
}

pub mod loss {
    use super::linalg::{cosine, mat_vec};

    /// Adaptation loss from its definition. Matrices are row-major, `frames`
    /// lists frame vectors. Returns `(total, representation, separation)`.
    pub fn tta_loss(
        visual: &[Vec<f64>],
        text: &[Vec<f64>],
        frames: &[Vec<f64>],
        prototype: &[f64],
        positives: &[usize],
        negatives: &[usize],
        beta: f64,
    ) -> (f64, f64, f64) {
        let y = mat_vec(text, prototype);
        let pos: Vec<f64> = positives.iter().map(|&i| cosine(&mat_vec(visual, &frames[i]), &y)).collect();
        let neg: Vec<f64> = negatives.iter().map(|&i| cosine(&mat_vec(visual, &frames[i]), &y)).collect();
        let rep = pos.iter().map(|c| 2.0 - 2.0 * c).sum::<f64>() / pos.len() as f64;
        let sep = (pos.iter().map(|c| (c - 1.0).powi(2)).sum::<f64>() + neg.iter().map(|c| c * c).sum::<f64>())
            / (pos.len() + neg.len()) as f64;
        (beta * rep + sep, rep, sep)
    }
}

pub mod detection {
    use std::collections::BTreeSet;

    #[derive(Debug, Clone, PartialEq)]
    pub struct Pred {
        pub video: String,
        pub label: String,
        pub begin: f64,
        pub end: f64,
        pub score: f64,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct Gt {
        pub video: String,
        pub label: String,
        pub begin: f64,
        pub end: f64,
    }

    pub fn tiou(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
        let union = (a1 - a0) + (b1 - b0) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Predictions sorted by score desc, begin asc, video asc.
    pub fn ranked(preds: &[Pred]) -> Vec<Pred> {
        let mut v = preds.to_vec();
        v.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.begin.partial_cmp(&b.begin).unwrap())
                .then(a.video.cmp(&b.video))
        });
        v
    }

    /// AP of one class: each true positive contributes `1/G` times the best
    /// precision at any later cutoff.
    pub fn average_precision(preds: &[Pred], gts: &[Gt], threshold: f64) -> f64 {
        if gts.is_empty() {
            return 0.0;
        }
        let ranked = ranked(preds);
        let mut taken: BTreeSet<usize> = BTreeSet::new();
        let mut hits = Vec::new();
        for p in &ranked {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (j, g) in gts.iter().enumerate() {
                if g.video != p.video || taken.contains(&j) {
                    continue;
                }
                let o = tiou(p.begin, p.end, g.begin, g.end);
                if o >= threshold && o > best_iou {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                taken.insert(j);
            }
            hits.push(best.is_some());
        }
        let precisions: Vec<f64> = (0..hits.len())
            .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..hits.len() {
            if hits[i] {
                let best_later = precisions[i..].iter().cloned().fold(0.0, f64::max);
                ap += best_later / gts.len() as f64;
            }
        }
        ap
    }

    /// mAP over the classes present in either predictions or ground truth.
    pub fn mean_ap(preds: &[Pred], gts: &[Gt], threshold: f64) -> f64 {
        let classes: BTreeSet<&str> = preds
            .iter()
            .map(|p| p.label.as_str())
            .chain(gts.iter().map(|g| g.label.as_str()))
            .collect();
        if classes.is_empty() {
            return 0.0;
        }
        let total: f64 = classes
            .iter()
            .map(|c| {
                let p: Vec<Pred> = preds.iter().filter(|p| p.label == *c).cloned().collect();
                let g: Vec<Gt> = gts.iter().filter(|g| g.label == *c).cloned().collect();
                average_precision(&p, &g, threshold)
            })
            .sum();
        total / classes.len() as f64
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    pub enum Category {
        TruePositive,
        Double,
        WrongLabel,
        Localization,
        Confusion,
        Background,
    }

    /// Category of every prediction in the top-`k*G` per class budget, in
    /// global rank order; `G` counts ground truths of the class.
    pub fn error_categories(preds: &[Pred], gts: &[Gt], threshold: f64, k: usize) -> Vec<Category> {
        let ranked_all = ranked(preds);
        let mut kept: Vec<Pred> = Vec::new();
        let classes: BTreeSet<&str> = preds.iter().map(|p| p.label.as_str()).collect();
        for c in classes {
            let g = gts.iter().filter(|x| x.label == c).count();
            kept.extend(ranked_all.iter().filter(|p| p.label == c).take(k * g).cloned());
        }
        let kept = ranked(&kept);
        let mut taken: BTreeSet<usize> = BTreeSet::new();
        let mut out = Vec::new();
        for p in &kept {
            let in_video: Vec<(usize, &Gt)> = gts.iter().enumerate().filter(|(_, g)| g.video == p.video).collect();
            let overlap = |g: &Gt| tiou(p.begin, p.end, g.begin, g.end);
            let free_match = in_video
                .iter()
                .filter(|(j, g)| g.label == p.label && !taken.contains(j) && overlap(g) >= threshold)
                .max_by(|a, b| overlap(a.1).partial_cmp(&overlap(b.1)).unwrap().then(b.0.cmp(&a.0)))
                .map(|(j, _)| *j);
            let same = in_video.iter().filter(|(_, g)| g.label == p.label).map(|(_, g)| overlap(g)).fold(0.0, f64::max);
            let other = in_video.iter().filter(|(_, g)| g.label != p.label).map(|(_, g)| overlap(g)).fold(0.0, f64::max);
            let cat = if let Some(j) = free_match {
                taken.insert(j);
                Category::TruePositive
            } else if same >= threshold {
                Category::Double
            } else if other >= threshold {
                Category::WrongLabel
            } else if same >= 0.1 {
                Category::Localization
            } else if other >= 0.1 {
                Category::Confusion
            } else {
                Category::Background
            };
            out.push(cat);
        }
        out
    }
}

pub mod stats {
    /// Pearson statistic of observed counts against equal expected counts.
    pub fn chi_square_uniform(counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
    }

    /// Upper 0.1% point of chi-square with `df` degrees of freedom
    /// (Wilson-Hilferty approximation).
    pub fn chi_square_critical_999(df: usize) -> f64 {
        let k = df as f64;
        let z = 3.090_232_306_167_813;
        k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
    }
}
