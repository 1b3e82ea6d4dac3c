//! Per-video test-time adaptation.
//!
//! Two square projections (one for frame embeddings, one for the text
//! prototype) start at the identity and are tuned for `steps` Adam updates on
//! a label-free objective:
//!
//! - representation loss: mean of `2 - 2 cos(P_v x+, P_t y)` over positives;
//! - separation loss: mean squared error of positive and negative cosines
//!   against the ideal vector of ones then zeros.
//!
//! Positives and negatives are re-drawn from the current similarity trace at
//! every step. After the last step the regular detector runs on projected
//! embeddings, so zero steps reproduce [`crate::pipeline::detect`] exactly.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{self, LabelMode, PipelineConfig, ScoreTrace, VideoContext};
use crate::store::{Detection, FeatureMatrix, PromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveStrategy {
    /// Uniform draw from the frames closest to the prototype.
    Pcs,
    /// Uniform draw from every frame scoring above the trace threshold.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Uniform draw from every frame outside the positive pool.
    Random,
    /// Uniform draw from the frames farthest from the prototype.
    Farthest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    /// Positives and negatives drawn per step.
    pub k: usize,
    /// Adaptation steps.
    pub steps: usize,
    /// Weight of the representation loss.
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub positive: PositiveStrategy,
    pub negative: NegativeStrategy,
    pub reset_per_video: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self::thumos()
    }
}

impl TtaConfig {
    pub fn thumos() -> Self {
        Self {
            k: 4,
            steps: 60,
            beta: 1.0,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            positive: PositiveStrategy::Pcs,
            negative: NegativeStrategy::Random,
            reset_per_video: true,
        }
    }

    pub fn activitynet() -> Self {
        Self {
            k: 20,
            ..Self::thumos()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("learning rate", self.learning_rate),
            ("weight decay", self.weight_decay),
            ("adam eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("adam beta1", self.adam_beta1), ("adam beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl Moments {
    fn zeros(dim: usize) -> Self {
        Self {
            first: DMatrix::zeros(dim, dim),
            second: DMatrix::zeros(dim, dim),
        }
    }
}

/// Learnable projections plus their Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub visual: DMatrix<f64>,
    pub text: DMatrix<f64>,
    visual_moments: Moments,
    text_moments: Moments,
    pub step: u64,
}

impl AdapterState {
    pub fn identity(dim: usize) -> Self {
        Self {
            visual: DMatrix::identity(dim, dim),
            text: DMatrix::identity(dim, dim),
            visual_moments: Moments::zeros(dim),
            text_moments: Moments::zeros(dim),
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.visual.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.visual.len() + self.text.len()
    }
}

/// Frames (columns) through the visual projection, prototype through the text one.
pub fn project(state: &AdapterState, frames: &DMatrix<f64>, prototype: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let d = state.dim();
    if frames.nrows() != d || prototype.len() != d {
        return Err(Error::Shape(format!(
            "adapter dimension {d}, frames {}, prototype {}",
            frames.nrows(),
            prototype.len()
        )));
    }
    let projected = &state.visual * frames;
    let proto = &state.text * DVector::from_column_slice(prototype);
    Ok((projected, proto.as_slice().to_vec()))
}

/// Frame indices used for one adaptation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl SampleSets {
    /// Ideal similarity targets: ones for positives, zeros for negatives.
    pub fn targets(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.positives.len()];
        v.resize(self.positives.len() + self.negatives.len(), 0.0);
        v
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Frame indices ordered by normalized score, highest first; ties keep time order.
fn ranked(trace: &ScoreTrace) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| trace.normalized[b].total_cmp(&trace.normalized[a]));
    order
}

/// Draws `k` positives and `k` disjoint negatives from the current trace.
///
/// The PCS pool is the `min(2k, T-k)` highest-scoring frames, so at least `k`
/// frames always remain for negatives.
pub fn sample<R: Rng + ?Sized>(trace: &ScoreTrace, cfg: &TtaConfig, rng: &mut R) -> Result<SampleSets> {
    let t = trace.len();
    let k = cfg.k;
    if k == 0 || t < 2 * k {
        return Err(Error::Sampling(format!("need at least {} frames for k = {k}, video has {t}", 2 * k)));
    }
    let order = ranked(trace);
    let pool_len = match cfg.positive {
        PositiveStrategy::Pcs => (2 * k).min(t - k),
        PositiveStrategy::Random => {
            let above = trace.normalized.iter().filter(|&&s| s > trace.threshold).count();
            above.clamp((2 * k).min(t - k), t - k)
        }
    };
    let (pool, rest) = order.split_at(pool_len);
    let positives = draw(rng, pool, k);
    let negative_pool = match cfg.negative {
        NegativeStrategy::Random => rest,
        NegativeStrategy::Farthest => &rest[rest.len() - (2 * k).min(rest.len())..],
    };
    let negatives = draw(rng, negative_pool, k);
    Ok(SampleSets { positives, negatives })
}

/// Oracle sampling from known foreground and background frames.
pub fn sample_from_truth<R: Rng + ?Sized>(foreground: &[usize], background: &[usize], k: usize, rng: &mut R) -> Result<SampleSets> {
    if foreground.is_empty() || background.is_empty() {
        return Err(Error::Sampling(format!(
            "oracle sampling needs foreground and background frames, got {} and {}",
            foreground.len(),
            background.len()
        )));
    }
    Ok(SampleSets {
        positives: draw(rng, foreground, k.min(foreground.len())),
        negatives: draw(rng, background, k.min(background.len())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub representation: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub visual: DMatrix<f64>,
    pub text: DMatrix<f64>,
}

/// Loss and, when asked, its exact gradient with respect to both projections.
///
/// With `a = P_v x`, `b = P_t y` and `c = cos(a, b)`:
/// `dc/da = (b/|b| - c a/|a|) / |a|`, `dc/db = (a/|a| - c b/|b|) / |b|`,
/// and the chain rule through the linear maps gives rank-one updates.
fn evaluate(
    state: &AdapterState,
    frames: &DMatrix<f64>,
    prototype: &[f64],
    samples: &SampleSets,
    beta: f64,
    with_grad: bool,
) -> Result<(LossValue, Option<Gradients>)> {
    let d = state.dim();
    if frames.nrows() != d || prototype.len() != d {
        return Err(Error::Shape(format!(
            "adapter dimension {d}, frames {}, prototype {}",
            frames.nrows(),
            prototype.len()
        )));
    }
    let np = samples.positives.len();
    let nn = samples.negatives.len();
    if np == 0 {
        return Err(Error::Sampling("loss needs at least one positive".into()));
    }
    let y = DVector::from_column_slice(prototype);
    let b = &state.text * &y;
    let nb = b.norm();

    let mut rep = 0.0;
    let mut sep = 0.0;
    let mut grad_v = with_grad.then(|| DMatrix::zeros(d, d));
    let mut grad_b = DVector::zeros(d);

    let all = samples.positives.iter().map(|&i| (i, true)).chain(samples.negatives.iter().map(|&i| (i, false)));
    let sep_n = (np + nn) as f64;
    for (i, positive) in all {
        let x = frames.column(i);
        let a = &state.visual * x;
        let na = a.norm();
        let c = if na == 0.0 || nb == 0.0 { 0.0 } else { a.dot(&b) / (na * nb) };
        let dl_dc = if positive {
            rep += 2.0 - 2.0 * c;
            sep += (c - 1.0) * (c - 1.0);
            -2.0 * beta / np as f64 + 2.0 * (c - 1.0) / sep_n
        } else {
            sep += c * c;
            2.0 * c / sep_n
        };
        if let Some(gv) = grad_v.as_mut() {
            if na > 0.0 && nb > 0.0 {
                let dc_da = (&b / nb - &a * (c / na)) / na;
                gv.ger(dl_dc, &dc_da, &x, 1.0);
                grad_b += (&a / na - &b * (c / nb)) * (dl_dc / nb);
            }
        }
    }
    let representation = rep / np as f64;
    let separation = sep / sep_n;
    let value = LossValue {
        total: beta * representation + separation,
        representation,
        separation,
    };
    let grads = grad_v.map(|visual| Gradients {
        visual,
        text: &grad_b * y.transpose(),
    });
    Ok((value, grads))
}

pub fn loss(state: &AdapterState, frames: &DMatrix<f64>, prototype: &[f64], samples: &SampleSets, beta: f64) -> Result<LossValue> {
    Ok(evaluate(state, frames, prototype, samples, beta, false)?.0)
}

pub fn loss_and_grad(
    state: &AdapterState,
    frames: &DMatrix<f64>,
    prototype: &[f64],
    samples: &SampleSets,
    beta: f64,
) -> Result<(LossValue, Gradients)> {
    let (v, g) = evaluate(state, frames, prototype, samples, beta, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn adam_update(params: &mut [f64], grads: &[f64], m: &mut Moments, t: i32, cfg: &TtaConfig) {
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let m1 = m.first.as_mut_slice();
    let m2 = m.second.as_mut_slice();
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= cfg.learning_rate * cfg.weight_decay * params[i];
        m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g;
        m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = m1[i] / bc1;
        let v_hat = m2[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// One Adam step with decoupled weight decay.
pub fn adam_step(state: &mut AdapterState, grads: &Gradients, cfg: &TtaConfig) {
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    adam_update(state.visual.as_mut_slice(), grads.visual.as_slice(), &mut state.visual_moments, t, cfg);
    adam_update(state.text.as_mut_slice(), grads.text.as_slice(), &mut state.text_moments, t, cfg);
}

/// Oracle substitutions for bounding achievable accuracy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OracleMode {
    /// Use this class instead of the pseudo-label.
    pub label: Option<String>,
    /// Draw positives from these `[begin, end)` second intervals and negatives
    /// from the remaining frames.
    pub foreground: Option<Vec<(f64, f64)>>,
}

impl OracleMode {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn perfect_label(label: impl Into<String>) -> Self {
        Self {
            label: Some(label.into()),
            foreground: None,
        }
    }

    pub fn perfect_samples(foreground: Vec<(f64, f64)>) -> Self {
        Self {
            label: None,
            foreground: Some(foreground),
        }
    }

    pub fn both(label: impl Into<String>, foreground: Vec<(f64, f64)>) -> Self {
        Self {
            label: Some(label.into()),
            foreground: Some(foreground),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_r")]
    pub representation: f64,
    #[serde(rename = "L_s")]
    pub separation: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub detections: Vec<Detection>,
    /// Loss on each step's own draw, before that step's update.
    pub trajectory: Vec<LossRecord>,
    /// Loss on the first step's draw before adaptation and after the last step.
    pub initial_loss: Option<LossValue>,
    pub final_loss: Option<LossValue>,
}

/// Per-video RNG seed from the run seed and the video id.
pub fn video_seed(seed: u64, video_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(video_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Adapts a fresh identity state to one video, then detects.
pub fn adapt_and_detect(
    features: &FeatureMatrix,
    prompts: &PromptBank,
    pipeline_cfg: &PipelineConfig,
    tta_cfg: &TtaConfig,
    oracle: &OracleMode,
) -> Result<AdaptOutcome> {
    let mut state = AdapterState::identity(features.dim());
    adapt_video(&mut state, features, prompts, pipeline_cfg, tta_cfg, oracle)
}

/// Like [`adapt_and_detect`] but continues from `state`, for runs that carry
/// the adapter across videos.
pub fn adapt_video(
    state: &mut AdapterState,
    features: &FeatureMatrix,
    prompts: &PromptBank,
    pipeline_cfg: &PipelineConfig,
    tta_cfg: &TtaConfig,
    oracle: &OracleMode,
) -> Result<AdaptOutcome> {
    pipeline_cfg.validate()?;
    tta_cfg.validate()?;
    let frames = features.frames();
    if state.dim() != features.dim() {
        return Err(Error::Shape(format!(
            "adapter dimension {} does not match features {}",
            state.dim(),
            features.dim()
        )));
    }
    let mode = match &oracle.label {
        Some(l) => LabelMode::Perfect(l.clone()),
        None => LabelMode::Pseudo,
    };
    let label = pipeline::resolve_label(&frames, prompts, &mode)?;
    let prototype = prompts.row_f64(label);

    let truth = oracle.foreground.as_ref().map(|intervals| {
        let mut fg = vec![false; features.frame_count()];
        for &(b, e) in intervals {
            for t in features.frames_in(b, e) {
                fg[t] = true;
            }
        }
        let foreground: Vec<usize> = (0..fg.len()).filter(|&t| fg[t]).collect();
        let background: Vec<usize> = (0..fg.len()).filter(|&t| !fg[t]).collect();
        (foreground, background)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(tta_cfg.seed, features.video_id()));
    let mut trajectory = Vec::with_capacity(tta_cfg.steps);
    let mut reference: Option<(SampleSets, LossValue)> = None;

    for step in 0..tta_cfg.steps {
        let samples = match &truth {
            Some((fg, bg)) => sample_from_truth(fg, bg, tta_cfg.k, &mut rng)?,
            None => {
                let (proj_frames, proj_proto) = project(state, &frames, &prototype)?;
                let trace = pipeline::score_frames(&proj_frames, &proj_proto, pipeline_cfg)?;
                sample(&trace, tta_cfg, &mut rng)?
            }
        };
        let (value, grads) = loss_and_grad(state, &frames, &prototype, &samples, tta_cfg.beta)?;
        trajectory.push(LossRecord {
            step,
            representation: value.representation,
            separation: value.separation,
            total: value.total,
        });
        if reference.is_none() {
            reference = Some((samples, value));
        }
        adam_step(state, &grads, tta_cfg);
    }

    let (proj_frames, proj_proto) = project(state, &frames, &prototype)?;
    let (detections, _) = pipeline::detect_frames(
        &proj_frames,
        &proj_proto,
        &VideoContext {
            video_id: features.video_id(),
            label: &prompts.class_names()[label],
            fps: features.fps(),
        },
        pipeline_cfg,
    )?;

    let (initial_loss, final_loss) = match reference {
        Some((samples, initial)) => (
            Some(initial),
            Some(loss(state, &frames, &prototype, &samples, tta_cfg.beta)?),
        ),
        None => (None, None),
    };
    Ok(AdaptOutcome {
        detections,
        trajectory,
        initial_loss,
        final_loss,
    })
}
