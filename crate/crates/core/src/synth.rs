//! Seeded synthetic corpora with exact ground truth.
//!
//! Class prototypes are orthonormal (thin QR of a Gaussian matrix) and double
//! as the prompt bank. Each video carries one action class: planted segments
//! are the class prototype plus Gaussian noise, background frames follow the
//! configured [`BackgroundMode`]. Every frame is renormalized after noise is
//! added. All randomness comes from one ChaCha8 stream, so a seed fixes the
//! corpus byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{AnnotationSet, FeatureMatrix, GroundTruth, PromptBank, VideoAnnotations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Unit vectors orthogonal to every prototype.
    Orthogonal,
    /// Uniform random unit vectors.
    RandomUnit,
    /// Runs of other classes' prototypes under heavier noise.
    DistractorClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub classes: usize,
    pub dim: usize,
    /// Inclusive frame-count range per video.
    pub frames: (usize, usize),
    /// Inclusive number of planted segments per video.
    pub segments: (usize, usize),
    /// Inclusive segment length range, in frames.
    pub segment_len: (usize, usize),
    /// Minimum background frames before, between and after segments.
    pub min_gap: usize,
    pub fps: f64,
    pub noise_sigma: f64,
    /// Background noise is `background_noise_scale * noise_sigma`.
    pub background_noise_scale: f64,
    pub background: BackgroundMode,
    /// Longest run of one distractor class in `DistractorClass` mode.
    pub distractor_run: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Easy corpus: light noise, orthogonal background, long well-separated segments.
    pub fn clean() -> Self {
        Self {
            videos: 50,
            classes: 10,
            dim: 64,
            frames: (960, 1280),
            segments: (1, 3),
            segment_len: (80, 200),
            min_gap: 80,
            fps: 30.0,
            noise_sigma: 0.05,
            background_noise_scale: 1.0,
            background: BackgroundMode::Orthogonal,
            distractor_run: 40,
            seed: 0,
        }
    }

    /// Hard corpus: heavy noise, distractor background, short and closely
    /// spaced segments.
    pub fn hard() -> Self {
        Self {
            videos: 50,
            classes: 10,
            dim: 64,
            frames: (720, 1000),
            segments: (2, 5),
            segment_len: (20, 120),
            min_gap: 20,
            fps: 30.0,
            noise_sigma: 0.3,
            background_noise_scale: 2.0,
            background: BackgroundMode::DistractorClass,
            distractor_run: 40,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (usize, usize), min: usize| {
            if lo < min || lo > hi {
                Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy {min} <= low <= high")))
            } else {
                Ok(())
            }
        };
        if self.videos == 0 || self.classes == 0 || self.dim == 0 {
            return Err(Error::Config("videos, classes and dim must be positive".into()));
        }
        range("frames", self.frames, 1)?;
        range("segments", self.segments, 1)?;
        range("segment length", self.segment_len, 1)?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.background_noise_scale.is_finite() && self.background_noise_scale >= 0.0) {
            return Err(Error::Config("background_noise_scale must be >= 0".into()));
        }
        if self.dim < self.classes {
            return Err(Error::Config(format!("dim {} is below class count {}", self.dim, self.classes)));
        }
        match self.background {
            BackgroundMode::Orthogonal if self.dim == self.classes => {
                return Err(Error::Config("orthogonal background needs dim > classes".into()));
            }
            BackgroundMode::DistractorClass if self.classes < 2 => {
                return Err(Error::Config("distractor background needs at least two classes".into()));
            }
            BackgroundMode::DistractorClass if self.distractor_run == 0 => {
                return Err(Error::Config("distractor_run must be positive".into()));
            }
            _ => {}
        }
        let worst = self.segments.1 * self.segment_len.1 + (self.segments.1 + 1) * self.min_gap;
        if worst > self.frames.0 {
            return Err(Error::Config(format!(
                "infeasible packing: up to {} segments of {} frames with gaps of {} need {worst} frames, videos may have {}",
                self.segments.1, self.segment_len.1, self.min_gap, self.frames.0
            )));
        }
        Ok(())
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub prompts: PromptBank,
    pub videos: Vec<FeatureMatrix>,
    pub annotations: AnnotationSet,
    /// Planted frame segments `(begin, end)` inclusive, per video id.
    pub planted: BTreeMap<String, Vec<(usize, usize)>>,
}

pub const PROMPT_TEMPLATE: &str = "a video of action {CLS}";

pub fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

pub fn video_name(v: usize) -> String {
    format!("video_{v:04}")
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn noisy_unit(base: &DVector<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut v = base.clone();
    if sigma > 0.0 {
        v += gaussian_vector(rng, base.len()) * sigma;
    }
    let n = v.norm();
    if n == 0.0 {
        // Measure-zero event; fall back to the base direction.
        base.clone()
    } else {
        v / n
    }
}

fn orthogonal_unit(q: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let g = gaussian_vector(rng, q.nrows());
        let r = &g - q * (q.transpose() * &g);
        let n = r.norm();
        if n > 1e-8 {
            return r / n;
        }
    }
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let g = gaussian_vector(rng, d);
        let n = g.norm();
        if n > 1e-8 {
            return g / n;
        }
    }
}

/// Splits `slack` extra frames over `parts` gaps uniformly at random.
fn split_slack(slack: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(slack - prev);
    out
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, c) = (cfg.dim, cfg.classes);

    let gauss = DMatrix::from_fn(d, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = gauss.qr().q();
    let protos: Vec<DVector<f64>> = (0..c).map(|k| q.column(k).into_owned()).collect();
    let names: Vec<String> = (0..c).map(class_name).collect();
    let mut prompt_data = Vec::with_capacity(c * d);
    for p in &protos {
        prompt_data.extend(p.iter().map(|&x| x as f32));
    }
    let prompts = PromptBank::new(names.clone(), PROMPT_TEMPLATE, d, prompt_data)?;

    let bg_sigma = cfg.noise_sigma * cfg.background_noise_scale;
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut annotations = AnnotationSet {
        version: "synthetic".into(),
        classes: names.clone(),
        videos: BTreeMap::new(),
    };
    let mut planted = BTreeMap::new();

    for v in 0..cfg.videos {
        let id = video_name(v);
        let t = rng.random_range(cfg.frames.0..=cfg.frames.1);
        let n = rng.random_range(cfg.segments.0..=cfg.segments.1);
        let label = rng.random_range(0..c);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(cfg.segment_len.0..=cfg.segment_len.1)).collect();
        let used = lens.iter().sum::<usize>() + (n + 1) * cfg.min_gap;
        let gaps = split_slack(t - used, n + 1, &mut rng);

        let mut segs = Vec::with_capacity(n);
        let mut cursor = 0;
        for (i, len) in lens.iter().enumerate() {
            cursor += cfg.min_gap + gaps[i];
            segs.push((cursor, cursor + len - 1));
            cursor += len;
        }

        let mut foreground = vec![false; t];
        for &(b, e) in &segs {
            foreground[b..=e].iter_mut().for_each(|f| *f = true);
        }

        let mut data = Vec::with_capacity(t * d);
        let mut distractor = 0;
        let mut run_left = 0;
        for &fg in &foreground {
            let frame = if fg {
                run_left = 0;
                noisy_unit(&protos[label], cfg.noise_sigma, &mut rng)
            } else {
                match cfg.background {
                    BackgroundMode::Orthogonal => noisy_unit(&orthogonal_unit(&q, &mut rng), bg_sigma, &mut rng),
                    BackgroundMode::RandomUnit => noisy_unit(&random_unit(d, &mut rng), bg_sigma, &mut rng),
                    BackgroundMode::DistractorClass => {
                        if run_left == 0 {
                            let other = rng.random_range(0..c - 1);
                            distractor = if other >= label { other + 1 } else { other };
                            run_left = rng.random_range(1..=cfg.distractor_run);
                        }
                        run_left -= 1;
                        noisy_unit(&protos[distractor], bg_sigma, &mut rng)
                    }
                }
            };
            data.extend(frame.iter().map(|&x| x as f32));
        }
        let matrix = FeatureMatrix::new(id.clone(), cfg.fps, t, d, data)?;

        let instances = segs
            .iter()
            .map(|&(b, e)| {
                let (begin, end) = matrix.frames_to_seconds(b, e);
                GroundTruth {
                    label: names[label].clone(),
                    begin,
                    end,
                }
            })
            .collect();
        annotations.videos.insert(
            id.clone(),
            VideoAnnotations {
                duration: matrix.duration(),
                instances,
            },
        );
        planted.insert(id, segs);
        videos.push(matrix);
    }

    Ok(SynthCorpus {
        prompts,
        videos,
        annotations,
        planted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROMPTS_FILE: &str = "prompts.tfeat";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEATURES_DIR: &str = "features";

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut Vec<ManifestEntry>) -> Result<()> {
    let path = root.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.push(ManifestEntry {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
    });
    Ok(())
}

/// Writes a corpus as `features/<id>.vfeat`, `prompts.tfeat`,
/// `annotations.json` and a checksummed `manifest.json`.
pub fn write_corpus(corpus: &SynthCorpus, cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthManifest> {
    let root = out_dir.as_ref();
    let features = root.join(FEATURES_DIR);
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut files = Vec::new();
    for m in &corpus.videos {
        write_file(root, &format!("{FEATURES_DIR}/{}.vfeat", m.video_id()), &m.to_bytes(), &mut files)?;
    }
    write_file(root, PROMPTS_FILE, &corpus.prompts.to_bytes(), &mut files)?;
    write_file(root, ANNOTATIONS_FILE, &corpus.annotations.to_bytes(), &mut files)?;
    let manifest = SynthManifest {
        config: cfg.clone(),
        files,
    };
    let path = root.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthManifest> {
    let corpus = generate_corpus(cfg)?;
    write_corpus(&corpus, cfg, out_dir)
}
