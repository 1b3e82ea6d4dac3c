//! On-disk formats and the in-memory data model.
//!
//! Frame embeddings live in `.vfeat` containers and class-prompt embeddings
//! in `.tfeat` containers (see [`container`] for the byte layout). Ground truth
//! and predictions are JSON in the usual untrimmed-video benchmark shape.
//!
//! Every row of a [`FeatureMatrix`] or [`PromptBank`] is unit L2 norm once
//! constructed, so dot products downstream are cosines.

mod container;
mod json;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use json::{
    load_annotations, parse_annotations, parse_predictions, predictions_to_bytes, read_predictions,
    save_annotations, write_predictions, AnnotationSet, GroundTruth, VideoAnnotations,
};

pub const FEATURE_MAGIC: &[u8; 4] = b"VFE1";
pub const PROMPT_MAGIC: &[u8; 4] = b"TFE1";

/// Placeholder substituted with the class name in a prompt template.
pub const CLASS_PLACEHOLDER: &str = "{CLS}";

/// Rows whose norm is already this close to one are stored untouched, which
/// makes normalization idempotent at the bit level.
const UNIT_NORM_SLACK: f64 = 1e-6;

fn normalize_rows(data: &mut [f32], dim: usize, what: &str) -> Result<()> {
    for (t, row) in data.chunks_exact_mut(dim).enumerate() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Data(format!("{what} row {t} has zero norm")));
        }
        if (norm - 1.0).abs() > UNIT_NORM_SLACK {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
    Ok(())
}

fn check_finite(data: &[f32], dim: usize, what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{what} row {} column {} is not finite",
            i / dim,
            i % dim
        )));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `T x D` matrix of frame embeddings for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    video_id: String,
    fps: f64,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct FeatureTrailer {
    video_id: String,
    fps: f64,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl FeatureMatrix {
    /// Validates and L2-normalizes `data` (row-major, `rows * dim` values).
    pub fn new(video_id: impl Into<String>, fps: f64, rows: usize, dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Data("empty feature matrix".into()));
        }
        if dim == 0 {
            return Err(Error::Data("zero embedding dimension".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "expected {rows}x{dim} = {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        check_finite(&data, dim, "feature")?;
        normalize_rows(&mut data, dim, "feature")?;
        Ok(Self {
            video_id: video_id.into(),
            fps,
            rows,
            dim,
            data,
            extra: BTreeMap::new(),
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Extra trailer fields written by other tools, preserved on save.
    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.extra
    }

    /// Frames as columns of a `D x T` matrix in f64.
    pub fn frames(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(self.dim, self.rows, self.data.iter().map(|&v| f64::from(v)))
    }

    pub fn duration(&self) -> f64 {
        self.rows as f64 / self.fps
    }

    /// Time span `[begin, end)` in seconds covered by inclusive frames `begin..=end`.
    pub fn frames_to_seconds(&self, begin: usize, end: usize) -> (f64, f64) {
        (begin as f64 / self.fps, (end + 1) as f64 / self.fps)
    }

    /// Frames whose centre lies in `[begin, end)` seconds.
    pub fn frames_in(&self, begin: f64, end: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.rows).filter(move |&t| {
            let centre = (t as f64 + 0.5) / self.fps;
            centre >= begin && centre < end
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let trailer = serde_json::to_vec(&FeatureTrailer {
            video_id: self.video_id.clone(),
            fps: self.fps,
            extra: self.extra.clone(),
        })
        .expect("trailer serializes");
        container::encode(FEATURE_MAGIC, self.rows, self.dim, &self.data, &trailer)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = container::decode(FEATURE_MAGIC, bytes, "empty feature matrix")?;
        let trailer: FeatureTrailer = serde_json::from_slice(&raw.trailer)
            .map_err(|e| Error::Format(format!("feature trailer: {e}")))?;
        let mut m = Self::new(trailer.video_id, trailer.fps, raw.rows, raw.dim, raw.data)?;
        m.extra = trailer.extra;
        Ok(m)
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&read_file(path.as_ref())?)
}

pub fn save_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &m.to_bytes())
}

/// `C x D` text embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    class_names: Vec<String>,
    prompt_template: String,
    dim: usize,
    data: Vec<f32>,
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct PromptTrailer {
    class_names: Vec<String>,
    prompt_template: String,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl PromptBank {
    pub fn new(class_names: Vec<String>, prompt_template: impl Into<String>, dim: usize, mut data: Vec<f32>) -> Result<Self> {
        let prompt_template = prompt_template.into();
        if class_names.is_empty() {
            return Err(Error::Data("prompt bank has no classes".into()));
        }
        if dim == 0 {
            return Err(Error::Data("zero embedding dimension".into()));
        }
        if data.len() != class_names.len() * dim {
            return Err(Error::Shape(format!(
                "{} class names but {} rows of dimension {dim}",
                class_names.len(),
                data.len() as f64 / dim as f64
            )));
        }
        let placeholders = prompt_template.matches(CLASS_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(Error::Data(format!(
                "prompt template {prompt_template:?} must contain exactly one {CLASS_PLACEHOLDER}, found {placeholders}"
            )));
        }
        check_finite(&data, dim, "prompt")?;
        normalize_rows(&mut data, dim, "prompt")?;
        Ok(Self {
            class_names,
            prompt_template,
            dim,
            data,
            extra: BTreeMap::new(),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn template(&self) -> &str {
        &self.prompt_template
    }

    pub fn prompt_for(&self, class: usize) -> String {
        self.prompt_template
            .replace(CLASS_PLACEHOLDER, &self.class_names[class])
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn row_f64(&self, c: usize) -> Vec<f64> {
        self.row(c).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let trailer = serde_json::to_vec(&PromptTrailer {
            class_names: self.class_names.clone(),
            prompt_template: self.prompt_template.clone(),
            extra: self.extra.clone(),
        })
        .expect("trailer serializes");
        container::encode(PROMPT_MAGIC, self.class_names.len(), self.dim, &self.data, &trailer)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = container::decode(PROMPT_MAGIC, bytes, "empty prompt bank")?;
        let trailer: PromptTrailer = serde_json::from_slice(&raw.trailer)
            .map_err(|e| Error::Format(format!("prompt trailer: {e}")))?;
        if trailer.class_names.len() != raw.rows {
            return Err(Error::Data(format!(
                "header has {} rows but trailer names {} classes",
                raw.rows,
                trailer.class_names.len()
            )));
        }
        let mut bank = Self::new(trailer.class_names, trailer.prompt_template, raw.dim, raw.data)?;
        bank.extra = trailer.extra;
        Ok(bank)
    }
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptBank> {
    PromptBank::from_bytes(&read_file(path.as_ref())?)
}

pub fn save_prompts(bank: &PromptBank, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &bank.to_bytes())
}

/// One scored, labelled temporal segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub label: String,
    /// Seconds.
    pub begin: f64,
    pub end: f64,
    pub confidence: f64,
}
