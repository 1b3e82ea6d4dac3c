use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Detection;
use crate::error::{Error, Result};

fn parse_with_path<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// A ground-truth action instance, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub label: String,
    pub begin: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoAnnotations {
    pub duration: f64,
    pub instances: Vec<GroundTruth>,
}

/// Ground truth for a corpus, keyed by video id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub version: String,
    pub classes: Vec<String>,
    pub videos: BTreeMap<String, VideoAnnotations>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    #[serde(default)]
    version: String,
    #[serde(default)]
    database: BTreeMap<String, VideoEntry>,
    #[serde(default)]
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VideoEntry {
    duration: f64,
    #[serde(default)]
    annotations: Vec<InstanceEntry>,
}

#[derive(Serialize, Deserialize)]
struct InstanceEntry {
    label: String,
    segment: [f64; 2],
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        for (vid, video) in &self.videos {
            if !(video.duration.is_finite() && video.duration >= 0.0) {
                return Err(Error::Parse {
                    path: format!("database.{vid}.duration"),
                    message: format!("duration must be non-negative, got {}", video.duration),
                });
            }
            for (i, gt) in video.instances.iter().enumerate() {
                let path = format!("database.{vid}.annotations[{i}]");
                if !(gt.begin >= 0.0 && gt.begin < gt.end && gt.end <= video.duration) {
                    return Err(Error::Parse {
                        path: format!("{path}.segment"),
                        message: format!(
                            "segment [{}, {}] must satisfy 0 <= begin < end <= duration {}",
                            gt.begin, gt.end, video.duration
                        ),
                    });
                }
                if !self.classes.contains(&gt.label) {
                    return Err(Error::Parse {
                        path: format!("{path}.label"),
                        message: format!("label {:?} is not in the class list", gt.label),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.videos.values().map(|v| v.instances.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let file = AnnotationFile {
            version: self.version.clone(),
            database: self
                .videos
                .iter()
                .map(|(vid, v)| {
                    let entry = VideoEntry {
                        duration: v.duration,
                        annotations: v
                            .instances
                            .iter()
                            .map(|gt| InstanceEntry {
                                label: gt.label.clone(),
                                segment: [gt.begin, gt.end],
                            })
                            .collect(),
                    };
                    (vid.clone(), entry)
                })
                .collect(),
            classes: self.classes.clone(),
        };
        serde_json::to_vec_pretty(&file).expect("annotations serialize")
    }
}

pub fn parse_annotations(bytes: &[u8]) -> Result<AnnotationSet> {
    let file: AnnotationFile = parse_with_path(bytes)?;
    let set = AnnotationSet {
        version: file.version,
        classes: file.classes,
        videos: file
            .database
            .into_iter()
            .map(|(vid, entry)| {
                let instances = entry
                    .annotations
                    .into_iter()
                    .map(|a| GroundTruth {
                        label: a.label,
                        begin: a.segment[0],
                        end: a.segment[1],
                    })
                    .collect();
                (
                    vid,
                    VideoAnnotations {
                        duration: entry.duration,
                        instances,
                    },
                )
            })
            .collect(),
    };
    set.validate()?;
    Ok(set)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    parse_annotations(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    results: BTreeMap<String, Vec<PredictionEntry>>,
}

#[derive(Serialize, Deserialize)]
struct PredictionEntry {
    label: String,
    score: f64,
    segment: [f64; 2],
}

/// Serializes detections grouped by video id; order within a video is kept.
pub fn predictions_to_bytes(detections: &[Detection]) -> Vec<u8> {
    let mut results: BTreeMap<String, Vec<PredictionEntry>> = BTreeMap::new();
    for d in detections {
        results.entry(d.video_id.clone()).or_default().push(PredictionEntry {
            label: d.label.clone(),
            score: d.confidence,
            segment: [d.begin, d.end],
        });
    }
    let mut bytes = serde_json::to_vec_pretty(&PredictionFile { results }).expect("predictions serialize");
    bytes.push(b'\n');
    bytes
}

pub fn write_predictions(detections: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_bytes(detections)).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(bytes: &[u8]) -> Result<Vec<Detection>> {
    let file: PredictionFile = parse_with_path(bytes)?;
    let mut out = Vec::new();
    for (vid, entries) in file.results {
        for (i, p) in entries.into_iter().enumerate() {
            if p.segment[0].partial_cmp(&p.segment[1]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Parse {
                    path: format!("results.{vid}[{i}].segment"),
                    message: format!("begin {} must be below end {}", p.segment[0], p.segment[1]),
                });
            }
            out.push(Detection {
                video_id: vid.clone(),
                label: p.label,
                begin: p.segment[0],
                end: p.segment[1],
                confidence: p.score,
            });
        }
    }
    Ok(out)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_predictions(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
