//! Ten-frame sequence construction, dataset manifests and loading.

pub mod pnm;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmark::{read_landmark_csv, LandmarkFrame};
use crate::tensor::Tensor;

pub use synth::{synth_dataset, synth_videos, write_synth, SynthSpec, SynthVideo};

/// Frames per sequence.
pub const SEQUENCE_LEN: usize = 10;

/// One training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[10, H, W, C]`, values in `[0, 1]`.
    pub clip: Tensor<f32>,
    /// One landmark frame per clip frame.
    pub landmarks: Vec<LandmarkFrame>,
    pub label: usize,
    pub subject_id: String,
    pub database_id: String,
}

impl SequenceSample {
    pub fn new(
        clip: Tensor<f32>,
        landmarks: Vec<LandmarkFrame>,
        label: usize,
        subject_id: impl Into<String>,
        database_id: impl Into<String>,
    ) -> Result<Self> {
        if clip.rank() != 4 || clip.shape()[0] != SEQUENCE_LEN {
            return Err(Error::Data(format!(
                "clip must be [{SEQUENCE_LEN}, H, W, C], got {:?}",
                clip.shape()
            )));
        }
        if landmarks.len() != SEQUENCE_LEN {
            return Err(Error::Data(format!(
                "expected {SEQUENCE_LEN} landmark frames, got {}",
                landmarks.len()
            )));
        }
        let subject_id = subject_id.into();
        if subject_id.is_empty() {
            return Err(Error::Data("empty subject id".into()));
        }
        Ok(SequenceSample {
            clip,
            landmarks,
            label,
            subject_id,
            database_id: database_id.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Windowing {
    /// Consecutive non-overlapping windows; a trailing partial window is dropped.
    #[default]
    Sliding,
    /// Only the final ten frames.
    LastTen,
}

/// Frame index windows of length [`SEQUENCE_LEN`] for a video of
/// `frame_count` frames.
pub fn window_video(video: &str, frame_count: usize, rule: Windowing) -> Result<Vec<Range<usize>>> {
    if frame_count < SEQUENCE_LEN {
        return Err(Error::Data(format!(
            "video {video}: {frame_count} frames, need at least {SEQUENCE_LEN}"
        )));
    }
    Ok(match rule {
        Windowing::Sliding => (0..frame_count / SEQUENCE_LEN)
            .map(|i| i * SEQUENCE_LEN..(i + 1) * SEQUENCE_LEN)
            .collect(),
        Windowing::LastTen => vec![frame_count - SEQUENCE_LEN..frame_count],
    })
}

/// One video entry of a manifest. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub frames_dir: PathBuf,
    pub landmarks_csv: PathBuf,
    /// Class name, a key of [`DatasetManifest::labels`].
    pub label: String,
    pub subject: String,
    pub database: String,
    #[serde(default)]
    pub windowing: Windowing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Class name to id.
    pub labels: BTreeMap<String, usize>,
    pub videos: Vec<VideoRecord>,
    /// Channels of the loaded clips; frames are converted as needed.
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate().map_err(|msg| Error::format(path, msg))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let ids: BTreeSet<usize> = self.labels.values().copied().collect();
        if ids.len() != self.labels.len() {
            return Err("duplicate label ids".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        for (i, v) in self.videos.iter().enumerate() {
            if v.subject.is_empty() {
                return Err(format!("video {i}: empty subject"));
            }
            if !self.labels.contains_key(&v.label) {
                return Err(format!("video {i}: unknown label {:?}", v.label));
            }
        }
        Ok(())
    }

    /// Smallest class count covering every label id.
    pub fn num_classes(&self) -> usize {
        self.labels.values().max().map_or(0, |m| m + 1)
    }
}

/// Samples plus the label map they were drawn with.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub labels: BTreeMap<String, usize>,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn class_name(&self, id: usize) -> Option<&str> {
        self.labels.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn load_video(
    root: &Path,
    rec: &VideoRecord,
    label: usize,
    size: (usize, usize),
    channels: usize,
) -> Result<Vec<SequenceSample>> {
    let dir = root.join(&rec.frames_dir);
    let files = frame_files(&dir)?;
    let name = dir.display().to_string();
    let windows = window_video(&name, files.len(), rec.windowing)?;

    let first = pnm::read_pnm(&files[0])?;
    let source = (first.height, first.width);
    let csv = root.join(&rec.landmarks_csv);
    let rows = read_landmark_csv(&csv, source)?;
    if rows.len() != files.len() {
        return Err(Error::Data(format!(
            "video {name}: {} frames but {} landmark rows in {}",
            files.len(),
            rows.len(),
            csv.display()
        )));
    }
    for (expect, (idx, _)) in rows.iter().enumerate() {
        if *idx != expect {
            return Err(Error::Data(format!(
                "video {name}: landmark frame index {idx} where {expect} was expected in {}",
                csv.display()
            )));
        }
    }
    let landmarks: Vec<LandmarkFrame> = rows.into_iter().map(|(_, f)| f).collect();

    let needed: BTreeSet<usize> = windows.iter().flat_map(Clone::clone).collect();
    let mut frames = BTreeMap::new();
    for &i in &needed {
        let img = if i == 0 { first.clone() } else { pnm::read_pnm(&files[i])? };
        if (img.height, img.width) != source {
            return Err(Error::Data(format!(
                "video {name}: frame {i} is {}x{}, first frame is {}x{}",
                img.height, img.width, source.0, source.1
            )));
        }
        frames.insert(i, img.with_channels(channels)?.resize(size.0, size.1));
    }

    windows
        .into_iter()
        .map(|w| {
            let mut data = Vec::with_capacity(SEQUENCE_LEN * size.0 * size.1 * channels);
            for i in w.clone() {
                data.extend_from_slice(&frames[&i].data);
            }
            let clip = Tensor::new(&[SEQUENCE_LEN, size.0, size.1, channels], data)?;
            SequenceSample::new(clip, landmarks[w].to_vec(), label, &rec.subject, &rec.database)
        })
        .collect()
}

/// Loads every video of a manifest, resized to `size = (H, W)`. Sample
/// order follows manifest order, then window order within a video.
pub fn load_dataset(manifest_path: &Path, size: (usize, usize)) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let per_video = manifest
        .videos
        .par_iter()
        .map(|rec| load_video(root, rec, manifest.labels[&rec.label], size, manifest.channels))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        labels: manifest.labels,
        samples: per_video.into_iter().flatten().collect(),
    })
}
