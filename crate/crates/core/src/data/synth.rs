//! Synthetic expression stand-in: a bright blob drifting in a class-specific
//! direction, with landmarks ringed around its centre.
//!
//! Subjects differ in blob size, brightness and resting position. Optional
//! distractor blobs move in random directions and carry no landmarks.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::{encode_pnm, Image};
use super::{window_video, DatasetManifest, SequenceSample, VideoRecord, Windowing, SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::landmark::{write_landmark_csv, LandmarkFrame, NUM_LANDMARKS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    pub subjects: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Untracked blobs per video.
    pub distractors: usize,
    /// Amplitude of uniform per-pixel background noise.
    pub noise: f64,
    pub seed: u64,
    pub database: String,
    pub windowing: Windowing,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            videos_per_class: 30,
            subjects: 10,
            frames: SEQUENCE_LEN,
            height: 64,
            width: 64,
            distractors: 0,
            noise: 0.1,
            seed: 0,
            database: "synth".into(),
            windowing: Windowing::LastTen,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub frames: Vec<Image>,
    pub landmarks: Vec<LandmarkFrame>,
    pub label: usize,
    pub subject: String,
}

struct Blob {
    start: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    brightness: f64,
}

impl Blob {
    fn centre(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        )
    }
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 32 | index);
    rng
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("synthetic data needs at least two classes"));
        }
        if self.videos_per_class == 0 || self.subjects == 0 {
            return Err(Error::contract("need at least one video per class and one subject"));
        }
        if self.frames < SEQUENCE_LEN {
            return Err(Error::contract(format!("videos need at least {SEQUENCE_LEN} frames")));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::contract("frames must be at least 8x8"));
        }
        Ok(())
    }

    pub fn subject_name(&self, s: usize) -> String {
        format!("{}_s{s:02}", self.database)
    }

    fn video(&self, class: usize, v: usize, index: usize) -> Result<SynthVideo> {
        let (h, w) = (self.height as f64, self.width as f64);
        let side = h.min(w);
        let subject = v % self.subjects;
        let mut srng = stream(self.seed, 1, subject as u64);
        let radius = side * srng.random_range(0.09..0.13);
        let brightness = srng.random_range(0.65..1.0);
        let rest = (
            w / 2.0 + side * srng.random_range(-0.08..0.08),
            h / 2.0 + side * srng.random_range(-0.08..0.08),
        );

        let mut rng = stream(self.seed, 2, index as u64);
        let angle = TAU * class as f64 / self.classes as f64 + rng.random_range(-0.15..0.15);
        let path = side * 0.35 * rng.random_range(0.85..1.15);
        let steps = (self.frames - 1) as f64;
        let dir = (angle.cos(), angle.sin());
        let main = Blob {
            start: (
                rest.0 - dir.0 * path / 2.0 + side * rng.random_range(-0.04..0.04),
                rest.1 - dir.1 * path / 2.0 + side * rng.random_range(-0.04..0.04),
            ),
            velocity: (dir.0 * path / steps, dir.1 * path / steps),
            radius,
            brightness,
        };
        let distractors: Vec<Blob> = (0..self.distractors)
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                let p = side * 0.35 * rng.random_range(0.85..1.15);
                Blob {
                    start: (rng.random_range(0.0..w), rng.random_range(0.0..h)),
                    velocity: (a.cos() * p / steps, a.sin() * p / steps),
                    radius: side * rng.random_range(0.09..0.13),
                    brightness: rng.random_range(0.65..1.0),
                }
            })
            .collect();

        let mut frames = Vec::with_capacity(self.frames);
        let mut landmarks = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let mut data: Vec<f32> = (0..self.height * self.width)
                .map(|_| (self.noise * rng.random::<f64>()) as f32)
                .collect();
            for blob in std::iter::once(&main).chain(&distractors) {
                let (cx, cy) = blob.centre(t);
                let inv = 1.0 / (2.0 * blob.radius * blob.radius);
                for (i, px) in data.iter_mut().enumerate() {
                    let (y, x) = ((i / self.width) as f64, (i % self.width) as f64);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    let v = blob.brightness * (-d2 * inv).exp();
                    *px = px.max(v as f32);
                }
            }
            frames.push(Image {
                height: self.height,
                width: self.width,
                channels: 1,
                data: data.into_iter().map(|v| v.min(1.0)).collect(),
            });

            let (cx, cy) = main.centre(t);
            let points = (0..NUM_LANDMARKS)
                .map(|i| {
                    let a = TAU * i as f64 / NUM_LANDMARKS as f64;
                    let r = radius * (0.5 + 0.25 * (i % 3) as f64);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            landmarks.push(LandmarkFrame::new(points, (self.height, self.width))?);
        }
        Ok(SynthVideo {
            frames,
            landmarks,
            label: class,
            subject: self.subject_name(subject),
        })
    }
}

/// All videos, class-major. Video `v` of every class belongs to subject
/// `v mod subjects`.
pub fn synth_videos(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.classes * spec.videos_per_class);
    for class in 0..spec.classes {
        for v in 0..spec.videos_per_class {
            out.push(spec.video(class, v, out.len())?);
        }
    }
    Ok(out)
}

/// In-memory samples, windowed per `spec.windowing`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SequenceSample>> {
    let mut samples = Vec::new();
    for (i, video) in synth_videos(spec)?.into_iter().enumerate() {
        for w in window_video(&format!("synthetic video {i}"), video.frames.len(), spec.windowing)? {
            let data: Vec<f32> = video.frames[w.clone()]
                .iter()
                .flat_map(|f| f.data.iter().copied())
                .collect();
            let clip = Tensor::new(&[SEQUENCE_LEN, spec.height, spec.width, 1], data)?;
            samples.push(SequenceSample::new(
                clip,
                video.landmarks[w].to_vec(),
                video.label,
                &video.subject,
                &spec.database,
            )?);
        }
    }
    Ok(samples)
}

pub fn class_name(k: usize) -> String {
    format!("class{k}")
}

/// Writes frames as PGM, landmarks as CSV and a `manifest.json` under
/// `out`. Returns the manifest path.
pub fn write_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let videos = synth_videos(spec)?;
    let mut records = Vec::with_capacity(videos.len());
    for (i, video) in videos.iter().enumerate() {
        let rel = PathBuf::from(format!("videos/v{i:04}"));
        let dir = out.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in video.frames.iter().enumerate() {
            let p = dir.join(format!("frame_{t:04}.pgm"));
            fs::write(&p, encode_pnm(frame)).map_err(|e| Error::io(&p, e))?;
        }
        let csv = PathBuf::from(format!("videos/v{i:04}.csv"));
        write_landmark_csv(&out.join(&csv), &video.landmarks)?;
        records.push(VideoRecord {
            frames_dir: rel,
            landmarks_csv: csv,
            label: class_name(video.label),
            subject: video.subject.clone(),
            database: spec.database.clone(),
            windowing: spec.windowing,
        });
    }
    let manifest = DatasetManifest {
        labels: (0..spec.classes).map(|k| (class_name(k), k)).collect(),
        videos: records,
        channels: 1,
    };
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            videos_per_class: 2,
            subjects: 2,
            height: 24,
            width: 20,
            distractors: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(&small()).unwrap();
        let b = synth_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&SynthSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a[0].clip, c[0].clip);
    }

    #[test]
    fn landmarks_stay_in_frame() {
        let spec = SynthSpec {
            frames: 23,
            windowing: Windowing::Sliding,
            ..small()
        };
        let samples = synth_dataset(&spec).unwrap();
        assert_eq!(samples.len(), 3 * 2 * 2);
        for s in &samples {
            assert_eq!(s.landmarks.len(), SEQUENCE_LEN);
            for f in &s.landmarks {
                assert!(f.points().iter().all(|&(x, y)| (0.0..20.0).contains(&x) && (0.0..24.0).contains(&y)));
            }
        }
    }

    #[test]
    fn subjects_cycle_within_class() {
        let s = synth_dataset(&small()).unwrap();
        let subjects: Vec<&str> = s.iter().map(|x| x.subject_id.as_str()).collect();
        assert_eq!(subjects, ["synth_s00", "synth_s01"].repeat(3));
        assert_eq!(s.iter().map(|x| x.label).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
    }
}
