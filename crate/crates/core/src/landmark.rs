//! Facial-landmark weight maps.
//!
//! Each landmark contributes `1 - slope * d` to the cells of a square window
//! centred on it, `d` being the Manhattan distance in grid cells. Overlapping
//! windows combine by maximum; cells outside every window take the
//! configured background weight.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const NUM_LANDMARKS: usize = 66;

/// 66 landmark points of one frame in source-image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    /// `(x, y)` pairs.
    points: Vec<(f64, f64)>,
    /// `(height, width)` of the source frame.
    source_size: (usize, usize),
}

impl LandmarkFrame {
    /// Validates the point count and clamps every point into the frame.
    pub fn new(points: Vec<(f64, f64)>, source_size: (usize, usize)) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Data(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        let (h, w) = source_size;
        if h == 0 || w == 0 {
            return Err(Error::contract("landmark source size must be positive"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Data("non-finite landmark coordinate".into()));
        }
        let points = points
            .into_iter()
            .map(|(x, y)| (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)))
            .collect();
        Ok(LandmarkFrame {
            points,
            source_size,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }
}

/// Integer raster cell, `(row, col)`.
pub type GridPoint = (usize, usize);

/// Maps source coordinates onto a `target = (rows, cols)` grid, rounding
/// half-up and clamping. Coincident points are kept.
pub fn rescale_landmarks(frame: &LandmarkFrame, target: (usize, usize)) -> Result<Vec<GridPoint>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::contract(format!("target grid {target:?} must be positive")));
    }
    let (sh, sw) = frame.source_size;
    let cell = |v: f64, scale: f64, extent: usize| -> usize {
        let r = (v * scale + 0.5).floor();
        (r.max(0.0) as usize).min(extent - 1)
    };
    Ok(frame
        .points
        .iter()
        .map(|&(x, y)| {
            (
                cell(y, th as f64 / sh as f64, th),
                cell(x, tw as f64 / sw as f64, tw),
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskParams {
    /// Odd side length of the square window around each landmark.
    pub window: usize,
    /// Weight lost per unit of Manhattan distance.
    pub slope: f64,
    /// Weight of cells outside every window.
    pub background: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            window: 7,
            slope: 0.1,
            background: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl WeightMap {
    pub fn resolution(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// 8-bit binary PGM, weight 1.0 → 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(
            self.weights
                .iter()
                .map(|&w| (w.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

pub fn rasterize_weight_map(
    points: &[GridPoint],
    resolution: (usize, usize),
    params: &MaskParams,
) -> Result<WeightMap> {
    if params.window % 2 == 0 {
        return Err(Error::contract(format!(
            "landmark window must be odd, got {}",
            params.window
        )));
    }
    let (rows, cols) = resolution;
    if rows == 0 || cols == 0 {
        return Err(Error::contract("weight map resolution must be positive"));
    }
    let half = (params.window / 2) as isize;
    // NaN marks "outside every window" until the background is filled in.
    let mut weights = vec![f64::NAN; rows * cols];
    for &(r, c) in points {
        if r >= rows || c >= cols {
            return Err(Error::contract(format!(
                "landmark cell ({r}, {c}) outside {rows}x{cols} grid"
            )));
        }
        for dr in -half..=half {
            for dc in -half..=half {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                    continue;
                }
                let d = (dr.abs() + dc.abs()) as f64;
                let w = (1.0 - params.slope * d).max(0.0);
                let cell = &mut weights[rr as usize * cols + cc as usize];
                if cell.is_nan() || w > *cell {
                    *cell = w;
                }
            }
        }
    }
    for w in &mut weights {
        if w.is_nan() {
            *w = params.background;
        }
    }
    Ok(WeightMap {
        rows,
        cols,
        weights,
    })
}

/// Source frame index for feature-map time step `t_out` when `frames` input
/// frames have been reduced to `t_total` steps.
pub fn temporal_source(t_out: usize, frames: usize, t_total: usize) -> usize {
    t_out * frames / t_total
}

/// One weight map per feature-map time step, shaped `[T', H', W', 1]` so it
/// broadcasts across channels.
pub fn mask_for_feature_map<T: Element>(
    frames: &[LandmarkFrame],
    feature_shape: [usize; 4],
    params: &MaskParams,
) -> Result<Tensor<T>> {
    let [t_out, h, w, _] = feature_shape;
    if frames.is_empty() || t_out == 0 || t_out > frames.len() {
        return Err(Error::contract(format!(
            "cannot map {} landmark frames onto {t_out} feature steps",
            frames.len()
        )));
    }
    let mut data = Vec::with_capacity(t_out * h * w);
    for t in 0..t_out {
        let frame = &frames[temporal_source(t, frames.len(), t_out)];
        let cells = rescale_landmarks(frame, (h, w))?;
        let map = rasterize_weight_map(&cells, (h, w), params)?;
        data.extend(map.weights.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(&[t_out, h, w, 1], data)
}

/// Parses a landmark CSV: one row per frame, `frame_index, x0, y0, ..., x65,
/// y65`. A first row that does not parse as numbers is treated as a header.
/// Rows are returned sorted by frame index.
pub fn read_landmark_csv(path: &Path, source_size: (usize, usize)) -> Result<Vec<(usize, LandmarkFrame)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_csv(&text, source_size).map_err(|msg| Error::format(path, msg))
}

fn parse_landmark_csv(text: &str, source_size: (usize, usize)) -> Result<Vec<(usize, LandmarkFrame)>, String> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && lineno == 0 => continue,
            Err(e) => return Err(format!("line {}: {e}", lineno + 1)),
        };
        if values.len() != 1 + 2 * NUM_LANDMARKS {
            return Err(format!(
                "line {}: expected {} fields, got {}",
                lineno + 1,
                1 + 2 * NUM_LANDMARKS,
                values.len()
            ));
        }
        let index = values[0];
        if index < 0.0 || index.fract() != 0.0 {
            return Err(format!("line {}: bad frame index {index}", lineno + 1));
        }
        let points = values[1..].chunks(2).map(|p| (p[0], p[1])).collect();
        let frame = LandmarkFrame::new(points, source_size)
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        rows.push((index as usize, frame));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows)
}

pub fn write_landmark_csv(path: &Path, frames: &[LandmarkFrame]) -> Result<()> {
    let mut out = String::from("frame");
    for i in 0..NUM_LANDMARKS {
        let _ = write!(out, ",x{i},y{i}");
    }
    out.push('\n');
    for (idx, f) in frames.iter().enumerate() {
        let _ = write!(out, "{idx}");
        for (x, y) in &f.points {
            let _ = write!(out, ",{x},{y}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
