//! Occlusion-based critical factors: the smallest set of grid cells (found
//! greedily) whose blanking strongly lowers the model's confidence in its
//! decision, plus a red overlay for inspecting them.
//!
//! Occluded cells are set to 0, the same background value body masking
//! produces, so an explanation never introduces intensities the model could
//! not have seen in training.

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BodyMask, ClassLabel, Image};
use crate::error::{Error, Result};
use crate::train::{argmax, Classifier};

pub const METHOD_NAME: &str = "occlusion-based critical factors";
pub const DEFAULT_GRID: (usize, usize) = (16, 16);
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BUDGET: usize = 32;
pub const OVERLAY_ALPHA: f32 = 0.45;
const CANDIDATE_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// `(rows, cols)` of the occlusion grid.
    pub grid: (usize, usize),
    /// Stop once confidence falls below `threshold * confidence_before`.
    pub threshold: f64,
    /// Maximum number of cells to select.
    pub budget: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            grid: DEFAULT_GRID,
            threshold: DEFAULT_THRESHOLD,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Confidence dropped below the threshold.
    Reached,
    BudgetExhausted,
    /// No remaining cell lowers the confidence any further.
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalFactorMask {
    pub method: String,
    pub grid: (usize, usize),
    /// `(width, height)` of the explained image.
    pub image_size: (usize, usize),
    pub target: ClassLabel,
    pub threshold: f64,
    /// Selected `(row, col)` cells in selection order.
    pub cells: Vec<(usize, usize)>,
    /// Row-major cell map.
    pub cell_map: Vec<bool>,
    pub confidence_before: f64,
    pub confidence_after: f64,
    /// Target confidence after each selection.
    pub confidence_trace: Vec<f64>,
    pub achieved: bool,
    pub stop_reason: StopReason,
}

impl CriticalFactorMask {
    /// Grid cell that pixel `(x, y)` falls into (nearest-neighbor upsampling).
    pub fn cell_of(&self, x: usize, y: usize) -> (usize, usize) {
        cell_of(self.grid, self.image_size, x, y)
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.cell_map[row * self.grid.1 + col]
    }

    /// Whether pixel `(x, y)` is covered by a selected cell.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (r, c) = self.cell_of(x, y);
        self.is_selected(r, c)
    }

    /// The mask at image resolution, row-major.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let (w, h) = self.image_size;
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.covers(x, y)).collect()
    }

    /// `image` with every selected cell set to background.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.check_size(image)?;
        Ok(occlude(image, self.grid, &self.cell_map))
    }

    /// Share of masked pixels lying outside the body region; high values
    /// mean the decision hinges on something other than anatomy.
    pub fn outside_body_fraction(&self, body: &BodyMask) -> Result<f64> {
        self.check_size(&body.image)?;
        let (w, h) = self.image_size;
        let (mut masked, mut outside) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if self.covers(x, y) {
                    masked += 1;
                    if !body.body[y * w + x] {
                        outside += 1;
                    }
                }
            }
        }
        Ok(if masked == 0 { 0.0 } else { outside as f64 / masked as f64 })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes")
    }

    fn check_size(&self, image: &Image) -> Result<()> {
        if (image.width, image.height) != self.image_size {
            return Err(Error::Argument(format!(
                "mask was computed for a {}x{} image, got {}x{}",
                self.image_size.0, self.image_size.1, image.width, image.height
            )));
        }
        Ok(())
    }
}

fn cell_of(grid: (usize, usize), size: (usize, usize), x: usize, y: usize) -> (usize, usize) {
    (y * grid.0 / size.1, x * grid.1 / size.0)
}

fn occlude(image: &Image, grid: (usize, usize), cell_map: &[bool]) -> Image {
    let mut out = image.clone();
    let size = (image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let (r, c) = cell_of(grid, size, x, y);
            if cell_map[r * grid.1 + c] {
                out.set(x, y, 0.0);
            }
        }
    }
    out
}

fn confidences(classifier: &dyn Classifier, images: &[Image], target: usize) -> Result<Vec<f64>> {
    let rows = classifier.predict_proba(images)?;
    rows.iter()
        .map(|r| {
            r.get(target)
                .copied()
                .ok_or_else(|| Error::Internal(format!("prediction row of length {}", r.len())))
        })
        .collect()
}

/// Greedily occludes the cell that lowers target confidence most until it
/// falls below `threshold * confidence_before`, the budget runs out, or no
/// cell helps any more. Ties go to the first cell in row-major order.
///
/// `image` must already be at the classifier's input size.
pub fn critical_factors(
    classifier: &dyn Classifier,
    image: &Image,
    target: ClassLabel,
    config: &ExplainConfig,
) -> Result<CriticalFactorMask> {
    let (gh, gw) = config.grid;
    if gh == 0 || gw == 0 || gh > image.height || gw > image.width {
        return Err(Error::Argument(format!(
            "grid {gh}x{gw} does not fit a {}x{} image",
            image.width, image.height
        )));
    }
    if !(config.threshold > 0.0 && config.threshold < 1.0) {
        return Err(Error::Argument(format!("threshold {} must lie in (0, 1)", config.threshold)));
    }
    if classifier.input_size() != (image.width, image.height) {
        let (w, h) = classifier.input_size();
        return Err(Error::Argument(format!(
            "classifier expects {w}x{h} inputs, image is {}x{}",
            image.width, image.height
        )));
    }
    let t = target.index();
    let before_row = classifier.predict_proba(std::slice::from_ref(image))?;
    let before_row = before_row
        .first()
        .ok_or_else(|| Error::Internal("classifier returned no prediction".into()))?;
    let predicted = argmax(before_row);
    if predicted != t {
        return Err(Error::Precondition(format!(
            "model predicts {} rather than {}",
            ClassLabel::from_index(predicted).map_or("?", |c| c.display_name()),
            target.display_name()
        )));
    }
    let before = before_row[t];
    let goal = config.threshold * before;

    let mut cell_map = vec![false; gh * gw];
    let mut cells = Vec::new();
    let mut trace = Vec::new();
    let mut current = before;
    let stop_reason = loop {
        if current < goal {
            break StopReason::Reached;
        }
        if cells.len() >= config.budget || cells.len() == gh * gw {
            break StopReason::BudgetExhausted;
        }
        let candidates: Vec<usize> = (0..gh * gw).filter(|&i| !cell_map[i]).collect();
        let scores: Vec<f64> = candidates
            .par_chunks(CANDIDATE_BATCH)
            .map(|chunk| {
                let images: Vec<Image> = chunk
                    .iter()
                    .map(|&i| {
                        let mut m = cell_map.clone();
                        m[i] = true;
                        occlude(image, config.grid, &m)
                    })
                    .collect();
                confidences(classifier, &images, t)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = k;
            }
        }
        if scores[best] >= current {
            break StopReason::NoImprovement;
        }
        let cell = candidates[best];
        cell_map[cell] = true;
        cells.push((cell / gw, cell % gw));
        current = scores[best];
        trace.push(current);
    };
    Ok(CriticalFactorMask {
        method: METHOD_NAME.into(),
        grid: config.grid,
        image_size: (image.width, image.height),
        target,
        threshold: config.threshold,
        cells,
        cell_map,
        confidence_before: before,
        confidence_after: current,
        confidence_trace: trace,
        achieved: stop_reason == StopReason::Reached,
        stop_reason,
    })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Gray image as RGB with the masked pixels blended toward red.
pub fn render_overlay(image: &Image, mask: &CriticalFactorMask) -> Result<RgbImage> {
    mask.check_size(image)?;
    let mut out = RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let g = to_byte(image.get(x, y));
            let px = if mask.covers(x, y) {
                let blend = |from: u8, to: f32| ((1.0 - OVERLAY_ALPHA) * from as f32 + OVERLAY_ALPHA * to).round() as u8;
                Rgb([blend(g, 255.0), blend(g, 0.0), blend(g, 0.0)])
            } else {
                Rgb([g, g, g])
            };
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(out)
}

pub fn save_overlay(path: &std::path::Path, overlay: &RgbImage) -> Result<()> {
    overlay.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
