//! Synthetic CT-like slices for desk-scale runs.
//!
//! Each slice is a textured disk ("body") on a dark background. The class
//! decides what is drawn inside it:
//! * normal: body texture only;
//! * non-COVID pneumonia: dense bright blobs in the lower half;
//! * COVID-19: diffuse striped haze over the upper half.
//!
//! so mean intensity per quadrant separates the classes linearly. An
//! optional bright "table" band below the body mimics scanner furniture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_metadata, MetadataRow};
use super::{save_png, ClassLabel, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Patients per class, in `ClassLabel` order.
    pub patients_per_class: [usize; 3],
    pub slices_per_patient: usize,
    pub resolution: usize,
    pub seed: u64,
    pub table_artifact: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients_per_class: [20, 20, 20],
            slices_per_patient: 6,
            resolution: 64,
            seed: 0,
            table_artifact: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub metadata_path: PathBuf,
    /// Root the metadata's `slice_path` column is relative to.
    pub image_root: PathBuf,
    pub rows: Vec<MetadataRow>,
}

struct PatientStyle {
    cx: f32,
    cy: f32,
    radius: f32,
    tissue: f32,
    lesion_phase: f32,
}

fn patient_style(rng: &mut ChaCha8Rng, res: f32) -> PatientStyle {
    PatientStyle {
        cx: res * (0.5 + rng.random_range(-0.03..0.03)),
        cy: res * (0.47 + rng.random_range(-0.02..0.02)),
        radius: res * rng.random_range(0.30..0.34),
        tissue: rng.random_range(0.32..0.40),
        lesion_phase: rng.random_range(0.0..std::f32::consts::TAU),
    }
}

/// Renders one slice; `rng` supplies per-slice variation and noise.
fn render_slice(
    label: ClassLabel,
    res: usize,
    style: &PatientStyle,
    table: bool,
    rng: &mut ChaCha8Rng,
) -> Image {
    let r = res as f32;
    let mut img = Image::new(res, res);
    let blobs: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.25..0.75) * std::f32::consts::PI; // lower half
            let dist = rng.random_range(0.25..0.6) * style.radius;
            (
                style.cx + dist * angle.cos(),
                style.cy + dist * angle.sin(),
                rng.random_range(0.10..0.16) * style.radius,
            )
        })
        .collect();
    let freq = rng.random_range(0.55..0.75);
    for y in 0..res {
        for x in 0..res {
            let fx = x as f32 + 0.5;
            let fy = y as f32 + 0.5;
            let dx = fx - style.cx;
            let dy = fy - style.cy;
            let d = (dx * dx + dy * dy).sqrt();
            let noise = rng.random_range(-0.04..0.04);
            let mut v = if d <= style.radius {
                // two darker lung fields
                let lung = ((dx.abs() - 0.45 * style.radius).powi(2) / (0.3 * style.radius).powi(2)
                    + dy.powi(2) / (0.6 * style.radius).powi(2))
                    < 1.0;
                let mut v = if lung { style.tissue - 0.1 } else { style.tissue } + noise;
                match label {
                    ClassLabel::Normal => {}
                    ClassLabel::PneumoniaNonCovid => {
                        for &(bx, by, br) in &blobs {
                            let q = ((fx - bx).powi(2) + (fy - by).powi(2)) / (br * br);
                            v += 0.5 * (-q).exp();
                        }
                        if dy > 0.0 {
                            v += 0.12;
                        }
                    }
                    ClassLabel::Covid19 => {
                        if dy < 0.0 {
                            let stripes = 0.5 + 0.5 * ((fx + fy) * freq + style.lesion_phase).sin();
                            v += 0.12 + 0.18 * stripes;
                        }
                    }
                }
                v
            } else {
                0.03 + 0.5 * noise.abs()
            };
            if table {
                let top = style.cy + style.radius + 0.05 * r + 0.02 * r * (dx / r).powi(2) * 4.0;
                if fy >= top && fy < top + 0.04 * r && (0.08 * r..0.92 * r).contains(&fx) {
                    v = 0.85 + noise;
                }
            }
            img.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Writes `images/<patient>/<slice>.png` and `metadata.csv` under `dir`.
pub fn generate_synthetic_dataset(dir: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    if config.resolution < 16 {
        return Err(Error::Argument("synthetic resolution must be at least 16".into()));
    }
    if config.slices_per_patient == 0 {
        return Err(Error::Argument("slices_per_patient must be positive".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut patient = 0u64;
    for (class, &n) in ClassLabel::ALL.iter().zip(&config.patients_per_class) {
        for _ in 0..n {
            patient += 1;
            let pid = format!("patient_{patient:05}");
            let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
            prng.set_stream(patient << 16);
            let style = patient_style(&mut prng, config.resolution as f32);
            let pdir = dir.join("images").join(&pid);
            std::fs::create_dir_all(&pdir)?;
            for s in 0..config.slices_per_patient {
                let mut srng = ChaCha8Rng::seed_from_u64(config.seed);
                srng.set_stream((patient << 16) | (s as u64 + 1));
                let img = render_slice(*class, config.resolution, &style, config.table_artifact, &mut srng);
                let rel = format!("images/{pid}/slice_{s:03}.png");
                save_png(&dir.join(&rel), &img)?;
                rows.push(MetadataRow::new(
                    &pid,
                    &format!("{pid}_v1"),
                    &rel,
                    *class,
                    *class != ClassLabel::Normal,
                    false,
                ));
            }
        }
    }
    let metadata_path = dir.join("metadata.csv");
    write_metadata(&metadata_path, &rows)?;
    Ok(SynthSummary {
        metadata_path,
        image_root: dir.to_path_buf(),
        rows,
    })
}
