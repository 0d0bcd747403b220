use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_flag, ClassLabel, ImageRecord, SliceFlags, Split};
use crate::error::{Error, Result};

/// One row of the slice-level metadata table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub patient_id: String,
    pub volume_id: String,
    pub slice_path: String,
    pub class: String,
    pub abnormality_marked: String,
    pub background_removed: String,
}

impl MetadataRow {
    pub fn new(
        patient_id: &str,
        volume_id: &str,
        slice_path: &str,
        class: ClassLabel,
        abnormality_marked: bool,
        background_removed: bool,
    ) -> Self {
        MetadataRow {
            patient_id: patient_id.into(),
            volume_id: volume_id.into(),
            slice_path: slice_path.into(),
            class: class.source_name().into(),
            abnormality_marked: (abnormality_marked as u8).to_string(),
            background_removed: (background_removed as u8).to_string(),
        }
    }
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

pub fn write_metadata(path: &Path, rows: &[MetadataRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExclusionReason {
    /// Pneumonia slice without an abnormality mark.
    NotMarked,
    /// The whole volume had its background removed.
    BackgroundRemoved,
    MissingFile,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub slice_path: String,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, Default)]
pub struct ManifestBuild {
    pub records: Vec<ImageRecord>,
    pub excluded: Vec<Exclusion>,
}

impl ManifestBuild {
    pub fn missing_files(&self) -> Vec<&str> {
        self.excluded
            .iter()
            .filter(|e| e.reason == ExclusionReason::MissingFile)
            .map(|e| e.slice_path.as_str())
            .collect()
    }
}

/// Applies the curation rules to slice metadata:
/// * volumes with any background-removed slice are dropped entirely;
/// * pneumonia (CP / NCP) slices are kept only when abnormality-marked;
/// * normal slices are kept unconditionally;
/// * rows whose file is absent under `image_root` go to the exclusion report.
pub fn build_manifest(rows: &[MetadataRow], image_root: &Path) -> Result<ManifestBuild> {
    let mut parsed = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let label: ClassLabel = row
            .class
            .parse()
            .map_err(|e| Error::Data(format!("metadata row {}: {e}", i + 1)))?;
        let flags = SliceFlags {
            abnormality_marked: parse_flag("abnormality_marked", &row.abnormality_marked)?,
            background_removed: parse_flag("background_removed", &row.background_removed)?,
        };
        if row.slice_path.is_empty() {
            return Err(Error::Data(format!("metadata row {}: empty slice_path", i + 1)));
        }
        parsed.push((row, label, flags));
    }
    let stripped: HashSet<(&str, &str)> = parsed
        .iter()
        .filter(|(_, _, f)| f.background_removed)
        .map(|(r, _, _)| (r.patient_id.as_str(), r.volume_id.as_str()))
        .collect();

    let mut out = ManifestBuild::default();
    for (row, label, flags) in parsed {
        let exclude = |reason| Exclusion {
            slice_path: row.slice_path.clone(),
            reason,
        };
        if stripped.contains(&(row.patient_id.as_str(), row.volume_id.as_str())) {
            out.excluded.push(exclude(ExclusionReason::BackgroundRemoved));
            continue;
        }
        if label != ClassLabel::Normal && !flags.abnormality_marked {
            out.excluded.push(exclude(ExclusionReason::NotMarked));
            continue;
        }
        if !image_root.join(&row.slice_path).is_file() {
            out.excluded.push(exclude(ExclusionReason::MissingFile));
            continue;
        }
        out.records.push(ImageRecord {
            filepath: row.slice_path.clone(),
            patient_id: row.patient_id.clone(),
            label,
            split: None,
            flags,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    filepath: String,
    patient_id: String,
    class: String,
    split: String,
}

/// Writes `filepath,patient_id,class,split`; unassigned splits are empty.
pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(ManifestLine {
            filepath: r.filepath.clone(),
            patient_id: r.patient_id.clone(),
            class: r.label.manifest_name().into(),
            split: r.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["filepath", "patient_id", "class", "split"] {
        return Err(Error::Data(format!(
            "{}: manifest header must be filepath,patient_id,class,split",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in reader.deserialize() {
        let line: ManifestLine = line?;
        if line.filepath.is_empty() {
            return Err(Error::Data("manifest row with empty filepath".into()));
        }
        out.push(ImageRecord {
            filepath: line.filepath,
            patient_id: line.patient_id,
            label: line.class.parse()?,
            split: if line.split.is_empty() {
                None
            } else {
                Some(line.split.parse::<Split>()?)
            },
            flags: SliceFlags::default(),
        });
    }
    Ok(out)
}
