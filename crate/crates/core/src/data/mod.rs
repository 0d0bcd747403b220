//! Dataset curation, splitting, image IO, augmentation and batch sampling.

mod augment;
mod image;
mod manifest;
mod mask;
mod sampler;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::augment::{augment_sample, sample_rng, AugmentationConfig};
pub use self::image::{load_png, save_png, Image};
pub use self::manifest::{
    build_manifest, read_manifest, read_metadata, write_manifest, write_metadata, Exclusion,
    ExclusionReason, ManifestBuild, MetadataRow,
};
pub use self::mask::{body_region_mask, BodyMask, BODY_THRESHOLD};
pub use self::sampler::RebalancedBatches;
pub use self::split::{patient_level_split, SplitOutcome, DEFAULT_FRACTIONS};
pub use self::synth::{generate_synthetic_dataset, SynthConfig, SynthSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Normal = 0,
    PneumoniaNonCovid = 1,
    Covid19 = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Normal,
        ClassLabel::PneumoniaNonCovid,
        ClassLabel::Covid19,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Name used in manifest files.
    pub fn manifest_name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::PneumoniaNonCovid => "pneumonia",
            ClassLabel::Covid19 => "covid19",
        }
    }

    /// Column header used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::PneumoniaNonCovid => "Non-COVID-19",
            ClassLabel::Covid19 => "COVID-19",
        }
    }

    /// Source-data vocabulary: `NCP` is COVID-19, `CP` common pneumonia.
    pub fn source_name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::PneumoniaNonCovid => "CP",
            ClassLabel::Covid19 => "NCP",
        }
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    /// Accepts source codes (`NCP`, `CP`, `Normal`) and manifest names.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(ClassLabel::Normal),
            "cp" | "pneumonia" => Ok(ClassLabel::PneumoniaNonCovid),
            "ncp" | "covid19" | "covid-19" => Ok(ClassLabel::Covid19),
            _ => Err(Error::Data(format!("unknown class `{s}`"))),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.manifest_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SliceFlags {
    pub abnormality_marked: bool,
    pub background_removed: bool,
}

/// One curated slice.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageRecord {
    /// Path relative to the data root.
    pub filepath: String,
    pub patient_id: String,
    pub label: ClassLabel,
    pub split: Option<Split>,
    pub flags: SliceFlags,
}

/// Records of one split, in manifest order.
pub fn records_in(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records
        .iter()
        .filter(|r| r.split == Some(split))
        .cloned()
        .collect()
}

fn parse_flag(field: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Ok(true),
        "0" | "false" | "no" | "n" | "" => Ok(false),
        _ => Err(Error::Data(format!("`{field}` must be a boolean, got `{value}`"))),
    }
}
