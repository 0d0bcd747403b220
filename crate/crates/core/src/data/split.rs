use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassLabel, ImageRecord, Split};
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Classes with fewer patients than this disable stratification.
const MIN_PATIENTS_PER_CLASS: usize = 3;

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub records: Vec<ImageRecord>,
    pub stratified: bool,
    pub warnings: Vec<String>,
}

impl SplitOutcome {
    /// Distinct patients per split, in `Split::ALL` order.
    pub fn patient_counts(&self) -> [usize; 3] {
        let mut seen = std::collections::HashSet::new();
        let mut counts = [0; 3];
        for r in &self.records {
            if let Some(s) = r.split {
                if seen.insert(&r.patient_id) {
                    counts[s as usize] += 1;
                }
            }
        }
        counts
    }
}

/// Largest-remainder allocation of `n` items over `fractions`.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // larger remainder first; earlier split wins ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn assign(patients: &mut [&str], fractions: &[f64; 3], rng: &mut ChaCha8Rng, out: &mut BTreeMap<String, Split>) {
    patients.shuffle(rng);
    let [n_train, n_val, _] = allocate(patients.len(), fractions);
    for (i, p) in patients.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.insert(p.to_string(), split);
    }
}

/// Assigns every patient (and so all of its records) to exactly one split,
/// stratified by class. A patient's class is the label of its first record.
pub fn patient_level_split(records: &[ImageRecord], fractions: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<&str>> = BTreeMap::new();
    let mut class_of: BTreeMap<&str, ClassLabel> = BTreeMap::new();
    for r in records {
        class_of.entry(r.patient_id.as_str()).or_insert(r.label);
    }
    for (&p, &c) in &class_of {
        by_class.entry(c).or_default().push(p);
    }

    let mut warnings = Vec::new();
    let small: Vec<String> = by_class
        .iter()
        .filter(|(_, ps)| ps.len() < MIN_PATIENTS_PER_CLASS)
        .map(|(c, ps)| format!("{c} ({})", ps.len()))
        .collect();
    let stratified = small.is_empty();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    if stratified {
        for patients in by_class.values_mut() {
            assign(patients, &fractions, &mut rng, &mut assignment);
        }
    } else {
        warnings.push(format!(
            "fewer than {MIN_PATIENTS_PER_CLASS} patients in class {}; falling back to an unstratified split",
            small.join(", ")
        ));
        let mut all: Vec<&str> = class_of.keys().copied().collect();
        assign(&mut all, &fractions, &mut rng, &mut assignment);
    }

    let records = records
        .iter()
        .map(|r| ImageRecord {
            split: Some(assignment[&r.patient_id]),
            ..r.clone()
        })
        .collect();
    Ok(SplitOutcome {
        records,
        stratified,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SliceFlags;

    fn rec(patient: &str, label: ClassLabel) -> ImageRecord {
        ImageRecord {
            filepath: format!("{patient}.png"),
            patient_id: patient.into(),
            label,
            split: None,
            flags: SliceFlags::default(),
        }
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(allocate(1, &DEFAULT_FRACTIONS), [1, 0, 0]);
        assert_eq!(allocate(10, &DEFAULT_FRACTIONS), [6, 2, 2]);
        assert_eq!(allocate(334, &DEFAULT_FRACTIONS), [200, 67, 67]);
        assert_eq!(allocate(0, &DEFAULT_FRACTIONS), [0, 0, 0]);
    }

    #[test]
    fn single_patient_goes_to_train_with_warning() {
        let out = patient_level_split(&[rec("a", ClassLabel::Normal), rec("a", ClassLabel::Normal)], DEFAULT_FRACTIONS, 1).unwrap();
        assert!(out.records.iter().all(|r| r.split == Some(Split::Train)));
        assert!(!out.stratified);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(patient_level_split(&[], [0.5, 0.5, 0.5], 0).is_err());
    }
}
