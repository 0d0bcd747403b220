use std::collections::{BTreeMap, HashSet};

use covidnet_core::data::{
    augment_sample, body_region_mask, build_manifest, generate_synthetic_dataset, load_png,
    patient_level_split, sample_rng, AugmentationConfig, ClassLabel, Image, ImageRecord,
    MetadataRow, RebalancedBatches, SliceFlags, Split, SynthConfig, BODY_THRESHOLD,
    DEFAULT_FRACTIONS,
};
use proptest::prelude::*;

/// Bright disk (the body) and a bright arc below it (the table), as in a
/// slice before body masking. Returns the image and per-pixel (body, arc).
fn disk_and_table(n: usize) -> (Image, Vec<bool>, Vec<bool>) {
    let mut img = Image::new(n, n);
    let mut body = vec![false; n * n];
    let mut arc = vec![false; n * n];
    let c = n as f32 / 2.0;
    let r = n as f32 * 0.3;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let d = ((fx - c).powi(2) + (fy - c * 0.9).powi(2)).sqrt();
            let i = y * n + x;
            if d <= r {
                // textured interior with a dark "lung" patch inside
                let v = if (fx - c).abs() < r * 0.3 && (fy - c * 0.9).abs() < r * 0.3 {
                    0.05
                } else {
                    0.4 + 0.3 * ((x * 7 + y * 3) % 5) as f32 / 5.0
                };
                img.set(x, y, v);
                body[i] = true;
            }
            let arc_d = ((fx - c).powi(2) + (fy + n as f32 * 0.2).powi(2)).sqrt();
            if (n as f32 * 1.02..n as f32 * 1.08).contains(&arc_d) {
                img.set(x, y, 0.9);
                arc[i] = true;
            }
        }
    }
    assert!(arc.iter().any(|&a| a) && body.iter().zip(&arc).all(|(b, a)| !(*b && *a)));
    (img, body, arc)
}

#[test]
fn body_mask_removes_table_keeps_body() {
    let (img, body, arc) = disk_and_table(96);
    let m = body_region_mask(&img, BODY_THRESHOLD);
    let arc_zeroed = arc.iter().enumerate().filter(|(_, &a)| a).all(|(i, _)| m.image.pixels[i] == 0.0);
    assert!(arc_zeroed, "every table pixel is zeroed");
    let body_changed = body
        .iter()
        .enumerate()
        .filter(|(i, &b)| b && m.image.pixels[*i] != img.pixels[*i])
        .count();
    assert_eq!(body_changed, 0);
    let again = body_region_mask(&m.image, BODY_THRESHOLD);
    assert_eq!(again.image, m.image);
    assert!(m.exterior_fraction(&img) > 0.0);
}

#[test]
fn body_mask_without_exterior_structures_is_identity() {
    let (img, _, arc) = disk_and_table(64);
    let mut clean = img.clone();
    for (p, &a) in clean.pixels.iter_mut().zip(&arc) {
        if a {
            *p = 0.0;
        }
    }
    assert_eq!(body_region_mask(&clean, BODY_THRESHOLD).image, clean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn body_mask_never_touches_the_body(pixels in prop::collection::vec(0.0f32..1.0, 12 * 10)) {
        let img = Image::from_pixels(12, 10, pixels).unwrap();
        let m = body_region_mask(&img, BODY_THRESHOLD);
        for i in 0..img.pixels.len() {
            if m.body[i] {
                prop_assert_eq!(m.image.pixels[i], img.pixels[i]);
            } else {
                prop_assert_eq!(m.image.pixels[i], 0.0);
            }
        }
        prop_assert_eq!(body_region_mask(&m.image, BODY_THRESHOLD).image, m.image);
    }

    #[test]
    fn manifest_filtering_is_monotone(marks in prop::collection::vec(any::<bool>(), 8), flip in 0usize..8) {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<MetadataRow> = marks
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let rel = format!("{i}.png");
                std::fs::write(dir.path().join(&rel), b"x").unwrap();
                let class = ClassLabel::ALL[i % 3];
                MetadataRow::new(&format!("p{}", i % 3), "v", &rel, class, m, false)
            })
            .collect();
        let before = build_manifest(&rows, dir.path()).unwrap().records.len();
        let mut marked = rows.clone();
        marked[flip].abnormality_marked = "1".into();
        let after = build_manifest(&marked, dir.path()).unwrap().records.len();
        prop_assert!(after >= before);
        let mut stripped = rows.clone();
        stripped[flip].background_removed = "1".into();
        let built = build_manifest(&stripped, dir.path()).unwrap();
        let pid = &rows[flip].patient_id;
        prop_assert!(built.records.iter().all(|r| &r.patient_id != pid));
    }

    #[test]
    fn augmentation_is_a_function_of_its_inputs(seed in any::<u64>(), epoch in 0u64..5, idx in 0u64..100) {
        let (img, _, _) = disk_and_table(32);
        let cfg = AugmentationConfig::default();
        let a = augment_sample(&img, &cfg, &mut sample_rng(seed, epoch, idx), 24, 24);
        let b = augment_sample(&img, &cfg, &mut sample_rng(seed, epoch, idx), 24, 24);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn double_flip_is_the_original() {
    let (img, _, _) = disk_and_table(40);
    let cfg = AugmentationConfig {
        hflip_prob: 1.0,
        ..AugmentationConfig::identity()
    };
    let mut rng = sample_rng(0, 0, 0);
    let once = augment_sample(&img, &cfg, &mut rng, 40, 40);
    assert_ne!(once, img);
    let twice = augment_sample(&once, &cfg, &mut rng, 40, 40);
    assert_eq!(twice, img);
}

fn patients(n: usize, slices: usize) -> Vec<ImageRecord> {
    let mut out = Vec::new();
    for p in 0..n {
        for s in 0..slices {
            out.push(ImageRecord {
                filepath: format!("p{p}/{s}.png"),
                patient_id: format!("p{p:04}"),
                label: ClassLabel::ALL[p % 3],
                split: None,
                flags: SliceFlags::default(),
            });
        }
    }
    out
}

#[test]
fn thousand_patient_split() {
    let records = patients(1000, 3);
    let out = patient_level_split(&records, DEFAULT_FRACTIONS, 42).unwrap();
    assert!(out.stratified && out.warnings.is_empty());
    let mut split_of: BTreeMap<&str, HashSet<Split>> = BTreeMap::new();
    for r in &out.records {
        split_of.entry(&r.patient_id).or_default().insert(r.split.unwrap());
    }
    assert!(split_of.values().all(|s| s.len() == 1), "patients are disjoint");
    let counts = out.patient_counts();
    for (got, want) in counts.iter().zip([600, 200, 200]) {
        assert!(got.abs_diff(want) <= 20, "{counts:?}");
    }
    // per-class proportions within 2 points
    for class in ClassLabel::ALL {
        let ps: Vec<&str> = split_of
            .keys()
            .copied()
            .filter(|p| p[1..].parse::<usize>().unwrap() % 3 == class.index())
            .collect();
        for (split, frac) in Split::ALL.iter().zip(DEFAULT_FRACTIONS) {
            let n = ps.iter().filter(|p| split_of[*p].contains(split)).count();
            let pct = 100.0 * n as f64 / ps.len() as f64;
            assert!((pct - 100.0 * frac).abs() <= 2.0, "{class} {split} {pct}");
        }
    }
    let again = patient_level_split(&records, DEFAULT_FRACTIONS, 42).unwrap();
    assert_eq!(again.records, out.records);
    let other = patient_level_split(&records, DEFAULT_FRACTIONS, 43).unwrap();
    assert_ne!(other.records, out.records);
}

#[test]
fn skewed_batches_stay_balanced() {
    let mut records = Vec::new();
    for (class, n) in ClassLabel::ALL.iter().zip([900, 90, 10]) {
        for i in 0..n {
            records.push(ImageRecord {
                filepath: format!("{class}/{i}.png"),
                patient_id: format!("{class}{i}"),
                label: *class,
                split: Some(Split::Train),
                flags: SliceFlags::default(),
            });
        }
    }
    let batches: Vec<Vec<usize>> = RebalancedBatches::new(&records, 8, 5).unwrap().take(1000).collect();
    for b in &batches {
        let mut counts = [0usize; 3];
        for &i in b {
            counts[records[i].label.index()] += 1;
        }
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        assert!(spread <= 1, "{counts:?}");
        assert_eq!(b.len(), 8);
    }
    let again: Vec<Vec<usize>> = RebalancedBatches::new(&records, 8, 5).unwrap().take(1000).collect();
    assert_eq!(batches, again);
}

fn tree_bytes(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_dataset_is_deterministic_and_balanced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        patients_per_class: [10, 10, 10],
        slices_per_patient: 2,
        resolution: 32,
        seed: 11,
        table_artifact: true,
    };
    let sa = generate_synthetic_dataset(a.path(), &cfg).unwrap();
    generate_synthetic_dataset(b.path(), &cfg).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let mut per_class: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for row in &sa.rows {
        per_class.entry(row.class.clone()).or_default().insert(row.patient_id.clone());
    }
    let counts: Vec<usize> = ["Normal", "CP", "NCP"].iter().map(|c| per_class[*c].len()).collect();
    assert_eq!(counts, vec![10, 10, 10]);

    let built = build_manifest(&sa.rows, &sa.image_root).unwrap();
    assert_eq!(built.records.len(), 60);
    assert!(built.excluded.is_empty());
}

#[test]
fn synthetic_dataset_unwritable_dir_is_io_error() {
    let f = tempfile::NamedTempFile::new().unwrap();
    let err = generate_synthetic_dataset(&f.path().join("sub"), &SynthConfig::default()).unwrap_err();
    assert!(matches!(err, covidnet_core::Error::Io(_)), "{err}");
}

/// Mean intensity of each image quadrant.
fn quadrant_features(img: &Image) -> [f64; 4] {
    let (hw, hh) = (img.width / 2, img.height / 2);
    let mut f = [0.0; 4];
    for y in 0..img.height {
        for x in 0..img.width {
            f[(y >= hh) as usize * 2 + (x >= hw) as usize] += img.get(x, y) as f64;
        }
    }
    f.map(|s| s / (hw * hh) as f64)
}

/// Multinomial logistic regression on quadrant means, full-batch gradient
/// descent; returns training accuracy in percent.
fn linear_probe(features: &[[f64; 4]], labels: &[usize]) -> f64 {
    let mut w = [[0.0f64; 5]; 3];
    for _ in 0..4000 {
        let mut g = [[0.0f64; 5]; 3];
        for (x, &y) in features.iter().zip(labels) {
            let xb = [x[0], x[1], x[2], x[3], 1.0];
            let z: Vec<f64> = w.iter().map(|wc| wc.iter().zip(&xb).map(|(a, b)| a * b).sum()).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..3 {
                let d = e[c] / s - (c == y) as u8 as f64;
                for k in 0..5 {
                    g[c][k] += d * xb[k];
                }
            }
        }
        for c in 0..3 {
            for k in 0..5 {
                w[c][k] -= 20.0 * g[c][k] / features.len() as f64;
            }
        }
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| {
            let xb = [x[0], x[1], x[2], x[3], 1.0];
            let z: Vec<f64> = w.iter().map(|wc| wc.iter().zip(&xb).map(|(a, b)| a * b).sum()).collect();
            let best = (0..3).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == y
        })
        .count();
    100.0 * correct as f64 / features.len() as f64
}

#[test]
fn synthetic_classes_are_linearly_separable_by_quadrant_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        patients_per_class: [20, 20, 20],
        slices_per_patient: 4,
        resolution: 64,
        seed: 3,
        table_artifact: false,
    };
    let s = generate_synthetic_dataset(dir.path(), &cfg).unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for row in &s.rows {
        let img = load_png(&s.image_root.join(&row.slice_path)).unwrap();
        feats.push(quadrant_features(&img));
        labels.push(row.class.parse::<ClassLabel>().unwrap().index());
    }
    let acc = linear_probe(&feats, &labels);
    assert!(acc >= 99.0, "linear probe accuracy {acc}");
}
