//! Synthetic generation, dataset I/O, box extraction and preprocessing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use minipromptseg::data::*;
use minipromptseg::model::BoundingBox;
use minipromptseg::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn single_lesion_profiles(n: usize) -> Vec<CenterProfile> {
    CenterProfile::builtin(n)
}

#[test]
fn two_centers_three_images_give_six_entries() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(&single_lesion_profiles(2), 3, dir.path(), 1, 1).unwrap();
    assert_eq!(m.entries.len(), 6);
    assert_eq!(m.format_version, FORMAT_VERSION);
    assert_eq!(m.generator_seed, Some(1));
    assert_eq!(m.centers().len(), 2);
    m.validate(dir.path()).unwrap();
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn generation_is_byte_deterministic_and_independent_of_jobs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let profiles = single_lesion_profiles(3);
    generate_synthetic_dataset(&profiles, 4, a.path(), 9, 1).unwrap();
    generate_synthetic_dataset(&profiles, 4, b.path(), 9, 1).unwrap();
    generate_synthetic_dataset(&profiles, 4, c.path(), 9, 3).unwrap();
    let ta = read_tree(a.path());
    assert_eq!(ta, read_tree(b.path()));
    assert_eq!(ta, read_tree(c.path()));
    let d = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&profiles, 4, d.path(), 10, 1).unwrap();
    assert_ne!(ta, read_tree(d.path()));
}

#[test]
fn lesion_area_fraction_stays_in_range() {
    for profile in CenterProfile::builtin(5) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = render_image(&profile, &mut rng).unwrap();
            let frac = img.union.fraction();
            assert!(
                (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac),
                "{} area {frac}",
                profile.name
            );
            assert!(frac >= profile.area_fraction.0 && frac <= profile.area_fraction.1);
        }
    }
}

#[test]
fn multi_lesion_images_yield_one_entry_per_component() {
    let profile = CenterProfile {
        name: "multi".into(),
        lesions_per_image: (2, 3),
        area_fraction: (0.06, 0.2),
        ..CenterProfile::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(&[profile], 4, dir.path(), 5, 1).unwrap();
    assert!(m.entries.len() >= 8 && m.entries.len() <= 12, "{}", m.entries.len());
    let mut per_image: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &m.entries {
        *per_image.entry(e.image_path.as_str()).or_default() += 1;
        let s = load_sample(dir.path(), e).unwrap();
        assert_eq!(s.bbox, extract_box(&s.mask).unwrap());
        assert_eq!(s.mask.connected_components().len(), 1);
    }
    assert_eq!(per_image.len(), 4);
    assert!(per_image.values().all(|&n| (2..=3).contains(&n)));
}

#[test]
fn every_generated_box_is_the_tight_mask_box() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(&single_lesion_profiles(5), 3, dir.path(), 2, 1).unwrap();
    for e in &m.entries {
        let s = load_sample(dir.path(), e).unwrap();
        assert_eq!(Some(s.bbox), e.bbox);
        assert_eq!(s.bbox, extract_box(&s.mask).unwrap());
        assert!(!s.mask.is_empty());
    }
}

#[test]
fn duplicate_or_invalid_profiles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = CenterProfile::default();
    assert!(matches!(
        generate_synthetic_dataset(&[p.clone(), p.clone()], 1, dir.path(), 0, 1),
        Err(Error::Config(_))
    ));
    let twin = CenterProfile { name: "twin".into(), ..p.clone() };
    assert!(matches!(
        generate_synthetic_dataset(&[p.clone(), twin], 1, dir.path(), 0, 1),
        Err(Error::Config(_))
    ));
    let bad = CenterProfile { lesions_per_image: (1, 4), ..p.clone() };
    assert!(matches!(generate_synthetic_dataset(&[bad], 1, dir.path(), 0, 1), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic_dataset(&[p], 0, dir.path(), 0, 1), Err(Error::Config(_))));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let err = generate_synthetic_dataset(&[CenterProfile::default()], 1, &file.join("sub"), 0, 1);
    assert!(matches!(err, Err(Error::Io { .. })));
}

// --- extract_box --------------------------------------------------------------

#[test]
fn extract_box_examples() {
    let m = BinaryMask::from_fn(10, 10, |r, c| (2..=5).contains(&r) && (3..=7).contains(&c));
    assert_eq!(extract_box(&m).unwrap(), BoundingBox::new(3, 2, 7, 5));
    let m = BinaryMask::from_fn(8, 8, |r, c| r == 4 && c == 4);
    assert_eq!(extract_box(&m).unwrap(), BoundingBox::new(4, 4, 4, 4));
    let m = BinaryMask::from_fn(8, 8, |_, _| true);
    assert_eq!(extract_box(&m).unwrap(), BoundingBox::new(0, 0, 7, 7));
    assert!(matches!(extract_box(&BinaryMask::empty(4, 4)), Err(Error::EmptyMask(_))));
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..12, 1usize..12)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(prop::bool::weighted(0.2), h * w)))
        .prop_map(|(h, w, bits)| BinaryMask::new(h, w, bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn extract_box_is_minimal(mask in mask_strategy()) {
        prop_assume!(!mask.is_empty());
        let b = extract_box(&mask).unwrap();
        let inside = |r: usize, c: usize| r >= b.y_min && r <= b.y_max && c >= b.x_min && c <= b.x_max;
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) {
                    prop_assert!(inside(r, c));
                }
            }
        }
        let row_hit = |r: usize| (b.x_min..=b.x_max).any(|c| mask.get(r, c));
        let col_hit = |c: usize| (b.y_min..=b.y_max).any(|r| mask.get(r, c));
        prop_assert!(row_hit(b.y_min) && row_hit(b.y_max));
        prop_assert!(col_hit(b.x_min) && col_hit(b.x_max));
    }

    #[test]
    fn downsample_gt_is_bounded_and_mass_preserving(
        h in 8usize..40, w in 8usize..40, side in 4usize..17,
        cy in 0.2f64..0.8, cx in 0.2f64..0.8, ry in 0.1f64..0.4, rx in 0.1f64..0.4,
    ) {
        let mask = BinaryMask::from_fn(h, w, |r, c| {
            let y = (r as f64 + 0.5) / h as f64 - cy;
            let x = (c as f64 + 0.5) / w as f64 - cx;
            (y / ry).powi(2) + (x / rx).powi(2) <= 1.0
        });
        let t: Tensor<f64> = downsample_gt(&mask, side).unwrap();
        prop_assert_eq!(t.shape(), &[side, side]);
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((t.mean() - mask.fraction()).abs() <= 2.0 / side as f64);
    }
}

// --- preprocessing ------------------------------------------------------------

fn sample(h: usize, w: usize, bbox: BoundingBox, value: f32) -> SegmentationSample {
    let mask = BinaryMask::from_fn(h, w, |r, c| r >= bbox.y_min && r <= bbox.y_max && c >= bbox.x_min && c <= bbox.x_max);
    SegmentationSample {
        sample_id: "s".into(),
        center_id: "c".into(),
        image: Tensor::from_fn(&[3, h, w], |i| if value >= 0.0 { value } else { (i % 11) as f32 / 11.0 }),
        mask,
        bbox,
    }
}

#[test]
fn resize_for_model_examples() {
    let s = sample(16, 16, BoundingBox::new(2, 3, 9, 12), -1.0);
    let (img, b) = resize_for_model::<f64>(&s, 16).unwrap();
    assert_eq!(b, s.bbox);
    let expected: Tensor<f64> = normalize(&s.image.cast());
    assert_eq!(img, expected);

    let s = sample(32, 32, BoundingBox::new(0, 0, 31, 31), -1.0);
    let (_, b) = resize_for_model::<f64>(&s, 16).unwrap();
    assert_eq!(b, BoundingBox::new(0, 0, 15, 15));

    let s = sample(8, 12, BoundingBox::new(1, 1, 4, 4), 0.5);
    let (img, _) = resize_for_model::<f64>(&s, 16).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);
    assert!(img.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scale_box_rounds_half_up_and_clamps() {
    // 3 * 15/31 = 1.45 -> 1; 31 * 15/31 = 15
    assert_eq!(scale_box(&BoundingBox::new(3, 3, 31, 31), 32, 32, 16, 16), BoundingBox::new(1, 1, 15, 15));
    // 1 * 2/4 = 0.5 -> 1 (half up)
    assert_eq!(scale_box(&BoundingBox::new(1, 1, 1, 1), 5, 5, 3, 3), BoundingBox::new(1, 1, 1, 1));
}

#[test]
fn downsample_gt_examples() {
    let ones: Tensor<f64> = downsample_gt(&BinaryMask::from_fn(8, 8, |_, _| true), 4).unwrap();
    assert!(ones.data().iter().all(|&v| v == 1.0));
    let zeros: Tensor<f64> = downsample_gt(&BinaryMask::empty(8, 8), 4).unwrap();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    // Left three columns set: the half-pixel kernel straddles the edge.
    let half: Tensor<f64> = downsample_gt(&BinaryMask::from_fn(4, 4, |_, c| c < 3), 2).unwrap();
    assert_eq!(half.data()[0], 1.0);
    assert!(half.data()[1] > 0.0 && half.data()[1] < 1.0);
}

// --- splitting ----------------------------------------------------------------

fn entries(centers: &[(&str, usize)]) -> DatasetManifest {
    let mut out = Vec::new();
    for (c, n) in centers {
        for i in 0..*n {
            out.push(ManifestEntry {
                sample_id: format!("{c}_{i}"),
                image_path: format!("images/{c}_{i}.ppm"),
                mask_path: format!("masks/{c}_{i}.pgm"),
                center_id: c.to_string(),
                height: 8,
                width: 8,
                split: Split::Train,
                bbox: None,
            });
        }
    }
    DatasetManifest::new(out, None)
}

#[test]
fn split_counts_and_stratification() {
    let (m, warnings) = split_dataset(&entries(&[("a", 10)]), 0.8, 1).unwrap();
    assert!(warnings.is_empty());
    assert_eq!((m.count(Split::Train), m.count(Split::Val)), (8, 2));

    let (m, _) = split_dataset(&entries(&[("a", 10), ("b", 10)]), 0.8, 1).unwrap();
    for c in ["a", "b"] {
        let tr = m.entries.iter().filter(|e| e.center_id == c && e.split == Split::Train).count();
        let va = m.entries.iter().filter(|e| e.center_id == c && e.split == Split::Val).count();
        assert_eq!((tr, va), (8, 2), "center {c}");
    }
}

#[test]
fn split_is_deterministic_in_seed() {
    let base = entries(&[("a", 20), ("b", 7)]);
    let (x, _) = split_dataset(&base, 0.8, 4).unwrap();
    let (y, _) = split_dataset(&base, 0.8, 4).unwrap();
    assert_eq!(x, y);
    let differs = (0..20).any(|s| split_dataset(&base, 0.8, s).unwrap().0 != x);
    assert!(differs);
}

#[test]
fn split_small_center_and_test_entries() {
    let mut base = entries(&[("a", 1), ("b", 5)]);
    base.entries[1].split = Split::Test;
    let (m, warnings) = split_dataset(&base, 0.8, 0).unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(m.entries[0].split, Split::Train);
    assert_eq!(m.entries[1].split, Split::Test);
    assert!(matches!(split_dataset(&base, 1.0, 0), Err(Error::Config(_))));
    assert!(matches!(split_dataset(&base, 0.0, 0), Err(Error::Config(_))));
}

#[test]
fn samples_sharing_an_image_stay_together() {
    let mut base = entries(&[("a", 12)]);
    for (i, e) in base.entries.iter_mut().enumerate() {
        e.image_path = format!("images/a_{}.ppm", i / 2);
    }
    let (m, _) = split_dataset(&base, 0.8, 3).unwrap();
    for pair in m.entries.chunks(2) {
        assert_eq!(pair[0].split, pair[1].split);
    }
}

// --- loading ------------------------------------------------------------------

#[test]
fn write_then_load_round_trips_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CenterProfile::default();
    let m = generate_synthetic_dataset(&[profile], 2, dir.path(), 4, 1).unwrap();
    for e in &m.entries {
        let s = load_sample(dir.path(), e).unwrap();
        let (w, h, raw) = pnm::read_ppm(&dir.path().join(&e.image_path)).unwrap();
        assert_eq!((w, h), (s.width(), s.height()));
        for (i, &byte) in raw.iter().enumerate() {
            let (px, c) = (i / 3, i % 3);
            let v = s.image.data()[c * w * h + px];
            assert!((v as f64 - byte as f64 / 255.0).abs() < 1e-6);
        }
    }
    // Quantisation of real values is within half a level.
    for v in [0.0, 0.1234, 0.5, 0.99, 1.0] {
        assert!((pnm::quantize(v) as f64 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn stored_box_mismatch_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = generate_synthetic_dataset(&[CenterProfile::default()], 1, dir.path(), 4, 1).unwrap();
    let e = &mut m.entries[0];
    let mut b = e.bbox.unwrap();
    b.x_max -= 1;
    e.bbox = Some(b);
    assert!(matches!(load_sample(dir.path(), e), Err(Error::Integrity(_))));
}

#[test]
fn malformed_files_report_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    fs::write(&p, b"P5\n2 2\n15\n\x00\x00\x00\x00").unwrap();
    match pnm::read_pgm(&p) {
        Err(Error::Format { offset, message, .. }) => {
            assert!(message.contains("maxval"), "{message}");
            assert!(offset > 0);
        }
        other => panic!("expected format error, got {other:?}"),
    }
    fs::write(&p, b"P6\n2 2\n255\n").unwrap();
    assert!(matches!(pnm::read_pgm(&p), Err(Error::Format { .. })));
    fs::write(&p, b"P5\n2 2\n255\n\x00").unwrap();
    assert!(matches!(pnm::read_pgm(&p), Err(Error::Format { .. })));
}

#[test]
fn empty_mask_file_is_an_empty_mask_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(&[CenterProfile::default()], 1, dir.path(), 4, 1).unwrap();
    let mut e = m.entries[0].clone();
    e.bbox = None;
    let (w, h) = (e.width, e.height);
    pnm::write_pgm(&dir.path().join(&e.mask_path), w, h, &vec![0u8; w * h]).unwrap();
    assert!(matches!(load_sample(dir.path(), &e), Err(Error::EmptyMask(_))));
}

#[test]
fn synthetic_sample_is_deterministic() {
    let p = CenterProfile::default();
    let a = synthetic_sample(&p, 3, "x").unwrap();
    let b = synthetic_sample(&p, 3, "x").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.bbox, extract_box(&a.mask).unwrap());
}
