//! Metrics, full-resolution prediction, reports and evaluation protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use minipromptseg::data::{
    generate_synthetic_dataset, load_samples, split_dataset, synthetic_sample, BinaryMask, CenterProfile,
    SegmentationSample, Split,
};
use minipromptseg::eval::*;
use minipromptseg::model::{image_embedding, init_params, ModelConfig};
use minipromptseg::training::{apply_freeze_policy, prepare_samples, sample_gradients, Strategy as Preset, TrainConfig};
use minipromptseg::Error;
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_res: 16,
        patch_size: 8,
        embed_dim: 16,
        decoder_dim: 16,
        heads: 2,
        fourier_freqs: 4,
        depth: 1,
        ..ModelConfig::default()
    }
}

fn mask(bits: &[u8]) -> BinaryMask {
    BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
}

#[test]
fn metric_examples() {
    let (p, g) = (mask(&[1, 1, 0, 0]), mask(&[0, 1, 1, 0]));
    assert_eq!(dsc(&p, &g).unwrap(), 0.5);
    assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(dsc(&p, &p).unwrap(), 1.0);
    assert_eq!(iou(&p, &p).unwrap(), 1.0);
    let d = mask(&[0, 0, 1, 1]);
    assert_eq!(dsc(&p, &d).unwrap(), 0.0);
    assert_eq!(iou(&p, &d).unwrap(), 0.0);
    let e = mask(&[0, 0, 0, 0]);
    assert_eq!(dsc(&e, &e).unwrap(), 1.0);
    assert_eq!(iou(&e, &e).unwrap(), 1.0);
    assert_eq!(dsc(&e, &g).unwrap(), 0.0);
    assert!(matches!(dsc(&p, &mask(&[1, 0])), Err(Error::Dimension(_))));
    assert!(matches!(iou(&p, &mask(&[1, 0])), Err(Error::Dimension(_))));
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        let bits = prop::collection::vec(any::<bool>(), h * w);
        (bits.clone(), bits).prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_counting_oracle((p, g) in mask_pair()) {
        let (mut i, mut np, mut ng) = (0u64, 0u64, 0u64);
        for (a, b) in p.data().iter().zip(g.data()) {
            i += (*a && *b) as u64;
            np += *a as u64;
            ng += *b as u64;
        }
        let u = np + ng - i;
        let d = dsc(&p, &g).unwrap();
        let j = iou(&p, &g).unwrap();
        if np + ng == 0 {
            prop_assert_eq!((d, j), (1.0, 1.0));
        } else {
            prop_assert_eq!(d, (2 * i) as f64 / (np + ng) as f64);
            prop_assert_eq!(j, i as f64 / u as f64);
        }
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!(j <= d);
        prop_assert_eq!(j == d, j == 0.0 || j == 1.0);
    }
}

#[test]
fn full_resolution_output_has_original_shape() {
    let cfg = tiny();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    for (w, h) in [(16, 16), (40, 24), (23, 57)] {
        let p = CenterProfile { width: w, height: h, area_fraction: (0.05, 0.2), ..CenterProfile::default() };
        let s = synthetic_sample(&p, 1, "x").unwrap();
        let m = predict_full_res(&params, &cfg, &s).unwrap();
        assert_eq!((m.height(), m.width()), (h, w));
    }
}

#[test]
fn constant_logits_give_full_or_empty_masks() {
    let pos = minipromptseg::Tensor::<f32>::full(&[3, 8, 8], 2.0);
    assert_eq!(logits_to_mask(&pos, 9, 11).unwrap().count(), 99);
    let neg = minipromptseg::Tensor::<f32>::full(&[3, 8, 8], -2.0);
    assert!(logits_to_mask(&neg, 9, 11).unwrap().is_empty());
}

fn dataset(n_per: usize) -> Vec<SegmentationSample> {
    let mut out = Vec::new();
    for (c, p) in CenterProfile::builtin(3).iter().enumerate() {
        for i in 0..n_per {
            let mut s = synthetic_sample(p, (c * 100 + i) as u64, &format!("{}_{i}", p.name)).unwrap();
            s.center_id = p.name.clone();
            out.push(s);
        }
    }
    out
}

#[test]
fn evaluation_is_order_and_thread_independent() {
    let cfg = tiny();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let data = dataset(3);
    let base = evaluate(&params, &cfg, &data, "test", BTreeMap::new(), 1).unwrap();
    let mut shuffled = data.clone();
    shuffled.reverse();
    shuffled.swap(0, 4);
    let other = evaluate(&params, &cfg, &shuffled, "test", BTreeMap::new(), 3).unwrap();
    assert_eq!(base, other);
    assert_eq!(base.to_csv().unwrap(), other.to_csv().unwrap());
}

#[test]
fn oracle_evaluation_is_perfect() {
    let data = dataset(2);
    let r = evaluate_oracle(&data, "oracle").unwrap();
    assert_eq!(r.rows.len(), 3);
    for row in r.rows.iter().chain([&r.overall]) {
        assert_eq!((row.dsc, row.miou), (1.0, 1.0));
    }
    assert_eq!(r.overall.n_samples, 6);
}

fn metric(id: &str, center: &str, i: usize, p: usize, g: usize) -> SampleMetrics {
    SampleMetrics::new(id, center, Overlap { intersection: i, pred: p, gt: g })
}

#[test]
fn overall_row_is_sample_weighted() {
    let samples = vec![
        metric("a0", "a", 4, 5, 5),
        metric("b0", "b", 3, 5, 5),
        metric("b1", "b", 3, 5, 5),
        metric("b2", "b", 3, 5, 5),
    ];
    let r = MetricsReport::from_samples(samples, "p", BTreeMap::new()).unwrap();
    assert!((r.row("a").unwrap().dsc - 0.8).abs() < 1e-15);
    assert!((r.row("b").unwrap().dsc - 0.6).abs() < 1e-15);
    assert!((r.overall.dsc - 0.65).abs() < 1e-15);
    assert_eq!(r.overall.center_id, OVERALL);

    let single = MetricsReport::from_samples(vec![metric("x", "c", 2, 3, 4)], "p", BTreeMap::new()).unwrap();
    assert_eq!(single.overall.dsc, single.samples[0].dsc);
    assert_eq!(single.overall.miou, single.samples[0].iou);
    assert!(matches!(MetricsReport::from_samples(vec![], "p", BTreeMap::new()), Err(Error::Config(_))));
}

#[test]
fn report_files_have_one_row_per_center_plus_overall() {
    let dir = tempfile::tempdir().unwrap();
    let r = evaluate_oracle(&dataset(2), "oracle").unwrap();
    r.write(dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "center_id,n_samples,dsc,miou");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("overall,6,"));
    let json: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json, r);
}

// --- protocols ----------------------------------------------------------------

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        effective_batch: 2,
        micro_batch: 1,
        eval_interval: steps,
        ..TrainConfig::default()
    }
}

#[test]
fn strategy_comparison_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = generate_synthetic_dataset(&CenterProfile::builtin(2), 4, &data, 3, 1).unwrap();
    let (m, _) = split_dataset(&m, 0.5, 3).unwrap();
    let cfg = tiny();
    let base = init_params::<f32>(&cfg, 0).unwrap();
    let out = dir.path().join("out");
    let c = run_strategy_comparison(&cfg, &small_train(3), &m, &data, &base, Some(&out), 1).unwrap();
    assert_eq!(c.columns, vec!["Finetune Dec", "Finetune Enc-Dec"]);
    assert_eq!(c.metrics, vec!["DSC", "mIoU"]);
    let centers: Vec<&str> = c.rows.iter().map(|r| r.center_id.as_str()).collect();
    assert_eq!(centers, vec!["center_a", "center_b"]);
    assert_eq!(c.overall.center_id, OVERALL);
    assert_eq!(c.overall.n_samples, m.count(Split::Val));
    assert_eq!(c.decoder_only.metadata["strategy"], "decoder-only");
    assert_eq!(c.full.metadata["strategy"], "full");
    let md = c.to_markdown();
    assert!(md.starts_with("| Center | Finetune Dec DSC | Finetune Dec mIoU | Finetune Enc-Dec DSC | Finetune Enc-Dec mIoU |"));
    let csv = c.to_csv().unwrap();
    assert!(csv.starts_with(
        "center_id,n_samples,finetune_dec_dsc,finetune_dec_miou,finetune_enc_dec_dsc,finetune_enc_dec_miou"
    ));
    for f in ["report.json", "report.csv", "decoder-only/best.json", "full/best.json", "full/history.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn both_strategies_share_the_first_forward_pass() {
    let cfg = tiny();
    let base = init_params::<f32>(&cfg, 5).unwrap();
    let data = dataset(1);
    let tcfg = TrainConfig::default();
    let prepared = prepare_samples::<f32>(&data, &cfg).unwrap();
    let dec = apply_freeze_policy(&base, &Preset::DecoderOnly.policy());
    let full = apply_freeze_policy(&base, &Preset::Full.policy());
    for s in &prepared {
        let mut cached = s.clone();
        cached.embedding = Some(image_embedding(&base, &cfg, &s.input.image).unwrap());
        let (l_dec, _) = sample_gradients(&base, &dec, &cfg, &tcfg, &cached).unwrap();
        let (l_full, _) = sample_gradients(&base, &full, &cfg, &tcfg, s).unwrap();
        assert_eq!(l_dec.to_bits(), l_full.to_bits());
    }
}

#[test]
fn cross_dataset_reports_only_held_out_centers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = generate_synthetic_dataset(&CenterProfile::builtin(3), 4, &data, 8, 1).unwrap();
    let cfg = tiny();
    let train: BTreeSet<String> = ["center_a".to_string(), "center_b".to_string()].into();
    let held: BTreeSet<String> = ["center_c".to_string()].into();
    let out = dir.path().join("out");
    let init = init_params::<f32>(&cfg, 0).unwrap();
    let r = run_cross_dataset(&cfg, &small_train(2), &m, &data, &train, &held, init, Some(&out), 1).unwrap();
    assert_eq!(r.report.protocol, "cross-dataset");
    let rows: Vec<&str> = r.report.rows.iter().map(|r| r.center_id.as_str()).collect();
    assert_eq!(rows, vec!["center_c"]);
    assert_eq!(r.report.overall.n_samples, 4);
    assert!(r.audit.passed);
    assert!(r.audit.overlapping_sample_ids.is_empty());
    assert_eq!(r.audit.train_samples + r.audit.val_samples, 8);
    assert!(r.in_domain.rows.iter().all(|row| train.contains(&row.center_id)));
    assert!(r.to_markdown().contains("held-out DSC"));
    for f in ["report.json", "report.csv", "audit.json", "in_domain/report.json", "best.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn cross_dataset_rejects_bad_center_sets() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(&CenterProfile::builtin(2), 2, dir.path(), 8, 1).unwrap();
    let cfg = tiny();
    let a: BTreeSet<String> = ["center_a".to_string()].into();
    let ab: BTreeSet<String> = ["center_a".to_string(), "center_b".to_string()].into();
    let z: BTreeSet<String> = ["center_z".to_string()].into();
    let init = || init_params::<f32>(&cfg, 0).unwrap();
    let run = |t: &BTreeSet<String>, h: &BTreeSet<String>| {
        run_cross_dataset(&cfg, &small_train(1), &m, dir.path(), t, h, init(), None, 1)
    };
    assert!(matches!(run(&ab, &a), Err(Error::Config(_))));
    assert!(matches!(run(&a, &z), Err(Error::Config(_))));
    assert!(matches!(run(&a, &BTreeSet::new()), Err(Error::Config(_))));
}

#[test]
fn audit_detects_leaks() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = generate_synthetic_dataset(&CenterProfile::builtin(2), 2, dir.path(), 8, 1).unwrap();
    let held: BTreeSet<String> = ["center_b".to_string()].into();
    assert!(audit_disjointness(&m, &held).passed);
    // A training entry pointing at a held-out image is a leak.
    let leaked = m.entries.iter().find(|e| e.center_id == "center_b").unwrap().image_path.clone();
    m.entries[0].image_path = leaked.clone();
    let audit = audit_disjointness(&m, &held);
    assert!(!audit.passed);
    assert_eq!(audit.overlapping_images, vec![leaked]);
    let samples = load_samples(dir.path(), &m.with_split(Split::Train)[1..]).unwrap();
    assert!(!samples.is_empty());
}
