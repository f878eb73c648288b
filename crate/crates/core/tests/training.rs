//! Loss, schedule, optimizer, freezing and the training loop.

use std::collections::BTreeMap;
use std::fs;

use minipromptseg::data::{synthetic_sample, CenterProfile, SegmentationSample};
use minipromptseg::model::{init_params, load_checkpoint, ModelConfig};
use minipromptseg::ops::dice_loss;
use minipromptseg::training::*;
use minipromptseg::{Component, Error, ParameterStore, Tensor};

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

fn samples(n: usize, res: usize, seed: u64) -> Vec<SegmentationSample> {
    let profile = CenterProfile { width: res, height: res, ..CenterProfile::default() };
    (0..n)
        .map(|i| synthetic_sample(&profile, seed * 1000 + i as u64, &format!("s{i:02}")).unwrap())
        .collect()
}

fn quick(steps: usize, strategy: Strategy) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        effective_batch: 2,
        micro_batch: 1,
        eval_interval: 5,
        strategy,
        ..TrainConfig::default()
    }
}

fn bytes_of(store: &ParameterStore<f32>, keep: impl Fn(&str) -> bool) -> Vec<u8> {
    store
        .iter()
        .filter(|(n, _)| keep(n))
        .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .collect()
}

// --- dice loss ----------------------------------------------------------------

#[test]
fn dice_loss_examples() {
    let ones = Tensor::<f64>::ones(&[2, 2]);
    let zeros = Tensor::<f64>::zeros(&[2, 2]);
    let half = Tensor::<f64>::full(&[2, 2], 0.5);
    assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
    assert!((dice_loss(&zeros, &ones, 1.0).unwrap() - 0.8).abs() < 1e-12);
    assert!((dice_loss(&half, &ones, 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(dice_loss(&zeros, &zeros, 1.0).unwrap(), 0.0);
    assert!(matches!(dice_loss(&ones, &Tensor::ones(&[4]), 1.0), Err(Error::Dimension(_))));
}

#[test]
fn dice_loss_is_in_unit_interval() {
    let mut state = 1u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..200 {
        let p = Tensor::from_fn(&[3, 3], |_| next());
        let t = Tensor::from_fn(&[3, 3], |_| if next() > 0.5 { 1.0 } else { 0.0 });
        let l = dice_loss(&p, &t, 1.0).unwrap();
        assert!((0.0..1.0).contains(&l), "{l}");
    }
}

// --- schedule -----------------------------------------------------------------

fn sched(w: usize, t: usize) -> TrainConfig {
    TrainConfig { warmup_steps: Some(w), total_steps: t, base_lr: 1e-3, ..TrainConfig::default() }
}

#[test]
fn lr_schedule_examples() {
    let c = sched(10, 110);
    assert_eq!(lr_at(9, &c).unwrap(), 1e-3);
    let expected_end = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 99.0 / 100.0).cos());
    assert!((lr_at(109, &c).unwrap() - expected_end).abs() < 1e-15);
    assert!(lr_at(109, &c).unwrap() < 1e-6);
    assert!((lr_at(60, &c).unwrap() - 5e-4).abs() < 1e-15);
    assert!((lr_at(0, &c).unwrap() - 1e-4).abs() < 1e-18);
    assert!(matches!(lr_at(110, &c), Err(Error::Range(_))));
}

#[test]
fn lr_is_continuous_at_the_warmup_junction() {
    for (w, t) in [(1, 2), (5, 50), (10, 200), (20, 21)] {
        let c = sched(w, t);
        assert_eq!(lr_at(w - 1, &c).unwrap(), c.base_lr);
        assert_eq!(lr_at(w, &c).unwrap(), c.base_lr);
    }
}

#[test]
fn default_warmup_is_five_percent() {
    let c = TrainConfig { total_steps: 400, ..TrainConfig::default() };
    assert_eq!(c.warmup(), 20);
    assert_eq!(c.accumulation_steps(), 12);
}

#[test]
fn config_invariants_are_enforced() {
    let bad = TrainConfig { effective_batch: 10, micro_batch: 4, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig { warmup_steps: Some(200), total_steps: 200, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    TrainConfig::default().validate().unwrap();
}

// --- optimizer ----------------------------------------------------------------

fn one_param(v: f64) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    s.insert("mask_decoder.w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
    s
}

fn grad(g: f64) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([("mask_decoder.w".to_string(), vec![g])])
}

fn w(s: &ParameterStore<f64>) -> f64 {
    s.get("mask_decoder.w").unwrap().data()[0]
}

#[test]
fn adamw_examples() {
    let mut s = one_param(1.0);
    let hp = AdamW { weight_decay: 0.01, ..AdamW::default() };
    adamw_step(&mut s, &grad(0.0), &mut OptimizerState::new(), 0.1, &hp).unwrap();
    assert!((w(&s) - 0.999).abs() < 1e-9);

    let mut s = one_param(0.0);
    let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
    adamw_step(&mut s, &grad(3.0), &mut OptimizerState::new(), 1e-3, &hp).unwrap();
    assert!((w(&s) + 1e-3).abs() < 1e-9);

    let mut s = one_param(0.7);
    let mut st = OptimizerState::new();
    adamw_step(&mut s, &grad(-2.0), &mut st, 0.0, &AdamW::default()).unwrap();
    assert_eq!(w(&s), 0.7);
    assert_eq!(st.step, 1);
    assert_eq!(st.moments["mask_decoder.w"].m.len(), 1);
}

#[test]
fn adamw_rejects_bad_gradients_without_side_effects() {
    let mut s = one_param(0.5);
    let mut st = OptimizerState::new();
    let before = (w(&s), st.clone());
    for g in [f64::NAN, f64::INFINITY] {
        let err = adamw_step(&mut s, &grad(g), &mut st, 1e-3, &AdamW::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
    let err = adamw_step(&mut s, &BTreeMap::from([("mask_decoder.w".to_string(), vec![1.0, 2.0])]), &mut st, 1e-3, &AdamW::default());
    assert!(matches!(err, Err(Error::Dimension(_))));
    assert!(matches!(
        adamw_step(&mut s, &grad(1.0), &mut st, f64::MAX, &AdamW::default()),
        Err(Error::Numeric(_))
    ));
    assert_eq!((w(&s), st), before);
}

#[test]
fn adamw_refuses_to_update_constants() {
    let mut s = one_param(0.5);
    s.insert_constant("prompt_encoder.fourier_B", Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()).unwrap();
    let g = BTreeMap::from([("prompt_encoder.fourier_B".to_string(), vec![1.0, 1.0])]);
    assert!(matches!(
        adamw_step(&mut s, &g, &mut OptimizerState::new(), 1e-3, &AdamW::default()),
        Err(Error::Config(_))
    ));
}

// --- freezing -----------------------------------------------------------------

#[test]
fn freeze_presets() {
    let store = init_params::<f32>(&ModelConfig::default(), 0).unwrap();
    let dec = apply_freeze_policy(&store, &FreezePolicy::decoder_only());
    assert!(!dec.is_empty());
    let decoder_names: Vec<&str> = store.names().filter(|n| n.starts_with("mask_decoder.")).collect();
    assert_eq!(dec.iter().map(|s| s.as_str()).collect::<Vec<_>>(), decoder_names);

    let full = apply_freeze_policy(&store, &FreezePolicy::full());
    let trainable: Vec<&str> = store.trainable_names().collect();
    assert_eq!(full.iter().map(|s| s.as_str()).collect::<Vec<_>>(), trainable);
    assert!(!full.contains(minipromptseg::model::FOURIER_B));

    assert!(matches!(
        FreezePolicy::new([Component::ImageEncoder, Component::PromptEncoder, Component::MaskDecoder]),
        Err(Error::Config(_))
    ));
    assert_eq!("decoder-only".parse::<Strategy>().unwrap(), Strategy::DecoderOnly);
    assert_eq!(Strategy::Full.column(), "Finetune Enc-Dec");
    assert_eq!(Strategy::DecoderOnly.column(), "Finetune Dec");
}

// --- gradients and accumulation ------------------------------------------------

#[test]
fn accumulated_gradient_equals_full_batch_gradient() {
    let cfg = tiny();
    let params = init_params::<f64>(&cfg, 1).unwrap();
    let prepared = prepare_samples::<f64>(&samples(12, 16, 1), &cfg).unwrap();
    let batch: Vec<_> = prepared.iter().collect();
    let trainable = apply_freeze_policy(&params, &FreezePolicy::full());
    let micro = TrainConfig { effective_batch: 12, micro_batch: 3, ..TrainConfig::default() };
    let full = TrainConfig { effective_batch: 12, micro_batch: 12, ..TrainConfig::default() };
    let (la, ga) = batch_gradients(&params, &trainable, &cfg, &micro, &batch).unwrap();
    let (lb, gb) = batch_gradients(&params, &trainable, &cfg, &full, &batch).unwrap();
    assert!((la - lb).abs() < 1e-12);
    assert_eq!(ga.keys().collect::<Vec<_>>(), gb.keys().collect::<Vec<_>>());
    let (mut num, mut den) = (0.0, 0.0);
    for (k, a) in &ga {
        for (x, y) in a.iter().zip(&gb[k]) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    assert!((num / den).sqrt() < 1e-12);

    // Mean of per-sample gradients.
    let mut mean: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &prepared {
        let (_, g) = sample_gradients(&params, &trainable, &cfg, &full, s).unwrap();
        for (k, v) in g {
            let e = mean.entry(k).or_insert_with(|| vec![0.0; v.len()]);
            e.iter_mut().zip(&v).for_each(|(a, b)| *a += b / 12.0);
        }
    }
    for (k, a) in &ga {
        for (x, y) in a.iter().zip(&mean[k]) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{k}");
        }
    }
}

#[test]
fn frozen_components_receive_no_gradients_or_state() {
    let cfg = tiny();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let prepared = prepare_samples::<f32>(&samples(2, 16, 2), &cfg).unwrap();
    let trainable = apply_freeze_policy(&params, &FreezePolicy::decoder_only());
    let (_, g) = sample_gradients(&params, &trainable, &cfg, &TrainConfig::default(), &prepared[0]).unwrap();
    assert!(g.keys().all(|k| k.starts_with("mask_decoder.")));
    assert_eq!(g.len(), trainable.len());
}

// --- training loop ------------------------------------------------------------

#[test]
fn decoder_only_training_leaves_encoders_byte_identical() {
    let cfg = tiny();
    let init = init_params::<f32>(&cfg, 2).unwrap();
    let data = samples(6, 16, 3);
    let tcfg = TrainConfig { lambda_iou: 0.0, eval_interval: 50, ..quick(100, Strategy::DecoderOnly) };
    let out = train_on_samples(&cfg, &tcfg, &data[..4], &data[4..], init.clone(), None).unwrap();
    let not_decoder = |n: &str| !n.starts_with("mask_decoder.");
    assert_eq!(bytes_of(&out.params, not_decoder), bytes_of(&init, not_decoder));
    assert_ne!(bytes_of(&out.params, |_| true), bytes_of(&init, |_| true));
    assert!(out.optimizer.moments.keys().all(|k| k.starts_with("mask_decoder.")));
    assert_eq!(out.optimizer.step, 100);
}

#[test]
fn training_is_byte_deterministic() {
    let cfg = tiny();
    let data = samples(6, 16, 4);
    let tcfg = quick(12, Strategy::Full);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let init = init_params::<f32>(&cfg, 3).unwrap();
        train_on_samples(&cfg, &tcfg, &data[..4], &data[4..], init, Some(dir.path())).unwrap();
        let files: Vec<Vec<u8>> = ["best.json", "best.bin", "history.csv", "history.json"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        files
    };
    assert_eq!(run(), run());
}

#[test]
fn restored_weights_are_the_best_validation_record() {
    let cfg = tiny();
    let data = samples(8, 16, 5);
    let dir = tempfile::tempdir().unwrap();
    let tcfg = TrainConfig { eval_interval: 3, ..quick(20, Strategy::Full) };
    let init = init_params::<f32>(&cfg, 4).unwrap();
    let out = train_on_samples(&cfg, &tcfg, &data[..5], &data[5..], init, Some(dir.path())).unwrap();
    let h = &out.history;
    let steps: Vec<usize> = h.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 6, 9, 12, 15, 18, 20]);
    let max = h.records.iter().map(|r| r.val_dsc).fold(f64::MIN, f64::max);
    assert_eq!(h.best_val_dsc, max);
    let first_best = h.records.iter().find(|r| r.val_dsc == max).unwrap().step;
    assert_eq!(h.best_step, first_best);

    let prepared = prepare_samples::<f32>(&data[5..], &cfg).unwrap();
    let (dsc, miou) = validation_scores(&out.params, &cfg, &prepared, &data[5..]).unwrap();
    assert_eq!((dsc, miou), (h.best_val_dsc, h.best_val_miou));

    let (manifest, loaded) = load_checkpoint::<f32>(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(bytes_of(&loaded, |_| true), bytes_of(&out.params, |_| true));
    assert_eq!(manifest.metadata["step"], serde_json::json!(h.best_step));
    let csv = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(csv.starts_with("step,loss,val_dsc,val_miou,lr\n"));
    assert_eq!(csv.lines().count(), 1 + h.records.len());
}

#[test]
fn empty_splits_are_config_errors() {
    let cfg = tiny();
    let data = samples(2, 16, 6);
    let init = init_params::<f32>(&cfg, 0).unwrap();
    assert!(matches!(
        train_on_samples(&cfg, &quick(2, Strategy::Full), &data, &[], init.clone(), None),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_on_samples(&cfg, &quick(2, Strategy::Full), &[], &data, init, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let cfg = tiny();
    let data = samples(4, 16, 7);
    let dir = tempfile::tempdir().unwrap();
    let tcfg = TrainConfig { base_lr: 1e30, warmup_steps: Some(1), ..quick(50, Strategy::Full) };
    let init = init_params::<f32>(&cfg, 0).unwrap();
    let err = train_on_samples(&cfg, &tcfg, &data[..2], &data[2..], init, Some(dir.path()));
    assert!(matches!(err, Err(Error::Numeric(_))), "{:?}", err.as_ref().err());
    let (_, last) = load_checkpoint::<f32>(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert!(last.iter().all(|(_, t)| t.is_finite()));
    assert!(dir.path().join("history.json").exists());
}
