//! Built-in oracle suites for metrics, loss, schedule, optimizer and
//! freezing, runnable from the command line.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::BinaryMask;
use crate::error::Result;
use crate::eval::{dsc, iou};
use crate::model::{init_params, ModelConfig};
use crate::ops::dice_loss;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::training::{adamw_step, apply_freeze_policy, lr_at, AdamW, FreezePolicy, OptimizerState, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Compares `dsc`/`iou` with pixel counting on `pairs` random 16×16 masks.
pub fn metric_oracle(pairs: usize, seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mismatches, mut worst_identity) = (0usize, 0.0f64);
    for _ in 0..pairs {
        let density_p = rng.random_range(0.0..1.0);
        let density_g = rng.random_range(0.0..1.0);
        let mut p = BinaryMask::empty(16, 16);
        let mut g = BinaryMask::empty(16, 16);
        let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
        for r in 0..16 {
            for c in 0..16 {
                let a = rng.random_bool(density_p);
                let b = rng.random_bool(density_g);
                p.set(r, c, a);
                g.set(r, c, b);
                inter += (a && b) as u64;
                np += a as u64;
                ng += b as u64;
            }
        }
        let union = np + ng - inter;
        let want_d = if np + ng == 0 { 1.0 } else { (2 * inter) as f64 / (np + ng) as f64 };
        let want_i = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let (d, i) = (dsc(&p, &g)?, iou(&p, &g)?);
        if d != want_d || i != want_i {
            mismatches += 1;
        }
        worst_identity = worst_identity.max((d - 2.0 * i / (1.0 + i)).abs());
    }
    Ok(check(
        "metrics: counting oracle and d = 2i/(1+i)",
        mismatches == 0 && worst_identity <= 1e-12,
        format!("{pairs} pairs, {mismatches} mismatches, max |d - 2i/(1+i)| = {worst_identity:.3e}"),
    ))
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> SelfCheck {
    let err = (got - want).abs();
    check(name, err <= tol, format!("got {got:.12e}, expected {want:.12e}, |err| = {err:.3e}"))
}

pub fn loss_checks() -> Result<Vec<SelfCheck>> {
    let ones = Tensor::<f64>::ones(&[2, 2]);
    let zeros = Tensor::<f64>::zeros(&[2, 2]);
    let half = Tensor::<f64>::full(&[2, 2], 0.5);
    Ok(vec![
        close("dice_loss: perfect overlap", dice_loss(&ones, &ones, 1.0)?, 0.0, 1e-9),
        close("dice_loss: empty prediction, eps 1", dice_loss(&zeros, &ones, 1.0)?, 0.8, 1e-9),
        close("dice_loss: uniform 0.5, eps 0", dice_loss(&half, &ones, 0.0)?, 1.0 / 3.0, 1e-9),
    ])
}

pub fn schedule_checks() -> Result<Vec<SelfCheck>> {
    let cfg = TrainConfig {
        base_lr: 1e-3,
        warmup_steps: Some(10),
        total_steps: 110,
        ..TrainConfig::default()
    };
    let last = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 99.0 / 100.0).cos());
    Ok(vec![
        close("lr_at: warmup endpoint", lr_at(9, &cfg)?, 1e-3, 1e-9),
        close("lr_at: cosine endpoint", lr_at(109, &cfg)?, last, 1e-9),
        close("lr_at: annealing midpoint", lr_at(60, &cfg)?, 5e-4, 1e-9),
        close("lr_at: junction continuity", lr_at(10, &cfg)?, lr_at(9, &cfg)?, 1e-9),
    ])
}

fn one_param_step(p: f64, g: f64, lr: f64, wd: f64) -> Result<f64> {
    let mut s = ParameterStore::new();
    s.insert("mask_decoder.w", Tensor::from_f64(&[1], &[p])?)?;
    let grads = BTreeMap::from([("mask_decoder.w".to_string(), vec![g])]);
    let hp = AdamW {
        weight_decay: wd,
        ..AdamW::default()
    };
    adamw_step(&mut s, &grads, &mut OptimizerState::new(), lr, &hp)?;
    Ok(s.get("mask_decoder.w")?.data()[0])
}

pub fn optimizer_checks() -> Result<Vec<SelfCheck>> {
    let first = 1e-3 * 3.0 / (3.0 + 1e-8);
    Ok(vec![
        close("adamw: decay only", one_param_step(1.0, 0.0, 0.1, 0.01)?, 0.999, 1e-9),
        close("adamw: first step", one_param_step(0.0, 3.0, 1e-3, 0.0)?, -first, 1e-9),
        close("adamw: zero lr", one_param_step(0.7, 2.0, 0.0, 0.01)?, 0.7, 0.0),
    ])
}

pub fn freeze_checks() -> Result<Vec<SelfCheck>> {
    let p = init_params::<f32>(&ModelConfig::tiny(), 0)?;
    let dec = apply_freeze_policy(&p, &FreezePolicy::decoder_only());
    let full = apply_freeze_policy(&p, &FreezePolicy::full());
    let n_dec = p.names().filter(|n| n.starts_with("mask_decoder.")).count();
    Ok(vec![
        check(
            "freeze: decoder-only trains exactly the mask decoder",
            dec.len() == n_dec && dec.iter().all(|n| n.starts_with("mask_decoder.")),
            format!("{} of {} tensors trainable", dec.len(), p.len()),
        ),
        check(
            "freeze: full trains every non-constant tensor",
            full.len() == p.trainable_names().count(),
            format!("{} of {} tensors trainable", full.len(), p.len()),
        ),
        check(
            "freeze: the decoder cannot be frozen",
            FreezePolicy::new(crate::params::Component::ALL).is_err(),
            String::new(),
        ),
    ])
}

pub fn run_all(seed: u64) -> Result<Vec<SelfCheck>> {
    let mut out = vec![metric_oracle(1000, seed)?];
    out.extend(loss_checks()?);
    out.extend(schedule_checks()?);
    out.extend(optimizer_checks()?);
    out.extend(freeze_checks()?);
    Ok(out)
}
