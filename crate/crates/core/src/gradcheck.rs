//! Central-difference verification of reverse-mode gradients (64-bit).

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{synthetic_sample, BinaryMask, CenterProfile};
use crate::error::{Error, Result};
use crate::eval::{overlap, predict_logits};
use crate::model::{init_params, ModelConfig};
use crate::training::{apply_freeze_policy, prepare_samples, sample_loss, FreezePolicy, TrainConfig};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::Tensor;

/// Which elements of each checked tensor are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    /// Every scalar element.
    Exhaustive,
    /// Up to `per_tensor` elements per tensor, chosen by `seed`, plus one
    /// random-direction probe over the whole tensor.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct ElementCheck {
    pub name: String,
    /// Flat element index, or `None` for a whole-tensor directional probe.
    pub index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ElementCheck>,
    pub tensors_checked: usize,
    pub elements_checked: usize,
    pub directional_probes: usize,
    /// Every individual comparison, in check order.
    #[serde(skip)]
    pub checks: Vec<ElementCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of a scalar computation with respect to each of
/// `inputs`. `f` receives the recorded inputs in order.
pub fn check_inputs<F>(
    inputs: &[(String, Tensor<f64>)],
    h: f64,
    coverage: Coverage,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| graph.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| {
            graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(graph);

    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("loss is not finite under perturbation".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        tensors_checked: 0,
        elements_checked: 0,
        directional_probes: 0,
        checks: Vec::new(),
    };
    let record = |report: &mut GradCheckReport, check: ElementCheck| {
        if report.worst.is_none() || check.rel_error > report.max_rel_error {
            report.max_rel_error = check.rel_error;
            report.worst = Some(check.clone());
        }
        report.checks.push(check);
    };

    for (ti, (name, original)) in inputs.iter().enumerate() {
        report.tensors_checked += 1;
        let n = original.numel();
        let indices: Vec<usize> = match coverage {
            Coverage::Exhaustive => (0..n).collect(),
            Coverage::Sampled { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9E37_79B9));
                let mut idx = sample(&mut rng, n, per_tensor.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in indices {
            let p = original.data()[i];
            work[ti].data_mut()[i] = p + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = p - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = p;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][i];
            report.elements_checked += 1;
            record(
                &mut report,
                ElementCheck {
                    name: name.clone(),
                    index: Some(i),
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                },
            );
        }
        if let Coverage::Sampled { seed, .. } = coverage {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ti as u64 + 1));
            let mut dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter_mut().for_each(|v| *v /= norm);
            let step = |w: &mut Tensor<f64>, s: f64| {
                for ((x, &o), &d) in w.data_mut().iter_mut().zip(original.data()).zip(&dir) {
                    *x = o + s * d;
                }
            };
            step(&mut work[ti], h);
            let plus = eval(&work)?;
            step(&mut work[ti], -h);
            let minus = eval(&work)?;
            work[ti] = original.clone();
            let numeric = (plus - minus) / (2.0 * h);
            let a: f64 = analytic[ti].iter().zip(&dir).map(|(g, d)| g * d).sum();
            report.directional_probes += 1;
            record(
                &mut report,
                ElementCheck {
                    name: name.clone(),
                    index: None,
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                },
            );
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to the named parameters `names`
/// of `params`; all other tensors are held constant.
pub fn gradient_check<F>(
    params: &ParameterStore<f64>,
    names: &BTreeSet<String>,
    h: f64,
    coverage: Coverage,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let checked: Vec<(String, Tensor<f64>)> = names
        .iter()
        .map(|n| Ok((n.clone(), params.get(n)?.clone())))
        .collect::<Result<_>>()?;
    let fixed: Vec<(String, Tensor<f64>)> = params
        .iter()
        .filter(|(n, _)| !names.contains(*n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    check_inputs(&checked, h, coverage, |g, vars| {
        let mut pairs: Vec<(String, Var)> = checked
            .iter()
            .zip(vars)
            .map(|((n, _), &v)| (n.clone(), v))
            .collect();
        for (n, t) in &fixed {
            pairs.push((n.clone(), g.constant(t.clone())));
        }
        f(g, &BoundParams::from_pairs(pairs))
    })
}

/// Checks the whole network under the training objective (Dice on the
/// primary mask plus the IoU-head regression) on one synthetic sample at the
/// model's resolution. IoU targets are measured once at the unperturbed
/// weights and then held fixed, so the objective is smooth. `names = None`
/// checks every trainable tensor.
pub fn model_gradient_check(
    cfg: &ModelConfig,
    names: Option<&BTreeSet<String>>,
    h: f64,
    coverage: Coverage,
    seed: u64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let params = init_params::<f64>(cfg, seed)?;
    let profile = CenterProfile {
        width: cfg.input_res,
        height: cfg.input_res,
        ..CenterProfile::default()
    };
    let sample = synthetic_sample(&profile, seed, "gradcheck")?;
    let mut prep = prepare_samples::<f64>(std::slice::from_ref(&sample), cfg)?.remove(0);
    let (logits, _) = predict_logits(&params, cfg, &prep.input)?;
    let targets = (0..cfg.num_mask_tokens)
        .map(|m| {
            let pred = BinaryMask::from_tensor(&logits.channel(m)?, 0.0)?;
            Ok(overlap(&pred, &prep.target_mask)?.iou())
        })
        .collect::<Result<Vec<f64>>>()?;
    prep.iou_targets = Some(targets);
    let all = apply_freeze_policy(&params, &FreezePolicy::full());
    let names = names.unwrap_or(&all);
    let tcfg = TrainConfig::default();
    gradient_check(&params, names, h, coverage, |g, p| sample_loss(g, p, cfg, &tcfg, &prep))
}
