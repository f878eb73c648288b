use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments of one parameter, flat like its data.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Per-parameter moments and the step counter. Parameters that never
/// received a gradient (frozen ones) have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T> OptimizerState<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of every parameter in `grads`: decoupled decay
/// `p ← p(1 − lr·wd)`, then `p ← p − lr·m̂/(√v̂ + ε)`.
///
/// Nothing is modified if any gradient or updated value is non-finite, or a
/// gradient is malformed.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        if params.is_constant(name) {
            return Err(Error::Config(format!("{name} is a constant and cannot be optimised")));
        }
        let n = params.get(name)?.numel();
        if g.len() != n {
            return Err(Error::Dimension(format!(
                "gradient for {name} has {} elements, parameter has {n}",
                g.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name} at element {i}"
            )));
        }
    }
    let t = (state.step + 1) as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let one = T::one();
    let bc1 = T::lit(1.0 - hp.beta1.powi(t));
    let bc2 = T::lit(1.0 - hp.beta2.powi(t));
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * hp.weight_decay);
    let eps = T::lit(hp.eps);
    // Stage every update first so a non-finite result leaves nothing changed.
    let mut staged = Vec::with_capacity(grads.len());
    for (name, g) in grads {
        let n = g.len();
        let (m0, v0) = match state.moments.get(name) {
            Some(mom) => (mom.m.clone(), mom.v.clone()),
            None => (vec![T::zero(); n], vec![T::zero(); n]),
        };
        let mut p = params.get(name)?.data().to_vec();
        let (mut m, mut v) = (m0, v0);
        for i in 0..n {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "update of {name} is non-finite at element {i}"
            )));
        }
        staged.push((name, p, Moments { m, v }));
    }
    for (name, p, mom) in staged {
        params.get_mut(name)?.data_mut().copy_from_slice(&p);
        state.moments.insert(name.clone(), mom);
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(p: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("mask_decoder.w", Tensor::from_f64(&[1], &[p]).unwrap()).unwrap();
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Vec<f64>> {
        [("mask_decoder.w".to_string(), vec![g])].into()
    }

    fn value(s: &ParameterStore<f64>) -> f64 {
        s.get("mask_decoder.w").unwrap().data()[0]
    }

    #[test]
    fn decay_only_when_gradient_is_zero() {
        let mut s = single(1.0);
        let hp = AdamW { weight_decay: 0.01, ..AdamW::default() };
        adamw_step(&mut s, &grads(0.0), &mut OptimizerState::new(), 0.1, &hp).unwrap();
        assert!((value(&s) - 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = single(0.0);
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        adamw_step(&mut s, &grads(3.0), &mut OptimizerState::new(), 1e-3, &hp).unwrap();
        assert!((value(&s) + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_identity_and_non_finite_aborts() {
        let mut s = single(0.7);
        let mut st = OptimizerState::new();
        adamw_step(&mut s, &grads(2.0), &mut st, 0.0, &AdamW::default()).unwrap();
        assert_eq!(value(&s), 0.7);
        let before = st.clone();
        let err = adamw_step(&mut s, &grads(f64::NAN), &mut st, 0.1, &AdamW::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(st, before);
        assert_eq!(value(&s), 0.7);
    }
}
