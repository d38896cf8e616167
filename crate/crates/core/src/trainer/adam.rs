use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{zero_grads, GradSet, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per parameter, plus a per-parameter step count so
/// bias correction stays right for parameters that start training late.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub steps: BTreeMap<String, u64>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: zero_grads(params), v: zero_grads(params), steps: params.keys().map(|k| (k.clone(), 0)).collect() }
    }
}

/// One bias-corrected Adam update of every parameter accepted by
/// `trainable`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g.data[i])));
        }
    }
    for (name, p) in params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::Data(format!("no gradient for parameter {name}")))?;
        if g.shape != p.shape {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape, p.shape)));
        }
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        let t = state.steps.entry(name.clone()).or_insert(0);
        *t += 1;
        let c1 = 1.0 - hyper.beta1.powi(*t as i32);
        let c2 = 1.0 - hyper.beta2.powi(*t as i32);
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar(0.0), &mut st, 0.1, &AdamHyper::default(), |_| true).unwrap();
        assert_eq!(p["w"].data[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(2.0);
        let mut st = OptimizerState::new(&p);
        let h = AdamHyper::default();
        adam_step(&mut p, &scalar(1.0), &mut st, 0.1, &h, |_| true).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p["w"].data[0] - expected).abs() < 1e-15);
        assert!((p["w"].data[0] - 1.9).abs() < 1e-8);
        assert_eq!(st.steps["w"], 1);
    }

    #[test]
    fn frozen_params_and_bad_grads() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar(1.0), &mut st, 0.1, &AdamHyper::default(), |_| false).unwrap();
        assert_eq!(p["w"].data[0], 1.0);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, 0.1, &AdamHyper::default(), |_| true).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(err.exit_code(), 3);
    }
}
