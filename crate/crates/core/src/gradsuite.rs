//! Finite-difference verification of every differentiable op, both losses,
//! their hybrid and the assembled model.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::nn::gradcheck::{grad_check, GradReport};
use crate::nn::{ops, Model, ModelConfig, Tensor};
use crate::rng::{self, Purpose, Stream};
use crate::trainer::{compute_step, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Scales the analytic dense weight gradient by 1.01, to confirm the
    /// suite notices a broken backward pass.
    pub inject_dense_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { instances: 20, tolerance: 1e-5, seed: 0, inject_dense_fault: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>13} {:>6}", "op", "instances", "max_rel_err", "status")?;
        for c in &self.checks {
            let status = if c.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<28} {:>9} {:>13.3e} {:>6}", c.op, c.instances, c.max_rel_err, status)?;
        }
        Ok(())
    }
}

type Check = fn(&mut Stream, &SuiteOptions) -> Result<GradReport>;

const CHECKS: [(&str, Check); 13] = [
    ("dense", check_dense),
    ("relu", check_relu),
    ("conv2d", check_conv),
    ("maxpool2d", check_maxpool),
    ("global_avg_pool", check_gap),
    ("l2_normalize", check_l2),
    ("cross_entropy", check_ce),
    ("sup_contrastive", check_supcon_excl),
    ("sup_contrastive_self", check_supcon_incl),
    ("hybrid", check_hybrid),
    ("model+cross_entropy", check_model_ce),
    ("model+sup_contrastive", check_model_supcon),
    ("model+hybrid", check_model_hybrid),
];

/// Names of the checks [`run_suite`] reports, in order.
pub fn op_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::with_capacity(CHECKS.len());
    for (idx, (name, check)) in CHECKS.iter().enumerate() {
        let mut worst: Option<GradReport> = None;
        for inst in 0..opts.instances {
            let mut rng = rng::stream(opts.seed, Purpose::Init, 1000 + idx as u64, inst as u64);
            let r = check(&mut rng, opts)?;
            worst = Some(match worst {
                Some(w) => w.merge(r),
                None => r,
            });
        }
        checks.push(OpCheck {
            op: name,
            instances: opts.instances,
            max_rel_err: worst.map_or(0.0, |w| w.max_rel_err),
            tolerance: opts.tolerance,
        });
    }
    Ok(SuiteReport { checks })
}

fn rand_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Splits a flat vector into tensors shaped like `like`.
fn unflatten(flat: &[f64], like: &[&Tensor]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let data = flat[off..off + t.len()].to_vec();
            off += t.len();
            Tensor { shape: t.shape.clone(), data }
        })
        .collect()
}

fn flatten(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Labels where every class present has at least two members.
fn paired_labels(rng: &mut Stream, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| (i / 2) % classes).collect();
    if n % 2 == 1 {
        labels[n - 1] = labels[0];
    }
    labels.shuffle(rng);
    labels
}

fn check_dense(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let (n, i, o) = (3, 5, 4);
    let (x, w, b, r) =
        (rand_tensor(rng, &[n, i]), rand_tensor(rng, &[i, o]), rand_tensor(rng, &[o]), rand_tensor(rng, &[n, o]));
    let mut g = ops::dense_backward(&x, &w, &r)?;
    if opts.inject_dense_fault {
        g.w.scale(1.01);
    }
    let f = |p: &[f64]| {
        let t = unflatten(p, &[&x, &w, &b]);
        dot(&ops::dense(&t[0], &t[1], &t[2]).expect("dense shapes"), &r)
    };
    Ok(grad_check(f, &flatten(&[&x, &w, &b]), &flatten(&[&g.x, &g.w, &g.b]), opts.tolerance))
}

fn check_relu(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let mut x = rand_tensor(rng, &[4, 6]);
    // keep inputs away from the kink, where the derivative is undefined
    for v in &mut x.data {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let r = rand_tensor(rng, &[4, 6]);
    let g = ops::relu_backward(&x, &r);
    let f = |p: &[f64]| {
        let t = Tensor { shape: x.shape.clone(), data: p.to_vec() };
        dot(&ops::relu(&t), &r)
    };
    Ok(grad_check(f, &x.data, &g.data, opts.tolerance))
}

fn check_conv(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let (x, k, b) = (rand_tensor(rng, &[2, 2, 5, 6]), rand_tensor(rng, &[3, 2, 3, 3]), rand_tensor(rng, &[3]));
    let r = rand_tensor(rng, &[2, 3, 5, 6]);
    let g = ops::conv2d_backward(&x, &k, &r)?;
    let f = |p: &[f64]| {
        let t = unflatten(p, &[&x, &k, &b]);
        dot(&ops::conv2d(&t[0], &t[1], &t[2]).expect("conv shapes"), &r)
    };
    Ok(grad_check(f, &flatten(&[&x, &k, &b]), &flatten(&[&g.x, &g.k, &g.b]), opts.tolerance))
}

fn check_maxpool(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let shape = [2, 2, 4, 6];
    let n: usize = shape.iter().product();
    // distinct values spaced far beyond the finite-difference step, so no
    // perturbation changes which element wins a window
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    data.shuffle(rng);
    let x = Tensor { shape: shape.to_vec(), data };
    let (out, arg) = ops::maxpool2d(&x)?;
    let r = rand_tensor(rng, &out.shape);
    let g = ops::maxpool2d_backward(&x.shape, &arg, &r);
    let f = |p: &[f64]| {
        let t = Tensor { shape: shape.to_vec(), data: p.to_vec() };
        dot(&ops::maxpool2d(&t).expect("pool shapes").0, &r)
    };
    Ok(grad_check(f, &x.data, &g.data, opts.tolerance))
}

fn check_gap(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let x = rand_tensor(rng, &[2, 3, 4, 5]);
    let r = rand_tensor(rng, &[2, 3]);
    let g = ops::global_avg_pool_backward(&x.shape, &r);
    let f = |p: &[f64]| {
        let t = Tensor { shape: x.shape.clone(), data: p.to_vec() };
        dot(&ops::global_avg_pool(&t).expect("gap shapes"), &r)
    };
    Ok(grad_check(f, &x.data, &g.data, opts.tolerance))
}

fn check_l2(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let x = rand_tensor(rng, &[4, 5]);
    let r = rand_tensor(rng, &[4, 5]);
    let (z, norms) = ops::l2_normalize(&x)?;
    let g = ops::l2_normalize_backward(&z, &norms, &r);
    let f = |p: &[f64]| {
        let t = Tensor { shape: x.shape.clone(), data: p.to_vec() };
        dot(&ops::l2_normalize(&t).expect("nonzero rows").0, &r)
    };
    Ok(grad_check(f, &x.data, &g.data, opts.tolerance))
}

fn check_ce(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let (n, c) = (6, 5);
    let mut logits = rand_tensor(rng, &[n, c]);
    logits.scale(3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let v = losses::cross_entropy(&logits, &labels)?;
    let f = |p: &[f64]| {
        let t = Tensor { shape: logits.shape.clone(), data: p.to_vec() };
        losses::cross_entropy(&t, &labels).expect("valid logits").value
    };
    Ok(grad_check(f, &logits.data, &v.grad.data, opts.tolerance))
}

const TAUS: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

fn unit_rows(rng: &mut Stream, n: usize, d: usize) -> Result<Tensor> {
    Ok(ops::l2_normalize(&rand_tensor(rng, &[n, d]))?.0)
}

/// Smallest gradient scale a loss instance needs before central
/// differences resolve its smaller components above rounding noise: the
/// similarity terms reach `1/τ = 20`, so the loss carries absolute
/// rounding error near `20 ε` and its differences near `20 ε / FD_STEP`.
const MIN_SIGNAL: f64 = 1e-2;

/// Draws unit-norm projections until the loss is not saturated. At small
/// temperatures a well-separated batch has a loss within rounding of zero,
/// where finite differences measure only noise.
fn unsaturated(
    rng: &mut Stream,
    n: usize,
    d: usize,
    loss: impl Fn(&Tensor) -> Result<losses::LossValue>,
) -> Result<(Tensor, losses::LossValue)> {
    loop {
        let z = unit_rows(rng, n, d)?;
        let v = loss(&z)?;
        if v.grad.data.iter().any(|g| g.abs() >= MIN_SIGNAL) {
            return Ok((z, v));
        }
    }
}

fn check_supcon(rng: &mut Stream, opts: &SuiteOptions, self_in_numerator: bool) -> Result<GradReport> {
    let (n, d) = (rng.random_range(4..=8), rng.random_range(2..=5));
    let cfg = LossConfig { tau: TAUS[rng.random_range(0..TAUS.len())], self_in_numerator, ..LossConfig::default() };
    let labels = paired_labels(rng, n, 3);
    let (z, v) = unsaturated(rng, n, d, |z| losses::sup_contrastive(z, &labels, &cfg))?;
    let f = |p: &[f64]| {
        let t = Tensor { shape: z.shape.clone(), data: p.to_vec() };
        losses::sup_contrastive_unchecked(&t, &labels, &cfg).expect("valid batch").value
    };
    Ok(grad_check(f, &z.data, &v.grad.data, opts.tolerance))
}

fn check_supcon_excl(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    check_supcon(rng, opts, false)
}

fn check_supcon_incl(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    check_supcon(rng, opts, true)
}

fn check_hybrid(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    let (n, d, c) = (6, 4, 3);
    let cfg = LossConfig {
        tau: TAUS[rng.random_range(0..TAUS.len())],
        alpha: rng.random_range(0.0..1.0),
        ..LossConfig::default()
    };
    let logits = rand_tensor(rng, &[n, c]);
    let z = unit_rows(rng, n, d)?;
    let labels = paired_labels(rng, n, c);
    let v = losses::hybrid(&logits, &z, &labels, &cfg)?;
    let f = |p: &[f64]| {
        let t = unflatten(p, &[&logits, &z]);
        let ce = losses::cross_entropy(&t[0], &labels).expect("valid logits").value;
        let sc = losses::sup_contrastive_unchecked(&t[1], &labels, &cfg).expect("valid batch").value;
        cfg.alpha * sc + (1.0 - cfg.alpha) * ce
    };
    Ok(grad_check(f, &flatten(&[&logits, &z]), &flatten(&[&v.grad_logits, &v.grad_z]), opts.tolerance))
}

/// Minimum distance from a kink, far above the change any single
/// `FD_STEP` parameter perturbation causes in an activation.
const KINK_MARGIN: f64 = 1e-3;

/// Noise plus a per-channel offset. Pure iid noise looks the same to every
/// sample after global pooling, collapsing the projections together.
fn sample_input(rng: &mut Stream) -> Tensor {
    let mut x = rand_tensor(rng, &[2, 8, 8]);
    for ch in x.data.chunks_mut(64) {
        let offset = rng.random_range(-2.0..2.0);
        ch.iter_mut().for_each(|v| *v += offset);
    }
    x
}

const WEIGHT_GAIN: f64 = 2.0;

fn check_model(rng: &mut Stream, opts: &SuiteOptions, phase: Phase) -> Result<GradReport> {
    let cfg = ModelConfig { in_channels: 2, conv_channels: vec![3, 4], repr_dim: 6, proj_dim: 3, num_classes: 3 };
    let loss_cfg = LossConfig { tau: 0.1, alpha: 0.5, ..LossConfig::default() };
    // redraw instances within reach of a ReLU or max-pool switch, where
    // central differences straddle a kink, and instances whose loss is on a
    // plateau (e.g. every ReLU dead, all projections equal)
    let (model, inputs, labels, step) = loop {
        let model = random_model(rng, &cfg)?;
        let inputs: Vec<Tensor> = (0..6).map(|_| sample_input(rng)).collect();
        let labels = paired_labels(rng, inputs.len(), cfg.num_classes);
        let fwd = model.forward_batch(&inputs)?;
        if !fwd.caches.iter().all(|c| c.kink_margin() > KINK_MARGIN) {
            continue;
        }
        let step = compute_step(&model, &inputs, &labels, phase, &loss_cfg)?;
        if step.grads.values().flat_map(|g| &g.data).any(|g| g.abs() >= MIN_SIGNAL) {
            break (model, inputs, labels, step);
        }
    };
    let names: Vec<String> = model.params.keys().cloned().collect();
    let tensors: Vec<&Tensor> = names.iter().map(|k| &model.params[k]).collect();
    let x = flatten(&tensors);
    let analytic = flatten(&names.iter().map(|k| &step.grads[k]).collect::<Vec<_>>());
    let f = |p: &[f64]| {
        let mut m = model.clone();
        for (name, t) in names.iter().zip(unflatten(p, &tensors)) {
            m.params.insert(name.clone(), t);
        }
        compute_step(&m, &inputs, &labels, phase, &loss_cfg).expect("valid model").loss
    };
    Ok(grad_check(f, &x, &analytic, opts.tolerance))
}

/// Initialized model with non-zero biases, so every parameter's gradient
/// path is exercised, and weights scaled up so outputs are not all alike.
fn random_model(rng: &mut Stream, cfg: &ModelConfig) -> Result<Model> {
    let mut model = Model::init(cfg, rng.random())?;
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            *t = rand_tensor(rng, &t.shape);
            t.scale(0.1);
        } else {
            t.scale(WEIGHT_GAIN);
        }
    }
    Ok(model)
}

fn check_model_ce(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    check_model(rng, opts, Phase::CrossEntropy)
}

fn check_model_supcon(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    check_model(rng, opts, Phase::Contrastive)
}

fn check_model_hybrid(rng: &mut Stream, opts: &SuiteOptions) -> Result<GradReport> {
    check_model(rng, opts, Phase::Hybrid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_listed_once() {
        let names = op_names();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn dense_and_l2_meet_tighter_bound() {
        let opts = SuiteOptions { tolerance: 1e-6, ..SuiteOptions::default() };
        for (idx, check) in [check_dense as Check, check_l2].into_iter().enumerate() {
            for inst in 0..20 {
                let mut rng = rng::stream(9, Purpose::Init, idx as u64, inst);
                let report = check(&mut rng, &opts).unwrap();
                assert!(report.passed(), "check {idx} instance {inst}: {}", report.max_rel_err);
            }
        }
    }

    #[test]
    fn paired_labels_have_partners() {
        let mut rng = rng::stream(3, Purpose::Init, 0, 0);
        for n in 2..12 {
            let l = paired_labels(&mut rng, n, 3);
            for &x in &l {
                assert!(l.iter().filter(|&&y| y == x).count() >= 2);
            }
        }
    }
}
