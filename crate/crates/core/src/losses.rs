//! Cross-entropy, supervised contrastive and hybrid losses with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Rows passed to [`sup_contrastive`] must have unit norm within this.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature applied to cosine similarities.
    pub tau: f64,
    /// Weight of the contrastive term in the hybrid loss.
    pub alpha: f64,
    /// Count the anchor itself among its positives.
    pub self_in_numerator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1, alpha: 0.5, self_in_numerator: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Batch-mean loss with its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
    /// Per-sample (or per-anchor) terms; `value` is their mean.
    pub per_sample: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_labels(labels: &[usize], n: usize, classes: Option<usize>) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("loss", format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(c) = classes {
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
    }
    Ok(())
}

/// Mean of `-log softmax(logits)[label]`; gradient `(softmax - onehot) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    logits.expect_rank("cross_entropy", 2)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    check_labels(labels, n, Some(c))?;
    let mut grad = logits.clone();
    let mut per_sample = Vec::with_capacity(n);
    let inv_n = 1.0 / n as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row.iter().copied());
        per_sample.push(lse - row[y]);
        for (g, &v) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv_n;
        }
        grad.row_mut(r)[y] -= inv_n;
    }
    let value = per_sample.iter().sum::<f64>() * inv_n;
    Ok(LossValue { value, grad, per_sample })
}

/// Supervised contrastive loss over unit-norm projections `z: [N×D]`.
///
/// For anchor `i` with positives `P(i)` (same label; the anchor itself only
/// when `self_in_numerator`):
///
/// `L_i = -1/|P(i)| · log( Σ_{j∈P(i)} e^{z_i·z_j/τ} / Σ_{k≠i} e^{z_i·z_k/τ} )`
///
/// The batch loss is the mean over anchors. The gradient treats `z` as
/// unconstrained; callers compose it with the normalization backward.
pub fn sup_contrastive(z: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossValue> {
    z.expect_rank("sup_contrastive", 2)?;
    cfg.validate()?;
    let n = z.dim(0);
    check_labels(labels, n, None)?;
    for r in 0..n {
        let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!("projection row {r} has norm {norm}, expected 1")));
        }
    }
    sup_contrastive_unchecked(z, labels, cfg)
}

/// [`sup_contrastive`] without the unit-norm precondition, so the formula
/// can be differentiated in every direction.
pub(crate) fn sup_contrastive_unchecked(z: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossValue> {
    z.expect_rank("sup_contrastive", 2)?;
    let (n, d) = (z.dim(0), z.dim(1));
    check_labels(labels, n, None)?;
    if n < 2 {
        return Err(Error::Data("contrastive loss needs at least two samples".into()));
    }

    let inv_tau = 1.0 / cfg.tau;
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let s = z.row(i).iter().zip(z.row(k)).map(|(a, b)| a * b).sum::<f64>() * inv_tau;
            sim[i * n + k] = s;
            sim[k * n + i] = s;
        }
    }

    // coef[i][k] = dL/dsim[i][k]
    let mut coef = vec![0.0; n * n];
    let mut per_sample = Vec::with_capacity(n);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let is_pos = |j: usize| labels[j] == labels[i] && (cfg.self_in_numerator || j != i);
        let n_pos = (0..n).filter(|&j| is_pos(j)).count();
        if n_pos == 0 {
            return Err(Error::Data(format!("anchor {i} (label {}) has no positive in the batch", labels[i])));
        }
        let num = log_sum_exp((0..n).filter(|&j| is_pos(j)).map(|j| row[j]));
        let den = log_sum_exp((0..n).filter(|&k| k != i).map(|k| row[k]));
        let inv_pos = 1.0 / n_pos as f64;
        per_sample.push(-inv_pos * (num - den));
        let c = &mut coef[i * n..(i + 1) * n];
        let scale = inv_pos * inv_n;
        for k in 0..n {
            let p_num = if is_pos(k) { (row[k] - num).exp() } else { 0.0 };
            let p_den = if k != i { (row[k] - den).exp() } else { 0.0 };
            c[k] = -scale * (p_num - p_den);
        }
    }

    // sim[i][k] = z_i·z_k/τ, so dL/dz_i = Σ_k (coef[i][k] + coef[k][i]) z_k / τ
    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let g = &mut grad.data[i * d..(i + 1) * d];
        for k in 0..n {
            let w = (coef[i * n + k] + coef[k * n + i]) * inv_tau;
            if w != 0.0 {
                for (gv, &zv) in g.iter_mut().zip(z.row(k)) {
                    *gv += w * zv;
                }
            }
        }
    }
    let value = per_sample.iter().sum::<f64>() * inv_n;
    Ok(LossValue { value, grad, per_sample })
}

/// Value and gradients of `α·L_supcon + (1 − α)·L_ce`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridValue {
    pub value: f64,
    pub ce: LossValue,
    pub supcon: LossValue,
    pub grad_logits: Tensor,
    pub grad_z: Tensor,
}

pub fn hybrid(logits: &Tensor, z: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<HybridValue> {
    cfg.validate()?;
    let ce = cross_entropy(logits, labels)?;
    let supcon = sup_contrastive(z, labels, cfg)?;
    let a = cfg.alpha;
    let mut grad_logits = ce.grad.clone();
    grad_logits.scale(1.0 - a);
    let mut grad_z = supcon.grad.clone();
    grad_z.scale(a);
    Ok(HybridValue { value: a * supcon.value + (1.0 - a) * ce.value, ce, supcon, grad_logits, grad_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::l2_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn unit_rows(rng: &mut Xoshiro256StarStar, n: usize, d: usize) -> Tensor {
        let raw = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        l2_normalize(&raw).unwrap().0
    }

    #[test]
    fn ce_examples() {
        let peaked = Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        assert!(cross_entropy(&peaked, &[1]).unwrap().value < 1e-25);
        let uniform = Tensor::zeros(&[4, 50]);
        let l = cross_entropy(&uniform, &[0, 7, 13, 49]).unwrap();
        assert!((l.value - 50f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&uniform, &[50, 0, 0, 0]).is_err());
        assert!(cross_entropy(&uniform, &[0, 0]).is_err());
    }

    #[test]
    fn ce_matches_direct_sum() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let logits = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels = [2, 0, 1, 1];
        let mut direct = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let q: Vec<f64> = row.iter().map(|v| v.exp() / row.iter().map(|u| u.exp()).sum::<f64>()).collect();
            direct -= (0..3).map(|c| if c == y { q[c].ln() } else { 0.0 }).sum::<f64>();
        }
        direct /= 4.0;
        let got = cross_entropy(&logits, &labels).unwrap();
        assert!((got.value - direct).abs() <= 1e-12 * direct.abs());
    }

    #[test]
    fn supcon_single_label_is_zero() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let z = unit_rows(&mut rng, 6, 5);
        let l = sup_contrastive(&z, &[3; 6], &LossConfig::default()).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn supcon_self_inclusion_pin() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = LossConfig { tau: 1.0, self_in_numerator: true, ..Default::default() };
        let l = sup_contrastive(&z, &[0, 1], &cfg).unwrap();
        assert!((l.value + 1.0).abs() < 1e-15);
        assert_eq!(l.per_sample.len(), 2);
        let excl = LossConfig { tau: 1.0, ..Default::default() };
        assert!(sup_contrastive(&z, &[0, 1], &excl).is_err());
    }

    #[test]
    fn supcon_rejects_unnormalized_rows() {
        let z = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(sup_contrastive(&z, &[0, 0], &LossConfig::default()).is_err());
    }

    #[test]
    fn supcon_survives_tiny_temperature() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let z = unit_rows(&mut rng, 16, 64);
        let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let cfg = LossConfig { tau: 1e-3, ..Default::default() };
        let l = sup_contrastive(&z, &labels, &cfg).unwrap();
        assert!(l.value.is_finite() && l.grad.all_finite());
    }

    #[test]
    fn hybrid_is_convex_combination() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        let z = unit_rows(&mut rng, 6, 4);
        let logits = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        let cfg = LossConfig::default();
        let h = hybrid(&logits, &z, &labels, &cfg).unwrap();
        assert!((h.value - 0.5 * (h.ce.value + h.supcon.value)).abs() < 1e-12);
        let bad = LossConfig { alpha: 1.5, ..Default::default() };
        assert!(hybrid(&logits, &z, &labels, &bad).is_err());
    }

    #[test]
    fn lower_temperature_sharpens_separated_batches() {
        // positives at similarity 0.9, negatives at -0.2
        let a = 0.9f64;
        let z = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![a, (1.0 - a * a).sqrt(), 0.0],
            vec![-0.2, 0.0, (1.0 - 0.04f64).sqrt()],
            vec![-0.2, 0.0, (1.0 - 0.04f64).sqrt()],
        ])
        .unwrap();
        let labels = [0, 0, 1, 1];
        let losses: Vec<f64> = [1.0, 0.5, 0.2, 0.1, 0.05]
            .iter()
            .map(|&tau| sup_contrastive(&z, &labels, &LossConfig { tau, ..Default::default() }).unwrap().value)
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    proptest! {
        #[test]
        fn ce_grad_rows_sum_to_zero(seed in 0u64..10_000, n in 1usize..8, c in 2usize..10) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let logits = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let l = cross_entropy(&logits, &labels).unwrap();
            prop_assert!(l.value >= 0.0);
            for r in 0..n {
                prop_assert!(l.grad.row(r).iter().sum::<f64>().abs() <= 1e-10);
            }
        }

        #[test]
        fn supcon_permutation_and_relabel_invariant(seed in 0u64..10_000) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let n = 8;
            let z = unit_rows(&mut rng, n, 5);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let cfg = LossConfig { tau: 0.3, ..Default::default() };
            let base = sup_contrastive(&z, &labels, &cfg).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let zp = Tensor::from_rows(&perm.iter().map(|&p| z.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
            let lp: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
            let permuted = sup_contrastive(&zp, &lp, &cfg).unwrap();
            prop_assert!((permuted.value - base.value).abs() <= 1e-12 * base.value.abs().max(1.0));
            for (k, &p) in perm.iter().enumerate() {
                prop_assert!((permuted.per_sample[k] - base.per_sample[p]).abs() <= 1e-12);
            }

            let relabel = [7usize, 2, 5];
            let lr: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
            let relabeled = sup_contrastive(&z, &lr, &cfg).unwrap();
            prop_assert_eq!(relabeled.value, base.value);
        }
    }
}
