//! Accuracy and confusion metrics, fold cross-validation, softmax
//! ensembling, white-noise robustness sweeps and representation margins.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::augmentation::Augmenter;
use crate::dataset::Dataset;
use crate::dsp::Featurizer;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::ops::{argmax, softmax};
use crate::nn::{Model, Tensor};
use crate::rng::{self, Purpose};
use crate::trainer::{self, EpochMetrics, TrainConfig};

/// Noise levels of the robustness sweep.
pub const DEFAULT_SIGMAS: [f64; 3] = [1e-4, 5e-4, 1e-3];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean cross-entropy.
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Metrics from logits with lowest-index argmax tie-breaking.
pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate an empty slice".into()));
    }
    let c = logits.dim(1);
    let ce = losses::cross_entropy(logits, labels)?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (r, &y) in labels.iter().enumerate() {
        confusion[y][argmax(logits.row(r))] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    Ok(Metrics { accuracy: correct as f64 / labels.len() as f64, per_class_accuracy, mean_loss: ce.value, confusion })
}

/// Largest number of clips pushed through the model at once during
/// evaluation; bounds the activation memory held for a pass.
const EVAL_CHUNK: usize = 64;

fn logits_chunked(model: &Model, inputs: &[Tensor]) -> Result<Tensor> {
    let c = model.config.num_classes;
    let mut data = Vec::with_capacity(inputs.len() * c);
    for chunk in inputs.chunks(EVAL_CHUNK) {
        data.extend(model.logits(chunk)?.data);
    }
    Tensor::new(vec![inputs.len(), c], data)
}

fn representations_chunked(model: &Model, inputs: &[Tensor]) -> Result<Tensor> {
    let d = model.config.repr_dim;
    let mut data = Vec::with_capacity(inputs.len() * d);
    for chunk in inputs.chunks(EVAL_CHUNK) {
        data.extend(model.representations(chunk)?.data);
    }
    Tensor::new(vec![inputs.len(), d], data)
}

pub fn evaluate_inputs(model: &Model, inputs: &[Tensor], labels: &[usize]) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty slice".into()));
    }
    metrics_from_logits(&logits_chunked(model, inputs)?, labels)
}

/// Deterministic (augmentation-free) model inputs for evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext {
    featurizer: Featurizer,
    cfg: TrainConfig,
}

impl EvalContext {
    pub fn new(cfg: &TrainConfig, sample_rate: u32) -> Result<Self> {
        Ok(Self { featurizer: Featurizer::new(&cfg.features, sample_rate)?, cfg: cfg.clone() })
    }

    fn augmenter(&self) -> Augmenter<'_> {
        Augmenter { cfg: &self.cfg.augment, featurizer: &self.featurizer }
    }

    pub fn inputs(&self, dataset: &Dataset, idx: &[usize]) -> Result<Vec<Tensor>> {
        let aug = self.augmenter();
        idx.par_iter().map(|&i| aug.eval_input(&dataset.waves[i])).collect()
    }
}

fn check_classes(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.config.num_classes != dataset.num_classes {
        return Err(Error::Data(format!(
            "model predicts {} classes but the dataset has {}",
            model.config.num_classes, dataset.num_classes
        )));
    }
    Ok(())
}

pub fn evaluate(model: &Model, dataset: &Dataset, idx: &[usize], ctx: &EvalContext) -> Result<Metrics> {
    check_classes(model, dataset)?;
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.waves[i].label).collect();
    evaluate_inputs(model, &ctx.inputs(dataset, idx)?, &labels)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation across folds (0 for a single fold).
    pub std_accuracy: f64,
}

pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains once per fold with that fold held out and reports the best
/// checkpoint's validation metrics per fold.
pub fn cross_validate(dataset: &Dataset, cfg: &TrainConfig) -> Result<CrossValidation> {
    cross_validate_with(dataset, cfg, |_, _| {})
}

/// As [`cross_validate`], calling `on_fold` with each fold's training
/// outcome as soon as it is available.
pub fn cross_validate_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_fold: impl FnMut(usize, &trainer::TrainOutcome),
) -> Result<CrossValidation> {
    let mut folds = Vec::with_capacity(dataset.num_folds);
    for fold in 1..=dataset.num_folds {
        let (train_idx, val_idx) = dataset.split(fold);
        if val_idx.is_empty() {
            return Err(Error::Data(format!("fold {fold} has no clips")));
        }
        if cfg.scheme != trainer::Scheme::Ce {
            for c in 0..dataset.num_classes {
                if !train_idx.iter().any(|&i| dataset.waves[i].label == c) {
                    return Err(Error::Data(format!(
                        "class {c} is missing from the training folds for validation fold {fold}"
                    )));
                }
            }
        }
        let outcome = trainer::train(dataset, &train_idx, &val_idx, cfg)?;
        on_fold(fold, &outcome);
        let metrics = outcome
            .best_metrics
            .clone()
            .ok_or_else(|| Error::Data(format!("fold {fold} produced no validation metrics")))?;
        folds.push(FoldResult {
            fold,
            metrics,
            best_epoch: outcome.best.best.map(|b| b.epoch),
            history: outcome.history,
        });
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_and_sample_std(&accs);
    Ok(CrossValidation { folds, mean_accuracy, std_accuracy })
}

/// Unweighted mean of the members' softmax outputs, `[N×C]`.
pub fn ensemble_probabilities(models: &[&Model], inputs: &[Tensor]) -> Result<Tensor> {
    let first = models.first().ok_or_else(|| Error::Data("ensemble needs at least one model".into()))?;
    let c = first.config.num_classes;
    if models.iter().any(|m| m.config.num_classes != c) {
        return Err(Error::Data("ensemble members disagree on the class count".into()));
    }
    let mut acc = Tensor::zeros(&[inputs.len(), c]);
    for m in models {
        acc.add_assign(&softmax(&logits_chunked(m, inputs)?)?);
    }
    acc.scale(1.0 / models.len() as f64);
    Ok(acc)
}

/// Ensemble probability vector for one input.
pub fn ensemble_predict(models: &[&Model], input: &Tensor) -> Result<Vec<f64>> {
    Ok(ensemble_probabilities(models, std::slice::from_ref(input))?.data)
}

/// Accuracy-style metrics of the ensemble. `mean_loss` is the mean negative
/// log of the averaged probability of the true class.
pub fn evaluate_ensemble(models: &[&Model], dataset: &Dataset, idx: &[usize], ctx: &EvalContext) -> Result<Metrics> {
    for m in models {
        check_classes(m, dataset)?;
    }
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.waves[i].label).collect();
    let probs = ensemble_probabilities(models, &ctx.inputs(dataset, idx)?)?;
    // log-probabilities are valid logits: softmax(log p) = p
    let log_probs =
        Tensor { shape: probs.shape.clone(), data: probs.data.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect() };
    metrics_from_logits(&log_probs, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub accuracy: f64,
}

/// Adds zero-mean Gaussian noise of each standard deviation to the
/// (normalized) clips, re-featurizes and evaluates. `sigma = 0` is the clean
/// evaluation.
pub fn noise_sweep(
    model: &Model,
    dataset: &Dataset,
    idx: &[usize],
    sigmas: &[f64],
    seed: u64,
    ctx: &EvalContext,
) -> Result<Vec<NoisePoint>> {
    check_classes(model, dataset)?;
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.waves[i].label).collect();
    let aug = ctx.augmenter();
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
            }
            let inputs = if sigma == 0.0 {
                ctx.inputs(dataset, idx)?
            } else {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                idx.par_iter()
                    .map(|&i| {
                        let w = &dataset.waves[i];
                        let mut rng = rng::Stream::seed_from_u64(rng::derive_seed(
                            seed,
                            Purpose::Noise,
                            sigma.to_bits(),
                            i as u64,
                        ));
                        let noisy = w.with_samples(w.samples.iter().map(|x| x + normal.sample(&mut rng)).collect());
                        aug.eval_input(&noisy)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let m = evaluate_inputs(model, &inputs, &labels)?;
            Ok(NoisePoint { sigma, accuracy: m.accuracy })
        })
        .collect()
}

pub fn write_noise_csv(points: &[NoisePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("sigma,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.sigma, p.accuracy));
    }
    write_text(path.as_ref(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginStats {
    pub intra: f64,
    pub inter: f64,
    pub margin: f64,
}

/// Mean same-label and different-label cosine similarity of row vectors.
pub fn margin_from_vectors(vectors: &Tensor, labels: &[usize]) -> Result<MarginStats> {
    let n = vectors.dim(0);
    if labels.len() != n {
        return Err(Error::shape("margin_stats", "label count differs from row count"));
    }
    let norms: Vec<f64> = (0..n).map(|i| vectors.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let cos =
                vectors.row(i).iter().zip(vectors.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j]);
            let cos = cos.clamp(-1.0, 1.0);
            let slot = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            slot.0 += cos;
            slot.1 += 1;
        }
    }
    if intra.1 == 0 {
        return Err(Error::Data("no same-label pairs to measure".into()));
    }
    if inter.1 == 0 {
        return Err(Error::Data("margin needs at least two classes".into()));
    }
    let (a, b) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    Ok(MarginStats { intra: a, inter: b, margin: a - b })
}

/// Margin between intra- and inter-class similarity of the representations
/// `h`, computed without augmentation.
pub fn margin_stats(model: &Model, dataset: &Dataset, idx: &[usize], ctx: &EvalContext) -> Result<MarginStats> {
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.waves[i].label).collect();
    let h = representations_chunked(model, &ctx.inputs(dataset, idx)?)?;
    margin_from_vectors(&h, &labels)
}

pub fn write_margins_csv(stats: &MarginStats, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format!("intra,inter,margin\n{},{},{}\n", stats.intra, stats.inter, stats.margin))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn onehot_logits(preds: &[usize], c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[preds.len(), c]);
        for (r, &p) in preds.iter().enumerate() {
            t.row_mut(r)[p] = 10.0;
        }
        t
    }

    #[test]
    fn oracle_predictions_are_perfect() {
        let labels = [0, 1, 2, 2, 1];
        let m = metrics_from_logits(&onehot_logits(&labels, 3), &labels).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(v, 0);
                }
            }
        }
        assert_eq!(m.per_class_accuracy, vec![1.0; 3]);
    }

    #[test]
    fn constant_logits_pick_class_zero() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let m = metrics_from_logits(&Tensor::zeros(&[100, 10]), &labels).unwrap();
        assert_eq!(m.accuracy, 0.1);
        assert!(metrics_from_logits(&Tensor::zeros(&[0, 10]), &[]).is_err());
    }

    #[test]
    fn margin_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let m = margin_from_vectors(&same, &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.intra, m.inter, m.margin), (1.0, 1.0, 0.0));
        let orth = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m = margin_from_vectors(&orth, &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.intra, m.inter, m.margin), (1.0, 0.0, 1.0));
        assert!(margin_from_vectors(&orth, &[0, 1, 2, 3]).is_err());
        assert!(margin_from_vectors(&orth, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_sample_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_sample_std(&[0.7]), (0.7, 0.0));
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_total(seed in 0u64..10_000, n in 1usize..60, c in 2usize..8) {
            let mut rng = rng::Stream::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let logits = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let m = metrics_from_logits(&logits, &labels).unwrap();
            let trace: usize = (0..c).map(|k| m.confusion[k][k]).sum();
            prop_assert_eq!(m.total(), n);
            prop_assert!((m.accuracy - trace as f64 / n as f64).abs() < 1e-15);
            for (k, row) in m.confusion.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
            }
        }

        #[test]
        fn margin_is_rotation_invariant(seed in 0u64..10_000) {
            let mut rng = rng::Stream::seed_from_u64(seed);
            let (n, d) = (10, 4);
            let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            // random orthogonal matrix from Gram-Schmidt
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < d {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for u in &q {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (a, b) in v.iter_mut().zip(u) {
                        *a -= dot * b;
                    }
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    q.push(v.iter().map(|a| a / norm).collect());
                }
            }
            let rotated = Tensor::new(vec![n, d], (0..n).flat_map(|r| {
                let row = x.row(r).to_vec();
                q.iter().map(move |col| row.iter().zip(col).map(|(a, b)| a * b).sum::<f64>()).collect::<Vec<_>>()
            }).collect()).unwrap();
            let a = margin_from_vectors(&x, &labels).unwrap();
            let b = margin_from_vectors(&rotated, &labels).unwrap();
            prop_assert!((a.margin - b.margin).abs() < 1e-12);
            prop_assert!((a.intra - b.intra).abs() < 1e-12);
        }
    }
}
