//! Optimization loop for the three training schemes: plain cross-entropy,
//! two-stage contrastive (contrastive pretraining, then a classifier on the
//! frozen encoder) and single-stage hybrid.

pub mod adam;
pub mod checkpoint;
pub mod sampler;
pub mod schedule;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{AugmentConfig, Augmenter};
use crate::dataset::Dataset;
use crate::dsp::{Featurizer, StftConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, Metrics};
use crate::losses::{self, LossConfig};
use crate::nn::model::{CLS_B, CLS_W};
use crate::nn::ops::argmax;
use crate::nn::tensor::GradSet;
use crate::nn::{Model, ModelConfig, Tensor};
use crate::rng::{self, Purpose};

pub use adam::{adam_step, AdamHyper, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, BestRecord, Checkpoint, RngState};
pub use sampler::StratifiedSampler;
pub use schedule::lr_at;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ce,
    TwoStageContrastive,
    Hybrid,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Scheme::Ce),
            "two_stage_contrastive" | "two_stage" => Ok(Scheme::TwoStageContrastive),
            "hybrid" => Ok(Scheme::Hybrid),
            other => {
                Err(Error::Config(format!("unknown scheme '{other}' (expected ce, two_stage_contrastive or hybrid)")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    /// Share of `epochs` spent in the contrastive stage of the two-stage
    /// scheme.
    pub stage1_fraction: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub adam: AdamHyper,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub features: StftConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Hybrid,
            epochs: 30,
            stage1_fraction: 0.7,
            batch_size: 128,
            base_lr: 5e-4,
            decay_factor: 0.98,
            warmup_epochs: 10,
            adam: AdamHyper::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            features: StftConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(Error::Config("stage1_fraction must lie in (0, 1)".into()));
        }
        if self.scheme == Scheme::TwoStageContrastive && self.epochs < 2 {
            return Err(Error::Config("two-stage training needs at least 2 epochs".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }

    /// Epochs in the contrastive stage of the two-stage scheme.
    pub fn stage1_epochs(&self) -> usize {
        let e = (self.epochs as f64 * self.stage1_fraction).round() as usize;
        e.clamp(1, self.epochs.saturating_sub(1).max(1))
    }

    pub fn phase_at(&self, epoch: usize) -> Phase {
        match self.scheme {
            Scheme::Ce => Phase::CrossEntropy,
            Scheme::Hybrid => Phase::Hybrid,
            Scheme::TwoStageContrastive if epoch < self.stage1_epochs() => Phase::Contrastive,
            Scheme::TwoStageContrastive => Phase::FrozenClassifier,
        }
    }

    fn needs_pairs(&self) -> bool {
        self.scheme != Scheme::Ce
    }
}

/// What one optimization step minimizes and which parameters it moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Encoder and classifier on cross-entropy.
    CrossEntropy,
    /// Encoder and projection on the contrastive loss.
    Contrastive,
    /// Classifier only, on cross-entropy, encoder frozen.
    FrozenClassifier,
    /// Everything on the hybrid loss.
    Hybrid,
}

impl Phase {
    pub fn trains(&self, name: &str) -> bool {
        let classifier = name == CLS_W || name == CLS_B;
        let projection = name.starts_with("projection.");
        match self {
            Phase::CrossEntropy => !projection,
            Phase::Contrastive => !classifier,
            Phase::FrozenClassifier => classifier,
            Phase::Hybrid => true,
        }
    }

    /// Whether the classifier is meaningful after an epoch of this phase.
    pub fn selects_checkpoints(&self) -> bool {
        *self != Phase::Contrastive
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: GradSet,
    pub logits: Tensor,
}

/// Loss and full parameter gradients for one batch under `phase`.
pub fn compute_step(
    model: &Model,
    inputs: &[Tensor],
    labels: &[usize],
    phase: Phase,
    loss_cfg: &LossConfig,
) -> Result<StepOutput> {
    let fwd = model.forward_batch(inputs)?;
    let (loss, grads) = match phase {
        Phase::CrossEntropy | Phase::FrozenClassifier => {
            let ce = losses::cross_entropy(&fwd.heads.logits, labels)?;
            let train_encoder = phase == Phase::CrossEntropy;
            (ce.value, model.backward_batch(&fwd, Some(&ce.grad), None, train_encoder)?)
        }
        Phase::Contrastive => {
            let sc = losses::sup_contrastive(&fwd.heads.z, labels, loss_cfg)?;
            (sc.value, model.backward_batch(&fwd, None, Some(&sc.grad), true)?)
        }
        Phase::Hybrid => {
            let h = losses::hybrid(&fwd.heads.logits, &fwd.heads.z, labels, loss_cfg)?;
            (h.value, model.backward_batch(&fwd, Some(&h.grad_logits), Some(&h.grad_z), true)?)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    Ok(StepOutput { loss, grads, logits: fwd.heads.logits })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub fn write_history_csv(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            opt(m.val_loss),
            opt(m.val_acc)
        ));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint (the last one when there is no validation
    /// split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// Validation metrics of `best`, if a validation split was given.
    pub best_metrics: Option<Metrics>,
}

/// Training state over one train/validation split.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    dataset: &'a Dataset,
    train_idx: Vec<usize>,
    val_inputs: Vec<Tensor>,
    val_labels: Vec<usize>,
    featurizer: Featurizer,
    sampler: StratifiedSampler,
    model: Model,
    optimizer: OptimizerState,
    epoch: usize,
    best: Option<(BestRecord, Checkpoint, Metrics)>,
    history: Vec<EpochMetrics>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, train_idx: &[usize], val_idx: &[usize], cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(&cfg.model, cfg.seed)?;
        let optimizer = OptimizerState::new(&model.params);
        Self::with_state(dataset, train_idx, val_idx, cfg, model, optimizer, 0)
    }

    /// Continues from `last`; `best` (if known) seeds best-checkpoint tracking.
    pub fn resume(
        dataset: &'a Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        last: Checkpoint,
        best: Option<Checkpoint>,
    ) -> Result<Self> {
        let mut t =
            Self::with_state(dataset, train_idx, val_idx, &last.config, last.model, last.optimizer, last.epoch)?;
        if let (Some(rec), Some(ck)) = (last.best, best) {
            let metrics = evaluation::evaluate_inputs(&ck.model, &t.val_inputs, &t.val_labels)?;
            t.best = Some((rec, ck, metrics));
        }
        Ok(t)
    }

    fn with_state(
        dataset: &'a Dataset,
        train_idx: &[usize],
        val_idx: &[usize],
        cfg: &TrainConfig,
        model: Model,
        optimizer: OptimizerState,
        epoch: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.num_classes != dataset.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {}",
                cfg.model.num_classes, dataset.num_classes
            )));
        }
        if train_idx.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let featurizer = Featurizer::new(&cfg.features, dataset.sample_rate)?;
        let frames = cfg.features.frames_for(cfg.augment.target_len);
        if frames == 0 {
            return Err(Error::Config(format!(
                "target_len {} is shorter than one {}-sample window",
                cfg.augment.target_len, cfg.features.window_len
            )));
        }
        cfg.model.cropped_dims(cfg.features.n_mels, frames)?;
        let items: Vec<(usize, usize)> = train_idx.iter().map(|&i| (i, dataset.waves[i].label)).collect();
        let sampler = StratifiedSampler::new(&items, cfg.batch_size)?;
        if cfg.needs_pairs() && !cfg.loss.self_in_numerator {
            sampler.require_pairs()?;
        }
        let aug = Augmenter { cfg: &cfg.augment, featurizer: &featurizer };
        let val_inputs = val_idx.par_iter().map(|&i| aug.eval_input(&dataset.waves[i])).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            train_idx: train_idx.to_vec(),
            val_labels: val_idx.iter().map(|&i| dataset.waves[i].label).collect(),
            val_inputs,
            featurizer,
            sampler,
            model,
            optimizer,
            epoch,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            best: self.best.as_ref().map(|b| b.0),
            rng: RngState::new(self.cfg.seed, self.epoch),
        }
    }

    /// Augmented inputs for one batch; sample `pos` of batch `b` in epoch
    /// `e` draws from its own stream.
    fn batch_inputs(&self, batch: &[usize], epoch: usize, batch_no: usize) -> Result<Vec<Tensor>> {
        let aug = Augmenter { cfg: &self.cfg.augment, featurizer: &self.featurizer };
        batch
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut rng =
                    rng::stream(self.cfg.seed, Purpose::Augment, epoch as u64, ((batch_no as u64) << 32) | pos as u64);
                aug.augment(&self.dataset.waves[i], &mut rng)
            })
            .collect()
    }

    /// Runs one epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let e = self.epoch;
        let phase = self.cfg.phase_at(e);
        let lr = lr_at(e, &self.cfg);
        let mut loss_sum = 0.0;
        let (mut correct, mut seen) = (0usize, 0usize);
        let batches = self.sampler.epoch(self.cfg.seed, e);
        for (b, batch) in batches.iter().enumerate() {
            let inputs = self.batch_inputs(batch, e, b)?;
            let labels: Vec<usize> = batch.iter().map(|&i| self.dataset.waves[i].label).collect();
            let step = compute_step(&self.model, &inputs, &labels, phase, &self.cfg.loss)?;
            adam_step(&mut self.model.params, &step.grads, &mut self.optimizer, lr, &self.cfg.adam, |n| {
                phase.trains(n)
            })?;
            loss_sum += step.loss;
            for (r, &y) in labels.iter().enumerate() {
                correct += usize::from(argmax(step.logits.row(r)) == y);
            }
            seen += labels.len();
        }
        self.epoch += 1;

        let (val_loss, val_acc) = if self.val_inputs.is_empty() {
            (None, None)
        } else {
            let m = evaluation::evaluate_inputs(&self.model, &self.val_inputs, &self.val_labels)?;
            let record = BestRecord { epoch: e, val_acc: m.accuracy, val_loss: m.mean_loss };
            let better = match &self.best {
                None => true,
                Some((b, ..)) => {
                    record.val_acc > b.val_acc || (record.val_acc == b.val_acc && record.val_loss < b.val_loss)
                }
            };
            let out = (Some(m.mean_loss), Some(m.accuracy));
            if phase.selects_checkpoints() && better {
                let mut ck = self.checkpoint();
                ck.best = Some(record);
                self.best = Some((record, ck, m));
            }
            out
        };
        let metrics = EpochMetrics {
            epoch: e,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_acc,
        };
        self.history.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains until `epochs` epochs have completed.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        let last = self.checkpoint();
        let (best, best_metrics) = match self.best {
            Some((_, ck, m)) => (ck, Some(m)),
            None => (last.clone(), None),
        };
        Ok(TrainOutcome { best, last, history: self.history, best_metrics })
    }
}

/// Trains on `train_idx`, selecting the best checkpoint on `val_idx`
/// (validation accuracy, then lower validation loss).
pub fn train(dataset: &Dataset, train_idx: &[usize], val_idx: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, train_idx, val_idx, cfg)?.run()
}

/// Trains with fold `val_fold` held out for validation.
pub fn train_fold(dataset: &Dataset, val_fold: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_idx, val_idx) = dataset.split(val_fold);
    train(dataset, &train_idx, &val_idx, cfg)
}
