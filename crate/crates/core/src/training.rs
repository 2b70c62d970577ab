//! Cross-validation splits, mini-batching, weight training, retraining of a
//! discretized architecture, and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, SamplingMask};
use crate::metrics::{image_metrics, MetricReport};
use crate::network::{l2_loss_batch, Genotype, ModelWeights, NetworkConfig, IMAGE_CHANNELS};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::params::Grads;
use crate::searchspace::OperationSpec;
use crate::tensor::Tensor;

pub use crate::data::Sample;

pub const FOLDS: usize = 3;
/// Target train:validation ratio inside the two non-test folds.
pub const TRAIN_VAL_RATIO: f64 = 9.0 / 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_w: f64,
    /// Adam first-moment coefficient for the weights.
    pub momentum_w: f64,
    pub wd_w: f64,
    pub lr_alpha: f64,
    pub wd_alpha: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_w: 1e-3,
            momentum_w: 0.9,
            wd_w: 1e-7,
            lr_alpha: 1e-3,
            wd_alpha: 1e-6,
            batch_size: 8,
            warmup_epochs: 50,
            search_epochs: 50,
            retrain_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_w, self.lr_alpha];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument("learning rates must be finite and non-negative".into()));
        }
        if [self.wd_w, self.wd_alpha].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weight decay must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_w) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum_w)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.momentum_w,
            ..AdamConfig::new(self.lr_w, self.wd_w)
        }
    }

    pub fn alpha_adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr_alpha, self.wd_alpha)
    }
}

/// Subject-level partition for one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn trainval(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

/// Validation count in `1..remaining` whose train:val ratio is closest to 9:2.
pub fn validation_count(remaining: usize) -> usize {
    (1..remaining.max(2))
        .min_by(|&a, &b| {
            let da = ((remaining - a) as f64 / a as f64 - TRAIN_VAL_RATIO).abs();
            let db = ((remaining - b) as f64 / b as f64 - TRAIN_VAL_RATIO).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(1)
}

/// Seeded shuffle into three near-equal test folds; the other two folds are
/// split into train and validation at the integer ratio closest to 9:2.
pub fn split_folds(subject_ids: &[String], fold: usize, seed: u64) -> Result<FoldSplit> {
    if fold >= FOLDS {
        return Err(Error::InvalidArgument(format!("fold {fold} outside 0..3")));
    }
    if subject_ids.len() < FOLDS {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 subjects, got {}",
            subject_ids.len()
        )));
    }
    let mut unique = subject_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != subject_ids.len() {
        return Err(Error::InvalidArgument("duplicate subject ids".into()));
    }
    let mut ids = subject_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let sizes: Vec<usize> = (0..FOLDS).map(|f| n / FOLDS + usize::from(f < n % FOLDS)).collect();
    let start: usize = sizes[..fold].iter().sum();
    let test: Vec<String> = ids[start..start + sizes[fold]].to_vec();
    let rest: Vec<String> = ids[..start].iter().chain(&ids[start + sizes[fold]..]).cloned().collect();
    let v = validation_count(rest.len());
    let (train, val) = rest.split_at(rest.len() - v);
    Ok(FoldSplit {
        fold_id: fold,
        train: train.to_vec(),
        val: val.to_vec(),
        test,
    })
}

/// Stacked network inputs for one optimization step.
pub struct Batch {
    pub x: Tensor,
    pub k0: Tensor,
    pub y: Tensor,
    pub masks: Vec<SamplingMask>,
}

impl Batch {
    pub fn gather(samples: &[Sample], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .and_then(|&i| samples.get(i))
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (h, w) = first.pair.x.shape();
        let n = indices.len();
        let mut x = Tensor::zeros(n, IMAGE_CHANNELS, h, w);
        let mut k0 = Tensor::zeros(n, IMAGE_CHANNELS, h, w);
        let mut y = Tensor::zeros(n, IMAGE_CHANNELS, h, w);
        let mut masks = Vec::with_capacity(n);
        for (b, &i) in indices.iter().enumerate() {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            if s.pair.x.shape() != (h, w) {
                return Err(Error::shape((h, w), s.pair.x.shape()));
            }
            x.sample_mut(b).copy_from_slice(s.pair.x.data());
            k0.sample_mut(b).copy_from_slice(s.pair.k0.data());
            y.sample_mut(b).copy_from_slice(s.pair.y.data());
            masks.push(s.pair.mask.clone());
        }
        Ok(Batch { x, k0, y, masks })
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One Adam step of the weights along `paths`. Returns the batch loss
/// measured before the update.
pub fn weight_step(model: &mut ModelWeights, adam: &mut Adam, batch: &Batch, paths: &[OperationSpec], lr: f64, epoch: usize) -> Result<f64> {
    let (pred, trace) = model.forward(&batch.x, &batch.k0, &batch.masks, paths, true)?;
    let (loss, grad) = l2_loss_batch(&pred, &batch.y)?;
    if !loss.is_finite() {
        return Err(Error::TrainingFailure {
            epoch,
            reason: format!("non-finite training loss {loss}"),
        });
    }
    let mut grads = Grads::new(model.store());
    model.backward(&trace, &batch.masks, paths, &grad, true, &mut grads);
    adam.step(model.store_mut(), &grads, lr);
    model.apply_norm_updates(&trace);
    Ok(loss)
}

/// Trains a fixed architecture with Adam and a cosine-annealed learning rate.
pub struct Trainer {
    pub model: ModelWeights,
    genotype: Genotype,
    adam: Adam,
    schedule: CosineSchedule,
    batch_size: usize,
    step: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `epochs * ceil(samples / batch)` steps of schedule.
    pub fn new(net: &NetworkConfig, genotype: &Genotype, cfg: &TrainConfig, samples: usize, epochs: usize) -> Result<Self> {
        cfg.validate()?;
        let model = ModelWeights::new_fixed(net, genotype, cfg.seed)?;
        let adam = Adam::new(cfg.weight_adam(), model.store());
        let steps = epochs * samples.div_ceil(cfg.batch_size).max(1);
        Ok(Trainer {
            model,
            genotype: genotype.clone(),
            adam,
            schedule: CosineSchedule::new(cfg.lr_w, steps),
            batch_size: cfg.batch_size,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    /// One pass over `samples`; returns the mean batch loss.
    pub fn train_weights_epoch(&mut self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let paths = self.genotype.ops().to_vec();
        let batches = epoch_batches(samples.len(), self.batch_size, &mut self.rng);
        let mut total = 0.0;
        for idx in &batches {
            let batch = Batch::gather(samples, idx)?;
            let lr = self.schedule.lr(self.step);
            self.step += 1;
            total += weight_step(&mut self.model, &mut self.adam, &batch, &paths, lr, self.epoch)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}

/// Trains fresh weights for `genotype` on train + validation samples.
/// `on_epoch` receives `(epoch, mean loss)`.
pub fn retrain(
    genotype: &Genotype,
    trainval: &[Sample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ModelWeights> {
    genotype.check_against(net)?;
    if trainval.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut trainer = Trainer::new(net, genotype, cfg, trainval.len(), cfg.retrain_epochs)?;
    for epoch in 0..cfg.retrain_epochs {
        let loss = trainer.train_weights_epoch(trainval)?;
        on_epoch(epoch, loss);
    }
    Ok(trainer.model)
}

/// Runs the network over `samples` in inference mode.
pub fn reconstruct(model: &ModelWeights, genotype: &Genotype, samples: &[Sample], batch_size: usize) -> Result<Vec<ComplexImage>> {
    let paths = model.paths(crate::network::Selection::Genotype(genotype))?;
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = Batch::gather(samples, chunk)?;
        let pred = model.predict(&batch.x, &batch.k0, &batch.masks, &paths)?;
        for b in 0..chunk.len() {
            let (h, w) = samples[chunk[b]].pair.x.shape();
            out.push(ComplexImage::from_vec(h, w, pred.sample(b).to_vec())?);
        }
    }
    Ok(out)
}

/// Per-image PSNR/SSIM of magnitude reconstructions.
pub fn evaluate(model: &ModelWeights, genotype: &Genotype, test: &[Sample], batch_size: usize) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let recs = reconstruct(model, genotype, test, batch_size)?;
    metrics_for(test, &recs)
}

/// Metrics of given reconstructions against the samples' targets.
pub fn metrics_for(samples: &[Sample], recs: &[ComplexImage]) -> Result<MetricReport> {
    if samples.len() != recs.len() {
        return Err(Error::shape(samples.len(), recs.len()));
    }
    let values = samples
        .par_iter()
        .zip(recs)
        .map(|(s, r)| image_metrics(&s.pair.y, r))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_pairs(&values)
}

/// Metrics of the zero-filled inputs themselves.
pub fn zero_filled_metrics(samples: &[Sample]) -> Result<MetricReport> {
    let xs: Vec<ComplexImage> = samples.iter().map(|s| s.pair.x.clone()).collect();
    metrics_for(samples, &xs)
}
