//! Differentiable architecture search with binarized path gates.
//!
//! Each cell carries eight logits `alpha`. Their softmax gives operation
//! probabilities, which are binarized to a one-hot gate (argmax, lowest index
//! on ties) so that only one candidate runs per cell and step. Network
//! weights and logits are updated alternately on the training and validation
//! splits after a warmup that trains weights on uniformly sampled paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Genotype, ModelWeights, NetworkConfig};
use crate::optim::{Adam, AdamConfig, CosineSchedule, Moments};
use crate::searchspace::{OperationSpec, NUM_OPS};
use crate::training::{epoch_batches, weight_step, Batch, Sample, TrainConfig};

pub type ProbRow = [f64; NUM_OPS];

/// Numerically stable softmax of one logit row.
pub fn softmax_probs(alpha_row: &[f64; NUM_OPS]) -> Result<ProbRow> {
    if alpha_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logits {alpha_row:?}")));
    }
    let max = alpha_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = alpha_row.iter().map(|a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(std::array::from_fn(|i| exps[i] / sum))
}

/// A one-hot selector; holds the 0-based active position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Gate(usize);

impl Gate {
    pub fn new(position: usize) -> Result<Self> {
        if position >= NUM_OPS {
            return Err(Error::InvalidArgument(format!("gate position {position} outside 0..8")));
        }
        Ok(Gate(position))
    }

    pub fn position(&self) -> usize {
        self.0
    }

    pub fn one_hot(&self) -> [f64; NUM_OPS] {
        std::array::from_fn(|i| if i == self.0 { 1.0 } else { 0.0 })
    }

    pub fn op(&self) -> OperationSpec {
        OperationSpec::get(self.0 + 1).expect("gate position in range")
    }
}

/// Argmax with the lowest index winning ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot at the most probable operation.
pub fn binarize(p: &ProbRow) -> Gate {
    Gate(argmax(p))
}

/// Independent uniformly drawn gate per cell.
pub fn warmup_gates<R: Rng>(cells: usize, rng: &mut R) -> Vec<Gate> {
    (0..cells).map(|_| Gate(rng.gen_range(0..NUM_OPS))).collect()
}

/// Straight-through estimate of `dL/dalpha` for one cell:
/// `sum_j dL/dg_j * p_j * (delta_ij - p_i)`.
pub fn alpha_gradient(dl_dg: &[f64; NUM_OPS], p: &ProbRow) -> [f64; NUM_OPS] {
    std::array::from_fn(|i| {
        (0..NUM_OPS)
            .map(|j| {
                let delta = if i == j { 1.0 } else { 0.0 };
                dl_dg[j] * p[j] * (delta - p[i])
            })
            .sum()
    })
}

/// Architecture logits, one row of eight per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    alpha: Vec<[f64; NUM_OPS]>,
}

impl ArchParams {
    /// All-zero logits, i.e. uniform probabilities.
    pub fn zeros(cells: usize) -> Self {
        ArchParams {
            alpha: vec![[0.0; NUM_OPS]; cells],
        }
    }

    pub fn from_rows(alpha: Vec<[f64; NUM_OPS]>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("architecture needs at least one cell".into()));
        }
        if alpha.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite architecture logits".into()));
        }
        Ok(ArchParams { alpha })
    }

    pub fn cells(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[[f64; NUM_OPS]] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [[f64; NUM_OPS]] {
        &mut self.alpha
    }

    pub fn probs(&self) -> Vec<ProbRow> {
        self.alpha
            .iter()
            .map(|row| softmax_probs(row).expect("finite logits"))
            .collect()
    }

    pub fn gates(&self) -> Vec<Gate> {
        self.probs().iter().map(binarize).collect()
    }

    pub fn active_ops(&self) -> Vec<OperationSpec> {
        self.gates().iter().map(Gate::op).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().flatten().all(|v| v.is_finite())
    }
}

/// Per-row argmax of the probabilities.
pub fn discretize(arch: &ArchParams, cells_per_block: usize) -> Result<Genotype> {
    Genotype::new(arch.active_ops(), cells_per_block)
}

/// Sums per-fold probability matrices and takes the per-row argmax.
pub fn ensemble(prob_sets: &[Vec<ProbRow>], cells_per_block: usize) -> Result<Genotype> {
    let first = prob_sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no probability matrices to ensemble".into()))?;
    if let Some(bad) = prob_sets.iter().find(|p| p.len() != first.len()) {
        return Err(Error::shape(first.len(), bad.len()));
    }
    let ops = (0..first.len())
        .map(|row| {
            let summed: Vec<f64> = (0..NUM_OPS)
                .map(|i| prob_sets.iter().map(|p| p[row][i]).sum())
                .collect();
            OperationSpec::get(argmax(&summed) + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Genotype::new(ops, cells_per_block)
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    /// Absent during warmup.
    pub val_loss: Option<f64>,
    pub probs: Vec<ProbRow>,
}

/// Mutable state of one search run.
pub struct SearchState {
    pub model: ModelWeights,
    pub arch: ArchParams,
    pub epoch: usize,
    pub warmup_epochs: usize,
    weight_opt: Adam,
    alpha_cfg: AdamConfig,
    alpha_moments: Vec<Moments>,
    schedule: CosineSchedule,
    step: usize,
    rng: ChaCha8Rng,
}

impl SearchState {
    /// `steps_per_epoch` sizes the cosine schedule over warmup plus search.
    pub fn new(net: &NetworkConfig, cfg: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let model = ModelWeights::new_search(net, cfg.seed)?;
        let weight_opt = Adam::new(cfg.weight_adam(), model.store());
        let cells = net.total_cells();
        let total = (cfg.warmup_epochs + cfg.search_epochs) * steps_per_epoch.max(1);
        Ok(SearchState {
            model,
            arch: ArchParams::zeros(cells),
            epoch: 0,
            warmup_epochs: cfg.warmup_epochs,
            weight_opt,
            alpha_cfg: cfg.alpha_adam(),
            alpha_moments: vec![Moments::new(NUM_OPS); cells],
            schedule: CosineSchedule::new(cfg.lr_w, total),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6761_7465),
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.epoch < self.warmup_epochs
    }

    fn next_lr(&mut self) -> f64 {
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        lr
    }

    /// Weight update on uniformly sampled paths; logits untouched.
    pub fn warmup_step(&mut self, batch: &Batch) -> Result<f64> {
        let gates = warmup_gates(self.arch.cells(), &mut self.rng);
        let paths: Vec<OperationSpec> = gates.iter().map(Gate::op).collect();
        let lr = self.next_lr();
        weight_step(&mut self.model, &mut self.weight_opt, batch, &paths, lr, self.epoch)
    }

    /// Weight update on the gate-activated paths; logits untouched.
    pub fn weight_step(&mut self, batch: &Batch) -> Result<f64> {
        let paths = self.arch.active_ops();
        let lr = self.next_lr();
        weight_step(&mut self.model, &mut self.weight_opt, batch, &paths, lr, self.epoch)
    }

    /// Logit update on the gate-activated paths; weights untouched.
    /// Returns the batch loss evaluated before the update.
    pub fn arch_step(&mut self, batch: &Batch) -> Result<f64> {
        let gates = self.arch.gates();
        let paths: Vec<OperationSpec> = gates.iter().map(Gate::op).collect();
        let (pred, trace) = self.model.forward(&batch.x, &batch.k0, &batch.masks, &paths, true)?;
        let (loss, grad) = crate::network::l2_loss_batch(&pred, &batch.y)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch: self.epoch,
                reason: format!("non-finite validation loss {loss}"),
            });
        }
        let mut scratch = crate::params::Grads::new(self.model.store());
        let back = self.model.backward(&trace, &batch.masks, &paths, &grad, true, &mut scratch);
        let probs = self.arch.probs();
        for (cell, gate) in gates.iter().enumerate() {
            let mut dl_dg = [0.0; NUM_OPS];
            dl_dg[gate.position()] = back.gate_grads[cell];
            let g = alpha_gradient(&dl_dg, &probs[cell]);
            let lr = self.alpha_cfg.lr;
            self.alpha_moments[cell].update(&self.alpha_cfg, lr, &mut self.arch.alpha_mut()[cell], &g);
        }
        Ok(loss)
    }

    /// Runs one epoch over `train` (and `val` after warmup).
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample], batch_size: usize) -> Result<EpochLog> {
        let warm = self.in_warmup();
        let train_batches = epoch_batches(train.len(), batch_size, &mut self.rng);
        let val_batches = epoch_batches(val.len(), batch_size, &mut self.rng);
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        let mut val_count = 0;
        for (i, idx) in train_batches.iter().enumerate() {
            let batch = Batch::gather(train, idx)?;
            if warm {
                train_sum += self.warmup_step(&batch)?;
            } else {
                train_sum += self.weight_step(&batch)?;
                let vidx = &val_batches[i % val_batches.len()];
                val_sum += self.arch_step(&Batch::gather(val, vidx)?)?;
                val_count += 1;
            }
        }
        let log = EpochLog {
            epoch: self.epoch,
            phase: if warm { "warmup" } else { "search" }.into(),
            train_loss: train_sum / train_batches.len() as f64,
            val_loss: (val_count > 0).then(|| val_sum / val_count as f64),
            probs: self.arch.probs(),
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Result of [`search`].
pub struct SearchOutcome {
    pub model: ModelWeights,
    pub arch: ArchParams,
    pub log: Vec<EpochLog>,
}

/// Warmup for `warmup_epochs`, then alternate weight and logit updates for
/// `search_epochs`. `on_epoch` sees every log line as it is produced.
pub fn search(
    train: &[Sample],
    val: &[Sample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SearchOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "search needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut state = SearchState::new(net, cfg, steps_per_epoch)?;
    let mut log = Vec::new();
    for _ in 0..cfg.warmup_epochs + cfg.search_epochs {
        let line = state.run_epoch(train, val, cfg.batch_size)?;
        on_epoch(&line);
        log.push(line);
    }
    Ok(SearchOutcome {
        model: state.model,
        arch: state.arch,
        log,
    })
}
