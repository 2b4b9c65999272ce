//! Optimization: Adam, augmentation, splits, the two-stage schedule with
//! early stopping, and random search over the loss hyperparameters.

mod adam;
mod augment;
mod search;
mod split;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use augment::{augment, AugmentConfig, TrainSample, Transform, MAX_RETRIES};
pub use search::{hyperparam_search, sample_triples, SearchOutcome, SearchStep};
pub use split::{scan_level_split, stratified_kfold};

use crate::error::{Error, Result};
use crate::field::{attraction_map, FieldParams};
use crate::interact::simulate_endpoints;
use crate::loss::{combined_loss, iou_loss, LossConfig};
use crate::net::{loss_and_grad, Batch, Mode, Stage, Tensor5, WNetParams};
use crate::synth::case_seed;
use crate::volgrid::{BinaryMask, ScalarVolume};

/// A nodule on the network grid with all of its annotator masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub image: ScalarVolume,
    pub targets: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub stage1_patience: usize,
    pub stage2_patience: usize,
    /// Hard caps on top of patience.
    pub max_epochs_stage1: usize,
    pub max_epochs_stage2: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub min_delta: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            stage1_patience: 3,
            stage2_patience: 5,
            max_epochs_stage1: 30,
            max_epochs_stage2: 30,
            min_delta: 1e-4,
            augment: AugmentConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stage1_patience == 0 || self.stage2_patience == 0 {
            return Err(Error::InvalidArgument("batch size and patiences must be at least 1".into()));
        }
        if self.max_epochs_stage1 == 0 || self.max_epochs_stage2 == 0 {
            return Err(Error::InvalidArgument("epoch caps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub seconds: f64,
}

pub fn write_jsonl<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Patience bookkeeping on the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Record an epoch; true when it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta || (self.best.is_infinite() && val_loss.is_finite()) {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct Fit<S> {
    /// State after the best validation epoch.
    pub best: S,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Run epochs until patience runs out or `max_epochs` is reached, keeping a
/// snapshot of the state at the lowest validation loss.
pub fn fit<S: Clone>(
    mut state: S,
    stage: u8,
    patience: usize,
    max_epochs: usize,
    min_delta: f64,
    mut run_epoch: impl FnMut(&mut S, usize) -> Result<EpochStats>,
) -> Result<Fit<S>> {
    let mut stopper = EarlyStopping::new(patience, min_delta);
    let mut best = state.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=max_epochs {
        let t = Instant::now();
        let stats = run_epoch(&mut state, epoch)?;
        history.push(EpochRecord {
            stage,
            epoch,
            train_loss: stats.train_loss,
            val_loss: stats.val_loss,
            val_iou: stats.val_iou,
            seconds: t.elapsed().as_secs_f64(),
        });
        if stopper.observe(epoch, stats.val_loss) {
            best = state.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(Fit {
        best,
        history,
        best_epoch: stopper.best_epoch,
        stopped_early,
    })
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub params: WNetParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Weight map of the stroke simulated on `target`; zero when the target is
/// too small for a stroke.
pub fn simulated_weightmap(target: &BinaryMask, decay_p: f64) -> Result<Vec<f32>> {
    match simulate_endpoints(target) {
        Ok(pair) => Ok(attraction_map(Some(&pair), &FieldParams::new(decay_p), &target.geometry)?.values),
        Err(Error::DegenerateStroke(_)) | Err(Error::EmptyMask) => Ok(vec![0.0; target.values.len()]),
        Err(e) => Err(e),
    }
}

fn build_batch(samples: &[(ScalarVolume, BinaryMask)], stage: Stage, decay_p: f64) -> Result<Batch<f32>> {
    let n = samples.len();
    let dims = samples[0].0.dims();
    let v = samples[0].0.values.len();
    let mut image = Vec::with_capacity(n * v);
    let mut target = Vec::with_capacity(n * v);
    let mut weightmap = Vec::with_capacity(n * v);
    for (vol, t) in samples {
        if vol.dims() != dims || t.dims() != dims {
            return Err(Error::Shape("batch samples differ in shape".into()));
        }
        image.extend_from_slice(&vol.values);
        target.extend_from_slice(&t.values);
        match stage {
            Stage::One => weightmap.extend(std::iter::repeat_n(0.0, v)),
            Stage::Two => weightmap.extend(simulated_weightmap(t, decay_p)?),
        }
    }
    Ok(Batch {
        image: Tensor5::new([n, 1, dims[0], dims[1], dims[2]], image)?,
        target,
        weightmap,
    })
}

fn pairs(items: &[TrainItem]) -> Vec<(usize, usize)> {
    items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| (0..it.targets.len()).map(move |k| (i, k)))
        .collect()
}

/// Un-augmented batches over every (nodule, annotator) pair.
pub fn validation_batches(items: &[TrainItem], stage: Stage, cfg: &TrainConfig) -> Result<Vec<Batch<f32>>> {
    pairs(items)
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let samples: Vec<_> = chunk
                .iter()
                .map(|&(i, k)| (items[i].image.clone(), items[i].targets[k].clone()))
                .collect();
            build_batch(&samples, stage, cfg.loss.decay_p)
        })
        .collect()
}

/// Eval-mode mean loss and mean IoU of the 0.5-thresholded output over all
/// validation pairs.
pub fn validate(params: &WNetParams<f32>, batches: &[Batch<f32>], stage: Stage, loss: &LossConfig) -> Result<(f64, f64)> {
    let v = params.config.voxels();
    let (mut total, mut total_iou, mut n) = (0.0, 0.0, 0usize);
    for b in batches {
        let (initial, _) = params.forward_block1(&b.image, Mode::Eval)?;
        let out = match stage {
            Stage::One => initial,
            Stage::Two => {
                let m = Tensor5::new(b.image.shape, b.weightmap.clone())?;
                params.forward_block2(&b.image, &initial, &m, Mode::Eval)?.0
            }
        };
        for i in 0..b.len() {
            let pred = &out.values[i * v..(i + 1) * v];
            let tgt = &b.target[i * v..(i + 1) * v];
            total += match stage {
                Stage::One => iou_loss(pred, tgt)?.0 as f64,
                Stage::Two => combined_loss(pred, tgt, &b.weightmap[i * v..(i + 1) * v], loss)?.total as f64,
            };
            total_iou += binary_iou(pred, tgt);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((total / n as f64, total_iou / n as f64))
}

fn binary_iou(pred: &[f32], target: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let p = p >= 0.5;
        let t = t != 0;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone)]
struct Trainer {
    params: WNetParams<f32>,
    adam: AdamState<f32>,
}

fn stage_code(stage: Stage) -> u8 {
    match stage {
        Stage::One => 1,
        Stage::Two => 2,
    }
}

/// One pass over every (nodule, annotator) pair in shuffled, augmented
/// batches. Returns the mean training loss.
fn train_epoch(t: &mut Trainer, items: &[TrainItem], stage: Stage, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let mut order = pairs(items);
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed, (stage_code(stage) as u64) << 32 | epoch as u64));
    order.shuffle(&mut rng);
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let samples: Vec<_> = chunk
            .iter()
            .map(|&(i, k)| {
                let target = items[i].targets[k].clone();
                let s = TrainSample {
                    volume: items[i].image.clone(),
                    pair: simulate_endpoints(&target).ok(),
                    target,
                };
                let a = augment(&s, &cfg.augment, &mut rng);
                (a.volume, a.target)
            })
            .collect();
        let batch = build_batch(&samples, stage, cfg.loss.decay_p)?;
        let step = loss_and_grad(&t.params, &batch, stage, &cfg.loss)?;
        let (block, grads) = match stage {
            Stage::One => (&mut t.params.block1, &step.block1),
            Stage::Two => (&mut t.params.block2, &step.block2),
        };
        adam_step(&mut block.learnable_mut(), &grads.tensors(), &mut t.adam)?;
        block.apply_batch_stats(&step.trace);
        total += step.loss * batch.len() as f64;
        n += batch.len();
    }
    Ok(total / n as f64)
}

fn train_stage(params: WNetParams<f32>, train: &[TrainItem], val: &[TrainItem], cfg: &TrainConfig, stage: Stage) -> Result<StageResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (patience, max_epochs) = match stage {
        Stage::One => (cfg.stage1_patience, cfg.max_epochs_stage1),
        Stage::Two => (cfg.stage2_patience, cfg.max_epochs_stage2),
    };
    let block = match stage {
        Stage::One => &params.block1,
        Stage::Two => &params.block2,
    };
    let lengths: Vec<usize> = block.tensors().iter().filter(|t| t.learnable).map(|t| t.values.len()).collect();
    let trainer = Trainer {
        adam: AdamState::new(&lengths, cfg.lr),
        params,
    };
    let val_batches = validation_batches(val, stage, cfg)?;
    let fit = fit(trainer, stage_code(stage), patience, max_epochs, cfg.min_delta, |t, epoch| {
        let train_loss = train_epoch(t, train, stage, cfg, epoch)?;
        let (val_loss, val_iou) = validate(&t.params, &val_batches, stage, &cfg.loss)?;
        Ok(EpochStats {
            train_loss,
            val_loss,
            val_iou,
        })
    })?;
    Ok(StageResult {
        params: fit.best.params,
        history: fit.history,
        best_epoch: fit.best_epoch,
        stopped_early: fit.stopped_early,
    })
}

/// Block 1 alone on the IoU loss.
pub fn train_stage1(params: WNetParams<f32>, train: &[TrainItem], val: &[TrainItem], cfg: &TrainConfig) -> Result<StageResult> {
    train_stage(params, train, val, cfg, Stage::One)
}

/// Block 2 on the combined loss with block 1 frozen in eval mode.
pub fn train_stage2(params: WNetParams<f32>, train: &[TrainItem], val: &[TrainItem], cfg: &TrainConfig) -> Result<StageResult> {
    train_stage(params, train, val, cfg, Stage::Two)
}

/// IoU between a thresholded soft output and a mask, defined as 1 when both
/// are empty.
pub fn thresholded_iou(pred: &[f32], target: &BinaryMask) -> f64 {
    binary_iou(pred, &target.values)
}
