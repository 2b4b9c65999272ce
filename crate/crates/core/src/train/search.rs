use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_stage2, TrainConfig, TrainItem};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::WNetParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub step: usize,
    pub loss: LossConfig,
    /// Validation IoU at the best-loss epoch of the budgeted run.
    pub val_iou: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: LossConfig,
    pub best_val_iou: f64,
    pub log: Vec<SearchStep>,
}

/// The sequence of triples drawn uniformly from the unit cube.
pub fn sample_triples(steps: usize, seed: u64) -> Vec<LossConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| LossConfig {
            lambda1: rng.random::<f64>(),
            gamma: rng.random::<f64>(),
            decay_p: rng.random::<f64>(),
        })
        .collect()
}

/// Random search over `{lambda1, gamma, decay_p}`: each triple gets a stage-2
/// run of at most `epochs_per_step` epochs from the same stage-1 parameters.
pub fn hyperparam_search(
    params: &WNetParams<f32>,
    train: &[TrainItem],
    val: &[TrainItem],
    cfg: &TrainConfig,
    steps: usize,
    epochs_per_step: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    if steps < 1 {
        return Err(Error::InvalidArgument("search needs at least one step".into()));
    }
    let mut log = Vec::with_capacity(steps);
    for (step, loss) in sample_triples(steps, seed).into_iter().enumerate() {
        let run_cfg = TrainConfig {
            loss: loss.clone(),
            max_epochs_stage2: epochs_per_step.max(1),
            ..cfg.clone()
        };
        let r = train_stage2(params.clone(), train, val, &run_cfg)?;
        let best = r
            .history
            .iter()
            .find(|h| h.epoch == r.best_epoch)
            .ok_or(Error::EmptyDataset)?;
        log.push(SearchStep {
            step,
            loss,
            val_iou: best.val_iou,
            val_loss: best.val_loss,
        });
    }
    let top = log
        .iter()
        .fold(&log[0], |a, b| if b.val_iou > a.val_iou { b } else { a });
    Ok(SearchOutcome {
        best: top.loss.clone(),
        best_val_iou: top.val_iou,
        log,
    })
}
