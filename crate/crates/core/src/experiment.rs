//! The scaled-down experiment: prepare synthetic cases on the network grid,
//! split them, train both stages and evaluate the automatic and the
//! point-corrected segmentations on the held-out cases.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{attraction_map, FieldParams, PointPair};
use crate::interact::simulate_endpoints;
use crate::loss::LossConfig;
use crate::metrics::{summarize, write_csv, EvalRecord, EvalSummary};
use crate::metrics::{asd, best_of_two, equivalent_radius, mean_iou_vs_annotators, AnnotationSet, Texture};
use crate::net::{save_checkpoint, Mode, Tensor5, WNetConfig, WNetParams};
use crate::synth::{generate_dataset, DatasetConfig, SynthCase};
use crate::train::{scan_level_split, train_stage1, train_stage2, write_jsonl, EpochRecord, TrainConfig, TrainItem};
use crate::volgrid::{resample_iso, resample_mask_nonempty, threshold, BinaryMask, Grid, ScalarVolume};

/// A case resampled to the network grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    pub image: ScalarVolume,
    pub annotations: AnnotationSet,
    /// Equivalent radius measured on the native annotations.
    pub radius_mm: f64,
    pub texture: Texture,
}

impl PreparedCase {
    pub fn train_item(&self) -> TrainItem {
        TrainItem {
            id: self.id.clone(),
            image: self.image.clone(),
            targets: self.annotations.masks().to_vec(),
        }
    }
}

pub fn prepare_case(case: &SynthCase, side: usize) -> Result<PreparedCase> {
    let dims = [side; 3];
    let masks = case
        .annotations
        .masks()
        .iter()
        .map(|m| resample_mask_nonempty(m, dims))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCase {
        id: case.id.clone(),
        image: resample_iso(&case.volume, dims)?,
        annotations: AnnotationSet::new(masks)?,
        radius_mm: equivalent_radius(&case.annotations)?,
        texture: case.texture(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Hold out `test_frac` of the scans for testing, then `val_frac` of the rest
/// for validation. Every synthetic case is its own scan.
pub fn split_cases(scan_ids: &[String], test_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    let (rest, test) = scan_level_split(scan_ids, test_frac, seed)?;
    let rest_ids: Vec<String> = rest.iter().map(|&i| scan_ids[i].clone()).collect();
    let (train, val) = scan_level_split(&rest_ids, val_frac, seed ^ 0x5eed)?;
    Ok(Split {
        train: train.into_iter().map(|i| rest[i]).collect(),
        val: val.into_iter().map(|i| rest[i]).collect(),
        test,
    })
}

/// Per-case outcome of both protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEval {
    pub id: String,
    pub radius_mm: f64,
    pub texture: Texture,
    /// Mean IoU of the block-1 mask over annotators.
    pub iou_initial: f64,
    /// Keep-or-replace mean IoU after one simulated stroke per annotator.
    pub iou_corrected: f64,
    pub asd_initial_mm: Option<f64>,
    pub asd_corrected_mm: Option<f64>,
    pub keep_corrected: Vec<bool>,
    /// Annotators whose mask had no usable stroke.
    pub degenerate_strokes: usize,
}

impl CaseEval {
    pub fn records(&self) -> [EvalRecord; 2] {
        let rec = |iou, asd_mm, corrected| EvalRecord {
            nodule_id: self.id.clone(),
            iou,
            asd_mm,
            radius_mm: self.radius_mm,
            texture: self.texture,
            corrected,
        };
        [
            rec(self.iou_initial, self.asd_initial_mm, false),
            rec(self.iou_corrected, self.asd_corrected_mm, true),
        ]
    }
}

fn mean_asd(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<Option<f64>> {
    let mut total = 0.0;
    for (pred, ann) in pairs {
        if pred.is_blank() {
            return Ok(None);
        }
        total += asd(pred, ann)?;
    }
    Ok(Some(total / pairs.len() as f64))
}

fn tensor(v: &Grid<f32>) -> Result<Tensor5<f32>> {
    let [z, y, x] = v.dims();
    Tensor5::new([1, 1, z, y, x], v.values.clone())
}

/// Block-1 segmentation, then one simulated stroke per annotator through
/// block 2 with keep-or-replace against that annotator.
pub fn evaluate_case(params: &WNetParams<f32>, case: &PreparedCase, decay_p: f64) -> Result<CaseEval> {
    let geometry = case.image.geometry.clone();
    let x = tensor(&case.image)?;
    let (initial_t, _) = params.forward_block1(&x, Mode::Eval)?;
    let initial_soft = Grid::new(geometry.clone(), initial_t.values.clone())?;
    let initial = threshold(&initial_soft, 0.5);
    let ann = &case.annotations;

    let field = FieldParams::new(decay_p);
    let mut corrected = Vec::with_capacity(ann.agreement_level());
    let mut degenerate = 0;
    for target in ann.masks() {
        let pair: Option<PointPair> = match simulate_endpoints(target) {
            Ok(p) => Some(p),
            Err(Error::DegenerateStroke(_)) => None,
            Err(e) => return Err(e),
        };
        let Some(pair) = pair else {
            degenerate += 1;
            corrected.push(initial.clone());
            continue;
        };
        let m = attraction_map(Some(&pair), &field, &geometry)?;
        let m = Tensor5::new(x.shape, m.values)?;
        let (out, _) = params.forward_block2(&x, &initial_t, &m, Mode::Eval)?;
        corrected.push(threshold(&Grid::new(geometry.clone(), out.values)?, 0.5));
    }
    let b2 = best_of_two(ann, &initial, &corrected)?;
    let kept: Vec<&BinaryMask> = corrected
        .iter()
        .zip(&b2.keep_corrected)
        .map(|(c, &k)| if k { c } else { &initial })
        .collect();
    let initial_pairs: Vec<_> = ann.masks().iter().map(|a| (&initial, a)).collect();
    let kept_pairs: Vec<_> = kept.iter().zip(ann.masks()).map(|(k, a)| (*k, a)).collect();
    Ok(CaseEval {
        id: case.id.clone(),
        radius_mm: case.radius_mm,
        texture: case.texture,
        iou_initial: mean_iou_vs_annotators(&initial, ann)?,
        iou_corrected: b2.mean_iou,
        asd_initial_mm: mean_asd(&initial_pairs)?,
        asd_corrected_mm: mean_asd(&kept_pairs)?,
        keep_corrected: b2.keep_corrected,
        degenerate_strokes: degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cases: Vec<CaseEval>,
    pub summary: EvalSummary,
}

impl Evaluation {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.cases.iter().flat_map(|c| c.records()).collect()
    }

    /// Share (%) of cases whose corrected IoU is strictly higher.
    pub fn pct_improved(&self) -> f64 {
        self.summary.pct_improved
    }
}

pub fn evaluate(params: &WNetParams<f32>, cases: &[PreparedCase], decay_p: f64) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cases = cases
        .iter()
        .map(|c| evaluate_case(params, c, decay_p))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<EvalRecord> = cases.iter().flat_map(|c| c.records()).collect();
    Ok(Evaluation {
        summary: summarize(&records),
        cases,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub net: WNetConfig,
    pub train: TrainConfig,
    pub test_frac: f64,
    pub val_frac: f64,
    pub init_seed: u64,
    /// Skip the second stage and the correction protocol.
    #[serde(default)]
    pub stage1_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            net: WNetConfig::default(),
            train: TrainConfig {
                max_epochs_stage1: 8,
                max_epochs_stage2: 8,
                seed: 2019,
                ..TrainConfig::default()
            },
            test_frac: 0.2,
            val_frac: 0.2,
            init_seed: 2019,
            stage1_only: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        for f in [self.test_frac, self.val_frac] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("split fraction {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub params: WNetParams<f32>,
    /// Parameters at the end of stage 1.
    pub stage1_params: WNetParams<f32>,
    pub split: Split,
    pub history: Vec<EpochRecord>,
    pub evaluation: Evaluation,
    pub seconds_train: f64,
    pub seconds_total: f64,
}

pub fn prepare_all(cases: &[SynthCase], side: usize) -> Result<Vec<PreparedCase>> {
    cases.iter().map(|c| prepare_case(c, side)).collect()
}

/// Train on prepared cases and evaluate on the test split.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &[PreparedCase]) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let ids: Vec<String> = prepared.iter().map(|c| c.id.clone()).collect();
    let split = split_cases(&ids, cfg.test_frac, cfg.val_frac, cfg.dataset.seed)?;
    let items = |idx: &[usize]| idx.iter().map(|&i| prepared[i].train_item()).collect::<Vec<_>>();
    let (train, val) = (items(&split.train), items(&split.val));

    let params = WNetParams::init(cfg.net, cfg.init_seed)?;
    let s1 = train_stage1(params, &train, &val, &cfg.train)?;
    let stage1_params = s1.params.clone();
    let mut history = s1.history;
    let params = if cfg.stage1_only {
        s1.params
    } else {
        let s2 = train_stage2(s1.params, &train, &val, &cfg.train)?;
        history.extend(s2.history);
        s2.params
    };
    let seconds_train = start.elapsed().as_secs_f64();
    let test: Vec<PreparedCase> = split.test.iter().map(|&i| prepared[i].clone()).collect();
    let evaluation = evaluate(&params, &test, cfg.train.loss.decay_p)?;
    Ok(ExperimentOutcome {
        params,
        stage1_params,
        split,
        history,
        evaluation,
        seconds_train,
        seconds_total: start.elapsed().as_secs_f64(),
    })
}

/// Generate the dataset, then [`run_prepared`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let cases = generate_dataset(&cfg.dataset)?;
    run_prepared(cfg, &prepare_all(&cases, cfg.net.input_side)?)
}

/// `eval.csv`, `cases.json`, `summary.json`, `history.jsonl` and the
/// checkpoint under `dir`.
pub fn write_outcome(dir: &Path, outcome: &ExperimentOutcome, loss: &LossConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_evaluation(dir, &outcome.evaluation)?;
    write_jsonl(&outcome.history, BufWriter::new(File::create(dir.join("history.jsonl"))?))?;
    serde_json::to_writer_pretty(File::create(dir.join("split.json"))?, &outcome.split)?;
    serde_json::to_writer_pretty(File::create(dir.join("loss.json"))?, loss)?;
    save_checkpoint(&dir.join("model"), &outcome.params)
}

pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&ev.records(), BufWriter::new(File::create(dir.join("eval.csv"))?))?;
    serde_json::to_writer_pretty(File::create(dir.join("cases.json"))?, &ev.cases)?;
    serde_json::to_writer_pretty(File::create(dir.join("summary.json"))?, &ev.summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_sized() {
        let ids: Vec<String> = (0..200).map(|i| format!("c{i:03}")).collect();
        let s = split_cases(&ids, 0.2, 0.2, 1).unwrap();
        assert_eq!(s.test.len(), 40);
        assert_eq!(s.val.len(), 32);
        assert_eq!(s.train.len(), 128);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_cases(&ids, 0.2, 0.2, 1).unwrap(), s);
    }

    #[test]
    fn prepared_case_lives_on_network_grid() {
        let cfg = DatasetConfig {
            n_cases: 2,
            ..DatasetConfig::default()
        };
        let cases = generate_dataset(&cfg).unwrap();
        let p = prepare_case(&cases[0], 16).unwrap();
        assert_eq!(p.image.dims(), [16; 3]);
        assert!(p.annotations.masks().iter().all(|m| m.dims() == [16; 3] && !m.is_blank()));
        assert_eq!(p.radius_mm, equivalent_radius(&cases[0].annotations).unwrap());
        assert!((p.image.geometry.spacing_mm[0] - cfg.spacing_mm * cfg.grid_side as f64 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_of_untrained_net_is_well_formed() {
        let cfg = DatasetConfig {
            n_cases: 3,
            ..DatasetConfig::default()
        };
        let cases = prepare_all(&generate_dataset(&cfg).unwrap(), 8).unwrap();
        let params = WNetParams::init(WNetConfig::tiny(), 0).unwrap();
        let ev = evaluate(&params, &cases, 0.44).unwrap();
        assert_eq!(ev.cases.len(), 3);
        for c in &ev.cases {
            assert!(c.iou_corrected >= c.iou_initial - 1e-12);
            assert_eq!(c.keep_corrected.len(), cases.iter().find(|p| p.id == c.id).unwrap().annotations.agreement_level());
        }
        assert_eq!(ev.records().len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_evaluation(dir.path(), &ev).unwrap();
        let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }
}
