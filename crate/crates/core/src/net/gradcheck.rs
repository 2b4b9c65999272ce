//! End-to-end finite-difference check of the parameter gradient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor5;
use super::wnet::*;
use crate::error::Result;
use crate::field::{attraction_map, FieldParams, PointPair};
use crate::loss::LossConfig;
use crate::volgrid::VolumeGeometry;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates sampled per layer type and stage.
pub const COORDS_PER_TYPE: usize = 50;
/// Gradients smaller than this are compared in absolute terms. Conv biases
/// feeding a train-mode batch norm have a true gradient of exactly zero, so
/// their analytic value is pure rounding noise.
pub const ABS_FLOOR_F64: f64 = 1e-4;
pub const ABS_FLOOR_F32: f64 = 1e-3;
const BATCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub checked: usize,
    /// Coordinates dropped because a ReLU switched within the step.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub config: WNetConfig,
    pub seed: u64,
    pub step: f64,
    /// Keyed `stage1/conv.kernel`, `stage2/bn.gamma`, ...
    pub per_type: BTreeMap<String, TypeReport>,
    pub max_rel_err: f64,
    /// Stage-2 gradient of every block-1 parameter is exactly zero.
    pub frozen_block1_zero: bool,
}

impl Precision {
    pub fn abs_floor(self) -> f64 {
        match self {
            Precision::F32 => ABS_FLOOR_F32,
            Precision::F64 => ABS_FLOOR_F64,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn layer_type(name: &str) -> String {
    let mut parts = name.rsplitn(3, '.');
    let leaf = parts.next().unwrap_or_default();
    let kind = parts.next().unwrap_or_default();
    if kind.is_empty() || name.starts_with("head.") {
        format!("head.{leaf}")
    } else {
        format!("{kind}.{leaf}")
    }
}

/// Random image, ball target and two-point weight map on the config grid.
pub fn random_batch(config: &WNetConfig, seed: u64) -> Result<Batch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.input_side;
    let geom = VolumeGeometry::cube(s, 1.0);
    let v = geom.len();
    let mut image = Vec::with_capacity(BATCH * v);
    let mut target = Vec::with_capacity(BATCH * v);
    let mut weightmap = Vec::with_capacity(BATCH * v);
    let half = s as f64 / 2.0;
    for _ in 0..BATCH {
        let c: [f64; 3] = std::array::from_fn(|_| half - 0.5 + rng.random_range(-1.0..1.0));
        let r = rng.random_range(0.2..0.35) * s as f64;
        for i in 0..v {
            let p = geom.coords(i);
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            let inside = d2 <= r * r;
            target.push(u8::from(inside));
            image.push(if inside { 0.7 } else { 0.2 } + rng.random_range(-0.1..0.1));
        }
        let p0 = [c[0].round(), c[1].round(), (c[2] - r).round().max(0.0)];
        let p1 = [c[0].round(), c[1].round(), (c[2] + r).round().min(s as f64 - 1.0)];
        let pair = PointPair::new(p0, p1, geom.dims)?;
        weightmap.extend(attraction_map(Some(&pair), &FieldParams::default(), &geom)?.values);
    }
    Ok(Batch {
        image: Tensor5::new([BATCH, 1, s, s, s], image)?,
        target,
        weightmap,
    })
}

fn cast_batch<T: Scalar, U: Scalar>(b: &Batch<T>) -> Batch<U> {
    Batch {
        image: Tensor5::new(b.image.shape, b.image.values.iter().map(|x| U::of(x.to_f64().unwrap())).collect())
            .expect("same shape"),
        target: b.target.clone(),
        weightmap: b.weightmap.clone(),
    }
}

fn block_mut(p: &mut WNetParams<f64>, stage: Stage) -> &mut BlockParams<f64> {
    match stage {
        Stage::One => &mut p.block1,
        Stage::Two => &mut p.block2,
    }
}

/// Central-difference oracle in f64 against the analytic gradient in the
/// requested precision. The oracle always evaluates the same (possibly
/// f32-rounded) parameter values the analytic pass used.
pub fn grad_check(config: &WNetConfig, seed: u64, precision: Precision) -> Result<GradCheckReport> {
    config.validate()?;
    let loss = LossConfig::default();
    let init = WNetParams::<f64>::init(*config, seed)?;
    // Non-trivial batch-norm parameters and running statistics.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut base = init;
    for block in [&mut base.block1, &mut base.block2] {
        let names: Vec<String> = block.tensors().iter().map(|t| t.name.clone()).collect();
        for (name, t) in names.iter().zip(block.tensors_mut()) {
            if name.ends_with("bn.gamma") || name.ends_with("running_var") {
                t.iter_mut().for_each(|v| *v = rng.random_range(0.6..1.4));
            } else if name.ends_with("bn.beta") || name.ends_with("running_mean") || name.ends_with("conv.bias") || name == "head.bias" {
                t.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
    }
    let batch64 = random_batch(config, seed)?;

    // Analytic gradients, and the exact parameter values they refer to.
    let (oracle_params, step1, step2) = match precision {
        Precision::F64 => {
            let s1 = loss_and_grad(&base, &batch64, Stage::One, &loss)?;
            let s2 = loss_and_grad(&base, &batch64, Stage::Two, &loss)?;
            (base, to_f64(&s1), to_f64(&s2))
        }
        Precision::F32 => {
            let p32: WNetParams<f32> = base.cast();
            let b32 = cast_batch::<f64, f32>(&batch64);
            let s1 = loss_and_grad(&p32, &b32, Stage::One, &loss)?;
            let s2 = loss_and_grad(&p32, &b32, Stage::Two, &loss)?;
            (p32.cast::<f64>(), to_f64(&s1), to_f64(&s2))
        }
    };
    // The oracle sees the same f32-rounded image in 32-bit mode.
    let oracle_batch: Batch<f64> = match precision {
        Precision::F64 => batch64,
        Precision::F32 => cast_batch::<f32, f64>(&cast_batch::<f64, f32>(&batch64)),
    };

    let mut per_type = BTreeMap::new();
    let mut frozen_block1_zero = true;
    for (stage, grads) in [(Stage::One, &step1), (Stage::Two, &step2)] {
        let stage_name = match stage {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        };
        let (own, other) = match stage {
            Stage::One => (&grads.0, &grads.1),
            Stage::Two => (&grads.1, &grads.0),
        };
        if stage == Stage::Two {
            frozen_block1_zero = other.iter().all(|t| t.iter().all(|&v| v == 0.0));
        }
        let block = match stage {
            Stage::One => &oracle_params.block1,
            Stage::Two => &oracle_params.block2,
        };
        // learnable tensors in gradient order, grouped by type
        let learnable: Vec<String> = block
            .tensors()
            .iter()
            .filter(|t| t.learnable)
            .map(|t| t.name.clone())
            .collect();
        let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (ti, name) in learnable.iter().enumerate() {
            let g = groups.entry(layer_type(name)).or_default();
            g.extend((0..own[ti].len()).map(|k| (ti, k)));
        }
        let (_, base_sig) = train_loss(&oracle_params, &oracle_batch, stage, &loss)?;
        for (ty, mut coords) in groups {
            coords.shuffle(&mut rng);
            let mut rep = TypeReport {
                checked: 0,
                skipped_kinks: 0,
                max_rel_err: 0.0,
            };
            let mut work = oracle_params.clone();
            for (ti, k) in coords {
                if rep.checked == COORDS_PER_TYPE {
                    break;
                }
                let orig = block_mut(&mut work, stage).learnable_mut()[ti][k];
                let eval = |w: &mut WNetParams<f64>, val: f64| -> Result<(f64, u64)> {
                    block_mut(w, stage).learnable_mut()[ti][k] = val;
                    train_loss(w, &oracle_batch, stage, &loss)
                };
                let (up, sig_up) = eval(&mut work, orig + FD_STEP)?;
                let (down, sig_down) = eval(&mut work, orig - FD_STEP)?;
                block_mut(&mut work, stage).learnable_mut()[ti][k] = orig;
                if sig_up != base_sig || sig_down != base_sig {
                    rep.skipped_kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * FD_STEP);
                let e = rel_err(own[ti][k], numeric, precision.abs_floor());
                rep.max_rel_err = rep.max_rel_err.max(e);
                rep.checked += 1;
            }
            per_type.insert(format!("{stage_name}/{ty}"), rep);
        }
    }
    let max_rel_err = per_type.values().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        precision,
        config: *config,
        seed,
        step: FD_STEP,
        per_type,
        max_rel_err,
        frozen_block1_zero,
    })
}

type Grads = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn to_f64<T: Scalar>(s: &StepResult<T>) -> Grads {
    let cv = |g: &BlockGrad<T>| {
        g.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v.to_f64().unwrap()).collect())
            .collect()
    };
    (cv(&s.block1), cv(&s.block2))
}
