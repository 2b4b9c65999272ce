use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::scalar::Scalar;
use super::tensor::Tensor5;
use crate::error::{Error, Result};
use crate::field::WeightMap;
use crate::loss::{combined_loss, iou_loss, LossConfig};
use crate::volgrid::{Grid, ScalarVolume, SoftMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WNetConfig {
    pub input_side: usize,
    pub base_filters: usize,
    pub depth: usize,
    #[serde(default = "two")]
    pub block2_extra_inputs: usize,
}

fn two() -> usize {
    2
}

impl Default for WNetConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            base_filters: 8,
            depth: 3,
            block2_extra_inputs: 2,
        }
    }
}

impl WNetConfig {
    pub fn new(input_side: usize, base_filters: usize, depth: usize) -> Result<Self> {
        let c = Self {
            input_side,
            base_filters,
            depth,
            block2_extra_inputs: 2,
        };
        c.validate()?;
        Ok(c)
    }

    /// Side 8, two filters at the top level: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_side: 8,
            base_filters: 2,
            depth: 2,
            block2_extra_inputs: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth < 1 || self.depth > 16 {
            return bad(format!("depth {}", self.depth));
        }
        if self.base_filters == 0 {
            return bad("base_filters 0".into());
        }
        if !self.input_side.is_power_of_two() || self.input_side % (1 << self.depth) != 0 {
            return bad(format!(
                "input_side {} must be a power of two divisible by 2^{}",
                self.input_side, self.depth
            ));
        }
        if self.block2_extra_inputs != 2 {
            return bad(format!("block2_extra_inputs {}", self.block2_extra_inputs));
        }
        Ok(())
    }

    /// Filters at level `l`, doubling per level and capped at the last
    /// encoder level.
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level.min(self.depth - 1)
    }

    pub fn side_at(&self, level: usize) -> usize {
        self.input_side >> level
    }

    pub fn voxels(&self) -> usize {
        self.input_side.pow(3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv: Conv::zeros(cin, cout, stride),
            bn: BatchNorm::new(cout),
        }
    }
}

/// One encoder-decoder block. Level `l` runs at side `input_side / 2^l`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub in_channels: usize,
    pub stem: ConvBn<T>,
    /// `down[l]` takes level `l` to level `l + 1` with a stride-2 conv.
    pub down: Vec<ConvBn<T>>,
    /// `enc[l]` refines the output of `down[l]`.
    pub enc: Vec<ConvBn<T>>,
    /// `dec[l]` maps `concat(up(h[l + 1]), e[l])` to `h[l]`.
    pub dec: Vec<ConvBn<T>>,
    pub head: Conv<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(config: &WNetConfig, in_channels: usize) -> Self {
        let f = |l| config.filters(l);
        Self {
            in_channels,
            stem: ConvBn::new(in_channels, f(0), 1),
            down: (0..config.depth).map(|l| ConvBn::new(f(l), f(l + 1), 2)).collect(),
            enc: (0..config.depth).map(|l| ConvBn::new(f(l + 1), f(l + 1), 1)).collect(),
            dec: (0..config.depth).map(|l| ConvBn::new(f(l + 1) + f(l), f(l), 1)).collect(),
            head: Conv::zeros(f(0), 1, 1),
        }
    }

    fn init(config: &WNetConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(config, in_channels);
        let mut fill = |c: &mut Conv<T>, gain: f64| {
            let std = (gain / c.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            c.kernel.iter_mut().for_each(|v| *v = T::of(normal.sample(rng)));
        };
        fill(&mut b.stem.conv, 2.0);
        for cb in b.down.iter_mut().chain(b.enc.iter_mut()).chain(b.dec.iter_mut()) {
            fill(&mut cb.conv, 2.0);
        }
        fill(&mut b.head, 1.0);
        b
    }

    fn conv_bns(&self) -> Vec<(String, &ConvBn<T>)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (l, cb) in self.down.iter().enumerate() {
            v.push((format!("down{l}"), cb));
        }
        for (l, cb) in self.enc.iter().enumerate() {
            v.push((format!("enc{l}"), cb));
        }
        for (l, cb) in self.dec.iter().enumerate() {
            v.push((format!("dec{l}"), cb));
        }
        v
    }

    fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn<T>> {
        let mut v = vec![&mut self.stem];
        v.extend(self.down.iter_mut());
        v.extend(self.enc.iter_mut());
        v.extend(self.dec.iter_mut());
        v
    }

    /// Every stored tensor (learnable and running statistics) with its name
    /// and shape, in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (name, cb) in self.conv_bns() {
            let c = &cb.conv;
            out.push(TensorRef::new(format!("{name}.conv.kernel"), vec![c.cout, c.cin, 3, 3, 3], &c.kernel, true));
            out.push(TensorRef::new(format!("{name}.conv.bias"), vec![c.cout], &c.bias, true));
            let n = cb.bn.channels();
            out.push(TensorRef::new(format!("{name}.bn.gamma"), vec![n], &cb.bn.gamma, true));
            out.push(TensorRef::new(format!("{name}.bn.beta"), vec![n], &cb.bn.beta, true));
            out.push(TensorRef::new(format!("{name}.bn.running_mean"), vec![n], &cb.bn.running_mean, false));
            out.push(TensorRef::new(format!("{name}.bn.running_var"), vec![n], &cb.bn.running_var, false));
        }
        let h = &self.head;
        out.push(TensorRef::new("head.kernel".into(), vec![1, h.cin, 3, 3, 3], &h.kernel, true));
        out.push(TensorRef::new("head.bias".into(), vec![1], &h.bias, true));
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        let Self { stem, down, enc, dec, head, .. } = self;
        for cb in std::iter::once(stem).chain(down.iter_mut()).chain(enc.iter_mut()).chain(dec.iter_mut()) {
            out.push(&mut cb.conv.kernel);
            out.push(&mut cb.conv.bias);
            out.push(&mut cb.bn.gamma);
            out.push(&mut cb.bn.beta);
            out.push(&mut cb.bn.running_mean);
            out.push(&mut cb.bn.running_var);
        }
        out.push(&mut head.kernel);
        out.push(&mut head.bias);
        out
    }

    /// Learnable tensors only, mutable, in [`BlockGrad::tensors`] order.
    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        let Self { stem, down, enc, dec, head, .. } = self;
        for cb in std::iter::once(stem).chain(down.iter_mut()).chain(enc.iter_mut()).chain(dec.iter_mut()) {
            out.push(&mut cb.conv.kernel);
            out.push(&mut cb.conv.bias);
            out.push(&mut cb.bn.gamma);
            out.push(&mut cb.bn.beta);
        }
        out.push(&mut head.kernel);
        out.push(&mut head.bias);
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.learnable).map(|t| t.values.len()).sum()
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn apply_batch_stats(&mut self, trace: &BlockTrace<T>) {
        let traces = trace.conv_bn_traces();
        for (cb, t) in self.conv_bns_mut().into_iter().zip(traces) {
            if let Some(s) = &t.stats {
                cb.bn.update_running(s);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect::<Vec<U>>();
        let conv = |c: &Conv<T>| Conv {
            cin: c.cin,
            cout: c.cout,
            stride: c.stride,
            kernel: cv(&c.kernel),
            bias: cv(&c.bias),
        };
        let cb = |c: &ConvBn<T>| ConvBn {
            conv: conv(&c.conv),
            bn: BatchNorm {
                gamma: cv(&c.bn.gamma),
                beta: cv(&c.bn.beta),
                running_mean: cv(&c.bn.running_mean),
                running_var: cv(&c.bn.running_var),
            },
        };
        BlockParams {
            in_channels: self.in_channels,
            stem: cb(&self.stem),
            down: self.down.iter().map(cb).collect(),
            enc: self.enc.iter().map(cb).collect(),
            dec: self.dec.iter().map(cb).collect(),
            head: conv(&self.head),
        }
    }

    pub fn forward(&self, config: &WNetConfig, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BlockTrace<T>)> {
        let s = config.input_side;
        if x.channels() != self.in_channels || x.spatial() != [s, s, s] {
            return Err(Error::Shape(format!(
                "block expects (_, {}, {s}, {s}, {s}), got {:?}",
                self.in_channels, x.shape
            )));
        }
        let depth = config.depth;
        let (e0, stem) = conv_bn_forward(&self.stem, x.clone(), mode)?;
        let mut skips = vec![e0];
        let mut down = Vec::with_capacity(depth);
        let mut enc = Vec::with_capacity(depth);
        for l in 0..depth {
            let (d, td) = conv_bn_forward(&self.down[l], skips[l].clone(), mode)?;
            let (e, te) = conv_bn_forward(&self.enc[l], d, mode)?;
            down.push(td);
            enc.push(te);
            skips.push(e);
        }
        let mut h = skips.pop().expect("bottleneck");
        let mut dec: Vec<Option<ConvBnTrace<T>>> = (0..depth).map(|_| None).collect();
        let mut up_shapes = vec![[0; 5]; depth];
        for l in (0..depth).rev() {
            up_shapes[l] = h.shape;
            let u = upsample_nn(&h);
            let cat = concat_channels(&u, &skips[l])?;
            let (hl, t) = conv_bn_forward(&self.dec[l], cat, mode)?;
            dec[l] = Some(t);
            h = hl;
        }
        let out = sigmoid_head(&h, &self.head)?;
        let trace = BlockTrace {
            stem,
            down,
            enc,
            dec: dec.into_iter().map(|t| t.expect("filled")).collect(),
            up_shapes,
            head_input: h,
            output: out.values.clone(),
        };
        Ok((out, trace))
    }

    /// Back-propagate `dout` (gradient w.r.t. the block output) into `g`.
    /// Returns the gradient w.r.t. the block input when `want_dx` is set.
    pub fn backward(&self, trace: &BlockTrace<T>, dout: &[T], g: &mut BlockGrad<T>, want_dx: bool) -> Option<Vec<T>> {
        let depth = self.dec.len();
        let mut dh = sigmoid_head_backward(&trace.head_input, &self.head, &trace.output, dout, &mut g.head);
        let mut dskip: Vec<Vec<T>> = Vec::with_capacity(depth);
        for l in 0..depth {
            let t = &trace.dec[l];
            let dcat = conv_bn_backward(&self.dec[l], t, &dh, &mut g.dec[l], true).expect("dx");
            let cu = trace.up_shapes[l][1];
            let (du, ds) = concat_channels_backward(t.input.shape, cu, &dcat);
            dskip.push(ds);
            dh = upsample_nn_backward(trace.up_shapes[l], &du);
        }
        // dh is now the gradient w.r.t. the bottleneck e[depth]
        let mut de = dh;
        for l in (0..depth).rev() {
            let dd = conv_bn_backward(&self.enc[l], &trace.enc[l], &de, &mut g.enc[l], true).expect("dx");
            let mut prev = conv_bn_backward(&self.down[l], &trace.down[l], &dd, &mut g.down[l], true).expect("dx");
            for (a, b) in prev.iter_mut().zip(&dskip[l]) {
                *a += *b;
            }
            de = prev;
        }
        conv_bn_backward(&self.stem, &trace.stem, &de, &mut g.stem, want_dx)
    }
}

pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [T],
    pub learnable: bool,
}

impl<'a, T> TensorRef<'a, T> {
    fn new(name: String, shape: Vec<usize>, values: &'a [T], learnable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { name, shape, values, learnable }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnTrace<T> {
    pub input: Tensor5<T>,
    pub pre_shape: [usize; 5],
    pub bn: BnCache<T>,
    pub stats: Option<BatchStats<T>>,
}

fn conv_bn_forward<T: Scalar>(p: &ConvBn<T>, x: Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, ConvBnTrace<T>)> {
    let z = conv3(&x, &p.conv)?;
    let (y, bn, stats) = batchnorm_relu(&z, &p.bn, mode)?;
    Ok((
        y,
        ConvBnTrace {
            input: x,
            pre_shape: z.shape,
            bn,
            stats,
        },
    ))
}

fn conv_bn_backward<T: Scalar>(
    p: &ConvBn<T>,
    t: &ConvBnTrace<T>,
    dout: &[T],
    g: &mut ConvBnGrad<T>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let dz = batchnorm_relu_backward(t.pre_shape, &p.bn, &t.bn, dout, &mut g.bn);
    conv3_backward(&t.input, &p.conv, &dz, &mut g.conv, want_dx)
}

/// Activations a block's backward pass needs.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub stem: ConvBnTrace<T>,
    pub down: Vec<ConvBnTrace<T>>,
    pub enc: Vec<ConvBnTrace<T>>,
    pub dec: Vec<ConvBnTrace<T>>,
    up_shapes: Vec<[usize; 5]>,
    head_input: Tensor5<T>,
    output: Vec<T>,
}

impl<T: Scalar> BlockTrace<T> {
    fn conv_bn_traces(&self) -> Vec<&ConvBnTrace<T>> {
        let mut v = vec![&self.stem];
        v.extend(self.down.iter());
        v.extend(self.enc.iter());
        v.extend(self.dec.iter());
        v
    }

    /// Combined hash of every ReLU on/off pattern in the block.
    pub fn relu_signature(&self) -> u64 {
        self.conv_bn_traces()
            .iter()
            .fold(0u64, |h, t| h.rotate_left(7) ^ t.bn.relu_signature)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnGrad<T> {
    pub conv: ConvGrad<T>,
    pub bn: BnGrad<T>,
}

/// Gradient of the learnable parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad<T> {
    pub stem: ConvBnGrad<T>,
    pub down: Vec<ConvBnGrad<T>>,
    pub enc: Vec<ConvBnGrad<T>>,
    pub dec: Vec<ConvBnGrad<T>>,
    pub head: ConvGrad<T>,
}

impl<T: Scalar> BlockGrad<T> {
    pub fn zeros_like(p: &BlockParams<T>) -> Self {
        let cb = |c: &ConvBn<T>| ConvBnGrad {
            conv: ConvGrad::zeros_like(&c.conv),
            bn: BnGrad::zeros_like(&c.bn),
        };
        Self {
            stem: cb(&p.stem),
            down: p.down.iter().map(cb).collect(),
            enc: p.enc.iter().map(cb).collect(),
            dec: p.dec.iter().map(cb).collect(),
            head: ConvGrad::zeros_like(&p.head),
        }
    }

    /// Same order as [`BlockParams::learnable_mut`].
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for cb in std::iter::once(&self.stem).chain(&self.down).chain(&self.enc).chain(&self.dec) {
            out.push(&cb.conv.kernel);
            out.push(&cb.conv.bias);
            out.push(&cb.bn.gamma);
            out.push(&cb.bn.beta);
        }
        out.push(&self.head.kernel);
        out.push(&self.head.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        let Self { stem, down, enc, dec, head } = self;
        for cb in std::iter::once(stem).chain(down.iter_mut()).chain(enc.iter_mut()).chain(dec.iter_mut()) {
            out.push(&mut cb.conv.kernel);
            out.push(&mut cb.conv.bias);
            out.push(&mut cb.bn.gamma);
            out.push(&mut cb.bn.beta);
        }
        out.push(&mut head.kernel);
        out.push(&mut head.bias);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameters of both blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct WNetParams<T> {
    pub config: WNetConfig,
    pub block1: BlockParams<T>,
    pub block2: BlockParams<T>,
}

pub const BLOCK1_INPUTS: usize = 1;

impl<T: Scalar> WNetParams<T> {
    pub fn init(config: WNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block1 = BlockParams::init(&config, BLOCK1_INPUTS, &mut rng);
        let block2 = BlockParams::init(&config, BLOCK1_INPUTS + config.block2_extra_inputs, &mut rng);
        Ok(Self { config, block1, block2 })
    }

    pub fn zeros(config: WNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            block1: BlockParams::zeros(&config, BLOCK1_INPUTS),
            block2: BlockParams::zeros(&config, BLOCK1_INPUTS + config.block2_extra_inputs),
        })
    }

    /// Learnable parameters of both blocks.
    pub fn param_count(&self) -> usize {
        self.block1.learnable_count() + self.block2.learnable_count()
    }

    pub fn cast<U: Scalar>(&self) -> WNetParams<U> {
        WNetParams {
            config: self.config,
            block1: self.block1.cast(),
            block2: self.block2.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.block1, &self.block2]
            .iter()
            .all(|b| b.tensors().iter().all(|t| t.values.iter().all(|v| v.is_finite())))
    }

    pub fn forward_block1(&self, image: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BlockTrace<T>)> {
        self.block1.forward(&self.config, image, mode)
    }

    pub fn block2_input(image: &Tensor5<T>, initial: &Tensor5<T>, weightmap: &Tensor5<T>) -> Result<Tensor5<T>> {
        for t in [image, initial, weightmap] {
            if t.channels() != 1 {
                return Err(Error::Shape(format!("block-2 inputs are single-channel, got {:?}", t.shape)));
            }
        }
        concat_channels(&concat_channels(image, initial)?, weightmap)
    }

    pub fn forward_block2(
        &self,
        image: &Tensor5<T>,
        initial: &Tensor5<T>,
        weightmap: &Tensor5<T>,
        mode: Mode,
    ) -> Result<(Tensor5<T>, BlockTrace<T>)> {
        let x = Self::block2_input(image, initial, weightmap)?;
        self.block2.forward(&self.config, &x, mode)
    }

    fn volume_tensor(&self, g: &Grid<f32>) -> Result<Tensor5<T>> {
        let s = self.config.input_side;
        if g.dims() != [s, s, s] {
            return Err(Error::Shape(format!("volume {:?} but network side is {s}", g.dims())));
        }
        Tensor5::new([1, 1, s, s, s], g.values.iter().map(|&v| T::of(v as f64)).collect())
    }

    fn to_soft(&self, like: &ScalarVolume, t: &Tensor5<T>) -> SoftMask {
        Grid {
            geometry: like.geometry.clone(),
            values: t.values.iter().map(|v| v.to_f32().unwrap()).collect(),
        }
    }

    /// Eval-mode automatic segmentation of a single network-sized volume.
    pub fn segment(&self, volume: &ScalarVolume) -> Result<SoftMask> {
        let x = self.volume_tensor(volume)?;
        let (out, _) = self.forward_block1(&x, Mode::Eval)?;
        Ok(self.to_soft(volume, &out))
    }

    /// Eval-mode correction given an initial soft segmentation and the
    /// weight map of the user's stroke.
    pub fn correct(&self, volume: &ScalarVolume, initial: &SoftMask, weightmap: &WeightMap) -> Result<SoftMask> {
        let x = self.volume_tensor(volume)?;
        let i = self.volume_tensor(initial)?;
        let m = self.volume_tensor(&weightmap.to_soft())?;
        let (out, _) = self.forward_block2(&x, &i, &m, Mode::Eval)?;
        Ok(self.to_soft(volume, &out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Block 1 alone, IoU loss.
    One,
    /// Block 2 on top of a frozen, eval-mode block 1, combined loss.
    Two,
}

/// A training batch on the network grid. Targets and weight maps are flat
/// per sample, concatenated.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub image: Tensor5<T>,
    pub target: Vec<u8>,
    pub weightmap: Vec<f32>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.image.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weight_tensor(&self) -> Result<Tensor5<T>> {
        Tensor5::new(self.image.shape, self.weightmap.iter().map(|&v| T::of(v as f64)).collect())
    }
}

/// Loss, gradients and train-mode statistics of one step.
#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub loss: f64,
    pub block1: BlockGrad<T>,
    pub block2: BlockGrad<T>,
    pub trace: BlockTrace<T>,
    /// ReLU pattern of every train-mode layer; used to spot kinks.
    pub relu_signature: u64,
}

/// Mean per-sample loss of `stage` and its gradient. In stage 2 block 1 runs
/// in eval mode and its gradient stays exactly zero.
pub fn loss_and_grad<T: Scalar>(
    params: &WNetParams<T>,
    batch: &Batch<T>,
    stage: Stage,
    loss: &LossConfig,
) -> Result<StepResult<T>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let v = params.config.voxels();
    if batch.target.len() != n * v || batch.weightmap.len() != n * v {
        return Err(Error::Shape("batch target/weight map length".into()));
    }
    let inv_n = T::of(1.0 / n as f64);
    let mut b1 = BlockGrad::zeros_like(&params.block1);
    let mut b2 = BlockGrad::zeros_like(&params.block2);
    let mut total = 0.0f64;
    let per_sample = |pred: &[T], i: usize, with_field: bool| -> Result<(T, Vec<T>)> {
        let tgt = &batch.target[i * v..(i + 1) * v];
        if with_field {
            let lv = combined_loss(pred, tgt, &batch.weightmap[i * v..(i + 1) * v], loss)?;
            Ok((lv.total, lv.grad_wrt_pred))
        } else {
            iou_loss(pred, tgt)
        }
    };
    let (trace, dout) = match stage {
        Stage::One => {
            let (out, trace) = params.forward_block1(&batch.image, Mode::Train)?;
            let mut dout = Vec::with_capacity(n * v);
            for i in 0..n {
                let (l, g) = per_sample(&out.values[i * v..(i + 1) * v], i, false)?;
                total += l.to_f64().unwrap();
                dout.extend(g.into_iter().map(|x| x * inv_n));
            }
            (trace, dout)
        }
        Stage::Two => {
            let (initial, _) = params.forward_block1(&batch.image, Mode::Eval)?;
            let m = batch.weight_tensor()?;
            let (out, trace) = params.forward_block2(&batch.image, &initial, &m, Mode::Train)?;
            let mut dout = Vec::with_capacity(n * v);
            for i in 0..n {
                let (l, g) = per_sample(&out.values[i * v..(i + 1) * v], i, true)?;
                total += l.to_f64().unwrap();
                dout.extend(g.into_iter().map(|x| x * inv_n));
            }
            (trace, dout)
        }
    };
    match stage {
        Stage::One => params.block1.backward(&trace, &dout, &mut b1, false),
        Stage::Two => params.block2.backward(&trace, &dout, &mut b2, false),
    };
    let relu_signature = trace.relu_signature();
    Ok(StepResult {
        loss: total / n as f64,
        block1: b1,
        block2: b2,
        trace,
        relu_signature,
    })
}

/// Mean per-sample loss only, eval mode throughout.
pub fn eval_loss<T: Scalar>(params: &WNetParams<T>, batch: &Batch<T>, stage: Stage, loss: &LossConfig) -> Result<f64> {
    let n = batch.len();
    let v = params.config.voxels();
    let (initial, _) = params.forward_block1(&batch.image, Mode::Eval)?;
    let mut total = 0.0;
    match stage {
        Stage::One => {
            for i in 0..n {
                let (l, _) = iou_loss(&initial.values[i * v..(i + 1) * v], &batch.target[i * v..(i + 1) * v])?;
                total += l.to_f64().unwrap();
            }
        }
        Stage::Two => {
            let m = batch.weight_tensor()?;
            let (out, _) = params.forward_block2(&batch.image, &initial, &m, Mode::Eval)?;
            for i in 0..n {
                let lv = combined_loss(
                    &out.values[i * v..(i + 1) * v],
                    &batch.target[i * v..(i + 1) * v],
                    &batch.weightmap[i * v..(i + 1) * v],
                    loss,
                )?;
                total += lv.total.to_f64().unwrap();
            }
        }
    }
    Ok(total / n as f64)
}

/// Train-mode forward only: the stage loss and the ReLU pattern hash.
pub fn train_loss<T: Scalar>(
    params: &WNetParams<T>,
    batch: &Batch<T>,
    stage: Stage,
    loss: &LossConfig,
) -> Result<(f64, u64)> {
    let n = batch.len();
    let v = params.config.voxels();
    let (out, trace) = match stage {
        Stage::One => params.forward_block1(&batch.image, Mode::Train)?,
        Stage::Two => {
            let (initial, _) = params.forward_block1(&batch.image, Mode::Eval)?;
            let m = batch.weight_tensor()?;
            params.forward_block2(&batch.image, &initial, &m, Mode::Train)?
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        let pred = &out.values[i * v..(i + 1) * v];
        let tgt = &batch.target[i * v..(i + 1) * v];
        total += match stage {
            Stage::One => iou_loss(pred, tgt)?.0.to_f64().unwrap(),
            Stage::Two => combined_loss(pred, tgt, &batch.weightmap[i * v..(i + 1) * v], loss)?
                .total
                .to_f64()
                .unwrap(),
        };
    }
    Ok((total / n as f64, trace.relu_signature()))
}
