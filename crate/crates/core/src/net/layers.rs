//! Layer primitives. Each forward has a matching `*_backward` that takes the
//! upstream gradient and returns the gradient w.r.t. the layer input.

use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Layout, Scalar};
use super::tensor::Tensor5;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
const TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// 3x3x3 convolution weights, kernel laid out `[out][in][kz][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            stride,
            kernel: vec![T::zero(); cout * cin * TAPS],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * TAPS
    }

    fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        s.map(|d| (d + 2 - 3) / self.stride + 1)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Column buffer budget in elements; output rows are processed in tiles
/// whose unfolded patches fit in cache.
const TILE_ELEMS: usize = 1 << 17;

/// Geometry of one conv application.
#[derive(Clone, Copy)]
struct Plan {
    cin: usize,
    s: [usize; 3],
    o: [usize; 3],
    stride: usize,
}

impl Plan {
    fn k(&self) -> usize {
        self.cin * TAPS
    }

    fn vo(&self) -> usize {
        self.o[0] * self.o[1] * self.o[2]
    }

    /// Output rows (`oz, oy` pairs) per tile.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.k() * self.o[2])).clamp(1, self.o[0] * self.o[1])
    }

    /// Unfold output rows `r0..r1` of one sample into `col`
    /// (`k` rows of `(r1 - r0) * ow` columns).
    fn im2col<T: Scalar>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        let [d, h, w] = self.s;
        let [_, oh, ow] = self.o;
        let n = (r1 - r0) * ow;
        for ci in 0..self.cin {
            let plane = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for t in 0..TAPS {
                let (kz, ky, kx) = (t / 9, t / 3 % 3, t % 3);
                let row = &mut col[(ci * TAPS + t) * n..][..n];
                for r in r0..r1 {
                    let (oz, oy) = (r / oh, r % oh);
                    let iz = (oz * self.stride + kz) as isize - 1;
                    let iy = (oy * self.stride + ky) as isize - 1;
                    let dst = &mut row[(r - r0) * ow..][..ow];
                    if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iz as usize * h + iy as usize) * w..][..w];
                    if self.stride == 1 {
                        // interior is a shifted copy
                        match kx {
                            0 => {
                                dst[0] = T::zero();
                                dst[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..]);
                                dst[w - 1] = T::zero();
                            }
                        }
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add `col` into `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let [d, h, w] = self.s;
        let [_, oh, ow] = self.o;
        let n = (r1 - r0) * ow;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
            for t in 0..TAPS {
                let (kz, ky, kx) = (t / 9, t / 3 % 3, t % 3);
                let row = &col[(ci * TAPS + t) * n..][..n];
                for r in r0..r1 {
                    let (oz, oy) = (r / oh, r % oh);
                    let iz = (oz * self.stride + kz) as isize - 1;
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[(r - r0) * ow..][..ow];
                    let dst = &mut plane[(iz as usize * h + iy as usize) * w..][..w];
                    if self.stride == 1 {
                        let (s, dd) = match kx {
                            0 => (&src[1..], &mut dst[..w - 1]),
                            1 => (src, &mut dst[..]),
                            _ => (&src[..w - 1], &mut dst[1..]),
                        };
                        for (a, &g) in dd.iter_mut().zip(s) {
                            *a += g;
                        }
                    } else {
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(x: &Tensor5<T>, p: &Conv<T>) -> Result<Plan> {
    if x.channels() != p.cin {
        return Err(shape_err(format!("conv expects {} channels, got {}", p.cin, x.channels())));
    }
    if !(p.stride == 1 || p.stride == 2) {
        return Err(Error::InvalidArgument(format!("stride {}", p.stride)));
    }
    if p.kernel.len() != p.cout * p.cin * TAPS || p.bias.len() != p.cout {
        return Err(shape_err("conv parameter lengths".into()));
    }
    let s = x.spatial();
    Ok(Plan {
        cin: p.cin,
        s,
        o: p.out_spatial(s),
        stride: p.stride,
    })
}

/// Same-padding 3x3x3 convolution; stride 2 halves each spatial dim.
pub fn conv3<T: Scalar>(x: &Tensor5<T>, p: &Conv<T>) -> Result<Tensor5<T>> {
    let plan = check_conv(x, p)?;
    let (o, vo, k) = (plan.o, plan.vo(), plan.k());
    let mut out = Tensor5::zeros([x.batch(), p.cout, o[0], o[1], o[2]]);
    let rows = o[0] * o[1];
    let tile = plan.tile_rows();
    let mut col = vec![T::zero(); k * tile * o[2]];
    for n in 0..x.batch() {
        let xs = x.sample(n);
        let dst = &mut out.values[n * p.cout * vo..(n + 1) * p.cout * vo];
        for (c, chunk) in dst.chunks_mut(vo).enumerate() {
            chunk.fill(p.bias[c]);
        }
        for r0 in (0..rows).step_by(tile) {
            let r1 = (r0 + tile).min(rows);
            let nc = (r1 - r0) * o[2];
            plan.im2col(xs, r0, r1, &mut col);
            gemm(
                p.cout,
                k,
                nc,
                T::one(),
                &p.kernel,
                Layout::row_major(k),
                &col[..k * nc],
                Layout::row_major(nc),
                T::one(),
                &mut dst[r0 * o[2]..],
                Layout { rs: vo, cs: 1 },
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrad<T> {
    pub fn zeros_like(p: &Conv<T>) -> Self {
        Self {
            kernel: vec![T::zero(); p.kernel.len()],
            bias: vec![T::zero(); p.bias.len()],
        }
    }
}

/// Accumulates kernel/bias gradients into `g`; returns the input gradient
/// when `want_dx` is set.
pub fn conv3_backward<T: Scalar>(
    x: &Tensor5<T>,
    p: &Conv<T>,
    dout: &[T],
    g: &mut ConvGrad<T>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let plan = check_conv(x, p).expect("shapes checked in forward");
    let (o, vo, k) = (plan.o, plan.vo(), plan.k());
    assert_eq!(dout.len(), x.batch() * p.cout * vo, "conv backward: upstream length");
    let rows = o[0] * o[1];
    let tile = plan.tile_rows();
    let mut col = vec![T::zero(); k * tile * o[2]];
    let mut dcol = if want_dx { vec![T::zero(); k * tile * o[2]] } else { Vec::new() };
    let mut dx = if want_dx { vec![T::zero(); x.values.len()] } else { Vec::new() };
    let in_len = x.sample(0).len();
    for n in 0..x.batch() {
        let dy = &dout[n * p.cout * vo..(n + 1) * p.cout * vo];
        for (c, chunk) in dy.chunks(vo).enumerate() {
            g.bias[c] += chunk.iter().copied().sum::<T>();
        }
        let xs = x.sample(n);
        for r0 in (0..rows).step_by(tile) {
            let r1 = (r0 + tile).min(rows);
            let nc = (r1 - r0) * o[2];
            let dyt = &dy[r0 * o[2]..];
            let dyl = Layout { rs: vo, cs: 1 };
            plan.im2col(xs, r0, r1, &mut col);
            gemm(p.cout, nc, k, T::one(), dyt, dyl, &col[..k * nc], Layout::transposed(nc), T::one(), &mut g.kernel, Layout::row_major(k));
            if want_dx {
                gemm(k, p.cout, nc, T::one(), &p.kernel, Layout::transposed(k), dyt, dyl, T::zero(), &mut dcol[..k * nc], Layout::row_major(nc));
                plan.col2im(&dcol[..k * nc], r0, r1, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    want_dx.then_some(dx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blend one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + one_m * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * stats.var_unbiased[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Hash of the ReLU on/off pattern.
    pub relu_signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrad<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BnGrad<T> {
    pub fn zeros_like(p: &BatchNorm<T>) -> Self {
        Self {
            gamma: vec![T::zero(); p.channels()],
            beta: vec![T::zero(); p.channels()],
        }
    }
}

fn fnv(h: u64, bit: bool) -> u64 {
    (h ^ bit as u64).wrapping_mul(0x100_0000_01b3)
}

/// Batch normalization followed by ReLU. In train mode the batch statistics
/// are returned for the caller to fold into the running estimates.
pub fn batchnorm_relu<T: Scalar>(
    x: &Tensor5<T>,
    p: &BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor5<T>, BnCache<T>, Option<BatchStats<T>>)> {
    let (nb, nc, v) = (x.batch(), x.channels(), x.voxels());
    if nb == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    if nc != p.channels() {
        return Err(shape_err(format!("batch norm expects {} channels, got {nc}", p.channels())));
    }
    let eps = T::of(BN_EPS);
    let mut stats = None;
    let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let m = (nb * v) as f64;
            let mut mean = vec![T::zero(); nc];
            let mut var = vec![T::zero(); nc];
            let mut var_u = vec![T::zero(); nc];
            for c in 0..nc {
                let mut s = 0.0f64;
                for n in 0..nb {
                    s += x.channel(n, c).iter().map(|a| a.to_f64().unwrap()).sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0f64;
                for n in 0..nb {
                    ss += x
                        .channel(n, c)
                        .iter()
                        .map(|a| (a.to_f64().unwrap() - mu).powi(2))
                        .sum::<f64>();
                }
                mean[c] = T::of(mu);
                var[c] = T::of(ss / m);
                var_u[c] = T::of(if m > 1.0 { ss / (m - 1.0) } else { ss / m });
            }
            let inv = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
            stats = Some(BatchStats { mean: mean.clone(), var_unbiased: var_u });
            (mean, inv)
        }
        Mode::Eval => (
            p.running_mean.clone(),
            p.running_var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect(),
        ),
    };
    let mut xhat = vec![T::zero(); x.values.len()];
    let mut out = Tensor5::zeros(x.shape);
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    for n in 0..nb {
        for c in 0..nc {
            let base = (n * nc + c) * v;
            let (mu, is, ga, be) = (mean[c], inv_std[c], p.gamma[c], p.beta[c]);
            for i in base..base + v {
                let h = (x.values[i] - mu) * is;
                xhat[i] = h;
                let y = ga * h + be;
                let on = y > T::zero();
                out.values[i] = if on { y } else { T::zero() };
                sig = fnv(sig, on);
            }
        }
    }
    Ok((
        out,
        BnCache {
            mode,
            xhat,
            inv_std,
            relu_signature: sig,
        },
        stats,
    ))
}

pub fn batchnorm_relu_backward<T: Scalar>(
    shape: [usize; 5],
    p: &BatchNorm<T>,
    cache: &BnCache<T>,
    dout: &[T],
    g: &mut BnGrad<T>,
) -> Vec<T> {
    let (nb, nc) = (shape[0], shape[1]);
    let v = shape[2] * shape[3] * shape[4];
    let m = T::of((nb * v) as f64);
    let mut dx = vec![T::zero(); dout.len()];
    for c in 0..nc {
        let (ga, be) = (p.gamma[c], p.beta[c]);
        // dy masked by ReLU, then reduced per channel
        let mut sum_dh = T::zero();
        let mut sum_dh_xh = T::zero();
        for n in 0..nb {
            let base = (n * nc + c) * v;
            for i in base..base + v {
                let h = cache.xhat[i];
                let dy = if ga * h + be > T::zero() { dout[i] } else { T::zero() };
                g.gamma[c] += dy * h;
                g.beta[c] += dy;
                let dh = dy * ga;
                dx[i] = dh;
                sum_dh += dh;
                sum_dh_xh += dh * h;
            }
        }
        let is = cache.inv_std[c];
        for n in 0..nb {
            let base = (n * nc + c) * v;
            for i in base..base + v {
                dx[i] = match cache.mode {
                    Mode::Train => is / m * (m * dx[i] - sum_dh - cache.xhat[i] * sum_dh_xh),
                    Mode::Eval => dx[i] * is,
                };
            }
        }
    }
    dx
}

/// Replicate every voxel into a 2x2x2 block.
pub fn upsample_nn<T: Scalar>(x: &Tensor5<T>) -> Tensor5<T> {
    let [d, h, w] = x.spatial();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor5::zeros([x.batch(), x.channels(), 2 * d, oh, ow]);
    for (src, dst) in x.values.chunks(d * h * w).zip(out.values.chunks_mut(8 * d * h * w)) {
        for z in 0..2 * d {
            for y in 0..oh {
                let srow = &src[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * oh + y) * ow..][..ow];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
    }
    out
}

/// Sum each 2x2x2 block of `dout` back onto its source voxel.
pub fn upsample_nn_backward<T: Scalar>(in_shape: [usize; 5], dout: &[T]) -> Vec<T> {
    let [_, _, d, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (dst, src) in dx.chunks_mut(d * h * w).zip(dout.chunks(8 * d * h * w)) {
        for z in 0..2 * d {
            for y in 0..oh {
                let srow = &src[(z * oh + y) * ow..][..ow];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                for (xo, &g) in srow.iter().enumerate() {
                    drow[xo / 2] += g;
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(shape_err(format!("concat {:?} with {:?}", a.shape, b.shape)));
    }
    let (ca, cb, v) = (a.channels(), b.channels(), a.voxels());
    let mut values = Vec::with_capacity(a.values.len() + b.values.len());
    for n in 0..a.batch() {
        values.extend_from_slice(&a.values[n * ca * v..(n + 1) * ca * v]);
        values.extend_from_slice(&b.values[n * cb * v..(n + 1) * cb * v]);
    }
    let [nb, _, d, h, w] = a.shape;
    Tensor5::new([nb, ca + cb, d, h, w], values)
}

/// Split an upstream gradient of a concatenation into its two parts.
pub fn concat_channels_backward<T: Scalar>(shape: [usize; 5], ca: usize, dout: &[T]) -> (Vec<T>, Vec<T>) {
    let [nb, c, d, h, w] = shape;
    let v = d * h * w;
    let cb = c - ca;
    let mut da = Vec::with_capacity(nb * ca * v);
    let mut db = Vec::with_capacity(nb * cb * v);
    for n in 0..nb {
        let s = &dout[n * c * v..(n + 1) * c * v];
        da.extend_from_slice(&s[..ca * v]);
        db.extend_from_slice(&s[ca * v..]);
    }
    (da, db)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Single-output convolution followed by a sigmoid.
pub fn sigmoid_head<T: Scalar>(x: &Tensor5<T>, p: &Conv<T>) -> Result<Tensor5<T>> {
    if p.cout != 1 {
        return Err(shape_err(format!("sigmoid head has {} outputs", p.cout)));
    }
    let mut out = conv3(x, p)?;
    out.values.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(out)
}

pub fn sigmoid_head_backward<T: Scalar>(
    x: &Tensor5<T>,
    p: &Conv<T>,
    out: &[T],
    dout: &[T],
    g: &mut ConvGrad<T>,
) -> Vec<T> {
    let dz: Vec<T> = out
        .iter()
        .zip(dout)
        .map(|(&s, &d)| d * s * (T::one() - s))
        .collect();
    conv3_backward(x, p, &dz, g, true).expect("input gradient requested")
}
