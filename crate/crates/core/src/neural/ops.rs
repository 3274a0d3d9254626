//! Layer kernels with hand-written backward passes.
//!
//! Convolutions go through im2col + GEMM, one sample at a time. Weight
//! gradients accumulate over the batch in sample order, so results are
//! bit-reproducible.

use crate::error::{shape_err, Error, Result};
use crate::neural::tensor::{gemm, Real, Tensor};

pub type Pair = (usize, usize);

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `floor((in + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub fn conv_out_len(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 {
        return None;
    }
    (input + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// `(in - 1) s - 2p + k`, or `None` when that is not at least 1.
pub fn deconv_out_len(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if input == 0 || s == 0 {
        return None;
    }
    ((input - 1) * s + k).checked_sub(2 * p).filter(|&v| v >= 1)
}

#[derive(Debug, Clone, Copy)]
struct Window {
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.ch * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate hit by output `o` through kernel tap `t`.
    #[inline]
    fn src(o: usize, t: usize, s: usize, p: usize, extent: usize) -> Option<usize> {
        (o * s + t).checked_sub(p).filter(|&v| v < extent)
    }

    /// Outputs `o < out` for which [`Window::src`] is in range, as
    /// `(lo, hi, first source index)`.
    #[inline]
    fn valid(t: usize, s: usize, p: usize, extent: usize, out: usize) -> (usize, usize, usize) {
        let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
        let hi = if extent + p > t {
            (extent + p - t).div_ceil(s).min(out)
        } else {
            0
        };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + t - p)
    }
}

/// Unfolds `x[ch, h, w]` into `cols[ch*kh*kw, oh*ow]`.
fn im2col<T: Real>(x: &[T], g: &Window, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi, first) = Window::valid(kj, g.sw, g.pw, g.w, g.ow);
                for oi in 0..g.oh {
                    let out = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    match Window::src(oi, ki, g.sh, g.ph, g.h) {
                        None => out.fill(T::zero()),
                        Some(ii) => {
                            let src = &x[(c * g.h + ii) * g.w..(c * g.h + ii + 1) * g.w];
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            for (v, &s) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.sw)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
fn col2im<T: Real>(cols: &[T], g: &Window, x: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi, first) = Window::valid(kj, g.sw, g.pw, g.w, g.ow);
                for oi in 0..g.oh {
                    let Some(ii) = Window::src(oi, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    let dst = &mut x[(c * g.h + ii) * g.w..(c * g.h + ii + 1) * g.w];
                    let row = &src[oi * g.ow + lo..oi * g.ow + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.sw).zip(row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(b: &Tensor<T>, n: usize) -> Result<()> {
    if b.shape() != [n] {
        return Err(shape_err(format!("bias shape {:?}, expected [{n}]", b.shape())));
    }
    Ok(())
}

fn kernel_dims<T: Real>(w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    w.dims4()
        .map_err(|_| shape_err(format!("kernel must be rank 4, got {:?}", w.shape())))
}

/// Geometry of a convolution whose (larger) input is `ch x h x w`.
fn conv_window(ch: usize, h: usize, w: usize, kh: usize, kw: usize, stride: Pair, pad: Pair) -> Result<Window> {
    let oh = conv_out_len(h, kh, stride.0, pad.0).filter(|&v| v >= 1);
    let ow = conv_out_len(w, kw, stride.1, pad.1).filter(|&v| v >= 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Window {
            ch,
            h,
            w,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh,
            ow,
        }),
        _ => Err(shape_err(format!(
            "kernel {kh}x{kw} stride {stride:?} pad {pad:?} does not fit input {h}x{w}"
        ))),
    }
}

/// Cross-correlation of `x[B, Cin, H, W]` with `w[Cout, Cin, kh, kw]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: Pair,
    pad: Pair,
) -> Result<Tensor<T>> {
    let (bs, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = kernel_dims(w)?;
    if wcin != cin {
        return Err(shape_err(format!("conv expects {wcin} input channels, got {cin}")));
    }
    check_bias(b, cout)?;
    let g = conv_window(cin, h, wd, kh, kw, stride, pad)?;
    let (rows, ncols) = (g.rows(), g.cols());
    let mut y = Tensor::zeros(&[bs, cout, g.oh, g.ow]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_len = cin * h * wd;
    let out_len = cout * ncols;
    for s in 0..bs {
        im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
        let out = &mut y.data_mut()[s * out_len..(s + 1) * out_len];
        for (co, chunk) in out.chunks_exact_mut(ncols).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm(
            false,
            false,
            cout,
            ncols,
            rows,
            T::one(),
            w.data(),
            &cols,
            T::one(),
            out,
        );
    }
    Ok(y)
}

pub struct ParamGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: Pair,
    pad: Pair,
) -> Result<ParamGrads<T>> {
    let (bs, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = kernel_dims(w)?;
    let g = conv_window(cin, h, wd, kh, kw, stride, pad)?;
    if dy.shape() != [bs, cout, g.oh, g.ow] {
        return Err(shape_err(format!("conv output gradient shape {:?}", dy.shape())));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_len = cin * h * wd;
    let out_len = cout * ncols;
    for s in 0..bs {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        for (co, chunk) in dys.chunks_exact(ncols).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum();
        }
        im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
        gemm(
            false,
            true,
            cout,
            rows,
            ncols,
            T::one(),
            dys,
            &cols,
            T::one(),
            dw.data_mut(),
        );
        gemm(
            true,
            false,
            rows,
            ncols,
            cout,
            T::one(),
            w.data(),
            dys,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, &g, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
    }
    Ok(ParamGrads { dx, dw, db })
}

/// Transposed convolution of `x[B, Cin, H, W]` with `w[Cin, Cout, kh, kw]`.
pub fn deconv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: Pair,
    pad: Pair,
) -> Result<Tensor<T>> {
    let (bs, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = kernel_dims(w)?;
    if wcin != cin {
        return Err(shape_err(format!("deconv expects {wcin} input channels, got {cin}")));
    }
    check_bias(b, cout)?;
    let (oh, ow) = match (
        deconv_out_len(h, kh, stride.0, pad.0),
        deconv_out_len(wd, kw, stride.1, pad.1),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(shape_err(format!(
                "deconv kernel {kh}x{kw} yields an empty output from {h}x{wd}"
            )))
        }
    };
    // The output is the input of the adjoint convolution.
    let g = conv_window(cout, oh, ow, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let (rows, ncols) = (g.rows(), g.cols());
    let mut y = Tensor::zeros(&[bs, cout, oh, ow]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_len = cin * ncols;
    let out_len = cout * oh * ow;
    for s in 0..bs {
        gemm(
            true,
            false,
            rows,
            ncols,
            cin,
            T::one(),
            w.data(),
            &x.data()[s * in_len..(s + 1) * in_len],
            T::zero(),
            &mut cols,
        );
        let out = &mut y.data_mut()[s * out_len..(s + 1) * out_len];
        for (co, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
            chunk.fill(b.data()[co]);
        }
        col2im(&cols, &g, out);
    }
    Ok(y)
}

pub fn deconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: Pair,
    pad: Pair,
) -> Result<ParamGrads<T>> {
    let (bs, cin, h, wd) = x.dims4()?;
    let (_, cout, kh, kw) = kernel_dims(w)?;
    let (_, _, oh, ow) = dy.dims4()?;
    let g = conv_window(cout, oh, ow, kh, kw, stride, pad)?;
    if (g.oh, g.ow) != (h, wd) || dy.shape() != [bs, cout, oh, ow] {
        return Err(shape_err(format!("deconv output gradient shape {:?}", dy.shape())));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![T::zero(); rows * ncols];
    let in_len = cin * ncols;
    let out_len = cout * oh * ow;
    for s in 0..bs {
        let dys = &dy.data()[s * out_len..(s + 1) * out_len];
        for (co, chunk) in dys.chunks_exact(oh * ow).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum();
        }
        im2col(dys, &g, &mut cols);
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        gemm(
            false,
            false,
            cin,
            ncols,
            rows,
            T::one(),
            w.data(),
            &cols,
            T::zero(),
            &mut dx.data_mut()[s * in_len..(s + 1) * in_len],
        );
        gemm(
            false,
            true,
            cin,
            rows,
            ncols,
            T::one(),
            xs,
            &cols,
            T::one(),
            dw.data_mut(),
        );
    }
    Ok(ParamGrads { dx, dw, db })
}

/// Saved state of a train-mode batch norm.
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct BnTrainOutput<T> {
    pub y: Tensor<T>,
    pub cache: BnCache<T>,
    pub batch_mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<T>,
}

fn bn_check<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (bs, c, h, w) = x.dims4()?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err(format!(
            "batch norm over {c} channels got gain {:?}",
            gain.shape()
        )));
    }
    Ok((bs, c, h * w))
}

/// Normalizes by the batch statistics of each channel.
pub fn batchnorm_train<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<BnTrainOutput<T>> {
    let (bs, c, plane) = bn_check(x, gain, bias)?;
    let count = bs * plane;
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch norm in train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let n = T::cast(count as f64);
    let eps = T::cast(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    let xd = x.data();
    let slices = |ch: usize| (0..bs).map(move |s| (s * c + ch) * plane..(s * c + ch + 1) * plane);
    for ch in 0..c {
        let mean = slices(ch).map(|r| xd[r].iter().copied().sum::<T>()).sum::<T>() / n;
        let var = slices(ch)
            .map(|r| xd[r].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / n;
        let is = T::one() / (var + eps).sqrt();
        let (g, b) = (gain.data()[ch], bias.data()[ch]);
        for r in slices(ch) {
            for i in r {
                let xh = (xd[i] - mean) * is;
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
        inv_std[ch] = is;
        batch_mean[ch] = mean;
        batch_var[ch] = var;
    }
    Ok(BnTrainOutput {
        y,
        cache: BnCache { xhat, inv_std },
        batch_mean,
        batch_var,
    })
}

/// Normalizes by running statistics.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bs, c, plane) = bn_check(x, gain, bias)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(shape_err("running statistics do not match channel count"));
    }
    let eps = T::cast(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let is = T::one() / (running_var.data()[ch] + eps).sqrt();
        let scale = gain.data()[ch] * is;
        let shift = bias.data()[ch] - running_mean.data()[ch] * scale;
        for s in 0..bs {
            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for (o, &v) in y.data_mut()[r.clone()].iter_mut().zip(&x.data()[r]) {
                *o = v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// `r <- (1 - momentum) r + momentum * batch`.
pub fn update_running<T: Real>(running: &mut Tensor<T>, batch: &[T], momentum: f64) {
    let m = T::cast(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

/// Batch norm in either mode, updating running statistics in train mode.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Eval => batchnorm_eval(x, gain, bias, running_mean, running_var),
        Mode::Train => {
            let out = batchnorm_train(x, gain, bias)?;
            update_running(running_mean, &out.batch_mean, BN_MOMENTUM);
            update_running(running_var, &out.batch_var, BN_MOMENTUM);
            Ok(out.y)
        }
    }
}

/// Returns `(dx, dgain, dbias)` through the batch statistics.
pub fn batchnorm_backward<T: Real>(
    dy: &Tensor<T>,
    gain: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (bs, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let n = T::cast((bs * plane) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[c]);
    let mut dbias = Tensor::zeros(&[c]);
    let dyd = dy.data();
    for ch in 0..c {
        let ranges: Vec<_> = (0..bs)
            .map(|s| (s * c + ch) * plane..(s * c + ch + 1) * plane)
            .collect();
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for r in &ranges {
            for i in r.clone() {
                sum_dy += dyd[i];
                sum_dy_xhat += dyd[i] * cache.xhat[i];
            }
        }
        dgain.data_mut()[ch] = sum_dy_xhat;
        dbias.data_mut()[ch] = sum_dy;
        let k = gain.data()[ch] * cache.inv_std[ch] / n;
        for r in &ranges {
            for i in r.clone() {
                dx.data_mut()[i] = k * (n * dyd[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgain, dbias))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
    LeakyRelu,
    None,
}

/// `tanh(softplus(x))` and `1 - tanh(softplus(x))` from a single `exp`:
/// with `n = e^x (e^x + 2)`, `tanh(ln(1 + e^x)) = n / (n + 2)`.
#[inline]
fn mish_parts<T: Real>(x: T) -> (T, T, T) {
    let two = T::cast(2.0);
    if x > T::cast(20.0) {
        return (T::one(), T::zero(), T::one());
    }
    let e = x.exp();
    let n = e * (e + two);
    (n / (n + two), two / (n + two), e / (T::one() + e))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn mish<T: Real>(x: T) -> T {
    x * mish_parts(x).0
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Mish => mish(x),
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    T::cast(LEAKY_SLOPE) * x
                }
            }
            Activation::None => x,
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Mish => {
                let (t, one_minus_t, sig) = mish_parts(x);
                t + x * one_minus_t * (T::one() + t) * sig
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::cast(LEAKY_SLOPE)
                }
            }
            Activation::None => T::one(),
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    pub fn backward<T: Real>(self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

pub fn sigmoid_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Gradient through a sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Per pixel, the softmax-weighted average of the `K` channel values.
/// Returns the `[B, 1, H, W]` output and the softmax weights.
pub fn channel_attention<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (bs, k, h, w) = x.dims4()?;
    if k == 0 {
        return Err(shape_err("attention needs at least one channel"));
    }
    let plane = h * w;
    let mut y = Tensor::zeros(&[bs, 1, h, w]);
    let mut weights = vec![T::zero(); x.len()];
    let xd = x.data();
    for s in 0..bs {
        let base = s * k * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..k).map(|c| xd[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (xd[at(c)] - max).exp();
                weights[at(c)] = e;
                z += e;
            }
            let mut acc = T::zero();
            for c in 0..k {
                weights[at(c)] = weights[at(c)] / z;
                acc += weights[at(c)] * xd[at(c)];
            }
            y.data_mut()[s * plane + p] = acc;
        }
    }
    Ok((y, weights))
}

/// `d out / d x_c = w_c (1 + x_c - out)`.
pub fn channel_attention_backward<T: Real>(
    x: &Tensor<T>,
    weights: &[T],
    y: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bs, k, h, w) = x.dims4()?;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    for s in 0..bs {
        for p in 0..plane {
            let out = y.data()[s * plane + p];
            let g = dy.data()[s * plane + p];
            for c in 0..k {
                let i = (s * k + c) * plane + p;
                dx.data_mut()[i] = g * weights[i] * (T::one() + x.data()[i] - out);
            }
        }
    }
    Ok(dx)
}

/// Mean absolute error and its subgradient `sign(pred - truth) / N`.
pub fn mae_loss<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != truth.shape() {
        return Err(shape_err(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.len() as f64;
    let inv = T::cast(1.0 / n);
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.abs().as_f64();
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((sum / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_pointwise_rule() {
        for (t, st, p, extent, out) in (0..6)
            .flat_map(|t| (1..4).flat_map(move |st| (0..4).flat_map(move |p| (1..7).map(move |e| (t, st, p, e, 9)))))
        {
            let hits: Vec<usize> = (0..out)
                .filter(|&o| Window::src(o, t, st, p, extent).is_some())
                .collect();
            let (lo, hi, first) = Window::valid(t, st, p, extent, out);
            assert_eq!(hits, (lo..hi).collect::<Vec<_>>(), "t={t} s={st} p={p} extent={extent}");
            if lo < hi {
                assert_eq!(Window::src(lo, t, st, p, extent), Some(first));
            }
        }
    }
    use crate::rng::RngState;

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_gaussian()).collect()).unwrap()
    }

    #[test]
    fn out_len_formulas() {
        assert_eq!(conv_out_len(40, 6, 2, 2), Some(20));
        assert_eq!(conv_out_len(2, 4, 1, 1), Some(1));
        assert_eq!(conv_out_len(2, 6, 1, 0), None);
        assert_eq!(deconv_out_len(1, 5, 1, 0), Some(5));
        assert_eq!(deconv_out_len(20, 4, 2, 1), Some(40));
        assert_eq!(deconv_out_len(12, 3, 1, 1), Some(12));
        assert_eq!(deconv_out_len(1, 1, 1, 1), None);
    }

    #[test]
    fn conv_output_geometry() {
        let x = Tensor::<f64>::zeros(&[1, 6, 40, 40]);
        let w = Tensor::zeros(&[2, 6, 6, 6]);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[2]), (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), [1, 2, 20, 20]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 5, 6, 6]), &Tensor::zeros(&[2]), (2, 2), (2, 2)).is_err());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = RngState::new(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[3]), (1, 1), (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deconv_output_geometry() {
        let y = deconv2d_forward(
            &Tensor::<f64>::zeros(&[1, 2, 1, 1]),
            &Tensor::zeros(&[2, 3, 5, 3]),
            &Tensor::zeros(&[3]),
            (1, 1),
            (0, 0),
        )
        .unwrap();
        assert_eq!(y.shape(), [1, 3, 5, 3]);
        let y = deconv2d_forward(
            &Tensor::<f64>::zeros(&[1, 2, 20, 12]),
            &Tensor::zeros(&[2, 3, 4, 3]),
            &Tensor::zeros(&[3]),
            (2, 1),
            (1, 1),
        )
        .unwrap();
        assert_eq!(y.shape(), [1, 3, 40, 12]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = RngState::new(3);
        let x = random(&[4, 3, 5, 5], &mut rng).map(|v| 5.0 * v + 1.5);
        let out = batchnorm_train(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| out.y.data()[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_bias() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.2);
        let out = batchnorm_train(&x, &Tensor::full(&[1], 1.7), &Tensor::full(&[1], 0.3)).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn batchnorm_eval_identity_and_singleton_error() {
        let mut rng = RngState::new(4);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let y = batchnorm_eval(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 1.0),
        )
        .unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
        let single = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(batchnorm_train(&single, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn batchnorm_forward_updates_running_stats() {
        let x = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut rm,
            &mut rv,
            Mode::Train,
        )
        .unwrap();
        assert!((rm.data()[0] - 0.4).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0f64), 0.0);
        assert!((mish(1.0f64) - 0.865_098_388_267_310_3).abs() < 1e-4);
        assert!((mish(30.0f64) - 30.0).abs() < 1e-9);
        assert!(mish(-50.0f64).abs() < 1e-15);
    }

    #[test]
    fn attention_values() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let (y, w) = channel_attention(&x).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!((y.data()[0] - 0.823_959_216_501_082_3).abs() < 1e-12);

        let eq = Tensor::full(&[1, 5, 2, 2], 0.7f64);
        assert!(channel_attention(&eq)
            .unwrap()
            .0
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(channel_attention(&Tensor::<f64>::zeros(&[1, 0, 2, 2])).is_err());
    }

    #[test]
    fn mae_values() {
        let p = Tensor::full(&[2, 1, 2, 2], 0.5f64);
        let t = Tensor::new(vec![2, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let (loss, g) = mae_loss(&p, &t).unwrap();
        assert_eq!(loss, 0.5);
        assert!(g.data().iter().all(|&v| v.abs() == 1.0 / 8.0));
        let (zero, gz) = mae_loss(&t, &t).unwrap();
        assert_eq!(zero, 0.0);
        assert!(gz.data().iter().all(|&v| v == 0.0));
        assert!(mae_loss(&p, &Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn random_binary_guess_mae_near_half() {
        let mut rng = RngState::new(8);
        let n = 200_000;
        let guess: Vec<f64> = (0..n).map(|_| (rng.next_u64() >> 63) as f64).collect();
        let truth: Vec<f64> = (0..n).map(|_| (rng.next_u64() >> 63) as f64).collect();
        let (loss, _) = mae_loss(
            &Tensor::new(vec![n], guess).unwrap(),
            &Tensor::new(vec![n], truth).unwrap(),
        )
        .unwrap();
        assert!((loss - 0.5).abs() < 0.01);
    }
}
