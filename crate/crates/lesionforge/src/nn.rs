//! Layer primitives: forward kernels and their hand-derived backward passes.
//!
//! Conventions fixed here and relied on everywhere else:
//! - "convolution" is cross-correlation (no kernel flip);
//! - ReLU's subgradient at exactly 0 is 0;
//! - max-pool ties break to the first index in row-major scan order;
//! - batch-norm uses the biased (population) variance for normalization and
//!   for the running-average update, so eval mode with running stats equal to
//!   a batch's stats reproduces that batch's train-mode output.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Output length of a conv/pool axis: floor((len + 2*pad - k) / stride) + 1.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Small dense matmul helpers (row-major)
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
fn matmul_acc<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == E::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (contraction over the shared k axis)
fn matmul_abt_acc<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn matmul_atb_acc<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == E::ZERO {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn check_conv_shapes<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("conv2d input")?;
    let (f, kc, kh, kw) = kernel.dims4("conv2d kernel")?;
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d kernel channel axis is {kc} but input channel axis is {c}"
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Dimension(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} does not match filter axis {f}",
                b.shape()
            )));
        }
    }
    let ho = conv_out_len(h, kh, stride, padding);
    let wo = conv_out_len(w, kw, stride, padding);
    Ok((n, c, h, w, f, kh, kw, ho, wo))
}

/// Expand one sample into a [C*kh*kw, ho*wo] patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    sample: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), c * kh * kw * ho * wo);
    for v in col.iter_mut() {
        *v = E::ZERO;
    }
    let area = ho * wo;
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * area;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * wo + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of `im2col` back onto one sample's gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    sample_grad: &mut [E],
) {
    let area = ho * wo;
    for ch in 0..c {
        let plane = &mut sample_grad[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * area;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` [N,C,H,W] with `kernel` [F,C,kh,kw].
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    input.ensure_finite("conv2d input")?;
    let (n, c, h, w, f, kh, kw, ho, wo) = check_conv_shapes(input, kernel, bias, stride, padding)?;
    let ckk = c * kh * kw;
    let area = ho * wo;
    let mut out = vec![E::ZERO; n * f * area];
    let mut col = vec![E::ZERO; ckk * area];
    for b_idx in 0..n {
        let sample = &input.data()[b_idx * c * h * w..(b_idx + 1) * c * h * w];
        im2col(sample, c, h, w, kh, kw, stride, padding, ho, wo, &mut col);
        matmul_acc(
            kernel.data(),
            f,
            ckk,
            &col,
            area,
            &mut out[b_idx * f * area..(b_idx + 1) * f * area],
        );
    }
    if let Some(b) = bias {
        for b_idx in 0..n {
            for fi in 0..f {
                let bv = b.data()[fi];
                let base = (b_idx * f + fi) * area;
                for p in 0..area {
                    out[base + p] += bv;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, f, ho, wo], out)
}

pub struct ConvGrads<E: Element> {
    pub input: Tensor<E>,
    pub kernel: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

/// Gradients of conv2d w.r.t. input, kernel, and bias given dLoss/dOutput.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    dout: &Tensor<E>,
) -> Result<ConvGrads<E>> {
    let (n, c, h, w, f, kh, kw, ho, wo) = check_conv_shapes(input, kernel, None, stride, padding)?;
    if dout.shape() != [n, f, ho, wo] {
        return Err(Error::Dimension(format!(
            "conv2d upstream gradient shape {:?} expected {:?}",
            dout.shape(),
            [n, f, ho, wo]
        )));
    }
    let ckk = c * kh * kw;
    let area = ho * wo;
    let mut dinput = vec![E::ZERO; n * c * h * w];
    let mut dkernel = vec![E::ZERO; f * ckk];
    let mut col = vec![E::ZERO; ckk * area];
    let mut dcol = vec![E::ZERO; ckk * area];
    for b_idx in 0..n {
        let sample = &input.data()[b_idx * c * h * w..(b_idx + 1) * c * h * w];
        let dout_n = &dout.data()[b_idx * f * area..(b_idx + 1) * f * area];
        im2col(sample, c, h, w, kh, kw, stride, padding, ho, wo, &mut col);
        // dW[f, ckk] += dout_n[f, area] * col[ckk, area]^T
        matmul_abt_acc(dout_n, f, area, &col, ckk, &mut dkernel);
        // dcol[ckk, area] = W[f, ckk]^T * dout_n[f, area]
        for v in dcol.iter_mut() {
            *v = E::ZERO;
        }
        matmul_atb_acc(kernel.data(), f, ckk, dout_n, area, &mut dcol);
        col2im_acc(
            &dcol,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
            &mut dinput[b_idx * c * h * w..(b_idx + 1) * c * h * w],
        );
    }
    let dbias = if has_bias {
        let mut db = vec![E::ZERO; f];
        for b_idx in 0..n {
            for fi in 0..f {
                let base = (b_idx * f + fi) * area;
                for p in 0..area {
                    db[fi] += dout.data()[base + p];
                }
            }
        }
        Some(Tensor::from_vec(vec![f], db)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: Tensor::from_vec(vec![n, c, h, w], dinput)?,
        kernel: Tensor::from_vec(vec![f, c, kh, kw], dkernel)?,
        bias: dbias,
    })
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// x[N,D] * w[K,D]^T + b[K] -> [N,K]
pub fn dense_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, d) = x.dims2("dense input")?;
    let (k, dw) = w.dims2("dense weight")?;
    if dw != d {
        return Err(Error::Dimension(format!(
            "dense weight expects {dw} input features, input has {d}"
        )));
    }
    if b.shape() != [k] {
        return Err(Error::Dimension(format!(
            "dense bias shape {:?} expected [{k}]",
            b.shape()
        )));
    }
    let mut out = vec![E::ZERO; n * k];
    matmul_abt_acc(x.data(), n, d, w.data(), k, &mut out);
    for row in 0..n {
        for col in 0..k {
            out[row * k + col] += b.data()[col];
        }
    }
    Tensor::from_vec(vec![n, k], out)
}

pub struct DenseGrads<E: Element> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn dense_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dout: &Tensor<E>,
) -> Result<DenseGrads<E>> {
    let (n, d) = x.dims2("dense input")?;
    let (k, _) = w.dims2("dense weight")?;
    if dout.shape() != [n, k] {
        return Err(Error::Dimension(format!(
            "dense upstream gradient shape {:?} expected {:?}",
            dout.shape(),
            [n, k]
        )));
    }
    let mut dx = vec![E::ZERO; n * d];
    matmul_acc(dout.data(), n, k, w.data(), d, &mut dx);
    let mut dw = vec![E::ZERO; k * d];
    matmul_atb_acc(dout.data(), n, k, x.data(), d, &mut dw);
    let mut db = vec![E::ZERO; k];
    for row in 0..n {
        for col in 0..k {
            db[col] += dout.data()[row * k + col];
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(vec![n, d], dx)?,
        weight: Tensor::from_vec(vec![k, d], dw)?,
        bias: Tensor::from_vec(vec![k], db)?,
    })
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::ZERO { v } else { E::ZERO })
}

/// Gradient is 1 where x > 0 and 0 elsewhere, including at exactly 0.
pub fn relu_backward<E: Element>(x: &Tensor<E>, dout: &Tensor<E>) -> Result<Tensor<E>> {
    x.zip_map(dout, |xv, dv| if xv > E::ZERO { dv } else { E::ZERO })
}

pub fn sigmoid_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| {
        if v >= E::ZERO {
            E::ONE / (E::ONE + (-v).exp())
        } else {
            let e = v.exp();
            e / (E::ONE + e)
        }
    })
}

/// Takes the forward *output* y; gradient is y * (1 - y) * dout.
pub fn sigmoid_backward<E: Element>(y: &Tensor<E>, dout: &Tensor<E>) -> Result<Tensor<E>> {
    y.zip_map(dout, |yv, dv| yv * (E::ONE - yv) * dv)
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

/// Learnable scale/shift plus running statistics for one BN layer.
#[derive(Debug, Clone)]
pub struct BnParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

impl<E: Element> BnParams<E> {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics captured by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats<E: Element> {
    pub mean: Vec<E>,
    /// Biased (population) variance.
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
}

fn bn_check<E: Element>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4("batchnorm input")?;
    let c = dims.1;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "batchnorm gamma/beta shapes {:?}/{:?} expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(dims)
}

/// Train-mode BN: normalize by batch statistics. Pure; running-stat updates
/// are the caller's job (see [`bn_update_running`]).
pub fn batchnorm_train_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<(Tensor<E>, BnBatchStats<E>)> {
    if eps <= E::ZERO {
        return Err(Error::Contract("batchnorm eps must be > 0".into()));
    }
    let (n, c, h, w) = bn_check(x, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batchnorm train mode needs at least 2 elements per channel, got {m}"
        )));
    }
    let mf = E::from_f64(m as f64);
    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                mean[ci] += x.data()[base + p];
            }
        }
    }
    for v in mean.iter_mut() {
        *v = *v / mf;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                let d = x.data()[base + p] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v = *v / mf;
    }
    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
    let mut out = vec![E::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for p in 0..h * w {
                out[base + p] = (x.data()[base + p] - mu) * is * g + b;
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, c, h, w], out)?,
        BnBatchStats { mean, var, inv_std },
    ))
}

/// Eval-mode BN: normalize by running statistics.
pub fn batchnorm_eval_forward<E: Element>(
    x: &Tensor<E>,
    params: &BnParams<E>,
    eps: E,
) -> Result<Tensor<E>> {
    if eps <= E::ZERO {
        return Err(Error::Contract("batchnorm eps must be > 0".into()));
    }
    let (n, c, h, w) = bn_check(x, &params.gamma, &params.beta)?;
    let mut out = vec![E::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mu = params.running_mean.data()[ci];
            let is = E::ONE / (params.running_var.data()[ci] + eps).sqrt();
            let g = params.gamma.data()[ci];
            let b = params.beta.data()[ci];
            for p in 0..h * w {
                out[base + p] = (x.data()[base + p] - mu) * is * g + b;
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], out)
}

/// running <- (1 - momentum) * running + momentum * batch
pub fn bn_update_running<E: Element>(
    params: &mut BnParams<E>,
    stats: &BnBatchStats<E>,
    momentum: E,
) {
    let keep = E::ONE - momentum;
    for (r, &b) in params
        .running_mean
        .data_mut()
        .iter_mut()
        .zip(stats.mean.iter())
    {
        *r = *r * keep + b * momentum;
    }
    for (r, &b) in params
        .running_var
        .data_mut()
        .iter_mut()
        .zip(stats.var.iter())
    {
        *r = *r * keep + b * momentum;
    }
}

/// Spec-shaped entry point: train mode normalizes by batch stats and updates
/// the running statistics in place; eval mode uses the running statistics.
pub fn batchnorm_forward<E: Element>(
    x: &Tensor<E>,
    params: &mut BnParams<E>,
    mode: BnMode,
    eps: E,
    momentum: E,
) -> Result<Tensor<E>> {
    match mode {
        BnMode::Train => {
            let (out, stats) = batchnorm_train_forward(x, &params.gamma, &params.beta, eps)?;
            bn_update_running(params, &stats, momentum);
            Ok(out)
        }
        BnMode::Eval => batchnorm_eval_forward(x, params, eps),
    }
}

pub struct BnGrads<E: Element> {
    pub input: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

/// Backward through train-mode BN (batch statistics are functions of x).
pub fn batchnorm_train_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &BnBatchStats<E>,
    dout: &Tensor<E>,
) -> Result<BnGrads<E>> {
    let (n, c, h, w) = x.dims4("batchnorm input")?;
    let m = E::from_f64((n * h * w) as f64);
    let mut sum_dy = vec![E::ZERO; c];
    let mut sum_dy_xhat = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                let dy = dout.data()[base + p];
                let xhat = (x.data()[base + p] - stats.mean[ci]) * stats.inv_std[ci];
                sum_dy[ci] += dy;
                sum_dy_xhat[ci] += dy * xhat;
            }
        }
    }
    let mut dx = vec![E::ZERO; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let g = gamma.data()[ci];
            let is = stats.inv_std[ci];
            for p in 0..h * w {
                let dy = dout.data()[base + p];
                let xhat = (x.data()[base + p] - stats.mean[ci]) * is;
                dx[base + p] =
                    g * is * (dy - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(vec![n, c, h, w], dx)?,
        gamma: Tensor::from_vec(vec![c], sum_dy_xhat)?,
        beta: Tensor::from_vec(vec![c], sum_dy)?,
    })
}

/// Backward through eval-mode BN (running stats are constants).
pub fn batchnorm_eval_backward<E: Element>(
    x: &Tensor<E>,
    params: &BnParams<E>,
    eps: E,
    dout: &Tensor<E>,
) -> Result<BnGrads<E>> {
    let (n, c, h, w) = x.dims4("batchnorm input")?;
    let mut dx = vec![E::ZERO; x.len()];
    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mu = params.running_mean.data()[ci];
            let is = E::ONE / (params.running_var.data()[ci] + eps).sqrt();
            let g = params.gamma.data()[ci];
            for p in 0..h * w {
                let dy = dout.data()[base + p];
                let xhat = (x.data()[base + p] - mu) * is;
                dx[base + p] = dy * g * is;
                dgamma[ci] += dy * xhat;
                dbeta[ci] += dy;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(vec![n, c, h, w], dx)?,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

/// Max pool with implicit -inf padding. Returns the output and, per output
/// element, the linear index of the winning input element (first occurrence
/// in row-major scan order on ties).
pub fn maxpool_forward<E: Element>(
    x: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<E>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool input")?;
    if k == 0 || stride == 0 {
        return Err(Error::Contract("maxpool size and stride must be positive".into()));
    }
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::Dimension(format!(
            "maxpool window {k} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = conv_out_len(h, k, stride, padding);
    let wo = conv_out_len(w, k, stride, padding);
    let mut out = vec![E::ZERO; n * c * ho * wo];
    let mut argmax = vec![usize::MAX; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<(E, usize)> = None;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = in_base + iy as usize * w + ix as usize;
                            let v = x.data()[idx];
                            match best {
                                Some((bv, _)) if v <= bv => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (v, idx) = best.ok_or_else(|| {
                        Error::Dimension("maxpool window covers no input pixels".into())
                    })?;
                    out[out_base + oy * wo + ox] = v;
                    argmax[out_base + oy * wo + ox] = idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, ho, wo], out)?, argmax))
}

/// Routes each upstream gradient to exactly one input position.
pub fn maxpool_backward<E: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    dout: &Tensor<E>,
) -> Result<Tensor<E>> {
    if argmax.len() != dout.len() {
        return Err(Error::Dimension(
            "maxpool argmax record does not match upstream gradient".into(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

/// [N,C,H,W] -> [N,C]: mean over the spatial axes.
pub fn global_avg_pool_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4("global average pool input")?;
    let inv = E::ONE / E::from_f64((h * w) as f64);
    let mut out = vec![E::ZERO; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut acc = E::ZERO;
            for p in 0..h * w {
                acc += x.data()[base + p];
            }
            out[ni * c + ci] = acc * inv;
        }
    }
    Tensor::from_vec(vec![n, c], out)
}

pub fn global_avg_pool_backward<E: Element>(
    input_shape: &[usize],
    dout: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    if dout.shape() != [n, c] {
        return Err(Error::Dimension(format!(
            "global average pool upstream gradient shape {:?} expected {:?}",
            dout.shape(),
            [n, c]
        )));
    }
    let inv = E::ONE / E::from_f64((h * w) as f64);
    let mut dx = vec![E::ZERO; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let g = dout.data()[ni * c + ci] * inv;
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                dx[base + p] = g;
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], dx)
}

pub fn upsample_nearest_forward<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor == 0 {
        return Err(Error::Contract("upsample factor must be positive".into()));
    }
    let (n, c, h, w) = x.dims4("upsample input")?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![E::ZERO; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    out[out_base + oy * wo + ox] =
                        x.data()[in_base + (oy / factor) * w + ox / factor];
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest_backward<E: Element>(
    input_shape: &[usize],
    factor: usize,
    dout: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (ho, wo) = (h * factor, w * factor);
    if dout.shape() != [n, c, ho, wo] {
        return Err(Error::Dimension(format!(
            "upsample upstream gradient shape {:?} expected {:?}",
            dout.shape(),
            [n, c, ho, wo]
        )));
    }
    let mut dx = vec![E::ZERO; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    dx[in_base + (oy / factor) * w + ox / factor] +=
                        dout.data()[out_base + oy * wo + ox];
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], dx)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction, [N,K] -> [N,K].
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k) = logits.dims2("softmax logits")?;
    let mut out = vec![E::ZERO; n * k];
    for row in 0..n {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut mx = r[0];
        for &v in r {
            mx = mx.max(v);
        }
        let mut denom = E::ZERO;
        for (j, &v) in r.iter().enumerate() {
            let e = (v - mx).exp();
            out[row * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            out[row * k + j] = out[row * k + j] / denom;
        }
    }
    Tensor::from_vec(vec![n, k], out)
}

/// Mean over the batch of -log softmax(logits)[label]. Returns the loss and
/// the softmax probabilities (needed by the backward pass).
pub fn softmax_cross_entropy_forward<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, Tensor<E>)> {
    let (n, k) = logits.dims2("cross-entropy logits")?;
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax_rows(logits)?;
    let mut loss = E::ZERO;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut mx = r[0];
        for &v in r {
            mx = mx.max(v);
        }
        let mut lse = E::ZERO;
        for &v in r {
            lse += (v - mx).exp();
        }
        let lse = mx + lse.ln();
        loss += lse - r[label];
    }
    Ok((loss / E::from_f64(n as f64), probs))
}

/// dLoss/dlogits = (softmax - onehot) / N, scaled by the upstream gradient.
pub fn softmax_cross_entropy_backward<E: Element>(
    probs: &Tensor<E>,
    labels: &[usize],
    upstream: E,
) -> Result<Tensor<E>> {
    let (n, k) = probs.dims2("cross-entropy probabilities")?;
    let scale = upstream / E::from_f64(n as f64);
    let mut d = probs.data().to_vec();
    for (row, &label) in labels.iter().enumerate() {
        d[row * k + label] -= E::ONE;
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    Tensor::from_vec(vec![n, k], d)
}

/// Reconstruction error over paired lists: 1/2 * sum_n ||y_n - x_n||^2.
pub fn recon_loss<E: Element>(outputs: &[Tensor<E>], inputs: &[Tensor<E>]) -> Result<E> {
    if outputs.is_empty() {
        return Err(Error::Contract("recon_loss over an empty list".into()));
    }
    if outputs.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "recon_loss got {} outputs but {} inputs",
            outputs.len(),
            inputs.len()
        )));
    }
    let mut acc = E::ZERO;
    for (y, x) in outputs.iter().zip(inputs) {
        acc += recon_sum_pair(y, x)?;
    }
    Ok(acc * E::from_f64(0.5))
}

/// sum((y - x)^2) for one pair, shape-checked. (Halving is the caller's job.)
pub fn recon_sum_pair<E: Element>(y: &Tensor<E>, x: &Tensor<E>) -> Result<E> {
    if y.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction shape {:?} does not match input shape {:?}",
            y.shape(),
            x.shape()
        )));
    }
    let mut acc = E::ZERO;
    for (&yv, &xv) in y.data().iter().zip(x.data()) {
        let d = yv - xv;
        acc += d * d;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_zero_input_propagates_zeros() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let k = t4([1, 1, 3, 3], vec![1.0, -2.0, 3.0, 0.5, 1.5, -0.5, 2.0, 0.25, -1.0]);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_shape_stem_example() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 224, 224]);
        let k = Tensor::<f32>::zeros(vec![64, 3, 7, 7]);
        let y = conv2d_forward(&x, &k, None, 2, 3).unwrap();
        assert_eq!(y.shape(), &[1, 64, 112, 112]);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        // [[1,2],[3,4]] correlated with an all-ones 2x2 kernel -> [[10]]
        let x = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = t4([1, 1, 2, 2], vec![1.0; 4]);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axes() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(vec![2, 4, 3, 3]);
        let err = conv2d_forward(&x, &k, None, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "message was: {msg}");
    }

    #[test]
    fn conv_rejects_nonfinite_input() {
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        x.data_mut()[4] = f64::NAN;
        let k = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        assert!(matches!(
            conv2d_forward(&x, &k, None, 1, 0),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn bn_train_standardizes_each_channel() {
        let mut rng = crate::rng::stream(11, "bn", 0);
        use rand::Rng;
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let x = t4([2, 3, 4, 4], data);
        let gamma = Tensor::ones(vec![3]);
        let beta = Tensor::zeros(vec![3]);
        let (y, _) = batchnorm_train_forward(&x, &gamma, &beta, 1e-5).unwrap();
        let m = 2 * 4 * 4;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..2 {
                let base = (n * 3 + c) * 16;
                for p in 0..16 {
                    mean += y.data()[base + p];
                }
            }
            mean /= m as f64;
            for n in 0..2 {
                let base = (n * 3 + c) * 16;
                for p in 0..16 {
                    var += (y.data()[base + p] - mean).powi(2);
                }
            }
            var /= m as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn bn_constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::filled(vec![2, 1, 2, 2], 3.7);
        let (y, _) =
            batchnorm_train_forward(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), 1e-5)
                .unwrap();
        // Mean accumulation rounds in the last ulp, so allow ~1e-9.
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9), "{:?}", y.data());
    }

    #[test]
    fn bn_eval_with_batch_stats_matches_train_output() {
        let mut rng = crate::rng::stream(12, "bn", 1);
        use rand::Rng;
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t4([2, 2, 3, 3], data);
        let mut params = BnParams::<f64>::new(2);
        params.gamma = Tensor::from_vec(vec![2], vec![1.3, 0.7]).unwrap();
        params.beta = Tensor::from_vec(vec![2], vec![-0.2, 0.4]).unwrap();
        let (train_out, stats) =
            batchnorm_train_forward(&x, &params.gamma, &params.beta, 1e-5).unwrap();
        params.running_mean = Tensor::from_vec(vec![2], stats.mean.clone()).unwrap();
        params.running_var = Tensor::from_vec(vec![2], stats.var.clone()).unwrap();
        let eval_out = batchnorm_eval_forward(&x, &params, 1e-5).unwrap();
        for (a, b) in train_out.data().iter().zip(eval_out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn bn_single_element_batch_is_degenerate() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        let r = batchnorm_train_forward(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-5);
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn bn_running_update_uses_momentum() {
        let mut params = BnParams::<f64>::new(1);
        let stats = BnBatchStats {
            mean: vec![2.0],
            var: vec![5.0],
            inv_std: vec![0.0],
        };
        bn_update_running(&mut params, &stats, 0.1);
        assert!((params.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((params.running_var.data()[0] - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn relu_convention_at_zero() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let d = relu_backward(&x, &Tensor::ones(vec![3])).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_first_occurrence_tie_and_routing() {
        // Two equal maxima in one window: gradient goes to the first in scan order.
        let x = t4([1, 1, 2, 2], vec![5.0, 5.0, 1.0, 0.0]);
        let (y, argmax) = maxpool_forward(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(argmax, vec![0]);
        let dx = maxpool_backward(&[1, 1, 2, 2], &argmax, &t4([1, 1, 1, 1], vec![3.0])).unwrap();
        assert_eq!(dx.data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_mass_is_preserved() {
        let mut rng = crate::rng::stream(5, "pool", 0);
        use rand::Rng;
        let x = t4(
            [2, 3, 6, 6],
            (0..2 * 3 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let (y, argmax) = maxpool_forward(&x, 3, 2, 1).unwrap();
        let dout = Tensor::<f64>::from_vec(
            y.shape().to_vec(),
            (0..y.len()).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let dx = maxpool_backward(&[2, 3, 6, 6], &argmax, &dout).unwrap();
        let sum_in: f64 = dx.data().iter().sum();
        let sum_out: f64 = dout.data().iter().sum();
        assert!((sum_in - sum_out).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let logits = Tensor::<f64>::from_vec(
            vec![2, 3],
            vec![1e4, -1e4, 0.0, 9999.0, 10000.0, 9998.5],
        )
        .unwrap();
        let p = softmax_rows(&logits).unwrap();
        for row in 0..2 {
            let s: f64 = p.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.data()[row * 3..(row + 1) * 3].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let logits = Tensor::<f64>::zeros(vec![4, 7]);
        let (loss, _) = softmax_cross_entropy_forward(&logits, &[0, 3, 5, 6]).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
        assert!((loss - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let mut logits = Tensor::<f64>::zeros(vec![1, 7]);
        logits.data_mut()[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy_forward(&logits, &[2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // logits (1,2,3), true class 2 -> ln(e^1+e^2+e^3) - 3 = 0.407606
        let logits = Tensor::<f64>::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, _) = softmax_cross_entropy_forward(&logits, &[2]).unwrap();
        assert!((loss - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::<f64>::zeros(vec![1, 3]);
        assert!(matches!(
            softmax_cross_entropy_forward(&logits, &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn recon_loss_fixtures() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        // identical lists -> 0
        assert_eq!(recon_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        // residual (1,1) -> 1.0
        let y = Tensor::<f64>::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        assert_eq!(recon_loss(&[y], &[a.clone()]).unwrap(), 1.0);
        // residuals (3,4) and (0,0) -> 12.5
        let x1 = Tensor::<f64>::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let y1 = Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let x2 = Tensor::<f64>::from_vec(vec![2], vec![5.0, 5.0]).unwrap();
        let y2 = x2.clone();
        assert_eq!(recon_loss(&[y1, y2], &[x1, x2]).unwrap(), 12.5);
    }

    #[test]
    fn recon_loss_contract_errors() {
        assert!(matches!(
            recon_loss::<f64>(&[], &[]),
            Err(Error::Contract(_))
        ));
        let a = Tensor::<f64>::zeros(vec![2]);
        let b = Tensor::<f64>::zeros(vec![3]);
        assert!(matches!(
            recon_loss(&[a], &[b]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn recon_loss_depends_only_on_elementwise_residuals() {
        // Same multiset of residuals under different shapes gives the same loss.
        let y1 = Tensor::<f64>::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x1 = Tensor::<f64>::from_vec(vec![4], vec![0.5, 1.0, 2.0, 2.0]).unwrap();
        let y2 = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x2 = Tensor::<f64>::from_vec(vec![2, 2], vec![0.5, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(
            recon_loss(&[y1], &[x1]).unwrap(),
            recon_loss(&[y2], &[x2]).unwrap()
        );
    }
}
