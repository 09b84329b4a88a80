//! Forward and backward kernels for the fixed layer set.
//!
//! All spatial tensors are row-major `H x W x C`; convolution kernels are
//! `kh x kw x C_in x C_out`. Pooling tie-breaks pick the first maximum in scan
//! order so that gradient routing is deterministic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding of `(k - 1) / 2` on every side, which keeps the spatial
    /// extent for odd kernels at stride 1.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Output extent of a sliding window along one axis, or `None` when the
/// window does not fit.
pub fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    f: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let (h, w, c) = input.dims3()?;
        let (kh, kw, kc, f) = match *kernels.shape() {
            [kh, kw, kc, f] => (kh, kw, kc, f),
            _ => return Err(dim_err!("kernels must be rank 4 (kh x kw x C x F), got {:?}", kernels.shape())),
        };
        if kc != c {
            return Err(dim_err!("channel axis: input has {c} channels, kernels expect {kc}"));
        }
        let pad_h = padding.amount(kh);
        let pad_w = padding.amount(kw);
        if pad_h != pad_w && padding == Padding::Same {
            return Err(dim_err!("same padding requires a square kernel, got {kh}x{kw}"));
        }
        let oh = window_extent(h, kh, stride, pad_h)
            .ok_or_else(|| dim_err!("height axis: kernel {kh} does not fit input height {h} (pad {pad_h})"))?;
        let ow = window_extent(w, kw, stride, pad_w)
            .ok_or_else(|| dim_err!("width axis: kernel {kw} does not fit input width {w} (pad {pad_w})"))?;
        Ok(Self {
            h,
            w,
            c,
            kh,
            kw,
            f,
            oh,
            ow,
            stride,
            pad: pad_h,
        })
    }

    /// Input coordinate for output `o` and kernel offset `k`, if inside the
    /// unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

/// 2-D cross-correlation with per-filter bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    if bias.len() != g.f {
        return Err(dim_err!("bias axis: expected {} entries, got {}", g.f, bias.len()));
    }
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let mut out = vec![T::zero(); g.oh * g.ow * g.f];
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let acc = &mut out[(oi * g.ow + oj) * g.f..][..g.f];
            acc.copy_from_slice(b);
            for ki in 0..g.kh {
                let Some(ii) = g.src(oi, ki, g.h) else { continue };
                for kj in 0..g.kw {
                    let Some(jj) = g.src(oj, kj, g.w) else { continue };
                    let xs = &x[(ii * g.w + jj) * g.c..][..g.c];
                    let kbase = (ki * g.kw + kj) * g.c * g.f;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let krow = &k[kbase + ci * g.f..][..g.f];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.f], out)
}

/// Gradients of [`conv2d`]: `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    if grad_out.shape() != [g.oh, g.ow, g.f] {
        return Err(dim_err!(
            "upstream gradient shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            [g.oh, g.ow, g.f]
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.f];
    for oi in 0..g.oh {
        for oj in 0..g.ow {
            let gslice = &go[(oi * g.ow + oj) * g.f..][..g.f];
            for (acc, &gv) in gb.iter_mut().zip(gslice) {
                *acc += gv;
            }
            for ki in 0..g.kh {
                let Some(ii) = g.src(oi, ki, g.h) else { continue };
                for kj in 0..g.kw {
                    let Some(jj) = g.src(oj, kj, g.w) else { continue };
                    let xbase = (ii * g.w + jj) * g.c;
                    let kbase = (ki * g.kw + kj) * g.c * g.f;
                    for ci in 0..g.c {
                        let xv = x[xbase + ci];
                        let krow = &k[kbase + ci * g.f..][..g.f];
                        let gkrow = &mut gk[kbase + ci * g.f..][..g.f];
                        let mut gxv = T::zero();
                        for fi in 0..g.f {
                            gkrow[fi] += xv * gslice[fi];
                            gxv += krow[fi] * gslice[fi];
                        }
                        gx[xbase + ci] += gxv;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(vec![g.f], gb)?,
    ))
}

/// Max pooling plus the flat input index of each window's maximum.
pub fn max_pool2d_with_indices<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("pooling window and stride must be positive".into()));
    }
    let (h, w, c) = input.dims3()?;
    let oh = window_extent(h, window, stride, 0)
        .ok_or_else(|| dim_err!("height axis: pool window {window} exceeds input height {h}"))?;
    let ow = window_extent(w, window, stride, 0)
        .ok_or_else(|| dim_err!("width axis: pool window {window} exceeds input width {w}"))?;
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oi in 0..oh {
        for oj in 0..ow {
            for ci in 0..c {
                let mut best_idx = ((oi * stride) * w + oj * stride) * c + ci;
                let mut best = x[best_idx];
                for di in 0..window {
                    for dj in 0..window {
                        let idx = ((oi * stride + di) * w + oj * stride + dj) * c + ci;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    max_pool2d_with_indices(input, window, stride).map(|(out, _)| out)
}

/// Scatters upstream gradient onto the recorded argmax positions.
pub fn scatter_argmax<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(dim_err!(
            "upstream gradient has {} entries, pooling produced {}",
            grad_out.len(),
            argmax.len()
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    Ok(gx)
}

/// Per-channel spatial maximum plus the flat input index of each maximum.
pub fn global_max_pool_with_indices<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = input.dims3()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(dim_err!("global max pool over empty tensor of shape {:?}", input.shape()));
    }
    let x = input.data();
    let mut argmax: Vec<usize> = (0..c).collect();
    for pos in 1..h * w {
        for (ci, best) in argmax.iter_mut().enumerate() {
            let idx = pos * c + ci;
            if x[idx] > x[*best] {
                *best = idx;
            }
        }
    }
    let out = argmax.iter().map(|&i| x[i]).collect();
    Ok((Tensor::from_vec(out), argmax))
}

pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    global_max_pool_with_indices(input).map(|(out, _)| out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

/// Upstream gradient masked by `input > 0`.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(dim_err!(
            "relu gradient shape {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout. Returns the output and, in training, the scaling mask
/// (`0` or `1 / (1 - rate)` per element) that the backward pass reuses.
pub fn dropout_with_mask<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = Tensor::new(input.shape().to_vec(), mask)?;
    let out = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::new(input.shape().to_vec(), out)?, Some(mask)))
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
    dropout_with_mask(input, rate, training, rng).map(|(out, _)| out)
}

pub fn dropout_backward<T: Scalar>(mask: Option<&Tensor<T>>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.shape() != grad_out.shape() {
                return Err(dim_err!(
                    "dropout gradient shape {:?} does not match mask {:?}",
                    grad_out.shape(),
                    mask.shape()
                ));
            }
            let data = mask.data().iter().zip(grad_out.data()).map(|(&m, &g)| m * g).collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_kernels_emit_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform(&[6, 5, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let out = conv2d(&x, &k, &bias, 1, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[6, 5, 3]);
        for px in out.data().chunks(3) {
            assert_eq!(px, bias.data());
        }
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::random_uniform(&[5, 4, 1], -1.0, 1.0, &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");

        let k = Tensor::zeros(&[3, 3, 2, 1]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 0, Padding::Valid).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let small = Tensor::<f64>::zeros(&[2, 4, 2]);
        let err = conv2d(&small, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("height axis"), "{err}");

        let err = conv2d(&x, &k, &Tensor::zeros(&[2]), 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn same_padding_keeps_extent() {
        let x = Tensor::<f64>::zeros(&[7, 7, 4]);
        let k = Tensor::zeros(&[3, 3, 4, 2]);
        let out = conv2d(&x, &k, &Tensor::zeros(&[2]), 1, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[7, 7, 2]);
    }

    #[test]
    fn max_pool_basic_and_ties() {
        let x = t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor::full(&[4, 4, 1], 2.5);
        let (out, idx) = max_pool2d_with_indices(&c, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        // first index in scan order wins
        assert_eq!(idx, vec![0, 2, 8, 10]);
        let g = scatter_argmax(c.shape(), &idx, &Tensor::full(&[2, 2, 1], 1.0)).unwrap();
        for win in [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]] {
            let hits = win.iter().filter(|&&i| g.data()[i] != 0.0).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn max_pool_window_too_large() {
        let x = Tensor::<f64>::zeros(&[2, 3, 1]);
        assert!(matches!(max_pool2d(&x, 3, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn global_max_pool_cases() {
        let x = t3(2, 2, 1, vec![1.0, 5.0, 2.0, 3.0]);
        assert_eq!(global_max_pool(&x).unwrap().data(), &[5.0]);
        let single = t3(1, 1, 3, vec![-1.0, 0.0, 7.0]);
        assert_eq!(global_max_pool(&single).unwrap().data(), &[-1.0, 0.0, 7.0]);
        let empty = Tensor::<f64>::new(vec![0, 2, 1], vec![]).unwrap();
        assert!(matches!(global_max_pool(&empty), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_grads() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(vec![-3.0, -0.1]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let g = relu_backward(&neg, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_uniform(&[10], 0.0, 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = Tensor::<f64>::full(&[10_000], 1.0);
        let (out, mask) = dropout_with_mask(&x, 0.5, true, &mut rng).unwrap();
        let mean = out.sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        let g = dropout_backward(mask.as_ref(), &Tensor::full(&[10_000], 1.0)).unwrap();
        assert_eq!(g, out);
    }
}
