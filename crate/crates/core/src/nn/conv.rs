//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Output extent of a sliding window: `floor((input + 2*padding - window) / stride) + 1`.
pub fn window_output_extent(input: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || window == 0 || input + 2 * padding < window {
        return None;
    }
    Some((input + 2 * padding - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<(usize, ConvGeometry)> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be [C,H,W] or [N,C,H,W], got {input:?}"))),
        };
        let [c_out, wc, kh, kw] = *weights else {
            return Err(Error::Shape(format!("conv2d weights must be [C_out,C_in,kH,kW], got {weights:?}")));
        };
        if wc != c_in {
            return Err(Error::Shape(format!("input has {c_in} channels but weights expect {wc}")));
        }
        let oh = window_output_extent(h, kh, stride, pad);
        let ow = window_output_extent(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} (stride {stride}, padding {pad}) does not fit input {h}x{w}"
            )));
        };
        Ok((batch, ConvGeometry { c_in, h, w, c_out, kh, kw, stride, pad, oh, ow }))
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.positions()
    }

    /// Range of output positions `o` along one axis whose input coordinate
    /// `o*stride + k - pad` lands inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        // o*s + k - pad <= extent - 1  =>  o <= (extent - 1 + pad - k) / s
        let hi = if extent + self.pad > k { ((extent - 1 + self.pad - k) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfold one `[C,H,W]` sample into a `[C*kH*kW, oH*oW]` patch matrix.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (ox_lo, ox_hi) = self.valid_range(kj, self.w, self.ow);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if oy < oy_lo || oy >= oy_hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let iy = oy * self.stride + ki - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..ox_lo].fill(T::zero());
                        line[ox_hi..].fill(T::zero());
                        if ox_lo == ox_hi {
                            continue;
                        }
                        if self.stride == 1 {
                            let ix0 = ox_lo + kj - self.pad;
                            line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                line[ox] = src[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold a patch-matrix gradient back onto one `[C,H,W]` sample (accumulating).
    pub fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (oy_lo, oy_hi) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (ox_lo, ox_hi) = self.valid_range(kj, self.w, self.ow);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ki - self.pad;
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in ox_lo..ox_hi {
                            dst[ox * self.stride + kj - self.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

fn output_shape(batched: bool, batch: usize, g: &ConvGeometry) -> Vec<usize> {
    if batched {
        vec![batch, g.c_out, g.oh, g.ow]
    } else {
        vec![g.c_out, g.oh, g.ow]
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, c_out: usize) -> Result<()> {
    if bias.len() != c_out {
        return Err(Error::Shape(format!("bias has {} entries, expected {c_out}", bias.len())));
    }
    Ok(())
}

/// Convolution of one sample, writing `[C_out, oH*oW]` into `out`. `cols` is scratch.
pub(crate) fn conv_sample<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weights: &[T],
    bias: &[T],
    cols: &mut [T],
    out: &mut [T],
) {
    g.im2col(x, cols);
    let p = g.positions();
    gemm(false, false, g.c_out, p, g.patch_len(), T::one(), weights, cols, T::zero(), out);
    for (c, row) in out.chunks_exact_mut(p).enumerate() {
        let b = bias[c];
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Cross-correlates `input` (`[C,H,W]` or `[N,C,H,W]`) with `weights` and adds `bias`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (batch, g) = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    check_bias(bias, g.c_out)?;
    let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
    let mut out = vec![T::zero(); batch * g.out_len()];
    for (n, o) in out.chunks_exact_mut(g.out_len()).enumerate() {
        let x = &input.data()[n * g.in_len()..(n + 1) * g.in_len()];
        conv_sample(&g, x, weights.data(), bias.data(), &mut cols, o);
    }
    Tensor::new(output_shape(input.rank() == 4, batch, &g), out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a convolution given the upstream gradient and the forward operands.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let (batch, g) = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    if grad_out.len() != batch * g.out_len() {
        return Err(Error::Shape(format!(
            "grad_out {:?} does not match conv output {:?}",
            grad_out.shape(),
            output_shape(input.rank() == 4, batch, &g)
        )));
    }
    let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut gx = vec![T::zero(); input.len()];
    let mut gcols = vec![T::zero(); cols.len()];
    for n in 0..batch {
        let x = &input.data()[n * g.in_len()..(n + 1) * g.in_len()];
        g.im2col(x, &mut cols);
        let go = &grad_out.data()[n * g.out_len()..(n + 1) * g.out_len()];
        accumulate_param_grads(&g, go, &cols, &mut gw, &mut gb);
        input_grad(&g, go, weights.data(), &mut gcols, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    })
}

pub(crate) fn accumulate_param_grads<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    cols: &[T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let p = g.positions();
    gemm(false, true, g.c_out, g.patch_len(), p, T::one(), grad_out, cols, T::one(), gw);
    for (c, row) in grad_out.chunks_exact(p).enumerate() {
        gb[c] += row.iter().copied().sum();
    }
}

pub(crate) fn input_grad<T: Scalar>(g: &ConvGeometry, grad_out: &[T], weights: &[T], gcols: &mut [T], gx: &mut [T]) {
    gemm(true, false, g.patch_len(), g.positions(), g.c_out, T::one(), weights, grad_out, T::zero(), gcols);
    g.col2im(gcols, gx);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn all_ones_kernel_sums() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_forward(&x, &t(&[1, 1, 2, 2], &[1.0; 4]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn kernel_wider_than_input_with_padding() {
        let x = t(&[1, 1, 1], &[3.0]);
        let w: Vec<f64> = (0..25).map(f64::from).collect();
        let y = conv2d_forward(&x, &t(&[1, 1, 5, 5], &w), &t(&[1], &[0.5]), 1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[3.0 * 12.0 + 0.5]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(vec![2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros(vec![1]);
        assert!(matches!(conv2d_forward(&x, &w, &b, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 2]);
        let w = Tensor::<f32>::zeros(vec![1, 1, 5, 5]);
        let b = Tensor::<f32>::zeros(vec![1]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
        assert!(conv2d_forward(&x, &w, &b, 1, 2).is_ok());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::<f64>::from_fn(vec![2, 4, 4], |i| i as f64 * 0.1);
        let w = Tensor::<f64>::from_fn(vec![3, 2, 3, 3], |i| (i as f64).sin());
        let go = Tensor::<f64>::zeros(vec![3, 2, 2]);
        let g = conv2d_backward(&go, &x, &w, 1, 0).unwrap();
        assert!(g.input.data().iter().all(|v| *v == 0.0));
        assert!(g.weights.data().iter().all(|v| *v == 0.0));
        assert!(g.bias.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_kernel_passes_gradient_through() {
        let x = Tensor::<f64>::from_fn(vec![1, 3, 3], |i| i as f64);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let go = Tensor::<f64>::from_fn(vec![1, 3, 3], |i| 0.5 * i as f64 - 1.0);
        let g = conv2d_backward(&go, &x, &w, 1, 0).unwrap();
        assert_eq!(g.input.data(), go.data());
    }
}
