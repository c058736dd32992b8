use crate::error::{Error, Result};
use crate::nn::conv::window_output_extent;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize, pad: usize) -> Result<(usize, PoolGeometry)> {
        let (batch, channels, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            [h, w] => (1, 1, h, w),
            _ => return Err(Error::Shape(format!("maxpool2d input must be rank 2-4, got {input:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(Error::Shape("pool window and stride must be >= 1".into()));
        }
        let (Some(oh), Some(ow)) =
            (window_output_extent(h, window, stride, pad), window_output_extent(w, window, stride, pad))
        else {
            return Err(Error::Shape(format!("pool window {window} larger than padded input {h}x{w} (padding {pad})")));
        };
        Ok((batch, PoolGeometry { channels, h, w, window, stride, pad, oh, ow }))
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Input index span `[lo, hi)` covered by output coordinate `o`, clipped to the input.
    #[inline]
    fn span(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as isize).max(0) as usize).min(extent);
        (lo, hi)
    }

    /// Pools one `[C,H,W]` sample. `argmax` receives indices relative to the sample.
    pub fn pool_sample<T: Scalar>(&self, x: &[T], out: &mut [T], argmax: &mut [usize]) {
        for c in 0..self.channels {
            let base = c * self.in_plane();
            for oy in 0..self.oh {
                let (y0, y1) = self.span(oy, self.h);
                for ox in 0..self.ow {
                    let (x0, x1) = self.span(ox, self.w);
                    let mut best_idx = usize::MAX;
                    let mut best = T::neg_infinity();
                    // Row-major scan with strict `>` keeps the lowest index on ties.
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = base + iy * self.w + ix;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = c * self.out_plane() + oy * self.ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
}

/// Max-pooling without padding. Returns the pooled tensor and, for every output
/// cell, the flat index of the winning element in `input`.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    maxpool2d_padded(input, window, stride, 0)
}

/// Max-pooling where windows overhanging the border only see in-bounds elements.
pub fn maxpool2d_padded<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (batch, g) = PoolGeometry::new(input.shape(), window, stride, padding)?;
    let in_len = g.channels * g.in_plane();
    let out_len = g.channels * g.out_plane();
    let mut out = vec![T::zero(); batch * out_len];
    let mut argmax = vec![0usize; batch * out_len];
    for n in 0..batch {
        g.pool_sample(
            &input.data()[n * in_len..(n + 1) * in_len],
            &mut out[n * out_len..(n + 1) * out_len],
            &mut argmax[n * out_len..(n + 1) * out_len],
        );
        argmax[n * out_len..(n + 1) * out_len].iter_mut().for_each(|i| *i += n * in_len);
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = g.oh;
    shape[r - 1] = g.ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "grad_out has {} cells but {} argmax indices were given",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let data = gx.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        let slot = data.get_mut(i).ok_or_else(|| Error::Shape(format!("argmax index {i} outside input")))?;
        *slot += *g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(data: &[f32], h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(vec![1, h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn max_of_window() {
        let (y, idx) = maxpool2d(&img(&[1.0, 2.0, 3.0, 4.0], 2, 2), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let x = img(&[5.0; 4], 2, 2);
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(idx, vec![0]);
        for _ in 0..5 {
            assert_eq!(maxpool2d(&x, 2, 2).unwrap().1, idx);
        }
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = img(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let (_, idx) = maxpool2d(&x, 2, 2).unwrap();
        let g = maxpool2d_backward(&Tensor::new(vec![1, 1, 1], vec![1.0f32]).unwrap(), &idx, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_input_floors() {
        let x = Tensor::<f32>::from_fn(vec![2, 1, 15, 15], |i| i as f32);
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 1, 7, 7]);
    }

    #[test]
    fn padded_windows_are_truncated() {
        // 3x3 input, window 2 stride 2 pad 1 -> 2x2 output, corners see one element.
        let x = img(&[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0, -9.0], 3, 3);
        let (y, idx) = maxpool2d_padded(&x, 2, 2, 1).unwrap();
        assert_eq!(y.data(), &[-1.0, -2.0, -4.0, -5.0]);
        assert_eq!(idx, vec![0, 1, 3, 4]);
    }

    #[test]
    fn window_too_large() {
        assert!(matches!(maxpool2d(&img(&[1.0; 4], 2, 2), 3, 1), Err(Error::Shape(_))));
        assert!(maxpool2d(&img(&[1.0; 4], 2, 2), 0, 1).is_err());
    }
}
