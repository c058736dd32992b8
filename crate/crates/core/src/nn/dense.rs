use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, Scalar, Tensor};

/// Batches at or below this size use row dot products instead of GEMM, which
/// would repack the whole weight matrix on every call.
const MATVEC_MAX_BATCH: usize = 4;

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [d_out, d_in] = *weights.shape() else {
        return Err(Error::Shape(format!("dense weights must be [d_out,d_in], got {:?}", weights.shape())));
    };
    let batch = if input.rank() == 1 { 1 } else { input.shape()[0] };
    if input.len() != batch * d_in {
        return Err(Error::Shape(format!(
            "dense layer expects {d_in} inputs per sample, got shape {:?}",
            input.shape()
        )));
    }
    Ok((batch, d_in, d_out))
}

pub(crate) fn dense_into<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, d_in: usize, d_out: usize, out: &mut [T]) {
    if batch <= MATVEC_MAX_BATCH {
        for n in 0..batch {
            let xi = &x[n * d_in..(n + 1) * d_in];
            for (o, (row, bias)) in out[n * d_out..(n + 1) * d_out].iter_mut().zip(w.chunks_exact(d_in).zip(b)) {
                *o = dot(row, xi) + *bias;
            }
        }
    } else {
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b);
        }
        gemm(false, true, batch, d_out, d_in, T::one(), x, w, T::one(), out);
    }
}

/// `out_i = Σ_j W_ij x_j + b_i`; a rank>1 input is a batch whose samples are flattened.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, d_in, d_out) = dims(input, weights)?;
    if bias.len() != d_out {
        return Err(Error::Shape(format!("bias has {} entries, expected {d_out}", bias.len())));
    }
    let mut out = vec![T::zero(); batch * d_out];
    dense_into(input.data(), weights.data(), bias.data(), batch, d_in, d_out, &mut out);
    let shape = if input.rank() == 1 { vec![d_out] } else { vec![batch, d_out] };
    Tensor::new(shape, out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (batch, d_in, d_out) = dims(input, weights)?;
    if grad_out.len() != batch * d_out {
        return Err(Error::Shape(format!(
            "grad_out {:?} does not match dense output [{batch}, {d_out}]",
            grad_out.shape()
        )));
    }
    let mut gw = vec![T::zero(); d_out * d_in];
    let mut gb = vec![T::zero(); d_out];
    let mut gx = vec![T::zero(); batch * d_in];
    accumulate_param_grads(grad_out.data(), input.data(), batch, d_in, d_out, &mut gw, &mut gb);
    input_grad(grad_out.data(), weights.data(), batch, d_in, d_out, &mut gx);
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![d_out], gb)?,
    })
}

pub(crate) fn accumulate_param_grads<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    batch: usize,
    d_in: usize,
    d_out: usize,
    gw: &mut [T],
    gb: &mut [T],
) {
    gemm(true, false, d_out, d_in, batch, T::one(), grad_out, x, T::one(), gw);
    for row in grad_out.chunks_exact(d_out) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += *g;
        }
    }
}

pub(crate) fn input_grad<T: Scalar>(grad_out: &[T], w: &[T], batch: usize, d_in: usize, d_out: usize, gx: &mut [T]) {
    gemm(false, false, batch, d_in, d_out, T::one(), grad_out, w, T::zero(), gx);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let w = Tensor::<f64>::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = dense_forward(&x, &w, &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn small_example() {
        let w = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let y = dense_forward(&Tensor::from_vec(vec![4.0, 5.0]), &w, &Tensor::from_vec(vec![3.0])).unwrap();
        assert_eq!(y.data(), &[17.0]);
    }

    #[test]
    fn batched_paths_agree() {
        let w = Tensor::<f64>::from_fn(vec![4, 6], |i| (i as f64 * 0.37).cos());
        let b = Tensor::<f64>::from_fn(vec![4], |i| i as f64);
        let x = Tensor::<f64>::from_fn(vec![9, 6], |i| (i as f64 * 0.11).sin());
        let big = dense_forward(&x, &w, &b).unwrap();
        for n in 0..9 {
            let one = dense_forward(&Tensor::from_vec(x.sample(n).to_vec()), &w, &b).unwrap();
            for (a, c) in one.data().iter().zip(big.sample(n)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let w = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(
            dense_forward(&Tensor::from_vec(vec![1.0; 4]), &w, &Tensor::zeros(vec![2])),
            Err(Error::Shape(_))
        ));
    }
}
