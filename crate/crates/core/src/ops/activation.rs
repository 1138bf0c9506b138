//! Elementwise rectifier.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_passes_positives() {
        let x = Tensor::<f32>::new(&[4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn backward_masks_on_input_sign() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.5, 0.0]).unwrap();
        let g = Tensor::<f32>::new(&[3], vec![10.0, 10.0, 10.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 10.0, 0.0]);
    }
}
