use super::Tensor;
use crate::error::Result;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `grad_out` wherever the forward input was `<= 0`.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape("relu_backward", input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn clamp_unit(input: &Tensor) -> Tensor {
    input.map(|v| v.clamp(0.0, 1.0))
}
