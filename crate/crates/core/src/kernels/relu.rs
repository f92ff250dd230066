//! Rectified linear unit.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor5;

/// Elementwise max(x, 0).
pub fn relu(x: &Tensor5) -> Tensor5 {
    let (n, c, d, h, w) = x.dims();
    let mut y = Tensor5::zeros(n, c, d, h, w);
    let chunk = (d * h * w).max(1);
    let src = x.data();
    parallel::for_each_chunk_mut(y.data_mut(), chunk, |block, out| {
        let base = block * chunk;
        let src = &src[base..base + out.len()];
        for (o, &v) in out.iter_mut().zip(src) {
            *o = v.max(0.0);
        }
    });
    y
}

/// Masks the upstream gradient by x > 0 (zero gradient at the kink itself).
pub fn relu_backward(x: &Tensor5, grad_y: &Tensor5) -> Result<Tensor5> {
    if x.dims() != grad_y.dims() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?} but input is {:?}",
            grad_y.dims(),
            x.dims()
        )));
    }
    let (n, c, d, h, w) = x.dims();
    let mut gx = Tensor5::zeros(n, c, d, h, w);
    let chunk = (d * h * w).max(1);
    let x_data = x.data();
    let gy_data = grad_y.data();
    parallel::for_each_chunk_mut(gx.data_mut(), chunk, |block, out| {
        let base = block * chunk;
        for (j, o) in out.iter_mut().enumerate() {
            *o = if x_data[base + j] > 0.0 { gy_data[base + j] } else { 0.0 };
        }
    });
    Ok(gx)
}
