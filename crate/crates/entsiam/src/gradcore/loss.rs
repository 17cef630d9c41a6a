//! Reconstruction loss.

use super::{GradError, Tensor4};

/// Mean-squared reconstruction error, averaged over the batch only:
/// L = 1/(2n) * sum_i ||x_i - target_i||^2, where n is the batch size.
///
/// Returns the scalar loss and its gradient with respect to `x`,
/// dL/dx = (x - target)/n.
pub fn mse_loss(x: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4), GradError> {
    if x.shape != target.shape {
        return Err(GradError::ShapeMismatch {
            op: "mse",
            want: format!("{:?}", x.shape),
            got: format!("{:?}", target.shape),
        });
    }
    let n = x.shape[0] as f64;
    let mut grad = x.clone();
    let mut loss = 0.0;
    for (g, &t) in grad.data.iter_mut().zip(&target.data) {
        let d = *g - t;
        loss += d * d;
        *g = d / n;
    }
    Ok((loss / (2.0 * n), grad))
}
