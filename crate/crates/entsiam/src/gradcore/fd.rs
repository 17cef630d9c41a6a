//! Finite-difference gradient checking.
//!
//! Every analytic backward pass in this crate is validated against central
//! differences of a scalarized forward pass. The scalarization is a dot
//! product with a fixed random probe, which exercises all output elements
//! with distinct weights.

/// Central-difference gradient of `f` with respect to `x`.
pub fn central_gradient<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between paired entries. The denominator is
/// floored at 0.01 so near-zero gradients are compared absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(0.01))
        .fold(0.0, f64::max)
}

/// Dot product used to scalarize multi-output functions for checking.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
