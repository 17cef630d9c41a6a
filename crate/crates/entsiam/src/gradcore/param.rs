//! Trainable parameters with paired gradient buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named tensor of weights plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Param::zeros(name, shape);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for v in &mut p.data {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
