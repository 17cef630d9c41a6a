//! Dense NCHW tensors.

use super::GradError;

/// A dense f64 tensor with shape (n, c, h, w), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub data: Vec<f64>,
    pub shape: [usize; 4],
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            data: vec![0.0; n * c * h * w],
            shape: [n, c, h, w],
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: [usize; 4]) -> Result<Self, GradError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(GradError::ShapeMismatch {
                op: "from_vec",
                want: format!("{} elements", shape.iter().product::<usize>()),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor4 { data, shape })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: [usize; 4]) -> Result<Self, GradError> {
        if self.numel() != shape.iter().product::<usize>() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                want: format!("{} elements", shape.iter().product::<usize>()),
                got: format!("{}", self.numel()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Elements of batch item `n`, one contiguous slice.
    pub fn item(&self, n: usize) -> &[f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
