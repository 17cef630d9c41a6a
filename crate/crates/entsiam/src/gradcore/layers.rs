//! Layer forward/backward implementations.
//!
//! Convolution and linear layers lower to GEMM calls (im2col for conv);
//! the rest are straightforward elementwise or index-mapped kernels. All
//! backward passes accumulate into the layer's parameter gradients and
//! return the gradient with respect to the input.

use super::{GradError, Param, Tensor4};
use matrixmultiply::dgemm;
use rand_chacha::ChaCha8Rng;

fn shape_err(op: &'static str, want: String, got: String) -> GradError {
    GradError::ShapeMismatch { op, want, got }
}

// ===== Convolution =====

/// 2-D convolution (cross-correlation) with square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * ksize * ksize;
        Conv2d {
            in_c,
            out_c,
            ksize,
            stride,
            padding,
            weight: Param::uniform(
                &format!("{name}.weight"),
                &[out_c, in_c, ksize, ksize],
                fan_in,
                rng,
            ),
            bias: Param::zeros(&format!("{name}.bias"), &[out_c]),
        }
    }

    /// Output spatial extent: floor((in + 2*padding - ksize)/stride) + 1.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize), GradError> {
        let (k, s, p) = (self.ksize, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(shape_err(
                "conv2d",
                format!("input at least {}x{} after padding", k, k),
                format!("{}x{} with padding {}", h, w, p),
            ));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn check_input(&self, x: &Tensor4) -> Result<(usize, usize), GradError> {
        if x.shape[1] != self.in_c {
            return Err(shape_err(
                "conv2d",
                format!("{} input channels", self.in_c),
                format!("{}", x.shape[1]),
            ));
        }
        self.out_hw(x.shape[2], x.shape[3])
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4, GradError> {
        let (oh, ow) = self.check_input(x)?;
        let [n, _, h, w] = x.shape;
        let (k, ick2, ohow) = (self.ksize, self.in_c * self.ksize * self.ksize, oh * ow);
        let mut out = Tensor4::zeros(n, self.out_c, oh, ow);
        let mut col = vec![0.0; ick2 * ohow];
        for b in 0..n {
            im2col(
                x.item(b), self.in_c, h, w, k, self.stride, self.padding, oh, ow, &mut col,
            );
            let dst = out.item_mut(b);
            unsafe {
                dgemm(
                    self.out_c, ick2, ohow,
                    1.0,
                    self.weight.data.as_ptr(), ick2 as isize, 1,
                    col.as_ptr(), ohow as isize, 1,
                    0.0,
                    dst.as_mut_ptr(), ohow as isize, 1,
                );
            }
            for oc in 0..self.out_c {
                let bias = self.bias.data[oc];
                for v in &mut dst[oc * ohow..(oc + 1) * ohow] {
                    *v += bias;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4, GradError> {
        let (oh, ow) = self.check_input(x)?;
        let [n, _, h, w] = x.shape;
        if grad_out.shape != [n, self.out_c, oh, ow] {
            return Err(shape_err(
                "conv2d backward",
                format!("{:?}", [n, self.out_c, oh, ow]),
                format!("{:?}", grad_out.shape),
            ));
        }
        let (k, ick2, ohow) = (self.ksize, self.in_c * self.ksize * self.ksize, oh * ow);
        let mut grad_x = Tensor4::zeros(n, self.in_c, h, w);
        let mut col = vec![0.0; ick2 * ohow];
        let mut gcol = vec![0.0; ick2 * ohow];
        for b in 0..n {
            let gy = grad_out.item(b);
            im2col(
                x.item(b), self.in_c, h, w, k, self.stride, self.padding, oh, ow, &mut col,
            );
            unsafe {
                // grad_w += gy (out_c x ohow) . col^T (ohow x ick2)
                dgemm(
                    self.out_c, ohow, ick2,
                    1.0,
                    gy.as_ptr(), ohow as isize, 1,
                    col.as_ptr(), 1, ohow as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(), ick2 as isize, 1,
                );
                // gcol = w^T (ick2 x out_c) . gy (out_c x ohow)
                dgemm(
                    ick2, self.out_c, ohow,
                    1.0,
                    self.weight.data.as_ptr(), 1, ick2 as isize,
                    gy.as_ptr(), ohow as isize, 1,
                    0.0,
                    gcol.as_mut_ptr(), ohow as isize, 1,
                );
            }
            for oc in 0..self.out_c {
                self.bias.grad[oc] += gy[oc * ohow..(oc + 1) * ohow].iter().sum::<f64>();
            }
            col2im_accum(
                &gcol, self.in_c, h, w, k, self.stride, self.padding, oh, ow,
                grad_x.item_mut(b),
            );
        }
        Ok(grad_x)
    }
}

/// Unfold one image into a (in_c*k*k) x (oh*ow) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64], in_c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize,
    oh: usize, ow: usize, col: &mut [f64],
) {
    let ohow = oh * ow;
    for ci in 0..in_c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ohow..(row + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im_accum(
    gcol: &[f64], in_c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize,
    oh: usize, ow: usize, dst: &mut [f64],
) {
    let ohow = oh * ow;
    for ci in 0..in_c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &gcol[row * ohow..(row + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

// ===== Batch normalization =====

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Values saved by the training-mode forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(&format!("{name}.gamma"), &[channels]);
        gamma.data.iter_mut().for_each(|v| *v = 1.0);
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta: Param::zeros(&format!("{name}.beta"), &[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn check_input(&self, x: &Tensor4, op: &'static str) -> Result<(), GradError> {
        if x.shape[1] != self.channels {
            return Err(shape_err(
                op,
                format!("{} channels", self.channels),
                format!("{}", x.shape[1]),
            ));
        }
        Ok(())
    }

    /// Normalize with batch statistics and update the running ones.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, BnCache), GradError> {
        self.check_input(x, "batchnorm")?;
        let [n, c, h, w] = x.shape;
        if n < 2 {
            return Err(GradError::BatchTooSmall(n));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut y = Tensor4::zeros(n, c, h, w);
        let mut xhat = Tensor4::zeros(n, c, h, w);
        let mut inv_std = vec![0.0; c];
        for (ci, istd_slot) in inv_std.iter_mut().enumerate() {
            let mut sum = 0.0;
            for b in 0..n {
                sum += x.item(b)[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut var = 0.0;
            for b in 0..n {
                for &v in &x.item(b)[ci * hw..(ci + 1) * hw] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            *istd_slot = istd;
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            let unbiased = var * m / (m - 1.0);
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
            let (g, be) = (self.gamma.data[ci], self.beta.data[ci]);
            for b in 0..n {
                let xs = &x.item(b)[ci * hw..(ci + 1) * hw];
                let base = xhat.idx(b, ci, 0, 0);
                for (i, &v) in xs.iter().enumerate() {
                    let xh = (v - mean) * istd;
                    xhat.data[base + i] = xh;
                    y.data[base + i] = xh * g + be;
                }
            }
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Normalize with the running statistics; no state is touched.
    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4, GradError> {
        self.check_input(x, "batchnorm")?;
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut y = Tensor4::zeros(n, c, h, w);
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (mean, g, be) = (self.running_mean[ci], self.gamma.data[ci], self.beta.data[ci]);
            for b in 0..n {
                let xs = &x.item(b)[ci * hw..(ci + 1) * hw];
                let base = y.idx(b, ci, 0, 0);
                for (i, &v) in xs.iter().enumerate() {
                    y.data[base + i] = (v - mean) * istd * g + be;
                }
            }
        }
        Ok(y)
    }

    /// Backward through the training-mode pass (batch statistics included).
    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor4) -> Result<Tensor4, GradError> {
        self.check_input(grad_out, "batchnorm backward")?;
        let [n, c, h, w] = grad_out.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut gx = Tensor4::zeros(n, c, h, w);
        for ci in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for b in 0..n {
                let base = grad_out.idx(b, ci, 0, 0);
                for i in 0..hw {
                    let gy = grad_out.data[base + i];
                    sum_gy += gy;
                    sum_gy_xhat += gy * cache.xhat.data[base + i];
                }
            }
            self.gamma.grad[ci] += sum_gy_xhat;
            self.beta.grad[ci] += sum_gy;
            let scale = self.gamma.data[ci] * cache.inv_std[ci] / m;
            for b in 0..n {
                let base = grad_out.idx(b, ci, 0, 0);
                for i in 0..hw {
                    let gy = grad_out.data[base + i];
                    let xh = cache.xhat.data[base + i];
                    gx.data[base + i] = scale * (m * gy - sum_gy - xh * sum_gy_xhat);
                }
            }
        }
        Ok(gx)
    }
}

// ===== Elementwise activations =====

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    debug_assert_eq!(x.shape, grad_out.shape);
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data.iter_mut().zip(&x.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    y
}

/// Takes the forward *output* y, since sigmoid' = y(1-y).
pub fn sigmoid_backward(y: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    debug_assert_eq!(y.shape, grad_out.shape);
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data.iter_mut().zip(&y.data) {
        *g *= v * (1.0 - v);
    }
    gx
}

// ===== 2x2 max pooling =====

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    in_shape: [usize; 4],
    /// Flat source index of each output element's argmax (first occurrence).
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2(x: &Tensor4) -> (Tensor4, MaxPoolCache) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros(n, c, oh, ow);
    let mut argmax = vec![0usize; y.numel()];
    let mut oi = 0;
    for b in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = x.idx(b, ci, oy * 2 + dy, ox * 2 + dx);
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.data[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (
        y,
        MaxPoolCache {
            in_shape: x.shape,
            argmax,
        },
    )
}

pub fn maxpool2_backward(cache: &MaxPoolCache, grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = cache.in_shape;
    let mut gx = Tensor4::zeros(n, c, h, w);
    for (gi, &src) in cache.argmax.iter().enumerate() {
        gx.data[src] += grad_out.data[gi];
    }
    gx
}

// ===== Nearest-neighbor upsampling =====

/// Resize to (th, tw); source index = floor(src_extent * i / dst_extent).
pub fn upsample_nearest(x: &Tensor4, th: usize, tw: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape;
    let mut y = Tensor4::zeros(n, c, th, tw);
    for b in 0..n {
        for ci in 0..c {
            for oy in 0..th {
                let sy = oy * h / th;
                let src_base = x.idx(b, ci, sy, 0);
                let dst_base = y.idx(b, ci, oy, 0);
                for ox in 0..tw {
                    y.data[dst_base + ox] = x.data[src_base + ox * w / tw];
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample_nearest`]: each source cell collects the gradient
/// of every target cell it fed.
pub fn upsample_nearest_backward(in_shape: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = in_shape;
    let [_, _, th, tw] = grad_out.shape;
    let mut gx = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ci in 0..c {
            for oy in 0..th {
                let sy = oy * h / th;
                let src_base = gx.idx(b, ci, sy, 0);
                let dst_base = grad_out.idx(b, ci, oy, 0);
                for ox in 0..tw {
                    gx.data[src_base + ox * w / tw] += grad_out.data[dst_base + ox];
                }
            }
        }
    }
    gx
}

// ===== Linear =====

/// Fully connected layer on (n, features, 1, 1) tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param, // (out_f, in_f)
    pub bias: Param,   // (out_f)
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            in_f,
            out_f,
            weight: Param::uniform(&format!("{name}.weight"), &[out_f, in_f], in_f, rng),
            bias: Param::zeros(&format!("{name}.bias"), &[out_f]),
        }
    }

    fn check_input(&self, x: &Tensor4, op: &'static str) -> Result<usize, GradError> {
        if x.shape[1] != self.in_f || x.shape[2] != 1 || x.shape[3] != 1 {
            return Err(shape_err(
                op,
                format!("(n, {}, 1, 1)", self.in_f),
                format!("{:?}", x.shape),
            ));
        }
        Ok(x.shape[0])
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4, GradError> {
        let n = self.check_input(x, "linear")?;
        let mut y = Tensor4::zeros(n, self.out_f, 1, 1);
        unsafe {
            // y (n x out) = x (n x in) . w^T (in x out)
            dgemm(
                n, self.in_f, self.out_f,
                1.0,
                x.data.as_ptr(), self.in_f as isize, 1,
                self.weight.data.as_ptr(), 1, self.in_f as isize,
                0.0,
                y.data.as_mut_ptr(), self.out_f as isize, 1,
            );
        }
        for b in 0..n {
            for (o, v) in y.item_mut(b).iter_mut().enumerate() {
                *v += self.bias.data[o];
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4, GradError> {
        let n = self.check_input(x, "linear backward")?;
        if grad_out.shape != [n, self.out_f, 1, 1] {
            return Err(shape_err(
                "linear backward",
                format!("(n, {}, 1, 1)", self.out_f),
                format!("{:?}", grad_out.shape),
            ));
        }
        let mut gx = Tensor4::zeros(n, self.in_f, 1, 1);
        unsafe {
            // grad_w += gy^T (out x n) . x (n x in)
            dgemm(
                self.out_f, n, self.in_f,
                1.0,
                grad_out.data.as_ptr(), 1, self.out_f as isize,
                x.data.as_ptr(), self.in_f as isize, 1,
                1.0,
                self.weight.grad.as_mut_ptr(), self.in_f as isize, 1,
            );
            // gx (n x in) = gy (n x out) . w (out x in)
            dgemm(
                n, self.out_f, self.in_f,
                1.0,
                grad_out.data.as_ptr(), self.out_f as isize, 1,
                self.weight.data.as_ptr(), self.in_f as isize, 1,
                0.0,
                gx.data.as_mut_ptr(), self.in_f as isize, 1,
            );
        }
        for b in 0..n {
            for (o, &g) in grad_out.item(b).iter().enumerate() {
                self.bias.grad[o] += g;
            }
        }
        Ok(gx)
    }
}

// ===== Shape plumbing =====

/// (n, c, h, w) -> (n, c*h*w, 1, 1).
pub fn flatten(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape;
    Tensor4 {
        data: x.data.clone(),
        shape: [n, c * h * w, 1, 1],
    }
}

/// Undo [`flatten`] on a gradient.
pub fn unflatten(grad: &Tensor4, shape: [usize; 4]) -> Result<Tensor4, GradError> {
    grad.clone().reshaped(shape)
}
