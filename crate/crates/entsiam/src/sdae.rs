//! The denoising autoencoder with a relation head.
//!
//! One shared parameter set serves both comparison branches: every sample,
//! support or query, runs through the same encoder, so "Siamese" here is a
//! property of the wiring, not of the storage. The encoder is four strided
//! 3x3 conv + batch-norm + relu stages (max-pooled once after the first),
//! taking a 105x105 normalized entropy image down to a (64, 4, 4) latent.
//! The decoder mirrors the spatial trace back up through five
//! upsample-then-conv stages and reconstructs the clean image from the
//! latent of an obfuscated input. The relation head scores a
//! (class feature, query feature) pair by depth-concatenating the two
//! latents, flattening, and applying linear -> relu -> linear -> sigmoid.
//!
//! Losses:
//! - reconstruction: [`crate::gradcore::mse_loss`] against the clean image
//! - relation: sum of squared score/label differences ([`relation_loss`])
//! - combined: `L = L_r + lambda * L_mse` ([`total_loss`])
//! - a contrastive pair loss over projected latents is provided as a
//!   baseline ([`contrastive_distance`], [`contrastive_loss`])
//!
//! [`episode_grads`] assembles the whole training step for one episode and
//! accumulates parameter gradients; the trainer only adds the optimizer.

use crate::gradcore::{
    flatten, maxpool2, maxpool2_backward, mse_loss, relu, relu_backward, sigmoid,
    sigmoid_backward, unflatten, upsample_nearest, upsample_nearest_backward, BatchNorm2d,
    BnCache, Conv2d, GradError, Linear, MaxPoolCache, Param, Tensor4,
};
use thiserror::Error;

/// Default margin for the contrastive baseline loss.
pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SdaeError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("class pooling needs way >= 1 and shot >= 1")]
    EmptyPool,
    #[error("contrastive distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("{op}: expected {want}, got {got}")]
    BadBatch {
        op: &'static str,
        want: String,
        got: String,
    },
}

fn batch_err(op: &'static str, want: String, got: String) -> SdaeError {
    SdaeError::BadBatch { op, want, got }
}

// ===== Configuration =====

/// How the K support latents of one class are pooled into a class feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(format!("unknown pooling `{other}` (expected mean|sum)")),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        })
    }
}

/// Architecture knobs. Everything else about the network is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Input images are `input_side` x `input_side`, one channel.
    pub input_side: usize,
    /// Channel width of every encoder stage.
    pub channels: usize,
    /// Width of the relation head's hidden layer.
    pub head_dim: usize,
    pub pooling: Pooling,
    /// When false the decoder is detached: no reconstruction pass at all.
    pub decoder_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_side: crate::entropix::TARGET_SIDE,
            channels: 64,
            head_dim: 256,
            pooling: Pooling::Mean,
            decoder_enabled: true,
        }
    }
}

impl ModelConfig {
    /// Spatial side after each encoder step:
    /// input, conv1, pool, conv2, conv3, conv4. Default input gives
    /// [105, 53, 26, 13, 7, 4].
    pub fn encoder_trace(&self) -> [usize; 6] {
        // 3x3 conv, stride 2, padding 1.
        let conv = |s: usize| (s + 2 - 3) / 2 + 1;
        let s1 = conv(self.input_side);
        let s2 = s1 / 2;
        let s3 = conv(s2);
        let s4 = conv(s3);
        let s5 = conv(s4);
        [self.input_side, s1, s2, s3, s4, s5]
    }

    /// Side length of the latent feature map.
    pub fn latent_side(&self) -> usize {
        self.encoder_trace()[5]
    }

    /// Flattened latent length (channels * side^2).
    pub fn latent_dim(&self) -> usize {
        self.channels * self.latent_side() * self.latent_side()
    }

    /// Decoder output channels per stage: the width tapers toward the
    /// single-channel image, which keeps the reconstruction path cheap
    /// without touching the latent the head consumes.
    fn decoder_channels(&self) -> [usize; 5] {
        let c = self.channels;
        [
            (c / 2).max(1),
            (c / 4).max(1),
            (c / 8).max(1),
            (c / 16).max(1),
            1,
        ]
    }
}

// ===== The model =====

#[derive(Debug, Clone)]
pub struct SdaeModel {
    pub cfg: ModelConfig,
    enc_conv: Vec<Conv2d>,
    enc_bn: Vec<BatchNorm2d>,
    dec_conv: Vec<Conv2d>,
    dec_bn: Vec<BatchNorm2d>,
    /// Decoder upsample targets, e.g. [7, 13, 26, 53, 105].
    dec_targets: [usize; 5],
    fc1: Linear,
    fc2: Linear,
}

/// Activations saved by [`SdaeModel::encode_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncCache {
    conv_in: Vec<Tensor4>,
    bn_caches: Vec<BnCache>,
    bn_out: Vec<Tensor4>,
    pool_cache: MaxPoolCache,
}

/// Activations saved by [`SdaeModel::decode_train`].
#[derive(Debug, Clone)]
pub struct DecCache {
    up_in_shapes: Vec<[usize; 4]>,
    conv_in: Vec<Tensor4>,
    bn_caches: Vec<BnCache>,
    bn_out: Vec<Tensor4>,
}

/// Activations saved by [`SdaeModel::relation_forward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    pair_flat: Tensor4,
    fc1_out: Tensor4,
    relu_out: Tensor4,
    scores: Tensor4,
    feat_shape: [usize; 4],
}

impl SdaeModel {
    /// Fresh model with fan-in uniform weights drawn from the seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = crate::seeds::rng(seed, &["model-init"]);
        let c = cfg.channels;
        let enc_in = [1, c, c, c];
        let mut enc_conv = Vec::with_capacity(4);
        let mut enc_bn = Vec::with_capacity(4);
        for (i, &ic) in enc_in.iter().enumerate() {
            enc_conv.push(Conv2d::new(&format!("enc{}", i + 1), ic, c, 3, 2, 1, &mut rng));
            enc_bn.push(BatchNorm2d::new(&format!("enc{}.bn", i + 1), c));
        }
        let trace = cfg.encoder_trace();
        let dec_targets = [trace[4], trace[3], trace[2], trace[1], trace[0]];
        let dec_out = cfg.decoder_channels();
        let mut dec_conv = Vec::with_capacity(5);
        let mut dec_bn = Vec::with_capacity(4);
        let mut dec_in = c;
        for (i, &oc) in dec_out.iter().enumerate() {
            dec_conv.push(Conv2d::new(&format!("dec{}", i + 1), dec_in, oc, 3, 1, 1, &mut rng));
            if i < 4 {
                dec_bn.push(BatchNorm2d::new(&format!("dec{}.bn", i + 1), oc));
            }
            dec_in = oc;
        }
        let pair_dim = 2 * cfg.latent_dim();
        let fc1 = Linear::new("head.fc1", pair_dim, cfg.head_dim, &mut rng);
        let fc2 = Linear::new("head.fc2", cfg.head_dim, 1, &mut rng);
        SdaeModel {
            cfg,
            enc_conv,
            enc_bn,
            dec_conv,
            dec_bn,
            dec_targets,
            fc1,
            fc2,
        }
    }

    /// Every learnable parameter, in a fixed canonical order.
    pub fn params(&self) -> Vec<&Param> {
        let mut ps = Vec::new();
        for (conv, bn) in self.enc_conv.iter().zip(&self.enc_bn) {
            ps.extend([&conv.weight, &conv.bias, &bn.gamma, &bn.beta]);
        }
        for (i, conv) in self.dec_conv.iter().enumerate() {
            ps.extend([&conv.weight, &conv.bias]);
            if i < 4 {
                ps.extend([&self.dec_bn[i].gamma, &self.dec_bn[i].beta]);
            }
        }
        ps.extend([&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]);
        ps
    }

    /// Mutable view of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for (conv, bn) in self.enc_conv.iter_mut().zip(self.enc_bn.iter_mut()) {
            ps.extend([&mut conv.weight, &mut conv.bias, &mut bn.gamma, &mut bn.beta]);
        }
        let mut bn_iter = self.dec_bn.iter_mut();
        for (i, conv) in self.dec_conv.iter_mut().enumerate() {
            ps.push(&mut conv.weight);
            ps.push(&mut conv.bias);
            if i < 4 {
                let bn = bn_iter.next().expect("four decoder norm stages");
                ps.extend([&mut bn.gamma, &mut bn.beta]);
            }
        }
        ps.extend([
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]);
        ps
    }

    /// Batch-norm running statistics (state, not parameters), canonical order.
    pub fn running_stats(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for bn in self.enc_bn.iter().chain(&self.dec_bn) {
            out.push((format!("{}.running_mean", bn.gamma.name), bn.running_mean.as_slice()));
            out.push((format!("{}.running_var", bn.gamma.name), bn.running_var.as_slice()));
        }
        out
    }

    /// Mutable view of [`running_stats`](Self::running_stats), same order.
    pub fn running_stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for bn in self.enc_bn.iter_mut().chain(self.dec_bn.iter_mut()) {
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
        out
    }

    fn check_images(&self, x: &Tensor4, op: &'static str) -> Result<(), SdaeError> {
        let s = self.cfg.input_side;
        if x.shape[1] != 1 || x.shape[2] != s || x.shape[3] != s {
            return Err(batch_err(op, format!("(n, 1, {s}, {s})"), format!("{:?}", x.shape)));
        }
        Ok(())
    }

    /// Encoder in training mode: batch statistics, running stats updated,
    /// activations cached for [`encode_backward`](Self::encode_backward).
    pub fn encode_train(&mut self, x: &Tensor4) -> Result<(Tensor4, EncCache), SdaeError> {
        self.check_images(x, "encode")?;
        let mut conv_in = Vec::with_capacity(4);
        let mut bn_caches = Vec::with_capacity(4);
        let mut bn_out = Vec::with_capacity(4);
        let mut pool_cache = None;
        let mut cur = x.clone();
        for i in 0..4 {
            let c = self.enc_conv[i].forward(&cur)?;
            conv_in.push(cur);
            let (b, cache) = self.enc_bn[i].forward_train(&c)?;
            bn_caches.push(cache);
            cur = relu(&b);
            bn_out.push(b);
            if i == 0 {
                let (p, pc) = maxpool2(&cur);
                pool_cache = Some(pc);
                cur = p;
            }
        }
        let cache = EncCache {
            conv_in,
            bn_caches,
            bn_out,
            pool_cache: pool_cache.expect("stage 1 always pools"),
        };
        Ok((cur, cache))
    }

    /// Encoder in evaluation mode: running statistics, no state touched.
    pub fn encode_eval(&self, x: &Tensor4) -> Result<Tensor4, SdaeError> {
        self.check_images(x, "encode")?;
        let mut cur = x.clone();
        for i in 0..4 {
            let c = self.enc_conv[i].forward(&cur)?;
            let b = self.enc_bn[i].forward_eval(&c)?;
            cur = relu(&b);
            if i == 0 {
                cur = maxpool2(&cur).0;
            }
        }
        Ok(cur)
    }

    /// Backward through the training-mode encoder. Accumulates parameter
    /// gradients and returns the gradient with respect to the input batch.
    pub fn encode_backward(
        &mut self,
        cache: &EncCache,
        grad_latent: &Tensor4,
    ) -> Result<Tensor4, SdaeError> {
        let mut g = grad_latent.clone();
        for i in (0..4).rev() {
            if i == 0 {
                g = maxpool2_backward(&cache.pool_cache, &g);
            }
            g = relu_backward(&cache.bn_out[i], &g);
            g = self.enc_bn[i].backward(&cache.bn_caches[i], &g)?;
            g = self.enc_conv[i].backward(&cache.conv_in[i], &g)?;
        }
        Ok(g)
    }

    fn check_latent(&self, z: &Tensor4, op: &'static str) -> Result<(), SdaeError> {
        let s = self.cfg.latent_side();
        if z.shape[1] != self.cfg.channels || z.shape[2] != s || z.shape[3] != s {
            return Err(batch_err(
                op,
                format!("(n, {}, {s}, {s})", self.cfg.channels),
                format!("{:?}", z.shape),
            ));
        }
        Ok(())
    }

    /// Decoder in training mode; the final stage is linear (no norm/relu).
    pub fn decode_train(&mut self, z: &Tensor4) -> Result<(Tensor4, DecCache), SdaeError> {
        self.check_latent(z, "decode")?;
        let mut up_in_shapes = Vec::with_capacity(5);
        let mut conv_in = Vec::with_capacity(5);
        let mut bn_caches = Vec::with_capacity(4);
        let mut bn_out = Vec::with_capacity(4);
        let mut cur = z.clone();
        for i in 0..5 {
            up_in_shapes.push(cur.shape);
            let t = self.dec_targets[i];
            let u = upsample_nearest(&cur, t, t);
            let c = self.dec_conv[i].forward(&u)?;
            conv_in.push(u);
            if i < 4 {
                let (b, cache) = self.dec_bn[i].forward_train(&c)?;
                bn_caches.push(cache);
                cur = relu(&b);
                bn_out.push(b);
            } else {
                cur = c;
            }
        }
        Ok((
            cur,
            DecCache {
                up_in_shapes,
                conv_in,
                bn_caches,
                bn_out,
            },
        ))
    }

    /// Decoder in evaluation mode.
    pub fn decode_eval(&self, z: &Tensor4) -> Result<Tensor4, SdaeError> {
        self.check_latent(z, "decode")?;
        let mut cur = z.clone();
        for i in 0..5 {
            let t = self.dec_targets[i];
            let u = upsample_nearest(&cur, t, t);
            let c = self.dec_conv[i].forward(&u)?;
            cur = if i < 4 {
                relu(&self.dec_bn[i].forward_eval(&c)?)
            } else {
                c
            };
        }
        Ok(cur)
    }

    /// Backward through the training-mode decoder; returns the gradient
    /// with respect to the latent.
    pub fn decode_backward(
        &mut self,
        cache: &DecCache,
        grad_recon: &Tensor4,
    ) -> Result<Tensor4, SdaeError> {
        let mut g = grad_recon.clone();
        for i in (0..5).rev() {
            if i < 4 {
                g = relu_backward(&cache.bn_out[i], &g);
                g = self.dec_bn[i].backward(&cache.bn_caches[i], &g)?;
            }
            g = self.dec_conv[i].backward(&cache.conv_in[i], &g)?;
            g = upsample_nearest_backward(cache.up_in_shapes[i], &g);
        }
        Ok(g)
    }

    /// Score a batch of (class feature, query feature) pairs: depth-concat
    /// with the class feature first, flatten, linear -> relu -> linear ->
    /// sigmoid. Scores land strictly inside (0, 1).
    pub fn relation_forward(
        &self,
        class_feats: &Tensor4,
        query_feats: &Tensor4,
    ) -> Result<(Tensor4, HeadCache), SdaeError> {
        if class_feats.shape != query_feats.shape {
            return Err(batch_err(
                "relation",
                format!("{:?}", class_feats.shape),
                format!("{:?}", query_feats.shape),
            ));
        }
        self.check_latent(class_feats, "relation")?;
        let [p, c, h, w] = class_feats.shape;
        let chw = c * h * w;
        let mut pair = Tensor4::zeros(p, 2 * c, h, w);
        for b in 0..p {
            let dst = pair.item_mut(b);
            dst[..chw].copy_from_slice(class_feats.item(b));
            dst[chw..].copy_from_slice(query_feats.item(b));
        }
        let pair_flat = flatten(&pair);
        let fc1_out = self.fc1.forward(&pair_flat)?;
        let relu_out = relu(&fc1_out);
        let fc2_out = self.fc2.forward(&relu_out)?;
        let scores = sigmoid(&fc2_out);
        Ok((
            scores.clone(),
            HeadCache {
                pair_flat,
                fc1_out,
                relu_out,
                scores,
                feat_shape: class_feats.shape,
            },
        ))
    }

    /// Backward through the relation head. Accumulates head gradients and
    /// returns (class-feature gradient, query-feature gradient).
    pub fn relation_backward(
        &mut self,
        cache: &HeadCache,
        grad_scores: &Tensor4,
    ) -> Result<(Tensor4, Tensor4), SdaeError> {
        let g = sigmoid_backward(&cache.scores, grad_scores);
        let g = self.fc2.backward(&cache.relu_out, &g)?;
        let g = relu_backward(&cache.fc1_out, &g);
        let g = self.fc1.backward(&cache.pair_flat, &g)?;
        let [p, c, h, w] = cache.feat_shape;
        let chw = c * h * w;
        let gp = unflatten(&g, [p, 2 * c, h, w])?;
        let mut gs = Tensor4::zeros(p, c, h, w);
        let mut gq = Tensor4::zeros(p, c, h, w);
        for b in 0..p {
            let src = gp.item(b);
            gs.item_mut(b).copy_from_slice(&src[..chw]);
            gq.item_mut(b).copy_from_slice(&src[chw..]);
        }
        Ok((gs, gq))
    }

    /// Projection used by the contrastive baseline: the slice of the
    /// head's first linear layer that reads the class-feature half of the
    /// pair vector, plus its bias and a relu. Maps one latent to a
    /// `head_dim` vector.
    pub fn project(&self, z: &Tensor4) -> Result<Tensor4, SdaeError> {
        self.check_latent(z, "project")?;
        let [n, c, h, w] = z.shape;
        let d = c * h * w;
        let mut out = Tensor4::zeros(n, self.cfg.head_dim, 1, 1);
        for b in 0..n {
            let zf = z.item(b);
            let dst = out.item_mut(b);
            for (o, v) in dst.iter_mut().enumerate() {
                let row = &self.fc1.weight.data[o * 2 * d..o * 2 * d + d];
                let mut acc = self.fc1.bias.data[o];
                for (wv, &x) in row.iter().zip(zf) {
                    acc += wv * x;
                }
                *v = acc.max(0.0);
            }
        }
        Ok(out)
    }

    /// Squared distance between the projections of two latent batches,
    /// one value per pair.
    pub fn contrastive_distance(
        &self,
        z_i: &Tensor4,
        z_j: &Tensor4,
    ) -> Result<Vec<f64>, SdaeError> {
        if z_i.shape != z_j.shape {
            return Err(batch_err(
                "contrastive",
                format!("{:?}", z_i.shape),
                format!("{:?}", z_j.shape),
            ));
        }
        let pi = self.project(z_i)?;
        let pj = self.project(z_j)?;
        let n = z_i.shape[0];
        let mut out = Vec::with_capacity(n);
        for b in 0..n {
            let d: f64 = pi
                .item(b)
                .iter()
                .zip(pj.item(b))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(d);
        }
        Ok(out)
    }
}

// ===== Episode-level pieces =====

/// Pool the `way * shot` support latents (grouped by class, class-major)
/// into one feature per class.
pub fn class_pool(
    support: &Tensor4,
    way: usize,
    shot: usize,
    mode: Pooling,
) -> Result<Tensor4, SdaeError> {
    if way == 0 || shot == 0 {
        return Err(SdaeError::EmptyPool);
    }
    let [n, c, h, w] = support.shape;
    if n != way * shot {
        return Err(batch_err(
            "class_pool",
            format!("{} support latents", way * shot),
            format!("{n}"),
        ));
    }
    let mut out = Tensor4::zeros(way, c, h, w);
    for cl in 0..way {
        let dst = out.item_mut(cl);
        for k in 0..shot {
            for (d, &s) in dst.iter_mut().zip(support.item(cl * shot + k)) {
                *d += s;
            }
        }
        if mode == Pooling::Mean {
            let inv = 1.0 / shot as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

/// Spread class-feature gradients back over the support latents.
pub fn class_pool_backward(grad: &Tensor4, shot: usize, mode: Pooling) -> Tensor4 {
    let [way, c, h, w] = grad.shape;
    let mut out = Tensor4::zeros(way * shot, c, h, w);
    let scale = match mode {
        Pooling::Mean => 1.0 / shot as f64,
        Pooling::Sum => 1.0,
    };
    for cl in 0..way {
        let src = grad.item(cl);
        for k in 0..shot {
            for (d, &s) in out.item_mut(cl * shot + k).iter_mut().zip(src) {
                *d = s * scale;
            }
        }
    }
    out
}

/// Expand the (class, query) cross product into aligned pair batches.
/// Pair index = `query * way + class`, so each query's scores over all
/// classes are contiguous.
pub fn build_pairs(
    class_feats: &Tensor4,
    queries: &Tensor4,
) -> Result<(Tensor4, Tensor4), SdaeError> {
    let [way, c, h, w] = class_feats.shape;
    let [nq, qc, qh, qw] = queries.shape;
    if (c, h, w) != (qc, qh, qw) {
        return Err(batch_err(
            "build_pairs",
            format!("{:?}", &class_feats.shape[1..]),
            format!("{:?}", &queries.shape[1..]),
        ));
    }
    let mut s = Tensor4::zeros(nq * way, c, h, w);
    let mut q = Tensor4::zeros(nq * way, c, h, w);
    for qi in 0..nq {
        for cl in 0..way {
            let p = qi * way + cl;
            s.item_mut(p).copy_from_slice(class_feats.item(cl));
            q.item_mut(p).copy_from_slice(queries.item(qi));
        }
    }
    Ok((s, q))
}

/// Adjoint of [`build_pairs`]: sum pair gradients back onto the class
/// features and query latents.
pub fn reduce_pairs(g_class_side: &Tensor4, g_query_side: &Tensor4, way: usize) -> (Tensor4, Tensor4) {
    let [p, c, h, w] = g_class_side.shape;
    let nq = p / way;
    let mut g_class = Tensor4::zeros(way, c, h, w);
    let mut g_query = Tensor4::zeros(nq, c, h, w);
    for qi in 0..nq {
        for cl in 0..way {
            let idx = qi * way + cl;
            for (d, &s) in g_class.item_mut(cl).iter_mut().zip(g_class_side.item(idx)) {
                *d += s;
            }
            for (d, &s) in g_query.item_mut(qi).iter_mut().zip(g_query_side.item(idx)) {
                *d += s;
            }
        }
    }
    (g_class, g_query)
}

/// Copy out a contiguous batch range.
pub fn take_batch(x: &Tensor4, start: usize, count: usize) -> Tensor4 {
    let [_, c, h, w] = x.shape;
    let chw = c * h * w;
    Tensor4 {
        data: x.data[start * chw..(start + count) * chw].to_vec(),
        shape: [count, c, h, w],
    }
}

/// Concatenate two batches along the batch dimension.
pub fn concat_batch(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    debug_assert_eq!(&a.shape[1..], &b.shape[1..]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor4 {
        data,
        shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]],
    }
}

// ===== Losses =====

/// Relation loss: plain sum of squared score/label differences, no
/// averaging. Returns the scalar and its gradient with respect to scores.
pub fn relation_loss(scores: &Tensor4, labels: &[f64]) -> Result<(f64, Tensor4), SdaeError> {
    if scores.numel() != labels.len() {
        return Err(batch_err(
            "relation_loss",
            format!("{} labels", scores.numel()),
            format!("{}", labels.len()),
        ));
    }
    let mut grad = scores.clone();
    let mut loss = 0.0;
    for (g, &y) in grad.data.iter_mut().zip(labels) {
        let d = *g - y;
        loss += d * d;
        *g = 2.0 * d;
    }
    Ok((loss, grad))
}

/// Contrastive baseline loss for one pair. `dissimilar` marks a
/// cross-class pair: similar pairs pay the distance itself, dissimilar
/// pairs pay the squared hinge `max(0, margin - sqrt(d))^2`.
pub fn contrastive_loss(d: f64, dissimilar: bool, margin: f64) -> Result<f64, SdaeError> {
    if d < 0.0 {
        return Err(SdaeError::NegativeDistance(d));
    }
    Ok(if dissimilar {
        let t = (margin - d.sqrt()).max(0.0);
        t * t
    } else {
        d
    })
}

/// Combined objective `L_r + lambda * L_mse`; lambda must lie in [0, 1].
pub fn total_loss(l_r: f64, l_mse: f64, lambda: f64) -> Result<f64, SdaeError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SdaeError::LambdaOutOfRange(lambda));
    }
    Ok(l_r + lambda * l_mse)
}

/// Loss values from one episode step.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLosses {
    pub relation: f64,
    pub mse: f64,
    pub total: f64,
}

/// One training forward/backward over an episode batch.
///
/// `inputs` holds the support block first (`way * shot` items, class-major)
/// followed by the queries; `targets` are the clean reconstruction targets
/// aligned with `inputs`; `labels` are the `n_query * way` pair labels in
/// [`build_pairs`] order. Parameter gradients are accumulated (not
/// cleared), so the caller owns the optimizer step.
pub fn episode_grads(
    model: &mut SdaeModel,
    inputs: &Tensor4,
    targets: &Tensor4,
    way: usize,
    shot: usize,
    labels: &[f64],
    lambda: f64,
) -> Result<EpisodeLosses, SdaeError> {
    let n_support = way * shot;
    let n = inputs.shape[0];
    if n <= n_support {
        return Err(batch_err(
            "episode",
            format!("more than {n_support} items"),
            format!("{n}"),
        ));
    }
    let n_query = n - n_support;
    if labels.len() != n_query * way {
        return Err(batch_err(
            "episode",
            format!("{} pair labels", n_query * way),
            format!("{}", labels.len()),
        ));
    }

    let (z, enc_cache) = model.encode_train(inputs)?;

    // Reconstruction branch (both support and query samples).
    let mut l_mse = 0.0;
    let mut dec_pass = None;
    if model.cfg.decoder_enabled {
        if inputs.shape != targets.shape {
            return Err(batch_err(
                "episode",
                format!("{:?} targets", inputs.shape),
                format!("{:?}", targets.shape),
            ));
        }
        let (recon, dec_cache) = model.decode_train(&z)?;
        let (l, g_recon) = mse_loss(&recon, targets)?;
        l_mse = l;
        dec_pass = Some((dec_cache, g_recon));
    }

    // Relation branch.
    let z_support = take_batch(&z, 0, n_support);
    let z_query = take_batch(&z, n_support, n_query);
    let class_feats = class_pool(&z_support, way, shot, model.cfg.pooling)?;
    let (pair_s, pair_q) = build_pairs(&class_feats, &z_query)?;
    let (scores, head_cache) = model.relation_forward(&pair_s, &pair_q)?;
    let (l_r, g_scores) = relation_loss(&scores, labels)?;
    let (g_pair_s, g_pair_q) = model.relation_backward(&head_cache, &g_scores)?;
    let (g_class, g_zq) = reduce_pairs(&g_pair_s, &g_pair_q, way);
    let g_zs = class_pool_backward(&g_class, shot, model.cfg.pooling);
    let mut g_z = concat_batch(&g_zs, &g_zq);

    // The decoder path carries its lambda weight down through its own
    // backward pass so decoder parameter gradients are scaled too.
    if let Some((dec_cache, mut g_recon)) = dec_pass {
        g_recon.data.iter_mut().for_each(|v| *v *= lambda);
        let g_z_mse = model.decode_backward(&dec_cache, &g_recon)?;
        for (a, b) in g_z.data.iter_mut().zip(&g_z_mse.data) {
            *a += b;
        }
    }

    model.encode_backward(&enc_cache, &g_z)?;
    let total = total_loss(l_r, l_mse, lambda)?;
    Ok(EpisodeLosses {
        relation: l_r,
        mse: l_mse,
        total,
    })
}

/// Evaluation-mode relation scores for one episode: encode everything with
/// running statistics, pool the support block, score every (class, query)
/// pair. Returns `n_query * way` scores in [`build_pairs`] order.
pub fn episode_scores_eval(
    model: &SdaeModel,
    inputs: &Tensor4,
    way: usize,
    shot: usize,
) -> Result<Vec<f64>, SdaeError> {
    let n_support = way * shot;
    let n = inputs.shape[0];
    if n <= n_support {
        return Err(batch_err(
            "episode",
            format!("more than {n_support} items"),
            format!("{n}"),
        ));
    }
    let z = model.encode_eval(inputs)?;
    let z_support = take_batch(&z, 0, n_support);
    let z_query = take_batch(&z, n_support, n - n_support);
    let class_feats = class_pool(&z_support, way, shot, model.cfg.pooling)?;
    let (pair_s, pair_q) = build_pairs(&class_feats, &z_query)?;
    let (scores, _) = model.relation_forward(&pair_s, &pair_q)?;
    Ok(scores.data)
}
