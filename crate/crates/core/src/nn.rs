//! Convolution, activation, pooling, classification loss and SGD.
//!
//! Every kernel here is a pure function with a fixed row-major accumulation
//! order, so repeated calls are bit-identical.

use crate::error::{param_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, LabelMap, Tensor};

/// Label value excluded from the task loss and from scoring.
pub const IGNORE_INDEX: u8 = 255;

/// 3×3 same-padding stride-1 convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    kernel: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    /// `kernel` is `[out, in, 3, 3]`, `bias` is `[out]`.
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        match *kernel.shape() {
            [out, _, 3, 3] => {
                if bias.shape() != [out] {
                    return shape_err(format!(
                        "bias shape {:?} does not match {out} output channels",
                        bias.shape()
                    ));
                }
            }
            _ => return shape_err(format!("kernel must be [out, in, 3, 3], got {:?}", kernel.shape())),
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_channels, in_channels, 3, 3]).expect("positive extents"),
            bias: Tensor::zeros(&[out_channels]).expect("positive extents"),
        }
    }

    /// Kernel that copies channel `i` to output `i` through the centre tap.
    pub fn identity(channels: usize) -> Self {
        let mut layer = Self::zeros(channels, channels);
        for c in 0..channels {
            let at = layer.kernel_index(c, c, 1, 1);
            layer.kernel.data_mut()[at] = 1.0;
        }
        layer
    }

    /// Uniform `(-bound, bound)` kernel entries and zero bias.
    pub fn uniform(out_channels: usize, in_channels: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(out_channels, in_channels);
        for v in layer.kernel.data_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        layer
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn kernel_mut(&mut self) -> &mut [f64] {
        self.kernel.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.data_mut()
    }

    /// Kernel and bias storage, borrowed together.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.kernel.data_mut(), self.bias.data_mut())
    }

    #[inline]
    pub fn kernel_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels() + i) * 3 + ky) * 3 + kx
    }

    /// Kernel reordered to `[ky][kx][a][b]`, `a`/`b` being out/in when
    /// `out_major`, in/out otherwise.
    fn permuted(&self, out_major: bool) -> Vec<f64> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let k = self.kernel.data();
        let mut t = vec![0.0; k.len()];
        for o in 0..co {
            for i in 0..ci {
                for tap in 0..9 {
                    let src = (o * ci + i) * 9 + tap;
                    let dst = if out_major {
                        (tap * co + o) * ci + i
                    } else {
                        (tap * ci + i) * co + o
                    };
                    t[dst] = k[src];
                }
            }
        }
        t
    }
}

/// Gradients of `⟨upstream, conv2d(input, layer)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: FeatureMap,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[inline]
fn shifted(pos: usize, tap: usize, extent: usize) -> Option<usize> {
    let p = pos + tap;
    (p >= 1 && p - 1 < extent).then(|| p - 1)
}

pub fn conv2d(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    let (h, w, cin) = input.dims();
    if cin != layer.in_channels() {
        return shape_err(format!(
            "conv2d: input has {cin} channels, layer expects {}",
            layer.in_channels()
        ));
    }
    let cout = layer.out_channels();
    let kt = layer.permuted(false);
    let bias = layer.bias().data();
    let mut out = FeatureMap::zeros(h, w, cout);
    for y in 0..h {
        for x in 0..w {
            let acc = out.pixel_mut(y, x);
            acc.copy_from_slice(bias);
            for ky in 0..3 {
                let Some(iy) = shifted(y, ky, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = shifted(x, kx, w) else { continue };
                    let src = input.pixel(iy, ix);
                    let tap = ky * 3 + kx;
                    for (i, &v) in src.iter().enumerate() {
                        let row = &kt[(tap * cin + i) * cout..(tap * cin + i + 1) * cout];
                        for (a, &k) in acc.iter_mut().zip(row) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_grad(input: &FeatureMap, layer: &ConvLayer, upstream: &FeatureMap) -> Result<ConvGrads> {
    let (h, w, cin) = input.dims();
    if cin != layer.in_channels() {
        return shape_err(format!(
            "conv2d_grad: input has {cin} channels, layer expects {}",
            layer.in_channels()
        ));
    }
    let cout = layer.out_channels();
    if upstream.dims() != (h, w, cout) {
        return shape_err(format!(
            "conv2d_grad: upstream {:?} does not match output {:?}",
            upstream.dims(),
            (h, w, cout)
        ));
    }
    let kp = layer.permuted(true);
    let mut grad_in = FeatureMap::zeros(h, w, cin);
    let mut grad_kp = vec![0.0; kp.len()];
    let mut grad_bias = vec![0.0; cout];
    for y in 0..h {
        for x in 0..w {
            let up = upstream.pixel(y, x);
            for (g, &u) in grad_bias.iter_mut().zip(up) {
                *g += u;
            }
            for ky in 0..3 {
                let Some(iy) = shifted(y, ky, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = shifted(x, kx, w) else { continue };
                    let tap = ky * 3 + kx;
                    let src = input.pixel(iy, ix);
                    let gin = grad_in.pixel_mut(iy, ix);
                    for (o, &u) in up.iter().enumerate() {
                        if u == 0.0 {
                            continue;
                        }
                        let base = (tap * cout + o) * cin;
                        let krow = &kp[base..base + cin];
                        for (g, &k) in gin.iter_mut().zip(krow) {
                            *g += u * k;
                        }
                        let grow = &mut grad_kp[base..base + cin];
                        for (g, &v) in grow.iter_mut().zip(src) {
                            *g += u * v;
                        }
                    }
                }
            }
        }
    }
    let mut grad_kernel = vec![0.0; kp.len()];
    for tap in 0..9 {
        for o in 0..cout {
            for i in 0..cin {
                grad_kernel[(o * cin + i) * 9 + tap] = grad_kp[(tap * cout + o) * cin + i];
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        kernel: Tensor::new(vec![cout, cin, 3, 3], grad_kernel)?,
        bias: Tensor::new(vec![cout], grad_bias)?,
    })
}

/// Per-pixel affine map (a 1×1 convolution), used as a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseLayer {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseGrads {
    pub input: FeatureMap,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PointwiseLayer {
    /// `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match *weight.shape() {
            [out, _] if bias.shape() == [out] => Ok(Self { weight, bias }),
            _ => shape_err(format!(
                "pointwise layer needs [out, in] weight and [out] bias, got {:?} / {:?}",
                weight.shape(),
                bias.shape()
            )),
        }
    }

    pub fn uniform(out_channels: usize, in_channels: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut weight = Tensor::zeros(&[out_channels, in_channels]).expect("positive extents");
        for v in weight.data_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        Self {
            weight,
            bias: Tensor::zeros(&[out_channels]).expect("positive extents"),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.data_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.data_mut()
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weight.data_mut(), self.bias.data_mut())
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let (h, w, cin) = input.dims();
        if cin != self.in_channels() {
            return shape_err(format!(
                "pointwise: input has {cin} channels, layer expects {}",
                self.in_channels()
            ));
        }
        let cout = self.out_channels();
        let wt = self.weight.data();
        let mut out = FeatureMap::zeros(h, w, cout);
        for y in 0..h {
            for x in 0..w {
                let src = input.pixel(y, x);
                let dst = out.pixel_mut(y, x);
                for (o, d) in dst.iter_mut().enumerate() {
                    let row = &wt[o * cin..(o + 1) * cin];
                    *d = self.bias.data()[o] + row.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<PointwiseGrads> {
        let (h, w, cin) = input.dims();
        let cout = self.out_channels();
        if cin != self.in_channels() || upstream.dims() != (h, w, cout) {
            return shape_err("pointwise backward: shape mismatch");
        }
        let wt = self.weight.data();
        let mut grad_in = FeatureMap::zeros(h, w, cin);
        let mut grad_w = vec![0.0; cout * cin];
        let mut grad_b = vec![0.0; cout];
        for y in 0..h {
            for x in 0..w {
                let src = input.pixel(y, x);
                let up = upstream.pixel(y, x);
                let gin = grad_in.pixel_mut(y, x);
                for (o, &u) in up.iter().enumerate() {
                    grad_b[o] += u;
                    let row = &wt[o * cin..(o + 1) * cin];
                    let grow = &mut grad_w[o * cin..(o + 1) * cin];
                    for i in 0..cin {
                        gin[i] += u * row[i];
                        grow[i] += u * src[i];
                    }
                }
            }
        }
        Ok(PointwiseGrads {
            input: grad_in,
            weight: Tensor::new(vec![cout, cin], grad_w)?,
            bias: Tensor::new(vec![cout], grad_b)?,
        })
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the subgradient at zero is zero.
pub fn relu_grad(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if !x.same_shape(upstream) {
        return shape_err(format!(
            "relu_grad: {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn relu_map(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

pub fn relu_map_grad(x: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
    x.ensure_congruent(upstream, "relu_grad")?;
    let mut out = upstream.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Winner positions of a max-pool, as flat indices into the input map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolRecord {
    input_dims: (usize, usize, usize),
    k: usize,
    argmax: Vec<usize>,
}

impl PoolRecord {
    pub fn factor(&self) -> usize {
        self.k
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Non-overlapping `k×k` max pooling. Ties go to the first element in
/// row-major window order.
pub fn max_pool(x: &FeatureMap, k: usize) -> Result<(FeatureMap, PoolRecord)> {
    let (h, w, c) = x.dims();
    if k == 0 {
        return param_err("pool factor must be positive");
    }
    if h % k != 0 || w % k != 0 {
        return shape_err(format!("max_pool: {h}x{w} not divisible by {k}"));
    }
    let (ph, pw) = (h / k, w / k);
    let mut out = FeatureMap::zeros(ph, pw, c);
    let mut argmax = vec![0usize; ph * pw * c];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let mut best = x.index(py * k, px * k, ch);
                for dy in 0..k {
                    for dx in 0..k {
                        let at = x.index(py * k + dy, px * k + dx, ch);
                        if x.data()[at] > x.data()[best] {
                            best = at;
                        }
                    }
                }
                let o = out.index(py, px, ch);
                out.data_mut()[o] = x.data()[best];
                argmax[o] = best;
            }
        }
    }
    Ok((
        out,
        PoolRecord {
            input_dims: (h, w, c),
            k,
            argmax,
        },
    ))
}

/// Routes each pooled gradient back to its recorded winner.
pub fn max_pool_backward(record: &PoolRecord, upstream: &FeatureMap) -> Result<FeatureMap> {
    let (h, w, c) = record.input_dims;
    let k = record.k;
    if upstream.dims() != (h / k, w / k, c) {
        return shape_err(format!(
            "max_pool_backward: upstream {:?} does not match pooled {:?}",
            upstream.dims(),
            (h / k, w / k, c)
        ));
    }
    let mut grad = FeatureMap::zeros(h, w, c);
    for (&at, &g) in record.argmax.iter().zip(upstream.data()) {
        grad.data_mut()[at] += g;
    }
    Ok(grad)
}

/// Mean per-pixel cross-entropy over non-ignored pixels and its gradient.
///
/// When every pixel carries [`IGNORE_INDEX`] the loss and gradient are zero.
pub fn softmax_xent(logits: &FeatureMap, labels: &LabelMap) -> Result<(f64, FeatureMap)> {
    let (h, w, k) = logits.dims();
    if labels.height() != h || labels.width() != w {
        return shape_err(format!(
            "softmax_xent: labels {}x{} vs logits {h}x{w}",
            labels.height(),
            labels.width()
        ));
    }
    let mut grad = FeatureMap::zeros(h, w, k);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let label = labels.get(y, x);
            if label == IGNORE_INDEX {
                continue;
            }
            let label = label as usize;
            if label >= k {
                return param_err(format!("label {label} outside [0, {k})"));
            }
            let z = logits.pixel(y, x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            total += log_norm - z[label];
            let g = grad.pixel_mut(y, x);
            for (gi, &zi) in g.iter_mut().zip(z) {
                *gi = (zi - log_norm).exp();
            }
            g[label] -= 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

/// One momentum-SGD update: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) {
        return param_err(format!("learning rate must be positive, got {lr}"));
    }
    if !(0.0..1.0).contains(&momentum) {
        return param_err(format!("momentum must lie in [0, 1), got {momentum}"));
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        return shape_err(format!(
            "sgd_step: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}
