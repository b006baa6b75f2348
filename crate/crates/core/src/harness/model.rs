//! Small stride-1 CNNs standing in for teacher and student backbones.

use crate::error::{param_err, Result};
use crate::nn::{
    conv2d, conv2d_grad, relu_map, relu_map_grad, sgd_step, ConvLayer, PointwiseLayer,
};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, LabelMap};

/// `layers` convolutions of `channels` outputs, each followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub channels: usize,
    pub layers: usize,
}

/// Convolution stack, feature tap after the last ReLU, pointwise classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    convs: Vec<ConvLayer>,
    classifier: PointwiseLayer,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub features: FeatureMap,
    pub logits: FeatureMap,
}

/// Per-layer inputs and pre-activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ModelCache {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    features: FeatureMap,
}

impl ToyModel {
    /// He-uniform kernels, zero biases.
    pub fn init(in_channels: usize, arch: ArchSpec, classes: usize, rng: &mut Rng) -> Result<Self> {
        if arch.layers == 0 || arch.channels == 0 || in_channels == 0 || classes < 2 {
            return param_err("model needs at least one layer, positive widths and two classes");
        }
        let mut convs = Vec::with_capacity(arch.layers);
        let mut cin = in_channels;
        for _ in 0..arch.layers {
            let bound = (6.0 / (9.0 * cin as f64)).sqrt();
            convs.push(ConvLayer::uniform(arch.channels, cin, bound, rng));
            cin = arch.channels;
        }
        let classifier = PointwiseLayer::uniform(classes, cin, (6.0 / cin as f64).sqrt(), rng);
        Ok(Self { convs, classifier })
    }

    pub fn feature_channels(&self) -> usize {
        self.classifier.in_channels()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<ModelOutput> {
        let mut x = image.clone();
        for conv in &self.convs {
            x = relu_map(&conv2d(&x, conv)?);
        }
        let logits = self.classifier.forward(&x)?;
        Ok(ModelOutput { features: x, logits })
    }

    pub fn forward_cached(&self, image: &FeatureMap) -> Result<(ModelOutput, ModelCache)> {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for conv in &self.convs {
            let z = conv2d(&x, conv)?;
            inputs.push(x);
            x = relu_map(&z);
            pre.push(z);
        }
        let logits = self.classifier.forward(&x)?;
        let out = ModelOutput {
            features: x.clone(),
            logits,
        };
        Ok((
            out,
            ModelCache {
                inputs,
                pre,
                features: x,
            },
        ))
    }

    /// Gradients in [`ToyModel::params_mut`] order. `feature_grad` is extra
    /// upstream gradient arriving at the feature tap.
    pub fn backward(&self, cache: &ModelCache, logits_grad: &FeatureMap, feature_grad: Option<&FeatureMap>) -> Result<Vec<Vec<f64>>> {
        let head = self.classifier.backward(&cache.features, logits_grad)?;
        let mut upstream = head.input;
        if let Some(extra) = feature_grad {
            upstream.add_scaled(extra, 1.0)?;
        }
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let through_relu = relu_map_grad(&cache.pre[i], &upstream)?;
            let g = conv2d_grad(&cache.inputs[i], conv, &through_relu)?;
            upstream = g.input;
            conv_grads.push((g.kernel.into_data(), g.bias.into_data()));
        }
        conv_grads.reverse();
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for (k, b) in conv_grads {
            out.push(k);
            out.push(b);
        }
        out.push(head.weight.into_data());
        out.push(head.bias.into_data());
        Ok(out)
    }

    /// Kernel, bias per conv layer, then classifier weight and bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.convs.len() + 2);
        for conv in &mut self.convs {
            let (k, b) = conv.params_mut();
            out.push(k);
            out.push(b);
        }
        let (w, b) = self.classifier.params_mut();
        out.push(w);
        out.push(b);
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for conv in &self.convs {
            out.push(conv.kernel().len());
            out.push(conv.bias().len());
        }
        out.push(self.classifier.weight().len());
        out.push(self.classifier.bias().len());
        out
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<LabelMap> {
        Ok(argmax_labels(&self.forward(image)?.logits))
    }
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn argmax_labels(logits: &FeatureMap) -> LabelMap {
    let (h, w, _) = logits.dims();
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let z = logits.pixel(y, x);
            let mut best = 0;
            for (c, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = c;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    out
}

/// Momentum SGD over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            momentum,
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return crate::error::shape_err("optimizer parameter lists differ in length");
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

/// `acc += g` tensor by tensor.
pub fn accumulate(acc: &mut [Vec<f64>], grads: &[Vec<f64>]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += y;
        }
    }
}

pub fn scale(grads: &mut [Vec<f64>], s: f64) {
    for g in grads.iter_mut().flat_map(|v| v.iter_mut()) {
        *g *= s;
    }
}
