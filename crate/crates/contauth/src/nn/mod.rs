//! Small feed-forward network toolkit: batched layers with explicit forward
//! caches, hand-derived backward passes, tangent propagation for Jacobians,
//! and an adaptive-moment optimizer.
//!
//! Caches are externalized so one network can run several forward passes per
//! iteration (the adversarial loop needs that) and backpropagate each
//! independently, accumulating into one gradient store.

pub mod kernels;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    attention_backward_cached, attention_forward_cached, attention_jvp, AttentionCache,
    AttentionConfig, AttentionParams,
};
use crate::error::{Error, Result};
use kernels::*;

const BN_EPS: f64 = 1e-5;

/// Activation value flowing between layers: batched 2D maps or flat features.
#[derive(Debug, Clone)]
pub enum Value {
    /// `(batch, channels, height, width)`
    Map(Array4<f64>),
    /// `(batch, features)`
    Features(Array2<f64>),
}

impl Value {
    pub fn batch_len(&self) -> usize {
        match self {
            Value::Map(m) => m.dim().0,
            Value::Features(f) => f.dim().0,
        }
    }

    pub fn as_map(&self) -> Result<&Array4<f64>> {
        match self {
            Value::Map(m) => Ok(m),
            Value::Features(_) => Err(Error::config("expected a 2D feature map, got flat features")),
        }
    }

    pub fn as_features(&self) -> Result<&Array2<f64>> {
        match self {
            Value::Features(f) => Ok(f),
            Value::Map(_) => Err(Error::config("expected flat features, got a 2D feature map")),
        }
    }

    pub fn into_map(self) -> Result<Array4<f64>> {
        match self {
            Value::Map(m) => Ok(m),
            Value::Features(_) => Err(Error::config("expected a 2D feature map, got flat features")),
        }
    }

    pub fn into_features(self) -> Result<Array2<f64>> {
        match self {
            Value::Features(f) => Ok(f),
            Value::Map(_) => Err(Error::config("expected flat features, got a 2D feature map")),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Value::Map(m) => m.iter().all(|v| v.is_finite()),
            Value::Features(f) => f.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
    /// `(out_channels, in_channels * kh * kw)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            in_channels: in_c,
            out_channels: out_c,
            geom: ConvGeometry::new(kernel, kernel, stride, padding),
            weights: Array2::zeros((out_c, in_c * kernel * kernel)),
            bias: Array1::zeros(out_c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TConv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
    pub output_padding: (usize, usize),
    /// `(out_channels * kh * kw, in_channels)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TConv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    ) -> Self {
        TConv2d {
            in_channels: in_c,
            out_channels: out_c,
            geom: ConvGeometry::new(kernel, kernel, stride, padding),
            output_padding,
            weights: Array2::zeros((out_c * kernel * kernel, in_c)),
            bias: Array1::zeros(out_c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize) -> Self {
        Linear {
            in_features: in_f,
            out_features: out_f,
            weights: Array2::zeros((out_f, in_f)),
            bias: Array1::zeros(out_f),
        }
    }
}

/// Batch normalization over `(N, H, W)` per channel (maps) or over `N` per
/// feature (flat features). Running statistics feed inference mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub size: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(size: usize) -> Self {
        BatchNorm {
            size,
            gamma: Array1::ones(size),
            beta: Array1::zeros(size),
            running_mean: Array1::zeros(size),
            running_var: Array1::ones(size),
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub config: AttentionConfig,
    pub params: AttentionParams,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    TConv(TConv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Attention(AttnLayer),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
    /// Mean over the spatial extent per channel: map -> features.
    GlobalAvgPool,
    /// Features -> map of the given `(channels, height, width)`.
    Reshape(usize, usize, usize),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::TConv(_) => "tconv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Attention(_) => "attention",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Tanh => "tanh",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Reshape(..) => "reshape",
        }
    }

    pub fn trainable_parameters(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::TConv(c) => c.weights.len() + c.bias.len(),
            Layer::Linear(l) => l.weights.len() + l.bias.len(),
            Layer::BatchNorm(b) => b.gamma.len() + b.beta.len(),
            Layer::Attention(a) => a.params.parameter_count(),
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward caches
// ---------------------------------------------------------------------------

pub enum LayerCache {
    Conv { input: Array4<f64> },
    TConv { input: Array4<f64> },
    Linear { input: Array2<f64> },
    BatchNormMap { xhat: Array4<f64>, inv_std: Array1<f64> },
    BatchNormFeat { xhat: Array2<f64>, inv_std: Array1<f64> },
    /// Inference-mode normalization needs only the per-channel scale.
    BatchNormInfer { scale: Array1<f64>, is_map: bool },
    Attention { input: Array4<f64>, per_sample: Vec<AttentionCache> },
    Elementwise { output: Value },
    /// Leaky ReLU keeps the pre-activation sign pattern.
    Mask { positive: Vec<bool>, is_map: bool },
    Pool { in_dims: (usize, usize, usize, usize) },
    None,
}

// ---------------------------------------------------------------------------
// Gradient store
// ---------------------------------------------------------------------------

pub enum LayerGrads {
    Pair { weights: Array2<f64>, bias: Array1<f64> },
    Norm { gamma: Array1<f64>, beta: Array1<f64> },
    Attention(AttentionParams),
    None,
}

pub struct NetworkGrads(pub Vec<LayerGrads>);

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        NetworkGrads(
            net.layers
                .iter()
                .map(|layer| match layer {
                    Layer::Conv(c) => LayerGrads::Pair {
                        weights: Array2::zeros(c.weights.dim()),
                        bias: Array1::zeros(c.bias.len()),
                    },
                    Layer::TConv(c) => LayerGrads::Pair {
                        weights: Array2::zeros(c.weights.dim()),
                        bias: Array1::zeros(c.bias.len()),
                    },
                    Layer::Linear(l) => LayerGrads::Pair {
                        weights: Array2::zeros(l.weights.dim()),
                        bias: Array1::zeros(l.bias.len()),
                    },
                    Layer::BatchNorm(b) => LayerGrads::Norm {
                        gamma: Array1::zeros(b.size),
                        beta: Array1::zeros(b.size),
                    },
                    Layer::Attention(a) => {
                        LayerGrads::Attention(AttentionParams::zeros(&a.config, true))
                    }
                    _ => LayerGrads::None,
                })
                .collect(),
        )
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            match g {
                LayerGrads::Pair { weights, bias } => {
                    weights.fill(0.0);
                    bias.fill(0.0);
                }
                LayerGrads::Norm { gamma, beta } => {
                    gamma.fill(0.0);
                    beta.fill(0.0);
                }
                LayerGrads::Attention(p) => {
                    p.query_weights.fill(0.0);
                    p.key_weights.fill(0.0);
                    p.value_weights.fill(0.0);
                    for b in [&mut p.query_bias, &mut p.key_bias, &mut p.value_bias] {
                        if let Some(b) = b {
                            b.fill(0.0);
                        }
                    }
                }
                LayerGrads::None => {}
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batched helpers
// ---------------------------------------------------------------------------

fn map_batch<F>(x: &Array4<f64>, f: F) -> Array4<f64>
where
    F: Fn(ArrayView3<f64>) -> Array3<f64> + Sync + Send,
{
    let views: Vec<ArrayView3<f64>> = x.axis_iter(Axis(0)).collect();
    let outs: Vec<Array3<f64>> = views.into_par_iter().map(f).collect();
    let (c, h, w) = outs[0].dim();
    let mut result = Array4::zeros((outs.len(), c, h, w));
    for (n, o) in outs.into_iter().enumerate() {
        result.index_axis_mut(Axis(0), n).assign(&o);
    }
    result
}

fn batch_stats_map(x: &Array4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let slice = x.index_axis(Axis(1), ch);
        let mu = slice.sum() / m;
        let v = slice.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[ch] = mu;
        var[ch] = v;
    }
    (mean, var)
}

fn batch_stats_feat(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c) = x.dim();
    let m = n as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let col = x.index_axis(Axis(1), ch);
        let mu = col.sum() / m;
        let v = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[ch] = mu;
        var[ch] = v;
    }
    (mean, var)
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// A sequential stack of layers. Training forward updates normalization
/// running statistics and therefore needs exclusive access; inference
/// forward is pure.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn trainable_parameters(&self) -> usize {
        self.layers.iter().map(Layer::trainable_parameters).sum()
    }

    pub fn forward_train(&mut self, input: &Value) -> Result<(Value, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer_forward(layer, &x, Mode::Train)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn forward_infer(&self, input: &Value) -> Result<(Value, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        // Inference never mutates; the small clone dance keeps the signature
        // immutable while reusing the single forward implementation.
        for layer in &self.layers {
            let mut tmp = layer.clone_lightweight();
            let (y, cache) = layer_forward(&mut tmp, &x, Mode::Infer)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagate `upstream` through the stack given the caches of the
    /// matching forward pass. Parameter gradients accumulate into `grads`.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        upstream: Value,
        grads: &mut NetworkGrads,
    ) -> Result<Value> {
        let mut dy = upstream;
        for ((layer, cache), grad) in self
            .layers
            .iter()
            .zip(caches.iter())
            .zip(grads.0.iter_mut())
            .rev()
        {
            dy = layer_backward(layer, cache, dy, grad)?;
        }
        Ok(dy)
    }

    /// Propagate a batch of tangent vectors through the linearization of the
    /// stack at the point captured by `caches` (from an inference forward
    /// with batch size 1).
    pub fn jvp(&self, caches: &[LayerCache], tangents: Value) -> Result<Value> {
        let mut t = tangents;
        for (layer, cache) in self.layers.iter().zip(caches.iter()) {
            t = layer_jvp(layer, cache, t)?;
        }
        Ok(t)
    }
}

impl Layer {
    /// Clone that shares nothing mutable-relevant; used by the inference
    /// path, where running statistics are read but never written.
    fn clone_lightweight(&self) -> Layer {
        self.clone()
    }
}

// ---------------------------------------------------------------------------
// Per-layer forward
// ---------------------------------------------------------------------------

fn layer_forward(layer: &mut Layer, x: &Value, mode: Mode) -> Result<(Value, LayerCache)> {
    match layer {
        Layer::Conv(conv) => {
            let input = x.as_map()?;
            if input.dim().1 != conv.in_channels {
                return Err(Error::config(format!(
                    "conv expects {} input channels, got {}",
                    conv.in_channels,
                    input.dim().1
                )));
            }
            let w = conv.weights.view();
            let bias = conv.bias.as_slice().unwrap();
            let geom = conv.geom;
            let out = map_batch(input, |s| conv_forward(s, w, Some(bias), &geom));
            Ok((Value::Map(out), LayerCache::Conv { input: input.clone() }))
        }
        Layer::TConv(tc) => {
            let input = x.as_map()?;
            let w = tc.weights.view();
            let bias = tc.bias.as_slice().unwrap();
            let (geom, oc, op) = (tc.geom, tc.out_channels, tc.output_padding);
            let out = map_batch(input, |s| tconv_forward(s, w, Some(bias), &geom, oc, op));
            Ok((Value::Map(out), LayerCache::TConv { input: input.clone() }))
        }
        Layer::Linear(lin) => {
            let input = x.as_features()?;
            if input.dim().1 != lin.in_features {
                return Err(Error::config(format!(
                    "linear expects {} input features, got {}",
                    lin.in_features,
                    input.dim().1
                )));
            }
            let mut out = input.dot(&lin.weights.t());
            for mut row in out.rows_mut() {
                row += &lin.bias;
            }
            Ok((Value::Features(out), LayerCache::Linear { input: input.clone() }))
        }
        Layer::BatchNorm(bn) => batchnorm_forward(bn, x, mode),
        Layer::Attention(attn) => {
            let input = x.as_map()?;
            let views: Vec<ArrayView3<f64>> = input.axis_iter(Axis(0)).collect();
            let results: Vec<Result<(Array3<f64>, AttentionCache)>> = views
                .into_par_iter()
                .map(|s| attention_forward_cached(s, &attn.params, &attn.config))
                .collect();
            let mut outs = Vec::with_capacity(results.len());
            let mut sample_caches = Vec::with_capacity(results.len());
            for r in results {
                let (o, c) = r?;
                outs.push(o);
                sample_caches.push(c);
            }
            let (c, h, w) = outs[0].dim();
            let mut out = Array4::zeros((outs.len(), c, h, w));
            for (n, o) in outs.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), n).assign(&o);
            }
            Ok((
                Value::Map(out),
                LayerCache::Attention { input: input.clone(), per_sample: sample_caches },
            ))
        }
        Layer::LeakyRelu(slope) => {
            let s = *slope;
            let (out, positive, is_map) = match x {
                Value::Map(m) => {
                    let positive: Vec<bool> = m.iter().map(|&v| v > 0.0).collect();
                    (Value::Map(m.mapv(|v| if v > 0.0 { v } else { s * v })), positive, true)
                }
                Value::Features(f) => {
                    let positive: Vec<bool> = f.iter().map(|&v| v > 0.0).collect();
                    (
                        Value::Features(f.mapv(|v| if v > 0.0 { v } else { s * v })),
                        positive,
                        false,
                    )
                }
            };
            Ok((out, LayerCache::Mask { positive, is_map }))
        }
        Layer::Relu => {
            let (out, positive, is_map) = match x {
                Value::Map(m) => {
                    let positive: Vec<bool> = m.iter().map(|&v| v > 0.0).collect();
                    (Value::Map(m.mapv(|v| v.max(0.0))), positive, true)
                }
                Value::Features(f) => {
                    let positive: Vec<bool> = f.iter().map(|&v| v > 0.0).collect();
                    (Value::Features(f.mapv(|v| v.max(0.0))), positive, false)
                }
            };
            Ok((out, LayerCache::Mask { positive, is_map }))
        }
        Layer::Sigmoid => {
            let out = match x {
                Value::Map(m) => Value::Map(m.mapv(sigmoid)),
                Value::Features(f) => Value::Features(f.mapv(sigmoid)),
            };
            Ok((out.clone(), LayerCache::Elementwise { output: out }))
        }
        Layer::Tanh => {
            let out = match x {
                Value::Map(m) => Value::Map(m.mapv(f64::tanh)),
                Value::Features(f) => Value::Features(f.mapv(f64::tanh)),
            };
            Ok((out.clone(), LayerCache::Elementwise { output: out }))
        }
        Layer::GlobalAvgPool => {
            let input = x.as_map()?;
            let (n, c, h, w) = input.dim();
            let mut out = Array2::zeros((n, c));
            let denom = (h * w) as f64;
            for b in 0..n {
                for ch in 0..c {
                    out[(b, ch)] = input.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum()
                        / denom;
                }
            }
            Ok((Value::Features(out), LayerCache::Pool { in_dims: (n, c, h, w) }))
        }
        Layer::Reshape(c, h, w) => {
            let input = x.as_features()?;
            let n = input.dim().0;
            if input.dim().1 != *c * *h * *w {
                return Err(Error::config(format!(
                    "reshape expects {} features, got {}",
                    *c * *h * *w,
                    input.dim().1
                )));
            }
            let out = input
                .to_owned()
                .into_shape_with_order((n, *c, *h, *w))
                .unwrap();
            Ok((Value::Map(out), LayerCache::None))
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn batchnorm_forward(bn: &mut BatchNorm, x: &Value, mode: Mode) -> Result<(Value, LayerCache)> {
    match (x, mode) {
        (Value::Map(m), Mode::Train) => {
            let (mean, var) = batch_stats_map(m);
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let mut xhat = m.clone();
            for ((mut plane, (&mu, &is)), _) in xhat
                .axis_iter_mut(Axis(1))
                .zip(mean.iter().zip(inv_std.iter()))
                .zip(0..)
            {
                plane.mapv_inplace(|v| (v - mu) * is);
            }
            let mut out = xhat.clone();
            for (mut plane, (&g, &b)) in out
                .axis_iter_mut(Axis(1))
                .zip(bn.gamma.iter().zip(bn.beta.iter()))
            {
                plane.mapv_inplace(|v| g * v + b);
            }
            bn.running_mean = bn.momentum * &bn.running_mean + (1.0 - bn.momentum) * &mean;
            bn.running_var = bn.momentum * &bn.running_var + (1.0 - bn.momentum) * &var;
            Ok((Value::Map(out), LayerCache::BatchNormMap { xhat, inv_std }))
        }
        (Value::Features(f), Mode::Train) => {
            let (mean, var) = batch_stats_feat(f);
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let mut xhat = f.clone();
            for mut row in xhat.rows_mut() {
                for (v, (&mu, &is)) in row.iter_mut().zip(mean.iter().zip(inv_std.iter())) {
                    *v = (*v - mu) * is;
                }
            }
            let mut out = xhat.clone();
            for mut row in out.rows_mut() {
                for (v, (&g, &b)) in row.iter_mut().zip(bn.gamma.iter().zip(bn.beta.iter())) {
                    *v = g * *v + b;
                }
            }
            bn.running_mean = bn.momentum * &bn.running_mean + (1.0 - bn.momentum) * &mean;
            bn.running_var = bn.momentum * &bn.running_var + (1.0 - bn.momentum) * &var;
            Ok((Value::Features(out), LayerCache::BatchNormFeat { xhat, inv_std }))
        }
        (x, Mode::Infer) => {
            let scale = bn
                .gamma
                .iter()
                .zip(bn.running_var.iter())
                .map(|(&g, &v)| g / (v + BN_EPS).sqrt())
                .collect::<Array1<f64>>();
            let shift: Array1<f64> = bn
                .beta
                .iter()
                .zip(bn.running_mean.iter().zip(scale.iter()))
                .map(|(&b, (&m, &s))| b - m * s)
                .collect();
            match x {
                Value::Map(m) => {
                    let mut out = m.clone();
                    for (mut plane, (&s, &sh)) in out
                        .axis_iter_mut(Axis(1))
                        .zip(scale.iter().zip(shift.iter()))
                    {
                        plane.mapv_inplace(|v| s * v + sh);
                    }
                    Ok((Value::Map(out), LayerCache::BatchNormInfer { scale, is_map: true }))
                }
                Value::Features(f) => {
                    let mut out = f.clone();
                    for mut row in out.rows_mut() {
                        for (v, (&s, &sh)) in row.iter_mut().zip(scale.iter().zip(shift.iter())) {
                            *v = s * *v + sh;
                        }
                    }
                    Ok((
                        Value::Features(out),
                        LayerCache::BatchNormInfer { scale, is_map: false },
                    ))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-layer backward
// ---------------------------------------------------------------------------

fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    upstream: Value,
    grads: &mut LayerGrads,
) -> Result<Value> {
    match (layer, cache) {
        (Layer::Conv(conv), LayerCache::Conv { input }) => {
            let dy = upstream.into_map()?;
            let (_, c, h, w) = input.dim();
            let geom = conv.geom;
            let wv = conv.weights.view();
            let dx = {
                let views: Vec<ArrayView3<f64>> = dy.axis_iter(Axis(0)).collect();
                let outs: Vec<Array3<f64>> = views
                    .into_par_iter()
                    .map(|g| conv_backward_input(g, wv, &geom, c, h, w))
                    .collect();
                stack_maps(outs)
            };
            let per_sample: Vec<(Array2<f64>, Vec<f64>)> = input
                .axis_iter(Axis(0))
                .collect::<Vec<_>>()
                .into_par_iter()
                .zip(dy.axis_iter(Axis(0)).collect::<Vec<_>>())
                .map(|(xs, gs)| {
                    (
                        conv_backward_weights(xs, gs, &geom),
                        conv_backward_bias(gs),
                    )
                })
                .collect();
            if let LayerGrads::Pair { weights, bias } = grads {
                for (dw, db) in per_sample {
                    *weights += &dw;
                    for (b, d) in bias.iter_mut().zip(db.iter()) {
                        *b += d;
                    }
                }
            }
            Ok(Value::Map(dx))
        }
        (Layer::TConv(tc), LayerCache::TConv { input }) => {
            let dy = upstream.into_map()?;
            let (_, _, ih, iw) = input.dim();
            let geom = tc.geom;
            let wv = tc.weights.view();
            let dx = {
                let views: Vec<ArrayView3<f64>> = dy.axis_iter(Axis(0)).collect();
                let outs: Vec<Array3<f64>> = views
                    .into_par_iter()
                    .map(|g| tconv_backward_input(g, wv, &geom, ih, iw))
                    .collect();
                stack_maps(outs)
            };
            let per_sample: Vec<(Array2<f64>, Vec<f64>)> = input
                .axis_iter(Axis(0))
                .collect::<Vec<_>>()
                .into_par_iter()
                .zip(dy.axis_iter(Axis(0)).collect::<Vec<_>>())
                .map(|(xs, gs)| {
                    (
                        tconv_backward_weights(xs, gs, &geom),
                        conv_backward_bias(gs),
                    )
                })
                .collect();
            if let LayerGrads::Pair { weights, bias } = grads {
                for (dw, db) in per_sample {
                    *weights += &dw;
                    for (b, d) in bias.iter_mut().zip(db.iter()) {
                        *b += d;
                    }
                }
            }
            Ok(Value::Map(dx))
        }
        (Layer::Linear(lin), LayerCache::Linear { input }) => {
            let dy = upstream.into_features()?;
            let dx = dy.dot(&lin.weights);
            if let LayerGrads::Pair { weights, bias } = grads {
                *weights += &dy.t().dot(input);
                for (b, col) in bias.iter_mut().zip(dy.axis_iter(Axis(1))) {
                    *b += col.sum();
                }
            }
            Ok(Value::Features(dx))
        }
        (Layer::BatchNorm(bn), LayerCache::BatchNormMap { xhat, inv_std }) => {
            let dy = upstream.into_map()?;
            let (n, c, h, w) = dy.dim();
            let m = (n * h * w) as f64;
            let mut dx = Array4::zeros((n, c, h, w));
            if let LayerGrads::Norm { gamma, beta } = grads {
                for ch in 0..c {
                    let dyc = dy.index_axis(Axis(1), ch);
                    let xc = xhat.index_axis(Axis(1), ch);
                    let sum_dy = dyc.sum();
                    let sum_dy_xhat = dyc.iter().zip(xc.iter()).map(|(a, b)| a * b).sum::<f64>();
                    gamma[ch] += sum_dy_xhat;
                    beta[ch] += sum_dy;
                    let g = bn.gamma[ch];
                    let is = inv_std[ch];
                    let mut dxc = dx.index_axis_mut(Axis(1), ch);
                    for ((d, &dyv), &xv) in dxc.iter_mut().zip(dyc.iter()).zip(xc.iter()) {
                        *d = g * is / m * (m * dyv - sum_dy - xv * sum_dy_xhat);
                    }
                }
            }
            Ok(Value::Map(dx))
        }
        (Layer::BatchNorm(bn), LayerCache::BatchNormFeat { xhat, inv_std }) => {
            let dy = upstream.into_features()?;
            let (n, c) = dy.dim();
            let m = n as f64;
            let mut dx = Array2::zeros((n, c));
            if let LayerGrads::Norm { gamma, beta } = grads {
                for ch in 0..c {
                    let dyc = dy.index_axis(Axis(1), ch);
                    let xc = xhat.index_axis(Axis(1), ch);
                    let sum_dy = dyc.sum();
                    let sum_dy_xhat = dyc.iter().zip(xc.iter()).map(|(a, b)| a * b).sum::<f64>();
                    gamma[ch] += sum_dy_xhat;
                    beta[ch] += sum_dy;
                    let g = bn.gamma[ch];
                    let is = inv_std[ch];
                    for b in 0..n {
                        dx[(b, ch)] =
                            g * is / m * (m * dy[(b, ch)] - sum_dy - xhat[(b, ch)] * sum_dy_xhat);
                    }
                }
            }
            Ok(Value::Features(dx))
        }
        (Layer::BatchNorm(_), LayerCache::BatchNormInfer { scale, is_map }) => {
            // Inference backward: the normalization is a fixed affine map.
            if *is_map {
                let mut dy = upstream.into_map()?;
                for (mut plane, &s) in dy.axis_iter_mut(Axis(1)).zip(scale.iter()) {
                    plane.mapv_inplace(|v| v * s);
                }
                Ok(Value::Map(dy))
            } else {
                let mut dy = upstream.into_features()?;
                for mut row in dy.rows_mut() {
                    for (v, &s) in row.iter_mut().zip(scale.iter()) {
                        *v *= s;
                    }
                }
                Ok(Value::Features(dy))
            }
        }
        (Layer::Attention(attn), LayerCache::Attention { input, per_sample }) => {
            let dy = upstream.into_map()?;
            let inputs: Vec<ArrayView3<f64>> = input.axis_iter(Axis(0)).collect();
            let dys: Vec<ArrayView3<f64>> = dy.axis_iter(Axis(0)).collect();
            let results: Vec<Result<(Array3<f64>, AttentionParams)>> = inputs
                .into_par_iter()
                .zip(dys)
                .zip(per_sample.par_iter())
                .map(|((xs, gs), cache)| {
                    attention_backward_cached(xs, &attn.params, &attn.config, cache, gs)
                })
                .collect();
            let mut dx_parts = Vec::with_capacity(results.len());
            if let LayerGrads::Attention(acc) = grads {
                for r in results {
                    let (dx, dp) = r?;
                    dx_parts.push(dx);
                    acc.query_weights += &dp.query_weights;
                    acc.key_weights += &dp.key_weights;
                    acc.value_weights += &dp.value_weights;
                    for (dst, src) in [
                        (&mut acc.query_bias, &dp.query_bias),
                        (&mut acc.key_bias, &dp.key_bias),
                        (&mut acc.value_bias, &dp.value_bias),
                    ] {
                        if let (Some(dst), Some(src)) = (dst.as_mut(), src.as_ref()) {
                            *dst += src;
                        }
                    }
                }
            } else {
                for r in results {
                    dx_parts.push(r?.0);
                }
            }
            Ok(Value::Map(stack_maps(dx_parts)))
        }
        (Layer::LeakyRelu(slope), LayerCache::Mask { positive, is_map }) => {
            Ok(apply_mask(upstream, positive, *is_map, *slope)?)
        }
        (Layer::Relu, LayerCache::Mask { positive, is_map }) => {
            Ok(apply_mask(upstream, positive, *is_map, 0.0)?)
        }
        (Layer::Sigmoid, LayerCache::Elementwise { output }) => match (upstream, output) {
            (Value::Map(mut dy), Value::Map(y)) => {
                for (d, &yv) in dy.iter_mut().zip(y.iter()) {
                    *d *= yv * (1.0 - yv);
                }
                Ok(Value::Map(dy))
            }
            (Value::Features(mut dy), Value::Features(y)) => {
                for (d, &yv) in dy.iter_mut().zip(y.iter()) {
                    *d *= yv * (1.0 - yv);
                }
                Ok(Value::Features(dy))
            }
            _ => Err(Error::config("sigmoid cache/upstream arity mismatch")),
        },
        (Layer::Tanh, LayerCache::Elementwise { output }) => match (upstream, output) {
            (Value::Map(mut dy), Value::Map(y)) => {
                for (d, &yv) in dy.iter_mut().zip(y.iter()) {
                    *d *= 1.0 - yv * yv;
                }
                Ok(Value::Map(dy))
            }
            (Value::Features(mut dy), Value::Features(y)) => {
                for (d, &yv) in dy.iter_mut().zip(y.iter()) {
                    *d *= 1.0 - yv * yv;
                }
                Ok(Value::Features(dy))
            }
            _ => Err(Error::config("tanh cache/upstream arity mismatch")),
        },
        (Layer::GlobalAvgPool, LayerCache::Pool { in_dims }) => {
            let dy = upstream.into_features()?;
            let (n, c, h, w) = *in_dims;
            let denom = (h * w) as f64;
            let mut dx = Array4::zeros((n, c, h, w));
            for b in 0..n {
                for ch in 0..c {
                    let g = dy[(b, ch)] / denom;
                    dx.index_axis_mut(Axis(0), b)
                        .index_axis_mut(Axis(0), ch)
                        .fill(g);
                }
            }
            Ok(Value::Map(dx))
        }
        (Layer::Reshape(..), LayerCache::None) => {
            let dy = upstream.into_map()?;
            let (n, c, h, w) = dy.dim();
            Ok(Value::Features(
                dy.into_shape_with_order((n, c * h * w)).unwrap(),
            ))
        }
        _ => Err(Error::config("layer/cache mismatch in backward pass")),
    }
}

fn apply_mask(upstream: Value, positive: &[bool], is_map: bool, slope: f64) -> Result<Value> {
    if is_map {
        let mut dy = upstream.into_map()?;
        for (d, &p) in dy.iter_mut().zip(positive.iter()) {
            if !p {
                *d *= slope;
            }
        }
        Ok(Value::Map(dy))
    } else {
        let mut dy = upstream.into_features()?;
        for (d, &p) in dy.iter_mut().zip(positive.iter()) {
            if !p {
                *d *= slope;
            }
        }
        Ok(Value::Features(dy))
    }
}

// ---------------------------------------------------------------------------
// Per-layer tangent propagation (inference-mode linearization)
// ---------------------------------------------------------------------------

fn layer_jvp(layer: &Layer, cache: &LayerCache, tangents: Value) -> Result<Value> {
    match (layer, cache) {
        (Layer::Conv(conv), _) => {
            let t = tangents.into_map()?;
            let w = conv.weights.view();
            let geom = conv.geom;
            Ok(Value::Map(map_batch(&t, |s| conv_forward(s, w, None, &geom))))
        }
        (Layer::TConv(tc), _) => {
            let t = tangents.into_map()?;
            let w = tc.weights.view();
            let (geom, oc, op) = (tc.geom, tc.out_channels, tc.output_padding);
            Ok(Value::Map(map_batch(&t, |s| {
                tconv_forward(s, w, None, &geom, oc, op)
            })))
        }
        (Layer::Linear(lin), _) => {
            let t = tangents.into_features()?;
            Ok(Value::Features(t.dot(&lin.weights.t())))
        }
        (Layer::BatchNorm(_), LayerCache::BatchNormInfer { scale, is_map }) => {
            if *is_map {
                let mut t = tangents.into_map()?;
                for (mut plane, &s) in t.axis_iter_mut(Axis(1)).zip(scale.iter()) {
                    plane.mapv_inplace(|v| v * s);
                }
                Ok(Value::Map(t))
            } else {
                let mut t = tangents.into_features()?;
                for mut row in t.rows_mut() {
                    for (v, &s) in row.iter_mut().zip(scale.iter()) {
                        *v *= s;
                    }
                }
                Ok(Value::Features(t))
            }
        }
        (Layer::BatchNorm(_), _) => Err(Error::config(
            "tangent propagation requires inference-mode normalization caches",
        )),
        (Layer::Attention(attn), LayerCache::Attention { per_sample, .. }) => {
            // Tangent batch rides on the batch axis; the primal pass had N=1.
            if per_sample.len() != 1 {
                return Err(Error::config(
                    "tangent propagation expects a single-sample primal pass",
                ));
            }
            let t = tangents.into_map()?;
            let tangent_maps: Vec<Array3<f64>> =
                t.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
            let outs = attention_jvp(&attn.params, &attn.config, &per_sample[0], &tangent_maps);
            Ok(Value::Map(stack_maps(outs)))
        }
        (Layer::LeakyRelu(slope), LayerCache::Mask { positive, is_map }) => {
            jvp_mask(tangents, positive, *is_map, *slope)
        }
        (Layer::Relu, LayerCache::Mask { positive, is_map }) => {
            jvp_mask(tangents, positive, *is_map, 0.0)
        }
        (Layer::Sigmoid, LayerCache::Elementwise { output }) => {
            jvp_elementwise(tangents, output, |y| y * (1.0 - y))
        }
        (Layer::Tanh, LayerCache::Elementwise { output }) => {
            jvp_elementwise(tangents, output, |y| 1.0 - y * y)
        }
        (Layer::GlobalAvgPool, LayerCache::Pool { in_dims }) => {
            let t = tangents.into_map()?;
            let (_, c, h, w) = *in_dims;
            let n = t.dim().0;
            let denom = (h * w) as f64;
            let mut out = Array2::zeros((n, c));
            for b in 0..n {
                for ch in 0..c {
                    out[(b, ch)] =
                        t.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum() / denom;
                }
            }
            Ok(Value::Features(out))
        }
        (Layer::Reshape(c, h, w), _) => {
            let t = tangents.into_features()?;
            let n = t.dim().0;
            Ok(Value::Map(
                t.into_shape_with_order((n, *c, *h, *w)).unwrap(),
            ))
        }
        _ => Err(Error::config("layer/cache mismatch in tangent propagation")),
    }
}

fn jvp_mask(tangents: Value, positive: &[bool], is_map: bool, slope: f64) -> Result<Value> {
    // The primal mask is per-element of the single primal sample; tangents
    // broadcast over it.
    match tangents {
        Value::Map(mut t) => {
            let n = t.dim().0;
            let per = t.len() / n;
            debug_assert_eq!(per, positive.len());
            debug_assert!(is_map);
            for b in 0..n {
                let mut sample = t.index_axis_mut(Axis(0), b);
                for (d, &p) in sample.iter_mut().zip(positive.iter()) {
                    if !p {
                        *d *= slope;
                    }
                }
            }
            Ok(Value::Map(t))
        }
        Value::Features(mut t) => {
            let n = t.dim().0;
            let per = t.len() / n;
            debug_assert_eq!(per, positive.len());
            debug_assert!(!is_map);
            for b in 0..n {
                let mut row = t.row_mut(b);
                for (d, &p) in row.iter_mut().zip(positive.iter()) {
                    if !p {
                        *d *= slope;
                    }
                }
            }
            Ok(Value::Features(t))
        }
    }
}

fn jvp_elementwise(tangents: Value, primal_out: &Value, deriv: fn(f64) -> f64) -> Result<Value> {
    match (tangents, primal_out) {
        (Value::Map(mut t), Value::Map(y)) => {
            let n = t.dim().0;
            let y = y.index_axis(Axis(0), 0);
            for b in 0..n {
                let mut sample = t.index_axis_mut(Axis(0), b);
                for (d, &yv) in sample.iter_mut().zip(y.iter()) {
                    *d *= deriv(yv);
                }
            }
            Ok(Value::Map(t))
        }
        (Value::Features(mut t), Value::Features(y)) => {
            let n = t.dim().0;
            let y = y.row(0);
            for b in 0..n {
                let mut row = t.row_mut(b);
                for (d, &yv) in row.iter_mut().zip(y.iter()) {
                    *d *= deriv(yv);
                }
            }
            Ok(Value::Features(t))
        }
        _ => Err(Error::config("elementwise jvp arity mismatch")),
    }
}

fn stack_maps(maps: Vec<Array3<f64>>) -> Array4<f64> {
    let (c, h, w) = maps[0].dim();
    let mut out = Array4::zeros((maps.len(), c, h, w));
    for (n, m) in maps.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), n).assign(&m);
    }
    out
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Fan-based uniform init, all tensors drawn from one seeded stream in layer
/// order so the same seed reproduces identical parameters.
pub fn init_network(net: &mut Network, rng: &mut ChaCha8Rng) {
    for layer in &mut net.layers {
        match layer {
            Layer::Conv(c) => {
                let fan_in = c.weights.dim().1 as f64;
                let bound = 1.0 / fan_in.sqrt();
                c.weights.mapv_inplace(|_| rng.random_range(-bound..bound));
                c.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
            }
            Layer::TConv(c) => {
                let k2 = c.geom.kernel_h * c.geom.kernel_w;
                let fan_in = (c.in_channels * k2) as f64;
                let bound = 1.0 / fan_in.sqrt();
                c.weights.mapv_inplace(|_| rng.random_range(-bound..bound));
                c.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
            }
            Layer::Linear(l) => {
                let fan_in = l.in_features as f64;
                let bound = 1.0 / fan_in.sqrt();
                l.weights.mapv_inplace(|_| rng.random_range(-bound..bound));
                l.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
            }
            Layer::Attention(a) => {
                let k2 = a.config.projection_kernel * a.config.projection_kernel;
                let fan_in = (a.config.in_channels * k2) as f64;
                let bound = 1.0 / fan_in.sqrt();
                for w in [
                    &mut a.params.query_weights,
                    &mut a.params.key_weights,
                    &mut a.params.value_weights,
                ] {
                    w.mapv_inplace(|_| rng.random_range(-bound..bound));
                }
                for b in [
                    &mut a.params.query_bias,
                    &mut a.params.key_bias,
                    &mut a.params.value_bias,
                ] {
                    if let Some(b) = b {
                        b.mapv_inplace(|_| rng.random_range(-bound..bound));
                    }
                }
            }
            // Batch norm starts at identity: scale 1, shift 0.
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment gradient descent with decay rates (0.5, 0.999).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        let sizes: Vec<usize> = net.layers.iter().map(Layer::state_len).collect();
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &NetworkGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((layer, grad), (m, v)) in net
            .layers
            .iter_mut()
            .zip(grads.0.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut offset = 0;
            layer.visit_params_with_grads(grad, |param, g| {
                for (p, &gi) in param.iter_mut().zip(g.iter()) {
                    let mi = &mut m[offset];
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    let vi = &mut v[offset];
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    offset += 1;
                }
            });
        }
    }
}

impl Layer {
    fn state_len(&self) -> usize {
        self.trainable_parameters()
    }

    /// Zip mutable parameter slices with the matching gradient slices, in a
    /// fixed order shared by the optimizer state.
    fn visit_params_with_grads(
        &mut self,
        grads: &LayerGrads,
        mut f: impl FnMut(&mut [f64], &[f64]),
    ) {
        match (self, grads) {
            (Layer::Conv(c), LayerGrads::Pair { weights, bias }) => {
                f(c.weights.as_slice_mut().unwrap(), weights.as_slice().unwrap());
                f(c.bias.as_slice_mut().unwrap(), bias.as_slice().unwrap());
            }
            (Layer::TConv(c), LayerGrads::Pair { weights, bias }) => {
                f(c.weights.as_slice_mut().unwrap(), weights.as_slice().unwrap());
                f(c.bias.as_slice_mut().unwrap(), bias.as_slice().unwrap());
            }
            (Layer::Linear(l), LayerGrads::Pair { weights, bias }) => {
                f(l.weights.as_slice_mut().unwrap(), weights.as_slice().unwrap());
                f(l.bias.as_slice_mut().unwrap(), bias.as_slice().unwrap());
            }
            (Layer::BatchNorm(b), LayerGrads::Norm { gamma, beta }) => {
                f(b.gamma.as_slice_mut().unwrap(), gamma.as_slice().unwrap());
                f(b.beta.as_slice_mut().unwrap(), beta.as_slice().unwrap());
            }
            (Layer::Attention(a), LayerGrads::Attention(g)) => {
                f(
                    a.params.query_weights.as_slice_mut().unwrap(),
                    g.query_weights.as_slice().unwrap(),
                );
                f(
                    a.params.key_weights.as_slice_mut().unwrap(),
                    g.key_weights.as_slice().unwrap(),
                );
                f(
                    a.params.value_weights.as_slice_mut().unwrap(),
                    g.value_weights.as_slice().unwrap(),
                );
                for (p, gb) in [
                    (&mut a.params.query_bias, &g.query_bias),
                    (&mut a.params.key_bias, &g.key_bias),
                    (&mut a.params.value_bias, &g.value_bias),
                ] {
                    if let (Some(p), Some(gb)) = (p.as_mut(), gb.as_ref()) {
                        f(p.as_slice_mut().unwrap(), gb.as_slice().unwrap());
                    }
                }
            }
            _ => {}
        }
    }
}
