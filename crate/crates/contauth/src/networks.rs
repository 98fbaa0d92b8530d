//! The four networks of the one-class adversarial autoencoder: encoder,
//! decoder, latent discriminator and sample discriminator, described by a
//! serializable [`NetworkSpec`] and instantiated as layer stacks.
//!
//! The shipped default follows the layer inventory: the encoder stacks three
//! convolutions with three relative attention layers, the decoder three
//! transposed convolutions with two relative attention layers, the latent
//! discriminator six linear layers, and the sample discriminator four
//! convolutions with three relative attention layers. Batch normalization
//! and leaky ReLU follow each block unless noted.

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{init_network, AttnLayer, BatchNorm, Conv2d, Layer, Linear, Network, TConv2d, Value};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Latent representation produced by the encoder; every component lies in
/// the open interval (-1, 1) thanks to the tanh head.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Array1<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    Tanh,
}

/// One step of a network stack: a primitive op, optionally followed by
/// batch normalization and an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub op: OpDesc,
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    TConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    },
    Attention {
        in_channels: usize,
        out_channels: usize,
        neighborhood: usize,
        projection_kernel: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    GlobalAvgPool,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerStep {
    fn plain(op: OpDesc) -> Self {
        LayerStep {
            op,
            norm: false,
            activation: None,
        }
    }

    fn normed(op: OpDesc, activation: Activation) -> Self {
        LayerStep {
            op,
            norm: true,
            activation: Some(activation),
        }
    }
}

/// Architecture of all four networks plus the input geometry they serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub latent_dim: usize,
    pub encoder_stack: Vec<LayerStep>,
    pub decoder_stack: Vec<LayerStep>,
    pub latent_disc_stack: Vec<LayerStep>,
    pub sample_disc_stack: Vec<LayerStep>,
}

fn conv_out(n: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - kernel) / stride + 1
}

/// Output padding that makes a stride-`s` transposed conv land exactly on
/// `target`; valid values are 0..stride.
fn output_padding_for(target: usize, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let base = (input - 1) * stride + kernel;
    let need = target + 2 * padding;
    if need < base || need - base >= stride.max(1) {
        return Err(Error::config(format!(
            "no valid output padding maps {input} to {target} with kernel {kernel} stride {stride}"
        )));
    }
    Ok(need - base)
}

impl NetworkSpec {
    /// Default architecture for a `height`×`width` window, with the given
    /// latent width and attention neighborhood. Spatial dimensions of the
    /// inner maps are derived from the input so other window lengths work
    /// unchanged.
    pub fn default_for(height: usize, width: usize, latent_dim: usize, neighborhood: usize, projection_kernel: usize) -> Result<NetworkSpec> {
        if height < 2 || width < 8 {
            return Err(Error::config(format!(
                "window of {height}x{width} is too small for the default architecture (need width >= 8)"
            )));
        }
        let leaky = Activation::LeakyRelu { slope: LEAKY_SLOPE };
        let attn = |cin: usize, cout: usize| OpDesc::Attention {
            in_channels: cin,
            out_channels: cout,
            neighborhood,
            projection_kernel,
        };

        // encoder spatial chain: stride-1, stride-2, stride-2
        let (h1, w1) = (conv_out(height, 3, 1, 1), conv_out(width, 3, 1, 1));
        let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
        let (h3, w3) = (conv_out(h2, 3, 2, 1), conv_out(w2, 3, 2, 1));

        let encoder_stack = vec![
            LayerStep::normed(OpDesc::Conv { in_channels: 1, out_channels: 32, kernel: 3, stride: 1, padding: 1 }, leaky),
            LayerStep::normed(attn(32, 32), leaky),
            LayerStep::normed(OpDesc::Conv { in_channels: 32, out_channels: 64, kernel: 3, stride: 2, padding: 1 }, leaky),
            LayerStep::normed(attn(64, 64), leaky),
            LayerStep::normed(OpDesc::Conv { in_channels: 64, out_channels: 64, kernel: 3, stride: 2, padding: 1 }, leaky),
            LayerStep::normed(attn(64, 64), leaky),
            LayerStep::plain(OpDesc::GlobalAvgPool),
            LayerStep {
                op: OpDesc::Linear { in_features: 64, out_features: latent_dim },
                norm: false,
                activation: Some(Activation::Tanh),
            },
        ];

        let decoder_stack = vec![
            LayerStep::plain(OpDesc::Linear { in_features: latent_dim, out_features: 64 * h3 * w3 }),
            LayerStep::normed(OpDesc::Reshape { channels: 64, height: h3, width: w3 }, leaky),
            LayerStep::normed(
                OpDesc::TConv {
                    in_channels: 64,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: (
                        output_padding_for(h2, h3, 3, 2, 1)?,
                        output_padding_for(w2, w3, 3, 2, 1)?,
                    ),
                },
                leaky,
            ),
            LayerStep::normed(attn(64, 64), leaky),
            LayerStep::normed(
                OpDesc::TConv {
                    in_channels: 64,
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: (
                        output_padding_for(height, h2, 3, 2, 1)?,
                        output_padding_for(width, w2, 3, 2, 1)?,
                    ),
                },
                leaky,
            ),
            LayerStep::normed(attn(32, 32), leaky),
            LayerStep {
                op: OpDesc::TConv {
                    in_channels: 32,
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    output_padding: (0, 0),
                },
                norm: false,
                activation: Some(Activation::Sigmoid),
            },
        ];

        let widths = [latent_dim, 128, 128, 64, 64, 32, 1];
        let mut latent_disc_stack: Vec<LayerStep> = widths
            .windows(2)
            .map(|pair| LayerStep::normed(
                OpDesc::Linear { in_features: pair[0], out_features: pair[1] },
                Activation::Relu,
            ))
            .collect();
        // last linear: no norm, sigmoid head
        let last = latent_disc_stack.last_mut().unwrap();
        last.norm = false;
        last.activation = Some(Activation::Sigmoid);

        let sample_disc_stack = vec![
            LayerStep::normed(OpDesc::Conv { in_channels: 1, out_channels: 32, kernel: 3, stride: 1, padding: 1 }, leaky),
            LayerStep::normed(attn(32, 32), leaky),
            LayerStep::normed(OpDesc::Conv { in_channels: 32, out_channels: 64, kernel: 3, stride: 2, padding: 1 }, leaky),
            LayerStep::normed(attn(64, 64), leaky),
            LayerStep::normed(OpDesc::Conv { in_channels: 64, out_channels: 128, kernel: 3, stride: 2, padding: 1 }, leaky),
            LayerStep::normed(attn(128, 128), leaky),
            LayerStep::plain(OpDesc::Conv { in_channels: 128, out_channels: 1, kernel: 3, stride: 1, padding: 1 }),
            LayerStep {
                op: OpDesc::GlobalAvgPool,
                norm: false,
                activation: Some(Activation::Sigmoid),
            },
        ];

        Ok(NetworkSpec {
            input_height: height,
            input_width: width,
            latent_dim,
            encoder_stack,
            decoder_stack,
            latent_disc_stack,
            sample_disc_stack,
        })
    }

    /// Default architecture for the standard 12×50 window.
    pub fn standard() -> NetworkSpec {
        NetworkSpec::default_for(12, 50, 64, 5, 1).expect("standard window dims are valid")
    }

    /// Layer-count and shape invariants: 3 conv + 3 attention in the
    /// encoder, 3 tconv + 2 attention in the decoder, 6 linear layers in the
    /// latent discriminator, 4 conv + 3 attention in the sample
    /// discriminator, and both the encoder and decoder reproduce the
    /// declared input/latent geometry.
    pub fn validate(&self) -> Result<()> {
        let count = |stack: &[LayerStep], pred: fn(&OpDesc) -> bool| {
            stack.iter().filter(|s| pred(&s.op)).count()
        };
        let is_conv = |op: &OpDesc| matches!(op, OpDesc::Conv { .. });
        let is_tconv = |op: &OpDesc| matches!(op, OpDesc::TConv { .. });
        let is_attn = |op: &OpDesc| matches!(op, OpDesc::Attention { .. });
        let is_linear = |op: &OpDesc| matches!(op, OpDesc::Linear { .. });

        let checks = [
            ("encoder conv", count(&self.encoder_stack, is_conv), 3),
            ("encoder attention", count(&self.encoder_stack, is_attn), 3),
            ("decoder tconv", count(&self.decoder_stack, is_tconv), 3),
            ("decoder attention", count(&self.decoder_stack, is_attn), 2),
            ("latent disc linear", count(&self.latent_disc_stack, is_linear), 6),
            ("sample disc conv", count(&self.sample_disc_stack, is_conv), 4),
            ("sample disc attention", count(&self.sample_disc_stack, is_attn), 3),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::config(format!(
                    "{name} layer count is {got}, expected {want}"
                )));
            }
        }

        let enc_out = walk_shapes(
            &self.encoder_stack,
            TensorShape::Map(1, self.input_height, self.input_width),
        )?;
        if enc_out != TensorShape::Feat(self.latent_dim) {
            return Err(Error::config(format!(
                "encoder produces {enc_out:?}, expected latent of {}",
                self.latent_dim
            )));
        }
        let dec_out = walk_shapes(&self.decoder_stack, TensorShape::Feat(self.latent_dim))?;
        if dec_out != TensorShape::Map(1, self.input_height, self.input_width) {
            return Err(Error::config(format!(
                "decoder produces {dec_out:?}, expected 1x{}x{}",
                self.input_height, self.input_width
            )));
        }
        let ld_out = walk_shapes(&self.latent_disc_stack, TensorShape::Feat(self.latent_dim))?;
        if ld_out != TensorShape::Feat(1) {
            return Err(Error::config("latent discriminator must end in one unit"));
        }
        let sd_out = walk_shapes(
            &self.sample_disc_stack,
            TensorShape::Map(1, self.input_height, self.input_width),
        )?;
        if sd_out != TensorShape::Feat(1) {
            return Err(Error::config("sample discriminator must end in one unit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Map(usize, usize, usize),
    Feat(usize),
}

/// Symbolically push a shape through a stack, failing on any mismatch.
pub fn walk_shapes(stack: &[LayerStep], input: TensorShape) -> Result<TensorShape> {
    let mut shape = input;
    for (idx, step) in stack.iter().enumerate() {
        shape = match (&step.op, shape) {
            (OpDesc::Conv { in_channels, out_channels, kernel, stride, padding }, TensorShape::Map(c, h, w)) => {
                if c != *in_channels {
                    return Err(Error::config(format!(
                        "step {idx}: conv expects {in_channels} channels, got {c}"
                    )));
                }
                TensorShape::Map(
                    *out_channels,
                    conv_out(h, *kernel, *stride, *padding),
                    conv_out(w, *kernel, *stride, *padding),
                )
            }
            (OpDesc::TConv { in_channels, out_channels, kernel, stride, padding, output_padding }, TensorShape::Map(c, h, w)) => {
                if c != *in_channels {
                    return Err(Error::config(format!(
                        "step {idx}: tconv expects {in_channels} channels, got {c}"
                    )));
                }
                TensorShape::Map(
                    *out_channels,
                    (h - 1) * stride + kernel + output_padding.0 - 2 * padding,
                    (w - 1) * stride + kernel + output_padding.1 - 2 * padding,
                )
            }
            (OpDesc::Attention { in_channels, out_channels, .. }, TensorShape::Map(c, h, w)) => {
                if c != *in_channels {
                    return Err(Error::config(format!(
                        "step {idx}: attention expects {in_channels} channels, got {c}"
                    )));
                }
                TensorShape::Map(*out_channels, h, w)
            }
            (OpDesc::Linear { in_features, out_features }, TensorShape::Feat(f)) => {
                if f != *in_features {
                    return Err(Error::config(format!(
                        "step {idx}: linear expects {in_features} features, got {f}"
                    )));
                }
                TensorShape::Feat(*out_features)
            }
            (OpDesc::GlobalAvgPool, TensorShape::Map(c, _, _)) => TensorShape::Feat(c),
            (OpDesc::Reshape { channels, height, width }, TensorShape::Feat(f)) => {
                if f != channels * height * width {
                    return Err(Error::config(format!(
                        "step {idx}: reshape expects {} features, got {f}",
                        channels * height * width
                    )));
                }
                TensorShape::Map(*channels, *height, *width)
            }
            (op, shape) => {
                return Err(Error::config(format!(
                    "step {idx}: {op:?} cannot consume {shape:?}"
                )))
            }
        };
    }
    Ok(shape)
}

/// Instantiate a stack as concrete layers (op, then batch norm, then
/// activation where requested).
pub fn build_network(stack: &[LayerStep]) -> Result<Network> {
    let mut layers = Vec::new();
    for step in stack {
        let (layer, norm_size): (Layer, Option<usize>) = match &step.op {
            OpDesc::Conv { in_channels, out_channels, kernel, stride, padding } => (
                Layer::Conv(Conv2d::new(*in_channels, *out_channels, *kernel, *stride, *padding)),
                Some(*out_channels),
            ),
            OpDesc::TConv { in_channels, out_channels, kernel, stride, padding, output_padding } => (
                Layer::TConv(TConv2d::new(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *stride,
                    *padding,
                    *output_padding,
                )),
                Some(*out_channels),
            ),
            OpDesc::Attention { in_channels, out_channels, neighborhood, projection_kernel } => {
                let config = AttentionConfig {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    neighborhood: *neighborhood,
                    projection_kernel: *projection_kernel,
                };
                config.validate()?;
                (
                    Layer::Attention(AttnLayer {
                        params: AttentionParams::zeros(&config, true),
                        config,
                    }),
                    Some(*out_channels),
                )
            }
            OpDesc::Linear { in_features, out_features } => (
                Layer::Linear(Linear::new(*in_features, *out_features)),
                Some(*out_features),
            ),
            OpDesc::GlobalAvgPool => (Layer::GlobalAvgPool, None),
            OpDesc::Reshape { channels, height, width } => {
                (Layer::Reshape(*channels, *height, *width), Some(*channels))
            }
        };
        layers.push(layer);
        if step.norm {
            let size = norm_size.ok_or_else(|| Error::config("norm on a shapeless step"))?;
            layers.push(Layer::BatchNorm(BatchNorm::new(size)));
        }
        if let Some(act) = step.activation {
            layers.push(match act {
                Activation::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                Activation::Relu => Layer::Relu,
                Activation::Sigmoid => Layer::Sigmoid,
                Activation::Tanh => Layer::Tanh,
            });
        }
    }
    Ok(Network::new(layers))
}

/// All parameters of the model: the four instantiated networks plus the
/// architecture and the seed that initialized them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub encoder: Network,
    pub decoder: Network,
    pub latent_disc: Network,
    pub sample_disc: Network,
    pub seed: u64,
}

impl ModelParams {
    /// Build and initialize from a single seed; the same seed yields
    /// identical parameters.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<ModelParams> {
        spec.validate()?;
        let mut encoder = build_network(&spec.encoder_stack)?;
        let mut decoder = build_network(&spec.decoder_stack)?;
        let mut latent_disc = build_network(&spec.latent_disc_stack)?;
        let mut sample_disc = build_network(&spec.sample_disc_stack)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_network(&mut encoder, &mut rng);
        init_network(&mut decoder, &mut rng);
        init_network(&mut latent_disc, &mut rng);
        init_network(&mut sample_disc, &mut rng);
        Ok(ModelParams {
            spec: spec.clone(),
            encoder,
            decoder,
            latent_disc,
            sample_disc,
            seed,
        })
    }

    fn check_window(&self, values: &Array2<f64>) -> Result<()> {
        let (h, w) = values.dim();
        if (h, w) != (self.spec.input_height, self.spec.input_width) {
            return Err(Error::config(format!(
                "window is {h}x{w}, model expects {}x{}",
                self.spec.input_height, self.spec.input_width
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("window contains non-finite values"));
        }
        Ok(())
    }

    fn window_value(&self, values: &Array2<f64>) -> Value {
        let (h, w) = values.dim();
        Value::Map(
            values
                .to_owned()
                .into_shape_with_order((1, 1, h, w))
                .unwrap(),
        )
    }
}

/// Encode one window to its latent code (inference mode: batch-norm uses
/// running statistics, so repeated calls are bit-identical).
pub fn encode(window: &Array2<f64>, model: &ModelParams) -> Result<LatentCode> {
    model.check_window(window)?;
    let (out, _) = model.encoder.forward_infer(&model.window_value(window))?;
    let feats = out.into_features()?;
    Ok(LatentCode(feats.row(0).to_owned()))
}

/// Decode a latent code to a window in [0, 1].
pub fn decode(latent: &LatentCode, model: &ModelParams) -> Result<Array2<f64>> {
    if latent.dim() != model.spec.latent_dim {
        return Err(Error::config(format!(
            "latent has {} components, model expects {}",
            latent.dim(),
            model.spec.latent_dim
        )));
    }
    let z = Value::Features(
        latent
            .0
            .to_owned()
            .into_shape_with_order((1, model.spec.latent_dim))
            .unwrap(),
    );
    let (out, _) = model.decoder.forward_infer(&z)?;
    let map: Array4<f64> = out.into_map()?;
    let (_, _, h, w) = map.dim();
    Ok(map.into_shape_with_order((h, w)).unwrap())
}

/// Probability that a latent code came from the uniform prior, per the
/// latent discriminator. Strictly inside (0, 1).
pub fn latent_discriminate(latent: &LatentCode, model: &ModelParams) -> Result<f64> {
    if latent.dim() != model.spec.latent_dim {
        return Err(Error::config(format!(
            "latent has {} components, model expects {}",
            latent.dim(),
            model.spec.latent_dim
        )));
    }
    let z = Value::Features(
        latent
            .0
            .to_owned()
            .into_shape_with_order((1, model.spec.latent_dim))
            .unwrap(),
    );
    let (out, _) = model.latent_disc.forward_infer(&z)?;
    Ok(out.into_features()?[(0, 0)])
}

/// Probability that a window is a real sample rather than a decoder output.
pub fn sample_discriminate(window: &Array2<f64>, model: &ModelParams) -> Result<f64> {
    model.check_window(window)?;
    let (out, _) = model.sample_disc.forward_infer(&model.window_value(window))?;
    Ok(out.into_features()?[(0, 0)])
}

/// Trainable parameter counts per network, with a multiply-accumulate flop
/// estimate of one forward pass each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterReport {
    pub encoder: usize,
    pub decoder: usize,
    pub latent_disc: usize,
    pub sample_disc: usize,
    pub total: usize,
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub latent_disc_flops: u64,
    pub sample_disc_flops: u64,
    pub total_flops: u64,
}

pub fn count_parameters(model: &ModelParams) -> ParameterReport {
    let encoder = model.encoder.trainable_parameters();
    let decoder = model.decoder.trainable_parameters();
    let latent_disc = model.latent_disc.trainable_parameters();
    let sample_disc = model.sample_disc.trainable_parameters();
    let spec = &model.spec;
    let ef = stack_flops(&spec.encoder_stack, TensorShape::Map(1, spec.input_height, spec.input_width));
    let df = stack_flops(&spec.decoder_stack, TensorShape::Feat(spec.latent_dim));
    let lf = stack_flops(&spec.latent_disc_stack, TensorShape::Feat(spec.latent_dim));
    let sf = stack_flops(&spec.sample_disc_stack, TensorShape::Map(1, spec.input_height, spec.input_width));
    ParameterReport {
        encoder,
        decoder,
        latent_disc,
        sample_disc,
        total: encoder + decoder + latent_disc + sample_disc,
        encoder_flops: ef,
        decoder_flops: df,
        latent_disc_flops: lf,
        sample_disc_flops: sf,
        total_flops: ef + df + lf + sf,
    }
}

fn stack_flops(stack: &[LayerStep], input: TensorShape) -> u64 {
    let mut shape = input;
    let mut flops: u64 = 0;
    for step in stack {
        let next = match walk_shapes(std::slice::from_ref(step), shape) {
            Ok(s) => s,
            Err(_) => return flops,
        };
        flops += match (&step.op, shape, next) {
            (OpDesc::Conv { in_channels, kernel, .. }, _, TensorShape::Map(oc, oh, ow)) => {
                2 * (oc * oh * ow * in_channels * kernel * kernel) as u64
            }
            (OpDesc::TConv { out_channels, kernel, .. }, TensorShape::Map(ic, ih, iw), _) => {
                2 * (ic * ih * iw * out_channels * kernel * kernel) as u64
            }
            (
                OpDesc::Attention { in_channels, out_channels, neighborhood, projection_kernel },
                TensorShape::Map(_, h, w),
                _,
            ) => {
                let proj = 3 * h * w * out_channels * in_channels * projection_kernel * projection_kernel;
                let combine = 2 * h * w * neighborhood * neighborhood * out_channels;
                2 * (proj + combine) as u64
            }
            (OpDesc::Linear { in_features, out_features }, _, _) => {
                2 * (in_features * out_features) as u64
            }
            _ => 0,
        };
        shape = next;
    }
    flops
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_window(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((12, 50), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn standard_spec_passes_layer_invariants() {
        NetworkSpec::standard().validate().unwrap();
    }

    #[test]
    fn spec_adapts_to_other_window_widths() {
        for width in [25, 50, 75, 100, 125, 150] {
            let spec = NetworkSpec::default_for(12, width, 64, 5, 1).unwrap();
            spec.validate().unwrap();
        }
    }

    #[test]
    fn too_narrow_window_is_rejected() {
        assert!(NetworkSpec::default_for(12, 7, 64, 5, 1).is_err());
    }

    #[test]
    fn encode_yields_bounded_latent_of_right_width() {
        let model = ModelParams::new(&NetworkSpec::standard(), 11).unwrap();
        let z = encode(&random_window(1), &model).unwrap();
        assert_eq!(z.dim(), 64);
        assert!(z.0.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn encode_is_deterministic_in_inference_mode() {
        let model = ModelParams::new(&NetworkSpec::standard(), 11).unwrap();
        let w = random_window(2);
        let a = encode(&w, &model).unwrap();
        let b = encode(&w, &model).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn distinct_windows_encode_differently() {
        let model = ModelParams::new(&NetworkSpec::standard(), 5).unwrap();
        let zeros = Array2::zeros((12, 50));
        let ones = Array2::from_elem((12, 50), 1.0);
        let a = encode(&zeros, &model).unwrap();
        let b = encode(&ones, &model).unwrap();
        let max_diff = a
            .0
            .iter()
            .zip(b.0.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "encoder degenerate: max diff {max_diff}");
    }

    #[test]
    fn decode_stays_in_unit_range() {
        let model = ModelParams::new(&NetworkSpec::standard(), 3).unwrap();
        let z = LatentCode(Array1::zeros(64));
        let out = decode(&z, &model).unwrap();
        assert_eq!(out.dim(), (12, 50));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z = LatentCode(Array1::from_shape_fn(64, |_| rng.random_range(-1.0..1.0)));
            let out = decode(&z, &model).unwrap();
            assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn wrong_latent_width_is_a_config_error() {
        let model = ModelParams::new(&NetworkSpec::standard(), 3).unwrap();
        let z = LatentCode(Array1::zeros(32));
        assert!(decode(&z, &model).is_err());
        assert!(latent_discriminate(&z, &model).is_err());
    }

    #[test]
    fn zeroed_heads_output_exactly_half() {
        let mut model = ModelParams::new(&NetworkSpec::standard(), 3).unwrap();
        // zero the last linear of the latent disc and last conv of the sample disc
        for layer in model.latent_disc.layers.iter_mut().rev() {
            if let Layer::Linear(l) = layer {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
                break;
            }
        }
        for layer in model.sample_disc.layers.iter_mut().rev() {
            if let Layer::Conv(c) = layer {
                c.weights.fill(0.0);
                c.bias.fill(0.0);
                break;
            }
        }
        let z = LatentCode(Array1::from_elem(64, 0.3));
        assert_eq!(latent_discriminate(&z, &model).unwrap(), 0.5);
        assert_eq!(sample_discriminate(&random_window(4), &model).unwrap(), 0.5);
    }

    #[test]
    fn discriminators_output_probabilities() {
        let model = ModelParams::new(&NetworkSpec::standard(), 13).unwrap();
        let z = encode(&random_window(6), &model).unwrap();
        let p = latent_discriminate(&z, &model).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let p = sample_discriminate(&random_window(7), &model).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn parameter_count_of_tiny_conv() {
        // 1x1 conv, 2 in / 3 out channels, bias: 2*3 + 3 = 9
        let layer = Layer::Conv(Conv2d::new(2, 3, 1, 1, 0));
        assert_eq!(layer.trainable_parameters(), 9);
    }

    #[test]
    fn zero_layer_network_has_zero_parameters() {
        assert_eq!(Network::new(vec![]).trainable_parameters(), 0);
    }

    #[test]
    fn default_total_parameters_near_reference() {
        let model = ModelParams::new(&NetworkSpec::standard(), 1).unwrap();
        let report = count_parameters(&model);
        assert_eq!(
            report.total,
            report.encoder + report.decoder + report.latent_disc + report.sample_disc
        );
        assert!(
            report.total >= 300_000 && report.total <= 1_300_000,
            "total {} outside [0.3M, 1.3M]",
            report.total
        );
        assert!(report.total_flops > 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::standard();
        let a = ModelParams::new(&spec, 21).unwrap();
        let b = ModelParams::new(&spec, 21).unwrap();
        match (&a.encoder.layers[0], &b.encoder.layers[0]) {
            (Layer::Conv(x), Layer::Conv(y)) => assert_eq!(x.weights, y.weights),
            _ => unreachable!(),
        }
        let c = ModelParams::new(&spec, 22).unwrap();
        match (&a.encoder.layers[0], &c.encoder.layers[0]) {
            (Layer::Conv(x), Layer::Conv(y)) => assert_ne!(x.weights, y.weights),
            _ => unreachable!(),
        }
    }
}
