use serde::{Deserialize, Serialize};

use super::tensor::Shape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Sigmoid,
    #[default]
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    z
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => a * (S::one() - a),
            Activation::Identity => S::one(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Operation performed by one layer. Only `Dense` and `Conv2d` carry synapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    /// Fully connected over the flattened input.
    Dense { outputs: usize },
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample { factor: usize },
    /// Appends the channels of an earlier layer's output to the current activation.
    Concat { from: usize },
    /// Applies the layer activation element-wise.
    Nonlinearity,
}

impl LayerKind {
    pub fn has_synapses(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub activation: Activation,
    pub input: Shape,
    pub output: Shape,
}

impl LayerSpec {
    /// Number of weight elements (possible synapses).
    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs } => outputs * self.input.numel(),
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => out_channels * self.input.channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    /// Number of neurons (output units or output channels) owning a bias.
    pub fn neuron_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs } => outputs,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Weight tensor dimensions as stored: `[out, in]` or `[out_c, in_c, kh, kw]`.
    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { outputs } => vec![outputs, self.input.numel()],
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![out_channels, self.input.channels, kernel_h, kernel_w],
            _ => Vec::new(),
        }
    }

    /// Synapse `index` connects input unit `.0` to neuron `.1`. For dense layers the
    /// input unit is a flattened feature, for conv layers an input channel.
    pub fn endpoints(&self, index: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { .. } => {
                let fan = self.input.numel();
                (index % fan, index / fan)
            }
            LayerKind::Conv2d {
                kernel_h, kernel_w, ..
            } => {
                let k = kernel_h * kernel_w;
                let per_out = self.input.channels * k;
                ((index % per_out) / k, index / per_out)
            }
            _ => unreachable!("layer without synapses has no endpoints"),
        }
    }

    /// Input channel an input unit (as returned by [`LayerSpec::endpoints`]) belongs to.
    pub fn unit_channel(&self, unit: usize) -> usize {
        match self.kind {
            LayerKind::Dense { .. } => unit / self.input.plane(),
            _ => unit,
        }
    }

    /// Number of input units seen by [`LayerSpec::endpoints`].
    pub fn input_units(&self) -> usize {
        match self.kind {
            LayerKind::Dense { .. } => self.input.numel(),
            _ => self.input.channels,
        }
    }
}

/// Computes the output shape of `kind` applied to `input`. `earlier` holds the
/// output shapes of all preceding layers (for concatenation).
pub fn infer_output(kind: &LayerKind, input: Shape, earlier: &[Shape]) -> Result<Shape> {
    let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
    if input.channels == 0 || input.height == 0 || input.width == 0 {
        return bad(format!("input shape {input} has a zero dimension"));
    }
    match *kind {
        LayerKind::Dense { outputs } => {
            if outputs == 0 {
                return bad("dense layer needs at least one output".into());
            }
            Ok(Shape::flat(outputs))
        }
        LayerKind::Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                return bad("conv2d dimensions must all be at least 1".into());
            }
            if padding >= kernel_h || padding >= kernel_w {
                return bad(format!(
                    "conv2d padding {padding} must be smaller than kernel {kernel_h}x{kernel_w}"
                ));
            }
            let padded_h = input.height + 2 * padding;
            let padded_w = input.width + 2 * padding;
            if padded_h < kernel_h || padded_w < kernel_w {
                return bad(format!(
                    "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {padded_h}x{padded_w}"
                ));
            }
            Ok(Shape::new(
                out_channels,
                (padded_h - kernel_h) / stride + 1,
                (padded_w - kernel_w) / stride + 1,
            ))
        }
        LayerKind::Upsample { factor } => {
            if factor == 0 {
                return bad("upsample factor must be at least 1".into());
            }
            Ok(Shape::new(
                input.channels,
                input.height * factor,
                input.width * factor,
            ))
        }
        LayerKind::Concat { from } => {
            let Some(other) = earlier.get(from) else {
                return bad(format!("concat source layer {from} is not an earlier layer"));
            };
            if other.height != input.height || other.width != input.width {
                return bad(format!(
                    "concat of {input} with layer {from} output {other}: spatial sizes differ"
                ));
            }
            Ok(Shape::new(
                input.channels + other.channels,
                input.height,
                input.width,
            ))
        }
        LayerKind::Nonlinearity => Ok(input),
    }
}
