use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::layer::{Activation, LayerKind, LayerSpec};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How surviving synapses are initialised before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the unmasked topology.
    #[default]
    GlorotUniform,
    /// Same scale, but every weight has exactly that magnitude with a random sign.
    ConstantMagnitude,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    BinaryCrossEntropy,
    MeanSquaredError,
}

const BCE_EPS: f64 = 1e-7;

/// Initial bias of relu neurons, so a neuron whose few surviving synapses all
/// start negative still passes gradient for small inputs.
pub const RELU_BIAS_INIT: f64 = 0.1;

/// A network: architecture plus weights (zero wherever masked) and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    arch: Architecture,
    weights: Vec<Vec<S>>,
    biases: Vec<Vec<S>>,
}

/// Per-layer gradients shaped like the network's weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub weights: Vec<Vec<S>>,
    pub biases: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub(crate) fn zeros_like(net: &Network<S>) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![S::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![S::zero(); b.len()]).collect(),
        }
    }
}

struct Trace<S> {
    pre: Vec<Vec<S>>,
    post: Vec<Vec<S>>,
}

impl<S: Scalar> Network<S> {
    pub fn zeros(arch: Architecture) -> Self {
        let weights = arch
            .layers()
            .iter()
            .map(|l| vec![S::zero(); l.weight_len()])
            .collect();
        let biases = arch
            .layers()
            .iter()
            .map(|l| vec![S::zero(); l.neuron_count()])
            .collect();
        Network {
            arch,
            weights,
            biases,
        }
    }

    pub fn from_parts(arch: Architecture, weights: Vec<Vec<S>>, biases: Vec<Vec<S>>) -> Result<Self> {
        let mut net = Network::zeros(arch);
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return Err(Error::RejectedInput(format!(
                "expected {} weight and bias tensors, got {} and {}",
                net.weights.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (l, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            net.set_weights(l, w)?;
            net.set_biases(l, b)?;
        }
        Ok(net)
    }

    /// Fresh random initialisation of every unmasked synapse. Biases of relu
    /// layers start at [`RELU_BIAS_INIT`], all others at 0.
    pub fn initialize(arch: Architecture, rule: InitRule, seed: u64) -> Self {
        let mut net = Network::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.arch.layers().len() {
            let spec = net.arch.layers()[l];
            if !spec.kind.has_synapses() {
                continue;
            }
            if spec.activation == Activation::Relu {
                net.biases[l].fill(S::from_f64_lossy(RELU_BIAS_INIT));
            }
            let Some(scale) = init_scale(&spec, net.arch.mask(l)) else {
                continue;
            };
            let mask = net.arch.mask(l);
            for (w, _) in net.weights[l].iter_mut().zip(mask).filter(|(_, &m)| m) {
                let value = match rule {
                    InitRule::GlorotUniform => rng.random_range(-scale..scale),
                    InitRule::ConstantMagnitude => {
                        if rng.random::<bool>() {
                            scale
                        } else {
                            -scale
                        }
                    }
                };
                *w = S::from_f64_lossy(value);
            }
        }
        net
    }

    /// Carries `ancestor`'s weights and biases over onto `arch`, zeroing synapses
    /// the new mask removed.
    pub fn inherit(arch: Architecture, ancestor: &Network<S>) -> Result<Self> {
        if arch.layers() != ancestor.arch.layers() {
            return Err(Error::RejectedInput(
                "inherited weights need an identical layer stack".into(),
            ));
        }
        Network::from_parts(arch, ancestor.weights.clone(), ancestor.biases.clone())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self, layer: usize) -> &[S] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[S] {
        &self.biases[layer]
    }

    pub fn all_weights(&self) -> &[Vec<S>] {
        &self.weights
    }

    pub fn all_biases(&self) -> &[Vec<S>] {
        &self.biases
    }

    /// Replaces one layer's weights. Masked positions are forced back to 0.
    pub fn set_weights(&mut self, layer: usize, mut values: Vec<S>) -> Result<()> {
        let expected = self.weights.get(layer).map(Vec::len);
        if expected != Some(values.len()) {
            return Err(Error::RejectedInput(format!(
                "layer {layer} expects {expected:?} weights, got {}",
                values.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(self.arch.mask(layer)) {
            if !m {
                *v = S::zero();
            }
        }
        self.weights[layer] = values;
        Ok(())
    }

    pub fn set_biases(&mut self, layer: usize, values: Vec<S>) -> Result<()> {
        let expected = self.biases.get(layer).map(Vec::len);
        if expected != Some(values.len()) {
            return Err(Error::RejectedInput(format!(
                "layer {layer} expects {expected:?} biases, got {}",
                values.len()
            )));
        }
        self.biases[layer] = values;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let conv = |v: &Vec<S>| v.iter().map(|x| T::from_f64_lossy(x.to_f64_lossy())).collect();
        Network {
            arch: self.arch.clone(),
            weights: self.weights.iter().map(conv).collect(),
            biases: self.biases.iter().map(conv).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<()> {
        let expected = self.arch.input_shape();
        if input.shape() != expected {
            return Err(Error::RejectedInput(format!(
                "input shape {} does not match network input {expected}",
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(input)?;
        let mut trace = self.trace(input.data());
        let data = trace.post.pop().unwrap_or_else(|| input.data().to_vec());
        Tensor::new(self.arch.output_shape(), data)
    }

    pub fn forward_batch(&self, batch: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        batch.iter().map(|x| self.forward(x)).collect()
    }

    fn trace(&self, input: &[S]) -> Trace<S> {
        let n = self.arch.layers().len();
        let mut trace = Trace {
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        for (l, spec) in self.arch.layers().iter().enumerate() {
            let x: &[S] = if l == 0 { input } else { &trace.post[l - 1] };
            let z = match spec.kind {
                LayerKind::Dense { .. } => {
                    dense_forward(spec, &self.weights[l], self.arch.mask(l), &self.biases[l], x)
                }
                LayerKind::Conv2d { .. } => {
                    conv_forward(spec, &self.weights[l], self.arch.mask(l), &self.biases[l], x)
                }
                LayerKind::Upsample { factor } => upsample_forward(spec.input, factor, x),
                LayerKind::Concat { from } => {
                    let mut z = x.to_vec();
                    z.extend_from_slice(&trace.post[from]);
                    z
                }
                LayerKind::Nonlinearity => x.to_vec(),
            };
            let a = match spec.activation {
                Activation::Identity => z.clone(),
                act => z.iter().map(|&v| act.apply(v)).collect(),
            };
            trace.pre.push(z);
            trace.post.push(a);
        }
        trace
    }

    /// Mean loss of one sample and, accumulated into `grads`, its gradient
    /// scaled by `weight`.
    fn accumulate(
        &self,
        input: &[S],
        target: &[S],
        loss: Loss,
        weight: S,
        grads: &mut Gradients<S>,
    ) -> S {
        let layers = self.arch.layers();
        let trace = self.trace(input);
        let Some(last) = layers.len().checked_sub(1) else {
            return loss_only(loss, input, target);
        };
        let out_pre = &trace.pre[last];
        let out_post = &trace.post[last];
        let count = S::from_usize(out_post.len()).unwrap_or_else(S::one);
        let scale = weight / count;

        let fused = loss == Loss::BinaryCrossEntropy && layers[last].activation == Activation::Sigmoid;
        let (value, mut grad_pre) = if fused {
            let mut total = S::zero();
            let g: Vec<S> = out_pre
                .iter()
                .zip(out_post)
                .zip(target)
                .map(|((&z, &a), &t)| {
                    total += z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
                    (a - t) * scale
                })
                .collect();
            (total / count, g)
        } else {
            let value = loss_only(loss, out_post, target);
            let act = layers[last].activation;
            let g = out_pre
                .iter()
                .zip(out_post)
                .zip(target)
                .map(|((&z, &a), &t)| loss_derivative(loss, a, t) * scale * act.derivative(z, a))
                .collect();
            (value, g)
        };

        let mut grad_post: Vec<Option<Vec<S>>> = vec![None; layers.len()];
        for l in (0..layers.len()).rev() {
            let spec = &layers[l];
            if l != last {
                let Some(g) = grad_post[l].take() else {
                    continue;
                };
                grad_pre = match spec.activation {
                    Activation::Identity => g,
                    act => g
                        .iter()
                        .zip(&trace.pre[l])
                        .zip(&trace.post[l])
                        .map(|((&g, &z), &a)| g * act.derivative(z, a))
                        .collect(),
                };
            }
            let x: &[S] = if l == 0 { input } else { &trace.post[l - 1] };
            let grad_x = match spec.kind {
                LayerKind::Dense { .. } => dense_backward(
                    spec,
                    &self.weights[l],
                    self.arch.mask(l),
                    x,
                    &grad_pre,
                    &mut grads.weights[l],
                    &mut grads.biases[l],
                ),
                LayerKind::Conv2d { .. } => conv_backward(
                    spec,
                    &self.weights[l],
                    self.arch.mask(l),
                    x,
                    &grad_pre,
                    &mut grads.weights[l],
                    &mut grads.biases[l],
                ),
                LayerKind::Upsample { factor } => upsample_backward(spec.input, factor, &grad_pre),
                LayerKind::Concat { from } => {
                    let split = spec.input.numel();
                    add_into(&mut grad_post[from], &grad_pre[split..]);
                    grad_pre[..split].to_vec()
                }
                LayerKind::Nonlinearity => std::mem::take(&mut grad_pre),
            };
            if l > 0 {
                add_into(&mut grad_post[l - 1], &grad_x);
            }
        }
        value
    }

    /// Gradients of the batch-mean loss with respect to every weight and bias,
    /// together with that mean loss. Masked synapses get exactly zero gradient.
    pub fn gradients(
        &self,
        batch: &[Tensor<S>],
        targets: &[Tensor<S>],
        loss: Loss,
    ) -> Result<(Gradients<S>, S)> {
        if batch.len() != targets.len() {
            return Err(Error::RejectedInput(format!(
                "{} inputs but {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let out_shape = self.arch.output_shape();
        for (x, t) in batch.iter().zip(targets) {
            self.check_input(x)?;
            if t.shape() != out_shape {
                return Err(Error::RejectedInput(format!(
                    "target shape {} does not match output shape {out_shape}",
                    t.shape()
                )));
            }
        }
        let mut grads = Gradients::zeros_like(self);
        let value = self.accumulate_batch(batch.iter().zip(targets).map(|(x, t)| (x.data(), t.data())), batch.len(), loss, &mut grads);
        Ok((grads, value))
    }

    pub(crate) fn accumulate_batch<'a>(
        &self,
        pairs: impl Iterator<Item = (&'a [S], &'a [S])>,
        len: usize,
        loss: Loss,
        grads: &mut Gradients<S>,
    ) -> S {
        if len == 0 {
            return S::zero();
        }
        let weight = S::one() / S::from_usize(len).unwrap_or_else(S::one);
        let mut total = S::zero();
        for (x, t) in pairs {
            total += self.accumulate(x, t, loss, weight, grads);
        }
        total * weight
    }

    pub(crate) fn apply_step(&mut self, grads: &Gradients<S>, learning_rate: S) {
        for l in 0..self.weights.len() {
            let mask = self.arch.mask(l);
            for ((w, g), &m) in self.weights[l].iter_mut().zip(&grads.weights[l]).zip(mask) {
                if m {
                    *w -= learning_rate * *g;
                }
            }
            for (b, g) in self.biases[l].iter_mut().zip(&grads.biases[l]) {
                *b -= learning_rate * *g;
            }
        }
    }

    /// Mean per-sample loss over a batch, computed the same way as in [`Network::gradients`].
    pub fn loss(&self, batch: &[Tensor<S>], targets: &[Tensor<S>], loss: Loss) -> Result<S> {
        let outputs = self.forward_batch(batch)?;
        if targets.len() != outputs.len() {
            return Err(Error::RejectedInput("inputs and targets differ in count".into()));
        }
        if outputs.is_empty() {
            return Ok(S::zero());
        }
        let fused = loss == Loss::BinaryCrossEntropy
            && self.arch.layers().last().map(|l| l.activation) == Some(Activation::Sigmoid);
        let mut total = S::zero();
        for ((x, out), t) in batch.iter().zip(&outputs).zip(targets) {
            if t.shape() != out.shape() {
                return Err(Error::RejectedInput(format!(
                    "target shape {} does not match output shape {}",
                    t.shape(),
                    out.shape()
                )));
            }
            total += if fused {
                // Evaluate from the logits so the value agrees with the gradient path.
                let trace = self.trace(x.data());
                let z = trace.pre.last().expect("sigmoid output implies a layer");
                let n = S::from_usize(z.len()).unwrap_or_else(S::one);
                z.iter()
                    .zip(t.data())
                    .map(|(&z, &t)| z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p())
                    .sum::<S>()
                    / n
            } else {
                loss_only(loss, out.data(), t.data())
            };
        }
        Ok(total / S::from_usize(outputs.len()).unwrap_or_else(S::one))
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, values: &[S]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(values).for_each(|(a, &v)| *a += v),
        None => *slot = Some(values.to_vec()),
    }
}

fn loss_only<S: Scalar>(loss: Loss, output: &[S], target: &[S]) -> S {
    let n = S::from_usize(output.len().max(1)).unwrap_or_else(S::one);
    let total: S = match loss {
        Loss::MeanSquaredError => output.iter().zip(target).map(|(&a, &t)| (a - t) * (a - t)).sum(),
        Loss::BinaryCrossEntropy => {
            let eps = S::from_f64_lossy(BCE_EPS);
            output
                .iter()
                .zip(target)
                .map(|(&a, &t)| {
                    let a = a.max(eps).min(S::one() - eps);
                    -(t * a.ln() + (S::one() - t) * (S::one() - a).ln())
                })
                .sum()
        }
    };
    total / n
}

fn loss_derivative<S: Scalar>(loss: Loss, a: S, t: S) -> S {
    match loss {
        Loss::MeanSquaredError => (a - t) * S::from_f64_lossy(2.0),
        Loss::BinaryCrossEntropy => {
            let eps = S::from_f64_lossy(BCE_EPS);
            let a = a.max(eps).min(S::one() - eps);
            (a - t) / (a * (S::one() - a))
        }
    }
}

/// Glorot scale over the unmasked topology, or `None` for an empty layer.
fn init_scale(spec: &LayerSpec, mask: &[bool]) -> Option<f64> {
    let mut inputs = vec![false; spec.input_units()];
    let mut outputs = vec![false; spec.neuron_count()];
    let mut count = 0usize;
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (unit, neuron) = spec.endpoints(k);
        inputs[unit] = true;
        outputs[neuron] = true;
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let alive_in = inputs.iter().filter(|&&b| b).count() as f64;
    let alive_out = outputs.iter().filter(|&&b| b).count() as f64;
    let fan_in = count as f64 / alive_out;
    let fan_out = count as f64 / alive_in;
    Some((6.0 / (fan_in + fan_out)).sqrt())
}

fn dense_forward<S: Scalar>(spec: &LayerSpec, w: &[S], mask: &[bool], b: &[S], x: &[S]) -> Vec<S> {
    let fan = spec.input.numel();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * fan..(o + 1) * fan];
            let mrow = &mask[o * fan..(o + 1) * fan];
            let mut acc = bias;
            for ((&wi, &m), &xi) in row.iter().zip(mrow).zip(x) {
                if m {
                    acc += wi * xi;
                }
            }
            acc
        })
        .collect()
}

fn dense_backward<S: Scalar>(
    spec: &LayerSpec,
    w: &[S],
    mask: &[bool],
    x: &[S],
    grad_z: &[S],
    grad_w: &mut [S],
    grad_b: &mut [S],
) -> Vec<S> {
    let fan = spec.input.numel();
    let mut grad_x = vec![S::zero(); fan];
    for (o, &g) in grad_z.iter().enumerate() {
        grad_b[o] += g;
        let range = o * fan..(o + 1) * fan;
        for (((gw, &wi), &m), (xi, gx)) in grad_w[range.clone()]
            .iter_mut()
            .zip(&w[range.clone()])
            .zip(&mask[range])
            .zip(x.iter().zip(grad_x.iter_mut()))
        {
            if m {
                *gw += g * *xi;
                *gx += g * wi;
            }
        }
    }
    grad_x
}

/// Output positions `o` whose input coordinate `o * stride + k - pad` lies in `[0, n_in)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    if n_in + pad <= k {
        return (0, 0);
    }
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = ((n_in - 1 + pad - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

struct ConvGeom {
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(spec: &LayerSpec) -> ConvGeom {
    let LayerKind::Conv2d {
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        padding,
    } = spec.kind
    else {
        unreachable!("conv geometry requested for a non-conv layer")
    };
    ConvGeom {
        in_c: spec.input.channels,
        out_c: out_channels,
        kh: kernel_h,
        kw: kernel_w,
        stride,
        pad: padding,
        ih: spec.input.height,
        iw: spec.input.width,
        oh: spec.output.height,
        ow: spec.output.width,
    }
}

fn conv_forward<S: Scalar>(spec: &LayerSpec, w: &[S], mask: &[bool], b: &[S], x: &[S]) -> Vec<S> {
    let g = conv_geom(spec);
    let (ihw, ohw) = (g.ih * g.iw, g.oh * g.ow);
    let mut z = vec![S::zero(); g.out_c * ohw];
    for (oc, out) in z.chunks_exact_mut(ohw).enumerate() {
        out.fill(b[oc]);
        for ic in 0..g.in_c {
            let xin = &x[ic * ihw..(ic + 1) * ihw];
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(ky, g.stride, g.pad, g.ih, g.oh);
                for kx in 0..g.kw {
                    let idx = ((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx;
                    if !mask[idx] {
                        continue;
                    }
                    let wv = w[idx];
                    let (x0, x1) = valid_range(kx, g.stride, g.pad, g.iw, g.ow);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut out[oy * g.ow + x0..oy * g.ow + x1];
                        let ibase = iy * g.iw;
                        if g.stride == 1 {
                            let start = ibase + x0 + kx - g.pad;
                            let irow = &xin[start..start + (x1 - x0)];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * xin[ibase + (x0 + j) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    z
}

fn conv_backward<S: Scalar>(
    spec: &LayerSpec,
    w: &[S],
    mask: &[bool],
    x: &[S],
    grad_z: &[S],
    grad_w: &mut [S],
    grad_b: &mut [S],
) -> Vec<S> {
    let g = conv_geom(spec);
    let (ihw, ohw) = (g.ih * g.iw, g.oh * g.ow);
    let mut grad_x = vec![S::zero(); g.in_c * ihw];
    for (oc, gout) in grad_z.chunks_exact(ohw).enumerate() {
        grad_b[oc] += gout.iter().copied().sum::<S>();
        for ic in 0..g.in_c {
            let xin = &x[ic * ihw..(ic + 1) * ihw];
            let gin = &mut grad_x[ic * ihw..(ic + 1) * ihw];
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(ky, g.stride, g.pad, g.ih, g.oh);
                for kx in 0..g.kw {
                    let idx = ((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx;
                    if !mask[idx] {
                        continue;
                    }
                    let wv = w[idx];
                    let (x0, x1) = valid_range(kx, g.stride, g.pad, g.iw, g.ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = S::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gout[oy * g.ow + x0..oy * g.ow + x1];
                        let ibase = iy * g.iw;
                        if g.stride == 1 {
                            let start = ibase + x0 + kx - g.pad;
                            let len = x1 - x0;
                            let irow = &xin[start..start + len];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            for (gx, &gv) in gin[start..start + len].iter_mut().zip(grow) {
                                *gx += wv * gv;
                            }
                        } else {
                            for (j, &gv) in grow.iter().enumerate() {
                                let ix = ibase + (x0 + j) * g.stride + kx - g.pad;
                                acc += gv * xin[ix];
                                gin[ix] += wv * gv;
                            }
                        }
                    }
                    grad_w[idx] += acc;
                }
            }
        }
    }
    grad_x
}

fn upsample_forward<S: Scalar>(input: Shape, factor: usize, x: &[S]) -> Vec<S> {
    let (oh, ow) = (input.height * factor, input.width * factor);
    let mut z = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        let plane = &x[c * input.plane()..(c + 1) * input.plane()];
        for y in 0..oh {
            let row = &plane[(y / factor) * input.width..(y / factor + 1) * input.width];
            for xo in 0..ow {
                z.push(row[xo / factor]);
            }
        }
    }
    z
}

fn upsample_backward<S: Scalar>(input: Shape, factor: usize, grad_z: &[S]) -> Vec<S> {
    let (oh, ow) = (input.height * factor, input.width * factor);
    let mut grad_x = vec![S::zero(); input.numel()];
    for c in 0..input.channels {
        for y in 0..oh {
            let base = c * input.plane() + (y / factor) * input.width;
            let grow = &grad_z[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            for (xo, &g) in grow.iter().enumerate() {
                grad_x[base + xo / factor] += g;
            }
        }
    }
    grad_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerKind::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn conv(out_channels: usize, k: usize, stride: usize, padding: usize) -> LayerKind {
        Conv2d {
            out_channels,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
        }
    }

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Randomly masks `keep` of the synapses and randomises biases.
    fn random_network(input: Shape, stack: &[(LayerKind, Activation)], keep: f64, seed: u64) -> Network<f64> {
        let full = Architecture::build(input, stack).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let masks: Vec<Vec<bool>> = full
                .layers()
                .iter()
                .map(|l| (0..l.weight_len()).map(|_| rng.random_bool(keep)).collect())
                .collect();
            if let Ok(arch) = full.clone().with_masks(masks) {
                let mut net = Network::initialize(arch, InitRule::GlorotUniform, seed);
                for l in 0..net.biases.len() {
                    let b = (0..net.biases[l].len()).map(|_| rng.random_range(-0.3..0.3)).collect();
                    net.set_biases(l, b).unwrap();
                }
                return net;
            }
        }
        panic!("no valid random mask found");
    }

    fn conv_oracle(spec: &LayerSpec, w: &[f64], b: &[f64], x: &Tensor<f64>) -> Vec<f64> {
        let Conv2d {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } = spec.kind
        else {
            unreachable!()
        };
        let (ci, h, wd) = (spec.input.channels, spec.input.height, spec.input.width);
        let mut out = Vec::new();
        for o in 0..out_channels {
            for oy in 0..spec.output.height {
                for ox in 0..spec.output.width {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wi = ((o * ci + c) * kernel_h + ky) * kernel_w + kx;
                                acc += w[wi] * x.get(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(spec.activation.apply(acc));
                }
            }
        }
        out
    }

    /// Straight-line evaluation of every layer kind, independent of the
    /// weight-stationary loops in the network.
    fn forward_oracle(net: &Network<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let mut outputs: Vec<Tensor<f64>> = Vec::new();
        let mut cur = x.clone();
        for (l, spec) in net.architecture().layers().iter().enumerate() {
            let w = net.weights(l);
            let b = net.biases(l);
            let data = match spec.kind {
                Dense { outputs: n } => (0..n)
                    .map(|o| {
                        let fan = spec.input.numel();
                        let z = b[o] + (0..fan).map(|i| w[o * fan + i] * cur.data()[i]).sum::<f64>();
                        spec.activation.apply(z)
                    })
                    .collect(),
                Conv2d { .. } => conv_oracle(spec, w, b, &cur),
                Upsample { factor } => {
                    let mut v = Vec::new();
                    for c in 0..spec.output.channels {
                        for y in 0..spec.output.height {
                            for xx in 0..spec.output.width {
                                v.push(spec.activation.apply(cur.get(c, y / factor, xx / factor)));
                            }
                        }
                    }
                    v
                }
                Concat { from } => cur
                    .data()
                    .iter()
                    .chain(outputs[from].data())
                    .map(|&v| spec.activation.apply(v))
                    .collect(),
                Nonlinearity => cur.data().iter().map(|&v| spec.activation.apply(v)).collect(),
            };
            cur = Tensor::new(spec.output, data).unwrap();
            outputs.push(cur.clone());
        }
        cur.into_data()
    }

    fn mixed_stack() -> Vec<(LayerKind, Activation)> {
        vec![
            (conv(3, 3, 1, 1), Activation::Relu),
            (conv(4, 3, 2, 1), Activation::Sigmoid),
            (Upsample { factor: 2 }, Activation::Identity),
            (Concat { from: 0 }, Activation::Identity),
            (conv(2, 2, 1, 1), Activation::Identity),
            (Nonlinearity, Activation::Relu),
            (Dense { outputs: 3 }, Activation::Sigmoid),
        ]
    }

    #[test]
    fn dense_identity_forward() {
        let arch = Architecture::build(Shape::flat(2), &[(Dense { outputs: 1 }, Activation::Identity)]).unwrap();
        let net = Network::from_parts(arch, vec![vec![1.0, 2.0]], vec![vec![0.5]]).unwrap();
        let x = Tensor::new(Shape::flat(2), vec![1.0, 1.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[3.5]);
    }

    #[test]
    fn zero_sigmoid_network_outputs_half() {
        let arch = Architecture::build(Shape::new(3, 8, 8), &[(conv(1, 3, 1, 1), Activation::Sigmoid)]).unwrap();
        let net: Network<f32> = Network::zeros(arch);
        let x = Tensor::filled(Shape::new(3, 8, 8), 0.7);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let input = Shape::new(2, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let net = random_network(input, &mixed_stack(), 0.6, seed);
            let x = random_tensor(input, &mut rng);
            let got = net.forward(&x).unwrap();
            let want = forward_oracle(&net, &x);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn f32_forward_agrees_with_f64() {
        let input = Shape::new(2, 8, 6);
        let net = random_network(input, &mixed_stack(), 0.8, 3);
        let x = random_tensor(input, &mut ChaCha8Rng::seed_from_u64(1));
        let wide = net.forward(&x).unwrap();
        let narrow = net.cast::<f32>().forward(&x.cast()).unwrap();
        for (a, b) in wide.data().iter().zip(narrow.data()) {
            assert!((a - f64::from(*b)).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = random_network(Shape::new(2, 8, 6), &mixed_stack(), 1.0, 0);
        assert!(net.forward(&Tensor::zeros(Shape::new(2, 6, 8))).is_err());
    }

    fn finite_difference_check(net: &Network<f64>, loss: Loss, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = net.architecture().input_shape();
        let out = net.architecture().output_shape();
        let xs: Vec<_> = (0..3).map(|_| random_tensor(input, &mut rng)).collect();
        let ts: Vec<_> = (0..3)
            .map(|_| {
                let d = (0..out.numel()).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
                Tensor::new(out, d).unwrap()
            })
            .collect();
        let (grads, value) = net.gradients(&xs, &ts, loss).unwrap();
        assert_relative_eq!(value, net.loss(&xs, &ts, loss).unwrap(), max_relative = 1e-12);
        let h = 1e-4;
        for l in 0..net.weights.len() {
            for k in 0..net.weights[l].len() {
                if !net.architecture().mask(l)[k] {
                    assert_eq!(grads.weights[l][k], 0.0);
                    continue;
                }
                let mut plus = net.clone();
                plus.weights[l][k] += h;
                let mut minus = net.clone();
                minus.weights[l][k] -= h;
                let fd = (plus.loss(&xs, &ts, loss).unwrap() - minus.loss(&xs, &ts, loss).unwrap()) / (2.0 * h);
                let g = grads.weights[l][k];
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-3), "layer {l} weight {k}: {g} vs {fd}");
            }
            for k in 0..net.biases[l].len() {
                let mut plus = net.clone();
                plus.biases[l][k] += h;
                let mut minus = net.clone();
                minus.biases[l][k] -= h;
                let fd = (plus.loss(&xs, &ts, loss).unwrap() - minus.loss(&xs, &ts, loss).unwrap()) / (2.0 * h);
                let g = grads.biases[l][k];
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-3), "layer {l} bias {k}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let stack = [
            (conv(3, 3, 1, 1), Activation::Sigmoid),
            (conv(2, 3, 2, 1), Activation::Identity),
            (Upsample { factor: 2 }, Activation::Identity),
            (Concat { from: 0 }, Activation::Identity),
            (conv(1, 3, 1, 1), Activation::Sigmoid),
        ];
        for seed in 0..3 {
            let net = random_network(Shape::new(2, 6, 6), &stack, 0.7, seed);
            finite_difference_check(&net, Loss::BinaryCrossEntropy, seed);
            finite_difference_check(&net, Loss::MeanSquaredError, seed + 10);
        }
        let dense = [
            (Dense { outputs: 4 }, Activation::Sigmoid),
            (Dense { outputs: 2 }, Activation::Identity),
        ];
        let net = random_network(Shape::new(1, 3, 2), &dense, 0.8, 4);
        finite_difference_check(&net, Loss::MeanSquaredError, 4);
    }

    #[test]
    fn mse_gradient_vanishes_at_the_target() {
        let net = random_network(Shape::new(2, 8, 6), &mixed_stack(), 0.8, 2);
        let x = random_tensor(Shape::new(2, 8, 6), &mut ChaCha8Rng::seed_from_u64(9));
        let t = net.forward(&x).unwrap();
        let (grads, value) = net.gradients(&[x], &[t], Loss::MeanSquaredError).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.weights.iter().chain(&grads.biases).flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn set_weights_zeroes_masked_positions() {
        let net = random_network(Shape::new(2, 8, 6), &mixed_stack(), 0.5, 1);
        let mut net = net;
        let len = net.weights(0).len();
        net.set_weights(0, vec![1.0; len]).unwrap();
        for (w, &m) in net.weights(0).iter().zip(net.architecture().mask(0)) {
            assert_eq!(*w, if m { 1.0 } else { 0.0 });
        }
        assert!(net.set_weights(0, vec![1.0; len + 1]).is_err());
    }

    #[test]
    fn initialize_respects_mask_and_is_deterministic() {
        let a = random_network(Shape::new(2, 8, 6), &mixed_stack(), 0.5, 7);
        let arch = a.architecture().clone();
        let x = Network::<f32>::initialize(arch.clone(), InitRule::GlorotUniform, 11);
        let y = Network::<f32>::initialize(arch.clone(), InitRule::GlorotUniform, 11);
        let z = Network::<f32>::initialize(arch.clone(), InitRule::GlorotUniform, 12);
        assert_eq!(x, y);
        assert_ne!(x, z);
        for l in 0..arch.layers().len() {
            for (w, &m) in x.weights(l).iter().zip(arch.mask(l)) {
                assert_eq!(m, *w != 0.0);
            }
        }
        let c = Network::<f64>::initialize(arch.clone(), InitRule::ConstantMagnitude, 1);
        for l in arch.synaptic_layers() {
            let mags: Vec<f64> = c.weights(l).iter().filter(|w| **w != 0.0).map(|w| w.abs()).collect();
            assert!(mags.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn parallel_forward_is_read_only() {
        let net = random_network(Shape::new(2, 8, 6), &mixed_stack(), 0.7, 6);
        let inputs: Vec<_> = (0..4)
            .map(|i| random_tensor(Shape::new(2, 8, 6), &mut ChaCha8Rng::seed_from_u64(i)))
            .collect();
        let serial: Vec<_> = inputs.iter().map(|x| net.forward(x).unwrap()).collect();
        let parallel: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = inputs.iter().map(|x| s.spawn(|| net.forward(x).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(serial, parallel);
    }
}
