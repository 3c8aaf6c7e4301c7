use super::layer::{infer_output, Activation, LayerKind, LayerSpec};
use super::tensor::Shape;
use crate::error::{Error, Result};

/// A neuron in the layered synapse graph: either a network input channel or an
/// output unit/channel of a layer with synapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Input(usize),
    Neuron { layer: usize, index: usize },
}

/// The possible architecture of a network together with the subset of it that
/// currently exists: one mask bit per weight element and one alive flag per neuron.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    input: Shape,
    layers: Vec<LayerSpec>,
    masks: Vec<Vec<bool>>,
    alive: Vec<Vec<bool>>,
    generation: u32,
}

impl Architecture {
    /// Builds a fully connected generation-1 architecture, inferring every
    /// layer's shapes from `input`.
    pub fn build(input: Shape, stack: &[(LayerKind, Activation)]) -> Result<Self> {
        let mut layers = Vec::with_capacity(stack.len());
        let mut shapes: Vec<Shape> = Vec::with_capacity(stack.len());
        let mut current = input;
        for (kind, activation) in stack {
            let output = infer_output(kind, current, &shapes)?;
            layers.push(LayerSpec {
                kind: *kind,
                activation: *activation,
                input: current,
                output,
            });
            shapes.push(output);
            current = output;
        }
        let masks = layers.iter().map(|l| vec![true; l.weight_len()]).collect();
        let alive = layers.iter().map(|l| vec![true; l.neuron_count()]).collect();
        let arch = Architecture {
            input,
            layers,
            masks,
            alive,
            generation: 1,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Reassembles an architecture from stored parts and checks every invariant.
    pub fn from_parts(
        input: Shape,
        layers: Vec<LayerSpec>,
        masks: Vec<Vec<bool>>,
        alive: Vec<Vec<bool>>,
        generation: u32,
    ) -> Result<Self> {
        let arch = Architecture {
            input,
            layers,
            masks,
            alive,
            generation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn mask(&self, layer: usize) -> &[bool] {
        &self.masks[layer]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn alive(&self, layer: usize) -> &[bool] {
        &self.alive[layer]
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn with_generation(mut self, generation: u32) -> Self {
        self.generation = generation;
        self
    }

    /// Indices of layers that carry synapses.
    pub fn synaptic_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_synapses())
            .map(|(i, _)| i)
    }

    pub fn layer_synapse_count(&self, layer: usize) -> usize {
        self.masks[layer].iter().filter(|&&m| m).count()
    }

    /// Number of unmasked weight elements; biases are not synapses.
    pub fn synapse_count(&self) -> usize {
        (0..self.layers.len())
            .map(|l| self.layer_synapse_count(l))
            .sum()
    }

    /// Number of weight elements in the possible architecture.
    pub fn possible_synapses(&self) -> usize {
        self.layers.iter().map(LayerSpec::weight_len).sum()
    }

    /// For every activation in the network (index 0 is the network input, index
    /// `l + 1` the output of layer `l`), the neuron each channel originates from.
    pub fn channel_sources(&self) -> Vec<Vec<Node>> {
        let mut sources = Vec::with_capacity(self.layers.len() + 1);
        sources.push((0..self.input.channels).map(Node::Input).collect::<Vec<_>>());
        for (l, spec) in self.layers.iter().enumerate() {
            let next = match spec.kind {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => (0..spec.neuron_count())
                    .map(|index| Node::Neuron { layer: l, index })
                    .collect(),
                LayerKind::Upsample { .. } | LayerKind::Nonlinearity => sources[l].clone(),
                LayerKind::Concat { from } => {
                    let mut merged = sources[l].clone();
                    merged.extend_from_slice(&sources[from + 1]);
                    merged
                }
            };
            sources.push(next);
        }
        sources
    }

    /// Neurons whose values appear in the network output.
    pub fn output_nodes(&self) -> Vec<Node> {
        let mut nodes = self.channel_sources().pop().unwrap_or_default();
        nodes.sort();
        nodes.dedup();
        nodes
    }

    /// Whether an input channel reaches an output neuron through unmasked synapses.
    pub fn has_path(&self) -> bool {
        let sources = self.channel_sources();
        let mut reached: Vec<Vec<bool>> = self
            .layers
            .iter()
            .map(|l| vec![false; l.neuron_count()])
            .collect();
        let is_reached = |reached: &Vec<Vec<bool>>, node: Node| match node {
            Node::Input(_) => true,
            Node::Neuron { layer, index } => reached[layer][index],
        };
        for (l, spec) in self.layers.iter().enumerate() {
            if !spec.kind.has_synapses() {
                continue;
            }
            for (k, _) in self.masks[l].iter().enumerate().filter(|(_, &m)| m) {
                let (unit, neuron) = spec.endpoints(k);
                if !reached[l][neuron] && is_reached(&reached, sources[l][spec.unit_channel(unit)]) {
                    reached[l][neuron] = true;
                }
            }
        }
        let outputs = self.output_nodes();
        outputs.is_empty() || outputs.iter().any(|&n| is_reached(&reached, n))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.generation < 1 {
            return bad("generation index must be at least 1".into());
        }
        if self.masks.len() != self.layers.len() || self.alive.len() != self.layers.len() {
            return bad("mask or alive-flag list does not match the layer count".into());
        }
        let mut previous: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut current = self.input;
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.input != current {
                return bad(format!(
                    "layer {l} declares input {} but receives {current}",
                    spec.input
                ));
            }
            let computed = infer_output(&spec.kind, current, &previous)?;
            if computed != spec.output {
                return bad(format!(
                    "layer {l} declares output {} but computes {computed}",
                    spec.output
                ));
            }
            if self.masks[l].len() != spec.weight_len() {
                return bad(format!(
                    "layer {l} mask has {} entries for {} weights",
                    self.masks[l].len(),
                    spec.weight_len()
                ));
            }
            if self.alive[l].len() != spec.neuron_count() {
                return bad(format!(
                    "layer {l} has {} alive flags for {} neurons",
                    self.alive[l].len(),
                    spec.neuron_count()
                ));
            }
            previous.push(computed);
            current = computed;
        }

        let sources = self.channel_sources();
        for (l, spec) in self.layers.iter().enumerate() {
            if !spec.kind.has_synapses() {
                continue;
            }
            for (k, _) in self.masks[l].iter().enumerate().filter(|(_, &m)| m) {
                let (unit, neuron) = spec.endpoints(k);
                if !self.alive[l][neuron] {
                    return bad(format!(
                        "layer {l} synapse {k} enters dead neuron {neuron}"
                    ));
                }
                if let Node::Neuron { layer, index } = sources[l][spec.unit_channel(unit)] {
                    if !self.alive[layer][index] {
                        return bad(format!(
                            "layer {l} synapse {k} leaves dead neuron {index} of layer {layer}"
                        ));
                    }
                }
            }
        }
        if !self.has_path() {
            return bad("no unmasked path from input to output".into());
        }
        Ok(())
    }
}

/// Number of unmasked weight elements, excluding biases.
pub fn count_synapses(architecture: &Architecture) -> usize {
    architecture.synapse_count()
}

impl Architecture {
    /// Replaces every layer mask, keeping neuron flags, and revalidates.
    pub fn with_masks(mut self, masks: Vec<Vec<bool>>) -> Result<Self> {
        self.masks = masks;
        self.validate()?;
        Ok(self)
    }
}
