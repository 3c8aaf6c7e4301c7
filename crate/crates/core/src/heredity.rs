//! Synaptic probability models: a trained network's "DNA".
//!
//! Each living synapse is inherited independently with probability
//! `exp(strength / Z - 1)`, where strength is the absolute trained weight and
//! `Z` normalises the strongest synapse to probability 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;

/// Values attached to the living synapses of one layer, in ascending index order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    /// Number of weight elements in the layer (living or not).
    pub len: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseLayer {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Absolute weights of the living synapses of a trained generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynapticStrengths {
    pub generation: u32,
    pub layers: Vec<SparseLayer>,
}

/// How the normalisation constant `Z` is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `Z` is the maximum strength within each layer.
    #[default]
    PerLayer,
    /// A single `Z`, the maximum strength over the whole network.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnaLayer {
    pub z: f64,
    pub probabilities: SparseLayer,
}

/// Per-synapse inheritance probabilities of one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DnaModel {
    pub source_generation: u32,
    pub layers: Vec<DnaLayer>,
}

impl DnaModel {
    pub fn synapse_count(&self) -> usize {
        self.layers.iter().map(|l| l.probabilities.indices.len()).sum()
    }
}

pub fn extract_strengths<S: Scalar>(network: &Network<S>) -> SynapticStrengths {
    let arch = network.architecture();
    let layers = (0..arch.layers().len())
        .map(|l| {
            let mut layer = SparseLayer {
                len: arch.mask(l).len(),
                ..SparseLayer::default()
            };
            for (k, (&m, w)) in arch.mask(l).iter().zip(network.weights(l)).enumerate() {
                if m {
                    layer.indices.push(k);
                    layer.values.push(w.to_f64_lossy().abs());
                }
            }
            layer
        })
        .collect();
    SynapticStrengths {
        generation: arch.generation(),
        layers,
    }
}

/// Maximum strength in `layer`, or 1 when the layer is empty or all-zero.
pub fn compute_normalization(strengths: &SynapticStrengths, layer: usize) -> f64 {
    positive_or_one(strengths.layers[layer].values.iter().copied().fold(0.0, f64::max))
}

fn positive_or_one(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        1.0
    }
}

pub fn synapse_probability(strength: f64, z: f64) -> Result<f64> {
    if !(z > 0.0) || !(strength >= 0.0) || strength > z {
        return Err(Error::Consistency(format!(
            "synapse strength {strength} outside [0, Z] for Z = {z}"
        )));
    }
    Ok((strength / z - 1.0).exp())
}

pub fn encode_dna<S: Scalar>(network: &Network<S>) -> DnaModel {
    encode_dna_with(network, Normalization::PerLayer)
}

pub fn encode_dna_with<S: Scalar>(network: &Network<S>, normalization: Normalization) -> DnaModel {
    let strengths = extract_strengths(network);
    let global = positive_or_one(
        (0..strengths.layers.len())
            .flat_map(|l| strengths.layers[l].values.iter().copied())
            .fold(0.0, f64::max),
    );
    let layers = strengths
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let z = match normalization {
                Normalization::PerLayer => compute_normalization(&strengths, l),
                Normalization::Global => global,
            };
            let values = layer
                .values
                .iter()
                .map(|&s| synapse_probability(s, z).expect("Z bounds every strength by construction"))
                .collect();
            DnaLayer {
                z,
                probabilities: SparseLayer {
                    len: layer.len,
                    indices: layer.indices.clone(),
                    values,
                },
            }
        })
        .collect();
    DnaModel {
        source_generation: strengths.generation,
        layers,
    }
}
