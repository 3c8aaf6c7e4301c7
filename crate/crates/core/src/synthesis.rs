//! Stochastic synthesis of descendant architectures.
//!
//! Inheritance probabilities are scaled by the environmental factor, each
//! living synapse is kept when its scaled probability is at least a uniform
//! draw from (0, 1), and the sampled mask is repaired into a trainable network.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heredity::{encode_dna_with, DnaModel, Normalization, SparseLayer};
use crate::nn::{Architecture, Network, Node};
use crate::scalar::Scalar;

/// Default number of reseeded retries after a failed repair.
pub const DEFAULT_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    #[default]
    ConstantRetention,
}

/// Environmental factor model. The only implemented kind scales every
/// inheritance probability by a constant retention budget `C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConstraint {
    pub kind: EnvKind,
    retention: f64,
}

impl EnvConstraint {
    pub fn constant(retention: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&retention) {
            return Err(Error::InvalidConfig(format!(
                "retention budget must lie in [0, 1], got {retention}"
            )));
        }
        Ok(EnvConstraint {
            kind: EnvKind::ConstantRetention,
            retention,
        })
    }

    pub fn retention(&self) -> f64 {
        self.retention
    }

    /// Factor applied to an inheritance probability.
    pub fn factor(&self) -> f64 {
        match self.kind {
            EnvKind::ConstantRetention => self.retention,
        }
    }
}

/// Per-synapse synthesis probabilities, aligned with the DNA entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisProbabilities {
    pub layers: Vec<SparseLayer>,
}

impl SynthesisProbabilities {
    /// Builds probabilities directly, rejecting values outside [0, 1].
    pub fn new(layers: Vec<SparseLayer>) -> Result<Self> {
        for layer in &layers {
            if layer.indices.len() != layer.values.len()
                || layer.indices.iter().any(|&i| i >= layer.len)
            {
                return Err(Error::RejectedInput("malformed probability layer".into()));
            }
            if let Some(p) = layer.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::RejectedInput(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(SynthesisProbabilities { layers })
    }

    /// Sum of all probabilities: the expected number of sampled synapses.
    pub fn expected_count(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.values).sum()
    }

    /// Variance of the sampled synapse count.
    pub fn count_variance(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.values)
            .map(|p| p * (1.0 - p))
            .sum()
    }
}

pub fn synthesis_probabilities(dna: &DnaModel, env: &EnvConstraint) -> SynthesisProbabilities {
    let c = env.factor();
    SynthesisProbabilities {
        layers: dna
            .layers
            .iter()
            .map(|l| SparseLayer {
                len: l.probabilities.len,
                indices: l.probabilities.indices.clone(),
                values: l.probabilities.values.iter().map(|p| c * p).collect(),
            })
            .collect(),
    }
}

/// A sampled mask before repair, one boolean per weight element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    pub layers: Vec<Vec<bool>>,
}

impl RawMask {
    pub fn retained(&self) -> usize {
        self.layers.iter().flatten().filter(|&&m| m).count()
    }
}

/// Draws one open-interval uniform per synapse in layer-then-index order and
/// keeps the synapse when its probability is at least the draw.
pub fn realize(probabilities: &SynthesisProbabilities, seed: u64) -> RawMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = probabilities
        .layers
        .iter()
        .map(|layer| {
            let mut mask = vec![false; layer.len];
            for (k, p) in layer.iter() {
                let u: f64 = rng.sample(Open01);
                mask[k] = p >= u;
            }
            mask
        })
        .collect();
    RawMask { layers }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalReason {
    NoIncoming,
    NoOutgoing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum RepairAction {
    /// A layer sampled empty got its most probable synapse back.
    ForcedSynapse {
        layer: usize,
        index: usize,
        probability: f64,
    },
    /// A neuron lost all inputs or all outputs and was removed with its
    /// remaining synapses.
    NeuronRemoved {
        layer: usize,
        neuron: usize,
        reason: RemovalReason,
        synapses_masked: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub sampled: usize,
    pub forced: usize,
    pub pruned: usize,
}

/// Repairs a sampled mask into a valid descendant of `template`.
///
/// Empty synaptic layers get their single most probable synapse (lowest index
/// on ties); then neurons without inputs, and non-output neurons without
/// outputs, are removed until nothing changes. Fails when the result has an
/// empty synaptic layer or no input-to-output path.
pub fn repair(
    raw: &RawMask,
    probabilities: &SynthesisProbabilities,
    template: &Architecture,
) -> Result<(Architecture, Vec<RepairAction>)> {
    let (arch, log, _) = repair_counted(raw, probabilities, template)?;
    Ok((arch, log))
}

fn repair_counted(
    raw: &RawMask,
    probabilities: &SynthesisProbabilities,
    template: &Architecture,
) -> Result<(Architecture, Vec<RepairAction>, Vec<LayerCounts>)> {
    let specs = template.layers();
    if raw.layers.len() != specs.len() || probabilities.layers.len() != specs.len() {
        return Err(Error::RejectedInput(
            "mask or probabilities do not match the template layer count".into(),
        ));
    }
    for (l, (mask, living)) in raw.layers.iter().zip(template.masks()).enumerate() {
        if mask.len() != living.len() {
            return Err(Error::RejectedInput(format!("layer {l} mask has the wrong length")));
        }
        if mask.iter().zip(living).any(|(&m, &alive)| m && !alive) {
            return Err(Error::RejectedInput(format!(
                "layer {l} mask includes a synapse absent from the ancestor"
            )));
        }
    }

    let mut masks = raw.layers.clone();
    let mut alive: Vec<Vec<bool>> = (0..specs.len()).map(|l| template.alive(l).to_vec()).collect();
    let mut counts: Vec<LayerCounts> = masks
        .iter()
        .map(|m| LayerCounts {
            sampled: m.iter().filter(|&&b| b).count(),
            ..LayerCounts::default()
        })
        .collect();
    let mut log = Vec::new();
    let fail = |reason: String| Error::SynthesisFailure {
        attempts: 1,
        last_seed: 0,
        reason,
    };

    for l in template.synaptic_layers() {
        if counts[l].sampled > 0 {
            continue;
        }
        let best = probabilities.layers[l]
            .iter()
            .fold(None::<(usize, f64)>, |best, (k, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((k, p)),
            });
        let Some((index, probability)) = best else {
            return Err(fail(format!("layer {l} has no living synapse to force")));
        };
        masks[l][index] = true;
        counts[l].forced += 1;
        log.push(RepairAction::ForcedSynapse {
            layer: l,
            index,
            probability,
        });
    }

    let sources = template.channel_sources();
    let mut is_output: Vec<Vec<bool>> = specs.iter().map(|s| vec![false; s.neuron_count()]).collect();
    for node in template.output_nodes() {
        if let Node::Neuron { layer, index } = node {
            is_output[layer][index] = true;
        }
    }
    let source_of = |l: usize, k: usize| {
        let (unit, neuron) = specs[l].endpoints(k);
        (sources[l][specs[l].unit_channel(unit)], neuron)
    };

    loop {
        let mut has_in: Vec<Vec<bool>> = specs.iter().map(|s| vec![false; s.neuron_count()]).collect();
        let mut has_out = has_in.clone();
        for l in template.synaptic_layers() {
            for k in (0..masks[l].len()).filter(|&k| masks[l][k]) {
                let (src, neuron) = source_of(l, k);
                has_in[l][neuron] = true;
                if let Node::Neuron { layer, index } = src {
                    has_out[layer][index] = true;
                }
            }
        }
        let mut removed = Vec::new();
        for l in template.synaptic_layers() {
            for n in 0..alive[l].len() {
                if !alive[l][n] {
                    continue;
                }
                let reason = if !has_in[l][n] {
                    RemovalReason::NoIncoming
                } else if !has_out[l][n] && !is_output[l][n] {
                    RemovalReason::NoOutgoing
                } else {
                    continue;
                };
                alive[l][n] = false;
                removed.push((l, n, reason));
            }
        }
        if removed.is_empty() {
            break;
        }
        let mut masked_per_neuron = std::collections::HashMap::new();
        for l in template.synaptic_layers() {
            for k in 0..masks[l].len() {
                if !masks[l][k] {
                    continue;
                }
                let (src, neuron) = source_of(l, k);
                let owner = if !alive[l][neuron] {
                    Some((l, neuron))
                } else if let Node::Neuron { layer, index } = src {
                    (!alive[layer][index]).then_some((layer, index))
                } else {
                    None
                };
                if let Some(owner) = owner {
                    masks[l][k] = false;
                    counts[l].pruned += 1;
                    *masked_per_neuron.entry(owner).or_insert(0usize) += 1;
                }
            }
        }
        for (layer, neuron, reason) in removed {
            log.push(RepairAction::NeuronRemoved {
                layer,
                neuron,
                reason,
                synapses_masked: masked_per_neuron.get(&(layer, neuron)).copied().unwrap_or(0),
            });
        }
    }

    if let Some(l) = template
        .synaptic_layers()
        .find(|&l| !masks[l].iter().any(|&m| m))
    {
        return Err(fail(format!("layer {l} lost every synapse during repair")));
    }
    let arch = Architecture::from_parts(
        template.input_shape(),
        specs.to_vec(),
        masks,
        alive,
        template.generation() + 1,
    )
    .map_err(|e| fail(e.to_string()))?;
    Ok((arch, log, counts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub normalization: Normalization,
    pub max_retries: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            normalization: Normalization::PerLayer,
            max_retries: DEFAULT_RETRIES,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutcome {
    pub architecture: Architecture,
    pub counts: Vec<LayerCounts>,
    /// Seed of the successful attempt.
    pub seed: u64,
    pub attempts: usize,
    pub log: Vec<RepairAction>,
}

impl SynthesisOutcome {
    /// Synapses sampled before any repair adjustment.
    pub fn sampled(&self) -> usize {
        self.counts.iter().map(|c| c.sampled).sum()
    }
}

pub fn synthesize<S: Scalar>(
    ancestor: &Network<S>,
    env: &EnvConstraint,
    seed: u64,
) -> Result<SynthesisOutcome> {
    synthesize_with(ancestor, env, seed, &SynthesisOptions::default())
}

/// Encodes the ancestor, scales, samples and repairs. A failed repair is
/// retried with `seed + 1`, `seed + 2`, ... up to `max_retries` times.
pub fn synthesize_with<S: Scalar>(
    ancestor: &Network<S>,
    env: &EnvConstraint,
    seed: u64,
    options: &SynthesisOptions,
) -> Result<SynthesisOutcome> {
    let dna = encode_dna_with(ancestor, options.normalization);
    let probabilities = synthesis_probabilities(&dna, env);
    let template = ancestor.architecture();
    let mut last_reason = String::new();
    let mut attempt_seed = seed;
    for attempt in 0..=options.max_retries {
        attempt_seed = seed.wrapping_add(attempt as u64);
        let raw = realize(&probabilities, attempt_seed);
        match repair_counted(&raw, &probabilities, template) {
            Ok((architecture, log, counts)) => {
                return Ok(SynthesisOutcome {
                    architecture,
                    counts,
                    seed: attempt_seed,
                    attempts: attempt + 1,
                    log,
                })
            }
            Err(Error::SynthesisFailure { reason, .. }) => last_reason = reason,
            Err(other) => return Err(other),
        }
    }
    Err(Error::SynthesisFailure {
        attempts: options.max_retries + 1,
        last_seed: attempt_seed,
        reason: last_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heredity::encode_dna;
    use crate::nn::{Activation, InitRule, LayerKind, Shape};

    fn dense_arch(sizes: &[usize]) -> Architecture {
        let stack: Vec<_> = sizes[1..]
            .iter()
            .map(|&n| (LayerKind::Dense { outputs: n }, Activation::Relu))
            .collect();
        Architecture::build(Shape::flat(sizes[0]), &stack).unwrap()
    }

    fn probs(layers: Vec<Vec<f64>>) -> SynthesisProbabilities {
        SynthesisProbabilities::new(
            layers
                .into_iter()
                .map(|values| SparseLayer {
                    len: values.len(),
                    indices: (0..values.len()).collect(),
                    values,
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_weights(arch: Architecture, seed: u64) -> Network<f64> {
        Network::initialize(arch, InitRule::GlorotUniform, seed)
    }

    #[test]
    fn certain_and_impossible_synapses() {
        let p = probs(vec![vec![0.0, 1.0, 0.0, 1.0]]);
        for seed in 0..200 {
            assert_eq!(realize(&p, seed).layers[0], vec![false, true, false, true]);
        }
    }

    #[test]
    fn retained_count_matches_expectation() {
        let values: Vec<f64> = (0..2000).map(|i| (i % 97) as f64 / 96.0).collect();
        let p = probs(vec![values]);
        let mean = p.expected_count();
        let sd = p.count_variance().sqrt();
        let runs = 200;
        let total: usize = (0..runs).map(|s| realize(&p, s).retained()).sum();
        let avg = total as f64 / runs as f64;
        assert!((avg - mean).abs() <= 3.0 * sd / (runs as f64).sqrt(), "{avg} vs {mean}");
    }

    #[test]
    fn outcome_frequencies_follow_the_product_form() {
        let values = vec![0.2, 0.7, 0.5, 0.9];
        let p = probs(vec![values.clone()]);
        let draws = 40_000;
        let mut counts = [0usize; 16];
        for seed in 0..draws {
            let m = &realize(&p, seed).layers[0];
            let code = m.iter().enumerate().fold(0, |acc, (i, &b)| acc | (usize::from(b) << i));
            counts[code] += 1;
        }
        for (code, &n) in counts.iter().enumerate() {
            let expected: f64 = values
                .iter()
                .enumerate()
                .map(|(i, &v)| if code >> i & 1 == 1 { v } else { 1.0 - v })
                .product();
            let se = (expected * (1.0 - expected) / draws as f64).sqrt();
            assert!((n as f64 / draws as f64 - expected).abs() <= 4.0 * se, "outcome {code}");
        }
    }

    #[test]
    fn probabilities_outside_the_unit_interval_are_rejected() {
        let bad = SparseLayer {
            len: 2,
            indices: vec![0, 1],
            values: vec![0.5, 1.2],
        };
        assert!(SynthesisProbabilities::new(vec![bad]).is_err());
        assert!(EnvConstraint::constant(-0.1).is_err());
        assert!(EnvConstraint::constant(1.1).is_err());
    }

    #[test]
    fn empty_layer_gets_its_most_probable_synapse() {
        let template = dense_arch(&[3, 1]);
        let p = probs(vec![vec![0.1, 0.3, 0.2]]);
        let raw = RawMask {
            layers: vec![vec![false; 3]],
        };
        let (arch, log) = repair(&raw, &p, &template).unwrap();
        assert_eq!(arch.mask(0), &[false, true, false]);
        assert_eq!(
            log,
            vec![RepairAction::ForcedSynapse {
                layer: 0,
                index: 1,
                probability: 0.3
            }]
        );
        let tied = probs(vec![vec![0.3, 0.3, 0.2]]);
        let (arch, _) = repair(&raw, &tied, &template).unwrap();
        assert_eq!(arch.mask(0), &[true, false, false]);
    }

    #[test]
    fn full_mask_is_left_alone() {
        let template = dense_arch(&[4, 3, 2]);
        let p = probs(template.masks().iter().map(|m| vec![0.5; m.len()]).collect());
        let raw = RawMask {
            layers: template.masks().to_vec(),
        };
        let (arch, log) = repair(&raw, &p, &template).unwrap();
        assert!(log.is_empty());
        assert_eq!(arch.masks(), template.masks());
        assert_eq!(arch.generation(), 2);
    }

    #[test]
    fn dangling_neurons_are_removed() {
        let template = dense_arch(&[2, 2, 1]);
        let p = probs(vec![vec![0.5; 4], vec![0.5; 2]]);
        // Hidden neuron 1 has input but no output; neuron 0 feeds the output.
        let raw = RawMask {
            layers: vec![vec![true, false, true, false], vec![true, false]],
        };
        let (arch, log) = repair(&raw, &p, &template).unwrap();
        assert_eq!(arch.mask(0), &[true, false, false, false]);
        assert_eq!(arch.alive(0), &[true, false]);
        assert!(log.contains(&RepairAction::NeuronRemoved {
            layer: 0,
            neuron: 1,
            reason: RemovalReason::NoOutgoing,
            synapses_masked: 1
        }));
    }

    #[test]
    fn repair_is_idempotent_and_only_removes_or_forces() {
        let net = random_weights(dense_arch(&[6, 5, 4, 2]), 3);
        let dna = encode_dna(&net);
        let p = synthesis_probabilities(&dna, &EnvConstraint::constant(0.5).unwrap());
        let mut ok = 0;
        for seed in 0..50 {
            let raw = realize(&p, seed);
            let Ok((once, log)) = repair(&raw, &p, net.architecture()) else {
                continue;
            };
            ok += 1;
            let forced: Vec<(usize, usize)> = log
                .iter()
                .filter_map(|a| match a {
                    RepairAction::ForcedSynapse { layer, index, .. } => Some((*layer, *index)),
                    _ => None,
                })
                .collect();
            for (l, mask) in once.masks().iter().enumerate() {
                for (k, &m) in mask.iter().enumerate() {
                    assert!(!m || raw.layers[l][k] || forced.contains(&(l, k)));
                }
            }
            let again = RawMask {
                layers: once.masks().to_vec(),
            };
            let (twice, log2) = repair(&again, &p, &once).unwrap();
            assert!(log2.is_empty());
            assert_eq!(twice.masks(), once.masks());
        }
        assert!(ok > 10);
    }

    #[test]
    fn different_seeds_give_different_descendants() {
        let net = random_weights(dense_arch(&[8, 8, 4]), 1);
        let env = EnvConstraint::constant(0.6).unwrap();
        let masks: std::collections::HashSet<Vec<Vec<bool>>> = (0..10)
            .map(|s| synthesize(&net, &env, s).unwrap().architecture.masks().to_vec())
            .collect();
        assert!(masks.len() > 5);
    }

    #[test]
    fn equal_strengths_and_full_retention_copy_the_ancestor() {
        let arch = dense_arch(&[5, 4, 3]);
        let net = Network::<f64>::initialize(arch.clone(), InitRule::ConstantMagnitude, 2);
        let out = synthesize(&net, &EnvConstraint::constant(1.0).unwrap(), 77).unwrap();
        assert_eq!(out.architecture.masks(), arch.masks());
        assert_eq!(out.sampled(), arch.synapse_count());
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let net = random_weights(dense_arch(&[10, 6, 3]), 4);
        let env = EnvConstraint::constant(0.4).unwrap();
        assert_eq!(synthesize(&net, &env, 5).unwrap(), synthesize(&net, &env, 5).unwrap());
    }

    #[test]
    fn large_layer_count_within_three_sigma() {
        let net = random_weights(dense_arch(&[250, 200]), 8);
        let env = EnvConstraint::constant(0.4).unwrap();
        let p = synthesis_probabilities(&encode_dna(&net), &env);
        let out = synthesize(&net, &env, 123).unwrap();
        let sd = p.count_variance().sqrt();
        assert!((out.sampled() as f64 - p.expected_count()).abs() <= 3.0 * sd);
        assert_eq!(out.architecture.synapse_count(), out.sampled());
    }

    #[test]
    fn unrepairable_samples_exhaust_the_retries() {
        let arch = dense_arch(&[1, 2, 1]);
        let net = Network::from_parts(arch, vec![vec![1.0, 0.5], vec![0.5, 1.0]], vec![vec![0.0; 2], vec![0.0]]).unwrap();
        let env = EnvConstraint::constant(1e-12).unwrap();
        match synthesize(&net, &env, 40) {
            Err(Error::SynthesisFailure { attempts, last_seed, .. }) => {
                assert_eq!(attempts, DEFAULT_RETRIES + 1);
                assert_eq!(last_seed, 40 + DEFAULT_RETRIES as u64);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
