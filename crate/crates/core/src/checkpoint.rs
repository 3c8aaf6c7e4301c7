//! On-disk checkpoints: `manifest.json`, `weights.bin` and `mask.bin` per generation.
//!
//! `weights.bin` holds every weight tensor, then every bias tensor, of the
//! layers with synapses in manifest order: row-major little-endian `f32`.
//! `mask.bin` holds each such layer's mask bit-packed least significant bit
//! first, padded to a whole byte per layer. The manifest carries an FNV-1a
//! 64-bit checksum over `weights.bin` followed by `mask.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineage::GenerationRow;
use crate::nn::{Architecture, LayerSpec, Network, Shape};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MASK_FILE: &str = "mask.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub layer: usize,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
    pub synapses: usize,
    pub dead_neurons: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub synthesis: Option<u64>,
    pub init: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMetrics {
    pub efficiency_x: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generation: u32,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    pub num_synapses: usize,
    pub seeds: Seeds,
    pub metrics: ManifestMetrics,
    /// FNV-1a 64 of `weights.bin` then `mask.bin`, as 16 hex digits.
    pub checksum: String,
}

/// 64-bit FNV-1a over the concatenation of `parts`.
pub fn fnv1a64<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &byte in part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

fn pack_bits(mask: &[bool], out: &mut Vec<u8>) {
    for chunk in mask.chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << i));
        out.push(byte);
    }
}

fn encode_blobs(network: &Network<f32>) -> (Vec<u8>, Vec<u8>) {
    let arch = network.architecture();
    let layers: Vec<usize> = arch.synaptic_layers().collect();
    let mut weights = Vec::new();
    for &l in &layers {
        weights.extend(network.weights(l).iter().flat_map(|v| v.to_le_bytes()));
    }
    for &l in &layers {
        weights.extend(network.biases(l).iter().flat_map(|v| v.to_le_bytes()));
    }
    let mut mask = Vec::new();
    for &l in &layers {
        pack_bits(arch.mask(l), &mut mask);
    }
    (weights, mask)
}

pub fn save_checkpoint(network: &Network<f32>, row: &GenerationRow, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = network.architecture();
    let (weights, mask) = encode_blobs(network);
    let tensors = arch
        .synaptic_layers()
        .map(|l| {
            let spec = &arch.layers()[l];
            TensorEntry {
                layer: l,
                weight_shape: spec.weight_dims(),
                bias_shape: vec![spec.neuron_count()],
                synapses: arch.layer_synapse_count(l),
                dead_neurons: arch
                    .alive(l)
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| !a)
                    .map(|(i, _)| i)
                    .collect(),
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generation: arch.generation(),
        input: arch.input_shape(),
        layers: arch.layers().to_vec(),
        tensors,
        num_synapses: arch.synapse_count(),
        seeds: Seeds {
            synthesis: row.synthesis_seed,
            init: row.init_seed,
        },
        metrics: ManifestMetrics {
            efficiency_x: row.efficiency,
            f_beta: row.f_beta,
            mae: row.mae,
            train_loss: row.train_loss,
            wall_time_s: row.wall_time_s,
        },
        checksum: format!("{:016x}", fnv1a64([weights.as_slice(), mask.as_slice()])),
    };
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(WEIGHTS_FILE, &weights)?;
    write(MASK_FILE, &mask)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::io(dir.join(MANIFEST_FILE), std::io::Error::other(e)))?;
    write(MANIFEST_FILE, &json)
}

fn read_f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

/// Loads and validates a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Network<f32>, GenerationRow)> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| Error::corrupt(&path, format!("cannot read: {e}")))
    };
    let manifest_bytes = read(MANIFEST_FILE)?;
    let weights = read(WEIGHTS_FILE)?;
    let mask = read(MASK_FILE)?;
    let corrupt = |reason: String| Error::corrupt(dir, reason);

    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let synaptic: Vec<usize> = manifest
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_synapses())
        .map(|(i, _)| i)
        .collect();
    if manifest.tensors.len() != synaptic.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors for {} layers with synapses",
            manifest.tensors.len(),
            synaptic.len()
        )));
    }
    for (entry, &l) in manifest.tensors.iter().zip(&synaptic) {
        let spec = &manifest.layers[l];
        if entry.layer != l
            || entry.weight_shape != spec.weight_dims()
            || entry.bias_shape != [spec.neuron_count()]
        {
            return Err(corrupt(format!("tensor entry for layer {l} does not match its layer spec")));
        }
    }
    let weight_total: usize = synaptic.iter().map(|&l| manifest.layers[l].weight_len()).sum();
    let bias_total: usize = synaptic.iter().map(|&l| manifest.layers[l].neuron_count()).sum();
    if weights.len() != 4 * (weight_total + bias_total) {
        return Err(corrupt(format!(
            "{WEIGHTS_FILE} has {} bytes, expected {}",
            weights.len(),
            4 * (weight_total + bias_total)
        )));
    }
    let mask_bytes: usize = synaptic
        .iter()
        .map(|&l| manifest.layers[l].weight_len().div_ceil(8))
        .sum();
    if mask.len() != mask_bytes {
        return Err(corrupt(format!(
            "{MASK_FILE} has {} bytes, expected {mask_bytes}",
            mask.len()
        )));
    }
    let checksum = format!("{:016x}", fnv1a64([weights.as_slice(), mask.as_slice()]));
    if checksum != manifest.checksum {
        return Err(corrupt(format!(
            "checksum {checksum} does not match manifest {}",
            manifest.checksum
        )));
    }

    let n = manifest.layers.len();
    let mut masks: Vec<Vec<bool>> = manifest.layers.iter().map(|_| Vec::new()).collect();
    let mut alive: Vec<Vec<bool>> = manifest
        .layers
        .iter()
        .map(|l| vec![true; l.neuron_count()])
        .collect();
    let mut weight_vecs: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut bias_vecs: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut offset = 0usize;
    let mut values = read_f32s(&weights);
    for (entry, &l) in manifest.tensors.iter().zip(&synaptic) {
        let spec = &manifest.layers[l];
        let len = spec.weight_len();
        let bits = &mask[offset..offset + len.div_ceil(8)];
        offset += bits.len();
        masks[l] = (0..len).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
        weight_vecs[l] = values.by_ref().take(len).collect();
        for &d in &entry.dead_neurons {
            let slot = alive[l]
                .get_mut(d)
                .ok_or_else(|| corrupt(format!("dead neuron {d} out of range in layer {l}")))?;
            *slot = false;
        }
        if entry.synapses != masks[l].iter().filter(|&&m| m).count() {
            return Err(corrupt(format!("layer {l} synapse count disagrees with mask")));
        }
        if weight_vecs[l].iter().zip(&masks[l]).any(|(w, &m)| !m && *w != 0.0) {
            return Err(corrupt(format!("layer {l} has a nonzero masked weight")));
        }
    }
    for &l in &synaptic {
        bias_vecs[l] = values.by_ref().take(manifest.layers[l].neuron_count()).collect();
    }
    let arch = Architecture::from_parts(manifest.input, manifest.layers, masks, alive, manifest.generation)
        .map_err(|e| corrupt(e.to_string()))?;
    if arch.synapse_count() != manifest.num_synapses {
        return Err(corrupt("total synapse count disagrees with masks".into()));
    }
    let network = Network::from_parts(arch, weight_vecs, bias_vecs).map_err(|e| corrupt(e.to_string()))?;
    let row = GenerationRow {
        generation: manifest.generation,
        num_synapses: manifest.num_synapses,
        efficiency: manifest.metrics.efficiency_x,
        f_beta: manifest.metrics.f_beta,
        mae: manifest.metrics.mae,
        train_loss: manifest.metrics.train_loss,
        wall_time_s: manifest.metrics.wall_time_s,
        synthesis_seed: manifest.seeds.synthesis,
        init_seed: manifest.seeds.init,
        checkpoint: Some(dir.to_path_buf()),
    };
    Ok((network, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, InitRule, LayerKind, Shape};

    fn sample_network() -> Network<f32> {
        let full = Architecture::build(
            Shape::new(2, 6, 6),
            &[
                (
                    LayerKind::Conv2d {
                        out_channels: 3,
                        kernel_h: 3,
                        kernel_w: 3,
                        stride: 1,
                        padding: 1,
                    },
                    Activation::Relu,
                ),
                (LayerKind::Upsample { factor: 1 }, Activation::Identity),
                (LayerKind::Dense { outputs: 2 }, Activation::Sigmoid),
            ],
        )
        .unwrap();
        let masks: Vec<Vec<bool>> = full
            .masks()
            .iter()
            .map(|m| (0..m.len()).map(|k| k % 3 != 1).collect())
            .collect();
        let arch = full.with_masks(masks).unwrap().with_generation(3);
        Network::initialize(arch, InitRule::GlorotUniform, 4)
    }

    fn row() -> GenerationRow {
        GenerationRow {
            generation: 3,
            num_synapses: sample_network().architecture().synapse_count(),
            efficiency: 2.5,
            f_beta: 0.75,
            mae: 0.125,
            train_loss: 0.3,
            wall_time_s: 1.5,
            synthesis_seed: Some(7),
            init_seed: 9,
            checkpoint: None,
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64([&b""[..]]), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64([&b"a"[..]]), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64([&b"foo"[..]]), fnv1a64([&b"f"[..], &b"oo"[..]]));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample_network();
        save_checkpoint(&net, &row(), dir.path()).unwrap();
        let (loaded, r) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(r.generation, 3);
        assert_eq!(r.synthesis_seed, Some(7));
        assert_eq!(r.f_beta, 0.75);
        let again = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, &row(), again.path()).unwrap();
        for f in [WEIGHTS_FILE, MASK_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(again.path().join(f)).unwrap()
            );
        }
    }

    fn expect_corrupt(dir: &Path) {
        match load_checkpoint(dir) {
            Err(Error::CorruptCheckpoint { .. }) => {}
            other => panic!("expected a corrupt checkpoint, got {other:?}"),
        }
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_network(), &row(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        expect_corrupt(dir.path());
    }

    #[test]
    fn flipped_bit_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_network(), &row(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] ^= 0x10;
        std::fs::write(&path, bytes).unwrap();
        expect_corrupt(dir.path());
    }

    #[test]
    fn manifest_tensor_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_network(), &row(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        manifest.tensors.pop();
        std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        expect_corrupt(dir.path());
    }

    #[test]
    fn missing_or_garbled_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_network(), &row(), dir.path()).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), b"{ not json").unwrap();
        expect_corrupt(dir.path());
        std::fs::remove_file(dir.path().join(MASK_FILE)).unwrap();
        expect_corrupt(dir.path());
        expect_corrupt(Path::new("/nonexistent/checkpoint"));
    }
}
