//! The generation loop: train the ancestor, then repeatedly encode, synthesize
//! a descendant under the environmental constraint, train it from scratch and
//! evaluate it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::save_checkpoint;
use crate::data::{write_gray_png, DatasetSplit};
use crate::error::{Error, Result};
use crate::lineage::{GenerationRow, LineageRecord};
use crate::metrics::{architectural_efficiency, evaluate, MetricsConfig};
use crate::nn::{evaluate_loss, train, Architecture, Network, TrainConfig};
use crate::synthesis::{synthesize_with, EnvConstraint, SynthesisOptions};

pub const LINEAGE_FILE: &str = "lineage.csv";
pub const DEFAULT_PROBES: usize = 5;

#[derive(Clone, Debug)]
pub struct EvolutionConfig {
    pub generations: u32,
    pub env: EnvConstraint,
    /// Training hyperparameters shared by every generation. The seed field is
    /// replaced by the per-generation initialisation seed.
    pub train: TrainConfig,
    pub base_seed: u64,
    pub template: Architecture,
    /// Start descendants from the ancestor's surviving weights instead of a
    /// fresh initialisation.
    pub inherit_weights: bool,
    pub synthesis: SynthesisOptions,
    pub metrics: MetricsConfig,
    /// Where checkpoints, saliency maps and `lineage.csv` go; nothing is
    /// written when `None`.
    pub output_dir: Option<PathBuf>,
    /// Number of leading test samples whose predicted maps are saved.
    pub probe_count: usize,
}

impl EvolutionConfig {
    pub fn new(template: Architecture, env: EnvConstraint, train: TrainConfig) -> Self {
        EvolutionConfig {
            generations: 4,
            env,
            train,
            base_seed: 0,
            template,
            inherit_weights: false,
            synthesis: SynthesisOptions::default(),
            metrics: MetricsConfig::default(),
            output_dir: None,
            probe_count: DEFAULT_PROBES,
        }
    }

    pub fn synthesis_seed(&self, generation: u32) -> u64 {
        self.base_seed ^ u64::from(generation)
    }

    pub fn init_seed(&self, generation: u32) -> u64 {
        self.base_seed ^ (u64::from(generation) + (1u64 << 32))
    }

    pub fn validate(&self) -> Result<()> {
        if self.generations < 1 {
            return Err(Error::InvalidConfig("generations must be at least 1".into()));
        }
        self.train.validate()?;
        self.metrics.validate()?;
        self.template.validate()?;
        Ok(())
    }
}

pub fn generation_dir(output: &Path, generation: u32) -> PathBuf {
    output.join(format!("gen-{generation}"))
}

pub fn run_evolution(cfg: &EvolutionConfig, data: &DatasetSplit<f32>) -> Result<LineageRecord> {
    run_evolution_with(cfg, data, |_| {})
}

/// Runs the lineage, calling `on_generation` after each generation is
/// evaluated and persisted. On failure the error is [`Error::Aborted`] with
/// every completed generation in its record (and already in `lineage.csv`).
pub fn run_evolution_with(
    cfg: &EvolutionConfig,
    data: &DatasetSplit<f32>,
    mut on_generation: impl FnMut(&GenerationRow),
) -> Result<LineageRecord> {
    cfg.validate()?;
    let input = cfg.template.input_shape();
    let output = cfg.template.output_shape();
    if let Some(s) = data
        .all()
        .find(|s| s.image.shape() != input || s.mask.shape() != output)
    {
        return Err(Error::RejectedInput(format!(
            "sample {} has shapes {} / {} but the network maps {input} to {output}",
            s.name,
            s.image.shape(),
            s.mask.shape()
        )));
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut record = LineageRecord::default();
    let mut ancestor: Option<Network<f32>> = None;
    for generation in 1..=cfg.generations {
        match run_generation(cfg, data, generation, ancestor.as_ref(), &record) {
            Ok((network, row)) => {
                record.rows.push(row);
                if let Some(dir) = &cfg.output_dir {
                    record.write_csv(&dir.join(LINEAGE_FILE))?;
                }
                on_generation(record.rows.last().expect("row just pushed"));
                ancestor = Some(network);
            }
            Err(source) => {
                if let Some(dir) = &cfg.output_dir {
                    record.write_csv(&dir.join(LINEAGE_FILE))?;
                }
                return Err(Error::Aborted {
                    record: Box::new(record),
                    source: Box::new(source),
                });
            }
        }
    }
    Ok(record)
}

fn run_generation(
    cfg: &EvolutionConfig,
    data: &DatasetSplit<f32>,
    generation: u32,
    ancestor: Option<&Network<f32>>,
    record: &LineageRecord,
) -> Result<(Network<f32>, GenerationRow)> {
    let started = Instant::now();
    let init_seed = cfg.init_seed(generation);
    let (network, synthesis_seed) = match ancestor {
        None => (
            Network::initialize(cfg.template.clone().with_generation(1), cfg.train.init, init_seed),
            None,
        ),
        Some(parent) => {
            let outcome = synthesize_with(parent, &cfg.env, cfg.synthesis_seed(generation), &cfg.synthesis)?;
            let network = if cfg.inherit_weights {
                Network::inherit(outcome.architecture, parent)?
            } else {
                Network::initialize(outcome.architecture, cfg.train.init, init_seed)
            };
            (network, Some(outcome.seed))
        }
    };

    let train_cfg = TrainConfig {
        seed: init_seed,
        ..cfg.train
    };
    let trained = train(network, &data.train, &train_cfg)?;
    let network = trained.network;
    let train_loss = match trained.loss_trace.last() {
        Some(&loss) => loss,
        None => evaluate_loss(&network, &data.train, cfg.train.loss)?,
    };
    let report = evaluate(&network, &data.test, &cfg.metrics)?;
    let num_synapses = network.architecture().synapse_count();
    let first = record.rows.first().map_or(num_synapses, |r| r.num_synapses);
    let efficiency = architectural_efficiency(first, num_synapses)?.0;
    let wall_time_s = started.elapsed().as_secs_f64();

    let mut row = GenerationRow {
        generation,
        num_synapses,
        efficiency,
        f_beta: report.f_beta,
        mae: report.mae,
        train_loss,
        wall_time_s,
        synthesis_seed,
        init_seed,
        checkpoint: None,
    };
    if let Some(out) = &cfg.output_dir {
        let dir = generation_dir(out, generation);
        row.checkpoint = Some(dir.clone());
        save_checkpoint(&network, &row, &dir)?;
        let maps = dir.join("saliency");
        std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
        for sample in data.test.iter().take(cfg.probe_count) {
            let prediction = network.forward(&sample.image)?;
            write_gray_png(&prediction, &maps.join(format!("{}.png", sample.name)))?;
        }
    }
    Ok((network, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::{Activation, LayerKind, Loss, Shape};

    fn conv(out_channels: usize, stride: usize) -> LayerKind {
        LayerKind::Conv2d {
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride,
            padding: 1,
        }
    }

    fn config(generations: u32) -> (EvolutionConfig, DatasetSplit<f32>) {
        let template = Architecture::build(
            Shape::new(3, 16, 16),
            &[
                (conv(8, 1), Activation::Relu),
                (conv(8, 2), Activation::Relu),
                (LayerKind::Upsample { factor: 2 }, Activation::Identity),
                (LayerKind::Concat { from: 0 }, Activation::Identity),
                (conv(1, 1), Activation::Sigmoid),
            ],
        )
        .unwrap();
        let train = TrainConfig {
            learning_rate: 0.1,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut cfg = EvolutionConfig::new(template, EnvConstraint::constant(0.5).unwrap(), train);
        cfg.generations = generations;
        cfg.base_seed = 21;
        (cfg, generate_synthetic(1, 20, 16, 16).unwrap())
    }

    #[test]
    fn seeds_are_derived_from_the_base() {
        let (cfg, _) = config(1);
        assert_eq!(cfg.synthesis_seed(2), 21 ^ 2);
        assert_eq!(cfg.init_seed(2), 21 ^ ((1 << 32) + 2));
        assert_ne!(cfg.init_seed(1), cfg.synthesis_seed(1));
    }

    #[test]
    fn single_generation_is_the_trained_ancestor() {
        let (cfg, data) = config(1);
        let record = run_evolution(&cfg, &data).unwrap();
        assert_eq!(record.rows.len(), 1);
        let r = &record.rows[0];
        assert_eq!(r.num_synapses, cfg.template.synapse_count());
        assert_eq!(r.efficiency, 1.0);
        assert_eq!(r.synthesis_seed, None);
        assert!(r.train_loss.is_finite());
    }

    #[test]
    fn generations_compound_and_persist() {
        let (mut cfg, data) = config(3);
        let dir = tempfile::tempdir().unwrap();
        cfg.output_dir = Some(dir.path().to_path_buf());
        cfg.probe_count = 2;
        let mut seen = Vec::new();
        let record = run_evolution_with(&cfg, &data, |r| seen.push(r.generation)).unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        let counts: Vec<usize> = record.rows.iter().map(|r| r.num_synapses).collect();
        // Each synapse survives with probability at most C.
        for w in counts.windows(2) {
            assert!(w[1] < w[0], "{counts:?}");
        }
        assert!(record.rows.windows(2).all(|w| w[1].efficiency > w[0].efficiency));
        assert!((counts[2] as f64) <= 0.5f64.powi(2) * counts[0] as f64 * 1.2);
        for g in 1..=3 {
            let gen_dir = generation_dir(dir.path(), g);
            let (net, row) = crate::checkpoint::load_checkpoint(&gen_dir).unwrap();
            assert_eq!(net.architecture().synapse_count(), counts[g as usize - 1]);
            assert_eq!(row.generation, g);
            assert_eq!(std::fs::read_dir(gen_dir.join("saliency")).unwrap().count(), 2);
        }
        let parsed = crate::lineage::read_lineage_csv(&dir.path().join(LINEAGE_FILE)).unwrap();
        assert_eq!(parsed.rows.len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, data) = config(2);
        let strip = |rec: LineageRecord| {
            rec.rows
                .into_iter()
                .map(|r| GenerationRow { wall_time_s: 0.0, ..r })
                .collect::<Vec<_>>()
        };
        let a = strip(run_evolution(&cfg, &data).unwrap());
        let b = strip(run_evolution(&cfg, &data).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn failures_abort_with_a_partial_record() {
        let (mut cfg, data) = config(2);
        cfg.template = Architecture::build(
            Shape::new(3, 16, 16),
            &[(conv(4, 1), Activation::Relu), (conv(1, 1), Activation::Identity)],
        )
        .unwrap();
        cfg.train.learning_rate = 1e6;
        cfg.train.loss = Loss::MeanSquaredError;
        match run_evolution(&cfg, &data) {
            Err(Error::Aborted { record, source }) => {
                assert!(record.rows.is_empty());
                assert!(matches!(*source, Error::TrainingDiverged { .. }));
            }
            other => panic!("expected an aborted run, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_data_is_rejected_up_front() {
        let (cfg, _) = config(1);
        let data = generate_synthetic(1, 5, 20, 20).unwrap();
        assert!(matches!(run_evolution(&cfg, &data), Err(Error::RejectedInput(_))));
    }
}
