//! The four subcommands. Each writes human-readable output to the given
//! sinks so tests can capture it.

use std::io::Write;
use std::path::{Path, PathBuf};

use evosynth_core::checkpoint::load_checkpoint;
use evosynth_core::data::{generate_synthetic, load_directory, write_directory, DatasetSplit, SplitFractions};
use evosynth_core::evolution::{run_evolution_with, LINEAGE_FILE};
use evosynth_core::lineage::read_lineage_csv;
use evosynth_core::metrics::{evaluate, EvalReport, MetricsConfig, Thresholding};
use evosynth_core::Error;

use crate::config::RunConfigFile;
use crate::CliError;

/// Name of the copy of the run configuration stored next to `lineage.csv`.
pub const CONFIG_COPY: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.json";

fn emit(sink: &mut dyn Write, line: std::fmt::Arguments) {
    // Diagnostics are best effort; a closed pipe must not change the exit status.
    let _ = sink.write_fmt(line);
    let _ = sink.write_all(b"\n");
}

/// Writes a synthetic dataset as `images/` and `masks/` PNG directories.
pub fn gen_data(seed: u64, count: usize, size: usize, out: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    if count < 3 {
        return Err(CliError::Input(format!("--count must be at least 3, got {count}")));
    }
    if size < 16 {
        return Err(CliError::Input(format!("--size must be at least 16, got {size}")));
    }
    let split = generate_synthetic(seed, count, size, size)?;
    write_directory(&split, out)?;
    emit(
        stdout,
        format_args!("wrote {count} pairs of {size}x{size} to {}", out.display()),
    );
    Ok(())
}

/// Runs a full lineage from a configuration file.
pub fn evolve(config_path: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let file = RunConfigFile::load(config_path)?;
    let cfg = file.evolution_config()?;
    let data = file.data.load()?;
    let out = &file.output.directory;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", out.display())))?;
    std::fs::copy(config_path, out.join(CONFIG_COPY))
        .map_err(|e| CliError::Input(format!("cannot write to {}: {e}", out.display())))?;

    emit(
        stderr,
        format_args!(
            "evolving {} generation(s) from {} synapses on {} train / {} test samples",
            cfg.generations,
            cfg.template.synapse_count(),
            data.train.len(),
            data.test.len()
        ),
    );
    let result = run_evolution_with(&cfg, &data, |row| {
        emit(
            stderr,
            format_args!(
                "generation {}: {} synapses, efficiency {:.2}X, F {:.4}, MAE {:.4}, loss {:.5} ({:.1}s)",
                row.generation, row.num_synapses, row.efficiency, row.f_beta, row.mae, row.train_loss, row.wall_time_s
            ),
        );
    });
    match result {
        Ok(record) => {
            emit(
                stdout,
                format_args!(
                    "completed {} generation(s); lineage in {}",
                    record.rows.len(),
                    out.join(LINEAGE_FILE).display()
                ),
            );
            Ok(())
        }
        Err(e @ Error::Aborted { .. }) => {
            if let Error::Aborted { record, .. } = &e {
                emit(
                    stderr,
                    format_args!(
                        "partial lineage with {} generation(s) kept in {}",
                        record.rows.len(),
                        out.join(LINEAGE_FILE).display()
                    ),
                );
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Where `eval` takes its samples from.
enum EvalData {
    Directory(DatasetSplit<f32>),
    Config(DatasetSplit<f32>, MetricsConfig),
}

fn load_eval_data(path: &Path) -> Result<EvalData, CliError> {
    if path.is_dir() {
        let split = load_directory(
            &path.join("images"),
            &path.join("masks"),
            &SplitFractions::default(),
            None,
        )?;
        Ok(EvalData::Directory(split))
    } else if path.is_file() {
        let file = RunConfigFile::load(path)?;
        let metrics = file.metrics.to_config()?;
        Ok(EvalData::Config(file.data.load()?, metrics))
    } else {
        Err(CliError::Input(format!("{} is neither a dataset directory nor a config file", path.display())))
    }
}

/// Scores a checkpoint. A dataset directory is scored in full; a run
/// configuration scores the test split of the dataset it describes.
pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
    metrics: Option<MetricsConfig>,
    stdout: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    let (network, row) = load_checkpoint(checkpoint)?;
    let (samples, cfg) = match load_eval_data(data)? {
        EvalData::Directory(split) => {
            let all: Vec<_> = split.all().cloned().collect();
            (all, metrics.unwrap_or_default())
        }
        EvalData::Config(split, from_file) => (split.test, metrics.unwrap_or(from_file)),
    };
    let input = network.architecture().input_shape();
    let output = network.architecture().output_shape();
    if let Some(s) = samples
        .iter()
        .find(|s| s.image.shape() != input || s.mask.shape() != output)
    {
        return Err(CliError::Input(format!(
            "dataset sample {} is {} with mask {}, but the checkpoint expects {} with mask {}",
            s.name,
            s.image.shape(),
            s.mask.shape(),
            input,
            output
        )));
    }
    let report = evaluate(&network, &samples, &cfg)?;
    let target: PathBuf = out.map_or_else(|| checkpoint.join(EVAL_FILE), Path::to_path_buf);
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    std::fs::write(&target, json)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", target.display())))?;
    let mode = match cfg.thresholding {
        Thresholding::MaxSweep => "max over thresholds".to_string(),
        Thresholding::Fixed { threshold } => format!("threshold {threshold}"),
    };
    emit(
        stdout,
        format_args!(
            "generation {} ({} synapses) on {} images: F {:.6} ({mode}), MAE {:.6}",
            row.generation,
            network.architecture().synapse_count(),
            samples.len(),
            report.f_beta,
            report.mae
        ),
    );
    emit(stdout, format_args!("report written to {}", target.display()));
    Ok(report)
}

/// Prints a lineage file as an aligned table.
pub fn report(lineage: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let parsed = read_lineage_csv(lineage)?;
    for col in &parsed.unknown_columns {
        emit(stderr, format_args!("warning: ignoring unknown column {col:?}"));
    }
    let header = ["gen", "synapses", "efficiency", "F_beta", "MAE", "train_loss", "time_s"];
    let body: Vec<[String; 7]> = parsed
        .rows
        .iter()
        .map(|r| {
            [
                r.generation.to_string(),
                r.num_synapses.to_string(),
                format!("{:.2}X", evosynth_core::metrics::Efficiency(r.efficiency_x).reported()),
                format!("{:.4}", r.f_beta),
                format!("{:.4}", r.mae),
                format!("{:.5}", r.train_loss),
                format!("{:.1}", r.wall_time_s),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    emit(stdout, format_args!("{}", line(&header)));
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        emit(stdout, format_args!("{}", line(&cells)));
    }
    Ok(())
}
