//! Per-generation lineage records and the `lineage.csv` summary format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of `lineage.csv`.
pub const CSV_COLUMNS: [&str; 7] = [
    "generation",
    "num_synapses",
    "efficiency_x",
    "f_beta",
    "mae",
    "train_loss",
    "wall_time_s",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub generation: u32,
    pub num_synapses: usize,
    /// Synapse ratio of generation 1 to this generation.
    pub efficiency: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
    /// Seed of the successful synthesis attempt; absent for generation 1.
    pub synthesis_seed: Option<u64>,
    pub init_seed: u64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub rows: Vec<GenerationRow>,
}

impl LineageRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut writer = csv::Writer::from_path(path).map_err(io)?;
        writer.write_record(CSV_COLUMNS).map_err(io)?;
        for row in &self.rows {
            writer
                .write_record([
                    row.generation.to_string(),
                    row.num_synapses.to_string(),
                    format!("{:.6}", row.efficiency),
                    format!("{:.9}", row.f_beta),
                    format!("{:.9}", row.mae),
                    format!("{:.9}", row.train_loss),
                    format!("{:.3}", row.wall_time_s),
                ])
                .map_err(io)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

/// One parsed `lineage.csv` line.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub generation: u32,
    pub num_synapses: usize,
    pub efficiency_x: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedLineage {
    pub rows: Vec<CsvRow>,
    /// Header names outside the known column set, in file order.
    pub unknown_columns: Vec<String>,
}

/// Parses a lineage file by header name. Unknown columns are reported, not rejected.
pub fn read_lineage_csv(path: &Path) -> Result<ParsedLineage> {
    let malformed = |reason: String| Error::RejectedInput(format!("{}: {reason}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(malformed("file is empty".into()));
    }
    let mut positions = [0usize; CSV_COLUMNS.len()];
    for (slot, name) in positions.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| malformed(format!("missing column {name}")))?;
    }
    let unknown_columns = headers
        .iter()
        .filter(|h| !CSV_COLUMNS.contains(&h.trim()))
        .map(str::to_string)
        .collect();

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(positions[i])
                .map(str::trim)
                .ok_or_else(|| malformed(format!("row {} is missing {}", line + 1, CSV_COLUMNS[i])))
        };
        let float = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| malformed(format!("row {}: {} is not a number", line + 1, CSV_COLUMNS[i])))
        };
        rows.push(CsvRow {
            generation: field(0)?
                .parse()
                .map_err(|_| malformed(format!("row {}: bad generation", line + 1)))?,
            num_synapses: field(1)?
                .parse()
                .map_err(|_| malformed(format!("row {}: bad num_synapses", line + 1)))?,
            efficiency_x: float(2)?,
            f_beta: float(3)?,
            mae: float(4)?,
            train_loss: float(5)?,
            wall_time_s: float(6)?,
        });
    }
    if rows.is_empty() {
        return Err(malformed("no data rows".into()));
    }
    Ok(ParsedLineage {
        rows,
        unknown_columns,
    })
}
