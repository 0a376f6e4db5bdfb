//! Result tables: CSV plus JSON, both carrying provenance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
}

/// Mean and standard error of per-replicate accuracies over `n_test`
/// examples each. With one replicate the binomial standard error of that
/// replicate stands in for the between-replicate one.
pub fn mean_se(samples: &[f64], n_test: usize) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let se = if samples.len() >= 2 {
        let var = samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        (mean * (1.0 - mean) / n_test as f64).sqrt()
    };
    (mean, se)
}

/// One evaluated (corruption, method) cell of the comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub corruption: String,
    pub method: String,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
    pub replicates: usize,
    /// Per-replicate network calls summed over the test split.
    pub nfe_signal: u64,
    pub nfe_logit: u64,
    pub nfe_classifier: u64,
}

/// One replicate of one cell, with the inputs it consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub corruption: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub input_hash: String,
    pub init_seed: u64,
    pub step_seed: u64,
    /// Fingerprint of the predicted logits.
    pub output_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub provenance: Provenance,
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunRecord>,
}

/// A two-variant comparison per corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub corruption: String,
    pub variant: String,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
    /// First variant's mean minus second variant's mean, on both rows.
    pub difference: f64,
    /// Whether rerunning every replicate with a different posterior-noise
    /// stream reproduced the predicted logits bit for bit.
    pub replay_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTable {
    pub provenance: Provenance,
    pub rows: Vec<VariantRow>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub corruption: String,
    pub strategy: String,
    pub steps: usize,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
    pub nfe_signal: u64,
    pub nfe_logit: u64,
    pub nfe_classifier: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTable {
    pub provenance: Provenance,
    pub rows: Vec<StepRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub corruption: String,
    pub seed: u64,
    pub stage: String,
    pub name: String,
    pub seconds: f64,
}

/// `stem.csv` with a `#` provenance line above the header, and `stem.json`
/// holding `table`.
pub fn write_table<R: Serialize, T: Serialize>(dir: &Path, stem: &str, prov: &Provenance, rows: &[R], table: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?);
    let seeds: Vec<String> = prov.seeds.iter().map(u64::to_string).collect();
    writeln!(
        f,
        "# command={} config_hash={} seeds={} code_version={}",
        prov.command,
        prov.config_hash,
        seeds.join(";"),
        prov.code_version
    )?;
    write_csv(&mut f, rows)?;
    f.flush()?;
    let json = serde_json::to_string_pretty(table)?;
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}

pub fn write_csv<W: Write, R: Serialize>(w: W, rows: &[R]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the rows of a CSV written by [`write_table`].
pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = rd.deserialize().collect::<std::result::Result<Vec<R>, _>>()?;
    Ok(rows)
}

pub fn hex_hash(h: u64) -> String {
    format!("{h:016x}")
}
