//! Training metrics log: one CSV row per recorded step.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! rerun with the same seed produces a byte-identical file. Per-head
//! readouts are packed into a single cell as `key=value` pairs joined by
//! semicolons; executed layers as `stream:index` entries joined by `|`.

use crate::model::ExecutedLayers;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CSV_HEADER: &str = "step,split,loss,accuracy,spans,alphas,kept_layers,flops,ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    /// Per-head current spans, empty when the mechanism has none.
    pub spans: Vec<(String, f64)>,
    /// Per-head current alphas, empty when the mechanism has none.
    pub alphas: Vec<(String, f64)>,
    pub kept_layers: String,
    pub flops: u64,
    pub ms: u64,
}

fn pack(pairs: &[(String, f64)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn unpack(cell: &str) -> Result<Vec<(String, f64)>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';')
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("metrics cell entry without '=': {pair}")))?;
            let value: f64 = v
                .parse()
                .map_err(|_| Error::Input(format!("bad float in metrics cell: {v}")))?;
            Ok((k.to_string(), value))
        })
        .collect()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.split,
            self.loss,
            self.accuracy,
            pack(&self.spans),
            pack(&self.alphas),
            self.kept_layers,
            self.flops,
            self.ms
        )
    }

    /// Inverse of `to_csv`, used by tests and trajectory inspection.
    pub fn parse(line: &str) -> Result<MetricsRow> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::Input(format!(
                "metrics row has {} cells, want 9: {line}",
                cells.len()
            )));
        }
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Input(format!("bad {what} in metrics row: {s}")))
        };
        let float = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Input(format!("bad {what} in metrics row: {s}")))
        };
        Ok(MetricsRow {
            step: int(cells[0], "step")? as usize,
            split: cells[1].to_string(),
            loss: float(cells[2], "loss")?,
            accuracy: float(cells[3], "accuracy")?,
            spans: unpack(cells[4])?,
            alphas: unpack(cells[5])?,
            kept_layers: cells[6].to_string(),
            flops: int(cells[7], "flops")?,
            ms: int(cells[8], "ms")?,
        })
    }
}

/// Read every data row of a metrics file, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => {
            return Err(Error::Input(format!(
                "metrics file {} has header {:?}, want {:?}",
                path.display(),
                other.unwrap_or(""),
                CSV_HEADER
            )))
        }
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// Append-only CSV writer; creates the file and writes the header once.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<MetricsLog> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// The compact `stream:index` layer list used in the kept_layers column.
pub fn kept_label(executed: &ExecutedLayers) -> String {
    executed.label()
}
