//! Per-epoch metrics rows and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_loss,val_acc,avg_val_loss,avg_val_acc,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: u64,
    /// Rate used for the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_loss: f64,
    pub val_acc: Option<f64>,
    pub avg_val_loss: Option<f64>,
    pub avg_val_acc: Option<f64>,
    pub wall_seconds: Option<f64>,
}

/// Formats like C's `%.9g`: 9 significant digits, trailing zeros dropped,
/// exponent notation outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if !(-4..9).contains(&exp) {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_default()
}

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            format_sig9(self.lr),
            format_sig9(self.train_loss),
            opt(self.train_acc),
            format_sig9(self.val_loss),
            opt(self.val_acc),
            opt(self.avg_val_loss),
            opt(self.avg_val_acc),
            opt(self.wall_seconds),
        )
    }
}

/// Appends rows to a metrics file as they are produced, so an aborted run
/// leaves the completed epochs on disk.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_csv_line()).map_err(|e| Error::io("metrics.csv", e))
    }
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

/// A numeric CSV read column-wise; empty cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse().map(Some).map_err(|_| Error::Parse {
                            row: r + 2,
                            column: columns.get(j).cloned().unwrap_or_default(),
                            reason: format!("`{cell}` is not a number"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.get(j).copied().flatten()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(std::f64::consts::LN_2), "0.693147181");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567894.0), "1.23456789e+09");
        assert_eq!(format_sig9(0.0001), "0.0001");
        assert_eq!(format_sig9(0.00001234), "1.234e-05");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(9.9999999999), "10");
    }

    #[test]
    fn csv_line_leaves_undefined_cells_empty() {
        let r = MetricsRecord {
            epoch: 0,
            step: 25,
            lr: 0.1,
            train_loss: 0.7,
            train_acc: Some(0.5),
            val_loss: 0.69,
            val_acc: Some(0.5),
            avg_val_loss: None,
            avg_val_acc: None,
            wall_seconds: None,
        };
        assert_eq!(r.to_csv_line(), "0,25,0.1,0.7,0.5,0.69,0.5,,,");
    }

    #[test]
    fn table_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = MetricsRecord {
            epoch: 3,
            step: 100,
            lr: 0.05,
            train_loss: 0.25,
            train_acc: Some(0.9),
            val_loss: 0.3,
            val_acc: Some(0.875),
            avg_val_loss: Some(0.28),
            avg_val_acc: None,
            wall_seconds: Some(1.5),
        };
        write_metrics(&p, &[r]).unwrap();
        let t = Table::read(&p).unwrap();
        assert_eq!(t.columns.join(","), HEADER);
        assert_eq!(t.column("avg_val_loss").unwrap(), vec![Some(0.28)]);
        assert_eq!(t.column("avg_val_acc").unwrap(), vec![None]);
        assert!(t.column("missing").is_none());
    }
}
