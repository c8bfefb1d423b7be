//! Epoch-savings analysis between an averaged curve and a baseline curve.
//!
//! A baseline epoch "matches" a value when it is at least as good, with no
//! interpolation between measured epochs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{format_sig9, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Lower,
    Higher,
}

impl Direction {
    /// Accuracy-like metrics improve upwards, everything else downwards.
    pub fn for_metric(name: &str) -> Self {
        if name.contains("acc") {
            Direction::Higher
        } else {
            Direction::Lower
        }
    }

    pub fn at_least_as_good(self, candidate: f64, reference: f64) -> bool {
        match self {
            Direction::Lower => candidate <= reference,
            Direction::Higher => candidate >= reference,
        }
    }
}

/// First epoch whose value is at least as good as `target`.
pub fn epochs_to_target(curve: &[Option<f64>], target: f64, dir: Direction) -> Option<usize> {
    curve
        .iter()
        .position(|v| v.is_some_and(|v| dir.at_least_as_good(v, target)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSaving {
    pub epoch: usize,
    pub averaged: f64,
    /// First baseline epoch matching `averaged`, if any.
    pub matched_at: Option<usize>,
    /// Epochs the baseline needs beyond `epoch`; the remaining horizon when
    /// it never matches.
    pub savings: usize,
}

/// Savings at every epoch where `averaged` is defined.
pub fn epoch_savings(averaged: &[Option<f64>], baseline: &[Option<f64>], dir: Direction) -> Vec<EpochSaving> {
    let horizon = baseline.len();
    averaged
        .iter()
        .enumerate()
        .filter_map(|(epoch, v)| {
            let v = (*v)?;
            let matched_at = epochs_to_target(baseline, v, dir);
            let savings = match matched_at {
                Some(m) => m.saturating_sub(epoch),
                None => horizon.saturating_sub(epoch),
            };
            Some(EpochSaving {
                epoch,
                averaged: v,
                matched_at,
                savings,
            })
        })
        .collect()
}

pub fn max_savings(savings: &[EpochSaving]) -> Option<&EpochSaving> {
    // earliest epoch wins ties
    savings.iter().rev().max_by_key(|s| s.savings)
}

/// Comparison of one run's averaged curve against a baseline curve.
#[derive(Clone, Debug)]
pub struct RunComparison {
    pub run: String,
    pub baseline: Vec<Option<f64>>,
    pub averaged: Vec<Option<f64>>,
    pub savings: Vec<EpochSaving>,
}

pub struct CompareSpec<'a> {
    /// Column read from the baseline, e.g. `val_loss`.
    pub metric: &'a str,
    /// Column read from each run; `avg_<metric>` by default.
    pub candidate: Option<&'a str>,
    /// Epochs below this are marked `early` in the report.
    pub k: usize,
}

impl CompareSpec<'_> {
    pub fn candidate_column(&self) -> String {
        self.candidate
            .map(str::to_owned)
            .unwrap_or_else(|| format!("avg_{}", self.metric))
    }
}

fn column(table: &Table, name: &str, path: &Path) -> Result<Vec<Option<f64>>> {
    table
        .column(name)
        .ok_or_else(|| Error::Schema(format!("{}: no column `{name}`", path.display())))
}

/// Compares each run against `baseline`, or against its own `metric`
/// column when no baseline file is given.
pub fn compare_files(runs: &[&Path], baseline: Option<&Path>, spec: &CompareSpec<'_>) -> Result<Vec<RunComparison>> {
    let dir = Direction::for_metric(spec.metric);
    let candidate = spec.candidate_column();
    let shared = baseline
        .map(|p| Table::read(p).and_then(|t| column(&t, spec.metric, p)))
        .transpose()?;
    runs.iter()
        .map(|&path| {
            let table = Table::read(path)?;
            let averaged = column(&table, &candidate, path)?;
            let baseline = match &shared {
                Some(b) => b.clone(),
                None => column(&table, spec.metric, path)?,
            };
            Ok(RunComparison {
                run: path.display().to_string(),
                savings: epoch_savings(&averaged, &baseline, dir),
                baseline,
                averaged,
            })
        })
        .collect()
}

pub const REPORT_HEADER: &str = "run,epoch,phase,baseline,averaged,matched_at,savings";
pub const SUMMARY_HEADER: &str = "run,max_savings,max_savings_epoch,target,baseline_epochs,averaged_epochs";

fn cell(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_default()
}

/// Per-epoch rows. Epochs before `k` are tagged `early` so the warm-up
/// phase can be reported separately.
pub fn report_csv(comparisons: &[RunComparison], k: usize) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for c in comparisons {
        for (epoch, base) in c.baseline.iter().enumerate() {
            let saving = c.savings.iter().find(|s| s.epoch == epoch);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.run,
                epoch,
                if epoch < k { "early" } else { "late" },
                cell(*base),
                cell(c.averaged.get(epoch).copied().flatten()),
                saving
                    .and_then(|s| s.matched_at)
                    .map(|m| m.to_string())
                    .unwrap_or_default(),
                saving.map(|s| s.savings.to_string()).unwrap_or_default(),
            );
        }
    }
    s
}

/// One row per run and target; with no targets, one row per run.
pub fn summary_csv(comparisons: &[RunComparison], targets: &[f64], dir: Direction) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for c in comparisons {
        let best = max_savings(&c.savings);
        let head = format!(
            "{},{},{}",
            c.run,
            best.map(|b| b.savings.to_string()).unwrap_or_default(),
            best.map(|b| b.epoch.to_string()).unwrap_or_default()
        );
        if targets.is_empty() {
            let _ = writeln!(s, "{head},,,");
        }
        for &t in targets {
            let show = |e: Option<usize>| e.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{head},{},{},{}",
                format_sig9(t),
                show(epochs_to_target(&c.baseline, t, dir)),
                show(epochs_to_target(&c.averaged, t, dir)),
            );
        }
    }
    s
}

pub fn write_report(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
