//! CSV and JSON artifacts. Floats are written in Rust's shortest round-trip
//! form, so parsing a CSV cell gives back the exact value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pixelflow_core::metrics::{MetricReport, MetricRow};
use pixelflow_core::pipeline::StepLosses;

use crate::error::{fail, Error, Result};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

/// One row per (event, frame, threshold).
pub fn metrics_csv(rows: &[MetricRow], pools: &[usize]) -> String {
    let mut s = String::from("event,frame,threshold,csi,hss");
    for p in pools {
        let _ = write!(s, ",pooled_csi_{p}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{},{}", r.event, r.frame, r.threshold, r.csi, r.hss);
        for v in &r.pooled_csi {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub const LOSS_HEADER: &str = "step,phase,k,coarse,pmf,total,lr,grad_norm";

pub fn loss_row(phase: &str, l: &StepLosses) -> String {
    format!("{},{},{},{},{},{},{},{}\n", l.step, phase, l.k, l.coarse, l.pmf, l.total, l.lr, l.grad_norm)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

/// A parsed CSV: header plus numeric columns. Non-numeric cells are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let Some(head) = lines.next() else {
            fail!(Data, "{}: empty CSV", path.display());
        };
        let header: Vec<String> = head.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
            if row.len() != header.len() {
                fail!(Data, "{}: line {} has {} cells, header has {}", path.display(), i + 2, row.len(), header.len());
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Every listed column, or an error naming all that are absent.
    pub fn columns(&self, names: &[&str], path: &Path) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<&str> = names.iter().copied().filter(|n| !self.header.iter().any(|h| h == n)).collect();
        if !missing.is_empty() {
            fail!(Data, "{}: missing columns {}", path.display(), missing.join(", "));
        }
        Ok(names
            .iter()
            .map(|n| {
                let j = self.header.iter().position(|h| h == n).unwrap();
                self.rows.iter().map(|r| r[j]).collect()
            })
            .collect())
    }
}
