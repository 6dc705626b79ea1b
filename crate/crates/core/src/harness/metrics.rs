//! Per-epoch metric rows and their line-delimited JSON sink.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::diversity::DiversityReport;
use crate::error::{Error, Result};

/// Field names of a metrics record, in emission order.
pub const METRIC_FIELDS: [&str; 21] = [
    "epoch",
    "phase",
    "lr",
    "loss",
    "loss_terms",
    "train_acc",
    "test_acc",
    "ensemble_test_acc",
    "view_test_acc",
    "gamma",
    "gate_active_fraction",
    "diversity",
    "inter_form",
    "intra_form",
    "raw_variance",
    "kl_bound_lhs",
    "kl_bound_rhs",
    "bound_slack",
    "mean_inter_deg",
    "mean_intra_deg",
    "steps",
];

/// One epoch of one phase (`teacher`, `warmup` or `distill`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    /// Mean over batches of the summed loss.
    pub loss: f64,
    pub loss_terms: BTreeMap<String, f64>,
    /// Student accuracy in the distill phase, teacher accuracy in the teacher phase.
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub ensemble_test_acc: Option<f64>,
    pub view_test_acc: Vec<f64>,
    pub gamma: Option<f64>,
    pub gate_active_fraction: Option<f64>,
    pub diversity: Option<DiversityReport>,
    pub mean_inter_deg: Option<f64>,
    pub mean_intra_deg: Option<f64>,
    pub steps: usize,
}

fn num(out: &mut String, v: f64) {
    if v.is_finite() {
        let _ = write!(out, "{v:.16e}");
    } else {
        out.push_str("null");
    }
}

fn opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => num(out, v),
        None => out.push_str("null"),
    }
}

impl MetricsRow {
    /// One JSON object; every float carries 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(512);
        let d = self.diversity.as_ref();
        let _ = write!(s, "{{\"epoch\":{},\"phase\":{}", self.epoch, serde_json::Value::from(self.phase.as_str()));
        s.push_str(",\"lr\":");
        num(&mut s, self.lr);
        s.push_str(",\"loss\":");
        num(&mut s, self.loss);
        s.push_str(",\"loss_terms\":{");
        for (i, (k, v)) in self.loss_terms.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}:", serde_json::Value::from(k.as_str()));
            num(&mut s, *v);
        }
        s.push('}');
        for (name, v) in [
            ("train_acc", self.train_acc),
            ("test_acc", self.test_acc),
            ("ensemble_test_acc", self.ensemble_test_acc),
        ] {
            let _ = write!(s, ",\"{name}\":");
            opt(&mut s, v);
        }
        s.push_str(",\"view_test_acc\":[");
        for (i, v) in self.view_test_acc.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            num(&mut s, *v);
        }
        s.push(']');
        for (name, v) in [
            ("gamma", self.gamma),
            ("gate_active_fraction", self.gate_active_fraction),
            ("diversity", d.map(|d| d.diversity_direct)),
            ("inter_form", d.map(|d| d.inter_form)),
            ("intra_form", d.map(|d| d.intra_form)),
            ("raw_variance", d.map(|d| d.raw_variance)),
            ("kl_bound_lhs", d.map(|d| d.kl_bound_lhs)),
            ("kl_bound_rhs", d.map(|d| d.kl_bound_rhs)),
            ("bound_slack", d.map(|d| d.bound_slack)),
            ("mean_inter_deg", self.mean_inter_deg),
            ("mean_intra_deg", self.mean_intra_deg),
        ] {
            let _ = write!(s, ",\"{name}\":");
            opt(&mut s, v);
        }
        let _ = write!(s, ",\"steps\":{}}}", self.steps);
        s
    }
}

/// Where metric rows go. Each row is written as one complete line and flushed.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

/// Keeps rows in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Appends JSON lines to a file and also keeps the rows.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    pub rows: Vec<MetricsRow>,
}

impl MetricsWriter {
    /// Creates (truncating) `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
            rows: Vec::new(),
        })
    }

    /// Opens `path` for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
            rows: Vec::new(),
        })
    }
}

impl MetricsSink for MetricsWriter {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        let mut line = row.to_json_line();
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.rows.push(row.clone());
        Ok(())
    }
}
