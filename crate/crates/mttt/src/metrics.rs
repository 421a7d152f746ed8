//! Per-epoch metrics and their CSV form.
//!
//! Header: `epoch,split,loss,acc,layer,step,inner_loss,wall_ms`. Each
//! [`MetricsRow`] becomes one summary line (empty `layer`, `step`,
//! `inner_loss`) followed by one line per `(layer, step)` of the mean
//! inner-loss profile (empty `loss`, `acc`).

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: [&str; 8] = ["epoch", "split", "loss", "acc", "layer", "step", "inner_loss", "wall_ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    /// Per TTT layer (block index), mean `l(W_t; X)` for `t = 0..=T`.
    pub inner: Vec<(usize, Vec<f64>)>,
    /// Per TTT layer, fraction of instances whose profile strictly decreases.
    pub decreasing: Vec<(usize, f64)>,
    pub instances: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epoch": self.epoch,
            "split": self.split,
            "loss": self.loss,
            "acc": self.acc,
            "instances": self.instances,
            "wall_ms": self.wall_ms,
            "inner": self.inner.iter().map(|(l, p)| serde_json::json!({"layer": l, "profile": p})).collect::<Vec<_>>(),
            "decreasing": self.decreasing.iter().map(|(l, f)| serde_json::json!({"layer": l, "fraction": f})).collect::<Vec<_>>(),
        })
    }
}

pub struct MetricsWriter<W: std::io::Write> {
    out: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        MetricsWriter::new(file)
    }
}

impl<W: std::io::Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HEADER)?;
        out.flush().map_err(|e| Error::io("metrics", e))?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let epoch = row.epoch.to_string();
        let wall = row.wall_ms.to_string();
        self.out.write_record([
            epoch.as_str(),
            &row.split,
            &row.loss.to_string(),
            &row.acc.to_string(),
            "",
            "",
            "",
            &wall,
        ])?;
        for (layer, profile) in &row.inner {
            for (t, v) in profile.iter().enumerate() {
                self.out.write_record([
                    epoch.as_str(),
                    &row.split,
                    "",
                    "",
                    &layer.to_string(),
                    &t.to_string(),
                    &v.to_string(),
                    &wall,
                ])?;
            }
        }
        self.out.flush().map_err(|e| Error::io("metrics", e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.out.into_inner().map_err(|e| Error::io("metrics", e.into_error()))
    }
}
