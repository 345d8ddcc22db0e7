//! Metrics rows and their CSV form.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::models::Method;

pub const METRICS_HEADER: &str = "round,method,seed,train_loss,local_acc,base_acc,new_acc,hm";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Completed communication rounds; 0 for an untrained model.
    pub round: usize,
    pub method: Method,
    pub seed: u64,
    /// Mean local training loss over the clients of the latest round.
    pub train_loss: f64,
    pub local_acc: f64,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.round, self.method, self.seed, self.train_loss, self.local_acc, self.base_acc, self.new_acc, self.hm
        )
    }
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(())
}
