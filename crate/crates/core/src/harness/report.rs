use std::fmt;

use serde::Serialize;

use super::data::DatasetMeta;
use crate::aggregation::CountReport;
use crate::config::RunConfig;
use crate::metrics::MetricReport;

/// Everything needed to re-derive a run's numbers: the configuration, the
/// dataset identity, the metric suite and the model cost.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub dataset: DatasetMeta,
    pub dataset_sha256: String,
    pub metrics: MetricReport,
    pub counts: CountReport,
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.dataset;
        writeln!(f, "dataset: seed={} images={} labels={} size={}", d.seed, d.images, d.labels, d.size)?;
        writeln!(f, "dataset_sha256: {}", self.dataset_sha256)?;
        writeln!(f, "epochs_run: {}", self.epochs_run)?;
        writeln!(f, "steps: {}", self.steps)?;
        if let Some(l) = self.final_loss {
            writeln!(f, "final_loss: {l}")?;
        }
        writeln!(f, "{}", self.counts)?;
        writeln!(f, "wall_time_secs: {:.3}", self.wall_time_secs)?;
        write!(f, "{}", self.metrics)
    }
}
