//! Controlled sweeps: one axis of the architecture varies, the dataset,
//! seeds and training recipe stay fixed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::data::SyntheticDataset;
use super::gradcheck::{apply_toggles, ivla_toggle_rows};
use super::train::{evaluate, Trainer};
use crate::aggregation::{count_params_flops, CsaFeatures, CsaVariant};
use crate::config::{EmbeddingKind, RunConfig};
use crate::encoder::EMBEDDING_STD;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::rng::Rng;
use crate::tensor::{write_container, Precision, Tensor};

const EXTERNAL_EMBEDDING_STREAM: u64 = 0x454d_4245_4400_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AblationAxis {
    IvlaKernel,
    IvlaToggles,
    CsaVariant,
    CsaStages,
    CsaFeatures,
    Embedding,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::IvlaKernel,
        Self::IvlaToggles,
        Self::CsaVariant,
        Self::CsaStages,
        Self::CsaFeatures,
        Self::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::IvlaKernel => "ivla_kernel",
            Self::IvlaToggles => "ivla_toggles",
            Self::CsaVariant => "csa_variant",
            Self::CsaStages => "csa_stages",
            Self::CsaFeatures => "csa_features",
            Self::Embedding => "embedding",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub cfg: RunConfig,
}

/// Writes a deterministic unit-scale (C_l, T) table for the external-file row.
pub fn write_external_embedding(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (cl, t) = (cfg.model.linguistic_channels, cfg.model.num_labels);
    let mut rng = Rng::derive(cfg.model.seed, EXTERNAL_EMBEDDING_STREAM);
    let table = Tensor::new((0..cl * t).map(|_| rng.truncated_normal(EMBEDDING_STD)).collect(), &[cl, t])?;
    let path = dir.join("external_embedding.hsvt");
    write_container(&path, &table, Precision::F64)?;
    Ok(path)
}

/// The row set of `axis`. `workdir` receives the external embedding table
/// when the base configuration does not name one.
pub fn ablation_rows(base: &RunConfig, axis: AblationAxis, workdir: &Path) -> Result<Vec<AblationRow>> {
    let with = |label: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        AblationRow { label, cfg }
    };
    let rows = match axis {
        AblationAxis::IvlaKernel => [3, 5, 7, 11]
            .into_iter()
            .map(|k| with(format!("{k}x{k}"), &|c| c.model.ivla.gconv_kernel = k))
            .collect(),
        AblationAxis::IvlaToggles => ivla_toggle_rows()
            .into_iter()
            .map(|(label, t)| {
                with(label.to_string(), &|c| {
                    let mut full = c.model.ivla.for_channels(1);
                    apply_toggles(&mut full, t);
                    c.model.ivla.use_gconv = full.use_gconv;
                    c.model.ivla.use_l_act = full.use_l_act;
                    c.model.ivla.use_v_gate = full.use_v_gate;
                    c.model.ivla.use_l_gate = full.use_l_gate;
                })
            })
            .collect(),
        AblationAxis::CsaVariant => CsaVariant::ALL
            .into_iter()
            .map(|v| {
                with(v.name().to_string(), &|c| {
                    c.model.csa.enabled = true;
                    c.model.csa.variant = v;
                })
            })
            .collect(),
        AblationAxis::CsaStages => [vec![4], vec![3, 4], vec![1, 2, 3], vec![2, 3, 4], vec![1, 2, 3, 4]]
            .into_iter()
            .map(|stages| {
                let label = stages.iter().map(|s| format!("S{s}")).collect::<Vec<_>>().join("+");
                with(label, &|c| {
                    c.model.csa.enabled = true;
                    c.model.csa.variant = CsaVariant::ConcatHeadMlp;
                    c.model.csa.stages = stages.clone();
                })
            })
            .collect(),
        AblationAxis::CsaFeatures => CsaFeatures::ALL
            .into_iter()
            .map(|f| {
                with(f.name().to_string(), &|c| {
                    c.model.csa.enabled = true;
                    c.model.csa.variant = CsaVariant::ConcatHeadMlp;
                    c.model.csa.features = f;
                })
            })
            .collect(),
        AblationAxis::Embedding => {
            let file = match &base.model.embedding.file {
                Some(f) => f.clone(),
                None => write_external_embedding(base, workdir)?,
            };
            EmbeddingKind::ALL
                .into_iter()
                .map(|k| {
                    with(k.name().to_string(), &|c| {
                        c.model.embedding.kind = k;
                        c.model.embedding.file = (k == EmbeddingKind::ExternalFile).then(|| file.clone());
                    })
                })
                .collect()
        }
    };
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub label: String,
    pub params: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let top = self.rows.first().map_or(3, |r| r.metrics.top_k);
        let mut s = format!(
            "| {} | All CF1 | All OF1 | Top{top} CF1 | Top{top} OF1 | mAP | params | epochs |\n",
            self.axis.name()
        );
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.metrics;
            let pct = |v: f64| format!("{:.1}", 100.0 * v);
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.label,
                pct(m.all.cf1),
                pct(m.all.of1),
                pct(m.top.cf1),
                pct(m.top.of1),
                pct(m.map),
                r.params,
                r.epochs_run
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("axis,row,params,epochs,final_loss,{}\n", MetricReport::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.axis.name(),
                r.label,
                r.params,
                r.epochs_run,
                r.final_loss,
                r.metrics.csv_row()
            );
        }
        s
    }
}

/// Trains and evaluates every row of `axis` on `data`.
pub fn ablation_sweep(
    base: &RunConfig,
    axis: AblationAxis,
    data: &SyntheticDataset,
    workdir: &Path,
    mut on_row: impl FnMut(&AblationResult),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for row in ablation_rows(base, axis, workdir)? {
        let mut trainer = Trainer::new(&row.cfg)?;
        trainer.fit(data, |_| {})?;
        let (metrics, _) = evaluate(&trainer.model, data, row.cfg.train.batch_size)?;
        let result = AblationResult {
            label: row.label,
            params: count_params_flops(&row.cfg.model)?.params,
            epochs_run: trainer.state.epoch,
            final_loss: trainer.state.epochs.last().map_or(f64::NAN, |r| r.mean_loss),
            metrics,
        };
        on_row(&result);
        rows.push(result);
    }
    Ok(AblationTable { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts_follow_the_ablation_tables() {
        let dir = tempfile::tempdir().unwrap();
        let base = RunConfig::desk();
        let count = |a| ablation_rows(&base, a, dir.path()).unwrap().len();
        assert_eq!(count(AblationAxis::IvlaKernel), 4);
        assert_eq!(count(AblationAxis::IvlaToggles), 5);
        assert_eq!(count(AblationAxis::CsaVariant), 3);
        assert_eq!(count(AblationAxis::CsaStages), 5);
        assert_eq!(count(AblationAxis::CsaFeatures), 3);
        assert_eq!(count(AblationAxis::Embedding), 3);
    }

    #[test]
    fn rows_differ_only_along_their_axis() {
        let dir = tempfile::tempdir().unwrap();
        let base = RunConfig::desk();
        for axis in AblationAxis::ALL {
            for row in ablation_rows(&base, axis, dir.path()).unwrap() {
                row.cfg.validate().unwrap();
                assert_eq!(row.cfg.train, base.train);
                assert_eq!(row.cfg.model.seed, base.model.seed);
                assert_eq!(row.cfg.model.channels, base.model.channels);
            }
        }
        let stages = ablation_rows(&base, AblationAxis::CsaStages, dir.path()).unwrap();
        assert_eq!(stages[3].label, "S2+S3+S4");
        assert_eq!(stages[3].cfg.model.csa.stages, vec![2, 3, 4]);
    }

    #[test]
    fn external_row_points_at_a_loadable_table() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ablation_rows(&RunConfig::desk(), AblationAxis::Embedding, dir.path()).unwrap();
        let ext = rows.iter().find(|r| r.label == "external_file").unwrap();
        crate::model::Hsvlt::new(&ext.cfg.model).unwrap();
    }

    #[test]
    fn axis_names_parse() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("kernel".parse::<AblationAxis>().is_err());
    }
}
