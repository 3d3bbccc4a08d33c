use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::avp::VulnClass;
use crate::{Error, Result};

use super::dataset::SampleRecord;
use super::metrics::Metrics;
use super::model::{Model, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub metrics: Vec<ReportRow>,
}

pub fn build_report(rows: &[(VulnClass, Metrics)], config: &TrainConfig) -> Report {
    Report {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: config.clone(),
        metrics: rows
            .iter()
            .map(|(class, m)| ReportRow {
                class: class.display_name().to_string(),
                accuracy: m.accuracy,
                recall: m.recall,
                precision: m.precision,
                f1: m.f1,
                tp: m.tp,
                fp: m.fp,
                tn: m.tn,
                fn_: m.fn_,
            })
            .collect(),
    }
}

/// TOML text: version, seed, config echo, one `[[metrics]]` row per class.
pub fn export_report(rows: &[(VulnClass, Metrics)], config: &TrainConfig) -> String {
    toml::to_string(&build_report(rows, config)).expect("report serializes")
}

pub fn parse_report(text: &str) -> Result<Report> {
    toml::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!(",{v}")).collect()
}

/// Line-delimited text for external plotting:
/// `node,<id>,<index>,<score>,<h_s...>` for every node, then
/// `graph,<id>,<y>,<h_g...>` per contract. Empty contracts are skipped.
pub fn dump_features(model: &Model, samples: &[SampleRecord], out: &mut impl Write) -> Result<()> {
    let io_err = |e| Error::io("<feature dump>", e);
    for s in samples {
        if s.bytecode.is_empty() {
            continue;
        }
        let f = model.features(s)?;
        for (i, row) in f.sequence.rows().into_iter().enumerate() {
            writeln!(out, "node,{},{i},{}{}", s.id, f.scores[i], join(row.iter().copied())).map_err(io_err)?;
        }
        writeln!(out, "graph,{},{}{}", s.id, f.y, join(f.graph.iter().copied())).map_err(io_err)?;
    }
    Ok(())
}
