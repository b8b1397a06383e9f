//! Ablation tables: one training run per row with a shared seed.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datamodel::DatasetSplit;
use crate::error::{Error, Result};
use crate::evalretrieval::MetricsReport;
use crate::model::Components;
use crate::objective::LossKind;
use crate::train::{final_metrics, Trainer};

pub const CSV_HEADER: &str = "row,r1_t2v,r5_t2v,r10_t2v,mdr_t2v,r1_v2t,r5_v2t,r10_v2t,mdr_v2t,rsum";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Components,
    Aggregation,
    Alpha,
    Loss,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Aggregation => "aggregation",
            Axis::Alpha => "alpha",
            Axis::Loss => "loss",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Axis::Components),
            "aggregation" => Ok(Axis::Aggregation),
            "alpha" => Ok(Axis::Alpha),
            "loss" => Ok(Axis::Loss),
            other => Err(Error::Config {
                field: "axis".into(),
                reason: format!("unknown axis `{other}` (components, aggregation, alpha, loss)"),
            }),
        }
    }
}

/// Default component rows, from no semantics to all four vectors.
pub const COMPONENT_ROWS: [&str; 8] = [
    "none",
    "TDS",
    "TDS+THS",
    "VHS+TDS+THS",
    "VDS+TDS",
    "VDS+VHS+TDS",
    "VDS+TDS+THS",
    "all",
];

pub const ALPHA_ROWS: [f64; 4] = [0.7, 0.8, 0.9, 1.0];

/// A labelled configuration variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpec {
    pub label: String,
    pub config: RunConfig,
}

/// Rows for `axis` derived from `base`. `custom` overrides the component
/// rows (labels such as `TDS+THS`) or the alpha values.
pub fn rows(base: &RunConfig, axis: Axis, custom: Option<&[String]>) -> Result<Vec<RowSpec>> {
    let with = |label: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        RowSpec { label, config }
    };
    let specs = match axis {
        Axis::Components => {
            let labels: Vec<String> = match custom {
                Some(c) => c.to_vec(),
                None => COMPONENT_ROWS.iter().map(|s| s.to_string()).collect(),
            };
            labels
                .into_iter()
                .map(|label| {
                    let c = Components::parse(&label).ok_or_else(|| Error::Config {
                        field: "rows".into(),
                        reason: format!("unknown component row `{label}`"),
                    })?;
                    Ok(with(c.label(), &|cfg| cfg.model.components = c))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Axis::Aggregation => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(visual, textual)| {
                let label = format!("{}+{}", if visual { "VGR" } else { "VMP" }, if textual { "TGR" } else { "TMP" });
                with(label, &|cfg| {
                    cfg.model.visual_graph = visual;
                    cfg.model.textual_graph = textual;
                })
            })
            .collect(),
        Axis::Alpha => {
            let values: Vec<f64> = match custom {
                Some(c) => c
                    .iter()
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Config {
                            field: "rows".into(),
                            reason: format!("`{s}` is not a number"),
                        })
                    })
                    .collect::<Result<_>>()?,
                None => ALPHA_ROWS.to_vec(),
            };
            values
                .into_iter()
                .map(|a| with(format!("alpha={a}"), &|cfg| cfg.loss.alpha = a))
                .collect()
        }
        Axis::Loss => vec![
            with("B-InfoNCE".into(), &|cfg| cfg.loss.kind = LossKind::BInfoNce),
            with("HAL".into(), &|cfg| {
                cfg.loss.kind = LossKind::Hal;
                cfg.loss.lambda2 = 0.0;
            }),
            with("M-HAL".into(), &|cfg| cfg.loss.kind = LossKind::Hal),
        ],
    };
    for spec in &specs {
        spec.config.validate()?;
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub metrics: MetricsReport,
}

/// Trains every row from scratch on `split` and reports final metrics.
/// Rows run in parallel; each run is deterministic on its own.
pub fn run(specs: &[RowSpec], split: &DatasetSplit) -> Result<Vec<AblationRow>> {
    specs
        .par_iter()
        .map(|spec| {
            let mut trainer = Trainer::new(spec.config.clone(), split)?;
            let history = trainer.run(|_| {})?;
            let metrics = final_metrics(&history).expect("run always ends with an evaluation");
            Ok(AblationRow {
                row: spec.label.clone(),
                metrics,
            })
        })
        .collect()
}

pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        let (t, v) = (&r.metrics.t2v, &r.metrics.v2t);
        let values = [t.r1, t.r5, t.r10, t.mdr, v.r1, v.r5, v.r10, v.mdr, r.metrics.r_sum];
        let mut record = vec![r.row.clone()];
        record.extend(values.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is built from UTF-8 strings"))
}
