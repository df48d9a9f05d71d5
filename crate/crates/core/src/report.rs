//! Run summaries and the files written to a run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::{
    RunOutcome, Strategy, METRICS, METRIC_IMAGE_AUROC, METRIC_IMAGE_F1, METRIC_PIXEL_AUPRO, METRIC_PIXEL_AUROC,
    METRIC_PIXEL_F1, METRIC_PIXEL_PR, METRIC_ROUTING,
};
use crate::memory::save_banks;
use crate::metrics::{self, MemoryReport, RMatrix};

/// Headline numbers for one strategy.
///
/// Image metrics average the final row over all tasks. Pixel metrics average
/// the pixel-labelled tasks at the step where the last of them was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub label: String,
    pub memory_size: usize,
    pub image_auroc: f64,
    pub image_f1: f64,
    pub pixel_auroc: Option<f64>,
    pub pixel_f1: Option<f64>,
    pub pixel_pr: Option<f64>,
    pub pixel_aupro: Option<f64>,
    pub routing_accuracy: Option<f64>,
    pub forgetting_image_f1_pct: Option<f64>,
    pub forgetting_pixel_f1_pct: Option<f64>,
    pub memory: MemoryReport,
}

fn final_row_mean(r: &RMatrix) -> Result<f64> {
    r.row_mean(r.tasks() - 1)
}

fn pixel_mean(r: &RMatrix, pixel_tasks: &[usize]) -> Result<Option<f64>> {
    if pixel_tasks.is_empty() {
        return Ok(None);
    }
    Ok(Some(final_row_mean(&r.restrict(pixel_tasks))?))
}

impl Summary {
    pub fn from_outcome(outcome: &RunOutcome) -> Result<Self> {
        let cfg = &outcome.config;
        let px = &outcome.pixel_tasks;
        let routing = outcome.matrix(METRIC_ROUTING);
        let routing_accuracy = match cfg.strategy {
            Strategy::PatchCoreCl => Some(final_row_mean(routing)?),
            _ => None,
        };
        let image_f1 = outcome.matrix(METRIC_IMAGE_F1);
        let forgetting_image_f1_pct =
            (image_f1.tasks() >= 2).then(|| metrics::average_forgetting(image_f1)).transpose()?;
        let forgetting_pixel_f1_pct = (px.len() >= 2)
            .then(|| metrics::average_forgetting(&outcome.matrix(METRIC_PIXEL_F1).restrict(px)))
            .transpose()?;
        Ok(Self {
            strategy: cfg.strategy,
            label: cfg.strategy.label(cfg.memory_size),
            memory_size: cfg.memory_size,
            image_auroc: final_row_mean(outcome.matrix(METRIC_IMAGE_AUROC))?,
            image_f1: final_row_mean(image_f1)?,
            pixel_auroc: pixel_mean(outcome.matrix(METRIC_PIXEL_AUROC), px)?,
            pixel_f1: pixel_mean(outcome.matrix(METRIC_PIXEL_F1), px)?,
            pixel_pr: pixel_mean(outcome.matrix(METRIC_PIXEL_PR), px)?,
            pixel_aupro: pixel_mean(outcome.matrix(METRIC_PIXEL_AUPRO), px)?,
            routing_accuracy,
            forgetting_image_f1_pct,
            forgetting_pixel_f1_pct,
            memory: outcome.memory,
        })
    }
}

/// Row names of `report.csv`, in order.
pub const REPORT_ROWS: [&str; 13] = [
    "image_auroc",
    "image_f1",
    "pixel_auroc",
    "pixel_f1",
    "pixel_pr",
    "pixel_aupro",
    "arch_mem_mb",
    "add_mem_mb",
    "rel_gap_image_f1",
    "rel_gap_pixel_f1",
    "avg_forget_image_f1_pct",
    "avg_forget_pixel_f1_pct",
    "routing_accuracy",
];

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Metric-by-strategy table. Relative gaps need a Joint-Train column and,
/// like forgetting, are only filled for the continual strategies.
pub fn write_report_csv(path: impl AsRef<Path>, summaries: &[Summary]) -> Result<()> {
    let joint = summaries.iter().find(|s| s.strategy == Strategy::JointTrain);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["metric".to_string()];
    header.extend(summaries.iter().map(|s| s.label.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for row in REPORT_ROWS {
        let mut record = vec![row.to_string()];
        for s in summaries {
            let cl = s.strategy.is_continual();
            let gap = |cl_value: Option<f64>, joint_value: Option<f64>| match (cl, cl_value, joint_value) {
                (true, Some(c), Some(j)) => Some(metrics::relative_gap(j, c)),
                _ => None,
            };
            let value = match row {
                "image_auroc" => Some(s.image_auroc),
                "image_f1" => Some(s.image_f1),
                "pixel_auroc" => s.pixel_auroc,
                "pixel_f1" => s.pixel_f1,
                "pixel_pr" => s.pixel_pr,
                "pixel_aupro" => s.pixel_aupro,
                "arch_mem_mb" => Some(s.memory.architecture_mb),
                "add_mem_mb" => Some(s.memory.additional_mb),
                "rel_gap_image_f1" => gap(Some(s.image_f1), joint.map(|j| j.image_f1)),
                "rel_gap_pixel_f1" => gap(s.pixel_f1, joint.and_then(|j| j.pixel_f1)),
                "avg_forget_image_f1_pct" => s.forgetting_image_f1_pct.filter(|_| cl),
                "avg_forget_pixel_f1_pct" => s.forgetting_pixel_f1_pct.filter(|_| cl),
                "routing_accuracy" => s.routing_accuracy,
                _ => unreachable!("row list is fixed"),
            };
            record.push(fmt(value));
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean image F1 over the tasks seen so far, after each training step.
pub fn f1_curve(outcome: &RunOutcome) -> Result<Vec<f64>> {
    let r = outcome.matrix(METRIC_IMAGE_F1);
    (0..r.tasks()).map(|k| r.row_mean(k)).collect()
}

/// `curve_f1_image.csv`: one row per step, one column per strategy.
pub fn write_curve_csv(path: impl AsRef<Path>, task_names: &[String], columns: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["task_index".to_string(), "task".to_string()];
    header.extend(columns.iter().map(|(label, _)| label.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for (k, name) in task_names.iter().enumerate() {
        let mut record = vec![k.to_string(), name.clone()];
        record.extend(columns.iter().map(|(_, curve)| fmt(curve.get(k).copied())));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::Malformed(format!("csv: {other:?}")),
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `r_matrix_<metric>.json`, `report.csv`, `curve_f1_image.csv`,
/// `banks.clmb`, `memory_report.json` and `summary.json` into `dir`.
pub fn write_run_dir(dir: impl AsRef<Path>, outcome: &RunOutcome) -> Result<Summary> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for metric in METRICS {
        write_json(dir.join(format!("r_matrix_{metric}.json")), outcome.matrix(metric))?;
    }
    let summary = Summary::from_outcome(outcome)?;
    write_report_csv(dir.join("report.csv"), std::slice::from_ref(&summary))?;
    write_curve_csv(dir.join("curve_f1_image.csv"), &outcome.task_names, &[(summary.label.clone(), f1_curve(outcome)?)])?;
    save_banks(&outcome.banks, dir.join("banks.clmb"))?;
    write_json(dir.join("memory_report.json"), &outcome.memory)?;
    write_json(dir.join("summary.json"), &summary)?;
    Ok(summary)
}
