//! Detection metrics, Grad-CAM and report files.

mod gradcam;
mod metrics;

use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use gradcam::{cam_from_activation, grad_cam, min_max_normalize, ActivationMap, CAM_LAYER};
pub use metrics::{auroc, confusion_metrics, youden_threshold, Confusion, EvalReport};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::spatial::ClusterLayout;

/// Positive-class probability for every sample, in input order.
pub fn predict_scores(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.input).map(|p| p[1]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    threshold: f64,
) -> Result<(EvalReport, Vec<ScoreRow>)> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let scores = predict_scores(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = confusion_metrics(&scores, &labels, threshold)?;
    let rows = samples
        .iter()
        .zip(&scores)
        .map(|(s, &score)| ScoreRow {
            id: s.id.clone(),
            label: s.label,
            score,
        })
        .collect();
    Ok((report, rows))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// `report.json` and `scores.csv` (clip id, label, score).
pub fn write_eval_outputs(report: &EvalReport, rows: &[ScoreRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::json(&report_path, e))?;
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["clip_id", "label", "score"])
        .map_err(|e| csv_err(&path, e))?;
    for r in rows {
        w.write_record([r.id.clone(), r.label.to_string(), r.score.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Binary PGM, one pixel per grid slot scaled by `cell` in both directions.
pub fn write_pgm(map: &ActivationMap, cell: usize, path: &Path) -> Result<()> {
    let cell = cell.max(1);
    let (w, h) = (map.l * cell, map.g * cell);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y / cell, x / cell).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Raw heat per slot: row, slot, sensor id (empty for unused slots), value.
pub fn write_heat_csv(map: &ActivationMap, layout: &ClusterLayout, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["row", "slot", "sensor_id", "heat"])
        .map_err(|e| csv_err(path, e))?;
    for r in 0..map.g {
        for s in 0..map.l {
            let id = layout.rows[r][s].map_or_else(String::new, |i| layout.sensor_ids[i].clone());
            w.write_record([r.to_string(), s.to_string(), id, map.at(r, s).to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format channel traces tagged with the heat of each sensor's slot,
/// for overlaying relevance on waveforms.
pub fn write_trace_csv(
    map: &ActivationMap,
    layout: &ClusterLayout,
    sample: &Sample,
    path: &Path,
) -> Result<()> {
    let [g, l, t, c] = sample.dims;
    if g != map.g || l != map.l {
        return Err(Error::Shape(format!(
            "map is {}x{}, sample grid is {g}x{l}",
            map.g, map.l
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "sensor_id",
        "row",
        "slot",
        "component",
        "heat",
        "sample",
        "value",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in 0..g {
        for s in 0..l {
            let Some(sensor) = layout.rows[r][s] else {
                continue;
            };
            let id = &layout.sensor_ids[sensor];
            let heat = map.at(r, s).to_string();
            for k in 0..c {
                for j in 0..t {
                    let v = sample.input[((r * l + s) * t + j) * c + k];
                    w.write_record([
                        id.clone(),
                        r.to_string(),
                        s.to_string(),
                        k.to_string(),
                        heat.clone(),
                        j.to_string(),
                        v.to_string(),
                    ])
                    .map_err(|e| csv_err(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
