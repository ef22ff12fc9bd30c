//! CSV tables written by `bench`, `eval-poses` and `aggregate`, with readers
//! that accept exactly the headers the writers produce.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use posebench_core::refine::{Stage, StageTimings};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RUNTIMES_HEADER: [&str; 3] = ["scene", "stage", "seconds"];
pub const METRICS_HEADER: [&str; 3] = ["scene", "metric", "value"];
pub const ACCURACY_HEADER: [&str; 3] = ["rot_thresh_deg", "pos_thresh", "percentage"];
pub const TRADEOFF_HEADER: [&str; 4] = ["config_label", "total_seconds_mean", "metric", "value"];

/// Extra row per scene in `runtimes.csv` holding the stage sum.
pub const TOTAL_STAGE: &str = "total";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: expected header {expected:?}, got {got:?}")]
    Header {
        path: PathBuf,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("{path}: {detail}")]
    Invalid { path: PathBuf, detail: String },
    #[error("no runs to tabulate")]
    EmptyRuns,
    #[error("run '{label}' has no '{metric}' value for scene '{scene}'")]
    MissingMetric {
        label: String,
        metric: String,
        scene: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub scene: String,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub rot_thresh_deg: f64,
    pub pos_thresh: f64,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub config_label: String,
    pub total_seconds_mean: f64,
    pub metric: String,
    pub value: f64,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

pub fn write_rows<T: Serialize>(
    path: &Path,
    rows: &[T],
    header: &[&str],
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err(path))?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let got: Vec<String> = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != header {
        return Err(ReportError::Header {
            path: path.to_path_buf(),
            expected: header.iter().map(|s| s.to_string()).collect(),
            got,
        });
    }
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err(path))
}

/// Stage rows in canonical order (missing stages as 0) plus the total row.
pub fn runtime_rows(scene: &str, timings: &StageTimings) -> Vec<RuntimeRow> {
    let filled = timings.zero_filled();
    let mut rows: Vec<RuntimeRow> = filled
        .stages
        .iter()
        .map(|(stage, seconds)| RuntimeRow {
            scene: scene.to_string(),
            stage: stage.as_str().to_string(),
            seconds: *seconds,
        })
        .collect();
    rows.push(RuntimeRow {
        scene: scene.to_string(),
        stage: TOTAL_STAGE.to_string(),
        seconds: filled.total(),
    });
    rows
}

/// Per-scene timings from `runtimes.csv`, in file order. The total row must
/// agree with the stage sum.
pub fn read_runtimes(path: &Path) -> Result<Vec<(String, StageTimings)>, ReportError> {
    let rows: Vec<RuntimeRow> = read_rows(path, &RUNTIMES_HEADER)?;
    let invalid = |detail: String| ReportError::Invalid {
        path: path.to_path_buf(),
        detail,
    };
    let mut out: Vec<(String, StageTimings, Option<f64>)> = Vec::new();
    for row in rows {
        if out.last().is_none_or(|(s, _, _)| *s != row.scene) {
            if out.iter().any(|(s, _, _)| *s == row.scene) {
                return Err(invalid(format!(
                    "rows of scene '{}' are not contiguous",
                    row.scene
                )));
            }
            out.push((row.scene.clone(), StageTimings::default(), None));
        }
        let (_, timings, total) = out.last_mut().expect("pushed above");
        if row.stage == TOTAL_STAGE {
            *total = Some(row.seconds);
            continue;
        }
        let stage = Stage::from_name(&row.stage)
            .ok_or_else(|| invalid(format!("unknown stage '{}'", row.stage)))?;
        if timings.seconds(stage).is_some() {
            return Err(invalid(format!(
                "duplicate stage '{}' for scene '{}'",
                row.stage, row.scene
            )));
        }
        timings.record(stage, row.seconds);
    }
    out.into_iter()
        .map(|(scene, timings, total)| {
            if let Some(t) = total {
                if (t - timings.total()).abs() > 1e-6 {
                    return Err(invalid(format!(
                        "scene '{scene}': total {t} differs from stage sum {}",
                        timings.total()
                    )));
                }
            }
            Ok((scene, timings))
        })
        .collect()
}

pub fn metric_rows(scene: &str, metrics: &BTreeMap<String, f64>) -> Vec<MetricRow> {
    metrics
        .iter()
        .map(|(metric, value)| MetricRow {
            scene: scene.to_string(),
            metric: metric.clone(),
            value: *value,
        })
        .collect()
}

/// Per-scene metric maps from `metrics.csv`, scenes in file order.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, BTreeMap<String, f64>)>, ReportError> {
    let rows: Vec<MetricRow> = read_rows(path, &METRICS_HEADER)?;
    let mut out: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for row in rows {
        let idx = match out.iter().position(|(s, _)| *s == row.scene) {
            Some(i) => i,
            None => {
                out.push((row.scene.clone(), BTreeMap::new()));
                out.len() - 1
            }
        };
        if out[idx].1.insert(row.metric.clone(), row.value).is_some() {
            return Err(ReportError::Invalid {
                path: path.to_path_buf(),
                detail: format!(
                    "duplicate metric '{}' for scene '{}'",
                    row.metric, row.scene
                ),
            });
        }
    }
    Ok(out)
}

/// What [`emit_tradeoff_table`] needs from one benchmark run.
pub trait TradeoffSource {
    fn label(&self) -> &str;
    /// Per scene: zero-filled timings and metric values.
    fn scene_results(&self) -> Vec<(&str, &StageTimings, &BTreeMap<String, f64>)>;
}

/// One row per run: mean total seconds over scenes, where stages a scene
/// never reached count as 0, and the scene mean of `metric`.
pub fn tradeoff_rows<R: TradeoffSource>(
    runs: &[R],
    metric: &str,
) -> Result<Vec<TradeoffRow>, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::EmptyRuns);
    }
    runs.iter()
        .map(|run| {
            let scenes = run.scene_results();
            let n = scenes.len().max(1) as f64;
            let mut time = 0.0;
            let mut value = 0.0;
            for (scene, timings, metrics) in &scenes {
                time += timings.zero_filled().total();
                value += metrics
                    .get(metric)
                    .ok_or_else(|| ReportError::MissingMetric {
                        label: run.label().to_string(),
                        metric: metric.to_string(),
                        scene: scene.to_string(),
                    })?;
            }
            Ok(TradeoffRow {
                config_label: run.label().to_string(),
                total_seconds_mean: time / n,
                metric: metric.to_string(),
                value: value / n,
            })
        })
        .collect()
}

pub fn emit_tradeoff_table<R: TradeoffSource>(
    runs: &[R],
    metric: &str,
) -> Result<String, ReportError> {
    Ok(to_csv_string(&tradeoff_rows(runs, metric)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runtime_rows_fill_and_total() {
        let mut t = StageTimings::default();
        t.record(Stage::PairSelection, 0.25);
        t.record(Stage::Matching, 0.5);
        let rows = runtime_rows("a", &t);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4].seconds, 0.0);
        assert_eq!(rows[5].stage, TOTAL_STAGE);
        assert_eq!(rows[5].seconds, 0.75);
    }
}
