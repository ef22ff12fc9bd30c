//! Per-view image metric tables (`scene,view,metric,value`).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelIoError;

const HEADER: [&str; 4] = ["scene", "view", "metric", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Psnr,
    Ssim,
    Lpips,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Psnr, MetricKind::Ssim, MetricKind::Lpips];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::Lpips => "lpips",
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric '{s}'"))
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub scene: String,
    pub view: String,
    pub metric: MetricKind,
    pub value: f64,
}

/// Records grouped by scene, each group in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pub scenes: BTreeMap<String, Vec<MetricRecord>>,
}

impl MetricTable {
    pub fn len(&self) -> usize {
        self.scenes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.scenes.values().flatten()
    }
}

pub fn read_metric_table(path: &Path) -> Result<MetricTable, ModelIoError> {
    let file = std::fs::File::open(path).map_err(|e| ModelIoError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| ModelIoError::MalformedHeader {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(ModelIoError::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("expected '{}'", HEADER.join(",")),
        });
    }

    let mut table = MetricTable::default();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let parse_err = |detail: String| ModelIoError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", row.len())));
        }
        let metric: MetricKind = row[2].parse().map_err(parse_err)?;
        let value: f64 = row[3]
            .parse()
            .map_err(|_| parse_err(format!("cannot parse value '{}'", &row[3])))?;
        if value.is_nan() {
            return Err(parse_err("NaN metric value".into()));
        }
        let record = MetricRecord {
            scene: row[0].to_string(),
            view: row[1].to_string(),
            metric,
            value,
        };
        if !seen.insert((record.scene.clone(), record.view.clone(), metric)) {
            return Err(ModelIoError::DuplicateMetric {
                path: path.to_path_buf(),
                row: line,
                scene: record.scene,
                view: record.view,
                metric: metric.to_string(),
            });
        }
        table
            .scenes
            .entry(record.scene.clone())
            .or_default()
            .push(record);
    }
    Ok(table)
}

pub fn write_metric_table(path: &Path, table: &MetricTable) -> Result<(), ModelIoError> {
    let io_err = |e: csv::Error| ModelIoError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
    writer.write_record(HEADER).map_err(io_err)?;
    for r in table.records() {
        writer
            .write_record([
                r.scene.as_str(),
                r.view.as_str(),
                r.metric.as_str(),
                &format!("{:?}", r.value),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| ModelIoError::io(path, e))
}
