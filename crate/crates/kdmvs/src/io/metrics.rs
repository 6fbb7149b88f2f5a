//! Metrics CSV: one `run,stage,metric,value` row per measurement, in the
//! order recorded. Values print with the shortest round-tripping `f64`
//! representation, so identical runs produce byte-identical files.

use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run: String,
    pub stage: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(
        run: impl Into<String>,
        stage: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) -> Self {
        MetricRow {
            run: run.into(),
            stage: stage.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    super::write_file(path.as_ref(), to_string(rows).as_bytes())
}

pub fn to_string(rows: &[MetricRow]) -> String {
    let mut s = String::from("run,stage,metric,value\n");
    for r in rows {
        debug_assert!(
            !(r.run.contains(',') || r.stage.contains(',') || r.metric.contains(',')),
            "metric fields must not contain commas"
        );
        s.push_str(&format!("{},{},{},{}\n", r.run, r.stage, r.metric, r.value));
    }
    s
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let bytes = super::read_file(path.as_ref())?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse(path.as_ref(), "metrics csv is not utf-8"))?;
    from_str(&text).map_err(|m| Error::parse(path.as_ref(), m))
}

pub fn from_str(text: &str) -> std::result::Result<Vec<MetricRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("run,stage,metric,value") => {}
        other => return Err(format!("bad header {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("row {}: expected 4 fields, got {}", i + 2, parts.len()));
        }
        let value: f64 = parts[3]
            .parse()
            .map_err(|_| format!("row {}: bad value {:?}", i + 2, parts[3]))?;
        rows.push(MetricRow::new(parts[0], parts[1], parts[2], value));
    }
    Ok(rows)
}
