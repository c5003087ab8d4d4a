//! NDJSON log files: ground truth, measurement logs and results logs.

use crate::se3::Pose;
use crate::wire::{Measurement, PoseUpdate, WireMessage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

/// One ground-truth sample. `valid = false` marks samples the reference
/// system itself could not measure; evaluation skips them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub t_us: i64,
    pub entity: String,
    pub pose: Pose,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub valid: bool,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// Records an evaluation can consume from a measurement or results log.
#[derive(Clone, Debug, PartialEq)]
pub enum EstRecord {
    Meas(Measurement),
    Update(PoseUpdate),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<(), LogError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| LogError::Parse {
            path: path.to_owned(),
            line: 0,
            detail: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Calls `f` on every non-blank line with its 1-based line number.
fn for_each_line(
    path: &Path,
    mut f: impl FnMut(usize, &str) -> Result<(), String>,
) -> Result<(), LogError> {
    let file = File::open(path).map_err(io_err(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line).map_err(|detail| LogError::Parse {
            path: path.to_owned(),
            line: i + 1,
            detail,
        })?;
    }
    Ok(())
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, LogError> {
    let mut out = Vec::new();
    for_each_line(path, |_, line| {
        out.push(serde_json::from_str(line).map_err(|e| e.to_string())?);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GtRecord>, LogError> {
    read_ndjson(path)
}

pub fn write_measurements(path: &Path, log: &[Measurement]) -> Result<(), LogError> {
    let wrapped: Vec<WireMessage> = log.iter().cloned().map(WireMessage::Meas).collect();
    write_ndjson(path, &wrapped)
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>, LogError> {
    Ok(read_estimates(path)?
        .into_iter()
        .filter_map(|r| match r {
            EstRecord::Meas(m) => Some(m),
            EstRecord::Update(_) => None,
        })
        .collect())
}

/// Measurements and updates from any wire-format log; other message types
/// (hello, bye, ...) are skipped.
pub fn read_estimates(path: &Path) -> Result<Vec<EstRecord>, LogError> {
    let mut out = Vec::new();
    for_each_line(path, |_, line| {
        match WireMessage::decode(line).map_err(|e| e.to_string())? {
            WireMessage::Meas(m) => out.push(EstRecord::Meas(m)),
            WireMessage::Update(u) => out.push(EstRecord::Update(u)),
            _ => {}
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn write_updates(path: &Path, updates: &[PoseUpdate]) -> Result<(), LogError> {
    let wrapped: Vec<WireMessage> = updates.iter().cloned().map(WireMessage::Update).collect();
    write_ndjson(path, &wrapped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.ndjson");
        let recs = vec![
            GtRecord {
                t_us: 0,
                entity: "target-1".into(),
                pose: Pose::from_translation(1.0, 2.0, 3.0),
                valid: true,
            },
            GtRecord {
                t_us: 5,
                entity: "target-1".into(),
                pose: Pose::identity(),
                valid: false,
            },
        ];
        write_ndjson(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().ends_with("[1.0,2.0,3.0,1.0,0.0,0.0,0.0]}"));
        assert_eq!(read_ground_truth(&path).unwrap(), recs);
    }

    #[test]
    fn mixed_log_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.ndjson");
        std::fs::write(
            &path,
            concat!(
                r#"{"type":"hello","sensor_id":"a"}"#,
                "\n\n",
                r#"{"type":"meas","sensor_id":"a","target":"t","t_us":1,"pose":[0,0,0,1,0,0,0],"status":true}"#,
                "\n",
                r#"{"type":"update","solve_t_us":1,"poses":[]}"#,
                "\n"
            ),
        )
        .unwrap();
        let recs = read_estimates(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(read_measurements(&path).unwrap().len(), 1);

        std::fs::write(&path, "{\"type\":\"meas\"}\n").unwrap();
        match read_estimates(&path) {
            Err(LogError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_estimates(&dir.path().join("missing")),
            Err(LogError::Io { .. })
        ));
    }
}
