//! Line-delimited JSON metrics and the reward-curve table derived from them.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mvgrpo::IterationReport;

/// Appends one record per line and flushes after each, so an aborted run
/// keeps every completed iteration.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Opens `path` for appending, first cutting it down to `keep` records.
    pub fn open(path: &Path, keep: usize) -> Result<Self> {
        let existing = if path.exists() { read_raw_lines(path)? } else { Vec::new() };
        if existing.len() != keep {
            if existing.len() < keep {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} records but resume state is at iteration {keep}",
                    path.display(),
                    existing.len()
                )));
            }
            let mut text = String::new();
            for line in &existing[..keep] {
                text.push_str(line);
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, report: &IterationReport) -> Result<()> {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn read_raw_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationReport>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub const PLOT_HEADER: &str = "iteration\tanchor_mean_reward\tloss";

/// Tab-separated `(iteration, anchor mean reward, loss)` rows. Floats use
/// the shortest representation that parses back to the same value.
pub fn plot_table(records: &[IterationReport]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{}\t{:?}\t{:?}\n", r.iteration, r.anchor_mean_reward, r.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> IterationReport {
        IterationReport {
            iteration: i,
            anchor_mean_reward: 0.1 + i as f64 / 3.0,
            view_mean_rewards: vec![0.5, 0.25],
            loss: -1.0 / (i as f64 + 7.0),
            ratio_min: 1.0,
            ratio_mean: 1.0,
            ratio_max: 1.0,
            clip_fraction: 0.0,
            nfe: 48,
            training_evals: 96,
            grad_norm: 0.3,
            saturated_prompts: 0,
            param_digest: "ab".into(),
            wall_time_s: None,
        }
    }

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::open(&path, 0).unwrap();
        for i in 0..3 {
            w.append(&record(i)).unwrap();
        }
        assert_eq!(read_metrics(&path).unwrap(), (0..3).map(record).collect::<Vec<_>>());
    }

    #[test]
    fn open_truncates_to_keep() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::open(&path, 0).unwrap();
        for i in 0..5 {
            w.append(&record(i)).unwrap();
        }
        drop(w);
        let mut w = MetricsWriter::open(&path, 2).unwrap();
        w.append(&record(2)).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2], record(2));
        assert!(MetricsWriter::open(&path, 9).is_err());
    }

    #[test]
    fn malformed_line_is_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&record(0)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"iteration\": 1\n")).unwrap();
        let err = read_metrics(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn plot_table_rows_and_precision() {
        assert_eq!(plot_table(&[]), format!("{PLOT_HEADER}\n"));
        let recs: Vec<_> = (0..4).map(record).collect();
        let table = plot_table(&recs);
        let rows: Vec<&str> = table.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for (row, r) in rows.iter().zip(&recs) {
            let cols: Vec<&str> = row.split('\t').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), r.iteration);
            assert_eq!(cols[1].parse::<f64>().unwrap(), r.anchor_mean_reward);
            assert_eq!(cols[2].parse::<f64>().unwrap(), r.loss);
        }
    }
}
