use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const CSV_HEADER: &str = "step,epoch,split,lm,ae,rp,total,exact_match,first_node_acc,continuation_acc,wall_time";

/// One line of `metrics.jsonl`. Train records carry the mean loss since the
/// previous evaluation; test records carry accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub lm: Option<f64>,
    pub ae: Option<f64>,
    pub rp: Option<f64>,
    pub total: Option<f64>,
    pub exact_match: Option<f64>,
    pub first_node_acc: Option<f64>,
    pub continuation_acc: Option<f64>,
    /// Seconds of training and evaluation since the run started.
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.epoch,
            self.split,
            f(self.lm),
            f(self.ae),
            f(self.rp),
            f(self.total),
            f(self.exact_match),
            f(self.first_node_acc),
            f(self.continuation_acc),
            self.wall_time
        )
    }
}

/// Appends records, one JSON object per line, and syncs the file.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .io_context(|| format!("opening {}", path.display()))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).io_context(|| format!("appending to {}", path.display()))?;
    f.sync_data().io_context(|| format!("syncing {}", path.display()))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Renders records as CSV with [`CSV_HEADER`].
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, split: &str) -> MetricsRecord {
        MetricsRecord {
            config_hash: "h".into(),
            step,
            epoch: 1,
            split: split.into(),
            lm: Some(0.5),
            ae: None,
            rp: None,
            total: Some(0.5),
            exact_match: None,
            first_node_acc: None,
            continuation_acc: None,
            wall_time: 1.25,
        }
    }

    #[test]
    fn append_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        append_records(&p, &[rec(1, "train")]).unwrap();
        append_records(&p, &[rec(2, "train"), rec(2, "test")]).unwrap();
        let back = read_records(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2], rec(2, "test"));
    }

    #[test]
    fn csv_has_the_fixed_header_and_blank_missing_fields() {
        let csv = to_csv(&[rec(3, "train")]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "3,1,train,0.5,,,0.5,,,,1.250");
    }
}
