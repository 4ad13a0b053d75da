//! Per-epoch metrics rows and their CSV/JSON files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Augment;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,loss,top1,top5,lr,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    /// Present when the task has at least five classes.
    pub top5: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    /// Equality of everything except wall time, compared bit for bit.
    pub fn same_result(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.split == other.split
            && self.loss.to_bits() == other.loss.to_bits()
            && self.top1.to_bits() == other.top1.to_bits()
            && self.top5.map(f64::to_bits) == other.top5.map(f64::to_bits)
            && self.lr.to_bits() == other.lr.to_bits()
    }

    fn csv_line(&self) -> String {
        let top5 = self.top5.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.top1,
            top5,
            self.lr,
            self.seconds
        )
    }
}

/// JSON mirror of a metrics CSV plus provenance for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub stage: String,
    pub method: String,
    pub seed: u64,
    /// Augmentation used for training batches.
    pub train_augment: Augment,
    /// Always false: evaluation batches are only normalized.
    pub eval_augmented: bool,
    /// The full experiment document that produced the rows.
    pub config: serde_json::Value,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_text(csv_path, &self.to_csv())?;
        write_text(json_path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("metrics json: {e}")))
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Rows must be strictly increasing in `(epoch, split)` with accuracies in `[0, 1]`.
pub fn check_rows(rows: &[MetricsRow]) -> Vec<String> {
    let mut v = Vec::new();
    for w in rows.windows(2) {
        if (w[0].epoch, w[0].split) >= (w[1].epoch, w[1].split) {
            v.push(format!("rows out of order at epoch {} {}", w[1].epoch, w[1].split.as_str()));
        }
    }
    for r in rows {
        for acc in std::iter::once(r.top1).chain(r.top5) {
            if !(0.0..=1.0).contains(&acc) {
                v.push(format!("accuracy {acc} outside [0, 1] at epoch {}", r.epoch));
            }
        }
    }
    v
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, split: Split) -> MetricsRow {
        MetricsRow { epoch, split, loss: 0.5, top1: 0.75, top5: None, lr: 0.001, seconds: 1.5 }
    }

    #[test]
    fn csv_has_fixed_columns() {
        let csv = rows_to_csv(&[row(1, Split::Train)]);
        assert_eq!(csv, "epoch,split,loss,top1,top5,lr,seconds\n1,train,0.5,0.75,,0.001,1.5\n");
    }

    #[test]
    fn ordering_check() {
        assert!(check_rows(&[row(1, Split::Train), row(1, Split::Test), row(2, Split::Train)]).is_empty());
        assert_eq!(check_rows(&[row(1, Split::Test), row(1, Split::Train)]).len(), 1);
    }

    #[test]
    fn same_result_ignores_wall_time() {
        let a = row(1, Split::Test);
        let mut b = a.clone();
        b.seconds = 99.0;
        assert!(a.same_result(&b));
        b.loss = 0.5000000001;
        assert!(!a.same_result(&b));
    }
}
