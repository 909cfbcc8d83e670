//! Metrics CSV. One record per line, each written and flushed whole, so the
//! file stays parseable after abnormal termination.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::HarnessError;

pub const HEADER: &str = "record,step,epoch,train_loss,train_metric,test_metric,mean_abs_cell,cell_penalty,weight_penalty";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    /// Evaluation of the untrained model.
    Init,
    /// Periodic running-average training record.
    Train,
    /// End of epoch, with test-set evaluation.
    Epoch,
}

impl RecordKind {
    fn name(self) -> &'static str {
        match self {
            RecordKind::Init => "init",
            RecordKind::Train => "train",
            RecordKind::Epoch => "epoch",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(RecordKind::Init),
            "train" => Some(RecordKind::Train),
            "epoch" => Some(RecordKind::Epoch),
            _ => None,
        }
    }
}

/// Training loss is in nats. For text the metrics are bits per character;
/// for digit tasks `train_metric` is the fraction of fully correct training
/// sequences and `test_metric` the number of fully correct test sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: u64,
    pub train_loss: Option<f64>,
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub mean_abs_cell: Option<f64>,
    pub cell_penalty: Option<f64>,
    pub weight_penalty: Option<f64>,
    /// Seconds since the run started. Kept out of the CSV so that files
    /// from identical runs compare equal byte for byte.
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn new(kind: RecordKind, step: u64, epoch: u64) -> Self {
        Self {
            kind,
            step,
            epoch,
            train_loss: None,
            train_metric: None,
            test_metric: None,
            mean_abs_cell: None,
            cell_penalty: None,
            weight_penalty: None,
            wall_time: 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kind.name(),
            self.step,
            self.epoch,
            f(self.train_loss),
            f(self.train_metric),
            f(self.test_metric),
            f(self.mean_abs_cell),
            f(self.cell_penalty),
            f(self.weight_penalty)
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return None;
        }
        let opt = |s: &str| -> Option<Option<f64>> {
            if s.is_empty() {
                Some(None)
            } else {
                s.parse().ok().map(Some)
            }
        };
        Some(Self {
            kind: RecordKind::parse(parts[0])?,
            step: parts[1].parse().ok()?,
            epoch: parts[2].parse().ok()?,
            train_loss: opt(parts[3])?,
            train_metric: opt(parts[4])?,
            test_metric: opt(parts[5])?,
            mean_abs_cell: opt(parts[6])?,
            cell_penalty: opt(parts[7])?,
            weight_penalty: opt(parts[8])?,
            wall_time: 0.0,
        })
    }
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    rows: u64,
}

impl MetricsWriter {
    /// Starts a new file containing only the header.
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let mut file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| HarnessError::io(path, e))?;
        file.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            rows: 0,
        })
    }

    /// Reopens an existing file, keeping the first `rows` records and
    /// discarding anything written after the checkpoint being resumed.
    pub fn resume(path: &Path, rows: u64) -> Result<Self, HarnessError> {
        let kept: Vec<String> = match File::open(path) {
            Ok(f) => BufReader::new(f)
                .lines()
                .skip(1)
                .take(rows as usize)
                .collect::<Result<_, _>>()
                .map_err(|e| HarnessError::io(path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(HarnessError::io(path, e)),
        };
        if kept.len() as u64 != rows {
            return Err(HarnessError::Checkpoint(format!(
                "{} holds {} records, checkpoint expects {rows}",
                path.display(),
                kept.len()
            )));
        }
        let mut w = Self::create(path)?;
        for line in kept {
            writeln!(w.file, "{line}").map_err(|e| HarnessError::io(path, e))?;
        }
        w.file.flush().map_err(|e| HarnessError::io(path, e))?;
        w.rows = rows;
        Ok(w)
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), HarnessError> {
        let line = format!("{}\n", record.to_csv());
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| HarnessError::io(&self.path, e))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(HarnessError::Config(format!("{}: unexpected metrics header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            MetricsRecord::from_csv(l)
                .ok_or_else(|| HarnessError::Config(format!("{}: bad record on line {}", path.display(), i + 2)))
        })
        .collect()
}
