use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `ssl`, `warmup`, `train`, `test` or `lineval`.
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Counters and history of a run; everything needed to resume besides tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    pub stage: usize,
    /// Training epochs completed over the whole run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

impl RunState {
    pub fn new(seed: u64) -> Self {
        RunState {
            seed,
            ..Default::default()
        }
    }

    /// Record a finished training epoch (advances the counter).
    pub fn push_train(&mut self, mut rec: EpochRecord) {
        rec.epoch = self.epoch;
        self.epoch += 1;
        self.wall_seconds += rec.wall_seconds;
        self.history.push(rec);
    }

    /// Record an evaluation of the epoch just completed.
    pub fn push_eval(&mut self, mut rec: EpochRecord) {
        rec.epoch = self.epoch.saturating_sub(1);
        self.wall_seconds += rec.wall_seconds;
        self.history.push(rec);
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        write_metrics(path, &self.history)
    }
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "split", "loss", "accuracy", "lr", "wall_seconds"];

pub fn write_metrics(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// CSV text with the timing column blanked, for reproducibility checks.
pub fn without_timing(rows: &[EpochRecord]) -> Vec<EpochRecord> {
    rows.iter()
        .cloned()
        .map(|mut r| {
            r.wall_seconds = 0.0;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let mut s = RunState::new(1);
        s.push_train(EpochRecord {
            epoch: 99,
            split: "train".into(),
            loss: 0.1 + 0.2,
            accuracy: None,
            lr: 0.01,
            wall_seconds: 1.5,
        });
        s.push_eval(EpochRecord {
            epoch: 0,
            split: "test".into(),
            loss: 1.0 / 3.0,
            accuracy: Some(0.625),
            lr: 0.01,
            wall_seconds: 0.5,
        });
        assert_eq!(s.epoch, 1);
        assert_eq!(s.history[0].epoch, 0);
        assert_eq!(s.wall_seconds, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        s.write_metrics(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        assert_eq!(read_metrics(&p).unwrap(), s.history);
    }

    #[test]
    fn json_state_is_exact() {
        let mut s = RunState::new(3);
        for (i, loss) in [2.6082292795181274, 0.1 + 0.2, 1e-300, f64::MAX].into_iter().enumerate() {
            s.push_train(EpochRecord {
                epoch: i,
                split: "ssl".into(),
                loss,
                accuracy: Some(loss / 7.0),
                lr: 0.3 * loss,
                wall_seconds: 0.0,
            });
        }
        let back: RunState = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
