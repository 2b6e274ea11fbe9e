use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of per-epoch results. Absent measurements stay `None` so they
/// serialise as empty cells rather than zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: usize,
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Extra per-epoch measurements keyed by column name.
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
}

impl RunRecord {
    pub fn new(phase: Phase, epoch: usize) -> Self {
        RunRecord {
            trial: 0,
            phase,
            epoch,
            train_loss: None,
            test_loss: None,
            train_acc: None,
            test_acc: None,
            metrics: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.train_loss, self.test_loss, self.train_acc, self.test_acc]
            .into_iter()
            .flatten()
            .chain(self.metrics.values().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}
