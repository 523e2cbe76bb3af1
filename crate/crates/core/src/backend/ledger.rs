use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// Per-tag call counter shared by every client of a run.
#[derive(Debug, Default)]
pub struct CallLedger {
    counts: Mutex<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tag: &str) {
        let mut counts = self.counts.lock().expect("ledger lock poisoned");
        *counts.entry(tag.to_string()).or_insert(0) += 1;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let counts = self.counts.lock().expect("ledger lock poisoned").clone();
        let total = counts.values().sum();
        LedgerSnapshot { counts, total }
    }
}

impl LedgerSnapshot {
    pub fn get(&self, tag: &str) -> u64 {
        self.counts.get(tag).copied().unwrap_or(0)
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        let counts: BTreeMap<String, u64> = self
            .counts
            .iter()
            .map(|(k, v)| (k.clone(), v - earlier.get(k)))
            .filter(|(_, v)| *v > 0)
            .collect();
        let total = counts.values().sum();
        LedgerSnapshot { counts, total }
    }
}
