//! Training loop plumbing shared by every stage.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> crate::Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(crate::Error::Config(format!("{stage}: epochs and batch_size must be positive")));
        }
        if !(self.lr.base > 0.0 && self.lr.floor > 0.0 && self.lr.decay > 0.0) {
            return Err(crate::Error::Config(format!("{stage}: learning rates must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective per example.
    pub loss: f64,
    /// Mean of each loss term per example, plus any validation metrics.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn push(&mut self, e: EpochLog) {
        log::info!(
            "epoch {:>3} lr {:.2e} loss {:.6} {}",
            e.epoch,
            e.lr,
            e.loss,
            e.terms
                .iter()
                .map(|(k, v)| format!("{k}={v:.5}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        self.epochs.push(e);
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Per-epoch shuffled minibatch index lists.
pub struct Batcher {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch: batch.max(1),
        }
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.batch).map(|c| c.to_vec()).collect()
    }
}

/// Running sums of named loss terms.
#[derive(Debug, Default)]
pub struct TermAccumulator {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl TermAccumulator {
    pub fn add(&mut self, name: &str, v: f64) {
        *self.sums.entry(name.to_string()).or_default() += v;
    }

    pub fn examples(&mut self, n: usize) {
        self.count += n;
    }

    pub fn means(&self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|(k, v)| (k.clone(), v / n)).collect()
    }
}
