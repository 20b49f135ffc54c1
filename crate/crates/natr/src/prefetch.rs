//! Endless, epoch-ordered batch stream with optional background
//! preparation.
//!
//! Epoch `e` is built by worker `e mod N` and handed over through a bounded
//! channel, so the sequence of batches is the same for every worker count.

use std::collections::VecDeque;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use natr_core::data::{make_batches, Batch, EncodedPair};
use natr_core::model::ModelKind;

/// Environment variable capping the number of batch-preparation threads.
pub const THREADS_ENV: &str = "NATR_THREADS";

/// Worker count from `NATR_THREADS`: unset means one background thread,
/// `0` prepares batches on the training thread.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub max_tokens: usize,
    pub seed: u64,
    pub kind: ModelKind,
}

type EpochResult = Result<Vec<Batch>, String>;

pub struct BatchStream {
    pairs: Arc<Vec<EncodedPair>>,
    plan: BatchPlan,
    workers: Vec<Receiver<EpochResult>>,
    epoch: u64,
    pending: VecDeque<Batch>,
    batch_index: usize,
}

fn build(pairs: &[EncodedPair], plan: BatchPlan, epoch: u64) -> EpochResult {
    make_batches(pairs, plan.max_tokens, plan.seed, epoch, plan.kind).map_err(|e| e.to_string())
}

impl BatchStream {
    pub fn new(pairs: Arc<Vec<EncodedPair>>, plan: BatchPlan, workers: usize) -> Self {
        let receivers = (0..workers)
            .map(|w| {
                let (tx, rx) = sync_channel(1);
                let pairs = Arc::clone(&pairs);
                thread::spawn(move || {
                    let mut epoch = w as u64;
                    while tx.send(build(&pairs, plan, epoch)).is_ok() {
                        epoch += workers as u64;
                    }
                });
                rx
            })
            .collect();
        BatchStream {
            pairs,
            plan,
            workers: receivers,
            epoch: 0,
            pending: VecDeque::new(),
            batch_index: 0,
        }
    }

    /// Epoch and in-epoch index of the batch returned last.
    pub fn position(&self) -> (u64, usize) {
        (
            self.epoch.saturating_sub(1),
            self.batch_index.saturating_sub(1),
        )
    }

    pub fn next_batch(&mut self) -> Result<Batch, String> {
        while self.pending.is_empty() {
            let batches = if self.workers.is_empty() {
                build(&self.pairs, self.plan, self.epoch)?
            } else {
                let n = self.workers.len() as u64;
                self.workers[(self.epoch % n) as usize]
                    .recv()
                    .map_err(|_| "batch worker stopped".to_string())??
            };
            if batches.is_empty() {
                return Err("corpus yields no batches".into());
            }
            self.pending = batches.into();
            self.epoch += 1;
            self.batch_index = 0;
        }
        self.batch_index += 1;
        Ok(self.pending.pop_front().expect("refilled above"))
    }
}
