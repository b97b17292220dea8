//! Learning-rate schedule, early stopping and cross-validation folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Linear warmup to `base` over `warmup` epochs, then cosine annealing to
/// zero over the remaining `epochs − warmup`.
pub fn lr_at(epoch: usize, base: f64, warmup: usize, epochs: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let t = (epoch - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Tracks the best validation score and how long ago it was reached.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: patience.max(1),
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record one epoch's score. Returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// Whether training stops after the last entry of `history`: the best score
/// has not improved for `patience` consecutive epochs.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut es = EarlyStopping::new(patience);
    for (e, &s) in history.iter().enumerate() {
        es.observe(e, s);
    }
    es.should_stop()
}

/// Shuffle `0..n` with `seed` and hold out the `fold`-th of `k` contiguous
/// blocks. Block sizes differ by at most one; earlier blocks are larger.
pub fn cv_split(n: usize, fold: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} subjects into {k} folds")));
    }
    if fold >= k {
        return Err(Error::Config(format!("fold {fold} out of range for {k} folds")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let start = fold * base + fold.min(extra);
    let len = base + (fold < extra) as usize;
    let val = ids[start..start + len].to_vec();
    let train = ids[..start].iter().chain(&ids[start + len..]).copied().collect();
    Ok((train, val))
}
