use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Splits by whole query groups: `floor(n * train_fraction)` queries go to
/// train (clamped so both sides are non-empty), the rest to test. Both halves
/// keep the full document collection.
pub fn split_train_test(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.queries().len();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 queries to split, have {n}"
        )));
    }
    let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);

    let mut ids: Vec<&str> = dataset.queries().iter().map(|q| q.id.as_str()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_ids: HashSet<&str> = ids[..n_train].iter().copied().collect();
    let test_ids: HashSet<&str> = ids[n_train..].iter().copied().collect();

    Ok((dataset.restrict_to(&train_ids)?, dataset.restrict_to(&test_ids)?))
}
