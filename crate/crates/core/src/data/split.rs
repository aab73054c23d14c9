use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelRng;

/// Seeded shuffle, then the first `floor(ratio * N)` records go to train and
/// the rest to test.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = dataset.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ModelRng::seed_from_u64(seed));
    // the nudge keeps products like 0.57 * 100 from flooring one short
    let n_train = ((ratio * n as f64) * (1.0 + 1e-12)).floor().min(n as f64) as usize;
    Ok((
        dataset.subset(&order[..n_train]),
        dataset.subset(&order[n_train..]),
    ))
}
