use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub split_seed: u64,
}

/// Shuffles with `seed` and cuts into train/val/test. Train and validation
/// sizes are rounded to the nearest integer; test takes the remainder.
pub fn split_dataset(data: &[Trajectory], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        split_seed: seed,
    })
}
