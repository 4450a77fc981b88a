use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patient-level k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation_ids(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every case outside `fold`, in fold order.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || case_ids.len() < k {
        return Err(Error::TooFewCases {
            cases: case_ids.len(),
            k,
        });
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds, seed })
}
