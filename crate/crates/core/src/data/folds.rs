use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded `k`-fold partition. Test sets are disjoint, cover every id and
/// differ in size by at most one (earlier folds take the remainder).
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 0 || k > ids.len() {
        return contract("make_folds", format!("cannot split {} videos into {k} folds", ids.len()));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[offset..offset + size].to_vec();
        test.sort();
        let mut train: Vec<String> = order
            .iter()
            .filter(|id| !test.contains(id))
            .cloned()
            .collect();
        train.sort();
        folds.push(Fold { train, test });
        offset += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(crate::data::synthetic::video_id).collect()
    }

    #[test]
    fn eight_videos_four_folds() {
        let folds = make_folds(&ids(8), 4, 0).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 6));
    }

    #[test]
    fn ninety_nine_videos_balance() {
        let folds = make_folds(&ids(99), 4, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![25, 25, 25, 24]);
        let all: HashSet<&String> = folds.iter().flat_map(|f| &f.test).collect();
        assert_eq!(all.len(), 99);
        for f in &folds {
            assert!(f.test.iter().all(|id| !f.train.contains(id)));
            assert_eq!(f.train.len() + f.test.len(), 99);
        }
    }

    #[test]
    fn seeded_and_checked() {
        assert_eq!(make_folds(&ids(20), 4, 9).unwrap(), make_folds(&ids(20), 4, 9).unwrap());
        assert_ne!(make_folds(&ids(20), 4, 9).unwrap(), make_folds(&ids(20), 4, 10).unwrap());
        assert!(make_folds(&ids(3), 4, 0).is_err());
    }
}
