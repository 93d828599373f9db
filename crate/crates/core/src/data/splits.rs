//! Train/test split and k-fold assignment. Both are seeded, persisted in the
//! manifest, and reproducible from (ids, seed) alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::Region;

/// Train proportion of the reference split, 1341 of 1538 recordings.
pub const REFERENCE_TRAIN_FRACTION: f64 = 1341.0 / 1538.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub stratified: bool,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    /// Validation memberships; fold i trains on every other fold's ids.
    pub val: Vec<Vec<String>>,
}

impl FoldSpec {
    /// (train ids, validation ids) for fold `i`.
    pub fn fold(&self, i: usize) -> (Vec<String>, Vec<String>) {
        let val = self.val[i].clone();
        let train = self
            .val
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        (train, val)
    }
}

fn train_count(n: usize) -> usize {
    (n as f64 * REFERENCE_TRAIN_FRACTION).round() as usize
}

/// Seeded shuffle split at the reference train proportion. `stratified`
/// applies the proportion per region (largest remainder reconciles
/// rounding), otherwise membership is a plain shuffle.
pub fn split_dataset(
    items: &[(String, Region)],
    seed: u64,
    stratified: bool,
) -> Result<SplitSpec> {
    if items.is_empty() {
        return Err(Error::validation("cannot split an empty dataset"));
    }
    if items.len() < 10 {
        return Err(Error::validation(format!(
            "dataset of {} recordings is too small to split (need 10)",
            items.len()
        )));
    }
    let total_train = train_count(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (train, test) = if stratified {
        let mut groups: Vec<(Region, Vec<&str>)> = Vec::new();
        for (id, region) in items {
            match groups.iter_mut().find(|(r, _)| r == region) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((*region, vec![id])),
            }
        }
        // floor per group, then hand out remainders to the largest fractions
        let mut quota: Vec<usize> = Vec::with_capacity(groups.len());
        let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(groups.len());
        for (gi, (_, ids)) in groups.iter().enumerate() {
            let exact = ids.len() as f64 * REFERENCE_TRAIN_FRACTION;
            quota.push(exact.floor() as usize);
            fracs.push((gi, exact - exact.floor()));
        }
        let mut short = total_train - quota.iter().sum::<usize>();
        fracs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (gi, _) in fracs {
            if short == 0 {
                break;
            }
            quota[gi] += 1;
            short -= 1;
        }
        let mut train = Vec::with_capacity(total_train);
        let mut test = Vec::new();
        for ((_, ids), q) in groups.iter_mut().zip(quota) {
            ids.shuffle(&mut rng);
            for (i, id) in ids.iter().enumerate() {
                if i < q {
                    train.push(id.to_string());
                } else {
                    test.push(id.to_string());
                }
            }
        }
        (train, test)
    } else {
        let mut ids: Vec<&str> = items.iter().map(|(id, _)| id.as_str()).collect();
        ids.shuffle(&mut rng);
        let test = ids.split_off(total_train);
        (
            ids.into_iter().map(String::from).collect(),
            test.into_iter().map(String::from).collect(),
        )
    };

    Ok(SplitSpec { seed, stratified, train, test })
}

/// Seeded k-fold assignment: k disjoint validation folds covering `ids`
/// exactly once, sizes differing by at most one.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<FoldSpec> {
    if k == 0 {
        return Err(Error::validation("k-fold needs k >= 1"));
    }
    if k > ids.len() {
        return Err(Error::validation(format!(
            "cannot make {k} folds from {} recordings",
            ids.len()
        )));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut val = Vec::with_capacity(k);
    let mut off = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        val.push(shuffled[off..off + len].to_vec());
        off += len;
    }
    Ok(FoldSpec { k, seed, val })
}
