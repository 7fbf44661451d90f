//! Circular cross-validation folds over a (optionally permuted) id list.
//!
//! Fold `k` (1-based) tests positions `(k-1)T ..= kT-1`; the next `F`
//! positions, wrapping modulo `N`, are fully annotated and the rest weakly
//! annotated.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub test_ids: Vec<u32>,
    pub fa_ids: Vec<u32>,
    pub wa_ids: Vec<u32>,
}

impl FoldPlan {
    pub fn role_of(&self, id: u32) -> Option<super::Role> {
        if self.fa_ids.binary_search(&id).is_ok() {
            Some(super::Role::Fa)
        } else if self.wa_ids.binary_search(&id).is_ok() {
            Some(super::Role::Wa)
        } else {
            None
        }
    }

    pub fn is_test(&self, id: u32) -> bool {
        self.test_ids.binary_search(&id).is_ok()
    }
}

/// The id order folds are cut from: identity without a seed, otherwise a
/// seeded shuffle.
pub fn fold_order(n: usize, permutation_seed: Option<u64>) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    if let Some(s) = permutation_seed {
        ids.shuffle(&mut seed::rng(seed::derive(s, seed::FOLDS)));
    }
    ids
}

pub fn plan_folds(
    n: usize,
    t: usize,
    f: usize,
    num_folds: usize,
    permutation_seed: Option<u64>,
) -> Result<Vec<FoldPlan>> {
    if n == 0 || t == 0 || num_folds == 0 {
        return Err(Error::config("N, T and the fold count must be positive"));
    }
    if num_folds.checked_mul(t).map_or(true, |x| x > n) {
        return Err(Error::config(format!(
            "{num_folds} folds of {t} test cases exceed {n} cases"
        )));
    }
    if f > n - t {
        return Err(Error::config(format!("F = {f} exceeds the {} non-test cases", n - t)));
    }
    let order = fold_order(n, permutation_seed);
    let pick = |positions: &mut dyn Iterator<Item = usize>| {
        let mut v: Vec<u32> = positions.map(|p| order[p % n]).collect();
        v.sort_unstable();
        v
    };
    Ok((1..=num_folds)
        .map(|k| {
            let start = (k - 1) * t;
            FoldPlan {
                fold_id: k,
                test_ids: pick(&mut (start..start + t)),
                fa_ids: pick(&mut (start + t..start + t + f)),
                wa_ids: pick(&mut (start + t + f..start + n)),
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct FoldFile {
    folds: Vec<FoldPlan>,
}

pub fn folds_to_json(folds: &[FoldPlan]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&FoldFile { folds: folds.to_vec() })?;
    s.push('\n');
    Ok(s)
}

pub fn save_folds(path: &Path, folds: &[FoldPlan]) -> Result<()> {
    std::fs::write(path, folds_to_json(folds)?).map_err(|e| Error::io(path, e))
}

pub fn load_folds(path: &Path) -> Result<Vec<FoldPlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<FoldFile>(&text)?.folds)
}
