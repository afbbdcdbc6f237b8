//! Three-fold cross-validation splits.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const FOLDS: usize = 3;

/// One seeded shuffle, then three contiguous test blocks; block `k` is the
/// test set of fold `k` and the remaining ids (in shuffled order) train it.
/// Remainders go to the lowest folds, so 10 ids give test sizes 4/3/3.
pub fn split_folds(ids: &[String], seed: u64) -> Result<Vec<FoldSplit>> {
    if ids.len() < FOLDS {
        return Err(Error::Data(format!(
            "need at least {FOLDS} samples for {FOLDS}-fold splits, got {}",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(seed, "folds", 0));

    let (base, extra) = (order.len() / FOLDS, order.len() % FOLDS);
    let mut bounds = Vec::with_capacity(FOLDS);
    let mut start = 0;
    for k in 0..FOLDS {
        let len = base + usize::from(k < extra);
        bounds.push((start, start + len));
        start += len;
    }
    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(k, (a, b))| FoldSplit {
            fold_index: k,
            test: order[a..b].to_vec(),
            train: order[..a].iter().chain(&order[b..]).cloned().collect(),
        })
        .collect())
}

/// Lines of `fold,<k>,<train|test>,<id>`.
pub fn fold_manifest(folds: &[FoldSplit]) -> String {
    let mut s = String::new();
    for f in folds {
        for id in &f.train {
            let _ = writeln!(s, "fold,{},train,{id}", f.fold_index);
        }
        for id in &f.test {
            let _ = writeln!(s, "fold,{},test,{id}", f.fold_index);
        }
    }
    s
}

pub fn write_fold_manifest(path: &Path, folds: &[FoldSplit]) -> Result<()> {
    std::fs::write(path, fold_manifest(folds)).map_err(|e| Error::io(path, e))
}

pub fn parse_fold_manifest(text: &str) -> std::result::Result<Vec<FoldSplit>, String> {
    let mut folds: Vec<FoldSplit> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || format!("line {}: expected fold,<k>,<train|test>,<id>", no + 1);
        if parts.len() != 4 || parts[0] != "fold" {
            return Err(bad());
        }
        let k: usize = parts[1].parse().map_err(|_| bad())?;
        while folds.len() <= k {
            folds.push(FoldSplit {
                fold_index: folds.len(),
                train: Vec::new(),
                test: Vec::new(),
            });
        }
        match parts[2] {
            "train" => folds[k].train.push(parts[3].to_string()),
            "test" => folds[k].test.push(parts[3].to_string()),
            _ => return Err(bad()),
        }
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn nine_samples_split_six_three() {
        let folds = split_folds(&ids(9), 1).unwrap();
        let mut seen: Vec<String> = Vec::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.test.len()), (6, 3));
            assert!(f.test.iter().all(|t| !f.train.contains(t)));
            seen.extend(f.test.iter().cloned());
        }
        seen.sort();
        let mut all = ids(9);
        all.sort();
        assert_eq!(seen, all);
        assert_eq!(folds, split_folds(&ids(9), 1).unwrap());
    }

    #[test]
    fn remainder_goes_to_fold_zero() {
        let folds = split_folds(&ids(10), 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn too_few_samples() {
        assert!(split_folds(&ids(2), 0).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let folds = split_folds(&ids(7), 5).unwrap();
        let text = fold_manifest(&folds);
        assert!(text.lines().all(|l| l.starts_with("fold,")));
        assert_eq!(parse_fold_manifest(&text).unwrap(), folds);
    }
}
