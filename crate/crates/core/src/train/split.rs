use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hold out `frac` of the scans (rounded, at least one when there are two or
/// more scans). Returns item indices `(kept, held_out)`; all nodules of a
/// scan land on the same side.
pub fn scan_level_split(scan_ids: &[String], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if scan_ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::InvalidArgument(format!("split fraction {frac}")));
    }
    let mut scans: Vec<&String> = scan_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    scans.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_held = (frac * scans.len() as f64).round() as usize;
    if frac > 0.0 && scans.len() >= 2 {
        n_held = n_held.clamp(1, scans.len() - 1);
    }
    let held: BTreeSet<&String> = scans[..n_held].iter().copied().collect();
    let (mut keep, mut out) = (Vec::new(), Vec::new());
    for (i, s) in scan_ids.iter().enumerate() {
        if held.contains(s) {
            out.push(i);
        } else {
            keep.push(i);
        }
    }
    Ok((keep, out))
}

/// `k` folds with every label spread round-robin after a seeded shuffle.
pub fn stratified_kfold<L: Ord + Clone>(labels: &[L], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(Error::InvalidArgument(format!("{k} folds for {} items", labels.len())));
    }
    let mut by_label: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(l.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_split_is_disjoint_and_grouped() {
        let scans: Vec<String> = (0..30).map(|i| format!("s{}", i / 2)).collect();
        let (keep, held) = scan_level_split(&scans, 0.2, 4).unwrap();
        assert_eq!(keep.len() + held.len(), 30);
        let held_scans: BTreeSet<&String> = held.iter().map(|&i| &scans[i]).collect();
        assert_eq!(held_scans.len(), 3);
        assert!(keep.iter().all(|&i| !held_scans.contains(&scans[i])));
        assert_eq!(scan_level_split(&scans, 0.2, 4).unwrap(), (keep, held));
    }

    #[test]
    fn kfold_partitions_and_balances() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 5 == 0) as u8).collect();
        let folds = stratified_kfold(&labels, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.len(), 10);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
        assert!(stratified_kfold(&labels, 1, 1).is_err());
    }
}
