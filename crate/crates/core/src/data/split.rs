//! Deterministic class-balanced semi-supervised splits.
//!
//! The validation carve-out (10%, stratified by class) happens before the
//! labeled/unlabeled partition, so the label fraction is relative to the
//! remaining training pool. Per-class labeled counts are the floor or
//! ceiling of `fraction × class_pool_size` and differ by at most one
//! across classes.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// Fraction of each class carved out for validation when the dataset has
/// no official validation set.
pub const VAL_FRACTION: f64 = 0.1;

/// Class-balanced partition into labeled, unlabeled, and validation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSLSplit {
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub label_fraction: f64,
    pub seed: u64,
}

impl SSLSplit {
    /// Training pool = labeled ∪ unlabeled, in index order.
    pub fn pool_indices(&self) -> Vec<usize> {
        let mut pool: Vec<usize> = self
            .labeled_indices
            .iter()
            .chain(&self.unlabeled_indices)
            .copied()
            .collect();
        pool.sort_unstable();
        pool
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.labeled_indices.binary_search(&index).is_ok()
    }

    /// SHA-256 over the three sorted index sets plus seed and fraction.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.label_fraction.to_le_bytes());
        for set in [
            &self.labeled_indices,
            &self.unlabeled_indices,
            &self.val_indices,
        ] {
            h.update((set.len() as u64).to_le_bytes());
            for &i in set.iter() {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Check the pairwise-disjoint and exact-cover invariants against a
    /// dataset size.
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        let mut seen = HashSet::with_capacity(dataset_size);
        for &i in self
            .labeled_indices
            .iter()
            .chain(&self.unlabeled_indices)
            .chain(&self.val_indices)
        {
            if i >= dataset_size {
                return Err(Error::IndexOutOfRange(i));
            }
            if !seen.insert(i) {
                return Err(Error::invalid(format!("index {i} appears in two sets")));
            }
        }
        if seen.len() != dataset_size {
            return Err(Error::invalid(format!(
                "split covers {} of {dataset_size} indices",
                seen.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a class-balanced SSL split.
///
/// Within each class: a 10% validation slice is carved out first, then
/// `label_fraction` of the remaining pool is labeled. Labeled counts per
/// class are floor(fraction × pool_size / classes) with the remainder
/// distributed one each to a seeded random subset of classes. Fails if
/// any class would end up with zero labeled examples.
pub fn make_ssl_split(
    dataset_size: usize,
    num_classes: usize,
    labels: &[usize],
    label_fraction: f64,
    seed: u64,
) -> Result<SSLSplit> {
    if labels.len() != dataset_size {
        return Err(Error::shape(
            format!("{dataset_size} labels"),
            format!("{}", labels.len()),
        ));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::config(format!(
            "label_fraction must be in (0, 1], got {label_fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::ClassOutOfRange {
                id: y,
                num_classes,
            });
        }
        per_class[y].push(i);
    }
    if per_class.iter().any(|c| c.is_empty()) {
        return Err(Error::config("every class needs at least one example"));
    }

    let mut rng = derive_rng(seed, &[tag::SPLIT]);
    let mut val = Vec::new();
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(num_classes);
    for class_indices in &mut per_class {
        class_indices.shuffle(&mut rng);
        let n_val = ((class_indices.len() as f64) * VAL_FRACTION).round() as usize;
        let n_val = n_val.min(class_indices.len().saturating_sub(1));
        val.extend_from_slice(&class_indices[..n_val]);
        pools.push(class_indices[n_val..].to_vec());
    }

    let pool_total: usize = pools.iter().map(Vec::len).sum();
    let labeled_total = ((pool_total as f64) * label_fraction).round() as usize;
    let base = labeled_total / num_classes;
    let remainder = labeled_total % num_classes;
    // The classes receiving one extra labeled example are a seeded choice.
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng);
    let extra: HashSet<usize> = class_order[..remainder].iter().copied().collect();

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        let want = base + usize::from(extra.contains(&c));
        if want == 0 {
            return Err(Error::config(format!(
                "label_fraction {label_fraction} leaves class {c} without labeled examples"
            )));
        }
        if want > pool.len() {
            return Err(Error::config(format!(
                "class {c} pool of {} cannot supply {want} labeled examples",
                pool.len()
            )));
        }
        labeled.extend_from_slice(&pool[..want]);
        unlabeled.extend_from_slice(&pool[want..]);
    }

    labeled.sort_unstable();
    unlabeled.sort_unstable();
    val.sort_unstable();
    let split = SSLSplit {
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
        val_indices: val,
        label_fraction,
        seed,
    };
    split.validate(dataset_size)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(per_class: usize, classes: usize) -> Vec<usize> {
        (0..per_class * classes).map(|i| i % classes).collect()
    }

    fn labeled_counts(split: &SSLSplit, labels: &[usize], classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &i in &split.labeled_indices {
            counts[labels[i]] += 1;
        }
        counts
    }

    #[test]
    fn one_percent_of_45k_pool_is_45_per_class() {
        // 50k with 10% val carve → 45k pool; 1% → 450 labeled
        let labels = balanced_labels(5000, 10);
        let split = make_ssl_split(50_000, 10, &labels, 0.01, 7).unwrap();
        let counts = labeled_counts(&split, &labels, 10);
        assert_eq!(counts, vec![45; 10]);
        assert_eq!(split.unlabeled_indices.len(), 45_000 - 450);
        assert_eq!(split.val_indices.len(), 5_000);
    }

    #[test]
    fn fraction_one_empties_unlabeled() {
        let labels = balanced_labels(30, 5);
        let split = make_ssl_split(150, 5, &labels, 1.0, 1).unwrap();
        assert!(split.unlabeled_indices.is_empty());
        assert_eq!(split.labeled_indices.len(), 150 - split.val_indices.len());
    }

    #[test]
    fn tiny_fraction_allocates_floor_or_ceil() {
        // 45k pool, fraction 0.001 → 45 labeled total → 4 or 5 per class.
        // Enumerate the allocation rule independently: 45/10 = 4 rem 5.
        let labels = balanced_labels(5000, 10);
        let split = make_ssl_split(50_000, 10, &labels, 0.001, 3).unwrap();
        let counts = labeled_counts(&split, &labels, 10);
        assert_eq!(counts.iter().sum::<usize>(), 45);
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        assert_eq!(counts.iter().filter(|&&c| c == 5).count(), 5);
    }

    #[test]
    fn determinism_and_distinct_seeds() {
        let labels = balanced_labels(100, 4);
        let a = make_ssl_split(400, 4, &labels, 0.1, 11).unwrap();
        let b = make_ssl_split(400, 4, &labels, 0.1, 11).unwrap();
        let c = make_ssl_split(400, 4, &labels, 0.1, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labeled_indices, c.labeled_indices);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn zero_labeled_class_rejected() {
        let labels = balanced_labels(5000, 10);
        // 45k pool × 0.0001 → ~4 labeled for 10 classes → reject
        assert!(make_ssl_split(50_000, 10, &labels, 0.0001, 3).is_err());
    }

    #[test]
    fn invalid_fraction_rejected() {
        let labels = balanced_labels(10, 2);
        assert!(make_ssl_split(20, 2, &labels, 0.0, 1).is_err());
        assert!(make_ssl_split(20, 2, &labels, 1.5, 1).is_err());
    }

    #[test]
    fn unknown_class_rejected() {
        let labels = vec![0, 1, 7];
        assert!(make_ssl_split(3, 2, &labels, 0.5, 1).is_err());
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let labels = balanced_labels(50, 5);
        let split = make_ssl_split(250, 5, &labels, 0.2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        split.save(&p1).unwrap();
        let back = SSLSplit::load(&p1).unwrap();
        assert_eq!(split, back);
        back.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "serialization must be byte-stable"
        );
    }
}
