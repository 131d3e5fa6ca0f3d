use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::partition::{largest_remainder, ClassPool};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.validation <= 0.0 || (self.train + self.validation - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "train/validation fractions must be positive and sum to 1, got {} + {}",
                self.train, self.validation
            )));
        }
        Ok(())
    }
}

/// Row indices (into the base dataset) behind a [`ClientDataBundle`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub local_test: Vec<usize>,
}

impl BundleIndices {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.validation).chain(&self.local_test).copied()
    }
}

/// One client's data.
///
/// `train` and `validation` together form the client's dataset; the local
/// test set is drawn separately with the same class proportions.
#[derive(Debug, Clone)]
pub struct ClientDataBundle {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub local_test: LabeledDataset,
    pub indices: BundleIndices,
    pub opt_in: bool,
    /// Class counts of the client's full partition (train + validation).
    pub class_counts: Vec<usize>,
}

impl ClientDataBundle {
    pub fn local_test_shortfall(&self, requested: usize) -> usize {
        requested.saturating_sub(self.local_test.len())
    }
}

/// Balanced held-out set and the base-dataset rows it uses.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub data: LabeledDataset,
    pub indices: Vec<usize>,
}

/// Splits each client partition into train/validation and draws a local
/// test set of `local_test_size` fresh rows mirroring the partition's
/// class proportions.
///
/// If a class runs short the local test set is smaller than requested; a
/// warning is logged and the shortfall is visible through
/// [`ClientDataBundle::local_test_shortfall`].
pub fn make_bundles(
    dataset: &LabeledDataset,
    pool: &ClassPool,
    partitions: &[Vec<usize>],
    split: SplitFractions,
    local_test_size: usize,
    seed: u64,
) -> Result<Vec<ClientDataBundle>> {
    split.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundles = Vec::with_capacity(partitions.len());
    for (client, rows) in partitions.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::Data(format!(
                "client {client} has {} rows; need at least 2 for a train/validation split",
                rows.len()
            )));
        }
        let n_train = ((rows.len() as f64 * split.train).round() as usize).clamp(1, rows.len() - 1);
        let train = rows[..n_train].to_vec();
        let validation = rows[n_train..].to_vec();

        let mut class_counts = vec![0usize; dataset.num_classes()];
        for &i in rows {
            class_counts[dataset.labels()[i]] += 1;
        }
        let weights: Vec<f64> = class_counts.iter().map(|&c| c as f64).collect();
        let target = largest_remainder(local_test_size, &weights);
        let taken: HashSet<usize> = rows.iter().copied().collect();
        let mut local_test = Vec::with_capacity(local_test_size);
        for (c, &want) in target.iter().enumerate() {
            if want == 0 {
                continue;
            }
            match pool.draw(c, want, &taken, &mut rng) {
                Some(drawn) => local_test.extend(drawn),
                None => {
                    let free: Vec<usize> =
                        pool.class(c).iter().copied().filter(|i| !taken.contains(i)).collect();
                    log::warn!(
                        "client {client}: class {c} has {} fresh rows for a local test share of {want}",
                        free.len()
                    );
                    local_test.extend(free);
                }
            }
        }
        local_test.shuffle(&mut rng);

        bundles.push(ClientDataBundle {
            train: dataset.subset(&train),
            validation: dataset.subset(&validation),
            local_test: dataset.subset(&local_test),
            indices: BundleIndices { train, validation, local_test },
            opt_in: true,
            class_counts,
        });
    }
    Ok(bundles)
}

/// Class-balanced held-out sample that avoids `exclude`.
///
/// `size` is rounded down to a multiple of the class count.
pub fn make_balanced_holdout(
    dataset: &LabeledDataset,
    size: usize,
    exclude: &[usize],
    seed: u64,
) -> Result<HeldOut> {
    let classes = dataset.num_classes();
    let per_class = size / classes;
    if per_class * classes != size {
        log::info!(
            "balanced set size {size} is not a multiple of {classes}; using {}",
            per_class * classes
        );
    }
    if per_class == 0 {
        return Err(Error::Config(format!("balanced set of {size} rows cannot cover {classes} classes")));
    }
    let pool = ClassPool::new(dataset, exclude);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = HashSet::new();
    let mut indices = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        let drawn = pool.draw(c, per_class, &none, &mut rng).ok_or_else(|| {
            Error::Data(format!(
                "class {c} has {} rows, balanced set needs {per_class}",
                pool.class(c).len()
            ))
        })?;
        indices.extend(drawn);
    }
    indices.shuffle(&mut rng);
    Ok(HeldOut { data: dataset.subset(&indices), indices })
}

pub fn make_global_test(dataset: &LabeledDataset, size: usize, seed: u64) -> Result<HeldOut> {
    make_balanced_holdout(dataset, size, &[], seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition::{majority_pair, partition, PartitionScheme, PartitionSpec};
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn setup(p: f64, classes: usize) -> (LabeledDataset, HeldOut, Vec<ClientDataBundle>) {
        let d = gen_synthetic(
            &SyntheticSpec { num_classes: classes, dim: 12, n_total: 10_000, class_separation: 3.0 },
            5,
        )
        .unwrap();
        let held = make_global_test(&d, 1000, 1).unwrap();
        let pool = ClassPool::new(&d, &held.indices);
        let spec = PartitionSpec {
            scheme: PartitionScheme::MajorityFraction { p },
            num_clients: 10,
            samples_per_client: 100,
            seed: 2,
        };
        let parts = partition(&pool, &spec).unwrap();
        let bundles = make_bundles(&d, &pool, &parts, SplitFractions::default(), 500, 3).unwrap();
        (d, held, bundles)
    }

    #[test]
    fn eighty_twenty_split() {
        let (_, _, bundles) = setup(0.5, 10);
        for b in &bundles {
            assert_eq!((b.train.len(), b.validation.len()), (80, 20));
            assert_eq!(b.local_test.len(), 500);
        }
    }

    #[test]
    fn pathological_client_tests_only_its_two_classes() {
        let (_, _, bundles) = setup(1.0, 10);
        for (k, b) in bundles.iter().enumerate() {
            let (a, c) = majority_pair(k, 10);
            assert!(b.local_test.labels().iter().all(|&y| y == a || y == c));
        }
    }

    #[test]
    fn local_test_mirrors_majority_share() {
        let (_, _, bundles) = setup(0.7, 10);
        for (k, b) in bundles.iter().enumerate() {
            let (a, c) = majority_pair(k, 10);
            let counts = b.local_test.class_counts();
            let share = counts[a] + counts[c];
            assert!(share.abs_diff(350) <= 1, "client {k}: {share}");
            for (cls, &n) in counts.iter().enumerate() {
                let expected = 5.0 * b.class_counts[cls] as f64;
                assert!((n as f64 - expected).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_avoid_global_test() {
        let (_, held, bundles) = setup(0.3, 10);
        let global: HashSet<_> = held.indices.iter().copied().collect();
        for b in &bundles {
            let all: Vec<usize> = b.indices.all().collect();
            let unique: HashSet<_> = all.iter().copied().collect();
            assert_eq!(unique.len(), all.len());
            assert!(unique.is_disjoint(&global));
        }
    }

    #[test]
    fn global_test_is_balanced() {
        let (_, held, _) = setup(0.3, 10);
        assert_eq!(held.data.class_counts(), vec![100; 10]);
        let (_, held, _) = setup(0.5, 4);
        assert_eq!(held.data.class_counts(), vec![250; 4]);
    }

    #[test]
    fn global_test_rounds_down_to_class_multiple() {
        let d = gen_synthetic(
            &SyntheticSpec { num_classes: 3, dim: 3, n_total: 3000, class_separation: 1.0 },
            0,
        )
        .unwrap();
        assert_eq!(make_global_test(&d, 1000, 0).unwrap().data.class_counts(), vec![333; 3]);
    }

    #[test]
    fn small_pool_shrinks_local_test() {
        let d = gen_synthetic(
            &SyntheticSpec { num_classes: 4, dim: 4, n_total: 400, class_separation: 1.0 },
            0,
        )
        .unwrap();
        let pool = ClassPool::new(&d, &[]);
        let spec = PartitionSpec {
            scheme: PartitionScheme::MajorityFraction { p: 1.0 },
            num_clients: 1,
            samples_per_client: 100,
            seed: 0,
        };
        let parts = partition(&pool, &spec).unwrap();
        let b = &make_bundles(&d, &pool, &parts, SplitFractions::default(), 500, 0).unwrap()[0];
        // two classes with 100 rows each, 50 of each already used
        assert_eq!(b.local_test.len(), 100);
        assert_eq!(b.local_test_shortfall(500), 400);
    }
}
