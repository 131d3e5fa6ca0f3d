use fedmix::data::partition::{largest_remainder, majority_pair};
use fedmix::data::{
    gen_synthetic, make_global_test, partition, ClassPool, DirichletAxis, LabeledDataset, PartitionScheme,
    PartitionSpec, SyntheticSpec,
};
use proptest::prelude::*;

fn base(seed: u64) -> (LabeledDataset, ClassPool) {
    let d = gen_synthetic(
        &SyntheticSpec { num_classes: 10, dim: 16, n_total: 10_000, class_separation: 3.0 },
        seed,
    )
    .unwrap();
    let held = make_global_test(&d, 1000, seed).unwrap();
    let pool = ClassPool::new(&d, &held.indices);
    (d, pool)
}

fn shares(d: &LabeledDataset, rows: &[usize]) -> Vec<f64> {
    let mut counts = vec![0.0; d.num_classes()];
    for &i in rows {
        counts[d.labels()[i]] += 1.0;
    }
    counts.iter().map(|c| c / rows.len() as f64).collect()
}

fn dirichlet(alpha: f64, axis: DirichletAxis, seed: u64) -> (LabeledDataset, Vec<Vec<usize>>) {
    let (d, pool) = base(seed);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Dirichlet { alpha, axis },
        num_clients: 10,
        samples_per_client: 100,
        seed,
    };
    let parts = partition(&pool, &spec).unwrap();
    (d, parts)
}

#[test]
fn large_alpha_is_near_uniform() {
    for axis in [DirichletAxis::PerClass, DirichletAxis::PerClient] {
        for seed in 0..4 {
            let (d, parts) = dirichlet(100.0, axis, seed);
            for rows in &parts {
                assert_eq!(rows.len(), 100);
                for s in shares(&d, rows) {
                    assert!((s - 0.1).abs() <= 0.05, "{axis:?} seed {seed}: share {s}");
                }
            }
        }
    }
}

#[test]
fn vanishing_alpha_gives_single_class_clients() {
    for seed in 0..4 {
        let (d, parts) = dirichlet(1e-3, DirichletAxis::PerClient, seed);
        let mut dominant: Vec<f64> = parts
            .iter()
            .map(|rows| shares(&d, rows).into_iter().fold(0.0, f64::max))
            .collect();
        dominant.sort_by(f64::total_cmp);
        let median = (dominant[4] + dominant[5]) / 2.0;
        assert!(median >= 0.9, "seed {seed}: dominant shares {dominant:?}");
    }
}

#[test]
fn per_class_allocation_conserves_class_totals() {
    // with one client every class goes to it in full before resampling
    let (d, pool) = base(3);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Dirichlet { alpha: 0.5, axis: DirichletAxis::PerClass },
        num_clients: 1,
        samples_per_client: 900,
        seed: 3,
    };
    let rows = &partition(&pool, &spec).unwrap()[0];
    let s = shares(&d, rows);
    for share in s {
        assert!((share - 0.1).abs() < 1e-12);
    }
}

#[test]
fn majority_count_is_exact() {
    let (d, pool) = base(1);
    for p in [0.2, 0.3, 0.5, 0.7, 0.8, 1.0] {
        let spec = PartitionSpec {
            scheme: PartitionScheme::MajorityFraction { p },
            num_clients: 100,
            samples_per_client: 100,
            seed: 9,
        };
        for (k, rows) in partition(&pool, &spec).unwrap().iter().enumerate() {
            let (a, b) = majority_pair(k, 10);
            let n = rows.iter().filter(|&&i| d.labels()[i] == a || d.labels()[i] == b).count();
            assert_eq!(n, (p * 100.0_f64).round() as usize);
        }
    }
}

proptest! {
    #[test]
    fn largest_remainder_preserves_total(
        total in 0usize..5000,
        weights in prop::collection::vec(0.0f64..1.0, 1..40),
    ) {
        let counts = largest_remainder(total, &weights);
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 {
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, w) in counts.iter().zip(&weights) {
                let exact = w / sum * total as f64;
                prop_assert!((*c as f64 - exact).abs() < 1.0 + 1e-9);
            }
        }
    }
}
