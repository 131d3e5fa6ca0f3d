//! Label-skewed client partitions.
//!
//! Both partitioners return, for every client, a shuffled list of row
//! indices into the base dataset. Rows listed in `exclude` (the global
//! test set) are never handed out. Within a client no index repeats;
//! across clients the same row may be reused.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Two majority classes hold a combined fraction `p` of each client.
    MajorityFraction { p: f64 },
    /// Dirichlet(`alpha`) label skew; see [`DirichletAxis`].
    Dirichlet {
        alpha: f64,
        #[serde(default)]
        axis: DirichletAxis,
    },
}

/// Which way the Dirichlet proportions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirichletAxis {
    /// Each client draws a proportion vector over classes and takes that
    /// many rows of each class. As `alpha -> 0` every client holds a
    /// single class.
    PerClient,
    /// Each class draws a proportion vector over clients and its rows are
    /// dealt out accordingly; client totals are then resampled to the
    /// target size with their class mix preserved.
    #[default]
    PerClass,
}

impl PartitionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionScheme::MajorityFraction { .. } => "majority",
            PartitionScheme::Dirichlet { .. } => "dirichlet",
        }
    }

    /// The skew parameter, `p` or `alpha`.
    pub fn value(&self) -> f64 {
        match *self {
            PartitionScheme::MajorityFraction { p } => p,
            PartitionScheme::Dirichlet { alpha, .. } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.samples_per_client == 0 {
            return Err(Error::Config("partition needs at least one client and one sample".into()));
        }
        match self.scheme {
            PartitionScheme::MajorityFraction { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("majority fraction p={p} outside [0, 1]")))
            }
            PartitionScheme::Dirichlet { alpha, .. } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::Config(format!("dirichlet alpha={alpha} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

/// Row indices of each class that are available to clients.
#[derive(Debug, Clone)]
pub struct ClassPool {
    by_class: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn new(dataset: &LabeledDataset, exclude: &[usize]) -> Self {
        let excluded: HashSet<usize> = exclude.iter().copied().collect();
        let mut by_class = dataset.indices_by_class();
        for rows in &mut by_class {
            rows.retain(|i| !excluded.contains(i));
        }
        Self { by_class }
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    /// Draws `count` rows of class `c` that are not in `taken`, without
    /// replacement.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        c: usize,
        count: usize,
        taken: &HashSet<usize>,
        rng: &mut R,
    ) -> Option<Vec<usize>> {
        let free: Vec<usize> = self.by_class[c].iter().copied().filter(|i| !taken.contains(i)).collect();
        if free.len() < count {
            return None;
        }
        Some(free.choose_multiple(rng, count).copied().collect())
    }
}

/// Splits `total` into integers proportional to `weights`, handing the
/// leftover units to the largest fractional parts (ties to lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// The two majority classes of client `client`.
pub fn majority_pair(client: usize, num_classes: usize) -> (usize, usize) {
    ((2 * client) % num_classes, (2 * client + 1) % num_classes)
}

pub fn partition(pool: &ClassPool, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    match spec.scheme {
        PartitionScheme::MajorityFraction { p } => partition_majority(pool, spec, p),
        PartitionScheme::Dirichlet { alpha, axis: DirichletAxis::PerClient } => {
            partition_dirichlet_per_client(pool, spec, alpha)
        }
        PartitionScheme::Dirichlet { alpha, axis: DirichletAxis::PerClass } => {
            partition_dirichlet(pool, spec, alpha)
        }
    }
}

fn exhausted(c: usize, wanted: usize, pool: &ClassPool) -> Error {
    Error::Data(format!(
        "class {c} pool exhausted: need {wanted} rows, {} available; use a larger base dataset",
        pool.class(c).len()
    ))
}

pub fn partition_majority(pool: &ClassPool, spec: &PartitionSpec, p: f64) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let classes = pool.num_classes();
    let n = spec.samples_per_client;
    let majority = (p * n as f64).round() as usize;
    let minority = n - majority;
    if classes < 2 || (minority > 0 && classes < 3) {
        return Err(Error::Config(format!(
            "majority-fraction partition with p={p} needs more than {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clients = Vec::with_capacity(spec.num_clients);
    for client in 0..spec.num_clients {
        let (a, b) = majority_pair(client, classes);
        let mut counts = vec![0usize; classes];
        counts[a] += majority.div_ceil(2);
        counts[b] += majority / 2;
        let others: Vec<usize> = (0..classes).filter(|&c| c != a && c != b).collect();
        for _ in 0..minority {
            counts[others[rng.random_range(0..others.len())]] += 1;
        }
        let none = HashSet::new();
        let mut rows = Vec::with_capacity(n);
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                rows.extend(pool.draw(c, k, &none, &mut rng).ok_or_else(|| exhausted(c, k, pool))?);
            }
        }
        rows.shuffle(&mut rng);
        clients.push(rows);
    }
    Ok(clients)
}

/// Dirichlet sample computed in log space so that tiny concentrations do
/// not underflow every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    // G(a) = G(a + 1) * U^(1/a)
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Per-client Dirichlet draw over classes, rounded by largest remainder.
pub fn partition_dirichlet_per_client(
    pool: &ClassPool,
    spec: &PartitionSpec,
    alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let classes = pool.num_classes();
    let n = spec.samples_per_client;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let none = HashSet::new();
    let mut clients = Vec::with_capacity(spec.num_clients);
    for _ in 0..spec.num_clients {
        let q = sample_dirichlet(alpha, classes, &mut rng);
        let counts = largest_remainder(n, &q);
        let mut rows = Vec::with_capacity(n);
        for (c, &k) in counts.iter().enumerate() {
            if k > 0 {
                rows.extend(pool.draw(c, k, &none, &mut rng).ok_or_else(|| exhausted(c, k, pool))?);
            }
        }
        rows.shuffle(&mut rng);
        clients.push(rows);
    }
    Ok(clients)
}

/// Per-class Dirichlet draw over clients; see [`DirichletAxis::PerClass`].
pub fn partition_dirichlet(
    pool: &ClassPool,
    spec: &PartitionSpec,
    alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let classes = pool.num_classes();
    let k = spec.num_clients;
    let n = spec.samples_per_client;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // proportions[c][j]: share of class c assigned to client j
    let mut proportions = Vec::with_capacity(classes);
    let mut allocated: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); classes]; k];
    for c in 0..classes {
        let q = sample_dirichlet(alpha, k, &mut rng);
        let mut rows = pool.class(c).to_vec();
        rows.shuffle(&mut rng);
        let counts = largest_remainder(rows.len(), &q);
        let mut offset = 0;
        for (j, &count) in counts.iter().enumerate() {
            allocated[j][c] = rows[offset..offset + count].to_vec();
            offset += count;
        }
        proportions.push(q);
    }

    let mut clients = Vec::with_capacity(k);
    for (j, own) in allocated.into_iter().enumerate() {
        let total: usize = own.iter().map(Vec::len).sum();
        let weights: Vec<f64> = if total > 0 {
            own.iter().map(|r| r.len() as f64).collect()
        } else {
            proportions.iter().map(|q| q[j]).collect()
        };
        let target = largest_remainder(n, &weights);
        if total < n {
            log::info!("dirichlet: padding client {j} from {total} to {n} rows");
        }
        let taken: HashSet<usize> = own.iter().flatten().copied().collect();
        let mut rows = Vec::with_capacity(n);
        for (c, mut mine) in own.into_iter().enumerate() {
            let want = target[c];
            if want <= mine.len() {
                mine.shuffle(&mut rng);
                mine.truncate(want);
                rows.extend(mine);
            } else {
                let extra = want - mine.len();
                rows.extend(mine);
                rows.extend(
                    pool.draw(c, extra, &taken, &mut rng).ok_or_else(|| exhausted(c, want, pool))?,
                );
            }
        }
        rows.shuffle(&mut rng);
        clients.push(rows);
    }
    Ok(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn base() -> LabeledDataset {
        let spec = SyntheticSpec { num_classes: 10, dim: 10, n_total: 5000, class_separation: 3.0 };
        gen_synthetic(&spec, 0).unwrap()
    }

    fn class_counts(d: &LabeledDataset, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; d.num_classes()];
        for &i in rows {
            counts[d.labels()[i]] += 1;
        }
        counts
    }

    fn majority(p: f64, clients: usize) -> (LabeledDataset, Vec<Vec<usize>>) {
        let d = base();
        let spec = PartitionSpec {
            scheme: PartitionScheme::MajorityFraction { p },
            num_clients: clients,
            samples_per_client: 100,
            seed: 42,
        };
        let parts = partition(&ClassPool::new(&d, &[]), &spec).unwrap();
        (d, parts)
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(5, &[0.0, 0.0]), vec![0, 0]);
        assert_eq!(largest_remainder(100, &[0.333, 0.333, 0.334]).iter().sum::<usize>(), 100);
    }

    #[test]
    fn majority_counts_for_reference_fractions() {
        for (p, a, b) in [(0.2, 10, 10), (0.7, 35, 35), (1.0, 50, 50)] {
            let (d, parts) = majority(p, 12);
            for (client, rows) in parts.iter().enumerate() {
                assert_eq!(rows.len(), 100);
                let counts = class_counts(&d, rows);
                let (ca, cb) = majority_pair(client, 10);
                assert_eq!((counts[ca], counts[cb]), (a, b), "p={p} client={client}");
                if p == 1.0 {
                    assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 2);
                }
            }
        }
    }

    #[test]
    fn iid_majority_fraction_is_near_uniform_on_average() {
        let (d, parts) = majority(0.2, 100);
        let mut totals = vec![0usize; 10];
        for rows in &parts {
            for (t, c) in totals.iter_mut().zip(class_counts(&d, rows)) {
                *t += c;
            }
        }
        // 100 clients x 10 expected per class
        for t in totals {
            assert!((900..=1100).contains(&t), "{t}");
        }
    }

    #[test]
    fn no_duplicates_within_a_client() {
        for p in [0.2, 1.0] {
            let (_, parts) = majority(p, 20);
            for rows in parts {
                let set: HashSet<_> = rows.iter().collect();
                assert_eq!(set.len(), rows.len());
            }
        }
    }

    #[test]
    fn seeds_change_partitions() {
        let d = base();
        let pool = ClassPool::new(&d, &[]);
        let mut spec = PartitionSpec {
            scheme: PartitionScheme::Dirichlet { alpha: 0.5, axis: DirichletAxis::PerClass },
            num_clients: 5,
            samples_per_client: 50,
            seed: 1,
        };
        let a = partition(&pool, &spec).unwrap();
        assert_eq!(a, partition(&pool, &spec).unwrap());
        spec.seed = 2;
        assert_ne!(a, partition(&pool, &spec).unwrap());
    }

    #[test]
    fn exhausted_pool_is_a_data_error() {
        let spec = SyntheticSpec { num_classes: 4, dim: 4, n_total: 40, class_separation: 1.0 };
        let d = gen_synthetic(&spec, 0).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::MajorityFraction { p: 1.0 },
            num_clients: 1,
            samples_per_client: 100,
            seed: 0,
        };
        let err = partition(&ClassPool::new(&d, &[]), &spec).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("larger base dataset")), "{err}");
    }

    #[test]
    fn dirichlet_samples_live_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for alpha in [0.01, 0.05, 1.0, 100.0] {
            let q = sample_dirichlet(alpha, 10, &mut rng);
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn excluded_rows_are_never_assigned() {
        let d = base();
        let exclude: Vec<usize> = (0..5000).step_by(3).collect();
        let pool = ClassPool::new(&d, &exclude);
        let spec = PartitionSpec {
            scheme: PartitionScheme::Dirichlet { alpha: 0.1, axis: DirichletAxis::PerClass },
            num_clients: 10,
            samples_per_client: 100,
            seed: 3,
        };
        let excluded: HashSet<_> = exclude.into_iter().collect();
        for rows in partition(&pool, &spec).unwrap() {
            assert_eq!(rows.len(), 100);
            assert!(rows.iter().all(|i| !excluded.contains(i)));
        }
    }
}
