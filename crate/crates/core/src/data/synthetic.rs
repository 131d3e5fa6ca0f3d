use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Gaussian blob recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_total: usize,
    /// Distance between any two class means.
    pub class_separation: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let SyntheticSpec { num_classes, dim, n_total, class_separation } = *self;
        if num_classes < 2 || dim < 2 || n_total < num_classes {
            return Err(Error::Config(format!(
                "synthetic data needs num_classes >= 2, dim >= 2, n_total >= num_classes \
                 (got {num_classes}, {dim}, {n_total})"
            )));
        }
        if !(class_separation >= 0.0 && class_separation.is_finite()) {
            return Err(Error::Config(format!("class_separation {class_separation} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// One isotropic unit-variance Gaussian per class.
///
/// When `dim >= num_classes` the class means sit on scaled coordinate axes,
/// which puts every pair exactly `class_separation` apart. Otherwise means
/// are random directions of the same norm. Class counts differ by at most
/// one and rows are grouped by class.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let SyntheticSpec { num_classes, dim, n_total, class_separation } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if dim >= num_classes {
                let mut m = vec![0.0; dim];
                m[c] = radius;
                m
            } else {
                let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v * radius / norm).collect()
            }
        })
        .collect();

    let mut values = Vec::with_capacity(n_total * dim);
    let mut labels = Vec::with_capacity(n_total);
    for (c, mean) in means.iter().enumerate() {
        let count = n_total / num_classes + usize::from(c < n_total % num_classes);
        for _ in 0..count {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(m + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n_total, dim], values)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_total: usize) -> SyntheticSpec {
        SyntheticSpec { num_classes: 10, dim: 20, n_total, class_separation: 6.0 }
    }

    #[test]
    fn balanced_counts() {
        let d = gen_synthetic(&spec(1000), 1).unwrap();
        assert_eq!(d.class_counts(), vec![100; 10]);
        let d = gen_synthetic(&spec(1003), 1).unwrap();
        let counts = d.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 1003);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(gen_synthetic(&spec(200), 9).unwrap(), gen_synthetic(&spec(200), 9).unwrap());
        assert_ne!(gen_synthetic(&spec(200), 9).unwrap(), gen_synthetic(&spec(200), 10).unwrap());
    }

    #[test]
    fn nearest_centroid_separates_well_separated_blobs() {
        let train = gen_synthetic(&spec(1000), 3).unwrap();
        let test = gen_synthetic(&spec(1000), 4).unwrap();
        let mut centroids = vec![vec![0.0; 20]; 10];
        for (i, &y) in train.labels().iter().enumerate() {
            for (c, v) in centroids[y].iter_mut().zip(train.features().row(i)) {
                *c += v / 100.0;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.features().row(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.labels()[i]
            })
            .count();
        assert!(correct > 950, "nearest centroid got {correct}/1000");
    }

    #[test]
    fn rejects_degenerate_shapes() {
        let mut s = spec(100);
        s.num_classes = 1;
        assert!(gen_synthetic(&s, 0).is_err());
    }
}
