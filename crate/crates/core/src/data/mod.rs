//! Datasets, the synthetic Gaussian-mixture generator, and Dirichlet
//! label-skew partitioning across clients.

mod federation;
mod idx;
mod partition;

pub use federation::{DataSource, Federation, IdxPaths, SyntheticSpec};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use partition::{dirichlet_partition, PartitionSpec};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Param(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn label_dist(&self) -> Result<Vec<f64>> {
        empirical_label_dist(&self.labels, self.num_classes)
    }
}

/// One client's local data and its empirical label distribution `p_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
    pub label_dist: Vec<f64>,
}

impl ClientDataset {
    pub fn new(client_id: usize, data: Dataset) -> Result<Self> {
        let label_dist = data.label_dist()?;
        Ok(ClientDataset {
            client_id,
            data,
            label_dist,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `p^c = count(y = c) / n`.
pub fn empirical_label_dist(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Param("label distribution of an empty label set".into()));
    }
    let counts = label_counts(labels, num_classes)?;
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

pub fn label_counts(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Param(format!("label {y} out of range for {num_classes} classes")))? += 1;
    }
    Ok(counts)
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Isotropic Gaussian classes around fixed means. The class-conditional law
/// is global, so any split by label keeps it identical across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMixture {
    means: Matrix,
    spread: f64,
}

impl SyntheticMixture {
    /// Class means are standard-normal draws from the seed's mean stream.
    pub fn new(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(Error::Param(format!(
                "mixture needs at least 2 classes and 2 dimensions, got {num_classes} and {dim}"
            )));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::Param(format!("spread must be non-negative, got {spread}")));
        }
        let mut rng = rng::stream(seed, Stream::DataMeans, 0, 0);
        let data = (0..num_classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(SyntheticMixture {
            means: Matrix::from_vec(num_classes, dim, data)?,
            spread,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// `n_per_class` samples of each class, class-major order.
    pub fn sample<R: Rng + ?Sized>(&self, n_per_class: usize, rng: &mut R) -> Dataset {
        let (classes, dim) = (self.num_classes(), self.dim());
        let mut data = Vec::with_capacity(classes * n_per_class * dim);
        let mut labels = Vec::with_capacity(classes * n_per_class);
        for c in 0..classes {
            for _ in 0..n_per_class {
                for &m in self.means.row(c) {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push(m + self.spread * noise);
                }
                labels.push(c);
            }
        }
        Dataset {
            features: Matrix::from_vec(classes * n_per_class, dim, data).expect("sized above"),
            labels,
            num_classes: classes,
        }
    }
}

/// Training split drawn from the seed's mixture; see [`SyntheticMixture`].
pub fn gen_synthetic_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let mixture = SyntheticMixture::new(num_classes, dim, spread, seed)?;
    let mut rng = rng::stream(seed, Stream::TrainSamples, 0, 0);
    Ok(mixture.sample(n_per_class, &mut rng))
}

/// Per-dimension standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len().max(1) as f64, train.dim());
        let mut mean = vec![0.0; d];
        for row in train.features.row_iter() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.features.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // constant dimensions are centred but left unscaled
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = self.mean.len();
        for r in 0..ds.features.rows() {
            let row = ds.features.row_mut(r);
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) * self.scale[j];
            }
        }
    }
}
