use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{dirichlet_partition, load_idx, ClientDataset, Dataset, PartitionSpec, Standardizer, SyntheticMixture};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            dim: 20,
            samples_per_class: 200,
            test_samples_per_class: 100,
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx(IdxPaths),
}

/// The pooled training split, its partition into clients, and the test
/// split, all standardized with training statistics.
#[derive(Debug, Clone)]
pub struct Federation {
    pub train: Dataset,
    pub clients: Vec<ClientDataset>,
    pub test: Dataset,
}

impl Federation {
    pub fn build(source: &DataSource, partition: &PartitionSpec, seed: u64) -> Result<Self> {
        let (mut train, mut test) = match source {
            DataSource::Synthetic(s) => {
                let mix = SyntheticMixture::new(s.num_classes, s.dim, s.spread, seed)?;
                let train = mix.sample(s.samples_per_class, &mut rng::stream(seed, Stream::TrainSamples, 0, 0));
                let test = mix.sample(
                    s.test_samples_per_class,
                    &mut rng::stream(seed, Stream::TestSamples, 0, 0),
                );
                (train, test)
            }
            DataSource::Idx(p) => {
                let train = load_idx(&p.train_images, &p.train_labels, None)?;
                let test = load_idx(&p.test_images, &p.test_labels, Some(train.num_classes))?;
                if test.dim() != train.dim() {
                    return Err(Error::Shape(format!(
                        "train images have {} features, test images {}",
                        train.dim(),
                        test.dim()
                    )));
                }
                (train, test)
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Param("training and test splits must be non-empty".into()));
        }
        let standardizer = Standardizer::fit(&train);
        standardizer.apply(&mut train);
        standardizer.apply(&mut test);
        let clients = dirichlet_partition(&train, partition)?;
        Ok(Federation { train, clients, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}
