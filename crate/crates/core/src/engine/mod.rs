//! Communication rounds: client sampling, local training on the composite
//! objective, FedAvg aggregation and evaluation.

mod local;
mod sim;

pub use local::{local_train, local_train_probed, per_class_drift, BatchEvent, ClassDrift, LocalUpdate};
pub use sim::{run, EvalMode, RoundMetrics, ServerState, Simulation};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::regularizers::RegularizerSpec;

/// How clients are chosen each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each client joins independently with probability `participation_rate`.
    Bernoulli,
    /// Exactly `round(participation_rate · K)` clients (at least one).
    Fixed,
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Bernoulli => "bernoulli",
            Sampling::Fixed => "fixed",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Sampling::Bernoulli),
            "fixed" => Ok(Sampling::Fixed),
            _ => Err(Error::Param(format!("unknown sampling mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub partition: PartitionSpec,
    pub participation_rate: f64,
    pub sampling: Sampling,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub regularizer: RegularizerSpec,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Measure gradient dissimilarity every this many rounds; 0 disables.
    pub gd_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            partition: PartitionSpec {
                num_clients: 100,
                delta: 0.3,
                balanced: true,
                seed: 0,
            },
            participation_rate: 0.1,
            sampling: Sampling::Bernoulli,
            rounds: 100,
            local_epochs: 5,
            batch_size: 50,
            lr: 0.1,
            lr_decay: 0.998,
            regularizer: RegularizerSpec::default(),
            hidden: vec![64, 64],
            gd_every: 10,
        }
    }
}

impl RunConfig {
    pub fn num_clients(&self) -> usize {
        self.partition.num_clients
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.regularizer.validate()?;
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Param(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Param(format!(
                "learning-rate decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Param("hidden layers must have at least one unit".into()));
        }
        Ok(())
    }

    /// `lr · decay^round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round as i32)
    }

    /// `[input, hidden..., classes]`.
    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(num_classes);
        sizes
    }
}

/// Client ids chosen for one round, ascending. Never empty.
pub fn sample_clients<R: Rng + ?Sized>(
    num_clients: usize,
    rate: f64,
    mode: Sampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Param(format!(
            "participation rate must be in (0, 1], got {rate}"
        )));
    }
    if num_clients == 0 {
        return Err(Error::Param("no clients to sample".into()));
    }
    match mode {
        Sampling::Bernoulli => loop {
            let chosen: Vec<usize> = (0..num_clients).filter(|_| rng.random::<f64>() < rate).collect();
            if !chosen.is_empty() {
                return Ok(chosen);
            }
        },
        Sampling::Fixed => {
            let m = ((rate * num_clients as f64).round() as usize).clamp(1, num_clients);
            let mut chosen = index::sample(rng, num_clients, m).into_vec();
            chosen.sort_unstable();
            Ok(chosen)
        }
    }
}

/// Element-wise mean of the models.
pub fn aggregate(models: &[ModelParams]) -> Result<ModelParams> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Param("cannot aggregate an empty model list".into()))?;
    let mut sum = first.zeros_like();
    sum.axpy(1.0, first)?;
    for m in rest {
        sum.axpy(1.0, m)?;
    }
    sum.scale(1.0 / models.len() as f64);
    Ok(sum)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, features: &crate::Matrix) -> Result<Vec<usize>> {
    Ok(nn::forward(params, features)?.row_iter().map(argmax).collect())
}

/// Fraction of correctly classified samples.
pub fn accuracy(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Param("accuracy on an empty test set".into()));
    }
    let pred = predict(params, &test.features)?;
    let hits = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Accuracy restricted to each class; classes absent from `test` report 0.
pub fn per_class_accuracy(params: &ModelParams, test: &Dataset) -> Result<Vec<f64>> {
    let pred = predict(params, &test.features)?;
    let mut hits = vec![0usize; test.num_classes];
    let mut total = vec![0usize; test.num_classes];
    for (p, &y) in pred.iter().zip(&test.labels) {
        total[y] += 1;
        if *p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn full_participation_selects_everyone() {
        let mut rng = stream(1, Stream::Sampling, 0, 0);
        assert_eq!(
            sample_clients(7, 1.0, Sampling::Bernoulli, &mut rng).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(
            sample_clients(7, 1.0, Sampling::Fixed, &mut rng).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bernoulli_mean_matches_rate() {
        let mut rng = stream(2, Stream::Sampling, 0, 0);
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| sample_clients(100, 0.1, Sampling::Bernoulli, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((9.4..=10.6).contains(&mean), "mean {mean}");
    }

    #[test]
    fn sampling_is_seeded_and_never_empty() {
        let seq = |seed| {
            let mut rng = stream(seed, Stream::Sampling, 0, 0);
            (0..50)
                .map(|_| sample_clients(5, 0.05, Sampling::Bernoulli, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = seq(3);
        assert_eq!(a, seq(3));
        assert!(a.iter().all(|s| !s.is_empty()));
        let mut rng = stream(3, Stream::Sampling, 0, 0);
        assert_eq!(sample_clients(20, 0.2, Sampling::Fixed, &mut rng).unwrap().len(), 4);
        assert!(sample_clients(20, 0.0, Sampling::Fixed, &mut rng).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = stream(4, Stream::ModelInit, 0, 0);
        let w = ModelParams::init(&[3, 2], &mut rng).unwrap();
        assert_eq!(aggregate(std::slice::from_ref(&w)).unwrap(), w);

        let mut neg = w.clone();
        neg.scale(-1.0);
        assert!(aggregate(&[w.clone(), neg]).unwrap().values().all(|&v| v == 0.0));

        let a = ModelParams::from_flat(&[1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = ModelParams::from_flat(&[1, 2], &[0.0, -2.0, 6.0, 1.0]).unwrap();
        let c = ModelParams::from_flat(&[1, 2], &[2.0, 3.0, 0.0, 1.0]).unwrap();
        let m = aggregate(&[a, b, c]).unwrap();
        assert_eq!(m.to_flat(), vec![1.0, 1.0, 3.0, 2.0]);

        assert!(matches!(aggregate(&[]), Err(Error::Param(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn lr_schedule_is_geometric() {
        let cfg = RunConfig::default();
        for t in [0, 1, 17, 500] {
            assert_eq!(cfg.lr_at(t), 0.1 * 0.998f64.powi(t as i32));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.participation_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.participation_rate = 0.5;
        cfg.lr_decay = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lr_decay = 1.0;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
