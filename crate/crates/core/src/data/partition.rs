use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration; small values give near single-class clients.
    pub delta: f64,
    pub balanced: bool,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Param("need at least one client".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Param(format!(
                "Dirichlet concentration must be positive, got {}",
                self.delta
            )));
        }
        if !self.balanced {
            return Err(Error::Param("only balanced partitions are supported".into()));
        }
        Ok(())
    }
}

fn sample_dirichlet<R: Rng + ?Sized>(delta: f64, classes: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("validated concentration");
    let mut p: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every gamma draw underflowed: the limit is a vertex of the simplex
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..classes)] = 1.0;
    }
    p
}

fn sample_multinomial<R: Rng + ?Sized>(n: usize, probs: &[f64], rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0; probs.len()];
    let mut left = n as u64;
    let mut mass = 1.0;
    for (c, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if c + 1 == probs.len() || mass <= 0.0 {
            counts[c] = left as usize;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, q).expect("probability clamped").sample(rng);
        counts[c] = k as usize;
        left -= k;
        mass -= p;
    }
    counts
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Splits `ds` into `spec.num_clients` disjoint, equally sized clients with
/// Dirichlet(δ) label skew.
///
/// Each client draws a class prior from Dir(δ) and target class counts from
/// a multinomial on that prior. Targets are then served one sample at a
/// time in a random interleaved order from the per-class pools; when a
/// target's pool is empty the client redraws from its prior renormalized
/// over the non-empty pools (or from the pool sizes if its prior has no
/// mass left there).
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let (n, k, classes) = (ds.len(), spec.num_clients, ds.num_classes);
    if n % k != 0 {
        return Err(Error::Param(format!(
            "{n} samples cannot be split evenly across {k} clients"
        )));
    }
    let per_client = n / k;
    let mut rng = rng::stream(spec.seed, Stream::Partition, 0, 0);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let priors: Vec<Vec<f64>> = (0..k)
        .map(|_| sample_dirichlet(spec.delta, classes, &mut rng))
        .collect();
    let mut slots = Vec::with_capacity(n);
    for (client, prior) in priors.iter().enumerate() {
        for (class, count) in sample_multinomial(per_client, prior, &mut rng).into_iter().enumerate() {
            slots.extend(std::iter::repeat_n((client, class), count));
        }
    }
    slots.shuffle(&mut rng);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::with_capacity(per_client); k];
    for (client, class) in slots {
        let class = if pools[class].is_empty() {
            let remaining: Vec<f64> = priors[client]
                .iter()
                .zip(&pools)
                .map(|(&p, pool)| if pool.is_empty() { 0.0 } else { p })
                .collect();
            match sample_index(&remaining, &mut rng) {
                Some(c) => c,
                None => {
                    let sizes: Vec<f64> = pools.iter().map(|p| p.len() as f64).collect();
                    sample_index(&sizes, &mut rng)
                        .ok_or_else(|| Error::Invariant("class pools exhausted early".into()))?
                }
            }
        } else {
            class
        };
        let idx = pools[class].pop().expect("pool checked non-empty");
        assigned[client].push(idx);
    }

    assigned
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientDataset::new(id, ds.subset(&idx)))
        .collect()
}
