use rand::seq::SliceRandom;

use super::{per_class_accuracy, RunConfig};
use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::regularizers::{BatchTerms, TeacherCache};
use crate::rng::{self, Stream};

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    /// Mean over batches of the batch cross-entropy.
    pub ce_loss: f64,
    /// Mean over batches of the (λ-free) distillation loss.
    pub asd_loss: f64,
    pub batches: usize,
}

/// What a probe sees after every optimizer step.
#[derive(Debug, Clone)]
pub struct BatchEvent {
    pub round: usize,
    pub client_id: usize,
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub ce_loss: f64,
    pub asd_loss: f64,
    /// Sum of the distillation weights of the batch, when distilling.
    pub weight_sum: Option<f64>,
}

/// Runs `cfg.local_epochs` epochs of shuffled mini-batch SGD on
/// `CE + λ·L_ASD` (or the proximal objective), starting from `global`.
///
/// `cache` must have been built from `global` for `round` whenever the
/// regularizer distills. Shuffling uses the `(seed, client, round)` stream.
pub fn local_train(
    client: &ClientDataset,
    global: &ModelParams,
    cache: Option<&TeacherCache>,
    cfg: &RunConfig,
    round: usize,
    lr: f64,
) -> Result<LocalUpdate> {
    local_train_probed(client, global, cache, cfg, round, lr, &|_| {})
}

pub fn local_train_probed(
    client: &ClientDataset,
    global: &ModelParams,
    cache: Option<&TeacherCache>,
    cfg: &RunConfig,
    round: usize,
    lr: f64,
    probe: &(dyn Fn(&BatchEvent) + Sync),
) -> Result<LocalUpdate> {
    let spec = &cfg.regularizer;
    let n = client.len();
    if n == 0 {
        return Err(Error::Param(format!("client {} holds no data", client.client_id)));
    }
    if let (true, Some(c)) = (spec.distills(), cache) {
        if c.len() != n {
            return Err(Error::Shape(format!(
                "teacher cache has {} rows for a client with {n} samples",
                c.len()
            )));
        }
    }
    let mut rng = rng::stream(cfg.seed, Stream::Client, client.client_id as u64, round as u64);
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut ce_sum, mut asd_sum, mut batches) = (0.0, 0.0, 0usize);

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x = client.data.features.select_rows(rows);
            let y: Vec<usize> = rows.iter().map(|&i| client.data.labels[i]).collect();
            let terms = BatchTerms::for_batch(spec, cache, round, rows, &y, &client.label_dist)?;
            let (report, grad) = nn::backward(&params, &x, &y, &terms.loss_spec(spec, global))?;
            if !report.total.is_finite() {
                return Err(Error::Divergence {
                    round,
                    client: client.client_id,
                    batch: batches,
                    loss: report.total,
                });
            }
            nn::sgd_step(&mut params, &grad, lr)?;
            let asd = if spec.distills() {
                report.distill / spec.lambda
            } else {
                0.0
            };
            ce_sum += report.ce;
            asd_sum += asd;
            probe(&BatchEvent {
                round,
                client_id: client.client_id,
                epoch,
                batch: b,
                size: rows.len(),
                ce_loss: report.ce,
                asd_loss: asd,
                weight_sum: (!terms.weights.is_empty()).then(|| terms.weights.iter().sum()),
            });
            batches += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            round,
            client: client.client_id,
            batch: batches.saturating_sub(1),
            loss: f64::NAN,
        });
    }
    let denom = batches.max(1) as f64;
    Ok(LocalUpdate {
        client_id: client.client_id,
        params,
        ce_loss: ce_sum / denom,
        asd_loss: asd_sum / denom,
        batches,
    })
}

/// Per-class test accuracy change caused by one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDrift {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// `after − before`, per class.
    pub deltas: Vec<f64>,
    pub label_dist: Vec<f64>,
}

impl ClassDrift {
    /// Mean delta over classes the client never observed, if any.
    pub fn mean_absent_delta(&self) -> Option<f64> {
        let absent: Vec<f64> = self
            .deltas
            .iter()
            .zip(&self.label_dist)
            .filter(|(_, &p)| p == 0.0)
            .map(|(&d, _)| d)
            .collect();
        (!absent.is_empty()).then(|| absent.iter().sum::<f64>() / absent.len() as f64)
    }
}

pub fn per_class_drift(
    client: &ClientDataset,
    global: &ModelParams,
    cfg: &RunConfig,
    test: &Dataset,
    round: usize,
    lr: f64,
) -> Result<ClassDrift> {
    let cache = if cfg.regularizer.distills() {
        Some(TeacherCache::build(global, client, cfg.regularizer.tau, round)?)
    } else {
        None
    };
    let trained = local_train(client, global, cache.as_ref(), cfg, round, lr)?;
    let before = per_class_accuracy(global, test)?;
    let after = per_class_accuracy(&trained.params, test)?;
    let deltas = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    Ok(ClassDrift {
        before,
        after,
        deltas,
        label_dist: client.label_dist.clone(),
    })
}
