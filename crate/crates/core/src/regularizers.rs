//! Client-side regularizers: adaptive self-distillation (with its ablated
//! variants), uniform self-distillation, and the proximal penalty.
//!
//! The distillation teacher is the frozen round-start global model. Its
//! predictions are cached once per (client, round) in a [`TeacherCache`],
//! which is all the per-sample weights ever depend on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Distillation, LossSpec, ModelParams, Proximal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    Asd,
    AsdEntropyOnly,
    AsdLabelOnly,
    SdUniform,
    Prox,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 6] = [
        RegularizerKind::None,
        RegularizerKind::Asd,
        RegularizerKind::AsdEntropyOnly,
        RegularizerKind::AsdLabelOnly,
        RegularizerKind::SdUniform,
        RegularizerKind::Prox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Asd => "asd",
            RegularizerKind::AsdEntropyOnly => "asd_entropy_only",
            RegularizerKind::AsdLabelOnly => "asd_label_only",
            RegularizerKind::SdUniform => "sd_uniform",
            RegularizerKind::Prox => "prox",
        }
    }

    /// True for every kind that distills from the global model.
    pub fn is_distillation(self) -> bool {
        matches!(
            self,
            RegularizerKind::Asd
                | RegularizerKind::AsdEntropyOnly
                | RegularizerKind::AsdLabelOnly
                | RegularizerKind::SdUniform
        )
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown regularizer `{s}`")))
    }
}

/// How adaptive weights are scaled within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `α_i = α̂_i / Σ_j α̂_j` over the batch.
    Normalized,
    /// `α_i = α̂_i`; the form under which the class-wise gradient
    /// decomposition is an exact identity.
    Raw,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Normalized => "normalized",
            WeightMode::Raw => "raw",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(WeightMode::Normalized),
            "raw" => Ok(WeightMode::Raw),
            _ => Err(Error::Param(format!("unknown weight mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub tau: f64,
    pub mu: f64,
    pub weights: WeightMode,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::Asd,
            lambda: 20.0,
            tau: 2.0,
            mu: 1e-4,
            weights: WeightMode::Normalized,
        }
    }
}

impl RegularizerSpec {
    pub fn none() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::None,
            lambda: 0.0,
            ..RegularizerSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        nn::check_tau(self.tau)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Param(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Param(format!("mu must be non-negative, got {}", self.mu)));
        }
        Ok(())
    }

    /// Whether local training needs a teacher cache. λ = 0 switches the
    /// distillation term off entirely.
    pub fn distills(&self) -> bool {
        self.kind.is_distillation() && self.lambda != 0.0
    }
}

/// Global-model predictions on one client's full dataset, valid for one
/// round.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    round: usize,
    tau: f64,
    /// Softmax at the distillation temperature.
    probs_tau: Matrix,
    /// Entropy of the temperature-1 softmax.
    entropy: Vec<f64>,
}

impl TeacherCache {
    pub fn build(global: &ModelParams, client: &ClientDataset, tau: f64, round: usize) -> Result<Self> {
        let logits = nn::forward(global, &client.data.features)?;
        let probs_tau = nn::softmax_rows(&logits, tau)?;
        let unit = nn::softmax_rows(&logits, 1.0)?;
        let entropy = unit.row_iter().map(nn::entropy).collect();
        Ok(TeacherCache {
            round,
            tau,
            probs_tau,
            entropy,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }

    pub fn probs_tau(&self) -> &Matrix {
        &self.probs_tau
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropy
    }

    pub fn check_round(&self, round: usize) -> Result<()> {
        if self.round == round {
            Ok(())
        } else {
            Err(Error::StaleCache {
                cached: self.round,
                requested: round,
            })
        }
    }
}

fn label_prob(label_dist: &[f64], y: usize) -> Result<f64> {
    match label_dist.get(y) {
        Some(&p) if p > 0.0 => Ok(p),
        Some(_) => Err(Error::Invariant(format!(
            "sample labelled {y} but the client's label distribution has no mass there"
        ))),
        None => Err(Error::Param(format!("label {y} out of range"))),
    }
}

/// `α̂_i = exp(−H(x_i)) / p_k^{y_i}`.
pub fn asd_weights_raw(entropies: &[f64], labels: &[usize], label_dist: &[f64]) -> Result<Vec<f64>> {
    raw_weights(RegularizerKind::Asd, entropies, labels, label_dist)
}

fn raw_weights(kind: RegularizerKind, entropies: &[f64], labels: &[usize], label_dist: &[f64]) -> Result<Vec<f64>> {
    if entropies.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} entropies but {} labels",
            entropies.len(),
            labels.len()
        )));
    }
    entropies
        .iter()
        .zip(labels)
        .map(|(&h, &y)| {
            Ok(match kind {
                RegularizerKind::Asd => (-h).exp() / label_prob(label_dist, y)?,
                RegularizerKind::AsdEntropyOnly => (-h).exp(),
                RegularizerKind::AsdLabelOnly => 1.0 / label_prob(label_dist, y)?,
                RegularizerKind::SdUniform => 1.0,
                other => return Err(Error::Param(format!("`{other}` has no distillation weights"))),
            })
        })
        .collect()
}

/// `α_i = α̂_i / Σ_j α̂_j`.
pub fn asd_weights_normalize(raw: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::Param(format!("cannot normalize weights summing to {sum}")));
    }
    Ok(raw.iter().map(|a| a / sum).collect())
}

/// Per-sample weights for one batch under the spec's kind and mode.
/// The uniform kind is never normalized: its weights are all one.
pub fn sample_weights(
    spec: &RegularizerSpec,
    entropies: &[f64],
    labels: &[usize],
    label_dist: &[f64],
) -> Result<Vec<f64>> {
    let raw = raw_weights(spec.kind, entropies, labels, label_dist)?;
    match (spec.kind, spec.weights) {
        (RegularizerKind::SdUniform, _) | (_, WeightMode::Raw) => Ok(raw),
        (_, WeightMode::Normalized) => asd_weights_normalize(&raw),
    }
}

/// `(1/B) · Σ_i α_i · KL(q_g(x_i) ‖ q_k(x_i))` on a batch, with the weights
/// used. `rows` index the batch samples inside the client dataset (and so
/// inside `cache`).
pub fn asd_loss(
    spec: &RegularizerSpec,
    cache: &TeacherCache,
    round: usize,
    rows: &[usize],
    student_probs_tau: &Matrix,
    labels: &[usize],
    label_dist: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !spec.kind.is_distillation() {
        return Err(Error::Param(format!(
            "`{}` is not a distillation regularizer",
            spec.kind
        )));
    }
    cache.check_round(round)?;
    if student_probs_tau.rows() != rows.len() || labels.len() != rows.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} student predictions, {} labels",
            rows.len(),
            student_probs_tau.rows(),
            labels.len()
        )));
    }
    let entropies: Vec<f64> = rows.iter().map(|&i| cache.entropy[i]).collect();
    let weights = sample_weights(spec, &entropies, labels, label_dist)?;
    let mut total = 0.0;
    for (b, (&i, &w)) in rows.iter().zip(&weights).enumerate() {
        total += w * nn::kl_divergence(cache.probs_tau.row(i), student_probs_tau.row(b))?;
    }
    Ok((total / rows.len() as f64, weights))
}

/// `(μ/2)·‖w − w_global‖²` and its gradient `μ·(w − w_global)`.
pub fn prox_loss(w: &ModelParams, w_global: &ModelParams, mu: f64) -> Result<(f64, ModelParams)> {
    w.check_same_shape(w_global)?;
    let mut grad = w.clone();
    grad.axpy(-1.0, w_global)?;
    let loss = 0.5 * mu * grad.norm_sq();
    grad.scale(mu);
    Ok((loss, grad))
}

/// Teacher targets and per-sample KL coefficients for one batch, ready to
/// be turned into a [`LossSpec`].
#[derive(Debug, Clone)]
pub struct BatchTerms {
    pub teacher: Option<Matrix>,
    pub coeffs: Vec<f64>,
    /// The α actually used (empty when not distilling).
    pub weights: Vec<f64>,
    pub tau: f64,
}

impl BatchTerms {
    /// KL coefficients `λ · α_i / B` for a training batch.
    pub fn for_batch(
        spec: &RegularizerSpec,
        cache: Option<&TeacherCache>,
        round: usize,
        rows: &[usize],
        labels: &[usize],
        label_dist: &[f64],
    ) -> Result<Self> {
        let scale = spec.lambda / rows.len() as f64;
        Self::build(spec, cache, round, rows, labels, label_dist, scale)
    }

    /// KL coefficients for the exact client objective over the whole
    /// dataset (`rows` = every sample).
    ///
    /// Raw mode and the uniform kind use `λ · α_i / n`. Normalized mode
    /// normalizes over the whole dataset and keeps the training batch
    /// factor `1/batch_size`, i.e. the ratio-of-expectations form of the
    /// per-batch objective.
    pub fn for_full_dataset(
        spec: &RegularizerSpec,
        cache: Option<&TeacherCache>,
        round: usize,
        labels: &[usize],
        label_dist: &[f64],
        batch_size: usize,
    ) -> Result<Self> {
        let rows: Vec<usize> = (0..labels.len()).collect();
        let n = labels.len() as f64;
        let normalized = spec.weights == WeightMode::Normalized && spec.kind != RegularizerKind::SdUniform;
        let scale = if normalized {
            spec.lambda / batch_size as f64
        } else {
            spec.lambda / n
        };
        Self::build(spec, cache, round, &rows, labels, label_dist, scale)
    }

    fn build(
        spec: &RegularizerSpec,
        cache: Option<&TeacherCache>,
        round: usize,
        rows: &[usize],
        labels: &[usize],
        label_dist: &[f64],
        scale: f64,
    ) -> Result<Self> {
        if !spec.distills() {
            return Ok(BatchTerms {
                teacher: None,
                coeffs: Vec::new(),
                weights: Vec::new(),
                tau: spec.tau,
            });
        }
        let cache = cache.ok_or_else(|| Error::Param("distillation requires a teacher cache".into()))?;
        cache.check_round(round)?;
        let entropies: Vec<f64> = rows.iter().map(|&i| cache.entropy[i]).collect();
        let weights = sample_weights(spec, &entropies, labels, label_dist)?;
        let coeffs = weights.iter().map(|a| scale * a).collect();
        Ok(BatchTerms {
            teacher: Some(cache.probs_tau.select_rows(rows)),
            coeffs,
            weights,
            tau: spec.tau,
        })
    }

    /// The composite objective `CE + λ·L_ASD (+ prox)` for this batch.
    pub fn loss_spec<'a>(&'a self, spec: &RegularizerSpec, global: &'a ModelParams) -> LossSpec<'a> {
        LossSpec {
            ce_weight: 1.0,
            distill: self.teacher.as_ref().map(|t| Distillation {
                teacher: t,
                coeffs: &self.coeffs,
                tau: self.tau,
            }),
            proximal: (spec.kind == RegularizerKind::Prox && spec.mu != 0.0).then_some(Proximal {
                anchor: global,
                mu: spec.mu,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_mixture, Dataset};
    use crate::rng::{stream, Stream};

    fn spec(kind: RegularizerKind) -> RegularizerSpec {
        RegularizerSpec {
            kind,
            ..RegularizerSpec::default()
        }
    }

    #[test]
    fn raw_weight_examples() {
        let w = asd_weights_raw(&[0.5], &[0], &[0.25, 0.75]).unwrap();
        assert!((w[0] - (-0.5f64).exp() / 0.25).abs() < 1e-15);
        assert!((w[0] - 2.426123).abs() < 1e-6);
        assert_eq!(asd_weights_raw(&[0.0], &[0], &[1.0, 0.0]).unwrap(), vec![1.0]);
        let w = asd_weights_raw(&[0.3, 0.3], &[1, 1], &[0.5, 0.5]).unwrap();
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn raw_weight_reports_missing_label_mass() {
        let err = asd_weights_raw(&[0.1], &[1], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(asd_weights_normalize(&[3.0, 1.0]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(asd_weights_normalize(&[2.0; 4]).unwrap(), vec![0.25; 4]);
        let a = asd_weights_normalize(&[0.3, 1.7, 2.2]).unwrap();
        let b = asd_weights_normalize(&[3.0, 17.0, 22.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(asd_weights_normalize(&[0.0, 0.0]), Err(Error::Param(_))));
    }

    #[test]
    fn weights_are_monotone() {
        let base = sample_weights(&spec(RegularizerKind::Asd), &[0.5, 0.5, 0.5], &[0, 1, 1], &[0.5, 0.5]).unwrap();
        let sharper = sample_weights(&spec(RegularizerKind::Asd), &[0.2, 0.5, 0.5], &[0, 1, 1], &[0.5, 0.5]).unwrap();
        assert!(sharper[0] > base[0]);
        let rarer = sample_weights(&spec(RegularizerKind::Asd), &[0.5, 0.5, 0.5], &[0, 1, 1], &[0.2, 0.8]).unwrap();
        assert!(rarer[0] > base[0]);
    }

    fn client_and_models() -> (ClientDataset, ModelParams, ModelParams) {
        let ds: Dataset = gen_synthetic_mixture(3, 4, 6, 1.0, 2).unwrap();
        let client = ClientDataset::new(0, ds).unwrap();
        let mut rng = stream(2, Stream::ModelInit, 0, 0);
        let g = ModelParams::init(&[4, 5, 3], &mut rng).unwrap();
        let s = ModelParams::init(&[4, 5, 3], &mut rng).unwrap();
        (client, g, s)
    }

    #[test]
    fn asd_loss_vanishes_for_student_equal_teacher() {
        let (client, global, _) = client_and_models();
        let cache = TeacherCache::build(&global, &client, 2.0, 4).unwrap();
        let rows: Vec<usize> = (0..client.len()).collect();
        let student = nn::softmax_rows(&nn::forward(&global, &client.data.features).unwrap(), 2.0).unwrap();
        for kind in [
            RegularizerKind::Asd,
            RegularizerKind::AsdEntropyOnly,
            RegularizerKind::AsdLabelOnly,
            RegularizerKind::SdUniform,
        ] {
            let (l, w) = asd_loss(
                &spec(kind),
                &cache,
                4,
                &rows,
                &student,
                &client.data.labels,
                &client.label_dist,
            )
            .unwrap();
            assert!(l.abs() < 1e-15, "{kind}");
            if kind != RegularizerKind::SdUniform {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_sample_batch_makes_asd_and_uniform_coincide() {
        let (client, global, student) = client_and_models();
        let cache = TeacherCache::build(&global, &client, 2.0, 0).unwrap();
        let rows = [5];
        let probs = nn::softmax_rows(
            &nn::forward(&student, &client.data.features.select_rows(&rows)).unwrap(),
            2.0,
        )
        .unwrap();
        let labels = [client.data.labels[5]];
        let (a, _) = asd_loss(
            &spec(RegularizerKind::Asd),
            &cache,
            0,
            &rows,
            &probs,
            &labels,
            &client.label_dist,
        )
        .unwrap();
        let (u, _) = asd_loss(
            &spec(RegularizerKind::SdUniform),
            &cache,
            0,
            &rows,
            &probs,
            &labels,
            &client.label_dist,
        )
        .unwrap();
        assert!((a - u).abs() < 1e-15);
        assert!(a > 0.0);
    }

    #[test]
    fn uniform_loss_matches_hand_computation() {
        // cache rows are forced to the example's teacher distributions
        let (client, global, _) = client_and_models();
        let mut cache = TeacherCache::build(&global, &client, 2.0, 0).unwrap();
        cache.probs_tau = Matrix::from_vec(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        cache.entropy = vec![0.1, 0.2];
        let student = Matrix::from_vec(2, 2, vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let (l, w) = asd_loss(
            &spec(RegularizerKind::SdUniform),
            &cache,
            0,
            &[0, 1],
            &student,
            &[0, 1],
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert!((l - 0.601986).abs() < 1e-6);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (client, global, _) = client_and_models();
        let cache = TeacherCache::build(&global, &client, 2.0, 3).unwrap();
        let probs = Matrix::zeros(1, 3);
        let err = asd_loss(
            &spec(RegularizerKind::Asd),
            &cache,
            4,
            &[0],
            &probs,
            &[client.data.labels[0]],
            &client.label_dist,
        );
        assert!(matches!(
            err,
            Err(Error::StaleCache {
                cached: 3,
                requested: 4
            })
        ));
        assert!(asd_loss(
            &spec(RegularizerKind::Prox),
            &cache,
            3,
            &[0],
            &probs,
            &[0],
            &client.label_dist
        )
        .is_err());
    }

    #[test]
    fn weights_do_not_depend_on_student() {
        let (client, global, mut student) = client_and_models();
        let cache = TeacherCache::build(&global, &client, 2.0, 0).unwrap();
        let rows: Vec<usize> = (0..client.len()).collect();
        let probs = |p: &ModelParams| nn::softmax_rows(&nn::forward(p, &client.data.features).unwrap(), 2.0).unwrap();
        let (_, w1) = asd_loss(
            &spec(RegularizerKind::Asd),
            &cache,
            0,
            &rows,
            &probs(&student),
            &client.data.labels,
            &client.label_dist,
        )
        .unwrap();
        student.scale(0.5);
        let (_, w2) = asd_loss(
            &spec(RegularizerKind::Asd),
            &cache,
            0,
            &rows,
            &probs(&student),
            &client.data.labels,
            &client.label_dist,
        )
        .unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn prox_examples() {
        let (_, g, _) = client_and_models();
        let (l, grad) = prox_loss(&g, &g, 3.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.values().all(|&v| v == 0.0));

        let anchor = ModelParams::zeros(&[1, 2]).unwrap();
        let w = ModelParams::from_flat(&[1, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let (l, grad) = prox_loss(&w, &anchor, 2.0).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(grad.to_flat(), vec![2.0, 2.0, 0.0, 0.0]);

        // central differences of the loss
        let (_, grad) = prox_loss(&g, &anchor_like(&g), 0.7).unwrap();
        let flat = g.to_flat();
        let anchor = anchor_like(&g);
        for (i, gi) in grad.to_flat().iter().enumerate() {
            let eval = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                prox_loss(&ModelParams::from_flat(&g.sizes(), &v).unwrap(), &anchor, 0.7)
                    .unwrap()
                    .0
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            assert!((fd - gi).abs() < 1e-7 * (1.0 + gi.abs()));
        }

        assert!(prox_loss(&g, &ModelParams::zeros(&[4, 3]).unwrap(), 1.0).is_err());
    }

    fn anchor_like(p: &ModelParams) -> ModelParams {
        let mut a = p.clone();
        a.values_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        a
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for k in RegularizerKind::ALL {
            assert_eq!(k.as_str().parse::<RegularizerKind>().unwrap(), k);
        }
        assert!("fedsam".parse::<RegularizerKind>().is_err());
    }
}
