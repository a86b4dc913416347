//! Client-drift and flatness measurements: gradient dissimilarity, the
//! class-wise gradient decomposition, and matrix-free Hessian spectra.

mod hessian;

pub use hessian::{
    hessian_trace, hvp, spectral_report, top_eigenvalue, EigenEstimate, NetObjective, Objective, Quadratic,
    SpectralReport, TraceEstimate,
};

use serde::{Deserialize, Serialize};

use crate::data::{label_counts, ClientDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Gradient, LossReport, LossSpec, ModelParams};
use crate::regularizers::{BatchTerms, RegularizerKind, RegularizerSpec, TeacherCache, WeightMode};

/// Denominators below this make the dissimilarity ratio undefined.
pub const GD_ZERO_MEAN: f64 = 1e-18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub round: usize,
    /// `mean_k ‖∇f_k‖² / ‖mean_k ∇f_k‖²`; `None` when the mean gradient
    /// vanishes.
    pub gd: Option<f64>,
    pub client_grad_norms: Vec<f64>,
    pub global_grad_norm: f64,
    pub lambda: f64,
}

impl DriftReport {
    pub fn is_infinite(&self) -> bool {
        self.gd.is_none()
    }
}

pub fn gradient_dissimilarity(client_grads: &[Gradient], lambda: f64) -> Result<DriftReport> {
    let (first, rest) = client_grads
        .split_first()
        .ok_or_else(|| Error::Param("gradient dissimilarity of zero clients".into()))?;
    let mut mean = first.clone();
    for g in rest {
        mean.axpy(1.0, g)?;
    }
    let k = client_grads.len() as f64;
    mean.scale(1.0 / k);
    let client_grad_norms: Vec<f64> = client_grads.iter().map(|g| g.norm_sq().sqrt()).collect();
    let mean_sq = client_grads.iter().map(Gradient::norm_sq).sum::<f64>() / k;
    let denom = mean.norm_sq();
    Ok(DriftReport {
        round: 0,
        gd: (denom >= GD_ZERO_MEAN).then(|| mean_sq / denom),
        client_grad_norms,
        global_grad_norm: denom.sqrt(),
        lambda,
    })
}

/// Running supremum of finite dissimilarity values seen along a trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DissimilarityBound {
    sup: Option<f64>,
    observed: usize,
}

impl DissimilarityBound {
    pub fn observe(&mut self, report: &DriftReport) {
        if let Some(g) = report.gd {
            self.sup = Some(self.sup.map_or(g, |s| s.max(g)));
            self.observed += 1;
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.sup
    }

    pub fn observed(&self) -> usize {
        self.observed
    }
}

/// Gradient of a client's exact objective `f_k = L_k + λ·L_k^ASD (+ prox)`
/// over its whole dataset, at `params`, with the teacher in `cache`.
pub fn client_objective_gradient(
    client: &ClientDataset,
    params: &ModelParams,
    anchor: &ModelParams,
    cache: Option<&TeacherCache>,
    spec: &RegularizerSpec,
    round: usize,
    batch_size: usize,
) -> Result<(LossReport, Gradient)> {
    let terms = BatchTerms::for_full_dataset(spec, cache, round, &client.data.labels, &client.label_dist, batch_size)?;
    nn::backward(
        params,
        &client.data.features,
        &client.data.labels,
        &terms.loss_spec(spec, anchor),
    )
}

/// Outcome of reconstructing a client gradient from class-wise parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClasswiseCheck {
    pub max_deviation: f64,
    /// Class-conditional mean CE gradients, `None` for unobserved classes.
    pub ce_grads: Vec<Option<Gradient>>,
    /// Class-conditional mean `exp(−H)·KL` gradients.
    pub kl_grads: Vec<Option<Gradient>>,
}

/// Rebuilds `∇f_k = Σ_c p_k^c (g_c + λ γ_k^c g̃_c)` from per-class empirical
/// gradients and returns the largest element-wise deviation from the
/// directly computed gradient. Requires raw (un-normalized) weights.
pub fn classwise_gradient_check(
    client: &ClientDataset,
    params: &ModelParams,
    cache: &TeacherCache,
    spec: &RegularizerSpec,
    round: usize,
) -> Result<ClasswiseCheck> {
    if spec.weights != WeightMode::Raw {
        return Err(Error::Mode(format!(
            "class-wise decomposition needs raw weights, got `{}`",
            spec.weights
        )));
    }
    if spec.kind != RegularizerKind::Asd {
        return Err(Error::Mode(format!(
            "class-wise decomposition is defined for `asd`, got `{}`",
            spec.kind
        )));
    }
    cache.check_round(round)?;
    let classes = client.data.num_classes;
    let counts = label_counts(&client.data.labels, classes)?;

    let (_, direct) = client_objective_gradient(client, params, params, Some(cache), spec, round, 1)?;

    let mut ce_grads = Vec::with_capacity(classes);
    let mut kl_grads = Vec::with_capacity(classes);
    let mut rebuilt = params.zeros_like();
    for c in 0..classes {
        if counts[c] == 0 {
            ce_grads.push(None);
            kl_grads.push(None);
            continue;
        }
        let rows: Vec<usize> = (0..client.len()).filter(|&i| client.data.labels[i] == c).collect();
        let x = client.data.features.select_rows(&rows);
        let y = vec![c; rows.len()];
        let (_, g_ce) = nn::backward(params, &x, &y, &LossSpec::cross_entropy())?;

        let teacher = cache.probs_tau().select_rows(&rows);
        let n_c = rows.len() as f64;
        let coeffs: Vec<f64> = rows.iter().map(|&i| (-cache.entropies()[i]).exp() / n_c).collect();
        let kl_spec = LossSpec {
            ce_weight: 0.0,
            distill: Some(nn::Distillation {
                teacher: &teacher,
                coeffs: &coeffs,
                tau: spec.tau,
            }),
            proximal: None,
        };
        let (_, g_kl) = nn::backward(params, &x, &y, &kl_spec)?;

        let p = client.label_dist[c];
        rebuilt.axpy(p, &g_ce)?;
        let gamma = 1.0 / p;
        rebuilt.axpy(p * spec.lambda * gamma, &g_kl)?;
        ce_grads.push(Some(g_ce));
        kl_grads.push(Some(g_kl));
    }
    let max_deviation = rebuilt
        .values()
        .zip(direct.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ClasswiseCheck {
        max_deviation,
        ce_grads,
        kl_grads,
    })
}

/// Mean `|cos(g_c, g_m)|` over distinct observed class pairs; how weakly
/// correlated the class-wise gradients are. `None` with fewer than two
/// classes.
pub fn classwise_correlation(grads: &[Option<Gradient>]) -> Option<f64> {
    let present: Vec<&Gradient> = grads.iter().flatten().collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let denom = (present[i].norm_sq() * present[j].norm_sq()).sqrt();
            if denom > 0.0 {
                total += (present[i].dot(present[j]) / denom).abs();
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}
