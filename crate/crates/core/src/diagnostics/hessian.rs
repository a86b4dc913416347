//! Matrix-free Hessian spectra. Hessian-vector products are central
//! differences of analytic gradients; power iteration gives the dominant
//! eigenvalue and Hutchinson's estimator the trace.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm_sq, Matrix};
use crate::nn::{self, LossSpec, ModelParams};
use crate::rng::{self, Stream};

pub const DEFAULT_HVP_STEP: f64 = 1e-4;

/// A twice-differentiable scalar function of a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;

    /// Gradients at `w + εv` and `w − εv`. Piecewise-smooth objectives
    /// evaluate both on the piece containing `w`.
    fn gradient_pair(&self, w: &[f64], v: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.gradient(&shift(w, v, eps))?, self.gradient(&shift(w, v, -eps))?))
    }
}

fn shift(w: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    w.iter().zip(v).map(|(a, b)| a + eps * b).collect()
}

/// `scale · ½ wᵀ A w` for a symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Matrix,
    scale: f64,
}

impl Quadratic {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Shape(format!(
                "quadratic form needs a square matrix, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        Ok(Quadratic { a, scale: 1.0 })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut a = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            a.set(i, i, v);
        }
        Quadratic { a, scale: 1.0 }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale *= scale;
        self
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.a.row_iter().map(|r| self.scale * dot(r, w)).collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(0.5 * dot(w, &self.apply(w)))
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(w))
    }
}

/// Mean cross-entropy of a dense network on a fixed dataset, as a function
/// of its flattened parameters.
#[derive(Debug, Clone)]
pub struct NetObjective {
    sizes: Vec<usize>,
    data: Dataset,
    scale: f64,
}

impl NetObjective {
    pub fn new(sizes: Vec<usize>, data: Dataset) -> Result<Self> {
        if sizes.first() != Some(&data.dim()) || sizes.last() != Some(&data.num_classes) {
            return Err(Error::Shape(format!(
                "network {sizes:?} does not fit {}-dimensional data with {} classes",
                data.dim(),
                data.num_classes
            )));
        }
        Ok(NetObjective {
            sizes,
            data,
            scale: 1.0,
        })
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale *= scale;
        self
    }

    fn params(&self, w: &[f64]) -> Result<ModelParams> {
        ModelParams::from_flat(&self.sizes, w)
    }
}

impl Objective for NetObjective {
    fn dim(&self) -> usize {
        ModelParams::zeros(&self.sizes).map_or(0, |p| p.num_params())
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let r = nn::loss(
            &self.params(w)?,
            &self.data.features,
            &self.data.labels,
            &LossSpec::cross_entropy(),
        )?;
        Ok(self.scale * r.total)
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = nn::backward(
            &self.params(w)?,
            &self.data.features,
            &self.data.labels,
            &LossSpec::cross_entropy(),
        )?;
        Ok(g.values().map(|v| self.scale * v).collect())
    }

    fn gradient_pair(&self, w: &[f64], v: &[f64], eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let pattern = nn::activation_pattern(&self.params(w)?, &self.data.features)?;
        let grad = |at: Vec<f64>| -> Result<Vec<f64>> {
            let spec = LossSpec::cross_entropy();
            let (_, g) = nn::backward_in_region(
                &self.params(&at)?,
                &self.data.features,
                &self.data.labels,
                &spec,
                &pattern,
            )?;
            Ok(g.values().map(|x| self.scale * x).collect())
        };
        Ok((grad(shift(w, v, eps))?, grad(shift(w, v, -eps))?))
    }
}

/// `H v ≈ (∇f(w + εv) − ∇f(w − εv)) / 2ε` with `ε = step / ‖v‖`.
///
/// For networks both gradients keep the rectifier pattern of `w`, so the
/// result is the Hessian of the smooth piece at `w`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, w: &[f64], v: &[f64], step: f64) -> Result<Vec<f64>> {
    if w.len() != obj.dim() || v.len() != w.len() {
        return Err(Error::Shape(format!(
            "objective of dimension {}, point {}, direction {}",
            obj.dim(),
            w.len(),
            v.len()
        )));
    }
    let norm = norm_sq(v).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Param("Hessian-vector product along a zero direction".into()));
    }
    let eps = step / norm;
    let (plus, minus) = obj.gradient_pair(w, v, eps)?;
    let out: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite Hessian-vector product".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    /// Rayleigh quotient of the final iterate.
    pub eigenvalue: f64,
    /// `‖Hv − λv‖` at the final iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on Hessian-vector products for the dominant
/// (largest-magnitude) eigenvalue. Converged once
/// `residual < tol · |eigenvalue|`; running out of iterations is reported,
/// not an error.
pub fn top_eigenvalue<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    w: &[f64],
    iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<EigenEstimate> {
    if iters == 0 {
        return Err(Error::Param("power iteration needs at least one iteration".into()));
    }
    let mut v: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    let mut est = EigenEstimate {
        eigenvalue: 0.0,
        residual: f64::INFINITY,
        iterations: 0,
        converged: false,
    };
    for it in 1..=iters {
        let hv = hvp(obj, w, &v, DEFAULT_HVP_STEP)?;
        let eig = dot(&v, &hv);
        let residual = hv
            .iter()
            .zip(&v)
            .map(|(h, x)| (h - eig * x).powi(2))
            .sum::<f64>()
            .sqrt();
        est = EigenEstimate {
            eigenvalue: eig,
            residual,
            iterations: it,
            converged: residual < tol * eig.abs() || residual == 0.0,
        };
        if est.converged {
            break;
        }
        v = hv;
        if normalize(&mut v) == 0.0 {
            break;
        }
    }
    Ok(est)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm_sq(v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    pub std_error: f64,
    pub probes: usize,
}

/// Hutchinson estimator: mean of `vᵀHv` over Rademacher probes. Probes are
/// seeded up front so the result does not depend on thread count.
pub fn hessian_trace<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    w: &[f64],
    probes: usize,
    rng: &mut R,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::Param("trace estimation needs at least one probe".into()));
    }
    let seeds: Vec<u64> = (0..probes).map(|_| rng.random()).collect();
    let samples = seeds
        .par_iter()
        .map(|&s| {
            let mut r = rng::Rng::seed_from_u64(s);
            let v: Vec<f64> = (0..w.len())
                .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            Ok(dot(&v, &hvp(obj, w, &v, DEFAULT_HVP_STEP)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if probes > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        trace: mean,
        std_error,
        probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub top_eigenvalue: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: f64,
    pub trace_std_error: f64,
    pub probes: usize,
}

/// Top eigenvalue and trace of the cross-entropy Hessian of `params` on
/// `data`.
pub fn spectral_report(
    params: &ModelParams,
    data: &Dataset,
    iters: usize,
    tol: f64,
    probes: usize,
    seed: u64,
) -> Result<SpectralReport> {
    let obj = NetObjective::new(params.sizes(), data.clone())?;
    let w = params.to_flat();
    let eig = top_eigenvalue(&obj, &w, iters, tol, &mut rng::stream(seed, Stream::Probe, 0, 0))?;
    let trace = hessian_trace(&obj, &w, probes, &mut rng::stream(seed, Stream::Probe, 1, 0))?;
    Ok(SpectralReport {
        top_eigenvalue: eig.eigenvalue,
        residual: eig.residual,
        iterations: eig.iterations,
        converged: eig.converged,
        trace: trace.trace,
        trace_std_error: trace.std_error,
        probes,
    })
}
