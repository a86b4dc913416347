//! Dense-network forward pass, analytic backward pass for the composite
//! client objective, and plain SGD.

mod loss;
mod params;

pub(crate) use loss::{check_tau, kl_unchecked, softmax_into};
pub use loss::{cross_entropy, cross_entropy_mean, entropy, kl_divergence, softmax_rows, softmax_temp, PROB_FLOOR};
pub use params::{Gradient, Layer, ModelParams};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Distillation term: `Σ_i coeffs[i] · KL(teacher_i ‖ softmax(z_i / tau))`.
///
/// `coeffs` already carry λ, the batch factor and the per-sample weight,
/// none of which depend on the student parameters.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub teacher: &'a Matrix,
    pub coeffs: &'a [f64],
    pub tau: f64,
}

/// Proximal term `(mu / 2) · ‖w − anchor‖²`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ModelParams,
    pub mu: f64,
}

/// Composite objective evaluated on one batch:
/// `ce_weight · mean CE + distillation + proximal`.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub ce_weight: f64,
    pub distill: Option<Distillation<'a>>,
    pub proximal: Option<Proximal<'a>>,
}

impl LossSpec<'_> {
    pub fn cross_entropy() -> Self {
        LossSpec {
            ce_weight: 1.0,
            distill: None,
            proximal: None,
        }
    }
}

impl Default for LossSpec<'_> {
    fn default() -> Self {
        LossSpec::cross_entropy()
    }
}

/// Loss value split into its terms. `ce` is the unweighted batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub distill: f64,
    pub prox: f64,
}

struct Trace {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activation
    /// feeding layer `l`.
    inputs: Vec<Matrix>,
    logits: Matrix,
}

/// Which rectifier units are active for each sample: one `rows × width`
/// 0/1 matrix per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    masks: Vec<Matrix>,
}

impl ActivationPattern {
    pub fn masks(&self) -> &[Matrix] {
        &self.masks
    }
}

fn run_forward(params: &ModelParams, batch: &Matrix, keep: bool, pattern: Option<&ActivationPattern>) -> Result<Trace> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let last = params.layers().len() - 1;
    if let Some(p) = pattern {
        if p.masks.len() != last
            || p.masks
                .iter()
                .zip(params.layers())
                .any(|(m, l)| m.rows() != batch.rows() || m.cols() != l.fan_out())
        {
            return Err(Error::Shape(
                "activation pattern does not match network and batch".into(),
            ));
        }
    }
    let mut inputs = Vec::with_capacity(if keep { last + 1 } else { 0 });
    let mut current = batch.clone();
    for (l, layer) in params.layers().iter().enumerate() {
        let mut z = current.matmul_transposed(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if l < last {
            match pattern {
                Some(p) => z
                    .as_mut_slice()
                    .iter_mut()
                    .zip(p.masks[l].as_slice())
                    .for_each(|(v, m)| *v *= m),
                None => z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        if keep {
            inputs.push(std::mem::replace(&mut current, z));
        } else {
            current = z;
        }
    }
    Ok(Trace {
        inputs,
        logits: current,
    })
}

/// Activation pattern of `params` on `batch`.
pub fn activation_pattern(params: &ModelParams, batch: &Matrix) -> Result<ActivationPattern> {
    let trace = run_forward(params, batch, true, None)?;
    let masks = trace.inputs[1..]
        .iter()
        .map(|a| {
            let mut m = a.clone();
            m.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
            m
        })
        .collect();
    Ok(ActivationPattern { masks })
}

/// Raw logits, one row per sample.
pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<Matrix> {
    Ok(run_forward(params, batch, false, None)?.logits)
}

fn validate(params: &ModelParams, batch: &Matrix, labels: &[usize], spec: &LossSpec) -> Result<()> {
    let n = batch.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Param("empty batch".into()));
    }
    let classes = params.output_dim();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Param(format!("label {y} out of range for {classes} classes")));
    }
    if let Some(d) = &spec.distill {
        check_tau(d.tau)?;
        if d.teacher.rows() != n || d.teacher.cols() != classes || d.coeffs.len() != n {
            return Err(Error::Shape(format!(
                "distillation targets {}x{} with {} weights for a {n}x{classes} batch",
                d.teacher.rows(),
                d.teacher.cols(),
                d.coeffs.len()
            )));
        }
    }
    if let Some(p) = &spec.proximal {
        params.check_same_shape(p.anchor)?;
    }
    Ok(())
}

/// Per-sample loss terms and, optionally, the loss gradient w.r.t. logits.
fn logit_terms(logits: &Matrix, labels: &[usize], spec: &LossSpec, want_grad: bool) -> (LossReport, Option<Matrix>) {
    let (n, classes) = (logits.rows(), logits.cols());
    let inv_n = 1.0 / n as f64;
    let mut report = LossReport::default();
    let mut grad = want_grad.then(|| Matrix::zeros(n, classes));
    let mut probs = vec![0.0; classes];
    let mut student_t = vec![0.0; classes];

    for i in 0..n {
        let z = logits.row(i);
        softmax_into(z, 1.0, &mut probs);
        report.ce += -probs[labels[i]].max(PROB_FLOOR).ln();
        if let Some(g) = grad.as_mut() {
            let row = g.row_mut(i);
            let scale = spec.ce_weight * inv_n;
            for (c, (dst, &p)) in row.iter_mut().zip(&probs).enumerate() {
                let target = if c == labels[i] { 1.0 } else { 0.0 };
                *dst = scale * (p - target);
            }
        }
        if let Some(d) = &spec.distill {
            let coeff = d.coeffs[i];
            if coeff != 0.0 {
                softmax_into(z, d.tau, &mut student_t);
                let teacher = d.teacher.row(i);
                report.distill += coeff * kl_unchecked(teacher, &student_t);
                if let Some(g) = grad.as_mut() {
                    let scale = coeff / d.tau;
                    for ((dst, &s), &t) in g.row_mut(i).iter_mut().zip(&student_t).zip(teacher) {
                        *dst += scale * (s - t);
                    }
                }
            }
        }
    }
    report.ce *= inv_n;
    (report, grad)
}

fn prox_term(params: &ModelParams, spec: &LossSpec) -> f64 {
    spec.proximal.map_or(0.0, |p| {
        let sq: f64 = params
            .values()
            .zip(p.anchor.values())
            .map(|(w, a)| (w - a) * (w - a))
            .sum();
        0.5 * p.mu * sq
    })
}

/// Loss value only.
pub fn loss(params: &ModelParams, batch: &Matrix, labels: &[usize], spec: &LossSpec) -> Result<LossReport> {
    validate(params, batch, labels, spec)?;
    let trace = run_forward(params, batch, false, None)?;
    let (mut report, _) = logit_terms(&trace.logits, labels, spec, false);
    report.prox = prox_term(params, spec);
    report.total = spec.ce_weight * report.ce + report.distill + report.prox;
    Ok(report)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    batch: &Matrix,
    labels: &[usize],
    spec: &LossSpec,
) -> Result<(LossReport, Gradient)> {
    backward_impl(params, batch, labels, spec, None)
}

/// [`backward`] for the network whose rectifiers follow `pattern` instead
/// of their own inputs, i.e. the smooth piece of the loss containing the
/// point `pattern` was taken at.
pub fn backward_in_region(
    params: &ModelParams,
    batch: &Matrix,
    labels: &[usize],
    spec: &LossSpec,
    pattern: &ActivationPattern,
) -> Result<(LossReport, Gradient)> {
    backward_impl(params, batch, labels, spec, Some(pattern))
}

fn backward_impl(
    params: &ModelParams,
    batch: &Matrix,
    labels: &[usize],
    spec: &LossSpec,
    pattern: Option<&ActivationPattern>,
) -> Result<(LossReport, Gradient)> {
    validate(params, batch, labels, spec)?;
    let trace = run_forward(params, batch, true, pattern)?;
    let (mut report, dlogits) = logit_terms(&trace.logits, labels, spec, true);
    report.prox = prox_term(params, spec);
    report.total = spec.ce_weight * report.ce + report.distill + report.prox;

    let mut grad = params.zeros_like();
    let mut delta = dlogits.expect("gradient requested");
    for l in (0..params.layers().len()).rev() {
        let input = &trace.inputs[l];
        let g = &mut grad.layers_mut()[l];
        g.weight = delta.transpose_matmul(input)?;
        for r in 0..delta.rows() {
            for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        if l > 0 {
            let mut prev = delta.matmul(&params.layers()[l].weight)?;
            match pattern {
                Some(p) => prev
                    .as_mut_slice()
                    .iter_mut()
                    .zip(p.masks[l - 1].as_slice())
                    .for_each(|(d, m)| *d *= m),
                // rectifier derivative, evaluated on the post-activation value
                None => {
                    for (d, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            delta = prev;
        }
    }

    if let Some(p) = &spec.proximal {
        for ((g, w), a) in grad.values_mut().zip(params.values()).zip(p.anchor.values()) {
            *g += p.mu * (w - a);
        }
    }
    Ok((report, grad))
}

/// `w ← w − lr · grad`.
pub fn sgd_step(params: &mut ModelParams, grad: &Gradient, lr: f64) -> Result<()> {
    params.axpy(-lr, grad)
}
