use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::json;

use super::config::{Experiment, ParsedConfig};
use super::model_io::{load_model, save_model};
use crate::data::{Dataset, Federation};
use crate::diagnostics::{spectral_report, SpectralReport};
use crate::engine::{EvalMode, RoundMetrics, Simulation};
use crate::error::{Error, Result};
use crate::regularizers::RegularizerKind;
use crate::rng::{derive_seed, Stream};

pub const CSV_HEADER: &str = "round,test_acc_global,test_acc_allavg,ce_loss,asd_loss,gd,lr,sampled_count";
pub const SWEEP_HEADER: &str = "value,final_acc_mean,final_acc_std,repeats_ok,repeats_failed";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.bin";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub final_acc_global: f64,
    pub final_acc_allavg: f64,
    pub gd_bound: Option<f64>,
    pub spectral: Option<SpectralReport>,
}

fn csv_row(m: &RoundMetrics) -> String {
    let gd = match &m.drift {
        None => String::new(),
        Some(r) => r.gd.map_or_else(|| "inf".to_string(), |g| g.to_string()),
    };
    format!(
        "{},{},{},{},{},{},{},{}",
        m.round,
        m.test_acc_global,
        m.test_acc_allavg,
        m.ce_loss,
        m.asd_loss,
        gd,
        m.lr,
        m.sampled.len()
    )
}

/// Evenly strided subset of at most `n` samples.
pub fn evaluation_split(train: &Dataset, n: usize) -> Dataset {
    if n >= train.len() {
        return train.clone();
    }
    let idx: Vec<usize> = (0..n).map(|i| i * train.len() / n).collect();
    train.subset(&idx)
}

fn spectral_of(exp: &Experiment, params: &crate::nn::ModelParams, train: &Dataset) -> Result<SpectralReport> {
    spectral_report(
        params,
        &evaluation_split(train, exp.spectral_samples),
        exp.spectral_iters,
        exp.spectral_tol,
        exp.spectral_probes,
        exp.run.seed,
    )
}

/// Runs one experiment into `out_dir`: `metrics.csv` is written row by row
/// as rounds finish, then `summary.json` (and `model.bin` when requested).
/// A failed run still leaves its partial CSV and a summary naming the error.
pub fn run_experiment(parsed: &ParsedConfig, out_dir: &Path) -> Result<RunOutcome> {
    let exp = &parsed.experiment;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(METRICS_FILE);
    let summary_path = out_dir.join(SUMMARY_FILE);

    let fed = Federation::build(&exp.data, &exp.run.partition, exp.run.seed)?;
    let train = fed.train.clone();
    let mut sim = Simulation::from_federation(exp.run.clone(), fed)?;

    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    let io_err = |e| Error::io(&csv_path, e);
    csv.write_all(exp.emit_with_prefix("# ", &parsed.defaulted).as_bytes())
        .map_err(io_err)?;
    writeln!(csv, "{CSV_HEADER}").map_err(io_err)?;
    csv.flush().map_err(io_err)?;

    let result = sim.run_with(|m| {
        writeln!(csv, "{}", csv_row(m)).map_err(io_err)?;
        csv.flush().map_err(io_err)
    });
    drop(csv);

    let metrics = match result {
        Ok(m) => m,
        Err(e) => {
            let status = if matches!(e, Error::Divergence { .. }) {
                "diverged"
            } else {
                "failed"
            };
            write_summary(&summary_path, exp, status, Some(&e), &sim, None)?;
            return Err(e);
        }
    };

    let spectral = if exp.spectral {
        Some(spectral_of(exp, &sim.state().global, &train)?)
    } else {
        None
    };
    if exp.save_model {
        save_model(&out_dir.join(MODEL_FILE), &sim.state().global)?;
    }
    write_summary(&summary_path, exp, "ok", None, &sim, spectral.as_ref())?;
    Ok(RunOutcome {
        final_acc_global: sim.state().evaluate(sim.test(), EvalMode::Global)?,
        final_acc_allavg: sim.state().evaluate(sim.test(), EvalMode::AllClientAvg)?,
        gd_bound: sim.dissimilarity_bound().value(),
        spectral,
        metrics,
    })
}

fn write_summary(
    path: &Path,
    exp: &Experiment,
    status: &str,
    err: Option<&Error>,
    sim: &Simulation,
    spectral: Option<&SpectralReport>,
) -> Result<()> {
    let config: serde_json::Map<String, serde_json::Value> = exp
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into()))
        .collect();
    let acc = |mode| sim.state().evaluate(sim.test(), mode).ok();
    let summary = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": exp.run.seed,
        "status": status,
        "error": err.map(|e| e.to_string()),
        "rounds_completed": sim.state().round,
        "final_test_acc_global": acc(EvalMode::Global),
        "final_test_acc_allavg": acc(EvalMode::AllClientAvg),
        "gd_bound": sim.dissimilarity_bound().value(),
        "gd_measurements": sim.dissimilarity_bound().observed(),
        "spectral": spectral,
        "config": config,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Delta,
    Regularizer,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Delta => "delta",
            SweepAxis::Regularizer => "regularizer",
        }
    }

    fn apply(self, exp: &mut Experiment, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Param(format!("sweep value `{value}` is not a valid {what}"));
        match self {
            SweepAxis::Lambda => {
                exp.run.regularizer.lambda = value.parse().map_err(|_| bad("lambda"))?;
            }
            SweepAxis::Delta => {
                exp.run.partition.delta = value.parse().map_err(|_| bad("delta"))?;
            }
            SweepAxis::Regularizer => {
                exp.run.regularizer.kind = value.parse::<RegularizerKind>()?;
            }
        }
        exp.run.validate()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "delta" => Ok(SweepAxis::Delta),
            "regularizer" => Ok(SweepAxis::Regularizer),
            _ => Err(Error::Param(format!(
                "unknown sweep axis `{s}` (expected lambda, delta or regularizer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    /// All-client-average accuracy after the last round, per successful
    /// repeat.
    pub final_accs: Vec<f64>,
    pub final_acc_mean: f64,
    /// Sample standard deviation; 0 with fewer than two repeats.
    pub final_acc_std: f64,
    pub repeats_ok: usize,
    pub repeats_failed: usize,
    pub errors: Vec<String>,
}

/// Seeds of repeat `r`: the configured seeds for `r = 0`, derived ones
/// after that. Identical for every value of the axis.
fn repeat_seeds(exp: &Experiment, r: usize) -> (u64, u64) {
    if r == 0 {
        (exp.run.seed, exp.run.partition.seed)
    } else {
        (
            derive_seed(exp.run.seed, Stream::Repeat, r as u64, 0),
            derive_seed(exp.run.partition.seed, Stream::Repeat, r as u64, 1),
        )
    }
}

/// One run per (value, repeat) under `out_dir/<axis>-<value>/rep<r>/`, then
/// a comparison table in `out_dir/sweep.csv`. Failed cells are counted and
/// the sweep continues.
pub fn sweep(
    parsed: &ParsedConfig,
    axis: SweepAxis,
    values: &[String],
    repeats: usize,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Param("sweep needs at least one value".into()));
    }
    if repeats == 0 {
        return Err(Error::Param("sweep needs at least one repeat".into()));
    }
    for v in values {
        axis.apply(&mut parsed.experiment.clone(), v)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut final_accs = Vec::new();
        let mut errors = Vec::new();
        for r in 0..repeats {
            let mut exp = parsed.experiment.clone();
            (exp.run.seed, exp.run.partition.seed) = repeat_seeds(&parsed.experiment, r);
            axis.apply(&mut exp, value)?;
            let defaulted = parsed
                .defaulted
                .iter()
                .copied()
                .filter(|k| *k != axis.as_str() && *k != "partition_seed")
                .collect();
            let cell = ParsedConfig {
                experiment: exp,
                defaulted,
            };
            let dir = out_dir.join(format!("{axis}-{value}")).join(format!("rep{r}"));
            match run_experiment(&cell, &dir) {
                Ok(o) => final_accs.push(o.final_acc_allavg),
                Err(e) => errors.push(format!("repeat {r}: {e}")),
            }
        }
        let (mean, std) = mean_std(&final_accs);
        rows.push(SweepRow {
            value: value.clone(),
            final_acc_mean: mean,
            final_acc_std: std,
            repeats_ok: final_accs.len(),
            repeats_failed: errors.len(),
            final_accs,
            errors,
        });
    }

    let path = out_dir.join(SWEEP_FILE);
    let mut text = parsed.experiment.emit_with_prefix("# ", &parsed.defaulted);
    text.push_str(&format!("# axis = {axis}\n# repeats = {repeats}\n{SWEEP_HEADER}\n"));
    for row in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.value, row.final_acc_mean, row.final_acc_std, row.repeats_ok, row.repeats_failed
        ));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spectral report of a saved model on the experiment's evaluation split.
pub fn diagnose(parsed: &ParsedConfig, model: &Path) -> Result<SpectralReport> {
    let exp = &parsed.experiment;
    let params = load_model(model)?;
    let fed = Federation::build(&exp.data, &exp.run.partition, exp.run.seed)?;
    if params.input_dim() != fed.dim() || params.output_dim() != fed.num_classes() {
        return Err(Error::Shape(format!(
            "model maps {} → {}, data has {} features and {} classes",
            params.input_dim(),
            params.output_dim(),
            fed.dim(),
            fed.num_classes()
        )));
    }
    spectral_of(exp, &params, &fed.train)
}
