use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataSource, IdxPaths, SyntheticSpec};
use crate::engine::{RunConfig, Sampling};
use crate::error::{Error, Result};
use crate::regularizers::{RegularizerKind, WeightMode};

/// Everything an experiment file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub run: RunConfig,
    pub data: DataSource,
    pub spectral: bool,
    pub spectral_probes: usize,
    pub spectral_iters: usize,
    pub spectral_tol: f64,
    /// Training samples in the Hessian evaluation split.
    pub spectral_samples: usize,
    pub save_model: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            run: RunConfig::default(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            spectral: false,
            spectral_probes: 100,
            spectral_iters: 100,
            spectral_tol: 1e-4,
            spectral_samples: 500,
            save_model: false,
            out_dir: None,
        }
    }
}

/// A parsed file and the keys it left at their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub experiment: Experiment,
    pub defaulted: Vec<&'static str>,
}

/// Every recognized key, in emission order.
pub const KEYS: &[&str] = &[
    "seed",
    "partition_seed",
    "num_clients",
    "delta",
    "balanced",
    "participation_rate",
    "sampling",
    "rounds",
    "local_epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "regularizer",
    "lambda",
    "tau",
    "mu",
    "weights",
    "hidden",
    "gd_every",
    "data",
    "num_classes",
    "input_dim",
    "samples_per_class",
    "test_samples_per_class",
    "spread",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "spectral",
    "spectral_probes",
    "spectral_iters",
    "spectral_tol",
    "spectral_samples",
    "save_model",
    "out_dir",
];

const SYNTHETIC_KEYS: &[&str] = &[
    "num_classes",
    "input_dim",
    "samples_per_class",
    "test_samples_per_class",
    "spread",
];
const IDX_KEYS: &[&str] = &["train_images", "train_labels", "test_images", "test_labels"];

pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ParsedConfig> {
    let mut entries: Vec<(usize, &'static str, &str)> = Vec::new();
    let mut seen: HashMap<&'static str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let key = *KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Config {
            line,
            msg: format!("unknown key `{key}`"),
        })?;
        if let Some(first) = seen.insert(key, line) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key `{key}` on lines {first} and {line}"),
            });
        }
        entries.push((line, key, value.trim()));
    }

    let mut exp = Experiment::default();
    let is_idx = match entries.iter().find(|e| e.1 == "data") {
        Some(&(line, _, v)) => match v {
            "synthetic" => false,
            "idx" => true,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("`data` must be `synthetic` or `idx`, got `{v}`"),
                })
            }
        },
        None => false,
    };
    let mut synthetic = SyntheticSpec::default();
    let mut idx: [Option<PathBuf>; 4] = Default::default();
    let mut partition_seed = None;

    for &(line, key, value) in &entries {
        let err = |msg: String| Error::Config { line, msg };
        if is_idx && SYNTHETIC_KEYS.contains(&key) {
            return Err(err(format!("`{key}` only applies to `data = synthetic`")));
        }
        if !is_idx && IDX_KEYS.contains(&key) {
            return Err(err(format!("`{key}` needs `data = idx`")));
        }
        let r = &mut exp.run;
        match key {
            "seed" => r.seed = num(key, value).map_err(err)?,
            "partition_seed" => partition_seed = Some(num(key, value).map_err(err)?),
            "num_clients" => r.partition.num_clients = positive(key, value).map_err(err)?,
            "delta" => {
                r.partition.delta = float(key, value).map_err(err)?;
                if !(r.partition.delta > 0.0 && r.partition.delta.is_finite()) {
                    return Err(err(format!("`delta` must be positive, got {value}")));
                }
            }
            "balanced" => {
                r.partition.balanced = boolean(key, value).map_err(err)?;
                if !r.partition.balanced {
                    return Err(err("only balanced partitions are supported".into()));
                }
            }
            "participation_rate" => {
                r.participation_rate = float(key, value).map_err(err)?;
                if !(r.participation_rate > 0.0 && r.participation_rate <= 1.0) {
                    return Err(err(format!("`participation_rate` must be in (0, 1], got {value}")));
                }
            }
            "sampling" => r.sampling = parsed::<Sampling>(key, value).map_err(err)?,
            "rounds" => r.rounds = num(key, value).map_err(err)?,
            "local_epochs" => r.local_epochs = num(key, value).map_err(err)?,
            "batch_size" => r.batch_size = positive(key, value).map_err(err)?,
            "lr" => {
                r.lr = float(key, value).map_err(err)?;
                if !(r.lr > 0.0 && r.lr.is_finite()) {
                    return Err(err(format!("`lr` must be positive, got {value}")));
                }
            }
            "lr_decay" => {
                r.lr_decay = float(key, value).map_err(err)?;
                if !(r.lr_decay > 0.0 && r.lr_decay <= 1.0) {
                    return Err(err(format!("`lr_decay` must be in (0, 1], got {value}")));
                }
            }
            "regularizer" => r.regularizer.kind = parsed::<RegularizerKind>(key, value).map_err(err)?,
            "lambda" => r.regularizer.lambda = non_negative(key, value).map_err(err)?,
            "tau" => {
                r.regularizer.tau = float(key, value).map_err(err)?;
                if !(r.regularizer.tau > 0.0 && r.regularizer.tau.is_finite()) {
                    return Err(err(format!("`tau` must be positive, got {value}")));
                }
            }
            "mu" => r.regularizer.mu = non_negative(key, value).map_err(err)?,
            "weights" => r.regularizer.weights = parsed::<WeightMode>(key, value).map_err(err)?,
            "hidden" => r.hidden = hidden(value).map_err(err)?,
            "gd_every" => r.gd_every = num(key, value).map_err(err)?,
            "data" => {}
            "num_classes" => {
                synthetic.num_classes = num(key, value).map_err(err)?;
                if synthetic.num_classes < 2 {
                    return Err(err(format!("`num_classes` must be at least 2, got {value}")));
                }
            }
            "input_dim" => synthetic.dim = positive(key, value).map_err(err)?,
            "samples_per_class" => synthetic.samples_per_class = positive(key, value).map_err(err)?,
            "test_samples_per_class" => synthetic.test_samples_per_class = positive(key, value).map_err(err)?,
            "spread" => synthetic.spread = non_negative(key, value).map_err(err)?,
            "train_images" => idx[0] = Some(path(key, value).map_err(err)?),
            "train_labels" => idx[1] = Some(path(key, value).map_err(err)?),
            "test_images" => idx[2] = Some(path(key, value).map_err(err)?),
            "test_labels" => idx[3] = Some(path(key, value).map_err(err)?),
            "spectral" => exp.spectral = boolean(key, value).map_err(err)?,
            "spectral_probes" => exp.spectral_probes = positive(key, value).map_err(err)?,
            "spectral_iters" => exp.spectral_iters = positive(key, value).map_err(err)?,
            "spectral_tol" => {
                exp.spectral_tol = float(key, value).map_err(err)?;
                if !(exp.spectral_tol > 0.0) {
                    return Err(err(format!("`spectral_tol` must be positive, got {value}")));
                }
            }
            "spectral_samples" => exp.spectral_samples = positive(key, value).map_err(err)?,
            "save_model" => exp.save_model = boolean(key, value).map_err(err)?,
            "out_dir" => exp.out_dir = Some(path(key, value).map_err(err)?),
            _ => unreachable!("key table and match arms disagree on `{key}`"),
        }
    }

    exp.run.partition.seed = partition_seed.unwrap_or(exp.run.seed);
    exp.data = if is_idx {
        let [Some(train_images), Some(train_labels), Some(test_images), Some(test_labels)] = idx else {
            let missing: Vec<&str> = IDX_KEYS
                .iter()
                .zip(&idx)
                .filter(|(_, p)| p.is_none())
                .map(|(k, _)| *k)
                .collect();
            let line = entries.iter().find(|e| e.1 == "data").map_or(0, |e| e.0);
            return Err(Error::Config {
                line,
                msg: format!("`data = idx` needs {}", missing.join(", ")),
            });
        };
        DataSource::Idx(IdxPaths {
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    } else {
        DataSource::Synthetic(synthetic)
    };
    exp.run.validate().map_err(|e| Error::Config {
        line: 0,
        msg: e.to_string(),
    })?;

    let defaulted = KEYS
        .iter()
        .copied()
        .filter(|k| !seen.contains_key(k) && applies(&exp, k))
        .collect();
    Ok(ParsedConfig {
        experiment: exp,
        defaulted,
    })
}

fn applies(exp: &Experiment, key: &str) -> bool {
    match &exp.data {
        DataSource::Synthetic(_) if IDX_KEYS.contains(&key) => false,
        DataSource::Idx(_) if SYNTHETIC_KEYS.contains(&key) => false,
        _ => key != "out_dir" || exp.out_dir.is_some(),
    }
}

impl Experiment {
    /// `key = value` for every applicable key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.run;
        let mut out = Vec::with_capacity(KEYS.len());
        for &key in KEYS {
            if !applies(self, key) {
                continue;
            }
            let value = match key {
                "seed" => r.seed.to_string(),
                "partition_seed" => r.partition.seed.to_string(),
                "num_clients" => r.partition.num_clients.to_string(),
                "delta" => r.partition.delta.to_string(),
                "balanced" => r.partition.balanced.to_string(),
                "participation_rate" => r.participation_rate.to_string(),
                "sampling" => r.sampling.to_string(),
                "rounds" => r.rounds.to_string(),
                "local_epochs" => r.local_epochs.to_string(),
                "batch_size" => r.batch_size.to_string(),
                "lr" => r.lr.to_string(),
                "lr_decay" => r.lr_decay.to_string(),
                "regularizer" => r.regularizer.kind.to_string(),
                "lambda" => r.regularizer.lambda.to_string(),
                "tau" => r.regularizer.tau.to_string(),
                "mu" => r.regularizer.mu.to_string(),
                "weights" => r.regularizer.weights.to_string(),
                "hidden" if r.hidden.is_empty() => "none".into(),
                "hidden" => r.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                "gd_every" => r.gd_every.to_string(),
                "data" => match self.data {
                    DataSource::Synthetic(_) => "synthetic".into(),
                    DataSource::Idx(_) => "idx".into(),
                },
                "spectral" => self.spectral.to_string(),
                "spectral_probes" => self.spectral_probes.to_string(),
                "spectral_iters" => self.spectral_iters.to_string(),
                "spectral_tol" => self.spectral_tol.to_string(),
                "spectral_samples" => self.spectral_samples.to_string(),
                "save_model" => self.save_model.to_string(),
                "out_dir" => self
                    .out_dir
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                _ => match &self.data {
                    DataSource::Synthetic(s) => match key {
                        "num_classes" => s.num_classes.to_string(),
                        "input_dim" => s.dim.to_string(),
                        "samples_per_class" => s.samples_per_class.to_string(),
                        "test_samples_per_class" => s.test_samples_per_class.to_string(),
                        "spread" => s.spread.to_string(),
                        _ => unreachable!(),
                    },
                    DataSource::Idx(p) => match key {
                        "train_images" => p.train_images.display().to_string(),
                        "train_labels" => p.train_labels.display().to_string(),
                        "test_images" => p.test_images.display().to_string(),
                        "test_labels" => p.test_labels.display().to_string(),
                        _ => unreachable!(),
                    },
                },
            };
            out.push((key, value));
        }
        out
    }

    /// The configuration as an experiment file; parsing it back yields
    /// `self`.
    pub fn emit(&self) -> String {
        self.emit_with_prefix("", &[])
    }

    /// One line per key, each starting with `prefix`; keys in `defaulted`
    /// are marked.
    pub fn emit_with_prefix(&self, prefix: &str, defaulted: &[&str]) -> String {
        let mut s = String::new();
        for (key, value) in self.entries() {
            let _ = write!(s, "{prefix}{key} = {value}");
            if defaulted.contains(&key) {
                s.push_str("  # default");
            }
            s.push('\n');
        }
        s
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a non-negative integer, got `{value}`"))
}

fn positive(key: &str, value: &str) -> std::result::Result<usize, String> {
    match num::<usize>(key, value)? {
        0 => Err(format!("`{key}` must be at least 1")),
        n => Ok(n),
    }
}

fn float(key: &str, value: &str) -> std::result::Result<f64, String> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| !v.is_nan())
        .ok_or_else(|| format!("`{key}` expects a number, got `{value}`"))
}

fn non_negative(key: &str, value: &str) -> std::result::Result<f64, String> {
    let v = float(key, value)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be non-negative, got {value}"))
    }
}

fn boolean(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects `true` or `false`, got `{value}`")),
    }
}

fn parsed<T: FromStr<Err = Error>>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: Error| format!("`{key}`: {e}"))
}

fn path(key: &str, value: &str) -> std::result::Result<PathBuf, String> {
    if value.is_empty() {
        Err(format!("`{key}` expects a path"))
    } else {
        Ok(PathBuf::from(value))
    }
}

fn hidden(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!(
                "`hidden` expects comma-separated positive widths or `none`, got `{value}`"
            )),
        })
        .collect()
}
