use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fedasd::cli::{self, parse_config, parse_config_str, SweepAxis, CSV_HEADER, METRICS_FILE, SUMMARY_FILE};
use fedasd::Error;

const SMALL: &str = "\
seed = 3
num_clients = 5
participation_rate = 0.6
rounds = 2
local_epochs = 1
batch_size = 10
hidden = 8
samples_per_class = 20
test_samples_per_class = 5
gd_every = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedasd"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn run_writes_one_row_per_round_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    for out in ["a", "b"] {
        let status = bin()
            .args(["run", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    let a = fs::read_to_string(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let b = fs::read_to_string(dir.path().join("b").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    assert!(a.lines().any(|l| l == CSV_HEADER));
    assert!(a.contains("# num_clients = 5"));
    assert!(a.contains("# tau = 2  # default"));
    let rows = data_rows(&a);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,") && rows[1].starts_with("2,"));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a").join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["rounds_completed"], 2);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(workers);
        let status = bin()
            .env(cli::WORKERS_ENV, workers)
            .args(["run", cfg.to_str().unwrap(), "--out"])
            .arg(&out)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        outputs.push(fs::read(out.join(METRICS_FILE)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn divergence_exits_nonzero_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let body = "seed = 3\nnum_clients = 5\nparticipation_rate = 1\nrounds = 20\nregularizer = prox\nmu = 1\nlr = 100\nhidden = 8\nsamples_per_class = 20\ntest_samples_per_class = 5\n";
    let cfg = write_config(dir.path(), "div.cfg", body);
    let out = dir.path().join("out");
    let run = bin()
        .args(["run", cfg.to_str().unwrap(), "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("diverged"));
    let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let rows = data_rows(&csv);
    assert!(!rows.is_empty() && rows.len() < 20);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
    assert_eq!(summary["rounds_completed"], rows.len());
}

#[test]
fn bad_config_exits_with_the_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "seed = 1\nrounds = 3\nparticipation_rate = 0\n");
    let run = bin().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("line 3"));
}

#[test]
fn single_value_sweep_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let parsed = parse_config_str(SMALL).unwrap();
    let single = cli::run_experiment(&parsed, &dir.path().join("single")).unwrap();
    let rows = cli::sweep(&parsed, SweepAxis::Lambda, &["20".into()], 1, &dir.path().join("sweep")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].final_accs, vec![single.final_acc_allavg]);
    let cell = dir
        .path()
        .join("sweep")
        .join("lambda-20")
        .join("rep0")
        .join(METRICS_FILE);
    assert_eq!(
        data_rows(&fs::read_to_string(cell).unwrap()),
        data_rows(&fs::read_to_string(dir.path().join("single").join(METRICS_FILE)).unwrap())
    );
}

#[test]
fn regularizer_ablation_sweep_writes_one_row_per_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("ablation");
    let status = bin()
        .args(["sweep", cfg.to_str().unwrap(), "--axis", "regularizer"])
        .args([
            "--values",
            "none,asd,asd_entropy_only,asd_label_only,sd_uniform",
            "--repeats",
            "2",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let table = fs::read_to_string(out.join(cli::SWEEP_FILE)).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows.len(), 5);
    for (row, kind) in rows
        .iter()
        .zip(["none", "asd", "asd_entropy_only", "asd_label_only", "sd_uniform"])
    {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], kind);
        assert_eq!(&fields[3..], ["2", "0"]);
    }
}

#[test]
fn saved_model_can_be_diagnosed() {
    let dir = tempfile::tempdir().unwrap();
    let mut parsed = parse_config_str(SMALL).unwrap();
    parsed.experiment.save_model = true;
    parsed.experiment.spectral = true;
    parsed.experiment.spectral_probes = 20;
    let out = dir.path().join("run");
    let outcome = cli::run_experiment(&parsed, &out).unwrap();
    let model = out.join(cli::MODEL_FILE);
    let report = cli::diagnose(&parsed, &model).unwrap();
    let during = outcome.spectral.unwrap();
    assert_eq!(report.top_eigenvalue.to_bits(), during.top_eigenvalue.to_bits());
    assert_eq!(report.trace.to_bits(), during.trace.to_bits());

    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    let run = bin()
        .args(["diagnose", cfg.to_str().unwrap(), "--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).contains("trace"));

    let mut other = parse_config_str(SMALL).unwrap();
    other.experiment.data = parse_config_str("num_classes = 4").unwrap().experiment.data;
    assert!(matches!(cli::diagnose(&other, &model), Err(Error::Shape(_))));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let parsed = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        parsed.experiment.run.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 2);
}
