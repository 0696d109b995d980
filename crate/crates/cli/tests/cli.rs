use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use msdecode::checkpoint::{load_model, Model};
use msdecode::corpus::{half_split, load_corpus};
use msdecode::experiment::derive_seed;

const BASE: &str = r#"
seed = 3
n_splits = 2
r = 2

[gen]
p = 40
l_true = 3
subject_noise_sd = 0.3
voxel_noise_sd = 0.1
class_sep = 1.0
seed = 5
studies = [
    { n_subjects = 6, n_contrasts = 3 },
    { n_subjects = 8, n_contrasts = 4 },
    { n_subjects = 5, n_contrasts = 2 },
]

[unlabeled]
n_samples = 300

[dictionary]
k = 8
epochs = 5
lambda_grid = [1e-3, 1e-2]
min_coverage = 0.5

[baseline]
grid = [1e-2, 1.0]
select_splits = 2

[train]
l = 4
lr = 0.01
max_samples_seen = 2000

[l2]
grid = [1e-3, 1e-1]
"#;

fn msdecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msdecode"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_all(dir: &Path, extra: &[&str]) -> Output {
    let cfg = write_config(dir, BASE);
    let out = dir.join("out");
    let mut args = vec!["run", "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    msdecode(&args)
}

#[test]
fn full_run_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_all(dir.path(), &[]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("consensus vs voxel"), "{stdout}");

    let out = dir.path().join("out");
    let csv = fs::read_to_string(out.join("report/accuracy.csv")).unwrap();
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    // voxel, reduced, multistudy, consensus, two l2 values and the best of them
    let methods: std::collections::BTreeSet<&str> = body.iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(body.len(), methods.len() * 3 * 2, "{methods:?}");
    assert!(methods.contains("voxel") && methods.contains("consensus") && methods.contains("multistudy"));
    for name in ["mston.csv", "ranking.csv", "linkage.csv", "summary.txt"] {
        assert!(out.join("analysis").join(name).exists(), "{name}");
    }
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn saved_models_score_one_row_per_study_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_all(dir.path(), &[]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let out = dir.path().join("out");
    let corpus = load_corpus(&out.join("corpus/manifest.json")).unwrap();
    let csv = fs::read_to_string(out.join("report/accuracy.csv")).unwrap();
    let consensus_rows: Vec<Vec<String>> = csv
        .lines()
        .filter(|l| l.starts_with("consensus,"))
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(consensus_rows.len(), corpus.n_studies() * 2);
    for s in 0..2usize {
        let ckpt = load_model(&out.join(format!("consensus/split_{s:03}.ckpt"))).unwrap();
        assert!(matches!(ckpt.model, Model::Consensus(_)));
        let split = half_split(&corpus, derive_seed(3, "split", s as u64), 0.5).unwrap();
        for study in split.test.studies() {
            let pred = ckpt.model.predict(study.id(), study.data()).unwrap();
            let acc = msdecode::metrics::accuracy(&pred, study.labels()).unwrap();
            let row = consensus_rows
                .iter()
                .find(|r| r[1] == study.id() && r[2] == s.to_string())
                .unwrap();
            assert!((row[3].parse::<f64>().unwrap() - acc).abs() < 1e-9);
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_all(a.path(), &["--threads", "1"]).status.success());
    assert!(run_all(b.path(), &["--threads", "2"]).status.success());
    for name in ["accuracy.csv", "balanced_accuracy.csv"] {
        let fa = fs::read(a.path().join("out/report").join(name)).unwrap();
        let fb = fs::read(b.path().join("out/report").join(name)).unwrap();
        assert_eq!(fa, fb, "{name}");
    }
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("[train]\n", "[train]\nlearning_rate = 0.1\n"));
    let output = msdecode(&["gen", "--config", &cfg]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("learning_rate"));
}

#[test]
fn invalid_values_and_usage_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("l = 4", "l = 20"));
    assert_eq!(msdecode(&["gen", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(msdecode(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("empty");
    let output = msdecode(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));

    let text = BASE.replace("[gen]", "corpus = \"nowhere/manifest.json\"\n[gen_unused]");
    let text = text.split("[gen_unused]").next().unwrap().to_string()
        + "[unlabeled]\npath = \"nowhere/unlabeled.cogmat\"\n";
    let cfg = write_config(dir.path(), &text);
    let output = msdecode(&["fit-baseline", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn divergence_exits_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("lr = 0.01", "lr = 1e300\nbatch_norm = false"));
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["gen", "dict"] {
        assert!(msdecode(&[stage, "--config", &cfg, "--out", out]).status.success());
    }
    let output = msdecode(&["fit", "--config", &cfg, "--out", out]);
    assert_eq!(output.status.code(), Some(4), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stderr).contains("diverged"));
}
