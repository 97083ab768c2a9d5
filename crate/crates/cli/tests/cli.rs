use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tosg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tosg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Toy inputs plus a built dataset under one temp dir.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        let o = tosg(&[
            "synth",
            "--output-dir",
            p(&input),
            "--genes",
            "16",
            "--donors",
            "8",
            "--cells-per-donor",
            "5",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let f = Fixture { dir };
        let o = f.build("data");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn build(&self, out: &str) -> Output {
        self.build_with_ppi(out, &self.path("in/ppi.csv"))
    }

    fn build_with_ppi(&self, out: &str, ppi: &Path) -> Output {
        tosg(&[
            "build",
            "--matrix",
            p(&self.path("in/matrix.npy")),
            "--attributes",
            p(&self.path("in/attributes.csv")),
            "--mapping",
            p(&self.path("in/mapping.csv")),
            "--ppi",
            p(ppi),
            "--text",
            p(&self.path("in/text.csv")),
            "--shard-size",
            "16",
            "--output-dir",
            p(&self.path(out)),
        ])
    }

    fn run(&self, args: &[&str]) -> Output {
        let o = tosg(args);
        assert_eq!(code(&o), 0, "{:?}: {}", args, stderr(&o));
        o
    }

    fn query(&self, out: &str, extra: &[&str]) -> Output {
        let data = self.path("data");
        let out = self.path(out);
        let mut args = vec!["query", "--data-dir", p(&data), "--output-dir", p(&out)];
        args.extend_from_slice(extra);
        tosg(&args)
    }

    fn pretrain(&self, out: &str, epochs: &str) -> Output {
        self.run(&[
            "pretrain",
            "--data-dir",
            p(&self.path("data")),
            "--output-dir",
            p(&self.path(out)),
            "--epochs",
            epochs,
            "--d",
            "4",
            "--d-prime",
            "4",
            "--text-dim",
            "4",
            "--max-samples",
            "6",
            "--seed",
            "3",
        ])
    }

    fn infer(&self, out: &str, cohort: &str, model: &str) -> Output {
        self.run(&[
            "infer-core",
            "--data-dir",
            p(&self.path("data")),
            "--cohort",
            p(&self.path(cohort)),
            "--model",
            p(&self.path(model)),
            "--output-dir",
            p(&self.path(out)),
            "--epochs",
            "5",
            "--text-dim",
            "4",
            "--xi",
            "12",
        ])
    }
}

#[test]
fn build_writes_manifest_and_report() {
    let f = Fixture::new();
    assert!(f.path("data/manifest.json").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("data/validation_report.json")).unwrap()).unwrap();
    assert_eq!(report["ok"], true);
    assert_eq!(report["matrix_rows"], 40);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("data/run_config.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "build");
    assert_eq!(run["config"]["shard_size"], 16);
}

#[test]
fn dangling_ppi_endpoint_is_a_validation_error() {
    let f = Fixture::new();
    let bad = f.path("bad_ppi.csv");
    let mut text = fs::read_to_string(f.path("in/ppi.csv")).unwrap();
    text.push_str("P000,P999\n");
    fs::write(&bad, &text).unwrap();
    let o = f.build_with_ppi("bad", &bad);
    assert_eq!(code(&o), 2);
    let rows = text.lines().count() - 2;
    let needle = format!("row {rows}");
    assert!(stderr(&o).contains(&needle), "{}", stderr(&o));
    assert!(stderr(&o).contains("P999"));
    let report = fs::read_to_string(f.path("bad/validation_report.json")).unwrap();
    assert!(report.contains(&needle) && report.contains("\"ok\": false"));
}

#[test]
fn missing_settings_and_bad_tasks_exit_2() {
    let f = Fixture::new();
    let o = tosg(&["build", "--output-dir", p(&f.path("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mapping"));
    assert_eq!(code(&f.query("q", &["--task", "weather"])), 2);
    assert_eq!(
        code(&f.query("q", &["--task", "cell_type", "--stratified-balancing"])),
        2
    );
    assert_eq!(code(&f.query("q", &["--conditions", "{\"planet\": \"mars\"}"])), 2);
    assert_eq!(code(&f.query("q", &["--conditions", "not json"])), 2);
    assert_eq!(code(&tosg(&["no-such-command"])), 2);
}

#[test]
fn sample_ratio_and_size_are_mutually_exclusive() {
    let f = Fixture::new();
    let o = f.query("q", &["--sample-ratio", "0.5", "--sample-size", "3"]);
    assert_eq!(code(&o), 2);
    // the same conflict arriving through a config file
    let cfg = f.path("both.toml");
    fs::write(&cfg, "sample_ratio = 0.5\nsample_size = 3\n").unwrap();
    let o = f.query("q", &["--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mutually exclusive"));
}

#[test]
fn extract_modes() {
    let f = Fixture::new();
    f.query("inf", &[]);
    assert!(f.path("inf/rows.txt").exists());
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("inf/cohort.json")).unwrap()).unwrap();
    assert_eq!(c["mode"], "inference");
    assert_eq!(c["rows"].as_array().unwrap().len(), 40);
    assert!(c.get("test").is_none());

    f.query(
        "tr",
        &["--extract-mode", "train", "--test-fraction", "0.25", "--cap", "0.3"],
    );
    assert!(f.path("tr/train_rows.txt").exists() && f.path("tr/test_rows.txt").exists());
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("tr/cohort.json")).unwrap()).unwrap();
    assert_eq!(c["mode"], "train");
    let train = c["rows"].as_array().unwrap().len();
    let test = c["test"]["rows"].as_array().unwrap().len();
    assert_eq!(train + test, 40);
    assert!(test > 0 && test <= 12);

    // split of the inference cohort gives the same partition
    f.run(&[
        "split",
        "--data-dir",
        p(&f.path("data")),
        "--cohort",
        p(&f.path("inf/cohort.json")),
        "--output-dir",
        p(&f.path("sp")),
        "--test-fraction",
        "0.25",
        "--cap",
        "0.3",
    ]);
    assert_eq!(
        fs::read(f.path("sp/cohort.json")).unwrap(),
        fs::read(f.path("tr/cohort.json")).unwrap()
    );
}

#[test]
fn empty_result_is_not_an_error() {
    let f = Fixture::new();
    let o = f.query("empty", &["--conditions", "{\"tissue_general\": \"brain\"}"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("empty/cohort.json")).unwrap()).unwrap();
    assert!(c["rows"].as_array().unwrap().is_empty());
}

#[test]
fn balanced_cohort_has_equal_sides_per_stratum() {
    let f = Fixture::new();
    let data = f.path("data");
    let out = f.path("bal");
    f.run(&[
        "balance",
        "--data-dir",
        p(&data),
        "--output-dir",
        p(&out),
        "--tolerance",
        "2",
    ]);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cohort.json")).unwrap()).unwrap();
    let strata = c["strata"].as_array().unwrap();
    assert!(!strata.is_empty());
    for s in strata {
        assert_eq!(
            s["cases"].as_array().unwrap().len(),
            s["controls"].as_array().unwrap().len()
        );
    }
}

#[test]
fn zero_epoch_pretraining_writes_initial_checkpoint() {
    let f = Fixture::new();
    f.pretrain("p0", "0");
    assert!(f.path("p0/model.ckpt").exists());
    let hist = fs::read_to_string(f.path("p0/history.csv")).unwrap();
    assert_eq!(hist.trim(), "epoch,l_total,l_edge,l_deg,auc");
    f.pretrain("p0b", "0");
    assert_eq!(
        fs::read(f.path("p0/model.ckpt")).unwrap(),
        fs::read(f.path("p0b/model.ckpt")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    let cfg = f.path("pre.toml");
    fs::write(&cfg, "max_samples = 4\n[model]\nepochs = 3\nlearning_rate = 0.01\n").unwrap();
    f.run(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&f.path("data")),
        "--output-dir",
        p(&f.path("pc")),
        "--epochs",
        "2",
        "--d",
        "4",
        "--d-prime",
        "4",
        "--text-dim",
        "4",
    ]);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("pc/run_config.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["epochs"], 2);
    assert_eq!(run["config"]["model"]["learning_rate"], 0.01);
    assert_eq!(run["config"]["max_samples"], 4);
    assert_eq!(run["config"]["model"]["mask_ratio"], 0.1);
    assert_eq!(fs::read_to_string(f.path("pc/history.csv")).unwrap().lines().count(), 3);
}

#[test]
fn infer_core_writes_all_exports() {
    let f = Fixture::new();
    f.query("tr", &["--extract-mode", "train"]);
    f.pretrain("pre", "2");
    f.infer("core", "tr/cohort.json", "pre/model.ckpt");
    for name in [
        "core_edges.tsv",
        "core.dot",
        "node_scores.csv",
        "head.ckpt",
        "head_history.csv",
        "summary.json",
    ] {
        assert!(f.path("core").join(name).exists(), "{name}");
    }
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("core/summary.json")).unwrap()).unwrap();
    assert_eq!(s["focus"], "toy disease");
    assert!(s["core_nodes"].as_u64().unwrap() <= 12);
    let tsv = fs::read_to_string(f.path("core/core_edges.tsv")).unwrap();
    assert!(tsv.starts_with("gene1\tgene2\tweight\tflag1\tflag2\n"));
}
