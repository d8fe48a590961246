//! Process-level tests of the `lgd` binary on small configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgd_cli::rundir::{inventory, sha256_file, RunManifest, LOCK, MANIFEST};

const TINY: &str = "\
data.samples_per_class = 60
predictor.epochs = 30
reference.train.epochs = 40
distill.ipc = 3
distill.per_stage = 3
distill.train.max_epochs = 60
distill.train.patience = 10
distill.train.squeeze_epochs = 10
eval.protocol.train.epochs = 40
analysis.redundancy.train.epochs = 40
analysis.probe.epochs = 10
";

fn lgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lgd(args);
    assert!(
        out.status.success(),
        "lgd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data and train-reference into `run`.
fn prepare(config: &Path, run: &Path) {
    ok(&["--config", s(config), "--out", s(run), "gen-data"]);
    ok(&["--config", s(config), "--out", s(run), "train-reference"]);
}

fn manifest(run: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(run.join(MANIFEST)).unwrap()).unwrap()
}

fn json_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = lgd(&["--out", s(&run), "train-reference", "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    let err = json_error(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("gen-data"));
}

#[test]
fn bad_config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "distill.ipcc = 3\n").unwrap();
    assert_eq!(lgd(&["--config", s(&bad), "gen-data"]).status.code(), Some(2));
    fs::write(&bad, "data.std = 0.0\n").unwrap();
    assert_eq!(lgd(&["--config", s(&bad), "gen-data"]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(lgd(&["--config", s(&missing), "gen-data"]).status.code(), Some(2));
    // empty run list
    let out = lgd(&["compare", "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_error(&out)["error"]["code"], 2);
    assert_eq!(lgd(&["distill", "--method", "nonsense"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(LOCK), "123\n").unwrap();
    let out = lgd(&["--out", s(&run), "gen-data", "--json-errors"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json_error(&out)["error"]["kind"], "runtime");
    fs::remove_file(run.join(LOCK)).unwrap();

    let cfg = write_config(dir.path(), "c.toml", "");
    ok(&["--config", s(&cfg), "--out", s(&run), "gen-data"]);
    fs::write(run.join("data/train.csv"), "x0,x1,label\n1.0,oops,0\n").unwrap();
    let out = lgd(&["--out", s(&run), "train-reference"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary: serde_json::Value = serde_json::from_str(&ok(&["--out", s(&a), "gen-data"])).unwrap();
    assert_eq!(summary["train_rows"], 720);
    assert_eq!(summary["test_rows"], 180);
    ok(&["--out", s(&b), "gen-data", "--seed", "99"]);
    for f in ["data/train.csv", "data/test.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn pipeline_manifest_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let run = dir.path().join("run");
    prepare(&cfg, &run);
    let ref_hash = sha256_file(&run.join("models/reference.bin")).unwrap();
    ok(&["--out", s(&run), "train-reference"]);
    assert_eq!(sha256_file(&run.join("models/reference.bin")).unwrap(), ref_hash);

    ok(&["--out", s(&run), "distill"]);
    let m = manifest(&run);
    assert_eq!(m.stages.len(), 5);
    assert_eq!(m.method.as_deref(), Some("lgd"));
    for k in 1..=5 {
        assert!(run.join(format!("distill/models/stage_{k}.bin")).exists());
    }

    let report: serde_json::Value = serde_json::from_str(&ok(&["--out", s(&run), "eval-static"])).unwrap();
    assert_eq!(report["repeats"].as_array().unwrap().len(), 3);
    let seeds: Vec<u64> = report["repeats"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    let one: serde_json::Value =
        serde_json::from_str(&ok(&["--out", s(&run), "eval-static", "--repeats", "1"])).unwrap();
    assert_eq!(one["std"], 0.0);

    ok(&["--out", s(&run), "analyze", "--which", "all"]);
    for f in ["redundancy.csv", "spikes.csv", "dynamics.csv", "real_dynamics.csv", "scatter.csv", "summary.json"] {
        assert!(run.join("analysis").join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("analysis/summary.json")).unwrap()).unwrap();
    for group in ["redundancy", "spikes", "dynamics", "indist"] {
        assert!(!summary[group].is_null(), "{group} missing");
    }
    let matrix = fs::read_to_string(run.join("analysis/redundancy.csv")).unwrap();
    let rows: Vec<&str> = matrix.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').count() == 6));

    let before = manifest(&run).files;
    ok(&["--out", s(&run), "analyze"]);
    let after = manifest(&run);
    assert_eq!(after.files, before);

    // every file on disk is listed with its current hash
    let on_disk = inventory(&run).unwrap();
    assert_eq!(after.files, on_disk);
    for (rel, hash) in &after.files {
        assert_eq!(&sha256_file(&run.join(rel)).unwrap(), hash);
    }
    assert!(!run.join(LOCK).exists());
    assert!(after.config.contains("distill.ipc = 3"));
}

#[test]
fn method_identities_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "distill.stages = 3\n");
    let zero = write_config(
        dir.path(),
        "zero.toml",
        "distill.stages = 3\ndistill.learnability.lambda = 0.0\ndistill.learnability.gamma = 0.0\ndistill.learnability.kappa = 1\n",
    );
    let omega = write_config(dir.path(), "omega.toml", "distill.stages = 3\ndistill.learnability.omega = 0.0\n");
    let base = dir.path().join("base");
    prepare(&cfg, &base);

    let variant = |name: &str, config: &Path, method: &str| -> PathBuf {
        let run = dir.path().join(name);
        fs::create_dir_all(&run).unwrap();
        for sub in ["data", "models"] {
            fs::create_dir_all(run.join(sub)).unwrap();
            for f in fs::read_dir(base.join(sub)).unwrap() {
                let f = f.unwrap().path();
                fs::copy(&f, run.join(sub).join(f.file_name().unwrap())).unwrap();
            }
        }
        ok(&["--config", s(config), "--out", s(&run), "distill", "--method", method]);
        run
    };
    let csv = |run: &Path| fs::read(run.join("distill/distilled.csv")).unwrap();

    let unguided = variant("unguided", &cfg, "unguided");
    let lgd_zero = variant("lgd-zero", &zero, "lgd");
    assert_eq!(csv(&unguided), csv(&lgd_zero));
    let loss_only = variant("loss-only", &cfg, "loss-only");
    let lgd_omega = variant("lgd-omega", &omega, "lgd");
    assert_eq!(csv(&loss_only), csv(&lgd_omega));
    let classifier = variant("classifier", &cfg, "classifier-guidance");
    assert_eq!(manifest(&classifier).method.as_deref(), Some("classifier-guidance"));

    for run in [&unguided, &loss_only] {
        ok(&["--out", s(run), "analyze", "--which", "spikes"]);
    }
    let table = ok(&["compare", s(&unguided), s(&unguided)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    let cols = |l: &str| l.split_whitespace().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(cols(lines[1]), cols(lines[2]));
    ok(&["compare", s(&unguided), s(&loss_only)]);

    // a run on other data is refused
    let other_cfg = write_config(dir.path(), "other.toml", "data.seed = 5\n");
    let other = dir.path().join("other");
    ok(&["--config", s(&other_cfg), "--out", s(&other), "gen-data"]);
    let out = lgd(&["compare", s(&unguided), s(&other), "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(json_error(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("incomparable"));
}

#[test]
fn analyze_without_distill_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let run = dir.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run), "gen-data"]);
    let out = lgd(&["--out", s(&run), "analyze", "--json-errors"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = json_error(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("train-reference") && msg.contains("distill"), "{msg}");
}
