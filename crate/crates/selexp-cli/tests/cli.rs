//! End-to-end tests of the command-line pipeline: every verb, exit codes,
//! idempotent reruns, and manifest digest validation.

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn selexp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selexp"))
}

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let mut cmd = selexp();
    cmd.current_dir(dir).arg("--config").arg(config).args(args);
    cmd.output().expect("spawn selexp")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Deterministic d=4 dataset with a learnable nonlinear rule.
fn write_dataset(path: &Path, n: usize) {
    let mut state = 0x2545F4914F6CDD1Du64;
    let mut next = move || {
        // xorshift into [-1, 1)
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
    };
    let mut csv = String::from("a,b,c,d,label\n");
    for _ in 0..n {
        let x: Vec<f64> = (0..4).map(|_| next() * 2.0).collect();
        let score = x[0] + 0.7 * x[1] - 0.5 * x[2] + 0.8 * x[2] * x[3];
        let label = usize::from(score > 0.0);
        let _ = writeln!(csv, "{:.5},{:.5},{:.5},{:.5},{label}", x[0], x[1], x[2], x[3]);
    }
    std::fs::write(path, csv).unwrap();
}

fn base_config(out_dir: &str, selective: &str) -> String {
    format!(
        r#"
[dataset]
path = "data.csv"
label_column = "label"

[split]
fractions = [0.5, 0.25, 0.25]
seed = 11

[model]
epochs = 60
learning_rate = 0.1

[amortizer]
train_method = "svs-12"
epochs = 200

[metric]
kind = "learned"
epochs = 200

[selective]
{selective}
mc_method = "svs-3"
reference_method = "svs-12"

[evaluate]
reference_method = "exact"
svs_ladder = [1, 2, 3]
ablation_methods = ["svs-2", "ks-16"]
bootstrap_resamples = 50

[output]
dir = "{out_dir}"
"#
    )
}

fn setup(dir: &Path, n_rows: usize) {
    write_dataset(&dir.join("data.csv"), n_rows);
    std::fs::write(
        dir.join("selexp.toml"),
        base_config("out", "alpha = 0.5\nbins = 4"),
    )
    .unwrap();
}

struct NormalizedArtifacts(Vec<(String, Vec<u8>)>);

/// All artifact bytes under a directory, with the manifest's timestamp
/// metadata field normalized away.
fn read_artifacts(dir: &Path) -> NormalizedArtifacts {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(e.path()).unwrap();
            if name == "manifest.json" {
                let mut v: serde_json::Value =
                    serde_json::from_slice(&bytes).expect("manifest json");
                v["metadata"]["generated_unix_ms"] = serde_json::json!(0);
                bytes = serde_json::to_vec(&v).unwrap();
            }
            (name, bytes)
        })
        .collect();
    entries.sort();
    NormalizedArtifacts(entries)
}

#[test]
fn full_pipeline_end_to_end() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    setup(dir, 200);
    let out = dir.join("out");

    // Stage 1: train the model; rerun must be byte-identical.
    let train = run(dir, "selexp.toml", &["train-model"]);
    assert_ok(&train, "train-model");
    assert!(stdout(&train).contains("test accuracy"));
    let model_bytes = std::fs::read(out.join("model.json")).unwrap();
    assert_ok(&run(dir, "selexp.toml", &["train-model"]), "train-model rerun");
    assert_eq!(
        std::fs::read(out.join("model.json")).unwrap(),
        model_bytes,
        "model rerun must be byte-identical"
    );

    // Stage 2: explanation caches. svs-12 on the train split prints the
    // forced inference total rows * (12 * 4 + 1).
    let gen = run(
        dir,
        "selexp.toml",
        &["gen-explanations", "--method", "svs-12", "--split", "train"],
    );
    assert_ok(&gen, "gen svs-12 train");
    assert!(
        stdout(&gen).contains("total inferences: 4900"),
        "expected 100 * 49 inferences, got: {}",
        stdout(&gen)
    );
    for (method, split) in [
        ("svs-3", "cal"),
        ("svs-12", "cal"),
        ("svs-2", "cal"),
        ("ks-16", "cal"),
        ("exact", "test"),
        ("svs-1", "test"),
        ("svs-2", "test"),
        ("svs-3", "test"),
    ] {
        assert_ok(
            &run(
                dir,
                "selexp.toml",
                &["gen-explanations", "--method", method, "--split", split],
            ),
            &format!("gen {method} {split}"),
        );
    }
    // The exact cache on the d=4 test split costs 16 per row.
    let exact_cache = std::fs::read_to_string(out.join("explanations-exact-test.jsonl")).unwrap();
    assert!(exact_cache.lines().all(|l| l.contains("\"inference_cost\":16")));

    // Idempotent rerun: nothing new is written, file unchanged.
    let cache_path = out.join("explanations-svs-12-train.jsonl");
    let cache_bytes = std::fs::read(&cache_path).unwrap();
    let rerun = run(
        dir,
        "selexp.toml",
        &["gen-explanations", "--method", "svs-12", "--split", "train"],
    );
    assert_ok(&rerun, "gen rerun");
    assert!(stdout(&rerun).contains("written=0"));
    assert!(stdout(&rerun).contains("skipped=100"));
    assert_eq!(std::fs::read(&cache_path).unwrap(), cache_bytes);

    // Stage 3 + 4: amortizer and the selective fit.
    assert_ok(&run(dir, "selexp.toml", &["train-amortized"]), "train-amortized");
    let fit = run(dir, "selexp.toml", &["fit-selective"]);
    assert_ok(&fit, "fit-selective");
    assert!(stdout(&fit).contains("alpha=0.5"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["d"], 4);
    assert_eq!(manifest["mc_method"], "svs-3");
    for name in ["model", "amortizer", "metric", "policy", "bins"] {
        assert!(
            manifest["artifacts"][name]["digest"].is_string(),
            "manifest must pin {name}"
        );
    }

    // Stage 5: explanations on the calibration split cover >= alpha.
    let explain = run(dir, "selexp.toml", &["explain", "--split", "cal"]);
    assert_ok(&explain, "explain cal");
    let text = stdout(&explain);
    let covered: f64 = text
        .split("covered fraction ")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| panic!("no covered fraction in: {text}"));
    assert!(covered >= 0.5, "covered fraction {covered} < alpha 0.5");

    // Determinism: rerun produces the identical attribution file.
    let attr_path = out.join("attributions-cal.jsonl");
    let attr_bytes = std::fs::read(&attr_path).unwrap();
    assert_ok(&run(dir, "selexp.toml", &["explain", "--split", "cal"]), "explain rerun");
    assert_eq!(std::fs::read(&attr_path).unwrap(), attr_bytes);

    // Stage 6: every protocol runs and writes a versioned report.
    for protocol in [
        "coverage",
        "recourse",
        "quantiles",
        "perturbation",
        "timeshare",
        "ablation",
    ] {
        let eval = run(dir, "selexp.toml", &["evaluate", "--protocol", protocol]);
        assert_ok(&eval, &format!("evaluate {protocol}"));
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join(format!("report-{protocol}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(report["schema_version"], 1, "protocol {protocol}");
        assert!(out.join(format!("report-{protocol}.csv")).exists());
    }
    let coverage: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report-coverage.json")).unwrap())
            .unwrap();
    let curve_names: Vec<&str> = coverage["curves"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(curve_names.contains(&"oracle"), "curves: {curve_names:?}");

    // Variant fit: inference budget n + 1 derives coverage 0. The recourse
    // method svs-3 costs 13 at d=4.
    std::fs::write(
        dir.join("budget.toml"),
        base_config("out", "n_budget = 14.0\nbins = 4"),
    )
    .unwrap();
    assert_ok(&run(dir, "budget.toml", &["fit-selective"]), "fit budget");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["alpha"], 0.0);

    // Variant fit: a single bin yields a single combination weight.
    std::fs::write(
        dir.join("k1.toml"),
        base_config("out", "alpha = 0.5\nbins = 1"),
    )
    .unwrap();
    assert_ok(&run(dir, "k1.toml", &["fit-selective"]), "fit k=1");
    let bins: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bins.json")).unwrap()).unwrap();
    assert_eq!(bins["bins"]["lambdas"].as_array().unwrap().len(), 1);

    // Variant fit: full coverage means explanation costs are all zero.
    std::fs::write(
        dir.join("alpha1.toml"),
        base_config("out", "alpha = 1.0\nbins = 4"),
    )
    .unwrap();
    assert_ok(&run(dir, "alpha1.toml", &["fit-selective"]), "fit alpha=1");
    let explain = run(dir, "alpha1.toml", &["explain", "--split", "test"]);
    assert_ok(&explain, "explain alpha=1");
    assert!(
        stdout(&explain).contains("mean black-box cost 0.0000"),
        "{}",
        stdout(&explain)
    );

    // Tampering with a pinned artifact aborts with the missing-artifact code.
    let bins_path = out.join("bins.json");
    let mut tampered = std::fs::read_to_string(&bins_path).unwrap();
    tampered.push(' ');
    std::fs::write(&bins_path, tampered).unwrap();
    let broken = run(dir, "alpha1.toml", &["explain", "--split", "test"]);
    assert_eq!(broken.status.code(), Some(3), "stderr: {}", stderr(&broken));
    assert!(stderr(&broken).contains("digest"));
}

#[test]
fn determinism_across_directories() {
    // The same config + seed in two fresh directories produces byte-identical
    // artifacts (manifest timestamp excluded).
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    setup(dir, 120);
    std::fs::write(dir.join("a.toml"), base_config("out_a", "alpha = 0.5\nbins = 3")).unwrap();
    std::fs::write(dir.join("b.toml"), base_config("out_b", "alpha = 0.5\nbins = 3")).unwrap();

    for config in ["a.toml", "b.toml"] {
        assert_ok(&run(dir, config, &["train-model"]), "train");
        for (m, s) in [("svs-12", "train"), ("svs-3", "cal"), ("svs-12", "cal"), ("exact", "test")] {
            assert_ok(
                &run(dir, config, &["gen-explanations", "--method", m, "--split", s]),
                "gen",
            );
        }
        assert_ok(&run(dir, config, &["train-amortized"]), "amortized");
        assert_ok(&run(dir, config, &["fit-selective"]), "fit");
        assert_ok(&run(dir, config, &["explain", "--split", "test"]), "explain");
        assert_ok(
            &run(dir, config, &["evaluate", "--protocol", "coverage"]),
            "evaluate",
        );
    }
    let a = read_artifacts(&dir.join("out_a"));
    let b = read_artifacts(&dir.join("out_b"));
    let names_a: Vec<&String> = a.0.iter().map(|(n, _)| n).collect();
    let names_b: Vec<&String> = b.0.iter().map(|(n, _)| n).collect();
    assert_eq!(names_a, names_b);
    for ((name, bytes_a), (_, bytes_b)) in a.0.iter().zip(&b.0) {
        assert_eq!(bytes_a, bytes_b, "artifact {name} differs between runs");
    }
}

#[test]
fn missing_label_column_is_named() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    write_dataset(&dir.join("data.csv"), 40);
    let config = base_config("out", "alpha = 0.5").replace("label_column = \"label\"", "label_column = \"target\"");
    std::fs::write(dir.join("selexp.toml"), config).unwrap();
    let out = run(dir, "selexp.toml", &["train-model"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("target"),
        "error must name the missing column: {}",
        stderr(&out)
    );
}

#[test]
fn unknown_protocol_lists_valid_ones() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    setup(dir, 40);
    let out = run(dir, "selexp.toml", &["evaluate", "--protocol", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for p in ["coverage", "recourse", "quantiles", "perturbation", "timeshare", "ablation"] {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn missing_artifacts_use_exit_code_three() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    setup(dir, 40);
    let out = run(
        dir,
        "selexp.toml",
        &["gen-explanations", "--method", "svs-2", "--split", "train"],
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("train-model"));
    let out = run(dir, "selexp.toml", &["explain", "--split", "test"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_validation_rejects_alpha_budget_conflict() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    write_dataset(&dir.join("data.csv"), 40);
    std::fs::write(
        dir.join("selexp.toml"),
        base_config("out", "alpha = 0.5\nn_budget = 4.0"),
    )
    .unwrap();
    let out = run(dir, "selexp.toml", &["train-model"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("exactly one"));
}

#[test]
fn lock_file_blocks_concurrent_writers() {
    let temp = tempfile::tempdir().unwrap();
    let dir = temp.path();
    setup(dir, 40);
    std::fs::create_dir_all(dir.join("out")).unwrap();
    std::fs::write(dir.join("out/.lock"), b"held").unwrap();
    let out = run(dir, "selexp.toml", &["train-model"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lock"));
}
