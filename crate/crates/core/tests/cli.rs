//! End-to-end checks of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_bottleneck::cli::{self, evaluate_predictor, Predictor};
use latent_bottleneck::dataio::{self, InMemorySource};
use latent_bottleneck::metrics::{MetricsReport, REPORT_SCHEMA};
use latent_bottleneck::{Result, Tensor};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_latent-bottleneck");

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.conf")
}

fn bin(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove(cli::OUT_ENV)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Trains the smoke config into `dir` with reduced epochs.
fn train(dir: &Path, extra: &[&str]) -> Output {
    let config = smoke_config();
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--override",
        "epochs=4",
        "--override",
        "curve_timing=false",
    ];
    args.extend_from_slice(extra);
    let o = bin(&args);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", text(&o.stderr));
    o
}

/// Validates `v` against the keywords used by the bundled schemas.
fn validate(v: &Value, schema: &Value, root: &Value, at: &str) -> Vec<String> {
    let mut errs = Vec::new();
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.strip_prefix("#/$defs/").expect("local $defs refs only");
        return validate(v, &root["$defs"][name], root, at);
    }
    if let Some(options) = schema.get("oneOf").and_then(Value::as_array) {
        let ok = options
            .iter()
            .filter(|s| validate(v, s, root, at).is_empty())
            .count();
        if ok != 1 {
            errs.push(format!("{at}: matches {ok} oneOf branches"));
        }
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => panic!("bad type keyword"),
        };
        let matches = |t: &str| match t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "integer" => v.is_u64() || v.is_i64(),
            "number" => v.is_number(),
            "null" => v.is_null(),
            "boolean" => v.is_boolean(),
            other => panic!("unsupported type {other}"),
        };
        if !types.iter().any(|t| matches(t)) {
            errs.push(format!("{at}: expected {types:?}, got {v}"));
        }
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            errs.push(format!("{at}: expected {c}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            errs.push(format!("{at}: {v} not in enum"));
        }
    }
    if let Some(x) = v.as_f64() {
        if schema
            .get("minimum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x < m)
        {
            errs.push(format!("{at}: {x} below minimum"));
        }
        if schema
            .get("maximum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x > m)
        {
            errs.push(format!("{at}: {x} above maximum"));
        }
    }
    if let Some(a) = v.as_array() {
        if schema
            .get("minItems")
            .and_then(Value::as_u64)
            .is_some_and(|m| (a.len() as u64) < m)
        {
            errs.push(format!("{at}: too few items"));
        }
        if let Some(items) = schema.get("items") {
            for (i, x) in a.iter().enumerate() {
                errs.extend(validate(x, items, root, &format!("{at}[{i}]")));
            }
        }
    }
    if let Some(o) = v.as_object() {
        for r in schema
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            if !o.contains_key(r.as_str().unwrap()) {
                errs.push(format!("{at}: missing {r}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, x) in o {
            match props.and_then(|p| p.get(k)) {
                Some(s) => errs.extend(validate(x, s, root, &format!("{at}.{k}"))),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errs.push(format!("{at}: unexpected key {k}"))
                }
                None => {}
            }
        }
    }
    errs
}

fn check_report_schema(path: &Path) {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let errs = validate(&report, &schema, &schema, "$");
    assert!(errs.is_empty(), "{errs:?}");

    // Cross-check with the reference validator when it is installed.
    let script = "import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[2])), json.load(open(sys.argv[1])))";
    let schema_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/metrics_report.schema.json");
    let probe = Command::new("python3")
        .args(["-c", "import jsonschema"])
        .output();
    if probe.is_ok_and(|o| o.status.success()) {
        let o = Command::new("python3")
            .args(["-c", script])
            .arg(&schema_path)
            .arg(path)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
}

#[test]
fn subset_validator_rejects_bad_reports() {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let cm = latent_bottleneck::metrics::ConfusionMatrix::from_counts(
        vec!["a".into(), "b".into()],
        vec![vec![3, 1], vec![0, 4]],
    )
    .unwrap();
    let good =
        serde_json::to_value(MetricsReport::from_confusion(&cm, Some(1), None).unwrap()).unwrap();
    assert!(validate(&good, &schema, &schema, "$").is_empty());
    let mut extra = good.clone();
    extra["surprise"] = Value::from(1);
    assert!(!validate(&extra, &schema, &schema, "$").is_empty());
    let mut out_of_range = good.clone();
    out_of_range["accuracy"] = Value::from(1.5);
    assert!(!validate(&out_of_range, &schema, &schema, "$").is_empty());
    let mut missing = good;
    missing.as_object_mut().unwrap().remove("total");
    assert!(!validate(&missing, &schema, &schema, "$").is_empty());
}

#[test]
fn train_writes_valid_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = train(&a, &[]);
    assert!(
        text(&out.stdout).starts_with("trained 4 epochs"),
        "{}",
        text(&out.stdout)
    );
    for f in [
        "model.ckpt",
        "curves.csv",
        "metrics.json",
        "metrics.csv",
        "config.json",
        "manifest.json",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    check_report_schema(&a.join("metrics.json"));
    let curves = std::fs::read_to_string(a.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 5);
    assert!(curves.starts_with(latent_bottleneck::optim::CURVES_HEADER));

    train(&b, &[]);
    for f in ["curves.csv", "metrics.json", "metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    // sample paths are absolute and so name the output directory
    let manifest = |d: &Path| {
        std::fs::read_to_string(d.join("manifest.json"))
            .unwrap()
            .replace(d.to_str().unwrap(), "<out>")
    };
    assert_eq!(manifest(&a), manifest(&b));
    let ca = latent_bottleneck::checkpoint::load(&a.join("model.ckpt")).unwrap();
    let cb = latent_bottleneck::checkpoint::load(&b.join("model.ckpt")).unwrap();
    assert_eq!(ca.model, cb.model);

    // evaluate on the same data reproduces the training report
    let eval_dir = tmp.path().join("eval");
    let o = bin(&[
        "evaluate",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "--data",
        a.join("synthetic_data").to_str().unwrap(),
        "--kind",
        "custom",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("accuracy"));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(eval_dir.join("metrics.json")).unwrap()
    );

    // evaluating against a dataset with a different class count is a mismatch
    let three = tmp.path().join("three");
    dataio::write_synthetic_dataset(&three, 3, 3, 32, 1).unwrap();
    let o = bin(&[
        "evaluate",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "--data",
        three.to_str().unwrap(),
        "--kind",
        "custom",
        "--taxonomy",
        three.join("taxonomy.txt").to_str().unwrap(),
        "--out",
        tmp.path().join("e3").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stderr));
    let msg = text(&o.stderr);
    assert!(msg.contains("[32, 2]") && msg.contains("[32, 3]"), "{msg}");

    // predict: probabilities sum to one and repeated images print identical lines
    let img = a.join("synthetic_data/class_1/00000.bmp");
    let o = bin(&[
        "predict",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        img.to_str().unwrap(),
        img.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    let probs: Vec<f64> = fields[2]
        .split(' ')
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-5, "{probs:?}"); // six printed decimals
    let exact = cli::predict_image(&ca.model, &img).unwrap();
    assert!((exact.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6);

    // the predicted class agrees with evaluate on a one-image dataset
    let single = tmp.path().join("single");
    std::fs::create_dir_all(single.join("class_1")).unwrap();
    std::fs::create_dir_all(single.join("class_0")).unwrap();
    std::fs::copy(&img, single.join("class_1/only.bmp")).unwrap();
    let o = bin(&[
        "evaluate",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "--data",
        single.to_str().unwrap(),
        "--kind",
        "custom",
        "--all",
        "--out",
        tmp.path().join("e1").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let report =
        latent_bottleneck::metrics::read_report(&tmp.path().join("e1/metrics.json")).unwrap();
    let predicted_col = report.confusion_matrix[1]
        .iter()
        .position(|&c| c == 1)
        .unwrap();
    assert_eq!(report.class_names[predicted_col], fields[1]);

    // one unreadable image is reported while the rest still print
    let o = bin(&[
        "predict",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "/no/such.png",
        img.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stderr).contains("/no/such.png"));
    assert_eq!(text(&o.stdout).lines().count(), 1);
    let o = bin(&[
        "predict",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "/no/such.png",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&[
        "train",
        "--out",
        tmp.path().to_str().unwrap(),
        "--override",
        "data_root=/definitely/not/here",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        text(&o.stderr).contains("/definitely/not/here"),
        "{}",
        text(&o.stderr)
    );
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&[
        "train",
        "--out",
        tmp.path().to_str().unwrap(),
        "--override",
        "epochz=3",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("epochz"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let env_out = tmp.path().join("from_env");
    let o = Command::new(BIN)
        .current_dir(tmp.path())
        .args([
            "train",
            "--config",
            smoke_config().to_str().unwrap(),
            "--override",
            "epochs=1",
        ])
        .env(cli::OUT_ENV, &env_out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(env_out.join("model.ckpt").is_file());
    let entries: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(
        entries,
        vec![std::ffi::OsString::from("from_env")],
        "nothing written outside the output directory"
    );
}

/// Returns fixed predictions that reproduce a given confusion matrix.
struct Rigged {
    names: Vec<String>,
    answers: Vec<usize>,
}

impl Predictor for Rigged {
    fn class_names(&self) -> &[String] {
        &self.names
    }

    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        // images carry their sample index in the first pixel
        Ok(images
            .data()
            .chunks(images.len() / images.shape()[0])
            .map(|px| self.answers[px[0] as usize])
            .collect())
    }
}

#[test]
fn rigged_predictor_reproduces_the_herlev_report() {
    let counts = [[21usize, 2], [3, 66]];
    let (mut images, mut labels, mut answers) = (Vec::new(), Vec::new(), Vec::new());
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                images.push(Tensor::full(vec![2, 2, 3], images.len() as f32));
                labels.push(t);
                answers.push(p);
            }
        }
    }
    let source = InMemorySource { images, labels };
    let rigged = Rigged {
        names: vec!["Normal".into(), "Abnormal".into()],
        answers,
    };
    let (cm, report) = evaluate_predictor(&rigged, &source, 10, None).unwrap();
    assert_eq!(cm.counts, vec![vec![21, 2], vec![3, 66]]);
    assert!((report.accuracy - 0.9457).abs() <= 1e-4);
    assert!((report.cohen_kappa.unwrap() - 0.857).abs() <= 5e-3);
    let s = report.screening.unwrap();
    assert_eq!(s.positive_class, "Abnormal");
    assert!((s.positive_predictive_value - 0.9706).abs() <= 1e-4);
    assert!((s.negative_predictive_value - 0.8750).abs() <= 1e-4);
}

#[test]
fn bench_prints_the_flop_table() {
    let o = bin(&[
        "bench",
        "--m",
        "64,128,256",
        "--n",
        "32",
        "--l",
        "2",
        "--d",
        "32",
        "--heads",
        "4",
        "--runs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next(),
        Some("M,N,L,D,cross_attn_flops,latent_flops,total_flops,wall_ms")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[5] == rows[0][5]));
    for w in rows.windows(2) {
        let ratio = w[1][4] / w[0][4];
        assert!(ratio > 1.9 && ratio < 2.1, "{ratio}");
    }
}

#[test]
fn selftest_passes_and_detects_a_broken_gradient() {
    let o = bin(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stdout));
    assert!(text(&o.stdout).contains("0 failed"));
    let o = bin(&["selftest", "--perturb-grad", "gelu"]);
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<String> = text(&o.stdout)
        .lines()
        .filter(|l| l.starts_with("FAIL"))
        .map(str::to_string)
        .collect();
    assert!(
        failing.iter().any(|l| l.contains("grad:gelu")),
        "{failing:?}"
    );
}

#[test]
fn help_documents_environment_and_exit_codes() {
    let o = bin(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let h = text(&o.stdout);
    assert!(h.contains(cli::OUT_ENV));
    assert!(h.contains("Exit codes"));
    for sub in ["train", "evaluate", "predict", "bench", "selftest"] {
        assert!(h.contains(sub), "{sub}");
    }
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
}
