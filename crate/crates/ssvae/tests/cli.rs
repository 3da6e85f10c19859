use std::path::{Path, PathBuf};

use serde_json::{json, Value};

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &str, config: Option<&Path>, out: &Path) -> i32 {
    let mut args = vec![
        "ssvae".to_string(),
        cmd.into(),
        "--out".into(),
        out.display().to_string(),
        "--threads".into(),
        "2".into(),
    ];
    if let Some(c) = config {
        args.push("--config".into());
        args.push(c.display().to_string());
    }
    ssvae::run(args)
}

fn model() -> Value {
    json!({"K": 2, "V": 2, "theta": [0.9, -0.7, 1.1, -0.8, 0.3]})
}

fn small_verify(model: Value) -> Value {
    json!({
        "model": model, "family": {"context_mode": "window", "w": 1, "K": 2},
        "y": [0, 1, 1], "trials": 10, "gaussian_trials": 50, "integral_trials": 3,
        "trend_instances": 4
    })
}

#[test]
fn gen_is_idempotent_and_recorded_in_the_manifest() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "g.json", &json!({"model": model(), "n": 50, "T": 4, "seed": 7}));
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(run("gen", Some(&cfg), &a), 0);
    assert_eq!(run("gen", Some(&cfg), &b), 0);
    let da = std::fs::read(a.join("dataset.json")).unwrap();
    assert_eq!(da, std::fs::read(b.join("dataset.json")).unwrap());
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entry = &manifest["artifacts"][0];
    assert_eq!(entry["path"], "dataset.json");
    assert_eq!(entry["sha256"], ssvae::io::sha256_hex(&da).as_str());
    let ds = ssvae::commands::load_dataset(&a.join("dataset.json")).unwrap();
    assert_eq!((ds.n, ds.horizon, ds.seed), (50, 4, 7));
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let zero = write(d.path(), "z.json", &json!({"model": model(), "n": 0, "T": 2}));
    assert_eq!(run("gen", Some(&zero), &d.path().join("o")), 1);
    assert_eq!(run("gen", None, &d.path().join("o")), 1);
    assert_eq!(ssvae::run(["ssvae", "no-such-command"]), 1);
    assert_eq!(ssvae::run(["ssvae", "gen", "--seed", "x"]), 1);
    let mut sc: Value = json!({
        "K": 2, "V": 2, "theta_star": [0.0, 0.0, 0.0, 0.0, 0.0], "model_radius": 1.0,
        "context_mode": "model-backward", "q_radius": 6.0, "n_grid": [], "T_grid": [2],
        "replicates": 2, "seed": 1
    });
    let empty = write(d.path(), "s.json", &sc);
    assert_eq!(run("scaling", Some(&empty), &d.path().join("s")), 1);
    sc["n_grid"] = json!([16]);
    sc["replicates"] = json!(1);
    sc["starts"] = json!(1);
    sc["oracle_factor"] = json!(1);
    sc["bootstrap"] = json!(10);
    let ok = write(d.path(), "s2.json", &sc);
    assert_eq!(run("scaling", Some(&ok), &d.path().join("s2")), 0);
}

#[test]
fn zero_transition_entry_is_a_violation() {
    let d = tempfile::tempdir().unwrap();
    let bad = json!({"K": 2, "V": 2, "transition": [1.0, 0.0, 0.2, 0.8],
                     "emission": [0.7, 0.3, 0.4, 0.6], "initial": [0.5, 0.5]});
    let cfg = write(d.path(), "v.json", &small_verify(bad));
    let out = d.path().join("v");
    assert_eq!(run("verify-bounds", Some(&cfg), &out), 2);
    let r: Value =
        serde_json::from_slice(&std::fs::read(out.join("bound_report.json")).unwrap()).unwrap();
    let check = &r["result"]["checks"][0];
    assert_eq!(check["name"], "model_positivity");
    assert_eq!(check["verdict"]["verdict"], "violated");
    assert!(check["verdict"]["witness"]
        .as_str()
        .unwrap()
        .contains("transition"));
}

#[test]
fn bound_report_matches_the_schema() {
    let d = tempfile::tempdir().unwrap();
    let schema: Value = serde_json::from_str(include_str!("../schemas/bound_report.schema.json"))
        .unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).unwrap();
    let cfg = write(d.path(), "v.json", &small_verify(model()));
    let out = d.path().join("v");
    assert_eq!(run("verify-bounds", Some(&cfg), &out), 0);
    let r: Value =
        serde_json::from_slice(&std::fs::read(out.join("bound_report.json")).unwrap()).unwrap();
    if let Err(errors) = validator.validate(&r) {
        let msgs: Vec<String> = errors.map(|e| e.to_string()).collect();
        panic!("schema errors: {msgs:?}");
    }
    assert!(r["result"]["model"]["constants"]["kappas"].is_object());
    let csv = std::fs::read_to_string(out.join("bound_slack.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    assert!(csv.lines().nth(1) == Some("suite,trial,ratio"));
}

#[test]
fn fit_writes_results_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let g = write(d.path(), "g.json", &json!({"model": model(), "n": 80, "T": 2, "seed": 3}));
    let data = d.path().join("data");
    assert_eq!(run("gen", Some(&g), &data), 0);
    let cfg = write(
        d.path(),
        "f.json",
        &json!({
            "data": {"dataset": data.join("dataset.json")},
            "K": 2, "model_radius": 3.0,
            "family": {"context_mode": "model-backward", "K": 2},
            "starts": 2, "data_model": model()
        }),
    );
    let out = d.path().join("fit");
    assert_eq!(run("fit", Some(&cfg), &out), 0);
    let r: Value = serde_json::from_slice(&std::fs::read(out.join("fit.json")).unwrap()).unwrap();
    let risk = &r["result"]["risk"];
    let sum = risk["kl_data"].as_f64().unwrap() + risk["kl_post"].as_f64().unwrap();
    assert!((risk["risk"].as_f64().unwrap() - sum).abs() < 1e-8);
    let svg = std::fs::read_to_string(out.join("fit_trace.svg")).unwrap();
    assert!(svg.contains("<polyline"));
    assert_eq!(run("report", None, &out), 0);
    let rep: Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["result"][0]["command"], "fit");
}

#[test]
fn enumeration_cap_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    // Full-prefix kernels at T=12 over 3 symbols need more blocks than the cap.
    let cfg = write(
        d.path(),
        "f.json",
        &json!({
            "data": {"generate": {"model": {"K": 2, "V": 3, "theta": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]}, "n": 10, "T": 12}},
            "K": 2, "family": {"context_mode": "full-prefix", "K": 2}, "starts": 1,
            "enum_cap": 100
        }),
    );
    assert_eq!(run("fit", Some(&cfg), &d.path().join("o")), 1);
}

#[test]
fn shipped_configs_parse() {
    use ssvae::config::{read_json, FitCmdConfig, GenConfig, VerifyConfig};
    use ssvae_core::estimation::{CorollaryConfig, ScalingConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    read_json::<GenConfig>(&dir.join("gen.json")).unwrap();
    read_json::<VerifyConfig>(&dir.join("verify.json")).unwrap();
    read_json::<FitCmdConfig>(&dir.join("fit.json")).unwrap();
    read_json::<ScalingConfig>(&dir.join("scaling.json")).unwrap().validate().unwrap();
    let c = read_json::<CorollaryConfig>(&dir.join("corollary.json")).unwrap();
    c.validate().unwrap();
    assert_eq!(c.theta_star[1], 3f64.ln());
}
