use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netmoments::experiments::blob_image;
use netmoments::plnet::PlNetwork;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

fn netmoments(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netmoments"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = netmoments(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn network_json(net: &PlNetwork) -> Value {
    let layers: Vec<Value> = net
        .layers()
        .iter()
        .zip(net.relu_after())
        .map(|(m, relu)| {
            let w = m.weights();
            json!({
                "rows": w.nrows(),
                "cols": w.ncols(),
                "weights": w.transpose().as_slice(),
                "bias": m.bias().as_slice(),
                "relu": relu,
            })
        })
        .collect();
    Value::Array(layers)
}

fn random_net(seed: u64, widths: &[usize]) -> PlNetwork {
    PlNetwork::random(widths, 2f64.sqrt(), 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(value).unwrap()).unwrap();
    p
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The 64→32→16→4 net and 8×8 blob used by the attack runs.
fn attack_setup(dir: &Path) -> (PathBuf, Vec<f64>, usize) {
    let net = random_net(1, &[64, 32, 16, 4]);
    let image = blob_image(8, 8, 3.0, 4.0, 3f64.sqrt(), 10.0);
    let source = netmoments::attacks::argmax(net.forward(&image).unwrap().as_slice());
    (write(dir, "net.json", &network_json(&net)), image.as_slice().to_vec(), source)
}

#[test]
fn series_error_writes_hashed_rows_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "grid.json", &json!({"mu": [-0.4, 0.6], "sigma": [0.8, 1.4], "rho": [-0.3, 0.5]}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["series-error", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]);
    run_ok(&["series-error", "--config", s(&cfg), "--out", s(&b), "--seed", "5", "--threads", "1"]);
    let first = fs::read(a.join("series_error.csv")).unwrap();
    assert_eq!(first, fs::read(b.join("series_error.csv")).unwrap());
    assert!(!first.contains(&b'\r'));

    let (header, rows) = csv_rows(&a.join("series_error.csv"));
    assert_eq!(header, ["config_hash", "seed", "terms", "rho_bucket", "max_abs_error"]);
    assert_eq!(rows.len(), 2 * 5);
    assert!(rows.iter().all(|r| r[0].len() == 64 && r[0] == rows[0][0] && r[1] == "5"));
    // ρ-major, term counts ascending within each ρ.
    let order: Vec<(&str, &str)> = rows.iter().map(|r| (r[3].as_str(), r[2].as_str())).collect();
    assert_eq!(order[..5], [("-0.3", "1"), ("-0.3", "5"), ("-0.3", "10"), ("-0.3", "20"), ("-0.3", "50")]);
    let errs: Vec<f64> = rows[..5].iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(errs[4] < 1e-8 && errs[0] > errs[4]);
}

#[test]
fn terms_flag_selects_one_term_count_and_changes_the_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "grid.json", &json!({"mu": [0.2], "sigma": [1.0], "rho": [0.1]}));
    run_ok(&["series-error", "--config", s(&cfg), "--out", s(dir.path()), "--terms", "20"]);
    let (_, one) = csv_rows(&dir.path().join("series_error.csv"));
    assert_eq!(one.len(), 1);
    assert_eq!(one[0][2], "20");
    run_ok(&["series-error", "--config", s(&cfg), "--out", s(dir.path())]);
    let (_, all) = csv_rows(&dir.path().join("series_error.csv"));
    assert_ne!(one[0][0], all[0][0]);
}

#[test]
fn tightness_rows_and_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", &json!({"instances": 3, "widths": [4, 6, 2], "samples": 20000}));
    run_ok(&["tightness", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "11"]);
    let (header, rows) = csv_rows(&dir.path().join("tightness.csv"));
    assert_eq!(header[..4], ["config_hash", "seed", "instance", "logit"]);
    assert_eq!(rows.len(), 6);
    let (sh, summary) = csv_rows(&dir.path().join("tightness_summary.csv"));
    assert_eq!(sh, ["config_hash", "seed", "rows", "er_mean", "er_var_new", "er_var_old", "new_beats_old"]);
    assert_eq!(summary[0][2], "6");

    let before = fs::read(dir.path().join("tightness.csv")).unwrap();
    run_ok(&["tightness", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "11"]);
    assert_eq!(before, fs::read(dir.path().join("tightness.csv")).unwrap());
    run_ok(&["tightness", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "12"]);
    assert_ne!(before, fs::read(dir.path().join("tightness.csv")).unwrap());
}

#[test]
fn tightness_rejects_unknown_fields() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "t.json", &json!({"instance": 3}));
    let out = netmoments(&["tightness", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn linearize_reproduces_the_network_at_its_point() {
    let dir = TempDir::new().unwrap();
    let net = random_net(3, &[5, 8, 7, 6, 3]);
    write(dir.path(), "deep.json", &network_json(&net));
    let point = [0.3, -1.0, 0.5, 0.9, -0.2];
    let cfg = write(
        dir.path(),
        "lin.json",
        &json!({"network": "deep.json", "point": point, "layer": 1, "radii": [0.0, 0.5, 2.0], "directions": 20}),
    );
    run_ok(&["linearize", "--config", s(&cfg), "--out", s(dir.path())]);
    let out: Value = serde_json::from_slice(&fs::read(dir.path().join("linearization.json")).unwrap()).unwrap();
    assert_eq!(out["hidden_width"], 7);
    assert_eq!(out["storage"], 7 * 5 + 7 + 3 * 7 + 3);
    let a: Vec<f64> = serde_json::from_value(out["output_at_point"].clone()).unwrap();
    let b: Vec<f64> = serde_json::from_value(out["surrogate_at_point"].clone()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
    }
    assert_eq!(out["network"].as_array().unwrap().len(), 2);
    let (_, rows) = csv_rows(&dir.path().join("discrepancy.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[0][3].parse::<f64>().unwrap() <= 1e-12);
}

#[test]
fn moments_agree_with_their_own_monte_carlo_columns() {
    let dir = TempDir::new().unwrap();
    let net = random_net(4, &[3, 6, 2]);
    let cfg = write(
        dir.path(),
        "m.json",
        &json!({
            "network": network_json(&net),
            "mean": [0.5, -0.3, 1.0],
            "covariance": {"full": [[1.0, 0.3, 0.0], [0.3, 0.8, -0.2], [0.0, -0.2, 0.5]]},
            "mc_samples": 200000,
        }),
    );
    run_ok(&["moments", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "9", "--terms", "50"]);
    let (header, rows) = csv_rows(&dir.path().join("moments.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let f = |name: &str| r[col(name)].parse::<f64>().unwrap();
        assert!((f("mean") - f("mc_mean")).abs() <= 4.0 * f("mc_mean_se"));
        assert!((f("variance") - f("mc_variance")).abs() <= 4.0 * f("mc_variance_se"));
    }
}

#[test]
fn moments_without_sampling_leaves_the_comparison_empty() {
    let dir = TempDir::new().unwrap();
    let net = random_net(5, &[2, 3, 2]);
    let cfg = write(
        dir.path(),
        "m.json",
        &json!({"network": network_json(&net), "mean": [0.0, 0.0], "covariance": {"isotropic": 1.0}}),
    );
    run_ok(&["moments", "--config", s(&cfg), "--out", s(dir.path())]);
    let (header, rows) = csv_rows(&dir.path().join("moments.csv"));
    let k = header.iter().position(|h| h == "mc_mean").unwrap();
    assert!(rows.iter().all(|r| r[k].is_empty()));
}

#[test]
fn targeted_attack_outputs_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (net, image, source) = attack_setup(dir.path());
    let cfg = write(
        dir.path(),
        "attack.json",
        &json!({
            "network": net.file_name().unwrap().to_str().unwrap(),
            "image": image,
            "layer": 1,
            "problem": "targeted",
            "target_class": (source + 1) % 4,
            "settings": {"beta": 2.5},
        }),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["attack", "--config", s(&cfg), "--out", s(&a), "--seed", "3"]);
    run_ok(&["attack", "--config", s(&cfg), "--out", s(&b), "--seed", "3"]);
    for f in ["attack.json", "mu_x.csv", "trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let out: Value = serde_json::from_slice(&fs::read(a.join("attack.json")).unwrap()).unwrap();
    assert_eq!(out["seed"], 3);
    assert_eq!(out["source_class"], source);
    let run = &out["runs"][0];
    assert!(run["result"]["fooling_rate"].as_f64().unwrap() >= 0.9);
    assert_eq!(run["verification"]["samples"], 100);
    let (_, mu) = csv_rows(&a.join("mu_x.csv"));
    assert_eq!(mu.len(), 64);
    let (_, trace) = csv_rows(&a.join("trace.csv"));
    assert_eq!(trace.len(), run["result"]["objective_trace"].as_array().unwrap().len());
}

#[test]
fn sparse_gamma_grid_margins_are_nondecreasing() {
    let dir = TempDir::new().unwrap();
    let (net, image, _) = attack_setup(dir.path());
    let cfg = write(
        dir.path(),
        "attack.json",
        &json!({
            "network": s(&net),
            "image": image,
            "shape": [8, 8],
            "layer": 1,
            "problem": "sparse_smooth",
            "gammas": [0.0, 1.0, 2.0],
            "settings": {"beta": 2.5},
        }),
    );
    run_ok(&["attack", "--config", s(&cfg), "--out", s(dir.path())]);
    let out: Value = serde_json::from_slice(&fs::read(dir.path().join("attack.json")).unwrap()).unwrap();
    let margins: Vec<f64> = out["runs"].as_array().unwrap().iter().map(|r| r["result"]["margin"].as_f64().unwrap()).collect();
    assert_eq!(margins.len(), 3);
    assert!(margins.windows(2).all(|w| w[1] >= w[0]), "{margins:?}");
    let (_, mu) = csv_rows(&dir.path().join("mu_x.csv"));
    assert_eq!(mu.len(), 3 * 64);
    assert_eq!(mu[64][2], "1");
}

#[test]
fn unreachable_goal_exits_with_infeasible_code() {
    let dir = TempDir::new().unwrap();
    let (net, image, source) = attack_setup(dir.path());
    let cfg = write(
        dir.path(),
        "attack.json",
        &json!({
            "network": s(&net),
            "image": image,
            "layer": 1,
            "problem": "targeted",
            "target_class": (source + 1) % 4,
            "settings": {"beta": 0.0, "sigma_max_sq": 1e-3, "sigma_sq_init": 1e-3},
        }),
    );
    let out = netmoments(&["attack", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let diag: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(diag["error"], "infeasible");
    assert!(dir.path().join("attack.json").exists());
}

#[test]
fn invalid_problem_exits_with_code_one() {
    let dir = TempDir::new().unwrap();
    let (net, image, source) = attack_setup(dir.path());
    let cfg = write(
        dir.path(),
        "attack.json",
        &json!({"network": s(&net), "image": image, "layer": 1, "problem": "targeted", "target_class": source}),
    );
    let out = netmoments(&["attack", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(netmoments(&["moments", "--out", s(dir.path())]).status.code(), Some(1));
    assert_eq!(netmoments(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(netmoments(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_counts_clean_predictions() {
    let dir = TempDir::new().unwrap();
    let (net, image, source) = attack_setup(dir.path());
    let zeros = vec![0.0; 64];
    let cfg = write(
        dir.path(),
        "v.json",
        &json!({"network": s(&net), "image": image, "mu_x": zeros, "sigma_sq": 1e-8, "samples": 50}),
    );
    run_ok(&["verify", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "1"]);
    let out: Value = serde_json::from_slice(&fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(out["source_class"], source);
    assert_eq!(out["stats"]["misclassification_rate"], 0.0);
    assert_eq!(out["stats"]["samples"], 50);
}
