use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_til"))
}

fn scratch(name: &str, contents: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("til-cli-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

/// Tensor file with every orbit of `[n]^4` set to `value`.
fn constant_tensor_file(n: usize, value: f64) -> String {
    let mut entries = Vec::new();
    for i in 1..=n {
        for j in i..=n {
            for k in j..=n {
                for l in k..=n {
                    entries.push(format!(r#"{{"idx":[{i},{j},{k},{l}],"val":{value:e}}}"#));
                }
            }
        }
    }
    format!(r#"{{"n":{n},"entries":[{}]}}"#, entries.join(","))
}

#[test]
fn gap_of_zero_potential_matches_product_spectrum() {
    let spec = scratch("zero2.json", r#"{"kind":"zero","n":2}"#);
    let v = stdout_json(&run(&["gap", "--potential", spec.to_str().unwrap()]));
    // Uniform measure: kernel eigenvalues 1 - |S|/n over subsets S.
    let eig: Vec<f64> = v["eigenvalues"].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
    for (got, want) in eig.iter().zip([1.0, 0.5, 0.5, 0.0]) {
        assert!((got - want).abs() < 1e-12, "{eig:?}");
    }
    assert!((v["gap"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((v["poincare"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["convention"], "harmonic");

    let k = stdout_json(&run(&["gap", "--potential", spec.to_str().unwrap(), "--convention", "kernel"]));
    assert!((k["poincare"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn gap_output_is_byte_identical_across_runs() {
    let spec = scratch("cw5.json", r#"{"kind":"curie_weiss","n":5,"beta":0.3,"p":4}"#);
    let a = run(&["gap", "--potential", spec.to_str().unwrap()]);
    let b = run(&["gap", "--potential", spec.to_str().unwrap()]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn malformed_input_exits_2_and_names_the_field() {
    let spec = scratch("missing_n.json", r#"{"kind":"zero"}"#);
    let out = run(&["gap", "--potential", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`n`"));

    let t = scratch("bad_tensor.json", r#"{"n":3,"entrys":[]}"#);
    let out = run(&["certify", "--tensor", t.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("entrys"));

    let t = scratch("bad_index.json", r#"{"n":3,"entries":[{"idx":[1,2,3,4],"val":1.0}]}"#);
    let out = run(&["certify", "--tensor", t.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("entries[0].idx"));

    let out = run(&["gap", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dimension_cap_exits_3_and_env_override_lifts_it() {
    let spec = scratch("zero13.json", r#"{"kind":"zero","n":13}"#);
    let out = run(&["gap", "--potential", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let spec = scratch("zero4.json", r#"{"kind":"zero","n":4}"#);
    let out = bin().args(["gap", "--potential", spec.to_str().unwrap()]).env("TIL_MAX_N", "3").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = bin().args(["gap", "--potential", spec.to_str().unwrap()]).env("TIL_MAX_N", "4").output().unwrap();
    assert!(out.status.success());
}

#[test]
fn certify_zero_tensor_gives_one() {
    let t = scratch("t0.json", r#"{"n":3,"entries":[]}"#);
    let v = stdout_json(&run(&["certify", "--tensor", t.to_str().unwrap()]));
    assert_eq!(v["bound"].as_f64(), Some(1.0));
    assert!(v["reason"].is_null());
    assert_eq!(v["breakdown"]["quartic_terms"].as_f64(), Some(320.0));
    assert_eq!(v["breakdown"]["quadratic_terms"].as_f64(), Some(16.0));
}

#[test]
fn certify_scaled_curie_weiss_tensor() {
    // All entries b/n^3: T(x) = (b/n^3)(sum x)^4, maximized on the sphere at
    // x = 1/sqrt(n), so the injective norm is b/n and 336 n inj = 336 b.
    let n = 3;
    let b = 0.5 / 336.0;
    let t = scratch("cw_half.json", &constant_tensor_file(n, b / 27.0));
    let v = stdout_json(&run(&["certify", "--tensor", t.to_str().unwrap()]));
    assert!((v["threshold_336n"].as_f64().unwrap() - 0.5).abs() < 1e-9, "{v}");
    assert!((v["bound"].as_f64().unwrap() - 2.0).abs() < 1e-8, "{v}");
    assert!(v["labels"]["bound"].as_str().unwrap().starts_with("sound"));
    assert!(v["optimistic_bound"].as_f64().unwrap() <= v["bound"].as_f64().unwrap() + 1e-12);

    let t = scratch("cw_two.json", &constant_tensor_file(n, 2.0 / 336.0 / 27.0));
    let v = stdout_json(&run(&["certify", "--tensor", t.to_str().unwrap()]));
    assert!(v["bound"].is_null());
    assert_eq!(v["reason"], "336n*inj >= 1");
}

#[test]
fn decompose_rank_one_input_stops_at_start() {
    let t = scratch("r1.json", r#"{"n":3,"entries":[{"idx":[1,1,1,1],"val":0.001}]}"#);
    let out = run(&["decompose", "--tensor", t.to_str().unwrap(), "--seeds", "3", "--phi", "1@1.2,0.5@3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for l in &lines[..3] {
        assert_eq!(l["component"]["first_stage_tau"].as_f64(), Some(0.0));
        assert_eq!(l["component"]["ledger"]["orthogonality"], true);
    }
    let summary = &lines[3]["summary"];
    assert_eq!(summary["completed"].as_u64(), Some(3));
    assert!(summary["tv_to_target"].as_f64().unwrap() >= 0.0);
    assert!(summary["notes"][0].as_str().unwrap().contains("stopped at start"));
}

#[test]
fn decompose_rejects_bad_phi_and_large_n() {
    let t = scratch("r1b.json", r#"{"n":3,"entries":[{"idx":[1,1,1,1],"val":0.001}]}"#);
    let out = run(&["decompose", "--tensor", t.to_str().unwrap(), "--phi", "1@4"]);
    assert_eq!(out.status.code(), Some(2));
    let t = scratch("big.json", r#"{"n":7,"entries":[]}"#);
    let out = run(&["decompose", "--tensor", t.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn decompose_partial_output_is_line_atomic() {
    // A random PSD instance large enough that the run takes a while; kill it
    // after the first component and check every delivered line parses.
    let t = scratch("dense.json", &constant_tensor_file(4, 1e-5));
    let mut child = bin()
        .args(["decompose", "--tensor", t.to_str().unwrap(), "--seeds", "200", "--threads", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut first = String::new();
    reader.read_line(&mut first).unwrap();
    child.kill().ok();
    child.wait().unwrap();
    let mut rest = String::new();
    std::io::Read::read_to_string(&mut reader, &mut rest).ok();
    let complete: Vec<&str> = std::iter::once(first.as_str()).chain(rest.split_inclusive('\n')).filter(|l| l.ends_with('\n')).collect();
    assert!(!complete.is_empty());
    for line in complete {
        let v: Value = serde_json::from_str(line).expect("complete line is valid JSON");
        assert!(v.get("component").is_some() || v.get("error").is_some() || v.get("summary").is_some());
    }
}

#[test]
fn cw_beta_star_prints_known_threshold() {
    let out = run(&["cw", "--beta-star", "--p", "4"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0.50425");
}

#[test]
fn cw_csv_is_deterministic_and_thread_independent() {
    let args = ["cw", "--n-list", "10,20", "--beta-list", "0.2,0.4", "--seeds", "4", "--seed", "9"];
    let a = run(&[&args[..], &["--threads", "1"]].concat());
    let b = run(&[&args[..], &["--threads", "3"]].concat());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,beta,p,seed,hitting_steps,censored"));
    assert_eq!(lines.count(), 2 * 2 * 4);
}

#[test]
fn cw_sweep_emits_median_grid() {
    let out = run(&["cw", "--n-list", "10,20", "--beta-list", "0.2,0.3", "--seeds", "5", "--sweep"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "n,beta,median,censored,runs");
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        let cols: Vec<&str> = r.split(',').collect();
        assert!(cols[2].parse::<f64>().unwrap() > 0.0);
        assert_eq!(cols[4], "5");
    }
}

#[test]
fn gaussian_sweep_sandwich_and_out_file() {
    let dir = std::env::temp_dir().join(format!("til-cli-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("gauss.json");
    let out = run(&["gaussian-sweep", "--n-list", "4,6", "--seeds", "2", "--format", "json", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let lo = r["inj_lower"].as_f64().unwrap();
        let hi = r["inj_upper"].as_f64().unwrap();
        assert!(lo > 0.0 && lo <= hi + 1e-12);
    }
}

#[test]
fn dobrushin_on_zero_potential_has_no_influence() {
    let spec = scratch("zero3.json", r#"{"kind":"zero","n":3}"#);
    let v = stdout_json(&run(&["dobrushin", "--potential", spec.to_str().unwrap()]));
    assert_eq!(v["influence_norm"].as_f64(), Some(0.0));
    assert_eq!(v["bound"].as_f64(), Some(1.0));
}

#[test]
fn dobrushin_rank_one_ising_matches_closed_form_influence() {
    // H = (x1 + x2)^2 c^2 = 2 c^2 x1 x2 + const: log-odds of x1 is 4 c^2 x2,
    // so A_12 = (1/2)|tanh(2c^2) - tanh(-2c^2)| = tanh(2 c^2).
    let c: f64 = 0.4;
    let spec = scratch("ising2.json", &format!(r#"{{"kind":"rank1_ising","u":[{c},{c}],"v":[0.0,0.0]}}"#));
    let v = stdout_json(&run(&["dobrushin", "--potential", spec.to_str().unwrap()]));
    let want = (2.0 * c * c).tanh();
    assert!((v["influence"][0][1].as_f64().unwrap() - want).abs() < 1e-12, "{v}");
    assert!((v["influence_norm"].as_f64().unwrap() - want).abs() < 1e-12);
}

#[test]
fn csv_format_is_rejected_for_json_only_commands() {
    let spec = scratch("zero2b.json", r#"{"kind":"zero","n":2}"#);
    let out = run(&["gap", "--potential", spec.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
}
