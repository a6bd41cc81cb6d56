use std::process::{Command, Output};

fn wicklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wicklab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn poisson_wick_table_is_the_falling_factorial() {
    let o = wicklab(&["wick", "table", "--noise", "poisson", "--n", "4", "--volume", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n,x^0,x^1,x^2,x^3,x^4");
    assert_eq!(lines[5], "4,0/1,-6/1,11/1,-6/1,1/1");
}

#[test]
fn gauss_table_has_hermite_rows() {
    let o = wicklab(&["wick", "table", "--noise", "gauss", "--n", "2", "--volume", "1/2"]);
    assert_eq!(stdout(&o).lines().nth(3), Some("2,-2/1,0/1,1/1"));
}

#[test]
fn rp_on_a_single_time_slice_is_a_usage_error() {
    let o = wicklab(&["qft", "rp", "--dim", "1", "--level", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reflection symmetry"));
}

#[test]
fn rp_on_an_asymmetric_kernel_is_a_usage_error() {
    let dir = std::env::temp_dir().join(format!("wicklab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.json");
    let built = wicklab(&["qft", "build", "--dim", "1", "--level", "2", "--out", path.to_str().unwrap()]);
    assert_eq!(built.status.code(), Some(0));
    let mut model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let row = model["alpha2"][0].as_array_mut().unwrap();
    row[3] = serde_json::json!(row[3].as_f64().unwrap() + 0.25);
    std::fs::write(&path, model.to_string()).unwrap();
    let o = wicklab(&["qft", "rp", "--model", path.to_str().unwrap()]);
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("symmetr"));
}

#[test]
fn rp_on_the_free_field_passes() {
    let o = wicklab(&["qft", "rp", "--dim", "2", "--level", "1", "--degree", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["min_eigenvalue"].as_f64().unwrap() >= -1e-10);
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(wicklab(&["wick", "table", "--noise", "cauchy", "--n", "2"]).status.code(), Some(2));
    assert_eq!(wicklab(&["wick", "table", "--noise", "gauss", "--n", "2", "--volume", "0"]).status.code(), Some(2));
    assert_eq!(wicklab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn condexp_verify_reports_agreement() {
    let o = wicklab(&["condexp", "verify", "--noise", "poisson", "--exps", "2", "--volumes", "1/4", "--parent", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["agree"], true);
    assert_eq!(v["closed"], serde_json::json!(["0/1", "3/1", "1/1"]));
}

#[test]
fn npoint_matches_across_reference_noises() {
    let values: Vec<f64> = ["gauss", "poisson", "gamma"]
        .iter()
        .map(|n| {
            let o = wicklab(&["qft", "npoint", "--noise", n, "--dim", "1", "--level", "2", "--cells", "0,2"]);
            assert_eq!(o.status.code(), Some(0));
            serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()["cumulant"].as_f64().unwrap()
        })
        .collect();
    assert!((values[0] - values[1]).abs() < 1e-12 && (values[0] - values[2]).abs() < 1e-12);
}

#[test]
fn stirling_and_hermite_emit_json() {
    let o = wicklab(&["combinat", "stirling", "--n", "4", "--kind", "1"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["table"][4], serde_json::json!(["0", "-6", "11", "-6", "1"]));
    let o = wicklab(&["combinat", "stirling", "--kind", "2", "--k", "5", "--l", "3"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["value"], "25");
    let o = wicklab(&["combinat", "hermite", "--n", "3", "--var", "2"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["coefficients"], serde_json::json!(["0/1", "-6/1", "0/1", "1/1"]));
}

#[test]
fn noise_sample_is_reproducible() {
    let args = ["noise", "sample", "--noise", "gamma", "--dim", "2", "--level", "2", "--seed", "3"];
    let a = wicklab(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, wicklab(&args).stdout);
}

#[test]
fn threads_variable_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_wicklab")).env("WICKLAB_THREADS", "zero").args(["wick", "table", "--noise", "gauss", "--n", "1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_wicklab")).env("WICKLAB_THREADS", "2").args(["wick", "table", "--noise", "gauss", "--n", "1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn quick_verify_passes() {
    let o = wicklab(&["verify-all", "--quick"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert!(!names.iter().any(|n| n.starts_with("mc.")));
}
