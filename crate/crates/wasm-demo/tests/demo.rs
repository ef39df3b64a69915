use inflora_wasm_demo::demo::{design_2d, run_stream, thresholds, DEFAULT_CONFIG};
use serde_json::Value;

#[test]
fn thresholds_rise_linearly_to_one() {
    let v: Vec<f64> = serde_json::from_str(&thresholds(0.5, 4).unwrap()).unwrap();
    let expected = [0.625, 0.75, 0.875, 1.0];
    for (a, b) in v.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(thresholds(0.0, 4).is_err());
    assert!(thresholds(0.5, 0).is_err());
}

fn design(old: f64, new: f64, spread: f64, variant: &str) -> Value {
    serde_json::from_str(&design_2d(old, new, spread, 0.9, variant).unwrap()).unwrap()
}

fn dir(v: &Value) -> [f64; 2] {
    [v[0].as_f64().unwrap(), v[1].as_f64().unwrap()]
}

#[test]
fn inflora_direction_is_orthogonal_to_memory() {
    let d = design(10.0, 60.0, 0.2, "InfLoRA");
    let mem = d["memory"].as_array().unwrap();
    assert_eq!(mem.len(), 1);
    let m = dir(&mem[0]);
    let b = dir(&d["b"]);
    assert!((m[0] * b[0] + m[1] * b[1]).abs() < 1e-12);
    assert!((b[0].hypot(b[1]) - 1.0).abs() < 1e-12);
}

#[test]
fn ignoring_memory_reaches_further_into_the_old_task() {
    let inf = design(10.0, 60.0, 0.2, "InfLoRA");
    let nt = design(10.0, 60.0, 0.2, "NtOnly");
    let a = inf["interference"].as_f64().unwrap();
    let b = nt["interference"].as_f64().unwrap();
    assert!(a < b, "InfLoRA {a} vs NtOnly {b}");
    // NtOnly follows the new cloud's long axis.
    let bn = dir(&nt["b"]);
    let (s, c) = 60f64.to_radians().sin_cos();
    assert!((bn[0] * c + bn[1] * s).abs() > 0.95);
}

#[test]
fn unknown_variant_and_bad_spread_are_rejected() {
    assert!(design_2d(0.0, 90.0, 0.2, 0.9, "Nope").is_err());
    assert!(design_2d(0.0, 90.0, -1.0, 0.9, "InfLoRA").is_err());
}

#[test]
fn default_stream_returns_lower_triangular_matrices() {
    let runs: Value = serde_json::from_str(&run_stream(DEFAULT_CONFIG).unwrap()).unwrap();
    let runs = runs.as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for r in runs {
        assert!(r["failure"].is_null());
        let m = r["matrix"].as_array().unwrap();
        assert_eq!(m.len(), 3);
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row.as_array().unwrap().len(), i + 1);
        }
    }
}

#[test]
fn bad_config_reports_the_key() {
    let err = run_stream("[train]\nrank = \"four\"\n").unwrap_err();
    assert!(err.contains("train.rank"), "{err}");
}
