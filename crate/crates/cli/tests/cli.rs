use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [3]
variants = ["InfLoRA", "SeqLoRA"]
align = true

[data]
tasks = 2
classes_per_task = 2
n_train = 20
n_test = 10
input_dim = 8
base_classes = 3
n_base = 20

[network]
input = 8
hidden = [12, 12]

[pretrain]
epochs = 2

[train]
rank = 2
epochs = 2
batch_size = 16

[alignment]
samples_per_class = 8
epochs = 2
"#;

fn inflora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inflora"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = inflora(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for name in ["results.csv", "summary.csv", "report.json"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.contains("InfLoRA+CA"));
}

#[test]
fn seeds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = inflora(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "5,6",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("InfLoRA,5,")));
    assert!(summary.lines().any(|l| l.starts_with("InfLoRA,6,")));
    assert!(!summary.lines().any(|l| l.starts_with("InfLoRA,3,")));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nrnak = 4\n");
    let o = inflora(&["run", "--config", &cfg, "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = inflora(&["run", "--config", "/nonexistent/cfg.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_sweep_parameter_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = inflora(&[
        "sweep", "--config", &cfg, "--param", "lr", "--values", "1,2",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_value_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sw");
    let o = inflora(&[
        "sweep",
        "--config",
        &cfg,
        "--param",
        "r",
        "--values",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    // Header plus 2 values x 2 variants x 2 alignment states x 1 seed.
    assert_eq!(table.lines().count(), 1 + 8, "{table}");
}

#[test]
fn check_passes_and_fault_is_caught() {
    let o = inflora(&["check"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));

    let o = inflora(&["check", "--fault", "skip-projection"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(1));
    assert!(text
        .lines()
        .any(|l| l.starts_with("FAIL") && l.contains("old_task_orthogonality")));
}

#[test]
fn checkpoint_save_then_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ck = dir.path().join("state.ifl");
    let ck = ck.to_str().unwrap();
    let o = inflora(&["ckpt", "save", ck, "--config", &cfg]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = inflora(&["ckpt", "load", ck]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("round-trip: identical"), "{text}");
    assert!(text.contains("class statistics for 4 classes"), "{text}");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ck = dir.path().join("state.ifl");
    let o = inflora(&["ckpt", "save", ck.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = inflora(&["ckpt", "load", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset"));
}
