//! Plain-Rust implementations behind the browser exports.

use serde::Serialize;

use inflora::experiment::{run_experiment, ExperimentConfig};
use inflora::gpmem::{EpsilonSchedule, GradientMemory, MemoryMode, ReductionRule};
use inflora::inflora::{design_b, DesignVariant};
use inflora::rng::{normal, stream};
use inflora::Matrix;

pub const DEFAULT_CONFIG: &str = r#"seeds = [1]
variants = ["InfLoRA", "NtOnly", "SeqLoRA"]
align = false

[data]
tasks = 3
classes_per_task = 3
n_train = 60
n_test = 40
input_dim = 16
base_classes = 4
n_base = 60

[network]
input = 16
hidden = [32, 32]

[pretrain]
epochs = 5

[train]
rank = 8
epochs = 5
epsilon = 0.5
"#;

const POINTS: usize = 40;

pub fn thresholds(epsilon: f64, tasks: usize) -> Result<String, String> {
    let s = EpsilonSchedule::new(epsilon, tasks).map_err(|e| e.to_string())?;
    let v = (1..=tasks)
        .map(|t| s.threshold(t))
        .collect::<inflora::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&v).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Design2d {
    pub old_points: Vec<[f64; 2]>,
    pub new_points: Vec<[f64; 2]>,
    /// Orthonormal basis of the old-task gradient space.
    pub memory: Vec<[f64; 2]>,
    pub memory_mode: MemoryMode,
    /// The designed direction, or `None` when no direction is left.
    pub b: Option<[f64; 2]>,
    /// `‖B·X_old‖ / ‖X_old‖`: how much the branch can disturb the old task.
    pub interference: Option<f64>,
    /// `‖B·X_new‖ / ‖X_new‖`: how much of the new task the branch can fit.
    pub coverage: Option<f64>,
}

/// Samples an elongated cloud along each angle, folds the old cloud into a
/// fresh 2-D memory with threshold `epsilon` and designs a rank-1 `B` for
/// the new cloud with `variant`.
pub fn design_2d(
    old_angle_deg: f64,
    new_angle_deg: f64,
    spread: f64,
    epsilon: f64,
    variant: &str,
) -> Result<String, String> {
    let variant: DesignVariant = variant.parse().map_err(|e: inflora::Error| e.to_string())?;
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(format!("spread {spread} must be finite and non-negative"));
    }
    let mut rng = stream(7, "demo/points");
    let mut cloud = |deg: f64| {
        let (s, c) = deg.to_radians().sin_cos();
        let pts: Vec<[f64; 2]> = (0..POINTS)
            .map(|_| {
                let along = 3.0 * normal(&mut rng);
                let across = spread * normal(&mut rng);
                [along * c - across * s, along * s + across * c]
            })
            .collect();
        pts
    };
    let old_points = cloud(old_angle_deg);
    let new_points = cloud(new_angle_deg);
    let old = Matrix::from_columns(2, &old_points);
    let new = Matrix::from_columns(2, &new_points);

    let mut mem = GradientMemory::new(2);
    mem.update(&old, epsilon, ReductionRule::Residual)
        .map_err(|e| e.to_string())?;
    let basis = mem.grad_space_basis().map_err(|e| e.to_string())?;
    let memory = (0..basis.cols())
        .map(|j| [basis[(0, j)], basis[(1, j)]])
        .collect();

    let mut brng = stream(7, "demo/design");
    let (b, interference, coverage) = match design_b(&new, &mem, 1, variant, false, &mut brng) {
        Ok(b) => {
            let ratio = |x: &Matrix| {
                let n = x.frobenius_norm();
                if n == 0.0 {
                    0.0
                } else {
                    b.matmul(x).frobenius_norm() / n
                }
            };
            (
                Some([b[(0, 0)], b[(0, 1)]]),
                Some(ratio(&old)),
                Some(ratio(&new)),
            )
        }
        Err(inflora::Error::DegenerateSubspace(_)) => (None, None, None),
        Err(e) => return Err(e.to_string()),
    };
    let out = Design2d {
        old_points,
        new_points,
        memory,
        memory_mode: mem.mode(),
        b,
        interference,
        coverage,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct StreamRun {
    label: String,
    seed: u64,
    matrix: Vec<Vec<f64>>,
    acc_t: Option<f64>,
    averaged: Option<f64>,
    failure: Option<String>,
}

pub fn run_stream(config_toml: &str) -> Result<String, String> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(|e| e.to_string())?;
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let runs: Vec<StreamRun> = report
        .runs
        .into_iter()
        .map(|r| StreamRun {
            acc_t: r.metrics.as_ref().map(|m| m.last()),
            averaged: r.metrics.as_ref().map(|m| m.averaged),
            label: r.label,
            seed: r.seed,
            matrix: r.matrix.rows().to_vec(),
            failure: r.failure,
        })
        .collect();
    serde_json::to_string(&runs).map_err(|e| e.to_string())
}
