//! Synthetic class-incremental task sequences and CSV ingestion.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_rows, Matrix};
use crate::rng::{gaussian_matrix, normal, permutation, stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    /// Independent class means on a sphere of radius `separation`.
    GaussianBlobs,
    /// One shared set of means, rotated by a random orthogonal matrix per task.
    RotatedBlobs,
    /// One shared set of means, coordinates permuted per task.
    PermutedFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub generator: Generator,
    pub separation: f64,
    pub noise: f64,
    /// Classes in the pre-training set; never part of the continual stream.
    pub base_classes: usize,
    pub n_base: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            tasks: 5,
            classes_per_task: 4,
            n_train: 500,
            n_test: 200,
            input_dim: 32,
            generator: Generator::GaussianBlobs,
            separation: 4.0,
            noise: 1.0,
            base_classes: 8,
            n_base: 250,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn total_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("input_dim", self.input_dim),
            ("base_classes", self.base_classes),
            ("n_base", self.n_base),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::InvalidInput("separation must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidInput("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Samples as columns of `x` with one label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub base: Dataset,
    pub base_classes: usize,
    pub total_classes: usize,
}

/// Deterministic task stream for `spec` (seed included).
pub fn gen_task_sequence(spec: &TaskSpec) -> Result<TaskSequence> {
    spec.validate()?;
    let d = spec.input_dim;
    let c = spec.classes_per_task;
    let mut mean_rng = stream(spec.seed, "data/means");

    let base_means: Vec<Vec<f64>> = (0..spec.base_classes)
        .map(|_| sphere_point(&mut mean_rng, d, spec.separation))
        .collect();

    let task_means: Vec<Vec<Vec<f64>>> = match spec.generator {
        Generator::GaussianBlobs => (0..spec.tasks)
            .map(|_| {
                (0..c)
                    .map(|_| sphere_point(&mut mean_rng, d, spec.separation))
                    .collect()
            })
            .collect(),
        Generator::RotatedBlobs => {
            let shared: Vec<Vec<f64>> = (0..c)
                .map(|_| sphere_point(&mut mean_rng, d, spec.separation))
                .collect();
            let mut rot_rng = stream(spec.seed, "data/rotations");
            (0..spec.tasks)
                .map(|_| {
                    let q = orthonormalize_rows(&gaussian_matrix(&mut rot_rng, d, d))?;
                    Ok(shared
                        .iter()
                        .map(|m| q.matmul(&Matrix::from_columns(d, &[m])).column(0))
                        .collect())
                })
                .collect::<Result<_>>()?
        }
        Generator::PermutedFeatures => {
            let shared: Vec<Vec<f64>> = (0..c)
                .map(|_| sphere_point(&mut mean_rng, d, spec.separation))
                .collect();
            let mut perm_rng = stream(spec.seed, "data/permutations");
            (0..spec.tasks)
                .map(|_| {
                    let p = permutation(&mut perm_rng, d);
                    shared
                        .iter()
                        .map(|m| p.iter().map(|&k| m[k]).collect())
                        .collect()
                })
                .collect()
        }
    };

    let mut sample_rng = stream(spec.seed, "data/samples");
    let mut tasks = Vec::with_capacity(spec.tasks);
    for (t, means) in task_means.iter().enumerate() {
        let first = t * c;
        let (train, test) = draw_split(
            &mut sample_rng,
            means,
            first,
            spec.n_train,
            spec.n_test,
            spec.noise,
        );
        tasks.push(Task {
            train,
            test,
            classes: first..first + c,
        });
    }
    let (base, _) = draw_split(&mut sample_rng, &base_means, 0, spec.n_base, 0, spec.noise);
    Ok(TaskSequence {
        tasks,
        base,
        base_classes: spec.base_classes,
        total_classes: spec.total_classes(),
    })
}

fn sphere_point(rng: &mut StreamRng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

fn draw_split(
    rng: &mut StreamRng,
    means: &[Vec<f64>],
    first_label: usize,
    n_train: usize,
    n_test: usize,
    noise: f64,
) -> (Dataset, Dataset) {
    let d = means.first().map_or(0, Vec::len);
    let mut train_cols = Vec::with_capacity(means.len() * n_train);
    let mut test_cols = Vec::with_capacity(means.len() * n_test);
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    for (k, mean) in means.iter().enumerate() {
        for i in 0..n_train + n_test {
            let sample: Vec<f64> = mean.iter().map(|m| m + noise * normal(rng)).collect();
            if i < n_train {
                train_cols.push(sample);
                train_labels.push(first_label + k);
            } else {
                test_cols.push(sample);
                test_labels.push(first_label + k);
            }
        }
    }
    (
        Dataset {
            x: Matrix::from_columns(d, &train_cols),
            labels: train_labels,
        },
        Dataset {
            x: Matrix::from_columns(d, &test_cols),
            labels: test_labels,
        },
    )
}

/// Which CSV columns hold features and which holds the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Feature column names; `None` takes every column except the label.
    pub features: Option<Vec<String>>,
    pub label: String,
}

/// Reads a headered, comma-separated file into a `d × n` dataset. Rows and
/// columns in errors are 1-based data-row and column numbers.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            col: 0,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::InvalidInput(format!("column `{name}` not in header")))
    };
    let label_col = find(&schema.label)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::InvalidInput("no feature columns".into()));
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let mut sample = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let v: f64 = cell(c).parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("`{}` is not a number", cell(c)),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    msg: "non-finite value".into(),
                });
            }
            sample.push(v);
        }
        let label: usize = cell(label_col).parse().map_err(|_| Error::Parse {
            row,
            col: label_col + 1,
            msg: format!("`{}` is not a class id", cell(label_col)),
        })?;
        columns.push(sample);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(Dataset {
        x: Matrix::from_columns(feature_cols.len(), &columns),
        labels,
    })
}
