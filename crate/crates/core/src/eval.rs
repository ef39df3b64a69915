//! Class-incremental metrics, parameter accounting and classifier alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSequence};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, Matrix};
use crate::model::{
    apply_head_gradients, local_ce_loss, Gradients, Network, NetworkDims, OptimizerState,
};
use crate::rng::{normal, permutation, stream};

/// Lower-triangular `a[i][j]`: accuracy on task `j` after learning task `i`
/// (both 0-based here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from complete rows; row `i` must hold `i + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    /// Appends the row for the next learned task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i == self.tasks {
            return Err(Error::State("accuracy matrix is already complete".into()));
        }
        if row.len() != i + 1 {
            return Err(Error::Shape(format!(
                "row {} needs {} entries, got {}",
                i + 1,
                i + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidInput(format!(
                "accuracy {bad} outside [0, 1]"
            )));
        }
        self.rows.push(row);
        Ok(())
    }
}

/// `ACC_i` per learned task and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMetrics {
    pub acc: Vec<f64>,
    pub averaged: f64,
}

impl AccMetrics {
    /// `ACC_T`, the accuracy over all tasks after the last one.
    pub fn last(&self) -> f64 {
        *self.acc.last().expect("metrics cover at least one task")
    }
}

pub fn acc_metrics(m: &AccuracyMatrix) -> Result<AccMetrics> {
    if !m.is_complete() || m.tasks == 0 {
        return Err(Error::State(format!(
            "accuracy matrix has {} of {} rows",
            m.rows.len(),
            m.tasks
        )));
    }
    let acc: Vec<f64> = m
        .rows
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let averaged = acc.iter().sum::<f64>() / acc.len() as f64;
    Ok(AccMetrics { acc, averaged })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `data` classified correctly by argmax over every head output.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let (logits, _) = net.forward(&data.x)?;
    let t = logits.transpose();
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|&(k, &y)| argmax(t.row(k)) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Row `i` (0-based) of the accuracy matrix: test accuracy on tasks
/// `0..=upto` with no task masking.
pub fn evaluate(net: &Network, seq: &TaskSequence, upto: usize) -> Result<Vec<f64>> {
    if upto >= seq.tasks.len() {
        return Err(Error::InvalidInput(format!(
            "task {} requested, sequence has {}",
            upto + 1,
            seq.tasks.len()
        )));
    }
    if net.layers.iter().any(|l| l.branch().is_some()) {
        return Err(Error::State("evaluate expects all branches merged".into()));
    }
    seq.tasks[..=upto]
        .iter()
        .map(|task| accuracy(net, &task.test))
        .collect()
}

/// Accuracy of `net` on task `j` after learning task `i`; `j > i` is
/// rejected because the protocol never evaluates unseen tasks.
pub fn evaluate_entry(net: &Network, seq: &TaskSequence, i: usize, j: usize) -> Result<f64> {
    if j > i {
        return Err(Error::InvalidInput(format!(
            "task {} has not been learned after task {}",
            j + 1,
            i + 1
        )));
    }
    let task = seq
        .tasks
        .get(j)
        .ok_or_else(|| Error::InvalidInput(format!("no task {}", j + 1)))?;
    accuracy(net, &task.test)
}

/// Live adapter parameters: `(d_in + d_out) · r` per adapted layer.
pub fn param_count(dims: &[(usize, usize)], r: usize, adapted: &[usize]) -> usize {
    adapted
        .iter()
        .filter_map(|&i| dims.get(i))
        .map(|(d_in, d_out)| (d_in + d_out) * r)
        .sum()
}

/// [`param_count`] for a network shape.
pub fn network_param_count(dims: &NetworkDims, r: usize) -> usize {
    param_count(&dims.layer_shapes(), r, &dims.adapted)
}

pub const COVARIANCE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: Vec<f64>,
    /// Unbiased covariance plus [`COVARIANCE_JITTER`]`·I`.
    pub cov: Matrix,
    pub count: usize,
}

/// Feature statistics keyed by class id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: BTreeMap<usize, ClassStat>,
}

impl ClassStats {
    pub fn merge(&mut self, other: ClassStats) {
        self.classes.extend(other.classes);
    }
}

/// Per-class mean and covariance of the backbone features of `data`.
pub fn collect_stats(net: &Network, data: &Dataset) -> Result<ClassStats> {
    let feats = net.features(&data.x)?;
    stats_from_features(&feats, &data.labels)
}

/// Statistics of feature columns grouped by label.
pub fn stats_from_features(feats: &Matrix, labels: &[usize]) -> Result<ClassStats> {
    if feats.cols() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature columns for {} labels",
            feats.cols(),
            labels.len()
        )));
    }
    let d = feats.rows();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(k);
    }
    let t = feats.transpose();
    let mut classes = BTreeMap::new();
    for (c, idx) in groups {
        let n = idx.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "class {c} has {n} sample(s), covariance needs 2"
            )));
        }
        let mut mean = vec![0.0; d];
        for &k in &idx {
            for (m, x) in mean.iter_mut().zip(t.row(k)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Matrix::zeros(d, d);
        for &k in &idx {
            let centered: Vec<f64> = t.row(k).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for a in 0..d {
                let ca = centered[a];
                for (slot, cb) in cov.row_mut(a)[a..].iter_mut().zip(&centered[a..]) {
                    *slot += ca * cb;
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64 + if a == b { COVARIANCE_JITTER } else { 0.0 };
                cov.row_mut(a)[b] = v;
                cov.row_mut(b)[a] = v;
            }
        }
        classes.insert(
            c,
            ClassStat {
                mean,
                cov,
                count: n,
            },
        );
    }
    Ok(ClassStats { classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Sampled features per class.
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            samples_per_class: 64,
            epochs: 10,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

/// Draws `samples_per_class` features per class from `N(μ_c, Σ_c)`.
/// Columns are grouped by class in ascending class order.
pub fn sample_features(
    stats: &ClassStats,
    per_class: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    let d = stats
        .classes
        .values()
        .next()
        .map(|s| s.mean.len())
        .ok_or_else(|| Error::InvalidInput("no class statistics".into()))?;
    let mut rng = stream(seed, "align/samples");
    let mut cols = Vec::with_capacity(per_class * stats.classes.len());
    let mut labels = Vec::with_capacity(cols.capacity());
    for (&c, st) in &stats.classes {
        let l = cholesky(&st.cov)?;
        for _ in 0..per_class {
            let z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let mut x = st.mean.clone();
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += l.row(i)[..=i]
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            cols.push(x);
            labels.push(c);
        }
    }
    Ok((Matrix::from_columns(d, &cols), labels))
}

/// Retrains the head on sampled features with cross-entropy over every
/// class in `stats`. Backbone weights are not touched.
pub fn align_classifier(
    net: &mut Network,
    stats: &ClassStats,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<()> {
    let seen = match (stats.classes.keys().next(), stats.classes.keys().last()) {
        (Some(_), Some(&hi)) => 0..hi + 1,
        _ => return Err(Error::InvalidInput("no class statistics".into())),
    };
    if seen.end > net.head.classes() {
        return Err(Error::InvalidInput(format!(
            "statistics cover class {}, head has {} outputs",
            seen.end - 1,
            net.head.classes()
        )));
    }
    let (feats, labels) = sample_features(stats, cfg.samples_per_class, seed)?;
    let mut opt = OptimizerState::sgd(cfg.lr);
    let mut order_rng = stream(seed, "align/order");
    for _ in 0..cfg.epochs {
        for batch in permutation(&mut order_rng, labels.len()).chunks(cfg.batch_size.max(1)) {
            let fb = feats.select_columns(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = net.head.logits(&fb);
            let (_, g) = local_ce_loss(&logits, &yb, seen.clone())?;
            let grads = Gradients {
                layers: Vec::new(),
                head_w: g.matmul_t(&fb),
                head_b: g.row_sums(),
            };
            apply_head_gradients(net, &grads, &mut opt)?;
        }
    }
    Ok(())
}
