//! End-to-end runs: configuration, pre-training, every requested variant
//! over the task stream, evaluation after each task and report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{gen_task_sequence, TaskSequence, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{
    acc_metrics, align_classifier, collect_stats, evaluate, AccMetrics, AccuracyMatrix,
    AlignConfig, ClassStats,
};
use crate::inflora::{ContinualLearner, DesignVariant, TaskReport, TaskTrainConfig};
use crate::model::{pretrain_backbone, Network, NetworkDims, PretrainConfig};

/// Bumped whenever the layout of the report files changes.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Label suffix of the classifier-aligned copy of a variant.
pub const ALIGNED_SUFFIX: &str = "+CA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: TaskSpec,
    pub network: NetworkDims,
    pub pretrain: PretrainConfig,
    pub train: TaskTrainConfig,
    pub variants: Vec<DesignVariant>,
    /// Also report every variant with classifier alignment applied after
    /// each task.
    pub align: bool,
    pub alignment: AlignConfig,
    /// Each seed drives data generation, pre-training and training.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: TaskSpec::default(),
            network: NetworkDims::default(),
            pretrain: PretrainConfig::default(),
            train: TaskTrainConfig::default(),
            variants: DesignVariant::ALL.to_vec(),
            align: false,
            alignment: AlignConfig::default(),
            seeds: vec![1, 2, 3],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and type errors report the offending path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.message()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.network.input != self.data.input_dim {
            return Err(Error::config(
                "network.input",
                format!(
                    "is {}, data.input_dim is {}",
                    self.network.input, self.data.input_dim
                ),
            ));
        }
        if self.pretrain.epochs == 0
            || self.pretrain.batch_size == 0
            || self.pretrain.lr.is_nan()
            || self.pretrain.lr <= 0.0
        {
            return Err(Error::config(
                "pretrain",
                "epochs, batch_size and lr must be positive",
            ));
        }
        if self.alignment.samples_per_class < 2
            || self.alignment.batch_size == 0
            || self.alignment.lr.is_nan()
            || self.alignment.lr <= 0.0
        {
            return Err(Error::config(
                "alignment",
                "samples_per_class must be at least 2, batch_size and lr positive",
            ));
        }
        if self.variants.is_empty() {
            return Err(Error::config(
                "variants",
                "at least one variant is required",
            ));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::config(
                    format!("variants[{i}]"),
                    format!("{v} is listed twice"),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }
}

/// One (variant, seed) pass over the task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    /// Variant name, with [`ALIGNED_SUFFIX`] for aligned copies.
    pub label: String,
    pub variant: DesignVariant,
    pub aligned: bool,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    /// Absent when the run failed before finishing every task.
    pub metrics: Option<AccMetrics>,
    /// Largest live adapter parameter count over the tasks.
    pub expanded_params: usize,
    pub tasks: Vec<TaskReport>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seed: u64,
    pub task: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub runs: Vec<VariantRun>,
    /// Wall-clock data; kept out of `report.json` so that file is
    /// reproducible.
    #[serde(skip)]
    pub timings: Vec<Timing>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.failure.is_some())
    }

    pub fn find(&self, label: &str, seed: u64) -> Option<&VariantRun> {
        self.runs
            .iter()
            .find(|r| r.label == label && r.seed == seed)
    }
}

/// Shared per-seed inputs: the task stream and the frozen backbone.
pub struct SeedSetup {
    pub seed: u64,
    pub seq: TaskSequence,
    pub backbone: Network,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let spec = TaskSpec {
        seed,
        ..cfg.data.clone()
    };
    let seq = gen_task_sequence(&spec)?;
    let backbone = pretrain_backbone(
        &cfg.network,
        &seq.base.x,
        &seq.base.labels,
        seq.base_classes,
        seq.total_classes,
        &cfg.pretrain,
        seed,
    )?;
    Ok(SeedSetup {
        seed,
        seq,
        backbone,
    })
}

/// Runs one variant from the frozen backbone. Returns the unaligned run and,
/// when alignment is on, its aligned copy.
pub fn run_variant(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    variant: DesignVariant,
) -> Vec<VariantRun> {
    let t_total = setup.seq.tasks.len();
    let train = TaskTrainConfig {
        variant,
        seed: setup.seed,
        ..cfg.train.clone()
    };
    let mut plain = VariantRun {
        label: variant.name().to_string(),
        variant,
        aligned: false,
        seed: setup.seed,
        matrix: AccuracyMatrix::new(t_total),
        metrics: None,
        expanded_params: 0,
        tasks: Vec::with_capacity(t_total),
        failure: None,
    };
    let mut aligned = cfg.align.then(|| VariantRun {
        label: format!("{}{ALIGNED_SUFFIX}", variant.name()),
        aligned: true,
        ..plain.clone()
    });

    let outcome = (|| -> Result<()> {
        let mut learner = ContinualLearner::new(setup.backbone.clone(), train, t_total)?;
        let mut stats = ClassStats::default();
        for (i, task) in setup.seq.tasks.iter().enumerate() {
            let report = learner.train_task(task)?;
            plain.expanded_params = plain.expanded_params.max(report.branch_params);
            plain.tasks.push(report);
            plain
                .matrix
                .push_row(evaluate(learner.net(), &setup.seq, i)?)?;
            if let Some(al) = aligned.as_mut() {
                stats.merge(collect_stats(learner.net(), &task.train)?);
                let mut net = learner.net().clone();
                align_classifier(
                    &mut net,
                    &stats,
                    &cfg.alignment,
                    setup.seed ^ (i as u64 + 1),
                )?;
                al.matrix.push_row(evaluate(&net, &setup.seq, i)?)?;
            }
        }
        Ok(())
    })();

    if let Some(al) = aligned.as_mut() {
        al.expanded_params = plain.expanded_params;
        al.tasks = plain.tasks.clone();
    }
    let mut out = vec![plain];
    out.extend(aligned);
    for run in &mut out {
        match &outcome {
            Ok(()) => run.metrics = acc_metrics(&run.matrix).ok(),
            Err(e) => {
                warn!("{} seed {} failed: {e}", run.label, run.seed);
                run.failure = Some(e.to_string());
            }
        }
    }
    out
}

/// Pre-trains once per seed, then runs every variant on every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let setups = map_parallel(&cfg.seeds, |&seed| {
        info!("seed {seed}: generating data and pre-training the backbone");
        prepare_seed(cfg, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, DesignVariant)> = (0..setups.len())
        .flat_map(|s| cfg.variants.iter().map(move |&v| (s, v)))
        .collect();
    let results = map_parallel(&jobs, |&(s, v)| {
        info!("seed {}: running {v}", setups[s].seed);
        run_variant(cfg, &setups[s], v)
    });

    let runs: Vec<VariantRun> = results.into_iter().flatten().collect();
    let timings = runs
        .iter()
        .filter(|r| !r.aligned)
        .flat_map(|r| {
            r.tasks.iter().map(|t| Timing {
                label: r.label.clone(),
                seed: r.seed,
                task: t.task,
                seconds: t.seconds,
            })
        })
        .collect();
    Ok(RunReport {
        format_version: REPORT_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        runs,
        timings,
    })
}

#[cfg(feature = "parallel")]
fn map_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

pub fn results_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "seed",
        "task_learned",
        "task_evaluated",
        "accuracy",
    ])
    .map_err(csv_error)?;
    for run in &report.runs {
        for (i, row) in run.matrix.rows().iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                w.write_record([
                    run.label.clone(),
                    run.seed.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    a.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
    }
    finish_csv(w)
}

pub fn summary_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variant",
        "seed",
        "acc_t",
        "averaged_acc",
        "expanded_params",
    ])
    .map_err(csv_error)?;
    for run in &report.runs {
        let (last, avg) = match &run.metrics {
            Some(m) => (m.last().to_string(), m.averaged.to_string()),
            None => ("failed".to_string(), "failed".to_string()),
        };
        w.write_record([
            run.label.clone(),
            run.seed.to_string(),
            last,
            avg,
            run.expanded_params.to_string(),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `results.csv`, `summary.csv`, `report.json` and `timings.json`
/// into `dir`, each through a temporary file and a rename.
pub fn write_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("results.csv"), results_csv(report)?.as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(report)?.as_bytes())?;
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    let timings = serde_json::to_string_pretty(&report.timings).expect("timings serialise");
    write_atomic(&dir.join("timings.json"), timings.as_bytes())
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hyperparameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Rank,
    Epsilon,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" | "rank" => Ok(SweepParam::Rank),
            "eps" | "epsilon" | "ε" => Ok(SweepParam::Epsilon),
            other => Err(Error::config(
                "param",
                format!("unknown sweep parameter `{other}` (expected r or epsilon)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub variant: String,
    pub seed: u64,
    pub acc_t: Option<f64>,
    pub averaged_acc: Option<f64>,
}

/// Runs the experiment once per distinct value of `param`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    let mut distinct: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if distinct.contains(&v) {
            warn!("sweep value {v} listed more than once; running it once");
        } else {
            distinct.push(v);
        }
    }
    let mut rows = Vec::new();
    for value in distinct {
        let mut run_cfg = cfg.clone();
        match param {
            SweepParam::Rank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(
                        "values",
                        format!("rank {value} is not a positive integer"),
                    ));
                }
                run_cfg.train.rank = value as usize;
            }
            SweepParam::Epsilon => run_cfg.train.epsilon = value,
        }
        let report = run_experiment(&run_cfg)?;
        rows.extend(report.runs.iter().map(|r| SweepRow {
            value,
            variant: r.label.clone(),
            seed: r.seed,
            acc_t: r.metrics.as_ref().map(AccMetrics::last),
            averaged_acc: r.metrics.as_ref().map(|m| m.averaged),
        }));
    }
    Ok(rows)
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let name = match param {
        SweepParam::Rank => "r",
        SweepParam::Epsilon => "epsilon",
    };
    w.write_record([name, "variant", "seed", "acc_t", "averaged_acc"])
        .map_err(csv_error)?;
    let fmt = |x: Option<f64>| x.map_or_else(|| "failed".to_string(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.variant.clone(),
            r.seed.to_string(),
            fmt(r.acc_t),
            fmt(r.averaged_acc),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}
