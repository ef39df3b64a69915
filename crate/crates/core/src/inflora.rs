//! Interference-free low-rank adaptation.
//!
//! Before each task, every adapted layer gets a fresh branch `A_t B_t`. The
//! rows of `B_t` are the top principal directions of the task's layer inputs
//! after removing what the gradient memory already holds, so a step on `A_t`
//! only moves the layer inside directions that carry no old-task gradient.
//! After the task the branch is merged into the frozen weight and the memory
//! absorbs the task's inputs.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::gpmem::{significant_rank, EpsilonSchedule, GradientMemory, ReductionRule};
use crate::linalg::{orthonormalize_rows, svd, Matrix};
use crate::model::{
    apply_gradients, local_ce_loss, GradMode, Network, OptimizerKind, OptimizerSpec, OptimizerState,
};
use crate::rng::{gaussian_matrix, permutation, stream, StreamRng};

/// How `B_t` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DesignVariant {
    /// Principal directions of the inputs projected off the old-task
    /// gradient space.
    InfLoRA,
    /// Principal directions of the raw inputs, memory ignored.
    NtOnly,
    /// Principal directions of a Gaussian matrix projected off the old-task
    /// gradient space; the task's inputs are ignored.
    MperpOnly,
    /// Gaussian rows, drawn per task.
    RandomB,
    /// One Gaussian `B` drawn at the first task and reused for every task.
    SeqLoRA,
}

impl DesignVariant {
    pub const ALL: [DesignVariant; 5] = [
        DesignVariant::InfLoRA,
        DesignVariant::NtOnly,
        DesignVariant::MperpOnly,
        DesignVariant::RandomB,
        DesignVariant::SeqLoRA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignVariant::InfLoRA => "InfLoRA",
            DesignVariant::NtOnly => "NtOnly",
            DesignVariant::MperpOnly => "MperpOnly",
            DesignVariant::RandomB => "RandomB",
            DesignVariant::SeqLoRA => "SeqLoRA",
        }
    }
}

impl fmt::Display for DesignVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DesignVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy over the current task's classes.
    #[default]
    Local,
    /// Cross-entropy over every class seen so far.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskTrainConfig {
    pub rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Learning rate for the classifier head; `None` uses the optimizer's.
    pub head_lr: Option<f64>,
    /// Base of the `ε_th` schedule.
    pub epsilon: f64,
    pub variant: DesignVariant,
    pub seed: u64,
    /// Layer-input samples used for `B_t` design and memory updates.
    pub sample_size: usize,
    pub reduction_rule: ReductionRule,
    /// Keep Gaussian `B` rows as drawn instead of orthonormalising them.
    pub raw_random_b: bool,
    pub loss: LossKind,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        TaskTrainConfig {
            rank: 32,
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Adam,
                lr: 3e-3,
            },
            head_lr: Some(1e-3),
            epsilon: 0.6,
            variant: DesignVariant::InfLoRA,
            seed: 0,
            sample_size: 512,
            reduction_rule: ReductionRule::Residual,
            raw_random_b: false,
            loss: LossKind::Local,
        }
    }
}

impl TaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("train.rank", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.sample_size == 0 {
            return Err(Error::config("train.sample_size", "must be at least 1"));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::config("train.optimizer.lr", "must be positive"));
        }
        if let Some(lr) = self.head_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config("train.head_lr", "must be positive"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config("train.epsilon", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Input reaching backbone layer `layer` for every column of `x`.
pub fn collect_inputs(net: &Network, layer: usize, x: &Matrix) -> Result<Matrix> {
    if layer >= net.layers.len() {
        return Err(Error::InvalidInput(format!("layer {layer} out of range")));
    }
    if x.cols() == 0 {
        return Err(Error::InvalidInput("empty input sample".into()));
    }
    let (_, mut cache) = net.forward(x)?;
    Ok(cache.inputs.swap_remove(layer))
}

/// Designs `B_t` (`r_eff × d_in`) for one layer.
///
/// `h` holds the layer's task inputs as columns and `mem` the memory as of
/// the end of the previous task. Gaussian draws come from `rng`.
pub fn design_b(
    h: &Matrix,
    mem: &GradientMemory,
    rank: usize,
    variant: DesignVariant,
    raw_random: bool,
    rng: &mut StreamRng,
) -> Result<Matrix> {
    if rank == 0 {
        return Err(Error::InvalidInput("rank must be at least 1".into()));
    }
    let d = mem.ambient_dim();
    if h.rows() != d {
        return Err(Error::Shape(format!(
            "inputs have {} rows, layer input is {d}",
            h.rows()
        )));
    }
    let source = match variant {
        DesignVariant::RandomB | DesignVariant::SeqLoRA => {
            return gaussian_b(rank.min(d), d, raw_random, rng);
        }
        DesignVariant::MperpOnly => gaussian_matrix(rng, d, h.cols().max(1)),
        DesignVariant::InfLoRA | DesignVariant::NtOnly => h.clone(),
    };
    let projected = match variant {
        DesignVariant::NtOnly => source.clone(),
        _ => mem.residual(&source)?,
    };
    b_from_principal_directions(
        &projected,
        &source,
        rank,
        variant != DesignVariant::NtOnly,
        mem,
    )
}

fn b_from_principal_directions(
    projected: &Matrix,
    reference: &Matrix,
    rank: usize,
    respect_memory: bool,
    mem: &GradientMemory,
) -> Result<Matrix> {
    // Right singular vectors of Ĥᵀ are the left singular vectors of Ĥ.
    let dec = svd(&projected.transpose())?;
    let usable = significant_rank(&dec, reference);
    let r_eff = rank.min(usable);
    if r_eff == 0 {
        return Err(Error::DegenerateSubspace(format!(
            "projected inputs have rank 0 in {} dimensions",
            projected.rows()
        )));
    }
    let b = dec.vt.select_rows(&(0..r_eff).collect::<Vec<_>>());
    if !respect_memory || mem.stored() == 0 {
        return Ok(b);
    }
    // Strip round-off along the old-task space; exact arithmetic would make
    // this the identity.
    let cleaned = mem.residual(&b.transpose())?.transpose();
    orthonormalize_rows(&cleaned)
}

fn gaussian_b(rank: usize, d: usize, raw: bool, rng: &mut StreamRng) -> Result<Matrix> {
    let g = gaussian_matrix(rng, rank, d);
    if raw {
        Ok(g)
    } else {
        orthonormalize_rows(&g)
    }
}

/// Per-task record returned by [`ContinualLearner::train_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// 1-based task index.
    pub task: usize,
    pub epoch_losses: Vec<f64>,
    /// Branch rank per backbone layer (`None` for non-adapted layers).
    pub ranks: Vec<Option<usize>>,
    /// Adapted layers that had no learning directions left.
    pub degenerate_layers: Vec<usize>,
    /// Live branch parameters plus head parameters during the task.
    pub expanded_params: usize,
    pub branch_params: usize,
    pub eps_threshold: f64,
    /// `(dim M_t, dim M_t⊥)` per adapted layer after the memory update.
    pub memory_dims: Vec<(usize, usize)>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Extra per-task data kept when tracing is on.
#[derive(Debug, Clone)]
pub struct TaskTrace {
    /// `B_t` per layer.
    pub b: Vec<Option<Matrix>>,
    /// `A_t B_t` per layer, captured just before merging.
    pub increments: Vec<Option<Matrix>>,
    /// Memories as they stood before the task.
    pub memories_before: Vec<Option<GradientMemory>>,
    /// Sampled layer inputs used for design, per layer.
    pub inputs: Vec<Matrix>,
}

/// Runs the per-task procedure over a task stream, owning the network and
/// one gradient memory per adapted layer.
#[derive(Debug, Clone)]
pub struct ContinualLearner {
    net: Network,
    memories: Vec<Option<GradientMemory>>,
    cfg: TaskTrainConfig,
    schedule: EpsilonSchedule,
    tasks_done: usize,
    shared_b: Vec<Option<Matrix>>,
    trace: Option<Vec<TaskTrace>>,
}

impl ContinualLearner {
    pub fn new(net: Network, cfg: TaskTrainConfig, total_tasks: usize) -> Result<Self> {
        cfg.validate()?;
        if net.layers.iter().any(|l| l.branch().is_some()) {
            return Err(Error::State("network already carries live branches".into()));
        }
        let memories = net
            .layers
            .iter()
            .map(|l| l.adapted.then(|| GradientMemory::new(l.d_in())))
            .collect();
        let n = net.layers.len();
        Ok(ContinualLearner {
            net,
            memories,
            schedule: EpsilonSchedule::new(cfg.epsilon, total_tasks)?,
            cfg,
            tasks_done: 0,
            shared_b: vec![None; n],
            trace: None,
        })
    }

    /// Keeps a [`TaskTrace`] per task from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_parts(self) -> (Network, Vec<Option<GradientMemory>>) {
        (self.net, self.memories)
    }

    pub fn memories(&self) -> &[Option<GradientMemory>] {
        &self.memories
    }

    pub fn config(&self) -> &TaskTrainConfig {
        &self.cfg
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn traces(&self) -> &[TaskTrace] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Learns the next task: design `B_t` per adapted layer, expand, train
    /// `A_t` and the head, merge, then update the memories.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskReport> {
        let t = self.tasks_done + 1;
        let eps_th = self.schedule.threshold(t)?;
        let started = crate::clock::now();
        let classes = task.classes.clone();
        if classes.end > self.net.head.classes() {
            return Err(Error::InvalidInput(format!(
                "task classes {classes:?} exceed the {} head outputs",
                self.net.head.classes()
            )));
        }
        if task.train.is_empty() || task.train.x.rows() != self.net.input_dim() {
            return Err(Error::InvalidInput(format!(
                "task {t} training data is empty or has the wrong input dimension"
            )));
        }
        if let Some(bad) = task.train.labels.iter().find(|y| !classes.contains(y)) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside task {t} classes {classes:?}"
            )));
        }

        let seed = self.cfg.seed;
        let n = task.train.len();
        let take = self.cfg.sample_size.min(n);
        let mut sample_idx = permutation(&mut stream(seed, &format!("sample/{t}")), n);
        sample_idx.truncate(take);
        sample_idx.sort_unstable();
        let sample = task.train.x.select_columns(&sample_idx);
        let inputs = self.net.forward(&sample)?.1.inputs;

        let memories_before = self.trace.is_some().then(|| self.memories.clone());
        let mut ranks = vec![None; self.net.layers.len()];
        let mut degenerate = Vec::new();
        let mut designed = vec![None; self.net.layers.len()];
        for layer in self.net.adapted_layers() {
            let mem = self.memories[layer]
                .as_ref()
                .expect("adapted layers carry memory");
            let mut rng = stream(seed, &format!("design/{t}/{layer}"));
            let b = match self.cfg.variant {
                DesignVariant::SeqLoRA => {
                    if self.shared_b[layer].is_none() {
                        let d = mem.ambient_dim();
                        self.shared_b[layer] = Some(gaussian_b(
                            self.cfg.rank.min(d),
                            d,
                            self.cfg.raw_random_b,
                            &mut rng,
                        )?);
                    }
                    Ok(self.shared_b[layer].clone().expect("just set"))
                }
                v => design_b(
                    &inputs[layer],
                    mem,
                    self.cfg.rank,
                    v,
                    self.cfg.raw_random_b,
                    &mut rng,
                ),
            };
            let b = match b {
                Ok(b) => b,
                Err(Error::DegenerateSubspace(msg)) => {
                    warn!("task {t}, layer {layer}: {msg}; training the head only for this layer");
                    degenerate.push(layer);
                    Matrix::zeros(0, mem.ambient_dim())
                }
                Err(e) => return Err(e),
            };
            ranks[layer] = Some(b.rows());
            designed[layer] = Some(b.clone());
            if self.cfg.raw_random_b {
                self.net.layers[layer].expand_branch_unchecked(b)?;
            } else {
                self.net.expand_branch(layer, b)?;
            }
        }
        let expanded_params = self.net.expanded_param_count();
        let branch_params = self.net.branch_param_count();

        let loss_classes = match self.cfg.loss {
            LossKind::Local => classes.clone(),
            LossKind::Global => 0..classes.end,
        };
        let mut opt = self.cfg.optimizer.build();
        if let Some(lr) = self.cfg.head_lr {
            let head = self.net.layers.len();
            opt = opt.with_slot_lr(head, lr).with_slot_lr(head + 1, lr);
        }
        let mut order_rng = stream(seed, &format!("order/{t}"));
        let mut epoch_losses = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let order = permutation(&mut order_rng, n);
            let mut total = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                let xb = task.train.x.select_columns(batch);
                let yb: Vec<usize> = batch.iter().map(|&i| task.train.labels[i]).collect();
                let (logits, cache) = self.net.forward(&xb)?;
                let (loss, g) = local_ce_loss(&logits, &yb, loss_classes.clone())?;
                let grads = self.net.backward(&cache, &g, GradMode::BranchOnly)?;
                apply_gradients(&mut self.net, &grads, &mut opt)?;
                total += loss * batch.len() as f64;
            }
            epoch_losses.push(total / n as f64);
        }

        let increments: Vec<Option<Matrix>> = self
            .net
            .layers
            .iter()
            .map(|l| l.branch().map(|br| br.a.matmul(&br.b)))
            .collect();
        self.net.merge_all()?;

        let merged_inputs = self.net.forward(&sample)?.1.inputs;
        for layer in self.net.adapted_layers() {
            let mem = self.memories[layer]
                .as_mut()
                .expect("adapted layers carry memory");
            mem.update(&merged_inputs[layer], eps_th, self.cfg.reduction_rule)?;
        }
        let memory_dims = self
            .memories
            .iter()
            .flatten()
            .map(|m| (m.grad_space_dim(), m.complement_dim()))
            .collect();
        debug!("task {t}: ranks {ranks:?}, memory {memory_dims:?}, losses {epoch_losses:?}");

        if let (Some(traces), Some(memories_before)) = (self.trace.as_mut(), memories_before) {
            traces.push(TaskTrace {
                b: designed,
                increments,
                memories_before,
                inputs,
            });
        }
        self.tasks_done = t;
        Ok(TaskReport {
            task: t,
            epoch_losses,
            ranks,
            degenerate_layers: degenerate,
            expanded_params,
            branch_params,
            eps_threshold: eps_th,
            memory_dims,
            seconds: crate::clock::elapsed(started),
        })
    }
}

/// Relative Frobenius gap between the composed-weight change produced by
/// one SGD step on the branch `A` of `layer` and the full-weight SGD step
/// multiplied by the projection `BᵀB`.
pub fn branch_equivalence_check(
    net: &Network,
    layer: usize,
    x: &Matrix,
    labels: &[usize],
    classes: std::ops::Range<usize>,
    lr: f64,
) -> Result<f64> {
    let branch = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range")))?
        .branch()
        .ok_or_else(|| Error::State(format!("layer {layer} has no branch")))?;
    let b = branch.b.clone();

    let (logits, cache) = net.forward(x)?;
    let (_, g) = local_ce_loss(&logits, labels, classes)?;

    let probe = net.backward(&cache, &g, GradMode::FullWeightProbe)?;
    let full = probe.layers[layer]
        .weight
        .as_ref()
        .expect("probe mode returns weight gradients");
    let projected = full.scale(-lr).matmul(&b.t_matmul(&b));

    // The gradient of a layer's `A` does not depend on that `A`, so the step
    // is applied to a copy whose `A` is zero there: the change `A' − A` is
    // then read off exactly instead of through cancellation against `A`.
    let grads = net.backward(&cache, &g, GradMode::BranchOnly)?;
    let mut stepped = net.clone();
    let br = stepped.layers[layer].branch_mut().expect("checked above");
    br.a = Matrix::zeros(br.a.rows(), br.a.cols());
    apply_gradients(&mut stepped, &grads, &mut OptimizerState::sgd(lr))?;
    let delta = stepped.layers[layer]
        .branch()
        .expect("branch survives a step")
        .a
        .matmul(&b);

    let denom = projected.frobenius_norm();
    let gap = delta.sub(&projected).frobenius_norm();
    Ok(if denom == 0.0 { gap } else { gap / denom })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpmem::MemoryMode;
    use crate::linalg::row_orthonormality_error;

    fn rng() -> StreamRng {
        stream(1, "test")
    }

    #[test]
    fn first_task_uses_principal_direction() {
        let h = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let b = design_b(
            &h,
            &GradientMemory::new(2),
            1,
            DesignVariant::InfLoRA,
            false,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(b.shape(), (1, 2));
        assert!(b[(0, 0)].abs() < 1e-14 && (b[(0, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn projection_removes_memory_direction() {
        let mem = GradientMemory::from_parts(
            MemoryMode::GradSpace,
            Matrix::from_columns(2, &[[0.0, 1.0]]),
        )
        .unwrap();
        let h = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = design_b(&h, &mem, 1, DesignVariant::InfLoRA, false, &mut rng()).unwrap();
        assert!((b[(0, 0)] - 1.0).abs() < 1e-14 && b[(0, 1)].abs() < 1e-14);
        let nt = design_b(&h, &mem, 1, DesignVariant::NtOnly, false, &mut rng()).unwrap();
        assert!(nt[(0, 1)].abs() > 0.5);
    }

    #[test]
    fn rank_is_truncated_to_available_directions() {
        let h = Matrix::from_columns(
            4,
            &[
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0, 0.0],
            ],
        );
        let b = design_b(
            &h,
            &GradientMemory::new(4),
            5,
            DesignVariant::InfLoRA,
            false,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(b.rows(), 2);
        assert!(row_orthonormality_error(&b) < 1e-12);
    }

    #[test]
    fn exhausted_space_is_degenerate() {
        let mem = GradientMemory::from_parts(MemoryMode::GradSpace, Matrix::identity(2)).unwrap();
        let h = Matrix::identity(2);
        assert!(matches!(
            design_b(&h, &mem, 1, DesignVariant::InfLoRA, false, &mut rng()),
            Err(Error::DegenerateSubspace(_))
        ));
        assert!(matches!(
            design_b(
                &h,
                &GradientMemory::new(2),
                0,
                DesignVariant::InfLoRA,
                false,
                &mut rng()
            ),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn gaussian_variants() {
        let h = Matrix::identity(6);
        let mem = GradientMemory::new(6);
        let b = design_b(&h, &mem, 3, DesignVariant::RandomB, false, &mut rng()).unwrap();
        assert_eq!(b.shape(), (3, 6));
        assert!(row_orthonormality_error(&b) < 1e-12);
        let raw = design_b(&h, &mem, 3, DesignVariant::RandomB, true, &mut rng()).unwrap();
        assert!(row_orthonormality_error(&raw) > 1e-3);
        let m = design_b(&h, &mem, 3, DesignVariant::MperpOnly, false, &mut rng()).unwrap();
        assert!(row_orthonormality_error(&m) < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in DesignVariant::ALL {
            assert_eq!(v.name().parse::<DesignVariant>().unwrap(), v);
        }
        assert!("nope".parse::<DesignVariant>().is_err());
    }
}
