//! Fixed-seed invariant suite behind `inflora check`.
//!
//! Every property reports the worst value observed over its trials and the
//! tolerance it is held to. [`Fault`] deliberately breaks one piece of the
//! pipeline so the suite can be shown to catch it.

use std::fmt;

use rand::Rng;

use crate::data::{gen_task_sequence, TaskSpec};
use crate::error::Result;
use crate::gpmem::{EpsilonSchedule, GradientMemory, MemoryMode, ReductionRule};
use crate::inflora::{
    branch_equivalence_check, design_b, ContinualLearner, DesignVariant, TaskTrainConfig,
};
use crate::linalg::{
    column_span, orthonormal_complement, orthonormality_error, project_in, project_out, svd, Matrix,
};
use crate::model::{
    local_ce_loss, Activation, GradMode, Head, LoraLinearLayer, Network, NetworkDims,
    OptimizerKind, OptimizerSpec,
};
use crate::rng::{gaussian_matrix, stream, StreamRng};

/// Injected defects for demonstrating fault isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// `B_t` is taken from the raw inputs, skipping the projection off the
    /// old-task gradient space.
    SkipProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst value seen; compared with `<=` against `tolerance`.
    pub observed: f64,
    pub trials: usize,
    pub passed: bool,
    pub note: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} observed {:>10.3e}  tolerance {:>8.1e}  trials {:>4}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.trials
        )?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

fn result(
    name: &'static str,
    tolerance: f64,
    observed: f64,
    trials: usize,
    note: impl Into<String>,
) -> PropertyResult {
    PropertyResult {
        name,
        tolerance,
        observed,
        trials,
        passed: observed <= tolerance,
        note: note.into(),
    }
}

/// Runs every property. Failures are reported in the results, never thrown;
/// an `Err` means the harness itself could not run.
pub fn check_suite(fault: Option<Fault>) -> Result<Vec<PropertyResult>> {
    Ok(vec![
        svd_reconstruction(200)?,
        svd_matches_eigenvalues(200)?,
        projection_split(100)?,
        complement_orthogonal(100)?,
        branch_equivalence(100)?,
        gradient_row_span(50)?,
        zero_init_forward(20)?,
        merge_forward(20)?,
        loss_masking(50)?,
        old_task_orthogonality(fault)?,
        memory_structure()?,
        determinism()?,
    ])
}

fn random_matrix(rng: &mut StreamRng, max_rows: usize, max_cols: usize, deficient: bool) -> Matrix {
    let m = rng.random_range(1..=max_rows);
    let n = rng.random_range(1..=max_cols);
    let mut a = gaussian_matrix(rng, m, n);
    if deficient && m > 1 && n > 1 && rng.random_bool(0.25) {
        let r = rng.random_range(1..m.min(n));
        let left = gaussian_matrix(rng, m, r);
        a = left.matmul(&gaussian_matrix(rng, r, n));
    }
    a
}

pub fn svd_reconstruction(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(11, "check/svd");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a = random_matrix(&mut rng, 32, 32, true);
        let d = svd(&a)?;
        worst = worst.max(d.reconstruct().sub(&a).frobenius_norm() / a.frobenius_norm());
    }
    Ok(result(
        "svd_reconstruction",
        1e-10,
        worst,
        trials,
        "relative Frobenius",
    ))
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= 1e-30 * m.frobenius_sq().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m.row_mut(k)[p] = c * mkp - s * mkq;
                    m.row_mut(k)[q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m.row_mut(p)[k] = c * mpk - s * mqk;
                    m.row_mut(q)[k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn svd_matches_eigenvalues(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(12, "check/eig");
    let mut worst = 0.0f64;
    // Generic (full-rank) inputs only: squaring a rank-deficient matrix puts
    // its zero eigenvalues at round-off level, whose square roots the oracle
    // cannot resolve below ~1e-8.
    for _ in 0..trials {
        let a = random_matrix(&mut rng, 8, 8, false);
        let s = svd(&a)?.s;
        let ev = symmetric_eigenvalues(&a.t_matmul(&a));
        for (i, si) in s.iter().enumerate() {
            let oracle = ev[i].max(0.0).sqrt();
            worst = worst.max((si - oracle).abs() / s[0].max(1.0));
        }
    }
    Ok(result(
        "svd_vs_eigenvalues",
        1e-8,
        worst,
        trials,
        "σ vs √λ(AᵀA), ≤ 8×8",
    ))
}

fn random_basis(rng: &mut StreamRng, d: usize, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let g = gaussian_matrix(rng, d, k);
    let dec = svd(&g)?;
    Ok(dec.u.select_columns(&(0..k).collect::<Vec<_>>()))
}

pub fn projection_split(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(13, "check/projection");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=12);
        let k = rng.random_range(0..=d);
        let m = random_basis(&mut rng, d, k)?;
        let n = rng.random_range(1..=6);
        let x = gaussian_matrix(&mut rng, d, n);
        let sum = project_out(&m, &x)?.add(&project_in(&m, &x)?);
        worst = worst.max(sum.sub(&x).max_abs());
    }
    Ok(result(
        "projection_out_plus_in",
        1e-10,
        worst,
        trials,
        "max |out + in − x|",
    ))
}

pub fn complement_orthogonal(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(14, "check/complement");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=12);
        let k = rng.random_range(0..=d);
        let m = random_basis(&mut rng, d, k)?;
        let q = m.hstack(&orthonormal_complement(&m)?);
        worst = worst.max(if q.cols() == d {
            orthonormality_error(&q)
        } else {
            f64::INFINITY
        });
    }
    Ok(result(
        "complement_square_orthogonal",
        1e-8,
        worst,
        trials,
        "‖QᵀQ − I‖_max",
    ))
}

/// A random network with every layer adapted and a live branch per layer.
fn random_branched_net(
    rng: &mut StreamRng,
    variant: DesignVariant,
) -> Result<(Network, Matrix, Vec<usize>, usize)> {
    let depth = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(3..=8)];
    for _ in 0..depth {
        widths.push(rng.random_range(3..=8));
    }
    let classes = rng.random_range(2..=5);
    let mut layers = Vec::new();
    for i in 0..depth {
        let w = gaussian_matrix(rng, widths[i + 1], widths[i]).scale(0.7);
        let bias = gaussian_matrix(rng, widths[i + 1], 1)
            .scale(0.1)
            .into_data();
        let act = if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::None
        };
        layers.push(LoraLinearLayer::new(w, bias, act, true)?);
    }
    let head = Head {
        w: gaussian_matrix(rng, classes, widths[depth]),
        b: gaussian_matrix(rng, classes, 1).into_data(),
    };
    let mut net = Network::new(layers, head)?;
    let n = rng.random_range(1..=10);
    let x = gaussian_matrix(rng, widths[0], n);
    for (i, &d) in widths.iter().enumerate().take(depth) {
        let h = gaussian_matrix(rng, d, 6);
        let k = rng.random_range(0..d);
        let mem = GradientMemory::from_parts(MemoryMode::GradSpace, random_basis(rng, d, k)?)?;
        let r = rng.random_range(1..=d);
        let b = design_b(&h, &mem, r, variant, false, rng)?;
        net.expand_branch(i, b)?;
        // A non-zero A makes the check exercise the upstream path as well.
        let br = net.layers[i].branch_mut().expect("just expanded");
        br.a = gaussian_matrix(rng, br.a.rows(), br.a.cols()).scale(0.3);
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok((net, x, labels, classes))
}

pub fn branch_equivalence(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(15, "check/prop1");
    let mut worst = 0.0f64;
    for t in 0..trials {
        let variant = DesignVariant::ALL[t % DesignVariant::ALL.len()];
        let (net, x, labels, classes) = random_branched_net(&mut rng, variant)?;
        let layer = rng.random_range(0..net.layers.len());
        let lr = 10f64.powf(rng.random_range(-3.0..0.0));
        worst = worst.max(branch_equivalence_check(
            &net,
            layer,
            &x,
            &labels,
            0..classes,
            lr,
        )?);
    }
    Ok(result(
        "branch_equivalence",
        1e-10,
        worst,
        trials,
        "relative Frobenius, all variants",
    ))
}

pub fn gradient_row_span(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(16, "check/span");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (net, x, labels, classes) = random_branched_net(&mut rng, DesignVariant::RandomB)?;
        let (logits, cache) = net.forward(&x)?;
        let (_, g) = local_ce_loss(&logits, &labels, 0..classes)?;
        let grads = net.backward(&cache, &g, GradMode::FullWeightProbe)?;
        for (i, lg) in grads.layers.iter().enumerate() {
            let dw = lg.weight.as_ref().expect("probe mode");
            let h = &cache.inputs[i];
            if h.frobenius_norm() == 0.0 {
                continue;
            }
            let q = column_span(h)?;
            let resid = dw.sub(&dw.matmul(&q).matmul_t(&q));
            let scale = dw.frobenius_norm().max(1.0);
            for r in 0..resid.rows() {
                worst = worst.max(crate::linalg::norm(resid.row(r)) / scale);
            }
        }
    }
    Ok(result(
        "gradient_rows_in_input_span",
        1e-8,
        worst,
        trials,
        "per-row residual",
    ))
}

fn default_like_net(rng: &mut StreamRng) -> Result<Network> {
    let dims = NetworkDims {
        input: 6,
        hidden: vec![8, 7],
        adapted: vec![0, 1],
        feature_activation: Activation::Relu,
    };
    let mut net = Network::random(&dims, 4, rng)?;
    net.head.w = gaussian_matrix(rng, 4, 7);
    Ok(net)
}

pub fn zero_init_forward(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(17, "check/zero-init");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut net = default_like_net(&mut rng)?;
        let x = gaussian_matrix(&mut rng, 6, 5);
        let before = net.forward(&x)?.0;
        for layer in net.adapted_layers() {
            let d = net.layers[layer].d_in();
            let r = rng.random_range(1..=d);
            let b = random_basis(&mut rng, d, r)?.transpose();
            net.expand_branch(layer, b)?;
        }
        worst = worst.max(net.forward(&x)?.0.sub(&before).max_abs());
    }
    Ok(result(
        "zero_init_forward_unchanged",
        1e-12,
        worst,
        trials,
        "max |Δ logits|",
    ))
}

pub fn merge_forward(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(18, "check/merge");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut net = default_like_net(&mut rng)?;
        for layer in net.adapted_layers() {
            let d = net.layers[layer].d_in();
            let r = rng.random_range(1..=d);
            let b = random_basis(&mut rng, d, r)?.transpose();
            net.expand_branch(layer, b)?;
            let br = net.layers[layer].branch_mut().expect("just expanded");
            br.a = gaussian_matrix(&mut rng, br.a.rows(), br.a.cols());
        }
        let x = gaussian_matrix(&mut rng, 6, 100);
        let branched = net.forward(&x)?.0;
        net.merge_all()?;
        let merged = net.forward(&x)?.0;
        worst = worst.max(merged.sub(&branched).max_abs() / branched.max_abs().max(1.0));
    }
    Ok(result(
        "merge_forward_unchanged",
        1e-10,
        worst,
        trials,
        "relative max |Δ logits|",
    ))
}

pub fn loss_masking(trials: usize) -> Result<PropertyResult> {
    let mut rng = stream(19, "check/mask");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = rng.random_range(3..=8);
        let lo = rng.random_range(0..c - 1);
        let hi = rng.random_range(lo + 1..=c);
        let n = rng.random_range(1..=6);
        let logits = gaussian_matrix(&mut rng, c, n);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let (l0, g0) = local_ce_loss(&logits, &labels, lo..hi)?;
        let mut moved = logits.clone();
        for row in (0..lo).chain(hi..c) {
            for v in moved.row_mut(row) {
                *v += 100.0 * crate::rng::normal(&mut rng);
            }
        }
        let (l1, g1) = local_ce_loss(&moved, &labels, lo..hi)?;
        let outside = (0..lo)
            .chain(hi..c)
            .map(|r| g0.row(r).iter().map(|v| v.abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        worst = worst
            .max((l1 - l0).abs())
            .max(g1.sub(&g0).max_abs())
            .max(outside);
    }
    Ok(result(
        "loss_masking_exact",
        0.0,
        worst,
        trials,
        "old-class logits perturbed",
    ))
}

/// Small task stream whose layer inputs never exhaust the input space, so
/// later tasks still get non-trivial branches.
fn small_stream() -> Result<crate::data::TaskSequence> {
    gen_task_sequence(&TaskSpec {
        tasks: 4,
        classes_per_task: 2,
        n_train: 3,
        n_test: 3,
        input_dim: 24,
        base_classes: 3,
        n_base: 20,
        seed: 5,
        ..TaskSpec::default()
    })
}

fn small_learner(variant: DesignVariant, epsilon: f64, tasks: usize) -> Result<ContinualLearner> {
    let dims = NetworkDims {
        input: 24,
        hidden: vec![32, 32],
        adapted: vec![0, 1],
        feature_activation: Activation::Relu,
    };
    let mut net = Network::random(&dims, 8, &mut stream(6, "check/learner"))?;
    net.head = Head::zeros(8, 32);
    let cfg = TaskTrainConfig {
        rank: 3,
        epochs: 3,
        batch_size: 4,
        optimizer: OptimizerSpec {
            kind: OptimizerKind::Adam,
            lr: 0.01,
        },
        epsilon,
        variant,
        seed: 6,
        ..TaskTrainConfig::default()
    };
    ContinualLearner::new(net, cfg, tasks)
}

/// With exact memory, each later task's composed-weight change must vanish
/// on the stored old-task gradient space.
pub fn old_task_orthogonality(fault: Option<Fault>) -> Result<PropertyResult> {
    let seq = small_stream()?;
    let variant = match fault {
        Some(Fault::SkipProjection) => DesignVariant::NtOnly,
        None => DesignVariant::InfLoRA,
    };
    let mut learner = small_learner(variant, 1.0, seq.tasks.len())?.with_trace();
    for task in &seq.tasks {
        learner.train_task(task)?;
    }
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trace in learner.traces().iter().skip(1) {
        for (layer, inc) in trace.increments.iter().enumerate() {
            let (Some(inc), Some(Some(mem))) = (inc, trace.memories_before.get(layer)) else {
                continue;
            };
            let m = mem.grad_space_basis()?;
            let denom = inc.frobenius_norm() * m.frobenius_norm();
            if denom == 0.0 {
                continue;
            }
            checked += 1;
            worst = worst.max(inc.matmul(&m).frobenius_norm() / denom);
        }
    }
    if checked == 0 {
        worst = f64::INFINITY;
    }
    let note = match fault {
        Some(Fault::SkipProjection) => "fault injected: projection skipped",
        None => "ε = 1, ‖ΔW M‖ / (‖ΔW‖‖M‖)",
    };
    Ok(result("old_task_orthogonality", 1e-6, worst, checked, note))
}

/// Orthonormality, monotone dimensions, switch rule and stored size over a
/// long random input stream.
pub fn memory_structure() -> Result<PropertyResult> {
    let mut rng = stream(20, "check/memory");
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    let mut steps = 0;
    for rule in [ReductionRule::Residual, ReductionRule::AsWritten] {
        for trial in 0..10 {
            let d = rng.random_range(4..=16);
            let tasks = 8;
            let schedule = EpsilonSchedule::new(rng.random_range(0.5..1.0), tasks)?;
            let mut mem = GradientMemory::new(d);
            let (mut last_k, mut last_perp) = (0, d);
            for t in 1..=tasks {
                let n = rng.random_range(1..=d);
                let rank = rng.random_range(1..=n);
                let h =
                    gaussian_matrix(&mut rng, d, rank).matmul(&gaussian_matrix(&mut rng, rank, n));
                mem.update(&h, schedule.threshold(t)?, rule)?;
                steps += 1;
                worst = worst.max(orthonormality_error(mem.basis()));
                let (k, perp) = (mem.grad_space_dim(), mem.complement_dim());
                let switched = mem.mode() == MemoryMode::Complement;
                let bad = k < last_k
                    || perp > last_perp
                    || switched != (k > d - k)
                    || mem.stored() != k.min(d - k);
                if bad {
                    violations += 1;
                    log::warn!(
                        "memory trial {trial} task {t}: k={k} d={d} mode={:?}",
                        mem.mode()
                    );
                }
                (last_k, last_perp) = (k, perp);
            }
        }
    }
    let observed = if violations > 0 { f64::INFINITY } else { worst };
    Ok(result(
        "gradient_memory_structure",
        1e-8,
        observed,
        steps,
        format!("orthonormality; {violations} monotonicity/switch/size violations"),
    ))
}

pub fn determinism() -> Result<PropertyResult> {
    let seq = small_stream()?;
    let run = || -> Result<Network> {
        let mut l = small_learner(DesignVariant::InfLoRA, 0.9, seq.tasks.len())?;
        for task in &seq.tasks {
            l.train_task(task)?;
        }
        Ok(l.into_parts().0)
    };
    let (a, b) = (run()?, run()?);
    let same = a.layers.iter().zip(&b.layers).all(|(x, y)| {
        x.weight()
            .data()
            .iter()
            .zip(y.weight().data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
    }) && a.head == b.head;
    Ok(result(
        "bitwise_determinism",
        0.0,
        if same { 0.0 } else { 1.0 },
        2,
        "merged weights of two runs",
    ))
}
