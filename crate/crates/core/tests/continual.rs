//! Multi-task behaviour of the learner: design invariants, memory structure,
//! composed-weight bookkeeping, parameter counts, checkpoints and
//! determinism.

use inflora::checkpoint::Checkpoint;
use inflora::data::{gen_task_sequence, TaskSequence, TaskSpec};
use inflora::eval::{collect_stats, evaluate, param_count, ClassStats};
use inflora::gpmem::MemoryMode;
use inflora::inflora::{ContinualLearner, DesignVariant, TaskTrainConfig};
use inflora::linalg::{orthonormality_error, Matrix};
use inflora::model::{pretrain_backbone, Network, NetworkDims, PretrainConfig};
use inflora::rng::{gaussian_matrix, stream};

fn spec() -> TaskSpec {
    TaskSpec {
        tasks: 4,
        classes_per_task: 3,
        n_train: 30,
        n_test: 20,
        input_dim: 12,
        base_classes: 4,
        n_base: 40,
        seed: 11,
        ..TaskSpec::default()
    }
}

fn dims() -> NetworkDims {
    NetworkDims {
        input: 12,
        hidden: vec![16, 16],
        adapted: vec![0, 1],
        ..NetworkDims::default()
    }
}

fn backbone(seq: &TaskSequence) -> Network {
    pretrain_backbone(
        &dims(),
        &seq.base.x,
        &seq.base.labels,
        seq.base_classes,
        seq.total_classes,
        &PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
        5,
    )
    .unwrap()
}

fn train_cfg(variant: DesignVariant, epsilon: f64) -> TaskTrainConfig {
    TaskTrainConfig {
        rank: 4,
        epochs: 3,
        batch_size: 16,
        epsilon,
        variant,
        seed: 2,
        ..TaskTrainConfig::default()
    }
}

fn run(variant: DesignVariant, epsilon: f64) -> (TaskSequence, Network, ContinualLearner) {
    run_on(spec(), variant, epsilon)
}

fn run_on(
    spec: TaskSpec,
    variant: DesignVariant,
    epsilon: f64,
) -> (TaskSequence, Network, ContinualLearner) {
    let seq = gen_task_sequence(&spec).unwrap();
    let net = backbone(&seq);
    let mut learner =
        ContinualLearner::new(net.clone(), train_cfg(variant, epsilon), seq.tasks.len())
            .unwrap()
            .with_trace();
    for task in &seq.tasks {
        learner.train_task(task).unwrap();
    }
    (seq, net, learner)
}

#[test]
fn designed_rows_avoid_the_pre_task_memory() {
    let (_, _, learner) = run(DesignVariant::InfLoRA, 0.8);
    for trace in learner.traces() {
        for (b, mem) in trace.b.iter().zip(&trace.memories_before) {
            let (Some(b), Some(mem)) = (b, mem) else {
                continue;
            };
            let m = mem.grad_space_basis().unwrap();
            if m.cols() == 0 {
                continue;
            }
            for k in 0..b.rows() {
                let row = Matrix::from_columns(b.cols(), &[b.row(k)]);
                assert!(m.t_matmul(&row).frobenius_norm() <= 1e-8);
            }
        }
    }
}

#[test]
fn memory_dimensions_grow_and_stay_orthonormal() {
    let (_, _, learner) = run(DesignVariant::InfLoRA, 0.6);
    let mut last: Vec<(usize, usize)> = Vec::new();
    for trace in learner.traces().iter().skip(1) {
        let dims: Vec<(usize, usize)> = trace
            .memories_before
            .iter()
            .flatten()
            .map(|m| {
                assert!(orthonormality_error(m.basis()) <= 1e-8);
                let (k, c) = (m.grad_space_dim(), m.complement_dim());
                assert_eq!(k + c, m.ambient_dim());
                let expect = if k > c {
                    MemoryMode::Complement
                } else {
                    MemoryMode::GradSpace
                };
                assert_eq!(m.mode(), expect);
                assert_eq!(m.stored(), k.min(c));
                (k, c)
            })
            .collect();
        for (now, before) in dims.iter().zip(&last) {
            assert!(now.0 >= before.0 && now.1 <= before.1);
        }
        last = dims;
    }
    assert!(last.iter().all(|&(k, _)| k > 0));
}

#[test]
fn final_weights_are_the_backbone_plus_every_increment() {
    let (_, start, learner) = run(DesignVariant::InfLoRA, 0.8);
    for layer in 0..2 {
        let mut w = start.layers[layer].weight().clone();
        for trace in learner.traces() {
            if let Some(inc) = &trace.increments[layer] {
                w.add_assign(inc);
            }
        }
        let got = learner.net().layers[layer].weight();
        assert!(w.sub(got).max_abs() <= 1e-12 * w.max_abs().max(1.0));
        assert!(learner.net().layers[layer].branch().is_none());
    }
}

#[test]
fn increments_vanish_on_old_gradient_spaces_with_exact_memory() {
    // With ε = 1 the memory keeps every input direction, so tasks need fewer
    // samples than input dimensions or the space is exhausted after task 1.
    let small = TaskSpec {
        n_train: 1,
        ..spec()
    };
    let (_, _, learner) = run_on(small, DesignVariant::InfLoRA, 1.0);
    let mut checked = 0;
    for trace in learner.traces().iter().skip(1) {
        for (inc, mem) in trace.increments.iter().zip(&trace.memories_before) {
            let (Some(inc), Some(mem)) = (inc, mem) else {
                continue;
            };
            let m = mem.grad_space_basis().unwrap();
            let denom = inc.frobenius_norm() * m.frobenius_norm();
            if denom == 0.0 {
                continue;
            }
            checked += 1;
            assert!(inc.matmul(&m).frobenius_norm() <= 1e-6 * denom);
        }
    }
    assert!(checked > 0, "every increment was empty");
}

#[test]
fn expanded_parameters_follow_the_rank_formula() {
    let seq = gen_task_sequence(&spec()).unwrap();
    let net = backbone(&seq);
    let head = net.head.param_count();
    let mut learner =
        ContinualLearner::new(net, train_cfg(DesignVariant::RandomB, 0.8), seq.tasks.len())
            .unwrap();
    let shapes = dims().layer_shapes();
    for task in &seq.tasks {
        let report = learner.train_task(task).unwrap();
        assert_eq!(report.branch_params, param_count(&shapes, 4, &[0, 1]));
        assert_eq!(report.expanded_params, report.branch_params + head);
        assert_eq!(report.ranks, vec![Some(4), Some(4)]);
    }
}

#[test]
fn identical_runs_give_identical_weights() {
    let (_, _, a) = run(DesignVariant::InfLoRA, 0.8);
    let (_, _, b) = run(DesignVariant::InfLoRA, 0.8);
    assert_eq!(a.net(), b.net());
    assert_eq!(a.memories(), b.memories());
}

#[test]
fn every_variant_completes_and_fills_the_matrix() {
    for variant in DesignVariant::ALL {
        let seq = gen_task_sequence(&spec()).unwrap();
        let mut learner =
            ContinualLearner::new(backbone(&seq), train_cfg(variant, 0.8), seq.tasks.len())
                .unwrap();
        for (i, task) in seq.tasks.iter().enumerate() {
            learner.train_task(task).unwrap();
            let row = evaluate(learner.net(), &seq, i).unwrap();
            assert_eq!(row.len(), i + 1);
            assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }
}

#[test]
fn checkpoint_restores_a_trained_state_exactly() {
    let (seq, _, learner) = run(DesignVariant::InfLoRA, 0.8);
    let mut stats = ClassStats::default();
    for task in &seq.tasks {
        stats.merge(collect_stats(learner.net(), &task.train).unwrap());
    }
    let (net, memories) = learner.into_parts();
    let ck = Checkpoint {
        net,
        memories,
        stats,
    };

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    ck.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    loaded.save(&second).unwrap();
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap()
    );
    assert_eq!(loaded.memories, ck.memories);
    assert_eq!(loaded.stats, ck.stats);

    let mut rng = stream(1, "test/probes");
    for _ in 0..10 {
        let x = gaussian_matrix(&mut rng, 12, 1);
        let a = ck.net.forward(&x).unwrap().0;
        let b = loaded.net.forward(&x).unwrap().0;
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn checkpoint_corruption_is_reported() {
    let (_, net, _) = run(DesignVariant::InfLoRA, 0.8);
    let ck = Checkpoint {
        net,
        memories: vec![None, None],
        stats: ClassStats::default(),
    };
    let bytes = ck.to_bytes();
    for cut in [0, 3, 4, 9, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(inflora::Error::Corrupt { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        Checkpoint::from_bytes(&extra),
        Err(inflora::Error::Corrupt { .. })
    ));
}
