//! Backpropagation against central finite differences, and the row-span
//! property of full-weight gradients.

use inflora::linalg::{orthonormalize_rows, project_out, svd, Matrix};
use inflora::model::{
    apply_gradients, local_ce_loss, GradMode, Gradients, LoraLinearLayer, Network, NetworkDims,
    OptimizerState,
};
use inflora::rng::{gaussian_matrix, stream, StreamRng};

const CLASSES: std::ops::Range<usize> = 2..5;
const STEP: f64 = 1e-5;

struct Case {
    net: Network,
    x: Matrix,
    labels: Vec<usize>,
}

fn case(seed: u64) -> Case {
    let mut rng = stream(seed, "test/gradients");
    let dims = NetworkDims {
        input: 5,
        hidden: vec![7, 6, 4],
        adapted: vec![0, 1, 2],
        ..NetworkDims::default()
    };
    let mut net = Network::random(&dims, 6, &mut rng).unwrap();
    net.head.w = gaussian_matrix(&mut rng, 6, 4);
    net.head.b = gaussian_matrix(&mut rng, 6, 1).into_data();
    for layer in 0..3 {
        let d_in = net.layers[layer].d_in();
        let b = orthonormalize_rows(&gaussian_matrix(&mut rng, 2, d_in)).unwrap();
        net.expand_branch(layer, b).unwrap();
    }
    let x = gaussian_matrix(&mut rng, 5, 8);
    let labels = (0..8).map(|i| CLASSES.start + i % CLASSES.len()).collect();
    let mut c = Case { net, x, labels };
    // One real step so every A is non-zero.
    let g = grads(&c, GradMode::BranchOnly);
    apply_gradients(&mut c.net, &g, &mut OptimizerState::sgd(0.5)).unwrap();
    c
}

fn loss(net: &Network, x: &Matrix, labels: &[usize]) -> f64 {
    let (logits, _) = net.forward(x).unwrap();
    local_ce_loss(&logits, labels, CLASSES).unwrap().0
}

fn grads(c: &Case, mode: GradMode) -> Gradients {
    let (logits, cache) = c.net.forward(&c.x).unwrap();
    let (_, g) = local_ce_loss(&logits, &c.labels, CLASSES).unwrap();
    c.net.backward(&cache, &g, mode).unwrap()
}

/// The same function with every branch folded into a plain weight, after
/// `edit` has adjusted the per-layer effective weights and biases.
fn folded(net: &Network, edit: impl Fn(usize, &mut Matrix, &mut Vec<f64>)) -> Network {
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut w = l.effective_weight();
            let mut b = l.bias().to_vec();
            edit(i, &mut w, &mut b);
            LoraLinearLayer::new(w, b, l.activation, l.adapted).unwrap()
        })
        .collect();
    Network::new(layers, net.head.clone()).unwrap()
}

fn central(f: impl Fn(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-6 * analytic.abs().max(numeric.abs()) + 1e-9;
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

fn probes(rng: &mut StreamRng, rows: usize, cols: usize, n: usize) -> Vec<(usize, usize)> {
    use rand::Rng;
    (0..n)
        .map(|_| (rng.random_range(0..rows), rng.random_range(0..cols)))
        .collect()
}

#[test]
fn weight_and_bias_gradients_match_finite_differences() {
    for seed in 0..4 {
        let c = case(seed);
        let g = grads(&c, GradMode::FullWeightProbe);
        let mut rng = stream(seed, "test/probes");
        for layer in 0..3 {
            let dw = g.layers[layer].weight.as_ref().unwrap();
            for (i, j) in probes(&mut rng, dw.rows(), dw.cols(), 20) {
                let fd = central(|h| {
                    let net = folded(&c.net, |l, w, _| {
                        if l == layer {
                            w[(i, j)] += h;
                        }
                    });
                    loss(&net, &c.x, &c.labels)
                });
                assert_close(dw[(i, j)], fd, &format!("W{layer}[{i},{j}]"));
            }
            let db = g.layers[layer].bias.as_ref().unwrap();
            for (i, &an) in db.iter().enumerate() {
                let fd = central(|h| {
                    let net = folded(&c.net, |l, _, b| {
                        if l == layer {
                            b[i] += h;
                        }
                    });
                    loss(&net, &c.x, &c.labels)
                });
                assert_close(an, fd, &format!("bias{layer}[{i}]"));
            }
        }
    }
}

#[test]
fn branch_gradients_match_finite_differences() {
    for seed in 0..4 {
        let c = case(seed);
        let g = grads(&c, GradMode::BranchOnly);
        for layer in 0..3 {
            let da = g.layers[layer].branch_a.as_ref().unwrap();
            let b = c.net.layers[layer].branch().unwrap().b.clone();
            for i in 0..da.rows() {
                for k in 0..da.cols() {
                    // Moving A[i,k] moves row i of the composed weight along row k of B.
                    let fd = central(|h| {
                        let net = folded(&c.net, |l, w, _| {
                            if l == layer {
                                for (wv, bv) in w.row_mut(i).iter_mut().zip(b.row(k)) {
                                    *wv += h * bv;
                                }
                            }
                        });
                        loss(&net, &c.x, &c.labels)
                    });
                    assert_close(da[(i, k)], fd, &format!("A{layer}[{i},{k}]"));
                }
            }
        }
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let c = case(9);
    let g = grads(&c, GradMode::BranchOnly);
    for i in 0..c.net.head.w.rows() {
        for j in 0..c.net.head.w.cols() {
            let fd = central(|h| {
                let mut net = c.net.clone();
                net.head.w[(i, j)] += h;
                loss(&net, &c.x, &c.labels)
            });
            assert_close(g.head_w[(i, j)], fd, &format!("head w[{i},{j}]"));
        }
        let fd = central(|h| {
            let mut net = c.net.clone();
            net.head.b[i] += h;
            loss(&net, &c.x, &c.labels)
        });
        assert_close(g.head_b[i], fd, &format!("head b[{i}]"));
    }
}

#[test]
fn masked_head_rows_get_no_gradient() {
    let c = case(3);
    let g = grads(&c, GradMode::BranchOnly);
    for class in (0..6).filter(|k| !CLASSES.contains(k)) {
        assert!(g.head_w.row(class).iter().all(|&v| v == 0.0));
        assert_eq!(g.head_b[class], 0.0);
    }
}

#[test]
fn weight_gradient_rows_lie_in_the_input_span() {
    for seed in 0..50 {
        let c = case(100 + seed);
        let g = grads(&c, GradMode::FullWeightProbe);
        let (_, cache) = c.net.forward(&c.x).unwrap();
        for layer in 0..3 {
            let inputs = &cache.inputs[layer];
            let dec = svd(inputs).unwrap();
            let span = dec.u.select_columns(&(0..dec.rank()).collect::<Vec<_>>());
            let dw = g.layers[layer].weight.as_ref().unwrap();
            let residual = project_out(&span, &dw.transpose()).unwrap();
            let scale = dw.frobenius_norm().max(1.0);
            assert!(
                residual.max_abs() <= 1e-8 * scale,
                "layer {layer}, seed {seed}"
            );
        }
    }
}
