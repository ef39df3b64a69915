//! Stand-in for a pre-trained backbone: full training on an auxiliary base
//! dataset, after which every backbone weight and bias is frozen.

use serde::{Deserialize, Serialize};

use super::loss::local_ce_loss;
use super::network::{GradMode, Head, Network, NetworkDims};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{permutation, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// Trains a fresh backbone with Adam on `(x, labels)` over `base_classes`
/// classes, then swaps in a zero head with `continual_classes` outputs.
pub fn pretrain_backbone(
    dims: &NetworkDims,
    x: &Matrix,
    labels: &[usize],
    base_classes: usize,
    continual_classes: usize,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Network> {
    if x.cols() != labels.len() || x.cols() == 0 {
        return Err(Error::InvalidInput(
            "pre-training data is empty or mislabelled".into(),
        ));
    }
    let mut net = Network::random(dims, base_classes, &mut stream(seed, "pretrain/init"))?;
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut order_rng = stream(seed, "pretrain/order");
    let n_layers = net.layers.len();
    for _ in 0..cfg.epochs {
        let order = permutation(&mut order_rng, x.cols());
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select_columns(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = net.forward(&xb)?;
            let (_, g_logits) = local_ce_loss(&logits, &yb, 0..base_classes)?;
            let grads = net.backward(&cache, &g_logits, GradMode::FullWeightProbe)?;
            opt.begin_step();
            for (i, lg) in grads.layers.iter().enumerate() {
                let layer = &mut net.layers[i];
                opt.update(
                    2 * i,
                    layer.w.data_mut(),
                    lg.weight.as_ref().expect("probe").data(),
                )?;
                opt.update(2 * i + 1, &mut layer.bias, lg.bias.as_ref().expect("probe"))?;
            }
            opt.update(2 * n_layers, net.head.w.data_mut(), grads.head_w.data())?;
            opt.update(2 * n_layers + 1, &mut net.head.b, &grads.head_b)?;
        }
    }
    net.head = Head::zeros(continual_classes, dims.feature_dim());
    Ok(net)
}
