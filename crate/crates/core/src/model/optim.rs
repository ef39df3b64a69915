use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerSpec {
    pub fn build(self) -> OptimizerState {
        OptimizerState::new(self.kind, self.lr)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam with per-slot moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    slot_lr: Vec<Option<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: Vec::new(),
            slot_lr: Vec::new(),
        }
    }

    /// Overrides the learning rate of one slot.
    pub fn with_slot_lr(mut self, slot: usize, lr: f64) -> Self {
        if self.slot_lr.len() <= slot {
            self.slot_lr.resize(slot + 1, None);
        }
        self.slot_lr[slot] = Some(lr);
        self
    }

    pub fn lr_for(&self, slot: usize) -> f64 {
        self.slot_lr.get(slot).copied().flatten().unwrap_or(self.lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the shared Adam time step. Call once per batch before the
    /// per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter buffer in place.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape(format!(
                "slot {slot}: parameter has {} entries, gradient {}",
                param.len(),
                grad.len()
            )));
        }
        let lr = self.lr_for(slot);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.moments.len() <= slot {
                    self.moments.resize(slot + 1, None);
                }
                let (m, v) = self.moments[slot]
                    .get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                if m.len() != grad.len() {
                    return Err(Error::Shape(format!(
                        "slot {slot}: moment buffers have {} entries, gradient {}",
                        m.len(),
                        grad.len()
                    )));
                }
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..grad.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Applies branch and head gradients. Slots: layer `i`'s branch `A` is slot
/// `i`, the head weight and bias follow the backbone layers. Frozen weights,
/// biases and branch `B` matrices are never touched.
pub fn apply_gradients(
    net: &mut Network,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape(format!(
            "gradients for {} layers, network has {}",
            grads.layers.len(),
            net.layers.len()
        )));
    }
    if grads.head_w.shape() != net.head.w.shape() || grads.head_b.len() != net.head.b.len() {
        return Err(Error::Shape("head gradient shape mismatch".into()));
    }
    for (i, (layer, g)) in net.layers.iter().zip(&grads.layers).enumerate() {
        if let Some(ga) = &g.branch_a {
            let br = layer.branch().ok_or_else(|| {
                Error::State(format!(
                    "gradient for layer {i} branch but no branch is live"
                ))
            })?;
            if br.a.shape() != ga.shape() {
                return Err(Error::Shape(format!(
                    "layer {i} branch gradient shape mismatch"
                )));
            }
        }
    }
    opt.begin_step();
    let n = net.layers.len();
    for (i, g) in grads.layers.iter().enumerate() {
        if let Some(ga) = &g.branch_a {
            let br = net.layers[i].branch_mut().expect("checked above");
            opt.update(i, br.a.data_mut(), ga.data())?;
        }
    }
    opt.update(n, net.head.w.data_mut(), grads.head_w.data())?;
    opt.update(n + 1, &mut net.head.b, &grads.head_b)?;
    Ok(())
}

/// Head-only update, used by classifier alignment.
pub fn apply_head_gradients(
    net: &mut Network,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    opt.begin_step();
    let n = net.layers.len();
    opt.update(n, net.head.w.data_mut(), grads.head_w.data())?;
    opt.update(n + 1, &mut net.head.b, &grads.head_b)
}
