use serde::{Deserialize, Serialize};

use super::layer::{Activation, LoraLinearLayer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{normal, StreamRng};

/// Shape of the backbone plus classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkDims {
    pub input: usize,
    /// Widths of the backbone layers; the last one is the feature dim.
    pub hidden: Vec<usize>,
    /// Indices of backbone layers that carry branches.
    pub adapted: Vec<usize>,
    /// Activation on the last backbone layer (earlier layers use ReLU).
    pub feature_activation: Activation,
}

impl Default for NetworkDims {
    fn default() -> Self {
        NetworkDims {
            input: 32,
            hidden: vec![64, 64],
            adapted: vec![0, 1],
            feature_activation: Activation::Relu,
        }
    }
}

impl NetworkDims {
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input)
    }

    /// `(d_in, d_out)` of every backbone layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len());
        let mut d = self.input;
        for &h in &self.hidden {
            shapes.push((d, h));
            d = h;
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "network",
                "input and every hidden width must be positive, with at least one hidden layer",
            ));
        }
        if let Some(&bad) = self.adapted.iter().find(|&&i| i >= self.hidden.len()) {
            return Err(Error::config(
                "network.adapted",
                format!("layer {bad} does not exist"),
            ));
        }
        Ok(())
    }
}

/// Plain trainable linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `classes × d_feat`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Head {
    pub fn zeros(classes: usize, d_feat: usize) -> Self {
        Head {
            w: Matrix::zeros(classes, d_feat),
            b: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, features: &Matrix) -> Matrix {
        let mut z = self.w.matmul(features);
        z.add_column_vector(&self.b);
        z
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }
}

/// Backbone of [`LoraLinearLayer`]s followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<LoraLinearLayer>,
    pub head: Head,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each backbone layer, one column per sample.
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    /// Backbone output fed to the head.
    pub features: Matrix,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.logits.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients for live branch `A` matrices and the head.
    BranchOnly,
    /// Additionally the full-weight and bias gradients of every layer. These
    /// are never applied to frozen weights outside pre-training.
    FullWeightProbe,
}

#[derive(Debug, Clone, Default)]
pub struct LayerGrad {
    pub branch_a: Option<Matrix>,
    pub weight: Option<Matrix>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl Network {
    pub fn new(layers: Vec<LoraLinearLayer>, head: Head) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].d_out(),
                    pair[1].d_in()
                )));
            }
        }
        if let Some(last) = layers.last() {
            if last.d_out() != head.w.cols() {
                return Err(Error::Shape(format!(
                    "features have {} dims, head expects {}",
                    last.d_out(),
                    head.w.cols()
                )));
            }
        }
        Ok(Network { layers, head })
    }

    /// He-initialised backbone with zero biases and a zero head.
    pub fn random(dims: &NetworkDims, classes: usize, rng: &mut StreamRng) -> Result<Self> {
        dims.validate()?;
        let shapes = dims.layer_shapes();
        let last = shapes.len() - 1;
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, &(d_in, d_out)) in shapes.iter().enumerate() {
            let std = (2.0 / d_in as f64).sqrt();
            let data = (0..d_in * d_out).map(|_| std * normal(rng)).collect();
            let activation = if i == last {
                dims.feature_activation
            } else {
                Activation::Relu
            };
            layers.push(LoraLinearLayer::new(
                Matrix::from_vec(d_out, d_in, data)?,
                vec![0.0; d_out],
                activation,
                dims.adapted.contains(&i),
            )?);
        }
        Network::new(layers, Head::zeros(classes, dims.feature_dim()))
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.head.w.cols(), |l| l.d_in())
    }

    pub fn feature_dim(&self) -> usize {
        self.head.w.cols()
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].adapted)
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.rows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} rows, network expects {}",
                x.rows(),
                self.input_dim()
            )));
        }
        if x.cols() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let e = layer.pre_activation(&h);
            let out = layer.activation.apply(&e);
            inputs.push(h);
            pre_activations.push(e);
            h = out;
        }
        let logits = self.head.logits(&h);
        let cache = ForwardCache {
            inputs,
            pre_activations,
            features: h,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Backbone output only.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.1.features)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &Matrix,
        mode: GradMode,
    ) -> Result<Gradients> {
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::Shape(format!(
                "logit gradient is {:?}, logits are {:?}",
                grad_logits.shape(),
                cache.logits.shape()
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("cache does not match this network".into()));
        }
        if mode == GradMode::BranchOnly {
            if let Some(i) = self
                .layers
                .iter()
                .position(|l| l.adapted && l.branch().is_none())
            {
                return Err(Error::State(format!(
                    "adapted layer {i} has no branch to differentiate"
                )));
            }
        }
        let head_w = grad_logits.matmul_t(&cache.features);
        let head_b = grad_logits.row_sums();
        let mut upstream = self.head.w.t_matmul(grad_logits);

        let mut layer_grads = vec![LayerGrad::default(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut de = upstream;
            layer
                .activation
                .backprop(&cache.pre_activations[i], &mut de);
            let h = &cache.inputs[i];
            let grad = &mut layer_grads[i];
            if let Some(br) = layer.branch() {
                if layer.adapted || mode == GradMode::FullWeightProbe {
                    grad.branch_a = Some(de.matmul_t(&br.b.matmul(h)));
                }
            }
            if mode == GradMode::FullWeightProbe {
                grad.weight = Some(de.matmul_t(h));
                grad.bias = Some(de.row_sums());
            }
            upstream = if i > 0 {
                let mut d = layer.w.t_matmul(&de);
                if let Some(br) = layer.branch() {
                    if br.rank() > 0 {
                        d.add_assign(&br.b.t_matmul(&br.a.t_matmul(&de)));
                    }
                }
                d
            } else {
                Matrix::zeros(0, 0)
            };
        }
        Ok(Gradients {
            layers: layer_grads,
            head_w,
            head_b,
        })
    }

    pub fn expand_branch(&mut self, layer: usize, b: Matrix) -> Result<()> {
        self.layer_mut(layer)?.expand_branch(b)
    }

    pub fn merge_branch(&mut self, layer: usize) -> Result<()> {
        self.layer_mut(layer)?.merge_branch()
    }

    pub fn merge_all(&mut self) -> Result<()> {
        for layer in self.layers.iter_mut().filter(|l| l.branch().is_some()) {
            layer.merge_branch()?;
        }
        Ok(())
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LoraLinearLayer> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range ({n} layers)")))
    }

    /// Live branch parameters plus head parameters.
    pub fn expanded_param_count(&self) -> usize {
        self.branch_param_count() + self.head.param_count()
    }

    pub fn branch_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.branch_param_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn hand_gradient_is_orthogonal_to_b() {
        // de = [1], h = (1, 0), B = [0, 1]  →  dL/dA = de (B h)ᵀ = 0
        let layer =
            LoraLinearLayer::new(Matrix::zeros(1, 2), vec![0.0], Activation::None, true).unwrap();
        let mut net = Network::new(
            vec![layer],
            Head {
                w: Matrix::identity(1),
                b: vec![0.0],
            },
        )
        .unwrap();
        net.expand_branch(0, Matrix::from_rows(&[[0.0, 1.0]]).unwrap())
            .unwrap();
        let x = Matrix::from_columns(2, &[[1.0, 0.0]]);
        let (_, cache) = net.forward(&x).unwrap();
        let g = net
            .backward(
                &cache,
                &Matrix::from_rows(&[[1.0]]).unwrap(),
                GradMode::FullWeightProbe,
            )
            .unwrap();
        assert_eq!(g.layers[0].branch_a.as_ref().unwrap().data(), &[0.0]);
        assert_eq!(g.layers[0].weight.as_ref().unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn branch_only_requires_branches() {
        let dims = NetworkDims::default();
        let net = Network::random(&dims, 5, &mut stream(3, "net")).unwrap();
        let x = Matrix::zeros(32, 2);
        let (logits, cache) = net.forward(&x).unwrap();
        assert_eq!(logits.shape(), (5, 2));
        assert!(matches!(
            net.backward(&cache, &logits, GradMode::BranchOnly),
            Err(Error::State(_))
        ));
        assert!(net.forward(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn relu_blocks_gradient_at_zero() {
        let layer =
            LoraLinearLayer::new(Matrix::zeros(1, 1), vec![0.0], Activation::Relu, false).unwrap();
        let net = Network::new(
            vec![layer],
            Head {
                w: Matrix::identity(1),
                b: vec![0.0],
            },
        )
        .unwrap();
        let (_, cache) = net.forward(&Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        let g = net
            .backward(
                &cache,
                &Matrix::from_rows(&[[1.0]]).unwrap(),
                GradMode::FullWeightProbe,
            )
            .unwrap();
        assert_eq!(g.layers[0].weight.as_ref().unwrap().data(), &[0.0]);
    }
}
