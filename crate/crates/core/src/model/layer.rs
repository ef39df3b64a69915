use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{row_orthonormality_error, Matrix, ORTHONORMAL_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn apply(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::None => x.clone(),
        }
    }

    /// Multiplies `grad` in place by the derivative at `pre`. ReLU passes
    /// gradient only where the pre-activation is strictly positive.
    pub fn backprop(self, pre: &Matrix, grad: &mut Matrix) {
        if let Activation::Relu = self {
            for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    pub(crate) fn code(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::None => 0.0,
        }
    }

    pub(crate) fn from_code(code: f64) -> Option<Self> {
        match code {
            1.0 => Some(Activation::Relu),
            0.0 => Some(Activation::None),
            _ => None,
        }
    }
}

/// Low-rank branch `A · B`. `b` is frozen, `a` is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// `d_out × r`
    pub a: Matrix,
    /// `r × d_in`, orthonormal rows
    pub b: Matrix,
}

impl Branch {
    pub fn rank(&self) -> usize {
        self.b.rows()
    }
}

/// Linear layer with a frozen (merged) weight and at most one live branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinearLayer {
    pub(crate) w: Matrix,
    pub(crate) bias: Vec<f64>,
    pub(crate) branch: Option<Branch>,
    pub adapted: bool,
    pub activation: Activation,
}

impl LoraLinearLayer {
    pub fn new(w: Matrix, bias: Vec<f64>, activation: Activation, adapted: bool) -> Result<Self> {
        if bias.len() != w.rows() {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} outputs",
                bias.len(),
                w.rows()
            )));
        }
        Ok(LoraLinearLayer {
            w,
            bias,
            branch: None,
            adapted,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn branch(&self) -> Option<&Branch> {
        self.branch.as_ref()
    }

    pub(crate) fn branch_mut(&mut self) -> Option<&mut Branch> {
        self.branch.as_mut()
    }

    /// `W + A B`, the weight the layer currently applies.
    pub fn effective_weight(&self) -> Matrix {
        match &self.branch {
            Some(br) => self.w.add(&br.a.matmul(&br.b)),
            None => self.w.clone(),
        }
    }

    /// `W h + A (B h) + bias`.
    pub fn pre_activation(&self, h: &Matrix) -> Matrix {
        let mut e = self.w.matmul(h);
        if let Some(br) = &self.branch {
            e.add_assign(&br.a.matmul(&br.b.matmul(h)));
        }
        e.add_column_vector(&self.bias);
        e
    }

    /// Attaches a new branch with the given frozen `b` and a zero `a`.
    pub fn expand_branch(&mut self, b: Matrix) -> Result<()> {
        if self.branch.is_some() {
            return Err(Error::State("layer already has an active branch".into()));
        }
        if b.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "branch B has {} columns, layer input is {}",
                b.cols(),
                self.d_in()
            )));
        }
        let err = row_orthonormality_error(&b);
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "branch B rows are not orthonormal (error {err:.3e})"
            )));
        }
        self.branch = Some(Branch {
            a: Matrix::zeros(self.d_out(), b.rows()),
            b,
        });
        Ok(())
    }

    /// Same as [`Self::expand_branch`] without the orthonormality check, for
    /// raw Gaussian `B` ablations.
    pub(crate) fn expand_branch_unchecked(&mut self, b: Matrix) -> Result<()> {
        if self.branch.is_some() {
            return Err(Error::State("layer already has an active branch".into()));
        }
        self.branch = Some(Branch {
            a: Matrix::zeros(self.d_out(), b.rows()),
            b,
        });
        Ok(())
    }

    /// Folds the branch into the weight: `W ← W + A B`.
    pub fn merge_branch(&mut self) -> Result<()> {
        let br = self
            .branch
            .take()
            .ok_or_else(|| Error::State("no active branch to merge".into()))?;
        if br.rank() > 0 {
            self.w.add_assign(&br.a.matmul(&br.b));
        }
        Ok(())
    }

    /// `(d_in + d_out) · r` while a branch is live, else 0.
    pub fn branch_param_count(&self) -> usize {
        self.branch
            .as_ref()
            .map_or(0, |br| (self.d_in() + self.d_out()) * br.rank())
    }
}
