//! Dual gradient projection memory.
//!
//! One [`GradientMemory`] per adapted layer keeps an orthonormal basis of
//! either the old-task gradient space (`GradSpace`) or its orthogonal
//! complement (`Complement`), whichever is smaller. The gradient space is
//! estimated from layer inputs, because every row of `∂L/∂W` is a
//! combination of the batch inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    dot, norm, orthonormal_complement, project_in, project_out, svd, Matrix, SvdResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryMode {
    GradSpace,
    Complement,
}

/// How `reduce_complement` picks how many principal directions to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionRule {
    /// Remove the fewest top directions so the energy left inside the new
    /// complement is at most `(1 − ε_th)‖R‖²`.
    #[default]
    Residual,
    /// Remove the most top directions whose captured energy stays at most
    /// `(1 − ε_th)‖R‖²`.
    AsWritten,
}

/// `ε_th(t) = ε + (1 − ε)·t/T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub base: f64,
    pub tasks: usize,
}

impl EpsilonSchedule {
    pub fn new(base: f64, tasks: usize) -> Result<Self> {
        if !(base > 0.0 && base <= 1.0) {
            return Err(Error::InvalidInput(format!("epsilon {base} not in (0, 1]")));
        }
        if tasks == 0 {
            return Err(Error::InvalidInput(
                "schedule needs at least one task".into(),
            ));
        }
        Ok(EpsilonSchedule { base, tasks })
    }

    /// Threshold for 1-based task `t`.
    pub fn threshold(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.tasks {
            return Err(Error::InvalidInput(format!(
                "task {t} outside 1..={}",
                self.tasks
            )));
        }
        Ok(self.base + (1.0 - self.base) * t as f64 / self.tasks as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMemory {
    mode: MemoryMode,
    basis: Matrix,
}

impl GradientMemory {
    /// Empty gradient-space memory in `dim` dimensions.
    pub fn new(dim: usize) -> Self {
        GradientMemory {
            mode: MemoryMode::GradSpace,
            basis: Matrix::zeros(dim, 0),
        }
    }

    pub fn from_parts(mode: MemoryMode, basis: Matrix) -> Result<Self> {
        let err = crate::linalg::orthonormality_error(&basis);
        if err > crate::linalg::ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "memory basis is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(GradientMemory { mode, basis })
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    /// The stored basis: `M` in `GradSpace` mode, `M⊥` in `Complement` mode.
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    /// Number of basis vectors actually held.
    pub fn stored(&self) -> usize {
        self.basis.cols()
    }

    /// `dim(M_t)`.
    pub fn grad_space_dim(&self) -> usize {
        match self.mode {
            MemoryMode::GradSpace => self.stored(),
            MemoryMode::Complement => self.ambient_dim() - self.stored(),
        }
    }

    /// `dim(M_t⊥)`.
    pub fn complement_dim(&self) -> usize {
        self.ambient_dim() - self.grad_space_dim()
    }

    /// Orthonormal basis of the old-task gradient space, computed from the
    /// complement when that is what is stored.
    pub fn grad_space_basis(&self) -> Result<Matrix> {
        match self.mode {
            MemoryMode::GradSpace => Ok(self.basis.clone()),
            MemoryMode::Complement => orthonormal_complement(&self.basis),
        }
    }

    /// Component of each column of `x` that lies in the complement of the
    /// old-task gradient space.
    pub fn residual(&self, x: &Matrix) -> Result<Matrix> {
        match self.mode {
            MemoryMode::GradSpace => project_out(&self.basis, x),
            MemoryMode::Complement => project_in(&self.basis, x),
        }
    }

    /// Appends the fewest principal directions of the unexplained part of
    /// `inputs` needed to capture `eps_th` of their energy. Returns how many
    /// vectors were added.
    pub fn expand_memory(&mut self, inputs: &Matrix, eps_th: f64) -> Result<usize> {
        if self.mode != MemoryMode::GradSpace {
            return Err(Error::State(
                "expansion needs a gradient-space memory; use reduce_complement".into(),
            ));
        }
        check_inputs(self, inputs)?;
        let total = inputs.frobenius_sq();
        if total == 0.0 {
            return Ok(0);
        }
        let residual = project_out(&self.basis, inputs)?;
        let mut captured = if self.stored() == 0 {
            0.0
        } else {
            self.basis.t_matmul(inputs).frobenius_sq()
        };
        if captured >= eps_th * total {
            return Ok(0);
        }
        let dec = svd(&residual)?;
        let rank = significant_rank(&dec, inputs);
        let mut cols = self.basis.columns();
        let mut added = 0;
        for i in 0..rank {
            if captured >= eps_th * total {
                break;
            }
            captured += dec.s[i] * dec.s[i];
            let mut v = dec.u.column(i);
            reorthogonalize(&mut v, &cols);
            cols.push(v);
            added += 1;
        }
        self.basis = Matrix::from_columns(self.ambient_dim(), &cols);
        Ok(added)
    }

    /// Switches to storing the complement once the gradient space is the
    /// larger of the two. Returns whether a switch happened.
    pub fn maybe_switch(&mut self) -> Result<bool> {
        if self.mode == MemoryMode::GradSpace && self.stored() > self.ambient_dim() - self.stored()
        {
            self.basis = orthonormal_complement(&self.basis)?;
            self.mode = MemoryMode::Complement;
            return Ok(true);
        }
        Ok(false)
    }

    /// Removes from `M⊥` the principal directions of `inputs` inside it,
    /// chosen by `rule`. Returns how many directions were removed.
    pub fn reduce_complement(
        &mut self,
        inputs: &Matrix,
        eps_th: f64,
        rule: ReductionRule,
    ) -> Result<usize> {
        if self.mode != MemoryMode::Complement {
            return Err(Error::State(
                "reduction needs a complement memory; use expand_memory".into(),
            ));
        }
        check_inputs(self, inputs)?;
        if self.stored() == 0 {
            return Ok(0);
        }
        let total = inputs.frobenius_sq();
        let inside = project_in(&self.basis, inputs)?;
        let dec = svd(&inside)?;
        let rank = significant_rank(&dec, inputs);
        let budget = (1.0 - eps_th) * total;
        let energies: Vec<f64> = dec.s[..rank].iter().map(|s| s * s).collect();
        let k = match rule {
            ReductionRule::Residual => {
                let mut tail: f64 = dec.s.iter().map(|s| s * s).sum();
                let mut k = 0;
                while k < rank && tail > budget {
                    tail -= energies[k];
                    k += 1;
                }
                k
            }
            ReductionRule::AsWritten => {
                let mut acc = 0.0;
                let mut k = 0;
                while k < rank && acc + energies[k] <= budget {
                    acc += energies[k];
                    k += 1;
                }
                k
            }
        };
        if k == 0 {
            return Ok(0);
        }
        let z = dec.u.select_columns(&(0..k).collect::<Vec<_>>());
        let reduced = self.basis.sub(&z.matmul(&z.t_matmul(&self.basis)));
        let second = svd(&reduced)?;
        let keep = second.rank();
        let before = self.stored();
        self.basis = second.u.select_columns(&(0..keep).collect::<Vec<_>>());
        Ok(before - keep)
    }

    /// End-of-task update: expand or reduce with `eps_th`, then maybe
    /// switch representation.
    pub fn update(&mut self, inputs: &Matrix, eps_th: f64, rule: ReductionRule) -> Result<()> {
        match self.mode {
            MemoryMode::GradSpace => {
                self.expand_memory(inputs, eps_th)?;
            }
            MemoryMode::Complement => {
                self.reduce_complement(inputs, eps_th, rule)?;
            }
        }
        self.maybe_switch()?;
        Ok(())
    }
}

/// Rank of a projected matrix, measuring "numerically zero" against the
/// scale of the unprojected `inputs` as well as the projection itself.
pub(crate) fn significant_rank(dec: &SvdResult, inputs: &Matrix) -> usize {
    let scale = 1e-10 * inputs.rows().max(inputs.cols()) as f64 * inputs.frobenius_norm();
    let tol = dec.rank_tolerance().max(scale);
    dec.s.iter().take_while(|&&s| s > tol).count()
}

fn check_inputs(mem: &GradientMemory, inputs: &Matrix) -> Result<()> {
    if inputs.rows() != mem.ambient_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} rows, memory lives in {} dimensions",
            inputs.rows(),
            mem.ambient_dim()
        )));
    }
    if inputs.cols() == 0 {
        return Err(Error::InvalidInput("no input columns".into()));
    }
    Ok(())
}

fn reorthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in against {
            let c = dot(q, v);
            for (x, qv) in v.iter_mut().zip(q) {
                *x -= c * qv;
            }
        }
    }
    let r = norm(v);
    v.iter_mut().for_each(|x| *x /= r);
}
