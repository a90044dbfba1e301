//! Grid versions of `K*`, `(K*)^{-1}`, the prediction kernel and martingale
//! recovery.
//!
//! With the discrete kernel `K̄` (row time `t_i`, cell `j`) the increment
//! matrix is `B[(j, i)] = K̄[(i, j)] - K̄[(i-1, j)]`, so that
//! `(K* f)_j = Σ_{i>=j} f_i B[(j, i)]` and `K*` maps the indicator of
//! `[0, t_k)` (cells `0..=k`) to row `k` of `K̄` exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::grid::{SamplePath, TimeGrid};
use crate::model::{CellRule, VolterraModel};

/// Diagonal entries of `K̄` at or below this magnitude make the discrete
/// operator non-invertible.
pub const DIAGONAL_THRESHOLD: f64 = 1e-12;

/// How [`DiscreteOperator::discrete_psi`] obtains `Ψ(t, ·|u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsiMethod {
    /// Triangular solve of `K* Ψ = K(t,·) - K(u,·)` on `[0, u)`.
    #[default]
    Solve,
    /// Cell averages of the model's closed form, when it has one.
    ClosedForm,
}

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: TimeGrid,
    kbar: Arc<DMatrix<f64>>,
    increments: DMatrix<f64>,
    dv: Vec<f64>,
    model: Option<Arc<dyn VolterraModel>>,
}

/// Discretizes `model` on `grid` with the given cell rule.
pub fn build_operator(
    model: Arc<dyn VolterraModel>,
    grid: &TimeGrid,
    rule: CellRule,
) -> Result<DiscreteOperator> {
    let kbar = model.discrete_kernel(grid, rule)?;
    let mut dv = Vec::with_capacity(grid.len());
    let mut prev = 0.0;
    for &t in grid.times() {
        let v = model.bracket(t);
        dv.push(v - prev);
        prev = v;
    }
    let mut op = DiscreteOperator::from_parts(grid.clone(), kbar, dv)?;
    op.model = Some(model);
    Ok(op)
}

impl DiscreteOperator {
    /// Operator from an explicit lower-triangular `K̄` and bracket increments.
    pub fn from_parts(grid: TimeGrid, kbar: Arc<DMatrix<f64>>, dv: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if kbar.nrows() != n || kbar.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: kbar.nrows().max(kbar.ncols()),
            });
        }
        if dv.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: dv.len(),
            });
        }
        if let Some(bad) = dv.iter().find(|&&d| !(d > 0.0)) {
            return domain(format!("bracket increments must be positive, got {bad}"));
        }
        let mut increments = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let above = if i == j { 0.0 } else { kbar[(i - 1, j)] };
                increments[(j, i)] = kbar[(i, j)] - above;
            }
        }
        Ok(Self {
            grid,
            kbar,
            increments,
            dv,
            model: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `K̄`, lower triangular.
    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.kbar
    }

    /// `B`, upper triangular in `(j, i)`.
    pub fn increment_matrix(&self) -> &DMatrix<f64> {
        &self.increments
    }

    pub fn dv(&self) -> &[f64] {
        &self.dv
    }

    pub fn model(&self) -> Option<&Arc<dyn VolterraModel>> {
        self.model.as_ref()
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    fn check_diagonal(&self, upto: usize) -> Result<()> {
        for j in 0..=upto {
            let d = self.kbar[(j, j)];
            if !(d.abs() > DIAGONAL_THRESHOLD) {
                return Err(Error::ZeroDiagonal { index: j, value: d });
            }
        }
        Ok(())
    }

    /// `(K* f)_j = Σ_{i>=j} f_i B[(j, i)]`.
    pub fn adjoint_apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        let n = self.len();
        Ok((0..n)
            .map(|j| (j..n).map(|i| f[i] * self.increments[(j, i)]).sum())
            .collect())
    }

    /// Solves `K* f = g` by back substitution.
    pub fn adjoint_invert(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g.len())?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        self.adjoint_invert_prefix(g, self.len() - 1)
    }

    /// Solves `K* f = g` restricted to cells `0..=last`.
    fn adjoint_invert_prefix(&self, g: &[f64], last: usize) -> Result<Vec<f64>> {
        self.check_diagonal(last)?;
        let mut f = vec![0.0; last + 1];
        for j in (0..=last).rev() {
            let tail: f64 = (j + 1..=last).map(|i| f[i] * self.increments[(j, i)]).sum();
            f[j] = (g[j] - tail) / self.increments[(j, j)];
        }
        Ok(f)
    }

    /// `Ψ(t, ·|u)` as one value per cell, zero on cells beyond `u`.
    pub fn discrete_psi(&self, t: f64, u: f64, method: PsiMethod) -> Result<Vec<f64>> {
        if u > t {
            return Err(Error::Ordering(format!(
                "prediction needs u <= t, got u={u}, t={t}"
            )));
        }
        let it = self.grid.index_of(t)?;
        let iu = self.grid.index_of(u)?;
        let mut psi = vec![0.0; self.len()];
        if it == iu {
            return Ok(psi);
        }
        match method {
            PsiMethod::Solve => {
                let d: Vec<f64> = (0..=iu)
                    .map(|j| self.kbar[(it, j)] - self.kbar[(iu, j)])
                    .collect();
                let sol = self.adjoint_invert_prefix(&d, iu)?;
                psi[..=iu].copy_from_slice(&sol);
            }
            PsiMethod::ClosedForm => {
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::Domain("operator carries no model".into()))?;
                let (t, u) = (self.grid.times()[it], self.grid.times()[iu]);
                for (j, slot) in psi.iter_mut().enumerate().take(iu + 1) {
                    let (lo, hi) = self.grid.cell(j);
                    *slot = model.closed_form_psi_cell(t, u, lo, hi).ok_or_else(|| {
                        Error::Domain(format!("{} has no closed-form prediction kernel", model.name()))
                    })??;
                }
            }
        }
        Ok(psi)
    }

    /// Driving-martingale path `M` with `G_i = Σ_{j<=i} K̄[(i,j)] ΔM_j`.
    ///
    /// Row `i` of the solve reads only `G_0..=G_i`.
    pub fn recover_martingale(&self, g: &SamplePath) -> Result<SamplePath> {
        if !self.grid.same_nodes(g.grid()) {
            return Err(Error::GridMismatch("path grid differs from the operator grid".into()));
        }
        let dm = self.recover_increments(g.values())?;
        SamplePath::from_increments(self.grid.clone(), &dm)
    }

    /// Increments `ΔM` from grid values of `G`.
    pub fn recover_increments(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g.len())?;
        let mut dm = vec![0.0; g.len()];
        for i in 0..g.len() {
            let d = self.kbar[(i, i)];
            if !(d.abs() > DIAGONAL_THRESHOLD) {
                return Err(Error::ZeroDiagonal { index: i, value: d });
            }
            let known: f64 = (0..i).map(|j| self.kbar[(i, j)] * dm[j]).sum();
            dm[i] = (g[i] - known) / d;
        }
        Ok(dm)
    }

    /// `G_i = Σ_{j<=i} K̄[(i,j)] ΔM_j`.
    pub fn forward_map(&self, dm: &[f64]) -> Result<SamplePath> {
        self.check_len(dm.len())?;
        let values = (0..dm.len())
            .map(|i| (0..=i).map(|j| self.kbar[(i, j)] * dm[j]).sum())
            .collect();
        SamplePath::new(self.grid.clone(), values)
    }

    /// Covariance of the discrete process, `K̄ diag(dv) K̄ᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut scaled = (*self.kbar).clone();
        for (j, &d) in self.dv.iter().enumerate() {
            scaled.column_mut(j).scale_mut(d.sqrt());
        }
        &scaled * scaled.transpose()
    }
}
