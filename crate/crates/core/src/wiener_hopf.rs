//! Wiener–Hopf equations of the mixed fBm `M = W + B^H` (`H > 1/2`).
//!
//! For each grid time `t` the second-kind equations
//!
//! ```text
//!     L(t,s) + c ∫_0^t L(t,x) |s-x|^{2H-2} dx = -c |t-s|^{2H-2}
//!     q(t,s) + c ∫_0^t q(t,x) |s-x|^{2H-2} dx = φ(s),   φ(t) = 1 - ∫_0^t L(t,x) dx
//! ```
//!
//! with `c = H(2H-1)` are discretized by product integration: unknowns are
//! constant on the grid cells, collocation happens at cell midpoints and the
//! weakly singular factor is integrated exactly over each cell. The forcing
//! is never evaluated at `s = t`.
//!
//! Row `t_i` uses cells `0..=i`, so its matrix is the leading block of the
//! full one. A single LU factorization without pivoting therefore serves
//! every row.
//!
//! The Volterra kernel of `M` is built from the martingale
//! `W̃_t = ∫_0^t q(t,s) dM_s`: with `C(t,r) = Cov(M_t, W̃_r)` and
//! `v(r) = Var(W̃_r)`, `K̃(t,r) = ∂_r C(t,r) / v'(r)`.

use nalgebra::DMatrix;

use crate::error::{domain, Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::fbm_covariance;

/// Residual bound for every discrete solve.
pub const RESIDUAL_LIMIT: f64 = 1e-8;

/// Product-integration system `I + scale c W` on a grid.
#[derive(Debug, Clone)]
pub struct NystromSystem {
    grid: TimeGrid,
    h: f64,
    mids: Vec<f64>,
    matrix: DMatrix<f64>,
    lu: DMatrix<f64>,
}

impl NystromSystem {
    /// `kernel_scale` multiplies the integral operator; 1 is the actual
    /// equation and 0 turns it into the identity.
    pub fn new(grid: &TimeGrid, h: f64, kernel_scale: f64) -> Result<Self> {
        check_mixed_hurst(h)?;
        let n = grid.len();
        let p = 2.0 * h - 2.0;
        let c = kernel_scale * h * (2.0 * h - 1.0);
        let mids: Vec<f64> = (0..n)
            .map(|j| 0.5 * (grid.cell_start(j) + grid.times()[j]))
            .collect();
        let antiderivative = |y: f64| y.signum() * y.abs().powf(p + 1.0) / (p + 1.0);
        let mut matrix = DMatrix::<f64>::identity(n, n);
        for k in 0..n {
            for l in 0..n {
                let w = antiderivative(grid.times()[l] - mids[k])
                    - antiderivative(grid.cell_start(l) - mids[k]);
                matrix[(k, l)] += c * w;
            }
        }
        let lu = factor_no_pivot(&matrix)?;
        Ok(Self {
            grid: grid.clone(),
            h,
            mids,
            matrix,
            lu,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    /// Cell midpoints, the collocation nodes.
    pub fn midpoints(&self) -> &[f64] {
        &self.mids
    }

    /// Solves the row-`i` system (cells `0..=i`) and returns the solution
    /// with the sup-norm residual of the discrete equation.
    pub fn solve_row(&self, i: usize, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let m = i + 1;
        if rhs.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: rhs.len(),
            });
        }
        let mut x = rhs.to_vec();
        #[allow(clippy::needless_range_loop)]
        for r in 0..m {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[(r, c)] * x[c];
            }
            x[r] = acc;
        }
        #[allow(clippy::needless_range_loop)]
        for r in (0..m).rev() {
            let mut acc = x[r];
            for c in r + 1..m {
                acc -= self.lu[(r, c)] * x[c];
            }
            x[r] = acc / self.lu[(r, r)];
        }
        let mut residual: f64 = 0.0;
        #[allow(clippy::needless_range_loop)]
        for r in 0..m {
            let mut acc = -rhs[r];
            for c in 0..m {
                acc += self.matrix[(r, c)] * x[c];
            }
            residual = residual.max(acc.abs());
        }
        if !residual.is_finite() {
            return Err(Error::SingularSystem(format!("row {i} produced a non-finite solution")));
        }
        Ok((x, residual))
    }

    /// Solves every row with right-hand side `rhs(i, k)`; rows are stored in a
    /// lower-triangular matrix indexed `(i, cell)`.
    fn solve_rows(&self, rhs: impl Fn(usize, usize) -> f64) -> Result<(DMatrix<f64>, f64)> {
        let n = self.grid.len();
        let mut out = DMatrix::<f64>::zeros(n, n);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let b: Vec<f64> = (0..=i).map(|k| rhs(i, k)).collect();
            let (x, res) = self.solve_row(i, &b)?;
            worst = worst.max(res);
            for (k, v) in x.into_iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        if worst > RESIDUAL_LIMIT {
            return Err(Error::ResidualExceeded {
                residual: worst,
                limit: RESIDUAL_LIMIT,
            });
        }
        Ok((out, worst))
    }

    /// `L` for an arbitrary forcing `f(t_i, s)` evaluated at midpoints.
    pub fn solve_l_with(&self, forcing: impl Fn(f64, f64) -> f64) -> Result<(DMatrix<f64>, f64)> {
        let times = self.grid.times();
        self.solve_rows(|i, k| forcing(times[i], self.mids[k]))
    }

    /// `q` for a right-hand side `φ` given at the grid times; midpoint values
    /// interpolate linearly with `φ(0) = 1`.
    pub fn solve_q_with(&self, phi: &[f64]) -> Result<(DMatrix<f64>, f64)> {
        let n = self.grid.len();
        if phi.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: phi.len(),
            });
        }
        let at_mid: Vec<f64> = (0..n)
            .map(|k| {
                let left = if k == 0 { 1.0 } else { phi[k - 1] };
                0.5 * (left + phi[k])
            })
            .collect();
        self.solve_rows(|_, k| at_mid[k])
    }
}

fn check_mixed_hurst(h: f64) -> Result<()> {
    if h > 0.5 && h < 1.0 {
        Ok(())
    } else {
        domain(format!("mixed fBm equations need 1/2 < H < 1, got {h}"))
    }
}

/// Doolittle factorization without pivoting; unit lower factor implicit.
fn factor_no_pivot(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut lu = a.clone();
    for k in 0..n {
        let pivot = lu[(k, k)];
        if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
            return Err(Error::SingularSystem(format!("pivot {k} is {pivot:e}")));
        }
        for r in k + 1..n {
            let f = lu[(r, k)] / pivot;
            lu[(r, k)] = f;
            if f != 0.0 {
                for c in k + 1..n {
                    lu[(r, c)] -= f * lu[(k, c)];
                }
            }
        }
    }
    Ok(lu)
}

/// `L(t_i, ·)` at the cell midpoints, row `i` filled on cells `0..=i`.
pub fn solve_l(grid: &TimeGrid, h: f64) -> Result<DMatrix<f64>> {
    let sys = NystromSystem::new(grid, h, 1.0)?;
    let c = h * (2.0 * h - 1.0);
    let p = 2.0 * h - 2.0;
    Ok(sys.solve_l_with(|t, s| -c * (t - s).abs().powf(p))?.0)
}

/// `φ(t_i) = 1 - Σ_l L(t_i, m_l) Δ_l`.
pub fn compute_phi(l: &DMatrix<f64>, grid: &TimeGrid) -> Result<Vec<f64>> {
    let n = grid.len();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::GridMismatch(format!(
            "L is {}x{} but the grid has {n} points",
            l.nrows(),
            l.ncols()
        )));
    }
    Ok((0..n)
        .map(|i| 1.0 - (0..=i).map(|k| l[(i, k)] * grid.cell_width(k)).sum::<f64>())
        .collect())
}

/// `q(t_i, ·)` at the cell midpoints.
pub fn solve_q(grid: &TimeGrid, h: f64, phi: &[f64]) -> Result<DMatrix<f64>> {
    Ok(NystromSystem::new(grid, h, 1.0)?.solve_q_with(phi)?.0)
}

/// The kernel `-∂_s ∫_s^t q(t,x) dx` by differencing the cumulative integral.
///
/// For `q` constant on cells this reproduces `q` itself. It is kept for
/// comparison; its Gram matrix does not reproduce the mixed fBm covariance,
/// see [`innovation_kernel`] for the kernel used by the model.
pub fn mfbm_kernel(q: &DMatrix<f64>, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let n = grid.len();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::GridMismatch(format!(
            "q is {}x{} but the grid has {n} points",
            q.nrows(),
            q.ncols()
        )));
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        // I(t_i, x_l) = ∫_{x_l}^{t_i} q(t_i, x) dx on the cell boundaries x_l.
        let mut cumulative = vec![0.0; i + 2];
        for l in (0..=i).rev() {
            cumulative[l] = cumulative[l + 1] + q[(i, l)] * grid.cell_width(l);
        }
        for l in 0..=i {
            k[(i, l)] = -(cumulative[l + 1] - cumulative[l]) / grid.cell_width(l);
        }
    }
    Ok(k)
}

/// Covariance `min(t,s) + R_H(t,s)` of the mixed fBm.
pub fn mfbm_covariance(t: f64, s: f64, h: f64) -> Result<f64> {
    Ok(t.min(s) + fbm_covariance(t, s, h)?)
}

/// Volterra kernel of `M` with respect to the martingale `W̃_t = Σ_l q(t,m_l) ΔM_l`.
///
/// Returns `(K̃, dv)` where `K̃[(i, j)]` is constant on cell `j` and
/// `dv_j = Var(W̃_{t_j}) - Var(W̃_{t_{j-1}})`.
pub fn innovation_kernel(q: &DMatrix<f64>, grid: &TimeGrid, h: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = grid.len();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::GridMismatch(format!(
            "q is {}x{} but the grid has {n} points",
            q.nrows(),
            q.ncols()
        )));
    }
    let times = grid.times();
    let bounds: Vec<f64> = std::iter::once(0.0).chain(times.iter().copied()).collect();
    // cov_inc[(i, l)] = Cov(M_{t_i}, ΔM_l) for every cell l.
    let mut cov_inc = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let mut prev = 0.0;
        for l in 0..n {
            let cur = mfbm_covariance(times[i], bounds[l + 1], h)?;
            cov_inc[(i, l)] = cur - prev;
            prev = cur;
        }
    }
    // C[(i, j)] = Cov(M_{t_i}, W̃_{t_j}).
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = (0..=j).map(|l| q[(j, l)] * cov_inc[(i, l)]).sum();
        }
    }
    // Var(W̃_{t_j}) = q_jᵀ Σ q_j with Σ the covariance of the cell increments.
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for l in 0..n {
        for m in 0..=l {
            let c = cell_cov(&bounds, l, m, h)?;
            sigma[(l, m)] = c;
            sigma[(m, l)] = c;
        }
    }
    let mut v = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for l in 0..=j {
            let row: f64 = (0..=j).map(|m| sigma[(l, m)] * q[(j, m)]).sum();
            acc += q[(j, l)] * row;
        }
        v[j] = acc;
    }
    let mut dv = Vec::with_capacity(n);
    let mut prev = 0.0;
    for (j, &vj) in v.iter().enumerate() {
        let d = vj - prev;
        if !(d > 0.0) {
            return Err(Error::ZeroDiagonal { index: j, value: d });
        }
        dv.push(d);
        prev = vj;
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let before = if j == 0 { 0.0 } else { c[(i, j - 1)] };
            k[(i, j)] = (c[(i, j)] - before) / dv[j];
        }
    }
    Ok((k, dv))
}

/// `Cov(ΔM_l, ΔM_m)` for cells `l`, `m` with boundaries `bounds`.
fn cell_cov(bounds: &[f64], l: usize, m: usize, h: f64) -> Result<f64> {
    let r = |a: f64, b: f64| mfbm_covariance(a, b, h);
    Ok(r(bounds[l + 1], bounds[m + 1])? - r(bounds[l + 1], bounds[m])? - r(bounds[l], bounds[m + 1])?
        + r(bounds[l], bounds[m])?)
}

/// All Wiener–Hopf quantities on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WhSolution {
    pub grid: TimeGrid,
    pub h: f64,
    pub l: DMatrix<f64>,
    pub phi: Vec<f64>,
    pub q: DMatrix<f64>,
    /// Kernel against `W̃`, constant on cells.
    pub ktilde: DMatrix<f64>,
    /// Bracket increments of `W̃`.
    pub dv: Vec<f64>,
    pub residual_l: f64,
    pub residual_q: f64,
}

impl WhSolution {
    pub fn solve(grid: &TimeGrid, h: f64) -> Result<Self> {
        let sys = NystromSystem::new(grid, h, 1.0)?;
        let c = h * (2.0 * h - 1.0);
        let p = 2.0 * h - 2.0;
        let (l, residual_l) = sys.solve_l_with(|t, s| -c * (t - s).abs().powf(p))?;
        let phi = compute_phi(&l, grid)?;
        let (q, residual_q) = sys.solve_q_with(&phi)?;
        let (ktilde, dv) = innovation_kernel(&q, grid, h)?;
        Ok(Self {
            grid: grid.clone(),
            h,
            l,
            phi,
            q,
            ktilde,
            dv,
            residual_l,
            residual_q,
        })
    }

    /// Kernel rescaled to a standard Brownian driver, `K̃ sqrt(dv_j / Δt_j)`.
    pub fn brownian_kernel(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut k = self.ktilde.clone();
        for j in 0..n {
            let f = (self.dv[j] / self.grid.cell_width(j)).sqrt();
            for i in j..n {
                k[(i, j)] *= f;
            }
        }
        k
    }

    /// Largest relative error of `Σ_j K̃(t_i,·)K̃(t_k,·) dv_j` against the
    /// mixed fBm covariance over pairs with `min_index <= i, k < n - 1`.
    pub fn covariance_error(&self, min_index: usize) -> Result<f64> {
        gram_error(&self.ktilde, &self.dv, &self.grid, self.h, min_index)
    }
}

/// Relative Gram error of a cell kernel against `min + R_H`.
pub fn gram_error(
    k: &DMatrix<f64>,
    dv: &[f64],
    grid: &TimeGrid,
    h: f64,
    min_index: usize,
) -> Result<f64> {
    let n = grid.len();
    let times = grid.times();
    let mut worst: f64 = 0.0;
    for i in min_index..n.saturating_sub(1) {
        for m in min_index..=i {
            let g: f64 = (0..=m).map(|j| k[(i, j)] * k[(m, j)] * dv[j]).sum();
            let want = mfbm_covariance(times[i], times[m], h)?;
            worst = worst.max(((g - want) / want).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let sys = NystromSystem::new(&grid, 0.75, 1.0).unwrap();
        let (l, res) = sys.solve_l_with(|_, _| 0.0).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
        assert_eq!(res, 0.0);
    }

    #[test]
    fn residuals_small_at_n64() {
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let sol = WhSolution::solve(&grid, 0.75).unwrap();
        assert!(sol.residual_l <= RESIDUAL_LIMIT);
        assert!(sol.residual_q <= RESIDUAL_LIMIT);
    }

    #[test]
    fn identity_hook_returns_phi() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let sys = NystromSystem::new(&grid, 0.75, 0.0).unwrap();
        let phi: Vec<f64> = (0..8).map(|i| 1.0 - 0.05 * i as f64).collect();
        let (q, _) = sys.solve_q_with(&phi).unwrap();
        for i in 0..8 {
            for k in 0..=i {
                let left = if k == 0 { 1.0 } else { phi[k - 1] };
                assert_abs_diff_eq!(q[(i, k)], 0.5 * (left + phi[k]), epsilon = 1e-15);
            }
        }
        let (q0, _) = sys.solve_q_with(&[0.0; 8]).unwrap();
        // φ(0) = 1 anchors the first midpoint.
        assert!(q0.iter().skip(1).all(|&v| v == 0.0 || v == 0.5));
    }

    #[test]
    fn phi_of_zero_l_is_one() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let phi = compute_phi(&DMatrix::zeros(5, 5), &grid).unwrap();
        assert_eq!(phi, vec![1.0; 5]);
        assert!(compute_phi(&DMatrix::zeros(4, 4), &grid).is_err());
    }

    #[test]
    fn phi_tends_to_one_near_zero() {
        let grid = TimeGrid::uniform(1.0, 128).unwrap();
        let l = solve_l(&grid, 0.75).unwrap();
        let phi = compute_phi(&l, &grid).unwrap();
        assert!((phi[0] - 1.0).abs() < (phi[127] - 1.0).abs());
        assert!(phi.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn phi_regression_and_self_convergence() {
        let phi_at = |n: usize| {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            compute_phi(&solve_l(&grid, 0.75).unwrap(), &grid).unwrap()
        };
        let (p64, p128, p256) = (phi_at(64), phi_at(128), phi_at(256));
        assert_abs_diff_eq!(p128[127], 1.374_407_038_993_239_5, epsilon = 1e-10);
        let mut d1: f64 = 0.0;
        let mut d2: f64 = 0.0;
        for i in 0..64 {
            d1 = d1.max((p128[2 * i + 1] - p64[i]).abs());
            d2 = d2.max((p256[4 * i + 3] - p128[2 * i + 1]).abs());
        }
        assert!(d2 < d1, "{d2} vs {d1}");
    }

    #[test]
    fn literal_kernel_of_constant_q() {
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let mut q = DMatrix::zeros(6, 6);
        for i in 0..6 {
            for k in 0..=i {
                q[(i, k)] = 1.0;
            }
        }
        let k = mfbm_kernel(&q, &grid).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if j <= i { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(k[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn literal_kernel_misses_covariance() {
        // The differentiated-integral kernel equals q and is far from a
        // factor of min + R_H; the innovation kernel is not.
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let sol = WhSolution::solve(&grid, 0.75).unwrap();
        let literal = mfbm_kernel(&sol.q, &grid).unwrap();
        let dt: Vec<f64> = (0..32).map(|j| grid.cell_width(j)).collect();
        let literal_err = gram_error(&literal, &dt, &grid, 0.75, 1).unwrap();
        let innovation_err = sol.covariance_error(1).unwrap();
        assert!(literal_err > 0.2, "literal error {literal_err}");
        assert!(innovation_err < 0.02, "innovation error {innovation_err}");
    }

    #[test]
    fn covariance_reconstruction_improves_with_n() {
        let e64 = WhSolution::solve(&TimeGrid::uniform(1.0, 64).unwrap(), 0.75)
            .unwrap()
            .covariance_error(1)
            .unwrap();
        let e128 = WhSolution::solve(&TimeGrid::uniform(1.0, 128).unwrap(), 0.75)
            .unwrap()
            .covariance_error(1)
            .unwrap();
        assert!(e128 < e64, "{e128} vs {e64}");
        assert!(e128 < 0.02);
    }

    #[test]
    fn brownian_kernel_keeps_gram() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let sol = WhSolution::solve(&grid, 0.7).unwrap();
        let kb = sol.brownian_kernel();
        let dt: Vec<f64> = (0..16).map(|j| grid.cell_width(j)).collect();
        for i in 0..16 {
            let a: f64 = (0..=i).map(|j| kb[(i, j)].powi(2) * dt[j]).sum();
            let b: f64 = (0..=i).map(|j| sol.ktilde[(i, j)].powi(2) * sol.dv[j]).sum();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12 * b);
        }
    }

    #[test]
    fn rejects_rough_hurst() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        assert!(WhSolution::solve(&grid, 0.5).is_err());
        assert!(WhSolution::solve(&grid, 0.3).is_err());
    }
}

