//! Model descriptors: covariance, kernel, bracket and the grid discretization
//! of the kernel for fBm, ccmfBm and mixed fBm.
//!
//! A discrete kernel is a lower-triangular matrix `K̄` with `K̄[(i, j)]` the
//! value used for row time `t_i` on cell `j = [t_{j-1}, t_j)`. All drivers
//! are normalized to bracket `v(t) = t`.

use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{
    ccm_kernel, check_hurst, fbm_covariance, fbm_kernel, fbm_kernel_mass, fbm_psi, CcmParams,
};
use crate::quadrature::{integrate_fallible, legendre_nodes};
use crate::wiener_hopf::{mfbm_covariance, WhSolution};

/// Default absolute tolerance for kernel-level quadratures.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative target for cell averages of the closed-form prediction kernel,
/// which only serve as a reference for the discrete solve.
const PSI_CELL_RTOL: f64 = 1e-8;

/// Gauss–Legendre order for cells away from the kernel singularities.
const INTERIOR_POINTS: usize = 8;

/// How a kernel is reduced to one value per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellRule {
    /// Cell average of `K(t_i, ·)`.
    Mean,
    /// Root mean square of `K(t_i, ·)` with the sign of the mean. Row sums of
    /// squares reproduce `∫_0^{t_i} K(t_i,x)^2 dx`, i.e. the variance.
    #[default]
    Energy,
}

pub trait VolterraModel: fmt::Debug + Send + Sync {
    /// Short identifier, e.g. `fbm`.
    fn name(&self) -> &'static str;

    /// Parameter echo for manifests.
    fn describe(&self) -> String;

    fn covariance(&self, t: f64, s: f64) -> Result<f64>;

    /// Bracket `v(t)` of the driving martingale.
    fn bracket(&self, t: f64) -> f64 {
        t
    }

    /// `K(t, s)`; grid-backed models answer only for `t` on their grid.
    fn kernel(&self, t: f64, s: f64) -> Result<f64>;

    /// Discrete kernel matrix on `grid`, memoized per `(grid, rule)`.
    fn discrete_kernel(&self, grid: &TimeGrid, rule: CellRule) -> Result<Arc<DMatrix<f64>>>;

    /// `Ψ(t, s | u)` in closed form, when the model has one.
    fn closed_form_psi(&self, _t: f64, _s: f64, _u: f64) -> Option<Result<f64>> {
        None
    }

    /// Cell average of the closed-form `Ψ(t, · | u)` over `[lo, hi]`.
    fn closed_form_psi_cell(&self, _t: f64, _u: f64, _lo: f64, _hi: f64) -> Option<Result<f64>> {
        None
    }

    /// `R(t,s) - ∫_0^u K(t,x) K(s,x) dv(x)`.
    fn conditional_covariance(&self, t: f64, s: f64, u: f64) -> Result<f64>;
}

type CacheEntry = (TimeGrid, CellRule, Arc<DMatrix<f64>>);

/// Per-`(grid, rule)` cache of discrete kernels.
#[derive(Default)]
struct KernelCache {
    entries: Mutex<Vec<CacheEntry>>,
}

impl KernelCache {
    fn get_or_build(
        &self,
        grid: &TimeGrid,
        rule: CellRule,
        build: impl FnOnce() -> Result<DMatrix<f64>>,
    ) -> Result<Arc<DMatrix<f64>>> {
        {
            let entries = self.entries.lock().expect("kernel cache poisoned");
            if let Some((_, _, m)) = entries
                .iter()
                .find(|(g, r, _)| *r == rule && g.same_nodes(grid))
            {
                return Ok(Arc::clone(m));
            }
        }
        let m = Arc::new(build()?);
        self.entries
            .lock()
            .expect("kernel cache poisoned")
            .push((grid.clone(), rule, Arc::clone(&m)));
        Ok(m)
    }
}

impl fmt::Debug for KernelCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.entries.lock().map(|e| e.len()).unwrap_or(0);
        write!(f, "KernelCache({n} entries)")
    }
}

fn check_order(t: f64, s: f64, u: f64) -> Result<()> {
    if !(u >= 0.0 && u <= t.min(s)) {
        return Err(Error::Ordering(format!(
            "conditioning time u={u} must satisfy 0 <= u <= min(t, s) = {}",
            t.min(s)
        )));
    }
    Ok(())
}

/// Per-cell moments `(∫ K(t_i,x) dx, ∫ K(t_i,x)^2 dx)` of the fBm kernel for
/// cells `0..=i`.
///
/// Regular cells use Gauss–Legendre, the diagonal cell a Jacobi-weighted
/// adaptive rule. The cell touching 0 is the row total minus the rest, from
/// `∫_0^t K^2 = t^{2H}` and [`fbm_kernel_mass`].
fn fbm_row_moments(h: f64, tol: f64, grid: &TimeGrid, i: usize) -> Result<Vec<(f64, f64)>> {
    let alpha = h - 0.5;
    let t = grid.times()[i];
    let mut out = Vec::with_capacity(i + 1);
    if alpha == 0.0 {
        return Ok((0..=i).map(|j| (grid.cell_width(j), grid.cell_width(j))).collect());
    }
    let k = |x: f64| fbm_kernel(t, x, h, 1e-3 * tol).map(|e| e.value);
    out.push((0.0, 0.0));
    for j in 1..=i {
        let (lo, hi) = grid.cell(j);
        let width = hi - lo;
        let tol_cell = tol * width;
        let moments = if j == i {
            let m1 = integrate_fallible(lo, hi, 0.0, alpha, tol_cell, |x| {
                Ok(k(x)? / (hi - x).powf(alpha))
            })?;
            let m2 = integrate_fallible(lo, hi, 0.0, 2.0 * alpha, tol_cell, |x| {
                let v = k(x)?;
                Ok(v * v / (hi - x).powf(2.0 * alpha))
            })?;
            (m1.value, m2.value)
        } else {
            // Distance to the nearer singularity (0 or t) in cell widths.
            let clearance = lo.min(t - hi) / width;
            if clearance < 0.5 {
                let m1 = integrate_fallible(lo, hi, 0.0, 0.0, tol_cell, k)?;
                let m2 = integrate_fallible(lo, hi, 0.0, 0.0, tol_cell, |x| {
                    let v = k(x)?;
                    Ok(v * v)
                })?;
                (m1.value, m2.value)
            } else {
                let points = if clearance < 3.0 { 2 * INTERIOR_POINTS } else { INTERIOR_POINTS };
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for (x, w) in legendre_nodes(lo, hi, points) {
                    let v = k(x)?;
                    m1 += w * v;
                    m2 += w * v * v;
                }
                (m1, m2)
            }
        };
        out.push(moments);
    }
    let (rest1, rest2) = out[1..]
        .iter()
        .fold((0.0, 0.0), |acc, m| (acc.0 + m.0, acc.1 + m.1));
    out[0] = (fbm_kernel_mass(t, h)? - rest1, t.powf(2.0 * h) - rest2);
    Ok(out)
}

/// Fills a lower-triangular matrix from per-row cell moments.
fn assemble(
    grid: &TimeGrid,
    rule: CellRule,
    row_moments: impl Fn(usize) -> Result<Vec<(f64, f64)>>,
) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, (m1, m2)) in row_moments(i)?.into_iter().enumerate() {
            let width = grid.cell_width(j);
            m[(i, j)] = match rule {
                CellRule::Mean => m1 / width,
                CellRule::Energy => {
                    let rms = (m2.max(0.0) / width).sqrt();
                    if m1 < 0.0 {
                        -rms
                    } else {
                        rms
                    }
                }
            };
        }
    }
    Ok(m)
}

/// Conditional covariance `∫_u^{t∧s} K(t,x) K(s,x) dx` by quadrature.
///
/// `diag_exp` is the endpoint exponent of `K(r, x)` as `x -> r`.
fn continuum_conditional_cov(
    model: &dyn VolterraModel,
    t: f64,
    s: f64,
    u: f64,
    diag_exp: f64,
    tol: f64,
) -> Result<f64> {
    check_order(t, s, u)?;
    if u == 0.0 {
        return model.covariance(t, s);
    }
    let m = t.min(s);
    if u == m {
        return Ok(0.0);
    }
    let touching = (t == m) as u8 + (s == m) as u8;
    let e1 = diag_exp * touching as f64;
    let q = integrate_fallible(u, m, 0.0, e1, tol, |x| {
        let w = if e1 == 0.0 { 1.0 } else { (m - x).powf(e1) };
        Ok(model.kernel(t, x)? * model.kernel(s, x)? / w)
    })?;
    Ok(if t == s { q.value.max(0.0) } else { q.value })
}

/// Fractional Brownian motion with Hurst index `h`.
#[derive(Debug)]
pub struct FbmModel {
    h: f64,
    tol: f64,
    cache: KernelCache,
}

impl FbmModel {
    pub fn new(h: f64) -> Result<Self> {
        check_hurst(h)?;
        Ok(Self {
            h,
            tol: DEFAULT_TOL,
            cache: KernelCache::default(),
        })
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    pub fn with_tolerance(mut self, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return domain(format!("tolerance must be positive, got {tol}"));
        }
        self.tol = tol;
        Ok(self)
    }
}

impl VolterraModel for FbmModel {
    fn name(&self) -> &'static str {
        "fbm"
    }

    fn describe(&self) -> String {
        format!("fbm(H={})", self.h)
    }

    fn covariance(&self, t: f64, s: f64) -> Result<f64> {
        fbm_covariance(t, s, self.h)
    }

    fn kernel(&self, t: f64, s: f64) -> Result<f64> {
        Ok(fbm_kernel(t, s, self.h, self.tol)?.value)
    }

    fn discrete_kernel(&self, grid: &TimeGrid, rule: CellRule) -> Result<Arc<DMatrix<f64>>> {
        self.cache.get_or_build(grid, rule, || {
            assemble(grid, rule, |i| fbm_row_moments(self.h, self.tol, grid, i))
        })
    }

    fn closed_form_psi(&self, t: f64, s: f64, u: f64) -> Option<Result<f64>> {
        Some(fbm_psi(t, s, u, self.h, self.tol).map(|e| e.value))
    }

    fn closed_form_psi_cell(&self, t: f64, u: f64, lo: f64, hi: f64) -> Option<Result<f64>> {
        let alpha = self.h - 0.5;
        if alpha == 0.0 || t == u {
            return Some(Ok(0.0));
        }
        // Ψ behaves like s^{-alpha} at 0, and Ψ + 1 like (u-s)^{-alpha} times a
        // smooth factor at u.
        let e0 = if lo == 0.0 { -alpha } else { 0.0 };
        let e1 = if hi == u { -alpha } else { 0.0 };
        let shift = if hi == u { 1.0 } else { 0.0 };
        let scale = match fbm_psi(t, 0.5 * (lo + hi), u, self.h, self.tol) {
            Ok(e) => e.value.abs().max(1.0),
            Err(e) => return Some(Err(e)),
        };
        let target = PSI_CELL_RTOL * scale;
        let r = integrate_fallible(lo, hi, e0, e1, target * (hi - lo), |s| {
            let w = if e0 == 0.0 { 1.0 } else { (s - lo).powf(e0) }
                * if e1 == 0.0 { 1.0 } else { (hi - s).powf(e1) };
            Ok((fbm_psi(t, s, u, self.h, 1e-2 * target)?.value + shift) / w)
        });
        Some(r.map(|q| q.value / (hi - lo) - shift))
    }

    fn conditional_covariance(&self, t: f64, s: f64, u: f64) -> Result<f64> {
        let alpha = self.h - 0.5;
        continuum_conditional_cov(self, t, s, u, alpha, self.tol)
    }
}

/// Completely correlated mixed fBm `a W + b B^H` driven by `W`.
#[derive(Debug)]
pub struct CcmFbmModel {
    params: CcmParams,
    tol: f64,
    cache: KernelCache,
}

impl CcmFbmModel {
    pub fn new(a: f64, b: f64, h: f64) -> Result<Self> {
        Ok(Self {
            params: CcmParams::new(a, b, h)?,
            tol: DEFAULT_TOL,
            cache: KernelCache::default(),
        })
    }

    pub fn params(&self) -> &CcmParams {
        &self.params
    }
}

impl VolterraModel for CcmFbmModel {
    fn name(&self) -> &'static str {
        "ccmfbm"
    }

    fn describe(&self) -> String {
        let p = &self.params;
        format!("ccmfbm(a={}, b={}, H={})", p.a, p.b, p.h)
    }

    /// `a^2 min(t,s) + 2ab Cov(W_t, B^H_s)_sym + b^2 R_H(t,s)`, through the
    /// kernel factorization `∫_0^{t∧s} K(t,x) K(s,x) dx`.
    fn covariance(&self, t: f64, s: f64) -> Result<f64> {
        let p = &self.params;
        let m = t.min(s);
        if m <= 0.0 {
            return Ok(0.0);
        }
        // Cross term ∫_0^m K_H(r,x) dx: the total mass minus the part on (m, r).
        let cross = |r: f64| -> Result<f64> {
            if p.b == 0.0 {
                return Ok(0.0);
            }
            let mass = fbm_kernel_mass(r, p.h)?;
            if r == m {
                return Ok(mass);
            }
            let alpha = p.h - 0.5;
            let q = integrate_fallible(m, r, 0.0, alpha, self.tol, |x| {
                Ok(fbm_kernel(r, x, p.h, 1e-3 * self.tol)?.value / (r - x).powf(alpha))
            })?;
            Ok(mass - q.value)
        };
        Ok(p.a * p.a * m
            + p.a * p.b * (cross(t)? + cross(s)?)
            + p.b * p.b * fbm_covariance(t, s, p.h)?)
    }

    fn kernel(&self, t: f64, s: f64) -> Result<f64> {
        Ok(ccm_kernel(t, s, &self.params, self.tol)?.value)
    }

    fn discrete_kernel(&self, grid: &TimeGrid, rule: CellRule) -> Result<Arc<DMatrix<f64>>> {
        let p = self.params;
        self.cache.get_or_build(grid, rule, || {
            assemble(grid, rule, |i| {
                let row = fbm_row_moments(p.h, self.tol, grid, i)?;
                Ok(row
                    .into_iter()
                    .enumerate()
                    .map(|(j, (k1, k2))| {
                        let width = grid.cell_width(j);
                        (
                            p.a * width + p.b * k1,
                            p.a * p.a * width + 2.0 * p.a * p.b * k1 + p.b * p.b * k2,
                        )
                    })
                    .collect())
            })
        })
    }

    fn conditional_covariance(&self, t: f64, s: f64, u: f64) -> Result<f64> {
        // K(r, x) -> a as x -> r.
        continuum_conditional_cov(self, t, s, u, 0.0, self.tol)
    }
}

/// Mixed fBm `W + B^H` with independent components, backed by a Wiener–Hopf
/// solution; every time argument must be a node of its grid.
#[derive(Debug, Clone)]
pub struct MfbmModel {
    solution: Arc<WhSolution>,
    kernel: Arc<DMatrix<f64>>,
}

impl MfbmModel {
    pub fn new(solution: WhSolution) -> Self {
        let kernel = Arc::new(solution.brownian_kernel());
        Self {
            solution: Arc::new(solution),
            kernel,
        }
    }

    pub fn solve(grid: &TimeGrid, h: f64) -> Result<Self> {
        Ok(Self::new(WhSolution::solve(grid, h)?))
    }

    pub fn solution(&self) -> &WhSolution {
        &self.solution
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.solution.grid
    }
}

impl VolterraModel for MfbmModel {
    fn name(&self) -> &'static str {
        "mfbm"
    }

    fn describe(&self) -> String {
        format!("mfbm(H={}, n={})", self.solution.h, self.solution.grid.len())
    }

    fn covariance(&self, t: f64, s: f64) -> Result<f64> {
        mfbm_covariance(t, s, self.solution.h)
    }

    fn kernel(&self, t: f64, s: f64) -> Result<f64> {
        let grid = self.grid();
        let i = grid.index_of(t)?;
        if !(s > 0.0) {
            return domain(format!("kernel needs s > 0, got {s}"));
        }
        match grid.cell_containing(s) {
            Some(j) if j <= i && s < t => Ok(self.kernel[(i, j)]),
            _ => Ok(0.0),
        }
    }

    /// The Wiener–Hopf kernel already lives on cells; the rule is ignored.
    fn discrete_kernel(&self, grid: &TimeGrid, _rule: CellRule) -> Result<Arc<DMatrix<f64>>> {
        if !grid.same_nodes(self.grid()) {
            return Err(Error::GridMismatch(format!(
                "mixed fBm kernel was solved on {} points up to {}, requested {} up to {}",
                self.grid().len(),
                self.grid().horizon(),
                grid.len(),
                grid.horizon()
            )));
        }
        Ok(Arc::clone(&self.kernel))
    }

    fn conditional_covariance(&self, t: f64, s: f64, u: f64) -> Result<f64> {
        check_order(t, s, u)?;
        let r = self.covariance(t, s)?;
        if u == 0.0 {
            return Ok(r);
        }
        let grid = self.grid();
        let (it, is, iu) = (grid.index_of(t)?, grid.index_of(s)?, grid.index_of(u)?);
        let seen: f64 = (0..=iu)
            .map(|j| self.kernel[(it, j)] * self.kernel[(is, j)] * grid.cell_width(j))
            .sum();
        let v = r - seen;
        Ok(if t == s { v.max(0.0) } else { v })
    }
}
