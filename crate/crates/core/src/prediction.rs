//! Conditional mean, covariance and law of the Gaussian part and of the
//! mixed process `X = G + J` given observations up to `u`.
//!
//! With `Ψ(t,·|u) = (K*)^{-1}[K(t,·) - K(u,·)]` the conditional mean is
//! `G_u + ∫_0^u Ψ(t,s|u) dG_s`, and for the mixed process
//! `X_u + ∫_0^u Ψ dG + λ(t-u)μ₁`. The conditional covariance adds
//! `λ(t∧s - u)μ₂` to the Gaussian one and does not depend on the path.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_lr;

use crate::error::{domain, Error, Result};
use crate::grid::SamplePath;
use crate::model::VolterraModel;
use crate::operators::{DiscreteOperator, PsiMethod};
use crate::simulation::{JumpDistribution, JumpSpec, MixedPath};

/// Largest accepted mass defect of a computed law.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Iterated convolutions switch from direct sums to FFT above this many terms.
const DIRECT_CONVOLUTION_TERMS: usize = 32;

/// Upper bound on value-grid cells.
const MAX_VALUE_CELLS: usize = 1 << 18;

/// Uniform value grid; cell `k` is `[lo + k h, lo + (k+1) h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub lo: f64,
    pub h: f64,
    pub len: usize,
}

impl ValueGrid {
    pub fn new(lo: f64, h: f64, len: usize) -> Result<Self> {
        if !lo.is_finite() || !(h > 0.0) || !h.is_finite() || len == 0 {
            return domain(format!("invalid value grid lo={lo}, h={h}, len={len}"));
        }
        if len > MAX_VALUE_CELLS {
            return domain(format!("value grid has {len} cells, limit is {MAX_VALUE_CELLS}"));
        }
        Ok(Self { lo, h, len })
    }

    /// Cells of width `h` covering `[lo, hi]`, with centers on `anchor + k h`.
    pub fn covering(lo: f64, hi: f64, h: f64, anchor: f64) -> Result<Self> {
        if !(hi > lo) {
            return domain(format!("empty value range [{lo}, {hi}]"));
        }
        let k0 = ((lo - anchor) / h - 0.5).floor();
        let k1 = ((hi - anchor) / h + 0.5).ceil();
        let len = (k1 - k0) as usize + 1;
        Self::new(anchor + (k0 - 0.5) * h, h, len)
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.h * self.len as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.h
    }

    pub fn edge(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.h
    }

    /// Grid with the same cells moved by `shift`.
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            lo: self.lo + shift,
            ..*self
        }
    }
}

/// Law made of masses on value-grid cells (uniform within a cell) and atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub grid: ValueGrid,
    pub masses: Vec<f64>,
    /// `(location, mass)`, sorted by location.
    pub atoms: Vec<(f64, f64)>,
}

impl DiscreteDistribution {
    pub fn empty(grid: ValueGrid) -> Self {
        Self {
            grid,
            masses: vec![0.0; grid.len],
            atoms: Vec::new(),
        }
    }

    pub fn atom(grid: ValueGrid, at: f64) -> Self {
        let mut d = Self::empty(grid);
        d.atoms.push((at, 1.0));
        d
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.atoms.iter().map(|a| a.1).sum::<f64>()
    }

    pub fn mass_defect(&self) -> f64 {
        (1.0 - self.total_mass()).abs()
    }

    pub fn mean(&self) -> f64 {
        let cells: f64 = self
            .masses
            .iter()
            .enumerate()
            .map(|(k, m)| m * self.grid.center(k))
            .sum();
        cells + self.atoms.iter().map(|(x, m)| x * m).sum::<f64>()
    }

    /// Variance, counting the spread of each cell mass within its cell.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let h2 = self.grid.h * self.grid.h / 12.0;
        let cells: f64 = self
            .masses
            .iter()
            .enumerate()
            .map(|(k, m)| m * ((self.grid.center(k) - mean).powi(2) + h2))
            .sum();
        cells + self.atoms.iter().map(|(x, m)| m * (x - mean).powi(2)).sum::<f64>()
    }

    /// Mass of `(-∞, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        let atoms: f64 = self
            .atoms
            .iter()
            .take_while(|a| a.0 <= x)
            .map(|a| a.1)
            .sum();
        let pos = (x - self.grid.lo) / self.grid.h;
        let cells = if pos <= 0.0 {
            0.0
        } else if pos >= self.grid.len as f64 {
            self.masses.iter().sum()
        } else {
            let k = pos.floor() as usize;
            self.masses[..k].iter().sum::<f64>() + self.masses[k] * (pos - k as f64)
        };
        atoms + cells
    }

    /// Cumulative masses at the right edge of every cell, atoms included.
    pub fn cell_cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut a = 0;
        (0..self.grid.len)
            .map(|k| {
                let right = self.grid.edge(k + 1);
                while a < self.atoms.len() && self.atoms[a].0 < right {
                    acc += self.atoms[a].1;
                    a += 1;
                }
                acc += self.masses[k];
                acc
            })
            .collect()
    }

    /// Masses with atoms folded into their cells.
    pub fn binned(&self) -> Vec<f64> {
        let mut out = self.masses.clone();
        for &(x, m) in &self.atoms {
            let k = ((x - self.grid.lo) / self.grid.h).floor();
            if k >= 0.0 && (k as usize) < out.len() {
                out[k as usize] += m;
            }
        }
        out
    }

    fn push_atom(&mut self, at: f64, mass: f64) {
        self.atoms.push((at, mass));
    }

    /// Sorts atoms and merges those closer than `1e-12` relative.
    fn normalize_atoms(&mut self) {
        self.atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(self.atoms.len());
        for &(x, m) in &self.atoms {
            match merged.last_mut() {
                Some(last) if (x - last.0).abs() <= 1e-12 * x.abs().max(1.0) => last.1 += m,
                _ => merged.push((x, m)),
            }
        }
        merged.retain(|a| a.1 > 0.0);
        self.atoms = merged;
    }
}

/// `P(a <= Z < b)` for a standard normal `Z`, accurate in both tails.
fn normal_interval(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (erfc(a * s) - erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * s) - erfc(-a * s))
    } else {
        1.0 - 0.5 * (erfc(-a * s) + erfc(b * s))
    }
}

/// Adds `weight · N(mean, var)` to the cells of `dist`.
fn add_normal(dist: &mut DiscreteDistribution, weight: f64, mean: f64, var: f64) {
    let sd = var.sqrt();
    let g = dist.grid;
    let reach = 10.0 * sd;
    let first = (((mean - reach - g.lo) / g.h).floor().max(0.0)) as usize;
    let last = ((((mean + reach - g.lo) / g.h).ceil()).max(0.0) as usize).min(g.len);
    for k in first..last {
        let a = (g.edge(k) - mean) / sd;
        let b = (g.edge(k + 1) - mean) / sd;
        dist.masses[k] += weight * normal_interval(a, b);
    }
}

/// Linear convolution; FFT when both inputs are long.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 || a.len() * b.len() <= 1 << 16 {
        let mut out = vec![0.0; n];
        for (i, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / size as f64;
    // Masses are nonnegative; rounding noise below zero is dropped.
    fa[..n].iter().map(|c| (c.re * scale).max(0.0)).collect()
}

/// Poisson tail control for a compound Poisson law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailMeta {
    /// Largest jump count kept.
    pub n_max: usize,
    /// `P(N > n_max)`.
    pub tail_mass: f64,
}

/// Smallest `N` with `P(Poisson(mu) > N) <= tail_tol`.
pub fn poisson_truncation(mu: f64, tail_tol: f64) -> Result<TailMeta> {
    if !(tail_tol > 0.0) {
        return domain(format!("tail tolerance must be positive, got {tail_tol}"));
    }
    if mu == 0.0 {
        return Ok(TailMeta { n_max: 0, tail_mass: 0.0 });
    }
    let mut n = 0usize;
    loop {
        // P(N > n) = P(n + 1, mu), the regularized lower incomplete gamma.
        let tail = gamma_lr(n as f64 + 1.0, mu);
        if tail <= tail_tol {
            return Ok(TailMeta { n_max: n, tail_mass: tail });
        }
        n += 1;
        if n > 100_000 {
            return Err(Error::SeriesDivergence { terms: n, last_term: tail });
        }
    }
}

/// Poisson probabilities `P(N = n)` for `n = 0..=n_max`.
fn poisson_weights(mu: f64, n_max: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n_max + 1);
    let mut p = (-mu).exp();
    for n in 0..=n_max {
        w.push(p);
        p *= mu / (n as f64 + 1.0);
    }
    w
}

/// Law of `J_u + (J_{u+τ} - J_u)` on `vgrid`, truncated at `N_max` jumps.
///
/// The no-jump term is an exact atom at `J_u`. Normal jumps use the closed
/// form `F^{*n} = N(n m, n s²)`, two-point jumps exact binomial atoms and
/// uniform jumps iterated convolution of cell masses.
pub fn compound_poisson_law(
    spec: &JumpSpec,
    tau: f64,
    j_u: f64,
    vgrid: ValueGrid,
    tail_tol: f64,
) -> Result<(DiscreteDistribution, TailMeta)> {
    spec.validate()?;
    if !(tau >= 0.0) {
        return domain(format!("horizon increment must be >= 0, got {tau}"));
    }
    let mu = spec.lambda * tau;
    let meta = poisson_truncation(mu, tail_tol)?;
    let weights = poisson_weights(mu, meta.n_max);
    let mut dist = DiscreteDistribution::empty(vgrid);
    dist.push_atom(j_u, weights[0]);
    match spec.dist {
        JumpDistribution::Normal { mean, var } => {
            for (n, &w) in weights.iter().enumerate().skip(1) {
                let nf = n as f64;
                if var == 0.0 {
                    dist.push_atom(j_u + nf * mean, w);
                } else {
                    add_normal(&mut dist, w, j_u + nf * mean, nf * var);
                }
            }
        }
        JumpDistribution::TwoPoint { x1, p, x2 } => {
            for (n, &w) in weights.iter().enumerate().skip(1) {
                // Binomial(n, p) count of x1 jumps.
                let mut b = (1.0 - p).powi(n as i32);
                for k in 0..=n {
                    let at = j_u + k as f64 * x1 + (n - k) as f64 * x2;
                    if p == 1.0 {
                        b = if k == n { 1.0 } else { 0.0 };
                    }
                    dist.push_atom(at, w * b);
                    if p < 1.0 {
                        b *= (n - k) as f64 / (k as f64 + 1.0) * p / (1.0 - p);
                    }
                }
            }
        }
        JumpDistribution::Uniform { lo, hi } => {
            add_uniform_powers(&mut dist, &weights, lo, hi, j_u)?;
        }
    }
    dist.normalize_atoms();
    let defect = (1.0 - meta.tail_mass - dist.total_mass()).abs();
    if defect > MASS_TOLERANCE {
        return Err(Error::GridTooNarrow { mass_defect: defect });
    }
    Ok((dist, meta))
}

/// Adds `Σ_{n>=1} w_n F^{*n}(· - shift)` for uniform `F` on `[lo, hi]`.
///
/// `F` is discretized on the lattice `k h` (cell masses), powers are taken
/// on that lattice and each lattice point is split linearly between the two
/// nearest cell centers of the target grid, which keeps the mean exact.
fn add_uniform_powers(
    dist: &mut DiscreteDistribution,
    weights: &[f64],
    lo: f64,
    hi: f64,
    shift: f64,
) -> Result<()> {
    let h = dist.grid.h;
    let k0 = (lo / h - 0.5).floor() as i64;
    let k1 = (hi / h + 0.5).ceil() as i64;
    let base: Vec<f64> = (k0..=k1)
        .map(|k| {
            let a = (k as f64 - 0.5) * h;
            let b = (k as f64 + 0.5) * h;
            ((b.min(hi) - a.max(lo)) / (hi - lo)).max(0.0)
        })
        .collect();
    let n_max = weights.len() - 1;
    let mut power = vec![1.0];
    for (n, &w) in weights.iter().enumerate().skip(1) {
        power = if n_max <= DIRECT_CONVOLUTION_TERMS {
            direct_convolve(&power, &base)
        } else {
            convolve(&power, &base)
        };
        let start = n as i64 * k0;
        for (idx, &m) in power.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let x = shift + (start + idx as i64) as f64 * h;
            spread_point(dist, x, w * m);
        }
    }
    Ok(())
}

fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Splits a point mass at `x` between the two nearest cell centers.
fn spread_point(dist: &mut DiscreteDistribution, x: f64, mass: f64) {
    let g = dist.grid;
    let pos = (x - g.lo) / g.h - 0.5;
    let k = pos.floor();
    let frac = pos - k;
    let k = k as i64;
    for (idx, m) in [(k, mass * (1.0 - frac)), (k + 1, mass * frac)] {
        if idx >= 0 && (idx as usize) < g.len {
            dist.masses[idx as usize] += m;
        }
    }
}

/// Observation of the mixed process up to some time, with its split into
/// Gaussian and jump parts when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: SamplePath,
    pub g: Option<SamplePath>,
    pub j: Option<SamplePath>,
}

impl From<&MixedPath> for Observation {
    fn from(p: &MixedPath) -> Self {
        Self {
            x: p.x.clone(),
            g: Some(p.g.clone()),
            j: Some(p.j.clone()),
        }
    }
}

impl Observation {
    /// Gaussian observation only.
    pub fn gaussian(g: SamplePath) -> Self {
        Self {
            x: g.clone(),
            g: Some(g),
            j: None,
        }
    }

    /// `(G path, J_u)`; a missing part is recovered from `X = G + J`.
    fn decomposed(&self, iu: usize) -> Result<(&SamplePath, f64)> {
        if self.x.len() <= iu {
            return Err(Error::InsufficientObservations(format!(
                "path has {} values, need {}",
                self.x.len(),
                iu + 1
            )));
        }
        match (&self.g, &self.j) {
            (Some(g), Some(j)) => Ok((g, j.values()[iu])),
            (Some(g), None) => Ok((g, self.x.values()[iu] - g.values()[iu])),
            _ => Err(Error::MissingDecomposition(
                "prediction needs the Gaussian part of the observed path".into(),
            )),
        }
    }
}

/// Weights `w` with `m̂ = Σ_{i<=iu} w_i G_{t_i}`.
pub fn mean_weights(op: &DiscreteOperator, u: f64, t: f64, method: PsiMethod) -> Result<Vec<f64>> {
    let iu = op.grid().index_of(u)?;
    let psi = op.discrete_psi(t, u, method)?;
    // G_u + Σ_j Ψ_j (G_j - G_{j-1}) regrouped by G_j.
    Ok((0..=iu)
        .map(|j| {
            let next = if j < iu { psi[j + 1] } else { 0.0 };
            psi[j] - next + if j == iu { 1.0 } else { 0.0 }
        })
        .collect())
}

fn check_observed(op: &DiscreteOperator, g: &SamplePath, iu: usize) -> Result<()> {
    if g.len() <= iu {
        return Err(Error::InsufficientObservations(format!(
            "path has {} values, need {}",
            g.len(),
            iu + 1
        )));
    }
    let ours = &op.grid().times()[..=iu];
    let theirs = &g.grid().times()[..=iu];
    let tol = 1e-12 * op.grid().horizon().max(1.0);
    if ours.iter().zip(theirs).any(|(a, b)| (a - b).abs() > tol) {
        return Err(Error::GridMismatch("observed path is not on the operator grid".into()));
    }
    Ok(())
}

/// `G_u + ∫_0^u Ψ(t,s|u) dG_s` with `Ψ` from `method`.
pub fn gvp_conditional_mean_with(
    op: &DiscreteOperator,
    g: &SamplePath,
    u: f64,
    t: f64,
    method: PsiMethod,
) -> Result<f64> {
    let iu = op.grid().index_of(u)?;
    check_observed(op, g, iu)?;
    let psi = op.discrete_psi(t, u, method)?;
    let inc = g.increments();
    Ok(g.values()[iu] + (0..=iu).map(|j| psi[j] * inc[j]).sum::<f64>())
}

/// Conditional mean of `G_t` given `G` on grid times `<= u`.
pub fn gvp_conditional_mean(op: &DiscreteOperator, g: &SamplePath, u: f64, t: f64) -> Result<f64> {
    gvp_conditional_mean_with(op, g, u, t, PsiMethod::Solve)
}

/// `R̂(t,s|u)` from the model (continuum quadrature where available).
pub fn gvp_conditional_cov(model: &dyn VolterraModel, t: f64, s: f64, u: f64) -> Result<f64> {
    model.conditional_covariance(t, s, u)
}

/// `R̂(t,s|u)` of the discretized process, `Σ_{u<t_j} K̄(t,j) K̄(s,j) dv_j`.
pub fn discrete_conditional_cov(op: &DiscreteOperator, t: f64, s: f64, u: f64) -> Result<f64> {
    if !(u <= t.min(s)) {
        return Err(Error::Ordering(format!("need u <= min(t, s), got u={u}, t={t}, s={s}")));
    }
    let it = op.grid().index_of(t)?;
    let is = op.grid().index_of(s)?;
    let k = op.kernel_matrix();
    let first = if u == 0.0 { 0 } else { op.grid().index_of(u)? + 1 };
    Ok((first..=it.min(is))
        .map(|j| k[(it, j)] * k[(is, j)] * op.dv()[j])
        .sum())
}

fn conditional_cov_of(op: &DiscreteOperator, t: f64, s: f64, u: f64) -> Result<f64> {
    match op.model() {
        Some(m) => m.conditional_covariance(t, s, u),
        None => discrete_conditional_cov(op, t, s, u),
    }
}

/// `X_u + ∫_0^u Ψ dG + λ(t-u)μ₁`.
pub fn mixed_conditional_mean(
    op: &DiscreteOperator,
    spec: &JumpSpec,
    obs: &Observation,
    u: f64,
    t: f64,
) -> Result<f64> {
    let iu = op.grid().index_of(u)?;
    let (g, j_u) = obs.decomposed(iu)?;
    let gauss = gvp_conditional_mean(op, g, u, t)?;
    Ok(gauss + j_u + spec.lambda * (t - u) * spec.mu1())
}

/// `R̂_G(t,s|u) + λ(t∧s - u)μ₂`; takes no path.
pub fn mixed_conditional_cov(
    model: &dyn VolterraModel,
    spec: &JumpSpec,
    t: f64,
    s: f64,
    u: f64,
) -> Result<f64> {
    let gauss = gvp_conditional_cov(model, t, s, u)?;
    Ok(gauss + spec.lambda * (t.min(s) - u) * spec.mu2())
}

/// Conditional law of `X_t` with its moments and truncation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLaw {
    pub u: f64,
    pub t: f64,
    pub m_hat: f64,
    pub r_hat_tt: f64,
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
    pub lambda_term_mean: f64,
    pub lambda_term_var: f64,
    pub n_max: usize,
    pub tail_mass: f64,
    pub mass_defect: f64,
    pub density: DiscreteDistribution,
}

/// Value grid spanning `m ± width·sd` plus `N_max` times the jump reach, with
/// spacing `sd / cells_per_sd` (`sd` of the Gaussian part when positive).
pub fn default_value_grid(
    spec: &JumpSpec,
    m_hat: f64,
    gaussian_var: f64,
    total_var: f64,
    n_max: usize,
    width: f64,
) -> Result<ValueGrid> {
    let total_sd = total_var.max(0.0).sqrt();
    let pad = n_max as f64 * spec.dist.reach();
    let half = (width * total_sd + pad).max(1e-6);
    let gauss_sd = gaussian_var.max(0.0).sqrt();
    let scale = if gauss_sd > 0.0 { gauss_sd } else { half / 1000.0 };
    let mut h = scale / 40.0;
    let cells = 2.0 * half / h;
    if cells > (MAX_VALUE_CELLS / 2) as f64 {
        h = 2.0 * half / (MAX_VALUE_CELLS / 2) as f64;
    }
    ValueGrid::covering(m_hat - half, m_hat + half, h, m_hat)
}

/// Conditional law of `X_t` given the decomposed observation up to `u`.
///
/// The Gaussian part `N(m̂^G, R̂_G)` is convolved with the compound Poisson
/// law: atoms turn into shifted normals exactly, cell masses through a
/// discrete convolution on a grid aligned with `vgrid`. Without Gaussian
/// variance the jump law is shifted by `m̂^G`. `vgrid = None` picks
/// [`default_value_grid`] with width 8.
pub fn mixed_conditional_density(
    op: &DiscreteOperator,
    spec: &JumpSpec,
    obs: &Observation,
    u: f64,
    t: f64,
    vgrid: Option<ValueGrid>,
    tail_tol: f64,
) -> Result<PredictionLaw> {
    match vgrid {
        Some(v) => conditional_law(op, spec, obs, u, t, tail_tol, &|_, _, _, _| Ok(v)),
        None => mixed_conditional_density_with_width(op, spec, obs, u, t, 8.0, tail_tol),
    }
}

/// [`mixed_conditional_density`] on the [`default_value_grid`] of half-width
/// `width` standard deviations.
pub fn mixed_conditional_density_with_width(
    op: &DiscreteOperator,
    spec: &JumpSpec,
    obs: &Observation,
    u: f64,
    t: f64,
    width: f64,
    tail_tol: f64,
) -> Result<PredictionLaw> {
    if !(width > 0.0 && width.is_finite()) {
        return domain(format!("value-grid width must be positive, got {width}"));
    }
    conditional_law(op, spec, obs, u, t, tail_tol, &|m_hat, var_g, r_hat, n_max| {
        default_value_grid(spec, m_hat, var_g, r_hat, n_max, width)
    })
}

type GridChoice<'a> = dyn Fn(f64, f64, f64, usize) -> Result<ValueGrid> + 'a;

fn conditional_law(
    op: &DiscreteOperator,
    spec: &JumpSpec,
    obs: &Observation,
    u: f64,
    t: f64,
    tail_tol: f64,
    choose_grid: &GridChoice<'_>,
) -> Result<PredictionLaw> {
    let iu = op.grid().index_of(u)?;
    let (g, j_u) = obs.decomposed(iu)?;
    let m_g = gvp_conditional_mean(op, g, u, t)?;
    let var_g = conditional_cov_of(op, t, t, u)?;
    let tau = t - u;
    let meta = poisson_truncation(spec.lambda * tau, tail_tol)?;
    let lambda_term_mean = spec.lambda * tau * spec.mu1();
    let lambda_term_var = spec.lambda * tau * spec.mu2();
    let m_hat = m_g + j_u + lambda_term_mean;
    let r_hat_tt = var_g + lambda_term_var;
    let vgrid = choose_grid(m_hat, var_g, r_hat_tt, meta.n_max)?;
    // Degenerate Gaussian part: the law is the jump law moved by m̂^G.
    let degenerate = !(var_g > 1e-14 * (1.0 + m_g * m_g));
    let jgrid = vgrid.shifted(-m_g);
    let (jumps, meta) = compound_poisson_law(spec, tau, j_u, jgrid, tail_tol)?;
    let mut law = DiscreteDistribution::empty(vgrid);
    if degenerate {
        law.masses.clone_from(&jumps.masses);
        law.atoms = jumps.atoms.iter().map(|&(x, m)| (x + m_g, m)).collect();
    } else {
        for &(x, m) in &jumps.atoms {
            add_normal(&mut law, m, x + m_g, var_g);
        }
        if jumps.masses.iter().any(|&m| m > 0.0) {
            let sd = var_g.sqrt();
            let reach = (10.0 * sd / vgrid.h).ceil() as i64;
            let kernel: Vec<f64> = (-reach..=reach)
                .map(|d| {
                    let c = d as f64 * vgrid.h;
                    normal_interval((c - 0.5 * vgrid.h) / sd, (c + 0.5 * vgrid.h) / sd)
                })
                .collect();
            let conv = convolve(&jumps.masses, &kernel);
            for (k, slot) in law.masses.iter_mut().enumerate() {
                if let Some(&v) = conv.get(k + reach as usize) {
                    *slot += v;
                }
            }
        }
    }
    let mass_defect = (1.0 - meta.tail_mass - law.total_mass()).abs();
    if mass_defect > MASS_TOLERANCE {
        return Err(Error::GridTooNarrow { mass_defect });
    }
    Ok(PredictionLaw {
        u,
        t,
        m_hat,
        r_hat_tt,
        gaussian_mean: m_g,
        gaussian_var: var_g,
        lambda_term_mean,
        lambda_term_var,
        n_max: meta.n_max,
        tail_mass: meta.tail_mass,
        mass_defect,
        density: law,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::model::{CellRule, FbmModel};
    use crate::operators::build_operator;
    use crate::simulation::simulate_mixed;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn setup(h: f64, n: usize) -> (Arc<FbmModel>, DiscreteOperator) {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let model = Arc::new(FbmModel::new(h).unwrap());
        let op = build_operator(model.clone(), &grid, CellRule::Energy).unwrap();
        (model, op)
    }

    fn normal_jumps() -> JumpSpec {
        JumpSpec::new(5.0, JumpDistribution::Normal { mean: 0.1, var: 0.04 }).unwrap()
    }

    #[test]
    fn poisson_truncation_meets_tolerance() {
        let m = poisson_truncation(1.25, 1e-8).unwrap();
        assert!(m.tail_mass <= 1e-8);
        let prev = gamma_lr(m.n_max as f64, 1.25);
        assert!(prev > 1e-8);
        assert_eq!(poisson_truncation(0.0, 1e-8).unwrap().n_max, 0);
    }

    #[test]
    fn convolution_paths_agree() {
        let a: Vec<f64> = (0..300).map(|i| ((i * 13 % 7) as f64) / 7.0).collect();
        let b: Vec<f64> = (0..500).map(|i| ((i * 5 % 11) as f64) / 11.0).collect();
        let fft = convolve(&a, &b);
        let direct = direct_convolve(&a, &b);
        for (x, y) in fft.iter().zip(&direct) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_horizon_law_is_unit_atom() {
        let v = ValueGrid::new(-1.0, 0.01, 200).unwrap();
        let (d, meta) = compound_poisson_law(&normal_jumps(), 0.0, 0.3, v, 1e-8).unwrap();
        assert_eq!(d.atoms, vec![(0.3, 1.0)]);
        assert_eq!(meta.n_max, 0);
        assert!(d.masses.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn normal_jump_law_weights() {
        let v = ValueGrid::covering(-3.0, 6.0, 0.005, 0.0).unwrap();
        let spec = normal_jumps();
        let (d, meta) = compound_poisson_law(&spec, 0.1, 0.2, v, 1e-10).unwrap();
        assert_abs_diff_eq!(d.atoms[0].1, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.total_mass(), 1.0 - meta.tail_mass, epsilon = 1e-9);
        assert_abs_diff_eq!(d.mean(), 0.2 + 0.5 * 0.1, epsilon = 1e-6);
        let var = 0.5 * spec.mu2();
        assert_abs_diff_eq!(d.variance(), var, epsilon = 1e-5);
    }

    #[test]
    fn two_point_law_is_atomic() {
        let v = ValueGrid::covering(-10.0, 10.0, 0.01, 0.0).unwrap();
        let spec = JumpSpec::new(5.0, JumpDistribution::TwoPoint { x1: 0.5, p: 0.3, x2: -0.2 }).unwrap();
        let (d, meta) = compound_poisson_law(&spec, 0.25, 0.0, v, 1e-8).unwrap();
        assert!(d.masses.iter().all(|&m| m == 0.0));
        assert_abs_diff_eq!(d.total_mass(), 1.0 - meta.tail_mass, epsilon = 1e-12);
        assert_abs_diff_eq!(d.mean(), 1.25 * spec.mu1(), epsilon = 1e-7);
        assert_abs_diff_eq!(d.variance(), 1.25 * spec.mu2() - 0.0, epsilon = 1e-6);
    }

    #[test]
    fn uniform_law_moments_both_paths() {
        let v = ValueGrid::covering(-5.0, 40.0, 0.01, 0.0).unwrap();
        for lambda in [5.0, 60.0] {
            let spec = JumpSpec::new(lambda, JumpDistribution::Uniform { lo: -0.2, hi: 0.6 }).unwrap();
            let (d, meta) = compound_poisson_law(&spec, 0.25, 0.1, v, 1e-8).unwrap();
            let mu = lambda * 0.25;
            assert_abs_diff_eq!(d.total_mass(), 1.0 - meta.tail_mass, epsilon = 1e-9);
            assert_abs_diff_eq!(d.mean(), 0.1 + mu * spec.mu1(), epsilon = 1e-6 * (1.0 + mu));
            assert_abs_diff_eq!(d.variance(), mu * spec.mu2(), epsilon = 10.0 * v.h * (1.0 + mu));
        }
    }

    #[test]
    fn narrow_grid_is_reported() {
        let v = ValueGrid::new(0.0, 0.01, 10).unwrap();
        assert!(matches!(
            compound_poisson_law(&normal_jumps(), 1.0, 0.0, v, 1e-8),
            Err(Error::GridTooNarrow { .. })
        ));
    }

    #[test]
    fn brownian_mean_is_last_value() {
        let (_, op) = setup(0.5, 16);
        let g = SamplePath::new(op.grid().clone(), (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        for &t in &op.grid().times()[7..] {
            assert_eq!(gvp_conditional_mean(&op, &g, 0.5, t).unwrap(), g.values()[7]);
        }
    }

    #[test]
    fn mean_at_conditioning_time() {
        let (_, op) = setup(0.75, 16);
        let g = SamplePath::new(op.grid().clone(), (0..16).map(|i| 0.1 * i as f64).collect()).unwrap();
        assert_eq!(gvp_conditional_mean(&op, &g, 0.5, 0.5).unwrap(), g.values()[7]);
        let short = SamplePath::new(op.grid().prefix(4).unwrap(), vec![0.0; 4]).unwrap();
        assert!(matches!(
            gvp_conditional_mean(&op, &short, 0.5, 0.75),
            Err(Error::InsufficientObservations(_))
        ));
    }

    #[test]
    fn mean_weights_match_stieltjes_sum() {
        let (_, op) = setup(0.75, 32);
        let g = SamplePath::new(op.grid().clone(), (0..32).map(|i| (0.3 * i as f64).cos()).collect()).unwrap();
        let w = mean_weights(&op, 0.5, 0.75, PsiMethod::Solve).unwrap();
        let via_w: f64 = w.iter().zip(g.values()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(via_w, gvp_conditional_mean(&op, &g, 0.5, 0.75).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn conditional_cov_matches_discrete_sum() {
        let (model, op) = setup(0.75, 64);
        for (t, s) in [(0.75, 0.75), (1.0, 0.75)] {
            let c = gvp_conditional_cov(model.as_ref(), t, s, 0.5).unwrap();
            let d = discrete_conditional_cov(&op, t, s, 0.5).unwrap();
            assert_abs_diff_eq!(c, d, epsilon = 0.02 * c);
        }
        assert_abs_diff_eq!(
            discrete_conditional_cov(&op, 0.75, 0.75, 0.0).unwrap(),
            model.covariance(0.75, 0.75).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn mixed_reduces_to_gaussian_without_jumps() {
        let (model, op) = setup(0.75, 32);
        let path = simulate_mixed(&op, &JumpSpec::none(), 3).unwrap();
        let obs = Observation::from(&path);
        let m = mixed_conditional_mean(&op, &JumpSpec::none(), &obs, 0.5, 0.75).unwrap();
        assert_eq!(m, gvp_conditional_mean(&op, &path.g, 0.5, 0.75).unwrap());
        let c = mixed_conditional_cov(model.as_ref(), &JumpSpec::none(), 0.75, 0.75, 0.5).unwrap();
        assert_eq!(c, gvp_conditional_cov(model.as_ref(), 0.75, 0.75, 0.5).unwrap());
    }

    #[test]
    fn missing_decomposition() {
        let (_, op) = setup(0.75, 8);
        let x = SamplePath::zeros(op.grid().clone());
        let obs = Observation { x, g: None, j: None };
        assert!(matches!(
            mixed_conditional_mean(&op, &normal_jumps(), &obs, 0.5, 0.75),
            Err(Error::MissingDecomposition(_))
        ));
    }

    #[test]
    fn law_moments_are_consistent() {
        let (model, op) = setup(0.75, 32);
        let spec = normal_jumps();
        let path = simulate_mixed(&op, &spec, 17).unwrap();
        let obs = Observation::from(&path);
        let law = mixed_conditional_density(&op, &spec, &obs, 0.5, 0.75, None, 1e-8).unwrap();
        let h = law.density.grid.h;
        assert!(law.mass_defect <= MASS_TOLERANCE);
        assert_abs_diff_eq!(law.density.mean(), law.m_hat, epsilon = 10.0 * h);
        assert_abs_diff_eq!(law.density.variance(), law.r_hat_tt, epsilon = 10.0 * h * (1.0 + law.r_hat_tt));
        let want = mixed_conditional_cov(model.as_ref(), &spec, 0.75, 0.75, 0.5).unwrap();
        assert_eq!(law.r_hat_tt, want);
        assert_eq!(law.m_hat, mixed_conditional_mean(&op, &spec, &obs, 0.5, 0.75).unwrap());
    }

    #[test]
    fn law_at_conditioning_time_is_atom() {
        let (_, op) = setup(0.75, 16);
        let spec = normal_jumps();
        let path = simulate_mixed(&op, &spec, 2).unwrap();
        let law = mixed_conditional_density(&op, &spec, &Observation::from(&path), 0.5, 0.5, None, 1e-8).unwrap();
        assert_eq!(law.density.atoms.len(), 1);
        assert_abs_diff_eq!(law.density.atoms[0].0, path.x.values()[7], epsilon = 1e-12);
        assert_eq!(law.lambda_term_mean, 0.0);
    }

    #[test]
    fn short_horizon_law_is_mostly_gaussian() {
        let (_, op) = setup(0.75, 64);
        let spec = JumpSpec::new(0.5, JumpDistribution::TwoPoint { x1: 1.0, p: 0.5, x2: -1.0 }).unwrap();
        let path = simulate_mixed(&op, &spec, 4).unwrap();
        let law = mixed_conditional_density(&op, &spec, &Observation::from(&path), 0.5, 0.515625, None, 1e-8).unwrap();
        assert!((law.density.total_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn covariance_does_not_depend_on_path() {
        let (model, op) = setup(0.75, 16);
        let spec = normal_jumps();
        let a = simulate_mixed(&op, &spec, 1).unwrap();
        let b = simulate_mixed(&op, &spec, 2).unwrap();
        let la = mixed_conditional_density(&op, &spec, &Observation::from(&a), 0.5, 0.75, None, 1e-8).unwrap();
        let lb = mixed_conditional_density(&op, &spec, &Observation::from(&b), 0.5, 0.75, None, 1e-8).unwrap();
        assert_eq!(la.r_hat_tt.to_bits(), lb.r_hat_tt.to_bits());
        let c = mixed_conditional_cov(model.as_ref(), &spec, 0.75, 1.0, 0.5).unwrap();
        assert_eq!(c.to_bits(), mixed_conditional_cov(model.as_ref(), &spec, 0.75, 1.0, 0.5).unwrap().to_bits());
    }

    #[test]
    fn conditional_variance_decreases_with_information() {
        let (model, _) = setup(0.75, 16);
        let spec = normal_jumps();
        let mut last = f64::INFINITY;
        for u in [0.0, 0.125, 0.25, 0.5, 0.75, 1.0] {
            let v = mixed_conditional_cov(model.as_ref(), &spec, 1.0, 1.0, u).unwrap();
            assert!(v <= last);
            last = v;
        }
        assert!(last.abs() < 1e-3);
    }
}
