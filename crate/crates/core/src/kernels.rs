//! Covariances and Volterra kernels of fractional Brownian motion and of the
//! completely correlated mixed fBm `a W + b B^H`.
//!
//! With `alpha = H - 1/2` the fBm kernel is
//!
//! ```text
//!     K_H(t,s) = c_H [ (t/s)^alpha (t-s)^alpha
//!                      - alpha s^{-alpha} ∫_s^t u^{alpha-1} (u-s)^alpha du ]
//! ```
//!
//! for `0 < s < t`, and every kernel here is exactly 0 for `s >= t`.

use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{domain, Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::{
    integrate_fallible, integrate_fixed, integrate_singular, QuadratureResult, SingularIntegrand,
};

/// Hard cap on the number of inverse-series terms.
pub const MAX_SERIES_TERMS: usize = 1000;

/// Term cap of the binomial tail in the fBm kernel; the ratio is at most 1/2.
const BINOMIAL_TERMS: usize = 120;

/// Number of trailing terms that must decay strictly before truncation.
const MONOTONE_TAIL: usize = 3;

/// Diagnostics attached to a kernel value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalMeta {
    pub error_estimate: f64,
    pub nodes_used: usize,
    pub series_terms: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    pub meta: EvalMeta,
}

impl KernelEval {
    fn exact(value: f64) -> Self {
        Self {
            value,
            meta: EvalMeta::default(),
        }
    }
}

/// Parameters of `K_{a,b,H}(t,s) = a 1_{s<t} + b K_H(t,s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmParams {
    pub a: f64,
    pub b: f64,
    pub h: f64,
}

impl CcmParams {
    pub fn new(a: f64, b: f64, h: f64) -> Result<Self> {
        if !(a != 0.0 && a.is_finite()) {
            return domain(format!("ccmfBm weight a must be finite and nonzero, got {a}"));
        }
        if !b.is_finite() {
            return domain(format!("ccmfBm weight b must be finite, got {b}"));
        }
        if !(h > 0.5 && h < 1.0) {
            return domain(format!("ccmfBm requires 1/2 < H < 1, got {h}"));
        }
        Ok(Self { a, b, h })
    }
}

pub(crate) fn check_hurst(h: f64) -> Result<()> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        domain(format!("Hurst index must lie in (0, 1), got {h}"))
    }
}

/// `R_H(t,s) = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2`.
pub fn fbm_covariance(t: f64, s: f64, h: f64) -> Result<f64> {
    check_hurst(h)?;
    if !(t >= 0.0 && s >= 0.0) {
        return domain(format!("times must be nonnegative, got ({t}, {s})"));
    }
    let e = 2.0 * h;
    Ok(0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e)))
}

/// Normalizer `c_H` of the fBm kernel.
pub fn fbm_normalizer(h: f64) -> Result<f64> {
    check_hurst(h)?;
    if h == 0.5 {
        return Ok(1.0);
    }
    Ok((2.0 * h * gamma(1.5 - h) / (gamma(0.5 + h) * gamma(2.0 - 2.0 * h))).sqrt())
}

/// `∫_0^t K_H(t,x) dx = Cov(B^H_t, W_t)`, equal to
/// `c_H Γ(1-α) Γ(1+α) t^{1+α} / (1+α)` with `α = H - 1/2`.
pub fn fbm_kernel_mass(t: f64, h: f64) -> Result<f64> {
    let c = fbm_normalizer(h)?;
    if !(t >= 0.0) {
        return domain(format!("time must be nonnegative, got {t}"));
    }
    let alpha = h - 0.5;
    Ok(c * gamma(1.0 - alpha) * gamma(1.0 + alpha) * t.powf(1.0 + alpha) / (1.0 + alpha))
}

/// `K_H(t,s)` with the inner integral computed to absolute error `tol`.
pub fn fbm_kernel(t: f64, s: f64, h: f64, tol: f64) -> Result<KernelEval> {
    check_hurst(h)?;
    if !(s > 0.0) {
        return domain(format!("kernel needs s > 0, got {s}"));
    }
    if s >= t {
        return Ok(KernelEval::exact(0.0));
    }
    let alpha = h - 0.5;
    if alpha == 0.0 {
        return Ok(KernelEval::exact(1.0));
    }
    let c = fbm_normalizer(h)?;
    let inner = fbm_inner_integral(s, t, alpha, tol)?;
    let lead = (t / s).powf(alpha) * (t - s).powf(alpha);
    let tail = alpha * s.powf(-alpha);
    Ok(KernelEval {
        value: c * (lead - tail * inner.value),
        meta: EvalMeta {
            error_estimate: c * tail.abs() * inner.error_estimate,
            nodes_used: inner.nodes_used,
            series_terms: 0,
        },
    })
}

/// `∫_s^t u^{alpha-1} (u-s)^alpha du`.
///
/// Quadrature covers `[s, min(2s, t)]`; beyond `2s` the factor
/// `(1 - s/u)^alpha` is expanded binomially and integrated term by term, which
/// keeps small `s/t` cheap and accurate.
fn fbm_inner_integral(s: f64, t: f64, alpha: f64, tol: f64) -> Result<QuadratureResult> {
    let mid = t.min(2.0 * s);
    let integrand =
        SingularIntegrand::new(s, mid, |u: f64| u.powf(alpha - 1.0)).with_exponents(alpha, 0.0);
    // On [s, 2s] the smooth part is analytic with its nearest singularity at
    // 0, so a fixed pair of rules usually settles it.
    let coarse = integrate_fixed(&integrand, 12);
    let fine = integrate_fixed(&integrand, 16);
    let diff = (fine - coarse).abs();
    let mut r = if diff <= tol.max(1e3 * f64::EPSILON * fine.abs()) {
        QuadratureResult {
            value: fine,
            error_estimate: diff,
            nodes_used: 28,
        }
    } else {
        integrate_singular(&integrand, tol)?
    };
    if mid < t {
        // Σ_m binom(alpha, m) (-s)^m [u^{2 alpha - m} / (2 alpha - m)]_{2s}^{t},
        // written with the ratios s/t and 1/2 so tiny s cannot overflow.
        let (top, bottom) = (t.powf(2.0 * alpha), mid.powf(2.0 * alpha));
        let ratio = s / t;
        let mut coef = 1.0;
        let (mut top_pow, mut bottom_pow) = (1.0, 1.0);
        let mut tail = 0.0;
        for m in 0..BINOMIAL_TERMS {
            let e = 2.0 * alpha - m as f64;
            let term = coef * (top * top_pow - bottom * bottom_pow) / e;
            tail += term;
            if term.abs() <= 1e-17 * tail.abs() {
                break;
            }
            coef *= -(alpha - m as f64) / (m as f64 + 1.0);
            top_pow *= ratio;
            bottom_pow *= 0.5;
        }
        r.value += tail;
    }
    Ok(r)
}

/// Closed-form prediction kernel
///
/// ```text
///     Ψ_H(t,s|u) = sin(π alpha)/π s^{-alpha} (u-s)^{-alpha}
///                  ∫_u^t z^alpha (z-u)^alpha / (z-s) dz
/// ```
///
/// for `0 < s < u <= t`. Its sign convention is `E[G_t | F_u] = G_u + ∫ Ψ dG`.
pub fn fbm_psi(t: f64, s: f64, u: f64, h: f64, tol: f64) -> Result<KernelEval> {
    check_hurst(h)?;
    if !(s > 0.0 && s < u && u <= t) {
        return Err(Error::Ordering(format!(
            "prediction kernel needs 0 < s < u <= t, got s={s}, u={u}, t={t}"
        )));
    }
    let alpha = h - 0.5;
    if alpha == 0.0 || t == u {
        return Ok(KernelEval::exact(0.0));
    }
    let r = psi_inner_integral(s, u, t - u, alpha, tol)?;
    let pre = (std::f64::consts::PI * alpha).sin() / std::f64::consts::PI
        * s.powf(-alpha)
        * (u - s).powf(-alpha);
    Ok(KernelEval {
        value: pre * r.value,
        meta: EvalMeta {
            error_estimate: pre.abs() * r.error_estimate,
            nodes_used: r.nodes_used,
            series_terms: 0,
        },
    })
}

/// `∫_0^len w^α (u+w)^α / (w+ε) dw` with `ε = u - s`.
///
/// For `ε <= len/2` the near pole is removed analytically: with
/// `(u+w)^α = s^α + [(u+w)^α - s^α]`, the first part is
/// `s^α [-π ε^α / sin(πα) - Σ_k (-ε)^k len^{α-k} / (k-α)]` and the second a
/// smooth divided difference.
fn psi_inner_integral(s: f64, u: f64, len: f64, alpha: f64, tol: f64) -> Result<QuadratureResult> {
    let gap = u - s;
    if gap > 0.5 * len {
        let integrand = SingularIntegrand::new(0.0, len, |w: f64| (u + w).powf(alpha) / (w + gap))
            .with_exponents(alpha, 0.0);
        return integrate_singular(&integrand, tol);
    }
    let s_pow = s.powf(alpha);
    let pi = std::f64::consts::PI;
    let mut tail = 0.0;
    let mut power = len.powf(alpha);
    let ratio = -gap / len;
    let mut terms = 0;
    for k in 0..MAX_SERIES_TERMS {
        let term = power / (k as f64 - alpha);
        tail += term;
        terms = k + 1;
        if term.abs() <= f64::EPSILON * tail.abs() {
            break;
        }
        power *= ratio;
    }
    if terms == MAX_SERIES_TERMS {
        return Err(Error::SeriesDivergence {
            terms,
            last_term: power,
        });
    }
    let pole_part = s_pow * (-pi * gap.powf(alpha) / (pi * alpha).sin() - tail);
    let smooth = SingularIntegrand::new(0.0, len, |w: f64| {
        let d = w + gap;
        s_pow * (alpha * (d / s).ln_1p()).exp_m1() / d
    })
    .with_exponents(alpha, 0.0);
    let coarse = integrate_fixed(&smooth, 12);
    let fine = integrate_fixed(&smooth, 16);
    let diff = (fine - coarse).abs();
    let r = if diff <= tol.max(1e3 * f64::EPSILON * fine.abs()) {
        QuadratureResult {
            value: fine,
            error_estimate: diff,
            nodes_used: 28,
        }
    } else {
        integrate_singular(&smooth, tol)?
    };
    Ok(QuadratureResult {
        value: pole_part + r.value,
        ..r
    })
}

/// `K_{a,b,H}(t,s) = a + b K_H(t,s)` for `s < t`, 0 otherwise.
pub fn ccm_kernel(t: f64, s: f64, p: &CcmParams, tol: f64) -> Result<KernelEval> {
    if !(s > 0.0) {
        return domain(format!("kernel needs s > 0, got {s}"));
    }
    if s >= t {
        return Ok(KernelEval::exact(0.0));
    }
    if p.b == 0.0 {
        return Ok(KernelEval::exact(p.a));
    }
    let k = fbm_kernel(t, s, p.h, tol / p.b.abs())?;
    Ok(KernelEval {
        value: p.a + p.b * k.value,
        meta: EvalMeta {
            error_estimate: p.b.abs() * k.meta.error_estimate,
            ..k.meta
        },
    })
}

/// Iterated kernel of the ccmfBm inverse series,
///
/// ```text
///     γ_k(t,s) = c_H^k Γ(H+1/2)^k / Γ(k alpha) s^{-alpha}
///                ∫_s^t u^alpha (u-s)^{k alpha - 1} du.
/// ```
///
/// The integral is computed on `[0, 1]` after `u = s + (t-s) v`, so `tol`
/// bounds its relative error.
pub fn ccm_gamma(k: usize, t: f64, s: f64, h: f64, tol: f64) -> Result<KernelEval> {
    if k == 0 {
        return domain("series index k must be at least 1");
    }
    if !(h > 0.5 && h < 1.0) {
        return domain(format!("ccmfBm requires 1/2 < H < 1, got {h}"));
    }
    if !(s > 0.0) {
        return domain(format!("kernel needs s > 0, got {s}"));
    }
    if s >= t {
        return Ok(KernelEval::exact(0.0));
    }
    let alpha = h - 0.5;
    let ka = k as f64 * alpha;
    let width = t - s;
    let integrand = SingularIntegrand::new(0.0, 1.0, |v: f64| (s + width * v).powf(alpha))
        .with_exponents(ka - 1.0, 0.0);
    let r = integrate_singular(&integrand, tol)?;
    let log_pre = k as f64 * (fbm_normalizer(h)?.ln() + ln_gamma(h + 0.5)) - ln_gamma(ka)
        + ka * width.ln()
        - alpha * s.ln();
    let pre = log_pre.exp();
    Ok(KernelEval {
        value: pre * r.value,
        meta: EvalMeta {
            error_estimate: pre * r.error_estimate,
            nodes_used: r.nodes_used,
            series_terms: 0,
        },
    })
}

/// Analytic inverse kernel
///
/// ```text
///     K^{-1}(t,s) = (1/a) [ 1 + Σ_{k>=1} (-b/a)^k γ_k(t,s) ]
/// ```
///
/// truncated at the first term of absolute value below `series_tol`. The
/// last [`MONOTONE_TAIL`] terms before truncation must decay strictly.
pub fn ccm_inverse_kernel(t: f64, s: f64, p: &CcmParams, series_tol: f64) -> Result<KernelEval> {
    if !(series_tol > 0.0) {
        return domain(format!("series tolerance must be positive, got {series_tol}"));
    }
    if !(s > 0.0) {
        return domain(format!("kernel needs s > 0, got {s}"));
    }
    if s >= t {
        return Ok(KernelEval::exact(0.0));
    }
    if p.b == 0.0 {
        return Ok(KernelEval::exact(1.0 / p.a));
    }
    let ratio = -p.b / p.a;
    let quad_tol = 1e-13;
    let mut sum = 1.0;
    let mut magnitudes: Vec<f64> = Vec::new();
    let mut meta = EvalMeta::default();
    for k in 1..=MAX_SERIES_TERMS {
        let g = ccm_gamma(k, t, s, p.h, quad_tol)?;
        let term = ratio.powi(k as i32) * g.value;
        meta.nodes_used += g.meta.nodes_used;
        meta.error_estimate += ratio.abs().powi(k as i32) * g.meta.error_estimate;
        sum += term;
        let scaled = (term / p.a).abs();
        if !scaled.is_finite() {
            return Err(Error::SeriesDivergence {
                terms: k,
                last_term: scaled,
            });
        }
        magnitudes.push(scaled);
        if scaled < series_tol {
            let tail = &magnitudes[magnitudes.len().saturating_sub(MONOTONE_TAIL + 1)..];
            if tail.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::SeriesDivergence {
                    terms: k,
                    last_term: scaled,
                });
            }
            meta.series_terms = k;
            meta.error_estimate = meta.error_estimate / p.a.abs() + scaled;
            return Ok(KernelEval {
                value: sum / p.a,
                meta,
            });
        }
    }
    Err(Error::SeriesDivergence {
        terms: MAX_SERIES_TERMS,
        last_term: magnitudes.last().copied().unwrap_or(f64::NAN),
    })
}

/// Adjoint operator of the ccmfBm kernel applied to `f`, sampled at the grid
/// times and taken constant on `[t_j, t_{j+1})`:
///
/// ```text
///     (K* f)(t_j) = a f(t_j)
///         + b c_H alpha t_j^{-alpha} ∫_{t_j}^T f(u) u^alpha (u - t_j)^{alpha-1} du.
/// ```
///
/// The sampled indicator of `[0, t_k)` maps to `K_{a,b,H}(t_k, t_j)`.
pub fn ccm_adjoint_apply(f: &[f64], grid: &TimeGrid, p: &CcmParams, tol: f64) -> Result<Vec<f64>> {
    let times = grid.times();
    if f.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: f.len(),
        });
    }
    let alpha = p.h - 0.5;
    let scale = p.b * fbm_normalizer(p.h)? * alpha;
    let n = times.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let x = times[j];
        let mut integral = 0.0;
        if p.b != 0.0 {
            let piece_tol = tol / (n as f64 * scale.abs().max(1.0));
            for l in j..n - 1 {
                if f[l] == 0.0 {
                    continue;
                }
                let (lo, hi) = (times[l], times[l + 1]);
                let r = if l == j {
                    let g = SingularIntegrand::new(lo, hi, |u: f64| u.powf(alpha))
                        .with_exponents(alpha - 1.0, 0.0);
                    integrate_singular(&g, piece_tol)?
                } else {
                    let g = SingularIntegrand::new(lo, hi, |u: f64| {
                        u.powf(alpha) * (u - x).powf(alpha - 1.0)
                    });
                    integrate_singular(&g, piece_tol)?
                };
                integral += f[l] * r.value;
            }
        }
        out.push(p.a * f[j] + scale * x.powf(-alpha) * integral);
    }
    Ok(out)
}

/// `∫_0^{t∧s} K_H(t,x) K_H(s,x) dx`, which equals `R_H(t,s)`.
pub fn fbm_factorization(t: f64, s: f64, h: f64, tol: f64) -> Result<f64> {
    check_hurst(h)?;
    if !(t > 0.0 && s > 0.0) {
        return domain(format!("factorization needs positive times, got ({t}, {s})"));
    }
    let alpha = h - 0.5;
    let m = t.min(s);
    let near_zero = -2.0 * alpha.abs();
    let near_top = if t == s { 2.0 * alpha } else { alpha };
    let inner_tol = 1e-3 * tol;
    let r = integrate_fallible(0.0, m, near_zero, near_top, tol, |x| {
        let kt = fbm_kernel(t, x, h, inner_tol)?.value;
        let ks = fbm_kernel(s, x, h, inner_tol)?.value;
        Ok(kt * ks / (x.powf(near_zero) * (m - x).powf(near_top)))
    })?;
    Ok(r.value)
}
