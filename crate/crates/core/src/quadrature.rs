//! Integration of weakly singular integrands and Riemann–Stieltjes sums
//! against sampled paths.
//!
//! [`integrate_singular`] evaluates
//!
//! ```text
//!     ∫_lo^hi (x - lo)^alpha (hi - x)^beta g(x) dx
//! ```
//!
//! with a composite rule: each half of the interval is cut into panels that
//! shrink geometrically toward its endpoint, the innermost panel carries a
//! Gauss–Jacobi rule for the algebraic weight and the remaining panels use
//! Gauss–Legendre. Grading also resolves non-analytic behaviour of `g` at the
//! endpoints (sums of several powers) and singularities of `g` that sit just
//! outside the interval. Refinement doubles the node count per level and the
//! error estimate is the difference between consecutive levels.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, OnceLock, RwLock};

use gauss_quad::{FiniteAboveNegOneF64, GaussJacobi, GaussLegendre};

use crate::error::{domain, Error, Result};
use crate::grid::SamplePath;

/// Ratio between consecutive panel breakpoints of the geometric mesh.
const GRADING: f64 = 0.25;

/// Estimates below this multiple of `|value|` count as converged whatever
/// the absolute tolerance; large integrals cannot do better in f64.
const RELATIVE_FLOOR: f64 = 1024.0 * f64::EPSILON;

/// Node cap of the refinement sequence.
pub const MAX_NODES: usize = 1 << 14;

/// `(x - lo)^alpha (hi - x)^beta g(x)` on `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
pub struct SingularIntegrand<F> {
    pub g: F,
    pub alpha: f64,
    pub beta: f64,
    pub lo: f64,
    pub hi: f64,
}

impl<F: Fn(f64) -> f64> SingularIntegrand<F> {
    /// Integrand with no algebraic endpoint weight.
    pub fn new(lo: f64, hi: f64, g: F) -> Self {
        Self {
            g,
            alpha: 0.0,
            beta: 0.0,
            lo,
            hi,
        }
    }

    /// Sets the left (`alpha`) and right (`beta`) endpoint exponents.
    pub fn with_exponents(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return domain(format!(
                "integration interval [{}, {}] is empty or not finite",
                self.lo, self.hi
            ));
        }
        if !(self.alpha > -1.0) || !(self.beta > -1.0) {
            return domain(format!(
                "endpoint exponents ({}, {}) must exceed -1",
                self.alpha, self.beta
            ));
        }
        Ok(())
    }

    fn evaluate_level(&self, level: usize) -> (f64, usize) {
        // Points double first; from level 3 on layers and points alternate.
        let layers = 1usize << (level.saturating_sub(1) / 2);
        let points = (4usize << level) / layers;
        let half = 0.5 * (self.hi - self.lo);
        let (left, n_left) = self.half_sum(half, layers, points, Side::Left);
        let (right, n_right) = self.half_sum(half, layers, points, Side::Right);
        (left + right, n_left + n_right)
    }

    fn half_sum(&self, half: f64, layers: usize, points: usize, side: Side) -> (f64, usize) {
        let (near_exp, far_exp) = match side {
            Side::Left => (self.alpha, self.beta),
            Side::Right => (self.beta, self.alpha),
        };
        let width = 2.0 * half;
        let eval = |offset: f64| -> f64 {
            let x = match side {
                Side::Left => self.lo + offset,
                Side::Right => self.hi - offset,
            };
            let far = width - offset;
            let far_weight = if far_exp == 0.0 { 1.0 } else { far.powf(far_exp) };
            far_weight * (self.g)(x)
        };

        // Breakpoints half * GRADING^k, k = 0..layers-1. Stop before underflow
        // and before offsets from a nonzero endpoint drown in its rounding.
        let endpoint = match side {
            Side::Left => self.lo,
            Side::Right => self.hi,
        };
        let floor = (1e-8 * endpoint.abs()).max(1e-280);
        let mut layers = layers;
        while layers > 1 && half * GRADING.powi(layers as i32 - 1) < floor {
            layers -= 1;
        }
        let inner = half * GRADING.powi(layers as i32 - 1);

        let jacobi = unit_rule(points, near_exp);
        let scale = inner.powf(1.0 + near_exp);
        let mut sum = 0.0;
        for (y, w) in jacobi.nodes.iter().zip(&jacobi.weights) {
            sum += w * scale * eval(inner * y);
        }
        let mut count = points;

        if layers > 1 {
            let legendre = unit_rule(points, 0.0);
            let mut b = half;
            for _ in 0..layers - 1 {
                let a = b * GRADING;
                let len = b - a;
                for (y, w) in legendre.nodes.iter().zip(&legendre.weights) {
                    let off = a + len * y;
                    let near_weight = if near_exp == 0.0 { 1.0 } else { off.powf(near_exp) };
                    sum += w * len * near_weight * eval(off);
                }
                count += points;
                b = a;
            }
        }
        (sum, count)
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Outcome of a quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub error_estimate: f64,
    pub nodes_used: usize,
}

/// Integrates `f` to an estimated absolute error of at most `tol`, or of a few
/// ulps of the value when that is larger.
///
/// Returns [`Error::QuadratureNonConvergence`] with the best estimate when the
/// node cap is reached first.
pub fn integrate_singular<F: Fn(f64) -> f64>(
    f: &SingularIntegrand<F>,
    tol: f64,
) -> Result<QuadratureResult> {
    f.validate()?;
    if !(tol > 0.0) {
        return domain(format!("tolerance must be positive, got {tol}"));
    }
    // A level that only adds layers leaves the outer panels unchanged, so the
    // estimate spans the last two refinements.
    let (mut previous, mut total) = f.evaluate_level(0);
    let mut last_diff = f64::INFINITY;
    let mut level = 1;
    loop {
        let (current, nodes) = f.evaluate_level(level);
        total += nodes;
        let diff = (current - previous).abs();
        let error_estimate = diff.max(last_diff);
        last_diff = diff;
        if !current.is_finite() {
            return Err(Error::QuadratureNonConvergence {
                value: current,
                error_estimate: f64::INFINITY,
                nodes_used: total,
            });
        }
        if error_estimate <= tol.max(RELATIVE_FLOOR * current.abs()) {
            return Ok(QuadratureResult {
                value: current,
                error_estimate,
                nodes_used: total,
            });
        }
        if nodes >= MAX_NODES {
            return Err(Error::QuadratureNonConvergence {
                value: current,
                error_estimate,
                nodes_used: total,
            });
        }
        previous = current;
        level += 1;
    }
}

/// Single-panel Gauss–Jacobi rule with `points` nodes (even) for a left
/// weight `(x - lo)^alpha`; the right exponent must be 0. No error control.
pub fn integrate_fixed<F: Fn(f64) -> f64>(f: &SingularIntegrand<F>, points: usize) -> f64 {
    debug_assert!(f.beta == 0.0);
    let rule = unit_rule(points, f.alpha);
    let width = f.hi - f.lo;
    let scale = width.powf(1.0 + f.alpha);
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(y, w)| w * (f.g)(f.lo + width * y))
        .sum::<f64>()
        * scale
}

/// [`integrate_singular`] for a smooth part that can itself fail; the first
/// failure is returned instead of the quadrature outcome.
pub fn integrate_fallible<G: Fn(f64) -> Result<f64>>(
    lo: f64,
    hi: f64,
    alpha: f64,
    beta: f64,
    tol: f64,
    g: G,
) -> Result<QuadratureResult> {
    let failure = std::cell::RefCell::new(None);
    let smooth = |x: f64| match g(x) {
        Ok(v) => v,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let r = integrate_singular(
        &SingularIntegrand::new(lo, hi, smooth).with_exponents(alpha, beta),
        tol,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => r,
    }
}

/// Convenience wrapper for an integrand without endpoint weights.
pub fn integrate<F: Fn(f64) -> f64>(lo: f64, hi: f64, tol: f64, g: F) -> Result<QuadratureResult> {
    integrate_singular(&SingularIntegrand::new(lo, hi, g), tol)
}

/// Left-point Riemann–Stieltjes sum `Σ_j f_j (path(t_j) - path(t_{j-1}))`,
/// where `f_j` is the value on the cell `[t_{j-1}, t_j)` and `path(t_{-1}) = 0`.
pub fn stieltjes_sum(f: &[f64], path: &SamplePath) -> Result<f64> {
    let values = path.values();
    if f.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: values.len(),
            got: f.len(),
        });
    }
    let mut prev = 0.0;
    let mut sum = 0.0;
    for (fj, &v) in f.iter().zip(values) {
        sum += fj * (v - prev);
        prev = v;
    }
    Ok(sum)
}

/// Nodes and weights of the fixed-order Gauss–Legendre rule on `[lo, hi]`;
/// `points` must be even.
pub fn legendre_nodes(lo: f64, hi: f64, points: usize) -> Vec<(f64, f64)> {
    let rule = unit_rule(points, 0.0);
    let len = hi - lo;
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(y, w)| (lo + len * y, w * len))
        .collect()
}

/// Nodes on `[0, 1]` and weights for `∫_0^1 y^alpha g(y) dy`.
struct UnitRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

type RuleCache = RwLock<HashMap<(usize, u64), Arc<UnitRule>>>;

fn unit_rule(points: usize, alpha: f64) -> Arc<UnitRule> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    let key = (points, alpha.to_bits());
    if let Some(rule) = cache.read().expect("rule cache poisoned").get(&key) {
        return Arc::clone(rule);
    }
    let rule = Arc::new(build_unit_rule(points, alpha));
    cache
        .write()
        .expect("rule cache poisoned")
        .entry(key)
        .or_insert_with(|| Arc::clone(&rule));
    rule
}

fn build_unit_rule(points: usize, alpha: f64) -> UnitRule {
    // Only even orders are requested; gauss-quad patches the middle node of
    // odd Jacobi rules to 0, which is wrong for asymmetric weights.
    debug_assert!(points.is_multiple_of(2));
    let deg = NonZeroUsize::new(points).expect("nonzero rule order");
    let pairs: Vec<(f64, f64)> = if alpha == 0.0 {
        GaussLegendre::new(deg).as_node_weight_pairs().to_vec()
    } else {
        let zero = FiniteAboveNegOneF64::new(0.0).expect("0 > -1");
        let a = FiniteAboveNegOneF64::new(alpha).expect("validated exponent");
        // Weight (1 + x)^alpha on [-1, 1] maps to y^alpha on [0, 1].
        GaussJacobi::new(deg, zero, a).as_node_weight_pairs().to_vec()
    };
    let scale = 0.5f64.powf(alpha + 1.0);
    let mut pairs: Vec<(f64, f64)> = pairs
        .into_iter()
        .map(|(x, w)| (0.5 * (1.0 + x), w * scale))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    UnitRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}
