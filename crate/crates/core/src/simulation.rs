//! Path generation: exact Gaussian sampling by Cholesky factorization,
//! sampling through the Volterra representation, compound Poisson jumps and
//! the mixed process `X = G + J`.
//!
//! Randomness comes from ChaCha20 seeded once per user seed. Gaussian and
//! jump draws use separate streams, so changing one leaves the other intact.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::grid::{SamplePath, TimeGrid};
use crate::model::VolterraModel;
use crate::operators::DiscreteOperator;

/// Diagonal jitter, relative to the mean variance, added once before a
/// factorization is declared failed.
pub const PSD_JITTER: f64 = 1e-12;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Gaussian = 1,
    Jumps = 2,
}

/// Generator for `stream` of path `index` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

/// Jump-size law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpDistribution {
    Normal { mean: f64, var: f64 },
    /// `x1` with probability `p`, `x2` otherwise.
    TwoPoint { x1: f64, p: f64, x2: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl JumpDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Normal { mean, var } => {
                if !mean.is_finite() || !(var >= 0.0) || !var.is_finite() {
                    return domain(format!("normal jumps need finite mean and var >= 0, got ({mean}, {var})"));
                }
            }
            Self::TwoPoint { x1, p, x2 } => {
                if !x1.is_finite() || !x2.is_finite() || !(0.0..=1.0).contains(&p) {
                    return domain(format!("two-point jumps need finite atoms and p in [0,1], got ({x1}, {p}, {x2})"));
                }
            }
            Self::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || !(hi > lo) {
                    return domain(format!("uniform jumps need lo < hi, got [{lo}, {hi}]"));
                }
            }
        }
        Ok(())
    }

    /// `E[ξ]`.
    pub fn mu1(&self) -> f64 {
        match *self {
            Self::Normal { mean, .. } => mean,
            Self::TwoPoint { x1, p, x2 } => p * x1 + (1.0 - p) * x2,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    /// `E[ξ^2]`.
    pub fn mu2(&self) -> f64 {
        match *self {
            Self::Normal { mean, var } => var + mean * mean,
            Self::TwoPoint { x1, p, x2 } => p * x1 * x1 + (1.0 - p) * x2 * x2,
            Self::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
        }
    }

    /// Largest `|x|` that carries non-negligible mass, used for padding value
    /// grids; eight standard deviations for the normal law.
    pub fn reach(&self) -> f64 {
        match *self {
            Self::Normal { mean, var } => mean.abs() + 8.0 * var.sqrt(),
            Self::TwoPoint { x1, x2, .. } => x1.abs().max(x2.abs()),
            Self::Uniform { lo, hi } => lo.abs().max(hi.abs()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal { mean, var } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + var.sqrt() * z
            }
            Self::TwoPoint { x1, p, x2 } => {
                if rng.random::<f64>() < p {
                    x1
                } else {
                    x2
                }
            }
            Self::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Compound Poisson specification; the moments follow from the law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub lambda: f64,
    pub dist: JumpDistribution,
}

impl JumpSpec {
    pub fn new(lambda: f64, dist: JumpDistribution) -> Result<Self> {
        let spec = Self { lambda, dist };
        spec.validate()?;
        Ok(spec)
    }

    /// No jumps.
    pub fn none() -> Self {
        Self {
            lambda: 0.0,
            dist: JumpDistribution::Normal { mean: 0.0, var: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return domain(format!("jump intensity must be finite and >= 0, got {}", self.lambda));
        }
        self.dist.validate()
    }

    pub fn mu1(&self) -> f64 {
        self.dist.mu1()
    }

    pub fn mu2(&self) -> f64 {
        self.dist.mu2()
    }
}

/// Jump times and sizes on an interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub times: Vec<f64>,
    pub sizes: Vec<f64>,
}

impl JumpRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sum of the sizes of jumps at times `<= t`.
    pub fn running_sum(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.sizes)
            .take_while(|(&s, _)| s <= t)
            .map(|(_, &x)| x)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPath {
    pub g: SamplePath,
    pub j: SamplePath,
    pub x: SamplePath,
    pub jumps: JumpRecord,
    /// Driving-martingale increments when `G` came from the Volterra sampler.
    pub m_increments: Option<Vec<f64>>,
}

impl MixedPath {
    /// Assembles `X = G + J` from its parts.
    pub fn from_parts(
        g: SamplePath,
        jumps: JumpRecord,
        m_increments: Option<Vec<f64>>,
    ) -> Result<Self> {
        let grid = g.grid().clone();
        let jv: Vec<f64> = grid.times().iter().map(|&t| jumps.running_sum(t)).collect();
        let xv: Vec<f64> = g.values().iter().zip(&jv).map(|(a, b)| a + b).collect();
        Ok(Self {
            j: SamplePath::new(grid.clone(), jv)?,
            x: SamplePath::new(grid, xv)?,
            g,
            jumps,
            m_increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.g.grid()
    }
}

/// Cholesky factor of the model covariance on a grid, reusable across paths.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    grid: TimeGrid,
    factor: DMatrix<f64>,
}

/// Lower Cholesky factor of `sigma`, retrying once with diagonal jitter.
pub fn cholesky_with_jitter(mut sigma: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if let Some(c) = Cholesky::new(sigma.clone()) {
        return Ok(c.l());
    }
    let jitter = PSD_JITTER * sigma.trace() / n as f64;
    for i in 0..n {
        sigma[(i, i)] += jitter;
    }
    Cholesky::new(sigma.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            condition: condition_estimate(&sigma),
        })
}

/// Ratio of the largest to the smallest absolute eigenvalue.
pub(crate) fn condition_estimate(sigma: &DMatrix<f64>) -> f64 {
    let eig = sigma.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    max / min
}

impl CholeskySampler {
    pub fn new(model: &dyn VolterraModel, grid: &TimeGrid) -> Result<Self> {
        let n = grid.len();
        let times = grid.times();
        let mut sigma = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for k in 0..=i {
                let r = model.covariance(times[i], times[k])?;
                sigma[(i, k)] = r;
                sigma[(k, i)] = r;
            }
        }
        Ok(Self {
            grid: grid.clone(),
            factor: cholesky_with_jitter(sigma)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplePath {
        let z = DVector::<f64>::from_fn(self.grid.len(), |_, _| StandardNormal.sample(rng));
        let values = (&self.factor * z).iter().copied().collect();
        SamplePath::new(self.grid.clone(), values).expect("factor matches grid")
    }
}

/// One exact sample of `(G_{t_i})` from the covariance.
pub fn simulate_gaussian_cholesky(
    model: &dyn VolterraModel,
    grid: &TimeGrid,
    seed: u64,
) -> Result<SamplePath> {
    let sampler = CholeskySampler::new(model, grid)?;
    Ok(sampler.sample(&mut stream_rng(seed, Stream::Gaussian, 0)))
}

/// Independent `ΔM_j ~ N(0, dv_j)`.
pub fn draw_martingale_increments<R: Rng + ?Sized>(dv: &[f64], rng: &mut R) -> Vec<f64> {
    dv.iter()
        .map(|&d| {
            let z: f64 = StandardNormal.sample(rng);
            d.sqrt() * z
        })
        .collect()
}

/// `G` through the Volterra representation; also returns the `ΔM` used.
pub fn simulate_gaussian_volterra(
    op: &DiscreteOperator,
    seed: u64,
) -> Result<(SamplePath, Vec<f64>)> {
    let dm = draw_martingale_increments(op.dv(), &mut stream_rng(seed, Stream::Gaussian, 0));
    Ok((op.forward_map(&dm)?, dm))
}

/// Jumps on `(start, end]` with exponential inter-arrival times.
pub fn compound_poisson_on<R: Rng + ?Sized>(
    spec: &JumpSpec,
    start: f64,
    end: f64,
    rng: &mut R,
) -> JumpRecord {
    let mut rec = JumpRecord::default();
    if spec.lambda == 0.0 || end <= start {
        return rec;
    }
    let wait = Exp::new(spec.lambda).expect("positive intensity");
    let mut t = start;
    loop {
        t += wait.sample(rng);
        if t > end {
            return rec;
        }
        rec.times.push(t);
        rec.sizes.push(spec.dist.sample(rng));
    }
}

pub fn simulate_compound_poisson(spec: &JumpSpec, horizon: f64, seed: u64) -> Result<JumpRecord> {
    spec.validate()?;
    if !(horizon > 0.0) {
        return domain(format!("horizon must be positive, got {horizon}"));
    }
    Ok(compound_poisson_on(spec, 0.0, horizon, &mut stream_rng(seed, Stream::Jumps, 0)))
}

/// `X = G + J` with `G` from the Volterra sampler and independent jumps.
pub fn simulate_mixed(op: &DiscreteOperator, spec: &JumpSpec, seed: u64) -> Result<MixedPath> {
    let (g, dm) = simulate_gaussian_volterra(op, seed)?;
    let jumps = simulate_compound_poisson(spec, op.grid().horizon(), seed)?;
    MixedPath::from_parts(g, jumps, Some(dm))
}

/// Flags grid increments with `|ΔX| > threshold` as jumps, reporting the
/// right end of the cell as the time.
///
/// A heuristic; prediction never relies on it.
pub fn detect_jumps(x: &SamplePath, threshold: f64) -> Result<JumpRecord> {
    if !(threshold > 0.0) {
        return domain(format!("threshold must be positive, got {threshold}"));
    }
    let mut rec = JumpRecord::default();
    for (i, d) in x.increments().into_iter().enumerate() {
        if d.abs() > threshold {
            rec.times.push(x.grid().times()[i]);
            rec.sizes.push(d);
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellRule, FbmModel};
    use crate::operators::build_operator;
    use std::sync::Arc;

    #[test]
    fn jump_moments() {
        let n = JumpDistribution::Normal { mean: 0.1, var: 0.04 };
        assert!((n.mu2() - 0.05).abs() < 1e-15);
        let tp = JumpDistribution::TwoPoint { x1: 1.0, p: 0.25, x2: -0.5 };
        assert!((tp.mu1() - (0.25 - 0.375)).abs() < 1e-15);
        assert!((tp.mu2() - (0.25 + 0.1875)).abs() < 1e-15);
        let u = JumpDistribution::Uniform { lo: -1.0, hi: 2.0 };
        assert!((u.mu2() - 1.0).abs() < 1e-15);
        for d in [n, tp, u] {
            assert!(d.mu2() >= d.mu1() * d.mu1());
        }
        assert!(JumpSpec::new(-1.0, n).is_err());
        assert!(JumpSpec::new(1.0, JumpDistribution::Uniform { lo: 1.0, hi: 1.0 }).is_err());
        assert!(JumpSpec::new(1.0, JumpDistribution::TwoPoint { x1: 0.0, p: 1.5, x2: 1.0 }).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream_rng(7, Stream::Gaussian, 0).random();
        let b: f64 = stream_rng(7, Stream::Gaussian, 0).random();
        let c: f64 = stream_rng(7, Stream::Jumps, 0).random();
        let d: f64 = stream_rng(7, Stream::Gaussian, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn no_intensity_no_jumps() {
        let rec = simulate_compound_poisson(&JumpSpec::none(), 10.0, 3).unwrap();
        assert!(rec.is_empty());
    }

    #[test]
    fn mixed_path_is_sum_of_parts() {
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let op = build_operator(Arc::new(FbmModel::new(0.75).unwrap()), &grid, CellRule::Energy).unwrap();
        let spec = JumpSpec::new(5.0, JumpDistribution::Normal { mean: 0.1, var: 0.04 }).unwrap();
        let p = simulate_mixed(&op, &spec, 11).unwrap();
        for i in 0..32 {
            assert_eq!(p.x.values()[i], p.g.values()[i] + p.j.values()[i]);
        }
        let last = p.j.values()[31];
        assert_eq!(last, p.jumps.sizes.iter().sum::<f64>());

        let quiet = simulate_mixed(&op, &JumpSpec::none(), 11).unwrap();
        assert_eq!(quiet.x, quiet.g);
        assert_eq!(quiet.g, p.g);

        let other = JumpSpec::new(2.0, JumpDistribution::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let q = simulate_mixed(&op, &other, 11).unwrap();
        assert_eq!(q.g, p.g);
    }

    #[test]
    fn zero_kernel_gives_pure_jumps() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let op = DiscreteOperator::from_parts(
            grid.clone(),
            Arc::new(DMatrix::zeros(8, 8)),
            vec![0.125; 8],
        )
        .unwrap();
        let spec = JumpSpec::new(4.0, JumpDistribution::TwoPoint { x1: 1.0, p: 0.5, x2: -1.0 }).unwrap();
        let p = simulate_mixed(&op, &spec, 5).unwrap();
        assert_eq!(p.x, p.j);
    }

    #[test]
    fn cholesky_is_deterministic() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let m = FbmModel::new(0.7).unwrap();
        let a = simulate_gaussian_cholesky(&m, &grid, 99).unwrap();
        let b = simulate_gaussian_cholesky(&m, &grid, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_rescues_rank_deficient_covariance() {
        let s = DMatrix::from_element(3, 3, 1.0);
        assert!(cholesky_with_jitter(s).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(bad), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn detect_injected_jump() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let mut v = vec![0.0; 10];
        for x in &mut v[4..] {
            *x = 10.0;
        }
        let x = SamplePath::new(grid.clone(), v).unwrap();
        let rec = detect_jumps(&x, 1.0).unwrap();
        assert_eq!(rec.times, vec![grid.times()[4]]);
        assert_eq!(rec.sizes, vec![10.0]);
        assert!(detect_jumps(&x, 20.0).unwrap().is_empty());
        assert!(detect_jumps(&x, 0.0).is_err());
    }
}
