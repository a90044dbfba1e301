//! Monte Carlo moment checks of the samplers. Seeds are fixed, so every
//! bound below is a deterministic pass or fail.

use std::sync::Arc;

use gvpj::model::{CellRule, FbmModel, VolterraModel};
use gvpj::operators::build_operator;
use gvpj::simulation::{
    detect_jumps, simulate_compound_poisson, simulate_gaussian_volterra, simulate_mixed,
    stream_rng, CholeskySampler, JumpDistribution, JumpSpec, Stream,
};
use gvpj::verification::sample_moments;
use gvpj::TimeGrid;

const PATHS: usize = 10_000;

#[test]
fn cholesky_marginal_variance_matches_covariance() {
    let grid = TimeGrid::uniform(1.0, 16).unwrap();
    let model = FbmModel::new(0.75).unwrap();
    let sampler = CholeskySampler::new(&model, &grid).unwrap();
    let mut last = Vec::with_capacity(PATHS);
    let mut mid = Vec::with_capacity(PATHS);
    for k in 0..PATHS {
        let p = sampler.sample(&mut stream_rng(1, Stream::Gaussian, k as u64));
        last.push(p.values()[15]);
        mid.push(p.values()[7]);
    }
    let m = sample_moments(&last);
    assert!(m.mean.abs() < 3.0 * m.mean_se);
    assert!((m.var - 1.0).abs() < 3.0 * m.var_se);
    let m = sample_moments(&mid);
    let want = model.covariance(0.5, 0.5).unwrap();
    assert!((m.var - want).abs() < 3.0 * m.var_se);
}

#[test]
fn brownian_volterra_increments_are_independent() {
    let grid = TimeGrid::uniform(1.0, 8).unwrap();
    let op = build_operator(Arc::new(FbmModel::new(0.5).unwrap()), &grid, CellRule::Energy).unwrap();
    let mut prod = Vec::with_capacity(PATHS);
    let mut first = Vec::with_capacity(PATHS);
    for k in 0..PATHS {
        let (g, _) = simulate_gaussian_volterra(&op, k as u64).unwrap();
        let inc = g.increments();
        prod.push(inc[2] * inc[5]);
        first.push(inc[0]);
    }
    let m = sample_moments(&prod);
    assert!(m.mean.abs() < 3.0 * m.mean_se);
    let m = sample_moments(&first);
    assert!((m.var - 0.125).abs() < 3.0 * m.var_se);
}

#[test]
fn compound_poisson_count_and_moments() {
    let spec = JumpSpec::new(5.0, JumpDistribution::Normal { mean: 0.1, var: 0.04 }).unwrap();
    let mut counts = Vec::with_capacity(PATHS);
    let mut totals = Vec::with_capacity(PATHS);
    for k in 0..PATHS {
        let rec = simulate_compound_poisson(&spec, 1.0, k as u64).unwrap();
        assert!(rec.times.windows(2).all(|w| w[0] < w[1]));
        assert!(rec.times.iter().all(|&t| t > 0.0 && t <= 1.0));
        counts.push(rec.len() as f64);
        totals.push(rec.sizes.iter().sum::<f64>());
    }
    let c = sample_moments(&counts);
    assert!((c.mean - 5.0).abs() < 3.0 * c.mean_se);
    assert!((c.var - 5.0).abs() < 3.0 * c.var_se);
    let s = sample_moments(&totals);
    assert!((s.mean - 5.0 * spec.mu1()).abs() < 3.0 * s.mean_se);
    assert!((s.var - 5.0 * spec.mu2()).abs() < 3.0 * s.var_se);
}

#[test]
fn two_point_jump_sizes_follow_their_weights() {
    let spec = JumpSpec::new(
        50.0,
        JumpDistribution::TwoPoint { x1: -0.5, p: 0.3, x2: 1.0 },
    )
    .unwrap();
    let rec = simulate_compound_poisson(&spec, 100.0, 9).unwrap();
    let low = rec.sizes.iter().filter(|&&x| x == -0.5).count() as f64;
    let n = rec.len() as f64;
    assert!(rec.sizes.iter().all(|&x| x == -0.5 || x == 1.0));
    assert!((low / n - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n).sqrt());
}

#[test]
fn recovered_martingale_increments_have_the_bracket_variance() {
    let grid = TimeGrid::uniform(1.0, 32).unwrap();
    let op = build_operator(Arc::new(FbmModel::new(0.75).unwrap()), &grid, CellRule::Energy).unwrap();
    let mut cell = Vec::with_capacity(2_000);
    for k in 0..2_000 {
        let (g, dm) = simulate_gaussian_volterra(&op, k).unwrap();
        let back = op.recover_martingale(&g).unwrap().increments();
        assert!((back[20] - dm[20]).abs() < 1e-10);
        cell.push(back[20]);
    }
    let m = sample_moments(&cell);
    assert!((m.var - 1.0 / 32.0).abs() < 3.0 * m.var_se);
}

#[test]
fn large_jumps_are_detected() {
    let grid = TimeGrid::uniform(1.0, 1024).unwrap();
    let op = build_operator(Arc::new(FbmModel::new(0.75).unwrap()), &grid, CellRule::Energy).unwrap();
    let spec = JumpSpec::new(10.0, JumpDistribution::TwoPoint { x1: -1.0, p: 0.5, x2: 1.0 }).unwrap();
    let mut found = 0usize;
    let mut total = 0usize;
    for seed in 0..20 {
        let path = simulate_mixed(&op, &spec, seed).unwrap();
        let det = detect_jumps(&path.x, 0.5).unwrap();
        total += path.jumps.len();
        for &t in &path.jumps.times {
            let cell = grid.cell_containing(t).unwrap();
            if det.times.contains(&grid.times()[cell]) {
                found += 1;
            }
        }
    }
    assert!(total > 100);
    assert!(found as f64 >= 0.95 * total as f64, "{found} of {total}");
}
