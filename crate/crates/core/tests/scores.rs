use matern_eb::evalsim::{crps, ign, interval, interval_half_width, proper_scores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc_inv;

fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// CRPS of the empirical distribution of `s` at x:
/// mean|S − x| − ½ mean|S − S'|.
fn empirical_crps(s: &mut [f64], x: f64) -> f64 {
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() as f64;
    let t1 = s.iter().map(|v| (v - x).abs()).sum::<f64>() / m;
    let pairs: f64 = s.iter().enumerate().map(|(i, v)| v * (2.0 * i as f64 + 1.0 - m)).sum();
    t1 - pairs / (m * m)
}

/// Stratified draws from N(μ, σ²): one uniform per stratum of width 1/M.
#[test]
fn crps_closed_form_matches_monte_carlo() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let m = 1_000_000;
    for i in 0..10 {
        let mu = r.random_range(-2.0..2.0);
        let sigma = r.random_range(0.3..2.5);
        let x = mu + sigma * r.random_range(-3.0..3.0);
        let mut s: Vec<f64> = (0..m)
            .map(|j| mu + sigma * norm_quantile((j as f64 + r.random::<f64>()) / m as f64))
            .collect();
        let mc = empirical_crps(&mut s, x);
        let cf = crps(x, mu, sigma);
        assert!((mc - cf).abs() < 1e-3, "pair {i}: {mc} vs {cf}");
    }
}

#[test]
fn scores_are_minimized_at_the_true_sigma() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let s0 = 1.7;
    let xs: Vec<f64> = (0..100_000).map(|_| {
        let z: f64 = StandardNormal.sample(&mut r);
        s0 * z
    }).collect();
    let grid = [0.5, 0.75, 1.0, 1.5, 2.0];
    let expected = |f: &dyn Fn(f64, f64) -> f64, g: f64| xs.iter().map(|&x| f(x, g * s0)).sum::<f64>() / xs.len() as f64;
    let scores: [(&str, &dyn Fn(f64, f64) -> f64); 3] = [
        ("crps", &|x, s| crps(x, 0.0, s)),
        ("ign", &|x, s| ign(x, 0.0, s)),
        ("int", &|x, s| interval(x, 0.0, s, 0.05)),
    ];
    for (name, f) in scores {
        let vals: Vec<f64> = grid.iter().map(|&g| expected(f, g)).collect();
        let best = vals.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(grid[best], 1.0, "{name}: {vals:?}");
    }
}

#[test]
fn interval_score_inside_is_twice_half_width() {
    let a = interval_half_width(0.05);
    assert!((a - 1.95996).abs() < 1e-5);
    for (x, s) in [(0.0, 1.0), (1.2, 0.8), (-3.0, 2.0)] {
        assert!((interval(x, 0.0, s, 0.05) - 2.0 * a * s).abs() < 1e-12);
    }
}

#[test]
fn report_means() {
    let e = [1.0, -1.0, 2.0, 0.0];
    let r = proper_scores(&e, &[1.0; 4], 0.05).unwrap();
    assert_eq!(r.mae, 1.0);
    assert!((r.rmse - 1.5f64.sqrt()).abs() < 1e-15);
    assert!(r.crps > 0.0 && r.int > 0.0);
}
