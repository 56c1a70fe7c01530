use ddgauss::analysis::find_equilibrium;
use ddgauss::experiments::{
    conditioned_ensemble, exit_bracket, moderate_deviation_times, qsd_small_k, sirs_cost_samples,
    threshold_time_ensemble, wasserstein_bootstrap_se, wasserstein_truncated_1d,
};
use ddgauss::model::logistic;
use ddgauss::rng::replica_rng;
use ddgauss::stats::{mean, variance};
use rand::Rng;

/// Direct-method SIRS(λ, γ, θ) from `(K/2, K/4)`; returns `∫_0^T I(s) ds`.
fn gillespie_sirs_cost(k: f64, t_end: f64, seed: u64) -> f64 {
    let mut rng = replica_rng(seed, 999);
    let kk = k as i64;
    let (mut s, mut i) = (kk / 2, kk / 4);
    let mut t = 0.0;
    let mut cost = 0.0;
    loop {
        let (sf, inf) = (s as f64 / k, i as f64 / k);
        let infect = k * 2.0 * sf * inf;
        let recover = k * inf;
        let wane = k * (1.0 - sf - inf);
        let total = infect + recover + wane;
        let dt = if total > 0.0 { -(1.0 - rng.random::<f64>()).ln() / total } else { f64::INFINITY };
        if t + dt >= t_end {
            return cost + inf * (t_end - t);
        }
        cost += inf * dt;
        t += dt;
        let u = rng.random::<f64>() * total;
        if u < infect {
            s -= 1;
            i += 1;
        } else if u < infect + recover {
            i -= 1;
        } else {
            s += 1;
        }
    }
}

#[test]
fn sirs_cost_agrees_with_independent_simulator() {
    let reps = 1000;
    let c = sirs_cost_samples(2.0, 1.0, 1.0, 200.0, 50.0, reps, 21).unwrap();
    let g: Vec<f64> = (0..reps as u64).map(|r| gillespie_sirs_cost(200.0, 50.0, r)).collect();
    let se = (c.variance / reps as f64 + variance(&g) / reps as f64).sqrt();
    assert!((c.mean - mean(&g)).abs() < 4.0 * se, "{} vs {}", c.mean, mean(&g));
    assert!((c.variance / variance(&g) - 1.0).abs() < 0.25);
}

#[test]
fn conditioned_marginal_matches_exact_qsd_at_small_k() {
    let k = 20.0;
    let exact = qsd_small_k(2.0, 1.0, k).unwrap();
    let m: f64 = exact.states.iter().zip(&exact.probs).map(|(x, p)| x * p).sum();
    let v: f64 = exact.states.iter().zip(&exact.probs).map(|(x, p)| (x - m).powi(2) * p).sum();
    let e = conditioned_ensemble(2.0, 1.0, k, 30.0, 0.0, 4000, None, 22).unwrap();
    let se = (v / e.survivors as f64).sqrt();
    assert!((mean(&e.marginals) - m).abs() < 4.0 * se, "{} vs {m}", mean(&e.marginals));
    assert!((variance(&e.marginals) / v - 1.0).abs() < 0.15);
}

#[test]
fn conditioned_ensemble_stabilizes() {
    let sigma2 = 2.0;
    let a = conditioned_ensemble(2.0, 1.0, 100.0, 30.0, 0.0, 4000, None, 23).unwrap();
    let b = conditioned_ensemble(2.0, 1.0, 100.0, 60.0, 0.0, 4000, None, 24).unwrap();
    let wa = wasserstein_truncated_1d(&a.rescaled, sigma2).unwrap();
    let wb = wasserstein_truncated_1d(&b.rescaled, sigma2).unwrap();
    let se = wasserstein_bootstrap_se(&a.rescaled, sigma2, 200, 25).unwrap();
    assert!((wa - wb).abs() < 3.0 * se, "{wa} vs {wb} (se {se})");
}

#[test]
fn exit_times_respect_censoring_and_seed() {
    let m = logistic(2.0, 1.0).unwrap();
    let eq = find_equilibrium(&m, &[1.0], 1e-12, 50).unwrap();
    let a = moderate_deviation_times(&m, &eq, 100.0, 0.25, 0.25, 50, 200.0, 26).unwrap();
    let b = moderate_deviation_times(&m, &eq, 100.0, 0.25, 0.25, 50, 200.0, 26).unwrap();
    assert_eq!(a.taus, b.taus);
    for (t, c) in a.taus.iter().zip(&a.censored) {
        assert!(*t > 0.0 && *t <= 200.0);
        if *c {
            assert_eq!(*t, 200.0);
        }
    }
    let (lo, hi) = exit_bracket(100.0, 0.25, 0.25);
    assert_eq!((a.lower, a.upper), (lo, hi));
}

#[test]
fn threshold_rates_have_valid_intervals() {
    let m = logistic(2.0, 1.0).unwrap();
    let eq = find_equilibrium(&m, &[1.0], 1e-12, 50).unwrap();
    let t = threshold_time_ensemble(&m, &eq, &[50.0, 200.0], 1.0, 20, 5.0, 0.01, 27).unwrap();
    for row in &t.rows {
        assert!(row.rate_lo <= row.rate && row.rate <= row.rate_hi);
        assert_eq!(row.times.len(), 20);
        assert_eq!(row.crossings, row.times.iter().filter(|c| c.is_some()).count());
        assert!(row.exposure > 0.0 && row.exposure <= 20.0 * 5.0 + 1e-9);
    }
}
