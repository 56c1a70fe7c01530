//! Monte Carlo ensembles for exit times, the conditioned logistic process, the
//! SIRS epidemic cost, and the gap-threshold crossing study.
//!
//! Every ensemble takes a base seed; replica `r` runs on `replica_rng(seed, r)`
//! and results are collected in replica order.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{find_equilibrium, EquilibriumReport};
use crate::error::{Error, Result};
use crate::model::{logistic, sirs, Model};
use crate::rng::{derive_seed, replica_rng};
use crate::simulate::{gap_crossing_time, simulate_coupled_with, simulate_ctmc, ChannelKind, CouplingOptions, Ctmc, Step};
use crate::stats;

/// Exit-time bracket `(exp((1/2−h)Kη²), exp((1/2+h)Kη²))`.
pub fn exit_bracket(k: f64, eta: f64, h: f64) -> (f64, f64) {
    let a = k * eta * eta;
    (((0.5 - h) * a).exp(), ((0.5 + h) * a).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitTimeSample {
    pub k: f64,
    pub eta: f64,
    pub h: f64,
    pub max_horizon: f64,
    /// Exit time per replica; censored replicas hold `max_horizon`.
    pub taus: Vec<f64>,
    pub censored: Vec<bool>,
    pub lower: f64,
    pub upper: f64,
    /// Fraction of all replicas with an uncensored `τ` strictly inside the bracket.
    pub bracket_fraction: f64,
    pub warnings: Vec<String>,
}

/// `Σ⁻¹`-distance from `x` to the nearest boundary face of the model's domain.
pub fn mahalanobis_distance_to_boundary(model: &Model, x: &[f64], sigma: &DMatrix<f64>) -> f64 {
    model
        .domain()
        .faces()
        .iter()
        .map(|(a, b)| {
            let av = nalgebra::DVector::from_column_slice(a);
            let ax = av.dot(&nalgebra::DVector::from_column_slice(x));
            let spread = (av.transpose() * sigma * &av)[(0, 0)].sqrt();
            (b - ax) / spread
        })
        .fold(f64::INFINITY, f64::min)
}

fn quadratic_form(p: &DMatrix<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += v[i] * p[(i, j)] * v[j];
        }
    }
    s
}

/// Exit times of `X` started at `floor(Kx*)/K` from the `Σ*⁻¹`-ball of radius `η`.
#[allow(clippy::too_many_arguments)]
pub fn moderate_deviation_times(
    model: &Model,
    eq: &EquilibriumReport,
    k: f64,
    eta: f64,
    h: f64,
    replicas: usize,
    max_horizon: f64,
    seed: u64,
) -> Result<ExitTimeSample> {
    if replicas == 0 || !(eta > 0.0) || !(max_horizon > 0.0) || !(0.0..0.5).contains(&h) {
        return Err(Error::InvalidParameter(format!(
            "need replicas>=1, eta>0, max_horizon>0, 0<=h<1/2 (got {replicas}, {eta}, {max_horizon}, {h})"
        )));
    }
    if !eq.stable {
        return Err(Error::Unstable);
    }
    if eq.s_star.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("S* is not positive definite".into()));
    }
    let sigma = eq.sigma()?;
    let precision = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Sigma*".into()))?;
    let reach = mahalanobis_distance_to_boundary(model, &eq.x_star, sigma);
    if eta >= reach {
        return Err(Error::Unreachable(format!(
            "eta={eta} is not below the Sigma*-distance {reach:.6} from x* to the domain boundary"
        )));
    }
    let mut warnings = Vec::new();
    let a = k * eta * eta;
    if !(4.0..=8.0).contains(&a) {
        warnings.push(format!("K*eta^2={a:.3} is outside the recommended band [4, 8]"));
    }
    if eta * k.sqrt() < 2.0 {
        warnings.push(format!("eta*sqrt(K)={:.3} is not large against 1", eta * k.sqrt()));
    }
    let eta2 = eta * eta;
    let x_star = eq.x_star.clone();
    let runs: Vec<Result<Option<f64>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let mut sim = Ctmc::new(model, k, &x_star, max_horizon, ChannelKind::Exponential, &mut rng)?;
            let mut dev = vec![0.0; x_star.len()];
            let outside = |x: &[f64], dev: &mut Vec<f64>| {
                for (d, (a, b)) in dev.iter_mut().zip(x.iter().zip(&x_star)) {
                    *d = a - b;
                }
                quadratic_form(&precision, dev) >= eta2
            };
            if outside(sim.state(), &mut dev) {
                return Ok(Some(0.0));
            }
            loop {
                match sim.next_step()? {
                    Step::Jump { t, .. } => {
                        if outside(sim.state(), &mut dev) {
                            return Ok(Some(t));
                        }
                    }
                    Step::IntervalEnd { .. } => {}
                    Step::Done => return Ok(None),
                }
            }
        })
        .collect();
    let mut taus = Vec::with_capacity(replicas);
    let mut censored = Vec::with_capacity(replicas);
    for r in runs {
        match r? {
            Some(t) => {
                taus.push(t);
                censored.push(false);
            }
            None => {
                taus.push(max_horizon);
                censored.push(true);
            }
        }
    }
    if censored.iter().all(|&c| c) {
        return Err(Error::AllCensored(replicas));
    }
    let (lower, upper) = exit_bracket(k, eta, h);
    let inside = taus
        .iter()
        .zip(&censored)
        .filter(|(t, c)| !**c && **t > lower && **t < upper)
        .count();
    Ok(ExitTimeSample {
        k,
        eta,
        h,
        max_horizon,
        taus,
        censored,
        lower,
        upper,
        bracket_fraction: inside as f64 / replicas as f64,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionedEnsemble {
    pub p: f64,
    pub q: f64,
    pub k: f64,
    pub t: f64,
    pub window: f64,
    pub x0: f64,
    pub replicas: usize,
    pub survivors: usize,
    /// `X(t)` of every replica alive at `t + window`.
    pub marginals: Vec<f64>,
    /// `X(t + window)` of the same replicas.
    pub window_end: Vec<f64>,
    /// `√K (X(t) − x*)`.
    pub rescaled: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ConditionedEnsemble {
    pub fn survival_fraction(&self) -> f64 {
        self.survivors as f64 / self.replicas as f64
    }
}

/// Logistic chains conditioned on surviving up to `t + window`.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_ensemble(
    p: f64,
    q: f64,
    k: f64,
    t: f64,
    window: f64,
    replicas: usize,
    x0: Option<f64>,
    seed: u64,
) -> Result<ConditionedEnsemble> {
    let model = logistic(p, q)?;
    if !(t > 0.0) || !(window >= 0.0) || replicas == 0 {
        return Err(Error::InvalidParameter(format!(
            "need t>0, window>=0, replicas>=1 (got {t}, {window}, {replicas})"
        )));
    }
    let x_star = p - q;
    let x0 = x0.unwrap_or(x_star);
    let mut warnings = Vec::new();
    if t < 6.0 / x_star * k.ln() {
        warnings.push(format!(
            "burn-in t={t} is shorter than (6/x*) log K = {:.3}",
            6.0 / x_star * k.ln()
        ));
    }
    let horizon = t + window;
    let runs: Vec<Result<Option<(f64, f64)>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let path = simulate_ctmc(&model, k, &[x0], horizon, &ChannelKind::Exponential, &mut rng)?;
            if path.absorbed_at.is_some() {
                return Ok(None);
            }
            Ok(Some((path.state_at(t)[0], path.state_at(horizon)[0])))
        })
        .collect();
    let mut marginals = Vec::new();
    let mut window_end = Vec::new();
    for r in runs {
        if let Some((a, b)) = r? {
            marginals.push(a);
            window_end.push(b);
        }
    }
    if marginals.is_empty() {
        return Err(Error::NoSurvivors(0.0));
    }
    let sk = k.sqrt();
    let rescaled = marginals.iter().map(|x| sk * (x - x_star)).collect();
    Ok(ConditionedEnsemble {
        p,
        q,
        k,
        t,
        window,
        x0,
        replicas,
        survivors: marginals.len(),
        marginals,
        window_end,
        rescaled,
        warnings,
    })
}

/// Quasi-stationary law of the logistic chain on `{1, …, 5K}` by power iteration.
#[derive(Debug, Clone, Serialize)]
pub struct QsdExact {
    pub k: f64,
    /// Densities `n/K`.
    pub states: Vec<f64>,
    pub probs: Vec<f64>,
    /// Exit rate to 0 under the quasi-stationary law.
    pub extinction_rate: f64,
    pub iterations: usize,
}

/// Small-`K` cross-check: leading left eigenvector of the sub-generator on
/// `{1, …, 5K}` (births from the top state suppressed), via uniformized power iteration.
pub fn qsd_small_k(p: f64, q: f64, k: f64) -> Result<QsdExact> {
    logistic(p, q)?;
    if !(k >= 1.0) || k > 50.0 || k.fract() != 0.0 {
        return Err(Error::InvalidParameter(format!(
            "exact QSD is offered for integer 1 <= K <= 50, got {k}"
        )));
    }
    let n_max = (5.0 * k) as usize;
    let birth: Vec<f64> = (1..=n_max)
        .map(|n| if n < n_max { p * n as f64 } else { 0.0 })
        .collect();
    let death: Vec<f64> = (1..=n_max)
        .map(|n| q * n as f64 + (n * n) as f64 / k)
        .collect();
    let lambda = birth
        .iter()
        .zip(&death)
        .map(|(b, d)| b + d)
        .fold(0.0, f64::max)
        * 1.05;
    let mut pi = vec![0.0; n_max];
    pi[((p - q) * k).round().max(1.0) as usize - 1] = 1.0;
    let mut next = vec![0.0; n_max];
    let mut loss = 0.0;
    let mut iterations = 0;
    for it in 0..5_000_000 {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for i in 0..n_max {
            let m = pi[i];
            if m == 0.0 {
                continue;
            }
            let (b, d) = (birth[i] / lambda, death[i] / lambda);
            next[i] += m * (1.0 - b - d);
            if i + 1 < n_max {
                next[i + 1] += m * b;
            }
            if i > 0 {
                next[i - 1] += m * d;
            }
        }
        let mass: f64 = next.iter().sum();
        loss = 1.0 - mass;
        let mut diff = 0.0;
        for i in 0..n_max {
            let v = next[i] / mass;
            diff += (v - pi[i]).abs();
            pi[i] = v;
        }
        iterations = it + 1;
        if diff < 1e-13 {
            break;
        }
    }
    Ok(QsdExact {
        k,
        states: (1..=n_max).map(|n| n as f64 / k).collect(),
        probs: pi,
        extinction_rate: loss * lambda,
        iterations,
    })
}

/// Comonotone-coupling upper bound on the truncated-cost Wasserstein distance
/// between the sample and `N(0, σ²)`.
pub fn wasserstein_truncated_1d(samples: &[f64], sigma2: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let sd = sigma2.sqrt();
    Ok(v.iter()
        .enumerate()
        .map(|(i, x)| {
            let z = stats::normal_quantile((i as f64 + 0.5) / n) * sd;
            (x - z).abs().min(1.0)
        })
        .sum::<f64>()
        / n)
}

/// Bootstrap standard error of [`wasserstein_truncated_1d`].
pub fn wasserstein_bootstrap_se(samples: &[f64], sigma2: f64, resamples: usize, seed: u64) -> Result<f64> {
    let vals: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = replica_rng(seed, b as u64);
            let draw: Vec<f64> = (0..samples.len())
                .map(|_| samples[rng.random_range(0..samples.len())])
                .collect();
            wasserstein_truncated_1d(&draw, sigma2)
        })
        .collect::<Result<_>>()?;
    Ok(stats::variance(&vals).sqrt())
}

/// Endemic equilibrium `(γ/λ, θ(1 − γ/λ)/(γ + θ))`.
pub fn sirs_equilibrium(lam: f64, gam: f64, theta: f64) -> Vec<f64> {
    let s = gam / lam;
    vec![s, theta * (1.0 - s) / (gam + theta)]
}

/// `σ²` computed from the linearization and from the closed form.
#[derive(Debug, Clone, Serialize)]
pub struct SigmaOracle {
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    /// `(0 1) F'(x*)⁻¹ S* F'(x*)⁻ᵀ (0 1)ᵀ`.
    pub matrix: f64,
    /// The closed form with the factor `(λ − θ)`; undefined at `λ = θ`.
    pub printed: Option<f64>,
    /// The closed form with `(λ − γ)` in place of `(λ − θ)`.
    pub substituted: f64,
    pub printed_agrees: bool,
    pub substituted_agrees: bool,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// `(0 1) J⁻¹ S J⁻ᵀ (0 1)ᵀ`.
pub fn integrated_variance(jac: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let inv = jac
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("F'(x*)".into()))?;
    let m = &inv * s * inv.transpose();
    Ok(m[(1, 1)])
}

pub fn sigma_oracle(lam: f64, gam: f64, theta: f64) -> Result<SigmaOracle> {
    let model = sirs(lam, gam, theta)?;
    let x = sirs_equilibrium(lam, gam, theta);
    let jac = model.jacobian(&x)?;
    let s = model.diffusion_matrix(&x);
    let matrix = integrated_variance(&jac, &s)?;
    let tail = (lam - gam).powi(2) + (gam + theta) * (lam + theta);
    let with = |f: f64| 2.0 * gam * theta / (lam * f * (gam + theta).powi(3)) * tail;
    let printed = if lam == theta { None } else { Some(with(lam - theta)) };
    let substituted = with(lam - gam);
    Ok(SigmaOracle {
        lambda: lam,
        gamma: gam,
        theta,
        matrix,
        printed,
        substituted,
        printed_agrees: printed.is_some_and(|p| rel_close(p, matrix, 1e-8)),
        substituted_agrees: rel_close(substituted, matrix, 1e-8),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSample {
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    pub k: f64,
    pub t: f64,
    /// `∫_0^T I(s) ds` per replica.
    pub costs: Vec<f64>,
    /// Infection died out before `T`.
    pub extinct: Vec<bool>,
    pub mean: f64,
    pub variance: f64,
    pub standard_error: f64,
    pub i_star: f64,
    pub sigma2: f64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
}

/// Exact infected-density integrals of SIRS chains started at `floor(Kx*)/K`.
pub fn sirs_cost_samples(
    lam: f64,
    gam: f64,
    theta: f64,
    k: f64,
    horizon: f64,
    replicas: usize,
    seed: u64,
) -> Result<CostSample> {
    if replicas < 2 || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need replicas>=2 and T>0 (got {replicas}, {horizon})"
        )));
    }
    let model = sirs(lam, gam, theta)?;
    let eq = find_equilibrium(&model, &sirs_equilibrium(lam, gam, theta), 1e-13, 50)?;
    let sigma2 = sigma_oracle(lam, gam, theta)?.matrix;
    let x_star = eq.x_star.clone();
    let runs: Vec<Result<(f64, bool)>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let path = simulate_ctmc(&model, k, &x_star, horizon, &ChannelKind::Exponential, &mut rng)?;
            let cost = path.integral(|x| x[1], 0.0, horizon);
            let extinct = path.n0[1] == 0 || (0..path.n_events()).any(|i| path.counts(Some(i))[1] == 0);
            Ok((cost, extinct))
        })
        .collect();
    let mut costs = Vec::with_capacity(replicas);
    let mut extinct = Vec::with_capacity(replicas);
    for r in runs {
        let (c, e) = r?;
        costs.push(c);
        extinct.push(e);
    }
    let mean = stats::mean(&costs);
    let variance = stats::variance(&costs);
    let i_star = x_star[1];
    Ok(CostSample {
        lambda: lam,
        gamma: gam,
        theta,
        k,
        t: horizon,
        standard_error: (variance / replicas as f64).sqrt(),
        mean,
        variance,
        i_star,
        sigma2,
        predicted_mean: i_star * horizon,
        predicted_variance: sigma2 * horizon / k,
        costs,
        extinct,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdRow {
    pub k: f64,
    pub eps: f64,
    pub replicas: usize,
    pub crossings: usize,
    /// Total observed time: crossing time, or the horizon when none.
    pub exposure: f64,
    /// Crossings per unit time.
    pub rate: f64,
    pub rate_lo: f64,
    pub rate_hi: f64,
    /// First crossing time per replica.
    pub times: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdTable {
    pub alpha: f64,
    pub horizon: f64,
    pub rows: Vec<ThresholdRow>,
    /// Rates are nonincreasing along increasing `K·ε(K)`.
    pub nonincreasing: bool,
}

/// `ε(K) = α log K / K`.
pub fn eps_rule(alpha: f64, k: f64) -> f64 {
    alpha * k.ln() / k
}

/// Coupled runs per `K`, recording when the gap first exceeds `ε(K)`.
#[allow(clippy::too_many_arguments)]
pub fn threshold_time_ensemble(
    model: &Model,
    eq: &EquilibriumReport,
    k_list: &[f64],
    alpha: f64,
    replicas: usize,
    max_horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<ThresholdTable> {
    if k_list.is_empty() || k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("K list must be nonempty and increasing".into()));
    }
    if !eq.stable {
        return Err(Error::Unstable);
    }
    let opts = CouplingOptions {
        keep_jump_gaps: true,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for (ki, &k) in k_list.iter().enumerate() {
        let eps = eps_rule(alpha, k);
        let base = derive_seed(seed, ki as u64);
        let times: Vec<Option<f64>> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let mut rng = replica_rng(base, r as u64);
                let c = simulate_coupled_with(model, eq, k, &eq.x_star, max_horizon, dt, &opts, &mut rng)?;
                Ok(gap_crossing_time(&c, eps))
            })
            .collect::<Result<_>>()?;
        let crossings = times.iter().filter(|t| t.is_some()).count();
        let exposure: f64 = times.iter().map(|t| t.unwrap_or(max_horizon)).sum();
        let (lo, hi) = stats::poisson_mean_interval(crossings as u64, 0.99);
        rows.push(ThresholdRow {
            k,
            eps,
            replicas,
            crossings,
            exposure,
            rate: crossings as f64 / exposure,
            rate_lo: lo / exposure,
            rate_hi: hi / exposure,
            times,
        });
    }
    let mut order: Vec<&ThresholdRow> = rows.iter().collect();
    order.sort_by(|a, b| (a.k * a.eps).total_cmp(&(b.k * b.eps)));
    let nonincreasing = order.windows(2).all(|w| w[1].rate <= w[0].rate);
    Ok(ThresholdTable {
        alpha,
        horizon: max_horizon,
        rows,
        nonincreasing,
    })
}
