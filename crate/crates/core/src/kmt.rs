//! Joint construction of a unit-rate Poisson process and a Brownian motion whose
//! difference `P(t) − t − B(t)` stays logarithmically small.
//!
//! The construction is the dyadic conditional-quantile scheme. The top level
//! draws `N ~ Poisson(T)` and maps it through a uniformly smoothed CDF onto
//! `B(T) ~ N(0, T)`. Each cell `[a, b]` is then split: the left-half count is
//! `Binomial(n, 1/2)` and the Brownian midpoint is the bridge midpoint, with the
//! two coupled again through a smoothed quantile transform. Arrivals are placed
//! uniformly inside the finest cells. Both marginals are exact.
//!
//! Arrival times and off-grid Brownian values are materialized lazily and
//! memoized, so a pair answers repeated queries consistently.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Poisson, StandardNormal};
use serde::Serialize;
use statrs::distribution::{Binomial as BinomialLaw, Discrete, DiscreteCDF, Poisson as PoissonLaw};

use crate::error::{Error, Result};
use crate::rng::{child_rng, replica_rng, SimRng};
use crate::stats::{self, LinearFit};

/// Width targeted for the finest dyadic cells.
pub const DEFAULT_FINEST_CELL: f64 = 0.25;

/// `ceil(log2(T / 0.25))`, at least 0.
pub fn default_levels(horizon: f64) -> u32 {
    (horizon / DEFAULT_FINEST_CELL).log2().ceil().max(0.0) as u32
}

/// Uniform draw on the open interval (0, 1).
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Smoothed quantile transform of a discrete draw onto a standard normal.
///
/// `below = P(X < k)`, `mass = P(X = k)`, `above = P(X > k)`; the returned value
/// is `Φ⁻¹(below + u·mass)`, evaluated from whichever tail keeps precision.
pub fn smoothed_normal_score(below: f64, mass: f64, above: f64, u: f64) -> f64 {
    let g = below + u * mass;
    if g <= 0.5 {
        stats::normal_quantile(g.max(f64::MIN_POSITIVE))
    } else {
        stats::normal_upper_quantile((above + (1.0 - u) * mass).max(f64::MIN_POSITIVE))
    }
}

/// `(P(X<k), P(X=k), P(X>k))` for `X ~ Binomial(n, 1/2)`.
fn binomial_half_tails(n: u64, k: u64) -> (f64, f64, f64) {
    match n {
        0 => (0.0, 1.0, 0.0),
        1 => match k {
            0 => (0.0, 0.5, 0.5),
            _ => (0.5, 0.5, 0.0),
        },
        2..=60 => {
            let base = 0.5f64.powi(n as i32);
            let mut below = 0.0;
            let mut above = 0.0;
            let mut mass = 0.0;
            let mut pmf = base;
            for j in 0..=n {
                if j < k {
                    below += pmf;
                } else if j == k {
                    mass = pmf;
                } else {
                    above += pmf;
                }
                pmf = pmf * (n - j) as f64 / (j + 1) as f64;
            }
            (below, mass, above)
        }
        _ => {
            let law = BinomialLaw::new(0.5, n).expect("valid binomial");
            let below = if k == 0 { 0.0 } else { law.cdf(k - 1) };
            (below, law.pmf(k), law.sf(k))
        }
    }
}

fn poisson_tails(mean: f64, k: u64) -> (f64, f64, f64) {
    let law = PoissonLaw::new(mean).expect("valid poisson");
    let below = if k == 0 { 0.0 } else { law.cdf(k - 1) };
    (below, law.pmf(k), law.sf(k))
}

fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    Poisson::new(mean).expect("valid poisson").sample(rng) as u64
}

/// Jointly sampled Poisson path and Brownian path on `[0, T]`.
#[derive(Debug, Clone)]
pub struct KmtPair {
    horizon: f64,
    levels: u32,
    cell: f64,
    /// Cumulative Poisson counts at `k·cell`.
    counts: Vec<u64>,
    /// Brownian values at `k·cell`.
    brownian: Vec<f64>,
    /// Arrival times, laid out by cell: cell `c` owns `counts[c]..counts[c+1]`.
    arrivals: Vec<f64>,
    materialized: Vec<bool>,
    /// Off-grid Brownian values keyed by the bit pattern of the (non-negative) time.
    refined: BTreeMap<u64, f64>,
    rng: SimRng,
}

impl KmtPair {
    /// Samples a coupled pair on `[0, horizon]` with `2^levels` finest cells.
    pub fn sample<R: Rng + ?Sized>(horizon: f64, levels: u32, rng: &mut R) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("KMT horizon must be positive, got {horizon}")));
        }
        if levels > 30 {
            return Err(Error::InvalidParameter(format!("too many dyadic levels: {levels}")));
        }
        let mut own = child_rng(rng);
        let m = 1usize << levels;
        let cell = horizon / m as f64;
        let mut counts = vec![0u64; m + 1];
        let mut brownian = vec![0.0; m + 1];

        let n = sample_poisson(horizon, &mut own);
        let (below, mass, above) = poisson_tails(horizon, n);
        let z = smoothed_normal_score(below, mass, above, open_uniform(&mut own));
        counts[m] = n;
        brownian[m] = z * horizon.sqrt();

        for level in 0..levels {
            let stride = m >> level;
            let half = stride / 2;
            let sd = (stride as f64 * cell).sqrt() / 2.0;
            for a in (0..m).step_by(stride) {
                let b = a + stride;
                let n = counts[b] - counts[a];
                let k = if n == 0 {
                    0
                } else {
                    Binomial::new(n, 0.5).expect("valid binomial").sample(&mut own)
                };
                let (below, mass, above) = binomial_half_tails(n, k);
                let z = smoothed_normal_score(below, mass, above, open_uniform(&mut own));
                counts[a + half] = counts[a] + k;
                brownian[a + half] = 0.5 * (brownian[a] + brownian[b]) + z * sd;
            }
        }

        Ok(KmtPair {
            horizon,
            levels,
            cell,
            arrivals: vec![0.0; n as usize],
            materialized: vec![false; m],
            counts,
            brownian,
            refined: BTreeMap::new(),
            rng: own,
        })
    }

    /// Samples with the default number of levels.
    pub fn sample_default<R: Rng + ?Sized>(horizon: f64, rng: &mut R) -> Result<Self> {
        Self::sample(horizon, default_levels(horizon), rng)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn cell_width(&self) -> f64 {
        self.cell
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn grid_time(&self, k: usize) -> f64 {
        if k == self.n_cells() {
            self.horizon
        } else {
            k as f64 * self.cell
        }
    }

    pub fn grid_counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn grid_brownian(&self) -> &[f64] {
        &self.brownian
    }

    pub fn total_count(&self) -> u64 {
        self.counts[self.n_cells()]
    }

    fn cell_of(&self, t: f64) -> usize {
        ((t / self.cell).floor().max(0.0) as usize).min(self.n_cells() - 1)
    }

    fn materialize(&mut self, c: usize) {
        if self.materialized[c] {
            return;
        }
        let (lo, hi) = (self.counts[c] as usize, self.counts[c + 1] as usize);
        let start = self.grid_time(c);
        let width = self.grid_time(c + 1) - start;
        let slot = &mut self.arrivals[lo..hi];
        for v in slot.iter_mut() {
            *v = start + width * open_uniform(&mut self.rng);
        }
        slot.sort_by(f64::total_cmp);
        self.materialized[c] = true;
    }

    /// Arrival times inside finest cell `c`, sorted.
    pub fn cell_arrivals(&mut self, c: usize) -> &[f64] {
        self.materialize(c);
        &self.arrivals[self.counts[c] as usize..self.counts[c + 1] as usize]
    }

    /// All arrival times on `[0, T]`, sorted.
    pub fn all_arrivals(&mut self) -> Vec<f64> {
        for c in 0..self.n_cells() {
            self.materialize(c);
        }
        self.arrivals.clone()
    }

    /// First arrival strictly after `u`, if any before the horizon.
    pub fn next_arrival_after(&mut self, u: f64) -> Option<f64> {
        if u >= self.horizon {
            return None;
        }
        let m = self.n_cells();
        let mut c = self.cell_of(u.max(0.0));
        while c < m {
            if self.counts[c + 1] > self.counts[c] {
                self.materialize(c);
                let cell = &self.arrivals[self.counts[c] as usize..self.counts[c + 1] as usize];
                let i = cell.partition_point(|&a| a <= u);
                if i < cell.len() {
                    return Some(cell[i]);
                }
            }
            c += 1;
        }
        None
    }

    /// `P(t)`, right-continuous.
    pub fn count_at(&mut self, t: f64) -> Result<u64> {
        self.check_time(t)?;
        let c = self.cell_of(t);
        let base = self.counts[c];
        if self.counts[c + 1] == base {
            return Ok(base);
        }
        let arr = self.cell_arrivals(c);
        Ok(base + arr.partition_point(|&a| a <= t) as u64)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::TimeOutOfRange {
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(())
    }

    /// `B(t)`. Off-grid values are drawn from the Brownian bridge between the
    /// nearest known neighbours and become permanent grid points.
    pub fn refine_brownian(&mut self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let t = t + 0.0; // normalize -0.0
        let m = self.n_cells();
        let k = (t / self.cell).round();
        if (k * self.cell - t).abs() <= 1e-12 * self.cell && (k as usize) <= m {
            return Ok(self.brownian[k as usize]);
        }
        if t == self.horizon {
            return Ok(self.brownian[m]);
        }
        let key = t.to_bits();
        if let Some(&v) = self.refined.get(&key) {
            return Ok(v);
        }
        let c = self.cell_of(t);
        let (mut t0, mut b0) = (self.grid_time(c), self.brownian[c]);
        let (mut t1, mut b1) = (self.grid_time(c + 1), self.brownian[c + 1]);
        if let Some((&kk, &v)) = self.refined.range(t0.to_bits()..key).next_back() {
            t0 = f64::from_bits(kk);
            b0 = v;
        }
        if let Some((&kk, &v)) = self.refined.range(key..t1.to_bits()).next() {
            t1 = f64::from_bits(kk);
            b1 = v;
        }
        let w = (t - t0) / (t1 - t0);
        let var = (t - t0) * (t1 - t) / (t1 - t0);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let v = b0 + w * (b1 - b0) + var.max(0.0).sqrt() * z;
        self.refined.insert(key, v);
        Ok(v)
    }

    /// Number of memoized off-grid Brownian points.
    pub fn n_refined(&self) -> usize {
        self.refined.len()
    }

    /// Values at all memoized points (grid and refined), in time order.
    pub fn known_brownian(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = (0..=self.n_cells())
            .map(|k| (self.grid_time(k), self.brownian[k]))
            .chain(self.refined.iter().map(|(&k, &b)| (f64::from_bits(k), b)))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// `sup |P(t) − t − B(t)|` over the dyadic grid and both one-sided limits at
/// every arrival.
pub fn kmt_error(pair: &mut KmtPair) -> f64 {
    let m = pair.n_cells();
    let mut sup: f64 = 0.0;
    for c in 0..=m {
        let t = pair.grid_time(c);
        sup = sup.max((pair.counts[c] as f64 - t - pair.brownian[c]).abs());
        if c == m {
            break;
        }
        let base = pair.counts[c];
        let arrivals: Vec<f64> = pair.cell_arrivals(c).to_vec();
        for (j, a) in arrivals.into_iter().enumerate() {
            let b = pair.refine_brownian(a).expect("arrival inside horizon");
            let left = (base + j as u64) as f64;
            sup = sup.max((left - a - b).abs()).max((left + 1.0 - a - b).abs());
        }
    }
    sup
}

/// Coupling errors of independent pairs, one per replica.
pub fn error_ensemble(horizon: f64, levels: Option<u32>, replicas: usize, seed: u64) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let levels = levels.unwrap_or_else(|| default_levels(horizon));
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let mut pair = KmtPair::sample(horizon, levels, &mut rng)?;
            Ok(kmt_error(&mut pair))
        })
        .collect()
}

/// Median coupling error against `log T`.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthFit {
    pub horizons: Vec<f64>,
    pub medians: Vec<f64>,
    pub fit: LinearFit,
}

pub fn error_growth(horizons: &[f64], replicas: usize, seed: u64) -> Result<GrowthFit> {
    let mut medians = Vec::with_capacity(horizons.len());
    for (i, &t) in horizons.iter().enumerate() {
        let errs = error_ensemble(t, None, replicas, crate::rng::derive_seed(seed, i as u64))?;
        medians.push(stats::median(&errs));
    }
    let logs: Vec<f64> = horizons.iter().map(|t| t.ln()).collect();
    Ok(GrowthFit {
        horizons: horizons.to_vec(),
        fit: stats::linear_fit(&logs, &medians),
        medians,
    })
}

/// Empirical exceedance curve `log P(error > median + x)` and its linear fit.
#[derive(Debug, Clone, Serialize)]
pub struct TailShape {
    pub median: f64,
    pub xs: Vec<f64>,
    pub log_freq: Vec<f64>,
    pub fit: LinearFit,
}

/// Fits the upper tail of an error sample. The range of `x` stops where fewer
/// than `min_count` samples exceed `median + x`.
pub fn tail_shape(errors: &[f64], points: usize, min_count: usize) -> TailShape {
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = stats::median(&v);
    let x_max = v[n - min_count.min(n)] - median;
    let exceed = |thr: f64| n - v.partition_point(|&e| e <= thr);
    let mut xs = Vec::new();
    let mut log_freq = Vec::new();
    for i in 0..points {
        let x = x_max * i as f64 / (points - 1) as f64;
        let k = exceed(median + x);
        if k == 0 {
            break;
        }
        xs.push(x);
        log_freq.push((k as f64 / n as f64).ln());
    }
    let fit = stats::linear_fit(&xs, &log_freq);
    TailShape {
        median,
        xs,
        log_freq,
        fit,
    }
}

/// Which tail bound a validation cell checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// `P(sup_{s≤S} |P(s) − s| ≥ A) ≤ 2 exp(−A²/4S)` for `A ≤ 2 log 2 · S`.
    Poisson,
    /// `P(sup_{s≤S} |∫ R dB| ≥ A) ≤ 2 exp(−A²/2Sρ²)` with `R ≡ ρ`.
    BrownianIntegral,
    /// `P(sup_{|t−s|≤S, s,t≤T} |B(t) − B(s)| ≥ A) ≤ 2⌈T/S⌉ exp(−A²/18S)`.
    BrownianOscillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pass,
    Fail,
    /// Bound is at least one; nothing to check.
    Vacuous,
    /// Hypothesis of the bound not met.
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailCell {
    pub kind: CellKind,
    pub s: f64,
    pub a: f64,
    pub t: Option<f64>,
    pub rho: Option<f64>,
    pub replicas: usize,
    pub exceedances: usize,
    pub frequency: f64,
    pub wilson_upper: f64,
    pub bound: f64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub cells: Vec<TailCell>,
    pub growth: Option<GrowthFit>,
}

impl TailReport {
    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| c.status != CellStatus::Fail)
    }
}

/// Cells to validate.
#[derive(Debug, Clone, Default, Serialize, serde::Deserialize)]
pub struct TailConfig {
    /// `(S, A)`
    pub poisson: Vec<(f64, f64)>,
    /// `(S, A, ρ)`
    pub integral: Vec<(f64, f64, f64)>,
    /// `(S, T, A)`
    pub oscillation: Vec<(f64, f64, f64)>,
}

impl TailConfig {
    /// Six Poisson cells, four stochastic-integral cells and two oscillation cells.
    pub fn standard() -> Self {
        TailConfig {
            poisson: vec![(10.0, 10.0), (25.0, 20.0), (50.0, 30.0), (100.0, 40.0), (200.0, 60.0), (400.0, 80.0)],
            integral: vec![(1.0, 2.0, 1.0), (4.0, 5.0, 1.0), (1.0, 6.0, 2.0), (4.0, 7.0, 1.0)],
            oscillation: vec![(1.0, 10.0, 6.0), (1.0, 10.0, 10.0)],
        }
    }
}

fn poisson_exceeds<R: Rng + ?Sized>(s: f64, a: f64, rng: &mut R) -> bool {
    let mut t = 0.0;
    let mut k = 0.0;
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e;
        if t > s {
            return (k - s).abs() >= a;
        }
        // left limit then right limit at the arrival
        if (k - t).abs() >= a || (k + 1.0 - t).abs() >= a {
            return true;
        }
        k += 1.0;
    }
}

/// Barrier crossing for `sup_{s≤S} |B(s)| ≥ a`, exact up to the Brownian-bridge
/// crossing probability within each of `steps` intervals.
fn brownian_sup_exceeds<R: Rng + ?Sized>(s: f64, a: f64, steps: usize, rng: &mut R) -> bool {
    let h = s / steps as f64;
    let sh = h.sqrt();
    let mut b = 0.0f64;
    for _ in 0..steps {
        let z: f64 = StandardNormal.sample(rng);
        let y = b + sh * z;
        if y.abs() >= a {
            return true;
        }
        let p = (-2.0 * (a - b) * (a - y) / h).exp() + (-2.0 * (a + b) * (a + y) / h).exp();
        if rng.random::<f64>() < p {
            return true;
        }
        b = y;
    }
    false
}

/// Oscillation of a Brownian path sampled on a grid of `per_window` points per
/// window length; a grid lower bound of the continuous supremum.
fn oscillation_exceeds<R: Rng + ?Sized>(s: f64, t: f64, a: f64, per_window: usize, rng: &mut R) -> bool {
    use std::collections::VecDeque;
    let h = s / per_window as f64;
    let n = (t / h).ceil() as usize;
    let sh = h.sqrt();
    let mut path = Vec::with_capacity(n + 1);
    path.push(0.0f64);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        path.push(path.last().unwrap() + sh * z);
    }
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    for (i, &v) in path.iter().enumerate() {
        while maxq.back().is_some_and(|&j| path[j] <= v) {
            maxq.pop_back();
        }
        maxq.push_back(i);
        while minq.back().is_some_and(|&j| path[j] >= v) {
            minq.pop_back();
        }
        minq.push_back(i);
        while maxq.front().is_some_and(|&j| i - j > per_window) {
            maxq.pop_front();
        }
        while minq.front().is_some_and(|&j| i - j > per_window) {
            minq.pop_front();
        }
        if path[maxq[0]] - path[minq[0]] >= a {
            return true;
        }
    }
    false
}

fn finish_cell(
    kind: CellKind,
    (s, a, t, rho): (f64, f64, Option<f64>, Option<f64>),
    replicas: usize,
    exceedances: usize,
    bound: f64,
) -> TailCell {
    let frequency = exceedances as f64 / replicas as f64;
    let wilson_upper = stats::wilson_upper(exceedances, replicas, stats::Z99);
    let status = if bound >= 1.0 {
        CellStatus::Vacuous
    } else if wilson_upper <= bound {
        CellStatus::Pass
    } else {
        CellStatus::Fail
    };
    TailCell {
        kind,
        s,
        a,
        t,
        rho,
        replicas,
        exceedances,
        frequency,
        wilson_upper,
        bound,
        status,
    }
}

/// Monte Carlo check of the Poisson and Brownian Chernoff-type tail bounds.
///
/// A cell passes when the Wilson 99% upper confidence limit of the empirical
/// exceedance frequency does not exceed the theoretical bound.
pub fn validate_tail_bounds(config: &TailConfig, replicas: usize, seed: u64) -> Result<TailReport> {
    use rayon::prelude::*;
    if replicas < 1000 {
        return Err(Error::InvalidParameter(format!(
            "tail validation needs at least 1000 replicas, got {replicas}"
        )));
    }
    let count = |cell_id: u64, f: &(dyn Fn(&mut SimRng) -> bool + Sync)| -> usize {
        (0..replicas)
            .into_par_iter()
            .filter(|&r| {
                let mut rng = replica_rng(crate::rng::derive_seed(seed, cell_id), r as u64);
                f(&mut rng)
            })
            .count()
    };
    let mut cells = Vec::new();
    let mut id = 0u64;
    for &(s, a) in &config.poisson {
        id += 1;
        let bound = 2.0 * (-a * a / (4.0 * s)).exp();
        if a > 2.0 * std::f64::consts::LN_2 * s {
            cells.push(TailCell {
                kind: CellKind::Poisson,
                s,
                a,
                t: None,
                rho: None,
                replicas: 0,
                exceedances: 0,
                frequency: 0.0,
                wilson_upper: 0.0,
                bound,
                status: CellStatus::Skipped,
            });
            continue;
        }
        let k = count(id, &|rng| poisson_exceeds(s, a, rng));
        cells.push(finish_cell(CellKind::Poisson, (s, a, None, None), replicas, k, bound));
    }
    for &(s, a, rho) in &config.integral {
        id += 1;
        let bound = 2.0 * (-a * a / (2.0 * s * rho * rho)).exp();
        let k = count(id, &|rng| brownian_sup_exceeds(s, a / rho, 512, rng));
        cells.push(finish_cell(
            CellKind::BrownianIntegral,
            (s, a, None, Some(rho)),
            replicas,
            k,
            bound,
        ));
    }
    for &(s, t, a) in &config.oscillation {
        id += 1;
        let bound = 2.0 * (t / s).ceil() * (-a * a / (18.0 * s)).exp();
        let k = count(id, &|rng| oscillation_exceeds(s, t, a, 64, rng));
        cells.push(finish_cell(
            CellKind::BrownianOscillation,
            (s, a, Some(t), None),
            replicas,
            k,
            bound,
        ));
    }
    Ok(TailReport { cells, growth: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn starts_at_origin() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut p = KmtPair::sample(64.0, 8, &mut rng).unwrap();
        assert_eq!(p.count_at(0.0).unwrap(), 0);
        assert_eq!(p.refine_brownian(0.0).unwrap(), 0.0);
        assert_eq!(p.grid_counts()[0], 0);
    }

    #[test]
    fn counts_are_monotone_and_cells_match() {
        let mut rng = SimRng::seed_from_u64(2);
        let mut p = KmtPair::sample(100.0, 9, &mut rng).unwrap();
        assert!(p.grid_counts().windows(2).all(|w| w[0] <= w[1]));
        for c in 0..p.n_cells() {
            let inc = p.grid_counts()[c + 1] - p.grid_counts()[c];
            let (lo, hi) = (p.grid_time(c), p.grid_time(c + 1));
            let arr = p.cell_arrivals(c).to_vec();
            assert_eq!(arr.len() as u64, inc);
            assert!(arr.iter().all(|&a| a >= lo && a < hi));
            assert!(arr.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn dyadic_points_need_no_randomness() {
        let mut rng = SimRng::seed_from_u64(3);
        let mut p = KmtPair::sample(16.0, 6, &mut rng).unwrap();
        let b = p.grid_brownian()[10];
        let t = p.grid_time(10);
        assert_eq!(p.refine_brownian(t).unwrap(), b);
        assert_eq!(p.n_refined(), 0);
    }

    #[test]
    fn refinement_is_memoized() {
        let mut rng = SimRng::seed_from_u64(4);
        let mut p = KmtPair::sample(16.0, 6, &mut rng).unwrap();
        let t = 0.5 * (p.grid_time(3) + p.grid_time(4));
        let a = p.refine_brownian(t).unwrap();
        let b = p.refine_brownian(t).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.n_refined(), 1);
        // a nested point uses the refined neighbour
        let c = p.refine_brownian(0.5 * (t + p.grid_time(4))).unwrap();
        assert!(c.is_finite());
        assert!(p.refine_brownian(17.0).is_err());
        assert!(p.refine_brownian(-0.1).is_err());
    }

    #[test]
    fn smoothed_transform_is_monotone() {
        // larger count never maps to a smaller score for the same uniform
        let n = 40;
        for &u in &[0.01, 0.3, 0.5, 0.9, 0.999] {
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=n {
                let (b, m, a) = binomial_half_tails(n, k);
                let z = smoothed_normal_score(b, m, a, u);
                assert!(z > prev);
                prev = z;
            }
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..60 {
            let (b, m, a) = poisson_tails(16.0, k);
            let z = smoothed_normal_score(b, m, a, 0.5);
            assert!(z > prev, "k={k}");
            prev = z;
        }
    }

    #[test]
    fn binomial_tables_agree_with_library() {
        for n in [2u64, 7, 33, 60] {
            let law = BinomialLaw::new(0.5, n).unwrap();
            for k in 0..=n {
                let (b, m, a) = binomial_half_tails(n, k);
                let lb = if k == 0 { 0.0 } else { law.cdf(k - 1) };
                assert!((b - lb).abs() < 1e-12);
                assert!((m - law.pmf(k)).abs() < 1e-12);
                assert!((a - law.sf(k)).abs() < 1e-12);
                assert!((b + m + a - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_arrival_pair_error_dominates_grid() {
        // Force a pair with no arrivals by sampling a tiny horizon until N = 0.
        let mut rng = SimRng::seed_from_u64(5);
        let mut pair = loop {
            let p = KmtPair::sample(1.0, 3, &mut rng).unwrap();
            if p.total_count() == 0 {
                break p;
            }
        };
        let grid_sup = (0..=pair.n_cells())
            .map(|k| (pair.grid_time(k) + pair.grid_brownian()[k]).abs())
            .fold(0.0, f64::max);
        assert!(kmt_error(&mut pair) >= grid_sup);
    }

    #[test]
    fn error_is_stable_under_reevaluation() {
        let mut rng = SimRng::seed_from_u64(6);
        let mut pair = KmtPair::sample(32.0, 7, &mut rng).unwrap();
        let e1 = kmt_error(&mut pair);
        let e2 = kmt_error(&mut pair);
        assert_eq!(e1, e2);
        // a finer superset of evaluation points can only raise the supremum
        for k in 0..pair.n_cells() {
            let t = 0.5 * (pair.grid_time(k) + pair.grid_time(k + 1));
            pair.refine_brownian(t).unwrap();
        }
        let mut sup = e1;
        for (t, b) in pair.known_brownian() {
            let p = pair.count_at(t).unwrap() as f64;
            sup = sup.max((p - t - b).abs());
        }
        assert!(sup >= e1);
        assert_eq!(kmt_error(&mut pair), e1);
    }

    #[test]
    fn next_arrival_walks_all_arrivals() {
        let mut rng = SimRng::seed_from_u64(7);
        let mut pair = KmtPair::sample(20.0, 6, &mut rng).unwrap();
        let all = pair.all_arrivals();
        let mut walked = Vec::new();
        let mut u = 0.0;
        while let Some(a) = pair.next_arrival_after(u) {
            walked.push(a);
            u = a;
        }
        assert_eq!(walked, all);
    }

    #[test]
    fn vacuous_oscillation_cell() {
        let cfg = TailConfig {
            oscillation: vec![(1.0, 10.0, 6.0)],
            ..Default::default()
        };
        let r = validate_tail_bounds(&cfg, 1000, 1).unwrap();
        assert_eq!(r.cells[0].status, CellStatus::Vacuous);
        assert!((r.cells[0].bound - 20.0 * (-2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn poisson_hypothesis_violation_is_skipped() {
        let cfg = TailConfig {
            poisson: vec![(1.0, 5.0)],
            ..Default::default()
        };
        let r = validate_tail_bounds(&cfg, 1000, 1).unwrap();
        assert_eq!(r.cells[0].status, CellStatus::Skipped);
        assert!(validate_tail_bounds(&cfg, 10, 1).is_err());
    }
}
