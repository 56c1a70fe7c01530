//! Exact chain simulation through time-changed Poisson channels, the coupled
//! Gaussian approximation, and the diffusion diagnostic.
//!
//! Channel `e` carries its own unit-rate Poisson process per unit time interval
//! `[j, j+1)`. Its internal clock advances at rate `K·β_e(X)`; the chain jumps by
//! `e` whenever the clock reaches the next arrival. With exponential channels
//! this is the next-reaction method. With KMT channels each Poisson process is
//! the Poisson half of a [`KmtPair`], whose Brownian half drives the Gaussian
//! fluctuation process.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{flow, time_grid, EquilibriumReport};
use crate::error::{Error, Result};
use crate::kmt::{default_levels, KmtPair};
use crate::model::Model;
use crate::rng::{child_rng, SimRng};

/// How channel Poisson processes are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Plain exponential inter-arrival times.
    Exponential,
    /// KMT pairs, one per channel and unit interval, with the given internal horizons.
    Kmt { horizons: Vec<f64> },
}

/// A channel's Poisson process made of KMT segments. The first segment covers
/// `[0, H]`; overruns chain independent extensions after it.
#[derive(Debug, Clone)]
pub struct KmtChannel {
    segments: Vec<KmtPair>,
    offsets: Vec<f64>,
}

impl KmtChannel {
    fn new(horizon: f64, rng: &mut SimRng) -> Result<Self> {
        Ok(KmtChannel {
            segments: vec![KmtPair::sample(horizon, default_levels(horizon), rng)?],
            offsets: vec![0.0],
        })
    }

    fn covered(&self) -> f64 {
        self.offsets.last().unwrap() + self.segments.last().unwrap().horizon()
    }

    fn extend(&mut self, rng: &mut SimRng) -> Result<()> {
        let h = self.segments[0].horizon();
        let start = self.covered();
        self.segments.push(KmtPair::sample(h, default_levels(h), rng)?);
        self.offsets.push(start);
        Ok(())
    }

    fn next_arrival_after(&mut self, u: f64, rng: &mut SimRng) -> Result<f64> {
        loop {
            let i = self.offsets.partition_point(|&o| o <= u).max(1) - 1;
            for k in i..self.segments.len() {
                let local = (u - self.offsets[k]).max(-1.0);
                if let Some(a) = self.segments[k].next_arrival_after(local) {
                    return Ok(self.offsets[k] + a);
                }
            }
            self.extend(rng)?;
        }
    }

    /// Brownian value at internal time `u`.
    pub fn brownian(&mut self, u: f64) -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..self.segments.len() {
            let h = self.segments[k].horizon();
            let local = u - self.offsets[k];
            if local <= h || k + 1 == self.segments.len() {
                return Ok(acc + self.segments[k].refine_brownian(local.clamp(0.0, h))?);
            }
            acc += self.segments[k].refine_brownian(h)?;
        }
        unreachable!("channel has at least one segment")
    }

    /// Number of extension segments beyond the first.
    pub fn extensions(&self) -> usize {
        self.segments.len() - 1
    }

    pub fn first(&self) -> &KmtPair {
        &self.segments[0]
    }
}

#[derive(Debug, Clone)]
enum Source {
    Exponential,
    Kmt(KmtChannel),
}

/// State of one channel within one unit interval.
#[derive(Debug, Clone)]
pub struct Channel {
    source: Source,
    clock: f64,
    next: f64,
    rng: SimRng,
}

impl Channel {
    fn new(kind: &ChannelKind, e: usize, rng: &mut SimRng) -> Result<Self> {
        let mut own = child_rng(rng);
        let mut source = match kind {
            ChannelKind::Exponential => Source::Exponential,
            ChannelKind::Kmt { horizons } => Source::Kmt(KmtChannel::new(horizons[e], &mut own)?),
        };
        let next = Self::arrival_after(&mut source, 0.0, &mut own)?;
        Ok(Channel {
            source,
            clock: 0.0,
            next,
            rng: own,
        })
    }

    fn arrival_after(source: &mut Source, u: f64, rng: &mut SimRng) -> Result<f64> {
        match source {
            Source::Exponential => {
                let e: f64 = Exp1.sample(rng);
                Ok(u + e)
            }
            Source::Kmt(c) => c.next_arrival_after(u, rng),
        }
    }

    fn advance_to_arrival(&mut self) -> Result<()> {
        self.clock = self.next;
        self.next = Self::arrival_after(&mut self.source, self.clock, &mut self.rng)?;
        Ok(())
    }

    /// Internal clock: compensator accumulated since the start of the interval.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn kmt(&mut self) -> Option<&mut KmtChannel> {
        match &mut self.source {
            Source::Kmt(c) => Some(c),
            Source::Exponential => None,
        }
    }

    pub fn extensions(&self) -> usize {
        match &self.source {
            Source::Kmt(c) => c.extensions(),
            Source::Exponential => 0,
        }
    }
}

/// One step of the engine.
#[derive(Debug)]
pub enum Step {
    /// Channel `e` fired at time `t`.
    Jump { t: f64, e: usize },
    /// Unit interval `j` closed at `t`; its channels are handed back.
    IntervalEnd { j: usize, t: f64, channels: Vec<Channel> },
    Done,
}

/// Event-driven simulator of the chain on the lattice `K⁻¹ℤ^d`.
pub struct Ctmc<'m> {
    model: &'m Model,
    k: f64,
    n: Vec<i64>,
    x: Vec<f64>,
    t: f64,
    horizon: f64,
    kind: ChannelKind,
    channels: Vec<Channel>,
    rates: Vec<f64>,
    rng: SimRng,
    interval: usize,
    finished: bool,
    closing: bool,
    pub absorbed_at: Option<f64>,
    pub exited_at: Option<f64>,
    pub extensions: usize,
}

/// `floor(K·x)` per coordinate, tolerant to representation error just below an integer.
pub fn lattice_point(k: f64, x: &[f64]) -> Vec<i64> {
    x.iter().map(|&v| (k * v + 1e-9).floor() as i64).collect()
}

impl<'m> Ctmc<'m> {
    pub fn new<R: Rng + ?Sized>(
        model: &'m Model,
        k: f64,
        x0: &[f64],
        horizon: f64,
        kind: ChannelKind,
        rng: &mut R,
    ) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::InvalidParameter(format!("scale K must be positive, got {k}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if x0.len() != model.dim() || !model.domain().contains(x0) {
            return Err(Error::OutsideDomain(x0.to_vec()));
        }
        if let ChannelKind::Kmt { horizons } = &kind {
            if horizons.len() != model.n_jumps() {
                return Err(Error::InvalidParameter(format!(
                    "{} channel horizons for {} jumps",
                    horizons.len(),
                    model.n_jumps()
                )));
            }
        }
        let mut own = child_rng(rng);
        let n = lattice_point(k, x0);
        let x: Vec<f64> = n.iter().map(|&v| v as f64 / k).collect();
        let channels = (0..model.n_jumps())
            .map(|e| Channel::new(&kind, e, &mut own))
            .collect::<Result<Vec<_>>>()?;
        let mut sim = Ctmc {
            model,
            k,
            n,
            x,
            t: 0.0,
            horizon,
            kind,
            channels,
            rates: vec![0.0; model.n_jumps()],
            rng: own,
            interval: 0,
            finished: false,
            closing: false,
            absorbed_at: None,
            exited_at: None,
            extensions: 0,
        };
        sim.refresh_rates();
        Ok(sim)
    }

    fn refresh_rates(&mut self) {
        self.model.rates_into(&self.x, &mut self.rates);
        for r in &mut self.rates {
            *r *= self.k;
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn counts(&self) -> &[i64] {
        &self.n
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Current jump intensities `K·β_e(X)`.
    pub fn intensities(&self) -> &[f64] {
        &self.rates
    }

    /// Current internal clocks of the open interval.
    pub fn clocks(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.clock).collect()
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    fn close_interval(&mut self) -> Result<Step> {
        let boundary = self.t;
        let j = self.interval;
        let fresh = if !self.closing && boundary < self.horizon {
            (0..self.model.n_jumps())
                .map(|e| Channel::new(&self.kind, e, &mut self.rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.finished = true;
            Vec::new()
        };
        let old = std::mem::replace(&mut self.channels, fresh);
        self.extensions += old.iter().map(Channel::extensions).sum::<usize>();
        self.interval += 1;
        Ok(Step::IntervalEnd {
            j,
            t: boundary,
            channels: old,
        })
    }

    fn advance_clocks(&mut self, dt: f64) {
        for (c, r) in self.channels.iter_mut().zip(&self.rates) {
            c.clock += r * dt;
        }
    }

    pub fn next_step(&mut self) -> Result<Step> {
        if self.finished {
            return Ok(Step::Done);
        }
        let boundary = ((self.interval + 1) as f64).min(self.horizon);
        if self.closing {
            return self.close_interval();
        }
        let mut best: Option<(f64, usize)> = None;
        for (e, (c, &r)) in self.channels.iter().zip(&self.rates).enumerate() {
            if r > 0.0 {
                let wait = ((c.next - c.clock) / r).max(0.0);
                if best.is_none_or(|(w, _)| wait < w) {
                    best = Some((wait, e));
                }
            }
        }
        match best {
            None => {
                // absorbing state: nothing can ever fire again
                if self.absorbed_at.is_none() {
                    self.absorbed_at = Some(self.t);
                }
                self.t = boundary;
                self.closing = true;
                self.close_interval()
            }
            Some((wait, e)) if self.t + wait < boundary => {
                self.advance_clocks(wait);
                self.t += wait;
                self.channels[e].advance_to_arrival()?;
                for (ni, &de) in self.n.iter_mut().zip(&self.model.jumps()[e]) {
                    *ni += de;
                }
                for (xi, &ni) in self.x.iter_mut().zip(&self.n) {
                    *xi = ni as f64 / self.k;
                }
                if !self.model.domain().contains(&self.x) {
                    self.exited_at = Some(self.t);
                    self.closing = true;
                }
                self.refresh_rates();
                Ok(Step::Jump { t: self.t, e })
            }
            Some(_) => {
                self.advance_clocks(boundary - self.t);
                self.t = boundary;
                self.close_interval()
            }
        }
    }
}

/// Exact chain trajectory: a piecewise-constant, right-continuous lattice path.
#[derive(Debug, Clone, Serialize)]
pub struct JumpPath {
    pub k: f64,
    pub dim: usize,
    /// `floor(K·x0)`.
    pub n0: Vec<i64>,
    pub times: Vec<f64>,
    pub jumps: Vec<usize>,
    /// Lattice counts after each event, flattened.
    states: Vec<i64>,
    pub horizon: f64,
    pub absorbed_at: Option<f64>,
    pub exited_at: Option<f64>,
    pub channel_extensions: usize,
    /// Internal clock of every channel at the end of each unit interval.
    pub interval_clocks: Vec<Vec<f64>>,
}

impl JumpPath {
    fn new(k: f64, n0: Vec<i64>, horizon: f64) -> Self {
        JumpPath {
            k,
            dim: n0.len(),
            n0,
            times: Vec::new(),
            jumps: Vec::new(),
            states: Vec::new(),
            horizon,
            absorbed_at: None,
            exited_at: None,
            channel_extensions: 0,
            interval_clocks: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, e: usize, n: &[i64]) {
        self.times.push(t);
        self.jumps.push(e);
        self.states.extend_from_slice(n);
    }

    pub fn n_events(&self) -> usize {
        self.times.len()
    }

    /// Lattice counts after event `i`; `None` gives the initial counts.
    pub fn counts(&self, i: Option<usize>) -> &[i64] {
        match i {
            None => &self.n0,
            Some(i) => &self.states[i * self.dim..(i + 1) * self.dim],
        }
    }

    fn density(&self, n: &[i64]) -> Vec<f64> {
        n.iter().map(|&v| v as f64 / self.k).collect()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.density(&self.n0)
    }

    /// Density after event `i`.
    pub fn state_after(&self, i: usize) -> Vec<f64> {
        self.density(self.counts(Some(i)))
    }

    /// Index of the last event at or before `t`.
    pub fn last_event_at(&self, t: f64) -> Option<usize> {
        self.times.partition_point(|&s| s <= t).checked_sub(1)
    }

    /// `X(t)`, right-continuous.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        self.density(self.counts(self.last_event_at(t)))
    }

    /// Exact `∫_a^b f(X(s)) ds`.
    pub fn integral<F: Fn(&[f64]) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        let mut start = a;
        let mut idx = self.times.partition_point(|&s| s <= a);
        let mut cur = self.density(self.counts(idx.checked_sub(1)));
        while start < b {
            let end = if idx < self.times.len() { self.times[idx].min(b) } else { b };
            total += f(&cur) * (end - start);
            start = end;
            if idx < self.times.len() {
                cur = self.density(self.counts(Some(idx)));
                idx += 1;
            }
        }
        total
    }
}

/// Runs the exact chain from `floor(K·x0)/K` over `[0, horizon]`.
pub fn simulate_ctmc<R: Rng + ?Sized>(
    model: &Model,
    k: f64,
    x0: &[f64],
    horizon: f64,
    kind: &ChannelKind,
    rng: &mut R,
) -> Result<JumpPath> {
    let mut sim = Ctmc::new(model, k, x0, horizon, kind.clone(), rng)?;
    let mut path = JumpPath::new(k, sim.counts().to_vec(), horizon);
    loop {
        match sim.next_step()? {
            Step::Jump { t, e } => path.push(t, e, sim.counts()),
            Step::IntervalEnd { channels, .. } => {
                path.interval_clocks.push(channels.iter().map(|c| c.clock).collect());
            }
            Step::Done => break,
        }
    }
    path.absorbed_at = sim.absorbed_at;
    path.exited_at = sim.exited_at;
    path.channel_extensions = sim.extensions;
    Ok(path)
}

/// Brownian increments driving the fluctuation process, one row per grid step.
#[derive(Debug, Clone, Serialize)]
pub struct Drivers {
    pub times: Vec<f64>,
    /// `increments[i][e]` is `ΔW_e` over `[times[i], times[i+1]]`.
    pub increments: Vec<Vec<f64>>,
}

impl Drivers {
    /// Independent Gaussian drivers on `time_grid(horizon, dt)`.
    pub fn gaussian<R: Rng + ?Sized>(n_jumps: usize, horizon: f64, dt: f64, rng: &mut R) -> Self {
        let times = time_grid(horizon, dt);
        let increments = times
            .windows(2)
            .map(|w| {
                let s = (w[1] - w[0]).sqrt();
                (0..n_jumps)
                    .map(|_| s * { let z: f64 = StandardNormal.sample(rng); z })
                    .collect::<Vec<f64>>()
            })
            .collect();
        Drivers { times, increments }
    }
}

/// Tuning of the coupled pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingOptions {
    /// Half-width added around the region swept by `x0`, `x*` and the flow.
    /// Defaults to half the distance from `x*` to the domain boundary.
    pub radius: Option<f64>,
    /// Relative threshold below which a channel is treated as idle for driver extraction.
    pub beta_min_rel: f64,
    /// Keep the jump-time gap evaluations (they can be numerous at large `K`).
    pub keep_jump_gaps: bool,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        CouplingOptions {
            radius: None,
            beta_min_rel: 1e-8,
            keep_jump_gaps: true,
        }
    }
}

/// Working region, the per-channel rate bounds on it, and the resulting KMT horizons.
#[derive(Debug, Clone, Serialize)]
pub struct WorkingCompact {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub rate_bounds: Vec<f64>,
    pub horizons: Vec<f64>,
}

impl WorkingCompact {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12)
    }

    pub fn rate_scale(&self) -> f64 {
        let m = self.rate_bounds.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

/// KMT horizon for a channel whose rate is bounded by `m1` on the working region.
pub fn channel_horizon(k: f64, m1: f64) -> f64 {
    (1.5 * k * m1).ceil() + 8.0
}

/// Box hull of `points` widened by `radius`, clipped to the domain, with rate
/// bounds from a grid search.
pub fn working_compact(model: &Model, k: f64, points: &[&[f64]], radius: f64) -> WorkingCompact {
    let d = model.dim();
    let dom = model.domain();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for i in 0..d {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    for i in 0..d {
        lo[i] = (lo[i] - radius).max(dom.lo[i]);
        hi[i] = (hi[i] + radius).min(dom.hi[i]);
    }
    let per_dim: usize = match d {
        1 => 401,
        2 => 61,
        3 => 21,
        _ => 9,
    };
    let mut rate_bounds = vec![0.0f64; model.n_jumps()];
    let total = per_dim.pow(d as u32);
    let mut x = vec![0.0; d];
    let mut buf = vec![0.0; model.n_jumps()];
    for idx in 0..total {
        let mut r = idx;
        for i in 0..d {
            let step = r % per_dim;
            r /= per_dim;
            x[i] = lo[i] + (hi[i] - lo[i]) * step as f64 / (per_dim - 1) as f64;
        }
        model.rates_into(&x, &mut buf);
        for (b, v) in rate_bounds.iter_mut().zip(&buf) {
            *b = b.max(*v);
        }
    }
    let horizons = rate_bounds.iter().map(|&m| channel_horizon(k, m)).collect();
    WorkingCompact {
        lo,
        hi,
        rate_bounds,
        horizons,
    }
}

/// Events flagged during a coupled run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CouplingFlags {
    pub absorbed_at: Option<f64>,
    pub exited_at: Option<f64>,
    /// First time the chain was seen outside the working region.
    pub left_compact_at: Option<f64>,
    /// Channel horizon overruns resolved by an independent extension.
    pub channel_extensions: usize,
    /// Driver pieces drawn from the auxiliary stream because the channel was idle.
    pub auxiliary_increments: usize,
}

/// Exact chain, its Gaussian approximation `Z = φ + U/√K`, and their gap.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledPath {
    pub path: JumpPath,
    pub times: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `(t, ‖X(t) − Z(t)‖)` on the grid and at both sides of every jump, in time order.
    pub gaps: Vec<(f64, f64)>,
    /// Gap at each grid time.
    pub grid_gaps: Vec<f64>,
    pub gap_sup: f64,
    pub drivers: Drivers,
    pub compact: WorkingCompact,
    pub flags: CouplingFlags,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn simulate_coupled<R: Rng + ?Sized>(
    model: &Model,
    eq: &EquilibriumReport,
    k: f64,
    x0: &[f64],
    horizon: f64,
    dt_grid: f64,
    rng: &mut R,
) -> Result<CoupledPath> {
    simulate_coupled_with(model, eq, k, x0, horizon, dt_grid, &CouplingOptions::default(), rng)
}

/// Driver increments for one unit interval from its finished channels.
///
/// `marks` are `(time, clocks)` pairs at the interval start, the grid points
/// strictly inside, and the interval end.
#[allow(clippy::too_many_arguments)]
fn extract_interval(
    marks: &[(f64, Vec<f64>)],
    channels: &mut Option<Vec<Channel>>,
    times: &[f64],
    k: f64,
    beta_min: f64,
    aux: &mut SimRng,
    increments: &mut [Vec<f64>],
    flags: &mut CouplingFlags,
) -> Result<()> {
    for w in marks.windows(2) {
        let (a, ca) = (&w[0].0, &w[0].1);
        let (b, cb) = (&w[1].0, &w[1].1);
        let len = b - a;
        if len <= 0.0 {
            continue;
        }
        let step = (times.partition_point(|&s| s <= *a).max(1) - 1).min(increments.len() - 1);
        for e in 0..ca.len() {
            let du = cb[e] - ca[e];
            let dw = match channels.as_mut().and_then(|ch| ch[e].kmt()) {
                Some(c) if du / (k * len) > beta_min => {
                    let db = c.brownian(cb[e])? - c.brownian(ca[e])?;
                    db / (du / len).sqrt()
                }
                _ => {
                    flags.auxiliary_increments += 1;
                    { let z: f64 = StandardNormal.sample(aux); len.sqrt() * z }
                }
            };
            increments[step][e] += dw;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_with<R: Rng + ?Sized>(
    model: &Model,
    eq: &EquilibriumReport,
    k: f64,
    x0: &[f64],
    horizon: f64,
    dt_grid: f64,
    opts: &CouplingOptions,
    rng: &mut R,
) -> Result<CoupledPath> {
    if !(dt_grid > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt_grid}")));
    }
    let d = model.dim();
    let traj = flow(model, x0, horizon, dt_grid)?;
    if let Some(t) = traj.domain_exit {
        return Err(Error::DomainExit(t));
    }
    let times = traj.times.clone();
    let radius = opts.radius.unwrap_or_else(|| {
        let r = 0.5 * model.domain().distance_to_boundary(&eq.x_star);
        if r.is_finite() {
            r
        } else {
            1.0
        }
    });
    let mut pts: Vec<&[f64]> = vec![x0, &eq.x_star];
    pts.extend(traj.states.iter().map(|s| s.as_slice()));
    let compact = working_compact(model, k, &pts, radius);
    let beta_min = opts.beta_min_rel * compact.rate_scale();

    let mut aux = child_rng(rng);
    let mut sim = Ctmc::new(
        model,
        k,
        x0,
        horizon,
        ChannelKind::Kmt {
            horizons: compact.horizons.clone(),
        },
        rng,
    )?;
    let mut path = JumpPath::new(k, sim.counts().to_vec(), horizon);
    let mut flags = CouplingFlags::default();
    if !compact.contains(sim.state()) {
        flags.left_compact_at = Some(0.0);
    }
    let n_steps = times.len() - 1;
    let n_jumps = model.n_jumps();
    let mut increments = vec![vec![0.0; n_jumps]; n_steps];

    // clocks at the last engine step, and the grid cursor
    let mut last_t = 0.0;
    let mut last_clocks = vec![0.0; n_jumps];
    let mut last_rates = sim.intensities().to_vec();
    let mut marks: Vec<(f64, Vec<f64>)> = vec![(0.0, vec![0.0; n_jumps])];
    let mut next_grid = 1;
    let mut covered_until = 0.0;
    loop {
        let step = sim.next_step()?;
        let step_t = match &step {
            Step::Jump { t, .. } | Step::IntervalEnd { t, .. } => *t,
            Step::Done => break,
        };
        while next_grid < n_steps && times[next_grid] < step_t {
            let g = times[next_grid];
            let c = last_clocks
                .iter()
                .zip(&last_rates)
                .map(|(c, r)| c + r * (g - last_t))
                .collect();
            marks.push((g, c));
            next_grid += 1;
        }
        match step {
            Step::Jump { t, e } => {
                path.push(t, e, sim.counts());
                if flags.left_compact_at.is_none() && !compact.contains(sim.state()) {
                    flags.left_compact_at = Some(t);
                }
            }
            Step::IntervalEnd { t, channels, .. } => {
                let end_clocks: Vec<f64> = channels.iter().map(|c| c.clock).collect();
                path.interval_clocks.push(end_clocks.clone());
                marks.push((t, end_clocks));
                let mut ch = Some(channels);
                extract_interval(&marks, &mut ch, &times, k, beta_min, &mut aux, &mut increments, &mut flags)?;
                covered_until = t;
                marks.clear();
                marks.push((t, vec![0.0; n_jumps]));
            }
            Step::Done => unreachable!(),
        }
        last_t = sim.time();
        last_clocks = sim.clocks();
        last_rates = sim.intensities().to_vec();
    }
    // stretch after absorption or exit: no channel activity, independent noise
    if covered_until < horizon {
        let mut tail: Vec<(f64, Vec<f64>)> = vec![(covered_until, vec![0.0; n_jumps])];
        tail.extend(
            times
                .iter()
                .filter(|&&g| g > covered_until && g < horizon)
                .map(|&g| (g, vec![0.0; n_jumps])),
        );
        tail.push((horizon, vec![0.0; n_jumps]));
        extract_interval(&tail, &mut None, &times, k, beta_min, &mut aux, &mut increments, &mut flags)?;
    }
    path.absorbed_at = sim.absorbed_at;
    path.exited_at = sim.exited_at;
    path.channel_extensions = sim.extensions;
    flags.absorbed_at = sim.absorbed_at;
    flags.exited_at = sim.exited_at;
    flags.channel_extensions = sim.extensions;

    // Euler–Maruyama for U along φ
    let sqrt_k = k.sqrt();
    let jumps = model.jumps();
    let mut u = vec![vec![0.0; d]; times.len()];
    let mut rates = vec![0.0; n_jumps];
    for i in 0..n_steps {
        let h = times[i + 1] - times[i];
        let phi = &traj.states[i];
        let jac = model.jacobian(phi)?;
        let cur = DVector::from_column_slice(&u[i]);
        let mut next = &cur + &jac * &cur * h;
        model.rates_into(phi, &mut rates);
        for e in 0..n_jumps {
            let amp = rates[e].sqrt() * increments[i][e];
            if amp != 0.0 {
                for r in 0..d {
                    next[r] += amp * jumps[e][r] as f64;
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(times[i + 1]));
        }
        u[i + 1] = next.iter().copied().collect();
    }
    let z: Vec<Vec<f64>> = traj
        .states
        .iter()
        .zip(&u)
        .map(|(p, ui)| p.iter().zip(ui).map(|(a, b)| a + b / sqrt_k).collect())
        .collect();

    // gap on the grid and on both sides of every jump
    let mut gaps = Vec::with_capacity(times.len() + if opts.keep_jump_gaps { 2 * path.n_events() } else { 0 });
    let mut grid_gaps = Vec::with_capacity(times.len());
    let mut gap_sup: f64 = 0.0;
    let mut ev = 0;
    let diff = |x: &[f64], zz: &[f64]| norm(&x.iter().zip(zz).map(|(a, b)| a - b).collect::<Vec<_>>());
    for i in 0..times.len() {
        let g = diff(&path.state_at(times[i]), &z[i]);
        gaps.push((times[i], g));
        grid_gaps.push(g);
        gap_sup = gap_sup.max(g);
        if i + 1 == times.len() {
            break;
        }
        let (t0, t1) = (times[i], times[i + 1]);
        while ev < path.n_events() && path.times[ev] <= t0 {
            ev += 1;
        }
        while ev < path.n_events() && path.times[ev] <= t1 {
            let tau = path.times[ev];
            let w = (tau - t0) / (t1 - t0);
            let zt: Vec<f64> = z[i].iter().zip(&z[i + 1]).map(|(a, b)| a + w * (b - a)).collect();
            let before = path.density(path.counts(ev.checked_sub(1)));
            let after = path.state_after(ev);
            let (gl, gr) = (diff(&before, &zt), diff(&after, &zt));
            gap_sup = gap_sup.max(gl).max(gr);
            if opts.keep_jump_gaps {
                gaps.push((tau, gl));
                gaps.push((tau, gr));
            }
            ev += 1;
        }
    }

    Ok(CoupledPath {
        path,
        phi: traj.states,
        u,
        z,
        gaps,
        grid_gaps,
        gap_sup,
        drivers: Drivers {
            times: times.clone(),
            increments,
        },
        times,
        compact,
        flags,
    })
}

/// First evaluation time at which the gap strictly exceeds `eps`.
pub fn gap_crossing_time(path: &CoupledPath, eps: f64) -> Option<f64> {
    path.gaps.iter().find(|(_, g)| *g > eps).map(|(t, _)| *t)
}

/// Diffusion approximation `Y` on the drivers' grid.
#[derive(Debug, Clone, Serialize)]
pub struct DiffusionPath {
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
}

/// Euler–Maruyama for `dY = F(Y)dt + K^{-1/2} Σ_e √β_e(Y) dW_e e` from `floor(K·x0)/K`.
pub fn simulate_diffusion(
    model: &Model,
    k: f64,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    drivers: &Drivers,
) -> Result<DiffusionPath> {
    let grid = time_grid(horizon, dt);
    if grid.len() != drivers.times.len()
        || grid.iter().zip(&drivers.times).any(|(a, b)| (a - b).abs() > 1e-12)
        || drivers.increments.iter().any(|r| r.len() != model.n_jumps())
    {
        return Err(Error::InvalidParameter(
            "drivers do not match the requested grid or jump set".into(),
        ));
    }
    if !model.domain().contains(x0) {
        return Err(Error::OutsideDomain(x0.to_vec()));
    }
    let d = model.dim();
    let jumps = model.jumps();
    let mut y = Vec::with_capacity(grid.len());
    let mut cur: Vec<f64> = lattice_point(k, x0).iter().map(|&v| v as f64 / k).collect();
    y.push(cur.clone());
    let mut f = vec![0.0; d];
    let mut rates = vec![0.0; model.n_jumps()];
    for (i, w) in grid.windows(2).enumerate() {
        let h = w[1] - w[0];
        model.drift_into(&cur, &mut f);
        model.rates_into(&cur, &mut rates);
        let mut next: Vec<f64> = cur.iter().zip(&f).map(|(a, b)| a + b * h).collect();
        for e in 0..model.n_jumps() {
            let amp = (rates[e] / k).sqrt() * drivers.increments[i][e];
            for r in 0..d {
                next[r] += amp * jumps[e][r] as f64;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(w[1]));
        }
        if !model.domain().contains(&next) {
            return Err(Error::DomainExit(w[1]));
        }
        cur = next;
        y.push(cur.clone());
    }
    Ok(DiffusionPath { times: grid, y })
}
