//! CSV renderings of raw per-replica data.
//!
//! Numbers use Rust's shortest round-trip formatting, so identical inputs give
//! byte-identical files.

use crate::analysis::Trajectory;
use crate::error::Result;
use crate::experiments::{ConditionedEnsemble, CostSample, ExitTimeSample, ThresholdTable};
use crate::simulate::{gap_crossing_time, CoupledPath};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn render(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| crate::Error::Io(e.to_string()))
}

fn names(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (1..=d).map(move |i| format!("{prefix}_{i}"))
}

/// Columns `t, x_1..x_d`.
pub fn flow_csv(traj: &Trajectory) -> Result<String> {
    let d = traj.states.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("t".to_string()).chain(names("x", d)).collect();
    render(
        &header,
        traj.times.iter().zip(&traj.states).map(|(t, x)| {
            std::iter::once(t.to_string())
                .chain(x.iter().map(f64::to_string))
                .collect()
        }),
    )
}

/// Columns `replica, T, error`.
pub fn kmt_errors_csv(horizon: f64, errors: &[f64]) -> Result<String> {
    let header = ["replica", "T", "error"].map(String::from);
    render(
        &header,
        errors
            .iter()
            .enumerate()
            .map(|(r, e)| vec![r.to_string(), horizon.to_string(), e.to_string()]),
    )
}

/// Columns `t, X_1..X_d, Z_1..Z_d, gap` on the grid.
pub fn path_csv(path: &CoupledPath) -> Result<String> {
    let d = path.z.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(names("X", d))
        .chain(names("Z", d))
        .chain(std::iter::once("gap".to_string()))
        .collect();
    render(
        &header,
        path.times.iter().enumerate().map(|(i, &t)| {
            let x = path.path.state_at(t);
            std::iter::once(t.to_string())
                .chain(x.iter().map(f64::to_string))
                .chain(path.z[i].iter().map(f64::to_string))
                .chain(std::iter::once(path.grid_gaps[i].to_string()))
                .collect()
        }),
    )
}

/// Columns `t, gap` over the full evaluation set (grid and both sides of jumps).
pub fn gap_csv(path: &CoupledPath) -> Result<String> {
    let header = ["t", "gap"].map(String::from);
    render(
        &header,
        path.gaps.iter().map(|(t, g)| vec![t.to_string(), g.to_string()]),
    )
}

/// One row per coupled replica.
pub fn coupled_summary_csv(paths: &[CoupledPath], eps: Option<f64>) -> Result<String> {
    let header = [
        "replica",
        "gap_sup",
        "crossing_time",
        "events",
        "absorbed_at",
        "exited_at",
        "left_compact_at",
        "channel_extensions",
        "auxiliary_increments",
    ]
    .map(String::from);
    render(
        &header,
        paths.iter().enumerate().map(|(r, p)| {
            vec![
                r.to_string(),
                p.gap_sup.to_string(),
                eps.map(|e| opt(gap_crossing_time(p, e))).unwrap_or_default(),
                p.path.n_events().to_string(),
                opt(p.flags.absorbed_at),
                opt(p.flags.exited_at),
                opt(p.flags.left_compact_at),
                p.flags.channel_extensions.to_string(),
                p.flags.auxiliary_increments.to_string(),
            ]
        }),
    )
}

/// Columns `replica, tau, censored`.
pub fn exit_times_csv(s: &ExitTimeSample) -> Result<String> {
    let header = ["replica", "tau", "censored"].map(String::from);
    render(
        &header,
        s.taus
            .iter()
            .zip(&s.censored)
            .enumerate()
            .map(|(r, (t, c))| vec![r.to_string(), t.to_string(), c.to_string()]),
    )
}

/// Columns `survivor, x_t, x_end, rescaled`.
pub fn conditioned_csv(e: &ConditionedEnsemble) -> Result<String> {
    let header = ["survivor", "x_t", "x_end", "rescaled"].map(String::from);
    render(
        &header,
        (0..e.survivors).map(|i| {
            vec![
                i.to_string(),
                e.marginals[i].to_string(),
                e.window_end[i].to_string(),
                e.rescaled[i].to_string(),
            ]
        }),
    )
}

/// Columns `replica, cost, extinct`.
pub fn cost_csv(c: &CostSample) -> Result<String> {
    let header = ["replica", "cost", "extinct"].map(String::from);
    render(
        &header,
        c.costs
            .iter()
            .zip(&c.extinct)
            .enumerate()
            .map(|(r, (v, e))| vec![r.to_string(), v.to_string(), e.to_string()]),
    )
}

/// Columns `K, eps, replica, crossing_time` (empty when the gap never crossed).
pub fn threshold_csv(t: &ThresholdTable) -> Result<String> {
    let header = ["K", "eps", "replica", "crossing_time"].map(String::from);
    render(
        &header,
        t.rows.iter().flat_map(|row| {
            row.times.iter().enumerate().map(move |(r, c)| {
                vec![row.k.to_string(), row.eps.to_string(), r.to_string(), opt(*c)]
            })
        }),
    )
}
