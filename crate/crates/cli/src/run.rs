//! Subcommand dispatch and artifact emission.

use std::path::{Path, PathBuf};

use ddgauss::analysis::{find_equilibrium, flow, EquilibriumReport};
use ddgauss::experiments::{
    conditioned_ensemble, exit_bracket, moderate_deviation_times, qsd_small_k, sirs_cost_samples,
    threshold_time_ensemble, wasserstein_bootstrap_se, wasserstein_truncated_1d,
};
use ddgauss::kmt::{default_levels, error_ensemble, tail_shape, validate_tail_bounds, TailConfig};
use ddgauss::model::make_catalog_model;
use ddgauss::rng::replica_rng;
use ddgauss::simulate::{gap_crossing_time, simulate_coupled, CoupledPath};
use ddgauss::{report, stats, Model};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Command, Emit, Experiment, Format, ModelSource, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug)]
pub enum RunError {
    Validation(String),
    Runtime(String),
}

impl From<ddgauss::Error> for RunError {
    fn from(e: ddgauss::Error) -> Self {
        match e {
            ddgauss::Error::InvalidParameter(_)
            | ddgauss::Error::InvalidModel(_)
            | ddgauss::Error::UnknownModel(_)
            | ddgauss::Error::OutsideDomain(_) => RunError::Validation(e.to_string()),
            _ => RunError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Runtime(format!("io: {e}"))
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => EXIT_VALIDATION,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, msg) = match self {
            RunError::Validation(m) => ("validation", m),
            RunError::Runtime(m) => ("runtime", m),
        };
        json!({ "error": { "kind": kind, "messages": [msg] } })
    }
}

/// What a run produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// `Some` when `--check` was requested.
    pub check: Option<CheckResult>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match &self.check {
            Some(c) if !c.passed => EXIT_CHECK,
            _ => EXIT_OK,
        }
    }
}

struct Writer<'a> {
    cfg: &'a RunConfig,
    out: Outcome,
}

impl Writer<'_> {
    /// Writes `name` under the output directory through a temp file and rename,
    /// then its `.meta.json` companion.
    fn write(&mut self, name: &str, body: &str, flags: &Value) -> Result<(), RunError> {
        let path = self.cfg.out.join(name);
        atomic_write(&path, body.as_bytes())?;
        let meta = json!({
            "artifact": name,
            "command": self.cfg.command.name(),
            "config": self.cfg,
            "args": self.cfg.to_args(),
            "seed": self.cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "flags": flags,
            "overridden": self.cfg.overridden,
        });
        let meta_path = self.cfg.out.join(format!("{name}.meta.json"));
        atomic_write(&meta_path, pretty(&meta).as_bytes())?;
        self.out.artifacts.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value, flags: &Value) -> Result<(), RunError> {
        self.write(name, &pretty(v), flags)
    }

    /// Raw per-replica data: CSV, or the JSON value when `--format json`.
    fn raw(&mut self, stem: &str, csv: String, as_json: Value, flags: &Value) -> Result<(), RunError> {
        match self.cfg.format {
            Format::Csv => self.write(&format!("{stem}.csv"), &csv, flags),
            Format::Json => self.json(&format!("{stem}.json"), &as_json, flags),
        }
    }

    fn check(&mut self, passed: bool, detail: String) {
        if self.cfg.check {
            self.out.check = Some(CheckResult { passed, detail });
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

/// Temp file in the target directory, then rename; readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model, RunError> {
    match &cfg.model {
        Some(ModelSource::Catalog { name, params }) => Ok(make_catalog_model(name, params)?),
        Some(ModelSource::File(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RunError::Validation(format!("cannot read model file {}: {e}", path.display())))?;
            Ok(Model::from_json(&text)?)
        }
        None => Err(RunError::Validation("no model given".into())),
    }
}

fn catalog_param(cfg: &RunConfig, key: &str) -> Result<f64, RunError> {
    match &cfg.model {
        Some(ModelSource::Catalog { params, .. }) => params
            .get(key)
            .copied()
            .ok_or_else(|| RunError::Validation(format!("missing model parameter --{key}"))),
        _ => Err(RunError::Validation("this experiment needs a catalog model".into())),
    }
}

/// Equilibrium search from `--x0` or the middle of the domain.
fn equilibrium(model: &Model, cfg: &RunConfig) -> Result<EquilibriumReport, RunError> {
    let guess = match &cfg.x0 {
        Some(x) if cfg.command == Command::Analyze => x.clone(),
        _ => {
            let dom = model.domain();
            let mut g: Vec<f64> = dom
                .lo
                .iter()
                .zip(&dom.hi)
                .map(|(&lo, &hi)| if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 0.5 })
                .collect();
            if dom.simplex {
                let d = g.len() as f64;
                g.iter_mut().for_each(|v| *v = v.min(0.5 / d));
            }
            g
        }
    };
    Ok(find_equilibrium(model, &guess, 1e-12, 100)?)
}

fn k_values(cfg: &RunConfig) -> Vec<f64> {
    cfg.k_list.clone().or(cfg.scale.map(|k| vec![k])).unwrap_or_default()
}

/// Runs a validated configuration and writes its artifacts.
pub fn run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    if let Some(n) = cfg.threads {
        // Advisory: the global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = Writer { cfg, out: Outcome::default() };
    match cfg.command {
        Command::Analyze => analyze(&mut w)?,
        Command::Couple => couple(&mut w)?,
        Command::Simulate => simulate(&mut w)?,
        Command::Experiment(Experiment::Moddev) => moddev(&mut w)?,
        Command::Experiment(Experiment::Qsd) => qsd(&mut w)?,
        Command::Experiment(Experiment::SirsCost) => sirs_cost(&mut w)?,
        Command::Experiment(Experiment::Threshold) => threshold(&mut w)?,
    }
    Ok(w.out)
}

fn analyze(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let model = load_model(cfg)?;
    let eq = equilibrium(&model, cfg)?;
    let mut report = eq.to_json();
    report["lyapunov_residual"] = json!(lyapunov_residual(&eq));
    w.json("analyze.json", &report, &json!({ "stable": eq.stable }))?;
    if w.cfg.emit.contains(&Emit::Flow) {
        let x0 = cfg.x0.clone().unwrap_or_else(|| eq.x_star.clone());
        let horizon = cfg.horizon.unwrap_or(10.0);
        let dt = cfg.dt.unwrap_or_else(|| eq.default_dt());
        let traj = flow(&model, &x0, horizon, dt)?;
        let csv = report::flow_csv(&traj)?;
        let raw = json!({ "times": traj.times, "states": traj.states });
        w.raw("flow", csv, raw, &json!({ "domain_exit": traj.domain_exit }))?;
    }
    let passed = eq.stable && lyapunov_residual(&eq).is_some_and(|r| r < 1e-8);
    w.check(passed, format!("stable={} lyapunov_residual={:?}", eq.stable, lyapunov_residual(&eq)));
    Ok(())
}

fn lyapunov_residual(eq: &EquilibriumReport) -> Option<f64> {
    let s = eq.sigma_star.as_ref()?;
    let r = &eq.jacobian * s + s * eq.jacobian.transpose() + &eq.s_star;
    Some(r.amax())
}

fn couple(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let horizon = cfg.horizon.expect("validated");
    let replicas = cfg.replicas.unwrap_or(1000);
    let levels = cfg.levels.unwrap_or_else(|| default_levels(horizon));
    let errors = error_ensemble(horizon, Some(levels), replicas, cfg.seed)?;
    let tails = validate_tail_bounds(&TailConfig::standard(), replicas.max(10_000), ddgauss::rng::derive_seed(cfg.seed, 1))?;
    let shape = tail_shape(&errors, 12, 5);
    let flags = json!({ "levels": levels });
    w.raw(
        "kmt_errors",
        report::kmt_errors_csv(horizon, &errors)?,
        json!({ "T": horizon, "errors": errors }),
        &flags,
    )?;
    let summary = json!({
        "T": horizon,
        "levels": levels,
        "replicas": replicas,
        "median_error": stats::median(&errors),
        "mean_error": stats::mean(&errors),
        "tail_shape": shape,
        "tail_report": tails,
    });
    w.json("tail_report.json", &summary, &flags)?;
    let failed: Vec<String> = tails
        .cells
        .iter()
        .filter(|c| c.status == ddgauss::kmt::CellStatus::Fail)
        .map(|c| format!("{:?}(S={}, A={})", c.kind, c.s, c.a))
        .collect();
    w.check(failed.is_empty(), format!("failed cells: {failed:?}"));
    Ok(())
}

fn simulate(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let model = load_model(cfg)?;
    let eq = equilibrium(&model, cfg)?;
    let k = cfg.scale.expect("validated");
    let horizon = cfg.horizon.expect("validated");
    let x0 = cfg.x0.clone().unwrap_or_else(|| eq.x_star.clone());
    let dt = cfg.dt.unwrap_or(0.005);
    let eps = cfg.eps.unwrap_or(0.1);
    let replicas = cfg.replicas.unwrap_or(1);
    let emit = if cfg.emit.is_empty() { vec![Emit::Summary] } else { cfg.emit.clone() };

    let paths: Vec<Result<CoupledPath, ddgauss::Error>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(cfg.seed, r as u64);
            simulate_coupled(&model, &eq, k, &x0, horizon, dt, &mut rng)
        })
        .collect();
    let paths = paths.into_iter().collect::<Result<Vec<_>, _>>()?;

    let count = |f: &dyn Fn(&CoupledPath) -> bool| paths.iter().filter(|p| f(p)).count();
    let flags = json!({
        "stable": eq.stable,
        "absorbed": count(&|p| p.flags.absorbed_at.is_some()),
        "exited": count(&|p| p.flags.exited_at.is_some()),
        "left_compact": count(&|p| p.flags.left_compact_at.is_some()),
        "channel_extensions": paths.iter().map(|p| p.flags.channel_extensions).sum::<usize>(),
        "auxiliary_increments": paths.iter().map(|p| p.flags.auxiliary_increments).sum::<usize>(),
    });

    for (r, p) in paths.iter().enumerate() {
        if emit.contains(&Emit::Path) {
            let raw = json!({ "times": p.times, "z": p.z, "gap": p.grid_gaps });
            w.raw(&format!("path_{r}"), report::path_csv(p)?, raw, &flags)?;
        }
        if emit.contains(&Emit::Gap) {
            w.raw(&format!("gap_{r}"), report::gap_csv(p)?, json!({ "gaps": p.gaps }), &flags)?;
        }
    }
    if emit.contains(&Emit::Flow) {
        let traj = flow(&model, &x0, horizon, dt)?;
        let raw = json!({ "times": traj.times, "states": traj.states });
        w.raw("flow", report::flow_csv(&traj)?, raw, &flags)?;
    }
    let sups: Vec<f64> = paths.iter().map(|p| p.gap_sup).collect();
    let below = sups.iter().filter(|&&g| g < eps).count();
    let fraction = below as f64 / replicas as f64;
    if emit.contains(&Emit::Summary) {
        let per_replica: Vec<Value> = paths
            .iter()
            .enumerate()
            .map(|(r, p)| {
                json!({
                    "replica": r,
                    "gap_sup": p.gap_sup,
                    "crossing_time": gap_crossing_time(p, eps),
                    "events": p.path.n_events(),
                    "flags": p.flags,
                })
            })
            .collect();
        let summary = json!({
            "K": k,
            "x0": x0,
            "horizon": horizon,
            "dt": dt,
            "eps": eps,
            "replicas": replicas,
            "median_gap_sup": stats::median(&sups),
            "fraction_below_eps": fraction,
            "per_replica": per_replica,
        });
        w.raw("summary", report::coupled_summary_csv(&paths, Some(eps))?, summary.clone(), &flags)?;
        if cfg.format == Format::Csv {
            w.json("summary.json", &summary, &flags)?;
        }
    }
    w.check(fraction >= 0.95, format!("fraction of replicas with sup gap < {eps}: {fraction}"));
    Ok(())
}

fn moddev(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let model = load_model(cfg)?;
    let eq = equilibrium(&model, cfg)?;
    let k = cfg.scale.expect("validated");
    let eta = cfg.eta.expect("validated");
    let h = cfg.h.unwrap_or(0.25);
    let replicas = cfg.replicas.unwrap_or(200);
    let max_horizon = cfg.max_horizon.unwrap_or_else(|| 4.0 * exit_bracket(k, eta, h).1);
    let s = moderate_deviation_times(&model, &eq, k, eta, h, replicas, max_horizon, cfg.seed)?;
    let flags = json!({
        "censored": s.censored.iter().filter(|&&c| c).count(),
        "warnings": s.warnings,
        "acceptance": { "h": h, "min_bracket_fraction": 0.8 },
    });
    w.raw("moddev", report::exit_times_csv(&s)?, serde_json::to_value(&s).expect("serializes"), &flags)?;
    let summary = json!({
        "K": s.k,
        "eta": s.eta,
        "h": s.h,
        "K_eta2": s.k * s.eta * s.eta,
        "max_horizon": s.max_horizon,
        "lower": s.lower,
        "upper": s.upper,
        "bracket_fraction": s.bracket_fraction,
        "median_tau": stats::median(&s.taus),
        "warnings": s.warnings,
    });
    w.json("moddev_summary.json", &summary, &flags)?;
    w.check(s.bracket_fraction >= 0.8, format!("bracket fraction {}", s.bracket_fraction));
    Ok(())
}

fn qsd(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let p = catalog_param(cfg, "p")?;
    let q = catalog_param(cfg, "q")?;
    let model = load_model(cfg)?;
    let eq = equilibrium(&model, cfg)?;
    let sigma2 = eq.sigma()?[(0, 0)];
    let t = cfg.t.expect("validated");
    let window = cfg.window.unwrap_or(0.0);
    let replicas = cfg.replicas.unwrap_or(10_000);
    let x0 = cfg.x0.as_ref().map(|v| v[0]);
    let mut rows = Vec::new();
    let mut distances = Vec::new();
    for (i, &k) in k_values(cfg).iter().enumerate() {
        let seed = ddgauss::rng::derive_seed(cfg.seed, i as u64);
        let e = conditioned_ensemble(p, q, k, t, window, replicas, x0, seed)?;
        let wd = wasserstein_truncated_1d(&e.rescaled, sigma2)?;
        let se = wasserstein_bootstrap_se(&e.rescaled, sigma2, 200, ddgauss::rng::derive_seed(seed, 1))?;
        let exact = if k <= 50.0 && k.fract() == 0.0 {
            qsd_small_k(p, q, k).ok().map(|ex| {
                let m: f64 = ex.states.iter().zip(&ex.probs).map(|(x, w)| x * w).sum();
                let v: f64 = ex.states.iter().zip(&ex.probs).map(|(x, w)| (x - m).powi(2) * w).sum();
                json!({ "mean": m, "variance_rescaled": k * v, "extinction_rate": ex.extinction_rate })
            })
        } else {
            None
        };
        let flags = json!({ "warnings": e.warnings, "survivors": e.survivors });
        w.raw(
            &format!("qsd_K{k}"),
            report::conditioned_csv(&e)?,
            serde_json::to_value(&e).expect("serializes"),
            &flags,
        )?;
        distances.push(wd);
        rows.push(json!({
            "K": k,
            "survivors": e.survivors,
            "survival_fraction": e.survival_fraction(),
            "rescaled_mean": stats::mean(&e.rescaled),
            "rescaled_variance": stats::variance(&e.rescaled),
            "wasserstein": wd,
            "wasserstein_se": se,
            "exact": exact,
            "warnings": e.warnings,
        }));
    }
    let nonincreasing = distances.windows(2).all(|d| d[1] <= d[0]);
    let summary = json!({ "p": p, "q": q, "t": t, "window": window, "sigma2": sigma2, "rows": rows, "nonincreasing": nonincreasing });
    w.json("qsd_summary.json", &summary, &json!({}))?;
    let last = distances.last().copied().unwrap_or(f64::NAN);
    w.check(
        nonincreasing && last < 0.15,
        format!("wasserstein {distances:?}, nonincreasing={nonincreasing}"),
    );
    Ok(())
}

fn sirs_cost(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let lam = catalog_param(cfg, "lambda")?;
    let gam = catalog_param(cfg, "gamma")?;
    let theta = catalog_param(cfg, "theta")?;
    let k = cfg.scale.expect("validated");
    let horizon = cfg.horizon.expect("validated");
    let replicas = cfg.replicas.unwrap_or(500);
    let c = sirs_cost_samples(lam, gam, theta, k, horizon, replicas, cfg.seed)?;
    let flags = json!({ "extinct": c.extinct.iter().filter(|&&e| e).count() });
    w.raw("sirs_cost", report::cost_csv(&c)?, serde_json::to_value(&c).expect("serializes"), &flags)?;
    let summary = json!({
        "lambda": c.lambda,
        "gamma": c.gamma,
        "theta": c.theta,
        "K": c.k,
        "T": c.t,
        "replicas": replicas,
        "i_star": c.i_star,
        "sigma2": c.sigma2,
        "mean": c.mean,
        "variance": c.variance,
        "standard_error": c.standard_error,
        "predicted_mean": c.predicted_mean,
        "predicted_variance": c.predicted_variance,
    });
    w.json("sirs_cost_summary.json", &summary, &flags)?;
    let z = (c.mean - c.predicted_mean) / c.standard_error;
    let rel = (c.variance / c.predicted_variance - 1.0).abs();
    w.check(
        z.abs() <= 3.0 && rel <= 0.3,
        format!("mean z-score {z}, variance relative error {rel}"),
    );
    Ok(())
}

fn threshold(w: &mut Writer) -> Result<(), RunError> {
    let cfg = w.cfg;
    let model = load_model(cfg)?;
    let eq = equilibrium(&model, cfg)?;
    let ks = k_values(cfg);
    let alpha = cfg.alpha.expect("validated");
    let horizon = cfg.horizon.expect("validated");
    let replicas = cfg.replicas.unwrap_or(100);
    let dt = cfg.dt.unwrap_or(0.005);
    let t = threshold_time_ensemble(&model, &eq, &ks, alpha, replicas, horizon, dt, cfg.seed)?;
    let flags = json!({});
    w.raw("threshold", report::threshold_csv(&t)?, serde_json::to_value(&t).expect("serializes"), &flags)?;
    let rows: Vec<Value> = t
        .rows
        .iter()
        .map(|r| {
            json!({
                "K": r.k, "eps": r.eps, "replicas": r.replicas, "crossings": r.crossings,
                "exposure": r.exposure, "rate": r.rate, "rate_lo": r.rate_lo, "rate_hi": r.rate_hi,
            })
        })
        .collect();
    let summary = json!({ "alpha": t.alpha, "horizon": t.horizon, "rows": rows, "nonincreasing": t.nonincreasing });
    w.json("threshold_summary.json", &summary, &flags)?;
    w.check(t.nonincreasing, format!("crossing rates nonincreasing: {}", t.nonincreasing));
    Ok(())
}
