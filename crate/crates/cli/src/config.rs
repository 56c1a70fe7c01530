//! Command-line and config-file parsing into a validated [`RunConfig`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Command as ClapCommand};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Moddev,
    Qsd,
    SirsCost,
    Threshold,
}

impl Experiment {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "moddev" => Some(Self::Moddev),
            "qsd" => Some(Self::Qsd),
            "sirs-cost" => Some(Self::SirsCost),
            "threshold" => Some(Self::Threshold),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Moddev => "moddev",
            Self::Qsd => "qsd",
            Self::SirsCost => "sirs-cost",
            Self::Threshold => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command", content = "variant")]
pub enum Command {
    Analyze,
    Couple,
    Simulate,
    Experiment(Experiment),
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Self::Analyze => "analyze".into(),
            Self::Couple => "couple".into(),
            Self::Simulate => "simulate".into(),
            Self::Experiment(e) => format!("experiment {}", e.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Catalog { name: String, params: BTreeMap<String, f64> },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Path,
    Gap,
    Summary,
    Flow,
}

impl Emit {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "path" => Some(Self::Path),
            "gap" => Some(Self::Gap),
            "summary" => Some(Self::Summary),
            "flow" => Some(Self::Flow),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Path => "path",
            Self::Gap => "gap",
            Self::Summary => "summary",
            Self::Flow => "flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

/// Validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<ModelSource>,
    pub scale: Option<f64>,
    pub k_list: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub eps: Option<f64>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub h: Option<f64>,
    pub t: Option<f64>,
    pub window: Option<f64>,
    pub replicas: Option<usize>,
    pub max_horizon: Option<f64>,
    pub levels: Option<u32>,
    pub seed: u64,
    pub out: PathBuf,
    pub emit: Vec<Emit>,
    pub threads: Option<usize>,
    pub format: Format,
    pub check: bool,
    pub config_file: Option<PathBuf>,
    /// Config-file keys that a command-line flag overrode.
    pub overridden: Vec<String>,
}

/// Value-taking flags.
const VALUE_FLAGS: &[&str] = &[
    "config",
    "model",
    "model-file",
    "p",
    "q",
    "lambda",
    "gamma",
    "theta",
    "scale",
    "k-list",
    "x0",
    "horizon",
    "dt",
    "eps",
    "alpha",
    "eta",
    "h",
    "t",
    "window",
    "replicas",
    "max-horizon",
    "levels",
    "seed",
    "out",
    "emit",
    "threads",
    "format",
];

const MODEL_PARAMS: &[&str] = &["p", "q", "lambda", "gamma", "theta"];

pub fn cli() -> ClapCommand {
    let mut cmd = ClapCommand::new("ddgauss")
        .about("Strong Gaussian coupling of density-dependent Markov chains")
        .version(env!("CARGO_PKG_VERSION"))
        .after_help(
            "Commands: analyze | couple | simulate | experiment {moddev,qsd,sirs-cost,threshold}\n\
             CSV columns:\n  \
             couple: replica,T,error\n  \
             simulate --emit path: t,X_1..X_d,Z_1..Z_d,gap; --emit summary: replica,gap_sup,crossing_time,...\n  \
             moddev: replica,tau,censored\n  \
             qsd: survivor,x_t,x_end,rescaled\n  \
             sirs-cost: replica,cost,extinct\n  \
             threshold: K,eps,replica,crossing_time\n\
             Exit codes: 0 success, 1 invalid configuration, 2 runtime error, 3 --check failed.",
        )
        .arg(Arg::new("command").num_args(1))
        .arg(Arg::new("variant").num_args(1))
        .arg(
            Arg::new("check")
                .long("check")
                .action(ArgAction::SetTrue)
                .help("Evaluate the built-in acceptance check and exit 3 on failure"),
        );
    for name in VALUE_FLAGS {
        cmd = cmd.arg(Arg::new(*name).long(*name).num_args(1).allow_hyphen_values(true));
    }
    cmd
}

/// Raw string values per key, before typing.
type Raw = BTreeMap<String, String>;

fn json_to_raw(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(a) => Some(
            a.iter()
                .filter_map(json_to_raw)
                .collect::<Vec<_>>()
                .join(","),
        ),
        serde_json::Value::Object(_) => None,
    }
}

fn read_config_file(path: &str, errors: &mut Vec<String>) -> Raw {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            errors.push(format!("cannot read config file {path}: {e}"));
            return Raw::new();
        }
    };
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            errors.push(format!("config file {path} is not valid JSON: {e}"));
            return Raw::new();
        }
    };
    let Some(obj) = value.as_object() else {
        errors.push(format!("config file {path} must hold a JSON object"));
        return Raw::new();
    };
    let mut raw = Raw::new();
    for (k, v) in obj {
        let key = k.replace('_', "-");
        let known = key == "command" || key == "variant" || key == "check" || VALUE_FLAGS.contains(&key.as_str());
        if !known || key == "config" {
            errors.push(format!("unknown key '{k}' in config file"));
            continue;
        }
        match json_to_raw(v) {
            Some(s) => {
                raw.insert(key, s);
            }
            None => errors.push(format!("config key '{k}' has an unsupported value")),
        }
    }
    raw
}

fn number<T: std::str::FromStr>(raw: &Raw, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let s = raw.get(key)?;
    match s.trim().parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            errors.push(format!("--{key}: expected a number, got '{s}'"));
            None
        }
    }
}

fn real(raw: &Raw, key: &str, errors: &mut Vec<String>) -> Option<f64> {
    let v: f64 = number(raw, key, errors)?;
    if !v.is_finite() {
        errors.push(format!("--{key}: value must be finite"));
        return None;
    }
    Some(v)
}

fn list(raw: &Raw, key: &str, errors: &mut Vec<String>) -> Option<Vec<f64>> {
    let s = raw.get(key)?;
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            _ => {
                errors.push(format!("--{key}: '{part}' is not a number"));
                return None;
            }
        }
    }
    if out.is_empty() {
        errors.push(format!("--{key}: empty list"));
        return None;
    }
    Some(out)
}

fn positive(v: Option<f64>, key: &str, errors: &mut Vec<String>) {
    if let Some(x) = v {
        if !(x > 0.0) {
            errors.push(format!("--{key} must be positive, got {x}"));
        }
    }
}

fn require<T>(v: &Option<T>, key: &str, cmd: &str, errors: &mut Vec<String>) {
    if v.is_none() {
        errors.push(format!("{cmd} requires --{key}"));
    }
}

/// Parses `argv` (without the program name) plus an optional `--config` JSON
/// file. Flags override file values. Every violation is reported.
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig, Vec<String>>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let mut errors = Vec::new();

    // Unknown flags are collected here; clap would stop at the first one.
    let mut kept = vec!["ddgauss".to_string()];
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        if let Some(name) = a.strip_prefix("--") {
            let key = name.split('=').next().unwrap_or("");
            if key != "check" && key != "help" && key != "version" && !VALUE_FLAGS.contains(&key) {
                errors.push(format!("unknown flag --{key}"));
                if !name.contains('=') && argv.get(i + 1).is_some_and(|n| !n.starts_with("--")) {
                    i += 1;
                }
                i += 1;
                continue;
            }
        }
        kept.push(a.clone());
        i += 1;
    }
    let matches = match cli().try_get_matches_from(&kept) {
        Ok(m) => m,
        Err(e) => {
            errors.push(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            return Err(errors);
        }
    };

    let mut flags = Raw::new();
    for name in VALUE_FLAGS {
        if let Some(v) = matches.get_one::<String>(name) {
            flags.insert(name.to_string(), v.clone());
        }
    }
    for pos in ["command", "variant"] {
        if let Some(v) = matches.get_one::<String>(pos) {
            flags.insert(pos.to_string(), v.clone());
        }
    }
    if matches.get_flag("check") {
        flags.insert("check".into(), "true".into());
    }

    let config_file = flags.get("config").cloned();
    let mut raw = match &config_file {
        Some(path) => read_config_file(path, &mut errors),
        None => Raw::new(),
    };
    let mut overridden = Vec::new();
    for (k, v) in flags {
        if k == "config" {
            continue;
        }
        if raw.get(&k).is_some_and(|old| old != &v) {
            overridden.push(k.clone());
        }
        raw.insert(k, v);
    }

    let command = match raw.get("command").map(String::as_str) {
        Some("analyze") => Some(Command::Analyze),
        Some("couple") => Some(Command::Couple),
        Some("simulate") => Some(Command::Simulate),
        Some("experiment") => match raw.get("variant").map(String::as_str) {
            Some(v) => match Experiment::parse(v) {
                Some(e) => Some(Command::Experiment(e)),
                None => {
                    errors.push(format!(
                        "unknown experiment '{v}' (expected moddev, qsd, sirs-cost, threshold)"
                    ));
                    None
                }
            },
            None => {
                errors.push("experiment requires a variant: moddev, qsd, sirs-cost, threshold".into());
                None
            }
        },
        Some(other) => {
            errors.push(format!(
                "unknown command '{other}' (expected analyze, couple, simulate, experiment)"
            ));
            None
        }
        None => {
            errors.push("missing command (analyze, couple, simulate, experiment)".into());
            None
        }
    };
    if let (Some(c), Some(v)) = (command, raw.get("variant")) {
        if !matches!(c, Command::Experiment(_)) {
            errors.push(format!("unexpected argument '{v}' after {}", c.name()));
        }
    }

    let mut params = BTreeMap::new();
    for p in MODEL_PARAMS {
        if let Some(v) = real(&raw, p, &mut errors) {
            params.insert(p.to_string(), v);
        }
    }
    let model = match (raw.get("model"), raw.get("model-file")) {
        (Some(_), Some(_)) => {
            errors.push("--model and --model-file are mutually exclusive".into());
            None
        }
        (Some(name), None) => Some(ModelSource::Catalog {
            name: name.clone(),
            params,
        }),
        (None, Some(path)) => {
            if !params.is_empty() {
                errors.push("model parameters need --model, not --model-file".into());
            }
            Some(ModelSource::File(PathBuf::from(path)))
        }
        (None, None) => {
            if !params.is_empty() {
                errors.push("model parameters given without --model".into());
            }
            None
        }
    };

    let seed = match raw.get("seed") {
        None => {
            errors.push("--seed is required (runs are deterministic; no clock-based default)".into());
            None
        }
        Some(s) => match s.trim().parse::<u64>() {
            Ok(v) => Some(v),
            Err(_) => {
                errors.push(format!("--seed: expected an unsigned 64-bit integer, got '{s}'"));
                None
            }
        },
    };

    let scale = real(&raw, "scale", &mut errors);
    let k_list = list(&raw, "k-list", &mut errors);
    let x0 = list(&raw, "x0", &mut errors);
    let horizon = real(&raw, "horizon", &mut errors);
    let dt = real(&raw, "dt", &mut errors);
    let eps = real(&raw, "eps", &mut errors);
    let alpha = real(&raw, "alpha", &mut errors);
    let eta = real(&raw, "eta", &mut errors);
    let h = real(&raw, "h", &mut errors);
    let t = real(&raw, "t", &mut errors);
    let window = real(&raw, "window", &mut errors);
    let replicas: Option<usize> = number(&raw, "replicas", &mut errors);
    let max_horizon = real(&raw, "max-horizon", &mut errors);
    let levels: Option<u32> = number(&raw, "levels", &mut errors);
    let threads: Option<usize> = number(&raw, "threads", &mut errors);

    for (v, key) in [
        (scale, "scale"),
        (horizon, "horizon"),
        (dt, "dt"),
        (eps, "eps"),
        (alpha, "alpha"),
        (eta, "eta"),
        (t, "t"),
        (max_horizon, "max-horizon"),
    ] {
        positive(v, key, &mut errors);
    }
    if let Some(w) = window {
        if w < 0.0 {
            errors.push(format!("--window must be nonnegative, got {w}"));
        }
    }
    if let Some(hh) = h {
        if !(0.0..0.5).contains(&hh) {
            errors.push(format!("--h must lie in [0, 1/2), got {hh}"));
        }
    }
    if replicas == Some(0) {
        errors.push("--replicas must be at least 1".into());
    }
    if threads == Some(0) {
        errors.push("--threads must be at least 1".into());
    }
    if levels.is_some_and(|l| l > 30) {
        errors.push("--levels must be at most 30".into());
    }
    if let Some(ks) = &k_list {
        if ks.iter().any(|&k| !(k > 0.0)) || ks.windows(2).any(|w| w[0] >= w[1]) {
            errors.push("--k-list must hold positive, strictly increasing values".into());
        }
    }

    let mut emit = Vec::new();
    if let Some(s) = raw.get("emit") {
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match Emit::parse(part) {
                Some(e) if !emit.contains(&e) => emit.push(e),
                Some(_) => {}
                None => errors.push(format!("--emit: unknown artifact '{part}' (path, gap, summary, flow)")),
            }
        }
    }
    let format = match raw.get("format").map(String::as_str) {
        None | Some("csv") => Format::Csv,
        Some("json") => Format::Json,
        Some(other) => {
            errors.push(format!("--format: expected csv or json, got '{other}'"));
            Format::Csv
        }
    };
    let check = match raw.get("check").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => {
            errors.push(format!("check: expected true or false, got '{other}'"));
            false
        }
    };

    if let Some(c) = command {
        let name = c.name();
        match c {
            Command::Analyze => require(&model, "model", &name, &mut errors),
            Command::Couple => require(&horizon, "horizon", &name, &mut errors),
            Command::Simulate => {
                require(&model, "model", &name, &mut errors);
                require(&scale, "scale", &name, &mut errors);
                require(&horizon, "horizon", &name, &mut errors);
            }
            Command::Experiment(Experiment::Moddev) => {
                require(&model, "model", &name, &mut errors);
                require(&scale, "scale", &name, &mut errors);
                require(&eta, "eta", &name, &mut errors);
            }
            Command::Experiment(Experiment::Qsd) => {
                require(&model, "model", &name, &mut errors);
                require(&t, "t", &name, &mut errors);
                if scale.is_none() && k_list.is_none() {
                    errors.push(format!("{name} requires --scale or --k-list"));
                }
            }
            Command::Experiment(Experiment::SirsCost) => {
                require(&model, "model", &name, &mut errors);
                require(&scale, "scale", &name, &mut errors);
                require(&horizon, "horizon", &name, &mut errors);
            }
            Command::Experiment(Experiment::Threshold) => {
                require(&model, "model", &name, &mut errors);
                require(&k_list, "k-list", &name, &mut errors);
                require(&alpha, "alpha", &name, &mut errors);
                require(&horizon, "horizon", &name, &mut errors);
            }
        }
        if let (Command::Experiment(Experiment::Qsd | Experiment::SirsCost), Some(ModelSource::Catalog { name: m, .. })) =
            (c, &model)
        {
            let want = if c == Command::Experiment(Experiment::Qsd) { "logistic" } else { "sirs" };
            if m != want {
                errors.push(format!("{name} works on the {want} model, got '{m}'"));
            }
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }
    overridden.sort();
    Ok(RunConfig {
        command: command.unwrap(),
        model,
        scale,
        k_list,
        x0,
        horizon,
        dt,
        eps,
        alpha,
        eta,
        h,
        t,
        window,
        replicas,
        max_horizon,
        levels,
        seed: seed.unwrap(),
        out: PathBuf::from(raw.get("out").cloned().unwrap_or_else(|| ".".into())),
        emit,
        threads,
        format,
        check,
        config_file: config_file.map(PathBuf::from),
        overridden,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Flags reproducing this configuration without a config file.
    pub fn to_args(&self) -> Vec<String> {
        let mut a: Vec<String> = match self.command {
            Command::Experiment(e) => vec!["experiment".into(), e.name().into()],
            c => vec![c.name()],
        };
        let mut push = |k: &str, v: String| {
            a.push(format!("--{k}"));
            a.push(v);
        };
        match &self.model {
            Some(ModelSource::Catalog { name, params }) => {
                push("model", name.clone());
                for (k, v) in params {
                    push(k, v.to_string());
                }
            }
            Some(ModelSource::File(p)) => push("model-file", p.display().to_string()),
            None => {}
        }
        let reals = [
            ("scale", self.scale),
            ("horizon", self.horizon),
            ("dt", self.dt),
            ("eps", self.eps),
            ("alpha", self.alpha),
            ("eta", self.eta),
            ("h", self.h),
            ("t", self.t),
            ("window", self.window),
            ("max-horizon", self.max_horizon),
        ];
        for (k, v) in reals {
            if let Some(v) = v {
                push(k, v.to_string());
            }
        }
        if let Some(v) = &self.k_list {
            push("k-list", join(v));
        }
        if let Some(v) = &self.x0 {
            push("x0", join(v));
        }
        if let Some(v) = self.replicas {
            push("replicas", v.to_string());
        }
        if let Some(v) = self.levels {
            push("levels", v.to_string());
        }
        if let Some(v) = self.threads {
            push("threads", v.to_string());
        }
        push("seed", self.seed.to_string());
        push("out", self.out.display().to_string());
        if !self.emit.is_empty() {
            push(
                "emit",
                self.emit.iter().map(|e| e.name()).collect::<Vec<_>>().join(","),
            );
        }
        if self.format == Format::Json {
            push("format", "json".into());
        }
        if self.check {
            a.push("--check".into());
        }
        a
    }
}
