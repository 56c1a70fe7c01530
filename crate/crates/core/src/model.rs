//! Density-dependent Markov chain models.
//!
//! A model is a finite list of jump vectors `e ∈ Z^d`, each carrying a rate
//! function `β_e`. The chain at scale `K` jumps from `n` to `n + e` at rate
//! `K·β_e(n/K)`. Rates here are polynomials restricted to a closed region
//! (hyper-rectangle, optionally intersected with the unit simplex) and vanish
//! outside it.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region on which the chain lives and the rates are smooth.
///
/// Bounds may be infinite. When `simplex` is set the region is further
/// restricted to `Σ x_i ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub simplex: bool,
}

impl Domain {
    pub fn orthant(d: usize) -> Self {
        Domain {
            lo: vec![0.0; d],
            hi: vec![f64::INFINITY; d],
            simplex: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Membership in the closed region.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
            && (!self.simplex || x.iter().sum::<f64>() <= 1.0 + 1e-12)
    }

    /// Membership in the open interior.
    pub fn interior(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| v > lo && v < hi)
            && (!self.simplex || x.iter().sum::<f64>() < 1.0)
    }

    /// Boundary faces as half-spaces `a·x ≤ b`.
    pub fn faces(&self) -> Vec<(Vec<f64>, f64)> {
        let d = self.dim();
        let mut out = Vec::new();
        for i in 0..d {
            if self.lo[i].is_finite() {
                let mut a = vec![0.0; d];
                a[i] = -1.0;
                out.push((a, -self.lo[i]));
            }
            if self.hi[i].is_finite() {
                let mut a = vec![0.0; d];
                a[i] = 1.0;
                out.push((a, self.hi[i]));
            }
        }
        if self.simplex {
            out.push((vec![1.0; d], 1.0));
        }
        out
    }

    /// Euclidean distance from an interior point to the boundary.
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        self.faces()
            .iter()
            .map(|(a, b)| {
                let ax: f64 = a.iter().zip(x).map(|(u, v)| u * v).sum();
                let norm: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
                (b - ax) / norm
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Serialize, Deserialize)]
struct DomainRepr {
    lo: Vec<Option<f64>>,
    hi: Vec<Option<f64>>,
    #[serde(default)]
    simplex: bool,
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let fin = |v: &f64| v.is_finite().then_some(*v);
        DomainRepr {
            lo: self.lo.iter().map(fin).collect(),
            hi: self.hi.iter().map(fin).collect(),
            simplex: self.simplex,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = DomainRepr::deserialize(d)?;
        Ok(Domain {
            lo: r.lo.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect(),
            hi: r.hi.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect(),
            simplex: r.simplex,
        })
    }
}

/// One term `c·x^α` of a polynomial rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exps: Vec<u32>,
    pub c: f64,
}

/// Polynomial rate `Σ c_α x^α`, optionally clamped to `max(0, ·)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialRate {
    pub coeffs: Vec<Monomial>,
    #[serde(default = "default_true")]
    pub clamp: bool,
}

fn default_true() -> bool {
    true
}

impl PolynomialRate {
    pub fn new(coeffs: Vec<Monomial>, clamp: bool) -> Self {
        PolynomialRate { coeffs, clamp }
    }

    fn term(c: f64, exps: &[u32]) -> Monomial {
        Monomial {
            exps: exps.to_vec(),
            c,
        }
    }

    /// Raw polynomial value, no clamping.
    pub fn polynomial(&self, x: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .map(|m| {
                m.exps
                    .iter()
                    .zip(x)
                    .fold(m.c, |acc, (&k, &v)| if k == 0 { acc } else { acc * v.powi(k as i32) })
            })
            .sum()
    }

    /// Value and whether the clamp was active.
    pub fn eval(&self, x: &[f64]) -> (f64, bool) {
        let v = self.polynomial(x);
        if self.clamp && v < 0.0 {
            (0.0, true)
        } else {
            (v, false)
        }
    }

    /// Analytic gradient of the polynomial (zero where the clamp is active).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        if self.clamp && self.polynomial(x) < 0.0 {
            return vec![0.0; d];
        }
        let mut g = vec![0.0; d];
        for m in &self.coeffs {
            for (i, gi) in g.iter_mut().enumerate() {
                let ki = m.exps[i];
                if ki == 0 {
                    continue;
                }
                let mut term = m.c * ki as f64;
                for (j, (&kj, &xj)) in m.exps.iter().zip(x).enumerate() {
                    let p = if j == i { kj - 1 } else { kj };
                    if p > 0 {
                        term *= xj.powi(p as i32);
                    }
                }
                *gi += term;
            }
        }
        g
    }
}

/// How rate gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

/// Rates evaluated at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEval {
    pub values: Vec<f64>,
    /// Set when a point fell outside the region or a clamp zeroed a rate.
    pub clamped: bool,
}

/// A density-dependent family. `K` is supplied per run and never stored here.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    dim: usize,
    jumps: Vec<Vec<i64>>,
    rates: Vec<PolynomialRate>,
    gradient_mode: GradientMode,
    domain: Domain,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        jumps: Vec<Vec<i64>>,
        rates: Vec<PolynomialRate>,
        domain: Domain,
        gradient_mode: GradientMode,
        params: BTreeMap<String, f64>,
    ) -> Result<Self> {
        if jumps.is_empty() {
            return Err(Error::InvalidModel("jump list is empty".into()));
        }
        let dim = jumps[0].len();
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if jumps.len() != rates.len() {
            return Err(Error::InvalidModel(format!(
                "{} jumps but {} rates",
                jumps.len(),
                rates.len()
            )));
        }
        for (i, e) in jumps.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::InvalidModel(format!("jump {i} has wrong dimension")));
            }
            if e.iter().all(|&v| v == 0) {
                return Err(Error::InvalidModel(format!("jump {i} is the zero vector")));
            }
        }
        for (i, r) in rates.iter().enumerate() {
            if r.coeffs.iter().any(|m| m.exps.len() != dim) {
                return Err(Error::InvalidModel(format!(
                    "rate {i} has a monomial of wrong dimension"
                )));
            }
        }
        if domain.dim() != dim || domain.hi.len() != dim {
            return Err(Error::InvalidModel("domain dimension mismatch".into()));
        }
        Ok(Model {
            name: name.into(),
            params,
            dim,
            jumps,
            rates,
            gradient_mode,
            domain,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jumps(&self) -> &[Vec<i64>] {
        &self.jumps
    }

    pub fn n_jumps(&self) -> usize {
        self.jumps.len()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn rate_polynomials(&self) -> &[PolynomialRate] {
        &self.rates
    }

    pub fn gradient_mode(&self) -> GradientMode {
        self.gradient_mode
    }

    /// `β_e(x)`, zero outside the closed domain.
    pub fn rate(&self, e: usize, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return 0.0;
        }
        self.rates[e].eval(x).0
    }

    /// Writes all rates into `out`; returns whether any clamping occurred.
    pub fn rates_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        if !self.domain.contains(x) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return true;
        }
        let mut clamped = false;
        for (o, r) in out.iter_mut().zip(&self.rates) {
            let (v, c) = r.eval(x);
            *o = v;
            clamped |= c;
        }
        clamped
    }

    pub fn rates(&self, x: &[f64]) -> RateEval {
        let mut values = vec![0.0; self.n_jumps()];
        let clamped = self.rates_into(x, &mut values);
        RateEval { values, clamped }
    }

    /// Gradient of `β_e` at `x`.
    pub fn rate_gradient(&self, e: usize, x: &[f64]) -> Vec<f64> {
        match self.gradient_mode {
            GradientMode::Analytic => self.rates[e].gradient(x),
            GradientMode::FiniteDifference => {
                let mut g = vec![0.0; self.dim];
                let mut xp = x.to_vec();
                for i in 0..self.dim {
                    let h = (1e-6 * x[i].abs()).max(1e-6);
                    xp[i] = x[i] + h;
                    let fp = self.rates[e].eval(&xp).0;
                    xp[i] = x[i] - h;
                    let fm = self.rates[e].eval(&xp).0;
                    xp[i] = x[i];
                    g[i] = (fp - fm) / (2.0 * h);
                }
                g
            }
        }
    }

    /// Drift `F(x) = Σ_e β_e(x) e`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.dim];
        self.drift_into(x, &mut f);
        f
    }

    pub fn drift_into(&self, x: &[f64], f: &mut [f64]) {
        f.iter_mut().for_each(|v| *v = 0.0);
        if !self.domain.contains(x) {
            return;
        }
        for (e, r) in self.jumps.iter().zip(&self.rates) {
            let b = r.eval(x).0;
            if b != 0.0 {
                for (fi, &ei) in f.iter_mut().zip(e) {
                    *fi += b * ei as f64;
                }
            }
        }
    }

    /// Jacobian `F'(x) = Σ_e e ∇β_e(x)ᵀ`; `x` must be interior.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if !self.domain.interior(x) {
            return Err(Error::OutsideDomain(x.to_vec()));
        }
        Ok(self.jacobian_unchecked(x))
    }

    pub(crate) fn jacobian_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut j = DMatrix::zeros(d, d);
        for (k, e) in self.jumps.iter().enumerate() {
            let g = self.rate_gradient(k, x);
            for r in 0..d {
                if e[r] == 0 {
                    continue;
                }
                for c in 0..d {
                    j[(r, c)] += e[r] as f64 * g[c];
                }
            }
        }
        j
    }

    /// Local diffusion `Σ_e β_e(x) e eᵀ`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut s = DMatrix::zeros(d, d);
        let rates = self.rates(x).values;
        for (e, b) in self.jumps.iter().zip(rates) {
            if b == 0.0 {
                continue;
            }
            for r in 0..d {
                for c in 0..d {
                    s[(r, c)] += b * (e[r] * e[c]) as f64;
                }
            }
        }
        s
    }

    /// Parses a model definition document (catalog reference or custom polynomials).
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.build()
    }

    pub fn to_spec(&self) -> ModelSpec {
        if self.name == "logistic" || self.name == "sirs" {
            return ModelSpec {
                name: Some(self.name.clone()),
                custom: None,
                params: self.params.clone(),
                domain: None,
            };
        }
        ModelSpec {
            name: Some(self.name.clone()),
            custom: Some(CustomSpec {
                d: self.dim,
                jumps: self.jumps.clone(),
                rates: self.rates.clone(),
                gradient: self.gradient_mode,
            }),
            params: self.params.clone(),
            domain: Some(self.domain.clone()),
        }
    }
}

/// Serializable model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSpec>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomSpec {
    pub d: usize,
    pub jumps: Vec<Vec<i64>>,
    pub rates: Vec<PolynomialRate>,
    #[serde(default)]
    pub gradient: GradientMode,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        match &self.custom {
            Some(c) => {
                let domain = self.domain.clone().unwrap_or_else(|| Domain::orthant(c.d));
                if c.jumps.first().map(Vec::len) != Some(c.d) {
                    return Err(Error::InvalidModel(format!(
                        "declared dimension {} does not match jumps",
                        c.d
                    )));
                }
                Model::new(
                    self.name.clone().unwrap_or_else(|| "custom".into()),
                    c.jumps.clone(),
                    c.rates.clone(),
                    domain,
                    c.gradient,
                    self.params.clone(),
                )
            }
            None => {
                let name = self
                    .name
                    .as_deref()
                    .ok_or_else(|| Error::InvalidModel("need `name` or `custom`".into()))?;
                make_catalog_model(name, &self.params)
            }
        }
    }
}

fn param(params: &BTreeMap<String, f64>, keys: &[&str]) -> Result<f64> {
    keys.iter()
        .find_map(|k| params.get(*k).copied())
        .ok_or_else(|| Error::InvalidParameter(format!("missing parameter `{}`", keys[0])))
}

/// Builds a catalog model: `"logistic"` (params `p`, `q`) or `"sirs"` (params
/// `lambda`, `gamma`, `theta`).
pub fn make_catalog_model(name: &str, params: &BTreeMap<String, f64>) -> Result<Model> {
    match name {
        "logistic" => {
            let p = param(params, &["p"])?;
            let q = param(params, &["q"])?;
            logistic(p, q)
        }
        "sirs" => {
            let lam = param(params, &["lambda", "lam", "λ"])?;
            let gam = param(params, &["gamma", "gam", "γ"])?;
            let theta = param(params, &["theta", "θ"])?;
            sirs(lam, gam, theta)
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// Logistic birth–death family: `β₁(x) = p x`, `β₋₁(x) = x(q + x)` on `x ≥ 0`.
pub fn logistic(p: f64, q: f64) -> Result<Model> {
    if !(q > 0.0) {
        return Err(Error::InvalidParameter(format!("logistic requires q>0, got q={q}")));
    }
    if !(p > q) {
        return Err(Error::InvalidParameter(format!(
            "logistic requires p>q, got p={p}, q={q}"
        )));
    }
    let t = PolynomialRate::term;
    let birth = PolynomialRate::new(vec![t(p, &[1])], true);
    let death = PolynomialRate::new(vec![t(q, &[1]), t(1.0, &[2])], true);
    let params = BTreeMap::from([("p".to_string(), p), ("q".to_string(), q)]);
    Model::new(
        "logistic",
        vec![vec![1], vec![-1]],
        vec![birth, death],
        Domain::orthant(1),
        GradientMode::Analytic,
        params,
    )
}

/// SIRS epidemic on the simplex `{s, i ≥ 0, s + i ≤ 1}` with jumps
/// infection `(−1, 1)`, recovery `(0, −1)`, loss of immunity `(1, 0)`.
pub fn sirs(lam: f64, gam: f64, theta: f64) -> Result<Model> {
    if !(gam > 0.0) || !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sirs requires gamma>0 and theta>0, got gamma={gam}, theta={theta}"
        )));
    }
    if !(lam > gam) {
        return Err(Error::InvalidParameter(format!(
            "sirs requires lambda>gamma, got lambda={lam}, gamma={gam}"
        )));
    }
    let t = PolynomialRate::term;
    let inf = PolynomialRate::new(vec![t(lam, &[1, 1])], true);
    let rec = PolynomialRate::new(vec![t(gam, &[0, 1])], true);
    let loi = PolynomialRate::new(
        vec![t(theta, &[0, 0]), t(-theta, &[1, 0]), t(-theta, &[0, 1])],
        true,
    );
    let params = BTreeMap::from([
        ("lambda".to_string(), lam),
        ("gamma".to_string(), gam),
        ("theta".to_string(), theta),
    ]);
    Model::new(
        "sirs",
        vec![vec![-1, 1], vec![0, -1], vec![1, 0]],
        vec![inf, rec, loi],
        Domain {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
            simplex: true,
        },
        GradientMode::Analytic,
        params,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn logistic_rates() {
        let m = logistic(2.0, 1.0).unwrap();
        assert_eq!(m.dim(), 1);
        assert_eq!(m.jumps(), &[vec![1], vec![-1]]);
        assert_eq!(m.rate(0, &[0.5]), 1.0);
        assert_eq!(m.rate(1, &[0.5]), 0.75);
        assert_eq!(m.drift(&[1.0]), vec![0.0]);
        assert!(close(m.drift(&[0.5])[0], 0.25, 1e-15));
        // indicator: nothing happens below zero
        assert_eq!(m.rate(0, &[-0.1]), 0.0);
        assert!(m.rates(&[-0.1]).clamped);
    }

    #[test]
    fn logistic_constraint() {
        let params = BTreeMap::from([("p".to_string(), 1.0), ("q".to_string(), 2.0)]);
        let err = make_catalog_model("logistic", &params).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(ref s) if s.contains("p>q")));
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(
            make_catalog_model("lotka", &BTreeMap::new()),
            Err(Error::UnknownModel(_))
        ));
    }

    #[test]
    fn sirs_values() {
        let m = sirs(2.0, 1.0, 1.0).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.rate(0, &[0.5, 0.25]), 0.25);
        let f = m.drift(&[0.5, 0.25]);
        assert!(f[0].abs() < 1e-15 && f[1].abs() < 1e-15);
        let j = m.jacobian(&[0.5, 0.25]).unwrap();
        let expect = [[-1.5, -2.0], [0.5, 0.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!(close(j[(r, c)], expect[r][c], 1e-14));
            }
        }
        let s = m.diffusion_matrix(&[0.5, 0.25]);
        let expect = [[0.5, -0.25], [-0.25, 0.5]];
        for r in 0..2 {
            for c in 0..2 {
                assert!(close(s[(r, c)], expect[r][c], 1e-14));
            }
        }
    }

    #[test]
    fn logistic_jacobian_and_diffusion() {
        let m = logistic(2.0, 1.0).unwrap();
        assert_eq!(m.jacobian(&[1.0]).unwrap()[(0, 0)], -1.0);
        // consistency oracle 2·p·(p−q)
        assert_eq!(m.diffusion_matrix(&[1.0])[(0, 0)], 2.0 * 2.0 * 1.0);
    }

    #[test]
    fn zero_rates_give_zero_diffusion() {
        let m = logistic(2.0, 1.0).unwrap();
        assert_eq!(m.diffusion_matrix(&[0.0])[(0, 0)], 0.0);
    }

    #[test]
    fn jacobian_requires_interior() {
        let m = logistic(2.0, 1.0).unwrap();
        assert!(matches!(m.jacobian(&[0.0]), Err(Error::OutsideDomain(_))));
        let s = sirs(2.0, 1.0, 1.0).unwrap();
        assert!(s.jacobian(&[0.6, 0.4]).is_err());
    }

    #[test]
    fn rejects_zero_jump() {
        let r = PolynomialRate::new(vec![PolynomialRate::term(1.0, &[1])], true);
        let err = Model::new(
            "bad",
            vec![vec![0]],
            vec![r],
            Domain::orthant(1),
            GradientMode::Analytic,
            BTreeMap::new(),
        );
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    #[test]
    fn clamp_flag() {
        let r = PolynomialRate::new(
            vec![PolynomialRate::term(1.0, &[0]), PolynomialRate::term(-2.0, &[1])],
            true,
        );
        assert_eq!(r.eval(&[1.0]), (0.0, true));
        assert_eq!(r.eval(&[0.25]), (0.5, false));
        let raw = PolynomialRate { clamp: false, ..r };
        assert_eq!(raw.eval(&[1.0]), (-1.0, false));
    }

    #[test]
    fn custom_model_json() {
        let text = r#"{
            "name": "immigration-death",
            "custom": {
                "d": 1,
                "jumps": [[1], [-1]],
                "rates": [
                    {"coeffs": [{"exps": [0], "c": 1.0}], "clamp": true},
                    {"coeffs": [{"exps": [1], "c": 1.0}], "clamp": true}
                ],
                "gradient": "finite_difference"
            },
            "domain": {"lo": [0.0], "hi": [null]}
        }"#;
        let m = Model::from_json(text).unwrap();
        assert_eq!(m.gradient_mode(), GradientMode::FiniteDifference);
        assert!(m.domain().hi[0].is_infinite());
        assert!(close(m.jacobian(&[0.7]).unwrap()[(0, 0)], -1.0, 1e-8));
        let back = Model::from_json(&serde_json::to_string(&m.to_spec()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn catalog_json() {
        let m = Model::from_json(r#"{"name": "sirs", "params": {"lambda": 2, "gamma": 1, "theta": 1}}"#)
            .unwrap();
        assert_eq!(m, sirs(2.0, 1.0, 1.0).unwrap());
    }

    #[test]
    fn distance_to_boundary() {
        let s = sirs(2.0, 1.0, 1.0).unwrap();
        let d = s.domain().distance_to_boundary(&[0.5, 0.25]);
        assert!(close(d, 0.25 / 2f64.sqrt(), 1e-12));
    }
}
