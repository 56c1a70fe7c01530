//! Fluid-limit analysis: equilibria, stationary covariance, the ODE flow and the
//! principal matrix solution of its linearization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;

/// Equilibrium of the drift together with its linear-noise summary.
#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub x_star: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    pub eigenvalues: Vec<Complex64>,
    /// `min(−Re λ)` over the spectrum of the Jacobian.
    pub rho_star: f64,
    pub stable: bool,
    pub s_star: DMatrix<f64>,
    /// `None` when the equilibrium is unstable.
    pub sigma_star: Option<DMatrix<f64>>,
    pub newton_steps: usize,
    pub residual: f64,
}

impl EquilibriumReport {
    /// Transitory period `(6/ρ*)·log K`.
    pub fn relaxation_time(&self, k: f64) -> f64 {
        6.0 / self.rho_star * k.ln()
    }

    /// Default integration step `min(0.01, 0.1/ρ*)`.
    pub fn default_dt(&self) -> f64 {
        if self.stable {
            (0.1 / self.rho_star).min(0.01)
        } else {
            0.01
        }
    }

    pub fn sigma(&self) -> Result<&DMatrix<f64>> {
        self.sigma_star.as_ref().ok_or(Error::Unstable)
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Repr<'a> {
            x_star: &'a [f64],
            jacobian: Vec<Vec<f64>>,
            eigenvalues: Vec<[f64; 2]>,
            rho_star: f64,
            stable: bool,
            s_star: Vec<Vec<f64>>,
            sigma_star: Option<Vec<Vec<f64>>>,
            newton_steps: usize,
            residual: f64,
        }
        serde_json::to_value(Repr {
            x_star: &self.x_star,
            jacobian: rows(&self.jacobian),
            eigenvalues: self.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
            rho_star: self.rho_star,
            stable: self.stable,
            s_star: rows(&self.s_star),
            sigma_star: self.sigma_star.as_ref().map(rows),
            newton_steps: self.newton_steps,
            residual: self.residual,
        })
        .expect("report serializes")
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton iteration on the drift starting from `guess`.
fn line_search(model: &Model, x: &[f64], dx: &[f64], res: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let mut lambda = 1.0;
    for _ in 0..=30 {
        let trial: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + lambda * b).collect();
        if model.domain().interior(&trial) {
            let ft = model.drift(&trial);
            let rt = norm(&ft);
            if rt < res {
                return Some((trial, ft, rt));
            }
        }
        lambda *= 0.5;
    }
    None
}

pub fn find_equilibrium(
    model: &Model,
    guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let domain = model.domain();
    if guess.len() != model.dim() || !domain.interior(guess) {
        return Err(Error::OutsideDomain(guess.to_vec()));
    }
    let mut x = guess.to_vec();
    let mut f = model.drift(&x);
    let mut res = norm(&f);
    let mut steps = 0;
    while res > tol {
        if steps == max_iter {
            return Err(Error::NoConvergence {
                iterations: steps,
                residual: res,
            });
        }
        let j = model.jacobian(&x)?;
        let rhs = -DVector::from_column_slice(&f);
        let newton = j.lu().solve(&rhs).filter(|dx| dx.iter().all(|v| v.is_finite()));
        let singular = newton.is_none();
        // A singular Jacobian falls back to a damped step along the drift itself.
        let dx = newton.unwrap_or_else(|| DVector::from_column_slice(&f));
        let Some((xn, fnew, rn)) = line_search(model, &x, dx.as_slice(), res) else {
            return Err(if singular {
                Error::Singular(format!("Jacobian at {x:?}"))
            } else {
                Error::NoConvergence {
                    iterations: steps,
                    residual: res,
                }
            });
        };
        x = xn;
        f = fnew;
        res = rn;
        steps += 1;
    }
    if !domain.interior(&x) {
        return Err(Error::BoundaryEquilibrium(x));
    }
    let jacobian = model.jacobian(&x)?;
    let eigenvalues: Vec<Complex64> = jacobian.clone().complex_eigenvalues().iter().copied().collect();
    let rho_star = eigenvalues.iter().map(|z| -z.re).fold(f64::INFINITY, f64::min);
    let stable = rho_star > 0.0;
    let s_star = model.diffusion_matrix(&x);
    let sigma_star = if stable {
        Some(stationary_covariance(&jacobian, &s_star)?)
    } else {
        None
    };
    Ok(EquilibriumReport {
        x_star: x,
        jacobian,
        eigenvalues,
        rho_star,
        stable,
        s_star,
        sigma_star,
        newton_steps: steps,
        residual: res,
    })
}

/// Spectral abscissa `max Re λ`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `J Σ + Σ Jᵀ = −S` through the vectorized Kronecker system.
pub fn stationary_covariance(jac: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = jac.nrows();
    let abscissa = spectral_abscissa(jac);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz(abscissa));
    }
    let id = DMatrix::<f64>::identity(d, d);
    // column-major vec: vec(JΣ) = (I⊗J) vec Σ, vec(ΣJᵀ) = (J⊗I) vec Σ
    let a = id.kronecker(jac) + jac.kronecker(&id);
    let rhs = -DVector::from_column_slice(s.as_slice());
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov system".into()))?;
    let sigma = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// Solution of `φ' = F(φ)` on a time grid, with cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `F` at each stored state.
    pub derivs: Vec<Vec<f64>>,
    /// Time at which the integration left the domain, if it did.
    pub domain_exit: Option<f64>,
}

impl Trajectory {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// Typical grid spacing.
    pub fn step(&self) -> f64 {
        if self.times.len() < 2 {
            return 0.01;
        }
        self.times[1] - self.times[0]
    }

    /// Cubic Hermite interpolation at `t`.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        let (lo, hi) = (self.start(), self.end());
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::TimeOutOfRange { t, lo, hi });
        }
        let n = self.times.len();
        if n == 1 {
            return Ok(self.states[0].clone());
        }
        let i = match self.times.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => return Ok(self.states[i].clone()),
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok((0..self.states[i].len())
            .map(|k| {
                h00 * self.states[i][k]
                    + h10 * h * self.derivs[i][k]
                    + h01 * self.states[i + 1][k]
                    + h11 * h * self.derivs[i + 1][k]
            })
            .collect())
    }
}

/// Grid `0, dt, 2dt, …` ending exactly at `horizon` (the last step may be shorter).
pub fn time_grid(horizon: f64, dt: f64) -> Vec<f64> {
    let n = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut v: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    v.push(horizon);
    v
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(u, v)| u + a * v).collect()
}

/// Classical RK4 integration of the fluid limit from `x0` over `[0, horizon]`.
pub fn flow(model: &Model, x0: &[f64], horizon: f64, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "flow needs dt>0 and horizon>=0 (dt={dt}, horizon={horizon})"
        )));
    }
    if !model.domain().contains(x0) {
        return Err(Error::OutsideDomain(x0.to_vec()));
    }
    let grid = time_grid(horizon, dt);
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    let mut derivs = vec![model.drift(x0)];
    let mut domain_exit = None;
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let x = states.last().unwrap();
        let k1 = derivs.last().unwrap().clone();
        let k2 = model.drift(&axpy(x, h / 2.0, &k1));
        let k3 = model.drift(&axpy(x, h / 2.0, &k2));
        let k4 = model.drift(&axpy(x, h, &k3));
        let next: Vec<f64> = (0..x.len())
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(t1));
        }
        if !model.domain().contains(&next) {
            domain_exit = Some(t1);
            break;
        }
        derivs.push(model.drift(&next));
        states.push(next);
        times.push(t1);
    }
    Ok(Trajectory {
        times,
        states,
        derivs,
        domain_exit,
    })
}

/// `Ψ(t, s)` for the linearization along a trajectory.
#[derive(Debug, Clone)]
pub struct PrincipalMatrix {
    pub s: f64,
    pub t: f64,
    pub psi: DMatrix<f64>,
}

/// RK4 integration of `∂_t Ψ = F'(φ(t)) Ψ`, `Ψ(s, s) = I`.
pub fn principal_matrix(model: &Model, traj: &Trajectory, s: f64, t: f64) -> Result<PrincipalMatrix> {
    let (lo, hi) = (traj.start(), traj.end());
    for &v in &[s, t] {
        if v < lo - 1e-12 || v > hi + 1e-12 {
            return Err(Error::TimeOutOfRange { t: v, lo, hi });
        }
    }
    if t < s {
        return Err(Error::InvalidParameter(format!("need t >= s, got s={s}, t={t}")));
    }
    let d = model.dim();
    let mut psi = DMatrix::<f64>::identity(d, d);
    let span = t - s;
    if span == 0.0 {
        return Ok(PrincipalMatrix { s, t, psi });
    }
    let n = ((span / traj.step()) - 1e-9).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let jac = |tau: f64| -> Result<DMatrix<f64>> { Ok(model.jacobian_unchecked(&traj.at(tau.min(hi))?)) };
    let mut j0 = jac(s)?;
    for k in 0..n {
        let tau = s + k as f64 * h;
        let jm = jac(tau + h / 2.0)?;
        let j1 = jac(tau + h)?;
        let k1 = &j0 * &psi;
        let k2 = &jm * (&psi + &k1 * (h / 2.0));
        let k3 = &jm * (&psi + &k2 * (h / 2.0));
        let k4 = &j1 * (&psi + &k3 * h);
        psi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        j0 = j1;
    }
    Ok(PrincipalMatrix { s, t, psi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logistic, sirs};

    #[test]
    fn logistic_equilibrium() {
        let m = logistic(2.0, 1.0).unwrap();
        let r = find_equilibrium(&m, &[0.5], 1e-12, 50).unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-12);
        assert!((r.rho_star - 1.0).abs() < 1e-10);
        assert!(r.stable);
        assert!((r.sigma_star.unwrap()[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_steps_at_equilibrium() {
        let m = logistic(2.0, 1.0).unwrap();
        let r = find_equilibrium(&m, &[1.0], 1e-12, 50).unwrap();
        assert_eq!(r.newton_steps, 0);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn sirs_equilibrium() {
        let m = sirs(2.0, 1.0, 1.0).unwrap();
        let r = find_equilibrium(&m, &[0.4, 0.3], 1e-13, 50).unwrap();
        assert!((r.x_star[0] - 0.5).abs() < 1e-12);
        assert!((r.x_star[1] - 0.25).abs() < 1e-12);
        assert!(r.stable);
    }

    #[test]
    fn guess_outside_domain() {
        let m = logistic(2.0, 1.0).unwrap();
        assert!(matches!(
            find_equilibrium(&m, &[-1.0], 1e-12, 10),
            Err(Error::OutsideDomain(_))
        ));
    }

    #[test]
    fn max_iter_exhausted() {
        let m = logistic(2.0, 1.0).unwrap();
        assert!(matches!(
            find_equilibrium(&m, &[0.1], 1e-14, 1),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn lyapunov_scalar_and_diagonal() {
        let s = stationary_covariance(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 4.0))
            .unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-14);
        let id = DMatrix::<f64>::identity(2, 2);
        let s = stationary_covariance(&(-&id), &id).unwrap();
        assert!((s - id * 0.5).abs().max() < 1e-14);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let j = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 0.0, -1.0]);
        assert!(matches!(
            stationary_covariance(&j, &DMatrix::identity(2, 2)),
            Err(Error::NotHurwitz(_))
        ));
    }

    #[test]
    fn time_grid_ends_at_horizon() {
        let g = time_grid(1.0, 0.3);
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        let g = time_grid(15.0, 0.005);
        assert_eq!(g.len(), 3001);
    }

    #[test]
    fn equilibrium_flow_is_constant() {
        let m = logistic(2.0, 1.0).unwrap();
        let tr = flow(&m, &[1.0], 10.0, 0.01).unwrap();
        assert!(tr.states.iter().all(|s| s[0] == 1.0));
    }

    #[test]
    fn psi_identity_at_equal_times() {
        let m = sirs(2.0, 1.0, 1.0).unwrap();
        let tr = flow(&m, &[0.6, 0.2], 5.0, 0.01).unwrap();
        let p = principal_matrix(&m, &tr, 2.0, 2.0).unwrap();
        assert_eq!(p.psi, DMatrix::identity(2, 2));
        assert!(principal_matrix(&m, &tr, 1.0, 6.0).is_err());
    }
}
