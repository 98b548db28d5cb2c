//! Deviation functionals of the two model classes: the Heisenberg-picture
//! mean-square deviation Delta(t) of an oscillator, evaluated in closed form
//! through the controllability Gramian, and the Schrodinger-picture
//! Hilbert-Schmidt deviation Gamma(t) of a finite-level system, evaluated
//! through the superoperator exponential. Both come with analytic first and
//! second time derivatives, reference scales and finite-horizon suprema.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::matops::{self, ComplexMatrix, MatOpsError, RealMatrix};
use crate::models::{FiniteLevelModel, Lindbladian, OqhoModel};

/// Reference scales below this are rejected as degenerate.
const SCALE_FLOOR: f64 = 1e-14;
/// Grid size of the supremum scan before golden-section refinement.
const SUP_GRID: usize = 512;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error(transparent)]
    Mat(#[from] MatOpsError),
    #[error("time must be nonnegative and finite, got {got}")]
    InvalidTime { got: f64 },
    #[error("horizon must be positive and finite, got {got}")]
    InvalidHorizon { got: f64 },
    #[error("reference scale is degenerate ({got:.3e})")]
    DegenerateScale { got: f64 },
}

fn check_time(t: f64) -> Result<(), FunctionalError> {
    if !t.is_finite() || t < 0.0 {
        return Err(FunctionalError::InvalidTime { got: t });
    }
    Ok(())
}

/// Deviation values over a time grid, as serialized by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    #[serde(rename = "heisenberg-delta")]
    HeisenbergDelta,
    #[serde(rename = "schrodinger-gamma")]
    SchrodingerGamma,
}

/// e^{tA} and the Gramian G(t) from a single block exponential of
/// [[-A, BB^T], [0, A^T]]: with blocks [[F11, F12], [0, F22]] of the
/// exponential, F22 = e^{tA^T} and G(t) = F22^T F12.
fn flow(model: &OqhoModel, t: f64) -> Result<(RealMatrix, RealMatrix), FunctionalError> {
    let n = model.n();
    let a = model.drift();
    let bbt = model.dispersion() * model.dispersion().transpose();
    let mut block = RealMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(&bbt);
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = matops::expm(&(block * t))?;
    let f12 = e.view((0, n), (n, n)).into_owned();
    let f22 = e.view((n, n), (n, n)).into_owned();
    let e_ta = f22.transpose();
    let g = matops::symmetrize(&(&e_ta * f12))?;
    Ok((e_ta, g))
}

/// Controllability Gramian G(t) = int_0^t e^{vA} BB^T e^{vA^T} dv.
pub fn gramian(model: &OqhoModel, t: f64) -> Result<RealMatrix, FunctionalError> {
    check_time(t)?;
    flow(model, t).map(|(_, g)| g)
}

/// Mean-square deviation Delta(t) = <Sigma, alpha P alpha^T>
/// + <Sigma, G(t)> with alpha = e^{tA} - I; vanishes exactly at t = 0.
pub fn delta(model: &OqhoModel, t: f64) -> Result<f64, FunctionalError> {
    check_time(t)?;
    let (e_ta, g) = flow(model, t)?;
    let alpha = e_ta - RealMatrix::identity(model.n(), model.n());
    let drifted = &alpha * model.p0() * alpha.transpose();
    let first = matops::frobenius_inner(model.sigma_weight(), &drifted)?;
    let second = matops::frobenius_inner(model.sigma_weight(), &g)?;
    Ok(first + second)
}

/// First two time derivatives of Delta, by analytic differentiation of the
/// closed form. With E = e^{tA}, alpha = E - I and Gdot = AG + GA^T + BB^T:
/// Delta'  = <Sigma, 2 S(A E P alpha^T) + Gdot>,
/// Delta'' = <Sigma, 2 S(A^2 E P alpha^T + A E P E^T A^T) + A Gdot + Gdot A^T>.
pub fn delta_derivatives(model: &OqhoModel, t: f64) -> Result<(f64, f64), FunctionalError> {
    check_time(t)?;
    let n = model.n();
    let a = model.drift();
    let p = model.p0();
    let sigma = model.sigma_weight();
    let bbt = model.dispersion() * model.dispersion().transpose();
    let (e_ta, g) = flow(model, t)?;
    let alpha_t = (&e_ta - RealMatrix::identity(n, n)).transpose();
    let aep = a * &e_ta * p;
    let g_dot = a * &g + &g * a.transpose() + &bbt;
    let d1 = matops::frobenius_inner(sigma, &(matops::symmetrize(&(&aep * &alpha_t))? * 2.0))?
        + matops::frobenius_inner(sigma, &g_dot)?;
    let curl = a * &aep * &alpha_t + &aep * e_ta.transpose() * a.transpose();
    let g_ddot = a * &g_dot + &g_dot * a.transpose();
    let d2 = matops::frobenius_inner(sigma, &(matops::symmetrize(&curl)? * 2.0))?
        + matops::frobenius_inner(sigma, &g_ddot)?;
    Ok((d1, d2))
}

/// Delta together with both derivatives from a single flow evaluation;
/// the crossing solvers call this in a tight loop.
pub fn delta_jet(model: &OqhoModel, t: f64) -> Result<(f64, f64, f64), FunctionalError> {
    check_time(t)?;
    let n = model.n();
    let a = model.drift();
    let p = model.p0();
    let sigma = model.sigma_weight();
    let bbt = model.dispersion() * model.dispersion().transpose();
    let (e_ta, g) = flow(model, t)?;
    let alpha = &e_ta - RealMatrix::identity(n, n);
    let alpha_t = alpha.transpose();
    let value = matops::frobenius_inner(sigma, &(&alpha * p * &alpha_t))?
        + matops::frobenius_inner(sigma, &g)?;
    let aep = a * &e_ta * p;
    let g_dot = a * &g + &g * a.transpose() + &bbt;
    let d1 = matops::frobenius_inner(sigma, &(matops::symmetrize(&(&aep * &alpha_t))? * 2.0))?
        + matops::frobenius_inner(sigma, &g_dot)?;
    let curl = a * &aep * &alpha_t + &aep * e_ta.transpose() * a.transpose();
    let g_ddot = a * &g_dot + &g_dot * a.transpose();
    let d2 = matops::frobenius_inner(sigma, &(matops::symmetrize(&curl)? * 2.0))?
        + matops::frobenius_inner(sigma, &g_ddot)?;
    Ok((value, d1, d2))
}

/// Gamma together with both derivatives from a single propagator evaluation.
pub fn gamma_jet(
    model: &FiniteLevelModel,
    lind: &Lindbladian,
    t: f64,
) -> Result<(f64, f64, f64), FunctionalError> {
    let state = evolve_state(lind, model.sigma0(), t)?;
    let dev = &state - model.sigma0();
    let l_state = lind.apply(&state);
    let ll_state = lind.apply(&l_state);
    let value = dev.norm_squared();
    let d1 = 2.0 * matops::frobenius_inner(&dev, &l_state)?.re;
    let d2 = 2.0 * matops::frobenius_inner(&dev, &ll_state)?.re + 2.0 * l_state.norm_squared();
    Ok((value, d1, d2))
}

/// Reference scale Delta_* = trace(F P F^T); errors when degenerate.
pub fn delta_star(model: &OqhoModel) -> Result<f64, FunctionalError> {
    let value = matops::frobenius_inner(model.sigma_weight(), model.p0())?;
    if value <= SCALE_FLOOR {
        return Err(FunctionalError::DegenerateScale { got: value });
    }
    Ok(value)
}

/// Golden-section refinement of a maximum inside [lo, hi].
fn golden_max<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64), FunctionalError>
where
    F: FnMut(f64) -> Result<f64, FunctionalError>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
        }
    }
    Ok(if f1 >= f2 { (x1, f1) } else { (x2, f2) })
}

/// Finite-horizon supremum Delta_T = max over [0, T] of Delta, located by a
/// dense grid scan refined by golden-section search. Returns the value and
/// the argmax time.
pub fn delta_sup(model: &OqhoModel, horizon: f64) -> Result<(f64, f64), FunctionalError> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(FunctionalError::InvalidHorizon { got: horizon });
    }
    let n_grid = SUP_GRID;
    let mut best_i = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(n_grid);
    for i in 0..n_grid {
        let t = horizon * i as f64 / (n_grid - 1) as f64;
        let v = delta(model, t)?;
        if v > best_v {
            best_v = v;
            best_i = i;
        }
        values.push((t, v));
    }
    let lo = if best_i == 0 { 0.0 } else { values[best_i - 1].0 };
    let hi = if best_i + 1 == n_grid { horizon } else { values[best_i + 1].0 };
    let (t_ref, v_ref) = golden_max(|t| delta(model, t), lo, hi, 1e-8 * horizon)?;
    Ok(if v_ref >= best_v { (v_ref, t_ref) } else { (best_v, values[best_i].0) })
}

/// Evolved state e^{tL}(sigma0) together with the Hermitization drift that
/// was removed (a roundoff diagnostic).
pub fn evolve_state_with_drift(
    lind: &Lindbladian,
    sigma0: &ComplexMatrix,
    t: f64,
) -> Result<(ComplexMatrix, f64), FunctionalError> {
    check_time(t)?;
    let propagator = matops::expm(&(lind.matrix() * Complex64::new(t, 0.0)))?;
    let evolved = propagator * matops::vec_col(sigma0);
    let raw = matops::unvec_square(&evolved, lind.dim());
    let herm = (&raw + raw.adjoint()) * Complex64::new(0.5, 0.0);
    let drift = (&raw - &herm).map(|e| e.norm()).max();
    Ok((herm, drift))
}

/// Evolved state e^{tL}(sigma0), Hermitized to suppress roundoff drift.
pub fn evolve_state(
    lind: &Lindbladian,
    sigma0: &ComplexMatrix,
    t: f64,
) -> Result<ComplexMatrix, FunctionalError> {
    evolve_state_with_drift(lind, sigma0, t).map(|(s, _)| s)
}

/// Hilbert-Schmidt deviation Gamma(t) = trace((sigma(t) - sigma0)^2);
/// vanishes exactly at t = 0.
pub fn gamma(model: &FiniteLevelModel, lind: &Lindbladian, t: f64) -> Result<f64, FunctionalError> {
    let state = evolve_state(lind, model.sigma0(), t)?;
    Ok((state - model.sigma0()).norm_squared())
}

/// First two time derivatives of Gamma: with gamma = sigma - sigma0,
/// Gamma' = 2<gamma, L(sigma)> and Gamma'' = 2<gamma, L^2(sigma)> + 2|L(sigma)|^2
/// in the Hilbert-Schmidt pairing.
pub fn gamma_derivatives(
    model: &FiniteLevelModel,
    lind: &Lindbladian,
    t: f64,
) -> Result<(f64, f64), FunctionalError> {
    let state = evolve_state(lind, model.sigma0(), t)?;
    let dev = &state - model.sigma0();
    let l_state = lind.apply(&state);
    let ll_state = lind.apply(&l_state);
    let d1 = 2.0 * matops::frobenius_inner(&dev, &l_state)?.re;
    let d2 = 2.0 * matops::frobenius_inner(&dev, &ll_state)?.re + 2.0 * l_state.norm_squared();
    Ok((d1, d2))
}

/// Reference scale Gamma_* = trace(sigma0^2), in (0, 1].
pub fn gamma_star(model: &FiniteLevelModel) -> f64 {
    model.sigma0().norm_squared()
}

/// Delta over a time grid.
pub fn delta_trace(model: &OqhoModel, times: &[f64]) -> Result<DeviationTrace, FunctionalError> {
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        values.push(delta(model, t)?);
    }
    Ok(DeviationTrace { times: times.to_vec(), values, kind: TraceKind::HeisenbergDelta })
}

/// Gamma over a time grid.
pub fn gamma_trace(
    model: &FiniteLevelModel,
    lind: &Lindbladian,
    times: &[f64],
) -> Result<DeviationTrace, FunctionalError> {
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        values.push(gamma(model, lind, t)?);
    }
    Ok(DeviationTrace { times: times.to_vec(), values, kind: TraceKind::SchrodingerGamma })
}
