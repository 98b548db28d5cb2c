//! Parameter optimization of memory performance. Models are parameterized
//! by an affine map on the energy and coupling matrices; the decoherence
//! time is maximized by gradient ascent with a backtracking line search and
//! a derivative-free fallback, finite-horizon and discounted deviations are
//! minimized the same way, and a duality verifier confirms that a maximizer
//! of the decoherence time is a stationary, locally convex point of the
//! fixed-horizon deviation at the crossing horizon.

use std::cell::RefCell;

use nalgebra::DVector;
use thiserror::Error;

use crate::decoherence::{self, DecoherenceError, DeltaCurve, TauOutcome};
use crate::discounted::{self, DiscountedError};
use crate::functionals::{self, FunctionalError};
use crate::matops::{MatOpsError, RealMatrix};
use crate::models::{build_oqho, ModelError, OqhoModel};

/// Relative gradient step of first-derivative finite differences.
const GRAD_STEP: f64 = 1e-6;
/// Relative step of second-difference Hessian entries.
const HESS_STEP: f64 = 1e-3;
/// Line-search steps below this stall the iteration.
const STEP_FLOOR: f64 = 1e-14;
/// Nelder-Mead initial simplex scale.
const SIMPLEX_SCALE: f64 = 0.05;
/// Stationarity tolerance of the duality check, times the curve scale.
const DUALITY_GRAD_TOL: f64 = 1e-4;
/// Convexity tolerance of the duality check, times the curve scale.
const DUALITY_EIG_TOL: f64 = 1e-6;
/// Below this (times scale) the duality Hessian counts as degenerate.
const DUALITY_DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Decoherence(#[from] DecoherenceError),
    #[error(transparent)]
    Discounted(#[from] DiscountedError),
    #[error(transparent)]
    Mat(#[from] MatOpsError),
    #[error("parameter map is inconsistent: {context}")]
    ParamShape { context: String },
    #[error("no finite decoherence time at the starting point (epsilon = {epsilon})")]
    NoCrossing { epsilon: f64 },
    #[error("fidelity level {epsilon} is irregular at this point; gradient formulas do not apply")]
    Irregular { epsilon: f64 },
    #[error("objective could not be evaluated at the starting point")]
    InvalidStart,
    #[error("finite-difference step failed for coordinate {index} even after shrinking")]
    GradientStep { index: usize },
}

/// Affine parameterization of a physical-mode oscillator: the energy and
/// coupling matrices move along fixed directions, everything else is pinned.
#[derive(Debug, Clone)]
pub struct ParamMap {
    theta: RealMatrix,
    base_r: RealMatrix,
    base_m: RealMatrix,
    directions_r: Vec<RealMatrix>,
    directions_m: Vec<RealMatrix>,
    weight: RealMatrix,
    p0: RealMatrix,
}

impl ParamMap {
    pub fn new(
        theta: RealMatrix,
        base_r: RealMatrix,
        base_m: RealMatrix,
        directions_r: Vec<RealMatrix>,
        directions_m: Vec<RealMatrix>,
        weight: RealMatrix,
        p0: RealMatrix,
    ) -> Result<Self, OptimizeError> {
        if directions_r.len() != directions_m.len() {
            return Err(OptimizeError::ParamShape {
                context: format!(
                    "{} energy directions vs {} coupling directions",
                    directions_r.len(),
                    directions_m.len()
                ),
            });
        }
        let n = base_r.nrows();
        for (i, d) in directions_r.iter().enumerate() {
            if d.shape() != base_r.shape() {
                return Err(OptimizeError::ParamShape {
                    context: format!("energy direction {i} has shape {:?}", d.shape()),
                });
            }
            if (d - d.transpose()).amax() > 1e-12 * d.amax().max(1.0) {
                return Err(OptimizeError::ParamShape {
                    context: format!("energy direction {i} is not symmetric"),
                });
            }
        }
        for (i, d) in directions_m.iter().enumerate() {
            if d.shape() != base_m.shape() {
                return Err(OptimizeError::ParamShape {
                    context: format!("coupling direction {i} has shape {:?}", d.shape()),
                });
            }
        }
        if base_r.shape() != (n, n) || base_m.ncols() != n {
            return Err(OptimizeError::ParamShape {
                context: "base matrices do not share the mode dimension".to_string(),
            });
        }
        Ok(Self { theta, base_r, base_m, directions_r, directions_m, weight, p0 })
    }

    /// Number of scalar parameters.
    pub fn r(&self) -> usize {
        self.directions_r.len()
    }

    /// Builds the oscillator at parameter vector p.
    pub fn build(&self, p: &[f64]) -> Result<OqhoModel, OptimizeError> {
        if p.len() != self.r() {
            return Err(OptimizeError::ParamShape {
                context: format!("parameter vector has length {}, map has {}", p.len(), self.r()),
            });
        }
        let mut r_mat = self.base_r.clone();
        let mut m_mat = self.base_m.clone();
        for (i, &pi) in p.iter().enumerate() {
            r_mat += &self.directions_r[i] * pi;
            m_mat += &self.directions_m[i] * pi;
        }
        Ok(build_oqho(&self.theta, &r_mat, &m_mat, &self.weight, &self.p0)?)
    }
}

/// Central finite-difference gradient of a scalar function of p. A hard
/// error at a perturbed point is retried once with the step divided by 8;
/// a soft failure (None) is retried the same way and surfaces as None.
fn fd_gradient<F>(
    f: &mut F,
    p: &[f64],
) -> Result<Option<DVector<f64>>, OptimizeError>
where
    F: FnMut(&[f64]) -> Result<Option<f64>, OptimizeError>,
{
    let r = p.len();
    let mut grad = DVector::zeros(r);
    let mut work = p.to_vec();
    for i in 0..r {
        let h_full = GRAD_STEP * p[i].abs().max(1.0);
        let mut entry = None;
        for (attempt, h) in [h_full, h_full / 8.0].into_iter().enumerate() {
            work[i] = p[i] + h;
            let plus = f(&work);
            work[i] = p[i] - h;
            let minus = f(&work);
            work[i] = p[i];
            match (plus, minus) {
                (Ok(Some(a)), Ok(Some(b))) => {
                    entry = Some((a - b) / (2.0 * h));
                    break;
                }
                (Err(e), _) | (_, Err(e)) if attempt == 1 => return Err(e),
                _ if attempt == 1 => return Ok(None),
                _ => {}
            }
        }
        match entry {
            Some(v) => grad[i] = v,
            None => return Ok(None),
        }
    }
    Ok(Some(grad))
}

/// Gradient of Delta(t, p) over the map parameters by central differences
/// with step 1e-6 max(1, |p_i|), each evaluation rebuilding the model.
pub fn grad_delta_p(map: &ParamMap, p: &[f64], t: f64) -> Result<DVector<f64>, OptimizeError> {
    let mut f = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let model = map.build(q)?;
        Ok(Some(functionals::delta(&model, t)?))
    };
    fd_gradient(&mut f, p)?.ok_or(OptimizeError::InvalidStart)
}

fn tau_result_at(
    map: &ParamMap,
    p: &[f64],
    epsilon: f64,
    t_cap: f64,
) -> Result<(OqhoModel, decoherence::DecoherenceResult), OptimizeError> {
    let model = map.build(p)?;
    let curve = DeltaCurve::new(&model)?;
    let result = decoherence::decoherence_time(&curve, epsilon, t_cap)?;
    drop(curve);
    Ok((model, result))
}

/// Gradient of the decoherence time over the map parameters:
/// -grad_p Delta(tau, p) / Delta'(tau). Errors at irregular levels.
pub fn grad_tau(
    map: &ParamMap,
    p: &[f64],
    epsilon: f64,
    t_cap: f64,
) -> Result<DVector<f64>, OptimizeError> {
    let (_, result) = tau_result_at(map, p, epsilon, t_cap)?;
    let tau = result.tau.finite().ok_or(OptimizeError::NoCrossing { epsilon })?;
    if !result.regular {
        return Err(OptimizeError::Irregular { epsilon });
    }
    let d1 = result.derivative_at_tau.expect("finite crossing carries a slope");
    let grad_delta = grad_delta_p(map, p, tau)?;
    Ok(grad_delta * (-1.0 / d1))
}

/// Hessian of the decoherence time over the map parameters:
/// -(1/Delta')(Delta'' g g^t + 2 S(g gdot^t) + hess_p Delta) at t = tau,
/// where g is the tau gradient and gdot the parameter gradient of Delta'.
/// The output is exactly symmetric.
pub fn hessian_tau(
    map: &ParamMap,
    p: &[f64],
    epsilon: f64,
    t_cap: f64,
) -> Result<RealMatrix, OptimizeError> {
    let (model, result) = tau_result_at(map, p, epsilon, t_cap)?;
    let tau = result.tau.finite().ok_or(OptimizeError::NoCrossing { epsilon })?;
    if !result.regular {
        return Err(OptimizeError::Irregular { epsilon });
    }
    let (_, d1, d2) = functionals::delta_jet(&model, tau)?;
    let g_tau = grad_delta_p(map, p, tau)? * (-1.0 / d1);
    let mut slope = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let m = map.build(q)?;
        Ok(Some(functionals::delta_derivatives(&m, tau)?.0))
    };
    let g_slope = fd_gradient(&mut slope, p)?.ok_or(OptimizeError::InvalidStart)?;
    let hess_delta = fd_hessian(
        &mut |q: &[f64]| {
            let m = map.build(q)?;
            Ok(functionals::delta(&m, tau)?)
        },
        p,
    )?;
    let r = p.len();
    let mut h = RealMatrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let value = d2 * g_tau[i] * g_tau[j]
                + g_tau[i] * g_slope[j]
                + g_tau[j] * g_slope[i]
                + hess_delta[(i, j)];
            let scaled = -value / d1;
            h[(i, j)] = scaled;
            h[(j, i)] = scaled;
        }
    }
    Ok(h)
}

/// Symmetric second-difference Hessian with steps 1e-3 max(1, |p_i|).
fn fd_hessian<F>(f: &mut F, p: &[f64]) -> Result<RealMatrix, OptimizeError>
where
    F: FnMut(&[f64]) -> Result<f64, OptimizeError>,
{
    let r = p.len();
    let mut h = RealMatrix::zeros(r, r);
    let center = f(p)?;
    let steps: Vec<f64> = p.iter().map(|&pi| HESS_STEP * pi.abs().max(1.0)).collect();
    let mut work = p.to_vec();
    for i in 0..r {
        work[i] = p[i] + steps[i];
        let plus = f(&work)?;
        work[i] = p[i] - steps[i];
        let minus = f(&work)?;
        work[i] = p[i];
        h[(i, i)] = (plus - 2.0 * center + minus) / (steps[i] * steps[i]);
    }
    for i in 0..r {
        for j in (i + 1)..r {
            let mut corner = |si: f64, sj: f64| -> Result<f64, OptimizeError> {
                work[i] = p[i] + si * steps[i];
                work[j] = p[j] + sj * steps[j];
                let v = f(&work);
                work[i] = p[i];
                work[j] = p[j];
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            let value = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = value;
            h[(j, i)] = value;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub initial_step: f64,
    /// Search cap handed to the decoherence solver.
    pub t_cap: f64,
    pub nm_max_steps: usize,
    /// Box bounds per coordinate; candidates are clamped into them.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            t_cap: 50.0,
            nm_max_steps: 200,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    TauMax,
    DeltaSupMin,
    DiscountedMin,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::TauMax => "tau-max",
            ObjectiveKind::DeltaSupMin => "delta-sup-min",
            ObjectiveKind::DiscountedMin => "discounted-min",
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub p: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
}

/// Outcome of the duality verification at a candidate maximizer.
#[derive(Debug, Clone)]
pub struct DualityRecord {
    pub t_star: f64,
    pub grad_norm: f64,
    pub hessian_min_eig: f64,
    pub stationary_ok: bool,
    pub convex_ok: bool,
    /// Set when the Hessian is numerically zero, as for an empty or
    /// all-zero direction set.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub objective: ObjectiveKind,
    pub p_init: Vec<f64>,
    pub p_final: Vec<f64>,
    pub trace: Vec<TracePoint>,
    pub converged: bool,
    pub used_fallback: bool,
    /// Final point sits on a box bound instead of an interior optimum.
    pub non_interior: bool,
    pub duality: Option<DualityRecord>,
}

fn clamp_to_bounds(p: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(bounds) = bounds {
        for (x, &(lo, hi)) in p.iter_mut().zip(bounds) {
            *x = x.clamp(lo, hi);
        }
    }
}

fn near_bound(p: &[f64], bounds: Option<&[(f64, f64)]>) -> bool {
    match bounds {
        None => false,
        Some(bounds) => p.iter().zip(bounds).any(|(&x, &(lo, hi))| {
            (x - lo).abs() <= 1e-9 * lo.abs().max(1.0) || (x - hi).abs() <= 1e-9 * hi.abs().max(1.0)
        }),
    }
}

fn check_bounds_shape(
    bounds: Option<&[(f64, f64)]>,
    r: usize,
) -> Result<(), OptimizeError> {
    if let Some(bounds) = bounds {
        if bounds.len() != r {
            return Err(OptimizeError::ParamShape {
                context: format!("{} bounds for {} parameters", bounds.len(), r),
            });
        }
        for &(lo, hi) in bounds {
            if !(lo <= hi) {
                return Err(OptimizeError::ParamShape {
                    context: format!("bound ({lo}, {hi}) is inverted"),
                });
            }
        }
    }
    Ok(())
}

struct CoreOutcome {
    p_final: Vec<f64>,
    trace: Vec<TracePoint>,
    converged: bool,
    used_fallback: bool,
    non_interior: bool,
}

/// Gradient ascent with Armijo backtracking: accepts p + a g when the
/// objective gains at least c a |g|^2, halving a from the fresh initial
/// step each iteration. Invalid candidates (None) are rejected by the line
/// search; an invalid gradient or a stalled search falls back to a bounded
/// derivative-free simplex round before giving up.
fn maximize_core<V, G>(
    value: &mut V,
    grad: &mut G,
    p_init: &[f64],
    settings: &OptimizerSettings,
) -> Result<CoreOutcome, OptimizeError>
where
    V: FnMut(&[f64]) -> Result<Option<f64>, OptimizeError>,
    G: FnMut(&[f64]) -> Result<Option<DVector<f64>>, OptimizeError>,
{
    check_bounds_shape(settings.bounds.as_deref(), p_init.len())?;
    let bounds = settings.bounds.as_deref();
    let mut p = p_init.to_vec();
    clamp_to_bounds(&mut p, bounds);
    let mut current = value(&p)?.ok_or(OptimizeError::InvalidStart)?;
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut converged = false;
    let mut used_fallback = false;
    let mut non_interior = false;
    let mut fallback_rounds = 0usize;

    let mut iter = 0usize;
    while iter < settings.max_iters {
        iter += 1;
        let g = match grad(&p)? {
            Some(g) => g,
            None => {
                if fallback_rounds < 2 {
                    fallback_rounds += 1;
                    used_fallback = true;
                    let (p_nm, v_nm) = simplex_maximize(value, &p, settings)?;
                    if v_nm > current {
                        p = p_nm;
                        current = v_nm;
                    }
                    continue;
                }
                break;
            }
        };
        let grad_norm = g.norm();
        trace.push(TracePoint { p: p.clone(), value: current, grad_norm });
        if grad_norm < settings.grad_tol {
            converged = true;
            break;
        }
        let mut alpha = settings.initial_step;
        let mut accepted = false;
        while alpha >= STEP_FLOOR {
            let mut candidate: Vec<f64> =
                p.iter().zip(g.iter()).map(|(&x, &gi)| x + alpha * gi).collect();
            clamp_to_bounds(&mut candidate, bounds);
            // Clamping can pin the candidate to the current point; accepting
            // it would spin the outer loop without progress, so the sufficient
            // increase test also demands strict improvement.
            if candidate != p {
                if let Some(v) = value(&candidate)? {
                    if v.is_finite()
                        && v > current
                        && v >= current + settings.armijo_c * alpha * grad_norm * grad_norm
                    {
                        p = candidate;
                        current = v;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= settings.shrink;
        }
        if !accepted {
            if near_bound(&p, bounds) {
                converged = true;
                non_interior = true;
            } else if fallback_rounds < 2 {
                fallback_rounds += 1;
                used_fallback = true;
                let (p_nm, v_nm) = simplex_maximize(value, &p, settings)?;
                if v_nm > current {
                    p = p_nm;
                    current = v_nm;
                    continue;
                }
            }
            break;
        }
    }
    if trace.last().map(|t| t.p != p).unwrap_or(true) {
        let grad_norm = match grad(&p) {
            Ok(Some(g)) => g.norm(),
            _ => f64::NAN,
        };
        trace.push(TracePoint { p: p.clone(), value: current, grad_norm });
    }
    Ok(CoreOutcome { p_final: p, trace, converged, used_fallback, non_interior })
}

/// Deterministic Nelder-Mead round maximizing the objective (implemented as
/// a minimizer of its negation; invalid points count as +infinity).
/// Reflection 1, expansion 2, contraction 1/2, shrink 1/2; the initial
/// simplex offsets each coordinate by 0.05 max(1, |p_i|).
fn simplex_maximize<V>(
    value: &mut V,
    start: &[f64],
    settings: &OptimizerSettings,
) -> Result<(Vec<f64>, f64), OptimizeError>
where
    V: FnMut(&[f64]) -> Result<Option<f64>, OptimizeError>,
{
    let bounds = settings.bounds.as_deref();
    let r = start.len();
    let mut eval = |q: &[f64]| -> Result<f64, OptimizeError> {
        Ok(match value(q)? {
            Some(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        })
    };
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(r + 1);
    points.push(start.to_vec());
    for i in 0..r {
        let mut q = start.to_vec();
        q[i] += SIMPLEX_SCALE * start[i].abs().max(1.0);
        clamp_to_bounds(&mut q, bounds);
        points.push(q);
    }
    let mut values: Vec<f64> = Vec::with_capacity(r + 1);
    for q in &points {
        values.push(eval(q)?);
    }
    for _ in 0..settings.nm_max_steps {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("no NaN objectives"));
        let best = order[0];
        let worst = *order.last().expect("simplex is non-empty");
        let spread = points
            .iter()
            .map(|q| {
                q.iter()
                    .zip(&points[best])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if spread <= 1e-10 {
            break;
        }
        let mut centroid = vec![0.0; r];
        for &idx in order.iter().take(points.len() - 1) {
            for (c, x) in centroid.iter_mut().zip(&points[idx]) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= r as f64;
        }
        let blend = |a: f64, from: &[f64], to: &[f64]| -> Vec<f64> {
            let mut q: Vec<f64> =
                from.iter().zip(to).map(|(&x, &y)| x + a * (y - x)).collect();
            clamp_to_bounds(&mut q, bounds);
            q
        };
        let reflected = blend(2.0, &points[worst], &centroid);
        let f_reflected = eval(&reflected)?;
        if f_reflected < values[best] {
            let expanded = blend(3.0, &points[worst], &centroid);
            let f_expanded = eval(&expanded)?;
            if f_expanded < f_reflected {
                points[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                points[worst] = reflected;
                values[worst] = f_reflected;
            }
            continue;
        }
        let second_worst = order[order.len() - 2];
        if f_reflected < values[second_worst] {
            points[worst] = reflected;
            values[worst] = f_reflected;
            continue;
        }
        let contracted = if f_reflected < values[worst] {
            blend(1.5, &points[worst], &centroid)
        } else {
            blend(0.5, &points[worst], &centroid)
        };
        let f_contracted = eval(&contracted)?;
        if f_contracted < values[worst].min(f_reflected) {
            points[worst] = contracted;
            values[worst] = f_contracted;
            continue;
        }
        let best_point = points[best].clone();
        for (idx, q) in points.iter_mut().enumerate() {
            if idx == best {
                continue;
            }
            for (x, b) in q.iter_mut().zip(&best_point) {
                *x = b + 0.5 * (*x - b);
            }
            values[idx] = eval(q)?;
        }
    }
    let mut best = 0;
    for i in 1..points.len() {
        if values[i] < values[best] {
            best = i;
        }
    }
    Ok((points[best].clone(), -values[best]))
}

/// Maximizes the decoherence time over the map parameters.
pub fn maximize_tau(
    map: &ParamMap,
    p_init: &[f64],
    epsilon: f64,
    settings: &OptimizerSettings,
) -> Result<OptimizationReport, OptimizeError> {
    let (_, start) = tau_result_at(map, p_init, epsilon, settings.t_cap)?;
    if start.tau.finite().is_none() {
        return Err(OptimizeError::NoCrossing { epsilon });
    }
    if !start.regular {
        return Err(OptimizeError::Irregular { epsilon });
    }
    let t_cap = settings.t_cap;
    let mut value = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let model = match map.build(q) {
            Ok(m) => m,
            Err(OptimizeError::Model(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let curve = DeltaCurve::new(&model)?;
        let result = decoherence::decoherence_time(&curve, epsilon, t_cap)?;
        Ok(match result.tau {
            TauOutcome::Reached(tau) => Some(tau),
            TauOutcome::NeverReached => None,
        })
    };
    let mut grad = |q: &[f64]| -> Result<Option<DVector<f64>>, OptimizeError> {
        match grad_tau(map, q, epsilon, t_cap) {
            Ok(g) => Ok(Some(g)),
            Err(OptimizeError::Irregular { .. }) | Err(OptimizeError::NoCrossing { .. }) => {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let core = maximize_core(&mut value, &mut grad, p_init, settings)?;
    Ok(OptimizationReport {
        objective: ObjectiveKind::TauMax,
        p_init: p_init.to_vec(),
        p_final: core.p_final,
        trace: core.trace,
        converged: core.converged,
        used_fallback: core.used_fallback,
        non_interior: core.non_interior,
        duality: None,
    })
}

fn minimize_with<V>(
    value: V,
    p_init: &[f64],
    settings: &OptimizerSettings,
    objective: ObjectiveKind,
) -> Result<OptimizationReport, OptimizeError>
where
    V: FnMut(&[f64]) -> Result<Option<f64>, OptimizeError>,
{
    let shared = RefCell::new(value);
    let mut negated_value = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let mut f = shared.borrow_mut();
        Ok(f(q)?.map(|v| -v))
    };
    let mut grad = |q: &[f64]| -> Result<Option<DVector<f64>>, OptimizeError> {
        let mut point = |x: &[f64]| -> Result<Option<f64>, OptimizeError> {
            let mut f = shared.borrow_mut();
            Ok(f(x)?.map(|v| -v))
        };
        fd_gradient(&mut point, q)
    };
    let core = maximize_core(&mut negated_value, &mut grad, p_init, settings)?;
    let trace = core
        .trace
        .into_iter()
        .map(|t| TracePoint { p: t.p, value: -t.value, grad_norm: t.grad_norm })
        .collect();
    Ok(OptimizationReport {
        objective,
        p_init: p_init.to_vec(),
        p_final: core.p_final,
        trace,
        converged: core.converged,
        used_fallback: core.used_fallback,
        non_interior: core.non_interior,
        duality: None,
    })
}

/// Minimizes the finite-horizon supremum of Delta over the map parameters.
pub fn minimize_delta_sup(
    map: &ParamMap,
    p_init: &[f64],
    horizon: f64,
    settings: &OptimizerSettings,
) -> Result<OptimizationReport, OptimizeError> {
    let start_model = map.build(p_init)?;
    functionals::delta_sup(&start_model, horizon)?;
    let value = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let model = match map.build(q) {
            Ok(m) => m,
            Err(OptimizeError::Model(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        Ok(Some(functionals::delta_sup(&model, horizon)?.0))
    };
    minimize_with(value, p_init, settings, ObjectiveKind::DeltaSupMin)
}

/// Minimizes the discounted deviation over the map parameters; iterates
/// with an inadmissible horizon are rejected by the line search.
pub fn minimize_discounted(
    map: &ParamMap,
    p_init: &[f64],
    horizon: f64,
    settings: &OptimizerSettings,
) -> Result<OptimizationReport, OptimizeError> {
    let start_model = map.build(p_init)?;
    discounted::discounted_delta_ale(&start_model, horizon)?;
    let value = |q: &[f64]| -> Result<Option<f64>, OptimizeError> {
        let model = match map.build(q) {
            Ok(m) => m,
            Err(OptimizeError::Model(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        match discounted::discounted_delta_ale(&model, horizon) {
            Ok(r) => Ok(Some(r.value)),
            Err(DiscountedError::InadmissibleHorizon { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    minimize_with(value, p_init, settings, ObjectiveKind::DiscountedMin)
}

/// Verifies the crossing-horizon duality at a candidate maximizer p_star of
/// the decoherence time: with T_star = tau(epsilon, p_star), the parameter
/// gradient of Delta(T_star, .) must vanish and its finite-difference
/// Hessian must be positive semi-definite up to tolerance.
pub fn verify_duality(
    map: &ParamMap,
    p_star: &[f64],
    epsilon: f64,
    t_cap: f64,
) -> Result<DualityRecord, OptimizeError> {
    let (model, result) = tau_result_at(map, p_star, epsilon, t_cap)?;
    let t_star = result.tau.finite().ok_or(OptimizeError::NoCrossing { epsilon })?;
    if !result.regular {
        return Err(OptimizeError::Irregular { epsilon });
    }
    let scale = functionals::delta_star(&model)?;
    let grad = grad_delta_p(map, p_star, t_star)?;
    let grad_norm = grad.norm();
    let hessian = fd_hessian(
        &mut |q: &[f64]| {
            let m = map.build(q)?;
            Ok(functionals::delta(&m, t_star)?)
        },
        p_star,
    )?;
    let r = p_star.len();
    let (min_eig, max_abs_eig) = if r == 0 {
        (0.0, 0.0)
    } else {
        let eigs = hessian.symmetric_eigenvalues();
        (
            eigs.iter().cloned().fold(f64::INFINITY, f64::min),
            eigs.iter().map(|e| e.abs()).fold(0.0f64, f64::max),
        )
    };
    Ok(DualityRecord {
        t_star,
        grad_norm,
        hessian_min_eig: min_eig,
        stationary_ok: grad_norm <= DUALITY_GRAD_TOL * scale,
        convex_ok: min_eig >= -DUALITY_EIG_TOL * scale,
        degenerate: max_abs_eig <= DUALITY_DEGENERATE_TOL * scale,
    })
}
