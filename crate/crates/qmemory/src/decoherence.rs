//! Memory decoherence times: the first time a deviation functional reaches a
//! given fraction of its reference scale. The solver works against a scalar
//! curve abstraction so the oscillator and finite-level functionals share the
//! same first-crossing search, regularity classification, fidelity-level
//! derivatives and short-horizon approximation.

use thiserror::Error;

use crate::functionals::{self, FunctionalError};
use crate::models::{FiniteLevelModel, Lindbladian, OqhoModel};

/// Relative width at which bisection stops.
const BISECT_REL_TOL: f64 = 1e-12;
/// Hard cap on bisection iterations.
const BISECT_MAX_ITERS: usize = 200;
/// Geometric growth factor of the first-crossing march.
const MARCH_FACTOR: f64 = 1.5;
/// The march may never skip an interval longer than t_cap over this divisor.
const MARCH_CAP_DIVISOR: f64 = 1024.0;
/// Default regularity threshold is this multiple of scale/tau.
const REGULARITY_FACTOR: f64 = 1e-8;
/// Below this multiple of scale/tau the second derivative report is
/// flagged low-confidence (the cubic denominator amplifies noise).
const LOW_CONFIDENCE_FACTOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DecoherenceError {
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error("fidelity level must be positive and finite, got {got}")]
    InvalidEpsilon { got: f64 },
    #[error("search cap must be positive and finite, got {got}")]
    InvalidCap { got: f64 },
    #[error("curve scale must be positive and finite, got {got}")]
    DegenerateScale { got: f64 },
    #[error(
        "fidelity level {epsilon} is irregular (curve slope {derivative:.3e} at the crossing); \
         level derivatives are undefined there"
    )]
    Irregular { epsilon: f64, derivative: f64 },
    #[error("no crossing was found, so crossing-point quantities are unavailable")]
    NeverReached,
    #[error("short-horizon approximation needs a positive initial slope, got {got:.3e}")]
    ShortHorizonUnavailable { got: f64 },
}

/// Value and first two derivatives of a scalar curve at one time.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// A nonnegative scalar deviation curve with value 0 at t = 0 and a positive
/// reference scale; crossings are sought at value = epsilon * scale.
pub trait ScalarCurve {
    fn eval(&self, t: f64) -> Result<CurvePoint, DecoherenceError>;
    fn scale(&self) -> f64;
}

/// The oscillator deviation as a scalar curve, normalized by Delta_*.
pub struct DeltaCurve<'a> {
    model: &'a OqhoModel,
    scale: f64,
}

impl<'a> DeltaCurve<'a> {
    pub fn new(model: &'a OqhoModel) -> Result<Self, DecoherenceError> {
        let scale = functionals::delta_star(model)?;
        Ok(Self { model, scale })
    }

    pub fn model(&self) -> &'a OqhoModel {
        self.model
    }
}

impl ScalarCurve for DeltaCurve<'_> {
    fn eval(&self, t: f64) -> Result<CurvePoint, DecoherenceError> {
        let (value, d1, d2) = functionals::delta_jet(self.model, t)?;
        Ok(CurvePoint { value, d1, d2 })
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}

/// The finite-level deviation as a scalar curve, normalized by Gamma_*.
pub struct GammaCurve<'a> {
    model: &'a FiniteLevelModel,
    lind: &'a Lindbladian,
    scale: f64,
}

impl<'a> GammaCurve<'a> {
    pub fn new(model: &'a FiniteLevelModel, lind: &'a Lindbladian) -> Self {
        let scale = functionals::gamma_star(model);
        Self { model, lind, scale }
    }
}

impl ScalarCurve for GammaCurve<'_> {
    fn eval(&self, t: f64) -> Result<CurvePoint, DecoherenceError> {
        let (value, d1, d2) = functionals::gamma_jet(self.model, self.lind, t)?;
        Ok(CurvePoint { value, d1, d2 })
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}

/// Outcome of the first-crossing search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauOutcome {
    Reached(f64),
    NeverReached,
}

impl TauOutcome {
    pub fn finite(&self) -> Option<f64> {
        match self {
            TauOutcome::Reached(t) => Some(*t),
            TauOutcome::NeverReached => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoherenceResult {
    pub epsilon: f64,
    pub tau: TauOutcome,
    /// Curve slope at the crossing; None when the crossing was never reached.
    pub derivative_at_tau: Option<f64>,
    pub regular: bool,
    /// d tau / d epsilon, withheld at irregular levels.
    pub tau_prime: Option<f64>,
    /// d^2 tau / d epsilon^2, withheld at irregular levels.
    pub tau_double_prime: Option<f64>,
    /// The second derivative rests on a cubed slope; near-flat crossings
    /// make it unreliable and set this flag.
    pub low_confidence_second: bool,
    pub bisection_iterations: usize,
    /// Horizon the search was capped at.
    pub t_cap: f64,
}

fn check_search_inputs<C: ScalarCurve + ?Sized>(
    curve: &C,
    epsilon: f64,
    t_cap: f64,
) -> Result<f64, DecoherenceError> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(DecoherenceError::InvalidEpsilon { got: epsilon });
    }
    if !t_cap.is_finite() || t_cap <= 0.0 {
        return Err(DecoherenceError::InvalidCap { got: t_cap });
    }
    let scale = curve.scale();
    if !scale.is_finite() || scale <= 0.0 {
        return Err(DecoherenceError::DegenerateScale { got: scale });
    }
    Ok(scale)
}

/// First time the curve reaches epsilon * scale within [0, t_cap].
///
/// The search marches from zero with geometrically growing steps (factor
/// 1.5), capped so that no interval longer than t_cap/1024 goes unsampled,
/// then bisects the bracketing interval down to relative width 1e-12. The
/// bisection keeps every point with value >= target on the upper side, so it
/// converges to the infimum of the crossing set: the FIRST crossing, also on
/// curves that touch the threshold along a plateau.
pub fn decoherence_time<C: ScalarCurve + ?Sized>(
    curve: &C,
    epsilon: f64,
    t_cap: f64,
) -> Result<DecoherenceResult, DecoherenceError> {
    decoherence_time_with_start(curve, epsilon, t_cap, 0.0)
}

/// Same search, started from t_start instead of zero. The caller must know
/// that the curve stays below the target on [0, t_start]; sweeps over
/// increasing fidelity levels use this to resume where the previous level
/// crossed, which is sound because tau is nondecreasing in epsilon.
pub(crate) fn decoherence_time_with_start<C: ScalarCurve + ?Sized>(
    curve: &C,
    epsilon: f64,
    t_cap: f64,
    t_start: f64,
) -> Result<DecoherenceResult, DecoherenceError> {
    let scale = check_search_inputs(curve, epsilon, t_cap)?;
    let target = epsilon * scale;

    let max_step = t_cap / MARCH_CAP_DIVISOR;
    let mut lo = t_start.max(0.0).min(t_cap);
    let start = curve.eval(lo)?;
    if start.value >= target {
        // Already at or past the target at the starting point. With
        // t_start = 0 this can only happen for target <= 0, excluded by the
        // input checks; for warm starts it pins tau at the start point.
        return Ok(finish_crossing(curve, epsilon, scale, lo, 0, t_cap)?);
    }

    let mut step = (max_step * 1e-6).max(1e-300);
    let mut hi = lo;
    let mut crossed = false;
    while hi < t_cap {
        let t_next = (hi + step).min(t_cap);
        let point = curve.eval(t_next)?;
        if point.value >= target {
            lo = hi;
            hi = t_next;
            crossed = true;
            break;
        }
        hi = t_next;
        step = (step * MARCH_FACTOR).min(max_step);
    }
    if !crossed {
        return Ok(DecoherenceResult {
            epsilon,
            tau: TauOutcome::NeverReached,
            derivative_at_tau: None,
            regular: false,
            tau_prime: None,
            tau_double_prime: None,
            low_confidence_second: false,
            bisection_iterations: 0,
            t_cap,
        });
    }

    let mut iterations = 0usize;
    while (hi - lo) > BISECT_REL_TOL * hi.max(f64::MIN_POSITIVE) && iterations < BISECT_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let point = curve.eval(mid)?;
        if point.value >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    finish_crossing(curve, epsilon, scale, hi, iterations, t_cap)
}

fn finish_crossing<C: ScalarCurve + ?Sized>(
    curve: &C,
    epsilon: f64,
    scale: f64,
    tau: f64,
    iterations: usize,
    t_cap: f64,
) -> Result<DecoherenceResult, DecoherenceError> {
    let at_tau = curve.eval(tau)?;
    let d1 = at_tau.d1;
    let theta_reg = default_regularity_threshold(scale, tau);
    let regular = d1 > theta_reg;
    let low_confidence = regular && d1 < LOW_CONFIDENCE_FACTOR * scale / tau.max(f64::MIN_POSITIVE);
    let (tau_prime, tau_double_prime) = if regular {
        (Some(scale / d1), Some(-scale * scale * at_tau.d2 / (d1 * d1 * d1)))
    } else {
        (None, None)
    };
    Ok(DecoherenceResult {
        epsilon,
        tau: TauOutcome::Reached(tau),
        derivative_at_tau: Some(d1),
        regular,
        tau_prime,
        tau_double_prime,
        low_confidence_second: low_confidence,
        bisection_iterations: iterations,
        t_cap,
    })
}

fn default_regularity_threshold(scale: f64, tau: f64) -> f64 {
    REGULARITY_FACTOR * scale / tau.max(f64::MIN_POSITIVE)
}

/// Whether the crossing slope clears the given positivity threshold. A
/// result without a finite crossing is never regular.
pub fn classify_regularity(result: &DecoherenceResult, theta_reg: f64) -> bool {
    match (result.tau.finite(), result.derivative_at_tau) {
        (Some(_), Some(d1)) => d1 > theta_reg,
        _ => false,
    }
}

/// Fidelity-level derivatives at a computed crossing:
/// tau' = scale / slope and tau'' = -scale^2 * curvature / slope^3.
/// Errors at irregular levels, where these are undefined.
pub fn tau_eps_derivatives<C: ScalarCurve + ?Sized>(
    curve: &C,
    result: &DecoherenceResult,
) -> Result<(f64, f64), DecoherenceError> {
    let tau = result.tau.finite().ok_or(DecoherenceError::NeverReached)?;
    let point = curve.eval(tau)?;
    let scale = curve.scale();
    if !result.regular || point.d1 <= default_regularity_threshold(scale, tau) {
        return Err(DecoherenceError::Irregular {
            epsilon: result.epsilon,
            derivative: point.d1,
        });
    }
    let tau_prime = scale / point.d1;
    let tau_double_prime = -scale * scale * point.d2 / (point.d1 * point.d1 * point.d1);
    Ok((tau_prime, tau_double_prime))
}

/// Quadratic short-horizon approximation
/// tau_hat(eps) = tau'(0) eps + tau''(0) eps^2 / 2, built from the curve's
/// derivatives at t = 0: tau'(0) = scale/v'(0), tau''(0) = -scale^2
/// v''(0)/v'(0)^3. Needs a strictly positive initial slope.
pub fn tau_short_horizon<C: ScalarCurve + ?Sized>(
    curve: &C,
    epsilon: f64,
) -> Result<f64, DecoherenceError> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(DecoherenceError::InvalidEpsilon { got: epsilon });
    }
    let at_zero = curve.eval(0.0)?;
    if at_zero.d1 <= 0.0 {
        return Err(DecoherenceError::ShortHorizonUnavailable { got: at_zero.d1 });
    }
    let scale = curve.scale();
    let tau_prime0 = scale / at_zero.d1;
    let tau_double_prime0 = -scale * scale * at_zero.d2 / (at_zero.d1 * at_zero.d1 * at_zero.d1);
    Ok(tau_prime0 * epsilon + 0.5 * tau_double_prime0 * epsilon * epsilon)
}
