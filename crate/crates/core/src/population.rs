//! Population-level EM as a recursion on `(alpha, nu)`, together with the
//! closed-form envelopes that bound it.
//!
//! With zero ground truth, one EM update sends `theta/sigma = alpha * u` to
//! `m(alpha, nu) * u` and `beta = tanh(nu)` to `n(alpha, nu)`, so the direction
//! `u` never changes and the whole run is two-dimensional.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expectations::{validate_state, Expectations};

/// Clamp applied to `beta` before recovering `nu = atanh(beta)`.
pub const BETA_CLAMP: f64 = 1.0 - 1e-15;

/// Stand-in for `alpha0 = infinity` in worst-case initialization runs.
pub const ALPHA_INFINITY_PROXY: f64 = 50.0;

/// Upper end (exclusive) of the initial `alpha` window of the sublinear bounds.
pub const SUBLINEAR_ALPHA_LIMIT: f64 = 0.31;

/// Threshold below which the linear contraction bound applies.
pub const CONTRACTION_ALPHA_LIMIT: f64 = 0.1;

/// Convergence test and step cap for the `beta_infinity` estimate.
pub const BETA_INF_TOL: f64 = 1e-12;
pub const BETA_INF_MAX_STEPS: usize = 100_000;

pub fn nu_from_beta(beta: f64) -> f64 {
    beta.clamp(-BETA_CLAMP, BETA_CLAMP).atanh()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationState {
    pub t: usize,
    pub alpha: f64,
    pub nu: f64,
    /// Unit direction of `theta`; carried unchanged by every update.
    pub direction: Option<Vec<f64>>,
}

impl PopulationState {
    pub fn new(alpha: f64, nu: f64) -> Result<Self> {
        validate_state(alpha, nu)?;
        Ok(Self {
            t: 0,
            alpha,
            nu,
            direction: None,
        })
    }

    pub fn from_beta(alpha: f64, beta: f64) -> Result<Self> {
        if !(beta.abs() < 1.0) {
            return Err(Error::domain(format!("|beta| must be < 1, got {beta}")));
        }
        Self::new(alpha, beta.atanh())
    }

    /// State for `theta / sigma` given as a vector.
    pub fn from_theta(theta_over_sigma: &[f64], nu: f64) -> Result<Self> {
        let alpha = theta_over_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut state = Self::new(alpha, nu)?;
        if alpha > 0.0 {
            state.direction = Some(theta_over_sigma.iter().map(|v| v / alpha).collect());
        }
        Ok(state)
    }

    pub fn beta(&self) -> f64 {
        self.nu.tanh()
    }

    /// `theta / sigma`, when a direction is attached.
    pub fn theta(&self) -> Option<Vec<f64>> {
        self.direction
            .as_ref()
            .map(|u| u.iter().map(|v| v * self.alpha).collect())
    }
}

pub fn population_step(state: &PopulationState, engine: &Expectations) -> Result<PopulationState> {
    validate_state(state.alpha, state.nu)?;
    let alpha = engine.m(state.alpha, state.nu)?;
    let beta = engine.n(state.alpha, state.nu)?;
    Ok(PopulationState {
        t: state.t + 1,
        alpha,
        nu: nu_from_beta(beta),
        direction: state.direction.clone(),
    })
}

/// Closed-form predictions and bounds attached to one step of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEnvelope {
    pub sublinear_upper: Option<f64>,
    /// Balanced runs only.
    pub sublinear_lower: Option<f64>,
    /// Bound on `alpha^{t+1}` from the contraction factor; unbalanced runs
    /// with `alpha^t < 0.1` only.
    pub contraction_upper: Option<f64>,
    pub dynamic_alpha_pred: f64,
    pub dynamic_beta_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub envelope: BoundEnvelope,
    /// `alpha^{t+1} / (alpha^t (1 - beta^2))`; NaN on the last record.
    pub ratio_alpha: f64,
    /// `(beta^{t+1} - beta^t) / beta^t`; NaN on the last record or when `beta^t = 0`.
    pub ratio_beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstPassage {
    pub below_031: Option<usize>,
    pub below_01: Option<usize>,
    pub below_epsilon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub alpha0: f64,
    pub nu0: f64,
    pub epsilon: f64,
    /// Limit of `beta` used by the contraction envelope (unbalanced runs).
    pub beta_infinity: Option<f64>,
    pub records: Vec<TrajectoryRecord>,
    pub first_passage: FirstPassage,
    pub direction: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn alphas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.alpha).collect()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.beta).collect()
    }

    /// First `t` with `alpha^t < threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.alpha < threshold).map(|r| r.t)
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "t",
        "alpha",
        "beta",
        "sub_upper",
        "sub_lower",
        "contract_bound",
        "dyn_alpha_pred",
        "dyn_beta_pred",
        "ratio_alpha",
        "ratio_beta",
    ];

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        let nan = |o: Option<f64>| o.unwrap_or(f64::NAN);
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.t as f64,
                    r.alpha,
                    r.beta,
                    nan(r.envelope.sublinear_upper),
                    nan(r.envelope.sublinear_lower),
                    nan(r.envelope.contraction_upper),
                    r.envelope.dynamic_alpha_pred,
                    r.envelope.dynamic_beta_pred,
                    r.ratio_alpha,
                    r.ratio_beta,
                ]
            })
            .collect()
    }
}

/// Iterate `steps` times from `(alpha0, nu0)`. Records `steps + 1` states.
///
/// `epsilon` only sets the third first-passage threshold. For unbalanced starts
/// the limit `beta_infinity` is estimated first so the contraction envelope can
/// be attached.
pub fn run_population(engine: &Expectations, alpha0: f64, nu0: f64, steps: usize, epsilon: f64) -> Result<Trajectory> {
    run_population_from(engine, PopulationState::new(alpha0, nu0)?, steps, epsilon)
}

pub fn run_population_from(
    engine: &Expectations,
    start: PopulationState,
    steps: usize,
    epsilon: f64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::domain("population run needs at least one step"));
    }
    let beta0 = start.beta();
    let beta_infinity = if beta0 != 0.0 {
        Some(estimate_beta_infinity(engine, start.alpha, start.nu)?.beta_infinity)
    } else {
        None
    };
    let mut states = Vec::with_capacity(steps + 1);
    states.push(start);
    for _ in 0..steps {
        let next = population_step(states.last().unwrap(), engine)?;
        states.push(next);
    }

    let alpha0 = states[0].alpha;
    let sublinear = (alpha0 > 0.0 && alpha0 < SUBLINEAR_ALPHA_LIMIT).then_some(alpha0);
    let factor = beta_infinity.map(contraction_factor);
    let mut records = Vec::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        let (alpha, beta) = (s.alpha, s.beta());
        let next = states.get(i + 1);
        let alpha_next = next.map_or(f64::NAN, |n| n.alpha);
        let (dynamic_alpha_pred, dynamic_beta_pred) = dynamic_approx(alpha, beta, alpha_next);
        let bounds = sublinear.map(|a0| sublinear_bounds_unchecked(a0, i));
        let envelope = BoundEnvelope {
            sublinear_upper: bounds.map(|b| b.1),
            sublinear_lower: if beta0 == 0.0 { bounds.map(|b| b.0) } else { None },
            contraction_upper: factor.filter(|_| alpha < CONTRACTION_ALPHA_LIMIT).map(|f| f * alpha),
            dynamic_alpha_pred,
            dynamic_beta_pred,
        };
        let (ratio_alpha, ratio_beta) = match next {
            Some(n) => (
                n.alpha / (alpha * (1.0 - beta * beta)),
                if beta != 0.0 {
                    (n.beta() - beta) / beta
                } else {
                    f64::NAN
                },
            ),
            None => (f64::NAN, f64::NAN),
        };
        records.push(TrajectoryRecord {
            t: s.t,
            alpha,
            beta,
            envelope,
            ratio_alpha,
            ratio_beta,
        });
    }
    let first = |thr: f64| records.iter().find(|r| r.alpha < thr).map(|r| r.t);
    let first_passage = FirstPassage {
        below_031: first(SUBLINEAR_ALPHA_LIMIT),
        below_01: first(CONTRACTION_ALPHA_LIMIT),
        below_epsilon: records.iter().find(|r| r.alpha <= epsilon).map(|r| r.t),
    };
    Ok(Trajectory {
        alpha0,
        nu0: states[0].nu,
        epsilon,
        beta_infinity,
        first_passage,
        direction: states[0].direction.clone(),
        records,
    })
}

fn check_sublinear_alpha0(alpha0: f64) -> Result<()> {
    if alpha0 > 0.0 && alpha0 < SUBLINEAR_ALPHA_LIMIT {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "sublinear bounds need alpha0 in (0, {SUBLINEAR_ALPHA_LIMIT}), got {alpha0}"
        )))
    }
}

/// `(lower, upper)` envelope for balanced runs started at `alpha0`:
///
/// ```text
/// upper = 1 / (sqrt(6t + (8 + 1/alpha0)^2) - 8)
/// lower = 1 / sqrt(6t + 22 ln(1.2t + 1) + alpha0^-2)
/// ```
///
/// The upper bound also holds for unbalanced starts.
pub fn sublinear_bounds(alpha0: f64, t: usize) -> Result<(f64, f64)> {
    check_sublinear_alpha0(alpha0)?;
    Ok(sublinear_bounds_unchecked(alpha0, t))
}

fn sublinear_bounds_unchecked(alpha0: f64, t: usize) -> (f64, f64) {
    let t = t as f64;
    let inv = 1.0 / alpha0;
    let upper = 1.0 / ((6.0 * t + (8.0 + inv).powi(2)).sqrt() - 8.0);
    let lower = 1.0 / (6.0 * t + 22.0 * (1.2 * t + 1.0).ln() + inv * inv).sqrt();
    (lower, upper)
}

/// Refined upper envelope written with the Lambert W function; diagnostic
/// only, for `alpha0 in (0, 0.13]`.
pub fn lambert_upper_bound(alpha0: f64, t: usize) -> Result<f64> {
    if !(alpha0 > 0.0 && alpha0 <= 0.13) {
        return Err(Error::domain(format!(
            "refined upper bound needs alpha0 in (0, 0.13], got {alpha0}"
        )));
    }
    let t = t as f64;
    let a2 = alpha0 * alpha0;
    let inner = 6.0 * a2 * t - 10.0 * a2 * (10.0 * a2).ln() + 1.0;
    Ok(1.0 / (6.0 * t + 1.0 / a2 - 10.0 * inner.ln()).sqrt())
}

/// First-order predictions of one step:
/// `alpha' ~ alpha (1 - beta^2)`, `beta' ~ beta (1 - alpha alpha')`.
pub fn dynamic_approx(alpha: f64, beta: f64, alpha_next: f64) -> (f64, f64) {
    let alpha_pred = alpha * (1.0 - beta * beta);
    let beta_pred = if alpha == 0.0 {
        beta
    } else {
        beta * (1.0 - alpha * alpha_next)
    };
    (alpha_pred, beta_pred)
}

/// Uniform contraction factor `1 - (4/5) beta_inf^2`.
pub fn contraction_factor(beta_infinity: f64) -> f64 {
    1.0 - 0.8 * beta_infinity * beta_infinity
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaInfinity {
    pub beta_infinity: f64,
    pub steps: usize,
    pub last_change: f64,
}

/// Iterate until `|beta^{t+1} - beta^t| < 1e-12`, returning the last `beta`.
pub fn estimate_beta_infinity(engine: &Expectations, alpha0: f64, nu0: f64) -> Result<BetaInfinity> {
    let mut state = PopulationState::new(alpha0, nu0)?;
    let mut last_change = f64::INFINITY;
    for step in 1..=BETA_INF_MAX_STEPS {
        let beta = state.beta();
        state = population_step(&state, engine)?;
        last_change = (state.beta() - beta).abs();
        if last_change < BETA_INF_TOL {
            return Ok(BetaInfinity {
                beta_infinity: state.beta(),
                steps: step,
                last_change,
            });
        }
    }
    Err(Error::NoBetaConvergence {
        steps: BETA_INF_MAX_STEPS,
        last_change,
    })
}

/// `(lower, upper)` sandwich on `|beta_inf|`:
/// `|beta0| exp(-alpha0^2 / (300 beta0^20)) <= |beta_inf| <= |beta0| exp(-alpha0^2 / 4)`.
/// Stated for `alpha0 < 0.1`, `|beta0| < sqrt(2/5)`; `alpha0 = 0.1` is
/// admitted as the closed endpoint.
pub fn beta_infinity_sandwich(alpha0: f64, beta0: f64) -> Option<(f64, f64)> {
    let b = beta0.abs();
    if !(0.0..=CONTRACTION_ALPHA_LIMIT).contains(&alpha0) || !(b > 0.0 && b < 0.4f64.sqrt()) {
        return None;
    }
    let a2 = alpha0 * alpha0;
    Some((b * (-a2 / (300.0 * b.powi(20))).exp(), b * (-a2 / 4.0).exp()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub beta0: f64,
    pub beta_infinity: f64,
    pub factor_bound: f64,
    /// `(t, alpha^{t+1} / alpha^t)` for every step with `alpha^t < 0.1`.
    pub ratios: Vec<(usize, f64)>,
    /// `min(bound - ratio)`; negative means a violation.
    pub worst_margin: f64,
    pub sandwich: Option<(f64, f64)>,
    pub sandwich_holds: Option<bool>,
}

/// Check the contraction factor along `trajectory`, estimating `beta_inf` by
/// continuing the recursion until `beta` settles.
pub fn contraction_report(engine: &Expectations, trajectory: &Trajectory) -> Result<ContractionReport> {
    let beta0 = trajectory.nu0.tanh();
    let beta_infinity = if beta0 == 0.0 {
        0.0
    } else {
        match trajectory.beta_infinity {
            Some(b) => b,
            None => estimate_beta_infinity(engine, trajectory.alpha0, trajectory.nu0)?.beta_infinity,
        }
    };
    let factor_bound = contraction_factor(beta_infinity);
    let ratios: Vec<(usize, f64)> = trajectory
        .records
        .windows(2)
        .filter(|w| w[0].alpha < CONTRACTION_ALPHA_LIMIT && w[0].alpha > 0.0)
        .map(|w| (w[0].t, w[1].alpha / w[0].alpha))
        .collect();
    let worst_margin = ratios
        .iter()
        .map(|&(_, r)| factor_bound - r)
        .fold(f64::INFINITY, f64::min);
    let sandwich = beta_infinity_sandwich(trajectory.alpha0, beta0);
    let sandwich_holds = sandwich.map(|(lo, hi)| lo <= beta_infinity.abs() && beta_infinity.abs() <= hi);
    Ok(ContractionReport {
        beta0,
        beta_infinity,
        factor_bound,
        ratios,
        worst_margin,
        sandwich,
        sandwich_holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationCount {
    pub observed: usize,
    pub budget: usize,
    /// Steps until `alpha < 0.1`.
    pub t0: usize,
    pub beta_infinity: f64,
}

impl IterationCount {
    pub fn within_budget(&self) -> bool {
        self.observed <= self.budget
    }
}

/// Observed number of steps to reach `alpha <= epsilon`, and the explicit
/// budget from the convergence proof.
///
/// The budget counts the initialization phase `T0` (first `t` with
/// `alpha^t < 0.1`) and adds, from `alpha' = alpha^{T0}`:
/// balanced, `ceil((eps^-2 + 16/eps - alpha'^-2 - 16/alpha') / 6)`;
/// unbalanced, `ceil((ln(1/eps) - ln 10) / -ln(1 - 0.8 beta_inf^2))`.
pub fn iteration_count(
    engine: &Expectations,
    alpha0: f64,
    nu0: f64,
    epsilon: f64,
    max_steps: usize,
) -> Result<IterationCount> {
    if !(epsilon > 0.0 && epsilon <= std::f64::consts::FRAC_2_PI) {
        return Err(Error::domain(format!("epsilon must lie in (0, 2/pi], got {epsilon}")));
    }
    let mut state = PopulationState::new(alpha0, nu0)?;
    let beta0 = state.beta();
    let mut t0 = None;
    let mut observed = None;
    let mut alpha_t0 = f64::NAN;
    for t in 0..=max_steps {
        if t0.is_none() && state.alpha < CONTRACTION_ALPHA_LIMIT {
            t0 = Some(t);
            alpha_t0 = state.alpha;
        }
        if observed.is_none() && state.alpha <= epsilon {
            observed = Some(t);
        }
        if t0.is_some() && observed.is_some() {
            break;
        }
        if t < max_steps {
            state = population_step(&state, engine)?;
        }
    }
    let (Some(t0), Some(observed)) = (t0, observed) else {
        return Err(Error::domain(format!(
            "alpha did not reach {epsilon} within {max_steps} steps"
        )));
    };
    let beta_infinity = if beta0 == 0.0 {
        0.0
    } else {
        estimate_beta_infinity(engine, alpha0, nu0)?.beta_infinity
    };
    let extra = if alpha_t0 <= epsilon {
        0.0
    } else if beta0 == 0.0 {
        let e = 1.0 / epsilon;
        let a = 1.0 / alpha_t0;
        ((e * e + 16.0 * e - a * a - 16.0 * a) / 6.0).ceil()
    } else {
        ((1.0 / epsilon).ln() - 10f64.ln()) / -contraction_factor(beta_infinity).ln()
    }
    .ceil()
    .max(0.0);
    Ok(IterationCount {
        observed,
        budget: t0 + extra as usize,
        t0,
        beta_infinity,
    })
}
