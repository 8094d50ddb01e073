//! Population EM at small but nonzero SNR `eta = ||theta*|| / sigma`.
//!
//! The state gains the cosine `rho` between `theta` and `theta*`. Writing
//! `Z2 = <x, u>` along `theta`, `Z3` along the orthogonal part of `theta*`,
//! `q = rho Z2 + sqrt(1 - rho^2) Z3` and `w = Z1 + s eta q` for the
//! normalized response, the exact update is
//!
//! ```text
//! T   = tanh(alpha Z2 w + nu)
//! A1  = E[T w Z2],  A2 = E[T w Z3]
//! alpha' = sqrt(A1^2 + A2^2),  beta' = E[T],  rho' = (rho A1 + sqrt(1 - rho^2) A2) / alpha'
//! ```
//!
//! The first-order terms in `eta` are `d A1 = beta* rho l`, `d A2 = beta*
//! sqrt(1 - rho^2) J` and `d beta' = beta* rho m`, all one-dimensional
//! expectations over `X = Z1 Z2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expectations::{validate_state, Expectations};
use crate::finite::StreamId;
use crate::population::nu_from_beta;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowSnrState {
    pub alpha: f64,
    pub nu: f64,
    pub rho: f64,
    pub eta: f64,
    /// `pi*(1) - pi*(2)`.
    pub beta_star: f64,
}

impl LowSnrState {
    pub fn new(alpha: f64, beta: f64, rho: f64, eta: f64, beta_star: f64) -> Result<Self> {
        if !(beta.abs() < 1.0) {
            return Err(Error::domain(format!("|beta| must be < 1, got {beta}")));
        }
        let s = Self {
            alpha,
            nu: beta.atanh(),
            rho,
            eta,
            beta_star,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        validate_state(self.alpha, self.nu)?;
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::domain(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::domain(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.beta_star.abs() < 1.0) {
            return Err(Error::domain(format!("|beta*| must be < 1, got {}", self.beta_star)));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.nu.tanh()
    }

    /// `(C_eta, C'_eta) = (alpha (1 - beta^2) / |beta beta*|, sqrt(1 - beta^2))`.
    pub fn validity_constants(&self) -> (f64, f64) {
        let b = self.beta();
        let s = 1.0 - b * b;
        let denom = (b * self.beta_star).abs();
        let c = if denom == 0.0 {
            f64::INFINITY
        } else {
            self.alpha * s / denom
        };
        (c, s.sqrt())
    }

    fn with(&self, alpha: f64, beta: f64, rho: f64) -> Self {
        Self {
            alpha,
            nu: nu_from_beta(beta),
            rho: rho.clamp(-1.0, 1.0),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowSnrStep {
    pub state: LowSnrState,
    pub c_eta: f64,
    pub c_eta_prime: f64,
    /// Set when `eta > 0.5 min(C_eta, C'_eta)`.
    pub warning: Option<String>,
}

/// First-order update in `eta`, with moments from `engine`.
pub fn lowsnr_step_perturbative(state: &LowSnrState, engine: &Expectations) -> Result<LowSnrStep> {
    state.validate()?;
    let LowSnrState {
        alpha,
        nu,
        rho,
        eta,
        beta_star,
    } = *state;
    let (c_eta, c_eta_prime) = state.validity_constants();
    let limit = 0.5 * c_eta.min(c_eta_prime);
    let warning = (eta > limit).then(|| {
        format!(
            "eta = {eta} exceeds half the validity constant min(C_eta, C'_eta) = {:.4e}",
            2.0 * limit
        )
    });
    let m = engine.m(alpha, nu)?;
    let n = engine.n(alpha, nu)?;
    let drive = eta * beta_star * rho;
    let (alpha_next, rho_next) = if alpha == 0.0 {
        // No direction to update; rho is carried.
        (0.0, rho)
    } else {
        let l = engine.l(alpha, nu)?;
        let j = engine.j(alpha, nu)?;
        (m + drive * l, rho + (1.0 - rho * rho) * eta * beta_star * j / m)
    };
    Ok(LowSnrStep {
        state: state.with(alpha_next, n + drive * m, rho_next),
        c_eta,
        c_eta_prime,
        warning,
    })
}

/// Closed-form truncation of the perturbative update for `alpha < 1/4`.
pub fn lowsnr_step_dynamic(state: &LowSnrState) -> Result<LowSnrState> {
    state.validate()?;
    let LowSnrState {
        alpha,
        rho,
        eta,
        beta_star,
        ..
    } = *state;
    if alpha >= 0.25 {
        return Err(Error::domain(format!(
            "dynamic equations need alpha < 1/4, got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Err(Error::domain(
            "the rho update divides by alpha; carry rho unchanged at alpha = 0",
        ));
    }
    let b = state.beta();
    let a2 = alpha * alpha;
    let s = 1.0 - b * b;
    let drive = eta * beta_star;
    let alpha_next = alpha * s + drive * rho * b * (1.0 - 9.0 * a2 * s);
    let beta_next = b * (1.0 - a2 * s) + drive * rho * alpha * s;
    let rho_next = rho + (1.0 - rho * rho) * drive * b * (1.0 - 6.0 * a2 * b * b) / (alpha * s);
    Ok(state.with(alpha_next, beta_next, rho_next))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub se_alpha: f64,
    pub se_beta: f64,
    pub se_rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleStep {
    /// Exact first-order part plus the sample mean of the per-sample
    /// remainder; variance `O(eta^4)`.
    pub controlled: OracleEstimate,
    /// Plain sample means.
    pub raw: OracleEstimate,
    pub samples: usize,
}

/// Minimum number of Monte Carlo samples accepted by [`direct_oracle_step`].
pub const MIN_ORACLE_SAMPLES: usize = 1_000_000;

#[derive(Default)]
struct Moments {
    sum: [f64; 3],
    sum2: [f64; 3],
}

impl Moments {
    fn push(&mut self, v: [f64; 3]) {
        for ((s, s2), x) in self.sum.iter_mut().zip(&mut self.sum2).zip(v) {
            *s += x;
            *s2 += x * x;
        }
    }

    fn mean_se(&self, n: usize) -> ([f64; 3], [f64; 3]) {
        let nf = n as f64;
        let mut mean = [0.0; 3];
        let mut se = [0.0; 3];
        for k in 0..3 {
            mean[k] = self.sum[k] / nf;
            se[k] = ((self.sum2[k] / nf - mean[k] * mean[k]).max(0.0) / nf).sqrt();
        }
        (mean, se)
    }
}

/// `(alpha', beta', rho')` from `(A1, A2, B)` with delta-method errors.
fn assemble(rho: f64, a: [f64; 3], se: [f64; 3]) -> OracleEstimate {
    let r = (1.0 - rho * rho).max(0.0).sqrt();
    let norm = a[0].hypot(a[1]);
    let (rho_next, d1, d2) = if norm > 0.0 {
        let p = (rho * a[0] + r * a[1]) / norm;
        // Gradient of rho' with respect to (A1, A2).
        let g1 = rho / norm - p * a[0] / (norm * norm);
        let g2 = r / norm - p * a[1] / (norm * norm);
        (p.clamp(-1.0, 1.0), g1, g2)
    } else {
        (rho, 0.0, 0.0)
    };
    let se_alpha = if norm > 0.0 {
        ((a[0] * se[0]).powi(2) + (a[1] * se[1]).powi(2)).sqrt() / norm
    } else {
        se[0].hypot(se[1])
    };
    OracleEstimate {
        alpha: norm,
        beta: a[2],
        rho: rho_next,
        se_alpha,
        se_beta: se[2],
        se_rho: (d1 * se[0]).hypot(d2 * se[1]),
    }
}

/// Monte Carlo estimate of the exact update at `state` from `samples` draws
/// of `(Z1, Z2, Z3, s)` on stream `(seed, 0, 0)`. The same seed gives the same
/// draws for every `eta`.
pub fn direct_oracle_step(state: &LowSnrState, engine: &Expectations, samples: usize, seed: u64) -> Result<OracleStep> {
    state.validate()?;
    if samples < MIN_ORACLE_SAMPLES {
        return Err(Error::domain(format!(
            "oracle needs at least {MIN_ORACLE_SAMPLES} samples, got {samples}"
        )));
    }
    let LowSnrState {
        alpha,
        nu,
        rho,
        eta,
        beta_star,
    } = *state;
    let r = (1.0 - rho * rho).max(0.0).sqrt();
    let p1 = 0.5 * (1.0 + beta_star);

    // Exact values at eta = 0 and exact first derivatives in eta.
    let m = engine.m(alpha, nu)?;
    let n = engine.n(alpha, nu)?;
    let l = engine.l(alpha, nu)?;
    let j = engine.j(alpha, nu)?;
    let linear = [
        m + eta * beta_star * rho * l,
        eta * beta_star * r * j,
        n + eta * beta_star * rho * m,
    ];

    let mut rng = StreamId::new(seed, 0, 0).rng();
    let mut raw = Moments::default();
    let mut rem = Moments::default();
    for _ in 0..samples {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let z3: f64 = rng.sample(StandardNormal);
        let s = if rng.random::<f64>() < p1 { 1.0 } else { -1.0 };
        let q = rho * z2 + r * z3;
        let w = z1 + s * eta * q;
        let t = (alpha * z2 * w + nu).tanh();
        let g = [t * w * z2, t * w * z3, t];
        // Per-sample linearization in eta around eta = 0.
        let t0 = (alpha * z1 * z2 + nu).tanh();
        let dt = (1.0 - t0 * t0) * alpha * z2 * s * q;
        let sq = s * q;
        let g0 = [t0 * z1 * z2, t0 * z1 * z3, t0];
        let dg = [dt * z1 * z2 + t0 * sq * z2, dt * z1 * z3 + t0 * sq * z3, dt];
        raw.push(g);
        rem.push([
            g[0] - g0[0] - eta * dg[0],
            g[1] - g0[1] - eta * dg[1],
            g[2] - g0[2] - eta * dg[2],
        ]);
    }
    let (raw_mean, raw_se) = raw.mean_se(samples);
    let (rem_mean, rem_se) = rem.mean_se(samples);
    let controlled = [
        linear[0] + rem_mean[0],
        linear[1] + rem_mean[1],
        linear[2] + rem_mean[2],
    ];
    Ok(OracleStep {
        controlled: assemble(rho, controlled, rem_se),
        raw: assemble(rho, raw_mean, raw_se),
        samples,
    })
}

/// One row of the low-SNR comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowSnrRow {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub pert: (f64, f64, f64),
    /// NaN where the dynamic equations do not apply.
    pub dynamic: (f64, f64, f64),
    pub oracle: OracleEstimate,
}

impl LowSnrRow {
    pub const CSV_HEADER: [&'static str; 16] = [
        "eta",
        "alpha",
        "beta",
        "rho",
        "alpha_pert",
        "beta_pert",
        "rho_pert",
        "alpha_dyn",
        "beta_dyn",
        "rho_dyn",
        "alpha_mc",
        "beta_mc",
        "rho_mc",
        "se_alpha",
        "se_beta",
        "se_rho",
    ];

    pub fn csv_row(&self) -> Vec<f64> {
        let o = &self.oracle;
        vec![
            self.eta,
            self.alpha,
            self.beta,
            self.rho,
            self.pert.0,
            self.pert.1,
            self.pert.2,
            self.dynamic.0,
            self.dynamic.1,
            self.dynamic.2,
            o.alpha,
            o.beta,
            o.rho,
            o.se_alpha,
            o.se_beta,
            o.se_rho,
        ]
    }

    /// Euclidean distance between the perturbative update and the oracle.
    pub fn gap(&self) -> f64 {
        let o = &self.oracle;
        ((self.pert.0 - o.alpha).powi(2) + (self.pert.1 - o.beta).powi(2) + (self.pert.2 - o.rho).powi(2)).sqrt()
    }
}

/// Evaluate all three update paths at one state. Uses the controlled oracle
/// for `eta > 0` and the raw one at `eta = 0`.
pub fn compare_paths(state: &LowSnrState, engine: &Expectations, samples: usize, seed: u64) -> Result<LowSnrRow> {
    let pert = lowsnr_step_perturbative(state, engine)?.state;
    let dynamic = match lowsnr_step_dynamic(state) {
        Ok(d) => (d.alpha, d.beta(), d.rho),
        Err(Error::Domain(_)) => (f64::NAN, f64::NAN, f64::NAN),
        Err(e) => return Err(e),
    };
    let oracle = direct_oracle_step(state, engine, samples, seed)?;
    Ok(LowSnrRow {
        eta: state.eta,
        alpha: state.alpha,
        beta: state.beta(),
        rho: state.rho,
        pert: (pert.alpha, pert.beta(), pert.rho),
        dynamic,
        oracle: if state.eta > 0.0 { oracle.controlled } else { oracle.raw },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::DensityKernel;
    use crate::population::{population_step, PopulationState};
    use crate::quadrature::QuadratureSpec;

    fn engine() -> Expectations {
        Expectations::new(DensityKernel::BesselProductNormal, QuadratureSpec::default()).unwrap()
    }

    #[test]
    fn zero_eta_is_population_step() {
        let e = engine();
        let s = LowSnrState::new(0.2, 0.3, 0.4, 0.0, 0.5).unwrap();
        let p = lowsnr_step_perturbative(&s, &e).unwrap().state;
        let q = population_step(&PopulationState::new(0.2, s.nu).unwrap(), &e).unwrap();
        assert_eq!(p.alpha, q.alpha);
        assert_eq!(p.nu, q.nu);
        assert_eq!(p.rho, 0.4);
    }

    #[test]
    fn unit_rho_is_preserved() {
        let e = engine();
        for rho in [1.0, -1.0] {
            let s = LowSnrState::new(0.1, 0.3, rho, 0.05, 0.6).unwrap();
            assert_eq!(lowsnr_step_perturbative(&s, &e).unwrap().state.rho, rho);
            assert_eq!(lowsnr_step_dynamic(&s).unwrap().rho, rho);
        }
    }

    #[test]
    fn balanced_weights_regenerate_imbalance() {
        let e = engine();
        let s = LowSnrState::new(0.1, 0.0, 0.7, 0.05, 0.4).unwrap();
        let b = lowsnr_step_perturbative(&s, &e).unwrap().state.beta();
        let expected = 0.05 * 0.4 * 0.7 * e.m(0.1, 0.0).unwrap();
        assert!(b > 0.0 && (b - expected).abs() < 1e-15);
    }

    #[test]
    fn dynamic_matches_low_order_prediction_at_zero_eta() {
        let s = LowSnrState::new(0.1, 0.4, 0.5, 0.0, 0.3).unwrap();
        let d = lowsnr_step_dynamic(&s).unwrap();
        assert!((d.alpha - 0.1 * 0.84).abs() < 1e-15);
        assert!((d.beta() - 0.4 * (1.0 - 0.01 * 0.84)).abs() < 1e-13);
        assert_eq!(d.rho, 0.5);
    }

    #[test]
    fn dynamic_domain() {
        let s = LowSnrState::new(0.0, 0.4, 0.5, 0.01, 0.3).unwrap();
        assert!(lowsnr_step_dynamic(&s).is_err());
        let s = LowSnrState::new(0.3, 0.4, 0.5, 0.01, 0.3).unwrap();
        assert!(lowsnr_step_dynamic(&s).is_err());
    }

    #[test]
    fn zero_alpha_carries_rho() {
        let e = engine();
        let s = LowSnrState::new(0.0, 0.2, 0.3, 0.05, 0.4).unwrap();
        let p = lowsnr_step_perturbative(&s, &e).unwrap().state;
        assert_eq!(p.rho, 0.3);
        assert_eq!(p.alpha, 0.0);
    }

    #[test]
    fn validity_warning() {
        let e = engine();
        let s = LowSnrState::new(0.01, 0.5, 0.5, 0.2, 0.9).unwrap();
        assert!(lowsnr_step_perturbative(&s, &e).unwrap().warning.is_some());
        let s = LowSnrState::new(0.1, 0.1, 0.5, 0.001, 0.4).unwrap();
        assert!(lowsnr_step_perturbative(&s, &e).unwrap().warning.is_none());
    }

    #[test]
    fn invalid_states() {
        assert!(LowSnrState::new(0.1, 0.2, 1.5, 0.1, 0.2).is_err());
        assert!(LowSnrState::new(0.1, 0.2, 0.5, -0.1, 0.2).is_err());
        assert!(LowSnrState::new(0.1, 1.0, 0.5, 0.1, 0.2).is_err());
        let e = engine();
        let s = LowSnrState::new(0.1, 0.2, 0.5, 0.1, 0.2).unwrap();
        assert!(direct_oracle_step(&s, &e, 10, 0).is_err());
    }
}
