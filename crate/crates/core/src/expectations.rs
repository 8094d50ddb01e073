//! Expectations of `tanh(aX + nu) X^k` and `tanh^2(aX + nu) X^k`.
//!
//! Every population-level quantity is one of these moments under a symmetric
//! density. With `b = tanh(nu)` and `t = tanh(a x)` the folded integrands use
//!
//! ```text
//! (tanh(nu + ax) - tanh(nu - ax)) / 2 = (1 - b^2) t / (1 - b^2 t^2)
//! (tanh(nu + ax) + tanh(nu - ax)) / 2 = b (1 - t^2) / (1 - b^2 t^2)
//! ```
//!
//! which avoid the cancellation of the naive difference at small `a`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::DensityKernel;
use crate::quadrature::{FoldedDensityRule, QuadResult, QuadratureSpec};

/// Which moment of `tanh(alpha X + nu)` to take.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhMoment {
    /// Power `k` of `X`, one of 0, 1, 2.
    pub power: u8,
    /// `tanh^2` instead of `tanh`.
    pub squared: bool,
    pub alpha: f64,
    pub nu: f64,
}

impl TanhMoment {
    pub fn new(power: u8, squared: bool, alpha: f64, nu: f64) -> Self {
        Self {
            power,
            squared,
            alpha,
            nu,
        }
    }

    pub fn beta(&self) -> f64 {
        self.nu.tanh()
    }

    pub fn validate(&self) -> Result<()> {
        if self.power > 2 {
            return Err(Error::domain(format!("power must be 0, 1 or 2, got {}", self.power)));
        }
        validate_state(self.alpha, self.nu)
    }
}

pub(crate) fn validate_state(alpha: f64, nu: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if !nu.is_finite() {
        return Err(Error::domain(format!(
            "nu must be finite (|beta| = 1 is not representable), got {nu}"
        )));
    }
    Ok(())
}

/// Odd and even parts of `x -> tanh(nu + a x)` evaluated at `a x`.
#[inline]
fn tanh_parts(ax: f64, beta: f64, sech2_nu: f64) -> (f64, f64) {
    let t = ax.tanh();
    let c = ax.cosh();
    let sech2_a = 1.0 / (c * c);
    let den = sech2_nu + beta * beta * sech2_a;
    if den == 0.0 {
        return (0.0, 0.0);
    }
    (sech2_nu * t / den, beta * sech2_a / den)
}

#[inline]
fn sech2(nu: f64) -> f64 {
    let c = nu.cosh();
    1.0 / (c * c)
}

/// Quadrature-backed evaluator for the tanh moments of one density kernel.
#[derive(Debug, Clone)]
pub struct Expectations {
    rule: FoldedDensityRule,
}

impl Expectations {
    pub fn new(kernel: DensityKernel, quad: QuadratureSpec) -> Result<Self> {
        Ok(Self {
            rule: FoldedDensityRule::new(kernel, quad)?,
        })
    }

    pub fn kernel(&self) -> DensityKernel {
        self.rule.kernel()
    }

    pub fn quad(&self) -> &QuadratureSpec {
        self.rule.spec()
    }

    /// `E[g(X)]` for an arbitrary integrand; used to check the engine against
    /// closed-form moments.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> Result<QuadResult> {
        self.rule.expect(g)
    }

    pub fn tanh_moment_with_error(&self, spec: TanhMoment) -> Result<QuadResult> {
        spec.validate()?;
        let TanhMoment {
            power,
            squared,
            alpha,
            nu,
        } = spec;
        let beta = nu.tanh();
        let sb = sech2(nu);
        let k = power as i32;
        let even_power = power % 2 == 0;
        self.rule.integrate_folded(move |x| {
            let (odd, even) = tanh_parts(alpha * x, beta, sb);
            let xk = x.powi(k);
            match (squared, even_power) {
                (false, true) => 2.0 * even * xk,
                (false, false) => 2.0 * odd * xk,
                (true, true) => 2.0 * (even * even + odd * odd) * xk,
                (true, false) => 4.0 * even * odd * xk,
            }
        })
    }

    pub fn tanh_moment(&self, spec: TanhMoment) -> Result<f64> {
        Ok(self.tanh_moment_with_error(spec)?.value)
    }

    /// `m(alpha, nu) = E[tanh(alpha X + nu) X]`.
    pub fn m(&self, alpha: f64, nu: f64) -> Result<f64> {
        self.tanh_moment(TanhMoment::new(1, false, alpha, nu))
    }

    /// `n(alpha, nu) = E[tanh(alpha X + nu)]`.
    pub fn n(&self, alpha: f64, nu: f64) -> Result<f64> {
        if alpha == 0.0 {
            validate_state(alpha, nu)?;
            return Ok(nu.tanh());
        }
        self.tanh_moment(TanhMoment::new(0, false, alpha, nu))
    }

    /// `l(alpha, nu) = E[tanh(alpha X + nu) X^2]`.
    pub fn l(&self, alpha: f64, nu: f64) -> Result<f64> {
        self.tanh_moment(TanhMoment::new(2, false, alpha, nu))
    }

    /// `E[tanh^2(alpha X + nu) X]`.
    pub fn tanh2_x(&self, alpha: f64, nu: f64) -> Result<f64> {
        self.tanh_moment(TanhMoment::new(1, true, alpha, nu))
    }

    /// `E[tanh^2(alpha X + nu) X^2]`.
    pub fn tanh2_x2(&self, alpha: f64, nu: f64) -> Result<f64> {
        self.tanh_moment(TanhMoment::new(2, true, alpha, nu))
    }

    /// `J = E[tanh(alpha X + nu)] - alpha E[tanh^2(alpha X + nu) X]`, the
    /// numerator of the cosine-angle drift at low SNR.
    pub fn j(&self, alpha: f64, nu: f64) -> Result<f64> {
        validate_state(alpha, nu)?;
        let n = self.n(alpha, nu)?;
        if alpha == 0.0 {
            return Ok(n);
        }
        Ok(n - alpha * self.tanh2_x(alpha, nu)?)
    }

    /// Every moment the harness reports, in one row.
    pub fn moment_row(&self, alpha: f64, nu: f64) -> Result<MomentRow> {
        let beta = nu.tanh();
        let series = |which| series_approx(which, alpha, beta).unwrap_or(f64::NAN);
        Ok(MomentRow {
            alpha,
            nu,
            m: self.m(alpha, nu)?,
            n: self.n(alpha, nu)?,
            l: self.l(alpha, nu)?,
            tanh2x: self.tanh2_x(alpha, nu)?,
            tanh2x2: self.tanh2_x2(alpha, nu)?,
            j: self.j(alpha, nu)?,
            series_m: series(SeriesKind::M),
            series_n: series(SeriesKind::N),
        })
    }
}

/// One-shot evaluation; builds the quadrature rule on every call.
pub fn expect_tanh_moment(kernel: DensityKernel, spec: TanhMoment, quad: QuadratureSpec) -> Result<f64> {
    Expectations::new(kernel, quad)?.tanh_moment(spec)
}

/// One-shot evaluation of [`Expectations::j`].
pub fn expect_j(kernel: DensityKernel, alpha: f64, nu: f64, quad: QuadratureSpec) -> Result<f64> {
    Expectations::new(kernel, quad)?.j(alpha, nu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub alpha: f64,
    pub nu: f64,
    pub m: f64,
    pub n: f64,
    pub l: f64,
    pub tanh2x: f64,
    pub tanh2x2: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub series_m: f64,
    pub series_n: f64,
}

/// Small-`alpha` polynomial approximants of the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    M,
    N,
    L,
    TanhSqX,
    TanhSqX2,
    J,
}

/// Upper end (exclusive) of the `alpha` window where the expansions apply.
pub const SERIES_ALPHA_LIMIT: f64 = 0.25;

pub fn series_approx(which: SeriesKind, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..SERIES_ALPHA_LIMIT).contains(&alpha) {
        return Err(Error::domain(format!(
            "series expansions need alpha in [0, {SERIES_ALPHA_LIMIT}), got {alpha}"
        )));
    }
    if !(beta.abs() < 1.0) {
        return Err(Error::domain(format!("series expansions need |beta| < 1, got {beta}")));
    }
    let a2 = alpha * alpha;
    let b2 = beta * beta;
    let s = 1.0 - b2;
    Ok(match which {
        SeriesKind::M => alpha * s - 3.0 * alpha * a2 * s * (1.0 - 3.0 * b2),
        SeriesKind::N => beta - a2 * beta * s,
        SeriesKind::L => beta - 9.0 * a2 * beta * s,
        SeriesKind::TanhSqX => 2.0 * alpha * beta * s - 12.0 * alpha * a2 * beta * s * (2.0 - 3.0 * b2),
        SeriesKind::TanhSqX2 => b2 + 9.0 * a2 * s * (1.0 - 3.0 * b2),
        SeriesKind::J => beta * (1.0 - 3.0 * a2 * s),
    })
}

/// Rational-polynomial lower and upper bounds on `n(alpha, nu)` for
/// `alpha in [0, 0.31)`, `beta >= 0`.
pub fn n_bounds(alpha: f64, beta: f64) -> (f64, f64) {
    let a2 = alpha * alpha;
    let a4 = a2 * a2;
    let b2 = beta * beta;
    let s = 1.0 - b2;
    let lower = beta
        * (1.0 - a2 * s
            + a4 * (s * 6.0 / (1.0 + 8.0 * alpha) - b2 * 9.0)
            + a4 * a2 * b2 * 300.0 / (1.0 + 16.0 * alpha));
    let upper = beta * (1.0 - a2 * s + a4 * s * 6.0);
    (lower, upper)
}

/// Rational-polynomial lower and upper bounds on `m(alpha, nu)` for
/// `alpha in [0, 0.31)`, `beta >= 0`.
pub fn m_bounds(alpha: f64, beta: f64) -> (f64, f64) {
    let a2 = alpha * alpha;
    let a4 = a2 * a2;
    let b2 = beta * beta;
    let s = 1.0 - b2;
    let lower = alpha * s * (1.0 - a2 * (3.0 - b2 * 9.0) - a4 * b2 * 225.0);
    let upper = alpha
        * s
        * (1.0
            - a2 * (3.0 / (1.0 + 8.0 * alpha) - b2 * 9.0 / (1.0 - 25.0 / 3.0 * a2))
            - a4 * b2 * 75.0 / (1.0 + 16.0 * alpha));
    (lower, upper)
}

/// Outcome of checking the monotonicity structure of `m` and `n` on a grid.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MonotonicityReport {
    pub checks: usize,
    pub max_violation: f64,
    pub violations: Vec<String>,
}

impl MonotonicityReport {
    fn record(&mut self, label: impl FnOnce() -> String, violation: f64, tol: f64) {
        self.checks += 1;
        if violation > self.max_violation {
            self.max_violation = violation;
        }
        if violation > tol {
            self.violations.push(format!("{} (by {violation:.3e})", label()));
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `nu` standing in for `+infinity` in the endpoint check `n(alpha, inf) = 1`;
/// `tanh(alpha x + nu)` must saturate over the bulk of the density.
fn nu_infinity_proxy(alpha: f64) -> f64 {
    (20.0 + 50.0 * alpha).min(300.0)
}

/// Check the four monotonicity chains of `m` and `n` on a grid of sorted
/// `alphas >= 0` and `nus >= 0`, plus the endpoint identities.
pub fn monotonicity_probe(engine: &Expectations, alphas: &[f64], nus: &[f64]) -> Result<MonotonicityReport> {
    let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
    if !sorted(alphas) || !sorted(nus) || alphas.iter().chain(nus).any(|&v| v < 0.0) {
        return Err(Error::domain("monotonicity grid must be sorted and nonnegative"));
    }
    let tol = engine.quad().abs_tol * 10.0;
    let mut m = vec![vec![0.0; nus.len()]; alphas.len()];
    let mut n = vec![vec![0.0; nus.len()]; alphas.len()];
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &nu) in nus.iter().enumerate() {
            m[i][j] = engine.m(a, nu)?;
            n[i][j] = engine.n(a, nu)?;
        }
    }
    let mut report = MonotonicityReport::default();
    for j in 0..nus.len() {
        for i in 1..alphas.len() {
            let (a0, a1, nu) = (alphas[i - 1], alphas[i], nus[j]);
            report.record(
                || format!("m not nondecreasing in alpha at nu={nu}, alpha {a0}->{a1}"),
                m[i - 1][j] - m[i][j],
                tol,
            );
            report.record(
                || format!("n not nonincreasing in alpha at nu={nu}, alpha {a0}->{a1}"),
                n[i][j] - n[i - 1][j],
                tol,
            );
        }
    }
    for i in 0..alphas.len() {
        for j in 1..nus.len() {
            let (n0, n1, a) = (nus[j - 1], nus[j], alphas[i]);
            report.record(
                || format!("m not nonincreasing in nu at alpha={a}, nu {n0}->{n1}"),
                m[i][j] - m[i][j - 1],
                tol,
            );
            report.record(
                || format!("n not nondecreasing in nu at alpha={a}, nu {n0}->{n1}"),
                n[i][j - 1] - n[i][j],
                tol,
            );
        }
    }
    for &a in alphas {
        let m0 = engine.m(a, 0.0)?;
        report.record(|| format!("m(alpha, 0) > alpha at alpha={a}"), m0 - a, tol);
        let n_inf = engine.n(a, nu_infinity_proxy(a))?;
        report.record(|| format!("n(alpha, inf) != 1 at alpha={a}"), (n_inf - 1.0).abs(), 1e-8);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_2_PI;

    fn engine() -> Expectations {
        Expectations::new(DensityKernel::BesselProductNormal, QuadratureSpec::default()).unwrap()
    }

    #[test]
    fn zero_alpha_values() {
        let e = engine();
        for nu in [-1.3, 0.0, 0.4, 2.0] {
            assert!(e.m(0.0, nu).unwrap().abs() < 1e-12);
            let n = e.tanh_moment(TanhMoment::new(0, false, 0.0, nu)).unwrap();
            assert!((n - nu.tanh()).abs() < 1e-10);
            assert!((e.j(0.0, nu).unwrap() - nu.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_j_vanishes() {
        let e = engine();
        for a in [0.05, 0.3, 1.0] {
            assert!(e.j(a, 0.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn large_alpha_limit() {
        let e = engine();
        let m = e.m(50.0, 0.3).unwrap();
        assert!((m - FRAC_2_PI).abs() < 1e-3, "{m}");
    }

    #[test]
    fn cubic_sandwich_at_small_alpha() {
        let e = engine();
        let a: f64 = 0.1;
        let m = e.m(a, 0.0).unwrap();
        assert!(a - 3.0 * a.powi(3) <= m && m <= a - 3.0 * a.powi(3) / (1.0 + 8.0 * a));
    }

    #[test]
    fn rejects_bad_inputs() {
        let e = engine();
        assert!(e.m(-0.1, 0.0).is_err());
        assert!(e.m(0.1, f64::INFINITY).is_err());
        assert!(e.tanh_moment(TanhMoment::new(3, false, 0.1, 0.0)).is_err());
        assert!(series_approx(SeriesKind::M, 0.25, 0.0).is_err());
        assert!(series_approx(SeriesKind::M, 0.1, 1.0).is_err());
    }

    #[test]
    fn series_values() {
        let v = series_approx(SeriesKind::M, 0.05, 0.0).unwrap();
        assert!((v - 0.049625).abs() < 1e-15);
        assert_eq!(series_approx(SeriesKind::N, 0.1, 0.0).unwrap(), 0.0);
        let v = series_approx(SeriesKind::L, 0.1, 0.5).unwrap();
        assert!((v - 0.46625).abs() < 1e-15);
    }

    #[test]
    fn symmetry_in_nu() {
        let e = engine();
        for (a, nu) in [(0.1, 0.4), (0.7, 1.1), (2.0, 0.05)] {
            assert!((e.m(a, nu).unwrap() - e.m(a, -nu).unwrap()).abs() < 1e-10);
            assert!((e.n(a, nu).unwrap() + e.n(a, -nu).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn standard_normal_kernel_moments() {
        let e = Expectations::new(DensityKernel::StandardNormal, QuadratureSpec::default()).unwrap();
        let z2 = e.expect(|x| x * x).unwrap().value;
        let z4 = e.expect(|x| x.powi(4)).unwrap().value;
        assert!((z2 - 1.0).abs() < 1e-9);
        assert!((z4 - 3.0).abs() < 1e-8);
    }

    #[test]
    fn fact_one_grids() {
        let e = engine();
        let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let ms: Vec<f64> = alphas.iter().map(|&a| e.m(a, 0.3).unwrap()).collect();
        assert!(ms.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let ns: Vec<f64> = alphas.iter().map(|&a| e.n(a, 0.3).unwrap()).collect();
        assert!(ns.windows(2).all(|w| w[0] + 1e-12 >= w[1]));
        assert!(e.m(0.5, 0.0).unwrap() <= 0.5);
    }

    #[test]
    fn probe_on_coarse_grid() {
        let e = engine();
        let alphas = [0.0, 0.05, 0.2, 0.6, 1.5, 4.0];
        let nus = [0.0, 0.1, 0.5, 1.2, 3.0];
        let report = monotonicity_probe(&e, &alphas, &nus).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert!(report.checks > 100);
        assert!(monotonicity_probe(&e, &[0.2, 0.1], &nus).is_err());
    }
}
