//! Symmetric base densities for the population expectations.
//!
//! In two-component mixed linear regression with zero ground truth every
//! population quantity reduces to an expectation over `X = Z1 * Z2`, the
//! product of two independent standard normals, whose density is
//! `K0(|x|) / pi`. The Gaussian mixture comparison swaps that density for the
//! standard normal one. This module evaluates `K0`, both densities, and the
//! closed-form moments of the product-normal law used to validate the
//! quadrature engine.

use std::f64::consts::{FRAC_2_PI, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Beyond this point `K0(x) / pi < 1e-21`; integrals treat the density as zero.
pub const DEFAULT_TAIL_CUTOFF: f64 = 45.0;

const SERIES_CUTOFF: f64 = 2.0;

/// Which symmetric law `X` follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityKernel {
    /// Product of two independent standard normals, density `K0(|x|)/pi` (2MLR).
    #[default]
    #[serde(alias = "bessel")]
    BesselProductNormal,
    /// Standard normal (symmetric two-component Gaussian mixture).
    #[serde(alias = "normal")]
    StandardNormal,
}

impl DensityKernel {
    /// Whether the density has an integrable singularity at the origin.
    pub fn singular_at_origin(self) -> bool {
        matches!(self, DensityKernel::BesselProductNormal)
    }

    /// Density at `x >= 0` without the origin check. Callers guarantee `x > 0`
    /// for the Bessel kernel.
    pub(crate) fn density_unchecked(self, x: f64) -> f64 {
        match self {
            DensityKernel::BesselProductNormal => k0_unchecked(x) / PI,
            DensityKernel::StandardNormal => standard_normal_pdf(x),
        }
    }
}

impl std::str::FromStr for DensityKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bessel" | "bessel_product_normal" | "mlr" => Ok(DensityKernel::BesselProductNormal),
            "normal" | "standard_normal" | "gmm" => Ok(DensityKernel::StandardNormal),
            other => Err(Error::Config(format!("unknown density kernel `{other}`"))),
        }
    }
}

fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Modified Bessel function of the second kind of order zero.
///
/// Uses the ascending series (with the `-ln(x/2) I0(x)` term) for `x <= 2` and
/// Steed's continued fraction for larger arguments. Results underflow to zero
/// past `x ~ 705`.
pub fn bessel_k0(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("K0 requires x > 0, got {x}")));
    }
    Ok(k0_unchecked(x))
}

/// `exp(x) * K0(x)`, finite for all `x > 0`.
pub fn bessel_k0_scaled(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("K0 requires x > 0, got {x}")));
    }
    if x <= SERIES_CUTOFF {
        Ok(k0_series(x) * x.exp())
    } else {
        Ok(k0_scaled_continued_fraction(x))
    }
}

pub(crate) fn k0_unchecked(x: f64) -> f64 {
    if x <= SERIES_CUTOFF {
        k0_series(x)
    } else if x > 745.0 {
        0.0
    } else {
        k0_scaled_continued_fraction(x) * (-x).exp()
    }
}

fn k0_series(x: f64) -> f64 {
    // K0(x) = -(ln(x/2) + gamma) I0(x) + sum_{k>=1} (x^2/4)^k / (k!)^2 * H_k
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut i0 = 1.0;
    let mut tail = 0.0;
    let mut harmonic = 0.0;
    for k in 1..60 {
        let kf = k as f64;
        term *= q / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        tail += term * harmonic;
        if term * harmonic < 1e-17 * tail.abs().max(1e-300) {
            break;
        }
    }
    -((0.5 * x).ln() + EULER_GAMMA) * i0 + tail
}

fn k0_scaled_continued_fraction(x: f64) -> f64 {
    // Steed's method for the second continued fraction (order nu = 0).
    const EPS: f64 = 1e-16;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    (PI / (2.0 * x)).sqrt() / s
}

/// Density of the chosen kernel at `x`.
pub fn density(kernel: DensityKernel, x: f64) -> Result<f64> {
    match kernel {
        DensityKernel::BesselProductNormal => {
            if x == 0.0 || !x.is_finite() {
                return Err(Error::domain(format!(
                    "product-normal density is not evaluated pointwise at x = {x}"
                )));
            }
            Ok(k0_unchecked(x.abs()) / PI)
        }
        DensityKernel::StandardNormal => Ok(standard_normal_pdf(x)),
    }
}

/// Moments of the product-normal law with known closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedFormMoment {
    /// `E[exp(-a|X|)]`
    ExpAbs(f64),
    /// `E[cosh(aX)]`
    Cosh(f64),
    /// `E[|X|]`
    AbsFirst,
    /// `E[X^(2n)]`
    EvenPower(u32),
}

pub fn closed_form_moment(kind: ClosedFormMoment) -> Result<f64> {
    let check = |a: f64| {
        if (0.0..1.0).contains(&a) {
            Ok(a)
        } else {
            Err(Error::domain(format!("moment parameter must lie in [0, 1), got {a}")))
        }
    };
    match kind {
        ClosedFormMoment::ExpAbs(a) => {
            let a = check(a)?;
            Ok(FRAC_2_PI * a.acos() / (1.0 - a * a).sqrt())
        }
        ClosedFormMoment::Cosh(a) => {
            let a = check(a)?;
            Ok(1.0 / (1.0 - a * a).sqrt())
        }
        ClosedFormMoment::AbsFirst => Ok(FRAC_2_PI),
        ClosedFormMoment::EvenPower(n) => {
            if n == 0 {
                return Err(Error::domain("EvenPower requires n >= 1"));
            }
            let double_factorial: f64 = (1..=n).map(|k| (2 * k - 1) as f64).product();
            Ok(double_factorial * double_factorial)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_arguments() {
        assert!(bessel_k0(0.0).is_err());
        assert!(bessel_k0(-1.0).is_err());
        assert!(bessel_k0(f64::NAN).is_err());
        assert!(density(DensityKernel::BesselProductNormal, 0.0).is_err());
    }

    #[test]
    fn small_argument_limit() {
        let x: f64 = 0.01;
        let limit = (2.0 / x).ln() - EULER_GAMMA;
        let k = bessel_k0(x).unwrap();
        assert!(((k - limit) / limit).abs() < 1e-3, "{k} vs {limit}");
    }

    #[test]
    fn large_argument_limit() {
        let x: f64 = 100.0;
        let ratio = bessel_k0(x).unwrap() / ((PI / (2.0 * x)).sqrt() * (-x).exp());
        assert!((0.99..=1.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn underflows_quietly() {
        assert_eq!(bessel_k0(800.0).unwrap(), 0.0);
        assert!(bessel_k0_scaled(800.0).unwrap() > 0.0);
    }

    #[test]
    fn continuous_across_branch_point() {
        let below = k0_series(SERIES_CUTOFF);
        let above = k0_scaled_continued_fraction(SERIES_CUTOFF) * (-SERIES_CUTOFF).exp();
        assert!(((below - above) / below).abs() < 1e-13);
    }

    #[test]
    fn densities_are_symmetric() {
        for &x in &[0.1, 0.7, 3.0, 12.5] {
            for kernel in [DensityKernel::BesselProductNormal, DensityKernel::StandardNormal] {
                assert_eq!(density(kernel, x).unwrap(), density(kernel, -x).unwrap());
            }
        }
        let mode = density(DensityKernel::StandardNormal, 0.0).unwrap();
        assert!((mode - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-16);
    }

    #[test]
    fn sandwich_bounds_on_log_grid() {
        let c = (1.0 / (2.0 * PI)).sqrt();
        let (lo, hi) = (0.25f64.ln(), 50f64.ln());
        for i in 0..200 {
            let x = (lo + (hi - lo) * i as f64 / 199.0).exp();
            let f = bessel_k0(x).unwrap() / PI;
            let e = (-x).exp();
            assert!(c * e / (x + 1.0).sqrt() <= f, "lower bound fails at {x}");
            assert!(f <= c * e / x.sqrt(), "upper bound fails at {x}");
        }
    }

    #[test]
    fn strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let x = 1e-6 * (1.01f64).powi(i);
            if x > 700.0 {
                break;
            }
            let k = bessel_k0(x).unwrap();
            assert!(k < prev, "not decreasing at {x}");
            prev = k;
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(closed_form_moment(ClosedFormMoment::EvenPower(1)).unwrap(), 1.0);
        assert_eq!(closed_form_moment(ClosedFormMoment::EvenPower(2)).unwrap(), 9.0);
        assert_eq!(closed_form_moment(ClosedFormMoment::EvenPower(3)).unwrap(), 225.0);
        assert_eq!(closed_form_moment(ClosedFormMoment::AbsFirst).unwrap(), FRAC_2_PI);
        let c = closed_form_moment(ClosedFormMoment::Cosh(0.6)).unwrap();
        assert!((c - 1.25).abs() < 1e-15);
        let e0 = closed_form_moment(ClosedFormMoment::ExpAbs(0.0)).unwrap();
        assert!((e0 - 1.0).abs() < 1e-15);
        assert!(closed_form_moment(ClosedFormMoment::Cosh(1.0)).is_err());
        assert!(closed_form_moment(ClosedFormMoment::ExpAbs(-0.1)).is_err());
        assert!(closed_form_moment(ClosedFormMoment::EvenPower(0)).is_err());
    }
}
