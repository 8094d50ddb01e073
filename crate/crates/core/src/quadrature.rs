//! Panel-wise Gauss–Legendre integration against a symmetric density.
//!
//! Integrals run over `x >= 0` only, with the caller supplying the folded
//! integrand `g(x) + g(-x)`. The interval `[0, split]` is mapped through
//! `x = split * exp(-u)`, which turns the logarithmic singularity of the
//! product-normal density into an exponentially decaying integrand in `u`.
//! The rest, `[split, tail_cutoff]`, starts from a dyadic panel layout. Each
//! panel carries a coarse (one rule) and fine (two half rules) estimate; the
//! panel with the largest disagreement is bisected until the summed
//! disagreement meets `max(abs_tol, rel_tol * |I|)`.
//!
//! Density values on the initial layout are computed once per
//! [`FoldedDensityRule`], so repeated expectations only pay for the integrand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{DensityKernel, DEFAULT_TAIL_CUTOFF};

const MAX_PANELS: usize = 4096;
/// `split * exp(-U)` below this is dropped from the near-origin panel.
const NEAR_ORIGIN_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub tail_cutoff: f64,
    pub panel_order: usize,
    pub singularity_split: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-9,
            tail_cutoff: DEFAULT_TAIL_CUTOFF,
            panel_order: 40,
            singularity_split: 1e-3,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::Config("quadrature tolerances must be positive".into()));
        }
        if !(self.tail_cutoff > 1.0) {
            return Err(Error::Config("tail_cutoff must exceed 1".into()));
        }
        if self.panel_order < 10 {
            return Err(Error::Config("panel_order must be at least 10".into()));
        }
        if !(self.singularity_split > 0.0 && self.singularity_split < 1.0) {
            return Err(Error::Config("singularity_split must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, pm1) = legendre_pair(n, x);
                dp = nf * (x * p - pm1) / (x * x - 1.0);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    let (p, pm1) = legendre_pair(n, x);
                    dp = nf * (x * p - pm1) / (x * x - 1.0);
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&t, &w)| (mid + half * t, half * w))
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Region {
    /// Variable `u` with `x = split * exp(-u)`.
    NearOrigin,
    /// Variable `x` directly.
    Bulk,
}

/// One panel's quadrature points with density (and Jacobian) folded into
/// the weights.
#[derive(Debug, Clone)]
struct WeightedPoints {
    xs: Vec<f64>,
    ws: Vec<f64>,
}

impl WeightedPoints {
    fn apply(&self, g: &impl Fn(f64) -> f64) -> f64 {
        self.xs.iter().zip(&self.ws).map(|(&x, &w)| w * g(x)).sum()
    }
}

#[derive(Debug, Clone)]
struct InitialPanel {
    region: Region,
    a: f64,
    b: f64,
    coarse: WeightedPoints,
    fine: WeightedPoints,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

/// Integration rule for `int_0^L G(x) f(x) dx` with `f` a fixed kernel density.
#[derive(Debug, Clone)]
pub struct FoldedDensityRule {
    kernel: DensityKernel,
    spec: QuadratureSpec,
    gl: GaussLegendre,
    initial: Vec<InitialPanel>,
}

impl FoldedDensityRule {
    pub fn new(kernel: DensityKernel, spec: QuadratureSpec) -> Result<Self> {
        spec.validate()?;
        let gl = GaussLegendre::new(spec.panel_order);
        let mut rule = Self {
            kernel,
            spec,
            gl,
            initial: Vec::new(),
        };
        let split = spec.singularity_split;
        let u_max = (split / NEAR_ORIGIN_FLOOR).ln();
        let mut near = vec![0.0];
        let mut u = 1.0;
        while u < u_max {
            near.push(u);
            u *= 2.0;
        }
        near.push(u_max);

        let mut bulk = vec![split];
        let mut x = 2.0 * split;
        while x < 1.0 {
            bulk.push(x);
            x *= 2.0;
        }
        let mut x = 1.0;
        while x < spec.tail_cutoff {
            bulk.push(x);
            x *= 2.0;
        }
        bulk.push(spec.tail_cutoff);

        let mut panels = Vec::new();
        for (region, breaks) in [(Region::NearOrigin, &near), (Region::Bulk, &bulk)] {
            for w in breaks.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b <= a {
                    continue;
                }
                panels.push(InitialPanel {
                    region,
                    a,
                    b,
                    coarse: rule.points(region, a, b),
                    fine: rule.split_points(region, a, b),
                });
            }
        }
        rule.initial = panels;
        Ok(rule)
    }

    pub fn kernel(&self) -> DensityKernel {
        self.kernel
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    fn points(&self, region: Region, a: f64, b: f64) -> WeightedPoints {
        let split = self.spec.singularity_split;
        let (xs, ws) = self
            .gl
            .mapped(a, b)
            .map(|(t, w)| match region {
                Region::Bulk => (t, w * self.kernel.density_unchecked(t)),
                Region::NearOrigin => {
                    let x = split * (-t).exp();
                    (x, w * x * self.kernel.density_unchecked(x))
                }
            })
            .unzip();
        WeightedPoints { xs, ws }
    }

    fn split_points(&self, region: Region, a: f64, b: f64) -> WeightedPoints {
        let m = 0.5 * (a + b);
        let mut left = self.points(region, a, m);
        let right = self.points(region, m, b);
        left.xs.extend(right.xs);
        left.ws.extend(right.ws);
        left
    }

    /// `int_0^L folded(x) f(x) dx` for a folded (already symmetrised) integrand.
    pub fn integrate_folded(&self, folded: impl Fn(f64) -> f64) -> Result<QuadResult> {
        struct Work {
            region: Region,
            a: f64,
            b: f64,
            value: f64,
            error: f64,
        }
        let mut work: Vec<Work> = self
            .initial
            .iter()
            .map(|p| {
                let coarse = p.coarse.apply(&folded);
                let fine = p.fine.apply(&folded);
                Work {
                    region: p.region,
                    a: p.a,
                    b: p.b,
                    value: fine,
                    error: (fine - coarse).abs(),
                }
            })
            .collect();

        loop {
            let value: f64 = work.iter().map(|w| w.value).sum();
            let error: f64 = work.iter().map(|w| w.error).sum();
            let tolerance = self.spec.abs_tol.max(self.spec.rel_tol * value.abs());
            if !value.is_finite() {
                return Err(Error::Convergence {
                    estimate: value,
                    error,
                    tolerance,
                    panels: work.len(),
                });
            }
            if error <= tolerance {
                return Ok(QuadResult {
                    value,
                    error,
                    panels: work.len(),
                });
            }
            if work.len() >= MAX_PANELS {
                return Err(Error::Convergence {
                    estimate: value,
                    error,
                    tolerance,
                    panels: work.len(),
                });
            }
            let worst = work
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
                .map(|(i, _)| i)
                .expect("panel list is never empty");
            let Work { region, a, b, .. } = work.swap_remove(worst);
            let m = 0.5 * (a + b);
            for (lo, hi) in [(a, m), (m, b)] {
                let coarse = self.points(region, lo, hi).apply(&folded);
                let fine = self.split_points(region, lo, hi).apply(&folded);
                work.push(Work {
                    region,
                    a: lo,
                    b: hi,
                    value: fine,
                    error: (fine - coarse).abs(),
                });
            }
        }
    }

    /// `E[g(X)]`, folding `g` about the origin.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> Result<QuadResult> {
        self.integrate_folded(|x| g(x) + g(-x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(10);
        let total: f64 = gl.weights().iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        // degree 19 is the limit for 10 points
        let v = gl.integrate(|x| x.powi(18), -1.0, 1.0);
        assert!((v - 2.0 / 19.0).abs() < 1e-14);
        let v = gl.integrate(|x| x.powi(3) + x, 0.0, 2.0);
        assert!((v - 6.0).abs() < 1e-13);
    }

    #[test]
    fn nodes_sorted_and_inside() {
        for n in [10, 21, 40, 64] {
            let gl = GaussLegendre::new(n);
            assert!(gl.nodes().windows(2).all(|w| w[0] < w[1]));
            assert!(gl.nodes().iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(QuadratureSpec::default().validate().is_ok());
        let bad = QuadratureSpec {
            panel_order: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = QuadratureSpec {
            tail_cutoff: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = QuadratureSpec {
            abs_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn densities_normalise() {
        for kernel in [DensityKernel::BesselProductNormal, DensityKernel::StandardNormal] {
            let rule = FoldedDensityRule::new(kernel, QuadratureSpec::default()).unwrap();
            let total = rule.expect(|_| 1.0).unwrap().value;
            assert!((total - 1.0).abs() < 1e-8, "{kernel:?}: {total}");
            assert!(total >= 1.0 - 1e-8);
        }
    }

    #[test]
    fn reports_non_convergence() {
        let spec = QuadratureSpec {
            abs_tol: 1e-300,
            rel_tol: 1e-300,
            ..Default::default()
        };
        let rule = FoldedDensityRule::new(DensityKernel::StandardNormal, spec).unwrap();
        // A kink forces refinement that can never reach a 1e-300 target.
        match rule.expect(|x| (x - 0.3).abs()) {
            Err(Error::Convergence { panels, .. }) => assert!(panels >= MAX_PANELS),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }
}
