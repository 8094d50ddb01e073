//! Expectation-maximization for overspecified symmetric two-component mixed
//! linear regression.
//!
//! The crate evaluates the exact population EM recursion through expectations
//! over the product-normal law `K0(|x|)/pi`, runs finite-sample EM on
//! synthetic data, and checks the convergence bounds and low-SNR dynamics
//! numerically. [`harness`] wires everything to a CLI.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expectations;
pub mod finite;
pub mod harness;
pub mod kernel;
pub mod lowsnr;
pub mod population;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
pub use expectations::{Expectations, SeriesKind, TanhMoment};
pub use finite::{
    error_sweep, finite_step, run_finite, simulate, EmVariant, FiniteState, MixtureModel, SampleBatch, SweepSpec,
};
pub use kernel::{bessel_k0, closed_form_moment, density, ClosedFormMoment, DensityKernel};
pub use lowsnr::{direct_oracle_step, lowsnr_step_dynamic, lowsnr_step_perturbative, LowSnrState};
pub use population::{population_step, run_population, PopulationState, Trajectory};
pub use quadrature::{FoldedDensityRule, GaussLegendre, QuadratureSpec};
