//! Reference values and oracles that share no code with the library.
#![allow(dead_code, clippy::excessive_precision)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `K0(x) = integral_0^inf exp(-x cosh t) dt`, trapezoid rule (spectrally
/// accurate for this doubly-exponentially decaying analytic integrand).
pub fn k0_integral(x: f64) -> f64 {
    let h = 0.004;
    let t_max = (760.0 / x).acosh() + 1.0;
    let n = (t_max / h).ceil() as usize;
    let mut sum = 0.5 * (-x).exp();
    for i in 1..=n {
        sum += (-x * (i as f64 * h).cosh()).exp();
    }
    sum * h
}

/// `K0` at selected points, 20 significant digits from arbitrary precision.
pub const K0_FROZEN: [(f64, f64); 3] = [
    (1.0, 0.421_024_438_240_708_33),
    (1e-8, 18.536_612_259_610_778),
    (700.0, 4.669_776_431_685_377e-306),
];

/// `(alpha, nu, [m, n, l, E[tanh^2 X], E[tanh^2 X^2], J])` for the
/// product-normal law, from arbitrary-precision quadrature.
pub const MOMENTS_FROZEN: [(f64, f64, [f64; 6]); 6] = [
    (
        0.05,
        0.0,
        [0.049633944282291657, 0.0, 0.0, 0.0, 0.021621574379258604, 0.0],
    ),
    (
        0.1,
        0.3,
        [
            0.089576268313075114,
            0.2887725200986233,
            0.27019591925273909,
            0.048520544742180685,
            0.14093784137754173,
            0.28392046562440523,
        ],
    ),
    (
        0.2,
        0.8,
        [
            0.11332477841480944,
            0.65034573838354958,
            0.55692040173248479,
            0.12630128585533126,
            0.43525965244270006,
            0.62508548121248333,
        ],
    ),
    (
        0.5,
        0.1,
        [
            0.34879500354762544,
            0.086559265546943945,
            0.039805498733186374,
            0.033157303574942204,
            0.60154309318261666,
            0.069980613759472843,
        ],
    ),
    (
        1.0,
        1.2,
        [
            0.34226954472480466,
            0.68781535328409544,
            0.22712097042268854,
            0.1743038955835059,
            0.76791258497365684,
            0.51351145770058953,
        ],
    ),
    (
        2.0,
        0.5,
        [
            0.54889956004110341,
            0.2619963485548287,
            0.024235306095200197,
            0.061079433408259866,
            0.9459414900269425,
            0.13983748173830897,
        ],
    ),
];

/// Monte Carlo mean and standard error of `g(Z1 Z2)` over `samples` products
/// of independent standard normals.
pub fn mc_product_normal(g: impl Fn(f64) -> f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let v = g(z1 * z2);
        sum += v;
        sum2 += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
