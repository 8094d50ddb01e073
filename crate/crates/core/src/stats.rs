//! Order statistics and a least-squares line fit for the sweeps.

use serde::Serialize;

/// Linear-interpolated quantile of unsorted data; NaN for empty input.
pub fn quantile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; NaN with fewer than three points.
    pub stderr: f64,
}

/// Ordinary least squares fit of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let k = x.len().min(y.len());
    let nf = k as f64;
    let mx = x[..k].iter().sum::<f64>() / nf;
    let my = y[..k].iter().sum::<f64>() / nf;
    let sxx: f64 = x[..k].iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x[..k].iter().zip(&y[..k]).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if k > 2 {
        let ssr: f64 = x[..k]
            .iter()
            .zip(&y[..k])
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (ssr / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    LineFit {
        slope,
        intercept,
        stderr,
    }
}

/// Fit of `ln y` on `ln x`.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}
