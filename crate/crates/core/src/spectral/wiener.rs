//! Two-tap Wiener smoother for a sinusoid in white process and measurement noise.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::SpectralError;

/// `y[k] = taps[0] x[k] + taps[1] x[k-1]` on a regular grid with step `lag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WienerFir {
    pub taps: [f64; 2],
    pub lag: f64,
}

/// Taps minimizing the mean squared error between the filtered measurement and
/// the process `A sin(2 pi f t) + v`, observed through additive noise of
/// variance `measurement_var`.
pub fn wiener_design(amplitude: f64, frequency: f64, process_var: f64, measurement_var: f64, lag: f64) -> Result<WienerFir, SpectralError> {
    let ok = [amplitude, frequency, process_var, measurement_var, lag].iter().all(|v| v.is_finite() && *v >= 0.0);
    if !ok || lag == 0.0 {
        return Err(SpectralError::InvalidInput("design parameters must be finite, non-negative, and the lag positive".into()));
    }
    let periodic = amplitude * amplitude / 2.0;
    let cross = periodic * (2.0 * PI * frequency * lag).cos();
    let diag = periodic + process_var + measurement_var;
    let system = Matrix2::new(diag, cross, cross, diag);
    let rhs = Vector2::new(periodic + process_var, cross);
    if (diag * diag - cross * cross).abs() <= 1e-12 * diag * diag {
        return Err(SpectralError::SingularDesign);
    }
    let taps = system.lu().solve(&rhs).ok_or(SpectralError::SingularDesign)?;
    Ok(WienerFir { taps: [taps[0], taps[1]], lag })
}

impl WienerFir {
    pub fn identity(lag: f64) -> Self {
        Self { taps: [1.0, 0.0], lag }
    }

    /// Filters an evenly spaced series; the first output sees `x[-1] = x[0]`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let [a, b] = self.taps;
        x.iter()
            .enumerate()
            .map(|(k, v)| a * v + b * x[k.saturating_sub(1)])
            .collect()
    }

    /// `|a + b e^{-i 2 pi f lag}|^2`
    pub fn power_response(&self, frequency: f64) -> f64 {
        let [a, b] = self.taps;
        (Complex64::new(a, 0.0) + Complex64::from_polar(b, -2.0 * PI * frequency * self.lag)).norm_sqr()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Activity;
    use crate::orientation::{AngleKind, ProcessParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cramer(a: f64, f: f64, v: f64, n: f64, lag: f64) -> [f64; 2] {
        let p = a * a / 2.0;
        let c = p * (2.0 * PI * f * lag).cos();
        let d = p + v + n;
        let det = d * d - c * c;
        let (r0, r1) = (p + v, c);
        [(r0 * d - c * r1) / det, (d * r1 - c * r0) / det]
    }

    #[test]
    fn matches_cramer() {
        for &(a, f, v, n, lag) in &[(1.88, 0.67, 5.91 * 5.91, 1.069e-3, 1e-3), (1.88, 0.67, 34.9, 1e-3, 0.0187), (3.15, 1.71, 89.9, 1.026, 0.02), (5.0, 3.0, 0.1, 2.0, 0.05)] {
            let w = wiener_design(a, f, v, n, lag).unwrap();
            let c = cramer(a, f, v, n, lag);
            assert!((w.taps[0] - c[0]).abs() < 1e-12 && (w.taps[1] - c[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_measurement_passes_through() {
        let w = wiener_design(2.0, 1.0, 3.0, 0.0, 0.01).unwrap();
        assert!((w.taps[0] - 1.0).abs() < 1e-12 && w.taps[1].abs() < 1e-12);
        assert!((w.power_response(7.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_sinusoid_is_diagonal() {
        let w = wiener_design(0.0, 1.0, 3.0, 1.0, 0.01).unwrap();
        assert!((w.taps[0] - 0.75).abs() < 1e-12 && w.taps[1].abs() < 1e-12);
    }

    #[test]
    fn singular_system_is_an_error() {
        assert!(matches!(wiener_design(2.0, 1.0, 0.0, 0.0, 1.0), Err(SpectralError::SingularDesign)));
        assert!(wiener_design(2.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn reduces_error_for_every_preset() {
        let lag = 0.0187;
        for activity in Activity::ALL {
            for angle in [AngleKind::Polar, AngleKind::Azimuth] {
                let p = ProcessParams::preset(activity, angle);
                let w = wiener_design(p.amplitude, p.frequency, p.noise_std.powi(2), p.measurement_noise_var, lag).unwrap();
                let (mut raw, mut filtered) = (0.0, 0.0);
                for seed in 0..20u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let phase: f64 = rng.random::<f64>() * 2.0 * PI;
                    let truth: Vec<f64> = (0..200_000)
                        .map(|k| {
                            let t = k as f64 * lag;
                            p.amplitude * (2.0 * PI * p.frequency * t + phase).sin() + p.noise_std * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect();
                    let sn = p.measurement_noise_var.sqrt();
                    let measured: Vec<f64> = truth.iter().map(|v| v + sn * rng.sample::<f64, _>(StandardNormal)).collect();
                    let out = w.apply(&measured);
                    for k in 1..truth.len() {
                        raw += (measured[k] - truth[k]).powi(2);
                        filtered += (out[k] - truth[k]).powi(2);
                    }
                }
                assert!(filtered < raw, "{activity:?} {angle:?}: {filtered} vs {raw}");
            }
        }
    }
}
