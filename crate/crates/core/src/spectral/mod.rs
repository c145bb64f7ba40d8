//! Spectral analysis of unevenly sampled series.

pub mod clean;
pub mod estimate;
mod sums;
pub mod wiener;

pub use clean::{clean, CleanConfig, CleanResult};
pub use estimate::{acf_from_spectrum, estimate_params, sigma_v_squared, Acf, Diagnostics, EstimateConfig, ParameterEstimate};
pub use sums::SpectrumSums;
pub use wiener::{wiener_design, WienerFir};

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("Wiener-Hopf system is singular")]
    SingularDesign,
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `|sum x e^{-i w t}|^2 / N^2`: a sinusoid of amplitude A shows `A^2/4` at its frequency.
    PowerSpectrum,
    /// `|sum x e^{-i w t}|^2 / N`: white noise of variance s^2 sits at level s^2.
    PowerSpectralDensity,
}

impl Normalization {
    fn as_str(self) -> &'static str {
        match self {
            Normalization::PowerSpectrum => "power-spectrum",
            Normalization::PowerSpectralDensity => "power-spectral-density",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Periodogram {
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    pub normalization: Normalization,
    /// Number of samples behind the estimate.
    pub samples: usize,
}

impl Periodogram {
    /// Index and frequency of the largest value.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| (i, self.frequencies[i]))
    }

    /// Values converted to another normalization.
    pub fn renormalized(&self, to: Normalization) -> Self {
        let n = self.samples as f64;
        let factor = match (self.normalization, to) {
            (a, b) if a == b => 1.0,
            (Normalization::PowerSpectrum, Normalization::PowerSpectralDensity) => n,
            _ => 1.0 / n,
        };
        Self {
            frequencies: self.frequencies.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            normalization: to,
            samples: self.samples,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SpectralError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frequency_hz", "value", "normalization"])?;
        for (f, v) in self.frequencies.iter().zip(&self.values) {
            w.write_record([format!("{f:e}"), format!("{v:e}"), self.normalization.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_series(times: &[f64], values: &[f64]) -> Result<(), SpectralError> {
    if times.len() != values.len() {
        return Err(SpectralError::InvalidInput("times and values differ in length".into()));
    }
    if times.len() < 2 {
        return Err(SpectralError::TooFewSamples { needed: 2, got: times.len() });
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidInput("non-finite sample".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpectralError::InvalidInput("times must be strictly increasing".into()));
    }
    Ok(())
}

fn demeaned(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

/// Lomb-Scargle value from the complex sums `X = sum x e^{-iwt}` and
/// `W2 = sum e^{-2iwt}` over `n` samples.
///
/// The time shift that decouples the sine and cosine fits turns the usual
/// trigonometric sums into `(n +- |W2|) / 2`.
pub(crate) fn lomb_scargle_from_sums(x: Complex64, w2: Complex64, n: f64) -> f64 {
    let shift = Complex64::from_polar(1.0, 0.5 * w2.conj().arg());
    let rotated = x * shift;
    let cos_den = 0.5 * (n + w2.norm());
    let sin_den = 0.5 * (n - w2.norm());
    let mut p = rotated.re * rotated.re / cos_den;
    if sin_den > 1e-9 * n {
        p += rotated.im * rotated.im / sin_den;
    }
    0.5 * p
}

fn check_grid(grid: &[f64]) -> Result<(), SpectralError> {
    if grid.is_empty() {
        return Err(SpectralError::InvalidGrid("empty".into()));
    }
    if grid.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(SpectralError::InvalidGrid("frequencies must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpectralError::InvalidGrid("frequencies must be strictly increasing".into()));
    }
    Ok(())
}

/// Mean-subtracted Lomb-Scargle periodogram evaluated directly on `grid`.
///
/// On even sampling at Fourier frequencies it equals `|DFT|^2 / N` (PSD) or
/// `|DFT|^2 / N^2` (PS).
pub fn lomb_scargle(times: &[f64], values: &[f64], grid: &[f64], normalization: Normalization) -> Result<Periodogram, SpectralError> {
    check_series(times, values)?;
    check_grid(grid)?;
    let x = demeaned(values);
    if x.iter().all(|v| *v == 0.0) {
        return Err(SpectralError::InvalidInput("series is constant".into()));
    }
    let n = times.len() as f64;
    let t0 = times[0];
    let psd: Vec<f64> = grid
        .par_iter()
        .map(|&f| {
            let w = 2.0 * PI * f;
            let mut sx = Complex64::new(0.0, 0.0);
            let mut s2 = Complex64::new(0.0, 0.0);
            for (t, v) in times.iter().zip(&x) {
                let phase = w * (t - t0);
                let (s, c) = phase.sin_cos();
                sx += Complex64::new(v * c, -v * s);
                let (s, c) = (2.0 * phase).sin_cos();
                s2 += Complex64::new(c, -s);
            }
            lomb_scargle_from_sums(sx, s2, n)
        })
        .collect();
    let values = match normalization {
        Normalization::PowerSpectralDensity => psd,
        Normalization::PowerSpectrum => psd.into_iter().map(|p| p / n).collect(),
    };
    Ok(Periodogram {
        frequencies: grid.to_vec(),
        values,
        normalization,
        samples: times.len(),
    })
}

/// Power spectrum `|(1/N) sum e^{-i 2 pi f t_k}|^2` of the sampling pattern.
pub fn window_spectrum(times: &[f64], grid: &[f64]) -> Result<Periodogram, SpectralError> {
    check_series(times, &vec![0.0; times.len()])?;
    check_grid(grid)?;
    let n = times.len() as f64;
    let values = grid
        .par_iter()
        .map(|&f| {
            let w = 2.0 * PI * f;
            let s: Complex64 = times.iter().map(|t| Complex64::from_polar(1.0, -w * t)).sum();
            (s / n).norm_sqr()
        })
        .collect();
    Ok(Periodogram {
        frequencies: grid.to_vec(),
        values,
        normalization: Normalization::PowerSpectrum,
        samples: times.len(),
    })
}

/// Uniform grid `df, 2 df, ...` up to `max_frequency`, with `df = 1 / (oversampling * duration)`.
pub fn frequency_grid(times: &[f64], oversampling: f64, max_frequency: f64) -> Result<Vec<f64>, SpectralError> {
    if times.len() < 2 || !(oversampling >= 1.0) || !(max_frequency > 0.0) {
        return Err(SpectralError::InvalidGrid("need two samples, oversampling >= 1 and a positive limit".into()));
    }
    let duration = times[times.len() - 1] - times[0];
    let df = 1.0 / (oversampling * duration);
    let count = (max_frequency / df).floor() as usize;
    Ok((1..=count).map(|m| m as f64 * df).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NyquistEstimate {
    /// Hz
    pub frequency: f64,
    /// Common divisor of all gaps in seconds, when one exists.
    pub lattice: Option<f64>,
}

impl NyquistEstimate {
    pub fn commensurate(&self) -> bool {
        self.lattice.is_some()
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Generalized Nyquist frequency `1 / (2 kappa)` where `kappa` divides every
/// sampling gap. Gaps are rounded to whole microseconds. If the only common
/// divisor is far below the smallest gap, the gaps are treated as
/// incommensurate and `1 / (2 min gap)` is returned without a lattice.
pub fn nyquist_random(times: &[f64]) -> Result<NyquistEstimate, SpectralError> {
    check_series(times, &vec![0.0; times.len()])?;
    let gaps: Vec<u64> = times.windows(2).map(|w| ((w[1] - w[0]) * 1e6).round() as u64).collect();
    let min_gap = *gaps.iter().min().expect("at least one gap");
    let min_raw = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if min_gap == 0 {
        return Err(SpectralError::InvalidInput("gaps below one microsecond".into()));
    }
    let g = gaps.iter().fold(0, |acc, &x| gcd(acc, x));
    if g * 1000 < min_gap {
        return Ok(NyquistEstimate {
            frequency: 1.0 / (2.0 * min_raw),
            lattice: None,
        });
    }
    let kappa = g as f64 * 1e-6;
    Ok(NyquistEstimate {
        frequency: 1.0 / (2.0 * kappa),
        lattice: Some(kappa),
    })
}

/// Level `z` of the variance-normalized periodogram exceeded by pure noise at
/// any of `independent` frequencies with probability `p`.
pub fn false_alarm_level(p: f64, independent: usize) -> Result<f64, SpectralError> {
    if !(p > 0.0 && p < 1.0) || independent == 0 {
        return Err(SpectralError::InvalidInput(format!("p = {p}, M = {independent}")));
    }
    // 1 - (1 - e^{-z})^M = p
    let inner = (1.0 - p).powf(1.0 / independent as f64);
    Ok(-(1.0 - inner).ln())
}

/// `false_alarm_level` expressed in a periodogram normalization for a series
/// of `samples` points with variance `variance`.
pub fn false_alarm_threshold(p: f64, independent: usize, variance: f64, samples: usize, normalization: Normalization) -> Result<f64, SpectralError> {
    let z = false_alarm_level(p, independent)?;
    Ok(match normalization {
        Normalization::PowerSpectralDensity => z * variance,
        Normalization::PowerSpectrum => z * variance / samples as f64,
    })
}

/// Sorts by time and keeps one randomly chosen sample among equal timestamps.
pub fn deduplicate(times: &[f64], values: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>), SpectralError> {
    if times.len() != values.len() {
        return Err(SpectralError::InvalidInput("times and values differ in length".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_t = Vec::with_capacity(times.len());
    let mut out_v = Vec::with_capacity(times.len());
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && times[order[end]] == times[order[start]] {
            end += 1;
        }
        let pick = order[rng.random_range(start..end)];
        out_t.push(times[pick]);
        out_v.push(values[pick]);
        start = end;
    }
    Ok((out_t, out_v))
}
