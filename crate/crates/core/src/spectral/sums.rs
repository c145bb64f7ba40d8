use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use super::{check_series, demeaned, lomb_scargle_from_sums, nyquist_random, Normalization, Periodogram, SpectralError};

/// Largest zero-filled lattice transform used before falling back to direct sums.
const MAX_LATTICE_FFT: usize = 1 << 24;

/// Normalized Fourier sums of a series and of its sampling pattern on the grid
/// `m * df`:
///
/// `dirty[m] = (1/N) sum (x_k - mean) e^{-i 2 pi m df t_k}` for `m = 0..=M` and
/// `window[m] = (1/N) sum e^{-i 2 pi m df t_k}` for `m = 0..=2M`.
///
/// When all gaps are multiples of a common lattice step, both come from one
/// zero-filled FFT each. Otherwise the sums are evaluated directly.
#[derive(Debug, Clone)]
pub struct SpectrumSums {
    pub df: f64,
    pub samples: usize,
    pub duration: f64,
    pub variance: f64,
    pub dirty: Vec<Complex64>,
    pub window: Vec<Complex64>,
}

impl SpectrumSums {
    /// `max_frequency` defaults to the generalized Nyquist frequency.
    pub fn compute(times: &[f64], values: &[f64], oversampling: f64, max_frequency: Option<f64>) -> Result<Self, SpectralError> {
        check_series(times, values)?;
        if !(oversampling >= 1.0) {
            return Err(SpectralError::InvalidGrid("oversampling below 1".into()));
        }
        let x = demeaned(values);
        let n = times.len();
        let variance = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let duration = times[n - 1] - times[0];
        let nyquist = nyquist_random(times)?;
        let fmax = max_frequency.unwrap_or(nyquist.frequency);
        if !(fmax > 0.0) {
            return Err(SpectralError::InvalidGrid("non-positive frequency limit".into()));
        }

        if let Some(kappa) = nyquist.lattice {
            let steps: Vec<usize> = times.iter().map(|t| ((t - times[0]) / kappa).round() as usize).collect();
            let len = steps[n - 1] + 1;
            let size = ((oversampling * len as f64).ceil() as usize).next_power_of_two();
            if size <= MAX_LATTICE_FFT {
                return Ok(Self::from_lattice(&steps, &x, kappa, size, fmax, duration, variance));
            }
        }

        let df = 1.0 / (oversampling * duration);
        let m_max = (fmax / df).floor() as usize;
        let inv_n = 1.0 / n as f64;
        let rel: Vec<f64> = times.iter().map(|t| t - times[0]).collect();
        let dirty = (0..=m_max)
            .into_par_iter()
            .map(|m| {
                let w = 2.0 * PI * m as f64 * df;
                rel.iter().zip(&x).map(|(t, v)| Complex64::from_polar(*v, -w * t)).sum::<Complex64>() * inv_n
            })
            .collect();
        let window = (0..=2 * m_max)
            .into_par_iter()
            .map(|m| {
                let w = 2.0 * PI * m as f64 * df;
                rel.iter().map(|t| Complex64::from_polar(1.0, -w * t)).sum::<Complex64>() * inv_n
            })
            .collect();
        Ok(Self { df, samples: n, duration, variance, dirty, window })
    }

    fn from_lattice(steps: &[usize], x: &[f64], kappa: f64, size: usize, fmax: f64, duration: f64, variance: f64) -> Self {
        let n = x.len();
        let df = 1.0 / (size as f64 * kappa);
        let m_max = (fmax / df).floor() as usize;
        let fft = FftPlanner::new().plan_fft_forward(size);
        let mut data = vec![Complex64::new(0.0, 0.0); size];
        let mut pattern = vec![Complex64::new(0.0, 0.0); size];
        for (&s, &v) in steps.iter().zip(x) {
            data[s] = Complex64::new(v, 0.0);
            pattern[s] = Complex64::new(1.0, 0.0);
        }
        fft.process(&mut data);
        fft.process(&mut pattern);
        let inv_n = 1.0 / n as f64;
        let dirty = (0..=m_max).map(|m| data[m % size] * inv_n).collect();
        let window = (0..=2 * m_max).map(|m| pattern[m % size] * inv_n).collect();
        Self { df, samples: n, duration, variance, dirty, window }
    }

    /// Highest grid index.
    pub fn max_index(&self) -> usize {
        self.dirty.len() - 1
    }

    pub fn frequency(&self, m: usize) -> f64 {
        m as f64 * self.df
    }

    /// Window sum at signed grid index; the window is Hermitian.
    pub fn window_at(&self, m: i64) -> Complex64 {
        if m >= 0 {
            self.window[m as usize]
        } else {
            self.window[(-m) as usize].conj()
        }
    }

    /// Roughly independent frequencies between 0 and the grid limit.
    pub fn independent_frequencies(&self) -> usize {
        ((self.frequency(self.max_index()) * self.duration).round() as usize).max(1)
    }

    /// Lomb-Scargle periodogram on `m = 1..=M`.
    pub fn lomb_scargle(&self, normalization: Normalization) -> Periodogram {
        let n = self.samples as f64;
        let (frequencies, values) = (1..=self.max_index())
            .map(|m| {
                let p = lomb_scargle_from_sums(self.dirty[m] * n, self.window[2 * m] * n, n);
                let v = match normalization {
                    Normalization::PowerSpectralDensity => p,
                    Normalization::PowerSpectrum => p / n,
                };
                (self.frequency(m), v)
            })
            .unzip();
        Periodogram { frequencies, values, normalization, samples: self.samples }
    }
}
