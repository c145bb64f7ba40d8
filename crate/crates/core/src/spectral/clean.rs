//! Iterative deconvolution of the sampling window from a dirty spectrum.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Normalization, Periodogram, SpectralError, SpectrumSums};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub gain: f64,
    pub max_iterations: usize,
    /// After stopping, subtract what is left at the strongest component with
    /// unit gain, so a lone sinusoid is not split between components and
    /// residual.
    pub finish: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { gain: 0.25, max_iterations: 500, finish: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanComponent {
    pub index: usize,
    pub frequency: f64,
    /// Complex amplitude at `+frequency`; a real sinusoid of amplitude A has `|c| = A/2`.
    pub amplitude: Complex64,
}

#[derive(Debug, Clone)]
pub struct CleanResult {
    pub df: f64,
    pub samples: usize,
    pub components: Vec<CleanComponent>,
    pub residual: Vec<Complex64>,
    pub restored: Vec<Complex64>,
    pub iterations: usize,
    /// Residual fell below the threshold before the iteration cap.
    pub converged: bool,
    /// Half width at half maximum of the restoring beam, Hz.
    pub beam_hwhm: f64,
}

impl CleanResult {
    fn periodogram(&self, spectrum: &[Complex64]) -> Periodogram {
        let (frequencies, values) = spectrum
            .iter()
            .enumerate()
            .skip(1)
            .map(|(m, c)| (m as f64 * self.df, c.norm_sqr()))
            .unzip();
        Periodogram {
            frequencies,
            values,
            normalization: Normalization::PowerSpectrum,
            samples: self.samples,
        }
    }

    pub fn power_spectrum(&self) -> Periodogram {
        self.periodogram(&self.restored)
    }

    pub fn residual_spectrum(&self) -> Periodogram {
        self.periodogram(&self.residual)
    }

    /// Components whose frequency lies within `radius` Hz of `frequency`.
    pub fn components_near(&self, frequency: f64, radius: f64) -> impl Iterator<Item = &CleanComponent> {
        self.components.iter().filter(move |c| (c.frequency - frequency).abs() <= radius)
    }
}

/// Half width at half maximum of a unit-peak Gaussian beam whose power
/// integrates to that of a sinusoid over the record, in grid steps.
///
/// This is about 10% wider than the half-maximum width of an unweighted
/// main lobe, which otherwise drops part of each restored component's power.
fn beam_hwhm(sums: &SpectrumSums) -> f64 {
    // integral of exp(-2 ln2 (f/h)^2) df equals 1 / duration
    let h = 1.0 / (sums.duration * (PI / (2.0 * LN_2)).sqrt());
    h / sums.df
}

/// Subtracts `gain` times the least-squares sinusoid at grid index `peak`,
/// returning the removed positive-frequency amplitude.
fn subtract(sums: &SpectrumSums, residual: &mut [Complex64], peak: usize, gain: f64) -> Complex64 {
    let r = residual[peak];
    let w2 = sums.window[2 * peak];
    let denom = 1.0 - w2.norm_sqr();
    let a = if denom > 1e-9 { (r - r.conj() * w2) / denom } else { 0.5 * r };
    let step = a * gain;
    let p = peak as i64;
    for (m, value) in residual.iter_mut().enumerate() {
        let m = m as i64;
        *value -= step * sums.window_at(m - p) + step.conj() * sums.window_at(m + p);
    }
    step
}

/// Removes the window response of the strongest peak, scaled by `gain`, until
/// no residual value of `|R|^2` (power-spectrum units) exceeds `threshold`.
/// Components are restored with a Gaussian beam and the residual is added back.
pub fn clean(sums: &SpectrumSums, config: &CleanConfig, threshold: f64) -> Result<CleanResult, SpectralError> {
    if !(config.gain > 0.0 && config.gain <= 1.0) {
        return Err(SpectralError::InvalidInput(format!("gain {} outside (0, 1]", config.gain)));
    }
    if !(threshold >= 0.0) {
        return Err(SpectralError::InvalidInput(format!("threshold {threshold}")));
    }
    let m_max = sums.max_index();
    if m_max < 1 {
        return Err(SpectralError::InvalidGrid("grid has no positive frequency".into()));
    }
    let mut residual = sums.dirty.clone();
    let mut found: BTreeMap<usize, Complex64> = BTreeMap::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        let (peak, power) = residual
            .iter()
            .enumerate()
            .skip(1)
            .map(|(m, c)| (m, c.norm_sqr()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty grid");
        if power <= threshold {
            converged = true;
            break;
        }
        let step = subtract(sums, &mut residual, peak, config.gain);
        *found.entry(peak).or_insert(Complex64::new(0.0, 0.0)) += step;
        iterations += 1;
    }
    if config.finish {
        if let Some((&strongest, _)) = found.iter().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())) {
            let lo = strongest.saturating_sub(2).max(1);
            let hi = (strongest + 2).min(m_max);
            let peak = (lo..=hi).max_by(|&a, &b| residual[a].norm_sqr().total_cmp(&residual[b].norm_sqr())).expect("non-empty");
            let step = subtract(sums, &mut residual, peak, 1.0);
            *found.entry(peak).or_insert(Complex64::new(0.0, 0.0)) += step;
        }
    }
    if !converged {
        let peak = residual.iter().skip(1).map(|c| c.norm_sqr()).fold(0.0, f64::max);
        converged = peak <= threshold;
    }

    let hwhm = beam_hwhm(sums);
    let reach = (6.0 * hwhm).ceil() as i64;
    let mut restored = residual.clone();
    for (&p, &c) in &found {
        let p = p as i64;
        for m in (p - reach).max(0)..=(p + reach).min(m_max as i64) {
            let k = (m - p) as f64 / hwhm;
            restored[m as usize] += c * (-LN_2 * k * k).exp();
        }
        for m in 0..=(reach - p).min(m_max as i64) {
            let k = (m + p) as f64 / hwhm;
            restored[m as usize] += c.conj() * (-LN_2 * k * k).exp();
        }
    }
    let components = found
        .into_iter()
        .map(|(index, amplitude)| CleanComponent { index, frequency: index as f64 * sums.df, amplitude })
        .collect();
    Ok(CleanResult {
        df: sums.df,
        samples: sums.samples,
        components,
        residual,
        restored,
        iterations,
        converged,
        beam_hwhm: hwhm * sums.df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orientation::{random_sampling_times, SamplingPlan};
    use crate::spectral::false_alarm_threshold;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn series(seed: u64, amplitude: f64, freq: f64, noise: f64) -> (Vec<f64>, Vec<f64>) {
        let t = random_sampling_times(30.0, &SamplingPlan::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let dist = Normal::new(0.0, noise).unwrap();
        let x = t.iter().map(|t| amplitude * (2.0 * PI * freq * t + 0.7).sin() + dist.sample(&mut rng)).collect();
        (t, x)
    }

    fn threshold(sums: &SpectrumSums) -> f64 {
        false_alarm_threshold(1e-3, sums.independent_frequencies(), sums.variance, sums.samples, Normalization::PowerSpectrum).unwrap()
    }

    #[test]
    fn recovers_a_single_sinusoid() {
        let (t, x) = series(1, 3.0, 1.3, 1.0);
        let sums = SpectrumSums::compute(&t, &x, 5.0, None).unwrap();
        let thr = threshold(&sums);
        let res = clean(&sums, &CleanConfig::default(), thr).unwrap();
        assert!(res.converged);
        assert!(!res.components.is_empty());
        assert!(res.components.iter().all(|c| (c.frequency - 1.3).abs() < 0.1));
        let ps = res.power_spectrum();
        let (i, peak) = ps.peak().unwrap();
        assert!((peak - 1.3).abs() < 0.02);
        let amplitude = 2.0 * ps.values[i].sqrt();
        assert!((amplitude / 3.0 - 1.0).abs() < 0.05, "{amplitude}");
        assert!(res.residual.iter().skip(1).all(|c| c.norm_sqr() <= thr));
        assert!(res.beam_hwhm > 0.0 && res.beam_hwhm < 0.1);
    }

    #[test]
    fn second_pass_removes_almost_nothing() {
        let (t, x) = series(2, 2.0, 0.9, 1.0);
        let sums = SpectrumSums::compute(&t, &x, 5.0, None).unwrap();
        let thr = threshold(&sums);
        let first = clean(&sums, &CleanConfig::default(), thr).unwrap();
        let energy = |v: &[Complex64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>();
        let again = SpectrumSums { dirty: first.restored.clone(), ..sums };
        let second = clean(&again, &CleanConfig::default(), thr).unwrap();
        let removed = energy(&first.restored) - energy(&second.residual);
        assert!(removed < 0.01 * energy(&first.restored) + energy(&first.restored) - energy(&first.residual));
        let residual_only = SpectrumSums { dirty: first.residual.clone(), ..again };
        let third = clean(&residual_only, &CleanConfig { finish: false, ..Default::default() }, thr).unwrap();
        assert_eq!(third.iterations, 0);
    }

    #[test]
    fn even_sampling_keeps_the_peak() {
        let n = 2000;
        let t: Vec<f64> = (0..n).map(|k| k as f64 * 0.01).collect();
        let df = SpectrumSums::compute(&t, &t, 5.0, None).unwrap().df;
        let f0 = (1.5 / df).round() * df;
        let x: Vec<f64> = t.iter().map(|t| 2.0 * (2.0 * PI * f0 * t).cos()).collect();
        let sums = SpectrumSums::compute(&t, &x, 5.0, None).unwrap();
        let res = clean(&sums, &CleanConfig::default(), 1e-6).unwrap();
        let dirty = sums.lomb_scargle(Normalization::PowerSpectrum);
        let (i, f) = dirty.peak().unwrap();
        let restored = res.power_spectrum();
        assert!((restored.values[i] / dirty.values[i] - 1.0).abs() < 0.01, "{} {}", restored.values[i], dirty.values[i]);
        assert!((restored.peak().unwrap().1 - f).abs() <= sums.df);
    }

    #[test]
    fn single_peak_above_false_alarm() {
        for seed in 10..15 {
            let (t, x) = series(seed, 2.0, 1.7, 2.0);
            let sums = SpectrumSums::compute(&t, &x, 5.0, None).unwrap();
            let thr = threshold(&sums);
            let dirty = sums.lomb_scargle(Normalization::PowerSpectrum);
            let res = clean(&sums, &CleanConfig::default(), thr).unwrap();
            let ps = res.power_spectrum();
            let mut runs = Vec::new();
            let mut inside = false;
            for (f, v) in ps.frequencies.iter().zip(&ps.values) {
                if *v > thr && !inside {
                    runs.push(*f);
                }
                inside = *v > thr;
            }
            assert_eq!(runs.len(), 1, "seed {seed}: {runs:?}");
            let (i, f) = ps.peak().unwrap();
            let (_, fd) = dirty.peak().unwrap();
            assert!((f - fd).abs() <= sums.df + 1e-12);
            assert!((f - 1.7).abs() < 0.02);
            // strongest peak away from the main lobe is at least 10 dB down
            let lobe = 2.0 / sums.duration;
            let alias = ps
                .frequencies
                .iter()
                .zip(&ps.values)
                .filter(|(g, _)| (**g - f).abs() > lobe)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max);
            assert!(ps.values[i] / alias > 10.0, "seed {seed}");
        }
    }

    #[test]
    fn iteration_cap_is_reported() {
        let (t, x) = series(3, 2.0, 0.9, 0.5);
        let sums = SpectrumSums::compute(&t, &x, 5.0, None).unwrap();
        let res = clean(&sums, &CleanConfig { gain: 0.01, max_iterations: 3, finish: false }, threshold(&sums)).unwrap();
        assert_eq!(res.iterations, 3);
        assert!(!res.converged);
    }

    #[test]
    fn rejects_bad_gain() {
        let (t, x) = series(4, 1.0, 1.0, 1.0);
        let sums = SpectrumSums::compute(&t, &x, 2.0, Some(5.0)).unwrap();
        assert!(clean(&sums, &CleanConfig { gain: 0.0, max_iterations: 1, finish: false }, 0.0).is_err());
        assert!(clean(&sums, &CleanConfig { gain: 1.5, max_iterations: 1, finish: false }, 0.0).is_err());
    }
}
