//! Sinusoid-plus-noise parameter estimation from an unevenly sampled series.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{
    clean, deduplicate, false_alarm_threshold, wiener_design, CleanConfig, CleanResult, Normalization, Periodogram, SpectralError,
    SpectrumSums, WienerFir,
};
use crate::orientation::{db_to_linear, POLAR_MEASUREMENT_NOISE_DB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acf {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
}

impl Acf {
    pub fn normalized(&self) -> Vec<f64> {
        let r0 = self.values[0];
        self.values.iter().map(|v| v / r0).collect()
    }

    /// First lag where the ACF changes sign, linearly interpolated.
    pub fn first_zero_crossing(&self) -> Option<f64> {
        self.values.windows(2).zip(self.lags.windows(2)).find_map(|(v, t)| {
            (v[0] > 0.0 && v[1] <= 0.0).then(|| t[0] + (t[1] - t[0]) * v[0] / (v[0] - v[1]))
        })
    }
}

/// Autocorrelation from a one-sided power spectrum on the grid `df, 2 df, ..., B`
/// of a record lasting `duration` seconds.
///
/// Bins are weighted as the two-sided sum they stand for, with the band edge
/// counted once, so that white noise with a band of `N / (2 duration)` gives
/// the sample variance at lag 0.
pub fn acf_from_spectrum(spectrum: &Periodogram, duration: f64, lags: &[f64]) -> Result<Acf, SpectralError> {
    let ps = spectrum.renormalized(Normalization::PowerSpectrum);
    let f = &ps.frequencies;
    if f.is_empty() || !(duration > 0.0) {
        return Err(SpectralError::InvalidGrid("empty spectrum or non-positive duration".into()));
    }
    let df = f[0];
    if f.iter().enumerate().any(|(m, v)| (v - (m + 1) as f64 * df).abs() > 1e-6 * df) {
        return Err(SpectralError::InvalidGrid("spectrum must sit on m * df".into()));
    }
    let last = f.len() - 1;
    let scale = duration * df;
    let values = lags
        .iter()
        .map(|&tau| {
            scale
                * ps.values
                    .iter()
                    .zip(f)
                    .enumerate()
                    .map(|(m, (p, fm))| {
                        let w = if m == last { 1.0 } else { 2.0 };
                        w * p * (2.0 * PI * fm * tau).cos()
                    })
                    .sum::<f64>()
        })
        .collect();
    Ok(Acf { lags: lags.to_vec(), values })
}

/// `R(0) A^2 (1 - R(eps)/R(0)) / (2 R(eps))`, valid for small `eps` where the
/// white part no longer contributes.
pub fn sigma_v_squared(amplitude: f64, r0: f64, r_eps: f64) -> f64 {
    r0 * amplitude * amplitude * (1.0 - r_eps / r0) / (2.0 * r_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub false_alarm_probability: f64,
    pub oversampling: f64,
    pub clean: CleanConfig,
    /// deg^2
    pub measurement_noise_var: f64,
    /// Upper edge of the band used for the ACF; defaults to the mean Nyquist
    /// frequency `N / (2 duration)`.
    pub band: Option<f64>,
    /// Lag for the variance formula; defaults to one regular-grid step.
    pub epsilon: Option<f64>,
    /// Longest ACF lag reported, s.
    pub max_lag: f64,
    pub dedup_seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            false_alarm_probability: 1e-3,
            oversampling: 5.0,
            clean: CleanConfig::default(),
            measurement_noise_var: db_to_linear(POLAR_MEASUREMENT_NOISE_DB),
            band: None,
            epsilon: None,
            max_lag: 1.0,
            dedup_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub samples: usize,
    pub duplicates_removed: usize,
    pub grid_step_hz: f64,
    pub grid_max_hz: f64,
    pub independent_frequencies: usize,
    /// Power-spectrum units.
    pub threshold: f64,
    pub peak_power: f64,
    pub peaks_above_threshold: usize,
    pub clean_iterations: usize,
    pub clean_converged: bool,
    pub clean_components: usize,
    pub beam_hwhm_hz: f64,
    pub band_hz: f64,
    pub lag_s: f64,
    pub epsilon_s: f64,
    pub r0: f64,
    pub r_epsilon: f64,
    /// The variance formula was unusable and `R(0) - A^2/2` was reported instead.
    pub variance_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub signal_detected: bool,
    pub amplitude: f64,
    pub frequency: Option<f64>,
    /// deg^2
    pub process_var: f64,
    pub filter: Option<WienerFir>,
    pub acf: Acf,
    pub cleaned: Periodogram,
    pub diagnostics: Diagnostics,
}

impl ParameterEstimate {
    pub fn process_std(&self) -> f64 {
        self.process_var.max(0.0).sqrt()
    }

    pub fn diagnostics_json(&self) -> String {
        serde_json::to_string_pretty(&self.diagnostics).expect("plain data serializes")
    }
}

/// Contiguous runs of the periodogram above `threshold`.
fn count_runs(values: &[f64], threshold: f64) -> usize {
    let mut runs = 0;
    let mut inside = false;
    for v in values {
        let above = *v > threshold;
        if above && !inside {
            runs += 1;
        }
        inside = above;
    }
    runs
}

fn truncate_band(p: &Periodogram, band: f64) -> Periodogram {
    let keep = p.frequencies.iter().take_while(|f| **f <= band * (1.0 + 1e-12)).count();
    Periodogram {
        frequencies: p.frequencies[..keep].to_vec(),
        values: p.values[..keep].to_vec(),
        normalization: p.normalization,
        samples: p.samples,
    }
}

/// Frequency and amplitude of the restored peak nearest the strongest component,
/// using `2 PS = A^2 / 2`. The residual left under the stopping threshold is part
/// of the restored value.
fn peak_of(result: &CleanResult) -> (f64, f64) {
    let spectrum = result.power_spectrum();
    let strongest = result
        .components
        .iter()
        .max_by(|a, b| a.amplitude.norm().total_cmp(&b.amplitude.norm()))
        .expect("at least one component");
    let radius = 3.0 * result.beam_hwhm;
    spectrum
        .frequencies
        .iter()
        .zip(&spectrum.values)
        .filter(|(f, _)| (**f - strongest.frequency).abs() <= radius)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(f, p)| (*f, 2.0 * p.sqrt()))
        .unwrap_or((strongest.frequency, 2.0 * strongest.amplitude.norm()))
}

/// Fits `A sin(2 pi f t + phi) + v` to a noisy, unevenly sampled series.
///
/// Lomb-Scargle with false-alarm gating, CLEAN, the strongest peak for `f` and
/// `A`, the Wiener smoother on the spectrum, then the variance formula on the
/// resulting ACF.
pub fn estimate_params(times: &[f64], values: &[f64], config: &EstimateConfig) -> Result<ParameterEstimate, SpectralError> {
    let original = times.len();
    let (times, values) = deduplicate(times, values, config.dedup_seed)?;
    let duplicates_removed = original - times.len();
    let sums = SpectrumSums::compute(&times, &values, config.oversampling, None)?;
    let n = sums.samples;
    let duration = sums.duration;
    let independent = sums.independent_frequencies();
    let threshold = false_alarm_threshold(config.false_alarm_probability, independent, sums.variance, n, Normalization::PowerSpectrum)?;
    let ls = sums.lomb_scargle(Normalization::PowerSpectrum);
    let peak_power = ls.values.iter().cloned().fold(0.0, f64::max);
    let peaks_above_threshold = count_runs(&ls.values, threshold);

    let band = config.band.unwrap_or(n as f64 / (2.0 * duration));
    let lag = 1.0 / (2.0 * band);
    let epsilon = config.epsilon.unwrap_or(lag);
    let lag_count = (config.max_lag / lag).floor() as usize;
    let mut lags: Vec<f64> = (0..=lag_count).map(|k| k as f64 * lag).collect();
    if !lags.iter().any(|l| (l - epsilon).abs() < 1e-12) {
        lags.push(epsilon);
        lags.sort_by(f64::total_cmp);
    }
    let eps_index = lags.iter().position(|l| (l - epsilon).abs() < 1e-12).expect("inserted");

    let result = clean(&sums, &config.clean, threshold)?;
    let cleaned = truncate_band(&result.power_spectrum(), band);
    let mut diagnostics = Diagnostics {
        samples: n,
        duplicates_removed,
        grid_step_hz: sums.df,
        grid_max_hz: sums.frequency(sums.max_index()),
        independent_frequencies: independent,
        threshold,
        peak_power,
        peaks_above_threshold,
        clean_iterations: result.iterations,
        clean_converged: result.converged,
        clean_components: result.components.len(),
        beam_hwhm_hz: result.beam_hwhm,
        band_hz: band,
        lag_s: lag,
        epsilon_s: epsilon,
        r0: 0.0,
        r_epsilon: 0.0,
        variance_fallback: false,
    };

    if peaks_above_threshold == 0 || result.components.is_empty() {
        let acf = acf_from_spectrum(&cleaned, duration, &lags)?;
        diagnostics.r0 = acf.values[0];
        diagnostics.r_epsilon = acf.values[eps_index];
        return Ok(ParameterEstimate {
            signal_detected: false,
            amplitude: 0.0,
            frequency: None,
            process_var: (acf.values[0] - config.measurement_noise_var).max(0.0),
            filter: None,
            acf,
            cleaned,
            diagnostics,
        });
    }

    let (frequency, amplitude) = peak_of(&result);
    let periodic = amplitude * amplitude / 2.0;
    let raw = acf_from_spectrum(&cleaned, duration, &[0.0])?;
    let initial_var = (raw.values[0] - periodic - config.measurement_noise_var).max(0.0);
    let filter = wiener_design(amplitude, frequency, initial_var, config.measurement_noise_var, lag).unwrap_or(WienerFir::identity(lag));
    let filtered = Periodogram {
        values: cleaned.frequencies.iter().zip(&cleaned.values).map(|(f, p)| filter.power_response(*f) * p).collect(),
        ..cleaned.clone()
    };
    let acf = acf_from_spectrum(&filtered, duration, &lags)?;
    let (r0, r_eps) = (acf.values[0], acf.values[eps_index]);
    diagnostics.r0 = r0;
    diagnostics.r_epsilon = r_eps;
    let process_var = if r_eps > 0.0 && r0 > 0.0 {
        sigma_v_squared(amplitude, r0, r_eps)
    } else {
        diagnostics.variance_fallback = true;
        (r0 - periodic).max(0.0)
    };
    Ok(ParameterEstimate {
        signal_detected: true,
        amplitude,
        frequency: Some(frequency),
        process_var,
        filter: Some(filter),
        acf,
        cleaned,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Activity;
    use crate::orientation::{noisy_measurement, normalized_acf, random_sampling_times, AngleKind, ProcessParams, SamplingPlan};

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn worked_sample_variance() {
        let v = sigma_v_squared(3.56, 1.0, 0.4);
        assert!((v - 9.5052).abs() < 1e-3);
        assert!((10.0 * v.log10() - 9.78).abs() < 0.01);
    }

    #[test]
    fn flat_spectrum_gives_a_spike() {
        let n = 1000;
        let duration = 10.0;
        let df = 0.02;
        let band = n as f64 / (2.0 * duration);
        let count = (band / df).round() as usize;
        let level = 2.0 / n as f64;
        let p = Periodogram {
            frequencies: (1..=count).map(|m| m as f64 * df).collect(),
            values: vec![level; count],
            normalization: Normalization::PowerSpectrum,
            samples: n,
        };
        let lags: Vec<f64> = (0..10).map(|k| k as f64 / (2.0 * band)).collect();
        let acf = acf_from_spectrum(&p, duration, &lags).unwrap();
        assert!((acf.values[0] - 2.0).abs() < 0.01);
        assert!(acf.values[1..].iter().all(|v| v.abs() < 0.02));
    }

    #[test]
    fn sinusoid_spectrum_gives_a_cosine() {
        let df = 0.01;
        let mut values = vec![0.0; 500];
        values[99] = 1.0;
        let p = Periodogram {
            frequencies: (1..=500).map(|m| m as f64 * df).collect(),
            values,
            normalization: Normalization::PowerSpectrum,
            samples: 10,
        };
        let lags = [0.0, 0.1, 0.25, 0.5];
        let acf = acf_from_spectrum(&p, 100.0, &lags).unwrap();
        let norm = acf.normalized();
        for (l, v) in lags.iter().zip(&norm) {
            assert!((v - (2.0 * PI * 1.0 * l).cos()).abs() < 1e-9);
        }
    }

    fn run(params: &ProcessParams, seed: u64) -> ParameterEstimate {
        let t = random_sampling_times(60.0, &SamplingPlan::default(), seed).unwrap();
        let s = noisy_measurement(params, &t, seed).unwrap();
        let cfg = EstimateConfig { measurement_noise_var: params.measurement_noise_var, ..Default::default() };
        estimate_params(&s.times, &s.values, &cfg).unwrap()
    }

    #[test]
    fn sitting_polar_closure() {
        let p = ProcessParams::preset(Activity::Sitting, AngleKind::Polar);
        let runs: Vec<ParameterEstimate> = (0..9).map(|s| run(&p, s)).collect();
        assert!(runs.iter().all(|r| r.signal_detected));
        let f = median(runs.iter().map(|r| r.frequency.unwrap()).collect());
        let a = median(runs.iter().map(|r| r.amplitude).collect());
        let sd = median(runs.iter().map(|r| r.process_std()).collect());
        assert!((f - p.frequency).abs() < 0.1, "f {f}");
        assert!((a / p.amplitude - 1.0).abs() < 0.15, "A {a}");
        assert!((sd / p.noise_std - 1.0).abs() < 0.2, "sigma {sd}");
    }

    #[test]
    fn regenerated_acf_matches() {
        for angle in [AngleKind::Polar, AngleKind::Azimuth] {
            let p = ProcessParams::preset(Activity::Walking, angle);
            let r = run(&p, 21);
            let q = ProcessParams { amplitude: r.amplitude, frequency: r.frequency.unwrap(), noise_std: r.process_std(), ..p };
            let worst = (1..=500)
                .map(|k| k as f64 * 1e-3)
                .map(|tau| (normalized_acf(&p, tau) - normalized_acf(&q, tau)).abs())
                .fold(0.0, f64::max);
            assert!(worst < 0.1, "{worst}");
        }
    }

    #[test]
    fn walking_polar_acf_first_zero() {
        let p = ProcessParams::preset(Activity::Walking, AngleKind::Polar);
        let zeros: Vec<f64> = (0..9).map(|s| {
            let r = run(&p, 100 + s);
            // the periodic part alone, as the white part is confined to lag 0
            let periodic = Acf { lags: r.acf.lags[1..].to_vec(), values: r.acf.values[1..].to_vec() };
            periodic.first_zero_crossing().unwrap()
        }).collect();
        let z = median(zeros);
        assert!((z - 0.1344).abs() < 0.02, "{z}");
    }

    #[test]
    fn white_noise_is_not_a_signal() {
        let p = ProcessParams { amplitude: 0.0, ..ProcessParams::preset(Activity::Sitting, AngleKind::Polar) };
        let detected = (0..40).filter(|&s| run(&p, 500 + s).signal_detected).count();
        assert!(detected <= 2, "{detected}");
    }

    #[test]
    fn diagnostics_serialize() {
        let p = ProcessParams::preset(Activity::Walking, AngleKind::Azimuth);
        let r = run(&p, 7);
        let json: serde_json::Value = serde_json::from_str(&r.diagnostics_json()).unwrap();
        assert!(json["threshold"].as_f64().unwrap() > 0.0);
        assert!(json["clean_iterations"].as_u64().unwrap() > 0);
    }
}
