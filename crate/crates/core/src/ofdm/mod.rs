//! DC-biased OFDM over an optical channel: per-subcarrier SNR and BER,
//! target-SNR search and the penalty of ignoring reflections.

mod simulation;

pub use simulation::{clip, simulate_link, Modulator, QamMapper, SimulationResult};

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::channel::{ChannelError, ChannelResponse};

#[derive(Debug, Error)]
pub enum OfdmError {
    #[error("invalid OFDM configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("negative subcarrier SNR {0}")]
    NegativeSnr(f64),
    #[error("target BER {target:e} cannot be reached: BER stays at {best:e} or above")]
    NoSolution { target: f64, best: f64 },
    #[error("direct path is blocked, penalty undefined")]
    LosBlocked,
    #[error("channel DC gain is zero")]
    ZeroGain,
    #[error("n_symbols must be at least 1")]
    NoSymbols,
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Link parameters. Defaults follow a 100 Mb/s 16-QAM link on 128 subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfdmConfig {
    pub subcarriers: usize,
    pub used_subcarriers: usize,
    pub cyclic_prefix: usize,
    pub modulation_order: usize,
    /// bit/s
    pub bit_rate: f64,
    /// Lower clipping level in units of the signal standard deviation.
    pub clip_lower: f64,
    pub clip_upper: f64,
    /// DC bias in units of the signal standard deviation. Sets the average
    /// optical power used by the received-SNR definition.
    pub bias_ratio: f64,
    /// Hz
    pub led_cutoff: f64,
    /// DAC and ADC cutoff in Hz; `None` means the OFDM bandwidth.
    pub converter_cutoff: Option<f64>,
    /// Single-sided noise PSD, A^2/Hz.
    pub noise_psd: f64,
    /// A/W
    pub responsivity: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            subcarriers: 128,
            used_subcarriers: 108,
            cyclic_prefix: 7,
            modulation_order: 16,
            bit_rate: 100e6,
            clip_lower: 3.2,
            clip_upper: 3.2,
            bias_ratio: 2.0,
            led_cutoff: 40e6,
            converter_cutoff: None,
            noise_psd: 1e-21,
            responsivity: 0.6,
        }
    }
}

/// Symbol rate, sampling rate and signal bandwidth, all in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub symbol_rate: f64,
    pub sampling_rate: f64,
    pub bandwidth: f64,
}

impl OfdmConfig {
    pub fn with_led_cutoff(self, led_cutoff: f64) -> Self {
        Self { led_cutoff, ..self }
    }

    pub fn validate(&self) -> Result<(), OfdmError> {
        let bad = |m: &str| Err(OfdmError::InvalidConfig(m.to_string()));
        let n = self.subcarriers;
        if n < 4 || !n.is_power_of_two() {
            return bad("subcarrier count must be a power of two >= 4");
        }
        if self.used_subcarriers == 0 || self.used_subcarriers % 2 != 0 || self.used_subcarriers > n - 2 {
            return bad("used subcarriers must be even, nonzero and at most N - 2");
        }
        let m = self.modulation_order;
        let side = (m as f64).sqrt().round() as usize;
        if m < 4 || side * side != m || !side.is_power_of_two() {
            return bad("modulation order must be a square power of two (4, 16, 64, ...)");
        }
        let positive = [
            self.bit_rate,
            self.clip_lower,
            self.clip_upper,
            self.bias_ratio,
            self.led_cutoff,
            self.noise_psd,
            self.responsivity,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("rates, clipping ratios, bias, cutoff, noise PSD and responsivity must be positive");
        }
        if let Some(c) = self.converter_cutoff {
            if !(c.is_finite() && c > 0.0) {
                return bad("converter cutoff must be positive");
            }
        }
        Ok(())
    }

    pub fn bits_per_symbol(&self) -> f64 {
        (self.modulation_order as f64).log2()
    }

    /// Indices of the independently modulated subcarriers, `1..=N_u/2`.
    /// Their mirrors `N - n` carry the conjugates.
    pub fn data_subcarriers(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.used_subcarriers / 2
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        sampling_rate(self).sampling_rate / self.subcarriers as f64
    }

    pub fn subcarrier_frequencies(&self) -> Vec<f64> {
        let df = self.subcarrier_spacing();
        self.data_subcarriers().map(|n| n as f64 * df).collect()
    }

    /// DC plus every data subcarrier frequency: the grid a channel response
    /// needs for this link.
    pub fn channel_grid(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.subcarrier_frequencies()).collect()
    }

    pub fn converter_cutoff(&self) -> f64 {
        self.converter_cutoff.unwrap_or_else(|| sampling_rate(self).bandwidth)
    }

    /// Variance of the unclipped time-domain signal with unit-power symbols
    /// on every used subcarrier.
    pub fn signal_variance(&self) -> f64 {
        self.used_subcarriers as f64
    }

    /// Average optical transmit power at a given power scale.
    pub fn transmit_power(&self, power_scale: f64) -> f64 {
        self.bias_ratio * (self.signal_variance() * power_scale).sqrt()
    }

    fn power_scale_for(&self, transmit_power: f64) -> f64 {
        (transmit_power / self.bias_ratio).powi(2) / self.signal_variance()
    }
}

/// `R_s = 2 R_b / log2 M`, `f_s = (N / N_u) R_s (N + N_cp) / N` and
/// bandwidth `f_s N_u / (2 N)`.
pub fn sampling_rate(config: &OfdmConfig) -> Rates {
    let symbol_rate = 2.0 * config.bit_rate / config.bits_per_symbol();
    let oversampling = config.subcarriers as f64 / config.used_subcarriers as f64;
    let n = config.subcarriers as f64;
    let sampling_rate = oversampling * symbol_rate * (n + config.cyclic_prefix as f64) / n;
    Rates {
        symbol_rate,
        sampling_rate,
        bandwidth: sampling_rate / (2.0 * oversampling),
    }
}

/// Bussgang gain of a Gaussian signal clipped at `-lower` and `+upper` standard deviations.
pub fn clipping_attenuation(lower: f64, upper: f64) -> f64 {
    (1.0 - (q_function(lower) + q_function(upper))).clamp(0.0, 1.0)
}

// Reverse Bessel polynomial of degree 5, constant term first.
const BESSEL5: [f64; 6] = [945.0, 945.0, 420.0, 105.0, 15.0, 1.0];

fn bessel_raw(w: f64) -> Complex64 {
    let s = Complex64::new(0.0, w);
    let den = BESSEL5.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c);
    BESSEL5[0] / den
}

/// Angular frequency where the delay-normalized prototype is 3 dB down.
fn bessel_corner() -> f64 {
    static CORNER: OnceLock<f64> = OnceLock::new();
    *CORNER.get_or_init(|| {
        let target = std::f64::consts::FRAC_1_SQRT_2;
        let (mut lo, mut hi) = (0.1, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if bessel_raw(mid).norm() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

/// Fifth-order Bessel low-pass, 3 dB down at `cutoff`.
pub fn bessel_lowpass(frequency: f64, cutoff: f64) -> Complex64 {
    bessel_raw(bessel_corner() * frequency / cutoff)
}

/// First-order Butterworth low-pass.
pub fn first_order_lowpass(frequency: f64, cutoff: f64) -> Complex64 {
    1.0 / Complex64::new(1.0, frequency / cutoff)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontEnd {
    pub dac: Complex64,
    pub led: Complex64,
    pub adc: Complex64,
}

impl FrontEnd {
    /// Transmit chain seen by the signal before the channel.
    pub fn transmit(&self) -> Complex64 {
        self.dac * self.led
    }
}

/// DAC (zero-order hold with Bessel smoothing), LED and ADC responses at `frequency`.
pub fn front_end_response(config: &OfdmConfig, frequency: f64) -> FrontEnd {
    let fs = sampling_rate(config).sampling_rate;
    let cutoff = config.converter_cutoff();
    let x = frequency / fs;
    let hold = Complex64::from_polar(sinc(x), -PI * x);
    FrontEnd {
        dac: hold * bessel_lowpass(frequency, cutoff),
        led: first_order_lowpass(frequency, config.led_cutoff),
        adc: bessel_lowpass(frequency, cutoff),
    }
}

/// DC bias level `2 r sum |H_DAC(f_n)|^2` over the data subcarriers, with
/// `r` the smaller clipping ratio. Reported only; it does not enter the SNR.
pub fn dc_bias_level(config: &OfdmConfig) -> f64 {
    let r = config.clip_lower.min(config.clip_upper);
    2.0 * r
        * config
            .subcarrier_frequencies()
            .iter()
            .map(|&f| front_end_response(config, f).dac.norm_sqr())
            .sum::<f64>()
}

/// Per-subcarrier electrical SNR for the data subcarriers `1..=N_u/2`.
///
/// The ADC response multiplies signal and noise alike and is left out.
pub fn snr_per_subcarrier(config: &OfdmConfig, channel: &ChannelResponse, power_scale: f64) -> Result<Vec<f64>, OfdmError> {
    config.validate()?;
    let fs = sampling_rate(config).sampling_rate;
    let k = clipping_attenuation(config.clip_lower, config.clip_upper);
    let r = config.responsivity;
    let noise = fs * config.noise_psd / (2.0 * config.subcarriers as f64);
    config
        .subcarrier_frequencies()
        .iter()
        .map(|&f| {
            let h = front_end_response(config, f).transmit() * channel.total_at(f)?;
            Ok(power_scale * k * k * r * r * h.norm_sqr() / noise)
        })
        .collect()
}

/// Approximate M-QAM bit error rate per subcarrier and its mean.
pub fn ber(config: &OfdmConfig, snr: &[f64]) -> Result<(Vec<f64>, f64), OfdmError> {
    if snr.is_empty() {
        return Err(OfdmError::InvalidConfig("no subcarriers".into()));
    }
    let m = config.modulation_order as f64;
    let scale = 4.0 / m.log2() * (1.0 - 1.0 / m.sqrt());
    let per: Vec<f64> = snr
        .iter()
        .map(|&g| {
            if g < 0.0 || g.is_nan() {
                Err(OfdmError::NegativeSnr(g))
            } else {
                Ok((scale * q_function((3.0 * g / (m - 1.0)).sqrt())).min(0.5))
            }
        })
        .collect::<Result<_, _>>()?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `R^2 H(0)^2 P_t^2 / (N_0 f_s / 2)` in dB.
pub fn received_snr(config: &OfdmConfig, channel: &ChannelResponse, transmit_power: f64) -> Result<f64, OfdmError> {
    let h0 = channel.dc_gain()?;
    Ok(received_snr_from_gain(config, h0, transmit_power))
}

fn received_snr_from_gain(config: &OfdmConfig, dc_gain: f64, transmit_power: f64) -> f64 {
    let fs = sampling_rate(config).sampling_rate;
    let r = config.responsivity;
    to_db(r * r * dc_gain * dc_gain * transmit_power * transmit_power / (config.noise_psd * fs / 2.0))
}

/// Power scale that puts the received SNR at `snr_db` on `channel`.
pub fn power_scale_for_snr(config: &OfdmConfig, channel: &ChannelResponse, snr_db: f64) -> Result<f64, OfdmError> {
    let h0 = channel.dc_gain()?;
    if h0 <= 0.0 {
        return Err(OfdmError::ZeroGain);
    }
    let fs = sampling_rate(config).sampling_rate;
    let r = config.responsivity;
    let linear = 10f64.powf(snr_db / 10.0);
    let pt = (linear * config.noise_psd * fs / 2.0).sqrt() / (r * h0);
    Ok(config.power_scale_for(pt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkMode {
    Full,
    LosOnly,
}

/// Per-subcarrier outcome of one analytical evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub mode: LinkMode,
    pub subcarriers: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub snr: Vec<f64>,
    pub ber: Vec<f64>,
    pub average_ber: f64,
    pub received_snr_db: f64,
}

impl LinkReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), OfdmError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subcarrier", "frequency_hz", "snr_db", "ber"])?;
        for i in 0..self.subcarriers.len() {
            w.write_record([
                self.subcarriers[i].to_string(),
                format!("{:e}", self.frequencies[i]),
                format!("{:.6}", to_db(self.snr[i])),
                format!("{:e}", self.ber[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `channel` at a given power scale.
pub fn evaluate_link(config: &OfdmConfig, channel: &ChannelResponse, mode: LinkMode, power_scale: f64) -> Result<LinkReport, OfdmError> {
    let snr = snr_per_subcarrier(config, channel, power_scale)?;
    let (per, average_ber) = ber(config, &snr)?;
    Ok(LinkReport {
        mode,
        subcarriers: config.data_subcarriers().collect(),
        frequencies: config.subcarrier_frequencies(),
        snr,
        ber: per,
        average_ber,
        received_snr_db: received_snr(config, channel, config.transmit_power(power_scale))?,
    })
}

const SCALE_BOUNDS: (f64, f64) = (1e-12, 1e12);
const BISECTION_STEPS: usize = 200;

/// Power scale at which the mean BER equals `target`.
pub fn power_scale_for_ber(config: &OfdmConfig, channel: &ChannelResponse, target: f64) -> Result<f64, OfdmError> {
    if !(target > 0.0 && target < 0.5) {
        return Err(OfdmError::InvalidConfig(format!("target BER {target} outside (0, 0.5)")));
    }
    // gamma is linear in the scale, so evaluate it once.
    let unit = snr_per_subcarrier(config, channel, 1.0)?;
    let mean_ber = |s: f64| -> Result<f64, OfdmError> {
        let scaled: Vec<f64> = unit.iter().map(|g| g * s).collect();
        Ok(ber(config, &scaled)?.1)
    };
    let (mut lo, mut hi) = (SCALE_BOUNDS.0.ln(), SCALE_BOUNDS.1.ln());
    let at_hi = mean_ber(hi.exp())?;
    if at_hi > target {
        return Err(OfdmError::NoSolution { target, best: at_hi });
    }
    let at_lo = mean_ber(lo.exp())?;
    if at_lo < target {
        return Err(OfdmError::InvalidConfig(format!("target BER {target:e} already met at the lowest power scale")));
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let p = mean_ber(mid.exp())?;
        if ((p - target) / target).abs() <= 1e-6 {
            return Ok(mid.exp());
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Received SNR (dB) needed for the mean BER to reach `target`.
pub fn snr_target(config: &OfdmConfig, channel: &ChannelResponse, target: f64) -> Result<f64, OfdmError> {
    let s = power_scale_for_ber(config, channel, target)?;
    received_snr(config, channel, config.transmit_power(s))
}

/// Extra SNR needed at `target` when reflections are included, relative to
/// the direct path alone.
pub fn snr_penalty(config: &OfdmConfig, full: &ChannelResponse, los_only: &ChannelResponse, target: f64) -> Result<f64, OfdmError> {
    let (los_dc, _) = los_only.dc()?;
    if los_dc.norm() == 0.0 {
        return Err(OfdmError::LosBlocked);
    }
    Ok(snr_target(config, full, target)? - snr_target(config, los_only, target)?)
}
