//! Sample-level Monte Carlo of the DC-OFDM link.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{clipping_attenuation, front_end_response, power_scale_for_snr, sampling_rate, OfdmConfig, OfdmError};
use crate::channel::ChannelResponse;

/// Gray-coded square QAM with unit average energy.
#[derive(Debug, Clone, Copy)]
pub struct QamMapper {
    side: usize,
    bits_per_axis: u32,
    scale: f64,
}

fn gray(i: u32) -> u32 {
    i ^ (i >> 1)
}

fn gray_inverse(mut g: u32) -> u32 {
    let mut i = g;
    while g > 0 {
        g >>= 1;
        i ^= g;
    }
    i
}

impl QamMapper {
    pub fn new(order: usize) -> Self {
        let side = (order as f64).sqrt().round() as usize;
        Self {
            side,
            bits_per_axis: side.trailing_zeros(),
            scale: (1.5 / (order as f64 - 1.0)).sqrt(),
        }
    }

    pub fn bits_per_symbol(&self) -> u32 {
        2 * self.bits_per_axis
    }

    fn level(&self, bits: u32) -> f64 {
        (2.0 * gray_inverse(bits) as f64 - (self.side as f64 - 1.0)) * self.scale
    }

    fn decide(&self, y: f64) -> u32 {
        let idx = ((y / self.scale + self.side as f64 - 1.0) / 2.0).round();
        gray(idx.clamp(0.0, self.side as f64 - 1.0) as u32)
    }

    pub fn map(&self, bits: u32) -> Complex64 {
        let mask = (1 << self.bits_per_axis) - 1;
        Complex64::new(self.level(bits >> self.bits_per_axis), self.level(bits & mask))
    }

    pub fn demap(&self, symbol: Complex64) -> u32 {
        (self.decide(symbol.re) << self.bits_per_axis) | self.decide(symbol.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub bits: u64,
    pub errors: u64,
    pub ber: f64,
    /// No error was observed, so `ber` is only an upper-bound hint.
    pub low_confidence: bool,
}

/// Builds Hermitian frequency-domain frames and their real time-domain bodies.
pub struct Modulator {
    n: usize,
    data: std::ops::RangeInclusive<usize>,
    mapper: QamMapper,
    inverse: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex64>,
}

impl Modulator {
    pub fn new(config: &OfdmConfig, planner: &mut FftPlanner<f64>) -> Self {
        Self {
            n: config.subcarriers,
            data: config.data_subcarriers(),
            mapper: QamMapper::new(config.modulation_order),
            inverse: planner.plan_fft_inverse(config.subcarriers),
            buffer: vec![Complex64::new(0.0, 0.0); config.subcarriers],
        }
    }

    /// Random symbol: the bit labels per data subcarrier and the unscaled
    /// time-domain body `x[k] = sum_n X_n exp(j 2 pi n k / N)`.
    pub fn next<R: Rng>(&mut self, rng: &mut R, labels: &mut Vec<u32>, body: &mut Vec<f64>) {
        let width = self.mapper.bits_per_symbol();
        self.buffer.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
        labels.clear();
        for n in self.data.clone() {
            let bits = rng.random::<u32>() & ((1 << width) - 1);
            let x = self.mapper.map(bits);
            self.buffer[n] = x;
            self.buffer[self.n - n] = x.conj();
            labels.push(bits);
        }
        self.inverse.process(&mut self.buffer);
        body.clear();
        body.extend(self.buffer.iter().map(|c| c.re));
    }
}

/// Clips to `[lower, upper]`.
pub fn clip(x: f64, lower: f64, upper: f64) -> f64 {
    x.clamp(lower, upper)
}

/// Simulates `n_symbols` OFDM symbols over `channel` with the received SNR set
/// to `target_snr_db`, and counts bit errors after one-tap equalization.
///
/// The channel and front ends act as a circular convolution on each symbol
/// body, which is what a cyclic prefix covering the channel memory yields
/// after prefix removal.
pub fn simulate_link(
    config: &OfdmConfig,
    channel: &ChannelResponse,
    target_snr_db: f64,
    n_symbols: usize,
    seed: u64,
) -> Result<SimulationResult, OfdmError> {
    config.validate()?;
    if n_symbols == 0 {
        return Err(OfdmError::NoSymbols);
    }
    let n = config.subcarriers;
    let cp = config.cyclic_prefix;
    let fs = sampling_rate(config).sampling_rate;
    let scale = power_scale_for_snr(config, channel, target_snr_db)?.sqrt();
    let sigma = config.signal_variance().sqrt();
    let (lower, upper) = (-config.clip_lower * sigma * scale, config.clip_upper * sigma * scale);
    let k_gain = clipping_attenuation(config.clip_lower, config.clip_upper);
    let noise_std = (config.noise_psd * fs / 2.0).sqrt();
    let r = config.responsivity;

    let data: Vec<usize> = config.data_subcarriers().collect();
    let spacing = config.subcarrier_spacing();
    let mut link = Vec::with_capacity(data.len());
    let mut receive = Vec::with_capacity(data.len());
    for &k in &data {
        let f = k as f64 * spacing;
        let fe = front_end_response(config, f);
        link.push(r * fe.transmit() * channel.total_at(f)?);
        receive.push(fe.adc);
    }
    let equalizer: Vec<Complex64> = link
        .iter()
        .zip(&receive)
        .map(|(h, a)| 1.0 / (h * a * (n as f64 * scale * k_gain)))
        .collect();

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(n);
    let mut modulator = Modulator::new(config, &mut planner);
    let mapper = QamMapper::new(config.modulation_order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels = Vec::with_capacity(data.len());
    let mut body = Vec::with_capacity(n);
    let mut frame = vec![0.0; n + cp];
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let mut noise = vec![Complex64::new(0.0, 0.0); n];
    let mut errors = 0u64;

    for _ in 0..n_symbols {
        modulator.next(&mut rng, &mut labels, &mut body);
        for (k, slot) in frame.iter_mut().enumerate() {
            let src = if k < cp { body[n - cp + k] } else { body[k - cp] };
            *slot = clip(src * scale, lower, upper);
        }
        // receiver drops the prefix
        for (s, &x) in spectrum.iter_mut().zip(&frame[cp..]) {
            *s = Complex64::new(x, 0.0);
        }
        for w in noise.iter_mut() {
            *w = Complex64::new(noise_std * rng.sample::<f64, _>(StandardNormal), 0.0);
        }
        forward.process(&mut spectrum);
        forward.process(&mut noise);
        for (i, &k) in data.iter().enumerate() {
            let received = receive[i] * (link[i] * spectrum[k] + noise[k]);
            let decided = mapper.demap(received * equalizer[i]);
            errors += (decided ^ labels[i]).count_ones() as u64;
        }
    }
    let bits = n_symbols as u64 * data.len() as u64 * mapper.bits_per_symbol() as u64;
    Ok(SimulationResult {
        bits,
        errors,
        ber: errors as f64 / bits as f64,
        low_confidence: errors == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ofdm::{ber, snr_per_subcarrier};

    #[test]
    fn gray_mapping_round_trip() {
        for order in [4usize, 16, 64] {
            let m = QamMapper::new(order);
            let mut energy = 0.0;
            for b in 0..order as u32 {
                let s = m.map(b);
                energy += s.norm_sqr();
                assert_eq!(m.demap(s), b);
            }
            assert!((energy / order as f64 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbours_differ_in_one_bit() {
        let m = QamMapper::new(16);
        let step = 2.0 * m.scale;
        for b in 0..16u32 {
            let s = m.map(b);
            for d in [Complex64::new(step, 0.0), Complex64::new(0.0, step)] {
                let t = s + d;
                if t.re.abs() < 1.0 && t.im.abs() < 1.0 {
                    assert_eq!((m.demap(t) ^ b).count_ones(), 1);
                }
            }
        }
    }

    #[test]
    fn noiseless_unclipped_flat_link_is_error_free() {
        let cfg = OfdmConfig { clip_lower: 40.0, clip_upper: 40.0, ..Default::default() };
        let ch = ChannelResponse::flat(cfg.channel_grid(), 1e-6).unwrap();
        let res = simulate_link(&cfg, &ch, 250.0, 200, 1).unwrap();
        assert_eq!(res.errors, 0);
        assert!(res.low_confidence);
        assert_eq!(res.bits, 200 * 54 * 4);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = OfdmConfig::default();
        let ch = ChannelResponse::flat(cfg.channel_grid(), 1e-6).unwrap();
        let a = simulate_link(&cfg, &ch, 21.0, 300, 9).unwrap();
        let b = simulate_link(&cfg, &ch, 21.0, 300, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.errors > 0);
    }

    #[test]
    fn flat_link_matches_analysis() {
        let cfg = OfdmConfig::default();
        let ch = ChannelResponse::flat(cfg.channel_grid(), 1e-6).unwrap();
        let snr_db = 21.0;
        let s = power_scale_for_snr(&cfg, &ch, snr_db).unwrap();
        let (_, expected) = ber(&cfg, &snr_per_subcarrier(&cfg, &ch, s).unwrap()).unwrap();
        let res = simulate_link(&cfg, &ch, snr_db, 20_000, 5).unwrap();
        let sd = (expected * (1.0 - expected) / res.bits as f64).sqrt();
        assert!((res.ber - expected).abs() < 4.0 * sd, "{} vs {}", res.ber, expected);
    }

    #[test]
    fn time_domain_variance() {
        // all non-DC, non-Nyquist subcarriers loaded: sigma^2 = 2 (N/2 - 1)
        let cfg = OfdmConfig { used_subcarriers: 126, ..Default::default() };
        let mut planner = FftPlanner::new();
        let mut m = Modulator::new(&cfg, &mut planner);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut labels, mut body) = (Vec::new(), Vec::new());
        let (mut sum, mut sum2, mut count) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            m.next(&mut rng, &mut labels, &mut body);
            for &x in &body {
                sum += x;
                sum2 += x * x;
                count += 1.0;
            }
        }
        let var = sum2 / count - (sum / count).powi(2);
        assert!((var / 126.0 - 1.0).abs() < 0.02, "{var}");
        assert_eq!(cfg.signal_variance(), 126.0);
    }

    #[test]
    fn empirical_bussgang_gain() {
        let cfg = OfdmConfig::default();
        let mut planner = FftPlanner::new();
        let mut m = Modulator::new(&cfg, &mut planner);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sigma = cfg.signal_variance().sqrt();
        let (mut labels, mut body) = (Vec::new(), Vec::new());
        for r in [2.0, 2.5, 3.2] {
            let (mut cross, mut power) = (0.0, 0.0);
            for _ in 0..10_000 {
                m.next(&mut rng, &mut labels, &mut body);
                for &x in &body {
                    cross += x * clip(x, -r * sigma, r * sigma);
                    power += x * x;
                }
            }
            let k = cross / power;
            assert!((k / clipping_attenuation(r, r) - 1.0).abs() < 0.01, "r={r} k={k}");
        }
    }
}
