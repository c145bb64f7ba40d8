//! Random orientation of a handheld terminal.
//!
//! Each angle is modelled as a sinusoid with random phase plus white noise,
//! observed through additive measurement noise at uneven sampling instants.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Activity;

/// Measurement-noise variances in dB relative to 1 deg^2.
pub const POLAR_MEASUREMENT_NOISE_DB: f64 = -29.71;
pub const AZIMUTH_MEASUREMENT_NOISE_DB: f64 = 0.11;

#[derive(Debug, Error)]
pub enum OrientationError {
    #[error("invalid process parameters: {0}")]
    InvalidParams(String),
    #[error("invalid sampling: {0}")]
    InvalidSampling(String),
    #[error("series CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
}

impl NoiseFamily {
    /// Zero-mean draw with standard deviation `std`.
    pub fn sample<R: Rng>(self, std: f64, rng: &mut R) -> f64 {
        match self {
            NoiseFamily::Gaussian => std * rng.sample::<f64, _>(StandardNormal),
            NoiseFamily::Laplace => {
                let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
                let b = std / SQRT_2;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    pub fn for_activity(activity: Activity) -> Self {
        match activity {
            Activity::Sitting => NoiseFamily::Laplace,
            Activity::Walking => NoiseFamily::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleKind {
    Polar,
    Azimuth,
}

/// Harmonic process in white noise for one angle. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub noise_std: f64,
    /// Mean polar angle, or the terminal direction for the azimuth.
    pub center: f64,
    /// deg^2
    pub measurement_noise_var: f64,
    pub family: NoiseFamily,
    pub activity: Activity,
    pub angle: AngleKind,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ProcessParams {
    /// Averages fitted to hand-held phone traces.
    pub fn preset(activity: Activity, angle: AngleKind) -> Self {
        let (amplitude, frequency, noise_std) = match (activity, angle) {
            (Activity::Sitting, AngleKind::Polar) => (1.88, 0.67, 5.91),
            (Activity::Sitting, AngleKind::Azimuth) => (1.31, 1.46, 3.22),
            (Activity::Walking, AngleKind::Polar) => (3.22, 1.86, 7.59),
            (Activity::Walking, AngleKind::Azimuth) => (3.15, 1.71, 9.48),
        };
        let (center, noise_db) = match angle {
            AngleKind::Polar => (activity.mean_polar_deg(), POLAR_MEASUREMENT_NOISE_DB),
            AngleKind::Azimuth => (0.0, AZIMUTH_MEASUREMENT_NOISE_DB),
        };
        Self {
            amplitude,
            frequency,
            noise_std,
            center,
            measurement_noise_var: db_to_linear(noise_db),
            family: NoiseFamily::for_activity(activity),
            activity,
            angle,
        }
    }

    pub fn validate(&self) -> Result<(), OrientationError> {
        let ok = self.amplitude >= 0.0
            && self.frequency > 0.0
            && self.noise_std >= 0.0
            && self.measurement_noise_var >= 0.0
            && [self.amplitude, self.frequency, self.noise_std, self.center, self.measurement_noise_var]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(OrientationError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Variance of the process without measurement noise.
    pub fn process_variance(&self) -> f64 {
        self.noise_std * self.noise_std + self.amplitude * self.amplitude / 2.0
    }

    /// Moment-matched distribution of evenly spaced process samples.
    pub fn fitted(&self) -> FittedDistribution {
        FittedDistribution {
            family: self.family,
            mean: self.center,
            variance: self.process_variance(),
        }
    }
}

/// Parameters of the Gaussian or Laplace law matched to the process moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedDistribution {
    pub family: NoiseFamily,
    pub mean: f64,
    pub variance: f64,
}

impl FittedDistribution {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.mean + self.family.sample(self.std(), rng)
    }

    /// Draw restricted to `[lo, hi]` by rejection.
    pub fn sample_within<R: Rng>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        loop {
            let x = self.sample(rng);
            if (lo..=hi).contains(&x) {
                return x;
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = x - self.mean;
        match self.family {
            NoiseFamily::Gaussian => 0.5 * libm::erfc(-z / (self.std() * SQRT_2)),
            NoiseFamily::Laplace => {
                let b = self.std() / SQRT_2;
                if z < 0.0 {
                    0.5 * (z / b).exp()
                } else {
                    1.0 - 0.5 * (-z / b).exp()
                }
            }
        }
    }
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Separate parts of a synthetic series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub sinusoid: Vec<f64>,
    pub process_noise: Vec<f64>,
    pub measurement_noise: Vec<f64>,
}

/// Time series on possibly uneven instants. Values in degrees, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub components: Option<Components>,
}

pub fn check_times(times: &[f64]) -> Result<(), OrientationError> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(OrientationError::InvalidSampling("non-finite time".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OrientationError::InvalidSampling("times must be strictly increasing".into()));
    }
    Ok(())
}

impl SampledSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, OrientationError> {
        check_times(&times)?;
        if times.len() != values.len() {
            return Err(OrientationError::InvalidSampling("times and values differ in length".into()));
        }
        Ok(Self {
            times,
            values,
            components: None,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), OrientationError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_s", "value_deg"])?;
        for (t, v) in self.times.iter().zip(&self.values) {
            w.write_record([format!("{t}"), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `time_s,value_deg` rows. Rows are not required to be sorted.
    pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>), OrientationError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| OrientationError::InvalidSampling(format!("bad number in column {i}")))
            };
            times.push(parse(0)?);
            values.push(parse(1)?);
        }
        Ok((times, values))
    }
}

/// ChaCha8 generator for `seed` on an independent `stream`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform on `(-pi, pi]`.
pub fn uniform_angle<R: Rng>(rng: &mut R) -> f64 {
    PI - 2.0 * PI * rng.random::<f64>()
}

/// Zero-mean process `A sin(2 pi f t + phi) + v(t)` at `times`.
pub fn sample_process(params: &ProcessParams, times: &[f64], seed: u64) -> Result<SampledSeries, OrientationError> {
    params.validate()?;
    check_times(times)?;
    let mut rng = rng_for(seed, 0);
    let phase = uniform_angle(&mut rng);
    let sinusoid: Vec<f64> = times
        .iter()
        .map(|t| params.amplitude * (2.0 * PI * params.frequency * t + phase).sin())
        .collect();
    let process_noise: Vec<f64> = times.iter().map(|_| params.family.sample(params.noise_std, &mut rng)).collect();
    let values = sinusoid.iter().zip(&process_noise).map(|(a, b)| a + b).collect();
    Ok(SampledSeries {
        times: times.to_vec(),
        values,
        components: Some(Components {
            sinusoid,
            process_noise,
            measurement_noise: vec![0.0; times.len()],
        }),
    })
}

/// Sensor reading: center plus process plus white Gaussian measurement noise.
pub fn noisy_measurement(params: &ProcessParams, times: &[f64], seed: u64) -> Result<SampledSeries, OrientationError> {
    let mut series = sample_process(params, times, seed)?;
    let mut rng = rng_for(seed, 1);
    let std = params.measurement_noise_var.sqrt();
    let noise: Vec<f64> = times.iter().map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    for (v, n) in series.values.iter_mut().zip(&noise) {
        *v += params.center + n;
    }
    if let Some(c) = series.components.as_mut() {
        c.measurement_noise = noise;
    }
    Ok(series)
}

/// Unnormalized autocorrelation `(A^2/2) cos(2 pi f tau) + sigma_v^2 delta(tau)`.
pub fn theoretical_acf(params: &ProcessParams, lag: f64) -> f64 {
    let periodic = params.amplitude * params.amplitude / 2.0 * (2.0 * PI * params.frequency * lag).cos();
    if lag == 0.0 {
        periodic + params.noise_std * params.noise_std
    } else {
        periodic
    }
}

pub fn normalized_acf(params: &ProcessParams, lag: f64) -> f64 {
    theoretical_acf(params, lag) / theoretical_acf(params, 0.0)
}

/// First positive lag where the model ACF reaches zero.
pub fn coherence_time(params: &ProcessParams) -> f64 {
    1.0 / (4.0 * params.frequency)
}

/// Categorical distribution of sampling gaps in whole milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub gaps_ms: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            gaps_ms: vec![1, 18, 64],
            weights: vec![0.5, 0.3, 0.2],
        }
    }
}

impl SamplingPlan {
    pub fn mean_gap(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.gaps_ms.iter().zip(&self.weights).map(|(&g, w)| g as f64 * w).sum::<f64>() / total / 1000.0
    }
}

/// Uneven sampling instants over `[0, duration]` seconds.
pub fn random_sampling_times(duration: f64, plan: &SamplingPlan, seed: u64) -> Result<Vec<f64>, OrientationError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(OrientationError::InvalidSampling(format!("duration {duration}")));
    }
    if plan.gaps_ms.is_empty() || plan.gaps_ms.len() != plan.weights.len() || plan.gaps_ms.contains(&0) {
        return Err(OrientationError::InvalidSampling("gap list must be nonempty, positive and match the weights".into()));
    }
    let choose = WeightedIndex::new(&plan.weights).map_err(|e| OrientationError::InvalidSampling(e.to_string()))?;
    let mut rng = rng_for(seed, 0);
    let limit = (duration * 1000.0).floor() as u64;
    let mut now = 0u64;
    let mut times = Vec::new();
    while now <= limit {
        times.push(now as f64 / 1000.0);
        now += plan.gaps_ms[choose.sample(&mut rng)] as u64;
    }
    Ok(times)
}

/// Evenly spaced samples of the process at independent random phases:
/// `center + A sin(U) + X`.
pub fn sample_theta_rv(params: &ProcessParams, n: usize, seed: u64) -> Result<Vec<f64>, OrientationError> {
    params.validate()?;
    if n == 0 {
        return Err(OrientationError::InvalidParams("n must be at least 1".into()));
    }
    let mut rng = rng_for(seed, 0);
    Ok((0..n).map(|_| draw_polar(params, &mut rng)).collect())
}

/// One draw of `center + A sin(U) + X` in degrees.
pub fn draw_polar<R: Rng>(params: &ProcessParams, rng: &mut R) -> f64 {
    let u = uniform_angle(rng);
    params.center + params.amplitude * u.sin() + params.family.sample(params.noise_std, rng)
}

/// Terminal direction, uniform on `(-pi, pi]`.
pub fn sample_ue_direction(seed: u64) -> f64 {
    uniform_angle(&mut rng_for(seed, 0))
}
