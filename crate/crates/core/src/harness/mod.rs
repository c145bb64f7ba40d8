//! Fixed configurations, randomized placements and their link metrics.

mod report;

pub use report::{export_report, ActivitySummary, Cdf, ExperimentReport, Record, Summary};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{cir_response, los_power_ratio, ChannelError, ChannelOptions, PowerBasis, Solver};
use crate::geometry::{build_scene_with_polar, AccessPoint, Activity, GeometryError, Room, Scene};
use crate::ofdm::{snr_target, OfdmConfig, OfdmError};
use crate::orientation::{rng_for, uniform_angle, AngleKind, ProcessParams};

/// Forward-error-correction limit used as the BER target.
pub const DEFAULT_TARGET_BER: f64 = 3.8e-3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ofdm(#[from] OfdmError),
    #[error("invalid experiment: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// The five hand-picked user placements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConfigurationId {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl ConfigurationId {
    pub const ALL: [ConfigurationId; 5] = [Self::C1, Self::C2, Self::C3, Self::C4, Self::C5];

    /// Body anchor (m) and facing direction (deg) in the default room.
    ///
    /// Only C1 is given numerically. C2 puts the user facing a side wall with
    /// the terminal almost looking at the access point when seated. C3 puts
    /// the terminal near the room centre. C4 is a corner placement matched to
    /// the walking incident angle. C5 faces into the opposite corner so the
    /// body shadows the terminal.
    pub fn placement(self) -> ((f64, f64), f64) {
        match self {
            Self::C1 => ((-0.33, 1.55), -90.0),
            Self::C2 => ((1.626, -0.33), 0.0),
            Self::C3 => ((-0.35, -0.33), 0.0),
            Self::C4 => ((-2.26, -1.75), -19.0),
            Self::C5 => ((2.1, 1.0), 35.0),
        }
    }

    pub fn scene(self, activity: Activity, room: &Room, ap: &AccessPoint) -> Result<Scene, GeometryError> {
        let (anchor, direction) = self.placement();
        build_scene_with_polar(
            activity,
            anchor,
            direction.to_radians(),
            activity.mean_polar_deg().to_radians(),
            room,
            ap,
        )
    }
}

impl fmt::Display for ConfigurationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ConfigurationId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown configuration `{s}`"))
    }
}

/// All five configurations for `activity` in `room`.
pub fn fixed_configurations(activity: Activity, room: &Room, ap: &AccessPoint) -> Result<Vec<(ConfigurationId, Scene)>, GeometryError> {
    ConfigurationId::ALL.into_iter().map(|c| Ok((c, c.scene(activity, room, ap)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Fixed,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub configurations: Vec<ConfigurationId>,
    pub activities: Vec<Activity>,
    pub led_cutoffs_mhz: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Surface tiles per metre.
    pub resolution: f64,
    pub solver: Solver,
    pub max_elements: usize,
    pub target_ber: f64,
    /// Replaces every reflectivity, body included.
    pub reflectivity_override: Option<f64>,
    pub room: Room,
    pub ofdm: OfdmConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Fixed,
            configurations: ConfigurationId::ALL.to_vec(),
            activities: Activity::ALL.to_vec(),
            led_cutoffs_mhz: vec![40.0, 20.0],
            samples: 1000,
            seed: 0,
            resolution: 3.0,
            solver: Solver::GaussSeidel,
            max_elements: 6000,
            target_ber: DEFAULT_TARGET_BER,
            reflectivity_override: None,
            room: Room::default(),
            ofdm: OfdmConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the randomized run: coarser surfaces keep a thousand
    /// scenes per activity tractable.
    pub fn monte_carlo() -> Self {
        Self {
            scenario: Scenario::MonteCarlo,
            resolution: 1.0,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if self.activities.is_empty() || self.led_cutoffs_mhz.is_empty() {
            return bad("need at least one activity and one LED cutoff");
        }
        if self.scenario == Scenario::Fixed && self.configurations.is_empty() {
            return bad("no configuration selected");
        }
        if self.led_cutoffs_mhz.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return bad("LED cutoffs must be positive");
        }
        if !(self.resolution >= 1.0) {
            return bad("resolution must be at least one tile per metre");
        }
        if !(self.target_ber > 0.0 && self.target_ber < 0.5) {
            return bad("target BER outside (0, 0.5)");
        }
        if let Some(rho) = self.reflectivity_override {
            if !(0.0..=1.0).contains(&rho) {
                return bad("reflectivity override outside [0, 1]");
            }
        }
        self.room.validate()?;
        self.ofdm.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn channel_options(&self) -> ChannelOptions {
        ChannelOptions {
            resolution: self.resolution,
            max_elements: self.max_elements,
            solver: self.solver,
        }
    }

    fn prepare(&self, scene: Scene) -> Scene {
        match self.reflectivity_override {
            Some(rho) => scene.with_uniform_reflectivity(rho),
            None => scene,
        }
    }
}

/// Placement of one evaluated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub label: String,
    pub anchor: (f64, f64),
    pub direction_deg: f64,
    pub polar_deg: f64,
}

/// Channel, LOS share and SNR targets of `scene` for every LED cutoff.
pub fn evaluate_scene(config: &ExperimentConfig, scene: &Scene, placement: &Placement) -> Result<Vec<Record>, HarnessError> {
    let scene = config.prepare(scene.clone());
    let grid = config.ofdm.channel_grid();
    let full = cir_response(&scene, &grid, &config.channel_options())?;
    let los = full.los_only();
    let (los_dc, diff_dc) = full.dc()?;
    let los_exists = los_dc.norm() > 0.0;
    let dc_full = (los_dc + diff_dc).norm_sqr();
    let dc_los = los_dc.norm_sqr();
    let los_ratio = match los_power_ratio(&full, PowerBasis::Optical) {
        Ok(r) => Some(r),
        Err(ChannelError::UndefinedRatio) => None,
        Err(e) => return Err(e.into()),
    };
    config
        .led_cutoffs_mhz
        .iter()
        .map(|&mhz| {
            let ofdm = config.ofdm.with_led_cutoff(mhz * 1e6);
            let snr_full = snr_target(&ofdm, &full, config.target_ber)?;
            let snr_los = if los_exists { Some(snr_target(&ofdm, &los, config.target_ber)?) } else { None };
            Ok(Record {
                label: placement.label.clone(),
                activity: scene.activity,
                led_cutoff_mhz: mhz,
                anchor_x: placement.anchor.0,
                anchor_y: placement.anchor.1,
                direction_deg: placement.direction_deg,
                polar_deg: placement.polar_deg,
                los_exists,
                dc_power_full: dc_full,
                dc_power_los: dc_los,
                los_ratio,
                snr_target_full_db: snr_full,
                snr_target_los_db: snr_los,
                penalty_db: snr_los.map(|l| snr_full - l),
            })
        })
        .collect()
}

/// Every selected configuration, activity and LED cutoff.
pub fn run_fixed(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let ap = AccessPoint::ceiling_center(&config.room);
    let jobs: Vec<(ConfigurationId, Activity)> = config
        .configurations
        .iter()
        .flat_map(|&c| config.activities.iter().map(move |&a| (c, a)))
        .collect();
    let per_scene: Vec<Vec<Record>> = jobs
        .par_iter()
        .map(|&(c, activity)| {
            let scene = c.scene(activity, &config.room, &ap)?;
            let (anchor, direction_deg) = c.placement();
            let placement = Placement {
                label: c.to_string(),
                anchor,
                direction_deg,
                polar_deg: activity.mean_polar_deg(),
            };
            evaluate_scene(config, &scene, &placement)
        })
        .collect::<Result<_, _>>()?;
    Ok(ExperimentReport::new(config.clone(), per_scene.into_iter().flatten().collect(), Vec::new()))
}

/// Uniform anchor and facing with the body inside the room, polar angle from
/// the activity's fitted law restricted to `[0, 90]` degrees. Failed
/// placements are redrawn.
pub fn random_scene<R: Rng>(activity: Activity, room: &Room, ap: &AccessPoint, rng: &mut R) -> (Scene, (f64, f64), f64, f64) {
    let fitted = ProcessParams::preset(activity, AngleKind::Polar).fitted();
    let (x0, x1) = room.x_range();
    let (y0, y1) = room.y_range();
    loop {
        let anchor = (rng.random_range(x0..x1), rng.random_range(y0..y1));
        let direction = uniform_angle(rng);
        let polar = fitted.sample_within(0.0, 90.0, rng);
        if let Ok(scene) = build_scene_with_polar(activity, anchor, direction, polar.to_radians(), room, ap) {
            return (scene, anchor, direction.to_degrees(), polar);
        }
    }
}

/// `samples` random scenes per activity, each from its own stream of `seed`.
/// Scenes that fail to evaluate are reported and left out.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let ap = AccessPoint::ceiling_center(&config.room);
    let jobs: Vec<(usize, Activity)> = config
        .activities
        .iter()
        .enumerate()
        .flat_map(|(k, &a)| (0..config.samples).map(move |i| (k * config.samples + i, a)))
        .collect();
    let outcomes: Vec<Result<Vec<Record>, String>> = jobs
        .par_iter()
        .map(|&(stream, activity)| {
            let mut rng = rng_for(config.seed, stream as u64);
            let (scene, anchor, direction_deg, polar_deg) = random_scene(activity, &config.room, &ap, &mut rng);
            let placement = Placement {
                label: stream.to_string(),
                anchor,
                direction_deg,
                polar_deg,
            };
            evaluate_scene(config, &scene, &placement).map_err(|e| format!("sample {stream} ({activity}): {e}"))
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.extend(r),
            Err(e) => failures.push(e),
        }
    }
    Ok(ExperimentReport::new(config.clone(), records, failures))
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    match config.scenario {
        Scenario::Fixed => run_fixed(config),
        Scenario::MonteCarlo => run_monte_carlo(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room_ap() -> (Room, AccessPoint) {
        let room = Room::default();
        let ap = AccessPoint::ceiling_center(&room);
        (room, ap)
    }

    fn psi(c: ConfigurationId, a: Activity) -> Option<f64> {
        let (room, ap) = room_ap();
        let s = c.scene(a, &room, &ap).unwrap();
        (!s.los_blocked()).then(|| s.los_angles().unwrap().arrival.to_degrees())
    }

    #[test]
    fn configuration_angles() {
        assert!((psi(ConfigurationId::C1, Activity::Walking).unwrap() - 64.62).abs() < 0.5);
        assert!((psi(ConfigurationId::C1, Activity::Sitting).unwrap() - 70.87).abs() < 0.5);
        assert!((psi(ConfigurationId::C2, Activity::Sitting).unwrap() - 2.14).abs() < 0.5);
        assert!(psi(ConfigurationId::C2, Activity::Walking).is_none());
        assert!((psi(ConfigurationId::C4, Activity::Walking).unwrap() - 72.89).abs() < 1.0);
        assert!(psi(ConfigurationId::C4, Activity::Sitting).unwrap() < 90.0);
        assert!(psi(ConfigurationId::C5, Activity::Walking).is_none());
        assert!(psi(ConfigurationId::C5, Activity::Sitting).is_none());
    }

    #[test]
    fn c3_is_under_the_access_point() {
        let (room, ap) = room_ap();
        for a in Activity::ALL {
            let s = ConfigurationId::C3.scene(a, &room, &ap).unwrap();
            let horizontal = (s.ue.position.x.powi(2) + s.ue.position.y.powi(2)).sqrt();
            assert!(horizontal < 0.3, "{horizontal}");
            assert!(!s.los_blocked());
        }
    }

    #[test]
    fn c5_terminal_is_near_two_walls() {
        let (room, ap) = room_ap();
        let s = ConfigurationId::C5.scene(Activity::Walking, &room, &ap).unwrap();
        let (x0, x1) = room.x_range();
        let (y0, y1) = room.y_range();
        let p = s.ue.position;
        assert!((x1 - p.x).min(p.x - x0) < 0.5 && (y1 - p.y).min(p.y - y0) < 0.5);
    }

    #[test]
    fn ids_parse() {
        assert_eq!("c4".parse::<ConfigurationId>().unwrap(), ConfigurationId::C4);
        assert!("C9".parse::<ConfigurationId>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = ExperimentConfig::monte_carlo();
        c.seed = 42;
        c.led_cutoffs_mhz = vec![20.0];
        c.reflectivity_override = Some(0.5);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = ExperimentConfig::from_toml("scenario = \"monte-carlo\"\nsamples = 5\n").unwrap();
        assert_eq!(partial.samples, 5);
        assert!(ExperimentConfig::from_toml("samples = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("resolution = 0.5").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn random_scenes_stay_inside() {
        let (room, ap) = room_ap();
        let mut rng = rng_for(3, 0);
        for _ in 0..200 {
            let (scene, _, _, polar) = random_scene(Activity::Sitting, &room, &ap, &mut rng);
            assert!(scene.body.unwrap().inside_room(&room));
            assert!((0.0..=90.0).contains(&polar));
        }
    }

    #[test]
    fn no_reflections_means_no_penalty() {
        let config = ExperimentConfig {
            configurations: vec![ConfigurationId::C1, ConfigurationId::C3],
            led_cutoffs_mhz: vec![40.0],
            resolution: 1.0,
            reflectivity_override: Some(0.0),
            ..Default::default()
        };
        let report = run_fixed(&config).unwrap();
        assert_eq!(report.records.len(), 4);
        for r in &report.records {
            assert!(r.penalty_db.unwrap().abs() < 1e-9);
            assert!((r.los_ratio.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_cells_have_no_penalty() {
        let config = ExperimentConfig {
            configurations: vec![ConfigurationId::C2],
            activities: vec![Activity::Walking],
            led_cutoffs_mhz: vec![40.0],
            resolution: 1.0,
            ..Default::default()
        };
        let report = run_fixed(&config).unwrap();
        let r = &report.records[0];
        assert!(!r.los_exists);
        assert_eq!(r.penalty_db, None);
        assert_eq!(r.los_ratio, Some(0.0));
        assert!(r.dc_power_full > 0.0);
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let config = ExperimentConfig {
            samples: 6,
            led_cutoffs_mhz: vec![40.0],
            ..ExperimentConfig::monte_carlo()
        };
        let a = run_monte_carlo(&config).unwrap();
        let b = run_monte_carlo(&config).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 12, "{:?}", a.failures);
        assert!(a.failures.is_empty());
    }
}
