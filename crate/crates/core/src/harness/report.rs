use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError};
use crate::geometry::Activity;

/// One scene at one LED cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub label: String,
    pub activity: Activity,
    pub led_cutoff_mhz: f64,
    pub anchor_x: f64,
    pub anchor_y: f64,
    pub direction_deg: f64,
    pub polar_deg: f64,
    pub los_exists: bool,
    /// `|H(0)|^2` of the full channel.
    pub dc_power_full: f64,
    pub dc_power_los: f64,
    /// Optical share of the direct path; `None` when nothing arrives.
    pub los_ratio: Option<f64>,
    pub snr_target_full_db: f64,
    pub snr_target_los_db: Option<f64>,
    pub penalty_db: Option<f64>,
}

/// Empirical distribution, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cdf {
    pub values: Vec<f64>,
}

impl Cdf {
    pub fn new(values: impl IntoIterator<Item = f64>) -> Self {
        let mut values: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        values.sort_by(f64::total_cmp);
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `P(X <= x)`.
    pub fn at(&self, x: f64) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.partition_point(|v| *v <= x) as f64 / self.values.len() as f64
    }

    /// `P(X < x)`.
    pub fn below(&self, x: f64) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.partition_point(|v| *v < x) as f64 / self.values.len() as f64
    }

    /// `(value, cumulative probability)` steps.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.values.len() as f64;
        self.values.iter().enumerate().map(move |(i, v)| (*v, (i + 1) as f64 / n))
    }

    /// Smallest sample with `at(value) >= q`.
    pub fn quantile(&self, q: f64) -> f64 {
        if self.values.is_empty() || !(0.0..=1.0).contains(&q) {
            return f64::NAN;
        }
        let k = ((q * self.values.len() as f64).ceil() as usize).clamp(1, self.values.len());
        self.values[k - 1]
    }

    pub fn median(&self) -> f64 {
        let n = self.values.len();
        match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => self.values[n / 2],
            _ => 0.5 * (self.values[n / 2 - 1] + self.values[n / 2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub failures: Vec<String>,
}

/// Headline numbers written next to the tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub config_hash: String,
    pub records: usize,
    pub failures: Vec<String>,
    pub activities: Vec<ActivitySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivitySummary {
    pub activity: Activity,
    pub led_cutoff_mhz: f64,
    pub scenes: usize,
    pub los_probability: f64,
    pub median_penalty_db: Option<f64>,
    pub penalty_below_3db: Option<f64>,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, records: Vec<Record>, failures: Vec<String>) -> Self {
        Self { config, records, failures }
    }

    pub fn select(&self, activity: Activity, led_cutoff_mhz: f64) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .filter(move |r| r.activity == activity && r.led_cutoff_mhz == led_cutoff_mhz)
    }

    /// Share of scenes with an unobstructed direct path.
    pub fn los_probability(&self, activity: Activity) -> f64 {
        let Some(&cutoff) = self.config.led_cutoffs_mhz.first() else {
            return f64::NAN;
        };
        let (hits, total) = self
            .select(activity, cutoff)
            .fold((0usize, 0usize), |(h, t), r| (h + r.los_exists as usize, t + 1));
        if total == 0 {
            f64::NAN
        } else {
            hits as f64 / total as f64
        }
    }

    /// Penalty over scenes where the direct path exists.
    pub fn penalty_cdf(&self, activity: Activity, led_cutoff_mhz: f64) -> Cdf {
        Cdf::new(self.select(activity, led_cutoff_mhz).filter_map(|r| r.penalty_db))
    }

    /// DC power of the full and the direct-only channel over every scene,
    /// blocked ones included.
    pub fn dc_power_cdfs(&self, activity: Activity) -> (Cdf, Cdf) {
        let Some(&cutoff) = self.config.led_cutoffs_mhz.first() else {
            return (Cdf::new([]), Cdf::new([]));
        };
        let full = Cdf::new(self.select(activity, cutoff).map(|r| r.dc_power_full));
        let los = Cdf::new(self.select(activity, cutoff).map(|r| r.dc_power_los));
        (full, los)
    }

    pub fn summary(&self) -> Summary {
        let activities = self
            .config
            .activities
            .iter()
            .flat_map(|&a| self.config.led_cutoffs_mhz.iter().map(move |&c| (a, c)))
            .map(|(activity, cutoff)| {
                let penalty = self.penalty_cdf(activity, cutoff);
                let scenes = self.select(activity, cutoff).count();
                let los = self.select(activity, cutoff).filter(|r| r.los_exists).count();
                ActivitySummary {
                    activity,
                    led_cutoff_mhz: cutoff,
                    scenes,
                    los_probability: if scenes == 0 { f64::NAN } else { los as f64 / scenes as f64 },
                    median_penalty_db: (!penalty.is_empty()).then(|| penalty.median()),
                    penalty_below_3db: (!penalty.is_empty()).then(|| penalty.below(3.0)),
                }
            })
            .collect();
        Summary {
            seed: self.config.seed,
            config_hash: self.config.hash(),
            records: self.records.len(),
            failures: self.failures.clone(),
            activities,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv { path: path.to_path_buf(), source })
}

/// Writes `records.csv`, `penalty_cdf.csv`, `dc_power_cdf.csv`,
/// `summary.json` and the `config.toml` that produced them into `dir`.
pub fn export_report(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Csv { path, source }
    };

    let path = dir.join("records.csv");
    let mut w = csv_writer(&path)?;
    if report.records.is_empty() {
        w.write_record(RECORD_HEADER).map_err(csv_err(&path))?;
    }
    for r in &report.records {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("penalty_cdf.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["activity", "led_cutoff_mhz", "penalty_db", "probability"]).map_err(csv_err(&path))?;
    for &a in &report.config.activities {
        for &c in &report.config.led_cutoffs_mhz {
            for (v, p) in report.penalty_cdf(a, c).points() {
                w.write_record([a.to_string(), c.to_string(), v.to_string(), p.to_string()]).map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("dc_power_cdf.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["activity", "channel", "dc_power", "probability"]).map_err(csv_err(&path))?;
    for &a in &report.config.activities {
        let (full, los) = report.dc_power_cdfs(a);
        for (name, cdf) in [("full", full), ("los", los)] {
            for (v, p) in cdf.points() {
                w.write_record([a.to_string(), name.to_string(), v.to_string(), p.to_string()]).map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report.summary())?;
    fs::write(&path, json + "\n").map_err(io(&path))?;

    let path = dir.join("config.toml");
    fs::write(&path, report.config.to_toml()).map_err(io(&path))?;
    Ok(())
}

const RECORD_HEADER: [&str; 14] = [
    "label",
    "activity",
    "led_cutoff_mhz",
    "anchor_x",
    "anchor_y",
    "direction_deg",
    "polar_deg",
    "los_exists",
    "dc_power_full",
    "dc_power_los",
    "los_ratio",
    "snr_target_full_db",
    "snr_target_los_db",
    "penalty_db",
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(activity: Activity, cutoff: f64, penalty: Option<f64>, full: f64, los: f64) -> Record {
        Record {
            label: "x".into(),
            activity,
            led_cutoff_mhz: cutoff,
            anchor_x: 0.0,
            anchor_y: 0.0,
            direction_deg: 0.0,
            polar_deg: 0.0,
            los_exists: penalty.is_some(),
            dc_power_full: full,
            dc_power_los: los,
            los_ratio: Some((los / full).sqrt()),
            snr_target_full_db: 20.0,
            snr_target_los_db: penalty.map(|p| 20.0 - p),
            penalty_db: penalty,
        }
    }

    #[test]
    fn header_matches_record_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(record(Activity::Sitting, 40.0, Some(1.0), 1.0, 0.5)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECORD_HEADER.join(","));
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = ExperimentReport::new(ExperimentConfig::default(), Vec::new(), Vec::new());
        export_report(&report, dir.path()).unwrap();
        for (file, lines) in [("records.csv", 1), ("penalty_cdf.csv", 1), ("dc_power_cdf.csv", 1)] {
            let text = fs::read_to_string(dir.path().join(file)).unwrap();
            assert_eq!(text.lines().count(), lines, "{file}");
        }
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["records"], 0);
        let back = ExperimentConfig::from_toml(&fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(back, report.config);
    }

    #[test]
    fn aggregates() {
        let records = vec![
            record(Activity::Sitting, 40.0, Some(1.0), 2.0, 1.0),
            record(Activity::Sitting, 40.0, None, 1.0, 0.0),
            record(Activity::Sitting, 40.0, Some(4.0), 3.0, 1.0),
            record(Activity::Sitting, 20.0, Some(2.0), 2.0, 1.0),
            record(Activity::Walking, 40.0, Some(0.5), 2.0, 1.5),
        ];
        let report = ExperimentReport::new(ExperimentConfig::default(), records, Vec::new());
        assert!((report.los_probability(Activity::Sitting) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.los_probability(Activity::Walking), 1.0);
        let p = report.penalty_cdf(Activity::Sitting, 40.0);
        assert_eq!(p.values, vec![1.0, 4.0]);
        assert_eq!(p.below(3.0), 0.5);
        assert_eq!(p.median(), 2.5);
        assert_eq!(p.quantile(0.5), 1.0);
        assert_eq!(p.quantile(0.51), 4.0);
        assert_eq!(p.quantile(0.0), 1.0);
        let (full, los) = report.dc_power_cdfs(Activity::Sitting);
        assert_eq!(full.len(), 3);
        assert_eq!(los.values, vec![0.0, 1.0, 1.0]);
        let s = report.summary();
        assert_eq!(s.activities.len(), 4);
        assert_eq!(s.activities[1].scenes, 1);
        assert_eq!(s.activities[1].penalty_below_3db, Some(1.0));
    }

    #[test]
    fn export_is_deterministic() {
        let records = vec![record(Activity::Walking, 40.0, Some(0.25), 2.0, 1.5)];
        let report = ExperimentReport::new(ExperimentConfig::default(), records, Vec::new());
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        export_report(&report, a.path()).unwrap();
        export_report(&report, b.path()).unwrap();
        for file in ["records.csv", "penalty_cdf.csv", "dc_power_cdf.csv", "summary.json", "config.toml"] {
            assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        }
    }

    proptest! {
        #[test]
        fn cdf_is_monotone(values in prop::collection::vec(-50.0f64..50.0, 1..60), probes in prop::collection::vec(-60.0f64..60.0, 2..10)) {
            let cdf = Cdf::new(values.clone());
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            for w in probes.windows(2) {
                prop_assert!(cdf.at(w[0]) <= cdf.at(w[1]));
                prop_assert!(cdf.below(w[0]) <= cdf.at(w[0]));
            }
            prop_assert_eq!(cdf.at(60.0), 1.0);
            prop_assert_eq!(cdf.below(-60.0), 0.0);
        }

        #[test]
        fn full_channel_dominates_direct_path(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40), x in 0.0f64..2.0) {
            // Each full-channel DC power is at least its direct-path part, so
            // the full CDF sits at or below the direct-only one.
            let records: Vec<Record> = pairs.iter().map(|&(l, d)| record(Activity::Sitting, 40.0, Some(0.0), l + d, l)).collect();
            let report = ExperimentReport::new(ExperimentConfig::default(), records, Vec::new());
            let (full, los) = report.dc_power_cdfs(Activity::Sitting);
            prop_assert!(full.at(x) <= los.at(x));
        }
    }
}
