use lifisim::geometry::Activity;
use lifisim::harness::{run_monte_carlo, ExperimentConfig};

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[test]
fn random_placement_dc_gain_distributions() {
    let config = ExperimentConfig { samples: 300, seed: 11, led_cutoffs_mhz: vec![40.0], ..ExperimentConfig::monte_carlo() };
    let report = run_monte_carlo(&config).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.records.len(), 600);

    let (sit_full, _) = report.dc_power_cdfs(Activity::Sitting);
    let (walk_full, walk_los) = report.dc_power_cdfs(Activity::Walking);
    assert!(walk_full.median() > sit_full.median());

    for activity in Activity::ALL {
        let (full, los) = report.dc_power_cdfs(activity);
        // A blocked direct path leaves zero power, so the low-end gap may be infinite.
        let gap = |q| db(full.quantile(q)) - db(los.quantile(q));
        assert!(gap(0.05) > gap(0.8), "{activity}: {} vs {}", gap(0.05), gap(0.8));
        for q in [0.05, 0.2, 0.5, 0.8, 0.95] {
            assert!(full.quantile(q) >= los.quantile(q));
        }
    }

    // Recomputing from the records gives the stored aggregate.
    let walk_los_share = report.records.iter().filter(|r| r.activity == Activity::Walking && r.los_exists).count() as f64 / 300.0;
    assert_eq!(report.los_probability(Activity::Walking), walk_los_share);
    assert_eq!(walk_los.len(), 300);
}
