use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lifisim::channel::cir_response;
use lifisim::geometry::{build_scene_with_polar, AccessPoint, Activity, Scene};
use lifisim::harness::{export_report, run_fixed, run_monte_carlo, ConfigurationId, ExperimentConfig, Scenario};
use lifisim::ofdm::{evaluate_link, power_scale_for_ber, power_scale_for_snr, simulate_link, snr_target, LinkMode, OfdmConfig};
use lifisim::orientation::{noisy_measurement, random_sampling_times, AngleKind, ProcessParams, SampledSeries, SamplingPlan};
use lifisim::spectral::{estimate_params, EstimateConfig};

/// Optical wireless link simulator with hand-held receivers.
#[derive(Parser)]
#[command(name = "lifisim", version)]
struct Cli {
    /// Experiment file (TOML). Room, link and partition settings come from here.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Channel frequency response of one scene as CSV.
    Cir {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        led_cutoff_mhz: Option<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Per-subcarrier SNR and BER at the power that meets the target BER.
    Link {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        link: LinkArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Time-domain BER against the analytical value.
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        link: LinkArgs,
        /// Received SNR points, dB.
        #[arg(long, value_delimiter = ',', default_value = "16,18,20,22")]
        snr_db: Vec<f64>,
        /// OFDM symbols per point.
        #[arg(long, default_value_t = 2000)]
        symbols: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Synthetic orientation trace on the uneven sampler.
    OrientGen {
        #[arg(long, default_value = "sitting")]
        activity: Activity,
        #[arg(long, value_enum, default_value_t = Angle::Polar)]
        angle: Angle,
        /// Seconds.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sinusoid, noise level and smoothing filter from a `time_s,value_deg` trace.
    OrientEstimate {
        input: PathBuf,
        /// Measurement noise variance, deg^2.
        #[arg(long)]
        noise_var: Option<f64>,
        /// Write the cleaned spectrum here.
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
    /// All fixed configurations.
    Fixed {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Random placements and orientations.
    Montecarlo {
        #[arg(short, long)]
        out: PathBuf,
        /// Scenes per activity.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Angle {
    Polar,
    Azimuth,
}

impl From<Angle> for AngleKind {
    fn from(a: Angle) -> Self {
        match a {
            Angle::Polar => AngleKind::Polar,
            Angle::Azimuth => AngleKind::Azimuth,
        }
    }
}

#[derive(Args)]
struct SceneArgs {
    /// Named placement; the flags below override parts of it.
    #[arg(long, default_value = "C1")]
    placement: ConfigurationId,
    #[arg(long, default_value = "sitting")]
    activity: Activity,
    /// Body anchor `x,y` in metres.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    anchor: Option<(f64, f64)>,
    /// Facing direction, degrees.
    #[arg(long, allow_hyphen_values = true)]
    direction: Option<f64>,
    /// Terminal polar angle, degrees.
    #[arg(long)]
    polar: Option<f64>,
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected `x,y`")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v}: {e}"));
    Ok((num(x)?, num(y)?))
}

impl SceneArgs {
    fn build(&self, config: &ExperimentConfig) -> Result<Scene> {
        let (anchor, direction) = self.placement.placement();
        let anchor = self.anchor.unwrap_or(anchor);
        let direction = self.direction.unwrap_or(direction);
        let polar = self.polar.unwrap_or(self.activity.mean_polar_deg());
        let ap = AccessPoint::ceiling_center(&config.room);
        let scene = build_scene_with_polar(self.activity, anchor, direction.to_radians(), polar.to_radians(), &config.room, &ap)?;
        Ok(match config.reflectivity_override {
            Some(rho) => scene.with_uniform_reflectivity(rho),
            None => scene,
        })
    }
}

#[derive(Args)]
struct LinkArgs {
    /// Drop every reflected path.
    #[arg(long)]
    los_only: bool,
    #[arg(long)]
    led_cutoff_mhz: Option<f64>,
    #[arg(long)]
    target_ber: Option<f64>,
}

impl LinkArgs {
    fn ofdm(&self, config: &ExperimentConfig) -> OfdmConfig {
        match self.led_cutoff_mhz {
            Some(mhz) => config.ofdm.with_led_cutoff(mhz * 1e6),
            None => config.ofdm,
        }
    }

    fn mode(&self) -> LinkMode {
        if self.los_only {
            LinkMode::LosOnly
        } else {
            LinkMode::Full
        }
    }
}

fn load_config(cli: &Cli, scenario: Scenario) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None if scenario == Scenario::MonteCarlo => ExperimentConfig::monte_carlo(),
        None => ExperimentConfig::default(),
    };
    config.scenario = scenario;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn sink(output: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match output {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Cir { scene, led_cutoff_mhz, output } => {
            let config = load_config(&cli, Scenario::Fixed)?;
            let ofdm = match led_cutoff_mhz {
                Some(mhz) => config.ofdm.with_led_cutoff(mhz * 1e6),
                None => config.ofdm,
            };
            let response = cir_response(&scene.build(&config)?, &ofdm.channel_grid(), &config.channel_options())?;
            response.write_csv(sink(output.as_deref())?)?;
        }
        Command::Link { scene, link, output } => {
            let config = load_config(&cli, Scenario::Fixed)?;
            let ofdm = link.ofdm(&config);
            let target = link.target_ber.unwrap_or(config.target_ber);
            let mut channel = cir_response(&scene.build(&config)?, &ofdm.channel_grid(), &config.channel_options())?;
            if link.los_only {
                channel = channel.los_only();
            }
            let scale = power_scale_for_ber(&ofdm, &channel, target)?;
            let report = evaluate_link(&ofdm, &channel, link.mode(), scale)?;
            eprintln!("SNR target at BER {target:e}: {:.3} dB", snr_target(&ofdm, &channel, target)?);
            report.write_csv(sink(output.as_deref())?)?;
        }
        Command::Simulate { scene, link, snr_db, symbols, output } => {
            let config = load_config(&cli, Scenario::Fixed)?;
            let ofdm = link.ofdm(&config);
            let mut channel = cir_response(&scene.build(&config)?, &ofdm.channel_grid(), &config.channel_options())?;
            if link.los_only {
                channel = channel.los_only();
            }
            let mut out = sink(output.as_deref())?;
            writeln!(out, "snr_db,bits,errors,ber,analytical_ber")?;
            for (k, &snr) in snr_db.iter().enumerate() {
                let sim = simulate_link(&ofdm, &channel, snr, *symbols, config.seed.wrapping_add(k as u64))?;
                let scale = power_scale_for_snr(&ofdm, &channel, snr)?;
                let theory = evaluate_link(&ofdm, &channel, link.mode(), scale)?.average_ber;
                writeln!(out, "{snr},{},{},{:e},{theory:e}", sim.bits, sim.errors, sim.ber)?;
            }
        }
        Command::OrientGen { activity, angle, duration, output } => {
            let seed = cli.seed.unwrap_or(0);
            let params = ProcessParams::preset(*activity, (*angle).into());
            let times = random_sampling_times(*duration, &SamplingPlan::default(), seed)?;
            noisy_measurement(&params, &times, seed)?.write_csv(sink(output.as_deref())?)?;
        }
        Command::OrientEstimate { input, noise_var, spectrum } => {
            let file = fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
            let (times, values) = SampledSeries::read_csv(file)?;
            let mut config = EstimateConfig { dedup_seed: cli.seed.unwrap_or(0), ..Default::default() };
            if let Some(v) = noise_var {
                config.measurement_noise_var = *v;
            }
            let est = estimate_params(&times, &values, &config)?;
            if let Some(path) = spectrum {
                est.cleaned.write_csv(sink(Some(path.as_path()))?)?;
            }
            let summary = json!({
                "signal_detected": est.signal_detected,
                "amplitude_deg": est.amplitude,
                "frequency_hz": est.frequency,
                "process_std_deg": est.process_std(),
                "filter": est.filter,
                "diagnostics": est.diagnostics,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Fixed { out } => {
            let config = load_config(&cli, Scenario::Fixed)?;
            let report = run_fixed(&config)?;
            export_report(&report, out)?;
            println!("{}", serde_json::to_string_pretty(&report.summary())?);
        }
        Command::Montecarlo { out, samples } => {
            let mut config = load_config(&cli, Scenario::MonteCarlo)?;
            if let Some(n) = samples {
                if *n == 0 {
                    bail!("--samples must be at least 1");
                }
                config.samples = *n;
            }
            let report = run_monte_carlo(&config)?;
            export_report(&report, out)?;
            for failure in &report.failures {
                eprintln!("skipped {failure}");
            }
            println!("{}", serde_json::to_string_pretty(&report.summary())?);
        }
    }
    Ok(())
}
