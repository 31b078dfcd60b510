use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nfloc_core::estimators::{self, Algorithm};
use nfloc_core::sim::{self, Cell, ExperimentOutput, Format, Table};
use nfloc_core::{ExperimentConfig, MeasurementVector, Pose, SphericalOrientation, Vec3};

#[derive(Parser)]
#[command(
    name = "nfloc",
    version,
    about = "Near-field magneto-inductive localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Anchor layout for the configured room and anchor count.
    Topology(Common),
    /// Received power and noise floor against distance.
    PowerCurve(Common),
    /// Median PEB over room sizes and anchor counts.
    PebSweep(Common),
    /// Error bounds and ML-at-truth statistics over random deployments.
    CrlbCdf(Common),
    /// Robustness, accuracy and iteration counts of all estimators.
    AlgoCompare(Common),
    /// Print the effective config as JSON.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Estimate a pose from a measurement file.
    Estimate {
        /// JSON array, or numbers separated by commas or whitespace.
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cascade")]
        algorithm: Algorithm,
        /// Initial pose as `x,y,z` or `x,y,z,phi,theta`; defaults to the room centre.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        init: Option<Vec<f64>>,
        /// Random initializations; the best result by the algorithm's cost wins.
        #[arg(long, default_value_t = 1)]
        starts: usize,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    Ok(config)
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(trials) = common.trials {
        config.trials = trials;
    }
    config.validate().context("invalid config")?;
    Ok(config)
}

fn write_outputs(
    common: &Common,
    subcommand: &str,
    config: &ExperimentConfig,
    tables: &[Table],
) -> Result<()> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    for t in tables {
        let path = common
            .out
            .join(format!("{}.{}", t.name, common.format.extension()));
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        t.write(std::io::BufWriter::new(file), common.format)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    let metadata = serde_json::json!({
        "subcommand": subcommand,
        "seed": config.seed,
        "rng": sim::RNG_ALGORITHM,
        "init_orientation_sampling": "uniform on sphere",
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config": serde_json::from_str::<serde_json::Value>(&config.to_json())?,
    });
    let path = common.out.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(&metadata)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_measurements(text: &str) -> Result<MeasurementVector> {
    let trimmed = text.trim();
    let values: Vec<f64> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).context("parsing JSON measurement array")?
    } else {
        trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .with_context(|| format!("bad measurement '{s}'"))
            })
            .collect::<Result<_>>()?
    };
    if values.is_empty() {
        bail!("no measurements found");
    }
    Ok(MeasurementVector::new(values))
}

fn estimate(
    measurements: &Path,
    config: Option<&Path>,
    algorithm: Algorithm,
    init: Option<Vec<f64>>,
    starts: usize,
    format: Format,
) -> Result<()> {
    let config = load_config(config)?;
    config.validate().context("invalid config")?;
    let text = fs::read_to_string(measurements)
        .with_context(|| format!("reading {}", measurements.display()))?;
    let y = parse_measurements(&text)?;
    let topology = sim::generate_topology(config.anchor_count, &config.room)?;
    let rho = config.params.rho()?;
    let est = if starts > 1 {
        let sampler =
            estimators::InitSampler::new(Vec3::zeros(), config.room.upper_corner(), config.seed)?;
        estimators::multi_start(
            algorithm,
            &y,
            &topology,
            rho,
            &config.solver,
            starts,
            &sampler,
        )?
    } else {
        let init = match init.as_deref() {
            None => Pose::new(
                0.5 * config.room.upper_corner(),
                SphericalOrientation::canonical(0.0, 0.0),
            ),
            Some([x, y, z]) => Pose::new(
                Vec3::new(*x, *y, *z),
                SphericalOrientation::canonical(0.0, 0.0),
            ),
            Some([x, y, z, phi, theta]) => Pose::new(
                Vec3::new(*x, *y, *z),
                SphericalOrientation::new(*phi, *theta)?,
            ),
            Some(_) => bail!("--init takes 3 or 5 values"),
        };
        estimators::run(algorithm, &y, &topology, rho, &init, &config.solver)?
    };
    let mut t = Table::new(
        "estimate",
        &[
            "algorithm",
            "x_m",
            "y_m",
            "z_m",
            "phi_rad",
            "theta_rad",
            "iterations",
            "cost",
            "termination",
        ],
    );
    let (phi, theta) = est
        .orientation
        .map_or((f64::NAN, f64::NAN), |o| (o.phi, o.theta));
    t.push(vec![
        est.algorithm.as_str().into(),
        est.position.x.into(),
        est.position.y.into(),
        est.position.z.into(),
        phi.into(),
        theta.into(),
        est.iterations.into(),
        est.residual_cost.into(),
        Cell::from(est.termination.map_or("none", |t| t.as_str())),
    ]);
    print!("{}", t.to_string(format));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Topology(c) => {
            let config = resolve(&c)?;
            let t = sim::run_topology(&config)?;
            write_outputs(&c, "topology", &config, &[t])
        }
        Command::PowerCurve(c) => {
            let config = resolve(&c)?;
            let out = sim::run_power_curve(&config)?;
            write_outputs(&c, "power-curve", &config, &out.tables())
        }
        Command::PebSweep(c) => {
            let config = resolve(&c)?;
            let out = sim::run_peb_sweep(&config)?;
            write_outputs(&c, "peb-sweep", &config, &out.tables())
        }
        Command::CrlbCdf(c) => {
            let config = resolve(&c)?;
            let out = sim::run_crlb_cdf(&config)?;
            write_outputs(&c, "crlb-cdf", &config, &out.tables())
        }
        Command::AlgoCompare(c) => {
            let config = resolve(&c)?;
            let out = sim::run_algo_compare(&config)?;
            write_outputs(&c, "algo-compare", &config, &out.tables())
        }
        Command::Config { config } => {
            let config = load_config(config.as_deref())?;
            config.validate().context("invalid config")?;
            println!("{}", config.to_json());
            Ok(())
        }
        Command::Estimate {
            measurements,
            config,
            algorithm,
            init,
            starts,
            format,
        } => estimate(
            &measurements,
            config.as_deref(),
            algorithm,
            init,
            starts,
            format,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
