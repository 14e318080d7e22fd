//! Command line: `simulate`, `run`, `montecarlo`, `analyze-observability`
//! and `plot`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ingvio_core::estimator::{run_dataset, Mode};
use ingvio_core::simulator::generate;

use crate::config::Config;
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::{montecarlo, observability, output, plot};

#[derive(Parser, Debug)]
#[command(name = "ingvio", version, about = "Invariant-filter GNSS-visual-inertial odometry on simulated datasets")]
pub struct Cli {
    /// Random seed; overrides the scenario seed and the initial-state draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vio,
    Gvio,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vio => Mode::Vio,
            ModeArg::Gvio => Mode::Gvio,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CameraArg {
    Mono,
    Stereo,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        camera: Option<CameraArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Independent simulated runs with aggregated consistency statistics.
    Montecarlo {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observability matrix of a window of a simulated run, probed along the
    /// symmetry directions.
    AnalyzeObservability {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Window start, s (default: half the scenario duration).
        #[arg(long)]
        t_start: Option<f64>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a run directory as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>, seed: Option<u64>, mode: Option<ModeArg>) -> Result<Config> {
    let mut cfg = Config::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    if let Some(m) = mode {
        cfg.estimator.mode = m.into();
    }
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(Error::io(&path))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, out } => {
            let cfg = load(scenario.as_deref(), cli.seed, None)?;
            let ds = generate(&cfg.scenario)?;
            write_dataset(&out, &ds)?;
            write_config(&out, &cfg)?;
            log::info!("wrote {} imu samples, {} images, {} gnss epochs to {}", ds.imu.len(), ds.images.len(), ds.gnss.len(), out.display());
        }
        Command::Run { dataset, config, mode, camera, out } => {
            let mut cfg = load(config.as_deref(), None, mode)?;
            let ds = read_dataset(&dataset)?;
            match camera {
                Some(CameraArg::Stereo) if !ds.calibration.stereo => return Err(Error::Config("--camera stereo on a monocular dataset".into())),
                Some(c) => cfg.estimator.stereo = c == CameraArg::Stereo,
                None => {}
            }
            let result = run_dataset(&ds, &cfg.estimator, cli.seed.unwrap_or(cfg.scenario.seed))?;
            output::write_run(&out, &result)?;
            write_config(&out, &cfg)?;
            if let Ok(s) = ingvio_core::metrics::summarize(&result.errors) {
                log::info!("position rmse {:.3} m, final {:.3} m, anees/dim {:.3}", s.position_rmse, s.final_position_error, s.anees);
            }
        }
        Command::Montecarlo { scenario, runs, mode, out } => {
            let cfg = load(scenario.as_deref(), None, mode)?;
            let runs = runs.unwrap_or(cfg.montecarlo.runs);
            let report = montecarlo::montecarlo(&cfg.scenario, &cfg.estimator, runs, cli.seed.unwrap_or(cfg.scenario.seed), cfg.montecarlo.confidence)?;
            montecarlo::write_report(&out, &report)?;
            write_config(&out, &cfg)?;
            let a = &report.anees;
            log::info!("ANEES {:.3} (per dim {:.3}), {:.0}% interval [{:.3}, {:.3}]", a.value, a.normalized(), 100.0 * cfg.montecarlo.confidence, a.lower, a.upper);
        }
        Command::AnalyzeObservability { scenario, mode, t_start, steps, out } => {
            let cfg = load(scenario.as_deref(), None, mode)?;
            let seed = cli.seed.unwrap_or(cfg.scenario.seed);
            let report = observability::analyze_observability(&cfg.scenario, &cfg.estimator, seed, t_start, steps)?;
            observability::write_report(&out, &report)?;
            write_config(&out, &cfg)?;
        }
        Command::Plot { run, out } => plot::write_plot(&run, &out)?,
    }
    Ok(())
}
