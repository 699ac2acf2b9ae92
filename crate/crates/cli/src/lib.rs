//! `infer` command line front end.

pub mod commands;
pub mod config;
pub mod container;

use clap::{Parser, Subcommand};
use commands::*;
use config::RunConfig;
use container::{read_value, RfFile};
use infer_core::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Thread count for the worker pool.
pub const THREADS_ENV: &str = "INFER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "infer", version, about = "Off-grid ultrasound inverse scattering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a phantom and simulate its RF recording.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit scatterers and physics to an RF recording and render them.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output prefix; defaults to the data path without its extension.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Conventional beamforming.
    Beamform {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["das", "mv", "dmas"])]
        method: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regularization-by-denoising reconstruction.
    Red {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Region statistics of an image, and optionally the RF fit of a solution.
    Metrics {
        #[arg(long)]
        image: Option<PathBuf>,
        /// Two regions: disk:x,z,r | annulus:x,z,r_in,r_out | rect:x0,x1,z0,z1 (meters).
        #[arg(long, num_args = 2, value_names = ["A", "B"], allow_hyphen_values = true)]
        regions: Option<Vec<String>>,
        #[arg(long, requires = "solution")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        solution: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct once per removed model feature and tabulate the RF error.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Table file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn stem(p: &Path) -> PathBuf {
    p.with_extension("")
}

/// Writes the resolved config next to the outputs.
fn write_manifest(prefix: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let path = with_suffix(prefix, &format!("{command}.ini"));
    std::fs::write(&path, cfg.to_ini()?)?;
    Ok(path)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report(lines: &[(String, f64)]) -> String {
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, out, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.simulate.seed = s;
            }
            let rf = simulate(&cfg)?;
            rf.write(&out)?;
            write_manifest(&stem(&out), "simulate", &cfg)?;
            log::info!("wrote {} ({} scatterers)", out.display(), rf.truth_field.as_ref().map_or(0, |f| f.len()));
        }
        Command::Reconstruct { data, config, out, seed, resume } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.solver.seed = s;
            }
            let rf = RfFile::read(&data)?;
            let prefix = out.unwrap_or_else(|| stem(&data));
            let resume = resume.map(|p| read_value(&p, "checkpoint")).transpose()?;
            let checkpoint = with_suffix(&prefix, "checkpoint.usrf");
            let rec = reconstruct(&rf, &cfg, resume, Some(&checkpoint))?;
            write_solution(&with_suffix(&prefix, "solution.usrf"), &rec.solution, &cfg.solver)?;
            export_image(&prefix, "kde", &rec.image, "kde", cfg.image.dynamic_range_db)?;
            write_manifest(&prefix, "reconstruct", &cfg)?;
        }
        Command::Beamform { data, method, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let rf = RfFile::read(&data)?;
            let m = parse_method(&method, &cfg)?;
            let image = beamform(&rf, &cfg, &m)?;
            let prefix = out.unwrap_or_else(|| stem(&data));
            export_image(&prefix, m.name(), &image, m.name(), cfg.image.dynamic_range_db)?;
            write_manifest(&prefix, m.name(), &cfg)?;
        }
        Command::Red { data, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let rf = RfFile::read(&data)?;
            let image = red(&rf, &cfg)?;
            let prefix = out.unwrap_or_else(|| stem(&data));
            export_image(&prefix, "red", &image, "red", cfg.image.dynamic_range_db)?;
            write_manifest(&prefix, "red", &cfg)?;
        }
        Command::Metrics { image, regions, data, solution, config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let mut lines = Vec::new();
            match (image, regions) {
                (Some(path), Some(r)) => {
                    let img = container::read_image(&path)?;
                    let a = parse_region(&r[0], img.grid)?;
                    let b = parse_region(&r[1], img.grid)?;
                    lines.extend(region_metrics(&img, &a, &b, &cfg)?);
                }
                (None, None) => {}
                _ => return Err(Error::Config("--image and --regions go together".into())),
            }
            if let (Some(d), Some(s)) = (data, solution) {
                let rf = RfFile::read(&d)?;
                let (sol, solver) = read_solution(&s)?;
                lines.extend(fit_metrics(&rf, &sol, &solver, &cfg)?);
            }
            if lines.is_empty() {
                return Err(Error::Config("nothing to measure: give --image/--regions or --data/--solution".into()));
            }
            emit(out.as_deref(), &report(&lines))?;
        }
        Command::Ablate { data, config, out, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.solver.seed = s;
            }
            let rf = RfFile::read(&data)?;
            let rows = ablate(&rf, &cfg)?;
            emit(out.as_deref(), &ablation_table(&rows))?;
            write_manifest(&stem(out.as_deref().unwrap_or(&data)), "ablate", &cfg)?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
