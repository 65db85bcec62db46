use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use twolevel_topopt::orchestrator::config::{self, ConfigError, RunConfig};
use twolevel_topopt::orchestrator::{self, presets, PipelineError, CERTIFICATE_TOL};

/// Two-level topology optimization: coarse SIMP, equilibrated cell
/// tractions, independent fine cells, stitched high-resolution image.
#[derive(Parser)]
#[command(name = "twolevel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline.
    Run(RunArgs),
    /// List the built-in presets.
    PresetList,
    /// Coarse optimization and equilibrium certificate only.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file (may itself name a preset and override keys).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell farm threads, 0 = all CPUs (overrides `output.workers`).
    #[arg(long)]
    workers: Option<usize>,
    /// Reuse cell results already in the output directory.
    #[arg(long)]
    resume: bool,
    /// Write a raster and iteration log per cell.
    #[arg(long)]
    cell_rasters: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
                config::parse_config(&text)?
            }
            (None, Some(name)) => config::preset_config(name)?,
            (None, None) => return Err(ConfigError::Invalid("pass --config or --preset".into()).into()),
        };
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.output.workers = w;
        }
        cfg.output.resume |= self.resume;
        cfg.output.cell_rasters |= self.cell_rasters;
        Ok(cfg)
    }
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::PresetList => {
            for (name, description) in presets::PRESETS {
                println!("{name:<10} {description}");
            }
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let out = orchestrator::run_pipeline(&cfg, Some(&cfg.output.dir))?;
            let s = &out.summary;
            println!(
                "{}: {} stages, volume {:.4}, {} solid / {} void / {} free cells",
                s.name, s.stages, s.volume_fraction, s.solid_cells, s.void_cells, s.free_cells
            );
            println!(
                "certificate: force {:.2e}, moment {:.2e}, lambda {:.2e}",
                s.max_force_residual, s.max_moment_residual, s.max_lambda
            );
            println!(
                "cells: {} solved, {} resumed, {} converged; image {}x{}, continuity mean {:.4}",
                s.fine_solved, s.fine_resumed, s.fine_converged, s.image_width, s.image_height, s.continuity_mean
            );
            println!("artifacts in {} ({:.1} s)", cfg.output.dir.display(), out.timing.total);
        }
        Command::Verify(args) => {
            let cfg = args.load()?;
            let out = Some(cfg.output.dir.as_path());
            let (coarse, eq) = orchestrator::verify(&cfg, out)?;
            let c = &eq.certificate;
            println!("{} stages, {} elements", coarse.stages, c.elements);
            println!("{}", serde_json::to_string_pretty(c).expect("certificate serializes"));
            if !c.passes(CERTIFICATE_TOL) {
                let residual = c.max_force_residual.max(c.max_moment_residual).max(c.max_lambda);
                return Err(PipelineError::Certificate { residual, tol: CERTIFICATE_TOL });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
