//! End-to-end driver: coarse stage loop, equilibration, cell farm, stitching
//! and the on-disk artifacts.
//!
//! Output directory layout:
//!
//! | file | content |
//! |------|---------|
//! | `coarse_stage_XX.{pgm,csv}` | coarse densities at the end of stage XX, before freezing |
//! | `coarse_final.{pgm,csv}` | converged coarse densities |
//! | `coarse_history.csv` | `stage,iteration,compliance,volume,max_change` |
//! | `certificate.json` | equilibrium certificate of the coarse tractions |
//! | `tractions.csv` | `element,edge,ts_x,ts_y,te_x,te_y` edge tractions fed to the cells |
//! | `cells.csv` | one row per coarse cell, see [`CELLS_HEADER`] |
//! | `cells/cell_XXXXX.txt` | cached fine result, reused by `resume` |
//! | `cells/cell_XXXXX.{pgm,csv}`, `cells/cell_XXXXX_history.csv` | with `cell_rasters` |
//! | `image.{pgm,csv}` | stitched high-resolution densities |
//! | `legend.pgm` | grayscale bar, 0 on the left, 1 on the right |
//! | `continuity.csv` | `cell_a,cell_b,vertical,mean_abs_diff` |
//! | `summary.json` | run summary, identical across reruns |
//! | `timing.json` | wall times in seconds |

pub mod config;
pub mod image;
pub mod presets;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::coarse_opt::{self, CellState, CoarseError, CoarseResult};
use crate::equilibrate::{self, Certificate, EdgeTractionField, EquilibrateError, Equilibration};
use crate::fem::{self, FemError};
use crate::fine_opt::{self, FarmResult, FineCellProblem, FineCellResult, FineContext, FineError, LoadMode};
use crate::grid::{BoundarySpec, CartesianGrid};
use config::{ConfigError, RunConfig};
use image::{ContinuityReport, HighResImage, ImageError};

/// Tolerance of the equilibrium certificate, relative to the force scale.
pub const CERTIFICATE_TOL: f64 = 1e-8;

pub const CELLS_HEADER: &str =
    "cell,ix,iy,state,target,volume,iterations,converged,beta,m_nd,compliance,max_reaction,reaction_scale";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("coarse optimization: {0}")]
    Coarse(#[from] CoarseError),
    #[error("coarse analysis: {0}")]
    Fem(#[from] FemError),
    #[error("equilibration: {0}")]
    Equilibrate(#[from] EquilibrateError),
    #[error("cell farm: {0}")]
    Fine(#[from] FineError),
    #[error("equilibrium residual {residual:e} exceeds {tol:e}")]
    Certificate { residual: f64, tol: f64 },
    #[error("{count} cell(s) failed, first: {first}")]
    CellFailures { count: usize, first: String },
    #[error("stitching: {0}")]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 numerical, 4 I/O.
    pub fn code(&self) -> i32 {
        match self {
            PipelineError::Config(ConfigError::MaskFile { .. }) | PipelineError::Io { .. } => 4,
            PipelineError::Image(ImageError::Io(_)) => 4,
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// Grid, boundary data and load vector of a config.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: RunConfig,
    pub grid: CartesianGrid,
    pub boundary: BoundarySpec,
    pub loads: Vec<f64>,
}

impl Problem {
    pub fn new(config: &RunConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let grid = config.build_grid()?;
        let boundary = config.build_boundary(&grid)?;
        let loads = fem::load_vector(&grid, &boundary);
        Ok(Problem { config: config.clone(), grid, boundary, loads })
    }

    pub fn run_coarse(&self) -> Result<CoarseResult, CoarseError> {
        let c = &self.config;
        coarse_opt::stage_loop(&self.grid, &c.policy(), &c.coarse_material(), &c.coarse, &c.oc, &self.loads, &self.boundary)
    }

    /// Equilibrated tractions of the final coarse field, and the tractions
    /// the cells are loaded with (the same field unless `load_mode` is raw).
    pub fn equilibrate(&self, coarse: &CoarseResult) -> Result<(Equilibration, EdgeTractionField), PipelineError> {
        let material = self.config.coarse_material();
        let rho = &coarse.field.rho;
        let (stiffness, sol) = fem::analyze(&self.grid, rho, &material, &self.loads, &self.boundary)?;
        let eq = equilibrate::equilibrate_solution(&self.grid, &self.boundary, &stiffness, &sol, &coarse.field.void_mask())?;
        let loads = match self.config.load_mode {
            LoadMode::Equilibrated => eq.tractions.clone(),
            LoadMode::Raw => equilibrate::raw_stress_tractions(&self.grid, &material, rho, &sol.u),
        };
        Ok((eq, loads))
    }

    pub fn fine_context(&self) -> Result<FineContext, FineError> {
        let c = &self.config;
        FineContext::new(self.grid.hx(), self.grid.hy(), c.coarse_material(), c.fine_params(), c.load_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub load_mode: LoadMode,
    pub thresholds: [f64; 2],
    pub stages: usize,
    pub coarse_converged: bool,
    pub coarse_compliance: f64,
    pub volume_fraction: f64,
    pub active_cells: usize,
    pub solid_cells: usize,
    pub void_cells: usize,
    pub free_cells: usize,
    pub certificate_passes: bool,
    pub max_force_residual: f64,
    pub max_moment_residual: f64,
    pub max_lambda: f64,
    pub fine_solved: usize,
    pub fine_resumed: usize,
    pub fine_converged: usize,
    pub fine_max_iterations: usize,
    /// Largest support reaction relative to the cell traction scale.
    pub fine_max_reaction: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub image_volume_fraction: f64,
    pub continuity_mean: f64,
    pub continuity_max: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub coarse: f64,
    pub equilibration: f64,
    pub farm: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub problem: Problem,
    pub coarse: CoarseResult,
    pub equilibration: Equilibration,
    pub farm: FarmResult,
    pub image: HighResImage,
    pub continuity: ContinuityReport,
    pub summary: Summary,
    pub timing: Timing,
}

/// Coarse loop and equilibration only; writes the coarse artifacts and the
/// certificate when `out` is given.
pub fn verify(config: &RunConfig, out: Option<&Path>) -> Result<(CoarseResult, Equilibration), PipelineError> {
    let problem = Problem::new(config)?;
    let coarse = problem.run_coarse()?;
    if let Some(dir) = out {
        write_coarse(dir, &problem.grid, &coarse)?;
    }
    let (eq, loads) = problem.equilibrate(&coarse)?;
    if let Some(dir) = out {
        write_certificate(dir, &problem.grid, &eq.certificate, &loads)?;
    }
    Ok((coarse, eq))
}

/// Full pipeline. Artifacts written before a failure are kept.
pub fn run_pipeline(config: &RunConfig, out: Option<&Path>) -> Result<PipelineOutput, PipelineError> {
    let start = Instant::now();
    let mut timing = Timing::default();
    let problem = Problem::new(config)?;
    let grid = &problem.grid;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let t = Instant::now();
    let coarse = problem.run_coarse()?;
    timing.coarse = t.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_coarse(dir, grid, &coarse)?;
    }

    let t = Instant::now();
    let (equilibration, loads) = problem.equilibrate(&coarse)?;
    timing.equilibration = t.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_certificate(dir, grid, &equilibration.certificate, &loads)?;
    }

    let t = Instant::now();
    let ctx = problem.fine_context()?;
    let n = ctx.params.n;
    let (frozen, problems) = fine_opt::cell_problems(grid, &coarse.field, &loads, n, ctx.material.rho_min);
    let cell_dir = out.map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut cached = BTreeMap::new();
    if let (Some(d), true) = (&cell_dir, config.output.resume) {
        for p in &problems {
            if let Some(r) = read_cell_cache(&d.join(cell_file(p.cell, "txt")), &cache_header(p, &ctx)) {
                cached.insert(p.cell, r);
            }
        }
    }
    let todo: Vec<FineCellProblem> = problems.iter().filter(|p| !cached.contains_key(&p.cell)).cloned().collect();
    let mut farm = fine_opt::solve_cells(&todo, &ctx, config.output.workers)?;
    if let Some(d) = &cell_dir {
        for p in &todo {
            if let Some(r) = farm.cells.get(&p.cell) {
                write_cell(d, p, r, &ctx, config.output.cell_rasters)?;
            }
        }
    }
    let resumed = cached.len();
    farm.cells.extend(cached);
    farm.cells.extend(frozen);
    timing.farm = t.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_cells_csv(dir, grid, &coarse, &farm)?;
    }
    if let Some((cell, err)) = farm.failures.iter().next() {
        return Err(PipelineError::CellFailures { count: farm.failures.len(), first: format!("cell {cell}: {err}") });
    }

    let rasters: BTreeMap<usize, Vec<f64>> = farm.cells.iter().map(|(&e, r)| (e, r.rho.clone())).collect();
    let img = image::stitch(grid, &rasters, n)?;
    let continuity = image::continuity_metric(&img);

    let free: Vec<&FineCellResult> = problems.iter().filter_map(|p| farm.cells.get(&p.cell)).collect();
    let cert = &equilibration.certificate;
    let summary = Summary {
        name: config.name.clone(),
        load_mode: config.load_mode,
        thresholds: config.thresholds,
        stages: coarse.stages,
        coarse_converged: coarse.converged,
        coarse_compliance: coarse.compliance,
        volume_fraction: coarse.field.volume_fraction(grid),
        active_cells: grid.num_active_elements(),
        solid_cells: coarse.field.count(grid, CellState::Solid),
        void_cells: coarse.field.count(grid, CellState::Void),
        free_cells: coarse.field.count(grid, CellState::Free),
        certificate_passes: cert.passes(CERTIFICATE_TOL),
        max_force_residual: cert.max_force_residual,
        max_moment_residual: cert.max_moment_residual,
        max_lambda: cert.max_lambda,
        fine_solved: farm.solved,
        fine_resumed: resumed,
        fine_converged: free.iter().filter(|r| r.converged).count(),
        fine_max_iterations: free.iter().map(|r| r.iterations).max().unwrap_or(0),
        fine_max_reaction: free.iter().map(|r| reaction_ratio(r)).fold(0.0, f64::max),
        image_width: img.width(),
        image_height: img.height(),
        image_volume_fraction: img.mean(),
        continuity_mean: continuity.mean,
        continuity_max: continuity.max,
    };
    timing.total = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_file(&dir.join("image.pgm"), |w| image::write_pgm(&img, w))?;
        write_file(&dir.join("image.csv"), |w| image::write_csv(&img, w))?;
        write_file(&dir.join("legend.pgm"), |w| image::write_pgm(&HighResImage::legend(256, 16), w))?;
        write_file(&dir.join("continuity.csv"), |w| {
            writeln!(w, "cell_a,cell_b,vertical,mean_abs_diff")?;
            for b in &continuity.boundaries {
                writeln!(w, "{},{},{},{}", b.cells[0], b.cells[1], b.vertical, b.mean_abs_diff)?;
            }
            Ok(())
        })?;
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(&dir.join("timing.json"), &timing)?;
    }
    Ok(PipelineOutput { problem, coarse, equilibration, farm, image: img, continuity, summary, timing })
}

/// Largest support reaction over the traction scale (0 for unloaded cells).
pub fn reaction_ratio(r: &FineCellResult) -> f64 {
    if r.reaction_scale > 0.0 {
        r.max_reaction() / r.reaction_scale
    } else {
        0.0
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), PipelineError> {
    let run = || {
        let mut w = BufWriter::new(fs::File::create(path)?);
        f(&mut w)?;
        w.flush()
    };
    run().map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(io::Error::other)?;
        writeln!(w)
    })
}

fn write_raster(dir: &Path, stem: &str, img: &HighResImage) -> Result<(), PipelineError> {
    write_file(&dir.join(format!("{stem}.pgm")), |w| image::write_pgm(img, w))?;
    write_file(&dir.join(format!("{stem}.csv")), |w| image::write_csv(img, w))
}

fn write_coarse(dir: &Path, grid: &CartesianGrid, coarse: &CoarseResult) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in &coarse.reports {
        write_raster(dir, &format!("coarse_stage_{:02}", r.stage), &HighResImage::coarse(grid, &r.snapshot))?;
    }
    write_raster(dir, "coarse_final", &HighResImage::coarse(grid, &coarse.field.rho))?;
    write_file(&dir.join("coarse_history.csv"), |w| {
        writeln!(w, "stage,iteration,compliance,volume,max_change")?;
        for h in &coarse.history {
            writeln!(w, "{},{},{},{},{}", h.stage, h.iteration, h.compliance, h.volume, h.max_change)?;
        }
        Ok(())
    })
}

fn write_certificate(dir: &Path, grid: &CartesianGrid, cert: &Certificate, loads: &EdgeTractionField) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("certificate.json"), cert)?;
    write_file(&dir.join("tractions.csv"), |w| loads.write_csv(grid, w))
}

fn write_cells_csv(dir: &Path, grid: &CartesianGrid, coarse: &CoarseResult, farm: &FarmResult) -> Result<(), PipelineError> {
    write_file(&dir.join("cells.csv"), |w| {
        writeln!(w, "{CELLS_HEADER}")?;
        for (&e, r) in &farm.cells {
            let (ix, iy) = grid.element_coords(e);
            let state = match coarse.field.state[e] {
                CellState::Free => "free",
                CellState::Solid => "solid",
                CellState::Void => "void",
            };
            writeln!(
                w,
                "{e},{ix},{iy},{state},{},{},{},{},{},{},{},{},{}",
                coarse.field.rho[e],
                r.volume_fraction(),
                r.iterations,
                r.converged,
                r.beta,
                r.m_nd,
                r.compliance,
                r.max_reaction(),
                r.reaction_scale
            )?;
        }
        Ok(())
    })
}

fn cell_file(cell: usize, ext: &str) -> String {
    format!("cell_{cell:05}.{ext}")
}

/// Everything a cached cell result depends on.
fn cache_header(p: &FineCellProblem, ctx: &FineContext) -> String {
    format!(
        "cell {} target {:?} tractions {:?} size {:?} material {:?} params {:?} mode {:?}",
        p.cell,
        p.target,
        p.tractions,
        (ctx.grid.hx(), ctx.grid.hy()),
        ctx.material,
        ctx.params,
        ctx.mode
    )
}

fn write_cell(dir: &Path, p: &FineCellProblem, r: &FineCellResult, ctx: &FineContext, rasters: bool) -> Result<(), PipelineError> {
    write_file(&dir.join(cell_file(p.cell, "txt")), |w| {
        writeln!(w, "{}", cache_header(p, ctx))?;
        let [a, b, c] = r.reactions;
        writeln!(w, "{} {} {} {} {} {} {} {} {}", r.iterations, r.converged, r.beta, r.m_nd, r.compliance, a, b, c, r.reaction_scale)?;
        for v in &r.rho {
            writeln!(w, "{v}")?;
        }
        Ok(())
    })?;
    if rasters {
        let img = image::cell_image(&r.rho, r.n);
        write_raster(dir, &format!("cell_{:05}", p.cell), &img)?;
        write_file(&dir.join(format!("cell_{:05}_history.csv", p.cell)), |w| {
            writeln!(w, "iteration,compliance,volume,change,beta,m_nd,projected")?;
            for h in &r.history {
                writeln!(w, "{},{},{},{},{},{},{}", h.iteration, h.compliance, h.volume, h.change, h.beta, h.m_nd, h.projected)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Cached result if the file exists and its header matches exactly.
fn read_cell_cache(path: &Path, header: &str) -> Option<FineCellResult> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != header {
        return None;
    }
    let meta: Vec<&str> = lines.next()?.split(' ').collect();
    if meta.len() != 9 {
        return None;
    }
    let f = |i: usize| meta[i].parse::<f64>().ok();
    let rho: Vec<f64> = lines.map(|l| l.parse().ok()).collect::<Option<_>>()?;
    let n = (rho.len() as f64).sqrt() as usize;
    if n * n != rho.len() {
        return None;
    }
    let cell = header.split(' ').nth(1)?.parse().ok()?;
    Some(FineCellResult {
        cell,
        n,
        rho,
        iterations: meta[0].parse().ok()?,
        converged: meta[1].parse().ok()?,
        beta: f(2)?,
        m_nd: f(3)?,
        compliance: f(4)?,
        reactions: [f(5)?, f(6)?, f(7)?],
        reaction_scale: f(8)?,
        history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(ConfigError::Invalid("x".into())).code(), 2);
        assert_eq!(PipelineError::Io { path: "x".into(), source: io::Error::other("x") }.code(), 4);
        assert_eq!(PipelineError::CellFailures { count: 1, first: "x".into() }.code(), 3);
    }

    #[test]
    fn cell_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = FineContext::new(
            1.0,
            1.0,
            crate::fem::Material::new(1000.0, 0.3, 1.0).unwrap(),
            fine_opt::FineParams { n: 4, ..Default::default() },
            LoadMode::Equilibrated,
        )
        .unwrap();
        let p = FineCellProblem { cell: 7, target: 0.4, tractions: [[crate::grid::Vec2::new(0.1, -0.2); 2]; 4] };
        let mut r = FineCellResult::uniform(7, 4, 0.4);
        r.rho[3] = 0.1 + 0.2;
        r.reactions = [1e-17, -3.5e-15, 0.0];
        r.history.clear();
        write_cell(dir.path(), &p, &r, &ctx, false).unwrap();
        let path = dir.path().join(cell_file(7, "txt"));
        assert_eq!(read_cell_cache(&path, &cache_header(&p, &ctx)), Some(r));
        let other = FineCellProblem { target: 0.41, ..p };
        assert_eq!(read_cell_cache(&path, &cache_header(&other, &ctx)), None);
    }
}
