//! Fine-scale SIMP inside one coarse cell, driven by the cell's edge
//! tractions, plus the parallel farm over all cells.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse_opt::{sensitivity, CellState, CoarseError, DensityField, OcParams, OcProblem, SensitivityFilter};
use crate::equilibrate::{edge_set_resultant, EdgeTractionField};
use crate::fem::{self, FemError, Material};
use crate::grid::{BoundarySpec, CartesianGrid, GridError, NeumannEntry, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FineError {
    #[error("invalid fine parameters: {0}")]
    InvalidParams(String),
    #[error("cell {cell}: tractions not equilibrated (force {force:e}, moment {moment:e}, scale {scale:e})")]
    NotEquilibrated { cell: usize, force: f64, moment: f64, scale: f64 },
    #[error("cell {cell}: {source}")]
    Fem { cell: usize, source: FemError },
    #[error("cell {cell}: {source}")]
    Update { cell: usize, source: CoarseError },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionParams {
    pub beta0: f64,
    pub beta_max: f64,
    pub mu: f64,
    /// Gray-level threshold in percent.
    pub m_nd_min: f64,
    /// Projection cadence in iterations.
    pub every: usize,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams { beta0: 1.0, beta_max: 2.0, mu: 0.5, m_nd_min: 50.0, every: 2 }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<(), FineError> {
        let bad = |m: &str| Err(FineError::InvalidParams(m.into()));
        if !(self.beta0 >= 0.0 && self.beta0 <= self.beta_max && self.beta_max.is_finite()) {
            return bad("need 0 <= beta0 <= beta_max");
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad("mu must lie in (0, 1)");
        }
        if !(0.0..=100.0).contains(&self.m_nd_min) {
            return bad("m_nd_min must lie in [0, 100]");
        }
        if self.every == 0 {
            return bad("projection cadence must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineParams {
    pub n: usize,
    pub penalty: f64,
    /// Filter radius in fine element widths.
    pub r_min: f64,
    pub eps: f64,
    pub max_iterations: usize,
    pub oc: OcParams,
    pub projection: ProjectionParams,
}

impl Default for FineParams {
    fn default() -> Self {
        FineParams {
            n: 32,
            penalty: 3.0,
            r_min: 1.3,
            eps: 0.01,
            max_iterations: 300,
            oc: OcParams::default(),
            projection: ProjectionParams::default(),
        }
    }
}

impl FineParams {
    pub fn validate(&self) -> Result<(), FineError> {
        let bad = |m: &str| Err(FineError::InvalidParams(m.into()));
        if self.n < 2 {
            return bad("fine resolution must be at least 2");
        }
        if !(self.penalty >= 1.0 && self.penalty.is_finite()) {
            return bad("penalty must be >= 1");
        }
        if !(self.r_min > 0.0 && self.r_min.is_finite()) {
            return bad("r_min must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        self.oc.validate().map_err(|e| FineError::InvalidParams(e.to_string()))?;
        self.projection.validate()
    }
}

/// Linear tractions on the four cell edges, `[edge][start/end]`, edges in
/// counter-clockwise order from the bottom one.
pub type CellTractions = [[Vec2; 2]; 4];

/// Whether cell tractions must pass the equilibrium check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadMode {
    Equilibrated,
    /// Unchecked loads (control runs with raw element stresses).
    Raw,
}

/// Exponential projection towards 0/1 with threshold `mu`.
pub fn project_density(rho: f64, beta: f64, mu: f64) -> f64 {
    if rho <= mu {
        let a = 1.0 - rho / mu;
        mu * ((-beta * a).exp() - a * (-beta).exp())
    } else {
        let a = (rho - mu) / (1.0 - mu);
        (1.0 - mu) * (1.0 - (-beta * a).exp() + a * (-beta).exp()) + mu
    }
}

/// Gray-level measure `Σ 4ρ(1-ρ)/n · 100`.
pub fn measure_nondiscreteness(rho: &[f64]) -> f64 {
    if rho.is_empty() {
        return 0.0;
    }
    rho.iter().map(|r| 4.0 * r * (1.0 - r)).sum::<f64>() / rho.len() as f64 * 100.0
}

/// `Σ L (|t_s| + |t_e|) / 2` over the four edges.
pub fn traction_scale(hx: f64, hy: f64, t: &CellTractions) -> f64 {
    (0..4).map(|k| if k % 2 == 0 { hx } else { hy } * 0.5 * (t[k][0].norm() + t[k][1].norm())).sum()
}

/// Neumann entries on the fine boundary edges reproducing the coarse linear
/// tractions (sampled exactly at the fine edge end points).
pub fn cell_neumann(grid: &CartesianGrid, t: &CellTractions) -> Vec<NeumannEntry> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let w = nx as f64 * grid.hx();
    let h = ny as f64 * grid.hy();
    let starts = [Vec2::new(0.0, 0.0), Vec2::new(w, 0.0), Vec2::new(w, h), Vec2::new(0.0, h)];
    let lengths = [w, h, w, h];
    let mut out = Vec::new();
    for k in 0..4 {
        let at = |p: Vec2| {
            let s = (p - grid.origin() - starts[k]).norm() / lengths[k];
            t[k][0] * (1.0 - s) + t[k][1] * s
        };
        let elements: Vec<usize> = match k {
            0 => (0..nx).map(|i| grid.element_id(i, 0)).collect(),
            1 => (0..ny).map(|j| grid.element_id(nx - 1, j)).collect(),
            2 => (0..nx).map(|i| grid.element_id(i, ny - 1)).collect(),
            _ => (0..ny).map(|j| grid.element_id(0, j)).collect(),
        };
        for e in elements {
            let (a, b) = grid.edge_nodes(e, k);
            out.push(NeumannEntry {
                element: e,
                edge: k,
                t_start: at(grid.node_position(a)),
                t_end: at(grid.node_position(b)),
            });
        }
    }
    out
}

/// Fine nodal load vector of the cell tractions.
pub fn apply_cell_tractions(grid: &CartesianGrid, t: &CellTractions) -> Vec<f64> {
    let b = BoundarySpec { dirichlet: Vec::new(), neumann: cell_neumann(grid, t) };
    fem::load_vector(grid, &b)
}

/// Bottom-left node fixed in x and y, bottom-right node fixed in y.
pub fn rigid_body_supports(grid: &CartesianGrid) -> BoundarySpec {
    let mut b = BoundarySpec::new();
    b.fix_node(grid.node_id(0, 0), [true, true], [0.0; 2]);
    b.fix_node(grid.node_id(grid.nx(), 0), [false, true], [0.0; 2]);
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineCellProblem {
    pub cell: usize,
    pub target: f64,
    pub tractions: CellTractions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FineIteration {
    pub iteration: usize,
    pub compliance: f64,
    pub volume: f64,
    pub change: f64,
    pub beta: f64,
    pub m_nd: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineCellResult {
    pub cell: usize,
    pub n: usize,
    /// Fine densities by fine element id (column-major, `ix * n + iy`).
    pub rho: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub beta: f64,
    pub m_nd: f64,
    pub compliance: f64,
    /// Support reactions: bottom-left x, bottom-left y, bottom-right y.
    pub reactions: [f64; 3],
    pub reaction_scale: f64,
    pub history: Vec<FineIteration>,
}

impl FineCellResult {
    pub fn uniform(cell: usize, n: usize, value: f64) -> Self {
        FineCellResult {
            cell,
            n,
            rho: vec![value; n * n],
            iterations: 0,
            converged: true,
            beta: 0.0,
            m_nd: measure_nondiscreteness(&[value]),
            compliance: 0.0,
            reactions: [0.0; 3],
            reaction_scale: 0.0,
            history: Vec::new(),
        }
    }

    pub fn volume_fraction(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }

    pub fn max_reaction(&self) -> f64 {
        self.reactions.iter().fold(0.0, |a, r| a.max(r.abs()))
    }
}

/// Shared per-run data: every cell has the same size and mesh.
#[derive(Debug, Clone)]
pub struct FineContext {
    pub grid: CartesianGrid,
    pub supports: BoundarySpec,
    pub material: Material,
    pub filter: SensitivityFilter,
    pub params: FineParams,
    pub mode: LoadMode,
}

impl FineContext {
    /// `hx × hy` cell meshed with `n × n` elements. The material penalty is
    /// replaced by the fine one.
    pub fn new(hx: f64, hy: f64, material: Material, params: FineParams, mode: LoadMode) -> Result<Self, FineError> {
        params.validate()?;
        let n = params.n;
        let grid = CartesianGrid::full(n, n, hx / n as f64, hy / n as f64)?;
        let material = material.with_penalty(params.penalty);
        material.validate().map_err(|source| FineError::Fem { cell: 0, source })?;
        let filter = SensitivityFilter::new(&grid, params.r_min);
        let supports = rigid_body_supports(&grid);
        Ok(FineContext { grid, supports, material, filter, params, mode })
    }

    fn cell_size(&self) -> (f64, f64) {
        (self.grid.hx() * self.grid.nx() as f64, self.grid.hy() * self.grid.ny() as f64)
    }

    fn check_equilibrium(&self, problem: &FineCellProblem) -> Result<f64, FineError> {
        let (w, h) = self.cell_size();
        let scale = traction_scale(w, h, &problem.tractions);
        if self.mode == LoadMode::Equilibrated {
            let (f, m) = edge_set_resultant(w, h, &problem.tractions);
            let tol = 1e-8 * scale.max(f64::MIN_POSITIVE);
            if f.norm() > tol || m.abs() > tol * w.max(h) {
                return Err(FineError::NotEquilibrated { cell: problem.cell, force: f.norm(), moment: m, scale });
            }
        }
        Ok(scale)
    }

    /// Optimize one cell.
    pub fn solve(&self, problem: &FineCellProblem) -> Result<FineCellResult, FineError> {
        let p = &self.params;
        let n = p.n;
        let cell = problem.cell;
        let rho_min = self.material.rho_min;
        let target = problem.target.clamp(rho_min, 1.0);
        if target >= 1.0 {
            return Ok(FineCellResult::uniform(cell, n, 1.0));
        }
        let reaction_scale = self.check_equilibrium(problem)?;
        let grid = &self.grid;
        let mut boundary = self.supports.clone();
        boundary.neumann = cell_neumann(grid, &problem.tractions);
        let loads = fem::load_vector(grid, &boundary);
        let support_dofs = [
            grid.dof(grid.node_id(0, 0), 0).unwrap(),
            grid.dof(grid.node_id(0, 0), 1).unwrap(),
            grid.dof(grid.node_id(n, 0), 1).unwrap(),
        ];
        let area = grid.element_area();
        let vol = vec![area; n * n];
        let free = vec![true; n * n];
        let target_volume = target * area * (n * n) as f64;
        let fem_err = |source| FineError::Fem { cell, source };

        let mut rho = vec![target; n * n];
        let mut beta = p.projection.beta0;
        let mut history = Vec::new();
        let mut converged = false;
        let mut compliance = 0.0;
        let mut reactions = [0.0; 3];
        let mut iterations = 0;
        for it in 1..=p.max_iterations {
            iterations = it;
            let (_, sol) = fem::analyze(grid, &rho, &self.material, &loads, &boundary).map_err(fem_err)?;
            compliance = sol.compliance;
            reactions = support_dofs.map(|d| sol.reactions[d]);
            let dc = sensitivity(grid, &rho, &self.material, &sol);
            let dcf = self.filter.apply(&rho, &dc);
            let oc = OcProblem { rho: &rho, dc: &dcf, vol: &vol, free: &free, rho_min, params: p.oc };
            let mut next = match oc.solve(target_volume) {
                Ok(step) => step.rho,
                Err(CoarseError::VolumeUnattainable { max, .. }) => {
                    // the projection moved the volume beyond one move limit
                    oc.densities_at(if target_volume > max { f64::MIN_POSITIVE } else { f64::MAX })
                }
                Err(source) => return Err(FineError::Update { cell, source }),
            };
            let m_nd = measure_nondiscreteness(&next);
            let mut projected = false;
            if it % p.projection.every == 0 && m_nd > p.projection.m_nd_min {
                for r in next.iter_mut() {
                    *r = project_density(*r, beta, p.projection.mu).clamp(rho_min, 1.0);
                }
                beta = (2.0 * beta).min(p.projection.beta_max);
                projected = true;
            }
            let change = rho.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            rho = next;
            history.push(FineIteration {
                iteration: it,
                compliance,
                volume: rho.iter().sum::<f64>() / (n * n) as f64,
                change,
                beta,
                m_nd,
                projected,
            });
            if change < p.eps {
                converged = true;
                break;
            }
        }
        Ok(FineCellResult {
            cell,
            n,
            m_nd: measure_nondiscreteness(&rho),
            rho,
            iterations,
            converged,
            beta,
            compliance,
            reactions,
            reaction_scale,
            history,
        })
    }
}

/// Outcome of the cell farm, keyed by coarse element id.
#[derive(Debug, Clone, Default)]
pub struct FarmResult {
    pub cells: BTreeMap<usize, FineCellResult>,
    pub failures: BTreeMap<usize, FineError>,
    /// Number of cells that went through the optimizer.
    pub solved: usize,
}

/// Frozen cells with their uniform rasters, and the problems of the free
/// cells.
pub fn cell_problems(
    coarse_grid: &CartesianGrid,
    field: &DensityField,
    tractions: &EdgeTractionField,
    n: usize,
    rho_min: f64,
) -> (BTreeMap<usize, FineCellResult>, Vec<FineCellProblem>) {
    let mut frozen = BTreeMap::new();
    let mut problems = Vec::new();
    for e in coarse_grid.active_elements() {
        match field.state[e] {
            CellState::Solid => {
                frozen.insert(e, FineCellResult::uniform(e, n, 1.0));
            }
            CellState::Void => {
                frozen.insert(e, FineCellResult::uniform(e, n, rho_min));
            }
            CellState::Free => problems.push(FineCellProblem { cell: e, target: field.rho[e], tractions: tractions.t[e] }),
        }
    }
    (frozen, problems)
}

/// Solve the given cells on a pool of `workers` threads (0 = rayon default).
pub fn solve_cells(problems: &[FineCellProblem], ctx: &FineContext, workers: usize) -> Result<FarmResult, FineError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| FineError::Pool(e.to_string()))?;
    let solved: Vec<(usize, Result<FineCellResult, FineError>)> =
        pool.install(|| problems.par_iter().map(|p| (p.cell, ctx.solve(p))).collect());
    let mut result = FarmResult { solved: solved.len(), ..FarmResult::default() };
    for (cell, r) in solved {
        match r {
            Ok(r) => {
                result.cells.insert(cell, r);
            }
            Err(err) => {
                result.failures.insert(cell, err);
            }
        }
    }
    Ok(result)
}

/// Optimize every free coarse cell; frozen cells get uniform rasters.
pub fn solve_all_cells(
    coarse_grid: &CartesianGrid,
    field: &DensityField,
    tractions: &EdgeTractionField,
    ctx: &FineContext,
    workers: usize,
) -> Result<FarmResult, FineError> {
    let (frozen, problems) = cell_problems(coarse_grid, field, tractions, ctx.params.n, ctx.material.rho_min);
    let mut result = solve_cells(&problems, ctx, workers)?;
    result.cells.extend(frozen);
    Ok(result)
}
