//! Coarse-scale SIMP: sensitivities, the classic sensitivity filter, the
//! optimality-criteria update and the threshold-freezing stage loop.
//!
//! The filter and OC update are shared with the fine level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{self, FESolution, FemError, Material};
use crate::grid::{BoundarySpec, CartesianGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoarseError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("volume {target} is unattainable (reachable range [{min}, {max}])")]
    VolumeUnattainable { target: f64, min: f64, max: f64 },
    #[error("volume bisection failed to converge (relative error {0:e})")]
    Bisection(f64),
    #[error("expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("finite element analysis failed: {0}")]
    Fem(#[from] FemError),
}

/// Optimality-criteria update parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcParams {
    /// Move limit.
    pub zeta: f64,
    /// Damping exponent.
    pub eta: f64,
    /// Relative volume tolerance of the multiplier bisection.
    pub vol_tol: f64,
}

impl Default for OcParams {
    fn default() -> Self {
        OcParams { zeta: 0.2, eta: 0.5, vol_tol: 1e-9 }
    }
}

impl OcParams {
    pub fn validate(&self) -> Result<(), CoarseError> {
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(CoarseError::InvalidParams(format!("zeta must lie in (0, 1), got {}", self.zeta)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(CoarseError::InvalidParams(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.vol_tol > 0.0 && self.vol_tol < 1e-3) {
            return Err(CoarseError::InvalidParams(format!("vol_tol must lie in (0, 1e-3), got {}", self.vol_tol)));
        }
        Ok(())
    }
}

/// Freezing thresholds and the prescribed volume fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub rho_bar_min: f64,
    pub rho_bar_max: f64,
    pub rho0: f64,
}

impl ThresholdPolicy {
    /// `rho_min <= rho_bar_min < rho_bar_max <= 1`; the closed end points
    /// give the degenerate policy where nothing is forced out of range.
    pub fn validate(&self, rho_min: f64) -> Result<(), CoarseError> {
        if !(self.rho_bar_min >= rho_min && self.rho_bar_min < self.rho_bar_max && self.rho_bar_max <= 1.0) {
            return Err(CoarseError::InvalidParams(format!(
                "thresholds must satisfy rho_min <= rho_bar_min < rho_bar_max <= 1, got [{}, {}]",
                self.rho_bar_min, self.rho_bar_max
            )));
        }
        if !(self.rho0 > rho_min && self.rho0 <= 1.0) {
            return Err(CoarseError::InvalidParams(format!("rho0 must lie in (rho_min, 1], got {}", self.rho0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseParams {
    pub penalty: f64,
    pub r_min: f64,
    pub eps: f64,
    pub max_inner: usize,
    pub max_stages: usize,
}

impl Default for CoarseParams {
    fn default() -> Self {
        CoarseParams { penalty: 1.0, r_min: 1.5, eps: 0.03, max_inner: 200, max_stages: 50 }
    }
}

impl CoarseParams {
    pub fn validate(&self) -> Result<(), CoarseError> {
        if !(self.penalty >= 1.0) {
            return Err(CoarseError::InvalidParams(format!("penalty must be >= 1, got {}", self.penalty)));
        }
        if !(self.r_min > 0.0) || !self.r_min.is_finite() {
            return Err(CoarseError::InvalidParams(format!("r_min must be positive, got {}", self.r_min)));
        }
        if !(self.eps > 0.0) {
            return Err(CoarseError::InvalidParams(format!("eps must be positive, got {}", self.eps)));
        }
        if self.max_inner == 0 || self.max_stages == 0 {
            return Err(CoarseError::InvalidParams("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellState {
    Free,
    Solid,
    Void,
}

/// Per-element densities with their frozen state. Indexed by element id;
/// entries of inactive elements are zero and never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub rho: Vec<f64>,
    pub state: Vec<CellState>,
    pub stage: usize,
}

impl DensityField {
    pub fn uniform(grid: &CartesianGrid, rho0: f64) -> Self {
        let rho = (0..grid.num_elements()).map(|e| if grid.is_active(e) { rho0 } else { 0.0 }).collect();
        DensityField { rho, state: vec![CellState::Free; grid.num_elements()], stage: 0 }
    }

    pub fn free_mask(&self, grid: &CartesianGrid) -> Vec<bool> {
        (0..grid.num_elements()).map(|e| grid.is_active(e) && self.state[e] == CellState::Free).collect()
    }

    pub fn void_mask(&self) -> Vec<bool> {
        self.state.iter().map(|s| *s == CellState::Void).collect()
    }

    pub fn volume(&self, grid: &CartesianGrid) -> f64 {
        grid.active_elements().map(|e| self.rho[e]).sum::<f64>() * grid.element_area()
    }

    pub fn volume_fraction(&self, grid: &CartesianGrid) -> f64 {
        self.volume(grid) / (grid.num_active_elements() as f64 * grid.element_area())
    }

    pub fn count(&self, grid: &CartesianGrid, state: CellState) -> usize {
        grid.active_elements().filter(|&e| self.state[e] == state).count()
    }
}

/// Compliance sensitivities `dc/dρₑ = -p ρₑᵖ⁻¹ uₑᵀ Kₑ uₑ`, zero for inactive
/// elements.
pub fn sensitivity(grid: &CartesianGrid, densities: &[f64], material: &Material, solution: &FESolution) -> Vec<f64> {
    let mut dc = vec![0.0; grid.num_elements()];
    for e in grid.active_elements() {
        // element_energy = ρᵖ uᵀKu
        dc[e] = -material.penalty * solution.element_energy[e] / densities[e];
    }
    dc
}

/// Precomputed cone weights `max(0, r_min - dist)` in element-index units.
#[derive(Debug, Clone)]
pub struct SensitivityFilter {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl SensitivityFilter {
    pub fn new(grid: &CartesianGrid, r_min: f64) -> Self {
        let reach = r_min.ceil() as isize;
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for e in 0..grid.num_elements() {
            if grid.is_active(e) {
                let (ix, iy) = grid.element_coords(e);
                for dx in -reach..=reach {
                    for dy in -reach..=reach {
                        let jx = ix as isize + dx;
                        let jy = iy as isize + dy;
                        if jx < 0 || jy < 0 || jx >= grid.nx() as isize || jy >= grid.ny() as isize {
                            continue;
                        }
                        let f = grid.element_id(jx as usize, jy as usize);
                        let w = r_min - ((dx * dx + dy * dy) as f64).sqrt();
                        if grid.is_active(f) && w > 0.0 {
                            neighbors.push(f);
                            weights.push(w);
                        }
                    }
                }
            }
            offsets.push(neighbors.len());
        }
        SensitivityFilter { offsets, neighbors, weights }
    }

    /// `(Σ H ρ dc) / (ρₑ Σ H)`; inactive entries pass through unchanged.
    pub fn apply(&self, densities: &[f64], sens: &[f64]) -> Vec<f64> {
        let mut out = sens.to_vec();
        for e in 0..self.offsets.len() - 1 {
            let range = self.offsets[e]..self.offsets[e + 1];
            if range.is_empty() {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for k in range {
                let f = self.neighbors[k];
                num += self.weights[k] * densities[f] * sens[f];
                den += self.weights[k];
            }
            out[e] = num / (densities[e] * den);
        }
        out
    }
}

pub fn filter_sensitivities(grid: &CartesianGrid, densities: &[f64], sens: &[f64], r_min: f64) -> Vec<f64> {
    SensitivityFilter::new(grid, r_min).apply(densities, sens)
}

/// One OC update: free elements move, everything else is copied. `vol` holds
/// the volume of each element counted in the constraint (0 for inactive).
#[derive(Debug, Clone, Copy)]
pub struct OcProblem<'a> {
    pub rho: &'a [f64],
    pub dc: &'a [f64],
    pub vol: &'a [f64],
    pub free: &'a [bool],
    pub rho_min: f64,
    pub params: OcParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcStep {
    pub rho: Vec<f64>,
    pub lambda: f64,
    pub volume: f64,
}

impl OcProblem<'_> {
    fn bounds(&self, e: usize) -> (f64, f64) {
        let r = self.rho[e];
        let z = self.params.zeta;
        (((1.0 - z) * r).max(self.rho_min), ((1.0 + z) * r).min(1.0))
    }

    fn updated(&self, e: usize, lambda: f64) -> f64 {
        let (lo, hi) = self.bounds(e);
        let b = (-self.dc[e]).max(0.0) / (lambda * self.vol[e]);
        let scale = if self.params.eta == 0.5 { b.sqrt() } else { b.powf(self.params.eta) };
        (self.rho[e] * scale).clamp(lo, hi)
    }

    pub fn densities_at(&self, lambda: f64) -> Vec<f64> {
        (0..self.rho.len()).map(|e| if self.free[e] { self.updated(e, lambda) } else { self.rho[e] }).collect()
    }

    pub fn volume_at(&self, lambda: f64) -> f64 {
        (0..self.rho.len())
            .map(|e| self.vol[e] * if self.free[e] { self.updated(e, lambda) } else { self.rho[e] })
            .sum()
    }

    fn volume_bounds(&self) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for e in 0..self.rho.len() {
            if self.free[e] {
                let (a, b) = self.bounds(e);
                lo += self.vol[e] * a;
                hi += self.vol[e] * b;
            } else {
                lo += self.vol[e] * self.rho[e];
                hi += self.vol[e] * self.rho[e];
            }
        }
        (lo, hi)
    }

    /// Find the multiplier Λ meeting `target` by geometric bracketing and
    /// log-space bisection.
    pub fn solve(&self, target: f64) -> Result<OcStep, CoarseError> {
        let n = self.rho.len();
        if self.dc.len() != n || self.vol.len() != n || self.free.len() != n {
            return Err(CoarseError::SizeMismatch { expected: n, got: self.dc.len().min(self.vol.len()).min(self.free.len()) });
        }
        let tol = self.params.vol_tol * target.abs().max(f64::MIN_POSITIVE);
        let (vmin, vmax) = self.volume_bounds();
        if target < vmin - tol || target > vmax + tol {
            return Err(CoarseError::VolumeUnattainable { target, min: vmin, max: vmax });
        }
        let free_count = self.free.iter().filter(|f| **f).count();
        let energy: f64 = (0..n).filter(|&e| self.free[e]).map(|e| (-self.dc[e]).max(0.0) * self.rho[e]).sum();
        if free_count == 0 || energy == 0.0 {
            let volume = self.volume_at(1.0);
            return Ok(OcStep { rho: self.densities_at(1.0), lambda: 0.0, volume });
        }
        let free_vol: f64 = (0..n).filter(|&e| self.free[e]).map(|e| self.vol[e] * self.rho[e]).sum();
        let guess = energy / free_vol.max(f64::MIN_POSITIVE);
        let mut lo = guess;
        let mut hi = guess;
        let mut steps = 0;
        while self.volume_at(lo) < target && steps < 2000 {
            lo *= 0.5;
            steps += 1;
        }
        while self.volume_at(hi) > target && steps < 4000 {
            hi *= 2.0;
            steps += 1;
        }
        let mut mid = (lo * hi).sqrt();
        for _ in 0..200 {
            mid = (lo * hi).sqrt();
            let v = self.volume_at(mid);
            if (v - target).abs() <= 1e-3 * tol || hi / lo - 1.0 < 1e-15 {
                break;
            }
            if v > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let rho = self.densities_at(mid);
        let volume: f64 = rho.iter().zip(self.vol).map(|(r, v)| r * v).sum();
        if (volume - target).abs() > tol {
            return Err(CoarseError::Bisection((volume - target).abs() / target.abs()));
        }
        Ok(OcStep { rho, lambda: mid, volume })
    }
}

/// Shift the free densities uniformly (with clamping to `[rho_min, 1]`) so the
/// total volume meets `target`.
pub fn restore_volume(rho: &mut [f64], free: &[bool], vol: &[f64], rho_min: f64, target: f64) -> Result<(), CoarseError> {
    let volume = |c: f64, rho: &[f64]| -> f64 {
        (0..rho.len())
            .map(|e| vol[e] * if free[e] { (rho[e] + c).clamp(rho_min, 1.0) } else { rho[e] })
            .sum()
    };
    let tol = 1e-12 * target.abs();
    if (volume(0.0, rho) - target).abs() <= tol {
        return Ok(());
    }
    let (vmin, vmax) = (volume(-1.0, rho), volume(1.0, rho));
    if target < vmin - tol || target > vmax + tol {
        return Err(CoarseError::VolumeUnattainable { target, min: vmin, max: vmax });
    }
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if volume(mid, rho) > target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    for e in 0..rho.len() {
        if free[e] {
            rho[e] = (rho[e] + c).clamp(rho_min, 1.0);
        }
    }
    Ok(())
}

/// One row of the coarse iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub iteration: usize,
    pub compliance: f64,
    pub volume: f64,
    pub max_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

/// Everything the SIMP iterations need besides the densities.
#[derive(Debug, Clone, Copy)]
pub struct SimpSetup<'a> {
    pub grid: &'a CartesianGrid,
    pub material: &'a Material,
    pub loads: &'a [f64],
    pub boundary: &'a BoundarySpec,
    pub r_min: f64,
    pub eps: f64,
    pub max_iterations: usize,
    pub oc: OcParams,
}

/// FE solve, sensitivity, filter and OC update until `max |Δρ| < eps` or the
/// iteration cap. Volume is held at `target`.
pub fn simp_inner_solve(setup: &SimpSetup, field: &mut DensityField, target: f64) -> Result<InnerResult, CoarseError> {
    let grid = setup.grid;
    let filter = SensitivityFilter::new(grid, setup.r_min);
    let vol: Vec<f64> = (0..grid.num_elements()).map(|e| if grid.is_active(e) { grid.element_area() } else { 0.0 }).collect();
    let free = field.free_mask(grid);
    let mut history = Vec::new();
    for it in 1..=setup.max_iterations {
        let (_, sol) = fem::analyze(grid, &field.rho, setup.material, setup.loads, setup.boundary)?;
        let dc = sensitivity(grid, &field.rho, setup.material, &sol);
        let dcf = filter.apply(&field.rho, &dc);
        let step = OcProblem { rho: &field.rho, dc: &dcf, vol: &vol, free: &free, rho_min: setup.material.rho_min, params: setup.oc }
            .solve(target)?;
        let change = (0..grid.num_elements())
            .filter(|&e| free[e])
            .map(|e| (step.rho[e] - field.rho[e]).abs())
            .fold(0.0, f64::max);
        field.rho = step.rho;
        history.push(IterationRecord {
            stage: field.stage,
            iteration: it,
            compliance: sol.compliance,
            volume: step.volume / vol.iter().sum::<f64>(),
            max_change: change,
        });
        if change < setup.eps {
            return Ok(InnerResult { iterations: it, converged: true, history });
        }
    }
    Ok(InnerResult { iterations: setup.max_iterations, converged: false, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub iterations: usize,
    pub inner_converged: bool,
    pub frozen_solid: usize,
    pub frozen_void: usize,
    pub cleaned: usize,
    /// Densities at the end of the stage, before freezing.
    pub snapshot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub field: DensityField,
    pub stages: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub reports: Vec<StageReport>,
    pub compliance: f64,
}

/// Freeze elements at or beyond the thresholds. Returns (solid, void,
/// strictly-outside) counts.
pub fn freeze(grid: &CartesianGrid, field: &mut DensityField, policy: &ThresholdPolicy, rho_min: f64) -> (usize, usize, usize) {
    let (mut solid, mut void, mut outside) = (0, 0, 0);
    for e in grid.active_elements() {
        if field.state[e] != CellState::Free {
            continue;
        }
        let r = field.rho[e];
        if r > policy.rho_bar_max || r < policy.rho_bar_min {
            outside += 1;
        }
        if r >= policy.rho_bar_max {
            field.state[e] = CellState::Solid;
            field.rho[e] = 1.0;
            solid += 1;
        } else if r <= policy.rho_bar_min {
            field.state[e] = CellState::Void;
            field.rho[e] = rho_min;
            void += 1;
        }
    }
    (solid, void, outside)
}

/// Void elements that would break the nodal equilibration: non-void elements
/// with three or more void edge neighbours, and one element of every
/// checkerboard node (two diagonal voids with non-void elements on the other
/// diagonal). Repeats until stable and returns the number of elements voided.
pub fn clean_void_patterns(grid: &CartesianGrid, field: &mut DensityField, rho_min: f64) -> usize {
    let mut total = 0;
    loop {
        let mut changed = 0;
        for e in grid.active_elements() {
            if field.state[e] == CellState::Void {
                continue;
            }
            let voids = (0..4)
                .filter(|&k| grid.active_neighbor(e, k).is_some_and(|f| field.state[f] == CellState::Void))
                .count();
            if voids >= 3 {
                field.state[e] = CellState::Void;
                field.rho[e] = rho_min;
                changed += 1;
            }
        }
        for n in 0..grid.num_nodes() {
            let around = grid.active_elements_around_node(n);
            let Some(slots) = around.iter().copied().collect::<Option<Vec<usize>>>() else {
                continue;
            };
            for (a, b, c, d) in [(0, 2, 1, 3), (1, 3, 0, 2)] {
                let is_void = |k: usize| field.state[slots[k]] == CellState::Void;
                if is_void(a) && is_void(b) && !is_void(c) && !is_void(d) {
                    let (x, y) = (slots[c], slots[d]);
                    let victim = match (field.state[x], field.state[y]) {
                        (CellState::Free, CellState::Solid) => x,
                        (CellState::Solid, CellState::Free) => y,
                        _ if field.rho[y] < field.rho[x] => y,
                        _ => x,
                    };
                    field.state[victim] = CellState::Void;
                    field.rho[victim] = rho_min;
                    changed += 1;
                }
            }
        }
        if changed == 0 {
            return total;
        }
        total += changed;
    }
}

/// The threshold-freezing stage loop.
pub fn stage_loop(
    grid: &CartesianGrid,
    policy: &ThresholdPolicy,
    material: &Material,
    params: &CoarseParams,
    oc: &OcParams,
    loads: &[f64],
    boundary: &BoundarySpec,
) -> Result<CoarseResult, CoarseError> {
    material.validate()?;
    policy.validate(material.rho_min)?;
    params.validate()?;
    oc.validate()?;
    let material = material.with_penalty(params.penalty);
    let vol: Vec<f64> = (0..grid.num_elements()).map(|e| if grid.is_active(e) { grid.element_area() } else { 0.0 }).collect();
    let target = policy.rho0 * vol.iter().sum::<f64>();
    let setup = SimpSetup {
        grid,
        material: &material,
        loads,
        boundary,
        r_min: params.r_min,
        eps: params.eps,
        max_iterations: params.max_inner,
        oc: *oc,
    };
    let mut field = DensityField::uniform(grid, policy.rho0);
    let mut history = Vec::new();
    let mut reports = Vec::new();
    let mut converged = false;
    for stage in 1..=params.max_stages {
        field.stage = stage;
        let free = field.free_mask(grid);
        restore_volume(&mut field.rho, &free, &vol, material.rho_min, target)?;
        let inner = simp_inner_solve(&setup, &mut field, target)?;
        let snapshot = field.rho.clone();
        let (frozen_solid, frozen_void, outside) = freeze(grid, &mut field, policy, material.rho_min);
        let cleaned = clean_void_patterns(grid, &mut field, material.rho_min);
        history.extend(inner.history);
        reports.push(StageReport {
            stage,
            iterations: inner.iterations,
            inner_converged: inner.converged,
            frozen_solid,
            frozen_void,
            cleaned,
            snapshot,
        });
        if outside == 0 && cleaned == 0 {
            converged = true;
            break;
        }
    }
    let (_, sol) = fem::analyze(grid, &field.rho, &material, loads, boundary)?;
    Ok(CoarseResult { stages: field.stage, field, converged, history, reports, compliance: sol.compliance })
}
