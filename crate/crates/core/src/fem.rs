//! Plane-stress bilinear finite elements on [`CartesianGrid`]s.
//!
//! Unit thickness throughout. Element dofs are ordered `[u0x, u0y, u1x, ...]`
//! following the counter-clockwise corner numbering of [`crate::grid`].

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::band::{BandMatrix, SolverError};
use crate::grid::{BoundarySpec, CartesianGrid, GridError, Vec2};

pub type ElementMatrix = SMatrix<f64, 8, 8>;
pub type ElementVector = SVector<f64, 8>;

/// Reference corner coordinates in `[-1, 1]²`.
pub const REFERENCE_CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("density {value} of element {element} is outside [rho_min, 1]")]
    DensityOutOfBounds { element: usize, value: f64 },
    #[error("expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("stiffness matrix is singular (insufficient supports?): {0}")]
    Singular(SolverError),
    #[error("linear solve did not meet residual tolerance (relative residual {0:e})")]
    NotConverged(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Isotropic plane-stress material with SIMP interpolation `E(ρ) = ρᵖ E`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Material {
    pub young: f64,
    pub poisson: f64,
    pub penalty: f64,
    pub rho_min: f64,
}

impl Material {
    pub fn new(young: f64, poisson: f64, penalty: f64) -> Result<Self, FemError> {
        let m = Material { young, poisson, penalty, rho_min: 1e-3 };
        m.validate()?;
        Ok(m)
    }

    pub fn with_penalty(self, penalty: f64) -> Self {
        Material { penalty, ..self }
    }

    pub fn validate(&self) -> Result<(), FemError> {
        if !(self.young > 0.0) || !self.young.is_finite() {
            return Err(FemError::InvalidMaterial(format!("Young's modulus must be positive, got {}", self.young)));
        }
        if !(self.poisson >= 0.0 && self.poisson < 0.5) {
            return Err(FemError::InvalidMaterial(format!("Poisson ratio must lie in [0, 0.5), got {}", self.poisson)));
        }
        if !(self.penalty >= 1.0) || !self.penalty.is_finite() {
            return Err(FemError::InvalidMaterial(format!("penalty must be >= 1, got {}", self.penalty)));
        }
        if !(self.rho_min > 0.0 && self.rho_min < 1.0) {
            return Err(FemError::InvalidMaterial(format!("rho_min must lie in (0, 1), got {}", self.rho_min)));
        }
        Ok(())
    }

    /// Plane-stress constitutive matrix of the solid material.
    pub fn d0(&self) -> Matrix3<f64> {
        let c = self.young / (1.0 - self.poisson * self.poisson);
        let nu = self.poisson;
        Matrix3::new(c, c * nu, 0.0, c * nu, c, 0.0, 0.0, 0.0, c * (1.0 - nu) / 2.0)
    }

    /// Stiffness scale factor `ρᵖ`.
    pub fn interpolate(&self, rho: f64) -> f64 {
        rho.powf(self.penalty)
    }
}

/// Strain-displacement matrix at reference point `(xi, eta)`.
pub fn strain_displacement(hx: f64, hy: f64, xi: f64, eta: f64) -> SMatrix<f64, 3, 8> {
    let mut b = SMatrix::<f64, 3, 8>::zeros();
    for (a, &(xa, ya)) in REFERENCE_CORNERS.iter().enumerate() {
        let dx = 0.25 * xa * (1.0 + ya * eta) * 2.0 / hx;
        let dy = 0.25 * ya * (1.0 + xa * xi) * 2.0 / hy;
        b[(0, 2 * a)] = dx;
        b[(1, 2 * a + 1)] = dy;
        b[(2, 2 * a)] = dy;
        b[(2, 2 * a + 1)] = dx;
    }
    b
}

/// Solid-material element stiffness of an `hx x hy` rectangle (2x2 Gauss).
pub fn element_stiffness(material: &Material, hx: f64, hy: f64) -> Result<ElementMatrix, FemError> {
    material.validate()?;
    let d = material.d0();
    let g = 1.0 / 3.0f64.sqrt();
    let det_j = hx * hy / 4.0;
    let mut k = ElementMatrix::zeros();
    for xi in [-g, g] {
        for eta in [-g, g] {
            let b = strain_displacement(hx, hy, xi, eta);
            k += b.transpose() * d * b * det_j;
        }
    }
    // symmetrize roundoff
    Ok((k + k.transpose()) * 0.5)
}

/// Stress `ρᵖ D₀ B u` at reference point `(xi, eta)` of an element.
pub fn element_stress(material: &Material, rho: f64, hx: f64, hy: f64, ue: &ElementVector, xi: f64, eta: f64) -> Vector3<f64> {
    material.interpolate(rho) * material.d0() * strain_displacement(hx, hy, xi, eta) * ue
}

/// Consistent nodal loads of a linear edge traction.
pub fn consistent_edge_loads(t_start: Vec2, t_end: Vec2, length: f64) -> (Vec2, Vec2) {
    (
        (t_start * 2.0 + t_end) * (length / 6.0),
        (t_start + t_end * 2.0) * (length / 6.0),
    )
}

/// Inverse of [`consistent_edge_loads`]: the linear traction whose consistent
/// loads are `(p_start, p_end)`. Solves the 2x2 edge mass matrix
/// `[[L/3, L/6], [L/6, L/3]]` per component.
pub fn tractions_from_edge_loads(p_start: Vec2, p_end: Vec2, length: f64) -> (Vec2, Vec2) {
    (
        (p_start * 2.0 - p_end) * (2.0 / length),
        (p_end * 2.0 - p_start) * (2.0 / length),
    )
}

/// Global load vector assembled from the Neumann entries.
pub fn load_vector(grid: &CartesianGrid, boundary: &BoundarySpec) -> Vec<f64> {
    let mut f = vec![0.0; grid.num_dofs()];
    for nm in &boundary.neumann {
        let (a, b) = grid.edge_nodes(nm.element, nm.edge);
        let (pa, pb) = consistent_edge_loads(nm.t_start, nm.t_end, grid.edge_length(nm.edge));
        for c in 0..2 {
            f[grid.dof(a, c).expect("loaded node is active")] += pa[c];
            f[grid.dof(b, c).expect("loaded node is active")] += pb[c];
        }
    }
    f
}

/// Assembled SIMP stiffness `Σ ρₑᵖ Kₑ` over all active dofs.
#[derive(Debug, Clone)]
pub struct GlobalStiffness {
    band: BandMatrix,
    element_scale: Vec<f64>,
    ke: ElementMatrix,
}

impl GlobalStiffness {
    pub fn matrix(&self) -> &BandMatrix {
        &self.band
    }
    /// `ρₑᵖ` per element id (0 for inactive elements).
    pub fn element_scale(&self) -> &[f64] {
        &self.element_scale
    }
    pub fn element_matrix(&self) -> &ElementMatrix {
        &self.ke
    }
}

fn bandwidth(grid: &CartesianGrid) -> usize {
    grid.active_elements()
        .map(|e| {
            let dofs = grid.element_dofs(e);
            dofs.iter().max().unwrap() - dofs.iter().min().unwrap()
        })
        .max()
        .unwrap_or(0)
}

pub fn check_densities(grid: &CartesianGrid, densities: &[f64], rho_min: f64) -> Result<(), FemError> {
    if densities.len() != grid.num_elements() {
        return Err(FemError::SizeMismatch { expected: grid.num_elements(), got: densities.len() });
    }
    for e in grid.active_elements() {
        let r = densities[e];
        if !(r >= rho_min * (1.0 - 1e-12) && r <= 1.0 + 1e-12) {
            return Err(FemError::DensityOutOfBounds { element: e, value: r });
        }
    }
    Ok(())
}

/// Assemble the global stiffness. `densities` is indexed by element id; entries
/// of inactive elements are ignored.
pub fn assemble(grid: &CartesianGrid, densities: &[f64], material: &Material) -> Result<GlobalStiffness, FemError> {
    check_densities(grid, densities, material.rho_min)?;
    let ke = element_stiffness(material, grid.hx(), grid.hy())?;
    let mut band = BandMatrix::zeros(grid.num_dofs(), bandwidth(grid));
    let mut element_scale = vec![0.0; grid.num_elements()];
    for e in grid.active_elements() {
        let s = material.interpolate(densities[e]);
        element_scale[e] = s;
        let dofs = grid.element_dofs(e);
        for a in 0..8 {
            for b in 0..=a {
                band.add(dofs[a], dofs[b], s * ke[(a, b)]);
            }
        }
    }
    Ok(GlobalStiffness { band, element_scale, ke })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FESolution {
    /// Displacements over all active dofs.
    pub u: Vec<f64>,
    /// `uᵀ K u`.
    pub compliance: f64,
    /// `uᵀ f` (equals `compliance` for homogeneous supports).
    pub work: f64,
    /// `ρₑᵖ uₑᵀ Kₑ uₑ` per element id; their sum is `compliance`.
    pub element_energy: Vec<f64>,
    /// `K u - f` on constrained dofs, zero elsewhere.
    pub reactions: Vec<f64>,
}

/// Prescribed value per dof (`None` for free dofs).
pub fn prescribed_dofs(grid: &CartesianGrid, boundary: &BoundarySpec) -> Vec<Option<f64>> {
    let mut p = vec![None; grid.num_dofs()];
    for d in &boundary.dirichlet {
        for c in 0..2 {
            if d.fixed[c] {
                if let Some(dof) = grid.dof(d.node, c) {
                    p[dof] = Some(d.value[c]);
                }
            }
        }
    }
    p
}

/// Solve `K u = f` with Dirichlet values imposed by elimination.
pub fn solve(
    grid: &CartesianGrid,
    stiffness: &GlobalStiffness,
    loads: &[f64],
    boundary: &BoundarySpec,
) -> Result<FESolution, FemError> {
    let n = grid.num_dofs();
    if loads.len() != n {
        return Err(FemError::SizeMismatch { expected: n, got: loads.len() });
    }
    let prescribed = prescribed_dofs(grid, boundary);
    let k = &stiffness.band;
    let bw = k.bandwidth();
    let mut a = k.clone();
    let mut rhs = loads.to_vec();
    for i in 0..n {
        if let Some(ui) = prescribed[i] {
            if ui != 0.0 {
                for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                    rhs[j] -= k.get(j, i) * ui;
                }
            }
        }
    }
    for i in 0..n {
        if let Some(ui) = prescribed[i] {
            a.constrain(i);
            rhs[i] = ui;
        }
    }
    let chol = a.factor().map_err(FemError::Singular)?;
    chol.solve_in_place(&mut rhs).map_err(FemError::Singular)?;
    let u: Vec<f64> = (0..n).map(|i| prescribed[i].unwrap_or(rhs[i])).collect();
    let ku = k.mul_vec(&u);
    let mut res2 = 0.0;
    let mut f2 = 0.0;
    let mut ku2 = 0.0;
    let mut reactions = vec![0.0; n];
    for i in 0..n {
        let r = ku[i] - loads[i];
        if prescribed[i].is_none() {
            res2 += r * r;
            f2 += loads[i] * loads[i];
            ku2 += ku[i] * ku[i];
        } else {
            reactions[i] = r;
        }
    }
    // backward error: rounding in K u grows with |K| |u|, not with |f|
    let kmax = (0..n).map(|i| k.get(i, i)).fold(0.0, f64::max);
    let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = f2.max(ku2).sqrt().max(kmax * unorm);
    if scale > 0.0 && res2.sqrt() > 1e-8 * scale {
        return Err(FemError::NotConverged(res2.sqrt() / scale));
    }
    let compliance: f64 = u.iter().zip(&ku).map(|(a, b)| a * b).sum();
    let work: f64 = u.iter().zip(loads).map(|(a, b)| a * b).sum();
    let mut element_energy = vec![0.0; grid.num_elements()];
    for e in grid.active_elements() {
        let ue = element_displacements(grid, e, &u);
        element_energy[e] = stiffness.element_scale[e] * (ue.transpose() * stiffness.ke * ue)[(0, 0)];
    }
    Ok(FESolution { u, compliance, work, element_energy, reactions })
}

/// Assemble and solve in one step.
pub fn analyze(
    grid: &CartesianGrid,
    densities: &[f64],
    material: &Material,
    loads: &[f64],
    boundary: &BoundarySpec,
) -> Result<(GlobalStiffness, FESolution), FemError> {
    let k = assemble(grid, densities, material)?;
    let sol = solve(grid, &k, loads, boundary)?;
    Ok((k, sol))
}

pub fn element_displacements(grid: &CartesianGrid, e: usize, u: &[f64]) -> ElementVector {
    let dofs = grid.element_dofs(e);
    ElementVector::from_fn(|i, _| u[dofs[i]])
}

/// Nodal forces `F̂ᵉ = ρₑᵖ Kₑ uₑ` exerted on each element at its four corners,
/// indexed by element id (zero for inactive elements).
pub fn element_nodal_forces(grid: &CartesianGrid, stiffness: &GlobalStiffness, u: &[f64]) -> Vec<[Vec2; 4]> {
    let mut out = vec![[Vec2::zeros(); 4]; grid.num_elements()];
    for e in grid.active_elements() {
        let ue = element_displacements(grid, e, u);
        let f = stiffness.ke * ue * stiffness.element_scale[e];
        for a in 0..4 {
            out[e][a] = Vec2::new(f[2 * a], f[2 * a + 1]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Side;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn mat(nu: f64) -> Material {
        Material::new(1.0, nu, 1.0).unwrap()
    }

    /// Independent stiffness oracle: 3x3 Gauss in physical coordinates with
    /// shape functions written directly as `(1 - |x - xa|/hx)(1 - |y - ya|/hy)`.
    fn oracle_stiffness(m: &Material, hx: f64, hy: f64) -> DMatrix<f64> {
        let pts = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let wts = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let corners = [(0.0, 0.0), (hx, 0.0), (hx, hy), (0.0, hy)];
        let d = m.d0();
        let dmat = DMatrix::from_fn(3, 3, |i, j| d[(i, j)]);
        let mut k = DMatrix::zeros(8, 8);
        for (i, &gx) in pts.iter().enumerate() {
            for (j, &gy) in pts.iter().enumerate() {
                let x = 0.5 * hx * (1.0 + gx);
                let y = 0.5 * hy * (1.0 + gy);
                let w = wts[i] * wts[j] * hx * hy / 4.0;
                let mut b = DMatrix::zeros(3, 8);
                for (a, &(xa, ya)) in corners.iter().enumerate() {
                    let sx = if xa == 0.0 { -1.0 / hx } else { 1.0 / hx };
                    let sy = if ya == 0.0 { -1.0 / hy } else { 1.0 / hy };
                    let nx = 1.0 - (x - xa).abs() / hx;
                    let ny = 1.0 - (y - ya).abs() / hy;
                    b[(0, 2 * a)] = sx * ny;
                    b[(1, 2 * a + 1)] = sy * nx;
                    b[(2, 2 * a)] = sy * nx;
                    b[(2, 2 * a + 1)] = sx * ny;
                }
                k += b.transpose() * &dmat * &b * w;
            }
        }
        k
    }

    #[test]
    fn stiffness_matches_quadrature_oracle() {
        for (hx, hy) in [(1.0, 1.0), (2.0, 0.5), (0.3, 0.7)] {
            let m = mat(0.3);
            let k = element_stiffness(&m, hx, hy).unwrap();
            let o = oracle_stiffness(&m, hx, hy);
            for i in 0..8 {
                for j in 0..8 {
                    assert_relative_eq!(k[(i, j)], o[(i, j)], epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn unit_square_diagonal_entry() {
        let k = element_stiffness(&mat(0.3), 1.0, 1.0).unwrap();
        // (1/2 - nu/6) E / (1 - nu^2)
        assert_relative_eq!(k[(0, 0)], 0.45 / 0.91, epsilon = 1e-14);
        assert_relative_eq!(k[(0, 0)], 0.494505494505, epsilon = 1e-11);
    }

    #[test]
    fn square_stiffness_is_scale_invariant() {
        let m = mat(0.3);
        let a = oracle_stiffness(&m, 1.0, 1.0);
        let b = oracle_stiffness(&m, 2.0, 2.0);
        let k2 = element_stiffness(&m, 2.0, 2.0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_relative_eq!(a[(i, j)], b[(i, j)], epsilon = 1e-13);
                assert_relative_eq!(k2[(i, j)], a[(i, j)], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn stiffness_has_three_rigid_modes() {
        let k = element_stiffness(&mat(0.3), 1.5, 0.5).unwrap();
        assert_eq!(k, k.transpose());
        let tx = ElementVector::from_column_slice(&[1., 0., 1., 0., 1., 0., 1., 0.]);
        assert!((k * tx).norm() < 1e-14);
        let eig = nalgebra::SymmetricEigen::new(k);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ev[..3].iter().all(|v| v.abs() < 1e-12));
        assert!(ev[3] > 1e-3);
    }

    #[test]
    fn rejects_bad_material() {
        assert!(Material::new(1.0, 0.5, 3.0).is_err());
        assert!(Material::new(0.0, 0.3, 3.0).is_err());
        assert!(Material::new(1.0, 0.3, 0.5).is_err());
    }

    #[test]
    fn assembly_scales_with_density() {
        let g = CartesianGrid::full(1, 1, 1.0, 1.0).unwrap();
        let m = Material::new(1.0, 0.3, 3.0).unwrap();
        let k = assemble(&g, &[0.5], &m).unwrap();
        let ke = element_stiffness(&m, 1.0, 1.0).unwrap();
        let dofs = g.element_dofs(0);
        for i in 0..8 {
            for j in 0..8 {
                assert_relative_eq!(k.matrix().get(dofs[i], dofs[j]), 0.125 * ke[(i, j)], epsilon = 1e-15);
            }
        }
        assert!(matches!(assemble(&g, &[1.5], &m), Err(FemError::DensityOutOfBounds { .. })));
        assert!(matches!(assemble(&g, &[1e-4], &m), Err(FemError::DensityOutOfBounds { .. })));
    }

    /// Dense oracle assembler (independent scatter over node coordinates).
    fn dense_assembly(grid: &CartesianGrid, rho: &[f64], m: &Material) -> DMatrix<f64> {
        let ke = oracle_stiffness(m, grid.hx(), grid.hy());
        let n = grid.num_dofs();
        let mut k = DMatrix::zeros(n, n);
        for e in grid.active_elements() {
            let nodes = grid.element_nodes(e);
            let s = rho[e].powf(m.penalty);
            for a in 0..4 {
                for b in 0..4 {
                    for ca in 0..2 {
                        for cb in 0..2 {
                            let i = grid.dof(nodes[a], ca).unwrap();
                            let j = grid.dof(nodes[b], cb).unwrap();
                            k[(i, j)] += s * ke[(2 * a + ca, 2 * b + cb)];
                        }
                    }
                }
            }
        }
        k
    }

    #[test]
    fn two_element_assembly_matches_dense_sum() {
        let g = CartesianGrid::full(2, 1, 1.0, 1.0).unwrap();
        let m = Material::new(1.0, 0.3, 3.0).unwrap();
        let rho = [1.0, 1e-3];
        let k = assemble(&g, &rho, &m).unwrap();
        let d = dense_assembly(&g, &rho, &m);
        for i in 0..g.num_dofs() {
            for j in 0..g.num_dofs() {
                assert_relative_eq!(k.matrix().get(i, j), d[(i, j)], epsilon = 1e-14);
            }
        }
        // a shared-node diagonal entry gets ke_left + 1e-9 ke_right
        let ke = element_stiffness(&m, 1.0, 1.0).unwrap();
        let shared = g.dof(g.node_id(1, 0), 0).unwrap();
        assert_relative_eq!(k.matrix().get(shared, shared), ke[(2, 2)] + 1e-9 * ke[(0, 0)], epsilon = 1e-15);
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        let g = CartesianGrid::full(3, 2, 1.0, 1.0).unwrap();
        let mut b = BoundarySpec::new();
        b.support_side(&g, Side::Left, 0.0, 2.0, [true, true]);
        let m = mat(0.3);
        let f = vec![0.0; g.num_dofs()];
        let (_, sol) = analyze(&g, &vec![1.0; 6], &m, &f, &b).unwrap();
        assert!(sol.u.iter().all(|v| *v == 0.0));
        assert_eq!(sol.compliance, 0.0);
    }

    #[test]
    fn unsupported_body_is_singular() {
        let g = CartesianGrid::full(2, 2, 1.0, 1.0).unwrap();
        let m = mat(0.3);
        let k = assemble(&g, &vec![1.0; 4], &m).unwrap();
        let f = vec![0.0; g.num_dofs()];
        assert!(matches!(solve(&g, &k, &f, &BoundarySpec::new()), Err(FemError::Singular(_))));
    }

    /// Left edge on rollers, one pin, uniform traction σ on the right edge.
    pub(crate) fn uniaxial_patch(nx: usize, ny: usize, sigma: f64) -> (CartesianGrid, BoundarySpec) {
        let g = CartesianGrid::full(nx, ny, 1.0 / nx as f64, 1.0 / ny as f64).unwrap();
        let mut b = BoundarySpec::new();
        b.support_side(&g, Side::Left, 0.0, 1.0, [true, false]);
        b.fix_node(g.node_id(0, 0), [true, true], [0.0; 2]);
        b.load_side(&g, Side::Right, 0.0, 1.0, |_| Vec2::new(sigma, 0.0));
        (g, b)
    }

    #[test]
    fn uniaxial_patch_test_single_element() {
        let m = Material::new(1000.0, 0.3, 1.0).unwrap();
        let mut b = BoundarySpec::new();
        let g = CartesianGrid::full(1, 1, 1.0, 1.0).unwrap();
        b.fix_node(g.node_id(0, 0), [true, true], [0.0; 2]);
        b.fix_node(g.node_id(0, 1), [true, false], [0.0; 2]);
        b.load_side(&g, Side::Right, 0.0, 1.0, |_| Vec2::new(1.0, 0.0));
        let f = load_vector(&g, &b);
        let (_, sol) = analyze(&g, &[1.0], &m, &f, &b).unwrap();
        let ue = element_displacements(&g, 0, &sol.u);
        let eps = strain_displacement(1.0, 1.0, 0.3, -0.2) * ue;
        assert_relative_eq!(eps[0], 1.0 / 1000.0, epsilon = 1e-15);
        assert_relative_eq!(eps[1], -0.3 / 1000.0, epsilon = 1e-15);
        assert!(eps[2].abs() < 1e-15);
    }

    #[test]
    fn patch_test_on_masked_grid_gives_uniform_stress() {
        // notched rectangle, every boundary edge loaded with σ·n
        let nx = 4;
        let ny = 3;
        let mask: Vec<bool> = (0..nx * ny).map(|e| !(e / ny == 2 && e % ny == 2)).collect();
        let g = CartesianGrid::new(nx, ny, 0.5, 0.5, mask).unwrap();
        let m = Material::new(10.0, 0.25, 3.0).unwrap();
        let (sxx, syy, sxy) = (2.0, -0.7, 0.4);
        let mut b = BoundarySpec::new();
        b.fix_node(g.node_id(0, 0), [true, true], [0.0; 2]);
        b.fix_node(g.node_id(nx, 0), [false, true], [0.0; 2]);
        for be in g.boundary_edges() {
            let n = be.normal;
            let t = Vec2::new(sxx * n.x + sxy * n.y, sxy * n.x + syy * n.y);
            b.neumann.push(crate::grid::NeumannEntry { element: be.element, edge: be.edge, t_start: t, t_end: t });
        }
        let f = load_vector(&g, &b);
        let rho = vec![1.0; nx * ny];
        let (_, sol) = analyze(&g, &rho, &m, &f, &b).unwrap();
        for e in g.active_elements() {
            let ue = element_displacements(&g, e, &sol.u);
            for (xi, eta) in [(0.0, 0.0), (-1.0, 1.0), (0.7, -0.4)] {
                let s = element_stress(&m, 1.0, 0.5, 0.5, &ue, xi, eta);
                assert!((s[0] - sxx).abs() < 1e-8 && (s[1] - syy).abs() < 1e-8 && (s[2] - sxy).abs() < 1e-8, "{s:?}");
            }
        }
        assert!(sol.reactions.iter().all(|r| r.abs() < 1e-8));
    }

    fn cantilever(nx: usize, ny: usize) -> (CartesianGrid, BoundarySpec) {
        let g = CartesianGrid::full(nx, ny, 2.0 / nx as f64, 1.0 / ny as f64).unwrap();
        let mut b = BoundarySpec::new();
        b.support_side(&g, Side::Left, 0.0, 1.0, [true, true]);
        b.load_side(&g, Side::Right, 0.0, 1.0, |y| Vec2::new(0.0, -(1.0 - (2.0 * y - 1.0).powi(2))));
        (g, b)
    }

    #[test]
    fn cantilever_matches_dense_oracle() {
        let (g, b) = cantilever(8, 4);
        let m = Material::new(1000.0, 0.3, 3.0).unwrap();
        let rho: Vec<f64> = (0..32).map(|e| 0.2 + 0.8 * ((e * 7 % 11) as f64 / 10.0)).collect();
        let f = load_vector(&g, &b);
        let (_, sol) = analyze(&g, &rho, &m, &f, &b).unwrap();

        let kd = dense_assembly(&g, &rho, &m);
        let fixed = prescribed_dofs(&g, &b);
        let free: Vec<usize> = (0..g.num_dofs()).filter(|&i| fixed[i].is_none()).collect();
        let kff = DMatrix::from_fn(free.len(), free.len(), |i, j| kd[(free[i], free[j])]);
        let ff = DVector::from_fn(free.len(), |i, _| f[free[i]]);
        let uf = kff.lu().solve(&ff).unwrap();
        for (k, &i) in free.iter().enumerate() {
            assert_relative_eq!(sol.u[i], uf[k], max_relative = 1e-9, epsilon = 1e-14);
        }
        assert!(sol.compliance > 0.0);
        assert_relative_eq!(sol.compliance, sol.work, max_relative = 1e-6);
        let esum: f64 = sol.element_energy.iter().sum();
        assert_relative_eq!(esum, sol.work, max_relative = 1e-6);
        // global equilibrium per component
        for c in 0..2 {
            let applied: f64 = (0..g.num_active_nodes()).map(|i| f[2 * i + c]).sum();
            let react: f64 = (0..g.num_active_nodes()).map(|i| sol.reactions[2 * i + c]).sum();
            assert!((applied + react).abs() < 1e-8 * 1.0, "component {c}: {applied} {react}");
        }
    }

    #[test]
    fn nodal_forces_vanish_for_rigid_motion() {
        let g = CartesianGrid::full(2, 2, 1.0, 1.0).unwrap();
        let m = mat(0.3);
        let k = assemble(&g, &vec![0.7; 4], &m).unwrap();
        let theta = 1e-3;
        let mut u = vec![0.0; g.num_dofs()];
        for n in 0..g.num_nodes() {
            let p = g.node_position(n);
            u[g.dof(n, 0).unwrap()] = 0.3 - theta * p.y;
            u[g.dof(n, 1).unwrap()] = -0.1 + theta * p.x;
        }
        for fe in element_nodal_forces(&g, &k, &u) {
            for f in fe {
                assert!(f.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn nodal_forces_of_patch_test() {
        let sigma = 3.0;
        let (g, b) = uniaxial_patch(3, 2, sigma);
        let m = Material::new(100.0, 0.3, 1.0).unwrap();
        let f = load_vector(&g, &b);
        let (k, sol) = analyze(&g, &vec![1.0; 6], &m, &f, &b).unwrap();
        let forces = element_nodal_forces(&g, &k, &sol.u);
        let h = 0.5; // element height
        for e in g.active_elements() {
            // left corners (0 and 3) carry -σh/2, right corners +σh/2
            for (a, sign) in [(0, -1.0), (1, 1.0), (2, 1.0), (3, -1.0)] {
                assert_relative_eq!(forces[e][a].x, sign * sigma * h / 2.0, epsilon = 1e-10);
                assert!(forces[e][a].y.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scattered_nodal_forces_equal_external_loads() {
        let (g, b) = cantilever(4, 3);
        let m = Material::new(1000.0, 0.3, 3.0).unwrap();
        let rho: Vec<f64> = (0..12).map(|e| 0.1 + 0.07 * e as f64).collect();
        let f = load_vector(&g, &b);
        let (k, sol) = analyze(&g, &rho, &m, &f, &b).unwrap();
        let forces = element_nodal_forces(&g, &k, &sol.u);
        let mut sum = vec![0.0; g.num_dofs()];
        for e in g.active_elements() {
            for (a, &n) in g.element_nodes(e).iter().enumerate() {
                sum[g.dof(n, 0).unwrap()] += forces[e][a].x;
                sum[g.dof(n, 1).unwrap()] += forces[e][a].y;
            }
        }
        let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..g.num_dofs() {
            assert!((sum[i] - f[i] - sol.reactions[i]).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn consistent_loads_examples() {
        let (a, b) = consistent_edge_loads(Vec2::new(2.0, 0.0), Vec2::new(2.0, 0.0), 3.0);
        assert_relative_eq!(a.x, 3.0);
        assert_relative_eq!(b.x, 3.0);
        let (a, b) = consistent_edge_loads(Vec2::new(1.0, 0.0), Vec2::zeros(), 1.0);
        assert_relative_eq!(a.x, 1.0 / 3.0);
        assert_relative_eq!(b.x, 1.0 / 6.0);
        let (ts, te) = tractions_from_edge_loads(Vec2::new(1.0 / 3.0, 0.0), Vec2::new(1.0 / 6.0, 0.0), 1.0);
        assert_relative_eq!(ts.x, 1.0, epsilon = 1e-15);
        assert!(te.norm() < 1e-15);
    }

    #[test]
    fn parabolic_shear_total_is_exact() {
        let (g, b) = cantilever(32, 16);
        let f = load_vector(&g, &b);
        let total_y: f64 = (0..g.num_active_nodes()).map(|i| f[2 * i + 1]).sum();
        // ∫_0^1 -(1 - (2y - 1)²) dy = -2/3
        assert_relative_eq!(total_y, -2.0 / 3.0, max_relative = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn edge_load_round_trip(ax in -10.0f64..10.0, ay in -10.0f64..10.0, bx in -10.0f64..10.0,
                                by in -10.0f64..10.0, len in 0.01f64..10.0) {
            let (ps, pe) = consistent_edge_loads(Vec2::new(ax, ay), Vec2::new(bx, by), len);
            let total = ps + pe;
            proptest::prop_assert!((total - (Vec2::new(ax, ay) + Vec2::new(bx, by)) * (len / 2.0)).norm() < 1e-12 * (1.0 + total.norm()));
            let (ts, te) = tractions_from_edge_loads(ps, pe, len);
            proptest::prop_assert!((ts - Vec2::new(ax, ay)).norm() < 1e-12 * (1.0 + ts.norm()));
            proptest::prop_assert!((te - Vec2::new(bx, by)).norm() < 1e-12 * (1.0 + te.norm()));
        }
    }
}
