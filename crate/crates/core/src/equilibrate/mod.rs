//! Traction equilibration: converts element nodal forces of a converged FE
//! solution into linear edge tractions that are equal and opposite across
//! shared edges and self-equilibrated on every element.
//!
//! At each node the surrounding elements are walked counter-clockwise
//! starting with the north-east one (slots `E, A, B, M` = NE, NW, SW, SE).
//! The node's edges are east `i`, north `j`, west `l` and south `k`; the
//! element in slot `q` shares node edge `q` with its predecessor and node edge
//! `q + 1` with its successor. Runs of consecutive active slots form a chain;
//! a full ring of four is a cycle. Void elements stay in the chains with their
//! (small) nodal forces, and the pole rules keep their side forces small.

pub mod maxwell;

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::fem::{self, FESolution, GlobalStiffness, Material};
use crate::grid::{BoundarySpec, CartesianGrid, Vec2};
pub use maxwell::{choose_pole, polygon_centroid, MaxwellError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibrateError {
    #[error("expected {expected} entries, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("node {node} ({kind:?}): {source}")]
    Node { node: usize, kind: NodeKind, source: MaxwellError },
    #[error("node {0} is supported but surrounded by four elements")]
    InteriorSupport(usize),
    #[error("node {0} joins elements that share no edge")]
    Pinched(usize),
    #[error("element {0} has three or more void edge neighbours and should have been voided")]
    ThreeVoidNeighbours(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Internal,
    InternalVoidAdjacent(u8),
    DirichletStandard,
    DirichletOuterCorner,
    DirichletReentrant,
    NeumannStandard,
    NeumannOuterCorner,
    NeumannReentrant,
    Pinched,
}

impl NodeKind {
    pub fn label(&self) -> String {
        match self {
            NodeKind::Internal => "internal".into(),
            NodeKind::InternalVoidAdjacent(k) => format!("internal-void-adjacent-{k}"),
            NodeKind::DirichletStandard => "dirichlet-standard".into(),
            NodeKind::DirichletOuterCorner => "dirichlet-outer-corner".into(),
            NodeKind::DirichletReentrant => "dirichlet-reentrant".into(),
            NodeKind::NeumannStandard => "neumann-standard".into(),
            NodeKind::NeumannOuterCorner => "neumann-outer-corner".into(),
            NodeKind::NeumannReentrant => "neumann-reentrant".into(),
            NodeKind::Pinched => "pinched".into(),
        }
    }
}

/// Consecutive active slots around a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub slots: Vec<usize>,
    pub elements: Vec<usize>,
    pub cycle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeClass {
    pub node: usize,
    pub kind: NodeKind,
    pub chains: Vec<Chain>,
    /// Number of void elements among the surrounding ones.
    pub voids: usize,
}

fn chains_around(around: &[Option<usize>; 4]) -> Vec<Chain> {
    if around.iter().all(|s| s.is_some()) {
        return vec![Chain { slots: vec![0, 1, 2, 3], elements: around.iter().map(|s| s.unwrap()).collect(), cycle: true }];
    }
    let mut out = Vec::new();
    for start in 0..4 {
        if around[start].is_none() || around[(start + 3) % 4].is_some() {
            continue;
        }
        let mut slots = Vec::new();
        let mut q = start;
        while let Some(e) = around[q] {
            slots.push(q);
            let _ = e;
            q = (q + 1) % 4;
        }
        let elements = slots.iter().map(|&q| around[q].unwrap()).collect();
        out.push(Chain { slots, elements, cycle: false });
    }
    out
}

/// Classify every active node (entries of inactive nodes are `None`).
pub fn classify_nodes(
    grid: &CartesianGrid,
    boundary: &BoundarySpec,
    void_mask: &[bool],
) -> Result<Vec<Option<NodeClass>>, EquilibrateError> {
    if void_mask.len() != grid.num_elements() {
        return Err(EquilibrateError::SizeMismatch { expected: grid.num_elements(), got: void_mask.len() });
    }
    let fixed = boundary.fixed_mask(grid);
    let mut out = vec![None; grid.num_nodes()];
    for n in 0..grid.num_nodes() {
        if !grid.node_is_active(n) {
            continue;
        }
        let around = grid.active_elements_around_node(n);
        let chains = chains_around(&around);
        let voids = around.iter().flatten().filter(|&&e| void_mask[e]).count();
        let supported = fixed[n][0] || fixed[n][1];
        let kind = if chains.len() > 1 {
            NodeKind::Pinched
        } else if chains[0].cycle {
            if supported {
                return Err(EquilibrateError::InteriorSupport(n));
            }
            if voids == 0 {
                NodeKind::Internal
            } else {
                NodeKind::InternalVoidAdjacent(voids as u8)
            }
        } else {
            match (supported, chains[0].slots.len()) {
                (true, 1) => NodeKind::DirichletOuterCorner,
                (true, 2) => NodeKind::DirichletStandard,
                (true, _) => NodeKind::DirichletReentrant,
                (false, 1) => NodeKind::NeumannOuterCorner,
                (false, 2) => NodeKind::NeumannStandard,
                (false, _) => NodeKind::NeumannReentrant,
            }
        };
        out[n] = Some(NodeClass { node: n, kind, chains, voids });
    }
    Ok(out)
}

/// Condition on one component of a chain's boundary side force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeCondition {
    /// Prescribed side force (external load, zero when unloaded).
    Known(f64),
    /// Carries an unknown support reaction.
    Reaction,
}

/// Side forces around one node. `enter[k]` acts on the edge element `k`
/// shares with its predecessor, `leave[k]` on the edge shared with its
/// successor.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSplit {
    pub pole: Vec2,
    pub enter: Vec<Vec2>,
    pub leave: Vec<Vec2>,
    pub lambda: Vec2,
}

/// Split the forces of a full ring of four elements (E, A, B, M order).
pub fn split_internal_node(forces: [Vec2; 4], voids: [bool; 4]) -> Result<NodeSplit, MaxwellError> {
    let verts = maxwell::vertices(&forces);
    let pole = choose_pole(&verts[..4], &voids, 4, true)?;
    let (enter, leave, lambda) = maxwell::split_cycle(&forces, pole);
    Ok(NodeSplit { pole, enter, leave, lambda })
}

/// Split the forces of an open chain of elements. The first boundary side
/// force is `enter[0]`, the last one `leave[m-1]`. Per component, a known
/// boundary force fixes the pole; when both are known the closure residual
/// is booked in the last corner; when both carry reactions the pole is the
/// free pole of the polygon closed by the reaction.
pub fn split_open_chain(
    forces: &[Vec2],
    voids: &[bool],
    first: [EdgeCondition; 2],
    last: [EdgeCondition; 2],
) -> Result<NodeSplit, MaxwellError> {
    let m = forces.len();
    let verts = maxwell::vertices(forces);
    let free_pole = if first.iter().zip(&last).any(|(a, b)| *a == EdgeCondition::Reaction && *b == EdgeCondition::Reaction) {
        let mut side_void = voids.to_vec();
        side_void.push(false);
        Some(choose_pole(&verts, &side_void, m, false)?)
    } else {
        None
    };
    let mut pole = Vec2::zeros();
    for c in 0..2 {
        pole[c] = match (first[c], last[c]) {
            (EdgeCondition::Known(t), _) => t,
            (EdgeCondition::Reaction, EdgeCondition::Known(t)) => verts[m][c] - t,
            (EdgeCondition::Reaction, EdgeCondition::Reaction) => free_pole.unwrap()[c],
        };
    }
    let (enter, mut leave) = maxwell::split_chain(forces, pole);
    let mut lambda = Vec2::zeros();
    for c in 0..2 {
        if let (EdgeCondition::Known(_), EdgeCondition::Known(t)) = (first[c], last[c]) {
            lambda[c] = leave[m - 1][c] - t;
            leave[m - 1][c] = t;
        }
    }
    Ok(NodeSplit { pole, enter, leave, lambda })
}

/// Standard or outer-corner support node: both boundary edges carry reactions.
pub fn split_dirichlet_node(forces: &[Vec2], voids: &[bool]) -> Result<NodeSplit, MaxwellError> {
    split_open_chain(forces, voids, [EdgeCondition::Reaction; 2], [EdgeCondition::Reaction; 2])
}

/// Boundary node with known side forces `t_first`, `t_last` on its two
/// boundary edges (standard, outer corner or reentrant).
pub fn split_neumann_node(forces: &[Vec2], t_first: Vec2, t_last: Vec2) -> Result<NodeSplit, MaxwellError> {
    let voids = vec![false; forces.len()];
    split_open_chain(
        forces,
        &voids,
        [EdgeCondition::Known(t_first.x), EdgeCondition::Known(t_first.y)],
        [EdgeCondition::Known(t_last.x), EdgeCondition::Known(t_last.y)],
    )
}

/// Side forces per element, edge and edge end (`0` = start, `1` = end).
#[derive(Debug, Clone, PartialEq)]
pub struct SideForceSet {
    pub p: Vec<[[Vec2; 2]; 4]>,
}

/// Linear tractions per element edge, given at the edge start and end.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTractionField {
    pub t: Vec<[[Vec2; 2]; 4]>,
}

impl EdgeTractionField {
    pub fn edge(&self, e: usize, edge: usize) -> (Vec2, Vec2) {
        (self.t[e][edge][0], self.t[e][edge][1])
    }

    /// Net force and moment (about the element centre) of the four edge
    /// tractions, integrated exactly.
    pub fn element_resultant(&self, grid: &CartesianGrid, e: usize) -> (Vec2, f64) {
        edge_set_resultant(grid.hx(), grid.hy(), &self.t[e])
    }

    /// CSV with columns `element,edge,ts_x,ts_y,te_x,te_y` over active elements.
    pub fn write_csv(&self, grid: &CartesianGrid, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "element,edge,ts_x,ts_y,te_x,te_y")?;
        for e in grid.active_elements() {
            for k in 0..4 {
                let (s, t) = self.edge(e, k);
                writeln!(w, "{e},{k},{},{},{},{}", s.x, s.y, t.x, t.y)?;
            }
        }
        Ok(())
    }
}

/// Net force and moment about the centre of an `hx × hy` rectangle loaded by
/// linear tractions `t[edge][end]` on its four edges.
pub fn edge_set_resultant(hx: f64, hy: f64, t: &[[Vec2; 2]; 4]) -> (Vec2, f64) {
    let corners = [v2(-0.5 * hx, -0.5 * hy), v2(0.5 * hx, -0.5 * hy), v2(0.5 * hx, 0.5 * hy), v2(-0.5 * hx, 0.5 * hy)];
    let cr = |u: Vec2, v: Vec2| u.x * v.y - u.y * v.x;
    let mut force = Vec2::zeros();
    let mut moment = 0.0;
    for k in 0..4 {
        let a = corners[k];
        let d = corners[(k + 1) % 4] - a;
        let len = d.norm();
        let [ts, te] = t[k];
        let dt = te - ts;
        force += (ts + te) * (0.5 * len);
        moment += len * (cr(a, ts) + 0.5 * (cr(a, dt) + cr(d, ts)) + cr(d, dt) / 3.0);
    }
    (force, moment)
}

fn v2(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

/// Per-node outcome of the splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub node: usize,
    pub kind: NodeKind,
    pub lambda: Vec2,
    /// Force exerted by the supports on the surrounding elements
    /// (`Σ F̂ - applied load`), zero at unsupported nodes.
    pub reaction: Vec2,
}

/// Equilibrium certificate. Residuals are normalized by `force_scale` (the
/// largest element nodal force norm) and, for moments, additionally by the
/// largest element edge length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub force_scale: f64,
    pub max_force_residual: f64,
    pub max_moment_residual: f64,
    pub max_lambda: f64,
    pub max_corner_residual: f64,
    pub max_action_reaction: f64,
    pub max_boundary_load_error: f64,
    pub worst_element: usize,
    pub elements: usize,
    pub node_classes: BTreeMap<String, usize>,
}

impl Certificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_force_residual <= tol
            && self.max_moment_residual <= tol
            && self.max_lambda <= tol
            && self.max_action_reaction == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibration {
    pub side_forces: SideForceSet,
    pub tractions: EdgeTractionField,
    pub nodes: Vec<NodeRecord>,
    pub certificate: Certificate,
}

/// Consistent nodal loads of the Neumann data per element edge.
fn edge_loads(grid: &CartesianGrid, boundary: &BoundarySpec) -> Vec<[Option<[Vec2; 2]>; 4]> {
    let mut out = vec![[None; 4]; grid.num_elements()];
    for nm in &boundary.neumann {
        let (ps, pe) = fem::consistent_edge_loads(nm.t_start, nm.t_end, grid.edge_length(nm.edge));
        let slot = out[nm.element][nm.edge].get_or_insert([Vec2::zeros(); 2]);
        slot[0] += ps;
        slot[1] += pe;
    }
    out
}

fn node_in_direction(grid: &CartesianGrid, n: usize, dir: usize) -> usize {
    let (jx, jy) = grid.node_coords(n);
    match dir {
        0 => grid.node_id(jx + 1, jy),
        1 => grid.node_id(jx, jy + 1),
        2 => grid.node_id(jx - 1, jy),
        _ => grid.node_id(jx, jy - 1),
    }
}

/// Elements with three or more void edge neighbours.
pub fn check_void_neighbours(grid: &CartesianGrid, void_mask: &[bool]) -> Result<(), EquilibrateError> {
    for e in grid.active_elements() {
        if void_mask[e] {
            continue;
        }
        let voids = (0..4).filter(|&k| grid.active_neighbor(e, k).is_some_and(|f| void_mask[f])).count();
        if voids >= 3 {
            return Err(EquilibrateError::ThreeVoidNeighbours(e));
        }
    }
    Ok(())
}

/// Recover equilibrated edge tractions from element nodal forces
/// `forces[e][corner]` (see [`fem::element_nodal_forces`]).
pub fn equilibrate_all(
    grid: &CartesianGrid,
    boundary: &BoundarySpec,
    forces: &[[Vec2; 4]],
    void_mask: &[bool],
) -> Result<Equilibration, EquilibrateError> {
    if forces.len() != grid.num_elements() {
        return Err(EquilibrateError::SizeMismatch { expected: grid.num_elements(), got: forces.len() });
    }
    check_void_neighbours(grid, void_mask)?;
    let classes = classify_nodes(grid, boundary, void_mask)?;
    let fixed = boundary.fixed_mask(grid);
    let loads = edge_loads(grid, boundary);
    let mut p = vec![[[Vec2::zeros(); 2]; 4]; grid.num_elements()];
    let mut nodes = Vec::new();
    let mut class_counts: BTreeMap<String, usize> = BTreeMap::new();

    for class in classes.iter().flatten() {
        let n = class.node;
        *class_counts.entry(class.kind.label()).or_default() += 1;
        if class.kind == NodeKind::Pinched {
            return Err(EquilibrateError::Pinched(n));
        }
        let chain = &class.chains[0];
        let f: Vec<Vec2> = chain.elements.iter().zip(&chain.slots).map(|(&e, &q)| forces[e][q]).collect();
        let voids: Vec<bool> = chain.elements.iter().map(|&e| void_mask[e]).collect();
        let wrap = |source| EquilibrateError::Node { node: n, kind: class.kind, source };
        let mut reaction = Vec2::zeros();
        let split = if chain.cycle {
            split_internal_node([f[0], f[1], f[2], f[3]], [voids[0], voids[1], voids[2], voids[3]]).map_err(wrap)?
        } else {
            let m = chain.slots.len();
            let (q1, qm) = (chain.slots[0], chain.slots[m - 1]);
            let (e1, em) = (chain.elements[0], chain.elements[m - 1]);
            let t_first = loads[e1][q1].map(|l| l[0]);
            let t_last = loads[em][(qm + 3) % 4].map(|l| l[1]);
            let other_first = node_in_direction(grid, n, q1);
            let other_last = node_in_direction(grid, n, (qm + 1) % 4);
            let mut first = [EdgeCondition::Known(0.0); 2];
            let mut last = [EdgeCondition::Known(0.0); 2];
            for c in 0..2 {
                let (mut rf, mut rl) = (false, false);
                if fixed[n][c] {
                    rf = fixed[other_first][c];
                    rl = fixed[other_last][c];
                    if !rf && !rl {
                        rf = t_first.is_none();
                        rl = t_last.is_none();
                        if !rf && !rl {
                            rf = true;
                            rl = true;
                        }
                    }
                }
                first[c] = if rf { EdgeCondition::Reaction } else { EdgeCondition::Known(t_first.map_or(0.0, |t| t[c])) };
                last[c] = if rl { EdgeCondition::Reaction } else { EdgeCondition::Known(t_last.map_or(0.0, |t| t[c])) };
            }
            if fixed[n][0] || fixed[n][1] {
                let applied = t_first.unwrap_or_default() + t_last.unwrap_or_default();
                reaction = f.iter().sum::<Vec2>() - applied;
            }
            split_open_chain(&f, &voids, first, last).map_err(wrap)?
        };
        for (k, (&e, &q)) in chain.elements.iter().zip(&chain.slots).enumerate() {
            p[e][q][0] = split.enter[k];
            p[e][(q + 3) % 4][1] = split.leave[k];
        }
        nodes.push(NodeRecord { node: n, kind: class.kind, lambda: split.lambda, reaction });
    }

    let mut t = vec![[[Vec2::zeros(); 2]; 4]; grid.num_elements()];
    for e in grid.active_elements() {
        for k in 0..4 {
            let (ts, te) = fem::tractions_from_edge_loads(p[e][k][0], p[e][k][1], grid.edge_length(k));
            t[e][k] = [ts, te];
        }
    }
    let side_forces = SideForceSet { p };
    let tractions = EdgeTractionField { t };
    let certificate = certify(grid, boundary, forces, &side_forces, &tractions, &nodes, class_counts);
    Ok(Equilibration { side_forces, tractions, nodes, certificate })
}

fn certify(
    grid: &CartesianGrid,
    boundary: &BoundarySpec,
    forces: &[[Vec2; 4]],
    side: &SideForceSet,
    tractions: &EdgeTractionField,
    nodes: &[NodeRecord],
    node_classes: BTreeMap<String, usize>,
) -> Certificate {
    let raw_scale = grid.active_elements().flat_map(|e| forces[e].iter().map(|f| f.norm())).fold(0.0, f64::max);
    let scale = if raw_scale > 0.0 { raw_scale } else { 1.0 };
    let h = grid.hx().max(grid.hy());
    let mut max_force: f64 = 0.0;
    let mut max_moment: f64 = 0.0;
    let mut max_corner: f64 = 0.0;
    let mut max_ar: f64 = 0.0;
    let mut worst = 0;
    let mut worst_value = -1.0;
    let loads = edge_loads(grid, boundary);
    for e in grid.active_elements() {
        let (force, moment) = tractions.element_resultant(grid, e);
        let fr = force.norm() / scale;
        let mr = moment.abs() / (scale * h);
        max_force = max_force.max(fr);
        max_moment = max_moment.max(mr);
        if fr.max(mr) > worst_value {
            worst_value = fr.max(mr);
            worst = e;
        }
        for a in 0..4 {
            let corner = side.p[e][a][0] + side.p[e][(a + 3) % 4][1];
            max_corner = max_corner.max((corner - forces[e][a]).norm() / scale);
        }
        for k in 0..4 {
            if let Some(f) = grid.active_neighbor(e, k) {
                let o = CartesianGrid::opposite_edge(k);
                let (ts, te) = tractions.edge(e, k);
                let (us, ue) = tractions.edge(f, o);
                max_ar = max_ar.max((ts + ue).norm()).max((te + us).norm());
            }
        }
    }
    let fixed = boundary.fixed_mask(grid);
    let mut max_bl: f64 = 0.0;
    for e in grid.active_elements() {
        for k in 0..4 {
            if let Some(l) = loads[e][k] {
                let (a, b) = grid.edge_nodes(e, k);
                let (ts, te) = tractions.edge(e, k);
                let (ps, pe) = fem::consistent_edge_loads(ts, te, grid.edge_length(k));
                for (node, got, want) in [(a, ps, l[0]), (b, pe, l[1])] {
                    if !fixed[node][0] && !fixed[node][1] {
                        max_bl = max_bl.max((got - want).norm() / scale);
                    }
                }
            }
        }
    }
    let max_lambda = nodes.iter().map(|r| r.lambda.norm() / scale).fold(0.0, f64::max);
    Certificate {
        force_scale: raw_scale,
        max_force_residual: max_force,
        max_moment_residual: max_moment,
        max_lambda,
        max_corner_residual: max_corner,
        max_action_reaction: max_ar,
        max_boundary_load_error: max_bl,
        worst_element: worst,
        elements: grid.num_active_elements(),
        node_classes,
    }
}

/// Equilibrate a solved FE problem.
pub fn equilibrate_solution(
    grid: &CartesianGrid,
    boundary: &BoundarySpec,
    stiffness: &GlobalStiffness,
    solution: &FESolution,
    void_mask: &[bool],
) -> Result<Equilibration, EquilibrateError> {
    let forces = fem::element_nodal_forces(grid, stiffness, &solution.u);
    equilibrate_all(grid, boundary, &forces, void_mask)
}

/// Control field: each element's own FE stress `σ n` evaluated at the edge
/// end points. Not continuous across edges and not equilibrated in general.
pub fn raw_stress_tractions(grid: &CartesianGrid, material: &Material, densities: &[f64], u: &[f64]) -> EdgeTractionField {
    let mut t = vec![[[Vec2::zeros(); 2]; 4]; grid.num_elements()];
    for e in grid.active_elements() {
        let ue = fem::element_displacements(grid, e, u);
        for k in 0..4 {
            let n = CartesianGrid::edge_normal(k);
            for (end, corner) in [k, (k + 1) % 4].into_iter().enumerate() {
                let (xi, eta) = fem::REFERENCE_CORNERS[corner];
                let s = fem::element_stress(material, densities[e], grid.hx(), grid.hy(), &ue, xi, eta);
                t[e][k][end] = Vec2::new(s[0] * n.x + s[2] * n.y, s[2] * n.x + s[1] * n.y);
            }
        }
    }
    EdgeTractionField { t }
}
