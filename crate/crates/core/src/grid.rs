//! Structured Cartesian grids of rectangular bilinear elements.
//!
//! Numbering is column-major from the origin corner (bottom-left, y up):
//!
//! * element `(ix, iy)` has id `ix * ny + iy`,
//! * node `(jx, jy)` has id `jx * (ny + 1) + jy`.
//!
//! The four corners of an element are numbered counter-clockwise starting at
//! the bottom-left corner (`0 = BL, 1 = BR, 2 = TR, 3 = TL`). Local edge `k`
//! runs from corner `k` to corner `(k + 1) % 4`, so edge 0 is the bottom edge,
//! 1 the right edge, 2 the top edge and 3 the left edge. The "start" and "end"
//! of an edge always refer to this counter-clockwise orientation.
//!
//! Around a node the (up to) four incident elements are listed counter-clockwise
//! starting with the element to the north-east of the node. The element in slot
//! `q` touches the node with its local corner `q`.

use nalgebra::Vector2;
use thiserror::Error;

/// Planar 2-vector used for positions, forces and tractions.
pub type Vec2 = Vector2<f64>;

/// Outward unit normals of the four local edges.
pub const EDGE_NORMALS: [[f64; 2]; 4] = [[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive (nx={nx}, ny={ny}, hx={hx}, hy={hy})")]
    BadDimensions { nx: usize, ny: usize, hx: f64, hy: f64 },
    #[error("active mask has {got} entries, expected {expected}")]
    MaskSize { got: usize, expected: usize },
    #[error("active region is empty")]
    Empty,
    #[error("active region is not edge-connected ({components} components)")]
    Disconnected { components: usize },
    #[error("node {0} does not exist or touches no active element")]
    BadNode(usize),
    #[error("element {element} edge {edge} is not on the boundary of the active region")]
    NotBoundaryEdge { element: usize, edge: usize },
    #[error("node {node} component {component} is both supported and loaded")]
    SupportLoadOverlap { node: usize, component: usize },
    #[error("supports do not remove the three rigid-body modes")]
    InsufficientSupports,
    #[error("non-finite value in boundary data")]
    NonFinite,
}

/// Side of the bounding rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    /// The local edge index of elements lying along this side.
    pub fn local_edge(self) -> usize {
        match self {
            Side::Bottom => 0,
            Side::Right => 1,
            Side::Top => 2,
            Side::Left => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartesianGrid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    origin: Vec2,
    active: Vec<bool>,
    /// Compact index of each node among active nodes.
    node_index: Vec<Option<usize>>,
    active_nodes: usize,
}

/// An edge of the active region's boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub element: usize,
    pub edge: usize,
    pub normal: Vec2,
}

impl CartesianGrid {
    /// Build a grid; `active` holds one flag per element in element-id order.
    pub fn new(nx: usize, ny: usize, hx: f64, hy: f64, active: Vec<bool>) -> Result<Self, GridError> {
        if nx == 0 || ny == 0 || !(hx > 0.0) || !(hy > 0.0) || !hx.is_finite() || !hy.is_finite() {
            return Err(GridError::BadDimensions { nx, ny, hx, hy });
        }
        if active.len() != nx * ny {
            return Err(GridError::MaskSize { got: active.len(), expected: nx * ny });
        }
        let mut grid = CartesianGrid {
            nx,
            ny,
            hx,
            hy,
            origin: Vec2::zeros(),
            active,
            node_index: Vec::new(),
            active_nodes: 0,
        };
        let components = grid.count_components();
        if components == 0 {
            return Err(GridError::Empty);
        }
        if components > 1 {
            return Err(GridError::Disconnected { components });
        }
        grid.index_nodes();
        Ok(grid)
    }

    /// A fully active `nx x ny` grid.
    pub fn full(nx: usize, ny: usize, hx: f64, hy: f64) -> Result<Self, GridError> {
        Self::new(nx, ny, hx, hy, vec![true; nx * ny])
    }

    pub fn with_origin(mut self, origin: Vec2) -> Self {
        self.origin = origin;
        self
    }

    fn index_nodes(&mut self) {
        let mut node_index = vec![None; self.num_nodes()];
        let mut touched = vec![false; self.num_nodes()];
        for e in 0..self.num_elements() {
            if self.active[e] {
                for n in self.element_nodes(e) {
                    touched[n] = true;
                }
            }
        }
        let mut next = 0;
        for (n, t) in touched.into_iter().enumerate() {
            if t {
                node_index[n] = Some(next);
                next += 1;
            }
        }
        self.node_index = node_index;
        self.active_nodes = next;
    }

    fn count_components(&self) -> usize {
        let mut label = vec![usize::MAX; self.num_elements()];
        let mut components = 0;
        let mut stack = Vec::new();
        for seed in 0..self.num_elements() {
            if !self.active[seed] || label[seed] != usize::MAX {
                continue;
            }
            label[seed] = components;
            stack.push(seed);
            while let Some(e) = stack.pop() {
                for edge in 0..4 {
                    if let Some(nb) = self.active_neighbor(e, edge) {
                        if label[nb] == usize::MAX {
                            label[nb] = components;
                            stack.push(nb);
                        }
                    }
                }
            }
            components += 1;
        }
        components
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn hx(&self) -> f64 {
        self.hx
    }
    pub fn hy(&self) -> f64 {
        self.hy
    }
    pub fn origin(&self) -> Vec2 {
        self.origin
    }
    pub fn num_elements(&self) -> usize {
        self.nx * self.ny
    }
    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }
    pub fn num_active_nodes(&self) -> usize {
        self.active_nodes
    }
    /// Number of displacement unknowns (two per active node).
    pub fn num_dofs(&self) -> usize {
        2 * self.active_nodes
    }
    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }
    pub fn is_active(&self, e: usize) -> bool {
        self.active[e]
    }
    pub fn active_elements(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_elements()).filter(move |&e| self.active[e])
    }
    pub fn num_active_elements(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
    pub fn element_area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn element_id(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny);
        ix * self.ny + iy
    }
    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e / self.ny, e % self.ny)
    }
    pub fn node_id(&self, jx: usize, jy: usize) -> usize {
        debug_assert!(jx <= self.nx && jy <= self.ny);
        jx * (self.ny + 1) + jy
    }
    pub fn node_coords(&self, n: usize) -> (usize, usize) {
        (n / (self.ny + 1), n % (self.ny + 1))
    }
    pub fn node_is_active(&self, n: usize) -> bool {
        self.node_index[n].is_some()
    }
    pub fn node_index(&self, n: usize) -> Option<usize> {
        self.node_index[n]
    }

    /// Global dof of component `c` (0 = x, 1 = y) at node `n`.
    pub fn dof(&self, n: usize, c: usize) -> Option<usize> {
        self.node_index[n].map(|i| 2 * i + c)
    }

    pub fn node_position(&self, n: usize) -> Vec2 {
        let (jx, jy) = self.node_coords(n);
        self.origin + Vec2::new(jx as f64 * self.hx, jy as f64 * self.hy)
    }

    pub fn element_center(&self, e: usize) -> Vec2 {
        let (ix, iy) = self.element_coords(e);
        self.origin + Vec2::new((ix as f64 + 0.5) * self.hx, (iy as f64 + 0.5) * self.hy)
    }

    /// Corner nodes counter-clockwise from the bottom-left corner.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (ix, iy) = self.element_coords(e);
        [
            self.node_id(ix, iy),
            self.node_id(ix + 1, iy),
            self.node_id(ix + 1, iy + 1),
            self.node_id(ix, iy + 1),
        ]
    }

    /// The eight global dofs of an active element, in corner order.
    pub fn element_dofs(&self, e: usize) -> [usize; 8] {
        let nodes = self.element_nodes(e);
        let mut dofs = [0; 8];
        for (a, &n) in nodes.iter().enumerate() {
            let i = self.node_index[n].expect("element node must be active");
            dofs[2 * a] = 2 * i;
            dofs[2 * a + 1] = 2 * i + 1;
        }
        dofs
    }

    /// (start, end) nodes of a local edge in counter-clockwise orientation.
    pub fn edge_nodes(&self, e: usize, edge: usize) -> (usize, usize) {
        let nodes = self.element_nodes(e);
        (nodes[edge], nodes[(edge + 1) % 4])
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        if edge % 2 == 0 {
            self.hx
        } else {
            self.hy
        }
    }

    pub fn edge_normal(edge: usize) -> Vec2 {
        Vec2::new(EDGE_NORMALS[edge][0], EDGE_NORMALS[edge][1])
    }

    /// Element across local edge `edge`, if it lies inside the bounding box.
    pub fn neighbor(&self, e: usize, edge: usize) -> Option<usize> {
        let (ix, iy) = self.element_coords(e);
        match edge {
            0 if iy > 0 => Some(self.element_id(ix, iy - 1)),
            1 if ix + 1 < self.nx => Some(self.element_id(ix + 1, iy)),
            2 if iy + 1 < self.ny => Some(self.element_id(ix, iy + 1)),
            3 if ix > 0 => Some(self.element_id(ix - 1, iy)),
            _ => None,
        }
    }

    pub fn active_neighbor(&self, e: usize, edge: usize) -> Option<usize> {
        self.neighbor(e, edge).filter(|&nb| self.active[nb])
    }

    /// Local edge of the neighbour that coincides with `edge`.
    pub fn opposite_edge(edge: usize) -> usize {
        (edge + 2) % 4
    }

    /// Elements around node `n` in counter-clockwise order (NE, NW, SW, SE).
    /// Slot `q` holds the element whose local corner `q` is the node.
    pub fn elements_around_node(&self, n: usize) -> [Option<usize>; 4] {
        let (jx, jy) = self.node_coords(n);
        let at = |dx: isize, dy: isize| -> Option<usize> {
            let ix = jx as isize + dx;
            let iy = jy as isize + dy;
            if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
                None
            } else {
                Some(self.element_id(ix as usize, iy as usize))
            }
        };
        [at(0, 0), at(-1, 0), at(-1, -1), at(0, -1)]
    }

    pub fn active_elements_around_node(&self, n: usize) -> [Option<usize>; 4] {
        self.elements_around_node(n).map(|s| s.filter(|&e| self.active[e]))
    }

    pub fn is_boundary_edge(&self, e: usize, edge: usize) -> bool {
        self.active[e] && self.active_neighbor(e, edge).is_none()
    }

    /// Every edge of an active element not shared with another active element.
    pub fn boundary_edges(&self) -> Vec<BoundaryEdge> {
        let mut out = Vec::new();
        for e in self.active_elements() {
            for edge in 0..4 {
                if self.active_neighbor(e, edge).is_none() {
                    out.push(BoundaryEdge { element: e, edge, normal: Self::edge_normal(edge) });
                }
            }
        }
        out
    }

    /// Boundary edges lying on one side of the bounding rectangle.
    pub fn side_edges(&self, side: Side) -> Vec<usize> {
        let edge = side.local_edge();
        let mut out: Vec<usize> = match side {
            Side::Bottom => (0..self.nx).map(|ix| self.element_id(ix, 0)).collect(),
            Side::Top => (0..self.nx).map(|ix| self.element_id(ix, self.ny - 1)).collect(),
            Side::Left => (0..self.ny).map(|iy| self.element_id(0, iy)).collect(),
            Side::Right => (0..self.ny).map(|iy| self.element_id(self.nx - 1, iy)).collect(),
        };
        out.retain(|&e| self.is_boundary_edge(e, edge));
        out
    }
}

/// Prescribed displacement at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletEntry {
    pub node: usize,
    pub fixed: [bool; 2],
    pub value: [f64; 2],
}

/// Linear traction on a boundary edge, given at the edge's start and end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeumannEntry {
    pub element: usize,
    pub edge: usize,
    pub t_start: Vec2,
    pub t_end: Vec2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundarySpec {
    pub dirichlet: Vec<DirichletEntry>,
    pub neumann: Vec<NeumannEntry>,
}

impl BoundarySpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fix `fixed` components to zero at every node of `side` whose coordinate
    /// along the side lies in `[from, to]` (physical units).
    pub fn support_side(&mut self, grid: &CartesianGrid, side: Side, from: f64, to: f64, fixed: [bool; 2]) {
        let tol = 1e-9 * grid.hx().max(grid.hy());
        let mut nodes: Vec<usize> = Vec::new();
        for e in grid.side_edges(side) {
            let (a, b) = grid.edge_nodes(e, side.local_edge());
            nodes.push(a);
            nodes.push(b);
        }
        nodes.sort_unstable();
        nodes.dedup();
        for n in nodes {
            let p = grid.node_position(n);
            let s = side_coordinate(side, p);
            if s >= from - tol && s <= to + tol {
                self.fix_node(n, fixed, [0.0; 2]);
            }
        }
    }

    pub fn fix_node(&mut self, node: usize, fixed: [bool; 2], value: [f64; 2]) {
        if let Some(d) = self.dirichlet.iter_mut().find(|d| d.node == node) {
            for c in 0..2 {
                if fixed[c] {
                    d.fixed[c] = true;
                    d.value[c] = value[c];
                }
            }
        } else {
            self.dirichlet.push(DirichletEntry { node, fixed, value });
        }
    }

    /// Load the boundary edges of `side` inside `[from, to]` with a traction
    /// profile `t(s)` of the side coordinate. Each edge receives the linear
    /// traction whose consistent nodal loads equal those of the profile, so the
    /// resultant of any polynomial profile up to degree 4 is reproduced exactly.
    pub fn load_side(
        &mut self,
        grid: &CartesianGrid,
        side: Side,
        from: f64,
        to: f64,
        profile: impl Fn(f64) -> Vec2,
    ) {
        let edge = side.local_edge();
        let tol = 1e-9 * grid.hx().max(grid.hy());
        for e in grid.side_edges(side) {
            let (a, b) = grid.edge_nodes(e, edge);
            let sa = side_coordinate(side, grid.node_position(a));
            let sb = side_coordinate(side, grid.node_position(b));
            let (lo, hi) = if sa < sb { (sa, sb) } else { (sb, sa) };
            if lo < from - tol || hi > to + tol {
                continue;
            }
            let len = grid.edge_length(edge);
            // 3-point Gauss-Legendre on [0, 1] along start -> end.
            let gauss = [
                (0.5 - 0.5 * (0.6f64).sqrt(), 5.0 / 18.0),
                (0.5, 8.0 / 18.0),
                (0.5 + 0.5 * (0.6f64).sqrt(), 5.0 / 18.0),
            ];
            let mut p_start = Vec2::zeros();
            let mut p_end = Vec2::zeros();
            for (xi, w) in gauss {
                let t = profile(sa + xi * (sb - sa));
                p_start += t * ((1.0 - xi) * w * len);
                p_end += t * (xi * w * len);
            }
            let (t_start, t_end) = crate::fem::tractions_from_edge_loads(p_start, p_end, len);
            self.neumann.push(NeumannEntry { element: e, edge, t_start, t_end });
        }
    }

    pub fn is_fixed(&self, node: usize, c: usize) -> bool {
        self.dirichlet.iter().any(|d| d.node == node && d.fixed[c])
    }

    /// Per-node constraint flags, indexed by node id.
    pub fn fixed_mask(&self, grid: &CartesianGrid) -> Vec<[bool; 2]> {
        let mut mask = vec![[false; 2]; grid.num_nodes()];
        for d in &self.dirichlet {
            for c in 0..2 {
                mask[d.node][c] |= d.fixed[c];
            }
        }
        mask
    }

    pub fn validate(&self, grid: &CartesianGrid) -> Result<(), GridError> {
        let fixed = self.fixed_mask(grid);
        for d in &self.dirichlet {
            if d.node >= grid.num_nodes() || !grid.node_is_active(d.node) {
                return Err(GridError::BadNode(d.node));
            }
            if d.value.iter().any(|v| !v.is_finite()) {
                return Err(GridError::NonFinite);
            }
        }
        for nm in &self.neumann {
            if nm.element >= grid.num_elements() || nm.edge > 3 || !grid.is_boundary_edge(nm.element, nm.edge) {
                return Err(GridError::NotBoundaryEdge { element: nm.element, edge: nm.edge });
            }
            if !(nm.t_start.iter().chain(nm.t_end.iter()).all(|v| v.is_finite())) {
                return Err(GridError::NonFinite);
            }
            let (a, b) = grid.edge_nodes(nm.element, nm.edge);
            for c in 0..2 {
                let loaded = nm.t_start[c] != 0.0 || nm.t_end[c] != 0.0;
                for n in [a, b] {
                    if loaded && fixed[n][c] {
                        return Err(GridError::SupportLoadOverlap { node: n, component: c });
                    }
                }
            }
        }
        if !self.removes_rigid_modes(grid) {
            return Err(GridError::InsufficientSupports);
        }
        Ok(())
    }

    /// Rank test of the constraint rows against the planar rigid-body modes
    /// `u = (a - θ y, b + θ x)`.
    pub fn removes_rigid_modes(&self, grid: &CartesianGrid) -> bool {
        let mut rows: Vec<[f64; 3]> = Vec::new();
        let scale = grid.hx() * grid.nx() as f64 + grid.hy() * grid.ny() as f64;
        for d in &self.dirichlet {
            let p = (grid.node_position(d.node) - grid.origin()) / scale;
            if d.fixed[0] {
                rows.push([1.0, 0.0, -p.y]);
            }
            if d.fixed[1] {
                rows.push([0.0, 1.0, p.x]);
            }
        }
        if rows.len() < 3 {
            return false;
        }
        let m = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let gram = m.transpose() * &m;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let max = eig.eigenvalues.max();
        eig.eigenvalues.min() > 1e-10 * max.max(1.0)
    }
}

fn side_coordinate(side: Side, p: Vec2) -> f64 {
    match side {
        Side::Bottom | Side::Top => p.x,
        Side::Left | Side::Right => p.y,
    }
}
