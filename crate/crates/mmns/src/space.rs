use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::multimesh::MultiMesh;

pub const MAX_DEGREE: usize = 4;

/// Continuous Lagrange element of degree 1..=4, scalar- or vector-valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub degree: usize,
    pub value_size: usize,
}

impl Element {
    pub fn scalar(degree: usize) -> Result<Element> {
        Element::new(degree, 1)
    }

    pub fn vector(degree: usize) -> Result<Element> {
        Element::new(degree, 2)
    }

    fn new(degree: usize, value_size: usize) -> Result<Element> {
        if degree < 1 || degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "unsupported Lagrange degree {degree} (supported: 1..={MAX_DEGREE})"
            )));
        }
        Ok(Element { degree, value_size })
    }

    /// Scalar nodes per cell.
    pub fn n_nodes(&self) -> usize {
        (self.degree + 1) * (self.degree + 2) / 2
    }

    pub fn n_dofs_per_cell(&self) -> usize {
        self.n_nodes() * self.value_size
    }

    fn reference(&self) -> &'static RefElement {
        reference_element(self.degree)
    }

    /// Reference-node coordinates mapped to a physical cell.
    pub fn physical_nodes(&self, tri: &[Point2; 3]) -> Vec<Point2> {
        self.reference()
            .nodes
            .iter()
            .map(|&(xi, eta)| tri[0] + (tri[1] - tri[0]) * xi + (tri[2] - tri[0]) * eta)
            .collect()
    }

    /// Tabulate scalar basis values (and derivatives) at physical points
    /// inside the cell.
    pub fn tabulate(&self, tri: &[Point2; 3], points: &[Point2], with_hessians: bool) -> CellTab {
        let re = self.reference();
        let nn = re.nodes.len();
        let d10 = tri[1] - tri[0];
        let d20 = tri[2] - tri[0];
        let det = d10.cross(d20);
        let inv_det = 1.0 / det;

        let mut tab = CellTab {
            values: vec![vec![0.0; nn]; points.len()],
            grads: vec![vec![Point2::default(); nn]; points.len()],
            hessians: if with_hessians {
                Some(vec![vec![[0.0; 3]; nn]; points.len()])
            } else {
                None
            },
        };

        for (pi, &p) in points.iter().enumerate() {
            let d = p - tri[0];
            let xi = (d20.y * d.x - d20.x * d.y) * inv_det;
            let eta = (-d10.y * d.x + d10.x * d.y) * inv_det;
            for node in 0..nn {
                let coeffs = &re.coeffs[node];
                let mut val = 0.0;
                let mut dxi = 0.0;
                let mut deta = 0.0;
                let (mut dxx, mut dxy, mut dyy) = (0.0, 0.0, 0.0);
                for (m, &(a, b)) in re.monos.iter().enumerate() {
                    let c = coeffs[m];
                    if c == 0.0 {
                        continue;
                    }
                    let xa = pow_i(xi, a);
                    let yb = pow_i(eta, b);
                    val += c * xa * yb;
                    if a >= 1 {
                        dxi += c * a as f64 * pow_i(xi, a - 1) * yb;
                    }
                    if b >= 1 {
                        deta += c * b as f64 * xa * pow_i(eta, b - 1);
                    }
                    if with_hessians {
                        if a >= 2 {
                            dxx += c * (a * (a - 1)) as f64 * pow_i(xi, a - 2) * yb;
                        }
                        if a >= 1 && b >= 1 {
                            dxy += c * (a * b) as f64 * pow_i(xi, a - 1) * pow_i(eta, b - 1);
                        }
                        if b >= 2 {
                            dyy += c * (b * (b - 1)) as f64 * xa * pow_i(eta, b - 2);
                        }
                    }
                }
                tab.values[pi][node] = val;
                let gx = (d20.y * dxi - d10.y * deta) * inv_det;
                let gy = (-d20.x * dxi + d10.x * deta) * inv_det;
                tab.grads[pi][node] = Point2::new(gx, gy);
                if let Some(h) = tab.hessians.as_mut() {
                    let k00 = d20.y * inv_det;
                    let k01 = -d10.y * inv_det;
                    let k10 = -d20.x * inv_det;
                    let k11 = d10.x * inv_det;
                    let hxx = k00 * (dxx * k00 + dxy * k01) + k01 * (dxy * k00 + dyy * k01);
                    let hxy = k00 * (dxx * k10 + dxy * k11) + k01 * (dxy * k10 + dyy * k11);
                    let hyy = k10 * (dxx * k10 + dxy * k11) + k11 * (dxy * k10 + dyy * k11);
                    h[pi][node] = [hxx, hxy, hyy];
                }
            }
        }
        tab
    }
}

fn pow_i(x: f64, n: u32) -> f64 {
    let mut out = 1.0;
    for _ in 0..n {
        out *= x;
    }
    out
}

/// Basis tabulation at a set of points: indexed [point][scalar node].
#[derive(Debug, Clone)]
pub struct CellTab {
    pub values: Vec<Vec<f64>>,
    pub grads: Vec<Vec<Point2>>,
    /// Per node: [d²/dx², d²/dxdy, d²/dy²].
    pub hessians: Option<Vec<Vec<[f64; 3]>>>,
}

struct RefElement {
    nodes: Vec<(f64, f64)>,
    monos: Vec<(u32, u32)>,
    /// coeffs[node][mono]: monomial expansion of the nodal basis function.
    coeffs: Vec<Vec<f64>>,
}

fn reference_element(degree: usize) -> &'static RefElement {
    static CACHE: OnceLock<Vec<RefElement>> = OnceLock::new();
    let all = CACHE.get_or_init(|| (1..=MAX_DEGREE).map(build_reference_element).collect());
    &all[degree - 1]
}

/// Node order: the 3 vertices, then (degree-1) nodes per edge walking
/// v0->v1, v1->v2, v2->v0, then interior nodes lexicographically.
fn reference_nodes(k: usize) -> Vec<(f64, f64)> {
    let kf = k as f64;
    let mut nodes = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
    for i in 1..k {
        nodes.push((i as f64 / kf, 0.0));
    }
    for i in 1..k {
        nodes.push(((k - i) as f64 / kf, i as f64 / kf));
    }
    for i in 1..k {
        nodes.push((0.0, (k - i) as f64 / kf));
    }
    for j in 1..k {
        for i in 1..k {
            if i + j <= k - 1 {
                nodes.push((i as f64 / kf, j as f64 / kf));
            }
        }
    }
    nodes
}

fn build_reference_element(k: usize) -> RefElement {
    let nodes = reference_nodes(k);
    let mut monos = Vec::new();
    for total in 0..=k {
        for a in (0..=total).rev() {
            monos.push((a as u32, (total - a) as u32));
        }
    }
    let n = nodes.len();
    assert_eq!(monos.len(), n);

    let mut a = vec![vec![0.0f64; 2 * n]; n];
    for (row, &(x, y)) in nodes.iter().enumerate() {
        for (col, &(p, q)) in monos.iter().enumerate() {
            a[row][col] = pow_i(x, p) * pow_i(y, q);
        }
        a[row][n + row] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    // a[:, n..] now holds A^-1; basis-function j has monomial coefficients
    // A^-1[:, j], i.e. column j.
    let coeffs = (0..n)
        .map(|node| (0..n).map(|m| a[m][n + node]).collect())
        .collect();
    RefElement {
        nodes,
        monos,
        coeffs,
    }
}

/// Lagrange space over a mesh stack: per-mesh continuous dof numbering
/// (vertices, then edge nodes, then cell-interior nodes) concatenated in
/// stacking order. Vector components interleave: dof = node*vs + comp.
#[derive(Debug)]
pub struct FunctionSpace {
    pub mm: Arc<MultiMesh>,
    pub element: Element,
    pub mesh_offsets: Vec<usize>,
    pub n_dofs: usize,
    /// [mesh][cell][local scalar node] -> mesh-local scalar node.
    pub cell_nodes: Vec<Vec<Vec<usize>>>,
    pub n_scalar_nodes: Vec<usize>,
    /// [mesh][mesh-local scalar node] -> physical position.
    pub node_positions: Vec<Vec<Point2>>,
    /// Per global dof: has at least one active cell in its support.
    pub active: Vec<bool>,
    edge_indices: Vec<HashMap<(usize, usize), usize>>,
}

impl FunctionSpace {
    pub fn build(mm: Arc<MultiMesh>, element: Element) -> FunctionSpace {
        let k = element.degree;
        let vs = element.value_size;
        let per_edge = k - 1;
        let n_interior = element.n_nodes() - 3 - 3 * per_edge;

        let mut mesh_offsets = Vec::with_capacity(mm.num_meshes());
        let mut cell_nodes = Vec::with_capacity(mm.num_meshes());
        let mut n_scalar_nodes = Vec::with_capacity(mm.num_meshes());
        let mut node_positions = Vec::with_capacity(mm.num_meshes());
        let mut edge_indices = Vec::with_capacity(mm.num_meshes());
        let mut offset = 0usize;

        for mesh in &mm.meshes {
            mesh_offsets.push(offset);
            let nv = mesh.num_vertices();
            let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
            for cell in &mesh.cells {
                for e in 0..3 {
                    let key = ordered(cell[e], cell[(e + 1) % 3]);
                    let next = edges.len();
                    edges.entry(key).or_insert(next);
                }
            }
            let n_edges = edges.len();
            let n_nodes = nv + n_edges * per_edge + mesh.num_cells() * n_interior;

            let mut cells_out = Vec::with_capacity(mesh.num_cells());
            let mut positions = vec![Point2::default(); n_nodes];
            for (ci, cell) in mesh.cells.iter().enumerate() {
                let tri = mesh.cell_vertices(ci);
                let phys = element.physical_nodes(&tri);
                let mut locals = Vec::with_capacity(element.n_nodes());
                for &v in cell {
                    locals.push(v);
                }
                for e in 0..3 {
                    let p = cell[e];
                    let q = cell[(e + 1) % 3];
                    let edge_idx = edges[&ordered(p, q)];
                    for i in 1..k {
                        let slot = if p < q { i - 1 } else { per_edge - i };
                        locals.push(nv + edge_idx * per_edge + slot);
                    }
                }
                for t in 0..n_interior {
                    locals.push(nv + n_edges * per_edge + ci * n_interior + t);
                }
                for (local, &node) in locals.iter().enumerate() {
                    positions[node] = phys[local];
                }
                cells_out.push(locals);
            }

            cell_nodes.push(cells_out);
            n_scalar_nodes.push(n_nodes);
            node_positions.push(positions);
            edge_indices.push(edges);
            offset += n_nodes * vs;
        }

        let mut active = vec![false; offset];
        for m in 0..mm.num_meshes() {
            for (ci, locals) in cell_nodes[m].iter().enumerate() {
                if !mm.statuses[m][ci].is_active() {
                    continue;
                }
                for &node in locals {
                    for comp in 0..vs {
                        active[mesh_offsets[m] + node * vs + comp] = true;
                    }
                }
            }
        }

        FunctionSpace {
            mm,
            element,
            mesh_offsets,
            n_dofs: offset,
            cell_nodes,
            n_scalar_nodes,
            node_positions,
            active,
            edge_indices,
        }
    }

    /// Velocity/pressure pair: vector P_k with scalar P_{k-1}.
    pub fn taylor_hood(mm: Arc<MultiMesh>, k: usize) -> Result<(FunctionSpace, FunctionSpace)> {
        if k < 2 {
            return Err(Error::InvalidArgument(
                "velocity degree must be at least 2 for the inf-sup stable pair".into(),
            ));
        }
        let v = FunctionSpace::build(mm.clone(), Element::vector(k)?);
        let q = FunctionSpace::build(mm, Element::scalar(k - 1)?);
        Ok((v, q))
    }

    pub fn n_active_dofs(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn dof(&self, mesh: usize, scalar_node: usize, comp: usize) -> usize {
        self.mesh_offsets[mesh] + scalar_node * self.element.value_size + comp
    }

    /// Global dofs of a cell, component-interleaved per node.
    pub fn cell_dofs(&self, mesh: usize, cell: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.element.n_dofs_per_cell());
        self.cell_dofs_into(mesh, cell, &mut out);
        out
    }

    pub fn cell_dofs_into(&self, mesh: usize, cell: usize, out: &mut Vec<usize>) {
        out.clear();
        let vs = self.element.value_size;
        for &node in &self.cell_nodes[mesh][cell] {
            for comp in 0..vs {
                out.push(self.dof(mesh, node, comp));
            }
        }
    }

    /// All (dof, node position) pairs on facets carrying `marker`, across
    /// every mesh in the stack. Vector spaces list every component.
    pub fn dirichlet_dofs(&self, marker: i32) -> Result<Vec<(usize, Point2)>> {
        let k = self.element.degree;
        let vs = self.element.value_size;
        let per_edge = k - 1;
        let mut found_marker = false;
        let mut nodes: Vec<(usize, usize)> = Vec::new();
        for (m, mesh) in self.mm.meshes.iter().enumerate() {
            let nv = mesh.num_vertices();
            for facet in &mesh.boundary_facets {
                if facet.marker != marker {
                    continue;
                }
                found_marker = true;
                let [p, q] = facet.vertices;
                nodes.push((m, p));
                nodes.push((m, q));
                if per_edge > 0 {
                    let edge_idx = self.edge_indices[m][&ordered(p, q)];
                    for slot in 0..per_edge {
                        nodes.push((m, nv + edge_idx * per_edge + slot));
                    }
                }
            }
        }
        if !found_marker {
            return Err(Error::InvalidArgument(format!(
                "no boundary facet carries marker {marker}"
            )));
        }
        nodes.sort_unstable();
        nodes.dedup();
        let mut out = Vec::with_capacity(nodes.len() * vs);
        for (m, node) in nodes {
            let pos = self.node_positions[m][node];
            for comp in 0..vs {
                out.push((self.dof(m, node, comp), pos));
            }
        }
        Ok(out)
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Coefficient vector over a function space. Inactive dofs stay zero.
#[derive(Debug, Clone)]
pub struct MultiMeshFunction {
    pub space: Arc<FunctionSpace>,
    pub coeffs: Vec<f64>,
}

impl MultiMeshFunction {
    pub fn zeros(space: Arc<FunctionSpace>) -> Self {
        let n = space.n_dofs;
        MultiMeshFunction {
            space,
            coeffs: vec![0.0; n],
        }
    }

    pub fn from_coeffs(space: Arc<FunctionSpace>, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), space.n_dofs);
        MultiMeshFunction { space, coeffs }
    }

    /// Nodal interpolation of an analytic field, mesh by mesh over active
    /// cells; dofs supported only by inactive cells stay zero.
    pub fn interpolate(space: Arc<FunctionSpace>, f: impl Fn(Point2) -> [f64; 2]) -> Self {
        let vs = space.element.value_size;
        let mut coeffs = vec![0.0; space.n_dofs];
        for m in 0..space.mm.num_meshes() {
            for (ci, locals) in space.cell_nodes[m].iter().enumerate() {
                if !space.mm.statuses[m][ci].is_active() {
                    continue;
                }
                for &node in locals {
                    let value = f(space.node_positions[m][node]);
                    for comp in 0..vs {
                        coeffs[space.dof(m, node, comp)] = value[comp];
                    }
                }
            }
        }
        MultiMeshFunction { space, coeffs }
    }

    pub fn interpolate_scalar(space: Arc<FunctionSpace>, f: impl Fn(Point2) -> f64) -> Self {
        Self::interpolate(space, |p| [f(p), 0.0])
    }

    /// Evaluate at a point using the topmost visible mesh. Components beyond
    /// the value size are zero.
    pub fn evaluate(&self, x: Point2) -> Result<[f64; 2]> {
        let (mesh, cell) = self
            .space
            .mm
            .topmost_locate(x)
            .ok_or(Error::OutsideDomain(x.x, x.y))?;
        Ok(self.evaluate_in_cell(mesh, cell, x))
    }

    /// Evaluate knowing the containing cell (no point location).
    pub fn evaluate_in_cell(&self, mesh: usize, cell: usize, x: Point2) -> [f64; 2] {
        let tri = self.space.mm.meshes[mesh].cell_vertices(cell);
        let tab = self.space.element.tabulate(&tri, &[x], false);
        let vs = self.space.element.value_size;
        let mut out = [0.0; 2];
        for (local, &node) in self.space.cell_nodes[mesh][cell].iter().enumerate() {
            for comp in 0..vs {
                out[comp] += self.coeffs[self.space.dof(mesh, node, comp)] * tab.values[0][local];
            }
        }
        out
    }

    /// Zero every inactive dof (normalized form).
    pub fn zero_inactive(&mut self) {
        for (c, &a) in self.coeffs.iter_mut().zip(&self.space.active) {
            if !a {
                *c = 0.0;
            }
        }
    }

    /// Mean of the first component over the visible domain.
    pub fn mean(&self) -> f64 {
        let space = &self.space;
        let k = space.element.degree;
        let mut integral = 0.0;
        let mut area = 0.0;
        for m in 0..space.mm.num_meshes() {
            for ci in 0..space.mm.meshes[m].num_cells() {
                if !space.mm.statuses[m][ci].is_active() {
                    continue;
                }
                let rule = space.mm.cell_rule(m, ci, 2 * k);
                if rule.is_empty() {
                    continue;
                }
                let tri = space.mm.meshes[m].cell_vertices(ci);
                let tab = space.element.tabulate(&tri, &rule.points, false);
                let locals = &space.cell_nodes[m][ci];
                for (qp, &w) in rule.weights.iter().enumerate() {
                    let mut v = 0.0;
                    for (local, &node) in locals.iter().enumerate() {
                        v += self.coeffs[space.dof(m, node, 0)] * tab.values[qp][local];
                    }
                    integral += w * v;
                    area += w;
                }
            }
        }
        integral / area
    }

    /// Shift the first component so its visible-domain mean is zero;
    /// returns the subtracted mean.
    pub fn subtract_mean(&mut self) -> f64 {
        let m = self.mean();
        let vs = self.space.element.value_size;
        for (dof, c) in self.coeffs.iter_mut().enumerate() {
            if self.space.active[dof] && dof % vs == 0 {
                *c -= m;
            }
        }
        m
    }
}
