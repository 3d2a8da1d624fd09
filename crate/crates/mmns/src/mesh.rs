use std::fmt;
use std::fs;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::path::Path;

use crate::error::{Error, Result};

pub const INLET: i32 = 1;
pub const WALL: i32 = 2;
pub const OUTLET: i32 = 3;
pub const OBSTACLE: i32 = 4;
pub const OUTER: i32 = 5;

/// A point (or vector) in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the cross product of two plane vectors.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    /// Rotate counter-clockwise by `angle` radians about the origin.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, o: Point2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Point2 {
    fn sub_assign(&mut self, o: Point2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, p: Point2) -> Point2 {
        p * self
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Boundary facet: a directed vertex pair plus an integer marker.
///
/// Facets are oriented so the mesh domain lies to the left; the outward
/// normal is then the tangent rotated clockwise by 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFacet {
    pub vertices: [usize; 2],
    pub marker: i32,
}

/// Per-side boundary markers for rectangle generation.
#[derive(Debug, Clone, Copy)]
pub struct SideMarkers {
    pub left: i32,
    pub right: i32,
    pub bottom: i32,
    pub top: i32,
}

impl SideMarkers {
    pub fn all(marker: i32) -> Self {
        SideMarkers {
            left: marker,
            right: marker,
            bottom: marker,
            top: marker,
        }
    }

    /// Channel-flow convention: inflow left, outflow right, walls top/bottom.
    pub fn channel() -> Self {
        SideMarkers {
            left: INLET,
            right: OUTLET,
            bottom: WALL,
            top: WALL,
        }
    }
}

impl Default for SideMarkers {
    fn default() -> Self {
        SideMarkers::all(WALL)
    }
}

/// Conforming triangle mesh with oriented cells and marked boundary facets.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point2>,
    pub cells: Vec<[usize; 3]>,
    pub boundary_facets: Vec<BoundaryFacet>,
    /// Maximum cell diameter.
    pub h: f64,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Point2>,
        cells: Vec<[usize; 3]>,
        boundary_facets: Vec<BoundaryFacet>,
    ) -> Result<Self> {
        let mut mesh = TriMesh {
            vertices,
            cells,
            boundary_facets,
            h: 0.0,
        };
        mesh.validate()?;
        mesh.h = mesh
            .cells
            .iter()
            .enumerate()
            .map(|(k, _)| mesh.cell_diameter(k))
            .fold(0.0, f64::max);
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "vertex {i} has non-finite coordinates"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (k, cell) in self.cells.iter().enumerate() {
            for &v in cell {
                if v >= nv {
                    return Err(Error::InvalidArgument(format!(
                        "cell {k} references vertex {v}, but the mesh has {nv} vertices"
                    )));
                }
            }
            let [a, b, c] = self.cell_vertices(k);
            if (b - a).cross(c - a) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cell {k} is degenerate or clockwise (signed area {})",
                    0.5 * (b - a).cross(c - a)
                )));
            }
            let mut key = *cell;
            key.sort_unstable();
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!("duplicate cell {key:?}")));
            }
        }
        let mut edge_count: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        for cell in &self.cells {
            for e in 0..3 {
                let a = cell[e];
                let b = cell[(e + 1) % 3];
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for (i, facet) in self.boundary_facets.iter().enumerate() {
            let [a, b] = facet.vertices;
            if a >= nv || b >= nv {
                return Err(Error::InvalidArgument(format!(
                    "boundary facet {i} references vertex out of range"
                )));
            }
            match edge_count.get(&(a.min(b), a.max(b))) {
                Some(1) => {}
                Some(n) => {
                    return Err(Error::InvalidArgument(format!(
                        "boundary facet {i} ({a}, {b}) is shared by {n} cells"
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "boundary facet {i} ({a}, {b}) is not an edge of any cell"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_vertices(&self, cell: usize) -> [Point2; 3] {
        let [a, b, c] = self.cells[cell];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn cell_area(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cell_vertices(cell);
        0.5 * (b - a).cross(c - a)
    }

    pub fn cell_diameter(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cell_vertices(cell);
        (b - a).norm().max((c - b).norm()).max((a - c).norm())
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_cells()).map(|k| self.cell_area(k)).sum()
    }

    /// Area-weighted centroid of the meshed region.
    pub fn centroid(&self) -> Point2 {
        let mut area = 0.0;
        let mut c = Point2::default();
        for k in 0..self.num_cells() {
            let [a, b, d] = self.cell_vertices(k);
            let ak = self.cell_area(k);
            c += (a + b + d) * (ak / 3.0);
            area += ak;
        }
        c * (1.0 / area)
    }

    pub fn bounding_box(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Unit outward normal of a boundary facet (domain lies left of the facet).
    pub fn facet_normal(&self, facet: &BoundaryFacet) -> Point2 {
        let [a, b] = facet.vertices;
        let t = self.vertices[b] - self.vertices[a];
        let len = t.norm();
        Point2::new(t.y / len, -t.x / len)
    }

    /// Rigid-body copy: rotate by `rotation` radians about the area centroid,
    /// then translate. The identity transform returns a bitwise-equal mesh.
    pub fn transformed(&self, translation: Point2, rotation: f64) -> TriMesh {
        if translation == Point2::default() && rotation == 0.0 {
            return self.clone();
        }
        let c = self.centroid();
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = c + (*v - c).rotated(rotation) + translation;
        }
        out
    }
}

/// Structured triangulation of the rectangle [x0,x1] x [y0,y1] with nx-by-ny
/// quads split along alternating diagonals.
pub fn generate_rect_mesh(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    nx: usize,
    ny: usize,
    markers: SideMarkers,
) -> Result<TriMesh> {
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::InvalidArgument(format!(
            "rectangle extents must be positive, got [{x0}, {x1}] x [{y0}, {y1}]"
        )));
    }
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be at least 1, got nx={nx}, ny={ny}"
        )));
    }
    let dx = (x1 - x0) / nx as f64;
    let dy = (y1 - y0) / ny as f64;
    let idx = |i: usize, j: usize| j * (nx + 1) + i;

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { x1 } else { x0 + i as f64 * dx };
            let y = if j == ny { y1 } else { y0 + j as f64 * dy };
            vertices.push(Point2::new(x, y));
        }
    }

    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            if (i + j) % 2 == 0 {
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            } else {
                cells.push([v00, v10, v01]);
                cells.push([v10, v11, v01]);
            }
        }
    }

    let mut boundary_facets = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(i, 0), idx(i + 1, 0)],
            marker: markers.bottom,
        });
    }
    for j in 0..ny {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(nx, j), idx(nx, j + 1)],
            marker: markers.right,
        });
    }
    for i in (0..nx).rev() {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(i + 1, ny), idx(i, ny)],
            marker: markers.top,
        });
    }
    for j in (0..ny).rev() {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(0, j + 1), idx(0, j)],
            marker: markers.left,
        });
    }

    TriMesh::new(vertices, cells, boundary_facets)
}

/// Polar-grid triangulation of an annulus centred at `center`, optionally
/// squeezed in y by `scale_y` (an ellipse-shaped ring for scale_y != 1).
/// Inner-boundary facets are marked OBSTACLE, outer-boundary facets OUTER.
pub fn generate_annulus_mesh(
    center: Point2,
    r_inner: f64,
    r_outer: f64,
    n_r: usize,
    n_theta: usize,
    scale_y: f64,
) -> Result<TriMesh> {
    if n_r == 0 {
        return Err(Error::InvalidArgument("n_r must be at least 1".into()));
    }
    let radii: Vec<f64> = (0..=n_r)
        .map(|l| r_inner + (r_outer - r_inner) * l as f64 / n_r as f64)
        .collect();
    generate_annulus_mesh_graded(center, &radii, n_theta, scale_y)
}

/// Annulus with an explicit ladder of ring radii, allowing the radial
/// spacing to be graded toward the inner boundary.
pub fn generate_annulus_mesh_graded(
    center: Point2,
    radii: &[f64],
    n_theta: usize,
    scale_y: f64,
) -> Result<TriMesh> {
    if radii.len() < 2 {
        return Err(Error::InvalidArgument(
            "annulus needs at least two ring radii".into(),
        ));
    }
    if !(radii[0] > 0.0) || radii.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!(
            "annulus radii must be positive and strictly increasing, got {radii:?}"
        )));
    }
    if n_theta < 3 {
        return Err(Error::InvalidArgument(format!(
            "n_theta must be at least 3, got {n_theta}"
        )));
    }
    if !(scale_y > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale_y must be positive, got {scale_y}"
        )));
    }

    let n_r = radii.len() - 1;
    let idx = |l: usize, k: usize| l * n_theta + (k % n_theta);
    let mut vertices = Vec::with_capacity((n_r + 1) * n_theta);
    for &r in radii {
        for k in 0..n_theta {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n_theta as f64;
            let (s, c) = theta.sin_cos();
            vertices.push(center + Point2::new(r * c, scale_y * r * s));
        }
    }

    let mut cells = Vec::with_capacity(2 * n_r * n_theta);
    for l in 0..n_r {
        for k in 0..n_theta {
            let v00 = idx(l, k);
            let v10 = idx(l + 1, k);
            let v01 = idx(l, k + 1);
            let v11 = idx(l + 1, k + 1);
            if (l + k) % 2 == 0 {
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            } else {
                cells.push([v00, v10, v01]);
                cells.push([v10, v11, v01]);
            }
        }
    }

    let mut boundary_facets = Vec::with_capacity(2 * n_theta);
    for k in 0..n_theta {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(0, k + 1), idx(0, k)],
            marker: OBSTACLE,
        });
    }
    for k in 0..n_theta {
        boundary_facets.push(BoundaryFacet {
            vertices: [idx(n_r, k), idx(n_r, k + 1)],
            marker: OUTER,
        });
    }

    TriMesh::new(vertices, cells, boundary_facets)
}

pub fn write_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("trimesh 2\n");
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {}\n", v.x, v.y));
    }
    for c in &mesh.cells {
        out.push_str(&format!("c {} {} {}\n", c[0], c[1], c[2]));
    }
    for f in &mesh.boundary_facets {
        out.push_str(&format!("b {} {} {}\n", f.vertices[0], f.vertices[1], f.marker));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut cells: Vec<[usize; 3]> = Vec::new();
    let mut boundary_facets = Vec::new();
    let mut header_seen = false;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        if !header_seen {
            if tok.next() != Some("trimesh") || tok.next() != Some("2") {
                return Err(Error::parse(path, lineno, "missing header `trimesh 2`"));
            }
            header_seen = true;
            continue;
        }
        let kind = tok.next().unwrap();
        let rest: Vec<&str> = tok.collect();
        match kind {
            "v" => {
                if rest.len() != 2 {
                    return Err(Error::parse(path, lineno, "expected `v <x> <y>`"));
                }
                let x: f64 = rest[0]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad coordinate `{}`", rest[0])))?;
                let y: f64 = rest[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad coordinate `{}`", rest[1])))?;
                vertices.push(Point2::new(x, y));
            }
            "c" => {
                if rest.len() != 3 {
                    return Err(Error::parse(path, lineno, "expected `c <i0> <i1> <i2>`"));
                }
                let mut cell = [0usize; 3];
                for (slot, t) in cell.iter_mut().zip(&rest) {
                    *slot = t
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad vertex index `{t}`")))?;
                }
                for &v in &cell {
                    if v >= vertices.len() {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("cell vertex index {v} out of range ({} vertices)", vertices.len()),
                        ));
                    }
                }
                cells.push(cell);
            }
            "b" => {
                if rest.len() != 3 {
                    return Err(Error::parse(path, lineno, "expected `b <i0> <i1> <marker>`"));
                }
                let a: usize = rest[0]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad vertex index `{}`", rest[0])))?;
                let b: usize = rest[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad vertex index `{}`", rest[1])))?;
                let marker: i32 = rest[2]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad marker `{}`", rest[2])))?;
                if a >= vertices.len() || b >= vertices.len() {
                    return Err(Error::parse(path, lineno, "facet vertex index out of range"));
                }
                boundary_facets.push(BoundaryFacet {
                    vertices: [a, b],
                    marker,
                });
            }
            other => {
                return Err(Error::parse(path, lineno, format!("unknown record `{other}`")));
            }
        }
    }
    if !header_seen {
        return Err(Error::parse(path, 1, "missing header `trimesh 2`"));
    }
    TriMesh::new(vertices, cells, boundary_facets)
}
