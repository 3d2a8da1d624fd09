pub mod tables;

use crate::mesh::{Point2, TriMesh};

/// Geometric length tolerance for a domain of the given diameter: vertices
/// closer than this are merged and signed predicates treat |d| below it as
/// "on the boundary".
pub fn eps_geom(domain_diameter: f64) -> f64 {
    1e-12 * domain_diameter.max(1.0)
}

/// Convex polygon with counter-clockwise vertex order. May be empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        ConvexPolygon { vertices }
    }

    pub fn from_triangle(tri: &[Point2; 3]) -> Self {
        ConvexPolygon {
            vertices: tri.to_vec(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Shoelace area; non-negative for CCW polygons, 0 when empty.
    pub fn area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.vertices.len();
        let mut twice = 0.0;
        for i in 0..n {
            twice += self.vertices[i].cross(self.vertices[(i + 1) % n]);
        }
        0.5 * twice
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        let mut twice = 0.0;
        let mut c = Point2::default();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let w = a.cross(b);
            twice += w;
            c += (a + b) * w;
        }
        if twice.abs() < f64::MIN_POSITIVE {
            let mut m = Point2::default();
            for v in &self.vertices {
                m += *v;
            }
            return m * (1.0 / n as f64);
        }
        c * (1.0 / (3.0 * twice))
    }

    /// Drop consecutive vertices closer than `eps`; empty out slivers with
    /// area below eps^2.
    fn cleaned(mut self, eps: f64) -> Self {
        let mut out: Vec<Point2> = Vec::with_capacity(self.vertices.len());
        for v in self.vertices.drain(..) {
            if out.last().map_or(true, |&p| (v - p).norm() > eps) {
                out.push(v);
            }
        }
        while out.len() > 1 && (out[0] - *out.last().unwrap()).norm() <= eps {
            out.pop();
        }
        let poly = ConvexPolygon { vertices: out };
        if poly.is_empty() || poly.area() < eps * eps {
            ConvexPolygon::default()
        } else {
            poly
        }
    }
}

pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    p.area()
}

/// Keep the part of `p` on the left of the directed line a -> b.
fn clip_halfplane(p: &ConvexPolygon, a: Point2, b: Point2, eps: f64) -> ConvexPolygon {
    if p.is_empty() {
        return ConvexPolygon::default();
    }
    let dir = b - a;
    let len = dir.norm();
    if len <= eps {
        return p.clone();
    }
    let dist = |x: Point2| dir.cross(x - a) / len;
    let n = p.vertices.len();
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let cur = p.vertices[i];
        let nxt = p.vertices[(i + 1) % n];
        let dc = dist(cur);
        let dn = dist(nxt);
        if dc >= -eps {
            out.push(cur);
        }
        if (dc > eps && dn < -eps) || (dc < -eps && dn > eps) {
            let t = dc / (dc - dn);
            out.push(cur + (nxt - cur) * t);
        }
    }
    ConvexPolygon { vertices: out }
}

/// Sutherland-Hodgman clip of a convex polygon against a CCW triangle.
pub fn clip_polygon_triangle(p: &ConvexPolygon, tri: &[Point2; 3], eps: f64) -> ConvexPolygon {
    let mut cur = p.clone();
    for e in 0..3 {
        cur = clip_halfplane(&cur, tri[e], tri[(e + 1) % 3], eps);
        if cur.vertices.is_empty() {
            return ConvexPolygon::default();
        }
    }
    cur.cleaned(eps)
}

/// Intersection of two CCW triangles.
pub fn clip_triangle_triangle(s: &[Point2; 3], t: &[Point2; 3], eps: f64) -> ConvexPolygon {
    clip_polygon_triangle(&ConvexPolygon::from_triangle(s), t, eps)
}

/// Sub-segment of [a, b] inside the CCW triangle, or None.
pub fn clip_segment_triangle(
    a: Point2,
    b: Point2,
    tri: &[Point2; 3],
    eps: f64,
) -> Option<(Point2, Point2)> {
    let seg = b - a;
    let seg_len = seg.norm();
    if seg_len <= eps {
        return None;
    }
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for e in 0..3 {
        let p = tri[e];
        let q = tri[(e + 1) % 3];
        let dir = q - p;
        let len = dir.norm();
        if len <= eps {
            return None;
        }
        let da = dir.cross(a - p) / len;
        let db = dir.cross(b - p) / len;
        if da < -eps && db < -eps {
            return None;
        }
        if da >= -eps && db >= -eps {
            continue;
        }
        let tc = da / (da - db);
        if da < db {
            t0 = t0.max(tc);
        } else {
            t1 = t1.min(tc);
        }
    }
    if (t1 - t0) * seg_len <= eps {
        return None;
    }
    Some((a + seg * t0, a + seg * t1))
}

/// Quadrature rule in physical coordinates; weights carry the area or
/// length measure, and may be negative for composed (signed) rules.
#[derive(Debug, Clone, Default)]
pub struct QuadRule {
    pub points: Vec<Point2>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn empty() -> Self {
        QuadRule::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(Point2) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| w * f(p))
            .sum()
    }

    /// Append `other` with every weight multiplied by `factor`.
    pub fn extend_scaled(&mut self, other: &QuadRule, factor: f64) {
        self.points.extend_from_slice(&other.points);
        self.weights.extend(other.weights.iter().map(|w| w * factor));
    }

    /// Gauss rule on a physical triangle, exact for the given total degree.
    pub fn triangle(tri: &[Point2; 3], degree: usize) -> QuadRule {
        let jac = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
        let reference = tables::triangle_rule(degree.max(1));
        let mut points = Vec::with_capacity(reference.len());
        let mut weights = Vec::with_capacity(reference.len());
        for &[xi, eta, w] in reference {
            points.push(tri[0] + (tri[1] - tri[0]) * xi + (tri[2] - tri[0]) * eta);
            weights.push(w * jac);
        }
        QuadRule { points, weights }
    }

    /// Gauss-Legendre rule on the segment [a, b]; weights sum to |b - a|.
    pub fn segment(a: Point2, b: Point2, degree: usize) -> QuadRule {
        let len = (b - a).norm();
        if len == 0.0 {
            return QuadRule::empty();
        }
        let reference = tables::segment_rule(degree.max(1));
        let mut points = Vec::with_capacity(reference.len());
        let mut weights = Vec::with_capacity(reference.len());
        for &[t, w] in reference {
            points.push(a + (b - a) * t);
            weights.push(w * len);
        }
        QuadRule { points, weights }
    }

    /// Rule on a convex polygon: fan-triangulate from the centroid and map a
    /// triangle rule onto each fan triangle. Degenerate polygons give an
    /// empty rule.
    pub fn polygon(p: &ConvexPolygon, degree: usize, eps: f64) -> QuadRule {
        if p.is_empty() || p.area() < eps * eps {
            return QuadRule::empty();
        }
        let c = p.centroid();
        let n = p.vertices.len();
        let mut rule = QuadRule::empty();
        for i in 0..n {
            let tri = [c, p.vertices[i], p.vertices[(i + 1) % n]];
            let area = 0.5 * (tri[1] - tri[0]).cross(tri[2] - tri[0]);
            if area <= eps * eps {
                continue;
            }
            let part = QuadRule::triangle(&tri, degree);
            rule.points.extend_from_slice(&part.points);
            rule.weights.extend_from_slice(&part.weights);
        }
        rule
    }
}

pub fn quadrature_polygon(p: &ConvexPolygon, degree: usize) -> QuadRule {
    QuadRule::polygon(p, degree, eps_geom(1.0))
}

pub fn quadrature_segment(a: Point2, b: Point2, degree: usize) -> QuadRule {
    QuadRule::segment(a, b, degree)
}

/// Barycentric containment test with tolerance `eps` on the signed edge
/// distances.
pub fn point_in_triangle(x: Point2, tri: &[Point2; 3], eps: f64) -> bool {
    for e in 0..3 {
        let p = tri[e];
        let q = tri[(e + 1) % 3];
        let dir = q - p;
        let len = dir.norm();
        if len == 0.0 {
            return false;
        }
        if dir.cross(x - p) / len < -eps {
            return false;
        }
    }
    true
}

/// Linear-scan point location; ties on shared edges resolve to the lowest
/// cell index.
pub fn point_locate(mesh: &TriMesh, x: Point2) -> Option<usize> {
    let (lo, hi) = mesh.bounding_box();
    let eps = eps_geom((hi - lo).norm());
    (0..mesh.num_cells()).find(|&k| point_in_triangle(x, &mesh.cell_vertices(k), eps))
}

/// Uniform-bucket spatial index over cell bounding boxes for fast point
/// location and box queries. Candidate lists are returned sorted so callers
/// inherit the lowest-index tie-break.
#[derive(Debug, Clone)]
pub struct BucketGrid {
    lo: Point2,
    inv_dx: f64,
    inv_dy: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
    pub eps: f64,
}

impl BucketGrid {
    pub fn new(mesh: &TriMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let diam = (hi - lo).norm();
        let eps = eps_geom(diam);
        let n_cells = mesh.num_cells().max(1);
        let side = (n_cells as f64).sqrt().ceil() as usize;
        let nx = side.max(1);
        let ny = side.max(1);
        let dx = ((hi.x - lo.x) / nx as f64).max(f64::MIN_POSITIVE);
        let dy = ((hi.y - lo.y) / ny as f64).max(f64::MIN_POSITIVE);
        let mut grid = BucketGrid {
            lo,
            inv_dx: 1.0 / dx,
            inv_dy: 1.0 / dy,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
            eps,
        };
        for k in 0..mesh.num_cells() {
            let [a, b, c] = mesh.cell_vertices(k);
            let cell_lo = Point2::new(a.x.min(b.x).min(c.x) - eps, a.y.min(b.y).min(c.y) - eps);
            let cell_hi = Point2::new(a.x.max(b.x).max(c.x) + eps, a.y.max(b.y).max(c.y) + eps);
            let (i0, j0) = grid.bucket_of(cell_lo);
            let (i1, j1) = grid.bucket_of(cell_hi);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    grid.buckets[j * grid.nx + i].push(k);
                }
            }
        }
        grid
    }

    fn bucket_of(&self, p: Point2) -> (usize, usize) {
        let fi = ((p.x - self.lo.x) * self.inv_dx).floor();
        let fj = ((p.y - self.lo.y) * self.inv_dy).floor();
        let i = (fi.max(0.0) as usize).min(self.nx - 1);
        let j = (fj.max(0.0) as usize).min(self.ny - 1);
        (i, j)
    }

    /// Sorted, deduplicated cell indices whose bounding boxes may intersect
    /// the query box.
    pub fn candidates(&self, lo: Point2, hi: Point2) -> Vec<usize> {
        let (i0, j0) = self.bucket_of(Point2::new(lo.x - self.eps, lo.y - self.eps));
        let (i1, j1) = self.bucket_of(Point2::new(hi.x + self.eps, hi.y + self.eps));
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                out.extend_from_slice(&self.buckets[j * self.nx + i]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Lowest-index cell containing `x`, or None.
    pub fn locate(&self, mesh: &TriMesh, x: Point2) -> Option<usize> {
        let (i, j) = self.bucket_of(x);
        let bucket = &self.buckets[j * self.nx + i];
        bucket
            .iter()
            .copied()
            .find(|&k| point_in_triangle(x, &mesh.cell_vertices(k), self.eps))
    }
}
