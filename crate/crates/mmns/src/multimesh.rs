use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{
    clip_polygon_triangle, clip_segment_triangle, eps_geom, BucketGrid, ConvexPolygon, QuadRule,
};
use crate::mesh::{read_mesh, Point2, TriMesh, OUTER};

/// Classification of a cell inside the stack.
///
/// A cell is Cut when part of it is hidden by higher meshes, Covered when
/// essentially all of it is hidden, and Hole when explicitly deactivated by
/// `mark_hole` (no mesh provides the solution there).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    ActiveUncut,
    Cut,
    Covered,
    Hole,
}

impl CellStatus {
    pub fn is_active(self) -> bool {
        matches!(self, CellStatus::ActiveUncut | CellStatus::Cut)
    }
}

/// Visible-part quadrature for a cut cell. Weights are signed: the rule is
/// the full-cell rule minus rules over the parts hidden by higher meshes,
/// which integrates cell-wise polynomials over the visible part exactly.
#[derive(Debug, Clone)]
pub struct CutCellData {
    pub mesh: usize,
    pub cell: usize,
    pub visible_area: f64,
    pub rule: QuadRule,
}

/// One straight piece of the artificial interface between an upper mesh and
/// the lower mesh visible directly underneath it.
#[derive(Debug, Clone)]
pub struct InterfaceSegment {
    pub upper_mesh: usize,
    pub lower_mesh: usize,
    pub a: Point2,
    pub b: Point2,
    /// Boundary facet index in the upper mesh.
    pub facet: usize,
    pub upper_cell: usize,
    pub lower_cell: usize,
    /// Unit normal pointing out of the upper predomain.
    pub normal: Point2,
    /// Mean of the two incident cell diameters.
    pub h_mean: f64,
    pub rule: QuadRule,
}

/// Quadrature over (lower cell ∩ upper cell), restricted to the part where
/// the upper mesh is visible.
#[derive(Debug, Clone)]
pub struct OverlapQuad {
    pub lower_mesh: usize,
    pub upper_mesh: usize,
    pub lower_cell: usize,
    pub upper_cell: usize,
    pub polygon: ConvexPolygon,
    pub rule: QuadRule,
}

/// An ordered stack of triangle meshes with all derived intersection data.
/// Mesh 0 is the background; higher indices hide lower ones.
#[derive(Debug, Clone)]
pub struct MultiMesh {
    pub meshes: Vec<TriMesh>,
    pub grids: Vec<BucketGrid>,
    pub statuses: Vec<Vec<CellStatus>>,
    pub cut_cells: Vec<Vec<Option<CutCellData>>>,
    pub interfaces: Vec<InterfaceSegment>,
    pub overlaps: Vec<OverlapQuad>,
    /// Polynomial degree the cut/interface/overlap rules integrate exactly.
    pub quad_degree: usize,
    pub eps: f64,
    /// Cumulative seconds spent recomputing intersections (builds).
    pub build_seconds: f64,
    /// Cumulative seconds spent moving mesh vertices.
    pub transform_seconds: f64,
}

struct BuildCtx<'a> {
    meshes: &'a [TriMesh],
    grids: &'a [BucketGrid],
    eps: f64,
    degree: usize,
}

fn poly_bbox(p: &ConvexPolygon) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in &p.vertices {
        lo.x = lo.x.min(v.x);
        lo.y = lo.y.min(v.y);
        hi.x = hi.x.max(v.x);
        hi.y = hi.y.max(v.y);
    }
    (lo, hi)
}

impl<'a> BuildCtx<'a> {
    /// Quadrature over the part of `poly` not hidden by meshes
    /// `from_mesh..N`, as a signed composition of polygon rules.
    fn visible_rule(&self, poly: &ConvexPolygon, from_mesh: usize) -> QuadRule {
        if from_mesh >= self.meshes.len() {
            return QuadRule::polygon(poly, self.degree, self.eps);
        }
        let (lo, hi) = poly_bbox(poly);
        let mut rule = self.visible_rule(poly, from_mesh + 1);
        for c in self.grids[from_mesh].candidates(lo, hi) {
            let tri = self.meshes[from_mesh].cell_vertices(c);
            let clipped = clip_polygon_triangle(poly, &tri, self.eps);
            if !clipped.is_empty() {
                let sub = self.visible_rule(&clipped, from_mesh + 1);
                rule.extend_scaled(&sub, -1.0);
            }
        }
        rule
    }
}

/// Sorted union of possibly overlapping parameter intervals.
fn merge_intervals(mut v: Vec<(f64, f64)>, tol: f64) -> Vec<(f64, f64)> {
    v.retain(|&(a, b)| b - a > tol);
    v.sort_unstable_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 + tol => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// `base` minus `cut`; both sorted and disjoint.
fn subtract_intervals(base: &[(f64, f64)], cut: &[(f64, f64)], tol: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a, b) in base {
        let mut start = a;
        for &(ca, cb) in cut {
            if cb <= start + tol {
                continue;
            }
            if ca >= b - tol {
                break;
            }
            if ca > start + tol {
                out.push((start, ca));
            }
            start = start.max(cb);
            if start >= b - tol {
                break;
            }
        }
        if b - start > tol {
            out.push((start, b));
        }
    }
    out
}

/// Intersection of two sorted disjoint interval lists.
fn intersect_intervals(xs: &[(f64, f64)], ys: &[(f64, f64)], tol: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(a, b) in xs {
        for &(c, d) in ys {
            let lo = a.max(c);
            let hi = b.min(d);
            if hi - lo > tol {
                out.push((lo, hi));
            }
        }
    }
    out
}

impl MultiMesh {
    /// Build the stack. `quad_degree` is the polynomial degree the generated
    /// cut/interface/overlap rules integrate exactly; pass at least
    /// 2*(velocity degree)+2 for the solver.
    pub fn build(meshes: Vec<TriMesh>, quad_degree: usize) -> Result<MultiMesh> {
        if meshes.is_empty() {
            return Err(Error::InvalidArgument(
                "a multimesh needs at least one mesh".into(),
            ));
        }
        let start = Instant::now();
        let grids: Vec<BucketGrid> = meshes.iter().map(BucketGrid::new).collect();

        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for m in &meshes {
            let (l, h) = m.bounding_box();
            lo.x = lo.x.min(l.x);
            lo.y = lo.y.min(l.y);
            hi.x = hi.x.max(h.x);
            hi.y = hi.y.max(h.y);
        }
        let eps = eps_geom((hi - lo).norm());
        let covered_threshold = 1e-10 * meshes[0].total_area();
        let ctx = BuildCtx {
            meshes: &meshes,
            grids: &grids,
            eps,
            degree: quad_degree,
        };
        let n = meshes.len();

        let mut statuses: Vec<Vec<CellStatus>> = Vec::with_capacity(n);
        let mut cut_cells: Vec<Vec<Option<CutCellData>>> = Vec::with_capacity(n);
        for i in 0..n {
            let mesh = &meshes[i];
            let per_cell: Vec<(CellStatus, Option<CutCellData>)> = (0..mesh.num_cells())
                .map(|c| {
                    let tri = mesh.cell_vertices(c);
                    let cell_area = mesh.cell_area(c);
                    let poly = ConvexPolygon::from_triangle(&tri);
                    let (blo, bhi) = poly_bbox(&poly);
                    let covered_above = (i + 1..n)
                        .any(|j| !grids[j].candidates(blo, bhi).is_empty());
                    if !covered_above {
                        return (CellStatus::ActiveUncut, None);
                    }
                    let rule = ctx.visible_rule(&poly, i + 1);
                    let visible_area = rule.total_weight();
                    if visible_area < covered_threshold {
                        (CellStatus::Covered, None)
                    } else if cell_area - visible_area < covered_threshold {
                        (CellStatus::ActiveUncut, None)
                    } else {
                        (
                            CellStatus::Cut,
                            Some(CutCellData {
                                mesh: i,
                                cell: c,
                                visible_area,
                                rule,
                            }),
                        )
                    }
                })
                .collect();
            let mut st = Vec::with_capacity(per_cell.len());
            let mut cd = Vec::with_capacity(per_cell.len());
            for (s, d) in per_cell {
                st.push(s);
                cd.push(d);
            }
            statuses.push(st);
            cut_cells.push(cd);
        }

        let mut overlaps = Vec::new();
        for i in 0..n {
            for c in 0..meshes[i].num_cells() {
                if statuses[i][c] != CellStatus::Cut {
                    continue;
                }
                let tri = meshes[i].cell_vertices(c);
                let poly = ConvexPolygon::from_triangle(&tri);
                let (blo, bhi) = poly_bbox(&poly);
                for j in (i + 1)..n {
                    for cj in grids[j].candidates(blo, bhi) {
                        let tri_j = meshes[j].cell_vertices(cj);
                        let piece = clip_polygon_triangle(&poly, &tri_j, eps);
                        if piece.is_empty() {
                            continue;
                        }
                        let rule = ctx.visible_rule(&piece, j + 1);
                        if rule.is_empty() {
                            continue;
                        }
                        overlaps.push(OverlapQuad {
                            lower_mesh: i,
                            upper_mesh: j,
                            lower_cell: c,
                            upper_cell: cj,
                            polygon: piece,
                            rule,
                        });
                    }
                }
            }
        }

        let mut interfaces = Vec::new();
        for i in 1..n {
            let mesh = &meshes[i];
            let edge_owner = edge_to_cell_map(mesh);
            for (f_idx, facet) in mesh.boundary_facets.iter().enumerate() {
                if facet.marker != OUTER {
                    continue;
                }
                let a = mesh.vertices[facet.vertices[0]];
                let b = mesh.vertices[facet.vertices[1]];
                let len = (b - a).norm();
                if len <= eps {
                    continue;
                }
                let tol_t = eps / len;
                let owner = edge_owner[&ordered_edge(facet.vertices[0], facet.vertices[1])];
                let tangent = (b - a) * (1.0 / len);
                let normal = Point2::new(tangent.y, -tangent.x);
                let h_upper = mesh.cell_diameter(owner);

                let param = |p: Point2| (p - a).dot(tangent) / len;
                let clip_to_mesh = |j: usize| -> Vec<(usize, (f64, f64))> {
                    let (blo, bhi) = segment_bbox(a, b);
                    let mut spans = Vec::new();
                    for c in grids[j].candidates(blo, bhi) {
                        let tri = meshes[j].cell_vertices(c);
                        if let Some((p, q)) = clip_segment_triangle(a, b, &tri, eps) {
                            let (t0, t1) = (param(p), param(q));
                            let (t0, t1) = (t0.min(t1).max(0.0), t0.max(t1).min(1.0));
                            if t1 - t0 > tol_t {
                                spans.push((c, (t0, t1)));
                            }
                        }
                    }
                    spans
                };

                let mut hidden = Vec::new();
                for j in (i + 1)..n {
                    hidden.extend(clip_to_mesh(j).into_iter().map(|(_, s)| s));
                }
                let hidden = merge_intervals(hidden, tol_t);
                let mut unassigned = subtract_intervals(&[(0.0, 1.0)], &hidden, tol_t);

                for j in (0..i).rev() {
                    if unassigned.is_empty() {
                        break;
                    }
                    for (cell_j, span) in clip_to_mesh(j) {
                        let pieces = intersect_intervals(&unassigned, &[span], tol_t);
                        for (t0, t1) in &pieces {
                            let pa = a + (b - a) * *t0;
                            let pb = a + (b - a) * *t1;
                            let h_mean = 0.5 * (h_upper + meshes[j].cell_diameter(cell_j));
                            interfaces.push(InterfaceSegment {
                                upper_mesh: i,
                                lower_mesh: j,
                                a: pa,
                                b: pb,
                                facet: f_idx,
                                upper_cell: owner,
                                lower_cell: cell_j,
                                normal,
                                h_mean,
                                rule: QuadRule::segment(pa, pb, quad_degree),
                            });
                        }
                        unassigned = subtract_intervals(&unassigned, &pieces, tol_t);
                    }
                }
            }
        }

        Ok(MultiMesh {
            meshes,
            grids,
            statuses,
            cut_cells,
            interfaces,
            overlaps,
            quad_degree,
            eps,
            build_seconds: start.elapsed().as_secs_f64(),
            transform_seconds: 0.0,
        })
    }

    pub fn num_meshes(&self) -> usize {
        self.meshes.len()
    }

    /// Area of the visible part of one mesh (active cells only).
    pub fn visible_area(&self, mesh: usize) -> f64 {
        let mut area = 0.0;
        for c in 0..self.meshes[mesh].num_cells() {
            match self.statuses[mesh][c] {
                CellStatus::ActiveUncut => area += self.meshes[mesh].cell_area(c),
                CellStatus::Cut => area += self.cut_cells[mesh][c].as_ref().unwrap().visible_area,
                CellStatus::Covered | CellStatus::Hole => {}
            }
        }
        area
    }

    pub fn total_visible_area(&self) -> f64 {
        (0..self.num_meshes()).map(|i| self.visible_area(i)).sum()
    }

    /// Total interface length between an upper mesh and a lower mesh.
    pub fn interface_length(&self, upper_mesh: usize, lower_mesh: usize) -> f64 {
        self.interfaces
            .iter()
            .filter(|s| s.upper_mesh == upper_mesh && s.lower_mesh == lower_mesh)
            .map(|s| (s.b - s.a).norm())
            .sum()
    }

    /// Quadrature rule over the visible part of an active cell at the given
    /// exactness degree. Uncut cells get a plain cell rule; cut cells reuse
    /// the stored composed rule (built at `quad_degree`).
    pub fn cell_rule(&self, mesh: usize, cell: usize, degree: usize) -> QuadRule {
        match self.statuses[mesh][cell] {
            CellStatus::ActiveUncut => {
                QuadRule::triangle(&self.meshes[mesh].cell_vertices(cell), degree)
            }
            CellStatus::Cut => self.cut_cells[mesh][cell].as_ref().unwrap().rule.clone(),
            CellStatus::Covered | CellStatus::Hole => QuadRule::empty(),
        }
    }

    /// Mark as holes the cells of `mesh` lying fully inside the region
    /// (vertices and centroid). Returns the number of cells marked. Interface
    /// and overlap data touching the marked cells is dropped.
    pub fn mark_hole(&mut self, mesh: usize, region: impl Fn(Point2) -> bool) -> usize {
        if mesh + 1 == self.num_meshes() && self.num_meshes() >= 1 {
            eprintln!(
                "warning: marking holes on the topmost mesh leaves the solution undefined there"
            );
        }
        let m = &self.meshes[mesh];
        let mut marked = 0usize;
        for c in 0..m.num_cells() {
            let [a, b, d] = m.cell_vertices(c);
            let centroid = (a + b + d) * (1.0 / 3.0);
            if region(a) && region(b) && region(d) && region(centroid) {
                if self.statuses[mesh][c] != CellStatus::Hole {
                    marked += 1;
                }
                self.statuses[mesh][c] = CellStatus::Hole;
                self.cut_cells[mesh][c] = None;
            }
        }
        if marked > 0 {
            let statuses = &self.statuses;
            self.overlaps.retain(|o| {
                statuses[o.lower_mesh][o.lower_cell] != CellStatus::Hole
                    && statuses[o.upper_mesh][o.upper_cell] != CellStatus::Hole
            });
            self.interfaces.retain(|s| {
                statuses[s.upper_mesh][s.upper_cell] != CellStatus::Hole
                    && statuses[s.lower_mesh][s.lower_cell] != CellStatus::Hole
            });
        }
        marked
    }

    /// Highest mesh with an active cell containing `x`, with the cell index.
    pub fn topmost_locate(&self, x: Point2) -> Option<(usize, usize)> {
        for i in (0..self.num_meshes()).rev() {
            if let Some(c) = self.grids[i].locate(&self.meshes[i], x) {
                if self.statuses[i][c].is_active() {
                    return Some((i, c));
                }
            }
        }
        None
    }

    /// Rigid-body move of one mesh followed by a full rebuild of the
    /// intersection data. Holes are not re-marked; callers owning hole
    /// regions re-apply them afterwards.
    pub fn transform_mesh(
        &self,
        mesh: usize,
        translation: Point2,
        rotation: f64,
    ) -> Result<MultiMesh> {
        let t0 = Instant::now();
        let moved = self.meshes[mesh].transformed(translation, rotation);
        let transform_seconds = self.transform_seconds + t0.elapsed().as_secs_f64();
        if mesh > 0 {
            let bg = &self.meshes[0];
            let bg_grid = &self.grids[0];
            for v in &moved.vertices {
                if bg_grid.locate(bg, *v).is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "transformed mesh {mesh} leaves the background domain at {v}"
                    )));
                }
            }
        }
        let mut meshes = self.meshes.clone();
        meshes[mesh] = moved;
        let mut rebuilt = MultiMesh::build(meshes, self.quad_degree)?;
        rebuilt.build_seconds += self.build_seconds;
        rebuilt.transform_seconds = transform_seconds;
        Ok(rebuilt)
    }
}

fn ordered_edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn edge_to_cell_map(mesh: &TriMesh) -> std::collections::HashMap<(usize, usize), usize> {
    let mut map = std::collections::HashMap::new();
    for (k, cell) in mesh.cells.iter().enumerate() {
        for e in 0..3 {
            let key = ordered_edge(cell[e], cell[(e + 1) % 3]);
            map.entry(key).or_insert(k);
        }
    }
    map
}

fn segment_bbox(a: Point2, b: Point2) -> (Point2, Point2) {
    (
        Point2::new(a.x.min(b.x), a.y.min(b.y)),
        Point2::new(a.x.max(b.x), a.y.max(b.y)),
    )
}

/// A `place` entry in a scene file: move mesh `index` (0-based) rigidly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub mesh: usize,
    pub translation: Point2,
    pub rotation: f64,
}

/// A `hole` entry in a scene file: an ellipse region marked out of the
/// background mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoleSpec {
    pub center: Point2,
    pub rx: f64,
    pub ry: f64,
    pub rotation: f64,
}

impl HoleSpec {
    pub fn contains(&self, p: Point2) -> bool {
        let d = (p - self.center).rotated(-self.rotation);
        let sx = d.x / self.rx;
        let sy = d.y / self.ry;
        sx * sx + sy * sy <= 1.0
    }
}

/// Parsed scene file: mesh paths in stacking order plus placements and holes.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub mesh_paths: Vec<std::path::PathBuf>,
    pub placements: Vec<Placement>,
    pub holes: Vec<HoleSpec>,
}

/// Scene file format: one mesh path per line in stacking order (background
/// first), plus optional `place <mesh> <tx> <ty> <theta>` entries (1-based
/// mesh numbers) and `hole <cx> <cy> <rx> <ry> <theta>` entries. Paths are
/// relative to the scene file's directory. `#` starts a comment.
pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut scene = Scene::default();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "place" => {
                if fields.len() != 5 {
                    return Err(Error::parse(path, lineno, "expected `place <mesh> <tx> <ty> <theta>`"));
                }
                let mesh: usize = fields[1]
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "bad mesh number"))?;
                if mesh == 0 || mesh > scene.mesh_paths.len() {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("mesh number {mesh} out of range (1..={})", scene.mesh_paths.len()),
                    ));
                }
                let nums: Vec<f64> = fields[2..5]
                    .iter()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, lineno, "bad number in place entry"))?;
                scene.placements.push(Placement {
                    mesh: mesh - 1,
                    translation: Point2::new(nums[0], nums[1]),
                    rotation: nums[2],
                });
            }
            "hole" => {
                if fields.len() != 6 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        "expected `hole <cx> <cy> <rx> <ry> <theta>`",
                    ));
                }
                let nums: Vec<f64> = fields[1..6]
                    .iter()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(path, lineno, "bad number in hole entry"))?;
                scene.holes.push(HoleSpec {
                    center: Point2::new(nums[0], nums[1]),
                    rx: nums[2],
                    ry: nums[3],
                    rotation: nums[4],
                });
            }
            _ => {
                scene.mesh_paths.push(dir.join(fields[0]));
            }
        }
    }
    if scene.mesh_paths.is_empty() {
        return Err(Error::parse(path, 1, "scene lists no meshes"));
    }
    Ok(scene)
}

/// Load a scene file, apply placements, build the stack, and mark holes.
pub fn build_scene(path: impl AsRef<Path>, quad_degree: usize) -> Result<MultiMesh> {
    let scene = read_scene(path)?;
    let mut meshes = Vec::with_capacity(scene.mesh_paths.len());
    for p in &scene.mesh_paths {
        meshes.push(read_mesh(p)?);
    }
    for pl in &scene.placements {
        meshes[pl.mesh] = meshes[pl.mesh].transformed(pl.translation, pl.rotation);
    }
    let mut mm = MultiMesh::build(meshes, quad_degree)?;
    for hole in &scene.holes {
        mm.mark_hole(0, |p| hole.contains(p));
    }
    Ok(mm)
}
