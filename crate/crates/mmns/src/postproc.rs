use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::tables::{segment_rule, MAX_SEGMENT_DEGREE, MAX_TRIANGLE_DEGREE};
use crate::mesh::Point2;
use crate::multimesh::CellStatus;
use crate::space::MultiMeshFunction;

/// Error norms for one (space level, time level) pair: space-time norms
/// accumulated over the whole run plus final-time snapshots.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorRecord {
    pub level_x: usize,
    pub level_t: usize,
    pub velocity_l2: f64,
    pub velocity_h1: f64,
    pub pressure_l2: f64,
    pub final_velocity_l2: f64,
    pub final_velocity_h1: f64,
    pub final_pressure_l2: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub cd: f64,
    pub cl: f64,
    pub dp: f64,
}

/// Wall-clock seconds per substep, accumulated over a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Timings {
    pub mesh_build: f64,
    pub assemble_tentative: f64,
    pub solve_tentative: f64,
    pub assemble_pressure: f64,
    pub solve_pressure: f64,
    pub assemble_update: f64,
    pub solve_update: f64,
    pub steps: usize,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.mesh_build
            + self.assemble_tentative
            + self.solve_tentative
            + self.assemble_pressure
            + self.solve_pressure
            + self.assemble_update
            + self.solve_update
    }

    pub fn merge(&mut self, other: &Timings) {
        self.mesh_build += other.mesh_build;
        self.assemble_tentative += other.assemble_tentative;
        self.solve_tentative += other.solve_tentative;
        self.assemble_pressure += other.assemble_pressure;
        self.solve_pressure += other.solve_pressure;
        self.assemble_update += other.assemble_update;
        self.solve_update += other.solve_update;
        self.steps += other.steps;
    }

    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mesh_build", self.mesh_build),
            ("assemble_tentative", self.assemble_tentative),
            ("solve_tentative", self.solve_tentative),
            ("assemble_pressure", self.assemble_pressure),
            ("solve_pressure", self.solve_pressure),
            ("assemble_update", self.assemble_update),
            ("solve_update", self.solve_update),
        ]
    }
}

/// Everything a case run produces: benchmark time series, error/convergence
/// records, and substep timings.
#[derive(Debug, Clone, Default)]
pub struct CaseReport {
    pub rows: Vec<TimeSeriesRow>,
    pub errors: Vec<ErrorRecord>,
    pub timings: Timings,
}

fn gather(f: &MultiMeshFunction, mesh: usize, cell: usize) -> Vec<f64> {
    let space = &f.space;
    let vs = space.element.value_size;
    let mut out = Vec::with_capacity(space.element.n_dofs_per_cell());
    for &node in &space.cell_nodes[mesh][cell] {
        for comp in 0..vs {
            out.push(f.coeffs[space.dof(mesh, node, comp)]);
        }
    }
    out
}

/// Exact-field comparison: plain values for the L² norm, first derivatives
/// (row per component) for the H¹ seminorm.
pub enum NormSpec<'a> {
    L2(&'a dyn Fn(Point2) -> [f64; 2]),
    H1Semi(&'a dyn Fn(Point2) -> [[f64; 2]; 2]),
}

/// Spatial error norm against an analytic field, integrated over the
/// visible parts of every mesh with cut-cell quadrature.
pub fn errornorm(f: &MultiMeshFunction, spec: NormSpec) -> f64 {
    let space = &f.space;
    let mm = &space.mm;
    let vs = space.element.value_size;
    let deg = (2 * space.element.degree + 2).min(MAX_TRIANGLE_DEGREE);
    let mut acc = 0.0;
    for m in 0..mm.num_meshes() {
        for ci in 0..mm.meshes[m].num_cells() {
            if !mm.statuses[m][ci].is_active() {
                continue;
            }
            let rule = mm.cell_rule(m, ci, deg);
            if rule.is_empty() {
                continue;
            }
            let tri = mm.meshes[m].cell_vertices(ci);
            let tab = space.element.tabulate(&tri, &rule.points, false);
            let coeffs = gather(f, m, ci);
            for (qp, &w) in rule.weights.iter().enumerate() {
                match &spec {
                    NormSpec::L2(exact) => {
                        let ex = exact(rule.points[qp]);
                        for c in 0..vs {
                            let mut v = 0.0;
                            for (a, &phi) in tab.values[qp].iter().enumerate() {
                                v += coeffs[vs * a + c] * phi;
                            }
                            acc += w * (v - ex[c]) * (v - ex[c]);
                        }
                    }
                    NormSpec::H1Semi(exact_grad) => {
                        let ex = exact_grad(rule.points[qp]);
                        for c in 0..vs {
                            let mut g = Point2::default();
                            for (a, &ga) in tab.grads[qp].iter().enumerate() {
                                g += ga * coeffs[vs * a + c];
                            }
                            let dx = g.x - ex[c][0];
                            let dy = g.y - ex[c][1];
                            acc += w * (dx * dx + dy * dy);
                        }
                    }
                }
            }
        }
    }
    acc.sqrt()
}

/// Accumulator for sqrt(Σ_n δt ‖e(t_n)‖²) over the steps of a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpaceTimeNorm {
    sum: f64,
}

impl SpaceTimeNorm {
    pub fn add(&mut self, dt: f64, spatial_norm: f64) {
        self.sum += dt * spatial_norm * spatial_norm;
    }

    pub fn value(&self) -> f64 {
        self.sum.sqrt()
    }
}

/// L² norm of the divergence of a vector field over the visible domain.
pub fn divergence_l2(u: &MultiMeshFunction) -> f64 {
    let space = &u.space;
    let mm = &space.mm;
    let deg = (2 * space.element.degree).min(MAX_TRIANGLE_DEGREE);
    let mut acc = 0.0;
    for m in 0..mm.num_meshes() {
        for ci in 0..mm.meshes[m].num_cells() {
            if !mm.statuses[m][ci].is_active() {
                continue;
            }
            let rule = mm.cell_rule(m, ci, deg);
            if rule.is_empty() {
                continue;
            }
            let tri = mm.meshes[m].cell_vertices(ci);
            let tab = space.element.tabulate(&tri, &rule.points, false);
            let coeffs = gather(u, m, ci);
            for (qp, &w) in rule.weights.iter().enumerate() {
                let mut div = 0.0;
                for (a, &ga) in tab.grads[qp].iter().enumerate() {
                    div += coeffs[2 * a] * ga.x + coeffs[2 * a + 1] * ga.y;
                }
                acc += w * div * div;
            }
        }
    }
    acc.sqrt()
}

/// Observed convergence rates between successive halvings:
/// rate_k = log2(e_k / e_{k+1}); non-positive errors yield NaN markers.
pub fn eoc(errors: &[f64]) -> Vec<f64> {
    errors
        .windows(2)
        .map(|w| {
            if w[0] > 0.0 && w[1] > 0.0 {
                (w[0] / w[1]).log2()
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Drag and lift coefficients from line integrals over the boundary facets
/// carrying `marker`. The normal points out of the obstacle into the fluid;
/// fields are evaluated one-sided from the cells of the mesh owning the
/// facets.
pub fn drag_lift(
    u: &MultiMeshFunction,
    p: &MultiMeshFunction,
    nu: f64,
    marker: i32,
    rho: f64,
    u_mean: f64,
    char_length: f64,
) -> Result<(f64, f64)> {
    let space_v = &u.space;
    let mm = &space_v.mm;
    let deg = (2 * space_v.element.degree + 2).min(MAX_SEGMENT_DEGREE);
    let seg_rule = segment_rule(deg);
    let mut found = false;
    let mut drag = 0.0;
    let mut lift = 0.0;
    for m in 0..mm.num_meshes() {
        let mesh = &mm.meshes[m];
        if !mesh.boundary_facets.iter().any(|f| f.marker == marker) {
            continue;
        }
        found = true;
        let mut edge_cell: HashMap<(usize, usize), usize> = HashMap::new();
        for (ci, cell) in mesh.cells.iter().enumerate() {
            for e in 0..3 {
                let a = cell[e];
                let b = cell[(e + 1) % 3];
                edge_cell.insert((a.min(b), a.max(b)), ci);
            }
        }
        for facet in mesh.boundary_facets.iter().filter(|f| f.marker == marker) {
            let [va, vb] = facet.vertices;
            let pa = mesh.vertices[va];
            let pb = mesh.vertices[vb];
            let ci = edge_cell[&(va.min(vb), va.max(vb))];
            let tvec = pb - pa;
            let len = tvec.norm();
            let t_hat = tvec * (1.0 / len);
            let n = Point2::new(-t_hat.y, t_hat.x);
            let pts: Vec<Point2> = seg_rule.iter().map(|&[s, _]| pa + tvec * s).collect();
            let tri = mesh.cell_vertices(ci);
            let tab_u = space_v.element.tabulate(&tri, &pts, false);
            let tab_p = p.space.element.tabulate(&tri, &pts, false);
            let uc = gather(u, m, ci);
            let pc = gather(p, m, ci);
            for (qp, &[_, w]) in seg_rule.iter().enumerate() {
                let mut ug = [Point2::default(); 2];
                for (a, &ga) in tab_u.grads[qp].iter().enumerate() {
                    ug[0] += ga * uc[2 * a];
                    ug[1] += ga * uc[2 * a + 1];
                }
                let mut pv = 0.0;
                for (a, &phi) in tab_p.values[qp].iter().enumerate() {
                    pv += pc[a] * phi;
                }
                let dn_ut = n.dot(ug[0]) * n.y - n.dot(ug[1]) * n.x;
                let ds = w * len;
                drag += (rho * nu * dn_ut * n.y - pv * n.x) * ds;
                lift -= (rho * nu * dn_ut * n.x + pv * n.y) * ds;
            }
        }
    }
    if !found {
        return Err(Error::InvalidArgument(format!(
            "no boundary facet carries marker {marker}"
        )));
    }
    let scale = 2.0 / (rho * char_length * u_mean * u_mean);
    Ok((scale * drag, scale * lift))
}

/// Top-most point evaluation of a pressure field at probe locations.
pub fn pressure_probe(p: &MultiMeshFunction, points: &[Point2]) -> Result<Vec<f64>> {
    points.iter().map(|&x| Ok(p.evaluate(x)?[0])).collect()
}

pub fn pressure_difference(p: &MultiMeshFunction, front: Point2, back: Point2) -> Result<f64> {
    Ok(p.evaluate(front)?[0] - p.evaluate(back)?[0])
}

fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `t,cd,cl,dp`, 17 significant digits per value.
pub fn write_time_series(rows: &[TimeSeriesRow], path: &Path) -> Result<()> {
    let mut s = String::from("t,cd,cl,dp\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt_g17(r.t),
            fmt_g17(r.cd),
            fmt_g17(r.cl),
            fmt_g17(r.dp)
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Read a `t,cd,cl,dp` series; a header line and `#` comments are skipped.
pub fn read_time_series(path: &Path) -> Result<Vec<TimeSeriesRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected 4 comma-separated values, got {}", parts.len()),
            ));
        }
        let vals: std::result::Result<Vec<f64>, _> =
            parts.iter().map(|s| s.parse::<f64>()).collect();
        match vals {
            Ok(v) => rows.push(TimeSeriesRow {
                t: v[0],
                cd: v[1],
                cl: v[2],
                dp: v[3],
            }),
            Err(_) if rows.is_empty() && idx == 0 => continue,
            Err(_) => {
                return Err(Error::parse(path, idx + 1, format!("not a number in: {line}")))
            }
        }
    }
    Ok(rows)
}

/// Deviation per column between a computed series and a reference, with the
/// reference linearly interpolated at the computed times that fall inside
/// its range: largest absolute deviation (`cd`, `cl`, `dp`) and the
/// time-weighted discrete L² deviation over the overlap (`*_l2`).
#[derive(Debug, Clone, Copy, Default)]
pub struct SeriesDeviation {
    pub cd: f64,
    pub cl: f64,
    pub dp: f64,
    pub cd_l2: f64,
    pub cl_l2: f64,
    pub dp_l2: f64,
    pub compared: usize,
}

pub fn compare_series(
    ours: &[TimeSeriesRow],
    reference: &[TimeSeriesRow],
) -> Result<SeriesDeviation> {
    if reference.len() < 2 {
        return Err(Error::InvalidArgument(
            "reference series needs at least two rows".into(),
        ));
    }
    let mut dev = SeriesDeviation::default();
    let mut sq = [0.0f64; 3];
    let mut t_first = f64::INFINITY;
    let mut t_last = f64::NEG_INFINITY;
    let t0 = reference[0].t;
    let t1 = reference[reference.len() - 1].t;
    for row in ours {
        if row.t < t0 || row.t > t1 {
            continue;
        }
        let j = match reference.binary_search_by(|r| r.t.partial_cmp(&row.t).unwrap()) {
            Ok(j) => j.min(reference.len() - 2),
            Err(j) => j.saturating_sub(1).min(reference.len() - 2),
        };
        let (a, b) = (&reference[j], &reference[j + 1]);
        let s = if b.t > a.t { (row.t - a.t) / (b.t - a.t) } else { 0.0 };
        let cd = a.cd + s * (b.cd - a.cd);
        let cl = a.cl + s * (b.cl - a.cl);
        let dp = a.dp + s * (b.dp - a.dp);
        dev.cd = dev.cd.max((row.cd - cd).abs());
        dev.cl = dev.cl.max((row.cl - cl).abs());
        dev.dp = dev.dp.max((row.dp - dp).abs());
        sq[0] += (row.cd - cd) * (row.cd - cd);
        sq[1] += (row.cl - cl) * (row.cl - cl);
        sq[2] += (row.dp - dp) * (row.dp - dp);
        t_first = t_first.min(row.t);
        t_last = t_last.max(row.t);
        dev.compared += 1;
    }
    if dev.compared == 0 {
        return Err(Error::InvalidArgument(
            "computed and reference series have no overlapping time range".into(),
        ));
    }
    let w = if dev.compared >= 2 {
        (t_last - t_first) / (dev.compared - 1) as f64
    } else {
        0.0
    };
    dev.cd_l2 = (sq[0] * w).sqrt();
    dev.cl_l2 = (sq[1] * w).sqrt();
    dev.dp_l2 = (sq[2] * w).sqrt();
    Ok(dev)
}

/// Convergence table mirroring the error/eoc column layout of the study
/// tables: each norm column is followed by the rate between successive rows.
pub fn write_convergence_table(records: &[ErrorRecord], path: &Path) -> Result<()> {
    let cols = [
        |r: &ErrorRecord| r.velocity_l2,
        |r: &ErrorRecord| r.velocity_h1,
        |r: &ErrorRecord| r.pressure_l2,
    ];
    let rates: Vec<Vec<f64>> = cols
        .iter()
        .map(|get| eoc(&records.iter().map(get).collect::<Vec<_>>()))
        .collect();
    let mut s = String::from("level_x,level_t,u_l2,u_l2_eoc,u_h1,u_h1_eoc,p_l2,p_l2_eoc\n");
    for (i, r) in records.iter().enumerate() {
        let rate = |k: usize| -> String {
            if i == 0 {
                String::new()
            } else {
                format!("{:.2}", rates[k][i - 1])
            }
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.level_x,
            r.level_t,
            fmt_g17(r.velocity_l2),
            rate(0),
            fmt_g17(r.velocity_h1),
            rate(1),
            fmt_g17(r.pressure_l2),
            rate(2),
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_timings(timings: &Timings, path: &Path) -> Result<()> {
    let mut s = String::from("substep,seconds\n");
    for (name, secs) in timings.rows() {
        s.push_str(&format!("{name},{secs:.6}\n"));
    }
    s.push_str(&format!("total,{:.6}\n", timings.total()));
    s.push_str(&format!("steps,{}\n", timings.steps));
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Write the full report into a directory: time series, convergence table,
/// and timing breakdown.
pub fn write_report(report: &CaseReport, dir: &Path) -> Result<()> {
    for pair in report.rows.windows(2) {
        if pair[1].t <= pair[0].t {
            return Err(Error::InvalidArgument(format!(
                "time series is not strictly increasing at t = {}",
                pair[1].t
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_time_series(&report.rows, &dir.join("time_series.csv"))?;
    write_convergence_table(&report.errors, &dir.join("convergence.csv"))?;
    write_timings(&report.timings, &dir.join("timings.csv"))
}

/// Legacy-ASCII VTK dump, one file per mesh in the stack (suffix `_mesh<i>`),
/// with vertex-sampled fields and a per-cell visibility status array.
pub fn write_vtk(fields: &[(&str, &MultiMeshFunction)], path: &Path) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one field to write".into(),
        ));
    }
    let mm = fields[0].1.space.mm.clone();
    for (_, f) in fields {
        if !std::sync::Arc::ptr_eq(&f.space.mm, &mm) {
            return Err(Error::InvalidArgument(
                "all fields must live on the same mesh stack".into(),
            ));
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("fields");
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    for m in 0..mm.num_meshes() {
        let mesh = &mm.meshes[m];
        let out: PathBuf = parent.join(format!("{stem}_mesh{m}.vtk"));
        let mut s = String::new();
        s.push_str("# vtk DataFile Version 3.0\n");
        s.push_str(&format!("mesh {m} of {}\n", mm.num_meshes()));
        s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
        s.push_str(&format!("POINTS {} double\n", mesh.num_vertices()));
        for v in &mesh.vertices {
            s.push_str(&format!("{} {} 0\n", v.x, v.y));
        }
        s.push_str(&format!(
            "CELLS {} {}\n",
            mesh.num_cells(),
            4 * mesh.num_cells()
        ));
        for cell in &mesh.cells {
            s.push_str(&format!("3 {} {} {}\n", cell[0], cell[1], cell[2]));
        }
        s.push_str(&format!("CELL_TYPES {}\n", mesh.num_cells()));
        for _ in 0..mesh.num_cells() {
            s.push_str("5\n");
        }
        s.push_str(&format!("CELL_DATA {}\n", mesh.num_cells()));
        s.push_str("SCALARS status int 1\nLOOKUP_TABLE default\n");
        for ci in 0..mesh.num_cells() {
            let code = match mm.statuses[m][ci] {
                CellStatus::Covered => 0,
                CellStatus::Cut => 1,
                CellStatus::ActiveUncut => 2,
                CellStatus::Hole => 3,
            };
            s.push_str(&format!("{code}\n"));
        }
        s.push_str(&format!("POINT_DATA {}\n", mesh.num_vertices()));
        for (name, f) in fields {
            let vs = f.space.element.value_size;
            if vs == 1 {
                s.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
                for v in 0..mesh.num_vertices() {
                    s.push_str(&format!("{}\n", f.coeffs[f.space.dof(m, v, 0)]));
                }
            } else {
                s.push_str(&format!("VECTORS {name} double\n"));
                for v in 0..mesh.num_vertices() {
                    s.push_str(&format!(
                        "{} {} 0\n",
                        f.coeffs[f.space.dof(m, v, 0)],
                        f.coeffs[f.space.dof(m, v, 1)]
                    ));
                }
            }
        }
        fs::write(&out, s).map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}
