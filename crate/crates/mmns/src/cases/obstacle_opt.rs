use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use crate::assembly::{Convection, Scheme};
use crate::error::{Error, Result};
use crate::ipcs::{InitialConditions, IpcsConfig, IpcsSolver, Problem};
use crate::mesh::{
    generate_rect_mesh, BoundaryFacet, Point2, SideMarkers, TriMesh, INLET, OBSTACLE, OUTER,
    OUTLET, WALL,
};
use crate::multimesh::MultiMesh;
use crate::postproc::drag_lift;
use crate::space::{Element, FunctionSpace, MultiMeshFunction};

/// Annular shell whose inner boundary is the ellipse (rx, ry) and whose
/// outer boundary is the circle r_out, with the rings blended linearly in
/// between; centered at the origin so a rigid transform places it. The
/// blend keeps every ring layer close to uniform thickness, which a plain
/// y-scaled annulus cannot do for flat ellipses.
pub fn generate_shell(
    rx: f64,
    ry: f64,
    r_out: f64,
    n_r: usize,
    n_theta: usize,
) -> Result<TriMesh> {
    if !(rx > 0.0 && ry > 0.0 && r_out > rx.max(ry)) {
        return Err(Error::InvalidArgument(format!(
            "shell radii must satisfy 0 < rx, ry < r_out, got rx={rx} ry={ry} r_out={r_out}"
        )));
    }
    if n_r < 1 || n_theta < 3 {
        return Err(Error::InvalidArgument(format!(
            "shell needs n_r >= 1 and n_theta >= 3, got {n_r} x {n_theta}"
        )));
    }
    let idx = |l: usize, k: usize| l * n_theta + (k % n_theta);
    let mut vertices = Vec::with_capacity((n_r + 1) * n_theta);
    for l in 0..=n_r {
        let s = l as f64 / n_r as f64;
        let a = (1.0 - s) * rx + s * r_out;
        let b = (1.0 - s) * ry + s * r_out;
        for k in 0..n_theta {
            let th = TAU * k as f64 / n_theta as f64;
            vertices.push(Point2::new(a * th.cos(), b * th.sin()));
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
    let mut boundary = Vec::with_capacity(2 * n_theta);
    for k in 0..n_theta {
        boundary.push(BoundaryFacet {
            vertices: [idx(0, k + 1), idx(0, k)],
            marker: OBSTACLE,
        });
        boundary.push(BoundaryFacet {
            vertices: [idx(n_r, k), idx(n_r, k + 1)],
            marker: OUTER,
        });
    }
    TriMesh::new(vertices, cells, boundary)
}

#[derive(Debug, Clone)]
pub struct ObstacleOptConfig {
    pub n_obstacles: usize,
    pub rx: f64,
    pub ry: f64,
    pub r_out: f64,
    pub shell_nr: usize,
    pub shell_ntheta: usize,
    pub length: f64,
    pub height: f64,
    pub bg_nx: usize,
    pub bg_ny: usize,
    /// Center box (x_min, x_max, y_min, y_max).
    pub bounds: (f64, f64, f64, f64),
    pub min_distance: f64,
    pub nu: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Drag is integrated from here to t_end (left rectangles).
    pub t_start_j: f64,
    pub fd_step: f64,
    pub iterations: usize,
    pub step0: f64,
    pub max_backtracks: usize,
    pub scheme: Scheme,
    pub convection: Convection,
    /// Initial centers and orientations, one pair per obstacle.
    pub initial: Vec<(Point2, f64)>,
}

impl ObstacleOptConfig {
    /// Six-ellipse layout on a 3x2 grid inside the design box.
    pub fn six_obstacles() -> Self {
        let mut initial = Vec::new();
        for &y in &[0.45, 0.65] {
            for &x in &[0.35, 0.6, 0.85] {
                initial.push((Point2::new(x, y), 0.0));
            }
        }
        ObstacleOptConfig {
            n_obstacles: 6,
            rx: 0.05,
            ry: 0.025,
            r_out: 0.13,
            shell_nr: 3,
            shell_ntheta: 32,
            length: 2.0,
            height: 1.5,
            bg_nx: 80,
            bg_ny: 60,
            bounds: (0.3, 0.9, 0.4, 0.7),
            min_distance: 0.183,
            nu: 0.001,
            dt: 0.01,
            t_end: 1.0,
            t_start_j: 0.1,
            fd_step: 1e-3,
            iterations: 10,
            step0: 0.02,
            max_backtracks: 4,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            initial,
        }
    }

    /// Two-obstacle coarse variant sized so a full gradient iteration costs
    /// seconds; the asymmetric start gives nonzero angle gradients at once.
    pub fn two_obstacle_smoke(iterations: usize) -> Self {
        ObstacleOptConfig {
            n_obstacles: 2,
            r_out: 0.2,
            bg_nx: 44,
            bg_ny: 33,
            min_distance: 0.4,
            dt: 0.02,
            t_end: 0.5,
            iterations,
            initial: vec![
                (Point2::new(0.35, 0.48), 0.3),
                (Point2::new(0.82, 0.64), -0.2),
            ],
            ..ObstacleOptConfig::six_obstacles()
        }
    }

    fn bg_diag(&self) -> f64 {
        (self.length / self.bg_nx as f64).hypot(self.height / self.bg_ny as f64)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_obstacles;
        if n == 0 || self.initial.len() != n {
            return Err(Error::InvalidArgument(format!(
                "need one initial placement per obstacle: {} for {n}",
                self.initial.len()
            )));
        }
        if !(self.rx > 0.0 && self.ry > 0.0 && 2.0 * self.ry >= self.rx) {
            return Err(Error::InvalidArgument(format!(
                "hole marking covers the solid only for ry <= rx <= 2 ry, got rx={} ry={}",
                self.rx, self.ry
            )));
        }
        let fd = self.fd_step;
        if !(fd > 0.0 && self.dt > 0.0 && self.t_start_j < self.t_end) {
            return Err(Error::InvalidArgument(
                "need fd_step > 0, dt > 0, t_start_j < t_end".into(),
            ));
        }
        if self.r_out + self.rx + 2.0 * fd > self.min_distance {
            return Err(Error::InvalidArgument(format!(
                "shells may touch a neighboring solid: r_out {} + rx {} + 2 fd {} > d {}",
                self.r_out, self.rx, fd, self.min_distance
            )));
        }
        let reach = self.rx + 2.0 * self.bg_diag() + fd;
        let covered = self.r_out * (PI / self.shell_ntheta as f64).cos();
        if reach > covered {
            return Err(Error::InvalidArgument(format!(
                "background too coarse for the shell: hole marking reaches {reach:.4} \
                 but the shell only covers {covered:.4}"
            )));
        }
        let (l, l1, h, h1) = self.bounds;
        let clear = self.r_out + fd;
        if !(l >= clear && l1 + clear <= self.length && h >= clear && h1 + clear <= self.height)
        {
            return Err(Error::InvalidArgument(
                "design box must keep shells inside the channel".into(),
            ));
        }
        if l1 < l || h1 < h {
            return Err(Error::InvalidArgument("empty design box".into()));
        }
        Ok(())
    }
}

fn center(x: &[f64], i: usize) -> Point2 {
    Point2::new(x[2 * i], x[2 * i + 1])
}

fn theta(x: &[f64], n: usize, i: usize) -> f64 {
    x[2 * n + i]
}

fn flatten(initial: &[(Point2, f64)]) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 * initial.len());
    for (c, _) in initial {
        x.push(c.x);
        x.push(c.y);
    }
    for (_, th) in initial {
        x.push(*th);
    }
    x
}

pub fn feasible(cfg: &ObstacleOptConfig, x: &[f64]) -> bool {
    let n = cfg.n_obstacles;
    let (l, l1, h, h1) = cfg.bounds;
    for i in 0..n {
        let c = center(x, i);
        if c.x < l - 1e-12 || c.x > l1 + 1e-12 || c.y < h - 1e-12 || c.y > h1 + 1e-12 {
            return false;
        }
        for j in 0..i {
            if (c - center(x, j)).norm() < cfg.min_distance - 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Project a design onto the box and pairwise-distance constraints by
/// alternating clamping with symmetric push-apart sweeps; angles wrap to
/// [0, 2π).
pub fn project(cfg: &ObstacleOptConfig, x: &[f64]) -> Result<Vec<f64>> {
    let n = cfg.n_obstacles;
    let (l, l1, h, h1) = cfg.bounds;
    let mut out = x.to_vec();
    for i in 0..n {
        out[2 * n + i] = out[2 * n + i].rem_euclid(TAU);
    }
    for _ in 0..50 {
        for i in 0..n {
            out[2 * i] = out[2 * i].clamp(l, l1);
            out[2 * i + 1] = out[2 * i + 1].clamp(h, h1);
        }
        let mut moved = false;
        for i in 0..n {
            for j in 0..i {
                let ci = center(&out, i);
                let cj = center(&out, j);
                let delta = ci - cj;
                let dist = delta.norm();
                if dist >= cfg.min_distance - 1e-12 {
                    continue;
                }
                let dir = if dist > 1e-12 {
                    Point2::new(delta.x / dist, delta.y / dist)
                } else {
                    Point2::new(1.0, 0.0)
                };
                let shift = 0.5 * (cfg.min_distance - dist);
                out[2 * i] += dir.x * shift;
                out[2 * i + 1] += dir.y * shift;
                out[2 * j] -= dir.x * shift;
                out[2 * j + 1] -= dir.y * shift;
                moved = true;
            }
        }
        if !moved && feasible(cfg, &out) {
            return Ok(out);
        }
    }
    Err(Error::InvalidArgument(
        "constraint projection did not converge; design box too crowded".into(),
    ))
}

fn in_marked_region(p: Point2, c: Point2, th: f64, ax: f64, ay: f64) -> bool {
    let q = (p - c).rotated(-th);
    let sx = q.x / ax;
    let sy = q.y / ay;
    sx * sx + sy * sy < 1.0
}

/// Place the shared shell template at every design position (rigid
/// transforms only — the templates are never re-triangulated), stack it on
/// the channel background, and deactivate the background under each solid.
pub fn build_layout(
    cfg: &ObstacleOptConfig,
    bg: &TriMesh,
    shell: &TriMesh,
    x: &[f64],
) -> Result<MultiMesh> {
    let n = cfg.n_obstacles;
    let mut meshes = vec![bg.clone()];
    for i in 0..n {
        meshes.push(shell.transformed(center(x, i), theta(x, n, i)));
    }
    let mut mm = MultiMesh::build(meshes, 6)?;
    let ax = cfg.rx + 2.0 * cfg.bg_diag();
    let ay = cfg.ry + 2.0 * cfg.bg_diag();
    for i in 0..n {
        let c = center(x, i);
        let th = theta(x, n, i);
        let marked = mm.mark_hole(0, |p| in_marked_region(p, c, th, ax, ay));
        if marked == 0 {
            return Err(Error::InvalidArgument(format!(
                "obstacle {i} marked no background cells; resolution mismatch"
            )));
        }
    }
    Ok(mm)
}

struct Evaluator<'c> {
    cfg: &'c ObstacleOptConfig,
    bg: TriMesh,
    shell: TriMesh,
    evaluations: usize,
}

impl Evaluator<'_> {
    /// Total drag over all obstacles integrated over the observation
    /// window with left rectangles.
    fn j(&mut self, x: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let cfg = self.cfg;
        let mm = Arc::new(build_layout(cfg, &self.bg, &self.shell, x)?);
        let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(2)?));
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1)?));
        let height = cfg.height;
        let problem = Problem {
            space_v: sv.clone(),
            space_q: sq,
            nu: cfg.nu,
            velocity_bcs: vec![
                (
                    INLET,
                    Box::new(move |p, _| {
                        [6.0 * p.y * (height - p.y) / (height * height), 0.0]
                    }),
                ),
                (WALL, Box::new(|_, _| [0.0, 0.0])),
                (OBSTACLE, Box::new(|_, _| [0.0, 0.0])),
            ],
            pressure_dirichlet: vec![OUTLET],
            body_force: None,
        };
        let mut config = IpcsConfig::new(cfg.scheme, cfg.convection, cfg.dt, cfg.t_end);
        config.output_every = 1;
        let mut solver = IpcsSolver::new(&problem, config)?;
        let mut state = solver.initial_state(InitialConditions::SingleLevel {
            u0: MultiMeshFunction::zeros(sv),
            p0: None,
        })?;
        let nu = cfg.nu;
        let dt = cfg.dt;
        let tol = dt * 1e-6;
        let mut j = 0.0;
        solver.run_with(&mut state, |s, p_report, _| {
            if s.t >= cfg.t_start_j - tol && s.t <= cfg.t_end - dt + tol {
                let (cd, _) = drag_lift(&s.u_n, p_report, nu, OBSTACLE, 1.0, 1.0, 0.1)?;
                j += dt * cd;
            }
            Ok(())
        })?;
        Ok(j)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let eps = self.cfg.fd_step;
        let mut g = vec![0.0; x.len()];
        for k in 0..x.len() {
            let mut xp = x.to_vec();
            xp[k] += eps;
            let mut xm = x.to_vec();
            xm[k] -= eps;
            g[k] = (self.j(&xp)? - self.j(&xm)?) / (2.0 * eps);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptTrace {
    /// Objective at the initial design and after each accepted iterate.
    pub j_values: Vec<f64>,
    /// Accepted designs, parallel to `j_values`.
    pub designs: Vec<Vec<f64>>,
    /// Meshes triangulated from scratch: the background and one shell
    /// template, regardless of how many placements were evaluated.
    pub base_meshes_built: usize,
    pub evaluations: usize,
}

/// Projected-gradient ascent on total drag with central finite-difference
/// gradients and step-halving backtracking; stops early when no step
/// improves the objective.
pub fn run_obstacle_opt(cfg: &ObstacleOptConfig) -> Result<OptTrace> {
    cfg.validate()?;
    let mut x = flatten(&cfg.initial);
    if !feasible(cfg, &x) {
        return Err(Error::InvalidArgument(
            "initial layout violates box or distance constraints".into(),
        ));
    }
    let bg = generate_rect_mesh(
        0.0,
        0.0,
        cfg.length,
        cfg.height,
        cfg.bg_nx,
        cfg.bg_ny,
        SideMarkers::channel(),
    )?;
    let shell = generate_shell(cfg.rx, cfg.ry, cfg.r_out, cfg.shell_nr, cfg.shell_ntheta)?;
    let mut ev = Evaluator {
        cfg,
        bg,
        shell,
        evaluations: 0,
    };
    let mut trace = OptTrace {
        base_meshes_built: 2,
        ..OptTrace::default()
    };
    let mut j = ev.j(&x)?;
    trace.j_values.push(j);
    trace.designs.push(x.clone());
    let mut step = cfg.step0;
    'outer: for _ in 0..cfg.iterations {
        let g = ev.gradient(&x)?;
        let mut backtracks = 0;
        loop {
            let xt: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + step * gi).collect();
            let xt = project(cfg, &xt)?;
            let jt = ev.j(&xt)?;
            if jt > j {
                x = xt;
                j = jt;
                step = (step * 1.5).min(0.2);
                break;
            }
            if backtracks == cfg.max_backtracks {
                break 'outer;
            }
            step *= 0.5;
            backtracks += 1;
        }
        trace.j_values.push(j);
        trace.designs.push(x.clone());
    }
    trace.evaluations = ev.evaluations;
    Ok(trace)
}
