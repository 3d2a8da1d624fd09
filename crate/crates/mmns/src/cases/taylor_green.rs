use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{Convection, Scheme};
use crate::error::{Error, Result};
use crate::ipcs::{InitialConditions, IpcsConfig, IpcsSolver, Problem};
use crate::mesh::{generate_rect_mesh, Point2, SideMarkers, OUTER, WALL};
use crate::multimesh::MultiMesh;
use crate::postproc::{errornorm, CaseReport, ErrorRecord, NormSpec, SpaceTimeNorm, Timings};
use crate::space::{Element, FunctionSpace, MultiMeshFunction};

/// Decaying vortex array on [-1,1]^2 with periodic structure, used as an
/// exact solution: div u = 0, and with this pressure the momentum residual
/// vanishes for f = 0.
pub fn velocity(p: Point2, t: f64, nu: f64) -> [f64; 2] {
    let e = (-2.0 * PI * PI * nu * t).exp();
    [
        -(PI * p.x).cos() * (PI * p.y).sin() * e,
        (PI * p.x).sin() * (PI * p.y).cos() * e,
    ]
}

pub fn velocity_gradient(p: Point2, t: f64, nu: f64) -> [[f64; 2]; 2] {
    let e = (-2.0 * PI * PI * nu * t).exp();
    let (sx, cx) = (PI * p.x).sin_cos();
    let (sy, cy) = (PI * p.y).sin_cos();
    [
        [PI * sx * sy * e, -PI * cx * cy * e],
        [PI * cx * cy * e, -PI * sx * sy * e],
    ]
}

pub fn pressure(p: Point2, t: f64, nu: f64) -> f64 {
    let e = (-4.0 * PI * PI * nu * t).exp();
    -0.25 * ((2.0 * PI * p.x).cos() + (2.0 * PI * p.y).cos()) * e
}

/// Stack of up to three overlapping meshes on the vortex domain: the
/// background square plus two rotated interior rectangles whose coarsest
/// cell diameters are roughly 0.26, 0.17, and 0.26. `level` halves every
/// cell size.
pub fn build_stack(level: usize, n_meshes: usize, quad_degree: usize) -> Result<MultiMesh> {
    if !(1..=3).contains(&n_meshes) {
        return Err(Error::InvalidArgument(format!(
            "stack supports 1 to 3 meshes, got {n_meshes}"
        )));
    }
    let s = 1usize << level;
    let bg = generate_rect_mesh(-1.0, -1.0, 1.0, 1.0, 11 * s, 11 * s, SideMarkers::all(WALL))?;
    let mut meshes = vec![bg];
    if n_meshes >= 2 {
        let m = generate_rect_mesh(-0.6, -0.45, 0.1, 0.3, 6 * s, 6 * s, SideMarkers::all(OUTER))?;
        meshes.push(m.transformed(Point2::default(), 10f64.to_radians()));
    }
    if n_meshes >= 3 {
        let m = generate_rect_mesh(-0.15, -0.1, 0.62, 0.58, 4 * s, 4 * s, SideMarkers::all(OUTER))?;
        meshes.push(m.transformed(Point2::default(), (-15f64).to_radians()));
    }
    MultiMesh::build(meshes, quad_degree)
}

#[derive(Debug, Clone, Copy)]
pub struct TaylorGreenConfig {
    pub scheme: Scheme,
    pub convection: Convection,
    pub degree_v: usize,
    pub degree_q: usize,
    pub nu: f64,
    pub dt0: f64,
    pub t_end: f64,
    /// Spatial refinements beyond the coarsest stack (levels 0..=levels_x).
    pub levels_x: usize,
    /// Time-step halvings beyond dt0 (levels 0..=levels_t).
    pub levels_t: usize,
    pub n_meshes: usize,
}

impl TaylorGreenConfig {
    /// Spatial-rate study: quadratic velocity with linear pressure, marching
    /// at a time step small enough for spatial error to dominate.
    pub fn spatial_study(scheme: Scheme, convection: Convection) -> Self {
        TaylorGreenConfig {
            scheme,
            convection,
            degree_v: 2,
            degree_q: 1,
            nu: 0.01,
            dt0: 0.0125,
            t_end: 1.0,
            levels_x: 2,
            levels_t: 0,
            n_meshes: 3,
        }
    }

    /// Temporal-rate study: quartic velocity with cubic pressure on the
    /// coarsest stack, so the time discretization dominates the error.
    pub fn temporal_study(scheme: Scheme, convection: Convection) -> Self {
        TaylorGreenConfig {
            scheme,
            convection,
            degree_v: 4,
            degree_q: 3,
            nu: 0.01,
            dt0: 0.5,
            t_end: 6.0,
            levels_x: 0,
            levels_t: 3,
            n_meshes: 3,
        }
    }
}

/// Run the vortex-decay convergence study over the configured level grid,
/// accumulating space-time error norms against the exact solution.
pub fn run_taylor_green(cfg: &TaylorGreenConfig) -> Result<CaseReport> {
    let mut errors = Vec::new();
    let mut timings = Timings::default();
    let nu = cfg.nu;
    for lx in 0..=cfg.levels_x {
        let tb = Instant::now();
        let mm = Arc::new(build_stack(lx, cfg.n_meshes, 2 * cfg.degree_v + 2)?);
        let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(cfg.degree_v)?));
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(cfg.degree_q)?));
        timings.mesh_build += tb.elapsed().as_secs_f64();
        let problem = Problem {
            space_v: sv.clone(),
            space_q: sq.clone(),
            nu,
            velocity_bcs: vec![(WALL, Box::new(move |p, t| velocity(p, t, nu)))],
            pressure_dirichlet: vec![],
            body_force: None,
        };
        for lt in 0..=cfg.levels_t {
            let dt = cfg.dt0 / (1u32 << lt) as f64;
            let mut config = IpcsConfig::new(cfg.scheme, cfg.convection, dt, cfg.t_end);
            config.output_every = 1;
            let mut solver = IpcsSolver::new(&problem, config)?;
            let p_time = match cfg.scheme {
                Scheme::Cn => -0.5 * dt,
                Scheme::Bdf2 => 0.0,
            };
            let init = InitialConditions::TwoLevels {
                u_n: MultiMeshFunction::interpolate(sv.clone(), |p| velocity(p, 0.0, nu)),
                u_prev: MultiMeshFunction::interpolate(sv.clone(), |p| velocity(p, -dt, nu)),
                p: MultiMeshFunction::interpolate_scalar(sq.clone(), |p| pressure(p, p_time, nu)),
            };
            let mut state = solver.initial_state(init)?;
            let mut st_u = SpaceTimeNorm::default();
            let mut st_h1 = SpaceTimeNorm::default();
            let mut st_p = SpaceTimeNorm::default();
            let mut last = (0.0, 0.0, 0.0);
            solver.run_with(&mut state, |s, p_report, _| {
                let t = s.t;
                let ex_u = move |q: Point2| velocity(q, t, nu);
                let ex_g = move |q: Point2| velocity_gradient(q, t, nu);
                let ex_p = move |q: Point2| [pressure(q, t, nu), 0.0];
                let eu = errornorm(&s.u_n, NormSpec::L2(&ex_u));
                let eg = errornorm(&s.u_n, NormSpec::H1Semi(&ex_g));
                let mut pr = p_report.clone();
                pr.subtract_mean();
                let ep = errornorm(&pr, NormSpec::L2(&ex_p));
                st_u.add(dt, eu);
                st_h1.add(dt, eg);
                st_p.add(dt, ep);
                last = (eu, eg, ep);
                Ok(())
            })?;
            timings.merge(&solver.timings);
            errors.push(ErrorRecord {
                level_x: lx,
                level_t: lt,
                velocity_l2: st_u.value(),
                velocity_h1: st_h1.value(),
                pressure_l2: st_p.value(),
                final_velocity_l2: last.0,
                final_velocity_h1: last.1,
                final_pressure_l2: last.2,
            });
        }
    }
    Ok(CaseReport {
        rows: Vec::new(),
        errors,
        timings,
    })
}
