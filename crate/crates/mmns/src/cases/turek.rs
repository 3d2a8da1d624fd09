use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{Convection, Scheme};
use crate::error::Result;
use crate::ipcs::{InitialConditions, IpcsConfig, IpcsSolver, Problem};
use crate::mesh::{
    generate_annulus_mesh_graded, generate_rect_mesh, Point2, SideMarkers, INLET, OBSTACLE, WALL,
};
use crate::multimesh::MultiMesh;
use crate::postproc::{
    compare_series, pressure_difference, read_time_series, drag_lift, CaseReport, SeriesDeviation,
    TimeSeriesRow, Timings,
};
use crate::space::{Element, FunctionSpace, MultiMeshFunction};

pub const CHANNEL_LENGTH: f64 = 2.2;
pub const CHANNEL_HEIGHT: f64 = 0.41;
pub const CYLINDER_CENTER: Point2 = Point2 { x: 0.2, y: 0.2 };
pub const CYLINDER_RADIUS: f64 = 0.05;
pub const PROBE_FRONT: Point2 = Point2 { x: 0.15, y: 0.2 };
pub const PROBE_BACK: Point2 = Point2 { x: 0.25, y: 0.2 };

const RING_OUTER: f64 = 0.15;
const HOLE_RADIUS: f64 = 0.1;

/// Parabolic inflow ramped by a half sine over the 8 s window; the mean
/// over the inlet is exactly sin(πt/8), so U_mean = 1 at peak.
pub fn inflow_velocity(y: f64, t: f64) -> [f64; 2] {
    let h = CHANNEL_HEIGHT;
    [
        4.0 * 1.5 * (PI * t / 8.0).sin() * y * (h - y) / (h * h),
        0.0,
    ]
}

/// Ring radii graded geometrically toward the cylinder so the first layer
/// resolves the boundary layer; refining splits every span in half.
fn ring_radii(refine: usize) -> Vec<f64> {
    let s = 1usize << refine;
    let width = RING_OUTER - CYLINDER_RADIUS;
    let mut radii = vec![CYLINDER_RADIUS];
    let mut r = CYLINDER_RADIUS;
    for l in 0..5u32 {
        let span = width * (1u32 << l) as f64 / 31.0;
        for k in 1..=s {
            radii.push(r + span * k as f64 / s as f64);
        }
        r += span;
    }
    radii
}

/// Channel/cylinder stack: background channel grid plus an annular ring
/// around the cylinder carrying its boundary. Background cells inside the
/// hole radius are deactivated; the ring is wide enough that every cell
/// bordering the hole stays fully covered, so the hole boundary never
/// meets a visible background region.
pub fn geometry(refine: usize) -> Result<MultiMesh> {
    let s = 1usize << refine;
    let bg = generate_rect_mesh(
        0.0,
        0.0,
        CHANNEL_LENGTH,
        CHANNEL_HEIGHT,
        91 * s,
        17 * s,
        SideMarkers::channel(),
    )?;
    let ring = generate_annulus_mesh_graded(CYLINDER_CENTER, &ring_radii(refine), 48 * s, 1.0)?;
    let mut mm = MultiMesh::build(vec![bg, ring], 6)?;
    let marked = mm.mark_hole(0, |p| (p - CYLINDER_CENTER).norm() < HOLE_RADIUS);
    assert!(marked > 0);
    Ok(mm)
}

#[derive(Debug, Clone, Copy)]
pub struct TurekConfig {
    pub refine: usize,
    pub scheme: Scheme,
    pub convection: Convection,
    pub dt: f64,
    pub t_end: f64,
    pub nu: f64,
    /// Row cadence in steps; 0 records only the final step.
    pub output_every: usize,
}

impl TurekConfig {
    pub fn benchmark(scheme: Scheme, convection: Convection) -> Self {
        let dt = match scheme {
            Scheme::Cn => 1.0 / 1600.0,
            Scheme::Bdf2 => 1.0 / 2000.0,
        };
        TurekConfig {
            refine: 0,
            scheme,
            convection,
            dt,
            t_end: 8.0,
            nu: 0.001,
            output_every: 1,
        }
    }
}

/// Run the cylinder benchmark from rest, recording drag/lift coefficients
/// and the front/back pressure difference each observed step; when a
/// reference series is given, also report the deviation from it.
pub fn run_turek(
    cfg: &TurekConfig,
    reference: Option<&Path>,
) -> Result<(CaseReport, Option<SeriesDeviation>)> {
    let mut timings = Timings::default();
    let tb = Instant::now();
    let mm = Arc::new(geometry(cfg.refine)?);
    let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(2)?));
    let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1)?));
    timings.mesh_build += tb.elapsed().as_secs_f64();
    let nu = cfg.nu;
    let problem = Problem {
        space_v: sv.clone(),
        space_q: sq.clone(),
        nu,
        velocity_bcs: vec![
            (INLET, Box::new(|p, t| inflow_velocity(p.y, t))),
            (WALL, Box::new(|_, _| [0.0, 0.0])),
            (OBSTACLE, Box::new(|_, _| [0.0, 0.0])),
        ],
        pressure_dirichlet: vec![crate::mesh::OUTLET],
        body_force: None,
    };
    let mut config = IpcsConfig::new(cfg.scheme, cfg.convection, cfg.dt, cfg.t_end);
    config.output_every = cfg.output_every;
    let mut solver = IpcsSolver::new(&problem, config)?;
    let init = InitialConditions::SingleLevel {
        u0: MultiMeshFunction::zeros(sv.clone()),
        p0: None,
    };
    let mut state = solver.initial_state(init)?;
    let mut rows = Vec::new();
    solver.run_with(&mut state, |s, p_report, _| {
        let (cd, cl) = drag_lift(&s.u_n, p_report, nu, OBSTACLE, 1.0, 1.0, 0.1)?;
        let dp = pressure_difference(p_report, PROBE_FRONT, PROBE_BACK)?;
        rows.push(TimeSeriesRow { t: s.t, cd, cl, dp });
        Ok(())
    })?;
    timings.merge(&solver.timings);
    let deviation = match reference {
        Some(path) => Some(compare_series(&rows, &read_time_series(path)?)?),
        None => None,
    };
    let report = CaseReport {
        rows,
        errors: Vec::new(),
        timings,
    };
    Ok((report, deviation))
}
