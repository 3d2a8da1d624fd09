use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::assembly::{
    assemble_divergence_rhs, assemble_initial_pressure, assemble_pressure_operator,
    assemble_tentative, assemble_tentative_rhs, assemble_update_operator, assemble_update_rhs,
    pressure_rhs_factor, reassemble_tentative, update_gradient_factor, Convection, FormContext,
    Scheme, SpdSystem, StabilizationParams,
};
use crate::error::{Error, Result};
use crate::linalg::{solve, SolverSpec};
use crate::mesh::Point2;
use crate::postproc::{divergence_l2, Timings};
use crate::space::{FunctionSpace, MultiMeshFunction};

pub type TimeField = Box<dyn Fn(Point2, f64) -> [f64; 2] + Sync>;

/// Flow problem on a multimesh stack: spaces, viscosity, boundary data, and
/// an optional body force. Velocity conditions are (marker, value) pairs;
/// dofs shared between two marked boundaries take the first listed value.
/// Pressure markers select the boundaries where the correction is pinned to
/// zero (an outflow); with none listed the pressure is determined up to its
/// mean and the solver deflates the constant mode instead.
pub struct Problem {
    pub space_v: Arc<FunctionSpace>,
    pub space_q: Arc<FunctionSpace>,
    pub nu: f64,
    pub velocity_bcs: Vec<(i32, TimeField)>,
    pub pressure_dirichlet: Vec<i32>,
    pub body_force: Option<TimeField>,
}

impl Problem {
    fn validate(&self) -> Result<()> {
        if !Arc::ptr_eq(&self.space_v.mm, &self.space_q.mm) {
            return Err(Error::InvalidArgument(
                "velocity and pressure spaces must share one mesh stack".into(),
            ));
        }
        if self.space_v.element.value_size != 2 || self.space_q.element.value_size != 1 {
            return Err(Error::InvalidArgument(
                "need a vector velocity space and a scalar pressure space".into(),
            ));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "viscosity must be positive, got {}",
                self.nu
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IpcsConfig {
    pub scheme: Scheme,
    pub convection: Convection,
    pub dt: f64,
    pub t_end: f64,
    pub params: StabilizationParams,
    pub tentative_solver: SolverSpec,
    pub pressure_solver: SolverSpec,
    pub update_solver: SolverSpec,
    /// Observer cadence in steps; 0 restricts observation to the final step.
    pub output_every: usize,
}

impl IpcsConfig {
    pub fn new(scheme: Scheme, convection: Convection, dt: f64, t_end: f64) -> Self {
        IpcsConfig {
            scheme,
            convection,
            dt,
            t_end,
            params: StabilizationParams::default(),
            tentative_solver: SolverSpec::bicgstab(1e-10),
            pressure_solver: SolverSpec::cg(1e-10),
            update_solver: SolverSpec::cg(1e-10),
            output_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time step must be positive, got {}",
                self.dt
            )));
        }
        if self.t_end < self.dt * (1.0 - 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "end time {} is shorter than one step {}",
                self.t_end, self.dt
            )));
        }
        self.params.validate()
    }
}

/// Discrete state between steps: the two velocity history levels, the
/// accumulated pressure, and the clock. For Crank-Nicolson the stored
/// pressure lives at the half step behind `t`.
#[derive(Clone)]
pub struct IpcsState {
    pub u_n: MultiMeshFunction,
    pub u_prev: Option<MultiMeshFunction>,
    pub p: MultiMeshFunction,
    pub t: f64,
    pub step_index: usize,
    pub needs_bootstrap: bool,
}

/// How a run starts: two velocity levels with a matching pressure, or a
/// single level whose first step then runs the implicit-Euler bootstrap.
pub enum InitialConditions {
    TwoLevels {
        u_n: MultiMeshFunction,
        u_prev: MultiMeshFunction,
        p: MultiMeshFunction,
    },
    SingleLevel {
        u0: MultiMeshFunction,
        /// Starting pressure; `None` solves the pressure Poisson problem
        /// consistent with `u0` and the body force at t = 0.
        p0: Option<MultiMeshFunction>,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub step_index: usize,
    pub t: f64,
    pub tentative_iterations: usize,
    pub pressure_iterations: usize,
    pub update_iterations: usize,
    pub divergence_tentative: f64,
    pub divergence_corrected: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MatrixKind {
    Bootstrap,
    Main,
}

/// Incremental pressure-correction stepper. Matrices whose values survive
/// between steps are cached: the tentative operator is rebuilt in place
/// (implicit convection) or reused verbatim (explicit convection), and the
/// two SPD systems are factor-free and constant, so Krylov solves start from
/// the previous step's solution.
pub struct IpcsSolver<'p> {
    problem: &'p Problem,
    pub config: IpcsConfig,
    vel_dirichlet: Vec<(usize, Point2, usize)>,
    tentative: Option<(crate::linalg::SparseMatrix, MatrixKind)>,
    pressure_sys: SpdSystem,
    update_sys: SpdSystem,
    last_u_star: Option<Vec<f64>>,
    last_phi: Option<Vec<f64>>,
    cn_extrapolate: bool,
    h_min: f64,
    cfl_warned: bool,
    pub timings: Timings,
}

impl<'p> IpcsSolver<'p> {
    pub fn new(problem: &'p Problem, config: IpcsConfig) -> Result<IpcsSolver<'p>> {
        problem.validate()?;
        config.validate()?;
        let space_v = &problem.space_v;
        let space_q = &problem.space_q;

        let mut seen = vec![false; space_v.n_dofs];
        let mut vel_dirichlet = Vec::new();
        for (idx, (marker, _)) in problem.velocity_bcs.iter().enumerate() {
            for (dof, pos) in space_v.dirichlet_dofs(*marker)? {
                if !seen[dof] {
                    seen[dof] = true;
                    vel_dirichlet.push((dof, pos, idx));
                }
            }
        }
        vel_dirichlet.sort_unstable_by_key(|&(dof, _, _)| dof);

        let mut phi_dofs = Vec::new();
        for marker in &problem.pressure_dirichlet {
            for (dof, _) in space_q.dirichlet_dofs(*marker)? {
                phi_dofs.push(dof);
            }
        }
        phi_dofs.sort_unstable();
        phi_dofs.dedup();

        let pressure_sys = SpdSystem::constrain(
            assemble_pressure_operator(space_q, &config.params),
            &phi_dofs,
            &space_q.active,
        );
        let vel_dofs: Vec<usize> = vel_dirichlet.iter().map(|&(d, _, _)| d).collect();
        let mut update_sys = SpdSystem::constrain(
            assemble_update_operator(space_v, config.params.beta_p),
            &vel_dofs,
            &space_v.active,
        );
        update_sys.deflate = false;

        let mm = &space_v.mm;
        let mut h_min = f64::INFINITY;
        for m in 0..mm.num_meshes() {
            for ci in 0..mm.meshes[m].num_cells() {
                if mm.statuses[m][ci].is_active() {
                    h_min = h_min.min(mm.meshes[m].cell_diameter(ci));
                }
            }
        }

        Ok(IpcsSolver {
            problem,
            config,
            vel_dirichlet,
            tentative: None,
            pressure_sys,
            update_sys,
            last_u_star: None,
            last_phi: None,
            cn_extrapolate: false,
            h_min,
            cfl_warned: false,
            timings: Timings::default(),
        })
    }

    /// Dirichlet velocity values at time `t`, one entry per constrained dof.
    pub fn dirichlet_values(&self, t: f64) -> Vec<(usize, f64)> {
        self.vel_dirichlet
            .iter()
            .map(|&(dof, pos, idx)| {
                let g = (self.problem.velocity_bcs[idx].1)(pos, t);
                (dof, g[dof % 2])
            })
            .collect()
    }

    /// Build the starting state, solving for a consistent initial pressure
    /// when none is supplied.
    pub fn initial_state(&mut self, init: InitialConditions) -> Result<IpcsState> {
        match init {
            InitialConditions::TwoLevels { u_n, u_prev, p } => {
                self.check_spaces(&u_n, &p)?;
                self.check_spaces(&u_prev, &p)?;
                Ok(IpcsState {
                    u_n,
                    u_prev: Some(u_prev),
                    p,
                    t: 0.0,
                    step_index: 0,
                    needs_bootstrap: false,
                })
            }
            InitialConditions::SingleLevel { u0, p0 } => {
                self.check_velocity(&u0)?;
                let p = match p0 {
                    Some(p) => {
                        self.check_pressure(&p)?;
                        p
                    }
                    None => self.solve_initial_pressure(&u0)?,
                };
                Ok(IpcsState {
                    u_n: u0,
                    u_prev: None,
                    p,
                    t: 0.0,
                    step_index: 0,
                    needs_bootstrap: true,
                })
            }
        }
    }

    fn check_velocity(&self, u: &MultiMeshFunction) -> Result<()> {
        if !Arc::ptr_eq(&u.space, &self.problem.space_v) {
            return Err(Error::InvalidArgument(
                "initial velocity must live on the problem's velocity space".into(),
            ));
        }
        Ok(())
    }

    fn check_pressure(&self, p: &MultiMeshFunction) -> Result<()> {
        if !Arc::ptr_eq(&p.space, &self.problem.space_q) {
            return Err(Error::InvalidArgument(
                "initial pressure must live on the problem's pressure space".into(),
            ));
        }
        Ok(())
    }

    fn check_spaces(&self, u: &MultiMeshFunction, p: &MultiMeshFunction) -> Result<()> {
        self.check_velocity(u)?;
        self.check_pressure(p)
    }

    fn solve_initial_pressure(&mut self, u0: &MultiMeshFunction) -> Result<MultiMeshFunction> {
        let space_q = &self.problem.space_q;
        let bf = self.problem.body_force.as_ref();
        let bound;
        let bf_ref: Option<&(dyn Fn(Point2) -> [f64; 2] + Sync)> = match bf {
            Some(f) => {
                bound = move |x: Point2| f(x, 0.0);
                Some(&bound)
            }
            None => None,
        };
        let mut dirichlet = Vec::new();
        for marker in &self.problem.pressure_dirichlet {
            for (dof, _) in space_q.dirichlet_dofs(*marker)? {
                dirichlet.push((dof, 0.0));
            }
        }
        dirichlet.sort_unstable_by_key(|&(d, _)| d);
        dirichlet.dedup_by_key(|&mut (d, _)| d);
        let t0 = Instant::now();
        let (sys, rhs) =
            assemble_initial_pressure(space_q, u0, bf_ref, self.problem.nu, &self.config.params, &dirichlet)?;
        self.timings.assemble_pressure += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let res = solve(&sys.matrix, &rhs, &self.config.pressure_solver, None)?;
        self.timings.solve_pressure += t1.elapsed().as_secs_f64();
        let mut p = MultiMeshFunction {
            space: space_q.clone(),
            coeffs: res.x,
        };
        p.zero_inactive();
        if sys.deflate {
            p.subtract_mean();
        }
        Ok(p)
    }

    /// Advance one step: tentative velocity, pressure correction, velocity
    /// update, then roll the history.
    pub fn step(&mut self, state: &mut IpcsState) -> Result<StepStats> {
        let dt = self.config.dt;
        let bootstrap = state.needs_bootstrap;
        let t_next = state.t + dt;
        let force_time = match (self.config.scheme, bootstrap) {
            (Scheme::Cn, false) => state.t + 0.5 * dt,
            _ => t_next,
        };
        let bf = self.problem.body_force.as_ref();
        let bound;
        let bf_ref: Option<&(dyn Fn(Point2) -> [f64; 2] + Sync)> = match bf {
            Some(f) => {
                bound = move |x: Point2| f(x, force_time);
                Some(&bound)
            }
            None => None,
        };
        let ctx = FormContext {
            nu: self.problem.nu,
            dt,
            scheme: self.config.scheme,
            convection: self.config.convection,
            bootstrap,
            u_n: &state.u_n,
            u_prev: state.u_prev.as_ref(),
            p_n: &state.p,
            body_force: bf_ref,
        };
        let dirichlet = self.dirichlet_values(t_next);
        let kind = if bootstrap {
            MatrixKind::Bootstrap
        } else {
            MatrixKind::Main
        };

        let t0 = Instant::now();
        let need_new = match &self.tentative {
            Some((_, k)) => *k != kind,
            None => true,
        };
        let rhs = if need_new {
            let (a, rhs) = assemble_tentative(&ctx, &self.config.params, &dirichlet)?;
            self.tentative = Some((a, kind));
            rhs
        } else {
            let (a, _) = self.tentative.as_mut().unwrap();
            match self.config.convection {
                Convection::Explicit => assemble_tentative_rhs(&ctx, &self.config.params, &dirichlet)?,
                Convection::Implicit => reassemble_tentative(a, &ctx, &self.config.params, &dirichlet)?,
            }
        };
        self.timings.assemble_tentative += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let a = &self.tentative.as_ref().unwrap().0;
        let warm = self.last_u_star.as_deref().unwrap_or(&state.u_n.coeffs);
        let res = solve(a, &rhs, &self.config.tentative_solver, Some(warm))?;
        self.timings.solve_tentative += t1.elapsed().as_secs_f64();
        let tentative_iterations = res.iterations;
        let mut u_star = MultiMeshFunction {
            space: self.problem.space_v.clone(),
            coeffs: res.x,
        };
        u_star.zero_inactive();
        let divergence_tentative = divergence_l2(&u_star);

        let t2 = Instant::now();
        let coef = pressure_rhs_factor(self.config.scheme, bootstrap, dt);
        let space_q = &self.problem.space_q;
        let mut rhs_p = assemble_divergence_rhs(space_q, &u_star, coef);
        let zeros = vec![0.0; space_q.n_dofs];
        self.pressure_sys.finish_rhs(&mut rhs_p, &zeros);
        self.timings.assemble_pressure += t2.elapsed().as_secs_f64();
        let t3 = Instant::now();
        let res = solve(
            &self.pressure_sys.matrix,
            &rhs_p,
            &self.config.pressure_solver,
            self.last_phi.as_deref(),
        )?;
        self.timings.solve_pressure += t3.elapsed().as_secs_f64();
        let pressure_iterations = res.iterations;
        let mut phi = MultiMeshFunction {
            space: space_q.clone(),
            coeffs: res.x,
        };
        phi.zero_inactive();
        if self.pressure_sys.deflate {
            phi.subtract_mean();
        }

        for (pc, &fc) in state.p.coeffs.iter_mut().zip(&phi.coeffs) {
            *pc += fc;
        }

        let t4 = Instant::now();
        let space_v = &self.problem.space_v;
        let grad_factor = update_gradient_factor(self.config.scheme, bootstrap, dt);
        let mut rhs_u = assemble_update_rhs(space_v, &u_star, &phi, grad_factor);
        let mut bc = vec![0.0; space_v.n_dofs];
        for &(d, g) in &dirichlet {
            bc[d] = g;
        }
        self.update_sys.finish_rhs(&mut rhs_u, &bc);
        self.timings.assemble_update += t4.elapsed().as_secs_f64();
        let t5 = Instant::now();
        let res = solve(
            &self.update_sys.matrix,
            &rhs_u,
            &self.config.update_solver,
            Some(&u_star.coeffs),
        )?;
        self.timings.solve_update += t5.elapsed().as_secs_f64();
        let update_iterations = res.iterations;
        let mut u_new = MultiMeshFunction {
            space: space_v.clone(),
            coeffs: res.x,
        };
        u_new.zero_inactive();
        let divergence_corrected = divergence_l2(&u_new);

        if self.config.convection == Convection::Explicit && !self.cfl_warned {
            let vmax = u_new
                .coeffs
                .chunks_exact(2)
                .map(|c| (c[0] * c[0] + c[1] * c[1]).sqrt())
                .fold(0.0f64, f64::max);
            if vmax * dt / self.h_min > 1.0 {
                eprintln!(
                    "warning: explicit convection at CFL {:.2} (max |u| = {:.3}, dt = {}, h_min = {:.4}); expect instability",
                    vmax * dt / self.h_min,
                    vmax,
                    dt,
                    self.h_min
                );
                self.cfl_warned = true;
            }
        }

        state.u_prev = Some(std::mem::replace(&mut state.u_n, u_new));
        state.t = t_next;
        state.step_index += 1;
        state.needs_bootstrap = false;
        self.cn_extrapolate = self.config.scheme == Scheme::Cn && !bootstrap;
        self.last_u_star = Some(u_star.coeffs);
        self.last_phi = Some(phi.coeffs);
        self.timings.steps += 1;

        Ok(StepStats {
            step_index: state.step_index,
            t: state.t,
            tentative_iterations,
            pressure_iterations,
            update_iterations,
            divergence_tentative,
            divergence_corrected,
        })
    }

    /// Pressure at the state's integer time: the stored field for the
    /// two-level scheme, a half-step extrapolation for Crank-Nicolson once
    /// a full step's correction is available.
    pub fn report_pressure(&self, state: &IpcsState) -> MultiMeshFunction {
        let mut p = state.p.clone();
        if self.cn_extrapolate {
            if let Some(phi) = &self.last_phi {
                for (pc, &fc) in p.coeffs.iter_mut().zip(phi) {
                    *pc += 0.5 * fc;
                }
            }
        }
        p
    }

    pub fn last_correction(&self) -> Option<&[f64]> {
        self.last_phi.as_deref()
    }

    pub fn cfl_warning_issued(&self) -> bool {
        self.cfl_warned
    }

    /// March from `state.t` to the configured end time, invoking the
    /// observer per the output cadence and always on the final step.
    pub fn run_with(
        &mut self,
        state: &mut IpcsState,
        mut observer: impl FnMut(&IpcsState, &MultiMeshFunction, &StepStats) -> Result<()>,
    ) -> Result<()> {
        let remaining = self.config.t_end - state.t;
        let n_steps = (remaining / self.config.dt).round() as i64;
        if n_steps < 1 {
            return Err(Error::InvalidArgument(format!(
                "nothing to run: t = {} already reaches t_end = {}",
                state.t, self.config.t_end
            )));
        }
        for k in 0..n_steps {
            let stats = self.step(state)?;
            let last = k == n_steps - 1;
            let cadence = self.config.output_every > 0
                && state.step_index % self.config.output_every == 0;
            if cadence || last {
                let p_report = self.report_pressure(state);
                observer(state, &p_report, &stats)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, state: &mut IpcsState) -> Result<()> {
        self.run_with(state, |_, _, _| Ok(()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MMNSCP01";

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a state to a little-endian binary checkpoint.
pub fn write_checkpoint(state: &IpcsState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(state.needs_bootstrap as u8);
    buf.push(state.u_prev.is_some() as u8);
    buf.extend_from_slice(&(state.step_index as u64).to_le_bytes());
    buf.extend_from_slice(&state.t.to_le_bytes());
    buf.extend_from_slice(&(state.u_n.coeffs.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(state.p.coeffs.len() as u64).to_le_bytes());
    push_f64s(&mut buf, &state.u_n.coeffs);
    if let Some(u_prev) = &state.u_prev {
        push_f64s(&mut buf, &u_prev.coeffs);
    }
    push_f64s(&mut buf, &state.p.coeffs);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} is truncated",
                self.path.display()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Restore a state written by `write_checkpoint` onto the given spaces.
pub fn read_checkpoint(
    path: &Path,
    space_v: &Arc<FunctionSpace>,
    space_q: &Arc<FunctionSpace>,
) -> Result<IpcsState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let needs_bootstrap = cur.take(1)?[0] != 0;
    let has_prev = cur.take(1)?[0] != 0;
    let step_index = cur.u64()? as usize;
    let t = cur.f64()?;
    let nv = cur.u64()? as usize;
    let nq = cur.u64()? as usize;
    if nv != space_v.n_dofs || nq != space_q.n_dofs {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} holds {nv} velocity and {nq} pressure dofs, spaces have {} and {}",
            path.display(),
            space_v.n_dofs,
            space_q.n_dofs
        )));
    }
    let u_n = MultiMeshFunction {
        space: space_v.clone(),
        coeffs: cur.f64s(nv)?,
    };
    let u_prev = if has_prev {
        Some(MultiMeshFunction {
            space: space_v.clone(),
            coeffs: cur.f64s(nv)?,
        })
    } else {
        None
    };
    let p = MultiMeshFunction {
        space: space_q.clone(),
        coeffs: cur.f64s(nq)?,
    };
    if cur.pos != data.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            data.len() - cur.pos
        )));
    }
    Ok(IpcsState {
        u_n,
        u_prev,
        p,
        t,
        step_index,
        needs_bootstrap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_rect_mesh, SideMarkers, INLET, OUTER, OUTLET, WALL};
    use crate::multimesh::MultiMesh;
    use crate::space::Element;
    use approx::assert_abs_diff_eq;

    fn channel_stack() -> Arc<MultiMesh> {
        let bg = generate_rect_mesh(0.0, 0.0, 1.0, 1.0, 6, 6, SideMarkers::channel()).unwrap();
        let top =
            generate_rect_mesh(0.28, 0.33, 0.71, 0.74, 3, 3, SideMarkers::all(OUTER)).unwrap();
        Arc::new(MultiMesh::build(vec![bg, top], 6).unwrap())
    }

    fn taylor_hood(mm: Arc<MultiMesh>) -> (Arc<FunctionSpace>, Arc<FunctionSpace>) {
        let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(2).unwrap()));
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1).unwrap()));
        (sv, sq)
    }

    fn still_channel(sv: &Arc<FunctionSpace>, sq: &Arc<FunctionSpace>) -> Problem {
        Problem {
            space_v: sv.clone(),
            space_q: sq.clone(),
            nu: 0.02,
            velocity_bcs: vec![
                (INLET, Box::new(|_, _| [0.0, 0.0]) as TimeField),
                (WALL, Box::new(|_, _| [0.0, 0.0]) as TimeField),
            ],
            pressure_dirichlet: vec![OUTLET],
            body_force: None,
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = still_channel(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.05, 0.15);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let init = InitialConditions::SingleLevel {
            u0: MultiMeshFunction::zeros(sv.clone()),
            p0: None,
        };
        let mut state = solver.initial_state(init).unwrap();
        assert!(state.p.coeffs.iter().all(|&v| v.abs() < 1e-12));
        solver.run(&mut state).unwrap();
        assert_eq!(state.step_index, 3);
        assert_abs_diff_eq!(state.t, 0.15, epsilon = 1e-12);
        assert!(state.u_n.coeffs.iter().all(|&v| v.abs() < 1e-10));
        assert!(state.p.coeffs.iter().all(|&v| v.abs() < 1e-10));
        assert!(!state.needs_bootstrap);
        assert!(state.u_prev.is_some());
    }

    #[test]
    fn end_time_of_one_step_runs_exactly_one_step() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = still_channel(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Bdf2, Convection::Explicit, 0.05, 0.05);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        let mut calls = 0;
        solver
            .run_with(&mut state, |s, _, stats| {
                calls += 1;
                assert_eq!(s.step_index, 1);
                assert_eq!(stats.step_index, 1);
                Ok(())
            })
            .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(state.step_index, 1);
    }

    #[test]
    fn observer_cadence_zero_fires_only_at_the_end() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = still_channel(&sv, &sq);
        let mut config = IpcsConfig::new(Scheme::Bdf2, Convection::Explicit, 0.05, 0.25);
        config.output_every = 0;
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        let mut seen = Vec::new();
        solver
            .run_with(&mut state, |s, _, _| {
                seen.push(s.step_index);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, vec![5]);

        let mut config2 = IpcsConfig::new(Scheme::Bdf2, Convection::Explicit, 0.05, 0.25);
        config2.output_every = 2;
        let mut solver2 = IpcsSolver::new(&problem, config2).unwrap();
        let mut state2 = solver2
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        let mut seen2 = Vec::new();
        solver2
            .run_with(&mut state2, |s, _, _| {
                seen2.push(s.step_index);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen2, vec![2, 4, 5]);
    }

    fn lid_driven(sv: &Arc<FunctionSpace>, sq: &Arc<FunctionSpace>) -> Problem {
        Problem {
            space_v: sv.clone(),
            space_q: sq.clone(),
            nu: 0.05,
            velocity_bcs: vec![
                (
                    INLET,
                    Box::new(|p: Point2, _| [4.0 * p.y * (1.0 - p.y), 0.0]) as TimeField,
                ),
                (WALL, Box::new(|_, _| [0.0, 0.0]) as TimeField),
            ],
            pressure_dirichlet: vec![OUTLET],
            body_force: None,
        }
    }

    #[test]
    fn projection_shrinks_the_divergence() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = lid_driven(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.02, 0.06);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        for _ in 0..3 {
            let stats = solver.step(&mut state).unwrap();
            assert!(
                stats.divergence_corrected <= 1.1 * stats.divergence_tentative,
                "projection failed to reduce divergence: {} -> {}",
                stats.divergence_tentative,
                stats.divergence_corrected
            );
        }
        assert!(state.u_n.coeffs.iter().any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn pressure_accumulates_the_correction_without_rescaling() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = lid_driven(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.02, 0.06);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        solver.step(&mut state).unwrap();
        let before = state.p.coeffs.clone();
        solver.step(&mut state).unwrap();
        let phi = solver.last_correction().unwrap();
        for i in 0..before.len() {
            assert_eq!(state.p.coeffs[i], before[i] + phi[i]);
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = lid_driven(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Cn, Convection::Explicit, 0.02, 0.04);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        solver.run(&mut state).unwrap();
        let dir = std::env::temp_dir().join(format!("mmns_ipcs_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.ckpt");
        write_checkpoint(&state, &path).unwrap();
        let back = read_checkpoint(&path, &sv, &sq).unwrap();
        assert_eq!(back.step_index, state.step_index);
        assert_eq!(back.t.to_bits(), state.t.to_bits());
        assert_eq!(back.needs_bootstrap, state.needs_bootstrap);
        assert_eq!(back.u_n.coeffs, state.u_n.coeffs);
        assert_eq!(
            back.u_prev.as_ref().unwrap().coeffs,
            state.u_prev.as_ref().unwrap().coeffs
        );
        assert_eq!(back.p.coeffs, state.p.coeffs);

        fs::write(&path, b"junk").unwrap();
        assert!(read_checkpoint(&path, &sv, &sq).is_err());
    }

    #[test]
    fn config_rejects_degenerate_time_grids() {
        assert!(IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.0, 1.0)
            .validate()
            .is_err());
        assert!(IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.5, 0.2)
            .validate()
            .is_err());
        assert!(IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.5, 0.5)
            .validate()
            .is_ok());
    }

    #[test]
    fn mismatched_spaces_are_rejected() {
        let (sv, sq) = taylor_hood(channel_stack());
        let (sv2, _) = taylor_hood(channel_stack());
        let problem = still_channel(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Bdf2, Convection::Implicit, 0.05, 0.1);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let err = solver.initial_state(InitialConditions::SingleLevel {
            u0: MultiMeshFunction::zeros(sv2),
            p0: None,
        });
        assert!(err.is_err());
    }

    #[test]
    fn cn_reports_pressure_at_integer_times() {
        let (sv, sq) = taylor_hood(channel_stack());
        let problem = lid_driven(&sv, &sq);
        let config = IpcsConfig::new(Scheme::Cn, Convection::Implicit, 0.02, 0.06);
        let mut solver = IpcsSolver::new(&problem, config).unwrap();
        let mut state = solver
            .initial_state(InitialConditions::SingleLevel {
                u0: MultiMeshFunction::zeros(sv.clone()),
                p0: None,
            })
            .unwrap();
        solver.step(&mut state).unwrap();
        let after_bootstrap = solver.report_pressure(&state);
        assert_eq!(after_bootstrap.coeffs, state.p.coeffs);
        solver.step(&mut state).unwrap();
        let extrapolated = solver.report_pressure(&state);
        let phi = solver.last_correction().unwrap();
        for i in 0..phi.len() {
            assert_abs_diff_eq!(
                extrapolated.coeffs[i],
                state.p.coeffs[i] + 0.5 * phi[i],
                epsilon = 1e-15
            );
        }
    }
}
