use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::mesh::Point2;
use crate::multimesh::{InterfaceSegment, OverlapQuad};
use crate::space::{CellTab, FunctionSpace, MultiMeshFunction};

/// Penalty and jump-stabilization weights. The Nitsche penalties are
/// additionally scaled by the square of the polynomial degree at use.
#[derive(Debug, Clone, Copy)]
pub struct StabilizationParams {
    pub alpha_t: f64,
    pub alpha_c: f64,
    pub beta_t: f64,
    pub beta_c: f64,
    pub beta_p: f64,
}

impl Default for StabilizationParams {
    fn default() -> Self {
        StabilizationParams {
            alpha_t: 50.0,
            alpha_c: 50.0,
            beta_t: 10.0,
            beta_c: 10.0,
            beta_p: 10.0,
        }
    }
}

impl StabilizationParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("alpha_t", self.alpha_t),
            ("alpha_c", self.alpha_c),
            ("beta_t", self.beta_t),
            ("beta_c", self.beta_c),
            ("beta_p", self.beta_p),
        ];
        for (name, v) in vals {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "stabilization parameter {name} must be a positive number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Bdf2,
    Cn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convection {
    Explicit,
    Implicit,
}

/// Everything the tentative-velocity assembly needs to know about the
/// current state and discretization.
pub struct FormContext<'a> {
    pub nu: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub convection: Convection,
    /// First step of a run: implicit-Euler discretization that needs no
    /// second history level.
    pub bootstrap: bool,
    pub u_n: &'a MultiMeshFunction,
    pub u_prev: Option<&'a MultiMeshFunction>,
    pub p_n: &'a MultiMeshFunction,
    /// Body force already bound to the scheme's evaluation time.
    pub body_force: Option<&'a (dyn Fn(Point2) -> [f64; 2] + Sync)>,
}

/// Per-term weights distinguishing the time discretizations.
#[derive(Debug, Clone, Copy)]
struct W {
    mass: f64,
    visc: f64,
    conv_impl: f64,
    hist0: f64,
    hist1: f64,
    expl0: f64,
    expl1: f64,
    lag: f64,
    lcn: f64,
    mass_jump: f64,
    adv0: f64,
    adv1: f64,
}

fn scheme_weights(ctx: &FormContext, beta_p: f64) -> Result<W> {
    if !(ctx.dt > 0.0) || !(ctx.nu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time step and viscosity must be positive (dt={}, nu={})",
            ctx.dt, ctx.nu
        )));
    }
    let dt = ctx.dt;
    let nu = ctx.nu;
    if ctx.bootstrap {
        return Ok(W {
            mass: 1.0 / dt,
            visc: nu,
            conv_impl: 1.0,
            hist0: 1.0 / dt,
            hist1: 0.0,
            expl0: 0.0,
            expl1: 0.0,
            lag: 0.0,
            lcn: 0.0,
            mass_jump: beta_p / dt,
            adv0: 1.0,
            adv1: 0.0,
        });
    }
    if ctx.u_prev.is_none() {
        return Err(Error::InvalidArgument(
            "tentative step needs the second history level u^{n-1}; run a bootstrap step first"
                .into(),
        ));
    }
    let implicit = ctx.convection == Convection::Implicit;
    Ok(match ctx.scheme {
        Scheme::Bdf2 => W {
            mass: 3.0 / (2.0 * dt),
            visc: nu,
            conv_impl: if implicit { 1.0 } else { 0.0 },
            hist0: 2.0 / dt,
            hist1: -1.0 / (2.0 * dt),
            expl0: if implicit { 0.0 } else { 2.0 },
            expl1: if implicit { 0.0 } else { -1.0 },
            lag: 0.0,
            lcn: 0.0,
            mass_jump: 3.0 * beta_p / (2.0 * dt),
            adv0: 2.0,
            adv1: -1.0,
        },
        Scheme::Cn => W {
            mass: 1.0 / dt,
            visc: 0.5 * nu,
            conv_impl: if implicit { 0.5 } else { 0.0 },
            hist0: 1.0 / dt,
            hist1: 0.0,
            expl0: if implicit { 0.0 } else { 1.5 },
            expl1: if implicit { 0.0 } else { -0.5 },
            lag: if implicit { 0.5 } else { 0.0 },
            lcn: 0.5,
            mass_jump: beta_p / dt,
            adv0: 1.5,
            adv1: -0.5,
        },
    })
}

/// Scale factor on the divergence right-hand side of the pressure
/// correction, and the gradient factor of the velocity update.
pub fn pressure_rhs_factor(scheme: Scheme, bootstrap: bool, dt: f64) -> f64 {
    match (scheme, bootstrap) {
        (Scheme::Bdf2, false) => 3.0 / (2.0 * dt),
        _ => 1.0 / dt,
    }
}

pub fn update_gradient_factor(scheme: Scheme, bootstrap: bool, dt: f64) -> f64 {
    match (scheme, bootstrap) {
        (Scheme::Bdf2, false) => 2.0 * dt / 3.0,
        _ => dt,
    }
}

enum Sink<'a> {
    Triplets(&'a mut Vec<(usize, usize, f64)>),
    Matrix(&'a mut SparseMatrix),
}

impl Sink<'_> {
    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        match self {
            Sink::Triplets(t) => t.push((i, j, v)),
            Sink::Matrix(m) => m.add_entry(i, j, v),
        }
    }

    /// Scatter a scalar node-coupling block into all `vs` components:
    /// local is (n/vs)² entries, dofs has component-interleaved length n.
    fn scatter(&mut self, dofs: &[usize], local: &[f64], vs: usize) {
        let nn = dofs.len() / vs;
        debug_assert_eq!(local.len(), nn * nn);
        for a in 0..nn {
            for b in 0..nn {
                let v = local[a * nn + b];
                for c in 0..vs {
                    self.add(dofs[vs * a + c], dofs[vs * b + c], v);
                }
            }
        }
    }
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

#[inline]
fn vec_val(tab: &CellTab, qp: usize, local: &[f64]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (a, &phi) in tab.values[qp].iter().enumerate() {
        out[0] += local[2 * a] * phi;
        out[1] += local[2 * a + 1] * phi;
    }
    out
}

#[inline]
fn vec_grad(tab: &CellTab, qp: usize, local: &[f64]) -> [Point2; 2] {
    let mut out = [Point2::default(); 2];
    for (a, g) in tab.grads[qp].iter().enumerate() {
        out[0] += *g * local[2 * a];
        out[1] += *g * local[2 * a + 1];
    }
    out
}

#[inline]
fn sc_val(tab: &CellTab, qp: usize, local: &[f64]) -> f64 {
    tab.values[qp]
        .iter()
        .zip(local)
        .map(|(phi, c)| phi * c)
        .sum()
}

#[inline]
fn sc_grad(tab: &CellTab, qp: usize, local: &[f64]) -> Point2 {
    let mut out = Point2::default();
    for (g, &c) in tab.grads[qp].iter().zip(local) {
        out += *g * c;
    }
    out
}

fn check_finite(f: &MultiMeshFunction, what: &str) -> Result<()> {
    if f.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite coefficient in {what}"
        )));
    }
    Ok(())
}

fn active_cells(space: &FunctionSpace) -> Vec<(usize, usize)> {
    let mm = &space.mm;
    let mut out = Vec::new();
    for m in 0..mm.num_meshes() {
        for ci in 0..mm.meshes[m].num_cells() {
            if mm.statuses[m][ci].is_active() {
                out.push((m, ci));
            }
        }
    }
    out
}

fn segment_is_active(space: &FunctionSpace, seg: &InterfaceSegment) -> bool {
    let mm = &space.mm;
    mm.statuses[seg.upper_mesh][seg.upper_cell].is_active()
        && mm.statuses[seg.lower_mesh][seg.lower_cell].is_active()
        && !seg.rule.is_empty()
}

fn overlap_is_active(space: &FunctionSpace, ov: &OverlapQuad) -> bool {
    let mm = &space.mm;
    mm.statuses[ov.lower_mesh][ov.lower_cell].is_active()
        && mm.statuses[ov.upper_mesh][ov.upper_cell].is_active()
        && !ov.rule.is_empty()
}

struct LocalBlock {
    dofs: Vec<usize>,
    matrix: Vec<f64>,
    rhs: Vec<f64>,
}

/// Assemble the tentative-velocity system. Dirichlet rows are replaced by
/// identity rows carrying the boundary values; inactive dofs become
/// identity rows with zero right-hand side.
pub fn assemble_tentative(
    ctx: &FormContext,
    params: &StabilizationParams,
    dirichlet: &[(usize, f64)],
) -> Result<(SparseMatrix, Vec<f64>)> {
    params.validate()?;
    let w = scheme_weights(ctx, params.beta_p)?;
    validate_fields(ctx)?;
    let space_v = &ctx.u_n.space;
    let n = space_v.n_dofs;
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|d| (d, d, 0.0)).collect();
    let mut rhs = vec![0.0; n];
    {
        let mut sink = Some(Sink::Triplets(&mut triplets));
        tentative_core(&mut sink, &mut rhs, ctx, params, &w);
    }
    let mut a = SparseMatrix::from_triplets(n, n, triplets);
    finish_tentative(&mut a, &mut rhs, space_v, dirichlet);
    Ok((a, rhs))
}

/// Re-assemble the tentative system into an existing matrix with the same
/// sparsity pattern (used when the convection matrix changes every step).
pub fn reassemble_tentative(
    a: &mut SparseMatrix,
    ctx: &FormContext,
    params: &StabilizationParams,
    dirichlet: &[(usize, f64)],
) -> Result<Vec<f64>> {
    params.validate()?;
    let w = scheme_weights(ctx, params.beta_p)?;
    validate_fields(ctx)?;
    let space_v = &ctx.u_n.space;
    let mut rhs = vec![0.0; space_v.n_dofs];
    a.zero_values();
    {
        let mut sink = Some(Sink::Matrix(a));
        tentative_core(&mut sink, &mut rhs, ctx, params, &w);
    }
    finish_tentative(a, &mut rhs, space_v, dirichlet);
    Ok(rhs)
}

/// Right-hand side of the tentative step alone, for schemes whose matrix is
/// constant across steps (explicit convection). Dirichlet and inactive rows
/// get their pinned values, matching the stored matrix's identity rows.
pub fn assemble_tentative_rhs(
    ctx: &FormContext,
    params: &StabilizationParams,
    dirichlet: &[(usize, f64)],
) -> Result<Vec<f64>> {
    params.validate()?;
    let w = scheme_weights(ctx, params.beta_p)?;
    validate_fields(ctx)?;
    let space_v = &ctx.u_n.space;
    let mut rhs = vec![0.0; space_v.n_dofs];
    let mut sink = None;
    tentative_core(&mut sink, &mut rhs, ctx, params, &w);
    for (dof, &act) in space_v.active.iter().enumerate() {
        if !act {
            rhs[dof] = 0.0;
        }
    }
    for &(dof, g) in dirichlet {
        rhs[dof] = g;
    }
    Ok(rhs)
}

fn validate_fields(ctx: &FormContext) -> Result<()> {
    check_finite(ctx.u_n, "u^n")?;
    if let Some(u) = ctx.u_prev {
        check_finite(u, "u^{n-1}")?;
    }
    check_finite(ctx.p_n, "p^n")?;
    Ok(())
}

fn finish_tentative(
    a: &mut SparseMatrix,
    rhs: &mut [f64],
    space_v: &FunctionSpace,
    dirichlet: &[(usize, f64)],
) {
    for (dof, &act) in space_v.active.iter().enumerate() {
        if !act {
            a.set_identity_row(dof);
            rhs[dof] = 0.0;
        }
    }
    for &(dof, g) in dirichlet {
        a.set_identity_row(dof);
        rhs[dof] = g;
    }
}

fn tentative_core(
    sink: &mut Option<Sink>,
    rhs: &mut [f64],
    ctx: &FormContext,
    params: &StabilizationParams,
    w: &W,
) {
    let space_v = &ctx.u_n.space;
    let u_prev = ctx.u_prev.unwrap_or(ctx.u_n);
    let k = space_v.element.degree;
    let mm = &space_v.mm;
    let with_matrix = sink.is_some();

    let cells = active_cells(space_v);
    let blocks: Vec<LocalBlock> = cells
        .par_iter()
        .map(|&(m, ci)| tentative_cell_block(ctx, u_prev, w, m, ci, with_matrix))
        .collect();
    for block in &blocks {
        if let Some(sink) = sink.as_mut() {
            sink.scatter(&block.dofs, &block.matrix, 2);
        }
        for (a, &dof) in block.dofs.iter().enumerate() {
            rhs[dof] += block.rhs[a];
        }
    }

    let alpha_eff = params.alpha_t * (k * k) as f64;
    for seg in &mm.interfaces {
        if !segment_is_active(space_v, seg) {
            continue;
        }
        let block = tentative_interface_block(ctx, u_prev, w, alpha_eff, seg, with_matrix);
        if let Some(sink) = sink.as_mut() {
            sink.scatter(&block.dofs, &block.matrix, 2);
        }
        for (a, &dof) in block.dofs.iter().enumerate() {
            rhs[dof] += block.rhs[a];
        }
    }

    if let Some(sink) = sink.as_mut() {
        for ov in &mm.overlaps {
            if !overlap_is_active(space_v, ov) {
                continue;
            }
            let block = jump_block(space_v, ov, w.mass_jump, params.beta_t * w.visc);
            sink.scatter(&block.dofs, &block.matrix, 2);
        }
    }
}

fn tentative_cell_block(
    ctx: &FormContext,
    u_prev: &MultiMeshFunction,
    w: &W,
    m: usize,
    ci: usize,
    with_matrix: bool,
) -> LocalBlock {
    let space_v = &ctx.u_n.space;
    let space_q = &ctx.p_n.space;
    let k = space_v.element.degree;
    let mm = &space_v.mm;
    let rule = mm.cell_rule(m, ci, 2 * k);
    let nn = space_v.element.n_nodes();
    let nd = 2 * nn;
    let dofs = space_v.cell_dofs(m, ci);
    let mut local = vec![0.0; if with_matrix { nn * nn } else { 0 }];
    let mut lrhs = vec![0.0; nd];
    if rule.is_empty() {
        return LocalBlock {
            dofs,
            matrix: local,
            rhs: lrhs,
        };
    }
    let tri = mm.meshes[m].cell_vertices(ci);
    let tab_v = space_v.element.tabulate(&tri, &rule.points, false);
    let tab_q = space_q.element.tabulate(&tri, &rule.points, false);
    let un = gather(ctx.u_n, m, ci);
    let upr = gather(u_prev, m, ci);
    let pn = gather(ctx.p_n, m, ci);

    for (qp, &wq) in rule.weights.iter().enumerate() {
        let phi = &tab_v.values[qp];
        let grad = &tab_v.grads[qp];
        let un_v = vec_val(&tab_v, qp, &un);
        let un_g = vec_grad(&tab_v, qp, &un);
        let up_v = vec_val(&tab_v, qp, &upr);
        let up_g = vec_grad(&tab_v, qp, &upr);
        let p_v = sc_val(&tab_q, qp, &pn);
        let adv = [
            w.adv0 * un_v[0] + w.adv1 * up_v[0],
            w.adv0 * un_v[1] + w.adv1 * up_v[1],
        ];
        let f_v = match ctx.body_force {
            Some(f) => f(rule.points[qp]),
            None => [0.0; 2],
        };
        for a in 0..nn {
            let pa = phi[a];
            let ga = grad[a];
            if with_matrix {
                for b in 0..nn {
                    let conv_b = adv[0] * grad[b].x + adv[1] * grad[b].y;
                    local[a * nn + b] += wq
                        * (w.mass * pa * phi[b]
                            + w.visc * ga.dot(grad[b])
                            + w.conv_impl * conv_b * pa);
                }
            }
            for c in 0..2 {
                let gac = if c == 0 { ga.x } else { ga.y };
                let r = w.hist0 * un_v[c] * pa
                    + w.hist1 * up_v[c] * pa
                    + f_v[c] * pa
                    + p_v * gac
                    - w.lag * (adv[0] * un_g[c].x + adv[1] * un_g[c].y) * pa
                    - w.expl0 * (un_v[0] * un_g[c].x + un_v[1] * un_g[c].y) * pa
                    - w.expl1 * (up_v[0] * up_g[c].x + up_v[1] * up_g[c].y) * pa
                    - w.lcn * ctx.nu * un_g[c].dot(ga);
                lrhs[2 * a + c] += wq * r;
            }
        }
    }
    LocalBlock {
        dofs,
        matrix: local,
        rhs: lrhs,
    }
}

fn tentative_interface_block(
    ctx: &FormContext,
    u_prev: &MultiMeshFunction,
    w: &W,
    alpha_eff: f64,
    seg: &InterfaceSegment,
    with_matrix: bool,
) -> LocalBlock {
    let space_v = &ctx.u_n.space;
    let space_q = &ctx.p_n.space;
    let mm = &space_v.mm;
    let nn = space_v.element.n_nodes();
    let n_sc = 2 * nn;
    let tri_up = mm.meshes[seg.upper_mesh].cell_vertices(seg.upper_cell);
    let tri_lo = mm.meshes[seg.lower_mesh].cell_vertices(seg.lower_cell);
    let tab_up = space_v.element.tabulate(&tri_up, &seg.rule.points, false);
    let tab_lo = space_v.element.tabulate(&tri_lo, &seg.rule.points, false);
    let tabq_up = space_q.element.tabulate(&tri_up, &seg.rule.points, false);
    let tabq_lo = space_q.element.tabulate(&tri_lo, &seg.rule.points, false);

    let mut dofs = space_v.cell_dofs(seg.upper_mesh, seg.upper_cell);
    dofs.extend(space_v.cell_dofs(seg.lower_mesh, seg.lower_cell));
    let un_up = gather(ctx.u_n, seg.upper_mesh, seg.upper_cell);
    let un_lo = gather(ctx.u_n, seg.lower_mesh, seg.lower_cell);
    let up_up = gather(u_prev, seg.upper_mesh, seg.upper_cell);
    let up_lo = gather(u_prev, seg.lower_mesh, seg.lower_cell);
    let pn_up = gather(ctx.p_n, seg.upper_mesh, seg.upper_cell);
    let pn_lo = gather(ctx.p_n, seg.lower_mesh, seg.lower_cell);

    let nrm = seg.normal;
    let pen = alpha_eff * w.visc / seg.h_mean;
    let mut local = vec![0.0; if with_matrix { n_sc * n_sc } else { 0 }];
    let mut lrhs = vec![0.0; 2 * n_sc];

    for (qp, &wq) in seg.rule.weights.iter().enumerate() {
        let unv_u = vec_val(&tab_up, qp, &un_up);
        let unv_l = vec_val(&tab_lo, qp, &un_lo);
        let ung_u = vec_grad(&tab_up, qp, &un_up);
        let ung_l = vec_grad(&tab_lo, qp, &un_lo);
        let upv_u = vec_val(&tab_up, qp, &up_up);
        let upv_l = vec_val(&tab_lo, qp, &up_lo);
        let p_u = sc_val(&tabq_up, qp, &pn_up);
        let p_l = sc_val(&tabq_lo, qp, &pn_lo);

        let wadv_u = [
            w.adv0 * unv_u[0] + w.adv1 * upv_u[0],
            w.adv0 * unv_u[1] + w.adv1 * upv_u[1],
        ];
        let wadv_l = [
            w.adv0 * unv_l[0] + w.adv1 * upv_l[0],
            w.adv0 * unv_l[1] + w.adv1 * upv_l[1],
        ];
        let s_w = 0.5 * ((wadv_u[0] + wadv_l[0]) * nrm.x + (wadv_u[1] + wadv_l[1]) * nrm.y);
        let s_n = 0.5 * ((unv_u[0] + unv_l[0]) * nrm.x + (unv_u[1] + unv_l[1]) * nrm.y);
        let s_p = 0.5 * ((upv_u[0] + upv_l[0]) * nrm.x + (upv_u[1] + upv_l[1]) * nrm.y);
        let p_avg = 0.5 * (p_u + p_l);
        let p_jump = p_u - p_l;

        // per side: value, normal-derivative coefficient, jump sign
        let side = |idx: usize| -> (f64, f64, f64) {
            if idx < nn {
                (
                    tab_up.values[qp][idx],
                    tab_up.grads[qp][idx].dot(nrm),
                    1.0,
                )
            } else {
                (
                    tab_lo.values[qp][idx - nn],
                    tab_lo.grads[qp][idx - nn].dot(nrm),
                    -1.0,
                )
            }
        };

        for a in 0..n_sc {
            let (pa, dna, sa) = side(a);
            let ja = sa * pa;
            let aa = 0.5 * pa;
            let fa = 0.5 * w.visc * dna;
            if with_matrix {
                for b in 0..n_sc {
                    let (pb, dnb, sb) = side(b);
                    let jb = sb * pb;
                    let fb = 0.5 * w.visc * dnb;
                    local[a * n_sc + b] += wq
                        * (pen * ja * jb - fb * ja - fa * jb - w.conv_impl * s_w * jb * aa);
                }
            }
            for c in 0..2 {
                let nc = if c == 0 { nrm.x } else { nrm.y };
                let flux_u = ctx.nu * ung_u[c].dot(nrm);
                let flux_l = ctx.nu * ung_l[c].dot(nrm);
                let jump_n = unv_u[c] - unv_l[c];
                let jump_p = upv_u[c] - upv_l[c];
                let r = -(p_avg * nc * ja + p_jump * nc * aa)
                    + w.lcn * ((flux_u - flux_l) * aa + 0.5 * (flux_u + flux_l) * ja)
                    + (w.expl0 * s_n * jump_n + w.expl1 * s_p * jump_p + w.lag * s_w * jump_n)
                        * aa;
                lrhs[2 * a + c] += wq * r;
            }
        }
    }
    LocalBlock {
        dofs,
        matrix: local,
        rhs: lrhs,
    }
}

/// Overlap-region jump stabilization: mass-jump and gradient-jump terms
/// between the lower and upper cell of an overlap quadrature.
fn jump_block(
    space: &FunctionSpace,
    ov: &OverlapQuad,
    mass_coef: f64,
    grad_coef: f64,
) -> LocalBlock {
    let mm = &space.mm;
    let nn = space.element.n_nodes();
    let n_sc = 2 * nn;
    let tri_lo = mm.meshes[ov.lower_mesh].cell_vertices(ov.lower_cell);
    let tri_up = mm.meshes[ov.upper_mesh].cell_vertices(ov.upper_cell);
    let tab_lo = space.element.tabulate(&tri_lo, &ov.rule.points, false);
    let tab_up = space.element.tabulate(&tri_up, &ov.rule.points, false);
    let mut dofs = space.cell_dofs(ov.upper_mesh, ov.upper_cell);
    dofs.extend(space.cell_dofs(ov.lower_mesh, ov.lower_cell));
    let mut local = vec![0.0; n_sc * n_sc];
    for (qp, &wq) in ov.rule.weights.iter().enumerate() {
        let side = |idx: usize| -> (f64, Point2, f64) {
            if idx < nn {
                (tab_up.values[qp][idx], tab_up.grads[qp][idx], 1.0)
            } else {
                (
                    tab_lo.values[qp][idx - nn],
                    tab_lo.grads[qp][idx - nn],
                    -1.0,
                )
            }
        };
        for a in 0..n_sc {
            let (pa, ga, sa) = side(a);
            for b in 0..n_sc {
                let (pb, gb, sb) = side(b);
                local[a * n_sc + b] +=
                    wq * sa * sb * (mass_coef * pa * pb + grad_coef * ga.dot(gb));
            }
        }
    }
    LocalBlock {
        dofs,
        matrix: local,
        rhs: Vec::new(),
    }
}

/// Raw multimesh Laplace operator for the pressure problems: volume
/// stiffness, symmetric Nitsche interface terms, and overlap gradient-jump
/// stabilization. No boundary or activity constraints applied.
pub fn assemble_pressure_operator(
    space_q: &FunctionSpace,
    params: &StabilizationParams,
) -> SparseMatrix {
    let k = space_q.element.degree;
    let mm = &space_q.mm;
    let n = space_q.n_dofs;
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|d| (d, d, 0.0)).collect();
    let alpha_eff = params.alpha_c * (k * k) as f64;

    let cells = active_cells(space_q);
    let blocks: Vec<LocalBlock> = cells
        .par_iter()
        .map(|&(m, ci)| {
            let rule = mm.cell_rule(m, ci, 2 * k);
            let nn = space_q.element.n_nodes();
            let dofs = space_q.cell_dofs(m, ci);
            let mut local = vec![0.0; nn * nn];
            if !rule.is_empty() {
                let tri = mm.meshes[m].cell_vertices(ci);
                let tab = space_q.element.tabulate(&tri, &rule.points, false);
                for (qp, &wq) in rule.weights.iter().enumerate() {
                    for a in 0..nn {
                        let ga = tab.grads[qp][a];
                        for b in 0..nn {
                            local[a * nn + b] += wq * ga.dot(tab.grads[qp][b]);
                        }
                    }
                }
            }
            LocalBlock {
                dofs,
                matrix: local,
                rhs: Vec::new(),
            }
        })
        .collect();
    let mut sink = Sink::Triplets(&mut triplets);
    for block in &blocks {
        sink.scatter(&block.dofs, &block.matrix, 1);
    }

    for seg in &mm.interfaces {
        if !segment_is_active(space_q, seg) {
            continue;
        }
        let nn = space_q.element.n_nodes();
        let n_tot = 2 * nn;
        let tri_up = mm.meshes[seg.upper_mesh].cell_vertices(seg.upper_cell);
        let tri_lo = mm.meshes[seg.lower_mesh].cell_vertices(seg.lower_cell);
        let tab_up = space_q.element.tabulate(&tri_up, &seg.rule.points, false);
        let tab_lo = space_q.element.tabulate(&tri_lo, &seg.rule.points, false);
        let mut dofs = space_q.cell_dofs(seg.upper_mesh, seg.upper_cell);
        dofs.extend(space_q.cell_dofs(seg.lower_mesh, seg.lower_cell));
        let pen = alpha_eff / seg.h_mean;
        let mut local = vec![0.0; n_tot * n_tot];
        for (qp, &wq) in seg.rule.weights.iter().enumerate() {
            let side = |idx: usize| -> (f64, f64, f64) {
                if idx < nn {
                    (
                        tab_up.values[qp][idx],
                        tab_up.grads[qp][idx].dot(seg.normal),
                        1.0,
                    )
                } else {
                    (
                        tab_lo.values[qp][idx - nn],
                        tab_lo.grads[qp][idx - nn].dot(seg.normal),
                        -1.0,
                    )
                }
            };
            for a in 0..n_tot {
                let (pa, dna, sa) = side(a);
                let ja = sa * pa;
                let fa = 0.5 * dna;
                for b in 0..n_tot {
                    let (pb, dnb, sb) = side(b);
                    let jb = sb * pb;
                    let fb = 0.5 * dnb;
                    local[a * n_tot + b] += wq * (pen * ja * jb - fb * ja - fa * jb);
                }
            }
        }
        sink.scatter(&dofs, &local, 1);
    }

    for ov in &mm.overlaps {
        if !overlap_is_active(space_q, ov) {
            continue;
        }
        let block = jump_block(space_q, ov, 0.0, params.beta_c);
        sink.scatter(&block.dofs, &block.matrix, 1);
    }

    SparseMatrix::from_triplets(n, n, triplets)
}

/// Right-hand side -coef * (div u_star, q).
pub fn assemble_divergence_rhs(
    space_q: &FunctionSpace,
    u_star: &MultiMeshFunction,
    coef: f64,
) -> Vec<f64> {
    let mm = &space_q.mm;
    let k_v = u_star.space.element.degree;
    let mut rhs = vec![0.0; space_q.n_dofs];
    for (m, ci) in active_cells(space_q) {
        let rule = mm.cell_rule(m, ci, 2 * k_v);
        if rule.is_empty() {
            continue;
        }
        let tri = mm.meshes[m].cell_vertices(ci);
        let tab_q = space_q.element.tabulate(&tri, &rule.points, false);
        let tab_v = u_star.space.element.tabulate(&tri, &rule.points, false);
        let us = gather(u_star, m, ci);
        let dofs = space_q.cell_dofs(m, ci);
        for (qp, &wq) in rule.weights.iter().enumerate() {
            let g = vec_grad(&tab_v, qp, &us);
            let div = g[0].x + g[1].y;
            for (a, &dof) in dofs.iter().enumerate() {
                rhs[dof] -= wq * coef * div * tab_q.values[qp][a];
            }
        }
    }
    rhs
}

/// Raw mass operator plus overlap mass-jump stabilization for the velocity
/// update projection.
pub fn assemble_update_operator(space_v: &FunctionSpace, beta_p: f64) -> SparseMatrix {
    let mm = &space_v.mm;
    let k = space_v.element.degree;
    let n = space_v.n_dofs;
    let vs = space_v.element.value_size;
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|d| (d, d, 0.0)).collect();
    let cells = active_cells(space_v);
    let blocks: Vec<LocalBlock> = cells
        .par_iter()
        .map(|&(m, ci)| {
            let rule = mm.cell_rule(m, ci, 2 * k);
            let nn = space_v.element.n_nodes();
            let dofs = space_v.cell_dofs(m, ci);
            let mut local = vec![0.0; nn * nn];
            if !rule.is_empty() {
                let tri = mm.meshes[m].cell_vertices(ci);
                let tab = space_v.element.tabulate(&tri, &rule.points, false);
                for (qp, &wq) in rule.weights.iter().enumerate() {
                    for a in 0..nn {
                        let pa = tab.values[qp][a];
                        for b in 0..nn {
                            local[a * nn + b] += wq * pa * tab.values[qp][b];
                        }
                    }
                }
            }
            LocalBlock {
                dofs,
                matrix: local,
                rhs: Vec::new(),
            }
        })
        .collect();
    let mut sink = Sink::Triplets(&mut triplets);
    for block in &blocks {
        sink.scatter(&block.dofs, &block.matrix, vs);
    }
    for ov in &mm.overlaps {
        if !overlap_is_active(space_v, ov) {
            continue;
        }
        let block = jump_block(space_v, ov, beta_p, 0.0);
        sink.scatter(&block.dofs, &block.matrix, vs);
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

/// Right-hand side (u_star - grad_factor * grad phi, v).
pub fn assemble_update_rhs(
    space_v: &FunctionSpace,
    u_star: &MultiMeshFunction,
    phi: &MultiMeshFunction,
    grad_factor: f64,
) -> Vec<f64> {
    let mm = &space_v.mm;
    let k = space_v.element.degree;
    let mut rhs = vec![0.0; space_v.n_dofs];
    for (m, ci) in active_cells(space_v) {
        let rule = mm.cell_rule(m, ci, 2 * k);
        if rule.is_empty() {
            continue;
        }
        let tri = mm.meshes[m].cell_vertices(ci);
        let tab_v = space_v.element.tabulate(&tri, &rule.points, false);
        let tab_q = phi.space.element.tabulate(&tri, &rule.points, false);
        let us = gather(u_star, m, ci);
        let ph = gather(phi, m, ci);
        let dofs = space_v.cell_dofs(m, ci);
        for (qp, &wq) in rule.weights.iter().enumerate() {
            let uv = vec_val(&tab_v, qp, &us);
            let gp = sc_grad(&tab_q, qp, &ph);
            let target = [uv[0] - grad_factor * gp.x, uv[1] - grad_factor * gp.y];
            for a in 0..space_v.element.n_nodes() {
                let pa = tab_v.values[qp][a];
                rhs[dofs[2 * a]] += wq * target[0] * pa;
                rhs[dofs[2 * a + 1]] += wq * target[1] * pa;
            }
        }
    }
    rhs
}

/// Right-hand side of the initial-pressure problem:
/// (nu lap(u) - u.grad(u) + f, grad q) over the visible domains plus the
/// interface consistency term -(<F.n>, [q]) for the same integrand F.
pub fn assemble_initial_pressure_rhs(
    space_q: &FunctionSpace,
    u0: &MultiMeshFunction,
    body_force: Option<&(dyn Fn(Point2) -> [f64; 2] + Sync)>,
    nu: f64,
) -> Vec<f64> {
    let mm = &space_q.mm;
    let space_v = &u0.space;
    let k_v = space_v.element.degree;
    let k_q = space_q.element.degree;
    let deg = (2 * k_v + k_q.saturating_sub(2)).min(crate::geometry::tables::MAX_TRIANGLE_DEGREE);
    let mut rhs = vec![0.0; space_q.n_dofs];

    let field_at = |m: usize,
                    ci: usize,
                    points: &[Point2]|
     -> Vec<[f64; 2]> {
        let tri = mm.meshes[m].cell_vertices(ci);
        let tab = space_v.element.tabulate(&tri, points, true);
        let uc = gather(u0, m, ci);
        (0..points.len())
            .map(|qp| {
                let uv = vec_val(&tab, qp, &uc);
                let ug = vec_grad(&tab, qp, &uc);
                let hess = tab.hessians.as_ref().unwrap();
                let mut lap = [0.0; 2];
                for (a, h) in hess[qp].iter().enumerate() {
                    lap[0] += uc[2 * a] * (h[0] + h[2]);
                    lap[1] += uc[2 * a + 1] * (h[0] + h[2]);
                }
                let f_v = match body_force {
                    Some(f) => f(points[qp]),
                    None => [0.0; 2],
                };
                [
                    nu * lap[0] - (uv[0] * ug[0].x + uv[1] * ug[0].y) + f_v[0],
                    nu * lap[1] - (uv[0] * ug[1].x + uv[1] * ug[1].y) + f_v[1],
                ]
            })
            .collect()
    };

    for (m, ci) in active_cells(space_q) {
        let rule = mm.cell_rule(m, ci, deg);
        if rule.is_empty() {
            continue;
        }
        let tri = mm.meshes[m].cell_vertices(ci);
        let tab_q = space_q.element.tabulate(&tri, &rule.points, false);
        let f_vals = field_at(m, ci, &rule.points);
        let dofs = space_q.cell_dofs(m, ci);
        for (qp, &wq) in rule.weights.iter().enumerate() {
            for (a, &dof) in dofs.iter().enumerate() {
                let g = tab_q.grads[qp][a];
                rhs[dof] += wq * (f_vals[qp][0] * g.x + f_vals[qp][1] * g.y);
            }
        }
    }

    for seg in &mm.interfaces {
        if !segment_is_active(space_q, seg) {
            continue;
        }
        let f_up = field_at(seg.upper_mesh, seg.upper_cell, &seg.rule.points);
        let f_lo = field_at(seg.lower_mesh, seg.lower_cell, &seg.rule.points);
        let tri_up = mm.meshes[seg.upper_mesh].cell_vertices(seg.upper_cell);
        let tri_lo = mm.meshes[seg.lower_mesh].cell_vertices(seg.lower_cell);
        let tab_up = space_q.element.tabulate(&tri_up, &seg.rule.points, false);
        let tab_lo = space_q.element.tabulate(&tri_lo, &seg.rule.points, false);
        let mut dofs = space_q.cell_dofs(seg.upper_mesh, seg.upper_cell);
        dofs.extend(space_q.cell_dofs(seg.lower_mesh, seg.lower_cell));
        let nn = space_q.element.n_nodes();
        for (qp, &wq) in seg.rule.weights.iter().enumerate() {
            let favg_n = 0.5
                * ((f_up[qp][0] + f_lo[qp][0]) * seg.normal.x
                    + (f_up[qp][1] + f_lo[qp][1]) * seg.normal.y);
            for (a, &dof) in dofs.iter().enumerate() {
                let (pa, sa) = if a < nn {
                    (tab_up.values[qp][a], 1.0)
                } else {
                    (tab_lo.values[qp][a - nn], -1.0)
                };
                rhs[dof] -= wq * favg_n * sa * pa;
            }
        }
    }
    rhs
}

/// Symmetrically constrained SPD system: Dirichlet and inactive dofs become
/// identity rows with their columns moved to the right-hand side, keeping
/// the matrix symmetric for conjugate-gradient solves.
#[derive(Debug, Clone)]
pub struct SpdSystem {
    pub matrix: SparseMatrix,
    pub constrained: Vec<bool>,
    dir_cols: Vec<(usize, usize, f64)>,
    pub deflate: bool,
}

impl SpdSystem {
    pub fn constrain(mut a: SparseMatrix, dirichlet: &[usize], active: &[bool]) -> SpdSystem {
        let n = a.n_rows;
        assert_eq!(active.len(), n);
        let mut constrained = vec![false; n];
        for (i, &act) in active.iter().enumerate() {
            if !act {
                constrained[i] = true;
            }
        }
        for &d in dirichlet {
            constrained[d] = true;
        }
        let mut dir_cols = Vec::new();
        for i in 0..n {
            if constrained[i] {
                continue;
            }
            let (cols, vals) = a.row_mut(i);
            for (idx, &j) in cols.iter().enumerate() {
                if j != i && constrained[j] && vals[idx] != 0.0 {
                    dir_cols.push((i, j, vals[idx]));
                    vals[idx] = 0.0;
                }
            }
        }
        for (d, &c) in constrained.iter().enumerate() {
            if c {
                a.set_identity_row(d);
            }
        }
        SpdSystem {
            matrix: a,
            constrained,
            dir_cols,
            deflate: dirichlet.is_empty(),
        }
    }

    /// Impose constraint values on a raw right-hand side: move eliminated
    /// columns over, pin constrained entries, and (for the pure-Neumann
    /// case) project out the constant nullspace component.
    pub fn finish_rhs(&self, b: &mut [f64], bc: &[f64]) {
        for &(i, j, v) in &self.dir_cols {
            b[i] -= v * bc[j];
        }
        for (d, &c) in self.constrained.iter().enumerate() {
            if c {
                b[d] = bc[d];
            }
        }
        if self.deflate {
            let free: Vec<usize> = (0..b.len()).filter(|&i| !self.constrained[i]).collect();
            if !free.is_empty() {
                let mean: f64 = free.iter().map(|&i| b[i]).sum::<f64>() / free.len() as f64;
                for &i in &free {
                    b[i] -= mean;
                }
            }
        }
    }
}

/// Pressure-correction system: multimesh Laplace operator constrained at
/// the boundary dofs where the correction vanishes, with the divergence
/// right-hand side for the given scheme factor.
pub fn assemble_pressure_correction(
    space_q: &FunctionSpace,
    u_star: &MultiMeshFunction,
    coef: f64,
    params: &StabilizationParams,
    phi_dirichlet: &[usize],
) -> Result<(SpdSystem, Vec<f64>)> {
    params.validate()?;
    check_finite(u_star, "u*")?;
    let raw = assemble_pressure_operator(space_q, params);
    let sys = SpdSystem::constrain(raw, phi_dirichlet, &space_q.active);
    let mut rhs = assemble_divergence_rhs(space_q, u_star, coef);
    let zeros = vec![0.0; space_q.n_dofs];
    sys.finish_rhs(&mut rhs, &zeros);
    Ok((sys, rhs))
}

/// Velocity-update system with boundary values applied symmetrically.
pub fn assemble_velocity_update(
    space_v: &FunctionSpace,
    u_star: &MultiMeshFunction,
    phi: &MultiMeshFunction,
    grad_factor: f64,
    beta_p: f64,
    dirichlet: &[(usize, f64)],
) -> Result<(SpdSystem, Vec<f64>)> {
    check_finite(u_star, "u*")?;
    check_finite(phi, "phi")?;
    let raw = assemble_update_operator(space_v, beta_p);
    let dofs: Vec<usize> = dirichlet.iter().map(|&(d, _)| d).collect();
    let mut sys = SpdSystem::constrain(raw, &dofs, &space_v.active);
    sys.deflate = false;
    let mut rhs = assemble_update_rhs(space_v, u_star, phi, grad_factor);
    let mut bc = vec![0.0; space_v.n_dofs];
    for &(d, g) in dirichlet {
        bc[d] = g;
    }
    sys.finish_rhs(&mut rhs, &bc);
    Ok((sys, rhs))
}

/// Initial-pressure system sharing the pressure-correction operator.
pub fn assemble_initial_pressure(
    space_q: &FunctionSpace,
    u0: &MultiMeshFunction,
    body_force: Option<&(dyn Fn(Point2) -> [f64; 2] + Sync)>,
    nu: f64,
    params: &StabilizationParams,
    dirichlet: &[(usize, f64)],
) -> Result<(SpdSystem, Vec<f64>)> {
    params.validate()?;
    check_finite(u0, "u0")?;
    let raw = assemble_pressure_operator(space_q, params);
    let dofs: Vec<usize> = dirichlet.iter().map(|&(d, _)| d).collect();
    let sys = SpdSystem::constrain(raw, &dofs, &space_q.active);
    let mut rhs = assemble_initial_pressure_rhs(space_q, u0, body_force, nu);
    let mut bc = vec![0.0; space_q.n_dofs];
    for &(d, g) in dirichlet {
        bc[d] = g;
    }
    sys.finish_rhs(&mut rhs, &bc);
    Ok((sys, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tables::triangle_rule;
    use crate::linalg::{solve, SolverSpec};
    use crate::mesh::{generate_rect_mesh, SideMarkers, INLET, OUTER, OUTLET, WALL};
    use crate::multimesh::MultiMesh;
    use crate::space::Element;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn stack(nx_bg: usize, nx_top: usize, degree: usize) -> Arc<MultiMesh> {
        let bg = generate_rect_mesh(0.0, 0.0, 1.0, 1.0, nx_bg, nx_bg, SideMarkers::channel())
            .unwrap();
        let top = generate_rect_mesh(
            0.23,
            0.31,
            0.72,
            0.77,
            nx_top,
            nx_top,
            SideMarkers::all(OUTER),
        )
        .unwrap();
        Arc::new(MultiMesh::build(vec![bg, top], 2 * degree + 2).unwrap())
    }

    fn taylor_hood(mm: Arc<MultiMesh>, k: usize) -> (Arc<FunctionSpace>, Arc<FunctionSpace>) {
        let (v, q) = FunctionSpace::taylor_hood(mm, k).unwrap();
        (Arc::new(v), Arc::new(q))
    }

    #[test]
    fn stabilization_params_must_be_positive() {
        let mut p = StabilizationParams::default();
        assert!(p.validate().is_ok());
        p.beta_p = 0.0;
        assert!(p.validate().is_err());
        p.beta_p = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn missing_history_requires_bootstrap() {
        let (sv, sq) = taylor_hood(stack(4, 3, 2), 2);
        let u = MultiMeshFunction::zeros(sv);
        let p = MultiMeshFunction::zeros(sq);
        let ctx = FormContext {
            nu: 0.01,
            dt: 0.1,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            bootstrap: false,
            u_n: &u,
            u_prev: None,
            p_n: &p,
            body_force: None,
        };
        let err = assemble_tentative(&ctx, &StabilizationParams::default(), &[]).unwrap_err();
        assert!(err.to_string().contains("bootstrap"));
    }

    #[test]
    fn non_finite_fields_are_rejected() {
        let (sv, sq) = taylor_hood(stack(4, 3, 2), 2);
        let mut u = MultiMeshFunction::zeros(sv.clone());
        u.coeffs[0] = f64::NAN;
        let p = MultiMeshFunction::zeros(sq);
        let ctx = FormContext {
            nu: 0.01,
            dt: 0.1,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            bootstrap: true,
            u_n: &u,
            u_prev: None,
            p_n: &p,
            body_force: None,
        };
        assert!(assemble_tentative(&ctx, &StabilizationParams::default(), &[]).is_err());
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let (sv, sq) = taylor_hood(stack(5, 3, 2), 2);
        let u = MultiMeshFunction::zeros(sv.clone());
        let p = MultiMeshFunction::zeros(sq);
        for (scheme, convection) in [
            (Scheme::Bdf2, Convection::Implicit),
            (Scheme::Bdf2, Convection::Explicit),
            (Scheme::Cn, Convection::Implicit),
            (Scheme::Cn, Convection::Explicit),
        ] {
            let ctx = FormContext {
                nu: 0.01,
                dt: 0.05,
                scheme,
                convection,
                bootstrap: false,
                u_n: &u,
                u_prev: Some(&u),
                p_n: &p,
                body_force: None,
            };
            let dirichlet: Vec<(usize, f64)> = sv
                .dirichlet_dofs(INLET)
                .unwrap()
                .into_iter()
                .chain(sv.dirichlet_dofs(WALL).unwrap())
                .chain(sv.dirichlet_dofs(OUTLET).unwrap())
                .map(|(d, _)| (d, 0.0))
                .collect();
            let (a, b) = assemble_tentative(&ctx, &StabilizationParams::default(), &dirichlet)
                .unwrap();
            assert!(b.iter().all(|&v| v.abs() < 1e-13));
            let sol = solve(&a, &b, &SolverSpec::gmres(1e-12), None).unwrap();
            assert!(sol.x.iter().all(|&v| v.abs() < 1e-10));
        }
    }

    // independent dense assembly on a single 2-cell mesh using barycentric
    // P1/P2 formulas
    struct DenseOracle {
        n: usize,
        a: Vec<f64>,
        b: Vec<f64>,
    }

    fn p2_shape(l: [f64; 3]) -> [f64; 6] {
        [
            l[0] * (2.0 * l[0] - 1.0),
            l[1] * (2.0 * l[1] - 1.0),
            l[2] * (2.0 * l[2] - 1.0),
            4.0 * l[0] * l[1],
            4.0 * l[1] * l[2],
            4.0 * l[2] * l[0],
        ]
    }

    fn p2_shape_grad(l: [f64; 3], gl: [Point2; 3]) -> [Point2; 6] {
        [
            gl[0] * (4.0 * l[0] - 1.0),
            gl[1] * (4.0 * l[1] - 1.0),
            gl[2] * (4.0 * l[2] - 1.0),
            (gl[0] * l[1] + gl[1] * l[0]) * 4.0,
            (gl[1] * l[2] + gl[2] * l[1]) * 4.0,
            (gl[2] * l[0] + gl[0] * l[2]) * 4.0,
        ]
    }

    fn oracle_tentative(
        sv: &FunctionSpace,
        sq: &FunctionSpace,
        un: &MultiMeshFunction,
        upr: &MultiMeshFunction,
        pn: &MultiMeshFunction,
        f: impl Fn(Point2) -> [f64; 2],
        coef: (f64, f64, f64, f64, f64),
        adv: (f64, f64),
    ) -> DenseOracle {
        let (mass, visc, conv_impl, hist0, hist1) = coef;
        let mm = &sv.mm;
        let mesh = &mm.meshes[0];
        let n = sv.n_dofs;
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        for ci in 0..mesh.num_cells() {
            let tri = mesh.cell_vertices(ci);
            let area2 = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
            // barycentric gradients
            let gl = [
                Point2::new(tri[1].y - tri[2].y, tri[2].x - tri[1].x) * (1.0 / area2),
                Point2::new(tri[2].y - tri[0].y, tri[0].x - tri[2].x) * (1.0 / area2),
                Point2::new(tri[0].y - tri[1].y, tri[1].x - tri[0].x) * (1.0 / area2),
            ];
            let vdofs = sv.cell_dofs(0, ci);
            let qdofs = sq.cell_dofs(0, ci);
            for &[l1, l2, wt] in triangle_rule(4) {
                let l = [1.0 - l1 - l2, l1, l2];
                let x = tri[0] * l[0] + tri[1] * l[1] + tri[2] * l[2];
                let w = wt * area2.abs();
                let sh = p2_shape(l);
                let gr = p2_shape_grad(l, gl);
                // velocity-node order of the space: vertices then edges
                // v0->v1, v1->v2, v2->v0 whose midpoints are 4*l0*l1,
                // 4*l1*l2, 4*l2*l0: matches p2_shape order
                let mut unv = [0.0; 2];
                let mut ung = [Point2::default(); 2];
                let mut upv = [0.0; 2];
                let mut upg = [Point2::default(); 2];
                for i in 0..6 {
                    for c in 0..2 {
                        unv[c] += un.coeffs[vdofs[2 * i + c]] * sh[i];
                        ung[c] += gr[i] * un.coeffs[vdofs[2 * i + c]];
                        upv[c] += upr.coeffs[vdofs[2 * i + c]] * sh[i];
                        upg[c] += gr[i] * upr.coeffs[vdofs[2 * i + c]];
                    }
                }
                let mut pv = 0.0;
                for i in 0..3 {
                    pv += pn.coeffs[qdofs[i]] * l[i];
                }
                let advv = [
                    adv.0 * unv[0] + adv.1 * upv[0],
                    adv.0 * unv[1] + adv.1 * upv[1],
                ];
                let fv = f(x);
                for i in 0..6 {
                    for j in 0..6 {
                        let s = w
                            * (mass * sh[i] * sh[j]
                                + visc * gr[i].dot(gr[j])
                                + conv_impl * (advv[0] * gr[j].x + advv[1] * gr[j].y) * sh[i]);
                        for c in 0..2 {
                            a[vdofs[2 * i + c] * n + vdofs[2 * j + c]] += s;
                        }
                    }
                    for c in 0..2 {
                        let gc = if c == 0 { gr[i].x } else { gr[i].y };
                        b[vdofs[2 * i + c]] += w
                            * (hist0 * unv[c] * sh[i]
                                + hist1 * upv[c] * sh[i]
                                + fv[c] * sh[i]
                                + pv * gc);
                    }
                }
            }
        }
        DenseOracle { n, a, b }
    }

    #[test]
    fn single_mesh_matches_independent_dense_assembly() {
        let mesh = generate_rect_mesh(0.0, 0.0, 1.0, 1.0, 1, 1, SideMarkers::channel()).unwrap();
        let mm = Arc::new(MultiMesh::build(vec![mesh], 6).unwrap());
        let (sv, sq) = taylor_hood(mm, 2);
        let un = MultiMeshFunction::interpolate(sv.clone(), |p| {
            [0.3 + p.x * p.y, 0.1 - p.x * p.x]
        });
        let upr =
            MultiMeshFunction::interpolate(sv.clone(), |p| [p.y * 0.5, 0.2 * p.x + p.y * p.y]);
        let pn = MultiMeshFunction::interpolate_scalar(sq.clone(), |p| p.x + 2.0 * p.y);
        let force = |_p: Point2| [1.0, 2.0];
        let nu = 0.07;
        let dt = 0.04;

        let ctx = FormContext {
            nu,
            dt,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            bootstrap: false,
            u_n: &un,
            u_prev: Some(&upr),
            p_n: &pn,
            body_force: Some(&force),
        };
        let (a, b) = assemble_tentative(&ctx, &StabilizationParams::default(), &[]).unwrap();
        let oracle = oracle_tentative(
            &sv,
            &sq,
            &un,
            &upr,
            &pn,
            force,
            (3.0 / (2.0 * dt), nu, 1.0, 2.0 / dt, -0.5 / dt),
            (2.0, -1.0),
        );
        for i in 0..oracle.n {
            for j in 0..oracle.n {
                assert_abs_diff_eq!(a.get(i, j), oracle.a[i * oracle.n + j], epsilon = 1e-11);
            }
            assert_abs_diff_eq!(b[i], oracle.b[i], epsilon = 1e-11);
        }

        // Crank-Nicolson with equal history levels: coefficient cross-check
        let ctx_cn = FormContext {
            nu,
            dt,
            scheme: Scheme::Cn,
            convection: Convection::Implicit,
            bootstrap: false,
            u_n: &un,
            u_prev: Some(&un),
            p_n: &pn,
            body_force: Some(&force),
        };
        let (a_cn, _) = assemble_tentative(&ctx_cn, &StabilizationParams::default(), &[]).unwrap();
        let oracle_cn = oracle_tentative(
            &sv,
            &sq,
            &un,
            &un,
            &pn,
            force,
            (1.0 / dt, 0.5 * nu, 0.5, 1.0 / dt, 0.0),
            (1.5, -0.5),
        );
        for i in 0..oracle_cn.n {
            for j in 0..oracle_cn.n {
                assert_abs_diff_eq!(
                    a_cn.get(i, j),
                    oracle_cn.a[i * oracle_cn.n + j],
                    epsilon = 1e-11
                );
            }
        }
    }

    #[test]
    fn reassembly_reuses_the_pattern_exactly() {
        let (sv, sq) = taylor_hood(stack(4, 3, 2), 2);
        let u1 = MultiMeshFunction::interpolate(sv.clone(), |p| [p.y, -p.x]);
        let u2 = MultiMeshFunction::interpolate(sv.clone(), |p| {
            [0.4 * p.x * p.x, p.x * p.y - 0.2]
        });
        let p1 = MultiMeshFunction::interpolate_scalar(sq.clone(), |p| p.x - p.y);
        let params = StabilizationParams::default();
        let dirichlet: Vec<(usize, f64)> = sv
            .dirichlet_dofs(WALL)
            .unwrap()
            .into_iter()
            .map(|(d, _)| (d, 0.7))
            .collect();
        let ctx1 = FormContext {
            nu: 0.02,
            dt: 0.05,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            bootstrap: false,
            u_n: &u1,
            u_prev: Some(&u2),
            p_n: &p1,
            body_force: None,
        };
        let (mut a, _) = assemble_tentative(&ctx1, &params, &dirichlet).unwrap();
        let ctx2 = FormContext {
            u_n: &u2,
            u_prev: Some(&u1),
            ..ctx1
        };
        let b2 = reassemble_tentative(&mut a, &ctx2, &params, &dirichlet).unwrap();
        let (a_fresh, b_fresh) = assemble_tentative(&ctx2, &params, &dirichlet).unwrap();
        assert_eq!(a.row_offsets, a_fresh.row_offsets);
        assert_eq!(a.col_indices, a_fresh.col_indices);
        for (x, y) in a.values.iter().zip(&a_fresh.values) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
        for (x, y) in b2.iter().zip(&b_fresh) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
        let ctx3 = FormContext {
            convection: Convection::Explicit,
            ..ctx2
        };
        let (_, b_full) = assemble_tentative(&ctx3, &params, &dirichlet).unwrap();
        let b_only = assemble_tentative_rhs(&ctx3, &params, &dirichlet).unwrap();
        for (x, y) in b_only.iter().zip(&b_full) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn jump_free_field_sees_no_stabilization_energy() {
        let (sv, sq) = taylor_hood(stack(4, 3, 2), 2);
        let zero = MultiMeshFunction::zeros(sv.clone());
        let p0 = MultiMeshFunction::zeros(sq);
        let dt = 0.1;
        let nu = 0.3;
        let ctx = FormContext {
            nu,
            dt,
            scheme: Scheme::Bdf2,
            convection: Convection::Implicit,
            bootstrap: false,
            u_n: &zero,
            u_prev: Some(&zero),
            p_n: &p0,
            body_force: None,
        };
        let (a, _) = assemble_tentative(&ctx, &StabilizationParams::default(), &[]).unwrap();
        let u = MultiMeshFunction::interpolate(sv.clone(), |p| {
            [1.0 + 2.0 * p.x, 3.0 - p.y]
        });
        let mut au = vec![0.0; sv.n_dofs];
        a.matvec_into(&u.coeffs, &mut au);
        let energy: f64 = u.coeffs.iter().zip(&au).map(|(x, y)| x * y).sum();
        // inactive identity rows contribute nothing since those dofs are 0
        let mass_int = {
            // integral over [0,1]^2 of |(1+2x, 3-y)|^2
            let ix = 1.0 + 2.0 * 1.0 + 4.0 / 3.0;
            let iy = 9.0 - 3.0 + 1.0 / 3.0;
            ix + iy
        };
        let grad_int = 4.0 + 1.0;
        let expected = 3.0 / (2.0 * dt) * mass_int + nu * grad_int;
        assert_abs_diff_eq!(energy, expected, epsilon = 1e-9 * expected.abs());
    }

    #[test]
    fn pressure_operator_is_symmetric() {
        let mm = stack(5, 4, 2);
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1).unwrap()));
        let a = assemble_pressure_operator(&sq, &StabilizationParams::default());
        let mut max_asym: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..a.n_rows {
            let (cols, vals) = a.row(i);
            for (idx, &j) in cols.iter().enumerate() {
                max_asym = max_asym.max((vals[idx] - a.get(j, i)).abs());
                scale = scale.max(vals[idx].abs());
            }
        }
        assert!(max_asym <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn pressure_operator_patch_test_on_linears() {
        let mm = stack(5, 4, 1);
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1).unwrap()));
        let a = assemble_pressure_operator(&sq, &StabilizationParams::default());
        let xf = MultiMeshFunction::interpolate_scalar(sq.clone(), |p| p.x);
        let mut r = vec![0.0; sq.n_dofs];
        a.matvec_into(&xf.coeffs, &mut r);
        let mut boundary = vec![false; sq.n_dofs];
        for marker in [INLET, WALL, OUTLET] {
            for (d, _) in sq.dirichlet_dofs(marker).unwrap() {
                boundary[d] = true;
            }
        }
        for dof in 0..sq.n_dofs {
            if sq.active[dof] && !boundary[dof] {
                assert!(
                    r[dof].abs() < 1e-10,
                    "patch-test residual {} at dof {dof}",
                    r[dof]
                );
            }
        }
    }

    #[test]
    fn divergence_free_tentative_velocity_gives_zero_correction() {
        let mm = stack(4, 3, 2);
        let (sv, sq) = taylor_hood(mm, 2);
        let us = MultiMeshFunction::interpolate(sv, |p| [p.x, -p.y]);
        let (sys, rhs) = assemble_pressure_correction(
            &sq,
            &us,
            3.0 / (2.0 * 0.1),
            &StabilizationParams::default(),
            &[],
        )
        .unwrap();
        let sol = solve(&sys.matrix, &rhs, &SolverSpec::cg(1e-12), None).unwrap();
        let mut phi = MultiMeshFunction::from_coeffs(sq, sol.x);
        phi.subtract_mean();
        for &c in &phi.coeffs {
            assert!(c.abs() < 1e-8, "phi should vanish, got {c}");
        }
    }

    #[test]
    fn velocity_update_with_zero_phi_returns_u_star() {
        let mm = stack(4, 3, 2);
        let (sv, sq) = taylor_hood(mm, 2);
        let us = MultiMeshFunction::interpolate(sv.clone(), |p| {
            [p.x * p.y + 0.3, p.y * p.y - p.x]
        });
        let phi = MultiMeshFunction::zeros(sq);
        let dirichlet: Vec<(usize, f64)> = Vec::new();
        let (sys, rhs) =
            assemble_velocity_update(&sv, &us, &phi, 0.05, 10.0, &dirichlet).unwrap();
        let sol = solve(&sys.matrix, &rhs, &SolverSpec::cg(1e-12), None).unwrap();
        for dof in 0..sv.n_dofs {
            if sv.active[dof] {
                assert_abs_diff_eq!(sol.x[dof], us.coeffs[dof], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn velocity_update_projects_constant_gradient() {
        let mm = stack(4, 3, 2);
        let (sv, sq) = taylor_hood(mm, 2);
        let us = MultiMeshFunction::zeros(sv.clone());
        let phi = MultiMeshFunction::interpolate_scalar(sq, |p| p.x);
        let dt = 0.03;
        let factor = 2.0 * dt / 3.0;
        let (sys, rhs) = assemble_velocity_update(&sv, &us, &phi, factor, 10.0, &[]).unwrap();
        let sol = solve(&sys.matrix, &rhs, &SolverSpec::cg(1e-13), None).unwrap();
        for dof in 0..sv.n_dofs {
            if sv.active[dof] {
                let want = if dof % 2 == 0 { -factor } else { 0.0 };
                assert_abs_diff_eq!(sol.x[dof], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn initial_pressure_zero_data_gives_zero() {
        let mm = stack(4, 3, 2);
        let (sv, sq) = taylor_hood(mm, 2);
        let u0 = MultiMeshFunction::zeros(sv);
        let (sys, rhs) =
            assemble_initial_pressure(&sq, &u0, None, 0.01, &StabilizationParams::default(), &[])
                .unwrap();
        let sol = solve(&sys.matrix, &rhs, &SolverSpec::cg(1e-12), None).unwrap();
        let mut p = MultiMeshFunction::from_coeffs(sq, sol.x);
        p.subtract_mean();
        for &c in &p.coeffs {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn initial_pressure_recovers_manufactured_gradient() {
        let mm = stack(4, 3, 3);
        let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(3).unwrap()));
        let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(2).unwrap()));
        let u0 = MultiMeshFunction::zeros(sv);
        let g = |p: Point2| p.x * p.x - 0.5 * p.y * p.y + 0.25 * p.x * p.y;
        let grad_g = |p: Point2| [2.0 * p.x + 0.25 * p.y, -p.y + 0.25 * p.x];
        let (sys, rhs) = assemble_initial_pressure(
            &sq,
            &u0,
            Some(&grad_g),
            0.01,
            &StabilizationParams::default(),
            &[],
        )
        .unwrap();
        let sol = solve(&sys.matrix, &rhs, &SolverSpec::cg(1e-13), None).unwrap();
        let mut p = MultiMeshFunction::from_coeffs(sq.clone(), sol.x);
        p.subtract_mean();
        let mut exact = MultiMeshFunction::interpolate_scalar(sq, g);
        exact.subtract_mean();
        for dof in 0..p.coeffs.len() {
            if p.space.active[dof] {
                assert_abs_diff_eq!(p.coeffs[dof], exact.coeffs[dof], epsilon = 1e-9);
            }
        }
    }
}
