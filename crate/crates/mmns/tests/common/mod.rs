use std::sync::Arc;

use mmns::assembly::{Convection, Scheme};
use mmns::cases::taylor_green::{pressure, velocity};
use mmns::geometry::tables::triangle_rule;
use mmns::ipcs::{InitialConditions, IpcsConfig, IpcsSolver, Problem, TimeField};
use mmns::linalg::SolverSpec;
use mmns::mesh::{generate_rect_mesh, Point2, SideMarkers, WALL};
use mmns::multimesh::MultiMesh;
use mmns::space::{Element, FunctionSpace, MultiMeshFunction};

/// Dense LU factorization with partial pivoting.
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(n: usize, a: Vec<f64>) -> DenseLu {
        assert_eq!(a.len(), n * n);
        let mut lu = a;
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            let mut best_val = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > best_val {
                    best = row;
                    best_val = v;
                }
            }
            assert!(best_val > 0.0, "singular matrix at column {col}");
            if best != col {
                for j in 0..n {
                    lu.swap(col * n + j, best * n + j);
                }
                piv.swap(col, best);
            }
            let d = lu[col * n + col];
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[row * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        DenseLu { n, lu, piv }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

fn p1_shape(l: [f64; 3]) -> [f64; 3] {
    l
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

fn p2_grad(l: [f64; 3], gl: [Point2; 3]) -> [Point2; 6] {
    [
        gl[0] * (4.0 * l[0] - 1.0),
        gl[1] * (4.0 * l[1] - 1.0),
        gl[2] * (4.0 * l[2] - 1.0),
        (gl[0] * l[1] + gl[1] * l[0]) * 4.0,
        (gl[1] * l[2] + gl[2] * l[1]) * 4.0,
        (gl[2] * l[0] + gl[0] * l[2]) * 4.0,
    ]
}

struct QuadPoint {
    w: f64,
    v2: [f64; 6],
    g2: [Point2; 6],
    v1: [f64; 3],
    g1: [Point2; 3],
}

struct Cell {
    vdofs: Vec<usize>,
    qdofs: Vec<usize>,
    full: Vec<QuadPoint>,
    low: Vec<QuadPoint>,
}

fn tabulate(tri: [Point2; 3], degree: usize) -> Vec<QuadPoint> {
    let jac = (tri[1] - tri[0]).cross(tri[2] - tri[0]);
    let gl = [
        Point2::new(tri[1].y - tri[2].y, tri[2].x - tri[1].x) * (1.0 / jac),
        Point2::new(tri[2].y - tri[0].y, tri[0].x - tri[2].x) * (1.0 / jac),
        Point2::new(tri[0].y - tri[1].y, tri[1].x - tri[0].x) * (1.0 / jac),
    ];
    triangle_rule(degree)
        .iter()
        .map(|&[xi, eta, w]| {
            let l = [1.0 - xi - eta, xi, eta];
            QuadPoint {
                w: w * jac,
                v2: p2_shape(l),
                g2: p2_grad(l, gl),
                v1: p1_shape(l),
                g1: gl,
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OracleScheme {
    Bdf2Implicit,
    CnExplicit,
}

/// Independent pressure-correction stepper for plain Taylor-Hood (P2/P1) on
/// one uncut mesh: dense assembly from barycentric shape formulas, direct
/// factorization, Dirichlet velocity data everywhere on the boundary, and a
/// pinned-then-recentered pressure solve for the pure-Neumann correction.
pub struct SingleMeshOracle {
    nv: usize,
    nq: usize,
    cells: Vec<Cell>,
    dirichlet: Vec<(usize, Point2)>,
    pressure_lu: DenseLu,
    mass_lu: DenseLu,
    pub u_n: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub p: Vec<f64>,
    pub t: f64,
}

impl SingleMeshOracle {
    pub fn new(
        sv: &Arc<FunctionSpace>,
        sq: &Arc<FunctionSpace>,
        wall_marker: i32,
        u_n: Vec<f64>,
        u_prev: Vec<f64>,
        p: Vec<f64>,
    ) -> SingleMeshOracle {
        assert_eq!(sv.mm.num_meshes(), 1);
        assert_eq!(sv.element.degree, 2);
        assert_eq!(sq.element.degree, 1);
        let mesh = &sv.mm.meshes[0];
        let nv = sv.n_dofs;
        let nq = sq.n_dofs;
        let cells: Vec<Cell> = (0..mesh.num_cells())
            .map(|ci| {
                let tri = mesh.cell_vertices(ci);
                Cell {
                    vdofs: sv.cell_dofs(0, ci),
                    qdofs: sq.cell_dofs(0, ci),
                    full: tabulate(tri, 4),
                    low: tabulate(tri, 2),
                }
            })
            .collect();
        let dirichlet = sv.dirichlet_dofs(wall_marker).unwrap();

        let mut stiff = vec![0.0; nq * nq];
        for cell in &cells {
            for qp in &cell.low {
                for a in 0..3 {
                    for b in 0..3 {
                        stiff[cell.qdofs[a] * nq + cell.qdofs[b]] +=
                            qp.w * qp.g1[a].dot(qp.g1[b]);
                    }
                }
            }
        }
        for j in 0..nq {
            stiff[j] = if j == 0 { 1.0 } else { 0.0 };
        }
        let pressure_lu = DenseLu::factor(nq, stiff);

        let mut mass = vec![0.0; nv * nv];
        for cell in &cells {
            for qp in &cell.full {
                for a in 0..6 {
                    for b in 0..6 {
                        let v = qp.w * qp.v2[a] * qp.v2[b];
                        for c in 0..2 {
                            mass[cell.vdofs[2 * a + c] * nv + cell.vdofs[2 * b + c]] += v;
                        }
                    }
                }
            }
        }
        for &(dof, _) in &dirichlet {
            for j in 0..nv {
                mass[dof * nv + j] = if j == dof { 1.0 } else { 0.0 };
            }
        }
        let mass_lu = DenseLu::factor(nv, mass);

        SingleMeshOracle {
            nv,
            nq,
            cells,
            dirichlet,
            pressure_lu,
            mass_lu,
            u_n,
            u_prev,
            p,
            t: 0.0,
        }
    }

    fn vec_at(coeffs: &[f64], dofs: &[usize], sh: &[f64; 6]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for i in 0..6 {
            out[0] += coeffs[dofs[2 * i]] * sh[i];
            out[1] += coeffs[dofs[2 * i + 1]] * sh[i];
        }
        out
    }

    fn grad_at(coeffs: &[f64], dofs: &[usize], gr: &[Point2; 6]) -> [Point2; 2] {
        let mut out = [Point2::default(); 2];
        for i in 0..6 {
            out[0] += gr[i] * coeffs[dofs[2 * i]];
            out[1] += gr[i] * coeffs[dofs[2 * i + 1]];
        }
        out
    }

    /// One incremental pressure-correction step against exact Dirichlet
    /// data `g(x, t)` evaluated at the step's target time.
    pub fn step(
        &mut self,
        scheme: OracleScheme,
        dt: f64,
        nu: f64,
        g: impl Fn(Point2, f64) -> [f64; 2],
    ) {
        let nv = self.nv;
        let nq = self.nq;
        let t_next = self.t + dt;

        let (mass_w, visc_w, conv_impl, hist0, hist1, expl0, expl1, lcn) = match scheme {
            OracleScheme::Bdf2Implicit => (
                3.0 / (2.0 * dt),
                nu,
                1.0,
                2.0 / dt,
                -1.0 / (2.0 * dt),
                0.0,
                0.0,
                0.0,
            ),
            OracleScheme::CnExplicit => (1.0 / dt, 0.5 * nu, 0.0, 1.0 / dt, 0.0, 1.5, -0.5, 0.5),
        };

        let mut a = vec![0.0; nv * nv];
        let mut rhs = vec![0.0; nv];
        for cell in &self.cells {
            let vd = &cell.vdofs;
            for qp in &cell.full {
                let unv = Self::vec_at(&self.u_n, vd, &qp.v2);
                let ung = Self::grad_at(&self.u_n, vd, &qp.g2);
                let upv = Self::vec_at(&self.u_prev, vd, &qp.v2);
                let upg = Self::grad_at(&self.u_prev, vd, &qp.g2);
                let mut pv = 0.0;
                for i in 0..3 {
                    pv += self.p[cell.qdofs[i]] * qp.v1[i];
                }
                let adv = [
                    2.0 * unv[0] - upv[0],
                    2.0 * unv[1] - upv[1],
                ];
                for i in 0..6 {
                    let pa = qp.v2[i];
                    let ga = qp.g2[i];
                    if conv_impl != 0.0 {
                        for j in 0..6 {
                            let conv = (adv[0] * qp.g2[j].x + adv[1] * qp.g2[j].y) * pa;
                            let v = qp.w
                                * (mass_w * pa * qp.v2[j]
                                    + visc_w * ga.dot(qp.g2[j])
                                    + conv_impl * conv);
                            for c in 0..2 {
                                a[vd[2 * i + c] * nv + vd[2 * j + c]] += v;
                            }
                        }
                    } else {
                        for j in 0..6 {
                            let v = qp.w * (mass_w * pa * qp.v2[j] + visc_w * ga.dot(qp.g2[j]));
                            for c in 0..2 {
                                a[vd[2 * i + c] * nv + vd[2 * j + c]] += v;
                            }
                        }
                    }
                    for c in 0..2 {
                        let gac = if c == 0 { ga.x } else { ga.y };
                        let r = hist0 * unv[c] * pa
                            + hist1 * upv[c] * pa
                            + pv * gac
                            - expl0 * (unv[0] * ung[c].x + unv[1] * ung[c].y) * pa
                            - expl1 * (upv[0] * upg[c].x + upv[1] * upg[c].y) * pa
                            - lcn * nu * ung[c].dot(ga);
                        rhs[vd[2 * i + c]] += qp.w * r;
                    }
                }
            }
        }
        for &(dof, pos) in &self.dirichlet {
            for j in 0..nv {
                a[dof * nv + j] = if j == dof { 1.0 } else { 0.0 };
            }
            rhs[dof] = g(pos, t_next)[dof % 2];
        }
        let u_star = DenseLu::factor(nv, a).solve(&rhs);

        let coef = match scheme {
            OracleScheme::Bdf2Implicit => 3.0 / (2.0 * dt),
            OracleScheme::CnExplicit => 1.0 / dt,
        };
        let mut rhs_p = vec![0.0; nq];
        for cell in &self.cells {
            for qp in &cell.full {
                let gr = Self::grad_at(&u_star, &cell.vdofs, &qp.g2);
                let div = gr[0].x + gr[1].y;
                for (i, &dof) in cell.qdofs.iter().enumerate() {
                    rhs_p[dof] -= qp.w * coef * div * qp.v1[i];
                }
            }
        }
        let mean: f64 = rhs_p.iter().sum::<f64>() / nq as f64;
        for v in rhs_p.iter_mut() {
            *v -= mean;
        }
        rhs_p[0] = 0.0;
        let mut phi = self.pressure_lu.solve(&rhs_p);
        let mut integral = 0.0;
        let mut area = 0.0;
        for cell in &self.cells {
            for qp in &cell.low {
                let mut v = 0.0;
                for i in 0..3 {
                    v += phi[cell.qdofs[i]] * qp.v1[i];
                }
                integral += qp.w * v;
                area += qp.w;
            }
        }
        let phi_mean = integral / area;
        for v in phi.iter_mut() {
            *v -= phi_mean;
        }
        for (pc, &fc) in self.p.iter_mut().zip(&phi) {
            *pc += fc;
        }

        let gf = match scheme {
            OracleScheme::Bdf2Implicit => 2.0 * dt / 3.0,
            OracleScheme::CnExplicit => dt,
        };
        let mut rhs_u = vec![0.0; nv];
        for cell in &self.cells {
            for qp in &cell.full {
                let uv = Self::vec_at(&u_star, &cell.vdofs, &qp.v2);
                let mut gp = Point2::default();
                for i in 0..3 {
                    gp += qp.g1[i] * phi[cell.qdofs[i]];
                }
                let target = [uv[0] - gf * gp.x, uv[1] - gf * gp.y];
                for i in 0..6 {
                    let pa = qp.v2[i];
                    rhs_u[cell.vdofs[2 * i]] += qp.w * target[0] * pa;
                    rhs_u[cell.vdofs[2 * i + 1]] += qp.w * target[1] * pa;
                }
            }
        }
        for &(dof, pos) in &self.dirichlet {
            rhs_u[dof] = g(pos, t_next)[dof % 2];
        }
        let u_new = self.mass_lu.solve(&rhs_u);

        self.u_prev = std::mem::replace(&mut self.u_n, u_new);
        self.t = t_next;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub const EQUIV_DT: f64 = 0.01;

/// March the stacked solver on a trivial one-mesh stack next to the dense
/// oracle and return the worst per-step coefficient deviations.
pub fn run_equivalence(
    scheme: Scheme,
    convection: Convection,
    oracle_scheme: OracleScheme,
    p0_time: f64,
) -> (f64, f64) {
    const NU: f64 = 0.01;
    const STEPS: usize = 20;
    let dt = EQUIV_DT;
    let mesh = generate_rect_mesh(-1.0, -1.0, 1.0, 1.0, 5, 5, SideMarkers::all(WALL)).unwrap();
    let mm = Arc::new(MultiMesh::build(vec![mesh], 6).unwrap());
    let sv = Arc::new(FunctionSpace::build(mm.clone(), Element::vector(2).unwrap()));
    let sq = Arc::new(FunctionSpace::build(mm, Element::scalar(1).unwrap()));

    let u0 = MultiMeshFunction::interpolate(sv.clone(), |p| velocity(p, 0.0, NU));
    let um1 = MultiMeshFunction::interpolate(sv.clone(), |p| velocity(p, -dt, NU));
    let p0 = MultiMeshFunction::interpolate_scalar(sq.clone(), |p| pressure(p, p0_time, NU));

    let problem = Problem {
        space_v: sv.clone(),
        space_q: sq.clone(),
        nu: NU,
        velocity_bcs: vec![(WALL, Box::new(|p, t| velocity(p, t, NU)) as TimeField)],
        pressure_dirichlet: vec![],
        body_force: None,
    };
    let mut config = IpcsConfig::new(scheme, convection, dt, STEPS as f64 * dt);
    config.tentative_solver = SolverSpec::bicgstab(1e-14);
    config.pressure_solver = SolverSpec::cg(1e-14);
    config.update_solver = SolverSpec::cg(1e-14);
    let mut solver = IpcsSolver::new(&problem, config).unwrap();
    let mut state = solver
        .initial_state(InitialConditions::TwoLevels {
            u_n: u0.clone(),
            u_prev: um1.clone(),
            p: p0.clone(),
        })
        .unwrap();

    let mut oracle = SingleMeshOracle::new(
        &sv,
        &sq,
        WALL,
        u0.coeffs.clone(),
        um1.coeffs.clone(),
        p0.coeffs.clone(),
    );

    let mut worst_u = 0.0f64;
    let mut worst_p = 0.0f64;
    for step in 1..=STEPS {
        solver.step(&mut state).unwrap();
        oracle.step(oracle_scheme, dt, NU, |p, t| velocity(p, t, NU));
        let du = max_abs_diff(&state.u_n.coeffs, &oracle.u_n);
        let dp = max_abs_diff(&state.p.coeffs, &oracle.p);
        assert!(
            du <= 1e-10,
            "step {step}: velocity coefficients deviate by {du:.3e}"
        );
        assert!(
            dp <= 1e-10,
            "step {step}: pressure coefficients deviate by {dp:.3e}"
        );
        worst_u = worst_u.max(du);
        worst_p = worst_p.max(dp);
    }
    assert!(state.u_n.coeffs.iter().any(|&v| v.abs() > 0.1));
    (worst_u, worst_p)
}
