//! Finite element spaces and assembly: continuous piecewise-linear pressure,
//! piecewise-constant vector conductance, and lowest-order Raviart-Thomas
//! fluxes (one RT0 field per conductance component).
//!
//! Conventions: the RT0 degree of freedom on edge `e` is the (constant)
//! normal trace against the global edge normal, obtained by rotating the
//! lower-to-higher vertex direction clockwise. On a triangle the basis
//! function for the edge opposite vertex `P` is
//! `s * |e| / (2|T|) * (x - P)` with `s` the traversal sign stored in the
//! mesh, so its divergence is `s |e| / |T|`.

use crate::error::{Error, Result};
use crate::linalg::{dot, pcg, CgStats, CsrMatrix, LinearOp};
use crate::mesh::{Mesh, Point};

pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

/// Piecewise constant coefficient, either uniform or one value per triangle.
#[derive(Debug, Clone)]
pub enum FieldCoeff {
    Constant(f64),
    PerTriangle(Vec<f64>),
}

impl FieldCoeff {
    pub fn eval(&self, t: usize) -> f64 {
        match self {
            FieldCoeff::Constant(v) => *v,
            FieldCoeff::PerTriangle(v) => v[t],
        }
    }

    pub fn min_value(&self) -> f64 {
        match self {
            FieldCoeff::Constant(v) => *v,
            FieldCoeff::PerTriangle(v) => v.iter().fold(f64::INFINITY, |m, x| m.min(*x)),
        }
    }

    pub fn validate_len(&self, n_triangles: usize, name: &'static str) -> Result<()> {
        if let FieldCoeff::PerTriangle(v) = self {
            if v.len() != n_triangles {
                return Err(Error::invalid(
                    name,
                    format!("{} per-triangle values for {} triangles", v.len(), n_triangles),
                ));
            }
        }
        Ok(())
    }
}

/// Continuous piecewise-linear scalar field with a Dirichlet vertex mask.
/// Constrained vertices carry the boundary value 0 throughout this crate.
#[derive(Debug, Clone)]
pub struct ScalarFieldP1 {
    pub values: Vec<f64>,
    pub dirichlet: Vec<bool>,
}

impl ScalarFieldP1 {
    pub fn zeros(mesh: &Mesh) -> Self {
        ScalarFieldP1 {
            values: vec![0.0; mesh.n_vertices()],
            dirichlet: mesh.dirichlet_vertex_mask().to_vec(),
        }
    }

    /// Interpolate a function at the vertices; constrained vertices are set
    /// to zero regardless of `f`.
    pub fn interpolate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        let mut field = Self::zeros(mesh);
        for v in 0..mesh.n_vertices() {
            if !field.dirichlet[v] {
                field.values[v] = f(mesh.vertex(v));
            }
        }
        field
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn enforce_dirichlet(&mut self) {
        for (v, d) in self.values.iter_mut().zip(&self.dirichlet) {
            if *d {
                *v = 0.0;
            }
        }
    }
}

/// One 2-vector per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldP0 {
    pub values: Vec<[f64; 2]>,
}

impl VectorFieldP0 {
    pub fn zeros(mesh: &Mesh) -> Self {
        VectorFieldP0 {
            values: vec![[0.0, 0.0]; mesh.n_triangles()],
        }
    }

    pub fn constant(mesh: &Mesh, v: [f64; 2]) -> Self {
        VectorFieldP0 {
            values: vec![v; mesh.n_triangles()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v[0].is_finite() && v[1].is_finite())
    }

    pub fn norm_at(&self, t: usize) -> f64 {
        let [x, y] = self.values[t];
        x.hypot(y)
    }
}

/// Two RT0 fields (one per conductance component); `comps[c][e]` is the
/// normal-trace dof of component `c` on edge `e`.
#[derive(Debug, Clone)]
pub struct FluxFieldRT0 {
    pub comps: [Vec<f64>; 2],
}

impl FluxFieldRT0 {
    pub fn zeros(mesh: &Mesh) -> Self {
        FluxFieldRT0 {
            comps: [vec![0.0; mesh.n_edges()], vec![0.0; mesh.n_edges()]],
        }
    }

    /// Total number of scalar degrees of freedom (edge count times two).
    pub fn dof_count(&self) -> usize {
        self.comps[0].len() + self.comps[1].len()
    }

    /// Value of component `c` at point `x` inside triangle `t`.
    pub fn eval(&self, mesh: &Mesh, t: usize, c: usize, x: Point) -> [f64; 2] {
        let tri = mesh.triangle(t);
        let edges = mesh.tri_edges(t);
        let signs = mesh.tri_edge_signs(t);
        let area = mesh.area(t);
        let mut out = [0.0, 0.0];
        for i in 0..3 {
            let e = edges[i];
            let p_opp = mesh.vertex(tri[i]);
            let coeff = self.comps[c][e] * signs[i] as f64 * mesh.edge_length(e) / (2.0 * area);
            out[0] += coeff * (x[0] - p_opp[0]);
            out[1] += coeff * (x[1] - p_opp[1]);
        }
        out
    }
}

/// Gradients of the three P1 basis functions on triangle `t`
/// (constant vectors, one per local vertex).
pub fn p1_basis_gradients(mesh: &Mesh, t: usize) -> [[f64; 2]; 3] {
    let [a, b, c] = mesh.triangle(t);
    let (pa, pb, pc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
    let inv = 1.0 / (2.0 * mesh.area(t));
    let rot = |p: Point, q: Point| [-(q[1] - p[1]) * inv, (q[0] - p[0]) * inv];
    // grad(phi_a) = rot90(pc - pb) / (2|T|), cyclically
    [rot(pb, pc), rot(pc, pa), rot(pa, pb)]
}

/// Exact gradient of the piecewise-linear interpolant, one vector per triangle.
pub fn gradient_per_triangle(mesh: &Mesh, p: &ScalarFieldP1) -> VectorFieldP0 {
    assert_eq!(p.len(), mesh.n_vertices());
    let mut out = VectorFieldP0::zeros(mesh);
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangle(t);
        let grads = p1_basis_gradients(mesh, t);
        let mut g = [0.0, 0.0];
        for i in 0..3 {
            let v = p.values[tri[i]];
            g[0] += v * grads[i][0];
            g[1] += v * grads[i][1];
        }
        out.values[t] = g;
    }
    out
}

/// Discrete velocity `u = (r I + m (x) m) grad p`, one vector per triangle.
pub fn velocity(
    mesh: &Mesh,
    m: &VectorFieldP0,
    p: &ScalarFieldP1,
    r: &FieldCoeff,
) -> VectorFieldP0 {
    let grad = gradient_per_triangle(mesh, p);
    let mut out = VectorFieldP0::zeros(mesh);
    for t in 0..mesh.n_triangles() {
        let g = grad.values[t];
        let mv = m.values[t];
        let rt = r.eval(t);
        let mg = mv[0] * g[0] + mv[1] * g[1];
        out.values[t] = [rt * g[0] + mg * mv[0], rt * g[1] + mg * mv[1]];
    }
    out
}

/// Symmetric sparse system with a constrained-index set (homogeneous
/// Dirichlet rows are identity rows with zero right-hand side).
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub constrained: Vec<bool>,
}

impl SparseSystem {
    pub fn n(&self) -> usize {
        self.rhs.len()
    }

    /// Max relative asymmetry of the stored matrix.
    pub fn asymmetry(&self) -> f64 {
        self.matrix.asymmetry()
    }

    /// Probabilistic positive-definiteness check on the free index set:
    /// random quadratic forms must be strictly positive.
    pub fn check_spd_probabilistic(&self, seed: u64, trials: usize) -> bool {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.n();
        let mut y = vec![0.0; n];
        for _ in 0..trials {
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    if self.constrained[i] {
                        0.0
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect();
            if x.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.matrix.mul_vec(&x, &mut y);
            if dot(&x, &y) <= 0.0 {
                return false;
            }
        }
        true
    }
}

/// Galerkin system for the pressure equation
/// `-div[(r I + m (x) m) grad p] = S` with P1 elements. The permeability
/// tensor is symmetric positive definite for `r > 0`, so the system is SPD
/// on the free vertices. The source is integrated with the 3-point
/// edge-midpoint rule.
pub fn assemble_pressure_system(
    mesh: &Mesh,
    m: &VectorFieldP0,
    r: &FieldCoeff,
    source: &dyn Fn(usize, Point) -> f64,
) -> Result<SparseSystem> {
    r.validate_len(mesh.n_triangles(), "r")?;
    if r.min_value() <= 0.0 {
        return Err(Error::invalid(
            "r",
            format!("background permeability must be positive (min {})", r.min_value()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::invalid("m", "conductance field has non-finite entries"));
    }
    assert_eq!(m.len(), mesh.n_triangles());

    let n = mesh.n_vertices();
    let constrained = mesh.dirichlet_vertex_mask().to_vec();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * mesh.n_triangles() + n);
    let mut rhs = vec![0.0; n];

    for t in 0..mesh.n_triangles() {
        let area = mesh.area(t);
        if !(area > 0.0) {
            return Err(Error::Mesh(format!("triangle {t} is degenerate")));
        }
        let tri = mesh.triangle(t);
        let grads = p1_basis_gradients(mesh, t);
        let rt = r.eval(t);
        let mv = m.values[t];
        // K = r I + m (x) m
        let k = [
            [rt + mv[0] * mv[0], mv[0] * mv[1]],
            [mv[0] * mv[1], rt + mv[1] * mv[1]],
        ];
        let mids = mesh.edge_midpoints(t);
        for i in 0..3 {
            let gi = grads[i];
            let kgi = [
                k[0][0] * gi[0] + k[0][1] * gi[1],
                k[1][0] * gi[0] + k[1][1] * gi[1],
            ];
            let vi = tri[i];
            if !constrained[vi] {
                // phi_i is 1/2 at the two midpoints adjacent to vertex i
                let s =
                    source(t, mids[(i + 1) % 3]) + source(t, mids[(i + 2) % 3]);
                rhs[vi] += area / 6.0 * s;
            }
            for j in 0..3 {
                let vj = tri[j];
                if constrained[vi] || constrained[vj] {
                    continue;
                }
                let gj = grads[j];
                triplets.push((vi, vj, area * (kgi[0] * gj[0] + kgi[1] * gj[1])));
            }
        }
    }
    for (v, &c) in constrained.iter().enumerate() {
        if c {
            triplets.push((v, v, 1.0));
            rhs[v] = 0.0;
        }
    }
    Ok(SparseSystem {
        matrix: CsrMatrix::from_triplets(n, n, &mut triplets),
        rhs,
        constrained,
    })
}

/// Solve an SPD system by Jacobi-preconditioned CG to the requested relative
/// residual. Dirichlet values are exact by construction of the system.
pub fn solve_spd(
    system: &SparseSystem,
    tol: f64,
    x0: Option<&[f64]>,
) -> Result<(ScalarFieldP1, CgStats)> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::invalid("tol", "relative tolerance must be in (0, 1)"));
    }
    let diag = system.matrix.diagonal();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::IndefiniteMatrix(
            diag.iter().copied().fold(f64::INFINITY, f64::min),
        ));
    }
    let n = system.n();
    let max_iter = 1000.max(5 * n);
    let (values, stats) = pcg(&system.matrix, &system.rhs, x0, Some(&diag), tol, max_iter)?;
    Ok((
        ScalarFieldP1 {
            values,
            dirichlet: system.constrained.clone(),
        },
        stats,
    ))
}

/// L2 projection onto P0: per-triangle mean by the 3-point midpoint rule
/// (exact for quadratic integrands).
pub fn l2_project_p0(mesh: &Mesh, f: &dyn Fn(Point) -> [f64; 2]) -> VectorFieldP0 {
    let mut out = VectorFieldP0::zeros(mesh);
    for t in 0..mesh.n_triangles() {
        let mids = mesh.edge_midpoints(t);
        let mut acc = [0.0, 0.0];
        for mid in mids {
            let v = f(mid);
            acc[0] += v[0];
            acc[1] += v[1];
        }
        out.values[t] = [acc[0] / 3.0, acc[1] / 3.0];
    }
    out
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

fn polygon_area(poly: &[Point]) -> f64 {
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    a.abs() / 2.0
}

/// Clip a convex polygon against the half-plane `keep(p) >= 0`.
fn clip_half_plane(poly: &[Point], keep: impl Fn(Point) -> f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let dp = keep(p);
        let dq = keep(q);
        if dp >= 0.0 {
            out.push(p);
        }
        if (dp > 0.0 && dq < 0.0) || (dp < 0.0 && dq > 0.0) {
            let t = dp / (dp - dq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Fraction of triangle `t` covered by the rectangle (exact polygon clipping).
pub fn triangle_rect_fraction(mesh: &Mesh, t: usize, rect: &Rect) -> f64 {
    let tri = mesh.triangle(t);
    let mut poly: Vec<Point> = tri.iter().map(|&v| mesh.vertex(v)).collect();
    poly = clip_half_plane(&poly, |p| p[0] - rect.x[0]);
    poly = clip_half_plane(&poly, |p| rect.x[1] - p[0]);
    poly = clip_half_plane(&poly, |p| p[1] - rect.y[0]);
    poly = clip_half_plane(&poly, |p| rect.y[1] - p[1]);
    if poly.len() < 3 {
        return 0.0;
    }
    polygon_area(&poly) / mesh.area(t)
}

/// Exact L2 projection of `value * chi_rect` applied to one conductance
/// component: the per-triangle mean equals the covered area fraction.
pub fn project_rect_indicator(
    mesh: &Mesh,
    rect: &Rect,
    value: f64,
    component: usize,
) -> VectorFieldP0 {
    let mut out = VectorFieldP0::zeros(mesh);
    for t in 0..mesh.n_triangles() {
        out.values[t][component] = value * triangle_rect_fraction(mesh, t, rect);
    }
    out
}

// 7-point degree-5 quadrature rule (barycentric coordinates, weights sum 1).
const QUAD5_W0: f64 = 0.225;
const QUAD5_A1: f64 = 0.059_715_871_789_770;
const QUAD5_B1: f64 = 0.470_142_064_105_115;
const QUAD5_W1: f64 = 0.132_394_152_788_506;
const QUAD5_A2: f64 = 0.797_426_985_353_087;
const QUAD5_B2: f64 = 0.101_286_507_323_456;
const QUAD5_W2: f64 = 0.125_939_180_544_827;

/// Integrate `f` over triangle `t` with a degree-5 rule; used for error norms
/// where the 3-point rule is not accurate enough.
pub fn integrate_deg5(mesh: &Mesh, t: usize, f: &dyn Fn(Point) -> f64) -> f64 {
    let [a, b, c] = mesh.triangle(t);
    let (pa, pb, pc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
    let at = |l: [f64; 3]| -> Point {
        [
            l[0] * pa[0] + l[1] * pb[0] + l[2] * pc[0],
            l[0] * pa[1] + l[1] * pb[1] + l[2] * pc[1],
        ]
    };
    let mut acc = QUAD5_W0 * f(at([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]));
    for rot in 0..3 {
        let mut l1 = [QUAD5_B1; 3];
        l1[rot] = QUAD5_A1;
        acc += QUAD5_W1 * f(at(l1));
        let mut l2 = [QUAD5_B2; 3];
        l2[rot] = QUAD5_A2;
        acc += QUAD5_W2 * f(at(l2));
    }
    acc * mesh.area(t)
}

/// L2 norm of a per-triangle vector field.
pub fn l2_norm_p0(mesh: &Mesh, v: &VectorFieldP0) -> f64 {
    (0..mesh.n_triangles())
        .map(|t| {
            let [x, y] = v.values[t];
            mesh.area(t) * (x * x + y * y)
        })
        .sum::<f64>()
        .sqrt()
}

/// L1 norm of the pointwise Euclidean magnitude of a per-triangle field.
pub fn l1_norm_p0(mesh: &Mesh, v: &VectorFieldP0) -> f64 {
    (0..mesh.n_triangles())
        .map(|t| mesh.area(t) * v.norm_at(t))
        .sum()
}

/// H1 seminorm of a P1 field (L2 norm of its gradient).
pub fn h1_seminorm(mesh: &Mesh, p: &ScalarFieldP1) -> f64 {
    l2_norm_p0(mesh, &gradient_per_triangle(mesh, p))
}

/// Exact L2 norm of a P1 field via the element mass matrix.
pub fn l2_norm_p1(mesh: &Mesh, p: &ScalarFieldP1) -> f64 {
    let mut acc = 0.0;
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangle(t);
        let vals = [p.values[tri[0]], p.values[tri[1]], p.values[tri[2]]];
        let area = mesh.area(t);
        // local mass: area/12 * (2 delta_ij + 1)
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { 2.0 } else { 1.0 };
                q += w * vals[i] * vals[j];
            }
        }
        acc += area / 12.0 * q;
    }
    acc.sqrt()
}

/// Boundary condition for the conductance field in the mixed formulation.
/// Homogeneous Dirichlet `m` enters naturally through the divergence term;
/// homogeneous Neumann `m` makes the normal flux essential, so boundary
/// flux dofs are constrained to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MBoundary {
    Dirichlet,
    Neumann,
}

/// The coupled (m, sigma) operator for one implicit diffusion solve per
/// conductance component. Eliminating sigma through the exact RT0 mass
/// matrix leaves the SPD Schur complement
/// `diag(|T|) + delta D^2 B M^-1 B'` acting on the P0 conductance.
pub struct MixedOperator {
    d_sq: f64,
    rt_mass: CsrMatrix,
    rt_mass_diag: Vec<f64>,
    /// B[t, e] = sign * |e| over free edges (divergence pairing).
    div: CsrMatrix,
    areas: Vec<f64>,
    free_edge: Vec<bool>,
    inner_tol: f64,
}

const RT_MASS_SOLVE_TOL: f64 = 1e-13;

/// Assemble the mixed diffusion operator for diffusivity `D >= 0`.
pub fn assemble_mixed_operator(mesh: &Mesh, d: f64, m_bc: MBoundary) -> Result<MixedOperator> {
    if !(d >= 0.0) {
        return Err(Error::invalid("D", "diffusivity must be nonnegative"));
    }
    let ne = mesh.n_edges();
    let nt = mesh.n_triangles();
    let free_edge: Vec<bool> = match m_bc {
        MBoundary::Dirichlet => vec![true; ne],
        MBoundary::Neumann => mesh.edges().iter().map(|e| !e.is_boundary()).collect(),
    };

    let mut mass_triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * nt + ne);
    let mut div_triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * nt);
    for t in 0..nt {
        let tri = mesh.triangle(t);
        let edges = mesh.tri_edges(t);
        let signs = mesh.tri_edge_signs(t);
        let area = mesh.area(t);
        let mids = mesh.edge_midpoints(t);
        for i in 0..3 {
            if !free_edge[edges[i]] {
                continue;
            }
            let pi = mesh.vertex(tri[i]);
            let ci = signs[i] as f64 * mesh.edge_length(edges[i]) / (2.0 * area);
            div_triplets.push((t, edges[i], signs[i] as f64 * mesh.edge_length(edges[i])));
            for j in 0..3 {
                if !free_edge[edges[j]] {
                    continue;
                }
                let pj = mesh.vertex(tri[j]);
                let cj = signs[j] as f64 * mesh.edge_length(edges[j]) / (2.0 * area);
                // midpoint rule, exact for the quadratic integrand
                let mut acc = 0.0;
                for mid in mids {
                    acc += (mid[0] - pi[0]) * (mid[0] - pj[0])
                        + (mid[1] - pi[1]) * (mid[1] - pj[1]);
                }
                mass_triplets.push((edges[i], edges[j], ci * cj * area / 3.0 * acc));
            }
        }
    }
    for (e, &free) in free_edge.iter().enumerate() {
        if !free {
            mass_triplets.push((e, e, 1.0));
        }
    }
    let rt_mass = CsrMatrix::from_triplets(ne, ne, &mut mass_triplets);
    let rt_mass_diag = rt_mass.diagonal();
    let div = CsrMatrix::from_triplets(nt, ne, &mut div_triplets);
    Ok(MixedOperator {
        d_sq: d * d,
        rt_mass,
        rt_mass_diag,
        div,
        areas: (0..nt).map(|t| mesh.area(t)).collect(),
        free_edge,
        inner_tol: RT_MASS_SOLVE_TOL,
    })
}

struct SchurOp<'a> {
    op: &'a MixedOperator,
    delta_dsq: f64,
}

impl LinearOp for SchurOp<'_> {
    fn size(&self) -> usize {
        self.op.areas.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let ne = self.op.rt_mass.n_rows();
        let mut bt_x = vec![0.0; ne];
        self.op.div.mul_transpose_vec(x, &mut bt_x);
        let (minv, _) = pcg(
            &self.op.rt_mass,
            &bt_x,
            None,
            Some(&self.op.rt_mass_diag),
            self.op.inner_tol,
            20_000,
        )
        .expect("RT0 mass matrix solve");
        self.op.div.mul_vec(&minv, y);
        for (i, v) in y.iter_mut().enumerate() {
            *v = self.op.areas[i] * x[i] + self.delta_dsq * *v;
        }
    }
}

impl MixedOperator {
    pub fn d_sq(&self) -> f64 {
        self.d_sq
    }

    /// Solve one implicit diffusion step per component:
    /// `(diag(|T|) + delta D^2 B M^-1 B') m = diag(|T|) rhs`,
    /// then recover `sigma = -M^-1 B' m`.
    pub fn implicit_step(
        &self,
        mesh: &Mesh,
        delta: f64,
        rhs: &VectorFieldP0,
        tol: f64,
        warm: Option<&VectorFieldP0>,
    ) -> Result<(VectorFieldP0, FluxFieldRT0)> {
        if !(delta > 0.0) {
            return Err(Error::invalid("delta", "time step must be positive"));
        }
        let nt = self.areas.len();
        let op = SchurOp {
            op: self,
            delta_dsq: delta * self.d_sq,
        };
        // diag(Schur) approximated with the lumped mass contribution
        let mut precond = vec![0.0; nt];
        for t in 0..nt {
            let (cols, vals) = self.div.row(t);
            let mut extra = 0.0;
            for (e, v) in cols.iter().zip(vals) {
                extra += v * v / self.rt_mass_diag[*e];
            }
            precond[t] = self.areas[t] + delta * self.d_sq * extra;
        }
        let mut m_new = VectorFieldP0 {
            values: vec![[0.0, 0.0]; nt],
        };
        for c in 0..2 {
            let b: Vec<f64> = (0..nt).map(|t| self.areas[t] * rhs.values[t][c]).collect();
            let w: Option<Vec<f64>> = warm.map(|w| w.values.iter().map(|v| v[c]).collect());
            let (x, _) = pcg(&op, &b, w.as_deref(), Some(&precond), tol, 50_000)?;
            for t in 0..nt {
                m_new.values[t][c] = x[t];
            }
        }
        let sigma = self.recover_flux(mesh, &m_new)?;
        Ok((m_new, sigma))
    }

    /// Flux recovery `sigma_c = -M^-1 B' m_c` (constrained dofs stay zero).
    pub fn recover_flux(&self, mesh: &Mesh, m: &VectorFieldP0) -> Result<FluxFieldRT0> {
        let ne = self.rt_mass.n_rows();
        let mut out = FluxFieldRT0::zeros(mesh);
        for c in 0..2 {
            let mc: Vec<f64> = m.values.iter().map(|v| v[c]).collect();
            let mut bt = vec![0.0; ne];
            self.div.mul_transpose_vec(&mc, &mut bt);
            for v in bt.iter_mut() {
                *v = -*v;
            }
            let (sigma, _) = pcg(
                &self.rt_mass,
                &bt,
                None,
                Some(&self.rt_mass_diag),
                self.inner_tol,
                20_000,
            )?;
            out.comps[c] = sigma;
        }
        Ok(out)
    }

    /// Defect of the flux equation `int sigma.mu + int m div(mu)` for every
    /// free RT0 basis function; the max absolute value should sit at solver
    /// tolerance after `recover_flux`.
    pub fn flux_residual(&self, m: &VectorFieldP0, sigma: &FluxFieldRT0) -> f64 {
        let ne = self.rt_mass.n_rows();
        let mut worst = 0.0_f64;
        for c in 0..2 {
            let mc: Vec<f64> = m.values.iter().map(|v| v[c]).collect();
            let mut bt = vec![0.0; ne];
            self.div.mul_transpose_vec(&mc, &mut bt);
            let mut ms = vec![0.0; ne];
            self.rt_mass.mul_vec(&sigma.comps[c], &mut ms);
            for e in 0..ne {
                if self.free_edge[e] {
                    worst = worst.max((ms[e] + bt[e]).abs());
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_diamond, generate_unit_square};
    use approx::assert_relative_eq;

    fn zero_source(_: usize, _: Point) -> f64 {
        0.0
    }

    #[test]
    fn p1_gradient_is_exact_for_linears() {
        let mesh = generate_diamond(0.4).unwrap();
        let mut p = ScalarFieldP1::zeros(&mesh);
        for v in 0..mesh.n_vertices() {
            let [x, y] = mesh.vertex(v);
            p.values[v] = 2.0 * x + 3.0 * y;
        }
        let g = gradient_per_triangle(&mesh, &p);
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(g.values[t][0], 2.0, max_relative = 1e-12);
            assert_relative_eq!(g.values[t][1], 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn p1_gradient_of_constant_vanishes() {
        let mesh = generate_unit_square(3).unwrap();
        let mut p = ScalarFieldP1::zeros(&mesh);
        p.values.iter_mut().for_each(|v| *v = 7.5);
        let g = gradient_per_triangle(&mesh, &p);
        for t in 0..mesh.n_triangles() {
            assert!(g.norm_at(t) < 1e-12);
        }
    }

    #[test]
    fn laplace_stiffness_matches_five_point_stencil() {
        // n = 2 unit square: one interior vertex with the classic P1 row
        let mesh = generate_unit_square(2).unwrap();
        let m = VectorFieldP0::zeros(&mesh);
        let sys =
            assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(1.0), &zero_source).unwrap();
        let center = (0..mesh.n_vertices())
            .find(|&v| {
                let [x, y] = mesh.vertex(v);
                (x - 0.5).abs() < 1e-12 && (y - 0.5).abs() < 1e-12
            })
            .unwrap();
        assert_relative_eq!(sys.matrix.get(center, center), 4.0, max_relative = 1e-12);
        assert!(sys.asymmetry() <= 1e-14);
    }

    #[test]
    fn anisotropic_permeability_stays_spd() {
        let mesh = generate_diamond(0.3).unwrap();
        let m = VectorFieldP0::constant(&mesh, [1.0, 0.0]);
        let sys =
            assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(1.0), &zero_source).unwrap();
        assert!(sys.asymmetry() <= 1e-14);
        assert!(sys.check_spd_probabilistic(7, 20));
        // quadratic form equals the direct elementwise integral for a probe
        let p = ScalarFieldP1::interpolate(&mesh, |[x, y]| x * x - 0.5 * y);
        let mut ap = vec![0.0; sys.n()];
        sys.matrix.mul_vec(&p.values, &mut ap);
        let form = dot(&p.values, &ap);
        let grad = gradient_per_triangle(&mesh, &p);
        let mut direct = 0.0;
        for t in 0..mesh.n_triangles() {
            let g = grad.values[t];
            // K = I + m(x)m with m = (1,0): diag(2, 1)
            direct += mesh.area(t) * (2.0 * g[0] * g[0] + g[1] * g[1]);
        }
        assert_relative_eq!(form, direct, max_relative = 1e-12);
    }

    #[test]
    fn rejects_nonpositive_permeability() {
        let mesh = generate_unit_square(2).unwrap();
        let m = VectorFieldP0::zeros(&mesh);
        assert!(
            assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(0.0), &zero_source).is_err()
        );
        assert!(assemble_pressure_system(
            &mesh,
            &m,
            &FieldCoeff::PerTriangle(vec![-1.0; mesh.n_triangles()]),
            &zero_source
        )
        .is_err());
    }

    #[test]
    fn solve_zero_rhs_gives_zero() {
        let mesh = generate_unit_square(3).unwrap();
        let m = VectorFieldP0::zeros(&mesh);
        let sys =
            assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(1.0), &zero_source).unwrap();
        let (p, _) = solve_spd(&sys, 1e-10, None).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manufactured_poisson_converges() {
        use std::f64::consts::PI;
        let exact = |[x, y]: Point| (PI * x).sin() * (PI * y).sin();
        let grad_exact = |[x, y]: Point| {
            [
                PI * (PI * x).cos() * (PI * y).sin(),
                PI * (PI * x).sin() * (PI * y).cos(),
            ]
        };
        let source =
            |_: usize, [x, y]: Point| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin();
        let mut errs_l2 = Vec::new();
        let mut errs_h1 = Vec::new();
        for n in [4usize, 8, 16] {
            let mesh = generate_unit_square(n).unwrap();
            let m = VectorFieldP0::zeros(&mesh);
            let sys =
                assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(1.0), &source).unwrap();
            let (p, _) = solve_spd(&sys, 1e-12, None).unwrap();
            let grad = gradient_per_triangle(&mesh, &p);
            let mut e_l2 = 0.0;
            let mut e_h1 = 0.0;
            for t in 0..mesh.n_triangles() {
                let tri = mesh.triangle(t);
                let grads = p1_basis_gradients(&mesh, t);
                let vals = [p.values[tri[0]], p.values[tri[1]], p.values[tri[2]]];
                let _ = grads;
                e_l2 += integrate_deg5(&mesh, t, &|x| {
                    // evaluate p_h at x via barycentric interpolation
                    let ph = eval_p1(&mesh, t, &vals, x);
                    (ph - exact(x)).powi(2)
                });
                let gh = grad.values[t];
                e_h1 += integrate_deg5(&mesh, t, &|x| {
                    let ge = grad_exact(x);
                    (gh[0] - ge[0]).powi(2) + (gh[1] - ge[1]).powi(2)
                });
            }
            errs_l2.push(e_l2.sqrt());
            errs_h1.push(e_h1.sqrt());
        }
        let order_l2 = (errs_l2[1] / errs_l2[2]).log2();
        let order_h1 = (errs_h1[1] / errs_h1[2]).log2();
        assert!(order_l2 > 1.9, "L2 order {order_l2}");
        assert!(order_h1 > 0.95, "H1 order {order_h1}");
    }

    fn eval_p1(mesh: &Mesh, t: usize, vals: &[f64; 3], x: Point) -> f64 {
        let [a, b, c] = mesh.triangle(t);
        let (pa, pb, pc) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let l1 = ((x[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (x[1] - pa[1])) / det;
        let l2 = ((pb[0] - pa[0]) * (x[1] - pa[1]) - (x[0] - pa[0]) * (pb[1] - pa[1])) / det;
        vals[0] * (1.0 - l1 - l2) + vals[1] * l1 + vals[2] * l2
    }

    #[test]
    fn velocity_formula() {
        let mesh = generate_unit_square(1).unwrap();
        let mut m = VectorFieldP0::constant(&mesh, [1.0, 0.0]);
        let p = ScalarFieldP1 {
            // interpolant of x has gradient (1, 0); bypass the Dirichlet mask
            values: mesh.vertices().iter().map(|v| v[0]).collect(),
            dirichlet: vec![false; mesh.n_vertices()],
        };
        let u = velocity(&mesh, &m, &p, &FieldCoeff::Constant(0.1));
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(u.values[t][0], 1.1, max_relative = 1e-12);
            assert_relative_eq!(u.values[t][1], 0.0, epsilon = 1e-14);
        }
        // m orthogonal to grad p: u = r grad p
        m = VectorFieldP0::constant(&mesh, [0.0, 2.0]);
        let u = velocity(&mesh, &m, &p, &FieldCoeff::Constant(0.1));
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(u.values[t][0], 0.1, max_relative = 1e-12);
            assert_relative_eq!(u.values[t][1], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn projection_of_constant_and_linear() {
        let mesh = generate_diamond(0.35).unwrap();
        let c = l2_project_p0(&mesh, &|_| [4.0, -1.0]);
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(c.values[t][0], 4.0, max_relative = 1e-13);
            assert_relative_eq!(c.values[t][1], -1.0, max_relative = 1e-13);
        }
        let lin = l2_project_p0(&mesh, &|[x, _]| [x, 0.0]);
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(lin.values[t][0], mesh.centroid(t)[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn rect_projection_matches_area_fraction() {
        let mesh = generate_unit_square(2).unwrap();
        // rectangle covering the left half: fraction by symmetry
        let rect = Rect {
            x: [0.0, 0.5],
            y: [0.0, 1.0],
        };
        let proj = project_rect_indicator(&mesh, &rect, 1.0, 0);
        let total: f64 = (0..mesh.n_triangles())
            .map(|t| proj.values[t][0] * mesh.area(t))
            .sum();
        assert_relative_eq!(total, 0.5, max_relative = 1e-12);
        for t in 0..mesh.n_triangles() {
            assert!((0.0..=1.0).contains(&proj.values[t][0]));
        }
        // thin strip, partially covering triangles
        let strip = Rect {
            x: [0.0, 0.3],
            y: [0.45, 0.55],
        };
        let proj = project_rect_indicator(&mesh, &strip, 1.0, 0);
        let total: f64 = (0..mesh.n_triangles())
            .map(|t| proj.values[t][0] * mesh.area(t))
            .sum();
        assert_relative_eq!(total, 0.3 * 0.1, max_relative = 1e-12);
    }

    #[test]
    fn rt0_flux_consistency_for_constant_m() {
        let mesh = generate_diamond(0.3).unwrap();
        let op = assemble_mixed_operator(&mesh, 1.0, MBoundary::Dirichlet).unwrap();
        let m = VectorFieldP0::constant(&mesh, [0.7, -0.2]);
        let sigma = op.recover_flux(&mesh, &m).unwrap();
        assert!(op.flux_residual(&m, &sigma) < 1e-10);
    }

    #[test]
    fn implicit_diffusion_contracts_constant_m() {
        let mesh = generate_diamond(0.3).unwrap();
        let op = assemble_mixed_operator(&mesh, 0.5, MBoundary::Dirichlet).unwrap();
        let m0 = VectorFieldP0::constant(&mesh, [1.0, 0.0]);
        let (m1, _) = op.implicit_step(&mesh, 0.05, &m0, 1e-12, None).unwrap();
        let n0 = l2_norm_p0(&mesh, &m0);
        let n1 = l2_norm_p0(&mesh, &m1);
        assert!(
            n1 < n0 * (1.0 - 1e-6),
            "diffusion with zero boundary data must strictly decrease ||m||: {n0} -> {n1}"
        );
    }

    #[test]
    fn mixed_operator_with_zero_d_is_mass_solve() {
        let mesh = generate_unit_square(3).unwrap();
        let op = assemble_mixed_operator(&mesh, 0.0, MBoundary::Dirichlet).unwrap();
        let rhs = l2_project_p0(&mesh, &|[x, y]| [x, y]);
        let (m1, sigma) = op.implicit_step(&mesh, 0.1, &rhs, 1e-13, None).unwrap();
        for t in 0..mesh.n_triangles() {
            assert_relative_eq!(m1.values[t][0], rhs.values[t][0], max_relative = 1e-10);
            assert_relative_eq!(m1.values[t][1], rhs.values[t][1], max_relative = 1e-10);
        }
        let _ = sigma;
    }

    #[test]
    fn neumann_bc_zeroes_boundary_flux() {
        let mesh = generate_diamond(0.4).unwrap();
        let op = assemble_mixed_operator(&mesh, 0.3, MBoundary::Neumann).unwrap();
        let m = l2_project_p0(&mesh, &|[x, y]| [x * y, x - y]);
        let sigma = op.recover_flux(&mesh, &m).unwrap();
        for (ei, e) in mesh.edges().iter().enumerate() {
            if e.is_boundary() {
                assert_eq!(sigma.comps[0][ei], 0.0);
                assert_eq!(sigma.comps[1][ei], 0.0);
            }
        }
    }

    #[test]
    fn assembly_independent_of_triangle_order() {
        let mesh = generate_diamond(0.4).unwrap();
        let mut tris: Vec<[usize; 3]> = mesh.triangles().to_vec();
        tris.reverse();
        let verts = mesh.vertices().to_vec();
        let vv = verts.clone();
        let permuted = Mesh::from_parts(verts, tris, &mut |a, b| {
            let on_cut = vv[a][0].abs() <= 1e-12 && vv[b][0].abs() <= 1e-12;
            Ok(if on_cut {
                crate::mesh::BoundaryTag::Dirichlet
            } else {
                crate::mesh::BoundaryTag::Neumann
            })
        })
        .unwrap();
        let m_a = l2_project_p0(&mesh, &|[x, y]| [x, y]);
        let m_b = l2_project_p0(&permuted, &|[x, y]| [x, y]);
        let src = |_: usize, [x, y]: Point| x + y;
        let sys_a =
            assemble_pressure_system(&mesh, &m_a, &FieldCoeff::Constant(1.0), &src).unwrap();
        let sys_b =
            assemble_pressure_system(&permuted, &m_b, &FieldCoeff::Constant(1.0), &src).unwrap();
        // vertex numbering is unchanged, so the matrices must agree entrywise
        for i in 0..sys_a.n() {
            let (cols, vals) = sys_a.matrix.row(i);
            for (c, v) in cols.iter().zip(vals) {
                assert_relative_eq!(*v, sys_b.matrix.get(i, *c), max_relative = 1e-13);
            }
            assert_relative_eq!(sys_a.rhs[i], sys_b.rhs[i], max_relative = 1e-13, epsilon = 1e-15);
        }
    }

    #[test]
    fn discrete_conservation_after_solve() {
        let mesh = generate_diamond(0.25).unwrap();
        let m = l2_project_p0(&mesh, &|[x, y]| [0.3 * x, 0.1 * y]);
        let src = |_: usize, _: Point| 1.0;
        let sys = assemble_pressure_system(&mesh, &m, &FieldCoeff::Constant(0.5), &src).unwrap();
        let (p, _) = solve_spd(&sys, 1e-12, None).unwrap();
        // residual of the weak form for every free P1 test function
        let mut ap = vec![0.0; sys.n()];
        sys.matrix.mul_vec(&p.values, &mut ap);
        let b_norm = crate::linalg::norm2(&sys.rhs);
        for v in 0..sys.n() {
            if !sys.constrained[v] {
                assert!((ap[v] - sys.rhs[v]).abs() <= 1e-10 * b_norm);
            }
        }
    }
}
