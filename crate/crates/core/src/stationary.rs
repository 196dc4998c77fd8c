//! Stationary states for vanishing diffusion: root analysis of the algebraic
//! stationarity equation, the penalty method for the gradient-constrained
//! problem at `gamma = 1`, KKT diagnostics, and the convex variational
//! construction for `1/2 <= gamma < 1` with its cutoff parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{
    gradient_per_triangle, h1_seminorm, l2_norm_p1, p1_basis_gradients, solve_spd, FieldCoeff,
    ScalarFieldP1, SparseSystem, VectorFieldP0,
};
use crate::linalg::{dense_cholesky_solve, dot, pcg, CsrMatrix};
use crate::mesh::Mesh;
use crate::oned::h_gamma_min;

/// Positive roots of `c |u| = z^{gamma-1} (1 + z^2)`, labelled by branch.
/// For `1/2 <= gamma < 1` the left branch (`lower`) is decreasing in `|u|`
/// and the right branch (`upper`) increasing; they coincide at the fold
/// `c |u| = Z_gamma`. For `gamma >= 1` at most one root exists, stored in
/// `upper`.
#[derive(Debug, Clone, Copy)]
pub struct RootSet {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl RootSet {
    /// Distinct roots in increasing order. Within a relative distance of
    /// 1e-7 the branches are numerically unresolvable (the fold spreads
    /// roots by `sqrt(ulp)`) and collapse to one root.
    pub fn roots(&self) -> Vec<f64> {
        match (self.lower, self.upper) {
            (None, None) => vec![],
            (Some(z), None) | (None, Some(z)) => vec![z],
            (Some(a), Some(b)) => {
                if (a - b).abs() <= 1e-7 * b.abs().max(1.0) {
                    vec![0.5 * (a + b)]
                } else {
                    vec![a, b]
                }
            }
        }
    }

    pub fn count(&self) -> usize {
        self.roots().len()
    }
}

fn stationarity_lhs(z: f64, gamma: f64) -> f64 {
    (z * z).powf((gamma - 1.0) / 2.0) * (1.0 + z * z)
}

/// Bisection in log coordinates on a monotone bracket (roots may span many
/// decades for `gamma` close to 1), polished by a few Newton steps on
/// `log g(e^w) - log target`.
fn bisect_monotone_log(gamma: f64, mut lo: f64, mut hi: f64, target: f64) -> f64 {
    let g = |z: f64| stationarity_lhs(z, gamma);
    let increasing = g(hi) >= g(lo);
    let mut a = lo.ln();
    let mut b = hi.ln();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let v = g(mid.exp());
        if (v > target) == increasing {
            b = mid;
        } else {
            a = mid;
        }
    }
    lo = a.exp();
    hi = b.exp();
    // Newton on w = ln z: d(ln g)/dw = (gamma - 1) + 2 z^2 / (1 + z^2)
    let mut w = 0.5 * (a + b);
    let ln_target = target.ln();
    for _ in 0..5 {
        let z = w.exp();
        let residual = z.ln() * (gamma - 1.0) + (1.0 + z * z).ln() - ln_target;
        let slope = (gamma - 1.0) + 2.0 * z * z / (1.0 + z * z);
        if slope == 0.0 {
            break;
        }
        let step = residual / slope;
        w -= step;
        if !w.is_finite() || w < a - 1.0 || w > b + 1.0 {
            w = 0.5 * (a + b);
            break;
        }
        if step.abs() < 1e-16 * w.abs().max(1.0) {
            break;
        }
    }
    w.exp().clamp(lo.min(hi), lo.max(hi))
}

/// Solve the stationarity equation for given `|u| >= 0`: exact bracketed
/// bisection on each monotone branch to relative 1e-12 or better. An empty
/// set is a valid answer (below the fold for `gamma < 1`, or `c|u| <= 1` at
/// `gamma = 1`).
pub fn solve_z(u_norm: f64, gamma: f64, c: f64) -> Result<RootSet> {
    if gamma < 0.5 {
        return Err(Error::invalid("gamma", "values below 1/2 are out of range"));
    }
    if !(u_norm >= 0.0) || !(c > 0.0) {
        return Err(Error::invalid("u_norm", "need |u| >= 0 and c > 0"));
    }
    let y = c * u_norm;
    let g = |z: f64| stationarity_lhs(z, gamma);

    if gamma >= 1.0 {
        // g is nondecreasing with g(0+) = 0 for gamma > 1 and = 1 for gamma = 1
        let floor = if gamma == 1.0 { 1.0 } else { 0.0 };
        if y <= floor {
            return Ok(RootSet {
                lower: None,
                upper: None,
            });
        }
        let mut hi = 1.0;
        while g(hi) < y {
            hi *= 2.0;
            if hi > 1e150 {
                return Err(Error::invalid("u_norm", "root bracket overflow"));
            }
        }
        let mut lo = hi / 2.0;
        while lo > 1e-300 && g(lo) > y {
            lo /= 2.0;
        }
        let z = bisect_monotone_log(gamma, lo, hi, y);
        return Ok(RootSet {
            lower: None,
            upper: Some(z),
        });
    }

    // 1/2 <= gamma < 1: fold at z* = argmin, g(z*) = Z_gamma
    let (z_star, min_sq) = h_gamma_min(gamma)?;
    let z_gamma = min_sq.sqrt();
    if y < z_gamma {
        return Ok(RootSet {
            lower: None,
            upper: None,
        });
    }
    if y == z_gamma {
        return Ok(RootSet {
            lower: Some(z_star),
            upper: Some(z_star),
        });
    }
    // left branch: decreasing from +inf to Z_gamma on (0, z*]
    let mut lo = z_star;
    let mut left_underflow = false;
    while g(lo) < y {
        lo /= 1024.0;
        if lo < 1e-290 {
            // the root is not representable as a positive normal number
            left_underflow = true;
            break;
        }
    }
    let z1 = if left_underflow {
        None
    } else {
        Some(bisect_monotone_log(gamma, lo, z_star, y))
    };
    // right branch: increasing from Z_gamma on [z*, inf)
    let mut hi = z_star.max(1.0);
    while g(hi) < y {
        hi *= 2.0;
        if hi > 1e150 {
            return Err(Error::invalid("u_norm", "root bracket overflow"));
        }
    }
    let z2 = bisect_monotone_log(gamma, z_star, hi, y);
    Ok(RootSet {
        lower: z1,
        upper: Some(z2),
    })
}

/// Convexity threshold for the cutoff parameter:
/// `alpha_gamma = c^{-1/4} ((1-gamma)/(1+gamma))^{(gamma-1)/2}`.
pub fn threshold_alpha(gamma: f64, c: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", "threshold is defined for 1/2 <= gamma < 1"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("c", "activation parameter must be positive"));
    }
    Ok(c.powf(-0.25) * ((1.0 - gamma) / (1.0 + gamma)).powf((gamma - 1.0) / 2.0))
}

// ---------------------------------------------------------------------------
// Penalty method for the gradient-constrained problem (gamma = 1, D = 0)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PenaltyOptions {
    /// Relative tolerance on the gradient norm of the penalty functional.
    pub tol: f64,
    pub max_newton: usize,
    pub min_step: f64,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        PenaltyOptions {
            tol: 1e-10,
            max_newton: 200,
            min_step: 1e-18,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    pub eps: f64,
    pub p: ScalarFieldP1,
    /// Per-triangle multiplier `a_eps = (|grad p|^2 - 1/c^2)_+ / eps >= 0`.
    pub a: Vec<f64>,
    /// `|| (|grad p|^2 - 1/c^2)_+ ||_{L1}`.
    pub violation_l1: f64,
    /// `|| (|grad p|^2 - 1/c^2)_+ ||_{L2}`.
    pub violation_l2: f64,
    /// `|| eps a^2 ||_{L1}` (complementarity defect).
    pub complementarity_l1: f64,
    /// `|| a ||_{L2}`.
    pub multiplier_l2: f64,
    pub newton_iterations: usize,
}

/// Source load vector `b_i = int S phi_i` (3-point rule) with Dirichlet rows
/// zeroed.
fn source_load(mesh: &Mesh, s: &FieldCoeff) -> Vec<f64> {
    let mut b = vec![0.0; mesh.n_vertices()];
    for t in 0..mesh.n_triangles() {
        let tri = mesh.triangle(t);
        let w = mesh.area(t) / 3.0 * s.eval(t);
        for &v in &tri {
            if !mesh.is_dirichlet_vertex(v) {
                b[v] += w;
            }
        }
    }
    b
}

struct PenaltyFunctional<'a> {
    mesh: &'a Mesh,
    b: Vec<f64>,
    c_inv_sq: f64,
    eps: f64,
}

impl PenaltyFunctional<'_> {
    fn multiplier(&self, g_sq: f64) -> f64 {
        (g_sq - self.c_inv_sq).max(0.0) / self.eps
    }

    fn value(&self, p: &ScalarFieldP1) -> f64 {
        let grad = gradient_per_triangle(self.mesh, p);
        let mut acc = 0.0;
        for t in 0..self.mesh.n_triangles() {
            let g = grad.values[t];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let excess = (g_sq - self.c_inv_sq).max(0.0);
            acc += self.mesh.area(t) * (0.5 * g_sq + excess * excess / (4.0 * self.eps));
        }
        acc - dot(&self.b, &p.values)
    }

    fn gradient(&self, p: &ScalarFieldP1) -> Vec<f64> {
        let mesh = self.mesh;
        let grad = gradient_per_triangle(mesh, p);
        let mut out = vec![0.0; mesh.n_vertices()];
        for t in 0..mesh.n_triangles() {
            let g = grad.values[t];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let coeff = (1.0 + self.multiplier(g_sq)) * mesh.area(t);
            let basis = p1_basis_gradients(mesh, t);
            let tri = mesh.triangle(t);
            for i in 0..3 {
                if !mesh.is_dirichlet_vertex(tri[i]) {
                    out[tri[i]] += coeff * (g[0] * basis[i][0] + g[1] * basis[i][1]);
                }
            }
        }
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o -= b;
        }
        out
    }

    /// Generalized Hessian: `(1 + a) I + (2/eps) chi_active grad p (x) grad p`.
    fn hessian(&self, p: &ScalarFieldP1) -> CsrMatrix {
        let mesh = self.mesh;
        let n = mesh.n_vertices();
        let grad = gradient_per_triangle(mesh, p);
        let mut triplets = Vec::with_capacity(9 * mesh.n_triangles() + n);
        for t in 0..mesh.n_triangles() {
            let g = grad.values[t];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let a = self.multiplier(g_sq);
            let pen = if g_sq > self.c_inv_sq { 2.0 / self.eps } else { 0.0 };
            let k = [
                [1.0 + a + pen * g[0] * g[0], pen * g[0] * g[1]],
                [pen * g[0] * g[1], 1.0 + a + pen * g[1] * g[1]],
            ];
            let basis = p1_basis_gradients(mesh, t);
            let tri = mesh.triangle(t);
            let area = mesh.area(t);
            for i in 0..3 {
                if mesh.is_dirichlet_vertex(tri[i]) {
                    continue;
                }
                let kg = [
                    k[0][0] * basis[i][0] + k[0][1] * basis[i][1],
                    k[1][0] * basis[i][0] + k[1][1] * basis[i][1],
                ];
                for j in 0..3 {
                    if mesh.is_dirichlet_vertex(tri[j]) {
                        continue;
                    }
                    triplets.push((
                        tri[i],
                        tri[j],
                        area * (kg[0] * basis[j][0] + kg[1] * basis[j][1]),
                    ));
                }
            }
        }
        for v in 0..n {
            if mesh.is_dirichlet_vertex(v) {
                triplets.push((v, v, 1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &mut triplets)
    }
}

/// Minimize the penalty functional
/// `F_eps[p] = 1/2 int |grad p|^2 + 1/(4 eps) int (|grad p|^2 - 1/c^2)_+^2 - int p S`
/// over the P1 space with homogeneous Dirichlet values, by damped Newton with
/// Armijo backtracking (gradient-descent fallback when the Newton direction
/// fails).
pub fn penalty_solve(
    mesh: &Mesh,
    s: &FieldCoeff,
    c: f64,
    eps: f64,
    opts: &PenaltyOptions,
    warm: Option<&ScalarFieldP1>,
) -> Result<PenaltyResult> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "penalty parameter must be positive"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("c", "activation parameter must be positive"));
    }
    if mesh.n_dirichlet_vertices() == 0 {
        return Err(Error::invalid(
            "mesh",
            "penalty solve requires a Dirichlet boundary part",
        ));
    }
    s.validate_len(mesh.n_triangles(), "S")?;
    let functional = PenaltyFunctional {
        mesh,
        b: source_load(mesh, s),
        c_inv_sq: 1.0 / (c * c),
        eps,
    };
    let mut p = match warm {
        Some(w) => w.clone(),
        None => ScalarFieldP1::zeros(mesh),
    };
    p.enforce_dirichlet();
    let b_scale = crate::linalg::norm2(&functional.b).max(1.0);
    let mut f_val = functional.value(&p);
    let mut iterations = 0;
    for _ in 0..opts.max_newton {
        let grad = functional.gradient(&p);
        let g_norm = crate::linalg::norm2(&grad);
        if g_norm <= opts.tol * b_scale {
            return Ok(finish_penalty(mesh, &functional, p, eps, iterations));
        }
        iterations += 1;
        let hess = functional.hessian(&p);
        let minus_g: Vec<f64> = grad.iter().map(|v| -v).collect();
        let direction = if mesh.n_vertices() <= 2000 {
            dense_cholesky_solve(&hess.to_dense(), &minus_g)
        } else {
            pcg(&hess, &minus_g, None, Some(&hess.diagonal()), 1e-12, 20 * mesh.n_vertices())
                .map(|(x, _)| x)
        };
        let mut dir = match direction {
            Ok(d) => d,
            Err(_) => minus_g.clone(),
        };
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            dir = minus_g.clone();
            slope = -g_norm * g_norm;
        }
        // Armijo backtracking
        let sigma = 1e-4;
        let mut t_step = 1.0;
        let mut accepted = false;
        while t_step >= opts.min_step {
            let mut candidate = p.clone();
            for (v, d) in candidate.values.iter_mut().zip(&dir) {
                *v += t_step * d;
            }
            candidate.enforce_dirichlet();
            let f_new = functional.value(&candidate);
            if f_new <= f_val + sigma * t_step * slope {
                if f_new >= f_val {
                    // no strict decrease despite a satisfied Armijo test
                    return Err(Error::LineSearch(format!(
                        "penalty functional stagnated at {f_val} (eps = {eps})"
                    )));
                }
                p = candidate;
                f_val = f_new;
                accepted = true;
                break;
            }
            t_step *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearch(format!(
                "no admissible Armijo step above {} after {} Newton iterations (eps = {eps})",
                opts.min_step, iterations
            )));
        }
    }
    let grad = functional.gradient(&p);
    let g_norm = crate::linalg::norm2(&grad);
    if g_norm <= opts.tol * b_scale {
        return Ok(finish_penalty(mesh, &functional, p, eps, iterations));
    }
    Err(Error::SolverDiverged {
        residual: g_norm / b_scale,
        iterations,
    })
}

fn finish_penalty(
    mesh: &Mesh,
    functional: &PenaltyFunctional<'_>,
    p: ScalarFieldP1,
    eps: f64,
    newton_iterations: usize,
) -> PenaltyResult {
    let grad = gradient_per_triangle(mesh, &p);
    let mut a = vec![0.0; mesh.n_triangles()];
    let mut violation_l1 = 0.0;
    let mut violation_l2 = 0.0;
    let mut comp = 0.0;
    let mut mult = 0.0;
    for t in 0..mesh.n_triangles() {
        let g = grad.values[t];
        let g_sq = g[0] * g[0] + g[1] * g[1];
        let excess = (g_sq - functional.c_inv_sq).max(0.0);
        a[t] = excess / eps;
        let area = mesh.area(t);
        violation_l1 += area * excess;
        violation_l2 += area * excess * excess;
        comp += area * eps * a[t] * a[t];
        mult += area * a[t] * a[t];
    }
    PenaltyResult {
        eps,
        p,
        a,
        violation_l1,
        violation_l2: violation_l2.sqrt(),
        complementarity_l1: comp,
        multiplier_l2: mult.sqrt(),
        newton_iterations,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuationOptions {
    pub eps_start: f64,
    pub eps_end: f64,
    /// Multiplicative factor per continuation step, in (0, 1).
    pub factor: f64,
    /// Optional target for `max(r_pde, r_feas, r_comp)`: continue shrinking
    /// `eps` past `eps_end` (down to `eps_floor`) until it is met.
    pub kkt_target: Option<f64>,
    pub eps_floor: f64,
    pub penalty: PenaltyOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            eps_start: 1e-1,
            eps_end: 1e-6,
            factor: 0.1,
            kkt_target: None,
            eps_floor: 1e-12,
            penalty: PenaltyOptions::default(),
        }
    }
}

/// Warm-started continuation in the penalty parameter. Returns one result
/// per solved `eps`, ordered from large to small.
pub fn penalty_continuation(
    mesh: &Mesh,
    s: &FieldCoeff,
    c: f64,
    opts: &ContinuationOptions,
) -> Result<Vec<PenaltyResult>> {
    if !(opts.factor > 0.0 && opts.factor < 1.0) {
        return Err(Error::invalid("factor", "continuation factor must be in (0,1)"));
    }
    let mut results: Vec<PenaltyResult> = Vec::new();
    let mut eps = opts.eps_start;
    loop {
        let warm = results.last().map(|r| &r.p);
        let res = penalty_solve(mesh, s, c, eps, &opts.penalty, warm)?;
        results.push(res);
        let last = results.last().unwrap();
        let reached_end = eps <= opts.eps_end * (1.0 + 1e-12);
        if reached_end {
            match opts.kkt_target {
                None => break,
                Some(target) => {
                    let kkt = kkt_residuals(mesh, &last.p, &last.a, c, s)?;
                    if kkt.max() <= target || eps * opts.factor < opts.eps_floor {
                        break;
                    }
                }
            }
        }
        eps *= opts.factor;
    }
    Ok(results)
}

/// Residuals of the stationary complementarity system.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    /// Discrete dual-norm residual of `-div[(1 + a^2) grad p] = S`.
    pub pde: f64,
    /// `|| (c^2 |grad p|^2 - 1)_+ ||_{L1}`.
    pub feasibility: f64,
    /// `|| a^2 (c^2 |grad p|^2 - 1) ||_{L1}`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.pde.max(self.feasibility).max(self.complementarity)
    }
}

/// Evaluate the KKT residuals for a pressure and multiplier pair. The PDE
/// residual is measured in the discrete dual norm `sqrt(rho' K^-1 rho)` of
/// the P1 test space, with `K` the Dirichlet Laplace stiffness matrix.
pub fn kkt_residuals(
    mesh: &Mesh,
    p: &ScalarFieldP1,
    a_sq: &[f64],
    c: f64,
    s: &FieldCoeff,
) -> Result<KktResiduals> {
    if a_sq.len() != mesh.n_triangles() {
        return Err(Error::invalid("a_sq", "one multiplier value per triangle"));
    }
    if let Some(bad) = a_sq.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::invalid("a_sq", format!("multiplier must be >= 0, got {bad}")));
    }
    let b = source_load(mesh, s);
    let grad = gradient_per_triangle(mesh, p);
    // residual vector of the weighted form on free vertices
    let mut rho = vec![0.0; mesh.n_vertices()];
    for t in 0..mesh.n_triangles() {
        let g = grad.values[t];
        let coeff = (1.0 + a_sq[t]) * mesh.area(t);
        let basis = p1_basis_gradients(mesh, t);
        let tri = mesh.triangle(t);
        for i in 0..3 {
            if !mesh.is_dirichlet_vertex(tri[i]) {
                rho[tri[i]] += coeff * (g[0] * basis[i][0] + g[1] * basis[i][1]);
            }
        }
    }
    for (r, bv) in rho.iter_mut().zip(&b) {
        *r -= bv;
    }
    // dual norm through one Laplace solve
    let laplace = crate::fem::assemble_pressure_system(
        mesh,
        &VectorFieldP0::zeros(mesh),
        &FieldCoeff::Constant(1.0),
        &|_, _| 0.0,
    )?;
    let sys = SparseSystem {
        matrix: laplace.matrix,
        rhs: rho.clone(),
        constrained: laplace.constrained,
    };
    let (w, _) = solve_spd(&sys, 1e-12, None)?;
    let pde = dot(&rho, &w.values).max(0.0).sqrt();

    let c_sq = c * c;
    let mut feas = 0.0;
    let mut comp = 0.0;
    for t in 0..mesh.n_triangles() {
        let g = grad.values[t];
        let g_sq = g[0] * g[0] + g[1] * g[1];
        let slack = c_sq * g_sq - 1.0;
        feas += mesh.area(t) * slack.max(0.0);
        comp += mesh.area(t) * (a_sq[t] * slack).abs();
    }
    Ok(KktResiduals {
        pde,
        feasibility: feas,
        complementarity: comp,
    })
}

/// Value of `J[p] = int (|grad p|^2 / 2 - S p)` and triangle-wise feasibility
/// of the gradient constraint `c^2 |grad p|^2 <= 1`.
pub fn j_functional(mesh: &Mesh, p: &ScalarFieldP1, s: &FieldCoeff, c: f64) -> (f64, bool) {
    let b = source_load(mesh, s);
    let grad = gradient_per_triangle(mesh, p);
    let mut acc = 0.0;
    let mut feasible = true;
    for t in 0..mesh.n_triangles() {
        let g = grad.values[t];
        let g_sq = g[0] * g[0] + g[1] * g[1];
        acc += mesh.area(t) * 0.5 * g_sq;
        if c * c * g_sq > 1.0 {
            feasible = false;
        }
    }
    (acc - dot(&b, &p.values), feasible)
}

// ---------------------------------------------------------------------------
// Variational construction for 1/2 <= gamma < 1
// ---------------------------------------------------------------------------

/// The active region of the variational construction, evaluated at triangle
/// centroids.
#[derive(Debug, Clone)]
pub enum ActiveRegion {
    /// The hyperbola-bounded set `(x1 - 1)^2 - x2^2 < 1/4`.
    Hyperbola,
    /// Explicit triangle indices.
    Triangles(Vec<usize>),
}

impl ActiveRegion {
    pub fn evaluate(&self, mesh: &Mesh) -> Vec<bool> {
        match self {
            ActiveRegion::Hyperbola => (0..mesh.n_triangles())
                .map(|t| {
                    let [x, y] = mesh.centroid(t);
                    (x - 1.0) * (x - 1.0) - y * y < 0.25
                })
                .collect(),
            ActiveRegion::Triangles(idx) => {
                let mut mask = vec![false; mesh.n_triangles()];
                for &t in idx {
                    if t < mask.len() {
                        mask[t] = true;
                    }
                }
                mask
            }
        }
    }
}

struct CutoffFunctional<'a> {
    mesh: &'a Mesh,
    active: &'a [bool],
    alpha: f64,
    gamma: f64,
    /// `c^{2/(gamma-1)}`, the conductance scaling of the singular term.
    kappa: f64,
    r: f64,
    b: Vec<f64>,
}

impl CutoffFunctional<'_> {
    /// Per-triangle density `r g^2/2 + kappa (gamma-1)/(2 gamma) (g^q - alpha^q)_-`
    /// with `q = 2 gamma / (gamma - 1) < 0`; the cutoff zeroes the singular
    /// term for `g <= alpha`, so it is active exactly on `{g > alpha}`.
    fn density(&self, g_sq: f64) -> f64 {
        let base = 0.5 * self.r * g_sq;
        if g_sq <= self.alpha * self.alpha {
            return base;
        }
        let q_half = self.gamma / (self.gamma - 1.0); // q/2
        let term = g_sq.powf(q_half) - (self.alpha * self.alpha).powf(q_half);
        debug_assert!(term <= 0.0);
        base + self.kappa * (self.gamma - 1.0) / (2.0 * self.gamma) * term
    }

    /// Flux coefficient `r + kappa g^{q-2}` on the active set above the cutoff.
    fn coefficient(&self, g_sq: f64) -> f64 {
        if g_sq <= self.alpha * self.alpha {
            return self.r;
        }
        self.r + self.kappa * g_sq.powf(1.0 / (self.gamma - 1.0))
    }

    fn value(&self, p: &ScalarFieldP1) -> f64 {
        let grad = gradient_per_triangle(self.mesh, p);
        let mut acc = 0.0;
        for t in 0..self.mesh.n_triangles() {
            let g = grad.values[t];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let density = if self.active[t] {
                self.density(g_sq)
            } else {
                0.5 * self.r * g_sq
            };
            acc += self.mesh.area(t) * density;
        }
        acc - dot(&self.b, &p.values)
    }

    fn gradient(&self, p: &ScalarFieldP1) -> Vec<f64> {
        let mesh = self.mesh;
        let grad = gradient_per_triangle(mesh, p);
        let mut out = vec![0.0; mesh.n_vertices()];
        for t in 0..mesh.n_triangles() {
            let g = grad.values[t];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let coeff = if self.active[t] {
                self.coefficient(g_sq)
            } else {
                self.r
            };
            let w = coeff * mesh.area(t);
            let basis = p1_basis_gradients(mesh, t);
            let tri = mesh.triangle(t);
            for i in 0..3 {
                if !mesh.is_dirichlet_vertex(tri[i]) {
                    out[tri[i]] += w * (g[0] * basis[i][0] + g[1] * basis[i][1]);
                }
            }
        }
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o -= b;
        }
        out
    }
}

/// Exact value and analytic gradient (in the P1 dual) of the discretized
/// cutoff functional. Rejects `alpha` below the convexity threshold.
pub fn f_alpha_value_and_gradient(
    mesh: &Mesh,
    p: &ScalarFieldP1,
    active: &[bool],
    alpha: f64,
    gamma: f64,
    c: f64,
    r: f64,
    s: &FieldCoeff,
) -> Result<(f64, Vec<f64>)> {
    let functional = make_cutoff(mesh, active, alpha, gamma, c, r, s)?;
    Ok((functional.value(p), functional.gradient(p)))
}

fn make_cutoff<'a>(
    mesh: &'a Mesh,
    active: &'a [bool],
    alpha: f64,
    gamma: f64,
    c: f64,
    r: f64,
    s: &FieldCoeff,
) -> Result<CutoffFunctional<'a>> {
    let alpha_min = threshold_alpha(gamma, c)?;
    if alpha < alpha_min * (1.0 - 1e-14) {
        return Err(Error::invalid(
            "alpha",
            format!("{alpha} is below the convexity threshold {alpha_min}"),
        ));
    }
    if !(r > 0.0) {
        return Err(Error::invalid("r", "background permeability must be positive"));
    }
    if active.len() != mesh.n_triangles() {
        return Err(Error::invalid("A", "active mask must cover every triangle"));
    }
    s.validate_len(mesh.n_triangles(), "S")?;
    Ok(CutoffFunctional {
        mesh,
        active,
        alpha,
        gamma,
        kappa: c.powf(2.0 / (gamma - 1.0)),
        r,
        b: source_load(mesh, s),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    /// Relative H1 change of consecutive iterates that stops the descent.
    pub stop_rel: f64,
    pub max_iterations: usize,
    pub min_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            stop_rel: 1e-15,
            max_iterations: 50_000,
            min_step: 1e-18,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariationalResult {
    pub p0: ScalarFieldP1,
    pub m0: VectorFieldP0,
    /// Triangles in `A` with `|grad p0| > alpha` (the support of `m0`).
    pub active_set: Vec<usize>,
    pub stationarity_residual: f64,
    pub iterations: usize,
    pub f_value: f64,
}

/// Minimize the cutoff functional by gradient descent in the H1_0 inner
/// product with Armijo backtracking; stop once consecutive pressure iterates
/// satisfy `||p^k - p^{k+1}||_{H1} / ||p^k||_{H1} < stop_rel`. The conductance
/// is assembled from the minimizer and the pointwise stationarity defect is
/// reported.
pub fn f_alpha_minimize(
    mesh: &Mesh,
    s: &FieldCoeff,
    region: &ActiveRegion,
    alpha: f64,
    gamma: f64,
    c: f64,
    r: f64,
    opts: &MinimizeOptions,
    initial: Option<&ScalarFieldP1>,
) -> Result<VariationalResult> {
    let active = region.evaluate(mesh);
    let functional = make_cutoff(mesh, &active, alpha, gamma, c, r, s)?;
    if mesh.n_dirichlet_vertices() == 0 {
        return Err(Error::invalid("mesh", "minimization requires Dirichlet boundary"));
    }
    // Riesz map for the descent direction: plain Dirichlet Laplacian
    let laplace = crate::fem::assemble_pressure_system(
        mesh,
        &VectorFieldP0::zeros(mesh),
        &FieldCoeff::Constant(1.0),
        &|_, _| 0.0,
    )?;
    let lap_diag = laplace.matrix.diagonal();

    let mut p = match initial {
        Some(f) => f.clone(),
        None => ScalarFieldP1::zeros(mesh),
    };
    p.enforce_dirichlet();
    let mut f_val = functional.value(&p);
    let mut step_guess = 1.0;
    let mut riesz_warm: Option<Vec<f64>> = None;
    let mut iterations = 0;
    let sigma = 1e-4;
    for it in 0..opts.max_iterations {
        iterations = it;
        let grad = functional.gradient(&p);
        let g_norm = crate::linalg::norm2(&grad);
        if g_norm == 0.0 {
            break;
        }
        let (riesz, _) = pcg(
            &laplace.matrix,
            &grad,
            riesz_warm.as_deref(),
            Some(&lap_diag),
            1e-12,
            20 * mesh.n_vertices(),
        )?;
        riesz_warm = Some(riesz.clone());
        let slope: f64 = -dot(&grad, &riesz);
        if slope >= 0.0 {
            break;
        }
        let mut t_step = step_guess;
        let mut accepted = false;
        while t_step >= opts.min_step {
            let mut candidate = p.clone();
            for (v, d) in candidate.values.iter_mut().zip(&riesz) {
                *v -= t_step * d;
            }
            candidate.enforce_dirichlet();
            let f_new = functional.value(&candidate);
            if f_new <= f_val + sigma * t_step * slope {
                // H1 distance between iterates for the stopping criterion
                let diff = ScalarFieldP1 {
                    values: p
                        .values
                        .iter()
                        .zip(&candidate.values)
                        .map(|(a, b)| a - b)
                        .collect(),
                    dirichlet: p.dirichlet.clone(),
                };
                let h1_diff = h1_norm(mesh, &diff);
                let h1_p = h1_norm(mesh, &p).max(1e-300);
                p = candidate;
                f_val = f_new;
                accepted = true;
                step_guess = (t_step * 2.0).min(1e6);
                if h1_diff / h1_p < opts.stop_rel {
                    return assemble_variational(mesh, &functional, p, alpha, gamma, c, f_val, it + 1);
                }
                break;
            }
            t_step *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearch(format!(
                "no admissible Armijo step above {} at iteration {} (F = {})",
                opts.min_step,
                it + 1,
                f_val
            )));
        }
    }
    assemble_variational(mesh, &functional, p, alpha, gamma, c, f_val, iterations)
}

fn h1_norm(mesh: &Mesh, p: &ScalarFieldP1) -> f64 {
    let l2 = l2_norm_p1(mesh, p);
    let semi = h1_seminorm(mesh, p);
    (l2 * l2 + semi * semi).sqrt()
}

fn assemble_variational(
    mesh: &Mesh,
    functional: &CutoffFunctional<'_>,
    p: ScalarFieldP1,
    alpha: f64,
    gamma: f64,
    c: f64,
    f_value: f64,
    iterations: usize,
) -> Result<VariationalResult> {
    let m0 = construct_m0(mesh, &p, functional.active, alpha, gamma, c);
    let residual = stationarity_residual(mesh, &m0, &p, gamma, c);
    let active_set = {
        let grad = gradient_per_triangle(mesh, &p);
        (0..mesh.n_triangles())
            .filter(|&t| {
                functional.active[t] && {
                    let g = grad.values[t];
                    (g[0] * g[0] + g[1] * g[1]).sqrt() > alpha
                }
            })
            .collect()
    };
    Ok(VariationalResult {
        p0: p,
        m0,
        active_set,
        stationarity_residual: residual,
        iterations,
        f_value,
    })
}

/// Stationary conductance
/// `m0 = chi_A chi_{|grad p0| > alpha} c^{1/(gamma-1)} |grad p0|^{(2-gamma)/(gamma-1)} grad p0`.
pub fn construct_m0(
    mesh: &Mesh,
    p0: &ScalarFieldP1,
    active: &[bool],
    alpha: f64,
    gamma: f64,
    c: f64,
) -> VectorFieldP0 {
    let grad = gradient_per_triangle(mesh, p0);
    let mut out = VectorFieldP0::zeros(mesh);
    let c_scale = c.powf(1.0 / (gamma - 1.0));
    for t in 0..mesh.n_triangles() {
        if !active[t] {
            continue;
        }
        let g = grad.values[t];
        let g_norm = g[0].hypot(g[1]);
        if g_norm > alpha {
            let scale = c_scale * g_norm.powf((2.0 - gamma) / (gamma - 1.0));
            out.values[t] = [scale * g[0], scale * g[1]];
        }
    }
    out
}

/// `L2` norm of the pointwise stationarity defect
/// `c grad p0 (x) c grad p0 m0 - |m0|^{2(gamma-1)} m0`, defined as zero on
/// the set where `m0` vanishes.
pub fn stationarity_residual(
    mesh: &Mesh,
    m0: &VectorFieldP0,
    p0: &ScalarFieldP1,
    gamma: f64,
    c: f64,
) -> f64 {
    let grad = gradient_per_triangle(mesh, p0);
    let mut acc = 0.0;
    for t in 0..mesh.n_triangles() {
        let m = m0.values[t];
        let m_sq = m[0] * m[0] + m[1] * m[1];
        if m_sq == 0.0 {
            continue;
        }
        let g = grad.values[t];
        let act = c * c * (g[0] * m[0] + g[1] * m[1]);
        let relax = m_sq.powf(gamma - 1.0);
        let defect = [act * g[0] - relax * m[0], act * g[1] - relax * m[1]];
        acc += mesh.area(t) * (defect[0] * defect[0] + defect[1] * defect[1]);
    }
    acc.sqrt()
}

/// Multiplicative perturbation `(1 + amplitude * eta) m0` with per-triangle
/// uniform noise `eta` on `[-1/2, 1/2]`, normalized to `||eta||_{L2} = 1`.
/// Returns the perturbed field and whether `m0` was identically zero (in
/// which case it is returned unchanged).
pub fn perturb(
    mesh: &Mesh,
    m0: &VectorFieldP0,
    amplitude: f64,
    seed: u64,
) -> (VectorFieldP0, bool) {
    if m0.values.iter().all(|v| v[0] == 0.0 && v[1] == 0.0) {
        return (m0.clone(), true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta: Vec<f64> = (0..mesh.n_triangles())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let norm = eta
        .iter()
        .enumerate()
        .map(|(t, e)| mesh.area(t) * e * e)
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for e in eta.iter_mut() {
            *e /= norm;
        }
    }
    let mut out = m0.clone();
    for (t, v) in out.values.iter_mut().enumerate() {
        let factor = 1.0 + amplitude * eta[t];
        v[0] *= factor;
        v[1] *= factor;
    }
    (out, false)
}

/// Centroid-evaluated indicator of the reference instability experiment.
pub fn hyperbola_active_set(mesh: &Mesh) -> Vec<bool> {
    ActiveRegion::Hyperbola.evaluate(mesh)
}
