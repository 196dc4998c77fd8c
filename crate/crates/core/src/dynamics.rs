//! IMEX time integration of the coupled pressure/conductance system.
//!
//! Each step freezes the pressure, evaluates the activation/relaxation
//! forcing explicitly, solves the implicit diffusion update for the
//! conductance (per component, through the mixed RT0 operator) and then
//! re-solves the pressure equation for the new conductance. The time step
//! follows the stability window rule based on `1 / (2 c^2 ||grad p||_inf^2)`,
//! capped by `delta_max` and floored by `delta_min`.

use crate::error::{Error, Result};
use crate::fem::{
    assemble_mixed_operator, assemble_pressure_system, gradient_per_triangle, l1_norm_p0,
    l2_norm_p0, solve_spd, velocity, FieldCoeff, FluxFieldRT0, MBoundary, MixedOperator,
    ScalarFieldP1, VectorFieldP0, DEFAULT_SOLVER_TOL,
};
use crate::mesh::Mesh;

/// Coefficients of the rescaled model equations plus the relaxation
/// regularization `rho` used inside `|m|_rho = sqrt(m1^2 + m2^2 + rho)`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub d: f64,
    pub c: f64,
    pub gamma: f64,
    pub r: FieldCoeff,
    pub rho: f64,
    pub source: FieldCoeff,
}

impl ModelParams {
    /// Defaults of the reference 2D setup: `S = 1, r = 1/10, c = 50,
    /// D = 1/1000, gamma = 1/2, rho = 1e-12`.
    pub fn reference() -> Self {
        ModelParams {
            d: 1.0 / 1000.0,
            c: 50.0,
            gamma: 0.5,
            r: FieldCoeff::Constant(0.1),
            rho: 1e-12,
            source: FieldCoeff::Constant(1.0),
        }
    }

    pub fn validate(&self, mesh: &Mesh, extinction_monitoring: bool) -> Result<()> {
        if !(self.d >= 0.0) {
            return Err(Error::invalid("D", "diffusivity must be nonnegative"));
        }
        if !(self.c > 0.0) {
            return Err(Error::invalid("c", "activation parameter must be positive"));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::invalid("rho", "regularization must be nonnegative"));
        }
        self.r.validate_len(mesh.n_triangles(), "r")?;
        if self.r.min_value() <= 0.0 {
            return Err(Error::invalid("r", "background permeability must be positive"));
        }
        self.source.validate_len(mesh.n_triangles(), "S")?;
        if self.gamma < 1.0 && self.rho == 0.0 && !extinction_monitoring {
            return Err(Error::invalid(
                "rho",
                "gamma < 1 with rho = 0 requires an extinction stop rule",
            ));
        }
        Ok(())
    }
}

/// Pointwise forcing `f(m, grad p) = c^2 (grad p (x) grad p) m - |m|_rho^{2(gamma-1)} m`.
pub fn relaxation_forcing(
    m: [f64; 2],
    grad_p: [f64; 2],
    c: f64,
    gamma: f64,
    rho: f64,
) -> Result<[f64; 2]> {
    let m_rho_sq = m[0] * m[0] + m[1] * m[1] + rho;
    if gamma < 1.0 && m_rho_sq == 0.0 {
        return Err(Error::SingularRelaxation { gamma });
    }
    let relax = m_rho_sq.powf(gamma - 1.0);
    let gm = grad_p[0] * m[0] + grad_p[1] * m[1];
    let act = c * c * gm;
    Ok([act * grad_p[0] - relax * m[0], act * grad_p[1] - relax * m[1]])
}

/// One IMEX iterate: fields, cached gradient and energy.
#[derive(Debug, Clone)]
pub struct StepState {
    pub k: usize,
    pub t: f64,
    /// Step taken into this state (0 for the initial state).
    pub delta: f64,
    pub m: VectorFieldP0,
    pub p: ScalarFieldP1,
    pub grad_p: VectorFieldP0,
    pub sigma: FluxFieldRT0,
    /// Discrete energy; `NaN` when `gamma = 0` (metabolic term undefined).
    pub energy: f64,
}

/// Stationarity/sparsity measures for one accepted step.
#[derive(Debug, Clone, Copy)]
pub struct Diagnostics {
    pub k: usize,
    pub t: f64,
    pub delta: f64,
    pub energy: f64,
    /// Energy rate `(E^k - E^{k-1}) / delta^k`; `NaN` on the initial row.
    pub energy_rate: f64,
    /// Conductance rate `||m^k - m^{k-1}||_{L2} / delta^k`; `NaN` initially.
    pub m_rate: f64,
    /// Sparsity index `||u||_{L2} / ||u||_{L1}`; `NaN` when `u = 0`.
    pub sparsity: f64,
    /// `|| c |grad p| ||_inf`.
    pub grad_inf: f64,
    pub min_abs_m: f64,
}

/// Sparsity index of a velocity field; `NaN` sentinel when `u` vanishes.
pub fn sparsity_index(mesh: &Mesh, u: &VectorFieldP0) -> f64 {
    let l1 = l1_norm_p0(mesh, u);
    if l1 == 0.0 {
        f64::NAN
    } else {
        l2_norm_p0(mesh, u) / l1
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    FinalTime { t_end: f64 },
    Stationarity { tol_energy: f64, tol_m: f64 },
    Extinction { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    FinalTimeReached,
    Stationary,
    Extinction,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reason: StopReason,
    pub steps: usize,
    /// First time at which `min |m|` dropped below the extinction threshold.
    pub t_ex: Option<f64>,
    /// Steps at which the energy rose beyond the tolerance (warn mode).
    pub energy_violations: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegratorOptions {
    pub delta_max: f64,
    pub delta_min: f64,
    pub solver_tol: f64,
    /// Relative slack for the per-step energy monotonicity check.
    pub energy_tolerance: f64,
    /// Abort instead of warn when the energy check fails.
    pub strict_energy: bool,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            delta_max: 1e-2,
            delta_min: 1e-14,
            solver_tol: DEFAULT_SOLVER_TOL,
            energy_tolerance: 1e-10,
            strict_energy: false,
            max_steps: 10_000_000,
        }
    }
}

pub struct Integrator<'m> {
    mesh: &'m Mesh,
    params: ModelParams,
    opts: IntegratorOptions,
    mixed: Option<MixedOperator>,
}

impl<'m> Integrator<'m> {
    pub fn new(
        mesh: &'m Mesh,
        params: ModelParams,
        m_bc: MBoundary,
        opts: IntegratorOptions,
    ) -> Result<Self> {
        let mixed = if params.d > 0.0 {
            Some(assemble_mixed_operator(mesh, params.d, m_bc)?)
        } else {
            None
        };
        Ok(Integrator {
            mesh,
            params,
            opts,
            mixed,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn mesh(&self) -> &Mesh {
        self.mesh
    }

    fn solve_pressure(&self, m: &VectorFieldP0, warm: Option<&[f64]>) -> Result<ScalarFieldP1> {
        let source = &self.params.source;
        let sys = assemble_pressure_system(self.mesh, m, &self.params.r, &|t, _| source.eval(t))?;
        let (p, _) = solve_spd(&sys, self.opts.solver_tol, warm)?;
        Ok(p)
    }

    /// Build the initial state: solve the pressure for `m0` and recover the
    /// flux so that the stored fields are mutually consistent.
    pub fn initial_state(&self, m0: VectorFieldP0) -> Result<StepState> {
        let p = self.solve_pressure(&m0, None)?;
        let grad_p = gradient_per_triangle(self.mesh, &p);
        let sigma = match &self.mixed {
            Some(op) => op.recover_flux(self.mesh, &m0)?,
            None => FluxFieldRT0::zeros(self.mesh),
        };
        let energy = self.energy_of(&m0, &grad_p, &sigma);
        Ok(StepState {
            k: 0,
            t: 0.0,
            delta: 0.0,
            m: m0,
            p,
            grad_p,
            sigma,
            energy,
        })
    }

    /// Max Euclidean norm of the pressure gradient over all triangles.
    pub fn grad_inf(&self, state: &StepState) -> f64 {
        state
            .grad_p
            .values
            .iter()
            .fold(0.0_f64, |m, g| m.max(g[0].hypot(g[1])))
    }

    /// Stability-window time step rule with cap `delta_max`:
    /// start from `1/(2 c^2 g^2)`, keep the previous step while it stays in
    /// `(1/(20 c^2 g^2), 9/(10 c^2 g^2))`, reset otherwise.
    pub fn adapt_dt(&self, state: &StepState) -> f64 {
        let g = self.grad_inf(state);
        if g == 0.0 {
            return self.opts.delta_max;
        }
        let scale = 1.0 / (2.0 * self.params.c * self.params.c * g * g);
        let lo = scale / 10.0;
        let hi = 1.8 * scale;
        let prev = state.delta;
        let next = if prev > 0.0 && prev > lo && prev < hi {
            prev
        } else {
            scale
        };
        next.min(self.opts.delta_max)
    }

    /// Discrete energy
    /// `E_h = 1/2 int D^2 |sigma|^2 + |m|^{2 gamma} / gamma + c^2 |m . grad p|^2 + c^2 |grad p|^2`.
    /// Returns `NaN` for `gamma = 0` where the metabolic term is undefined.
    pub fn energy_of(
        &self,
        m: &VectorFieldP0,
        grad_p: &VectorFieldP0,
        sigma: &FluxFieldRT0,
    ) -> f64 {
        let gamma = self.params.gamma;
        if gamma == 0.0 {
            return f64::NAN;
        }
        let c_sq = self.params.c * self.params.c;
        let d_sq = self.params.d * self.params.d;
        let mut acc = 0.0;
        for t in 0..self.mesh.n_triangles() {
            let area = self.mesh.area(t);
            let mv = m.values[t];
            let g = grad_p.values[t];
            let m_sq = mv[0] * mv[0] + mv[1] * mv[1];
            let mg = mv[0] * g[0] + mv[1] * g[1];
            let g_sq = g[0] * g[0] + g[1] * g[1];
            let metabolic = if m_sq == 0.0 && gamma < 0.0 {
                f64::INFINITY
            } else {
                m_sq.powf(gamma) / gamma
            };
            let mut local = metabolic + c_sq * mg * mg + c_sq * g_sq;
            if d_sq > 0.0 {
                // sigma is linear per triangle: midpoint rule is exact
                let mut sig = 0.0;
                for mid in self.mesh.edge_midpoints(t) {
                    for comp in 0..2 {
                        let s = sigma.eval(self.mesh, t, comp, mid);
                        sig += s[0] * s[0] + s[1] * s[1];
                    }
                }
                local += d_sq * sig / 3.0;
            }
            acc += area * local;
        }
        0.5 * acc
    }

    /// One IMEX step with the step size from [`Integrator::adapt_dt`]
    /// (optionally clamped from above to land on a final time).
    pub fn step(&self, state: &StepState, clamp: Option<f64>) -> Result<StepState> {
        let mut delta = self.adapt_dt(state);
        if delta < self.opts.delta_min {
            return Err(Error::TimeStepUnderflow {
                floor: self.opts.delta_min,
                t: state.t,
            });
        }
        if let Some(limit) = clamp {
            delta = delta.min(limit);
        }
        let nt = self.mesh.n_triangles();
        let mut rhs = VectorFieldP0::zeros(self.mesh);
        for t in 0..nt {
            let f = relaxation_forcing(
                state.m.values[t],
                state.grad_p.values[t],
                self.params.c,
                self.params.gamma,
                self.params.rho,
            )?;
            if !(f[0].is_finite() && f[1].is_finite()) {
                return Err(Error::NonFiniteForcing { triangle: t });
            }
            rhs.values[t] = [
                state.m.values[t][0] + delta * f[0],
                state.m.values[t][1] + delta * f[1],
            ];
        }
        let (m_new, sigma) = match &self.mixed {
            Some(op) => {
                op.implicit_step(self.mesh, delta, &rhs, self.opts.solver_tol, Some(&state.m))?
            }
            // D = 0: the update is the explicit per-triangle Euler step
            None => (rhs, FluxFieldRT0::zeros(self.mesh)),
        };
        let p = self.solve_pressure(&m_new, Some(&state.p.values))?;
        let grad_p = gradient_per_triangle(self.mesh, &p);
        let energy = self.energy_of(&m_new, &grad_p, &sigma);
        Ok(StepState {
            k: state.k + 1,
            t: state.t + delta,
            delta,
            m: m_new,
            p,
            grad_p,
            sigma,
            energy,
        })
    }

    /// Stationarity measures between consecutive states.
    pub fn diagnostics(&self, prev: Option<&StepState>, state: &StepState) -> Diagnostics {
        let (energy_rate, m_rate) = match prev {
            Some(prev) if state.delta > 0.0 => {
                let diff = VectorFieldP0 {
                    values: state
                        .m
                        .values
                        .iter()
                        .zip(&prev.m.values)
                        .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
                        .collect(),
                };
                (
                    (state.energy - prev.energy) / state.delta,
                    l2_norm_p0(self.mesh, &diff) / state.delta,
                )
            }
            _ => (f64::NAN, f64::NAN),
        };
        let u = velocity(self.mesh, &state.m, &state.p, &self.params.r);
        let min_abs_m = (0..self.mesh.n_triangles())
            .map(|t| state.m.norm_at(t))
            .fold(f64::INFINITY, f64::min);
        Diagnostics {
            k: state.k,
            t: state.t,
            delta: state.delta,
            energy: state.energy,
            energy_rate,
            m_rate,
            sparsity: sparsity_index(self.mesh, &u),
            grad_inf: self.params.c * self.grad_inf(state),
            min_abs_m,
        }
    }

    /// Drive the integration until the stop rule fires. The sink receives
    /// every accepted state with its diagnostics (including the initial one).
    pub fn run(
        &self,
        initial: StepState,
        stop: StopRule,
        sink: &mut dyn FnMut(&StepState, &Diagnostics),
    ) -> Result<(StepState, RunOutcome)> {
        if self.params.gamma < 1.0
            && self.params.rho == 0.0
            && !matches!(stop, StopRule::Extinction { .. })
        {
            return Err(Error::invalid(
                "rho",
                "gamma < 1 with rho = 0 is only admissible with an extinction stop rule",
            ));
        }
        let mut state = initial;
        let mut outcome = RunOutcome {
            reason: StopReason::MaxSteps,
            steps: 0,
            t_ex: None,
            energy_violations: Vec::new(),
        };
        let diag = self.diagnostics(None, &state);
        sink(&state, &diag);
        if self.stopped(&stop, &state, &diag, &mut outcome) {
            return Ok((state, outcome));
        }
        for _ in 0..self.opts.max_steps {
            let clamp = match stop {
                StopRule::FinalTime { t_end } => Some(t_end - state.t),
                _ => None,
            };
            let next = self.step(&state, clamp)?;
            outcome.steps += 1;
            if next.energy.is_finite() && state.energy.is_finite() {
                let slack = self.opts.energy_tolerance * state.energy.abs().max(1.0);
                let increase = next.energy - state.energy;
                if increase > slack {
                    if self.opts.strict_energy {
                        return Err(Error::EnergyIncrease {
                            step: next.k,
                            t: next.t,
                            increase,
                        });
                    }
                    outcome.energy_violations.push((next.k, increase));
                }
            }
            let diag = self.diagnostics(Some(&state), &next);
            sink(&next, &diag);
            state = next;
            if self.stopped(&stop, &state, &diag, &mut outcome) {
                return Ok((state, outcome));
            }
        }
        Ok((state, outcome))
    }

    fn stopped(
        &self,
        stop: &StopRule,
        state: &StepState,
        diag: &Diagnostics,
        outcome: &mut RunOutcome,
    ) -> bool {
        match *stop {
            StopRule::FinalTime { t_end } => {
                if state.t >= t_end {
                    outcome.reason = StopReason::FinalTimeReached;
                    return true;
                }
            }
            StopRule::Stationarity { tol_energy, tol_m } => {
                if diag.energy_rate.is_finite()
                    && diag.m_rate.is_finite()
                    && diag.energy_rate.abs() < tol_energy
                    && diag.m_rate < tol_m
                {
                    outcome.reason = StopReason::Stationary;
                    return true;
                }
            }
            StopRule::Extinction { threshold } => {
                if diag.min_abs_m < threshold {
                    outcome.t_ex = Some(state.t);
                    outcome.reason = StopReason::Extinction;
                    return true;
                }
            }
        }
        false
    }
}

/// Physical inputs for the rescaling of the model equations.
#[derive(Debug, Clone, Copy)]
pub struct PhysicalScales {
    pub d: f64,
    pub c: f64,
    pub alpha: f64,
    pub r: f64,
    pub gamma: f64,
    /// Domain diameter.
    pub x_bar: f64,
    /// `sup |m0|`.
    pub m_bar: f64,
    /// `sup |S|`.
    pub s_bar: f64,
}

/// Dimensionless constants produced by the scaling.
#[derive(Debug, Clone, Copy)]
pub struct ScaledConstants {
    pub d: f64,
    pub c: f64,
    pub r: f64,
    pub t_bar: f64,
    pub p_bar: f64,
}

/// Rescale physical parameters: `t_bar = 1 / (alpha m_bar^{2(gamma-1)})`,
/// `p_bar = x_bar^2 s_bar / m_bar^2`, `r_s = r / m_bar^2`,
/// `c_s^2 = c^2 p_bar^2 / (alpha x_bar^2 m_bar^{2(gamma-1)})` and the
/// dimensionally consistent `D_s^2 = D^2 t_bar / x_bar^2`.
pub fn nondimensionalize(raw: &PhysicalScales) -> Result<ScaledConstants> {
    for (name, v) in [
        ("alpha", raw.alpha),
        ("x_bar", raw.x_bar),
        ("m_bar", raw.m_bar),
        ("s_bar", raw.s_bar),
    ] {
        if !(v > 0.0) {
            return Err(Error::InvalidParameter {
                name: "scales",
                message: format!("characteristic scale {name} must be positive, got {v}"),
            });
        }
    }
    let t_bar = 1.0 / (raw.alpha * raw.m_bar.powf(2.0 * (raw.gamma - 1.0)));
    let p_bar = raw.x_bar * raw.x_bar * raw.s_bar / (raw.m_bar * raw.m_bar);
    let r_s = raw.r / (raw.m_bar * raw.m_bar);
    let c_s_sq = raw.c * raw.c * p_bar * p_bar
        / (raw.alpha * raw.x_bar * raw.x_bar * raw.m_bar.powf(2.0 * (raw.gamma - 1.0)));
    let d_s_sq = raw.d * raw.d * t_bar / (raw.x_bar * raw.x_bar);
    Ok(ScaledConstants {
        d: d_s_sq.sqrt(),
        c: c_s_sq.sqrt(),
        r: r_s,
        t_bar,
        p_bar,
    })
}
