//! The one-dimensional reduction on `(0, 1)`: mixed boundary conditions give
//! the closed-form pressure gradient `-B(x) / (1 + m^2)` with
//! `B(x) = int_0^x S`, reducing the system to the scalar reaction-diffusion
//! equation `m_t - D^2 m_xx = (c^2 B^2 / (1+m^2)^2 - |m|^{2(gamma-1)}) m`
//! with homogeneous Neumann conditions for `m`.

use crate::error::{Error, Result};
use crate::stationary::solve_z;

/// `Z_gamma = (2/(gamma+1)) ((1-gamma)/(1+gamma))^{(gamma-1)/2}`, the critical
/// value of `c ||B||_inf` separating extinction from persistence. The
/// endpoint values at `gamma = 1` and `gamma = -1` are the continuous limits.
pub fn z_constant(gamma: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", "Z_gamma is defined for -1 <= gamma <= 1"));
    }
    if gamma == 1.0 || gamma == -1.0 {
        return Ok(1.0);
    }
    Ok(2.0 / (gamma + 1.0) * ((1.0 - gamma) / (1.0 + gamma)).powf((gamma - 1.0) / 2.0))
}

/// `h_gamma(m) = m^{2(gamma-1)} (1 + m^2)^2` for `m > 0`.
pub fn h_gamma(m: f64, gamma: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::invalid("m", "h_gamma requires m > 0"));
    }
    Ok((m * m).powf(gamma - 1.0) * (1.0 + m * m).powi(2))
}

/// Argmin and infimum of `h_gamma` over `(0, inf)`. The minimizer is
/// `sqrt((1-gamma)/(1+gamma))`, degenerating to `0` at `gamma = 1` and to
/// `inf` at `gamma = -1`; the infimum equals `Z_gamma^2` in all cases.
pub fn h_gamma_min(gamma: f64) -> Result<(f64, f64)> {
    let z = z_constant(gamma)?;
    let argmin = if gamma == 1.0 {
        0.0
    } else if gamma == -1.0 {
        f64::INFINITY
    } else {
        ((1.0 - gamma) / (1.0 + gamma)).sqrt()
    };
    Ok((argmin, z * z))
}

/// Sampled 1D profile: uniform grid on `[0, 1]`, nodal source values,
/// their exact piecewise-linear cumulative integral `B`, and the state `m`.
#[derive(Debug, Clone)]
pub struct Profile1D {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub m: Vec<f64>,
}

impl Profile1D {
    pub fn new(n: usize, source: impl Fn(f64) -> f64, m0: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("n", "need at least one interval"));
        }
        let h = 1.0 / n as f64;
        let x: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        let s: Vec<f64> = x.iter().map(|&xi| source(xi)).collect();
        if let Some(bad) = s.iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::invalid("S", format!("source must be nonnegative, got {bad}")));
        }
        // exact integral of the piecewise-linear interpolant
        let mut b = vec![0.0; n + 1];
        for i in 0..n {
            b[i + 1] = b[i] + h * (s[i] + s[i + 1]) / 2.0;
        }
        let m: Vec<f64> = x.iter().map(|&xi| m0(xi)).collect();
        Ok(Profile1D { x, s, b, m })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    pub fn grid_spacing(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    /// Trapezoid `L1` norm of `|m|`.
    pub fn l1_norm(&self) -> f64 {
        let h = self.grid_spacing();
        let mut acc = 0.0;
        for i in 0..self.m.len() - 1 {
            acc += h * (self.m[i].abs() + self.m[i + 1].abs()) / 2.0;
        }
        acc
    }

    pub fn linf_norm(&self) -> f64 {
        self.m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
    }

    pub fn min_abs_m(&self) -> f64 {
        self.m.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()))
    }
}

/// Pointwise pressure gradient `-B(x) / (1 + m^2)`.
pub fn pressure_gradient_1d(profile: &Profile1D) -> Vec<f64> {
    profile
        .b
        .iter()
        .zip(&profile.m)
        .map(|(&b, &m)| -b / (1.0 + m * m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
    /// Attracting from one side, repelling from the other (fold point).
    Semistable,
}

#[derive(Debug, Clone, Copy)]
pub struct StationaryPoint {
    pub m: f64,
    pub stability: Stability,
}

/// Stationary points of the nodal ODE `(3.8)` for one value of `c |B(x)|`.
#[derive(Debug, Clone)]
pub struct ClassificationReport {
    pub gamma: f64,
    pub c_b: f64,
    /// Sorted along the m-axis; stability labels alternate.
    pub points: Vec<StationaryPoint>,
}

impl ClassificationReport {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Classify the stationary points of `m' = (c^2 B^2/(1+m^2)^2 - |m|^{2(gamma-1)}) m`
/// for the parameter value `c_b = c |B(x)| >= 0`:
///
/// - `gamma > 1`: unstable 0, stable symmetric pair (for `c_b > 0`);
/// - `gamma = 1`: stable pair `+-sqrt(c_b - 1)` above the threshold `c_b > 1`,
///   only the stable origin otherwise;
/// - `1/2 <= gamma < 1`: five points above `Z_gamma` (stable 0, unstable
///   inner pair, stable outer pair), fold at `c_b = Z_gamma`, only the
///   stable origin below.
pub fn classify_stationary(c_b: f64, gamma: f64) -> Result<ClassificationReport> {
    if gamma < 0.5 {
        return Err(Error::invalid("gamma", "classification covers gamma >= 1/2"));
    }
    if !(c_b >= 0.0) {
        return Err(Error::invalid("c_b", "c|B| must be nonnegative"));
    }
    let mut points = Vec::new();
    if gamma >= 1.0 {
        let roots = solve_z(c_b, gamma, 1.0)?;
        match roots.upper {
            Some(ms) => {
                points.push(StationaryPoint { m: -ms, stability: Stability::Stable });
                points.push(StationaryPoint { m: 0.0, stability: Stability::Unstable });
                points.push(StationaryPoint { m: ms, stability: Stability::Stable });
            }
            None => {
                points.push(StationaryPoint { m: 0.0, stability: Stability::Stable });
            }
        }
    } else {
        let roots = solve_z(c_b, gamma, 1.0)?;
        match (roots.lower, roots.upper) {
            (Some(mu), Some(ms)) if ms > mu => {
                points.push(StationaryPoint { m: -ms, stability: Stability::Stable });
                points.push(StationaryPoint { m: -mu, stability: Stability::Unstable });
                points.push(StationaryPoint { m: 0.0, stability: Stability::Stable });
                points.push(StationaryPoint { m: mu, stability: Stability::Unstable });
                points.push(StationaryPoint { m: ms, stability: Stability::Stable });
            }
            (Some(mf), Some(_)) => {
                // fold: the two branches coincide
                points.push(StationaryPoint { m: -mf, stability: Stability::Semistable });
                points.push(StationaryPoint { m: 0.0, stability: Stability::Stable });
                points.push(StationaryPoint { m: mf, stability: Stability::Semistable });
            }
            _ => {
                points.push(StationaryPoint { m: 0.0, stability: Stability::Stable });
            }
        }
    }
    Ok(ClassificationReport { gamma, c_b, points })
}

/// Margin of the extinction condition: the negated maximum over
/// `0 < m <= m_max` of `c^2 B_sup^2/(1+m^2)^2 - |m|^{2(gamma-1)}` for
/// `1/2 <= gamma <= 1`, or of the `|m|`-weighted variant
/// `c^2 B_sup^2 |m|/(1+m^2)^2 - |m|^{2 gamma - 1}` for `-1 <= gamma < 1/2`.
/// Requires `c B_sup < Z_gamma` strictly.
pub fn breakdown_margin(gamma: f64, c: f64, b_sup: f64, m_max: f64) -> Result<f64> {
    if !(m_max > 0.0) {
        return Err(Error::invalid("m_max", "must be positive"));
    }
    if !(b_sup >= 0.0) || !(c > 0.0) {
        return Err(Error::invalid("c", "need c > 0 and B_sup >= 0"));
    }
    let z = z_constant(gamma)?;
    if c * b_sup >= z {
        return Err(Error::invalid(
            "b_sup",
            format!("margin requires c*B_sup < Z_gamma = {z}, got {}", c * b_sup),
        ));
    }
    let cb_sq = c * c * b_sup * b_sup;
    let weighted = gamma < 0.5;
    let phi = |m: f64| -> f64 {
        let act = cb_sq / (1.0 + m * m).powi(2);
        if weighted {
            act * m - (m * m).powf(gamma - 0.5)
        } else {
            act - (m * m).powf(gamma - 1.0)
        }
    };
    // coarse log grid, then golden-section refinement around the best point
    let n = 4000;
    let lo = m_max * 1e-14;
    let ratio = (m_max / lo).powf(1.0 / (n as f64 - 1.0));
    let mut best_i = 0;
    let mut best = f64::NEG_INFINITY;
    let mut m = lo;
    let mut grid = Vec::with_capacity(n);
    for i in 0..n {
        grid.push(m);
        let v = phi(m);
        if v > best {
            best = v;
            best_i = i;
        }
        m *= ratio;
    }
    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(n - 1)];
    let inv_phi = |m: f64| -phi(m);
    let gr = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c1 = b - gr * (b - a);
    let mut c2 = a + gr * (b - a);
    for _ in 0..200 {
        if inv_phi(c1) < inv_phi(c2) {
            b = c2;
        } else {
            a = c1;
        }
        c1 = b - gr * (b - a);
        c2 = a + gr * (b - a);
        if (b - a).abs() < 1e-15 * m_max {
            break;
        }
    }
    let refined = best.max(phi((a + b) / 2.0));
    let margin = -refined;
    if !(margin > 0.0) {
        return Err(Error::invalid(
            "b_sup",
            format!("computed margin {margin} is not positive"),
        ));
    }
    Ok(margin)
}

#[derive(Debug, Clone, Copy)]
pub enum StopRule1D {
    FinalTime { t_end: f64 },
    Extinction { threshold: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Integrate1DOptions {
    pub delta_max: f64,
    pub delta_min: f64,
    pub max_steps: usize,
    /// Keep every n-th state in the snapshot list (0 disables snapshots).
    pub snapshot_stride: usize,
}

impl Default for Integrate1DOptions {
    fn default() -> Self {
        Integrate1DOptions {
            delta_max: 1e-3,
            delta_min: 1e-14,
            max_steps: 10_000_000,
            snapshot_stride: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory1D {
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    pub l1_history: Vec<(f64, f64)>,
    pub linf_history: Vec<(f64, f64)>,
    pub t_ex: Option<f64>,
    pub final_t: f64,
    pub final_m: Vec<f64>,
    pub hit_max_steps: bool,
}

/// Integrate the reduced equation with implicit (backward Euler) diffusion
/// and explicit reaction, mirroring the 2D IMEX split. For `D = 0` this is
/// the exact per-node explicit Euler ODE family. The time step follows the
/// same stability-window rule as in 2D with `grad p` from the closed form.
pub fn integrate_1d(
    profile: &Profile1D,
    d: f64,
    c: f64,
    gamma: f64,
    opts: Integrate1DOptions,
    stop: StopRule1D,
) -> Result<Trajectory1D> {
    if !(d >= 0.0) {
        return Err(Error::invalid("D", "diffusivity must be nonnegative"));
    }
    let n = profile.n_nodes();
    let h = profile.grid_spacing();
    let mut m = profile.m.clone();
    let b = &profile.b;
    let mut t = 0.0;
    let mut delta_prev = 0.0_f64;
    let mut traj = Trajectory1D {
        snapshot_times: Vec::new(),
        snapshots: Vec::new(),
        l1_history: Vec::new(),
        linf_history: Vec::new(),
        t_ex: None,
        final_t: 0.0,
        final_m: Vec::new(),
        hit_max_steps: false,
    };
    let mut reaction = vec![0.0; n];
    // Thomas algorithm buffers for (I + delta D^2 / h^2 * T) with Neumann ends
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut cprime = vec![0.0; n];

    let l1_of = |m: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - 1 {
            acc += h * (m[i].abs() + m[i + 1].abs()) / 2.0;
        }
        acc
    };
    let record = |traj: &mut Trajectory1D, t: f64, m: &[f64], step: usize| {
        traj.l1_history.push((t, l1_of(m)));
        traj.linf_history
            .push((t, m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))));
        if opts.snapshot_stride > 0 && step % opts.snapshot_stride == 0 {
            traj.snapshot_times.push(t);
            traj.snapshots.push(m.to_vec());
        }
    };
    record(&mut traj, t, &m, 0);

    let mut finish = |traj: &mut Trajectory1D, t: f64, m: Vec<f64>| {
        traj.final_t = t;
        if opts.snapshot_stride > 0 && traj.snapshot_times.last() != Some(&t) {
            traj.snapshot_times.push(t);
            traj.snapshots.push(m.clone());
        }
        traj.final_m = m;
    };

    let check_stop = |t: f64, m: &[f64]| -> Option<Option<f64>> {
        match stop {
            StopRule1D::FinalTime { t_end } => {
                if t >= t_end {
                    return Some(None);
                }
            }
            StopRule1D::Extinction { threshold } => {
                let min = m.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
                if min < threshold {
                    return Some(Some(t));
                }
            }
        }
        None
    };
    if let Some(t_ex) = check_stop(t, &m) {
        traj.t_ex = t_ex;
        finish(&mut traj, t, m);
        return Ok(traj);
    }

    for step in 1..=opts.max_steps {
        // reaction and time-step scale from the closed-form pressure gradient
        let mut g_inf = 0.0_f64;
        for i in 0..n {
            let mi = m[i];
            let denom = 1.0 + mi * mi;
            g_inf = g_inf.max((b[i] / denom).abs());
            if mi == 0.0 {
                if gamma < 0.5 {
                    return Err(Error::SingularRelaxation { gamma });
                }
                reaction[i] = 0.0;
            } else {
                let coeff = c * c * b[i] * b[i] / (denom * denom) - (mi * mi).powf(gamma - 1.0);
                reaction[i] = coeff * mi;
            }
            if !reaction[i].is_finite() {
                return Err(Error::NonFiniteForcing { triangle: i });
            }
        }
        let mut delta = if g_inf == 0.0 {
            opts.delta_max
        } else {
            let scale = 1.0 / (2.0 * c * c * g_inf * g_inf);
            if delta_prev > 0.0 && delta_prev > scale / 10.0 && delta_prev < 1.8 * scale {
                delta_prev
            } else {
                scale
            }
        }
        .min(opts.delta_max);
        if delta < opts.delta_min {
            return Err(Error::TimeStepUnderflow {
                floor: opts.delta_min,
                t,
            });
        }
        if let StopRule1D::FinalTime { t_end } = stop {
            delta = delta.min(t_end - t);
        }
        delta_prev = delta;

        if d == 0.0 {
            for i in 0..n {
                m[i] += delta * reaction[i];
            }
        } else {
            // backward Euler diffusion: tridiagonal solve, Neumann ends
            let lam = delta * d * d / (h * h);
            for i in 0..n {
                rhs[i] = m[i] + delta * reaction[i];
                diag[i] = 1.0 + 2.0 * lam;
            }
            // mirror ghost nodes: first/last rows couple twice to the inner node
            let off = -lam;
            let first_off = 2.0 * off;
            cprime[0] = first_off / diag[0];
            rhs[0] /= diag[0];
            for i in 1..n {
                let lower = if i == n - 1 { first_off } else { off };
                let denom = diag[i] - lower * cprime[i - 1];
                cprime[i] = off / denom;
                rhs[i] = (rhs[i] - lower * rhs[i - 1]) / denom;
            }
            m[n - 1] = rhs[n - 1];
            for i in (0..n - 1).rev() {
                m[i] = rhs[i] - cprime[i] * m[i + 1];
            }
        }
        t += delta;
        record(&mut traj, t, &m, step);
        if let Some(t_ex) = check_stop(t, &m) {
            traj.t_ex = t_ex;
            finish(&mut traj, t, m);
            return Ok(traj);
        }
    }
    traj.hit_max_steps = true;
    finish(&mut traj, t, m);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // frozen with an independent high-precision evaluation
    const Z_HALF: f64 = 1.7547653506033233;
    const Z_QUARTER: f64 = 1.9378192408783845;

    #[test]
    fn z_constant_values() {
        assert_eq!(z_constant(1.0).unwrap(), 1.0);
        assert_relative_eq!(z_constant(0.0).unwrap(), 2.0, max_relative = 1e-14);
        assert_relative_eq!(z_constant(0.5).unwrap(), Z_HALF, max_relative = 1e-14);
        assert_relative_eq!(z_constant(0.25).unwrap(), Z_QUARTER, max_relative = 1e-14);
        assert_eq!(z_constant(-1.0).unwrap(), 1.0);
        assert!(z_constant(1.5).is_err());
        assert!(z_constant(-1.2).is_err());
    }

    #[test]
    fn h_gamma_values_and_minimum() {
        assert_relative_eq!(h_gamma(1.0, 1.0).unwrap(), 4.0, max_relative = 1e-14);
        assert_relative_eq!(h_gamma(1.0, 0.0).unwrap(), 4.0, max_relative = 1e-14);
        assert!(h_gamma(0.0, 1.0).is_err());
        assert!(h_gamma(-0.5, 1.0).is_err());
        let (argmin, min) = h_gamma_min(0.0).unwrap();
        assert_relative_eq!(argmin, 1.0, max_relative = 1e-14);
        assert_relative_eq!(min, 4.0, max_relative = 1e-14);
        let (argmin1, min1) = h_gamma_min(1.0).unwrap();
        assert_eq!(argmin1, 0.0);
        assert_relative_eq!(min1, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn z_constant_matches_numeric_infimum() {
        // brute-force oracle: infimum of sqrt(h_gamma) over a wide log grid
        for &gamma in &[-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut inf = f64::INFINITY;
            let n = 200_000;
            for i in 0..n {
                let m = 10f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64);
                inf = inf.min(h_gamma(m, gamma).unwrap().sqrt());
            }
            let z = z_constant(gamma).unwrap();
            assert!(
                (z - inf).abs() <= 1e-10,
                "gamma = {gamma}: Z = {z}, brute force {inf}"
            );
        }
    }

    #[test]
    fn profile_cumulative_integral() {
        let p = Profile1D::new(10, |_| 1.0, |_| 0.0).unwrap();
        assert_eq!(p.b[0], 0.0);
        assert_relative_eq!(p.b[10], 1.0, max_relative = 1e-14);
        for w in p.b.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(Profile1D::new(4, |x| x - 0.5, |_| 0.0).is_err());
    }

    #[test]
    fn pressure_gradient_examples() {
        let p = Profile1D::new(8, |_| 1.0, |_| 0.0).unwrap();
        let g = pressure_gradient_1d(&p);
        for (i, &xi) in p.x.iter().enumerate() {
            assert_relative_eq!(g[i], -xi, max_relative = 1e-13, epsilon = 1e-15);
        }
        let zero_s = Profile1D::new(8, |_| 0.0, |_| 1.0).unwrap();
        assert!(pressure_gradient_1d(&zero_s).iter().all(|&v| v == 0.0));
        let huge_m = Profile1D::new(8, |_| 1.0, |_| 1e9).unwrap();
        assert!(pressure_gradient_1d(&huge_m).iter().all(|&v| v.abs() < 1e-17));
    }

    #[test]
    fn classify_cases() {
        // gamma > 1: three points, unstable origin
        let r = classify_stationary(2.0, 1.5).unwrap();
        assert_eq!(r.count(), 3);
        assert_eq!(r.points[1].stability, Stability::Unstable);
        assert_eq!(r.points[0].stability, Stability::Stable);
        assert!(r.points[0].m < 0.0 && r.points[2].m > 0.0);

        // gamma = 1, cB = 4: m_s = sqrt(3)
        let r = classify_stationary(4.0, 1.0).unwrap();
        assert_eq!(r.count(), 3);
        assert_relative_eq!(r.points[2].m, 3.0_f64.sqrt(), max_relative = 1e-12);

        // gamma = 1/2, cB below the threshold: stable origin only
        let r = classify_stationary(0.5, 0.5).unwrap();
        assert_eq!(r.count(), 1);
        assert_eq!(r.points[0].stability, Stability::Stable);

        // gamma = 1/2 above the threshold: five alternating points
        let r = classify_stationary(2.0, 0.5).unwrap();
        assert_eq!(r.count(), 5);
        let labels: Vec<Stability> = r.points.iter().map(|p| p.stability).collect();
        assert_eq!(
            labels,
            vec![
                Stability::Stable,
                Stability::Unstable,
                Stability::Stable,
                Stability::Unstable,
                Stability::Stable
            ]
        );
        assert!(r.points.windows(2).all(|w| w[0].m < w[1].m));

        assert!(classify_stationary(1.0, 0.4).is_err());
    }

    #[test]
    fn classify_labels_match_rhs_sign_analysis() {
        // brute force: sign of the RHS on either side of each root
        for &(c_b, gamma) in &[(2.0, 0.5), (1.2, 0.75), (3.0, 1.3), (0.9, 1.0), (2.5, 1.0)] {
            let report = classify_stationary(c_b, gamma).unwrap();
            let rhs = |m: f64| -> f64 {
                if m == 0.0 {
                    return 0.0;
                }
                (c_b * c_b / (1.0 + m * m).powi(2) - (m * m).powf(gamma - 1.0)) * m
            };
            for p in &report.points {
                let eps = 1e-6 * (1.0 + p.m.abs());
                let left = rhs(p.m - eps);
                let right = rhs(p.m + eps);
                match p.stability {
                    Stability::Stable => assert!(left > 0.0 && right < 0.0, "at {}", p.m),
                    Stability::Unstable => assert!(left < 0.0 && right > 0.0, "at {}", p.m),
                    Stability::Semistable => assert!(left * right > 0.0),
                }
            }
        }
    }

    #[test]
    fn breakdown_margin_examples() {
        // frozen oracle values (grid maximization at high precision)
        let d1 = breakdown_margin(1.0, 1.0, 0.5, 1.0).unwrap();
        assert_relative_eq!(d1, 0.75, max_relative = 1e-9);
        let d2 = breakdown_margin(0.25, 1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(d2, 1.0942135623730951, max_relative = 1e-9);
        let d3 = breakdown_margin(0.75, 1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(d3, 0.7742135623730951, max_relative = 1e-9);
        // equality with Z_gamma is rejected
        let z = z_constant(0.5).unwrap();
        assert!(breakdown_margin(0.5, 1.0, z, 1.0).is_err());
    }

    #[test]
    fn stationary_initial_data_stays_fixed() {
        // gamma = 1, nodes seeded at sqrt((cB-1)_+): a fixed point of (3.8)
        let c = 4.0;
        let profile = Profile1D::new(32, |_| 1.0, |x| {
            let cb = c * x;
            if cb > 1.0 {
                (cb - 1.0).sqrt()
            } else {
                0.0
            }
        })
        .unwrap();
        let traj = integrate_1d(
            &profile,
            0.0,
            c,
            1.0,
            Integrate1DOptions::default(),
            StopRule1D::FinalTime { t_end: 0.5 },
        )
        .unwrap();
        for (m_end, m_start) in traj.final_m.iter().zip(&profile.m) {
            assert_relative_eq!(m_end, m_start, epsilon = 1e-9);
        }
    }

    #[test]
    fn extinction_for_small_gamma() {
        // gamma = 1/4, c = 1, S = 1: c ||B|| = 1 < Z_{1/4}, finite breakdown
        let profile = Profile1D::new(64, |_| 1.0, |_| 0.5).unwrap();
        let margin = breakdown_margin(0.25, 1.0, 1.0, 0.5).unwrap();
        let traj = integrate_1d(
            &profile,
            0.0,
            1.0,
            0.25,
            Integrate1DOptions::default(),
            StopRule1D::Extinction { threshold: 1e-8 },
        )
        .unwrap();
        let t_ex = traj.t_ex.expect("finite extinction time");
        let bound = profile.l1_norm() / margin;
        assert!(t_ex <= bound, "t_ex = {t_ex}, bound = {bound}");
        assert!(t_ex > 0.0);
    }

    #[test]
    fn exponential_l1_decay_for_gamma_above_half() {
        let profile = Profile1D::new(64, |_| 1.0, |_| 0.5).unwrap();
        let margin = breakdown_margin(0.75, 1.0, 1.0, 0.5).unwrap();
        let traj = integrate_1d(
            &profile,
            0.0,
            1.0,
            0.75,
            Integrate1DOptions::default(),
            StopRule1D::FinalTime { t_end: 2.0 },
        )
        .unwrap();
        let (t0, l0) = traj.l1_history[0];
        let (t1, l1) = *traj.l1_history.last().unwrap();
        let rate = (l0 / l1).ln() / (t1 - t0);
        assert!(rate >= margin, "fitted rate {rate} < margin {margin}");
        // monotone decrease along the way
        for w in traj.l1_history.windows(2) {
            assert!(w[1].1 < w[0].1);
        }
    }

    #[test]
    fn maximum_principle_under_smallness() {
        let profile = Profile1D::new(48, |_| 1.0, |x| 0.4 + 0.1 * (6.0 * x).sin()).unwrap();
        let m_inf0 = profile.linf_norm();
        // include diffusion to exercise the implicit solve
        let traj = integrate_1d(
            &profile,
            0.3,
            1.0,
            0.75,
            Integrate1DOptions::default(),
            StopRule1D::FinalTime { t_end: 1.0 },
        )
        .unwrap();
        for &(_, linf) in &traj.linf_history {
            assert!(linf <= m_inf0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn implicit_diffusion_preserves_constants() {
        // Neumann BC: a constant profile is invariant under pure diffusion
        let profile = Profile1D::new(20, |_| 0.0, |_| 0.7).unwrap();
        let traj = integrate_1d(
            &profile,
            1.0,
            1.0,
            1.0,
            Integrate1DOptions {
                delta_max: 1e-2,
                ..Default::default()
            },
            StopRule1D::FinalTime { t_end: 0.1 },
        )
        .unwrap();
        for &v in &traj.final_m {
            // reaction: gamma = 1, B = 0 gives m' = -m, so exact decay
            assert!(v < 0.7 && v > 0.7 * (-0.11_f64).exp());
        }
        let spread = traj
            .final_m
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!((spread.1 - spread.0).abs() < 1e-12);
    }

    #[test]
    fn singular_relaxation_errors_without_extinction_stop() {
        let profile = Profile1D::new(8, |_| 0.0, |x| if x < 0.5 { 0.0 } else { 1.0 }).unwrap();
        let res = integrate_1d(
            &profile,
            0.0,
            1.0,
            0.25,
            Integrate1DOptions::default(),
            StopRule1D::FinalTime { t_end: 1.0 },
        );
        assert!(matches!(res, Err(Error::SingularRelaxation { .. })));
    }
}
