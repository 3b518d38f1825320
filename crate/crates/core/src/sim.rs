//! Closed-loop integration of the averaged cascade and of the full
//! sinusoidal dynamics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::allocation::allocate_all;
use crate::amff::{full_accelerations, moments_at, AmplitudeSet};
use crate::error::{EmffError, Result};
use crate::model::{drift, ForceVector, FormationState, Vec3};
use crate::mpc::MpcPolicy;
use crate::runlog::RunLog;
use crate::safety::{barrier_r, barrier_v, constraint_b, hocbf_r1, CascadeState, FilterOutput, SafetyFilter};
use crate::scenario::Scenario;

/// Maximum number of step halvings after a domain error.
pub const MAX_HALVINGS: u32 = 10;

/// MPC planner plus safety filter, evaluated as a state feedback.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub filter: SafetyFilter,
    pub policy: MpcPolicy,
    /// When false, `μ = μ_d` and the filter is only evaluated for logging.
    pub filter_enabled: bool,
}

impl ClosedLoop {
    pub fn new(filter: SafetyFilter, policy: MpcPolicy, filter_enabled: bool) -> Self {
        Self { filter, policy, filter_enabled }
    }

    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        Ok(Self::new(s.safety_filter(), s.policy()?, s.filter_enabled))
    }

    pub fn control(&self, c: &CascadeState) -> Result<FilterOutput> {
        if self.filter_enabled {
            return self.filter.filter(c, &self.policy);
        }
        let (mu_d, nu_d) = self.filter.mu_desired(c, &self.policy)?;
        let lie = self.filter.lie_derivatives(c)?;
        let omega = constraint_b(lie.l_phi_h, &lie.l_g_h, lie.h, self.filter.cbf.alpha_gain, &mu_d, 0.0);
        Ok(FilterOutput {
            mu_star: mu_d.clone(),
            eta_star: 0.0,
            lambda: 0.0,
            omega,
            h: lie.h,
            active: false,
            mu_desired: mu_d,
            nu_desired: nu_d,
            l_phi_h: lie.l_phi_h,
            l_g_h: lie.l_g_h,
            arguments: lie.arguments,
        })
    }

    /// Flattened `(ẋ, ν̇)` for a given surrogate control.
    pub fn rate(&self, c: &CascadeState, mu: &ForceVector) -> Result<DVector<f64>> {
        let (xdot, nudot) = self.filter.cascade_rate(c, mu)?;
        let x = xdot.to_vector();
        let nu = nudot.to_vector();
        Ok(DVector::from_iterator(x.len() + nu.len(), x.iter().chain(nu.iter()).copied()))
    }

    fn closed_loop_rate(&self, c: &CascadeState) -> Result<DVector<f64>> {
        let out = self.control(c)?;
        self.rate(c, &out.mu_star)
    }
}

fn unflatten(n: usize, y: &DVector<f64>) -> Result<CascadeState> {
    let c = CascadeState::from_slice(n, y.as_slice())?;
    c.x.check_separation()?;
    Ok(c)
}

/// One classical RK4 step of the closed-loop cascade, no step control.
pub fn rk4_step(c: &CascadeState, dt: f64, ctl: &ClosedLoop) -> Result<CascadeState> {
    let n = c.x.n();
    let y0 = c.to_vector();
    let k1 = ctl.closed_loop_rate(c)?;
    let k2 = ctl.closed_loop_rate(&unflatten(n, &(&y0 + &k1 * (0.5 * dt)))?)?;
    let k3 = ctl.closed_loop_rate(&unflatten(n, &(&y0 + &k2 * (0.5 * dt)))?)?;
    let k4 = ctl.closed_loop_rate(&unflatten(n, &(&y0 + &k3 * dt))?)?;
    let y1 = y0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    unflatten(n, &y1)
}

/// RK4 step of length `dt`; on a domain error the step is split into two
/// halves, recursively, at most [`MAX_HALVINGS`] deep.
pub fn step_averaged(c: &CascadeState, dt: f64, ctl: &ClosedLoop) -> Result<CascadeState> {
    step_with_halving(c, dt, ctl, 0)
}

fn step_with_halving(c: &CascadeState, dt: f64, ctl: &ClosedLoop, depth: u32) -> Result<CascadeState> {
    match rk4_step(c, dt, ctl) {
        Err(EmffError::Coincident { .. } | EmffError::Domain(_)) if depth < MAX_HALVINGS => {
            let mid = step_with_halving(c, 0.5 * dt, ctl, depth + 1)?;
            step_with_halving(&mid, 0.5 * dt, ctl, depth + 1)
        }
        other => other,
    }
}

/// Local error control for [`step_adaptive`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub rtol: f64,
    /// Absolute tolerance on positions and velocities.
    pub atol_state: f64,
    /// Absolute tolerance on `ν`.
    pub atol_nu: f64,
    pub min_step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: 1e-9, atol_state: 1e-12, atol_nu: 1e-3, min_step: 1e-13 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub smallest: f64,
    /// Largest scaled local error estimate of an accepted substep.
    pub worst_error: f64,
}

fn block_error(e: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>, split: usize, tol: &Tolerance) -> f64 {
    let inf = |v: &DVector<f64>, r: std::ops::Range<usize>| v.as_slice()[r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for (range, atol) in [(0..split, tol.atol_state), (split..e.len(), tol.atol_nu)] {
        if range.is_empty() {
            continue;
        }
        let scale = atol + tol.rtol * inf(a, range.clone()).max(inf(b, range.clone()));
        worst = worst.max(inf(e, range) / scale);
    }
    worst
}

const NU_FD_REL: f64 = 1e-11;

/// Forward-difference Jacobian of the closed-loop cascade field.
pub fn closed_loop_jacobian(c: &CascadeState, ctl: &ClosedLoop) -> Result<DMatrix<f64>> {
    let y = c.to_vector();
    let f0 = ctl.closed_loop_rate(c)?;
    jacobian(c.x.n(), &y, &f0, ctl)
}

fn jacobian(n: usize, y: &DVector<f64>, f0: &DVector<f64>, ctl: &ClosedLoop) -> Result<DMatrix<f64>> {
    let dim = y.len();
    let split = 6 * n;
    let nu_scale = y.rows(split, dim - split).amax().max(1.0);
    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        // The soft-min weights vary over a few units of `ν`, far below
        // sqrt(eps)·|ν|, so `ν` columns use a step near 1e-11·|ν|.
        let mut d = if j < split { f64::EPSILON.sqrt() * y[j].abs().max(1.0) } else { NU_FD_REL * nu_scale };
        let mut yp = y.clone();
        yp[j] += d;
        d = yp[j] - y[j];
        let fp = ctl.closed_loop_rate(&unflatten(n, &yp)?)?;
        jac.set_column(j, &((fp - f0) / d));
    }
    Ok(jac)
}

// Hairer–Wanner RODAS4 coefficients: stiffly accurate, L-stable, with an
// embedded order-3 solution whose difference is the last stage.
const GAM: f64 = 0.25;
const A21: f64 = 1.544;
const A31: f64 = 0.946_678_528_081_582_6;
const A32: f64 = 0.255_701_169_898_328_4;
const A41: f64 = 3.314_825_187_068_521;
const A42: f64 = 2.896_124_015_972_201;
const A43: f64 = 0.998_641_913_997_781_7;
const A51: f64 = 1.221_224_509_226_641;
const A52: f64 = 6.019_134_481_288_629;
const A53: f64 = 12.537_083_329_320_87;
const A54: f64 = -0.687_886_036_105_895;
const C21: f64 = -5.6688;
const C31: f64 = -2.430_093_356_833_875;
const C32: f64 = -0.206_359_915_709_191_5;
const C41: f64 = -0.107_352_905_815_137_5;
const C42: f64 = -9.594_562_251_023_355;
const C43: f64 = -20.470_286_148_096_16;
const C51: f64 = 7.496_443_313_967_647;
const C52: f64 = -10.246_804_314_643_52;
const C53: f64 = -33.999_903_528_199_05;
const C54: f64 = 11.708_908_932_061_6;
const C61: f64 = 8.083_246_795_921_522;
const C62: f64 = -7.981_132_988_064_893;
const C63: f64 = -31.521_594_328_743_71;
const C64: f64 = 16.319_305_431_231_36;
const C65: f64 = -6.058_818_238_834_054;

/// One Rosenbrock step: `(y_new, error_estimate)`.
fn rosenbrock(
    n: usize,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    jac: &DMatrix<f64>,
    h: f64,
    ctl: &ClosedLoop,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dim = y.len();
    let w = DMatrix::identity(dim, dim) / (GAM * h) - jac;
    let lu = w.lu();
    let solve = |rhs: DVector<f64>| {
        lu.solve(&rhs).ok_or_else(|| EmffError::Domain("singular Rosenbrock matrix".into()))
    };
    let rate = |z: DVector<f64>| ctl.closed_loop_rate(&unflatten(n, &z)?);
    let k1 = solve(f0.clone())?;
    let f2 = rate(y + &k1 * A21)?;
    let k2 = solve(f2 + &k1 * (C21 / h))?;
    let f3 = rate(y + &k1 * A31 + &k2 * A32)?;
    let k3 = solve(f3 + (&k1 * C31 + &k2 * C32) / h)?;
    let f4 = rate(y + &k1 * A41 + &k2 * A42 + &k3 * A43)?;
    let k4 = solve(f4 + (&k1 * C41 + &k2 * C42 + &k3 * C43) / h)?;
    let y5 = y + &k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54;
    let f5 = rate(y5.clone())?;
    let k5 = solve(f5 + (&k1 * C51 + &k2 * C52 + &k3 * C53 + &k4 * C54) / h)?;
    let y6 = y5 + &k5;
    let f6 = rate(y6.clone())?;
    let k6 = solve(f6 + (&k1 * C61 + &k2 * C62 + &k3 * C63 + &k4 * C64 + &k5 * C65) / h)?;
    let next = y6 + &k6;
    unflatten(n, &next)?;
    Ok((next, k6))
}

/// Advances the closed-loop cascade by exactly `dt` with error-controlled
/// linearly implicit (Rosenbrock, order 4, L-stable) substeps.
///
/// Close to the boundary of the safe set the soft-min weights switch over
/// tiny changes of `ν` and the filtered field becomes stiff, which rules out
/// explicit substeps. `first_substep` carries the last accepted substep
/// size between calls.
pub fn step_adaptive(
    c: &CascadeState,
    dt: f64,
    ctl: &ClosedLoop,
    tol: &Tolerance,
    first_substep: &mut f64,
    stats: &mut StepStats,
) -> Result<CascadeState> {
    let n = c.x.n();
    let split = 6 * n;
    let mut y = c.to_vector();
    let mut t = 0.0;
    let mut h = first_substep.clamp(tol.min_step, dt);
    let mut f0 = ctl.closed_loop_rate(c)?;
    let mut jac = jacobian(n, &y, &f0, ctl)?;
    while t < dt {
        let last = t + h >= dt * (1.0 - 1e-12);
        let step = if last { dt - t } else { h };
        let err = match rosenbrock(n, &y, &f0, &jac, step, ctl) {
            Ok((next, e)) => Ok((block_error(&e, &y, &next, split, tol), next)),
            Err(EmffError::Coincident { .. } | EmffError::Domain(_)) => Err(f64::INFINITY),
            Err(e) => return Err(e),
        };
        match err {
            Ok((ratio, next)) if ratio <= 1.0 => {
                y = next;
                t = if last { dt } else { t + step };
                stats.accepted += 1;
                stats.smallest = if stats.smallest == 0.0 { step } else { stats.smallest.min(step) };
                let grow = if ratio > 0.0 { (0.9 * ratio.powf(-0.25)).min(4.0) } else { 4.0 };
                if !last || step >= h {
                    h = (step * grow).min(dt);
                }
                if t < dt {
                    f0 = ctl.closed_loop_rate(&unflatten(n, &y)?)?;
                    jac = jacobian(n, &y, &f0, ctl)?;
                }
            }
            other => {
                let ratio = match other {
                    Ok((r, _)) => r,
                    Err(r) => r,
                };
                stats.rejected += 1;
                if step <= tol.min_step {
                    return Err(EmffError::Domain(format!(
                        "substep fell below {:e} s (local error ratio {ratio:e})",
                        tol.min_step
                    )));
                }
                let shrink = if ratio.is_finite() { (0.9 * ratio.powf(-1.0 / 3.0)).clamp(0.1, 0.5) } else { 0.25 };
                h = (step * shrink).max(tol.min_step);
            }
        }
    }
    *first_substep = h;
    unflatten(n, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    SafeSetExit { time: f64, detail: String },
    Failed { time: f64, error: String },
    /// The wall-clock budget ran out before the requested duration.
    BudgetExhausted { time: f64, wall_s: f64 },
}

impl Termination {
    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArgminSegment {
    pub name: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_time_s: f64,
    pub min_distance_m: f64,
    pub max_relative_speed_m_per_s: f64,
    pub max_power_va: f64,
    pub min_h: f64,
    /// Smallest value of each safe-set quantity over the run.
    pub min_margins: Vec<(String, f64)>,
    pub final_formation_error_m: Vec<(String, f64)>,
    pub max_momentum_drift: f64,
    pub active_fraction: f64,
    pub argmin_segments: Vec<ArgminSegment>,
    pub substeps: StepStats,
}

#[derive(Clone, Debug)]
pub struct AveragedRun {
    pub log: RunLog,
    pub summary: RunSummary,
    pub termination: Termination,
    pub final_state: CascadeState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub duration: Option<f64>,
    pub log_every: Option<usize>,
    /// Stop at the first raw constraint violation beyond the tolerance.
    pub abort_on_exit: bool,
    /// Wall-clock limit in seconds, checked between averaged steps.
    pub wall_budget_s: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { duration: None, log_every: None, abort_on_exit: true, wall_budget_s: None }
    }
}

/// Column names of an averaged run, in row order. The `argmin` tag column
/// follows.
pub fn averaged_columns(n: usize) -> Vec<String> {
    let pairs = crate::model::PairIndex::new(n).expect("n >= 2");
    let labels: Vec<String> = (0..pairs.len()).map(|k| pairs.label(k)).collect();
    let mut c = vec!["time_s".to_string()];
    let xyz = ["x", "y", "z"];
    for i in 1..=n {
        c.extend(xyz.iter().map(|a| format!("r{i}{a}_m")));
    }
    for i in 1..=n {
        c.extend(xyz.iter().map(|a| format!("v{i}{a}_m_per_s")));
    }
    for prefix in ["nu", "nud", "mu"] {
        for l in &labels {
            c.extend(xyz.iter().map(|a| format!("{prefix}{l}{a}_A2m4")));
        }
    }
    c.push("h".into());
    c.extend(SafetyFilter::argument_names(n));
    for l in &labels {
        c.extend([format!("R{l}"), format!("R{l}_1"), format!("V{l}")]);
    }
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            c.extend(xyz.iter().map(|a| format!("p{i}{j}{a}_Am2")));
        }
    }
    c.extend((1..=n).map(|i| format!("power{i}_VA")));
    c.extend(["lambda", "eta", "omega", "active"].map(String::from));
    c
}

struct Observation {
    row: Vec<f64>,
    argmin: usize,
    min_distance: f64,
    max_speed: f64,
    max_power: f64,
    margins: Vec<(String, f64)>,
}

fn observe(t: f64, c: &CascadeState, out: &FilterOutput, filter: &SafetyFilter) -> Result<Observation> {
    let x = &c.x;
    let n = x.n();
    let pairs = x.pairs();
    let lim = &filter.limits;
    let mut row = vec![t];
    for r in &x.r {
        row.extend(r.iter());
    }
    for v in &x.v {
        row.extend(v.iter());
    }
    for fv in [&c.nu, &out.nu_desired, &out.mu_star] {
        for f in &fv.f {
            row.extend(f.iter());
        }
    }
    row.push(out.h);
    row.extend(&out.arguments);

    let mut margins = Vec::new();
    let (mut min_distance, mut max_speed) = (f64::INFINITY, 0.0f64);
    for (k, i, j) in pairs.iter() {
        let l = pairs.label(k);
        let (rr, r1, vv) = (barrier_r(x, i, j, lim.r_min), hocbf_r1(x, i, j, lim.r_min, &filter.cbf), barrier_v(x, i, j, lim.v_max));
        row.extend([rr, r1, vv]);
        margins.extend([(format!("R{l}"), rr), (format!("R{l}_1"), r1), (format!("V{l}"), vv)]);
        min_distance = min_distance.min(x.rel_pos(i, j).norm());
        max_speed = max_speed.max(x.rel_vel(i, j).norm());
    }
    let amps: AmplitudeSet = allocate_all(x, &c.nu)?;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            row.extend(amps.get(i, j).iter());
        }
    }
    let powers: Vec<f64> = (0..n).map(|i| amps.apparent_power(i, &filter.params)).collect();
    row.extend(&powers);
    row.extend([out.lambda, out.eta_star, out.omega, if out.active { 1.0 } else { 0.0 }]);

    let names = SafetyFilter::argument_names(n);
    for (name, value) in names.iter().zip(&out.arguments).filter(|(n, _)| n.starts_with('Q')) {
        margins.push((name.clone(), *value));
    }
    margins.push(("h".into(), out.h));
    let argmin = out
        .arguments
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("nonempty");
    Ok(Observation { row, argmin, min_distance, max_speed, max_power: powers.iter().copied().fold(0.0, f64::max), margins })
}

/// First raw-constraint violation beyond `tol`, if any. Power margins are
/// compared relative to the power limit.
fn violation(margins: &[(String, f64)], q_max: f64, tol: f64) -> Option<String> {
    margins.iter().find_map(|(name, value)| {
        let limit = match name.as_str() {
            n if n.starts_with('Q') => -tol * q_max,
            n if n.ends_with("_1") || n == "h" => return None,
            _ => -tol,
        };
        (*value < limit).then(|| format!("{name} = {value:e}"))
    })
}

/// Closed-loop run of the averaged cascade with MPC and filter.
pub fn run_averaged(s: &Scenario, opts: &RunOptions) -> Result<AveragedRun> {
    let started = std::time::Instant::now();
    let ctl = ClosedLoop::from_scenario(s)?;
    let duration = opts.duration.unwrap_or(s.duration);
    let log_every = opts.log_every.unwrap_or(s.log_every).max(1);
    let dt = s.averaged_step;
    let steps = (duration / dt).round() as usize;
    let n = s.n;
    let names = SafetyFilter::argument_names(n);

    let mut log = RunLog::with_tag(averaged_columns(n), "argmin");
    let mut c = s.initial.clone();
    let momentum0 = c.x.momentum(s.params.mass);
    let mut summary = RunSummary {
        steps: 0,
        final_time_s: 0.0,
        min_distance_m: f64::INFINITY,
        max_relative_speed_m_per_s: 0.0,
        max_power_va: 0.0,
        min_h: f64::INFINITY,
        min_margins: Vec::new(),
        final_formation_error_m: Vec::new(),
        max_momentum_drift: 0.0,
        active_fraction: 0.0,
        argmin_segments: Vec::new(),
        substeps: StepStats::default(),
    };
    let tol = s.tolerance;
    let mut substep = dt;
    let mut termination = Termination::Completed;
    let mut active_steps = 0usize;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let out = match ctl.control(&c) {
            Ok(o) => o,
            Err(e) => {
                termination = Termination::Failed { time: t, error: e.to_string() };
                break;
            }
        };
        let obs = observe(t, &c, &out, &ctl.filter)?;
        summary.steps = k;
        summary.final_time_s = t;
        summary.min_distance_m = summary.min_distance_m.min(obs.min_distance);
        summary.max_relative_speed_m_per_s = summary.max_relative_speed_m_per_s.max(obs.max_speed);
        summary.max_power_va = summary.max_power_va.max(obs.max_power);
        summary.min_h = summary.min_h.min(out.h);
        if summary.min_margins.is_empty() {
            summary.min_margins = obs.margins.clone();
        } else {
            for (m, (_, v)) in summary.min_margins.iter_mut().zip(&obs.margins) {
                m.1 = m.1.min(*v);
            }
        }
        let speed_scale: f64 = c.x.v.iter().map(|v| v.norm()).sum::<f64>() * s.params.mass;
        let drift_p = (c.x.momentum(s.params.mass) - momentum0).norm();
        summary.max_momentum_drift = summary.max_momentum_drift.max(if speed_scale > 0.0 { drift_p / speed_scale } else { drift_p });
        if out.active {
            active_steps += 1;
        }
        let name = &names[obs.argmin];
        match summary.argmin_segments.last_mut() {
            Some(seg) if &seg.name == name => seg.end_s = t,
            _ => summary.argmin_segments.push(ArgminSegment { name: name.clone(), start_s: t, end_s: t }),
        }

        let exit = violation(&obs.margins, s.limits.q_max, s.exit_tolerance);
        let last = k == steps || (exit.is_some() && opts.abort_on_exit);
        if k % log_every == 0 || last {
            log.push_tagged(obs.row, name.clone());
        }
        if let (Some(detail), true) = (exit, opts.abort_on_exit) {
            termination = Termination::SafeSetExit { time: t, detail };
            break;
        }
        if k == steps {
            break;
        }
        if let Some(budget) = opts.wall_budget_s {
            let wall = started.elapsed().as_secs_f64();
            if wall > budget {
                termination = Termination::BudgetExhausted { time: t, wall_s: wall };
                break;
            }
        }
        let stepped = if s.adaptive {
            step_adaptive(&c, dt, &ctl, &tol, &mut substep, &mut summary.substeps)
        } else {
            step_averaged(&c, dt, &ctl)
        };
        c = match stepped {
            Ok(next) => next,
            Err(e) => {
                termination = Termination::Failed { time: t, error: e.to_string() };
                break;
            }
        };
    }
    summary.active_fraction = active_steps as f64 / (summary.steps + 1) as f64;
    let pairs = c.x.pairs();
    summary.final_formation_error_m = pairs
        .iter()
        .map(|(k, i, j)| (pairs.label(k), (c.x.rel_pos(i, j) - s.mpc.desired[k]).norm()))
        .collect();
    Ok(AveragedRun { log, summary, termination, final_state: c })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullOptions {
    /// Replaces the scenario's initial `ν`.
    pub nu_override: Option<ForceVector>,
    /// Raw samples are logged every this many fine steps.
    pub log_every: usize,
    /// Update `ν` with the closed-loop control dynamics each period; when
    /// false `ν` is held at its initial value.
    pub controlled: bool,
}

impl Default for FullOptions {
    fn default() -> Self {
        Self { nu_override: None, log_every: 1, controlled: true }
    }
}

#[derive(Clone, Debug)]
pub struct FullRun {
    /// `time_s`, positions, velocities, moments `u_i` and accelerations.
    pub samples: RunLog,
    /// Per period: measured mean acceleration, averaged-model acceleration
    /// at the period start, their relative error, and the amplitudes used.
    pub periods: RunLog,
    pub max_relative_error: f64,
    pub final_state: FormationState,
}

fn full_sample_columns(n: usize) -> Vec<String> {
    let xyz = ["x", "y", "z"];
    let mut c = vec!["time_s".to_string()];
    for (prefix, unit) in [("r", "m"), ("v", "m_per_s"), ("u", "Am2"), ("a", "m_per_s2")] {
        for i in 1..=n {
            c.extend(xyz.iter().map(|a| format!("{prefix}{i}{a}_{unit}")));
        }
    }
    c
}

fn full_period_columns(n: usize) -> Vec<String> {
    let xyz = ["x", "y", "z"];
    let mut c = vec!["time_s".to_string()];
    for prefix in ["amean", "aavg"] {
        for i in 1..=n {
            c.extend(xyz.iter().map(|a| format!("{prefix}{i}{a}_m_per_s2")));
        }
    }
    c.push("relative_error".into());
    for i in 1..=n {
        for j in (1..=n).filter(|&j| j != i) {
            c.extend(xyz.iter().map(|a| format!("p{i}{j}{a}_Am2")));
        }
    }
    c.extend((1..=n).map(|i| format!("power{i}_VA")));
    c
}

/// Full sinusoidal dynamics over `window` seconds, a whole number of
/// common periods. Amplitudes are allocated from `(x, ν)` at each period
/// start and held for the period.
pub fn run_full(s: &Scenario, window: f64, opts: &FullOptions) -> Result<FullRun> {
    let period = s.params.common_period()?;
    let periods = (window / period).round();
    if periods < 1.0 || (periods * period - window).abs() > 1e-9 * window.max(period) {
        return Err(EmffError::Config(format!("window {window} s is not a positive multiple of the period {period} s")));
    }
    let periods = periods as usize;
    let fine = (period / s.full_step).ceil() as usize;
    let h = period / fine as f64;
    let n = s.n;
    let ctl = if opts.controlled { Some(ClosedLoop::from_scenario(s)?) } else { None };

    let mut x = s.initial.x.clone();
    let mut nu = opts.nu_override.clone().unwrap_or_else(|| s.initial.nu.clone());
    if nu.len() != s.initial.nu.len() {
        return Err(EmffError::Domain("initial nu has the wrong number of pairs".into()));
    }
    let mut samples = RunLog::new(full_sample_columns(n));
    let mut summary = RunLog::new(full_period_columns(n));
    let mut max_err = 0.0f64;
    let log_every = opts.log_every.max(1);

    let accel = |x: &FormationState, amps: &AmplitudeSet, tau: f64| -> Result<Vec<Vec3>> {
        full_accelerations(x, &moments_at(amps, tau, &s.params), &s.params)
    };

    for p in 0..periods {
        let t0 = p as f64 * period;
        let amps = allocate_all(&x, &nu)?;
        let model = drift(&x, &nu, &s.params)?.v;
        let v_start = x.v.clone();

        for step in 0..fine {
            let tau = step as f64 * h;
            if step % log_every == 0 {
                let u = moments_at(&amps, tau, &s.params);
                let a = accel(&x, &amps, tau)?;
                let mut row = vec![t0 + tau];
                for block in [&x.r, &x.v, &u, &a] {
                    for w in block.iter() {
                        row.extend(w.iter());
                    }
                }
                samples.push(row);
            }
            let rate = |st: &FormationState, tau: f64| -> Result<FormationState> {
                Ok(FormationState { r: st.v.clone(), v: accel(st, &amps, tau)? })
            };
            let k1 = rate(&x, tau)?;
            let k2 = rate(&x.add_scaled(0.5 * h, &k1), tau + 0.5 * h)?;
            let k3 = rate(&x.add_scaled(0.5 * h, &k2), tau + 0.5 * h)?;
            let k4 = rate(&x.add_scaled(h, &k3), tau + h)?;
            x = x
                .add_scaled(h / 6.0, &k1)
                .add_scaled(h / 3.0, &k2)
                .add_scaled(h / 3.0, &k3)
                .add_scaled(h / 6.0, &k4);
            x.check_separation()?;
        }

        let mean: Vec<Vec3> = x.v.iter().zip(&v_start).map(|(a, b)| (a - b) / period).collect();
        let num: f64 = mean.iter().zip(&model).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let den: f64 = model.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
        let err = if den > 0.0 { num / den } else { num };
        max_err = max_err.max(err);
        let mut row = vec![t0];
        for block in [&mean, &model] {
            for w in block.iter() {
                row.extend(w.iter());
            }
        }
        row.push(err);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                row.extend(amps.get(i, j).iter());
            }
        }
        row.extend((0..n).map(|i| amps.apparent_power(i, &s.params)));
        summary.push(row);

        if let Some(ctl) = &ctl {
            let c = CascadeState::new(x.clone(), nu.clone())?;
            let mu = ctl.control(&c)?.mu_star;
            let decay = (-ctl.filter.cbf.a * period).exp();
            nu = ForceVector { f: nu.f.iter().zip(&mu.f).map(|(v, m)| m + (v - m) * decay).collect() };
        }
    }
    Ok(FullRun { samples, periods: summary, max_relative_error: max_err, final_state: x })
}

/// JSON sidecar content: resolved configuration, tolerances and results.
pub fn metadata(s: &Scenario, kind: &str, columns: &[String], extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "generator": format!("emff {}", env!("CARGO_PKG_VERSION")),
        "kind": kind,
        "scenario": s.source,
        "resolved": {
            "kappa": s.params.kappa(),
            "common_period_s": s.params.common_period().ok(),
            "impedance_ohm": (0..s.params.omega.len()).map(|k| s.params.impedance(k)).collect::<Vec<_>>(),
            "mpc_steps": s.mpc.steps().ok(),
            "input_weight_diag": (0..s.mpc.input_weight.nrows()).map(|k| s.mpc.input_weight[(k, k)]).collect::<Vec<_>>(),
            "flow_derivative": format!("{:?}", s.flow_derivative),
            "filter_enabled": s.filter_enabled,
        },
        "tolerances": { "exit_tolerance": s.exit_tolerance, "max_halvings": MAX_HALVINGS },
        "columns": columns,
        "results": extra,
    })
}
