//! Composite soft-minimum relaxed CBF safety filter.
//!
//! The cascade state is `x̂ = (x, ν)` with `x' = A x + B ζ(x, ν)` and the
//! control dynamics `ν' = −a ν + a μ`. The barrier `h` is the soft minimum
//! of the higher-order collision barriers `R_ij,2`, the speed barriers
//! `V_ij,1` and the power barriers `Q_i`. The filter returns the minimizer of
//! `½|μ − μ_d|² + ½γη²` subject to
//! `b = L_φh + L_Gh μ + α(h) + η h ≥ 0` in closed form.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::allocation::psi_with_gradient;
use crate::error::{EmffError, Result};
use crate::model::{
    accelerations_from_zeta, check_len, drift, ConstraintParams, ForceVector, FormationState, PairIndex,
    PhysicalParams, StateDerivative, Vec3, MIN_SEPARATION,
};
use crate::mpc::MpcPolicy;

/// Filter denominators below this are a regularity violation.
pub const MIN_DENOMINATOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbfConfig {
    /// Control-dynamics pole `a`, 1/s.
    pub a: f64,
    /// Tracking rate `σ` of `ν` toward `ν_d`, 1/s.
    pub sigma: f64,
    /// Soft-min sharpness `ρ`.
    pub rho: f64,
    /// Linear class-K gain on `R_ij`.
    pub k0: f64,
    /// Linear class-K gain on `R_ij,1`.
    pub k1: f64,
    /// Linear class-K gain on `V_ij`.
    pub kv: f64,
    /// Linear gain of `α(h)` in the filter constraint.
    pub alpha_gain: f64,
    /// Slack weight `γ`.
    pub gamma_slack: f64,
}

impl CbfConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a_per_s", self.a),
            ("sigma_per_s", self.sigma),
            ("rho", self.rho),
            ("k0_per_s", self.k0),
            ("k1_per_s", self.k1),
            ("kv_per_s", self.kv),
            ("alpha_per_s", self.alpha_gain),
            ("gamma_slack", self.gamma_slack),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EmffError::Config(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// How `ν_d′(x) ẋ` is obtained inside `μ_d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlowDerivative {
    /// Closed-form derivative of the affine MPC law.
    Exact,
    /// Forward difference along the flow with the given step, s.
    ForwardDifference(f64),
}

/// `x̂ = (x, ν)`, flattened as `[x (6n), ν (3P)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeState {
    pub x: FormationState,
    pub nu: ForceVector,
}

impl CascadeState {
    pub fn new(x: FormationState, nu: ForceVector) -> Result<Self> {
        check_len(&x.pairs(), &nu)?;
        Ok(Self { x, nu })
    }

    pub fn dim(&self) -> usize {
        6 * self.x.n() + 3 * self.nu.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let x = self.x.to_vector();
        let nu = self.nu.to_vector();
        DVector::from_iterator(x.len() + nu.len(), x.iter().chain(nu.iter()).copied())
    }

    pub fn from_slice(n: usize, v: &[f64]) -> Result<Self> {
        if v.len() < 6 * n {
            return Err(EmffError::Domain("cascade vector too short".into()));
        }
        let x = FormationState::from_slice(n, &v[..6 * n])?;
        let nu = ForceVector::from_slice(&v[6 * n..])?;
        Self::new(x, nu)
    }
}

/// `R_ij = ½(|r_ij|² − r_min²)`.
pub fn barrier_r(state: &FormationState, i: usize, j: usize, r_min: f64) -> f64 {
    0.5 * (state.rel_pos(i, j).norm_squared() - r_min * r_min)
}

/// `V_ij = ½(v_max² − |v_ij|²)`.
pub fn barrier_v(state: &FormationState, i: usize, j: usize, v_max: f64) -> f64 {
    0.5 * (v_max * v_max - state.rel_vel(i, j).norm_squared())
}

/// `R_ij,1 = r_ijᵀ v_ij + k0 R_ij`.
pub fn hocbf_r1(state: &FormationState, i: usize, j: usize, r_min: f64, cbf: &CbfConfig) -> f64 {
    state.rel_pos(i, j).dot(&state.rel_vel(i, j)) + cbf.k0 * barrier_r(state, i, j, r_min)
}

fn relative_acceleration(state: &FormationState, nu: &ForceVector, params: &PhysicalParams, i: usize, j: usize) -> Result<Vec3> {
    let d = drift(state, nu, params)?;
    Ok(d.v[i] - d.v[j])
}

/// `R_ij,2 = |v_ij|² + r_ijᵀ(v_i′ − v_j′) + k0 r_ijᵀv_ij + k1 R_ij,1`, the
/// Lie derivative of `R_ij,1` along the averaged dynamics plus `k1 R_ij,1`.
pub fn hocbf_r2(
    state: &FormationState,
    nu: &ForceVector,
    i: usize,
    j: usize,
    params: &PhysicalParams,
    limits: &ConstraintParams,
    cbf: &CbfConfig,
) -> Result<f64> {
    let r = state.rel_pos(i, j);
    let v = state.rel_vel(i, j);
    let da = relative_acceleration(state, nu, params, i, j)?;
    Ok(v.norm_squared() + r.dot(&da) + cbf.k0 * r.dot(&v) + cbf.k1 * hocbf_r1(state, i, j, limits.r_min, cbf))
}

/// `V_ij,1 = −v_ijᵀ(v_i′ − v_j′) + kv V_ij`.
pub fn hocbf_v1(
    state: &FormationState,
    nu: &ForceVector,
    i: usize,
    j: usize,
    params: &PhysicalParams,
    limits: &ConstraintParams,
    cbf: &CbfConfig,
) -> Result<f64> {
    let v = state.rel_vel(i, j);
    let da = relative_acceleration(state, nu, params, i, j)?;
    Ok(-v.dot(&da) + cbf.kv * barrier_v(state, i, j, limits.v_max))
}

/// `Q_i = Q̄ − (1/(N²A²)) Σ_{j≠i} Z_ij psi(r_ij, f_ij)`.
pub fn barrier_q(
    state: &FormationState,
    nu: &ForceVector,
    i: usize,
    params: &PhysicalParams,
    limits: &ConstraintParams,
) -> Result<f64> {
    let pairs = state.pairs();
    check_len(&pairs, nu)?;
    let mut sum = 0.0;
    for j in (0..state.n()).filter(|&j| j != i) {
        let k = pairs.index(i, j).expect("valid pair");
        let (a, b) = pairs.pair(k).expect("valid index");
        let r = state.rel_pos(a, b);
        if !(r.norm() >= MIN_SEPARATION) {
            return Err(EmffError::Coincident { i: a + 1, j: b + 1, distance: r.norm() });
        }
        let (psi, _, _) = psi_with_gradient(&r, &nu.f[k], limits.eps1, limits.eps2)?;
        sum += params.impedance(k) * psi;
    }
    Ok(limits.q_max - params.power_scale() * sum)
}

/// `−(1/ρ) log Σ exp(−ρ z_i)`, shifted by the minimum.
pub fn soft_min(values: &[f64], rho: f64) -> Result<f64> {
    Ok(soft_min_with_weights(values, rho)?.0)
}

/// Soft minimum and its weights `∂softmin/∂z_i = exp(−ρ z_i) / Σ exp(−ρ z_j)`.
pub fn soft_min_with_weights(values: &[f64], rho: f64) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(EmffError::Domain("soft minimum of an empty list".into()));
    }
    if !(rho > 0.0) {
        return Err(EmffError::Domain(format!("soft minimum needs rho > 0, got {rho}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(EmffError::Domain("soft minimum of non-finite values".into()));
    }
    let exps: Vec<f64> = values.iter().map(|z| (-rho * (z - min)).exp()).collect();
    let total: f64 = exps.iter().sum();
    let value = min - total.ln() / rho;
    Ok((value, exps.into_iter().map(|e| e / total).collect()))
}

/// Values of every soft-min argument, with optional gradients.
#[derive(Clone, Debug)]
pub struct BarrierArguments {
    /// `R_12,2 … R_(n-1)n,2, V_12,1 … V_(n-1)n,1, Q_1 … Q_n`.
    pub values: Vec<f64>,
    pub gradients: Option<Vec<DVector<f64>>>,
}

/// `h`, its Lie derivatives, and the soft-min bookkeeping that produced them.
#[derive(Clone, Debug)]
pub struct LieDerivatives {
    pub h: f64,
    pub l_phi_h: f64,
    /// `L_G h = a (∂h/∂ν)`, one `Vec3` per pair.
    pub l_g_h: ForceVector,
    /// Full gradient of `h` with respect to the flattened cascade state.
    pub gradient: DVector<f64>,
    pub arguments: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub mu_star: ForceVector,
    pub eta_star: f64,
    pub lambda: f64,
    pub omega: f64,
    pub h: f64,
    pub active: bool,
    pub mu_desired: ForceVector,
    pub nu_desired: ForceVector,
    pub l_phi_h: f64,
    pub l_g_h: ForceVector,
    /// Soft-min arguments in [`SafetyFilter::argument_names`] order.
    pub arguments: Vec<f64>,
}

/// Constraint `b = L_φh + L_Gh·μ + α h + η h`.
pub fn constraint_b(l_phi_h: f64, l_g_h: &ForceVector, h: f64, alpha_gain: f64, mu: &ForceVector, eta: f64) -> f64 {
    let dot: f64 = l_g_h.f.iter().zip(&mu.f).map(|(a, b)| a.dot(b)).sum();
    l_phi_h + dot + alpha_gain * h + eta * h
}

/// Closed-form minimizer of `½|μ − μ_d|² + ½γη²` subject to `b ≥ 0`.
///
/// Returns `(μ*, η*, λ, ω)` with `ω = b(μ_d, 0)`,
/// `λ = −ω / (|L_Gh|² + h²/γ)` when `ω < 0` and `0` otherwise,
/// `μ* = μ_d + λ L_Ghᵀ`, `η* = h λ / γ`.
pub fn optimal_control(
    l_phi_h: f64,
    l_g_h: &ForceVector,
    h: f64,
    mu_d: &ForceVector,
    cbf: &CbfConfig,
) -> Result<(ForceVector, f64, f64, f64)> {
    let omega = constraint_b(l_phi_h, l_g_h, h, cbf.alpha_gain, mu_d, 0.0);
    if omega >= 0.0 {
        return Ok((mu_d.clone(), 0.0, 0.0, omega));
    }
    // h / γ first so that h² / γ does not overflow or flush for γ = 1e40.
    let slack_term = h * (h / cbf.gamma_slack);
    let denominator = l_g_h.norm().powi(2) + slack_term;
    if !(denominator >= MIN_DENOMINATOR) {
        return Err(EmffError::Regularity { denominator });
    }
    let lambda = -omega / denominator;
    let mu = mu_d.add_scaled(lambda, l_g_h);
    let eta = (h / cbf.gamma_slack) * lambda;
    Ok((mu, eta, lambda, omega))
}

/// Physical, constraint and filter parameters needed to evaluate the
/// barriers and the filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyFilter {
    pub params: PhysicalParams,
    pub limits: ConstraintParams,
    pub cbf: CbfConfig,
    pub flow_derivative: FlowDerivative,
}

struct PairGeometry {
    r: Vec3,
    v: Vec3,
    dist: f64,
}

impl SafetyFilter {
    pub fn new(params: PhysicalParams, limits: ConstraintParams, cbf: CbfConfig) -> Self {
        Self { params, limits, cbf, flow_derivative: FlowDerivative::Exact }
    }

    /// Names of the soft-min arguments in evaluation order.
    pub fn argument_names(n: usize) -> Vec<String> {
        let pairs = PairIndex::new(n).expect("n >= 2");
        let mut names: Vec<String> = (0..pairs.len()).map(|k| format!("R{}_2", pairs.label(k))).collect();
        names.extend((0..pairs.len()).map(|k| format!("V{}_1", pairs.label(k))));
        names.extend((1..=n).map(|i| format!("Q{i}")));
        names
    }

    /// Cascade vector field `φ(x̂) + G μ`.
    pub fn cascade_rate(&self, c: &CascadeState, mu: &ForceVector) -> Result<(StateDerivative, ForceVector)> {
        let xdot = drift(&c.x, &c.nu, &self.params)?;
        let nudot = ForceVector {
            f: c.nu.f.iter().zip(&mu.f).map(|(nu, m)| (m - nu) * self.cbf.a).collect(),
        };
        Ok((xdot, nudot))
    }

    /// Values (and optionally gradients) of all soft-min arguments.
    pub fn arguments(&self, c: &CascadeState, with_gradients: bool) -> Result<BarrierArguments> {
        let x = &c.x;
        let n = x.n();
        let pairs = x.pairs();
        check_len(&pairs, &c.nu)?;
        let np = pairs.len();
        let dim = 6 * n + 3 * np;
        let kappa = self.params.kappa();
        let cbf = &self.cbf;
        let lim = &self.limits;

        let mut geo = Vec::with_capacity(np);
        let mut zeta = Vec::with_capacity(np);
        for (k, i, j) in pairs.iter() {
            let r = x.rel_pos(i, j);
            let dist = r.norm();
            if !(dist >= MIN_SEPARATION) {
                return Err(EmffError::Coincident { i: i + 1, j: j + 1, distance: dist });
            }
            zeta.push(c.nu.f[k] / dist.powi(4));
            geo.push(PairGeometry { r, v: x.rel_vel(i, j), dist });
        }
        let acc = accelerations_from_zeta(n, &ForceVector { f: zeta }, kappa);

        let ri = |i: usize| 3 * i;
        let vi = |i: usize| 3 * n + 3 * i;
        let ni = |k: usize| 6 * n + 3 * k;
        let add = |g: &mut DVector<f64>, at: usize, v: &Vec3| {
            for c in 0..3 {
                g[at + c] += v[c];
            }
        };
        // Gradient of wᵀ(a_i − a_j) through ζ, for a fixed vector w.
        let accel_term = |g: &mut DVector<f64>, w: &Vec3, i: usize, j: usize| {
            for (q, k, l) in pairs.iter() {
                let coef = pairs.incidence(i, q) - pairs.incidence(j, q);
                if coef == 0.0 {
                    continue;
                }
                let gq = geo[q].dist.powi(-4);
                add(g, ni(q), &(w * (kappa * coef * gq)));
                let dg_dr = geo[q].r * (-4.0 * geo[q].dist.powi(-6));
                let dr = dg_dr * (kappa * coef * w.dot(&c.nu.f[q]));
                add(g, ri(k), &dr);
                add(g, ri(l), &(-dr));
            }
        };

        let mut values = Vec::with_capacity(2 * np + n);
        let mut grads = with_gradients.then(|| Vec::with_capacity(2 * np + n));

        for (k, i, j) in pairs.iter() {
            let PairGeometry { r, v, .. } = geo[k];
            let da = acc[i] - acc[j];
            let big_r = 0.5 * (r.norm_squared() - lim.r_min * lim.r_min);
            let r1 = r.dot(&v) + cbf.k0 * big_r;
            values.push(v.norm_squared() + r.dot(&da) + cbf.k0 * r.dot(&v) + cbf.k1 * r1);
            if let Some(gs) = grads.as_mut() {
                let mut g = DVector::zeros(dim);
                let dr = da + v * (cbf.k0 + cbf.k1) + r * (cbf.k1 * cbf.k0);
                let dv = v * 2.0 + r * (cbf.k0 + cbf.k1);
                add(&mut g, ri(i), &dr);
                add(&mut g, ri(j), &(-dr));
                add(&mut g, vi(i), &dv);
                add(&mut g, vi(j), &(-dv));
                accel_term(&mut g, &r, i, j);
                gs.push(g);
            }
        }

        for (k, i, j) in pairs.iter() {
            let v = geo[k].v;
            let da = acc[i] - acc[j];
            values.push(-v.dot(&da) + cbf.kv * 0.5 * (lim.v_max * lim.v_max - v.norm_squared()));
            if let Some(gs) = grads.as_mut() {
                let mut g = DVector::zeros(dim);
                let dv = -da - v * cbf.kv;
                add(&mut g, vi(i), &dv);
                add(&mut g, vi(j), &(-dv));
                accel_term(&mut g, &(-v), i, j);
                gs.push(g);
            }
        }

        let scale = self.params.power_scale();
        let psis = pairs
            .iter()
            .map(|(k, _, _)| psi_with_gradient(&geo[k].r, &c.nu.f[k], lim.eps1, lim.eps2))
            .collect::<Result<Vec<_>>>()?;
        for s in 0..n {
            let mut q = lim.q_max;
            let mut g = grads.as_ref().map(|_| DVector::zeros(dim));
            for (k, i, j) in pairs.iter().filter(|&(_, i, j)| i == s || j == s) {
                let z = self.params.impedance(k);
                let (psi, dr, df) = psis[k];
                q -= scale * z * psi;
                if let Some(g) = g.as_mut() {
                    add(g, ri(i), &(dr * (-scale * z)));
                    add(g, ri(j), &(dr * (scale * z)));
                    add(g, ni(k), &(df * (-scale * z)));
                }
            }
            values.push(q);
            if let (Some(gs), Some(g)) = (grads.as_mut(), g) {
                gs.push(g);
            }
        }

        Ok(BarrierArguments { values, gradients: grads })
    }

    /// `h(x, ν)`.
    pub fn composite_h(&self, c: &CascadeState) -> Result<f64> {
        let args = self.arguments(c, false)?;
        soft_min(&args.values, self.cbf.rho)
    }

    /// `L_φ h = ∇h · φ(x̂)` and `L_G h = a ∂h/∂ν`.
    pub fn lie_derivatives(&self, c: &CascadeState) -> Result<LieDerivatives> {
        let args = self.arguments(c, true)?;
        let (h, weights) = soft_min_with_weights(&args.values, self.cbf.rho)?;
        let grads = args.gradients.expect("requested");
        let dim = c.dim();
        let mut gradient = DVector::zeros(dim);
        for (w, g) in weights.iter().zip(&grads) {
            gradient.axpy(*w, g, 1.0);
        }

        let zero_mu = ForceVector::zeros(c.nu.len());
        let (xdot, nudot) = self.cascade_rate(c, &zero_mu)?;
        let mut phi = xdot.to_vector().as_slice().to_vec();
        phi.extend(nudot.to_vector().iter());
        let l_phi_h = gradient.dot(&DVector::from_vec(phi));

        let n6 = 6 * c.x.n();
        let l_g_h = ForceVector::from_slice((gradient.rows(n6, dim - n6) * self.cbf.a).as_slice())?;
        Ok(LieDerivatives { h, l_phi_h, l_g_h, gradient, arguments: args.values, weights })
    }

    /// `μ_d = ν + (σ/a)(ν_d − ν) + (1/a) ν_d′(x)[A x + B ζ(x, ν)]`, also
    /// returning `ν_d`.
    pub fn mu_desired(&self, c: &CascadeState, policy: &MpcPolicy) -> Result<(ForceVector, ForceVector)> {
        let nu_d = policy.nu_desired(&c.x)?;
        let xdot = drift(&c.x, &c.nu, &self.params)?;
        let dnu = match self.flow_derivative {
            FlowDerivative::Exact => policy.nu_desired_derivative(&c.x, &xdot)?,
            FlowDerivative::ForwardDifference(delta) => policy.nu_desired_flow_derivative(&c.x, &xdot, delta)?,
        };
        let a = self.cbf.a;
        let s = self.cbf.sigma / a;
        let mu = ForceVector {
            f: c
                .nu
                .f
                .iter()
                .zip(&nu_d.f)
                .zip(&dnu.f)
                .map(|((nu, nd), d)| nu + (nd - nu) * s + d / a)
                .collect(),
        };
        Ok((mu, nu_d))
    }

    /// Optimal safe surrogate control `μ*` for the cascade state.
    pub fn filter(&self, c: &CascadeState, policy: &MpcPolicy) -> Result<FilterOutput> {
        let (mu_d, nu_d) = self.mu_desired(c, policy)?;
        self.filter_with_desired(c, mu_d, nu_d)
    }

    /// The filter for a given `μ_d`.
    pub fn filter_with_desired(&self, c: &CascadeState, mu_d: ForceVector, nu_d: ForceVector) -> Result<FilterOutput> {
        let lie = self.lie_derivatives(c)?;
        let (mu_star, eta_star, lambda, omega) = optimal_control(lie.l_phi_h, &lie.l_g_h, lie.h, &mu_d, &self.cbf)?;
        Ok(FilterOutput {
            mu_star,
            eta_star,
            lambda,
            omega,
            h: lie.h,
            active: omega < 0.0,
            mu_desired: mu_d,
            nu_desired: nu_d,
            l_phi_h: lie.l_phi_h,
            l_g_h: lie.l_g_h,
            arguments: lie.arguments,
        })
    }
}
