//! Finite-horizon linear-quadratic planner for the desired force function.
//!
//! The averaged model is linear in `zeta`, and the cost has no inequality
//! constraints, so the discretized problem
//!
//! ```text
//! min  Δ Σ_{k=0}^{N-1} [ ℓ(x_{k+1}) + ζ_kᵀ W_ζ ζ_k ]
//! s.t. x_{k+1} = A_d x_k + B_d ζ_k
//! ```
//!
//! is solved exactly by a backward Riccati recursion with an affine term.
//! The stage cost `ℓ` sums, over ordered pairs, `(r_ij − d_ij)ᵀ W_ij (r_ij − d_ij)`
//! and `v_ijᵀ W_v v_ij`. The recursion depends only on the configuration, so
//! [`MpcPolicy::new`] factors it once and every solve afterwards is an affine
//! map of the state.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{EmffError, Result};
use crate::model::{check_len, system_matrices, ForceVector, FormationState, PairIndex, PhysicalParams, StateDerivative, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction horizon `T_f`, s.
    pub horizon: f64,
    /// Discretization step `Δ`, s.
    pub step: f64,
    /// `W_ij` per unordered pair (used for both orderings).
    pub position_weights: Vec<Matrix3<f64>>,
    /// Relative-velocity weight applied to every pair.
    pub velocity_weight: Matrix3<f64>,
    /// `W_ζ`, `3P × 3P`.
    pub input_weight: DMatrix<f64>,
    /// Desired relative positions `d_ij`, `i < j`, in pair order.
    pub desired: Vec<Vec3>,
}

impl MpcConfig {
    /// Identity position and velocity weights and `W_ζ = input_weight · I`.
    pub fn uniform(horizon: f64, step: f64, input_weight: f64, desired: Vec<Vec3>) -> Self {
        let pairs = desired.len();
        Self {
            horizon,
            step,
            position_weights: vec![Matrix3::identity(); pairs],
            velocity_weight: Matrix3::identity(),
            input_weight: DMatrix::identity(3 * pairs, 3 * pairs) * input_weight,
            desired,
        }
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.horizon > 0.0 && self.step > 0.0) {
            return Err(EmffError::Config("MPC horizon and step must be positive".into()));
        }
        let n = (self.horizon / self.step).round();
        if n < 1.0 || (n * self.step - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(EmffError::Config(format!(
                "MPC step {} does not divide horizon {}",
                self.step, self.horizon
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let pairs = PairIndex::new(n)?;
        self.steps()?;
        if self.desired.len() != pairs.len() || self.position_weights.len() != pairs.len() {
            return Err(EmffError::Config(format!(
                "MPC needs {} desired offsets and position weights",
                pairs.len()
            )));
        }
        let dim = 3 * pairs.len();
        if self.input_weight.shape() != (dim, dim) {
            return Err(EmffError::Config(format!("input weight must be {dim}x{dim}")));
        }
        let pd3 = |w: &Matrix3<f64>| {
            let s = (w + w.transpose()) * 0.5;
            (s - w).norm() <= 1e-12 * w.norm() && s.cholesky().is_some()
        };
        if !self.position_weights.iter().all(pd3) || !pd3(&self.velocity_weight) {
            return Err(EmffError::Config("position and velocity weights must be symmetric positive definite".into()));
        }
        let wz = &self.input_weight;
        if (wz - wz.transpose()).norm() > 1e-12 * wz.norm() || wz.clone().cholesky().is_none() {
            return Err(EmffError::Config("input weight must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// First-interval optimal `zeta`.
    pub zeta_d: ForceVector,
    /// Predicted states `x_0, ..., x_N` when requested.
    pub trajectory: Option<Vec<FormationState>>,
}

/// The solved recursion: `ζ_k = −K_k x_k + k_k`.
#[derive(Clone, Debug)]
pub struct MpcPolicy {
    n: usize,
    cfg: MpcConfig,
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
    gains: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
}

impl MpcPolicy {
    pub fn new(n: usize, cfg: &MpcConfig, params: &PhysicalParams) -> Result<Self> {
        cfg.validate(n)?;
        let pairs = PairIndex::new(n)?;
        let steps = cfg.steps()?;
        let dt = cfg.step;
        let (a, b) = system_matrices(n, params)?;
        let dim = 6 * n;

        // A is nilpotent (A² = 0): exp(AΔ) = I + AΔ, ∫₀^Δ exp(Aτ) dτ B = (Δ I + Δ²/2 A) B.
        let eye = DMatrix::<f64>::identity(dim, dim);
        let ad = &eye + &a * dt;
        let bd = (&eye * dt + &a * (0.5 * dt * dt)) * &b;

        // Stage cost ℓ(x) = xᵀQx − 2qᵀx + const, both orderings of each pair.
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        let mut lin = DVector::<f64>::zeros(dim);
        for (k, i, j) in pairs.iter() {
            let w = (cfg.position_weights[k] + cfg.position_weights[k].transpose()) * 0.5;
            let wv = (cfg.velocity_weight + cfg.velocity_weight.transpose()) * 0.5;
            let wd = w * cfg.desired[k];
            for (offset, wm) in [(0, w), (3 * n, wv)] {
                let (ri, rj) = (offset + 3 * i, offset + 3 * j);
                for c in 0..3 {
                    for e in 0..3 {
                        let v = 2.0 * wm[(c, e)];
                        q[(ri + c, ri + e)] += v;
                        q[(rj + c, rj + e)] += v;
                        q[(ri + c, rj + e)] -= v;
                        q[(rj + c, ri + e)] -= v;
                    }
                }
            }
            for c in 0..3 {
                lin[3 * i + c] += 2.0 * wd[c];
                lin[3 * j + c] -= 2.0 * wd[c];
            }
        }
        let r_in = (&cfg.input_weight + cfg.input_weight.transpose()) * (0.5 * dt);

        let mut p = DMatrix::<f64>::zeros(dim, dim);
        let mut s = DVector::<f64>::zeros(dim);
        let mut gains = Vec::with_capacity(steps);
        let mut offsets = Vec::with_capacity(steps);
        let bdt = bd.transpose();
        let adt = ad.transpose();
        for _ in 0..steps {
            let m = &q * dt + &p;
            let mv = &lin * dt + &s;
            let mb = &m * &bd;
            let h = &bdt * &mb + &r_in;
            let chol = h
                .cholesky()
                .ok_or_else(|| EmffError::Internal("MPC normal equations are not positive definite".into()))?;
            let gain = chol.solve(&(mb.transpose() * &ad));
            let offset = chol.solve(&(&bdt * &mv));
            let next_p = &adt * &m * &ad - &adt * &mb * &gain;
            s = &adt * (&mv - &mb * &offset);
            p = (&next_p + next_p.transpose()) * 0.5;
            gains.push(gain);
            offsets.push(offset);
        }
        gains.reverse();
        offsets.reverse();
        Ok(Self { n, cfg: cfg.clone(), ad, bd, gains, offsets })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    fn check(&self, state: &FormationState) -> Result<()> {
        if state.n() != self.n {
            return Err(EmffError::Domain(format!(
                "policy built for {} satellites, state has {}",
                self.n,
                state.n()
            )));
        }
        Ok(())
    }

    fn first_control(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.offsets[0] - &self.gains[0] * x
    }

    /// First-interval minimizer, optionally with the predicted trajectory.
    pub fn plan(&self, state: &FormationState, with_trajectory: bool) -> Result<MpcSolution> {
        self.check(state)?;
        let x0 = state.to_vector();
        let zeta_d = ForceVector::from_slice(self.first_control(&x0).as_slice())?;
        let trajectory = if with_trajectory {
            let (states, _) = self.rollout(&x0);
            Some(
                states
                    .iter()
                    .map(|x| FormationState::from_slice(self.n, x.as_slice()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(MpcSolution { zeta_d, trajectory })
    }

    /// Optimal states `x_0..x_N` and controls `ζ_0..ζ_{N-1}` from `x0`.
    pub fn rollout(&self, x0: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut xs = vec![x0.clone()];
        let mut us = Vec::with_capacity(self.gains.len());
        for (gain, offset) in self.gains.iter().zip(&self.offsets) {
            let x = xs.last().expect("nonempty");
            let u = offset - gain * x;
            xs.push(&self.ad * x + &self.bd * &u);
            us.push(u);
        }
        (xs, us)
    }

    /// Discretized cost of an arbitrary control sequence from `state`.
    pub fn cost(&self, state: &FormationState, controls: &[DVector<f64>]) -> Result<f64> {
        self.check(state)?;
        if controls.len() != self.gains.len() {
            return Err(EmffError::Domain(format!("{} controls for {} steps", controls.len(), self.gains.len())));
        }
        let dt = self.cfg.step;
        let mut x = state.to_vector();
        let mut total = 0.0;
        for u in controls {
            x = &self.ad * &x + &self.bd * u;
            let st = FormationState::from_slice(self.n, x.as_slice())?;
            total += dt * (stage_cost(&st, &self.cfg) + u.dot(&(&self.cfg.input_weight * u)));
        }
        Ok(total)
    }

    /// Discretized dynamics `(A_d, B_d)`.
    pub fn discrete_dynamics(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.ad, &self.bd)
    }

    /// `ν_d = |r_ij|⁴ ζ_d` per pair.
    pub fn nu_desired(&self, state: &FormationState) -> Result<ForceVector> {
        let zeta_d = self.plan(state, false)?.zeta_d;
        unscale(state, &zeta_d)
    }

    /// Exact directional derivative `ν_d′(x) ẋ` of the affine-in-`x` policy.
    pub fn nu_desired_derivative(&self, state: &FormationState, state_dot: &StateDerivative) -> Result<ForceVector> {
        self.check(state)?;
        let x = state.to_vector();
        let zeta_d = self.first_control(&x);
        let dzeta = -(&self.gains[0] * state_dot.to_vector());
        let pairs = state.pairs();
        let mut out = Vec::with_capacity(pairs.len());
        for (k, i, j) in pairs.iter() {
            let r = state.rel_pos(i, j);
            let rdot = state_dot.r[i] - state_dot.r[j];
            let d2 = r.norm_squared();
            let z = Vec3::new(zeta_d[3 * k], zeta_d[3 * k + 1], zeta_d[3 * k + 2]);
            let dz = Vec3::new(dzeta[3 * k], dzeta[3 * k + 1], dzeta[3 * k + 2]);
            out.push(z * (4.0 * d2 * r.dot(&rdot)) + dz * (d2 * d2));
        }
        Ok(ForceVector { f: out })
    }

    /// Forward difference `(ν_d(x + δẋ) − ν_d(x)) / δ`; δ is halved (up to
    /// 20 times) while the perturbed state violates the separation guard.
    pub fn nu_desired_flow_derivative(
        &self,
        state: &FormationState,
        state_dot: &StateDerivative,
        delta: f64,
    ) -> Result<ForceVector> {
        if !(delta > 0.0) {
            return Err(EmffError::Domain(format!("flow derivative step must be positive, got {delta}")));
        }
        let base = self.nu_desired(state)?;
        let mut d = delta;
        for _ in 0..=20 {
            let moved = state.add_scaled(d, state_dot);
            match self.nu_desired(&moved) {
                Ok(next) => return Ok(next.add_scaled(-1.0, &base).scale(1.0 / d)),
                Err(EmffError::Coincident { .. }) => d *= 0.5,
                Err(e) => return Err(e),
            }
        }
        Err(EmffError::Domain("flow derivative: no admissible perturbation".into()))
    }
}

/// `ℓ(x)` summed over ordered pairs.
pub fn stage_cost(state: &FormationState, cfg: &MpcConfig) -> f64 {
    let mut total = 0.0;
    for (k, i, j) in state.pairs().iter() {
        let e = state.rel_pos(i, j) - cfg.desired[k];
        let v = state.rel_vel(i, j);
        total += 2.0 * (e.dot(&(cfg.position_weights[k] * e)) + v.dot(&(cfg.velocity_weight * v)));
    }
    total
}

/// `(γ(x) ⊗ I3)⁻¹ ζ`: per-pair multiplication by `|r_ij|⁴`.
pub fn unscale(state: &FormationState, zeta: &ForceVector) -> Result<ForceVector> {
    check_len(&state.pairs(), zeta)?;
    state.check_separation()?;
    Ok(ForceVector {
        f: state
            .pairs()
            .iter()
            .map(|(k, i, j)| zeta.f[k] * state.rel_pos(i, j).norm().powi(4))
            .collect(),
    })
}

/// One-shot solve; prefer [`MpcPolicy`] for repeated use.
pub fn plan_zeta(state: &FormationState, cfg: &MpcConfig, params: &PhysicalParams) -> Result<MpcSolution> {
    MpcPolicy::new(state.n(), cfg, params)?.plan(state, true)
}

pub fn nu_desired(state: &FormationState, cfg: &MpcConfig, params: &PhysicalParams) -> Result<ForceVector> {
    MpcPolicy::new(state.n(), cfg, params)?.nu_desired(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{zeta, RationalFrequency};
    use approx::assert_relative_eq;

    fn params(n: usize) -> PhysicalParams {
        let pairs = n * (n - 1) / 2;
        PhysicalParams {
            mass: 15.0,
            mu0: 4e-7 * std::f64::consts::PI,
            coil_turns: 400.0,
            coil_area: 0.1963,
            coil_resistance: 0.3673,
            coil_inductance: 0.12,
            omega: (1..=pairs as i64).map(|k| RationalFrequency::pi_multiple(200 * k, 1)).collect(),
        }
    }

    fn cfg3() -> MpcConfig {
        let kappa = params(3).kappa();
        MpcConfig::uniform(
            10.0,
            0.1,
            1e4 * kappa * kappa,
            vec![Vec3::new(1.1, 1.3, 0.5), Vec3::new(2.2, 2.6, 1.0), Vec3::new(1.1, 1.3, 0.5)],
        )
    }

    fn at_formation() -> FormationState {
        FormationState::at_rest(vec![Vec3::new(2.2, 2.6, 1.0), Vec3::new(1.1, 1.3, 0.5), Vec3::zeros()]).unwrap()
    }

    #[test]
    fn at_formation_plans_zero() {
        let sol = plan_zeta(&at_formation(), &cfg3(), &params(3)).unwrap();
        // Compare the implied acceleration, kappa * zeta, against 1e-9.
        let kappa = params(3).kappa();
        assert!(sol.zeta_d.norm() * kappa <= 1e-9, "{}", sol.zeta_d.norm() * kappa);
        assert_eq!(sol.trajectory.as_ref().unwrap().len(), 101);
    }

    #[test]
    fn nu_desired_unscales() {
        let st = FormationState::at_rest(vec![Vec3::new(2.0, 0.0, 0.0), Vec3::zeros()]).unwrap();
        let nu = unscale(&st, &ForceVector { f: vec![Vec3::new(1.0, 0.0, 0.0)] }).unwrap();
        assert_eq!(nu.f[0], Vec3::new(16.0, 0.0, 0.0));
        assert_eq!(unscale(&st, &ForceVector::zeros(1)).unwrap(), ForceVector::zeros(1));
    }

    #[test]
    fn nu_desired_round_trip() {
        let p = params(3);
        let policy = MpcPolicy::new(3, &cfg3(), &p).unwrap();
        let st = FormationState::new(
            vec![Vec3::new(1.2, 6.4, 8.5), Vec3::new(2.5, 7.5, 9.0), Vec3::new(3.8, 8.6, 9.5)],
            vec![Vec3::new(0.01, 0.0, -0.02), Vec3::zeros(), Vec3::new(0.0, 0.03, 0.0)],
        )
        .unwrap();
        let zd = policy.plan(&st, false).unwrap().zeta_d;
        let back = zeta(&st, &policy.nu_desired(&st).unwrap()).unwrap();
        for k in 0..3 {
            assert!((back.f[k] - zd.f[k]).norm() <= 1e-12 * zd.f[k].norm());
        }
    }

    #[test]
    fn flow_derivative_zero_cases() {
        let p = params(3);
        let policy = MpcPolicy::new(3, &cfg3(), &p).unwrap();
        let st = at_formation();
        let still = FormationState::at_rest(vec![Vec3::zeros(); 3]).unwrap();
        assert!(policy.nu_desired_derivative(&st, &still).unwrap().norm() == 0.0);
        let fd = policy.nu_desired_flow_derivative(&st, &still, 1e-3).unwrap();
        assert!(fd.norm() == 0.0);
    }

    #[test]
    fn flow_derivative_is_first_order_consistent() {
        let p = params(2);
        let cfg = MpcConfig::uniform(10.0, 0.1, 1e4 * p.kappa().powi(2), vec![Vec3::new(2.0, 0.0, 0.0)]);
        let policy = MpcPolicy::new(2, &cfg, &p).unwrap();
        let st = FormationState::new(
            vec![Vec3::new(0.5, 1.0, 0.0), Vec3::zeros()],
            vec![Vec3::new(0.02, -0.01, 0.0), Vec3::zeros()],
        )
        .unwrap();
        let nu = policy.nu_desired(&st).unwrap();
        let xdot = crate::model::drift(&st, &nu, &p).unwrap();
        let exact = policy.nu_desired_derivative(&st, &xdot).unwrap();
        let errs: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&d| policy.nu_desired_flow_derivative(&st, &xdot, d).unwrap().add_scaled(-1.0, &exact).norm())
            .collect();
        // Forward differences: halving δ halves the error.
        assert_relative_eq!(errs[0] / errs[1], 2.0, max_relative = 0.05);
        assert_relative_eq!(errs[1] / errs[2], 2.0, max_relative = 0.05);
        let fine = policy.nu_desired_flow_derivative(&st, &xdot, 1e-7).unwrap();
        assert!(fine.add_scaled(-1.0, &exact).norm() <= 1e-5 * exact.norm());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg3();
        c.step = 0.3;
        assert!(c.validate(3).is_err());
        let mut c = cfg3();
        c.velocity_weight = -Matrix3::identity();
        assert!(c.validate(3).is_err());
        let mut c = cfg3();
        c.desired.pop();
        assert!(c.validate(3).is_err());
    }
}
