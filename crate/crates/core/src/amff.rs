//! Piecewise-sinusoidal magnetic moments and the full-fidelity dynamics.
//!
//! Satellite `i` drives `u_i(t) = Σ_{j≠i} p_ij sin(ω_ij t)`. Only sinusoids
//! sharing a frequency produce a nonzero mean force over the common period,
//! so the average of `f(r, u_i, u_j)` is `½ f(r, p_ij, p_ji)`.

use serde::{Deserialize, Serialize};

use crate::error::{EmffError, Result};
use crate::model::{dipole_force_f, FormationState, PairIndex, PhysicalParams, Vec3, MIN_SEPARATION};

/// Sinusoid amplitudes `p_ij` for every ordered pair `i ≠ j`, A·m².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSet {
    n: usize,
    p: Vec<Vec3>,
}

impl AmplitudeSet {
    pub fn zeros(n: usize) -> Self {
        Self { n, p: vec![Vec3::zeros(); n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Amplitude used by satellite `i` at the frequency shared with `j`.
    pub fn get(&self, i: usize, j: usize) -> Vec3 {
        assert!(i != j, "no self-pair amplitude");
        self.p[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: Vec3) {
        assert!(i != j, "no self-pair amplitude");
        self.p[i * self.n + j] = value;
    }

    /// Apparent power proxy `(1/(N²A²)) Σ_{j≠i} Z_ij |p_ij|²` of satellite `i`.
    pub fn apparent_power(&self, i: usize, params: &PhysicalParams) -> f64 {
        let pairs = PairIndex::new(self.n).expect("n >= 2");
        let sum: f64 = (0..self.n)
            .filter(|&j| j != i)
            .map(|j| {
                let k = pairs.index(i, j).expect("valid pair");
                params.impedance(k) * self.get(i, j).norm_squared()
            })
            .sum();
        params.power_scale() * sum
    }
}

/// Magnetic moment `u_i(t) = Σ_{j≠i} p_ij sin(ω_ij t)` of satellite `i`.
pub fn moment_at(i: usize, amps: &AmplitudeSet, t: f64, params: &PhysicalParams) -> Vec3 {
    let pairs = PairIndex::new(amps.n()).expect("n >= 2");
    (0..amps.n()).filter(|&j| j != i).fold(Vec3::zeros(), |acc, j| {
        let k = pairs.index(i, j).expect("valid pair");
        acc + amps.get(i, j) * (params.omega(k) * t).sin()
    })
}

pub fn moments_at(amps: &AmplitudeSet, t: f64, params: &PhysicalParams) -> Vec<Vec3> {
    (0..amps.n()).map(|i| moment_at(i, amps, t, params)).collect()
}

/// Instantaneous accelerations `v_i' = (c0/m) Σ_{j≠i} |r_ij|⁻⁴ f(r_ij, u_i, u_j)`.
pub fn full_accelerations(state: &FormationState, moments: &[Vec3], params: &PhysicalParams) -> Result<Vec<Vec3>> {
    let n = state.n();
    if moments.len() != n {
        return Err(EmffError::Domain(format!("{} moments for {} satellites", moments.len(), n)));
    }
    let gain = params.c0() / params.mass;
    let mut acc = vec![Vec3::zeros(); n];
    for (_, i, j) in state.pairs().iter() {
        let r = state.rel_pos(i, j);
        let d = r.norm();
        if !(d >= MIN_SEPARATION) {
            return Err(EmffError::Coincident { i: i + 1, j: j + 1, distance: d });
        }
        let f = dipole_force_f(&r, &moments[i], &moments[j])? * (gain / d.powi(4));
        acc[i] += f;
        acc[j] -= f;
    }
    Ok(acc)
}

/// `(1/T) ∫₀ᵀ f(r, u_i(t), u_j(t)) dt` by the composite trapezoid rule with
/// `steps` intervals over the common period, holding `r` fixed.
///
/// For a periodic integrand the trapezoid rule reduces to the mean of
/// `steps` equally spaced samples and is exact for trigonometric
/// polynomials of degree below `steps`.
pub fn averaged_force_oracle(
    r: &Vec3,
    amps: &AmplitudeSet,
    pair: (usize, usize),
    params: &PhysicalParams,
    steps: usize,
) -> Result<Vec3> {
    let (i, j) = pair;
    if i == j || i >= amps.n() || j >= amps.n() {
        return Err(EmffError::Domain(format!("invalid pair ({}, {})", i + 1, j + 1)));
    }
    if steps == 0 {
        return Err(EmffError::Domain("quadrature needs at least one step".into()));
    }
    let period = params.common_period()?;
    let h = period / steps as f64;
    let mut sum = Vec3::zeros();
    for k in 0..steps {
        let t = k as f64 * h;
        let ui = moment_at(i, amps, t, params);
        let uj = moment_at(j, amps, t, params);
        sum += dipole_force_f(r, &ui, &uj)?;
    }
    Ok(sum / steps as f64)
}

/// Smallest quadrature size giving at least `samples_per_period` samples of
/// the fastest sinusoid over the common period.
pub fn quadrature_steps(params: &PhysicalParams, samples_per_period: usize) -> Result<usize> {
    let period = params.common_period()?;
    let fastest = params.omega.iter().map(|w| w.rad_per_s()).fold(0.0, f64::max);
    let cycles = (period * fastest / (2.0 * std::f64::consts::PI)).round().max(1.0);
    Ok(cycles as usize * samples_per_period)
}
