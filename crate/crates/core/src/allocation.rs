//! Closed-form amplitude pair realizing a prescribed force-function value,
//! and the smooth upper bound `psi` on the squared amplitude magnitude.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::amff::AmplitudeSet;
use crate::error::{EmffError, Result};
use crate::model::{check_len, ForceVector, FormationState, Vec3, MIN_SEPARATION};

/// Below this `|r × f| / (|r| |f|)` the rotation's second and third rows are
/// replaced by an orthonormal completion of `r/|r|`.
const PARALLEL_TOL: f64 = 1e-12;

/// The amplitude pair `(c1, c2)` with `f(r, c1, c2) = f_*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub c1: Vec3,
    pub c2: Vec3,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unit vector orthogonal to `e`, from Gram–Schmidt against the coordinate
/// axis least aligned with `e`.
fn orthogonal_unit(e: &Vec3) -> Vec3 {
    let k = e.iamin();
    let mut axis = Vec3::zeros();
    axis[k] = 1.0;
    (axis - e * e.dot(&axis)).normalize()
}

/// Amplitude pair `(c1, c2)` such that `dipole_force_f(r, c1, c2) = f_star`.
///
/// `c1 = Rᵀ (a_x, a_y, 0)` and `c2 = Rᵀ (b_x, b_y, 0)` where the rows of
/// `R` are `r̂`, the unit component of `f_star` orthogonal to `r`, and
/// `r̂ × f̂_star` normalized. The auxiliary terms
///
/// ```text
/// Φ1 = sqrt(2|r|²|f|² − (rᵀf)²)
/// Φ2 = sqrt(|r|²|f|² − (rᵀf)²)        = |r × f|
/// Φ3 = sqrt(2(2 − sgn(rᵀf)²)²|r|²|f|² − (rᵀf)²)
/// ```
///
/// are evaluated through `|r × f|` so that no difference of nearly equal
/// squares is formed.
pub fn amplitude_pair(r: &Vec3, f_star: &Vec3) -> Result<AllocationResult> {
    let rn = r.norm();
    if !(rn >= MIN_SEPARATION) {
        return Err(EmffError::Domain(format!("amplitude pair at separation {rn:e}")));
    }
    let fnorm = f_star.norm();
    if fnorm == 0.0 {
        return Ok(AllocationResult { c1: Vec3::zeros(), c2: Vec3::zeros() });
    }

    let u = r.dot(f_star);
    let abs_u = u.abs();
    let s = sgn(u);
    let cross = r.cross(f_star);
    let phi2 = cross.norm();
    let rf = rn * fnorm;
    let phi1 = (rf * rf + phi2 * phi2).sqrt();
    let phi3 = if s == 0.0 { 8f64.sqrt() * rf } else { phi1 };

    // Φ1 − |u| and Φ3 − |u| without cancellation; Φ1² − u² = 2Φ2².
    let phi1_minus_u = 2.0 * phi2 * phi2 / (phi1 + abs_u);
    let phi3_minus_u = if s == 0.0 { phi3 } else { phi1_minus_u };

    let sgn_phi2 = sgn(phi2);
    let a_x = -0.5 * s * ((abs_u + phi1) / rn).sqrt();
    let a_y = sgn_phi2 * FRAC_1_SQRT_2 * (phi3_minus_u / rn).sqrt();
    let b_x = 0.5 * ((abs_u + phi3) / rn).sqrt();
    let b_y = -sgn(u * phi2) * FRAC_1_SQRT_2 * (phi1_minus_u / rn).sqrt();

    let e1 = r / rn;
    let e3 = if phi2 < PARALLEL_TOL * rf { e1.cross(&orthogonal_unit(&e1)) } else { cross / phi2 };
    let e2 = e3.cross(&e1);

    Ok(AllocationResult { c1: e1 * a_x + e2 * a_y, c2: e1 * b_x + e2 * b_y })
}

/// Amplitudes for every ordered pair: for `i < j`,
/// `(p_ij, p_ji) = amplitude_pair(r_i − r_j, nu_ij)`.
pub fn allocate_all(state: &FormationState, nu: &ForceVector) -> Result<AmplitudeSet> {
    let pairs = state.pairs();
    check_len(&pairs, nu)?;
    let mut amps = AmplitudeSet::zeros(state.n());
    for (k, i, j) in pairs.iter() {
        let r = state.rel_pos(i, j);
        if !(r.norm() >= MIN_SEPARATION) {
            return Err(EmffError::Coincident { i: i + 1, j: j + 1, distance: r.norm() });
        }
        let c = amplitude_pair(&r, &nu.f[k])?;
        amps.set(i, j, c.c1);
        amps.set(j, i, c.c2);
    }
    Ok(amps)
}

/// Smooth bound on `|c1(r, f)|²`:
///
/// `psi = −¼ s tanh(s/ε1) + sqrt(2|r|²|f|² − (rᵀf)² + ε2|r|²)/|r|`, `s = rᵀf/|r|`.
pub fn psi(r: &Vec3, f_star: &Vec3, eps1: f64, eps2: f64) -> Result<f64> {
    Ok(psi_with_gradient(r, f_star, eps1, eps2)?.0)
}

/// `psi` together with its gradients with respect to `r` and `f_star`.
pub fn psi_with_gradient(r: &Vec3, f_star: &Vec3, eps1: f64, eps2: f64) -> Result<(f64, Vec3, Vec3)> {
    let rn = r.norm();
    if !(rn >= MIN_SEPARATION) {
        return Err(EmffError::Domain(format!("psi at separation {rn:e}")));
    }
    if !(eps1 > 0.0 && eps2 > 0.0) {
        return Err(EmffError::Domain("psi needs eps1 > 0 and eps2 > 0".into()));
    }
    let s = r.dot(f_star) / rn;
    let rh = r / rn;
    // 2|f|² − s² = |f|² + |r̂ × f|², nonnegative term by term.
    let radicand = f_star.norm_squared() + rh.cross(f_star).norm_squared() + eps2;
    let root = radicand.sqrt();
    let th = (s / eps1).tanh();
    let value = -0.25 * s * th + root;

    let dpsi_ds = -0.25 * (th + (s / eps1) * (1.0 - th * th)) - s / root;
    let ds_dr = (f_star - rh * s) / rn;
    let ds_df = rh;
    let grad_r = ds_dr * dpsi_ds;
    let grad_f = ds_df * dpsi_ds + f_star * (2.0 / root);
    Ok((value, grad_r, grad_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dipole_force_f;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec3(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
        (lo..hi, lo..hi, lo..hi).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn residual(r: &Vec3, f: &Vec3) -> f64 {
        let c = amplitude_pair(r, f).unwrap();
        (dipole_force_f(r, &c.c1, &c.c2).unwrap() - f).norm() / (1.0 + f.norm())
    }

    #[test]
    fn zero_force_gives_zero_amplitudes() {
        let c = amplitude_pair(&Vec3::new(1.0, 2.0, 3.0), &Vec3::zeros()).unwrap();
        assert_eq!(c.c1, Vec3::zeros());
        assert_eq!(c.c2, Vec3::zeros());
    }

    #[test]
    fn orthogonal_case_by_hand() {
        let r = Vec3::new(2.0, 0.0, 0.0);
        let f = Vec3::new(0.0, 1.0, 0.0);
        let c = amplitude_pair(&r, &f).unwrap();
        assert_relative_eq!(c.c1, Vec3::new(0.0, 2f64.powf(0.25), 0.0), epsilon = 1e-15);
        assert_relative_eq!(c.c2, Vec3::new(2f64.powf(-0.25), 0.0, 0.0), epsilon = 1e-15);
        assert!(residual(&r, &f) < 1e-15);
    }

    #[test]
    fn parallel_case_by_hand() {
        let r = Vec3::new(1.0, 0.0, 0.0);
        let f = Vec3::new(2.0, 0.0, 0.0);
        let c = amplitude_pair(&r, &f).unwrap();
        assert_relative_eq!(c.c1, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(c.c2, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert!(residual(&r, &f) < 1e-15);
        assert!(residual(&r, &(-f)) < 1e-15);
    }

    #[test]
    fn rejects_zero_separation() {
        assert!(amplitude_pair(&Vec3::zeros(), &Vec3::x()).is_err());
        assert!(psi(&Vec3::zeros(), &Vec3::x(), 1e-3, 1e-3).is_err());
    }

    #[test]
    fn psi_examples() {
        assert_relative_eq!(psi(&Vec3::x(), &Vec3::zeros(), 1e-3, 1e-3).unwrap(), 1e-3f64.sqrt(), epsilon = 1e-15);
        let orth = psi(&Vec3::new(2.0, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0), 1e-3, 1e-3).unwrap();
        assert_relative_eq!(orth, 2.001f64.sqrt(), epsilon = 1e-14);
        assert!(orth > 2f64.sqrt());
        let par = psi(&Vec3::x(), &Vec3::new(2.0, 0.0, 0.0), 1e-3, 1e-3).unwrap();
        assert_relative_eq!(par, -0.5 * 2000f64.tanh() + 4.001f64.sqrt(), epsilon = 1e-14);
        assert!((par - 1.50025).abs() < 1e-4);
    }

    #[test]
    fn allocate_all_round_trip() {
        let st = FormationState::at_rest(vec![
            Vec3::new(1.2, 6.4, 8.5),
            Vec3::new(2.5, 7.5, 9.0),
            Vec3::new(3.8, 8.6, 9.5),
        ])
        .unwrap();
        let nu = ForceVector {
            f: vec![Vec3::new(1e6, -2e6, 3e5), Vec3::new(0.0, 0.0, 0.0), Vec3::new(-4e5, 1e5, 7e6)],
        };
        let amps = allocate_all(&st, &nu).unwrap();
        for (k, i, j) in st.pairs().iter() {
            let f = dipole_force_f(&st.rel_pos(i, j), &amps.get(i, j), &amps.get(j, i)).unwrap();
            assert!((f - nu.f[k]).norm() <= 1e-9 * (1.0 + nu.f[k].norm()));
        }
        assert_eq!(amps.get(0, 2), Vec3::zeros());
        let zero = allocate_all(&st, &ForceVector::zeros(3)).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| i == j || zero.get(i, j) == Vec3::zeros())));
    }

    #[test]
    fn psi_gradient_matches_central_differences() {
        let r = Vec3::new(0.7, -1.3, 2.1);
        let f = Vec3::new(3.0, 0.4, -1.1);
        let (_, gr, gf) = psi_with_gradient(&r, &f, 0.5, 1e-3).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let dr = (psi(&(r + e), &f, 0.5, 1e-3).unwrap() - psi(&(r - e), &f, 0.5, 1e-3).unwrap()) / (2.0 * h);
            let df = (psi(&r, &(f + e), 0.5, 1e-3).unwrap() - psi(&r, &(f - e), 0.5, 1e-3).unwrap()) / (2.0 * h);
            assert_relative_eq!(gr[k], dr, max_relative = 1e-7, epsilon = 1e-9);
            assert_relative_eq!(gf[k], df, max_relative = 1e-7, epsilon = 1e-9);
        }
    }

    #[test]
    fn psi_is_continuous_across_orthogonality() {
        let r = Vec3::new(2.0, 0.0, 0.0);
        let f = |t: f64| Vec3::new(t, 1.0, 0.0);
        let below = psi(&r, &f(-5e-7), 1e-3, 1e-3).unwrap();
        let above = psi(&r, &f(5e-7), 1e-3, 1e-3).unwrap();
        let at = psi(&r, &f(0.0), 1e-3, 1e-3).unwrap();
        assert!((below - at).abs() <= 1e-3 && (above - at).abs() <= 1e-3);
    }

    proptest! {
        #[test]
        fn round_trip(r in vec3(-10.0, 10.0), f in vec3(-10.0, 10.0)) {
            prop_assume!(r.norm() > 0.5);
            prop_assert!(residual(&r, &f) <= 1e-9);
        }

        #[test]
        fn equal_magnitudes_off_orthogonal(r in vec3(-10.0, 10.0), f in vec3(-10.0, 10.0)) {
            prop_assume!(r.norm() > 0.5 && r.dot(&f) != 0.0);
            let c = amplitude_pair(&r, &f).unwrap();
            prop_assert!((c.c1.norm() - c.c2.norm()).abs() <= 1e-10 * c.c1.norm().max(1e-300));
        }

        #[test]
        fn orthogonal_magnitude_ratio(r in vec3(-10.0, 10.0), w in vec3(-10.0, 10.0)) {
            prop_assume!(r.norm() > 0.5 && r.cross(&w).norm() > 1e-3);
            // Exactly orthogonal f_* built as a cross product of r with a
            // vector, then checked for an exact zero dot product.
            let f = r.cross(&w);
            prop_assume!(r.dot(&f) == 0.0);
            let c = amplitude_pair(&r, &f).unwrap();
            prop_assert!((c.c1.norm_squared() - 2.0 * c.c2.norm_squared()).abs() <= 1e-10 * c.c1.norm_squared());
        }

        #[test]
        fn psi_bounds_amplitudes(r in vec3(-10.0, 10.0), f in vec3(-10.0, 10.0)) {
            prop_assume!(r.norm() > 0.5);
            let c = amplitude_pair(&r, &f).unwrap();
            let p = psi(&r, &f, 1e-3, 1e-3).unwrap();
            prop_assert!(p > c.c1.norm_squared());
            prop_assert!(c.c1.norm_squared() >= c.c2.norm_squared() * (1.0 - 1e-12));
        }
    }
}
