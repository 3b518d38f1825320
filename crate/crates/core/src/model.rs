//! Value types, pair indexing, the dipole force function and the averaged
//! state-space dynamics `x' = A x + B zeta(x, nu)`.

use nalgebra::{DMatrix, DVector, Vector3};
use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{EmffError, Result};

pub type Vec3 = Vector3<f64>;

/// Separations below this are treated as coincident satellites.
pub const MIN_SEPARATION: f64 = 1e-9;

/// Lexicographic indexing of unordered satellite pairs
/// `(0,1), (0,2), ..., (0,n-1), (1,2), ..., (n-2,n-1)`.
///
/// Satellite indices are zero-based in code; labels (`r12`, `Q3`, ...) are
/// one-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    n: usize,
}

impl PairIndex {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(EmffError::Domain(format!(
                "at least two satellites are required, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn satellites(&self) -> usize {
        self.n
    }

    /// Number of unordered pairs, `n(n-1)/2`.
    pub fn len(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column index of the unordered pair `{i, j}`.
    pub fn index(&self, i: usize, j: usize) -> Option<usize> {
        if i == j || i >= self.n || j >= self.n {
            return None;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        Some(a * (2 * self.n - a - 1) / 2 + (b - a - 1))
    }

    /// The pair `(i, j)` with `i < j` stored at column `k`.
    pub fn pair(&self, k: usize) -> Option<(usize, usize)> {
        if k >= self.len() {
            return None;
        }
        let mut rest = k;
        for i in 0..self.n - 1 {
            let row = self.n - i - 1;
            if rest < row {
                return Some((i, i + 1 + rest));
            }
            rest -= row;
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.len()).map(move |k| {
            let (i, j) = self.pair(k).expect("k < len");
            (k, i, j)
        })
    }

    /// `+1` if satellite `i` is the first member of pair `k`, `-1` if it is
    /// the second, `0` otherwise. This is the entry `B0[i, k]`.
    pub fn incidence(&self, i: usize, k: usize) -> f64 {
        match self.pair(k) {
            Some((a, _)) if a == i => 1.0,
            Some((_, b)) if b == i => -1.0,
            _ => 0.0,
        }
    }

    pub fn label(&self, k: usize) -> String {
        let (i, j) = self.pair(k).expect("pair index out of range");
        format!("{}{}", i + 1, j + 1)
    }
}

/// Positions and velocities of all satellites.
///
/// Flattens to the `6n` vector with all positions first, then all
/// velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormationState {
    pub r: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

/// Time derivative of a [`FormationState`]: `r` holds `r'` and `v` holds `v'`.
pub type StateDerivative = FormationState;

impl FormationState {
    pub fn new(r: Vec<Vec3>, v: Vec<Vec3>) -> Result<Self> {
        if r.len() != v.len() {
            return Err(EmffError::Domain(format!(
                "{} positions but {} velocities",
                r.len(),
                v.len()
            )));
        }
        if r.len() < 2 {
            return Err(EmffError::Domain("at least two satellites are required".into()));
        }
        if r.iter().chain(v.iter()).any(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(EmffError::Domain("non-finite state component".into()));
        }
        Ok(Self { r, v })
    }

    pub fn at_rest(r: Vec<Vec3>) -> Result<Self> {
        let v = vec![Vec3::zeros(); r.len()];
        Self::new(r, v)
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn pairs(&self) -> PairIndex {
        PairIndex { n: self.n() }
    }

    /// `r_ij = r_i - r_j`.
    pub fn rel_pos(&self, i: usize, j: usize) -> Vec3 {
        self.r[i] - self.r[j]
    }

    /// `v_ij = v_i - v_j`.
    pub fn rel_vel(&self, i: usize, j: usize) -> Vec3 {
        self.v[i] - self.v[j]
    }

    /// Fails with [`EmffError::Coincident`] if any pair is closer than
    /// [`MIN_SEPARATION`].
    pub fn check_separation(&self) -> Result<()> {
        for (_, i, j) in self.pairs().iter() {
            let d = self.rel_pos(i, j).norm();
            if !(d >= MIN_SEPARATION) {
                return Err(EmffError::Coincident { i: i + 1, j: j + 1, distance: d });
            }
        }
        Ok(())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut x = DVector::zeros(6 * n);
        for i in 0..n {
            x.fixed_rows_mut::<3>(3 * i).copy_from(&self.r[i]);
            x.fixed_rows_mut::<3>(3 * n + 3 * i).copy_from(&self.v[i]);
        }
        x
    }

    pub fn from_slice(n: usize, x: &[f64]) -> Result<Self> {
        if x.len() != 6 * n {
            return Err(EmffError::Domain(format!(
                "state vector has length {}, expected {}",
                x.len(),
                6 * n
            )));
        }
        let r = (0..n).map(|i| Vec3::from_column_slice(&x[3 * i..3 * i + 3])).collect();
        let v = (0..n)
            .map(|i| Vec3::from_column_slice(&x[3 * n + 3 * i..3 * n + 3 * i + 3]))
            .collect();
        Ok(Self { r, v })
    }

    /// `self + h * d`, componentwise.
    pub fn add_scaled(&self, h: f64, d: &StateDerivative) -> Self {
        Self {
            r: self.r.iter().zip(&d.r).map(|(a, b)| a + b * h).collect(),
            v: self.v.iter().zip(&d.v).map(|(a, b)| a + b * h).collect(),
        }
    }

    /// Total linear momentum `m * sum_i v_i`.
    pub fn momentum(&self, mass: f64) -> Vec3 {
        self.v.iter().fold(Vec3::zeros(), |acc, v| acc + v) * mass
    }

    pub fn kinetic_energy(&self, mass: f64) -> f64 {
        0.5 * mass * self.v.iter().map(|v| v.norm_squared()).sum::<f64>()
    }
}

/// One force-function value per unordered pair, in [`PairIndex`] order.
///
/// The entry for `(i, j)`, `i < j`, is the value of
/// `f(r_ij, p_ij, p_ji)`; satellite `i` receives it with a plus sign and
/// satellite `j` with a minus sign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceVector {
    pub f: Vec<Vec3>,
}

impl ForceVector {
    pub fn zeros(pairs: usize) -> Self {
        Self { f: vec![Vec3::zeros(); pairs] }
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.f.len(), self.f.iter().flat_map(|v| v.iter().copied()))
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if !x.len().is_multiple_of(3) {
            return Err(EmffError::Domain(format!(
                "force vector length {} is not a multiple of 3",
                x.len()
            )));
        }
        Ok(Self { f: x.chunks(3).map(Vec3::from_column_slice).collect() })
    }

    pub fn add_scaled(&self, h: f64, d: &ForceVector) -> Self {
        Self { f: self.f.iter().zip(&d.f).map(|(a, b)| a + b * h).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { f: self.f.iter().map(|a| a * s).collect() }
    }

    pub fn norm(&self) -> f64 {
        self.f.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }
}

/// An interaction frequency `num/den` rad/s, or `(num/den)·π` rad/s when
/// `times_pi` is set. Exact ratios are needed to form the common period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalFrequency {
    pub num: i64,
    pub den: i64,
    pub times_pi: bool,
}

impl RationalFrequency {
    pub fn pi_multiple(num: i64, den: i64) -> Self {
        Self { num, den, times_pi: true }
    }

    pub fn rad_per_s(&self) -> f64 {
        let base = self.num as f64 / self.den as f64;
        if self.times_pi {
            base * std::f64::consts::PI
        } else {
            base
        }
    }

    /// Period `2π/ω` as a reduced fraction `(p, q)` of seconds, in units of
    /// π when `times_pi` is false.
    fn period_fraction(&self) -> (i64, i64) {
        let (p, q) = (2 * self.den, self.num);
        let g = p.gcd(&q);
        (p / g, q / g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Mass of each satellite, kg.
    pub mass: f64,
    /// Vacuum permeability, T·m/A.
    pub mu0: f64,
    pub coil_turns: f64,
    /// Coil cross-sectional area, m².
    pub coil_area: f64,
    /// Ω
    pub coil_resistance: f64,
    /// H
    pub coil_inductance: f64,
    /// Interaction frequency of each unordered pair, in [`PairIndex`] order.
    pub omega: Vec<RationalFrequency>,
}

impl PhysicalParams {
    /// `c0 = 3 mu0 / (4 pi)`.
    pub fn c0(&self) -> f64 {
        3.0 * self.mu0 / (4.0 * std::f64::consts::PI)
    }

    /// Gain of the averaged model, `c0 / (2m)`.
    pub fn kappa(&self) -> f64 {
        self.c0() / (2.0 * self.mass)
    }

    pub fn omega(&self, pair: usize) -> f64 {
        self.omega[pair].rad_per_s()
    }

    /// Series RL impedance magnitude at the pair's interaction frequency.
    pub fn impedance(&self, pair: usize) -> f64 {
        let x = self.omega(pair) * self.coil_inductance;
        self.coil_resistance.hypot(x)
    }

    /// `1 / (N² A²)`.
    pub fn power_scale(&self) -> f64 {
        1.0 / (self.coil_turns * self.coil_area).powi(2)
    }

    /// Least common multiple of all `2π/ω_ij`, computed on exact fractions.
    pub fn common_period(&self) -> Result<f64> {
        let first = self
            .omega
            .first()
            .ok_or_else(|| EmffError::Config("no interaction frequencies".into()))?;
        if self.omega.iter().any(|w| w.times_pi != first.times_pi) {
            return Err(EmffError::Config(
                "frequencies mix multiples of pi with plain rationals; no common period".into(),
            ));
        }
        let (mut num, mut den) = (0i64, 0i64);
        for w in &self.omega {
            let (p, q) = w.period_fraction();
            if num == 0 {
                num = p;
                den = q;
            } else {
                num = num.lcm(&p);
                den = den.gcd(&q);
            }
        }
        let t = num as f64 / den as f64;
        Ok(if first.times_pi { t } else { t * std::f64::consts::PI })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let pairs = PairIndex::new(n)?;
        let positive = [
            ("mass_kg", self.mass),
            ("mu0", self.mu0),
            ("coil_turns", self.coil_turns),
            ("coil_area_m2", self.coil_area),
            ("coil_resistance_ohm", self.coil_resistance),
            ("coil_inductance_h", self.coil_inductance),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EmffError::Config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.omega.len() != pairs.len() {
            return Err(EmffError::Config(format!(
                "expected {} interaction frequencies, got {}",
                pairs.len(),
                self.omega.len()
            )));
        }
        for (k, w) in self.omega.iter().enumerate() {
            if w.num <= 0 || w.den <= 0 {
                return Err(EmffError::Config(format!(
                    "frequency of pair {} must be a positive fraction",
                    pairs.label(k)
                )));
            }
        }
        for a in 0..self.omega.len() {
            for b in a + 1..self.omega.len() {
                if (self.omega(a) - self.omega(b)).abs() <= 1e-12 * self.omega(a) {
                    return Err(EmffError::Config(format!(
                        "pairs {} and {} share an interaction frequency",
                        pairs.label(a),
                        pairs.label(b)
                    )));
                }
            }
        }
        self.common_period()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    /// Collision radius, m.
    pub r_min: f64,
    /// Maximum relative speed, m/s.
    pub v_max: f64,
    /// Maximum apparent power per satellite, V·A.
    pub q_max: f64,
    /// Smoothing of the `tanh` term in `psi`.
    pub eps1: f64,
    /// Offset under the square root in `psi`.
    pub eps2: f64,
}

impl ConstraintParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("r_min_m", self.r_min),
            ("v_max_m_per_s", self.v_max),
            ("q_max_va", self.q_max),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EmffError::Config(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// Dipole interaction force function
///
/// `f(r, p, q) = (qᵀr̂) p + (pᵀr̂) q + (pᵀq) r̂ − 5 (pᵀr̂)(qᵀr̂) r̂`.
pub fn dipole_force_f(r: &Vec3, p: &Vec3, q: &Vec3) -> Result<Vec3> {
    let d = r.norm();
    if !(d >= MIN_SEPARATION) {
        return Err(EmffError::Domain(format!("dipole force at separation {d:e}")));
    }
    let rh = r / d;
    let pr = p.dot(&rh);
    let qr = q.dot(&rh);
    Ok(p * qr + q * pr + rh * (p.dot(q) - 5.0 * pr * qr))
}

/// Incidence matrix `B0` (`n × n(n-1)/2`): the column of pair `(i, j)` has
/// `+1` in row `i` and `-1` in row `j`.
pub fn build_b0(n: usize) -> Result<DMatrix<f64>> {
    let pairs = PairIndex::new(n)?;
    let mut b0 = DMatrix::zeros(n, pairs.len());
    for (k, i, j) in pairs.iter() {
        b0[(i, k)] = 1.0;
        b0[(j, k)] = -1.0;
    }
    Ok(b0)
}

/// Dense `A` (`6n × 6n`) and `B` (`6n × 3n(n-1)/2`) of the averaged model.
pub fn system_matrices(n: usize, params: &PhysicalParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b0 = build_b0(n)?;
    let pairs = b0.ncols();
    let mut a = DMatrix::zeros(6 * n, 6 * n);
    for k in 0..3 * n {
        a[(k, 3 * n + k)] = 1.0;
    }
    let kappa = params.kappa();
    let mut b = DMatrix::zeros(6 * n, 3 * pairs);
    for i in 0..n {
        for k in 0..pairs {
            for c in 0..3 {
                b[(3 * n + 3 * i + c, 3 * k + c)] = kappa * b0[(i, k)];
            }
        }
    }
    Ok((a, b))
}

/// Distance scaling `zeta_ij = nu_ij / |r_ij|⁴`.
pub fn zeta(state: &FormationState, nu: &ForceVector) -> Result<ForceVector> {
    let pairs = state.pairs();
    check_len(&pairs, nu)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (k, i, j) in pairs.iter() {
        let d = state.rel_pos(i, j).norm();
        if !(d >= MIN_SEPARATION) {
            return Err(EmffError::Coincident { i: i + 1, j: j + 1, distance: d });
        }
        out.push(nu.f[k] / d.powi(4));
    }
    Ok(ForceVector { f: out })
}

/// Accelerations `kappa (B0 ⊗ I3) zeta` of the averaged model.
pub fn accelerations(state: &FormationState, nu: &ForceVector, params: &PhysicalParams) -> Result<Vec<Vec3>> {
    let z = zeta(state, nu)?;
    Ok(accelerations_from_zeta(state.n(), &z, params.kappa()))
}

pub(crate) fn accelerations_from_zeta(n: usize, zeta: &ForceVector, kappa: f64) -> Vec<Vec3> {
    let pairs = PairIndex { n };
    let mut acc = vec![Vec3::zeros(); n];
    for (k, i, j) in pairs.iter() {
        let a = zeta.f[k] * kappa;
        acc[i] += a;
        acc[j] -= a;
    }
    acc
}

/// Right-hand side of the averaged model, `r' = v`, `v' = kappa (B0 ⊗ I3) zeta(x, nu)`.
pub fn drift(state: &FormationState, nu: &ForceVector, params: &PhysicalParams) -> Result<StateDerivative> {
    let acc = accelerations(state, nu, params)?;
    Ok(FormationState { r: state.v.clone(), v: acc })
}

pub(crate) fn check_len(pairs: &PairIndex, nu: &ForceVector) -> Result<()> {
    if nu.len() != pairs.len() {
        return Err(EmffError::Domain(format!(
            "force vector has {} entries, expected {}",
            nu.len(),
            pairs.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    pub(crate) fn reference_params() -> PhysicalParams {
        PhysicalParams {
            mass: 15.0,
            mu0: 4e-7 * std::f64::consts::PI,
            coil_turns: 400.0,
            coil_area: 0.1963,
            coil_resistance: 0.3673,
            coil_inductance: 0.12,
            omega: vec![
                RationalFrequency::pi_multiple(200, 1),
                RationalFrequency::pi_multiple(400, 1),
                RationalFrequency::pi_multiple(600, 1),
            ],
        }
    }

    #[test]
    fn zero_moment_gives_zero_force() {
        let f = dipole_force_f(&Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros(), &Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(f, Vec3::zeros());
    }

    #[test]
    fn orthogonal_moments_force() {
        let q4 = 2f64.powf(0.25);
        let f = dipole_force_f(&Vec3::new(2.0, 0.0, 0.0), &Vec3::new(0.0, q4, 0.0), &Vec3::new(1.0 / q4, 0.0, 0.0))
            .unwrap();
        assert_relative_eq!(f, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn dipole_rejects_zero_separation() {
        assert!(matches!(
            dipole_force_f(&Vec3::zeros(), &Vec3::x(), &Vec3::y()),
            Err(EmffError::Domain(_))
        ));
    }

    #[test]
    fn b0_small_cases() {
        assert_eq!(build_b0(2).unwrap(), DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, -1.0]);
        assert_eq!(build_b0(3).unwrap(), expected);
        assert!(build_b0(1).is_err());
    }

    #[test]
    fn b0_columns_sum_to_zero() {
        for n in 2..8 {
            let b0 = build_b0(n).unwrap();
            let sums = b0.row_sum();
            assert!(sums.iter().all(|s| *s == 0.0));
        }
    }

    #[test]
    fn pair_index_order() {
        let p = PairIndex::new(4).unwrap();
        let order: Vec<_> = p.iter().map(|(_, i, j)| (i, j)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(p.index(3, 1), Some(4));
        assert_eq!(p.index(2, 2), None);
        assert_eq!(p.label(3), "23");
    }

    #[test]
    fn zeta_scaling_examples() {
        let s = FormationState::at_rest(vec![Vec3::new(2.0, 0.0, 0.0), Vec3::zeros()]).unwrap();
        let z = zeta(&s, &ForceVector { f: vec![Vec3::new(16.0, 0.0, 0.0)] }).unwrap();
        assert_eq!(z.f[0], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(zeta(&s, &ForceVector::zeros(1)).unwrap(), ForceVector::zeros(1));
    }

    #[test]
    fn coincident_satellites_rejected() {
        let s = FormationState::at_rest(vec![Vec3::zeros(), Vec3::zeros()]).unwrap();
        assert!(matches!(
            drift(&s, &ForceVector::zeros(1), &reference_params_two()),
            Err(EmffError::Coincident { i: 1, j: 2, .. })
        ));
    }

    fn reference_params_two() -> PhysicalParams {
        let mut p = reference_params();
        p.omega.truncate(1);
        p
    }

    #[test]
    fn drift_at_rest_without_force_is_zero() {
        let s = FormationState::at_rest(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::zeros(), Vec3::x() * 4.0]).unwrap();
        let d = drift(&s, &ForceVector::zeros(3), &reference_params()).unwrap();
        assert!(d.r.iter().chain(&d.v).all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn common_period_of_reference_frequencies() {
        assert_relative_eq!(reference_params().common_period().unwrap(), 0.01, max_relative = 1e-15);
        let mut p = reference_params();
        p.omega[2] = RationalFrequency { num: 600, den: 1, times_pi: false };
        assert!(p.common_period().is_err());
    }

    #[test]
    fn validate_rejects_duplicate_frequency() {
        let mut p = reference_params();
        p.omega[1] = p.omega[0];
        assert!(p.validate(3).is_err());
        assert!(reference_params().validate(3).is_ok());
    }

    /// Direct pairwise sum `v_i' = kappa Σ_{j≠i} |r_ij|^-4 f(r_ij, p_ij, p_ji)`
    /// with `f_ji = f(r_ji, p_ji, p_ij)` computed from explicit amplitudes.
    fn direct_sum(state: &FormationState, amps: &[Vec<Vec3>], kappa: f64) -> Vec<Vec3> {
        let n = state.n();
        (0..n)
            .map(|i| {
                let mut a = Vec3::zeros();
                for j in 0..n {
                    if j != i {
                        let r = state.rel_pos(i, j);
                        a += dipole_force_f(&r, &amps[i][j], &amps[j][i]).unwrap() * (kappa / r.norm().powi(4));
                    }
                }
                a
            })
            .collect()
    }

    proptest! {
        #[test]
        fn dipole_antisymmetry(r in vec3(), p in vec3(), q in vec3()) {
            prop_assume!(r.norm() > 1e-3);
            let a = dipole_force_f(&r, &p, &q).unwrap();
            let b = dipole_force_f(&(-r), &q, &p).unwrap();
            prop_assert!((a + b).norm() <= 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn pair_index_round_trips(n in 2usize..12) {
            let p = PairIndex::new(n).unwrap();
            for k in 0..p.len() {
                let (i, j) = p.pair(k).unwrap();
                prop_assert!(i < j);
                prop_assert_eq!(p.index(i, j), Some(k));
                prop_assert_eq!(p.index(j, i), Some(k));
            }
        }

        #[test]
        fn zeta_scales_inverse_fourth(
            pos in proptest::collection::vec(vec3(), 3),
            f in proptest::collection::vec(vec3(), 3),
            s in 0.2..5.0f64,
        ) {
            let st = FormationState::at_rest(pos.clone()).unwrap();
            prop_assume!(st.check_separation().is_ok());
            prop_assume!(st.pairs().iter().all(|(_, i, j)| st.rel_pos(i, j).norm() > 0.1));
            let nu = ForceVector { f };
            let scaled = FormationState::at_rest(pos.iter().map(|p| p * s).collect()).unwrap();
            let z = zeta(&st, &nu).unwrap();
            let zs = zeta(&scaled, &nu).unwrap();
            for k in 0..3 {
                prop_assert!((zs.f[k] * s.powi(4) - z.f[k]).norm() <= 1e-10 * (1.0 + z.f[k].norm()));
            }
        }

        #[test]
        fn momentum_is_conserved(
            pos in proptest::collection::vec(vec3(), 4),
            vel in proptest::collection::vec(vec3(), 4),
            f in proptest::collection::vec(vec3(), 6),
        ) {
            let st = FormationState::new(pos, vel).unwrap();
            prop_assume!(st.pairs().iter().all(|(_, i, j)| st.rel_pos(i, j).norm() > 0.1));
            let p = PhysicalParams { omega: (1..=6).map(|k| RationalFrequency::pi_multiple(100 * k, 1)).collect(), ..reference_params() };
            let nu = ForceVector { f: f.iter().map(|v| v * 1e7).collect() };
            let d = drift(&st, &nu, &p).unwrap();
            let total: Vec3 = d.v.iter().fold(Vec3::zeros(), |a, b| a + b) * p.mass;
            let scale: f64 = d.v.iter().map(|a| a.norm()).sum::<f64>() * p.mass;
            prop_assert!(total.norm() <= 1e-14 * (1.0 + scale));
        }

        #[test]
        fn drift_matches_pairwise_sum(
            n in 2usize..5,
            pos in proptest::collection::vec(vec3(), 4),
            amps in proptest::collection::vec(proptest::collection::vec(vec3(), 4), 4),
        ) {
            let st = FormationState::at_rest(pos[..n].to_vec()).unwrap();
            prop_assume!(st.pairs().iter().all(|(_, i, j)| st.rel_pos(i, j).norm() > 0.1));
            let pairs = st.pairs();
            let omega = (1..=pairs.len() as i64).map(|k| RationalFrequency::pi_multiple(100 * k, 1)).collect();
            let params = PhysicalParams { omega, ..reference_params() };
            let nu = ForceVector {
                f: pairs.iter().map(|(_, i, j)| dipole_force_f(&st.rel_pos(i, j), &amps[i][j], &amps[j][i]).unwrap()).collect(),
            };
            let d = drift(&st, &nu, &params).unwrap();
            let oracle = direct_sum(&st, &amps, params.kappa());
            for i in 0..n {
                prop_assert!((d.v[i] - oracle[i]).norm() <= 1e-12 * (oracle[i].norm() + 1e-300) + 1e-25);
            }

            // Dense A x + B zeta path.
            let (a, b) = system_matrices(n, &params).unwrap();
            let xdot = &a * st.to_vector() + &b * zeta(&st, &nu).unwrap().to_vector();
            let flat = FormationState::from_slice(n, xdot.as_slice()).unwrap();
            for i in 0..n {
                prop_assert!((flat.v[i] - d.v[i]).norm() <= 1e-12 * (d.v[i].norm() + 1e-300) + 1e-25);
            }
        }
    }
}
