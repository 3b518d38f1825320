//! Scenario files: JSON with explicit units in field names.
//!
//! Per-pair quantities are objects keyed by the one-based pair label
//! (`"12"`, `"13"`, ...). Frequencies are exact fractions, optionally times
//! π, so that the common amplitude period is exact.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::EmffError;
use crate::model::{ConstraintParams, ForceVector, FormationState, PairIndex, PhysicalParams, RationalFrequency, Vec3};
use crate::mpc::{MpcConfig, MpcPolicy};
use crate::sim::Tolerance;
use crate::safety::{CascadeState, CbfConfig, FlowDerivative, SafetyFilter};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: field `{path}`: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },

    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }

    fn from_model(field: &str, e: EmffError) -> Self {
        Self::invalid(field, e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyFile {
    pub num: i64,
    pub den: i64,
    pub times_pi: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalFile {
    pub mass_kg: f64,
    pub mu0_t_m_per_a: f64,
    pub coil_turns: f64,
    pub coil_area_m2: f64,
    pub coil_resistance_ohm: f64,
    pub coil_inductance_h: f64,
    pub omega_rad_per_s: BTreeMap<String, FrequencyFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    pub r_min_m: f64,
    pub v_max_m_per_s: f64,
    pub q_max_va: f64,
    pub eps1: f64,
    pub eps2: f64,
}

/// A scalar `w` (meaning `w·I`) or a full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightFile {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcFile {
    pub horizon_s: f64,
    pub step_s: f64,
    /// Per pair; missing pairs use the identity.
    #[serde(default)]
    pub position_weights: BTreeMap<String, WeightFile>,
    #[serde(default = "unit_weight")]
    pub velocity_weight: WeightFile,
    pub input_weight: WeightFile,
    pub desired_relative_m: BTreeMap<String, [f64; 3]>,
}

fn unit_weight() -> WeightFile {
    WeightFile::Scalar(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbfFile {
    pub a_per_s: f64,
    pub sigma_per_s: f64,
    pub rho: f64,
    pub k0_per_s: f64,
    pub k1_per_s: f64,
    pub kv_per_s: f64,
    pub alpha_per_s: f64,
    pub gamma_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialFile {
    pub positions_m: Vec<[f64; 3]>,
    /// Defaults to rest.
    #[serde(default)]
    pub velocities_m_per_s: Option<Vec<[f64; 3]>>,
    /// Initial `ν` per pair; missing pairs start at zero.
    #[serde(default)]
    pub nu0: BTreeMap<String, [f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowDerivativeFile {
    Exact,
    ForwardDifference { step_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationFile {
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_averaged_step")]
    pub averaged_step_s: f64,
    #[serde(default = "default_full_step")]
    pub full_step_s: f64,
    /// How far a raw barrier may dip below zero before the run aborts.
    #[serde(default = "default_exit_tolerance")]
    pub exit_tolerance: f64,
    #[serde(default = "default_true")]
    pub filter_enabled: bool,
    #[serde(default = "default_flow")]
    pub flow_derivative: FlowDerivativeFile,
    /// Error-controlled Rosenbrock substeps inside each averaged step; fixed-step RK4 otherwise.
    #[serde(default = "default_true")]
    pub adaptive: bool,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
}

fn default_duration() -> f64 {
    200.0
}
fn default_averaged_step() -> f64 {
    0.01
}
fn default_full_step() -> f64 {
    5e-5
}
fn default_exit_tolerance() -> f64 {
    1e-6
}
fn default_rtol() -> f64 {
    1e-9
}
fn default_true() -> bool {
    true
}
fn default_flow() -> FlowDerivativeFile {
    FlowDerivativeFile::Exact
}

impl Default for IntegrationFile {
    fn default() -> Self {
        Self {
            duration_s: default_duration(),
            averaged_step_s: default_averaged_step(),
            full_step_s: default_full_step(),
            exit_tolerance: default_exit_tolerance(),
            filter_enabled: true,
            flow_derivative: default_flow(),
            adaptive: true,
            rtol: default_rtol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_name() -> String {
    "run".into()
}
fn default_log_every() -> usize {
    1
}

impl Default for OutputFile {
    fn default() -> Self {
        Self { name: default_name(), log_every: default_log_every() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub satellites: usize,
    pub physical: PhysicalFile,
    pub constraints: ConstraintFile,
    pub mpc: MpcFile,
    pub cbf: CbfFile,
    pub initial: InitialFile,
    #[serde(default)]
    pub integration: IntegrationFile,
    #[serde(default)]
    pub output: OutputFile,
}

/// A resolved, validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub params: PhysicalParams,
    pub limits: ConstraintParams,
    pub mpc: MpcConfig,
    pub cbf: CbfConfig,
    pub initial: CascadeState,
    pub duration: f64,
    pub averaged_step: f64,
    pub full_step: f64,
    pub exit_tolerance: f64,
    pub filter_enabled: bool,
    pub flow_derivative: FlowDerivative,
    pub adaptive: bool,
    pub tolerance: Tolerance,
    pub output_name: String,
    pub log_every: usize,
    /// The file form, echoed into run metadata.
    pub source: ScenarioFile,
}

/// Input weight of the built-in formation scenario, relative to `κ²`.
pub const DEFAULT_INPUT_WEIGHT_PER_KAPPA2: f64 = 1e4;

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse { path, line: inner.line(), column: inner.column(), message: inner.to_string() }
        })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.source).expect("scenario serializes")
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let n = file.satellites;
        let pairs = PairIndex::new(n).map_err(|e| ScenarioError::from_model("satellites", e))?;
        let labels: Vec<String> = (0..pairs.len()).map(|k| pairs.label(k)).collect();

        let omega = per_pair(&labels, &file.physical.omega_rad_per_s, "physical.omega_rad_per_s", None)?
            .into_iter()
            .map(|w| RationalFrequency { num: w.num, den: w.den, times_pi: w.times_pi })
            .collect();
        let ph = &file.physical;
        let params = PhysicalParams {
            mass: ph.mass_kg,
            mu0: ph.mu0_t_m_per_a,
            coil_turns: ph.coil_turns,
            coil_area: ph.coil_area_m2,
            coil_resistance: ph.coil_resistance_ohm,
            coil_inductance: ph.coil_inductance_h,
            omega,
        };
        params.validate(n).map_err(|e| ScenarioError::from_model("physical", e))?;

        let c = &file.constraints;
        let limits =
            ConstraintParams { r_min: c.r_min_m, v_max: c.v_max_m_per_s, q_max: c.q_max_va, eps1: c.eps1, eps2: c.eps2 };
        limits.validate().map_err(|e| ScenarioError::from_model("constraints", e))?;

        let m = &file.mpc;
        let desired = per_pair(&labels, &m.desired_relative_m, "mpc.desired_relative_m", None)?
            .into_iter()
            .map(Vec3::from)
            .collect();
        let mut position_weights = Vec::with_capacity(labels.len());
        for label in &labels {
            let field = format!("mpc.position_weights.{label}");
            position_weights.push(match m.position_weights.get(label) {
                Some(w) => weight3(w, &field)?,
                None => Matrix3::identity(),
            });
        }
        for key in m.position_weights.keys() {
            if !labels.contains(key) {
                return Err(ScenarioError::invalid(format!("mpc.position_weights.{key}"), "unknown pair"));
            }
        }
        let dim = 3 * labels.len();
        let input_weight = match &m.input_weight {
            WeightFile::Scalar(w) => DMatrix::identity(dim, dim) * *w,
            WeightFile::Matrix(rows) => matrix(rows, dim, "mpc.input_weight")?,
        };
        let mpc = MpcConfig {
            horizon: m.horizon_s,
            step: m.step_s,
            position_weights,
            velocity_weight: weight3(&m.velocity_weight, "mpc.velocity_weight")?,
            input_weight,
            desired,
        };
        mpc.validate(n).map_err(|e| ScenarioError::from_model("mpc", e))?;

        let b = &file.cbf;
        let cbf = CbfConfig {
            a: b.a_per_s,
            sigma: b.sigma_per_s,
            rho: b.rho,
            k0: b.k0_per_s,
            k1: b.k1_per_s,
            kv: b.kv_per_s,
            alpha_gain: b.alpha_per_s,
            gamma_slack: b.gamma_slack,
        };
        cbf.validate().map_err(|e| ScenarioError::from_model("cbf", e))?;

        let init = &file.initial;
        if init.positions_m.len() != n {
            return Err(ScenarioError::invalid(
                "initial.positions_m",
                format!("expected {n} positions, got {}", init.positions_m.len()),
            ));
        }
        let r: Vec<Vec3> = init.positions_m.iter().copied().map(Vec3::from).collect();
        let v: Vec<Vec3> = match &init.velocities_m_per_s {
            Some(v) if v.len() != n => {
                return Err(ScenarioError::invalid(
                    "initial.velocities_m_per_s",
                    format!("expected {n} velocities, got {}", v.len()),
                ))
            }
            Some(v) => v.iter().copied().map(Vec3::from).collect(),
            None => vec![Vec3::zeros(); n],
        };
        let x = FormationState::new(r, v).map_err(|e| ScenarioError::from_model("initial", e))?;
        x.check_separation().map_err(|e| ScenarioError::from_model("initial.positions_m", e))?;
        let nu0 = per_pair(&labels, &init.nu0, "initial.nu0", Some([0.0; 3]))?
            .into_iter()
            .map(Vec3::from)
            .collect();
        let initial = CascadeState::new(x, ForceVector { f: nu0 }).map_err(|e| ScenarioError::from_model("initial", e))?;

        let it = &file.integration;
        for (field, value) in [
            ("integration.duration_s", it.duration_s),
            ("integration.averaged_step_s", it.averaged_step_s),
            ("integration.full_step_s", it.full_step_s),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ScenarioError::invalid(field, format!("must be positive, got {value}")));
            }
        }
        if !(it.rtol > 0.0 && it.rtol < 1.0) {
            return Err(ScenarioError::invalid("integration.rtol", "must lie in (0, 1)"));
        }
        if !(it.exit_tolerance >= 0.0) {
            return Err(ScenarioError::invalid("integration.exit_tolerance", "must be nonnegative"));
        }
        let fastest = params.omega.iter().map(|w| w.rad_per_s()).fold(0.0, f64::max);
        let min_period = 2.0 * std::f64::consts::PI / fastest;
        if it.full_step_s > min_period / 64.0 * (1.0 + 1e-12) {
            return Err(ScenarioError::invalid(
                "integration.full_step_s",
                format!("must be at most 1/64 of the shortest period ({:e} s)", min_period / 64.0),
            ));
        }
        let flow_derivative = match it.flow_derivative {
            FlowDerivativeFile::Exact => FlowDerivative::Exact,
            FlowDerivativeFile::ForwardDifference { step_s } if step_s > 0.0 => FlowDerivative::ForwardDifference(step_s),
            FlowDerivativeFile::ForwardDifference { .. } => {
                return Err(ScenarioError::invalid("integration.flow_derivative.forward_difference.step_s", "must be positive"))
            }
        };
        if file.output.log_every == 0 {
            return Err(ScenarioError::invalid("output.log_every", "must be at least 1"));
        }

        let scenario = Self {
            n,
            params,
            limits,
            mpc,
            cbf,
            initial,
            duration: it.duration_s,
            averaged_step: it.averaged_step_s,
            full_step: it.full_step_s,
            exit_tolerance: it.exit_tolerance,
            filter_enabled: it.filter_enabled,
            flow_derivative,
            adaptive: it.adaptive,
            tolerance: Tolerance { rtol: it.rtol, ..Tolerance::default() },
            output_name: file.output.name.clone(),
            log_every: file.output.log_every,
            source: file,
        };
        scenario.check_initial_safe()?;
        Ok(scenario)
    }

    pub fn safety_filter(&self) -> SafetyFilter {
        let mut f = SafetyFilter::new(self.params.clone(), self.limits, self.cbf);
        f.flow_derivative = self.flow_derivative;
        f
    }

    pub fn policy(&self) -> crate::error::Result<MpcPolicy> {
        MpcPolicy::new(self.n, &self.mpc, &self.params)
    }

    /// The initial cascade state must lie in the safe set: every `R_ij`,
    /// `R_ij,1`, `V_ij`, `Q_i` and `h` nonnegative.
    pub fn check_initial_safe(&self) -> Result<(), ScenarioError> {
        let margins = safe_set_margins(&self.initial, &self.safety_filter())
            .map_err(|e| ScenarioError::from_model("initial", e))?;
        if let Some((name, value)) = margins.iter().find(|(_, v)| *v < 0.0) {
            return Err(ScenarioError::invalid(
                "initial",
                format!("initial state is outside the safe set: {name} = {value:e}"),
            ));
        }
        Ok(())
    }

    /// The built-in three-satellite formation scenario.
    pub fn builtin() -> Self {
        Self::from_file(builtin_scenario_file()).expect("built-in scenario is valid")
    }
}

/// Every quantity defining the safe set, by name.
pub fn safe_set_margins(c: &CascadeState, filter: &SafetyFilter) -> crate::error::Result<Vec<(String, f64)>> {
    use crate::safety::{barrier_r, barrier_v, hocbf_r1};
    let pairs = c.x.pairs();
    let mut out = Vec::new();
    for (k, i, j) in pairs.iter() {
        let l = pairs.label(k);
        out.push((format!("R{l}"), barrier_r(&c.x, i, j, filter.limits.r_min)));
        out.push((format!("R{l}_1"), hocbf_r1(&c.x, i, j, filter.limits.r_min, &filter.cbf)));
        out.push((format!("V{l}"), barrier_v(&c.x, i, j, filter.limits.v_max)));
    }
    let args = filter.arguments(c, false)?;
    let names = SafetyFilter::argument_names(c.x.n());
    for (name, value) in names.iter().zip(&args.values) {
        if name.starts_with('Q') {
            out.push((name.clone(), *value));
        }
    }
    out.push(("h".into(), crate::safety::soft_min(&args.values, filter.cbf.rho)?));
    Ok(out)
}

fn per_pair<T: Clone>(
    labels: &[String],
    map: &BTreeMap<String, T>,
    field: &str,
    default: Option<T>,
) -> Result<Vec<T>, ScenarioError> {
    for key in map.keys() {
        if !labels.contains(key) {
            return Err(ScenarioError::invalid(
                format!("{field}.{key}"),
                format!("unknown pair; expected one of {}", labels.join(", ")),
            ));
        }
    }
    labels
        .iter()
        .map(|l| match (map.get(l), &default) {
            (Some(v), _) => Ok(v.clone()),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(ScenarioError::invalid(format!("{field}.{l}"), "missing pair")),
        })
        .collect()
}

fn matrix(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(ScenarioError::invalid(field, format!("expected a {dim}x{dim} matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn weight3(w: &WeightFile, field: &str) -> Result<Matrix3<f64>, ScenarioError> {
    Ok(match w {
        WeightFile::Scalar(s) => Matrix3::identity() * *s,
        WeightFile::Matrix(rows) => Matrix3::from_iterator(matrix(rows, 3, field)?.iter().copied()),
    })
}

/// The built-in scenario in file form.
pub fn builtin_scenario_file() -> ScenarioFile {
    let pi = |num| FrequencyFile { num, den: 1, times_pi: true };
    let mass_kg = 15.0;
    let mu0 = 4e-7 * std::f64::consts::PI;
    let kappa = 3.0 * mu0 / (4.0 * std::f64::consts::PI) / (2.0 * mass_kg);
    ScenarioFile {
        satellites: 3,
        physical: PhysicalFile {
            mass_kg,
            mu0_t_m_per_a: mu0,
            coil_turns: 400.0,
            coil_area_m2: 0.1963,
            coil_resistance_ohm: 0.3673,
            coil_inductance_h: 0.12,
            omega_rad_per_s: [("12", pi(200)), ("13", pi(400)), ("23", pi(600))]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        },
        constraints: ConstraintFile { r_min_m: 1.0, v_max_m_per_s: 1.0, q_max_va: 9e6, eps1: 1e-3, eps2: 1e-3 },
        mpc: MpcFile {
            horizon_s: 10.0,
            step_s: 0.1,
            position_weights: BTreeMap::new(),
            velocity_weight: WeightFile::Scalar(1.0),
            input_weight: WeightFile::Scalar(DEFAULT_INPUT_WEIGHT_PER_KAPPA2 * kappa * kappa),
            desired_relative_m: [("12", [1.1, 1.3, 0.5]), ("13", [2.2, 4.6, 1.0]), ("23", [1.1, 1.3, 0.5])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        },
        cbf: CbfFile {
            a_per_s: 0.7,
            sigma_per_s: 3.0,
            rho: 10.0,
            k0_per_s: 5.0,
            k1_per_s: 5.0,
            kv_per_s: 5.0,
            alpha_per_s: 0.02,
            gamma_slack: 1e40,
        },
        initial: InitialFile {
            positions_m: vec![[1.2, 6.4, 8.5], [2.5, 7.5, 9.0], [3.8, 8.6, 9.5]],
            velocities_m_per_s: None,
            nu0: BTreeMap::new(),
        },
        integration: IntegrationFile::default(),
        output: OutputFile { name: "formation".into(), log_every: 10 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenario_round_trips() {
        let s = Scenario::builtin();
        let again = Scenario::from_json_str(&s.to_json()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.params.common_period().unwrap(), 0.01);
        assert_eq!(s.initial.nu, ForceVector::zeros(3));
    }

    #[test]
    fn parse_error_names_line_and_field() {
        let text = Scenario::builtin().to_json().replacen("\"mass_kg\": 15.0", "\"mass_kg\": \"heavy\"", 1);
        match Scenario::from_json_str(&text) {
            Err(ScenarioError::Parse { path, line, .. }) => {
                assert_eq!(path, "physical.mass_kg");
                assert!(line > 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_pair_is_rejected() {
        let mut f = builtin_scenario_file();
        f.mpc.desired_relative_m.insert("14".into(), [0.0; 3]);
        let err = Scenario::from_file(f).unwrap_err();
        assert!(err.to_string().contains("mpc.desired_relative_m.14"), "{err}");
    }

    #[test]
    fn unsafe_initial_state_is_rejected() {
        let mut f = builtin_scenario_file();
        f.initial.positions_m[1] = [1.5, 6.4, 8.5];
        let err = Scenario::from_file(f).unwrap_err();
        assert!(err.to_string().contains("outside the safe set"), "{err}");
    }

    #[test]
    fn coarse_full_step_is_rejected() {
        let mut f = builtin_scenario_file();
        f.integration.full_step_s = 1e-3;
        assert!(Scenario::from_file(f).is_err());
    }
}
