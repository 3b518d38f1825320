use emff::model::{drift, ForceVector, FormationState, Vec3};
use emff::scenario::{builtin_scenario_file, Scenario, ScenarioFile};
use emff::sim::{run_averaged, RunOptions, Termination};

const D12: [f64; 3] = [1.1, 1.3, 0.5];
const D23: [f64; 3] = [1.1, 1.3, 0.5];

fn consistent_file() -> ScenarioFile {
    let mut f = builtin_scenario_file();
    f.mpc.desired_relative_m.insert("13".into(), [2.2, 2.6, 1.0]);
    f
}

fn formation_positions() -> Vec<[f64; 3]> {
    let r2 = Vec3::new(0.5, -0.25, 2.0);
    let r1 = r2 + Vec3::from(D12);
    let r3 = r2 - Vec3::from(D23);
    [r1, r2, r3].iter().map(|v| [v.x, v.y, v.z]).collect()
}

#[test]
fn equilibrium_formation_stays_put() {
    let mut f = consistent_file();
    f.initial.positions_m = formation_positions();
    let s = Scenario::from_file(f).unwrap();
    let run = run_averaged(&s, &RunOptions { duration: Some(10.0), log_every: Some(100), abort_on_exit: true, wall_budget_s: None }).unwrap();
    assert_eq!(run.termination, Termination::Completed);
    for (r0, r) in s.initial.x.r.iter().zip(&run.final_state.x.r) {
        assert!((r - r0).norm() <= 1e-3, "drifted by {}", (r - r0).norm());
    }
    for (_, e) in &run.summary.final_formation_error_m {
        assert!(*e <= 1e-3);
    }
}

#[test]
fn unfiltered_run_violates_the_distance_bound() {
    let mut f = builtin_scenario_file();
    f.integration.filter_enabled = false;
    let s = Scenario::from_file(f).unwrap();
    let run = run_averaged(&s, &RunOptions { duration: Some(60.0), log_every: Some(10), abort_on_exit: false, wall_budget_s: None }).unwrap();
    assert!(run.summary.min_distance_m < 1.0, "min distance {}", run.summary.min_distance_m);
}

#[test]
fn identical_scenarios_give_identical_logs() {
    let s = Scenario::builtin();
    let opts = RunOptions { duration: Some(0.3), log_every: Some(1), abort_on_exit: true, wall_budget_s: None };
    let a = run_averaged(&s, &opts).unwrap();
    let b = run_averaged(&Scenario::from_json_str(&s.to_json()).unwrap(), &opts).unwrap();
    assert_eq!(a.log.rows.len(), b.log.rows.len());
    for (x, y) in a.log.rows.iter().zip(&b.log.rows) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(a.log.tags, b.log.tags);
}

#[test]
fn log_is_uniform_and_named() {
    let s = Scenario::builtin();
    let run = run_averaged(&s, &RunOptions { duration: Some(0.2), log_every: Some(5), abort_on_exit: true, wall_budget_s: None }).unwrap();
    let t = run.log.column("time_s").unwrap();
    assert_eq!(t.len(), 5);
    for w in t.windows(2) {
        assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
    }
    for name in ["r1x_m", "h", "R12_2", "V13_1", "Q3", "p12x_Am2", "power1_VA", "lambda", "active"] {
        assert!(run.log.column_index(name).is_some(), "missing column {name}");
    }
}

#[test]
fn free_motion_conserves_kinetic_energy() {
    let x = FormationState::new(
        vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 3.0, 0.0)],
        vec![Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.0, 0.3, 0.0), Vec3::new(-0.1, 0.0, 0.2)],
    )
    .unwrap();
    let params = Scenario::builtin().params;
    let mut st = x.clone();
    for _ in 0..100 {
        let d = drift(&st, &ForceVector::zeros(3), &params).unwrap();
        assert!(d.v.iter().all(|a| *a == Vec3::zeros()));
        st = st.add_scaled(0.01, &d);
    }
    assert_eq!(st.kinetic_energy(15.0), x.kinetic_energy(15.0));
}
