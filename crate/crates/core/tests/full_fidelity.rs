use emff::model::ForceVector;
use emff::scenario::{builtin_scenario_file, Scenario};
use emff::sim::{run_full, FullOptions};
use rustfft::{num_complex::Complex, FftPlanner};

fn held(nu: Option<ForceVector>) -> FullOptions {
    FullOptions { nu_override: nu, log_every: 1, controlled: false }
}

#[test]
fn zero_amplitudes_give_ballistic_motion() {
    let mut f = builtin_scenario_file();
    f.initial.velocities_m_per_s = Some(vec![[0.01, 0.0, -0.02], [0.0, 0.03, 0.0], [-0.01, 0.0, 0.01]]);
    let s = Scenario::from_file(f).unwrap();
    let run = run_full(&s, 0.05, &held(Some(ForceVector::zeros(3)))).unwrap();
    assert_eq!(run.periods.len(), 5);
    for i in 0..3 {
        let expect = s.initial.x.r[i] + s.initial.x.v[i] * 0.05;
        assert!((run.final_state.r[i] - expect).norm() < 1e-10, "{}", (run.final_state.r[i] - expect).norm());
        assert_eq!(run.final_state.v[i], s.initial.x.v[i]);
    }
}

#[test]
fn one_period_matches_the_averaged_model() {
    let s = Scenario::builtin();
    let nu = s.policy().unwrap().nu_desired(&s.initial.x).unwrap();
    let run = run_full(&s, 0.01, &held(Some(nu))).unwrap();
    assert_eq!(run.periods.len(), 1);
    assert!(run.max_relative_error <= 0.02, "relative error {}", run.max_relative_error);
}

#[test]
fn spectrum_of_u1_has_only_its_pair_lines() {
    let s = Scenario::builtin();
    let nu = s.policy().unwrap().nu_desired(&s.initial.x).unwrap();
    let run = run_full(&s, 0.01, &held(Some(nu))).unwrap();
    let samples = run.samples.len();
    assert_eq!(samples, 200);
    let dt = 0.01 / samples as f64;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(samples);
    let mut peak = [0.0f64; 3];
    let mut leak = 0.0f64;
    for axis in ["x", "y", "z"] {
        let col = run.samples.column(&format!("u1{axis}_Am2")).unwrap();
        let mut buf: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (k, c) in buf.iter().enumerate().take(samples / 2 + 1) {
            let freq = k as f64 / (samples as f64 * dt);
            let mag = c.norm() / samples as f64;
            match freq.round() as i64 {
                100 => peak[0] = peak[0].max(mag),
                200 => peak[1] = peak[1].max(mag),
                300 => peak[2] = peak[2].max(mag),
                _ => leak = leak.max(mag),
            }
        }
    }
    let scale = peak[0].max(peak[1]);
    assert!(peak[0] > 1e-3 * scale && peak[1] > 1e-3 * scale, "missing line: {peak:?}");
    assert!(peak[2] <= 1e-12 * scale, "300 Hz line in u1: {}", peak[2]);
    assert!(leak <= 1e-12 * scale, "leakage {leak}");
}

#[test]
fn window_must_be_whole_periods() {
    let s = Scenario::builtin();
    assert!(run_full(&s, 0.015, &held(None)).is_err());
}
