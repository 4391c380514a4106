use kpi_core::bump::ApproxParams;
use kpi_core::experiments::{run_divergence_solver, run_residual_scan, SolverSettings, SweepConfig, Verdict};

#[test]
fn residual_scan_with_large_epsilon() {
    let base = ApproxParams::from_epsilon(16.0, 1.0, 0.3).unwrap();
    let cfg = SweepConfig { base, lambdas: vec![16.0, 32.0, 64.0, 128.0], t_samples: vec![0.5], tol: 0.05, workers: 1 };
    let r = run_residual_scan(&cfg).unwrap();
    assert_ne!(r.verdict, Verdict::Fail, "{:?}", r.fits);
    let fit = &r.fits[0];
    assert!(fit.fit.slope <= fit.spec.threshold, "slope {} above {}", fit.fit.slope, fit.spec.threshold);
    assert_eq!(r.refit().unwrap(), r.fits);
}

#[test]
fn divergence_solver_stays_within_its_envelope() {
    let base = ApproxParams::with_defaults(2.0, 1.0).unwrap();
    let s = SolverSettings { monitor_stride: 1, ..SolverSettings::default() };
    let r = run_divergence_solver(&base, 2.0, &[0.0, 0.05], &s).unwrap();
    assert_eq!(r.points.len(), 8);
    assert_eq!(r.checks.len(), 4);
    assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.checks);
    let solver_t0 = r.points.iter().find(|p| p.series == "solver" && p.t == 0.0).unwrap().value;
    assert!(solver_t0 > 0.0);
}
