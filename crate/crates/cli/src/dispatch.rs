use std::io::Write;
use std::path::Path;

use kpi_core::approx::{cancellation_ledger, ledger_csv, ApproxError};
use kpi_core::bump::BumpError;
use kpi_core::experiments::{
    run_cancellation_controls, run_conservation, run_divergence, run_divergence_solver, run_gronwall, run_initial_closeness,
    run_initial_norms, run_moments, run_nonlocal_estimates, run_residual_scan, run_self_convergence, run_sobolev_audit,
    solve_from_u_ap, write_result, ExperimentError, ScanResult, SweepConfig, Verdict, CLOSENESS_TOL, SEPARABLE_TOL, SOLVER_TOL,
};
use kpi_core::functionals::Diagnostics;
use kpi_core::solver::{dump_snapshot, SolverError};

use crate::config::{Experiment, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INSTABILITY: i32 = 2;
pub const EXIT_CONSTRAINT: i32 = 3;
pub const EXIT_INCONCLUSIVE: i32 = 4;
/// The run needs more memory than the budget allows.
pub const EXIT_INFEASIBLE: i32 = 5;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_IO: i32 = 74;
pub const EXIT_INTERNAL: i32 = 70;

pub fn verdict_code(v: Verdict) -> i32 {
    match v {
        Verdict::Pass => EXIT_OK,
        Verdict::Fail => EXIT_FAIL,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

pub fn error_code(e: &ExperimentError) -> i32 {
    match e {
        ExperimentError::Solver(SolverError::Instability { .. }) => EXIT_INSTABILITY,
        ExperimentError::Params(BumpError::Constraint(_))
        | ExperimentError::Approx(ApproxError::Params(BumpError::Constraint(_)))
        | ExperimentError::Solver(SolverError::Approx(ApproxError::Params(BumpError::Constraint(_)))) => EXIT_CONSTRAINT,
        ExperimentError::Infeasible(_) => EXIT_INFEASIBLE,
        ExperimentError::Input(_) | ExperimentError::Fit(_) | ExperimentError::Solver(SolverError::Config(_)) => EXIT_USAGE,
        ExperimentError::Io(_) | ExperimentError::Solver(SolverError::Io(_)) => EXIT_IO,
        _ => EXIT_INTERNAL,
    }
}

fn single_lambda(cfg: &RunConfig) -> Result<f64, ExperimentError> {
    match cfg.lambdas.as_slice() {
        [l] => Ok(*l),
        _ => Err(ExperimentError::Input(format!("{} takes a single --lambda", cfg.experiment.name()))),
    }
}

fn sweep(cfg: &RunConfig) -> SweepConfig {
    SweepConfig {
        base: cfg.params,
        lambdas: cfg.lambdas.clone(),
        t_samples: cfg.t_samples.clone(),
        tol: cfg.tol.unwrap_or(SEPARABLE_TOL),
        workers: cfg.workers,
    }
}

fn report(out: &mut dyn Write, dir: &Path, r: &ScanResult) -> Result<Verdict, ExperimentError> {
    let csv = write_result(dir, r)?;
    for line in r.verdict_lines() {
        writeln!(out, "{line}")?;
    }
    for note in &r.notes {
        writeln!(out, "{}: {note}", r.id)?;
    }
    writeln!(out, "{} {} -> {}", r.id, r.verdict.label(), csv.display())?;
    Ok(r.verdict)
}

/// Run the configured experiment, write its outputs and print its verdicts.
pub fn dispatch(cfg: &RunConfig, out: &mut dyn Write) -> Result<Verdict, ExperimentError> {
    let dir = cfg.out_dir.as_path();
    let p = &cfg.params;
    let result = match cfg.experiment {
        Experiment::ResidualScan => {
            let r = run_residual_scan(&sweep(cfg))?;
            let t = cfg.t_samples[0];
            let (rows, _) = cancellation_ledger(p, &cfg.lambdas, t, cfg.tol.unwrap_or(SEPARABLE_TOL))?;
            std::fs::create_dir_all(dir)?;
            let path = dir.join("residual-ledger.csv");
            std::fs::write(&path, ledger_csv(&rows))?;
            writeln!(out, "residual-scan: cancellation ledger at t = {t} -> {}", path.display())?;
            r
        }
        Experiment::CancellationControls => run_cancellation_controls(&sweep(cfg))?,
        Experiment::NonlocalEstimates => run_nonlocal_estimates(&sweep(cfg))?,
        Experiment::InitialNorms => run_initial_norms(&sweep(cfg))?,
        Experiment::InitialCloseness => {
            run_initial_closeness(p, cfg.omega_pair, &cfg.lambdas, cfg.tol.unwrap_or(CLOSENESS_TOL), cfg.workers)?
        }
        Experiment::Divergence if cfg.lambdas.len() == 1 => {
            let r = run_divergence_solver(p, cfg.lambdas[0], &cfg.t_samples, &cfg.solver)?;
            let mut csv = String::from("t,solver,rendered,separable,envelope\n");
            for t in &cfg.t_samples {
                let at = |s: &str| r.points.iter().find(|q| q.series == s && q.t == *t).map_or(f64::NAN, |q| q.value);
                csv.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n", t, at("solver"), at("rendered"), at("separable"), at("envelope")));
            }
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("divergence-comparison.csv"), csv)?;
            r
        }
        Experiment::Divergence => run_divergence(&sweep(cfg))?,
        Experiment::Gronwall => run_gronwall(p, &cfg.lambdas, &cfg.solver, cfg.tol.unwrap_or(SOLVER_TOL))?,
        Experiment::SobolevAudit => run_sobolev_audit(&cfg.audit)?,
        Experiment::Conserve => run_conservation(&p.with_lambda(single_lambda(cfg)?), &cfg.solver)?,
        Experiment::SelfConvergence => {
            run_self_convergence(&p.with_lambda(single_lambda(cfg)?), &cfg.solver)?
        }
        Experiment::Moments => run_moments(p, &cfg.lambdas, &cfg.gammas, cfg.workers)?,
        Experiment::Solve => {
            let (scfg, tr) = solve_from_u_ap(&p.with_lambda(single_lambda(cfg)?), &cfg.solver)?;
            std::fs::create_dir_all(dir)?;
            let mut csv = Diagnostics::csv_header() + "\n";
            for d in &tr.diagnostics {
                csv.push_str(&d.csv_row());
                csv.push('\n');
            }
            let diag = dir.join("solve-diagnostics.csv");
            std::fs::write(&diag, csv)?;
            let (t, last) = tr.last();
            let snap = dir.join("solve-final.bin");
            dump_snapshot(&snap, last, *t)?;
            writeln!(
                out,
                "solve: grid {}×{}, dt {:.3e}, t = {t} -> {}, {}",
                scfg.grid.gx.n,
                scfg.grid.gy.n,
                scfg.dt,
                diag.display(),
                snap.display()
            )?;
            return Ok(Verdict::Pass);
        }
    };
    report(out, dir, &result)
}
