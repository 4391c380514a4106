//! Run configuration: flags, an optional `key = value` file, and defaults.
//! Precedence is flags, then the file, then the per-experiment defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kpi_core::bump::ApproxParams;
use kpi_core::experiments::{AuditConfig, SolverSettings, DEFAULT_MEMORY_BUDGET};
use thiserror::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KPI_LAB_OUT";
pub const DEFAULT_OUT_DIR: &str = "results";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Usage(String),
    #[error("parameter constraint violated: {0}")]
    Constraint(String),
    #[error("config file {path}: {msg}")]
    File { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Experiment {
    /// ‖G(t)‖ over λ, with the per-term cancellation ledger.
    ResidualScan,
    /// Residual slopes with the ω pairing removed and with the KP-II sign.
    CancellationControls,
    /// ‖∂x⁻¹∂y u_ap‖ and ‖∂x⁻²∂y² u_ap‖ over λ.
    NonlocalEstimates,
    /// ‖u_{ω,λ}(0) − u_{ω′,λ}(0)‖_X over λ.
    InitialCloseness,
    /// X and Z norms and the F bound of u_ap over λ.
    InitialNorms,
    /// ‖∂x(u_ap,1 − u_ap,−1)(t)‖ against its predicted size; a single λ
    /// runs the solver comparison instead.
    Divergence,
    /// Difference runs u − u_ap over λ.
    Gronwall,
    /// Anisotropic Sobolev ratios over seeded random fields.
    SobolevAudit,
    /// Solve from u_ap(0) and write diagnostics and the final field.
    Solve,
    /// Conservation drifts from u_ap(0).
    Conserve,
    /// Order of the time stepper from dt halving.
    SelfConvergence,
    /// Oscillatory moments of ψ_λ.
    Moments,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::ResidualScan => "residual-scan",
            Experiment::CancellationControls => "cancellation-controls",
            Experiment::NonlocalEstimates => "nonlocal-estimates",
            Experiment::InitialCloseness => "initial-closeness",
            Experiment::InitialNorms => "initial-norms",
            Experiment::Divergence => "divergence",
            Experiment::Gronwall => "gronwall",
            Experiment::SobolevAudit => "sobolev-audit",
            Experiment::Solve => "solve",
            Experiment::Conserve => "conserve",
            Experiment::SelfConvergence => "self-convergence",
            Experiment::Moments => "moments",
        }
    }
}

/// Options shared by every subcommand. Unset options fall back to the
/// config file, then to defaults.
#[derive(Debug, Clone, Default, Args, PartialEq)]
pub struct Opts {
    /// `key = value` file; keys are the long option names.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Sets β = 2α = 4/3 − ε.
    #[arg(long, global = true, allow_hyphen_values = true, conflicts_with_all = ["alpha", "beta"])]
    pub epsilon: Option<f64>,
    /// Comma-separated λ values.
    #[arg(long = "lambda", global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambdas: Option<Vec<f64>>,
    /// The ω pair; solve and conserve use the first entry.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub omega: Option<Vec<f64>>,
    /// Comma-separated sample times.
    #[arg(long = "t", global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub t_samples: Option<Vec<f64>>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub t_end: Option<f64>,
    /// Fixed time step; the step policy applies otherwise.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub nx: Option<usize>,
    #[arg(long, global = true)]
    pub ny: Option<usize>,
    #[arg(long, global = true)]
    pub dealias: Option<bool>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Largest solver footprint in GiB.
    #[arg(long, global = true)]
    pub memory_gib: Option<f64>,
    /// Slope tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub draws: Option<usize>,
    /// Grid sizes of the Sobolev audit.
    #[arg(long, global = true, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
    /// Phases γ of the moment check.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub gamma: Option<Vec<f64>>,
}

impl Opts {
    /// Fill every unset option from `other`.
    fn or(self, other: Opts) -> Opts {
        Opts {
            config: self.config.or(other.config),
            alpha: self.alpha.or(other.alpha),
            beta: self.beta.or(other.beta),
            epsilon: self.epsilon.or(other.epsilon),
            lambdas: self.lambdas.or(other.lambdas),
            omega: self.omega.or(other.omega),
            t_samples: self.t_samples.or(other.t_samples),
            t_end: self.t_end.or(other.t_end),
            dt: self.dt.or(other.dt),
            nx: self.nx.or(other.nx),
            ny: self.ny.or(other.ny),
            dealias: self.dealias.or(other.dealias),
            stride: self.stride.or(other.stride),
            memory_gib: self.memory_gib.or(other.memory_gib),
            tol: self.tol.or(other.tol),
            out: self.out.or(other.out),
            seed: self.seed.or(other.seed),
            workers: self.workers.or(other.workers),
            draws: self.draws.or(other.draws),
            resolutions: self.resolutions.or(other.resolutions),
            gamma: self.gamma.or(other.gamma),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kpi-lab", version, about = "Scaling experiments for the KP-I wave-packet construction")]
pub struct Cli {
    #[command(subcommand)]
    pub experiment: Experiment,
    #[command(flatten)]
    pub opts: Opts,
}

/// A validated configuration with every default filled.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    /// Exponents and ω = first of the pair, at the first λ.
    pub params: ApproxParams,
    pub lambdas: Vec<f64>,
    pub omega_pair: (f64, f64),
    pub t_samples: Vec<f64>,
    pub solver: SolverSettings,
    pub tol: Option<f64>,
    pub out_dir: PathBuf,
    pub audit: AuditConfig,
    pub gammas: Vec<f64>,
    pub workers: usize,
}

/// Parse the `key = value` format. Blank lines and `#` comments are skipped.
pub fn parse_file(path: &Path, experiment: Experiment) -> Result<Opts, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File { path: path.into(), msg: e.to_string() })?;
    let mut args = vec!["kpi-lab".to_string(), experiment.name().to_string()];
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::File { path: path.into(), msg: format!("line {}: expected key = value", k + 1) });
        };
        let key = key.trim();
        if key == "config" {
            return Err(ConfigError::File { path: path.into(), msg: format!("line {}: nested config files are not supported", k + 1) });
        }
        args.push(format!("--{key}"));
        args.push(value.trim().to_string());
    }
    let cli = Cli::try_parse_from(&args).map_err(|e| ConfigError::File { path: path.into(), msg: e.kind().to_string() + ": " + &first_line(&e.to_string()) })?;
    Ok(cli.opts)
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim_start_matches("error: ").to_string()
}

fn default_lambdas(e: Experiment) -> Vec<f64> {
    match e {
        Experiment::Gronwall => vec![3.0, 4.0, 6.0, 8.0],
        Experiment::Solve | Experiment::Conserve | Experiment::SelfConvergence => vec![4.0],
        Experiment::Moments => vec![2.0, 4.0, 8.0, 16.0, 32.0],
        Experiment::Divergence => vec![32.0, 64.0, 128.0, 256.0],
        _ => vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0],
    }
}

fn default_t(e: Experiment) -> Vec<f64> {
    match e {
        Experiment::Divergence => vec![0.0, 0.25, 0.5, 1.0],
        _ => vec![0.0, 0.5, 1.0],
    }
}

/// Combine flags with the config file they name and fill defaults.
pub fn resolve(cli: Cli) -> Result<RunConfig, ConfigError> {
    let e = cli.experiment;
    let opts = match &cli.opts.config {
        Some(path) => {
            let mut file = parse_file(path, e)?;
            // The exponents are one setting: flags given either way replace the file's scheme.
            if cli.opts.epsilon.is_some() {
                (file.alpha, file.beta) = (None, None);
            }
            if cli.opts.alpha.is_some() || cli.opts.beta.is_some() {
                file.epsilon = None;
            }
            cli.opts.clone().or(file)
        }
        None => cli.opts,
    };
    let constraint = |msg: String| ConfigError::Constraint(msg);
    let lambdas = opts.lambdas.unwrap_or_else(|| default_lambdas(e));
    if lambdas.is_empty() {
        return Err(ConfigError::Usage("--lambda needs at least one value".into()));
    }
    let omega_pair = match opts.omega.as_deref() {
        None => (1.0, -1.0),
        Some([a]) => (*a, -*a),
        Some([a, b]) => (*a, *b),
        Some(_) => return Err(ConfigError::Usage("--omega takes one or two values".into())),
    };
    let params = match (opts.epsilon, opts.alpha, opts.beta) {
        (Some(eps), _, _) => ApproxParams::from_epsilon(lambdas[0], omega_pair.0, eps),
        (None, Some(a), Some(b)) => ApproxParams::new(lambdas[0], omega_pair.0, a, b),
        (None, Some(a), None) => ApproxParams::new(lambdas[0], omega_pair.0, a, 2.0 * a),
        (None, None, Some(b)) => ApproxParams::new(lambdas[0], omega_pair.0, b / 2.0, b),
        (None, None, None) => ApproxParams::with_defaults(lambdas[0], omega_pair.0),
    }
    .map_err(|err| constraint(err.to_string().trim_start_matches("parameter constraint violated: ").to_string()))?;
    for &l in &lambdas {
        params.with_lambda(l).validate().map_err(|err| constraint(err.to_string().trim_start_matches("parameter constraint violated: ").to_string()))?;
    }
    for &w in [omega_pair.0, omega_pair.1].iter() {
        params.with_omega(w).validate().map_err(|err| constraint(err.to_string().trim_start_matches("parameter constraint violated: ").to_string()))?;
    }
    let resolution = match (opts.nx, opts.ny) {
        (None, None) => None,
        (Some(nx), Some(ny)) => Some((nx, ny)),
        _ => return Err(ConfigError::Usage("--nx and --ny must be given together".into())),
    };
    let defaults = SolverSettings::default();
    let memory_budget = match opts.memory_gib {
        Some(g) if g > 0.0 => (g * (1u64 << 30) as f64) as u64,
        Some(g) => return Err(ConfigError::Usage(format!("--memory-gib must be positive, got {g}"))),
        None => DEFAULT_MEMORY_BUDGET,
    };
    let solver = SolverSettings {
        t_end: opts.t_end.unwrap_or(defaults.t_end),
        dt: opts.dt,
        dealias: opts.dealias.unwrap_or(defaults.dealias),
        monitor_stride: opts.stride.unwrap_or(defaults.monitor_stride),
        memory_budget,
        resolution,
    };
    if solver.monitor_stride == 0 {
        return Err(ConfigError::Usage("--stride must be positive".into()));
    }
    let workers = opts.workers.unwrap_or(1).max(1);
    let audit_defaults = AuditConfig::default();
    let audit = AuditConfig {
        draws: opts.draws.unwrap_or(audit_defaults.draws),
        seed: opts.seed.unwrap_or(audit_defaults.seed),
        resolutions: opts.resolutions.unwrap_or(audit_defaults.resolutions),
        workers,
        ..audit_defaults
    };
    let out_dir = opts
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(RunConfig {
        experiment: e,
        params,
        lambdas,
        omega_pair,
        t_samples: opts.t_samples.unwrap_or_else(|| default_t(e)),
        solver,
        tol: opts.tol,
        out_dir,
        audit,
        gammas: opts.gamma.unwrap_or_else(|| vec![0.0, std::f64::consts::FRAC_PI_3, 1.0]),
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig, ConfigError> {
        let mut v = vec!["kpi-lab"];
        v.extend_from_slice(args);
        resolve(Cli::try_parse_from(v).map_err(|e| ConfigError::Usage(e.to_string()))?)
    }

    #[test]
    fn bare_command_gets_defaults() {
        let c = parse(&["residual-scan", "--out", "x"]).unwrap();
        assert_eq!(c.lambdas, vec![8.0, 16.0, 32.0, 64.0, 128.0, 256.0]);
        assert_eq!(c.t_samples, vec![0.0, 0.5, 1.0]);
        assert_eq!(c.omega_pair, (1.0, -1.0));
        assert!((c.params.beta - (4.0 / 3.0 - 0.1)).abs() < 1e-15);
        assert_eq!(c.params.beta, 2.0 * c.params.alpha);
        assert_eq!(c.solver, SolverSettings::default());
    }

    #[test]
    fn constraint_names_the_inequality() {
        let err = parse(&["residual-scan", "--alpha", "0.4", "--beta", "1.2"]).unwrap_err();
        assert!(matches!(&err, ConfigError::Constraint(m) if m.contains("1/2<α")), "{err}");
        let err = parse(&["residual-scan", "--alpha", "0.9", "--beta", "1.2"]).unwrap_err();
        assert!(err.to_string().contains("α+β<2"));
        let err = parse(&["gronwall", "--lambda", "0.5"]).unwrap_err();
        assert!(err.to_string().contains("λ≥1"));
    }

    #[test]
    fn file_values_yield_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# sweep\nlambda = 8,16,32,64\nepsilon = 0.3\nt = 0.5\nworkers=2\n").unwrap();
        let p = path.to_str().unwrap();
        let c = parse(&["residual-scan", "--config", p]).unwrap();
        assert_eq!(c.lambdas, vec![8.0, 16.0, 32.0, 64.0]);
        assert_eq!(c.t_samples, vec![0.5]);
        assert_eq!(c.workers, 2);
        assert!((c.params.beta - (4.0 / 3.0 - 0.3)).abs() < 1e-15);
        let c = parse(&["residual-scan", "--config", p, "--t", "1", "--lambda", "16,32,64,128"]).unwrap();
        assert_eq!(c.t_samples, vec![1.0]);
        assert_eq!(c.lambdas, vec![16.0, 32.0, 64.0, 128.0]);
        assert_eq!(c.workers, 2);
        let c = parse(&["residual-scan", "--config", p, "--alpha", "0.6", "--beta", "1.2"]).unwrap();
        assert_eq!((c.params.alpha, c.params.beta), (0.6, 1.2));
    }

    #[test]
    fn bad_file_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "lambda 8\n").unwrap();
        let err = parse(&["moments", "--config", path.to_str().unwrap()]).unwrap_err();
        assert!(err.to_string().contains("line 1"));
        std::fs::write(&path, "colour = red\n").unwrap();
        assert!(matches!(parse(&["moments", "--config", path.to_str().unwrap()]), Err(ConfigError::File { .. })));
    }

    #[test]
    fn single_omega_is_mirrored() {
        let c = parse(&["initial-closeness", "--omega", "0.5"]).unwrap();
        assert_eq!(c.omega_pair, (0.5, -0.5));
        assert!(parse(&["initial-closeness", "--omega", "2,1"]).unwrap_err().to_string().contains("|ω|≤1"));
    }

    #[test]
    fn grid_override_needs_both_sizes() {
        assert!(matches!(parse(&["solve", "--nx", "64"]), Err(ConfigError::Usage(_))));
        let c = parse(&["solve", "--nx", "64", "--ny", "128"]).unwrap();
        assert_eq!(c.solver.resolution, Some((64, 128)));
    }
}
