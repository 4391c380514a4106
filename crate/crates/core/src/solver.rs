//! Pseudospectral KP-I integration with an integrating-factor RK4 stepper.
//!
//! In Fourier variables the equation reads `û_t = i p(ξ, η) û − ½ iξ (u²)^`.
//! The linear factor `exp(i p dt)` is applied exactly; the quadratic term is
//! evaluated pseudospectrally and projected with the 2/3 rule.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproxError, ApproxSolution, Variant};
use crate::bump::ApproxParams;
use crate::functionals::{Diagnostics, FunctionalError};
use crate::spectral::{
    dx, dx_inv, dy, plan_for, retained, symbol_with_sign, Field2D, Grid1D, Grid2D, NonlocalSign, SpectralError, SpectralField,
    MEAN_TOL, remove_x_mean,
};

/// Blow-up threshold relative to the initial maximum.
pub const BLOWUP_FACTOR: f64 = 1e6;
/// Hard cap of the time-step policy.
pub const DT_CAP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("instability at t = {t}: max |u| = {max:e} exceeds {BLOWUP_FACTOR:e} × initial {initial:e}")]
    Instability { t: f64, max: f64, initial: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid: Grid2D,
    pub dt: f64,
    pub t_end: f64,
    pub dealias: bool,
    pub monitor_stride: usize,
    pub nonlinear: bool,
    pub sign: NonlocalSign,
    /// Keep every monitored field; otherwise only the first and last.
    pub keep_snapshots: bool,
}

impl SolverConfig {
    pub fn new(grid: Grid2D, dt: f64, t_end: f64) -> Self {
        Self { grid, dt, t_end, dealias: true, monitor_stride: 100, nonlinear: true, sign: NonlocalSign::KpOne, keep_snapshots: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SolverError::Config(format!("dt = {} must be positive; direction comes from t_end", self.dt)));
        }
        if !self.t_end.is_finite() {
            return Err(SolverError::Config("t_end must be finite".into()));
        }
        if self.monitor_stride == 0 {
            return Err(SolverError::Config("monitor_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Step count and signed step that land exactly on `t_end`.
    pub fn steps(&self) -> (usize, f64) {
        if self.t_end == 0.0 {
            return (0, 0.0);
        }
        let n = (self.t_end.abs() / self.dt).ceil().max(1.0) as usize;
        (n, self.t_end / n as f64)
    }
}

/// Grid satisfying `Δx ≤ 2π/(8λ)`, `Δy ≤ 2π/(8√3λ²)`, with 10% margins on
/// the support of `u_ap` plus the transport `2√3λ|t_end|` on the side the
/// packet travels.
pub fn policy_grid(p: &ApproxParams, t_end: f64) -> Result<Grid2D> {
    let u = ApproxSolution::new(p, 0.0, Variant::default())?;
    let ((x0, x1), (y0, y1)) = u.support_box();
    let (mx, my) = (0.1 * (x1 - x0), 0.1 * (y1 - y0));
    let travel = 2.0 * 3f64.sqrt() * p.lambda * t_end;
    // Packets at (λ, √3λ²) move in −y for forward time.
    let (ylo, yhi) = (y0 - my - travel.max(0.0), y1 + my + (-travel).max(0.0));
    let dxm = 2.0 * std::f64::consts::PI / (8.0 * p.lambda);
    let dym = 2.0 * std::f64::consts::PI / (8.0 * 3f64.sqrt() * p.lambda * p.lambda);
    let (lx, ly) = (x1 - x0 + 2.0 * mx, yhi - ylo);
    let nx = ((lx / dxm).ceil() as usize).max(8).next_power_of_two();
    let ny = ((ly / dym).ceil() as usize).max(8).next_power_of_two();
    Ok(Grid2D::new(Grid1D::new(nx, lx, x0 - mx)?, Grid1D::new(ny, ly, ylo)?))
}

/// `min(0.2 / (λ · max|u| · n_x/L_x), DT_CAP)`.
pub fn policy_dt(lambda: f64, max_u: f64, grid: &Grid2D) -> f64 {
    let adv = 0.2 / (lambda * max_u * grid.gx.n as f64 / grid.gx.length);
    if adv.is_finite() {
        adv.min(DT_CAP)
    } else {
        DT_CAP
    }
}

/// Precomputed multipliers for one signed step size.
pub struct Stepper {
    grid: Grid2D,
    dt: f64,
    half: Vec<Complex64>,
    nonlin: Vec<Complex64>,
    nonlinear: bool,
}

impl Stepper {
    pub fn new(cfg: &SolverConfig, dt: f64) -> Self {
        let g = cfg.grid;
        let probe = SpectralField::zeros(g);
        let (nx, ny) = (g.gx.n as i64, g.gy.n as i64);
        let mut half = Vec::with_capacity(probe.coeffs.len());
        let mut nonlin = Vec::with_capacity(probe.coeffs.len());
        for i in 0..probe.coeffs.len() {
            let (kx, ky) = probe.modes(i);
            let (xi, eta) = probe.frequencies(i);
            let nyquist = kx == nx / 2 || ky == -(ny / 2);
            if kx == 0 || nyquist {
                half.push(Complex64::new(0.0, 0.0));
                nonlin.push(Complex64::new(0.0, 0.0));
                continue;
            }
            half.push(Complex64::from_polar(1.0, 0.5 * dt * symbol_with_sign(xi, eta, cfg.sign)));
            let keep = !cfg.dealias || retained(&g, kx, ky);
            nonlin.push(if keep { Complex64::new(0.0, -0.5 * xi) } else { Complex64::new(0.0, 0.0) });
        }
        Self { grid: g, dt, half, nonlin, nonlinear: cfg.nonlinear }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `−½∂_x(u²)` in coefficients; also returns `max |u|`.
    fn rhs(&self, s: &[Complex64]) -> (Vec<Complex64>, f64) {
        if !self.nonlinear {
            return (vec![Complex64::new(0.0, 0.0); s.len()], f64::NAN);
        }
        let plan = plan_for(&self.grid);
        let mut vals = vec![0.0; self.grid.len()];
        plan.inverse(s, &mut vals);
        let max = if vals.iter().any(|v| v.is_nan()) { f64::NAN } else { vals.iter().fold(0.0f64, |m, v| m.max(v.abs())) };
        vals.iter_mut().for_each(|v| *v *= *v);
        let mut out = vec![Complex64::new(0.0, 0.0); s.len()];
        plan.forward(&vals, &mut out);
        out.iter_mut().zip(&self.nonlin).for_each(|(c, m)| *c *= m);
        (out, max)
    }

    /// One step in coefficient space; returns `max |u|` at the start of the step
    /// (NaN when the nonlinearity is off).
    pub fn advance(&self, s: &mut [Complex64]) -> f64 {
        let (h, e) = (self.dt, &self.half);
        let (k1, max) = self.rhs(s);
        let a: Vec<Complex64> = (0..s.len()).map(|i| e[i] * (s[i] + 0.5 * h * k1[i])).collect();
        let (k2, _) = self.rhs(&a);
        let b: Vec<Complex64> = (0..s.len()).map(|i| e[i] * s[i] + 0.5 * h * k2[i]).collect();
        let (k3, _) = self.rhs(&b);
        let c: Vec<Complex64> = (0..s.len()).map(|i| e[i] * (e[i] * s[i] + h * k3[i])).collect();
        let (k4, _) = self.rhs(&c);
        for i in 0..s.len() {
            let e2 = e[i] * e[i];
            s[i] = e2 * s[i] + h / 6.0 * (e2 * k1[i] + 2.0 * e[i] * (k2[i] + k3[i]) + k4[i]);
        }
        max
    }
}

/// One step of size `dt` (negative for backward time).
pub fn step(u: &Field2D, dt: f64) -> Result<Field2D> {
    let s = u.to_spectral();
    s.check_zero_x_mean(MEAN_TOL)?;
    let mut cfg = SolverConfig::new(u.grid, dt.abs().max(f64::MIN_POSITIVE), dt);
    cfg.dealias = true;
    let st = Stepper::new(&cfg, dt);
    let mut c = s.coeffs;
    st.advance(&mut c);
    Ok(SpectralField { grid: u.grid, coeffs: c }.to_real())
}

/// `−u_xxx + ∂_x⁻¹u_yy − uu_x` evaluated spectrally, without dealiasing.
pub fn kp_rhs(u: &Field2D) -> Result<Field2D> {
    let s = u.to_spectral();
    let lin = dx(&s, 3).scale(-1.0).add(&dx_inv(&dy(&s, 2), 1, MEAN_TOL)?)?.to_real();
    let ux = dx(&s, 1).to_real();
    let adv = u.mul(&ux)?;
    Ok(lin.sub(&adv)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<(f64, Field2D)>,
    pub diagnostics: Vec<Diagnostics>,
}

impl Trajectory {
    pub fn last(&self) -> &(f64, Field2D) {
        self.snapshots.last().expect("trajectory holds the initial data")
    }
}

/// Integrate, calling `monitor(t, u)` at t = 0, every `monitor_stride` steps
/// and at the final time.
pub fn integrate<M: FnMut(f64, &Field2D) -> Result<()>>(u0: &Field2D, cfg: &SolverConfig, mut monitor: M) -> Result<Field2D> {
    cfg.validate()?;
    if u0.grid != cfg.grid {
        return Err(SolverError::Config("initial data grid differs from solver grid".into()));
    }
    let s0 = u0.to_spectral();
    s0.check_zero_x_mean(MEAN_TOL)?;
    let initial = u0.max_abs();
    let (n, dt) = cfg.steps();
    let st = Stepper::new(cfg, dt);
    let mut c = s0.coeffs;
    monitor(0.0, u0)?;
    let mut current = u0.clone();
    for k in 1..=n {
        let max = st.advance(&mut c);
        let t_prev = (k - 1) as f64 * dt;
        if max.is_nan() && cfg.nonlinear || max > BLOWUP_FACTOR * initial {
            return Err(SolverError::Instability { t: t_prev, max, initial });
        }
        if k % cfg.monitor_stride == 0 || k == n {
            current = SpectralField { grid: cfg.grid, coeffs: c.clone() }.to_real();
            let m = current.max_abs();
            if !m.is_finite() || m > BLOWUP_FACTOR * initial {
                return Err(SolverError::Instability { t: k as f64 * dt, max: m, initial });
            }
            let t = if k == n { cfg.t_end } else { k as f64 * dt };
            monitor(t, &current)?;
        }
    }
    Ok(current)
}

pub fn solve(u0: &Field2D, cfg: &SolverConfig) -> Result<Trajectory> {
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::new();
    let keep = cfg.keep_snapshots;
    let last = integrate(u0, cfg, |t, u| {
        diagnostics.push(Diagnostics::compute(u, t)?);
        if keep || snapshots.is_empty() {
            snapshots.push((t, u.clone()));
        }
        Ok(())
    })?;
    let t_last = diagnostics.last().map_or(0.0, |d| d.t);
    if snapshots.last().map_or(true, |(t, _)| *t != t_last) {
        snapshots.push((t_last, last));
    }
    Ok(Trajectory { snapshots, diagnostics })
}

/// One monitored time of a difference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub t: f64,
    pub v_l2: f64,
    pub dx_v_l2: f64,
    pub u_ap_l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceRun {
    pub v: Trajectory,
    pub rows: Vec<DifferenceRow>,
}

/// Integrate from `u_ap(0)` and compare with `u_ap(t)` at every monitored time.
pub fn difference_run(p: &ApproxParams, cfg: &SolverConfig) -> Result<DifferenceRun> {
    // The rendered data carries a tiny discrete x-mean from quadrature of the profiles.
    let (u0, _) = remove_x_mean(&ApproxSolution::new(p, 0.0, Variant::default())?.render(&cfg.grid)?);
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::new();
    let mut rows = Vec::new();
    integrate(&u0, cfg, |t, u| {
        let ap = ApproxSolution::new(p, t, Variant::default())?.render(&cfg.grid)?;
        let v = u.sub(&ap)?;
        let vs = v.to_spectral();
        rows.push(DifferenceRow { t, v_l2: vs.l2_norm(), dx_v_l2: dx(&vs, 1).l2_norm(), u_ap_l2: ap.to_spectral().l2_norm() });
        diagnostics.push(Diagnostics::compute(&v, t)?);
        if cfg.keep_snapshots || snapshots.is_empty() || Some(&t) == Some(&cfg.t_end) {
            snapshots.push((t, v));
        }
        Ok(())
    })?;
    Ok(DifferenceRun { v: Trajectory { snapshots, diagnostics }, rows })
}

/// Centroid of the quadratic energy density `½(u_x² + (∂_x⁻¹u_y)²)`.
pub fn energy_centroid(u: &Field2D) -> Result<(f64, f64)> {
    let s = u.to_spectral();
    let ux = dx(&s, 1).to_real();
    let w = dx_inv(&dy(&s, 1), 1, MEAN_TOL)?.to_real();
    let g = u.grid;
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for iy in 0..g.gy.n {
        let y = g.gy.coord(iy);
        for ix in 0..g.gx.n {
            let d = ux.at(ix, iy).powi(2) + w.at(ix, iy).powi(2);
            m += d;
            mx += d * g.gx.coord(ix);
            my += d * y;
        }
    }
    Ok((mx / m, my / m))
}

/// Write `n_x, n_y` (u64) and `L_x, L_y, t` (f64), little-endian, then the
/// samples row-major as f64.
pub fn write_snapshot<W: Write>(mut w: W, u: &Field2D, t: f64) -> Result<()> {
    let g = u.grid;
    w.write_all(&(g.gx.n as u64).to_le_bytes())?;
    w.write_all(&(g.gy.n as u64).to_le_bytes())?;
    for v in [g.gx.length, g.gy.length, t] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * u.values.len());
    for v in &u.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Inverse of [`write_snapshot`]. The layout stores no origin, so the grid
/// starts at zero.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<(Field2D, f64)> {
    let mut b = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut b)?;
        Ok(b)
    };
    let nx = u64::from_le_bytes(next(&mut r)?) as usize;
    let ny = u64::from_le_bytes(next(&mut r)?) as usize;
    let lx = f64::from_le_bytes(next(&mut r)?);
    let ly = f64::from_le_bytes(next(&mut r)?);
    let t = f64::from_le_bytes(next(&mut r)?);
    let grid = Grid2D::new(Grid1D::new(nx, lx, 0.0)?, Grid1D::new(ny, ly, 0.0)?);
    let mut raw = vec![0u8; 8 * nx * ny];
    r.read_exact(&mut raw)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((Field2D::new(grid, values)?, t))
}

pub fn dump_snapshot(path: &Path, u: &Field2D, t: f64) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_snapshot(std::io::BufWriter::new(f), u, t)
}
