//! Periodic grids, real-to-spectral transforms and the Fourier-side operators
//! of the KP-I linear part.
//!
//! Spectral coefficients are stored as a half spectrum: `ny` rows of
//! `nx/2 + 1` entries, normalized so that a real field is
//! `Σ c(kx, ky) e^{i(ξx + ηy)}` summed over the full (Hermitian) spectrum.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("symbol evaluated at zero x-frequency")]
    ZeroXFrequency,
    #[error("non-integrable input: x-mean of row ky={ky} is {ratio:e} of the largest coefficient")]
    NonIntegrable { ky: i64, ratio: f64 },
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Default relative tolerance of the zero-x-mean gate.
pub const MEAN_TOL: f64 = 1e-10;

/// `p(ξ, η) = ξ³ + η²/ξ`.
pub fn kp_symbol(xi: f64, eta: f64) -> Result<f64> {
    if xi == 0.0 {
        return Err(SpectralError::ZeroXFrequency);
    }
    Ok(xi * xi * xi + eta * eta / xi)
}

/// `∇p = (3ξ² − η²/ξ², 2η/ξ)`.
pub fn kp_group_velocity(xi: f64, eta: f64) -> Result<(f64, f64)> {
    if xi == 0.0 {
        return Err(SpectralError::ZeroXFrequency);
    }
    let r = eta / xi;
    Ok((3.0 * xi * xi - r * r, 2.0 * r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub n: usize,
    pub length: f64,
    pub origin: f64,
}

impl Grid1D {
    pub fn new(n: usize, length: f64, origin: f64) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(SpectralError::InvalidGrid(format!("n = {n} must be a power of two ≥ 8")));
        }
        if !(length > 0.0 && length.is_finite() && origin.is_finite()) {
            return Err(SpectralError::InvalidGrid(format!("length = {length} must be positive")));
        }
        Ok(Self { n, length, origin })
    }

    /// Grid centered on `center` with at least `length / max_spacing` points.
    pub fn covering(center: f64, length: f64, max_spacing: f64) -> Result<Self> {
        let n = ((length / max_spacing).ceil() as usize).max(8).next_power_of_two();
        Self::new(n, length, center - 0.5 * length)
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.spacing()
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i)).collect()
    }

    pub fn end(&self) -> f64 {
        self.origin + self.length
    }

    /// Signed mode number of storage index `j` in `[-n/2, n/2)`.
    pub fn mode(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    pub fn frequency(&self, mode: i64) -> f64 {
        2.0 * PI * mode as f64 / self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub gx: Grid1D,
    pub gy: Grid1D,
}

impl Grid2D {
    pub fn new(gx: Grid1D, gy: Grid1D) -> Self {
        Self { gx, gy }
    }

    pub fn len(&self) -> usize {
        self.gx.n * self.gy.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.gx.spacing() * self.gy.spacing()
    }

    pub fn half_nx(&self) -> usize {
        self.gx.n / 2 + 1
    }

    pub fn spectral_len(&self) -> usize {
        self.half_nx() * self.gy.n
    }
}

/// Real samples, row-major with y outer and x inner.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SpectralError::GridMismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: Grid2D, f: F) -> Self {
        let xs = grid.gx.coords();
        let mut values = Vec::with_capacity(grid.len());
        for iy in 0..grid.gy.n {
            let y = grid.gy.coord(iy);
            values.extend(xs.iter().map(|&x| f(x, y)));
        }
        Self { grid, values }
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.gx.n + ix]
    }

    /// `(∫u²)^{1/2}` by the trapezoid (spectrally exact) rule.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.grid.cell_area()).powf(1.0 / p)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn sub(&self, other: &Field2D) -> Result<Self> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn add(&self, other: &Field2D) -> Result<Self> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn mul(&self, other: &Field2D) -> Result<Self> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn to_spectral(&self) -> SpectralField {
        let plan = plan_for(&self.grid);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); self.grid.spectral_len()];
        plan.forward(&self.values, &mut coeffs);
        SpectralField { grid: self.grid, coeffs }
    }
}

/// Half-spectrum coefficients; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub grid: Grid2D,
    pub coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, coeffs: vec![Complex64::new(0.0, 0.0); grid.spectral_len()] }
    }

    pub fn to_real(&self) -> Field2D {
        let plan = plan_for(&self.grid);
        let mut values = vec![0.0; self.grid.len()];
        plan.inverse(&self.coeffs, &mut values);
        Field2D { grid: self.grid, values }
    }

    /// `(kx, ky)` mode numbers of storage index `i`.
    pub fn modes(&self, i: usize) -> (i64, i64) {
        let h = self.grid.half_nx();
        ((i % h) as i64, self.grid.gy.mode(i / h))
    }

    /// Physical frequencies `(ξ, η)` of storage index `i`.
    pub fn frequencies(&self, i: usize) -> (f64, f64) {
        let (kx, ky) = self.modes(i);
        (self.grid.gx.frequency(kx), self.grid.gy.frequency(ky))
    }

    /// Multiply every coefficient by `m(ξ, η, kx, ky)`.
    pub fn map<M: Fn(f64, f64, i64, i64) -> Complex64>(&self, m: M) -> Self {
        let h = self.grid.half_nx();
        let (gx, gy) = (self.grid.gx, self.grid.gy);
        let mut coeffs = self.coeffs.clone();
        for (row, chunk) in coeffs.chunks_mut(h).enumerate() {
            let ky = gy.mode(row);
            let eta = gy.frequency(ky);
            for (kx, c) in chunk.iter_mut().enumerate() {
                let kx = kx as i64;
                *c *= m(gx.frequency(kx), eta, kx, ky);
            }
        }
        Self { grid: self.grid, coeffs }
    }

    fn is_nyquist(&self, kx: i64, ky: i64) -> bool {
        kx == (self.grid.gx.n / 2) as i64 || ky == -((self.grid.gy.n / 2) as i64)
    }

    /// `(∫|u|²)^{1/2}` from the coefficients.
    pub fn l2_norm(&self) -> f64 {
        let h = self.grid.half_nx();
        let nx = self.grid.gx.n;
        let s: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let kx = i % h;
                let w = if kx == 0 || kx == nx / 2 { 1.0 } else { 2.0 };
                w * c.norm_sqr()
            })
            .sum();
        (s * self.grid.gx.length * self.grid.gy.length).sqrt()
    }

    pub fn max_modulus(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// Fails when some `ξ = 0` coefficient exceeds `mean_tol` relative to
    /// the largest coefficient.
    pub fn check_zero_x_mean(&self, mean_tol: f64) -> Result<()> {
        let peak = self.max_modulus();
        if peak == 0.0 {
            return Ok(());
        }
        let h = self.grid.half_nx();
        for row in 0..self.grid.gy.n {
            let ratio = self.coeffs[row * h].norm() / peak;
            if ratio > mean_tol {
                return Err(SpectralError::NonIntegrable { ky: self.grid.gy.mode(row), ratio });
            }
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { grid: self.grid, coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn add(&self, other: &SpectralField) -> Result<Self> {
        if self.grid != other.grid {
            return Err(SpectralError::GridMismatch);
        }
        Ok(Self { grid: self.grid, coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect() })
    }
}

fn i_pow(order: i32) -> Complex64 {
    match order.rem_euclid(4) {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Drop the `ξ = 0` column; returns the projected field and the L² norm of
/// what was removed.
pub fn remove_x_mean(u: &Field2D) -> (Field2D, f64) {
    let s = u.to_spectral();
    let h = s.grid.half_nx();
    let mut mean = SpectralField::zeros(s.grid);
    let mut rest = s;
    for row in 0..rest.grid.gy.n {
        mean.coeffs[row * h] = rest.coeffs[row * h];
        rest.coeffs[row * h] = Complex64::new(0.0, 0.0);
    }
    (rest.to_real(), mean.l2_norm())
}

/// `∂_x^order`.
pub fn dx(f: &SpectralField, order: u32) -> SpectralField {
    let ip = i_pow(order as i32);
    f.map(|xi, _, kx, ky| if f.is_nyquist(kx, ky) { Complex64::new(0.0, 0.0) } else { ip * xi.powi(order as i32) })
}

/// `∂_x^{-order}`, gated on a numerically vanishing x-mean.
pub fn dx_inv(f: &SpectralField, order: u32, mean_tol: f64) -> Result<SpectralField> {
    f.check_zero_x_mean(mean_tol)?;
    let ip = i_pow(-(order as i32));
    Ok(f.map(|xi, _, kx, ky| {
        if kx == 0 || f.is_nyquist(kx, ky) {
            Complex64::new(0.0, 0.0)
        } else {
            ip * xi.powi(-(order as i32))
        }
    }))
}

/// `∂_y^order`.
pub fn dy(f: &SpectralField, order: u32) -> SpectralField {
    let ip = i_pow(order as i32);
    f.map(|_, eta, kx, ky| if f.is_nyquist(kx, ky) { Complex64::new(0.0, 0.0) } else { ip * eta.powi(order as i32) })
}

/// `|D_x|^s` with the `ξ = 0` column zeroed.
pub fn abs_dx_pow(f: &SpectralField, s: f64) -> SpectralField {
    f.map(|xi, _, kx, ky| {
        if kx == 0 || f.is_nyquist(kx, ky) {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(xi.abs().powf(s), 0.0)
        }
    })
}

/// Sign of the nonlocal term: KP-I, or the flipped KP-II sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NonlocalSign {
    #[default]
    KpOne,
    KpTwo,
}

impl NonlocalSign {
    /// Factor multiplying `η²/ξ` in the symbol.
    pub fn factor(self) -> f64 {
        match self {
            NonlocalSign::KpOne => 1.0,
            NonlocalSign::KpTwo => -1.0,
        }
    }
}

/// Symbol with the chosen nonlocal sign; `ξ = 0` yields zero.
pub fn symbol_with_sign(xi: f64, eta: f64, sign: NonlocalSign) -> f64 {
    if xi == 0.0 {
        0.0
    } else {
        xi * xi * xi + sign.factor() * eta * eta / xi
    }
}

/// Flow of `∂_t + ∂_x³ − ∂_x⁻¹∂_y²` for time `t`: each mode is multiplied by
/// `exp(i t p(ξ, η))`.
pub fn linear_propagator(f: &SpectralField, t: f64) -> Result<SpectralField> {
    f.check_zero_x_mean(MEAN_TOL)?;
    Ok(f.map(|xi, eta, kx, ky| {
        if kx == 0 || f.is_nyquist(kx, ky) {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(1.0, t * symbol_with_sign(xi, eta, NonlocalSign::KpOne))
        }
    }))
}

/// 2/3-rule projection.
pub fn dealias(f: &SpectralField) -> SpectralField {
    let (nx, ny) = (f.grid.gx.n as i64, f.grid.gy.n as i64);
    f.map(|_, _, kx, ky| {
        if 3 * kx > nx || 3 * ky.abs() > ny {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(1.0, 0.0)
        }
    })
}

/// Whether `(kx, ky)` survives the 2/3 rule.
pub fn retained(grid: &Grid2D, kx: i64, ky: i64) -> bool {
    3 * kx.abs() <= grid.gx.n as i64 && 3 * ky.abs() <= grid.gy.n as i64
}

/// Real-to-half-spectrum transform plan for one grid shape.
pub struct Fft2 {
    nx: usize,
    ny: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self { nx, ny, r2c: rp.plan_fft_forward(nx), c2r: rp.plan_fft_inverse(nx), fwd: cp.plan_fft_forward(ny), inv: cp.plan_fft_inverse(ny) }
    }

    fn columns<F: FnMut(&mut [Complex64])>(&self, out: &mut [Complex64], mut f: F) {
        let h = self.nx / 2 + 1;
        let mut col = vec![Complex64::new(0.0, 0.0); self.ny];
        for kx in 0..h {
            for (j, c) in col.iter_mut().enumerate() {
                *c = out[j * h + kx];
            }
            f(&mut col);
            for (j, c) in col.iter().enumerate() {
                out[j * h + kx] = *c;
            }
        }
    }

    /// `out` receives normalized coefficients (forward DFT divided by `nx·ny`).
    pub fn forward(&self, values: &[f64], out: &mut [Complex64]) {
        let h = self.nx / 2 + 1;
        let mut row = vec![0.0; self.nx];
        let mut scratch = self.r2c.make_scratch_vec();
        for (j, chunk) in out.chunks_mut(h).enumerate() {
            row.copy_from_slice(&values[j * self.nx..(j + 1) * self.nx]);
            self.r2c.process_with_scratch(&mut row, chunk, &mut scratch).expect("row transform");
        }
        let mut cs = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        self.columns(out, |c| self.fwd.process_with_scratch(c, &mut cs));
        let norm = 1.0 / (self.nx * self.ny) as f64;
        out.iter_mut().for_each(|c| *c *= norm);
    }

    pub fn inverse(&self, coeffs: &[Complex64], values: &mut [f64]) {
        let h = self.nx / 2 + 1;
        let mut work = coeffs.to_vec();
        let mut cs = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        self.columns(&mut work, |c| self.inv.process_with_scratch(c, &mut cs));
        let mut scratch = self.c2r.make_scratch_vec();
        for (j, chunk) in work.chunks_mut(h).enumerate() {
            // The inverse real transform requires purely real DC and Nyquist bins.
            chunk[0].im = 0.0;
            chunk[h - 1].im = 0.0;
            self.c2r
                .process_with_scratch(chunk, &mut values[j * self.nx..(j + 1) * self.nx], &mut scratch)
                .expect("row transform");
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Fft2>>> = RefCell::new(HashMap::new());
}

/// Per-thread cached plan for `grid`.
pub fn plan_for(grid: &Grid2D) -> Rc<Fft2> {
    let key = (grid.gx.n, grid.gy.n);
    PLANS.with(|p| p.borrow_mut().entry(key).or_insert_with(|| Rc::new(Fft2::new(key.0, key.1))).clone())
}
