//! Conserved quantities and norms of KP-I fields on a periodic grid.
//!
//! Quadratic integrals come from Parseval; cubic and quartic integrands are
//! evaluated on a 2× zero-padded grid, where the trapezoid sum is exact for
//! dealiased data.
//!
//! `∂_x⁻¹` and `∂_x⁻²` are the periodic multipliers with the `ξ = 0` column
//! dropped, the operators the periodic flow conserves these quantities with.
//! For a field supported inside the box, the periodic `∂_x⁻²` differs from
//! the double antiderivative on ℝ by a constant per row unless the second
//! x-moment vanishes; the separable calculus in `approx` computes the ℝ values.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bump::make_phi;
use crate::spectral::{abs_dx_pow, dx, dx_inv, dy, Field2D, Grid1D, Grid2D, SpectralError, SpectralField, MEAN_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("degenerate field: {0}")]
    Degenerate(String),
    #[error("exponent p = {0} outside [2, 6]")]
    Exponent(f64),
}

pub type Result<T> = std::result::Result<T, FunctionalError>;

/// One integral of a functional with the coefficient it enters with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: String,
    pub coefficient: f64,
    pub integral: f64,
}

pub fn total(components: &[Component]) -> f64 {
    components.iter().map(|c| c.coefficient * c.integral).sum()
}

/// Band-limited interpolant on the grid refined by `factor` in both directions.
pub fn padded(f: &SpectralField, factor: usize) -> Field2D {
    let g = f.grid;
    let big = Grid2D::new(
        Grid1D::new(g.gx.n * factor, g.gx.length, g.gx.origin).expect("valid refined grid"),
        Grid1D::new(g.gy.n * factor, g.gy.length, g.gy.origin).expect("valid refined grid"),
    );
    let mut out = SpectralField::zeros(big);
    let (h, hb) = (g.half_nx(), big.half_nx());
    let (nx, ny, nyb) = (g.gx.n as i64, g.gy.n as i64, big.gy.n as i64);
    let row_of = |ky: i64| (if ky >= 0 { ky } else { nyb + ky }) as usize;
    for row in 0..g.gy.n {
        let ky = g.gy.mode(row);
        for kx in 0..h {
            let mut c = f.coeffs[row * h + kx];
            if c == Complex64::new(0.0, 0.0) {
                continue;
            }
            if factor > 1 && kx as i64 == nx / 2 {
                c *= 0.5;
            }
            let targets: Vec<i64> = if factor > 1 && ky == -ny / 2 { vec![ky, -ky] } else { vec![ky] };
            let share = 1.0 / targets.len() as f64;
            for t in targets {
                out.coeffs[row_of(t) * hb + kx] += c * share;
            }
        }
    }
    out.to_real()
}

fn sq(f: &SpectralField) -> f64 {
    f.l2_norm().powi(2)
}

fn dxinv_dy(s: &SpectralField) -> Result<SpectralField> {
    Ok(dx_inv(&dy(s, 1), 1, MEAN_TOL)?)
}

fn dxinv2_dyy(s: &SpectralField) -> Result<SpectralField> {
    Ok(dx_inv(&dy(s, 2), 2, MEAN_TOL)?)
}

/// `N(u) = ∫u²`.
pub fn mass(u: &Field2D) -> f64 {
    sq(&u.to_spectral())
}

pub fn energy_breakdown(u: &Field2D) -> Result<Vec<Component>> {
    let s = u.to_spectral();
    let w = padded(&s, 2);
    let cube = w.values.iter().map(|v| v * v * v).sum::<f64>() * w.grid.cell_area();
    Ok(vec![
        Component { label: "u_x^2".into(), coefficient: 0.5, integral: sq(&dx(&s, 1)) },
        Component { label: "(dx^-1 u_y)^2".into(), coefficient: 0.5, integral: sq(&dxinv_dy(&s)?) },
        Component { label: "u^3".into(), coefficient: -1.0 / 6.0, integral: cube },
    ])
}

/// `E(u) = ½∫[(∂_x u)² + (∂_x⁻¹u_y)² − ⅓u³]`.
pub fn energy(u: &Field2D) -> Result<f64> {
    Ok(total(&energy_breakdown(u)?))
}

/// The seven integrals of
/// `F = 3/2∫u_xx² + 5∫u_y² + 5/6∫(∂_x⁻²u_yy)² − 5/6∫u²∂_x⁻²u_yy
///      − 5/6∫u(∂_x⁻¹u_y)² + 5/4∫u²u_xx + 5/24∫u⁴`.
pub fn f_breakdown(u: &Field2D) -> Result<Vec<Component>> {
    let s = u.to_spectral();
    let uxx = dx(&s, 2);
    let w = dxinv2_dyy(&s)?;
    let v = dxinv_dy(&s)?;
    // Padded grids are four times larger; hold at most two at once.
    let pu = padded(&s, 2);
    let area = pu.grid.cell_area();
    let against = |other: &SpectralField, f: &dyn Fn(f64, f64) -> f64| {
        let po = padded(other, 2);
        pu.values.iter().zip(&po.values).map(|(a, b)| f(*a, *b)).sum::<f64>() * area
    };
    let u2w = against(&w, &|a, b| a * a * b);
    let uv2 = against(&v, &|a, b| a * b * b);
    let u2uxx = against(&uxx, &|a, b| a * a * b);
    let u4 = pu.values.iter().map(|a| a.powi(4)).sum::<f64>() * area;
    let c = |label: &str, coefficient: f64, integral: f64| Component { label: label.into(), coefficient, integral };
    Ok(vec![
        c("u_xx^2", 1.5, sq(&uxx)),
        c("u_y^2", 5.0, sq(&dy(&s, 1))),
        c("(dx^-2 u_yy)^2", 5.0 / 6.0, sq(&w)),
        c("u^2 dx^-2 u_yy", -5.0 / 6.0, u2w),
        c("u (dx^-1 u_y)^2", -5.0 / 6.0, uv2),
        c("u^2 u_xx", 1.25, u2uxx),
        c("u^4", 5.0 / 24.0, u4),
    ])
}

pub fn f_functional(u: &Field2D) -> Result<f64> {
    Ok(total(&f_breakdown(u)?))
}

/// `‖u‖ + ‖u_x‖ + ‖∂_x⁻¹u_y‖`.
pub fn x_norm(u: &Field2D) -> Result<f64> {
    let s = u.to_spectral();
    Ok(s.l2_norm() + dx(&s, 1).l2_norm() + dxinv_dy(&s)?.l2_norm())
}

/// `‖u‖ + ‖u_xx‖ + ‖∂_x⁻²u_yy‖`.
pub fn z_norm(u: &Field2D) -> Result<f64> {
    let s = u.to_spectral();
    Ok(s.l2_norm() + dx(&s, 2).l2_norm() + dxinv2_dyy(&s)?.l2_norm())
}

/// `‖u‖ + ‖D_x^s u‖ + ‖∂_x⁻¹u_y‖`.
pub fn ys_norm(u: &Field2D, s_exp: f64) -> Result<f64> {
    let s = u.to_spectral();
    Ok(s.l2_norm() + abs_dx_pow(&s, s_exp).l2_norm() + dxinv_dy(&s)?.l2_norm())
}

/// `‖∂_x u‖ + ‖∂_x⁻¹∂_y u‖`, the leading part of the energy.
pub fn energy_leading(u: &Field2D) -> Result<f64> {
    let s = u.to_spectral();
    Ok(dx(&s, 1).l2_norm() + dxinv_dy(&s)?.l2_norm())
}

/// `‖u‖_{L^p} / (‖u‖^{(6−p)/2p} ‖u_x‖^{(p−2)/p} ‖∂_x⁻¹u_y‖^{(p−2)/2p})`.
pub fn sobolev_ratio(u: &Field2D, p: f64) -> Result<f64> {
    Ok(sobolev_ratios(u, &[p])?[0])
}

/// [`sobolev_ratio`] for several exponents, sharing the transforms.
pub fn sobolev_ratios(u: &Field2D, ps: &[f64]) -> Result<Vec<f64>> {
    if let Some(&p) = ps.iter().find(|p| !(2.0..=6.0).contains(*p)) {
        return Err(FunctionalError::Exponent(p));
    }
    let s = u.to_spectral();
    let fine = padded(&s, 2);
    let l2 = fine.lp_norm(2.0);
    let ux = dx(&s, 1).l2_norm();
    let v = dxinv_dy(&s)?.l2_norm();
    if l2 == 0.0 || ux == 0.0 || v == 0.0 {
        return Err(FunctionalError::Degenerate(format!("‖u‖ = {l2:e}, ‖u_x‖ = {ux:e}, ‖∂x⁻¹u_y‖ = {v:e}")));
    }
    Ok(ps
        .iter()
        .map(|&p| {
            let lp = if p == 2.0 { l2 } else { fine.lp_norm(p) };
            lp / (l2.powf((6.0 - p) / (2.0 * p)) * ux.powf((p - 2.0) / p) * v.powf((p - 2.0) / (2.0 * p)))
        })
        .collect())
}

/// One monitoring row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub t: f64,
    pub n_mass: f64,
    pub energy: f64,
    pub f_value: f64,
    pub x_norm: f64,
    pub z_norm: f64,
    pub energy_components: Vec<Component>,
    pub f_components: Vec<Component>,
}

impl Diagnostics {
    pub fn compute(u: &Field2D, t: f64) -> Result<Self> {
        let energy_components = energy_breakdown(u)?;
        let f_components = f_breakdown(u)?;
        Ok(Self {
            t,
            n_mass: mass(u),
            energy: total(&energy_components),
            f_value: total(&f_components),
            x_norm: x_norm(u)?,
            z_norm: z_norm(u)?,
            energy_components,
            f_components,
        })
    }

    pub fn csv_header() -> String {
        let mut s = String::from("t,N,E,F,x_norm,z_norm");
        for l in ["E:u_x^2", "E:(dx^-1 u_y)^2", "E:u^3"] {
            s.push(',');
            s.push_str(l);
        }
        for l in ["F:u_xx^2", "F:u_y^2", "F:(dx^-2 u_yy)^2", "F:u^2 dx^-2 u_yy", "F:u (dx^-1 u_y)^2", "F:u^2 u_xx", "F:u^4"] {
            s.push(',');
            s.push_str(l);
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.t, self.n_mass, self.energy, self.f_value, self.x_norm, self.z_norm
        );
        for c in self.energy_components.iter().chain(&self.f_components) {
            s.push_str(&format!(",{:.17e}", c.integral));
        }
        s
    }
}

/// Random smooth compactly supported zero-x-mean field: a sum of `count`
/// bumps `a·φ'((x − x₀)/w_x)·φ((y − y₀)/w_y)` inside the box, widths scaled
/// by `width_scale`. The discrete x-mean is projected out so the nonlocal
/// operators apply.
pub fn random_field(grid: &Grid2D, seed: u64, count: usize, width_scale: f64) -> Field2D {
    let phi = make_phi();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gx, gy) = (grid.gx, grid.gy);
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let a = rng.gen_range(-1.0..1.0);
            let wx = gx.length * rng.gen_range(0.06..0.12) * width_scale;
            let wy = gy.length * rng.gen_range(0.06..0.12) * width_scale;
            let x0 = gx.origin + gx.length * rng.gen_range(0.35..0.65);
            let y0 = gy.origin + gy.length * rng.gen_range(0.35..0.65);
            (a, wx, wy, x0, y0)
        })
        .collect();
    let raw = Field2D::from_fn(*grid, |x, y| {
        bumps
            .iter()
            .map(|&(a, wx, wy, x0, y0)| {
                let sx = (x - x0) / wx;
                let sy = (y - y0) / wy;
                if sx.abs() >= 2.0 || sy.abs() >= 2.0 {
                    0.0
                } else {
                    a * phi.derivative(sx, 1) * phi.eval(sy)
                }
            })
            .sum()
    });
    raw.to_spectral().map(|_, _, kx, _| Complex64::new(if kx == 0 { 0.0 } else { 1.0 }, 0.0)).to_real()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dealias;
    use proptest::prelude::*;

    fn grid(n: usize, l: f64) -> Grid2D {
        Grid2D::new(Grid1D::new(n, l, -l / 2.0).unwrap(), Grid1D::new(n, l, -l / 2.0).unwrap())
    }

    fn packet(g: &Grid2D) -> Field2D {
        Field2D::from_fn(*g, |x, y| (3.0 * x).cos() * (-(x * x) / 2.0 - y * y / 3.0).exp() + 0.3 * x * (-(x * x) - y * y).exp())
    }

    #[test]
    fn zero_field_is_zero_everywhere() {
        let z = Field2D::zeros(grid(32, 10.0));
        assert_eq!(mass(&z), 0.0);
        assert_eq!(energy(&z).unwrap(), 0.0);
        let fb = f_breakdown(&z).unwrap();
        assert_eq!(fb.len(), 7);
        assert!(fb.iter().all(|c| c.integral == 0.0));
        assert_eq!(x_norm(&z).unwrap(), 0.0);
        assert!(matches!(sobolev_ratio(&z, 3.0), Err(FunctionalError::Degenerate(_))));
    }

    #[test]
    fn mass_scales_quadratically() {
        let g = grid(64, 20.0);
        let u = packet(&g);
        assert!((mass(&u.scale(2.0)) - 4.0 * mass(&u)).abs() < 1e-12 * mass(&u));
        assert!((mass(&u) - u.l2_norm().powi(2)).abs() < 1e-12 * mass(&u));
    }

    #[test]
    fn padding_preserves_samples_and_integrals() {
        let g = grid(32, 12.0);
        let u = Field2D::from_fn(g, |x, y| (x * 2.0 * std::f64::consts::PI / 12.0).sin() * (-(y * y)).exp());
        let s = dealias(&u.to_spectral());
        let base = s.to_real();
        let fine = padded(&s, 2);
        for iy in 0..32 {
            for ix in 0..32 {
                assert!((fine.at(2 * ix, 2 * iy) - base.at(ix, iy)).abs() < 1e-13);
            }
        }
        // Cubic integral of dealiased data is exact on the padded grid: compare with 4×.
        let c2: f64 = fine.values.iter().map(|v| v.powi(3)).sum::<f64>() * fine.grid.cell_area();
        let f4 = padded(&s, 4);
        let c4: f64 = f4.values.iter().map(|v| v.powi(3)).sum::<f64>() * f4.grid.cell_area();
        assert!((c2 - c4).abs() < 1e-13);
    }

    #[test]
    fn single_mode_energy_closed_form() {
        let l = 2.0 * std::f64::consts::PI;
        let g = grid(32, l);
        // u = cos(x + y): u_x = −sin, ∂x⁻¹u_y = cos; ∫u³ = 0 over full periods.
        let u = Field2D::from_fn(g, |x, y| (x + y).cos());
        let area = l * l;
        let e = energy(&u).unwrap();
        assert!((e - 0.5 * (area / 2.0 + area / 2.0)).abs() < 1e-11);
        let parts = energy_breakdown(&u).unwrap();
        assert!(parts[2].integral.abs() < 1e-11);
    }

    #[test]
    fn breakdown_reproduces_f() {
        let g = grid(64, 20.0);
        let u = Field2D::from_fn(g, |x, y| x * (-(x * x) / 2.0 - y * y / 4.0).exp());
        let f = f_functional(&u).unwrap();
        assert_eq!(total(&f_breakdown(&u).unwrap()), f);
        let d = Diagnostics::compute(&u, 0.0).unwrap();
        assert_eq!(d.csv_row().split(',').count(), Diagnostics::csv_header().split(',').count());
    }

    #[test]
    fn ys_with_s_one_equals_x_norm() {
        let g = grid(64, 20.0);
        let u = packet(&g);
        let s = u.to_spectral();
        let u = dealias(&dx(&s, 1)).to_real();
        assert!((ys_norm(&u, 1.0).unwrap() - x_norm(&u).unwrap()).abs() < 1e-12 * x_norm(&u).unwrap());
    }

    #[test]
    fn sobolev_ratio_p2_is_exactly_one() {
        let g = grid(64, 20.0);
        for seed in 0..5 {
            let u = random_field(&g, seed, 4, 1.0);
            assert_eq!(sobolev_ratio(&u, 2.0).unwrap(), 1.0);
        }
        assert!(matches!(sobolev_ratio(&random_field(&g, 1, 2, 1.0), 7.0), Err(FunctionalError::Exponent(_))));
    }

    #[test]
    fn random_fields_are_seeded_and_zero_mean() {
        let g = grid(64, 20.0);
        let a = random_field(&g, 42, 5, 1.0);
        assert_eq!(a, random_field(&g, 42, 5, 1.0));
        assert_ne!(a, random_field(&g, 43, 5, 1.0));
        a.to_spectral().check_zero_x_mean(1e-8).unwrap();
    }

    #[test]
    fn cubic_terms_obey_holder_bounds() {
        let g = grid(64, 20.0);
        for seed in 0..10 {
            let u = random_field(&g, seed, 5, 1.0);
            let fb = f_breakdown(&u).unwrap();
            let s = u.to_spectral();
            let fine = padded(&s, 2);
            let l4 = fine.lp_norm(4.0);
            let w = dxinv2_dyy(&s).unwrap().l2_norm();
            let v4 = padded(&dxinv_dy(&s).unwrap(), 2).lp_norm(4.0);
            let uxx = dx(&s, 2).l2_norm();
            assert!(fb[3].integral.abs() <= l4 * l4 * w * (1.0 + 1e-10));
            assert!(fb[4].integral.abs() <= fine.lp_norm(2.0) * v4 * v4 * (1.0 + 1e-10));
            assert!(fb[5].integral.abs() <= l4 * l4 * uxx * (1.0 + 1e-10));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn norms_homogeneous_and_subadditive(seed in 0u64..1000, mu in -3.0f64..3.0) {
            let g = grid(32, 20.0);
            let a = random_field(&g, seed, 3, 1.0);
            let b = random_field(&g, seed + 1, 3, 1.0);
            for f in [x_norm, z_norm] {
                let na = f(&a).unwrap();
                prop_assert!((f(&a.scale(mu)).unwrap() - mu.abs() * na).abs() <= 1e-10 * na.max(1e-300) * mu.abs().max(1.0));
                prop_assert!(f(&a.add(&b).unwrap()).unwrap() <= na + f(&b).unwrap() + 1e-10);
            }
            let r = sobolev_ratio(&a, 4.0).unwrap();
            let m = mu.abs().max(0.1);
            prop_assert!((sobolev_ratio(&a.scale(m), 4.0).unwrap() - r).abs() < 1e-10 * r);
        }
    }
}
