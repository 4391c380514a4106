use kpi_core::approx::{build_u_ap, f_bound, x_norm_separable, z_norm_separable};
use kpi_core::bump::ApproxParams;
use kpi_core::functionals::{f_functional, mass, sobolev_ratio, x_norm, z_norm};
use kpi_core::separable::{GramPolicy, LineOp};
use kpi_core::spectral::{dx_inv, dy, remove_x_mean, Field2D, Grid1D, Grid2D, MEAN_TOL};

/// Periodic `∂_x⁻²` shifted per row to vanish at the left edge: the double
/// antiderivative from −∞ when the result is supported inside the box.
fn anchored_dx_inv2_dyy(u: &Field2D) -> Field2D {
    let w = dx_inv(&dy(&u.to_spectral(), 2), 2, MEAN_TOL).unwrap().to_real();
    let n = w.grid.gx.n;
    let mut values = w.values.clone();
    for row in values.chunks_mut(n) {
        let c = row[0];
        row.iter_mut().for_each(|v| *v -= c);
    }
    Field2D::new(w.grid, values).unwrap()
}

fn render_grid(p: &ApproxParams, nx: usize, ny: usize) -> Grid2D {
    let u = build_u_ap(p, 0.0).unwrap();
    let ((x0, x1), (y0, y1)) = u.support_box();
    let (mx, my) = (0.05 * (x1 - x0), 0.05 * (y1 - y0));
    Grid2D::new(
        Grid1D::new(nx, x1 - x0 + 2.0 * mx, x0 - mx).unwrap(),
        Grid1D::new(ny, y1 - y0 + 2.0 * my, y0 - my).unwrap(),
    )
}

#[test]
fn rendered_functionals_match_separable_values() {
    for (lambda, nx, ny) in [(2.0, 4096, 1024), (3.0, 8192, 1024)] {
        let p = ApproxParams::with_defaults(lambda, 1.0).unwrap();
        let u = build_u_ap(&p, 0.0).unwrap();
        let (field, removed) = remove_x_mean(&u.render(&render_grid(&p, nx, ny)).unwrap());
        assert!(removed < 1e-7 * field.l2_norm(), "λ={lambda}: x-mean {removed:e}");
        let sum = u.sum();

        let n_sep = sum.collected().l2_norm(&GramPolicy::default()).value.powi(2);
        let n_grid = mass(&field);
        assert!((n_grid - n_sep).abs() < 1e-6 * n_sep, "λ={lambda}: N {n_grid} vs {n_sep}");

        let xs = x_norm_separable(&sum, u.variant.ibp_terms).unwrap();
        let xg = x_norm(&field).unwrap();
        assert!((xg - xs).abs() < 1e-6 * xs, "λ={lambda}: X {xg} vs {xs}");

        // The periodic ∂x⁻² differs from the one on ℝ by a constant per row.
        let ws = sum.apply_y(&LineOp::Derivative(2)).unwrap().apply_x(&LineOp::Antiderivative { order: 2, ibp_terms: 0 }).unwrap();
        let ws = ws.collected().l2_norm(&GramPolicy::default()).value;
        let wg = anchored_dx_inv2_dyy(&field).l2_norm();
        assert!((wg - ws).abs() < 1e-6 * ws, "λ={lambda}: ∂x⁻²u_yy {wg} vs {ws}");
        let zs = z_norm_separable(&sum).unwrap();
        let zg = z_norm(&field).unwrap();
        assert!(zg <= zs, "λ={lambda}: the zero-mean representative minimizes the norm: {zg} vs {zs}");

        let fb = f_bound(&p, 0.0).unwrap();
        let fg = f_functional(&field).unwrap();
        assert!(fg.is_finite() && fb.upper() >= fb.lower());

        let r3 = sobolev_ratio(&field, 3.0).unwrap();
        assert!(r3.is_finite() && r3 > 0.0);
        eprintln!("λ={lambda}: N={n_grid:.6e} X={xg:.6e} Z={zg:.6e}/{zs:.6e} F={fg:.6e} {fb:?} ratio3={r3:.6}");
    }
}
