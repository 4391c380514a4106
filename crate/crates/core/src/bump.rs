//! Smooth cutoff profiles: the canonical plateau bump φ and the dilated,
//! shifted combinations built from it (ψ_λ, ψ̃_λ, φ_λ, φ̃_λ), with their
//! moments, oscillatory moment checks and compactly supported antiderivatives.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jet::Jet;
use crate::quadrature::{integrate_adaptive, CumulativeTable, GaussLegendre};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BumpError {
    #[error("parameter constraint violated: {0}")]
    Constraint(String),
    #[error("ill-posed antiderivative of order {order}: moment {moment} = {value:e} does not vanish")]
    IllPosedAntiderivative { order: u32, moment: u32, value: f64 },
}

/// Panels used to tabulate the mollifier integral on [0, 1].
const STEP_PANELS: usize = 4096;

struct StepTable {
    cum: Vec<f64>,
    total: f64,
    rule: GaussLegendre,
}

/// Mollifier `w ↦ exp(-1/(1-w²))` on (-1, 1).
fn mollifier(w: f64) -> f64 {
    let g = 1.0 - w * w;
    if g <= 1.0 / 700.0 {
        0.0
    } else {
        (-1.0 / g).exp()
    }
}

fn step_table() -> &'static StepTable {
    static TABLE: OnceLock<StepTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let rule = GaussLegendre::new(8);
        let h = 1.0 / STEP_PANELS as f64;
        let mut cum = Vec::with_capacity(STEP_PANELS + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for p in 0..STEP_PANELS {
            let a = p as f64 * h;
            acc += GaussLegendre::panel().integrate(|r| mollifier(2.0 * r - 1.0), a, a + h);
            cum.push(acc);
        }
        StepTable { total: acc, cum, rule }
    })
}

/// Smooth transition `T` from 1 at `s = 0` to 0 at `s = 1`, with
/// `T(s) + T(1 - s) = 1`.
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    if s > 0.5 {
        return 1.0 - smooth_step(1.0 - s);
    }
    let t = step_table();
    let pos = s * STEP_PANELS as f64;
    let p = (pos.floor() as usize).min(STEP_PANELS - 1);
    let left = p as f64 / STEP_PANELS as f64;
    let partial = t.rule.integrate(|r| mollifier(2.0 * r - 1.0), left, s);
    1.0 - (t.cum[p] + partial) / t.total
}

/// Taylor jet of `δ ↦ T(s₀ + σ·δ)`.
fn smooth_step_jet(s0: f64, sigma: f64) -> Jet {
    if s0 <= 0.0 {
        return Jet::constant(1.0);
    }
    if s0 >= 1.0 {
        return Jet::ZERO;
    }
    let w = Jet::affine(2.0 * s0 - 1.0, 2.0 * sigma);
    let g = Jet::constant(1.0) - w * w;
    let m = if g.value() <= 1.0 / 700.0 {
        Jet::ZERO
    } else {
        (-g.recip()).exp()
    };
    m.scale(-sigma / step_table().total).integrate(smooth_step(s0))
}

/// A bump equal to 1 on `[lo, hi]`, 0 outside `[lo - ramp, hi + ramp]`,
/// joined by the smooth step on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauBump {
    pub lo: f64,
    pub hi: f64,
    pub ramp: f64,
}

impl PlateauBump {
    pub fn new(lo: f64, hi: f64, ramp: f64) -> Self {
        assert!(hi >= lo && ramp > 0.0, "invalid plateau bump");
        Self { lo, hi, ramp }
    }

    pub fn centered(center: f64, half_plateau: f64, ramp: f64) -> Self {
        Self::new(center - half_plateau, center + half_plateau, ramp)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo - self.ramp, self.hi + self.ramp)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// `∫` of the bump; each ramp contributes half its width.
    pub fn mass(&self) -> f64 {
        self.hi - self.lo + self.ramp
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x > self.hi {
            smooth_step((x - self.hi) / self.ramp)
        } else if x < self.lo {
            smooth_step((self.lo - x) / self.ramp)
        } else {
            1.0
        }
    }

    pub fn jet(&self, x: f64) -> Jet {
        if x > self.hi {
            smooth_step_jet((x - self.hi) / self.ramp, 1.0 / self.ramp)
        } else if x < self.lo {
            smooth_step_jet((self.lo - x) / self.ramp, -1.0 / self.ramp)
        } else {
            Jet::constant(1.0)
        }
    }
}

/// The canonical cutoff φ: supported in [-2, 2], identically 1 on [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothBump {
    bump: PlateauBump,
}

impl SmoothBump {
    pub const SUPPORT_RADIUS: f64 = 2.0;
    pub const PLATEAU_RADIUS: f64 = 1.0;

    pub fn eval(&self, x: f64) -> f64 {
        self.bump.eval(x)
    }

    pub fn derivative(&self, x: f64, k: usize) -> f64 {
        self.bump.jet(x).derivative(k)
    }

    pub fn as_plateau(&self) -> PlateauBump {
        self.bump
    }
}

pub fn make_phi() -> SmoothBump {
    SmoothBump { bump: PlateauBump::new(-1.0, 1.0, 1.0) }
}

/// Which low-frequency x-profile to use for ψ̃_λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LowProfileKind {
    /// One plateau covering the whole of supp ψ_λ, balanced by two adjacent
    /// plateaus of height −2 so both moments vanish; ψ_λψ̃_λ = ψ_λ holds on
    /// all three copies of ψ_λ.
    #[default]
    Covering,
    /// `φ(x/2λ^α) − 2φ(x/2λ^α + c_λ/2) + φ(x/2λ^α + c_λ)`, which equals −2
    /// on the second copy of ψ_λ.
    Literal,
}

/// Scale, frequency offset and the two exponents of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxParams {
    pub lambda: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ApproxParams {
    pub const DEFAULT_EPSILON: f64 = 0.1;

    /// Exponents `β = 2α = 4/3 − ε`.
    pub fn from_epsilon(lambda: f64, omega: f64, epsilon: f64) -> Result<Self, BumpError> {
        let beta = 4.0 / 3.0 - epsilon;
        Self::new(lambda, omega, beta / 2.0, beta)
    }

    pub fn with_defaults(lambda: f64, omega: f64) -> Result<Self, BumpError> {
        Self::from_epsilon(lambda, omega, Self::DEFAULT_EPSILON)
    }

    pub fn new(lambda: f64, omega: f64, alpha: f64, beta: f64) -> Result<Self, BumpError> {
        let p = Self { lambda, omega, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), BumpError> {
        let fail = |s: &str| Err(BumpError::Constraint(s.to_string()));
        if !(self.lambda.is_finite() && self.omega.is_finite() && self.alpha.is_finite() && self.beta.is_finite()) {
            return fail("parameters must be finite");
        }
        if self.alpha <= 0.5 {
            return fail("1/2<α violated");
        }
        if self.alpha >= 1.0 {
            return fail("α<1 violated");
        }
        if self.beta <= 1.0 {
            return fail("1<β violated");
        }
        if self.alpha + self.beta >= 2.0 {
            return fail("α+β<2 violated");
        }
        if self.lambda < 1.0 {
            return fail("λ≥1 violated");
        }
        if self.omega.abs() > 1.0 {
            return fail("|ω|≤1 violated");
        }
        Ok(())
    }

    pub fn with_omega(&self, omega: f64) -> Self {
        Self { omega, ..*self }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..*self }
    }

    /// λ^α, the x-scale of the wave packet.
    pub fn x_scale(&self) -> f64 {
        self.lambda.powf(self.alpha)
    }

    /// λ^β, the y-scale of the wave packet.
    pub fn y_scale(&self) -> f64 {
        self.lambda.powf(self.beta)
    }

    /// Residual decay exponent δ implied by the exponent bookkeeping of the
    /// leading remainders (λ^{-β}, λ^{-2α}, the quadratic remainder and the
    /// low-part linear terms).
    pub fn predicted_delta(&self) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let low_linear = -(a + b) / 2.0 - (a - 2.0 * b).max(-3.0 * a);
        [b - 1.0, 2.0 * a - 1.0, 1.0 - (b - a) / 2.0, low_linear]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    fn label(&self) -> String {
        format!("λ={:.17e},α={:.17e},β={:.17e}", self.lambda, self.alpha, self.beta)
    }
}

/// `[10 λ^{1+α}]`, the integer behind c_λ.
pub fn shift_count(p: &ApproxParams) -> u64 {
    (10.0 * p.lambda.powf(1.0 + p.alpha)).floor() as u64
}

/// `c_λ = 2π[10λ^{1+α}]/λ^{1+α}`.
pub fn c_lambda(p: &ApproxParams) -> f64 {
    2.0 * PI * shift_count(p) as f64 / p.lambda.powf(1.0 + p.alpha)
}

/// Spacing `c_λ λ^α = 2π[10λ^{1+α}]/λ` between the copies of ψ_λ; λ times
/// this is an exact multiple of 2π.
pub fn copy_spacing(p: &ApproxParams) -> f64 {
    2.0 * PI * shift_count(p) as f64 / p.lambda
}

/// Weighted sum of plateau bumps with closed-form moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile1D {
    pub label: String,
    pub copies: Vec<(f64, PlateauBump)>,
    pub moment0: f64,
    pub moment1: f64,
}

impl PartialEq for Profile1D {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
    }
}

impl Profile1D {
    pub fn new(label: impl Into<String>, copies: Vec<(f64, PlateauBump)>) -> Self {
        let moment0 = copies.iter().map(|(w, b)| w * b.mass()).sum();
        let moment1 = copies.iter().map(|(w, b)| w * b.mass() * b.center()).sum();
        Self { label: label.into(), copies, moment0, moment1 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.copies
            .iter()
            .filter(|(_, b)| {
                let (l, r) = b.support();
                x > l && x < r
            })
            .map(|(w, b)| w * b.eval(x))
            .sum()
    }

    pub fn jet(&self, x: f64) -> Jet {
        let mut acc = Jet::ZERO;
        for (w, b) in &self.copies {
            let (l, r) = b.support();
            if x > l && x < r {
                acc = acc + b.jet(x).scale(*w);
            }
        }
        acc
    }

    pub fn derivative(&self, x: f64, k: usize) -> f64 {
        if k == 0 {
            self.eval(x)
        } else {
            self.jet(x).derivative(k)
        }
    }

    /// Disjoint sorted intervals covering the support.
    pub fn support(&self) -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = self.copies.iter().map(|(_, b)| b.support()).collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (l, r) in iv {
            match out.last_mut() {
                Some(last) if l <= last.1 => last.1 = last.1.max(r),
                _ => out.push((l, r)),
            }
        }
        out
    }

    pub fn hull(&self) -> (f64, f64) {
        let s = self.support();
        (s[0].0, s[s.len() - 1].1)
    }

    /// Smallest ramp width, the length scale of the derivatives.
    pub fn min_ramp(&self) -> f64 {
        self.copies.iter().map(|(_, b)| b.ramp).fold(f64::INFINITY, f64::min)
    }

    pub fn peak(&self) -> f64 {
        self.copies.iter().map(|(w, _)| w.abs()).fold(0.0, f64::max)
    }

    /// True when this profile is identically 1 on `intervals`, i.e. a weight-1
    /// plateau covers each interval and no other copy reaches into it.
    pub fn is_one_on(&self, intervals: &[(f64, f64)]) -> bool {
        intervals.iter().all(|&(l, r)| {
            let slack = 1e-12 * l.abs().max(r.abs()).max(1.0);
            let covers = |w: f64, b: &PlateauBump| w == 1.0 && b.lo <= l + slack && b.hi >= r - slack;
            let covered = self.copies.iter().any(|(w, b)| covers(*w, b));
            let others_clear = self.copies.iter().filter(|(w, b)| !covers(*w, b)).all(|(_, b)| {
                let (sl, sr) = b.support();
                sr <= l + slack || sl >= r - slack
            });
            covered && others_clear
        })
    }

    /// Sample on a uniform grid and write `x,value` rows.
    pub fn to_csv(&self, a: f64, b: f64, samples: usize) -> String {
        let mut out = String::from("x,value\n");
        for i in 0..samples {
            let x = if samples == 1 { a } else { a + (b - a) * i as f64 / (samples - 1) as f64 };
            let _ = writeln!(out, "{:.17e},{:.17e}", x, self.eval(x));
        }
        out
    }
}

pub fn make_psi_lambda(p: &ApproxParams) -> Profile1D {
    let s = p.x_scale();
    let d = copy_spacing(p);
    let copies = [1.0, -2.0, 1.0]
        .iter()
        .enumerate()
        .map(|(k, &w)| (w, PlateauBump::centered(-(k as f64) * d, s, s)))
        .collect();
    Profile1D::new(format!("psi[{}]", p.label()), copies)
}

pub fn make_psi_tilde(p: &ApproxParams, kind: LowProfileKind) -> Profile1D {
    let s = p.x_scale();
    let d = copy_spacing(p);
    match kind {
        LowProfileKind::Literal => {
            let copies = [1.0, -2.0, 1.0]
                .iter()
                .enumerate()
                .map(|(k, &w)| (w, PlateauBump::centered(-(k as f64) * d, 2.0 * s, 2.0 * s)))
                .collect();
            Profile1D::new(format!("psi_tilde_literal[{}]", p.label()), copies)
        }
        LowProfileKind::Covering => {
            // Plateau over supp ψ_λ = [-2d - 2s, 2s], ramps of width 2s.
            let ramp = 2.0 * s;
            let main = PlateauBump::new(-2.0 * d - 2.0 * s, 2.0 * s, ramp);
            let plateau = main.hi - main.lo;
            let side = (plateau - 3.0 * ramp) / 4.0;
            let right_lo = main.support().1 + ramp;
            let left_hi = main.support().0 - ramp;
            let copies = vec![
                (-2.0, PlateauBump::new(left_hi - side, left_hi, ramp)),
                (1.0, main),
                (-2.0, PlateauBump::new(right_lo, right_lo + side, ramp)),
            ];
            Profile1D::new(format!("psi_tilde[{}]", p.label()), copies)
        }
    }
}

pub fn make_phi_lambda(p: &ApproxParams) -> Profile1D {
    let s = p.y_scale();
    Profile1D::new(format!("phi[{}]", p.label()), vec![(1.0, PlateauBump::centered(0.0, s, s))])
}

pub fn make_phi_tilde(p: &ApproxParams) -> Profile1D {
    let s = 2.0 * p.y_scale();
    Profile1D::new(format!("phi_tilde[{}]", p.label()), vec![(1.0, PlateauBump::centered(0.0, s, s))])
}

/// The five profiles of one parameter set, shared by reference.
#[derive(Debug, Clone)]
pub struct BumpSet {
    pub phi: SmoothBump,
    pub psi: Arc<Profile1D>,
    pub psi_tilde: Arc<Profile1D>,
    pub phi_lambda: Arc<Profile1D>,
    pub phi_tilde: Arc<Profile1D>,
}

impl BumpSet {
    pub fn new(p: &ApproxParams, kind: LowProfileKind) -> Self {
        Self {
            phi: make_phi(),
            psi: Arc::new(make_psi_lambda(p)),
            psi_tilde: Arc::new(make_psi_tilde(p, kind)),
            phi_lambda: Arc::new(make_phi_lambda(p)),
            phi_tilde: Arc::new(make_phi_tilde(p)),
        }
    }
}

/// `(∫f(x)cos(λx+γ)dx, ∫x f(x)cos(λx+γ)dx)` by adaptive quadrature over each
/// support interval, panels no wider than a quarter period.
pub fn check_moments(f: &Profile1D, lambda: f64, gamma: f64) -> (f64, f64) {
    let panel = (PI / 2.0 / lambda).min(f.min_ramp() / 4.0);
    let tol = 1e-14 * f.peak();
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    for (a, b) in f.support() {
        m0 += integrate_adaptive(|x| f.eval(x) * (lambda * x + gamma).cos(), a, b, tol * (b - a), panel).value;
        m1 += integrate_adaptive(|x| x * f.eval(x) * (lambda * x + gamma).cos(), a, b, tol * (b - a) * a.abs().max(b.abs()), panel)
            .value;
    }
    (m0, m1)
}

/// Indefinite integral from −∞ of a zero-moment profile, of order 1 or 2.
#[derive(Debug, Clone)]
pub struct ProfileAntiderivative {
    profile: Arc<Profile1D>,
    order: u32,
    first: CumulativeTable,
    second: Option<CumulativeTable>,
    hull: (f64, f64),
}

impl ProfileAntiderivative {
    pub fn order(&self) -> u32 {
        self.order
    }

    /// Half the width of the support hull.
    pub fn radius(&self) -> f64 {
        0.5 * (self.hull.1 - self.hull.0)
    }

    pub fn support(&self) -> (f64, f64) {
        self.hull
    }

    fn first_eval(&self, x: f64) -> f64 {
        if x >= self.hull.1 {
            return 0.0;
        }
        self.first.eval(x, |s| self.profile.eval(s))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.second {
            None => self.first_eval(x),
            Some(t) => {
                if x >= self.hull.1 {
                    0.0
                } else {
                    t.eval(x, |s| self.first_eval(s))
                }
            }
        }
    }
}

/// Tolerance on the moment gate relative to `peak · |support|^{k+1}`.
pub const MOMENT_TOL: f64 = 1e-10;

pub fn antiderivative(f: &Arc<Profile1D>, order: u32) -> Result<ProfileAntiderivative, BumpError> {
    assert!(order == 1 || order == 2, "order must be 1 or 2");
    let hull = f.hull();
    let len = hull.1 - hull.0;
    let scale0 = f.peak() * len;
    if f.moment0.abs() > MOMENT_TOL * scale0 {
        return Err(BumpError::IllPosedAntiderivative { order, moment: 0, value: f.moment0 });
    }
    if order == 2 {
        let scale1 = scale0 * hull.0.abs().max(hull.1.abs());
        if f.moment1.abs() > MOMENT_TOL * scale1 {
            return Err(BumpError::IllPosedAntiderivative { order, moment: 1, value: f.moment1 });
        }
    }
    let width = f.min_ramp() / 32.0;
    let first = CumulativeTable::build(|x| f.eval(x), hull.0, hull.1, width);
    let mut out = ProfileAntiderivative { profile: f.clone(), order, first, second: None, hull };
    if order == 2 {
        let second = CumulativeTable::build(|x| out.first_eval(x), hull.0, hull.1, width);
        out.second = Some(second);
    }
    Ok(out)
}

/// `sup |ψ_λ ψ̃_λ − ψ_λ|` sampled over `region` (or the whole of supp ψ_λ).
pub fn absorption_defect(psi: &Profile1D, psi_tilde: &Profile1D, region: Option<(f64, f64)>, samples: usize) -> f64 {
    let intervals = match region {
        Some(r) => vec![r],
        None => psi.support(),
    };
    let mut worst: f64 = 0.0;
    for (a, b) in intervals {
        for i in 0..=samples {
            let x = a + (b - a) * i as f64 / samples as f64;
            let v = psi.eval(x);
            worst = worst.max((v * psi_tilde.eval(x) - v).abs());
        }
    }
    worst
}

/// Smallest λ in `lambdas` from which the absorption `ψ_λψ̃_λ = ψ_λ` holds to
/// `tol` on `region_of(p)` for every later λ in the list.
pub fn absorption_threshold<R>(
    base: &ApproxParams,
    kind: LowProfileKind,
    lambdas: &[f64],
    tol: f64,
    region_of: R,
) -> Option<f64>
where
    R: Fn(&ApproxParams) -> Option<(f64, f64)>,
{
    let ok: Vec<bool> = lambdas
        .iter()
        .map(|&l| {
            let p = base.with_lambda(l);
            let psi = make_psi_lambda(&p);
            let pt = make_psi_tilde(&p, kind);
            absorption_defect(&psi, &pt, region_of(&p), 2000) <= tol
        })
        .collect();
    (0..lambdas.len()).find(|&i| ok[i..].iter().all(|&v| v)).map(|i| lambdas[i])
}
