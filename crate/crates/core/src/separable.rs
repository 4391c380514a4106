//! Tensor-sum calculus: functions `Σ cᵢ fᵢ(x) gᵢ(y)` whose factors are
//! products of profile derivatives times a single trigonometric carrier, or
//! running antiderivatives of such a product. Operators act factorwise and
//! symbolically; L² norms come from 1-D Gram matrices.
//!
//! x-Gram entries are computed by a left-to-right sweep: Gauss–Legendre
//! panels on the ramps of the profiles and closed forms on the flat stretches
//! between them, where every factor is a polynomial times a carrier. y-Gram
//! entries with carriers too fast to resolve are replaced by zero together
//! with the integration-by-parts bound `‖(EᵢEⱼ)''‖_{L¹}/F²`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::bump::{check_moments, Profile1D, MOMENT_TOL};
use crate::jet::Jet;
use crate::quadrature::{panel_edges, GaussLegendre};
use crate::spectral::{Field2D, Grid2D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeparableError {
    #[error("ill-posed antiderivative: {0}")]
    Moment(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("support overflow: factor support [{lo}, {hi}] leaves the {axis} box [{box_lo}, {box_hi}]")]
    SupportOverflow { axis: &'static str, lo: f64, hi: f64, box_lo: f64, box_hi: f64 },
}

pub type Result<T> = std::result::Result<T, SeparableError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// `cos(freq·s + base + quarter·π/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trig {
    pub freq: f64,
    pub base: f64,
    pub quarter: u8,
}

impl Trig {
    pub const ONE: Trig = Trig { freq: 0.0, base: 0.0, quarter: 0 };

    pub fn cos(freq: f64, base: f64) -> Self {
        Self { freq, base, quarter: 0 }
    }

    pub fn sin(freq: f64, base: f64) -> Self {
        Self { freq, base, quarter: 3 }
    }

    pub fn eval(&self, s: f64) -> f64 {
        quarter_cos(self.freq * s + self.base, self.quarter as i32)
    }

    pub fn shifted(&self, quarters: i32) -> Self {
        Self { quarter: (self.quarter as i32 + quarters).rem_euclid(4) as u8, ..*self }
    }

    /// Sign and canonical carrier with `freq ≥ 0` and `quarter ∈ {0, 1}`;
    /// a constant carrier is folded into the sign.
    fn canonical(self) -> (f64, Trig) {
        let mut t = self;
        if t.freq < 0.0 {
            t = Trig { freq: -t.freq, base: -t.base, quarter: (4 - t.quarter as i32).rem_euclid(4) as u8 };
        }
        if t.freq == 0.0 {
            return (t.eval(0.0), Trig::ONE);
        }
        // Signed zeros would otherwise produce distinct keys.
        t.base += 0.0;
        if t.quarter >= 2 {
            (-1.0, t.shifted(-2))
        } else {
            (1.0, t)
        }
    }

    /// `cos A · cos B = ½cos(A − B) + ½cos(A + B)`.
    pub fn product(&self, other: &Trig) -> [Trig; 2] {
        let q = self.quarter as i32;
        let r = other.quarter as i32;
        [
            Trig { freq: self.freq - other.freq, base: self.base - other.base, quarter: (q - r).rem_euclid(4) as u8 },
            Trig { freq: self.freq + other.freq, base: self.base + other.base, quarter: (q + r).rem_euclid(4) as u8 },
        ]
    }
}

fn quarter_cos(a: f64, quarter: i32) -> f64 {
    match quarter.rem_euclid(4) {
        0 => a.cos(),
        1 => -a.sin(),
        2 => -a.cos(),
        _ => a.sin(),
    }
}

/// Product of profile derivatives times a carrier.
#[derive(Debug, Clone)]
pub struct Wave {
    pub factors: Vec<(Arc<Profile1D>, u32)>,
    pub trig: Trig,
}

impl Wave {
    pub fn new(profile: Arc<Profile1D>, order: u32, trig: Trig) -> Self {
        Self { factors: vec![(profile, order)], trig }
    }

    pub fn envelope_jet(&self, s: f64) -> Jet {
        let mut acc = Jet::constant(1.0);
        for (p, m) in &self.factors {
            let mut j = p.jet(s);
            for _ in 0..*m {
                j = j.differentiate();
            }
            acc = acc * j;
            if acc.c.iter().all(|v| *v == 0.0) {
                break;
            }
        }
        acc
    }

    pub fn envelope(&self, s: f64) -> f64 {
        let mut acc = 1.0;
        for (p, m) in &self.factors {
            acc *= p.derivative(s, *m as usize);
            if acc == 0.0 {
                break;
            }
        }
        acc
    }

    pub fn eval(&self, s: f64) -> f64 {
        let e = self.envelope(s);
        if e == 0.0 {
            0.0
        } else {
            e * self.trig.eval(s)
        }
    }

    /// Intersection of the factor hulls, `None` when empty.
    pub fn hull(&self) -> Option<(f64, f64)> {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (p, _) in &self.factors {
            let (a, b) = p.hull();
            lo = lo.max(a);
            hi = hi.min(b);
        }
        (lo < hi).then_some((lo, hi))
    }

    /// Leibniz rule: `∂(E·cos θ) = E'·cos θ + freq·E·cos(θ + π/2)`.
    pub fn derivative(&self) -> Vec<(f64, Wave)> {
        let mut out = Vec::new();
        for i in 0..self.factors.len() {
            let mut f = self.factors.clone();
            f[i].1 += 1;
            out.push((1.0, Wave { factors: f, trig: self.trig }));
        }
        if self.trig.freq != 0.0 {
            out.push((self.trig.freq, Wave { factors: self.factors.clone(), trig: self.trig.shifted(1) }));
        }
        out
    }

    fn max_order(&self) -> u32 {
        self.factors.iter().map(|(_, m)| *m).max().unwrap_or(0)
    }

    fn describe(&self, var: &str) -> String {
        let mut s = String::new();
        for (i, (p, m)) in self.factors.iter().enumerate() {
            if i > 0 {
                s.push('·');
            }
            let _ = write!(s, "{}", short_label(&p.label));
            if *m > 0 {
                let _ = write!(s, "^({m})");
            }
        }
        if self.trig.freq != 0.0 {
            let _ = write!(s, "·cos({:.6e}{var} + {:.6e} + {}π/2)", self.trig.freq, self.trig.base, self.trig.quarter);
        }
        s
    }
}

fn short_label(label: &str) -> &str {
    label.split('[').next().unwrap_or(label)
}

#[derive(Debug, Clone)]
pub enum FactorKind {
    Wave(Wave),
    /// `depth`-fold running integral from −∞ of a wave.
    Integrated { wave: Wave, depth: u32 },
}

#[derive(Debug, Clone)]
pub struct Factor1D {
    pub axis: Axis,
    pub kind: FactorKind,
}

impl Factor1D {
    pub fn wave(axis: Axis, wave: Wave) -> Self {
        Self { axis, kind: FactorKind::Wave(wave) }
    }

    pub fn profile(axis: Axis, profile: Arc<Profile1D>, order: u32, trig: Trig) -> Self {
        Self::wave(axis, Wave::new(profile, order, trig))
    }

    pub fn inner_wave(&self) -> &Wave {
        match &self.kind {
            FactorKind::Wave(w) => w,
            FactorKind::Integrated { wave, .. } => wave,
        }
    }

    pub fn depth(&self) -> u32 {
        match &self.kind {
            FactorKind::Wave(_) => 0,
            FactorKind::Integrated { depth, .. } => *depth,
        }
    }

    pub fn support(&self) -> Option<(f64, f64)> {
        self.inner_wave().hull()
    }

    fn key(&self) -> AtomKey {
        let w = self.inner_wave();
        let mut factors: Vec<(String, u32)> = w.factors.iter().map(|(p, m)| (p.label.clone(), *m)).collect();
        factors.sort();
        AtomKey {
            axis: self.axis,
            factors,
            freq: w.trig.freq.to_bits(),
            base: w.trig.base.to_bits(),
            quarter: w.trig.quarter,
            depth: self.depth(),
        }
    }

    pub fn describe(&self) -> String {
        let var = self.axis.name();
        match &self.kind {
            FactorKind::Wave(w) => w.describe(var),
            FactorKind::Integrated { wave, depth } => format!("∂{var}^-{depth}[{}]", wave.describe(var)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct AtomKey {
    axis: Axis,
    factors: Vec<(String, u32)>,
    freq: u64,
    base: u64,
    quarter: u8,
    depth: u32,
}

#[derive(Debug, Clone)]
pub struct SepTerm {
    pub coef: f64,
    pub fx: Factor1D,
    pub fy: Factor1D,
}

/// Declares `big ≡ 1` on the support of `small`, so `big·small^(m) = small^(m)`
/// and `big^(j)·small^(m) = 0` for `j ≥ 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Absorption {
    pub big: String,
    pub small: String,
}

#[derive(Debug, Clone, Default)]
pub struct SeparableSum {
    pub terms: Vec<SepTerm>,
    pub absorptions: Vec<Absorption>,
}

/// One-dimensional operator applied factorwise.
#[derive(Debug, Clone)]
pub enum LineOp {
    Derivative(u32),
    /// Antiderivative of the given order; carriers with nonzero frequency are
    /// expanded by `ibp_terms` integrations by parts before the remainder is
    /// kept as a running integral (`0` keeps the running integral directly).
    Antiderivative { order: u32, ibp_terms: u32 },
    Multiply(Arc<Profile1D>),
}

/// Entries whose collected coefficient fell below the cancellation threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Cancellation {
    pub x: String,
    pub y: String,
    pub largest_part: f64,
    pub residual: f64,
}

/// Collected coefficients smaller than this fraction of their largest
/// contribution are treated as exact cancellations.
pub const CANCEL_TOL: f64 = 1e-13;

impl SeparableSum {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn single(coef: f64, fx: Factor1D, fy: Factor1D) -> Self {
        Self { terms: vec![SepTerm { coef, fx, fy }], absorptions: Vec::new() }
    }

    pub fn with_absorption(mut self, big: &Profile1D, small: &Profile1D) -> Self {
        let a = Absorption { big: big.label.clone(), small: small.label.clone() };
        if !self.absorptions.contains(&a) {
            self.absorptions.push(a);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn merged_rules(&self, other: &SeparableSum) -> Vec<Absorption> {
        let mut r = self.absorptions.clone();
        for a in &other.absorptions {
            if !r.contains(a) {
                r.push(a.clone());
            }
        }
        r
    }

    pub fn add(&self, other: &SeparableSum) -> SeparableSum {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        SeparableSum { terms, absorptions: self.merged_rules(other) }
    }

    pub fn scale(&self, s: f64) -> SeparableSum {
        let terms = self.terms.iter().map(|t| SepTerm { coef: t.coef * s, ..t.clone() }).collect();
        SeparableSum { terms, absorptions: self.absorptions.clone() }
    }

    pub fn sub(&self, other: &SeparableSum) -> SeparableSum {
        self.add(&other.scale(-1.0))
    }

    pub fn apply_x(&self, op: &LineOp) -> Result<SeparableSum> {
        self.apply(Axis::X, op)
    }

    pub fn apply_y(&self, op: &LineOp) -> Result<SeparableSum> {
        self.apply(Axis::Y, op)
    }

    fn apply(&self, axis: Axis, op: &LineOp) -> Result<SeparableSum> {
        let mut terms = Vec::new();
        for t in &self.terms {
            let f = if axis == Axis::X { &t.fx } else { &t.fy };
            for (c, nf) in apply_factor(f, op, &self.absorptions)? {
                let (fx, fy) = if axis == Axis::X { (nf, t.fy.clone()) } else { (t.fx.clone(), nf) };
                terms.push(SepTerm { coef: t.coef * c, fx, fy });
            }
        }
        Ok(SeparableSum { terms, absorptions: self.absorptions.clone() })
    }

    /// Pointwise product, expanded distributively.
    pub fn multiply(&self, other: &SeparableSum) -> Result<SeparableSum> {
        let rules = self.merged_rules(other);
        let mut terms = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                let xs = multiply_factors(&a.fx, &b.fx, &rules)?;
                let ys = multiply_factors(&a.fy, &b.fy, &rules)?;
                for (cx, fx) in &xs {
                    for (cy, fy) in &ys {
                        terms.push(SepTerm { coef: a.coef * b.coef * cx * cy, fx: fx.clone(), fy: fy.clone() });
                    }
                }
            }
        }
        Ok(SeparableSum { terms, absorptions: rules })
    }

    /// Merge like terms (after folding carriers to canonical form) and drop
    /// exact cancellations.
    pub fn collect(&self) -> (SeparableSum, Vec<Cancellation>) {
        let mut acc: BTreeMap<(AtomKey, AtomKey), (f64, f64, usize)> = BTreeMap::new();
        let mut reps: Vec<SepTerm> = Vec::new();
        for t in &self.terms {
            let Some((sx, fx)) = canonical_factor(&t.fx) else { continue };
            let Some((sy, fy)) = canonical_factor(&t.fy) else { continue };
            let c = t.coef * sx * sy;
            if c == 0.0 {
                continue;
            }
            let key = (fx.key(), fy.key());
            let e = acc.entry(key).or_insert_with(|| {
                reps.push(SepTerm { coef: 0.0, fx, fy });
                (0.0, 0.0, reps.len() - 1)
            });
            e.0 += c;
            e.1 = e.1.max(c.abs());
        }
        let mut out = Vec::new();
        let mut cancelled = Vec::new();
        let mut entries: Vec<_> = acc.into_values().collect();
        entries.sort_by_key(|e| e.2);
        for (sum, largest, idx) in entries {
            let rep = &reps[idx];
            if sum.abs() <= CANCEL_TOL * largest {
                cancelled.push(Cancellation { x: rep.fx.describe(), y: rep.fy.describe(), largest_part: largest, residual: sum });
            } else {
                out.push(SepTerm { coef: sum, fx: rep.fx.clone(), fy: rep.fy.clone() });
            }
        }
        (SeparableSum { terms: out, absorptions: self.absorptions.clone() }, cancelled)
    }

    pub fn collected(&self) -> SeparableSum {
        self.collect().0
    }

    /// Pointwise evaluator; builds running-integral tables for integrated factors.
    pub fn evaluator(&self) -> SumEvaluator {
        let mut tables = HashMap::new();
        for t in &self.terms {
            for f in [&t.fx, &t.fy] {
                if let FactorKind::Integrated { wave, depth } = &f.kind {
                    tables.entry(f.key()).or_insert_with(|| Arc::new(RunningIntegral::new(wave.clone(), *depth)));
                }
            }
        }
        SumEvaluator { terms: self.terms.clone(), tables }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.evaluator().eval(x, y)
    }

    /// Samples on `grid`; every factor support must lie inside the box.
    pub fn render(&self, grid: &Grid2D) -> Result<Field2D> {
        for t in &self.terms {
            for (f, g) in [(&t.fx, grid.gx), (&t.fy, grid.gy)] {
                if let Some((lo, hi)) = f.support() {
                    if lo < g.origin || hi > g.end() {
                        return Err(SeparableError::SupportOverflow {
                            axis: f.axis.name(),
                            lo,
                            hi,
                            box_lo: g.origin,
                            box_hi: g.end(),
                        });
                    }
                }
            }
        }
        let ev = self.evaluator();
        let xs = grid.gx.coords();
        let ys = grid.gy.coords();
        let mut values = vec![0.0; grid.len()];
        for t in &self.terms {
            let fx: Vec<f64> = xs.iter().map(|&x| ev.factor(&t.fx, x)).collect();
            let fy: Vec<f64> = ys.iter().map(|&y| ev.factor(&t.fy, y)).collect();
            for (iy, vy) in fy.iter().enumerate() {
                if *vy == 0.0 {
                    continue;
                }
                let row = &mut values[iy * grid.gx.n..(iy + 1) * grid.gx.n];
                let s = t.coef * vy;
                for (r, vx) in row.iter_mut().zip(&fx) {
                    *r += s * vx;
                }
            }
        }
        Ok(Field2D { grid: *grid, values })
    }

    /// `‖·‖_{L²(ℝ²)}` via Gram matrices.
    pub fn l2_norm(&self, policy: &GramPolicy) -> NormEstimate {
        let (sq, bound) = self.inner(self, policy);
        NormEstimate { value: sq.max(0.0).sqrt(), bound: bound_on_sqrt(sq, bound) }
    }

    /// `⟨self, other⟩_{L²(ℝ²)}` and an absolute error bound.
    pub fn inner(&self, other: &SeparableSum, policy: &GramPolicy) -> (f64, f64) {
        let all: Vec<&SepTerm> = self.terms.iter().chain(other.terms.iter()).collect();
        if self.terms.is_empty() || other.terms.is_empty() {
            return (0.0, 0.0);
        }
        let (xi, xatoms) = distinct_atoms(all.iter().map(|t| &t.fx));
        let (yi, yatoms) = distinct_atoms(all.iter().map(|t| &t.fy));
        let gx = axis_gram(&xatoms, policy);
        let gy = axis_gram(&yatoms, policy);
        let n = self.terms.len();
        let mut value = 0.0;
        let mut bound = 0.0;
        for (i, a) in self.terms.iter().enumerate() {
            for (j, b) in other.terms.iter().enumerate() {
                let (p, q) = (xi[i], xi[n + j]);
                let (r, s) = (yi[i], yi[n + j]);
                let cx = gx.value(p, q);
                let cy = gy.value(r, s);
                let c = a.coef * b.coef;
                value += c * cx * cy;
                bound += (c * cx).abs() * gy.bound(r, s) + (c * cy).abs() * gx.bound(p, q) + (c * gx.bound(p, q) * gy.bound(r, s)).abs();
            }
        }
        (value, bound)
    }

    /// JSON dump of the term list.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Row {
            coefficient: f64,
            x: String,
            y: String,
        }
        let rows: Vec<Row> = self.terms.iter().map(|t| Row { coefficient: t.coef, x: t.fx.describe(), y: t.fy.describe() }).collect();
        serde_json::to_value(rows).expect("serializable rows")
    }
}

/// `‖f‖_{L²(ℝ)}` of a single factor.
pub fn factor_norm(f: &Factor1D, policy: &GramPolicy) -> NormEstimate {
    let g = axis_gram(std::slice::from_ref(f), policy);
    let sq = g.value(0, 0);
    NormEstimate { value: sq.max(0.0).sqrt(), bound: bound_on_sqrt(sq, g.bound(0, 0)) }
}

fn bound_on_sqrt(sq: f64, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        let lo = (sq - bound).max(0.0).sqrt();
        let hi = (sq + bound).max(0.0).sqrt();
        let mid = sq.max(0.0).sqrt();
        (hi - mid).max(mid - lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    /// Absolute bound on the part of the norm replaced by an
    /// integration-by-parts estimate (zero when every entry was integrated).
    pub bound: f64,
}

fn canonical_factor(f: &Factor1D) -> Option<(f64, Factor1D)> {
    let w = f.inner_wave();
    let mut factors = w.factors.clone();
    factors.sort_by(|a, b| a.0.label.cmp(&b.0.label).then(a.1.cmp(&b.1)));
    match &f.kind {
        FactorKind::Wave(_) => {
            let (s, trig) = w.trig.canonical();
            if s == 0.0 {
                return None;
            }
            Some((s, Factor1D { axis: f.axis, kind: FactorKind::Wave(Wave { factors, trig }) }))
        }
        FactorKind::Integrated { depth, .. } => {
            let (s, trig) = w.trig.canonical();
            if s == 0.0 {
                return None;
            }
            Some((s, Factor1D { axis: f.axis, kind: FactorKind::Integrated { wave: Wave { factors, trig }, depth: *depth } }))
        }
    }
}

/// Apply the absorption rules to a factor list; `None` means the product vanishes.
fn absorb(mut factors: Vec<(Arc<Profile1D>, u32)>, rules: &[Absorption]) -> Option<Vec<(Arc<Profile1D>, u32)>> {
    for r in rules {
        if !factors.iter().any(|(p, _)| p.label == r.small) {
            continue;
        }
        if factors.iter().any(|(p, m)| p.label == r.big && *m > 0) {
            return None;
        }
        factors.retain(|(p, _)| p.label != r.big);
    }
    Some(factors)
}

fn multiply_factors(a: &Factor1D, b: &Factor1D, rules: &[Absorption]) -> Result<Vec<(f64, Factor1D)>> {
    let (FactorKind::Wave(wa), FactorKind::Wave(wb)) = (&a.kind, &b.kind) else {
        return Err(SeparableError::Unsupported("product with a running integral".into()));
    };
    let mut factors = wa.factors.clone();
    factors.extend(wb.factors.iter().cloned());
    let Some(factors) = absorb(factors, rules) else { return Ok(Vec::new()) };
    Ok(wa
        .trig
        .product(&wb.trig)
        .into_iter()
        .map(|t| (0.5, Factor1D { axis: a.axis, kind: FactorKind::Wave(Wave { factors: factors.clone(), trig: t }) }))
        .collect())
}

fn apply_factor(f: &Factor1D, op: &LineOp, rules: &[Absorption]) -> Result<Vec<(f64, Factor1D)>> {
    match op {
        LineOp::Derivative(k) => {
            let mut cur = vec![(1.0, f.clone())];
            for _ in 0..*k {
                let mut next = Vec::new();
                for (c, g) in cur {
                    next.extend(differentiate(&g).into_iter().map(|(d, h)| (c * d, h)));
                }
                cur = next;
            }
            Ok(cur)
        }
        LineOp::Antiderivative { order, ibp_terms } => {
            let mut cur = vec![(1.0, f.clone())];
            for _ in 0..*order {
                let mut next = Vec::new();
                for (c, g) in cur {
                    next.extend(antidifferentiate(&g, *ibp_terms)?.into_iter().map(|(d, h)| (c * d, h)));
                }
                cur = next;
            }
            Ok(cur)
        }
        LineOp::Multiply(p) => match &f.kind {
            FactorKind::Wave(w) => {
                let mut factors = w.factors.clone();
                factors.push((p.clone(), 0));
                Ok(absorb(factors, rules)
                    .map(|factors| vec![(1.0, Factor1D { axis: f.axis, kind: FactorKind::Wave(Wave { factors, trig: w.trig }) })])
                    .unwrap_or_default())
            }
            FactorKind::Integrated { .. } => Err(SeparableError::Unsupported("product with a running integral".into())),
        },
    }
}

fn differentiate(f: &Factor1D) -> Vec<(f64, Factor1D)> {
    match &f.kind {
        FactorKind::Wave(w) => w.derivative().into_iter().map(|(c, w)| (c, Factor1D::wave(f.axis, w))).collect(),
        FactorKind::Integrated { wave, depth } => {
            let kind = if *depth == 1 {
                FactorKind::Wave(wave.clone())
            } else {
                FactorKind::Integrated { wave: wave.clone(), depth: depth - 1 }
            };
            vec![(1.0, Factor1D { axis: f.axis, kind })]
        }
    }
}

fn antidifferentiate(f: &Factor1D, ibp_terms: u32) -> Result<Vec<(f64, Factor1D)>> {
    match &f.kind {
        FactorKind::Integrated { wave, depth } => {
            if *depth >= 2 {
                return Err(SeparableError::Unsupported("running integrals deeper than two".into()));
            }
            check_gate(wave, depth + 1)?;
            Ok(vec![(1.0, Factor1D { axis: f.axis, kind: FactorKind::Integrated { wave: wave.clone(), depth: depth + 1 } })])
        }
        FactorKind::Wave(w) => {
            if w.factors.is_empty() {
                return Err(SeparableError::Moment("antiderivative of a pure carrier".into()));
            }
            if w.trig.freq == 0.0 || ibp_terms == 0 || w.factors.len() != 1 {
                check_gate(w, 1)?;
                return Ok(vec![(1.0, Factor1D { axis: f.axis, kind: FactorKind::Integrated { wave: w.clone(), depth: 1 } })]);
            }
            // ∫E cos(ks+θ) = Σ_j (−1)^j k^{-(j+1)} E^(j) cos(ks+θ−(j+1)π/2)
            //               + (−1)^N k^{-N} ∫E^(N) cos(ks+θ−Nπ/2).
            let k = w.trig.freq;
            let (p, m) = w.factors[0].clone();
            let mut out = Vec::new();
            for j in 0..ibp_terms {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let wave = Wave::new(p.clone(), m + j, w.trig.shifted(-(j as i32 + 1)));
                out.push((sign / k.powi(j as i32 + 1), Factor1D::wave(f.axis, wave)));
            }
            let n = ibp_terms;
            let rem = Wave::new(p, m + n, w.trig.shifted(-(n as i32)));
            check_gate(&rem, 1)?;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            out.push((sign / k.powi(n as i32), Factor1D { axis: f.axis, kind: FactorKind::Integrated { wave: rem, depth: 1 } }));
            Ok(out)
        }
    }
}

/// Verifies that the `depth`-fold running integral of `w` is compactly
/// supported: `∫w = 0`, and `∫s·w = 0` when `depth = 2`.
fn check_gate(w: &Wave, depth: u32) -> Result<()> {
    if depth > 2 {
        return Err(SeparableError::Unsupported("running integrals deeper than two".into()));
    }
    if w.factors.len() == 1 {
        let (p, m) = &w.factors[0];
        if w.trig.freq == 0.0 {
            let c = w.trig.eval(0.0);
            let (m0, m1) = match m {
                0 => (p.moment0, p.moment1),
                1 => (0.0, -p.moment0),
                _ => (0.0, 0.0),
            };
            let (lo, hi) = p.hull();
            let scale0 = p.peak() * (hi - lo);
            let scale1 = scale0 * lo.abs().max(hi.abs());
            if (c * m0).abs() > MOMENT_TOL * scale0 {
                return Err(SeparableError::Moment(format!("∫{} = {:e}", short_label(&p.label), c * m0)));
            }
            if depth == 2 && (c * m1).abs() > MOMENT_TOL * scale1 {
                return Err(SeparableError::Moment(format!("∫s·{} = {:e}", short_label(&p.label), c * m1)));
            }
            return Ok(());
        }
        if copies_certified(p, w.trig.freq, depth) {
            return Ok(());
        }
    }
    numeric_gate(w, depth)
}

/// True when the profile is a weighted sum of identical bumps whose shifts
/// are whole periods of `freq`, with weights summing to zero (and zero
/// weighted shift when `depth = 2`); every oscillatory moment then vanishes.
fn copies_certified(p: &Profile1D, freq: f64, depth: u32) -> bool {
    let Some((_, first)) = p.copies.first() else { return false };
    let width = first.hi - first.lo;
    let c0 = first.center();
    let scale = p.copies.iter().map(|(w, _)| w.abs()).fold(0.0, f64::max);
    let mut wsum = 0.0;
    let mut wshift = 0.0;
    for (w, b) in &p.copies {
        if (b.hi - b.lo - width).abs() > 1e-12 * width.max(1.0) || (b.ramp - first.ramp).abs() > 1e-12 * first.ramp {
            return false;
        }
        let shift = b.center() - c0;
        let turns = freq * shift / (2.0 * PI);
        if (turns - turns.round()).abs() > 1e-9 {
            return false;
        }
        wsum += w;
        wshift += w * shift;
    }
    let span = p.hull().1 - p.hull().0;
    wsum.abs() <= 1e-12 * scale && (depth < 2 || wshift.abs() <= 1e-12 * scale * span)
}

fn numeric_gate(w: &Wave, depth: u32) -> Result<()> {
    let Some((lo, hi)) = w.hull() else { return Ok(()) };
    if w.factors.len() == 1 && w.factors[0].1 == 0 {
        let p = &w.factors[0].0;
        let (m0, m1) = check_moments(p, w.trig.freq, w.trig.base + w.trig.quarter as f64 * FRAC_PI_2);
        let scale = p.peak() * (hi - lo);
        if m0.abs() > 1e-9 * scale || (depth == 2 && m1.abs() > 1e-9 * scale * lo.abs().max(hi.abs())) {
            return Err(SeparableError::Moment(format!("oscillatory moments ({m0:e}, {m1:e})")));
        }
        return Ok(());
    }
    let ri = RunningIntegral::new(w.clone(), depth);
    let (i1, i2) = ri.totals();
    let peak = ri.peak_inner.max(f64::MIN_POSITIVE);
    if i1.abs() > 1e-9 * peak * (hi - lo) || (depth == 2 && i2.abs() > 1e-9 * peak * (hi - lo).powi(2)) {
        return Err(SeparableError::Moment(format!("running integral does not close: ({i1:e}, {i2:e})")));
    }
    Ok(())
}

/// Running integral `∂^{-depth}` of a wave, tabulated at panel edges; inside
/// a panel the remainder is a single Gauss–Legendre sum:
/// `I₂(x) = I₂(a) + I₁(a)(x − a) + ∫_a^x (x − s) w(s) ds`.
#[derive(Debug, Clone)]
pub struct RunningIntegral {
    wave: Wave,
    depth: u32,
    edges: Vec<f64>,
    i1: Vec<f64>,
    i2: Vec<f64>,
    peak_inner: f64,
}

impl RunningIntegral {
    pub fn new(wave: Wave, depth: u32) -> Self {
        let rule = GaussLegendre::panel();
        let (lo, hi) = wave.hull().unwrap_or((0.0, 0.0));
        let ramp = wave.factors.iter().map(|(p, _)| p.min_ramp()).fold(f64::INFINITY, f64::min);
        let mut width = ramp / 32.0;
        if wave.trig.freq != 0.0 {
            width = width.min(FRAC_PI_2 / wave.trig.freq);
        }
        let edges = if hi > lo { panel_edges(lo, hi, width) } else { vec![lo, lo] };
        let mut i1 = vec![0.0];
        let mut i2 = vec![0.0];
        let mut peak: f64 = 0.0;
        for e in edges.windows(2) {
            let (a, b) = (e[0], e[1]);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for (x, wq) in rule.mapped_nodes(a, b).zip(&rule.weights) {
                let v = wave.eval(x);
                peak = peak.max(v.abs());
                s1 += wq * v;
                s2 += wq * (b - x) * v;
            }
            let h = 0.5 * (b - a);
            let last1 = *i1.last().unwrap();
            let last2 = *i2.last().unwrap();
            i2.push(last2 + last1 * (b - a) + h * s2);
            i1.push(last1 + h * s1);
        }
        Self { wave, depth, edges, i1, i2, peak_inner: peak }
    }

    fn totals(&self) -> (f64, f64) {
        (*self.i1.last().unwrap(), *self.i2.last().unwrap())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = (self.edges[0], *self.edges.last().unwrap());
        if x <= lo || x >= hi {
            return 0.0;
        }
        let p = self.edges.partition_point(|&e| e <= x) - 1;
        let a = self.edges[p];
        let rule = GaussLegendre::panel();
        let h = 0.5 * (x - a);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (s, wq) in rule.mapped_nodes(a, x).zip(&rule.weights) {
            let v = self.wave.eval(s);
            s1 += wq * v;
            s2 += wq * (x - s) * v;
        }
        match self.depth {
            1 => self.i1[p] + h * s1,
            _ => self.i2[p] + self.i1[p] * (x - a) + h * s2,
        }
    }
}

/// Pointwise evaluation of a sum with its running-integral tables.
pub struct SumEvaluator {
    terms: Vec<SepTerm>,
    tables: HashMap<AtomKey, Arc<RunningIntegral>>,
}

impl SumEvaluator {
    pub fn factor(&self, f: &Factor1D, s: f64) -> f64 {
        match &f.kind {
            FactorKind::Wave(w) => w.eval(s),
            FactorKind::Integrated { .. } => self.tables[&f.key()].eval(s),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.terms.iter().map(|t| t.coef * self.factor(&t.fx, x) * self.factor(&t.fy, y)).sum()
    }
}

/// Resolution and cost limits for Gram matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GramPolicy {
    /// Panels per narrowest ramp.
    pub ramp_panels: f64,
    /// Largest number of oscillation-resolving panels for one y-carrier
    /// frequency before its entries are replaced by their bound.
    pub max_panels: usize,
}

impl Default for GramPolicy {
    fn default() -> Self {
        Self { ramp_panels: 32.0, max_panels: 20_000 }
    }
}

fn distinct_atoms<'a, I: Iterator<Item = &'a Factor1D>>(it: I) -> (Vec<usize>, Vec<Factor1D>) {
    let mut map: HashMap<AtomKey, usize> = HashMap::new();
    let mut atoms = Vec::new();
    let mut idx = Vec::new();
    for f in it {
        let k = f.key();
        let i = *map.entry(k).or_insert_with(|| {
            atoms.push(f.clone());
            atoms.len() - 1
        });
        idx.push(i);
    }
    (idx, atoms)
}

/// Symmetric matrix of 1-D inner products with per-entry bounds.
#[derive(Debug, Clone)]
pub struct Gram {
    n: usize,
    values: Vec<f64>,
    bounds: Vec<f64>,
}

impl Gram {
    fn new(n: usize) -> Self {
        Self { n, values: vec![0.0; n * n], bounds: vec![0.0; n * n] }
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn bound(&self, i: usize, j: usize) -> f64 {
        self.bounds[i * self.n + j]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] += v;
        if i != j {
            self.values[j * self.n + i] += v;
        }
    }

    fn add_bound(&mut self, i: usize, j: usize, v: f64) {
        self.bounds[i * self.n + j] += v;
        if i != j {
            self.bounds[j * self.n + i] += v;
        }
    }
}

/// Gram matrix of factors on one axis. x-factors are always integrated
/// exactly; y-factors switch to the harmonic path when resolving the fastest
/// carrier would exceed the panel budget.
pub fn axis_gram(atoms: &[Factor1D], policy: &GramPolicy) -> Gram {
    let zones = Zones::new(atoms);
    let any_integrated = atoms.iter().any(|a| a.depth() > 0);
    let fmax = atoms.iter().map(|a| a.inner_wave().trig.freq).fold(0.0, f64::max);
    let sweep_panels = if fmax > 0.0 { zones.ramp_length * 2.0 * fmax / PI } else { 0.0 };
    let x_axis = atoms.first().is_some_and(|a| a.axis == Axis::X);
    if any_integrated || x_axis || sweep_panels <= policy.max_panels as f64 {
        sweep_gram(atoms, &zones, policy)
    } else {
        harmonic_gram(atoms, &zones, policy)
    }
}

/// Ramp intervals (where some profile varies) and flat stretches.
struct Zones {
    /// `(a, b, is_ramp)` covering the hull in order.
    list: Vec<(f64, f64, bool)>,
    ramp_length: f64,
    min_ramp: f64,
    profiles: Vec<Arc<Profile1D>>,
}

impl Zones {
    fn new(atoms: &[Factor1D]) -> Self {
        let mut profiles: Vec<Arc<Profile1D>> = Vec::new();
        for a in atoms {
            for (p, _) in &a.inner_wave().factors {
                if !profiles.iter().any(|q| q.label == p.label) {
                    profiles.push(p.clone());
                }
            }
        }
        let mut ramps = Vec::new();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut min_ramp = f64::INFINITY;
        for p in &profiles {
            for (_, b) in &p.copies {
                ramps.push((b.lo - b.ramp, b.lo));
                ramps.push((b.hi, b.hi + b.ramp));
                min_ramp = min_ramp.min(b.ramp);
            }
            let (a, c) = p.hull();
            lo = lo.min(a);
            hi = hi.max(c);
        }
        ramps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (a, b) in ramps {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        let mut list = Vec::new();
        let mut cur = lo;
        let mut ramp_length = 0.0;
        for (a, b) in merged {
            if a > cur {
                list.push((cur, a, false));
            }
            list.push((a.max(cur), b, true));
            ramp_length += b - a.max(cur);
            cur = b;
        }
        if hi > cur {
            list.push((cur, hi, false));
        }
        Self { list, ramp_length, min_ramp, profiles }
    }
}

/// Polynomial in `u = s − a` times a carrier in the absolute coordinate.
#[derive(Debug, Clone)]
struct Piece {
    poly: Vec<f64>,
    trig: Trig,
}

fn poly_eval(p: &[f64], u: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

fn poly_deriv(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(k, c)| c * k as f64).collect()
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    if p.is_empty() || q.is_empty() {
        return Vec::new();
    }
    let mut r = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            r[i + j] += a * b;
        }
    }
    r
}

fn pieces_eval(pieces: &[Piece], a: f64, s: f64) -> f64 {
    pieces.iter().map(|p| poly_eval(&p.poly, s - a) * p.trig.eval(s)).sum()
}

/// Antiderivative of `Σ pieces` on a flat zone starting at `a`, vanishing at `a`.
fn integrate_pieces(pieces: &[Piece], a: f64) -> Vec<Piece> {
    let mut out: Vec<Piece> = Vec::new();
    let mut constant = 0.0;
    for p in pieces {
        let k = p.trig.freq;
        if k == 0.0 {
            let c = p.trig.eval(0.0);
            let mut q = vec![0.0];
            q.extend(p.poly.iter().enumerate().map(|(i, v)| c * v / (i + 1) as f64));
            out.push(Piece { poly: q, trig: Trig::ONE });
        } else {
            // ∫P cos(ks+θ) = Σ_j (−1)^j P^(j) cos(ks+θ−(j+1)π/2)/k^{j+1}.
            let mut d = p.poly.clone();
            let mut j = 0;
            while !d.is_empty() {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let poly: Vec<f64> = d.iter().map(|v| sign * v / k.powi(j + 1)).collect();
                let trig = p.trig.shifted(-(j + 1));
                constant -= poly_eval(&poly, 0.0) * trig.eval(a);
                out.push(Piece { poly, trig });
                d = poly_deriv(&d);
                j += 1;
            }
        }
    }
    out.push(Piece { poly: vec![constant], trig: Trig::ONE });
    out
}

/// `∫_a^b P(s − a) cos(F s + Θ)` in closed form.
fn closed_integral(poly: &[f64], trig: Trig, a: f64, b: f64) -> f64 {
    let anti = integrate_pieces(&[Piece { poly: poly.to_vec(), trig }], a);
    pieces_eval(&anti, a, b)
}

fn flat_pair_integral(pi: &[Piece], pj: &[Piece], a: f64, b: f64) -> f64 {
    let mut acc = 0.0;
    for p in pi {
        for q in pj {
            let poly = poly_mul(&p.poly, &q.poly);
            for t in p.trig.product(&q.trig) {
                acc += 0.5 * closed_integral(&poly, t, a, b);
            }
        }
    }
    acc
}

/// Node values of every profile derivative needed, per panel.
struct ProfileNodes {
    /// `vals[profile][order][node]`.
    vals: Vec<Vec<Vec<f64>>>,
}

impl ProfileNodes {
    fn compute(profiles: &[Arc<Profile1D>], orders: &[u32], nodes: &[f64]) -> Self {
        let vals = profiles
            .iter()
            .zip(orders)
            .map(|(p, &mo)| {
                let mut per = vec![vec![0.0; nodes.len()]; mo as usize + 1];
                for (q, &x) in nodes.iter().enumerate() {
                    let j = p.jet(x);
                    for (m, row) in per.iter_mut().enumerate() {
                        row[q] = j.derivative(m);
                    }
                }
                per
            })
            .collect();
        Self { vals }
    }
}

fn profile_index(profiles: &[Arc<Profile1D>], label: &str) -> usize {
    profiles.iter().position(|p| p.label == label).expect("profile registered")
}

fn wave_values(w: &Wave, idx: &[(usize, usize)], pn: &ProfileNodes, nodes: &[f64], out: &mut [f64]) {
    for (q, &x) in nodes.iter().enumerate() {
        let mut v = 1.0;
        for &(i, m) in idx {
            v *= pn.vals[i][m][q];
            if v == 0.0 {
                break;
            }
        }
        out[q] = if v == 0.0 { 0.0 } else { v * w.trig.eval(x) };
    }
}

fn flat_wave_pieces(w: &Wave, a: f64, b: f64) -> Vec<Piece> {
    if w.factors.iter().any(|(_, m)| *m > 0) {
        return Vec::new();
    }
    let mid = 0.5 * (a + b);
    let c: f64 = w.factors.iter().map(|(p, _)| p.eval(mid)).product();
    if c == 0.0 {
        Vec::new()
    } else {
        vec![Piece { poly: vec![c], trig: w.trig }]
    }
}

fn sweep_gram(atoms: &[Factor1D], zones: &Zones, policy: &GramPolicy) -> Gram {
    let n = atoms.len();
    let mut g = Gram::new(n);
    let profiles = &zones.profiles;
    let mut orders = vec![0u32; profiles.len()];
    for a in atoms {
        for (p, m) in &a.inner_wave().factors {
            let i = profile_index(profiles, &p.label);
            orders[i] = orders[i].max(*m);
        }
    }
    let idx: Vec<Vec<(usize, usize)>> = atoms
        .iter()
        .map(|a| a.inner_wave().factors.iter().map(|(p, m)| (profile_index(profiles, &p.label), *m as usize)).collect())
        .collect();
    let fmax = atoms.iter().map(|a| a.inner_wave().trig.freq).fold(0.0, f64::max);
    let mut width = zones.min_ramp / policy.ramp_panels;
    if fmax > 0.0 {
        width = width.min(FRAC_PI_2 / fmax);
    }
    let rule = GaussLegendre::panel();
    let nq = rule.len();
    // Running integral state (I₁, I₂) per atom.
    let mut state = vec![(0.0, 0.0); n];
    let mut inner = vec![0.0; nq];
    let mut vals = vec![vec![0.0; nq]; n];
    let mut nodes = vec![0.0; nq];
    for &(za, zb, is_ramp) in &zones.list {
        if is_ramp {
            for e in panel_edges(za, zb, width).windows(2) {
                let (a, b) = (e[0], e[1]);
                let h = 0.5 * (b - a);
                for (q, x) in rule.mapped_nodes(a, b).enumerate() {
                    nodes[q] = x;
                }
                let pn = ProfileNodes::compute(profiles, &orders, &nodes);
                for (k, atom) in atoms.iter().enumerate() {
                    let w = atom.inner_wave();
                    match atom.depth() {
                        0 => wave_values(w, &idx[k], &pn, &nodes, &mut vals[k]),
                        d => {
                            wave_values(w, &idx[k], &pn, &nodes, &mut inner);
                            let (s1, s2) = state[k];
                            let mut i1n = [0.0; 32];
                            for q in 0..nq {
                                let part: f64 = (0..nq).map(|r| rule.partial[q * nq + r] * inner[r]).sum();
                                i1n[q] = s1 + h * part;
                            }
                            if d == 1 {
                                vals[k][..nq].copy_from_slice(&i1n[..nq]);
                            } else {
                                for q in 0..nq {
                                    let part: f64 = (0..nq).map(|r| rule.partial[q * nq + r] * i1n[r]).sum();
                                    vals[k][q] = s2 + h * part;
                                }
                            }
                            let tot1: f64 = rule.weights.iter().zip(&inner).map(|(w, v)| w * v).sum();
                            let tot2: f64 = rule.weights.iter().zip(&i1n[..nq]).map(|(w, v)| w * v).sum();
                            state[k] = (s1 + h * tot1, s2 + h * tot2);
                        }
                    }
                }
                for i in 0..n {
                    if vals[i].iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    for j in i..n {
                        let s: f64 = (0..nq).map(|q| rule.weights[q] * vals[i][q] * vals[j][q]).sum();
                        if s != 0.0 {
                            g.add(i, j, h * s);
                        }
                    }
                }
            }
        } else {
            let pieces: Vec<Vec<Piece>> = atoms
                .iter()
                .enumerate()
                .map(|(k, atom)| {
                    let w = atom.inner_wave();
                    let base = flat_wave_pieces(w, za, zb);
                    match atom.depth() {
                        0 => base,
                        d => {
                            let (s1, s2) = state[k];
                            let mut i1 = integrate_pieces(&base, za);
                            i1.push(Piece { poly: vec![s1], trig: Trig::ONE });
                            let end1 = pieces_eval(&i1, za, zb);
                            if d == 1 {
                                state[k] = (end1, s2);
                                i1
                            } else {
                                let mut i2 = integrate_pieces(&i1, za);
                                i2.push(Piece { poly: vec![s2], trig: Trig::ONE });
                                state[k] = (end1, pieces_eval(&i2, za, zb));
                                i2
                            }
                        }
                    }
                })
                .collect();
            for i in 0..n {
                if pieces[i].is_empty() {
                    continue;
                }
                for j in i..n {
                    if pieces[j].is_empty() {
                        continue;
                    }
                    let v = flat_pair_integral(&pieces[i], &pieces[j], za, zb);
                    g.add(i, j, v);
                }
            }
        }
    }
    g
}

/// Gram matrix of waves through harmonic decomposition: for each pair,
/// `½∫EᵢEⱼ[cos(ΔF s + ΔΘ) + cos(ΣF s + ΣΘ)]`, integrating the slow part and
/// resolvable fast parts exactly and bounding the rest.
fn harmonic_gram(atoms: &[Factor1D], zones: &Zones, policy: &GramPolicy) -> Gram {
    let n = atoms.len();
    let mut g = Gram::new(n);
    let rule = GaussLegendre::panel();
    let width = zones.min_ramp / policy.ramp_panels;
    // Envelope values and first two derivatives at slow nodes on the ramps.
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for &(za, zb, is_ramp) in &zones.list {
        if !is_ramp {
            continue;
        }
        for e in panel_edges(za, zb, width).windows(2) {
            let h = 0.5 * (e[1] - e[0]);
            for (x, w) in rule.mapped_nodes(e[0], e[1]).zip(&rule.weights) {
                nodes.push(x);
                weights.push(w * h);
            }
        }
    }
    let env: Vec<Vec<[f64; 3]>> = atoms
        .iter()
        .map(|a| {
            nodes
                .iter()
                .map(|&x| {
                    let j = a.inner_wave().envelope_jet(x);
                    [j.derivative(0), j.derivative(1), j.derivative(2)]
                })
                .collect()
        })
        .collect();
    let flat: Vec<Vec<(f64, f64, f64)>> = atoms
        .iter()
        .map(|a| {
            zones
                .list
                .iter()
                .filter(|z| !z.2)
                .map(|&(za, zb, _)| {
                    let w = a.inner_wave();
                    let c = if w.max_order() > 0 { 0.0 } else { w.envelope(0.5 * (za + zb)) };
                    (za, zb, c)
                })
                .collect()
        })
        .collect();
    let mut fast: BTreeMap<u64, Vec<(usize, usize, f64, Trig)>> = BTreeMap::new();
    for i in 0..n {
        for j in i..n {
            let ti = atoms[i].inner_wave().trig;
            let tj = atoms[j].inner_wave().trig;
            for t in ti.product(&tj) {
                let (s, t) = t.canonical();
                if s == 0.0 {
                    continue;
                }
                if t.freq == 0.0 {
                    let slow: f64 = (0..nodes.len()).map(|q| weights[q] * env[i][q][0] * env[j][q][0]).sum();
                    let flat_part: f64 = flat[i].iter().zip(&flat[j]).map(|(a, b)| a.2 * b.2 * (a.1 - a.0)).sum();
                    g.add(i, j, 0.5 * s * (slow + flat_part));
                } else {
                    fast.entry(t.freq.to_bits()).or_default().push((i, j, s, t));
                }
            }
        }
    }
    for (fbits, pairs) in fast {
        let f = f64::from_bits(fbits);
        let panels = zones.ramp_length * 2.0 * f / PI;
        if panels <= policy.max_panels as f64 {
            let w = width.min(FRAC_PI_2 / f);
            let mut fnodes = Vec::new();
            let mut fweights = Vec::new();
            for &(za, zb, is_ramp) in &zones.list {
                if !is_ramp {
                    continue;
                }
                for e in panel_edges(za, zb, w).windows(2) {
                    let h = 0.5 * (e[1] - e[0]);
                    for (x, wq) in rule.mapped_nodes(e[0], e[1]).zip(&rule.weights) {
                        fnodes.push(x);
                        fweights.push(wq * h);
                    }
                }
            }
            let fenv: Vec<Vec<f64>> = atoms.iter().map(|a| fnodes.iter().map(|&x| a.inner_wave().envelope(x)).collect()).collect();
            for (i, j, s, t) in pairs {
                let ramp: f64 = (0..fnodes.len()).map(|q| fweights[q] * fenv[i][q] * fenv[j][q] * t.eval(fnodes[q])).sum();
                let flat_part: f64 = flat[i]
                    .iter()
                    .zip(&flat[j])
                    .filter(|(a, b)| a.2 * b.2 != 0.0)
                    .map(|(a, b)| closed_integral(&[a.2 * b.2], t, a.0, a.1))
                    .sum();
                g.add(i, j, 0.5 * s * (ramp + flat_part));
            }
        } else {
            for (i, j, _, _) in pairs {
                let l1: f64 = (0..nodes.len())
                    .map(|q| {
                        let (a, b) = (env[i][q], env[j][q]);
                        weights[q] * (a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2]).abs()
                    })
                    .sum();
                g.add_bound(i, j, 0.5 * l1 / (f * f));
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bump::{make_phi_lambda, make_psi_lambda, make_psi_tilde, ApproxParams, LowProfileKind};
    use crate::quadrature::integrate_adaptive;
    use crate::spectral::Grid1D;

    fn setup(l: f64) -> (ApproxParams, Arc<Profile1D>, Arc<Profile1D>, Arc<Profile1D>) {
        let p = ApproxParams::new(l, 1.0, 0.6, 1.3).unwrap();
        (p, Arc::new(make_psi_lambda(&p)), Arc::new(make_psi_tilde(&p, LowProfileKind::Covering)), Arc::new(make_phi_lambda(&p)))
    }

    fn packet(l: f64) -> SeparableSum {
        let (_, psi, _, phi) = setup(l);
        let k = 3f64.sqrt() * l * l;
        SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi.clone(), 0, Trig::cos(l, 0.0)), Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::cos(k, 0.3)))
            .add(&SeparableSum::single(-1.0, Factor1D::profile(Axis::X, psi, 0, Trig::sin(l, 0.0)), Factor1D::profile(Axis::Y, phi, 0, Trig::sin(k, 0.3))))
    }

    fn quad_norm_1d<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panel: f64) -> f64 {
        integrate_adaptive(|x| f(x).powi(2), a, b, 1e-13, panel).value
    }

    #[test]
    fn trig_canonical_folding() {
        let t = Trig { freq: -2.0, base: 0.5, quarter: 2 };
        let (s, c) = t.canonical();
        for x in [0.1, 0.7, 2.0] {
            assert!((s * c.eval(x) - t.eval(x)).abs() < 1e-14);
        }
        assert!(c.freq > 0.0 && c.quarter < 2);
        let (s, c) = Trig { freq: 0.0, base: 0.0, quarter: 1 }.canonical();
        assert_eq!(s * c.eval(1.0), 0.0);
        for q in 0..4 {
            let a = Trig { freq: 3.0, base: 0.2, quarter: q };
            let b = Trig { freq: 1.0, base: -0.4, quarter: (q + 1) % 4 };
            let [d, e] = a.product(&b);
            for x in [0.3, 1.1] {
                assert!((a.eval(x) * b.eval(x) - 0.5 * (d.eval(x) + e.eval(x))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn add_and_evaluate() {
        let a = packet(2.0);
        let z = SeparableSum::zero();
        assert_eq!(a.add(&z).len(), a.len());
        let b = a.scale(0.5);
        assert_eq!(a.add(&b).len(), 4);
        for &(x, y) in &[(0.3, -0.2), (-40.0, 1.0), (1.7, 3.3)] {
            assert!((a.add(&b).eval(x, y) - 1.5 * a.eval(x, y)).abs() < 1e-14);
        }
        // cos(a)cos(b) − sin(a)sin(b) = cos(a + b).
        let (_, psi, _, phi) = setup(2.0);
        let k = 3f64.sqrt() * 4.0;
        let (x, y) = (0.4, 0.9);
        let expect = psi.eval(x) * phi.eval(y) * (2.0 * x + k * y + 0.3).cos();
        assert!((a.eval(x, y) - expect).abs() < 1e-14);
    }

    #[test]
    fn derivative_product_rule() {
        let (_, psi, _, phi) = setup(2.0);
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi.clone(), 0, Trig::cos(2.0, 0.0)), Factor1D::profile(Axis::Y, phi, 0, Trig::ONE));
        let d = s.apply_x(&LineOp::Derivative(1)).unwrap();
        assert_eq!(d.len(), 2);
        let x = psi.copies[0].1.hi + 0.3;
        let expect = psi.derivative(x, 1) * (2.0 * x).cos() - 2.0 * psi.eval(x) * (2.0 * x).sin();
        assert!((d.eval(x, 0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn antiderivative_expansion_matches_cumulative_quadrature() {
        let (p, psi, _, phi) = setup(2.0);
        let l = p.lambda;
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi.clone(), 0, Trig::cos(l, 0.7)), Factor1D::profile(Axis::Y, phi, 0, Trig::ONE));
        let a = s.apply_x(&LineOp::Antiderivative { order: 1, ibp_terms: 3 }).unwrap();
        assert_eq!(a.len(), 4);
        let (lo, _) = psi.hull();
        let ev = a.evaluator();
        for &x in &[psi.copies[0].1.hi + 0.5, psi.copies[1].1.lo - 0.2, -10.0, 2.0] {
            let oracle = integrate_adaptive(|s| psi.eval(s) * (l * s + 0.7).cos(), lo, x, 1e-14, 0.1).value;
            assert!((ev.eval(x, 0.0) - oracle).abs() < 1e-9, "{x}: {} vs {oracle}", ev.eval(x, 0.0));
        }
    }

    #[test]
    fn derivative_then_antiderivative_is_identity() {
        let (p, psi, _, phi) = setup(2.0);
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi.clone(), 0, Trig::cos(p.lambda, 0.0)), Factor1D::profile(Axis::Y, phi, 0, Trig::ONE));
        let back = s
            .apply_x(&LineOp::Derivative(1))
            .unwrap()
            .apply_x(&LineOp::Antiderivative { order: 1, ibp_terms: 2 })
            .unwrap();
        let ev = back.evaluator();
        for &x in &[-0.5, psi.copies[0].1.hi + 0.4, psi.copies[2].1.lo - 0.1, 50.0] {
            assert!((ev.eval(x, 0.0) - s.eval(x, 0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn antiderivative_gate_rejects_nonzero_mean() {
        let (_, _, _, phi) = setup(2.0);
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, phi.clone(), 0, Trig::ONE), Factor1D::profile(Axis::Y, phi, 0, Trig::ONE));
        assert!(matches!(s.apply_x(&LineOp::Antiderivative { order: 1, ibp_terms: 3 }), Err(SeparableError::Moment(_))));
    }

    #[test]
    fn absorption_keeps_psi() {
        let (_, psi, pt, phi) = setup(4.0);
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi.clone(), 1, Trig::cos(4.0, 0.0)), Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::ONE))
            .with_absorption(&pt, &psi);
        let m = s.apply_x(&LineOp::Multiply(pt.clone())).unwrap();
        assert_eq!(m.terms[0].fx.inner_wave().factors.len(), 1);
        let d = SeparableSum::single(1.0, Factor1D::profile(Axis::X, pt.clone(), 1, Trig::ONE), Factor1D::profile(Axis::Y, phi, 0, Trig::ONE))
            .with_absorption(&pt, &psi);
        assert!(d.multiply(&s).unwrap().is_empty());
    }

    #[test]
    fn leibniz_in_y_gives_three_terms() {
        let (_, psi, _, phi) = setup(2.0);
        let k = 3f64.sqrt() * 4.0;
        let s = SeparableSum::single(1.0, Factor1D::profile(Axis::X, psi, 0, Trig::ONE), Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::cos(k, 0.0)));
        let d = s.apply_y(&LineOp::Derivative(2)).unwrap().collected();
        assert_eq!(d.len(), 3);
        let x = 0.0;
        let y = phi.copies[0].1.hi + 0.4;
        let h = 1e-4;
        let fd = (s.eval(x, y + h) - 2.0 * s.eval(x, y) + s.eval(x, y - h)) / (h * h);
        assert!((fd - d.eval(x, y)).abs() < 1e-4 * fd.abs().max(1.0));
    }

    #[test]
    fn single_term_norm_is_product() {
        let (_, psi, _, phi) = setup(2.0);
        let s = SeparableSum::single(2.0, Factor1D::profile(Axis::X, psi.clone(), 0, Trig::ONE), Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::ONE));
        let n = s.l2_norm(&GramPolicy::default()).value;
        let nx: f64 = psi.support().iter().map(|&(a, b)| quad_norm_1d(|x| psi.eval(x), a, b, 0.1)).sum::<f64>().sqrt();
        let (a, b) = phi.hull();
        let ny = quad_norm_1d(|y| phi.eval(y), a, b, 0.1).sqrt();
        assert!((n - 2.0 * nx * ny).abs() < 1e-11 * n);
    }

    #[test]
    fn gram_norm_matches_grid_norm() {
        let l = 2.0;
        let s = packet(l);
        let (_, psi, _, phi) = setup(l);
        let (xl, xh) = psi.hull();
        let (yl, yh) = phi.hull();
        let gx = Grid1D::covering(0.5 * (xl + xh), (xh - xl) * 1.2, 2.0 * PI / (16.0 * l)).unwrap();
        let gy = Grid1D::covering(0.0, (yh - yl) * 1.2, 2.0 * PI / (16.0 * 3f64.sqrt() * l * l)).unwrap();
        let field = s.render(&Grid2D::new(gx, gy)).unwrap();
        let n = s.l2_norm(&GramPolicy::default());
        assert_eq!(n.bound, 0.0);
        assert!((field.l2_norm() - n.value).abs() < 1e-6 * n.value, "{} vs {}", field.l2_norm(), n.value);
    }

    #[test]
    fn integrated_factor_norm_matches_direct_quadrature() {
        let (_, psi, pt, phi) = setup(2.0);
        for depth in [1, 2] {
            let s = SeparableSum::single(1.0, Factor1D { axis: Axis::X, kind: FactorKind::Integrated { wave: Wave::new(pt.clone(), 0, Trig::ONE), depth } }, Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::ONE));
            let n = s.l2_norm(&GramPolicy::default()).value;
            let ri = RunningIntegral::new(Wave::new(pt.clone(), 0, Trig::ONE), depth);
            let (a, b) = pt.hull();
            let nx = quad_norm_1d(|x| ri.eval(x), a, b, 0.5).sqrt();
            let (c, d) = phi.hull();
            let ny = quad_norm_1d(|y| phi.eval(y), c, d, 0.1).sqrt();
            assert!((n - nx * ny).abs() < 1e-9 * n, "depth {depth}: {n} vs {}", nx * ny);
        }
        let osc = Factor1D { axis: Axis::X, kind: FactorKind::Integrated { wave: Wave::new(psi.clone(), 0, Trig::cos(2.0, 0.0)), depth: 2 } };
        check_gate(osc.inner_wave(), 2).unwrap();
        let s = SeparableSum::single(1.0, osc.clone(), Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::ONE));
        let n = s.l2_norm(&GramPolicy::default()).value;
        let ri = RunningIntegral::new(osc.inner_wave().clone(), 2);
        let nx: f64 = quad_norm_1d(|x| ri.eval(x), psi.hull().0, psi.hull().1, 0.1).sqrt();
        let (c, d) = phi.hull();
        let ny = quad_norm_1d(|y| phi.eval(y), c, d, 0.1).sqrt();
        assert!((n - nx * ny).abs() < 1e-8 * n);
    }

    #[test]
    fn harmonic_path_agrees_with_sweep() {
        let (_, _, _, phi) = setup(3.0);
        let k = 5.0;
        let atoms = vec![
            Factor1D::profile(Axis::Y, phi.clone(), 0, Trig::cos(k, 0.2)),
            Factor1D::profile(Axis::Y, phi.clone(), 1, Trig::sin(k, 0.2)),
            Factor1D::profile(Axis::Y, phi.clone(), 2, Trig::ONE),
        ];
        let zones = Zones::new(&atoms);
        let a = sweep_gram(&atoms, &zones, &GramPolicy::default());
        let b = harmonic_gram(&atoms, &zones, &GramPolicy::default());
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.value(i, j) - b.value(i, j)).abs() < 1e-10 * a.value(i, i).abs().max(1.0));
            }
        }
        let tight = GramPolicy { max_panels: 1, ..GramPolicy::default() };
        let c = harmonic_gram(&atoms, &zones, &tight);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.value(i, j) - c.value(i, j)).abs() <= c.bound(i, j) + 1e-10);
            }
        }
    }

    #[test]
    fn render_rejects_small_box() {
        let s = packet(2.0);
        let g = Grid2D::new(Grid1D::new(16, 1.0, 0.0).unwrap(), Grid1D::new(16, 1.0, 0.0).unwrap());
        assert!(matches!(s.render(&g), Err(SeparableError::SupportOverflow { .. })));
        let empty = SeparableSum::zero();
        let g = Grid2D::new(Grid1D::new(16, 1.0, 0.0).unwrap(), Grid1D::new(16, 1.0, 0.0).unwrap());
        assert_eq!(empty.render(&g).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn collect_cancels_opposite_terms() {
        let s = packet(2.0);
        let (c, cancelled) = s.sub(&s).collect();
        assert!(c.is_empty());
        assert_eq!(cancelled.len(), 2);
        assert!(s.to_json().as_array().unwrap().len() == 2);
    }
}
