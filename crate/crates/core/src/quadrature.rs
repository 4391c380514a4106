//! One-dimensional quadrature: Gauss–Legendre panels with a spectral
//! integration matrix, and adaptive Gauss–Kronrod (7/15) integration.

use std::collections::BinaryHeap;
use std::sync::OnceLock;

/// Number of Gauss–Legendre nodes per panel used throughout the crate.
pub const PANEL_NODES: usize = 16;

/// Gauss–Legendre rule on [-1, 1] together with the matrix that maps node
/// values to the running integral `∫_{-1}^{x_j} f` at every node.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row-major `n × n`: `partial[j * n + k] = ∫_{-1}^{x_j} ℓ_k`.
    pub partial: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "need at least two nodes");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        let mut partial = vec![0.0; n * n];
        for j in 0..n {
            let b = nodes[j];
            let half = 0.5 * (b + 1.0);
            for (q, wq) in nodes.iter().zip(&weights) {
                let s = -1.0 + half * (q + 1.0);
                for k in 0..n {
                    partial[j * n + k] += wq * half * lagrange(&nodes, k, s);
                }
            }
        }
        Self { nodes, weights, partial }
    }

    /// Shared 16-point rule.
    pub fn panel() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(PANEL_NODES))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes mapped to `[a, b]`.
    pub fn mapped_nodes(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        self.nodes.iter().map(move |s| mid + half * s)
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> f64 {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = 0.0;
        for (s, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * s);
        }
        acc * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn lagrange(nodes: &[f64], k: usize, s: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != k)
        .map(|(_, &xm)| (s - xm) / (nodes[k] - xm))
        .product()
}

/// Split `[a, b]` into equal panels of width at most `max_width`.
pub fn panel_edges(a: f64, b: f64, max_width: f64) -> Vec<f64> {
    let count = (((b - a) / max_width).ceil() as usize).max(1);
    let h = (b - a) / count as f64;
    (0..=count).map(|i| if i == count { b } else { a + h * i as f64 }).collect()
}

/// Composite 16-point Gauss–Legendre over panels of width ≤ `max_width`.
pub fn integrate_panels<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, max_width: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let rule = GaussLegendre::panel();
    panel_edges(a, b, max_width)
        .windows(2)
        .map(|w| rule.integrate(&mut f, w[0], w[1]))
        .sum()
}

// Kronrod 15 / Gauss 7 on [-1, 1] (QUADPACK constants).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        resk += WGK[j] * s;
        if j % 2 == 1 {
            resg += WG[j / 2] * s;
        }
    }
    (resk * half, ((resk - resg) * half).abs())
}

#[derive(Debug)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// The interval is first cut into panels no wider than `max_panel` so that
/// oscillatory integrands start from a resolved partition; the panel with
/// the largest error estimate is then bisected until the total error is
/// below `abs_tol` or the segment budget runs out.
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_panel: f64,
) -> Estimate {
    if b <= a {
        return Estimate { value: 0.0, error: 0.0 };
    }
    let mut heap = BinaryHeap::new();
    let mut err = 0.0;
    for w in panel_edges(a, b, max_panel).windows(2) {
        let (value, error) = kronrod15(&mut f, w[0], w[1]);
        err += error;
        heap.push(Segment { a: w[0], b: w[1], value, error });
    }
    let budget = heap.len() + 20_000;
    while err > abs_tol && heap.len() < budget {
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            heap.push(seg);
            break;
        }
        let (v1, e1) = kronrod15(&mut f, seg.a, mid);
        let (v2, e2) = kronrod15(&mut f, mid, seg.b);
        err += e1 + e2 - seg.error;
        heap.push(Segment { a: seg.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, error: e2 });
    }
    let value = heap.iter().map(|s| s.value).sum();
    let error = heap.iter().map(|s| s.error).sum();
    Estimate { value, error }
}


/// Running integral `∫_{a}^{x} f` tabulated at panel edges; evaluation inside
/// a panel adds a Gauss–Legendre partial integral from the left edge.
#[derive(Debug, Clone)]
pub struct CumulativeTable {
    edges: Vec<f64>,
    cum: Vec<f64>,
}

impl CumulativeTable {
    /// Tabulate over `[a, b]` with panels no wider than `max_width`.
    pub fn build<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, max_width: f64) -> Self {
        let rule = GaussLegendre::panel();
        let edges = panel_edges(a, b, max_width);
        let mut cum = Vec::with_capacity(edges.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in edges.windows(2) {
            acc += rule.integrate(&mut f, w[0], w[1]);
            cum.push(acc);
        }
        Self { edges, cum }
    }

    pub fn start(&self) -> f64 {
        self.edges[0]
    }

    pub fn end(&self) -> f64 {
        *self.edges.last().expect("non-empty table")
    }

    /// `∫_a^b f`.
    pub fn total(&self) -> f64 {
        *self.cum.last().expect("non-empty table")
    }

    /// Integral from the start to `x`; `f` must be the tabulated integrand.
    /// Points past the end return the total.
    pub fn eval<F: FnMut(f64) -> f64>(&self, x: f64, f: F) -> f64 {
        if x <= self.start() {
            return 0.0;
        }
        if x >= self.end() {
            return self.total();
        }
        let p = self.edges.partition_point(|&e| e <= x) - 1;
        let left = self.edges[p];
        if x == left {
            return self.cum[p];
        }
        self.cum[p] + GaussLegendre::panel().integrate(f, left, x)
    }
}
