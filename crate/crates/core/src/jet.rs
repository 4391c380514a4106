//! Truncated Taylor series (jets) for exact derivatives of the bump profiles.

use std::ops::{Add, Mul, Neg, Sub};

/// Number of Taylor coefficients carried; derivatives up to order `JET_LEN - 1`.
pub const JET_LEN: usize = 12;

/// `c[k] = f^{(k)}(x₀) / k!`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub c: [f64; JET_LEN],
}

impl Jet {
    pub const ZERO: Jet = Jet { c: [0.0; JET_LEN] };

    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; JET_LEN];
        c[0] = v;
        Jet { c }
    }

    /// The affine map `x₀ + slope·δ`.
    pub fn affine(value: f64, slope: f64) -> Self {
        let mut c = [0.0; JET_LEN];
        c[0] = value;
        c[1] = slope;
        Jet { c }
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// k-th derivative at the expansion point.
    pub fn derivative(&self, k: usize) -> f64 {
        if k >= JET_LEN {
            panic!("jet carries derivatives up to order {}", JET_LEN - 1);
        }
        self.c[k] * factorial(k)
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.c.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn recip(&self) -> Self {
        let mut r = [0.0; JET_LEN];
        r[0] = 1.0 / self.c[0];
        for k in 1..JET_LEN {
            let s: f64 = (1..=k).map(|j| self.c[j] * r[k - j]).sum();
            r[k] = -s * r[0];
        }
        Jet { c: r }
    }

    pub fn exp(&self) -> Self {
        let mut e = [0.0; JET_LEN];
        e[0] = self.c[0].exp();
        for k in 1..JET_LEN {
            let s: f64 = (1..=k).map(|j| j as f64 * self.c[j] * e[k - j]).sum();
            e[k] = s / k as f64;
        }
        Jet { c: e }
    }

    /// Antiderivative series with constant term `c0`; the top coefficient is dropped.
    pub fn integrate(&self, c0: f64) -> Self {
        let mut r = [0.0; JET_LEN];
        r[0] = c0;
        for k in 1..JET_LEN {
            r[k] = self.c[k - 1] / k as f64;
        }
        Jet { c: r }
    }

    /// Series of the derivative; the top coefficient becomes zero.
    pub fn differentiate(&self) -> Self {
        let mut r = [0.0; JET_LEN];
        for k in 0..JET_LEN - 1 {
            r[k] = self.c[k + 1] * (k + 1) as f64;
        }
        Jet { c: r }
    }
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        self.c.iter_mut().zip(rhs.c).for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        self.c.iter_mut().zip(rhs.c).for_each(|(a, b)| *a -= b);
        self
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut r = [0.0; JET_LEN];
        for (i, a) in self.c.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in rhs.c.iter().enumerate().take(JET_LEN - i) {
                r[i + j] += a * b;
            }
        }
        Jet { c: r }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_of_affine_matches_closed_form() {
        let j = Jet::affine(0.3, 2.0).exp();
        for k in 0..JET_LEN {
            let exact = 0.3f64.exp() * 2f64.powi(k as i32);
            assert!((j.derivative(k) - exact).abs() < 1e-10 * exact.abs().max(1.0));
        }
    }

    #[test]
    fn recip_times_self_is_one() {
        let x = Jet::affine(1.7, 0.4) * Jet::affine(0.2, -1.1) + Jet::constant(2.0);
        let one = x * x.recip();
        assert!((one.c[0] - 1.0).abs() < 1e-15);
        assert!(one.c[1..].iter().all(|v| v.abs() < 1e-13));
    }
}
