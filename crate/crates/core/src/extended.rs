//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! about 106 significant bits) and a re-evaluation of the congruence loss
//! in that precision.
//!
//! Central differences of a loss of magnitude `L` cannot resolve partials
//! below roughly `ulp(L) / h` in plain `f64`. Saturated softmax rows produce
//! genuine partials far below that, so the finite-difference oracle
//! evaluates the loss here instead.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::attention::{BlockPartition, Matrix};
use crate::divergence::KL_EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub(crate) struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const ZERO: DoubleDouble = DoubleDouble { hi: 0.0, lo: 0.0 };
    pub const ONE: DoubleDouble = DoubleDouble { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn from_parts(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // |r| <= ln2 / 2, then scaled by 2^-9 so the Taylor series converges fast.
        let r = (self - LN2 * Self::new(k)).ldexp(-9);
        // expm1(r) by Taylor series
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / Self::new(n as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        // expm1(2x) = 2 expm1(x) + expm1(x)^2
        for _ in 0..9 {
            sum = sum.ldexp(1) + sum * sum;
        }
        (sum + Self::ONE).ldexp(k as i32)
    }

    pub fn ln(self) -> Self {
        debug_assert!(self.hi > 0.0);
        let mut y = Self::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Self::ONE;
        }
        y
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::from_parts(s, e + f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        Self::from_parts(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b * Self::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::new(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::new(q3)
    }
}

type DdMatrix = Vec<Vec<DoubleDouble>>;

fn lift(m: &Matrix) -> DdMatrix {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| DoubleDouble::new(v)).collect())
        .collect()
}

fn mm(a: &DdMatrix, b: &DdMatrix, transpose_b: bool) -> DdMatrix {
    let n = a.len();
    let m = if transpose_b { b.len() } else { b[0].len() };
    let inner = a[0].len();
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    (0..inner).fold(DoubleDouble::ZERO, |acc, k| {
                        let bkj = if transpose_b { b[j][k] } else { b[k][j] };
                        acc + a[i][k] * bkj
                    })
                })
                .collect()
        })
        .collect()
}

fn softmax_rows(m: &DdMatrix) -> DdMatrix {
    m.iter()
        .map(|row| {
            let max = row.iter().copied().fold(row[0], DoubleDouble::max);
            let exps: Vec<_> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum = exps.iter().copied().fold(DoubleDouble::ZERO, Add::add);
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn kl(p: &[DoubleDouble], q: &[DoubleDouble]) -> DoubleDouble {
    let eps = DoubleDouble::new(KL_EPSILON);
    p.iter()
        .zip(q)
        .filter(|(pk, _)| pk.hi > 0.0)
        .fold(DoubleDouble::ZERO, |acc, (&pk, &qk)| {
            acc + pk * (pk.ln() - qk.max(eps).ln())
        })
}

fn mkl(a: &DdMatrix, b: &DdMatrix) -> DoubleDouble {
    a.iter()
        .zip(b)
        .fold(DoubleDouble::ZERO, |acc, (ra, rb)| acc + kl(ra, rb) + kl(rb, ra))
}

fn side(cross: &Matrix, other_intra: &Matrix, own_intra: &Matrix) -> DoubleDouble {
    let c = lift(cross);
    let projected = mm(&mm(&c, &lift(other_intra), false), &c, true);
    mkl(&softmax_rows(&projected), &softmax_rows(&lift(own_intra)))
}

/// Total congruence loss evaluated in double-double precision.
pub(crate) fn cacr_total_dd(p: &BlockPartition) -> DoubleDouble {
    side(&p.s_lv, &p.s_vv, &p.s_ll) + side(&p.s_vl, &p.s_ll, &p.s_vv)
}
