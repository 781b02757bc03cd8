//! Exact arithmetic over Q(√2,√5) and geometry of points and boxes on the
//! 2-torus under a rigid translation.
//!
//! Every comparison in this module is an exact sign determination; there is
//! no floating point anywhere in set logic. Distances and diameters use the
//! max metric, whose values stay inside the field.

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{One, Signed, Zero};
use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub type Rational = Ratio<BigInt>;

pub fn rat(n: i64, d: i64) -> Rational {
    Ratio::new(BigInt::from(n), BigInt::from(d))
}

/// Element q0 + q1·√2 + q2·√5 + q3·√10 of the degree-4 field Q(√2,√5).
///
/// Coefficients are arbitrary-precision rationals kept in lowest terms by
/// the underlying `Ratio` type. Equality of field elements is coefficient
/// equality because {1, √2, √5, √10} is a Q-basis.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct AlgebraicScalar {
    pub q0: Rational,
    pub q1: Rational,
    pub q2: Rational,
    pub q3: Rational,
}

impl fmt::Debug for AlgebraicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({} + {}√2 + {}√5 + {}√10 ≈ {:.6})",
            self.q0,
            self.q1,
            self.q2,
            self.q3,
            self.to_f64()
        )
    }
}

impl fmt::Display for AlgebraicScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}√2+{}√5+{}√10", self.q0, self.q1, self.q2, self.q3)
    }
}

impl AlgebraicScalar {
    pub fn new(q0: Rational, q1: Rational, q2: Rational, q3: Rational) -> Self {
        AlgebraicScalar { q0, q1, q2, q3 }
    }

    pub fn from_rational(q: Rational) -> Self {
        AlgebraicScalar::new(q, Rational::zero(), Rational::zero(), Rational::zero())
    }

    pub fn from_int(n: i64) -> Self {
        Self::from_rational(rat(n, 1))
    }

    pub fn from_ratio(n: i64, d: i64) -> Self {
        Self::from_rational(rat(n, d))
    }

    pub fn zero() -> Self {
        Self::from_int(0)
    }

    pub fn one() -> Self {
        Self::from_int(1)
    }

    pub fn sqrt2() -> Self {
        AlgebraicScalar::new(rat(0, 1), rat(1, 1), rat(0, 1), rat(0, 1))
    }

    pub fn sqrt5() -> Self {
        AlgebraicScalar::new(rat(0, 1), rat(0, 1), rat(1, 1), rat(0, 1))
    }

    pub fn is_zero(&self) -> bool {
        self.q0.is_zero() && self.q1.is_zero() && self.q2.is_zero() && self.q3.is_zero()
    }

    pub fn is_rational(&self) -> bool {
        self.q1.is_zero() && self.q2.is_zero() && self.q3.is_zero()
    }

    /// The rational value when the element lies in Q.
    pub fn as_rational(&self) -> Option<&Rational> {
        if self.is_rational() {
            Some(&self.q0)
        } else {
            None
        }
    }

    /// Galois conjugate sending √2 → −√2 (and hence √10 → −√10).
    pub fn conj_sqrt2(&self) -> Self {
        AlgebraicScalar::new(
            self.q0.clone(),
            -self.q1.clone(),
            self.q2.clone(),
            -self.q3.clone(),
        )
    }

    /// Galois conjugate sending √5 → −√5 (and hence √10 → −√10).
    pub fn conj_sqrt5(&self) -> Self {
        AlgebraicScalar::new(
            self.q0.clone(),
            self.q1.clone(),
            -self.q2.clone(),
            -self.q3.clone(),
        )
    }

    /// Field norm: the product of the element with its three conjugates.
    /// Always rational; zero iff the element is zero.
    pub fn norm(&self) -> Rational {
        let s1 = self.conj_sqrt2();
        let s2 = self.conj_sqrt5();
        let s3 = s1.conj_sqrt5();
        let p = self.clone() * s1 * s2 * s3;
        debug_assert!(p.is_rational());
        p.q0
    }

    /// Multiplicative inverse. Panics on zero (callers gate on `is_zero`).
    pub fn inverse(&self) -> Self {
        assert!(!self.is_zero(), "inverse of zero");
        let s1 = self.conj_sqrt2();
        let s2 = self.conj_sqrt5();
        let s3 = s1.conj_sqrt5();
        let numer = s1 * s2 * s3;
        let n = self.norm();
        numer.scale(&n.recip())
    }

    fn scale(&self, r: &Rational) -> Self {
        AlgebraicScalar::new(
            &self.q0 * r,
            &self.q1 * r,
            &self.q2 * r,
            &self.q3 * r,
        )
    }

    /// f64 approximation for display and SVG export only; never used in
    /// set logic or comparisons.  Goes through the exact dyadic enclosure so
    /// that huge nearly-cancelling coefficients cannot wipe out the value.
    pub fn to_f64(&self) -> f64 {
        if let Some(q) = self.as_rational() {
            return ratio_to_f64(&q);
        }
        let (lo, hi) = self.dyadic_enclosure(96);
        ratio_to_f64(&((lo + hi) / Rational::from_integer(2.into())))
    }

    /// Exact sign. Rational elements are immediate; elements in a quadratic
    /// subfield use the exact quadratic rule; the general degree-4 case uses
    /// certified dyadic interval refinement, whose termination is guaranteed
    /// by the norm lower bound |x| ≥ |N(x)| / Π max(1,|σᵢ(x)|).
    pub fn sign(&self) -> i32 {
        if self.is_zero() {
            return 0;
        }
        // q0 + q2√5 with no √2 component.
        if self.q1.is_zero() && self.q3.is_zero() {
            return sign_quadratic(&self.q0, &self.q2, 5);
        }
        // q0 + q1√2 with no √5 component.
        if self.q2.is_zero() && self.q3.is_zero() {
            return sign_quadratic(&self.q0, &self.q1, 2);
        }
        // General case: refine dyadic enclosures of √2, √5, √10.
        let mut bits = 32u32;
        loop {
            let (lo, hi) = self.dyadic_enclosure(bits);
            if lo.is_positive() {
                return 1;
            }
            if hi.is_negative() {
                return -1;
            }
            bits *= 2;
            assert!(bits <= 1 << 20, "sign refinement failed to converge");
        }
    }

    /// Rational enclosure [lo, hi] of the value with √d replaced by dyadic
    /// bounds accurate to `bits` fractional bits.
    fn dyadic_enclosure(&self, bits: u32) -> (Rational, Rational) {
        let mut lo = self.q0.clone();
        let mut hi = self.q0.clone();
        for (coef, d) in [(&self.q1, 2u32), (&self.q2, 5), (&self.q3, 10)] {
            if coef.is_zero() {
                continue;
            }
            let (rlo, rhi) = sqrt_enclosure(d, bits);
            let (a, b) = (coef * &rlo, coef * &rhi);
            if coef.is_positive() {
                lo += a;
                hi += b;
            } else {
                lo += b;
                hi += a;
            }
        }
        (lo, hi)
    }

    /// Exact floor. Terminates because a non-rational field element is
    /// irrational, hence never an integer.
    pub fn floor(&self) -> BigInt {
        if let Some(q) = self.as_rational() {
            return q.floor().to_integer();
        }
        let mut bits = 32u32;
        loop {
            let (lo, hi) = self.dyadic_enclosure(bits);
            let fl = lo.floor().to_integer();
            if Rational::from(fl.clone() + 1) > hi {
                return fl;
            }
            bits *= 2;
            assert!(bits <= 1 << 20, "floor refinement failed to converge");
        }
    }

    /// Fractional part in [0, 1).
    pub fn fract(&self) -> Self {
        let f = self.floor();
        self.clone() - AlgebraicScalar::from_rational(Rational::from(f))
    }

    pub fn abs(&self) -> Self {
        if self.sign() < 0 {
            -self.clone()
        } else {
            self.clone()
        }
    }

    pub fn min(a: &Self, b: &Self) -> Self {
        if a <= b {
            a.clone()
        } else {
            b.clone()
        }
    }

    pub fn max(a: &Self, b: &Self) -> Self {
        if a >= b {
            a.clone()
        } else {
            b.clone()
        }
    }
}

/// Sign of a + b·√d for square-free d, by the exact quadratic rule.
fn sign_quadratic(a: &Rational, b: &Rational, d: i64) -> i32 {
    let sa = rational_sign(a);
    let sb = rational_sign(b);
    if sb == 0 {
        return sa;
    }
    if sa == 0 {
        return sb;
    }
    if sa == sb {
        return sa;
    }
    // Opposite signs: compare a² with d·b²; equality would make √d rational.
    let diff = a * a - b * b * rat(d, 1);
    let sd = rational_sign(&diff);
    assert!(sd != 0, "√{d} rational — impossible");
    sa * sd
}

fn rational_sign(r: &Rational) -> i32 {
    if r.is_zero() {
        0
    } else if r.is_positive() {
        1
    } else {
        -1
    }
}

/// Dyadic enclosure of √d with `bits` fractional bits: returns (lo, hi)
/// rationals with lo ≤ √d ≤ hi and hi − lo = 2^-bits.
fn sqrt_enclosure(d: u32, bits: u32) -> (Rational, Rational) {
    let scaled = BigInt::from(d) << (2 * bits);
    let s = scaled.sqrt(); // integer square root, s² ≤ scaled
    let denom = BigInt::one() << bits;
    let lo = Ratio::new(s.clone(), denom.clone());
    let hi = Ratio::new(s + 1, denom);
    (lo, hi)
}

fn ratio_to_f64(r: &Rational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or_else(|| {
        let n = r.numer().to_f64().unwrap_or(f64::MAX);
        let d = r.denom().to_f64().unwrap_or(f64::MAX);
        n / d
    })
}

impl Add for AlgebraicScalar {
    type Output = AlgebraicScalar;
    fn add(self, o: AlgebraicScalar) -> AlgebraicScalar {
        AlgebraicScalar::new(
            self.q0 + o.q0,
            self.q1 + o.q1,
            self.q2 + o.q2,
            self.q3 + o.q3,
        )
    }
}

impl Sub for AlgebraicScalar {
    type Output = AlgebraicScalar;
    fn sub(self, o: AlgebraicScalar) -> AlgebraicScalar {
        AlgebraicScalar::new(
            self.q0 - o.q0,
            self.q1 - o.q1,
            self.q2 - o.q2,
            self.q3 - o.q3,
        )
    }
}

impl Neg for AlgebraicScalar {
    type Output = AlgebraicScalar;
    fn neg(self) -> AlgebraicScalar {
        AlgebraicScalar::new(-self.q0, -self.q1, -self.q2, -self.q3)
    }
}

impl Mul for AlgebraicScalar {
    type Output = AlgebraicScalar;
    fn mul(self, o: AlgebraicScalar) -> AlgebraicScalar {
        // (a0 + a1√2 + a2√5 + a3√10)(b0 + b1√2 + b2√5 + b3√10):
        // √2·√5 = √10, √2·√10 = 2√5, √5·√10 = 5√2, √10² = 10.
        let (a0, a1, a2, a3) = (&self.q0, &self.q1, &self.q2, &self.q3);
        let (b0, b1, b2, b3) = (&o.q0, &o.q1, &o.q2, &o.q3);
        let two = rat(2, 1);
        let five = rat(5, 1);
        let ten = rat(10, 1);
        AlgebraicScalar::new(
            a0 * b0 + &two * (a1 * b1) + &five * (a2 * b2) + &ten * (a3 * b3),
            a0 * b1 + a1 * b0 + &five * (a2 * b3) + &five * (a3 * b2),
            a0 * b2 + a2 * b0 + &two * (a1 * b3) + &two * (a3 * b1),
            a0 * b3 + a3 * b0 + a1 * b2 + a2 * b1,
        )
    }
}

impl Div for AlgebraicScalar {
    type Output = AlgebraicScalar;
    fn div(self, o: AlgebraicScalar) -> AlgebraicScalar {
        self * o.inverse()
    }
}

impl PartialOrd for AlgebraicScalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AlgebraicScalar {
    fn cmp(&self, other: &Self) -> Ordering {
        let d = self.clone() - other.clone();
        match d.sign() {
            0 => Ordering::Equal,
            s if s < 0 => Ordering::Less,
            _ => Ordering::Greater,
        }
    }
}

pub fn scalar_sign(s: &AlgebraicScalar) -> i32 {
    s.sign()
}

/// Rigid translation of the 2-torus by the vector (α, β).
///
/// Construction certifies that {1, α, β} are rationally independent (exact
/// rank computation on basis coefficients), which by Kronecker's theorem
/// makes every orbit dense, hence the translation minimal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Translation {
    pub alpha: AlgebraicScalar,
    pub beta: AlgebraicScalar,
}

#[derive(Debug, thiserror::Error)]
pub enum TranslationError {
    #[error("1, α, β rationally dependent: the translation would not be minimal")]
    RationallyDependent,
}

impl Translation {
    /// α = (√5−1)/2 (golden rotation number), β = √2−1.
    pub fn default_golden_sqrt2() -> Self {
        let alpha = AlgebraicScalar::new(rat(-1, 2), rat(0, 1), rat(1, 2), rat(0, 1));
        let beta = AlgebraicScalar::new(rat(-1, 1), rat(1, 1), rat(0, 1), rat(0, 1));
        Translation::new(alpha, beta).expect("default vector is independent")
    }

    pub fn new(alpha: AlgebraicScalar, beta: AlgebraicScalar) -> Result<Self, TranslationError> {
        let t = Translation { alpha, beta };
        if t.certify_independent() {
            Ok(t)
        } else {
            Err(TranslationError::RationallyDependent)
        }
    }

    /// Exact rank of the 3×4 matrix whose rows are the basis coefficients of
    /// 1, α, β. Rank 3 means no nontrivial rational relation.
    fn certify_independent(&self) -> bool {
        let rows: Vec<[Rational; 4]> = vec![
            [rat(1, 1), rat(0, 1), rat(0, 1), rat(0, 1)],
            [
                self.alpha.q0.clone(),
                self.alpha.q1.clone(),
                self.alpha.q2.clone(),
                self.alpha.q3.clone(),
            ],
            [
                self.beta.q0.clone(),
                self.beta.q1.clone(),
                self.beta.q2.clone(),
                self.beta.q3.clone(),
            ],
        ];
        rational_matrix_rank(rows) == 3
    }

    /// Translation vector multiplied by k, reduced mod 1 per axis.
    pub fn step_vector(&self, k: i64) -> (AlgebraicScalar, AlgebraicScalar) {
        let kk = AlgebraicScalar::from_int(k);
        (
            (kk.clone() * self.alpha.clone()).fract(),
            (kk * self.beta.clone()).fract(),
        )
    }
}

fn rational_matrix_rank(mut rows: Vec<[Rational; 4]>) -> usize {
    let mut rank = 0;
    for col in 0..4 {
        if rank >= rows.len() {
            break;
        }
        let Some(pivot) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, pivot);
        let pv = rows[rank][col].clone();
        for r in 0..rows.len() {
            if r != rank && !rows[r][col].is_zero() {
                let factor = &rows[r][col] / &pv;
                for c in col..4 {
                    let sub = &factor * &rows[rank][c];
                    rows[r][c] = &rows[r][c] - sub;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Point on the 2-torus; coordinates canonically reduced to [0, 1).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TorusPoint {
    pub x: AlgebraicScalar,
    pub y: AlgebraicScalar,
}

impl fmt::Debug for TorusPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.x.to_f64(), self.y.to_f64())
    }
}

impl TorusPoint {
    pub fn new(x: AlgebraicScalar, y: AlgebraicScalar) -> Self {
        TorusPoint {
            x: x.fract(),
            y: y.fract(),
        }
    }

    pub fn translate(&self, t: &Translation, k: i64) -> TorusPoint {
        let (dx, dy) = t.step_vector(k);
        TorusPoint::new(self.x.clone() + dx, self.y.clone() + dy)
    }

    /// Max-metric distance on the torus (circular per axis).
    pub fn dist(&self, o: &TorusPoint) -> AlgebraicScalar {
        let dx = circ_dist(&self.x, &o.x);
        let dy = circ_dist(&self.y, &o.y);
        AlgebraicScalar::max(&dx, &dy)
    }
}

/// Circular distance between two reduced coordinates.
pub fn circ_dist(a: &AlgebraicScalar, b: &AlgebraicScalar) -> AlgebraicScalar {
    let d = (a.clone() - b.clone()).fract();
    let one_minus = AlgebraicScalar::one() - d.clone();
    AlgebraicScalar::min(&d, &one_minus)
}

/// Axis-aligned box on the torus with the closed–open convention per axis:
/// the set of points whose per-axis circular offset from `lo` is in [0, len).
#[derive(Clone, PartialEq, Eq)]
pub struct TorusBox {
    pub lo: [AlgebraicScalar; 2],
    pub len: [AlgebraicScalar; 2],
}

impl fmt::Debug for TorusBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Box[{:.6}+{:.6} × {:.6}+{:.6}]",
            self.lo[0].to_f64(),
            self.len[0].to_f64(),
            self.lo[1].to_f64(),
            self.len[1].to_f64()
        )
    }
}

/// Exact five-way relation between two torus boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxRelation {
    Disjoint,
    Equal,
    AInInteriorOfB,
    BInInteriorOfA,
    PartialOverlap,
}

/// Relation between two circular intervals (lo, len) on the circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum IntervalRelation {
    Disjoint,
    Equal,
    AInInteriorOfB,
    BInInteriorOfA,
    Partial,
}

fn interval_relation(
    alo: &AlgebraicScalar,
    alen: &AlgebraicScalar,
    blo: &AlgebraicScalar,
    blen: &AlgebraicScalar,
) -> IntervalRelation {
    // d = offset of a's start inside the circle relative to b's start.
    let d = (alo.clone() - blo.clone()).fract();
    let zero = AlgebraicScalar::zero();
    let one = AlgebraicScalar::one();
    if d == zero && alen == blen {
        return IntervalRelation::Equal;
    }
    // a ⊂ int(b): strict offset on both ends.
    if d.sign() > 0 && (d.clone() + alen.clone()) < *blen {
        return IntervalRelation::AInInteriorOfB;
    }
    // b ⊂ int(a): symmetric test.
    let e = (blo.clone() - alo.clone()).fract();
    if e.sign() > 0 && (e.clone() + blen.clone()) < *alen {
        return IntervalRelation::BInInteriorOfA;
    }
    // Disjoint: a starts at or after b's end and wraps around to finish at
    // or before b's start.
    if d >= *blen && d.clone() + alen.clone() <= one {
        return IntervalRelation::Disjoint;
    }
    IntervalRelation::Partial
}

impl TorusBox {
    pub fn new(lo: [AlgebraicScalar; 2], len: [AlgebraicScalar; 2]) -> Self {
        for l in &len {
            assert!(
                l.sign() > 0 && *l <= AlgebraicScalar::one(),
                "box length must be in (0,1]"
            );
        }
        TorusBox {
            lo: [lo[0].fract(), lo[1].fract()],
            len,
        }
    }

    pub fn from_rationals(lox: (i64, i64), loy: (i64, i64), lenx: (i64, i64), leny: (i64, i64)) -> Self {
        TorusBox::new(
            [
                AlgebraicScalar::from_ratio(lox.0, lox.1),
                AlgebraicScalar::from_ratio(loy.0, loy.1),
            ],
            [
                AlgebraicScalar::from_ratio(lenx.0, lenx.1),
                AlgebraicScalar::from_ratio(leny.0, leny.1),
            ],
        )
    }

    pub fn volume(&self) -> AlgebraicScalar {
        self.len[0].clone() * self.len[1].clone()
    }

    /// Diameter in the max metric: the larger axis length (capped at 1/2 by
    /// circularity only when lengths exceed 1/2; we report the raw max which
    /// upper-bounds the true diameter).
    pub fn diameter(&self) -> AlgebraicScalar {
        AlgebraicScalar::max(&self.len[0], &self.len[1])
    }

    pub fn contains_point(&self, p: &TorusPoint) -> bool {
        for (axis, c) in [&p.x, &p.y].into_iter().enumerate() {
            let off = (c.clone() - self.lo[axis].clone()).fract();
            if !(off < self.len[axis]) {
                return false;
            }
        }
        true
    }

    /// Strict interior in the closed–open model: offset in (0, len) — used
    /// for margin-sensitive tests.
    pub fn interior_contains_point(&self, p: &TorusPoint) -> bool {
        for (axis, c) in [&p.x, &p.y].into_iter().enumerate() {
            let off = (c.clone() - self.lo[axis].clone()).fract();
            if !(off.sign() > 0 && off < self.len[axis]) {
                return false;
            }
        }
        true
    }

    pub fn translate(&self, t: &Translation, k: i64) -> TorusBox {
        let (dx, dy) = t.step_vector(k);
        TorusBox {
            lo: [
                (self.lo[0].clone() + dx).fract(),
                (self.lo[1].clone() + dy).fract(),
            ],
            len: self.len.clone(),
        }
    }

    pub fn relation(&self, other: &TorusBox) -> BoxRelation {
        let rx = interval_relation(&self.lo[0], &self.len[0], &other.lo[0], &other.len[0]);
        let ry = interval_relation(&self.lo[1], &self.len[1], &other.lo[1], &other.len[1]);
        use IntervalRelation as IR;
        if rx == IR::Disjoint || ry == IR::Disjoint {
            return BoxRelation::Disjoint;
        }
        if rx == IR::Equal && ry == IR::Equal {
            return BoxRelation::Equal;
        }
        let a_in_b =
            |r: IR| r == IR::AInInteriorOfB || r == IR::Equal;
        let b_in_a =
            |r: IR| r == IR::BInInteriorOfA || r == IR::Equal;
        // Interior containment requires strict inclusion on both axes; a
        // boundary touch on either axis is classified as partial overlap.
        if rx == IR::AInInteriorOfB && ry == IR::AInInteriorOfB {
            return BoxRelation::AInInteriorOfB;
        }
        if rx == IR::BInInteriorOfA && ry == IR::BInInteriorOfA {
            return BoxRelation::BInInteriorOfA;
        }
        // Mixed equal/interior combinations are containment but not interior
        // containment; the constructions in this crate always leave margins,
        // so these resolve to partial overlap by convention.
        let _ = (a_in_b, b_in_a);
        BoxRelation::PartialOverlap
    }

    pub fn is_disjoint(&self, other: &TorusBox) -> bool {
        self.relation(other) == BoxRelation::Disjoint
    }

    /// Split into 1, 2 or 4 non-wrapping boxes inside the fundamental
    /// domain [0,1)².
    pub fn linear_parts(&self) -> Vec<LinearBox> {
        let xs = split_axis(&self.lo[0], &self.len[0]);
        let ys = split_axis(&self.lo[1], &self.len[1]);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for (xl, xh) in &xs {
            for (yl, yh) in &ys {
                out.push(LinearBox {
                    lo: [xl.clone(), yl.clone()],
                    hi: [xh.clone(), yh.clone()],
                });
            }
        }
        out
    }

    pub fn to_set(&self) -> BoxSet {
        BoxSet {
            parts: self.linear_parts(),
        }
    }

    /// Concentric shrink: moves each face inward by `margin` (per axis pair).
    pub fn shrink(&self, margin: &AlgebraicScalar) -> TorusBox {
        let two = AlgebraicScalar::from_int(2);
        TorusBox::new(
            [
                self.lo[0].clone() + margin.clone(),
                self.lo[1].clone() + margin.clone(),
            ],
            [
                self.len[0].clone() - two.clone() * margin.clone(),
                self.len[1].clone() - two * margin.clone(),
            ],
        )
    }

    /// Concentric inflate: moves each face outward by `margin`.
    pub fn inflate(&self, margin: &AlgebraicScalar) -> TorusBox {
        let two = AlgebraicScalar::from_int(2);
        TorusBox::new(
            [
                self.lo[0].clone() - margin.clone(),
                self.lo[1].clone() - margin.clone(),
            ],
            [
                self.len[0].clone() + two.clone() * margin.clone(),
                self.len[1].clone() + two * margin.clone(),
            ],
        )
    }
}

fn split_axis(lo: &AlgebraicScalar, len: &AlgebraicScalar) -> Vec<(AlgebraicScalar, AlgebraicScalar)> {
    let one = AlgebraicScalar::one();
    let hi = lo.clone() + len.clone();
    if hi <= one {
        vec![(lo.clone(), hi)]
    } else {
        vec![
            (lo.clone(), one.clone()),
            (AlgebraicScalar::zero(), hi - one),
        ]
    }
}

/// Non-wrapping closed–open rectangle [lo_x, hi_x) × [lo_y, hi_y) inside the
/// fundamental domain, with hi ≤ 1 per axis.
#[derive(Clone, PartialEq, Eq)]
pub struct LinearBox {
    pub lo: [AlgebraicScalar; 2],
    pub hi: [AlgebraicScalar; 2],
}

impl fmt::Debug for LinearBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Lin[{:.6},{:.6})×[{:.6},{:.6})",
            self.lo[0].to_f64(),
            self.hi[0].to_f64(),
            self.lo[1].to_f64(),
            self.hi[1].to_f64()
        )
    }
}

impl LinearBox {
    pub fn is_empty(&self) -> bool {
        !(self.lo[0] < self.hi[0] && self.lo[1] < self.hi[1])
    }

    pub fn volume(&self) -> AlgebraicScalar {
        if self.is_empty() {
            return AlgebraicScalar::zero();
        }
        (self.hi[0].clone() - self.lo[0].clone()) * (self.hi[1].clone() - self.lo[1].clone())
    }

    pub fn intersect(&self, o: &LinearBox) -> Option<LinearBox> {
        let mut lo = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        let mut hi = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        for a in 0..2 {
            lo[a] = AlgebraicScalar::max(&self.lo[a], &o.lo[a]);
            hi[a] = AlgebraicScalar::min(&self.hi[a], &o.hi[a]);
            if !(lo[a] < hi[a]) {
                return None;
            }
        }
        Some(LinearBox { lo, hi })
    }

    /// Set difference self ∖ o as at most four disjoint linear boxes.
    pub fn subtract(&self, o: &LinearBox) -> Vec<LinearBox> {
        let Some(cut) = self.intersect(o) else {
            return vec![self.clone()];
        };
        let mut out = Vec::new();
        // Left and right slabs along x, then top/bottom within the x-range
        // of the cut.
        if self.lo[0] < cut.lo[0] {
            out.push(LinearBox {
                lo: [self.lo[0].clone(), self.lo[1].clone()],
                hi: [cut.lo[0].clone(), self.hi[1].clone()],
            });
        }
        if cut.hi[0] < self.hi[0] {
            out.push(LinearBox {
                lo: [cut.hi[0].clone(), self.lo[1].clone()],
                hi: [self.hi[0].clone(), self.hi[1].clone()],
            });
        }
        if self.lo[1] < cut.lo[1] {
            out.push(LinearBox {
                lo: [cut.lo[0].clone(), self.lo[1].clone()],
                hi: [cut.hi[0].clone(), cut.lo[1].clone()],
            });
        }
        if cut.hi[1] < self.hi[1] {
            out.push(LinearBox {
                lo: [cut.lo[0].clone(), cut.hi[1].clone()],
                hi: [cut.hi[0].clone(), self.hi[1].clone()],
            });
        }
        out
    }

    pub fn contains_point(&self, p: &TorusPoint) -> bool {
        self.lo[0] <= p.x && p.x < self.hi[0] && self.lo[1] <= p.y && p.y < self.hi[1]
    }

    pub fn contains_box(&self, o: &LinearBox) -> bool {
        self.lo[0] <= o.lo[0]
            && o.hi[0] <= self.hi[0]
            && self.lo[1] <= o.lo[1]
            && o.hi[1] <= self.hi[1]
    }
}

/// Finite union of pairwise disjoint non-wrapping boxes. The workhorse for
/// exact set algebra: intersection, difference, volume, emptiness.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BoxSet {
    pub parts: Vec<LinearBox>,
}

impl BoxSet {
    pub fn empty() -> Self {
        BoxSet { parts: Vec::new() }
    }

    pub fn from_torus_box(b: &TorusBox) -> Self {
        b.to_set()
    }

    pub fn from_torus_boxes<'a>(bs: impl IntoIterator<Item = &'a TorusBox>) -> Self {
        let mut parts = Vec::new();
        for b in bs {
            parts.extend(b.linear_parts());
        }
        BoxSet { parts }
    }

    pub fn is_empty(&self) -> bool {
        self.parts.iter().all(|p| p.is_empty())
    }

    pub fn volume(&self) -> AlgebraicScalar {
        let mut v = AlgebraicScalar::zero();
        for p in &self.parts {
            v = v + p.volume();
        }
        v
    }

    pub fn intersect_box(&self, b: &LinearBox) -> BoxSet {
        BoxSet {
            parts: self
                .parts
                .iter()
                .filter_map(|p| p.intersect(b))
                .collect(),
        }
    }

    pub fn intersect(&self, other: &BoxSet) -> BoxSet {
        let mut parts = Vec::new();
        for q in &other.parts {
            for p in &self.parts {
                if let Some(i) = p.intersect(q) {
                    parts.push(i);
                }
            }
        }
        BoxSet { parts }
    }

    pub fn intersect_torus_box(&self, b: &TorusBox) -> BoxSet {
        let mut parts = Vec::new();
        for q in b.linear_parts() {
            for p in &self.parts {
                if let Some(i) = p.intersect(&q) {
                    parts.push(i);
                }
            }
        }
        BoxSet { parts }
    }

    pub fn subtract(&self, other: &BoxSet) -> BoxSet {
        let mut parts = self.parts.clone();
        for q in &other.parts {
            let mut next = Vec::with_capacity(parts.len());
            for p in parts {
                next.extend(p.subtract(q));
            }
            parts = next;
        }
        BoxSet { parts }
    }

    pub fn subtract_torus_box(&self, b: &TorusBox) -> BoxSet {
        self.subtract(&b.to_set())
    }

    pub fn union(&self, other: &BoxSet) -> BoxSet {
        // Disjointness is restored by subtracting first.
        let extra = other.subtract(self);
        let mut parts = self.parts.clone();
        parts.extend(extra.parts);
        BoxSet { parts }
    }

    pub fn translate(&self, t: &Translation, k: i64) -> BoxSet {
        let (dx, dy) = t.step_vector(k);
        let mut parts = Vec::new();
        for p in &self.parts {
            if p.is_empty() {
                continue;
            }
            // A translated linear box may wrap; re-split.
            let lenx = p.hi[0].clone() - p.lo[0].clone();
            let leny = p.hi[1].clone() - p.lo[1].clone();
            let tb = TorusBox {
                lo: [
                    (p.lo[0].clone() + dx.clone()).fract(),
                    (p.lo[1].clone() + dy.clone()).fract(),
                ],
                len: [lenx, leny],
            };
            parts.extend(tb.linear_parts());
        }
        BoxSet { parts }
    }

    pub fn contains_point(&self, p: &TorusPoint) -> bool {
        self.parts.iter().any(|b| b.contains_point(p))
    }

    /// Drop empty parts and normalize representation for stable serialization.
    pub fn normalize(&mut self) {
        self.parts.retain(|p| !p.is_empty());
        self.parts.sort_by(|a, b| {
            box_key(a).partial_cmp(&box_key(b)).unwrap()
        });
    }

    /// Drops parts wholly contained in another part. The union is unchanged;
    /// representations stay compact after cell-based enclosures whose
    /// neighboring bounds overlap heavily.
    pub fn dedupe_contained(&mut self) {
        self.parts.retain(|p| !p.is_empty());
        let mut order: Vec<usize> = (0..self.parts.len()).collect();
        let area = |p: &LinearBox| -> f64 {
            (p.hi[0].to_f64() - p.lo[0].to_f64()) * (p.hi[1].to_f64() - p.lo[1].to_f64())
        };
        order.sort_by(|&i, &j| {
            area(&self.parts[j])
                .partial_cmp(&area(&self.parts[i]))
                .unwrap()
                .then(i.cmp(&j))
        });
        let mut kept: Vec<LinearBox> = Vec::new();
        for &i in &order {
            let p = &self.parts[i];
            if !kept.iter().any(|k| k.contains_box(p)) {
                kept.push(p.clone());
            }
        }
        self.parts = kept;
    }
}

fn box_key(b: &LinearBox) -> [f64; 4] {
    [
        b.lo[0].to_f64(),
        b.lo[1].to_f64(),
        b.hi[0].to_f64(),
        b.hi[1].to_f64(),
    ]
}

// ---------------------------------------------------------------------------
// Serialization. Scalars travel as four "p/q" strings (the basis coefficients
// in lowest terms), so dumps are exact and byte-stable across runs.
// ---------------------------------------------------------------------------

fn rational_to_string(q: &Rational) -> String {
    format!("{}/{}", q.numer(), q.denom())
}

fn rational_from_str(s: &str) -> Result<Rational, String> {
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n, d),
        None => (s, "1"),
    };
    let n: BigInt = n
        .trim()
        .parse()
        .map_err(|_| format!("bad numerator in {s:?}"))?;
    let d: BigInt = d
        .trim()
        .parse()
        .map_err(|_| format!("bad denominator in {s:?}"))?;
    if d.is_zero() {
        return Err(format!("zero denominator in {s:?}"));
    }
    Ok(Ratio::new(n, d))
}

impl serde::Serialize for AlgebraicScalar {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let coeffs = [
            rational_to_string(&self.q0),
            rational_to_string(&self.q1),
            rational_to_string(&self.q2),
            rational_to_string(&self.q3),
        ];
        coeffs.serialize(ser)
    }
}

impl<'de> serde::Deserialize<'de> for AlgebraicScalar {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let coeffs: [String; 4] = serde::Deserialize::deserialize(de)?;
        let mut qs = Vec::with_capacity(4);
        for c in &coeffs {
            qs.push(rational_from_str(c).map_err(serde::de::Error::custom)?);
        }
        Ok(AlgebraicScalar::new(
            qs[0].clone(),
            qs[1].clone(),
            qs[2].clone(),
            qs[3].clone(),
        ))
    }
}

macro_rules! serde_two_fields {
    ($ty:ident, $a:ident, $b:ident, $build:expr) => {
        impl serde::Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
                use serde::ser::SerializeStruct;
                let mut st = ser.serialize_struct(stringify!($ty), 2)?;
                st.serialize_field(stringify!($a), &self.$a)?;
                st.serialize_field(stringify!($b), &self.$b)?;
                st.end()
            }
        }
        impl<'de> serde::Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
                #[derive(serde::Deserialize)]
                struct Raw {
                    $a: SerdeScalarField,
                    $b: SerdeScalarField,
                }
                let raw: Raw = serde::Deserialize::deserialize(de)?;
                let build: fn(SerdeScalarField, SerdeScalarField) -> Result<$ty, String> = $build;
                build(raw.$a, raw.$b).map_err(serde::de::Error::custom)
            }
        }
    };
}

type SerdeScalarField = [AlgebraicScalar; 2];

serde_two_fields!(TorusBox, lo, len, |lo, len| {
    for l in &len {
        if !(l.sign() > 0 && *l <= AlgebraicScalar::one()) {
            return Err("box length out of (0,1]".into());
        }
    }
    Ok(TorusBox::new(lo, len))
});

serde_two_fields!(LinearBox, lo, hi, |lo, hi| Ok(LinearBox { lo, hi }));

impl serde::Serialize for TorusPoint {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        [&self.x, &self.y].serialize(ser)
    }
}

impl<'de> serde::Deserialize<'de> for TorusPoint {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let [x, y]: [AlgebraicScalar; 2] = serde::Deserialize::deserialize(de)?;
        Ok(TorusPoint::new(x, y))
    }
}

impl serde::Serialize for BoxSet {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.parts.serialize(ser)
    }
}

impl<'de> serde::Deserialize<'de> for BoxSet {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let parts: Vec<LinearBox> = serde::Deserialize::deserialize(de)?;
        Ok(BoxSet { parts })
    }
}

impl serde::Serialize for Translation {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = ser.serialize_struct("Translation", 2)?;
        st.serialize_field("alpha", &self.alpha)?;
        st.serialize_field("beta", &self.beta)?;
        st.end()
    }
}

impl<'de> serde::Deserialize<'de> for Translation {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        struct Raw {
            alpha: AlgebraicScalar,
            beta: AlgebraicScalar,
        }
        let raw: Raw = serde::Deserialize::deserialize(de)?;
        Translation::new(raw.alpha, raw.beta).map_err(serde::de::Error::custom)
    }
}

/// First-return decomposition of `base` under R, truncated at `t_max`.
#[derive(Clone, Debug)]
pub struct FirstReturnPartition {
    /// Pairwise disjoint pieces with exact first-return time labels.
    pub pieces: Vec<(BoxSet, u64)>,
    /// Points of the base whose first return exceeds t_max.
    pub remainder: BoxSet,
}

#[derive(Debug, thiserror::Error)]
pub enum FirstReturnError {
    #[error("t_max must be at least 1")]
    ZeroHorizon,
}

/// Exact first-return partition of a torus box into pieces with constant
/// return time ≤ t_max, plus the uncovered remainder.
pub fn first_return_partition(
    base: &TorusBox,
    r: &Translation,
    t_max: u64,
) -> Result<FirstReturnPartition, FirstReturnError> {
    let start = base.to_set();
    let target = base.to_set();
    first_return_partition_sets(&start, &target, r, t_max)
}

/// Generalized form: partition `start` by the first time its points enter
/// `target` (both finite box unions).
pub fn first_return_partition_sets(
    start: &BoxSet,
    target: &BoxSet,
    r: &Translation,
    t_max: u64,
) -> Result<FirstReturnPartition, FirstReturnError> {
    if t_max == 0 {
        return Err(FirstReturnError::ZeroHorizon);
    }
    let mut remaining = start.clone();
    remaining.normalize();
    let mut pieces = Vec::new();
    for t in 1..=t_max {
        if remaining.is_empty() {
            break;
        }
        // R^t(p) ∈ target  ⟺  p ∈ R^{-t}(target).
        let pulled = target.translate(r, -(t as i64));
        let mut hit = remaining.intersect(&pulled);
        hit.normalize();
        if !hit.is_empty() {
            remaining = remaining.subtract(&hit);
            remaining.normalize();
            pieces.push((hit, t));
        }
    }
    Ok(FirstReturnPartition {
        pieces,
        remainder: remaining,
    })
}
