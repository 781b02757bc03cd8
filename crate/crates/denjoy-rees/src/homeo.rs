//! Structured homeomorphisms of the 2-torus.
//!
//! Every map built here is a finite composition of four explicit primitives.
//! That representation is the point: inverses are closed-form, supports can
//! be read off the factors, displacement is bounded by inspection, and image
//! bounds are certified set enclosures instead of samples. Evaluation is
//! exact field arithmetic throughout; no step of the algebra rounds.
//!
//! The higher-level operations (`rearrange_boxes`, `extend_cantor_homeo`,
//! `extend_with_bins`) assemble box moves into homeomorphisms that are the
//! identity on the boundary of a declared parent region. Routing decisions
//! use floating point only to *choose* candidate corridors; every corridor
//! is then accepted or rejected by exact disjointness checks, so a returned
//! map is correct even when the planner's arithmetic was sloppy.

use crate::exactnum::{
    AlgebraicScalar, BoxRelation, BoxSet, LinearBox, TorusBox, TorusPoint, Translation,
};
use std::collections::{HashMap, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum HomeoError {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("no corridor for pair {0} at the working grid resolution")]
    RoutingFailed(usize),
    #[error("hierarchy mismatch: {0}")]
    HierarchyMismatch(String),
    #[error("no admissible bin for ball {0}")]
    BinExhausted(usize),
}

fn sc(n: i64, d: i64) -> AlgebraicScalar {
    AlgebraicScalar::from_ratio(n, d)
}

// ---------------------------------------------------------------------------
// Parent-local frames.
//
// A box strictly inside a parent never wraps in the parent's offset
// coordinates, so all blend algebra happens in a plain rectangle
// [0, plen_0] × [0, plen_1].
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct LocalBox {
    lo: [AlgebraicScalar; 2],
    len: [AlgebraicScalar; 2],
}

impl LocalBox {
    fn hi(&self, axis: usize) -> AlgebraicScalar {
        self.lo[axis].clone() + self.len[axis].clone()
    }

    fn hull(&self, other: &LocalBox) -> LocalBox {
        let mut lo = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        let mut len = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        for a in 0..2 {
            lo[a] = AlgebraicScalar::min(&self.lo[a], &other.lo[a]);
            let hi = AlgebraicScalar::max(&self.hi(a), &other.hi(a));
            len[a] = hi - lo[a].clone();
        }
        LocalBox { lo, len }
    }

    fn inflate(&self, margin: &AlgebraicScalar) -> LocalBox {
        let two = AlgebraicScalar::from_int(2);
        LocalBox {
            lo: [
                self.lo[0].clone() - margin.clone(),
                self.lo[1].clone() - margin.clone(),
            ],
            len: [
                self.len[0].clone() + two.clone() * margin.clone(),
                self.len[1].clone() + two * margin.clone(),
            ],
        }
    }

    fn to_global(&self, parent: &TorusBox) -> TorusBox {
        TorusBox::new(
            [
                parent.lo[0].clone() + self.lo[0].clone(),
                parent.lo[1].clone() + self.lo[1].clone(),
            ],
            self.len.clone(),
        )
    }
}

/// Offsets of `b` inside the closed parent arc, or None when some axis of
/// `b` is not contained in the parent's arc.
fn local_of(parent: &TorusBox, b: &TorusBox) -> Option<LocalBox> {
    let mut lo = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
    for a in 0..2 {
        let off = (b.lo[a].clone() - parent.lo[a].clone()).fract();
        if off.clone() + b.len[a].clone() > parent.len[a] {
            return None;
        }
        lo[a] = off;
    }
    Some(LocalBox {
        lo,
        len: b.len.clone(),
    })
}

fn strictly_inside(l: &LocalBox, plen: &[AlgebraicScalar; 2]) -> bool {
    (0..2).all(|a| l.lo[a].sign() > 0 && l.hi(a) < plen[a])
}

// ---------------------------------------------------------------------------
// Radial blend: the nested-box interpolation underlying every box move.
//
// For t ∈ [0,1] let A(t) be the box interpolating corner-wise from A = A(0)
// to the parent rectangle = A(1), and likewise B(t) from B. The boundaries
// ∂A(t) foliate parent ∖ int(A); the blend carries ∂A(t) onto ∂B(t) side by
// side, each side affinely, and maps A onto B affinely. The corner rays are
// the side-switch loci and both adjacent side maps agree there, so the whole
// map is a homeomorphism of the parent fixing its boundary pointwise. The
// inverse is the same construction with A and B exchanged.
// ---------------------------------------------------------------------------

struct BlendLocal {
    plen: [AlgebraicScalar; 2],
    a_lo: [AlgebraicScalar; 2],
    a_hi: [AlgebraicScalar; 2],
    b_lo: [AlgebraicScalar; 2],
    b_hi: [AlgebraicScalar; 2],
}

impl BlendLocal {
    /// `a` is the source-side box, `b` the image-side box. Both must be
    /// strictly inside the parent's interior.
    fn build(parent: &TorusBox, a: &TorusBox, b: &TorusBox) -> Result<BlendLocal, HomeoError> {
        let la = local_of(parent, a)
            .ok_or_else(|| HomeoError::Geometry("blend source not inside parent".into()))?;
        let lb = local_of(parent, b)
            .ok_or_else(|| HomeoError::Geometry("blend image not inside parent".into()))?;
        if !strictly_inside(&la, &parent.len) {
            return Err(HomeoError::Geometry(
                "blend source touches parent boundary".into(),
            ));
        }
        if !strictly_inside(&lb, &parent.len) {
            return Err(HomeoError::Geometry(
                "blend image touches parent boundary".into(),
            ));
        }
        Ok(BlendLocal {
            plen: parent.len.clone(),
            a_hi: [la.hi(0), la.hi(1)],
            b_hi: [lb.hi(0), lb.hi(1)],
            a_lo: la.lo,
            b_lo: lb.lo,
        })
    }

    /// Leaf parameter of a point: 0 on the closed source box, 1 on the
    /// parent boundary, the unique t with u ∈ ∂A(t) in between.
    fn leaf(&self, u: &[AlgebraicScalar; 2]) -> AlgebraicScalar {
        let mut t = AlgebraicScalar::zero();
        for a in 0..2 {
            // low side: t = (a_lo − u)/a_lo, positive iff u < a_lo
            let tl = (self.a_lo[a].clone() - u[a].clone()) * self.a_lo[a].inverse();
            // high side: t = (u − a_hi)/(plen − a_hi)
            let gap = self.plen[a].clone() - self.a_hi[a].clone();
            let th = (u[a].clone() - self.a_hi[a].clone()) * gap.inverse();
            t = AlgebraicScalar::max(&t, &AlgebraicScalar::max(&tl, &th));
        }
        t
    }

    fn a_side(&self, axis: usize, t: &AlgebraicScalar) -> (AlgebraicScalar, AlgebraicScalar) {
        let lo = (AlgebraicScalar::one() - t.clone()) * self.a_lo[axis].clone();
        let hi = self.a_hi[axis].clone()
            + t.clone() * (self.plen[axis].clone() - self.a_hi[axis].clone());
        (lo, hi)
    }

    fn b_side(&self, axis: usize, t: &AlgebraicScalar) -> (AlgebraicScalar, AlgebraicScalar) {
        let lo = (AlgebraicScalar::one() - t.clone()) * self.b_lo[axis].clone();
        let hi = self.b_hi[axis].clone()
            + t.clone() * (self.plen[axis].clone() - self.b_hi[axis].clone());
        (lo, hi)
    }

    /// Evaluate at a point of the closed parent rectangle (local offsets).
    fn eval(&self, u: &[AlgebraicScalar; 2]) -> [AlgebraicScalar; 2] {
        let t = self.leaf(u);
        if t.sign() == 0 {
            // Affine core A → B.
            let mut v = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
            for a in 0..2 {
                let scale = (self.b_hi[a].clone() - self.b_lo[a].clone())
                    * (self.a_hi[a].clone() - self.a_lo[a].clone()).inverse();
                v[a] =
                    self.b_lo[a].clone() + (u[a].clone() - self.a_lo[a].clone()) * scale;
            }
            return v;
        }
        // Locate a tight side; at corner rays any tight side gives the same
        // image point, so the first match is fine.
        for axis in 0..2 {
            let other = 1 - axis;
            let (alo, ahi) = self.a_side(axis, &t);
            let (blo, bhi) = self.b_side(axis, &t);
            let tight_low = u[axis] == alo;
            let tight_high = u[axis] == ahi;
            if !(tight_low || tight_high) {
                continue;
            }
            let (oalo, oahi) = self.a_side(other, &t);
            let (oblo, obhi) = self.b_side(other, &t);
            let r = (u[other].clone() - oalo.clone()) * (oahi - oalo).inverse();
            let mut v = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
            v[axis] = if tight_low { blo } else { bhi };
            v[other] = oblo.clone() + r * (obhi - oblo);
            return v;
        }
        unreachable!("a positive leaf parameter always has a tight side");
    }
}

// ---------------------------------------------------------------------------
// Primitives and their composition.
// ---------------------------------------------------------------------------

/// One factor of a structured homeomorphism.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Primitive {
    Identity,
    /// Axis-aligned affine bijection src → dst on src, identity elsewhere.
    /// As a standalone factor this is a bijection of the torus only when
    /// src = dst as sets; constructions compose it so that supports match.
    AffineBoxMap { src: TorusBox, dst: TorusBox },
    /// Bijection of `parent` fixing ∂parent, affine src → dst on src,
    /// interpolated on the rest; identity outside the parent.
    RadialBlend {
        parent: TorusBox,
        src: TorusBox,
        dst: TorusBox,
    },
    /// The conjugate R^p ∘ inner ∘ R^{−p} of an already-built map by a power
    /// of the ambient translation.
    ConjugateByPower {
        inner: Box<Homeo>,
        translation: Translation,
        power: i64,
    },
}

impl Primitive {
    fn eval(&self, p: &TorusPoint, inv: bool) -> TorusPoint {
        match self {
            Primitive::Identity => p.clone(),
            Primitive::AffineBoxMap { src, dst } => {
                let (a, b) = if inv { (dst, src) } else { (src, dst) };
                affine_point(a, b, p)
            }
            Primitive::RadialBlend { parent, src, dst } => {
                let (a, b) = if inv { (dst, src) } else { (src, dst) };
                let u0 = (p.x.clone() - parent.lo[0].clone()).fract();
                let u1 = (p.y.clone() - parent.lo[1].clone()).fract();
                if u0 > parent.len[0] || u1 > parent.len[1] {
                    return p.clone();
                }
                let bl = BlendLocal::build(parent, a, b)
                    .expect("blend factors are validated on construction");
                let v = bl.eval(&[u0, u1]);
                TorusPoint::new(
                    parent.lo[0].clone() + v[0].clone(),
                    parent.lo[1].clone() + v[1].clone(),
                )
            }
            Primitive::ConjugateByPower {
                inner,
                translation,
                power,
            } => {
                let y = p.translate(translation, -power);
                let z = if inv {
                    inner.apply_inverse(&y)
                } else {
                    inner.apply(&y)
                };
                z.translate(translation, *power)
            }
        }
    }

    /// Structural inverse; evaluating it forward equals evaluating self
    /// backward, exactly.
    pub fn inverse(&self) -> Primitive {
        match self {
            Primitive::Identity => Primitive::Identity,
            Primitive::AffineBoxMap { src, dst } => Primitive::AffineBoxMap {
                src: dst.clone(),
                dst: src.clone(),
            },
            Primitive::RadialBlend { parent, src, dst } => Primitive::RadialBlend {
                parent: parent.clone(),
                src: dst.clone(),
                dst: src.clone(),
            },
            Primitive::ConjugateByPower {
                inner,
                translation,
                power,
            } => Primitive::ConjugateByPower {
                inner: Box::new(inner.inverse()),
                translation: translation.clone(),
                power: *power,
            },
        }
    }

    /// Upper bound on sup-distance moved by this factor, from the
    /// representation alone: every point stays inside the factor's support
    /// cell, whose per-axis arc length bounds the per-axis motion.
    pub fn displacement_bound(&self) -> AlgebraicScalar {
        let half = sc(1, 2);
        match self {
            Primitive::Identity => AlgebraicScalar::zero(),
            Primitive::AffineBoxMap { src, dst } => {
                let mut worst = AlgebraicScalar::zero();
                for a in 0..2 {
                    let hull = arc_hull_len(
                        &src.lo[a], &src.len[a], &dst.lo[a], &dst.len[a],
                    );
                    worst = AlgebraicScalar::max(&worst, &AlgebraicScalar::min(&hull, &half));
                }
                worst
            }
            Primitive::RadialBlend { parent, .. } => {
                let m = AlgebraicScalar::max(&parent.len[0], &parent.len[1]);
                AlgebraicScalar::min(&m, &half)
            }
            Primitive::ConjugateByPower { inner, .. } => inner.displacement_bound(),
        }
    }

    /// Boxes outside of which this factor is the identity.
    pub fn support(&self) -> Vec<TorusBox> {
        match self {
            Primitive::Identity => vec![],
            Primitive::AffineBoxMap { src, dst } => vec![src.clone(), dst.clone()],
            Primitive::RadialBlend { parent, .. } => vec![parent.clone()],
            Primitive::ConjugateByPower {
                inner,
                translation,
                power,
            } => inner
                .factors
                .iter()
                .flat_map(|f| f.support())
                .map(|b| b.translate(translation, *power))
                .collect(),
        }
    }
}

/// Length of the shortest circular arc containing both input arcs, capped
/// at the full circle.
fn arc_hull_len(
    alo: &AlgebraicScalar,
    alen: &AlgebraicScalar,
    blo: &AlgebraicScalar,
    blen: &AlgebraicScalar,
) -> AlgebraicScalar {
    let one = AlgebraicScalar::one();
    let d = (blo.clone() - alo.clone()).fract();
    let l1 = AlgebraicScalar::max(alen, &(d + blen.clone()));
    let e = (alo.clone() - blo.clone()).fract();
    let l2 = AlgebraicScalar::max(blen, &(e + alen.clone()));
    AlgebraicScalar::min(&AlgebraicScalar::min(&l1, &l2), &one)
}

fn affine_point(a: &TorusBox, b: &TorusBox, p: &TorusPoint) -> TorusPoint {
    let coords = [&p.x, &p.y];
    let mut off = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
    for axis in 0..2 {
        let o = (coords[axis].clone() - a.lo[axis].clone()).fract();
        if !(o < a.len[axis]) {
            return p.clone();
        }
        off[axis] = o;
    }
    let mut v = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
    for axis in 0..2 {
        let scale = b.len[axis].clone() * a.len[axis].inverse();
        v[axis] = b.lo[axis].clone() + off[axis].clone() * scale;
    }
    TorusPoint::new(v[0].clone(), v[1].clone())
}

/// Affine image of `t` (a box inside `a`) under the box affinity a → b.
fn affine_box(a: &TorusBox, b: &TorusBox, t: &TorusBox) -> TorusBox {
    let mut lo = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
    let mut len = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
    for axis in 0..2 {
        let off = (t.lo[axis].clone() - a.lo[axis].clone()).fract();
        let scale = b.len[axis].clone() * a.len[axis].inverse();
        lo[axis] = b.lo[axis].clone() + off * scale.clone();
        len[axis] = t.len[axis].clone() * scale;
    }
    TorusBox::new(lo, len)
}

/// Homeomorphism of the torus as an ordered composition of primitives
/// (first factor applied first). Values are immutable; evaluation is pure.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Homeo {
    pub factors: Vec<Primitive>,
}

impl Default for Homeo {
    fn default() -> Self {
        Homeo::identity()
    }
}

impl Homeo {
    pub fn identity() -> Homeo {
        Homeo {
            factors: Vec::new(),
        }
    }

    pub fn from_primitive(p: Primitive) -> Homeo {
        Homeo { factors: vec![p] }
    }

    /// Composition: self first, then `next`.
    pub fn then(&self, next: &Homeo) -> Homeo {
        let mut factors = self.factors.clone();
        factors.extend(next.factors.iter().cloned());
        Homeo { factors }
    }

    pub fn apply(&self, p: &TorusPoint) -> TorusPoint {
        let mut q = p.clone();
        for f in &self.factors {
            q = f.eval(&q, false);
        }
        q
    }

    pub fn apply_inverse(&self, p: &TorusPoint) -> TorusPoint {
        let mut q = p.clone();
        for f in self.factors.iter().rev() {
            q = f.eval(&q, true);
        }
        q
    }

    pub fn inverse(&self) -> Homeo {
        Homeo {
            factors: self.factors.iter().rev().map(|f| f.inverse()).collect(),
        }
    }

    /// Certified bound on sup-distance between this map and the identity:
    /// the sum of per-factor support diameters (triangle inequality along
    /// the composition), capped at the torus diameter 1/2.
    pub fn displacement_bound(&self) -> AlgebraicScalar {
        let mut s = AlgebraicScalar::zero();
        for f in &self.factors {
            s = s + f.displacement_bound();
        }
        AlgebraicScalar::min(&s, &sc(1, 2))
    }

    /// Certified sup-distance bound between two maps when one factor list
    /// extends the other: the extra tail is the whole difference. None when
    /// neither is a prefix of the other.
    pub fn difference_bound(a: &Homeo, b: &Homeo) -> Option<AlgebraicScalar> {
        let (short, long) = if a.factors.len() <= b.factors.len() {
            (a, b)
        } else {
            (b, a)
        };
        if long.factors[..short.factors.len()] != short.factors[..] {
            return None;
        }
        let tail = Homeo {
            factors: long.factors[short.factors.len()..].to_vec(),
        };
        Some(tail.displacement_bound())
    }

    /// Per-factor evaluation trace: (point in, point out) for each factor.
    pub fn trace(&self, p: &TorusPoint) -> Vec<(TorusPoint, TorusPoint)> {
        let mut q = p.clone();
        let mut out = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            let next = f.eval(&q, false);
            out.push((q.clone(), next.clone()));
            q = next;
        }
        out
    }

    pub fn support(&self) -> Vec<TorusBox> {
        self.factors.iter().flat_map(|f| f.support()).collect()
    }
}

/// Validated single-blend constructor: affine src → dst on src, identity on
/// the parent's boundary and outside the parent.
pub fn radial_blend(
    parent: &TorusBox,
    src: &TorusBox,
    dst: &TorusBox,
) -> Result<Homeo, HomeoError> {
    BlendLocal::build(parent, src, dst)?;
    Ok(Homeo::from_primitive(Primitive::RadialBlend {
        parent: parent.clone(),
        src: src.clone(),
        dst: dst.clone(),
    }))
}

// ---------------------------------------------------------------------------
// Certified image bounds.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Two-sided enclosure of an image set: inner ⊆ true image ⊆ outer.
#[derive(Clone, Debug)]
pub struct RegionBound {
    pub outer: BoxSet,
    pub inner: BoxSet,
}

/// Certified enclosure of h(target) or h^{-1}(target). Exact wherever the
/// factors act affinely; a blend's interpolation annulus contributes
/// interval-arithmetic cells to the outer bound (tightening as `resolution`
/// grows) and nothing to the inner bound.
pub fn bound_region(
    h: &Homeo,
    target: &TorusBox,
    direction: Direction,
    resolution: u32,
) -> RegionBound {
    let tset = target.to_set();
    let mut outer = homeo_outer_image(h, &tset, direction, resolution);
    outer.normalize();
    let mut inner = homeo_inner_image(h, &tset, direction);
    inner.normalize();
    RegionBound { outer, inner }
}

/// Set guaranteed to contain the image of `set` under h (or h^{-1}).
pub fn homeo_outer_image(
    h: &Homeo,
    set: &BoxSet,
    direction: Direction,
    resolution: u32,
) -> BoxSet {
    let mut cur = set.clone();
    match direction {
        Direction::Forward => {
            for f in &h.factors {
                cur = prim_outer_image(f, &cur, false, resolution);
                cur.dedupe_contained();
            }
        }
        Direction::Inverse => {
            for f in h.factors.iter().rev() {
                cur = prim_outer_image(f, &cur, true, resolution);
                cur.dedupe_contained();
            }
        }
    }
    cur
}

/// Set guaranteed to be contained in the image of `set` under h (or h^{-1}).
pub fn homeo_inner_image(h: &Homeo, set: &BoxSet, direction: Direction) -> BoxSet {
    let mut cur = set.clone();
    match direction {
        Direction::Forward => {
            for f in &h.factors {
                cur = prim_inner_image(f, &cur, false);
            }
        }
        Direction::Inverse => {
            for f in h.factors.iter().rev() {
                cur = prim_inner_image(f, &cur, true);
            }
        }
    }
    cur
}

fn prim_inner_image(prim: &Primitive, set: &BoxSet, inv: bool) -> BoxSet {
    match prim {
        Primitive::Identity => set.clone(),
        Primitive::AffineBoxMap { src, dst } => {
            // Exact: the evaluator is affine on its source box and the
            // identity elsewhere.
            let (a, b) = if inv { (dst, src) } else { (src, dst) };
            let fixed = set.subtract(&a.to_set());
            let moved = affine_image_set(a, b, &set.intersect(&a.to_set()));
            let mut out = fixed.union(&moved);
            out.normalize();
            out
        }
        Primitive::RadialBlend { parent, src, dst } => {
            // Exact outside the parent and on the affine core; the annulus
            // part of the set is dropped, which only shrinks the bound.
            let (a, b) = if inv { (dst, src) } else { (src, dst) };
            let fixed = set.subtract(&parent.to_set());
            let moved = affine_image_set(a, b, &set.intersect(&a.to_set()));
            let mut out = fixed.union(&moved);
            out.normalize();
            out
        }
        Primitive::ConjugateByPower {
            inner,
            translation,
            power,
        } => {
            let pulled = set.translate(translation, -power);
            let dir = if inv {
                Direction::Inverse
            } else {
                Direction::Forward
            };
            let img = homeo_inner_image(inner, &pulled, dir);
            img.translate(translation, *power)
        }
    }
}

fn prim_outer_image(prim: &Primitive, set: &BoxSet, inv: bool, resolution: u32) -> BoxSet {
    match prim {
        Primitive::Identity => set.clone(),
        Primitive::AffineBoxMap { src, dst } => {
            let (a, b) = if inv { (dst, src) } else { (src, dst) };
            let fixed = set.subtract(&a.to_set());
            let moved = affine_image_set(a, b, &set.intersect(&a.to_set()));
            let mut out = fixed.union(&moved);
            out.normalize();
            out
        }
        Primitive::RadialBlend { parent, src, dst } => {
            let (a, b) = if inv { (dst, src) } else { (src, dst) };
            blend_outer_image(parent, a, b, set, resolution)
        }
        Primitive::ConjugateByPower {
            inner,
            translation,
            power,
        } => {
            let pulled = set.translate(translation, -power);
            let dir = if inv {
                Direction::Inverse
            } else {
                Direction::Forward
            };
            let img = homeo_outer_image(inner, &pulled, dir, resolution);
            img.translate(translation, *power)
        }
    }
}

fn affine_image_set(a: &TorusBox, b: &TorusBox, set: &BoxSet) -> BoxSet {
    let mut parts = Vec::new();
    for p in &set.parts {
        if p.is_empty() {
            continue;
        }
        let t = TorusBox::new(
            p.lo.clone(),
            [
                p.hi[0].clone() - p.lo[0].clone(),
                p.hi[1].clone() - p.lo[1].clone(),
            ],
        );
        parts.extend(affine_box(a, b, &t).linear_parts());
    }
    BoxSet { parts }
}

/// Exact-plus-interval enclosure of the image of `set` under the blend with
/// source-side box `a` and image-side box `b` inside `parent`.
fn blend_outer_image(
    parent: &TorusBox,
    a: &TorusBox,
    b: &TorusBox,
    set: &BoxSet,
    resolution: u32,
) -> BoxSet {
    let bl = BlendLocal::build(parent, a, b).expect("blend factors validated on construction");
    let pset = parent.to_set();
    let aset = a.to_set();
    let outside = set.subtract(&pset);
    let core = affine_image_set(a, b, &set.intersect(&aset));
    let mut annulus = set.intersect(&pset).subtract(&aset);
    annulus.normalize();

    let mut out = outside.union(&core);
    let res = resolution.clamp(1, 16) as i64;
    for piece in &annulus.parts {
        if piece.is_empty() {
            continue;
        }
        let loc = local_of(
            parent,
            &TorusBox::new(
                piece.lo.clone(),
                [
                    piece.hi[0].clone() - piece.lo[0].clone(),
                    piece.hi[1].clone() - piece.lo[1].clone(),
                ],
            ),
        )
        .expect("annulus pieces sit inside the parent");
        let step = [
            loc.len[0].clone() * sc(1, res),
            loc.len[1].clone() * sc(1, res),
        ];
        for ix in 0..res {
            for iy in 0..res {
                let cell_lo = [
                    loc.lo[0].clone() + sc(ix, 1) * step[0].clone(),
                    loc.lo[1].clone() + sc(iy, 1) * step[1].clone(),
                ];
                let cell_hi = [
                    loc.lo[0].clone() + sc(ix + 1, 1) * step[0].clone(),
                    loc.lo[1].clone() + sc(iy + 1, 1) * step[1].clone(),
                ];
                let (vlo, vhi) = annulus_cell_bound(&bl, &cell_lo, &cell_hi);
                let bx = LocalBox {
                    lo: vlo.clone(),
                    len: [
                        vhi[0].clone() - vlo[0].clone(),
                        vhi[1].clone() - vlo[1].clone(),
                    ],
                };
                // Neighboring cell bounds overlap heavily; collecting them
                // raw and deduping once keeps the part count linear. Overlap
                // is fine: outer images are used membership-only.
                out.parts.extend(bx.to_global(parent).to_set().parts);
            }
        }
    }
    out.dedupe_contained();
    out.normalize();
    out
}

/// Interval-arithmetic enclosure of blend images over one annulus cell.
/// Candidates cover every side that can be tight somewhere in the cell, so
/// the hull is a certified per-axis bound.
fn annulus_cell_bound(
    bl: &BlendLocal,
    lo: &[AlgebraicScalar; 2],
    hi: &[AlgebraicScalar; 2],
) -> ([AlgebraicScalar; 2], [AlgebraicScalar; 2]) {
    let zero = AlgebraicScalar::zero();
    let one = AlgebraicScalar::one();
    // Ratio interval per side: (axis, low/high) → [min, max] over the cell.
    let mut side_lo = [[zero.clone(), zero.clone()], [zero.clone(), zero.clone()]];
    let mut side_hi = side_lo.clone();
    for a in 0..2 {
        let inv_alo = bl.a_lo[a].inverse();
        side_lo[a][0] = (bl.a_lo[a].clone() - hi[a].clone()) * inv_alo.clone();
        side_hi[a][0] = (bl.a_lo[a].clone() - lo[a].clone()) * inv_alo;
        let inv_gap = (bl.plen[a].clone() - bl.a_hi[a].clone()).inverse();
        side_lo[a][1] = (lo[a].clone() - bl.a_hi[a].clone()) * inv_gap.clone();
        side_hi[a][1] = (hi[a].clone() - bl.a_hi[a].clone()) * inv_gap;
    }
    let mut t_lo = zero.clone();
    let mut t_hi = zero.clone();
    for a in 0..2 {
        for s in 0..2 {
            t_lo = AlgebraicScalar::max(&t_lo, &side_lo[a][s]);
            t_hi = AlgebraicScalar::max(&t_hi, &side_hi[a][s]);
        }
    }
    t_hi = AlgebraicScalar::min(&t_hi, &one);
    let possible = |a: usize, s: usize| side_hi[a][s] >= t_lo;

    let mut vlo = [zero.clone(), zero.clone()];
    let mut vhi = [zero.clone(), zero.clone()];
    for axis in 0..2 {
        let other = 1 - axis;
        let mut cands: Vec<(AlgebraicScalar, AlgebraicScalar)> = Vec::new();
        if possible(axis, 0) {
            // v = (1−t)·b_lo, decreasing in t.
            cands.push((
                (one.clone() - t_hi.clone()) * bl.b_lo[axis].clone(),
                (one.clone() - t_lo.clone()) * bl.b_lo[axis].clone(),
            ));
        }
        if possible(axis, 1) {
            // v = b_hi + t·(plen − b_hi), increasing in t.
            let g = bl.plen[axis].clone() - bl.b_hi[axis].clone();
            cands.push((
                bl.b_hi[axis].clone() + t_lo.clone() * g.clone(),
                bl.b_hi[axis].clone() + t_hi.clone() * g,
            ));
        }
        if possible(other, 0) || possible(other, 1) {
            // Transported relative position along the side.
            let (alo_t1, ahi_t1) = bl.a_side(axis, &t_lo);
            let (alo_t2, ahi_t2) = bl.a_side(axis, &t_hi);
            // a_lo(t) decreases, a_hi(t) increases with t.
            let den_lo = ahi_t1 - alo_t1.clone(); // a_len at t_lo: the minimum
            let den_hi = ahi_t2 - alo_t2.clone();
            let mut num_lo = lo[axis].clone() - alo_t1;
            if num_lo.sign() < 0 {
                num_lo = zero.clone();
            }
            let num_hi = hi[axis].clone() - alo_t2;
            let mut r_lo = num_lo * den_hi.inverse();
            let mut r_hi = num_hi * den_lo.inverse();
            r_lo = AlgebraicScalar::max(&r_lo, &zero);
            r_hi = AlgebraicScalar::min(&r_hi, &one);
            r_lo = AlgebraicScalar::min(&r_lo, &r_hi);
            let (blo_t1, bhi_t1) = bl.b_side(axis, &t_lo);
            let (blo_t2, bhi_t2) = bl.b_side(axis, &t_hi);
            let blen_lo = bhi_t1 - blo_t1.clone();
            let blen_hi = bhi_t2 - blo_t2.clone();
            cands.push((
                blo_t2 + r_lo * blen_lo,
                blo_t1 + r_hi * blen_hi,
            ));
        }
        let (mut alo, mut ahi) = cands[0].clone();
        for (l, h) in cands.iter().skip(1) {
            alo = AlgebraicScalar::min(&alo, l);
            ahi = AlgebraicScalar::max(&ahi, h);
        }
        alo = AlgebraicScalar::max(&alo, &zero);
        ahi = AlgebraicScalar::min(&ahi, &bl.plen[axis]);
        if !(alo < ahi) {
            // Degenerate enclosure; widen to stay an outer bound.
            ahi = AlgebraicScalar::min(
                &(alo.clone() + AlgebraicScalar::from_ratio(1, 1 << 40)),
                &bl.plen[axis],
            );
        }
        vlo[axis] = alo;
        vhi[axis] = ahi;
    }
    (vlo, vhi)
}

/// Exact complement of a box union within the torus.
pub fn complement(set: &BoxSet) -> BoxSet {
    let full = BoxSet {
        parts: vec![LinearBox {
            lo: [AlgebraicScalar::zero(), AlgebraicScalar::zero()],
            hi: [AlgebraicScalar::one(), AlgebraicScalar::one()],
        }],
    };
    let mut c = full.subtract(set);
    c.normalize();
    c
}

/// Max-metric dilation: every point within distance rho of the set.
pub fn dilate(set: &BoxSet, rho: &AlgebraicScalar) -> BoxSet {
    assert!(rho.sign() >= 0, "dilation radius must be nonnegative");
    let one = AlgebraicScalar::one();
    let two = AlgebraicScalar::from_int(2);
    let mut out = BoxSet::empty();
    for p in &set.parts {
        if p.is_empty() {
            continue;
        }
        let mut axes: Vec<Vec<(AlgebraicScalar, AlgebraicScalar)>> = Vec::new();
        for a in 0..2 {
            let len = p.hi[a].clone() - p.lo[a].clone() + two.clone() * rho.clone();
            if len >= one {
                axes.push(vec![(AlgebraicScalar::zero(), one.clone())]);
                continue;
            }
            let lo = (p.lo[a].clone() - rho.clone()).fract();
            let hi = lo.clone() + len;
            if hi <= one {
                axes.push(vec![(lo, hi)]);
            } else {
                axes.push(vec![
                    (lo, one.clone()),
                    (AlgebraicScalar::zero(), hi - one.clone()),
                ]);
            }
        }
        for (xl, xh) in &axes[0] {
            for (yl, yh) in &axes[1] {
                out.parts.push(LinearBox {
                    lo: [xl.clone(), yl.clone()],
                    hi: [xh.clone(), yh.clone()],
                });
            }
        }
    }
    // Parts may overlap; downstream use is membership-only.
    out.dedupe_contained();
    out.normalize();
    out
}

/// Certificate that no open max-metric ball of radius > rho fits inside the
/// set: true means the internal radius is at most rho. Conservative: a false
/// return proves nothing. Meaningful only for proper subsets of the torus.
pub fn inner_radius_at_most(set: &BoxSet, rho: &AlgebraicScalar) -> bool {
    complement(&dilate(&complement(set), rho)).is_empty()
}

// ---------------------------------------------------------------------------
// Corridor routing.
// ---------------------------------------------------------------------------

const GRID_CAP: i64 = 48;
const ENDPOINT_TRIES: usize = 24;
const PARK_TRIES: usize = 40;

enum RouteFail {
    Blocked,
    Geometry(String),
}

struct Router {
    parent: TorusBox,
    obstacles: Vec<TorusBox>,
}

impl Router {
    /// Tube acceptance: strictly inside the routing parent and exactly
    /// disjoint from every obstacle.
    fn tube_ok(&self, tube: &LocalBox) -> bool {
        if !strictly_inside(tube, &self.parent.len) {
            return false;
        }
        let g = tube.to_global(&self.parent);
        self.obstacles
            .iter()
            .all(|o| g.relation(o) == BoxRelation::Disjoint)
    }

    fn local_strict(&self, b: &TorusBox, what: &str) -> Result<LocalBox, RouteFail> {
        let l = local_of(&self.parent, b)
            .ok_or_else(|| RouteFail::Geometry(format!("{what} not inside routing parent")))?;
        if !strictly_inside(&l, &self.parent.len) {
            return Err(RouteFail::Geometry(format!(
                "{what} touches routing parent boundary"
            )));
        }
        Ok(l)
    }

    fn margin_of(&self, tube: &LocalBox) -> AlgebraicScalar {
        let mut m = AlgebraicScalar::min(&tube.lo[0], &tube.lo[1]);
        for a in 0..2 {
            let gap = self.parent.len[a].clone() - tube.hi(a);
            m = AlgebraicScalar::min(&m, &gap);
        }
        m
    }

    fn make_blend(
        &self,
        tube: &LocalBox,
        src: &TorusBox,
        dst: &TorusBox,
    ) -> Result<Primitive, RouteFail> {
        let parent = tube.to_global(&self.parent);
        BlendLocal::build(&parent, src, dst)
            .map_err(|e| RouteFail::Geometry(format!("corridor too tight: {e}")))?;
        Ok(Primitive::RadialBlend {
            parent,
            src: src.clone(),
            dst: dst.clone(),
        })
    }

    /// Single straight or L-free move attempt: hull corridor with clearance.
    fn direct(&self, cur: &LocalBox, dst: &LocalBox) -> Option<LocalBox> {
        let hull = cur.hull(dst);
        let margin = self.margin_of(&hull);
        if margin.sign() <= 0 {
            return None;
        }
        // Prefer a roomy tube, but retry thinner before giving up: a fat
        // inflation can clip obstacles a snug corridor slips past.
        for denom in [2_i64, 8, 32, 128] {
            let tube = hull.inflate(&(margin.clone() * sc(1, denom)));
            if self.tube_ok(&tube) {
                return Some(tube);
            }
        }
        None
    }

    /// Route `cur` onto `dst` (sizes may differ: an in-place resize happens
    /// first). Returns the blend factors in application order.
    fn route(&self, cur: &TorusBox, dst: &TorusBox) -> Result<Vec<Primitive>, RouteFail> {
        if cur == dst {
            return Ok(vec![]);
        }
        let mut factors = Vec::new();
        let mut cur_box = cur.clone();
        let mut cur_loc = self.local_strict(cur, "moving box")?;
        let dst_loc = self.local_strict(dst, "target box")?;

        if cur.len != dst.len {
            let resized = self.resize_in_place(&cur_loc, &dst_loc)?;
            let g = resized.to_global(&self.parent);
            let hull = cur_loc.hull(&resized);
            let margin = self.margin_of(&hull);
            if margin.sign() <= 0 {
                return Err(RouteFail::Blocked);
            }
            let tube = hull.inflate(&(margin * sc(1, 2)));
            if !self.tube_ok(&tube) {
                return Err(RouteFail::Blocked);
            }
            factors.push(self.make_blend(&tube, &cur_box, &g)?);
            cur_box = g;
            cur_loc = resized;
            if cur_box == *dst {
                return Ok(factors);
            }
        }

        // Direct corridor first; grid search as fallback.
        if let Some(tube) = self.direct(&cur_loc, &dst_loc) {
            factors.push(self.make_blend(&tube, &cur_box, dst)?);
            return Ok(factors);
        }

        let grid = Grid::build(&self.parent.len, &dst_loc.len).ok_or(RouteFail::Blocked)?;
        let mut blocked: HashMap<(i64, i64), bool> = HashMap::new();
        let mut is_free = |g: (i64, i64)| -> bool {
            *blocked.entry(g).or_insert_with(|| {
                let tube = grid.node_box(g).inflate(&grid.clearance);
                !self.tube_ok(&tube)
            }) == false
        };
        let mut edges: HashMap<((i64, i64), (i64, i64)), bool> = HashMap::new();
        let mut edge_free = |a: (i64, i64), b: (i64, i64)| -> bool {
            let key = if a <= b { (a, b) } else { (b, a) };
            *edges.entry(key).or_insert_with(|| {
                let tube = grid
                    .node_box(key.0)
                    .hull(&grid.node_box(key.1))
                    .inflate(&grid.clearance);
                self.tube_ok(&tube)
            })
        };

        let gs = self.snap(&grid, &cur_loc, &cur_box, &mut is_free)?;
        let ge = self.snap(&grid, &dst_loc, dst, &mut is_free)?;

        let path = bfs(&grid, gs, ge, &mut is_free, &mut edge_free).ok_or(RouteFail::Blocked)?;

        // Entry move onto the grid.
        let first = grid.node_box(path[0]);
        if first.lo != cur_loc.lo {
            let tube = cur_loc.hull(&first).inflate(&grid.clearance);
            if !self.tube_ok(&tube) {
                return Err(RouteFail::Blocked);
            }
            let g = first.to_global(&self.parent);
            factors.push(self.make_blend(&tube, &cur_box, &g)?);
            cur_box = g;
        }
        // Merged straight segments along the path.
        for seg in merge_segments(&path) {
            let from = grid.node_box(seg.0);
            let to = grid.node_box(seg.1);
            let tube = from.hull(&to).inflate(&grid.clearance);
            let to_global = to.to_global(&self.parent);
            if self.tube_ok(&tube) {
                factors.push(self.make_blend(&tube, &cur_box, &to_global)?);
                cur_box = to_global;
            } else {
                // Fall back to per-step moves inside this run.
                let mut g = seg.0;
                while g != seg.1 {
                    let next = (g.0 + seg.2 .0, g.1 + seg.2 .1);
                    let nb = grid.node_box(next);
                    let tube = grid.node_box(g).hull(&nb).inflate(&grid.clearance);
                    if !self.tube_ok(&tube) {
                        return Err(RouteFail::Blocked);
                    }
                    let ng = nb.to_global(&self.parent);
                    factors.push(self.make_blend(&tube, &cur_box, &ng)?);
                    cur_box = ng;
                    g = next;
                }
            }
        }
        // Exit move off the grid.
        if cur_box != *dst {
            let last = grid.node_box(*path.last().unwrap());
            let tube = last.hull(&dst_loc).inflate(&grid.clearance);
            if !self.tube_ok(&tube) {
                return Err(RouteFail::Blocked);
            }
            factors.push(self.make_blend(&tube, &cur_box, dst)?);
        }
        Ok(factors)
    }

    /// Dst-sized box near the current position, kept strictly inside the
    /// parent with a quarter-size margin.
    fn resize_in_place(
        &self,
        cur: &LocalBox,
        dst: &LocalBox,
    ) -> Result<LocalBox, RouteFail> {
        let mut lo = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        for a in 0..2 {
            let center =
                cur.lo[a].clone() + cur.len[a].clone() * sc(1, 2) - dst.len[a].clone() * sc(1, 2);
            let m = dst.len[a].clone() * sc(1, 4);
            let max_lo = self.parent.len[a].clone() - dst.len[a].clone() - m.clone();
            if max_lo < m {
                return Err(RouteFail::Geometry(
                    "target size leaves no room inside routing parent".into(),
                ));
            }
            lo[a] = AlgebraicScalar::min(&AlgebraicScalar::max(&center, &m), &max_lo);
        }
        Ok(LocalBox {
            lo,
            len: dst.len.clone(),
        })
    }

    /// Nearest free grid node joinable to `b` by a valid hull corridor.
    fn snap(
        &self,
        grid: &Grid,
        loc: &LocalBox,
        global: &TorusBox,
        is_free: &mut impl FnMut((i64, i64)) -> bool,
    ) -> Result<(i64, i64), RouteFail> {
        let _ = global;
        for g in grid.nodes_by_distance(loc).into_iter().take(ENDPOINT_TRIES) {
            if !is_free(g) {
                continue;
            }
            let nb = grid.node_box(g);
            let tube = loc.hull(&nb).inflate(&grid.clearance);
            if self.tube_ok(&tube) {
                return Ok(g);
            }
        }
        Err(RouteFail::Blocked)
    }

    /// Find a free spot for `cur` (used to break move cycles): route to the
    /// nearest reachable free node. Corridors only avoid `self.obstacles`;
    /// the spot itself must additionally be disjoint from every `avoid` box.
    fn park(&self, cur: &TorusBox, avoid: &[TorusBox]) -> Option<(Vec<Primitive>, TorusBox)> {
        let loc = self.local_strict(cur, "parked box").ok()?;
        let grid = Grid::build(&self.parent.len, &loc.len)?;
        let mut blocked: HashMap<(i64, i64), bool> = HashMap::new();
        let mut is_free = |g: (i64, i64)| -> bool {
            *blocked.entry(g).or_insert_with(|| {
                let tube = grid.node_box(g).inflate(&grid.clearance);
                !self.tube_ok(&tube)
            }) == false
        };
        for g in grid.nodes_by_distance(&loc).into_iter().take(PARK_TRIES) {
            if !is_free(g) {
                continue;
            }
            let spot = grid.node_box(g).to_global(&self.parent);
            if spot == *cur {
                continue;
            }
            if avoid
                .iter()
                .any(|b| spot.relation(b) != BoxRelation::Disjoint)
            {
                continue;
            }
            if let Ok(factors) = self.route(cur, &spot) {
                return Some((factors, spot));
            }
        }
        None
    }
}

/// Axis-aligned placement lattice for a box of fixed size inside a parent.
/// Node (i, j) is the box low corner at margin + step·(i, j).
struct Grid {
    margin: [AlgebraicScalar; 2],
    step: [AlgebraicScalar; 2],
    n: [i64; 2],
    len: [AlgebraicScalar; 2],
    clearance: AlgebraicScalar,
}

impl Grid {
    fn build(plen: &[AlgebraicScalar; 2], movelen: &[AlgebraicScalar; 2]) -> Option<Grid> {
        let mut margin = [AlgebraicScalar::zero(), AlgebraicScalar::zero()];
        let mut step = margin.clone();
        let mut n = [0i64; 2];
        for a in 0..2 {
            margin[a] = movelen[a].clone() * sc(1, 4);
            let usable =
                plen[a].clone() - movelen[a].clone() - margin[a].clone() * AlgebraicScalar::from_int(2);
            if usable.sign() <= 0 {
                return None;
            }
            // Planner-only float: picks the node count; all geometry that
            // depends on it is checked exactly afterwards.
            let ideal = usable.to_f64() / (movelen[a].to_f64() / 2.0);
            n[a] = (ideal.ceil() as i64).clamp(1, GRID_CAP);
            step[a] = usable * sc(1, n[a]);
        }
        let mut clearance = AlgebraicScalar::min(&step[0], &step[1]);
        clearance = AlgebraicScalar::min(&clearance, &margin[0]);
        clearance = AlgebraicScalar::min(&clearance, &margin[1]);
        Some(Grid {
            margin,
            step,
            n,
            len: movelen.clone(),
            clearance: clearance * sc(1, 4),
        })
    }

    fn node_box(&self, g: (i64, i64)) -> LocalBox {
        LocalBox {
            lo: [
                self.margin[0].clone() + sc(g.0, 1) * self.step[0].clone(),
                self.margin[1].clone() + sc(g.1, 1) * self.step[1].clone(),
            ],
            len: self.len.clone(),
        }
    }

    fn nodes_by_distance(&self, from: &LocalBox) -> Vec<(i64, i64)> {
        let fx = from.lo[0].to_f64();
        let fy = from.lo[1].to_f64();
        let mut nodes: Vec<((i64, i64), f64)> = Vec::new();
        for i in 0..=self.n[0] {
            for j in 0..=self.n[1] {
                let b = self.node_box((i, j));
                let dx = b.lo[0].to_f64() - fx;
                let dy = b.lo[1].to_f64() - fy;
                nodes.push(((i, j), dx * dx + dy * dy));
            }
        }
        nodes.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        nodes.into_iter().map(|(g, _)| g).collect()
    }
}

/// Breadth-first search over grid nodes where a step is taken only when the
/// whole corridor tube between the two nodes is admissible. Node freeness
/// alone is not enough: an obstacle can sit between two free nodes.
fn bfs(
    grid: &Grid,
    start: (i64, i64),
    goal: (i64, i64),
    is_free: &mut impl FnMut((i64, i64)) -> bool,
    edge_free: &mut impl FnMut((i64, i64), (i64, i64)) -> bool,
) -> Option<Vec<(i64, i64)>> {
    if !is_free(start) || !is_free(goal) {
        return None;
    }
    let mut prev: HashMap<(i64, i64), (i64, i64)> = HashMap::new();
    let mut queue = VecDeque::new();
    queue.push_back(start);
    prev.insert(start, start);
    while let Some(g) = queue.pop_front() {
        if g == goal {
            let mut path = vec![g];
            let mut cur = g;
            while cur != start {
                cur = prev[&cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let nb = (g.0 + dx, g.1 + dy);
            if nb.0 < 0 || nb.1 < 0 || nb.0 > grid.n[0] || nb.1 > grid.n[1] {
                continue;
            }
            if prev.contains_key(&nb) || !edge_free(g, nb) {
                continue;
            }
            prev.insert(nb, g);
            queue.push_back(nb);
        }
    }
    None
}

/// Maximal straight runs of a grid path: (from, to, unit step).
fn merge_segments(path: &[(i64, i64)]) -> Vec<((i64, i64), (i64, i64), (i64, i64))> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < path.len() {
        let dir = (path[i + 1].0 - path[i].0, path[i + 1].1 - path[i].1);
        let mut j = i + 1;
        while j + 1 < path.len()
            && (path[j + 1].0 - path[j].0, path[j + 1].1 - path[j].1) == dir
        {
            j += 1;
        }
        out.push((path[i], path[j], dir));
        i = j;
    }
    out
}

/// Move each src box onto its dst box inside `parent` through corridors that
/// stay clear of `protected`, of boxes not yet moved, and of boxes already
/// placed. The net map is affine src_i → dst_i for every pair and the
/// identity on the parent's boundary. Cycles are broken by parking a box at
/// a free spot.
pub fn rearrange_boxes(
    parent: &TorusBox,
    pairs: &[(TorusBox, TorusBox)],
    protected: &[TorusBox],
) -> Result<Homeo, HomeoError> {
    let n = pairs.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if pairs[i].0.relation(&pairs[j].0) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!(
                    "source boxes {i} and {j} overlap"
                )));
            }
            if pairs[i].1.relation(&pairs[j].1) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!(
                    "target boxes {i} and {j} overlap"
                )));
            }
        }
    }
    let mut cur: Vec<TorusBox> = pairs.iter().map(|p| p.0.clone()).collect();
    let mut done = vec![false; n];
    let mut factors: Vec<Primitive> = Vec::new();
    let mut park_budget = n + 1;

    while done.iter().any(|d| !d) {
        let movable = (0..n).find(|&i| {
            !done[i]
                && (0..n).all(|j| {
                    j == i || done[j] || pairs[i].1.relation(&cur[j]) == BoxRelation::Disjoint
                })
        });
        match movable {
            Some(i) => {
                let mut obstacles: Vec<TorusBox> = protected.to_vec();
                for (j, c) in cur.iter().enumerate() {
                    if j != i {
                        obstacles.push(c.clone());
                    }
                }
                let router = Router {
                    parent: parent.clone(),
                    obstacles,
                };
                let prims = router.route(&cur[i], &pairs[i].1).map_err(|e| match e {
                    RouteFail::Blocked => HomeoError::RoutingFailed(i),
                    RouteFail::Geometry(g) => HomeoError::Geometry(g),
                })?;
                factors.extend(prims);
                cur[i] = pairs[i].1.clone();
                done[i] = true;
            }
            None => {
                // Every pending target is covered by another pending box:
                // park the first pending box away from all pending targets.
                let i = (0..n).find(|&i| !done[i]).unwrap();
                if park_budget == 0 {
                    return Err(HomeoError::RoutingFailed(i));
                }
                park_budget -= 1;
                let mut obstacles: Vec<TorusBox> = protected.to_vec();
                for (j, c) in cur.iter().enumerate() {
                    if j != i {
                        obstacles.push(c.clone());
                    }
                }
                // Pending targets stay open for corridors but are not valid
                // parking spots: landing there would re-block the cycle.
                let avoid: Vec<TorusBox> = pairs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !done[*j])
                    .map(|(_, p)| p.1.clone())
                    .collect();
                let router = Router {
                    parent: parent.clone(),
                    obstacles,
                };
                let (prims, spot) = router
                    .park(&cur[i], &avoid)
                    .ok_or(HomeoError::RoutingFailed(i))?;
                factors.extend(prims);
                cur[i] = spot;
            }
        }
    }
    Ok(Homeo { factors })
}

// ---------------------------------------------------------------------------
// Hierarchy extension.
// ---------------------------------------------------------------------------

/// Finite-depth nested family of boxes: `levels[0]` sit inside the ambient
/// box, each deeper box strictly inside `levels[d-1][parents[d][i]]`, and
/// boxes of one level are pairwise disjoint.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Hierarchy {
    pub levels: Vec<Vec<TorusBox>>,
    pub parents: Vec<Vec<usize>>,
}

impl Hierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    fn validate(&self, root: &TorusBox, name: &str) -> Result<(), HomeoError> {
        if self.levels.len() != self.parents.len() {
            return Err(HomeoError::HierarchyMismatch(format!(
                "{name}: levels and parents length differ"
            )));
        }
        for (d, level) in self.levels.iter().enumerate() {
            if d > 0 && self.parents[d].len() != level.len() {
                return Err(HomeoError::HierarchyMismatch(format!(
                    "{name}: parent table at depth {d} has wrong length"
                )));
            }
            for (i, b) in level.iter().enumerate() {
                let holder = if d == 0 {
                    root.clone()
                } else {
                    let pi = self.parents[d][i];
                    self.levels[d - 1]
                        .get(pi)
                        .cloned()
                        .ok_or_else(|| {
                            HomeoError::HierarchyMismatch(format!(
                                "{name}: parent index out of range at depth {d}"
                            ))
                        })?
                };
                let l = local_of(&holder, b).ok_or_else(|| {
                    HomeoError::Geometry(format!(
                        "{name}: box {i} at depth {d} not inside its parent"
                    ))
                })?;
                if !strictly_inside(&l, &holder.len) {
                    return Err(HomeoError::Geometry(format!(
                        "{name}: box {i} at depth {d} touches its parent's boundary"
                    )));
                }
                for (j, other) in level.iter().enumerate().skip(i + 1) {
                    if b.relation(other) != BoxRelation::Disjoint {
                        return Err(HomeoError::Geometry(format!(
                            "{name}: boxes {i} and {j} at depth {d} overlap"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Boundary behaviour of a hierarchy extension. Identity is the only mode
/// used by the constructions here; it requires the two ambient boxes to be
/// the same region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BoundaryMap {
    Identity,
}

fn check_beta(
    q: &Hierarchy,
    q_target: &Hierarchy,
    beta: &[Vec<usize>],
) -> Result<(), HomeoError> {
    if q.depth() != q_target.depth() {
        return Err(HomeoError::HierarchyMismatch(format!(
            "hierarchies have depths {} and {}",
            q.depth(),
            q_target.depth()
        )));
    }
    if beta.len() != q.depth() {
        return Err(HomeoError::HierarchyMismatch(format!(
            "bijection covers {} levels, hierarchies have {}",
            beta.len(),
            q.depth()
        )));
    }
    for d in 0..q.depth() {
        let n = q.levels[d].len();
        if q_target.levels[d].len() != n || beta[d].len() != n {
            return Err(HomeoError::HierarchyMismatch(format!(
                "level {d} sizes disagree"
            )));
        }
        let mut seen = vec![false; n];
        for &img in &beta[d] {
            if img >= n || seen[img] {
                return Err(HomeoError::HierarchyMismatch(format!(
                    "level {d} map is not a bijection"
                )));
            }
            seen[img] = true;
        }
        if d > 0 {
            for i in 0..n {
                if q_target.parents[d][beta[d][i]] != beta[d - 1][q.parents[d][i]] {
                    return Err(HomeoError::HierarchyMismatch(format!(
                        "level {d} map does not respect parents at index {i}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Homeomorphism sending each box of `q` affinely onto its matched box of
/// `q_target`, level by level, equal to `alpha` on the boundary of the
/// ambient box and the identity outside it.
pub fn extend_cantor_homeo(
    x: &TorusBox,
    x_target: &TorusBox,
    q: &Hierarchy,
    q_target: &Hierarchy,
    beta: &[Vec<usize>],
    alpha: &BoundaryMap,
) -> Result<Homeo, HomeoError> {
    extend_cantor_protected(x, x_target, q, q_target, beta, alpha, &[])
}

fn extend_cantor_protected(
    x: &TorusBox,
    x_target: &TorusBox,
    q: &Hierarchy,
    q_target: &Hierarchy,
    beta: &[Vec<usize>],
    alpha: &BoundaryMap,
    protected: &[TorusBox],
) -> Result<Homeo, HomeoError> {
    let BoundaryMap::Identity = alpha;
    if x != x_target {
        return Err(HomeoError::Geometry(
            "identity boundary map requires equal ambient boxes".into(),
        ));
    }
    q.validate(x, "source hierarchy")?;
    q_target.validate(x_target, "target hierarchy")?;
    check_beta(q, q_target, beta)?;

    let mut cur: Vec<Vec<TorusBox>> = q.levels.clone();
    let mut result = Homeo::identity();

    for d in 0..q.depth() {
        // Group the level's moves by the frame they happen in: the ambient
        // box at depth 0, the already-placed target parent below.
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for i in 0..cur[d].len() {
            let key = if d == 0 { 0 } else { q.parents[d][i] };
            groups.entry(key).or_default().push(i);
        }
        let mut keys: Vec<usize> = groups.keys().copied().collect();
        keys.sort_unstable();
        let before: Vec<TorusBox> = cur[d].clone();
        for key in keys {
            let members = &groups[&key];
            let frame = if d == 0 {
                x.clone()
            } else {
                q_target.levels[d - 1][beta[d - 1][key]].clone()
            };
            let pairs: Vec<(TorusBox, TorusBox)> = members
                .iter()
                .map(|&i| (before[i].clone(), q_target.levels[d][beta[d][i]].clone()))
                .collect();
            let guards: Vec<TorusBox> = if d == 0 { protected.to_vec() } else { vec![] };
            let step = rearrange_boxes(&frame, &pairs, &guards)?;
            result = result.then(&step);
        }
        // Record the new positions and push descendants through the affine
        // moves of their level-d ancestors.
        for i in 0..cur[d].len() {
            cur[d][i] = q_target.levels[d][beta[d][i]].clone();
        }
        for deeper in (d + 1)..q.depth() {
            for i in 0..cur[deeper].len() {
                let anc = ancestor_at(q, deeper, i, d);
                cur[deeper][i] = affine_box(&before[anc], &cur[d][anc], &cur[deeper][i]);
            }
        }
    }
    Ok(result)
}

fn ancestor_at(q: &Hierarchy, depth: usize, index: usize, target_depth: usize) -> usize {
    let mut d = depth;
    let mut i = index;
    while d > target_depth {
        i = q.parents[d][i];
        d -= 1;
    }
    i
}

/// Result of a bin extension: the map plus the bin index chosen per ball.
#[derive(Clone, Debug)]
pub struct ExtendOutcome {
    pub homeo: Homeo,
    pub bin_of: Vec<usize>,
}

/// Extension that first parks each ball inside a bin with index strictly
/// above its floor, then matches the hierarchies while protecting the placed
/// balls. Balls move rigidly (translation only), so a bin is admissible only
/// when strictly larger than the ball on both axes.
pub fn extend_with_bins(
    x: &TorusBox,
    x_target: &TorusBox,
    q: &Hierarchy,
    q_target: &Hierarchy,
    beta: &[Vec<usize>],
    balls: &[TorusBox],
    bins: &[TorusBox],
    phi: &[usize],
) -> Result<ExtendOutcome, HomeoError> {
    if phi.len() != balls.len() {
        return Err(HomeoError::Geometry(
            "one floor index is required per ball".into(),
        ));
    }
    let roots = |h: &Hierarchy| -> Vec<TorusBox> {
        h.levels.first().cloned().unwrap_or_default()
    };
    let q_roots = roots(q);
    let qt_roots = roots(q_target);
    for (i, ball) in balls.iter().enumerate() {
        for (j, other) in balls.iter().enumerate().skip(i + 1) {
            if ball.relation(other) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!("balls {i} and {j} overlap")));
            }
        }
        for r in &q_roots {
            if ball.relation(r) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!(
                    "ball {i} overlaps the source hierarchy"
                )));
            }
        }
    }
    for (i, bin) in bins.iter().enumerate() {
        for (j, other) in bins.iter().enumerate().skip(i + 1) {
            if bin.relation(other) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!("bins {i} and {j} overlap")));
            }
        }
        for r in qt_roots.iter().chain(q_roots.iter()) {
            if bin.relation(r) != BoxRelation::Disjoint {
                return Err(HomeoError::Geometry(format!(
                    "bin {i} overlaps a hierarchy box"
                )));
            }
        }
    }

    let mut factors = Homeo::identity();
    let mut placed: Vec<TorusBox> = Vec::new();
    let mut used = vec![false; bins.len()];
    let mut bin_of = Vec::with_capacity(balls.len());

    for (j, ball) in balls.iter().enumerate() {
        let mut chosen = None;
        for i in (phi[j] + 1)..bins.len() {
            if used[i] {
                continue;
            }
            let bin = &bins[i];
            if !(ball.len[0] < bin.len[0] && ball.len[1] < bin.len[1]) {
                continue;
            }
            // Ball-sized box centered in the bin.
            let dst = TorusBox::new(
                [
                    bin.lo[0].clone()
                        + (bin.len[0].clone() - ball.len[0].clone()) * sc(1, 2),
                    bin.lo[1].clone()
                        + (bin.len[1].clone() - ball.len[1].clone()) * sc(1, 2),
                ],
                ball.len.clone(),
            );
            let mut obstacles: Vec<TorusBox> = q_roots.clone();
            obstacles.extend(placed.iter().cloned());
            for (k, other) in balls.iter().enumerate() {
                if k > j {
                    obstacles.push(other.clone());
                }
            }
            let router = Router {
                parent: x.clone(),
                obstacles,
            };
            if let Ok(prims) = router.route(ball, &dst) {
                factors = factors.then(&Homeo { factors: prims });
                placed.push(dst);
                used[i] = true;
                chosen = Some(i);
                break;
            }
        }
        match chosen {
            Some(i) => bin_of.push(i),
            None => return Err(HomeoError::BinExhausted(j)),
        }
    }

    let tail = extend_cantor_protected(
        x,
        x_target,
        q,
        q_target,
        beta,
        &BoundaryMap::Identity,
        &placed,
    )?;
    Ok(ExtendOutcome {
        homeo: factors.then(&tail),
        bin_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_box() -> TorusBox {
        TorusBox::from_rationals((0, 1), (0, 1), (1, 1), (1, 1))
    }

    fn pt(nx: i64, dx: i64, ny: i64, dy: i64) -> TorusPoint {
        TorusPoint::new(sc(nx, dx), sc(ny, dy))
    }

    /// Deterministic exact sample points mixing rational and irrational
    /// coordinates; k indexes the stream.
    fn sample_point(k: i64) -> TorusPoint {
        let r = Translation::default_golden_sqrt2();
        let (ax, by) = r.step_vector(k);
        TorusPoint::new(
            (ax + sc(k * k % 97, 211)).fract(),
            (by + sc(k % 89, 173)).fract(),
        )
    }

    fn spec_blend() -> (TorusBox, TorusBox, TorusBox) {
        let parent = full_box();
        let src = TorusBox::from_rationals((2, 5), (2, 5), (1, 5), (1, 5));
        let dst = TorusBox::from_rationals((1, 10), (2, 5), (1, 5), (1, 5));
        (parent, src, dst)
    }

    #[test]
    fn blend_maps_core_affinely_and_fixes_boundary() {
        let (parent, src, dst) = spec_blend();
        let h = radial_blend(&parent, &src, &dst).unwrap();
        assert_eq!(h.apply(&pt(1, 2, 1, 2)), pt(1, 5, 1, 2));
        // Corners of src map to corners of dst.
        assert_eq!(h.apply(&pt(2, 5, 2, 5)), pt(1, 10, 2, 5));
        assert_eq!(h.apply(&pt(3, 5, 3, 5)), pt(3, 10, 3, 5));
        // The parent boundary (the seam circles of the full box) is fixed.
        for p in [pt(0, 1, 0, 1), pt(0, 1, 37, 100), pt(9, 10, 0, 1)] {
            assert_eq!(h.apply(&p), p);
            assert_eq!(h.apply_inverse(&p), p);
        }
    }

    #[test]
    fn blend_round_trips_exactly_on_a_thousand_points() {
        let (parent, src, dst) = spec_blend();
        let h = radial_blend(&parent, &src, &dst).unwrap();
        for k in 0..1000 {
            let p = sample_point(k);
            let q = h.apply(&p);
            assert_eq!(h.apply_inverse(&q), p, "round trip failed at k={k}");
        }
    }

    #[test]
    fn blend_inverse_parameter_matches_bisection_oracle() {
        // Oracle: recover the leaf parameter of an image point by bisecting
        // the monotone containment predicate v ∈ B(t), in floating point,
        // and compare against the closed-form parameter.
        let (parent, src, dst) = spec_blend();
        let h = radial_blend(&parent, &src, &dst).unwrap();
        let bl = BlendLocal::build(&parent, &src, &dst).unwrap();
        let swapped = BlendLocal::build(&parent, &dst, &src).unwrap();
        let d_lo = [swapped.a_lo[0].to_f64(), swapped.a_lo[1].to_f64()];
        let d_hi = [swapped.a_hi[0].to_f64(), swapped.a_hi[1].to_f64()];
        let plen = [1.0f64, 1.0];
        let mut checked = 0;
        for k in 0..200 {
            let p = sample_point(k);
            let u = [p.x.clone(), p.y.clone()];
            if bl.leaf(&u).sign() == 0 {
                continue; // affine core: no leaf parameter to compare
            }
            let v = h.apply(&p);
            let vv = [v.x.to_f64(), v.y.to_f64()];
            let contains = |t: f64| -> bool {
                (0..2).all(|a| {
                    let lo = (1.0 - t) * d_lo[a];
                    let hi = d_hi[a] + t * (plen[a] - d_hi[a]);
                    lo - 1e-15 <= vv[a] && vv[a] <= hi + 1e-15
                })
            };
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..80 {
                let mid = (lo + hi) / 2.0;
                if contains(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let t_exact = swapped.leaf(&[v.x.clone(), v.y.clone()]).to_f64();
            assert!(
                (hi - t_exact).abs() <= 1e-12,
                "bisection {hi} vs exact {t_exact}"
            );
            checked += 1;
        }
        assert!(checked > 100, "too few annulus samples: {checked}");
    }

    #[test]
    fn blend_rejects_boundary_touching_boxes() {
        let parent = TorusBox::from_rationals((0, 1), (0, 1), (1, 2), (1, 2));
        let touching = TorusBox::from_rationals((0, 1), (1, 10), (1, 10), (1, 10));
        let inside = TorusBox::from_rationals((1, 5), (1, 5), (1, 10), (1, 10));
        assert!(matches!(
            radial_blend(&parent, &touching, &inside),
            Err(HomeoError::Geometry(_))
        ));
        assert!(matches!(
            radial_blend(&parent, &inside, &touching),
            Err(HomeoError::Geometry(_))
        ));
        let outside = TorusBox::from_rationals((3, 5), (3, 5), (1, 10), (1, 10));
        assert!(matches!(
            radial_blend(&parent, &outside, &inside),
            Err(HomeoError::Geometry(_))
        ));
    }

    #[test]
    fn support_discipline_fixes_points_outside() {
        let parent = TorusBox::from_rationals((1, 10), (1, 10), (3, 10), (3, 10));
        let src = TorusBox::from_rationals((3, 20), (3, 20), (1, 10), (1, 10));
        let dst = TorusBox::from_rationals((5, 20), (5, 20), (1, 10), (1, 10));
        let h = radial_blend(&parent, &src, &dst).unwrap();
        for k in 0..300 {
            let p = sample_point(k);
            let inside = parent.contains_point(&p);
            if !inside {
                assert_eq!(h.apply(&p), p);
                assert_eq!(h.apply_inverse(&p), p);
            }
        }
        // Affine primitive: identity off its source box.
        let am = Homeo::from_primitive(Primitive::AffineBoxMap {
            src: src.clone(),
            dst: dst.clone(),
        });
        let outside = pt(9, 10, 9, 10);
        assert_eq!(am.apply(&outside), outside);
    }

    #[test]
    fn composition_matches_sequential_evaluation() {
        let (parent, src, dst) = spec_blend();
        let h1 = radial_blend(&parent, &src, &dst).unwrap();
        let small_parent = TorusBox::from_rationals((3, 5), (3, 5), (3, 10), (3, 10));
        let s2 = TorusBox::from_rationals((13, 20), (13, 20), (1, 10), (1, 10));
        let d2 = TorusBox::from_rationals((3, 4), (13, 20), (1, 10), (1, 10));
        let h2 = radial_blend(&small_parent, &s2, &d2).unwrap();
        let comp = h1.then(&h2);
        for k in 0..200 {
            let p = sample_point(k);
            assert_eq!(comp.apply(&p), h2.apply(&h1.apply(&p)));
            assert_eq!(comp.apply_inverse(&p), h1.apply_inverse(&h2.apply_inverse(&p)));
        }
    }

    #[test]
    fn conjugation_matches_translate_sandwich() {
        let r = Translation::default_golden_sqrt2();
        let parent = TorusBox::from_rationals((1, 10), (1, 10), (3, 10), (3, 10));
        let src = TorusBox::from_rationals((3, 20), (3, 20), (1, 10), (1, 10));
        let dst = TorusBox::from_rationals((5, 20), (5, 20), (1, 10), (1, 10));
        let inner = radial_blend(&parent, &src, &dst).unwrap();
        let conj = Homeo::from_primitive(Primitive::ConjugateByPower {
            inner: Box::new(inner.clone()),
            translation: r.clone(),
            power: 3,
        });
        // Independent sandwich: full-box affine maps are exact translations.
        let (dx, dy) = r.step_vector(3);
        let tr = |v: (AlgebraicScalar, AlgebraicScalar)| {
            Homeo::from_primitive(Primitive::AffineBoxMap {
                src: full_box(),
                dst: TorusBox::new([v.0, v.1], [sc(1, 1), sc(1, 1)]),
            })
        };
        let (ex, ey) = r.step_vector(-3);
        let sandwich = tr((ex, ey)).then(&inner).then(&tr((dx, dy)));
        for k in 0..150 {
            let p = sample_point(k);
            assert_eq!(conj.apply(&p), sandwich.apply(&p));
            assert_eq!(conj.apply_inverse(&p), sandwich.apply_inverse(&p));
        }
    }

    #[test]
    fn displacement_bound_dominates_sampled_motion() {
        let parent = TorusBox::from_rationals((1, 10), (1, 10), (3, 10), (3, 10));
        let src = TorusBox::from_rationals((3, 20), (3, 20), (1, 10), (1, 10));
        let dst = TorusBox::from_rationals((5, 20), (5, 20), (1, 10), (1, 10));
        let h = radial_blend(&parent, &src, &dst).unwrap();
        let bound = h.displacement_bound();
        assert_eq!(bound, sc(3, 10));
        for k in 0..300 {
            let p = sample_point(k);
            assert!(p.dist(&h.apply(&p)) <= bound);
        }
    }

    #[test]
    fn difference_bound_tracks_appended_factors() {
        let (parent, src, dst) = spec_blend();
        let a = radial_blend(&parent, &src, &dst).unwrap();
        let tiny_parent = TorusBox::from_rationals((4, 5), (4, 5), (1, 16), (1, 16));
        let ts = TorusBox::from_rationals((13, 16), (13, 16), (1, 64), (1, 64));
        let td = TorusBox::from_rationals((53, 64), (53, 64), (1, 64), (1, 64));
        let b = a.then(&radial_blend(&tiny_parent, &ts, &td).unwrap());
        let diff = Homeo::difference_bound(&a, &b).unwrap();
        assert_eq!(diff, sc(1, 16));
        for k in 0..200 {
            let p = sample_point(k);
            assert!(a.apply(&p).dist(&b.apply(&p)) <= diff);
        }
        let unrelated = radial_blend(&tiny_parent, &ts, &td).unwrap();
        assert!(Homeo::difference_bound(&a, &unrelated).is_none());
    }

    #[test]
    fn bound_region_identity_and_affine_are_exact() {
        let target = TorusBox::from_rationals((1, 5), (3, 10), (1, 10), (1, 5));
        let id = Homeo::identity();
        let rb = bound_region(&id, &target, Direction::Forward, 2);
        assert!(rb.outer.subtract(&target.to_set()).is_empty());
        assert!(target.to_set().subtract(&rb.inner).is_empty());

        let src = TorusBox::from_rationals((1, 10), (1, 10), (1, 5), (1, 5));
        let dst = TorusBox::from_rationals((3, 5), (3, 5), (1, 10), (1, 5));
        let h = Homeo::from_primitive(Primitive::AffineBoxMap {
            src: src.clone(),
            dst: dst.clone(),
        });
        let pre = bound_region(&h, &dst, Direction::Inverse, 2);
        assert!(pre.outer.subtract(&src.to_set()).is_empty());
        assert!(src.to_set().subtract(&pre.inner).is_empty());
    }

    #[test]
    fn bound_region_blend_brackets_the_source() {
        let (parent, src, dst) = spec_blend();
        let h = radial_blend(&parent, &src, &dst).unwrap();
        // Preimage of dst is exactly src: closed-open boxes make the annulus
        // contribution empty here.
        let rb = bound_region(&h, &dst, Direction::Inverse, 4);
        assert!(rb.outer.subtract(&src.to_set()).is_empty());
        assert!(src.to_set().subtract(&rb.inner).is_empty());

        // A target overlapping the annulus: certified sandwich, checked
        // against direct evaluation on a point grid.
        let target = TorusBox::from_rationals((1, 20), (7, 20), (3, 10), (3, 10));
        let rb = bound_region(&h, &target, Direction::Inverse, 6);
        assert!(rb.inner.subtract(&rb.outer).is_empty());
        let n = 40;
        for i in 0..n {
            for j in 0..n {
                let p = pt(2 * i + 1, 2 * n, 2 * j + 1, 2 * n);
                let hits = target.contains_point(&h.apply(&p));
                if hits {
                    assert!(rb.outer.contains_point(&p), "outer misses a preimage point");
                }
                if rb.inner.contains_point(&p) {
                    assert!(hits, "inner contains a non-preimage point");
                }
            }
        }
    }

    #[test]
    fn rearrange_single_pair_is_one_blend() {
        let parent = full_box();
        let src = TorusBox::from_rationals((1, 10), (2, 5), (1, 10), (1, 10));
        let dst = TorusBox::from_rationals((7, 10), (2, 5), (1, 10), (1, 10));
        let h = rearrange_boxes(&parent, &[(src.clone(), dst.clone())], &[]).unwrap();
        assert_eq!(h.factors.len(), 1);
        assert!(matches!(h.factors[0], Primitive::RadialBlend { .. }));
        assert_eq!(h.apply(&pt(1, 10, 2, 5)), pt(7, 10, 2, 5));
        assert_eq!(h.apply(&pt(1, 5, 1, 2)), pt(4, 5, 1, 2));
    }

    #[test]
    fn rearrange_swaps_two_boxes_exactly() {
        let parent = full_box();
        let a = TorusBox::from_rationals((1, 5), (9, 20), (1, 10), (1, 10));
        let b = TorusBox::from_rationals((7, 10), (9, 20), (1, 10), (1, 10));
        let h = rearrange_boxes(
            &parent,
            &[(a.clone(), b.clone()), (b.clone(), a.clone())],
            &[],
        )
        .unwrap();
        // Corner and centre evaluation: the net map is the exact swap
        // translation on each box.
        let shift = sc(1, 2); // 7/10 − 1/5
        for k in 0..50 {
            let p = sample_point(k);
            if a.contains_point(&p) {
                let q = h.apply(&p);
                assert_eq!(q.x, (p.x.clone() + shift.clone()).fract());
                assert_eq!(q.y, p.y);
            }
            if b.contains_point(&p) {
                let q = h.apply(&p);
                assert_eq!(q.x, (p.x.clone() - shift.clone()).fract());
                assert_eq!(q.y, p.y);
            }
        }
        assert_eq!(h.apply(&pt(1, 5, 9, 20)), pt(7, 10, 9, 20));
        assert_eq!(h.apply(&pt(7, 10, 9, 20)), pt(1, 5, 9, 20));
        assert_eq!(h.apply(&pt(0, 1, 0, 1)), pt(0, 1, 0, 1));
    }

    #[test]
    fn rearrange_reports_blocked_corridor() {
        let parent = full_box();
        let src = TorusBox::from_rationals((1, 10), (9, 20), (1, 10), (1, 10));
        let dst = TorusBox::from_rationals((4, 5), (9, 20), (1, 10), (1, 10));
        let midline = TorusBox::from_rationals((9, 20), (0, 1), (1, 10), (1, 1));
        let err = rearrange_boxes(&parent, &[(src, dst)], &[midline]).unwrap_err();
        assert!(matches!(err, HomeoError::RoutingFailed(0)));
    }

    fn two_leaf_hierarchy() -> Hierarchy {
        Hierarchy {
            levels: vec![
                vec![TorusBox::from_rationals((1, 5), (1, 5), (3, 5), (3, 5))],
                vec![
                    TorusBox::from_rationals((3, 10), (3, 10), (1, 20), (1, 20)),
                    TorusBox::from_rationals((3, 5), (3, 5), (1, 20), (1, 20)),
                ],
            ],
            parents: vec![vec![], vec![0, 0]],
        }
    }

    #[test]
    fn extend_identity_hierarchy_is_identity() {
        let x = full_box();
        let q = two_leaf_hierarchy();
        let beta = vec![vec![0], vec![0, 1]];
        let h = extend_cantor_homeo(&x, &x, &q, &q, &beta, &BoundaryMap::Identity).unwrap();
        assert!(h.factors.is_empty());
        let p = sample_point(5);
        assert_eq!(h.apply(&p), p);
    }

    #[test]
    fn extend_swaps_leaves_and_fixes_boundary() {
        let x = full_box();
        let q = two_leaf_hierarchy();
        let beta = vec![vec![0], vec![1, 0]];
        let h = extend_cantor_homeo(&x, &x, &q, &q, &beta, &BoundaryMap::Identity).unwrap();
        // Leaf corners are exchanged exactly.
        assert_eq!(h.apply(&pt(3, 10, 3, 10)), pt(3, 5, 3, 5));
        assert_eq!(h.apply(&pt(3, 5, 3, 5)), pt(3, 10, 3, 10));
        assert_eq!(
            h.apply(&pt(13, 40, 13, 40)),
            pt(5, 8, 5, 8) // leaf centre → other leaf centre
        );
        // Outside the root everything is fixed.
        for p in [pt(0, 1, 0, 1), pt(1, 10, 1, 10), pt(9, 10, 1, 2)] {
            assert_eq!(h.apply(&p), p);
        }
    }

    #[test]
    fn extend_rejects_depth_mismatch() {
        let x = full_box();
        let q = two_leaf_hierarchy();
        let shallow = Hierarchy {
            levels: vec![q.levels[0].clone()],
            parents: vec![vec![]],
        };
        let err = extend_cantor_homeo(
            &x,
            &x,
            &q,
            &shallow,
            &[vec![0], vec![1, 0]],
            &BoundaryMap::Identity,
        )
        .unwrap_err();
        assert!(matches!(err, HomeoError::HierarchyMismatch(_)));

        // A leaf bijection that scrambles parents is rejected even at equal
        // depth.
        let wide = Hierarchy {
            levels: vec![
                vec![
                    TorusBox::from_rationals((1, 10), (1, 10), (1, 4), (1, 4)),
                    TorusBox::from_rationals((3, 5), (3, 5), (1, 4), (1, 4)),
                ],
                vec![
                    TorusBox::from_rationals((3, 20), (3, 20), (1, 10), (1, 10)),
                    TorusBox::from_rationals((13, 20), (13, 20), (1, 10), (1, 10)),
                ],
            ],
            parents: vec![vec![], vec![0, 1]],
        };
        let err = extend_cantor_homeo(
            &x,
            &x,
            &wide,
            &wide,
            &[vec![0, 1], vec![1, 0]],
            &BoundaryMap::Identity,
        )
        .unwrap_err();
        assert!(matches!(err, HomeoError::HierarchyMismatch(_)));
    }

    fn bin_setup() -> (TorusBox, Hierarchy, Vec<TorusBox>, Vec<TorusBox>) {
        let x = full_box();
        let q = Hierarchy {
            levels: vec![vec![TorusBox::from_rationals(
                (1, 10),
                (1, 10),
                (1, 5),
                (1, 5),
            )]],
            parents: vec![vec![]],
        };
        let ball = TorusBox::from_rationals((3, 20), (3, 5), (3, 100), (3, 100));
        let bins: Vec<TorusBox> = (0..11)
            .map(|i| {
                TorusBox::from_rationals(
                    (40 + 5 * i, 100),
                    (4, 5),
                    (1, 25),
                    (1, 10),
                )
            })
            .collect();
        (x, q, vec![ball], bins)
    }

    #[test]
    fn ball_routed_to_first_admissible_bin() {
        let (x, q, balls, bins) = bin_setup();
        let beta = vec![vec![0]];
        let out = extend_with_bins(&x, &x, &q, &q, &beta, &balls, &bins, &[3]).unwrap();
        assert_eq!(out.bin_of, vec![4]);
        // Containment certified through the region bound: the forward image
        // of the ball lies inside the chosen bin.
        let rb = bound_region(&out.homeo, &balls[0], Direction::Forward, 2);
        assert!(rb.outer.subtract(&bins[4].to_set()).is_empty());
        assert!(!rb.outer.is_empty());
    }

    #[test]
    fn bin_exhaustion_reported() {
        let (x, q, balls, bins) = bin_setup();
        let beta = vec![vec![0]];
        // Floor index beyond the last bin: nothing admissible.
        let err = extend_with_bins(&x, &x, &q, &q, &beta, &balls, &bins, &[10]).unwrap_err();
        assert!(matches!(err, HomeoError::BinExhausted(0)));
        // Bins exist above the floor but are all smaller than the ball.
        let small: Vec<TorusBox> = (0..12)
            .map(|i| {
                TorusBox::from_rationals((40 + 4 * i, 100), (4, 5), (1, 50), (1, 50))
            })
            .collect();
        let err = extend_with_bins(&x, &x, &q, &q, &beta, &balls, &small, &[10]).unwrap_err();
        assert!(matches!(err, HomeoError::BinExhausted(0)));
    }

    #[test]
    fn empty_ball_list_matches_plain_extension() {
        let x = full_box();
        let q = two_leaf_hierarchy();
        let beta = vec![vec![0], vec![1, 0]];
        let plain = extend_cantor_homeo(&x, &x, &q, &q, &beta, &BoundaryMap::Identity).unwrap();
        let out = extend_with_bins(&x, &x, &q, &q, &beta, &[], &[], &[]).unwrap();
        assert!(out.bin_of.is_empty());
        assert_eq!(out.homeo, plain);
    }

    #[test]
    fn homeo_serde_round_trip_preserves_factors() {
        let (parent, src, dst) = spec_blend();
        let r = Translation::default_golden_sqrt2();
        let h = radial_blend(&parent, &src, &dst)
            .unwrap()
            .then(&Homeo::from_primitive(Primitive::ConjugateByPower {
                inner: Box::new(radial_blend(&parent, &src, &dst).unwrap()),
                translation: r,
                power: -2,
            }));
        let json = serde_json::to_string(&h).unwrap();
        let back: Homeo = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
        let p = sample_point(11);
        assert_eq!(back.apply(&p), h.apply(&p));
    }

    #[test]
    fn trace_logs_each_factor() {
        let (parent, src, dst) = spec_blend();
        let h = radial_blend(&parent, &src, &dst).unwrap().then(&radial_blend(
            &parent,
            &dst,
            &src,
        )
        .unwrap());
        let p = sample_point(3);
        let tr = h.trace(&p);
        assert_eq!(tr.len(), 2);
        assert_eq!(tr[0].0, p);
        assert_eq!(tr[1].1, h.apply(&p));
        assert_eq!(tr[0].1, tr[1].0);
    }

    #[test]
    fn inner_radius_certificate_brackets_known_box() {
        let u = TorusBox::from_rationals((0, 1), (0, 1), (1, 4), (1, 3)).to_set();
        // True internal radius is 1/8 (half the short side).
        assert!(inner_radius_at_most(&u, &sc(1, 8)));
        assert!(!inner_radius_at_most(&u, &sc(7, 64)));
        // Monotone in rho.
        assert!(inner_radius_at_most(&u, &sc(1, 4)));
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        fn rational_in(lo: i64, hi: i64, den: i64) -> impl Strategy<Value = AlgebraicScalar> {
            (lo..hi).prop_map(move |n| sc(n, den))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn random_blends_round_trip(
                plo in rational_in(0, 64, 64),
                slo in rational_in(2, 20, 64),
                dlo in rational_in(2, 20, 64),
                k in 0i64..400,
            ) {
                // Parent 40/64 wide anchored at plo (may wrap), source and
                // image boxes 8/64 wide placed strictly inside.
                let parent = TorusBox::new(
                    [plo.clone(), (plo.clone() + sc(7, 64)).fract()],
                    [sc(40, 64), sc(40, 64)],
                );
                let src = TorusBox::new(
                    [
                        (parent.lo[0].clone() + slo.clone()).fract(),
                        (parent.lo[1].clone() + sc(22, 64) - slo.clone()).fract(),
                    ],
                    [sc(8, 64), sc(8, 64)],
                );
                let dst = TorusBox::new(
                    [
                        (parent.lo[0].clone() + sc(22, 64) - dlo.clone()).fract(),
                        (parent.lo[1].clone() + dlo.clone()).fract(),
                    ],
                    [sc(8, 64), sc(8, 64)],
                );
                let h = radial_blend(&parent, &src, &dst).unwrap();
                let p = sample_point(k);
                let q = h.apply(&p);
                prop_assert_eq!(h.apply_inverse(&q), p.clone());
                if !parent.contains_point(&p) {
                    prop_assert_eq!(q, p);
                }
            }
        }
    }
}
