//! Nested return-time towers over a base rectangle, and the rectangle
//! hierarchy derived from them.
//!
//! A tower stage is built inside the previous stage's base piece by walking
//! the induced first-return dynamics: the walk selects a sub-box `C` whose
//! first `t` induced returns all happen at constant times (a constant
//! itinerary), so every piece of the resulting invariant-set approximation is
//! an exact translate of the base piece.  That makes every structural
//! property of the tower checkable by exact box arithmetic: pieces carry a
//! cumulative return-time label, and "the orbit of x visits piece j at time
//! c_j" is a statement about translated boxes, not about sampled points.
//!
//! From the towers, `derive_collections` produces one rectangle collection
//! per stage (a thickening of the stage's pieces) and machine-checks the
//! hierarchy hypotheses on the result.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::Zero;

use crate::exactnum::{
    first_return_partition_sets, rat, AlgebraicScalar, BoxRelation, BoxSet, Rational, TorusBox,
    Translation,
};
use crate::rectangles::{
    build_graph, check_hypotheses_a, sets_equal, subset, Rectangle, RectangleCollection,
};
use crate::report::{CheckItem, Report};

#[derive(Debug, thiserror::Error)]
pub enum CantorError {
    #[error("schedule infeasible at stage {stage}: {reason}")]
    ScheduleInfeasible { stage: usize, reason: String },
    #[error("derivation failed at stage {stage} ({hypothesis}): {witness}")]
    DerivationFailed {
        stage: usize,
        hypothesis: String,
        witness: String,
    },
    #[error(
        "fiber depth {depth} needs {bits} denominator bits, over the budget of {budget}"
    )]
    DepthOverflow { depth: usize, bits: u64, budget: u64 },
}

/// Parameters for one tower stage.
///
/// `s` is the extra height of the stage walk: each piece of the previous
/// stage receives `s + 1` child pieces.  `trim` shaves that fraction of each
/// side length off the selected base piece (margin against boundary
/// contact).  `max_diameter` caps the base piece size; `None` enforces half
/// the previous base's diameter, which keeps piece diameters strictly
/// decreasing.  `t_max` bounds every raw return scan, and `window_factor`
/// sets how far past the first return the scan keeps looking for a larger
/// candidate piece.
#[derive(Clone, Debug)]
pub struct StageParams {
    pub s: u64,
    pub trim: Rational,
    pub max_diameter: Option<Rational>,
    pub t_max: u64,
    pub window_factor: u64,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            s: 1,
            trim: rat(1, 16),
            max_diameter: None,
            t_max: 5_000_000,
            window_factor: 8,
        }
    }
}

impl StageParams {
    /// Stage-0 parameters: only `trim` is used (no walk happens).
    pub fn base(trim: Rational) -> Self {
        StageParams {
            s: 0,
            trim,
            ..StageParams::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TowerSchedule {
    pub stages: Vec<StageParams>,
}

impl TowerSchedule {
    /// Default schedule: trimmed base plus `depth` doubling stages.
    pub fn default_depth(depth: usize) -> Self {
        let mut stages = vec![StageParams::base(rat(1, 16))];
        stages.extend(std::iter::repeat_with(StageParams::default).take(depth));
        TowerSchedule { stages }
    }

    /// Same shape but with no trimming anywhere; keeps the base rectangle's
    /// corner return pieces available to the walk.
    pub fn untrimmed_depth(depth: usize) -> Self {
        let mut s = TowerSchedule::default_depth(depth);
        for p in &mut s.stages {
            p.trim = rat(0, 1);
        }
        s
    }
}

/// One tower stage.  `levels` lists the pieces in return order together with
/// the cumulative translation time from the base piece `f_n`; all pieces are
/// exact translates of `f_n`.  `leg_times` records the cumulative raw times
/// of the stage walk (empty at stage 0).
#[derive(Clone, Debug)]
pub struct TowerStage {
    pub n: usize,
    pub f_n: TorusBox,
    pub ell_n: u64,
    pub levels: Vec<(TorusBox, u64)>,
    pub leg_times: Vec<u64>,
}

impl TowerStage {
    pub fn union(&self) -> BoxSet {
        BoxSet::from_torus_boxes(self.levels.iter().map(|(b, _)| b))
    }
}

/// One piece of a stage's invariant-set approximation, with its return-time
/// label, the index of the containing piece one stage up, and the times to
/// the neighbouring pieces in return order.
#[derive(Clone, Debug)]
pub struct CantorPiece {
    pub shape: TorusBox,
    pub time: u64,
    pub parent: Option<usize>,
    pub fwd_gap: Option<u64>,
    pub back_gap: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct CantorStage {
    pub depth: usize,
    /// Largest translate range whose alignment the stage's labels determine.
    pub horizon: u64,
    pub pieces: Vec<CantorPiece>,
}

impl CantorStage {
    /// Assembles the stage view at `depth` from a tower sequence, resolving
    /// nesting links by exact containment.
    pub fn from_towers(towers: &[TowerStage], depth: usize) -> Result<Self, CantorError> {
        let tower = towers.get(depth).ok_or_else(|| CantorError::DerivationFailed {
            stage: depth,
            hypothesis: "tower depth".into(),
            witness: format!("requested stage {depth} of a {}-stage tower", towers.len()),
        })?;
        let mut pieces = Vec::new();
        for (i, (shape, time)) in tower.levels.iter().enumerate() {
            let parent = if depth == 0 {
                None
            } else {
                let prev = &towers[depth - 1];
                let own = shape.to_set();
                let hits: Vec<usize> = prev
                    .levels
                    .iter()
                    .enumerate()
                    .filter(|(_, (p, _))| subset(&own, &p.to_set()))
                    .map(|(j, _)| j)
                    .collect();
                match hits.as_slice() {
                    [j] => Some(*j),
                    _ => {
                        return Err(CantorError::DerivationFailed {
                            stage: depth,
                            hypothesis: "nesting".into(),
                            witness: format!(
                                "piece {i} of stage {depth} sits inside {} pieces of stage {}",
                                hits.len(),
                                depth - 1
                            ),
                        })
                    }
                }
            };
            let fwd_gap = tower.levels.get(i + 1).map(|(_, t)| t - time);
            let back_gap = (i > 0).then(|| time - tower.levels[i - 1].1);
            pieces.push(CantorPiece {
                shape: shape.clone(),
                time: *time,
                parent,
                fwd_gap,
                back_gap,
            });
        }
        Ok(CantorStage {
            depth,
            horizon: 2 * (depth as u64 + 1) + 1,
            pieces,
        })
    }

    pub fn union(&self) -> BoxSet {
        BoxSet::from_torus_boxes(self.pieces.iter().map(|p| &p.shape))
    }

    pub fn times(&self) -> Vec<u64> {
        self.pieces.iter().map(|p| p.time).collect()
    }
}

/// Shaves `trim` of each side length off both ends of each axis.
fn trim_box(b: &TorusBox, trim: &Rational) -> Option<TorusBox> {
    if trim.is_zero() {
        return Some(b.clone());
    }
    let t = AlgebraicScalar::from_rational(trim.clone());
    let two = AlgebraicScalar::from_int(2);
    let one = AlgebraicScalar::one();
    if !(t.sign() >= 0 && two.clone() * t.clone() < one) {
        return None;
    }
    let lo = [
        b.lo[0].clone() + b.len[0].clone() * t.clone(),
        b.lo[1].clone() + b.len[1].clone() * t.clone(),
    ];
    let len = [
        b.len[0].clone() * (one.clone() - two.clone() * t.clone()),
        b.len[1].clone() * (one - two * t),
    ];
    Some(TorusBox::new(lo, len))
}

/// Caps each side length at `cap`, keeping the low corner.
fn cap_box(b: &TorusBox, cap: &AlgebraicScalar) -> TorusBox {
    let len = [
        AlgebraicScalar::min(&b.len[0], cap),
        AlgebraicScalar::min(&b.len[1], cap),
    ];
    TorusBox::new(b.lo.clone(), len)
}

fn largest_part(set: &BoxSet) -> Option<TorusBox> {
    set.parts
        .iter()
        .max_by(|a, b| a.volume().cmp(&b.volume()))
        .map(|p| {
            TorusBox::new(
                p.lo.clone(),
                [
                    p.hi[0].clone() - p.lo[0].clone(),
                    p.hi[1].clone() - p.lo[1].clone(),
                ],
            )
        })
}

/// Sign of s + t·√d for square-free d > 1, on integer pairs.
fn sign_st(s: &BigInt, t: &BigInt, d: u32) -> i32 {
    use num_bigint::Sign;
    match (s.sign(), t.sign()) {
        (Sign::NoSign, Sign::NoSign) => 0,
        (Sign::Plus | Sign::NoSign, Sign::Plus | Sign::NoSign) => 1,
        (Sign::Minus | Sign::NoSign, Sign::Minus | Sign::NoSign) => -1,
        (ss, _) => {
            // opposite signs; d is not a square so s² never equals d·t²
            let dominant_rational = s * s > t * t * BigInt::from(d);
            match (dominant_rational, ss == Sign::Plus) {
                (true, true) | (false, false) => 1,
                _ => -1,
            }
        }
    }
}

/// (rational, radical) coefficient view of a scalar that lives in the
/// quadratic subfield attached to `axis` (√5 on x, √2 on y).
fn axis_pair(x: &AlgebraicScalar, axis: usize) -> Option<(Rational, Rational)> {
    if axis == 0 {
        (x.q1.is_zero() && x.q3.is_zero()).then(|| (x.q0.clone(), x.q2.clone()))
    } else {
        (x.q2.is_zero() && x.q3.is_zero()).then(|| (x.q0.clone(), x.q1.clone()))
    }
}

/// Scan state for one axis over a fixed common denominator: every stored
/// quantity is an integer pair (a, b) meaning (a + b·√d)/den, so each scan
/// step costs a few machine-word BigInt operations instead of normalized
/// field arithmetic.
struct AxisTracker {
    d: u32,
    den: BigInt,
    a: BigInt,
    b: BigInt,
    step: (BigInt, BigInt),
    flen: (BigInt, BigInt),
    wrap: (BigInt, BigInt),
    flo: (BigInt, BigInt),
}

impl AxisTracker {
    fn build(
        s_lo: &AlgebraicScalar,
        s_len: &AlgebraicScalar,
        f_lo: &AlgebraicScalar,
        f_len: &AlgebraicScalar,
        step: &AlgebraicScalar,
        axis: usize,
    ) -> Option<AxisTracker> {
        use num_integer::Integer;
        let d = if axis == 0 { 5 } else { 2 };
        let off0 = (s_lo.clone() - f_lo.clone()).fract();
        let wrap = AlgebraicScalar::one() - s_len.clone();
        let quantities = [&off0, step, f_len, &wrap, f_lo];
        let pairs = quantities
            .iter()
            .map(|x| axis_pair(x, axis))
            .collect::<Option<Vec<_>>>()?;
        let mut den = BigInt::from(1);
        for (p, q) in &pairs {
            den = den.lcm(p.denom()).lcm(q.denom());
        }
        let to_ints = |pq: &(Rational, Rational)| {
            (
                pq.0.numer() * (&den / pq.0.denom()),
                pq.1.numer() * (&den / pq.1.denom()),
            )
        };
        let (a, b) = to_ints(&pairs[0]);
        Some(AxisTracker {
            d,
            a,
            b,
            step: to_ints(&pairs[1]),
            flen: to_ints(&pairs[2]),
            wrap: to_ints(&pairs[3]),
            flo: to_ints(&pairs[4]),
            den,
        })
    }

    fn advance(&mut self) {
        self.a += &self.step.0;
        self.b += &self.step.1;
        // one reduced step keeps the offset below 2; fold back into [0, 1)
        let s = &self.a - &self.den;
        if sign_st(&s, &self.b, self.d) >= 0 {
            self.a = s;
        }
    }

    /// Axis overlap: off < f.len or off > 1 - s.len, both exact.
    fn hit(&self) -> bool {
        sign_st(
            &(&self.a - &self.flen.0),
            &(&self.b - &self.flen.1),
            self.d,
        ) < 0
            || sign_st(
                &(&self.a - &self.wrap.0),
                &(&self.b - &self.wrap.1),
                self.d,
            ) > 0
    }

    /// Exact low coordinate of the translated box, f.lo + off.
    fn image_lo(&self) -> AlgebraicScalar {
        let ra = Rational::new(&self.flo.0 + &self.a, self.den.clone());
        let rb = Rational::new(&self.flo.1 + &self.b, self.den.clone());
        if self.d == 5 {
            AlgebraicScalar::new(ra, rat(0, 1), rb, rat(0, 1))
        } else {
            AlgebraicScalar::new(ra, rb, rat(0, 1), rat(0, 1))
        }
    }
}

fn scan_fast(
    s: &TorusBox,
    f: &TorusBox,
    r: &Translation,
    t_max: u64,
    window_factor: u64,
) -> Option<Vec<(u64, TorusBox)>> {
    let (ax, ay) = r.step_vector(1);
    let mut x = AxisTracker::build(&s.lo[0], &s.len[0], &f.lo[0], &f.len[0], &ax, 0)?;
    let mut y = AxisTracker::build(&s.lo[1], &s.len[1], &f.lo[1], &f.len[1], &ay, 1)?;
    let mut hits = Vec::new();
    let mut window_end = t_max;
    let mut t = 0u64;
    while t < window_end {
        t += 1;
        x.advance();
        y.advance();
        if !x.hit() || !y.hit() {
            continue;
        }
        if hits.is_empty() {
            window_end = window_end.min(t.saturating_mul(window_factor.max(1)));
        }
        hits.push((t, TorusBox::new([x.image_lo(), y.image_lo()], s.len.clone())));
    }
    Some(hits)
}

/// Fallback for translations or boxes outside the split quadratic subfields.
fn scan_generic(
    s: &TorusBox,
    f: &TorusBox,
    r: &Translation,
    t_max: u64,
    window_factor: u64,
) -> Vec<(u64, TorusBox)> {
    let one = AlgebraicScalar::one();
    let alpha = r.alpha.fract();
    let beta = r.beta.fract();
    let mut offx = (s.lo[0].clone() - f.lo[0].clone()).fract();
    let mut offy = (s.lo[1].clone() - f.lo[1].clone()).fract();
    let wrapx = one.clone() - s.len[0].clone();
    let wrapy = one.clone() - s.len[1].clone();
    let mut hits = Vec::new();
    let mut window_end = t_max;
    let mut t = 0u64;
    while t < window_end {
        t += 1;
        offx = offx + alpha.clone();
        if offx >= one {
            offx = offx - one.clone();
        }
        offy = offy + beta.clone();
        if offy >= one {
            offy = offy - one.clone();
        }
        if !(offx < f.len[0] || offx > wrapx) {
            continue;
        }
        if !(offy < f.len[1] || offy > wrapy) {
            continue;
        }
        if hits.is_empty() {
            window_end = window_end.min(t.saturating_mul(window_factor.max(1)));
        }
        let lox = f.lo[0].clone() + offx.clone();
        let loy = f.lo[1].clone() + offy.clone();
        hits.push((t, TorusBox::new([lox, loy], s.len.clone())));
    }
    hits
}

/// All returns of `s` into `f` within the scan window, as full fragments:
/// the scan runs to the first hit, then keeps going to `window_factor` times
/// that (capped at `t_max`) so a later, larger piece can be preferred.
fn scan_returns(
    s: &TorusBox,
    f: &TorusBox,
    r: &Translation,
    t_max: u64,
    window_factor: u64,
) -> Vec<(u64, BoxSet)> {
    let raw = scan_fast(s, f, r, t_max, window_factor)
        .unwrap_or_else(|| scan_generic(s, f, r, t_max, window_factor));
    let fset = f.to_set();
    raw.into_iter()
        .filter_map(|(t, image)| {
            let frag = image.to_set().intersect(&fset);
            (!frag.is_empty()).then_some((t, frag))
        })
        .collect()
}

/// Picks the next walk leg: among the scanned returns, the one whose set of
/// genuinely-first-return points (the fragment minus every earlier fragment's
/// preimage) has the largest single-box part.  Returns the chosen cumulative
/// step and the refined sub-box of `s`.
fn choose_leg(
    s: &TorusBox,
    f: &TorusBox,
    r: &Translation,
    p: &StageParams,
) -> Option<(u64, TorusBox)> {
    let hits = scan_returns(s, f, r, p.t_max, p.window_factor);
    // preimages of the fragments inside s, in s's coordinates
    let pulled: Vec<(u64, BoxSet)> = hits
        .iter()
        .map(|(dt, frag)| (*dt, frag.translate(r, -(*dt as i64))))
        .collect();
    let mut best: Option<(u64, TorusBox, AlgebraicScalar)> = None;
    for (i, (dt, pull)) in pulled.iter().enumerate() {
        let mut net = pull.clone();
        for (edt, epull) in &pulled[..i] {
            debug_assert!(edt < dt);
            net = net.subtract(epull);
        }
        let Some(b) = largest_part(&net) else { continue };
        let v = b.volume();
        if best.as_ref().map_or(true, |(_, _, bv)| v > *bv) {
            best = Some((*dt, b, v));
        }
    }
    best.map(|(dt, b, _)| (dt, b))
}

struct WalkOutcome {
    c: TorusBox,
    /// times[i] = cumulative raw time of leg i; times[0] = 0.
    times: Vec<u64>,
}

/// Shrinks the walk box (low corner fixed) until its translates at the walk
/// times are pairwise disjoint: for every pair of times, some axis length
/// must fit under that pair's toral offset.  Sub-boxes keep their return
/// times, so the constant itinerary survives the shrink.
fn shrink_for_disjoint_legs(c: &TorusBox, times: &[u64], r: &Translation) -> TorusBox {
    let one = AlgebraicScalar::one();
    let mut len = c.len.clone();
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            let (dx, dy) = r.step_vector((times[j] - times[i]) as i64);
            let margins = [
                AlgebraicScalar::min(&dx, &(one.clone() - dx.clone())),
                AlgebraicScalar::min(&dy, &(one.clone() - dy.clone())),
            ];
            if len[0] < margins[0] || len[1] < margins[1] {
                continue;
            }
            // cut the axis that keeps the larger fraction of its length,
            // to 3/4 of the offset so the legs end up with a real gap
            let frac = AlgebraicScalar::from_ratio(3, 4);
            let keep_x = margins[0].clone() * len[1].clone();
            let keep_y = margins[1].clone() * len[0].clone();
            if keep_x >= keep_y {
                len[0] = margins[0].clone() * frac;
            } else {
                len[1] = margins[1].clone() * frac;
            }
        }
    }
    TorusBox::new(c.lo.clone(), len)
}

/// Walks `legs` induced return steps from the base piece `f`, refining the
/// start box so that every leg's return time is constant on it.
fn constant_itinerary_walk(
    f: &TorusBox,
    r: &Translation,
    legs: usize,
    p: &StageParams,
    stage: usize,
) -> Result<WalkOutcome, CantorError> {
    let mut c = f.clone();
    let mut times: Vec<u64> = vec![0];
    while times.len() <= legs {
        let cum = *times.last().expect("nonempty");
        let cur = c.translate(r, cum as i64);
        let (dt, refined) =
            choose_leg(&cur, f, r, p).ok_or_else(|| CantorError::ScheduleInfeasible {
                stage,
                reason: format!(
                    "leg {} of {legs}: no return within t_max={}",
                    times.len() - 1,
                    p.t_max
                ),
            })?;
        // refined is a sub-box of cur whose first return happens exactly at
        // dt; pull it back through the walk so far to refine the start box
        c = refined.translate(r, -(cum as i64));
        times.push(cum + dt);
    }
    Ok(WalkOutcome { c, times })
}

/// Builds the tower sequence for `schedule` over `base`.
///
/// Stage 0 is the trimmed base.  Stage n walks `2n + s` induced return legs
/// of the previous base piece, takes leg n as the new base (so the tower
/// keeps n spare legs on each side, which yields the entry/exit margins),
/// and transports the previous stage's pieces through legs n..n+s.
pub fn build_tower_sequence(
    base: &TorusBox,
    r: &Translation,
    schedule: &TowerSchedule,
) -> Result<Vec<TowerStage>, CantorError> {
    if schedule.stages.is_empty() {
        return Err(CantorError::ScheduleInfeasible {
            stage: 0,
            reason: "empty schedule".into(),
        });
    }
    let p0 = &schedule.stages[0];
    let f0 = trim_box(base, &p0.trim).ok_or_else(|| CantorError::ScheduleInfeasible {
        stage: 0,
        reason: format!("trim fraction {} leaves no base", p0.trim),
    })?;
    let mut towers = vec![TowerStage {
        n: 0,
        f_n: f0.clone(),
        ell_n: 0,
        levels: vec![(f0, 0)],
        leg_times: Vec::new(),
    }];
    for (idx, p) in schedule.stages.iter().enumerate().skip(1) {
        let prev = towers.last().expect("stage 0 exists").clone();
        let legs_total = 2 * idx as u64 + p.s;
        let walk = constant_itinerary_walk(&prev.f_n, r, legs_total as usize, p, idx)?;
        let mut c = trim_box(&walk.c, &p.trim).ok_or_else(|| CantorError::ScheduleInfeasible {
            stage: idx,
            reason: format!("trim fraction {} leaves no piece", p.trim),
        })?;
        let cap_q = match &p.max_diameter {
            Some(q) => q.clone(),
            // rational round-down keeps each axis in its quadratic subfield
            None => scalar_to_rational_floor(
                &(prev.f_n.diameter() * AlgebraicScalar::from_ratio(1, 2)),
                1 << 40,
            ),
        };
        if cap_q.is_zero() {
            return Err(CantorError::ScheduleInfeasible {
                stage: idx,
                reason: "diameter cap underflows".into(),
            });
        }
        c = cap_box(&c, &AlgebraicScalar::from_rational(cap_q));
        c = shrink_for_disjoint_legs(&c, &walk.times, r);
        let legs: Vec<TorusBox> = walk
            .times
            .iter()
            .map(|&t| c.translate(r, t as i64))
            .collect();
        for i in 0..legs.len() {
            for j in i + 1..legs.len() {
                if !legs[i].is_disjoint(&legs[j]) {
                    return Err(CantorError::ScheduleInfeasible {
                        stage: idx,
                        reason: format!("walk legs {i} and {j} overlap"),
                    });
                }
            }
        }
        let b_idx = idx;
        let w: Vec<u64> = (0..=p.s as usize)
            .map(|i| walk.times[b_idx + i] - walk.times[b_idx])
            .collect();
        let prev_span = prev.levels.last().expect("nonempty").1;
        for i in 1..w.len() {
            if w[i] <= w[i - 1] + prev_span {
                return Err(CantorError::ScheduleInfeasible {
                    stage: idx,
                    reason: format!(
                        "leg spacing {} does not clear the previous tower span {}",
                        w[i] - w[i - 1],
                        prev_span
                    ),
                });
            }
        }
        let mut levels = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            for (pb, pt) in &prev.levels {
                let _ = pb;
                levels.push((legs[b_idx + i].translate(r, *pt as i64), wi + pt));
            }
        }
        levels.sort_by_key(|(_, t)| *t);
        for k in 1..levels.len() {
            if levels[k].1 == levels[k - 1].1 {
                return Err(CantorError::ScheduleInfeasible {
                    stage: idx,
                    reason: "two pieces received the same return time".into(),
                });
            }
        }
        let ell = (p.s + 1) * (prev.ell_n + 1) - 1;
        debug_assert_eq!(ell as usize + 1, levels.len());
        towers.push(TowerStage {
            n: idx,
            f_n: legs[b_idx].clone(),
            ell_n: ell,
            levels,
            leg_times: walk.times,
        });
    }
    let rep = validate_tower_sequence(&towers, r);
    if let Some(item) = rep.failures().first() {
        return Err(CantorError::ScheduleInfeasible {
            stage: towers.len() - 1,
            reason: format!("{}: {}", item.name, item.details),
        });
    }
    Ok(towers)
}

/// Exact structural checks on a tower sequence: pieces are disjoint exact
/// translates of the base piece, counts match the doubling law, entry/exit
/// margins are clear, stages nest piece-by-piece, and every coarser stage is
/// reproduced by transporting its sub-pieces through its own return times.
pub fn validate_tower_sequence(towers: &[TowerStage], r: &Translation) -> Report {
    let mut rep = Report::new();
    for (n, tw) in towers.iter().enumerate() {
        let k_n = tw.union();
        let mut disjoint = true;
        'outer: for i in 0..tw.levels.len() {
            for j in i + 1..tw.levels.len() {
                if !tw.levels[i].0.is_disjoint(&tw.levels[j].0) {
                    disjoint = false;
                    break 'outer;
                }
            }
        }
        rep.push(CheckItem::of(
            format!("stage {n}: pieces pairwise disjoint"),
            disjoint,
            format!("{} pieces", tw.levels.len()),
        ));
        let translates = tw
            .levels
            .iter()
            .all(|(b, t)| *b == tw.f_n.translate(r, *t as i64));
        rep.push(CheckItem::of(
            format!("stage {n}: pieces are exact translates of the base piece"),
            translates,
            String::new(),
        ));
        rep.push(CheckItem::of(
            format!("stage {n}: piece count matches the height law"),
            tw.levels.len() as u64 == tw.ell_n + 1,
            format!("{} pieces, top index {}", tw.levels.len(), tw.ell_n),
        ));
        // entry/exit margins: n spare legs on each side of the base leg
        let top = &tw.levels.last().expect("nonempty").0;
        let mut margins = true;
        for k in 1..=n as i64 {
            let pre = tw.f_n.translate(r, -k).to_set().intersect(&k_n);
            let post = top.translate(r, k).to_set().intersect(&k_n);
            if !pre.is_empty() || !post.is_empty() {
                margins = false;
                break;
            }
        }
        rep.push(CheckItem::of(
            format!("stage {n}: entry and exit margins clear for {} steps", n),
            margins,
            String::new(),
        ));
        if n > 0 {
            let prev = &towers[n - 1];
            let mut nested = true;
            let mut aligned = true;
            for (pb, _) in &prev.levels {
                let inside = BoxSet::from_torus_boxes(
                    tw.levels
                        .iter()
                        .filter(|(b, _)| subset(&b.to_set(), &pb.to_set()))
                        .map(|(b, _)| b),
                );
                if !sets_equal(&k_n.intersect(&pb.to_set()), &inside) {
                    aligned = false;
                }
            }
            for (b, _) in &tw.levels {
                if !subset(&b.to_set(), &prev.union()) {
                    nested = false;
                }
            }
            rep.push(CheckItem::of(
                format!("stage {n}: nested in stage {} piece by piece", n - 1),
                nested && aligned,
                String::new(),
            ));
            // reproduce this stage from any coarser one by transporting the
            // sub-pieces of the coarser base through its return times
            let mut reproduced = true;
            for m in 0..n {
                let coarse = &towers[m];
                let f_m = coarse.f_n.to_set();
                let in_base = BoxSet::from_torus_boxes(
                    tw.levels
                        .iter()
                        .filter(|(b, _)| subset(&b.to_set(), &f_m))
                        .map(|(b, _)| b),
                );
                if !sets_equal(&in_base, &k_n.intersect(&f_m)) {
                    reproduced = false;
                    break;
                }
                let mut rebuilt = BoxSet::empty();
                for (_, t) in &coarse.levels {
                    rebuilt = rebuilt.union(&in_base.translate(r, *t as i64));
                }
                if !sets_equal(&rebuilt, &k_n) {
                    reproduced = false;
                    break;
                }
            }
            rep.push(CheckItem::of(
                format!("stage {n}: reproduced from each coarser stage's return times"),
                reproduced,
                String::new(),
            ));
        }
        let r1 = k_n.translate(r, 1).intersect(&k_n);
        rep.push(CheckItem::of(
            format!("stage {n}: disjoint from its first translate"),
            r1.is_empty(),
            String::new(),
        ));
        if n > 0 {
            let shrunk = tw.f_n.diameter() < towers[n - 1].f_n.diameter();
            rep.push(CheckItem::of(
                format!("stage {n}: piece diameter strictly below stage {}", n - 1),
                shrunk,
                format!(
                    "{:.6} vs {:.6}",
                    tw.f_n.diameter().to_f64(),
                    towers[n - 1].f_n.diameter().to_f64()
                ),
            ));
        }
    }
    rep
}

/// Volume retention report: vol(K_n) / vol(K_0) against a floor.
pub fn measure_report(towers: &[TowerStage], floor: &Rational) -> Report {
    let mut rep = Report::new();
    let Some(first) = towers.first() else {
        rep.push(CheckItem::fail("measure: empty tower", ""));
        return rep;
    };
    let v0 = first.union().volume();
    let fl = AlgebraicScalar::from_rational(floor.clone());
    for tw in towers {
        let vn = tw.union().volume();
        let kept = vn.clone() - fl.clone() * v0.clone();
        rep.push(CheckItem::of(
            format!("stage {}: volume retention above floor", tw.n),
            kept.sign() >= 0,
            format!(
                "retained {:.3e} of the stage-0 volume (floor {:.3e})",
                (vn / v0.clone()).to_f64(),
                AlgebraicScalar::from_rational(floor.clone()).to_f64()
            ),
        ));
    }
    rep
}

/// Orbit-exit surrogate: every piece's orbit leaves the stage's set and
/// re-enters it within the label horizon.  For the top piece the re-entry
/// time is delegated to the deeper stages when available.
pub fn meagreness_report(towers: &[TowerStage], r: &Translation) -> Report {
    let mut rep = Report::new();
    for (n, tw) in towers.iter().enumerate() {
        let k_n = tw.union();
        let exits = k_n.translate(r, 1).intersect(&k_n).is_empty();
        let mut reentry_known = 0usize;
        for (i, (_, t)) in tw.levels.iter().enumerate() {
            if let Some((_, tn)) = tw.levels.get(i + 1) {
                debug_assert!(tn > t);
                reentry_known += 1;
            } else {
                // top piece: look for a deeper stage whose sub-pieces of the
                // top still have a labelled successor
                let deeper = towers[n + 1..].iter().any(|dp| {
                    dp.levels.iter().enumerate().any(|(j, (b, _))| {
                        subset(&b.to_set(), &tw.levels[i].0.to_set())
                            && j + 1 < dp.levels.len()
                            && subset(&dp.levels[j + 1].0.to_set(), &k_n)
                    })
                });
                if deeper {
                    reentry_known += 1;
                }
            }
        }
        let all_known = reentry_known == tw.levels.len();
        rep.push(CheckItem::of(
            format!("stage {n}: orbits exit and re-enter the piece set"),
            exits,
            if all_known {
                "re-entry time labelled for every piece".into()
            } else {
                format!(
                    "re-entry labelled for {} of {} pieces (top wrap beyond computed stages)",
                    reentry_known,
                    tw.levels.len()
                )
            },
        ));
    }
    rep
}

/// Exact two-route alignment check between the return-time labels and the
/// box geometry, for translate ranges up to `k_max`.
///
/// Route one predicts `R^k(K) ∩ K` from the labels alone (pieces whose times
/// differ by k); route two computes it by direct box intersection.  The two
/// must agree, and piece-by-piece every translate must be exactly equal to
/// the predicted piece or exactly disjoint from the whole set.
pub fn check_dynamical_coherence(stage: &CantorStage, r: &Translation, k_max: u64) -> Report {
    let mut rep = Report::new();
    rep.push(CheckItem::of(
        format!("stage {}: requested range within label horizon", stage.depth),
        k_max <= stage.horizon,
        format!("k_max = {k_max}, horizon = {}", stage.horizon),
    ));
    let union = stage.union();
    let times: BTreeMap<u64, usize> = stage
        .pieces
        .iter()
        .enumerate()
        .map(|(i, p)| (p.time, i))
        .collect();
    let mut routes_agree = true;
    let mut pieces_align = true;
    let mut witness = String::new();
    for k in 0..=k_max {
        let predicted = BoxSet::from_torus_boxes(
            stage
                .pieces
                .iter()
                .filter(|p| p.time >= k && times.contains_key(&(p.time - k)))
                .map(|p| &p.shape),
        );
        let geometric = union.translate(r, k as i64).intersect(&union);
        if !sets_equal(&predicted, &geometric) {
            routes_agree = false;
            if witness.is_empty() {
                witness = format!("label and box routes differ at k = {k}");
            }
        }
        for (i, p) in stage.pieces.iter().enumerate() {
            let img = p.shape.translate(r, k as i64);
            match times.get(&(p.time + k)) {
                Some(&j) if k > 0 => {
                    if img != stage.pieces[j].shape {
                        pieces_align = false;
                        if witness.is_empty() {
                            witness =
                                format!("piece {i} at k = {k} misses its labelled target {j}");
                        }
                    }
                }
                Some(_) => {}
                None => {
                    if !img.to_set().intersect(&union).is_empty() {
                        pieces_align = false;
                        if witness.is_empty() {
                            witness = format!("piece {i} at k = {k} hits the set off-label");
                        }
                    }
                }
            }
        }
    }
    rep.push(CheckItem::of(
        format!(
            "stage {}: label route equals box route for 0 <= k <= {k_max}",
            stage.depth
        ),
        routes_agree,
        witness.clone(),
    ));
    rep.push(CheckItem::of(
        format!(
            "stage {}: every piece translate equals its labelled piece or misses the set",
            stage.depth
        ),
        pieces_align,
        witness,
    ));
    rep.push(CheckItem::of(
        format!("stage {}: first translate disjoint", stage.depth),
        union.translate(r, 1).intersect(&union).is_empty(),
        String::new(),
    ));
    let min_gap = stage.pieces.iter().filter_map(|p| p.fwd_gap).min();
    rep.push(CheckItem::of(
        format!("stage {}: consecutive-iterate escape runs", stage.depth),
        min_gap.map_or(true, |g| g >= 2),
        match min_gap {
            Some(g) => format!(
                "every piece has runs of {} consecutive iterates outside the set",
                g - 1
            ),
            None => "single piece: all small iterates leave the set".into(),
        },
    ));
    rep
}

// ---------------------------------------------------------------------------
// Collection derivation
// ---------------------------------------------------------------------------

/// Result of `derive_collections`: the per-stage rectangle collections, the
/// inflation margin used at each stage, and the full check report.
#[derive(Debug)]
pub struct DerivedCollections {
    pub collections: Vec<RectangleCollection>,
    pub epsilons: Vec<Rational>,
    pub report: Report,
}

/// Separation budget between two boxes: on a circle axis the two arcs are
/// disjoint iff both gaps (forward from a's end to b's start, and onward
/// from b's end around to a's start) are nonnegative, and the axis budget is
/// the smaller gap.  Returns the largest budget over separating axes, or
/// `None` if the boxes overlap.
fn box_separation(a: &TorusBox, b: &TorusBox) -> Option<AlgebraicScalar> {
    let one = AlgebraicScalar::one();
    let mut best: Option<AlgebraicScalar> = None;
    for axis in 0..2 {
        let d = (b.lo[axis].clone() - a.lo[axis].clone()).fract();
        let fwd = d.clone() - a.len[axis].clone();
        let back = one.clone() - d - b.len[axis].clone();
        if fwd.sign() >= 0 && back.sign() >= 0 {
            let g = AlgebraicScalar::min(&fwd, &back);
            best = Some(match best {
                Some(cur) => AlgebraicScalar::max(&cur, &g),
                None => g,
            });
        }
    }
    best
}

fn scalar_to_rational_floor(x: &AlgebraicScalar, denom: i64) -> Rational {
    // largest multiple of 1/denom at or below x
    let scaled = x.clone() * AlgebraicScalar::from_int(denom);
    Rational::new(scaled.floor(), denom.into())
}

struct StageMachinery {
    /// D-class id per piece of the deep stage.
    class_of: Vec<usize>,
    class_count: usize,
    edges: Vec<(usize, usize, u64)>,
    component_count: usize,
}

/// Entry/exit machinery at threshold 2(n+1) on the deep stage's pieces:
/// runs of small-gap pieces, per-piece visit signatures over the coarser
/// rectangles, grouping into classes, and the class transition graph.
fn build_stage_machinery(
    deep: &CantorStage,
    collections: &[RectangleCollection],
    r: &Translation,
    n: usize,
) -> Result<StageMachinery, CantorError> {
    let thresh = 2 * (n as u64 + 1);
    let pieces = &deep.pieces;
    let fail = |hypothesis: &str, witness: String| CantorError::DerivationFailed {
        stage: n,
        hypothesis: hypothesis.into(),
        witness,
    };
    // membership pattern of each piece over the coarser rectangles within
    // the window |k| < 2(n+1); every translate must be inside or disjoint
    let mut patterns: Vec<BTreeSet<(usize, u32, i64)>> = vec![BTreeSet::new(); pieces.len()];
    for (i, p) in pieces.iter().enumerate() {
        for k in -(thresh as i64 - 1)..=(thresh as i64 - 1) {
            let img = p.shape.translate(r, k).to_set();
            for coll in collections {
                for rect in &coll.rects {
                    let rset = rect.shape.to_set();
                    if subset(&img, &rset) {
                        patterns[i].insert((coll.stage, rect.id, k));
                    } else if !img.intersect(&rset).is_empty() {
                        return Err(fail(
                            "boundary separation",
                            format!(
                                "piece {i} translated by {k} straddles rectangle {} of stage {}",
                                rect.id, coll.stage
                            ),
                        ));
                    }
                }
            }
        }
    }
    let pattern_ids: BTreeMap<&BTreeSet<(usize, u32, i64)>, usize> = patterns
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(id, p)| (p, id))
        .collect();
    // runs: maximal chains of pieces linked by gaps below the threshold;
    // gaps at or beyond the threshold (or beyond the labels) break the chain
    let small = |g: Option<u64>| g.is_some_and(|g| g < thresh);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    for i in 0..pieces.len() {
        if !small(pieces[i].fwd_gap) {
            runs.push((start, i));
            start = i + 1;
        }
    }
    if start != pieces.len() {
        return Err(fail(
            "entry/exit structure",
            "final piece chains past the label horizon".into(),
        ));
    }
    // class key: offsets and patterns of the whole run, relative to the piece
    let mut key_of: Vec<Vec<(i64, usize)>> = Vec::with_capacity(pieces.len());
    for &(a, b) in &runs {
        for i in a..=b {
            let key: Vec<(i64, usize)> = (a..=b)
                .map(|j| {
                    (
                        pieces[j].time as i64 - pieces[i].time as i64,
                        pattern_ids[&patterns[j]],
                    )
                })
                .collect();
            key_of.push(key);
        }
    }
    let class_ids: BTreeMap<&Vec<(i64, usize)>, usize> = key_of
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(id, k)| (k, id))
        .collect();
    let class_of: Vec<usize> = key_of.iter().map(|k| class_ids[k]).collect();
    let class_count = class_ids.len();
    // class members as time sets, for the translate-equivariance check
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &c) in class_of.iter().enumerate() {
        members[c].push(i);
    }
    let time_set = |c: usize| -> BTreeSet<i64> {
        members[c].iter().map(|&i| pieces[i].time as i64).collect()
    };
    for c in 0..class_count {
        let tc = time_set(c);
        for c2 in 0..class_count {
            let t2 = time_set(c2);
            for m in -2 * (n as i64 + 1)..=2 * (n as i64 + 1) {
                if c == c2 && m == 0 {
                    continue;
                }
                let shifted: BTreeSet<i64> = tc.iter().map(|t| t + m).collect();
                let inter = shifted.intersection(&t2).count();
                if inter != 0 && (inter != t2.len() || inter != shifted.len()) {
                    return Err(fail(
                        "class translate equivariance",
                        format!("classes {c} and {c2} partially align at shift {m}"),
                    ));
                }
            }
        }
    }
    // class transitions: every member must step to the same class at the
    // same time offset, and the step must transport the class exactly
    let mut edges: Vec<(usize, usize, u64)> = Vec::new();
    for c in 0..class_count {
        let mut out: Option<(usize, u64)> = None;
        let mut terminal = false;
        for &i in &members[c] {
            if small(pieces[i].fwd_gap) {
                let k = pieces[i].fwd_gap.expect("small gap");
                let tgt = class_of[i + 1];
                match out {
                    None if !terminal => out = Some((tgt, k)),
                    Some((t0, k0)) if t0 == tgt && k0 == k => {}
                    _ => {
                        return Err(fail(
                            "class transition mismatch",
                            format!("class {c} steps to different targets"),
                        ))
                    }
                }
            } else {
                terminal = true;
                if out.is_some() {
                    return Err(fail(
                        "class transition mismatch",
                        format!("class {c} mixes terminal and chained pieces"),
                    ));
                }
            }
        }
        if let Some((tgt, k)) = out {
            let src_union = BoxSet::from_torus_boxes(members[c].iter().map(|&i| &pieces[i].shape));
            let tgt_union =
                BoxSet::from_torus_boxes(members[tgt].iter().map(|&i| &pieces[i].shape));
            if !sets_equal(&src_union.translate(r, k as i64), &tgt_union) {
                return Err(fail(
                    "class transition mismatch",
                    format!("step of class {c} does not transport it onto class {tgt}"),
                ));
            }
            edges.push((c, tgt, k));
        }
    }
    // acyclicity and linearity: out-degree <= 1 by construction; check
    // in-degree <= 1 and follow chains
    let mut indeg = vec![0usize; class_count];
    for &(_, t, _) in &edges {
        indeg[t] += 1;
        if indeg[t] > 1 {
            return Err(fail(
                "class graph linearity",
                format!("class {t} has two predecessors"),
            ));
        }
    }
    let succ: BTreeMap<usize, usize> = edges.iter().map(|&(a, b, _)| (a, b)).collect();
    let mut component_count = 0usize;
    let mut visited = vec![false; class_count];
    for c in 0..class_count {
        if indeg[c] > 0 {
            continue;
        }
        component_count += 1;
        let mut cur = c;
        let mut steps = 0usize;
        visited[cur] = true;
        while let Some(&nx) = succ.get(&cur) {
            if visited[nx] {
                return Err(fail("class graph acyclicity", format!("cycle through {nx}")));
            }
            visited[nx] = true;
            cur = nx;
            steps += 1;
            if steps > class_count {
                return Err(fail("class graph acyclicity", "unbounded chain".into()));
            }
        }
        // chain must start at a piece with a clear backward margin and end
        // at one with a clear forward margin
        let entry_ok = members[c]
            .iter()
            .all(|&i| !small(pieces[i].back_gap));
        let exit_ok = members[cur].iter().all(|&i| !small(pieces[i].fwd_gap));
        if !entry_ok || !exit_ok {
            return Err(fail(
                "entry/exit structure",
                format!("chain {c}..{cur} does not span entry to exit"),
            ));
        }
    }
    if visited.iter().any(|v| !v) {
        return Err(fail("class graph acyclicity", "isolated cycle".into()));
    }
    Ok(StageMachinery {
        class_of,
        class_count,
        edges,
        component_count,
    })
}

/// Derives one rectangle collection per stage, n = 0..=n_max, from the tower
/// sequence, and machine-checks the hierarchy hypotheses on the result.
///
/// Each stage-n rectangle is the matching tower piece inflated by a uniform
/// margin ε_n, with ε chosen by halving search so that, exactly: rectangles
/// are pairwise disjoint, each contains exactly its own sub-pieces of the
/// finest stage, no translate of a finest-stage piece within the window
/// 2(n+1)+1 meets a rectangle off-label, rectangles sit in the interior of
/// their parents, and the uniform margin transports class thickenings onto
/// each other along the class graph.
pub fn derive_collections(
    towers: &[TowerStage],
    r: &Translation,
    n_max: usize,
) -> Result<DerivedCollections, CantorError> {
    if towers.len() < n_max + 1 {
        return Err(CantorError::DerivationFailed {
            stage: n_max,
            hypothesis: "tower depth".into(),
            witness: format!(
                "need at least {} tower stages for n_max = {n_max}, got {}",
                n_max + 1,
                towers.len()
            ),
        });
    }
    let depth = towers.len() - 1;
    let stages: Vec<CantorStage> = (0..=depth)
        .map(|d| CantorStage::from_towers(towers, d))
        .collect::<Result<_, _>>()?;
    let deep = &stages[depth];
    let horizon = 2 * (n_max as u64 + 1) + 1;
    let mut report = Report::new();
    let coh = check_dynamical_coherence(deep, r, horizon);
    if !coh.all_pass() {
        let item = coh.failures()[0];
        return Err(CantorError::DerivationFailed {
            stage: n_max,
            hypothesis: "translate alignment".into(),
            witness: format!("{}: {}", item.name, item.details),
        });
    }
    report.merge(coh);
    // ancestor of each deep piece at each stage
    let mut ancestors: Vec<Vec<usize>> = vec![Vec::new(); deep.pieces.len()];
    for (i, anc) in ancestors.iter_mut().enumerate() {
        let mut chain = vec![i];
        for d in (1..=depth).rev() {
            let prev = stages[d].pieces[*chain.last().expect("nonempty")]
                .parent
                .expect("depth > 0 pieces have parents");
            chain.push(prev);
        }
        chain.reverse();
        *anc = chain; // anc[m] = piece index at stage m
    }
    let deep_times: BTreeSet<i64> = deep.pieces.iter().map(|p| p.time as i64).collect();
    let mut collections: Vec<RectangleCollection> = Vec::new();
    let mut epsilons: Vec<Rational> = Vec::new();
    let mut prev_eps: Option<Rational> = None;
    for n in 0..=n_max {
        let machinery = build_stage_machinery(deep, &collections, r, n)?;
        let stage_n = &stages[n];
        // a rectangle may not straddle class boundaries: all deep pieces
        // below one stage-n piece must share a class
        for (li, _) in stage_n.pieces.iter().enumerate() {
            let classes: BTreeSet<usize> = ancestors
                .iter()
                .enumerate()
                .filter(|(_, anc)| anc[n] == li)
                .map(|(i, _)| machinery.class_of[i])
                .collect();
            if classes.len() > 1 {
                return Err(CantorError::DerivationFailed {
                    stage: n,
                    hypothesis: "class coarseness".into(),
                    witness: format!(
                        "stage-{n} piece {li} holds pieces from {} classes",
                        classes.len()
                    ),
                });
            }
        }
        // separation bound: smallest gap among off-label translate pairs
        let win = 2 * (n as i64 + 1) + 1;
        let mut min_sep: Option<AlgebraicScalar> = None;
        let mut consider = |g: Option<AlgebraicScalar>| {
            if let Some(g) = g {
                min_sep = Some(match &min_sep {
                    Some(cur) => AlgebraicScalar::min(cur, &g),
                    None => g,
                });
            }
        };
        for (i, pi) in stage_n.pieces.iter().enumerate() {
            for k in -win..=win {
                let img = pi.shape.translate(r, k);
                for (j, pj) in stage_n.pieces.iter().enumerate() {
                    if pi.time as i64 + k == pj.time as i64 {
                        continue;
                    }
                    let sep = box_separation(&img, &pj.shape);
                    if sep.is_none() {
                        return Err(CantorError::DerivationFailed {
                            stage: n,
                            hypothesis: "translate separation".into(),
                            witness: format!("pieces {i} and {j} overlap off-label at k = {k}"),
                        });
                    }
                    consider(sep);
                }
            }
        }
        for p in &deep.pieces {
            for k in -win..=win {
                if deep_times.contains(&(p.time as i64 + k)) {
                    continue;
                }
                let img = p.shape.translate(r, k);
                for pj in &stage_n.pieces {
                    consider(box_separation(&img, &pj.shape));
                }
            }
        }
        let sep = min_sep.ok_or_else(|| CantorError::DerivationFailed {
            stage: n,
            hypothesis: "translate separation".into(),
            witness: "no off-label pair to separate".into(),
        })?;
        let mut eps = scalar_to_rational_floor(&(sep * AlgebraicScalar::from_ratio(1, 4)), 1 << 20);
        if let Some(pe) = &prev_eps {
            let half = pe / Rational::from_integer(2.into());
            if eps > half {
                eps = half;
            }
        }
        let mut chosen: Option<(Rational, Vec<Rectangle>)> = None;
        'search: for _ in 0..60 {
            if eps.is_zero() {
                break;
            }
            let e = AlgebraicScalar::from_rational(eps.clone());
            let rects: Vec<Rectangle> = stage_n
                .pieces
                .iter()
                .enumerate()
                .map(|(i, p)| Rectangle {
                    id: i as u32,
                    shape: p.shape.inflate(&e),
                })
                .collect();
            // disjointness
            for i in 0..rects.len() {
                for j in i + 1..rects.len() {
                    if !rects[i].shape.is_disjoint(&rects[j].shape) {
                        eps = eps / Rational::from_integer(2.into());
                        continue 'search;
                    }
                }
            }
            // exact capture: rectangle meets the deep set in exactly its own pieces
            for (li, rect) in rects.iter().enumerate() {
                let own = BoxSet::from_torus_boxes(
                    deep.pieces
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| ancestors[*i][n] == li)
                        .map(|(_, p)| &p.shape),
                );
                if !sets_equal(&rect.shape.to_set().intersect(&deep.union()), &own) {
                    eps = eps / Rational::from_integer(2.into());
                    continue 'search;
                }
            }
            // off-label translates of the deep pieces must miss every rectangle
            for p in &deep.pieces {
                for k in -win..=win {
                    if deep_times.contains(&(p.time as i64 + k)) {
                        continue;
                    }
                    let img = p.shape.translate(r, k).to_set();
                    for rect in &rects {
                        if !img.intersect(&rect.shape.to_set()).is_empty() {
                            eps = eps / Rational::from_integer(2.into());
                            continue 'search;
                        }
                    }
                }
            }
            // strict interior of the parent rectangle
            if let Some(prev_coll) = collections.last() {
                for (li, rect) in rects.iter().enumerate() {
                    let parent = stage_n.pieces[li].parent.expect("n > 0");
                    let pshape = &prev_coll.rects[parent].shape;
                    if rect.shape.relation(pshape) != BoxRelation::AInInteriorOfB {
                        eps = eps / Rational::from_integer(2.into());
                        continue 'search;
                    }
                }
            }
            chosen = Some((eps.clone(), rects));
            break;
        }
        let Some((eps, rects)) = chosen else {
            return Err(CantorError::DerivationFailed {
                stage: n,
                hypothesis: "thickening margin".into(),
                witness: "no inflation margin satisfied all separation constraints".into(),
            });
        };
        // uniform margin transports class thickenings along the class graph
        let class_boxes = |c: usize| -> BoxSet {
            BoxSet::from_torus_boxes(
                deep.pieces
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| machinery.class_of[*i] == c)
                    .map(|(i, _)| &rects[ancestors[i][n]].shape),
            )
        };
        for &(c, c2, k) in &machinery.edges {
            if !sets_equal(&class_boxes(c).translate(r, k as i64), &class_boxes(c2)) {
                return Err(CantorError::DerivationFailed {
                    stage: n,
                    hypothesis: "thickening transport".into(),
                    witness: format!("thickened class {c} does not land on class {c2}"),
                });
            }
        }
        report.push(CheckItem::pass(
            format!("stage {n}: class graph linear from entry to exit"),
            format!(
                "{} classes, {} steps, {} chains",
                machinery.class_count,
                machinery.edges.len(),
                machinery.component_count
            ),
        ));
        report.push(CheckItem::pass(
            format!("stage {n}: thickening margin found"),
            format!("epsilon = {eps}"),
        ));
        let parents: BTreeMap<u32, u32> = if n == 0 {
            BTreeMap::new()
        } else {
            stage_n
                .pieces
                .iter()
                .enumerate()
                .map(|(i, p)| (i as u32, p.parent.expect("n > 0") as u32))
                .collect()
        };
        collections.push(RectangleCollection::new(n, rects, parents));
        epsilons.push(eps);
        prev_eps = Some(epsilons[n].clone());
    }
    let hyp = check_hypotheses_a(&collections, r);
    let hyp_ok = hyp.all_pass();
    let first_fail = hyp.failures().first().map(|i| (i.name.clone(), i.details.clone()));
    report.merge(hyp);
    if !hyp_ok {
        let (name, details) = first_fail.expect("failure recorded");
        return Err(CantorError::DerivationFailed {
            stage: n_max,
            hypothesis: name,
            witness: details,
        });
    }
    let g0 = build_graph(&collections[0], r, 0).map_err(|e| CantorError::DerivationFailed {
        stage: 0,
        hypothesis: "base graph".into(),
        witness: e.to_string(),
    })?;
    let no_edge = g0.succ.iter().all(|s| s.is_none());
    report.push(CheckItem::of(
        "stage 0 graph has no edges",
        no_edge,
        format!("{} vertices", g0.family.vertices.len()),
    ));
    let paths = check_return_paths(&collections, &deep.union(), r);
    let paths_ok = paths.all_pass();
    report.merge(paths);
    if !hyp_ok || !no_edge || !paths_ok {
        let item = report.failures()[0];
        return Err(CantorError::DerivationFailed {
            stage: n_max,
            hypothesis: item.name.clone(),
            witness: item.details.clone(),
        });
    }
    Ok(DerivedCollections {
        collections,
        epsilons,
        report,
    })
}

/// Along every chain of the stage graph, the translation must carry the
/// trace of the invariant set in one rectangle exactly onto the trace in the
/// other: R^p(K ∩ X) = K ∩ X' whenever R^p maps X onto X' through the chain.
pub fn check_return_paths(
    collections: &[RectangleCollection],
    k_union: &BoxSet,
    r: &Translation,
) -> Report {
    let mut rep = Report::new();
    for coll in collections {
        let n = coll.stage as i64;
        let graph = match build_graph(coll, r, n) {
            Ok(g) => g,
            Err(e) => {
                rep.push(CheckItem::fail(
                    format!("stage {}: trace transport along chains", coll.stage),
                    e.to_string(),
                ));
                continue;
            }
        };
        let mut pairs = 0usize;
        let mut ok = true;
        for comp in &graph.components {
            for (i, &v) in comp.iter().enumerate() {
                for (j, &w) in comp.iter().enumerate().skip(i + 1) {
                    let a = &graph.family.vertices[v];
                    let b = &graph.family.vertices[w];
                    // only chain positions whose boxes are stage rectangles
                    let a0 = a.labels.iter().any(|&(_, k)| k == 0);
                    let b0 = b.labels.iter().any(|&(_, k)| k == 0);
                    if !a0 || !b0 {
                        continue;
                    }
                    let p = (j - i) as i64;
                    let lhs = k_union
                        .intersect(&a.shape.to_set())
                        .translate(r, p);
                    let rhs = k_union.intersect(&b.shape.to_set());
                    pairs += 1;
                    if !sets_equal(&lhs, &rhs) {
                        ok = false;
                    }
                }
            }
        }
        rep.push(CheckItem::of(
            format!("stage {}: trace transport along chains", coll.stage),
            ok,
            format!("{pairs} chain pairs checked"),
        ));
    }
    rep
}

// ---------------------------------------------------------------------------
// Product embedding
// ---------------------------------------------------------------------------

/// Path of piece indices from stage 0 down to the addressed stage.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CantorAddress {
    pub ids: Vec<u32>,
}

/// Base address plus a window of the binary fiber itinerary.  The embedding
/// table realises the future window as nested vertical bands; the past
/// window is reserved for the symbolic layers built on top of the table.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FiberAddress {
    pub base: CantorAddress,
    pub past: Vec<u8>,
    pub future: Vec<u8>,
}

#[derive(Debug)]
pub struct EmbeddingTable {
    pub fiber_depth: usize,
    pub entries: BTreeMap<FiberAddress, TorusBox>,
}

impl EmbeddingTable {
    pub fn lookup(&self, addr: &FiberAddress) -> Option<&TorusBox> {
        self.entries.get(addr)
    }
}

/// Vertical band of a box addressed by a binary word: each symbol keeps the
/// lower or upper band of 3/8 of the current height, leaving a separating
/// gap of a quarter height between siblings.
pub(crate) fn fiber_band(b: &TorusBox, word: &[u8]) -> TorusBox {
    let mut lo = b.lo[1].clone();
    let mut len = b.len[1].clone();
    for &c in word {
        let third = len.clone() * AlgebraicScalar::from_ratio(3, 8);
        if c == 1 {
            lo = lo + len.clone() * AlgebraicScalar::from_ratio(5, 8);
        }
        len = third;
    }
    TorusBox::new([b.lo[0].clone(), lo], [b.len[0].clone(), len])
}

fn scalar_denom_bits(x: &AlgebraicScalar) -> u64 {
    [&x.q0, &x.q1, &x.q2, &x.q3]
        .iter()
        .map(|q| q.denom().bits())
        .max()
        .unwrap_or(0)
}

/// Builds the finite product-embedding table for the deepest stage of the
/// slice: every piece of that stage crossed with every fiber word of length
/// up to `fiber_depth`, mapped to nested vertical bands.
pub fn embed_product(
    stages: &[CantorStage],
    fiber_depth: usize,
    denom_bit_budget: u64,
) -> Result<EmbeddingTable, CantorError> {
    let deep = stages.last().ok_or(CantorError::DerivationFailed {
        stage: 0,
        hypothesis: "empty stage list".into(),
        witness: "embed_product needs at least one stage".into(),
    })?;
    let mut entries = BTreeMap::new();
    for (i, piece) in deep.pieces.iter().enumerate() {
        // address path from the root down to this piece
        let mut ids = vec![i as u32];
        let mut cur = i;
        for d in (1..=deep.depth).rev() {
            let parent = stages[d].pieces[cur].parent.expect("linked");
            ids.push(parent as u32);
            cur = parent;
        }
        ids.reverse();
        let base = CantorAddress { ids };
        let mut words: Vec<Vec<u8>> = vec![Vec::new()];
        for _ in 0..fiber_depth {
            words = words
                .iter()
                .flat_map(|w| {
                    [0u8, 1u8].into_iter().map(|c| {
                        let mut w2 = w.clone();
                        w2.push(c);
                        w2
                    })
                })
                .collect();
            let probe = fiber_band(&piece.shape, &words[0]);
            let bits = scalar_denom_bits(&probe.len[1]);
            if bits > denom_bit_budget {
                return Err(CantorError::DepthOverflow {
                    depth: words[0].len(),
                    bits,
                    budget: denom_bit_budget,
                });
            }
        }
        let mut all_words: Vec<Vec<u8>> = vec![Vec::new()];
        for d in 1..=fiber_depth {
            all_words.extend(binary_words(d));
        }
        for w in all_words {
            let band = fiber_band(&piece.shape, &w);
            entries.insert(
                FiberAddress {
                    base: base.clone(),
                    past: Vec::new(),
                    future: w,
                },
                band,
            );
        }
    }
    Ok(EmbeddingTable {
        fiber_depth,
        entries,
    })
}

pub(crate) fn binary_words(len: usize) -> Vec<Vec<u8>> {
    (0..(1usize << len))
        .map(|m| (0..len).map(|b| ((m >> (len - 1 - b)) & 1) as u8).collect())
        .collect()
}

/// Convenience oracle wrapper: the first-return pieces of a box, computed by
/// the direct scan of the ambient translation.
pub fn first_return_pieces(
    base: &TorusBox,
    r: &Translation,
    t_max: u64,
) -> Result<Vec<(BoxSet, u64)>, CantorError> {
    let set = base.to_set();
    first_return_partition_sets(&set, &set, r, t_max)
        .map(|p| p.pieces)
        .map_err(|e| CantorError::ScheduleInfeasible {
            stage: 0,
            reason: e.to_string(),
        })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::exactnum::TorusPoint;

    fn base() -> TorusBox {
        testkit::base()
    }

    fn r() -> Translation {
        Translation::default_golden_sqrt2()
    }

    #[test]
    fn trivial_schedule_trims_base() {
        let sched = TowerSchedule {
            stages: vec![StageParams::base(rat(1, 16))],
        };
        let towers = build_tower_sequence(&base(), &r(), &sched).expect("stage 0 builds");
        assert_eq!(towers.len(), 1);
        let expected = TorusBox::from_rationals((1, 160), (1, 160), (7, 80), (7, 80));
        assert_eq!(towers[0].f_n, expected);
        assert_eq!(towers[0].ell_n, 0);
        assert_eq!(towers[0].levels, vec![(expected, 0)]);
    }

    fn untrimmed(depth: usize) -> Vec<TowerStage> {
        build_tower_sequence(&base(), &r(), &TowerSchedule::untrimmed_depth(depth))
            .expect("untrimmed tower builds")
    }

    /// Depth-3 towers are the expensive fixture; build once per process.
    fn towers3() -> &'static [TowerStage] {
        testkit::towers3()
    }

    #[test]
    fn stage_one_lands_in_the_corner_return_piece() {
        let towers = untrimmed(1);
        let st = &towers[1];
        assert_eq!(st.levels.len(), 2);
        // the two pieces sit five steps apart: the base box's shortest
        // return sends its low corner back after five steps
        assert_eq!(st.levels[1].1 - st.levels[0].1, 5);
        // oracle: the first-return partition of the base has a unique
        // five-step piece, and the stage base must be inside it
        let pieces = first_return_pieces(&base(), &r(), 40).expect("scan succeeds");
        let five: Vec<&BoxSet> = pieces
            .iter()
            .filter(|(_, t)| *t == 5)
            .map(|(s, _)| s)
            .collect();
        assert_eq!(five.len(), 1);
        assert!(subset(&st.f_n.to_set(), five[0]));
        // frozen extent of that piece: [0, (56-25√5)/10) x [0, (71-50√2)/10)
        let ex = AlgebraicScalar::new(rat(28, 5), rat(0, 1), rat(-5, 2), rat(0, 1));
        let ey = AlgebraicScalar::new(rat(71, 10), rat(-5, 1), rat(0, 1), rat(0, 1));
        let frozen = TorusBox::new(
            [AlgebraicScalar::zero(), AlgebraicScalar::zero()],
            [ex, ey],
        );
        assert!(sets_equal(five[0], &frozen.to_set()));
    }

    #[test]
    fn tiny_scan_budget_is_infeasible() {
        let mut sched = TowerSchedule::untrimmed_depth(1);
        sched.stages[1].t_max = 3;
        let err = build_tower_sequence(&base(), &r(), &sched).unwrap_err();
        assert!(matches!(err, CantorError::ScheduleInfeasible { stage: 1, .. }));
    }

    #[test]
    fn tower_invariants_hold_to_depth_three() {
        let towers = towers3();
        assert_eq!(
            towers.iter().map(|t| t.ell_n).collect::<Vec<_>>(),
            vec![0, 1, 3, 7]
        );
        let rep = validate_tower_sequence(towers, &r());
        assert!(rep.all_pass(), "failures: {:?}", rep.failures());
        let meas = measure_report(towers, &rat(1, 1_000_000_000));
        assert!(meas.all_pass(), "failures: {:?}", meas.failures());
        let mea = meagreness_report(towers, &r());
        assert!(mea.all_pass(), "failures: {:?}", mea.failures());
    }

    #[test]
    fn coherence_routes_agree_and_detect_tampering() {
        let stage = CantorStage::from_towers(towers3(), 2).expect("links resolve");
        let rep = check_dynamical_coherence(&stage, &r(), stage.horizon);
        assert!(rep.all_pass(), "failures: {:?}", rep.failures());

        let mut bad = stage.clone();
        let shift = AlgebraicScalar::from_ratio(1, 1000);
        let b = &bad.pieces[1].shape;
        bad.pieces[1].shape = TorusBox::new(
            [b.lo[0].clone() + shift, b.lo[1].clone()],
            b.len.clone(),
        );
        let rep = check_dynamical_coherence(&bad, &r(), bad.horizon);
        assert!(!rep.all_pass());
    }

    #[test]
    fn derive_two_stages_matches_expected_shape() {
        let towers = untrimmed(1);
        let derived = derive_collections(&towers, &r(), 1).expect("derivation succeeds");
        assert_eq!(derived.collections.len(), 2);
        assert_eq!(derived.collections[0].rects.len(), 1);
        assert_eq!(derived.collections[1].rects.len(), 2);
        assert!(derived.report.all_pass());
        assert!(derived
            .report
            .items
            .iter()
            .any(|i| i.name == "stage 0 graph has no edges" && i.pass));
        // margins decrease strictly down the hierarchy
        assert!(derived.epsilons[1] < derived.epsilons[0]);
    }

    #[test]
    fn derive_three_stages_splits_classes_at_the_short_gap() {
        let derived = derive_collections(towers3(), &r(), 2).expect("derivation succeeds");
        assert_eq!(
            derived
                .collections
                .iter()
                .map(|c| c.rects.len())
                .collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
        // the five-step gap sits below the stage-2 threshold of six, so the
        // pieces split into a two-class chain
        let item = derived
            .report
            .items
            .iter()
            .find(|i| i.name == "stage 2: class graph linear from entry to exit")
            .expect("machinery item present");
        assert_eq!(item.details, "2 classes, 1 steps, 1 chains");
        let transport = derived
            .report
            .items
            .iter()
            .find(|i| i.name.starts_with("stage 2: trace transport"))
            .expect("transport item");
        assert!(transport.pass);
    }

    #[test]
    fn derivation_rejects_a_misaligned_stage() {
        let mut towers = untrimmed(1);
        let shift = AlgebraicScalar::from_ratio(1, 997);
        let (b, t) = towers[1].levels[1].clone();
        towers[1].levels[1] = (
            TorusBox::new([b.lo[0].clone() + shift, b.lo[1].clone()], b.len.clone()),
            t,
        );
        let err = derive_collections(&towers, &r(), 1).unwrap_err();
        assert!(matches!(err, CantorError::DerivationFailed { .. }));
    }

    #[test]
    fn derivation_requires_enough_stages() {
        let towers = untrimmed(1);
        let err = derive_collections(&towers, &r(), 3).unwrap_err();
        match err {
            CantorError::DerivationFailed { hypothesis, .. } => {
                assert_eq!(hypothesis, "tower depth")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn embedding_depth_zero_is_the_identity_on_pieces() {
        let towers = untrimmed(1);
        let stages: Vec<CantorStage> = (0..=1)
            .map(|d| CantorStage::from_towers(&towers, d).expect("links"))
            .collect();
        let table = embed_product(&stages, 0, 256).expect("embeds");
        assert_eq!(table.entries.len(), 2);
        for (addr, b) in &table.entries {
            assert!(addr.future.is_empty());
            let piece = &stages[1].pieces[*addr.base.ids.last().unwrap() as usize];
            assert_eq!(b, &piece.shape);
        }
    }

    #[test]
    fn embedding_bands_nest_with_quarter_gaps() {
        let towers = untrimmed(1);
        let stages: Vec<CantorStage> = (0..=1)
            .map(|d| CantorStage::from_towers(&towers, d).expect("links"))
            .collect();
        let table = embed_product(&stages, 2, 512).expect("embeds");
        // per piece: 1 + 2 + 4 addresses
        assert_eq!(table.entries.len(), 2 * 7);
        for (addr, b) in &table.entries {
            if addr.future.is_empty() {
                continue;
            }
            let mut parent_addr = addr.clone();
            parent_addr.future.pop();
            let parent = table.lookup(&parent_addr).expect("parent entry");
            assert!(subset(&b.to_set(), &parent.to_set()));
            // band height is 3/8 of the parent height
            let expect = parent.len[1].clone() * AlgebraicScalar::from_ratio(3, 8);
            assert_eq!(b.len[1], expect);
            // siblings are separated by a quarter of the parent height
            let mut sib_addr = addr.clone();
            let last = sib_addr.future.last_mut().unwrap();
            *last = 1 - *last;
            let sib = table.lookup(&sib_addr).expect("sibling entry");
            assert!(b.is_disjoint(sib));
            let gap = box_separation(b, sib).expect("separated");
            assert_eq!(gap, parent.len[1].clone() * AlgebraicScalar::from_ratio(1, 4));
        }
    }

    #[test]
    fn embedding_reports_denominator_overflow() {
        let towers = untrimmed(1);
        let stages: Vec<CantorStage> = (0..=1)
            .map(|d| CantorStage::from_towers(&towers, d).expect("links"))
            .collect();
        let err = embed_product(&stages, 30, 16).unwrap_err();
        assert!(matches!(err, CantorError::DepthOverflow { .. }));
    }

    #[test]
    fn fiber_bands_partition_points_consistently() {
        // a point in the lower band stays out of the upper band and out of
        // the gap's complement checks
        let b = TorusBox::from_rationals((1, 4), (1, 4), (1, 8), (1, 8));
        let lower = fiber_band(&b, &[0]);
        let upper = fiber_band(&b, &[1]);
        assert!(lower.is_disjoint(&upper));
        let p = TorusPoint::new(
            AlgebraicScalar::from_ratio(5, 16),
            AlgebraicScalar::from_ratio(26, 100),
        );
        assert!(lower.contains_point(&p));
        assert!(!upper.contains_point(&p));
    }
}
