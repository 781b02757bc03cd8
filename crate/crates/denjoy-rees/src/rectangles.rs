//! Rectangle collections, iterate families, transition graphs, and the exact
//! verification of the nesting hypotheses the blow-up construction rests on.
//!
//! A stage is a finite collection of pairwise disjoint axis-aligned boxes on
//! the torus, each linked to a parent box of the previous stage that contains
//! it in its interior.  Translating a stage by `R^k` for `|k| <= p` yields the
//! iterate family; the family is valid only when any two translates are equal
//! or disjoint.  The transition graph has an edge from box `X` to box `X'`
//! exactly when `X' = R(X)`; with an irrational translation its components are
//! finite ordered chains.
//!
//! All checks in this module are exact: box comparisons reduce to sign tests
//! of algebraic numbers, and every union-level statement is evaluated with
//! [`BoxSet`] algebra (no sampling, no tolerances).

use std::collections::BTreeMap;

use crate::exactnum::{BoxRelation, BoxSet, Translation, TorusBox};
use crate::report::{CheckItem, Report};

/// One named rectangle of a stage collection.
#[derive(Clone, Debug)]
pub struct Rectangle {
    pub id: u32,
    pub shape: TorusBox,
}

/// A stage collection: disjoint boxes, each linked to its parent at the
/// previous stage (stage 0 rectangles have no parent).
#[derive(Clone, Debug)]
pub struct RectangleCollection {
    pub stage: usize,
    pub rects: Vec<Rectangle>,
    /// child id -> parent id in the previous stage's collection
    pub parents: BTreeMap<u32, u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum RectError {
    #[error(
        "iterate family at range {p}: R^{k}(rect {a}) and R^{l}(rect {b}) overlap \
         without being equal"
    )]
    IterabilityViolation {
        p: i64,
        a: u32,
        k: i64,
        b: u32,
        l: i64,
    },
    #[error("transition graph at range {n}: cycle of length {len} through rect {rect}")]
    CycleDetected { n: i64, rect: u32, len: usize },
    #[error("compatibility precondition: {0}")]
    PreconditionViolation(String),
    #[error("malformed collection: {0}")]
    Malformed(String),
}

impl RectangleCollection {
    pub fn new(stage: usize, rects: Vec<Rectangle>, parents: BTreeMap<u32, u32>) -> Self {
        RectangleCollection {
            stage,
            rects,
            parents,
        }
    }

    /// Stage with a single unlinked rectangle.
    pub fn single(stage: usize, shape: TorusBox) -> Self {
        RectangleCollection {
            stage,
            rects: vec![Rectangle { id: 0, shape }],
            parents: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: u32) -> Option<&Rectangle> {
        self.rects.iter().find(|r| r.id == id)
    }

    /// Union of all member boxes.
    pub fn union(&self) -> BoxSet {
        BoxSet::from_torus_boxes(self.rects.iter().map(|r| &r.shape))
    }

    /// Largest diameter over member boxes (empty collections are rejected
    /// elsewhere; this returns zero for them).
    pub fn sup_diameter(&self) -> crate::exactnum::AlgebraicScalar {
        let mut best = crate::exactnum::AlgebraicScalar::zero();
        for r in &self.rects {
            best = crate::exactnum::AlgebraicScalar::max(&best, &r.shape.diameter());
        }
        best
    }

    /// Structural soundness: unique ids, pairwise disjoint boxes, and (given
    /// the previous stage) a parent link for every rectangle placing it in the
    /// parent's interior.
    pub fn validate(&self, prev: Option<&RectangleCollection>) -> Result<(), RectError> {
        if self.rects.is_empty() {
            return Err(RectError::Malformed(format!(
                "stage {} has no rectangles",
                self.stage
            )));
        }
        for (i, a) in self.rects.iter().enumerate() {
            for b in &self.rects[i + 1..] {
                if a.id == b.id {
                    return Err(RectError::Malformed(format!(
                        "stage {} repeats id {}",
                        self.stage, a.id
                    )));
                }
                if !a.shape.is_disjoint(&b.shape) {
                    return Err(RectError::Malformed(format!(
                        "stage {}: rects {} and {} overlap",
                        self.stage, a.id, b.id
                    )));
                }
            }
        }
        if let Some(prev) = prev {
            for r in &self.rects {
                let pid = self.parents.get(&r.id).ok_or_else(|| {
                    RectError::Malformed(format!(
                        "stage {}: rect {} has no parent link",
                        self.stage, r.id
                    ))
                })?;
                let parent = prev.get(*pid).ok_or_else(|| {
                    RectError::Malformed(format!(
                        "stage {}: rect {} links to missing parent {}",
                        self.stage, r.id, pid
                    ))
                })?;
                if r.shape.relation(&parent.shape) != BoxRelation::AInInteriorOfB {
                    return Err(RectError::Malformed(format!(
                        "stage {}: rect {} is not interior to parent {}",
                        self.stage, r.id, pid
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One box of an iterate family together with every `(rect id, k)` pair that
/// produces it.  Distinct vertices have disjoint boxes.
#[derive(Clone, Debug)]
pub struct IterateVertex {
    pub shape: TorusBox,
    pub labels: Vec<(u32, i64)>,
}

impl IterateVertex {
    /// Ids appearing with `k = 0`, i.e. the stage rectangles this box IS.
    pub fn base_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels
            .iter()
            .filter(|(_, k)| *k == 0)
            .map(|(id, _)| *id)
    }
}

/// The translates `R^k(X)` for `|k| <= p`, `X` in a stage collection, merged
/// by exact box equality.
#[derive(Clone, Debug)]
pub struct IterateFamily {
    pub stage: usize,
    pub p: i64,
    pub vertices: Vec<IterateVertex>,
}

impl IterateFamily {
    pub fn find_box(&self, b: &TorusBox) -> Option<usize> {
        self.vertices.iter().position(|v| v.shape == *b)
    }

    pub fn union(&self) -> BoxSet {
        BoxSet::from_torus_boxes(self.vertices.iter().map(|v| &v.shape))
    }
}

/// Translates a stage collection through `|k| <= p` and checks that the
/// resulting boxes are pairwise equal or disjoint.
pub fn build_iterates(
    coll: &RectangleCollection,
    r: &Translation,
    p: i64,
) -> Result<IterateFamily, RectError> {
    assert!(p >= 0, "iterate range must be nonnegative");
    let mut vertices: Vec<IterateVertex> = Vec::new();
    for rect in &coll.rects {
        for k in -p..=p {
            let image = rect.shape.translate(r, k);
            let mut merged = false;
            for v in vertices.iter_mut() {
                match image.relation(&v.shape) {
                    BoxRelation::Disjoint => {}
                    BoxRelation::Equal => {
                        v.labels.push((rect.id, k));
                        merged = true;
                        break;
                    }
                    _ => {
                        let (b, l) = v.labels[0];
                        return Err(RectError::IterabilityViolation {
                            p,
                            a: rect.id,
                            k,
                            b,
                            l,
                        });
                    }
                }
            }
            if !merged {
                vertices.push(IterateVertex {
                    shape: image,
                    labels: vec![(rect.id, k)],
                });
            }
        }
    }
    Ok(IterateFamily {
        stage: coll.stage,
        p,
        vertices,
    })
}

/// Transition graph on an iterate family: edge `v -> w` when the box of `w`
/// is the image of the box of `v` under one translation step.  Components are
/// stored as chains ordered by the translation.
#[derive(Clone, Debug)]
pub struct TransitionGraph {
    pub family: IterateFamily,
    pub succ: Vec<Option<usize>>,
    pub pred: Vec<Option<usize>>,
    /// Each component as the ordered vertex chain from its entry vertex.
    pub components: Vec<Vec<usize>>,
}

impl TransitionGraph {
    pub fn component_of(&self, vertex: usize) -> Option<&Vec<usize>> {
        self.components.iter().find(|c| c.contains(&vertex))
    }
}

/// Builds the transition graph on the `|k| <= n` family of a stage.
pub fn build_graph(
    coll: &RectangleCollection,
    r: &Translation,
    n: i64,
) -> Result<TransitionGraph, RectError> {
    let family = build_iterates(coll, r, n)?;
    build_graph_on(family, r, n)
}

fn build_graph_on(
    family: IterateFamily,
    r: &Translation,
    n: i64,
) -> Result<TransitionGraph, RectError> {
    let m = family.vertices.len();
    let mut succ = vec![None; m];
    let mut pred = vec![None; m];
    for i in 0..m {
        let image = family.vertices[i].shape.translate(r, 1);
        if let Some(j) = family.find_box(&image) {
            succ[i] = Some(j);
            // two sources for one target would force equal preimage boxes
            debug_assert!(pred[j].is_none());
            pred[j] = Some(i);
        }
    }
    let mut components = Vec::new();
    let mut seen = vec![false; m];
    for start in 0..m {
        if seen[start] || pred[start].is_some() {
            continue;
        }
        let mut chain = vec![start];
        seen[start] = true;
        let mut cur = start;
        while let Some(next) = succ[cur] {
            if seen[next] {
                let (rect, _) = family.vertices[next].labels[0];
                return Err(RectError::CycleDetected {
                    n,
                    rect,
                    len: chain.len(),
                });
            }
            chain.push(next);
            seen[next] = true;
            cur = next;
        }
        components.push(chain);
    }
    // a vertex left unseen sits on a pure cycle with no entry point
    if let Some(v) = seen.iter().position(|s| !s) {
        let (rect, _) = family.vertices[v].labels[0];
        return Err(RectError::CycleDetected { n, rect, len: m });
    }
    Ok(TransitionGraph {
        family,
        succ,
        pred,
        components,
    })
}

/// Result of the two-route compatibility test.  `definition_holds` evaluates
/// the direct statement (the fine union is inside the coarse union and every
/// return of it into the coarse union within `2p+1` steps lands back in the
/// fine union); `reformulation_holds` evaluates the equivalent identity
/// `F^{p+1} ∩ R^k(E) = R^k(F)` for `|k| <= p`, with `F^{p+1}` the union of
/// the fine family at range `p+1`.  The two routes are computed independently
/// and must agree.
#[derive(Clone, Debug)]
pub struct CompatibilityOutcome {
    pub definition_holds: bool,
    pub definition_witness: String,
    pub reformulation_holds: bool,
    pub reformulation_witness: String,
}

impl CompatibilityOutcome {
    pub fn agree(&self) -> bool {
        self.definition_holds == self.reformulation_holds
    }

    pub fn holds(&self) -> bool {
        self.definition_holds && self.reformulation_holds
    }
}

pub(crate) fn subset(a: &BoxSet, b: &BoxSet) -> bool {
    a.subtract(b).is_empty()
}

pub(crate) fn sets_equal(a: &BoxSet, b: &BoxSet) -> bool {
    subset(a, b) && subset(b, a)
}

/// Checks whether `fine` is compatible with `coarse` for `p` iterates, by the
/// direct definition and by the reformulation, reporting both verdicts.
///
/// Preconditions (checked, reported as [`RectError::PreconditionViolation`]):
/// the coarse stage must be `p`-iterable and the fine stage `(p+1)`-iterable.
pub fn check_compatibility(
    fine: &RectangleCollection,
    coarse: &RectangleCollection,
    r: &Translation,
    p: i64,
) -> Result<CompatibilityOutcome, RectError> {
    build_iterates(coarse, r, p).map_err(|e| {
        RectError::PreconditionViolation(format!("coarse stage not {p}-iterable: {e}"))
    })?;
    let fine_family = build_iterates(fine, r, p + 1).map_err(|e| {
        RectError::PreconditionViolation(format!("fine stage not {}-iterable: {e}", p + 1))
    })?;

    let f0 = fine.union();
    let e0 = coarse.union();

    let mut definition_holds = true;
    let mut definition_witness = String::new();
    if !subset(&f0, &e0) {
        definition_holds = false;
        definition_witness = "fine union not contained in coarse union".into();
    } else {
        for k in -(2 * p + 1)..=(2 * p + 1) {
            let escaped = f0.translate(r, k).intersect(&e0).subtract(&f0);
            if !escaped.is_empty() {
                definition_holds = false;
                definition_witness =
                    format!("R^{k}(fine union) re-enters the coarse union outside the fine union");
                break;
            }
        }
    }

    let fp1 = fine_family.union();
    let mut reformulation_holds = true;
    let mut reformulation_witness = String::new();
    for k in -p..=p {
        let lhs = fp1.intersect(&e0.translate(r, k));
        let rhs = f0.translate(r, k);
        if !sets_equal(&lhs, &rhs) {
            reformulation_holds = false;
            reformulation_witness = format!(
                "family union meets R^{k}(coarse union) in a set different from R^{k}(fine union)"
            );
            break;
        }
    }

    Ok(CompatibilityOutcome {
        definition_holds,
        definition_witness,
        reformulation_holds,
        reformulation_witness,
    })
}

/// Refinement of `coarse_family` by `fine_family`: every coarse box contains
/// a fine box, and every fine box is disjoint from or interior to every
/// coarse box.
fn check_refinement(fine: &IterateFamily, coarse: &IterateFamily) -> (bool, String) {
    for cv in &coarse.vertices {
        let covered = fine.vertices.iter().any(|fv| {
            matches!(
                fv.shape.relation(&cv.shape),
                BoxRelation::AInInteriorOfB | BoxRelation::Equal
            )
        });
        if !covered {
            return (
                false,
                format!(
                    "coarse box labelled {:?} contains no fine box",
                    cv.labels[0]
                ),
            );
        }
    }
    for fv in &fine.vertices {
        for cv in &coarse.vertices {
            match fv.shape.relation(&cv.shape) {
                BoxRelation::Disjoint | BoxRelation::AInInteriorOfB => {}
                rel => {
                    return (
                        false,
                        format!(
                            "fine box {:?} vs coarse box {:?}: relation {:?}",
                            fv.labels[0], cv.labels[0], rel
                        ),
                    );
                }
            }
        }
    }
    (true, String::new())
}

/// Per-component structural facts for a stage's transition graph.
struct ChainStats {
    components: usize,
    min_len: usize,
    meets_long_bound: usize,
}

fn chain_stats(graph: &TransitionGraph) -> ChainStats {
    let n = graph.family.p as usize;
    let mut min_len = if graph.components.is_empty() { 0 } else { usize::MAX };
    let mut meets = 0;
    for c in &graph.components {
        min_len = min_len.min(c.len());
        if c.len() >= 2 * n + 2 {
            meets += 1;
        }
    }
    ChainStats {
        components: graph.components.len(),
        min_len,
        meets_long_bound: meets,
    }
}

/// Verifies the full hypothesis suite on a sequence of stage collections:
///
/// * every stage is well formed (disjoint boxes, interior parent links);
/// * stage `n` is `(n+1)`-iterable and its range-`n` transition graph is a
///   disjoint union of chains, each with at least `2n+1` vertices;
/// * the range-`(n+1)` family of stage `n` refines the range-`(m+1)` family
///   of every earlier stage `m`;
/// * stage `n+1` is compatible with stage `n` for `n+1` iterates, by both
///   routes, and the routes agree;
/// * every stage-`n` rectangle contains at least two stage-`(n+1)`
///   rectangles;
/// * the largest box diameter strictly decreases along the stages;
/// * the union of the range-`(n+1)` family of stage `n+1`, intersected with
///   the stage-`n` union, equals the stage-`(n+1)` union exactly;
/// * each component of the range-`n` graph of stage `n+1` maps by box
///   inclusion onto a full component of the range-`n` graph of stage `n`;
/// * within each component of the range-`(n+1)` graph of stage `n+1`, the
///   entry and exit vertices lie outside the range-`n` family, and
///   consecutive embedded range-`n` chains are separated by one or two
///   vertices.
pub fn check_hypotheses_a(stages: &[RectangleCollection], r: &Translation) -> Report {
    let mut report = Report::new();
    if stages.is_empty() {
        report.push(CheckItem::fail("stages nonempty", "no stages supplied"));
        return report;
    }

    // well-formedness and per-stage iterate families
    let mut families_np1: Vec<Option<IterateFamily>> = Vec::new();
    for (n, coll) in stages.iter().enumerate() {
        let prev = if n == 0 { None } else { Some(&stages[n - 1]) };
        match coll.validate(prev) {
            Ok(()) => report.push(CheckItem::pass(format!("stage {n} well-formed"), "")),
            Err(e) => {
                report.push(CheckItem::fail(
                    format!("stage {n} well-formed"),
                    e.to_string(),
                ));
            }
        }
        if coll.stage != n {
            report.push(CheckItem::fail(
                format!("stage {n} index"),
                format!("collection labels itself stage {}", coll.stage),
            ));
        }
        match build_iterates(coll, r, n as i64 + 1) {
            Ok(fam) => {
                report.push(CheckItem::pass(
                    format!("A1.a stage {n}: {}-iterable", n + 1),
                    format!("{} boxes in family", fam.vertices.len()),
                ));
                families_np1.push(Some(fam));
            }
            Err(e) => {
                report.push(CheckItem::fail(
                    format!("A1.a stage {n}: {}-iterable", n + 1),
                    e.to_string(),
                ));
                families_np1.push(None);
            }
        }
    }

    // graphs at range n: acyclic chains of the required length
    let mut graphs_n: Vec<Option<TransitionGraph>> = Vec::new();
    for (n, coll) in stages.iter().enumerate() {
        match build_graph(coll, r, n as i64) {
            Ok(g) => {
                let stats = chain_stats(&g);
                let need = 2 * n + 1;
                report.push(CheckItem::of(
                    format!("A1.a stage {n}: graph is chains of >= {need} boxes"),
                    stats.min_len >= need,
                    format!(
                        "{} components, shortest {}, {} meeting the merged-chain bound {}",
                        stats.components,
                        stats.min_len,
                        stats.meets_long_bound,
                        2 * n + 2
                    ),
                ));
                graphs_n.push(Some(g));
            }
            Err(e) => {
                report.push(CheckItem::fail(
                    format!("A1.a stage {n}: graph acyclic"),
                    e.to_string(),
                ));
                graphs_n.push(None);
            }
        }
    }

    // A1.b refinement of earlier families
    for n in 1..stages.len() {
        let Some(fine) = families_np1[n].as_ref() else {
            continue;
        };
        for m in 0..n {
            let Some(coarse) = families_np1[m].as_ref() else {
                continue;
            };
            let (ok, witness) = check_refinement(fine, coarse);
            report.push(CheckItem::of(
                format!("A1.b: stage {n} family refines stage {m} family"),
                ok,
                witness,
            ));
        }
    }

    // A1.c compatibility of consecutive stages, both routes
    for n in 0..stages.len().saturating_sub(1) {
        let name = format!("A1.c: stage {} compatible with stage {n}", n + 1);
        match check_compatibility(&stages[n + 1], &stages[n], r, n as i64 + 1) {
            Ok(outcome) => {
                report.push(CheckItem::of(
                    name.clone(),
                    outcome.holds(),
                    if outcome.holds() {
                        String::new()
                    } else {
                        format!(
                            "definition: {}; reformulation: {}",
                            outcome.definition_witness, outcome.reformulation_witness
                        )
                    },
                ));
                report.push(CheckItem::of(
                    format!("{name} (routes agree)"),
                    outcome.agree(),
                    format!(
                        "definition {}, reformulation {}",
                        outcome.definition_holds, outcome.reformulation_holds
                    ),
                ));
            }
            Err(e) => report.push(CheckItem::fail(name, e.to_string())),
        }
    }

    // A2: at least two children per rectangle
    for n in 0..stages.len().saturating_sub(1) {
        let child = &stages[n + 1];
        let mut worst: Option<(u32, usize)> = None;
        for rect in &stages[n].rects {
            let count = child
                .parents
                .iter()
                .filter(|(_, pid)| **pid == rect.id)
                .count();
            if worst.map_or(true, |(_, c)| count < c) {
                worst = Some((rect.id, count));
            }
        }
        let (id, count) = worst.unwrap_or((0, 0));
        report.push(CheckItem::of(
            format!("A2: every stage-{n} rect has >= 2 children"),
            count >= 2,
            format!("fewest children: rect {id} with {count}"),
        ));
    }

    // A3 surrogate: sup diameter strictly decreasing
    let diams: Vec<_> = stages.iter().map(|c| c.sup_diameter()).collect();
    let decreasing = diams.windows(2).all(|w| w[1] < w[0]);
    report.push(CheckItem::of(
        "A3: sup diameter strictly decreasing",
        decreasing,
        diams
            .iter()
            .map(|d| format!("{:.6}", d.to_f64()))
            .collect::<Vec<_>>()
            .join(" > "),
    ));

    // consecutive-stage identity: family(n+1, p=n+1) ∩ union(n) = union(n+1)
    for n in 0..stages.len().saturating_sub(1) {
        let name = format!(
            "stage {} family meets stage {n} union exactly in stage {} union",
            n + 1,
            n + 1
        );
        match build_iterates(&stages[n + 1], r, n as i64 + 1) {
            Ok(fam) => {
                let lhs = fam.union().intersect(&stages[n].union());
                let ok = sets_equal(&lhs, &stages[n + 1].union());
                report.push(CheckItem::of(name, ok, ""));
            }
            Err(e) => report.push(CheckItem::fail(name, e.to_string())),
        }
    }

    // graph embedding between consecutive stages
    for n in 0..stages.len().saturating_sub(1) {
        let Some(parent_graph) = graphs_n[n].as_ref() else {
            continue;
        };
        let child_graph = match build_graph(&stages[n + 1], r, n as i64) {
            Ok(g) => g,
            Err(e) => {
                report.push(CheckItem::fail(
                    format!("stage {} range-{n} graph", n + 1),
                    e.to_string(),
                ));
                continue;
            }
        };
        report.push(check_component_embedding(&child_graph, parent_graph, n));
        if let Ok(wide) = build_graph(&stages[n + 1], r, n as i64 + 1) {
            report.merge(check_chain_interleaving(&wide, &child_graph, n));
        }
    }

    report
}

/// Each component of the child graph must map, vertex by vertex through box
/// inclusion, onto exactly one full component of the parent graph.
fn check_component_embedding(
    child: &TransitionGraph,
    parent: &TransitionGraph,
    n: usize,
) -> CheckItem {
    let name = format!("stage {} range-{n} chains embed onto stage {n} chains", n + 1);
    for comp in &child.components {
        let mut mapped = Vec::new();
        for &v in comp {
            let b = &child.family.vertices[v].shape;
            let Some(c) = parent.family.vertices.iter().position(|pv| {
                matches!(
                    b.relation(&pv.shape),
                    BoxRelation::AInInteriorOfB | BoxRelation::Equal
                )
            }) else {
                return CheckItem::fail(name, format!("child box {:?} has no container", v));
            };
            mapped.push(c);
        }
        // injective, edge-preserving, onto a full parent component
        for w in mapped.windows(2) {
            if parent.succ[w[0]] != Some(w[1]) {
                return CheckItem::fail(
                    name,
                    "consecutive child boxes map to non-consecutive containers".to_string(),
                );
            }
        }
        let mut sorted = mapped.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != mapped.len() {
            return CheckItem::fail(name, "container map is not injective".to_string());
        }
        let Some(pc) = parent.component_of(mapped[0]) else {
            return CheckItem::fail(name, "container outside every parent chain".to_string());
        };
        if pc.len() != mapped.len() {
            return CheckItem::fail(
                name,
                format!(
                    "child chain of {} boxes maps into parent chain of {} boxes",
                    mapped.len(),
                    pc.len()
                ),
            );
        }
    }
    CheckItem::pass(name, format!("{} chains", child.components.len()))
}

/// Within each chain of the wide graph (range `n+1`), the embedded chains of
/// the narrow graph (range `n`) must exclude the entry and exit vertices and
/// be separated by exactly one or two vertices.
fn check_chain_interleaving(
    wide: &TransitionGraph,
    narrow: &TransitionGraph,
    n: usize,
) -> Report {
    let mut report = Report::new();
    let mut ends_ok = true;
    let mut gaps_ok = true;
    let mut runs_total = 0usize;
    let mut gap_witness = String::new();
    for comp in &wide.components {
        let marks: Vec<bool> = comp
            .iter()
            .map(|&v| {
                narrow
                    .family
                    .find_box(&wide.family.vertices[v].shape)
                    .is_some()
            })
            .collect();
        if *marks.first().unwrap_or(&false) || *marks.last().unwrap_or(&false) {
            ends_ok = false;
        }
        // runs of embedded vertices and the gaps between consecutive runs
        let mut i = 0;
        let mut prev_run_end: Option<usize> = None;
        while i < marks.len() {
            if marks[i] {
                let start = i;
                while i < marks.len() && marks[i] {
                    i += 1;
                }
                runs_total += 1;
                if let Some(end) = prev_run_end {
                    let gap = start - end - 1;
                    if gap != 1 && gap != 2 {
                        gaps_ok = false;
                        gap_witness = format!("gap of {gap} between embedded chains");
                    }
                }
                prev_run_end = Some(i - 1);
            } else {
                i += 1;
            }
        }
    }
    report.push(CheckItem::of(
        format!(
            "stage {} range-{} chains start and end outside the range-{n} family",
            n + 1,
            n + 1
        ),
        ends_ok,
        "",
    ));
    report.push(CheckItem::of(
        format!(
            "stage {} embedded range-{n} chains separated by 1 or 2 boxes",
            n + 1
        ),
        gaps_ok,
        if gaps_ok {
            format!("{runs_total} embedded chains")
        } else {
            gap_witness
        },
    ));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exactnum::{rat, AlgebraicScalar, TorusBox};

    fn translation() -> Translation {
        Translation::default_golden_sqrt2()
    }

    fn base_box() -> TorusBox {
        TorusBox::from_rationals((0, 1), (0, 1), (1, 10), (1, 10))
    }

    /// Three-stage scenario with a genuine chain merge: the base box first
    /// returns at step 5, stage 1 holds `C` and `R^5(C)`, and stage 2 puts
    /// two aligned child pairs in each.  At range 2 the two child chains
    /// merge into a single 10-box chain.
    fn rich_stages(r: &Translation) -> Vec<RectangleCollection> {
        let stage0 = RectangleCollection::single(0, base_box());

        let c1 = TorusBox::from_rationals((1, 1000), (1, 100), (1, 1000), (1, 100));
        let c2 = c1.translate(r, 5);
        let stage1 = RectangleCollection::new(
            1,
            vec![
                Rectangle { id: 0, shape: c1.clone() },
                Rectangle { id: 1, shape: c2.clone() },
            ],
            [(0, 0), (1, 0)].into_iter().collect(),
        );

        let ga = TorusBox::from_rationals((11, 10000), (101, 10000), (1, 10000), (1, 10000));
        let gb = TorusBox::from_rationals((13, 10000), (101, 10000), (1, 10000), (1, 10000));
        let stage2 = RectangleCollection::new(
            2,
            vec![
                Rectangle { id: 0, shape: ga.clone() },
                Rectangle { id: 1, shape: gb.clone() },
                Rectangle { id: 2, shape: ga.translate(r, 5) },
                Rectangle { id: 3, shape: gb.translate(r, 5) },
            ],
            [(0, 0), (1, 0), (2, 1), (3, 1)].into_iter().collect(),
        );

        vec![stage0, stage1, stage2]
    }

    #[test]
    fn iterate_family_distinct_translates() {
        let r = translation();
        let coll = RectangleCollection::single(0, base_box());
        let fam = build_iterates(&coll, &r, 2).unwrap();
        assert_eq!(fam.vertices.len(), 5);
        for v in &fam.vertices {
            assert_eq!(v.labels.len(), 1);
        }
        let base = fam
            .vertices
            .iter()
            .find(|v| v.labels[0].1 == 0)
            .unwrap();
        assert_eq!(base.shape, base_box());
    }

    #[test]
    fn iterate_family_merges_aligned_translates() {
        let r = translation();
        let b = base_box();
        let coll = RectangleCollection::new(
            0,
            vec![
                Rectangle { id: 0, shape: b.clone() },
                Rectangle { id: 1, shape: b.translate(&r, 2) },
            ],
            BTreeMap::new(),
        );
        let fam = build_iterates(&coll, &r, 1).unwrap();
        // translates -1..1 of each rect; R(rect 0) = R^{-1}(rect 1)
        assert_eq!(fam.vertices.len(), 5);
        let shared = b.translate(&r, 1);
        let v = &fam.vertices[fam.find_box(&shared).unwrap()];
        assert_eq!(v.labels.len(), 2);
    }

    #[test]
    fn iterability_violation_reported() {
        let r = translation();
        let shifted = base_box().translate(&r, 1);
        let nudged = TorusBox::new(
            [
                shifted.lo[0].clone() + AlgebraicScalar::from_ratio(1, 1000),
                shifted.lo[1].clone(),
            ],
            shifted.len.clone(),
        );
        let coll = RectangleCollection::new(
            0,
            vec![
                Rectangle { id: 0, shape: base_box() },
                Rectangle { id: 1, shape: nudged },
            ],
            BTreeMap::new(),
        );
        match build_iterates(&coll, &r, 1) {
            Err(RectError::IterabilityViolation { .. }) => {}
            other => panic!("expected iterability violation, got {other:?}"),
        }
    }

    #[test]
    fn graph_chains_and_merge() {
        let r = translation();
        let stages = rich_stages(&r);

        let g1 = build_graph(&stages[1], &r, 1).unwrap();
        assert_eq!(g1.components.len(), 2);
        assert!(g1.components.iter().all(|c| c.len() == 3));

        // at range 2 the two stage-2 child chains merge across the step-5 gap
        let g2 = build_graph(&stages[2], &r, 2).unwrap();
        assert_eq!(g2.components.len(), 2);
        assert!(g2.components.iter().all(|c| c.len() == 10));

        // chain order follows the translation
        for comp in &g2.components {
            for w in comp.windows(2) {
                let img = g2.family.vertices[w[0]].shape.translate(&r, 1);
                assert_eq!(img, g2.family.vertices[w[1]].shape);
            }
        }
    }

    #[test]
    fn compatibility_pass_and_fail_routes_agree() {
        let r = translation();
        let stages = rich_stages(&r);

        let ok = check_compatibility(&stages[2], &stages[1], &r, 2).unwrap();
        assert!(ok.holds(), "{ok:?}");
        assert!(ok.agree());

        // break alignment: children of C2 are no longer the step-5 images of
        // the children of C1, so a return re-enters outside the fine union
        let mut broken = stages[2].clone();
        let shift = AlgebraicScalar::from_ratio(3, 10000);
        for rect in broken.rects.iter_mut().filter(|rc| rc.id >= 2) {
            rect.shape = TorusBox::new(
                [
                    rect.shape.lo[0].clone() + shift.clone(),
                    rect.shape.lo[1].clone(),
                ],
                rect.shape.len.clone(),
            );
        }
        let bad = check_compatibility(&broken, &stages[1], &r, 2).unwrap();
        assert!(!bad.definition_holds);
        assert!(!bad.reformulation_holds);
        assert!(bad.agree());
    }

    #[test]
    fn compatibility_rejects_noniterable_inputs() {
        let r = translation();
        let stages = rich_stages(&r);
        // a fine stage that is not 3-iterable: C1-child plus a box meeting
        // its step-5 image without equality
        let ga = stages[2].rects[0].shape.clone();
        let off = TorusBox::new(
            [
                ga.translate(&r, 5).lo[0].clone() + AlgebraicScalar::from_ratio(1, 50000),
                ga.translate(&r, 5).lo[1].clone(),
            ],
            ga.len.clone(),
        );
        let fine = RectangleCollection::new(
            2,
            vec![
                Rectangle { id: 0, shape: ga },
                Rectangle { id: 1, shape: off },
            ],
            [(0, 0), (1, 1)].into_iter().collect(),
        );
        match check_compatibility(&fine, &stages[1], &r, 2) {
            Err(RectError::PreconditionViolation(_)) => {}
            other => panic!("expected precondition violation, got {other:?}"),
        }
    }

    #[test]
    fn hypotheses_suite_passes_on_rich_scenario() {
        let r = translation();
        let stages = rich_stages(&r);
        let report = check_hypotheses_a(&stages, &r);
        assert!(report.all_pass(), "failures: {:?}", report.failures());

        // the merged stage-2 chains meet the two-base length bound
        let item = report
            .items
            .iter()
            .find(|i| i.name.contains("stage 2: graph is chains"))
            .unwrap();
        assert!(item.details.contains("2 meeting the merged-chain bound"));
    }

    #[test]
    fn hypotheses_suite_flags_missing_children() {
        let r = translation();
        let mut stages = rich_stages(&r);
        // drop one child of C2 and check A2 flags the right rectangle
        stages[2].rects.retain(|rc| rc.id != 3);
        stages[2].parents.remove(&3);
        let report = check_hypotheses_a(&stages, &r);
        let a2 = report
            .items
            .iter()
            .find(|i| i.name == "A2: every stage-1 rect has >= 2 children")
            .unwrap();
        assert!(!a2.pass);
        assert!(a2.details.contains("rect 1 with 1"));
    }

    #[test]
    fn hypotheses_suite_flags_boundary_touch() {
        let r = translation();
        let mut stages = rich_stages(&r);
        // move a grandchild so it touches its parent's boundary: the stage is
        // no longer well-formed and refinement fails
        stages[2].rects[0].shape = TorusBox::from_rationals(
            (1, 1000), // parent's lower x edge
            (101, 10000),
            (1, 10000),
            (1, 10000),
        );
        let report = check_hypotheses_a(&stages, &r);
        assert!(!report.all_pass());
        let wf = report
            .items
            .iter()
            .find(|i| i.name == "stage 2 well-formed")
            .unwrap();
        assert!(!wf.pass);
        let refine = report
            .items
            .iter()
            .find(|i| i.name == "A1.b: stage 2 family refines stage 1 family")
            .unwrap();
        assert!(!refine.pass);
    }

    #[test]
    fn interleaving_gap_is_two_in_rich_scenario() {
        let r = translation();
        let stages = rich_stages(&r);
        let report = check_hypotheses_a(&stages, &r);
        let gaps = report
            .items
            .iter()
            .find(|i| i.name.contains("embedded range-1 chains separated"))
            .unwrap();
        assert!(gaps.pass, "{gaps:?}");
        assert!(gaps.details.contains("4 embedded chains"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// The direct compatibility statement and its reformulation are
        /// evaluated by structurally different set computations; whenever the
        /// preconditions hold they must return the same verdict.
        #[test]
        fn compatibility_routes_always_agree(
            xs in proptest::collection::vec((1u32..96, 1u32..96, 1u32..4, 1u32..4), 1..3),
            aligned in proptest::bool::ANY,
        ) {
            let r = translation();
            let coarse = RectangleCollection::single(0, base_box());
            let mut rects = Vec::new();
            let mut last_hi = 0u32;
            for (i, (x, y, w, h)) in xs.iter().enumerate() {
                // disjoint x-slabs inside the base box, sides in units of 1/1000
                let lo_x = last_hi + x % 20 + 1;
                let hi_x = lo_x + w;
                if hi_x >= 99 {
                    break;
                }
                last_hi = hi_x;
                rects.push(Rectangle {
                    id: i as u32,
                    shape: TorusBox::from_rationals(
                        (lo_x as i64, 1000),
                        (*y as i64, 1000),
                        (*w as i64, 1000),
                        (*h as i64, 1000),
                    ),
                });
            }
            proptest::prop_assume!(!rects.is_empty());
            if aligned {
                // add the step-5 image of the first box: exercises returns
                let img = rects[0].shape.translate(&r, 5);
                let id = rects.len() as u32;
                rects.push(Rectangle { id, shape: img });
            }
            let fine = RectangleCollection::new(1, rects, BTreeMap::new());
            // fine stage needs no parent links for this check
            if let Ok(outcome) = check_compatibility(&fine, &coarse, &r, 2) {
                proptest::prop_assert!(
                    outcome.agree(),
                    "routes disagree: {outcome:?}"
                );
            }
        }
    }

    #[test]
    fn validate_rejects_overlap_and_bad_links() {
        let r = translation();
        let stages = rich_stages(&r);

        let mut overlapping = stages[1].clone();
        overlapping.rects[1].shape = TorusBox::from_rationals((1, 1000), (15, 1000), (1, 1000), (1, 100));
        assert!(matches!(
            overlapping.validate(Some(&stages[0])),
            Err(RectError::Malformed(_))
        ));

        let mut unlinked = stages[1].clone();
        unlinked.parents.remove(&1);
        assert!(matches!(
            unlinked.validate(Some(&stages[0])),
            Err(RectError::Malformed(_))
        ));
    }

    #[test]
    fn sup_diameter_uses_longest_side() {
        let coll = RectangleCollection::single(
            0,
            TorusBox::from_rationals((0, 1), (0, 1), (1, 10), (1, 4)),
        );
        assert_eq!(coll.sup_diameter(), AlgebraicScalar::from_rational(rat(1, 4)));
    }
}
