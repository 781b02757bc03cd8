//! Finite-stage, exactly verified Denjoy–Rees construction on the 2-torus.
//!
//! Given a minimal translation R of T² (exact arithmetic over Q(√2,√5)) and a
//! fibered model map h over a Cantor set, this crate builds the stage-k
//! approximations Φ_k and f_k = Φ_k⁻¹ ∘ R ∘ Φ_k of a homeomorphism whose
//! return dynamics on an embedded product Cantor set realizes h, and
//! machine-checks every hypothesis the convergence and isomorphism arguments
//! rest on.

pub mod blowup;
pub mod cantor;
pub mod exactnum;
pub mod homeo;
pub mod rectangles;
pub mod report;
