use std::time::Instant;

use denjoy_rees::cantor::{build_tower_sequence, TowerSchedule};
use denjoy_rees::exactnum::{TorusBox, Translation};

fn main() {
    let base = TorusBox::from_rationals((0, 1), (0, 1), (1, 10), (1, 10));
    let r = Translation::default_golden_sqrt2();
    let depth: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let sched = TowerSchedule::untrimmed_depth(depth);
    let t0 = Instant::now();
    let towers = build_tower_sequence(&base, &r, &sched).expect("builds");
    eprintln!("total build: {:?}", t0.elapsed());
    for tw in &towers {
        eprintln!(
            "stage {}: levels={} ell={} leg_times={:?} f_n vol={:.3e} lens=({:.4e},{:.4e})",
            tw.n,
            tw.levels.len(),
            tw.ell_n,
            tw.leg_times,
            tw.f_n.volume().to_f64(),
            tw.f_n.len[0].to_f64(),
            tw.f_n.len[1].to_f64(),
        );
    }
    let t1 = Instant::now();
    let derived = denjoy_rees::cantor::derive_collections(&towers, &r, depth)
        .expect("derivation succeeds");
    eprintln!("derive n_max={}: {:?}", depth, t1.elapsed());
    for (coll, eps) in derived.collections.iter().zip(&derived.epsilons) {
        eprintln!("  stage {}: rects={} eps={}", coll.stage, coll.rects.len(), eps);
    }
    eprintln!("{}", derived.report);
}
