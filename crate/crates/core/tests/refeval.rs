use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reftrack::bbox::BBox;
use reftrack::refeval::{brute_force_hota, hota, match_frame, EvalInput, FrameBoxes, HotaResult};

/// Small random instance: up to 4 ids per side, up to 6 frames; predictions
/// are jittered copies of ground truth plus occasional strays.
pub fn random_instance(rng: &mut ChaCha8Rng) -> EvalInput {
    let frames = rng.random_range(1..=6);
    let ng = rng.random_range(0..=4u32);
    let np = rng.random_range(0..=4u32);
    let mut gt: FrameBoxes = vec![Vec::new(); frames];
    let mut pred: FrameBoxes = vec![Vec::new(); frames];
    let base: Vec<BBox> = (0..ng.max(np))
        .map(|_| {
            BBox::new(
                rng.random_range(0.0..40.0),
                rng.random_range(0.0..40.0),
                rng.random_range(5.0..15.0),
                rng.random_range(5.0..15.0),
            )
        })
        .collect();
    for t in 0..frames {
        for g in 0..ng {
            if rng.random_bool(0.8) {
                let b = base[g as usize];
                gt[t].push((g + 1, BBox::new(b.x + t as f64, b.y, b.w, b.h)));
            }
        }
        for p in 0..np {
            if rng.random_bool(0.75) {
                // mostly follow some gt object, sometimes swap targets
                let src = if rng.random_bool(0.8) { p as usize } else { rng.random_range(0..base.len()) };
                let b = base[src];
                let j = |r: &mut ChaCha8Rng| r.random_range(-3.0..3.0);
                pred[t].push((
                    10 + p,
                    BBox::new(b.x + t as f64 + j(rng), b.y + j(rng), b.w + j(rng), b.h + j(rng)),
                ));
            }
        }
    }
    EvalInput::new(gt, pred)
}

fn close(a: &HotaResult, b: &HotaResult, tol: f64) -> bool {
    a.per_alpha.len() == b.per_alpha.len()
        && a.per_alpha.iter().zip(&b.per_alpha).all(|(x, y)| {
            (x.tp, x.fn_, x.fp) == (y.tp, y.fn_, y.fp)
                && [
                    (x.hota, y.hota),
                    (x.det_a, y.det_a),
                    (x.ass_a, y.ass_a),
                    (x.det_re, y.det_re),
                    (x.det_pr, y.det_pr),
                    (x.ass_re, y.ass_re),
                    (x.ass_pr, y.ass_pr),
                ]
                .iter()
                .all(|(p, q)| (p - q).abs() <= tol)
        })
}

#[test]
fn agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..200 {
        let input = random_instance(&mut rng);
        let fast = hota(&input);
        let slow = brute_force_hota(&input).unwrap();
        assert!(close(&fast, &slow, 1e-9), "instance {k}: {input:?}");
    }
}

#[test]
fn brute_force_rejects_large_instances() {
    let gt = vec![vec![(1, BBox::new(0.0, 0.0, 1.0, 1.0))]; 7];
    assert!(brute_force_hota(&EvalInput::new(gt, Vec::new())).is_err());
}

#[test]
fn crossing_two_by_two() {
    // gt0 overlaps both predictions; gt1 only overlaps pred0
    let gt = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(6.0, 0.0, 10.0, 10.0)];
    let pred = [BBox::new(4.0, 0.0, 10.0, 10.0), BBox::new(-2.0, 0.0, 10.0, 10.0)];
    let assoc = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
    let m = match_frame(&gt, &pred, 0.3, &assoc);
    let iou = |i: usize, j: usize| gt[i].iou(&pred[j]);
    // both pairings are admissible at 0.3? choose by brute force
    let pairings = [[(0, 0), (1, 1)], [(0, 1), (1, 0)]];
    let best = pairings
        .iter()
        .map(|p| {
            let ok: Vec<_> = p.iter().filter(|&&(i, j)| iou(i, j) >= 0.3).copied().collect();
            let s: f64 = ok.iter().map(|&(i, j)| iou(i, j)).sum();
            (ok.len(), s, ok)
        })
        .max_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap())
        .unwrap();
    let mut got = m.matches.clone();
    got.sort();
    assert_eq!(got, best.2);
    assert_eq!(got.len(), 2);
}

#[test]
fn identical_sets_are_all_true_positives() {
    let boxes: Vec<BBox> = (0..4).map(|k| BBox::new(20.0 * k as f64, 0.0, 8.0, 8.0)).collect();
    let assoc = vec![vec![1.0; 4]; 4];
    let m = match_frame(&boxes, &boxes, 0.95, &assoc);
    assert_eq!(m.matches.len(), 4);
    assert!(m.matches.iter().all(|(i, j)| i == j));
}

fn brute_match_size(gt: &[BBox], pred: &[BBox], alpha: f64, assoc: &[Vec<f64>]) -> (usize, f64, f64) {
    fn rec(
        i: usize,
        gt: &[BBox],
        pred: &[BBox],
        alpha: f64,
        assoc: &[Vec<f64>],
        used: &mut Vec<bool>,
        acc: (usize, f64, f64),
        best: &mut (usize, f64, f64),
    ) {
        if i == gt.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        rec(i + 1, gt, pred, alpha, assoc, used, acc, best);
        for j in 0..pred.len() {
            let u = gt[i].iou(&pred[j]);
            if !used[j] && u >= alpha - f64::EPSILON {
                used[j] = true;
                rec(i + 1, gt, pred, alpha, assoc, used, (acc.0 + 1, acc.1 + assoc[i][j], acc.2 + u), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0, 0.0);
    rec(0, gt, pred, alpha, assoc, &mut vec![false; pred.len()], (0, 0.0, 0.0), &mut best);
    best
}

#[test]
fn match_frame_agrees_with_enumeration_up_to_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..500 {
        let n = rng.random_range(0..=5);
        let m = rng.random_range(0..=5);
        let mk = |r: &mut ChaCha8Rng| {
            BBox::new(r.random_range(0.0..20.0), r.random_range(0.0..20.0), r.random_range(4.0..12.0), r.random_range(4.0..12.0))
        };
        let gt: Vec<BBox> = (0..n).map(|_| mk(&mut rng)).collect();
        let pred: Vec<BBox> = (0..m).map(|_| mk(&mut rng)).collect();
        let assoc: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random()).collect()).collect();
        let alpha = rng.random_range(0.05..0.95);
        let got = match_frame(&gt, &pred, alpha, &assoc);
        let sa: f64 = got.matches.iter().map(|&(i, j)| assoc[i][j]).sum();
        let si: f64 = got.matches.iter().map(|&(i, j)| gt[i].iou(&pred[j])).sum();
        let want = brute_match_size(&gt, &pred, alpha, &assoc);
        assert_eq!(got.matches.len(), want.0, "n={n} m={m} alpha={alpha} {got:?}");
        assert!((sa - want.1).abs() < 1e-9 && (si - want.2).abs() < 1e-9);
        assert_eq!(got.matches.len() + got.unmatched_gt.len(), n);
        assert_eq!(got.matches.len() + got.unmatched_pred.len(), m);
    }
}

fn seeded_instance() -> impl Strategy<Value = EvalInput> {
    any::<u64>().prop_map(|s| random_instance(&mut ChaCha8Rng::seed_from_u64(s)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hota_identity_and_bounds(input in seeded_instance()) {
        let r = hota(&input);
        for a in &r.per_alpha {
            prop_assert!((a.hota - (a.det_a * a.ass_a).sqrt()).abs() < 1e-12);
            prop_assert!(a.det_re >= a.det_a && a.det_pr >= a.det_a);
            for v in [a.hota, a.det_a, a.ass_a, a.det_re, a.det_pr, a.ass_re, a.ass_pr] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn relabel_and_reorder_invariance(input in seeded_instance(), shift in 1u32..1000) {
        let base = hota(&input);
        let mut other = input.clone();
        for f in other.pred.iter_mut() {
            for (id, _) in f.iter_mut() {
                *id = 5000 - *id + shift;
            }
            f.reverse();
        }
        for f in other.gt.iter_mut() {
            f.reverse();
        }
        prop_assert!(close(&base, &hota(&other), 1e-12));
    }

    #[test]
    fn dropping_false_positive_track_never_hurts(input in seeded_instance()) {
        let mut with_fp = input.clone();
        for f in with_fp.pred.iter_mut() {
            f.push((999, BBox::new(500.0, 500.0, 10.0, 10.0)));
        }
        prop_assert!(hota(&input).summary.hota >= hota(&with_fp).summary.hota);
    }
}
