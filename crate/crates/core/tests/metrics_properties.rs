//! Metric invariances over randomized tracker outputs: id relabeling,
//! sequence duplication, and agreement with an exhaustive per-frame
//! matcher.

use mqt_core::assoc::oracle::brute_force_assignment;
use mqt_core::metrics::{evaluate, evaluate_with};
use mqt_core::scene::MotRecord;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rec(frame: u32, id: i64, l: f64, t: f64, w: f64, h: f64) -> MotRecord {
    MotRecord {
        frame,
        id,
        bb_left: l,
        bb_top: t,
        bb_width: w,
        bb_height: h,
        conf: 1.0,
        x: -1.0,
        y: -1.0,
        z: -1.0,
    }
}

/// A noisy tracker output over a random ground truth: boxes jitter, some
/// detections drop, ids occasionally swap mid-sequence.
fn random_case(seed: u64) -> (Vec<MotRecord>, Vec<MotRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.gen_range(2..=4);
    let n_frames = rng.gen_range(4..=9);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let mut centers: Vec<(f64, f64)> =
        (0..n_obj).map(|_| (rng.gen_range(20.0..80.0), rng.gen_range(20.0..80.0))).collect();
    for f in 1..=n_frames {
        for (k, c) in centers.iter_mut().enumerate() {
            c.0 += rng.gen_range(-2.0..2.0);
            c.1 += rng.gen_range(-2.0..2.0);
            gt.push(rec(f, k as i64, c.0, c.1, 12.0, 12.0));
            if rng.gen::<f64>() < 0.85 {
                // Occasional identity swap and box jitter.
                let pid = if rng.gen::<f64>() < 0.1 { 100 + k as i64 } else { k as i64 };
                let jx = rng.gen_range(-3.0..3.0);
                let jy = rng.gen_range(-3.0..3.0);
                pred.push(rec(f, pid, c.0 + jx, c.1 + jy, 12.0, 12.0));
            }
        }
        if rng.gen::<f64>() < 0.3 {
            pred.push(rec(f, 999, rng.gen_range(150.0..200.0), 150.0, 10.0, 10.0));
        }
    }
    (gt, pred)
}

#[test]
fn relabeling_prediction_ids_changes_nothing() {
    for seed in 0..100 {
        let (gt, pred) = random_case(seed);
        let base = evaluate(&gt, &pred, 0.5).unwrap();

        // A bijection on the ids actually used.
        let mut ids: Vec<i64> = pred.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF));
        let relabel: std::collections::BTreeMap<i64, i64> =
            ids.iter().zip(shuffled.iter().map(|i| i + 10_000)).map(|(a, b)| (*a, b)).collect();
        let relabeled: Vec<MotRecord> =
            pred.iter().map(|r| MotRecord { id: relabel[&r.id], ..r.clone() }).collect();

        let m = evaluate(&gt, &relabeled, 0.5).unwrap();
        assert_eq!(base.mota(), m.mota(), "seed {}", seed);
        assert_eq!(base.idf1(), m.idf1(), "seed {}", seed);
        assert_eq!(base.idsw, m.idsw, "seed {}", seed);
    }
}

#[test]
fn duplicating_the_sequence_changes_nothing() {
    for seed in 0..100 {
        let (gt, pred) = random_case(seed);
        let base = evaluate(&gt, &pred, 0.5).unwrap();

        let max_frame = gt.iter().chain(&pred).map(|r| r.frame).max().unwrap_or(0);
        let shift = |rs: &[MotRecord]| -> Vec<MotRecord> {
            let mut out = rs.to_vec();
            out.extend(rs.iter().map(|r| MotRecord {
                frame: r.frame + max_frame,
                id: r.id + 50_000,
                ..r.clone()
            }));
            out
        };
        let m = evaluate(&shift(&gt), &shift(&pred), 0.5).unwrap();
        assert_eq!(m.gt, base.gt * 2, "seed {}", seed);
        assert!((m.mota() - base.mota()).abs() < 1e-12, "seed {}", seed);
        assert!((m.idf1() - base.idf1()).abs() < 1e-12, "seed {}", seed);
    }
}

#[test]
fn matches_exhaustive_per_frame_matcher() {
    for seed in 0..150 {
        let (gt, pred) = random_case(seed);
        let fast = evaluate(&gt, &pred, 0.5).unwrap();
        let slow = evaluate_with(&gt, &pred, 0.5, brute_force_assignment).unwrap();
        assert_eq!(fast, slow, "seed {}", seed);
    }
}
