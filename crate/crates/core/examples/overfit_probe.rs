//! Scratch probe: overfit the default desk model on one sequence and
//! report tracking metrics. Run with --release.

use std::time::Instant;

use mqt_core::assoc::LossWeights;
use mqt_core::metrics::{evaluate, report_format, evaluate_many};
use mqt_core::model::{ModelConfig, MqtModel, TrackingMode};
use mqt_core::scene::{generate_scene, sequence_det_records, sequence_gt_records, SceneConfig};
use mqt_core::track::{run_sequence, tracks_to_mot, TrackerConfig};
use mqt_core::train::{train, TrainData, TrainSchedule};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let scene = SceneConfig::default(); // 12x12x3, 3 objects, 30 frames, seed 7
    let seq = generate_scene(&scene).unwrap();
    let model_cfg = ModelConfig::default();
    let mut model = MqtModel::new(model_cfg, 1).unwrap();

    let schedule = TrainSchedule { iterations: iters, lr, seed: 2, log_every: 100, ..TrainSchedule::default() };
    let t0 = Instant::now();
    let curve = train(&mut model, TrainData::Sequences(&[seq.clone()]), &LossWeights::default(), 0.75, &schedule).unwrap();
    let train_time = t0.elapsed();
    for p in &curve {
        println!("it {:5}  total {:9.4}  box {:9.4}  app {:9.4}", p.iteration, p.total, p.box_loss, p.app_loss);
    }
    println!("training {} iters took {:.1?} ({:.1} ms/iter)", iters, train_time, train_time.as_millis() as f64 / iters as f64);

    let gt = sequence_gt_records(&seq, scene.width, scene.height);
    let dets = sequence_det_records(&seq, scene.width, scene.height);
    // group detections per frame (normalized boxes)
    let mut det_boxes: Vec<Vec<mqt_core::model::BoundingBox>> = vec![Vec::new(); seq.len()];
    for r in &dets {
        det_boxes[(r.frame - 1) as usize].push(r.to_normalized(scene.width, scene.height).unwrap());
    }

    // det-query diagnostics on frames 0 and 1
    {
        use mqt_core::model::{build_query_batch, background_appearance};
        use mqt_core::track::TrackModel;
        let batch = build_query_batch(&[], &[], TrackingMode::Private, &model.config).unwrap();
        let bg = background_appearance(model.config.d_app);
        let out0 = model.decode_frame(&seq.frames[0], &batch).unwrap();
        let out1 = model.decode_frame(&seq.frames[1], &batch).unwrap();
        let cosd = |u: &[f64], v: &[f64]| -> f64 {
            let d: f64 = u.iter().zip(v).map(|(a,b)| a*b).sum();
            1.0 - d
        };
        println!("det-query diagnostics (frame0 vs frame1):");
        for (i, (o0, o1)) in out0.iter().zip(&out1).enumerate() {
            let best_iou = seq.gt[0].iter().map(|g| g.bbox.iou(&o0.b)).fold(0.0, f64::max);
            println!("  det{:2}  bg_dist {:5.3}  self_dist01 {:5.3}  best_gt_iou {:5.3}  box ({:.2},{:.2},{:.2},{:.2})",
                i, cosd(o0.a.data(), &bg), cosd(o0.a.data(), o1.a.data()), best_iou,
                o0.b.cx, o0.b.cy, o0.b.w, o0.b.h);
        }
    }

    for (name, mode) in [("public", TrackingMode::Public), ("private", TrackingMode::Private), ("prv&pub", TrackingMode::PrivateAndPublic)] {
        let cfg = TrackerConfig { mode, ..TrackerConfig::default() };
        let t1 = Instant::now();
        let dets_opt = if mode == TrackingMode::Private { None } else { Some(det_boxes.as_slice()) };
        match run_sequence(&model, &cfg, &seq.frames, dets_opt) {
            Ok(tracks) => {
                let pred = tracks_to_mot(&tracks, scene.width, scene.height);
                let m = evaluate(&gt, &pred, 0.5).unwrap();
                println!("{:8} tracks {:2}  MOTA {:7.4}  IDF1 {:7.4}  FP {} FN {} IDSW {}  ({:.0?})",
                    name, tracks.len(), m.mota(), m.idf1(), m.fp, m.misses, m.idsw, t1.elapsed());
                let report = evaluate_many(&[(name.to_string(), gt.clone(), pred)], 0.5).unwrap();
                if std::env::var("VERBOSE").is_ok() { println!("{}", report_format(&report)); }
            }
            Err(e) => println!("{:8} failed: {}", name, e),
        }
    }
}

// quick diagnostic appended: inspect det-query outputs on frame 0/1
#[allow(dead_code)]
fn unused() {}
