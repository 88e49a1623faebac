//! Scratch probe for the ablation trends: single- vs multi-query tracking
//! and appearance-memory configurations on held-out scenes.

use std::time::Instant;

use mqt_core::assoc::LossWeights;
use mqt_core::metrics::evaluate;
use mqt_core::model::{ModelConfig, MqtModel, QueryKind, QueryKindSet, TrackingMode};
use mqt_core::scene::{
    generate_scene, sequence_det_records, sequence_gt_records, SceneConfig, Sequence,
};
use mqt_core::track::{run_sequence, tracks_to_mot, MemoryMetric, TrackerConfig};
use mqt_core::train::{train, TrainData, TrainSchedule};

fn scene(seed: u64, objects: usize, occlusion: f64, length: usize) -> SceneConfig {
    SceneConfig {
        objects_min: objects,
        objects_max: objects,
        occlusion_rate: occlusion,
        app_noise: 0.25,
        length,
        seed,
        ..SceneConfig::default()
    }
}

fn det_boxes(seq: &Sequence, cfg: &SceneConfig) -> Vec<Vec<mqt_core::model::BoundingBox>> {
    let dets = sequence_det_records(seq, cfg.width, cfg.height);
    let mut out = vec![Vec::new(); seq.len()];
    for r in &dets {
        out[(r.frame - 1) as usize].push(r.to_normalized(cfg.width, cfg.height).unwrap());
    }
    out
}

fn eval_config(
    model: &MqtModel,
    kinds: QueryKindSet,
    tracker: &TrackerConfig,
    suite: &[(SceneConfig, Sequence)],
) -> (f64, f64) {
    let mut model = model.clone();
    model.config.enabled_kinds = kinds;
    let mut motas = Vec::new();
    let mut idf1s = Vec::new();
    for (cfg, seq) in suite {
        let dets = det_boxes(seq, cfg);
        let tracks = run_sequence(&model, tracker, &seq.frames, Some(&dets)).unwrap();
        let pred = tracks_to_mot(&tracks, cfg.width, cfg.height);
        let gt = sequence_gt_records(seq, cfg.width, cfg.height);
        let m = evaluate(&gt, &pred, 0.5).unwrap();
        motas.push(m.mota());
        idf1s.push(m.idf1());
    }
    (
        motas.iter().sum::<f64>() / motas.len() as f64,
        idf1s.iter().sum::<f64>() / idf1s.len() as f64,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3500);

    // Training scenes: varied object counts, some occlusion.
    let base = SceneConfig {
        objects_min: 2,
        objects_max: 4,
        occlusion_rate: 0.0,
        app_noise: 0.25,
        ..SceneConfig::default()
    };

    let mut model = MqtModel::new(ModelConfig::default(), 1).unwrap();
    let schedule = TrainSchedule {
        iterations: iters,
        seed: 2,
        log_every: 250,
        pos_query_noise: 0.05,
        ..TrainSchedule::default()
    };
    let t0 = Instant::now();
    let curve = train(&mut model, TrainData::FreshScenes { base }, &LossWeights::default(), 0.75, &schedule).unwrap();
    println!(
        "trained {} iters in {:.1?}; final total {:.3}",
        iters,
        t0.elapsed(),
        curve.last().unwrap().total
    );
    model.params.save(std::path::Path::new("/tmp/trend_model.ckpt")).unwrap();

    // Held-out suites: 5 scene shapes x 3 seeds.
    let shapes = [(2usize, 0), (3, 1), (3, 2), (4, 3), (2, 4)];
    let clean: Vec<(SceneConfig, Sequence)> = shapes
        .iter()
        .flat_map(|(objs, salt)| {
            (0..3).map(move |s| {
                let cfg = scene(200 + salt * 10 + s, *objs, 0.0, 30);
                let seq = generate_scene(&cfg).unwrap();
                (cfg, seq)
            })
        })
        .collect();
    let occluded: Vec<(SceneConfig, Sequence)> = shapes
        .iter()
        .flat_map(|(objs, salt)| {
            (0..3).map(move |s| {
                let cfg = scene(300 + salt * 10 + s, *objs, 0.08, 30);
                let seq = generate_scene(&cfg).unwrap();
                (cfg, seq)
            })
        })
        .collect();

    for tau in [0.75, 0.5, 0.4, 0.3, 0.2] {
        let tracker = TrackerConfig {
            mode: TrackingMode::PrivateAndPublic,
            tau_conf: tau,
            ..TrackerConfig::default()
        };
        println!("\n== tau_conf {tau} ==");
        println!("query-kind ablation on the clean held-out suite (mean MOTA / IDF1):");
        let all = eval_config(&model, QueryKindSet::all(), &tracker, &clean);
        println!("  all four kinds   {:7.4} / {:7.4}", all.0, all.1);
        for kind in [QueryKind::Det, QueryKind::Id, QueryKind::Pos, QueryKind::Both] {
            let single = eval_config(&model, QueryKindSet::single(kind), &tracker, &clean);
            let ok = if all.0 >= single.0 { "<= all" } else { "!! EXCEEDS all" };
            println!("  only {:?}         {:7.4} / {:7.4}   {}", kind, single.0, single.1, ok);
        }

        println!("memory ablation on the occluded suite (mean MOTA / IDF1):");
        let full_mem = eval_config(&model, QueryKindSet::all(), &tracker, &occluded);
        let last_only = eval_config(
            &model,
            QueryKindSet::all(),
            &TrackerConfig { mem_keep_first: false, mem_last: 1, memory_metric: MemoryMetric::Min, ..tracker.clone() },
            &occluded,
        );
        println!("  first+last5/min  {:7.4} / {:7.4}", full_mem.0, full_mem.1);
        println!("  last-frame-only  {:7.4} / {:7.4}", last_only.0, last_only.1);
    }
}
