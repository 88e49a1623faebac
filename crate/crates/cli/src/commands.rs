//! Command implementations behind the `mqt` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mqt_core::grad::ParamStore;
use mqt_core::metrics::{evaluate_many, report_csv, report_format};
use mqt_core::model::{BoundingBox, MqtModel};
use mqt_core::scene::{
    generate_scene, load_sequence, read_mot, save_sequence, write_mot, MotKind, MotRecord,
    SeqInfo, Sequence,
};
use mqt_core::track::{
    b2f_postprocess, run_sequence, tracklets_to_mot, tracks_to_mot, Track, Tracklet,
};
use mqt_core::train::{train, TrainData};

use crate::config::RunConfig;

/// Usage errors exit 1 (bad arguments, malformed configs, missing inputs,
/// mode/input mismatches); runtime errors exit 2.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Usage(m) => write!(f, "usage error: {}", m),
            CmdError::Runtime(m) => write!(f, "error: {}", m),
        }
    }
}

fn usage<E: fmt::Display>(e: E) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn runtime<E: fmt::Display>(e: E) -> CmdError {
    CmdError::Runtime(e.to_string())
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CmdError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {}", p.display(), e)))?;
            RunConfig::parse(&text)
                .map_err(|e| usage(format!("malformed config {}: {}", p.display(), e)))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(out: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {}", out.display(), e)))
}

fn write_effective(cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    fs::write(out.join("effective_config.toml"), cfg.dump()).map_err(runtime)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    let scene = cfg.scene_config().map_err(usage)?;
    let seq = generate_scene(&scene).map_err(runtime)?;
    let info = SeqInfo {
        height: scene.height,
        width: scene.width,
        channels: scene.channels,
        length: scene.length,
        seed: scene.seed,
    };
    prepare_out(out)?;
    save_sequence(&seq, &info, out).map_err(runtime)?;
    write_effective(cfg, out)?;
    println!(
        "simulated {} frames, {} objects -> {}",
        seq.len(),
        seq.gt.first().map(Vec::len).unwrap_or(0),
        out.display()
    );
    Ok(())
}

/// `data` is either one sequence directory or a directory of them.
fn load_training_set(data: &Path) -> Result<Vec<Sequence>, CmdError> {
    if data.join("seqinfo.toml").exists() {
        let (seq, _) = load_sequence(data).map_err(usage)?;
        return Ok(vec![seq]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .map_err(|e| usage(format!("cannot read data dir {}: {}", data.display(), e)))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("seqinfo.toml").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(usage(format!("{} holds no sequence directories", data.display())));
    }
    let mut seqs = Vec::new();
    for d in dirs {
        let (seq, _) = load_sequence(&d).map_err(usage)?;
        seqs.push(seq);
    }
    Ok(seqs)
}

pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CmdError> {
    let model_cfg = cfg.model_config().map_err(usage)?;
    let weights = cfg.loss_weights().map_err(usage)?;
    let schedule = cfg.schedule();
    let mut model = MqtModel::new(model_cfg, cfg.seed).map_err(usage)?;

    let owned;
    let train_data = if cfg.fresh_scenes {
        TrainData::FreshScenes { base: cfg.scene_config().map_err(usage)? }
    } else {
        let data = data.ok_or_else(|| {
            usage("train needs --data unless fresh_scenes = true in the config")
        })?;
        owned = load_training_set(data)?;
        TrainData::Sequences(&owned)
    };

    let curve = train(&mut model, train_data, &weights, cfg.tau_conf, &schedule)
        .map_err(runtime)?;

    prepare_out(out)?;
    model.params.save(&out.join("model.ckpt")).map_err(runtime)?;
    let mut csv = String::from("iteration,total,box,app\n");
    for p in &curve {
        csv.push_str(&format!("{},{},{},{}\n", p.iteration, p.total, p.box_loss, p.app_loss));
    }
    fs::write(out.join("loss_curve.csv"), csv).map_err(runtime)?;
    write_effective(cfg, out)?;
    if let Some(last) = curve.last() {
        println!(
            "trained {} iterations; final total {:.4} (box {:.4}, app {:.4})",
            cfg.iterations, last.total, last.box_loss, last.app_loss
        );
    }
    Ok(())
}

fn detections_per_frame(
    records: &[MotRecord],
    width: usize,
    height: usize,
    n_frames: usize,
) -> Result<Vec<Vec<BoundingBox>>, CmdError> {
    let mut out = vec![Vec::new(); n_frames];
    for r in records {
        let idx = (r.frame - 1) as usize;
        if idx >= n_frames {
            return Err(usage(format!(
                "detection at frame {} beyond sequence length {}",
                r.frame, n_frames
            )));
        }
        out[idx].push(r.to_normalized(width, height).map_err(usage)?);
    }
    Ok(out)
}

fn write_appearance_sidecar(tracks: &[Track], path: &Path) -> Result<(), CmdError> {
    let mut csv = String::new();
    for t in tracks {
        if let Some(app) = t.mean_appearance() {
            csv.push_str(&format!("{},{}", t.id, app.len()));
            for v in app {
                csv.push_str(&format!(",{}", v));
            }
            csv.push('\n');
        }
    }
    fs::write(path, csv).map_err(runtime)
}

fn read_appearance_sidecar(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>, CmdError> {
    let text = fs::read_to_string(path).map_err(runtime)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = |d: &str| usage(format!("{}:{}: {}", path.display(), i + 1, d));
        if parts.len() < 3 {
            return Err(bad("expected id,dim,values..."));
        }
        let id: u32 = parts[0].parse().map_err(|_| bad("bad id"))?;
        let dim: usize = parts[1].parse().map_err(|_| bad("bad dim"))?;
        if parts.len() != 2 + dim {
            return Err(bad("value count does not match dim"));
        }
        let mut v = Vec::with_capacity(dim);
        for p in &parts[2..] {
            v.push(p.parse::<f64>().map_err(|_| bad("bad value"))?);
        }
        map.insert(id, v);
    }
    Ok(map)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_track(
    cfg: &RunConfig,
    checkpoint: &Path,
    sequence: &Path,
    detections: Option<&Path>,
    reverse: bool,
    out: &Path,
) -> Result<(), CmdError> {
    let model_cfg = cfg.model_config().map_err(usage)?;
    let tracker = cfg.tracker_config().map_err(usage)?;
    let params = ParamStore::load(checkpoint)
        .map_err(|e| usage(format!("checkpoint {}: {}", checkpoint.display(), e)))?;
    let model = MqtModel::from_params(model_cfg, params).map_err(usage)?;
    let (seq, info) = load_sequence(sequence).map_err(usage)?;

    let det_boxes = if tracker.mode.uses_public_detections() {
        let det_path = match detections {
            Some(p) => p.to_path_buf(),
            None => {
                let fallback = sequence.join("det.txt");
                if !fallback.exists() {
                    return Err(usage(format!(
                        "{:?} mode needs a detections file (--detections or {}/det.txt)",
                        cfg.mode,
                        sequence.display()
                    )));
                }
                fallback
            }
        };
        let records = read_mot(&det_path, MotKind::Detections).map_err(usage)?;
        let mut per_frame = detections_per_frame(&records, info.width, info.height, seq.len())?;
        if reverse {
            per_frame.reverse();
        }
        Some(per_frame)
    } else {
        None
    };

    let frames: Vec<_> = if reverse {
        seq.frames.iter().rev().cloned().collect()
    } else {
        seq.frames.clone()
    };
    let tracks =
        run_sequence(&model, &tracker, &frames, det_boxes.as_deref()).map_err(runtime)?;

    prepare_out(out)?;
    let records = if reverse {
        // Map frame indices back to the original order.
        let n = seq.len();
        let tracklets: Vec<Tracklet> = tracks
            .iter()
            .map(|t| {
                let mut tl = Tracklet::from_track(t);
                tl.boxes = tl.boxes.into_iter().map(|(f, b)| (n - 1 - f, b)).collect();
                tl
            })
            .collect();
        tracklets_to_mot(&tracklets, info.width, info.height)
    } else {
        tracks_to_mot(&tracks, info.width, info.height)
    };
    write_mot(&records, &out.join("tracks.txt")).map_err(runtime)?;
    write_appearance_sidecar(&tracks, &out.join("tracks.app.csv"))?;
    write_effective(cfg, out)?;
    println!(
        "tracked {} frames ({} tracks, {} records) -> {}",
        seq.len(),
        tracks.len(),
        records.len(),
        out.display()
    );
    Ok(())
}

fn tracklets_from_mot(
    path: &Path,
    width: usize,
    height: usize,
) -> Result<Vec<Tracklet>, CmdError> {
    let records = read_mot(path, MotKind::GroundTruth).map_err(usage)?;
    let mut map: BTreeMap<u32, Tracklet> = BTreeMap::new();
    for r in &records {
        let bbox = r.to_normalized(width, height).map_err(usage)?;
        map.entry(r.id as u32)
            .or_insert_with(|| Tracklet {
                id: r.id as u32,
                boxes: BTreeMap::new(),
                mean_app: None,
            })
            .boxes
            .insert((r.frame - 1) as usize, bbox);
    }
    let sidecar = path.with_extension("app.csv");
    if sidecar.exists() {
        let apps = read_appearance_sidecar(&sidecar)?;
        for t in map.values_mut() {
            t.mean_app = apps.get(&t.id).cloned();
        }
    }
    Ok(map.into_values().collect())
}

pub fn cmd_b2f(
    cfg: &RunConfig,
    forward: &Path,
    backward: &Path,
    out: &Path,
) -> Result<(), CmdError> {
    let fwd = tracklets_from_mot(forward, cfg.width, cfg.height)?;
    let bwd = tracklets_from_mot(backward, cfg.width, cfg.height)?;
    let refined = b2f_postprocess(&fwd, &bwd, cfg.length, &cfg.b2f_params()).map_err(usage)?;
    prepare_out(out)?;
    let records = tracklets_to_mot(&refined, cfg.width, cfg.height);
    write_mot(&records, &out.join("refined.txt")).map_err(runtime)?;
    write_effective(cfg, out)?;
    println!(
        "b2f kept {}/{} forward tracks ({} records) -> {}",
        refined.len(),
        fwd.len(),
        records.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, gt: &Path, pred: &Path, out: &Path) -> Result<(), CmdError> {
    let gt_records = read_mot(gt, MotKind::GroundTruth).map_err(usage)?;
    let pred_records = read_mot(pred, MotKind::GroundTruth).map_err(usage)?;
    let name = pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let report =
        evaluate_many(&[(name, gt_records, pred_records)], cfg.iou_thresh).map_err(usage)?;
    prepare_out(out)?;
    let text = report_format(&report);
    fs::write(out.join("report.txt"), &text).map_err(runtime)?;
    fs::write(out.join("report.csv"), report_csv(&report)).map_err(runtime)?;
    write_effective(cfg, out)?;
    print!("{}", text);
    Ok(())
}
