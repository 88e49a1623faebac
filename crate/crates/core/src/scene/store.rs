//! Sequence directory layout:
//!
//! ```text
//! <dir>/seqinfo.toml            frame geometry, length, seed
//! <dir>/gt.txt                  MOT ground truth; conf carries visibility
//! <dir>/det.txt                 visible boxes as raw detections (id −1)
//! <dir>/frames/frame_%06d.bin   "MQTGRID1" + u32 h,w,c + f64 LE values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mot_io::{read_mot, write_mot, MotKind, MotRecord};
use super::{FrameGrid, GtObject, SceneError, Sequence};

const GRID_MAGIC: &[u8; 8] = b"MQTGRID1";

/// Geometry sidecar stored with every sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqInfo {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
}

fn write_grid(frame: &FrameGrid, path: &Path) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(8 + 12 + frame.data().len() * 8);
    buf.extend_from_slice(GRID_MAGIC);
    for d in [frame.h, frame.w, frame.c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frame.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_grid(path: &Path) -> Result<FrameGrid, SceneError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != GRID_MAGIC {
        return Err(SceneError::Store(format!("{}: not a grid file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let want = 20 + h * w * c * 8;
    if bytes.len() != want {
        return Err(SceneError::Store(format!(
            "{}: expected {} bytes for {}x{}x{}, got {}",
            path.display(),
            want,
            h,
            w,
            c,
            bytes.len()
        )));
    }
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Ok(FrameGrid::from_data(h, w, c, data))
}

/// Ground-truth MOT records for a sequence; `conf` carries the visibility
/// flag (1 visible, 0 occluded).
pub fn sequence_gt_records(seq: &Sequence, width: usize, height: usize) -> Vec<MotRecord> {
    let mut gt_records = Vec::new();
    for (t, frame_gt) in seq.gt.iter().enumerate() {
        for g in frame_gt {
            let conf = if g.visible { 1.0 } else { 0.0 };
            gt_records.push(MotRecord::from_normalized(
                (t + 1) as u32,
                g.track_id as i64,
                &g.bbox,
                width,
                height,
                conf,
            ));
        }
    }
    gt_records
}

/// Visible boxes as raw detections (id −1, conf 1).
pub fn sequence_det_records(seq: &Sequence, width: usize, height: usize) -> Vec<MotRecord> {
    let mut det_records = Vec::new();
    for (t, frame_gt) in seq.gt.iter().enumerate() {
        for g in frame_gt {
            if g.visible {
                det_records.push(MotRecord::from_normalized(
                    (t + 1) as u32,
                    -1,
                    &g.bbox,
                    width,
                    height,
                    1.0,
                ));
            }
        }
    }
    det_records
}

/// Persist a sequence. Ground truth is written with `conf` carrying the
/// visibility flag (1 visible, 0 occluded); `det.txt` lists only visible
/// boxes with id −1.
pub fn save_sequence(seq: &Sequence, info: &SeqInfo, dir: &Path) -> Result<(), SceneError> {
    if seq.len() != info.length {
        return Err(SceneError::Store(format!(
            "sequence has {} frames but info says {}",
            seq.len(),
            info.length
        )));
    }
    fs::create_dir_all(dir.join("frames"))?;
    let toml = toml::to_string(info).map_err(|e| SceneError::Store(e.to_string()))?;
    fs::write(dir.join("seqinfo.toml"), toml)?;

    write_mot(&sequence_gt_records(seq, info.width, info.height), &dir.join("gt.txt"))?;
    write_mot(&sequence_det_records(seq, info.width, info.height), &dir.join("det.txt"))?;

    for (t, frame) in seq.frames.iter().enumerate() {
        write_grid(frame, &dir.join(format!("frames/frame_{:06}.bin", t + 1)))?;
    }
    Ok(())
}

/// Load a sequence directory written by [`save_sequence`].
pub fn load_sequence(dir: &Path) -> Result<(Sequence, SeqInfo), SceneError> {
    let info_text = fs::read_to_string(dir.join("seqinfo.toml"))
        .map_err(|e| SceneError::Store(format!("{}: {}", dir.display(), e)))?;
    let info: SeqInfo =
        toml::from_str(&info_text).map_err(|e| SceneError::Store(e.to_string()))?;

    let mut frames = Vec::with_capacity(info.length);
    for t in 0..info.length {
        let frame = read_grid(&dir.join(format!("frames/frame_{:06}.bin", t + 1)))?;
        if frame.h != info.height || frame.w != info.width || frame.c != info.channels {
            return Err(SceneError::Store(format!("frame {} geometry mismatch", t + 1)));
        }
        frames.push(frame);
    }

    let mut per_frame: BTreeMap<u32, Vec<GtObject>> = BTreeMap::new();
    for r in read_mot(&dir.join("gt.txt"), MotKind::GroundTruth)? {
        if r.frame as usize > info.length {
            return Err(SceneError::Store(format!(
                "gt frame {} beyond sequence length {}",
                r.frame, info.length
            )));
        }
        let bbox = r.to_normalized(info.width, info.height)?;
        per_frame.entry(r.frame).or_default().push(GtObject {
            track_id: r.id as u32,
            bbox,
            visible: r.conf > 0.0,
        });
    }
    let gt = (1..=info.length as u32)
        .map(|f| per_frame.remove(&f).unwrap_or_default())
        .collect();
    Ok((Sequence { frames, gt }, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn sequence_roundtrip() {
        let cfg = SceneConfig { occlusion_rate: 0.1, seed: 21, ..SceneConfig::default() };
        let seq = generate_scene(&cfg).unwrap();
        let info = SeqInfo {
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
            length: cfg.length,
            seed: cfg.seed,
        };
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, &info, dir.path()).unwrap();
        let (loaded, loaded_info) = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded_info, info);
        assert_eq!(loaded.frames, seq.frames);
        assert_eq!(loaded.gt.len(), seq.gt.len());
        for (a, b) in loaded.gt.iter().flatten().zip(seq.gt.iter().flatten()) {
            assert_eq!(a.track_id, b.track_id);
            assert_eq!(a.visible, b.visible);
            assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12);
            assert!((a.bbox.w - b.bbox.w).abs() < 1e-12);
        }
    }

    #[test]
    fn load_missing_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sequence(&dir.path().join("nope")).is_err());
    }
}
