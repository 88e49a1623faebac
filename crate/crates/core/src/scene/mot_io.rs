//! MOTChallenge CSV records:
//! `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `read ∘ write` is the identity on records.

use std::fs;
use std::path::Path;

use crate::model::BoundingBox;

use super::SceneError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotKind {
    Detections,
    GroundTruth,
}

/// One CSV line. Pixel units; `frame` is 1-based; `id` is −1 for raw
/// detections.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRecord {
    pub frame: u32,
    pub id: i64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotRecord {
    /// Build a record from a normalized box, scaling to `width × height`
    /// pixels.
    pub fn from_normalized(
        frame_1based: u32,
        id: i64,
        bbox: &BoundingBox,
        width: usize,
        height: usize,
        conf: f64,
    ) -> MotRecord {
        let (x1, y1, _, _) = bbox.corners();
        MotRecord {
            frame: frame_1based,
            id,
            bb_left: x1 * width as f64,
            bb_top: y1 * height as f64,
            bb_width: bbox.w * width as f64,
            bb_height: bbox.h * height as f64,
            conf,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    /// Normalized box for a frame of `width × height` pixels. Centers are
    /// clamped into `[0,1]` and sizes into `(0,1]` against float drift.
    pub fn to_normalized(&self, width: usize, height: usize) -> Result<BoundingBox, SceneError> {
        if self.bb_width <= 0.0 || self.bb_height <= 0.0 {
            return Err(SceneError::Store(format!(
                "record at frame {} has non-positive box {}x{}",
                self.frame, self.bb_width, self.bb_height
            )));
        }
        let w = (self.bb_width / width as f64).min(1.0);
        let h = (self.bb_height / height as f64).min(1.0);
        let cx = ((self.bb_left + self.bb_width / 2.0) / width as f64).clamp(0.0, 1.0);
        let cy = ((self.bb_top + self.bb_height / 2.0) / height as f64).clamp(0.0, 1.0);
        Ok(BoundingBox { cx, cy, w, h })
    }
}

fn parse_line(path: &str, lineno: usize, line: &str, kind: MotKind) -> Result<MotRecord, SceneError> {
    let err = |detail: String| SceneError::MalformedLine { path: path.to_string(), line: lineno, detail };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 10 {
        return Err(err(format!("expected 10 comma-separated fields, got {}", fields.len())));
    }
    let frame: u32 = fields[0].parse().map_err(|_| err(format!("bad frame {:?}", fields[0])))?;
    if frame == 0 {
        return Err(err("frame numbers are 1-based".into()));
    }
    let id: i64 = fields[1].parse().map_err(|_| err(format!("bad id {:?}", fields[1])))?;
    if kind == MotKind::GroundTruth && id < 0 {
        return Err(err(format!("ground-truth id must be nonnegative, got {}", id)));
    }
    let mut nums = [0.0f64; 8];
    for (i, n) in nums.iter_mut().enumerate() {
        let f = fields[i + 2];
        *n = f.parse().map_err(|_| err(format!("bad float {:?} in field {}", f, i + 3)))?;
    }
    Ok(MotRecord {
        frame,
        id,
        bb_left: nums[0],
        bb_top: nums[1],
        bb_width: nums[2],
        bb_height: nums[3],
        conf: nums[4],
        x: nums[5],
        y: nums[6],
        z: nums[7],
    })
}

/// Parse a MOT CSV file, preserving record order. Trailing fields beyond
/// the tenth are ignored; blank lines are skipped; malformed lines error
/// with their 1-based line number.
pub fn read_mot(path: &Path, kind: MotKind) -> Result<Vec<MotRecord>, SceneError> {
    let text = fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&shown, i + 1, line, kind)?);
    }
    Ok(records)
}

pub fn format_mot(records: &[MotRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.frame, r.id, r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf, r.x, r.y, r.z
        ));
    }
    out
}

/// Write records as CSV, one line per record in field order.
pub fn write_mot(records: &[MotRecord], path: &Path) -> Result<(), SceneError> {
    fs::write(path, format_mot(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_a_detection_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.txt");
        fs::write(&p, "1,-1,10,20,30,40,0.9,-1,-1,-1\n").unwrap();
        let recs = read_mot(&p, MotKind::Detections).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].frame, 1);
        assert_eq!(recs[0].id, -1);
        assert_eq!(recs[0].bb_width, 30.0);
        assert_eq!(recs[0].bb_height, 40.0);
    }

    #[test]
    fn short_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.txt");
        fs::write(&p, "1,2,3,4,5\n").unwrap();
        match read_mot(&p, MotKind::Detections) {
            Err(SceneError::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed-line error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bad_float_on_later_line_reports_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.txt");
        fs::write(&p, "1,-1,10,20,30,40,0.9,-1,-1,-1\n2,-1,x,20,30,40,0.9,-1,-1,-1\n").unwrap();
        match read_mot(&p, MotKind::Detections) {
            Err(SceneError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-line error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ground_truth_rejects_negative_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.txt");
        fs::write(&p, "1,-1,10,20,30,40,1,-1,-1,-1\n").unwrap();
        assert!(read_mot(&p, MotKind::GroundTruth).is_err());
        assert!(read_mot(&p, MotKind::Detections).is_ok());
    }

    #[test]
    fn trailing_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.txt");
        fs::write(&p, "3,7,1.5,2.5,3.5,4.5,1,-1,-1,-1,extra,stuff\n").unwrap();
        let recs = read_mot(&p, MotKind::GroundTruth).unwrap();
        assert_eq!(recs[0].frame, 3);
        assert_eq!(recs[0].id, 7);
    }

    fn arb_record() -> impl Strategy<Value = MotRecord> {
        (
            1u32..10_000,
            -1i64..5_000,
            -1e6f64..1e6,
            -1e6f64..1e6,
            1e-6f64..1e6,
            1e-6f64..1e6,
            prop_oneof![Just(-1.0), 0.0f64..1.0],
        )
            .prop_map(|(frame, id, left, top, w, h, conf)| MotRecord {
                frame,
                id,
                bb_left: left,
                bb_top: top,
                bb_width: w,
                bb_height: h,
                conf,
                x: -1.0,
                y: -1.0,
                z: -1.0,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn write_read_roundtrip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.txt");
            write_mot(&records, &p).unwrap();
            let back = read_mot(&p, MotKind::Detections).unwrap();
            prop_assert_eq!(records, back);
        }
    }

    #[test]
    fn reformatting_is_byte_stable() {
        // write ∘ read normalizes float formatting; a second pass is fixed.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "1,-1,10.50,20,30.0,40,0.90,-1,-1,-1\n").unwrap();
        let recs = read_mot(&p, MotKind::Detections).unwrap();
        let p2 = dir.path().join("b.txt");
        write_mot(&recs, &p2).unwrap();
        let recs2 = read_mot(&p2, MotKind::Detections).unwrap();
        let p3 = dir.path().join("c.txt");
        write_mot(&recs2, &p3).unwrap();
        assert_eq!(fs::read(&p2).unwrap(), fs::read(&p3).unwrap());
    }
}
