//! Offline back-to-front post-processing: confirm forward tracks against a
//! time-reversed pass, optionally merge by appearance, and fill interior
//! trajectory gaps.

use std::collections::BTreeMap;

use crate::assoc::{hungarian, CostMatrix};
use crate::model::BoundingBox;

use super::{cosine_distance, Track, TrackError};

/// A finished trajectory with an optional per-track mean appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub boxes: BTreeMap<usize, BoundingBox>,
    pub mean_app: Option<Vec<f64>>,
}

impl Tracklet {
    pub fn from_track(track: &Track) -> Self {
        Tracklet {
            id: track.id,
            boxes: track.trajectory.iter().copied().collect(),
            mean_app: track.mean_appearance(),
        }
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.boxes.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.boxes.keys().next_back().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct B2fParams {
    /// Mean shared-frame IoU a backward track must exceed to support a
    /// forward track.
    pub overlap_thresh: f64,
    /// Appearance-distance threshold for forward/backward identity merges.
    pub id_match_thresh: f64,
    /// Fill interior trajectory gaps by linear interpolation.
    pub fill: bool,
    /// Apply the appearance-merge stage (B2F id) before the overlap rule.
    pub use_id_match: bool,
}

impl Default for B2fParams {
    fn default() -> Self {
        B2fParams { overlap_thresh: 0.5, id_match_thresh: 0.4, fill: true, use_id_match: true }
    }
}

/// Mean IoU over shared frames; `None` when the tracks share no frame.
fn shared_overlap(a: &Tracklet, b: &Tracklet) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (frame, abox) in &a.boxes {
        if let Some(bbox) = b.boxes.get(frame) {
            total += abox.iou(bbox);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

/// Linearly interpolate interior gaps, per box coordinate.
pub fn fill_gaps(tracklet: &mut Tracklet) {
    let frames: Vec<usize> = tracklet.boxes.keys().copied().collect();
    for pair in frames.windows(2) {
        let (f0, f1) = (pair[0], pair[1]);
        if f1 - f0 <= 1 {
            continue;
        }
        let a = tracklet.boxes[&f0].to_array();
        let b = tracklet.boxes[&f1].to_array();
        for f in f0 + 1..f1 {
            let w = (f - f0) as f64 / (f1 - f0) as f64;
            let mut coords = [0.0; 4];
            for k in 0..4 {
                coords[k] = a[k] * (1.0 - w) + b[k] * w;
            }
            tracklet.boxes.insert(f, BoundingBox::from_array(coords));
        }
    }
}

/// Back-to-front refinement.
///
/// B2F id (optional): Hungarian-match forward to backward tracks on mean
/// appearance distance; pairs under `id_match_thresh` merge the backward
/// boxes lying strictly inside the forward track's frame span. B2F track: a
/// forward track survives iff some backward track overlaps it by more than
/// `overlap_thresh` mean IoU on shared frames. Fill: interior gaps of the
/// survivors are linearly interpolated. Trajectories never lengthen except
/// by interior filling.
pub fn b2f_postprocess(
    forward: &[Tracklet],
    backward: &[Tracklet],
    seq_len: usize,
    params: &B2fParams,
) -> Result<Vec<Tracklet>, TrackError> {
    for t in forward.iter().chain(backward) {
        if let Some(last) = t.last_frame() {
            if last >= seq_len {
                return Err(TrackError::MismatchedLength { seq_len, frame: last });
            }
        }
    }

    let mut refined: Vec<Tracklet> = forward.to_vec();

    if params.use_id_match {
        let have_apps = refined.iter().all(|t| t.mean_app.is_some())
            && backward.iter().all(|t| t.mean_app.is_some());
        if have_apps && !refined.is_empty() && !backward.is_empty() {
            let costs = CostMatrix::from_fn(refined.len(), backward.len(), |r, c| {
                cosine_distance(
                    refined[r].mean_app.as_ref().unwrap(),
                    backward[c].mean_app.as_ref().unwrap(),
                )
                .unwrap_or(2.0)
            })
            .expect("finite appearance distances");
            for (fi, bi) in hungarian(&costs).pairs {
                if costs.at(fi, bi) >= params.id_match_thresh {
                    continue;
                }
                let (Some(first), Some(last)) =
                    (refined[fi].first_frame(), refined[fi].last_frame())
                else {
                    continue;
                };
                // Merge backward boxes strictly inside the forward span so
                // the trajectory never lengthens.
                let inserts: Vec<(usize, BoundingBox)> = backward[bi]
                    .boxes
                    .iter()
                    .filter(|(f, _)| **f > first && **f < last)
                    .filter(|(f, _)| !refined[fi].boxes.contains_key(*f))
                    .map(|(f, b)| (*f, *b))
                    .collect();
                for (f, b) in inserts {
                    refined[fi].boxes.insert(f, b);
                }
            }
        }
    }

    let mut survivors: Vec<Tracklet> = refined
        .into_iter()
        .filter(|f| {
            backward
                .iter()
                .any(|b| shared_overlap(f, b).map_or(false, |o| o > params.overlap_thresh))
        })
        .collect();

    if params.fill {
        for t in &mut survivors {
            fill_gaps(t);
        }
    }
    Ok(survivors)
}
