//! MOT evaluation: CLEAR-style MOTA with persistence-biased per-frame
//! matching, trajectory-level IDF1, and MT/ML counts.

use std::collections::{BTreeMap, BTreeSet};

use crate::assoc::{hungarian, Assignment, CostMatrix};
use crate::scene::MotRecord;
use thiserror::Error;

/// Cost sentinel for pairs below the IoU gate; any total of real matches
/// stays far beneath a single sentinel, so match count is maximized first.
const UNMATCHABLE: f64 = 1e6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("duplicate prediction id {id} in frame {frame}")]
    DuplicatePrediction { frame: u32, id: i64 },
    #[error("duplicate ground-truth id {id} in frame {frame}")]
    DuplicateGt { frame: u32, id: i64 },
    #[error(transparent)]
    Assoc(#[from] crate::assoc::AssocError),
}

/// Counts and derived scores for one sequence (or a summed total).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqMetrics {
    pub gt: usize,
    pub fp: usize,
    pub misses: usize,
    pub idsw: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub gt_tracks: usize,
}

impl SeqMetrics {
    /// `1 − (FN + FP + IDSW) / GT`; ≤ 1, may be negative. An empty
    /// ground truth counts errors against a denominator of one.
    pub fn mota(&self) -> f64 {
        1.0 - (self.misses + self.fp + self.idsw) as f64 / self.gt.max(1) as f64
    }

    pub fn idf1(&self) -> f64 {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.idtp as f64 / denom as f64
        }
    }

    fn add(&mut self, other: &SeqMetrics) {
        self.gt += other.gt;
        self.fp += other.fp;
        self.misses += other.misses;
        self.idsw += other.idsw;
        self.idtp += other.idtp;
        self.idfp += other.idfp;
        self.idfn += other.idfn;
        self.mostly_tracked += other.mostly_tracked;
        self.mostly_lost += other.mostly_lost;
        self.gt_tracks += other.gt_tracks;
    }
}

/// Per-sequence breakdown plus the count-summed total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub sequences: Vec<(String, SeqMetrics)>,
    pub total: SeqMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    l: f64,
    t: f64,
    w: f64,
    h: f64,
}

impl Rect {
    fn from_record(r: &MotRecord) -> Rect {
        Rect { l: r.bb_left, t: r.bb_top, w: r.bb_width, h: r.bb_height }
    }

    fn iou(&self, other: &Rect) -> f64 {
        let ix = (self.l + self.w).min(other.l + other.w) - self.l.max(other.l);
        let iy = (self.t + self.h).min(other.t + other.h) - self.t.max(other.t);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

type FrameMap = BTreeMap<u32, Vec<(i64, Rect)>>;

fn group_by_frame(records: &[MotRecord], skip_invisible: bool) -> Result<FrameMap, MetricsError> {
    let mut map: FrameMap = BTreeMap::new();
    for r in records {
        if skip_invisible && r.conf <= 0.0 {
            continue;
        }
        map.entry(r.frame).or_default().push((r.id, Rect::from_record(r)));
    }
    Ok(map)
}

fn check_unique(map: &FrameMap, gt: bool) -> Result<(), MetricsError> {
    for (frame, objs) in map {
        let mut seen = BTreeSet::new();
        for (id, _) in objs {
            if !seen.insert(*id) {
                return Err(if gt {
                    MetricsError::DuplicateGt { frame: *frame, id: *id }
                } else {
                    MetricsError::DuplicatePrediction { frame: *frame, id: *id }
                });
            }
        }
    }
    Ok(())
}

/// CLEAR + IDF1 evaluation at the given IoU gate. Ground-truth records
/// with `conf <= 0` (occluded) are excluded. MT/ML use the MOTChallenge
/// 80% / 20% lifetime-coverage thresholds.
pub fn evaluate(
    gt: &[MotRecord],
    pred: &[MotRecord],
    iou_thresh: f64,
) -> Result<SeqMetrics, MetricsError> {
    evaluate_with(gt, pred, iou_thresh, hungarian)
}

/// Evaluation with a pluggable per-frame assignment solver, so tests can
/// swap in the exhaustive oracle.
pub fn evaluate_with(
    gt: &[MotRecord],
    pred: &[MotRecord],
    iou_thresh: f64,
    solve: impl Fn(&CostMatrix) -> Assignment,
) -> Result<SeqMetrics, MetricsError> {
    let gt_frames = group_by_frame(gt, true)?;
    let pred_frames = group_by_frame(pred, false)?;
    check_unique(&gt_frames, true)?;
    check_unique(&pred_frames, false)?;

    let mut m = SeqMetrics::default();
    let mut last_match: BTreeMap<i64, i64> = BTreeMap::new();
    let mut gt_total_frames: BTreeMap<i64, usize> = BTreeMap::new();
    let mut gt_covered_frames: BTreeMap<i64, usize> = BTreeMap::new();

    let all_frames: BTreeSet<u32> =
        gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    let empty = Vec::new();
    for frame in all_frames {
        let gt_objs = gt_frames.get(&frame).unwrap_or(&empty);
        let pred_objs = pred_frames.get(&frame).unwrap_or(&empty);
        m.gt += gt_objs.len();
        for (id, _) in gt_objs {
            *gt_total_frames.entry(*id).or_default() += 1;
        }

        // Persistence bias: keep last frame's pairing when still valid.
        let mut gt_used = vec![false; gt_objs.len()];
        let mut pred_used = vec![false; pred_objs.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();
        for (gi, (gid, gre)) in gt_objs.iter().enumerate() {
            if let Some(pid) = last_match.get(gid) {
                if let Some(pi) = pred_objs.iter().position(|(id, _)| id == pid) {
                    if !pred_used[pi] && gre.iou(&pred_objs[pi].1) >= iou_thresh {
                        gt_used[gi] = true;
                        pred_used[pi] = true;
                        matches.push((gi, pi));
                    }
                }
            }
        }

        // Hungarian over the remainder, gated at the IoU threshold.
        let free_gt: Vec<usize> = (0..gt_objs.len()).filter(|i| !gt_used[*i]).collect();
        let free_pred: Vec<usize> = (0..pred_objs.len()).filter(|i| !pred_used[*i]).collect();
        if !free_gt.is_empty() && !free_pred.is_empty() {
            let costs = CostMatrix::from_fn(free_gt.len(), free_pred.len(), |r, c| {
                let iou = gt_objs[free_gt[r]].1.iou(&pred_objs[free_pred[c]].1);
                if iou >= iou_thresh {
                    1.0 - iou
                } else {
                    UNMATCHABLE
                }
            })?;
            for (r, c) in solve(&costs).pairs {
                if costs.at(r, c) < UNMATCHABLE {
                    matches.push((free_gt[r], free_pred[c]));
                }
            }
        }

        for (gi, pi) in &matches {
            let gid = gt_objs[*gi].0;
            let pid = pred_objs[*pi].0;
            if let Some(prev) = last_match.get(&gid) {
                if *prev != pid {
                    m.idsw += 1;
                }
            }
            last_match.insert(gid, pid);
            *gt_covered_frames.entry(gid).or_default() += 1;
        }
        m.misses += gt_objs.len() - matches.len();
        m.fp += pred_objs.len() - matches.len();
    }

    // MT / ML over ground-truth track lifetimes.
    m.gt_tracks = gt_total_frames.len();
    for (gid, total) in &gt_total_frames {
        let covered = gt_covered_frames.get(gid).copied().unwrap_or(0);
        let ratio = covered as f64 / *total as f64;
        if ratio >= 0.8 {
            m.mostly_tracked += 1;
        }
        if ratio <= 0.2 {
            m.mostly_lost += 1;
        }
    }

    // IDF1 via a global trajectory matching: cost of pairing a gt track
    // with a prediction track is the number of frames where they fail to
    // co-locate; dummy pairings cost a track's whole lifetime.
    let mut gt_tracks: BTreeMap<i64, BTreeMap<u32, Rect>> = BTreeMap::new();
    for (frame, objs) in &gt_frames {
        for (id, re) in objs {
            gt_tracks.entry(*id).or_default().insert(*frame, *re);
        }
    }
    let mut pred_tracks: BTreeMap<i64, BTreeMap<u32, Rect>> = BTreeMap::new();
    for (frame, objs) in &pred_frames {
        for (id, re) in objs {
            pred_tracks.entry(*id).or_default().insert(*frame, *re);
        }
    }
    let g_ids: Vec<i64> = gt_tracks.keys().copied().collect();
    let p_ids: Vec<i64> = pred_tracks.keys().copied().collect();
    let sum_gt: usize = gt_tracks.values().map(BTreeMap::len).sum();
    let sum_pred: usize = pred_tracks.values().map(BTreeMap::len).sum();
    let n = g_ids.len() + p_ids.len();
    if n > 0 {
        let costs = CostMatrix::from_fn(n, n, |r, c| {
            match (g_ids.get(r), p_ids.get(c)) {
                (Some(g), Some(p)) => {
                    let gt_t = &gt_tracks[g];
                    let pr_t = &pred_tracks[p];
                    let overlap = gt_t
                        .iter()
                        .filter(|(f, re)| {
                            pr_t.get(f).map_or(false, |pre| re.iou(pre) >= iou_thresh)
                        })
                        .count();
                    (gt_t.len() + pr_t.len() - 2 * overlap) as f64
                }
                (Some(g), None) => gt_tracks[g].len() as f64,
                (None, Some(p)) => pred_tracks[p].len() as f64,
                (None, None) => 0.0,
            }
        })?;
        let total: f64 = hungarian(&costs).total_cost(&costs);
        let idtp = ((sum_gt + sum_pred) as f64 - total) / 2.0;
        m.idtp = idtp.round() as usize;
        m.idfn = sum_gt - m.idtp;
        m.idfp = sum_pred - m.idtp;
    }
    Ok(m)
}

/// Evaluate several sequences and aggregate by summed counts (never by
/// averaged rates).
pub fn evaluate_many(
    inputs: &[(String, Vec<MotRecord>, Vec<MotRecord>)],
    iou_thresh: f64,
) -> Result<MetricsReport, MetricsError> {
    let mut report = MetricsReport::default();
    for (name, gt, pred) in inputs {
        let m = evaluate(gt, pred, iou_thresh)?;
        report.total.add(&m);
        report.sequences.push((name.clone(), m));
    }
    Ok(report)
}

fn format_row(name: &str, m: &SeqMetrics) -> String {
    format!(
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>4} {:>4}\n",
        name,
        m.gt,
        m.fp,
        m.misses,
        m.idsw,
        m.mota(),
        m.idf1(),
        m.mostly_tracked,
        m.mostly_lost
    )
}

/// Fixed-column text table; deterministic and machine-parseable.
pub fn report_format(report: &MetricsReport) -> String {
    let mut out = format!(
        "{:<12} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>4} {:>4}\n",
        "seq", "GT", "FP", "FN", "IDSW", "MOTA", "IDF1", "MT", "ML"
    );
    for (name, m) in &report.sequences {
        out.push_str(&format_row(name, m));
    }
    out.push_str(&format_row("TOTAL", &report.total));
    out
}

/// CSV form of the same table.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("seq,gt,fp,fn,idsw,mota,idf1,mt,ml\n");
    let row = |name: &str, m: &SeqMetrics| {
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            name,
            m.gt,
            m.fp,
            m.misses,
            m.idsw,
            m.mota(),
            m.idf1(),
            m.mostly_tracked,
            m.mostly_lost
        )
    };
    for (name, m) in &report.sequences {
        out.push_str(&row(name, m));
    }
    out.push_str(&row("TOTAL", &report.total));
    out
}
