//! Per-frame tracking state machine.
//!
//! Each step: decode the query batch, aggregate per track, confirm active
//! tracks against their appearance memory, reID lost tracks against
//! detection-owned outputs, spawn new tracks from frame-consistent det
//! outputs (private modes), and manage hypothesis branches.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{
    build_query_batch, BoundingBox, QueryKind, QueryOutput, QueryOwner, SemanticQueryBundle,
    TrackingMode,
};
use crate::scene::FrameGrid;

use super::{
    cosine_distance, match_by_appearance, memory_distance, Branch, Track, TrackError, TrackModel,
    TrackState, TrackUpdate, TrackerConfig,
};

/// Candidates overlapping a same-frame emission by more than this IoU are
/// treated as duplicates of that track, not new objects.
const SPAWN_IOU_GUARD: f64 = 0.5;

pub struct TrackEngine<'m, M: TrackModel> {
    model: &'m M,
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u32,
    frame_idx: usize,
    /// Appearance outputs of the previous frame's detection-owned queries,
    /// the anchor set for new-track spawning.
    prev_det_apps: Vec<Vec<f64>>,
}

impl<'m, M: TrackModel> TrackEngine<'m, M> {
    pub fn new(model: &'m M, cfg: TrackerConfig) -> Result<Self, TrackError> {
        cfg.validate()?;
        Ok(TrackEngine {
            model,
            cfg,
            tracks: Vec::new(),
            next_id: 0,
            frame_idx: 0,
            prev_det_apps: Vec::new(),
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<Track> {
        self.tracks
    }

    pub fn current_frame(&self) -> usize {
        self.frame_idx
    }

    fn lowest_free_tag(&self) -> Result<usize, TrackError> {
        let n_tags = self.model.model_config().n_tags;
        let used: BTreeSet<usize> =
            self.tracks.iter().filter(|t| t.is_live()).map(|t| t.bundle.tag_index).collect();
        (0..n_tags).find(|i| !used.contains(i)).ok_or_else(|| {
            TrackError::Model(crate::model::ModelError::TagCapacity {
                active: used.len() + 1,
                n_tags,
            })
        })
    }

    fn bundle_from(out: &QueryOutput, tag_index: usize) -> SemanticQueryBundle {
        SemanticQueryBundle {
            v_prev: out.v.clone(),
            b_prev: out.b,
            a_prev: out.a.clone(),
            tag_index,
        }
    }

    fn spawn_from(&mut self, emissions: &[(usize, &QueryOutput)]) -> Result<u32, TrackError> {
        let tag = self.lowest_free_tag()?;
        let last = emissions.last().expect("spawn needs at least one emission").1;
        let mut track = Track::new(self.next_id, Self::bundle_from(last, tag), &self.cfg);
        for (frame, out) in emissions {
            track.emit(*frame, out.b, out.a.data());
        }
        let id = track.id;
        self.tracks.push(track);
        self.next_id += 1;
        Ok(id)
    }

    /// Initialize tracks from the first frame(s). Public modes spawn one
    /// track per provided detection; private mode appearance-matches the
    /// det-query outputs of frames 0 and 1 (the frame-0 box is backfilled
    /// into each spawned trajectory). Returns the update and the number of
    /// frames consumed.
    pub fn init(
        &mut self,
        frames: &[FrameGrid],
        detections0: Option<&[BoundingBox]>,
    ) -> Result<(TrackUpdate, usize), TrackError> {
        assert_eq!(self.frame_idx, 0, "init must run before stepping");
        let mut update = TrackUpdate::default();
        let model_cfg = self.model.model_config();
        match self.cfg.mode {
            TrackingMode::Public | TrackingMode::PrivateAndPublic => {
                let dets =
                    detections0.ok_or(TrackError::MissingDetections { mode: self.cfg.mode })?;
                if frames.is_empty() {
                    return Err(TrackError::InvalidConfig("no frames to track".into()));
                }
                let batch = build_query_batch(&[], dets, self.cfg.mode, model_cfg)?;
                let outputs = self.model.decode_frame(&frames[0], &batch)?;
                for out in &outputs {
                    if out.owner == QueryOwner::Detection && out.kind == QueryKind::Pos {
                        update.spawned.push(self.spawn_from(&[(0, out)])?);
                    }
                }
                self.prev_det_apps = outputs
                    .iter()
                    .filter(|o| o.owner == QueryOwner::Detection)
                    .map(|o| o.a.data().to_vec())
                    .collect();
                self.frame_idx = 1;
                Ok((update, 1))
            }
            TrackingMode::Private => {
                if frames.len() < 2 {
                    return Err(TrackError::InvalidConfig(
                        "private initialization needs two frames".into(),
                    ));
                }
                let batch = build_query_batch(&[], &[], TrackingMode::Private, model_cfg)?;
                let out0 = self.model.decode_frame(&frames[0], &batch)?;
                let out1 = self.model.decode_frame(&frames[1], &batch)?;
                let apps0: Vec<Vec<f64>> = out0.iter().map(|o| o.a.data().to_vec()).collect();
                let mut claimed0: BTreeSet<usize> = BTreeSet::new();

                for o1 in &out1 {
                    // Argmin over still-unclaimed frame-0 outputs.
                    let mut best: Option<(usize, f64)> = None;
                    for (j, a0) in apps0.iter().enumerate() {
                        if claimed0.contains(&j) {
                            continue;
                        }
                        let d = cosine_distance(o1.a.data(), a0)?;
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((j, d));
                        }
                    }
                    let Some((j, d)) = best else { continue };
                    if d >= self.cfg.tau_conf {
                        continue;
                    }
                    if self.is_background(o1.a.data())? {
                        continue;
                    }
                    if self.duplicates_live_track(o1.a.data(), &o1.b, 1)? {
                        claimed0.insert(j);
                        continue;
                    }
                    claimed0.insert(j);
                    update.spawned.push(self.spawn_from(&[(0, &out0[j]), (1, o1)])?);
                }
                self.prev_det_apps = out1.iter().map(|o| o.a.data().to_vec()).collect();
                self.frame_idx = 2;
                Ok((update, 2))
            }
        }
    }

    /// Candidates resembling the background attractor are no-object
    /// outputs, not detections.
    fn is_background(&self, app: &[f64]) -> Result<bool, TrackError> {
        let bg = crate::model::background_appearance(app.len());
        Ok(cosine_distance(app, &bg)? < self.cfg.tau_conf)
    }

    /// A candidate duplicates a live track when it matches the track's
    /// appearance memory, or when its box sits on a track's emission of
    /// this frame (several det anchors firing on one object).
    fn duplicates_live_track(
        &self,
        app: &[f64],
        bbox: &BoundingBox,
        frame: usize,
    ) -> Result<bool, TrackError> {
        for tr in &self.tracks {
            if !tr.is_live() {
                continue;
            }
            if !tr.memory.is_empty() {
                let d = memory_distance(&tr.memory, app, self.cfg.memory_metric)?;
                if d < self.cfg.tau_conf {
                    return Ok(true);
                }
            }
            if let Some((f, b)) = tr.trajectory.last() {
                if *f == frame && b.iou(bbox) > SPAWN_IOU_GUARD {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Advance one frame.
    pub fn step(
        &mut self,
        frame: &FrameGrid,
        public_detections: &[BoundingBox],
    ) -> Result<TrackUpdate, TrackError> {
        let t = self.frame_idx;
        self.frame_idx += 1;
        let states_before: BTreeMap<u32, TrackState> =
            self.tracks.iter().map(|tr| (tr.id, tr.state)).collect();

        // (1)–(2) decode the batch for the active tracks.
        let active: Vec<(u32, SemanticQueryBundle)> = self
            .tracks
            .iter()
            .filter(|tr| tr.state == TrackState::Active)
            .map(|tr| (tr.id, tr.bundle.clone()))
            .collect();
        let batch = build_query_batch(&active, public_detections, self.cfg.mode, self.model.model_config())?;
        let outputs = self.model.decode_frame(frame, &batch)?;

        let mut track_groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut det_pool: Vec<usize> = Vec::new();
        for (i, out) in outputs.iter().enumerate() {
            match out.owner {
                QueryOwner::Track(id) => track_groups.entry(id).or_default().push(i),
                QueryOwner::Detection => det_pool.push(i),
            }
        }
        let mut claimed: BTreeSet<usize> = BTreeSet::new();

        // (3) + (6): confirmation and hypothesis handling per active track.
        let single_path = self.cfg.k_hyp == 1 && !self.cfg.force_branch_path;
        for (id, _) in &active {
            let group_idx = track_groups.get(id).cloned().unwrap_or_default();
            let group: Vec<&QueryOutput> = group_idx.iter().map(|&i| &outputs[i]).collect();
            let own = if group.is_empty() {
                None
            } else {
                Some(self.model.aggregate_outputs(&group)?)
            };

            // Pre-aggregation pos/id agreement.
            let pos_a = group.iter().find(|o| o.kind == QueryKind::Pos).map(|o| o.a.data());
            let id_a = group.iter().find(|o| o.kind == QueryKind::Id).map(|o| o.a.data());
            let gate_fired = match (pos_a, id_a) {
                (Some(p), Some(i)) => cosine_distance(p, i)? < self.cfg.tau_agree,
                _ => false,
            };

            let track_idx = self
                .tracks
                .iter()
                .position(|tr| tr.id == *id)
                .expect("active track present");
            let own_dist = match &own {
                Some(o) => Some(memory_distance(
                    &self.tracks[track_idx].memory,
                    o.a.data(),
                    self.cfg.memory_metric,
                )?),
                None => None,
            };

            // A detection output matching the track better than its own
            // semantic continuation takes over the emission.
            let mut best_det: Option<(usize, f64)> = None;
            for &i in &det_pool {
                if claimed.contains(&i) {
                    continue;
                }
                let d = memory_distance(
                    &self.tracks[track_idx].memory,
                    outputs[i].a.data(),
                    self.cfg.memory_metric,
                )?;
                if d < self.cfg.tau_conf && best_det.map_or(true, |(_, bd)| d < bd) {
                    best_det = Some((i, d));
                }
            }
            let own_confirmed = own_dist.map_or(false, |d| d < self.cfg.tau_conf);
            let det_takeover = match (own_dist, &best_det) {
                (Some(od), Some((_, dd))) => *dd < od,
                (None, Some(_)) => true,
                _ => false,
            };

            let track = &mut self.tracks[track_idx];
            if single_path {
                if det_takeover {
                    let (i, _) = best_det.unwrap();
                    claimed.insert(i);
                    let out = &outputs[i];
                    track.emit(t, out.b, out.a.data());
                    track.bundle = Self::bundle_from(out, track.bundle.tag_index);
                } else if own_confirmed {
                    let o = own.as_ref().unwrap();
                    track.emit(t, o.b, o.a.data());
                    track.bundle = SemanticQueryBundle {
                        v_prev: o.v.clone(),
                        b_prev: o.b,
                        a_prev: o.a.clone(),
                        tag_index: track.bundle.tag_index,
                    };
                } else {
                    track.state = TrackState::Lost(0);
                }
                continue;
            }

            // Branching path.
            if gate_fired {
                track.branches.clear();
            }
            let emitted = if det_takeover {
                let (i, _) = best_det.unwrap();
                claimed.insert(i);
                let out = &outputs[i];
                track.emit(t, out.b, out.a.data());
                track.bundle = Self::bundle_from(out, track.bundle.tag_index);
                true
            } else if own_confirmed {
                let o = own.as_ref().unwrap();
                track.emit(t, o.b, o.a.data());
                track.bundle = SemanticQueryBundle {
                    v_prev: o.v.clone(),
                    b_prev: o.b,
                    a_prev: o.a.clone(),
                    tag_index: track.bundle.tag_index,
                };
                true
            } else {
                false
            };
            if !gate_fired {
                // Candidate pool: unclaimed detection-owned outputs within
                // tau_conf of the parent memory, closest first.
                let mut pool: Vec<(usize, f64)> = Vec::new();
                for &i in &det_pool {
                    if claimed.contains(&i) {
                        continue;
                    }
                    let d =
                        memory_distance(&track.memory, outputs[i].a.data(), self.cfg.memory_metric)?;
                    if d < self.cfg.tau_conf {
                        pool.push((i, d));
                    }
                }
                pool.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

                // Extend existing branches with their nearest candidate.
                let mut survivors = Vec::new();
                for mut branch in std::mem::take(&mut track.branches) {
                    let mut best: Option<(usize, f64)> = None;
                    for (slot, &(i, _)) in pool.iter().enumerate() {
                        let d = cosine_distance(
                            branch.apps.last().expect("branch has history"),
                            outputs[i].a.data(),
                        )?;
                        if best.map_or(true, |(_, bd)| d < bd) {
                            best = Some((slot, d));
                        }
                    }
                    match best {
                        Some((slot, _)) => {
                            let (i, _) = pool.remove(slot);
                            claimed.insert(i);
                            let out = &outputs[i];
                            branch.suffix.push((t, out.b));
                            branch.apps.push(out.a.data().to_vec());
                            branch.bundle = Self::bundle_from(out, track.bundle.tag_index);
                            survivors.push(branch);
                        }
                        None => {
                            // Branch dies; its suffix is discarded unless
                            // committed below in an earlier frame.
                        }
                    }
                }
                track.branches = survivors;

                // Seed new branches up to the hypothesis budget.
                while track.branches.len() + 1 < self.cfg.k_hyp && !pool.is_empty() {
                    let (i, _) = pool.remove(0);
                    claimed.insert(i);
                    let out = &outputs[i];
                    track.branches.push(Branch {
                        suffix: vec![(t, out.b)],
                        apps: vec![out.a.data().to_vec()],
                        bundle: Self::bundle_from(out, track.bundle.tag_index),
                    });
                }
            }
            if !emitted {
                // Commit the longest surviving branch, if any; otherwise
                // the track is lost.
                let best = track
                    .branches
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| {
                        a.suffix.len().cmp(&b.suffix.len()).then(ib.cmp(ia))
                    })
                    .map(|(i, _)| i);
                match best {
                    Some(i) => {
                        let branch = track.branches.swap_remove(i);
                        track.truncate_from(branch.suffix[0].0);
                        for ((f, b), a) in branch.suffix.iter().zip(&branch.apps) {
                            track.emit(*f, *b, a);
                        }
                        track.bundle = branch.bundle;
                        track.branches.clear();
                    }
                    None => {
                        track.state = TrackState::Lost(0);
                        track.branches.clear();
                    }
                }
            }
        }

        // (4) reID of lost tracks against unclaimed detection outputs.
        for ti in 0..self.tracks.len() {
            let TrackState::Lost(frames_lost) = self.tracks[ti].state else { continue };
            let mut best: Option<(usize, f64)> = None;
            for &i in &det_pool {
                if claimed.contains(&i) {
                    continue;
                }
                let d = memory_distance(
                    &self.tracks[ti].memory,
                    outputs[i].a.data(),
                    self.cfg.memory_metric,
                )?;
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, d)) = best {
                if d < self.cfg.tau_conf {
                    claimed.insert(i);
                    let out = &outputs[i];
                    let track = &mut self.tracks[ti];
                    track.state = TrackState::Active;
                    track.emit(t, out.b, out.a.data());
                    track.bundle = Self::bundle_from(out, track.bundle.tag_index);
                    continue;
                }
            }
            let track = &mut self.tracks[ti];
            let n = frames_lost + 1;
            track.state = if n > self.cfg.lost_patience {
                TrackState::Finished
            } else {
                TrackState::Lost(n)
            };
        }

        // (5) spawn new tracks from frame-consistent det outputs (private
        // modes only).
        if self.cfg.mode.uses_det_queries() && !self.prev_det_apps.is_empty() {
            let candidates: Vec<usize> =
                det_pool.iter().copied().filter(|i| !claimed.contains(i)).collect();
            for i in candidates {
                let app = outputs[i].a.data().to_vec();
                if self.is_background(&app)? {
                    continue;
                }
                if match_by_appearance(&app, &self.prev_det_apps, self.cfg.tau_conf)?.is_none() {
                    continue;
                }
                if self.duplicates_live_track(&app, &outputs[i].b, t)? {
                    continue;
                }
                claimed.insert(i);
                self.spawn_from(&[(t, &outputs[i])])?;
            }
        }

        self.prev_det_apps =
            det_pool.iter().map(|&i| outputs[i].a.data().to_vec()).collect();

        // State diff → update report.
        let mut update = TrackUpdate::default();
        for tr in &self.tracks {
            match states_before.get(&tr.id) {
                None => update.spawned.push(tr.id),
                Some(before) => match (before, tr.state) {
                    (_, TrackState::Finished) if *before != TrackState::Finished => {
                        update.finished.push(tr.id)
                    }
                    (TrackState::Active, TrackState::Lost(_)) => update.lost.push(tr.id),
                    (_, TrackState::Active) => update.continued.push(tr.id),
                    _ => {}
                },
            }
        }
        Ok(update)
    }
}

/// Drive a whole sequence: init on the leading frame(s), then step through
/// the rest. `detections` supplies per-frame boxes for public modes.
pub fn run_sequence<M: TrackModel>(
    model: &M,
    cfg: &TrackerConfig,
    frames: &[FrameGrid],
    detections: Option<&[Vec<BoundingBox>]>,
) -> Result<Vec<Track>, TrackError> {
    if cfg.mode.uses_public_detections() && detections.is_none() {
        return Err(TrackError::MissingDetections { mode: cfg.mode });
    }
    let mut engine = TrackEngine::new(model, cfg.clone())?;
    let det0: Option<&[BoundingBox]> =
        detections.map(|d| d.first().map(Vec::as_slice).unwrap_or(&[]));
    let (_, consumed) = engine.init(frames, det0)?;
    for t in consumed..frames.len() {
        let dets = detections
            .and_then(|d| d.get(t))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        engine.step(&frames[t], dets)?;
    }
    Ok(engine.into_tracks())
}
