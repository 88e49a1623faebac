//! Flat key-value run configuration.
//!
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys are rejected. The effective (fully resolved) config is written next
//! to command outputs for provenance.

use serde::{Deserialize, Serialize};

use mqt_core::assoc::LossWeights;
use mqt_core::model::{ModelConfig, QueryKindSet, TrackingMode};
use mqt_core::scene::SceneConfig;
use mqt_core::track::{B2fParams, MemoryMetric, TrackerConfig};
use mqt_core::train::TrainSchedule;

macro_rules! default_fns {
    ($($name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $name() -> $ty { $value })*
    };
}

default_fns! {
    d_model: usize = 32;
    d_ff: usize = 64;
    n_heads: usize = 4;
    n_enc_layers: usize = 2;
    n_dec_layers: usize = 2;
    d_app: usize = 16;
    n_det_queries: usize = 16;
    n_tags: usize = 8;
    agg: String = "collab_gating".into();
    query_kinds: String = "all".into();
    tau_conf: f64 = 0.75;
    tau_agree: f64 = 0.1;
    k_hyp: usize = 1;
    mem_keep_first: bool = true;
    mem_last: usize = 5;
    memory_metric: String = "min".into();
    lost_patience: u32 = 3;
    mode: String = "private-and-public".into();
    height: usize = 12;
    width: usize = 12;
    channels: usize = 3;
    objects_min: usize = 3;
    objects_max: usize = 3;
    speed_min: f64 = 0.005;
    speed_max: f64 = 0.02;
    size_min: f64 = 0.15;
    size_max: f64 = 0.25;
    palette: usize = 8;
    occlusion_rate: f64 = 0.0;
    occlusion_min: usize = 1;
    occlusion_max: usize = 3;
    jitter: f64 = 0.002;
    app_noise: f64 = 0.0;
    length: usize = 30;
    w_app_cost: f64 = 1.0;
    w_app_loss: f64 = 2.0;
    w_l1: f64 = 5.0;
    w_giou: f64 = 2.0;
    w_neg: f64 = 0.1;
    iterations: usize = 3000;
    lr: f64 = 3e-3;
    lr_decay_factor: f64 = 0.1;
    lr_decay_at: f64 = 0.8;
    clip_grad_norm: f64 = 1.0;
    pos_query_noise: f64 = 0.03;
    use_pseudo_pairs: bool = false;
    max_aug: f64 = 0.05;
    det_dropout: f64 = 0.15;
    track_dropout: f64 = 0.4;
    pub_det_rate: f64 = 0.5;
    bg_attract: f64 = 0.05;
    fresh_scenes: bool = false;
    log_every: usize = 50;
    seed: u64 = 7;
    b2f_overlap: f64 = 0.5;
    b2f_id_match: f64 = 0.4;
    b2f_fill: bool = true;
    b2f_use_id: bool = true;
    iou_thresh: f64 = 0.5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    #[serde(default = "n_heads")]
    pub n_heads: usize,
    #[serde(default = "n_enc_layers")]
    pub n_enc_layers: usize,
    #[serde(default = "n_dec_layers")]
    pub n_dec_layers: usize,
    #[serde(default = "d_app")]
    pub d_app: usize,
    #[serde(default = "n_det_queries")]
    pub n_det_queries: usize,
    #[serde(default = "n_tags")]
    pub n_tags: usize,
    /// collab_gating | avg | max | heuristic
    #[serde(default = "agg")]
    pub agg: String,
    /// "all" or a '+'-joined subset of pos, id, both, det
    #[serde(default = "query_kinds")]
    pub query_kinds: String,
    // tracker
    #[serde(default = "tau_conf")]
    pub tau_conf: f64,
    #[serde(default = "tau_agree")]
    pub tau_agree: f64,
    #[serde(default = "k_hyp")]
    pub k_hyp: usize,
    #[serde(default = "mem_keep_first")]
    pub mem_keep_first: bool,
    #[serde(default = "mem_last")]
    pub mem_last: usize,
    /// min | avg
    #[serde(default = "memory_metric")]
    pub memory_metric: String,
    #[serde(default = "lost_patience")]
    pub lost_patience: u32,
    /// public | private | private-and-public
    #[serde(default = "mode")]
    pub mode: String,
    // scene
    #[serde(default = "height")]
    pub height: usize,
    #[serde(default = "width")]
    pub width: usize,
    #[serde(default = "channels")]
    pub channels: usize,
    #[serde(default = "objects_min")]
    pub objects_min: usize,
    #[serde(default = "objects_max")]
    pub objects_max: usize,
    #[serde(default = "speed_min")]
    pub speed_min: f64,
    #[serde(default = "speed_max")]
    pub speed_max: f64,
    #[serde(default = "size_min")]
    pub size_min: f64,
    #[serde(default = "size_max")]
    pub size_max: f64,
    #[serde(default = "palette")]
    pub palette: usize,
    #[serde(default = "occlusion_rate")]
    pub occlusion_rate: f64,
    #[serde(default = "occlusion_min")]
    pub occlusion_min: usize,
    #[serde(default = "occlusion_max")]
    pub occlusion_max: usize,
    #[serde(default = "jitter")]
    pub jitter: f64,
    #[serde(default = "app_noise")]
    pub app_noise: f64,
    #[serde(default = "length")]
    pub length: usize,
    // loss
    #[serde(default = "w_app_cost")]
    pub w_app_cost: f64,
    #[serde(default = "w_app_loss")]
    pub w_app_loss: f64,
    #[serde(default = "w_l1")]
    pub w_l1: f64,
    #[serde(default = "w_giou")]
    pub w_giou: f64,
    #[serde(default = "w_neg")]
    pub w_neg: f64,
    // training
    #[serde(default = "iterations")]
    pub iterations: usize,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default = "lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "lr_decay_at")]
    pub lr_decay_at: f64,
    #[serde(default = "clip_grad_norm")]
    pub clip_grad_norm: f64,
    #[serde(default = "pos_query_noise")]
    pub pos_query_noise: f64,
    #[serde(default = "use_pseudo_pairs")]
    pub use_pseudo_pairs: bool,
    #[serde(default = "max_aug")]
    pub max_aug: f64,
    #[serde(default = "det_dropout")]
    pub det_dropout: f64,
    #[serde(default = "track_dropout")]
    pub track_dropout: f64,
    #[serde(default = "pub_det_rate")]
    pub pub_det_rate: f64,
    #[serde(default = "bg_attract")]
    pub bg_attract: f64,
    /// Train on generator-streamed two-frame scenes instead of stored data.
    #[serde(default = "fresh_scenes")]
    pub fresh_scenes: bool,
    #[serde(default = "log_every")]
    pub log_every: usize,
    #[serde(default = "seed")]
    pub seed: u64,
    // b2f and eval
    #[serde(default = "b2f_overlap")]
    pub b2f_overlap: f64,
    #[serde(default = "b2f_id_match")]
    pub b2f_id_match: f64,
    #[serde(default = "b2f_fill")]
    pub b2f_fill: bool,
    #[serde(default = "b2f_use_id")]
    pub b2f_use_id: bool,
    #[serde(default = "iou_thresh")]
    pub iou_thresh: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn tracking_mode(&self) -> Result<TrackingMode, String> {
        match self.mode.as_str() {
            "public" => Ok(TrackingMode::Public),
            "private" => Ok(TrackingMode::Private),
            "private-and-public" | "private_and_public" => Ok(TrackingMode::PrivateAndPublic),
            other => Err(format!(
                "unknown mode {:?} (expected public, private or private-and-public)",
                other
            )),
        }
    }

    fn kinds(&self) -> Result<QueryKindSet, String> {
        if self.query_kinds == "all" {
            return Ok(QueryKindSet::all());
        }
        let mut set = QueryKindSet { pos: false, id: false, both: false, det: false };
        for part in self.query_kinds.split('+') {
            match part.trim() {
                "pos" => set.pos = true,
                "id" => set.id = true,
                "both" => set.both = true,
                "det" => set.det = true,
                other => return Err(format!("unknown query kind {:?}", other)),
            }
        }
        if [set.pos, set.id, set.both, set.det].iter().all(|b| !b) {
            return Err("query_kinds selects nothing".into());
        }
        Ok(set)
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let agg = match self.agg.as_str() {
            "collab_gating" => mqt_core::model::AggMethod::CollabGating,
            "avg" => mqt_core::model::AggMethod::Avg,
            "max" => mqt_core::model::AggMethod::Max,
            "heuristic" => mqt_core::model::AggMethod::Heuristic,
            other => return Err(format!("unknown aggregation {:?}", other)),
        };
        let cfg = ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_app: self.d_app,
            n_det_queries: self.n_det_queries,
            n_tags: self.n_tags,
            channels: self.channels,
            agg,
            enabled_kinds: self.kinds()?,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig, String> {
        let metric = match self.memory_metric.as_str() {
            "min" => MemoryMetric::Min,
            "avg" => MemoryMetric::Avg,
            other => return Err(format!("unknown memory metric {:?}", other)),
        };
        let cfg = TrackerConfig {
            tau_conf: self.tau_conf,
            tau_agree: self.tau_agree,
            k_hyp: self.k_hyp,
            mem_keep_first: self.mem_keep_first,
            mem_last: self.mem_last,
            memory_metric: metric,
            lost_patience: self.lost_patience,
            mode: self.tracking_mode()?,
            force_branch_path: false,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn scene_config(&self) -> Result<SceneConfig, String> {
        let cfg = SceneConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
            size_min: self.size_min,
            size_max: self.size_max,
            palette: self.palette,
            occlusion_rate: self.occlusion_rate,
            occlusion_min: self.occlusion_min,
            occlusion_max: self.occlusion_max,
            jitter: self.jitter,
            app_noise: self.app_noise,
            length: self.length,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> Result<LossWeights, String> {
        let w = LossWeights {
            w_app_cost: self.w_app_cost,
            w_app_loss: self.w_app_loss,
            w_l1: self.w_l1,
            w_giou: self.w_giou,
            w_neg: self.w_neg,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            iterations: self.iterations,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_at: self.lr_decay_at,
            clip_grad_norm: self.clip_grad_norm,
            pos_query_noise: self.pos_query_noise,
            use_pseudo_pairs: self.use_pseudo_pairs,
            max_aug: self.max_aug,
            det_dropout: self.det_dropout,
            track_dropout: self.track_dropout,
            pub_det_rate: self.pub_det_rate,
            bg_attract: self.bg_attract,
            seed: self.seed,
            log_every: self.log_every,
        }
    }

    pub fn b2f_params(&self) -> B2fParams {
        B2fParams {
            overlap_thresh: self.b2f_overlap,
            id_match_thresh: self.b2f_id_match,
            fill: self.b2f_fill,
            use_id_match: self.b2f_use_id,
        }
    }

}
