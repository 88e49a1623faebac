//! Query batch assembly for the tracking protocols.

use crate::grad::Tensor;

use super::{BoundingBox, ModelConfig, ModelError, QueryKind, SemanticQueryBundle};

/// Detection protocol: where per-frame boxes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingMode {
    /// Dataset detections only; no static det queries.
    Public,
    /// Static det queries only.
    Private,
    /// Both det queries and provided detections.
    PrivateAndPublic,
}

impl TrackingMode {
    pub fn uses_det_queries(&self) -> bool {
        !matches!(self, TrackingMode::Public)
    }

    pub fn uses_public_detections(&self) -> bool {
        !matches!(self, TrackingMode::Private)
    }
}

/// Which query kinds the decoder is fed. Disabling kinds reproduces the
/// single-query ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryKindSet {
    pub pos: bool,
    pub id: bool,
    pub both: bool,
    pub det: bool,
}

impl QueryKindSet {
    pub fn all() -> Self {
        QueryKindSet { pos: true, id: true, both: true, det: true }
    }

    pub fn single(kind: QueryKind) -> Self {
        let mut s = QueryKindSet { pos: false, id: false, both: false, det: false };
        match kind {
            QueryKind::Pos => s.pos = true,
            QueryKind::Id => s.id = true,
            QueryKind::Both => s.both = true,
            QueryKind::Det => s.det = true,
        }
        s
    }

    pub fn contains(&self, kind: QueryKind) -> bool {
        match kind {
            QueryKind::Pos => self.pos,
            QueryKind::Id => self.id,
            QueryKind::Both => self.both,
            QueryKind::Det => self.det,
        }
    }
}

/// Who an input query (and hence its output) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryOwner {
    Track(u32),
    /// Static det queries and public-detection pos queries.
    Detection,
}

/// Payload the decoder embeds for one query.
#[derive(Debug, Clone)]
pub enum QuerySource {
    /// A box to encode (`pos` queries).
    Box(BoundingBox),
    /// A previous appearance vector (`id` queries), d_app wide.
    Appearance(Tensor),
    /// A previous decoder embedding (`both` queries), d_model wide.
    Embedding(Tensor),
    /// Index into the learned static det-query pool.
    DetIndex(usize),
}

#[derive(Debug, Clone)]
pub struct Query {
    pub kind: QueryKind,
    pub owner: QueryOwner,
    pub source: QuerySource,
    /// Tag-pool index added to track-owned queries.
    pub tag: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct QueryBatch {
    pub queries: Vec<Query>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Assemble the decoder input for one frame: up to three semantic queries
/// per active track (tagged), the static det queries (private modes), and
/// one pos query per provided detection (public modes).
pub fn build_query_batch(
    tracks: &[(u32, SemanticQueryBundle)],
    public_detections: &[BoundingBox],
    mode: TrackingMode,
    config: &ModelConfig,
) -> Result<QueryBatch, ModelError> {
    if tracks.len() > config.n_tags {
        return Err(ModelError::TagCapacity { active: tracks.len(), n_tags: config.n_tags });
    }
    let mut queries = Vec::new();
    for (id, bundle) in tracks {
        debug_assert!(bundle.tag_index < config.n_tags, "tag index out of pool");
        for kind in QueryKind::SEMANTIC {
            if !config.enabled_kinds.contains(kind) {
                continue;
            }
            let source = match kind {
                QueryKind::Pos => QuerySource::Box(bundle.b_prev),
                QueryKind::Id => QuerySource::Appearance(bundle.a_prev.clone()),
                QueryKind::Both => QuerySource::Embedding(bundle.v_prev.clone()),
                QueryKind::Det => unreachable!(),
            };
            queries.push(Query {
                kind,
                owner: QueryOwner::Track(*id),
                source,
                tag: Some(bundle.tag_index),
            });
        }
    }
    if mode.uses_det_queries() && config.enabled_kinds.det {
        for i in 0..config.n_det_queries {
            queries.push(Query {
                kind: QueryKind::Det,
                owner: QueryOwner::Detection,
                source: QuerySource::DetIndex(i),
                tag: None,
            });
        }
    }
    if mode.uses_public_detections() {
        for b in public_detections {
            b.validate()?;
            queries.push(Query {
                kind: QueryKind::Pos,
                owner: QueryOwner::Detection,
                source: QuerySource::Box(*b),
                tag: None,
            });
        }
    }
    Ok(QueryBatch { queries })
}
