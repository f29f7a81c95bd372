//! Cross-frame propagation maps read from video-to-video attention, seeded by
//! first-frame instance masks.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2};

use crate::dit::AttentionRecord;
use crate::error::{LabError, Result};
use crate::grounding::{HeadAggregation, LatentMap, Role};

pub type PropagationMap = LatentMap;

/// First-frame query locations `(h, w)` for one role, sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySet {
    pub role: Role,
    pub locations: Vec<(usize, usize)>,
}

impl QuerySet {
    pub fn new(role: Role, locations: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<_> = locations.into_iter().collect();
        Self {
            role,
            locations: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Verb queries are the union of subject and object queries.
    pub fn verb(sub: &QuerySet, obj: &QuerySet) -> QuerySet {
        QuerySet::new(
            Role::Verb,
            sub.locations.iter().chain(&obj.locations).copied(),
        )
    }
}

/// Coordinates of the one-cells of a first-frame latent mask.
pub fn query_set(mask0: &Array2<u8>, role: Role) -> Result<QuerySet> {
    if mask0.iter().any(|&v| v > 1) {
        return Err(LabError::data("query mask must be binary"));
    }
    let q = QuerySet::new(
        role,
        mask0
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|((h, w), _)| (h, w)),
    );
    if q.is_empty() {
        return Err(LabError::Empty(format!(
            "no {role} queries on the first frame"
        )));
    }
    Ok(q)
}

/// Mean over query rows of the head-summed v2v block.
pub fn propagation_map(record: &AttentionRecord, queries: &QuerySet) -> Result<PropagationMap> {
    propagation_map_with(record, queries, HeadAggregation::Sum)
}

pub fn propagation_map_with(
    record: &AttentionRecord,
    queries: &QuerySet,
    agg: HeadAggregation,
) -> Result<PropagationMap> {
    let layout = record.layout;
    if queries.is_empty() {
        return Err(LabError::Empty(format!("no {} queries", queries.role)));
    }
    // normalize ordering and duplicates even for hand-built sets
    let unique: BTreeSet<_> = queries.locations.iter().copied().collect();
    let nv = layout.n_video();
    let mut acc = Array1::<f64>::zeros(nv);
    for &(h, w) in &unique {
        if h >= layout.height || w >= layout.width {
            return Err(LabError::config(format!(
                "query ({h}, {w}) outside {}x{} grid",
                layout.height, layout.width
            )));
        }
        let q = layout.video_index(0, h, w);
        for head in 0..record.n_heads() {
            acc += &record.head_maps.slice(s![head, q, ..nv]);
        }
    }
    let mut scale = 1.0 / unique.len() as f64;
    if agg == HeadAggregation::Mean {
        scale /= record.n_heads() as f64;
    }
    acc *= scale;
    Ok(LatentMap {
        values: acc
            .into_shape_with_order((layout.frames, layout.height, layout.width))
            .map_err(|e| LabError::shape(e.to_string()))?,
    })
}
