//! Layer ranking: influential layers by frequency/magnitude rank sum, and
//! interaction-dominant layers by success/failure separation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grounding::{csv_err, AasTable, Variant};

/// Per clip, per layer step-averaged AAS.
pub type PerVideo = BTreeMap<String, BTreeMap<usize, f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub frequency: usize,
    pub magnitude: f64,
    pub frequency_rank: usize,
    pub magnitude_rank: usize,
    pub rank_sum: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceStats {
    pub layer: usize,
    pub mean_success: f64,
    pub mean_failure: f64,
    pub mean_all: f64,
    pub success_gap: f64,
    pub failure_gap: f64,
    pub separation: f64,
}

/// Layers of one video ordered by AAS (descending, lower index first on ties).
pub fn top_layers(aas: &BTreeMap<usize, f64>, k: usize) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = aas.iter().map(|(&l, &a)| (l, a)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(l, _)| l).collect()
}

/// Competition ranks (best = 1), larger values ranked first.
fn competition_ranks<T: PartialOrd>(values: &[T]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|o| *o > v).count())
        .collect()
}

fn check_coverage(per_video: &PerVideo) -> Result<Vec<usize>> {
    let Some(first) = per_video.values().next() else {
        return Err(LabError::Empty("AAS table has no videos".into()));
    };
    let layers: Vec<usize> = first.keys().copied().collect();
    if layers.is_empty() {
        return Err(LabError::Empty("AAS table has no layers".into()));
    }
    for (clip, m) in per_video {
        if m.keys().copied().ne(layers.iter().copied()) {
            return Err(LabError::data(format!(
                "clip {clip} does not cover the same layers as the others"
            )));
        }
    }
    Ok(layers)
}

/// Frequency/magnitude statistics for every layer, in layer order.
pub fn layer_stats(per_video: &PerVideo, top_k_per_video: usize) -> Result<Vec<LayerStats>> {
    let layers = check_coverage(per_video)?;
    let n = per_video.len() as f64;
    let mut freq = vec![0usize; layers.len()];
    let mut mag = vec![0.0f64; layers.len()];
    for m in per_video.values() {
        for l in top_layers(m, top_k_per_video) {
            let i = layers.binary_search(&l).expect("covered layer");
            freq[i] += 1;
        }
        for (i, l) in layers.iter().enumerate() {
            mag[i] += m[l];
        }
    }
    for m in &mut mag {
        *m /= n;
    }
    let fr = competition_ranks(&freq);
    let mr = competition_ranks(&mag);
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| LayerStats {
            layer,
            frequency: freq[i],
            magnitude: mag[i],
            frequency_rank: fr[i],
            magnitude_rank: mr[i],
            rank_sum: fr[i] + mr[i],
        })
        .collect())
}

/// `select_k` layers with the smallest rank sum; ties by magnitude, then index.
pub fn influential_layers(
    per_video: &PerVideo,
    top_k_per_video: usize,
    select_k: usize,
) -> Result<(Vec<usize>, Vec<LayerStats>)> {
    let stats = layer_stats(per_video, top_k_per_video)?;
    let mut order: Vec<&LayerStats> = stats.iter().collect();
    order.sort_by(|a, b| {
        a.rank_sum
            .cmp(&b.rank_sum)
            .then(b.magnitude.total_cmp(&a.magnitude))
            .then(a.layer.cmp(&b.layer))
    });
    let chosen = order.iter().take(select_k).map(|s| s.layer).collect();
    Ok((chosen, stats))
}

/// Ranks `layers` by success/failure separation (descending, lower index on ties).
pub fn dominant_layers(
    per_video: &PerVideo,
    labels: &BTreeMap<String, bool>,
    layers: &[usize],
) -> Result<Vec<DominanceStats>> {
    check_coverage(per_video)?;
    for clip in per_video.keys() {
        if !labels.contains_key(clip) {
            return Err(LabError::data(format!("clip {clip} has no success label")));
        }
    }
    let n_succ = per_video.keys().filter(|c| labels[*c]).count();
    let n_fail = per_video.len() - n_succ;
    if n_succ == 0 || n_fail == 0 {
        return Err(LabError::data(
            "need at least one success and one failure clip",
        ));
    }
    if n_succ != n_fail {
        log::warn!(
            "unequal label sets ({n_succ} success, {n_fail} failure); gaps use the pooled mean"
        );
    }
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let (mut ss, mut sf) = (0.0, 0.0);
        for (clip, m) in per_video {
            let v = *m
                .get(&layer)
                .ok_or_else(|| LabError::data(format!("layer {layer} missing for clip {clip}")))?;
            if labels[clip] {
                ss += v;
            } else {
                sf += v;
            }
        }
        let mean_success = ss / n_succ as f64;
        let mean_failure = sf / n_fail as f64;
        let mean_all = (ss + sf) / (n_succ + n_fail) as f64;
        let (success_gap, failure_gap) = if n_succ == n_fail {
            let half = (mean_success - mean_failure) / 2.0;
            (half, -half)
        } else {
            (mean_success - mean_all, mean_failure - mean_all)
        };
        out.push(DominanceStats {
            layer,
            mean_success,
            mean_failure,
            mean_all,
            success_gap,
            failure_gap,
            separation: success_gap - failure_gap,
        });
    }
    out.sort_by(|a, b| {
        b.separation
            .total_cmp(&a.separation)
            .then(a.layer.cmp(&b.layer))
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominantEntry {
    pub layer: usize,
    pub stats: DominanceStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub variant: Variant,
    pub influential: Vec<usize>,
    pub dominant: Vec<DominantEntry>,
    #[serde(skip)]
    pub layer_stats: Vec<LayerStats>,
}

/// Full ranking of one variant; `labels` may be empty to skip dominance.
pub fn rank_variant(
    table: &AasTable,
    variant: Variant,
    labels: &BTreeMap<String, bool>,
    top_k_per_video: usize,
    select_k: usize,
) -> Result<RankingReport> {
    let per_video = table.per_video(variant);
    let (influential, layer_stats) = influential_layers(&per_video, top_k_per_video, select_k)?;
    let dominant = if labels.is_empty() {
        Vec::new()
    } else {
        dominant_layers(&per_video, labels, &influential)?
            .into_iter()
            .map(|stats| DominantEntry {
                layer: stats.layer,
                stats,
            })
            .collect()
    };
    Ok(RankingReport {
        variant,
        influential,
        dominant,
        layer_stats,
    })
}

impl RankingReport {
    /// First `n` dominant layers, or influential ones when no labels were given.
    pub fn top(&self, n: usize) -> Vec<usize> {
        if self.dominant.is_empty() {
            self.influential.iter().take(n).copied().collect()
        } else {
            self.dominant.iter().take(n).map(|d| d.layer).collect()
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| LabError::io(path, e))
    }

    /// Plot data: one row per layer.
    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record([
            "variant",
            "layer",
            "frequency",
            "magnitude",
            "rank_sum",
            "success_gap",
            "failure_gap",
            "separation",
        ])
        .map_err(|e| csv_err(path, e))?;
        for s in &self.layer_stats {
            let dom = self.dominant.iter().find(|d| d.layer == s.layer);
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                self.variant.as_str().to_string(),
                s.layer.to_string(),
                s.frequency.to_string(),
                s.magnitude.to_string(),
                s.rank_sum.to_string(),
                f(dom.map(|d| d.stats.success_gap)),
                f(dom.map(|d| d.stats.failure_gap)),
                f(dom.map(|d| d.stats.separation)),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))
    }
}
