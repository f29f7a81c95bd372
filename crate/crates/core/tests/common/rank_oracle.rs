//! Brute-force layer ranking used as an independent oracle.
//!
//! Every ordering is produced by repeated "pick the element no remaining
//! element beats" scans instead of sorting, and ranks by direct counting.

use std::collections::BTreeMap;

pub type PerVideo = BTreeMap<String, BTreeMap<usize, f64>>;

/// `a` beats `b` within one video.
fn video_beats(m: &BTreeMap<usize, f64>, a: usize, b: usize) -> bool {
    m[&a] > m[&b] || (m[&a] == m[&b] && a < b)
}

pub fn in_top_k(m: &BTreeMap<usize, f64>, layer: usize, k: usize) -> bool {
    m.keys()
        .filter(|&&o| o != layer && video_beats(m, o, layer))
        .count()
        < k
}

/// `(layer, frequency, magnitude, rank_sum)` per layer.
pub fn stats(per_video: &PerVideo, k: usize) -> Vec<(usize, usize, f64, usize)> {
    let layers: Vec<usize> = per_video.values().next().unwrap().keys().copied().collect();
    let freq: Vec<usize> = layers
        .iter()
        .map(|&l| per_video.values().filter(|m| in_top_k(m, l, k)).count())
        .collect();
    let mag: Vec<f64> = layers
        .iter()
        .map(|l| per_video.values().map(|m| m[l]).sum::<f64>() / per_video.len() as f64)
        .collect();
    (0..layers.len())
        .map(|i| {
            let fr = 1 + (0..layers.len()).filter(|&j| freq[j] > freq[i]).count();
            let mr = 1 + (0..layers.len()).filter(|&j| mag[j] > mag[i]).count();
            (layers[i], freq[i], mag[i], fr + mr)
        })
        .collect()
}

fn select_by<T: Copy>(mut pool: Vec<T>, beats: impl Fn(&T, &T) -> bool, n: usize) -> Vec<T> {
    let mut out = Vec::new();
    while out.len() < n && !pool.is_empty() {
        let i = (0..pool.len())
            .find(|&i| (0..pool.len()).all(|j| j == i || !beats(&pool[j], &pool[i])))
            .expect("strict order has a maximum");
        out.push(pool.remove(i));
    }
    out
}

pub fn influential(per_video: &PerVideo, k: usize, select_k: usize) -> Vec<usize> {
    let beats = |a: &(usize, usize, f64, usize), b: &(usize, usize, f64, usize)| {
        a.3 < b.3 || (a.3 == b.3 && (a.2 > b.2 || (a.2 == b.2 && a.0 < b.0)))
    };
    select_by(stats(per_video, k), beats, select_k)
        .into_iter()
        .map(|s| s.0)
        .collect()
}

/// Layers ordered by success-minus-failure mean, lower index on ties.
pub fn dominant(
    per_video: &PerVideo,
    labels: &BTreeMap<String, bool>,
    layers: &[usize],
) -> Vec<(usize, f64)> {
    let sep: Vec<(usize, f64)> = layers
        .iter()
        .map(|&l| {
            let mean = |want: bool| {
                let v: Vec<f64> = per_video
                    .iter()
                    .filter(|(c, _)| labels[*c] == want)
                    .map(|(_, m)| m[&l])
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let (s, f) = (mean(true), mean(false));
            let all = per_video.values().map(|m| m[&l]).sum::<f64>() / per_video.len() as f64;
            (l, (s - all) - (f - all))
        })
        .collect();
    select_by(
        sep,
        |a, b| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0),
        layers.len(),
    )
}
