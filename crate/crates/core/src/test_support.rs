use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SequenceLayout;
use crate::dit::AttentionRecord;

/// Random row-stochastic attention record.
pub fn random_record(layout: SequenceLayout, heads: usize, seed: u64) -> AttentionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layout.seq_len();
    let mut maps = Array3::from_shape_fn((heads, n, n), |_| rng.random_range(0.0..1.0));
    for h in 0..heads {
        for r in 0..n {
            let mut row = maps.slice_mut(s![h, r, ..]);
            let total = row.sum();
            row /= total;
        }
    }
    AttentionRecord::new(0, layout, maps).unwrap()
}
