//! Attention read-outs of a model over clips: noisy-latent forward passes at
//! chosen timesteps, grounding and propagation maps per role, AAS rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align_losses::{sample_noise, TrainExample};
use crate::dit::{AttentionEdits, AttentionRecord, NoiseSchedule, ToyDit};
use crate::error::{LabError, Result};
use crate::grounding::{aas, grounding_map, AasRow, AasTable, Role, Variant};
use crate::propagation::{propagation_map, QuerySet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub timesteps: Vec<usize>,
    /// `None` captures every layer.
    pub layers: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![0, 5, 10, 15],
            layers: None,
            seed: 0,
        }
    }
}

/// Stable 64-bit FNV-1a of a clip id, used to derive per-clip noise seeds.
pub fn clip_seed(seed: u64, clip_id: &str, t: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in clip_id.bytes().chain(t.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// AAS rows of one record for every variant and role the example supports.
pub fn record_rows(rec: &AttentionRecord, ex: &TrainExample, step: usize) -> Result<Vec<AasRow>> {
    let mut rows = Vec::new();
    let mut push = |variant: Variant, role: Role, value: f64| {
        rows.push(AasRow {
            clip_id: ex.clip_id.clone(),
            layer: rec.layer,
            step,
            variant,
            role,
            aas: value,
        })
    };
    for spec in &ex.specs {
        let v = aas(&grounding_map(rec, spec)?, ex.latent_mask(spec.role))?;
        push(Variant::for_role(spec.role, true), spec.role, v);
    }
    let mut queries = ex.queries.clone();
    let sub = ex.queries.iter().find(|q| q.role == Role::Sub);
    let obj = ex.queries.iter().find(|q| q.role == Role::Obj);
    if let (Some(s), Some(o)) = (sub, obj) {
        queries.push(QuerySet::verb(s, o));
    }
    for q in &queries {
        let v = aas(&propagation_map(rec, q)?, ex.latent_mask(q.role))?;
        push(Variant::for_role(q.role, false), q.role, v);
    }
    Ok(rows)
}

/// One row per (clip, layer, step, variant, role).
pub fn analyze(
    model: &ToyDit,
    examples: &[TrainExample],
    cfg: &AnalysisConfig,
) -> Result<AasTable> {
    let mc = model.config();
    if examples.is_empty() {
        return Err(LabError::Empty("no clips to analyze".into()));
    }
    if cfg.timesteps.is_empty() {
        return Err(LabError::Empty("no analysis timesteps".into()));
    }
    let layers: Vec<usize> = cfg
        .layers
        .clone()
        .unwrap_or_else(|| (0..mc.n_layers).collect());
    let schedule = NoiseSchedule::linear(mc.timesteps);
    let mut table = AasTable::new();
    for ex in examples {
        for &t in &cfg.timesteps {
            if t >= mc.timesteps {
                return Err(LabError::config(format!(
                    "analysis step {t} >= T = {}",
                    mc.timesteps
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, &ex.clip_id, t));
            let noise = sample_noise(&mut rng, mc);
            let noisy = schedule.add_noise(&ex.latent, &noise, t);
            let (_, records) = model.predict(
                &ex.conditions(noisy),
                &ex.prompt,
                t,
                &layers,
                &AttentionEdits::new(),
            )?;
            for rec in &records {
                for row in record_rows(rec, ex, t)? {
                    table.push(row);
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthetic_data::generate;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            latent_frames: 2,
            latent_height: 4,
            latent_width: 4,
            text_len: 16,
            timesteps: 6,
            ..Default::default()
        }
    }

    #[test]
    fn one_row_per_layer_step_variant_role() {
        let cfg = small();
        let model = ToyDit::new(cfg.clone()).unwrap();
        let ex: Vec<_> = generate(2, 1, &cfg)
            .unwrap()
            .iter()
            .map(|g| TrainExample::from_clip(&g.clip, &g.video, &cfg).unwrap())
            .collect();
        let ac = AnalysisConfig {
            timesteps: vec![0, 3],
            ..Default::default()
        };
        let table = analyze(&model, &ex, &ac).unwrap();
        // 3 layers x 2 steps x (3 v2t + 3 v2v roles) per clip
        assert_eq!(table.rows.len(), 2 * 3 * 2 * 6);
        let heads = cfg.n_heads as f64;
        for r in &table.rows {
            // v2v maps average query rows; v2t maps sum over all query rows
            let cap = if r.variant.is_v2t() {
                heads * cfg.n_video() as f64
            } else {
                heads
            };
            assert!(r.aas >= 0.0 && r.aas <= cap + 1e-9, "{r:?}");
        }
        assert_eq!(table, analyze(&model, &ex, &ac).unwrap());
        let bad = AnalysisConfig {
            timesteps: vec![6],
            ..Default::default()
        };
        assert!(analyze(&model, &ex, &bad).is_err());
    }

    #[test]
    fn clip_seed_depends_on_all_inputs() {
        let a = clip_seed(1, "clip0000", 0);
        assert_ne!(a, clip_seed(2, "clip0000", 0));
        assert_ne!(a, clip_seed(1, "clip0001", 0));
        assert_ne!(a, clip_seed(1, "clip0000", 1));
        assert_eq!(a, clip_seed(1, "clip0000", 0));
    }
}
