//! End-to-end runs through generation, analysis, ranking, training and
//! checkpointing.

use std::collections::BTreeMap;

use matrix_lab::align_losses::{
    evaluate, load_checkpoint, save_checkpoint, train, LossWeights, TrainConfig, TrainExample,
    TrainState,
};
use matrix_lab::analysis::{analyze, AnalysisConfig};
use matrix_lab::dit::ToyDit;
use matrix_lab::grounding::Variant;
use matrix_lab::layer_select::rank_variant;
use matrix_lab::synthetic_data::generate;
use matrix_lab::ModelConfig;

fn dataset(n: usize, seed: u64) -> (Vec<TrainExample>, BTreeMap<String, bool>) {
    let cfg = ModelConfig::default();
    let clips = generate(n, seed, &cfg).unwrap();
    let labels = clips
        .iter()
        .map(|g| (g.clip.clip_id.clone(), g.clip.success.unwrap()))
        .collect();
    let ex = clips
        .iter()
        .map(|g| TrainExample::from_clip(&g.clip, &g.video, &cfg).unwrap())
        .collect();
    (ex, labels)
}

fn ranked_state(ex: &[TrainExample], labels: &BTreeMap<String, bool>) -> TrainState {
    let model = ToyDit::new(ModelConfig::default()).unwrap();
    let table = analyze(&model, ex, &AnalysisConfig::default()).unwrap();
    let g = rank_variant(&table, Variant::NounV2t, labels, 10, 10)
        .unwrap()
        .top(2);
    let p = rank_variant(&table, Variant::NounV2v, labels, 10, 10)
        .unwrap()
        .top(1);
    assert_eq!((g.len(), p.len()), (2, 1));
    TrainState::new(model, g, p, 4, 11).unwrap()
}

fn short_config(state: &TrainState) -> TrainConfig {
    TrainConfig {
        steps: 3,
        seed: 11,
        decoder_channels: 4,
        grounding_layers: state.grounding_layers.clone(),
        propagation_layers: state.propagation_layers.clone(),
        ..Default::default()
    }
}

#[test]
fn ranked_training_round_trips_through_a_checkpoint() {
    let (ex, labels) = dataset(6, 21);
    let mut state = ranked_state(&ex, &labels);
    let tc = short_config(&state);
    let mut seen = Vec::new();
    let ledger = train(&mut state, &ex[..4], &tc, |r| seen.push(r.step)).unwrap();
    assert_eq!(ledger.len(), 3);
    assert_eq!(seen, ledger.iter().map(|r| r.step).collect::<Vec<_>>());
    assert!(ledger.iter().all(|r| r.total.is_finite() && r.l_sga >= 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &state, 3).unwrap();
    let (loaded, step) = load_checkpoint(&path).unwrap();
    assert_eq!(step, 3);
    assert_eq!(loaded.grounding_layers, state.grounding_layers);
    assert_eq!(loaded.propagation_layers, state.propagation_layers);
    // Parameters are stored as f32.
    let w = LossWeights::default();
    let a = evaluate(&state, &ex[4..], &[0, 10], 5, &w).unwrap();
    let b = evaluate(&loaded, &ex[4..], &[0, 10], 5, &w).unwrap();
    for (x, y) in [
        (a.l_sga, b.l_sga),
        (a.l_spa, b.l_spa),
        (a.l_dm, b.l_dm),
        (a.aas_noun_v2t, b.aas_noun_v2t),
    ] {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn training_is_reproducible_from_its_seed() {
    let (ex, labels) = dataset(6, 21);
    let run = || {
        let mut state = ranked_state(&ex, &labels);
        let tc = short_config(&state);
        train(&mut state, &ex, &tc, |_| {}).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn a_truncated_checkpoint_is_rejected() {
    let (ex, labels) = dataset(6, 21);
    let state = ranked_state(&ex, &labels);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &state, 0).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
