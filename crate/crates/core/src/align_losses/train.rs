use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LossWeights, TrainExample, TrainState};
use crate::autodiff::Mat;
use crate::config::{config_hash, ModelConfig};
use crate::dit::{AttentionEdits, NoiseSchedule, ParamStore, ToyDit};
use crate::error::{LabError, Result};
use crate::grounding::{aas, grounding_map, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub grounding_layers: Vec<usize>,
    pub propagation_layers: Vec<usize>,
    pub decoder_channels: usize,
    /// Learning-rate multiplier for the two decoders.
    pub decoder_lr_scale: f64,
    pub weights: LossWeights,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            grounding_layers: vec![2, 5],
            propagation_layers: vec![6],
            decoder_channels: 8,
            decoder_lr_scale: 1.0,
            weights: LossWeights::default(),
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0)
            || !(self.decoder_lr_scale > 0.0)
            || self.weight_decay < 0.0
            || self.decoder_channels == 0
        {
            return Err(LabError::config(
                "lr and decoder_lr_scale must be > 0, weight_decay >= 0, decoder_channels >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LabError::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let p = step as f64 / self.steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam with decoupled weight decay; moment buffers are created lazily per slot.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    scales: Vec<f64>,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, slots: usize) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            scales: vec![1.0; slots],
            m: vec![None; slots],
            v: vec![None; slots],
        }
    }

    /// Per-slot learning-rate multipliers.
    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        assert_eq!(scales.len(), self.scales.len(), "one scale per slot");
        self.scales = scales;
        self
    }

    /// Updates every parameter with a gradient; `None` slots stay untouched.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Option<Mat>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let lr = lr * self.scales[i];
            for (((w, &gr), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

fn clip_gradients(grads: &mut [Option<Mat>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_dm: f64,
    pub l_sga: f64,
    pub l_spa: f64,
    pub total: f64,
}

/// Gaussian noise for a latent of `cfg`'s shape.
pub fn sample_noise(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Array2<f64> {
    Array2::from_shape_simple_fn((cfg.n_video(), cfg.latent_channels()), || {
        rng.sample::<f64, _>(StandardNormal)
    })
}

/// Runs `cfg.steps` single-example AdamW steps. `on_step` sees each record
/// as it is produced.
pub fn train(
    state: &mut TrainState,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.steps > 0 && examples.is_empty() {
        return Err(LabError::Empty("training set is empty".into()));
    }
    let model_cfg = state.model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scales = state
        .param_names()
        .iter()
        .map(|n| {
            if n.starts_with("dec_") {
                cfg.decoder_lr_scale
            } else {
                1.0
            }
        })
        .collect();
    let mut opt = AdamW::new(cfg, state.param_names().len()).with_scales(scales);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ex = &examples[rng.random_range(0..examples.len())];
        let t = rng.random_range(0..model_cfg.timesteps);
        let noise = sample_noise(&mut rng, &model_cfg);
        let mut out = state.total_loss(ex, t, &noise, &cfg.weights, true)?;
        if out.loss.total > cfg.divergence_threshold {
            return Err(LabError::numeric(format!(
                "training diverged at step {step}: total loss {} (L_DM {}, L_SGA {}, L_SPA {})",
                out.loss.total, out.loss.l_dm, out.loss.l_sga, out.loss.l_spa
            )));
        }
        clip_gradients(&mut out.grads, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        let mut params = state.param_mats_mut();
        opt.step(&mut params, &out.grads, lr);
        let rec = LossRecord {
            step,
            l_dm: out.loss.l_dm,
            l_sga: out.loss.l_sga,
            l_spa: out.loss.l_spa,
            total: out.loss.total,
        };
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}

pub fn write_loss_ledger(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::grounding::csv_err(path, e))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| crate::grounding::csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Held-out measurements at fixed timesteps and noise seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l_sga: f64,
    pub l_spa: f64,
    pub l_dm: f64,
    /// Mean noun v2t AAS (sub, obj) over the grounding layers.
    pub aas_noun_v2t: f64,
}

pub fn evaluate(
    state: &TrainState,
    examples: &[TrainExample],
    timesteps: &[usize],
    seed: u64,
    weights: &LossWeights,
) -> Result<EvalReport> {
    if examples.is_empty() || timesteps.is_empty() {
        return Err(LabError::Empty("nothing to evaluate".into()));
    }
    let cfg = state.model.config().clone();
    let schedule = NoiseSchedule::linear(cfg.timesteps);
    let mut rep = EvalReport::default();
    let (mut n, mut n_aas) = (0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        for &t in timesteps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 20) ^ t as u64);
            let noise = sample_noise(&mut rng, &cfg);
            let out = state.total_loss(ex, t, &noise, weights, false)?;
            rep.l_sga += out.loss.l_sga;
            rep.l_spa += out.loss.l_spa;
            rep.l_dm += out.loss.l_dm;
            n += 1;
            let noisy = schedule.add_noise(&ex.latent, &noise, t);
            let (_, records) = state.model.predict(
                &ex.conditions(noisy),
                &ex.prompt,
                t,
                &state.grounding_layers,
                &AttentionEdits::new(),
            )?;
            for rec in &records {
                for spec in ex.specs.iter().filter(|s| s.role != Role::Verb) {
                    let map = grounding_map(rec, spec)?;
                    rep.aas_noun_v2t += aas(&map, ex.latent_mask(spec.role))?;
                    n_aas += 1;
                }
            }
        }
    }
    rep.l_sga /= n as f64;
    rep.l_spa /= n as f64;
    rep.l_dm /= n as f64;
    if n_aas > 0 {
        rep.aas_noun_v2t /= n_aas as f64;
    }
    Ok(rep)
}

const MAGIC: &[u8; 8] = b"MXLABCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    grounding_layers: Vec<usize>,
    propagation_layers: Vec<usize>,
    decoder_channels: usize,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Magic, `u32` header length, JSON header, then every tensor as f32 LE.
pub fn save_checkpoint(path: &Path, state: &TrainState, step: usize) -> Result<()> {
    let names = state.param_names();
    let mats = state.param_mats();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(state.model.config()),
        model: state.model.config().clone(),
        grounding_layers: state.grounding_layers.clone(),
        propagation_layers: state.propagation_layers.clone(),
        decoder_channels: state.dec_g.channels(),
        step,
        tensors: names
            .iter()
            .zip(&mats)
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for m in &mats {
        for &v in &m.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(&buf).map_err(|e| LabError::io(path, e))
}

/// Restores a [`TrainState`] and the step it was saved at.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, usize)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(LabError::data(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| LabError::data("checkpoint header truncated"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(LabError::data(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    if header.config_hash != config_hash(&header.model) {
        return Err(LabError::data(
            "checkpoint config hash does not match its config",
        ));
    }
    let mut state = TrainState::new(
        ToyDit::new(header.model.clone())?,
        header.grounding_layers.clone(),
        header.propagation_layers.clone(),
        header.decoder_channels,
        0,
    )?;
    let names = state.param_names();
    if names.len() != header.tensors.len()
        || names.iter().zip(&header.tensors).any(|(n, t)| *n != t.name)
    {
        return Err(LabError::data(
            "checkpoint tensors do not match the model layout",
        ));
    }
    let mut off = 12 + hlen;
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
    if bytes.len() != off + expected {
        return Err(LabError::data(format!(
            "checkpoint payload is {} bytes, header describes {expected}",
            bytes.len() - off
        )));
    }
    for (m, t) in state.param_mats_mut().into_iter().zip(&header.tensors) {
        if (m.rows, m.cols) != (t.rows, t.cols) {
            return Err(LabError::shape(format!(
                "tensor {} has the wrong shape",
                t.name
            )));
        }
        for v in m.data.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64;
            off += 4;
        }
    }
    Ok((state, header.step))
}

/// Rounds every parameter through f32, matching what a checkpoint stores.
pub fn quantize_like_checkpoint(store: &mut ParamStore) {
    for m in store.mats_mut() {
        m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
