//! A small deterministic multimodal DiT with 3D full attention over the
//! concatenated `[video | text]` sequence.
//!
//! Each block is pre-norm: `x += Attn(rms(x)) W_o; x += tanh(rms(x) W_1 + b_1) W_2`.
//! Attention probabilities of any layer can be captured, and post-softmax
//! keep-masks can be injected per layer for perturbed passes.

pub mod embed;
pub mod params;
pub mod record;
pub mod schedule;

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, Array3};

use crate::autodiff::{Graph, Mat, Var};
use crate::config::ModelConfig;
use crate::error::{LabError, Result};

pub use embed::ConditionChannels;
pub use params::{BoundParams, Initializer, ParamStore};
pub use record::{AttentionBlocks, AttentionRecord};
pub use schedule::{denoising_loss, NoiseSchedule};

/// Embedded token sequence fed to [`ToyDit::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[F_lat * H_lat * W_lat, d_model]`.
    pub video: Array2<f64>,
    /// `[text_len, d_model]`.
    pub text: Array2<f64>,
}

/// Post-softmax keep-masks keyed by layer. A zero entry in the `[S, S]` mask
/// zeroes that attention weight in every head; nothing is renormalized.
#[derive(Clone, Debug, Default)]
pub struct AttentionEdits {
    masks: BTreeMap<usize, Rc<Mat>>,
}

impl AttentionEdits {
    pub fn new() -> Self {
        Self::default()
    }

    /// Combines with any mask already present at `layer` (entrywise product).
    pub fn insert(&mut self, layer: usize, keep: Mat) {
        let merged = match self.masks.remove(&layer) {
            Some(prev) => {
                let data = prev
                    .data
                    .iter()
                    .zip(&keep.data)
                    .map(|(a, b)| a * b)
                    .collect();
                Mat::from_vec(keep.rows, keep.cols, data)
            }
            None => keep,
        };
        self.masks.insert(layer, Rc::new(merged));
    }

    pub fn get(&self, layer: usize) -> Option<&Rc<Mat>> {
        self.masks.get(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.keys().copied()
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardTrace {
    /// `[N_v, latent_channels]` noise prediction.
    pub prediction: Var,
    /// Per layer, per head `[S, S]` attention probabilities (after edits).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDit {
    config: ModelConfig,
    params: ParamStore,
}

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Attention projections of a layer.
pub const ATTENTION_PARAMS: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl ToyDit {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(config.seed);
        let d = config.d_model;
        let mut params = ParamStore::new();
        params.insert(
            "input_proj",
            init.linear(config.condition_channels(), d, 1.0),
        );
        params.insert("input_bias", Mat::zeros(1, d));
        params.insert("text_embed", init.normal(config.vocab_size, d, 1.0));
        for l in 0..config.n_layers {
            params.insert(layer_param(l, "wq"), init.linear(d, d, 1.0));
            params.insert(layer_param(l, "wk"), init.linear(d, d, 1.0));
            params.insert(layer_param(l, "wv"), init.linear(d, d, 1.0));
            params.insert(layer_param(l, "wo"), init.linear(d, d, 0.5));
            params.insert(
                layer_param(l, "w1"),
                init.linear(d, config.mlp_hidden(), 1.0),
            );
            params.insert(layer_param(l, "b1"), Mat::zeros(1, config.mlp_hidden()));
            params.insert(
                layer_param(l, "w2"),
                init.linear(config.mlp_hidden(), d, 0.5),
            );
        }
        params.insert("out_proj", init.linear(d, config.latent_channels(), 1.0));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        if fresh.params.names() != params.names() {
            return Err(LabError::data(
                "parameter names do not match the model config",
            ));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.mats()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(LabError::shape(format!(
                    "parameter {name} has the wrong shape"
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_prompt(&self, prompt: &[usize]) -> Result<()> {
        if prompt.len() != self.config.text_len {
            return Err(LabError::shape(format!(
                "prompt has {} tokens, model expects {}",
                prompt.len(),
                self.config.text_len
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::data(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.config.timesteps {
            return Err(LabError::config(format!(
                "timestep {t} outside [0, {})",
                self.config.timesteps
            )));
        }
        Ok(())
    }

    /// Builds input tokens inside `g` so the input projection can be trained.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        cond: &Mat,
        prompt: &[usize],
    ) -> (Var, Var) {
        let cfg = &self.config;
        let c = g.constant(cond.clone());
        let proj = g.matmul(c, bound.var("input_proj"));
        let biased = g.add_row(proj, bound.var("input_bias"));
        let pos = g.constant(embed::video_position_encoding(cfg));
        let video = g.add(biased, pos);
        let ids = Rc::new(prompt.iter().map(|&t| t as u32).collect::<Vec<_>>());
        let words = g.gather_rows(bound.var("text_embed"), ids);
        let tpos = g.constant(embed::text_position_encoding(cfg));
        let text = g.add(words, tpos);
        (video, text)
    }

    /// Transformer trunk from embedded tokens.
    pub fn trunk_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        video: Var,
        text: Var,
        timestep: usize,
        edits: &AttentionEdits,
    ) -> ForwardTrace {
        let cfg = &self.config;
        let (nh, dh) = (cfg.n_heads, cfg.d_head());
        let temb = g.constant(embed::timestep_embedding(timestep, cfg.d_model));
        let video = g.add_row(video, temb);
        let mut x = g.concat_rows(&[video, text]);
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let n = g.rms_norm(x);
            let q = g.matmul(n, bound.var(&layer_param(l, "wq")));
            let k = g.matmul(n, bound.var(&layer_param(l, "wk")));
            let v = g.matmul(n, bound.var(&layer_param(l, "wv")));
            let keep = edits.get(l).map(|m| g.constant((**m).clone()));
            let mut heads = Vec::with_capacity(nh);
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let mut a = g.softmax(scores);
                if let Some(keep) = keep {
                    a = g.mul(a, keep);
                }
                probs.push(a);
                heads.push(g.matmul(a, vh));
            }
            attention.push(probs);
            let merged = g.concat_cols(&heads);
            let o = g.matmul(merged, bound.var(&layer_param(l, "wo")));
            x = g.add(x, o);
            let n2 = g.rms_norm(x);
            let hdn = g.matmul(n2, bound.var(&layer_param(l, "w1")));
            let hdn = g.add_row(hdn, bound.var(&layer_param(l, "b1")));
            let hdn = g.tanh(hdn);
            let m = g.matmul(hdn, bound.var(&layer_param(l, "w2")));
            x = g.add(x, m);
        }
        let n = g.rms_norm(x);
        let vid = g.slice_rows(n, 0, cfg.n_video());
        let prediction = g.matmul(vid, bound.var("out_proj"));
        ForwardTrace {
            prediction,
            attention,
        }
    }

    /// Full graph from conditions and prompt ids.
    pub fn trace(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        cond: &Mat,
        prompt: &[usize],
        timestep: usize,
        edits: &AttentionEdits,
    ) -> ForwardTrace {
        let (video, text) = self.embed_graph(g, bound, cond, prompt);
        self.trunk_graph(g, bound, video, text, timestep, edits)
    }

    /// Embeds conditions and prompt into a [`TokenSequence`] (no timestep).
    pub fn embed(&self, cond: &ConditionChannels, prompt: &[usize]) -> Result<TokenSequence> {
        self.check_prompt(prompt)?;
        let m = cond.to_matrix(&self.config)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, &|_| false);
        let (v, t) = self.embed_graph(&mut g, &bound, &m, prompt);
        Ok(TokenSequence {
            video: to_array2(g.value(v)),
            text: to_array2(g.value(t)),
        })
    }

    /// Denoising prediction and post-softmax attention for `capture` layers.
    pub fn forward(
        &self,
        tokens: &TokenSequence,
        timestep: usize,
        capture: &[usize],
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        self.forward_edited(tokens, timestep, capture, &AttentionEdits::new())
    }

    pub fn forward_edited(
        &self,
        tokens: &TokenSequence,
        timestep: usize,
        capture: &[usize],
        edits: &AttentionEdits,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        let cfg = &self.config;
        self.check_timestep(timestep)?;
        self.check_capture(capture)?;
        if tokens.video.shape() != [cfg.n_video(), cfg.d_model]
            || tokens.text.shape() != [cfg.text_len, cfg.d_model]
        {
            return Err(LabError::config(format!(
                "token shapes video {:?} text {:?} do not match config",
                tokens.video.shape(),
                tokens.text.shape()
            )));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, &|_| false);
        let video = g.constant(from_array2(&tokens.video));
        let text = g.constant(from_array2(&tokens.text));
        let trace = self.trunk_graph(&mut g, &bound, video, text, timestep, edits);
        Ok(self.collect(&g, &trace, capture))
    }

    /// Convenience: conditions -> prediction and records in one graph.
    pub fn predict(
        &self,
        cond: &ConditionChannels,
        prompt: &[usize],
        timestep: usize,
        capture: &[usize],
        edits: &AttentionEdits,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        self.check_timestep(timestep)?;
        self.check_capture(capture)?;
        self.check_prompt(prompt)?;
        let m = cond.to_matrix(&self.config)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, &|_| false);
        let trace = self.trace(&mut g, &bound, &m, prompt, timestep, edits);
        Ok(self.collect(&g, &trace, capture))
    }

    fn check_capture(&self, capture: &[usize]) -> Result<()> {
        if let Some(&bad) = capture.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(LabError::config(format!(
                "capture layer {bad} outside [0, {})",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    fn collect(
        &self,
        g: &Graph,
        trace: &ForwardTrace,
        capture: &[usize],
    ) -> (Array2<f64>, Vec<AttentionRecord>) {
        let prediction = to_array2(g.value(trace.prediction));
        let records = capture
            .iter()
            .map(|&l| self.record_from_graph(g, trace, l))
            .collect();
        (prediction, records)
    }

    pub fn record_from_graph(
        &self,
        g: &Graph,
        trace: &ForwardTrace,
        layer: usize,
    ) -> AttentionRecord {
        let s = self.config.seq_len();
        let heads = &trace.attention[layer];
        let mut maps = Array3::zeros((heads.len(), s, s));
        for (h, &v) in heads.iter().enumerate() {
            let m = g.value(v);
            for (dst, src) in maps
                .index_axis_mut(ndarray::Axis(0), h)
                .iter_mut()
                .zip(&m.data)
            {
                *dst = *src;
            }
        }
        AttentionRecord::new(layer, self.config.layout(), maps).expect("model layout")
    }
}

pub fn to_array2(m: &Mat) -> Array2<f64> {
    Array2::from_shape_vec((m.rows, m.cols), m.data.clone()).expect("matrix shape")
}

pub fn from_array2(a: &Array2<f64>) -> Mat {
    let (r, c) = a.dim();
    Mat::from_vec(r, c, a.iter().copied().collect())
}
