//! Alignment objectives: the composite mask loss, the causal attention
//! decoder, grounding (SGA) and propagation (SPA) supervision, the total
//! objective and a small training loop.

mod composite;
mod decoder;
mod train;

use std::collections::BTreeSet;
use std::rc::Rc;

use ndarray::{Array2, Array3, Array4};

use crate::autodiff::{Graph, Mat, Var};
use crate::config::{ModelConfig, SequenceLayout};
use crate::dit::embed::{encode_latent, ConditionChannels};
use crate::dit::{
    layer_param, AttentionEdits, AttentionRecord, BoundParams, ToyDit, ATTENTION_PARAMS,
};
use crate::error::{LabError, Result};
use crate::grounding::{Role, TokenSetSpec};
use crate::mask_tracks::{build_id_map, downsample_to_latent, union_verb, Clip, LatentMask};
use crate::propagation::{query_set, QuerySet};

pub use composite::{
    composite_loss, composite_node, composite_with_grad, CompositeParts, LossWeights, CLAMP_EPS,
    DICE_SMOOTH,
};
pub use decoder::{decode_attention, decoded_frames, CausalDecoder};
pub use train::{
    evaluate, load_checkpoint, quantize_like_checkpoint, sample_noise, save_checkpoint, train,
    write_loss_ledger, AdamW, EvalReport, LossRecord, TrainConfig,
};

/// Pixel-space mask tracks per role; `verb` is always `sub | obj`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub sub: Array3<u8>,
    pub obj: Array3<u8>,
    pub verb: Array3<u8>,
}

impl SupervisionTargets {
    pub fn new(sub: Array3<u8>, obj: Array3<u8>) -> Result<Self> {
        if sub.shape() != obj.shape() {
            return Err(LabError::shape(
                "subject and object targets differ in shape",
            ));
        }
        let mut verb = sub.clone();
        verb.zip_mut_with(&obj, |a, &b| *a |= b);
        Ok(Self { sub, obj, verb })
    }

    pub fn get(&self, role: Role) -> &Array3<u8> {
        match role {
            Role::Sub => &self.sub,
            Role::Obj => &self.obj,
            Role::Verb => &self.verb,
        }
    }

    fn flat(&self, role: Role) -> Vec<f64> {
        self.get(role).iter().map(|&v| f64::from(v)).collect()
    }
}

/// Head-mean grounding column `[N_v, 1]` for a token set.
pub fn grounding_column(
    g: &mut Graph,
    heads: &[Var],
    layout: SequenceLayout,
    tokens: &[usize],
) -> Var {
    let s = layout.seq_len();
    let mut sel = Mat::zeros(s, 1);
    let w = 1.0 / (tokens.len() * heads.len()) as f64;
    for &t in tokens {
        sel.data[layout.text_index(t)] += w;
    }
    let sel = g.constant(sel);
    let mut acc: Option<Var> = None;
    for &a in heads {
        let col = g.matmul(a, sel);
        acc = Some(match acc {
            Some(prev) => g.add(prev, col),
            None => col,
        });
    }
    g.slice_rows(acc.expect("at least one head"), 0, layout.n_video())
}

/// Head-mean propagation column `[N_v, 1]` for first-frame queries.
pub fn propagation_column(
    g: &mut Graph,
    heads: &[Var],
    layout: SequenceLayout,
    queries: &QuerySet,
) -> Var {
    let unique: BTreeSet<_> = queries.locations.iter().copied().collect();
    let rows: Vec<u32> = unique
        .iter()
        .map(|&(h, w)| layout.video_index(0, h, w) as u32)
        .collect();
    let rows = Rc::new(rows);
    let avg = g.constant(Mat::filled(
        1,
        rows.len(),
        1.0 / (rows.len() * heads.len()) as f64,
    ));
    let mut acc: Option<Var> = None;
    for &a in heads {
        let picked = g.gather_rows(a, rows.clone());
        let r = g.matmul(avg, picked);
        acc = Some(match acc {
            Some(prev) => g.add(prev, r),
            None => r,
        });
    }
    let nv = layout.n_video();
    let video = g.slice_cols(acc.expect("at least one head"), 0, nv);
    g.reshape(video, nv, 1)
}

fn check_target(dec: &CausalDecoder, target: &Array3<u8>) -> Result<()> {
    if target.dim() != dec.output_dims() {
        return Err(LabError::shape(format!(
            "target {:?} does not match decoder output {:?}",
            target.shape(),
            dec.output_dims()
        )));
    }
    Ok(())
}

fn mean_over_layers(g: &mut Graph, per_layer: Vec<Var>) -> Option<Var> {
    let n = per_layer.len();
    let mut it = per_layer.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |acc, v| g.add(acc, v));
    Some(g.scale(sum, 1.0 / n as f64))
}

/// SGA on the tape: per layer the sum over roles of `l(D(A_e), M_e)`,
/// averaged over layers. `None` when no role has a token set.
pub fn sga_graph(
    g: &mut Graph,
    layers: &[Vec<Var>],
    layout: SequenceLayout,
    specs: &[TokenSetSpec],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    dec_bound: &BoundParams,
    w: &LossWeights,
) -> Result<Option<Var>> {
    let mut roles = Vec::new();
    for role in Role::ALL {
        match specs.iter().find(|s| s.role == role) {
            Some(spec) => {
                spec.validate(layout.text_len)?;
                check_target(dec, targets.get(role))?;
                roles.push((spec, targets.flat(role)));
            }
            None => log::warn!("no {role} token set; skipping its grounding term"),
        }
    }
    if roles.is_empty() {
        return Ok(None);
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for heads in layers {
        let mut sum: Option<Var> = None;
        for (spec, target) in &roles {
            let col = grounding_column(g, heads, layout, &spec.token_indices);
            let decoded = dec.graph(g, dec_bound, col);
            let l = composite_node(g, decoded, target, w)?;
            sum = Some(match sum {
                Some(prev) => g.add(prev, l),
                None => l,
            });
        }
        per_layer.push(sum.expect("non-empty roles"));
    }
    Ok(mean_over_layers(g, per_layer))
}

/// SPA on the tape over subject and object queries; verb queries are ignored.
pub fn spa_graph(
    g: &mut Graph,
    layers: &[Vec<Var>],
    layout: SequenceLayout,
    queries: &[QuerySet],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    dec_bound: &BoundParams,
    w: &LossWeights,
) -> Result<Option<Var>> {
    let mut roles = Vec::new();
    for role in [Role::Sub, Role::Obj] {
        match queries.iter().find(|q| q.role == role && !q.is_empty()) {
            Some(q) => {
                if q.locations
                    .iter()
                    .any(|&(h, w)| h >= layout.height || w >= layout.width)
                {
                    return Err(LabError::config(format!(
                        "{role} query outside the latent grid"
                    )));
                }
                check_target(dec, targets.get(role))?;
                roles.push((q, targets.flat(role)));
            }
            None => log::warn!("no {role} queries; skipping its propagation term"),
        }
    }
    if roles.is_empty() {
        return Ok(None);
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for heads in layers {
        let mut sum: Option<Var> = None;
        for (q, target) in &roles {
            let col = propagation_column(g, heads, layout, q);
            let decoded = dec.graph(g, dec_bound, col);
            let l = composite_node(g, decoded, target, w)?;
            sum = Some(match sum {
                Some(prev) => g.add(prev, l),
                None => l,
            });
        }
        per_layer.push(sum.expect("non-empty roles"));
    }
    Ok(mean_over_layers(g, per_layer))
}

fn record_vars(
    g: &mut Graph,
    records: &[AttentionRecord],
) -> Result<(SequenceLayout, Vec<Vec<Var>>)> {
    let Some(first) = records.first() else {
        return Err(LabError::Empty("no attention records to supervise".into()));
    };
    let layout = first.layout;
    let s = layout.seq_len();
    let mut layers = Vec::with_capacity(records.len());
    for rec in records {
        if rec.layout != layout {
            return Err(LabError::shape("records disagree on sequence layout"));
        }
        let heads = (0..rec.n_heads())
            .map(|h| {
                let m = rec.head_maps.index_axis(ndarray::Axis(0), h);
                g.constant(Mat::from_vec(s, s, m.iter().copied().collect()))
            })
            .collect();
        layers.push(heads);
    }
    Ok((layout, layers))
}

/// Value and decoder-parameter gradients of an alignment loss on records.
fn alignment_on_records(
    records: &[AttentionRecord],
    dec: &CausalDecoder,
    build: impl FnOnce(&mut Graph, SequenceLayout, &[Vec<Var>], &BoundParams) -> Result<Option<Var>>,
) -> Result<(f64, Vec<Mat>)> {
    let mut g = Graph::new();
    let (layout, layers) = record_vars(&mut g, records)?;
    let bound = dec.params.bind(&mut g, &|_| true);
    let Some(loss) = build(&mut g, layout, &layers, &bound)? else {
        return Ok((
            0.0,
            dec.params
                .mats()
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect(),
        ));
    };
    let grads = g.backward(loss);
    let out = bound
        .vars()
        .iter()
        .zip(dec.params.mats())
        .map(|(&v, m)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.rows, m.cols))
        })
        .collect();
    Ok((g.value(loss).scalar(), out))
}

/// SGA from captured grounding-layer records.
pub fn sga_loss(
    records: &[AttentionRecord],
    specs: &[TokenSetSpec],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    w: &LossWeights,
) -> Result<f64> {
    Ok(sga_loss_with_grad(records, specs, targets, dec, w)?.0)
}

pub fn sga_loss_with_grad(
    records: &[AttentionRecord],
    specs: &[TokenSetSpec],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    w: &LossWeights,
) -> Result<(f64, Vec<Mat>)> {
    alignment_on_records(records, dec, |g, layout, layers, bound| {
        sga_graph(g, layers, layout, specs, targets, dec, bound, w)
    })
}

/// SPA from captured propagation-layer records.
pub fn spa_loss(
    records: &[AttentionRecord],
    queries: &[QuerySet],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    w: &LossWeights,
) -> Result<f64> {
    Ok(spa_loss_with_grad(records, queries, targets, dec, w)?.0)
}

pub fn spa_loss_with_grad(
    records: &[AttentionRecord],
    queries: &[QuerySet],
    targets: &SupervisionTargets,
    dec: &CausalDecoder,
    w: &LossWeights,
) -> Result<(f64, Vec<Mat>)> {
    alignment_on_records(records, dec, |g, layout, layers, bound| {
        spa_graph(g, layers, layout, queries, targets, dec, bound, w)
    })
}

/// One supervised clip, preprocessed for training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub clip_id: String,
    /// Clean latent `[N_v, latent_channels]`.
    pub latent: Array2<f64>,
    pub first_frame: Array3<f64>,
    pub id_map: Array2<u8>,
    pub prompt: Vec<usize>,
    pub specs: Vec<TokenSetSpec>,
    pub queries: Vec<QuerySet>,
    pub targets: SupervisionTargets,
    /// Latent-grid tracks per role for AAS read-outs.
    pub latent_masks: Vec<(Role, LatentMask)>,
}

impl TrainExample {
    /// Uses the clip's first triplet; `video` is `[F_pix, H_pix, W_pix, 3]`.
    pub fn from_clip(clip: &Clip, video: &Array4<f64>, cfg: &ModelConfig) -> Result<Self> {
        let triplet = clip
            .triplets
            .first()
            .ok_or_else(|| LabError::data(format!("clip {} has no triplet", clip.clip_id)))?;
        let sub = clip
            .track(triplet.k_sub)
            .ok_or_else(|| LabError::data("subject track missing"))?;
        let obj = clip
            .track(triplet.k_obj)
            .ok_or_else(|| LabError::data("object track missing"))?;
        let latent = encode_latent(video, cfg)?;
        let first_frame = video.index_axis(ndarray::Axis(0), 0).to_owned();
        let id_map = build_id_map(&clip.tracks, 0, cfg.pixel_height(), cfg.pixel_width())?;
        if clip.prompt_tokens.len() != cfg.text_len {
            return Err(LabError::shape(format!(
                "clip {} prompt has {} tokens, model expects {}",
                clip.clip_id,
                clip.prompt_tokens.len(),
                cfg.text_len
            )));
        }
        let specs = match &triplet.token_sets {
            Some(t) => [
                (Role::Sub, &t.sub),
                (Role::Obj, &t.obj),
                (Role::Verb, &t.verb),
            ]
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(r, v)| TokenSetSpec::new(r, v.clone()))
            .collect(),
            None => Vec::new(),
        };
        let ls = downsample_to_latent(sub, cfg)?;
        let lo = downsample_to_latent(obj, cfg)?;
        let lv = union_verb(&ls, &lo)?;
        let mut queries = Vec::new();
        for (role, m) in [(Role::Sub, &ls), (Role::Obj, &lo)] {
            match query_set(&m.frame(0), role) {
                Ok(q) => queries.push(q),
                Err(LabError::Empty(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            clip_id: clip.clip_id.clone(),
            latent,
            first_frame,
            id_map,
            prompt: clip.prompt_tokens.clone(),
            specs,
            queries,
            targets: SupervisionTargets::new(sub.masks.clone(), obj.masks.clone())?,
            latent_masks: vec![(Role::Sub, ls), (Role::Obj, lo), (Role::Verb, lv)],
        })
    }

    pub fn conditions(&self, noisy: Array2<f64>) -> ConditionChannels {
        ConditionChannels {
            noise_latent: noisy,
            first_frame: self.first_frame.clone(),
            id_map: self.id_map.clone(),
        }
    }

    pub fn latent_mask(&self, role: Role) -> &LatentMask {
        &self
            .latent_masks
            .iter()
            .find(|(r, _)| *r == role)
            .expect("all roles present")
            .1
    }
}

/// Model plus the two decoders and the supervised layer sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ToyDit,
    pub dec_g: CausalDecoder,
    pub dec_p: CausalDecoder,
    pub grounding_layers: Vec<usize>,
    pub propagation_layers: Vec<usize>,
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_dm: f64,
    pub l_sga: f64,
    pub l_spa: f64,
    pub total: f64,
}

/// Loss terms plus gradients aligned with [`TrainState::param_names`]
/// (`None` for frozen parameters).
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Mat>>,
}

impl TrainState {
    pub fn new(
        model: ToyDit,
        grounding_layers: Vec<usize>,
        propagation_layers: Vec<usize>,
        decoder_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = model.config().clone();
        for &l in grounding_layers.iter().chain(&propagation_layers) {
            if l >= cfg.n_layers {
                return Err(LabError::config(format!(
                    "supervised layer {l} outside [0, {})",
                    cfg.n_layers
                )));
            }
        }
        Ok(Self {
            dec_g: CausalDecoder::for_model(&cfg, decoder_channels, seed.wrapping_add(101))?,
            dec_p: CausalDecoder::for_model(&cfg, decoder_channels, seed.wrapping_add(202))?,
            model,
            grounding_layers,
            propagation_layers,
        })
    }

    /// Supervised attention projections plus the input projection.
    pub fn is_trainable(&self, name: &str) -> bool {
        if name == "input_proj" || name == "input_bias" {
            return true;
        }
        self.grounding_layers
            .iter()
            .chain(&self.propagation_layers)
            .any(|&l| ATTENTION_PARAMS.iter().any(|p| layer_param(l, p) == name))
    }

    /// Model names first, then `dec_g.*`, then `dec_p.*`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.model.params().names().to_vec();
        names.extend(
            self.dec_g
                .params
                .names()
                .iter()
                .map(|n| format!("dec_g.{n}")),
        );
        names.extend(
            self.dec_p
                .params
                .names()
                .iter()
                .map(|n| format!("dec_p.{n}")),
        );
        names
    }

    pub fn param_mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = self.model.params_mut().mats_mut().iter_mut().collect();
        out.extend(self.dec_g.params.mats_mut().iter_mut());
        out.extend(self.dec_p.params.mats_mut().iter_mut());
        out
    }

    pub fn param_mats(&self) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = self.model.params().mats().iter().collect();
        out.extend(self.dec_g.params.mats());
        out.extend(self.dec_p.params.mats());
        out
    }

    /// Full objective `L_DM + l_sga * L_SGA + l_spa * L_SPA` for one noised example.
    pub fn total_loss(
        &self,
        example: &TrainExample,
        timestep: usize,
        noise: &Array2<f64>,
        w: &LossWeights,
        with_grad: bool,
    ) -> Result<StepOutput> {
        w.validate()?;
        let cfg = self.model.config();
        if timestep >= cfg.timesteps {
            return Err(LabError::config(format!(
                "timestep {timestep} out of range"
            )));
        }
        if noise.shape() != example.latent.shape() {
            return Err(LabError::shape("noise does not match the latent"));
        }
        let schedule = crate::dit::NoiseSchedule::linear(cfg.timesteps);
        let noisy = schedule.add_noise(&example.latent, noise, timestep);
        let cond = example.conditions(noisy).to_matrix(cfg)?;
        let mut g = Graph::new();
        let model_bound = if with_grad {
            self.model.params().bind(&mut g, &|n| self.is_trainable(n))
        } else {
            self.model.params().bind(&mut g, &|_| false)
        };
        let dg = self.dec_g.params.bind(&mut g, &|_| with_grad);
        let dp = self.dec_p.params.bind(&mut g, &|_| with_grad);
        let trace = self.model.trace(
            &mut g,
            &model_bound,
            &cond,
            &example.prompt,
            timestep,
            &AttentionEdits::new(),
        );
        let layout = cfg.layout();
        let l_dm = g.mse(trace.prediction, Rc::new(noise.iter().copied().collect()));
        let mut total = l_dm;
        let (mut l_sga, mut l_spa) = (0.0, 0.0);
        if w.lambda_sga > 0.0 && !self.grounding_layers.is_empty() {
            let layers: Vec<Vec<Var>> = self
                .grounding_layers
                .iter()
                .map(|&l| trace.attention[l].clone())
                .collect();
            if let Some(v) = sga_graph(
                &mut g,
                &layers,
                layout,
                &example.specs,
                &example.targets,
                &self.dec_g,
                &dg,
                w,
            )? {
                l_sga = g.value(v).scalar();
                let s = g.scale(v, w.lambda_sga);
                total = g.add(total, s);
            }
        }
        if w.lambda_spa > 0.0 && !self.propagation_layers.is_empty() {
            let layers: Vec<Vec<Var>> = self
                .propagation_layers
                .iter()
                .map(|&l| trace.attention[l].clone())
                .collect();
            if let Some(v) = spa_graph(
                &mut g,
                &layers,
                layout,
                &example.queries,
                &example.targets,
                &self.dec_p,
                &dp,
                w,
            )? {
                l_spa = g.value(v).scalar();
                let s = g.scale(v, w.lambda_spa);
                total = g.add(total, s);
            }
        }
        let loss = LossBreakdown {
            l_dm: g.value(l_dm).scalar(),
            l_sga,
            l_spa,
            total: g.value(total).scalar(),
        };
        for (name, v) in [
            ("L_DM", loss.l_dm),
            ("L_SGA", l_sga),
            ("L_SPA", l_spa),
            ("total", loss.total),
        ] {
            if !v.is_finite() {
                return Err(LabError::numeric(format!(
                    "{name} is {v} on clip {} at timestep {timestep}",
                    example.clip_id
                )));
            }
        }
        let mut grads: Vec<Option<Mat>> = Vec::new();
        if with_grad {
            let tape = g.backward(total);
            let mut collect = |vars: &[Var], mats: &[Mat], trainable: &dyn Fn(usize) -> bool| {
                for (i, (&v, m)) in vars.iter().zip(mats).enumerate() {
                    grads.push(trainable(i).then(|| {
                        tape.get(v)
                            .cloned()
                            .unwrap_or_else(|| Mat::zeros(m.rows, m.cols))
                    }));
                }
            };
            let names = self.model.params().names();
            collect(model_bound.vars(), self.model.params().mats(), &|i| {
                self.is_trainable(&names[i])
            });
            collect(dg.vars(), self.dec_g.params.mats(), &|_| true);
            collect(dp.vars(), self.dec_p.params.mats(), &|_| true);
        }
        Ok(StepOutput { loss, grads })
    }
}
