//! Perturbed-attention guidance: cross-frame (CAG) and token-instance (CMG)
//! perturbations applied post-softmax at selected layers, and a deterministic
//! DDIM sampler that steers away from the perturbed prediction.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::align_losses::TrainExample;
use crate::autodiff::Mat;
use crate::config::{ModelConfig, SequenceLayout};
use crate::dit::{AttentionEdits, AttentionRecord, ConditionChannels, NoiseSchedule, ToyDit};
use crate::error::{LabError, Result};
use crate::grounding::{aas, grounding_map, Role, TokenSetSpec};
use crate::mask_tracks::LatentMask;

/// A post-softmax attention perturbation expressed as a `[S, S]` keep-mask.
pub trait Perturbation {
    fn name(&self) -> &'static str;
    fn keep_mask(&self, layout: SequenceLayout, specs: &[TokenSetSpec]) -> Result<Mat>;
}

/// Zeroes v2v entries whose query and key frames differ.
#[derive(Clone, Copy, Debug, Default)]
pub struct CrossFrame;

impl Perturbation for CrossFrame {
    fn name(&self) -> &'static str {
        "cag"
    }

    fn keep_mask(&self, layout: SequenceLayout, _specs: &[TokenSetSpec]) -> Result<Mat> {
        let (s, nv) = (layout.seq_len(), layout.n_video());
        let mut keep = Mat::filled(s, s, 1.0);
        for q in 0..nv {
            let fq = layout.frame_of(q);
            for k in 0..nv {
                if layout.frame_of(k) != fq {
                    keep.data[q * s + k] = 0.0;
                }
            }
        }
        Ok(keep)
    }
}

/// Zeroes v2t columns of the token sets whose role is listed.
#[derive(Clone, Debug)]
pub struct TokenInstance {
    pub name: &'static str,
    pub roles: Vec<Role>,
}

impl Perturbation for TokenInstance {
    fn name(&self) -> &'static str {
        self.name
    }

    fn keep_mask(&self, layout: SequenceLayout, specs: &[TokenSetSpec]) -> Result<Mat> {
        let (s, nv) = (layout.seq_len(), layout.n_video());
        let mut keep = Mat::filled(s, s, 1.0);
        for spec in specs.iter().filter(|sp| self.roles.contains(&sp.role)) {
            spec.validate(layout.text_len)?;
            for &tok in &spec.token_indices {
                let col = layout.text_index(tok);
                for q in 0..nv {
                    keep.data[q * s + col] = 0.0;
                }
            }
        }
        Ok(keep)
    }
}

/// Leaves attention untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoPerturbation;

impl Perturbation for NoPerturbation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn keep_mask(&self, layout: SequenceLayout, _specs: &[TokenSetSpec]) -> Result<Mat> {
        let s = layout.seq_len();
        Ok(Mat::filled(s, s, 1.0))
    }
}

/// Named strategies: `cag`, `cmg`, `cmg-noun`, `cmg-verb`, `none`.
pub fn registry() -> BTreeMap<&'static str, Box<dyn Perturbation>> {
    let mut r: BTreeMap<&'static str, Box<dyn Perturbation>> = BTreeMap::new();
    r.insert("cag", Box::new(CrossFrame));
    r.insert(
        "cmg",
        Box::new(TokenInstance {
            name: "cmg",
            roles: Role::ALL.to_vec(),
        }),
    );
    r.insert(
        "cmg-noun",
        Box::new(TokenInstance {
            name: "cmg-noun",
            roles: vec![Role::Sub, Role::Obj],
        }),
    );
    r.insert(
        "cmg-verb",
        Box::new(TokenInstance {
            name: "cmg-verb",
            roles: vec![Role::Verb],
        }),
    );
    r.insert("none", Box::new(NoPerturbation));
    r
}

pub fn perturbation(name: &str) -> Result<Box<dyn Perturbation>> {
    let mut r = registry();
    let known: Vec<&str> = r.keys().copied().collect();
    r.remove(name)
        .ok_or_else(|| LabError::config(format!("unknown perturbation {name:?}; known: {known:?}")))
}

/// Entrywise product of every head map with `keep`.
pub fn apply_keep(record: &AttentionRecord, keep: &Mat) -> Result<AttentionRecord> {
    let s = record.seq_len();
    if keep.rows != s || keep.cols != s {
        return Err(LabError::shape(format!(
            "keep mask {}x{} vs record {s}x{s}",
            keep.rows, keep.cols
        )));
    }
    let mut maps = record.head_maps.clone();
    for mut head in maps.outer_iter_mut() {
        for (v, k) in head.iter_mut().zip(&keep.data) {
            if *k == 0.0 {
                *v = 0.0;
            }
        }
    }
    AttentionRecord::new(record.layer, record.layout, maps)
}

pub fn perturb_cag(record: &AttentionRecord) -> Result<AttentionRecord> {
    apply_keep(record, &CrossFrame.keep_mask(record.layout, &[])?)
}

/// Zeroes v2t columns of every token in `specs`.
pub fn perturb_cmg(record: &AttentionRecord, specs: &[TokenSetSpec]) -> Result<AttentionRecord> {
    let all = TokenInstance {
        name: "cmg",
        roles: Role::ALL.to_vec(),
    };
    apply_keep(record, &all.keep_mask(record.layout, specs)?)
}

/// Per head and row, the attention mass removed by a perturbation.
pub fn removed_mass(original: &AttentionRecord, perturbed: &AttentionRecord) -> Array2<f64> {
    let (h, s, _) = original.head_maps.dim();
    let mut out = Array2::zeros((h, s));
    for hi in 0..h {
        for r in 0..s {
            let mut m = 0.0;
            for c in 0..s {
                m += original.head_maps[[hi, r, c]] - perturbed.head_maps[[hi, r, c]];
            }
            out[[hi, r]] = m;
        }
    }
    out
}

/// `eps + s (eps - eps_hat)`.
pub fn guided_prediction(
    clean: &Array2<f64>,
    perturbed: &Array2<f64>,
    s: f64,
) -> Result<Array2<f64>> {
    if clean.shape() != perturbed.shape() {
        return Err(LabError::shape(format!(
            "clean {:?} vs perturbed {:?}",
            clean.shape(),
            perturbed.shape()
        )));
    }
    if s == 0.0 {
        return Ok(clean.clone());
    }
    let mut out = clean.clone();
    Zip::from(&mut out)
        .and(perturbed)
        .for_each(|o, &p| *o += s * (*o - p));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub cag_layers: Vec<usize>,
    pub cmg_layers: Vec<usize>,
    /// `None` applies guidance at every step.
    pub apply_steps: Option<Vec<usize>>,
    /// Registry name of the grounding perturbation.
    pub cmg_strategy: String,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 0.0,
            cag_layers: Vec::new(),
            cmg_layers: Vec::new(),
            apply_steps: None,
            cmg_strategy: "cmg".into(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(LabError::config("guidance scale must be finite and >= 0"));
        }
        if let Some(&l) = self
            .cag_layers
            .iter()
            .chain(&self.cmg_layers)
            .find(|&&l| l >= cfg.n_layers)
        {
            return Err(LabError::config(format!(
                "guidance layer {l} outside model"
            )));
        }
        if let Some(steps) = &self.apply_steps {
            if let Some(&t) = steps.iter().find(|&&t| t >= cfg.timesteps) {
                return Err(LabError::config(format!("guidance step {t} >= T")));
            }
        }
        perturbation(&self.cmg_strategy).map(|_| ())
    }

    fn active_at(&self, t: usize) -> bool {
        self.scale != 0.0
            && (!self.cag_layers.is_empty() || !self.cmg_layers.is_empty())
            && self.apply_steps.as_ref().is_none_or(|s| s.contains(&t))
    }

    /// Keep-masks for the perturbed pass.
    pub fn edits(&self, layout: SequenceLayout, specs: &[TokenSetSpec]) -> Result<AttentionEdits> {
        let mut edits = AttentionEdits::new();
        let cag = CrossFrame.keep_mask(layout, specs)?;
        for &l in &self.cag_layers {
            edits.insert(l, cag.clone());
        }
        let cmg = perturbation(&self.cmg_strategy)?.keep_mask(layout, specs)?;
        for &l in &self.cmg_layers {
            edits.insert(l, cmg.clone());
        }
        Ok(edits)
    }
}

/// Static conditioning for one sampled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs {
    pub first_frame: Array3<f64>,
    pub id_map: Array2<u8>,
    pub prompt: Vec<usize>,
    pub specs: Vec<TokenSetSpec>,
}

impl SampleInputs {
    pub fn from_example(ex: &TrainExample) -> Self {
        Self {
            first_frame: ex.first_frame.clone(),
            id_map: ex.id_map.clone(),
            prompt: ex.prompt.clone(),
            specs: ex.specs.clone(),
        }
    }
}

/// Clean-pass records captured at one sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCapture {
    pub timestep: usize,
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Final clean latent `[N_v, latent_channels]`.
    pub latent: Array2<f64>,
    pub steps: Vec<StepCapture>,
}

/// DDIM from `init` (`z_{T-1}`) down to the clean estimate. At each step
/// where guidance is active a second, perturbed pass is combined with the
/// clean one; elsewhere only the clean pass runs.
pub fn sample_with_guidance(
    model: &ToyDit,
    guidance: &GuidanceConfig,
    init: &Array2<f64>,
    inputs: &SampleInputs,
    capture: &[usize],
) -> Result<SampleOutput> {
    let cfg = model.config();
    guidance.validate(cfg)?;
    let schedule = NoiseSchedule::linear(cfg.timesteps);
    let edits = guidance.edits(cfg.layout(), &inputs.specs)?;
    let clean_edits = AttentionEdits::new();
    let mut z = init.clone();
    let mut steps = Vec::with_capacity(cfg.timesteps);
    for t in (0..cfg.timesteps).rev() {
        let cond = ConditionChannels {
            noise_latent: z.clone(),
            first_frame: inputs.first_frame.clone(),
            id_map: inputs.id_map.clone(),
        };
        let (eps, records) = model.predict(&cond, &inputs.prompt, t, capture, &clean_edits)?;
        let eps = if guidance.active_at(t) {
            let (eps_hat, _) = model.predict(&cond, &inputs.prompt, t, &[], &edits)?;
            guided_prediction(&eps, &eps_hat, guidance.scale)?
        } else {
            eps
        };
        z = schedule.ddim_step(&z, &eps, t);
        if !capture.is_empty() {
            steps.push(StepCapture {
                timestep: t,
                records,
            });
        }
    }
    Ok(SampleOutput { latent: z, steps })
}

/// Mean head-summed noun AAS over captured steps, layers and the noun specs.
pub fn noun_aas(
    steps: &[StepCapture],
    specs: &[TokenSetSpec],
    masks: &[(Role, LatentMask)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let nouns: BTreeSet<Role> = [Role::Sub, Role::Obj].into();
    for step in steps {
        for rec in &step.records {
            for spec in specs.iter().filter(|s| nouns.contains(&s.role)) {
                let Some((_, mask)) = masks.iter().find(|(r, _)| *r == spec.role) else {
                    continue;
                };
                total += aas(&grounding_map(rec, spec)?, mask)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(LabError::Empty("no noun maps captured".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::random_record;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(frames: usize) -> SequenceLayout {
        SequenceLayout {
            frames,
            height: 2,
            width: 2,
            text_len: 3,
        }
    }

    #[test]
    fn cag_single_frame_is_noop() {
        let rec = random_record(layout(1), 2, 1);
        let p = perturb_cag(&rec).unwrap();
        assert!(rec
            .head_maps
            .iter()
            .zip(p.head_maps.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cag_halves_uniform_two_frame_rows() {
        let l = layout(2);
        let (s, nv) = (l.seq_len(), l.n_video());
        let maps = Array3::from_shape_fn((1, s, s), |(_, r, c)| {
            if r < nv && c < nv {
                1.0 / nv as f64
            } else if r >= nv {
                1.0 / s as f64
            } else {
                0.0
            }
        });
        let rec = AttentionRecord::new(0, l, maps).unwrap();
        let p = perturb_cag(&rec).unwrap();
        for r in 0..nv {
            let row: f64 = (0..nv).map(|c| p.head_maps[[0, r, c]]).sum();
            assert!((row - 0.5).abs() < 1e-12);
        }
        for r in nv..s {
            for c in 0..s {
                assert_eq!(p.head_maps[[0, r, c]], rec.head_maps[[0, r, c]]);
            }
        }
    }

    #[test]
    fn cmg_single_column_oracle() {
        let l = layout(2);
        let rec = random_record(l, 2, 3);
        let spec = TokenSetSpec::new(Role::Sub, vec![1]);
        let p = perturb_cmg(&rec, &[spec]).unwrap();
        let col = l.text_index(1);
        for h in 0..2 {
            for r in 0..l.seq_len() {
                for c in 0..l.seq_len() {
                    let expect = if r < l.n_video() && c == col {
                        0.0
                    } else {
                        rec.head_maps[[h, r, c]]
                    };
                    assert_eq!(p.head_maps[[h, r, c]].to_bits(), expect.to_bits());
                }
            }
        }
        assert_eq!(
            p,
            perturb_cmg(&p, &[TokenSetSpec::new(Role::Sub, vec![1])]).unwrap()
        );
        assert_eq!(perturb_cmg(&rec, &[]).unwrap(), rec);
        assert!(perturb_cmg(&rec, &[TokenSetSpec::new(Role::Obj, vec![3])]).is_err());
    }

    #[test]
    fn guided_prediction_scalar_oracle() {
        let e = Array2::from_elem((1, 1), 1.0);
        let h = Array2::from_elem((1, 1), 0.6);
        assert!((guided_prediction(&e, &h, 2.0).unwrap()[[0, 0]] - 1.8).abs() < 1e-12);
        assert_eq!(guided_prediction(&e, &e, 7.0).unwrap(), e);
        assert_eq!(guided_prediction(&e, &h, 0.0).unwrap(), e);
    }

    #[test]
    fn registry_names() {
        let names: Vec<_> = registry().keys().copied().collect();
        assert_eq!(names, ["cag", "cmg", "cmg-noun", "cmg-verb", "none"]);
        assert!(matches!(perturbation("pag"), Err(LabError::Config(_))));
        for (name, p) in registry() {
            assert_eq!(p.name(), name);
        }
    }

    #[test]
    fn verb_only_strategy_leaves_noun_columns() {
        let l = layout(1);
        let specs = [
            TokenSetSpec::new(Role::Sub, vec![0]),
            TokenSetSpec::new(Role::Verb, vec![2]),
        ];
        let keep = perturbation("cmg-verb")
            .unwrap()
            .keep_mask(l, &specs)
            .unwrap();
        let s = l.seq_len();
        assert_eq!(keep.data[l.text_index(0)], 1.0);
        assert_eq!(keep.data[l.text_index(2)], 0.0);
        assert_eq!(keep.data[(s - 1) * s + l.text_index(2)], 1.0);
    }

    fn tiny_model() -> ToyDit {
        ToyDit::new(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            latent_frames: 2,
            latent_height: 2,
            latent_width: 2,
            text_len: 3,
            timesteps: 3,
            patch: 2,
            vocab_size: 8,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_inputs(model: &ToyDit) -> (Array2<f64>, SampleInputs) {
        let cfg = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Array2::from_shape_fn((cfg.n_video(), cfg.latent_channels()), |_| {
            rng.random_range(-1.0..1.0)
        });
        let (h, w) = (cfg.pixel_height(), cfg.pixel_width());
        let inputs = SampleInputs {
            first_frame: Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0)),
            id_map: Array2::from_shape_fn((h, w), |(y, _)| (y < 2) as u8),
            prompt: vec![1, 2, 3],
            specs: vec![
                TokenSetSpec::new(Role::Sub, vec![0]),
                TokenSetSpec::new(Role::Verb, vec![1]),
            ],
        };
        (init, inputs)
    }

    #[test]
    fn zero_scale_matches_unguided() {
        let model = tiny_model();
        let (init, inputs) = tiny_inputs(&model);
        let plain =
            sample_with_guidance(&model, &GuidanceConfig::default(), &init, &inputs, &[0]).unwrap();
        let g = GuidanceConfig {
            cag_layers: vec![0, 1],
            cmg_layers: vec![1],
            ..Default::default()
        };
        let zero = sample_with_guidance(&model, &g, &init, &inputs, &[0]).unwrap();
        assert_eq!(plain, zero);
        let on = sample_with_guidance(
            &model,
            &GuidanceConfig { scale: 1.0, ..g },
            &init,
            &inputs,
            &[0],
        )
        .unwrap();
        assert_ne!(plain.latent, on.latent);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = tiny_model().config().clone();
        let bad = GuidanceConfig {
            cag_layers: vec![5],
            ..Default::default()
        };
        assert!(bad.validate(&cfg).is_err());
        assert!(GuidanceConfig {
            scale: -1.0,
            ..Default::default()
        }
        .validate(&cfg)
        .is_err());
        assert!(GuidanceConfig {
            apply_steps: Some(vec![3]),
            ..Default::default()
        }
        .validate(&cfg)
        .is_err());
    }

    proptest! {
        #[test]
        fn perturbation_conserves_mass(seed in 0u64..500, frames in 1usize..4, tok in 0usize..3) {
            let rec = random_record(layout(frames), 2, seed);
            for p in [perturb_cag(&rec).unwrap(), perturb_cmg(&rec, &[TokenSetSpec::new(Role::Obj, vec![tok])]).unwrap()] {
                let removed = removed_mass(&rec, &p);
                for h in 0..2 {
                    for r in 0..rec.seq_len() {
                        let row: f64 = p.head_maps.slice(ndarray::s![h, r, ..]).sum();
                        prop_assert!((row + removed[[h, r]] - 1.0).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn guided_prediction_is_linear_in_scale(a in -3.0f64..3.0, b in -3.0f64..3.0, s in 0.0f64..4.0) {
            let e = Array2::from_elem((1, 2), a);
            let h = Array2::from_elem((1, 2), b);
            let g = guided_prediction(&e, &h, s).unwrap()[[0, 0]];
            let g1 = guided_prediction(&e, &h, 1.0).unwrap()[[0, 0]];
            prop_assert!((g - (a + s * (g1 - a))).abs() < 1e-9);
        }
    }
}
