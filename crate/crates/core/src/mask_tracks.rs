//! Per-instance binary mask tracks, palette ID maps, verb unions, latent
//! downsampling and the clip manifest format.
//!
//! Masks are stored per frame as run-length counts (`u32` little endian),
//! alternating zero and one runs in row-major order and always starting with
//! a zero run. Payloads are either inline base64 or raw sidecar files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, MAX_INSTANCES, TEMPORAL_STRIDE};
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTrack {
    pub instance_id: u8,
    pub class_name: String,
    pub descriptor: String,
    pub palette_index: u8,
    /// `[F_pix, H_pix, W_pix]` with values in `{0, 1}`.
    pub masks: Array3<u8>,
}

impl MaskTrack {
    pub fn new(
        instance_id: u8,
        class_name: impl Into<String>,
        descriptor: impl Into<String>,
        masks: Array3<u8>,
    ) -> Result<Self> {
        if instance_id == 0 || instance_id as usize > MAX_INSTANCES {
            return Err(LabError::data(format!(
                "instance id {instance_id} outside 1..={MAX_INSTANCES}"
            )));
        }
        check_binary(&masks)?;
        Ok(Self {
            instance_id,
            class_name: class_name.into(),
            descriptor: descriptor.into(),
            palette_index: instance_id,
            masks,
        })
    }

    pub fn frames(&self) -> usize {
        self.masks.shape()[0]
    }

    /// `(F_pix, H_pix, W_pix)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.masks.dim()
    }
}

fn check_binary(m: &Array3<u8>) -> Result<()> {
    if m.iter().any(|&v| v > 1) {
        return Err(LabError::data("mask values must be 0 or 1"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTriplet {
    pub verb: String,
    pub k_sub: u8,
    pub k_obj: u8,
    #[serde(default)]
    pub source_span: String,
    /// Prompt positions per role, precomputed upstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_sets: Option<RoleTokens>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTokens {
    pub sub: Vec<usize>,
    pub obj: Vec<usize>,
    pub verb: Vec<usize>,
}

/// Binary latent mask `[F_lat, H_lat, W_lat]`; the first-frame form has one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    pub m: Array3<u8>,
}

impl LatentMask {
    pub fn new(m: Array3<u8>) -> Result<Self> {
        check_binary(&m)?;
        Ok(Self { m })
    }

    pub fn from_frame(frame: Array2<u8>) -> Result<Self> {
        let (h, w) = frame.dim();
        Self::new(frame.into_shape_with_order((1, h, w)).expect("same size"))
    }

    pub fn frame(&self, f: usize) -> Array2<u8> {
        self.m.slice(s![f, .., ..]).to_owned()
    }

    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1).count()
    }
}

/// Anything exposing a binary cell tensor that can be OR-ed.
pub trait BinaryMask: Sized {
    fn cells(&self) -> &Array3<u8>;
    fn with_cells(&self, other: &Self, cells: Array3<u8>) -> Self;
}

impl BinaryMask for LatentMask {
    fn cells(&self) -> &Array3<u8> {
        &self.m
    }

    fn with_cells(&self, _: &Self, cells: Array3<u8>) -> Self {
        Self { m: cells }
    }
}

impl BinaryMask for MaskTrack {
    fn cells(&self) -> &Array3<u8> {
        &self.masks
    }

    /// Keeps the subject's id; the union is tagged with class `verb`.
    fn with_cells(&self, other: &Self, cells: Array3<u8>) -> Self {
        Self {
            instance_id: self.instance_id,
            class_name: "verb".to_string(),
            descriptor: format!("{} + {}", self.descriptor, other.descriptor),
            palette_index: self.palette_index,
            masks: cells,
        }
    }
}

/// Elementwise OR of subject and object masks.
pub fn union_verb<M: BinaryMask>(sub: &M, obj: &M) -> Result<M> {
    let (a, b) = (sub.cells(), obj.cells());
    if a.shape() != b.shape() {
        return Err(LabError::shape(format!(
            "union of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x |= y);
    Ok(sub.with_cells(obj, out))
}

/// Any-overlap max pooling of one frame onto an `h x w` grid.
pub fn pool_frame(frame: &Array2<u8>, h: usize, w: usize) -> Result<Array2<u8>> {
    let (hp, wp) = frame.dim();
    if h == 0 || w == 0 || hp % h != 0 || wp % w != 0 {
        return Err(LabError::config(format!(
            "pixel grid {hp}x{wp} is not divisible by latent grid {h}x{w}"
        )));
    }
    let (fy, fx) = (hp / h, wp / w);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let block = frame.slice(s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        u8::from(block.iter().any(|&v| v == 1))
    }))
}

/// Pixel frames in the causal group decoded from latent step `t`.
pub fn frame_group(t: usize) -> std::ops::RangeInclusive<usize> {
    if t == 0 {
        0..=0
    } else {
        (TEMPORAL_STRIDE * (t - 1) + 1)..=(TEMPORAL_STRIDE * t)
    }
}

/// Spatial max pooling plus temporal OR over each latent step's frame group.
pub fn downsample_to_latent(track: &MaskTrack, config: &ModelConfig) -> Result<LatentMask> {
    let (fp, hp, wp) = track.dims();
    let (h, w) = (config.latent_height, config.latent_width);
    if hp % h != 0 || wp % w != 0 {
        return Err(LabError::config(format!(
            "pixel grid {hp}x{wp} is not divisible by latent grid {h}x{w}"
        )));
    }
    if fp != config.pixel_frames() {
        return Err(LabError::shape(format!(
            "track has {fp} frames, config expects {}",
            config.pixel_frames()
        )));
    }
    let mut out = Array3::zeros((config.latent_frames, h, w));
    for t in 0..config.latent_frames {
        for f in frame_group(t) {
            let pooled = pool_frame(&track.masks.slice(s![f, .., ..]).to_owned(), h, w)?;
            out.slice_mut(s![t, .., ..])
                .zip_mut_with(&pooled, |a, &b| *a |= b);
        }
    }
    Ok(LatentMask { m: out })
}

/// Palette ID map of one `h x w` frame; overlaps go to the smallest id and
/// an empty track list gives an all-zero map.
pub fn build_id_map(tracks: &[MaskTrack], frame: usize, h: usize, w: usize) -> Result<Array2<u8>> {
    if tracks.len() > MAX_INSTANCES {
        return Err(LabError::Capacity(format!(
            "{} tracks exceed the {MAX_INSTANCES}-instance palette",
            tracks.len()
        )));
    }
    let mut out = Array2::zeros((h, w));
    for t in tracks {
        let (f, th, tw) = t.dims();
        if (th, tw) != (h, w) {
            return Err(LabError::shape(format!(
                "track is {th}x{tw}, id map is {h}x{w}"
            )));
        }
        if frame >= f {
            return Err(LabError::shape(format!(
                "frame {frame} outside track of {f} frames"
            )));
        }
        let m = t.masks.slice(s![frame, .., ..]);
        out.zip_mut_with(&m, |o: &mut u8, &v| {
            if v == 1 && (*o == 0 || t.instance_id < *o) {
                *o = t.instance_id;
            }
        });
    }
    Ok(out)
}

// ---- run-length coding ----

pub fn encode_rle(masks: &Array3<u8>) -> Vec<u8> {
    let mut out = Vec::new();
    let (f, _, _) = masks.dim();
    for fi in 0..f {
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in masks.slice(s![fi, .., ..]).iter() {
            if v == current {
                run += 1;
            } else {
                out.extend_from_slice(&run.to_le_bytes());
                current = v;
                run = 1;
            }
        }
        out.extend_from_slice(&run.to_le_bytes());
    }
    out
}

pub fn decode_rle(bytes: &[u8], frames: usize, h: usize, w: usize) -> Result<Array3<u8>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(LabError::data("RLE payload length is not a multiple of 4"));
    }
    let runs: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let per_frame = h * w;
    let mut out = Array3::zeros((frames, h, w));
    let mut it = runs.into_iter();
    for f in 0..frames {
        let flat = out
            .slice_mut(s![f, .., ..])
            .into_slice()
            .expect("standard layout");
        let mut pos = 0usize;
        let mut value = 0u8;
        while pos < per_frame {
            let Some(run) = it.next() else {
                return Err(LabError::data(format!(
                    "RLE payload truncated in frame {f}"
                )));
            };
            let end = pos + run as usize;
            if end > per_frame {
                return Err(LabError::data(format!("RLE run overflows frame {f}")));
            }
            flat[pos..end].fill(value);
            pos = end;
            value ^= 1;
        }
    }
    if it.next().is_some() {
        return Err(LabError::data("RLE payload has trailing runs"));
    }
    Ok(out)
}

// ---- manifest ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: u8,
    #[serde(rename = "class")]
    pub class_name: String,
    pub descriptor: String,
    pub palette_index: u8,
    #[serde(flatten)]
    pub payload: MaskPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskPayload {
    Inline { rle_base64: String },
    Sidecar { rle_file: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: String,
    #[serde(rename = "F_pix")]
    pub f_pix: usize,
    #[serde(rename = "H_pix")]
    pub h_pix: usize,
    #[serde(rename = "W_pix")]
    pub w_pix: usize,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub prompt_tokens: Vec<usize>,
    pub instances: Vec<InstanceEntry>,
    pub triplets: Vec<InteractionTriplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

/// A loaded clip: manifest metadata plus decoded tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub prompt: String,
    pub prompt_tokens: Vec<usize>,
    pub tracks: Vec<MaskTrack>,
    pub triplets: Vec<InteractionTriplet>,
    pub success: Option<bool>,
}

impl Clip {
    pub fn track(&self, id: u8) -> Option<&MaskTrack> {
        self.tracks.iter().find(|t| t.instance_id == id)
    }

    /// Checks id uniqueness, shape agreement and triplet references.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tracks {
            if !seen.insert(t.instance_id) {
                return Err(LabError::data(format!(
                    "duplicate instance id {} in clip {}",
                    t.instance_id, self.clip_id
                )));
            }
        }
        if self.tracks.len() > MAX_INSTANCES {
            return Err(LabError::Capacity(format!(
                "clip {} has {} instances",
                self.clip_id,
                self.tracks.len()
            )));
        }
        if let Some(first) = self.tracks.first() {
            if self.tracks.iter().any(|t| t.dims() != first.dims()) {
                return Err(LabError::shape(format!(
                    "tracks of clip {} disagree on shape",
                    self.clip_id
                )));
            }
        }
        for tr in &self.triplets {
            if tr.k_sub == tr.k_obj {
                return Err(LabError::data(format!(
                    "triplet '{}' uses instance {} as both roles",
                    tr.verb, tr.k_sub
                )));
            }
            for k in [tr.k_sub, tr.k_obj] {
                if !seen.contains(&k) {
                    return Err(LabError::data(format!(
                        "triplet '{}' references missing instance {k}",
                        tr.verb
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `<dir>/<clip_id>.json`; `inline` chooses base64 vs sidecars.
    pub fn write(&self, dir: &Path, inline: bool) -> Result<std::path::PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let (f, h, w) = self
            .tracks
            .first()
            .map(MaskTrack::dims)
            .unwrap_or((0, 0, 0));
        let mut instances = Vec::with_capacity(self.tracks.len());
        for t in &self.tracks {
            let bytes = encode_rle(&t.masks);
            let payload = if inline {
                MaskPayload::Inline {
                    rle_base64: B64.encode(&bytes),
                }
            } else {
                let name = format!("{}_inst{}.rle", self.clip_id, t.instance_id);
                let path = dir.join(&name);
                fs::write(&path, &bytes).map_err(|e| LabError::io(&path, e))?;
                MaskPayload::Sidecar { rle_file: name }
            };
            instances.push(InstanceEntry {
                id: t.instance_id,
                class_name: t.class_name.clone(),
                descriptor: t.descriptor.clone(),
                palette_index: t.palette_index,
                payload,
            });
        }
        let manifest = ClipManifest {
            clip_id: self.clip_id.clone(),
            f_pix: f,
            h_pix: h,
            w_pix: w,
            prompt: self.prompt.clone(),
            prompt_tokens: self.prompt_tokens.clone(),
            instances,
            triplets: self.triplets.clone(),
            success: self.success,
        };
        let path = dir.join(format!("{}.json", self.clip_id));
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest; sidecar paths resolve relative to its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| LabError::io(path, e))?;
        let manifest: ClipManifest = serde_json::from_slice(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: ClipManifest, base: &Path) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for inst in &manifest.instances {
            if !ids.insert(inst.id) {
                return Err(LabError::data(format!(
                    "duplicate instance id {} in manifest {}",
                    inst.id, manifest.clip_id
                )));
            }
        }
        let mut tracks = Vec::with_capacity(manifest.instances.len());
        for inst in &manifest.instances {
            let bytes = match &inst.payload {
                MaskPayload::Inline { rle_base64 } => B64.decode(rle_base64).map_err(|e| {
                    LabError::data(format!("instance {}: bad base64: {e}", inst.id))
                })?,
                MaskPayload::Sidecar { rle_file } => {
                    let p = base.join(rle_file);
                    fs::read(&p).map_err(|e| LabError::io(&p, e))?
                }
            };
            let masks = decode_rle(&bytes, manifest.f_pix, manifest.h_pix, manifest.w_pix)
                .map_err(|e| LabError::data(format!("instance {}: {e}", inst.id)))?;
            let mut track = MaskTrack::new(inst.id, &inst.class_name, &inst.descriptor, masks)?;
            track.palette_index = inst.palette_index;
            tracks.push(track);
        }
        let clip = Clip {
            clip_id: manifest.clip_id,
            prompt: manifest.prompt,
            prompt_tokens: manifest.prompt_tokens,
            tracks,
            triplets: manifest.triplets,
            success: manifest.success,
        };
        clip.validate()?;
        Ok(clip)
    }
}
