//! Mask-track curation with injectable oracles: interaction filtering by
//! contactness and dynamism, confidence-ordered anchor verification,
//! one-to-one assignment among same-class instances, and propagation with
//! drop semantics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mask_tracks::{Clip, InteractionTriplet, MaskTrack};

/// Pixel box `(x, y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn iou(&self, o: &BBox) -> f64 {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = (self.x + self.w).min(o.x + o.w);
        let y1 = (self.y + self.h).min(o.y + o.h);
        let inter = x1.saturating_sub(x0) * y1.saturating_sub(y0);
        let union = self.w * self.h + o.w * o.h - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight box of a binary frame.
    pub fn of_mask(m: &Array2<u8>) -> Option<BBox> {
        crate::synthetic_data::bbox(m).map(|(y0, x0, y1, x1)| BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Detector proposal for instance `instance_id` on sampled frame `frame`.
/// `(frame, slot)` identifies the box; same-class pools may share it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub instance_id: u8,
    pub frame: usize,
    pub slot: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Candidate {
    pub fn key(&self) -> (usize, usize) {
        (self.frame, self.slot)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub contactness: u8,
    pub dynamism: u8,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub confidence: String,
}

impl InteractionScore {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.contactness) || !(1..=5).contains(&self.dynamism) {
            return Err(LabError::data(format!(
                "interaction scores must be in 1..=5, got contactness {} dynamism {}",
                self.contactness, self.dynamism
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub triplet: InteractionTriplet,
    pub score: InteractionScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub contactness: u8,
    pub dynamism: u8,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            contactness: 3,
            dynamism: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterOutcome {
    pub retained: Vec<InteractionTriplet>,
    pub retained_ids: BTreeSet<u8>,
    pub discarded: bool,
}

/// Keeps triplets meeting both thresholds and the ids they mention.
pub fn filter_interactions(scored: &[ScoredTriplet], th: Thresholds) -> Result<FilterOutcome> {
    let mut retained = Vec::new();
    let mut ids = BTreeSet::new();
    for s in scored {
        s.score.validate()?;
        if s.score.contactness >= th.contactness && s.score.dynamism >= th.dynamism {
            ids.insert(s.triplet.k_sub);
            ids.insert(s.triplet.k_obj);
            retained.push(s.triplet.clone());
        }
    }
    Ok(FilterOutcome {
        discarded: retained.is_empty(),
        retained,
        retained_ids: ids,
    })
}

/// Accepts or rejects a candidate for an instance. Errors count as rejection.
pub trait Verifier {
    fn verify(&mut self, instance_id: u8, candidate: &Candidate) -> Result<bool>;
}

/// Accept table keyed by `(instance_id, frame, slot)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableVerifier {
    pub accept: BTreeSet<(u8, usize, usize)>,
}

impl Verifier for TableVerifier {
    fn verify(&mut self, id: u8, c: &Candidate) -> Result<bool> {
        Ok(self.accept.contains(&(id, c.frame, c.slot)))
    }
}

/// Descending confidence, then earlier frame, then lower slot.
pub fn candidate_order(cands: &[Candidate]) -> Vec<Candidate> {
    let mut v = cands.to_vec();
    v.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.frame.cmp(&b.frame))
            .then(a.slot.cmp(&b.slot))
    });
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorResult {
    pub anchor: Option<Candidate>,
    pub calls: usize,
}

fn select_excluding(
    id: u8,
    candidates: &[Candidate],
    taken: &BTreeSet<(usize, usize)>,
    verifier: &mut dyn Verifier,
) -> AnchorResult {
    let mut calls = 0;
    for c in candidate_order(candidates) {
        if taken.contains(&c.key()) {
            continue;
        }
        calls += 1;
        if verifier.verify(id, &c).unwrap_or(false) {
            return AnchorResult {
                anchor: Some(c),
                calls,
            };
        }
    }
    AnchorResult {
        anchor: None,
        calls,
    }
}

/// First verifier-accepted candidate in [`candidate_order`].
pub fn select_anchor(
    id: u8,
    candidates: &[Candidate],
    verifier: &mut dyn Verifier,
) -> AnchorResult {
    select_excluding(id, candidates, &BTreeSet::new(), verifier)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub anchors: BTreeMap<u8, Option<Candidate>>,
    pub calls: usize,
}

/// Ids in ascending order each take their first accepted candidate; an
/// accepted box leaves the pools of the remaining ids.
pub fn assign_exclusive(
    pools: &BTreeMap<u8, Vec<Candidate>>,
    verifier: &mut dyn Verifier,
) -> Assignment {
    let mut taken = BTreeSet::new();
    let mut anchors = BTreeMap::new();
    let mut calls = 0;
    for (&id, pool) in pools {
        let r = select_excluding(id, pool, &taken, verifier);
        calls += r.calls;
        if let Some(a) = r.anchor {
            taken.insert(a.key());
        }
        anchors.insert(id, r.anchor);
    }
    Assignment { anchors, calls }
}

/// Produces per-frame masks from a verified anchor; `None` marks a frame
/// the propagation failed on.
pub trait Propagator {
    fn propagate(&mut self, id: u8, anchor: &Candidate) -> Result<Vec<Option<Array2<u8>>>>;
}

/// Replays ground-truth tracks, failing at listed `(id, frame)` pairs.
#[derive(Clone, Debug, Default)]
pub struct FixturePropagator {
    pub tracks: BTreeMap<u8, MaskTrack>,
    pub failures: BTreeSet<(u8, usize)>,
}

impl Propagator for FixturePropagator {
    fn propagate(&mut self, id: u8, _anchor: &Candidate) -> Result<Vec<Option<Array2<u8>>>> {
        let t = self
            .tracks
            .get(&id)
            .ok_or_else(|| LabError::data(format!("no ground truth for instance {id}")))?;
        Ok(t.masks
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(f, m)| (!self.failures.contains(&(id, f))).then(|| m.to_owned()))
            .collect())
    }
}

/// Full-length track, or `None` when any frame failed.
pub fn propagate_track(
    template: &MaskTrack,
    anchor: &Candidate,
    propagator: &mut dyn Propagator,
) -> Result<Option<MaskTrack>> {
    let frames = match propagator.propagate(template.instance_id, anchor) {
        Ok(f) => f,
        Err(_) => return Ok(None),
    };
    if frames.len() != template.frames() || frames.iter().any(Option::is_none) {
        return Ok(None);
    }
    let (_, h, w) = template.dims();
    let mut masks = Array3::zeros((frames.len(), h, w));
    for (f, m) in frames.into_iter().enumerate() {
        let m = m.expect("checked");
        if m.dim() != (h, w) {
            return Ok(None);
        }
        masks.index_axis_mut(Axis(0), f).assign(&m);
    }
    let mut t = MaskTrack::new(
        template.instance_id,
        template.class_name.clone(),
        template.descriptor.clone(),
        masks,
    )?;
    t.palette_index = template.palette_index;
    Ok(Some(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QcDecision {
    Accept,
    Fix,
    Drop,
}

/// One clip with its curation inputs. `scores` parallels `clip.triplets`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurationFixture {
    pub clip: Clip,
    pub scores: Vec<InteractionScore>,
    pub candidates: Vec<Candidate>,
    pub sampled_frames: usize,
    pub slots: usize,
    pub verifier: TableVerifier,
    pub propagation_failures: BTreeSet<(u8, usize)>,
    pub qc: BTreeMap<u8, QcDecision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub clip_id: String,
    pub discarded: bool,
    pub kept_ids: Vec<u8>,
    pub dropped: BTreeMap<u8, String>,
    pub kept_triplets: usize,
    pub verifier_calls: usize,
    /// `|K| * J * T` for the ids entering verification.
    pub naive_calls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationOutcome {
    pub clip: Option<Clip>,
    pub report: CurationReport,
}

/// Runs filtering, QC drops, per-class exclusive verification and
/// propagation. The verifier's accept table is shared across classes.
pub fn curate(
    fx: &CurationFixture,
    th: Thresholds,
    propagator: &mut dyn Propagator,
) -> Result<CurationOutcome> {
    if fx.scores.len() != fx.clip.triplets.len() {
        return Err(LabError::data(format!(
            "clip {} has {} triplets but {} scores",
            fx.clip.clip_id,
            fx.clip.triplets.len(),
            fx.scores.len()
        )));
    }
    let scored: Vec<ScoredTriplet> = fx
        .clip
        .triplets
        .iter()
        .zip(&fx.scores)
        .map(|(t, s)| ScoredTriplet {
            triplet: t.clone(),
            score: s.clone(),
        })
        .collect();
    let filtered = filter_interactions(&scored, th)?;
    let mut dropped = BTreeMap::new();
    for id in fx.clip.tracks.iter().map(|t| t.instance_id) {
        if !filtered.retained_ids.contains(&id) {
            dropped.insert(id, "no retained interaction".to_string());
        }
    }
    let mut alive: BTreeSet<u8> = filtered.retained_ids.clone();
    for (&id, d) in &fx.qc {
        if *d == QcDecision::Drop && alive.remove(&id) {
            dropped.insert(id, "dropped at review".into());
        }
    }
    let mut by_class: BTreeMap<String, BTreeMap<u8, Vec<Candidate>>> = BTreeMap::new();
    for &id in &alive {
        let track = fx
            .clip
            .track(id)
            .ok_or_else(|| LabError::data(format!("triplet refers to missing instance {id}")))?;
        let pool = fx
            .candidates
            .iter()
            .filter(|c| c.instance_id == id)
            .copied()
            .collect();
        by_class
            .entry(track.class_name.clone())
            .or_default()
            .insert(id, pool);
    }
    let naive_calls = alive.len() * fx.slots * fx.sampled_frames;
    let mut verifier = fx.verifier.clone();
    let mut calls = 0;
    let mut anchors = BTreeMap::new();
    for pools in by_class.values() {
        let a = assign_exclusive(pools, &mut verifier);
        calls += a.calls;
        for (id, anchor) in a.anchors {
            match anchor {
                Some(c) => {
                    anchors.insert(id, c);
                }
                None => {
                    alive.remove(&id);
                    dropped.insert(id, "no verified candidate".into());
                }
            }
        }
    }
    let mut tracks = Vec::new();
    for (&id, anchor) in &anchors {
        let template = fx.clip.track(id).expect("checked above");
        match propagate_track(template, anchor, propagator)? {
            Some(t) => tracks.push(t),
            None => {
                alive.remove(&id);
                dropped.insert(id, "propagation failed".into());
            }
        }
    }
    let triplets: Vec<InteractionTriplet> = filtered
        .retained
        .into_iter()
        .filter(|t| alive.contains(&t.k_sub) && alive.contains(&t.k_obj))
        .collect();
    // ids whose every interaction was removed leave too
    let used: BTreeSet<u8> = triplets.iter().flat_map(|t| [t.k_sub, t.k_obj]).collect();
    for id in alive.difference(&used) {
        dropped.insert(*id, "interaction removed".into());
    }
    tracks.retain(|t| used.contains(&t.instance_id));
    let discarded = triplets.is_empty();
    let report = CurationReport {
        clip_id: fx.clip.clip_id.clone(),
        discarded,
        kept_ids: tracks.iter().map(|t| t.instance_id).collect(),
        dropped,
        kept_triplets: triplets.len(),
        verifier_calls: calls,
        naive_calls,
    };
    let clip = (!discarded).then(|| Clip {
        clip_id: fx.clip.clip_id.clone(),
        prompt: fx.clip.prompt.clone(),
        prompt_tokens: fx.clip.prompt_tokens.clone(),
        tracks,
        triplets,
        success: fx.clip.success,
    });
    Ok(CurationOutcome { clip, report })
}

/// Synthetic fixture around a ground-truth clip: `J` candidates per id on `T`
/// sampled frames mixing jittered true boxes and decoys; boxes with IoU at
/// least 0.5 to the id's true box are accepted. Ids sharing a class see each
/// other's boxes, so their pools overlap.
pub fn synthetic_fixture(
    clip: &Clip,
    sampled_frames: usize,
    slots: usize,
    seed: u64,
) -> Result<CurationFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = clip.tracks.first().map(|t| t.frames()).unwrap_or(0);
    if n_frames == 0 || sampled_frames == 0 || slots == 0 {
        return Err(LabError::config("fixture needs frames, T >= 1 and J >= 1"));
    }
    let frames: Vec<usize> = (0..sampled_frames)
        .map(|i| {
            if sampled_frames == 1 {
                0
            } else {
                i * (n_frames - 1) / (sampled_frames - 1)
            }
        })
        .collect();
    let (_, h, w) = clip.tracks[0].dims();
    let mut candidates = Vec::new();
    let mut accept = BTreeSet::new();
    for (fi, &f) in frames.iter().enumerate() {
        let truth: Vec<(u8, &str, Option<BBox>)> = clip
            .tracks
            .iter()
            .map(|t| {
                (
                    t.instance_id,
                    t.class_name.as_str(),
                    BBox::of_mask(&t.masks.index_axis(Axis(0), f).to_owned()),
                )
            })
            .collect();
        let mut class_boxes: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
        for (_, class, b) in &truth {
            if let Some(b) = b {
                class_boxes.entry(class).or_default().push(*b);
            }
        }
        for (class, boxes) in class_boxes {
            let mut slots_boxes: Vec<BBox> = boxes
                .iter()
                .map(|b| {
                    let jx = rng.random_range(0..=1usize);
                    let jy = rng.random_range(0..=1usize);
                    BBox {
                        x: (b.x + jx).min(w - 1),
                        y: (b.y + jy).min(h - 1),
                        w: b.w,
                        h: b.h,
                    }
                })
                .collect();
            while slots_boxes.len() < slots {
                let bw = rng.random_range(2..=w / 3);
                let bh = rng.random_range(2..=h / 3);
                slots_boxes.push(BBox {
                    x: rng.random_range(0..=w - bw),
                    y: rng.random_range(0..=h - bh),
                    w: bw,
                    h: bh,
                });
            }
            slots_boxes.truncate(slots);
            for (id, _, tb) in truth.iter().filter(|(_, c, _)| *c == class) {
                for (slot, b) in slots_boxes.iter().enumerate() {
                    let conf = (rng.random_range(0.05..1.0f64) * 1000.0).round() / 1000.0;
                    candidates.push(Candidate {
                        instance_id: *id,
                        frame: fi,
                        slot,
                        bbox: *b,
                        confidence: conf,
                    });
                    if tb.is_some_and(|t| t.iou(b) >= 0.5) {
                        accept.insert((*id, fi, slot));
                    }
                }
            }
        }
    }
    Ok(CurationFixture {
        scores: clip
            .triplets
            .iter()
            .map(|_| InteractionScore {
                contactness: rng.random_range(1..=5),
                dynamism: rng.random_range(1..=5),
                justification: String::new(),
                confidence: "synthetic".into(),
            })
            .collect(),
        clip: clip.clone(),
        candidates,
        sampled_frames,
        slots,
        verifier: TableVerifier { accept },
        propagation_failures: BTreeSet::new(),
        qc: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FixtureFile {
    manifest: String,
    scores: Vec<InteractionScore>,
    candidates: Vec<Candidate>,
    sampled_frames: usize,
    slots: usize,
    accept: Vec<(u8, usize, usize)>,
    #[serde(default)]
    propagation_failures: Vec<(u8, usize)>,
    #[serde(default)]
    qc: BTreeMap<u8, QcDecision>,
}

impl CurationFixture {
    /// JSON fixture next to the clip manifest it names.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let f: FixtureFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            clip: Clip::read(&base.join(&f.manifest))?,
            scores: f.scores,
            candidates: f.candidates,
            sampled_frames: f.sampled_frames,
            slots: f.slots,
            verifier: TableVerifier {
                accept: f.accept.into_iter().collect(),
            },
            propagation_failures: f.propagation_failures.into_iter().collect(),
            qc: f.qc,
        })
    }

    /// Writes the fixture and its manifest (inline masks) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        let manifest = self.clip.write(dir, true)?;
        let f = FixtureFile {
            manifest: manifest
                .file_name()
                .expect("file")
                .to_string_lossy()
                .into_owned(),
            scores: self.scores.clone(),
            candidates: self.candidates.clone(),
            sampled_frames: self.sampled_frames,
            slots: self.slots,
            accept: self.verifier.accept.iter().copied().collect(),
            propagation_failures: self.propagation_failures.iter().copied().collect(),
            qc: self.qc.clone(),
        };
        let path = dir.join(format!("{}.fixture.json", self.clip.clip_id));
        std::fs::write(&path, serde_json::to_string_pretty(&f)?)
            .map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }

    pub fn propagator(&self) -> FixturePropagator {
        FixturePropagator {
            tracks: self
                .clip
                .tracks
                .iter()
                .map(|t| (t.instance_id, t.clone()))
                .collect(),
            failures: self.propagation_failures.clone(),
        }
    }
}
