//! Procedural toy clips: flat-colored squares and discs on piecewise-linear
//! paths acting out one of four geometric interactions. Masks are the
//! rasterization itself, so they match the pixels exactly.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, MAX_INSTANCES};
use crate::error::{LabError, Result};
use crate::mask_tracks::{Clip, InteractionTriplet, MaskTrack, RoleTokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Push,
    Lift,
    Approach,
    HandOver,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Push, Verb::Lift, Verb::Approach, Verb::HandOver];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Push => "push",
            Verb::Lift => "lift",
            Verb::Approach => "approach",
            Verb::HandOver => "hand-over",
        }
    }

    fn prompt_word(self) -> &'static str {
        match self {
            Verb::Push => "pushes",
            Verb::Lift => "lifts",
            Verb::Approach => "approaches",
            Verb::HandOver => "hands",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }

    fn covers(self, size: usize, dy: usize, dx: usize) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = size as f64 / 2.0;
                let (y, x) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
                y * y + x * x <= r * r
            }
        }
    }
}

/// Flat instance colors (8-bit RGB); palette index `p` uses entry `p - 1`.
pub const PALETTE: [[u8; 3]; MAX_INSTANCES] = [
    [230, 51, 51],
    [51, 102, 242],
    [51, 217, 77],
    [242, 217, 51],
    [178, 77, 230],
];
pub const PALETTE_NAMES: [&str; MAX_INSTANCES] = ["red", "blue", "green", "yellow", "purple"];
pub const BACKGROUND: [u8; 3] = [26, 26, 26];

fn palette_rgb(p: u8) -> [u8; 3] {
    PALETTE[p as usize - 1]
}

/// Top-left corner at `frame`; positions between keyframes are linearly
/// interpolated, truncated toward the earlier keyframe, and held outside the
/// keyframe range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeScript {
    pub id: u8,
    pub kind: ShapeKind,
    pub palette_index: u8,
    pub size: usize,
    pub path: Vec<Keyframe>,
}

impl ShapeScript {
    pub fn position(&self, f: usize) -> (usize, usize) {
        let p = &self.path;
        if f <= p[0].frame {
            return (p[0].y, p[0].x);
        }
        for w in p.windows(2) {
            let (a, b) = (w[0], w[1]);
            if f <= b.frame {
                let t = (f - a.frame) as f64 / (b.frame - a.frame) as f64;
                let lerp =
                    |u: usize, v: usize| (u as f64 + ((v as f64 - u as f64) * t).trunc()) as usize;
                return (lerp(a.y, b.y), lerp(a.x, b.x));
            }
        }
        let last = p[p.len() - 1];
        (last.y, last.x)
    }

    pub fn color_name(&self) -> &'static str {
        PALETTE_NAMES[self.palette_index as usize - 1]
    }

    pub fn descriptor(&self) -> String {
        format!("{} {}", self.color_name(), self.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionScript {
    pub verb: Verb,
    pub k_sub: u8,
    pub k_obj: u8,
    /// Receiving instance of a hand-over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_recipient: Option<u8>,
    pub contact_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneScript {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeScript>,
    pub interaction: InteractionScript,
    /// Whether the paths were laid out to complete the interaction.
    pub intended_success: bool,
}

impl SceneScript {
    pub fn shape(&self, id: u8) -> Option<&ShapeScript> {
        self.shapes.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() > MAX_INSTANCES {
            return Err(LabError::Capacity(format!(
                "{} shapes exceed the {MAX_INSTANCES}-instance budget",
                self.shapes.len()
            )));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(LabError::config("scene dimensions must be >= 1"));
        }
        let mut ids: Vec<u8> = self.shapes.iter().map(|s| s.id).collect();
        let mut pal: Vec<u8> = self.shapes.iter().map(|s| s.palette_index).collect();
        ids.sort_unstable();
        pal.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || pal.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::config(
                "shape ids and palette indices must be unique",
            ));
        }
        for s in &self.shapes {
            if s.id == 0
                || s.id as usize > MAX_INSTANCES
                || s.palette_index == 0
                || s.palette_index as usize > MAX_INSTANCES
            {
                return Err(LabError::config(format!(
                    "shape {} id or palette out of range",
                    s.id
                )));
            }
            if s.path.is_empty() || s.size == 0 {
                return Err(LabError::config(format!(
                    "shape {} has no path or zero size",
                    s.id
                )));
            }
            if s.path.windows(2).any(|w| w[0].frame >= w[1].frame) {
                return Err(LabError::config(format!(
                    "shape {} keyframes not increasing",
                    s.id
                )));
            }
            // linear paths between in-frame keyframes stay in frame
            for k in &s.path {
                if k.y + s.size > self.height || k.x + s.size > self.width {
                    return Err(LabError::config(format!("shape {} leaves the frame", s.id)));
                }
            }
        }
        let it = &self.interaction;
        if self.interaction.contact_frame >= self.frames {
            return Err(LabError::config("contact frame beyond the clip"));
        }
        for k in [Some(it.k_sub), Some(it.k_obj), it.k_recipient]
            .into_iter()
            .flatten()
        {
            if self.shape(k).is_none() {
                return Err(LabError::config(format!(
                    "interaction refers to missing shape {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Rendered pixels plus the exact per-instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[F, H, W, 3]` in `[0, 1]`, values are `u8 / 255`.
    pub video: Array4<f64>,
    pub tracks: Vec<MaskTrack>,
}

/// Draws shapes in ascending id order (higher ids on top). Each mask is the
/// set of pixels showing that instance's color.
pub fn render(script: &SceneScript) -> Result<Rendered> {
    script.validate()?;
    let (f, h, w) = (script.frames, script.height, script.width);
    let mut owner = Array3::<u8>::zeros((f, h, w));
    let mut order: Vec<&ShapeScript> = script.shapes.iter().collect();
    order.sort_by_key(|s| s.id);
    for fi in 0..f {
        for s in &order {
            let (y0, x0) = s.position(fi);
            for dy in 0..s.size {
                for dx in 0..s.size {
                    if s.kind.covers(s.size, dy, dx) {
                        owner[[fi, y0 + dy, x0 + dx]] = s.id;
                    }
                }
            }
        }
    }
    let mut video = Array4::zeros((f, h, w, 3));
    for ((fi, y, x), &id) in owner.indexed_iter() {
        let rgb = match script.shape(id) {
            Some(s) if id != 0 => palette_rgb(s.palette_index),
            _ => BACKGROUND,
        };
        for c in 0..3 {
            video[[fi, y, x, c]] = rgb[c] as f64 / 255.0;
        }
    }
    let mut tracks = Vec::with_capacity(order.len());
    for s in order {
        let masks = owner.mapv(|o| u8::from(o == s.id));
        let mut track = MaskTrack::new(s.id, s.kind.as_str(), s.descriptor(), masks)?;
        track.palette_index = s.palette_index;
        tracks.push(track);
    }
    Ok(Rendered { video, tracks })
}

/// Instance mask recovered from pixels by nearest palette color within
/// `tol` (Euclidean, RGB in `[0, 1]`).
pub fn color_mask(video: &Array4<f64>, palette_index: u8, tol: f64) -> Array3<u8> {
    let target = palette_rgb(palette_index).map(|v| v as f64 / 255.0);
    let (f, h, w, _) = video.dim();
    Array3::from_shape_fn((f, h, w), |(fi, y, x)| {
        let d: f64 = (0..3)
            .map(|c| (video[[fi, y, x, c]] - target[c]).powi(2))
            .sum();
        u8::from(d.sqrt() <= tol)
    })
}

fn centroid(m: ndarray::ArrayView2<u8>) -> Option<(f64, f64)> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &v) in m.indexed_iter() {
        if v != 0 {
            sy += y as f64;
            sx += x as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub const COLOR_TOLERANCE: f64 = 0.2;

/// Geometric success check on the first and last frames of `video`:
/// push moves the object at least half its size away from the subject,
/// lift raises it by half its size, approach halves the centroid distance,
/// and hand-over leaves the object nearer the recipient than the giver.
pub fn label_success(script: &SceneScript, video: &Array4<f64>) -> Result<bool> {
    let last = video
        .dim()
        .0
        .checked_sub(1)
        .ok_or_else(|| LabError::Empty("empty video".into()))?;
    let it = &script.interaction;
    let shape = |k: u8| {
        script
            .shape(k)
            .ok_or_else(|| LabError::config(format!("script has no shape {k}")))
    };
    let (sub, obj) = (shape(it.k_sub)?, shape(it.k_obj)?);
    let cent = |s: &ShapeScript, f: usize| {
        let m = color_mask(video, s.palette_index, COLOR_TOLERANCE);
        centroid(m.index_axis(Axis(0), f))
    };
    let half = obj.size as f64 / 2.0;
    Ok(match it.verb {
        Verb::Push => match (cent(sub, 0), cent(obj, 0), cent(obj, last)) {
            (Some(s0), Some(o0), Some(o1)) => {
                let (dy, dx) = (o0.0 - s0.0, o0.1 - s0.1);
                let norm = (dy * dy + dx * dx).sqrt().max(1e-12);
                ((o1.0 - o0.0) * dy + (o1.1 - o0.1) * dx) / norm >= half
            }
            _ => false,
        },
        Verb::Lift => match (cent(obj, 0), cent(obj, last)) {
            (Some(o0), Some(o1)) => o0.0 - o1.0 >= half,
            _ => false,
        },
        Verb::Approach => match (cent(sub, 0), cent(obj, 0), cent(sub, last), cent(obj, last)) {
            (Some(s0), Some(o0), Some(s1), Some(o1)) => dist(s1, o1) < 0.5 * dist(s0, o0),
            _ => false,
        },
        Verb::HandOver => {
            let rec = shape(
                it.k_recipient
                    .ok_or_else(|| LabError::config("hand-over without recipient"))?,
            )?;
            match (cent(obj, last), cent(rec, last), cent(sub, last)) {
                (Some(o), Some(r), Some(s)) => dist(o, r) < dist(o, s),
                _ => false,
            }
        }
    })
}

/// Word list of the toy prompt language; token id = position.
pub const VOCABULARY: [&str; 18] = [
    "<pad>",
    "the",
    "to",
    "red",
    "blue",
    "green",
    "yellow",
    "purple",
    "square",
    "circle",
    "pushes",
    "lifts",
    "approaches",
    "hands",
    "a",
    "and",
    "small",
    "big",
];

pub fn token_id(word: &str) -> Result<usize> {
    VOCABULARY
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| LabError::data(format!("word {word:?} not in vocabulary")))
}

/// Prompt text, padded token ids and per-role token positions.
pub fn build_prompt(
    script: &SceneScript,
    text_len: usize,
) -> Result<(String, Vec<usize>, RoleTokens)> {
    let it = &script.interaction;
    let shape = |k: u8| {
        script
            .shape(k)
            .ok_or_else(|| LabError::config(format!("no shape {k}")))
    };
    let (sub, obj) = (shape(it.k_sub)?, shape(it.k_obj)?);
    let mut words: Vec<&str> = Vec::new();
    let push_phrase = |words: &mut Vec<&str>, s: &ShapeScript| -> Vec<usize> {
        words.push("the");
        let start = words.len();
        words.push(s.color_name());
        words.push(s.kind.as_str());
        vec![start, start + 1]
    };
    let sub_tok = push_phrase(&mut words, sub);
    let verb_tok = vec![words.len()];
    words.push(it.verb.prompt_word());
    let obj_tok = push_phrase(&mut words, obj);
    if let Some(r) = it.k_recipient {
        words.push("to");
        push_phrase(&mut words, shape(r)?);
    }
    if words.len() > text_len {
        return Err(LabError::config(format!(
            "prompt needs {} tokens, model text length is {text_len}",
            words.len()
        )));
    }
    let mut ids = words
        .iter()
        .map(|w| token_id(w))
        .collect::<Result<Vec<_>>>()?;
    ids.resize(text_len, 0);
    Ok((
        words.join(" "),
        ids,
        RoleTokens {
            sub: sub_tok,
            obj: obj_tok,
            verb: verb_tok,
        },
    ))
}

/// Manifest-ready clip for a rendered script; the success label comes from
/// [`label_success`] on the rendered pixels.
pub fn to_clip(
    clip_id: &str,
    script: &SceneScript,
    rendered: &Rendered,
    text_len: usize,
) -> Result<Clip> {
    let (prompt, prompt_tokens, tokens) = build_prompt(script, text_len)?;
    let it = &script.interaction;
    let success = label_success(script, &rendered.video)?;
    let source_span = {
        let sub = script.shape(it.k_sub).expect("validated").descriptor();
        let obj = script.shape(it.k_obj).expect("validated").descriptor();
        format!("{sub} {} {obj}", it.verb.prompt_word())
    };
    let clip = Clip {
        clip_id: clip_id.to_string(),
        prompt,
        prompt_tokens,
        tracks: rendered.tracks.clone(),
        triplets: vec![InteractionTriplet {
            verb: it.verb.as_str().to_string(),
            k_sub: it.k_sub,
            k_obj: it.k_obj,
            source_span,
            token_sets: Some(tokens),
        }],
        success: Some(success),
    };
    clip.validate()?;
    Ok(clip)
}

struct Layout<'a> {
    rng: &'a mut ChaCha8Rng,
    frames: usize,
    height: usize,
    width: usize,
}

fn kf(frame: usize, y: usize, x: usize) -> Keyframe {
    Keyframe { frame, y, x }
}

/// Axis-aligned placement along a line; mirrored and transposed variants
/// give all four directions from one left-to-right layout.
#[derive(Clone, Copy)]
struct Orient {
    transpose: bool,
    mirror: bool,
}

impl Orient {
    fn apply(self, along: usize, across: usize, size: usize, long: usize) -> (usize, usize) {
        let along = if self.mirror {
            long - size - along
        } else {
            along
        };
        if self.transpose {
            (along, across)
        } else {
            (across, along)
        }
    }
}

fn shape(id: u8, kind: ShapeKind, palette: u8, size: usize, path: Vec<Keyframe>) -> ShapeScript {
    ShapeScript {
        id,
        kind,
        palette_index: palette,
        size,
        path,
    }
}

/// Path in line coordinates `(frame, along, across)` to pixel keyframes.
fn oriented(o: Orient, size: usize, long: usize, pts: &[(usize, usize, usize)]) -> Vec<Keyframe> {
    pts.iter()
        .map(|&(f, a, c)| {
            let (y, x) = o.apply(a, c, size, long);
            kf(f, y, x)
        })
        .collect()
}

impl Layout<'_> {
    fn kind(&mut self) -> ShapeKind {
        if self.rng.random_bool(0.5) {
            ShapeKind::Square
        } else {
            ShapeKind::Circle
        }
    }

    fn script(
        &mut self,
        verb: Verb,
        success: bool,
        palette: &[u8],
    ) -> Result<(Vec<ShapeScript>, InteractionScript)> {
        let (f, h, w) = (self.frames, self.height, self.width);
        let short = h.min(w);
        if short < 16 || f < 5 {
            return Err(LabError::config(
                "synthetic scenes need >= 16x16 pixels and >= 5 frames",
            ));
        }
        let size = (short / 4).clamp(4, 8) - self.rng.random_range(0..2usize);
        let last = f - 1;
        let c = self
            .rng
            .random_range(f / 4..=(3 * f / 4).min(last - 1))
            .max(1);
        let (k1, k2) = (self.kind(), self.kind());
        let (p1, p2) = (palette[0], palette[1]);
        match verb {
            Verb::Push | Verb::Lift => {
                // lift: subject rises from below; push: any of four directions
                let o = if verb == Verb::Lift {
                    Orient {
                        transpose: true,
                        mirror: true,
                    }
                } else {
                    Orient {
                        transpose: self.rng.random_bool(0.5),
                        mirror: self.rng.random_bool(0.5),
                    }
                };
                let (long, cross) = if o.transpose { (h, w) } else { (w, h) };
                let travel = size / 2 + 2;
                let gap_max = (long - 2 - 2 * size - travel).min(6);
                let gap = self.rng.random_range(3.min(gap_max)..=gap_max);
                let across = self.rng.random_range(1..=cross - size - 1);
                let s0 = 1;
                let ob = s0 + size + gap;
                let d = if success { travel } else { 0 };
                let sub_path = oriented(
                    o,
                    size,
                    long,
                    &[
                        (0, s0, across),
                        (c, ob - size, across),
                        (last, ob - size + d, across),
                    ],
                );
                let obj_path = oriented(
                    o,
                    size,
                    long,
                    &[(0, ob, across), (c, ob, across), (last, ob + d, across)],
                );
                Ok((
                    vec![
                        shape(1, k1, p1, size, sub_path),
                        shape(2, k2, p2, size, obj_path),
                    ],
                    InteractionScript {
                        verb,
                        k_sub: 1,
                        k_obj: 2,
                        k_recipient: None,
                        contact_frame: c,
                    },
                ))
            }
            Verb::Approach => {
                let o = Orient {
                    transpose: self.rng.random_bool(0.5),
                    mirror: self.rng.random_bool(0.5),
                };
                let (long, cross) = if o.transpose { (h, w) } else { (w, h) };
                let gap_hi = long - 2 - 2 * size;
                let gap = self.rng.random_range((size + 2).min(gap_hi)..=gap_hi);
                let across = self.rng.random_range(1..=cross - size - 1);
                let ob = 1 + size + gap;
                let end = if success { ob - size } else { 1 + gap / 4 };
                let sub_path = oriented(o, size, long, &[(0, 1, across), (c, end, across)]);
                let obj_path = oriented(o, size, long, &[(0, ob, across)]);
                Ok((
                    vec![
                        shape(1, k1, p1, size, sub_path),
                        shape(2, k2, p2, size, obj_path),
                    ],
                    InteractionScript {
                        verb,
                        k_sub: 1,
                        k_obj: 2,
                        k_recipient: None,
                        contact_frame: c,
                    },
                ))
            }
            Verb::HandOver => {
                let o = Orient {
                    transpose: false,
                    mirror: self.rng.random_bool(0.5),
                };
                let item = size - 2;
                let gap_max = (w - 2 - 2 * size - item).min(8);
                let gap = self.rng.random_range(3.min(gap_max)..=gap_max);
                let across = self.rng.random_range(1..=h - size - 1);
                let item_across = across + (size - item) / 2;
                let giver0 = 1;
                let item0 = giver0 + size;
                let rec = item0 + item + gap;
                let shift = gap;
                let giver_path = oriented(
                    o,
                    size,
                    w,
                    &[
                        (0, giver0, across),
                        (c, giver0 + shift, across),
                        (last, giver0, across),
                    ],
                );
                let item_end = if success { item0 + shift } else { item0 };
                let item_path = oriented(
                    o,
                    item,
                    w,
                    &[
                        (0, item0, item_across),
                        (c, item0 + shift, item_across),
                        (last, item_end, item_across),
                    ],
                );
                let rec_path = oriented(o, size, w, &[(0, rec, across)]);
                let k3 = self.kind();
                Ok((
                    vec![
                        shape(1, k1, p1, size, giver_path),
                        shape(2, k2, p2, item, item_path),
                        shape(3, k3, palette[2], size, rec_path),
                    ],
                    InteractionScript {
                        verb,
                        k_sub: 1,
                        k_obj: 2,
                        k_recipient: Some(3),
                        contact_frame: c,
                    },
                ))
            }
        }
    }
}

fn swept_boxes(shapes: &[ShapeScript], frames: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for s in shapes {
        for f in 0..frames {
            let (y, x) = s.position(f);
            out.push((y, x, y + s.size, x + s.size));
        }
    }
    out
}

/// Random script for `verb` whose paths do or do not complete the
/// interaction. Up to two static distractors are added in free space.
pub fn random_script(
    seed: u64,
    verb: Verb,
    success: bool,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<SceneScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut palette: Vec<u8> = (1..=MAX_INSTANCES as u8).collect();
    for i in (1..palette.len()).rev() {
        let j = rng.random_range(0..=i);
        palette.swap(i, j);
    }
    let (mut shapes, interaction) = Layout {
        rng: &mut rng,
        frames,
        height,
        width,
    }
    .script(verb, success, &palette)?;
    let n_distract = rng.random_range(0..=2usize);
    for _ in 0..n_distract {
        let id = shapes.len() as u8 + 1;
        let size = rng.random_range(3..=5usize);
        let occupied = swept_boxes(&shapes, frames);
        let free = (0..50).find_map(|_| {
            let y = rng.random_range(0..=height - size);
            let x = rng.random_range(0..=width - size);
            let clear = occupied
                .iter()
                .all(|&(y0, x0, y1, x1)| y + size < y0 || y > y1 || x + size < x0 || x > x1);
            clear.then_some((y, x))
        });
        let Some((y, x)) = free else { break };
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Square
        } else {
            ShapeKind::Circle
        };
        shapes.push(shape(
            id,
            kind,
            palette[id as usize - 1],
            size,
            vec![kf(0, y, x)],
        ));
    }
    let script = SceneScript {
        seed,
        frames,
        height,
        width,
        shapes,
        interaction,
        intended_success: success,
    };
    script.validate()?;
    Ok(script)
}

/// One generated clip with its script and pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub script: SceneScript,
    pub clip: Clip,
    pub video: Array4<f64>,
}

/// `n` clips cycling through the verbs; intended outcomes alternate per
/// verb cycle so both labels are represented.
pub fn generate(n: usize, seed: u64, cfg: &ModelConfig) -> Result<Vec<GeneratedClip>> {
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    let (f, h, w) = (cfg.pixel_frames(), cfg.pixel_height(), cfg.pixel_width());
    (0..n)
        .map(|i| {
            let clip_seed = root.next_u64();
            let verb = Verb::ALL[i % Verb::ALL.len()];
            let success = (i / Verb::ALL.len()).is_multiple_of(2);
            let script = random_script(clip_seed, verb, success, f, h, w)?;
            let rendered = render(&script)?;
            let clip = to_clip(&format!("clip{i:04}"), &script, &rendered, cfg.text_len)?;
            Ok(GeneratedClip {
                script,
                clip,
                video: rendered.video,
            })
        })
        .collect()
}

const VIDEO_MAGIC: &[u8; 8] = b"MXLVID01";

/// `magic | u32 F | u32 H | u32 W | F*H*W*3 u8` (RGB, row-major).
pub fn write_video(path: &Path, video: &Array4<f64>) -> Result<()> {
    let (f, h, w, c) = video.dim();
    if c != 3 {
        return Err(LabError::shape("video must have 3 channels"));
    }
    let mut bytes = Vec::with_capacity(20 + video.len());
    bytes.extend_from_slice(VIDEO_MAGIC);
    for d in [f, h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend(
        video
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_video(path: &Path) -> Result<Array4<f64>> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != VIDEO_MAGIC {
        return Err(LabError::data(format!(
            "{} is not a video file",
            path.display()
        )));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (f, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[20..];
    if body.len() != f * h * w * 3 {
        return Err(LabError::data(format!(
            "{} has a truncated payload",
            path.display()
        )));
    }
    Ok(Array4::from_shape_vec(
        (f, h, w, 3),
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("checked length"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub clip_id: String,
    pub manifest: String,
    pub video: String,
    pub script: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub clips: Vec<DatasetEntry>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes manifests, videos, scripts and `index.json` into `dir`.
pub fn write_dataset(dir: &Path, clips: &[GeneratedClip], inline_masks: bool) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut index = DatasetIndex { clips: Vec::new() };
    for g in clips {
        let id = &g.clip.clip_id;
        let manifest = g.clip.write(dir, inline_masks)?;
        let video = format!("{id}.video");
        write_video(&dir.join(&video), &g.video)?;
        let script = format!("{id}.script.json");
        let sp = dir.join(&script);
        std::fs::write(&sp, serde_json::to_string_pretty(&g.script)?)
            .map_err(|e| LabError::io(&sp, e))?;
        index.clips.push(DatasetEntry {
            clip_id: id.clone(),
            manifest: manifest
                .file_name()
                .expect("file")
                .to_string_lossy()
                .into_owned(),
            video,
            script,
        });
    }
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?)
        .map_err(|e| LabError::io(&path, e))?;
    Ok(path)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<GeneratedClip>> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    index
        .clips
        .iter()
        .map(|e| {
            let sp = dir.join(&e.script);
            let st = std::fs::read_to_string(&sp).map_err(|err| LabError::io(&sp, err))?;
            Ok(GeneratedClip {
                script: serde_json::from_str(&st)?,
                clip: Clip::read(&dir.join(&e.manifest))?,
                video: read_video(&dir.join(&e.video))?,
            })
        })
        .collect()
}

/// Pixel-space bounding box `(y0, x0, y1, x1)` (exclusive ends) of one frame.
pub fn bbox(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            b = Some(match b {
                None => (y, x, y + 1, x + 1),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
            });
        }
    }
    b
}
