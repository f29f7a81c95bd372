//! Interaction scoring: ten yes/no questions per interaction (six stage
//! checks, four grounding checks), emergence/disappearance penalties over
//! sampled frames, and the KISA / SGI / SPI / IF arithmetic.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{LabError, Result};
use crate::grounding::csv_err;
use crate::mask_tracks::{Clip, InteractionTriplet};

pub const QUESTIONS_PER_INTERACTION: usize = 10;
pub const KISA_QUESTIONS: usize = 6;
pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_STRIDE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    During,
    Post,
    Grounding,
}

impl Stage {
    /// Stage of 1-based question `q`.
    pub fn of(q: usize) -> Stage {
        match q {
            1 => Stage::Pre,
            2..=5 => Stage::During,
            6 => Stage::Post,
            _ => Stage::Grounding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub number: usize,
    pub stage: Stage,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub interaction: InteractionTriplet,
    pub questions: Vec<Question>,
}

/// Inflections of an interaction verb used by the templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerbForms {
    pub gerund: String,
    pub participle: String,
}

impl VerbForms {
    /// Accepts a base or third-person verb, optionally phrasal
    /// (`"hand-over"`, `"hands over"`).
    pub fn of(verb: &str) -> Self {
        let verb = verb.trim().to_lowercase().replace('-', " ");
        let mut words = verb.split_whitespace();
        let head = words.next().unwrap_or("");
        let rest: Vec<&str> = words.collect();
        let base = third_to_base(head);
        let suffix = if rest.is_empty() {
            String::new()
        } else {
            format!(" {}", rest.join(" "))
        };
        Self {
            gerund: format!("{}{suffix}", gerund(&base)),
            participle: format!("{}{suffix}", participle(&base)),
        }
    }
}

fn third_to_base(w: &str) -> String {
    for end in ["ches", "shes", "sses", "xes", "zes"] {
        if let Some(stem) = w.strip_suffix("es").filter(|_| w.ends_with(end)) {
            return stem.to_string();
        }
    }
    if let Some(stem) = w.strip_suffix("ies") {
        return format!("{stem}y");
    }
    match w.strip_suffix('s') {
        Some(stem) if !w.ends_with("ss") && !stem.is_empty() => stem.to_string(),
        _ => w.to_string(),
    }
}

fn is_vowel(c: char) -> bool {
    "aeiou".contains(c)
}

fn gerund(base: &str) -> String {
    if let Some(stem) = base.strip_suffix("ie") {
        return format!("{stem}ying");
    }
    if base.ends_with('e') && !base.ends_with("ee") && base.len() > 2 {
        return format!("{}ing", &base[..base.len() - 1]);
    }
    format!("{base}ing")
}

fn participle(base: &str) -> String {
    if base.ends_with('e') {
        return format!("{base}d");
    }
    let chars: Vec<char> = base.chars().collect();
    if let [.., a, b] = chars.as_slice() {
        if *b == 'y' && !is_vowel(*a) {
            return format!("{}ied", &base[..base.len() - 1]);
        }
    }
    format!("{base}ed")
}

/// Fills the ten fixed templates. `descriptors` and `colors` are keyed by
/// instance id.
pub fn expand_templates(
    triplet: &InteractionTriplet,
    descriptors: &BTreeMap<u8, String>,
    colors: &BTreeMap<u8, String>,
) -> Result<QuestionSet> {
    let phrase = |k: u8| -> Result<String> {
        let d = descriptors
            .get(&k)
            .ok_or_else(|| LabError::data(format!("no descriptor for instance {k}")))?;
        let c = colors
            .get(&k)
            .ok_or_else(|| LabError::data(format!("no box color for instance {k}")))?;
        Ok(format!("{d} ({c} box)"))
    };
    let a = phrase(triplet.k_sub)?;
    let b = phrase(triplet.k_obj)?;
    let v = VerbForms::of(&triplet.verb);
    let (ing, ed) = (&v.gerund, &v.participle);
    let texts = [
        format!("At the start, is {a} apart from {b}?"),
        format!("Does {a} move toward {b}?"),
        format!("Does {a} come into contact with {b}?"),
        format!("Does {a} stay engaged with {b} during the action?"),
        format!("Is {a} visibly {ing} {b}?"),
        format!("At the end, does {b} show the outcome of being {ed} by {a}?"),
        format!("Is {a} performing an action?"),
        format!("Is {a} the one {ing} {b}?"),
        format!("Is {b} being {ed} by {a}?"),
        format!("Is {b} the one being {ed}?"),
    ];
    Ok(QuestionSet {
        interaction: triplet.clone(),
        questions: texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| Question {
                number: i + 1,
                stage: Stage::of(i + 1),
                text,
            })
            .collect(),
    })
}

/// Frames `0, stride, 2 stride, ...` plus the last frame.
pub fn sample_frames(n_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if n_frames == 0 {
        return Err(LabError::Empty("no frames to sample".into()));
    }
    if stride == 0 {
        return Err(LabError::config("stride must be >= 1"));
    }
    let mut out: Vec<usize> = (0..n_frames).step_by(stride).collect();
    if *out.last().expect("frame 0") != n_frames - 1 {
        out.push(n_frames - 1);
    }
    Ok(out)
}

fn yes_no<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<bool>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ans {
        Flag(bool),
        Text(String),
    }
    let raw = Vec::<Ans>::deserialize(d)?;
    raw.into_iter()
        .map(|a| match a {
            Ans::Flag(b) => Ok(b),
            Ans::Text(s) => match s.trim().to_lowercase().as_str() {
                "yes" | "y" | "true" => Ok(true),
                "no" | "n" | "false" => Ok(false),
                other => Err(serde::de::Error::custom(format!(
                    "answer {other:?} is not yes/no"
                ))),
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionAnswers {
    pub triplet: InteractionTriplet,
    #[serde(deserialize_with = "yes_no")]
    pub answers: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFlags {
    pub index: usize,
    #[serde(default)]
    pub emerged: bool,
    #[serde(default)]
    pub disappeared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSheet {
    pub clip_id: String,
    pub interactions: Vec<InteractionAnswers>,
    pub frames: Vec<FrameFlags>,
}

impl AnswerSheet {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Yes-fractions of Q1-Q6 and Q7-Q10.
pub fn score_raw(answers: &[bool]) -> Result<(f64, f64)> {
    if answers.len() != QUESTIONS_PER_INTERACTION {
        return Err(LabError::data(format!(
            "expected {QUESTIONS_PER_INTERACTION} answers, got {}",
            answers.len()
        )));
    }
    let yes = |s: &[bool]| s.iter().filter(|&&a| a).count() as f64 / s.len() as f64;
    Ok((
        yes(&answers[..KISA_QUESTIONS]),
        yes(&answers[KISA_QUESTIONS..]),
    ))
}

/// Mean of `1 - lambda * ratio` for emergence and disappearance, ratios over
/// the non-anchor frames. The anchor is the lowest index and must be unflagged.
pub fn score_spi(flags: &[FrameFlags], lambda: f64) -> Result<f64> {
    if flags.is_empty() {
        return Err(LabError::Empty("no sampled frames".into()));
    }
    if flags.len() < 2 {
        return Err(LabError::data(
            "SPI needs the anchor and at least one more frame",
        ));
    }
    let anchor = flags.iter().min_by_key(|f| f.index).expect("non-empty");
    if anchor.emerged || anchor.disappeared {
        return Err(LabError::data(format!(
            "anchor frame {} is flagged",
            anchor.index
        )));
    }
    let rest: Vec<&FrameFlags> = flags.iter().filter(|f| f.index != anchor.index).collect();
    if rest.len() + 1 != flags.len() {
        return Err(LabError::data("duplicate anchor frame index"));
    }
    let n = rest.len() as f64;
    let em = rest.iter().filter(|f| f.emerged).count() as f64 / n;
    let dis = rest.iter().filter(|f| f.disappeared).count() as f64 / n;
    Ok(((1.0 - lambda * em) + (1.0 - lambda * dis)) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalScores {
    #[serde(rename = "KISA")]
    pub kisa: f64,
    #[serde(rename = "SGI")]
    pub sgi: f64,
    #[serde(rename = "IF")]
    pub if_score: f64,
}

/// `KISA = kisa_raw * spi`, `SGI = sgi_raw * spi`, `IF` their mean. Negative
/// products are kept.
pub fn finalize(kisa_raw: f64, sgi_raw: f64, spi: f64) -> FinalScores {
    let kisa = kisa_raw * spi;
    let sgi = sgi_raw * spi;
    FinalScores {
        kisa,
        sgi,
        if_score: (kisa + sgi) / 2.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub verb: String,
    pub k_sub: u8,
    pub k_obj: u8,
    pub kisa_raw: f64,
    pub sgi_raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLedger {
    pub clip_id: String,
    pub interactions: Vec<InteractionScore>,
    pub kisa_raw: f64,
    pub sgi_raw: f64,
    pub spi: f64,
    #[serde(flatten)]
    pub scores: FinalScores,
}

/// Scores every interaction, averages the raw scores, then reweights by SPI.
pub fn score_sheet(sheet: &AnswerSheet, lambda: f64) -> Result<ScoreLedger> {
    if sheet.interactions.is_empty() {
        return Err(LabError::Empty(format!(
            "clip {} has no interactions",
            sheet.clip_id
        )));
    }
    let mut interactions = Vec::with_capacity(sheet.interactions.len());
    for ia in &sheet.interactions {
        let (k, s) = score_raw(&ia.answers)?;
        interactions.push(InteractionScore {
            verb: ia.triplet.verb.clone(),
            k_sub: ia.triplet.k_sub,
            k_obj: ia.triplet.k_obj,
            kisa_raw: k,
            sgi_raw: s,
        });
    }
    let n = interactions.len() as f64;
    let kisa_raw = interactions.iter().map(|i| i.kisa_raw).sum::<f64>() / n;
    let sgi_raw = interactions.iter().map(|i| i.sgi_raw).sum::<f64>() / n;
    let spi = score_spi(&sheet.frames, lambda)?;
    Ok(ScoreLedger {
        clip_id: sheet.clip_id.clone(),
        interactions,
        kisa_raw,
        sgi_raw,
        spi,
        scores: finalize(kisa_raw, sgi_raw, spi),
    })
}

/// `clip_id,KISA,SGI,IF,SPI,KISA_raw,SGI_raw` with a trailing `mean` row.
pub fn write_summary_csv(path: &Path, ledgers: &[ScoreLedger]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["clip_id", "KISA", "SGI", "IF", "SPI", "KISA_raw", "SGI_raw"])
        .map_err(|e| csv_err(path, e))?;
    let mut sums = [0.0; 6];
    for l in ledgers {
        let vals = [
            l.scores.kisa,
            l.scores.sgi,
            l.scores.if_score,
            l.spi,
            l.kisa_raw,
            l.sgi_raw,
        ];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        let mut rec = vec![l.clip_id.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    if !ledgers.is_empty() {
        let mut rec = vec!["mean".to_string()];
        rec.extend(
            sums.iter()
                .map(|s| format!("{:.6}", s / ledgers.len() as f64)),
        );
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Source of yes/no answers and per-frame flags.
pub trait Judge {
    fn answer(&self, clip_id: &str, questions: &QuestionSet) -> Result<Vec<bool>>;
    fn flags(&self, clip_id: &str, frames: &[usize]) -> Result<Vec<FrameFlags>>;
}

/// Replays stored answer sheets.
#[derive(Clone, Debug, Default)]
pub struct FixtureJudge {
    sheets: BTreeMap<String, AnswerSheet>,
}

impl FixtureJudge {
    pub fn new(sheets: impl IntoIterator<Item = AnswerSheet>) -> Self {
        Self {
            sheets: sheets.into_iter().map(|s| (s.clip_id.clone(), s)).collect(),
        }
    }

    fn sheet(&self, clip_id: &str) -> Result<&AnswerSheet> {
        self.sheets
            .get(clip_id)
            .ok_or_else(|| LabError::data(format!("no recorded answers for clip {clip_id}")))
    }
}

impl Judge for FixtureJudge {
    fn answer(&self, clip_id: &str, questions: &QuestionSet) -> Result<Vec<bool>> {
        let t = &questions.interaction;
        self.sheet(clip_id)?
            .interactions
            .iter()
            .find(|ia| {
                ia.triplet.verb == t.verb
                    && ia.triplet.k_sub == t.k_sub
                    && ia.triplet.k_obj == t.k_obj
            })
            .map(|ia| ia.answers.clone())
            .ok_or_else(|| {
                LabError::data(format!("no recorded answers for {} in {clip_id}", t.verb))
            })
    }

    fn flags(&self, clip_id: &str, frames: &[usize]) -> Result<Vec<FrameFlags>> {
        let sheet = self.sheet(clip_id)?;
        frames
            .iter()
            .map(|&f| {
                sheet
                    .frames
                    .iter()
                    .find(|x| x.index == f)
                    .copied()
                    .ok_or_else(|| LabError::data(format!("no flags for frame {f} of {clip_id}")))
            })
            .collect()
    }
}

fn centroid(m: &Array2<u8>) -> Option<(f64, f64)> {
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

/// True when a one-cell of `a` is within one pixel (8-neighbourhood) of a
/// one-cell of `b`, overlap included.
pub fn masks_adjacent(a: &Array2<u8>, b: &Array2<u8>) -> bool {
    let (h, w) = a.dim();
    for ((y, x), &v) in a.indexed_iter() {
        if v == 0 {
            continue;
        }
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if b[[yy, xx]] != 0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Answers from the ground-truth tracks of procedural clips: contact is mask
/// adjacency, motion is centroid displacement of at least one pixel, and the
/// outcome question uses the clip's success label.
#[derive(Clone, Debug, Default)]
pub struct OracleJudge {
    clips: BTreeMap<String, Clip>,
    stride: usize,
}

impl OracleJudge {
    pub fn new(clips: impl IntoIterator<Item = Clip>, stride: usize) -> Self {
        Self {
            clips: clips.into_iter().map(|c| (c.clip_id.clone(), c)).collect(),
            stride,
        }
    }

    fn clip(&self, id: &str) -> Result<&Clip> {
        self.clips
            .get(id)
            .ok_or_else(|| LabError::data(format!("oracle has no clip {id}")))
    }
}

impl Judge for OracleJudge {
    fn answer(&self, clip_id: &str, questions: &QuestionSet) -> Result<Vec<bool>> {
        let clip = self.clip(clip_id)?;
        let t = &questions.interaction;
        let track = |k: u8| {
            clip.track(k)
                .ok_or_else(|| LabError::data(format!("clip {clip_id} has no instance {k}")))
        };
        let (sub, obj) = (track(t.k_sub)?, track(t.k_obj)?);
        let frames = sample_frames(sub.frames(), self.stride.max(1))?;
        let frame = |m: &crate::mask_tracks::MaskTrack, f: usize| {
            m.masks.index_axis(ndarray::Axis(0), f).to_owned()
        };
        let contact: Vec<bool> = frames
            .iter()
            .map(|&f| masks_adjacent(&frame(sub, f), &frame(obj, f)))
            .collect();
        let first_contact = contact.iter().position(|&c| c);
        let moved = |m: &crate::mask_tracks::MaskTrack, from: usize, to: usize| match (
            centroid(&frame(m, from)),
            centroid(&frame(m, to)),
        ) {
            (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= 1.0,
            _ => false,
        };
        let dist = |f: usize| match (centroid(&frame(sub, f)), centroid(&frame(obj, f))) {
            (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            _ => f64::INFINITY,
        };
        let last = *frames.last().expect("sampled");
        let contact_frame = first_contact.map(|i| frames[i]);
        let obj_moves_after = contact_frame.is_some_and(|c| moved(obj, c, last));
        let sub_moves = moved(sub, 0, last);
        let success = clip.success.unwrap_or(false);
        Ok(vec![
            !contact[0],
            dist(last) < dist(0) || contact_frame.is_some(),
            contact_frame.is_some(),
            contact.iter().filter(|&&c| c).count() >= 2,
            contact_frame.is_some() && obj_moves_after,
            success,
            sub_moves,
            contact_frame.is_some() && sub_moves,
            obj_moves_after,
            moved(obj, 0, last),
        ])
    }

    fn flags(&self, clip_id: &str, frames: &[usize]) -> Result<Vec<FrameFlags>> {
        let clip = self.clip(clip_id)?;
        let anchor = *frames
            .iter()
            .min()
            .ok_or_else(|| LabError::Empty("no frames".into()))?;
        let present = |f: usize| -> Vec<bool> {
            clip.tracks
                .iter()
                .map(|t| {
                    t.masks
                        .index_axis(ndarray::Axis(0), f)
                        .iter()
                        .any(|&v| v != 0)
                })
                .collect()
        };
        let base = present(anchor);
        Ok(frames
            .iter()
            .map(|&f| {
                let now = present(f);
                FrameFlags {
                    index: f,
                    emerged: base.iter().zip(&now).any(|(&b, &n)| !b && n),
                    disappeared: base.iter().zip(&now).any(|(&b, &n)| b && !n),
                }
            })
            .collect())
    }
}

/// Builds the question sets for every triplet, asks `judge`, and scores.
pub fn evaluate_clip(
    clip: &Clip,
    judge: &dyn Judge,
    colors: &BTreeMap<u8, String>,
    stride: usize,
    lambda: f64,
) -> Result<(Vec<QuestionSet>, ScoreLedger)> {
    let descriptors: BTreeMap<u8, String> = clip
        .tracks
        .iter()
        .map(|t| (t.instance_id, t.descriptor.clone()))
        .collect();
    let n_frames = clip.tracks.first().map(|t| t.frames()).unwrap_or(0);
    let frames = sample_frames(n_frames, stride)?;
    let mut sets = Vec::new();
    let mut interactions = Vec::new();
    for t in &clip.triplets {
        let qs = expand_templates(t, &descriptors, colors)?;
        let answers = judge.answer(&clip.clip_id, &qs)?;
        interactions.push(InteractionAnswers {
            triplet: t.clone(),
            answers,
        });
        sets.push(qs);
    }
    let sheet = AnswerSheet {
        clip_id: clip.clip_id.clone(),
        interactions,
        frames: judge.flags(&clip.clip_id, &frames)?,
    };
    Ok((sets, score_sheet(&sheet, lambda)?))
}

/// Default box colors by instance id.
pub fn default_colors() -> BTreeMap<u8, String> {
    ["red", "blue", "green", "yellow", "purple"]
        .iter()
        .enumerate()
        .map(|(i, c)| (i as u8 + 1, c.to_string()))
        .collect()
}
