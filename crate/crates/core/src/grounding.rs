//! Video-to-text grounding maps, attention alignment scores (AAS) and the
//! per-clip score table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dit::AttentionRecord;
use crate::error::{LabError, Result};
use crate::mask_tracks::LatentMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sub,
    Obj,
    Verb,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Sub, Role::Obj, Role::Verb];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Sub => "sub",
            Role::Obj => "obj",
            Role::Verb => "verb",
        }
    }

    pub fn is_noun(self) -> bool {
        self != Role::Verb
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sub" => Ok(Role::Sub),
            "obj" => Ok(Role::Obj),
            "verb" => Ok(Role::Verb),
            other => Err(LabError::data(format!("unknown role '{other}'"))),
        }
    }
}

/// Which attention block and which roles an AAS value summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "noun-v2t")]
    NounV2t,
    #[serde(rename = "verb-v2t")]
    VerbV2t,
    #[serde(rename = "noun-v2v")]
    NounV2v,
    #[serde(rename = "verb-v2v")]
    VerbV2v,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NounV2t,
        Variant::VerbV2t,
        Variant::NounV2v,
        Variant::VerbV2v,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NounV2t => "noun-v2t",
            Variant::VerbV2t => "verb-v2t",
            Variant::NounV2v => "noun-v2v",
            Variant::VerbV2v => "verb-v2v",
        }
    }

    pub fn roles(self) -> &'static [Role] {
        match self {
            Variant::NounV2t | Variant::NounV2v => &[Role::Sub, Role::Obj],
            Variant::VerbV2t | Variant::VerbV2v => &[Role::Verb],
        }
    }

    pub fn is_v2t(self) -> bool {
        matches!(self, Variant::NounV2t | Variant::VerbV2t)
    }

    pub fn for_role(role: Role, v2t: bool) -> Self {
        match (role.is_noun(), v2t) {
            (true, true) => Variant::NounV2t,
            (false, true) => Variant::VerbV2t,
            (true, false) => Variant::NounV2v,
            (false, false) => Variant::VerbV2v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LabError::data(format!("unknown variant '{s}'")))
    }
}

/// How attention heads are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadAggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSetSpec {
    pub role: Role,
    pub token_indices: Vec<usize>,
}

impl TokenSetSpec {
    pub fn new(role: Role, token_indices: Vec<usize>) -> Self {
        Self {
            role,
            token_indices,
        }
    }

    pub fn validate(&self, text_len: usize) -> Result<()> {
        if self.token_indices.is_empty() {
            return Err(LabError::Empty(format!(
                "token set for {} is empty",
                self.role
            )));
        }
        if let Some(&bad) = self.token_indices.iter().find(|&&t| t >= text_len) {
            return Err(LabError::config(format!(
                "token index {bad} outside prompt of {text_len}"
            )));
        }
        Ok(())
    }
}

/// A heatmap on the latent grid `[F_lat, H_lat, W_lat]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub values: Array3<f64>,
}

pub type GroundingMap = LatentMap;

impl LatentMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

fn aggregate_heads(block: &Array3<f64>, agg: HeadAggregation) -> Array2<f64> {
    let summed = block.sum_axis(Axis(0));
    match agg {
        HeadAggregation::Sum => summed,
        HeadAggregation::Mean => summed / block.shape()[0] as f64,
    }
}

/// Token-mean of head-summed v2t columns, reshaped to the latent grid.
pub fn grounding_map(record: &AttentionRecord, spec: &TokenSetSpec) -> Result<GroundingMap> {
    grounding_map_with(record, spec, HeadAggregation::Sum)
}

pub fn grounding_map_with(
    record: &AttentionRecord,
    spec: &TokenSetSpec,
    agg: HeadAggregation,
) -> Result<GroundingMap> {
    let layout = record.layout;
    spec.validate(layout.text_len)?;
    let nv = layout.n_video();
    let mut cols = Array2::<f64>::zeros((record.n_heads(), nv));
    for &t in &spec.token_indices {
        let key = layout.text_index(t);
        cols += &record.head_maps.slice(s![.., ..nv, key]);
    }
    cols /= spec.token_indices.len() as f64;
    let per_head = cols.insert_axis(Axis(1));
    let flat = aggregate_heads(&per_head, agg);
    Ok(LatentMap {
        values: flat
            .into_shape_with_order((layout.frames, layout.height, layout.width))
            .map_err(|e| LabError::shape(e.to_string()))?,
    })
}

/// Attention mass inside the mask.
pub fn aas(map: &LatentMap, mask: &LatentMask) -> Result<f64> {
    if map.values.shape() != mask.m.shape() {
        return Err(LabError::shape(format!(
            "map {:?} vs mask {:?}",
            map.values.shape(),
            mask.m.shape()
        )));
    }
    Ok(map
        .values
        .iter()
        .zip(mask.m.iter())
        .filter(|(_, &m)| m == 1)
        .map(|(v, _)| v)
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AasRow {
    pub clip_id: String,
    pub layer: usize,
    pub step: usize,
    pub variant: Variant,
    pub role: Role,
    pub aas: f64,
}

/// Long-format AAS records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AasTable {
    pub rows: Vec<AasRow>,
}

impl AasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: AasRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: AasTable) {
        self.rows.extend(other.rows);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clips(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.clip_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Per clip and layer: mean over steps and the variant's roles.
    pub fn per_video(&self, variant: Variant) -> BTreeMap<String, BTreeMap<usize, f64>> {
        let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.variant == variant) {
            let e = acc
                .entry(r.clip_id.clone())
                .or_default()
                .entry(r.layer)
                .or_insert((0.0, 0));
            e.0 += r.aas;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(clip, layers)| {
                let means = layers
                    .into_iter()
                    .map(|(l, (s, n))| (l, s / n as f64))
                    .collect();
                (clip, means)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec.map_err(|e| csv_err(path, e))?);
        }
        Ok(Self { rows })
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> LabError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => LabError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        LabError::data(format!("{}: {e}", path.display()))
    }
}

/// SVG heatmap: one panel per latent frame, optional mask outline.
pub fn heatmap_svg(map: &LatentMap, mask: Option<&LatentMask>, title: &str) -> String {
    let (f, h, w) = map.values.dim();
    let cell = 12.0;
    let gap = 8.0;
    let top = 20.0;
    let width = f as f64 * (w as f64 * cell + gap) + gap;
    let height = top + h as f64 * cell + gap;
    let peak = map.values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n\
         <text x=\"{gap}\" y=\"14\" font-size=\"11\" font-family=\"monospace\">{}</text>\n",
        escape(title)
    );
    for fi in 0..f {
        let x0 = gap + fi as f64 * (w as f64 * cell + gap);
        for y in 0..h {
            for x in 0..w {
                let v = (map.values[[fi, y, x]] / peak).clamp(0.0, 1.0);
                let r = (255.0 * v).round() as u8;
                let b = (255.0 * (1.0 - v)).round() as u8;
                let stroke = match mask {
                    Some(m) if m.m[[fi, y, x]] == 1 => " stroke=\"#fff\" stroke-width=\"1\"",
                    _ => "",
                };
                out.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},0,{b})\"{stroke}/>\n",
                    x0 + x as f64 * cell,
                    top + y as f64 * cell
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SequenceLayout;
    use crate::test_support::random_record;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> SequenceLayout {
        SequenceLayout {
            frames: 2,
            height: 2,
            width: 2,
            text_len: 4,
        }
    }

    #[test]
    fn single_token_single_head_is_the_column() {
        let rec = random_record(layout(), 1, 1);
        let g = grounding_map(&rec, &TokenSetSpec::new(Role::Sub, vec![2])).unwrap();
        for i in 0..8 {
            let (f, h, w) = (i / 4, (i / 2) % 2, i % 2);
            assert_eq!(g.values[[f, h, w]], rec.head_maps[[0, i, 8 + 2]]);
        }
    }

    #[test]
    fn duplicate_columns_average_to_themselves() {
        let mut rec = random_record(layout(), 2, 2);
        for h in 0..2 {
            for r in 0..12 {
                rec.head_maps[[h, r, 9]] = rec.head_maps[[h, r, 8]];
            }
        }
        let a = grounding_map(&rec, &TokenSetSpec::new(Role::Sub, vec![0])).unwrap();
        let b = grounding_map(&rec, &TokenSetSpec::new(Role::Sub, vec![0, 1])).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn grounding_matches_loop_oracle() {
        let rec = random_record(layout(), 3, 3);
        let tokens = vec![0, 2, 3];
        let g = grounding_map(&rec, &TokenSetSpec::new(Role::Verb, tokens.clone())).unwrap();
        let mean = grounding_map_with(
            &rec,
            &TokenSetSpec::new(Role::Verb, tokens.clone()),
            HeadAggregation::Mean,
        )
        .unwrap();
        for q in 0..8 {
            let mut oracle = 0.0;
            for &t in &tokens {
                for h in 0..3 {
                    oracle += rec.head_maps[[h, q, 8 + t]];
                }
            }
            oracle /= 3.0;
            let (f, y, x) = (q / 4, (q / 2) % 2, q % 2);
            assert!((g.values[[f, y, x]] - oracle).abs() < 1e-12);
            assert!((mean.values[[f, y, x]] - oracle / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_or_out_of_range_token_sets_fail() {
        let rec = random_record(layout(), 1, 4);
        assert!(matches!(
            grounding_map(&rec, &TokenSetSpec::new(Role::Sub, vec![])),
            Err(LabError::Empty(_))
        ));
        assert!(grounding_map(&rec, &TokenSetSpec::new(Role::Sub, vec![4])).is_err());
    }

    fn mask(v: Vec<u8>) -> LatentMask {
        LatentMask::new(Array3::from_shape_vec((2, 2, 2), v).unwrap()).unwrap()
    }

    #[test]
    fn aas_examples() {
        let uniform = LatentMap {
            values: Array3::from_elem((2, 2, 2), 1.0 / 8.0),
        };
        assert!((aas(&uniform, &mask(vec![1, 1, 0, 0, 0, 0, 0, 0])).unwrap() - 0.25).abs() < 1e-15);
        let mut peak = Array3::zeros((2, 2, 2));
        peak[[1, 0, 1]] = 1.0;
        let m = mask(vec![0, 0, 0, 0, 0, 1, 0, 0]);
        assert_eq!(aas(&LatentMap { values: peak }, &m).unwrap(), 1.0);
        let wrong = LatentMask::new(Array3::zeros((1, 2, 2))).unwrap();
        assert!(aas(&uniform, &wrong).is_err());
    }

    #[test]
    fn aas_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(0.0..1.0));
        let m: Vec<u8> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let mut oracle = 0.0;
        for (i, v) in values.iter().enumerate() {
            oracle += v * m[i] as f64;
        }
        let got = aas(&LatentMap { values }, &mask(m)).unwrap();
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aas.csv");
        let mut t = AasTable::new();
        t.push(AasRow {
            clip_id: "a".into(),
            layer: 3,
            step: 10,
            variant: Variant::VerbV2v,
            role: Role::Verb,
            aas: 0.125,
        });
        t.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("clip_id,layer,step,variant,role,aas\n"));
        assert!(text.contains("a,3,10,verb-v2v,verb,0.125"));
        assert_eq!(AasTable::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn per_video_averages_roles_and_steps() {
        let mut t = AasTable::new();
        for (step, role, v) in [
            (0, Role::Sub, 0.1),
            (1, Role::Sub, 0.3),
            (0, Role::Obj, 0.5),
        ] {
            t.push(AasRow {
                clip_id: "c".into(),
                layer: 1,
                step,
                variant: Variant::NounV2t,
                role,
                aas: v,
            });
        }
        let pv = t.per_video(Variant::NounV2t);
        assert!((pv["c"][&1] - 0.3).abs() < 1e-15);
        assert!(t.per_video(Variant::VerbV2t).is_empty());
    }

    #[test]
    fn svg_has_one_rect_per_cell() {
        let map = LatentMap {
            values: Array3::from_elem((2, 2, 3), 0.5),
        };
        let svg = heatmap_svg(&map, None, "a<b");
        assert_eq!(svg.matches("<rect").count(), 12);
        assert!(svg.contains("a&lt;b"));
    }

    proptest! {
        #[test]
        fn aas_monotone_and_additive(vals in proptest::collection::vec(0.0f64..1.0, 8),
                                     a in proptest::collection::vec(0u8..2, 8),
                                     b in proptest::collection::vec(0u8..2, 8)) {
            let map = LatentMap { values: Array3::from_shape_vec((2, 2, 2), vals).unwrap() };
            let union: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x | y).collect();
            let only_b: Vec<u8> = a.iter().zip(&b).map(|(x, y)| (1 - x) & y).collect();
            let s_a = aas(&map, &mask(a.clone())).unwrap();
            let s_u = aas(&map, &mask(union)).unwrap();
            let s_b = aas(&map, &mask(b)).unwrap();
            let s_rest = aas(&map, &mask(only_b)).unwrap();
            prop_assert!(s_a <= s_u + 1e-12);
            prop_assert!(s_u + 1e-12 >= s_a.max(s_b));
            prop_assert!((s_a + s_rest - s_u).abs() < 1e-12);
        }

        #[test]
        fn token_permutation_invariance(seed in 0u64..200, perm in Just(vec![3usize, 0, 2]).prop_shuffle()) {
            let rec = random_record(layout(), 2, seed);
            let a = grounding_map(&rec, &TokenSetSpec::new(Role::Obj, vec![0, 2, 3])).unwrap();
            let b = grounding_map(&rec, &TokenSetSpec::new(Role::Obj, perm)).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
