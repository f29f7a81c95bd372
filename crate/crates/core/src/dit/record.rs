//! Captured attention maps and their four-block partition.

use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::config::SequenceLayout;
use crate::error::{LabError, Result};

/// Post-softmax attention of one layer, `[n_heads, S, S]`, video keys first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub layout: SequenceLayout,
    pub head_maps: Array3<f64>,
}

/// The four attention blocks, each `[n_heads, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlocks {
    pub v2v: Array3<f64>,
    pub v2t: Array3<f64>,
    pub t2v: Array3<f64>,
    pub t2t: Array3<f64>,
}

impl AttentionRecord {
    pub fn new(layer: usize, layout: SequenceLayout, head_maps: Array3<f64>) -> Result<Self> {
        let s = layout.seq_len();
        let shape = head_maps.shape();
        if shape[1] != s || shape[2] != s {
            return Err(LabError::shape(format!(
                "attention map {:?} does not match sequence length {s}",
                shape
            )));
        }
        Ok(Self {
            layer,
            layout,
            head_maps,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.head_maps.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.layout.seq_len()
    }

    /// Splits into v2v / v2t / t2v / t2t.
    pub fn partition(&self) -> AttentionBlocks {
        let nv = self.layout.n_video();
        let m = &self.head_maps;
        AttentionBlocks {
            v2v: m.slice(s![.., ..nv, ..nv]).to_owned(),
            v2t: m.slice(s![.., ..nv, nv..]).to_owned(),
            t2v: m.slice(s![.., nv.., ..nv]).to_owned(),
            t2t: m.slice(s![.., nv.., nv..]).to_owned(),
        }
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for h in 0..self.n_heads() {
            for r in 0..self.seq_len() {
                let sum: f64 = self.head_maps.slice(s![h, r, ..]).iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    /// Little-endian f32 dump plus a JSON sidecar (`<stem>.bin`, `<stem>.json`).
    pub fn write_dump(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.head_maps.len() * 4);
        for &v in self.head_maps.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, bytes).map_err(|e| LabError::io(&bin, e))?;
        let meta = DumpSidecar {
            layer: self.layer,
            heads: self.n_heads(),
            shape: self.head_maps.shape().to_vec(),
            block_boundaries: self.layout.block_boundaries().to_vec(),
            layout: self.layout,
            dtype: "f32le".to_string(),
        };
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(&meta)?).map_err(|e| LabError::io(&json, e))?;
        Ok(())
    }

    pub fn read_dump(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let meta: DumpSidecar =
            serde_json::from_slice(&fs::read(&json).map_err(|e| LabError::io(&json, e))?)?;
        if meta.dtype != "f32le" {
            return Err(LabError::data(format!(
                "unsupported dump dtype {}",
                meta.dtype
            )));
        }
        let bin = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bin).map_err(|e| LabError::io(&bin, e))?;
        let expected: usize = meta.shape.iter().product();
        if meta.shape.len() != 3 || bytes.len() != expected * 4 {
            return Err(LabError::data(format!(
                "dump {} holds {} bytes, sidecar shape {:?}",
                bin.display(),
                bytes.len(),
                meta.shape
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let maps = Array3::from_shape_vec((meta.shape[0], meta.shape[1], meta.shape[2]), values)
            .map_err(|e| LabError::shape(e.to_string()))?;
        Self::new(meta.layer, meta.layout, maps)
    }
}

impl AttentionBlocks {
    /// Inverse of [`AttentionRecord::partition`].
    pub fn reassemble(&self) -> Array3<f64> {
        let heads = self.v2v.shape()[0];
        let nv = self.v2v.shape()[1];
        let nt = self.t2t.shape()[1];
        let mut out = Array3::zeros((heads, nv + nt, nv + nt));
        out.slice_mut(s![.., ..nv, ..nv]).assign(&self.v2v);
        out.slice_mut(s![.., ..nv, nv..]).assign(&self.v2t);
        out.slice_mut(s![.., nv.., ..nv]).assign(&self.t2v);
        out.slice_mut(s![.., nv.., nv..]).assign(&self.t2t);
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpSidecar {
    layer: usize,
    heads: usize,
    shape: Vec<usize>,
    block_boundaries: Vec<usize>,
    layout: SequenceLayout,
    dtype: String,
}
