use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mat, Var};

/// Named parameter matrices in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mat: Mat) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.mats.len());
        self.names.push(name);
        self.mats.push(mat);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.mats[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.mats[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.mats)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.mats.iter().map(Mat::len).sum()
    }

    /// Appends all parameters of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, mat) in other.iter() {
            self.insert(format!("{prefix}{name}"), mat.clone());
        }
    }

    /// Binds every parameter as a graph leaf. `trainable` decides which
    /// leaves record gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .iter()
            .map(|(name, mat)| g.leaf(mat.clone(), trainable(name)))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph leaves for a [`ParamStore`], looked up by name.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"));
        self.vars[*i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded Gaussian initializer; draws happen in call order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("finite std");
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| dist.sample(&mut self.rng))
                .collect(),
        )
    }

    /// Fan-in scaled weight `[fan_in, fan_out]` with an extra gain.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Mat {
        self.normal(fan_in, fan_out, gain / (fan_in as f64).sqrt())
    }
}
