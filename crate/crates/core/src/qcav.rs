//! Quantized concept activation vectors.
//!
//! One `(q+, q-)` pair of `d`-vectors per concept. The pairs never receive
//! gradients: they move only through [`Codebook::ema_update`] (or by loading
//! a checkpoint).

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{derive_rng, Scalar, Tensor};

pub const DEFAULT_DECAY: f64 = 0.95;

/// Ground-truth routing for a subset of concepts: `true` selects `q+`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Overrides(pub BTreeMap<usize, u8>);

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, concept: usize, present: bool) {
        self.0.insert(concept, present as u8);
    }

    pub fn get(&self, concept: usize) -> Option<bool> {
        self.0.get(&concept).map(|&v| v == 1)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks keys against `num_concepts` and values against `{0, 1}`.
    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        for (&k, &v) in &self.0 {
            ensure!(k < num_concepts, "override key {k} out of range for {num_concepts} concepts");
            ensure!(v <= 1, "override value for concept {k} must be 0 or 1, got {v}");
        }
        Ok(())
    }

    /// Parses a JSON object of the form `{"3": 1, "5": 0}`.
    ///
    /// Errors name the offending key.
    pub fn from_json(value: &serde_json::Value, num_concepts: usize) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::contract("overrides must be a JSON object"))?;
        let mut out = Overrides::new();
        for (key, v) in obj {
            let k: usize = key
                .parse()
                .map_err(|_| Error::contract(format!("override key `{key}` is not a concept index")))?;
            ensure!(k < num_concepts, "override key `{key}` out of range for {num_concepts} concepts");
            match v.as_u64() {
                Some(b @ (0 | 1)) => out.insert(k, b == 1),
                _ => {
                    return Err(Error::contract(format!(
                        "override `{key}` must be 0 or 1, got {v}"
                    )))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    /// `[K, 2, d]`: `[k][0] = q+`, `[k][1] = q-`.
    vectors: Tensor<S>,
    decay: f64,
    steps: u64,
}

impl<S: Scalar> Codebook<S> {
    /// Uniform `[-1/sqrt(d), 1/sqrt(d)]` entries.
    pub fn init(num_concepts: usize, dim: usize, seed: u64) -> Result<Self> {
        ensure!(num_concepts >= 1, "codebook needs at least one concept");
        ensure!(dim >= 1, "codebook vectors need at least one dimension");
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = derive_rng(seed, "codebook/init");
        let data = (0..num_concepts * 2 * dim)
            .map(|_| S::cast(rng.random_range(-bound..=bound)))
            .collect();
        Ok(Self {
            vectors: Tensor::new(vec![num_concepts, 2, dim], data)?,
            decay: DEFAULT_DECAY,
            steps: 0,
        })
    }

    pub fn from_parts(vectors: Tensor<S>, decay: f64, steps: u64) -> Result<Self> {
        ensure!(vectors.rank() == 3 && vectors.shape()[1] == 2, "codebook must be [K, 2, d], got {:?}", vectors.shape());
        ensure!(vectors.all_finite(), "codebook entries must be finite");
        ensure!((0.0..=1.0).contains(&decay), "decay must lie in [0, 1]");
        Ok(Self { vectors, decay, steps })
    }

    pub fn with_decay(mut self, decay: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&decay), "decay must lie in [0, 1], got {decay}");
        self.decay = decay;
        Ok(self)
    }

    pub fn num_concepts(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[2]
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn vectors(&self) -> &Tensor<S> {
        &self.vectors
    }

    fn slot(&self, k: usize, member: usize) -> &[S] {
        let d = self.dim();
        let at = (k * 2 + member) * d;
        &self.vectors.data()[at..at + d]
    }

    pub fn positive(&self, k: usize) -> &[S] {
        self.slot(k, 0)
    }

    pub fn negative(&self, k: usize) -> &[S] {
        self.slot(k, 1)
    }

    pub fn pair(&self, k: usize) -> (&[S], &[S]) {
        (self.positive(k), self.negative(k))
    }

    /// Moves `q+` toward the mean of the rows labelled 1 and `q-` toward the
    /// mean of the rows labelled 0; a member with no rows is left untouched.
    /// One step per call.
    pub fn ema_update(&mut self, k: usize, batch_v: &[&[S]], labels: &[u8]) -> Result<()> {
        ensure!(k < self.num_concepts(), "concept {k} out of range");
        ensure!(!batch_v.is_empty(), "ema_update needs a non-empty batch");
        ensure!(
            batch_v.len() == labels.len(),
            "{} vectors but {} labels",
            batch_v.len(),
            labels.len()
        );
        let d = self.dim();
        ensure!(batch_v.iter().all(|v| v.len() == d), "batch vectors must have length {d}");
        ensure!(labels.iter().all(|&l| l <= 1), "labels must be 0 or 1");

        for (member, label) in [(0usize, 1u8), (1, 0)] {
            let rows: Vec<&[S]> = batch_v
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == label)
                .map(|(v, _)| *v)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let at = (k * 2 + member) * d;
            let slot = &mut self.vectors.data_mut()[at..at + d];
            for (j, q) in slot.iter_mut().enumerate() {
                let mean = rows.iter().map(|r| r[j].f64()).sum::<f64>() / n;
                *q = S::cast(self.decay * q.f64() + (1.0 - self.decay) * mean);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Hard routing: `q+` where the score is at least 0.5 (or the override
    /// says present), otherwise `q-`. Returns `[K, d]`.
    pub fn select(&self, scores: &[S], overrides: &Overrides) -> Result<Tensor<S>> {
        self.check_scores(scores, overrides)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(scores.len() * d);
        for (k, &c) in scores.iter().enumerate() {
            let present = overrides.get(k).unwrap_or(c.f64() >= 0.5);
            data.extend_from_slice(if present { self.positive(k) } else { self.negative(k) });
        }
        Tensor::matrix(scores.len(), d, data)
    }

    /// Soft routing `c q+ + (1 - c) q-`; overridden concepts use `c` in {0, 1}.
    pub fn select_soft(&self, scores: &[S], overrides: &Overrides) -> Result<Tensor<S>> {
        self.check_scores(scores, overrides)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(scores.len() * d);
        for (k, &c) in scores.iter().enumerate() {
            let c = overrides.get(k).map_or(c.f64(), |p| p as u8 as f64);
            let (p, n) = self.pair(k);
            data.extend(p.iter().zip(n).map(|(a, b)| S::cast(c * a.f64() + (1.0 - c) * b.f64())));
        }
        Tensor::matrix(scores.len(), d, data)
    }

    fn check_scores(&self, scores: &[S], overrides: &Overrides) -> Result<()> {
        ensure!(
            scores.len() == self.num_concepts(),
            "{} scores for {} concepts",
            scores.len(),
            self.num_concepts()
        );
        ensure!(
            scores.iter().all(|c| (0.0..=1.0).contains(&c.f64())),
            "concept scores must lie in [0, 1]"
        );
        overrides.validate(self.num_concepts())
    }

    pub fn cast<T: Scalar>(&self) -> Codebook<T> {
        Codebook {
            vectors: self.vectors.cast(),
            decay: self.decay,
            steps: self.steps,
        }
    }
}
