//! End-to-end model: backbone, concept heads, codebook selection, task head.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::concept_encoder::{ConceptHead, EnergyLogits, EpsMode, ScorerKind};
use crate::container::{BlobReader, BlobWriter};
use crate::error::{ensure, Error, Result};
use crate::nn::{Affine, Binder, ParamStore};
use crate::numerics::{derive_rng, derive_seed, gaussian_sample, Graph, Rng, Scalar, Tensor, Var};
use crate::qcav::{Codebook, Overrides, DEFAULT_DECAY};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQCBMCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CODEBOOK_ARRAY: &str = "codebook.vectors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub concept_dim: usize,
    pub latent_dim: usize,
    pub backbone_hidden: usize,
    pub energy_hidden: usize,
    pub selection: Selection,
    pub scorer: ScorerKind,
    pub decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            num_concepts: 8,
            num_classes: 10,
            concept_dim: 16,
            latent_dim: 32,
            backbone_hidden: 64,
            energy_hidden: 32,
            selection: Selection::Hard,
            scorer: ScorerKind::Energy,
            decay: DEFAULT_DECAY,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("num_concepts", self.num_concepts),
            ("num_classes", self.num_classes),
            ("concept_dim", self.concept_dim),
            ("latent_dim", self.latent_dim),
            ("backbone_hidden", self.backbone_hidden),
            ("energy_hidden", self.energy_hidden),
        ] {
            ensure!(v >= 1, "model {name} must be at least 1");
        }
        ensure!((0.0..=1.0).contains(&self.decay), "decay must lie in [0, 1], got {}", self.decay);
        Ok(())
    }
}

/// Everything the model reports for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord<S> {
    pub concept_scores: Vec<S>,
    /// `[e+, e-]` per concept.
    pub energy_logits: Vec<[S; 2]>,
    pub composed_energies: Vec<S>,
    pub uncertainties: Vec<S>,
    pub class_logits: Vec<S>,
    pub predicted_class: usize,
    pub overrides_applied: Overrides,
}

/// Per-sample concept-side outputs, before selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptStage<S> {
    /// One `[B, d]` tensor of encodings per concept.
    pub encodings: Vec<Tensor<S>>,
    /// `[B][K]` logits.
    pub logits: Vec<Vec<EnergyLogits<S>>>,
}

impl<S: Scalar> ConceptStage<S> {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn scores(&self, i: usize) -> Vec<S> {
        self.logits[i].iter().map(EnergyLogits::concept_score).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub module: String,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub modules: Vec<ModuleCount>,
    pub total: usize,
    pub mean_latency_us: f64,
    pub latency_runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    backbone: [Affine; 3],
    heads: Vec<ConceptHead>,
    task: Affine,
    codebook: Codebook<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model; all initialization streams derive from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = derive_rng(c.seed, "init/params");
        let mut params = ParamStore::default();
        let backbone = [
            Affine::init(&mut params, "backbone.0", c.input_dim, c.backbone_hidden, &mut rng),
            Affine::init(&mut params, "backbone.1", c.backbone_hidden, c.backbone_hidden, &mut rng),
            Affine::init(&mut params, "backbone.2", c.backbone_hidden, c.latent_dim, &mut rng),
        ];
        let heads = (0..c.num_concepts)
            .map(|k| {
                ConceptHead::init(
                    &mut params,
                    &format!("concept.{k}"),
                    c.latent_dim,
                    c.concept_dim,
                    c.energy_hidden,
                    c.scorer,
                    &mut rng,
                )
            })
            .collect();
        let task = Affine::init(&mut params, "task", c.num_concepts * c.concept_dim, c.num_classes, &mut rng);
        let codebook = Codebook::init(c.num_concepts, c.concept_dim, derive_seed(c.seed, "init/codebook"))?
            .with_decay(c.decay)?;
        Ok(Self {
            config,
            params,
            backbone,
            heads,
            task,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn heads(&self) -> &[ConceptHead] {
        &self.heads
    }

    pub fn head(&self, k: usize) -> &ConceptHead {
        &self.heads[k]
    }

    pub fn task_head(&self) -> &Affine {
        &self.task
    }

    pub fn codebook(&self) -> &Codebook<S> {
        &self.codebook
    }

    pub(crate) fn codebook_mut(&mut self) -> &mut Codebook<S> {
        &mut self.codebook
    }

    pub fn num_concepts(&self) -> usize {
        self.config.num_concepts
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn concept_dim(&self) -> usize {
        self.config.concept_dim
    }

    pub fn backbone_var(&self, g: &mut Graph<S>, p: &mut Binder<'_, S>, x: Var) -> Result<Var> {
        let h = self.backbone[0].apply(g, p, x)?;
        let h = g.silu(h)?;
        let h = self.backbone[1].apply(g, p, h)?;
        let h = g.silu(h)?;
        self.backbone[2].apply(g, p, h)
    }

    fn check_inputs(&self, x: &Tensor<S>) -> Result<usize> {
        let (b, d) = x.dims2()?;
        ensure!(
            d == self.config.input_dim,
            "inputs have {d} features, model expects {}",
            self.config.input_dim
        );
        ensure!(x.all_finite(), "inputs must be finite");
        Ok(b)
    }

    /// Backbone and concept heads for a batch `[B, D]`.
    ///
    /// With `rng`, each concept draws one `[B, d]` noise tensor; `None` uses the
    /// posterior mean.
    pub fn concept_stage(&self, x: &Tensor<S>, rng: Option<&mut Rng>) -> Result<ConceptStage<S>> {
        let b = self.check_inputs(x)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let xv = g.constant(x.clone());
        let z = self.backbone_var(&mut g, &mut p, xv)?;
        let mut rng = rng;
        let mut encodings = Vec::with_capacity(self.heads.len());
        let mut logits = vec![Vec::with_capacity(self.heads.len()); b];
        for (k, head) in self.heads.iter().enumerate() {
            let eps = match rng.as_deref_mut() {
                Some(r) => Some(gaussian_sample(&[b, self.config.concept_dim], 0.0, 1.0, r)?),
                None => None,
            };
            let enc = head.encode_var(&mut g, &mut p, z, eps)?;
            let (qp, qm) = self.codebook.pair(k);
            let e = head.logits_var(&mut g, &mut p, enc.v, qp, qm)?;
            for (i, pair) in g.value(e).data().chunks(2).enumerate() {
                logits[i].push(EnergyLogits::new(pair[0], pair[1]));
            }
            encodings.push(g.value(enc.v).clone());
        }
        Ok(ConceptStage { encodings, logits })
    }

    /// Selected codebook rows for one sample, flattened to `K d`.
    pub fn selected(&self, scores: &[S], overrides: &Overrides) -> Result<Vec<S>> {
        let sel = match self.config.selection {
            Selection::Hard => self.codebook.select(scores, overrides)?,
            Selection::Soft => self.codebook.select_soft(scores, overrides)?,
        };
        Ok(sel.into_data())
    }

    pub fn task_var(&self, g: &mut Graph<S>, p: &mut Binder<'_, S>, selected: Var) -> Result<Var> {
        self.task.apply(g, p, selected)
    }

    /// Task-head logits for `[B, K d]` selected rows.
    pub fn class_logits(&self, selected: Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let s = g.constant(selected);
        let out = self.task_var(&mut g, &mut p, s)?;
        Ok(g.value(out).clone())
    }

    /// Finishes sample `i` of a concept stage under `overrides`.
    pub fn finish(&self, stage: &ConceptStage<S>, i: usize, overrides: &Overrides) -> Result<PredictionRecord<S>> {
        let scores = stage.scores(i);
        let selected = self.selected(&scores, overrides)?;
        let logits = self.class_logits(Tensor::matrix(1, selected.len(), selected)?)?;
        Ok(self.record(&stage.logits[i], scores, logits.into_data(), overrides))
    }

    fn record(&self, logits: &[EnergyLogits<S>], scores: Vec<S>, class_logits: Vec<S>, overrides: &Overrides) -> PredictionRecord<S> {
        PredictionRecord {
            concept_scores: scores,
            energy_logits: logits.iter().map(|e| [e.plus, e.minus]).collect(),
            composed_energies: logits.iter().map(EnergyLogits::composed_energy).collect(),
            uncertainties: logits.iter().map(EnergyLogits::uncertainty).collect(),
            predicted_class: argmax(&class_logits),
            class_logits,
            overrides_applied: overrides.clone(),
        }
    }

    /// Posterior-mean predictions for a batch `[B, D]`.
    pub fn predict_batch(&self, x: &Tensor<S>) -> Result<Vec<PredictionRecord<S>>> {
        let stage = self.concept_stage(x, None)?;
        let none = Overrides::new();
        let mut selected = Vec::with_capacity(stage.len() * self.num_concepts() * self.concept_dim());
        for i in 0..stage.len() {
            selected.extend(self.selected(&stage.scores(i), &none)?);
        }
        let width = self.num_concepts() * self.concept_dim();
        let logits = self.class_logits(Tensor::matrix(stage.len(), width, selected)?)?;
        Ok((0..stage.len())
            .map(|i| self.record(&stage.logits[i], stage.scores(i), logits.row(i).to_vec(), &none))
            .collect())
    }

    pub fn predict(&self, x: &[S]) -> Result<PredictionRecord<S>> {
        self.intervene_predict(x, &Overrides::new())
    }

    pub fn intervene_predict(&self, x: &[S], overrides: &Overrides) -> Result<PredictionRecord<S>> {
        overrides.validate(self.num_concepts())?;
        let stage = self.concept_stage(&Tensor::matrix(1, x.len(), x.to_vec())?, None)?;
        self.finish(&stage, 0, overrides)
    }

    /// Prediction with the energy logits averaged over `samples` encodings
    /// drawn with sampled noise.
    pub fn predict_sampled(&self, x: &[S], samples: usize, rng: &mut Rng) -> Result<PredictionRecord<S>> {
        ensure!(samples >= 1, "need at least one sample");
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        let k = self.num_concepts();
        let mut acc = vec![[0.0f64; 2]; k];
        for _ in 0..samples {
            let stage = self.concept_stage(&xt, Some(&mut *rng))?;
            for (a, e) in acc.iter_mut().zip(&stage.logits[0]) {
                a[0] += e.plus.f64();
                a[1] += e.minus.f64();
            }
        }
        let n = samples as f64;
        let logits: Vec<EnergyLogits<S>> = acc
            .iter()
            .map(|a| EnergyLogits::new(S::cast(a[0] / n), S::cast(a[1] / n)))
            .collect();
        let stage = ConceptStage {
            encodings: Vec::new(),
            logits: vec![logits],
        };
        self.finish(&stage, 0, &Overrides::new())
    }

    /// Concept encoding `v_k` of a single input.
    pub fn encode(&self, x: &[S], k: usize, eps_mode: EpsMode<'_>) -> Result<Vec<S>> {
        ensure!(k < self.num_concepts(), "concept {k} out of range");
        let z = self.latent(x)?;
        self.heads[k].encode(&self.params, &z, eps_mode)
    }

    pub fn latent(&self, x: &[S]) -> Result<Vec<S>> {
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        self.check_inputs(&xt)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.params);
        let xv = g.constant(xt);
        let z = self.backbone_var(&mut g, &mut p, xv)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn parameter_counts(&self) -> Vec<ModuleCount> {
        let count = |module: &str, parameters: usize| ModuleCount {
            module: module.to_string(),
            parameters,
        };
        vec![
            count("backbone", self.backbone.iter().map(Affine::param_count).sum()),
            count("concept_encoders", self.heads.iter().map(ConceptHead::param_count).sum()),
            count("task_head", self.task.param_count()),
            count("codebook", self.codebook.vectors().len()),
        ]
    }

    pub fn parameter_total(&self) -> usize {
        self.parameter_counts().iter().map(|m| m.parameters).sum()
    }

    /// Parameter counts plus mean single-sample latency of `predict`.
    pub fn model_info(&self, runs: usize) -> Result<ModelInfo> {
        let x = vec![S::zero(); self.config.input_dim];
        let start = Instant::now();
        for _ in 0..runs {
            std::hint::black_box(self.predict(&x)?);
        }
        let mean_latency_us = if runs == 0 {
            0.0
        } else {
            start.elapsed().as_secs_f64() * 1e6 / runs as f64
        };
        Ok(ModelInfo {
            modules: self.parameter_counts(),
            total: self.parameter_total(),
            mean_latency_us,
            latency_runs: runs,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone,
            heads: self.heads.clone(),
            task: self.task,
            codebook: self.codebook.cast(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BlobWriter::default();
        for (name, t) in self.params.iter() {
            w.push_f32(name, t.shape(), t.data().iter().map(|x| x.f64() as f32));
        }
        let cb = self.codebook.vectors();
        w.push_f32(CODEBOOK_ARRAY, cb.shape(), cb.data().iter().map(|x| x.f64() as f32));
        let mut m = Map::new();
        m.insert("format_version".into(), CHECKPOINT_FORMAT_VERSION.into());
        m.insert("kind".into(), "checkpoint".into());
        m.insert("config".into(), serde_json::to_value(&self.config)?);
        m.insert(
            "codebook".into(),
            serde_json::json!({"decay": self.codebook.decay(), "steps": self.codebook.steps()}),
        );
        m.insert(
            "rng".into(),
            serde_json::json!({"algorithm": "chacha8", "root_seed": self.config.seed}),
        );
        w.write(path, CHECKPOINT_MAGIC, m)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let r = BlobReader::open(path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let config: ModelConfig = r.field("config")?;
        Self::from_reader(&r, config)
    }

    /// Loads a checkpoint and checks it against an expected architecture.
    pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let r = BlobReader::open(path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let found: ModelConfig = r.field("config")?;
        let template = Model::<S>::new(ModelConfig {
            seed: found.seed,
            ..expected.clone()
        })?;
        let shape = r.shape(CODEBOOK_ARRAY)?;
        if shape != template.codebook.vectors().shape() {
            return Err(Error::Shape {
                name: CODEBOOK_ARRAY.into(),
                expected: template.codebook.vectors().shape().to_vec(),
                found: shape,
            });
        }
        for (name, t) in template.params.iter() {
            let shape = r.shape(name)?;
            if shape != t.shape() {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: shape,
                });
            }
        }
        ensure!(
            found.selection == expected.selection && found.scorer == expected.scorer,
            "checkpoint uses {:?} selection with a {:?} scorer, expected {:?}/{:?}",
            found.selection,
            found.scorer,
            expected.selection,
            expected.scorer
        );
        Self::from_reader(&r, found)
    }

    fn from_reader(r: &BlobReader, config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let (shape, data) = r.f32(&name)?;
            let expected = model.params.get(id).shape().to_vec();
            if shape != expected {
                return Err(Error::Shape {
                    name,
                    expected,
                    found: shape,
                });
            }
            model.params.set(id, Tensor::new(shape, data.iter().map(|&x| S::cast(x as f64)).collect())?)?;
        }
        let (shape, data) = r.f32(CODEBOOK_ARRAY)?;
        let expected = model.codebook.vectors().shape().to_vec();
        if shape != expected {
            return Err(Error::Shape {
                name: CODEBOOK_ARRAY.into(),
                expected,
                found: shape,
            });
        }
        #[derive(Deserialize)]
        struct CodebookMeta {
            decay: f64,
            steps: u64,
        }
        let meta: CodebookMeta = r.field("codebook")?;
        let vectors = Tensor::new(shape, data.iter().map(|&x| S::cast(x as f64)).collect())?;
        model.codebook = Codebook::from_parts(vectors, meta.decay, meta.steps)?;
        Ok(model)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            num_concepts: 3,
            num_classes: 4,
            concept_dim: 4,
            latent_dim: 5,
            backbone_hidden: 7,
            energy_hidden: 3,
            seed: 11,
            ..Default::default()
        }
    }

    fn x() -> Vec<f32> {
        vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.3]
    }

    #[test]
    fn record_shapes_and_determinism() {
        let m = Model::<f32>::new(small()).unwrap();
        let r = m.predict(&x()).unwrap();
        assert_eq!(r.concept_scores.len(), 3);
        assert_eq!(r.uncertainties.len(), 3);
        assert_eq!(r.class_logits.len(), 4);
        assert_eq!(r, m.predict(&x()).unwrap());
        for (u, e) in r.uncertainties.iter().zip(&r.energy_logits) {
            assert_eq!(*u, EnergyLogits::new(e[0], e[1]).uncertainty());
        }
        assert!(m.predict(&[0.0; 5]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let m = Model::<f32>::new(small()).unwrap();
        let a = x();
        let b: Vec<f32> = a.iter().map(|v| v * -0.5).collect();
        let mut rows = a.clone();
        rows.extend(&b);
        let batch = m.predict_batch(&Tensor::matrix(2, 6, rows).unwrap()).unwrap();
        assert_eq!(batch[0], m.predict(&a).unwrap());
        assert_eq!(batch[1], m.predict(&b).unwrap());
    }

    #[test]
    fn empty_overrides_match_predict_and_overrides_are_local() {
        let m = Model::<f32>::new(small()).unwrap();
        let plain = m.predict(&x()).unwrap();
        assert_eq!(plain, m.intervene_predict(&x(), &Overrides::new()).unwrap());

        let stage = m.concept_stage(&Tensor::matrix(1, 6, x()).unwrap(), None).unwrap();
        let scores = stage.scores(0);
        let mut ov = Overrides::new();
        ov.insert(1, scores[1] < 0.5);
        let before = m.selected(&scores, &Overrides::new()).unwrap();
        let after = m.selected(&scores, &ov).unwrap();
        for k in [0, 2] {
            assert_eq!(before[k * 4..(k + 1) * 4], after[k * 4..(k + 1) * 4]);
        }
        assert_ne!(before[4..8], after[4..8]);
        let r = m.intervene_predict(&x(), &ov).unwrap();
        assert_eq!(r.concept_scores, plain.concept_scores);
        assert_eq!(r.overrides_applied, ov);
    }

    #[test]
    fn counts_follow_closed_form() {
        let c = small();
        let m = Model::<f32>::new(c.clone()).unwrap();
        let per_head = 2 * (c.latent_dim * c.concept_dim + c.concept_dim)
            + (2 * c.concept_dim * c.energy_hidden + c.energy_hidden)
            + (c.energy_hidden + 1);
        let counts = m.parameter_counts();
        assert_eq!(counts[1].parameters, c.num_concepts * per_head);
        assert_eq!(m.parameter_total(), counts.iter().map(|c| c.parameters).sum::<usize>());
        assert_eq!(m.params().numel() + m.codebook().vectors().len(), m.parameter_total());
        let doubled = Model::<f32>::new(ModelConfig { num_concepts: 6, ..c.clone() }).unwrap();
        assert_eq!(doubled.parameter_counts()[1].parameters, 2 * counts[1].parameters);
        let info = m.model_info(3).unwrap();
        assert_eq!(info.total, m.parameter_total());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32]), 0);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::<f32>::new(small()).unwrap();
        m.save_checkpoint(&path).unwrap();
        let back = Model::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x()).unwrap(), m.predict(&x()).unwrap());

        let err = Model::<f32>::load_checkpoint_expecting(&path, &ModelConfig { num_concepts: 2, ..small() })
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
        assert!(Model::<f32>::load_checkpoint_expecting(&path, &small()).is_ok());
    }

    #[test]
    fn tampered_checksum_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        Model::<f32>::new(small()).unwrap().save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"\"checksum\":\"";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
        bytes[at] = if bytes[at] == b'0' { b'1' } else { b'0' };
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Model::<f32>::load_checkpoint(&path).unwrap_err(), Error::Checksum { .. }));
    }
}
