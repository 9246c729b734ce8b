//! Losses, the per-batch training step, optimizers and the epoch loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::concept_encoder::{ScorerKind, SgldConfig, SgldVariant};
use crate::datagen::SyntheticDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::Binder;
use crate::numerics::{derive_rng_indexed, gaussian_sample, logsumexp_f64, Graph, Rng, Scalar, Tensor, Var};
use crate::pipeline::{argmax, Model, ModelConfig, Selection};
use crate::qcav::{Codebook, Overrides};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub concept_dim: usize,
    pub latent_dim: usize,
    pub backbone_hidden: usize,
    pub energy_hidden: usize,
    pub sgld_steps: usize,
    pub gamma: f64,
    pub sgld_noise: bool,
    pub lambda_concept: f64,
    pub lambda_task: f64,
    pub lambda_energy: f64,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub ablate_ema: bool,
    pub ablate_energy: bool,
    pub ablate_variational: bool,
    pub literal_energy_loss_sign: bool,
    pub literal_sgld_sign: bool,
    pub soft_selection: bool,
    pub conditional_sgld: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            concept_dim: 16,
            latent_dim: 32,
            backbone_hidden: 64,
            energy_hidden: 32,
            sgld_steps: 20,
            gamma: 0.4,
            sgld_noise: true,
            lambda_concept: 5.0,
            lambda_task: 1.0,
            lambda_energy: 0.05,
            learning_rate: 0.005,
            ema_decay: 0.95,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            ablate_ema: false,
            ablate_energy: false,
            ablate_variational: false,
            literal_energy_loss_sign: false,
            literal_sgld_sign: false,
            soft_selection: false,
            conditional_sgld: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_concept", self.lambda_concept),
            ("lambda_task", self.lambda_task),
            ("lambda_energy", self.lambda_energy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{key}"), format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", format!("must lie in [0, 1], got {}", self.ema_decay)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", format!("must be >= 0, got {}", self.learning_rate)));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("concept_dim", self.concept_dim),
            ("latent_dim", self.latent_dim),
            ("backbone_hidden", self.backbone_hidden),
            ("energy_hidden", self.energy_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{key}"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn energy_mode(&self) -> EnergyLossMode {
        if self.literal_energy_loss_sign {
            EnergyLossMode::Literal
        } else {
            EnergyLossMode::Contrastive
        }
    }

    pub fn sgld(&self) -> SgldConfig {
        SgldConfig {
            steps: self.sgld_steps,
            step_size: self.gamma,
            variant: if self.literal_sgld_sign {
                SgldVariant::Literal
            } else {
                SgldVariant::DescendEnergy
            },
            noise: self.sgld_noise,
        }
    }

    /// `lambda_energy`, forced to zero when the energy path is ablated.
    pub fn effective_lambda_energy(&self) -> f64 {
        if self.ablate_energy {
            0.0
        } else {
            self.lambda_energy
        }
    }

    pub fn model_config(&self, input_dim: usize, num_concepts: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            num_concepts,
            num_classes,
            concept_dim: self.concept_dim,
            latent_dim: self.latent_dim,
            backbone_hidden: self.backbone_hidden,
            energy_hidden: self.energy_hidden,
            selection: if self.soft_selection { Selection::Soft } else { Selection::Hard },
            scorer: if self.ablate_energy { ScorerKind::Direct } else { ScorerKind::Energy },
            decay: self.ema_decay,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyLossMode {
    /// `mean_k(e - e' + (e + e')^2)`: lowers data energy, raises negative energy.
    Contrastive,
    /// `mean_k(e' - e + (e' + e)^2)`.
    Literal,
}

impl EnergyLossMode {
    fn sign(self) -> f64 {
        match self {
            EnergyLossMode::Contrastive => 1.0,
            EnergyLossMode::Literal => -1.0,
        }
    }
}

/// Energy loss over `K` concepts from data energies `e_bar` and negative
/// energies `e_bar_neg`.
pub fn energy_loss(e_bar: &[f64], e_bar_neg: &[f64], mode: EnergyLossMode) -> Result<f64> {
    ensure!(
        e_bar.len() == e_bar_neg.len(),
        "{} data energies but {} negative energies",
        e_bar.len(),
        e_bar_neg.len()
    );
    ensure!(!e_bar.is_empty(), "energy loss of zero concepts");
    let s = mode.sign();
    let sum: f64 = e_bar
        .iter()
        .zip(e_bar_neg)
        .map(|(e, n)| s * (e - n) + (e + n).powi(2))
        .sum();
    Ok(sum / e_bar.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub concept: f64,
    pub task: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            concept: 5.0,
            task: 1.0,
            energy: 0.05,
        }
    }
}

/// `w_c BCE(scores, C*) + w_y CE(logits, y*) + w_e L_e`.
///
/// `scores` and `c_star` are row-major `[B, K]`; `class_logits` is `[B, M]`.
/// BCE is averaged over batch and concepts, CE over the batch.
pub fn total_loss(
    scores: &[f64],
    c_star: &[u8],
    class_logits: &[f64],
    y_star: &[usize],
    energy: f64,
    w: LossWeights,
) -> Result<f64> {
    let b = y_star.len();
    ensure!(b > 0, "total loss of an empty batch");
    ensure!(scores.len() == c_star.len(), "{} scores but {} concept labels", scores.len(), c_star.len());
    ensure!(class_logits.len().is_multiple_of(b), "class logits do not split into {b} rows");
    let m = class_logits.len() / b;
    let bce: f64 = scores
        .iter()
        .zip(c_star)
        .map(|(&s, &c)| if c == 1 { -s.ln() } else { -(1.0 - s).ln() })
        .sum::<f64>()
        / scores.len() as f64;
    let ce: f64 = class_logits
        .chunks(m)
        .zip(y_star)
        .map(|(row, &y)| logsumexp_f64(row.iter().copied()) - row[y])
        .sum::<f64>()
        / b as f64;
    Ok(w.concept * bce + w.task * ce + w.energy * energy)
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub x: Tensor<S>,
    /// Row-major `[B, K]`.
    pub c_star: Vec<u8>,
    pub y_star: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn from_rows(ds: &SyntheticDataset, rows: &[usize]) -> Result<Self> {
        let x = ds.x.gather_rows(rows)?.cast();
        let c_star = rows.iter().flat_map(|&i| ds.concepts(i).iter().copied()).collect();
        let y_star = rows.iter().map(|&i| ds.label(i)).collect();
        Ok(Self { x, c_star, y_star })
    }

    pub fn len(&self) -> usize {
        self.y_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_star.is_empty()
    }

    fn labels(&self, k: usize, num_concepts: usize) -> Vec<u8> {
        self.c_star.chunks(num_concepts).map(|r| r[k]).collect()
    }
}

/// The random inputs of one step: encoder noise and finished SGLD chains,
/// one entry per concept. `None` means "not used" (posterior mean, or no
/// energy path).
#[derive(Clone, Debug)]
pub struct StepNoise<S> {
    pub eps: Vec<Option<Tensor<S>>>,
    pub negatives: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> StepNoise<S> {
    /// Draws encoder noise and runs the SGLD chains against the current
    /// parameters and codebook.
    pub fn sample(model: &Model<S>, batch: &Batch<S>, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let (b, k, d) = (batch.len(), model.num_concepts(), model.concept_dim());
        let sgld = cfg.sgld();
        let mut eps = Vec::with_capacity(k);
        let mut negatives = Vec::with_capacity(k);
        for kk in 0..k {
            eps.push(if cfg.ablate_variational {
                None
            } else {
                Some(gaussian_sample(&[b, d], 0.0, 1.0, rng)?)
            });
            negatives.push(if cfg.ablate_energy {
                None
            } else {
                let v0 = gaussian_sample(&[b, d], 0.0, 1.0, rng)?;
                let labels = cfg.conditional_sgld.then(|| batch.labels(kk, k));
                let (qp, qm) = model.codebook().pair(kk);
                Some(model.head(kk).sgld(model.params(), &v0, qp, qm, &sgld, labels.as_deref(), rng)?)
            });
        }
        Ok(Self { eps, negatives })
    }
}

/// Scalar summaries of one step, summed over the batch where noted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total_loss: f64,
    pub concept_loss: f64,
    pub task_loss: f64,
    pub energy_loss: f64,
    pub mean_data_energy: f64,
    pub mean_negative_energy: f64,
    pub concept_correct: usize,
    pub task_correct: usize,
    pub samples: usize,
}

struct ConceptPart {
    bce: Var,
    energy: Option<Var>,
    scores: Vec<Var>,
    encodings: Vec<Var>,
    data_energy: f64,
    negative_energy: f64,
}

fn concept_part<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    p: &mut Binder<'_, S>,
    batch: &Batch<S>,
    noise: &StepNoise<S>,
    mode: EnergyLossMode,
) -> Result<ConceptPart> {
    let (b, k) = (batch.len(), model.num_concepts());
    ensure!(batch.c_star.len() == b * k, "concept labels must be [B, {k}]");
    ensure!(noise.eps.len() == k && noise.negatives.len() == k, "step noise must cover {k} concepts");
    let xv = g.constant(batch.x.clone());
    let z = model.backbone_var(g, p, xv)?;
    let mut bce_terms = Vec::with_capacity(k);
    let mut energy_terms = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut encodings = Vec::with_capacity(k);
    let (mut data_energy, mut negative_energy) = (0.0, 0.0);
    for kk in 0..k {
        let head = model.head(kk);
        let (qp, qm) = model.codebook().pair(kk);
        let enc = head.encode_var(g, p, z, noise.eps[kk].clone())?;
        let e = head.logits_var(g, p, enc.v, qp, qm)?;
        let lse = g.logsumexp_rows(e)?;

        // BCE on softmax(e)[+] written as LSE(e) - e[c*]
        let labels = batch.labels(kk, k);
        let onehot: Vec<S> = labels
            .iter()
            .flat_map(|&c| if c == 1 { [S::one(), S::zero()] } else { [S::zero(), S::one()] })
            .collect();
        let onehot = g.constant(Tensor::matrix(b, 2, onehot)?);
        let picked = g.mul(e, onehot)?;
        let picked = g.sum(picked)?;
        let total_lse = g.sum(lse)?;
        bce_terms.push(g.sub(total_lse, picked)?);

        let probs = g.softmax_rows(e)?;
        scores.push(g.column(probs, 0)?);
        encodings.push(enc.v);
        data_energy -= g.value(lse).sum_f64() / b as f64;

        if let Some(neg) = &noise.negatives[kk] {
            // the contrastive terms train the energy head only
            let vd = g.constant(g.value(enc.v).clone());
            let ed = head.logits_var(g, p, vd, qp, qm)?;
            let lse = g.logsumexp_rows(ed)?;
            let vn = g.constant(neg.clone());
            let en = head.logits_var(g, p, vn, qp, qm)?;
            let lse_n = g.logsumexp_rows(en)?;
            negative_energy -= g.value(lse_n).sum_f64() / b as f64;
            // e_bar = -lse, so (e_bar - e_bar') = lse' - lse and (e_bar + e_bar')^2 = (lse + lse')^2
            let diff = g.sub(lse_n, lse)?;
            let diff = g.scale(diff, mode.sign())?;
            let both = g.add(lse, lse_n)?;
            let sq = g.square(both)?;
            let per_sample = g.add(diff, sq)?;
            energy_terms.push(g.mean(per_sample)?);
        }
    }
    let bce = sum_vars(g, &bce_terms)?;
    let bce = g.scale(bce, 1.0 / (b * k) as f64)?;
    let energy = if energy_terms.is_empty() {
        None
    } else {
        let s = sum_vars(g, &energy_terms)?;
        Some(g.scale(s, 1.0 / energy_terms.len() as f64)?)
    };
    Ok(ConceptPart {
        bce,
        energy,
        scores,
        encodings,
        data_energy: data_energy / k as f64,
        negative_energy: negative_energy / k as f64,
    })
}

fn sum_vars<S: Scalar>(g: &mut Graph<S>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// `[B, K d]` selected rows for the task head.
fn selection_var<S: Scalar>(
    g: &mut Graph<S>,
    codebook: &Codebook<S>,
    selection: Selection,
    scores: &[Var],
    b: usize,
) -> Result<Var> {
    let k = scores.len();
    let d = codebook.dim();
    match selection {
        Selection::Hard => {
            let none = Overrides::new();
            let mut rows = Vec::with_capacity(b * k * d);
            for i in 0..b {
                let s: Vec<S> = scores.iter().map(|&v| g.value(v).data()[i]).collect();
                rows.extend(codebook.select(&s, &none)?.into_data());
            }
            Ok(g.constant(Tensor::matrix(b, k * d, rows)?))
        }
        Selection::Soft => {
            let mut parts = Vec::with_capacity(k);
            for (kk, &s) in scores.iter().enumerate() {
                let (qp, qm) = codebook.pair(kk);
                let diff: Vec<S> = qp.iter().zip(qm).map(|(a, b)| *a - *b).collect();
                let diff = g.constant(Tensor::matrix(1, d, diff)?);
                let col = g.reshape(s, &[b, 1])?;
                let spread = g.matmul(col, diff)?;
                let base = g.constant(Tensor::vector(qm.to_vec()));
                parts.push(g.add_row(spread, base)?);
            }
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = g.concat_cols(acc, p)?;
            }
            Ok(acc)
        }
    }
}

fn task_part<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    p: &mut Binder<'_, S>,
    codebook: &Codebook<S>,
    scores: &[Var],
    y_star: &[usize],
) -> Result<(Var, Var)> {
    let b = y_star.len();
    let sel = selection_var(g, codebook, model.config().selection, scores, b)?;
    let logits = model.task_var(g, p, sel)?;
    let m = model.num_classes();
    ensure!(y_star.iter().all(|&y| y < m), "class labels must be below {m}");
    let onehot: Vec<S> = y_star
        .iter()
        .flat_map(|&y| (0..m).map(move |j| if j == y { S::one() } else { S::zero() }))
        .collect();
    let onehot = g.constant(Tensor::matrix(b, m, onehot)?);
    let lse = g.logsumexp_rows(logits)?;
    let lse = g.sum(lse)?;
    let picked = g.mul(logits, onehot)?;
    let picked = g.sum(picked)?;
    let ce = g.sub(lse, picked)?;
    Ok((g.scale(ce, 1.0 / b as f64)?, logits))
}

fn weighted_total<S: Scalar>(
    g: &mut Graph<S>,
    w: LossWeights,
    bce: Var,
    ce: Var,
    energy: Option<Var>,
) -> Result<Var> {
    let a = g.scale(bce, w.concept)?;
    let c = g.scale(ce, w.task)?;
    let mut total = g.add(a, c)?;
    if let Some(e) = energy {
        let e = g.scale(e, w.energy)?;
        total = g.add(total, e)?;
    }
    Ok(total)
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

fn weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights {
        concept: cfg.lambda_concept,
        task: cfg.lambda_task,
        energy: cfg.effective_lambda_energy(),
    }
}

/// Total loss and its gradient for every parameter, with the codebook held
/// fixed (no EMA step). Gradients are indexed like the parameter store.
pub fn loss_and_grads<S: Scalar>(
    model: &Model<S>,
    batch: &Batch<S>,
    noise: &StepNoise<S>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let mut p = Binder::trainable(model.params());
    let part = concept_part(model, &mut g, &mut p, batch, noise, cfg.energy_mode())?;
    let (ce, _) = task_part(model, &mut g, &mut p, model.codebook(), &part.scores, &batch.y_star)?;
    let total = weighted_total(&mut g, weights(cfg), part.bce, ce, part.energy)?;
    let grads = g.backward(total)?;
    let mut out: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for (id, var) in p.bound() {
        out[id.index()] = grads.get_f64(var);
    }
    Ok((g.value(total).item()?.f64(), out))
}

/// Gradient-based optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new<S: Scalar>(kind: OptimizerKind, lr: f64, model: &Model<S>) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads[i]` is `None` for parameters that did not
    /// take part in the loss.
    pub fn apply<S: Scalar>(&mut self, model: &mut Model<S>, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - Self::BETA1.powi(t), 1.0 - Self::BETA2.powi(t));
        for (i, param) in model.params_mut().tensors_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let data = param.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g) {
                        *x = S::cast(x.f64() - self.lr * gi);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                        v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                        let step = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                        data[j] = S::cast(data[j].f64() - step);
                    }
                }
            }
        }
    }
}

/// One training step: encode, score, sample negatives, EMA-update the
/// codebook, select, predict, and take a gradient step.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    optimizer: &mut Optimizer,
    batch: &Batch<S>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepStats> {
    ensure!(!batch.is_empty(), "empty batch");
    let noise = StepNoise::sample(model, batch, cfg, rng)?;
    let (b, k) = (batch.len(), model.num_concepts());
    let mut codebook = model.codebook().clone();

    let mut g = Graph::new();
    let mut p = Binder::trainable(model.params());
    let part = concept_part(model, &mut g, &mut p, batch, &noise, cfg.energy_mode())?;

    if !cfg.ablate_ema {
        for kk in 0..k {
            let v = g.value(part.encodings[kk]);
            let rows: Vec<&[S]> = (0..b).map(|i| v.row(i)).collect();
            codebook.ema_update(kk, &rows, &batch.labels(kk, k))?;
        }
    }

    let (ce, logits) = task_part(model, &mut g, &mut p, &codebook, &part.scores, &batch.y_star)?;
    let w = weights(cfg);
    let total = weighted_total(&mut g, w, part.bce, ce, part.energy)?;

    let bce_v = finite("concept", g.value(part.bce).item()?.f64())?;
    let ce_v = finite("task", g.value(ce).item()?.f64())?;
    let energy_v = match part.energy {
        Some(e) => finite("energy", g.value(e).item()?.f64())?,
        None => 0.0,
    };
    let total_v = finite("total", g.value(total).item()?.f64())?;

    let mut concept_correct = 0;
    for (kk, &s) in part.scores.iter().enumerate() {
        for (i, c) in g.value(s).data().iter().enumerate() {
            concept_correct += ((c.f64() > 0.5) == (batch.c_star[i * k + kk] == 1)) as usize;
        }
    }
    let lv = g.value(logits);
    let task_correct = (0..b).filter(|&i| argmax(lv.row(i)) == batch.y_star[i]).count();

    let grads = g.backward(total)?;
    let mut flat: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for (id, var) in p.bound() {
        flat[id.index()] = Some(grads.get_f64(var));
    }
    drop(p);
    optimizer.apply(model, &flat);
    *model.codebook_mut() = codebook;

    Ok(StepStats {
        total_loss: total_v,
        concept_loss: bce_v,
        task_loss: ce_v,
        energy_loss: energy_v,
        mean_data_energy: part.data_energy,
        mean_negative_energy: part.negative_energy,
        concept_correct,
        task_correct,
        samples: b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub concept_loss: f64,
    pub task_loss: f64,
    pub energy_loss: f64,
    pub mean_data_energy: f64,
    pub mean_negative_energy: f64,
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_lines()?.as_bytes())?;
        Ok(())
    }
}

/// Trains a fresh model on `train`.
pub fn fit<S: Scalar>(train: &SyntheticDataset, cfg: &TrainConfig) -> Result<(Model<S>, TrainHistory)> {
    fit_with(train, cfg, |_| {})
}

/// Like [`fit`], calling `on_epoch` after each epoch.
pub fn fit_with<S: Scalar>(
    train: &SyntheticDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<S>, TrainHistory)> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "cannot train on an empty dataset");
    let mut model = Model::<S>::new(cfg.model_config(train.input_dim(), train.num_concepts, train.num_classes))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut history = TrainHistory::default();
    let k = train.num_concepts as f64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng_indexed(cfg.seed, "train/shuffle", epoch as u64));
        let mut rng = derive_rng_indexed(cfg.seed, "train/noise", epoch as u64);
        let mut acc = StepStats::default();
        for rows in order.chunks(cfg.batch_size) {
            let batch = Batch::from_rows(train, rows)?;
            let s = train_step(&mut model, &mut opt, &batch, cfg, &mut rng)?;
            let n = s.samples as f64;
            acc.total_loss += s.total_loss * n;
            acc.concept_loss += s.concept_loss * n;
            acc.task_loss += s.task_loss * n;
            acc.energy_loss += s.energy_loss * n;
            acc.mean_data_energy += s.mean_data_energy * n;
            acc.mean_negative_energy += s.mean_negative_energy * n;
            acc.concept_correct += s.concept_correct;
            acc.task_correct += s.task_correct;
            acc.samples += s.samples;
        }
        let n = acc.samples as f64;
        let record = EpochRecord {
            epoch,
            total_loss: acc.total_loss / n,
            concept_loss: acc.concept_loss / n,
            task_loss: acc.task_loss / n,
            energy_loss: acc.energy_loss / n,
            mean_data_energy: acc.mean_data_energy / n,
            mean_negative_energy: acc.mean_negative_energy / n,
            concept_accuracy: acc.concept_correct as f64 / (n * k),
            task_accuracy: acc.task_correct as f64 / n,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetConfig};
    use crate::nn::ParamId;
    use crate::numerics::{derive_rng, sigmoid};

    #[test]
    fn energy_loss_examples() {
        for mode in [EnergyLossMode::Contrastive, EnergyLossMode::Literal] {
            assert_eq!(energy_loss(&[0.0, 0.0], &[0.0, 0.0], mode).unwrap(), 0.0);
        }
        assert_eq!(energy_loss(&[-1.0], &[1.0], EnergyLossMode::Contrastive).unwrap(), -2.0);
        let (e, n) = ([0.3, -1.2, 2.0], [0.7, 0.1, -0.4]);
        let sum = energy_loss(&e, &n, EnergyLossMode::Contrastive).unwrap()
            + energy_loss(&e, &n, EnergyLossMode::Literal).unwrap();
        let sq: f64 = e.iter().zip(&n).map(|(a, b)| (a + b).powi(2)).sum::<f64>() / 3.0;
        assert!((sum - 2.0 * sq).abs() < 1e-12);
        assert!(energy_loss(&[0.0], &[], EnergyLossMode::Literal).is_err());
    }

    #[test]
    fn total_loss_limits() {
        let zero = LossWeights { concept: 0.0, task: 0.0, energy: 0.0 };
        assert_eq!(total_loss(&[0.3], &[1], &[1.0, 0.0], &[0], 4.0, zero).unwrap(), 0.0);
        let w = LossWeights::default();
        let near_perfect = total_loss(&[1.0 - 1e-12], &[1], &[60.0, 0.0], &[0], 2.0, w).unwrap();
        assert!((near_perfect - w.energy * 2.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation_names_keys() {
        let err = TrainConfig { gamma: -1.0, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("train.gamma"), "{err}");
        let err = TrainConfig { lambda_task: -0.1, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("train.lambda_task"), "{err}");
    }

    fn tiny() -> (SyntheticDataset, TrainConfig) {
        let data = generate(&DatasetConfig {
            train_size: 48,
            test_size: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 1,
            sgld_steps: 3,
            ..Default::default()
        };
        (data.train, cfg)
    }

    #[test]
    fn step_changes_params_and_respects_ema_ablation() {
        let (ds, cfg) = tiny();
        let batch = Batch::<f32>::from_rows(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
        let mut model = Model::<f32>::new(cfg.model_config(32, 8, 10)).unwrap();
        let before = model.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
        train_step(&mut model, &mut opt, &batch, &cfg, &mut derive_rng(0, "t")).unwrap();
        assert_ne!(model.params(), before.params());
        assert_ne!(model.codebook(), before.codebook());
        assert_eq!(model.codebook().steps(), 8);

        let ablated = TrainConfig { ablate_ema: true, ..cfg.clone() };
        let mut model = before.clone();
        train_step(&mut model, &mut opt, &batch, &ablated, &mut derive_rng(0, "t")).unwrap();
        assert_eq!(model.codebook(), before.codebook());
    }

    #[test]
    fn all_positive_concept_leaves_negative_member() {
        let (ds, cfg) = tiny();
        let mut batch = Batch::<f32>::from_rows(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
        for i in 0..16 {
            batch.c_star[i * 8 + 2] = 1;
        }
        let mut model = Model::<f32>::new(cfg.model_config(32, 8, 10)).unwrap();
        let before = model.codebook().negative(2).to_vec();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
        train_step(&mut model, &mut opt, &batch, &cfg, &mut derive_rng(0, "t")).unwrap();
        assert_eq!(model.codebook().negative(2), before.as_slice());
    }

    #[test]
    fn fit_is_deterministic() {
        let (ds, cfg) = tiny();
        let (m1, h1) = fit::<f32>(&ds, &cfg).unwrap();
        let (m2, h2) = fit::<f32>(&ds, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.epochs.len(), 1);
        assert_eq!(h1.to_json_lines().unwrap().lines().count(), 1);
    }

    #[test]
    fn graph_loss_matches_value_oracle() {
        let (ds, cfg) = tiny();
        let batch = Batch::<f64>::from_rows(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
        let model = Model::<f64>::new(cfg.model_config(32, 8, 10)).unwrap();
        let noise = StepNoise::sample(&model, &batch, &cfg, &mut derive_rng(1, "n")).unwrap();
        let (loss, _) = loss_and_grads(&model, &batch, &noise, &cfg).unwrap();

        // recompute every term from model outputs with plain f64 arithmetic
        let k = 8;
        let mut g = Graph::new();
        let mut p = Binder::frozen(model.params());
        let xv = g.constant(batch.x.clone());
        let z = model.backbone_var(&mut g, &mut p, xv).unwrap();
        let mut scores = vec![0.0; 16 * k];
        let (mut e_bar, mut e_neg) = (vec![0.0; k], vec![0.0; k]);
        let mut le_terms = vec![0.0; k];
        for kk in 0..k {
            let h = model.head(kk);
            let (qp, qm) = model.codebook().pair(kk);
            let enc = h.encode_var(&mut g, &mut p, z, noise.eps[kk].clone()).unwrap();
            let e = h.logits_var(&mut g, &mut p, enc.v, qp, qm).unwrap();
            let vn = g.constant(noise.negatives[kk].clone().unwrap());
            let en = h.logits_var(&mut g, &mut p, vn, qp, qm).unwrap();
            let (e, en) = (g.value(e).data().to_vec(), g.value(en).data().to_vec());
            let mut per = Vec::new();
            for i in 0..16 {
                scores[i * k + kk] = sigmoid(e[2 * i] - e[2 * i + 1]);
                let a = -logsumexp_f64([e[2 * i], e[2 * i + 1]].into_iter());
                let b = -logsumexp_f64([en[2 * i], en[2 * i + 1]].into_iter());
                per.push(energy_loss(&[a], &[b], EnergyLossMode::Contrastive).unwrap());
                e_bar[kk] += a / 16.0;
                e_neg[kk] += b / 16.0;
            }
            le_terms[kk] = per.iter().sum::<f64>() / 16.0;
        }
        let le = le_terms.iter().sum::<f64>() / k as f64;
        let mut logits = Vec::new();
        for i in 0..16 {
            let s = &scores[i * k..(i + 1) * k];
            let sel = model.selected(s, &Overrides::new()).unwrap();
            logits.extend(model.class_logits(Tensor::matrix(1, sel.len(), sel).unwrap()).unwrap().into_data());
        }
        let want = total_loss(&scores, &batch.c_star, &logits, &batch.y_star, le, LossWeights::default()).unwrap();
        assert!((loss - want).abs() < 1e-9 * want.abs().max(1.0), "{loss} vs {want}");
    }

    /// Worst relative error between `loss_and_grads` and central differences
    /// over the given `(parameter, element)` picks.
    fn fd_worst(model: &Model<f64>, batch: &Batch<f64>, noise: &StepNoise<f64>, cfg: &TrainConfig, picks: &[(ParamId, usize)]) -> f64 {
        let (_, grads) = loss_and_grads(model, batch, noise, cfg).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for &(id, i) in picks {
            let mut probe = model.clone();
            probe.params_mut().get_mut(id).data_mut()[i] += h;
            let up = loss_and_grads(&probe, batch, noise, cfg).unwrap().0;
            probe.params_mut().get_mut(id).data_mut()[i] -= 2.0 * h;
            let down = loss_and_grads(&probe, batch, noise, cfg).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let a = grads[id.index()][i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        worst
    }

    fn random_picks(model: &Model<f64>, filter: impl Fn(&str) -> bool, seed: u64) -> Vec<(ParamId, usize)> {
        use rand::Rng as _;
        let ids: Vec<ParamId> = model.params().ids().filter(|&id| filter(model.params().name(id))).collect();
        let mut rng = derive_rng(seed, "picks");
        (0..16)
            .map(|_| {
                let id = ids[rng.random_range(0..ids.len())];
                (id, rng.random_range(0..model.params().get(id).len()))
            })
            .collect()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (ds, cfg) = tiny();
        let batch = Batch::<f64>::from_rows(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
        let model = Model::<f64>::new(cfg.model_config(32, 8, 10)).unwrap();
        let noise = StepNoise::sample(&model, &batch, &cfg, &mut derive_rng(2, "n")).unwrap();

        // the contrastive terms see detached encodings, so the full objective
        // is only a true gradient for the energy head; everything else is
        // checked with those terms switched off
        let no_energy = TrainConfig { lambda_energy: 0.0, ..cfg.clone() };
        let worst = fd_worst(&model, &batch, &noise, &no_energy, &random_picks(&model, |_| true, 3));
        assert!(worst < 1e-3, "all parameters: {worst:.2e}");
        let worst = fd_worst(&model, &batch, &noise, &cfg, &random_picks(&model, |n| n.contains(".energy."), 4));
        assert!(worst < 1e-3, "energy head: {worst:.2e}");
    }

    #[test]
    fn codebook_receives_no_gradient() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig { ema_decay: 1.0, ..cfg };
        let batch = Batch::<f32>::from_rows(&ds, &(0..16).collect::<Vec<_>>()).unwrap();
        let mut model = Model::<f32>::new(cfg.model_config(32, 8, 10)).unwrap();
        let before = model.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
        for step in 0..3 {
            train_step(&mut model, &mut opt, &batch, &cfg, &mut derive_rng(step, "t")).unwrap();
        }
        assert_ne!(model.params(), before.params());
        assert_eq!(model.codebook().vectors(), before.codebook().vectors());
    }

    #[test]
    fn energy_loss_pushes_data_energy_down() {
        let h = 1e-6;
        for (e, n) in [(0.0, 0.0), (-0.2, 0.1), (1.5, -2.0)] {
            let ns = [n, -0.4];
            let up = energy_loss(&[e + h, 0.4], &ns, EnergyLossMode::Contrastive).unwrap();
            let down = energy_loss(&[e - h, 0.4], &ns, EnergyLossMode::Contrastive).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - (1.0 + 2.0 * (e + n)) / 2.0).abs() < 1e-6, "{fd}");
        }
        // with small (e + e') the data term dominates with slope +1/K
        let slope = (energy_loss(&[1e-4], &[0.0], EnergyLossMode::Contrastive).unwrap()
            - energy_loss(&[-1e-4], &[0.0], EnergyLossMode::Contrastive).unwrap())
            / 2e-4;
        assert!((slope - 1.0).abs() < 1e-6);
    }
}
