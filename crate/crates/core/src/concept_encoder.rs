//! Per-concept variational encoding and energy scoring.
//!
//! A [`ConceptHead`] maps the backbone latent `z` to `v = mu + exp(logvar/2) * eps`
//! and scores `v` against a codebook pair with a small energy network. The
//! two logits `(e+, e-)` come from one set of weights applied to
//! `concat(v, q+)` and `concat(v, q-)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Affine, Binder, ParamId, ParamStore};
use crate::numerics::{logsumexp_f64, matmul_forward, sigmoid, Graph, Rng, Scalar, Tensor, Var};

/// Norm past which an SGLD chain counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Energy,
    /// Sigmoid head on `v` alone; logits are reported as `(s, 0)`.
    Direct,
}

pub enum EpsMode<'a> {
    Zero,
    Sample(&'a mut Rng),
}

/// The energy network's two logits for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLogits<S> {
    pub plus: S,
    pub minus: S,
}

impl<S: Scalar> EnergyLogits<S> {
    pub fn new(plus: S, minus: S) -> Self {
        Self { plus, minus }
    }

    /// `softmax(e)[+]`.
    pub fn concept_score(&self) -> S {
        S::cast(sigmoid(self.plus.f64() - self.minus.f64()))
    }

    /// `-LSE(e)`.
    pub fn composed_energy(&self) -> S {
        S::cast(-logsumexp_f64([self.plus.f64(), self.minus.f64()].into_iter()))
    }

    /// `1 / (exp(LSE(e) - mean(e)) - 1)`, which for two logits equals
    /// `1 / (2 cosh(delta/2) - 1)`.
    pub fn uncertainty(&self) -> S {
        let u = uncertainty_f64(self.plus.f64(), self.minus.f64());
        S::cast(u).max(S::min_positive_value())
    }
}

pub(crate) fn uncertainty_f64(plus: f64, minus: f64) -> f64 {
    let t = (-0.5 * (plus - minus).abs()).exp();
    t / (1.0 + t * t - t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyHead {
    pub weight_v: ParamId,
    pub weight_q: ParamId,
    pub hidden_bias: ParamId,
    pub out: Affine,
    pub dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scorer {
    Energy(EnergyHead),
    Direct(Affine),
}

/// Graph nodes produced by [`ConceptHead::encode_var`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mean: Var,
    pub log_var: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConceptHead {
    pub mean: Affine,
    pub log_var: Affine,
    pub scorer: Scorer,
    pub dim: usize,
}

impl ConceptHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        latent_dim: usize,
        dim: usize,
        hidden: usize,
        kind: ScorerKind,
        rng: &mut Rng,
    ) -> Self {
        let mean = Affine::init(store, &format!("{name}.mean"), latent_dim, dim, rng);
        let log_var = Affine::init(store, &format!("{name}.log_var"), latent_dim, dim, rng);
        let scorer = match kind {
            ScorerKind::Energy => {
                // one 2d -> hidden layer, stored as its v and q halves
                let first = Affine::init(store, &format!("{name}.energy.hidden"), 2 * dim, hidden, rng);
                let w = store.get(first.weight).clone().into_data();
                let (wv, wq) = w.split_at(dim * hidden);
                let wv = Tensor::new(vec![dim, hidden], wv.to_vec()).expect("sized");
                let wq = Tensor::new(vec![dim, hidden], wq.to_vec()).expect("sized");
                *store.get_mut(first.weight) = wv;
                let weight_q = store.add(format!("{name}.energy.hidden.weight_q"), wq);
                let out = Affine::init(store, &format!("{name}.energy.out"), hidden, 1, rng);
                Scorer::Energy(EnergyHead {
                    weight_v: first.weight,
                    weight_q,
                    hidden_bias: first.bias,
                    out,
                    dim,
                    hidden,
                })
            }
            ScorerKind::Direct => Scorer::Direct(Affine::init(store, &format!("{name}.direct"), dim, 1, rng)),
        };
        Self {
            mean,
            log_var,
            scorer,
            dim,
        }
    }

    pub fn kind(&self) -> ScorerKind {
        match self.scorer {
            Scorer::Energy(_) => ScorerKind::Energy,
            Scorer::Direct(_) => ScorerKind::Direct,
        }
    }

    pub fn param_count(&self) -> usize {
        let scorer = match self.scorer {
            Scorer::Energy(h) => 2 * h.dim * h.hidden + h.hidden + h.out.param_count(),
            Scorer::Direct(a) => a.param_count(),
        };
        self.mean.param_count() + self.log_var.param_count() + scorer
    }

    /// `z: [B, latent] -> v: [B, d]`; `eps` of `None` means `v = mu`.
    pub fn encode_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Binder<'_, S>,
        z: Var,
        eps: Option<Tensor<S>>,
    ) -> Result<Encoded> {
        let mean = self.mean.apply(g, p, z)?;
        // log-variance is bounded above by 0 (sigma <= 1) via -softplus(-raw)
        let raw = self.log_var.apply(g, p, z)?;
        let flipped = g.neg(raw)?;
        let bounded = g.softplus(flipped)?;
        let log_var = g.neg(bounded)?;
        let v = match eps {
            None => mean,
            Some(eps) => {
                ensure!(
                    eps.shape() == g.shape(mean),
                    "noise shape {:?} does not match encoding shape {:?}",
                    eps.shape(),
                    g.shape(mean)
                );
                let half = g.scale(log_var, 0.5)?;
                let std = g.exp(half)?;
                let eps = g.constant(eps);
                let spread = g.mul(std, eps)?;
                g.add(mean, spread)?
            }
        };
        Ok(Encoded { mean, log_var, v })
    }

    /// `v: [B, d] -> [B, 2]` logits `(e+, e-)`.
    pub fn logits_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &mut Binder<'_, S>,
        v: Var,
        q_plus: &[S],
        q_minus: &[S],
    ) -> Result<Var> {
        let (b, d) = match g.shape(v) {
            &[b, d] => (b, d),
            other => return Err(Error::contract(format!("encodings must be [B, d], got {other:?}"))),
        };
        ensure!(d == self.dim, "encoding width {d} does not match concept dim {}", self.dim);
        ensure!(
            q_plus.len() == d && q_minus.len() == d,
            "codebook vectors have length {}/{}, expected {d}",
            q_plus.len(),
            q_minus.len()
        );
        match self.scorer {
            Scorer::Energy(h) => {
                let wv = p.var(g, h.weight_v);
                let wq = p.var(g, h.weight_q);
                let b1 = p.var(g, h.hidden_bias);
                let hv = g.matmul(v, wv)?;
                let mut member = |g: &mut Graph<S>, q: &[S]| -> Result<Var> {
                    let q = g.constant(Tensor::new(vec![1, d], q.to_vec())?);
                    let hq = g.matmul(q, wq)?;
                    let hq = g.reshape(hq, &[h.hidden])?;
                    let bias = g.add(hq, b1)?;
                    let pre = g.add_row(hv, bias)?;
                    let act = g.silu(pre)?;
                    h.out.apply(g, p, act)
                };
                let plus = member(g, q_plus)?;
                let minus = member(g, q_minus)?;
                g.concat_cols(plus, minus)
            }
            Scorer::Direct(a) => {
                let s = a.apply(g, p, v)?;
                let zero = g.constant(Tensor::zeros(&[b, 1]));
                g.concat_cols(s, zero)
            }
        }
    }

    /// Single-sample encoding of `z`.
    pub fn encode<S: Scalar>(&self, store: &ParamStore<S>, z: &[S], eps_mode: EpsMode<'_>) -> Result<Vec<S>> {
        let eps = match eps_mode {
            EpsMode::Zero => None,
            EpsMode::Sample(rng) => Some(Tensor::new(
                vec![1, self.dim],
                (0..self.dim).map(|_| S::cast(StandardNormal.sample(rng))).collect(),
            )?),
        };
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let z = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let enc = self.encode_var(&mut g, &mut p, z, eps)?;
        Ok(g.value(enc.v).data().to_vec())
    }

    /// Mean and log-variance of the encoding of `z`.
    pub fn moments<S: Scalar>(&self, store: &ParamStore<S>, z: &[S]) -> Result<(Vec<S>, Vec<S>)> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let z = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let enc = self.encode_var(&mut g, &mut p, z, None)?;
        Ok((g.value(enc.mean).data().to_vec(), g.value(enc.log_var).data().to_vec()))
    }

    pub fn energy_logits<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        v: &[S],
        q_plus: &[S],
        q_minus: &[S],
    ) -> Result<EnergyLogits<S>> {
        ensure!(v.len() == self.dim, "encoding has length {}, expected {}", v.len(), self.dim);
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let v = g.constant(Tensor::new(vec![1, self.dim], v.to_vec())?);
        let e = self.logits_var(&mut g, &mut p, v, q_plus, q_minus)?;
        let e = g.value(e).data();
        Ok(EnergyLogits::new(e[0], e[1]))
    }

    /// Logits and the input gradient of a weighted logit combination for each
    /// row of `v` (`[B, d]`, row-major, f64).
    ///
    /// `weights(row, e+, e-)` returns the coefficients `(w+, w-)`; the gradient
    /// is `w+ de+/dv + w- de-/dv`.
    pub fn logit_input_grads<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        v: &[f64],
        q_plus: &[S],
        q_minus: &[S],
        mut weights: impl FnMut(usize, f64, f64) -> (f64, f64),
    ) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
        let d = self.dim;
        ensure!(v.len().is_multiple_of(d), "encoding buffer length {} is not a multiple of {d}", v.len());
        ensure!(q_plus.len() == d && q_minus.len() == d, "codebook vectors must have length {d}");
        let rows = v.len() / d;
        let mut logits = Vec::with_capacity(rows);
        let mut grads = vec![0.0; v.len()];
        match self.scorer {
            Scorer::Energy(h) => {
                let hd = h.hidden;
                let wv = store.get(h.weight_v).to_f64_vec();
                let wq = store.get(h.weight_q).to_f64_vec();
                let b1 = store.get(h.hidden_bias).to_f64_vec();
                let w2 = store.get(h.out.weight).to_f64_vec();
                let b2 = store.get(h.out.bias).data()[0].f64();
                let qf = |q: &[S]| q.iter().map(|x| x.f64()).collect::<Vec<_>>();
                let cq: Vec<Vec<f64>> = [qf(q_plus), qf(q_minus)]
                    .iter()
                    .map(|q| {
                        let mut c = matmul_forward(q, &wq, 1, d, hd);
                        c.iter_mut().zip(&b1).for_each(|(c, b)| *c += b);
                        c
                    })
                    .collect();
                let hv = matmul_forward(v, &wv, rows, d, hd);
                let mut slope = [vec![0.0; hd], vec![0.0; hd]];
                let mut coef = vec![0.0; hd];
                for r in 0..rows {
                    let hrow = &hv[r * hd..(r + 1) * hd];
                    let mut e = [b2; 2];
                    for m in 0..2 {
                        for j in 0..hd {
                            let x = hrow[j] + cq[m][j];
                            let s = sigmoid(x);
                            e[m] += w2[j] * x * s;
                            slope[m][j] = w2[j] * s * (1.0 + x * (1.0 - s));
                        }
                    }
                    let (wp, wm) = weights(r, e[0], e[1]);
                    for j in 0..hd {
                        coef[j] = wp * slope[0][j] + wm * slope[1][j];
                    }
                    let grow = &mut grads[r * d..(r + 1) * d];
                    for (i, gi) in grow.iter_mut().enumerate() {
                        *gi = wv[i * hd..(i + 1) * hd].iter().zip(&coef).map(|(a, b)| a * b).sum();
                    }
                    logits.push(e);
                }
            }
            Scorer::Direct(a) => {
                let w = store.get(a.weight).to_f64_vec();
                let b = store.get(a.bias).data()[0].f64();
                for r in 0..rows {
                    let row = &v[r * d..(r + 1) * d];
                    let s = b + row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
                    let (wp, _) = weights(r, s, 0.0);
                    for (gi, wi) in grads[r * d..(r + 1) * d].iter_mut().zip(&w) {
                        *gi = wp * wi;
                    }
                    logits.push([s, 0.0]);
                }
            }
        }
        Ok((logits, grads))
    }

    /// Runs `cfg.steps` Langevin steps from each row of `v0` (`[B, d]`).
    ///
    /// `targets`, when given, selects the conditional mode: each chain follows
    /// the logit of its own label instead of the LogSumExp of both.
    #[allow(clippy::too_many_arguments)]
    pub fn sgld<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        v0: &Tensor<S>,
        q_plus: &[S],
        q_minus: &[S],
        cfg: &SgldConfig,
        targets: Option<&[u8]>,
        rng: &mut Rng,
    ) -> Result<Tensor<S>> {
        cfg.validate()?;
        let (rows, d) = v0.dims2()?;
        ensure!(d == self.dim, "chains have width {d}, expected {}", self.dim);
        if let Some(t) = targets {
            ensure!(t.len() == rows, "{} targets for {rows} chains", t.len());
        }
        let mut v = v0.to_f64_vec();
        let direction = match cfg.variant {
            SgldVariant::DescendEnergy => 1.0,
            SgldVariant::Literal => -1.0,
        };
        let noise_std = cfg.step_size.sqrt();
        for step in 0..cfg.steps {
            let (_, grad) = self.logit_input_grads(store, &v, q_plus, q_minus, |r, ep, em| match targets {
                None => {
                    let sp = sigmoid(ep - em);
                    (sp, 1.0 - sp)
                }
                Some(t) if t[r] == 1 => (1.0, 0.0),
                Some(_) => (0.0, 1.0),
            })?;
            for (x, g) in v.iter_mut().zip(&grad) {
                *x += direction * 0.5 * cfg.step_size * g;
                if cfg.noise {
                    let n: f64 = StandardNormal.sample(rng);
                    *x += noise_std * n;
                }
            }
            for row in v.chunks(d) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm.is_nan() || norm > DIVERGENCE_NORM {
                    return Err(Error::SamplerDivergence { step: step + 1, norm });
                }
            }
        }
        Tensor::from_f64(&[rows, d], &v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SgldVariant {
    /// Ascends `LSE(e)`, i.e. descends the composed energy `-LSE(e)`.
    #[default]
    DescendEnergy,
    /// Descends `LSE(e)`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub variant: SgldVariant,
    pub noise: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 0.4,
            variant: SgldVariant::DescendEnergy,
            noise: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.step_size > 0.0 && self.step_size.is_finite(),
            "SGLD step size must be positive, got {}",
            self.step_size
        );
        Ok(())
    }
}
