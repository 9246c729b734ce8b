//! Metrics, intervention sweeps, energy analysis and exports.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::datagen::{shift_variant, ShiftMode, Split, SyntheticDataset};
use crate::error::{ensure, Error, Result};
use crate::nn::Binder;
use crate::numerics::{derive_rng, derive_rng_indexed, derive_seed, gaussian_sample, Graph, Scalar, Tensor};
use crate::pipeline::{argmax, ConceptStage, Model, PredictionRecord};
use crate::qcav::Overrides;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    pub mean_uncertainty: f64,
}

/// `c_star` is row-major `[N, K]`.
pub fn metrics<S: Scalar>(records: &[PredictionRecord<S>], c_star: &[u8], y_star: &[usize]) -> Result<Metrics> {
    ensure!(!records.is_empty(), "metrics of zero records");
    ensure!(
        records.len() == y_star.len(),
        "{} records but {} labels",
        records.len(),
        y_star.len()
    );
    let k = records[0].concept_scores.len();
    ensure!(
        c_star.len() == records.len() * k,
        "concept labels must be [{}, {k}], got {} entries",
        records.len(),
        c_star.len()
    );
    let (mut concept_ok, mut task_ok, mut u_sum) = (0usize, 0usize, 0.0);
    for (i, r) in records.iter().enumerate() {
        ensure!(r.concept_scores.len() == k, "record {i} has {} concepts", r.concept_scores.len());
        for (c, &t) in r.concept_scores.iter().zip(&c_star[i * k..(i + 1) * k]) {
            concept_ok += ((c.f64() > 0.5) == (t == 1)) as usize;
        }
        task_ok += (r.predicted_class == y_star[i]) as usize;
        u_sum += r.uncertainties.iter().map(|u| u.f64()).sum::<f64>();
    }
    let n = records.len() as f64;
    Ok(Metrics {
        concept_accuracy: concept_ok as f64 / (n * k as f64),
        task_accuracy: task_ok as f64 / n,
        mean_uncertainty: u_sum / (n * k as f64),
    })
}

fn labels(ds: &SyntheticDataset) -> Vec<usize> {
    (0..ds.len()).map(|i| ds.label(i)).collect()
}

pub fn predict_dataset<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset) -> Result<Vec<PredictionRecord<S>>> {
    ensure!(!ds.is_empty(), "dataset is empty");
    model.predict_batch(&ds.x.cast())
}

pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset) -> Result<Metrics> {
    let records = predict_dataset(model, ds)?;
    metrics(&records, &ds.c_star, &labels(ds))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    UncertaintyDesc,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "uncertainty_desc" => Ok(Strategy::UncertaintyDesc),
            other => Err(Error::contract(format!(
                "unknown intervention strategy `{other}` (expected random or uncertainty_desc)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ratios: Vec<f64>,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    /// `accuracy[r][s]`: task accuracy at `ratios[r]` under `seeds[s]`.
    pub accuracy: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Half-width of the 95% interval, `1.96 * stderr` over seeds.
    pub ci95: Vec<f64>,
}

/// Number of concepts corrected at ratio `r` out of `k`.
pub fn intervention_count(r: f64, k: usize) -> usize {
    let raw = r * k as f64;
    // absorb representation error so that e.g. 0.3 * 10 gives 3, not 4
    let n = (raw - 1e-9 * raw.abs().max(1.0)).ceil();
    (n.max(0.0) as usize).min(k)
}

pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Task accuracy when, per sample, the first `ceil(r K)` concepts of an
/// intervention order are routed by ground truth.
///
/// Random orders are one permutation per (seed, sample), so the corrected
/// sets are nested across ratios.
pub fn intervention_sweep<S: Scalar>(
    model: &Model<S>,
    ds: &SyntheticDataset,
    ratios: &[f64],
    strategy: Strategy,
    seeds: &[u64],
) -> Result<SweepResult> {
    ensure!(!ratios.is_empty(), "sweep needs at least one ratio");
    ensure!(!seeds.is_empty(), "sweep needs at least one seed");
    ensure!(
        ratios.iter().all(|r| (0.0..=1.0).contains(r)),
        "intervention ratios must lie in [0, 1]"
    );
    ensure!(!ds.is_empty(), "dataset is empty");
    let stage = model.concept_stage(&ds.x.cast(), None)?;
    let k = model.num_concepts();
    let y = labels(ds);
    let mut accuracy = vec![Vec::with_capacity(seeds.len()); ratios.len()];
    for &seed in seeds {
        let orders: Vec<Vec<usize>> = (0..ds.len())
            .map(|i| match strategy {
                Strategy::Random => {
                    let mut o: Vec<usize> = (0..k).collect();
                    o.shuffle(&mut derive_rng_indexed(seed, "sweep/order", i as u64));
                    o
                }
                Strategy::UncertaintyDesc => {
                    let u: Vec<f64> = stage.logits[i].iter().map(|e| e.uncertainty().f64()).collect();
                    let mut o: Vec<usize> = (0..k).collect();
                    o.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
                    o
                }
            })
            .collect();
        for (ri, &r) in ratios.iter().enumerate() {
            let n = intervention_count(r, k);
            let overrides: Vec<Overrides> = orders
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let mut ov = Overrides::new();
                    for &c in &o[..n] {
                        ov.insert(c, ds.concepts(i)[c] == 1);
                    }
                    ov
                })
                .collect();
            accuracy[ri].push(task_accuracy_with(model, &stage, &overrides, &y)?);
        }
    }
    let (mean, ci95) = accuracy.iter().map(|a| mean_ci(a)).unzip();
    Ok(SweepResult {
        ratios: ratios.to_vec(),
        strategy,
        seeds: seeds.to_vec(),
        accuracy,
        mean,
        ci95,
    })
}

fn task_accuracy_with<S: Scalar>(
    model: &Model<S>,
    stage: &ConceptStage<S>,
    overrides: &[Overrides],
    y: &[usize],
) -> Result<f64> {
    let width = model.num_concepts() * model.concept_dim();
    let mut selected = Vec::with_capacity(stage.len() * width);
    for (i, ov) in overrides.iter().enumerate() {
        selected.extend(model.selected(&stage.scores(i), ov)?);
    }
    let logits = model.class_logits(Tensor::matrix(stage.len(), width, selected)?)?;
    let ok = (0..stage.len()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
    Ok(ok as f64 / stage.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub concept: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Composed energies of concept `k` over a dataset (posterior-mean encodings).
pub fn composed_energies<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset, k: usize) -> Result<Vec<f64>> {
    ensure!(k < model.num_concepts(), "concept {k} out of range");
    ensure!(!ds.is_empty(), "dataset is empty");
    let stage = model.concept_stage(&ds.x.cast(), None)?;
    Ok(stage.logits.iter().map(|row| row[k].composed_energy().f64()).collect())
}

/// `bins + 1` edges spanning the reference energies, padded by 5% of the range.
pub fn histogram_edges(energies: &[f64], bins: usize) -> Result<Vec<f64>> {
    ensure!(bins >= 2, "histogram needs at least 2 bins, got {bins}");
    ensure!(!energies.is_empty(), "histogram of an empty dataset");
    let lo = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pad = if range > 0.0 { 0.05 * range } else { 0.05 * lo.abs().max(1.0) };
    let (lo, hi) = (lo - pad, hi + pad);
    Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
}

/// Counts per bin; values outside the edges land in the end bins.
pub fn bin_counts(values: &[f64], edges: &[f64]) -> Result<Vec<usize>> {
    ensure!(edges.len() >= 3, "need at least 2 bins");
    ensure!(edges.windows(2).all(|w| w[0] < w[1]), "bin edges must be strictly increasing");
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &v in values {
        let at = edges[1..bins].partition_point(|&e| e <= v);
        counts[at] += 1;
    }
    Ok(counts)
}

/// Histograms of concept `k`'s energies on each dataset, all on edges taken
/// from `reference`.
pub fn energy_histograms<S: Scalar>(
    model: &Model<S>,
    reference: &SyntheticDataset,
    datasets: &[&SyntheticDataset],
    k: usize,
    bins: usize,
) -> Result<Vec<Histogram>> {
    let edges = histogram_edges(&composed_energies(model, reference, k)?, bins)?;
    datasets
        .iter()
        .map(|ds| {
            Ok(Histogram {
                concept: k,
                counts: bin_counts(&composed_energies(model, ds, k)?, &edges)?,
                edges: edges.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `n` samples whose concept-`k` encodings lie closest to the query's.
pub fn nearest_neighbors<S: Scalar>(
    model: &Model<S>,
    ds: &SyntheticDataset,
    k: usize,
    query: usize,
    n: usize,
) -> Result<Vec<Neighbor>> {
    ensure!(k < model.num_concepts(), "concept {k} out of range");
    ensure!(query < ds.len(), "query {query} out of range for {} samples", ds.len());
    ensure!(n >= 1, "need at least one neighbor");
    ensure!(n < ds.len(), "asked for {n} neighbors among {} other samples", ds.len() - 1);
    let stage = model.concept_stage(&ds.x.cast(), None)?;
    let v = &stage.encodings[k];
    let q = v.row(query);
    let mut all: Vec<Neighbor> = (0..ds.len())
        .filter(|&i| i != query)
        .map(|i| Neighbor {
            index: i,
            distance: v
                .row(i)
                .iter()
                .zip(q)
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(n);
    Ok(all)
}

/// Writes one CSV row per (sample, concept): ids, label, the selected
/// codebook vector and the encoding `v`.
pub fn export_embeddings<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv(model, ds)?)?;
    Ok(())
}

pub fn embeddings_csv<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset) -> Result<String> {
    ensure!(!ds.is_empty(), "dataset is empty");
    let stage = model.concept_stage(&ds.x.cast(), None)?;
    let (k, d) = (model.num_concepts(), model.concept_dim());
    let mut out = String::from("sample,concept,label");
    for j in 0..d {
        write!(out, ",selected_{j}").expect("string write");
    }
    for j in 0..d {
        write!(out, ",v_{j}").expect("string write");
    }
    out.push('\n');
    let none = Overrides::new();
    for i in 0..ds.len() {
        let selected = model.selected(&stage.scores(i), &none)?;
        for kk in 0..k {
            write!(out, "{i},{kk},{}", ds.concepts(i)[kk]).expect("string write");
            for x in &selected[kk * d..(kk + 1) * d] {
                write!(out, ",{x}").expect("string write");
            }
            for x in stage.encodings[kk].row(i) {
                write!(out, ",{x}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub variant: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>16} {:>13} {:>16}\n",
            "variant", "concept_accuracy", "task_accuracy", "mean_uncertainty"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>16.4} {:>13.4} {:>16.4}",
                r.variant, r.metrics.concept_accuracy, r.metrics.task_accuracy, r.metrics.mean_uncertainty
            )
            .expect("string write");
        }
        out
    }
}

/// Metrics on the dataset and on its black and random nuisance shifts.
pub fn robustness_report<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset, seed: u64) -> Result<RobustnessReport> {
    ensure!(ds.nuisance_dims > 0, "robustness needs nuisance dimensions");
    let black = shift_variant(ds, ShiftMode::Black, seed)?;
    let random = shift_variant(ds, ShiftMode::Random, seed)?;
    let rows = [("original", ds), ("black", &black), ("random", &random)]
        .into_iter()
        .map(|(name, d)| {
            Ok(RobustnessRow {
                variant: name.to_string(),
                metrics: evaluate(model, d)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RobustnessReport { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySeparation {
    pub mean_data_energy: f64,
    pub mean_noise_energy: f64,
    pub margin: f64,
}

/// Mean composed energy of real (posterior-mean) encodings against that of
/// fresh `N(0, I)` latents, averaged over concepts.
pub fn energy_separation<S: Scalar>(model: &Model<S>, ds: &SyntheticDataset, seed: u64) -> Result<EnergySeparation> {
    ensure!(!ds.is_empty(), "dataset is empty");
    let stage = model.concept_stage(&ds.x.cast(), None)?;
    let (n, k, d) = (ds.len(), model.num_concepts(), model.concept_dim());
    let data: f64 = stage
        .logits
        .iter()
        .flat_map(|row| row.iter().map(|e| e.composed_energy().f64()))
        .sum::<f64>()
        / (n * k) as f64;
    let mut rng = derive_rng(seed, "eval/noise_latents");
    let mut noise = 0.0;
    for kk in 0..k {
        let v: Tensor<S> = gaussian_sample(&[n, d], 0.0, 1.0, &mut rng)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(model.params());
        let vv = g.constant(v);
        let (qp, qm) = model.codebook().pair(kk);
        let e = model.head(kk).logits_var(&mut g, &mut p, vv, qp, qm)?;
        let lse = g.logsumexp_rows(e)?;
        noise -= g.value(lse).sum_f64();
    }
    let noise = noise / (n * k) as f64;
    Ok(EnergySeparation {
        mean_data_energy: data,
        mean_noise_energy: noise,
        margin: noise - data,
    })
}

/// Everything `eval` reports for one split. Serializes deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub metrics: Metrics,
    pub robustness: RobustnessReport,
    pub energy_separation: EnergySeparation,
    pub sweep: SweepResult,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluation_report<S: Scalar>(
    model: &Model<S>,
    ds: &SyntheticDataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        split: ds.split,
        samples: ds.len(),
        metrics: evaluate(model, ds)?,
        robustness: robustness_report(model, ds, derive_seed(seed, "eval/shift"))?,
        energy_separation: energy_separation(model, ds, derive_seed(seed, "eval/noise"))?,
        sweep: intervention_sweep(model, ds, &cfg.ratios, cfg.strategy, &cfg.seeds)?,
    })
}
