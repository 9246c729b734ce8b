//! Synthetic concept-structured classification data.
//!
//! Each class owns a binary concept prototype; samples copy their class
//! prototype, flip bits independently, and embed the resulting concept
//! pattern linearly through orthonormal directions. The trailing
//! `nuisance_dims` columns carry pure noise and are the target of the
//! distribution-shift variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::container::{BlobReader, BlobWriter};
use crate::error::{ensure, Error, Result};
use crate::numerics::{derive_rng, Rng, Tensor};

const MAGIC: &[u8; 8] = b"EQCBMDAT";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const MIN_PROTOTYPE_DISTANCE: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_concepts: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub nuisance_dims: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub concept_flip_prob: f64,
    pub observation_noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_concepts: 8,
            num_classes: 10,
            input_dim: 32,
            nuisance_dims: 8,
            train_size: 2000,
            test_size: 500,
            concept_flip_prob: 0.05,
            observation_noise_std: 0.1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_concepts;
        ensure!(k >= 1, "num_concepts must be at least 1");
        ensure!(self.num_classes >= 1, "num_classes must be at least 1");
        ensure!(
            k >= usize::BITS as usize - 1 || self.num_classes <= 1usize << k,
            "num_classes {} exceeds 2^num_concepts",
            self.num_classes
        );
        // labels are stored as u8
        ensure!(self.num_classes <= 256, "num_classes above 256 is not supported");
        ensure!(
            self.nuisance_dims < self.input_dim,
            "nuisance_dims ({}) must be below input_dim ({})",
            self.nuisance_dims,
            self.input_dim
        );
        ensure!(
            self.input_dim - self.nuisance_dims >= k,
            "need at least num_concepts signal dimensions for orthonormal embedding"
        );
        ensure!(self.train_size >= 1 && self.test_size >= 1, "split sizes must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.concept_flip_prob),
            "concept_flip_prob must lie in [0, 1]"
        );
        ensure!(
            self.observation_noise_std >= 0.0 && self.observation_noise_std.is_finite(),
            "observation_noise_std must be finite and nonnegative"
        );
        Ok(())
    }

    pub fn signal_dims(&self) -> usize {
        self.input_dim - self.nuisance_dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split `{other}`"))),
        }
    }
}

/// How the nuisance columns of a dataset were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Black,
    Random,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Black => "black",
            Variant::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    /// Nuisance columns zeroed.
    Black,
    /// Nuisance columns redrawn from N(3, 1).
    Random,
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(ShiftMode::Black),
            "random" => Ok(ShiftMode::Random),
            other => Err(Error::contract(format!("unknown shift mode `{other}`"))),
        }
    }
}

pub const RANDOM_SHIFT_MEAN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub split: Split,
    pub variant: Variant,
    /// `[N, D]` features; nuisance columns are the last `nuisance_dims`.
    pub x: Tensor<f32>,
    /// Row-major `N x K` binary concept labels.
    pub c_star: Vec<u8>,
    pub y_star: Vec<u8>,
    /// Row-major `M x K` class prototypes.
    pub prototypes: Vec<u8>,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub nuisance_dims: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.y_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_star.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn features(&self, i: usize) -> &[f32] {
        self.x.row(i)
    }

    pub fn concepts(&self, i: usize) -> &[u8] {
        &self.c_star[i * self.num_concepts..(i + 1) * self.num_concepts]
    }

    pub fn label(&self, i: usize) -> usize {
        self.y_star[i] as usize
    }

    pub fn prototype(&self, class: usize) -> &[u8] {
        &self.prototypes[class * self.num_concepts..(class + 1) * self.num_concepts]
    }

    /// Class whose prototype is nearest in Hamming distance (lowest index on ties).
    pub fn nearest_prototype(&self, concepts: &[u8]) -> usize {
        (0..self.num_classes)
            .min_by_key(|&m| hamming(self.prototype(m), concepts))
            .unwrap_or(0)
    }

    /// Restricts to the given rows, preserving their order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let k = self.num_concepts;
        let mut c_star = Vec::with_capacity(rows.len() * k);
        let mut y_star = Vec::with_capacity(rows.len());
        for &i in rows {
            ensure!(i < self.len(), "row {i} out of range");
            c_star.extend_from_slice(self.concepts(i));
            y_star.push(self.y_star[i]);
        }
        Ok(Self {
            x: self.x.gather_rows(rows)?,
            c_star,
            y_star,
            prototypes: self.prototypes.clone(),
            ..*self
        })
    }
}

/// Both splits of one generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub config: DatasetConfig,
    pub train: SyntheticDataset,
    pub test: SyntheticDataset,
}

impl DataBundle {
    pub fn split(&self, split: Split) -> &SyntheticDataset {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

pub fn generate(config: &DatasetConfig) -> Result<DataBundle> {
    config.validate()?;
    let prototypes = sample_prototypes(config, &mut derive_rng(config.seed, "data/prototypes"))?;
    let basis = orthonormal_basis(config.signal_dims(), config.num_concepts, &mut derive_rng(config.seed, "data/basis"));
    let train = sample_split(config, Split::Train, &prototypes, &basis, &mut derive_rng(config.seed, "data/train"))?;
    let test = sample_split(config, Split::Test, &prototypes, &basis, &mut derive_rng(config.seed, "data/test"))?;
    Ok(DataBundle {
        config: config.clone(),
        train,
        test,
    })
}

fn sample_prototypes(config: &DatasetConfig, rng: &mut Rng) -> Result<Vec<u8>> {
    const RESTARTS: usize = 200;
    let (k, m) = (config.num_concepts, config.num_classes);
    for _ in 0..RESTARTS {
        let mut chosen: Vec<Vec<u8>> = Vec::with_capacity(m);
        for _ in 0..m * 64 {
            if chosen.len() == m {
                break;
            }
            let cand: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
            if chosen.iter().all(|p| hamming(p, &cand) >= MIN_PROTOTYPE_DISTANCE) {
                chosen.push(cand);
            }
        }
        if chosen.len() == m {
            return Ok(chosen.concat());
        }
    }
    Err(Error::Generation(format!(
        "could not place {m} prototypes over {k} concepts at Hamming distance >= {MIN_PROTOTYPE_DISTANCE}"
    )))
}

/// `rows x cols` matrix with orthonormal columns (modified Gram-Schmidt).
fn orthonormal_basis(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn sample_split(
    config: &DatasetConfig,
    split: Split,
    prototypes: &[u8],
    basis: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<SyntheticDataset> {
    let n = match split {
        Split::Train => config.train_size,
        Split::Test => config.test_size,
    };
    let (k, d, signal) = (config.num_concepts, config.input_dim, config.signal_dims());
    let mut x = Vec::with_capacity(n * d);
    let mut c_star = Vec::with_capacity(n * k);
    let mut y_star = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..config.num_classes);
        let concepts: Vec<u8> = prototypes[y * k..(y + 1) * k]
            .iter()
            .map(|&bit| if rng.random_bool(config.concept_flip_prob) { 1 - bit } else { bit })
            .collect();
        for row in 0..signal {
            let clean: f64 = basis
                .iter()
                .zip(&concepts)
                .map(|(col, &c)| col[row] * (2.0 * c as f64 - 1.0))
                .sum();
            let noise: f64 = StandardNormal.sample(rng);
            x.push((clean + config.observation_noise_std * noise) as f32);
        }
        for _ in signal..d {
            let z: f64 = StandardNormal.sample(rng);
            x.push(z as f32);
        }
        c_star.extend_from_slice(&concepts);
        y_star.push(y as u8);
    }
    Ok(SyntheticDataset {
        split,
        variant: Variant::Original,
        x: Tensor::matrix(n, d, x)?,
        c_star,
        y_star,
        prototypes: prototypes.to_vec(),
        num_concepts: k,
        num_classes: config.num_classes,
        nuisance_dims: config.nuisance_dims,
    })
}

/// Replaces the nuisance columns; signal columns, concepts and labels are untouched.
pub fn shift_variant(dataset: &SyntheticDataset, mode: ShiftMode, seed: u64) -> Result<SyntheticDataset> {
    ensure!(dataset.nuisance_dims > 0, "dataset has no nuisance dimensions to shift");
    let mut out = dataset.clone();
    let (n, d) = out.x.dims2()?;
    let start = d - dataset.nuisance_dims;
    let mut rng = derive_rng(seed, &format!("shift/{}/{}", dataset.split, n));
    for i in 0..n {
        for v in &mut out.x.row_mut(i)[start..] {
            *v = match mode {
                ShiftMode::Black => 0.0,
                ShiftMode::Random => {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (RANDOM_SHIFT_MEAN + z) as f32
                }
            };
        }
    }
    out.variant = match mode {
        ShiftMode::Black => Variant::Black,
        ShiftMode::Random => Variant::Random,
    };
    Ok(out)
}

pub fn save(bundle: &DataBundle, path: &Path) -> Result<()> {
    let cfg = &bundle.config;
    let mut w = BlobWriter::default();
    w.push_u8(
        "prototypes",
        &[cfg.num_classes, cfg.num_concepts],
        &bundle.train.prototypes,
    );
    for ds in [&bundle.train, &bundle.test] {
        let n = ds.len();
        w.push_f32(&format!("{}.x", ds.split), &[n, ds.input_dim()], ds.x.data().iter().copied());
        w.push_u8(&format!("{}.c_star", ds.split), &[n, ds.num_concepts], &ds.c_star);
        w.push_u8(&format!("{}.y_star", ds.split), &[n], &ds.y_star);
    }
    let mut manifest = Map::new();
    manifest.insert("format_version".into(), DATASET_FORMAT_VERSION.into());
    manifest.insert("kind".into(), "dataset".into());
    manifest.insert("config".into(), serde_json::to_value(cfg)?);
    w.write(path, MAGIC, manifest)
}

pub fn load(path: &Path) -> Result<DataBundle> {
    let r = BlobReader::open(path, MAGIC, DATASET_FORMAT_VERSION)?;
    let config: DatasetConfig = r.field("config")?;
    config.validate()?;
    let (k, m) = (config.num_concepts, config.num_classes);
    let (pshape, prototypes) = r.u8("prototypes")?;
    expect_shape("prototypes", &[m, k], &pshape)?;
    let read_split = |split: Split| -> Result<SyntheticDataset> {
        let (xshape, x) = r.f32(&format!("{split}.x"))?;
        let n = *xshape.first().unwrap_or(&0);
        expect_shape(&format!("{split}.x"), &[n, config.input_dim], &xshape)?;
        let (cshape, c_star) = r.u8(&format!("{split}.c_star"))?;
        expect_shape(&format!("{split}.c_star"), &[n, k], &cshape)?;
        let (yshape, y_star) = r.u8(&format!("{split}.y_star"))?;
        expect_shape(&format!("{split}.y_star"), &[n], &yshape)?;
        ensure!(
            y_star.iter().all(|&y| (y as usize) < m) && c_star.iter().all(|&c| c <= 1),
            "{split} labels out of range"
        );
        Ok(SyntheticDataset {
            split,
            variant: Variant::Original,
            x: Tensor::new(xshape, x)?,
            c_star,
            y_star,
            prototypes: prototypes.clone(),
            num_concepts: k,
            num_classes: m,
            nuisance_dims: config.nuisance_dims,
        })
    };
    let train = read_split(Split::Train)?;
    let test = read_split(Split::Test)?;
    Ok(DataBundle { config, train, test })
}

fn expect_shape(name: &str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train_size: 300,
            test_size: 100,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn prototypes_are_separated() {
        for seed in 0..20 {
            let b = generate(&DatasetConfig { seed, ..small() }).unwrap();
            let ds = &b.train;
            for i in 0..ds.num_classes {
                for j in i + 1..ds.num_classes {
                    assert!(hamming(ds.prototype(i), ds.prototype(j)) >= 3);
                }
            }
        }
    }

    #[test]
    fn no_flips_means_concepts_equal_prototype() {
        let b = generate(&DatasetConfig {
            concept_flip_prob: 0.0,
            ..small()
        })
        .unwrap();
        for ds in [&b.train, &b.test] {
            for i in 0..ds.len() {
                assert_eq!(ds.concepts(i), ds.prototype(ds.label(i)));
                assert_eq!(ds.nearest_prototype(ds.concepts(i)), ds.label(i));
            }
        }
    }

    #[test]
    fn unsatisfiable_hamming_constraint() {
        let cfg = DatasetConfig {
            num_concepts: 3,
            num_classes: 8,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(DatasetConfig { nuisance_dims: 32, ..small() }.validate().is_err());
        assert!(DatasetConfig { num_classes: 300, num_concepts: 12, input_dim: 40, ..small() }
            .validate()
            .is_err());
        assert!(DatasetConfig { concept_flip_prob: 1.5, ..small() }.validate().is_err());
    }

    #[test]
    fn black_shift_zeroes_only_nuisance() {
        let b = generate(&small()).unwrap();
        let shifted = shift_variant(&b.test, ShiftMode::Black, 3).unwrap();
        let (n, d) = shifted.x.dims2().unwrap();
        for i in 0..n {
            let (orig, new) = (b.test.features(i), shifted.features(i));
            assert_eq!(&orig[..d - 8], &new[..d - 8]);
            assert!(new[d - 8..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(shifted.c_star, b.test.c_star);
        assert_eq!(shifted.y_star, b.test.y_star);
        assert_eq!(shifted.variant, Variant::Black);
    }

    #[test]
    fn random_shift_mean_near_three() {
        let b = generate(&DatasetConfig { test_size: 500, ..small() }).unwrap();
        let shifted = shift_variant(&b.test, ShiftMode::Random, 9).unwrap();
        let (n, d) = shifted.x.dims2().unwrap();
        let vals: Vec<f64> = (0..n).flat_map(|i| shifted.features(i)[d - 8..].to_vec()).map(f64::from).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((2.8..=3.2).contains(&mean), "{mean}");
    }

    #[test]
    fn unknown_shift_mode() {
        assert!(matches!("sepia".parse::<ShiftMode>(), Err(Error::Contract(_))));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&small()).unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save(&b, &p1).unwrap();
        save(&generate(&small()).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded, b);
    }

    #[test]
    fn truncated_and_future_files_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save(&generate(&small()).unwrap(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&cut), Err(Error::Parse { .. })));

        let needle = b"\"format_version\":1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bumped = bytes.clone();
        // same manifest length, so the blob offset is unchanged
        bumped[at + needle.len() - 1] = b'9';
        let future = dir.path().join("future.bin");
        std::fs::write(&future, bumped).unwrap();
        assert!(matches!(load(&future), Err(Error::Version { found: 9, .. })));
    }
}
