//! Embedding datasets: file format, synthetic clustered data, and evaluation splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::wire;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"OPQE";
pub const EMBEDDING_VERSION: u32 = 1;

/// `N` feature vectors of dimension `Din` with class labels in `[0, C)`.
///
/// Features are held in double precision, row-major. On disk they are single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u32>,
    classes: usize,
    pub name: String,
    pub seed: Option<u64>,
}

impl EmbeddingDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("features must be finite".into()));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            name: String::new(),
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    /// Samples at `indices`, with labels passed through `relabel` and a new class count.
    fn select(&self, indices: &[usize], relabel: impl Fn(u32) -> u32, classes: usize) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(relabel(self.labels[i]));
        }
        Self {
            features,
            dim: self.dim,
            labels,
            classes,
            name: self.name.clone(),
            seed: self.seed,
        }
    }

    /// Indices of every class, in dataset order.
    fn by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        wire::write_header(w, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.len(), "N")?)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.dim, "Din")?)?;
        w.write_u32::<LittleEndian>(wire::to_u32(self.classes, "C")?)?;
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        for &v in &self.features {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    /// Reads an embedding file, converting features straight into the final buffer.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        wire::read_header(r, EMBEDDING_MAGIC, EMBEDDING_VERSION)?;
        let n = wire::read_u32(r)? as usize;
        let dim = wire::read_u32(r)? as usize;
        let classes = wire::read_u32(r)? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::Format(format!("empty dataset header (N={n}, Din={dim})")));
        }
        let mut labels = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut labels).map_err(wire::eof)?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {bad} >= class count {classes}")));
        }
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("N x Din overflows".into()))?;
        let mut features = Vec::with_capacity(total);
        let mut chunk = vec![0f32; total.min(1 << 16)];
        while features.len() < total {
            let take = (total - features.len()).min(chunk.len());
            r.read_f32_into::<LittleEndian>(&mut chunk[..take]).map_err(wire::eof)?;
            for &v in &chunk[..take] {
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "non-finite feature at row {}",
                        features.len() / dim
                    )));
                }
                features.push(f64::from(v));
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            name: String::new(),
            seed: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ds = Self::read_from(&mut BufReader::new(File::open(path)?))?;
        ds.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Minimum angle between class centers.
pub const MIN_CENTER_SEPARATION_RAD: f64 = 0.5;
const CENTER_ATTEMPTS: usize = 10_000;

/// Unit-sphere clusters: one random unit center per class, samples are
/// `center + N(0, σ²)` re-normalized. Output is class-major.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    if cfg.classes < 2 || cfg.per_class < 2 {
        return Err(Error::Config("synthetic data needs >= 2 classes and >= 2 samples per class".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("dimension must be >= 1".into()));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma > 0.0) {
        return Err(Error::Config(format!("noise sigma {} must be > 0", cfg.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_cos = MIN_CENTER_SEPARATION_RAD.cos();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    while centers.len() < cfg.classes {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let candidate = random_unit(cfg.dim, &mut rng);
            if centers.iter().all(|c| dot(c, &candidate) <= max_cos) {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {} class centers {MIN_CENTER_SEPARATION_RAD} rad apart in {} dimensions",
                cfg.classes, cfg.dim
            )));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("positive finite sigma");
    let mut features = Vec::with_capacity(cfg.classes * cfg.per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let sample: Vec<f64> = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            let n = norm(&sample);
            features.extend(sample.iter().map(|v| v / n));
            labels.push(label as u32);
        }
    }
    let mut ds = EmbeddingDataset::new(features, cfg.dim, labels, cfg.classes)?;
    ds.name = "synthetic".into();
    ds.seed = Some(cfg.seed);
    Ok(ds)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Seen-class protocol: the first `per_class_queries` samples of every class become
/// queries and the rest the database.
pub fn split_standard(
    ds: &EmbeddingDataset,
    per_class_queries: usize,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if per_class_queries == 0 {
        return Err(Error::Config("need at least one query per class".into()));
    }
    let groups = ds.by_class();
    let mut db = Vec::new();
    let mut queries = Vec::new();
    for label in 0..ds.classes as u32 {
        let members = groups.get(&label).map(Vec::as_slice).unwrap_or(&[]);
        if members.len() <= per_class_queries {
            return Err(Error::Config(format!(
                "class {label} has {} samples, needs more than {per_class_queries}",
                members.len()
            )));
        }
        queries.extend_from_slice(&members[..per_class_queries]);
        db.extend_from_slice(&members[per_class_queries..]);
    }
    db.sort_unstable();
    queries.sort_unstable();
    Ok((
        ds.select(&db, |l| l, ds.classes),
        ds.select(&queries, |l| l, ds.classes),
    ))
}

/// Unseen-class protocol: the first `round(fraction·C)` classes form the training set;
/// the remaining classes are split into database and queries with [`split_standard`].
/// Both sides are relabeled densely from 0.
pub fn split_unseen(
    ds: &EmbeddingDataset,
    train_class_fraction: f64,
    per_class_queries: usize,
) -> Result<(EmbeddingDataset, EmbeddingDataset, EmbeddingDataset)> {
    if !(0.0..=1.0).contains(&train_class_fraction) {
        return Err(Error::Config(format!(
            "train class fraction {train_class_fraction} must be in [0, 1]"
        )));
    }
    let train_classes = (train_class_fraction * ds.classes as f64).round() as usize;
    let unseen_classes = ds.classes - train_classes.min(ds.classes);
    if train_classes < 2 || unseen_classes < 2 {
        return Err(Error::Config(format!(
            "class split {train_classes}/{unseen_classes} leaves fewer than 2 classes on a side"
        )));
    }
    let cut = train_classes as u32;
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] < cut).collect();
    let unseen_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] >= cut).collect();
    let train = ds.select(&train_idx, |l| l, train_classes);
    let unseen = ds.select(&unseen_idx, |l| l - cut, unseen_classes);
    let (db, queries) = split_standard(&unseen, per_class_queries)?;
    Ok((train, db, queries))
}
