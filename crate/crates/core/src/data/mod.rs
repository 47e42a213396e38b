//! Synthetic heterogeneous tasks, Dirichlet label-skew partitioning and
//! delimited-text ingestion.

mod tabular;

pub use tabular::{load_tabular, write_tabular, TabularSchema};

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, rng_normal, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One class per sample, softmax head.
    #[default]
    Single,
    /// Multi-hot targets, per-class sigmoid head.
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<usize>),
    /// `N × C` matrix of 0/1 entries.
    Multi(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Labels::Single(_) => TaskKind::Single,
            Labels::Multi(_) => TaskKind::Multi,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(indices.iter().map(|&i| v[i]).collect()),
            Labels::Multi(m) => Labels::Multi(m.select_rows(indices)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Labels,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Labels, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        match &labels {
            Labels::Single(v) => {
                if let Some(bad) = v.iter().find(|&&y| y >= num_classes) {
                    return Err(Error::data(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
            }
            Labels::Multi(m) => {
                if m.cols() != num_classes {
                    return Err(Error::data(format!(
                        "{} label columns for {num_classes} classes",
                        m.cols()
                    )));
                }
                if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::data("multi-hot labels must be 0 or 1"));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn kind(&self) -> TaskKind {
        self.labels.kind()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select(indices),
            num_classes: self.num_classes,
        }
    }

    /// Class used for partitioning: the label itself, or for multi-hot rows
    /// the first positive class (`num_classes` when none is set).
    pub fn primary_class(&self, i: usize) -> usize {
        match &self.labels {
            Labels::Single(v) => v[i],
            Labels::Multi(m) => m
                .row(i)
                .iter()
                .position(|&v| v == 1.0)
                .unwrap_or(self.num_classes),
        }
    }

    /// Relabels to the classes in `mask`, so that `mask[k]` becomes class
    /// `k`. Single-label samples outside the mask are an error; multi-hot
    /// targets keep only the masked columns.
    pub fn restrict_classes(&self, mask: &[usize]) -> Result<Dataset> {
        if mask.is_empty() {
            return Err(Error::data("empty class mask"));
        }
        if let Some(bad) = mask.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::data(format!("mask class {bad} out of range")));
        }
        let labels = match &self.labels {
            Labels::Single(v) => {
                let mut out = Vec::with_capacity(v.len());
                for &y in v {
                    let k = mask.iter().position(|&c| c == y).ok_or_else(|| {
                        Error::data(format!("label {y} outside class mask {mask:?}"))
                    })?;
                    out.push(k);
                }
                Labels::Single(out)
            }
            Labels::Multi(m) => {
                let mut out = Matrix::zeros(m.rows(), mask.len());
                for r in 0..m.rows() {
                    for (k, &c) in mask.iter().enumerate() {
                        out[(r, k)] = m[(r, c)];
                    }
                }
                Labels::Multi(out)
            }
        };
        Dataset::new(self.features.clone(), labels, mask.len())
    }

    /// Per-class counts over `primary_class`.
    pub fn class_histogram(&self) -> Vec<usize> {
        let extra = usize::from(self.kind() == TaskKind::Multi);
        let mut h = vec![0; self.num_classes + extra];
        for i in 0..self.len() {
            h[self.primary_class(i)] += 1;
        }
        h
    }

    /// Deterministic split into `(train, test)`, test taking roughly
    /// `test_fraction` of the samples (at least one each when possible).
    pub fn train_test_split(&self, rng: &mut Rng, test_fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let mut n_test = (n as f64 * test_fraction).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        } else {
            n_test = 0;
        }
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    /// Keeps the first `ceil(fraction·N)` samples (at least one).
    pub fn truncate_fraction(&self, fraction: f64) -> Dataset {
        let keep = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len().max(1));
        let idx: Vec<usize> = (0..keep.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub kind: TaskKind,
    /// Distance of class centres from the origin (single-label) or push
    /// along hyperplane normals (multi-label).
    pub margin: f64,
    /// Gaussian clusters per class (single-label only). Above one, classes
    /// are no longer linearly separable.
    pub clusters_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 1000,
            dim: 16,
            num_classes: 4,
            kind: TaskKind::Single,
            margin: 2.0,
            clusters_per_class: 1,
        }
    }
}

/// Gaussian class clusters (single-label) or hyperplane-thresholded
/// correlated label vectors (multi-label).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::data("need at least two classes"));
    }
    if spec.dim == 0 {
        return Err(Error::data("need at least one feature"));
    }
    if spec.clusters_per_class == 0 {
        return Err(Error::data("need at least one cluster per class"));
    }
    let root = Rng::new(spec.seed);
    let (n, d, c) = (spec.n_samples, spec.dim, spec.num_classes);
    let m = match spec.kind {
        TaskKind::Single => spec.clusters_per_class,
        TaskKind::Multi => 1,
    };
    let mut directions = rng_normal(&mut root.split("directions"), c * m, d, 1.0);
    for k in 0..c * m {
        let norm = directions.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        directions.row_mut(k).iter_mut().for_each(|v| *v /= norm);
    }
    let noise = rng_normal(&mut root.split("noise"), n, d, 1.0);
    match spec.kind {
        TaskKind::Single => {
            let mut lrng = root.split("labels");
            let labels: Vec<usize> = (0..n).map(|_| lrng.below(c)).collect();
            let mut crng = root.split("clusters");
            let mut features = noise;
            for (i, &y) in labels.iter().enumerate() {
                let centre = if m == 1 { y } else { y * m + crng.below(m) };
                for (x, dir) in features.row_mut(i).iter_mut().zip(directions.row(centre)) {
                    *x += spec.margin * dir;
                }
            }
            Dataset::new(features, Labels::Single(labels), c)
        }
        TaskKind::Multi => {
            let offsets: Vec<f64> = {
                let mut r = root.split("offsets");
                (0..c).map(|_| 0.5 * r.normal()).collect()
            };
            let mut targets = Matrix::zeros(n, c);
            let mut features = noise.clone();
            let push = spec.margin / (c as f64).sqrt();
            for i in 0..n {
                for k in 0..c {
                    let score: f64 = noise
                        .row(i)
                        .iter()
                        .zip(directions.row(k))
                        .map(|(x, w)| x * w)
                        .sum::<f64>()
                        - offsets[k];
                    let positive = score > 0.0;
                    targets[(i, k)] = f64::from(u8::from(positive));
                    let sign = if positive { 1.0 } else { -1.0 };
                    for (x, w) in features.row_mut(i).iter_mut().zip(directions.row(k)) {
                        *x += sign * push * w;
                    }
                }
            }
            Dataset::new(features, Labels::Multi(targets), c)
        }
    }
}

/// Per-client rotation followed by isotropic scaling, standing in for
/// modality differences between clients.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureShift {
    pub rotation: Matrix,
    pub scale: f64,
}

impl FeatureShift {
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = Rng::new(seed).split("feature-shift");
        let g = rng_normal(&mut rng, dim, dim, 1.0);
        // Gram-Schmidt on the rows.
        let mut q = Matrix::zeros(dim, dim);
        for r in 0..dim {
            let mut v = g.row(r).to_vec();
            for p in 0..r {
                let dot: f64 = v.iter().zip(q.row(p)).map(|(a, b)| a * b).sum();
                for (x, b) in v.iter_mut().zip(q.row(p)) {
                    *x -= dot * b;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (dst, x) in q.row_mut(r).iter_mut().zip(&v) {
                *dst = x / norm;
            }
        }
        let scale = 0.75 + 0.5 * rng.uniform();
        Self { rotation: q, scale }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let features = matmul(&ds.features, &self.rotation)?.scale(self.scale);
        Dataset::new(features, ds.labels.clone(), ds.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Dirichlet concentration; small values skew class proportions.
    pub concentration: f64,
    pub seed: u64,
    /// `class_masks[k]` lists the classes client `k` may receive.
    pub class_masks: Option<Vec<Vec<usize>>>,
    /// Seeds for per-client [`FeatureShift`]s.
    pub feature_shift_seeds: Option<Vec<u64>>,
    /// Draws giving any client fewer samples are repeated.
    pub min_samples: usize,
}

impl PartitionSpec {
    pub fn new(clients: usize, concentration: f64, seed: u64) -> Self {
        Self {
            clients,
            concentration,
            seed,
            class_masks: None,
            feature_shift_seeds: None,
            min_samples: 1,
        }
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

fn dirichlet(rng: &mut Rng, concentration: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::data(format!("invalid concentration {concentration}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Sample indices per client. Each class's samples are shuffled and split
/// among the clients allowed to hold it in Dirichlet-drawn proportions.
/// Draws that leave a client empty are repeated.
pub fn dirichlet_partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.clients;
    if k == 0 {
        return Err(Error::data("need at least one client"));
    }
    if k > ds.len() {
        return Err(Error::data(format!(
            "{k} clients but only {} samples",
            ds.len()
        )));
    }
    let min_samples = spec.min_samples.max(1);
    if k * min_samples > ds.len() {
        return Err(Error::data(format!(
            "{k} clients cannot each get {min_samples} of {} samples",
            ds.len()
        )));
    }
    if !(spec.concentration > 0.0) {
        return Err(Error::data("concentration must be positive"));
    }
    if let Some(masks) = &spec.class_masks {
        if masks.len() != k {
            return Err(Error::data(format!("{} class masks for {k} clients", masks.len())));
        }
    }

    let buckets = ds.num_classes + usize::from(ds.kind() == TaskKind::Multi);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); buckets];
    for i in 0..ds.len() {
        by_class[ds.primary_class(i)].push(i);
    }
    let eligible: Vec<Vec<usize>> = (0..buckets)
        .map(|c| match &spec.class_masks {
            // Multi-hot rows with no positive label may go anywhere.
            Some(masks) if c < ds.num_classes => {
                (0..k).filter(|&j| masks[j].contains(&c)).collect()
            }
            _ => (0..k).collect(),
        })
        .collect();
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && eligible[c].is_empty() {
            return Err(Error::data(format!("class {c} is in no client's mask")));
        }
    }

    let mut rng = Rng::new(spec.seed).split("dirichlet-partition");
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let owners = &eligible[c];
            let p = dirichlet(&mut rng, spec.concentration, owners.len())?;
            let n = members.len() as f64;
            let mut cum = 0.0;
            let mut start = 0usize;
            for (slot, &owner) in owners.iter().enumerate() {
                cum += p[slot];
                let end = if slot + 1 == owners.len() {
                    members.len()
                } else {
                    ((cum * n).round() as usize).clamp(start, members.len())
                };
                clients[owner].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_samples) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(clients);
        }
    }
    Err(Error::data(format!(
        "could not give every client {min_samples} samples in {MAX_PARTITION_ATTEMPTS} draws"
    )))
}

/// Client datasets in index order, with class masks and feature shifts
/// from `spec` applied.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let parts = dirichlet_partition_indices(ds, spec)?;
    if let Some(seeds) = &spec.feature_shift_seeds {
        if seeds.len() != spec.clients {
            return Err(Error::data(format!(
                "{} feature-shift seeds for {} clients",
                seeds.len(),
                spec.clients
            )));
        }
    }
    parts
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let mut client = ds.subset(idx);
            if let Some(masks) = &spec.class_masks {
                client = client.restrict_classes(&masks[k])?;
            }
            if let Some(seeds) = &spec.feature_shift_seeds {
                client = FeatureShift::from_seed(seeds[k], ds.dim()).apply(&client)?;
            }
            Ok(client)
        })
        .collect()
}

/// Largest class share of a histogram.
pub fn max_class_share(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *hist.iter().max().unwrap() as f64 / total as f64
}
