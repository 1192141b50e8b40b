//! Synthetic problem generation, CSV I/O and worker partitioning.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_NUM_CLASSES: usize = 10;

/// Label-limited allocations are redrawn at most this many times.
pub const PARTITION_RETRIES: usize = 200;

/// Row-major samples with one label per row.
///
/// `num_classes == 0` marks a regression dataset with real-valued labels;
/// otherwise labels are class indices stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    num_features: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<f64>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("m", "feature dimension must be >= 1"));
        }
        if labels.is_empty() {
            return Err(Error::invalid(
                "n",
                "dataset must contain at least one sample",
            ));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * num_features,
                actual: features.len(),
            });
        }
        if num_classes > 0 {
            if let Some(bad) = labels
                .iter()
                .find(|&&l| l.fract() != 0.0 || l < 0.0 || l >= num_classes as f64)
            {
                return Err(Error::invalid(
                    "labels",
                    format!("class label {bad} outside [0, {}]", num_classes - 1),
                ));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_classification(&self) -> bool {
        self.num_classes > 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn class(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    /// Distinct class labels present.
    pub fn class_set(&self) -> BTreeSet<usize> {
        (0..self.len()).map(|i| self.class(i)).collect()
    }

    /// Seeded shuffle split into (train, held-out) with `fraction` of rows held out.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid("holdout_fraction", "must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Partition));
        let held = (self.len() as f64 * fraction).round() as usize;
        if held >= self.len() {
            return Err(Error::invalid(
                "holdout_fraction",
                "leaves no training rows",
            ));
        }
        let (test, train) = order.split_at(held);
        Ok((self.subset(train), self.subset(test)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Linreg,
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Classification features are scaled per column, geometrically from 1
    /// down to this value, which makes the loss ill-conditioned. 1 keeps
    /// every column at unit scale.
    #[serde(default = "default_scale_min")]
    pub feature_scale_min: f64,
}

fn default_classes() -> usize {
    DEFAULT_NUM_CLASSES
}

fn default_scale_min() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize, m: usize, noise: f64) -> Self {
        SyntheticSpec {
            kind,
            n,
            m,
            noise,
            num_classes: DEFAULT_NUM_CLASSES,
            feature_scale_min: 1.0,
        }
    }

    pub fn with_feature_scale_min(mut self, scale: f64) -> Self {
        self.feature_scale_min = scale;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }
}

/// The weight vector that `Linreg` labels are drawn from.
pub fn planted_weights(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Stream::Dataset);
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draw a synthetic dataset, deterministic in `seed`.
///
/// * `Linreg`: standard-normal features, `label = planted · x + noise · N(0,1)`.
/// * `Logreg`: one Gaussian cluster per class, centres drawn from `N(0, I)`,
///   within-class spread `noise`.
/// * `Mlp`: two clusters per class, so the classes are not linearly separable
///   in general.
///
/// For both classification kinds column `j` is then multiplied by
/// `feature_scale_min^(j/(m-1))`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if spec.m == 0 {
        return Err(Error::invalid("m", "must be >= 1"));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::invalid("noise", "must be a finite value >= 0"));
    }
    if !(spec.feature_scale_min > 0.0 && spec.feature_scale_min <= 1.0) {
        return Err(Error::invalid("feature_scale_min", "must lie in (0, 1]"));
    }
    let (n, m) = (spec.n, spec.m);
    match spec.kind {
        SyntheticKind::Linreg => {
            let planted = planted_weights(m, seed);
            let mut rng = rng::stream(seed, Stream::Dataset);
            // skip the draws consumed by the planted vector
            for _ in 0..m {
                let _: f64 = rng.sample(StandardNormal);
            }
            let mut features = Vec::with_capacity(n * m);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                let eps: f64 = rng.sample(StandardNormal);
                let clean: f64 = row.iter().zip(&planted).map(|(a, b)| a * b).sum();
                labels.push(if spec.noise == 0.0 {
                    clean
                } else {
                    clean + spec.noise * eps
                });
                features.extend(row);
            }
            Dataset::new(features, labels, m, 0)
        }
        SyntheticKind::Logreg | SyntheticKind::Mlp => {
            let classes = spec.num_classes;
            if classes < 2 {
                return Err(Error::invalid(
                    "num_classes",
                    "classification needs >= 2 classes",
                ));
            }
            let per_class = if spec.kind == SyntheticKind::Mlp {
                2
            } else {
                1
            };
            let mut rng = rng::stream(seed, Stream::Dataset);
            let centres: Vec<Vec<f64>> = (0..classes * per_class)
                .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let scales: Vec<f64> = (0..m)
                .map(|j| {
                    if m == 1 || spec.feature_scale_min == 1.0 {
                        1.0
                    } else {
                        spec.feature_scale_min.powf(j as f64 / (m - 1) as f64)
                    }
                })
                .collect();
            let mut features = Vec::with_capacity(n * m);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.random_range(0..classes);
                let centre = &centres[class * per_class + rng.random_range(0..per_class)];
                for (c, s) in centre.iter().zip(&scales) {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(s * (c + spec.noise * z));
                }
                labels.push(class as f64);
            }
            Dataset::new(features, labels, m, classes)
        }
    }
}

/// Per-worker index lists into a parent dataset, keyed by `(edge, worker)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    shards: Vec<Vec<Vec<usize>>>,
}

impl ShardAssignment {
    pub fn new(shards: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if shards.is_empty() || shards.iter().any(|e| e.is_empty()) {
            return Err(Error::invalid(
                "shards",
                "every edge needs at least one worker",
            ));
        }
        if shards.iter().flatten().any(|w| w.is_empty()) {
            return Err(Error::invalid(
                "shards",
                "every worker shard must be non-empty",
            ));
        }
        let mut seen = BTreeSet::new();
        for &i in shards.iter().flatten().flatten() {
            if !seen.insert(i) {
                return Err(Error::invalid(
                    "shards",
                    format!("index {i} assigned twice"),
                ));
            }
        }
        Ok(ShardAssignment { shards })
    }

    pub fn shards(&self) -> &[Vec<Vec<usize>>] {
        &self.shards
    }

    pub fn shard(&self, edge: usize, worker: usize) -> &[usize] {
        &self.shards[edge][worker]
    }

    pub fn num_edges(&self) -> usize {
        self.shards.len()
    }

    pub fn num_workers(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// `D_{i,ℓ}` for every worker.
    pub fn sample_counts(&self) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|e| e.iter().map(Vec::len).collect())
            .collect()
    }

    /// Owned per-worker datasets.
    pub fn materialize(&self, ds: &Dataset) -> Vec<Vec<Dataset>> {
        self.shards
            .iter()
            .map(|e| e.iter().map(|idx| ds.subset(idx)).collect())
            .collect()
    }

    /// Distinct labels held by each worker.
    pub fn label_sets(&self, ds: &Dataset) -> Vec<Vec<BTreeSet<usize>>> {
        self.shards
            .iter()
            .map(|e| {
                e.iter()
                    .map(|idx| idx.iter().map(|&i| ds.class(i)).collect())
                    .collect()
            })
            .collect()
    }
}

fn check_layout(workers_per_edge: &[usize]) -> Result<usize> {
    if workers_per_edge.is_empty() {
        return Err(Error::invalid("workers_per_edge", "need at least one edge"));
    }
    if workers_per_edge.contains(&0) {
        return Err(Error::invalid(
            "workers_per_edge",
            "every edge needs >= 1 worker",
        ));
    }
    Ok(workers_per_edge.iter().sum())
}

fn regroup(flat: Vec<Vec<usize>>, workers_per_edge: &[usize]) -> Vec<Vec<Vec<usize>>> {
    let mut it = flat.into_iter();
    workers_per_edge
        .iter()
        .map(|&c| it.by_ref().take(c).collect())
        .collect()
}

/// Shuffle and split into `N` shards whose sizes differ by at most one.
///
/// Workers are numbered edge-major; the first `n mod N` workers get the extra row.
pub fn partition_iid(
    ds: &Dataset,
    workers_per_edge: &[usize],
    seed: u64,
) -> Result<ShardAssignment> {
    let workers = check_layout(workers_per_edge)?;
    let n = ds.len();
    if n < workers {
        return Err(Error::invalid(
            "n",
            format!("{n} samples cannot cover {workers} workers"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Partition));
    let (base, extra) = (n / workers, n % workers);
    let mut flat = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        flat.push(order[start..start + len].to_vec());
        start += len;
    }
    ShardAssignment::new(regroup(flat, workers_per_edge))
}

/// The x-class non-i.i.d. protocol: each worker is randomly allotted exactly
/// `classes_per_worker` distinct labels and receives only samples of those
/// labels; a class's samples are split evenly among the workers that hold it.
///
/// An allocation is redrawn when some class has fewer samples than holders;
/// classes held by nobody are left unassigned.
pub fn partition_label_limited(
    ds: &Dataset,
    workers_per_edge: &[usize],
    classes_per_worker: usize,
    seed: u64,
) -> Result<ShardAssignment> {
    let workers = check_layout(workers_per_edge)?;
    if !ds.is_classification() {
        return Err(Error::invalid(
            "dataset",
            "label-limited partition needs class labels",
        ));
    }
    let classes = ds.num_classes();
    if classes_per_worker == 0 || classes_per_worker > classes {
        return Err(Error::invalid(
            "classes_per_worker",
            format!("must lie in [1, {classes}]"),
        ));
    }
    let mut rng = rng::stream(seed, Stream::Partition);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..ds.len() {
        by_class[ds.class(i)].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut last_reason = String::new();
    for _ in 0..PARTITION_RETRIES {
        let allotted: Vec<Vec<usize>> = (0..workers)
            .map(|_| {
                let mut picked = index::sample(&mut rng, classes, classes_per_worker).into_vec();
                picked.sort_unstable();
                picked
            })
            .collect();
        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (w, set) in allotted.iter().enumerate() {
            for &c in set {
                holders[c].push(w);
            }
        }
        if let Some(c) = (0..classes).find(|&c| by_class[c].len() < holders[c].len()) {
            last_reason = format!(
                "class {c} has {} samples for {} holders",
                by_class[c].len(),
                holders[c].len()
            );
            continue;
        }
        let mut flat: Vec<Vec<usize>> = vec![Vec::new(); workers];
        for (c, hs) in holders.iter().enumerate() {
            if hs.is_empty() {
                continue;
            }
            let members = &by_class[c];
            let (base, extra) = (members.len() / hs.len(), members.len() % hs.len());
            let mut start = 0;
            for (slot, &w) in hs.iter().enumerate() {
                let len = base + usize::from(slot < extra);
                flat[w].extend_from_slice(&members[start..start + len]);
                start += len;
            }
        }
        for shard in &mut flat {
            shard.sort_unstable();
        }
        return ShardAssignment::new(regroup(flat, workers_per_edge));
    }
    Err(Error::PartitionExhausted {
        attempts: PARTITION_RETRIES,
        reason: last_reason,
    })
}

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Zero-based index of the label column.
    pub label_column: usize,
    /// 0 for regression.
    pub num_classes: usize,
    #[serde(default)]
    pub has_header: bool,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cols = record.len();
        if schema.label_column >= cols {
            return Err(Error::Parse {
                line,
                message: format!(
                    "label column {} missing ({cols} fields)",
                    schema.label_column
                ),
            });
        }
        match width {
            None => width = Some(cols),
            Some(w) if w != cols => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {cols}"),
                })
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("field {j} is not numeric: {field:?}"),
            })?;
            if j == schema.label_column {
                if schema.num_classes > 0 && (value.fract() != 0.0 || value < 0.0) {
                    return Err(Error::Parse {
                        line,
                        message: format!("class label {field:?} is not a non-negative integer"),
                    });
                }
                labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    let m = width.map_or(0, |w| w - 1);
    Dataset::new(features, labels, m, schema.num_classes)
}

/// Write with 17 significant digits so every binary64 value round-trips.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = ds.num_features() + 1;
    if schema.label_column >= width {
        return Err(Error::invalid("label_column", "beyond the last column"));
    }
    if schema.has_header {
        let names: Vec<String> = (0..width)
            .map(|j| {
                if j == schema.label_column {
                    "label".to_string()
                } else {
                    format!("x{}", j - usize::from(j > schema.label_column))
                }
            })
            .collect();
        writeln!(out, "{}", names.join(","))?;
    }
    for i in 0..ds.len() {
        let mut row = ds.row(i).iter();
        let fields: Vec<String> = (0..width)
            .map(|j| {
                if j == schema.label_column {
                    if ds.is_classification() {
                        format!("{}", ds.class(i))
                    } else {
                        format!("{:.16e}", ds.label(i))
                    }
                } else {
                    format!("{:.16e}", row.next().expect("row width"))
                }
            })
            .collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}
