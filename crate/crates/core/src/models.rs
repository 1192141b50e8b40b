//! Losses and analytic gradients for the local objectives.

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::vector::ModelVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DEFAULT_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Half mean squared error, no bias term.
    LinearRegression,
    /// Softmax cross-entropy plus `λ/2 ‖params‖²`.
    LogisticRegression {
        #[serde(default = "default_l2")]
        l2: f64,
    },
    /// `tanh` hidden layer of width `hidden`, softmax cross-entropy.
    TwoLayerMlp { hidden: usize },
}

fn default_l2() -> f64 {
    DEFAULT_L2
}

impl ModelKind {
    pub fn logistic() -> Self {
        ModelKind::LogisticRegression { l2: DEFAULT_L2 }
    }
}

/// A model kind bound to its input and output sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub num_features: usize,
    pub num_classes: usize,
}

impl Model {
    pub fn new(kind: ModelKind, num_features: usize, num_classes: usize) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("m", "feature dimension must be >= 1"));
        }
        match kind {
            ModelKind::LinearRegression => {
                if num_classes != 0 {
                    return Err(Error::invalid(
                        "model",
                        "linear regression needs real labels",
                    ));
                }
            }
            ModelKind::LogisticRegression { l2 } => {
                if num_classes < 2 {
                    return Err(Error::invalid(
                        "model",
                        "logistic regression needs >= 2 classes",
                    ));
                }
                if !(l2 >= 0.0) || !l2.is_finite() {
                    return Err(Error::invalid("l2", "must be a finite value >= 0"));
                }
            }
            ModelKind::TwoLayerMlp { hidden } => {
                if num_classes < 2 {
                    return Err(Error::invalid("model", "the MLP needs >= 2 classes"));
                }
                if hidden == 0 {
                    return Err(Error::invalid("hidden", "must be >= 1"));
                }
            }
        }
        Ok(Model {
            kind,
            num_features,
            num_classes,
        })
    }

    pub fn for_dataset(kind: ModelKind, ds: &Dataset) -> Result<Self> {
        Model::new(kind, ds.num_features(), ds.num_classes())
    }

    pub fn dim(&self) -> usize {
        let (m, c) = (self.num_features, self.num_classes);
        match self.kind {
            ModelKind::LinearRegression => m,
            ModelKind::LogisticRegression { .. } => c * (m + 1),
            ModelKind::TwoLayerMlp { hidden: h } => h * (m + 1) + c * (h + 1),
        }
    }

    fn check(&self, params: &[f64], ds: &Dataset) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: params.len(),
            });
        }
        if ds.num_features() != self.num_features {
            return Err(Error::DimensionMismatch {
                expected: self.num_features,
                actual: ds.num_features(),
            });
        }
        if ds.num_classes() != self.num_classes {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "has {} classes, model expects {}",
                    ds.num_classes(),
                    self.num_classes
                ),
            ));
        }
        if ds.is_empty() {
            return Err(Error::invalid("shard", "must be non-empty"));
        }
        Ok(())
    }

    /// Initial parameters: zeros for the linear models, scaled normals for the MLP.
    pub fn init(&self, seed: u64) -> ModelVector {
        match self.kind {
            ModelKind::TwoLayerMlp { hidden } => {
                let mut rng = rng::stream(seed, Stream::Init);
                let m = self.num_features;
                let mut p = vec![0.0; self.dim()];
                let s1 = 1.0 / (m as f64).sqrt();
                let s2 = 1.0 / (hidden as f64).sqrt();
                let (w1, rest) = p.split_at_mut(hidden * m);
                for w in w1.iter_mut() {
                    *w = s1 * rng.sample::<f64, _>(StandardNormal);
                }
                let w2 = &mut rest[hidden..hidden + self.num_classes * hidden];
                for w in w2.iter_mut() {
                    *w = s2 * rng.sample::<f64, _>(StandardNormal);
                }
                ModelVector::new(p)
            }
            _ => ModelVector::zeros(self.dim()),
        }
    }

    pub fn loss(&self, params: &[f64], ds: &Dataset) -> Result<f64> {
        self.check(params, ds)?;
        Ok(self.eval(params, ds, None, None))
    }

    pub fn gradient(&self, params: &[f64], ds: &Dataset) -> Result<ModelVector> {
        self.check(params, ds)?;
        let mut g = vec![0.0; self.dim()];
        self.eval(params, ds, None, Some(&mut g));
        Ok(ModelVector::new(g))
    }

    /// Fraction of rows whose arg-max prediction equals the label; `None` for regression.
    pub fn accuracy(&self, params: &[f64], ds: &Dataset) -> Result<Option<f64>> {
        self.check(params, ds)?;
        if !ds.is_classification() {
            return Ok(None);
        }
        let mut logits = vec![0.0; self.num_classes];
        let mut hidden = vec![0.0; self.hidden_width()];
        let mut correct = 0usize;
        for i in 0..ds.len() {
            self.forward(params, ds.row(i), &mut hidden, &mut logits);
            let best = argmax(&logits);
            if best == ds.class(i) {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / ds.len() as f64))
    }

    fn hidden_width(&self) -> usize {
        match self.kind {
            ModelKind::TwoLayerMlp { hidden } => hidden,
            _ => 0,
        }
    }

    /// Logits for one row; `hidden` receives tanh activations for the MLP.
    fn forward(&self, p: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (m, c) = (self.num_features, self.num_classes);
        match self.kind {
            ModelKind::LinearRegression => logits[0] = dot(p, x),
            ModelKind::LogisticRegression { .. } => {
                let (w, b) = p.split_at(c * m);
                for k in 0..c {
                    logits[k] = b[k] + dot(&w[k * m..(k + 1) * m], x);
                }
            }
            ModelKind::TwoLayerMlp { hidden: h } => {
                let (w1, rest) = p.split_at(h * m);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot(&w1[j * m..(j + 1) * m], x)).tanh();
                }
                for k in 0..c {
                    logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    /// Mean loss over `rows` (all rows when `None`); accumulates the mean
    /// gradient into `grad` when given.
    fn eval(
        &self,
        p: &[f64],
        ds: &Dataset,
        rows: Option<&[usize]>,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let (m, c) = (self.num_features, self.num_classes);
        let count = rows.map_or(ds.len(), <[usize]>::len);
        let scale = 1.0 / count as f64;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let width = if self.kind == ModelKind::LinearRegression {
            1
        } else {
            c
        };
        let mut logits = vec![0.0; width];
        let mut hidden = vec![0.0; self.hidden_width()];
        let mut dhidden = vec![0.0; self.hidden_width()];
        let mut total = 0.0;
        for r in 0..count {
            let i = rows.map_or(r, |idx| idx[r]);
            let x = ds.row(i);
            self.forward(p, x, &mut hidden, &mut logits);
            if self.kind == ModelKind::LinearRegression {
                let err = logits[0] - ds.label(i);
                total += 0.5 * err * err;
                if let Some(g) = grad.as_deref_mut() {
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += scale * err * xj;
                    }
                }
                continue;
            }
            let label = ds.class(i);
            let lse = log_sum_exp(&logits);
            total += lse - logits[label];
            let Some(g) = grad.as_deref_mut() else {
                continue;
            };
            // logits now hold (softmax − onehot) / count
            for (k, z) in logits.iter_mut().enumerate() {
                *z = ((*z - lse).exp() - f64::from(u8::from(k == label))) * scale;
            }
            match self.kind {
                ModelKind::LogisticRegression { .. } => {
                    let (gw, gb) = g.split_at_mut(c * m);
                    for k in 0..c {
                        let d = logits[k];
                        gb[k] += d;
                        for (gj, xj) in gw[k * m..(k + 1) * m].iter_mut().zip(x) {
                            *gj += d * xj;
                        }
                    }
                }
                ModelKind::TwoLayerMlp { hidden: h } => {
                    let w2 = &p[h * (m + 1)..h * (m + 1) + c * h];
                    let (gw1, rest) = g.split_at_mut(h * m);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dhidden.fill(0.0);
                    for k in 0..c {
                        let d = logits[k];
                        gb2[k] += d;
                        for j in 0..h {
                            gw2[k * h + j] += d * hidden[j];
                            dhidden[j] += d * w2[k * h + j];
                        }
                    }
                    for j in 0..h {
                        let dz = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                        gb1[j] += dz;
                        for (gj, xj) in gw1[j * m..(j + 1) * m].iter_mut().zip(x) {
                            *gj += dz * xj;
                        }
                    }
                }
                ModelKind::LinearRegression => unreachable!(),
            }
        }
        let mut loss = total * scale;
        if let ModelKind::LogisticRegression { l2 } = self.kind {
            if l2 > 0.0 {
                loss += 0.5 * l2 * dot(p, p);
                if let Some(g) = grad.as_deref_mut() {
                    for (gj, pj) in g.iter_mut().zip(p) {
                        *gj += l2 * pj;
                    }
                }
            }
        }
        loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

/// Central differences, one pair of evaluations per coordinate.
pub fn finite_diff_gradient(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Result<ModelVector> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("step", "must be a finite value > 0"));
    }
    let mut x = params.to_vec();
    let mut g = vec![0.0; params.len()];
    for j in 0..params.len() {
        let orig = x[j];
        x[j] = orig + step;
        let up = f(&x);
        x[j] = orig - step;
        let down = f(&x);
        x[j] = orig;
        g[j] = (up - down) / (2.0 * step);
    }
    Ok(ModelVector::new(g))
}

/// A differentiable local objective `F_{i,ℓ}` as seen by the engine.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Sample count `D_{i,ℓ}`, which fixes the aggregation weights.
    fn num_samples(&self) -> usize;
    fn loss(&self, x: &[f64]) -> f64;
    fn gradient_into(&self, x: &[f64], out: &mut [f64]);
    /// Mean gradient over the given sample indices.
    fn minibatch_gradient_into(&self, x: &[f64], _rows: &[usize], out: &mut [f64]) {
        self.gradient_into(x, out);
    }
    /// Held-out style accuracy of `x`, when the objective is a classifier.
    fn accuracy(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// A model evaluated on one worker's shard.
#[derive(Debug, Clone)]
pub struct ShardObjective {
    pub model: Model,
    pub data: Dataset,
}

impl ShardObjective {
    pub fn new(model: Model, data: Dataset) -> Result<Self> {
        model.check(&vec![0.0; model.dim()], &data)?;
        Ok(ShardObjective { model, data })
    }
}

impl Objective for ShardObjective {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        self.model.eval(x, &self.data, None, None)
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        self.model.eval(x, &self.data, None, Some(out));
    }

    fn minibatch_gradient_into(&self, x: &[f64], rows: &[usize], out: &mut [f64]) {
        self.model.eval(x, &self.data, Some(rows), Some(out));
    }

    fn accuracy(&self, x: &[f64]) -> Option<f64> {
        self.model.accuracy(x, &self.data).ok().flatten()
    }
}

/// `F(x) = ½ xᵀQx − bᵀx` with symmetric `Q`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    q: Vec<f64>,
    b: Vec<f64>,
    samples: usize,
}

impl Quadratic {
    pub fn new(q: Vec<f64>, b: Vec<f64>, samples: usize) -> Result<Self> {
        let d = b.len();
        if d == 0 {
            return Err(Error::invalid("b", "dimension must be >= 1"));
        }
        if q.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                actual: q.len(),
            });
        }
        for r in 0..d {
            for c in 0..r {
                if q[r * d + c] != q[c * d + r] {
                    return Err(Error::invalid("Q", "must be symmetric"));
                }
            }
        }
        if samples == 0 {
            return Err(Error::invalid("samples", "must be >= 1"));
        }
        Ok(Quadratic { q, b, samples })
    }

    /// Diagonal `Q`.
    pub fn diagonal(diag: &[f64], b: Vec<f64>, samples: usize) -> Result<Self> {
        let d = diag.len();
        let mut q = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            q[i * d + i] = *v;
        }
        Quadratic::new(q, b, samples)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.q
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn num_samples(&self) -> usize {
        self.samples
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let d = self.b.len();
        let mut quad = 0.0;
        for r in 0..d {
            quad += x[r] * dot(&self.q[r * d..(r + 1) * d], x);
        }
        0.5 * quad - dot(&self.b, x)
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.b.len();
        for r in 0..d {
            out[r] = dot(&self.q[r * d..(r + 1) * d], x) - self.b[r];
        }
    }
}
