//! The three-tier HierMo state machine, baseline algorithms, and the
//! virtual edge/cloud trajectories used to measure bound deviations.

use crate::datasets::{Dataset, ShardAssignment};
use crate::error::{Error, Result};
use crate::models::{Model, Objective, ShardObjective};
use crate::rng::{self, Stream};
use crate::vector::{distance, norm, ModelVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Tolerance on aggregation weight rows.
pub const WEIGHT_TOL: f64 = 1e-12;
/// Runs abort once any model coordinate exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Denominator clamp for momentum-to-gradient ratios.
pub const MU_CLAMP: f64 = 1e-12;

pub const TRACE_SCHEMA: &str = "hiermo.trace/1";

/// Workers per edge with their sample counts `D_{i,ℓ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Topology {
    counts: Vec<Vec<usize>>,
    edge_weights: Vec<f64>,
    worker_weights: Vec<Vec<f64>>,
    global_worker_weights: Vec<Vec<f64>>,
}

impl Topology {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("topology", "need at least one edge"));
        }
        if counts.iter().any(Vec::is_empty) {
            return Err(Error::invalid(
                "topology",
                "every edge needs at least one worker",
            ));
        }
        if counts.iter().flatten().any(|&c| c == 0) {
            return Err(Error::invalid(
                "topology",
                "every worker needs at least one sample",
            ));
        }
        let total: usize = counts.iter().flatten().sum();
        let edge_weights: Vec<f64> = counts
            .iter()
            .map(|e| e.iter().sum::<usize>() as f64 / total as f64)
            .collect();
        let worker_weights: Vec<Vec<f64>> = counts
            .iter()
            .map(|e| {
                let de: usize = e.iter().sum();
                e.iter().map(|&c| c as f64 / de as f64).collect()
            })
            .collect();
        let global_worker_weights = counts
            .iter()
            .map(|e| e.iter().map(|&c| c as f64 / total as f64).collect())
            .collect();
        check_weights(&edge_weights)?;
        for row in &worker_weights {
            check_weights(row)?;
        }
        Ok(Topology {
            counts,
            edge_weights,
            worker_weights,
            global_worker_weights,
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn num_edges(&self) -> usize {
        self.counts.len()
    }

    pub fn workers_in(&self, edge: usize) -> usize {
        self.counts[edge].len()
    }

    pub fn num_workers(&self) -> usize {
        self.counts.iter().map(Vec::len).sum()
    }

    pub fn edge_samples(&self, edge: usize) -> usize {
        self.counts[edge].iter().sum()
    }

    pub fn total_samples(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// `D_ℓ / D`.
    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    /// `D_{i,ℓ} / D_ℓ` for edge `ℓ`.
    pub fn worker_weights(&self, edge: usize) -> &[f64] {
        &self.worker_weights[edge]
    }

    /// `D_{i,ℓ} / D`.
    pub fn global_worker_weights(&self, edge: usize) -> &[f64] {
        &self.global_worker_weights[edge]
    }
}

impl TryFrom<Vec<Vec<usize>>> for Topology {
    type Error = Error;
    fn try_from(counts: Vec<Vec<usize>>) -> Result<Self> {
        Topology::new(counts)
    }
}

impl From<Topology> for Vec<Vec<usize>> {
    fn from(t: Topology) -> Self {
        t.counts
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::invalid(
            "weights",
            format!("must be nonnegative and sum to 1 (sum = {sum})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub eta: f64,
    pub gamma: f64,
    pub gamma_a: f64,
    pub tau: usize,
    pub pi: usize,
    #[serde(rename = "T")]
    pub t_total: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("eta", "must be a finite value > 0"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.gamma_a) {
            return Err(Error::invalid("gamma_a", "must lie in [0, 1)"));
        }
        if self.tau == 0 {
            return Err(Error::invalid("tau", "must be >= 1"));
        }
        if self.pi == 0 {
            return Err(Error::invalid("pi", "must be >= 1"));
        }
        if self.t_total == 0 {
            return Err(Error::invalid("T", "must be >= 1"));
        }
        if self.t_total % (self.tau * self.pi) != 0 {
            return Err(Error::invalid(
                "T",
                format!(
                    "{} is not a multiple of tau*pi = {}",
                    self.t_total,
                    self.tau * self.pi
                ),
            ));
        }
        Ok(())
    }

    /// Validation for `alg`; two-tier algorithms only need `T` divisible by `τ`.
    pub fn validate_for(&self, alg: AlgorithmKind) -> Result<()> {
        if alg.is_three_tier() {
            return self.validate();
        }
        let relaxed = HyperParams { pi: 1, ..*self };
        relaxed.validate()
    }

    /// Number of edge intervals `K`.
    pub fn k(&self) -> usize {
        self.t_total / self.tau
    }

    /// Number of cloud intervals `P`.
    pub fn p(&self) -> usize {
        self.t_total / (self.tau * self.pi)
    }

    /// Warning text when `βη(γ+1) > 1`.
    pub fn smoothness_warning(&self, beta: f64) -> Option<String> {
        let v = beta * self.eta * (self.gamma + 1.0);
        (v > 1.0).then(|| format!("beta*eta*(gamma+1) = {v:.6} exceeds 1"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmKind {
    HierMo,
    HierFAVG,
    FedAvg,
    FedNAG,
    ServerMomentum,
    CentralizedNAG,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 6] = [
        AlgorithmKind::HierMo,
        AlgorithmKind::HierFAVG,
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedNAG,
        AlgorithmKind::ServerMomentum,
        AlgorithmKind::CentralizedNAG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::HierMo => "HierMo",
            AlgorithmKind::HierFAVG => "HierFAVG",
            AlgorithmKind::FedAvg => "FedAvg",
            AlgorithmKind::FedNAG => "FedNAG",
            AlgorithmKind::ServerMomentum => "ServerMomentum",
            AlgorithmKind::CentralizedNAG => "CentralizedNAG",
        }
    }

    /// Whether the algorithm has separate edge and cloud aggregation.
    pub fn is_three_tier(self) -> bool {
        matches!(self, AlgorithmKind::HierMo | AlgorithmKind::HierFAVG)
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("algorithm", format!("unknown algorithm {s:?}")))
    }
}

/// Per-worker model `x`, momentum iterate `y` and velocity `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub x: ModelVector,
    pub y: ModelVector,
    pub v: ModelVector,
}

impl WorkerState {
    pub fn new(x0: &[f64]) -> Self {
        WorkerState {
            x: ModelVector::new(x0.to_vec()),
            y: ModelVector::new(x0.to_vec()),
            v: ModelVector::zeros(x0.len()),
        }
    }

    /// `y' = x − η g`, `x' = y' + γ (y' − y)`, `v' = y' − y`.
    pub fn step(&mut self, grad: &[f64], eta: f64, gamma: f64) -> Result<()> {
        if grad.len() != self.x.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.x.dim(),
                actual: grad.len(),
            });
        }
        if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                t: 0,
                what: format!("gradient coordinate {j}"),
            });
        }
        for j in 0..grad.len() {
            let y_new = self.x[j] - eta * grad[j];
            self.v[j] = y_new - self.y[j];
            self.x[j] = y_new + gamma * (y_new - self.y[j]);
            self.y[j] = y_new;
        }
        Ok(())
    }

    /// Overwrite `(x, y)` and rebase `v` so that `x = y + γ v` keeps holding.
    pub fn assign(&mut self, x: &[f64], y: &[f64], gamma: f64) {
        self.x.copy_from_slice(x);
        self.y.copy_from_slice(y);
        rebase_velocity(&self.x, &self.y, &mut self.v, gamma);
    }

    /// `max |x − y − γ v|`.
    pub fn representation_residual(&self, gamma: f64) -> f64 {
        (0..self.x.dim())
            .map(|j| (self.x[j] - self.y[j] - gamma * self.v[j]).abs())
            .fold(0.0, f64::max)
    }
}

fn rebase_velocity(x: &[f64], y: &[f64], v: &mut [f64], gamma: f64) {
    if gamma > 0.0 {
        for j in 0..v.len() {
            v[j] = (x[j] - y[j]) / gamma;
        }
    } else {
        v.fill(0.0);
    }
}

/// `v' = γ v − η g`, `x' = x + γ v' − η g`.
pub fn worker_step_vform(x: &mut [f64], v: &mut [f64], grad: &[f64], eta: f64, gamma: f64) {
    for j in 0..x.len() {
        v[j] = gamma * v[j] - eta * grad[j];
        x[j] += gamma * v[j] - eta * grad[j];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub y_minus: ModelVector,
    pub y_plus: ModelVector,
    pub x_plus: ModelVector,
}

impl EdgeState {
    pub fn new(x0: &[f64]) -> Self {
        EdgeState {
            y_minus: ModelVector::new(x0.to_vec()),
            y_plus: ModelVector::new(x0.to_vec()),
            x_plus: ModelVector::new(x0.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudState {
    pub y: ModelVector,
    pub x: ModelVector,
}

impl CloudState {
    pub fn new(x0: &[f64]) -> Self {
        CloudState {
            y: ModelVector::new(x0.to_vec()),
            x: ModelVector::new(x0.to_vec()),
        }
    }
}

/// Weighted average of the workers' models, `x_{ℓ−}`.
pub fn weighted_models(workers: &[WorkerState], weights: &[f64]) -> ModelVector {
    let dim = workers[0].x.dim();
    ModelVector::weighted_sum(
        dim,
        weights.iter().zip(workers).map(|(w, s)| (*w, &s.x[..])),
    )
}

/// Edge aggregation with edge momentum `γ_a`, then redistribution.
///
/// Returns the pre-aggregation weighted model average.
pub fn edge_round(
    workers: &mut [WorkerState],
    edge: &mut EdgeState,
    weights: &[f64],
    gamma_a: f64,
    gamma: f64,
) -> Result<ModelVector> {
    if workers.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: workers.len(),
            actual: weights.len(),
        });
    }
    check_weights(weights)?;
    let dim = edge.x_plus.dim();
    let x_minus = weighted_models(workers, weights);
    edge.y_minus = ModelVector::weighted_sum(
        dim,
        weights
            .iter()
            .zip(workers.iter())
            .map(|(w, s)| (*w, &s.y[..])),
    );
    let mut pull = ModelVector::zeros(dim);
    for (w, s) in weights.iter().zip(workers.iter()) {
        for j in 0..dim {
            pull[j] += w * (edge.x_plus[j] - s.x[j]);
        }
    }
    let mut y_plus = edge.x_plus.clone();
    y_plus.axpy(-1.0, &pull);
    for j in 0..dim {
        edge.x_plus[j] = y_plus[j] + gamma_a * (y_plus[j] - edge.y_plus[j]);
    }
    edge.y_plus = y_plus;
    for s in workers.iter_mut() {
        s.assign(&edge.x_plus, &edge.y_minus, gamma);
    }
    Ok(x_minus)
}

/// Cloud aggregation of every edge's `(y_{ℓ−}, x_{ℓ+})`, broadcast to all
/// edges and workers. `y_{ℓ+}` is left untouched.
pub fn cloud_round(
    edges: &mut [EdgeState],
    cloud: &mut CloudState,
    weights: &[f64],
    workers: &mut [Vec<WorkerState>],
    gamma: f64,
    reset: EdgeMomentumReset,
) -> Result<()> {
    if edges.len() != weights.len() || workers.len() != edges.len() {
        return Err(Error::DimensionMismatch {
            expected: edges.len(),
            actual: weights.len(),
        });
    }
    check_weights(weights)?;
    let dim = cloud.x.dim();
    cloud.y = ModelVector::weighted_sum(
        dim,
        weights
            .iter()
            .zip(edges.iter())
            .map(|(w, e)| (*w, &e.y_minus[..])),
    );
    cloud.x = ModelVector::weighted_sum(
        dim,
        weights
            .iter()
            .zip(edges.iter())
            .map(|(w, e)| (*w, &e.x_plus[..])),
    );
    for e in edges.iter_mut() {
        e.y_minus.copy_from_slice(&cloud.y);
        e.x_plus.copy_from_slice(&cloud.x);
        if reset == EdgeMomentumReset::Restart {
            e.y_plus.copy_from_slice(&cloud.x);
        }
    }
    for s in workers.iter_mut().flatten() {
        s.assign(&cloud.x, &cloud.y, gamma);
    }
    Ok(())
}

/// Local objectives arranged by topology, with an optional held-out objective
/// used only for accuracy.
#[derive(Debug, Clone)]
pub struct Problem<O> {
    workers: Vec<Vec<O>>,
    topology: Topology,
    holdout: Option<O>,
    dim: usize,
}

impl<O: Objective> Problem<O> {
    pub fn new(workers: Vec<Vec<O>>) -> Result<Self> {
        let counts = workers
            .iter()
            .map(|e| e.iter().map(Objective::num_samples).collect())
            .collect();
        let topology = Topology::new(counts)?;
        let dim = workers[0][0].dim();
        if let Some(o) = workers.iter().flatten().find(|o| o.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: o.dim(),
            });
        }
        Ok(Problem {
            workers,
            topology,
            holdout: None,
            dim,
        })
    }

    pub fn with_holdout(mut self, holdout: O) -> Result<Self> {
        if holdout.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: holdout.dim(),
            });
        }
        self.holdout = Some(holdout);
        Ok(self)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn worker(&self, edge: usize, i: usize) -> &O {
        &self.workers[edge][i]
    }

    pub fn edge_workers(&self, edge: usize) -> &[O] {
        &self.workers[edge]
    }

    pub fn holdout(&self) -> Option<&O> {
        self.holdout.as_ref()
    }

    /// `F_ℓ(x) = Σ_i (D_{i,ℓ}/D_ℓ) F_{i,ℓ}(x)`.
    pub fn edge_loss(&self, edge: usize, x: &[f64]) -> f64 {
        self.topology
            .worker_weights(edge)
            .iter()
            .zip(&self.workers[edge])
            .map(|(w, o)| w * o.loss(x))
            .sum()
    }

    /// `F(x) = Σ_ℓ (D_ℓ/D) F_ℓ(x)`.
    pub fn global_loss(&self, x: &[f64]) -> f64 {
        (0..self.topology.num_edges())
            .map(|l| self.topology.edge_weights()[l] * self.edge_loss(l, x))
            .sum()
    }

    /// Gradients of every worker objective in edge `ℓ` at `x`.
    pub fn worker_gradients(&self, edge: usize, x: &[f64]) -> Vec<ModelVector> {
        self.workers[edge]
            .iter()
            .map(|o| {
                let mut g = ModelVector::zeros(self.dim);
                o.gradient_into(x, &mut g);
                g
            })
            .collect()
    }

    pub fn edge_gradient(&self, edge: usize, x: &[f64]) -> ModelVector {
        let grads = self.worker_gradients(edge, x);
        combine(self.topology.worker_weights(edge), &grads, self.dim)
    }

    pub fn global_gradient(&self, x: &[f64]) -> ModelVector {
        let edges: Vec<ModelVector> = (0..self.topology.num_edges())
            .map(|l| self.edge_gradient(l, x))
            .collect();
        combine(self.topology.edge_weights(), &edges, self.dim)
    }

    pub fn accuracy(&self, x: &[f64]) -> Option<f64> {
        self.holdout.as_ref().and_then(|o| o.accuracy(x))
    }
}

impl Problem<ShardObjective> {
    /// Build per-worker objectives from a shard assignment of `ds`.
    pub fn from_shards(
        model: Model,
        ds: &Dataset,
        shards: &ShardAssignment,
        holdout: Option<Dataset>,
    ) -> Result<Self> {
        let workers = shards
            .materialize(ds)
            .into_iter()
            .map(|e| {
                e.into_iter()
                    .map(|d| ShardObjective::new(model, d))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let problem = Problem::new(workers)?;
        match holdout {
            Some(h) => problem.with_holdout(ShardObjective::new(model, h)?),
            None => Ok(problem),
        }
    }
}

fn combine(weights: &[f64], vs: &[ModelVector], dim: usize) -> ModelVector {
    ModelVector::weighted_sum(dim, weights.iter().zip(vs).map(|(w, v)| (*w, &v[..])))
}

/// What a cloud event does to each edge's momentum anchor `y_{ℓ+}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMomentumReset {
    /// Restart from the redistributed cloud model, as at initialization, so
    /// the first edge step of a cloud interval only extrapolates progress
    /// made inside that interval.
    #[default]
    Restart,
    /// Leave `y_{ℓ+}` untouched. The next edge step then extrapolates the
    /// cloud correction itself, which diverges for larger `π` on
    /// label-limited partitions.
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub x0: ModelVector,
    pub record_virtual: bool,
    /// Mini-batch size for worker gradients; full batch when `None`.
    pub batch_size: Option<usize>,
    pub edge_momentum_reset: EdgeMomentumReset,
}

impl RunOptions {
    pub fn new(x0: ModelVector) -> Self {
        RunOptions {
            seed: 0,
            x0,
            record_virtual: false,
            batch_size: None,
            edge_momentum_reset: EdgeMomentumReset::default(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn record_virtual(mut self, on: bool) -> Self {
        self.record_virtual = on;
        self
    }

    pub fn batch_size(mut self, b: Option<usize>) -> Self {
        self.batch_size = b;
        self
    }

    pub fn edge_momentum_reset(mut self, mode: EdgeMomentumReset) -> Self {
        self.edge_momentum_reset = mode;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    None,
    Edge,
    Cloud,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::None => "none",
            Event::Edge => "edge",
            Event::Cloud => "cloud",
        }
    }
}

impl FromStr for Event {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Event::None),
            "edge" => Ok(Event::Edge),
            "cloud" => Ok(Event::Cloud),
            other => Err(Error::invalid("event", format!("unknown event {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub event: Event,
    pub dev_edge_max: Option<f64>,
    pub dev_edge_momentum_max: Option<f64>,
    pub dev_cloud: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub t: usize,
    pub reason: String,
}

/// Deviations measured at one iteration of a virtual-recording run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualRecord {
    pub t: usize,
    /// `t − (k−1)τ`, in `1..=τ`.
    pub offset: usize,
    /// `‖x_{ℓ−}^t − x_{[k],ℓ}^t‖` per edge.
    pub edge_dev: Vec<f64>,
    /// `F_ℓ(x_{ℓ−}^t) − F_ℓ(x_{[k],ℓ}^t)` per edge.
    pub edge_loss_gap: Vec<f64>,
    /// `‖x_{ℓ+}^{kτ} − x_{ℓ−}^{kτ}‖` per edge, at edge events.
    pub edge_momentum_dev: Option<Vec<f64>>,
    /// Max-abs residual of `x_{ℓ+} − x_{ℓ−} − γ_a (x_{ℓ−} − x_{ℓ−}^{prev})` per edge.
    pub momentum_identity_residual: Option<Vec<f64>>,
    /// `‖Σ_ℓ (D_ℓ/D) x_{[pπ],ℓ} − x_{p}‖`, at cloud events.
    pub cloud_dev: Option<f64>,
}

/// Cloud-virtual iterates and their gradient norms over one cloud interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudIntervalPath {
    pub points: Vec<ModelVector>,
    pub grad_norms: Vec<f64>,
}

/// Sup-style quantities observed along the real and virtual trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryObservations {
    /// Max of `‖γ v‖ / max(‖η ∇F‖, 1e-12)` before each worker or cloud-virtual step.
    pub mu: f64,
    /// Max gradient secant ratio over paired real/virtual points.
    pub beta: f64,
    pub beta_pairs: usize,
    /// Max local gradient norm seen at any evaluated point.
    pub rho: f64,
    /// Max `‖∇F_{i,ℓ} − ∇F_ℓ‖` at edge- and cloud-virtual points.
    pub delta_by_worker: Vec<Vec<f64>>,
    /// Max `‖∇F_ℓ − ∇F‖` at cloud-virtual points.
    pub delta_edge_to_global: Vec<f64>,
    pub cloud_intervals: Vec<CloudIntervalPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualTrace {
    pub records: Vec<VirtualRecord>,
    /// Deviation right after each edge event (and at `t = 0`), per edge.
    pub interval_start_dev: Vec<Vec<f64>>,
    pub observations: TrajectoryObservations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub algorithm: AlgorithmKind,
    pub hp: HyperParams,
    pub seed: u64,
    pub records: Vec<IterRecord>,
    /// Pre-aggregation `x_{ℓ−}^t` per iteration, when virtual recording is on.
    pub edge_models: Option<Vec<Vec<ModelVector>>>,
    pub virtual_trace: Option<VirtualTrace>,
    pub diverged: Option<Divergence>,
    pub final_model: ModelVector,
}

impl RunTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.accuracy)
    }

    pub fn count_events(&self, event: Event) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let meta = TraceMeta {
            algorithm: self.algorithm,
            hp: self.hp,
            seed: self.seed,
            diverged: self.diverged.clone(),
        };
        writeln!(out, "#schema={TRACE_SCHEMA}")?;
        writeln!(out, "#meta={}", serde_json::to_string(&meta)?)?;
        writeln!(
            out,
            "t,algorithm,loss,accuracy,dev_edge_max,dev_edge_momentum_max,dev_cloud,event"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:e},{},{},{},{},{}",
                r.t,
                self.algorithm,
                r.loss,
                opt(r.accuracy),
                opt(r.dev_edge_max),
                opt(r.dev_edge_momentum_max),
                opt(r.dev_cloud),
                r.event.as_str()
            )?;
        }
        Ok(())
    }

    /// Read a trace written by [`RunTrace::write_csv`]; virtual data and the
    /// final model are not part of the file.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<RunTrace> {
        let text = std::fs::read_to_string(path)?;
        RunTrace::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<RunTrace> {
        let mut lines = text.lines();
        let schema = lines.next().unwrap_or_default();
        if schema != format!("#schema={TRACE_SCHEMA}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected schema {TRACE_SCHEMA}, found {schema:?}"),
            });
        }
        let meta_line = lines.next().unwrap_or_default();
        let meta: TraceMeta = meta_line
            .strip_prefix("#meta=")
            .ok_or_else(|| Error::Parse {
                line: 2,
                message: "missing #meta line".into(),
            })
            .and_then(|m| {
                serde_json::from_str(m).map_err(|e| Error::Parse {
                    line: 2,
                    message: e.to_string(),
                })
            })?;
        let body: String = lines.collect::<Vec<_>>().join("\n");
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line()) + 2;
            let bad = |msg: String| Error::Parse { line, message: msg };
            if row.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", row.len())));
            }
            let num = |j: usize| -> Result<Option<f64>> {
                let f = &row[j];
                if f.is_empty() {
                    return Ok(None);
                }
                f.parse()
                    .map(Some)
                    .map_err(|_| bad(format!("field {j} is not numeric: {f:?}")))
            };
            records.push(IterRecord {
                t: row[0]
                    .parse()
                    .map_err(|_| bad(format!("bad iteration {:?}", &row[0])))?,
                loss: num(2)?.ok_or_else(|| bad("missing loss".into()))?,
                accuracy: num(3)?,
                dev_edge_max: num(4)?,
                dev_edge_momentum_max: num(5)?,
                dev_cloud: num(6)?,
                event: row[7].parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(RunTrace {
            algorithm: meta.algorithm,
            hp: meta.hp,
            seed: meta.seed,
            records,
            edge_models: None,
            virtual_trace: None,
            diverged: meta.diverged,
            final_model: ModelVector::default(),
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceMeta {
    algorithm: AlgorithmKind,
    hp: HyperParams,
    seed: u64,
    diverged: Option<Divergence>,
}

/// Execute `alg` for `hp.t_total` iterations.
///
/// Two-tier algorithms ignore `π` and aggregate at the cloud every `τ`;
/// `CentralizedNAG` runs NAG on the global objective with no aggregation.
pub fn run<O: Objective>(
    alg: AlgorithmKind,
    problem: &Problem<O>,
    hp: &HyperParams,
    opts: &RunOptions,
) -> Result<RunTrace> {
    hp.validate_for(alg)?;
    if opts.x0.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            actual: opts.x0.dim(),
        });
    }
    if opts.record_virtual && !alg.is_three_tier() {
        return Err(Error::invalid(
            "record_virtual",
            format!("{alg} has no edge tier to compare against"),
        ));
    }
    if opts.batch_size == Some(0) {
        return Err(Error::invalid("batch_size", "must be >= 1"));
    }
    match alg {
        AlgorithmKind::HierMo | AlgorithmKind::HierFAVG => {
            Hierarchy::new(alg, problem, hp, opts).run()
        }
        _ => run_flat(alg, problem, hp, opts),
    }
}

/// Mini-batch rows for worker `flat_index` at iteration `t`.
fn batch_rows(seed: u64, t: usize, flat_index: usize, n: usize, b: usize) -> Vec<usize> {
    let key = ((t as u64) << 20) ^ flat_index as u64;
    let mut rng = rng::substream(seed, Stream::Batch, key);
    let mut rows = index::sample(&mut rng, n, b.min(n)).into_vec();
    rows.sort_unstable();
    rows
}

fn local_gradient<O: Objective>(
    o: &O,
    x: &[f64],
    opts: &RunOptions,
    t: usize,
    flat_index: usize,
    out: &mut [f64],
) {
    match opts.batch_size {
        Some(b) if b < o.num_samples() => {
            let rows = batch_rows(opts.seed, t, flat_index, o.num_samples(), b);
            o.minibatch_gradient_into(x, &rows, out);
        }
        _ => o.gradient_into(x, out),
    }
}

fn divergence_reason(loss: f64, model: &[f64]) -> Option<String> {
    if !loss.is_finite() {
        return Some(format!("loss is {loss}"));
    }
    let max = model.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max <= DIVERGENCE_LIMIT) {
        return Some(format!(
            "model magnitude {max:e} exceeds {DIVERGENCE_LIMIT:e}"
        ));
    }
    None
}

struct VirtualState {
    edge: Vec<WorkerState>,
    cloud: WorkerState,
    records: Vec<VirtualRecord>,
    interval_start_dev: Vec<Vec<f64>>,
    obs: TrajectoryObservations,
    current_path: CloudIntervalPath,
    prev_x_minus: Vec<ModelVector>,
}

struct Hierarchy<'a, O> {
    alg: AlgorithmKind,
    problem: &'a Problem<O>,
    hp: HyperParams,
    opts: &'a RunOptions,
    gamma: f64,
    gamma_a: f64,
    workers: Vec<Vec<WorkerState>>,
    edges: Vec<EdgeState>,
    cloud: CloudState,
    virt: Option<VirtualState>,
    edge_models: Option<Vec<Vec<ModelVector>>>,
}

impl<'a, O: Objective> Hierarchy<'a, O> {
    fn new(
        alg: AlgorithmKind,
        problem: &'a Problem<O>,
        hp: &HyperParams,
        opts: &'a RunOptions,
    ) -> Self {
        let topo = problem.topology();
        let x0 = &opts.x0;
        let (gamma, gamma_a) = match alg {
            AlgorithmKind::HierMo => (hp.gamma, hp.gamma_a),
            _ => (0.0, 0.0),
        };
        let workers = (0..topo.num_edges())
            .map(|l| vec![WorkerState::new(x0); topo.workers_in(l)])
            .collect();
        let edges = vec![EdgeState::new(x0); topo.num_edges()];
        let virt = opts.record_virtual.then(|| {
            let edge = vec![WorkerState::new(x0); topo.num_edges()];
            let cloud = WorkerState::new(x0);
            let delta_by_worker = topo.counts().iter().map(|e| vec![0.0; e.len()]).collect();
            VirtualState {
                edge,
                cloud,
                records: Vec::with_capacity(hp.t_total),
                interval_start_dev: vec![vec![0.0; topo.num_edges()]],
                obs: TrajectoryObservations {
                    mu: 0.0,
                    beta: 0.0,
                    beta_pairs: 0,
                    rho: 0.0,
                    delta_by_worker,
                    delta_edge_to_global: vec![0.0; topo.num_edges()],
                    cloud_intervals: Vec::new(),
                },
                current_path: CloudIntervalPath {
                    points: Vec::new(),
                    grad_norms: Vec::new(),
                },
                prev_x_minus: vec![x0.clone(); topo.num_edges()],
            }
        });
        Hierarchy {
            alg,
            problem,
            hp: *hp,
            opts,
            gamma,
            gamma_a,
            workers,
            edges,
            cloud: CloudState::new(x0),
            virt,
            edge_models: opts.record_virtual.then(Vec::new),
        }
    }

    fn x_minus(&self, edge: usize) -> ModelVector {
        weighted_models(
            &self.workers[edge],
            self.problem.topology().worker_weights(edge),
        )
    }

    fn global_average(&self) -> ModelVector {
        let topo = self.problem.topology();
        let dim = self.problem.dim();
        let per_edge: Vec<ModelVector> = (0..topo.num_edges()).map(|l| self.x_minus(l)).collect();
        combine(topo.edge_weights(), &per_edge, dim)
    }

    fn run(mut self) -> Result<RunTrace> {
        let hp = self.hp;
        let topo = self.problem.topology().clone();
        let dim = self.problem.dim();
        let (tau, cloud_period) = (hp.tau, hp.tau * hp.pi);
        let mut records = Vec::with_capacity(hp.t_total);
        let mut diverged = None;
        let mut grad = ModelVector::zeros(dim);

        for t in 1..=hp.t_total {
            // worker gradients at x^{t-1}
            let mut worker_grads: Vec<Vec<ModelVector>> = Vec::with_capacity(topo.num_edges());
            let mut flat = 0;
            let mut bad = None;
            for l in 0..topo.num_edges() {
                let mut grads = Vec::with_capacity(topo.workers_in(l));
                for i in 0..topo.workers_in(l) {
                    let o = self.problem.worker(l, i);
                    local_gradient(o, &self.workers[l][i].x, self.opts, t, flat, &mut grad);
                    flat += 1;
                    if bad.is_none() && !grad.is_finite() {
                        bad = Some(format!("non-finite gradient at worker ({l}, {i})"));
                    }
                    grads.push(grad.clone());
                }
                worker_grads.push(grads);
            }
            if let Some(reason) = bad {
                diverged = Some(Divergence { t, reason });
                break;
            }
            if self.virt.is_some() {
                self.observe_and_advance_virtual(&worker_grads);
            }
            for l in 0..topo.num_edges() {
                for i in 0..topo.workers_in(l) {
                    self.workers[l][i].step(&worker_grads[l][i], hp.eta, self.gamma)?;
                }
            }

            let pre: Vec<ModelVector> = (0..topo.num_edges()).map(|l| self.x_minus(l)).collect();
            let mut vrec = self.virt.as_ref().map(|v| {
                let offset = (t - 1) % tau + 1;
                let edge_dev = (0..topo.num_edges())
                    .map(|l| distance(&pre[l], &v.edge[l].x))
                    .collect();
                let edge_loss_gap = (0..topo.num_edges())
                    .map(|l| {
                        self.problem.edge_loss(l, &pre[l]) - self.problem.edge_loss(l, &v.edge[l].x)
                    })
                    .collect();
                VirtualRecord {
                    t,
                    offset,
                    edge_dev,
                    edge_loss_gap,
                    edge_momentum_dev: None,
                    momentum_identity_residual: None,
                    cloud_dev: None,
                }
            });

            let mut event = Event::None;
            if t % tau == 0 {
                event = Event::Edge;
                let mut mom_dev = Vec::with_capacity(topo.num_edges());
                let mut residual = Vec::with_capacity(topo.num_edges());
                // a restarted anchor breaks the identity across the cloud event
                let after_cloud = t > cloud_period
                    && (t - tau) % cloud_period == 0
                    && self.opts.edge_momentum_reset == EdgeMomentumReset::Restart;
                for l in 0..topo.num_edges() {
                    let w = topo.worker_weights(l);
                    match self.alg {
                        AlgorithmKind::HierMo => {
                            edge_round(
                                &mut self.workers[l],
                                &mut self.edges[l],
                                w,
                                self.gamma_a,
                                self.gamma,
                            )?;
                        }
                        _ => average_edge(&mut self.workers[l], &mut self.edges[l], w)?,
                    }
                    if let Some(v) = self.virt.as_mut() {
                        let x_plus = &self.edges[l].x_plus;
                        mom_dev.push(distance(x_plus, &pre[l]));
                        let prev = &v.prev_x_minus[l];
                        let r = (0..dim)
                            .map(|j| {
                                (x_plus[j] - pre[l][j] - self.gamma_a * (pre[l][j] - prev[j])).abs()
                            })
                            .fold(0.0, f64::max);
                        if !after_cloud {
                            residual.push(r);
                        }
                        v.prev_x_minus[l] = pre[l].clone();
                    }
                }
                if let Some(r) = vrec.as_mut() {
                    r.edge_momentum_dev = Some(mom_dev);
                    r.momentum_identity_residual = (!after_cloud).then_some(residual);
                }
            }
            if t % cloud_period == 0 {
                event = Event::Cloud;
                if let Some(v) = self.virt.as_mut() {
                    let edge_virtual: Vec<ModelVector> =
                        v.edge.iter().map(|s| s.x.clone()).collect();
                    let avg = combine(topo.edge_weights(), &edge_virtual, dim);
                    if let Some(r) = vrec.as_mut() {
                        r.cloud_dev = Some(distance(&avg, &v.cloud.x));
                    }
                }
                cloud_round(
                    &mut self.edges,
                    &mut self.cloud,
                    topo.edge_weights(),
                    &mut self.workers,
                    self.gamma,
                    self.opts.edge_momentum_reset,
                )?;
                self.close_cloud_interval();
            }
            if t % tau == 0 {
                if let Some(v) = self.virt.as_mut() {
                    let mut starts = Vec::with_capacity(topo.num_edges());
                    for l in 0..topo.num_edges() {
                        let e = &self.edges[l];
                        v.edge[l].assign(&e.x_plus, &e.y_minus, self.gamma);
                        let now = weighted_models(&self.workers[l], topo.worker_weights(l));
                        starts.push(distance(&now, &v.edge[l].x));
                    }
                    v.interval_start_dev.push(starts);
                }
            }

            if let Some(models) = self.edge_models.as_mut() {
                models.push(pre);
            }
            let avg = self.global_average();
            let loss = self.problem.global_loss(&avg);
            let accuracy = self.problem.accuracy(&avg);
            let rec = IterRecord {
                t,
                loss,
                accuracy,
                event,
                dev_edge_max: vrec.as_ref().map(|r| max_of(&r.edge_dev)),
                dev_edge_momentum_max: vrec
                    .as_ref()
                    .and_then(|r| r.edge_momentum_dev.as_deref().map(max_of)),
                dev_cloud: vrec.as_ref().and_then(|r| r.cloud_dev),
            };
            records.push(rec);
            if let (Some(v), Some(r)) = (self.virt.as_mut(), vrec) {
                v.records.push(r);
            }
            if let Some(reason) = divergence_reason(loss, &avg) {
                diverged = Some(Divergence { t, reason });
                break;
            }
        }

        let final_model = self.global_average();
        Ok(RunTrace {
            algorithm: self.alg,
            hp,
            seed: self.opts.seed,
            records,
            edge_models: self.edge_models,
            virtual_trace: self.virt.map(|v| VirtualTrace {
                records: v.records,
                interval_start_dev: v.interval_start_dev,
                observations: v.obs,
            }),
            diverged,
            final_model,
        })
    }

    /// Record observations at the current points, then advance every virtual
    /// trajectory by one NAG step.
    fn observe_and_advance_virtual(&mut self, worker_grads: &[Vec<ModelVector>]) {
        let problem = self.problem;
        let topo = problem.topology();
        let dim = problem.dim();
        let (eta, gamma) = (self.hp.eta, self.gamma);
        let full_batch = self.opts.batch_size.is_none();
        let v = self.virt.as_mut().expect("virtual state");

        for l in 0..topo.num_edges() {
            for i in 0..topo.workers_in(l) {
                let s = &self.workers[l][i];
                let g = &worker_grads[l][i];
                v.obs.mu = v.obs.mu.max(momentum_ratio(&s.v, g, eta, gamma));
                if full_batch {
                    v.obs.rho = v.obs.rho.max(g.norm());
                }
            }
        }

        // edge virtual: NAG on F_ℓ
        let mut edge_grads = Vec::with_capacity(topo.num_edges());
        for l in 0..topo.num_edges() {
            let at = v.edge[l].x.clone();
            let grads = problem.worker_gradients(l, &at);
            let ge = combine(topo.worker_weights(l), &grads, dim);
            for (i, g) in grads.iter().enumerate() {
                v.obs.rho = v.obs.rho.max(g.norm());
                let d = distance(g, &ge);
                let slot = &mut v.obs.delta_by_worker[l][i];
                *slot = slot.max(d);
                if full_batch {
                    let dx = distance(&self.workers[l][i].x, &at);
                    if dx > 0.0 {
                        v.obs.beta = v.obs.beta.max(distance(&worker_grads[l][i], g) / dx);
                        v.obs.beta_pairs += 1;
                    }
                }
            }
            edge_grads.push(ge);
        }

        // cloud virtual: NAG on F
        let at = v.cloud.x.clone();
        let cloud_edge_grads: Vec<ModelVector> = (0..topo.num_edges())
            .map(|l| {
                let grads = problem.worker_gradients(l, &at);
                let ge = combine(topo.worker_weights(l), &grads, dim);
                for (i, g) in grads.iter().enumerate() {
                    v.obs.rho = v.obs.rho.max(g.norm());
                    let slot = &mut v.obs.delta_by_worker[l][i];
                    *slot = slot.max(distance(g, &ge));
                }
                ge
            })
            .collect();
        let gc = combine(topo.edge_weights(), &cloud_edge_grads, dim);
        for l in 0..topo.num_edges() {
            let slot = &mut v.obs.delta_edge_to_global[l];
            *slot = slot.max(distance(&cloud_edge_grads[l], &gc));
            let dx = distance(&v.edge[l].x, &at);
            if dx > 0.0 {
                v.obs.beta = v
                    .obs
                    .beta
                    .max(distance(&edge_grads[l], &cloud_edge_grads[l]) / dx);
                v.obs.beta_pairs += 1;
            }
        }
        v.obs.mu = v.obs.mu.max(momentum_ratio(&v.cloud.v, &gc, eta, gamma));
        v.current_path.points.push(at);
        v.current_path.grad_norms.push(gc.norm());

        for l in 0..topo.num_edges() {
            v.edge[l]
                .step(&edge_grads[l], eta, gamma)
                .expect("edge-virtual gradient dimension");
        }
        v.cloud
            .step(&gc, eta, gamma)
            .expect("cloud-virtual gradient dimension");
    }

    /// Close the path of the finished cloud interval and reset the cloud virtual.
    fn close_cloud_interval(&mut self) {
        let problem = self.problem;
        let gamma = self.gamma;
        let Some(v) = self.virt.as_mut() else {
            return;
        };
        let end = v.cloud.x.clone();
        let g = problem.global_gradient(&end);
        v.current_path.points.push(end);
        v.current_path.grad_norms.push(g.norm());
        let path = std::mem::replace(
            &mut v.current_path,
            CloudIntervalPath {
                points: Vec::new(),
                grad_norms: Vec::new(),
            },
        );
        v.obs.cloud_intervals.push(path);
        v.cloud.assign(&self.cloud.x, &self.cloud.y, gamma);
    }
}

fn momentum_ratio(v: &[f64], g: &[f64], eta: f64, gamma: f64) -> f64 {
    gamma * norm(v) / (eta * norm(g)).max(MU_CLAMP)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Plain weighted averaging of worker models for HierFAVG.
fn average_edge(workers: &mut [WorkerState], edge: &mut EdgeState, weights: &[f64]) -> Result<()> {
    check_weights(weights)?;
    let avg = weighted_models(workers, weights);
    edge.y_minus.copy_from_slice(&avg);
    edge.y_plus.copy_from_slice(&avg);
    edge.x_plus.copy_from_slice(&avg);
    for s in workers.iter_mut() {
        s.assign(&avg, &avg, 0.0);
    }
    Ok(())
}

/// FedAvg, FedNAG, ServerMomentum and CentralizedNAG.
fn run_flat<O: Objective>(
    alg: AlgorithmKind,
    problem: &Problem<O>,
    hp: &HyperParams,
    opts: &RunOptions,
) -> Result<RunTrace> {
    let topo = problem.topology();
    let dim = problem.dim();
    let weights: Vec<f64> = (0..topo.num_edges())
        .flat_map(|l| topo.global_worker_weights(l).to_vec())
        .collect();
    let objectives: Vec<&O> = (0..topo.num_edges())
        .flat_map(|l| problem.edge_workers(l).iter())
        .collect();
    let n = if alg == AlgorithmKind::CentralizedNAG {
        1
    } else {
        objectives.len()
    };
    let gamma = match alg {
        AlgorithmKind::FedNAG | AlgorithmKind::CentralizedNAG => hp.gamma,
        _ => 0.0,
    };
    let mut workers = vec![WorkerState::new(&opts.x0); n];
    let mut server = opts.x0.clone();
    let mut server_m = ModelVector::zeros(dim);
    let mut grad = ModelVector::zeros(dim);
    let mut records = Vec::with_capacity(hp.t_total);
    let mut diverged = None;

    let average = |ws: &[WorkerState]| -> ModelVector {
        if ws.len() == 1 {
            ws[0].x.clone()
        } else {
            weighted_models(ws, &weights)
        }
    };

    for t in 1..=hp.t_total {
        let mut bad = None;
        for (w, s) in workers.iter_mut().enumerate() {
            if alg == AlgorithmKind::CentralizedNAG {
                grad = problem.global_gradient(&s.x);
            } else {
                local_gradient(objectives[w], &s.x, opts, t, w, &mut grad);
            }
            if !grad.is_finite() {
                bad = Some(format!("non-finite gradient at worker {w}"));
                break;
            }
            if alg == AlgorithmKind::FedNAG {
                worker_step_vform(&mut s.x, &mut s.v, &grad, hp.eta, gamma);
                for j in 0..dim {
                    s.y[j] = s.x[j] - gamma * s.v[j];
                }
            } else {
                s.step(&grad, hp.eta, gamma)?;
            }
        }
        if let Some(reason) = bad {
            diverged = Some(Divergence { t, reason });
            break;
        }

        let mut event = Event::None;
        if alg != AlgorithmKind::CentralizedNAG && t % hp.tau == 0 {
            event = Event::Cloud;
            let avg = weighted_models(&workers, &weights);
            match alg {
                AlgorithmKind::FedAvg => {
                    for s in workers.iter_mut() {
                        s.assign(&avg, &avg, 0.0);
                    }
                }
                AlgorithmKind::FedNAG => {
                    let v_avg = ModelVector::weighted_sum(
                        dim,
                        weights.iter().zip(&workers).map(|(w, s)| (*w, &s.v[..])),
                    );
                    for s in workers.iter_mut() {
                        s.x.copy_from_slice(&avg);
                        s.v.copy_from_slice(&v_avg);
                        for j in 0..dim {
                            s.y[j] = s.x[j] - gamma * s.v[j];
                        }
                    }
                }
                AlgorithmKind::ServerMomentum => {
                    for j in 0..dim {
                        server_m[j] = hp.gamma_a * server_m[j] + (avg[j] - server[j]);
                        server[j] += server_m[j];
                    }
                    for s in workers.iter_mut() {
                        s.assign(&server, &server, 0.0);
                    }
                }
                _ => unreachable!("hierarchical algorithms run elsewhere"),
            }
        }

        let avg = average(&workers);
        let loss = problem.global_loss(&avg);
        records.push(IterRecord {
            t,
            loss,
            accuracy: problem.accuracy(&avg),
            event,
            dev_edge_max: None,
            dev_edge_momentum_max: None,
            dev_cloud: None,
        });
        if let Some(reason) = divergence_reason(loss, &avg) {
            diverged = Some(Divergence { t, reason });
            break;
        }
    }

    Ok(RunTrace {
        algorithm: alg,
        hp: *hp,
        seed: opts.seed,
        records,
        edge_models: None,
        virtual_trace: None,
        diverged,
        final_model: average(&workers),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Quadratic;
    use proptest::prelude::*;

    fn quad_problem(edges: &[&[(f64, usize)]]) -> Problem<Quadratic> {
        // each worker: F_i(x) = ½ a ‖x‖² − b·x with worker-specific b
        let workers = edges
            .iter()
            .enumerate()
            .map(|(l, ws)| {
                ws.iter()
                    .enumerate()
                    .map(|(i, &(a, n))| {
                        let b = vec![(l + 1) as f64, -(i as f64) - 0.5];
                        Quadratic::diagonal(&[a, 2.0 * a], b, n).unwrap()
                    })
                    .collect()
            })
            .collect();
        Problem::new(workers).unwrap()
    }

    fn hp(eta: f64, gamma: f64, gamma_a: f64, tau: usize, pi: usize, t: usize) -> HyperParams {
        HyperParams {
            eta,
            gamma,
            gamma_a,
            tau,
            pi,
            t_total: t,
        }
    }

    #[test]
    fn scalar_vform_hand_value() {
        let (mut x, mut v) = ([1.0], [0.0]);
        worker_step_vform(&mut x, &mut v, &[1.0], 0.1, 0.9);
        assert!((v[0] + 0.1).abs() < 1e-15);
        assert!((x[0] - 0.81).abs() < 1e-15);

        let mut s = WorkerState::new(&[1.0]);
        s.step(&[1.0], 0.1, 0.9).unwrap();
        assert!((s.x[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_is_gradient_descent() {
        let mut s = WorkerState::new(&[2.0, -1.0]);
        s.step(&[0.5, 1.0], 0.1, 0.0).unwrap();
        assert_eq!(&s.x[..], &[2.0 - 0.05, -1.0 - 0.1]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = WorkerState::new(&[0.0]);
        assert!(matches!(
            s.step(&[f64::NAN], 0.1, 0.5),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn single_worker_edge_round_is_identity_without_edge_momentum() {
        let mut w = vec![WorkerState::new(&[1.0, 2.0])];
        w[0].step(&[0.3, -0.2], 0.1, 0.5).unwrap();
        let before = w[0].clone();
        let mut e = EdgeState::new(&[1.0, 2.0]);
        edge_round(&mut w, &mut e, &[1.0], 0.0, 0.5).unwrap();
        for j in 0..2 {
            assert!((w[0].x[j] - before.x[j]).abs() < 1e-15);
            assert_eq!(w[0].y[j], before.y[j]);
        }
    }

    #[test]
    fn equal_weight_edge_round_averages() {
        let mut w = vec![WorkerState::new(&[0.0]), WorkerState::new(&[0.0])];
        w[0].assign(&[1.0], &[2.0], 0.5);
        w[1].assign(&[3.0], &[6.0], 0.5);
        let mut e = EdgeState::new(&[0.0]);
        edge_round(&mut w, &mut e, &[0.5, 0.5], 0.0, 0.5).unwrap();
        for s in &w {
            assert_eq!(s.x[0], 2.0);
            assert_eq!(s.y[0], 4.0);
        }
    }

    #[test]
    fn bad_weights_are_rejected() {
        let mut w = vec![WorkerState::new(&[0.0]), WorkerState::new(&[0.0])];
        let mut e = EdgeState::new(&[0.0]);
        assert!(edge_round(&mut w, &mut e, &[0.5, 0.6], 0.0, 0.5).is_err());
    }

    #[test]
    fn cloud_round_broadcasts() {
        let mut workers = vec![
            vec![WorkerState::new(&[0.0])],
            vec![WorkerState::new(&[0.0])],
        ];
        let mut edges = vec![EdgeState::new(&[1.0]), EdgeState::new(&[3.0])];
        let mut cloud = CloudState::new(&[0.0]);
        let mut kept = edges.clone();
        let mut kept_workers = workers.clone();
        cloud_round(
            &mut edges,
            &mut cloud,
            &[0.5, 0.5],
            &mut workers,
            0.5,
            EdgeMomentumReset::Restart,
        )
        .unwrap();
        assert_eq!(cloud.x[0], 2.0);
        for s in workers.iter().flatten() {
            assert_eq!(s.x[0], 2.0);
        }
        assert_eq!(edges[0].y_plus[0], 2.0);
        cloud_round(
            &mut kept,
            &mut cloud,
            &[0.5, 0.5],
            &mut kept_workers,
            0.5,
            EdgeMomentumReset::Keep,
        )
        .unwrap();
        assert_eq!(kept[0].y_plus[0], 1.0);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(hp(0.1, 0.5, 0.5, 5, 2, 100).validate().is_ok());
        assert!(hp(0.1, 0.5, 0.5, 5, 2, 101).validate().is_err());
        assert!(hp(0.0, 0.5, 0.5, 5, 2, 100).validate().is_err());
        assert!(hp(0.1, 1.0, 0.5, 5, 2, 100).validate().is_err());
        assert!(hp(0.1, 0.5, 0.5, 5, 3, 100)
            .validate_for(AlgorithmKind::FedAvg)
            .is_ok());
        assert!(hp(0.1, 0.5, 0.5, 5, 2, 100)
            .smoothness_warning(20.0)
            .is_some());
        assert!(hp(0.1, 0.5, 0.5, 5, 2, 100)
            .smoothness_warning(1.0)
            .is_none());
    }

    #[test]
    fn event_counts() {
        let p = quad_problem(&[&[(1.0, 3), (1.5, 5)], &[(0.5, 2)]]);
        let h = hp(0.05, 0.5, 0.5, 5, 2, 100);
        let tr = run(
            AlgorithmKind::HierMo,
            &p,
            &h,
            &RunOptions::new(ModelVector::zeros(2)),
        )
        .unwrap();
        assert_eq!(tr.records.len(), 100);
        assert_eq!(tr.count_events(Event::Cloud), h.p());
        assert_eq!(
            tr.count_events(Event::Edge) + tr.count_events(Event::Cloud),
            h.k()
        );
    }

    #[test]
    fn edge_momentum_identity_between_cloud_events() {
        let p = quad_problem(&[&[(1.0, 3), (1.5, 5)], &[(0.5, 2), (2.0, 4)]]);
        let h = hp(0.05, 0.6, 0.4, 3, 3, 36);
        let opts = RunOptions::new(ModelVector::new(vec![0.3, -0.7])).record_virtual(true);
        let tr = run(AlgorithmKind::HierMo, &p, &h, &opts).unwrap();
        let vt = tr.virtual_trace.unwrap();
        let mut seen = 0;
        for r in &vt.records {
            if let Some(res) = &r.momentum_identity_residual {
                seen += 1;
                assert!(res.iter().all(|&v| v < 1e-12), "t={} {res:?}", r.t);
            }
        }
        // the first edge round of every cloud interval but the first is exempt
        assert_eq!(seen, h.k() - (h.p() - 1));
    }

    #[test]
    fn kept_anchor_satisfies_identity_across_cloud_events() {
        let p = quad_problem(&[&[(1.0, 3), (1.5, 5)], &[(0.5, 2), (2.0, 4)]]);
        let h = hp(0.05, 0.6, 0.4, 3, 2, 36);
        let opts = RunOptions::new(ModelVector::new(vec![0.3, -0.7]))
            .record_virtual(true)
            .edge_momentum_reset(EdgeMomentumReset::Keep);
        let tr = run(AlgorithmKind::HierMo, &p, &h, &opts).unwrap();
        let vt = tr.virtual_trace.unwrap();
        let mut seen = 0;
        for r in &vt.records {
            if let Some(res) = &r.momentum_identity_residual {
                seen += 1;
                assert!(res.iter().all(|&v| v < 1e-12), "t={} {res:?}", r.t);
            }
        }
        assert_eq!(seen, h.k());
        assert!(vt.interval_start_dev.iter().flatten().all(|&d| d < 1e-14));
    }

    #[test]
    fn single_worker_edges_track_their_virtual() {
        let p = quad_problem(&[&[(1.0, 3)], &[(0.5, 2)]]);
        let h = hp(0.05, 0.6, 0.4, 4, 2, 32);
        let opts = RunOptions::new(ModelVector::zeros(2)).record_virtual(true);
        let tr = run(AlgorithmKind::HierMo, &p, &h, &opts).unwrap();
        for r in &tr.virtual_trace.unwrap().records {
            assert!(r.edge_dev.iter().all(|&d| d < 1e-13), "{r:?}");
        }
    }

    #[test]
    fn flat_algorithms_reject_virtual_recording() {
        let p = quad_problem(&[&[(1.0, 3)]]);
        let opts = RunOptions::new(ModelVector::zeros(2)).record_virtual(true);
        assert!(run(
            AlgorithmKind::FedAvg,
            &p,
            &hp(0.1, 0.5, 0.5, 2, 1, 4),
            &opts
        )
        .is_err());
    }

    #[test]
    fn divergence_truncates_the_trace() {
        let p = quad_problem(&[&[(1.0, 3)], &[(1.0, 3)]]);
        let h = hp(3.0, 0.5, 0.5, 2, 2, 400);
        let tr = run(
            AlgorithmKind::HierMo,
            &p,
            &h,
            &RunOptions::new(ModelVector::zeros(2)),
        )
        .unwrap();
        let d = tr.diverged.as_ref().expect("diverged");
        assert_eq!(tr.records.len(), d.t);
        assert!(tr.records.len() < 400);
    }

    #[test]
    fn trace_csv_round_trip() {
        let p = quad_problem(&[&[(1.0, 3), (1.5, 5)], &[(0.5, 2)]]);
        let h = hp(0.05, 0.5, 0.5, 2, 2, 12);
        let opts = RunOptions::new(ModelVector::zeros(2)).record_virtual(true);
        let tr = run(AlgorithmKind::HierMo, &p, &h, &opts).unwrap();
        let mut buf = Vec::new();
        tr.write_csv_to(&mut buf).unwrap();
        let back = RunTrace::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.records, tr.records);
        assert_eq!(back.hp, tr.hp);
        assert_eq!(back.algorithm, tr.algorithm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn worker_steps_keep_representation(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20),
            eta in 0.001f64..0.5,
            gamma in 0.0f64..0.99,
        ) {
            let mut s = WorkerState::new(&x);
            for g in &grads {
                s.step(g, eta, gamma).unwrap();
                prop_assert!(s.representation_residual(gamma) <= 1e-9);
            }
        }

        #[test]
        fn aggregation_outputs_are_bounded_by_inputs(
            xs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..6),
            raw in prop::collection::vec(1usize..50, 6),
        ) {
            let n = xs.len();
            let total: usize = raw[..n].iter().sum();
            let w: Vec<f64> = raw[..n].iter().map(|&c| c as f64 / total as f64).collect();
            prop_assume!((w.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_TOL);
            let mut ws: Vec<WorkerState> = xs.iter().map(|x| WorkerState::new(x)).collect();
            let bound = xs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut e = EdgeState::new(&[0.0, 0.0]);
            e.x_plus = ModelVector::new(xs[0].clone());
            e.y_plus = ModelVector::new(xs[0].clone());
            edge_round(&mut ws, &mut e, &w, 0.0, 0.5).unwrap();
            prop_assert!(e.y_minus.max_abs() <= bound * (1.0 + 1e-12));
            prop_assert!(e.x_plus.max_abs() <= bound * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn broadcast_synchrony(seed in 0u64..1000) {
            let p = quad_problem(&[&[(1.0, 3), (1.5, 5)], &[(0.5, 2), (2.0, 1)]]);
            let h = hp(0.05, 0.5, 0.3, 2, 2, 8);
            let x0 = ModelVector::new(vec![(seed % 7) as f64 - 3.0, 1.0]);
            let tr = run(AlgorithmKind::HierMo, &p, &h, &RunOptions::new(x0.clone()).seed(seed)).unwrap();
            let again = run(AlgorithmKind::HierMo, &p, &h, &RunOptions::new(x0).seed(seed)).unwrap();
            prop_assert_eq!(&tr.records, &again.records);
            prop_assert_eq!(&tr.final_model, &again.final_model);
        }
    }
}
