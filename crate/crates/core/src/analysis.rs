//! Closed-form deviation bounds, empirical constant estimation, and
//! verification of the deviation inequalities on recorded runs.

use crate::engine::{HyperParams, Problem, RunTrace, TrajectoryObservations, WorkerState};
use crate::error::{Error, Result};
use crate::models::Objective;
use crate::rng::{self, Stream};
use crate::vector::{distance, ModelVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_MU_MAX: f64 = 1e6;
/// Absolute slack allowed for floating-point noise when checking inequalities.
pub const VERIFY_ABS_TOL: f64 = 1e-12;

/// Roots and coefficients of the worker/edge gap recurrence for given `(η, β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub eta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub i: f64,
    pub j: f64,
    pub u: f64,
    pub v: f64,
}

/// Requires `η > 0`, `β > 0` and `0 < γ < 1`.
pub fn characteristic_roots(eta: f64, beta: f64, gamma: f64) -> Result<BoundConstants> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::invalid("eta", "must be a finite value > 0"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta", "must be a finite value > 0"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma", "must lie in (0, 1)"));
    }
    let eb = eta * beta;
    let s = (1.0 + eb) * (1.0 + gamma);
    let disc = s * s - 4.0 * gamma * (1.0 + eb);
    let a = (s + disc.sqrt()) / (2.0 * gamma);
    // product of roots is (1+ηβ)/γ; avoids cancellation in s − √disc
    let b = (1.0 + eb) / (gamma * a);
    let i = (gamma * a + a - 1.0) / ((a - b) * (gamma * a - 1.0));
    let j = (gamma * b + b - 1.0) / ((a - b) * (1.0 - gamma * b));
    let u = (a - 1.0) / (a - b);
    let v = (1.0 - b) / (a - b);
    Ok(BoundConstants {
        eta,
        beta,
        gamma,
        a,
        b,
        i,
        j,
        u,
        v,
    })
}

impl BoundConstants {
    /// `h(x, δ)` for real `x ≥ 0`, written with `expm1` so that `h(0) = 0`
    /// exactly and small-`η` evaluations do not cancel.
    pub fn h(&self, x: f64, delta: f64) -> f64 {
        if delta == 0.0 || x == 0.0 {
            return 0.0;
        }
        let g = self.gamma;
        let ga = self.gamma * self.a;
        let gb = self.gamma * self.b;
        let poly = (g * g * (x * g.ln()).exp_m1() - (g - 1.0) * x) / ((g - 1.0) * (g - 1.0));
        self.eta
            * delta
            * (self.i * (x * ga.ln()).exp_m1() + self.j * (x * gb.ln()).exp_m1() - poly)
    }

    /// Direct transcription of `h`, kept for cross-checking [`BoundConstants::h`].
    pub fn h_literal(&self, x: f64, delta: f64) -> f64 {
        let (g, eb) = (self.gamma, self.eta * self.beta);
        self.eta
            * delta
            * (self.i * (g * self.a).powf(x) + self.j * (g * self.b).powf(x)
                - 1.0 / eb
                - (g * g * (g.powf(x) - 1.0) - (g - 1.0) * x) / ((g - 1.0) * (g - 1.0)))
    }
}

/// Edge-momentum perturbation bound `γ_a τ η ρ (γμ + γ + 1)`.
pub fn s(tau: f64, eta: f64, rho: f64, gamma: f64, gamma_a: f64, mu: f64) -> f64 {
    gamma_a * tau * eta * rho * (gamma * mu + gamma + 1.0)
}

/// Step sizes shared by every bound function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepParams {
    pub eta: f64,
    pub gamma: f64,
    pub gamma_a: f64,
}

impl From<&HyperParams> for StepParams {
    fn from(hp: &HyperParams) -> Self {
        StepParams {
            eta: hp.eta,
            gamma: hp.gamma,
            gamma_a: hp.gamma_a,
        }
    }
}

/// Measured or assumed problem constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessEstimate {
    pub rho: f64,
    pub beta: f64,
    pub delta_by_worker: Vec<Vec<f64>>,
    pub delta_by_edge: Vec<f64>,
    pub delta: f64,
    pub mu: f64,
    pub omega: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// `D_ℓ / D`, the weights used to form `δ` and `j`.
    pub edge_weights: Vec<f64>,
    #[serde(default)]
    pub provenance: EstimateProvenance,
}

/// How an estimate was obtained, so its looseness can be audited.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateProvenance {
    pub probe_points: usize,
    pub probe_pairs: usize,
    pub trajectory_pairs: usize,
    /// ω and σ are measured against an approximate optimum.
    pub omega_sigma_approximate: bool,
    pub mu_capped: bool,
}

impl SmoothnessEstimate {
    /// Assemble an estimate from `δ_{i,ℓ}` and sample counts, deriving
    /// `δ_ℓ`, `δ` and `α`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rho: f64,
        beta: f64,
        delta_by_worker: Vec<Vec<f64>>,
        counts: &[Vec<usize>],
        mu: f64,
        omega: f64,
        sigma: f64,
        step: StepParams,
    ) -> Result<Self> {
        let topo = crate::engine::Topology::new(counts.to_vec())?;
        if delta_by_worker.len() != topo.num_edges()
            || (0..topo.num_edges()).any(|l| delta_by_worker[l].len() != topo.workers_in(l))
        {
            return Err(Error::invalid(
                "delta_by_worker",
                "shape does not match the topology",
            ));
        }
        let delta_by_edge: Vec<f64> = (0..topo.num_edges())
            .map(|l| weighted(topo.worker_weights(l), &delta_by_worker[l]))
            .collect();
        let delta = weighted(topo.edge_weights(), &delta_by_edge);
        Ok(SmoothnessEstimate {
            rho,
            beta,
            delta_by_worker,
            delta_by_edge,
            delta,
            mu,
            omega,
            sigma,
            alpha: alpha(step.eta, step.gamma, beta, mu),
            edge_weights: topo.edge_weights().to_vec(),
            provenance: EstimateProvenance::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rho", self.rho),
            ("beta", self.beta),
            ("delta", self.delta),
            ("mu", self.mu),
            ("omega", self.omega),
            ("sigma", self.sigma),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, "must be a finite value >= 0"));
            }
        }
        if self.delta_by_edge.len() != self.edge_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.edge_weights.len(),
                actual: self.delta_by_edge.len(),
            });
        }
        let sum: f64 = self.edge_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "edge_weights",
                format!("sum to {sum}, not 1"),
            ));
        }
        Ok(())
    }

    /// `ωασ²`.
    pub fn curvature(&self) -> f64 {
        self.omega * self.alpha * self.sigma * self.sigma
    }
}

fn weighted(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `α = η(γ+1)(1 − βη(γ+1)/2) − βη²γ²μ²/2 − ηγμ(1 − βη(γ+1))`.
pub fn alpha(eta: f64, gamma: f64, beta: f64, mu: f64) -> f64 {
    let c = beta * eta * (gamma + 1.0);
    eta * (gamma + 1.0) * (1.0 - c / 2.0)
        - beta * eta * eta * gamma * gamma * mu * mu / 2.0
        - eta * gamma * mu * (1.0 - c)
}

/// `j = h(τπ, δ) + (π+1) Σ_ℓ (D_ℓ/D)(h(τ, δ_ℓ) + s(τ))`, with real `τ, π`.
pub fn j(tau: f64, pi: f64, est: &SmoothnessEstimate, step: StepParams) -> Result<f64> {
    let c = characteristic_roots(step.eta, est.beta, step.gamma)?;
    let s_tau = s(tau, step.eta, est.rho, step.gamma, step.gamma_a, est.mu);
    let edge: f64 = est
        .edge_weights
        .iter()
        .zip(&est.delta_by_edge)
        .map(|(w, d)| w * (c.h(tau, *d) + s_tau))
        .sum();
    Ok(c.h(tau * pi, est.delta) + (pi + 1.0) * edge)
}

/// Cloud-level deviation bound `h(τπ, δ) + π Σ_ℓ (D_ℓ/D)(h(τ, δ_ℓ) + s(τ))`.
pub fn cloud_deviation_bound(
    tau: f64,
    pi: f64,
    est: &SmoothnessEstimate,
    step: StepParams,
) -> Result<f64> {
    let c = characteristic_roots(step.eta, est.beta, step.gamma)?;
    let s_tau = s(tau, step.eta, est.rho, step.gamma, step.gamma_a, est.mu);
    let edge: f64 = est
        .edge_weights
        .iter()
        .zip(&est.delta_by_edge)
        .map(|(w, d)| w * (c.h(tau, *d) + s_tau))
        .sum();
    Ok(c.h(tau * pi, est.delta) + pi * edge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBound {
    /// `f_HierMo(T)`.
    pub value: f64,
    /// Positive root `ε₀`; the bound equals `ε₀ + ρj`.
    pub epsilon0: f64,
    pub rho_j: f64,
    /// `1 / (2Tωασ²)`.
    pub q: f64,
}

/// `f_HierMo(T)` with real-valued `T`, `τ`, `π`.
pub fn f_hiermo(
    t_total: f64,
    tau: f64,
    pi: f64,
    est: &SmoothnessEstimate,
    step: StepParams,
) -> Result<ConvergenceBound> {
    let curv = est.curvature();
    if !(curv > 0.0) || !curv.is_finite() {
        return Err(Error::invalid(
            "omega*alpha*sigma^2",
            format!("must be positive, got {curv}"),
        ));
    }
    if !(t_total > 0.0) {
        return Err(Error::invalid("T", "must be > 0"));
    }
    let rho_j = est.rho * j(tau, pi, est, step)?;
    let q = 1.0 / (2.0 * t_total * curv);
    let epsilon0 = q + (q * q + rho_j / (curv * tau * pi)).sqrt();
    Ok(ConvergenceBound {
        value: epsilon0 + rho_j,
        epsilon0,
        rho_j,
        q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub num_points: usize,
    pub radius: f64,
    pub seed: u64,
}

/// Inputs of [`estimate_constants`] beyond the problem itself.
#[derive(Debug, Clone)]
pub struct EstimateInputs<'a> {
    pub probe: ProbeSpec,
    /// Probe points are drawn as `center + radius · z / √d`.
    pub center: &'a [f64],
    /// Observations from a virtual-recording run, merged as suprema.
    pub trajectory: Option<&'a TrajectoryObservations>,
    /// Stationary-point proxy for ω.
    pub x_star: Option<&'a [f64]>,
    pub step: StepParams,
    pub mu_max: f64,
}

/// Empirical suprema of the smoothness and divergence constants.
pub fn estimate_constants<O: Objective>(
    problem: &Problem<O>,
    inputs: &EstimateInputs<'_>,
) -> Result<SmoothnessEstimate> {
    let topo = problem.topology();
    let dim = problem.dim();
    if inputs.center.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: inputs.center.len(),
        });
    }
    let probe = inputs.probe;
    if probe.num_points < 2 {
        return Err(Error::invalid("probe.num_points", "need at least 2 points"));
    }
    if !(probe.radius >= 0.0) || !probe.radius.is_finite() {
        return Err(Error::invalid(
            "probe.radius",
            "must be a finite value >= 0",
        ));
    }

    let mut rng = rng::stream(probe.seed, Stream::Probe);
    let scale = probe.radius / (dim as f64).sqrt();
    let points: Vec<ModelVector> = (0..probe.num_points)
        .map(|_| {
            ModelVector::new(
                inputs
                    .center
                    .iter()
                    .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        })
        .collect();

    let mut beta: f64 = 0.0;
    let mut rho: f64 = 0.0;
    let mut pairs = 0usize;
    let mut delta_by_worker: Vec<Vec<f64>> =
        topo.counts().iter().map(|e| vec![0.0; e.len()]).collect();
    for l in 0..topo.num_edges() {
        // grads[p][i]: gradient of worker i at probe p
        let grads: Vec<Vec<ModelVector>> = points
            .iter()
            .map(|x| problem.worker_gradients(l, x))
            .collect();
        for gp in &grads {
            let ge = ModelVector::weighted_sum(
                dim,
                topo.worker_weights(l)
                    .iter()
                    .zip(gp)
                    .map(|(w, g)| (*w, &g[..])),
            );
            for (i, g) in gp.iter().enumerate() {
                rho = rho.max(g.norm());
                delta_by_worker[l][i] = delta_by_worker[l][i].max(distance(g, &ge));
            }
        }
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                let dx = distance(&points[a], &points[b]);
                if dx == 0.0 {
                    continue;
                }
                for i in 0..topo.workers_in(l) {
                    beta = beta.max(distance(&grads[a][i], &grads[b][i]) / dx);
                }
                if l == 0 {
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Missing(
            "every probe pair had zero displacement".to_string(),
        ));
    }

    let mut mu = 0.0;
    let mut omega = 0.0;
    let mut sigma = 0.0;
    let mut trajectory_pairs = 0;
    let mut approximate = false;
    if let Some(obs) = inputs.trajectory {
        beta = beta.max(obs.beta);
        rho = rho.max(obs.rho);
        trajectory_pairs = obs.beta_pairs;
        mu = obs.mu;
        for (row, seen) in delta_by_worker.iter_mut().zip(&obs.delta_by_worker) {
            for (d, o) in row.iter_mut().zip(seen) {
                *d = d.max(*o);
            }
        }
        if !obs.cloud_intervals.is_empty() {
            sigma = obs
                .cloud_intervals
                .iter()
                .map(|p| {
                    let lo = p.grad_norms.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = p.grad_norms.iter().copied().fold(0.0, f64::max);
                    if hi > 0.0 {
                        lo / hi
                    } else {
                        1.0
                    }
                })
                .fold(f64::INFINITY, f64::min);
        }
        if let Some(x_star) = inputs.x_star {
            approximate = true;
            let far = obs
                .cloud_intervals
                .iter()
                .flat_map(|p| p.points.iter())
                .map(|x| distance(x, x_star))
                .fold(0.0, f64::max);
            omega = if far > 0.0 { 1.0 / (far * far) } else { 0.0 };
        }
    }
    let mu_capped = mu > inputs.mu_max;
    let mu = mu.min(inputs.mu_max);

    let mut est = SmoothnessEstimate::from_parts(
        rho,
        beta,
        delta_by_worker,
        topo.counts(),
        mu,
        omega,
        sigma,
        inputs.step,
    )?;
    est.provenance = EstimateProvenance {
        probe_points: probe.num_points,
        probe_pairs: pairs,
        trajectory_pairs,
        omega_sigma_approximate: approximate,
        mu_capped,
    };
    Ok(est)
}

/// Best iterate (by global loss) of a centralized NAG run; stands in for `x*`.
pub fn stationary_proxy<O: Objective>(
    problem: &Problem<O>,
    x0: &[f64],
    eta: f64,
    gamma: f64,
    iters: usize,
) -> Result<(ModelVector, f64)> {
    let mut state = WorkerState::new(x0);
    let mut best = (state.x.clone(), problem.global_loss(x0));
    for t in 1..=iters {
        let g = problem.global_gradient(&state.x);
        state.step(&g, eta, gamma).map_err(|_| Error::NonFinite {
            t,
            what: "gradient of the reference run".into(),
        })?;
        let loss = problem.global_loss(&state.x);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                t,
                what: "loss of the reference run".into(),
            });
        }
        if loss < best.1 {
            best = (state.x.clone(), loss);
        }
    }
    Ok(best)
}

/// One inequality family checked over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub checked: usize,
    pub max_lhs: f64,
    /// Bound value at the instant with the smallest slack.
    pub bound: f64,
    /// Smallest `bound − lhs` over all checked instants.
    pub slack: f64,
    pub pass: bool,
    /// Iteration with the smallest slack.
    pub tightest_t: usize,
}

impl InequalityCheck {
    fn new() -> Self {
        InequalityCheck {
            checked: 0,
            max_lhs: 0.0,
            bound: f64::INFINITY,
            slack: f64::INFINITY,
            pass: true,
            tightest_t: 0,
        }
    }

    fn add(&mut self, t: usize, lhs: f64, bound: f64) {
        self.checked += 1;
        self.max_lhs = self.max_lhs.max(lhs);
        let slack = bound - lhs;
        if slack < self.slack {
            self.slack = slack;
            self.bound = bound;
            self.tightest_t = t;
        }
        if !(lhs <= bound + VERIFY_ABS_TOL + 1e-9 * bound.abs()) {
            self.pass = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub version: u32,
    pub hp: HyperParams,
    /// Worker model vs edge virtual, per instant inside each edge interval.
    pub edge_virtual_gap: InequalityCheck,
    /// Edge loss gap against `ρ · h`.
    pub edge_loss_gap: InequalityCheck,
    /// Edge momentum displacement against `s(τ)`.
    pub edge_momentum: InequalityCheck,
    /// Averaged edge virtuals vs cloud virtual at cloud events.
    pub cloud_virtual_gap: InequalityCheck,
    /// Largest deviation right after an edge aggregation (ideally 0).
    pub interval_start_max: f64,
    /// Largest residual of the edge-momentum telescoping identity.
    pub momentum_identity_max: f64,
    pub alpha_positive: bool,
    pub convergence: Option<ConvergenceBound>,
    pub estimate: SmoothnessEstimate,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.edge_virtual_gap.pass
            && self.edge_loss_gap.pass
            && self.edge_momentum.pass
            && self.cloud_virtual_gap.pass
    }
}

/// Check every recorded deviation against its bound.
pub fn verify_theorems(trace: &RunTrace, est: &SmoothnessEstimate) -> Result<BoundReport> {
    let vt = trace
        .virtual_trace
        .as_ref()
        .ok_or_else(|| Error::Missing("the trace was run without virtual recording".to_string()))?;
    est.validate()?;
    let hp = trace.hp;
    let step = StepParams::from(&hp);
    let consts = characteristic_roots(hp.eta, est.beta, hp.gamma)?;
    let tau = hp.tau as f64;
    let pi = hp.pi as f64;
    let s_tau = s(tau, hp.eta, est.rho, hp.gamma, hp.gamma_a, est.mu);
    let cloud_bound = cloud_deviation_bound(tau, pi, est, step)?;
    if est.delta_by_edge.len() != vt.interval_start_dev[0].len() {
        return Err(Error::DimensionMismatch {
            expected: vt.interval_start_dev[0].len(),
            actual: est.delta_by_edge.len(),
        });
    }

    let mut edge_gap = InequalityCheck::new();
    let mut loss_gap = InequalityCheck::new();
    let mut momentum = InequalityCheck::new();
    let mut cloud = InequalityCheck::new();
    let mut identity: f64 = 0.0;
    for r in &vt.records {
        for (l, d) in r.edge_dev.iter().enumerate() {
            let h = consts.h(r.offset as f64, est.delta_by_edge[l]);
            edge_gap.add(r.t, *d, h);
            loss_gap.add(r.t, r.edge_loss_gap[l], est.rho * h);
        }
        if let Some(devs) = &r.edge_momentum_dev {
            for d in devs {
                momentum.add(r.t, *d, s_tau);
            }
        }
        if let Some(res) = &r.momentum_identity_residual {
            identity = res.iter().copied().fold(identity, f64::max);
        }
        if let Some(d) = r.cloud_dev {
            cloud.add(r.t, d, cloud_bound);
        }
    }

    let mut warnings = Vec::new();
    if let Some(w) = hp.smoothness_warning(est.beta) {
        warnings.push(w);
    }
    if est.provenance.mu_capped {
        warnings.push("mu reached its cap".to_string());
    }
    if est.provenance.omega_sigma_approximate {
        warnings.push("omega and sigma are measured against an approximate optimum".to_string());
    }
    let alpha_positive = est.alpha > 0.0;
    if !alpha_positive {
        warnings.push(format!("alpha = {:e} is not positive", est.alpha));
    }
    let convergence = f_hiermo(hp.t_total as f64, tau, pi, est, step).ok();
    if convergence.is_none() {
        warnings.push("convergence bound unavailable: omega*alpha*sigma^2 <= 0".to_string());
    }
    Ok(BoundReport {
        version: REPORT_VERSION,
        hp,
        edge_virtual_gap: edge_gap,
        edge_loss_gap: loss_gap,
        edge_momentum: momentum,
        cloud_virtual_gap: cloud,
        interval_start_max: vt
            .interval_start_dev
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max),
        momentum_identity_max: identity,
        alpha_positive,
        convergence,
        estimate: est.clone(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub eta: f64,
    pub h: f64,
    /// `h` relative to the previous row; `None` on the first row.
    pub ratio: Option<f64>,
}

/// `h(τ, δ)` along a decreasing sequence of learning rates.
pub fn momentum_gain_limit(
    etas: &[f64],
    beta: f64,
    gamma: f64,
    delta: f64,
    tau: usize,
) -> Result<Vec<GainRow>> {
    if etas.is_empty() {
        return Err(Error::invalid("eta_sequence", "must be non-empty"));
    }
    if etas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid(
            "eta_sequence",
            "must be strictly decreasing",
        ));
    }
    let mut rows: Vec<GainRow> = Vec::with_capacity(etas.len());
    for &eta in etas {
        let h = characteristic_roots(eta, beta, gamma)?.h(tau as f64, delta);
        let ratio = rows.last().map(|p| h / p.h);
        rows.push(GainRow { eta, h, ratio });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, AlgorithmKind, RunOptions};
    use crate::models::Quadratic;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Gap bounds propagated step by step: worker momentum gap `a`, worker
    /// model gap `e`, and the edge-level pair `(g, big_e)` driven by `e`.
    fn h_by_recurrence(x: usize, eta: f64, beta: f64, gamma: f64, delta: f64) -> f64 {
        let (mut a, mut e) = (0.0, 0.0);
        let (mut g, mut big_e) = (0.0, 0.0);
        for _ in 0..x {
            let e_prev = e;
            a = gamma * a + eta * beta * e + eta * delta;
            e = e + gamma * a + eta * beta * e + eta * delta;
            g = gamma * g + eta * beta * e_prev;
            big_e = big_e + gamma * g + eta * beta * e_prev;
        }
        big_e
    }

    /// Sum of the per-step increments of `h`.
    fn h_by_increments(x: usize, c: &BoundConstants, delta: f64) -> f64 {
        let (g, a, b) = (c.gamma, c.a, c.b);
        (1..=x)
            .map(|k| {
                let k = k as f64;
                c.eta
                    * delta
                    * (c.u * (g * a).powf(k - 1.0) * (g * a + a - 1.0) / (a - 1.0)
                        + c.v * (g * b).powf(k - 1.0) * (g * b + b - 1.0) / (b - 1.0)
                        - ((g).powf(k + 1.0) - 1.0) / (g - 1.0))
            })
            .sum()
    }

    #[test]
    fn roots_solve_the_quadratic() {
        let (eta, beta, gamma) = (0.01, 1.0, 0.5);
        let c = characteristic_roots(eta, beta, gamma).unwrap();
        let eb = eta * beta;
        for r in [c.a, c.b] {
            let q = gamma * r * r - (1.0 + eb + eb * gamma + gamma) * r + eb + 1.0;
            assert!(q.abs() < 1e-9, "{q}");
        }
    }

    #[test]
    fn roots_reject_bad_ranges() {
        assert!(characteristic_roots(0.0, 1.0, 0.5).is_err());
        assert!(characteristic_roots(0.1, 0.0, 0.5).is_err());
        assert!(characteristic_roots(0.1, 1.0, 0.0).is_err());
        assert!(characteristic_roots(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn small_eta_limits() {
        for eta in [1e-3, 1e-4, 1e-5] {
            let c = characteristic_roots(eta, 1.0, 0.5).unwrap();
            assert!((0.5 * c.a - 1.0).abs() < 10.0 * eta);
            assert!((0.5 * c.b - 0.5).abs() < 10.0 * eta);
        }
    }

    #[test]
    fn h_matches_recurrence_and_increment_oracles() {
        for &(eta, beta, gamma, delta) in &[
            (0.01, 1.0, 0.5, 1.0),
            (0.05, 3.0, 0.9, 0.3),
            (0.2, 0.5, 0.2, 2.0),
            (1e-4, 10.0, 0.7, 1.0),
        ] {
            let c = characteristic_roots(eta, beta, gamma).unwrap();
            for x in 0..40 {
                let h = c.h(x as f64, delta);
                let by_rec = h_by_recurrence(x, eta, beta, gamma, delta);
                let by_inc = h_by_increments(x, &c, delta);
                let scale = h.abs().max(eta * delta * 1e-6);
                assert!((h - by_rec).abs() <= 1e-8 * scale, "x={x}: {h} vs {by_rec}");
                assert!((h - by_inc).abs() <= 1e-6 * scale, "x={x}: {h} vs {by_inc}");
            }
        }
    }

    #[test]
    fn stable_and_literal_h_agree() {
        let c = characteristic_roots(0.05, 2.0, 0.6).unwrap();
        for x in 1..30 {
            let (a, b) = (c.h(x as f64, 1.0), c.h_literal(x as f64, 1.0));
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-3), "x={x}: {a} {b}");
        }
    }

    #[test]
    fn s_values() {
        assert_eq!(s(3.0, 0.1, 2.0, 0.5, 0.0, 1.0), 0.0);
        assert!((s(1.0, 0.01, 1.0, 0.5, 0.5, 1.0) - 0.01).abs() < 1e-15);
        let one = s(4.0, 0.03, 1.5, 0.7, 0.4, 2.0);
        assert!((s(8.0, 0.03, 1.5, 0.7, 0.4, 2.0) - 2.0 * one).abs() < 1e-15);
    }

    fn est(delta_edge: Vec<f64>, weights: Vec<f64>, delta: f64) -> SmoothnessEstimate {
        SmoothnessEstimate {
            rho: 2.0,
            beta: 1.5,
            delta_by_worker: delta_edge.iter().map(|d| vec![*d]).collect(),
            delta_by_edge: delta_edge,
            delta,
            mu: 1.0,
            omega: 0.5,
            sigma: 0.8,
            alpha: alpha(0.01, 0.5, 1.5, 1.0),
            edge_weights: weights,
            provenance: EstimateProvenance::default(),
        }
    }

    #[test]
    fn j_edge_cases_and_composition() {
        let step = StepParams {
            eta: 0.01,
            gamma: 0.5,
            gamma_a: 0.0,
        };
        let e = est(vec![0.4, 0.8], vec![0.25, 0.75], 0.7);
        assert!(j(1.0, 1.0, &e, step).unwrap().abs() < 1e-12);

        let step = StepParams {
            gamma_a: 0.3,
            ..step
        };
        let c = characteristic_roots(0.01, 1.5, 0.5).unwrap();
        let st = s(4.0, 0.01, 2.0, 0.5, 0.3, 1.0);
        let by_hand =
            c.h(12.0, 0.7) + 4.0 * (0.25 * (c.h(4.0, 0.4) + st) + 0.75 * (c.h(4.0, 0.8) + st));
        assert!(rel(j(4.0, 3.0, &e, step).unwrap(), by_hand) < 1e-12);

        let zero = est(vec![0.0, 0.0], vec![0.5, 0.5], 0.0);
        let off = StepParams {
            gamma_a: 0.0,
            ..step
        };
        for tau in 1..10 {
            assert_eq!(j(tau as f64, 3.0, &zero, off).unwrap(), 0.0);
        }
    }

    #[test]
    fn j_grows_with_tau_and_pi() {
        let step = StepParams {
            eta: 0.02,
            gamma: 0.6,
            gamma_a: 0.4,
        };
        let e = est(vec![0.5, 1.0], vec![0.5, 0.5], 0.75);
        for tau in 1..20 {
            for pi in 1..8 {
                let here = j(tau as f64, pi as f64, &e, step).unwrap();
                assert!(j(tau as f64 + 1.0, pi as f64, &e, step).unwrap() >= here);
                assert!(j(tau as f64, pi as f64 + 1.0, &e, step).unwrap() >= here);
            }
        }
    }

    #[test]
    fn f_bound_root_identity_and_degenerate_case() {
        let step = StepParams {
            eta: 0.01,
            gamma: 0.5,
            gamma_a: 0.3,
        };
        let e = est(vec![0.4, 0.8], vec![0.25, 0.75], 0.7);
        let (t, tau, pi) = (200.0, 5.0, 2.0);
        let f = f_hiermo(t, tau, pi, &e, step).unwrap();
        let curv = e.curvature();
        // ε₀ solves ε = 1 / (T (c − ρj / (τπ ε²)))
        let rhs = 1.0 / (t * (curv - f.rho_j / (tau * pi * f.epsilon0 * f.epsilon0)));
        assert!(rel(f.epsilon0, rhs) < 1e-10);
        assert!(rel(f.value, f.epsilon0 + f.rho_j) < 1e-15);

        let zero = est(vec![0.0, 0.0], vec![0.5, 0.5], 0.0);
        let off = StepParams {
            gamma_a: 0.0,
            ..step
        };
        let f0 = f_hiermo(t, tau, pi, &zero, off).unwrap();
        assert!(rel(f0.value, 1.0 / (t * zero.curvature())) < 1e-14);

        let mut prev = f64::INFINITY;
        for t in [10.0, 50.0, 100.0, 1000.0] {
            let v = f_hiermo(t, tau, pi, &e, step).unwrap().value;
            assert!(v < prev);
            prev = v;
        }

        let mut bad = e.clone();
        bad.alpha = -1.0;
        assert!(f_hiermo(t, tau, pi, &bad, step).is_err());
    }

    #[test]
    fn gain_limit_table() {
        let rows = momentum_gain_limit(&[1e-2, 1e-3, 1e-4, 1e-6], 1.0, 0.5, 1.0, 10).unwrap();
        assert!(rows.windows(2).all(|w| w[1].h < w[0].h));
        assert!(rows[3].h < 1e-3 * rows[0].h);
        assert!(momentum_gain_limit(&[1e-3, 1e-2], 1.0, 0.5, 1.0, 10).is_err());
        // continuous as γ shrinks toward 0
        let near: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|g| characteristic_roots(0.01, 1.0, *g).unwrap().h(10.0, 1.0))
            .collect();
        assert!(near.iter().all(|h| h.is_finite()));
        assert!((near[1] - near[2]).abs() < (near[0] - near[1]).abs() + 1e-15);
    }

    fn quad_problem(identical: bool) -> Problem<Quadratic> {
        let q = vec![
            4.0, 1.0, 0.0, 0.0, 0.5, //
            1.0, 3.0, 0.2, 0.0, 0.0, //
            0.0, 0.2, 2.0, 0.3, 0.0, //
            0.0, 0.0, 0.3, 1.0, 0.1, //
            0.5, 0.0, 0.0, 0.1, 0.5,
        ];
        let workers = (0..2)
            .map(|l| {
                (0..2)
                    .map(|i| {
                        let b = if identical {
                            vec![1.0; 5]
                        } else {
                            vec![(l * 2 + i) as f64, 1.0, -1.0, 0.5, 0.0]
                        };
                        Quadratic::new(q.clone(), b, 10 + i).unwrap()
                    })
                    .collect()
            })
            .collect();
        Problem::new(workers).unwrap()
    }

    fn jacobi_max_eigenvalue(q: &[f64], d: usize) -> f64 {
        let mut a = q.to_vec();
        for _ in 0..100 {
            for p in 0..d {
                for r in p + 1..d {
                    let apr = a[p * d + r];
                    if apr.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[r * d + r] - a[p * d + p]) / (2.0 * apr);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (akp, akr) = (a[k * d + p], a[k * d + r]);
                        a[k * d + p] = c * akp - s * akr;
                        a[k * d + r] = s * akp + c * akr;
                    }
                    for k in 0..d {
                        let (apk, ark) = (a[p * d + k], a[r * d + k]);
                        a[p * d + k] = c * apk - s * ark;
                        a[r * d + k] = s * apk + c * ark;
                    }
                }
            }
        }
        (0..d)
            .map(|i| a[i * d + i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn inputs<'a>(center: &'a [f64], num_points: usize) -> EstimateInputs<'a> {
        EstimateInputs {
            probe: ProbeSpec {
                num_points,
                radius: 1.0,
                seed: 3,
            },
            center,
            trajectory: None,
            x_star: None,
            step: StepParams {
                eta: 0.01,
                gamma: 0.5,
                gamma_a: 0.5,
            },
            mu_max: DEFAULT_MU_MAX,
        }
    }

    #[test]
    fn beta_estimate_brackets_top_eigenvalue() {
        let p = quad_problem(false);
        let lmax = jacobi_max_eigenvalue(p.worker(0, 0).matrix(), 5);
        let center = [0.0; 5];
        let e = estimate_constants(&p, &inputs(&center, 200)).unwrap();
        assert!(e.beta <= lmax * (1.0 + 1e-12), "{} > {lmax}", e.beta);
        assert!(e.beta >= 0.9 * lmax, "{} < 0.9·{lmax}", e.beta);
    }

    #[test]
    fn identical_shards_have_no_divergence() {
        let p = quad_problem(true);
        let center = [0.0; 5];
        let e = estimate_constants(&p, &inputs(&center, 20)).unwrap();
        assert!(e.delta_by_worker.iter().flatten().all(|&d| d <= 1e-10));
        assert!(e.delta <= 1e-10);
    }

    #[test]
    fn coincident_probes_are_rejected() {
        let p = quad_problem(false);
        let center = [0.0; 5];
        let mut i = inputs(&center, 10);
        i.probe.radius = 0.0;
        assert!(matches!(estimate_constants(&p, &i), Err(Error::Missing(_))));
    }

    #[test]
    fn verification_on_quadratic_run() {
        let p = quad_problem(false);
        let hp = HyperParams {
            eta: 0.05,
            gamma: 0.5,
            gamma_a: 0.5,
            tau: 3,
            pi: 2,
            t_total: 36,
        };
        let x0 = ModelVector::zeros(5);
        let tr = run(
            AlgorithmKind::HierMo,
            &p,
            &hp,
            &RunOptions::new(x0.clone()).record_virtual(true),
        )
        .unwrap();
        let obs = &tr.virtual_trace.as_ref().unwrap().observations;
        let (x_star, _) = stationary_proxy(&p, &x0, 0.005, 0.5, 50 * 36).unwrap();
        let center = [0.0; 5];
        let mut i = inputs(&center, 30);
        i.trajectory = Some(obs);
        i.x_star = Some(&x_star);
        i.step = StepParams::from(&hp);
        let e = estimate_constants(&p, &i).unwrap();
        let report = verify_theorems(&tr, &e).unwrap();
        assert!(
            report.edge_virtual_gap.pass,
            "{:?}",
            report.edge_virtual_gap
        );
        assert!(report.edge_loss_gap.pass, "{:?}", report.edge_loss_gap);
        assert!(report.momentum_identity_max < 1e-12);
        assert_eq!(report.edge_virtual_gap.checked, 36 * 2);
        assert_eq!(report.cloud_virtual_gap.checked, hp.p());
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"version\":1"));
    }

    #[test]
    fn verification_needs_virtual_data() {
        let p = quad_problem(false);
        let hp = HyperParams {
            eta: 0.05,
            gamma: 0.5,
            gamma_a: 0.5,
            tau: 2,
            pi: 1,
            t_total: 4,
        };
        let tr = run(
            AlgorithmKind::HierMo,
            &p,
            &hp,
            &RunOptions::new(ModelVector::zeros(5)),
        )
        .unwrap();
        let e = est(vec![0.1, 0.1], vec![0.5, 0.5], 0.1);
        assert!(matches!(verify_theorems(&tr, &e), Err(Error::Missing(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn constant_identities(eta in 1e-4f64..0.5, beta in 0.01f64..20.0, gamma in 0.01f64..0.99) {
            prop_assume!(eta * beta * (1.0 + gamma) <= 1.0);
            let c = characteristic_roots(eta, beta, gamma).unwrap();
            let eb = eta * beta;
            prop_assert!(rel(c.a + c.b, (1.0 + eb) * (1.0 + gamma) / gamma) <= 1e-9);
            prop_assert!(rel(c.a * c.b, (1.0 + eb) / gamma) <= 1e-9);
            prop_assert!(rel(c.i + c.j, 1.0 / eb) <= 1e-9);
            prop_assert!(rel(c.u + c.v, 1.0) <= 1e-9);
            prop_assert!(gamma * c.a > 1.0 && 1.0 > gamma * c.b && gamma * c.b > 0.0);
        }

        #[test]
        fn h_shape(eta in 1e-4f64..0.5, beta in 0.01f64..20.0, gamma in 0.01f64..0.99, delta in 0.0f64..5.0) {
            prop_assume!(eta * beta * (1.0 + gamma) <= 1.0);
            let c = characteristic_roots(eta, beta, gamma).unwrap();
            prop_assert_eq!(c.h(0.0, delta), 0.0);
            prop_assert!(c.h(1.0, delta).abs() <= 1e-9 * eta * delta.max(1e-300));
            let mut prev = c.h(1.0, delta);
            for x in 2..=50 {
                let h = c.h(x as f64, delta);
                prop_assert!(h >= prev - 1e-12 * h.abs(), "x={} {} < {}", x, h, prev);
                prop_assert!(h >= 0.0);
                prev = h;
            }
        }
    }
}
