//! Wall-clock delay model and the search for aggregation periods `(τ, π)`
//! that minimize the convergence bound under a time budget.

use crate::analysis::{alpha, f_hiermo, SmoothnessEstimate, StepParams};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::RangeInclusive;

pub const PLAN_VERSION: u32 = 1;
/// Step of the central differences taken on the continuous relaxation.
pub const DERIVATIVE_STEP: f64 = 1e-3;

/// A per-event delay in seconds: a constant, or a lognormal given by its
/// median and log-scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delay {
    Constant(f64),
    LogNormal { median: f64, sigma: f64 },
}

impl Delay {
    /// The deterministic value used by the planner and constant timelines.
    pub fn median(&self) -> f64 {
        match *self {
            Delay::Constant(v) => v,
            Delay::LogNormal { median, .. } => median,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Delay::Constant(_))
    }

    fn validate(&self, field: &str) -> Result<()> {
        let ok = match *self {
            Delay::Constant(v) => v >= 0.0 && v.is_finite(),
            Delay::LogNormal { median, sigma } => {
                median >= 0.0 && median.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(field, "delays must be finite and >= 0"))
        }
    }
}

impl Default for Delay {
    fn default() -> Self {
        Delay::Constant(0.0)
    }
}

fn one() -> u32 {
    1
}

/// Per-event compute and communication delays plus the total budget `Ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayProfile {
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub theta_w: Delay,
    pub theta_e: Delay,
    pub theta_c: Delay,
    pub phi_w2e: Delay,
    pub phi_e2c: Delay,
    /// Worker-to-cloud uplink, used only by two-tier schedules.
    #[serde(default)]
    pub phi_w2c: Delay,
    pub budget: f64,
}

impl DelayProfile {
    pub fn constant(
        theta_w: f64,
        theta_e: f64,
        theta_c: f64,
        phi_w2e: f64,
        phi_e2c: f64,
        budget: f64,
    ) -> Self {
        DelayProfile {
            version: 1,
            name: String::new(),
            theta_w: Delay::Constant(theta_w),
            theta_e: Delay::Constant(theta_e),
            theta_c: Delay::Constant(theta_c),
            phi_w2e: Delay::Constant(phi_w2e),
            phi_e2c: Delay::Constant(phi_e2c),
            phi_w2c: Delay::Constant(0.0),
            budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::invalid(
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        self.theta_w.validate("theta_w")?;
        self.theta_e.validate("theta_e")?;
        self.theta_c.validate("theta_c")?;
        self.phi_w2e.validate("phi_w2e")?;
        self.phi_e2c.validate("phi_e2c")?;
        self.phi_w2c.validate("phi_w2c")?;
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(Error::invalid("budget", "must be a finite value > 0"));
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        [
            self.theta_w,
            self.theta_e,
            self.theta_c,
            self.phi_w2e,
            self.phi_e2c,
            self.phi_w2c,
        ]
        .iter()
        .all(Delay::is_constant)
    }
}

/// Wall-clock of one cloud round: `τπΘ_w + πΘ_e + Θ_c + πΦ_w2e + Φ_e2c`.
///
/// Timelines rebuild this value with the same operation order so that
/// constant-delay schedules agree with [`total_time`] bit for bit.
pub fn round_cost(iters: f64, edge_events: f64, d: &DelayProfile) -> f64 {
    iters * d.theta_w.median()
        + edge_events * d.theta_e.median()
        + d.theta_c.median()
        + edge_events * d.phi_w2e.median()
        + d.phi_e2c.median()
}

/// `Ψ = P · (τπΘ_w + πΘ_e + Θ_c + πΦ_w2e + Φ_e2c)`.
pub fn total_time(p: f64, tau: f64, pi: f64, d: &DelayProfile) -> f64 {
    p * round_cost(tau * pi, pi, d)
}

/// `1/T = (Θ_e+Φ_w2e)/(Ψτ) + (Θ_c+Φ_e2c)/(Ψτπ) + Θ_w/Ψ`.
pub fn inv_t(tau: f64, pi: f64, d: &DelayProfile) -> f64 {
    let psi = d.budget;
    (d.theta_e.median() + d.phi_w2e.median()) / (psi * tau)
        + (d.theta_c.median() + d.phi_e2c.median()) / (psi * tau * pi)
        + d.theta_w.median() / psi
}

/// The bound objective `R(τ, π)` with `T` taken from the budget.
pub fn objective_r(
    tau: f64,
    pi: f64,
    d: &DelayProfile,
    est: &SmoothnessEstimate,
    step: StepParams,
) -> Result<f64> {
    if !(tau > 0.0 && pi > 0.0) {
        return Err(Error::invalid("tau/pi", "must be > 0"));
    }
    let inv = inv_t(tau, pi, d);
    if !(inv > 0.0) || !inv.is_finite() {
        return Err(Error::invalid(
            "delays",
            "all delays are zero, so T is unbounded",
        ));
    }
    Ok(f_hiermo(1.0 / inv, tau, pi, est, step)?.value)
}

/// Outcome of [`hieropt`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub version: u32,
    pub tau: u32,
    pub pi: u32,
    #[serde(rename = "R")]
    pub r: f64,
    /// `T` from the budget at the chosen pair, as a real number.
    #[serde(rename = "T_real")]
    pub t_real: f64,
    /// Number of whole cloud rounds that fit, `max(1, ⌊T/(τπ)⌋)`.
    #[serde(rename = "P_int")]
    pub p_int: u64,
    pub history: Vec<(u32, u32, f64)>,
    pub iterations: usize,
}

fn plan_result(
    tau: u32,
    pi: u32,
    r: f64,
    d: &DelayProfile,
    history: Vec<(u32, u32, f64)>,
    iterations: usize,
) -> PlanResult {
    let t_real = 1.0 / inv_t(f64::from(tau), f64::from(pi), d);
    let p_int = ((t_real / (f64::from(tau) * f64::from(pi))).floor() as u64).max(1);
    PlanResult {
        version: PLAN_VERSION,
        tau,
        pi,
        r,
        t_real,
        p_int,
        history,
        iterations,
    }
}

fn derivative(f: impl Fn(f64) -> Result<f64>, at: f64) -> Result<f64> {
    Ok((f(at + DERIVATIVE_STEP)? - f(at - DERIVATIVE_STEP)?) / (2.0 * DERIVATIVE_STEP))
}

/// Signed-derivative coordinate search over integer `(τ, π)`.
///
/// Each iteration moves `τ` one step against the sign of `∂R/∂τ` (never
/// below 1), then does the same for `π` at the updated `τ`. The search stops
/// when a pair repeats. From the lowest-`R` pair of the cycle a greedy
/// descent over the four axis neighbours follows, since the diagonal moves
/// of the main loop can step over a better neighbour. Descent steps are
/// appended to the history and count against `max_iters`.
pub fn hieropt(
    d: &DelayProfile,
    est: &SmoothnessEstimate,
    step: StepParams,
    init: (u32, u32),
    max_iters: usize,
) -> Result<PlanResult> {
    d.validate()?;
    if init.0 == 0 || init.1 == 0 {
        return Err(Error::invalid("init", "tau and pi must start at >= 1"));
    }
    let r = |tau: u32, pi: u32| objective_r(f64::from(tau), f64::from(pi), d, est, step);
    let (mut tau, mut pi) = init;
    let mut history = vec![(tau, pi, r(tau, pi)?)];
    let mut first_seen: HashMap<(u32, u32), usize> = HashMap::from([((tau, pi), 0)]);

    for iter in 1..=max_iters {
        let pi_f = f64::from(pi);
        let dt = derivative(|x| objective_r(x, pi_f, d, est, step), f64::from(tau))?;
        tau = next(tau, dt);
        let tau_f = f64::from(tau);
        let dp = derivative(|x| objective_r(tau_f, x, d, est, step), pi_f)?;
        pi = next(pi, dp);

        let value = r(tau, pi)?;
        history.push((tau, pi, value));
        if let Some(&start) = first_seen.get(&(tau, pi)) {
            let best = history[start..]
                .iter()
                .copied()
                .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)))
                .expect("non-empty cycle");
            return descend(best, d, history, iter, max_iters, &r);
        }
        first_seen.insert((tau, pi), history.len() - 1);
    }
    Err(Error::SearchExhausted { max_iters, history })
}

fn descend(
    mut at: (u32, u32, f64),
    d: &DelayProfile,
    mut history: Vec<(u32, u32, f64)>,
    mut iter: usize,
    max_iters: usize,
    r: &impl Fn(u32, u32) -> Result<f64>,
) -> Result<PlanResult> {
    loop {
        let (tau, pi, value) = at;
        let mut best = at;
        for (t, p) in [
            (tau.saturating_sub(1), pi),
            (tau, pi.saturating_sub(1)),
            (tau, pi + 1),
            (tau + 1, pi),
        ] {
            if t == 0 || p == 0 {
                continue;
            }
            let v = r(t, p)?;
            if v < best.2 {
                best = (t, p, v);
            }
        }
        if best.2 >= value {
            return Ok(plan_result(tau, pi, value, d, history, iter));
        }
        if iter >= max_iters {
            return Err(Error::SearchExhausted { max_iters, history });
        }
        iter += 1;
        history.push(best);
        at = best;
    }
}

fn next(v: u32, slope: f64) -> u32 {
    if slope > 0.0 {
        v.saturating_sub(1).max(1)
    } else if slope < 0.0 {
        v + 1
    } else {
        v
    }
}

/// Exhaustive minimum of `R` over an integer grid; ties go to the smallest
/// `τ`, then the smallest `π`.
pub fn grid_oracle(
    d: &DelayProfile,
    est: &SmoothnessEstimate,
    step: StepParams,
    tau_range: RangeInclusive<u32>,
    pi_range: RangeInclusive<u32>,
) -> Result<(u32, u32, f64)> {
    if tau_range.is_empty() || pi_range.is_empty() {
        return Err(Error::invalid("range", "must be non-empty"));
    }
    if *tau_range.start() == 0 || *pi_range.start() == 0 {
        return Err(Error::invalid("range", "tau and pi start at 1"));
    }
    let mut best: Option<(u32, u32, f64)> = None;
    for tau in tau_range {
        for pi in pi_range.clone() {
            let r = objective_r(f64::from(tau), f64::from(pi), d, est, step)?;
            if best.is_none_or(|b| r < b.2) {
                best = Some((tau, pi, r));
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Inputs for planning: the step sizes the bound is evaluated at and the
/// problem constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConstants {
    #[serde(default = "one")]
    pub version: u32,
    pub step: StepParams,
    pub estimate: SmoothnessEstimate,
    /// Free-form remarks on how the constants were obtained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl PlannerConstants {
    pub fn new(step: StepParams, estimate: SmoothnessEstimate) -> Self {
        PlannerConstants {
            version: PLAN_VERSION,
            step,
            estimate,
            notes: Vec::new(),
        }
    }

    /// Replace the measured `μ` by an assumed value and recompute `α`.
    pub fn assume_mu(mut self, mu: f64) -> Result<Self> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::invalid("mu", "must be finite and non-negative"));
        }
        let measured = self.estimate.mu;
        self.estimate.mu = mu;
        self.estimate.alpha = alpha(self.step.eta, self.step.gamma, self.estimate.beta, mu);
        self.notes.push(format!(
            "mu set to {mu} (measured {measured}); alpha recomputed as {}",
            self.estimate.alpha
        ));
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::EstimateProvenance;
    use proptest::prelude::*;

    fn step() -> StepParams {
        StepParams {
            eta: 0.01,
            gamma: 0.5,
            gamma_a: 0.5,
        }
    }

    fn est(delta: f64) -> SmoothnessEstimate {
        SmoothnessEstimate {
            rho: 1.0,
            beta: 2.0,
            delta_by_worker: vec![vec![delta; 2]; 2],
            delta_by_edge: vec![delta; 2],
            delta,
            mu: 0.5,
            omega: 0.1,
            sigma: 0.5,
            alpha: alpha(0.01, 0.5, 2.0, 0.5),
            edge_weights: vec![0.5, 0.5],
            provenance: EstimateProvenance::default(),
        }
    }

    #[test]
    fn total_time_arithmetic() {
        let ones = DelayProfile::constant(1.0, 1.0, 1.0, 1.0, 1.0, 10.0);
        assert_eq!(total_time(1.0, 1.0, 1.0, &ones), 5.0);
        let d = DelayProfile::constant(0.1, 0.2, 0.4, 0.0, 0.0, 10.0);
        assert!((total_time(3.0, 5.0, 2.0, &d) - 3.0 * (1.0 + 0.4 + 0.4)).abs() < 1e-12);
        assert_eq!(
            total_time(8.0, 5.0, 2.0, &d),
            2.0 * total_time(4.0, 5.0, 2.0, &d)
        );
    }

    #[test]
    fn inv_t_arithmetic() {
        let d = DelayProfile::constant(0.1, 0.2, 0.4, 0.2, 0.4, 100.0);
        let v = inv_t(10.0, 2.0, &d);
        assert!((v - 0.0018).abs() < 1e-15, "{v}");
        assert!((1.0 / v - 555.555_555_555_555_6).abs() < 1e-9);
        let only_w = DelayProfile::constant(0.3, 0.0, 0.0, 0.0, 0.0, 100.0);
        assert_eq!(inv_t(1.0, 1.0, &only_w), inv_t(7.0, 3.0, &only_w));
    }

    #[test]
    fn budget_identity() {
        let d = DelayProfile::constant(0.1, 0.3, 0.7, 0.2, 0.9, 400.0);
        for (tau, pi) in [(1.0, 1.0), (10.0, 2.0), (40.0, 2.0), (7.0, 9.0)] {
            let p = 1.0 / (inv_t(tau, pi, &d) * tau * pi);
            let psi = total_time(p, tau, pi, &d);
            assert!((psi - 400.0).abs() < 1e-9, "{psi}");
        }
    }

    #[test]
    fn zero_communication_prefers_one_one() {
        // with γ_a = 0 the momentum term vanishes and j/(τπ) grows in both
        // periods, so nothing offsets the larger deviation
        let s0 = StepParams {
            gamma_a: 0.0,
            ..step()
        };
        let d = DelayProfile::constant(0.1, 0.0, 0.0, 0.0, 0.0, 100.0);
        let plan = hieropt(&d, &est(1.0), s0, (5, 3), 500).unwrap();
        assert_eq!((plan.tau, plan.pi), (1, 1));
        let (t, p, _) = grid_oracle(&d, &est(1.0), s0, 1..=50, 1..=10).unwrap();
        assert_eq!((t, p), (1, 1));
    }

    #[test]
    fn edge_momentum_can_favour_longer_periods_without_delays() {
        // s(1) > 0 when γ_a > 0, so j(1, π)/π falls with π and the
        // square-root term of R rewards a larger π even for free rounds
        let d = DelayProfile::constant(0.1, 0.0, 0.0, 0.0, 0.0, 100.0);
        let e = est(1.0);
        let r = |p: f64| objective_r(1.0, p, &d, &e, step()).unwrap();
        assert!(r(2.0) < r(1.0));
    }

    #[test]
    fn homogeneous_objective_is_twice_q() {
        let d = DelayProfile::constant(0.1, 0.2, 0.4, 0.2, 0.4, 100.0);
        let s0 = StepParams {
            gamma_a: 0.0,
            ..step()
        };
        let e = est(0.0);
        let r = objective_r(3.0, 2.0, &d, &e, s0).unwrap();
        let q = inv_t(3.0, 2.0, &d) / (2.0 * e.curvature());
        assert!((r - 2.0 * q).abs() <= 1e-12 * r);
    }

    #[test]
    fn objective_matches_bound_at_integers() {
        let d = DelayProfile::constant(0.1, 0.2, 0.4, 0.2, 0.4, 100.0);
        let e = est(0.7);
        for (tau, pi) in [(1.0, 1.0), (10.0, 2.0), (25.0, 4.0)] {
            let t = 1.0 / inv_t(tau, pi, &d);
            let direct = f_hiermo(t, tau, pi, &e, step()).unwrap().value;
            let r = objective_r(tau, pi, &d, &e, step()).unwrap();
            assert!((direct - r).abs() <= 1e-9 * r);
        }
    }

    #[test]
    fn hieropt_result_is_locally_optimal() {
        let d = DelayProfile::constant(0.01, 0.5, 2.0, 0.5, 3.0, 500.0);
        let e = est(0.05);
        let plan = hieropt(&d, &e, step(), (1, 1), 500).unwrap();
        let r = |t: u32, p: u32| objective_r(f64::from(t), f64::from(p), &d, &e, step()).unwrap();
        let here = r(plan.tau, plan.pi);
        for (t, p) in [
            (plan.tau + 1, plan.pi),
            (plan.tau.saturating_sub(1).max(1), plan.pi),
            (plan.tau, plan.pi + 1),
            (plan.tau, plan.pi.saturating_sub(1).max(1)),
        ] {
            assert!(
                here <= r(t, p),
                "({t},{p}) beats ({},{})",
                plan.tau,
                plan.pi
            );
        }
        let json = serde_json::to_value(&plan).unwrap();
        for key in ["tau", "pi", "R", "T_real", "P_int", "history"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn hieropt_exhaustion_carries_history() {
        let d = DelayProfile::constant(0.01, 0.5, 2.0, 0.5, 3.0, 500.0);
        match hieropt(&d, &est(0.05), step(), (1, 1), 1) {
            Err(Error::SearchExhausted { history, .. }) => assert_eq!(history.len(), 2),
            Ok(p) => assert!(p.iterations <= 1),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn grid_oracle_edges() {
        let d = DelayProfile::constant(0.1, 0.2, 0.4, 0.2, 0.4, 100.0);
        let e = est(0.3);
        let (t, p, _) = grid_oracle(&d, &e, step(), 4..=4, 2..=2).unwrap();
        assert_eq!((t, p), (4, 2));
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert!(grid_oracle(&d, &e, step(), empty, 1..=2).is_err());
    }

    #[test]
    fn profile_json_forms() {
        let text = r#"{"theta_w": 0.1, "theta_e": {"median": 0.2, "sigma": 0.3},
            "theta_c": 0.4, "phi_w2e": 0.2, "phi_e2c": 0.4, "budget": 100}"#;
        let d: DelayProfile = serde_json::from_str(text).unwrap();
        d.validate().unwrap();
        assert!(!d.is_constant());
        assert_eq!(d.theta_e.median(), 0.2);
        let bad = r#"{"theta_w": 0.1, "theta_e": 0.2, "theta_c": 0.4, "phi_w2e": 0.2,
            "phi_e2c": 0.4, "budget": 100, "typo": 1}"#;
        assert!(serde_json::from_str::<DelayProfile>(bad).is_err());
    }

    proptest! {
        #[test]
        fn more_time_per_iteration_never_raises_t(
            tau in 1u32..50, pi in 1u32..10,
            te in 0.0f64..2.0, tc in 0.0f64..2.0, pw in 0.0f64..2.0, pc in 0.0f64..2.0,
        ) {
            let d = DelayProfile::constant(0.05, te, tc, pw, pc, 100.0);
            let (t, p) = (f64::from(tau), f64::from(pi));
            let here = 1.0 / inv_t(t, p, &d);
            prop_assert!(1.0 / inv_t(t + 1.0, p, &d) >= here);
            prop_assert!(1.0 / inv_t(t, p + 1.0, &d) >= here);
        }

        #[test]
        fn oracle_never_loses_to_hieropt(delta in 0.01f64..2.0, tc in 0.1f64..5.0, init_t in 1u32..20) {
            let d = DelayProfile::constant(0.02, 0.3, tc, 0.3, tc, 300.0);
            let e = est(delta);
            if let Ok(plan) = hieropt(&d, &e, step(), (init_t, 1), 500) {
                if plan.tau <= 50 && plan.pi <= 10 {
                    let (_, _, best) = grid_oracle(&d, &e, step(), 1..=50, 1..=10).unwrap();
                    prop_assert!(best <= plan.r);
                }
            }
        }
    }
}
