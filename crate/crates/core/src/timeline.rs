//! Attach per-event delays to a run trace to get wall-clock curves.

use crate::engine::{Event, RunTrace};
use crate::error::{Error, Result};
use crate::planner::{round_cost, Delay, DelayProfile};
use crate::rng::{self, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const TIMELINE_SCHEMA: &str = "hiermo.timeline/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    TwoTier,
    ThreeTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub t: usize,
    /// Cumulative wall-clock at the end of iteration `t`, including any
    /// aggregation triggered at `t`.
    pub seconds: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub architecture: Architecture,
    pub entries: Vec<TimelineEntry>,
}

impl EventTimeline {
    pub fn final_seconds(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.seconds)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "#schema={TIMELINE_SCHEMA}")?;
        writeln!(out, "t,seconds,loss,accuracy,event")?;
        for e in &self.entries {
            let acc = e.accuracy.map_or_else(String::new, |a| format!("{a:e}"));
            writeln!(
                out,
                "{},{:e},{:e},{},{}",
                e.t,
                e.seconds,
                e.loss,
                acc,
                e.event.as_str()
            )?;
        }
        Ok(())
    }
}

/// Draws one value per event; constant delays never touch the generator.
struct Sampler {
    rng: rand_chacha::ChaCha8Rng,
}

impl Sampler {
    fn draw(&mut self, d: Delay) -> f64 {
        match d {
            Delay::Constant(v) => v,
            Delay::LogNormal { median, sigma } => {
                let z: f64 = self.rng.sample(StandardNormal);
                median * (sigma * z).exp()
            }
        }
    }
}

/// Per iteration add `Θ_w`; at edge events add `Θ_e + Φ_w2e`; at cloud
/// events add `Θ_c + Φ_e2c` (three-tier, after the edge terms) or
/// `Θ_c + Φ_w2c` (two-tier). Workers and edges run in lock-step, so each
/// tier contributes one delay per event.
///
/// With constant delays every completed cloud round is charged as
/// `rounds × round_cost`, so the end of a full run matches the closed-form
/// total exactly. Lognormal delays are sampled per event from the trace
/// seed's delay stream.
pub fn schedule(trace: &RunTrace, d: &DelayProfile, arch: Architecture) -> Result<EventTimeline> {
    d.validate()?;
    let has_edge = trace.records.iter().any(|r| r.event == Event::Edge);
    match arch {
        Architecture::TwoTier if has_edge => {
            return Err(Error::invalid(
                "architecture",
                "two-tier schedules cannot contain edge events",
            ))
        }
        Architecture::ThreeTier if !trace.algorithm.is_three_tier() => {
            return Err(Error::invalid(
                "architecture",
                format!("{} is not a three-tier algorithm", trace.algorithm),
            ))
        }
        _ => {}
    }
    let mut entries = Vec::with_capacity(trace.records.len());
    if d.is_constant() {
        schedule_constant(trace, d, arch, &mut entries);
    } else {
        let mut sampler = Sampler {
            rng: rng::stream(trace.seed, Stream::Delays),
        };
        let mut now = 0.0;
        for r in &trace.records {
            now += sampler.draw(d.theta_w);
            let edge_terms = match (arch, r.event) {
                (Architecture::ThreeTier, Event::Edge | Event::Cloud) => true,
                _ => false,
            };
            if edge_terms {
                now += sampler.draw(d.theta_e) + sampler.draw(d.phi_w2e);
            }
            if r.event == Event::Cloud {
                let uplink = match arch {
                    Architecture::ThreeTier => d.phi_e2c,
                    Architecture::TwoTier => d.phi_w2c,
                };
                now += sampler.draw(d.theta_c) + sampler.draw(uplink);
            }
            entries.push(entry(r, now));
        }
    }
    Ok(EventTimeline {
        architecture: arch,
        entries,
    })
}

fn entry(r: &crate::engine::IterRecord, seconds: f64) -> TimelineEntry {
    TimelineEntry {
        t: r.t,
        seconds,
        loss: r.loss,
        accuracy: r.accuracy,
        event: r.event,
    }
}

fn schedule_constant(
    trace: &RunTrace,
    d: &DelayProfile,
    arch: Architecture,
    entries: &mut Vec<TimelineEntry>,
) {
    let profile = match arch {
        Architecture::ThreeTier => d.clone(),
        // a two-tier round has no edge tier and uses the direct uplink
        Architecture::TwoTier => DelayProfile {
            theta_e: Delay::Constant(0.0),
            phi_w2e: Delay::Constant(0.0),
            phi_e2c: d.phi_w2c,
            ..d.clone()
        },
    };
    let theta_w = profile.theta_w.median();
    let (theta_e, phi_w2e) = (profile.theta_e.median(), profile.phi_w2e.median());

    // time at the end of the last completed round
    let mut base = 0.0;
    let mut rounds = 0u64;
    let mut uniform: Option<(usize, usize)> = None;
    let mut uniform_ok = true;
    let (mut iters, mut edges) = (0usize, 0usize);

    for r in &trace.records {
        iters += 1;
        if r.event != Event::None && arch == Architecture::ThreeTier {
            edges += 1;
        }
        if r.event == Event::Cloud {
            let cost = round_cost(iters as f64, edges as f64, &profile);
            rounds += 1;
            match uniform {
                None => uniform = Some((iters, edges)),
                Some(shape) if shape != (iters, edges) => uniform_ok = false,
                _ => {}
            }
            base = if uniform_ok {
                rounds as f64 * cost
            } else {
                base + cost
            };
            iters = 0;
            edges = 0;
            entries.push(entry(r, base));
        } else {
            let partial = iters as f64 * theta_w + edges as f64 * theta_e + edges as f64 * phi_w2e;
            entries.push(entry(r, base + partial));
        }
    }
}

/// Wall-clock of the first iteration whose accuracy reaches `target`;
/// `None` when it is never reached.
pub fn time_to_accuracy(timeline: &EventTimeline, target: f64) -> Result<Option<f64>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid("target", "must lie in [0, 1]"));
    }
    if timeline.entries.iter().any(|e| e.accuracy.is_none()) {
        return Err(Error::Missing("the trace carries no accuracy".to_string()));
    }
    Ok(timeline
        .entries
        .iter()
        .find(|e| e.accuracy.is_some_and(|a| a >= target))
        .map(|e| e.seconds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{AlgorithmKind, HyperParams, IterRecord};
    use crate::planner::total_time;
    use crate::vector::ModelVector;
    use proptest::prelude::*;

    fn synthetic_trace(alg: AlgorithmKind, tau: usize, pi: usize, t_total: usize) -> RunTrace {
        let three = alg.is_three_tier();
        let records = (1..=t_total)
            .map(|t| {
                let event = if three && t % (tau * pi) == 0 {
                    Event::Cloud
                } else if three && t % tau == 0 {
                    Event::Edge
                } else if !three && t % tau == 0 {
                    Event::Cloud
                } else {
                    Event::None
                };
                IterRecord {
                    t,
                    loss: 1.0 / t as f64,
                    accuracy: Some((t as f64 / t_total as f64).min(1.0)),
                    event,
                    dev_edge_max: None,
                    dev_edge_momentum_max: None,
                    dev_cloud: None,
                }
            })
            .collect();
        RunTrace {
            algorithm: alg,
            hp: HyperParams {
                eta: 0.1,
                gamma: 0.5,
                gamma_a: 0.5,
                tau,
                pi,
                t_total,
            },
            seed: 1,
            records,
            edge_models: None,
            virtual_trace: None,
            diverged: None,
            final_model: ModelVector::zeros(1),
        }
    }

    #[test]
    fn constant_delays_match_closed_form_exactly() {
        let d = DelayProfile::constant(0.013, 0.21, 0.77, 0.093, 1.31, 400.0);
        for (tau, pi, p) in [(5, 2, 10), (40, 2, 3), (1, 1, 17), (7, 3, 11)] {
            let tr = synthetic_trace(AlgorithmKind::HierMo, tau, pi, tau * pi * p);
            let tl = schedule(&tr, &d, Architecture::ThreeTier).unwrap();
            let expect = total_time(p as f64, tau as f64, pi as f64, &d);
            assert_eq!(
                tl.final_seconds().to_bits(),
                expect.to_bits(),
                "{tau} {pi} {p}"
            );
        }
    }

    #[test]
    fn compute_only_timeline_counts_iterations() {
        let d = DelayProfile::constant(1.0, 0.0, 0.0, 0.0, 0.0, 10.0);
        let tr = synthetic_trace(AlgorithmKind::HierMo, 3, 2, 24);
        let tl = schedule(&tr, &d, Architecture::ThreeTier).unwrap();
        for e in &tl.entries {
            assert_eq!(e.seconds, e.t as f64);
        }
    }

    #[test]
    fn three_tier_beats_costly_direct_uplink() {
        let mut d = DelayProfile::constant(0.01, 0.05, 0.1, 0.2, 0.5, 100.0);
        d.phi_w2c = Delay::Constant(1.0);
        let three = synthetic_trace(AlgorithmKind::HierMo, 5, 2, 100);
        let two = synthetic_trace(AlgorithmKind::FedAvg, 5, 1, 100);
        let t3 = schedule(&three, &d, Architecture::ThreeTier)
            .unwrap()
            .final_seconds();
        let t2 = schedule(&two, &d, Architecture::TwoTier)
            .unwrap()
            .final_seconds();
        assert!(t3 < t2, "{t3} vs {t2}");
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let d = DelayProfile::constant(0.01, 0.05, 0.1, 0.2, 0.5, 100.0);
        let three = synthetic_trace(AlgorithmKind::HierMo, 5, 2, 20);
        assert!(schedule(&three, &d, Architecture::TwoTier).is_err());
        let two = synthetic_trace(AlgorithmKind::FedAvg, 5, 1, 20);
        assert!(schedule(&two, &d, Architecture::ThreeTier).is_err());
    }

    #[test]
    fn time_to_accuracy_edges() {
        let d = DelayProfile::constant(1.0, 0.5, 0.5, 0.5, 0.5, 10.0);
        let tr = synthetic_trace(AlgorithmKind::HierMo, 2, 2, 8);
        let tl = schedule(&tr, &d, Architecture::ThreeTier).unwrap();
        assert_eq!(
            time_to_accuracy(&tl, 0.0).unwrap(),
            Some(tl.entries[0].seconds)
        );
        assert_eq!(
            time_to_accuracy(&tl, 1.0).unwrap(),
            Some(tl.final_seconds())
        );
        let mut capped = tl.clone();
        for e in &mut capped.entries {
            e.accuracy = Some(0.5);
        }
        assert_eq!(time_to_accuracy(&capped, 0.9).unwrap(), None);
        capped.entries[0].accuracy = None;
        assert!(time_to_accuracy(&capped, 0.1).is_err());
    }

    #[test]
    fn lognormal_delays_are_seeded() {
        let mut d = DelayProfile::constant(0.1, 0.2, 0.3, 0.1, 0.4, 100.0);
        d.theta_w = Delay::LogNormal {
            median: 0.1,
            sigma: 0.5,
        };
        let tr = synthetic_trace(AlgorithmKind::HierMo, 3, 2, 30);
        let a = schedule(&tr, &d, Architecture::ThreeTier).unwrap();
        let b = schedule(&tr, &d, Architecture::ThreeTier).unwrap();
        assert_eq!(a, b);
        let mut other = tr.clone();
        other.seed = 2;
        assert_ne!(a, schedule(&other, &d, Architecture::ThreeTier).unwrap());
    }

    proptest! {
        #[test]
        fn timelines_are_monotone_and_additive(
            tau in 1usize..6, pi in 1usize..4, p1 in 1usize..5, p2 in 1usize..5,
            tw in 0.0f64..1.0, te in 0.0f64..1.0, tc in 0.0f64..1.0,
            pw in 0.0f64..1.0, pc in 0.0f64..1.0, sigma in 0.0f64..1.0,
        ) {
            let mut d = DelayProfile::constant(tw, te, tc, pw, pc, 10.0);
            let first = synthetic_trace(AlgorithmKind::HierMo, tau, pi, tau * pi * p1);
            let second = synthetic_trace(AlgorithmKind::HierMo, tau, pi, tau * pi * p2);
            let whole = synthetic_trace(AlgorithmKind::HierMo, tau, pi, tau * pi * (p1 + p2));
            let a = schedule(&first, &d, Architecture::ThreeTier).unwrap().final_seconds();
            let b = schedule(&second, &d, Architecture::ThreeTier).unwrap().final_seconds();
            let w = schedule(&whole, &d, Architecture::ThreeTier).unwrap();
            prop_assert!((w.final_seconds() - (a + b)).abs() <= 1e-12 * (a + b).max(1.0));
            prop_assert!(w.entries.windows(2).all(|e| e[1].seconds >= e[0].seconds));

            d.theta_c = Delay::LogNormal { median: tc, sigma };
            let s = schedule(&whole, &d, Architecture::ThreeTier).unwrap();
            prop_assert!(s.entries.windows(2).all(|e| e[1].seconds >= e[0].seconds));
        }
    }
}
