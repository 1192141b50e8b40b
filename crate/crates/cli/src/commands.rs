use crate::config::{load_constants, load_profile, ExperimentConfig};
use crate::error::{CliError, CliResult};
use hiermo::engine::{run, AlgorithmKind, RunOptions, RunTrace};
use hiermo::experiment::{bound_report, Built};
use hiermo::planner::{grid_oracle, hieropt, PlannerConstants};
use hiermo::timeline::{schedule, time_to_accuracy, Architecture, EventTimeline};
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const SUMMARY_VERSION: u32 = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(hiermo::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })
}

fn build_all(cfg: &ExperimentConfig, seeds: &[u64]) -> CliResult<Vec<Built>> {
    let scenario = cfg.scenario();
    seeds
        .par_iter()
        .map(|&s| scenario.build(s).map_err(CliError::from))
        .collect()
}

pub fn architecture_for(alg: AlgorithmKind) -> Architecture {
    if alg.is_three_tier() {
        Architecture::ThreeTier
    } else {
        Architecture::TwoTier
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    /// Mean and standard error of the finite values; `None` when there are none.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStderr { mean, stderr, n })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub trace: String,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Simulated wall-clock of the whole run, when a delay profile is set.
    pub wall_clock_seconds: Option<f64>,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: AlgorithmKind,
    pub runs: usize,
    pub final_loss: Option<MeanStderr>,
    pub final_accuracy: Option<MeanStderr>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub algorithms: Vec<AlgorithmSummary>,
}

pub fn trace_file_name(alg: AlgorithmKind, seed: u64) -> String {
    format!("trace_{alg}_seed{seed}.csv")
}

/// One trace per (algorithm, seed), a timeline per trace when the config
/// has a delay profile, and `summary.json`.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    quiet: bool,
) -> CliResult<Summary> {
    create_dir(out)?;
    let profile = cfg.delay_profile()?;
    let built = build_all(cfg, seeds)?;
    let jobs: Vec<(AlgorithmKind, usize)> = cfg
        .algorithms
        .iter()
        .flat_map(|&a| (0..seeds.len()).map(move |i| (a, i)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(alg, i)| -> CliResult<RunSummary> {
            let seed = seeds[i];
            let b = &built[i];
            let opts = RunOptions::new(b.x0(seed))
                .seed(seed)
                .batch_size(cfg.batch_size)
                .edge_momentum_reset(cfg.edge_momentum_reset);
            let trace = run(alg, &b.problem, &cfg.hyperparams, &opts)?;
            let name = trace_file_name(alg, seed);
            trace.write_csv(out.join(&name))?;
            let wall_clock_seconds = match &profile {
                Some(d) => {
                    let tl = schedule(&trace, d, architecture_for(alg))?;
                    tl.write_csv(out.join(format!("timeline_{alg}_seed{seed}.csv")))?;
                    Some(tl.final_seconds())
                }
                None => None,
            };
            Ok(RunSummary {
                algorithm: alg,
                seed,
                trace: name,
                final_loss: Some(trace.final_loss()).filter(|x| x.is_finite()),
                final_accuracy: trace.final_accuracy(),
                wall_clock_seconds,
                diverged: trace
                    .diverged
                    .as_ref()
                    .map(|d| format!("t={}: {}", d.t, d.reason)),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let algorithms = cfg
        .algorithms
        .iter()
        .map(|&alg| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.algorithm == alg).collect();
            AlgorithmSummary {
                algorithm: alg,
                runs: mine.len(),
                final_loss: MeanStderr::of(mine.iter().filter_map(|r| r.final_loss)),
                final_accuracy: MeanStderr::of(mine.iter().filter_map(|r| r.final_accuracy)),
            }
        })
        .collect();
    let summary = Summary {
        version: SUMMARY_VERSION,
        seeds: seeds.to_vec(),
        runs,
        algorithms,
    };
    write_json(&out.join("summary.json"), &summary)?;

    if !quiet {
        for a in &summary.algorithms {
            let fmt = |m: &Option<MeanStderr>| {
                m.map_or("n/a".to_string(), |m| {
                    format!("{:.4} ± {:.4}", m.mean, m.stderr)
                })
            };
            println!(
                "{:<15} loss {}  accuracy {}",
                a.algorithm.name(),
                fmt(&a.final_loss),
                fmt(&a.final_accuracy)
            );
        }
    }
    let diverged: Vec<String> = summary
        .runs
        .iter()
        .filter_map(|r| {
            r.diverged
                .as_ref()
                .map(|d| format!("{} seed {}: {d}", r.algorithm, r.seed))
        })
        .collect();
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged));
    }
    Ok(summary)
}

/// Bound reports and planner constants, one pair per seed.
pub fn cmd_bounds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    assume_mu: Option<f64>,
    quiet: bool,
) -> CliResult<()> {
    create_dir(out)?;
    let built = build_all(cfg, seeds)?;
    let results = seeds
        .par_iter()
        .zip(built.par_iter())
        .map(|(&seed, b)| -> CliResult<(u64, bool, Option<String>)> {
            let (trace, est, report) = bound_report(
                b,
                &cfg.hyperparams,
                seed,
                &cfg.estimation,
                cfg.edge_momentum_reset,
            )?;
            write_json(&out.join(format!("bounds_seed{seed}.json")), &report)?;
            let mut constants = PlannerConstants::new((&cfg.hyperparams).into(), est);
            if let Some(mu) = assume_mu {
                constants = constants.assume_mu(mu)?;
            }
            write_json(&out.join(format!("constants_seed{seed}.json")), &constants)?;
            if !quiet {
                let c = |name: &str, k: &hiermo::analysis::InequalityCheck| {
                    format!(
                        "{name} {} ({} checked, slack {:.3e})",
                        if k.pass { "pass" } else { "FAIL" },
                        k.checked,
                        k.slack
                    )
                };
                println!(
                    "seed {seed}: {}; {}; {}; {}",
                    c("edge", &report.edge_virtual_gap),
                    c("loss", &report.edge_loss_gap),
                    c("momentum", &report.edge_momentum),
                    c("cloud", &report.cloud_virtual_gap)
                );
                for w in &report.warnings {
                    println!("seed {seed}: warning: {w}");
                }
            }
            let diverged = trace
                .diverged
                .as_ref()
                .map(|d| format!("seed {seed}: t={}: {}", d.t, d.reason));
            Ok((seed, report.all_pass(), diverged))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let diverged: Vec<String> = results.iter().filter_map(|r| r.2.clone()).collect();
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged));
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.1)
        .map(|r| format!("seed {}", r.0))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Verification(failed));
    }
    Ok(())
}

pub struct OptimizeArgs<'a> {
    pub profile: &'a Path,
    pub constants: &'a Path,
    pub out: &'a Path,
    pub init: (u32, u32),
    pub max_iters: usize,
    /// Also evaluate every pair in `1..=grid` for comparison.
    pub grid: Option<u32>,
}

#[derive(Debug, Serialize)]
struct GridResult {
    version: u32,
    tau: u32,
    pi: u32,
    #[serde(rename = "R")]
    r: f64,
    max: u32,
}

pub fn cmd_optimize(args: &OptimizeArgs<'_>, quiet: bool) -> CliResult<()> {
    let d = load_profile(args.profile)?;
    let k = load_constants(args.constants)?;
    create_dir(args.out)?;
    let plan = hieropt(&d, &k.estimate, k.step, args.init, args.max_iters)?;
    write_json(&args.out.join("plan.json"), &plan)?;
    if !quiet {
        println!(
            "tau = {}, pi = {}, R = {:.6e}, T_real = {:.3}, P_int = {} ({} iterations)",
            plan.tau, plan.pi, plan.r, plan.t_real, plan.p_int, plan.iterations
        );
    }
    if let Some(max) = args.grid {
        if max == 0 {
            return Err(CliError::Usage("--grid must be at least 1".into()));
        }
        let (tau, pi, r) = grid_oracle(&d, &k.estimate, k.step, 1..=max, 1..=max)?;
        write_json(
            &args.out.join("grid.json"),
            &GridResult {
                version: 1,
                tau,
                pi,
                r,
                max,
            },
        )?;
        if !quiet {
            println!(
                "grid optimum over 1..={max}: tau = {tau}, pi = {pi}, R = {r:.6e} (ratio {:.4})",
                plan.r / r
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TimeToAccuracy {
    pub version: u32,
    pub architecture: Architecture,
    pub target: Option<f64>,
    /// `null` when the target is never reached.
    pub seconds: Option<f64>,
    pub final_seconds: f64,
}

pub struct TimelineArgs<'a> {
    pub trace: &'a Path,
    pub profile: &'a Path,
    pub target: Option<f64>,
    pub architecture: Option<Architecture>,
    pub out: &'a Path,
}

pub fn cmd_timeline(args: &TimelineArgs<'_>, quiet: bool) -> CliResult<EventTimeline> {
    let d = load_profile(args.profile)?;
    let trace = RunTrace::read_csv(args.trace)?;
    let arch = args
        .architecture
        .unwrap_or_else(|| architecture_for(trace.algorithm));
    let tl = schedule(&trace, &d, arch)?;
    create_dir(args.out)?;
    let stem = args
        .trace
        .file_stem()
        .map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned());
    tl.write_csv(args.out.join(format!("{stem}.timeline.csv")))?;
    let seconds = match args.target {
        Some(t) => time_to_accuracy(&tl, t)?,
        None => None,
    };
    let tta = TimeToAccuracy {
        version: 1,
        architecture: arch,
        target: args.target,
        seconds,
        final_seconds: tl.final_seconds(),
    };
    write_json(&args.out.join(format!("{stem}.tta.json")), &tta)?;
    if !quiet {
        match (args.target, seconds) {
            (Some(t), Some(s)) => println!("accuracy {t} reached at {s:.3} s"),
            (Some(t), None) => println!("accuracy {t} not reached"),
            _ => {}
        }
        println!("total {:.3} s", tl.final_seconds());
    }
    Ok(tl)
}

#[derive(Debug, Serialize)]
struct WorkerStats {
    samples: usize,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct EdgeStats {
    samples: usize,
    labels: Vec<usize>,
    workers: Vec<WorkerStats>,
}

#[derive(Debug, Serialize)]
struct SeedStats {
    seed: u64,
    train_samples: usize,
    edges: Vec<EdgeStats>,
}

#[derive(Debug, Serialize)]
struct PartitionStats {
    version: u32,
    seeds: Vec<SeedStats>,
}

pub fn cmd_partition_stats(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: Option<&PathBuf>,
    quiet: bool,
) -> CliResult<()> {
    let built = build_all(cfg, seeds)?;
    let stats = PartitionStats {
        version: 1,
        seeds: seeds
            .iter()
            .zip(&built)
            .map(|(&seed, b)| {
                let counts = b.shards.sample_counts();
                let labels = b.shards.label_sets(&b.train);
                let edges = counts
                    .iter()
                    .zip(&labels)
                    .map(|(c, l)| EdgeStats {
                        samples: c.iter().sum(),
                        labels: l
                            .iter()
                            .flatten()
                            .copied()
                            .collect::<std::collections::BTreeSet<_>>()
                            .into_iter()
                            .collect(),
                        workers: c
                            .iter()
                            .zip(l)
                            .map(|(&samples, set)| WorkerStats {
                                samples,
                                labels: set.iter().copied().collect(),
                            })
                            .collect(),
                    })
                    .collect();
                SeedStats {
                    seed,
                    train_samples: b.train.len(),
                    edges,
                }
            })
            .collect(),
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("partition_stats.json"), &stats)?;
    }
    if !quiet || out.is_none() {
        let text = serde_json::to_string_pretty(&stats).map_err(hiermo::Error::from)?;
        println!("{text}");
    }
    Ok(())
}
