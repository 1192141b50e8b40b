//! Scenario assembly shared by the command line and the acceptance suite:
//! data source, held-out split, partition and model, built from one seed.

use crate::analysis::{
    estimate_constants, stationary_proxy, verify_theorems, BoundReport, EstimateInputs, ProbeSpec,
    SmoothnessEstimate, StepParams, DEFAULT_MU_MAX,
};
use crate::datasets::{
    generate_synthetic, load_csv, partition_iid, partition_label_limited, CsvSchema, Dataset,
    ShardAssignment, SyntheticSpec,
};
use crate::engine::{
    run, AlgorithmKind, EdgeMomentumReset, HyperParams, Problem, RunOptions, RunTrace,
};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ShardObjective};
use crate::vector::ModelVector;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    /// Each worker holds exactly `classes_per_worker` labels.
    LabelLimited {
        classes_per_worker: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub data: DataSource,
    #[serde(default)]
    pub holdout_fraction: f64,
    pub partition: PartitionSpec,
    pub model: ModelKind,
    /// Workers per edge node.
    pub workers_per_edge: Vec<usize>,
}

/// A materialized scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub model: Model,
    pub train: Dataset,
    pub shards: ShardAssignment,
    pub problem: Problem<ShardObjective>,
}

impl Built {
    pub fn x0(&self, seed: u64) -> ModelVector {
        self.model.init(seed)
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.workers_per_edge.is_empty() || self.workers_per_edge.contains(&0) {
            return Err(Error::invalid(
                "workers_per_edge",
                "need at least one edge and one worker per edge",
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec, seed),
            DataSource::Csv(c) => load_csv(&c.path, &c.schema),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Built> {
        self.validate()?;
        let full = self.dataset(seed)?;
        let (train, holdout) = if self.holdout_fraction > 0.0 {
            let (a, b) = full.split_holdout(self.holdout_fraction, seed)?;
            (a, Some(b))
        } else {
            (full, None)
        };
        let shards = match self.partition {
            PartitionSpec::Iid => partition_iid(&train, &self.workers_per_edge, seed)?,
            PartitionSpec::LabelLimited { classes_per_worker } => {
                partition_label_limited(&train, &self.workers_per_edge, classes_per_worker, seed)?
            }
        };
        let model = Model::for_dataset(self.model, &train)?;
        let problem = Problem::from_shards(model, &train, &shards, holdout)?;
        Ok(Built {
            model,
            train,
            shards,
            problem,
        })
    }
}

/// Settings of the constant-estimation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSettings {
    #[serde(default = "default_points")]
    pub probe_points: usize,
    #[serde(default = "default_radius")]
    pub probe_radius: f64,
    /// Centralized NAG iterations used to approximate `x*`.
    #[serde(default = "default_reference_iters")]
    pub reference_iters: usize,
    #[serde(default = "default_mu_max")]
    pub mu_max: f64,
}

fn default_points() -> usize {
    16
}
fn default_radius() -> f64 {
    1.0
}
fn default_reference_iters() -> usize {
    2000
}
fn default_mu_max() -> f64 {
    DEFAULT_MU_MAX
}

impl Default for EstimationSettings {
    fn default() -> Self {
        EstimationSettings {
            probe_points: default_points(),
            probe_radius: default_radius(),
            reference_iters: default_reference_iters(),
            mu_max: default_mu_max(),
        }
    }
}

/// Run HierMo with virtual recording, estimate constants from probes and
/// the trajectory, and check the deviation bounds.
pub fn bound_report(
    built: &Built,
    hp: &HyperParams,
    seed: u64,
    settings: &EstimationSettings,
    reset: EdgeMomentumReset,
) -> Result<(RunTrace, SmoothnessEstimate, BoundReport)> {
    let x0 = built.x0(seed);
    let opts = RunOptions::new(x0.clone())
        .seed(seed)
        .record_virtual(true)
        .edge_momentum_reset(reset);
    let trace = run(AlgorithmKind::HierMo, &built.problem, hp, &opts)?;
    let (x_star, _) = stationary_proxy(
        &built.problem,
        &x0,
        hp.eta,
        hp.gamma,
        settings.reference_iters,
    )?;
    let observations = trace.virtual_trace.as_ref().map(|v| &v.observations);
    let inputs = EstimateInputs {
        probe: ProbeSpec {
            num_points: settings.probe_points,
            radius: settings.probe_radius,
            seed,
        },
        center: &x_star,
        trajectory: observations,
        x_star: Some(&x_star),
        step: StepParams::from(hp),
        mu_max: settings.mu_max,
    };
    let est = estimate_constants(&built.problem, &inputs)?;
    let report = verify_theorems(&trace, &est)?;
    Ok((trace, est, report))
}
