//! Experiment configuration files.

use crate::error::{CliError, CliResult};
use hiermo::engine::{AlgorithmKind, EdgeMomentumReset, HyperParams};
use hiermo::experiment::{DataSource, EstimationSettings, PartitionSpec, Scenario};
use hiermo::models::ModelKind;
use hiermo::planner::{DelayProfile, PlannerConstants};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

/// A delay profile given inline or as a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Path(PathBuf),
    Inline(DelayProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataSource,
    #[serde(default)]
    pub holdout_fraction: f64,
    pub partition: PartitionSpec,
    pub model: ModelKind,
    pub workers_per_edge: Vec<usize>,
    pub hyperparams: HyperParams,
    pub algorithms: Vec<AlgorithmKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub delay_profile: Option<ProfileRef>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Mini-batch size per local step; full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub edge_momentum_reset: EdgeMomentumReset,
    #[serde(default)]
    pub estimation: EstimationSettings,
}

impl ExperimentConfig {
    /// Parse and validate a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataSource::Csv(c) = &mut cfg.data {
            c.path = base.join(&c.path);
        }
        if let Some(ProfileRef::Path(p)) = &mut cfg.delay_profile {
            *p = base.join(&*p);
        }
        if let Some(dir) = &mut cfg.output_dir {
            *dir = base.join(&*dir);
        }
        cfg.validate().map_err(|m| CliError::config(path, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            ));
        }
        self.scenario().validate().map_err(|e| e.to_string())?;
        if self.algorithms.is_empty() {
            return Err("algorithms: at least one is required".into());
        }
        let distinct: BTreeSet<_> = self.algorithms.iter().collect();
        if distinct.len() != self.algorithms.len() {
            return Err("algorithms: entries must be distinct".into());
        }
        check_seeds(&self.seeds)?;
        for &alg in &self.algorithms {
            self.hyperparams
                .validate_for(alg)
                .map_err(|e| format!("hyperparams ({alg}): {e}"))?;
        }
        if self.batch_size == Some(0) {
            return Err("batch_size: must be positive".into());
        }
        if let Some(ProfileRef::Inline(p)) = &self.delay_profile {
            p.validate().map_err(|e| format!("delay_profile: {e}"))?;
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            data: self.data.clone(),
            holdout_fraction: self.holdout_fraction,
            partition: self.partition,
            model: self.model,
            workers_per_edge: self.workers_per_edge.clone(),
        }
    }

    pub fn delay_profile(&self) -> CliResult<Option<DelayProfile>> {
        match &self.delay_profile {
            None => Ok(None),
            Some(ProfileRef::Inline(p)) => Ok(Some(p.clone())),
            Some(ProfileRef::Path(p)) => load_profile(p).map(Some),
        }
    }
}

pub fn check_seeds(seeds: &[u64]) -> Result<(), String> {
    if seeds.is_empty() {
        return Err("seeds: at least one is required".into());
    }
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err("seeds: entries must be distinct".into());
    }
    Ok(())
}

/// Parse a comma-separated seed list such as `1,2,3`.
pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--seeds: {x:?} is not a seed")))
        })
        .collect::<CliResult<Vec<u64>>>()?;
    check_seeds(&seeds).map_err(CliError::Usage)?;
    Ok(seeds)
}

pub fn load_profile(path: &Path) -> CliResult<DelayProfile> {
    let p: DelayProfile = read_json(path)?;
    p.validate().map_err(|e| CliError::config(path, e))?;
    Ok(p)
}

pub fn load_constants(path: &Path) -> CliResult<PlannerConstants> {
    let k: PlannerConstants = read_json(path)?;
    if k.version != 1 {
        return Err(CliError::config(
            path,
            format!("version: expected 1, found {}", k.version),
        ));
    }
    Ok(k)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::config(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "version": 1,
        "data": {"source": "synthetic", "kind": "logreg", "n": 200, "m": 4, "noise": 1.0},
        "partition": {"scheme": "iid"},
        "model": {"type": "logistic_regression"},
        "workers_per_edge": [2, 2],
        "hyperparams": {"eta": 0.1, "gamma": 0.5, "gamma_a": 0.5, "tau": 2, "pi": 2, "T": 8},
        "algorithms": ["HierMo", "HierFAVG"],
        "seeds": [1, 2]
    }"#;

    fn parse(text: &str) -> Result<ExperimentConfig, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn base_config_parses() {
        let cfg = parse(BASE).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.edge_momentum_reset, EdgeMomentumReset::Restart);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = parse(&BASE.replace("\"seeds\"", "\"seed_list\"")).unwrap_err();
        assert!(err.contains("seed_list"), "{err}");
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let err = parse(&BASE.replace("[1, 2]", "[3, 3]")).unwrap_err();
        assert!(err.contains("seeds"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = parse(&BASE.replace("\"version\": 1", "\"version\": 2")).unwrap_err();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn seed_flag_parsing() {
        assert_eq!(parse_seeds("4, 5,6").unwrap(), vec![4, 5, 6]);
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn inline_and_path_profiles() {
        let inline = BASE.replace(
            "\"seeds\": [1, 2]",
            r#""seeds": [1, 2], "delay_profile": {"theta_w": 0.1, "theta_e": 0.2,
               "theta_c": 0.3, "phi_w2e": 0.4, "phi_e2c": 0.5, "budget": 100}"#,
        );
        assert!(matches!(
            parse(&inline).unwrap().delay_profile,
            Some(ProfileRef::Inline(_))
        ));
        let path = BASE.replace(
            "\"seeds\": [1, 2]",
            r#""seeds": [1, 2], "delay_profile": "d.json""#,
        );
        assert!(matches!(
            parse(&path).unwrap().delay_profile,
            Some(ProfileRef::Path(_))
        ));
    }
}
