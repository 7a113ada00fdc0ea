//! Random hyper-parameter search over model and training settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{train, TrainConfig, TrainedModel};
use crate::architectures::ArchConfig;
use crate::dataset::PairDataset;
use crate::error::{Error, Result};
use crate::seeds;

/// Values a single hyper-parameter may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Values(Vec<Value>),
    LogUniform { log_uniform: [f64; 2] },
    Uniform { uniform: [f64; 2] },
}

impl ParamRange {
    fn validate(&self, key: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("search parameter {key}: {msg}")));
        match self {
            ParamRange::Values(v) if v.is_empty() => bad("empty value list"),
            ParamRange::LogUniform { log_uniform: [a, b] } if !(*a > 0.0 && a <= b && b.is_finite()) => {
                bad("log_uniform needs 0 < low <= high")
            }
            ParamRange::Uniform { uniform: [a, b] } if !(a.is_finite() && b.is_finite() && a <= b) => {
                bad("uniform needs finite low <= high")
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut seeds::Rng) -> Value {
        match self {
            ParamRange::Values(v) => v[rng.random_range(0..v.len())].clone(),
            ParamRange::LogUniform { log_uniform: [a, b] } => {
                let (la, lb) = (a.ln(), b.ln());
                Value::from(if la == lb { *a } else { rng.random_range(la..lb).exp() })
            }
            ParamRange::Uniform { uniform: [a, b] } => Value::from(if a == b { *a } else { rng.random_range(*a..*b) }),
        }
    }
}

fn default_runs() -> usize {
    10
}

/// Keys are `model.<field>` or `train.<field>`; dotted suffixes reach
/// nested fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    pub params: BTreeMap<String, ParamRange>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        for (key, range) in &self.params {
            if !(key.starts_with("model.") || key.starts_with("train.")) || key == "model.arch" {
                return Err(Error::Config(format!("search parameter {key} must start with model. or train.")));
            }
            range.validate(key)?;
        }
        Ok(())
    }

    /// Assignments for every trial. A fully discrete space is sampled
    /// without replacement and never yields more trials than grid points.
    pub fn assignments(&self, seed: u64) -> Vec<BTreeMap<String, Value>> {
        let mut rng = seeds::rng(seeds::derive(seed, "search"));
        let lists: Option<Vec<(&String, &Vec<Value>)>> = self
            .params
            .iter()
            .map(|(k, r)| match r {
                ParamRange::Values(v) => Some((k, v)),
                _ => None,
            })
            .collect();
        match lists {
            Some(lists) => {
                let grid = lists.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len())).unwrap_or(usize::MAX);
                let n = self.n_runs.min(grid);
                index::sample(&mut rng, grid, n)
                    .into_iter()
                    .map(|mut flat| {
                        lists
                            .iter()
                            .map(|(k, v)| {
                                let pick = v[flat % v.len()].clone();
                                flat /= v.len();
                                ((*k).clone(), pick)
                            })
                            .collect()
                    })
                    .collect()
            }
            None => (0..self.n_runs)
                .map(|_| self.params.iter().map(|(k, r)| (k.clone(), r.sample(&mut rng))).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Diverged(String),
    Invalid(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub assignment: BTreeMap<String, Value>,
    pub status: TrialStatus,
    /// Validation AUC of the kept epoch.
    pub val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub model_config: Option<ArchConfig>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<TrialResult>,
    /// Position in `trials` of the winner.
    pub best: usize,
    pub best_model: TrainedModel,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &TrialResult {
        &self.trials[self.best]
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {path}: {part} is not inside an object")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown field {part} in {path}")))?;
        if i + 1 == parts.len() {
            *slot = v;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Applies `model.*` and `train.*` overrides to the base configurations.
pub fn apply_assignment(
    model: &ArchConfig,
    train_cfg: &TrainConfig,
    assignment: &BTreeMap<String, Value>,
) -> Result<(ArchConfig, TrainConfig)> {
    let mut m = serde_json::to_value(model)?;
    let mut t = serde_json::to_value(train_cfg)?;
    for (key, v) in assignment {
        match key.split_once('.') {
            Some(("model", rest)) => set_path(&mut m, rest, v.clone())?,
            Some(("train", rest)) => set_path(&mut t, rest, v.clone())?,
            _ => return Err(Error::Config(format!("search parameter {key} must start with model. or train."))),
        }
    }
    let m: ArchConfig = serde_json::from_value(m).map_err(|e| Error::Config(e.to_string()))?;
    let t: TrainConfig = serde_json::from_value(t).map_err(|e| Error::Config(e.to_string()))?;
    t.validate()?;
    Ok((m, t))
}

fn run_trial(
    trial: usize,
    assignment: BTreeMap<String, Value>,
    model: &ArchConfig,
    train_cfg: &TrainConfig,
    data: &PairDataset,
) -> (TrialResult, Option<TrainedModel>) {
    let mut result = TrialResult {
        trial,
        assignment,
        status: TrialStatus::Completed,
        val_auc: None,
        best_epoch: None,
        model_config: None,
        train_config: None,
    };
    let built = apply_assignment(model, train_cfg, &result.assignment)
        .and_then(|(m, t)| m.build().map(|spec| (m, t, spec)));
    let (m, t, spec) = match built {
        Ok(x) => x,
        Err(e) => {
            result.status = TrialStatus::Invalid(e.to_string());
            return (result, None);
        }
    };
    result.model_config = Some(m);
    result.train_config = Some(t.clone());
    match train(spec, data, &t) {
        Ok(trained) => {
            result.best_epoch = Some(trained.best_epoch);
            result.val_auc = trained.history.get(trained.best_epoch.wrapping_sub(1)).map(|r| r.val_auc);
            (result, Some(trained))
        }
        Err(e @ Error::Divergence { .. }) => {
            result.status = TrialStatus::Diverged(e.to_string());
            (result, None)
        }
        Err(e) => {
            result.status = TrialStatus::Failed(e.to_string());
            (result, None)
        }
    }
}

/// Trains one model per sampled assignment (in parallel) and keeps the one
/// with the highest validation AUC. Trials share the base seed so they
/// differ only in their settings.
pub fn hyperparameter_search(
    model: &ArchConfig,
    train_cfg: &TrainConfig,
    data: &PairDataset,
    space: &SearchSpace,
) -> Result<SearchOutcome> {
    space.validate()?;
    train_cfg.validate()?;
    let runs: Vec<(TrialResult, Option<TrainedModel>)> = space
        .assignments(train_cfg.seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, a)| run_trial(i, a, model, train_cfg, data))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, (r, _)) in runs.iter().enumerate() {
        if let Some(auc) = r.val_auc.filter(|a| a.is_finite()) {
            if best.is_none_or(|(_, b)| auc > b) {
                best = Some((i, auc));
            }
        }
    }
    let Some((best, _)) = best else {
        let reasons: Vec<String> = runs.iter().map(|(r, _)| format!("trial {}: {:?}", r.trial, r.status)).collect();
        return Err(Error::Validation(format!("no search trial completed: {}", reasons.join("; "))));
    };
    let mut trials = Vec::with_capacity(runs.len());
    let mut best_model = None;
    for (i, (r, m)) in runs.into_iter().enumerate() {
        if i == best {
            best_model = m;
        }
        trials.push(r);
    }
    Ok(SearchOutcome { trials, best, best_model: best_model.expect("winning trial has a model") })
}

/// Writes `leaderboard.csv` (best first) and `leaderboard.json` into `dir`.
pub fn write_leaderboard(trials: &[TrialResult], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ranked: Vec<&TrialResult> = trials.iter().collect();
    ranked.sort_by(|a, b| {
        let key = |t: &TrialResult| t.val_auc.filter(|v| v.is_finite()).unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.trial.cmp(&b.trial))
    });
    let path = dir.join("leaderboard.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["rank", "trial", "status", "val_auc", "best_epoch", "assignment"])?;
    for (rank, t) in ranked.iter().enumerate() {
        let status = match &t.status {
            TrialStatus::Completed => "completed",
            TrialStatus::Diverged(_) => "diverged",
            TrialStatus::Invalid(_) => "invalid",
            TrialStatus::Failed(_) => "failed",
        };
        w.write_record([
            (rank + 1).to_string(),
            t.trial.to_string(),
            status.to_string(),
            t.val_auc.map(|v| v.to_string()).unwrap_or_default(),
            t.best_epoch.map(|v| v.to_string()).unwrap_or_default(),
            serde_json::to_string(&t.assignment)?,
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("leaderboard.json");
    fs::write(&path, serde_json::to_string_pretty(&ranked)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::ArchId;
    use crate::training::tests::{identical_pairs, tiny_dtc};
    use serde_json::json;

    fn space(v: serde_json::Value) -> SearchSpace {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn range_forms_parse() {
        let s = space(json!({"params": {
            "train.learning_rate": {"log_uniform": [0.001, 0.1]},
            "train.batch_size": [8, 16],
            "model.dropout": {"uniform": [0.0, 0.5]}
        }}));
        assert_eq!(s.n_runs, 10);
        assert!(matches!(s.params["train.batch_size"], ParamRange::Values(_)));
        s.validate().unwrap();
        for a in s.assignments(1) {
            let lr = a["train.learning_rate"].as_f64().unwrap();
            assert!((0.001..=0.1).contains(&lr));
        }
    }

    #[test]
    fn grid_is_sampled_without_replacement() {
        let s = space(json!({"n_runs": 50, "params": {"train.batch_size": [8, 16, 32], "model.growth": [4, 6]}}));
        let a = s.assignments(7);
        assert_eq!(a.len(), 6);
        let mut seen: Vec<String> = a.iter().map(|x| serde_json::to_string(x).unwrap()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_eq!(s.assignments(7), a);
    }

    #[test]
    fn bad_spaces_are_rejected() {
        assert!(space(json!({"params": {"lr": [1]}})).validate().is_err());
        assert!(space(json!({"params": {"train.learning_rate": {"log_uniform": [0.0, 1.0]}}})).validate().is_err());
        assert!(space(json!({"n_runs": 0, "params": {}})).validate().is_err());
        assert!(space(json!({"params": {"train.x": []}})).validate().is_err());
    }

    #[test]
    fn overrides_apply_and_unknown_fields_fail() {
        let base = tiny_dtc(8).config;
        let t = TrainConfig::defaults_for(ArchId::Dtc);
        let a = BTreeMap::from([("model.growth".to_string(), json!(5)), ("train.batch_size".to_string(), json!(8))]);
        let (m, t2) = apply_assignment(&base, &t, &a).unwrap();
        let ArchConfig::Dtc(c) = m else { panic!() };
        assert_eq!(c.growth, 5);
        assert_eq!(t2.batch_size, 8);
        let bad = BTreeMap::from([("model.nonsense".to_string(), json!(1))]);
        assert!(apply_assignment(&base, &t, &bad).is_err());
    }

    #[test]
    fn search_picks_best_trial_and_writes_leaderboard() {
        let data = identical_pairs(48, 8, 2);
        let base = tiny_dtc(8).config;
        let t = TrainConfig { max_epochs: 1, batch_size: 16, seed: 1, validation_fraction: 0.25, ..TrainConfig::defaults_for(ArchId::Dtc) };
        let s = space(json!({"n_runs": 3, "params": {"train.learning_rate": [0.0, 0.5, 1e9]}}));
        let out = hyperparameter_search(&base, &t, &data, &s).unwrap();
        assert_eq!(out.trials.len(), 3);
        let best_auc = out.best_trial().val_auc.unwrap();
        for tr in &out.trials {
            if let Some(v) = tr.val_auc {
                assert!(v <= best_auc);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        write_leaderboard(&out.trials, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("leaderboard.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn all_failed_trials_is_an_error() {
        let data = identical_pairs(48, 8, 2);
        let base = tiny_dtc(8).config;
        let t = TrainConfig { max_epochs: 1, batch_size: 16, validation_fraction: 0.25, ..TrainConfig::defaults_for(ArchId::Dtc) };
        let s = space(json!({"n_runs": 2, "params": {"train.batch_size": [0]}}));
        assert!(hyperparameter_search(&base, &t, &data, &s).is_err());
    }
}
