//! Random-search hyperparameter tuning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SamplingConfig;
use crate::seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Dist {
    LogUniform {
        lo: f64,
        hi: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Uniform over `values`; each entry of `paired` is a parallel list
    /// whose element at the chosen position is emitted alongside.
    Choice {
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        paired: BTreeMap<String, Vec<f64>>,
    },
}

impl Dist {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("parameter {name}: {msg}")));
        match self {
            Dist::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && lo < hi && hi.is_finite()) {
                    return bad("log-uniform needs 0 < lo < hi");
                }
            }
            Dist::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return bad("uniform needs lo < hi");
                }
            }
            Dist::Choice { values, paired } => {
                if values.is_empty() {
                    return bad("choice list is empty");
                }
                if paired.values().any(|p| p.len() != values.len()) {
                    return bad("paired list length differs from the choice list");
                }
            }
        }
        Ok(())
    }
}

/// Named parameter distributions, iterated in name order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ParamSpace(pub BTreeMap<String, Dist>);

/// One sampled assignment of parameter values (including paired ones).
pub type Config = BTreeMap<String, f64>;

impl ParamSpace {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::config("parameter space is empty"));
        }
        for (name, d) in &self.0 {
            d.validate(name)?;
            if let Dist::Choice { paired, .. } = d {
                if let Some(clash) = paired.keys().find(|k| self.0.contains_key(*k)) {
                    return Err(Error::config(format!(
                        "paired parameter {clash} is also declared on its own"
                    )));
                }
            }
        }
        Ok(())
    }

    /// All names a sampled config will contain, sorted.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.0.keys().cloned().collect();
        for d in self.0.values() {
            if let Dist::Choice { paired, .. } = d {
                names.extend(paired.keys().cloned());
            }
        }
        names.sort();
        names
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: ParamSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    /// Training-time space: learning rate, Adam weight decay, dropout.
    pub fn training() -> Self {
        let mut m = BTreeMap::new();
        m.insert(
            "learning_rate".into(),
            Dist::LogUniform { lo: 1e-5, hi: 1e-2 },
        );
        m.insert(
            "weight_decay".into(),
            Dist::LogUniform { lo: 1e-10, hi: 1e-2 },
        );
        m.insert("dropout".into(), Dist::Uniform { lo: 0.0, hi: 0.99 });
        ParamSpace(m)
    }

    /// Evaluation-time sampling space.
    pub fn sampling() -> Self {
        let mut m = BTreeMap::new();
        let mut paired = BTreeMap::new();
        paired.insert(
            "samples_per_iteration".into(),
            vec![320.0, 160.0, 107.0, 80.0, 64.0, 53.0, 40.0],
        );
        m.insert(
            "iterations".into(),
            Dist::Choice {
                values: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0],
                paired,
            },
        );
        m.insert(
            "neighbours".into(),
            Dist::Choice {
                values: vec![4.0, 8.0, 16.0, 32.0, 48.0, 64.0],
                paired: BTreeMap::new(),
            },
        );
        m.insert("random_rate".into(), Dist::Uniform { lo: 0.0, hi: 0.75 });
        m.insert(
            "random_delta".into(),
            Dist::LogUniform {
                lo: 1e-4,
                hi: 0.5,
            },
        );
        ParamSpace(m)
    }
}

/// Draw every parameter independently; paired values follow their choice.
pub fn sample_config(space: &ParamSpace, seed: u64) -> Result<Config> {
    space.validate()?;
    let mut rng = seed::rng_for(seed, &["tune-sample".into()]);
    let mut out = Config::new();
    for (name, d) in &space.0 {
        match d {
            Dist::LogUniform { lo, hi } => {
                let v = rng.gen_range(lo.ln()..hi.ln()).exp();
                out.insert(name.clone(), v.clamp(*lo, *hi));
            }
            Dist::Uniform { lo, hi } => {
                out.insert(name.clone(), rng.gen_range(*lo..*hi));
            }
            Dist::Choice { values, paired } => {
                let k = rng.gen_range(0..values.len());
                out.insert(name.clone(), values[k]);
                for (p, list) in paired {
                    out.insert(p.clone(), list[k]);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: Config,
    /// Mean objective over repeats; `None` when the trial failed.
    pub objective: Option<f64>,
    pub seed: u64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub log: Vec<TrialRecord>,
}

/// Evaluate `trials` sampled configs, each `repeats` times with distinct
/// derived seeds, and return the best mean. A trial whose objective errors
/// or is non-finite is logged as failed and never selected.
pub fn random_search<F>(
    space: &ParamSpace,
    objective: F,
    trials: usize,
    repeats: usize,
    seed: u64,
    goal: Goal,
) -> Result<SearchOutcome>
where
    F: Fn(&Config, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if trials == 0 || repeats == 0 {
        return Err(Error::config("trials and repeats must be at least 1"));
    }
    let log = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = seed::derive(seed, &["trial".into(), trial.into()]);
            let config = sample_config(space, trial_seed)?;
            let mut total = 0.0;
            let mut ok = true;
            for r in 0..repeats {
                match objective(&config, seed::derive(trial_seed, &["repeat".into(), r.into()])) {
                    Ok(v) if v.is_finite() => total += v,
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            Ok(TrialRecord {
                trial,
                config,
                objective: ok.then(|| total / repeats as f64),
                seed: trial_seed,
                repeats,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let better = |a: f64, b: f64| match goal {
        Goal::Maximize => a > b,
        Goal::Minimize => a < b,
    };
    let mut best: Option<&TrialRecord> = None;
    for rec in &log {
        if let Some(v) = rec.objective {
            if best.is_none_or(|b| better(v, b.objective.expect("best is finite"))) {
                best = Some(rec);
            }
        }
    }
    let best = best.cloned().ok_or(Error::AllTrialsFailed(trials))?;
    Ok(SearchOutcome { best, log })
}

/// Apply the recognised training parameters of `config` to `base`.
pub fn apply_training(config: &Config, base: &TrainConfig) -> TrainConfig {
    let mut out = base.clone();
    if let Some(&v) = config.get("learning_rate") {
        out.learning_rate = v;
    }
    if let Some(&v) = config.get("weight_decay") {
        out.weight_decay = v;
    }
    if let Some(&v) = config.get("dropout") {
        out.dropout = v;
    }
    out
}

/// Apply the recognised sampling parameters of `config` to `base`.
pub fn apply_sampling(config: &Config, base: &SamplingConfig) -> SamplingConfig {
    let mut out = base.clone();
    if let Some(&v) = config.get("iterations") {
        out.iterations = v as usize;
    }
    if let Some(&v) = config.get("neighbours") {
        out.neighbours = v as usize;
    }
    if let Some(&v) = config.get("random_rate") {
        out.random_rate = v;
    }
    if let Some(&v) = config.get("random_delta") {
        out.random_delta = v;
    }
    out
}

/// One row per trial: `trial`, parameter columns in name order,
/// `objective` (`failed` when absent), `seed`.
pub fn write_log(space: &ParamSpace, log: &[TrialRecord], path: &Path) -> Result<()> {
    let names = space.names();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trial".to_string()];
    header.extend(names.iter().cloned());
    header.push("objective".into());
    header.push("seed".into());
    w.write_record(&header)?;
    for rec in log {
        let mut row = vec![rec.trial.to_string()];
        row.extend(
            names
                .iter()
                .map(|n| rec.config.get(n).map_or(String::new(), |v| v.to_string())),
        );
        row.push(rec.objective.map_or("failed".into(), |v| v.to_string()));
        row.push(rec.seed.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
