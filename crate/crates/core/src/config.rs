//! Run configuration, read from a single TOML file.
//!
//! Credentials never live here; remote backends read theirs from the
//! environment variable named by `api_key_env`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::arena::ArenaParams;
use crate::backend::{BackendHandle, MockBackend, RemoteBackend, RemoteConfig};
use crate::catalog::{Format, SourceSpec, SplitParams};
use crate::defects::CorpusParams;
use crate::diagnosis::Diagnoser;
use crate::error::{Error, Result};
use crate::orchestrator::OptimizeParams;
use crate::profile::UpdateStrategy;
use crate::recsys::{
    ExternalRecommender, Fpmc, FpmcParams, MarkovBaseline, PopularityBaseline, Recommender, TrainingData,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub format: Format,
    pub interactions: PathBuf,
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    #[serde(default)]
    pub strict: bool,
}

fn default_min_interactions() -> usize {
    5
}

impl DatasetConfig {
    pub fn source(&self) -> SourceSpec {
        SourceSpec {
            format: self.format,
            interactions: self.interactions.clone(),
            metadata: self.metadata.clone(),
            min_interactions: self.min_interactions,
            strict: self.strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        diagnosis_error_rate: f64,
    },
    Remote(RemoteConfig),
    /// Rule-based diagnosis without any completion calls; diagnoser role only.
    Oracle,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock {
            seed: 0,
            diagnosis_error_rate: 0.0,
        }
    }
}

impl BackendSpec {
    pub fn build(&self) -> Result<BackendHandle> {
        Ok(match self {
            BackendSpec::Mock {
                seed,
                diagnosis_error_rate,
            } => Arc::new(MockBackend::new(*seed).with_diagnosis_error_rate(*diagnosis_error_rate)),
            BackendSpec::Remote(cfg) => Arc::new(RemoteBackend::from_env(cfg.clone())?),
            BackendSpec::Oracle => {
                return Err(Error::Config(vec!["the oracle can only fill the diagnoser role".into()]))
            }
        })
    }

    pub fn diagnoser(&self) -> Result<Diagnoser> {
        match self {
            BackendSpec::Oracle => Ok(Diagnoser::Oracle),
            other => Ok(Diagnoser::Backend(other.build()?)),
        }
    }

    fn check(&self, role: &str, problems: &mut Vec<String>) {
        match self {
            BackendSpec::Mock {
                diagnosis_error_rate, ..
            } if !(0.0..=1.0).contains(diagnosis_error_rate) => {
                problems.push(format!("backends.{role}.diagnosis_error_rate must be in [0, 1]"))
            }
            BackendSpec::Remote(r) => {
                if r.base_url.is_empty() {
                    problems.push(format!("backends.{role}.base_url is empty"));
                }
                if r.max_attempts == 0 {
                    problems.push(format!("backends.{role}.max_attempts must be at least 1"));
                }
                if r.requests_per_second < 0.0 {
                    problems.push(format!("backends.{role}.requests_per_second must be non-negative"));
                }
            }
            BackendSpec::Oracle if role != "diagnoser" => {
                problems.push(format!("backends.{role}: the oracle can only fill the diagnoser role"))
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub simulator: BackendSpec,
    pub diagnoser: BackendSpec,
    pub treater: BackendSpec,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            simulator: BackendSpec::default(),
            diagnoser: BackendSpec::Oracle,
            treater: BackendSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RecommenderSpec {
    Fpmc(FpmcParams),
    Markov {
        #[serde(default = "one")]
        alpha: f64,
    },
    Popularity,
    ExternalProcess {
        name: String,
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
    ExternalHttp {
        name: String,
        url: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_timeout() -> u64 {
    30
}

impl RecommenderSpec {
    pub fn name(&self) -> &str {
        match self {
            RecommenderSpec::Fpmc(_) => "fpmc",
            RecommenderSpec::Markov { .. } => "markov",
            RecommenderSpec::Popularity => "popularity",
            RecommenderSpec::ExternalProcess { name, .. } | RecommenderSpec::ExternalHttp { name, .. } => name,
        }
    }

    pub fn build(&self, data: &TrainingData) -> Result<Box<dyn Recommender>> {
        Ok(match self {
            RecommenderSpec::Fpmc(p) => Box::new(Fpmc::train(data, p)?),
            RecommenderSpec::Markov { alpha } => Box::new(MarkovBaseline::fit(data, *alpha)),
            RecommenderSpec::Popularity => Box::new(PopularityBaseline::fit(data)),
            RecommenderSpec::ExternalProcess { name, command, args } => {
                Box::new(ExternalRecommender::spawn(name.clone(), command, args)?)
            }
            RecommenderSpec::ExternalHttp {
                name,
                url,
                timeout_secs,
            } => Box::new(ExternalRecommender::http(
                name.clone(),
                url.clone(),
                Duration::from_secs(*timeout_secs),
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArenaConfig {
    pub negatives: usize,
    pub rounds: usize,
    pub strategies: Vec<UpdateStrategy>,
    pub reprompts: u32,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            negatives: 19,
            rounds: 10,
            strategies: vec![UpdateStrategy::None, UpdateStrategy::WithoutGt, UpdateStrategy::WithGt],
            reprompts: 2,
        }
    }
}

impl ArenaConfig {
    pub fn params(&self, strategy: UpdateStrategy) -> ArenaParams {
        ArenaParams {
            negatives: self.negatives,
            rounds: Some(self.rounds),
            strategy,
            reprompts: self.reprompts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    /// Simulated users sampled from the eligible ones.
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default = "default_init_reprompts")]
    pub reprompts: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitParams,
    #[serde(default)]
    pub backends: Backends,
    #[serde(default)]
    pub optimize: OptimizeParams,
    #[serde(default)]
    pub defects: CorpusParams,
    #[serde(default = "default_recommenders")]
    pub recommenders: Vec<RecommenderSpec>,
    #[serde(default)]
    pub arena: ArenaConfig,
}

fn default_users() -> usize {
    1000
}

fn default_init_reprompts() -> u32 {
    2
}

fn default_recommenders() -> Vec<RecommenderSpec> {
    vec![RecommenderSpec::Fpmc(FpmcParams::default())]
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and resolve relative dataset paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.interactions);
        if let Some(m) = cfg.dataset.metadata.as_mut() {
            resolve(m);
        }
        Ok(cfg)
    }

    /// Every offending field, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.dataset.name.trim().is_empty() {
            p.push("dataset.name is empty".to_string());
        }
        if self.dataset.min_interactions == 0 {
            p.push("dataset.min_interactions must be at least 1".into());
        }
        if !(self.split.alpha > 0.0 && self.split.alpha < 1.0) {
            p.push(format!("split.alpha must be in (0, 1), got {}", self.split.alpha));
        }
        if self.split.test_n == 0 {
            p.push("split.test_n must be at least 1".into());
        }
        if self.split.max_len <= self.split.test_n + 1 {
            p.push("split.max_len must exceed split.test_n + 1".into());
        }
        if self.users == 0 {
            p.push("users must be at least 1".into());
        }
        if self.optimize.batch_size == 0 {
            p.push("optimize.batch_size must be at least 1".into());
        }
        let d = &self.defects;
        if d.mix.iter().any(|m| *m < 0.0 || !m.is_finite()) || d.mix.iter().sum::<f64>() <= 0.0 {
            p.push("defects.mix must be non-negative with a positive sum".into());
        }
        if !(d.rho > 0.0 && d.rho <= 1.0) {
            p.push(format!("defects.rho must be in (0, 1], got {}", d.rho));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            p.push(format!("defects.train_fraction must be in (0, 1), got {}", d.train_fraction));
        }
        self.backends.simulator.check("simulator", &mut p);
        self.backends.diagnoser.check("diagnoser", &mut p);
        self.backends.treater.check("treater", &mut p);
        let mut names = std::collections::BTreeSet::new();
        for (i, r) in self.recommenders.iter().enumerate() {
            if !names.insert(r.name()) {
                p.push(format!("recommenders[{i}]: duplicate name {}", r.name()));
            }
            if let RecommenderSpec::Fpmc(f) = r {
                if f.dim == 0 || f.batch_size == 0 {
                    p.push(format!("recommenders[{i}]: dim and batch_size must be at least 1"));
                }
                if f.learning_rate.is_nan() || f.learning_rate <= 0.0 || f.reg < 0.0 || f.init_std < 0.0 {
                    p.push(format!("recommenders[{i}]: learning_rate must be positive, reg and init_std non-negative"));
                }
            }
            if let RecommenderSpec::Markov { alpha } = r {
                if alpha.is_nan() || *alpha <= 0.0 {
                    p.push(format!("recommenders[{i}]: markov alpha must be positive"));
                }
            }
        }
        if self.arena.rounds > self.split.test_n {
            p.push("arena.rounds cannot exceed split.test_n".into());
        }
        if self.arena.negatives == 0 {
            p.push("arena.negatives must be at least 1".into());
        }
        if self.arena.strategies.is_empty() {
            p.push("arena.strategies is empty".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Hash of the canonical JSON form; identifies a run's configuration.
    pub fn hash(&self) -> String {
        seed::short_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
name = "toy"
format = "movielens-dat"
interactions = "ratings.dat"
metadata = "movies.dat"
"#;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = Config::parse(MINIMAL).unwrap();
        assert_eq!(c.optimize.batch_size, 4);
        assert_eq!(c.split.alpha, 0.6);
        assert_eq!(c.arena.negatives + 1, 20);
        assert_eq!(c.arena.rounds, 10);
        assert_eq!(c.users, 1000);
        assert_eq!(c.backends.diagnoser, BackendSpec::Oracle);
        assert!(matches!(c.recommenders[0], RecommenderSpec::Fpmc(p) if p.dim == 64));
    }

    #[test]
    fn alpha_zero_rejected() {
        let text = format!("{MINIMAL}\n[split]\nalpha = 0.0\n");
        match Config::parse(&text) {
            Err(Error::Config(p)) => assert!(p[0].contains("split.alpha")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_problems_listed() {
        let text = format!("users = 0\n{MINIMAL}\n[optimize]\nbatch_size = 0\n[arena]\nnegatives = 0\n");
        match Config::parse(&text) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!("{MINIMAL}\n[optimize]\nbatch = 3\n");
        assert!(matches!(Config::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn tagged_backends_and_recommenders() {
        let text = format!(
            r#"{MINIMAL}
[backends.simulator]
kind = "remote"
base_url = "http://localhost:9"
model = "m"

[backends.diagnoser]
kind = "mock"
diagnosis_error_rate = 0.2

[[recommenders]]
kind = "markov"

[[recommenders]]
kind = "fpmc"
dim = 8
epochs = 3
"#
        );
        let c = Config::parse(&text).unwrap();
        assert!(matches!(&c.backends.simulator, BackendSpec::Remote(r) if r.model == "m" && r.max_attempts == 3));
        let names: Vec<&str> = c.recommenders.iter().map(|r| r.name()).collect();
        assert_eq!(names, ["markov", "fpmc"]);
    }

    #[test]
    fn oracle_not_allowed_as_simulator() {
        let text = format!("{MINIMAL}\n[backends.simulator]\nkind = \"oracle\"\n");
        assert!(matches!(Config::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
