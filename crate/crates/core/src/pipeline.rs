//! The staged experiment pipeline over one output directory.
//!
//! Stages run in a fixed order and record themselves in the manifest when they
//! finish; a later invocation with the same config skips completed stages.
//! Per-user work runs on a private thread pool and is re-sorted into sample
//! order before anything is written, so outputs do not depend on `jobs`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::{self, Confusion, Participants, RoundRecord, SelectionStats};
use crate::catalog::{self, Event, InteractionDataset, UserSplit};
use crate::config::Config;
use crate::corpus::{self, PretrainRecord};
use crate::defects::{self, DefectLabel, DefectSample, SourcePair, TemplateNegation};
use crate::error::{Error, Result};
use crate::orchestrator::{self, BatchRecord, OptimizationTrace, Roles};
use crate::profile::{self, UserProfile};
use crate::prompts;
use crate::recsys::{fpmc, TrainingData};
use crate::seed;
use crate::simulator::{self, Behavior};
use crate::store::{self, Manifest, RunDir, SCHEMA_VERSION};
use crate::treatment::{Reason, Suggestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    InitProfiles,
    Optimize,
    SynthesizeDefects,
    EmitCorpus,
    EvalDiagnostic,
    Interact,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::InitProfiles,
        Stage::Optimize,
        Stage::SynthesizeDefects,
        Stage::EmitCorpus,
        Stage::EvalDiagnostic,
        Stage::Interact,
        Stage::Report,
    ];

    /// What `run` executes when no stages are named.
    pub const DEFAULT_RUN: [Stage; 5] = [
        Stage::Ingest,
        Stage::InitProfiles,
        Stage::Optimize,
        Stage::Interact,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::InitProfiles => "init-profiles",
            Stage::Optimize => "optimize",
            Stage::SynthesizeDefects => "synthesize-defects",
            Stage::EmitCorpus => "emit-corpus",
            Stage::EvalDiagnostic => "eval-diagnostic",
            Stage::Interact => "interact",
            Stage::Report => "report",
        }
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::InitProfiles => &[Stage::Ingest],
            Stage::Optimize => &[Stage::InitProfiles],
            Stage::SynthesizeDefects => &[Stage::InitProfiles],
            Stage::EmitCorpus | Stage::EvalDiagnostic => &[Stage::SynthesizeDefects],
            Stage::Interact => &[Stage::Optimize],
            Stage::Report => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown stage {s:?}")]))
    }
}

pub mod files {
    pub const ITEMS: &str = "items.jsonl";
    pub const SEQUENCES: &str = "sequences.jsonl";
    pub const SPLITS: &str = "splits.jsonl";
    pub const EXCLUSIONS: &str = "exclusions.jsonl";
    pub const PROFILES_INITIAL: &str = "profiles_initial.jsonl";
    pub const PROFILES_OPTIMIZED: &str = "profiles_optimized.jsonl";
    pub const TRACES: &str = "traces.jsonl";
    pub const EVENTS: &str = "events.jsonl";
    pub const OPTIMIZE_SUMMARY: &str = "optimize_summary.csv";
    pub const JUDGMENTS: &str = "judgments.jsonl";
    pub const DEFECTS_TRAIN: &str = "defects_train.jsonl";
    pub const DEFECTS_TEST: &str = "defects_test.jsonl";
    pub const PRETRAIN: &str = "corpus/pretrain.jsonl";
    pub const FINETUNE_TRAIN: &str = "corpus/finetune_train.jsonl";
    pub const FINETUNE_TEST: &str = "corpus/finetune_test.jsonl";
    pub const DIAGNOSTIC: &str = "diagnostic.csv";
    pub const ROUNDS: &str = "rounds.jsonl";
    pub const METRICS: &str = "metrics.csv";
    pub const REPORT_DIR: &str = "report";
}

/// One user's optimization outcome, in the per-user summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub config_hash: String,
    pub user_id: String,
    pub steps: usize,
    pub discrepancies: usize,
    pub batches: usize,
    pub final_version: u32,
    pub inaccurate: usize,
    pub incomplete: usize,
    pub both: usize,
    pub dropped_tail: usize,
    pub ignored_after_once: usize,
    pub aborted: bool,
}

impl TraceSummary {
    pub const COLUMNS: [&'static str; 12] = [
        "config_hash",
        "user_id",
        "steps",
        "discrepancies",
        "batches",
        "final_version",
        "inaccurate",
        "incomplete",
        "both",
        "dropped_tail",
        "ignored_after_once",
        "aborted",
    ];

    fn of(config_hash: &str, trace: &OptimizationTrace, final_version: u32) -> Self {
        let mut counts = [0usize; 3];
        for b in &trace.batches {
            for l in b.labels() {
                counts[l.index()] += 1;
            }
        }
        Self {
            config_hash: config_hash.to_string(),
            user_id: trace.user_id.clone(),
            steps: trace.steps.len(),
            discrepancies: trace.discrepancies(),
            batches: trace.batches.len(),
            final_version,
            inaccurate: counts[DefectLabel::Inaccurate.index()],
            incomplete: counts[DefectLabel::Incomplete.index()],
            both: counts[DefectLabel::InaccurateAndIncomplete.index()],
            dropped_tail: trace.dropped_tail,
            ignored_after_once: trace.ignored_after_once,
            aborted: trace.error.is_some(),
        }
    }
}

/// One refinement batch, as logged to the events file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEvent {
    pub user_id: String,
    pub iteration: u32,
    pub boundary: usize,
    pub labels: Vec<DefectLabel>,
    pub reasons: Vec<Reason>,
    pub suggestions: Vec<Suggestion>,
    pub version_before: u32,
    pub version_after: u32,
}

impl BatchEvent {
    fn of(user_id: &str, b: &BatchRecord) -> Self {
        Self {
            user_id: user_id.to_string(),
            iteration: b.iteration,
            boundary: b.boundary,
            labels: b.labels(),
            reasons: b.reasons.clone(),
            suggestions: b.suggestions.clone(),
            version_before: b.version_before,
            version_after: b.version_after,
        }
    }
}

/// The simulator's verdict on a d_opt item under the initial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemJudgment {
    pub user_id: String,
    pub item: u32,
    pub rating: u8,
    pub interact: bool,
    pub rationale: String,
}

/// An arena round tagged with the run dimensions it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLine {
    pub recommender: String,
    pub simulator: String,
    #[serde(flatten)]
    pub round: RoundRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub config_hash: String,
    pub diagnoser: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: String,
    pub weak_evidence: usize,
    /// Row-major 3x3 confusion, true label by predicted label.
    pub confusion: String,
}

impl DiagnosticRow {
    pub const COLUMNS: [&'static str; 7] =
        ["config_hash", "diagnoser", "n", "correct", "accuracy", "weak_evidence", "confusion"];
}

/// One metrics row. `round` is a 1-based round number or `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_hash: String,
    pub dataset: String,
    pub recommender: String,
    pub strategy: String,
    pub simulator: String,
    pub round: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: String,
    pub recall: String,
    pub accuracy: String,
    pub f1: String,
    pub cum_precision: String,
    pub sel_precision: String,
    pub sel_recall: String,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 17] = [
        "config_hash",
        "dataset",
        "recommender",
        "strategy",
        "simulator",
        "round",
        "tp",
        "fp",
        "fn",
        "tn",
        "precision",
        "recall",
        "accuracy",
        "f1",
        "cum_precision",
        "sel_precision",
        "sel_recall",
    ];
}

pub fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}

/// Per-round and overall rows for one (recommender, strategy, simulator) cell.
/// `rounds` may come from many users in any order.
pub fn metric_rows(
    config_hash: &str,
    dataset: &str,
    recommender: &str,
    simulator: &str,
    strategy: &str,
    rounds: &[&RoundRecord],
) -> Vec<MetricsRow> {
    let mut by_round: BTreeMap<usize, (Confusion, SelectionStats)> = BTreeMap::new();
    for r in rounds {
        let (c, s) = by_round.entry(r.round).or_default();
        for j in &r.judgments {
            c.add(j.relevant, j.accepted);
        }
        s.add(r);
    }
    let row = |round: String, c: &Confusion, cum: &Confusion, s: &SelectionStats| MetricsRow {
        config_hash: config_hash.to_string(),
        dataset: dataset.to_string(),
        recommender: recommender.to_string(),
        strategy: strategy.to_string(),
        simulator: simulator.to_string(),
        round,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        precision: fmt_metric(c.precision()),
        recall: fmt_metric(c.recall()),
        accuracy: fmt_metric(c.accuracy()),
        f1: fmt_metric(c.f1()),
        cum_precision: fmt_metric(cum.precision()),
        sel_precision: fmt_metric(s.precision()),
        sel_recall: fmt_metric(s.recall()),
    };
    let mut out = Vec::new();
    let mut cum = Confusion::default();
    let mut all_sel = SelectionStats::default();
    for (round, (c, s)) in &by_round {
        cum.merge(c);
        all_sel.rounds += s.rounds;
        all_sel.selections += s.selections;
        all_sel.hits += s.hits;
        out.push(row(round.to_string(), c, &cum, s));
    }
    if !by_round.is_empty() {
        out.push(row("all".into(), &cum, &cum, &all_sel));
    }
    out
}

pub struct Pipeline {
    cfg: Config,
    run: RunDir,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// `jobs` of `None` uses one worker per core.
    pub fn new(cfg: Config, out: impl Into<PathBuf>, jobs: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = jobs {
            if n == 0 {
                return Err(Error::Config(vec!["jobs must be at least 1".into()]));
            }
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            run: RunDir::new(out, hash),
            pool,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.run.root
    }

    pub fn config_hash(&self) -> &str {
        &self.run.config_hash
    }

    /// Loads the manifest, or starts one. A manifest from another config is
    /// refused rather than mixed with.
    pub fn manifest(&self) -> Result<Manifest> {
        match Manifest::load(&self.run.root)? {
            Some(m) if m.config_hash != self.run.config_hash || m.schema != SCHEMA_VERSION => {
                Err(Error::Config(vec![format!(
                    "{} holds a run of config {} (schema {}); this config is {}. Use a fresh output directory",
                    self.run.root.display(),
                    m.config_hash,
                    m.schema,
                    self.run.config_hash
                )]))
            }
            Some(m) => Ok(m),
            None => {
                let mut versions = BTreeMap::new();
                versions.insert("tool".into(), env!("CARGO_PKG_VERSION").into());
                versions.insert("prompts".into(), prompts::PROMPT_VERSION.into());
                versions.insert("fpmc_checkpoint".into(), fpmc::CHECKPOINT_VERSION.to_string());
                versions.insert("schema".into(), SCHEMA_VERSION.to_string());
                Ok(Manifest {
                    schema: SCHEMA_VERSION,
                    config_hash: self.run.config_hash.clone(),
                    dataset: self.cfg.dataset.name.clone(),
                    seed: self.cfg.seed,
                    versions,
                    ..Default::default()
                })
            }
        }
    }

    /// Runs `stages` in canonical order, skipping ones already completed
    /// unless `force`.
    pub fn run(&self, stages: &[Stage], force: bool) -> Result<Manifest> {
        let mut ordered: Vec<Stage> = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut manifest = self.manifest()?;
        manifest.save(&self.run.root)?;
        for stage in ordered {
            if manifest.is_done(stage.as_str()) && !force {
                log::info!("{stage}: already complete, skipping");
                continue;
            }
            self.run_stage(stage, &mut manifest)?;
        }
        Ok(manifest)
    }

    pub fn run_stage(&self, stage: Stage, manifest: &mut Manifest) -> Result<()> {
        for req in stage.requires() {
            if !manifest.is_done(req.as_str()) {
                return Err(Error::Precondition(format!("stage {stage} needs {req} to have completed")));
            }
        }
        log::info!("{stage}: starting");
        match stage {
            Stage::Ingest => self.ingest(manifest)?,
            Stage::InitProfiles => self.init_profiles(manifest)?,
            Stage::Optimize => self.optimize(manifest)?,
            Stage::SynthesizeDefects => self.synthesize_defects(manifest)?,
            Stage::EmitCorpus => self.emit_corpus(manifest)?,
            Stage::EvalDiagnostic => self.eval_diagnostic(manifest)?,
            Stage::Interact => self.interact(manifest)?,
            Stage::Report => self.report(manifest)?,
        }
        manifest.mark_done(stage.as_str());
        manifest.save(&self.run.root)?;
        log::info!("{stage}: done");
        Ok(())
    }

    fn record(&self, manifest: &mut Manifest, name: &str, digest: String) {
        manifest.artifacts.insert(name.to_string(), digest);
    }

    fn write<T: Serialize>(&self, manifest: &mut Manifest, name: &str, records: &[T]) -> Result<()> {
        let digest = self.run.write_records(name, records)?;
        manifest.counts.insert(name.to_string(), records.len());
        self.record(manifest, name, digest);
        Ok(())
    }

    fn write_csv<T: Serialize>(&self, manifest: &mut Manifest, name: &str, rows: &[T], cols: &[&str]) -> Result<()> {
        let digest = self.run.write_bytes(name, &store::csv_bytes(rows, cols)?)?;
        manifest.counts.insert(name.to_string(), rows.len());
        self.record(manifest, name, digest);
        Ok(())
    }

    fn dataset(&self) -> Result<InteractionDataset> {
        Ok(InteractionDataset {
            items: self.run.read_records(files::ITEMS)?,
            users: self.run.read_records(files::SEQUENCES)?,
        })
    }

    /// Splits of the sampled users, in sample order.
    fn sampled_splits(&self, manifest: &Manifest) -> Result<Vec<UserSplit>> {
        let all: Vec<UserSplit> = self.run.read_records(files::SPLITS)?;
        let by_id: BTreeMap<&str, &UserSplit> = all.iter().map(|s| (s.user_id.as_str(), s)).collect();
        manifest
            .sampled_users
            .iter()
            .map(|u| {
                by_id
                    .get(u.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Invariant(format!("sampled user {u} has no split")))
            })
            .collect()
    }

    fn profiles(&self, name: &str, splits: &[UserSplit]) -> Result<Vec<UserProfile>> {
        let profiles: Vec<UserProfile> = self.run.read_records(name)?;
        if profiles.len() != splits.len() || profiles.iter().zip(splits).any(|(p, s)| p.user_id != s.user_id) {
            return Err(Error::Invariant(format!("{name} does not match the user sample")));
        }
        Ok(profiles)
    }

    fn ingest(&self, manifest: &mut Manifest) -> Result<()> {
        let (ds, report) = catalog::ingest(&self.cfg.dataset.source())?;
        let mut splits = Vec::new();
        let mut exclusions = Vec::new();
        for u in &ds.users {
            match catalog::split_user(u, &self.cfg.split) {
                Ok(s) => splits.push(s),
                Err(e) => exclusions.push(e),
            }
        }
        if splits.is_empty() {
            return Err(Error::Precondition(format!(
                "no user in {} survives the split ({} excluded)",
                self.cfg.dataset.name,
                exclusions.len()
            )));
        }
        let picked = catalog::sample_users(splits.len(), self.cfg.users, self.cfg.seed);
        manifest.sampled_users = picked.iter().map(|&i| splits[i].user_id.clone()).collect();
        manifest.ingest = Some(report);
        self.write(manifest, files::ITEMS, &ds.items)?;
        self.write(manifest, files::SEQUENCES, &ds.users)?;
        self.write(manifest, files::SPLITS, &splits)?;
        self.write(manifest, files::EXCLUSIONS, &exclusions)
    }

    fn init_profiles(&self, manifest: &mut Manifest) -> Result<()> {
        let ds = self.dataset()?;
        let splits = self.sampled_splits(manifest)?;
        let simulator = self.cfg.backends.simulator.build()?;
        let reprompts = self.cfg.reprompts;
        let profiles: Vec<UserProfile> = self.pool.install(|| {
            splits
                .par_iter()
                .map(|s| profile::init_profile(&s.user_id, &ds.rated(&s.d_ini), simulator.as_ref(), reprompts))
                .collect::<Result<_>>()
        })?;
        self.write(manifest, files::PROFILES_INITIAL, &profiles)
    }

    #[allow(clippy::result_large_err)]
    fn optimize(&self, manifest: &mut Manifest) -> Result<()> {
        let ds = self.dataset()?;
        let splits = self.sampled_splits(manifest)?;
        let initial = self.profiles(files::PROFILES_INITIAL, &splits)?;
        let simulator = self.cfg.backends.simulator.build()?;
        let treater = self.cfg.backends.treater.build()?;
        let diagnoser = self.cfg.backends.diagnoser.diagnoser()?;
        let roles = Roles {
            simulator: simulator.as_ref(),
            diagnoser: &diagnoser,
            treater: treater.as_ref(),
        };
        let params = self.cfg.optimize;
        let outcomes: Vec<_> = self.pool.install(|| {
            splits
                .par_iter()
                .zip(&initial)
                .map(|(s, p)| orchestrator::optimize(p, &ds.rated(&s.d_opt), &roles, &params))
                .collect()
        });

        let mut profiles = Vec::with_capacity(outcomes.len());
        let mut traces = Vec::with_capacity(outcomes.len());
        let mut first_error = None;
        for outcome in outcomes {
            match outcome {
                Ok(o) => {
                    profiles.push(o.profile);
                    traces.push(o.trace);
                }
                Err(a) => {
                    profiles.push(a.profile);
                    traces.push(a.trace);
                    first_error.get_or_insert(a.error);
                }
            }
        }
        let hash = self.config_hash();
        let summary: Vec<TraceSummary> =
            traces.iter().zip(&profiles).map(|(t, p)| TraceSummary::of(hash, t, p.version)).collect();
        let events: Vec<BatchEvent> = traces
            .iter()
            .flat_map(|t| t.batches.iter().map(|b| BatchEvent::of(&t.user_id, b)))
            .collect();
        // traces are written even on failure so the aborted batch can be inspected
        self.write(manifest, files::TRACES, &traces)?;
        self.write(manifest, files::EVENTS, &events)?;
        self.write_csv(manifest, files::OPTIMIZE_SUMMARY, &summary, &TraceSummary::COLUMNS)?;
        if let Some(e) = first_error {
            manifest.save(&self.run.root)?;
            return Err(e);
        }
        self.write(manifest, files::PROFILES_OPTIMIZED, &profiles)
    }

    fn synthesize_defects(&self, manifest: &mut Manifest) -> Result<()> {
        let ds = self.dataset()?;
        let splits = self.sampled_splits(manifest)?;
        let initial = self.profiles(files::PROFILES_INITIAL, &splits)?;
        let simulator = self.cfg.backends.simulator.build()?;
        let reprompts = self.cfg.reprompts;
        let judged: Vec<Vec<ItemJudgment>> = self.pool.install(|| {
            splits
                .par_iter()
                .zip(&initial)
                .map(|(s, p)| {
                    s.d_opt
                        .iter()
                        .map(|e| {
                            let b = simulator::decide(p, ds.item(e.item)?, simulator.as_ref(), reprompts)?;
                            Ok(ItemJudgment {
                                user_id: s.user_id.clone(),
                                item: e.item,
                                rating: e.rating,
                                interact: b.interact,
                                rationale: b.rationale,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()
        })?;
        let judgments: Vec<ItemJudgment> = judged.into_iter().flatten().collect();
        let by_user: BTreeMap<&str, &UserProfile> = initial.iter().map(|p| (p.user_id.as_str(), p)).collect();
        let pairs: Vec<SourcePair> = judgments
            .iter()
            .map(|j| SourcePair {
                profile: by_user[j.user_id.as_str()],
                item: &ds.items[j.item as usize],
                rating: j.rating,
                simulated_interact: j.interact,
            })
            .collect();
        let corpus = defects::build_defect_corpus(
            &pairs,
            &self.cfg.defects,
            seed::derive(self.cfg.seed, &["defects"]),
            &TemplateNegation,
        )?;
        manifest.counts.insert("eligible_pairs".into(), corpus.eligible_pairs);
        manifest.counts.insert("ineligible_pairs".into(), corpus.ineligible_pairs);
        self.write(manifest, files::JUDGMENTS, &judgments)?;
        self.write(manifest, files::DEFECTS_TRAIN, &corpus.train)?;
        self.write(manifest, files::DEFECTS_TEST, &corpus.test)
    }

    fn emit_corpus(&self, manifest: &mut Manifest) -> Result<()> {
        let ds = self.dataset()?;
        let splits = self.sampled_splits(manifest)?;
        let initial = self.profiles(files::PROFILES_INITIAL, &splits)?;
        let by_user: BTreeMap<&str, &UserProfile> = initial.iter().map(|p| (p.user_id.as_str(), p)).collect();
        let judgments: Vec<ItemJudgment> = self.run.read_records(files::JUDGMENTS)?;
        let pretrain: Vec<PretrainRecord> = judgments
            .iter()
            .map(|j| {
                let behavior = Behavior {
                    interact: j.interact,
                    rationale: j.rationale.clone(),
                    source: simulator::Source::Simulated,
                };
                corpus::pretrain_record(by_user[j.user_id.as_str()], &ds.items[j.item as usize], &behavior)
            })
            .collect();
        let bytes = store::jsonl_bytes(None, &pretrain)?;
        let digest = self.run.write_bytes(files::PRETRAIN, &bytes)?;
        self.record(manifest, files::PRETRAIN, digest);
        manifest.counts.insert(files::PRETRAIN.into(), pretrain.len());

        for (src, dst) in [
            (files::DEFECTS_TRAIN, files::FINETUNE_TRAIN),
            (files::DEFECTS_TEST, files::FINETUNE_TEST),
        ] {
            let samples: Vec<DefectSample> = self.run.read_records(src)?;
            let records: Vec<_> = samples.iter().map(corpus::finetune_record).collect();
            let path = self.run.path(dst);
            corpus::write_finetune(&path, &records)?;
            for p in [path.clone(), corpus::spans_path(&path)] {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rel = p.strip_prefix(&self.run.root).expect("inside run dir");
                self.record(manifest, &rel.to_string_lossy(), seed::digest(&bytes));
            }
            manifest.counts.insert(dst.into(), records.len());
        }
        Ok(())
    }

    fn eval_diagnostic(&self, manifest: &mut Manifest) -> Result<()> {
        let samples: Vec<DefectSample> = self.run.read_records(files::DEFECTS_TEST)?;
        let diagnoser = self.cfg.backends.diagnoser.diagnoser()?;
        let eval = self.pool.install(|| corpus::eval_diagnostic(&samples, &diagnoser, self.cfg.reprompts))?;
        let confusion = eval
            .confusion
            .iter()
            .map(|row| row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        let row = DiagnosticRow {
            config_hash: self.config_hash().to_string(),
            diagnoser: eval.diagnoser.clone(),
            n: eval.n,
            correct: eval.correct,
            accuracy: fmt_metric(eval.accuracy),
            weak_evidence: eval.weak_evidence,
            confusion,
        };
        self.write_csv(manifest, files::DIAGNOSTIC, &[row], &DiagnosticRow::COLUMNS)
    }

    fn interact(&self, manifest: &mut Manifest) -> Result<()> {
        let ds = self.dataset()?;
        let all_splits: Vec<UserSplit> = self.run.read_records(files::SPLITS)?;
        let splits = self.sampled_splits(manifest)?;
        let variants = [
            ("initial", self.profiles(files::PROFILES_INITIAL, &splits)?),
            ("optimized", self.profiles(files::PROFILES_OPTIMIZED, &splits)?),
        ];
        let training = TrainingData {
            num_items: ds.items.len(),
            sequences: all_splits
                .iter()
                .map(|s| {
                    let items: Vec<_> = s.train().iter().chain([&s.validation]).map(|e: &Event| e.item).collect();
                    (s.user_id.clone(), items)
                })
                .collect(),
        };
        let simulator = self.cfg.backends.simulator.build()?;
        let arena_seed = seed::derive(self.cfg.seed, &["arena"]);

        let mut lines = Vec::new();
        let mut metrics = Vec::new();
        for spec in &self.cfg.recommenders {
            let rec = self.pool.install(|| spec.build(&training))?;
            for (sim_name, profiles) in &variants {
                for &strategy in &self.cfg.arena.strategies {
                    let params = self.cfg.arena.params(strategy);
                    let who = Participants {
                        recommender: rec.as_ref(),
                        simulator: simulator.as_ref(),
                    };
                    let per_user: Vec<Vec<RoundRecord>> = self.pool.install(|| {
                        splits
                            .par_iter()
                            .zip(profiles)
                            .map(|(s, p)| arena::run_user(&ds, s, p, &who, &params, arena_seed).map(|a| a.rounds))
                            .collect::<Result<_>>()
                    })?;
                    let rounds: Vec<&RoundRecord> = per_user.iter().flatten().collect();
                    metrics.extend(metric_rows(
                        self.config_hash(),
                        &self.cfg.dataset.name,
                        spec.name(),
                        sim_name,
                        strategy.as_str(),
                        &rounds,
                    ));
                    lines.extend(per_user.into_iter().flatten().map(|round| RoundLine {
                        recommender: spec.name().to_string(),
                        simulator: sim_name.to_string(),
                        round,
                    }));
                }
            }
        }
        self.write(manifest, files::ROUNDS, &lines)?;
        self.write_csv(manifest, files::METRICS, &metrics, &MetricsRow::COLUMNS)
    }

    fn report(&self, manifest: &mut Manifest) -> Result<()> {
        // the manifest on disk must list what this run has produced so far
        manifest.save(&self.run.root)?;
        let out = self.run.path(files::REPORT_DIR);
        crate::report::build(std::slice::from_ref(&self.run.root), &out)?;
        Ok(())
    }
}
