//! Profile optimization over a user's optimization segment.
//!
//! Items are visited in order and judged against the current profile. Every
//! decline-discrepancy is collected; once `batch_size` cases are pending, each
//! is diagnosed, the batch is treated jointly and the refined profile replaces
//! the current one. A trailing partial batch is dropped unless `flush_tail` is
//! set. In `once` mode only the first batch is treated; later items are still
//! judged for the trace. A failed batch is retried, then the run aborts with
//! its trace.

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::catalog::{ItemId, RatedItem};
use crate::defects::DefectLabel;
use crate::diagnosis::{Diagnoser, Diagnosis};
use crate::error::{Error, Result};
use crate::profile::UserProfile;
use crate::simulator::{self, Behavior, DiscrepancyCase};
use crate::treatment::{self, Reason, Suggestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeParams {
    pub batch_size: usize,
    /// Treat at most one batch.
    pub once: bool,
    pub flush_tail: bool,
    pub reprompts: u32,
    pub batch_retries: u32,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            batch_size: 4,
            once: false,
            flush_tail: false,
            reprompts: 2,
            batch_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub position: usize,
    pub item: ItemId,
    pub profile_version: u32,
    pub simulated: Behavior,
    pub discrepancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: u32,
    /// 1-based position of the item that completed the batch.
    pub boundary: usize,
    pub positions: Vec<usize>,
    pub diagnoses: Vec<Diagnosis>,
    pub reasons: Vec<Reason>,
    pub suggestions: Vec<Suggestion>,
    pub version_before: u32,
    pub version_after: u32,
    pub attempts: u32,
}

impl BatchRecord {
    pub fn labels(&self) -> Vec<DefectLabel> {
        self.diagnoses.iter().map(|d| d.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub user_id: String,
    pub steps: Vec<Step>,
    pub batches: Vec<BatchRecord>,
    /// Cases left pending at the end and not treated.
    pub dropped_tail: usize,
    /// Discrepancies seen after a `once` run stopped optimizing.
    pub ignored_after_once: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl OptimizationTrace {
    pub fn discrepancies(&self) -> usize {
        self.steps.iter().filter(|s| s.discrepancy).count()
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub profile: UserProfile,
    pub trace: OptimizationTrace,
}

#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    /// The profile as of the last completed batch.
    pub profile: UserProfile,
    pub trace: OptimizationTrace,
}

pub struct Roles<'a> {
    pub simulator: &'a dyn Backend,
    pub diagnoser: &'a Diagnoser,
    pub treater: &'a dyn Backend,
}

struct Batch {
    diagnoses: Vec<Diagnosis>,
    treatment: treatment::Treatment,
}

fn run_batch(
    profile: &UserProfile,
    cases: &[DiscrepancyCase],
    iteration: u32,
    roles: &Roles<'_>,
    reprompts: u32,
) -> Result<Batch> {
    let diagnoses = cases
        .iter()
        .map(|c| roles.diagnoser.diagnose(profile, c, reprompts))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<DefectLabel> = diagnoses.iter().map(|d| d.label).collect();
    let treatment = treatment::treat(profile, cases, &labels, iteration, roles.treater, reprompts)?;
    Ok(Batch { diagnoses, treatment })
}

#[allow(clippy::result_large_err)]
pub fn optimize(
    initial: &UserProfile,
    d_opt: &[RatedItem<'_>],
    roles: &Roles<'_>,
    params: &OptimizeParams,
) -> std::result::Result<Optimized, Aborted> {
    let mut profile = initial.clone();
    let mut trace = OptimizationTrace {
        user_id: initial.user_id.clone(),
        steps: Vec::new(),
        batches: Vec::new(),
        dropped_tail: 0,
        ignored_after_once: 0,
        error: None,
    };
    let batch_size = params.batch_size.max(1);
    let mut pending: Vec<DiscrepancyCase> = Vec::new();
    let mut iteration = 0u32;

    macro_rules! abort {
        ($e:expr) => {{
            let error = $e;
            trace.error = Some(error.to_string());
            return Err(Aborted { error, profile, trace });
        }};
    }

    let mut flush = |profile: &mut UserProfile,
                     pending: &mut Vec<DiscrepancyCase>,
                     trace: &mut OptimizationTrace,
                     boundary: usize|
     -> Result<()> {
        iteration += 1;
        let mut attempts = 0;
        let batch = loop {
            attempts += 1;
            match run_batch(profile, pending, iteration, roles, params.reprompts) {
                Ok(b) => break b,
                Err(e) if attempts > params.batch_retries => return Err(e),
                Err(e) => log::warn!("user {}: batch {iteration} failed, retrying: {e}", profile.user_id),
            }
        };
        trace.batches.push(BatchRecord {
            iteration,
            boundary,
            positions: pending.iter().map(|c| c.position).collect(),
            diagnoses: batch.diagnoses,
            reasons: batch.treatment.reasons,
            suggestions: batch.treatment.suggestions,
            version_before: profile.version,
            version_after: batch.treatment.profile.version,
            attempts,
        });
        *profile = batch.treatment.profile;
        pending.clear();
        Ok(())
    };

    for (position, rated) in d_opt.iter().enumerate() {
        let simulated = match simulator::decide(&profile, rated.item, roles.simulator, params.reprompts) {
            Ok(b) => b,
            Err(e) => abort!(e),
        };
        let case = simulator::find_discrepancy(&simulated, &Behavior::observed(), rated.item, rated.rating, position);
        trace.steps.push(Step {
            position,
            item: rated.item.id,
            profile_version: profile.version,
            simulated,
            discrepancy: case.is_some(),
        });
        let done = params.once && !trace.batches.is_empty();
        match case {
            Some(_) if done => trace.ignored_after_once += 1,
            Some(c) => pending.push(c),
            None => {}
        }
        if pending.len() == batch_size {
            if let Err(e) = flush(&mut profile, &mut pending, &mut trace, position + 1) {
                abort!(e);
            }
        }
    }
    if !pending.is_empty() {
        if params.flush_tail {
            if let Err(e) = flush(&mut profile, &mut pending, &mut trace, d_opt.len()) {
                abort!(e);
            }
        } else {
            trace.dropped_tail = pending.len();
        }
    }
    Ok(Optimized { profile, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendHandle, FnBackend, MockBackend, Recorder};
    use crate::catalog::Item;
    use crate::error::BackendError;
    use crate::profile::Preference;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn items() -> Vec<Item> {
        ["Drama", "Comedy", "Drama", "Horror", "Comedy", "Western"]
            .iter()
            .enumerate()
            .map(|(i, g)| Item::new(i as u32, i.to_string(), format!("T{i}"), [*g]))
            .collect()
    }

    fn rated(items: &[Item]) -> Vec<RatedItem<'_>> {
        items.iter().map(|item| RatedItem { item, rating: 5 }).collect()
    }

    fn run(params: OptimizeParams) -> (std::result::Result<Optimized, Aborted>, Vec<String>) {
        let items = items();
        let rec = Recorder::new(Arc::new(MockBackend::new(0)));
        let p = UserProfile::new("u", vec![Preference::positive(["Drama"], "Enjoys Drama")]);
        let diag = Diagnoser::Oracle;
        let roles = Roles { simulator: &rec, diagnoser: &diag, treater: &rec };
        let out = optimize(&p, &rated(&items), &roles, &params);
        (out, rec.calls())
    }

    fn ones() -> OptimizeParams {
        OptimizeParams { batch_size: 1, ..Default::default() }
    }

    #[test]
    fn batch_of_one_refines_each_discrepancy() {
        let (out, calls) = run(ones());
        let out = out.unwrap();
        // Comedy, Horror and Western are declined once each; the second Comedy is accepted
        assert_eq!(out.trace.batches.len(), 3);
        assert_eq!(out.trace.discrepancies(), 3);
        assert_eq!(out.profile.version, 3);
        let boundaries: Vec<usize> = out.trace.batches.iter().map(|b| b.boundary).collect();
        assert_eq!(boundaries, [2, 4, 6]);
        // the second Comedy item is judged against the refined profile
        assert_eq!(out.trace.steps[4].profile_version, 2);
        assert_eq!(
            calls,
            [
                "decide", "decide", "infer-reason", "suggest", "refine", "decide", "decide",
                "infer-reason", "suggest", "refine", "decide", "decide", "infer-reason", "suggest", "refine"
            ]
        );
    }

    #[test]
    fn partial_tail_dropped_or_flushed() {
        let params = OptimizeParams { batch_size: 2, ..Default::default() };
        let (out, _) = run(params);
        let out = out.unwrap();
        assert_eq!(out.trace.batches.len(), 1);
        assert_eq!(out.trace.dropped_tail, 1);

        let (out, _) = run(OptimizeParams { flush_tail: true, ..params });
        let out = out.unwrap();
        assert_eq!(out.trace.batches.len(), 2);
        assert_eq!(out.trace.dropped_tail, 0);
    }

    #[test]
    fn no_batch_keeps_initial_profile() {
        let (out, calls) = run(OptimizeParams { batch_size: 10, ..Default::default() });
        let out = out.unwrap();
        assert_eq!(out.profile.version, 0);
        assert!(out.trace.batches.is_empty());
        assert_eq!(calls.len(), 6);
    }

    #[test]
    fn once_treats_first_batch_and_keeps_judging() {
        let (out, calls) = run(OptimizeParams { once: true, ..ones() });
        let out = out.unwrap();
        assert_eq!(out.trace.batches.len(), 1);
        assert_eq!(out.trace.steps.len(), 6);
        assert_eq!(out.trace.ignored_after_once, 2);
        assert_eq!(calls.len(), 9);
    }

    #[test]
    fn all_declined_twelve_items_batches_of_four() {
        let items: Vec<Item> = (0..12).map(|i| Item::new(i, i.to_string(), format!("T{i}"), ["Western"])).collect();
        let mock = MockBackend::new(0);
        // the treater only ever adds Drama, so every Western item stays declined
        let treater = FnBackend::new("keep", move |req| {
            Ok(match crate::prompts::task_of(req.prompt_text()) {
                Some("infer-reason") => (1..=4).map(|i| format!("Reason {i}: r")).collect::<Vec<_>>().join("\n"),
                Some("suggest") => "Suggestion 1: add [Drama]: Interested in Drama".into(),
                _ => "Profile:\n- positive [Drama]: Interested in Drama".into(),
            })
        });
        let p = UserProfile::new("u", vec![]);
        let diag = Diagnoser::Oracle;
        let roles = Roles { simulator: &mock, diagnoser: &diag, treater: &treater };
        let out = optimize(&p, &rated(&items), &roles, &OptimizeParams::default()).unwrap();
        let boundaries: Vec<usize> = out.trace.batches.iter().map(|b| b.boundary).collect();
        assert_eq!(boundaries, [4, 8, 12]);
        assert_eq!(out.profile.version, 3);

        let out = optimize(&p, &[], &roles, &OptimizeParams::default()).unwrap();
        assert_eq!(out.profile, p);
        assert!(out.trace.batches.is_empty());
    }

    #[test]
    fn failing_batch_retried_then_aborts() {
        let items = items();
        let mock: BackendHandle = Arc::new(MockBackend::new(0));
        let refine_calls = Arc::new(AtomicUsize::new(0));
        let counter = refine_calls.clone();
        let inner = mock.clone();
        let flaky = FnBackend::new("flaky", move |req| {
            if crate::prompts::task_of(req.prompt_text()) == Some("refine") {
                counter.fetch_add(1, Ordering::SeqCst);
                return Err(BackendError::Transport { attempts: 1, detail: "down".into() });
            }
            inner.complete_raw(req).map(|r| r.text)
        });
        let p = UserProfile::new("u", vec![Preference::positive(["Drama"], "Enjoys Drama")]);
        let diag = Diagnoser::Oracle;
        let roles = Roles { simulator: mock.as_ref(), diagnoser: &diag, treater: &flaky };
        let err = optimize(&p, &rated(&items), &roles, &ones()).unwrap_err();
        assert_eq!(refine_calls.load(Ordering::SeqCst), 2);
        assert_eq!(err.trace.steps.len(), 2);
        assert!(err.trace.error.is_some());
        assert_eq!(err.profile, p);
    }
}
