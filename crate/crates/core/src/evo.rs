//! Island-model evolutionary loop.
//!
//! Each iteration samples a parent, asks the provider for an edit to the
//! parent's evolve block, evaluates the child, and admits it according to
//! the engine mode. Migration and checkpointing fire on iteration multiples.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{is_eligible, Cascade, EvaluationReport};
use crate::checkpoint::{self, CheckpointError};
use crate::db::{
    assign_island, CandidateDraft, CandidateId, DbError, IslandConfig, ProgramDatabase,
    RepairProvenance, RepairStrategy,
};
use crate::mcts::MctsConfig;
use crate::mutate::{
    apply_mutation, build_prompt, propose, summarize, EvolveBlock, FeedbackEntry, Inspiration,
    MutationProvider, OptimizationContext, PromptOptions, PromptTemplate, DEFAULT_FEEDBACK_CAP,
};
use crate::refine::{
    mcts_repair, reflect_repair, RepairOutcome, RepairTask, DEFAULT_REFLECTION_ATTEMPTS,
};
use crate::stage::StageRunner;

pub const INSPIRATION_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EngineMode {
    Original,
    OriginalValid,
    Improved,
    Final,
}

impl EngineMode {
    pub const ALL: [EngineMode; 4] = [
        EngineMode::Original,
        EngineMode::OriginalValid,
        EngineMode::Improved,
        EngineMode::Final,
    ];

    pub fn flags(self) -> ModeFlags {
        let (validity_filter, enriched_context, island_sampling, refinement) = match self {
            EngineMode::Original => (false, false, false, false),
            EngineMode::OriginalValid => (true, false, false, false),
            EngineMode::Improved => (true, true, true, false),
            EngineMode::Final => (true, true, true, true),
        };
        ModeFlags {
            validity_filter,
            enriched_context,
            island_sampling,
            refinement,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EngineMode::Original => "ORIGINAL",
            EngineMode::OriginalValid => "ORIGINAL_VALID",
            EngineMode::Improved => "IMPROVED",
            EngineMode::Final => "FINAL",
        }
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for EngineMode {
    type Err = EvoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        EngineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| EvoError::Config(format!("unknown mode {s:?}")))
    }
}

/// Feature switches. Only the four combinations produced by
/// [`EngineMode::flags`] are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeFlags {
    pub validity_filter: bool,
    pub enriched_context: bool,
    pub island_sampling: bool,
    pub refinement: bool,
}

impl ModeFlags {
    pub fn mode(self) -> Result<EngineMode, EvoError> {
        EngineMode::ALL
            .into_iter()
            .find(|m| m.flags() == self)
            .ok_or_else(|| EvoError::Config(format!("conflicting mode flags {self:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub max_iterations: u64,
    pub diff_mode: bool,
    pub checkpoint_interval: u64,
    pub island: IslandConfig,
    pub seed: u64,
    pub feedback_cap: usize,
    pub reflection_attempts: u32,
    pub repair_search: MctsConfig,
    /// Iterations whose children are evaluated concurrently. Batches never
    /// straddle a migration or checkpoint boundary, so results depend only
    /// on this value and the seed.
    pub parallel_evaluations: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            diff_mode: true,
            checkpoint_interval: 10,
            island: IslandConfig::default(),
            seed: 0,
            feedback_cap: DEFAULT_FEEDBACK_CAP,
            reflection_attempts: DEFAULT_REFLECTION_ATTEMPTS,
            repair_search: MctsConfig {
                max_iterations: 5,
                ..MctsConfig::default()
            },
            parallel_evaluations: 1,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvoError> {
        if self.max_iterations < 1 {
            return Err(EvoError::Config("max_iterations must be at least 1".into()));
        }
        if self.checkpoint_interval < 1 {
            return Err(EvoError::Config(
                "checkpoint_interval must be at least 1".into(),
            ));
        }
        if self.parallel_evaluations < 1 {
            return Err(EvoError::Config(
                "parallel_evaluations must be at least 1".into(),
            ));
        }
        if self.reflection_attempts < 1 {
            return Err(EvoError::Config(
                "reflection_attempts must be at least 1".into(),
            ));
        }
        self.island.validate()?;
        self.repair_search
            .validate()
            .map_err(|e| EvoError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("baseline program is invalid: {0}")]
    BaselineInvalid(String),
    #[error(transparent)]
    Input(#[from] crate::mutate::BlockError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("database error: {0}")]
    Db(#[from] DbError),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    /// Valid child admitted.
    Inserted,
    /// Invalid child admitted (unfiltered mode only).
    InsertedInvalid,
    /// Invalid child repaired and admitted.
    Repaired,
    /// Invalid child discarded.
    Filtered,
    ProviderError,
    ApplyFailed,
}

impl Outcome {
    pub fn admitted(self) -> bool {
        matches!(
            self,
            Outcome::Inserted | Outcome::InsertedInvalid | Outcome::Repaired
        )
    }

    pub fn valid(self) -> bool {
        matches!(self, Outcome::Inserted | Outcome::Repaired)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub outcome: Outcome,
    pub island: usize,
    pub parent_id: CandidateId,
    pub candidate_id: Option<CandidateId>,
    /// Combined score of the admitted child, or of the rejected one.
    pub score: Option<f64>,
    pub best_score: f64,
    pub migrated: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: EngineMode,
    pub seed: u64,
    pub iterations_run: u64,
    /// Generated programs admitted with every gate passed (seed excluded).
    pub valid_count: u64,
    /// Generated programs admitted, valid or not.
    pub admitted_count: u64,
    pub best_candidate_id: CandidateId,
    pub best_score: f64,
    /// Mean combined score over admitted generated programs, or the seed
    /// score when none were admitted.
    pub average_score: f64,
    pub seed_score: f64,
    pub per_iteration_log: Vec<IterationRecord>,
}

/// Loop state persisted next to the database in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub mode: EngineMode,
    pub seed: u64,
    pub next_iteration: u64,
    pub provider_calls: u64,
    pub seed_score: f64,
    pub feedback: Vec<FeedbackEntry>,
    pub log: Vec<IterationRecord>,
}

/// Evaluation backend: cascade plus the runner executing its stages.
pub struct Evaluator<'a> {
    pub cascade: &'a Cascade,
    pub runner: &'a dyn StageRunner,
}

#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Checkpoint destination; written every `checkpoint_interval`
    /// iterations and once more at the end.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this iteration as if interrupted.
    pub stop_after: Option<u64>,
    pub optimization_template: Option<PromptTemplate>,
    pub repair_template: Option<PromptTemplate>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub database: ProgramDatabase,
    pub best_source: String,
    pub state: EngineState,
}

struct Engine<'a> {
    mode: EngineMode,
    config: &'a EvolutionConfig,
    context: &'a OptimizationContext,
    eval: &'a Evaluator<'a>,
    control: &'a RunControl,
    template: PromptTemplate,
    repair_template: PromptTemplate,
    db: ProgramDatabase,
    rng: ChaCha8Rng,
    state: EngineState,
}

/// A child proposed but not yet admitted.
struct Pending {
    iteration: u64,
    island: usize,
    parent_id: CandidateId,
    child: Result<(String, String), (Outcome, String)>,
}

fn clip(text: &str, limit: usize) -> String {
    if text.chars().count() <= limit {
        text.to_string()
    } else {
        text.chars().take(limit).collect()
    }
}

impl<'a> Engine<'a> {
    fn flags(&self) -> ModeFlags {
        self.mode.flags()
    }

    fn best_score(&self) -> (CandidateId, f64) {
        let best = self.db.best_valid().expect("seed is always present");
        (best.id, best.fitness())
    }

    fn push_feedback(&mut self, entry: FeedbackEntry) {
        self.state.feedback.push(entry);
        let cap = self.config.feedback_cap.max(1);
        let excess = self.state.feedback.len().saturating_sub(cap);
        self.state.feedback.drain(..excess);
    }

    fn prepare(&mut self, iteration: u64, provider: &mut dyn MutationProvider) -> Pending {
        let island = assign_island(iteration, &self.config.island);
        let parent = if self.flags().island_sampling {
            self.db.sample_parent(&mut self.rng, island).map(|(_, c)| c)
        } else {
            self.db.sample_uniform(&mut self.rng)
        }
        .expect("database holds the seed")
        .clone();
        let mut pending = Pending {
            iteration,
            island,
            parent_id: parent.id,
            child: Err((Outcome::ApplyFailed, String::new())),
        };
        let block = match EvolveBlock::parse(&parent.source) {
            Ok(b) => b,
            Err(e) => {
                pending.child = Err((Outcome::ApplyFailed, e.to_string()));
                return pending;
            }
        };
        let enriched = self.flags().enriched_context;
        let mut ctx = self.context.clone();
        ctx.writable_code = block.body.clone();
        ctx.feedback = self.state.feedback.clone();
        ctx.inspirations = if enriched {
            self.db
                .top(INSPIRATION_COUNT)
                .into_iter()
                .map(|c| Inspiration {
                    score: c.fitness(),
                    summary: c.change_summary.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let options = PromptOptions {
            diff_mode: self.config.diff_mode,
            feedback_cap: self.config.feedback_cap,
            enriched,
        };
        let prompt = build_prompt(&ctx, &self.template, &options);
        pending.child = match propose(provider, &prompt, self.config.diff_mode) {
            Err(crate::mutate::ProposeError::Provider(e)) => {
                Err((Outcome::ProviderError, e.to_string()))
            }
            Err(e) => Err((Outcome::ApplyFailed, e.to_string())),
            Ok(resp) => match apply_mutation(&block, &resp) {
                Ok(src) => Ok((src, clip(&summarize(&resp), 200))),
                Err(e) => Err((Outcome::ApplyFailed, e.to_string())),
            },
        };
        pending
    }

    fn evaluate_batch(&self, batch: &[Pending]) -> Vec<Option<EvaluationReport>> {
        let eval = self.eval;
        if batch.len() <= 1 {
            return batch
                .iter()
                .map(|p| {
                    p.child
                        .as_ref()
                        .ok()
                        .map(|(src, _)| eval.cascade.evaluate(src, eval.runner))
                })
                .collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|p| {
                    let src = p.child.as_ref().ok().map(|(src, _)| src.clone());
                    s.spawn(move || src.map(|src| eval.cascade.evaluate(&src, eval.runner)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    }

    /// Tries reflection, then tree-search repair. Returns the repaired
    /// source with its full report.
    fn repair(
        &mut self,
        source: &str,
        report: &EvaluationReport,
        provider: &mut dyn MutationProvider,
    ) -> Option<(String, EvaluationReport, RepairProvenance)> {
        let diagnostics = report.failure_diagnostics();
        let attempts = [RepairStrategy::Reflection, RepairStrategy::MctsRepair];
        for strategy in attempts {
            let outcome = match strategy {
                RepairStrategy::Reflection => {
                    let mut task = RepairTask::reflection(source, diagnostics.clone());
                    task.attempts_remaining = self.config.reflection_attempts;
                    reflect_repair(
                        &task,
                        provider,
                        self.eval.cascade,
                        self.eval.runner,
                        &self.repair_template,
                    )
                }
                RepairStrategy::MctsRepair => mcts_repair(
                    &RepairTask::mcts(source, diagnostics.clone()),
                    provider,
                    &self.config.repair_search,
                    self.eval.cascade,
                    self.eval.runner,
                    &self.repair_template,
                    &mut self.rng,
                ),
            };
            let Ok(RepairOutcome::Repaired(fixed)) = outcome else {
                continue;
            };
            let full = self.eval.cascade.evaluate(&fixed.source, self.eval.runner);
            if is_eligible(&full) {
                let provenance = RepairProvenance {
                    strategy,
                    provider_calls: fixed.provider_calls,
                    broken_diagnostics: clip(&diagnostics, 500),
                };
                return Some((fixed.source, full, provenance));
            }
        }
        None
    }

    fn admit(
        &mut self,
        pending: Pending,
        report: Option<EvaluationReport>,
        provider: &mut dyn MutationProvider,
    ) -> Result<IterationRecord, EvoError> {
        let mut record = IterationRecord {
            iteration: pending.iteration,
            outcome: Outcome::ApplyFailed,
            island: pending.island,
            parent_id: pending.parent_id,
            candidate_id: None,
            score: None,
            best_score: 0.0,
            migrated: 0,
            detail: String::new(),
        };
        let draft = |source: String, summary: String, report: EvaluationReport| CandidateDraft {
            source,
            parent_id: Some(pending.parent_id),
            island: pending.island,
            generation: pending.iteration,
            report: Some(report),
            change_summary: summary,
            repair: None,
        };
        match pending.child {
            Err((outcome, detail)) => {
                record.outcome = outcome;
                record.detail = clip(&detail, 500);
                if outcome == Outcome::ApplyFailed {
                    self.push_feedback(FeedbackEntry {
                        iteration: pending.iteration,
                        score: 0.0,
                        rejected_at: Some("apply".into()),
                        text: record.detail.clone(),
                    });
                }
            }
            Ok((source, summary)) => {
                let report = report.expect("evaluated child");
                record.score = Some(report.combined_score);
                if is_eligible(&report) {
                    let score = report.combined_score;
                    let id = self.db.insert(draft(source, summary.clone(), report))?;
                    record.outcome = Outcome::Inserted;
                    record.candidate_id = Some(id);
                    record.detail = summary.clone();
                    self.push_feedback(FeedbackEntry {
                        iteration: pending.iteration,
                        score,
                        rejected_at: None,
                        text: summary,
                    });
                } else {
                    let diagnostics = report.failure_diagnostics();
                    let rejected_at = report.rejected_at.clone();
                    let score = report.combined_score;
                    record.detail = clip(&diagnostics, 500);
                    let repaired = if self.flags().refinement {
                        self.repair(&source, &report, provider)
                    } else {
                        None
                    };
                    if let Some((fixed, full, provenance)) = repaired {
                        let mut d = draft(fixed, format!("repaired: {summary}"), full);
                        d.repair = Some(provenance);
                        let text = d.change_summary.clone();
                        let score = d.report.as_ref().map_or(0.0, |r| r.combined_score);
                        let id = self.db.insert(d)?;
                        record.outcome = Outcome::Repaired;
                        record.candidate_id = Some(id);
                        record.score = Some(score);
                        self.push_feedback(FeedbackEntry {
                            iteration: pending.iteration,
                            score,
                            rejected_at: None,
                            text,
                        });
                    } else {
                        if !self.flags().validity_filter {
                            let id = self.db.insert(draft(source, summary, report))?;
                            record.outcome = Outcome::InsertedInvalid;
                            record.candidate_id = Some(id);
                        } else {
                            record.outcome = Outcome::Filtered;
                        }
                        self.push_feedback(FeedbackEntry {
                            iteration: pending.iteration,
                            score,
                            rejected_at,
                            text: record.detail.clone(),
                        });
                    }
                }
            }
        }
        Ok(record)
    }

    fn save_checkpoint(&self) -> Result<(), EvoError> {
        if let Some(path) = &self.control.checkpoint_path {
            checkpoint::save(path, &self.db, &self.rng, Some(&self.state))?;
        }
        Ok(())
    }

    fn next_boundary(&self, from: u64, last: u64) -> u64 {
        let up = |x: u64, m: u64| x.div_ceil(m) * m;
        let p = self.config.parallel_evaluations as u64;
        (from + p - 1)
            .min(last)
            .min(up(from, self.config.checkpoint_interval))
            .min(up(from, self.config.island.migration_interval))
    }

    fn run(mut self, provider: &mut dyn MutationProvider) -> Result<RunResult, EvoError> {
        let last = match self.control.stop_after {
            Some(s) => s.min(self.config.max_iterations),
            None => self.config.max_iterations,
        };
        let mut i = self.state.next_iteration;
        while i <= last {
            let end = self.next_boundary(i, last);
            let mut batch = Vec::new();
            for it in i..=end {
                batch.push(self.prepare(it, provider));
            }
            let reports = self.evaluate_batch(&batch);
            for (pending, report) in batch.into_iter().zip(reports) {
                let iteration = pending.iteration;
                let mut record = self.admit(pending, report, provider)?;
                if iteration % self.config.island.migration_interval == 0 {
                    record.migrated = self.db.migrate().copies.len();
                }
                record.best_score = self.best_score().1;
                log::info!(
                    "iteration {} {:?} score {:?} best {:.4}",
                    record.iteration,
                    record.outcome,
                    record.score,
                    record.best_score
                );
                self.state.log.push(record);
                self.state.next_iteration = iteration + 1;
                self.state.provider_calls = provider.calls_made();
                if iteration % self.config.checkpoint_interval == 0 {
                    self.save_checkpoint()?;
                }
            }
            i = end + 1;
        }
        self.state.provider_calls = provider.calls_made();
        self.save_checkpoint()?;
        Ok(self.finish())
    }

    fn finish(self) -> RunResult {
        let (best_id, best_score) = self.best_score();
        let admitted: Vec<f64> = self
            .state
            .log
            .iter()
            .filter(|r| r.outcome.admitted())
            .filter_map(|r| r.score)
            .collect();
        let average_score = if admitted.is_empty() {
            self.state.seed_score
        } else {
            admitted.iter().sum::<f64>() / admitted.len() as f64
        };
        let summary = RunSummary {
            mode: self.mode,
            seed: self.state.seed,
            iterations_run: self.state.log.len() as u64,
            valid_count: self.state.log.iter().filter(|r| r.outcome.valid()).count() as u64,
            admitted_count: admitted.len() as u64,
            best_candidate_id: best_id,
            best_score,
            average_score,
            seed_score: self.state.seed_score,
            per_iteration_log: self.state.log.clone(),
        };
        let best_source = self.db.get(best_id).expect("best exists").source.clone();
        RunResult {
            summary,
            database: self.db,
            best_source,
            state: self.state,
        }
    }
}

fn templates(control: &RunControl) -> (PromptTemplate, PromptTemplate) {
    (
        control
            .optimization_template
            .clone()
            .unwrap_or_else(PromptTemplate::optimization_default),
        control
            .repair_template
            .clone()
            .unwrap_or_else(PromptTemplate::repair_default),
    )
}

/// Runs the loop from scratch. The seed program must pass every gate.
pub fn run_evolution(
    seed_program: &str,
    context: &OptimizationContext,
    config: &EvolutionConfig,
    mode: EngineMode,
    provider: &mut dyn MutationProvider,
    eval: &Evaluator<'_>,
    control: &RunControl,
) -> Result<RunResult, EvoError> {
    config.validate()?;
    EvolveBlock::parse(seed_program)?;
    let report = eval.cascade.evaluate(seed_program, eval.runner);
    if !is_eligible(&report) {
        return Err(EvoError::BaselineInvalid(report.failure_diagnostics()));
    }
    let seed_score = report.combined_score;
    let mut db = ProgramDatabase::new(config.island.clone())?;
    if !mode.flags().validity_filter {
        db = db.without_validity_filter();
    }
    let mut seed = CandidateDraft::new(seed_program, report);
    seed.change_summary = "seed program".into();
    db.insert(seed)?;
    let (template, repair_template) = templates(control);
    let engine = Engine {
        mode,
        config,
        context,
        eval,
        control,
        template,
        repair_template,
        db,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        state: EngineState {
            mode,
            seed: config.seed,
            next_iteration: 1,
            provider_calls: provider.calls_made(),
            seed_score,
            feedback: Vec::new(),
            log: Vec::new(),
        },
    };
    engine.run(provider)
}

/// Continues a run from a checkpoint written by [`run_evolution`]. The
/// configuration must match the original run.
pub fn resume_evolution(
    checkpoint_path: &std::path::Path,
    context: &OptimizationContext,
    config: &EvolutionConfig,
    mode: EngineMode,
    provider: &mut dyn MutationProvider,
    eval: &Evaluator<'_>,
    control: &RunControl,
) -> Result<RunResult, EvoError> {
    config.validate()?;
    let cp: checkpoint::Checkpoint<EngineState> = checkpoint::load(checkpoint_path)?;
    let state = cp
        .engine
        .ok_or_else(|| EvoError::Resume("checkpoint has no engine state".into()))?;
    if state.mode != mode {
        return Err(EvoError::Resume(format!(
            "checkpoint was written in mode {} but mode {} was requested",
            state.mode, mode
        )));
    }
    if state.seed != config.seed {
        return Err(EvoError::Resume(format!(
            "checkpoint seed {} differs from configured seed {}",
            state.seed, config.seed
        )));
    }
    if cp.database.config() != &config.island {
        return Err(EvoError::Resume(
            "island configuration differs from checkpoint".into(),
        ));
    }
    provider.set_calls_made(state.provider_calls);
    let (template, repair_template) = templates(control);
    let engine = Engine {
        mode,
        config,
        context,
        eval,
        control,
        template,
        repair_template,
        db: cp.database,
        rng: cp.rng,
        state,
    };
    engine.run(provider)
}

/// Optimizes with tree search instead of the island loop. Every eligible
/// rolled-out node enters the database; the result mirrors an evolution
/// run so the same artifacts and reports apply.
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    seed_program: &str,
    context: &OptimizationContext,
    config: &EvolutionConfig,
    search: &MctsConfig,
    mode: EngineMode,
    provider: &mut dyn MutationProvider,
    eval: &Evaluator<'_>,
    control: &RunControl,
) -> Result<(RunResult, crate::mcts::SearchTree), EvoError> {
    config.validate()?;
    search
        .validate()
        .map_err(|e| EvoError::Config(e.to_string()))?;
    EvolveBlock::parse(seed_program)?;
    let report = eval.cascade.evaluate(seed_program, eval.runner);
    if !is_eligible(&report) {
        return Err(EvoError::BaselineInvalid(report.failure_diagnostics()));
    }
    let seed_score = report.combined_score;
    let mut db = ProgramDatabase::new(config.island.clone())?;
    let mut seed = CandidateDraft::new(seed_program, report);
    seed.change_summary = "seed program".into();
    db.insert(seed)?;

    let (template, _) = templates(control);
    let problem = crate::mcts::OptimizationProblem {
        cascade: eval.cascade,
        runner: eval.runner,
        context: context.clone(),
        template,
        options: PromptOptions {
            diff_mode: config.diff_mode,
            feedback_cap: config.feedback_cap,
            enriched: mode.flags().enriched_context,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let outcome = crate::mcts::search(seed_program, search, &problem, provider, &mut rng, None)
        .map_err(|e| EvoError::Config(e.to_string()))?;
    let tree = outcome.tree;

    // node id -> candidate id, root is the seed
    let mut ids = vec![None; tree.len()];
    ids[0] = Some(0);
    let mut log = Vec::new();
    for (i, rollout) in tree.rollout_log().iter().enumerate() {
        let node = &tree.nodes()[rollout.node];
        let Some(parent) = node.parent else {
            continue;
        };
        let parent_id = ids[parent].unwrap_or(0);
        let report = node.report.clone().expect("rolled-out node has a report");
        let mut record = IterationRecord {
            iteration: i as u64,
            outcome: Outcome::Filtered,
            island: 0,
            parent_id,
            candidate_id: None,
            score: Some(report.combined_score),
            best_score: 0.0,
            migrated: 0,
            detail: node.change_summary.clone(),
        };
        if is_eligible(&report) {
            let mut d = CandidateDraft::new(node.program.clone(), report);
            d.parent_id = Some(parent_id);
            d.generation = i as u64;
            d.change_summary = node.change_summary.clone();
            let id = db.insert(d)?;
            ids[rollout.node] = Some(id);
            record.outcome = Outcome::Inserted;
            record.candidate_id = Some(id);
        }
        record.best_score = db.best_valid().map_or(seed_score, |c| c.fitness());
        log.push(record);
    }
    let engine = Engine {
        mode,
        config,
        context,
        eval,
        control,
        template: PromptTemplate::optimization_default(),
        repair_template: PromptTemplate::repair_default(),
        db,
        rng,
        state: EngineState {
            mode,
            seed: config.seed,
            next_iteration: outcome.iterations + 1,
            provider_calls: provider.calls_made(),
            seed_score,
            feedback: Vec::new(),
            log,
        },
    };
    engine.save_checkpoint()?;
    let mut result = engine.finish();
    result.summary.iterations_run = outcome.iterations;
    Ok((result, tree))
}
