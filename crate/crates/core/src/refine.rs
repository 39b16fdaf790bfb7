//! Diagnostics-driven repair of candidates that failed evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{is_eligible, Cascade, EvaluationReport, StageKind};
use crate::db::RepairStrategy;
use crate::mcts::{
    pass_rate_reward, search, MctsConfig, MctsError, NodeId, SearchProblem, SearchTree,
};
use crate::mutate::{
    apply_mutation, build_repair_prompt, propose, EvolveBlock, MutationProvider, PromptTemplate,
};
use crate::stage::StageRunner;

pub const DEFAULT_REFLECTION_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTask {
    pub candidate_source: String,
    pub diagnostics: String,
    pub attempts_remaining: u32,
    pub strategy: RepairStrategy,
}

impl RepairTask {
    pub fn reflection(source: impl Into<String>, diagnostics: impl Into<String>) -> Self {
        Self {
            candidate_source: source.into(),
            diagnostics: diagnostics.into(),
            attempts_remaining: DEFAULT_REFLECTION_ATTEMPTS,
            strategy: RepairStrategy::Reflection,
        }
    }

    pub fn mcts(source: impl Into<String>, diagnostics: impl Into<String>) -> Self {
        Self {
            candidate_source: source.into(),
            diagnostics: diagnostics.into(),
            attempts_remaining: 0,
            strategy: RepairStrategy::MctsRepair,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepairError {
    #[error("repair requires a unit-test stage")]
    NoUnitTestStage,
    #[error("repair requires at least one correctness stage")]
    NoCorrectnessStage,
    #[error("task strategy {0:?} does not match the repair routine")]
    WrongStrategy(RepairStrategy),
    #[error("reflection needs at least one attempt")]
    NoAttempts,
    #[error(transparent)]
    Search(#[from] MctsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub source: String,
    /// Report from the correctness stages only.
    pub report: EvaluationReport,
    pub provider_calls: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairFailure {
    pub final_diagnostics: String,
    pub provider_calls: u32,
    /// Best unit-test pass rate seen (MCTS repair only).
    pub best_pass_rate: Option<f64>,
    pub best_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepairOutcome {
    Repaired(Repaired),
    Failed(RepairFailure),
}

impl RepairOutcome {
    pub fn provider_calls(&self) -> u32 {
        match self {
            RepairOutcome::Repaired(r) => r.provider_calls,
            RepairOutcome::Failed(f) => f.provider_calls,
        }
    }
}

/// Propose a fix, re-run the correctness stages, and loop on the new
/// diagnostics until the budget runs out.
pub fn reflect_repair(
    task: &RepairTask,
    provider: &mut dyn MutationProvider,
    cascade: &Cascade,
    runner: &dyn StageRunner,
    template: &PromptTemplate,
) -> Result<RepairOutcome, RepairError> {
    if task.strategy != RepairStrategy::Reflection {
        return Err(RepairError::WrongStrategy(task.strategy.clone()));
    }
    if task.attempts_remaining < 1 {
        return Err(RepairError::NoAttempts);
    }
    let checks = cascade
        .correctness_only()
        .ok_or(RepairError::NoCorrectnessStage)?;
    let mut source = task.candidate_source.clone();
    let mut diagnostics = task.diagnostics.clone();
    let mut calls = 0;
    for _ in 0..task.attempts_remaining {
        let block = match EvolveBlock::parse(&source) {
            Ok(b) => b,
            Err(e) => {
                diagnostics = e.to_string();
                break;
            }
        };
        let prompt = build_repair_prompt(template, &block.body, &diagnostics);
        calls += 1;
        let candidate = propose(provider, &prompt, true)
            .map_err(|e| e.to_string())
            .and_then(|resp| apply_mutation(&block, &resp).map_err(|e| e.to_string()));
        let candidate = match candidate {
            Ok(c) => c,
            Err(e) => {
                diagnostics = e;
                continue;
            }
        };
        let report = checks.evaluate(&candidate, runner);
        if is_eligible(&report) {
            return Ok(RepairOutcome::Repaired(Repaired {
                source: candidate,
                report,
                provider_calls: calls,
            }));
        }
        diagnostics = report.failure_diagnostics();
        source = candidate;
    }
    Ok(RepairOutcome::Failed(RepairFailure {
        final_diagnostics: diagnostics,
        provider_calls: calls,
        best_pass_rate: None,
        best_source: None,
    }))
}

struct RepairProblem<'a> {
    checks: Cascade,
    runner: &'a dyn StageRunner,
    template: &'a PromptTemplate,
    root_diagnostics: &'a str,
}

impl SearchProblem for RepairProblem<'_> {
    fn expansion_prompt(&self, tree: &SearchTree, node: NodeId) -> String {
        let n = &tree.nodes()[node];
        let body = EvolveBlock::parse(&n.program).map_or_else(|_| n.program.clone(), |b| b.body);
        let diagnostics = match &n.report {
            Some(r) if !r.failure_diagnostics().is_empty() => r.failure_diagnostics(),
            _ => self.root_diagnostics.to_string(),
        };
        build_repair_prompt(self.template, &body, &diagnostics)
    }

    fn evaluate(&self, program: &str) -> EvaluationReport {
        self.checks.evaluate(program, self.runner)
    }

    fn reward(&self, report: &EvaluationReport) -> f64 {
        pass_rate_reward(report)
    }
}

/// Tree search rooted at the broken candidate, rewarded by unit-test pass
/// rate. Succeeds at the first node reaching pass rate 1 that also clears
/// every correctness gate.
pub fn mcts_repair<R: Rng + ?Sized>(
    task: &RepairTask,
    provider: &mut dyn MutationProvider,
    config: &MctsConfig,
    cascade: &Cascade,
    runner: &dyn StageRunner,
    template: &PromptTemplate,
    rng: &mut R,
) -> Result<RepairOutcome, RepairError> {
    if task.strategy != RepairStrategy::MctsRepair {
        return Err(RepairError::WrongStrategy(task.strategy.clone()));
    }
    if !cascade.has_kind(StageKind::UnitTest) {
        return Err(RepairError::NoUnitTestStage);
    }
    let checks = cascade
        .correctness_only()
        .ok_or(RepairError::NoCorrectnessStage)?;
    let problem = RepairProblem {
        checks,
        runner,
        template,
        root_diagnostics: &task.diagnostics,
    };
    if config.max_iterations == 0 {
        config.validate()?;
        let report = problem.evaluate(&task.candidate_source);
        return Ok(RepairOutcome::Failed(RepairFailure {
            final_diagnostics: report.failure_diagnostics(),
            provider_calls: 0,
            best_pass_rate: Some(pass_rate_reward(&report)),
            best_source: Some(task.candidate_source.clone()),
        }));
    }
    let calls_before = provider.calls_made();
    let outcome = search(
        &task.candidate_source,
        config,
        &problem,
        provider,
        rng,
        Some(1.0),
    )?;
    let calls = (provider.calls_made() - calls_before) as u32;
    if let Some(id) = outcome.reached {
        let node = &outcome.tree.nodes()[id];
        let report = node.report.clone().expect("rolled-out node has a report");
        if is_eligible(&report) {
            return Ok(RepairOutcome::Repaired(Repaired {
                source: node.program.clone(),
                report,
                provider_calls: calls,
            }));
        }
    }
    let best = outcome.best.map(|id| &outcome.tree.nodes()[id]);
    Ok(RepairOutcome::Failed(RepairFailure {
        final_diagnostics: best
            .and_then(|n| n.report.as_ref())
            .map_or_else(|| task.diagnostics.clone(), |r| r.failure_diagnostics()),
        provider_calls: calls,
        best_pass_rate: best.and_then(|n| n.reward),
        best_source: best.map(|n| n.program.clone()),
    }))
}
