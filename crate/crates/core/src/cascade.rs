//! Cascaded candidate evaluation.
//!
//! Stages run strictly in order. After the first three stages the running
//! combined score is checked against `tau1`, `tau2` and `tau3`; a stage that
//! reports failure, or a running score below its gate, rejects the candidate
//! and no later stage is executed. Skipped stages count as zero in the final
//! combined score.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stage::{StageOutcome, StageRunner};

pub const DEFAULT_STAGE_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("cascade needs at least one stage")]
    NoStages,
    #[error("stage {later} ({later_kind:?}) must come after correctness stage {stage}")]
    CorrectnessOrder {
        stage: String,
        later: String,
        later_kind: StageKind,
    },
    #[error("duplicate stage name {0}")]
    DuplicateStage(String),
    #[error("stage {0}: gate threshold must lie in [0, 1]")]
    GateOutOfRange(String),
    #[error("stage {0}: command must not be empty")]
    EmptyCommand(String),
    #[error("thresholds must satisfy 0 <= tau1 <= tau2 <= tau3 <= 1")]
    Thresholds,
    #[error("alpha_judge must lie in [0, 1]")]
    Alpha,
    #[error("component weight for {0} must be finite and non-negative")]
    Weight(String),
    #[error("fallback score needs at least one component")]
    EmptyScores,
    #[error("component score {0} outside [0, 1]")]
    ScoreOutOfRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageKind {
    Build,
    UnitTest,
    Performance,
    StaticAnalysis,
    LlmJudge,
}

impl StageKind {
    /// Build and unit-test stages decide functional correctness.
    pub fn is_correctness(self) -> bool {
        matches!(self, StageKind::Build | StageKind::UnitTest)
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

fn default_timeout() -> Duration {
    DEFAULT_STAGE_TIMEOUT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    /// Argument vector. `{candidate}` is replaced by the candidate file path;
    /// when absent the path is appended as the last argument.
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default = "default_timeout", with = "secs", rename = "timeout_secs")]
    pub timeout: Duration,
    #[serde(default)]
    pub gate_threshold: Option<f64>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, kind: StageKind, command: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            command,
            timeout: DEFAULT_STAGE_TIMEOUT,
            gate_threshold: None,
        }
    }

    pub fn with_gate(mut self, threshold: f64) -> Self {
        self.gate_threshold = Some(threshold);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub name: String,
    pub kind: StageKind,
    pub score: f64,
    pub passed: bool,
    pub diagnostics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests_passed: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests_total: Option<u32>,
    /// Not persisted: wall time differs between otherwise identical runs.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl StageResult {
    /// Fraction of unit tests passing, when the stage reported counts.
    pub fn pass_rate(&self) -> Option<f64> {
        match (self.tests_passed, self.tests_total) {
            (Some(p), Some(t)) if t > 0 => Some((p.min(t)) as f64 / t as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub stage_results: Vec<StageResult>,
    pub combined_score: f64,
    pub passed_all_gates: bool,
    pub rejected_at: Option<String>,
}

impl EvaluationReport {
    pub fn stage(&self, name: &str) -> Option<&StageResult> {
        self.stage_results.iter().find(|r| r.name == name)
    }

    /// Diagnostics of every executed stage that did not pass.
    pub fn failure_diagnostics(&self) -> String {
        let mut out = String::new();
        for r in self.stage_results.iter().filter(|r| !r.passed) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!(
                "[{}] score {:.3}: {}",
                r.name, r.score, r.diagnostics
            ));
        }
        if out.is_empty() {
            if let Some(stage) = &self.rejected_at {
                out = format!("[{stage}] running score below gate threshold");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub alpha_judge: f64,
    /// Per-stage weight by stage name; stages not listed weigh 1.
    pub component_weights: BTreeMap<String, f64>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            tau1: 0.5,
            tau2: 0.75,
            tau3: 0.9,
            alpha_judge: 0.1,
            component_weights: BTreeMap::new(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        let ordered = 0.0 <= self.tau1
            && self.tau1 <= self.tau2
            && self.tau2 <= self.tau3
            && self.tau3 <= 1.0;
        if !ordered {
            return Err(CascadeError::Thresholds);
        }
        if !(0.0..=1.0).contains(&self.alpha_judge) {
            return Err(CascadeError::Alpha);
        }
        for (name, w) in &self.component_weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(CascadeError::Weight(name.clone()));
            }
        }
        Ok(())
    }

    fn gates(&self) -> [f64; 3] {
        [self.tau1, self.tau2, self.tau3]
    }

    /// Effective weight of a stage in the combined score. Judge stages are
    /// scaled by `alpha_judge`; the result is normalized by the caller.
    pub fn stage_weight(&self, stage: &StageSpec) -> f64 {
        let base = self
            .component_weights
            .get(&stage.name)
            .copied()
            .unwrap_or(1.0);
        if stage.kind == StageKind::LlmJudge {
            base * self.alpha_judge
        } else {
            base
        }
    }
}

/// Weighted mean of `scores` under `weights`; plain mean when all weights
/// are zero.
fn weighted_mean(scores: &[f64], weights: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// A validated, ordered stage list with its scoring configuration.
#[derive(Debug, Clone)]
pub struct Cascade {
    stages: Vec<StageSpec>,
    config: CascadeConfig,
    file_name: String,
    work_root: Option<PathBuf>,
}

impl Cascade {
    pub fn new(stages: Vec<StageSpec>, config: CascadeConfig) -> Result<Self, CascadeError> {
        config.validate()?;
        if stages.is_empty() {
            return Err(CascadeError::NoStages);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut last_non_correctness: Option<&StageSpec> = None;
        for s in &stages {
            if !seen.insert(s.name.as_str()) {
                return Err(CascadeError::DuplicateStage(s.name.clone()));
            }
            if let Some(g) = s.gate_threshold {
                if !(0.0..=1.0).contains(&g) {
                    return Err(CascadeError::GateOutOfRange(s.name.clone()));
                }
            }
            if s.kind.is_correctness() {
                if let Some(prev) = last_non_correctness {
                    return Err(CascadeError::CorrectnessOrder {
                        stage: s.name.clone(),
                        later: prev.name.clone(),
                        later_kind: prev.kind,
                    });
                }
            } else if last_non_correctness.is_none() {
                last_non_correctness = Some(s);
            }
        }
        Ok(Self {
            stages,
            config,
            file_name: "candidate.txt".to_string(),
            work_root: None,
        })
    }

    /// Name given to the candidate file handed to stage commands.
    pub fn with_file_name(mut self, name: impl Into<String>) -> Self {
        self.file_name = name.into();
        self
    }

    /// Directory under which per-evaluation sandboxes are created.
    pub fn with_work_root(mut self, dir: impl Into<PathBuf>) -> Self {
        self.work_root = Some(dir.into());
        self
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn has_kind(&self, kind: StageKind) -> bool {
        self.stages.iter().any(|s| s.kind == kind)
    }

    /// The build and unit-test prefix of this cascade, with the same
    /// thresholds. `None` when there are no correctness stages.
    pub fn correctness_only(&self) -> Option<Cascade> {
        let stages: Vec<_> = self
            .stages
            .iter()
            .filter(|s| s.kind.is_correctness())
            .cloned()
            .collect();
        if stages.is_empty() {
            return None;
        }
        Some(Cascade {
            stages,
            config: self.config.clone(),
            file_name: self.file_name.clone(),
            work_root: self.work_root.clone(),
        })
    }

    /// Runs `source` through the stages. Candidate-caused failures never
    /// surface as errors; they end up in the report.
    pub fn evaluate(&self, source: &str, runner: &dyn StageRunner) -> EvaluationReport {
        let sandbox = match &self.work_root {
            Some(root) => {
                let _ = std::fs::create_dir_all(root);
                tempfile::Builder::new().prefix("eval-").tempdir_in(root)
            }
            None => tempfile::Builder::new().prefix("evoopt-eval-").tempdir(),
        };
        let (path, _guard) = match sandbox {
            Ok(dir) => {
                let path = dir.path().join(&self.file_name);
                if let Err(e) = std::fs::write(&path, source) {
                    return self.harness_failure(format!("cannot write candidate file: {e}"));
                }
                (path, Some(dir))
            }
            Err(e) => return self.harness_failure(format!("cannot create sandbox: {e}")),
        };

        let weights: Vec<f64> = self
            .stages
            .iter()
            .map(|s| self.config.stage_weight(s))
            .collect();
        let gates = self.config.gates();
        let mut results = Vec::with_capacity(self.stages.len());
        let mut rejected_at = None;

        for (i, stage) in self.stages.iter().enumerate() {
            let outcome = runner.run(stage, source, &path);
            let result = finish_stage(stage, outcome);
            let stage_ok = result.passed;
            results.push(result);
            if !stage_ok {
                rejected_at = Some(stage.name.clone());
                break;
            }
            if let Some(&tau) = gates.get(i) {
                let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
                let running = weighted_mean(&scores, &weights[..=i]);
                if running < tau {
                    rejected_at = Some(stage.name.clone());
                    break;
                }
            }
        }

        let mut all_scores: Vec<f64> = results.iter().map(|r| r.score).collect();
        all_scores.resize(self.stages.len(), 0.0);
        let combined = weighted_mean(&all_scores, &weights).clamp(0.0, 1.0);
        EvaluationReport {
            stage_results: results,
            combined_score: combined,
            passed_all_gates: rejected_at.is_none(),
            rejected_at,
        }
    }

    fn harness_failure(&self, diagnostics: String) -> EvaluationReport {
        let first = &self.stages[0];
        EvaluationReport {
            stage_results: vec![StageResult {
                name: first.name.clone(),
                kind: first.kind,
                score: 0.0,
                passed: false,
                diagnostics,
                tests_passed: None,
                tests_total: None,
                wall_time: Duration::ZERO,
            }],
            combined_score: 0.0,
            passed_all_gates: false,
            rejected_at: Some(first.name.clone()),
        }
    }
}

fn finish_stage(stage: &StageSpec, outcome: StageOutcome) -> StageResult {
    let score = if outcome.score.is_finite() {
        outcome.score.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut passed = outcome.passed;
    let mut diagnostics = outcome.diagnostics;
    if let Some(gate) = stage.gate_threshold {
        if score < gate {
            passed = false;
            if !diagnostics.is_empty() {
                diagnostics.push('\n');
            }
            diagnostics.push_str(&format!("score {score:.3} below stage gate {gate:.3}"));
        }
    }
    StageResult {
        name: stage.name.clone(),
        kind: stage.kind,
        score,
        passed,
        diagnostics,
        tests_passed: outcome.tests_passed,
        tests_total: outcome.tests_total,
        wall_time: outcome.wall_time,
    }
}

/// Unweighted mean of normalized component scores, rounded once from the
/// exact value so that e.g. {0.2, 0.4, 0.6} gives 0.4 rather than
/// 0.4000000000000001.
pub fn combined_score_fallback(scores: &BTreeMap<String, f64>) -> Result<f64, CascadeError> {
    if scores.is_empty() {
        return Err(CascadeError::EmptyScores);
    }
    for (name, s) in scores {
        if !(0.0..=1.0).contains(s) {
            return Err(CascadeError::ScoreOutOfRange(name.clone()));
        }
    }
    Ok(exact_mean(scores.values().copied()))
}

/// Mean with the sum carried as an unevaluated hi + lo pair (two-sum) and a
/// single correction step on the quotient.
fn exact_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut hi, mut lo, mut n) = (0.0f64, 0.0f64, 0usize);
    for x in values {
        let s = hi + x;
        let bp = s - hi;
        lo += (hi - (s - bp)) + (x - bp);
        hi = s;
        n += 1;
    }
    let (hi, lo) = {
        let s = hi + lo;
        (s, lo - (s - hi))
    };
    let n = n as f64;
    let q = hi / n;
    let r = (-q).mul_add(n, hi) + lo;
    q + r / n
}

/// Whether a report admits its candidate into the program database. The
/// combined score is fitness, not an extra gate.
pub fn is_eligible(report: &EvaluationReport) -> bool {
    report.passed_all_gates && report.rejected_at.is_none()
}

/// Maps a measured speedup onto [0, 1]; halving the baseline time saturates.
pub fn normalize_speedup(baseline: Duration, candidate: Duration) -> f64 {
    if candidate.is_zero() {
        return if baseline.is_zero() { 0.5 } else { 1.0 };
    }
    let speedup = baseline.as_secs_f64() / candidate.as_secs_f64();
    (speedup / 2.0).clamp(0.0, 1.0)
}
