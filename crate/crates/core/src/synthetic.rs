//! Bundled synthetic optimization task.
//!
//! Programs are scored by counting marker statements in the source:
//! `syntax_error();` breaks the build, each `bug();` fails one of four unit
//! tests, each `hack();` costs 0.2 static-analysis score, `opt();` and
//! `slow();` move the simulated speedup. The scripted provider fixture
//! mixes edits that add these statements.

use std::path::Path;

use crate::cascade::{Cascade, CascadeConfig, StageKind, StageSpec};
use crate::graph::ComponentId;
use crate::mutate::{OptimizationContext, Script};
use crate::stage::{StageOutcome, StageRunner};

pub const SEED_PROGRAM: &str = include_str!("../../../fixtures/demo/target.rs");
pub const SCRIPT_JSON: &str = include_str!("../../../fixtures/demo/script.json");
pub const CALL_GRAPH_JSON: &str = include_str!("../../../fixtures/demo/call_graph.json");
pub const PROFILE_JSON: &str = include_str!("../../../fixtures/demo/profile.json");
pub const TARGET: &str = "billing.Invoice.checksum";

pub const UNIT_TESTS: [&str; 4] = [
    "test_empty_batch",
    "test_single_record",
    "test_zero_weight",
    "test_wrapping_overflow",
];
pub const OPT_GAIN: f64 = 0.125;
pub const HACK_PENALTY: f64 = 0.2;
pub const JUDGE_SCORE: f64 = 0.8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Markers {
    pub syntax_errors: u32,
    pub bugs: u32,
    pub hacks: u32,
    pub opts: u32,
    pub slows: u32,
}

pub fn markers(source: &str) -> Markers {
    let mut m = Markers::default();
    for line in source.lines() {
        match line.trim() {
            "syntax_error();" => m.syntax_errors += 1,
            "bug();" => m.bugs += 1,
            "hack();" => m.hacks += 1,
            "opt();" => m.opts += 1,
            "slow();" => m.slows += 1,
            _ => {}
        }
    }
    m
}

pub fn speedup(m: &Markers) -> f64 {
    (1.0 + OPT_GAIN * m.opts as f64) / (1.0 + OPT_GAIN * m.slows as f64)
}

/// Protocol outcome of one stage on `source`.
pub fn outcome(kind: StageKind, source: &str) -> StageOutcome {
    let m = markers(source);
    match kind {
        StageKind::Build => {
            if m.syntax_errors > 0 {
                StageOutcome::fail(format!(
                    "error: unexpected token `syntax_error` ({} occurrence(s))",
                    m.syntax_errors
                ))
            } else {
                StageOutcome::pass(1.0)
            }
        }
        StageKind::UnitTest => {
            let total = UNIT_TESTS.len() as u32;
            let failing = m.bugs.min(total);
            let passed = total - failing;
            if failing == 0 {
                StageOutcome::pass(1.0).with_tests(passed, total)
            } else {
                let names = UNIT_TESTS[UNIT_TESTS.len() - failing as usize..].join(", ");
                let mut o =
                    StageOutcome::fail(format!("failing tests: {names}")).with_tests(passed, total);
                o.score = passed as f64 / total as f64;
                o
            }
        }
        StageKind::StaticAnalysis => {
            let mut o = StageOutcome::pass((1.0 - HACK_PENALTY * m.hacks as f64).max(0.0));
            if m.hacks > 0 {
                o.diagnostics = format!("{} lint warning(s): global mutable cache", m.hacks);
            }
            o
        }
        StageKind::Performance => StageOutcome::pass((speedup(&m) / 2.0).min(1.0)),
        StageKind::LlmJudge => StageOutcome::pass(JUDGE_SCORE),
    }
}

/// Evaluates stages in-process with [`outcome`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticRunner;

impl StageRunner for SyntheticRunner {
    fn run(&self, stage: &StageSpec, source: &str, _path: &Path) -> StageOutcome {
        outcome(stage.kind, source)
    }
}

/// Stage list in cascade order. `command` builds each stage's command line
/// from its kind name.
pub fn stages_with(command: impl Fn(&str) -> Vec<String>) -> Vec<StageSpec> {
    [
        ("build", StageKind::Build, "build"),
        ("unit_tests", StageKind::UnitTest, "unit_test"),
        (
            "static_analysis",
            StageKind::StaticAnalysis,
            "static_analysis",
        ),
        ("performance", StageKind::Performance, "performance"),
        ("judge", StageKind::LlmJudge, "llm_judge"),
    ]
    .into_iter()
    .map(|(name, kind, arg)| StageSpec::new(name, kind, command(arg)))
    .collect()
}

pub fn stages() -> Vec<StageSpec> {
    stages_with(|k| vec!["synthetic".to_string(), k.to_string()])
}

pub fn cascade() -> Cascade {
    Cascade::new(stages(), CascadeConfig::default()).expect("synthetic stages are well formed")
}

pub fn script() -> Script {
    serde_json::from_str(SCRIPT_JSON).expect("bundled script parses")
}

/// Context for the bundled target, built from the bundled graph and profile.
pub fn context() -> OptimizationContext {
    let graph = crate::graph::parse_call_graph(CALL_GRAPH_JSON, "call_graph.json")
        .expect("bundled call graph parses");
    let profile =
        crate::graph::parse_profile(PROFILE_JSON, "profile.json").expect("bundled profile parses");
    let (graph, _) = graph.enrich_with_profile(&profile);
    let block = crate::mutate::EvolveBlock::parse(SEED_PROGRAM).expect("seed has a block");
    OptimizationContext::from_graph(
        &graph,
        &ComponentId::new(TARGET).expect("non-empty"),
        block.body,
    )
    .expect("target is in the graph")
}

/// One in-process run of the bundled task with the scripted provider.
pub fn run(
    mode: crate::evo::EngineMode,
    config: &crate::evo::EvolutionConfig,
    control: &crate::evo::RunControl,
) -> Result<crate::evo::RunResult, crate::evo::EvoError> {
    let mut provider = crate::mutate::ScriptedProvider::new(script(), config.seed);
    let cascade = cascade();
    let eval = crate::evo::Evaluator {
        cascade: &cascade,
        runner: &SyntheticRunner,
    };
    crate::evo::run_evolution(
        SEED_PROGRAM,
        &context(),
        config,
        mode,
        &mut provider,
        &eval,
        control,
    )
}
