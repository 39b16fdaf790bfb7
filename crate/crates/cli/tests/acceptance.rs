//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL` line each; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use evoopt_core::cascade::{Cascade, CascadeConfig, StageSpec};
use evoopt_core::db::{CandidateDraft, IslandConfig, Pool, ProgramDatabase};
use evoopt_core::evo::{self, EngineMode, Evaluator, EvolutionConfig, RunControl};
use evoopt_core::graph::{ComponentId, ProfileEntry, SelectionThresholds, WeightedComponentGraph};
use evoopt_core::mcts::{self, MctsConfig, OptimizationProblem};
use evoopt_core::mutate::{
    apply_mutation, parse_response, EvolveBlock, PromptOptions, PromptTemplate, ScriptEntry,
    ScriptedProvider,
};
use evoopt_core::stage::testing::{FixedRunner, RecordingRunner};
use evoopt_core::stage::CommandStageRunner;
use evoopt_core::synthetic::{self, SyntheticRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Verdict);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "graph oracles", graph_oracles),
        (2, "ucb arithmetic", ucb_arithmetic),
        (3, "mcts bookkeeping", mcts_bookkeeping),
        (4, "sampling distribution", sampling_distribution),
        (5, "migration semantics", migration_semantics),
        (6, "cascade gating", cascade_gating),
        (7, "frozen-context safety", frozen_context_safety),
        (8, "determinism and resume", determinism_and_resume),
        (9, "ablation ordering", ablation_ordering),
        (10, "offline end-to-end run", offline_end_to_end),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {n}: PASS  {name} [{secs:.2}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name} [{secs:.2}s] {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1 -------------------------------------------------------------------------

fn graph_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut selections, mut prunes) = (0usize, 0usize);
    for _ in 0..100 {
        let n = rng.gen_range(1..=200);
        let names: Vec<String> = (0..n)
            .map(|i| format!("m{}.C{i}", rng.gen_range(0..50)))
            .collect();
        let ids: Vec<ComponentId> = names
            .iter()
            .map(|s| ComponentId::new(s.as_str()).unwrap())
            .collect();
        let edge_count = rng.gen_range(0..=3 * n);
        let edges: Vec<(usize, usize)> = (0..edge_count)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();

        // coarse values so ties on time and calls are common
        let mut profile = Vec::new();
        let mut sums: BTreeMap<String, (u128, u128)> =
            names.iter().map(|s| (s.clone(), (0, 0))).collect();
        for name in &names {
            if rng.gen_bool(0.3) {
                continue;
            }
            for _ in 0..rng.gen_range(1..=3) {
                let nanos = rng.gen_range(0..=20u64) * 5_000_000;
                let calls = rng.gen_range(0..=20u64) * 100;
                profile.push(ProfileEntry::new(
                    ComponentId::new(name.as_str()).unwrap(),
                    Duration::from_nanos(nanos),
                    calls,
                ));
                let s = sums.get_mut(name).unwrap();
                s.0 += nanos as u128;
                s.1 += calls as u128;
            }
        }
        profile.push(ProfileEntry::new(
            ComponentId::new("not.in.graph").unwrap(),
            Duration::from_millis(999),
            99_999,
        ));
        profile.shuffle(&mut rng);

        let graph = WeightedComponentGraph::build(
            ids.iter().cloned(),
            edges.iter().map(|&(a, b)| (ids[a].clone(), ids[b].clone())),
        )
        .map_err(|e| e.to_string())?;
        let (graph, warnings) = graph.enrich_with_profile(&profile);
        check!(
            warnings.len() == 1,
            "expected one unknown-component warning"
        );

        let tau_ns = rng.gen_range(0..=20u64) * 5_000_000;
        let tau_freq = rng.gen_range(0..=20u64) * 100;
        let got: Vec<String> = graph
            .select_targets(&SelectionThresholds::new(
                Duration::from_nanos(tau_ns),
                tau_freq,
            ))
            .iter()
            .map(|c| c.as_str().to_string())
            .collect();
        let mut want: Vec<(&String, &(u128, u128))> = sums
            .iter()
            .filter(|(_, (t, c))| *t >= tau_ns as u128 || *c >= tau_freq as u128)
            .collect();
        want.sort_by(|(na, (ta, ca)), (nb, (tb, cb))| tb.cmp(ta).then(cb.cmp(ca)).then(na.cmp(nb)));
        let want: Vec<String> = want.into_iter().map(|(n, _)| n.clone()).collect();
        check!(
            got == want,
            "select_targets differs from brute force on a {n}-node graph"
        );
        selections += 1;

        let edge_set: BTreeSet<(String, String)> = edges
            .iter()
            .map(|&(a, b)| (names[a].clone(), names[b].clone()))
            .collect();
        for target in &names {
            let ctx = graph
                .prune_context(&ComponentId::new(target.as_str()).unwrap())
                .map_err(|e| e.to_string())?;
            let mut frozen = BTreeSet::new();
            for (a, b) in &edge_set {
                if a == target && b != target {
                    frozen.insert(b.clone());
                }
                if b == target && a != target {
                    frozen.insert(a.clone());
                }
            }
            let keep = |c: &String| c == target || frozen.contains(c);
            let want_edges: BTreeSet<(String, String)> = edge_set
                .iter()
                .filter(|(a, b)| keep(a) && keep(b))
                .cloned()
                .collect();
            let want_weights: BTreeMap<String, (u128, u128)> = sums
                .iter()
                .filter(|(c, _)| keep(c))
                .map(|(c, w)| (c.clone(), *w))
                .collect();

            let got_frozen: BTreeSet<String> =
                ctx.frozen.iter().map(|c| c.as_str().to_string()).collect();
            let got_edges: BTreeSet<(String, String)> = ctx
                .edges
                .iter()
                .map(|(a, b)| (a.as_str().to_string(), b.as_str().to_string()))
                .collect();
            let got_weights: BTreeMap<String, (u128, u128)> = ctx
                .weights
                .iter()
                .map(|(c, w)| {
                    (
                        c.as_str().to_string(),
                        (w.exec_time.as_nanos(), w.call_count as u128),
                    )
                })
                .collect();
            check!(
                got_frozen == frozen,
                "prune_context({target}) frozen set differs"
            );
            check!(
                got_edges == want_edges,
                "prune_context({target}) edges differ"
            );
            check!(
                got_weights == want_weights,
                "prune_context({target}) weights differ"
            );
            prunes += 1;
        }
    }
    let elapsed = start.elapsed();
    check!(
        elapsed < Duration::from_secs(5),
        "took {elapsed:?}, limit 5s"
    );
    Ok(format!(
        "{selections} selections and {prunes} prunings match"
    ))
}

// 2 -------------------------------------------------------------------------

fn ucb_arithmetic() -> Verdict {
    // independent form: sqrt via exp/ln, division via reciprocal
    fn reference(v: f64, n: u64, parent: u64, c: f64) -> f64 {
        let inv = 1.0 / n as f64;
        v * inv + c * (0.5 * ((parent as f64).ln() * inv).ln()).exp()
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tuples: Vec<(f64, u64, u64, f64)> = vec![(2.0, 2, 4, 1.0)];
    while tuples.len() < 1000 {
        let n = rng.gen_range(1..=5000u64);
        let parent = rng.gen_range(n.max(2)..=20_000);
        tuples.push((
            rng.gen_range(0.0..=n as f64),
            n,
            parent,
            rng.gen_range(0.01..4.0),
        ));
    }
    let mut worst = 0.0f64;
    for &(v, n, parent, c) in &tuples {
        let got = mcts::ucb(v, n, parent, c).map_err(|e| e.to_string())?;
        let want = reference(v, n, parent, c);
        let rel = ((got - want) / want).abs();
        worst = worst.max(rel);
        check!(
            rel <= 1e-12,
            "ucb({v}, {n}, {parent}, {c}) = {got}, reference {want}"
        );
    }
    let mut tree = mcts::SearchTree::new("root");
    let child = tree
        .add_child(mcts::SearchTree::ROOT, "child", "")
        .map_err(|e| e.to_string())?;
    check!(
        mcts::ucb_score(&tree.nodes()[child], 4, 1.0).is_ok_and(f64::is_infinite),
        "unvisited node must score +inf"
    );
    tree.backpropagate(child, 1.0).map_err(|e| e.to_string())?;
    tree.backpropagate(child, 1.0).map_err(|e| e.to_string())?;
    let known = mcts::ucb_score(&tree.nodes()[child], 4, 1.0).map_err(|e| e.to_string())?;
    check!((known - 1.8326).abs() < 5e-5, "ucb(2, 2, 4, 1) = {known}");
    check!(
        ((known - reference(2.0, 2, 4, 1.0)) / known).abs() <= 1e-12,
        "node form differs"
    );
    Ok(format!(
        "1000 tuples, worst relative error {worst:.1e}, ucb(2,2,4,1) = {known:.4}"
    ))
}

// 3 -------------------------------------------------------------------------

fn anchored(line: &str) -> ScriptEntry {
    ScriptEntry::respond(format!(
        "<<<<<<< SEARCH\n    // end-of-body\n=======\n    {line}\n    // end-of-body\n>>>>>>> REPLACE\n"
    ))
}

fn mcts_bookkeeping() -> Verdict {
    let cascade = synthetic::cascade();
    let problem = OptimizationProblem {
        cascade: &cascade,
        runner: &SyntheticRunner,
        context: synthetic::context(),
        template: PromptTemplate::optimization_default(),
        options: PromptOptions::default(),
    };
    let mut provider = ScriptedProvider::sequential(vec![
        anchored("opt();"),
        anchored("slow();"),
        anchored("hack();"),
        anchored("// spacer"),
    ]);
    let config = MctsConfig {
        max_iterations: 50,
        ..MctsConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = mcts::search(
        synthetic::SEED_PROGRAM,
        &config,
        &problem,
        &mut provider,
        &mut rng,
        None,
    )
    .map_err(|e| e.to_string())?;
    let tree = &out.tree;
    let log = tree.rollout_log();
    check!(log.len() == 50, "expected 50 rollouts, got {}", log.len());

    let mut v = vec![0.0f64; tree.len()];
    let mut n = vec![0u64; tree.len()];
    for r in log {
        // walk parent links directly rather than through the tree helpers
        let mut at = Some(r.node);
        while let Some(id) = at {
            v[id] += r.reward;
            n[id] += 1;
            at = tree.nodes()[id].parent;
        }
    }
    for node in tree.nodes() {
        check!(
            node.cumulative_reward == v[node.id] && node.visit_count == n[node.id],
            "node {} holds (V={}, N={}), replay gives ({}, {})",
            node.id,
            node.cumulative_reward,
            node.visit_count,
            v[node.id],
            n[node.id]
        );
        check!(
            node.cumulative_reward <= node.visit_count as f64,
            "V > N at node {}",
            node.id
        );
    }
    check!(
        tree.root().visit_count == 50,
        "root.N = {}",
        tree.root().visit_count
    );
    Ok(format!(
        "{} nodes replayed exactly, root.N = 50",
        tree.len()
    ))
}

// 4 -------------------------------------------------------------------------

fn scored_report(score: f64) -> evoopt_core::cascade::EvaluationReport {
    let cascade = Cascade::new(synthetic::stages(), CascadeConfig::default()).unwrap();
    cascade.evaluate("", &FixedRunner::uniform(score))
}

fn sampling_distribution() -> Verdict {
    let mut db = ProgramDatabase::new(IslandConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let mut d = CandidateDraft::new(format!("p{i}"), scored_report(rng.gen_range(0.9..1.0)));
        d.island = i % 5;
        db.insert(d).map_err(|e| e.to_string())?;
    }
    let (archive, island, global) = (db.archive().len(), db.island(0).len(), db.len());
    check!(
        archive == 20 && island == 20 && global == 100,
        "pools not distinct: {archive}/{island}/{global}"
    );
    let mut counts = [0u32; 3];
    for _ in 0..30_000 {
        let (pool, _) = db.sample_parent(&mut rng, 0).map_err(|e| e.to_string())?;
        counts[match pool {
            Pool::Archive => 0,
            Pool::Island => 1,
            Pool::Global => 2,
        }] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 30_000.0).collect();
    for (f, want) in freq.iter().zip([0.7, 0.2, 0.1]) {
        check!((f - want).abs() <= 0.02, "frequencies {freq:?}");
    }
    Ok(format!(
        "archive {:.4}, island {:.4}, global {:.4}",
        freq[0], freq[1], freq[2]
    ))
}

// 5 -------------------------------------------------------------------------

fn migration_semantics() -> Verdict {
    let config = IslandConfig::default();
    check!(
        config.island_count == 5 && config.migration_interval == 50,
        "unexpected defaults"
    );
    let mut db = ProgramDatabase::new(config.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scores: Vec<f64> = (0..50).map(|i| 0.9 + i as f64 * 0.002).collect();
    scores.shuffle(&mut rng);
    for (i, s) in scores.iter().enumerate() {
        let mut d = CandidateDraft::new(format!("p{i}"), scored_report(*s));
        d.island = i % 5;
        db.insert(d).map_err(|e| e.to_string())?;
    }
    let before: Vec<Vec<u64>> = (0..5).map(|i| db.island(i).to_vec()).collect();
    let best_of = |ids: &[u64]| -> u64 {
        *ids.iter()
            .max_by(|a, b| {
                db.get(**a)
                    .unwrap()
                    .fitness()
                    .total_cmp(&db.get(**b).unwrap().fitness())
            })
            .unwrap()
    };
    let tops: Vec<u64> = before.iter().map(|ids| best_of(ids)).collect();

    let generation = 50u64;
    check!(
        generation.is_multiple_of(config.migration_interval),
        "generation 50 is not a migration point"
    );
    let record = db.migrate();
    check!(
        record.copies.len() == 10,
        "{} copies, expected 10",
        record.copies.len()
    );
    for (to, originals) in before.iter().enumerate() {
        let island = db.island(to);
        check!(island.len() == 12, "island {to} holds {}", island.len());
        check!(
            island[..10] == originals[..],
            "island {to} lost an original"
        );
        let mut arrivals: Vec<(usize, u64)> = record
            .copies
            .iter()
            .filter(|c| c.to_island == to)
            .map(|c| (c.from_island, db.get(c.new_id).unwrap().origin()))
            .collect();
        arrivals.sort();
        let (left, right) = ((to + 4) % 5, (to + 1) % 5);
        let mut want = vec![(left, tops[left]), (right, tops[right])];
        want.sort();
        check!(
            arrivals == want,
            "island {to} received {arrivals:?}, expected {want:?}"
        );
    }
    Ok("10 copies, exactly 1 top candidate from each island to each ring neighbor".into())
}

// 6 -------------------------------------------------------------------------

fn cascade_gating() -> Verdict {
    let cascade = synthetic::cascade();
    let runner = RecordingRunner::new(FixedRunner::uniform(1.0).with_score("build", 0.4));
    let report = cascade.evaluate(synthetic::SEED_PROGRAM, &runner);
    check!(
        report.rejected_at.as_deref() == Some("build"),
        "rejected at {:?}",
        report.rejected_at
    );
    check!(
        runner.calls() == ["build"],
        "stages executed: {:?}",
        runner.calls()
    );

    // same check with real commands that log every invocation to a file
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("invocations.log");
    let script = dir.path().join("stage.sh");
    std::fs::write(
        &script,
        format!(
            "echo \"$1\" >> '{}'\nif [ \"$1\" = build ]; then s=0.4; else s=1.0; fi\n\
             printf '{{\"score\": %s, \"passed\": true}}\\n' \"$s\"\n",
            log.display()
        ),
    )
    .map_err(|e| e.to_string())?;
    let stages: Vec<StageSpec> = synthetic::stages_with(|kind| {
        vec![
            "sh".into(),
            script.display().to_string(),
            kind.into(),
            "{candidate}".into(),
        ]
    });
    let real = Cascade::new(stages, CascadeConfig::default()).map_err(|e| e.to_string())?;
    let report = real.evaluate(synthetic::SEED_PROGRAM, &CommandStageRunner::new());
    let invoked = std::fs::read_to_string(&log).map_err(|e| e.to_string())?;
    check!(
        report.rejected_at.as_deref() == Some("build"),
        "command cascade rejected at {:?}",
        report.rejected_at
    );
    check!(invoked == "build\n", "commands run: {invoked:?}");

    let fallback = evoopt_core::cascade::combined_score_fallback(
        &[("a", 0.2), ("b", 0.4), ("c", 0.6)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    check!(fallback == 0.4, "fallback mean = {fallback:?}");
    Ok("rejected at stage 1, 1 of 5 stages run, fallback = 0.4".into())
}

// 7 -------------------------------------------------------------------------

fn random_line(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 8] = ["acc", "r", "x", "total", "weight()", "+=", "1", ";"];
    let len = rng.gen_range(1..5);
    let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
    format!("{}{}", " ".repeat(rng.gen_range(0..8)), words.join(" "))
}

fn random_source(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..6) {
        s.push_str(&random_line(rng));
        s.push('\n');
    }
    s.push_str("    // EVOLVE-BLOCK-START\n");
    for _ in 0..rng.gen_range(0..8) {
        s.push_str(&random_line(rng));
        s.push('\n');
    }
    s.push_str("    // EVOLVE-BLOCK-END");
    if rng.gen_bool(0.8) {
        s.push('\n');
        for _ in 0..rng.gen_range(0..6) {
            s.push_str(&random_line(rng));
            s.push('\n');
        }
        if rng.gen_bool(0.3) {
            s.push_str("no trailing newline");
        }
    }
    s
}

fn random_response(rng: &mut ChaCha8Rng, block: &EvolveBlock) -> String {
    let replacement = if rng.gen_bool(0.05) {
        "// EVOLVE-BLOCK-END".to_string()
    } else {
        (0..rng.gen_range(0..4))
            .map(|_| random_line(rng))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let body_lines: Vec<&str> = block.body.lines().collect();
    match rng.gen_range(0..4) {
        0 => format!("rewrite\n```rust\n{replacement}\n```\n"),
        1 if !body_lines.is_empty() => {
            let search = body_lines.choose(rng).unwrap();
            format!("<<<<<<< SEARCH\n{search}\n=======\n{replacement}\n>>>>>>> REPLACE\n")
        }
        2 => {
            // text that only occurs outside the body, if anywhere
            let search = block.prefix.lines().next().unwrap_or("absent");
            format!("<<<<<<< SEARCH\n{search}\n=======\n{replacement}\n>>>>>>> REPLACE\n")
        }
        _ => {
            let search = random_line(rng);
            format!("<<<<<<< SEARCH\n{search}\n=======\n{replacement}\n>>>>>>> REPLACE\n")
        }
    }
}

fn frozen_context_safety() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut applied, mut refused) = (0, 0);
    for run in 0..200 {
        let source = random_source(&mut rng);
        let block = EvolveBlock::parse(&source).map_err(|e| format!("run {run}: {e}"))?;
        check!(
            block.reassemble() == source,
            "run {run}: round trip changed the source"
        );

        let raw = random_response(&mut rng, &block);
        let Ok(response) = parse_response(&raw, true) else {
            refused += 1;
            continue;
        };
        let Ok(new_source) = apply_mutation(&block, &response) else {
            refused += 1;
            continue;
        };
        applied += 1;
        let head = format!("{}{}", block.prefix, block.start_marker);
        let tail = format!("{}{}", block.end_marker, block.suffix);
        check!(
            new_source.as_bytes().starts_with(head.as_bytes())
                && new_source.as_bytes().ends_with(tail.as_bytes())
                && new_source.len() >= head.len() + tail.len(),
            "run {run}: bytes outside the body changed"
        );
        let reparsed = EvolveBlock::parse(&new_source).map_err(|e| format!("run {run}: {e}"))?;
        check!(
            reparsed.reassemble() == new_source,
            "run {run}: round trip of result"
        );
        check!(
            reparsed.prefix == block.prefix && reparsed.suffix == block.suffix,
            "run {run}: frozen text differs after reparse"
        );
    }
    check!(
        applied >= 50 && refused >= 20,
        "weak sample: {applied} applied, {refused} refused"
    );
    Ok(format!(
        "200 runs, {applied} edits applied, {refused} refused, frozen bytes intact"
    ))
}

// 8 -------------------------------------------------------------------------

fn run_into(
    dir: &Path,
    mode: EngineMode,
    config: &EvolutionConfig,
    stop_after: Option<u64>,
) -> Result<Vec<u8>, String> {
    let control = RunControl {
        checkpoint_path: Some(dir.join("checkpoint.json")),
        stop_after,
        ..RunControl::default()
    };
    let result = synthetic::run(mode, config, &control).map_err(|e| e.to_string())?;
    serde_json::to_vec_pretty(&result.summary).map_err(|e| e.to_string())
}

fn determinism_and_resume() -> Verdict {
    let config = EvolutionConfig {
        max_iterations: 20,
        seed: 11,
        checkpoint_interval: 5,
        ..EvolutionConfig::default()
    };
    for mode in EngineMode::ALL {
        let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let a = run_into(dirs[0].path(), mode, &config, None)?;
        let b = run_into(dirs[1].path(), mode, &config, None)?;
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("checkpoint.json")).unwrap();
        check!(a == b, "{mode}: summaries differ between identical runs");
        check!(
            read(&dirs[0]) == read(&dirs[1]),
            "{mode}: checkpoints differ between identical runs"
        );

        run_into(dirs[2].path(), mode, &config, Some(10))?;
        let cascade = synthetic::cascade();
        let eval = Evaluator {
            cascade: &cascade,
            runner: &SyntheticRunner,
        };
        let mut provider = ScriptedProvider::new(synthetic::script(), config.seed);
        let control = RunControl {
            checkpoint_path: Some(dirs[2].path().join("checkpoint.json")),
            ..RunControl::default()
        };
        let resumed = evo::resume_evolution(
            &dirs[2].path().join("checkpoint.json"),
            &synthetic::context(),
            &config,
            mode,
            &mut provider,
            &eval,
            &control,
        )
        .map_err(|e| e.to_string())?;
        let c = serde_json::to_vec_pretty(&resumed.summary).map_err(|e| e.to_string())?;
        check!(
            a == c,
            "{mode}: resumed summary differs from the uninterrupted run"
        );
        check!(
            read(&dirs[0]) == read(&dirs[2]),
            "{mode}: resumed checkpoint differs"
        );
    }
    Ok("all four modes byte-identical across reruns and across stop-at-10 + resume".into())
}

// 9 -------------------------------------------------------------------------

fn ablation_ordering() -> Verdict {
    let start = Instant::now();
    let seeds = 0..8u64;
    let mut rows = Vec::new();
    for mode in EngineMode::ALL {
        let (mut valid, mut kpi) = (0.0, 0.0);
        for seed in seeds.clone() {
            let config = EvolutionConfig {
                max_iterations: 20,
                seed,
                ..EvolutionConfig::default()
            };
            let r =
                synthetic::run(mode, &config, &RunControl::default()).map_err(|e| e.to_string())?;
            valid += r.summary.valid_count as f64;
            kpi += r.summary.average_score;
        }
        let n = seeds.clone().count() as f64;
        rows.push((mode, valid / n, kpi / n));
    }
    let table = rows
        .iter()
        .map(|(m, v, k)| format!("{m} valid {v:.2} kpi {k:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    for w in rows.windows(2) {
        check!(
            w[0].1 < w[1].1 && w[0].2 < w[1].2,
            "ordering broken: {table}"
        );
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(table)
}

// 10 ------------------------------------------------------------------------

fn hand_score(source: &str) -> f64 {
    let count = |marker: &str| source.lines().filter(|l| l.trim() == marker).count() as f64;
    let static_score = 1.0 - 0.2 * count("hack();");
    let speedup = (1.0 + 0.125 * count("opt();")) / (1.0 + 0.125 * count("slow();"));
    let perf = (speedup / 2.0).min(1.0);
    // build and unit tests at 1, judge at 0.8 with weight 0.1
    (1.0 + 1.0 + static_score + perf + 0.1 * 0.8) / 4.1
}

fn offline_end_to_end() -> Verdict {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo");
    let config = root.join("engine.toml");
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<std::process::Output, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_evoopt"))
            .args(args)
            .env("http_proxy", "http://127.0.0.1:9")
            .env("https_proxy", "http://127.0.0.1:9")
            .env_remove("EVOOPT_API_KEY")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "{args:?} exited {:?}: {}",
                o.status.code(),
                String::from_utf8_lossy(&o.stderr)
            ));
        }
        Ok(o)
    };
    let out_s = out.path().to_str().unwrap();
    let cfg_s = config.to_str().unwrap();
    run(&["analyze", "--config", cfg_s, "--out", out_s])?;
    run(&["optimize", "--config", cfg_s, "--out", out_s])?;
    let report = run(&["report", out_s, "--json"])?;
    let report: serde_json::Value =
        serde_json::from_slice(&report.stdout).map_err(|e| e.to_string())?;
    let reported = report["runs"][0]["average_kpi"]
        .as_f64()
        .ok_or("report has no average_kpi")?;

    let checkpoint: serde_json::Value = serde_json::from_slice(
        &std::fs::read(out.path().join("checkpoint.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let generated: Vec<f64> = checkpoint["database"]["candidates"]
        .as_array()
        .ok_or("checkpoint has no candidates")?
        .iter()
        .filter(|c| !c["parent_id"].is_null() && c.get("migrated_from").is_none_or(|m| m.is_null()))
        .map(|c| hand_score(c["source"].as_str().unwrap_or_default()))
        .collect();
    check!(
        !generated.is_empty(),
        "no generated candidates in the checkpoint"
    );
    let expected = generated.iter().sum::<f64>() / generated.len() as f64;

    let log =
        std::fs::read_to_string(out.path().join("iterations.jsonl")).map_err(|e| e.to_string())?;
    check!(
        log.lines().count() == 20,
        "{} iteration records",
        log.lines().count()
    );
    check!(
        (reported - expected).abs() < 1e-12,
        "report says {reported}, hand-computed mean of {} scores is {expected}",
        generated.len()
    );
    Ok(format!(
        "exit 0 x3, average KPI {reported:.6} = hand mean over {} programs",
        generated.len()
    ))
}
