use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use evoopt_core::cascade::StageKind;
use evoopt_core::checkpoint;
use evoopt_core::config::{ConfigError, EngineConfigFile, ProviderConfig, Strategy};
use evoopt_core::evo::{
    resume_evolution, run_evolution, run_search, EngineMode, EngineState, Evaluator, EvoError,
    RunControl, RunResult, RunSummary,
};
use evoopt_core::graph::{
    load_call_graph, load_profile, target_report, ComponentId, GraphError, WeightedComponentGraph,
};
use evoopt_core::mutate::{
    prompt::{OPTIMIZATION_SLOTS, REPAIR_SLOTS},
    EvolveBlock, LlmProvider, MutationProvider, OptimizationContext, PromptTemplate, Script,
    ScriptedProvider,
};
use evoopt_core::stage::CommandStageRunner;
use evoopt_core::synthetic;
use serde_json::json;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_BASELINE: u8 = 4;
const EXIT_INPUT: u8 = 5;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  runtime or I/O failure
  2  command-line usage error
  3  configuration error
  4  baseline program fails evaluation
  5  invalid input (malformed graph/profile, missing evolve block, missing run artifacts)

Environment:
  EVOOPT_API_KEY  bearer token for the chat-completion provider (name configurable)
  RUST_LOG        log filter, e.g. info";

#[derive(Parser)]
#[command(name = "evoopt", version, about = "Profile-guided evolutionary code optimization", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank optimization targets from the call graph and profile.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the evolve block of a source file.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Source file with one evolve block (defaults to the configured one).
        source: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EngineMode>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from a checkpoint (defaults to <out>/checkpoint.json).
        #[arg(long, num_args = 0..=1, value_name = "CHECKPOINT")]
        resume: Option<Option<PathBuf>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the per-mode comparison as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Scores a file against the bundled synthetic task (stage protocol).
    #[command(hide = true)]
    SyntheticStage { kind: String, file: PathBuf },
}

fn parse_mode(s: &str) -> Result<EngineMode, String> {
    s.parse::<EngineMode>().map_err(|e| e.to_string())
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_failure(e: ConfigError) -> Failure {
    Failure::new(EXIT_CONFIG, e)
}

fn graph_failure(e: GraphError) -> Failure {
    Failure::new(EXIT_INPUT, e)
}

fn evo_failure(e: EvoError) -> Failure {
    let code = match &e {
        EvoError::Config(_) | EvoError::Resume(_) => EXIT_CONFIG,
        EvoError::BaselineInvalid(_) => EXIT_BASELINE,
        EvoError::Input(_) => EXIT_INPUT,
        EvoError::Checkpoint(_) | EvoError::Db(_) => EXIT_RUNTIME,
    };
    Failure::new(code, e)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_RUNTIME, anyhow!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn load_graph(config: &EngineConfigFile) -> CliResult<WeightedComponentGraph> {
    let graph = load_call_graph(&config.call_graph).map_err(graph_failure)?;
    let profile = load_profile(&config.profile).map_err(graph_failure)?;
    let (graph, warnings) = graph.enrich_with_profile(&profile);
    for w in &warnings {
        log::warn!("{}: {w}", config.profile.display());
    }
    Ok(graph)
}

fn analyze(config_path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let config = EngineConfigFile::load(config_path).map_err(config_failure)?;
    let graph = load_call_graph(&config.call_graph).map_err(graph_failure)?;
    let profile = load_profile(&config.profile).map_err(graph_failure)?;
    let (graph, warnings) = graph.enrich_with_profile(&profile);
    let thresholds = config.thresholds.to_thresholds().map_err(config_failure)?;
    let targets = target_report(&graph, &thresholds);

    let out = out.unwrap_or_else(|| config.output_dir.clone());
    create_dir(&out)?;
    let report = json!({
        "thresholds": {
            "tau_time_ms": config.thresholds.tau_time_ms,
            "tau_freq": config.thresholds.tau_freq,
        },
        "targets": targets,
        "warnings": warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    });
    let path = out.join("targets.json");
    write_file(
        &path,
        serde_json::to_string_pretty(&report).expect("json") + "\n",
    )?;

    println!(
        "{:>4}  {:<40} {:>12} {:>10}  frozen",
        "rank", "target", "time (ms)", "calls"
    );
    for (i, t) in targets.iter().enumerate() {
        println!(
            "{:>4}  {:<40} {:>12.3} {:>10}  {}",
            i + 1,
            t.target,
            t.exec_time_ms,
            t.call_count,
            if t.frozen.is_empty() {
                "-".to_string()
            } else {
                t.frozen.join(", ")
            }
        );
    }
    if targets.is_empty() {
        println!("no component meets the thresholds");
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn load_template(path: Option<&Path>, slots: &[&str]) -> CliResult<Option<PromptTemplate>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    PromptTemplate::parse(&text, slots)
        .map(Some)
        .map_err(|e| Failure::new(EXIT_CONFIG, anyhow!("{}: {e}", path.display())))
}

fn build_provider(config: &EngineConfigFile, seed: u64) -> CliResult<Box<dyn MutationProvider>> {
    match &config.provider {
        ProviderConfig::Scripted { script } => {
            let script = Script::load(script).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            Ok(Box::new(ScriptedProvider::new(script, seed)))
        }
        ProviderConfig::Llm(llm) => LlmProvider::new(llm.clone())
            .map(|p| Box::new(p) as Box<dyn MutationProvider>)
            .map_err(|e| Failure::new(EXIT_CONFIG, e)),
    }
}

struct OptimizeArgs {
    source: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<EngineMode>,
    iterations: Option<u64>,
    resume: Option<Option<PathBuf>>,
    out: Option<PathBuf>,
}

fn optimize(config_path: &Path, args: OptimizeArgs) -> CliResult<()> {
    let mut config = EngineConfigFile::load(config_path).map_err(config_failure)?;
    if let Some(seed) = args.seed {
        config.evolution.seed = seed;
    }
    if let Some(n) = args.iterations {
        config.evolution.max_iterations = n;
        config.mcts.max_iterations = n;
    }
    let mode = match args.mode {
        Some(m) => m,
        None => config.engine_mode().map_err(config_failure)?,
    };
    let out = args.out.unwrap_or_else(|| config.output_dir.clone());
    let source_path = args
        .source
        .or_else(|| config.source.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, anyhow!("no source file given or configured")))?;
    let source = fs::read_to_string(&source_path)
        .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("{}: {e}", source_path.display())))?;
    let block = EvolveBlock::parse(&source)
        .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("{}: {e}", source_path.display())))?;

    let graph = load_graph(&config)?;
    let thresholds = config.thresholds.to_thresholds().map_err(config_failure)?;
    let target = match &config.target {
        Some(t) => ComponentId::new(t.as_str()).map_err(|e| Failure::new(EXIT_CONFIG, e))?,
        None => graph
            .select_targets(&thresholds)
            .into_iter()
            .next()
            .ok_or_else(|| {
                Failure::new(EXIT_CONFIG, anyhow!("no component meets the thresholds"))
            })?,
    };
    let mut context = OptimizationContext::from_graph(&graph, &target, block.body.clone())
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    context.constraints = config.constraints.clone();

    if config.stages.is_empty() {
        return Err(Failure::new(
            EXIT_CONFIG,
            anyhow!("at least one [[stages]] entry is required"),
        ));
    }
    let mut cascade = config.build_cascade().map_err(config_failure)?;
    if config.candidate_file_name.is_none() {
        if let Some(name) = source_path.file_name() {
            cascade = cascade.with_file_name(name.to_string_lossy().to_string());
        }
    }
    let exe = std::env::current_exe().map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
    let config_dir = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let runner = CommandStageRunner::new()
        .with_var("self", exe.display().to_string())
        .with_working_dir(config_dir);
    let eval = Evaluator {
        cascade: &cascade,
        runner: &runner,
    };
    let mut provider = build_provider(&config, config.evolution.seed)?;

    create_dir(&out)?;
    let checkpoint_path = out.join("checkpoint.json");
    let control = RunControl {
        checkpoint_path: Some(checkpoint_path.clone()),
        stop_after: None,
        optimization_template: load_template(
            config.templates.optimization.as_deref(),
            &OPTIMIZATION_SLOTS,
        )?,
        repair_template: load_template(config.templates.repair.as_deref(), &REPAIR_SLOTS)?,
    };

    let result: RunResult = match config.strategy {
        Strategy::Evolution => match args.resume {
            Some(from) => {
                let from = from.unwrap_or_else(|| checkpoint_path.clone());
                resume_evolution(
                    &from,
                    &context,
                    &config.evolution,
                    mode,
                    provider.as_mut(),
                    &eval,
                    &control,
                )
                .map_err(evo_failure)?
            }
            None => run_evolution(
                &source,
                &context,
                &config.evolution,
                mode,
                provider.as_mut(),
                &eval,
                &control,
            )
            .map_err(evo_failure)?,
        },
        Strategy::Mcts => {
            if args.resume.is_some() {
                return Err(Failure::new(
                    EXIT_CONFIG,
                    anyhow!("--resume is only supported with strategy = \"evolution\""),
                ));
            }
            let (result, tree) = run_search(
                &source,
                &context,
                &config.evolution,
                &config.mcts,
                mode,
                provider.as_mut(),
                &eval,
                &control,
            )
            .map_err(evo_failure)?;
            write_file(&out.join("tree.json"), tree.to_json())?;
            result
        }
    };

    let best_name = format!(
        "best_{}",
        source_path.file_name().map_or_else(
            || "program".to_string(),
            |n| n.to_string_lossy().to_string()
        )
    );
    write_file(&out.join(&best_name), &result.best_source)?;
    let summary = &result.summary;
    write_file(
        &out.join("run_summary.json"),
        serde_json::to_string_pretty(summary).expect("json") + "\n",
    )?;
    let mut lines = String::new();
    for record in &summary.per_iteration_log {
        lines.push_str(&serde_json::to_string(record).expect("json"));
        lines.push('\n');
    }
    write_file(&out.join("iterations.jsonl"), lines)?;

    println!("mode            {}", summary.mode);
    println!("iterations      {}", summary.iterations_run);
    println!("valid programs  {}", summary.valid_count);
    println!("average KPI     {:.6}", summary.average_score);
    println!(
        "best KPI        {:.6} (candidate {})",
        summary.best_score, summary.best_candidate_id
    );
    println!("best program    {}", out.join(&best_name).display());
    Ok(())
}

struct RunEntry {
    dir: PathBuf,
    summary: RunSummary,
    population: Option<usize>,
}

fn load_run(dir: &Path) -> CliResult<RunEntry> {
    let path = dir.join("run_summary.json");
    if !path.is_file() {
        return Err(Failure::new(
            EXIT_INPUT,
            anyhow!("missing run artifacts: {} not found", path.display()),
        ));
    }
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("{}: {e}", path.display())))?;
    let cp_path = dir.join("checkpoint.json");
    let population = if cp_path.is_file() {
        let cp: checkpoint::Checkpoint<EngineState> = checkpoint::load(&cp_path)
            .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("{}: {e}", cp_path.display())))?;
        Some(cp.database.len())
    } else {
        None
    };
    Ok(RunEntry {
        dir: dir.to_path_buf(),
        summary,
        population,
    })
}

struct ModeRow {
    mode: EngineMode,
    runs: usize,
    valid: f64,
    average: f64,
    best: f64,
}

fn mode_rows(runs: &[RunEntry]) -> Vec<ModeRow> {
    let mut order: Vec<EngineMode> = Vec::new();
    for r in runs {
        if !order.contains(&r.summary.mode) {
            order.push(r.summary.mode);
        }
    }
    order
        .into_iter()
        .map(|mode| {
            let group: Vec<&RunSummary> = runs
                .iter()
                .map(|r| &r.summary)
                .filter(|s| s.mode == mode)
                .collect();
            let n = group.len() as f64;
            ModeRow {
                mode,
                runs: group.len(),
                valid: group.iter().map(|s| s.valid_count as f64).sum::<f64>() / n,
                average: group.iter().map(|s| s.average_score).sum::<f64>() / n,
                best: group.iter().map(|s| s.best_score).sum::<f64>() / n,
            }
        })
        .collect()
}

fn report(dirs: &[PathBuf], csv: Option<PathBuf>, as_json: bool) -> CliResult<()> {
    let runs = dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = mode_rows(&runs);
    if as_json {
        let doc = json!({
            "runs": runs.iter().map(|r| json!({
                "dir": r.dir.display().to_string(),
                "mode": r.summary.mode,
                "seed": r.summary.seed,
                "iterations": r.summary.iterations_run,
                "valid_count": r.summary.valid_count,
                "average_kpi": r.summary.average_score,
                "best_kpi": r.summary.best_score,
                "population": r.population,
            })).collect::<Vec<_>>(),
            "modes": rows.iter().map(|m| json!({
                "mode": m.mode,
                "runs": m.runs,
                "mean_valid_count": m.valid,
                "mean_average_kpi": m.average,
                "mean_best_kpi": m.best,
            })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        println!(
            "{:<32} {:<15} {:>6} {:>6} {:>12} {:>10}",
            "run", "mode", "iters", "valid", "average KPI", "best KPI"
        );
        for r in &runs {
            println!(
                "{:<32} {:<15} {:>6} {:>6} {:>12.6} {:>10.6}",
                r.dir.display(),
                r.summary.mode,
                r.summary.iterations_run,
                r.summary.valid_count,
                r.summary.average_score,
                r.summary.best_score
            );
        }
        if runs.len() > 1 {
            println!();
            println!(
                "{:<15} {:>5} {:>11} {:>17} {:>14}",
                "mode", "runs", "mean valid", "mean average KPI", "mean best KPI"
            );
            for m in &rows {
                println!(
                    "{:<15} {:>5} {:>11.3} {:>17.6} {:>14.6}",
                    m.mode, m.runs, m.valid, m.average, m.best
                );
            }
        }
    }
    if let Some(path) = csv {
        let mut text = String::from("mode,runs,mean_valid_count,mean_average_kpi,mean_best_kpi\n");
        for m in &rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                m.mode, m.runs, m.valid, m.average, m.best
            ));
        }
        write_file(&path, text)?;
    }
    Ok(())
}

fn synthetic_stage(kind: &str, file: &Path) -> CliResult<()> {
    let kind: StageKind =
        serde_json::from_value(serde_json::Value::String(kind.to_ascii_uppercase()))
            .map_err(|_| Failure::new(EXIT_CONFIG, anyhow!("unknown stage kind {kind:?}")))?;
    let source = fs::read_to_string(file).map_err(|e| io_failure(file, e))?;
    let o = synthetic::outcome(kind, &source);
    let doc = json!({
        "score": o.score,
        "passed": o.passed,
        "diagnostics": o.diagnostics,
        "tests_passed": o.tests_passed,
        "tests_total": o.tests_total,
    });
    println!("{doc}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { config, out } => analyze(&config, out),
        Command::Optimize {
            config,
            source,
            seed,
            mode,
            iterations,
            resume,
            out,
        } => optimize(
            &config,
            OptimizeArgs {
                source,
                seed,
                mode,
                iterations,
                resume,
                out,
            },
        ),
        Command::Report { runs, csv, json } => report(&runs, csv, json),
        Command::SyntheticStage { kind, file } => synthetic_stage(&kind, &file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
