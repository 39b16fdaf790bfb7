//! Stage runners: how a single evaluation stage is executed.
//!
//! The production runner spawns the stage's command with the candidate file
//! path and reads one JSON result object from standard output:
//!
//! ```json
//! {"score": 0.8, "passed": true, "diagnostics": "...",
//!  "tests_passed": 4, "tests_total": 5,
//!  "baseline_ms": 120.0, "candidate_ms": 80.0}
//! ```
//!
//! Only `score` or the `baseline_ms`/`candidate_ms` pair is required. When
//! `score` is absent the timing pair is normalized into a score. A nonzero
//! exit status, a timeout, or unparseable output yields score 0.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::Deserialize;
use wait_timeout::ChildExt;

use crate::cascade::{normalize_speedup, StageSpec};
use crate::graph::ms_to_duration;

/// Raw result of running one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub score: f64,
    pub passed: bool,
    pub diagnostics: String,
    pub tests_passed: Option<u32>,
    pub tests_total: Option<u32>,
    pub wall_time: Duration,
}

impl StageOutcome {
    pub fn pass(score: f64) -> Self {
        Self {
            score,
            passed: true,
            diagnostics: String::new(),
            tests_passed: None,
            tests_total: None,
            wall_time: Duration::ZERO,
        }
    }

    pub fn fail(diagnostics: impl Into<String>) -> Self {
        Self {
            score: 0.0,
            passed: false,
            diagnostics: diagnostics.into(),
            tests_passed: None,
            tests_total: None,
            wall_time: Duration::ZERO,
        }
    }

    pub fn with_tests(mut self, passed: u32, total: u32) -> Self {
        self.tests_passed = Some(passed);
        self.tests_total = Some(total);
        self
    }
}

pub trait StageRunner: Send + Sync {
    /// Runs `stage` against a candidate whose text is `source`, already
    /// written to `path`.
    fn run(&self, stage: &StageSpec, source: &str, path: &Path) -> StageOutcome;
}

#[derive(Debug, Deserialize)]
struct ProtocolResult {
    score: Option<f64>,
    passed: Option<bool>,
    #[serde(default)]
    diagnostics: String,
    tests_passed: Option<u32>,
    tests_total: Option<u32>,
    baseline_ms: Option<f64>,
    candidate_ms: Option<f64>,
}

/// Parses a stage command's standard output into an outcome.
pub fn parse_protocol_output(stdout: &str) -> Result<StageOutcome, String> {
    let trimmed = stdout.trim();
    let parsed: ProtocolResult = serde_json::from_str(trimmed)
        .or_else(|first| {
            // Tools often print progress before the result; use the last
            // line that looks like a JSON object.
            trimmed
                .lines()
                .rev()
                .find(|l| l.trim_start().starts_with('{'))
                .ok_or(first)
                .and_then(|l| serde_json::from_str(l.trim()))
        })
        .map_err(|e| format!("malformed stage output: {e}"))?;

    let score = match (parsed.score, parsed.baseline_ms, parsed.candidate_ms) {
        (Some(s), _, _) => s,
        (None, Some(b), Some(c)) => {
            let (b, c) = ms_to_duration(b)
                .zip(ms_to_duration(c))
                .ok_or_else(|| "malformed stage output: negative timing".to_string())?;
            normalize_speedup(b, c)
        }
        _ => return Err("malformed stage output: missing score".to_string()),
    };
    if !score.is_finite() {
        return Err("malformed stage output: non-finite score".to_string());
    }
    Ok(StageOutcome {
        score: score.clamp(0.0, 1.0),
        passed: parsed.passed.unwrap_or(true),
        diagnostics: parsed.diagnostics,
        tests_passed: parsed.tests_passed,
        tests_total: parsed.tests_total,
        wall_time: Duration::ZERO,
    })
}

/// Runs stage commands as child processes.
///
/// Arguments of the form `{name}` are substituted from the variable table;
/// `{candidate}` is always the candidate path.
#[derive(Debug, Clone, Default)]
pub struct CommandStageRunner {
    vars: BTreeMap<String, String>,
    working_dir: Option<std::path::PathBuf>,
}

impl CommandStageRunner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_var(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.vars.insert(name.into(), value.into());
        self
    }

    pub fn with_working_dir(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.working_dir = Some(dir.into());
        self
    }

    fn expand(&self, arg: &str, candidate: &Path) -> String {
        let mut out = arg.replace("{candidate}", &candidate.display().to_string());
        for (k, v) in &self.vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

impl StageRunner for CommandStageRunner {
    fn run(&self, stage: &StageSpec, _source: &str, path: &Path) -> StageOutcome {
        let start = Instant::now();
        let mut outcome = run_command(self, stage, path);
        outcome.wall_time = start.elapsed();
        outcome
    }
}

fn run_command(runner: &CommandStageRunner, stage: &StageSpec, path: &Path) -> StageOutcome {
    let Some((program, rest)) = stage.command.split_first() else {
        return StageOutcome::fail("crash: stage has no command");
    };
    let mut args: Vec<String> = rest.iter().map(|a| runner.expand(a, path)).collect();
    if !stage.command.iter().any(|a| a.contains("{candidate}")) {
        args.push(path.display().to_string());
    }
    let mut cmd = Command::new(runner.expand(program, path));
    cmd.args(&args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &runner.working_dir {
        cmd.current_dir(dir);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return StageOutcome::fail(format!("crash: cannot spawn {program}: {e}")),
    };

    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stdout.read_to_string(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });

    let status = match child.wait_timeout(stage.timeout) {
        Ok(Some(status)) => Ok(status),
        Ok(None) => {
            kill_tree(&mut child);
            Err(format!("timeout after {:.1}s", stage.timeout.as_secs_f64()))
        }
        Err(e) => {
            kill_tree(&mut child);
            Err(format!("crash: wait failed: {e}"))
        }
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();

    let mut outcome = match status {
        Err(reason) => StageOutcome::fail(reason),
        Ok(status) if !status.success() => {
            let mut o = StageOutcome::fail(format!("crash: {status}"));
            // still surface test counts from a well-formed result line
            if let Ok(parsed) = parse_protocol_output(&stdout) {
                o.tests_passed = parsed.tests_passed;
                o.tests_total = parsed.tests_total;
                if !parsed.diagnostics.is_empty() {
                    o.diagnostics.push('\n');
                    o.diagnostics.push_str(&parsed.diagnostics);
                }
            }
            o
        }
        Ok(_) => parse_protocol_output(&stdout).unwrap_or_else(StageOutcome::fail),
    };
    let stderr = stderr.trim();
    if !stderr.is_empty() {
        if !outcome.diagnostics.is_empty() {
            outcome.diagnostics.push('\n');
        }
        outcome.diagnostics.push_str(stderr);
    }
    outcome
}

/// Kills the stage and everything it spawned; grandchildren would otherwise
/// keep the output pipes open.
fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        if let Ok(pid) = i32::try_from(child.id()) {
            // SAFETY: plain syscall on the process group created at spawn.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// In-process runners for tests and offline fixtures.
pub mod testing {
    use super::*;
    use std::sync::Mutex;

    /// Returns a fixed outcome per stage name.
    #[derive(Debug, Clone, Default)]
    pub struct FixedRunner {
        default_score: Option<f64>,
        outcomes: BTreeMap<String, StageOutcome>,
    }

    impl FixedRunner {
        pub fn uniform(score: f64) -> Self {
            Self {
                default_score: Some(score),
                outcomes: BTreeMap::new(),
            }
        }

        pub fn scores(pairs: &[(&str, f64)]) -> Self {
            let mut r = Self::default();
            for (name, s) in pairs {
                r.outcomes.insert(name.to_string(), StageOutcome::pass(*s));
            }
            r
        }

        pub fn with_score(mut self, stage: &str, score: f64) -> Self {
            self.outcomes
                .insert(stage.to_string(), StageOutcome::pass(score));
            self
        }

        pub fn with_outcome(mut self, stage: &str, outcome: StageOutcome) -> Self {
            self.outcomes.insert(stage.to_string(), outcome);
            self
        }

        pub fn failing(mut self, stage: &str, diagnostics: &str) -> Self {
            self.outcomes
                .insert(stage.to_string(), StageOutcome::fail(diagnostics));
            self
        }
    }

    impl StageRunner for FixedRunner {
        fn run(&self, stage: &StageSpec, _source: &str, _path: &Path) -> StageOutcome {
            match (self.outcomes.get(&stage.name), self.default_score) {
                (Some(o), _) => o.clone(),
                (None, Some(s)) => StageOutcome::pass(s),
                (None, None) => StageOutcome::fail(format!("no fixture for {}", stage.name)),
            }
        }
    }

    /// Wraps a runner and records the name of every stage executed.
    pub struct RecordingRunner<R> {
        inner: R,
        calls: Mutex<Vec<String>>,
    }

    impl<R: StageRunner> RecordingRunner<R> {
        pub fn new(inner: R) -> Self {
            Self {
                inner,
                calls: Mutex::new(Vec::new()),
            }
        }

        pub fn calls(&self) -> Vec<String> {
            self.calls.lock().unwrap().clone()
        }
    }

    impl<R: StageRunner> StageRunner for RecordingRunner<R> {
        fn run(&self, stage: &StageSpec, source: &str, path: &Path) -> StageOutcome {
            self.calls.lock().unwrap().push(stage.name.clone());
            self.inner.run(stage, source, path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::StageKind;

    fn sh(script: &str) -> StageSpec {
        StageSpec::new(
            "s",
            StageKind::Build,
            vec![
                "sh".into(),
                "-c".into(),
                script.into(),
                "sh".into(),
                "{candidate}".into(),
            ],
        )
    }

    fn run(spec: &StageSpec) -> StageOutcome {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "body").unwrap();
        CommandStageRunner::new().run(spec, "body", &path)
    }

    #[test]
    fn protocol_json_parsed() {
        let o = run(&sh(
            r#"echo '{"score":0.75,"passed":true,"diagnostics":"ok"}'"#,
        ));
        assert_eq!(o.score, 0.75);
        assert!(o.passed);
        assert_eq!(o.diagnostics, "ok");
    }

    #[test]
    fn candidate_path_substituted() {
        let o = run(&sh(
            r#"c=$(cat "$1"); echo "{\"score\":1,\"diagnostics\":\"$c\"}""#,
        ));
        assert_eq!(o.diagnostics, "body");
    }

    #[test]
    fn nonzero_exit_scores_zero() {
        let o = run(&sh(r#"echo '{"score":0.9}'; echo boom >&2; exit 3"#));
        assert_eq!(o.score, 0.0);
        assert!(!o.passed);
        assert!(o.diagnostics.contains("crash"));
        assert!(o.diagnostics.contains("boom"));
    }

    #[test]
    fn timeout_kills_stage() {
        let spec = sh("sleep 5").with_timeout(Duration::from_millis(200));
        let start = Instant::now();
        let o = run(&spec);
        assert!(start.elapsed() < Duration::from_secs(4));
        assert!(!o.passed);
        assert!(o.diagnostics.starts_with("timeout"));
    }

    #[test]
    fn missing_binary_is_crash() {
        let spec = StageSpec::new("s", StageKind::Build, vec!["/nonexistent/tool".into()]);
        let o = run(&spec);
        assert!(o.diagnostics.starts_with("crash"));
    }

    #[test]
    fn timings_normalized() {
        let o = parse_protocol_output(r#"{"baseline_ms": 100, "candidate_ms": 80}"#).unwrap();
        assert!((o.score - 0.625).abs() < 1e-12);
    }

    #[test]
    fn progress_lines_before_result() {
        let o = parse_protocol_output(
            "compiling...\n{\"score\": 0.5, \"tests_passed\": 1, \"tests_total\": 2}\n",
        )
        .unwrap();
        assert_eq!(o.score, 0.5);
        assert_eq!(o.tests_passed, Some(1));
    }

    #[test]
    fn garbage_output_is_error() {
        assert!(parse_protocol_output("hello").is_err());
        assert!(parse_protocol_output("{}").is_err());
    }
}
