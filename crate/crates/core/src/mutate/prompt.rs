//! Prompt templates with named `{{slot}}` placeholders and the optimization
//! context that fills them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComponentId, GraphError, WeightVector, WeightedComponentGraph};

pub const OPTIMIZATION_SLOTS: [&str; 6] = [
    "goal",
    "runtime_profile",
    "writable_code",
    "read_only_context",
    "evaluation_feedback",
    "constraints",
];

pub const REPAIR_SLOTS: [&str; 2] = ["source", "diagnostics"];

pub const DEFAULT_FEEDBACK_CAP: usize = 5;
const DIAGNOSTICS_LIMIT: usize = 400;

pub const DEFAULT_OPTIMIZATION_TEMPLATE: &str = "\
You are editing a single writable region inside a larger code base.

Goal:
{{goal}}

Runtime profile:
{{runtime_profile}}

Writable code:
{{writable_code}}

Read-only context:
{{read_only_context}}

Evaluation feedback:
{{evaluation_feedback}}

Constraints:
{{constraints}}
";

pub const DEFAULT_REPAIR_TEMPLATE: &str = "\
Repair the candidate below so that it builds and every unit test passes.
Keep the intended optimization; change only what the diagnostics point at.

Candidate region:
{{source}}

Diagnostics:
{{diagnostics}}

Reply with SEARCH/REPLACE blocks against the candidate region.
";

const GOAL_DIFF: &str = "\
- Reduce the runtime cost of the writable region; observable behavior must not change.
- Keep public signatures, thrown exceptions and existing tests as they are.
- Answer with SEARCH/REPLACE blocks that edit only the writable region.";

const GOAL_REWRITE: &str = "\
- Reduce the runtime cost of the writable region; observable behavior must not change.
- Keep public signatures, thrown exceptions and existing tests as they are.
- Answer with the complete new writable region in a single fenced code block.";

const BASE_CONSTRAINTS: &str = "\
- Never edit the read-only context.
- Favor small edits that stay easy to maintain.
- Do not pull in new dependencies.
- Give a one-line explanation first, then the edit.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template is missing slot {{{{{0}}}}}")]
    MissingSlot(String),
    #[error("template uses unknown slot {{{{{0}}}}}")]
    UnknownSlot(String),
    #[error("unterminated slot starting at byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// A parsed template. Rendering is a single pass, so slot values that
/// happen to contain `{{...}}` are inserted literally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses `text`, requiring exactly the slot names in `slots` (each at
    /// least once, no others).
    pub fn parse(text: &str, slots: &[&str]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut rest = text;
        let mut consumed = 0;
        while let Some(open) = rest.find("{{") {
            let close = rest[open..]
                .find("}}")
                .ok_or(TemplateError::Unterminated(consumed + open))?;
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let name = rest[open + 2..open + close].trim().to_string();
            if !slots.contains(&name.as_str()) {
                return Err(TemplateError::UnknownSlot(name));
            }
            segments.push(Segment::Slot(name));
            consumed += open + close + 2;
            rest = &rest[open + close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        let used: BTreeSet<&str> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Text(_) => None,
            })
            .collect();
        if let Some(missing) = slots.iter().find(|s| !used.contains(*s)) {
            return Err(TemplateError::MissingSlot(missing.to_string()));
        }
        Ok(Self { segments })
    }

    pub fn optimization_default() -> Self {
        Self::parse(DEFAULT_OPTIMIZATION_TEMPLATE, &OPTIMIZATION_SLOTS).expect("valid default")
    }

    pub fn repair_default() -> Self {
        Self::parse(DEFAULT_REPAIR_TEMPLATE, &REPAIR_SLOTS).expect("valid default")
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => {
                    out.push_str(values.get(name.as_str()).map_or("", String::as_str))
                }
            }
        }
        out
    }
}

/// One remembered outcome from an earlier iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub iteration: u64,
    pub score: f64,
    /// Set for rejected candidates: the stage that rejected them.
    pub rejected_at: Option<String>,
    /// Change description for accepted candidates, diagnostics otherwise.
    pub text: String,
}

/// A top archive entry shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspiration {
    pub score: f64,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationContext {
    pub target_name: ComponentId,
    pub writable_code: String,
    pub frozen_context: String,
    pub profile: WeightVector,
    pub annotations: BTreeMap<String, String>,
    pub feedback: Vec<FeedbackEntry>,
    pub inspirations: Vec<Inspiration>,
    pub constraints: String,
}

impl OptimizationContext {
    pub fn new(target_name: ComponentId, writable_code: impl Into<String>) -> Self {
        Self {
            target_name,
            writable_code: writable_code.into(),
            frozen_context: String::new(),
            profile: WeightVector::default(),
            annotations: BTreeMap::new(),
            feedback: Vec::new(),
            inspirations: Vec::new(),
            constraints: String::new(),
        }
    }

    /// Context for `target` with its profile weight, annotations and a
    /// description of its frozen 1-hop neighbors.
    pub fn from_graph(
        graph: &WeightedComponentGraph,
        target: &ComponentId,
        writable_code: impl Into<String>,
    ) -> Result<Self, GraphError> {
        let sub = graph.prune_context(target)?;
        let mut ctx = Self::new(target.clone(), writable_code);
        ctx.profile = graph.weight(target).cloned().unwrap_or_default();
        ctx.annotations = graph.annotations(target).cloned().unwrap_or_default();
        let lines: Vec<String> = sub
            .frozen
            .iter()
            .map(|n| {
                let role = match (graph.has_edge(n, target), graph.has_edge(target, n)) {
                    (true, true) => "caller, callee",
                    (true, false) => "caller",
                    _ => "callee",
                };
                let w = sub.weights.get(n).cloned().unwrap_or_default();
                format!(
                    "- {n} ({role}, read-only): {} ms, {} calls",
                    format_ms(w.exec_time_ms()),
                    w.call_count
                )
            })
            .collect();
        ctx.frozen_context = lines.join("\n");
        Ok(ctx)
    }

    /// The same context with profile, read-only context, feedback and
    /// inspirations removed.
    pub fn without_enrichment(&self) -> Self {
        Self {
            target_name: self.target_name.clone(),
            writable_code: self.writable_code.clone(),
            frozen_context: String::new(),
            profile: WeightVector::default(),
            annotations: BTreeMap::new(),
            feedback: Vec::new(),
            inspirations: Vec::new(),
            constraints: self.constraints.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptOptions {
    pub diff_mode: bool,
    pub feedback_cap: usize,
    /// When false the profile and read-only sections render as `none`.
    pub enriched: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            diff_mode: true,
            feedback_cap: DEFAULT_FEEDBACK_CAP,
            enriched: true,
        }
    }
}

fn format_ms(ms: f64) -> String {
    let mut s = format!("{ms:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

fn clip(text: &str, limit: usize) -> String {
    let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= limit {
        one_line
    } else {
        let mut s: String = one_line.chars().take(limit).collect();
        s.push_str("...");
        s
    }
}

pub fn render_profile(ctx: &OptimizationContext) -> String {
    let notes = if ctx.annotations.is_empty() {
        "none".to_string()
    } else {
        ctx.annotations
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "- Target: {}\n- Cumulative time: {} ms\n- Call count: {}\n- Allocation/CPU notes: {}",
        ctx.target_name,
        format_ms(ctx.profile.exec_time_ms()),
        ctx.profile.call_count,
        notes
    )
}

/// Keeps the `cap` most recent entries, then lists them best score first
/// (ties: more recent first).
pub fn render_feedback(
    entries: &[FeedbackEntry],
    inspirations: &[Inspiration],
    cap: usize,
) -> String {
    let mut recent: Vec<&FeedbackEntry> = entries.iter().collect();
    recent.sort_by_key(|e| std::cmp::Reverse(e.iteration));
    recent.truncate(cap);
    recent.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.iteration.cmp(&a.iteration))
    });

    let mut lines = Vec::new();
    for e in recent {
        match &e.rejected_at {
            None => lines.push(format!(
                "- iteration {}: score {:.4}; {}",
                e.iteration,
                e.score,
                clip(&e.text, DIAGNOSTICS_LIMIT)
            )),
            Some(stage) => lines.push(format!(
                "- iteration {}: rejected at {stage}, score {:.4}; {}",
                e.iteration,
                e.score,
                clip(&e.text, DIAGNOSTICS_LIMIT)
            )),
        }
    }
    if !inspirations.is_empty() {
        lines.push("Top variants so far:".to_string());
        for i in inspirations {
            lines.push(format!(
                "- score {:.4}; {}",
                i.score,
                clip(&i.summary, DIAGNOSTICS_LIMIT)
            ));
        }
    }
    if lines.is_empty() {
        "none".to_string()
    } else {
        lines.join("\n")
    }
}

pub fn build_prompt(
    ctx: &OptimizationContext,
    template: &PromptTemplate,
    options: &PromptOptions,
) -> String {
    let none = || "none".to_string();
    let mut constraints = BASE_CONSTRAINTS.to_string();
    if !ctx.constraints.trim().is_empty() {
        constraints.push('\n');
        constraints.push_str(ctx.constraints.trim_end());
    }
    let mut values = BTreeMap::new();
    values.insert(
        "goal",
        if options.diff_mode {
            GOAL_DIFF
        } else {
            GOAL_REWRITE
        }
        .to_string(),
    );
    values.insert(
        "runtime_profile",
        if options.enriched {
            render_profile(ctx)
        } else {
            none()
        },
    );
    values.insert("writable_code", ctx.writable_code.clone());
    values.insert(
        "read_only_context",
        if options.enriched && !ctx.frozen_context.trim().is_empty() {
            ctx.frozen_context.clone()
        } else {
            none()
        },
    );
    values.insert(
        "evaluation_feedback",
        if options.enriched {
            render_feedback(&ctx.feedback, &ctx.inspirations, options.feedback_cap)
        } else {
            none()
        },
    );
    values.insert("constraints", constraints);
    template.render(&values)
}

pub fn build_repair_prompt(template: &PromptTemplate, source: &str, diagnostics: &str) -> String {
    let mut values = BTreeMap::new();
    values.insert("source", source.to_string());
    values.insert(
        "diagnostics",
        if diagnostics.trim().is_empty() {
            "none".to_string()
        } else {
            diagnostics.to_string()
        },
    );
    template.render(&values)
}
