//! UCB-guided tree search over program variants.
//!
//! Nodes live in an arena indexed by id. Unvisited nodes are rolled out,
//! visited ones are expanded into `expansion_k` children of which one random
//! child is rolled out immediately. Rewards propagate to the root.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{is_eligible, Cascade, EvaluationReport, StageKind};
use crate::mutate::{
    apply_mutation, build_prompt, propose, summarize, EvolveBlock, FeedbackEntry, MutationProvider,
    OptimizationContext, PromptOptions, PromptTemplate,
};
use crate::stage::StageRunner;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub exploration_c: f64,
    pub exploitation_probability: f64,
    pub expansion_k: usize,
    pub max_iterations: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            exploration_c: 1.0,
            exploitation_probability: 0.5,
            expansion_k: 3,
            max_iterations: 20,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MctsError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("ucb input out of range: {0}")]
    UcbInput(String),
    #[error("node {0} has not been visited; roll it out instead of expanding")]
    Unvisited(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

impl MctsConfig {
    pub fn validate(&self) -> Result<(), MctsError> {
        if self.exploration_c.is_nan() || self.exploration_c < 0.0 {
            return Err(MctsError::Config("exploration_c must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.exploitation_probability) {
            return Err(MctsError::Config(
                "exploitation_probability must lie in [0, 1]".into(),
            ));
        }
        if self.expansion_k < 1 {
            return Err(MctsError::Config("expansion_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTreeNode {
    pub id: NodeId,
    #[serde(skip_serializing)]
    #[serde(default)]
    pub program: String,
    pub cumulative_reward: f64,
    pub visit_count: u64,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Reward from this node's own rollout, if it had one.
    pub reward: Option<f64>,
    pub eligible: bool,
    pub expansion_failed: bool,
    pub change_summary: String,
    #[serde(skip)]
    pub report: Option<EvaluationReport>,
}

impl SearchTreeNode {
    fn new(id: NodeId, program: String, parent: Option<NodeId>, summary: String) -> Self {
        Self {
            id,
            program,
            cumulative_reward: 0.0,
            visit_count: 0,
            parent,
            children: Vec::new(),
            reward: None,
            eligible: false,
            expansion_failed: false,
            change_summary: summary,
            report: None,
        }
    }

    pub fn mean_reward(&self) -> Option<f64> {
        (self.visit_count > 0).then(|| self.cumulative_reward / self.visit_count as f64)
    }
}

/// `V/N + c·sqrt(ln(N_parent)/N)`, or `+∞` for an unvisited node.
pub fn ucb(v: f64, n: u64, parent_visits: u64, c: f64) -> Result<f64, MctsError> {
    if v < 0.0 || v.is_nan() {
        return Err(MctsError::UcbInput(format!("cumulative reward {v}")));
    }
    if c < 0.0 || c.is_nan() {
        return Err(MctsError::UcbInput(format!("exploration constant {c}")));
    }
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    if parent_visits == 0 {
        return Err(MctsError::UcbInput("parent visit count 0".into()));
    }
    let n = n as f64;
    Ok(v / n + c * ((parent_visits as f64).ln() / n).sqrt())
}

pub fn ucb_score(node: &SearchTreeNode, parent_visits: u64, c: f64) -> Result<f64, MctsError> {
    ucb(node.cumulative_reward, node.visit_count, parent_visits, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub node: NodeId,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    nodes: Vec<SearchTreeNode>,
    rollout_log: Vec<Rollout>,
}

impl SearchTree {
    pub fn new(root_program: impl Into<String>) -> Self {
        Self {
            nodes: vec![SearchTreeNode::new(
                0,
                root_program.into(),
                None,
                "root".into(),
            )],
            rollout_log: Vec::new(),
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn root(&self) -> &SearchTreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> Option<&SearchTreeNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &[SearchTreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rollout_log(&self) -> &[Rollout] {
        &self.rollout_log
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        program: impl Into<String>,
        summary: impl Into<String>,
    ) -> Result<NodeId, MctsError> {
        if parent >= self.nodes.len() {
            return Err(MctsError::UnknownNode(parent));
        }
        let id = self.nodes.len();
        self.nodes.push(SearchTreeNode::new(
            id,
            program.into(),
            Some(parent),
            summary.into(),
        ));
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    pub fn mark_expansion_failed(&mut self, id: NodeId) {
        self.nodes[id].expansion_failed = true;
    }

    /// Node ids from `id` up to and including the root.
    pub fn path_to_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Adds `reward` and one visit to `id` and all its ancestors.
    pub fn backpropagate(&mut self, id: NodeId, reward: f64) -> Result<(), MctsError> {
        if id >= self.nodes.len() {
            return Err(MctsError::UnknownNode(id));
        }
        for n in self.path_to_root(id) {
            self.nodes[n].cumulative_reward += reward;
            self.nodes[n].visit_count += 1;
        }
        self.rollout_log.push(Rollout { node: id, reward });
        Ok(())
    }

    /// A node is dead when its expansion failed or every child is dead.
    fn dead(&self, id: NodeId) -> bool {
        let n = &self.nodes[id];
        n.expansion_failed || (!n.children.is_empty() && n.children.iter().all(|&c| self.dead(c)))
    }

    /// Global best mean reward among visited live nodes, ties to lowest id.
    pub fn best_mean(&self) -> Option<NodeId> {
        let mut best: Option<(NodeId, f64)> = None;
        for n in &self.nodes {
            if let Some(m) = n.mean_reward() {
                if self.dead(n.id) {
                    continue;
                }
                if best.is_none_or(|(_, b)| m > b) {
                    best = Some((n.id, m));
                }
            }
        }
        best.map(|(id, _)| id)
    }

    /// Descends from the root taking the max-UCB live child until reaching
    /// an unvisited node or a leaf.
    pub fn descend(&self, c: f64) -> Option<NodeId> {
        if self.dead(Self::ROOT) {
            return None;
        }
        let mut cur = Self::ROOT;
        loop {
            let node = &self.nodes[cur];
            if node.visit_count == 0 || node.children.is_empty() {
                return Some(cur);
            }
            let mut best: Option<(NodeId, f64)> = None;
            for &child in &node.children {
                if self.dead(child) {
                    continue;
                }
                let score = ucb_score(&self.nodes[child], node.visit_count, c)
                    .expect("tree rewards are non-negative");
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((child, score));
                }
            }
            cur = best.expect("live node has a live child").0;
        }
    }

    /// Exploitation with probability `exploitation_probability`, otherwise
    /// UCB descent. `None` when no live node remains.
    pub fn select_node<R: Rng + ?Sized>(&self, rng: &mut R, config: &MctsConfig) -> Option<NodeId> {
        let r: f64 = rng.gen();
        if r < config.exploitation_probability {
            if let Some(id) = self.best_mean() {
                return Some(id);
            }
        }
        self.descend(config.exploration_c)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            nodes: &'a [SearchTreeNode],
            rollouts: &'a [Rollout],
        }
        let mut s = serde_json::to_string_pretty(&Dump {
            nodes: &self.nodes,
            rollouts: &self.rollout_log,
        })
        .expect("tree serializes");
        s.push('\n');
        s
    }
}

/// What a search optimizes: how to prompt for children and how to score.
pub trait SearchProblem {
    fn expansion_prompt(&self, tree: &SearchTree, node: NodeId) -> String;
    fn evaluate(&self, program: &str) -> EvaluationReport;
    fn reward(&self, report: &EvaluationReport) -> f64;
    fn diff_mode(&self) -> bool {
        true
    }
}

/// Combined score when every gate passed, else 0.
pub fn optimization_reward(report: &EvaluationReport) -> f64 {
    if is_eligible(report) {
        report.combined_score
    } else {
        0.0
    }
}

/// Unit-test pass rate, or 0 when the unit-test stage never ran.
pub fn pass_rate_reward(report: &EvaluationReport) -> f64 {
    report
        .stage_results
        .iter()
        .find(|r| r.kind == StageKind::UnitTest)
        .map_or(0.0, |r| {
            r.pass_rate().unwrap_or(if r.passed { 1.0 } else { 0.0 })
        })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpandOutcome {
    pub children: Vec<NodeId>,
    pub failures: Vec<String>,
}

/// Requests `k` proposals for `node` and adds a child for each one that
/// applies cleanly.
pub fn expand(
    tree: &mut SearchTree,
    node: NodeId,
    provider: &mut dyn MutationProvider,
    k: usize,
    problem: &dyn SearchProblem,
) -> Result<ExpandOutcome, MctsError> {
    let n = tree.node(node).ok_or(MctsError::UnknownNode(node))?;
    if n.visit_count < 1 {
        return Err(MctsError::Unvisited(node));
    }
    let program = n.program.clone();
    let prompt = problem.expansion_prompt(tree, node);
    let mut out = ExpandOutcome::default();
    let block = match EvolveBlock::parse(&program) {
        Ok(b) => b,
        Err(e) => {
            out.failures.push(e.to_string());
            tree.mark_expansion_failed(node);
            return Ok(out);
        }
    };
    for _ in 0..k {
        let result = propose(provider, &prompt, problem.diff_mode())
            .map_err(|e| e.to_string())
            .and_then(|resp| {
                apply_mutation(&block, &resp)
                    .map(|src| (src, summarize(&resp)))
                    .map_err(|e| e.to_string())
            });
        match result {
            Ok((src, summary)) => out.children.push(tree.add_child(node, src, summary)?),
            Err(e) => out.failures.push(e),
        }
    }
    if out.children.is_empty() {
        tree.mark_expansion_failed(node);
    }
    Ok(out)
}

/// Evaluates `node`, stores the report on it, and returns its reward.
pub fn rollout(tree: &mut SearchTree, node: NodeId, problem: &dyn SearchProblem) -> f64 {
    let report = problem.evaluate(&tree.nodes[node].program);
    let reward = problem.reward(&report).clamp(0.0, 1.0);
    let n = &mut tree.nodes[node];
    n.eligible = is_eligible(&report);
    n.reward = Some(reward);
    n.report = Some(report);
    reward
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub tree: SearchTree,
    pub iterations: u64,
    /// First node whose reward reached the stop threshold.
    pub reached: Option<NodeId>,
    /// Node with the highest own rollout reward, ties to lowest id.
    pub best: Option<NodeId>,
    pub expansion_failures: Vec<String>,
}

/// Runs up to `config.max_iterations` select/expand/rollout/backpropagate
/// rounds. Stops early once a rollout reward reaches `stop_at` or no live
/// node remains.
pub fn search<R: Rng + ?Sized>(
    root_program: &str,
    config: &MctsConfig,
    problem: &dyn SearchProblem,
    provider: &mut dyn MutationProvider,
    rng: &mut R,
    stop_at: Option<f64>,
) -> Result<SearchOutcome, MctsError> {
    config.validate()?;
    let mut tree = SearchTree::new(root_program);
    let mut reached = None;
    let mut failures = Vec::new();
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let Some(selected) = tree.select_node(rng, config) else {
            break;
        };
        iterations += 1;
        let target = if tree.nodes[selected].visit_count < 1 {
            selected
        } else {
            let outcome = expand(&mut tree, selected, provider, config.expansion_k, problem)?;
            failures.extend(outcome.failures);
            if outcome.children.is_empty() {
                continue;
            }
            outcome.children[rng.gen_range(0..outcome.children.len())]
        };
        let reward = rollout(&mut tree, target, problem);
        tree.backpropagate(target, reward)?;
        if stop_at.is_some_and(|t| reward >= t) {
            reached = Some(target);
            break;
        }
    }
    let best = tree
        .nodes
        .iter()
        .filter_map(|n| n.reward.map(|r| (n.id, r)))
        .fold(None, |acc: Option<(NodeId, f64)>, (id, r)| match acc {
            Some((_, b)) if b >= r => acc,
            _ => Some((id, r)),
        })
        .map(|(id, _)| id);
    Ok(SearchOutcome {
        tree,
        iterations,
        reached,
        best,
        expansion_failures: failures,
    })
}

/// Search problem for program optimization through the full cascade.
pub struct OptimizationProblem<'a> {
    pub cascade: &'a Cascade,
    pub runner: &'a dyn StageRunner,
    pub context: OptimizationContext,
    pub template: PromptTemplate,
    pub options: PromptOptions,
}

impl SearchProblem for OptimizationProblem<'_> {
    fn expansion_prompt(&self, tree: &SearchTree, node: NodeId) -> String {
        let n = &tree.nodes()[node];
        let mut ctx = self.context.clone();
        if let Ok(block) = EvolveBlock::parse(&n.program) {
            ctx.writable_code = block.body;
        }
        if let Some(report) = &n.report {
            ctx.feedback.push(FeedbackEntry {
                iteration: node as u64,
                score: report.combined_score,
                rejected_at: report.rejected_at.clone(),
                text: if is_eligible(report) {
                    n.change_summary.clone()
                } else {
                    report.failure_diagnostics()
                },
            });
        }
        build_prompt(&ctx, &self.template, &self.options)
    }

    fn evaluate(&self, program: &str) -> EvaluationReport {
        self.cascade.evaluate(program, self.runner)
    }

    fn reward(&self, report: &EvaluationReport) -> f64 {
        optimization_reward(report)
    }

    fn diff_mode(&self) -> bool {
        self.options.diff_mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ucb_reference_value() {
        let v = ucb(2.0, 2, 4, 1.0).unwrap();
        let expect = 1.0 + (4f64.ln() / 2.0).sqrt();
        assert!((v - expect).abs() <= 1e-12 * expect);
        assert!((v - 1.8326).abs() < 1e-4);
    }

    #[test]
    fn ucb_edge_cases() {
        assert_eq!(ucb(1.5, 3, 10, 0.0).unwrap(), 0.5);
        assert_eq!(ucb(0.0, 0, 1, 1.0).unwrap(), f64::INFINITY);
        assert!(ucb(-1.0, 1, 1, 1.0).is_err());
        assert!(ucb(1.0, 1, 1, -0.5).is_err());
        assert!(ucb(1.0, 1, 0, 1.0).is_err());
    }

    #[test]
    fn single_node_selects_root() {
        let mut tree = SearchTree::new("p");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let explore = MctsConfig {
            exploitation_probability: 0.0,
            ..MctsConfig::default()
        };
        let exploit = MctsConfig {
            exploitation_probability: 1.0,
            ..MctsConfig::default()
        };
        assert_eq!(tree.select_node(&mut rng, &explore), Some(0));
        assert_eq!(tree.select_node(&mut rng, &exploit), Some(0));
        tree.backpropagate(0, 0.3).unwrap();
        assert_eq!(tree.select_node(&mut rng, &explore), Some(0));
        assert_eq!(tree.select_node(&mut rng, &exploit), Some(0));
    }

    #[test]
    fn exploitation_picks_best_mean() {
        let mut tree = SearchTree::new("p");
        let a = tree.add_child(0, "a", "").unwrap();
        let b = tree.add_child(0, "b", "").unwrap();
        tree.backpropagate(a, 0.9).unwrap();
        tree.backpropagate(b, 0.5).unwrap();
        assert_eq!(tree.best_mean(), Some(a));
        let config = MctsConfig {
            exploitation_probability: 1.0,
            ..MctsConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(tree.select_node(&mut rng, &config), Some(a));
    }

    #[test]
    fn unvisited_child_selected_first() {
        let mut tree = SearchTree::new("p");
        let a = tree.add_child(0, "a", "").unwrap();
        let b = tree.add_child(0, "b", "").unwrap();
        tree.backpropagate(a, 1.0).unwrap();
        assert_eq!(tree.descend(1.0), Some(b));
    }

    #[test]
    fn backpropagate_chain() {
        let mut tree = SearchTree::new("r");
        tree.backpropagate(0, 0.5).unwrap();
        assert_eq!(
            (tree.root().cumulative_reward, tree.root().visit_count),
            (0.5, 1)
        );
        let a = tree.add_child(0, "a", "").unwrap();
        let b = tree.add_child(a, "b", "").unwrap();
        let c = tree.add_child(b, "c", "").unwrap();
        tree.backpropagate(c, 0.7).unwrap();
        for id in [a, b, c] {
            assert_eq!(tree.node(id).unwrap().visit_count, 1);
            assert_eq!(tree.node(id).unwrap().cumulative_reward, 0.7);
        }
        assert_eq!(tree.root().visit_count, 2);
    }

    #[test]
    fn dead_subtrees_are_skipped() {
        let mut tree = SearchTree::new("r");
        tree.backpropagate(0, 0.5).unwrap();
        let a = tree.add_child(0, "a", "").unwrap();
        let b = tree.add_child(0, "b", "").unwrap();
        tree.backpropagate(a, 0.9).unwrap();
        tree.backpropagate(b, 0.1).unwrap();
        tree.mark_expansion_failed(a);
        assert_eq!(tree.descend(1.0), Some(b));
        tree.mark_expansion_failed(b);
        assert_eq!(tree.descend(1.0), None);
        assert_eq!(tree.best_mean(), None);
    }

    #[test]
    fn pass_rate_reward_reads_unit_stage() {
        use crate::cascade::StageResult;
        use std::time::Duration;
        let stage = |kind, passed, tp: Option<u32>| StageResult {
            name: format!("{kind:?}"),
            kind,
            score: 1.0,
            passed,
            diagnostics: String::new(),
            tests_passed: tp,
            tests_total: tp.map(|_| 4),
            wall_time: Duration::ZERO,
        };
        let mut r = EvaluationReport {
            stage_results: vec![
                stage(StageKind::Build, true, None),
                stage(StageKind::UnitTest, false, Some(2)),
            ],
            combined_score: 0.5,
            passed_all_gates: false,
            rejected_at: Some("UnitTest".into()),
        };
        assert_eq!(pass_rate_reward(&r), 0.5);
        r.stage_results.truncate(1);
        assert_eq!(pass_rate_reward(&r), 0.0);
    }
}
