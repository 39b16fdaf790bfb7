//! Weighted component graphs built from a static call graph and runtime
//! profile samples.
//!
//! The graph is the input to hotspot selection: every component carries the
//! cumulative execution time and call count observed in the profile, targets
//! are picked by a time-or-frequency threshold, and each target is paired with
//! a pruned context made of its direct callers and callees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("unknown component {0}")]
    UnknownComponent(ComponentId),
    #[error("component name must not be empty")]
    EmptyName,
    #[error("duplicate component {0}")]
    DuplicateComponent(ComponentId),
    #[error("{file}: record {index}: {reason}")]
    InvalidRecord {
        file: String,
        index: usize,
        reason: String,
    },
    #[error("{file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("{file}: {reason}")]
    Io { file: String, reason: String },
}

/// Fully qualified component name, e.g. `pkg.Class.method`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(String);

impl ComponentId {
    pub fn new(name: impl Into<String>) -> Result<Self, GraphError> {
        let name = name.into();
        if name.is_empty() {
            return Err(GraphError::EmptyName);
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Cumulative execution time and call count of one component.
///
/// Time is kept as a [`Duration`] so that summing profile samples is exact
/// and independent of the order the samples arrive in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WeightVector {
    pub exec_time: Duration,
    pub call_count: u64,
}

impl WeightVector {
    pub fn new(exec_time: Duration, call_count: u64) -> Self {
        Self {
            exec_time,
            call_count,
        }
    }

    pub fn exec_time_ms(&self) -> f64 {
        duration_to_ms(self.exec_time)
    }
}

pub fn duration_to_ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

/// Converts a non-negative, finite millisecond value into a [`Duration`].
pub fn ms_to_duration(ms: f64) -> Option<Duration> {
    if !ms.is_finite() || ms < 0.0 {
        return None;
    }
    Duration::try_from_secs_f64(ms / 1000.0).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionThresholds {
    pub tau_time: Duration,
    pub tau_freq: u64,
}

impl SelectionThresholds {
    pub fn new(tau_time: Duration, tau_freq: u64) -> Self {
        Self { tau_time, tau_freq }
    }

    pub fn admits(&self, w: &WeightVector) -> bool {
        w.exec_time >= self.tau_time || w.call_count >= self.tau_freq
    }
}

/// One sample of runtime cost for a component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub component: ComponentId,
    pub exec_time: Duration,
    pub call_count: u64,
    pub annotations: BTreeMap<String, String>,
}

impl ProfileEntry {
    pub fn new(component: ComponentId, exec_time: Duration, call_count: u64) -> Self {
        Self {
            component,
            exec_time,
            call_count,
            annotations: BTreeMap::new(),
        }
    }
}

/// Non-fatal issue raised while merging a profile into a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileWarning {
    UnknownComponent(ComponentId),
}

impl fmt::Display for ProfileWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileWarning::UnknownComponent(c) => {
                write!(f, "profile entry for unknown component {c} skipped")
            }
        }
    }
}

/// Directed component graph with per-node runtime weights.
///
/// Every node has exactly one weight entry; nodes absent from the profile
/// keep the zero vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedComponentGraph {
    weights: BTreeMap<ComponentId, WeightVector>,
    edges: BTreeSet<(ComponentId, ComponentId)>,
    annotations: BTreeMap<ComponentId, BTreeMap<String, String>>,
}

impl WeightedComponentGraph {
    /// Builds the unweighted graph. Every edge endpoint must be listed in
    /// `components`.
    pub fn build(
        components: impl IntoIterator<Item = ComponentId>,
        call_edges: impl IntoIterator<Item = (ComponentId, ComponentId)>,
    ) -> Result<Self, GraphError> {
        let mut weights = BTreeMap::new();
        for c in components {
            if weights.insert(c.clone(), WeightVector::default()).is_some() {
                return Err(GraphError::DuplicateComponent(c));
            }
        }
        let mut edges = BTreeSet::new();
        for (from, to) in call_edges {
            for end in [&from, &to] {
                if !weights.contains_key(end) {
                    return Err(GraphError::UnknownComponent(end.clone()));
                }
            }
            edges.insert((from, to));
        }
        Ok(Self {
            weights,
            edges,
            annotations: BTreeMap::new(),
        })
    }

    /// Sums profile entries into node weights. Entries for components that
    /// are not in the graph are skipped and reported as warnings.
    pub fn enrich_with_profile<'a>(
        mut self,
        profile: impl IntoIterator<Item = &'a ProfileEntry>,
    ) -> (Self, Vec<ProfileWarning>) {
        let mut warnings = Vec::new();
        for entry in profile {
            let Some(w) = self.weights.get_mut(&entry.component) else {
                warnings.push(ProfileWarning::UnknownComponent(entry.component.clone()));
                continue;
            };
            w.exec_time = w.exec_time.saturating_add(entry.exec_time);
            w.call_count = w.call_count.saturating_add(entry.call_count);
            if !entry.annotations.is_empty() {
                let notes = self.annotations.entry(entry.component.clone()).or_default();
                for (k, v) in &entry.annotations {
                    notes.insert(k.clone(), v.clone());
                }
            }
        }
        (self, warnings)
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ComponentId> {
        self.weights.keys()
    }

    pub fn edges(&self) -> impl Iterator<Item = &(ComponentId, ComponentId)> {
        self.edges.iter()
    }

    pub fn contains(&self, id: &ComponentId) -> bool {
        self.weights.contains_key(id)
    }

    pub fn has_edge(&self, from: &ComponentId, to: &ComponentId) -> bool {
        self.edges.contains(&(from.clone(), to.clone()))
    }

    pub fn weight(&self, id: &ComponentId) -> Option<&WeightVector> {
        self.weights.get(id)
    }

    pub fn annotations(&self, id: &ComponentId) -> Option<&BTreeMap<String, String>> {
        self.annotations.get(id)
    }

    /// Components meeting either threshold, hottest first.
    ///
    /// Ordered by execution time descending, then call count descending,
    /// then name ascending.
    pub fn select_targets(&self, thresholds: &SelectionThresholds) -> Vec<ComponentId> {
        let mut hot: Vec<(&ComponentId, &WeightVector)> = self
            .weights
            .iter()
            .filter(|(_, w)| thresholds.admits(w))
            .collect();
        hot.sort_by(|(a, wa), (b, wb)| {
            wb.exec_time
                .cmp(&wa.exec_time)
                .then(wb.call_count.cmp(&wa.call_count))
                .then(a.cmp(b))
        });
        hot.into_iter().map(|(id, _)| id.clone()).collect()
    }

    /// Restricts the graph to `target` and its direct callers and callees.
    pub fn prune_context(&self, target: &ComponentId) -> Result<ContextSubgraph, GraphError> {
        if !self.contains(target) {
            return Err(GraphError::UnknownComponent(target.clone()));
        }
        let mut frozen = BTreeSet::new();
        for (from, to) in &self.edges {
            if from == target && to != target {
                frozen.insert(to.clone());
            } else if to == target && from != target {
                frozen.insert(from.clone());
            }
        }
        let in_view = |c: &ComponentId| c == target || frozen.contains(c);
        let edges = self
            .edges
            .iter()
            .filter(|(a, b)| in_view(a) && in_view(b))
            .cloned()
            .collect();
        let weights = self
            .weights
            .iter()
            .filter(|(c, _)| in_view(c))
            .map(|(c, w)| (c.clone(), *w))
            .collect();
        Ok(ContextSubgraph {
            target: target.clone(),
            frozen,
            edges,
            weights,
        })
    }
}

/// A target component with its read-only one-hop neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSubgraph {
    pub target: ComponentId,
    pub frozen: BTreeSet<ComponentId>,
    pub edges: BTreeSet<(ComponentId, ComponentId)>,
    pub weights: BTreeMap<ComponentId, WeightVector>,
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CallGraphFile {
    components: Vec<String>,
    edges: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    component: String,
    exec_time_ms: f64,
    call_count: u64,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

/// One row of the target report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReportEntry {
    pub target: String,
    pub exec_time_ms: f64,
    pub call_count: u64,
    pub frozen: Vec<String>,
}

fn read_text(path: &Path) -> Result<String, GraphError> {
    std::fs::read_to_string(path).map_err(|e| GraphError::Io {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Parses a call-graph document: `{"components": [..], "edges": [[from, to], ..]}`.
pub fn parse_call_graph(text: &str, file: &str) -> Result<WeightedComponentGraph, GraphError> {
    let raw: CallGraphFile = serde_json::from_str(text).map_err(|e| GraphError::Malformed {
        file: file.to_string(),
        reason: e.to_string(),
    })?;
    let mut components = Vec::with_capacity(raw.components.len());
    for (index, name) in raw.components.into_iter().enumerate() {
        let id = ComponentId::new(name).map_err(|e| GraphError::InvalidRecord {
            file: file.to_string(),
            index,
            reason: e.to_string(),
        })?;
        components.push(id);
    }
    let mut edges = Vec::with_capacity(raw.edges.len());
    for (index, (a, b)) in raw.edges.into_iter().enumerate() {
        let bad = |e: GraphError| GraphError::InvalidRecord {
            file: file.to_string(),
            index,
            reason: e.to_string(),
        };
        edges.push((
            ComponentId::new(a).map_err(bad)?,
            ComponentId::new(b).map_err(bad)?,
        ));
    }
    WeightedComponentGraph::build(components, edges).map_err(|e| GraphError::Malformed {
        file: file.to_string(),
        reason: e.to_string(),
    })
}

pub fn load_call_graph(path: &Path) -> Result<WeightedComponentGraph, GraphError> {
    parse_call_graph(&read_text(path)?, &path.display().to_string())
}

/// Parses a profile document: a JSON array of
/// `{"component", "exec_time_ms", "call_count", "annotations"?}` records.
pub fn parse_profile(text: &str, file: &str) -> Result<Vec<ProfileEntry>, GraphError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| GraphError::Malformed {
            file: file.to_string(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::with_capacity(values.len());
    for (index, value) in values.into_iter().enumerate() {
        let bad = |reason: String| GraphError::InvalidRecord {
            file: file.to_string(),
            index,
            reason,
        };
        let rec: ProfileRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        let component = ComponentId::new(rec.component).map_err(|e| bad(e.to_string()))?;
        let exec_time = ms_to_duration(rec.exec_time_ms)
            .ok_or_else(|| bad(format!("invalid exec_time_ms {}", rec.exec_time_ms)))?;
        out.push(ProfileEntry {
            component,
            exec_time,
            call_count: rec.call_count,
            annotations: rec.annotations,
        });
    }
    Ok(out)
}

pub fn load_profile(path: &Path) -> Result<Vec<ProfileEntry>, GraphError> {
    parse_profile(&read_text(path)?, &path.display().to_string())
}

/// Selects targets and pairs each with its frozen neighborhood.
pub fn target_report(
    graph: &WeightedComponentGraph,
    thresholds: &SelectionThresholds,
) -> Vec<TargetReportEntry> {
    graph
        .select_targets(thresholds)
        .into_iter()
        .map(|t| {
            let ctx = graph
                .prune_context(&t)
                .expect("selected targets are graph nodes");
            let w = ctx.weights[&t];
            TargetReportEntry {
                target: t.to_string(),
                exec_time_ms: w.exec_time_ms(),
                call_count: w.call_count,
                frozen: ctx.frozen.iter().map(|c| c.to_string()).collect(),
            }
        })
        .collect()
}
