//! Island-partitioned program database with an elite archive.
//!
//! Candidates are never removed. Each lives on one island; the archive keeps
//! the best `archive_capacity` originals (migration copies excluded) ordered
//! by fitness descending, then generation ascending, then id ascending.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{is_eligible, EvaluationReport};

pub type CandidateId = u64;

pub const DEFAULT_ARCHIVE_CAPACITY: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DbError {
    #[error("candidate rejected: it did not pass every evaluation gate")]
    InvalidCandidate,
    #[error("island {island} out of range for {count} islands")]
    IslandOutOfRange { island: usize, count: usize },
    #[error("database is empty")]
    Empty,
    #[error("invalid island configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepairStrategy {
    Reflection,
    MctsRepair,
}

/// How a candidate came out of the repair loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairProvenance {
    pub strategy: RepairStrategy,
    pub provider_calls: u32,
    /// Diagnostics of the broken program that was repaired.
    pub broken_diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: CandidateId,
    pub source: String,
    pub parent_id: Option<CandidateId>,
    pub island: usize,
    pub generation: u64,
    pub report: Option<EvaluationReport>,
    pub valid: bool,
    pub change_summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migrated_from: Option<CandidateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairProvenance>,
}

impl Candidate {
    pub fn fitness(&self) -> f64 {
        self.report.as_ref().map_or(0.0, |r| r.combined_score)
    }

    /// Id of the original this candidate was copied from, or its own id.
    pub fn origin(&self) -> CandidateId {
        self.migrated_from.unwrap_or(self.id)
    }

    pub fn is_copy(&self) -> bool {
        self.migrated_from.is_some()
    }
}

/// Everything about a candidate except what the database assigns.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDraft {
    pub source: String,
    pub parent_id: Option<CandidateId>,
    pub island: usize,
    pub generation: u64,
    pub report: Option<EvaluationReport>,
    pub change_summary: String,
    pub repair: Option<RepairProvenance>,
}

impl CandidateDraft {
    pub fn new(source: impl Into<String>, report: EvaluationReport) -> Self {
        Self {
            source: source.into(),
            parent_id: None,
            island: 0,
            generation: 0,
            report: Some(report),
            change_summary: String::new(),
            repair: None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.report.as_ref().is_some_and(is_eligible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IslandConfig {
    pub island_count: usize,
    pub migration_interval: u64,
    pub migration_fraction: f64,
    pub p_elite: f64,
    pub p_island: f64,
    pub archive_capacity: usize,
}

impl Default for IslandConfig {
    fn default() -> Self {
        Self {
            island_count: 5,
            migration_interval: 50,
            migration_fraction: 0.10,
            p_elite: 0.7,
            p_island: 0.2,
            archive_capacity: DEFAULT_ARCHIVE_CAPACITY,
        }
    }
}

impl IslandConfig {
    pub fn validate(&self) -> Result<(), DbError> {
        let err = |m: &str| Err(DbError::Config(m.to_string()));
        if self.island_count < 1 {
            return err("island_count must be at least 1");
        }
        if self.migration_interval < 1 {
            return err("migration_interval must be at least 1");
        }
        if !(self.migration_fraction > 0.0 && self.migration_fraction <= 1.0) {
            return err("migration_fraction must lie in (0, 1]");
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_elite) || !prob(self.p_island) || self.p_elite + self.p_island > 1.0 {
            return err("p_elite and p_island must be probabilities summing to at most 1");
        }
        if self.archive_capacity < 1 {
            return err("archive_capacity must be at least 1");
        }
        Ok(())
    }
}

/// Round-robin island allocation.
pub fn assign_island(sequence_number: u64, config: &IslandConfig) -> usize {
    (sequence_number % config.island_count as u64) as usize
}

/// Which pool a parent was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Archive,
    Island,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationCopy {
    pub source_id: CandidateId,
    pub new_id: CandidateId,
    pub from_island: usize,
    pub to_island: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub copies: Vec<MigrationCopy>,
}

impl MigrationRecord {
    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness()
        .total_cmp(&a.fitness())
        .then(a.generation.cmp(&b.generation))
        .then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramDatabase {
    config: IslandConfig,
    require_valid: bool,
    candidates: Vec<Candidate>,
    islands: Vec<Vec<CandidateId>>,
    archive: Vec<CandidateId>,
}

impl ProgramDatabase {
    pub fn new(config: IslandConfig) -> Result<Self, DbError> {
        config.validate()?;
        Ok(Self {
            islands: vec![Vec::new(); config.island_count],
            config,
            require_valid: true,
            candidates: Vec::new(),
            archive: Vec::new(),
        })
    }

    /// Accepts candidates that failed evaluation. Only the unfiltered
    /// baseline mode uses this.
    pub fn without_validity_filter(mut self) -> Self {
        self.require_valid = false;
        self
    }

    pub fn config(&self) -> &IslandConfig {
        &self.config
    }

    pub fn requires_valid(&self) -> bool {
        self.require_valid
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, id: CandidateId) -> Option<&Candidate> {
        self.candidates.get(id as usize)
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn island(&self, index: usize) -> &[CandidateId] {
        &self.islands[index]
    }

    pub fn archive(&self) -> &[CandidateId] {
        &self.archive
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.iter().min_by(|a, b| rank(a, b))
    }

    /// Best candidate that passed every gate.
    pub fn best_valid(&self) -> Option<&Candidate> {
        self.candidates
            .iter()
            .filter(|c| c.valid)
            .min_by(|a, b| rank(a, b))
    }

    pub fn insert(&mut self, draft: CandidateDraft) -> Result<CandidateId, DbError> {
        let valid = draft.is_valid();
        if self.require_valid && !valid {
            return Err(DbError::InvalidCandidate);
        }
        if draft.island >= self.config.island_count {
            return Err(DbError::IslandOutOfRange {
                island: draft.island,
                count: self.config.island_count,
            });
        }
        let id = self.candidates.len() as CandidateId;
        let candidate = Candidate {
            id,
            source: draft.source,
            parent_id: draft.parent_id,
            island: draft.island,
            generation: draft.generation,
            report: draft.report,
            valid,
            change_summary: draft.change_summary,
            migrated_from: None,
            repair: draft.repair,
        };
        self.islands[candidate.island].push(id);
        self.candidates.push(candidate);
        self.update_archive(id);
        Ok(id)
    }

    fn update_archive(&mut self, id: CandidateId) {
        let cap = self.config.archive_capacity;
        let new = &self.candidates[id as usize];
        if self.archive.len() >= cap {
            let worst = &self.candidates[*self.archive.last().expect("full archive") as usize];
            if rank(new, worst) != Ordering::Less {
                return;
            }
        }
        let candidates = &self.candidates;
        let pos = self
            .archive
            .partition_point(|&a| rank(&candidates[a as usize], new) == Ordering::Less);
        self.archive.insert(pos, id);
        self.archive.truncate(cap);
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R, pool: &[CandidateId]) -> CandidateId {
        pool[rng.gen_range(0..pool.len())]
    }

    fn pool_ids(&self, pool: Pool, island: usize) -> Vec<CandidateId> {
        match pool {
            Pool::Archive => self.archive.clone(),
            Pool::Island => self.islands.get(island).cloned().unwrap_or_default(),
            Pool::Global => (0..self.candidates.len() as CandidateId).collect(),
        }
    }

    /// Three-pool parent sampling: archive with `p_elite`, the current island
    /// with `p_island`, every candidate otherwise. An empty pool falls
    /// through to the next one in archive → island → global order.
    pub fn sample_parent<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        current_island: usize,
    ) -> Result<(Pool, &Candidate), DbError> {
        if self.candidates.is_empty() {
            return Err(DbError::Empty);
        }
        let r: f64 = rng.gen();
        let chosen = if r < self.config.p_elite {
            Pool::Archive
        } else if r < self.config.p_elite + self.config.p_island {
            Pool::Island
        } else {
            Pool::Global
        };
        let order = [Pool::Archive, Pool::Island, Pool::Global];
        let start = order.iter().position(|p| *p == chosen).expect("known pool");
        for pool in order[start..].iter().chain(order[..start].iter()) {
            let ids = self.pool_ids(*pool, current_island);
            if !ids.is_empty() {
                let id = self.pick(rng, &ids);
                return Ok((*pool, &self.candidates[id as usize]));
            }
        }
        unreachable!("global pool is non-empty")
    }

    /// Uniform draw over all candidates.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Candidate, DbError> {
        if self.candidates.is_empty() {
            return Err(DbError::Empty);
        }
        let id = rng.gen_range(0..self.candidates.len());
        Ok(&self.candidates[id])
    }

    /// Top `n` archive entries.
    pub fn top(&self, n: usize) -> Vec<&Candidate> {
        self.archive
            .iter()
            .take(n)
            .map(|&id| &self.candidates[id as usize])
            .collect()
    }

    /// Copies the best `ceil(fraction × size)` candidates of every island to
    /// both ring neighbors. Originals stay where they are; copies get fresh
    /// ids and skip islands that already hold the same original.
    pub fn migrate(&mut self) -> MigrationRecord {
        let k = self.config.island_count;
        let mut record = MigrationRecord::default();
        if k < 2 {
            return record;
        }
        let emigrants: Vec<Vec<CandidateId>> = self
            .islands
            .iter()
            .map(|ids| {
                let n = (self.config.migration_fraction * ids.len() as f64).ceil() as usize;
                let mut ranked: Vec<&Candidate> = ids
                    .iter()
                    .map(|&id| &self.candidates[id as usize])
                    .collect();
                ranked.sort_by(|a, b| rank(a, b));
                ranked.iter().take(n).map(|c| c.id).collect()
            })
            .collect();

        for (from, ids) in emigrants.iter().enumerate() {
            let mut targets = vec![(from + k - 1) % k, (from + 1) % k];
            targets.dedup();
            for &to in &targets {
                for &src in ids {
                    let origin = self.candidates[src as usize].origin();
                    let present = self.islands[to]
                        .iter()
                        .any(|&c| self.candidates[c as usize].origin() == origin);
                    if present {
                        continue;
                    }
                    let new_id = self.candidates.len() as CandidateId;
                    let mut copy = self.candidates[src as usize].clone();
                    copy.id = new_id;
                    copy.island = to;
                    copy.migrated_from = Some(origin);
                    self.islands[to].push(new_id);
                    self.candidates.push(copy);
                    record.copies.push(MigrationCopy {
                        source_id: src,
                        new_id,
                        from_island: from,
                        to_island: to,
                    });
                }
            }
        }
        record
    }
}
