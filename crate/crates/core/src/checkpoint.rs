//! Versioned checkpoint file: database, random-source state, and optional
//! engine state in one JSON document.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::ProgramDatabase;

pub const FORMAT_NAME: &str = "evoopt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected version {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint io error at {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Serialize)]
struct CheckpointOut<'a, E> {
    format: &'static str,
    format_version: u32,
    database: &'a ProgramDatabase,
    rng: &'a ChaCha8Rng,
    engine: Option<&'a E>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Checkpoint<E> {
    pub database: ProgramDatabase,
    pub rng: ChaCha8Rng,
    pub engine: Option<E>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    format_version: u32,
}

fn io_err(path: &Path, e: impl ToString) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub fn to_bytes<E: Serialize>(
    database: &ProgramDatabase,
    rng: &ChaCha8Rng,
    engine: Option<&E>,
) -> Vec<u8> {
    let out = CheckpointOut {
        format: FORMAT_NAME,
        format_version: FORMAT_VERSION,
        database,
        rng,
        engine,
    };
    let mut bytes = serde_json::to_vec_pretty(&out).expect("checkpoint serializes");
    bytes.push(b'\n');
    bytes
}

pub fn from_bytes<E: DeserializeOwned>(bytes: &[u8]) -> Result<Checkpoint<E>, CheckpointError> {
    let header: Header =
        serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if header.format != FORMAT_NAME {
        return Err(CheckpointError::Corrupt(format!(
            "unexpected format tag {:?}",
            header.format
        )));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: header.format_version,
        });
    }
    serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

/// Writes through a temporary sibling and renames, so an interrupted write
/// never clobbers the previous checkpoint.
pub fn save<E: Serialize>(
    path: &Path,
    database: &ProgramDatabase,
    rng: &ChaCha8Rng,
    engine: Option<&E>,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(database, rng, engine);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(&bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load<E: DeserializeOwned>(path: &Path) -> Result<Checkpoint<E>, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    from_bytes(&bytes)
}

impl ProgramDatabase {
    pub fn checkpoint(&self, path: &Path, rng: &ChaCha8Rng) -> Result<(), CheckpointError> {
        save::<()>(path, self, rng, None)
    }

    pub fn restore(path: &Path) -> Result<(ProgramDatabase, ChaCha8Rng), CheckpointError> {
        let c: Checkpoint<serde_json::Value> = load(path)?;
        Ok((c.database, c.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::db::tests::report;
    use crate::db::{CandidateDraft, IslandConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_database_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let db = ProgramDatabase::new(IslandConfig::default()).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(5);
        db.checkpoint(&path, &rng).unwrap();
        let (back, rng2) = ProgramDatabase::restore(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, db);
        assert_eq!(rng2, rng);
    }

    #[test]
    fn restored_state_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut db = ProgramDatabase::new(IslandConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for g in 0..12u64 {
            let s: f64 = rng.gen();
            let mut d = CandidateDraft::new(format!("p{g}"), report(s, true));
            d.island = (g % 5) as usize;
            d.generation = g;
            db.insert(d).unwrap();
        }
        db.checkpoint(&path, &rng).unwrap();
        let bytes = fs::read(&path).unwrap();
        let (db2, mut rng2) = ProgramDatabase::restore(&path).unwrap();
        let again = to_bytes::<()>(&db2, &rng2, None);
        assert_eq!(again, bytes);
        for island in 0..5 {
            let a = db.sample_parent(&mut rng, island).unwrap().1.id;
            let b = db2.sample_parent(&mut rng2, island).unwrap().1.id;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let db = ProgramDatabase::new(IslandConfig::default()).unwrap();
        db.checkpoint(&path, &ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = ProgramDatabase::restore(&path).unwrap_err();
        assert!(err.to_string().starts_with("checkpoint corrupt"), "{err}");
    }

    #[test]
    fn version_mismatch_names_expected() {
        let db = ProgramDatabase::new(IslandConfig::default()).unwrap();
        let bytes = to_bytes::<()>(&db, &ChaCha8Rng::seed_from_u64(1), None);
        let text = String::from_utf8(bytes).unwrap().replace(
            &format!("\"format_version\": {FORMAT_VERSION}"),
            "\"format_version\": 99",
        );
        let err = from_bytes::<()>(text.as_bytes()).unwrap_err();
        match &err {
            CheckpointError::VersionMismatch { expected, found } => {
                assert_eq!((*expected, *found), (FORMAT_VERSION, 99));
            }
            other => panic!("{other}"),
        }
        assert!(err.to_string().contains("expected version 1"));
    }
}
