//! Exact-byte duplicate removal over image files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedDuplicate {
    pub path: PathBuf,
    /// The earlier file with identical bytes that stays in the corpus.
    pub kept_twin: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupOutcome {
    pub kept: Vec<PathBuf>,
    pub dropped: Vec<DroppedDuplicate>,
}

/// Keeps the first occurrence (in input order) of each distinct byte
/// content. Hash matches are confirmed by a byte comparison before a file is
/// dropped, so the outcome is exactly content equality.
pub fn dedup_by_content_hash(paths: &[PathBuf]) -> Result<DedupOutcome> {
    let mut by_digest: HashMap<[u8; 32], Vec<usize>> = HashMap::new();
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut dropped: Vec<DroppedDuplicate> = Vec::new();
    for path in paths {
        let bytes = read_bytes(path)?;
        let digest: [u8; 32] = Sha256::digest(&bytes).into();
        let bucket = by_digest.entry(digest).or_default();
        let mut twin = None;
        for &idx in bucket.iter() {
            if read_bytes(&kept[idx])? == bytes {
                twin = Some(kept[idx].clone());
                break;
            }
        }
        match twin {
            Some(kept_twin) => dropped.push(DroppedDuplicate { path: path.clone(), kept_twin }),
            None => {
                bucket.push(kept.len());
                kept.push(path.clone());
            }
        }
    }
    Ok(DedupOutcome { kept, dropped })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
