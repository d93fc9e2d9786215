//! Per-user adapter grants.
//!
//! A user's grants are an explicit set of adapter ids; the positional
//! access vector is the indicator of that set over the sorted registered
//! ids. Users that were never given grants are denied everything.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterId;
use crate::error::{Error, Result};
use crate::pipeline::CandidateSet;

pub const PERMISSIONS_EXTENSION: &str = "acperm";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionVector {
    pub user_id: String,
    pub grants: BTreeSet<AdapterId>,
}

#[derive(Clone, Debug, Default)]
pub struct PermissionTable {
    users: HashMap<String, BTreeSet<AdapterId>>,
}

impl PermissionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replace the user's grants.
    pub fn set_permissions(&mut self, user_id: &str, grants: BTreeSet<AdapterId>) {
        self.users.insert(user_id.to_owned(), grants);
    }

    /// Raw stored grants, possibly naming adapters that no longer exist.
    pub fn lookup(&self, user_id: &str) -> BTreeSet<AdapterId> {
        self.users.get(user_id).cloned().unwrap_or_default()
    }

    pub fn is_known(&self, user_id: &str) -> bool {
        self.users.contains_key(user_id)
    }

    pub fn remove_user(&mut self, user_id: &str) -> bool {
        self.users.remove(user_id).is_some()
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// All users sorted by id.
    pub fn vectors(&self) -> Vec<PermissionVector> {
        let mut out: Vec<_> = self
            .users
            .iter()
            .map(|(user_id, grants)| PermissionVector {
                user_id: user_id.clone(),
                grants: grants.clone(),
            })
            .collect();
        out.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        out
    }

    /// 0/1 access vector over `registered` (in the given order).
    pub fn access_vector(&self, user_id: &str, registered: &[AdapterId]) -> Vec<u8> {
        let grants = self.users.get(user_id);
        registered
            .iter()
            .map(|id| u8::from(grants.is_some_and(|g| g.contains(id))))
            .collect()
    }

    /// Write one JSON object per user, sorted by user id.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::codec::ensure_parent(path)?;
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = std::io::BufWriter::new(file);
        for vector in self.vectors() {
            serde_json::to_writer(&mut out, &vector)?;
            out.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        out.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(out);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Read a JSON-lines file; later lines for the same user win.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: PermissionVector = serde_json::from_str(&line)?;
            table.set_permissions(&v.user_id, v.grants);
        }
        Ok(table)
    }
}

/// Split candidates into those the grants cover and the rest, keeping scores
/// and relative order.
pub fn partition(candidates: &CandidateSet, grants: &BTreeSet<AdapterId>) -> (CandidateSet, CandidateSet) {
    let (permitted, denied): (Vec<_>, Vec<_>) = candidates
        .iter()
        .cloned()
        .partition(|(id, _)| grants.contains(id));
    (CandidateSet::from_ordered(permitted), CandidateSet::from_ordered(denied))
}
