//! The poison noise ledger: the perturbation added to each poisoned sample.
//!
//! File layout (little-endian): `b"PBLEDGR\0"`, u32 version, f64 eps_p,
//! u64 dim, u64 entry count, then per entry u64 id, `dim` f64 of xi and
//! `dim` f64 of the clean base sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::dataset::DatasetView;
use crate::diffcore::io::Reader;
use crate::error::{Error, Result};

pub const LEDGER_MAGIC: &[u8; 8] = b"PBLEDGR\0";
pub const LEDGER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub xi: Vec<f64>,
    pub base_x: Vec<f64>,
}

impl LedgerEntry {
    pub fn poisoned(&self) -> Vec<f64> {
        self.base_x.iter().zip(&self.xi).map(|(b, e)| b + e).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLedger {
    pub eps_p: f64,
    pub dim: usize,
    pub entries: BTreeMap<u64, LedgerEntry>,
}

impl NoiseLedger {
    pub fn new(eps_p: f64, dim: usize) -> Self {
        NoiseLedger {
            eps_p,
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: u64, entry: LedgerEntry) -> Result<()> {
        if entry.xi.len() != self.dim || entry.base_x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: entry.xi.len().max(entry.base_x.len()),
            });
        }
        if self.entries.contains_key(&id) {
            return Err(Error::invalid(format!("ledger already holds id {id}")));
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LEDGER_MAGIC);
        out.extend_from_slice(&LEDGER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.eps_p.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, e) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for v in e.xi.iter().chain(&e.base_x) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != LEDGER_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != LEDGER_VERSION {
            return Err(format!("unsupported ledger version {version}"));
        }
        let eps_p = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let dim = r.usize()?;
        let count = r.usize()?;
        let mut ledger = NoiseLedger::new(eps_p, dim);
        for _ in 0..count {
            let id = r.u64()?;
            let xi = r.f64s(dim)?;
            let base_x = r.f64s(dim)?;
            ledger.entries.insert(id, LedgerEntry { xi, base_x });
        }
        r.finish()?;
        Ok(ledger)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Mark every ledger id as a deletion request: U = S_pois.
pub fn partition_forget(view: &DatasetView, ledger: &NoiseLedger) -> Result<DatasetView> {
    view.clone().with_forget(ledger.ids())
}
