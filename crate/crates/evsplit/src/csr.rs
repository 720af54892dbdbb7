//! Server-side client state records: per-class accumulation of evidential
//! statistics, staleness-aware EMA merging, count normalization, and TTL
//! eviction of inactive clients.
//!
//! Storage is O(clients × classes²): only aggregates are kept, never
//! per-sample data.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-client, per-class aggregate statistics.
///
/// `evidence` is an N×N matrix whose row is the true class and whose column
/// is the class evidence was assigned to; `counts`, `aleatoric`, and
/// `epistemic` are per-true-class sums. After EMA merging, counts become
/// fractional weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStateRecord {
    #[serde(rename = "E")]
    pub evidence: Array2<f64>,
    #[serde(rename = "M")]
    pub counts: Array1<f64>,
    #[serde(rename = "U_ale")]
    pub aleatoric: Array1<f64>,
    #[serde(rename = "U_epi")]
    pub epistemic: Array1<f64>,
    #[serde(rename = "t_k")]
    pub last_round: u64,
}

impl ClientStateRecord {
    pub fn empty(num_classes: usize, round: u64) -> Self {
        Self {
            evidence: Array2::zeros((num_classes, num_classes)),
            counts: Array1::zeros(num_classes),
            aleatoric: Array1::zeros(num_classes),
            epistemic: Array1::zeros(num_classes),
            last_round: round,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total_count(&self) -> f64 {
        self.counts.sum()
    }
}

/// One sample's contribution to a record.
#[derive(Debug, Clone)]
pub struct SampleStat {
    pub label: usize,
    pub evidence: Array1<f64>,
    pub u_ale: f64,
    pub u_epi: f64,
}

/// Accumulates per-sample statistics into a record:
/// `E[label] += e`, `M[label] += 1`, `U[label] += u`.
pub fn record_batch(record: &mut ClientStateRecord, samples: &[SampleStat]) -> Result<()> {
    let n = record.num_classes();
    for s in samples {
        if s.label >= n {
            return Err(Error::Domain(format!(
                "label {} out of range for {n} classes",
                s.label
            )));
        }
        if s.evidence.len() != n {
            return Err(Error::Domain(format!(
                "evidence vector length {} does not match {n} classes",
                s.evidence.len()
            )));
        }
        if s.evidence.iter().any(|&e| !e.is_finite() || e < 0.0) {
            return Err(Error::Domain(
                "evidence must be finite and nonnegative".into(),
            ));
        }
    }
    for s in samples {
        let mut row = record.evidence.row_mut(s.label);
        row += &s.evidence;
        record.counts[s.label] += 1.0;
        record.aleatoric[s.label] += s.u_ale;
        record.epistemic[s.label] += s.u_epi;
    }
    Ok(())
}

/// Count-normalized view of a record. Rows with zero count normalize to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRecord {
    pub evidence: Array2<f64>,
    pub counts: Array1<f64>,
    pub aleatoric: Array1<f64>,
    pub epistemic: Array1<f64>,
}

pub fn normalize(record: &ClientStateRecord) -> NormalizedRecord {
    let n = record.num_classes();
    let mut evidence = Array2::zeros((n, n));
    let mut aleatoric = Array1::zeros(n);
    let mut epistemic = Array1::zeros(n);
    for c in 0..n {
        let m = record.counts[c];
        if m > 0.0 {
            let src = record.evidence.row(c);
            let mut dst = evidence.row_mut(c);
            dst.assign(&src.mapv(|v| v / m));
            aleatoric[c] = record.aleatoric[c] / m;
            epistemic[c] = record.epistemic[c] / m;
        }
    }
    NormalizedRecord {
        evidence,
        counts: record.counts.clone(),
        aleatoric,
        epistemic,
    }
}

/// Staleness-aware EMA merge of a stored record with the current round's
/// statistics: `β_dec = β^{max(1, t_c − t_k)}`, every field
/// `β_dec·stored + (1−β_dec)·current`, and `last_round ← t_c`.
pub fn ema_update(
    stored: &ClientStateRecord,
    current: &ClientStateRecord,
    beta: f64,
    current_round: u64,
) -> Result<ClientStateRecord> {
    if !(0.0 < beta && beta < 1.0) {
        return Err(Error::Config(format!(
            "ema beta must lie in (0,1), got {beta}"
        )));
    }
    if current_round < stored.last_round {
        return Err(Error::Ordering(format!(
            "current round {current_round} precedes stored round {}",
            stored.last_round
        )));
    }
    if stored.num_classes() != current.num_classes() {
        return Err(Error::Config("record class counts differ".into()));
    }
    let gap = (current_round - stored.last_round).max(1);
    let beta_dec = beta.powi(gap as i32);
    let blend = |old: f64, new: f64| beta_dec * old + (1.0 - beta_dec) * new;
    let mut merged = current.clone();
    merged
        .evidence
        .zip_mut_with(&stored.evidence, |new, &old| *new = blend(old, *new));
    merged
        .counts
        .zip_mut_with(&stored.counts, |new, &old| *new = blend(old, *new));
    merged
        .aleatoric
        .zip_mut_with(&stored.aleatoric, |new, &old| *new = blend(old, *new));
    merged
        .epistemic
        .zip_mut_with(&stored.epistemic, |new, &old| *new = blend(old, *new));
    merged.last_round = current_round;
    Ok(merged)
}

/// Map of client id to stored record with EMA and TTL policies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsrStore {
    records: BTreeMap<usize, ClientStateRecord>,
    beta: f64,
    /// `None` disables eviction.
    ttl_rounds: Option<u64>,
}

impl CsrStore {
    pub fn new(beta: f64, ttl_rounds: Option<u64>) -> Result<Self> {
        if !(0.0 < beta && beta < 1.0) {
            return Err(Error::Config(format!(
                "ema beta must lie in (0,1), got {beta}"
            )));
        }
        Ok(Self {
            records: BTreeMap::new(),
            beta,
            ttl_rounds,
        })
    }

    pub fn get(&self, client: usize) -> Option<&ClientStateRecord> {
        self.records.get(&client)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.keys().copied()
    }

    /// Merges the current round's statistics for a client. First-ever
    /// participation stores the current record as-is.
    pub fn merge(&mut self, client: usize, current: ClientStateRecord, round: u64) -> Result<()> {
        let merged = match self.records.get(&client) {
            Some(stored) => ema_update(stored, &current, self.beta, round)?,
            None => {
                let mut fresh = current;
                fresh.last_round = round;
                fresh
            }
        };
        self.records.insert(client, merged);
        Ok(())
    }

    /// Drops records whose staleness exceeds the TTL.
    pub fn evict_stale(&mut self, current_round: u64) {
        if let Some(ttl) = self.ttl_rounds {
            self.records
                .retain(|_, r| current_round.saturating_sub(r.last_round) <= ttl);
        }
    }

    /// JSON snapshot (client_id → {E, M, U_ale, U_epi, t_k}) for
    /// checkpointing. Matrices are nested row-major arrays.
    pub fn snapshot_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (client, r) in &self.records {
            let e: Vec<Vec<f64>> = r
                .evidence
                .rows()
                .into_iter()
                .map(|row| row.to_vec())
                .collect();
            map.insert(
                client.to_string(),
                serde_json::json!({
                    "E": e,
                    "M": r.counts.to_vec(),
                    "U_ale": r.aleatoric.to_vec(),
                    "U_epi": r.epistemic.to_vec(),
                    "t_k": r.last_round,
                }),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(&self.snapshot_json()).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Helper building a [`SampleStat`] from raw parts.
pub fn sample_stat(label: usize, evidence: ArrayView1<f64>, u_ale: f64, u_epi: f64) -> SampleStat {
    SampleStat {
        label,
        evidence: evidence.to_owned(),
        u_ale,
        u_epi,
    }
}
