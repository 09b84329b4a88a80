//! Embedding storage and exact Euclidean top-K search.
//!
//! Store files are JSON lines: a header
//! `{"dimension": d, "checkpoint": "<file>", "count": N}` followed by one
//! `{"patch_id", "label", "vector", "source_path"}` object per record.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Label, PatchRecord};
use crate::error::{dim_err, Error, Result};
use crate::network::Network;
use crate::Scalar;

pub fn euclidean_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(dim_err!("vector axis: lengths {} and {} differ", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingRecord<T> {
    pub patch_id: String,
    pub label: Label,
    pub vector: Vec<T>,
    pub source_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Neighbor<T> {
    pub patch_id: String,
    pub distance: T,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RetrievalResult<T> {
    pub query_id: String,
    /// Sorted by distance, ties by patch id.
    pub neighbors: Vec<Neighbor<T>>,
}

impl<T: Scalar> RetrievalResult<T> {
    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.neighbors.iter().map(|n| n.label)
    }
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    dimension: usize,
    checkpoint: String,
    count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore<T> {
    dimension: usize,
    checkpoint: String,
    records: Vec<EmbeddingRecord<T>>,
}

impl<T: Scalar> FeatureStore<T> {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            checkpoint: String::new(),
            records: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    /// Name of the checkpoint the vectors came from, recorded in the header.
    pub fn set_checkpoint(&mut self, name: impl Into<String>) {
        self.checkpoint = name.into();
    }

    pub fn records(&self) -> &[EmbeddingRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, patch_id: &str) -> Option<&EmbeddingRecord<T>> {
        self.records.iter().find(|r| r.patch_id == patch_id)
    }

    /// Builds a store from records, checking dimensions and id uniqueness.
    pub fn from_records(dimension: usize, records: Vec<EmbeddingRecord<T>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.vector.len() != dimension {
                return Err(dim_err!(
                    "vector axis: record {} has {} components, store dimension is {dimension}",
                    r.patch_id,
                    r.vector.len()
                ));
            }
            if !seen.insert(r.patch_id.as_str()) {
                return Err(Error::Data(format!("duplicate patch_id {}", r.patch_id)));
            }
        }
        Ok(Self {
            dimension,
            checkpoint: String::new(),
            records,
        })
    }

    /// Exhaustive scan returning the `k` closest records, ties broken by
    /// patch id. `exclude_id` skips one record (self-queries).
    pub fn query_top_k(&self, f_q: &[T], k: usize, exclude_id: Option<&str>) -> Result<Vec<Neighbor<T>>> {
        if f_q.len() != self.dimension {
            return Err(dim_err!(
                "query vector has {} components, store dimension is {}",
                f_q.len(),
                self.dimension
            ));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut scored: Vec<(T, &EmbeddingRecord<T>)> = self
            .records
            .iter()
            .filter(|r| Some(r.patch_id.as_str()) != exclude_id)
            .map(|r| Ok((euclidean_distance(f_q, &r.vector)?, r)))
            .collect::<Result<_>>()?;
        let by_rank = |a: &(T, &EmbeddingRecord<T>), b: &(T, &EmbeddingRecord<T>)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.patch_id.cmp(&b.1.patch_id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(distance, r)| Neighbor {
                patch_id: r.patch_id.clone(),
                distance,
                label: r.label,
            })
            .collect())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = StoreHeader {
            dimension: self.dimension,
            checkpoint: self.checkpoint.clone(),
            count: self.records.len(),
        };
        let io = |e| Error::io("<store>", e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("store file is empty".into()))?
            .map_err(|e| Error::io("<store>", e))?;
        let header: StoreHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Format(format!("bad store header: {e}")))?;
        let mut records = Vec::with_capacity(header.count);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<store>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord<T> =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("bad store record on line {}: {e}", n + 2)))?;
            records.push(rec);
        }
        if records.len() != header.count {
            return Err(Error::Format(format!(
                "store header declares {} records, file holds {}",
                header.count,
                records.len()
            )));
        }
        let mut store = Self::from_records(header.dimension, records)?;
        store.checkpoint = header.checkpoint;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Embeds every patch with the network. Record order follows `patches`.
pub fn index_build<T: Scalar>(network: &Network<T>, patches: &[PatchRecord<T>]) -> Result<FeatureStore<T>> {
    let vectors: Vec<Vec<T>> = patches.par_iter().map(|p| network.embed(&p.pixels)).collect::<Result<_>>()?;
    let records = patches
        .iter()
        .zip(vectors)
        .map(|(p, vector)| EmbeddingRecord {
            patch_id: p.patch_id.clone(),
            label: p.label,
            vector,
            source_path: p.source_path.clone(),
        })
        .collect();
    FeatureStore::from_records(network.embedding_dim(), records)
}

pub fn query_top_k<T: Scalar>(
    store: &FeatureStore<T>,
    query_id: &str,
    f_q: &[T],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<RetrievalResult<T>> {
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        neighbors: store.query_top_k(f_q, k, exclude_id)?,
    })
}
