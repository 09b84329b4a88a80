//! Request handling shared by the CLI `query` command and the HTTP API.
//!
//! [`QueryService`] owns a loaded network and store and never mutates them;
//! the only interior state is a cache of rendered saliency overlays.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{decode_image, encode_png, load_image, to_rgb_image, Label};
use crate::error::Error;
use crate::eval::{majority_vote_label, vote_margin};
use crate::interp::resize_bilinear;
use crate::saliency::{grad_cam, overlay};
use crate::RetrievalResult;
use crate::{FeatureStore, Network, Tensor};

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    /// Base64-encoded PNG (or PPM) bytes.
    pub image: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub include_saliency: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub patch_id: String,
    pub distance: f64,
    pub label: Label,
    pub thumbnail_url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: String,
    pub neighbors: Vec<NeighborView>,
    pub suggested_label: Label,
    pub margin_score: f64,
    pub query_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoreStats {
    pub store_size: usize,
    pub dimension: usize,
    pub checkpoint_hash: String,
}

/// Client errors map to HTTP 4xx, the rest to 5xx.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Internal(_) => 500,
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

/// Stable id of a query image: the first 16 hex digits of its SHA-256.
pub fn query_id_for(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

pub struct QueryService {
    network: Network,
    store: FeatureStore,
    checkpoint_hash: String,
    report: Option<serde_json::Value>,
    saliency_cache: Mutex<HashMap<(String, String), Vec<u8>>>,
}

impl QueryService {
    /// Fails when the network and the store disagree on the embedding width.
    pub fn new(network: Network, store: FeatureStore, checkpoint_hash: String) -> crate::Result<Self> {
        if network.embedding_dim() != store.dimension() {
            return Err(Error::Config(format!(
                "network embeds into {} dimensions but the store holds {}-dimensional vectors",
                network.embedding_dim(),
                store.dimension()
            )));
        }
        Ok(Self {
            network,
            store,
            checkpoint_hash,
            report: None,
            saliency_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Attaches the last evaluation report served by `/api/report`.
    pub fn with_report(mut self, report: serde_json::Value) -> Self {
        self.report = Some(report);
        self
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    pub fn report(&self) -> Option<&serde_json::Value> {
        self.report.as_ref()
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            store_size: self.store.len(),
            dimension: self.store.dimension(),
            checkpoint_hash: self.checkpoint_hash.clone(),
        }
    }

    /// Decodes image bytes and resizes them to the network input.
    pub fn decode(&self, bytes: &[u8]) -> Result<Tensor, ServiceError> {
        let shape = self.network.input_shape();
        let t = decode_image::<f64>(bytes, shape[2]).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        resize_bilinear(&t, shape[0], shape[1]).map_err(|e| ServiceError::BadRequest(e.to_string()))
    }

    /// Embeds and ranks one image. Shared by the CLI and the HTTP handler.
    pub fn retrieve(&self, query_id: &str, pixels: &Tensor, k: usize) -> Result<(Vec<f64>, RetrievalResult), ServiceError> {
        if k == 0 {
            return Err(ServiceError::BadRequest("k must be at least 1".into()));
        }
        let embedding = self.network.embed(pixels)?;
        let neighbors = self.store.query_top_k(&embedding, k, None)?;
        Ok((
            embedding,
            RetrievalResult {
                query_id: query_id.to_string(),
                neighbors,
            },
        ))
    }

    pub fn retrieve_bytes(&self, bytes: &[u8], k: usize) -> Result<(Vec<f64>, RetrievalResult), ServiceError> {
        let pixels = self.decode(bytes)?;
        self.retrieve(&query_id_for(bytes), &pixels, k)
    }

    pub fn handle_query(&self, req: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(req.image.trim())
            .map_err(|e| ServiceError::BadRequest(format!("image is not valid base64: {e}")))?;
        self.query_bytes(&bytes, req.k, req.include_saliency)
    }

    /// Full query pipeline on raw image bytes.
    pub fn query_bytes(&self, bytes: &[u8], k: usize, include_saliency: bool) -> Result<QueryResponse, ServiceError> {
        let pixels = self.decode(bytes)?;
        let query_id = query_id_for(bytes);
        let (embedding, result) = self.retrieve(&query_id, &pixels, k)?;
        let k = result.neighbors.len();
        let suggested_label = majority_vote_label(&result, k).ok_or_else(|| ServiceError::Internal("the store is empty".into()))?;
        let margin_score = vote_margin(&result, k);

        let mut neighbors = Vec::with_capacity(k);
        for n in &result.neighbors {
            let saliency_url = if include_saliency {
                self.render_saliency(&query_id, &pixels, &n.patch_id)?;
                Some(format!("/api/saliency/{query_id}/{}", n.patch_id))
            } else {
                None
            };
            neighbors.push(NeighborView {
                patch_id: n.patch_id.clone(),
                distance: n.distance,
                label: n.label,
                thumbnail_url: format!("/api/patches/{}", n.patch_id),
                saliency_url,
            });
        }
        Ok(QueryResponse {
            query_id,
            neighbors,
            suggested_label,
            margin_score,
            query_embedding: embedding,
        })
    }

    fn patch_pixels(&self, patch_id: &str) -> Result<Tensor, ServiceError> {
        let record = self
            .store
            .get(patch_id)
            .ok_or_else(|| ServiceError::NotFound(format!("patch {patch_id}")))?;
        if record.source_path.is_empty() {
            return Err(ServiceError::NotFound(format!("patch {patch_id} has no source image")));
        }
        Ok(load_image(Path::new(&record.source_path), self.network.input_shape())?)
    }

    fn render_saliency(&self, query_id: &str, query: &Tensor, patch_id: &str) -> Result<(), ServiceError> {
        let key = (query_id.to_string(), patch_id.to_string());
        if self.saliency_cache.lock().expect("cache lock").contains_key(&key) {
            return Ok(());
        }
        let reference = self.patch_pixels(patch_id)?;
        let map = grad_cam(&self.network, query, &reference)?;
        let png = encode_png(&overlay(&map, query)?)?;
        self.saliency_cache.lock().expect("cache lock").entry(key).or_insert(png);
        Ok(())
    }

    /// PNG of a stored patch at network input resolution.
    pub fn patch_png(&self, patch_id: &str) -> Result<Vec<u8>, ServiceError> {
        let pixels = self.patch_pixels(patch_id)?;
        Ok(encode_png(&to_rgb_image(&pixels)?)?)
    }

    /// Cached overlay rendered by an earlier query with saliency enabled.
    pub fn saliency_png(&self, query_id: &str, patch_id: &str) -> Result<Vec<u8>, ServiceError> {
        self.saliency_cache
            .lock()
            .expect("cache lock")
            .get(&(query_id.to_string(), patch_id.to_string()))
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no saliency map for query {query_id} and patch {patch_id}")))
    }
}
