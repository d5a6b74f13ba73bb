//! Scenario directories: one `.trgb` bundle per tensor role plus a
//! `scenario.json` manifest mapping roles to file names.
//!
//! ```json
//! {
//!   "roles": {
//!     "pixels": "pixels.trgb",                  // f32 [N, D_p]
//!     "frame_embeddings": "frame_embeddings.trgb", // f32 [N, D_e]
//!     "query_embedding": "query_embedding.trgb",   // f32 [D_e]
//!     "attention": "attention.trgb",            // f32 [H, N_q, N*T]
//!     "key_states": "key_states.trgb",          // f32 [N*T, D_k]
//!     "timestamps": "timestamps.trgb"           // i64 [N], optional
//!   },
//!   "tokens_per_frame": 64,                     // optional, else (N*T)/N
//!   "spec": { ... },                            // optional, synthetic only
//!   "ground_truth": { ... }                     // optional, synthetic only
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{read_bundle_file, write_bundle_file, BundleError, TensorBundle};
use crate::frame::{FrameBudgetError, FrameFeatureSet, QueryEmbedding};
use crate::linalg::Matrix;
use crate::synth::ScenarioSpec;
use crate::token::{AttentionTensor, KeyStates, TokenBudgetError};

pub const MANIFEST_FILE: &str = "scenario.json";

pub const ROLE_PIXELS: &str = "pixels";
pub const ROLE_FRAME_EMBEDDINGS: &str = "frame_embeddings";
pub const ROLE_QUERY_EMBEDDING: &str = "query_embedding";
pub const ROLE_ATTENTION: &str = "attention";
pub const ROLE_KEY_STATES: &str = "key_states";
pub const ROLE_TIMESTAMPS: &str = "timestamps";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid {MANIFEST_FILE}: {0}")]
    Manifest(String),
    #[error("scenario has no \"{0}\" role")]
    MissingRole(&'static str),
    #[error("role \"{role}\": {source}")]
    Bundle { role: &'static str, source: BundleError },
    #[error("role \"{role}\": {message}")]
    Shape { role: &'static str, message: String },
    #[error(transparent)]
    Frames(#[from] FrameBudgetError),
    #[error(transparent)]
    Tokens(#[from] TokenBudgetError),
}

/// Planted structure of a synthetic scenario. Token indices are global over
/// all candidate tokens (`frame * T + local`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_frames: Vec<usize>,
    pub planted_tokens: Vec<usize>,
    /// Groups of near-duplicate key vectors.
    pub clusters: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioManifest {
    roles: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens_per_frame: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruth>,
}

/// Everything the pipeline consumes for one video and query.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub frames: FrameFeatureSet,
    pub query: QueryEmbedding,
    /// Attention over every candidate frame's tokens.
    pub attention: AttentionTensor,
    pub keys: KeyStates,
    pub tokens_per_frame: usize,
    pub spec: Option<ScenarioSpec>,
    pub ground_truth: Option<GroundTruth>,
}

impl Scenario {
    /// Checks cross-tensor shape agreement.
    pub fn new(
        frames: FrameFeatureSet,
        query: QueryEmbedding,
        attention: AttentionTensor,
        keys: KeyStates,
        tokens_per_frame: usize,
    ) -> Result<Self, ScenarioError> {
        let n = frames.len();
        if frames.embeddings().cols() != query.as_slice().len() {
            return Err(shape(
                ROLE_QUERY_EMBEDDING,
                format!(
                    "length {} does not match embedding width {}",
                    query.as_slice().len(),
                    frames.embeddings().cols()
                ),
            ));
        }
        if tokens_per_frame == 0 || attention.visual_tokens() != n * tokens_per_frame {
            return Err(shape(
                ROLE_ATTENTION,
                format!(
                    "{} visual tokens is not {n} frames x {tokens_per_frame} tokens",
                    attention.visual_tokens()
                ),
            ));
        }
        if keys.len() != attention.visual_tokens() {
            return Err(shape(
                ROLE_KEY_STATES,
                format!(
                    "{} rows, attention has {} tokens",
                    keys.len(),
                    attention.visual_tokens()
                ),
            ));
        }
        Ok(Self {
            frames,
            query,
            attention,
            keys,
            tokens_per_frame,
            spec: None,
            ground_truth: None,
        })
    }

    pub fn candidate_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn candidate_tokens(&self) -> usize {
        self.attention.visual_tokens()
    }

    pub fn load(dir: &Path) -> Result<Self, ScenarioError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|source| ScenarioError::Io {
            path: manifest_path.display().to_string(),
            source,
        })?;
        let manifest: ScenarioManifest =
            serde_json::from_str(&text).map_err(|e| ScenarioError::Manifest(e.to_string()))?;

        let load = |role: &'static str| -> Result<Option<TensorBundle>, ScenarioError> {
            match manifest.roles.get(role) {
                None => Ok(None),
                Some(file) => read_bundle_file(&dir.join(file))
                    .map(Some)
                    .map_err(|source| ScenarioError::Bundle { role, source }),
            }
        };
        let require = |role: &'static str| load(role)?.ok_or(ScenarioError::MissingRole(role));

        let pixels = matrix(ROLE_PIXELS, &require(ROLE_PIXELS)?)?;
        let embeddings = matrix(ROLE_FRAME_EMBEDDINGS, &require(ROLE_FRAME_EMBEDDINGS)?)?;
        let query = require(ROLE_QUERY_EMBEDDING)?;
        if query.shape().len() != 1 {
            return Err(shape(
                ROLE_QUERY_EMBEDDING,
                format!("expected rank 1, got {:?}", query.shape()),
            ));
        }
        let query = QueryEmbedding::new(f32_data(ROLE_QUERY_EMBEDDING, &query)?.to_vec())?;

        let n = pixels.rows();
        let frames = match load(ROLE_TIMESTAMPS)? {
            Some(ts) => {
                let values = ts
                    .as_i64()
                    .ok_or_else(|| shape(ROLE_TIMESTAMPS, "expected dtype i64".into()))?;
                if ts.shape().len() != 1 {
                    return Err(shape(ROLE_TIMESTAMPS, format!("expected rank 1, got {:?}", ts.shape())));
                }
                FrameFeatureSet::new(pixels, embeddings, values.to_vec())?
            }
            None => FrameFeatureSet::with_default_timestamps(pixels, embeddings)?,
        };

        let att = require(ROLE_ATTENTION)?;
        let &[h, nq, nv] = att.shape() else {
            return Err(shape(ROLE_ATTENTION, format!("expected rank 3, got {:?}", att.shape())));
        };
        let attention = AttentionTensor::new(h, nq, nv, f32_data(ROLE_ATTENTION, &att)?.to_vec())?;
        let keys = KeyStates::new(matrix(ROLE_KEY_STATES, &require(ROLE_KEY_STATES)?)?)?;

        let tokens_per_frame = match manifest.tokens_per_frame {
            Some(t) => t,
            None if n > 0 && nv % n == 0 => nv / n,
            None => {
                return Err(shape(
                    ROLE_ATTENTION,
                    format!("{nv} visual tokens do not split over {n} frames"),
                ))
            }
        };
        let mut scenario = Scenario::new(frames, query, attention, keys, tokens_per_frame)?;
        scenario.spec = manifest.spec;
        scenario.ground_truth = manifest.ground_truth;
        Ok(scenario)
    }

    /// Writes the bundles and `scenario.json` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), ScenarioError> {
        fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let px = self.frames.pixels();
        let emb = self.frames.embeddings();
        let bundles: [(&'static str, TensorBundle); 6] = [
            (
                ROLE_PIXELS,
                TensorBundle::from_f32(ROLE_PIXELS, vec![px.rows(), px.cols()], px.as_slice().to_vec()),
            ),
            (
                ROLE_FRAME_EMBEDDINGS,
                TensorBundle::from_f32(
                    ROLE_FRAME_EMBEDDINGS,
                    vec![emb.rows(), emb.cols()],
                    emb.as_slice().to_vec(),
                ),
            ),
            (
                ROLE_QUERY_EMBEDDING,
                TensorBundle::from_f32(
                    ROLE_QUERY_EMBEDDING,
                    vec![self.query.as_slice().len()],
                    self.query.as_slice().to_vec(),
                ),
            ),
            (
                ROLE_ATTENTION,
                TensorBundle::from_f32(
                    ROLE_ATTENTION,
                    vec![
                        self.attention.heads(),
                        self.attention.query_tokens(),
                        self.attention.visual_tokens(),
                    ],
                    self.attention.as_slice().to_vec(),
                ),
            ),
            (
                ROLE_KEY_STATES,
                TensorBundle::from_f32(
                    ROLE_KEY_STATES,
                    vec![self.keys.len(), self.keys.vectors().cols()],
                    self.keys.vectors().as_slice().to_vec(),
                ),
            ),
            (
                ROLE_TIMESTAMPS,
                TensorBundle::from_i64(
                    ROLE_TIMESTAMPS,
                    vec![self.frames.len()],
                    self.frames.timestamps().to_vec(),
                ),
            ),
        ]
        .map(|(role, b)| (role, b.expect("scenario tensors satisfy bundle invariants")));

        let mut roles = BTreeMap::new();
        for (role, bundle) in &bundles {
            let file = format!("{role}.trgb");
            write_bundle_file(bundle, &dir.join(&file)).map_err(|source| ScenarioError::Bundle { role, source })?;
            roles.insert(role.to_string(), file);
        }
        let manifest = ScenarioManifest {
            roles,
            tokens_per_frame: Some(self.tokens_per_frame),
            spec: self.spec.clone(),
            ground_truth: self.ground_truth.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| ScenarioError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn shape(role: &'static str, message: String) -> ScenarioError {
    ScenarioError::Shape { role, message }
}

fn f32_data<'a>(role: &'static str, b: &'a TensorBundle) -> Result<&'a [f32], ScenarioError> {
    b.as_f32().ok_or_else(|| shape(role, "expected dtype f32".into()))
}

fn matrix(role: &'static str, b: &TensorBundle) -> Result<Matrix, ScenarioError> {
    let &[rows, cols] = b.shape() else {
        return Err(shape(role, format!("expected rank 2, got {:?}", b.shape())));
    };
    Matrix::new(rows, cols, f32_data(role, b)?.to_vec()).ok_or_else(|| shape(role, "element count mismatch".into()))
}
